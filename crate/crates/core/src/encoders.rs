//! The two encoder branches and the shared UNet decoder.
//!
//! The ViT branch tokenizes the volume into non-overlapping patches, runs
//! pre-norm transformer blocks and maps the tokens back onto the deepest CNN
//! grid, where the AGE module (channel and spatial attention plus a fusion
//! layer) refines them into `F_v`. The CNN branch is a four-scale UNet
//! encoder whose deepest output is `F_c`.

use vf_tensor::{ConvGeom, Graph, Scalar, Tensor, UpsampleMode, Var};

use crate::config::{CnnEncoderConfig, ViTConfig};
use crate::error::{Result, VfError};
use crate::nn::{channel_pool, expand_like, Bound, Builder, Conv, ConvBlock, Init, LayerNorm, Linear, ParamId};

/// Row-stochastic `[out, in]` matrix of 1-D linear interpolation with the
/// half-pixel convention and edge clamping. Identity when `out == in`.
pub fn interp_matrix_1d(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let f = src - i0 as f64;
        m[o * n_in + i0] += 1.0 - f;
        m[o * n_in + i1] += f;
    }
    m
}

/// Kronecker product of the per-axis interpolation matrices: maps a
/// row-major `from` grid to a row-major `to` grid.
pub fn interp_matrix_3d(from: [usize; 3], to: [usize; 3]) -> Vec<f64> {
    let ms: Vec<Vec<f64>> = (0..3).map(|a| interp_matrix_1d(from[a], to[a])).collect();
    let (ti, to_n) = (from.iter().product::<usize>(), to.iter().product::<usize>());
    let mut out = vec![0.0; to_n * ti];
    for od in 0..to[0] {
        for oh in 0..to[1] {
            for ow in 0..to[2] {
                let o = (od * to[1] + oh) * to[2] + ow;
                for id in 0..from[0] {
                    let wd = ms[0][od * from[0] + id];
                    if wd == 0.0 {
                        continue;
                    }
                    for ih in 0..from[1] {
                        let wh = wd * ms[1][oh * from[1] + ih];
                        if wh == 0.0 {
                            continue;
                        }
                        for iw in 0..from[2] {
                            let i = (id * from[1] + ih) * from[2] + iw;
                            out[o * ti + i] += wh * ms[2][ow * from[2] + iw];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Trilinearly resizes token grids: `[N, T_from, E] -> [N, T_to, E]`.
pub fn resize_tokens<T: Scalar>(g: &mut Graph<T>, x: Var, from: [usize; 3], to: [usize; 3]) -> Result<Var> {
    if from == to {
        return Ok(x);
    }
    let s = g.shape(x).to_vec();
    let (tf, tt): (usize, usize) = (from.iter().product(), to.iter().product());
    let m = Tensor::from_f64(&[tt, tf], &interp_matrix_3d(from, to))?;
    let m = g.constant(m);
    let mut parts = Vec::with_capacity(s[0]);
    for n in 0..s[0] {
        let xn = g.narrow(x, 0, n, 1)?;
        let xn = g.reshape(xn, &[tf, s[2]])?;
        let yn = g.matmul(m, xn)?;
        parts.push(g.reshape(yn, &[1, tt, s[2]])?);
    }
    Ok(g.concat(&parts, 0)?)
}

fn spatial(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Conv,
    pub pos: ParamId,
    /// Token grid the positional embedding was learned on.
    pub pos_grid: [usize; 3],
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, cfg: &ViTConfig, in_channels: usize, nominal: [usize; 3]) -> Self {
        let p = cfg.patch_size;
        let pos_grid = nominal.map(|d| (d / p).max(1));
        let t: usize = pos_grid.iter().product();
        PatchEmbed {
            proj: Conv::new(bd, "patch", in_channels, cfg.embed_dim, p, ConvGeom::new([p; 3], [0; 3]), Init::Lecun),
            pos: bd.param("pos", &[t, cfg.embed_dim], 1, Init::Normal(0.02)),
            pos_grid,
            patch: p,
        }
    }

    /// Returns `[N, T, E]` tokens and the token grid.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<(Var, [usize; 3])> {
        let dims = spatial(g.shape(x));
        if dims.iter().any(|&d| d % self.patch != 0) {
            return Err(VfError::config(
                "model.vit.patch_size",
                format!("input extents {dims:?} not divisible by patch size {}", self.patch),
            ));
        }
        let y = self.proj.forward(g, p, x)?;
        let ys = g.shape(y).to_vec();
        let grid = spatial(&ys);
        let t: usize = grid.iter().product();
        let y = g.reshape(y, &[ys[0], ys[1], t])?;
        let tokens = g.permute(y, &[0, 2, 1])?;
        let e = ys[1];
        let pos = g.reshape(p.var(self.pos), &[1, self.pos_grid.iter().product(), e])?;
        let pos = resize_tokens(g, pos, self.pos_grid, grid)?;
        let pos = g.expand(pos, &[ys[0], t, e])?;
        Ok((g.add(tokens, pos)?, grid))
    }
}

#[derive(Debug, Clone)]
pub struct VitBlock {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl VitBlock {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, e: usize, heads: usize, mlp_ratio: usize) -> Self {
        VitBlock {
            norm1: LayerNorm::new(bd, "norm1", e),
            qkv: Linear::new(bd, "qkv", e, 3 * e, Init::Lecun),
            proj: Linear::new(bd, "proj", e, e, Init::Lecun),
            norm2: LayerNorm::new(bd, "norm2", e),
            fc1: Linear::new(bd, "fc1", e, mlp_ratio * e, Init::Lecun),
            fc2: Linear::new(bd, "fc2", mlp_ratio * e, e, Init::Lecun),
            heads,
        }
    }

    /// `x: [N, T, E]`. Also returns the attention weights `[N·heads, T, T]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        let (n, t, e) = (s[0], s[1], s[2]);
        let (h, dh) = (self.heads, e / self.heads);
        let x2 = g.reshape(x, &[n * t, e])?;

        let hn = self.norm1.forward(g, p, x2)?;
        let qkv = self.qkv.forward(g, p, hn)?;
        let mut heads = Vec::with_capacity(3);
        for (i, perm) in [[0, 2, 1, 3], [0, 2, 3, 1], [0, 2, 1, 3]].iter().enumerate() {
            let part = g.narrow(qkv, 1, i * e, e)?;
            let part = g.reshape(part, &[n, t, h, dh])?;
            let part = g.permute(part, perm)?;
            let shape = if i == 1 { [n * h, dh, t] } else { [n * h, t, dh] };
            heads.push(g.reshape(part, &shape)?);
        }
        let scores = g.bmm(heads[0], heads[1])?;
        let scores = g.mul_scalar(scores, T::lit(1.0 / (dh as f64).sqrt()));
        let att = g.softmax(scores, 2)?;
        let ctx = g.bmm(att, heads[2])?;
        let ctx = g.reshape(ctx, &[n, h, t, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[n * t, e])?;
        let ctx = self.proj.forward(g, p, ctx)?;
        let x2 = g.add(x2, ctx)?;

        let hn = self.norm2.forward(g, p, x2)?;
        let m = self.fc1.forward(g, p, hn)?;
        let m = g.gelu(m);
        let m = self.fc2.forward(g, p, m)?;
        let x2 = g.add(x2, m)?;
        Ok((g.reshape(x2, &[n, t, e])?, att))
    }
}

/// Output of the ViT branch before AGE.
pub struct VitOut {
    /// Global feature on the deepest CNN grid, `[N, C, d, h, w]`.
    pub grid: Var,
    pub tokens: Var,
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Vit {
    pub embed: PatchEmbed,
    pub blocks: Vec<VitBlock>,
    pub head_norm: LayerNorm,
    pub head_proj: Conv,
}

impl Vit {
    /// Patch/positional embeddings and all but the last `trainable_tail`
    /// blocks are registered as frozen.
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, cfg: &ViTConfig, in_channels: usize, nominal: [usize; 3], out_channels: usize) -> Self {
        let first_trainable = cfg.depth - cfg.trainable_tail;
        bd.scope("vit", true, |bd| {
            let embed = bd.scope("embed", false, |bd| PatchEmbed::new(bd, cfg, in_channels, nominal));
            let blocks = (0..cfg.depth)
                .map(|i| {
                    bd.scope(&format!("blocks.{i}"), i >= first_trainable, |bd| {
                        VitBlock::new(bd, cfg.embed_dim, cfg.heads, cfg.mlp_ratio)
                    })
                })
                .collect();
            let (head_norm, head_proj) = bd.scope("head", true, |bd| {
                (
                    LayerNorm::new(bd, "norm", cfg.embed_dim),
                    Conv::pointwise(bd, "proj", cfg.embed_dim, out_channels, Init::Lecun),
                )
            });
            Vit {
                embed,
                blocks,
                head_norm,
                head_proj,
            }
        })
    }

    /// Encodes `x: [N, C_in, D, H, W]` and regrids to `target` (the deepest CNN grid).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, target: [usize; 3]) -> Result<VitOut> {
        let (mut tok, grid) = self.embed.forward(g, p, x)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, att) = b.forward(g, p, tok)?;
            tok = y;
            attention.push(att);
        }
        let s = g.shape(tok).to_vec();
        let (n, e) = (s[0], s[2]);
        let flat = g.reshape(tok, &[n * s[1], e])?;
        let flat = self.head_norm.forward(g, p, flat)?;
        let tokens = g.reshape(flat, &[n, s[1], e])?;
        let resized = resize_tokens(g, tokens, grid, target)?;
        let y = g.permute(resized, &[0, 2, 1])?;
        let y = g.reshape(y, &[n, e, target[0], target[1], target[2]])?;
        let grid = self.head_proj.forward(g, p, y)?;
        Ok(VitOut {
            grid,
            tokens,
            attention,
        })
    }
}

/// Attention-guided enhancement: `F + Conv1(CA(F) ⊙ SA(F) ⊙ F)`.
#[derive(Debug, Clone)]
pub struct Age {
    pub ca1: Linear,
    pub ca2: Linear,
    pub sa: Conv,
    pub fuse: Conv,
}

pub struct AgeOut {
    pub out: Var,
    /// Channel gate `[N, C, 1, 1, 1]`.
    pub ca: Var,
    /// Spatial gate `[N, 1, d, h, w]`.
    pub sa: Var,
}

impl Age {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, channels: usize, reduction: usize, sa_kernel: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        bd.scope("age", true, |bd| Age {
            ca1: Linear::new(bd, "ca1", channels, hidden, Init::He),
            ca2: Linear::new(bd, "ca2", hidden, channels, Init::Lecun),
            sa: Conv::same(bd, "sa", 2, 1, sa_kernel, Init::Lecun),
            fuse: Conv::pointwise(bd, "fuse", channels, channels, Init::Lecun),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, f: Var) -> Result<AgeOut> {
        let s = g.shape(f).to_vec();
        let (n, c) = (s[0], s[1]);
        let gap = g.mean(f, &[2, 3, 4], false)?;
        let h = self.ca1.forward(g, p, gap)?;
        let h = g.relu(h);
        let h = self.ca2.forward(g, p, h)?;
        let h = g.sigmoid(h);
        let ca = g.reshape(h, &[n, c, 1, 1, 1])?;

        let pooled = channel_pool(g, f)?;
        let sa = self.sa.forward(g, p, pooled)?;
        let sa = g.sigmoid(sa);

        let ca_full = g.expand(ca, &s)?;
        let sa_full = expand_like(g, sa, f)?;
        let gated = g.mul(ca_full, sa_full)?;
        let gated = g.mul(gated, f)?;
        let fused = self.fuse.forward(g, p, gated)?;
        Ok(AgeOut {
            out: g.add(f, fused)?,
            ca,
            sa,
        })
    }
}

/// Four-scale UNet encoder: two conv blocks per scale, stride-2 conv between scales.
#[derive(Debug, Clone)]
pub struct CnnEncoder {
    pub stages: Vec<(ConvBlock, ConvBlock)>,
    pub down: Vec<Conv>,
}

impl CnnEncoder {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, cfg: &CnnEncoderConfig, in_channels: usize) -> Self {
        bd.scope("cnn", true, |bd| {
            let mut stages = Vec::new();
            let mut down = Vec::new();
            let mut cin = in_channels;
            for i in 0..cfg.num_scales {
                let c = cfg.channels(i);
                stages.push((
                    ConvBlock::new(bd, &format!("enc{i}.a"), cin, c, cfg.norm_groups),
                    ConvBlock::new(bd, &format!("enc{i}.b"), c, c, cfg.norm_groups),
                ));
                if i + 1 < cfg.num_scales {
                    down.push(Conv::new(bd, &format!("down{i}"), c, c, 2, ConvGeom::new([2; 3], [0; 3]), Init::He));
                }
                cin = c;
            }
            CnnEncoder { stages, down }
        })
    }

    /// Per-scale features, full resolution first; the last entry is `F_c`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let dims = spatial(g.shape(x));
        let m = 1usize << (self.stages.len() - 1);
        if dims.iter().any(|&d| d % m != 0) {
            return Err(VfError::config("input", format!("extents {dims:?} must be divisible by {m}")));
        }
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for (i, (a, b)) in self.stages.iter().enumerate() {
            let y = a.forward(g, p, cur)?;
            let y = b.forward(g, p, y)?;
            feats.push(y);
            if let Some(d) = self.down.get(i) {
                cur = d.forward(g, p, y)?;
            }
        }
        Ok(feats)
    }
}

/// Symmetric UNet decoder with skips from the CNN encoder.
#[derive(Debug, Clone)]
pub struct Decoder {
    /// Indexed by target scale: `stages[i]` produces the scale-`i` feature.
    pub stages: Vec<(ConvBlock, ConvBlock)>,
    pub head: Conv,
}

pub struct DecoderOut {
    /// Decoder features at full, 1/2, 1/4, 1/8 resolution; the last is the fused bottleneck.
    pub feats: Vec<Var>,
    pub logits: Var,
}

impl Decoder {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, cfg: &CnnEncoderConfig, num_classes: usize) -> Self {
        bd.scope("dec", true, |bd| {
            let stages = (0..cfg.num_scales - 1)
                .map(|i| {
                    let (c, below) = (cfg.channels(i), cfg.channels(i + 1));
                    (
                        ConvBlock::new(bd, &format!("up{i}.a"), c + below, c, cfg.norm_groups),
                        ConvBlock::new(bd, &format!("up{i}.b"), c, c, cfg.norm_groups),
                    )
                })
                .collect();
            let head = Conv::pointwise(bd, "head", cfg.channels(0), num_classes, Init::Lecun);
            Decoder { stages, head }
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, fuse: Var, skips: &[Var]) -> Result<DecoderOut> {
        let mut feats = vec![fuse; self.stages.len() + 1];
        let mut cur = fuse;
        for i in (0..self.stages.len()).rev() {
            let up = g.upsample(cur, 2, UpsampleMode::Trilinear)?;
            let (us, ss) = (g.shape(up).to_vec(), g.shape(skips[i]).to_vec());
            if us[0] != ss[0] || us[2..] != ss[2..] {
                return Err(vf_tensor::TensorError::Shape {
                    op: "decoder skip",
                    lhs: us,
                    rhs: ss,
                }
                .into());
            }
            let cat = g.concat(&[up, skips[i]], 1)?;
            let (a, b) = &self.stages[i];
            let y = a.forward(g, p, cat)?;
            cur = b.forward(g, p, y)?;
            feats[i] = cur;
        }
        let logits = self.head.forward(g, p, cur)?;
        Ok(DecoderOut { feats, logits })
    }
}
