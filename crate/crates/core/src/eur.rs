//! Evidential uncertainty refinement.
//!
//! Class logits become Dirichlet evidence; the resulting uncertainty gates a
//! refinement that blends the projected initial prediction with a
//! multi-scale fusion of decoder features.

use num_traits::Num;
use vf_tensor::{Graph, Scalar, Tensor, TensorError, UpsampleMode, Var};

use crate::config::EurConfig;
use crate::error::Result;
use crate::nn::{channel_pool, expand_like, one_minus, Bound, Builder, Conv, Init};

/// Dirichlet state of one voxel, in any exact or floating field.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief<N> {
    pub alpha: Vec<N>,
    pub strength: N,
    pub uncertainty: N,
    /// Per-class belief masses `e_k / S`.
    pub mass: Vec<N>,
}

/// `α = e + 1`, `S = Σ α`, `U = K / S`, `b_k = e_k / S`.
pub fn belief<N: Num + Clone>(e: &[N]) -> Belief<N> {
    let alpha: Vec<N> = e.iter().map(|v| v.clone() + N::one()).collect();
    let strength = alpha.iter().cloned().fold(N::zero(), |a, b| a + b);
    let k = e.iter().fold(N::zero(), |a, _| a + N::one());
    let mass = e.iter().map(|v| v.clone() / strength.clone()).collect();
    Belief {
        uncertainty: k / strength.clone(),
        alpha,
        strength,
        mass,
    }
}

/// Graph form of the Dirichlet state for `[N, K, ...]` evidence.
#[derive(Debug, Clone, Copy)]
pub struct DirichletBelief {
    pub e: Var,
    pub alpha: Var,
    /// `[N, 1, ...]`
    pub s: Var,
    /// `[N, 1, ...]`
    pub u: Var,
}

pub fn evidence_from_logits<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Var {
    g.softplus(logits)
}

pub fn dirichlet_params<T: Scalar>(g: &mut Graph<T>, e: Var) -> Result<DirichletBelief> {
    let k = g.shape(e)[1];
    let alpha = g.add_scalar(e, T::one());
    let s = g.sum(alpha, &[1], true)?;
    let kc = g.constant(Tensor::full(g.shape(s), T::lit(k as f64)));
    let u = g.div(kc, s)?;
    Ok(DirichletBelief { e, alpha, s, u })
}

pub fn belief_from_logits<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<DirichletBelief> {
    let e = evidence_from_logits(g, logits);
    dirichlet_params(g, e)
}

/// Intermediates of the multi-scale fusion.
pub struct FusionOut {
    /// `F_i^t`, full resolution first.
    pub top_down: Vec<Var>,
    /// `F_c`: the concatenation of all scales at full resolution.
    pub cat: Var,
    pub gate: Var,
    pub fusion: Var,
}

/// `SAB(F) = sigmoid(conv(cat(mean_C F, max_C F))) ⊙ F`; returns `(gate, SAB(F))`.
pub fn spatial_attention<T: Scalar>(g: &mut Graph<T>, p: &Bound, conv: &Conv, f: Var) -> Result<(Var, Var)> {
    let pooled = channel_pool(g, f)?;
    let logit = conv.forward(g, p, pooled)?;
    let gate = g.sigmoid(logit);
    let gate_full = expand_like(g, gate, f)?;
    Ok((gate, g.mul(gate_full, f)?))
}

/// `M_r = (P' + F_fusion) ⊙ exp(−U)`, with `U` broadcast over channels.
pub fn reliable_mask<T: Scalar>(g: &mut Graph<T>, p_proj: Var, fusion: Var, u: Var) -> Result<Var> {
    let sum = g.add(p_proj, fusion)?;
    let nu = g.neg(u);
    let damp = g.exp(nu);
    let damp = expand_like(g, damp, sum)?;
    Ok(g.mul(sum, damp)?)
}

/// `λ ⊙ P' + (1 − λ) ⊙ F_fusion` with a single-channel `λ`.
pub fn blend<T: Scalar>(g: &mut Graph<T>, lambda: Var, p_proj: Var, fusion: Var) -> Result<Var> {
    let l = expand_like(g, lambda, p_proj)?;
    let a = g.mul(l, p_proj)?;
    let inv = one_minus(g, l);
    let b = g.mul(inv, fusion)?;
    Ok(g.add(a, b)?)
}

pub struct EurOut {
    pub fusion: FusionOut,
    pub p_proj: Var,
    pub mask: Var,
    pub lambda: Var,
    pub refined: Var,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct Eur {
    /// One 1×1×1 projection per decoder scale, full resolution first.
    pub scale_proj: Vec<Conv>,
    pub sab: Conv,
    pub p_proj: Conv,
    pub lambda: Conv,
    pub head: Conv,
    pub mode: UpsampleMode,
}

impl Eur {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, cfg: &EurConfig, scale_channels: &[usize], num_classes: usize) -> Self {
        let w = cfg.fusion_width;
        let cat = w * scale_channels.len();
        bd.scope("eur", true, |bd| Eur {
            scale_proj: scale_channels
                .iter()
                .enumerate()
                .map(|(i, &c)| Conv::pointwise(bd, &format!("proj{i}"), c, w, Init::Lecun))
                .collect(),
            sab: Conv::same(bd, "sab", 2, 1, cfg.sab_kernel, Init::Lecun),
            p_proj: Conv::pointwise(bd, "p_proj", num_classes, cat, Init::Lecun),
            lambda: Conv::pointwise(bd, "lambda", cat, 1, Init::Lecun),
            head: Conv::pointwise(bd, "head", cat, num_classes, Init::Lecun),
            mode: cfg.upsample.into(),
        })
    }

    /// Top-down accumulation over the decoder scales, upsampling to full
    /// resolution, concatenation and the residual spatial attention block.
    pub fn multiscale_fuse<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, feats: &[Var]) -> Result<FusionOut> {
        let n = feats.len();
        if n != self.scale_proj.len() {
            return Err(TensorError::Shape {
                op: "multiscale_fuse",
                lhs: vec![n],
                rhs: vec![self.scale_proj.len()],
            }
            .into());
        }
        let mut top_down = vec![feats[0]; n];
        top_down[n - 1] = self.scale_proj[n - 1].forward(g, p, feats[n - 1])?;
        for i in (0..n - 1).rev() {
            let local = self.scale_proj[i].forward(g, p, feats[i])?;
            let up = g.upsample(top_down[i + 1], 2, self.mode)?;
            top_down[i] = g.add(local, up)?;
        }
        let full: Vec<Var> = top_down
            .iter()
            .enumerate()
            .map(|(i, &f)| g.upsample(f, 1 << i, self.mode))
            .collect::<std::result::Result<_, _>>()?;
        let cat = g.concat(&full, 1)?;
        let (gate, att) = spatial_attention(g, p, &self.sab, cat)?;
        let fusion = g.add(cat, att)?;
        Ok(FusionOut {
            top_down,
            cat,
            gate,
            fusion,
        })
    }

    /// `probs`: initial class probabilities `P`; `u`: uncertainty `[N,1,...]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, probs: Var, u: Var, feats: &[Var]) -> Result<EurOut> {
        let fusion = self.multiscale_fuse(g, p, feats)?;
        let p_proj = self.p_proj.forward(g, p, probs)?;
        let mask = reliable_mask(g, p_proj, fusion.fusion, u)?;
        let r = g.relu(mask);
        let l = self.lambda.forward(g, p, r)?;
        let lambda = g.sigmoid(l);
        let refined = blend(g, lambda, p_proj, fusion.fusion)?;
        let logits = self.head.forward(g, p, refined)?;
        Ok(EurOut {
            fusion,
            p_proj,
            mask,
            lambda,
            refined,
            logits,
        })
    }
}
