//! Cross-branch variational fusion.
//!
//! Each branch feature is encoded as a per-voxel diagonal Gaussian, sampled
//! with the reparameterization trick, re-encoded by a second (attention)
//! encoder, and the two attention latents are softmax-normalized over the
//! branch axis into fusion weights.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vf_tensor::{Graph, Scalar, Tensor, TensorError, Var};

use crate::error::Result;
use crate::nn::{Bound, Builder, Conv, Init, ParamId};

/// Bound on `log σ` before exponentiation.
pub const LOGSIGMA_CLAMP: f64 = 10.0;

/// Source of reparameterization noise.
pub enum Noise<'a> {
    /// `eps = 0`: the latent mean, used for evaluation.
    Mean,
    Sample(&'a mut ChaCha8Rng),
}

impl Noise<'_> {
    pub fn draw<T: Scalar>(&mut self, shape: &[usize]) -> Option<Tensor<T>> {
        match self {
            Noise::Mean => None,
            Noise::Sample(rng) => {
                let n: usize = shape.iter().product();
                let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                Some(Tensor::from_f64(shape, &v).expect("shape and data agree"))
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LatentGaussian {
    pub mu: Var,
    pub sigma: Var,
}

/// Two-layer per-voxel MLP (1×1×1 convolutions) with `μ` and `log σ` heads.
#[derive(Debug, Clone)]
pub struct LatentEncoder {
    pub hidden: Conv,
    pub mu: Conv,
    pub logsigma: Conv,
}

impl LatentEncoder {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, name: &str, c: usize, logsigma_init: f64) -> Self {
        bd.scope(name, true, |bd| {
            let hidden = Conv::pointwise(bd, "hidden", c, c, Init::He);
            let mu = Conv::pointwise(bd, "mu", c, c, Init::Lecun);
            let logsigma = Conv::pointwise(bd, "logsigma", c, c, Init::Normal(0.01));
            let b = logsigma.b.expect("pointwise conv has bias");
            bd.store.value_mut(b).data_mut().iter_mut().for_each(|v| *v = T::lit(logsigma_init));
            LatentEncoder { hidden, mu, logsigma }
        })
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, f: Var) -> Result<LatentGaussian> {
        let h = self.hidden.forward(g, p, f)?;
        let h = g.gelu(h);
        let mu = self.mu.forward(g, p, h)?;
        let ls = self.logsigma.forward(g, p, h)?;
        Ok(latent_from_heads(g, mu, ls))
    }
}

/// `σ = exp(clamp(log σ, −10, 10))`.
pub fn latent_from_heads<T: Scalar>(g: &mut Graph<T>, mu: Var, logsigma: Var) -> LatentGaussian {
    let ls = g.clamp(logsigma, T::lit(-LOGSIGMA_CLAMP), T::lit(LOGSIGMA_CLAMP));
    LatentGaussian { mu, sigma: g.exp(ls) }
}

/// `Z = μ + σ ⊙ ε` with `ε` a constant; `None` means `ε = 0`.
pub fn reparameterize<T: Scalar>(g: &mut Graph<T>, lat: LatentGaussian, eps: Option<Tensor<T>>) -> Result<Var> {
    let Some(eps) = eps else {
        return Ok(lat.mu);
    };
    if eps.shape() != g.shape(lat.mu) {
        return Err(TensorError::Shape {
            op: "reparameterize",
            lhs: g.shape(lat.mu).to_vec(),
            rhs: eps.shape().to_vec(),
        }
        .into());
    }
    let eps = g.constant(eps);
    let s = g.mul(lat.sigma, eps)?;
    Ok(g.add(lat.mu, s)?)
}

#[derive(Debug, Clone, Copy)]
pub struct FusionWeights {
    pub beta_v: Var,
    pub beta_c: Var,
}

/// Softmax over a fresh two-element branch axis, independently per voxel and channel.
pub fn fusion_weights<T: Scalar>(g: &mut Graph<T>, z_av: Var, z_ac: Var) -> Result<FusionWeights> {
    let shape = g.shape(z_av).to_vec();
    if g.shape(z_ac) != shape.as_slice() {
        return Err(TensorError::Shape {
            op: "fusion_weights",
            lhs: shape,
            rhs: g.shape(z_ac).to_vec(),
        }
        .into());
    }
    let n: usize = shape.iter().product();
    let a = g.reshape(z_av, &[1, n])?;
    let c = g.reshape(z_ac, &[1, n])?;
    let stacked = g.concat(&[a, c], 0)?;
    let w = g.softmax(stacked, 0)?;
    let bv = g.narrow(w, 0, 0, 1)?;
    let bc = g.narrow(w, 0, 1, 1)?;
    Ok(FusionWeights {
        beta_v: g.reshape(bv, &shape)?,
        beta_c: g.reshape(bc, &shape)?,
    })
}

/// `β_v ⊙ Z_v + β_c ⊙ Z_c`, before the `W_m` projection.
pub fn mix<T: Scalar>(g: &mut Graph<T>, z_v: Var, z_c: Var, w: FusionWeights) -> Result<Var> {
    let a = g.mul(w.beta_v, z_v)?;
    let b = g.mul(w.beta_c, z_c)?;
    Ok(g.add(a, b)?)
}

pub struct CvfOut {
    pub fuse: Var,
    pub latent_v: LatentGaussian,
    pub latent_c: LatentGaussian,
    pub z_v: Var,
    pub z_c: Var,
    pub z_av: Var,
    pub z_ac: Var,
    pub weights: FusionWeights,
}

#[derive(Debug, Clone)]
pub struct Cvf {
    pub e_v: LatentEncoder,
    pub e_c: LatentEncoder,
    pub e_av: LatentEncoder,
    pub e_ac: LatentEncoder,
    /// `W_m`: channel projection without bias, initialized to the identity.
    pub w_m: ParamId,
}

impl Cvf {
    pub fn new<T: Scalar>(bd: &mut Builder<'_, T>, c: usize, logsigma_init: f64) -> Self {
        bd.scope("cvf", true, |bd| {
            let e_v = LatentEncoder::new(bd, "e_v", c, logsigma_init);
            let e_c = LatentEncoder::new(bd, "e_c", c, logsigma_init);
            let e_av = LatentEncoder::new(bd, "e_av", c, logsigma_init);
            let e_ac = LatentEncoder::new(bd, "e_ac", c, logsigma_init);
            let w_m = bd.param("w_m", &[c, c, 1, 1, 1], c, Init::Const(0.0));
            let w = bd.store.value_mut(w_m).data_mut();
            (0..c).for_each(|i| w[i * c + i] = T::one());
            Cvf {
                e_v,
                e_c,
                e_av,
                e_ac,
                w_m,
            }
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, f_v: Var, f_c: Var, noise: &mut Noise<'_>) -> Result<CvfOut> {
        let shape = g.shape(f_v).to_vec();
        let latent_v = self.e_v.encode(g, p, f_v)?;
        let latent_c = self.e_c.encode(g, p, f_c)?;
        let z_v = reparameterize(g, latent_v, noise.draw(&shape))?;
        let z_c = reparameterize(g, latent_c, noise.draw(&shape))?;
        let la = self.e_av.encode(g, p, z_v)?;
        let z_av = reparameterize(g, la, noise.draw(&shape))?;
        let lc = self.e_ac.encode(g, p, z_c)?;
        let z_ac = reparameterize(g, lc, noise.draw(&shape))?;
        let weights = fusion_weights(g, z_av, z_ac)?;
        let mixed = mix(g, z_v, z_c, weights)?;
        let fuse = g.conv3d(mixed, p.var(self.w_m), None, vf_tensor::ConvGeom::unit())?;
        Ok(CvfOut {
            fuse,
            latent_v,
            latent_c,
            z_v,
            z_c,
            z_av,
            z_ac,
            weights,
        })
    }
}
