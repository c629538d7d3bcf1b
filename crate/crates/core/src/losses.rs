//! Segmentation objective: Dice + weighted cross-entropy, plus the annealed
//! Dirichlet KL regularizer on misleading evidence.
//!
//! All losses take `[N, K, ...]` tensors; targets are one-hot constants.

use vf_tensor::special::ln_gamma;
use vf_tensor::{Graph, Scalar, Tensor, Var};

use crate::config::{ClassWeightMode, LossConfig};
use crate::error::{Result, VfError};
use crate::nn::one_minus;

/// Lower clamp on probabilities inside the logarithm.
pub const PROB_CLAMP: f64 = 1e-7;
/// Range of the inverse-frequency class weights before normalization.
pub const WEIGHT_RANGE: (f64, f64) = (0.1, 10.0);

/// One-hot encoding of `labels` (spatial volume of one sample) as `[1, K, ...]`.
pub fn one_hot<T: Scalar>(labels: &[u8], k: usize, dims: &[usize]) -> Result<Tensor<T>> {
    let n: usize = dims.iter().product();
    if labels.len() != n {
        return Err(vf_tensor::TensorError::Shape {
            op: "one_hot",
            lhs: vec![labels.len()],
            rhs: dims.to_vec(),
        }
        .into());
    }
    let mut out = vec![T::zero(); k * n];
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= k {
            return Err(VfError::Contract {
                op: "one_hot",
                msg: format!("label {l} out of range for {k} classes"),
            });
        }
        out[l * n + i] = T::one();
    }
    let mut shape = vec![1, k];
    shape.extend_from_slice(dims);
    Ok(Tensor::new(&shape, out)?)
}

/// Per-class weights normalized to mean 1.
///
/// Inverse-frequency weights are `1 / (K f_k)` clamped to [`WEIGHT_RANGE`]
/// (an absent class gets the upper bound).
pub fn class_weights(labels: &[u8], k: usize, mode: ClassWeightMode) -> Vec<f64> {
    let raw: Vec<f64> = match mode {
        ClassWeightMode::Uniform => vec![1.0; k],
        ClassWeightMode::InverseFrequency => {
            let mut counts = vec![0usize; k];
            labels.iter().for_each(|&l| counts[(l as usize).min(k - 1)] += 1);
            let n = labels.len().max(1) as f64;
            counts
                .iter()
                .map(|&c| {
                    let f = c as f64 / n;
                    if f == 0.0 {
                        WEIGHT_RANGE.1
                    } else {
                        (1.0 / (k as f64 * f)).clamp(WEIGHT_RANGE.0, WEIGHT_RANGE.1)
                    }
                })
                .collect()
        }
    };
    normalize_weights(&raw)
}

pub fn normalize_weights(w: &[f64]) -> Vec<f64> {
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    w.iter().map(|v| v / mean).collect()
}

/// Every axis except the class axis.
fn non_class_axes(rank: usize) -> Vec<usize> {
    std::iter::once(0).chain(2..rank).collect()
}

fn voxels(shape: &[usize]) -> usize {
    shape[0] * shape[2..].iter().product::<usize>()
}

/// `1 − mean_k (2 Σ P·Y + s) / (Σ P + Σ Y + s)`, background included.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, p: Var, y: Var, smooth: f64) -> Result<Var> {
    let axes = non_class_axes(g.shape(p).len());
    let py = g.mul(p, y)?;
    let inter = g.sum(py, &axes, false)?;
    let ps = g.sum(p, &axes, false)?;
    let ys = g.sum(y, &axes, false)?;
    let num = g.mul_scalar(inter, T::lit(2.0));
    let num = g.add_scalar(num, T::lit(smooth));
    let den = g.add(ps, ys)?;
    let den = g.add_scalar(den, T::lit(smooth));
    let ratio = g.div(num, den)?;
    let mean = g.mean_all(ratio);
    Ok(one_minus(g, mean))
}

/// `−mean_voxels Σ_k w_k Y_k ln clamp(P_k)`; `weights` must already have mean 1.
pub fn wce_loss<T: Scalar>(g: &mut Graph<T>, p: Var, y: Var, weights: &[f64]) -> Result<Var> {
    let shape = g.shape(p).to_vec();
    let k = shape[1];
    if weights.len() != k {
        return Err(vf_tensor::TensorError::Shape {
            op: "wce_loss",
            lhs: vec![k],
            rhs: vec![weights.len()],
        }
        .into());
    }
    let inner: usize = shape[2..].iter().product();
    let mut wy = g.value(y).clone();
    for (i, v) in wy.data_mut().iter_mut().enumerate() {
        *v *= T::lit(weights[(i / inner) % k]);
    }
    let wy = g.constant(wy);
    let pc = g.clamp(p, T::lit(PROB_CLAMP), T::one());
    let lp = g.ln(pc);
    let t = g.mul(wy, lp)?;
    let s = g.sum_all(t);
    Ok(g.mul_scalar(s, T::lit(-1.0 / voxels(&shape) as f64)))
}

/// Scalar handles of the segmentation loss.
#[derive(Debug, Clone, Copy)]
pub struct SegLoss {
    pub dice: Var,
    pub wce: Var,
    pub total: Var,
}

/// `γ · dice + (1 − γ) · wce`.
pub fn seg_loss<T: Scalar>(g: &mut Graph<T>, p: Var, y: Var, weights: &[f64], cfg: &LossConfig) -> Result<SegLoss> {
    let dice = dice_loss(g, p, y, cfg.smooth)?;
    let wce = wce_loss(g, p, y, weights)?;
    let total = combine(g, dice, wce, cfg.gamma)?;
    Ok(SegLoss { dice, wce, total })
}

pub fn combine<T: Scalar>(g: &mut Graph<T>, dice: Var, wce: Var, gamma: f64) -> Result<Var> {
    let a = g.mul_scalar(dice, T::lit(gamma));
    let b = g.mul_scalar(wce, T::lit(1.0 - gamma));
    Ok(g.add(a, b)?)
}

/// `min(1, epoch / anneal_epochs)`.
pub fn kl_anneal(epoch: usize, anneal_epochs: usize) -> f64 {
    (epoch as f64 / anneal_epochs.max(1) as f64).min(1.0)
}

/// Per-voxel `KL(Dir(α) ‖ Dir(1))`, shape `[N, 1, ...]`.
pub fn dirichlet_kl_uniform<T: Scalar>(g: &mut Graph<T>, alpha: Var) -> Result<Var> {
    let k = g.shape(alpha)[1];
    let s = g.sum(alpha, &[1], true)?;
    let lg_s = g.ln_gamma(s);
    let lg_a = g.ln_gamma(alpha);
    let lg_a = g.sum(lg_a, &[1], true)?;
    let dg_a = g.digamma(alpha);
    let dg_s = g.digamma(s);
    let dg_s = expand_to(g, dg_s, alpha)?;
    let diff = g.sub(dg_a, dg_s)?;
    let am1 = g.add_scalar(alpha, -T::one());
    let t = g.mul(am1, diff)?;
    let t = g.sum(t, &[1], true)?;
    let kl = g.sub(lg_s, lg_a)?;
    let kl = g.add(kl, t)?;
    Ok(g.add_scalar(kl, T::lit(-ln_gamma(k as f64))))
}

fn expand_to<T: Scalar>(g: &mut Graph<T>, x: Var, like: Var) -> Result<Var> {
    let s = g.shape(like).to_vec();
    Ok(g.expand(x, &s)?)
}

/// `λ_t · mean_voxels KL(Dir(α̃) ‖ Dir(1))` with `α̃ = Y + (1 − Y) ⊙ α`.
///
/// Fails if any `α < 1`. With `lambda_t == 0` the result is an exact zero
/// constant and the KL graph is not built.
pub fn evidential_kl_loss<T: Scalar>(g: &mut Graph<T>, alpha: Var, y: Var, lambda_t: f64) -> Result<Var> {
    if let Some(bad) = g.value(alpha).data().iter().find(|v| !(**v >= T::one())) {
        return Err(VfError::Contract {
            op: "evidential_kl_loss",
            msg: format!("Dirichlet parameter {bad} is below 1"),
        });
    }
    if lambda_t == 0.0 {
        return Ok(g.constant(Tensor::scalar(T::zero()).reshape(&[1])?));
    }
    let keep = g.value(y).map(|v| T::one() - v);
    let keep = g.constant(keep);
    let masked = g.mul(keep, alpha)?;
    let alpha_t = g.add(masked, y)?;
    let kl = dirichlet_kl_uniform(g, alpha_t)?;
    let m = g.mean_all(kl);
    Ok(g.mul_scalar(m, T::lit(lambda_t)))
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub dice: Var,
    pub wce: Var,
    pub kl: Var,
    pub total: Var,
}

/// Scalar values of [`LossTerms`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub dice: f64,
    pub wce: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> LossValues {
        let v = |x: Var| g.value(x).data()[0].as_f64();
        LossValues {
            dice: v(self.dice),
            wce: v(self.wce),
            kl: v(self.kl),
            total: v(self.total),
        }
    }
}

/// `L = L_seg(P, Y) + L_KL(α, Y)`. Without `alpha` the KL term is zero.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: Var,
    alpha: Option<Var>,
    y: Var,
    lambda_t: f64,
    weights: &[f64],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let seg = seg_loss(g, p, y, weights, cfg)?;
    let kl = match alpha {
        Some(a) => evidential_kl_loss(g, a, y, lambda_t)?,
        None => evidential_kl_loss_zero(g)?,
    };
    let total = g.add(seg.total, kl)?;
    let terms = LossTerms {
        dice: seg.dice,
        wce: seg.wce,
        kl,
        total,
    };
    let vals = terms.values(g);
    for (name, v) in [("dice", vals.dice), ("wce", vals.wce), ("kl", vals.kl), ("total", vals.total)] {
        if !v.is_finite() {
            return Err(VfError::Numerical(format!("{name} loss is {v}")));
        }
    }
    Ok(terms)
}

fn evidential_kl_loss_zero<T: Scalar>(g: &mut Graph<T>) -> Result<Var> {
    Ok(g.constant(Tensor::scalar(T::zero()).reshape(&[1])?))
}
