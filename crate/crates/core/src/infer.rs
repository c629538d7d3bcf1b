//! Whole-volume prediction and evaluation reports.

use std::fmt::Write as _;

use vf_tensor::{Graph, Scalar, Tensor};

use crate::cvf::Noise;
use crate::data::Case;
use crate::error::Result;
use crate::eur::belief_from_logits;
use crate::metrics::{evaluate, MetricResult};
use crate::model::Model;
use crate::sliding::sliding_window_infer;
use crate::volume::{Grid, LabelVolume, Volume};

/// Class probabilities and uncertainty `U = K/S` for one window, evaluated
/// with the latent mean (no sampling). `U` comes from the evidential head
/// when present, otherwise from the prediction logits.
pub fn forward_window<T: Scalar>(model: &Model<T>, v: &Volume) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut g = Graph::<T>::new();
    let [d, h, w] = v.dims;
    let x = Tensor::new(&[1, 1, d, h, w], v.data.iter().map(|&a| T::lit(a as f64)).collect())?;
    let x = g.constant(x);
    let (_, out) = model.forward(&mut g, x, false, &mut Noise::Mean)?;
    let u = match out.belief {
        Some(b) => b.u,
        None => belief_from_logits(&mut g, out.logits)?.u,
    };
    let to32 = |t: &Tensor<T>| t.data().iter().map(|a| a.as_f64() as f32).collect::<Vec<f32>>();
    Ok((to32(g.value(out.probs)), to32(g.value(u))))
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub probs: Vec<Volume>,
    /// Voxelwise argmax of `probs` (first class wins ties).
    pub mask: LabelVolume,
    pub uncertainty: Volume,
}

pub fn argmax(probs: &[Volume]) -> Result<LabelVolume> {
    let first = &probs[0];
    let data = (0..first.len())
        .map(|i| {
            let mut best = 0;
            for (c, p) in probs.iter().enumerate().skip(1) {
                if p.data[i] > probs[best].data[i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Grid::new(first.dims, first.spacing, data)
}

pub fn predict<T: Scalar>(model: &Model<T>, v: &Volume, window: [usize; 3]) -> Result<Prediction> {
    let k = model.config().num_classes;
    let out = sliding_window_infer(v, window, k, |crop| forward_window(model, crop))?;
    Ok(Prediction {
        mask: argmax(&out.probs)?,
        probs: out.probs,
        uncertainty: out.uncertainty,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub case: String,
    pub metrics: MetricResult,
}

pub fn evaluate_cases<T: Scalar>(model: &Model<T>, cases: &[Case], window: [usize; 3]) -> Result<Vec<CaseReport>> {
    cases
        .iter()
        .map(|c| {
            let pred = predict(model, &c.image, window)?;
            Ok(CaseReport {
                case: format!("case_{:04}", c.id),
                metrics: evaluate(&pred.mask, &c.label)?,
            })
        })
        .collect()
}

/// Mean and population standard deviation; `None` for an empty slice.
pub fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Marker written in place of an undefined ASSD.
pub const UNDEFINED: &str = "undefined";

/// CSV with one row per case and a final `mean±std` row. Floats use the
/// shortest round-trip representation.
pub fn report_csv(rows: &[CaseReport]) -> String {
    let mut s = String::from("case,dsc,assd_mm,n_pred_surface,n_gt_surface\n");
    for r in rows {
        let m = &r.metrics;
        let assd = m.assd_mm.map_or(UNDEFINED.to_string(), |a| a.to_string());
        let _ = writeln!(s, "{},{},{},{},{}", r.case, m.dsc, assd, m.n_pred_surface, m.n_gt_surface);
    }
    let dscs: Vec<f64> = rows.iter().map(|r| r.metrics.dsc).collect();
    let assds: Vec<f64> = rows.iter().filter_map(|r| r.metrics.assd_mm).collect();
    let fmt = |v: &[f64]| mean_std(v).map_or(UNDEFINED.to_string(), |(m, sd)| format!("{m}±{sd}"));
    let _ = writeln!(s, "mean±std,{},{},,", fmt(&dscs), fmt(&assds));
    s
}
