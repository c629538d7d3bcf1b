//! Dice similarity and average symmetric surface distance.
//!
//! Surfaces are 6-connectivity boundaries: foreground voxels with at least
//! one face neighbour that is background or outside the grid. Distances run
//! voxel centre to voxel centre in mm. Nearest-surface queries use an exact
//! separable squared Euclidean distance transform.

use crate::error::{Result, VfError};
use crate::volume::LabelVolume;

fn check_dims(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.dims != b.dims {
        return Err(vf_tensor::TensorError::Shape {
            op: "metric",
            lhs: a.dims.to_vec(),
            rhs: b.dims.to_vec(),
        }
        .into());
    }
    Ok(())
}

/// `2|P∩G| / (|P| + |G|)`; 1.0 when both are empty.
pub fn dsc(pred: &LabelVolume, gt: &LabelVolume) -> Result<f64> {
    check_dims(pred, gt)?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (p != 0, g != 0);
        np += p as usize;
        ng += g as usize;
        inter += (p && g) as usize;
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// Surface voxels as `[z, y, x]`, in row-major order.
pub fn surface_voxels(mask: &LabelVolume) -> Vec<[usize; 3]> {
    let [d, h, w] = mask.dims;
    let fg = |z: usize, y: usize, x: usize| mask.data[(z * h + y) * w + x] != 0;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !fg(z, y, x) {
                    continue;
                }
                let boundary = z == 0
                    || z + 1 == d
                    || y == 0
                    || y + 1 == h
                    || x == 0
                    || x + 1 == w
                    || !fg(z - 1, y, x)
                    || !fg(z + 1, y, x)
                    || !fg(z, y - 1, x)
                    || !fg(z, y + 1, x)
                    || !fg(z, y, x - 1)
                    || !fg(z, y, x + 1);
                if boundary {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// 1-D lower envelope of parabolas: `out[q] = min_p f[p] + ((q − p)·s)²`.
fn edt_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut [usize], zb: &mut [f64]) {
    let s2 = s * s;
    let mut k: isize = -1;
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                zb[0] = f64::NEG_INFINITY;
                zb[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let x = ((fq + s2 * (q * q) as f64) - (f[p] + s2 * (p * p) as f64)) / (2.0 * s2 * (q - p) as f64);
            if x <= zb[k as usize] {
                k -= 1;
            } else {
                k += 1;
                let k = k as usize;
                v[k] = q;
                zb[k] = x;
                zb[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while zb[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = (q as f64 - p as f64) * s;
        *o = d * d + f[p];
    }
}

/// Squared distance (mm²) from every voxel to the nearest `seeds` voxel.
pub fn squared_distance_field(dims: [usize; 3], spacing: [f64; 3], seeds: &[[usize; 3]]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut field = vec![f64::INFINITY; d * h * w];
    for s in seeds {
        field[(s[0] * h + s[1]) * w + s[2]] = 0.0;
    }
    let maxn = d.max(h).max(w);
    let (mut line, mut out) = (vec![0.0; maxn], vec![0.0; maxn]);
    let (mut v, mut zb) = (vec![0usize; maxn], vec![0.0; maxn + 1]);
    let strides = [h * w, w, 1];
    for axis in [2, 1, 0] {
        let n = dims[axis];
        let st = strides[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..dims[others[0]] {
            for j in 0..dims[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for q in 0..n {
                    line[q] = field[base + q * st];
                }
                edt_1d(&line[..n], spacing[axis], &mut out[..n], &mut v, &mut zb);
                for q in 0..n {
                    field[base + q * st] = out[q];
                }
            }
        }
    }
    field
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricResult {
    pub dsc: f64,
    /// `None` when either mask is empty.
    pub assd_mm: Option<f64>,
    pub n_pred_surface: usize,
    pub n_gt_surface: usize,
}

fn spacing_f64(m: &LabelVolume) -> [f64; 3] {
    m.spacing.map(|s| s as f64)
}

fn directed_sum(from: &[[usize; 3]], to_field: &[f64], dims: [usize; 3]) -> f64 {
    from.iter()
        .map(|p| to_field[(p[0] * dims[1] + p[1]) * dims[2] + p[2]].sqrt())
        .sum()
}

/// Symmetric mean surface distance in mm with the given voxel spacing.
pub fn assd(pred: &LabelVolume, gt: &LabelVolume, spacing: [f64; 3]) -> Result<f64> {
    check_dims(pred, gt)?;
    let sp = surface_voxels(pred);
    let sg = surface_voxels(gt);
    assd_from_surfaces(&sp, &sg, pred.dims, spacing)
}

fn assd_from_surfaces(sp: &[[usize; 3]], sg: &[[usize; 3]], dims: [usize; 3], spacing: [f64; 3]) -> Result<f64> {
    if sp.is_empty() || sg.is_empty() {
        return Err(VfError::UndefinedMetric(format!(
            "ASSD needs two non-empty masks (surface sizes {} and {})",
            sp.len(),
            sg.len()
        )));
    }
    let fg = squared_distance_field(dims, spacing, sg);
    let fp = squared_distance_field(dims, spacing, sp);
    Ok((directed_sum(sp, &fg, dims) + directed_sum(sg, &fp, dims)) / (sp.len() + sg.len()) as f64)
}

/// DSC, ASSD (using the ground truth's spacing) and surface sizes.
pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume) -> Result<MetricResult> {
    let d = dsc(pred, gt)?;
    let sp = surface_voxels(pred);
    let sg = surface_voxels(gt);
    let assd_mm = match assd_from_surfaces(&sp, &sg, gt.dims, spacing_f64(gt)) {
        Ok(v) => Some(v),
        Err(VfError::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricResult {
        dsc: d,
        assd_mm,
        n_pred_surface: sp.len(),
        n_gt_surface: sg.len(),
    })
}
