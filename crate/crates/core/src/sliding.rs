//! Sliding-window inference with half-window stride and uniform averaging.

use crate::error::{Result, VfError};
use crate::volume::{Grid, Volume};

/// Window start positions along one axis: `0, s, 2s, …` with `s = window/2`
/// while the window ends strictly inside the axis, then `dim − window`.
pub fn window_starts(dim: usize, window: usize) -> Result<Vec<usize>> {
    if window == 0 || window > dim {
        return Err(VfError::config(
            "window",
            format!("window {window} must lie in 1..={dim}"),
        ));
    }
    let stride = (window / 2).max(1);
    let mut starts = Vec::new();
    let mut p = 0;
    while p + window < dim {
        starts.push(p);
        p += stride;
    }
    starts.push(dim - window);
    starts.dedup();
    Ok(starts)
}

/// All window origins over a 3-D grid, in row-major order.
pub fn placements(dims: [usize; 3], window: [usize; 3]) -> Result<Vec<[usize; 3]>> {
    let s: Vec<Vec<usize>> = (0..3)
        .map(|a| window_starts(dims[a], window[a]))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(s.iter().map(Vec::len).product());
    for &z in &s[0] {
        for &y in &s[1] {
            for &x in &s[2] {
                out.push([z, y, x]);
            }
        }
    }
    Ok(out)
}

/// Averaged per-class probabilities and uncertainty over a whole volume.
#[derive(Debug, Clone)]
pub struct SlidingOut {
    pub probs: Vec<Volume>,
    pub uncertainty: Volume,
}

/// Tiles `v` with windows and averages the per-window outputs.
///
/// `f` maps a window crop to `(probs, uncertainty)` as flat row-major
/// buffers: `K · |window|` and `|window|` values.
pub fn sliding_window_infer<F>(v: &Volume, window: [usize; 3], k: usize, mut f: F) -> Result<SlidingOut>
where
    F: FnMut(&Volume) -> Result<(Vec<f32>, Vec<f32>)>,
{
    let n = v.len();
    let wn: usize = window.iter().product();
    let mut acc = vec![0.0f64; k * n];
    let mut acc_u = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    for origin in placements(v.dims, window)? {
        let crop = v.crop(origin, window)?;
        let (p, u) = f(&crop)?;
        if p.len() != k * wn || u.len() != wn {
            return Err(VfError::Contract {
                op: "sliding_window_infer",
                msg: format!("window output has {} / {} values, expected {} / {wn}", p.len(), u.len(), k * wn),
            });
        }
        for z in 0..window[0] {
            for y in 0..window[1] {
                let dst = v.index(origin[0] + z, origin[1] + y, origin[2]);
                let src = (z * window[1] + y) * window[2];
                for x in 0..window[2] {
                    count[dst + x] += 1;
                    acc_u[dst + x] += u[src + x] as f64;
                    for c in 0..k {
                        acc[c * n + dst + x] += p[c * wn + src + x] as f64;
                    }
                }
            }
        }
    }
    let avg = |s: &[f64]| -> Vec<f32> { s.iter().zip(&count).map(|(&a, &c)| (a / c as f64) as f32).collect() };
    let probs = (0..k)
        .map(|c| Grid::new(v.dims, v.spacing, avg(&acc[c * n..(c + 1) * n])))
        .collect::<Result<_>>()?;
    Ok(SlidingOut {
        probs,
        uncertainty: Grid::new(v.dims, v.spacing, avg(&acc_u))?,
    })
}
