//! 3D convolution over `[N, C, D, H, W]` via per-plane im2col.
//!
//! Work is split into one task per (sample, output depth plane). Tasks run in
//! parallel but their contributions to shared accumulators are folded in task
//! order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{config_err, shape_err, Result};
use crate::gemm::{gemm, gemm_nt, gemm_tn};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn new(stride: [usize; 3], pad: [usize; 3]) -> Self {
        Self { stride, pad }
    }

    /// Stride 1 with "same" padding for an odd cubic kernel.
    pub fn same(kernel: usize) -> Self {
        Self::new([1; 3], [kernel / 2; 3])
    }

    pub fn unit() -> Self {
        Self::new([1; 3], [0; 3])
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub inp: [usize; 3],
    pub co: usize,
    pub k: [usize; 3],
    pub out: [usize; 3],
    pub geom: ConvGeom,
}

impl ConvDims {
    pub fn resolve(x: &[usize], w: &[usize], geom: ConvGeom) -> Result<Self> {
        if x.len() != 5 || w.len() != 5 || x[1] != w[1] {
            return shape_err("conv3d", x, w);
        }
        if geom.stride.contains(&0) {
            return config_err("conv3d", "stride must be >= 1");
        }
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = x[2 + a] + 2 * geom.pad[a];
            if w[2 + a] > padded {
                return config_err(
                    "conv3d",
                    format!(
                        "kernel {:?} does not fit padded input {:?} (pad {:?})",
                        &w[2..],
                        &x[2..],
                        geom.pad
                    ),
                );
            }
            out[a] = (padded - w[2 + a]) / geom.stride[a] + 1;
        }
        Ok(Self {
            n: x[0],
            c: x[1],
            inp: [x[2], x[3], x[4]],
            co: w[0],
            k: [w[2], w[3], w[4]],
            out,
            geom,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.co, self.out[0], self.out[1], self.out[2]]
    }

    fn kvol(&self) -> usize {
        self.k[0] * self.k[1] * self.k[2]
    }

    fn krows(&self) -> usize {
        self.c * self.kvol()
    }

    fn in_vol(&self) -> usize {
        self.inp[0] * self.inp[1] * self.inp[2]
    }

    fn out_plane(&self) -> usize {
        self.out[1] * self.out[2]
    }

    fn out_vol(&self) -> usize {
        self.out[0] * self.out_plane()
    }

    fn is_pointwise(&self) -> bool {
        self.k == [1, 1, 1] && self.geom.stride == [1, 1, 1] && self.geom.pad == [0, 0, 0]
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `koff`:
/// those `o` with `0 <= o*stride + koff - pad < extent`.
fn valid_range(out: usize, stride: usize, koff: usize, pad: usize, extent: usize) -> (usize, usize) {
    let lo = if koff >= pad {
        0
    } else {
        (pad - koff).div_ceil(stride)
    };
    // o*stride + koff - pad <= extent - 1
    let hi = if extent + pad < koff + 1 {
        0
    } else {
        ((extent + pad - koff - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// Fills `col` (`[C·kd·kh·kw, oh·ow]`) for output depth plane `od` of one sample.
fn im2col_plane<T: Scalar>(x: &[T], d: &ConvDims, od: usize, col: &mut [T]) {
    let [_, ih, iw] = d.inp;
    let [_, oh, ow] = d.out;
    let [sd, sh, sw] = d.geom.stride;
    let [pd, ph, pw] = d.geom.pad;
    let plane = oh * ow;
    col.fill(T::zero());
    let mut row = 0;
    for c in 0..d.c {
        for kz in 0..d.k[0] {
            let iz = (od * sd + kz) as isize - pd as isize;
            if iz < 0 || iz >= d.inp[0] as isize {
                row += d.k[1] * d.k[2];
                continue;
            }
            let base_z = (c * d.inp[0] + iz as usize) * ih * iw;
            for ky in 0..d.k[1] {
                let (ylo, yhi) = valid_range(oh, sh, ky, ph, ih);
                for kx in 0..d.k[2] {
                    let (xlo, xhi) = valid_range(ow, sw, kx, pw, iw);
                    if xlo >= xhi {
                        row += 1;
                        continue;
                    }
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in ylo..yhi {
                        let iy = oy * sh + ky - ph;
                        let src = base_z + iy * iw;
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        if sw == 1 {
                            let ix0 = xlo + kx - pw;
                            drow[xlo..xhi].copy_from_slice(&x[src + ix0..src + ix0 + (xhi - xlo)]);
                        } else {
                            for ox in xlo..xhi {
                                drow[ox] = x[src + ox * sw + kx - pw];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds `col` back into the input-gradient of one sample.
fn col2im_plane<T: Scalar>(col: &[T], d: &ConvDims, od: usize, gx: &mut [T]) {
    let [_, ih, iw] = d.inp;
    let [_, oh, ow] = d.out;
    let [sd, sh, sw] = d.geom.stride;
    let [pd, ph, pw] = d.geom.pad;
    let plane = oh * ow;
    let mut row = 0;
    for c in 0..d.c {
        for kz in 0..d.k[0] {
            let iz = (od * sd + kz) as isize - pd as isize;
            if iz < 0 || iz >= d.inp[0] as isize {
                row += d.k[1] * d.k[2];
                continue;
            }
            let base_z = (c * d.inp[0] + iz as usize) * ih * iw;
            for ky in 0..d.k[1] {
                let (ylo, yhi) = valid_range(oh, sh, ky, ph, ih);
                for kx in 0..d.k[2] {
                    let (xlo, xhi) = valid_range(ow, sw, kx, pw, iw);
                    if xlo >= xhi {
                        row += 1;
                        continue;
                    }
                    let srcp = &col[row * plane..(row + 1) * plane];
                    for oy in ylo..yhi {
                        let iy = oy * sh + ky - ph;
                        let dst = base_z + iy * iw;
                        let srow = &srcp[oy * ow..(oy + 1) * ow];
                        if sw == 1 {
                            let ix0 = xlo + kx - pw;
                            for (g, &v) in gx[dst + ix0..dst + ix0 + (xhi - xlo)]
                                .iter_mut()
                                .zip(&srow[xlo..xhi])
                            {
                                *g += v;
                            }
                        } else {
                            for ox in xlo..xhi {
                                gx[dst + ox * sw + kx - pw] += srow[ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
) -> Vec<T> {
    let out_vol = d.out_vol();
    let mut out = vec![T::zero(); d.n * d.co * out_vol];
    if d.is_pointwise() {
        out.par_chunks_mut(d.co * out_vol)
            .zip(x.par_chunks(d.c * d.in_vol()))
            .for_each(|(o, xn)| gemm(d.co, d.c, out_vol, w, xn, o));
    } else {
        let plane = d.out_plane();
        let krows = d.krows();
        let tasks: Vec<(usize, usize)> = (0..d.n)
            .flat_map(|n| (0..d.out[0]).map(move |od| (n, od)))
            .collect();
        let planes: Vec<Vec<T>> = tasks
            .par_iter()
            .map_init(
                || vec![T::zero(); krows * plane],
                |col, &(n, od)| {
                    let xn = &x[n * d.c * d.in_vol()..(n + 1) * d.c * d.in_vol()];
                    im2col_plane(xn, d, od, col);
                    let mut o = vec![T::zero(); d.co * plane];
                    gemm(d.co, krows, plane, w, col, &mut o);
                    o
                },
            )
            .collect();
        for (&(n, od), o) in tasks.iter().zip(planes) {
            for co in 0..d.co {
                let dst = (n * d.co + co) * out_vol + od * plane;
                out[dst..dst + plane].copy_from_slice(&o[co * plane..(co + 1) * plane]);
            }
        }
    }
    if let Some(b) = bias {
        for (i, chunk) in out.chunks_mut(out_vol).enumerate() {
            let bv = b[i % d.co];
            for v in chunk.iter_mut() {
                *v += bv;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub x: Option<Vec<T>>,
    pub w: Option<Vec<T>>,
    pub b: Option<Vec<T>>,
}

pub(crate) fn conv3d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    d: &ConvDims,
    need: [bool; 3],
) -> ConvGrads<T> {
    let out_vol = d.out_vol();
    let in_n = d.c * d.in_vol();
    let krows = d.krows();
    let mut gx = need[0].then(|| vec![T::zero(); d.n * in_n]);
    let mut gw = need[1].then(|| vec![T::zero(); d.co * krows]);
    let gb = need[2].then(|| {
        let mut b = vec![T::zero(); d.co];
        for (i, chunk) in gout.chunks(out_vol).enumerate() {
            b[i % d.co] += chunk.iter().copied().sum::<T>();
        }
        b
    });

    if d.is_pointwise() {
        // Per-sample partials, folded in sample order.
        let parts: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..d.n)
            .into_par_iter()
            .map(|n| {
                let xn = &x[n * in_n..(n + 1) * in_n];
                let gn = &gout[n * d.co * out_vol..(n + 1) * d.co * out_vol];
                let pw = need[1].then(|| {
                    let mut p = vec![T::zero(); d.co * d.c];
                    gemm_nt(d.co, out_vol, d.c, gn, xn, &mut p);
                    p
                });
                let px = need[0].then(|| {
                    let mut p = vec![T::zero(); in_n];
                    gemm_tn(d.c, d.co, out_vol, w, gn, &mut p);
                    p
                });
                (px, pw)
            })
            .collect();
        for (n, (px, pw)) in parts.into_iter().enumerate() {
            if let (Some(gx), Some(px)) = (gx.as_mut(), px) {
                gx[n * in_n..(n + 1) * in_n].copy_from_slice(&px);
            }
            if let (Some(gw), Some(pw)) = (gw.as_mut(), pw) {
                for (a, b) in gw.iter_mut().zip(&pw) {
                    *a += *b;
                }
            }
        }
        return ConvGrads { x: gx, w: gw, b: gb };
    }

    let plane = d.out_plane();
    let tasks: Vec<(usize, usize)> = (0..d.n)
        .flat_map(|n| (0..d.out[0]).map(move |od| (n, od)))
        .collect();
    let group = rayon::current_num_threads().max(1);
    for chunk in tasks.chunks(group) {
        let parts: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = chunk
            .par_iter()
            .map(|&(n, od)| {
                let mut g = vec![T::zero(); d.co * plane];
                for co in 0..d.co {
                    let src = (n * d.co + co) * out_vol + od * plane;
                    g[co * plane..(co + 1) * plane].copy_from_slice(&gout[src..src + plane]);
                }
                let pw = need[1].then(|| {
                    let mut col = vec![T::zero(); krows * plane];
                    im2col_plane(&x[n * in_n..(n + 1) * in_n], d, od, &mut col);
                    let mut p = vec![T::zero(); d.co * krows];
                    gemm_nt(d.co, plane, krows, &g, &col, &mut p);
                    p
                });
                let pcol = need[0].then(|| {
                    let mut gc = vec![T::zero(); krows * plane];
                    gemm_tn(krows, d.co, plane, w, &g, &mut gc);
                    gc
                });
                (pcol, pw)
            })
            .collect();
        for (&(n, od), (pcol, pw)) in chunk.iter().zip(parts) {
            if let (Some(gx), Some(pcol)) = (gx.as_mut(), pcol) {
                col2im_plane(&pcol, d, od, &mut gx[n * in_n..(n + 1) * in_n]);
            }
            if let (Some(gw), Some(pw)) = (gw.as_mut(), pw) {
                for (a, b) in gw.iter_mut().zip(&pw) {
                    *a += *b;
                }
            }
        }
    }
    ConvGrads { x: gx, w: gw, b: gb }
}
