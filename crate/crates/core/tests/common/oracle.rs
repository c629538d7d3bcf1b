//! Independent reference implementations used by the tests.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vf_core::LabelVolume;

pub fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], density: f64) -> LabelVolume {
    let n = dims.iter().product();
    let mut data: Vec<u8> = (0..n).map(|_| rng.random_bool(density) as u8).collect();
    if data.iter().all(|&v| v == 0) {
        data[rng.random_range(0..n)] = 1;
    }
    LabelVolume::new(dims, [1.0; 3], data).unwrap()
}

pub fn brute_dsc(a: &LabelVolume, b: &LabelVolume) -> f64 {
    let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x != 0 && **y != 0).count();
    let na = a.data.iter().filter(|v| **v != 0).count();
    let nb = b.data.iter().filter(|v| **v != 0).count();
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Surface by direct neighbour inspection and distances by exhaustive search.
pub fn brute_assd(a: &LabelVolume, b: &LabelVolume, sp: [f64; 3]) -> f64 {
    let surf = |m: &LabelVolume| {
        let [d, h, w] = m.dims;
        let mut out = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if m.at(z, y, x) == 0 {
                        continue;
                    }
                    let nb = [(-1i64, 0i64, 0i64), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
                    let edge = nb.iter().any(|&(dz, dy, dx)| {
                        let (zz, yy, xx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                        zz < 0
                            || yy < 0
                            || xx < 0
                            || zz >= d as i64
                            || yy >= h as i64
                            || xx >= w as i64
                            || m.at(zz as usize, yy as usize, xx as usize) == 0
                    });
                    if edge {
                        out.push([z as f64, y as f64, x as f64]);
                    }
                }
            }
        }
        out
    };
    let (sa, sb) = (surf(a), surf(b));
    let nearest = |p: &[f64; 3], set: &[[f64; 3]]| {
        set.iter()
            .map(|q| {
                (0..3)
                    .map(|k| ((p[k] - q[k]) * sp[k]).powi(2))
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    };
    let total: f64 = sa.iter().map(|p| nearest(p, &sb)).sum::<f64>() + sb.iter().map(|p| nearest(p, &sa)).sum::<f64>();
    total / (sa.len() + sb.len()) as f64
}

/// Start positions by direct enumeration of the tiling rule.
pub fn starts_oracle(dim: usize, w: usize) -> BTreeSet<usize> {
    let s = (w / 2).max(1);
    let mut out: BTreeSet<usize> = (0..dim).step_by(s).filter(|&p| p + w < dim).collect();
    out.insert(dim - w);
    out
}

