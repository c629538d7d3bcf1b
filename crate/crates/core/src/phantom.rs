//! Synthetic vascular phantoms: branching random-walk centerlines swept by
//! spheres of decaying radius over a smoothly textured, noisy background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VfError};
use crate::volume::{Grid, LabelVolume, Volume};

/// Centerline sampling step in voxels.
const STEP: f64 = 0.5;
/// Radius floor for deep branches, in voxels.
const MIN_RADIUS: f64 = 1.0;
/// Mean background intensity.
const BASE_LEVEL: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub num_trees: usize,
    /// Generations of bifurcation below each root segment.
    pub branch_depth: usize,
    /// Root vessel radius in voxels.
    pub radius_root: f64,
    /// Radius ratio child / parent.
    pub radius_decay: f64,
    /// Standard deviation of the per-step direction perturbation.
    pub tortuosity: f64,
    pub vessel_contrast: f64,
    pub noise_sigma: f64,
    /// Amplitude of the low-frequency background texture.
    pub background_texture: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [64; 3],
            spacing: [1.0; 3],
            num_trees: 2,
            branch_depth: 3,
            radius_root: 2.5,
            radius_decay: 0.75,
            tortuosity: 0.15,
            vessel_contrast: 0.35,
            noise_sigma: 0.08,
            background_texture: 0.1,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 32) {
            return Err(VfError::config("dims", format!("each extent must be >= 32, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(VfError::config("spacing", "must be positive"));
        }
        if !(self.radius_root >= 1.0) {
            return Err(VfError::config("radius_root", format!("must be >= 1 voxel, got {}", self.radius_root)));
        }
        if !(self.radius_decay > 0.0 && self.radius_decay <= 1.0) {
            return Err(VfError::config("radius_decay", "must lie in (0, 1]"));
        }
        for (key, v) in [
            ("tortuosity", self.tortuosity),
            ("vessel_contrast", self.vessel_contrast),
            ("noise_sigma", self.noise_sigma),
            ("background_texture", self.background_texture),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(VfError::config(key, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

type V3 = [f64; 3];

fn normalize(v: V3) -> V3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n < 1e-12 {
        [1.0, 0.0, 0.0]
    } else {
        v.map(|c| c / n)
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> V3 {
    normalize([0; 3].map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Direction at `angle` radians from `dir`, rotated about a random perpendicular.
fn deflect(dir: V3, angle: f64, rng: &mut ChaCha8Rng) -> V3 {
    let perp = normalize(cross(dir, random_unit(rng)));
    let (s, c) = angle.sin_cos();
    normalize([0, 1, 2].map(|i| c * dir[i] + s * perp[i]))
}

struct Raster {
    dims: [usize; 3],
    mask: Vec<u8>,
}

impl Raster {
    fn inside(&self, p: V3) -> bool {
        (0..3).all(|a| p[a] >= 0.0 && p[a] <= (self.dims[a] - 1) as f64)
    }

    fn sphere(&mut self, c: V3, r: f64) {
        let lo = |a: usize| ((c[a] - r).ceil().max(0.0)) as usize;
        let hi = |a: usize| ((c[a] + r).floor().min((self.dims[a] - 1) as f64)) as usize;
        let r2 = r * r;
        for z in lo(0)..=hi(0) {
            let dz = z as f64 - c[0];
            for y in lo(1)..=hi(1) {
                let dy = y as f64 - c[1];
                for x in lo(2)..=hi(2) {
                    let dx = x as f64 - c[2];
                    if dz * dz + dy * dy + dx * dx <= r2 {
                        self.mask[(z * self.dims[1] + y) * self.dims[2] + x] = 1;
                    }
                }
            }
        }
    }
}

struct Segment {
    start: V3,
    dir: V3,
    radius: f64,
    length: f64,
    generation: usize,
}

fn grow(spec: &PhantomSpec, raster: &mut Raster, rng: &mut ChaCha8Rng, root: Segment) {
    let jitter = Normal::new(0.0, spec.tortuosity * STEP.sqrt()).expect("finite sigma");
    let mut stack = vec![root];
    while let Some(seg) = stack.pop() {
        let mut pos = seg.start;
        let mut dir = seg.dir;
        let steps = (seg.length / STEP).ceil() as usize;
        let mut left_volume = false;
        for _ in 0..steps {
            raster.sphere(pos, seg.radius);
            let kick: V3 = [0; 3].map(|_| jitter.sample(rng));
            dir = normalize([0, 1, 2].map(|i| dir[i] + kick[i]));
            let next = [0, 1, 2].map(|i| pos[i] + STEP * dir[i]);
            if !raster.inside(next) {
                left_volume = true;
                break;
            }
            pos = next;
        }
        if left_volume || seg.generation >= spec.branch_depth {
            continue;
        }
        let radius = (seg.radius * spec.radius_decay).max(MIN_RADIUS);
        for _ in 0..2 {
            let angle = rng.random_range(0.35..0.8);
            stack.push(Segment {
                start: pos,
                dir: deflect(dir, angle, rng),
                radius,
                length: seg.length * 0.75,
                generation: seg.generation + 1,
            });
        }
    }
}

/// Sum of a few random plane waves with wavelengths of 8 to 32 voxels, in `[-amp, amp]`.
fn texture(dims: [usize; 3], amp: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const WAVES: usize = 4;
    let waves: Vec<(V3, f64)> = (0..WAVES)
        .map(|_| {
            let k = 2.0 * std::f64::consts::PI / rng.random_range(8.0..32.0);
            (random_unit(rng).map(|c| c * k), rng.random_range(0.0..2.0 * std::f64::consts::PI))
        })
        .collect();
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64, y as f64, x as f64];
                let s: f64 = waves
                    .iter()
                    .map(|(k, ph)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).cos())
                    .sum();
                out.push(amp * s / WAVES as f64);
            }
        }
    }
    out
}

/// Generates one phantom. The output is a pure function of `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelVolume)> {
    spec.validate()?;
    let dims = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut raster = Raster {
        dims,
        mask: vec![0; dims.iter().product()],
    };
    let min_dim = *dims.iter().min().expect("three extents") as f64;
    for _ in 0..spec.num_trees {
        let start = [0, 1, 2].map(|a| rng.random_range(0.25..0.75) * (dims[a] - 1) as f64);
        let dir = random_unit(&mut rng);
        let root = Segment {
            start,
            dir,
            radius: spec.radius_root,
            length: 0.45 * min_dim,
            generation: 0,
        };
        grow(spec, &mut raster, &mut rng, root);
    }

    let tex = texture(dims, spec.background_texture, &mut rng);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let image: Vec<f32> = raster
        .mask
        .iter()
        .zip(&tex)
        .map(|(&m, &t)| {
            let v = BASE_LEVEL + t + spec.vessel_contrast * m as f64 + noise.sample(&mut rng);
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok((Grid::new(dims, spec.spacing, image)?, Grid::new(dims, spec.spacing, raster.mask)?))
}
