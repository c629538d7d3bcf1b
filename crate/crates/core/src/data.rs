//! On-disk phantom datasets, split loading and random cropping.

use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{parse_toml, DataConfig};
use crate::error::{Result, VfError};
use crate::phantom::{generate_phantom, PhantomSpec};
use crate::volume::{load_volume, save_volume, LabelVolume, Volume};

pub const MANIFEST: &str = "dataset.toml";

pub fn case_paths(dir: &Path, i: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("case_{i:04}_img.vvf")),
        dir.join(format!("case_{i:04}_lbl.vvf")),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub count: usize,
    /// Per-case generator seeds, derived from `spec.seed`.
    pub case_seeds: Vec<u64>,
    pub spec: PhantomSpec,
}

/// Seeds of the first `count` cases of a dataset generated from `base`.
pub fn case_seeds(base: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    (0..count).map(|_| rng.next_u64()).collect()
}

/// Writes `count` phantom pairs plus [`MANIFEST`] into `out`.
pub fn generate_dataset(spec: &PhantomSpec, count: usize, out: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(|e| VfError::io(out, e))?;
    let seeds = case_seeds(spec.seed, count);
    for (i, &seed) in seeds.iter().enumerate() {
        let (img, lbl) = generate_phantom(&PhantomSpec { seed, ..spec.clone() })?;
        let (pi, pl) = case_paths(out, i);
        save_volume(&img, &pi)?;
        save_volume(&lbl, &pl)?;
    }
    let manifest = DatasetManifest {
        count,
        case_seeds: seeds,
        spec: spec.clone(),
    };
    let path = out.join(MANIFEST);
    let text = toml::to_string(&manifest).expect("manifest is serializable");
    std::fs::write(&path, text).map_err(|e| VfError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| VfError::io(&path, e))?;
    parse_toml(&text, &path)
}

#[derive(Debug, Clone)]
pub struct Case {
    pub id: usize,
    pub image: Volume,
    pub label: LabelVolume,
}

/// Loads cases `ids`; every missing file is reported at once.
pub fn load_cases(dir: &Path, ids: std::ops::Range<usize>) -> Result<Vec<Case>> {
    let missing: Vec<PathBuf> = ids
        .clone()
        .flat_map(|i| {
            let (a, b) = case_paths(dir, i);
            [a, b]
        })
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(VfError::MissingData(missing));
    }
    ids.map(|i| {
        let (pi, pl) = case_paths(dir, i);
        let image: Volume = load_volume(&pi)?;
        let label: LabelVolume = load_volume(&pl)?;
        if image.dims != label.dims || image.spacing != label.spacing {
            return Err(VfError::config(
                pl.display().to_string(),
                format!("label grid {:?} does not match image grid {:?}", label.dims, image.dims),
            ));
        }
        Ok(Case { id: i, image, label })
    })
    .collect()
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<Case>,
    pub val: Vec<Case>,
    pub test: Vec<Case>,
}

/// Cases `0..train` train, the next `val` validate, the next `test` test.
pub fn load_split(cfg: &DataConfig) -> Result<Split> {
    let (a, b, c) = (cfg.train, cfg.train + cfg.val, cfg.train + cfg.val + cfg.test);
    let missing: Vec<PathBuf> = (0..c)
        .flat_map(|i| {
            let (x, y) = case_paths(&cfg.dir, i);
            [x, y]
        })
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(VfError::MissingData(missing));
    }
    Ok(Split {
        train: load_cases(&cfg.dir, 0..a)?,
        val: load_cases(&cfg.dir, a..b)?,
        test: load_cases(&cfg.dir, b..c)?,
    })
}

/// Foreground-biased random crop.
///
/// Offsets are uniform over `[0, dims − crop]`. With probability
/// `redraw_prob` the crop is redrawn, up to `tries` draws in total, until it
/// contains a foreground voxel. Returns the crops and the offset used.
pub fn random_crop(
    v: &Volume,
    y: &LabelVolume,
    crop: [usize; 3],
    rng: &mut ChaCha8Rng,
    redraw_prob: f64,
    tries: usize,
) -> Result<(Volume, LabelVolume, [usize; 3])> {
    if (0..3).any(|a| crop[a] == 0 || crop[a] > v.dims[a]) || v.dims != y.dims {
        return Err(VfError::config(
            "train.crop",
            format!("crop {crop:?} does not fit volume {:?} (labels {:?})", v.dims, y.dims),
        ));
    }
    let draw = |rng: &mut ChaCha8Rng| [0, 1, 2].map(|a| rng.random_range(0..=v.dims[a] - crop[a]));
    let mut off = draw(rng);
    if redraw_prob > 0.0 && rng.random_bool(redraw_prob) {
        let mut n = 1;
        while n < tries && !has_foreground(y, off, crop) {
            off = draw(rng);
            n += 1;
        }
    }
    Ok((v.crop(off, crop)?, y.crop(off, crop)?, off))
}

fn has_foreground(y: &LabelVolume, off: [usize; 3], size: [usize; 3]) -> bool {
    (0..size[0]).any(|z| {
        (0..size[1]).any(|r| {
            let s = y.index(off[0] + z, off[1] + r, off[2]);
            y.data[s..s + size[2]].iter().any(|&l| l != 0)
        })
    })
}
