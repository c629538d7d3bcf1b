//! Training loop: Adam over the trainable parameters, per-epoch metrics CSV,
//! best-validation and last-good checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vf_tensor::{Graph, Tensor};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::cvf::Noise;
use crate::data::{load_split, random_crop, Case};
use crate::error::{Result, VfError};
use crate::infer::{evaluate_cases, mean_std};
use crate::losses::{class_weights, kl_anneal, one_hot, total_loss, LossValues};
use crate::model::Model;
use crate::nn::ParamId;
use crate::optim::Adam;
use crate::volume::{LabelVolume, Volume};

pub const CSV_HEADER: &str = "epoch,step,dice,wce,kl,total,val_dsc,val_assd_mm";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Training loss components averaged over the epoch's samples.
    pub loss: LossValues,
    pub val_dsc: Option<f64>,
    pub val_assd_mm: Option<f64>,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let l = &self.loss;
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.epoch,
            self.step,
            l.dice,
            l.wce,
            l.kl,
            l.total,
            opt(self.val_dsc),
            opt(self.val_assd_mm)
        )
    }
}

/// Model, optimizer and the seeded random streams of one run.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model<f32>,
    pub adam: Adam,
    data_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    anneal: usize,
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.train.seed;
        Ok(Self {
            model: Model::new(&cfg.model, seed)?,
            adam: Adam::new(cfg.train.adam.clone(), cfg.train.lr),
            data_rng: stream(seed, 1),
            noise_rng: stream(seed, 2),
            anneal: cfg.loss.anneal_for(cfg.train.epochs),
            cfg: cfg.clone(),
        })
    }

    /// KL weight at 0-based `epoch`.
    pub fn lambda_t(&self, epoch: usize) -> f64 {
        kl_anneal(epoch, self.anneal)
    }

    fn sample_graph(
        &self,
        g: &mut Graph<f32>,
        image: &Volume,
        label: &LabelVolume,
        epoch: usize,
        train: bool,
        noise: &mut Noise<'_>,
    ) -> Result<(crate::nn::Bound, crate::losses::LossTerms)> {
        let [d, h, w] = image.dims;
        let k = self.model.config().num_classes;
        let x = g.constant(Tensor::new(&[1, 1, d, h, w], image.data.clone())?);
        let y = g.constant(one_hot::<f32>(&label.data, k, &image.dims)?);
        let (bound, out) = self.model.forward(g, x, train, noise)?;
        let weights = class_weights(&label.data, k, self.cfg.loss.class_weight_mode);
        let alpha = out.belief.map(|b| b.alpha);
        let terms = total_loss(g, out.probs, alpha, y, self.lambda_t(epoch), &weights, &self.cfg.loss)?;
        Ok((bound, terms))
    }

    /// Loss of one sample with the latent mean, without updating anything.
    pub fn eval_loss(&self, image: &Volume, label: &LabelVolume, epoch: usize) -> Result<LossValues> {
        let mut g = Graph::new();
        let (_, terms) = self.sample_graph(&mut g, image, label, epoch, false, &mut Noise::Mean)?;
        Ok(terms.values(&g))
    }

    /// One optimizer step on a batch; per-sample losses are averaged.
    pub fn step(&mut self, batch: &[(Volume, LabelVolume)], epoch: usize) -> Result<LossValues> {
        let scale = 1.0 / batch.len() as f32;
        let trainable: Vec<ParamId> = self
            .model
            .params
            .ids()
            .filter(|&id| self.model.params.get(id).trainable)
            .collect();
        let mut acc: Vec<Option<Tensor<f32>>> = vec![None; trainable.len()];
        let mut sum = LossValues::default();
        let step = self.adam.steps() as usize;
        let mut noise_rng = self.noise_rng.clone();
        for (image, label) in batch {
            let mut g = Graph::new();
            let (bound, terms) = self
                .sample_graph(&mut g, image, label, epoch, true, &mut Noise::Sample(&mut noise_rng))
                .map_err(|e| match e {
                    VfError::Numerical(what) => VfError::NonFinite {
                        what,
                        epoch: epoch + 1,
                        step,
                    },
                    e => e,
                })?;
            let v = terms.values(&g);
            sum.dice += v.dice;
            sum.wce += v.wce;
            sum.kl += v.kl;
            sum.total += v.total;
            let scaled = g.mul_scalar(terms.total, scale);
            g.backward(scaled)?;
            for (slot, &id) in acc.iter_mut().zip(&trainable) {
                let Some(gr) = g.take_grad(bound.var(id)) else {
                    continue;
                };
                if !gr.all_finite() {
                    return Err(VfError::NonFinite {
                        what: format!("gradient of {}", self.model.params.get(id).name),
                        epoch: epoch + 1,
                        step,
                    });
                }
                match slot {
                    Some(a) => a.data_mut().iter_mut().zip(gr.data()).for_each(|(a, b)| *a += *b),
                    None => *slot = Some(gr),
                }
            }
        }
        self.noise_rng = noise_rng;
        let grads: Vec<(ParamId, Tensor<f32>)> = trainable
            .into_iter()
            .zip(acc)
            .filter_map(|(id, g)| g.map(|g| (id, g)))
            .collect();
        self.adam.step(&mut self.model.params, &grads);
        let n = batch.len() as f64;
        Ok(LossValues {
            dice: sum.dice / n,
            wce: sum.wce / n,
            kl: sum.kl / n,
            total: sum.total / n,
        })
    }

    /// Shuffles, crops and steps through all training cases once.
    pub fn run_epoch(&mut self, cases: &[Case], epoch: usize) -> Result<LossValues> {
        let t = &self.cfg.train;
        let mut order: Vec<usize> = (0..cases.len()).collect();
        order.shuffle(&mut self.data_rng);
        let (crop, prob, tries, batch) = (t.crop, t.fg_redraw_prob, t.fg_redraw_tries, t.batch);
        let mut sum = LossValues::default();
        let mut n = 0.0;
        for chunk in order.chunks(batch) {
            let samples: Vec<(Volume, LabelVolume)> = chunk
                .iter()
                .map(|&i| {
                    let c = &cases[i];
                    random_crop(&c.image, &c.label, crop, &mut self.data_rng, prob, tries).map(|(v, y, _)| (v, y))
                })
                .collect::<Result<_>>()?;
            let v = self.step(&samples, epoch)?;
            let w = samples.len() as f64;
            sum.dice += v.dice * w;
            sum.wce += v.wce * w;
            sum.kl += v.kl * w;
            sum.total += v.total * w;
            n += w;
        }
        Ok(LossValues {
            dice: sum.dice / n,
            wce: sum.wce / n,
            kl: sum.kl / n,
            total: sum.total / n,
        })
    }

    /// Mean validation DSC and mean ASSD over cases where it is defined.
    pub fn validate(&self, cases: &[Case]) -> Result<(Option<f64>, Option<f64>)> {
        if cases.is_empty() {
            return Ok((None, None));
        }
        let rows = evaluate_cases(&self.model, cases, self.cfg.train.window())?;
        let dsc: Vec<f64> = rows.iter().map(|r| r.metrics.dsc).collect();
        let assd: Vec<f64> = rows.iter().filter_map(|r| r.metrics.assd_mm).collect();
        Ok((mean_std(&dsc).map(|m| m.0), mean_std(&assd).map(|m| m.0)))
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub metrics_csv: PathBuf,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

/// Trains on the configured dataset split, writing [`METRICS_FILE`],
/// [`BEST_CKPT`] and [`LAST_CKPT`] into `out`.
///
/// The last checkpoint is rewritten only after an epoch completes with finite
/// losses, so a numerical failure leaves the previous one in place.
pub fn train(cfg: &RunConfig, out: &Path, progress: &mut dyn FnMut(&EpochRecord)) -> Result<TrainSummary> {
    cfg.validate()?;
    let split = load_split(&cfg.data)?;
    std::fs::create_dir_all(out).map_err(|e| VfError::io(out, e))?;
    let mut trainer = Trainer::new(cfg)?;
    train_on(&mut trainer, &split.train, &split.val, out, progress)
}

pub fn train_on(
    trainer: &mut Trainer,
    train: &[Case],
    val: &[Case],
    out: &Path,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainSummary> {
    let csv_path = out.join(METRICS_FILE);
    let best_path = out.join(BEST_CKPT);
    let last_path = out.join(LAST_CKPT);
    checkpoint::save(&trainer.model, &last_path)?;
    let mut csv = format!("{CSV_HEADER}\n");
    std::fs::write(&csv_path, &csv).map_err(|e| VfError::io(&csv_path, e))?;

    let mut records = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    for epoch in 0..trainer.cfg.train.epochs {
        let loss = trainer.run_epoch(train, epoch)?;
        let (val_dsc, val_assd_mm) = trainer.validate(val)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            step: trainer.adam.steps(),
            loss,
            val_dsc,
            val_assd_mm,
        };
        checkpoint::save(&trainer.model, &last_path)?;
        let score = val_dsc.unwrap_or(f64::NEG_INFINITY);
        if best.is_none_or(|(b, _)| score > b || val_dsc.is_none()) {
            best = Some((score, rec.epoch));
            checkpoint::save(&trainer.model, &best_path)?;
        }
        let _ = writeln!(csv, "{}", rec.csv_row());
        std::fs::write(&csv_path, &csv).map_err(|e| VfError::io(&csv_path, e))?;
        progress(&rec);
        records.push(rec);
    }
    if best.is_none() {
        checkpoint::save(&trainer.model, &best_path)?;
    }
    Ok(TrainSummary {
        records,
        best_epoch: best.map_or(0, |b| b.1),
        metrics_csv: csv_path,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}
