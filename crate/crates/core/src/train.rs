//! Loss, optimizer, learning-rate schedule, training loop and gradient check.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Progress};
use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::eval::{psnr_from_rmse, rmse_values};
use crate::graph::{Graph, Tape};
use crate::model::{sample_inputs, Afn, Init, ModelConfig};
use crate::raster::NormalizedSample;
use crate::synth::{gen_triple, SynthConfig};
use crate::tensor::{FeatureMap, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_milestones: Vec<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub norm_scale: f64,
    /// Same effect as the model's `finetune_rgb`; either one enables it.
    pub finetune_rgb: bool,
    /// Train on random square sub-crops of this side instead of whole patches.
    pub crop: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_decay: 0.5,
            lr_milestones: vec![45, 60, 70],
            batch_size: 4,
            epochs: 75,
            seed: 0,
            norm_scale: crate::raster::DEFAULT_NORM_SCALE,
            finetune_rgb: false,
            crop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("lr_milestones must be strictly increasing".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.norm_scale > 0.0) {
            return Err(Error::Config("norm_scale must be positive".into()));
        }
        if self.crop.is_some_and(|c| c < 8) {
            return Err(Error::Config("crop must be at least 8".into()));
        }
        Ok(())
    }
}

/// `lr * decay^k` where `k` counts milestones at or below `epoch`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let k = cfg.lr_milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.lr * cfg.lr_decay.powi(k as i32)
}

/// Sum over steps of the mean absolute per-pixel error.
pub fn multi_step_l1_loss<S: Scalar>(sr_steps: &[FeatureMap<S>], hr: &FeatureMap<S>) -> Result<f64> {
    if sr_steps.is_empty() {
        return Err(Error::InvalidArgument("loss needs at least one step".into()));
    }
    let mut total = 0.0;
    for sr in sr_steps {
        if !sr.same_shape(hr) {
            return Err(Error::Shape(format!("step {:?} vs target {:?}", sr.shape(), hr.shape())));
        }
        let sum: f64 = sr.data().iter().zip(hr.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum();
        total += sum / hr.len() as f64;
    }
    Ok(total)
}

/// Records forward pass and loss for one sample; returns the loss node.
fn record_loss<S: Scalar>(
    model: &Afn<S>,
    tape: &mut Tape<'_, S>,
    sample: &NormalizedSample,
    smoothing: Option<S>,
) -> crate::graph::Var {
    let (dem, aerial) = sample_inputs::<S>(sample);
    let hr = FeatureMap::from_f64(1, sample.rows, sample.cols, &sample.hr).expect("sample dims");
    let d = tape.constant(dem);
    let a = tape.constant(aerial);
    let trace = model.trace(tape, &d, &a, false);
    let terms: Vec<_> = trace.sr.iter().map(|sr| tape.mean_abs_error(sr, &hr, smoothing)).collect();
    tape.sum(&terms)
}

/// Loss and parameter gradients for one sample.
pub fn loss_and_grads<S: Scalar>(
    model: &Afn<S>,
    trainable: &[bool],
    sample: &NormalizedSample,
    smoothing: Option<S>,
) -> (f64, Vec<Option<FeatureMap<S>>>) {
    let mut tape = Tape::new(model.params(), trainable);
    let loss = record_loss(model, &mut tape, sample, smoothing);
    let value = tape.value(&loss).data()[0].as_f64();
    (value, tape.backward(&loss))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<FeatureMap<f32>>,
    pub v: Vec<FeatureMap<f32>>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &[FeatureMap<f32>]) -> Self {
        let zeros = || params.iter().map(|p| FeatureMap::zeros(p.channels(), p.height(), p.width())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam update; parameters marked frozen are left alone.
    pub fn update(&mut self, params: &mut [FeatureMap<f32>], grads: &[Option<FeatureMap<f32>>], trainable: &[bool], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            let g = grads[i].as_ref();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, p) in params[i].data_mut().iter_mut().enumerate() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let mh = m[k] as f64 / c1;
                let vh = v[k] as f64 / c2;
                *p -= (lr * mh / (vh.sqrt() + ADAM_EPS)) as f32;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_rmse_m: Option<f64>,
    pub val_psnr_db: Option<f64>,
    pub gamma: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,val_rmse_m,val_psnr_db,gamma";

impl EpochLog {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{:e},{:.6},{},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            opt(self.val_rmse_m),
            opt(self.val_psnr_db),
            opt(self.gamma)
        )
    }
}

/// Validation scores in meters and decibels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValScores {
    pub rmse_m: f64,
    pub psnr_db: f64,
}

/// Pooled RMSE of SR^T in meters; PSNR averaged per patch with each patch's own range as peak.
pub fn validate_model(model: &Afn<f32>, samples: &[NormalizedSample]) -> Result<ValScores> {
    if samples.is_empty() {
        return Err(Error::EmptyMetric("no validation samples".into()));
    }
    let (mut sq, mut n, mut psnr_sum) = (0.0, 0usize, 0.0);
    for s in samples {
        let (d, a) = sample_inputs::<f32>(s);
        let sr = model.predict(&d, &a)?;
        let pred = s.denormalize(&sr.to_f64());
        let gt = s.denormalize(&s.hr);
        let r = rmse_values(&pred, &gt)?;
        sq += r * r * gt.len() as f64;
        n += gt.len();
        let (lo, hi) = gt.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let peak = if hi > lo { hi - lo } else { 1.0 };
        psnr_sum += psnr_from_rmse(r, peak)?.min(1e3);
    }
    Ok(ValScores {
        rmse_m: (sq / n as f64).sqrt(),
        psnr_db: psnr_sum / samples.len() as f64,
    })
}

/// Model, optimizer and position in the schedule.
pub struct Trainer {
    pub model: Afn<f32>,
    pub adam: AdamState,
    pub config: TrainConfig,
    /// Next epoch to run (zero-based).
    pub epoch: usize,
    pub iterations: u64,
    pub best_val_rmse: Option<f64>,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut model_cfg = model_cfg.clone();
        model_cfg.finetune_rgb |= cfg.finetune_rgb;
        let model = Afn::init(&model_cfg, cfg.seed)?;
        Ok(Self {
            adam: AdamState::new(model.params()),
            model,
            config: cfg,
            epoch: 0,
            iterations: 0,
            best_val_rmse: None,
        })
    }

    pub fn resume(ckpt: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = ckpt.optimizer.unwrap_or_else(|| AdamState::new(ckpt.model.params()));
        Ok(Self {
            model: ckpt.model,
            adam,
            config: cfg,
            epoch: ckpt.epoch,
            iterations: ckpt.progress.iterations,
            best_val_rmse: ckpt.progress.best_val_rmse,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            epoch: self.epoch,
            progress: Progress {
                iterations: self.iterations,
                best_val_rmse: self.best_val_rmse,
                seed: self.config.seed,
            },
            optimizer: Some(self.adam.clone()),
        }
    }

    /// One optimizer step on a mini-batch at the current epoch's learning rate; returns the mean loss.
    pub fn step(&mut self, batch: &[NormalizedSample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut total = 0.0;
        let mut acc: Vec<Option<FeatureMap<f32>>> = vec![None; self.model.params().len()];
        for s in batch {
            let (loss, grads) = loss_and_grads(&self.model, self.model.trainable(), s, None);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: self.epoch,
                    iteration: self.iterations as usize,
                    loss,
                });
            }
            total += loss;
            for (slot, g) in acc.iter_mut().zip(grads) {
                match (slot.as_mut(), g) {
                    (Some(a), Some(g)) => a.add_assign(&g),
                    (None, Some(g)) => *slot = Some(g),
                    _ => {}
                }
            }
        }
        let inv = 1.0 / batch.len() as f32;
        for g in acc.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        let lr = lr_at_epoch(&self.config, self.epoch);
        let trainable = self.model.trainable().to_vec();
        self.adam.update(self.model.params_mut(), &acc, &trainable, lr);
        self.iterations += 1;
        Ok(total / batch.len() as f64)
    }

    /// Shuffled, optionally cropped mini-batches for an epoch, fixed by seed and epoch number.
    pub fn epoch_batches(&self, train: &[NormalizedSample]) -> Result<Vec<Vec<NormalizedSample>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (self.epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut batches = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &train[i];
                batch.push(match self.config.crop {
                    Some(c) if c < s.rows || c < s.cols => {
                        let (c_r, c_c) = (c.min(s.rows), c.min(s.cols));
                        let r0 = rng.random_range(0..=s.rows - c_r);
                        let c0 = rng.random_range(0..=s.cols - c_c);
                        s.crop(r0, c0, c_r, c_c)?
                    }
                    _ => s.clone(),
                });
            }
            batches.push(batch);
        }
        Ok(batches)
    }

    /// Runs the next epoch and validation; returns its log row.
    pub fn run_epoch(&mut self, train: &[NormalizedSample], val: &[NormalizedSample]) -> Result<EpochLog> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("no training samples".into()));
        }
        let lr = lr_at_epoch(&self.config, self.epoch);
        let batches = self.epoch_batches(train)?;
        let mut loss_sum = 0.0;
        for b in &batches {
            loss_sum += self.step(b)?;
        }
        let scores = if val.is_empty() { None } else { Some(validate_model(&self.model, val)?) };
        let log = EpochLog {
            epoch: self.epoch,
            lr,
            train_loss: loss_sum / batches.len() as f64,
            val_rmse_m: scores.map(|s| s.rmse_m),
            val_psnr_db: scores.map(|s| s.psnr_db),
            gamma: self.model.gamma().map(f64::from),
        };
        self.epoch += 1;
        Ok(log)
    }
}

/// Where a training run writes its artifacts.
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("best.afnckpt")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last.afnckpt")
    }
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: Vec<EpochLog>,
}

/// Trains until `cfg.epochs` epochs have completed, writing metrics and checkpoints when `out` is set.
pub fn train_on(
    trainer: Trainer,
    train: &[NormalizedSample],
    val: &[NormalizedSample],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = trainer;
    let out = out.map(|d| RunOutput { dir: d.to_path_buf() });
    if let Some(o) = &out {
        std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
        let path = o.metrics();
        if trainer.epoch == 0 || !path.exists() {
            std::fs::write(&path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&path, e))?;
        }
    }
    let mut log = Vec::new();
    while trainer.epoch < trainer.config.epochs {
        let row = trainer.run_epoch(train, val)?;
        let improved = match (row.val_rmse_m, trainer.best_val_rmse) {
            (Some(v), Some(b)) => v < b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            trainer.best_val_rmse = row.val_rmse_m;
        }
        if let Some(o) = &out {
            let path = o.metrics();
            let mut text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let _ = writeln!(text, "{}", row.csv_line());
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            let ckpt = trainer.checkpoint();
            ckpt.save(o.last())?;
            if improved || (row.val_rmse_m.is_none() && !o.best().exists()) {
                ckpt.save(o.best())?;
            }
        }
        log.push(row);
    }
    Ok(TrainOutcome { trainer, log })
}

/// Loads the manifest's train and val splits and trains on them.
pub fn train(
    manifest: &DatasetManifest,
    trainer: Trainer,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let norm = trainer.config.norm_scale;
    let load = |split| -> Result<Vec<NormalizedSample>> {
        Ok(manifest.load_split(split, norm)?.into_iter().map(|(_, t)| t.normalize()).collect())
    };
    let train_set = load(Split::Train)?;
    let val_set = load(Split::Val)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("manifest needs non-empty train and val splits".into()));
    }
    train_on(trainer, &train_set, &val_set, out)
}

/// Worst-case agreement between analytic and finite-difference gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor name, relative error, largest analytic magnitude)` per parameter tensor.
    pub groups: Vec<(String, f64, f64)>,
    /// Analytic loss gradient with respect to gamma, when the variant has one.
    pub gamma_grad: Option<f64>,
    pub checked_entries: usize,
    /// Entries whose step was shrunk to stay clear of a kink.
    pub refined_entries: usize,
    /// Entries still straddling a kink at the smallest step.
    pub kinked_entries: usize,
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_MIN_STEP: f64 = 1e-8;
pub const GRAD_CHECK_SMOOTHING: f64 = 1e-8;

/// Entries sampled per tensor, on top of its largest-gradient entry.
const GRAD_CHECK_SAMPLES: usize = 12;

/// Double-precision check of the smoothed multi-step loss on a 16x16 synthetic patch.
///
/// Constant-initialized parameters (biases, slopes, gamma) are jittered first so
/// that no gradient vanishes by symmetry. A tensor's error is the largest
/// entry-wise difference divided by the tensor's largest gradient magnitude.
/// When the two probes of a central difference take different activation
/// branches the step is shrunk tenfold, down to [`GRAD_CHECK_MIN_STEP`].
pub fn gradient_check(model_cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    let mut model = Afn::<f64>::init(model_cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let specs = model.specs().to_vec();
    for (spec, p) in specs.iter().zip(model.params_mut()) {
        if let Init::Const(c) = spec.init {
            p.data_mut().iter_mut().for_each(|v| *v = c + rng.random_range(-0.1..0.1));
        }
    }
    let synth = SynthConfig {
        seed,
        size: 16,
        ..SynthConfig::default()
    };
    let sample = gen_triple(&synth, 0, 10.0)?.normalize();
    let all = vec![true; specs.len()];
    let eps = Some(GRAD_CHECK_SMOOTHING);
    let (_, grads) = loss_and_grads(&model, &all, &sample, eps);
    let eval = |m: &Afn<f64>| -> (f64, u64) {
        let mut tape = Tape::new(m.params(), &all);
        let l = record_loss(m, &mut tape, &sample, eps);
        (tape.value(&l).data()[0], tape.branch_signature())
    };

    let mut groups = Vec::with_capacity(specs.len());
    let (mut checked, mut refined, mut kinked) = (0, 0, 0);
    for (i, spec) in specs.iter().enumerate() {
        let zero = FeatureMap::zeros(spec.shape[0], spec.shape[1], spec.shape[2]);
        let analytic = grads[i].clone().unwrap_or(zero);
        let n = analytic.len();
        let argmax = (0..n)
            .max_by(|&a, &b| analytic.data()[a].abs().total_cmp(&analytic.data()[b].abs()))
            .unwrap_or(0);
        let mut picks: Vec<usize> = if n <= GRAD_CHECK_SAMPLES {
            (0..n).collect()
        } else {
            (0..GRAD_CHECK_SAMPLES).map(|_| rng.random_range(0..n)).collect()
        };
        picks.push(argmax);
        picks.sort_unstable();
        picks.dedup();
        let (mut worst_diff, mut scale) = (0.0f64, 0.0f64);
        for &k in &picks {
            let orig = model.params()[i].data()[k];
            let mut h = GRAD_CHECK_STEP;
            let numeric = loop {
                model.params_mut()[i].data_mut()[k] = orig + h;
                let (up, sig_up) = eval(&model);
                model.params_mut()[i].data_mut()[k] = orig - h;
                let (down, sig_down) = eval(&model);
                model.params_mut()[i].data_mut()[k] = orig;
                // a kink inside [orig - h, orig + h] makes the difference quotient meaningless
                if sig_up == sig_down || h <= GRAD_CHECK_MIN_STEP {
                    if sig_up != sig_down {
                        kinked += 1;
                    } else if h < GRAD_CHECK_STEP {
                        refined += 1;
                    }
                    break (up - down) / (2.0 * h);
                }
                h /= 10.0;
            };
            let a = analytic.data()[k];
            worst_diff = worst_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
            checked += 1;
        }
        let rel = if scale > 0.0 { worst_diff / scale } else { worst_diff };
        groups.push((spec.name.clone(), rel, scale));
    }
    let max_rel_error = groups.iter().map(|g| g.1).fold(0.0, f64::max);
    let gamma_grad = model.layout().gamma.map(|g| grads[g].as_ref().map_or(0.0, |t| t.data()[0]));
    Ok(GradCheckReport {
        max_rel_error,
        groups,
        gamma_grad,
        checked_entries: checked,
        refined_entries: refined,
        kinked_entries: kinked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        let c = TrainConfig::default();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-18;
        assert!(close(lr_at_epoch(&c, 0), 1e-4));
        assert!(close(lr_at_epoch(&c, 44), 1e-4));
        assert!(close(lr_at_epoch(&c, 45), 5e-5));
        assert!(close(lr_at_epoch(&c, 60), 2.5e-5));
        assert!(close(lr_at_epoch(&c, 70), 1.25e-5));
    }

    #[test]
    fn config_rejects_bad_values() {
        let bad = TrainConfig {
            lr_milestones: vec![5, 5],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr_decay: 1.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn loss_examples() {
        let hr = FeatureMap::from_fn(1, 3, 3, |_, y, x| (y * 3 + x) as f64);
        assert_eq!(multi_step_l1_loss(&[hr.clone(), hr.clone()], &hr).unwrap(), 0.0);
        let off: Vec<_> = (0..4).map(|_| hr.map(|v| v + 0.25)).collect();
        assert!((multi_step_l1_loss(&off, &hr).unwrap() - 1.0).abs() < 1e-12);
        assert!(multi_step_l1_loss::<f64>(&[], &hr).is_err());
    }

    #[test]
    fn zero_lr_step_keeps_params() {
        let model = Afn::<f32>::init(&ModelConfig::tiny(), 1).unwrap();
        let mut params = model.params().to_vec();
        let grads: Vec<_> = params.iter().map(|p| Some(p.map(|v| v + 1.0))).collect();
        let mut adam = AdamState::new(&params);
        adam.update(&mut params, &grads, model.trainable(), 0.0);
        assert_eq!(params, model.params());
    }

    #[test]
    fn csv_line_has_six_fields() {
        let row = EpochLog {
            epoch: 3,
            lr: 1e-4,
            train_loss: 0.5,
            val_rmse_m: Some(1.25),
            val_psnr_db: None,
            gamma: Some(0.0),
        };
        assert_eq!(row.csv_line().split(',').count(), METRICS_HEADER.split(',').count());
    }
}
