//! SGD with momentum, the warmup-then-polynomial learning-rate schedule and
//! the deterministic training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{self, AugmentConfig, Dataset, Rgb, SyntheticConfig, MASK_COLORS};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, Batch, Model, ModelConfig, ModelVariant};
use crate::param::ParamStore;
use crate::tensor::{Real, Tensor};

/// Batch size at which `lr_peak` applies unscaled.
pub const REFERENCE_BATCH: usize = 512;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MODEL_FILE: &str = "model.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Peak learning rate at the reference batch size; scaled linearly for
    /// smaller batches.
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    /// Epochs over which the arcface margin ramps linearly from zero to its
    /// configured value.
    pub margin_warmup_epochs: usize,
    pub total_epochs: usize,
    pub poly_power: f64,
    pub seed: u64,
    pub ma_probability: f64,
    pub variant: ModelVariant,
    pub flip_prob: f64,
    pub translate_px: usize,
    pub mask_colors: Vec<Rgb>,
    pub model: ArchConfig,
    pub data: SyntheticConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_peak: 0.2,
            warmup_epochs: 2,
            margin_warmup_epochs: 10,
            total_epochs: 30,
            poly_power: 2.0,
            seed: 0,
            ma_probability: 0.5,
            variant: ModelVariant::MfsaCal,
            flip_prob: 0.5,
            translate_px: 2,
            mask_colors: MASK_COLORS.to_vec(),
            model: ArchConfig::default(),
            data: SyntheticConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::file(path, e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Learning-rate peak after linear batch scaling.
    pub fn effective_lr_peak(&self) -> f64 {
        self.lr_peak * (self.batch_size as f64 / REFERENCE_BATCH as f64).min(1.0)
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            ma_probability: self.ma_probability,
            flip_prob: self.flip_prob,
            translate_px: self.translate_px,
            mask_colors: self.mask_colors.clone(),
        }
    }

    pub fn model_config(&self, num_classes: usize, image_size: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            image_size,
            num_classes,
            arch: self.model.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch normalization".into()));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be positive".into()));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be below total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.margin_warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "margin_warmup_epochs ({}) must not exceed total_epochs ({})",
                self.margin_warmup_epochs, self.total_epochs
            )));
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lr_peak", self.lr_peak),
            ("poly_power", self.poly_power),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        self.augment().validate()
    }
}

/// Linear warmup to the peak, then `peak·(1 − progress)^power` down to zero
/// at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub power: f64,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        Schedule {
            peak: cfg.effective_lr_peak(),
            warmup_steps: cfg.warmup_epochs * steps_per_epoch,
            total_steps: cfg.total_epochs * steps_per_epoch,
            power: cfg.poly_power,
        }
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::invalid(format!(
                "step {step} beyond the schedule's {} steps",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.peak * step as f64 / self.warmup_steps as f64);
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        if span == 0.0 {
            return Ok(0.0);
        }
        let progress = (step - self.warmup_steps) as f64 / span;
        Ok(self.peak * (1.0 - progress).powf(self.power))
    }
}

/// Momentum SGD: `v ← μv + g + λp` (decay on weights only), `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocities: Vec<Tensor<T>>,
    pub steps: u64,
}

impl<T: Real> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocities: store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            steps: 0,
        }
    }

    /// Applies one update from the gradients stored in `store`. Nothing is
    /// modified when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.velocities.len() != store.params().len() {
            return Err(Error::invalid("optimizer state does not match the parameter set"));
        }
        if let Some(p) = store.params().iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFinite {
                op: format!("gradient of {}", p.name),
            });
        }
        let (mu, lr) = (T::c(self.momentum), T::c(lr));
        for (p, v) in store.params_mut().iter_mut().zip(&mut self.velocities) {
            let wd = T::c(if p.decays() { self.weight_decay } else { 0.0 });
            for ((w, g), vel) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.data_mut()) {
                *vel = mu * *vel + *g + wd * *w;
                *w = *w - lr * *vel;
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// One line of the metrics log; absent losses serialize as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_arc: f64,
    pub loss_mask: Option<f64>,
    pub loss_adv: Option<f64>,
    pub lr: f64,
    pub mask_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model<f32>,
    pub log: Vec<EpochLog>,
}

/// Assembles the augmented batch for `indices` of `dataset` in `epoch`.
/// Each sample's randomness depends only on `(seed, epoch, index)`.
pub fn make_batch(
    dataset: &Dataset,
    indices: &[usize],
    aug: &AugmentConfig,
    seed: u64,
    epoch: usize,
) -> Result<Batch<f32>> {
    let samples: Vec<data::LabeledSample> = indices
        .par_iter()
        .map(|&i| {
            let mut rng = data::rng_for(&[seed, 0xa06, epoch as u64, i as u64]);
            let masked = data::random_mask(&dataset.samples[i], aug, &mut rng);
            data::augment(&masked, aug, &mut rng)
        })
        .collect();
    Ok(Batch {
        images: Dataset::stack(&samples)?,
        labels: samples.iter().map(|s| s.identity).collect(),
        mask_flags: samples.iter().map(|s| s.masked).collect(),
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Output files of a training run.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_FILE)
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join(CONFIG_FILE)
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join(METRICS_FILE)
    }
    pub fn model_config(&self) -> PathBuf {
        self.dir.join(MODEL_FILE)
    }
}

/// Trains a fresh model on `dataset`. With `out_dir`, writes the resolved
/// config, one metrics line per epoch and a checkpoint after every epoch, so
/// a divergence leaves the last good checkpoint in place.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<Trained> {
    cfg.validate()?;
    let (h, w) = dataset
        .image_size()
        .ok_or_else(|| Error::invalid("training dataset is empty"))?;
    if h != w {
        return Err(Error::invalid(format!("images must be square, got {h}x{w}")));
    }
    let model_cfg = cfg.model_config(dataset.num_identities(), h);
    let mut model = Model::<f32>::new(model_cfg.clone(), data::mix_seed(&[cfg.seed, 0x30de1]))?;
    let steps_per_epoch = dataset.len() / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::invalid(format!(
            "dataset of {} samples is smaller than one batch of {}",
            dataset.len(),
            cfg.batch_size
        )));
    }
    let schedule = Schedule::new(cfg, steps_per_epoch);
    let aug = cfg.augment();
    let mut sgd = Sgd::new(&model.store, cfg.momentum, cfg.weight_decay);
    let margin = model.config.arch.arcface.margin;
    let margin_steps = cfg.margin_warmup_epochs * steps_per_epoch;

    let files = out_dir.map(|d| RunFiles { dir: d.to_path_buf() });
    let mut metrics = None;
    if let Some(f) = &files {
        fs::create_dir_all(&f.dir).map_err(|e| Error::io(&f.dir, e))?;
        write_atomic(&f.config(), cfg.to_json().as_bytes())?;
        let model_json = serde_json::to_string_pretty(&model_cfg).expect("model config serializes");
        write_atomic(&f.model_config(), model_json.as_bytes())?;
        let file = fs::File::create(f.metrics()).map_err(|e| Error::io(f.metrics(), e))?;
        metrics = Some(std::io::BufWriter::new(file));
    }

    let mut log = Vec::with_capacity(cfg.total_epochs);
    let mut step = 0;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.total_epochs {
        order.shuffle(&mut data::rng_for(&[cfg.seed, 0x5f1e, epoch as u64]));
        let (mut total, mut arc, mut mask, mut adv) = (0.0, 0.0, 0.0, 0.0);
        let (mut correct, mut seen, mut has_mask, mut has_adv) = (0usize, 0usize, false, false);
        let mut lr = 0.0;
        for chunk in order.chunks_exact(cfg.batch_size) {
            let diverged = |reason: String| Error::Diverged { epoch, step, reason };
            let batch = make_batch(dataset, chunk, &aug, cfg.seed, epoch)?;
            model.config.arch.arcface.margin = margin_at(margin, step, margin_steps);
            let out = model.train_step(&batch).map_err(|e| diverged(e.to_string()))?;
            if !out.total.is_finite() {
                return Err(diverged(format!("loss is {}", out.total)));
            }
            lr = schedule.lr_at(step)?;
            sgd.step(&mut model.store, lr).map_err(|e| diverged(e.to_string()))?;
            step += 1;
            total += out.total;
            arc += out.arc;
            if let Some(m) = out.mask {
                mask += m;
                has_mask = true;
            }
            if let Some(a) = out.adv {
                adv += a;
                has_adv = true;
            }
            if let Some(c) = out.mask_correct {
                correct += c;
                seen += chunk.len();
            }
        }
        let n = steps_per_epoch as f64;
        let line = EpochLog {
            epoch,
            step,
            loss_total: total / n,
            loss_arc: arc / n,
            loss_mask: has_mask.then_some(mask / n),
            loss_adv: has_adv.then_some(adv / n),
            lr,
            mask_acc: (seen > 0).then(|| correct as f64 / seen as f64),
        };
        log::info!(
            "{} epoch {epoch}: loss {:.4} arc {:.4} mask_acc {:?}",
            cfg.variant,
            line.loss_total,
            line.loss_arc,
            line.mask_acc
        );
        if let (Some(f), Some(m)) = (&files, metrics.as_mut()) {
            let text = serde_json::to_string(&line).expect("log line serializes");
            writeln!(m, "{text}")
                .and_then(|_| m.flush())
                .map_err(|e| Error::io(f.metrics(), e))?;
            write_atomic(&f.checkpoint(), &checkpoint::to_bytes(&model.store))?;
        }
        log.push(line);
    }
    model.config.arch.arcface.margin = margin;
    Ok(Trained { model, log })
}

/// Arcface margin in effect at `step` of a linear ramp over `ramp_steps`.
pub fn margin_at(margin: f64, step: usize, ramp_steps: usize) -> f64 {
    if step >= ramp_steps {
        margin
    } else {
        margin * step as f64 / ramp_steps as f64
    }
}

/// Rebuilds a trained model from a run directory.
pub fn load_run(dir: &Path) -> Result<(TrainConfig, Model<f32>)> {
    let files = RunFiles { dir: dir.to_path_buf() };
    let cfg = TrainConfig::load(&files.config())?;
    let path = files.model_config();
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let model_cfg: ModelConfig =
        serde_json::from_str(&text).map_err(|e| Error::file(&path, e.to_string()))?;
    let mut model = Model::<f32>::new(model_cfg, 0)?;
    checkpoint::load(&mut model.store, &files.checkpoint())?;
    Ok((cfg, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamKind;

    fn schedule() -> Schedule {
        let cfg = TrainConfig { batch_size: 512, total_epochs: 10, ..TrainConfig::default() };
        Schedule::new(&cfg, 5)
    }

    #[test]
    fn schedule_endpoints() {
        let s = schedule();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(s.warmup_steps).unwrap(), 0.2);
        assert_eq!(s.lr_at(s.total_steps).unwrap(), 0.0);
        assert!(s.lr_at(s.total_steps + 1).is_err());
    }

    #[test]
    fn schedule_is_continuous_and_decays() {
        let s = schedule();
        let below = s.lr_at(s.warmup_steps - 1).unwrap();
        let above = s.lr_at(s.warmup_steps + 1).unwrap();
        assert!((0.2 - below) <= 0.2 / s.warmup_steps as f64 + 1e-12);
        assert!(0.2 - above < 0.02);
        let tail: Vec<f64> = (s.warmup_steps..=s.total_steps).map(|t| s.lr_at(t).unwrap()).collect();
        assert!(tail.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn small_batches_scale_the_peak() {
        let cfg = TrainConfig { batch_size: 64, ..TrainConfig::default() };
        assert!((cfg.effective_lr_peak() - 0.025).abs() < 1e-15);
    }

    fn one_param(kind: ParamKind, value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::full([2], value), kind).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore<f64>, g: f64) {
        let id = s.id("p").unwrap();
        s.get_mut(id).grad = Tensor::full([2], g);
    }

    #[test]
    fn vanilla_step_without_momentum_or_decay() {
        let mut s = one_param(ParamKind::Weight, 1.0);
        set_grad(&mut s, 0.5);
        let mut opt = Sgd::new(&s, 0.0, 0.0);
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.params()[0].value.data(), &[0.95, 0.95]);
    }

    #[test]
    fn zero_lr_keeps_params_but_updates_velocity() {
        let mut s = one_param(ParamKind::Weight, 1.0);
        set_grad(&mut s, 0.5);
        let mut opt = Sgd::new(&s, 0.9, 5e-4);
        opt.step(&mut s, 0.0).unwrap();
        assert_eq!(s.params()[0].value.data(), &[1.0, 1.0]);
        assert!((opt.velocities[0].data()[0] - (0.5 + 5e-4)).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps_follow_recurrence() {
        let (g, lr) = (0.3, 0.05);
        let mut s = one_param(ParamKind::Weight, 2.0);
        let mut opt = Sgd::new(&s, 0.9, 0.0);
        for _ in 0..2 {
            set_grad(&mut s, g);
            opt.step(&mut s, lr).unwrap();
        }
        let delta = s.params()[0].value.data()[0] - 2.0;
        assert!((delta - (-lr * g * 2.9)).abs() < 1e-14);
    }

    #[test]
    fn decay_skips_bias_and_norm_params() {
        for kind in [ParamKind::Bias, ParamKind::NormScale, ParamKind::NormShift] {
            let mut s = one_param(kind, 3.0);
            let mut opt = Sgd::new(&s, 0.9, 0.1);
            opt.step(&mut s, 1.0).unwrap();
            assert_eq!(s.params()[0].value.data()[0], 3.0);
        }
        let mut s = one_param(ParamKind::Weight, 3.0);
        let mut opt = Sgd::new(&s, 0.9, 0.1);
        let mut last = 3.0f64;
        for _ in 0..5 {
            opt.step(&mut s, 0.1).unwrap();
            let now = s.params()[0].value.norm();
            assert!(now < last * 2f64.sqrt());
            last = now / 2f64.sqrt();
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = one_param(ParamKind::Weight, 1.0);
        set_grad(&mut s, f64::NAN);
        let mut opt = Sgd::new(&s, 0.9, 0.0);
        let err = opt.step(&mut s, 0.1).unwrap_err();
        assert!(err.to_string().contains("gradient of p"), "{err}");
        assert_eq!(s.params()[0].value.data()[0], 1.0);
    }

    #[test]
    fn config_rejects_unknown_keys_by_name() {
        let err = TrainConfig::from_json(r#"{"batch_size": 8, "learning_rate": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let cfg = TrainConfig::from_json(r#"{"variant": "baseline", "ma_probability": 0.1}"#).unwrap();
        assert_eq!(cfg.variant, ModelVariant::Baseline);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = TrainConfig::default();
        assert!(TrainConfig { batch_size: 1, ..base.clone() }.validate().is_err());
        assert!(TrainConfig { warmup_epochs: 30, ..base.clone() }.validate().is_err());
        assert!(TrainConfig { ma_probability: 1.5, ..base.clone() }.validate().is_err());
        assert!(TrainConfig { momentum: f64::NAN, ..base }.validate().is_err());
    }
}
