//! Mini-batch training with Adam, the step learning-rate schedule and the
//! two-phase loss curriculum.

mod adam;
mod schedule;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use schedule::{LrSchedule, DEFAULT_SCALE};

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{augment_pair, mix64, AugmentPolicy, DataError, SamplePair};
use crate::evaluator::{mean_epe, EvalError};
use crate::flow_ops::DEFAULT_LAMBDA;
use crate::model::{
    downsample_flow, downsample_mask, forward, predict, to_network_input, ModelConfig, ModelError, ModelParams,
    PREDICTION_STRIDE,
};
use crate::tensor::{Tape, Tensor, TensorError};

/// Fixed key for the validation split, so the split depends only on sample indices.
const SPLIT_KEY: u64 = 0x5eed_5011_7000_0001;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss at iteration {iteration}{}", checkpoint.as_ref().map(|p| format!(" (last checkpoint: {})", p.display())).unwrap_or_default())]
    NonFiniteLoss {
        iteration: u64,
        checkpoint: Option<PathBuf>,
    },
    #[error("{0}: {1}")]
    Io(String, #[source] io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TrainError + '_ {
    move |e| TrainError::Io(path.display().to_string(), e)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Total iterations; `None` means the full-scale 600k scaled by the schedule.
    pub iterations: Option<u64>,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub schedule: LrSchedule,
    /// Replaces the phase-1 schedule with a fixed rate.
    pub constant_lr: Option<f64>,
    /// Reconstruction weight during phase 2; 0 disables phase 2.
    pub lambda: f64,
    /// First phase-2 iteration; `None` means the full-scale 500k scaled.
    pub phase2_start: Option<u64>,
    /// Fixed phase-2 learning rate.
    pub phase2_lr: f64,
    pub augment: Option<AugmentPolicy>,
    pub val_fraction: f64,
    pub validate_every: u64,
    /// Checkpoint cadence in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: None,
            batch_size: 8,
            seed: 0,
            adam: AdamConfig::default(),
            schedule: LrSchedule::default(),
            constant_lr: None,
            lambda: DEFAULT_LAMBDA,
            phase2_start: None,
            phase2_lr: 1.25e-5,
            augment: Some(AugmentPolicy::default()),
            val_fraction: 0.05,
            validate_every: 500,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.adam.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(TrainError::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(TrainError::Config(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        if self.constant_lr.is_some_and(|lr| !(lr >= 0.0)) || !(self.phase2_lr >= 0.0) {
            return Err(TrainError::Config("learning rates must be non-negative".into()));
        }
        if let Some(p) = &self.augment {
            p.validate()?;
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> u64 {
        self.iterations.unwrap_or_else(|| self.schedule.scaled(600_000))
    }

    pub fn phase2_begin(&self) -> Option<u64> {
        (self.lambda > 0.0).then(|| self.phase2_start.unwrap_or_else(|| self.schedule.scaled(500_000)))
    }

    /// Learning rate and reconstruction weight at a 0-based iteration.
    pub fn step_params(&self, iteration: u64) -> (f64, f64) {
        match self.phase2_begin() {
            Some(start) if iteration >= start => (self.phase2_lr, self.lambda),
            _ => (self.constant_lr.unwrap_or_else(|| self.schedule.lr_at(iteration)), 0.0),
        }
    }

    /// Sets one field from text; `Ok(false)` for keys this config does not own.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool, TrainError> {
        fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, TrainError>
        where
            V::Err: fmt::Display,
        {
            value
                .parse()
                .map_err(|e| TrainError::Config(format!("{key} = {value}: {e}")))
        }
        let optional = |v: &str| -> Result<Option<f64>, TrainError> {
            if v == "none" {
                Ok(None)
            } else {
                parse(key, v).map(Some)
            }
        };
        match key {
            "iterations" => self.iterations = Some(parse(key, value)?),
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "scale_factor" => self.schedule.scale = parse(key, value)?,
            "warmup_lr" => self.schedule.warmup_lr = parse(key, value)?,
            "base_lr" => self.schedule.base_lr = parse(key, value)?,
            "lr" => self.constant_lr = optional(value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "phase2_start" => self.phase2_start = Some(parse(key, value)?),
            "phase2_lr" => self.phase2_lr = parse(key, value)?,
            "augment" => {
                self.augment = match value {
                    "true" | "on" => Some(AugmentPolicy::default()),
                    "false" | "off" => None,
                    other => return Err(TrainError::Config(format!("augment must be on or off, got `{other}`"))),
                }
            }
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "validate_every" => self.validate_every = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "iterations = {}", self.total_iterations())?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "beta1 = {}", self.adam.beta1)?;
        writeln!(f, "beta2 = {}", self.adam.beta2)?;
        writeln!(f, "adam_eps = {}", self.adam.eps)?;
        writeln!(f, "scale_factor = {}", self.schedule.scale)?;
        writeln!(f, "warmup_lr = {}", self.schedule.warmup_lr)?;
        writeln!(f, "base_lr = {}", self.schedule.base_lr)?;
        match self.constant_lr {
            Some(lr) => writeln!(f, "lr = {lr}")?,
            None => writeln!(f, "lr = none")?,
        }
        writeln!(f, "lambda = {}", self.lambda)?;
        match self.phase2_begin() {
            Some(start) => writeln!(f, "phase2_start = {start}")?,
            None => writeln!(f, "# phase 2 disabled")?,
        }
        writeln!(f, "phase2_lr = {}", self.phase2_lr)?;
        writeln!(f, "augment = {}", if self.augment.is_some() { "on" } else { "off" })?;
        writeln!(f, "val_fraction = {}", self.val_fraction)?;
        writeln!(f, "validate_every = {}", self.validate_every)?;
        writeln!(f, "checkpoint_every = {}", self.checkpoint_every)
    }
}

/// Splits sample indices into `(train, validation)`. Membership depends only
/// on the index, so growing a dataset never moves existing samples. With at
/// least two samples, both sides are non-empty.
pub fn split_indices(len: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let key = |i: usize| mix64(SPLIT_KEY ^ i as u64);
    let threshold = (val_fraction * u64::MAX as f64) as u64;
    let (mut val, mut train): (Vec<usize>, Vec<usize>) = (0..len).partition(|&i| key(i) < threshold);
    if len >= 2 && val_fraction > 0.0 && val.is_empty() {
        let pick = (0..len).min_by_key(|&i| key(i)).expect("len >= 2");
        train.retain(|&i| i != pick);
        val.push(pick);
    }
    if len >= 2 && train.is_empty() {
        train.push(val.pop().expect("len >= 2"));
    }
    (train, val)
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    pub epe_val: Option<f64>,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:e}\t{:.6}\t", self.iteration, self.lr, self.loss)?;
        if let Some(e) = self.epe_val {
            write!(f, "{e:.6}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent {
    Iteration(LogRecord),
    SkippedStep { iteration: u64, param: String },
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub optimizer: OptimizerState<f32>,
    pub records: Vec<LogRecord>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub skipped_steps: Vec<(u64, String)>,
    pub final_val_epe: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub seconds: f64,
}

/// Network inputs and low-resolution targets of one mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub image_a: Tensor<f32>,
    pub image_b: Tensor<f32>,
    pub flow: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Batch {
    pub fn assemble(samples: &[SamplePair]) -> Result<Self, TrainError> {
        let stack = |f: &dyn Fn(&SamplePair) -> Tensor<f32>| -> Result<Tensor<f32>, TrainError> {
            let items: Vec<Tensor<f32>> = samples.iter().map(f).collect();
            Ok(Tensor::stack(&items.iter().collect::<Vec<_>>())?)
        };
        Ok(Batch {
            image_a: stack(&|s| to_network_input(&s.image_a))?,
            image_b: stack(&|s| to_network_input(&s.image_b))?,
            flow: stack(&|s| downsample_flow(&s.flow, PREDICTION_STRIDE))?,
            mask: stack(&|s| downsample_mask(&s.valid_mask(), PREDICTION_STRIDE))?,
        })
    }
}

/// Loss and parameter gradients of one batch.
pub fn loss_and_gradients(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    batch: &Batch,
    lambda: f64,
) -> Result<(f64, BTreeMap<String, Tensor<f32>>), TrainError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let a = tape.constant(batch.image_a.clone());
    let b = tape.constant(batch.image_b.clone());
    let gt = tape.constant(batch.flow.clone());
    let out = forward(&mut tape, &bound, cfg, a, b)?;
    let loss = tape.total_loss(
        out.flow,
        gt,
        Some(batch.mask.clone()),
        out.features_a.y_tilde,
        out.features_b.y_tilde,
        lambda,
    )?;
    let value = tape.value(loss.total).data()[0] as f64;
    if !value.is_finite() {
        return Ok((value, BTreeMap::new()));
    }
    tape.backward(loss.total)?;
    let grads = bound
        .iter()
        .map(|(name, v)| {
            let g = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
            (name.to_string(), g)
        })
        .collect();
    Ok((value, grads))
}

/// Pixel-weighted mean EPE of full-resolution predictions over `samples`.
pub fn validation_epe(params: &ModelParams<f32>, cfg: &ModelConfig, samples: &[&SamplePair]) -> Result<f64, TrainError> {
    let (mut sum, mut count) = (0.0, 0.0);
    for s in samples {
        let pred = predict(params, cfg, &s.image_a, &s.image_b)?;
        let mask = s.valid_mask();
        let n = mask.sum() as f64;
        if n > 0.0 {
            sum += mean_epe(&pred, &s.flow, Some(&mask))? * n;
            count += n;
        }
    }
    if count == 0.0 {
        return Err(EvalError::EmptyMask.into());
    }
    Ok(sum / count)
}

pub struct Trainer<'a> {
    model: &'a ModelConfig,
    config: &'a TrainConfig,
    out_dir: Option<PathBuf>,
    initial: Option<ModelParams<f32>>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a ModelConfig, config: &'a TrainConfig) -> Self {
        Trainer {
            model,
            config,
            out_dir: None,
            initial: None,
        }
    }

    /// Writes `metrics.log`, `model.cfg`, `train.cfg` and checkpoints into `dir`.
    pub fn output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    /// Starts from these parameters instead of a seeded initialization.
    pub fn initial_params(mut self, params: ModelParams<f32>) -> Self {
        self.initial = Some(params);
        self
    }

    fn check_dataset(&self, dataset: &[SamplePair]) -> Result<(), TrainError> {
        let first = dataset.first().ok_or(TrainError::EmptyDataset)?;
        let (h, w) = (first.height(), first.width());
        let m = self.model.required_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(ModelError::Divisibility {
                height: h,
                width: w,
                multiple: m,
            }
            .into());
        }
        if let Some(i) = dataset.iter().position(|s| s.height() != h || s.width() != w) {
            return Err(TrainError::Config(format!(
                "sample {i} is {}x{}, expected {h}x{w} like the first sample",
                dataset[i].height(),
                dataset[i].width()
            )));
        }
        Ok(())
    }

    pub fn run(self, dataset: &[SamplePair], mut observer: impl FnMut(&TrainEvent)) -> Result<TrainOutcome, TrainError> {
        let (model, cfg) = (self.model, self.config);
        model.validate()?;
        cfg.validate()?;
        self.check_dataset(dataset)?;
        let started = Instant::now();

        let (train_idx, val_idx) = split_indices(dataset.len(), cfg.val_fraction);
        let mut params = match self.initial {
            Some(p) => p,
            None => ModelParams::init(model, cfg.seed)?,
        };
        let mut opt = OptimizerState::new();
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed));

        let mut log = match &self.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
                let write = |name: &str, text: String| {
                    let p = dir.join(name);
                    fs::write(&p, text).map_err(io_err(&p))
                };
                write("model.cfg", model.to_text())?;
                write("train.cfg", cfg.to_string())?;
                let p = dir.join("metrics.log");
                Some(BufWriter::new(File::create(&p).map_err(io_err(&p))?))
            }
            None => None,
        };

        let total = cfg.total_iterations();
        let val_samples: Vec<&SamplePair> = val_idx.iter().map(|&i| &dataset[i]).collect();
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        let mut records = Vec::with_capacity(total as usize);
        let mut skipped = Vec::new();
        let mut checkpoints = Vec::new();
        let mut final_val = None;
        let pool = if train_idx.is_empty() { &val_idx } else { &train_idx };

        for it in 0..total {
            let (lr, lambda) = cfg.step_params(it);
            let mut batch_samples = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                if cursor == order.len() {
                    order = pool.clone();
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let sample = &dataset[order[cursor]];
                cursor += 1;
                let aug_seed: u64 = rng.random();
                batch_samples.push(match &cfg.augment {
                    Some(policy) => augment_pair(sample, aug_seed, policy)?,
                    None => sample.clone(),
                });
            }
            let batch = Batch::assemble(&batch_samples)?;
            let (loss, grads) = loss_and_gradients(&params, model, &batch, lambda)?;
            if !loss.is_finite() {
                if let Some(w) = log.as_mut() {
                    let _ = w.flush();
                }
                return Err(TrainError::NonFiniteLoss {
                    iteration: it,
                    checkpoint: checkpoints.last().cloned(),
                });
            }
            match adam_step(params.iter_mut(), &grads, &mut opt, lr, &cfg.adam) {
                Ok(()) => {}
                Err(TrainError::NonFiniteGradient { param }) => {
                    observer(&TrainEvent::SkippedStep {
                        iteration: it,
                        param: param.clone(),
                    });
                    skipped.push((it, param));
                }
                Err(e) => return Err(e),
            }

            let done = it + 1;
            let last = done == total;
            let validate = !val_samples.is_empty()
                && (last || (cfg.validate_every > 0 && done % cfg.validate_every == 0));
            let epe_val = if validate {
                Some(validation_epe(&params, model, &val_samples)?)
            } else {
                None
            };
            if last {
                final_val = epe_val;
            }
            let record = LogRecord {
                iteration: it,
                lr,
                loss,
                epe_val,
            };
            if let Some(w) = log.as_mut() {
                writeln!(w, "{record}").map_err(|e| TrainError::Io("metrics.log".into(), e))?;
            }
            observer(&TrainEvent::Iteration(record));
            records.push(record);

            if let Some(dir) = &self.out_dir {
                if last || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
                    let path = dir.join(format!("checkpoint_{done:06}.ckpt"));
                    params.save(&path)?;
                    if let Some(w) = log.as_mut() {
                        w.flush().map_err(|e| TrainError::Io("metrics.log".into(), e))?;
                    }
                    observer(&TrainEvent::Checkpoint(path.clone()));
                    checkpoints.push(path);
                }
            }
        }
        if let Some(dir) = &self.out_dir {
            let path = dir.join("final.ckpt");
            params.save(&path)?;
            checkpoints.push(path);
        }
        if let Some(mut w) = log {
            w.flush().map_err(|e| TrainError::Io("metrics.log".into(), e))?;
        }
        Ok(TrainOutcome {
            params,
            optimizer: opt,
            records,
            train_indices: train_idx,
            val_indices: val_idx,
            skipped_steps: skipped,
            final_val_epe: final_val,
            checkpoints,
            seconds: started.elapsed().as_secs_f64(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_pair, MotionBounds, MotionSpec};

    fn dataset(n: usize, size: usize) -> Vec<SamplePair> {
        (0..n)
            .map(|i| {
                generate_synthetic_pair(i as u64, size, size, &MotionSpec::Random(MotionBounds::translations(4.0)))
                    .unwrap()
                    .pair
            })
            .collect()
    }

    fn quick(iterations: u64) -> TrainConfig {
        TrainConfig {
            iterations: Some(iterations),
            batch_size: 2,
            constant_lr: Some(1e-4),
            lambda: 0.0,
            augment: None,
            validate_every: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_initialization() {
        let cfg = TrainConfig {
            constant_lr: Some(0.0),
            ..quick(1)
        };
        let model = ModelConfig::tiny();
        let out = Trainer::new(&model, &cfg).run(&dataset(3, 32), |_| {}).unwrap();
        assert_eq!(out.params, ModelParams::init(&model, cfg.seed).unwrap());
        assert_eq!(out.optimizer.step, 1);
    }

    #[test]
    fn runs_are_deterministic() {
        let model = ModelConfig::tiny();
        let cfg = TrainConfig {
            augment: Some(AugmentPolicy::default()),
            lambda: DEFAULT_LAMBDA,
            phase2_start: Some(3),
            ..quick(6)
        };
        let data = dataset(4, 32);
        let a = Trainer::new(&model, &cfg).run(&data, |_| {}).unwrap();
        let b = Trainer::new(&model, &cfg).run(&data, |_| {}).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.params, b.params);
        assert!(a.records.iter().all(|r| r.loss.is_finite()));
        assert_eq!(a.records[2].lr, 1e-4);
        assert_eq!(a.records[3].lr, 1.25e-5);
    }

    #[test]
    fn writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let model = ModelConfig::tiny();
        let cfg = TrainConfig {
            checkpoint_every: 2,
            validate_every: 2,
            ..quick(3)
        };
        let mut events = Vec::new();
        let out = Trainer::new(&model, &cfg)
            .output_dir(dir.path())
            .run(&dataset(3, 32), |e| events.push(e.clone()))
            .unwrap();
        let log = fs::read_to_string(dir.path().join("metrics.log")).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].split('\t').count(), 4);
        assert!(lines[0].ends_with('\t'));
        assert!(!lines[1].ends_with('\t'), "validation EPE after 2 iterations");
        assert!(dir.path().join("checkpoint_000002.ckpt").exists());
        let restored = ModelParams::<f32>::load(&dir.path().join("final.ckpt"), &model).unwrap();
        assert_eq!(restored, out.params);
        assert_eq!(ModelConfig::from_text(&fs::read_to_string(dir.path().join("model.cfg")).unwrap()).unwrap(), model);
        assert!(events.iter().any(|e| matches!(e, TrainEvent::Checkpoint(_))));
        assert!(out.final_val_epe.is_some());
    }

    #[test]
    fn split_is_stable_and_non_empty() {
        let (train, val) = split_indices(200, 0.05);
        assert_eq!(train.len() + val.len(), 200);
        assert!((5..=20).contains(&val.len()), "{} validation samples", val.len());
        let (_, val_big) = split_indices(400, 0.05);
        assert!(val.iter().all(|i| val_big.contains(i)));
        let (train, val) = split_indices(2, 0.05);
        assert_eq!((train.len(), val.len()), (1, 1));
        assert_eq!(split_indices(1, 0.05), (vec![0], vec![]));
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = ModelConfig::tiny();
        let cfg = quick(1);
        assert!(matches!(Trainer::new(&model, &cfg).run(&[], |_| {}), Err(TrainError::EmptyDataset)));
        let odd = dataset(2, 48);
        assert!(Trainer::new(&model, &cfg).run(&odd, |_| {}).is_err());
        let bad = TrainConfig { batch_size: 0, ..quick(1) };
        assert!(Trainer::new(&model, &bad).run(&dataset(2, 32), |_| {}).is_err());
        let bad = TrainConfig {
            adam: AdamConfig { beta1: 1.0, ..AdamConfig::default() },
            ..quick(1)
        };
        assert!(Trainer::new(&model, &bad).run(&dataset(2, 32), |_| {}).is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = TrainConfig::default();
        for (k, v) in [("iterations", "12"), ("lr", "0.001"), ("lambda", "0"), ("augment", "off"), ("scale_factor", "0.5")] {
            assert!(cfg.apply(k, v).unwrap());
        }
        assert!(!cfg.apply("bogus", "1").unwrap());
        assert!(cfg.apply("iterations", "x").is_err());
        let mut back = TrainConfig::default();
        for (k, v) in crate::model::parse_key_values(&cfg.to_string()).unwrap() {
            assert!(back.apply(&k, &v).unwrap(), "{k}");
        }
        assert_eq!(back, cfg);
    }
}
