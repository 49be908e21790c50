//! Training loop, evaluation, and the training configuration file.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoders::{PromptSet, TextConfig};
use crate::error::{Error, Result};
use crate::head::predict;
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::mgfe::{HighPassConfig, TopoConfig};
use crate::model::{Ablation, Model, ModelConfig};
use crate::optim::{Adam, AdamConfig, StepDecay};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learn_rate: f64,
    pub decay_factor: f64,
    /// Fractions of the run at which the rate is multiplied by `decay_factor`.
    pub milestones: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps. The learning-rate schedule is
    /// still laid out over `epochs`, so a cap truncates the nominal run.
    pub max_steps: Option<usize>,
    /// If set, must equal the dataset's patch size.
    pub patch_size: Option<usize>,
    /// If set, must equal the dataset's class count (background included).
    pub classes: Option<usize>,
    pub channels: usize,
    pub downsample: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub text: TextConfig,
    pub high_pass: HighPassConfig,
    pub topo: TopoConfig,
    pub ablation: Ablation,
    /// Attribute prompt file; the built-in prompts when absent.
    pub prompts: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learn_rate: 5e-5,
            decay_factor: 0.1,
            milestones: vec![0.5, 0.75],
            epochs: 40,
            batch_size: 4,
            seed: 0,
            max_steps: None,
            patch_size: None,
            classes: None,
            channels: 32,
            downsample: 4,
            model_dim: 64,
            heads: 4,
            text: TextConfig::default(),
            high_pass: HighPassConfig::default(),
            topo: TopoConfig::default(),
            ablation: Ablation::default(),
            prompts: None,
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learn_rate >= 0.0 && self.learn_rate.is_finite()) {
            return Err(Error::Config(format!("learn_rate {} must be finite and >= 0", self.learn_rate)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::Config(format!("decay_factor {} must be positive", self.decay_factor)));
        }
        if self.milestones.iter().any(|&m| !(m > 0.0 && m < 1.0))
            || self.milestones.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!(
                "milestones {:?} must be strictly increasing within (0, 1)",
                self.milestones
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.max_steps == Some(0) {
            return Err(Error::Config("epochs, batch_size and max_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, class_names: Vec<String>) -> ModelConfig {
        ModelConfig {
            class_names,
            channels: self.channels,
            downsample: self.downsample,
            model_dim: self.model_dim,
            heads: self.heads,
            text: self.text,
            high_pass: self.high_pass,
            topo: self.topo,
            ablation: self.ablation.clone(),
        }
    }

    pub fn prompt_set(&self) -> Result<PromptSet> {
        match &self.prompts {
            Some(p) => PromptSet::load(p),
            None => Ok(PromptSet::builtin()),
        }
    }

    /// Steps in `epochs` full passes over `samples` patches.
    pub fn nominal_steps(&self, samples: usize) -> usize {
        self.epochs * samples.div_ceil(self.batch_size)
    }

    /// Optimizer steps actually taken.
    pub fn total_steps(&self, samples: usize) -> usize {
        self.max_steps.unwrap_or_else(|| self.nominal_steps(samples))
    }

    pub fn schedule(&self, samples: usize) -> StepDecay {
        StepDecay::new(
            self.learn_rate,
            self.decay_factor,
            &self.milestones,
            self.nominal_steps(samples) as u64,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f32,
}

impl fmt::Display for LossRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:e}\t{}", self.step, self.lr, self.loss)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: Vec<LossRecord>,
}

impl TrainOutcome {
    /// Loss log, one `step<TAB>lr<TAB>loss` line per step.
    pub fn log_text(&self) -> String {
        self.log.iter().map(|r| format!("{r}\n")).collect()
    }
}

fn check_dataset(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    if let Some(s) = cfg.patch_size {
        if s != data.patch_size() {
            return Err(Error::Config(format!(
                "config patch_size {s} but dataset patches are {}",
                data.patch_size()
            )));
        }
    }
    if let Some(n) = cfg.classes {
        if n != data.num_classes() {
            return Err(Error::Config(format!(
                "config classes {n} but dataset has {}",
                data.num_classes()
            )));
        }
    }
    Ok(())
}

/// Trains a fresh model seeded by `cfg.seed`. `on_step` sees each log record
/// as it is produced.
pub fn train(cfg: &TrainConfig, data: &Dataset, on_step: &mut dyn FnMut(&LossRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(cfg, data)?;
    let model_cfg = cfg.model_config(data.class_names().to_vec());
    model_cfg.check_patch_size(data.patch_size())?;
    let model = Model::<f32>::new(model_cfg, &cfg.prompt_set()?, cfg.seed)?;
    train_model(cfg, model, data, on_step)
}

/// Continues optimizing `model` under `cfg`.
pub fn train_model(
    cfg: &TrainConfig,
    mut model: Model<f32>,
    data: &Dataset,
    on_step: &mut dyn FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    let total = cfg.total_steps(data.len());
    let schedule = cfg.schedule(data.len());
    let mut opt = Adam::new(AdamConfig::default());
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_da7a);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = Vec::with_capacity(total);
    for step in 0..total {
        if cursor >= order.len() {
            order = (0..data.len()).collect();
            order.shuffle(&mut order_rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch = data.batch::<f32>(&order[cursor..end])?;
        cursor = end;
        let (loss, grads) = model
            .loss_and_grads(&batch.images, &batch.masks)
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { step },
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let lr = schedule.lr(step as u64);
        opt.step(model.params_mut(), &grads, lr)?;
        let rec = LossRecord { step, lr, loss };
        on_step(&rec);
        log.push(rec);
    }
    Ok(TrainOutcome { model, log })
}

/// Mean loss over `data` in fixed order, without updating anything.
pub fn dataset_loss(model: &Model<f32>, data: &Dataset, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = data.batch::<f32>(chunk)?;
        total += model.loss(&b.images, &b.masks)? as f64 * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Runs inference over every sample and scores the accumulated confusion matrix.
pub fn evaluate(model: &Model<f32>, data: &Dataset, batch_size: usize) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Dataset("no samples to evaluate".into()));
    }
    let n = model.config().num_classes();
    if n != data.num_classes() {
        return Err(Error::Dataset(format!(
            "checkpoint has {n} classes, dataset has {}",
            data.num_classes()
        )));
    }
    let mut cm = ConfusionMatrix::new(n);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = data.batch::<f32>(chunk)?;
        let pred = predict(&model.predict_probabilities(&b.images)?)?;
        cm.accumulate(pred.labels(), b.labels.labels())?;
    }
    MetricsReport::from_confusion(cm, &model.config().class_names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_protocol() {
        let c = TrainConfig::default();
        assert_eq!(c.learn_rate, 5e-5);
        assert_eq!(c.decay_factor, 0.1);
        assert_eq!(c.epochs, 40);
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.topo.k, 9);
        assert_eq!(c.text.max_tokens, 77);
        assert_eq!(TrainConfig::parse("").unwrap(), c);
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(TrainConfig::parse("milestones = [0.75, 0.5]").is_err());
        assert!(TrainConfig::parse("milestones = [0.5, 1.0]").is_err());
        assert!(TrainConfig::parse("epochs = 0").is_err());
        assert!(TrainConfig::parse("bogus = 1").is_err());
        let c = TrainConfig::parse("learn_rate = 1e-3\n[topo]\nk = 4\n").unwrap();
        assert_eq!(c.topo.k, 4);
        assert_eq!(c.learn_rate, 1e-3);
    }

    #[test]
    fn step_budget() {
        let mut c = TrainConfig::default();
        assert_eq!(c.total_steps(32), 320);
        assert_eq!(c.total_steps(33), 360);
        c.max_steps = Some(200);
        assert_eq!(c.total_steps(32), 200);
        // milestones stay at epochs 20 and 30 of the nominal run
        let s = c.schedule(32);
        assert_eq!(s.boundaries(), &[160, 240]);
        assert_eq!(s.lr(199), 5e-6);
    }

    #[test]
    fn log_line_format() {
        let r = LossRecord {
            step: 3,
            lr: 5e-5,
            loss: 0.25,
        };
        assert_eq!(r.to_string(), "3\t5e-5\t0.25");
    }
}
