use camnet_autodiff::{CosineSchedule, LinearWarmup, NanPolicy};
use camnet_core::graphs::Connectivity;
use camnet_core::scenario::{OBS_STEPS, PRED_STEPS};
use serde::{Deserialize, Serialize};

use crate::ModelError;

/// How a graph block combines its attention output with the projected input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// `elu(gat(x)) + proj(x)`.
    #[default]
    Additive,
    /// `[elu(gat(x)), proj(x)]`, doubling the block width.
    Concat,
    /// `elu(gat(x))`.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BetaSchedule {
    pub start: f64,
    pub end: f64,
    pub warm_epochs: usize,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule { start: 0.0, end: 1.0, warm_epochs: 15 }
    }
}

impl BetaSchedule {
    /// Weight used by the fine-tuning regime on CAM data.
    pub fn cam() -> Self {
        BetaSchedule { end: 0.1, ..Self::default() }
    }

    pub fn value(&self, epoch: usize) -> f64 {
        LinearWarmup { start: self.start, end: self.end, warm_epochs: self.warm_epochs }.value(epoch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_hidden: usize,
    pub d_latent: usize,
    pub heads: usize,
    pub n_blocks_enc: usize,
    pub n_blocks_dec: usize,
    pub n_blocks_prior: usize,
    pub connectivity: Connectivity,
    pub residual: ResidualMode,
    pub beta: BetaSchedule,
    pub t_obs: usize,
    pub t_pred: usize,
    pub sigma_floor: f64,
    pub leaky_slope: f64,
    pub ln_eps: f64,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_hidden: 64,
            d_latent: 16,
            heads: 4,
            n_blocks_enc: 2,
            n_blocks_dec: 2,
            n_blocks_prior: 1,
            connectivity: Connectivity::default(),
            residual: ResidualMode::Additive,
            beta: BetaSchedule::default(),
            t_obs: OBS_STEPS,
            t_pred: PRED_STEPS,
            sigma_floor: 1e-4,
            leaky_slope: 0.2,
            ln_eps: 1e-5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_hidden == 0 || self.d_latent == 0 || self.heads == 0 {
            return bad("d_hidden, d_latent and heads must be positive".into());
        }
        if self.d_hidden % self.heads != 0 {
            return bad(format!("d_hidden {} is not divisible by {} heads", self.d_hidden, self.heads));
        }
        if self.n_blocks_enc == 0 || self.n_blocks_dec == 0 || self.n_blocks_prior == 0 {
            return bad("every network needs at least one block".into());
        }
        if self.t_obs != OBS_STEPS || self.t_pred != PRED_STEPS {
            return bad(format!("scenario windows are {OBS_STEPS}+{PRED_STEPS} steps"));
        }
        if !(self.sigma_floor > 0.0) {
            return bad("sigma_floor must be positive".into());
        }
        if let Connectivity::Distance { threshold_m } = self.connectivity {
            if threshold_m.is_nan() || threshold_m < 0.0 {
                return bad("distance threshold must be non-negative".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Scenarios per tape; micro-batches of one batch run in parallel.
    pub micro_batch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Number of rollouts for validation metrics.
    pub k_eval: usize,
    /// Validate every this many epochs, and always on the first and last.
    pub val_every: usize,
    /// Abort on NaN/inf (`true`) or only log a warning.
    pub abort_on_nan: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 128,
            micro_batch: 16,
            lr_start: 2e-4,
            lr_end: 1e-6,
            weight_decay: 1e-4,
            seed: 0,
            k_eval: 6,
            val_every: 1,
            abort_on_nan: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.micro_batch == 0 || self.val_every == 0 {
            return bad("epochs, batch_size, micro_batch and val_every must be positive".into());
        }
        if self.k_eval == 0 {
            return bad("k_eval must be positive".into());
        }
        if !(self.lr_start > 0.0 && self.lr_end >= 0.0) || self.weight_decay < 0.0 {
            return bad("learning rates must be positive and weight decay non-negative".into());
        }
        if model.beta.warm_epochs > self.epochs {
            return bad(format!("beta warm-up ({}) exceeds epochs ({})", model.beta.warm_epochs, self.epochs));
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule { lr_start: self.lr_start, lr_end: self.lr_end, total_epochs: self.epochs }
    }

    pub fn nan_policy(&self) -> NanPolicy {
        if self.abort_on_nan {
            NanPolicy::Error
        } else {
            NanPolicy::Warn
        }
    }
}

/// Layout of the configuration file accepted by the trainer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.model.validate()?;
        self.train.validate(&self.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn beta_schedule_endpoints() {
        let b = BetaSchedule::default();
        assert_eq!((b.value(0), b.value(15), b.value(40)), (0.0, 1.0, 1.0));
        assert_eq!(BetaSchedule::cam().value(15), 0.1);
    }

    #[test]
    fn lr_endpoints() {
        let s = TrainConfig::default().schedule();
        assert!((s.lr(0) - 2e-4).abs() < 1e-12);
        assert!((s.lr(60) - 1e-6).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ExperimentConfig::default();
        c.model.d_hidden = 30;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.train.epochs = 10;
        assert!(c.validate().is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"modle": {}}"#).is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: ExperimentConfig =
            serde_json::from_str(r#"{"model": {"d_hidden": 32, "connectivity": {"kind": "knn", "k": 2}}}"#).unwrap();
        assert_eq!(c.model.d_hidden, 32);
        assert_eq!(c.model.connectivity, Connectivity::Knn { k: 2 });
        assert_eq!(c.train.batch_size, 128);
    }
}
