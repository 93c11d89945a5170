//! Training and evaluation harness: configuration, the warmup learning-rate
//! schedule, staged training, checkpoint averaging, evaluation and the
//! coefficient-distribution report.

pub mod eval;
pub mod gradsuite;
pub mod train;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::accents::ReferenceMode;
use crate::adapters::AdapterSpec;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::ModelConfig;

pub use eval::{evaluate, export_coefficients, CoefficientSummary, EvalReport};
pub use train::train_stage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Adapter-free model on the joint CTC-attention loss.
    Baseline,
    /// Zero-init adapters inside the frozen baseline; trains adapters only.
    InjectFrozen,
    /// Everything unfrozen, continuing from the injected checkpoint.
    FinetuneAll,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MtlMode {
    None,
    Hard,
    Uniform,
    Soft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub data_dir: String,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    /// Reference scale uses 25000; toy default 200.
    #[serde(default = "default_warmup_steps")]
    pub warmup_steps: usize,
    #[serde(default = "default_lambda_ctc")]
    pub lambda_ctc: f64,
    #[serde(default = "default_gamma_mtl")]
    pub gamma_mtl: f64,
    #[serde(default = "default_mtl_mode")]
    pub mtl_mode: MtlMode,
    #[serde(default = "default_soft_tau")]
    pub soft_tau: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_avg_last")]
    pub avg_last: usize,
    pub model: ModelConfig,
    #[serde(default = "default_adapter")]
    pub adapter: AdapterSpec,
}

fn default_batch_size() -> usize {
    8
}
fn default_base_lr() -> f64 {
    1.0
}
fn default_warmup_steps() -> usize {
    200
}
fn default_lambda_ctc() -> f64 {
    0.3
}
fn default_gamma_mtl() -> f64 {
    0.01
}
fn default_mtl_mode() -> MtlMode {
    MtlMode::None
}
fn default_soft_tau() -> f64 {
    1.0
}
fn default_avg_last() -> usize {
    5
}
fn default_adapter() -> AdapterSpec {
    AdapterSpec::disabled()
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 || self.warmup_steps < 1 || self.avg_last < 1 {
            return Err(Error::Config(
                "epochs, batch_size, warmup_steps and avg_last must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda_ctc) {
            return Err(Error::Config(format!(
                "lambda_ctc must be in [0, 1], got {}",
                self.lambda_ctc
            )));
        }
        if self.gamma_mtl < 0.0 {
            return Err(Error::Config("gamma_mtl must be >= 0".into()));
        }
        if self.mtl_mode == MtlMode::Soft && !(self.soft_tau > 0.0) {
            return Err(Error::Config("soft_tau must be > 0".into()));
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn reference_mode(&self) -> Option<ReferenceMode> {
        match self.mtl_mode {
            MtlMode::None => None,
            MtlMode::Hard => Some(ReferenceMode::Hard),
            MtlMode::Uniform => Some(ReferenceMode::Uniform),
            MtlMode::Soft => Some(ReferenceMode::Soft { tau: self.soft_tau }),
        }
    }
}

/// base_lr · d_model^(−1/2) · min(step^(−1/2), step · warmup^(−3/2)).
pub fn noam_lr(step: usize, base_lr: f64, d_model: usize, warmup: usize) -> f64 {
    let step = step as f64;
    let warmup = warmup as f64;
    base_lr * (d_model as f64).powf(-0.5) * f64::min(step.powf(-0.5), step * warmup.powf(-1.5))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub l_ctc: f64,
    pub l_s2s: f64,
    pub l_jca: f64,
    pub l_mse: f64,
    pub l_mtl: f64,
    pub ter: f64,
}

impl MetricsRow {
    pub fn from_breakdown(epoch: usize, split: &str, b: &LossBreakdown, ter: f64) -> Self {
        MetricsRow {
            epoch,
            split: split.to_string(),
            l_ctc: b.l_ctc,
            l_s2s: b.l_s2s,
            l_jca: b.l_jca,
            l_mse: b.l_mse,
            l_mtl: b.l_mtl,
            ter,
        }
    }
}

pub const METRICS_HEADER: &str = "epoch,split,l_ctc,l_s2s,l_jca,l_mse,l_mtl,ter";

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.epoch, r.split, r.l_ctc, r.l_s2s, r.l_jca, r.l_mse, r.l_mtl, r.ter
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noam_crossover_at_warmup() {
        let lr = noam_lr(4, 1.0, 1, 4);
        assert!((lr - 0.5) < 1e-12); // 4^-0.5 = 0.5 at the crossover
        assert!((noam_lr(1, 1.0, 1, 4) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn noam_monotone_around_warmup() {
        let warmup = 50;
        for step in 1..warmup {
            assert!(noam_lr(step + 1, 2.0, 16, warmup) > noam_lr(step, 2.0, 16, warmup));
        }
        for step in warmup..2 * warmup {
            assert!(noam_lr(step + 1, 2.0, 16, warmup) < noam_lr(step, 2.0, 16, warmup));
        }
    }

    #[test]
    fn config_parses_with_defaults() {
        let text = r#"
stage = "baseline"
data_dir = "corpus"
epochs = 3

[model]
feat_dim = 8
d_model = 16
n_heads = 2
enc_layers = 4
dec_layers = 2
ffn_dim = 32
vocab_size = 7
max_len = 12
"#;
        let config = TrainConfig::from_toml(text).unwrap();
        assert_eq!(config.batch_size, 8);
        assert_eq!(config.warmup_steps, 200);
        assert_eq!(config.lambda_ctc, 0.3);
        assert_eq!(config.gamma_mtl, 0.01);
        assert_eq!(config.mtl_mode, MtlMode::None);
        assert_eq!(config.avg_last, 5);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"
stage = "baseline"
data_dir = "corpus"
epochs = 3
no_such_key = 1

[model]
feat_dim = 8
d_model = 16
n_heads = 2
enc_layers = 4
dec_layers = 2
ffn_dim = 32
vocab_size = 7
max_len = 12
"#;
        assert!(TrainConfig::from_toml(text).is_err());
    }
}
