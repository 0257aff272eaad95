//! TOML config files for the architecture and the training run, plus the
//! flag overrides layered on top. Keys are documented in the repository
//! README; unknown keys are rejected.

use std::path::Path;

use serde::Deserialize;

use forgenet_core::error::{Error, Result};
use forgenet_core::model::ArchConfig;
use forgenet_core::objective::LossWeights;
use forgenet_core::trainer::TrainConfig;

pub fn load_arch_config(path: Option<&Path>) -> Result<ArchConfig> {
    match path {
        None => Ok(ArchConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text)
                .map_err(|e| Error::config(format!("arch config {}: {e}", p.display())))
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    adam_epsilon: f64,
    /// Defaults to 1 − Σ lambda_seg.
    lambda_cls: Option<f64>,
    lambda_seg: Vec<f64>,
    seed: u64,
    checkpoint_every: usize,
    early_stop_patience: usize,
}

impl Default for TrainFile {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainFile {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            beta1: d.beta1,
            beta2: d.beta2,
            adam_epsilon: d.adam_epsilon,
            lambda_cls: None,
            lambda_seg: d.weights.lambda_seg,
            seed: d.seed,
            checkpoint_every: d.checkpoint_every,
            early_stop_patience: d.early_stop_patience,
        }
    }
}

pub fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    let file: TrainFile = match path {
        None => TrainFile::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text)
                .map_err(|e| Error::config(format!("train config {}: {e}", p.display())))?
        }
    };
    let seg_sum: f64 = file.lambda_seg.iter().sum();
    let weights = LossWeights {
        lambda_cls: file.lambda_cls.unwrap_or(1.0 - seg_sum),
        lambda_seg: file.lambda_seg,
    };
    Ok(TrainConfig {
        epochs: file.epochs,
        batch_size: file.batch_size,
        learning_rate: file.learning_rate,
        beta1: file.beta1,
        beta2: file.beta2,
        adam_epsilon: file.adam_epsilon,
        weights,
        seed: file.seed,
        checkpoint_every: file.checkpoint_every,
        early_stop_patience: file.early_stop_patience,
    })
}

/// Flag overrides shared by `train` and `ablate`.
#[derive(Debug, Clone, clap::Args)]
pub struct TrainOverrides {
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Comma-separated per-head segmentation weights; lambda_cls becomes
    /// 1 − their sum.
    #[arg(long)]
    pub lambda_seg: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Early-stop patience in epochs (0 disables).
    #[arg(long)]
    pub patience: Option<usize>,
    /// Checkpoint cadence in epochs (0 disables periodic checkpoints).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

impl TrainOverrides {
    pub fn apply(&self, mut cfg: TrainConfig) -> Result<TrainConfig> {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(s) = &self.lambda_seg {
            let lambda_seg = parse_f64_list(s)?;
            cfg.weights = LossWeights {
                lambda_cls: 1.0 - lambda_seg.iter().sum::<f64>(),
                lambda_seg,
            };
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.patience {
            cfg.early_stop_patience = v;
        }
        if let Some(v) = self.checkpoint_every {
            cfg.checkpoint_every = v;
        }
        Ok(cfg)
    }
}

pub fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::config(format!("bad number `{t}`: {e}")))
        })
        .collect()
}
