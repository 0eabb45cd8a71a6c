//! The JSON pipeline config shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use phrasesim::training::TrainConfig;
use phrasesim::EncoderConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FoldScope {
    /// Fold only the training partition of the holdout split.
    #[default]
    Train,
    /// Fold every record.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: [0.75, 0.05, 0.2],
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldConfig {
    pub k: usize,
    pub seed: u64,
    pub scope: FoldScope,
}

impl Default for FoldConfig {
    fn default() -> Self {
        FoldConfig {
            k: 4,
            seed: 42,
            scope: FoldScope::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    #[serde(default)]
    pub contexts: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub folds: FoldConfig,
    #[serde(default = "default_vocab_cap")]
    pub vocab_cap: usize,
    /// `vocab_size` is ignored; it comes from the vocabulary built at train time.
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub training: TrainConfig,
}

fn default_vocab_cap() -> usize {
    30_000
}

impl PipelineConfig {
    /// Reads a config file. Relative paths inside it are taken relative to
    /// the directory holding the file.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset = base.join(&cfg.dataset);
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.contexts = cfg.contexts.map(|c| base.join(c));
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), Failure> {
        if !self.dataset.is_file() {
            return Err(Failure::Config(format!(
                "dataset {} does not exist",
                self.dataset.display()
            )));
        }
        if let Some(c) = &self.contexts {
            if !c.is_file() {
                return Err(Failure::Config(format!(
                    "context table {} does not exist",
                    c.display()
                )));
            }
        }
        if self.encoder.max_len < self.training.max_len {
            return Err(Failure::Config(format!(
                "encoder.max_len {} is shorter than training.max_len {}",
                self.encoder.max_len, self.training.max_len
            )));
        }
        if self.training.batch_size == 0 {
            return Err(Failure::Config(
                "training.batch_size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn splits_dir(&self) -> PathBuf {
        self.output_dir.join("splits")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }

    pub fn preds_dir(&self) -> PathBuf {
        self.output_dir.join("preds")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.output_dir.join("reports")
    }

    pub fn split_file(&self) -> PathBuf {
        self.splits_dir().join("split.csv")
    }

    pub fn fold_file(&self) -> PathBuf {
        self.splits_dir().join("folds.csv")
    }
}
