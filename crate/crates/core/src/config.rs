//! Structured text configuration for the CLI: every default is overridable
//! from a TOML file, and the global `--seed` flag overrides the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{BenchOptions, Method};
use crate::losses::LossWeights;
use crate::numerics::AdamParams;
use crate::synth::MixtureConfig;
use crate::training::{NegativeMining, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub synthetic: MixtureConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub loss: LossWeights,
    pub bench: BenchSection,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            seed: 42,
            output_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            synthetic: MixtureConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            loss: LossWeights::default(),
            bench: BenchSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// "synthetic", "fvecs" or "bvecs"
    pub source: String,
    /// base/database file when the source is a corpus file
    pub path: PathBuf,
    /// optional separate learn-set file (same format as `path`)
    pub learn_path: PathBuf,
    /// which file the training points are drawn from: "learn" or "base"
    pub train_source: String,
    pub train: usize,
    pub query: usize,
    pub database: usize,
    /// k of both the retrieval ground truth and the triplet supervision
    pub neighbour_k: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: "synthetic".into(),
            path: PathBuf::new(),
            learn_path: PathBuf::new(),
            train_source: "learn".into(),
            train: 5000,
            query: 1000,
            database: 10_000,
            neighbour_k: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: 256, hidden_layers: 2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// "uniform" or "semi-hard"
    pub mining: String,
    pub mining_candidates: usize,
    pub val_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 15,
            batch_size: 128,
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            mining: "semi-hard".into(),
            mining_candidates: 8,
            val_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSection {
    pub methods: Vec<String>,
    pub bits: Vec<usize>,
    /// rows of (bits, m, k) for the proposed method
    pub grid: Vec<GridEntry>,
    pub itq_iters: usize,
    pub kmeans_iters: usize,
    pub recall_ns: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridEntry {
    pub bits: usize,
    pub m: usize,
    pub k: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            methods: vec!["proposed".into(), "lsh".into(), "itq".into(), "pq".into()],
            bits: vec![16, 32, 64, 128],
            grid: vec![
                GridEntry { bits: 16, m: 4, k: 16 },
                GridEntry { bits: 32, m: 8, k: 16 },
                GridEntry { bits: 64, m: 8, k: 256 },
                GridEntry { bits: 128, m: 16, k: 256 },
            ],
            itq_iters: 50,
            kmeans_iters: 25,
            recall_ns: vec![1, 10, 100],
        }
    }
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<AppConfig> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn mining(&self) -> Result<NegativeMining> {
        match self.train.mining.as_str() {
            "uniform" => Ok(NegativeMining::Uniform),
            "semi-hard" => Ok(NegativeMining::SemiHard {
                candidates: self.train.mining_candidates.max(1),
            }),
            other => Err(Error::Config(format!("unknown mining mode `{other}`"))),
        }
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            alpha: self.train.alpha,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.adam_eps,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        self.loss.validate()?;
        Ok(TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            weights: self.loss,
            mining: self.mining()?,
            val_fraction: self.train.val_fraction,
            seed: self.seed,
        })
    }

    pub fn bench_options(&self) -> Result<BenchOptions> {
        let methods = self
            .bench
            .methods
            .iter()
            .map(|m| Method::parse(m))
            .collect::<Result<Vec<_>>>()?;
        Ok(BenchOptions {
            methods,
            bits: self.bench.bits.clone(),
            grid: self.bench.grid.iter().map(|g| (g.bits, g.m, g.k)).collect(),
            hidden: self.model.hidden,
            hidden_layers: self.model.hidden_layers,
            train: self.train_config()?,
            adam: self.adam(),
            itq_iters: self.bench.itq_iters,
            kmeans_iters: self.bench.kmeans_iters,
            recall_ns: self.bench.recall_ns.clone(),
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let config = AppConfig::default();
        let text = toml::to_string(&config).unwrap();
        let back: AppConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.data.train, 5000);
        assert_eq!(back.bench.grid.len(), 4);
        assert!(back.bench_options().is_ok());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let parsed: AppConfig = toml::from_str(
            r#"
            seed = 7
            [train]
            epochs = 3
            mining = "uniform"
            "#,
        )
        .unwrap();
        assert_eq!(parsed.seed, 7);
        assert_eq!(parsed.train.epochs, 3);
        assert_eq!(parsed.train.batch_size, 128);
        assert!(matches!(parsed.mining().unwrap(), NegativeMining::Uniform));
    }

    #[test]
    fn bad_mining_mode_is_rejected() {
        let mut config = AppConfig::default();
        config.train.mining = "hardest".into();
        assert!(config.mining().is_err());
    }
}
