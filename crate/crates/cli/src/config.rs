//! Experiment configuration: one JSON file describing data, model, stream,
//! strategies and evaluation. Unknown keys are rejected everywhere.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cil_core::derive_seed;
use cil_core::error::{Error, Result};
use cil_core::eval::RetrievalSplit;
use cil_core::model::NetConfig;
use cil_core::strategies::StrategyConfig;
use cil_core::stream::{InstanceDataset, StreamRegime};
use cil_core::synth::{generate, load_dataset, make_retrieval_split, GenConfig, SynthDataset};

const TAG_EVAL_CARVE: u64 = 0x6576;

/// Where the instance data comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum DataSource {
    /// Generate synthetically from a config.
    Generate(GenConfig),
    /// Load a dataset saved by `generate-data` (base path without extension).
    Path(PathBuf),
}

impl DataSource {
    pub fn resolve(&self, config_dir: &Path) -> Result<SynthDataset> {
        match self {
            DataSource::Generate(cfg) => generate(cfg),
            DataSource::Path(p) => {
                let base = if p.is_absolute() { p.clone() } else { config_dir.join(p) };
                load_dataset(&base)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DataSource::Generate(cfg) => cfg.validate(),
            DataSource::Path(_) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub regime: StreamRegime,
    pub num_batches: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Instances held out of the training stream for the Full Test Set.
    pub holdout_instances: usize,
    pub queries_per_instance: usize,
}

/// Synthetic-transfer inputs for the `transfer` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSpec {
    pub pretrain: DataSource,
    #[serde(default = "default_frozen_layers")]
    pub frozen_layers: Vec<String>,
    #[serde(default = "default_transfer_lr")]
    pub transfer_lr: f64,
}

fn default_frozen_layers() -> Vec<String> {
    vec!["conv".to_string()]
}

fn default_transfer_lr() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub model: NetConfig,
    pub stream: StreamSpec,
    pub strategies: Vec<StrategyConfig>,
    pub eval: EvalSpec,
    #[serde(default)]
    pub transfer: Option<TransferSpec>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Validate every nested config before any work happens.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        if self.stream.num_batches == 0 {
            return Err(Error::Config("stream.num_batches must be >= 1".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("strategies must not be empty".into()));
        }
        for s in &self.strategies {
            s.validate()?;
        }
        if self.eval.holdout_instances == 0 || self.eval.queries_per_instance == 0 {
            return Err(Error::Config(
                "eval.holdout_instances and eval.queries_per_instance must be >= 1".into(),
            ));
        }
        if let Some(t) = &self.transfer {
            t.pretrain.validate()?;
            if t.frozen_layers.is_empty() {
                return Err(Error::Config("transfer.frozen_layers must not be empty".into()));
            }
            if !(t.transfer_lr.is_finite() && t.transfer_lr > 0.0) {
                return Err(Error::Config("transfer.transfer_lr must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Default toy experiment: incremental stream of 20 training instances.
    pub fn toy_default() -> Self {
        ExperimentConfig {
            data: DataSource::Generate(GenConfig::toy_default(7)),
            model: NetConfig::default(),
            stream: StreamSpec { regime: StreamRegime::Incremental, num_batches: 5, seed: 7 },
            strategies: vec![StrategyConfig::new(
                cil_core::strategies::StrategyKind::Naive,
                cil_core::strategies::LossFamily::Triplet,
            )],
            eval: EvalSpec { holdout_instances: 8, queries_per_instance: 2 },
            transfer: None,
            output_dir: default_output_dir(),
        }
    }
}

/// Training stream and fixed eval split carved from one dataset.
pub struct CarvedData {
    pub train: InstanceDataset,
    pub eval_split: RetrievalSplit,
    pub eval_instances: Vec<u32>,
}

/// Hold out `eval.holdout_instances` instances for the Full Test Set.
///
/// The carve is keyed on the dataset's own generation seed, so a given
/// dataset always splits identically regardless of run-seed overrides.
pub fn carve_eval(sd: &SynthDataset, eval: &EvalSpec) -> Result<CarvedData> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let ds = sd.dataset()?;
    let mut ids = ds.instance_ids().to_vec();
    if eval.holdout_instances >= ids.len() {
        return Err(Error::Config(format!(
            "holdout_instances = {} but the dataset has only {} instances",
            eval.holdout_instances,
            ids.len()
        )));
    }
    let mut rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(sd.config.seed, &[TAG_EVAL_CARVE]));
    ids.shuffle(&mut rng);
    let eval_ids: BTreeSet<u32> = ids[..eval.holdout_instances].iter().copied().collect();
    let train_ids: BTreeSet<u32> = ids[eval.holdout_instances..].iter().copied().collect();
    let train = ds.subset_by_instances(&train_ids)?;
    let eval_ds = ds.subset_by_instances(&eval_ids)?;
    let eval_split = make_retrieval_split(&eval_ds, eval.queries_per_instance)?;
    Ok(CarvedData { train, eval_split, eval_instances: eval_ids.into_iter().collect() })
}
