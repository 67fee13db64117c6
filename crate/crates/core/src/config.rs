//! The single run configuration document and its environment overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{ConditionTag, DatasetConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scene::Scenario;
use crate::trainer::{TrainConfig, TransferPlan};

pub const ENV_PREFIX: &str = "SOMGEN_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub cfg: TrainConfig,
    /// Conditions used for training; empty means every condition.
    pub conditions: Vec<ConditionTag>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            cfg: TrainConfig::default(),
            conditions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferSection {
    pub target: ConditionTag,
    pub k_list: Vec<usize>,
    pub finetune_epochs: usize,
    pub seeds: Vec<u64>,
}

impl Default for TransferSection {
    fn default() -> Self {
        TransferSection {
            target: ConditionTag::new(Scenario::Widelane, 200.0, 28e9),
            k_list: vec![0, 32, 128],
            finetune_epochs: 30,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    /// Test maps rendered as PNG by `eval`.
    pub render_maps: usize,
    /// Timed steps in `report`.
    pub timing_steps: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            render_maps: 4,
            timing_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub transfer: TransferSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::profile(Profile::Desk)
    }
}

impl RunConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Desk => RunConfig {
                seed: 0,
                dataset: DatasetConfig::default(),
                model: ModelConfig::desk(),
                train: TrainSection::default(),
                transfer: TransferSection::default(),
                output: OutputSection::default(),
            }
            .hold_out_target(),
            Profile::Paper => RunConfig {
                seed: 0,
                dataset: DatasetConfig {
                    image_resolution: 64,
                    map_size: 64,
                    ..DatasetConfig::default()
                },
                model: ModelConfig::paper(),
                train: TrainSection {
                    cfg: TrainConfig::paper(),
                    conditions: Vec::new(),
                },
                transfer: TransferSection::default(),
                output: OutputSection::default(),
            }
            .hold_out_target(),
        }
    }

    /// Trains on every dataset condition except the transfer target.
    pub fn hold_out_target(mut self) -> Self {
        self.train.conditions = self
            .dataset
            .conditions
            .iter()
            .copied()
            .filter(|c| *c != self.transfer.target)
            .collect();
        self
    }

    /// Conditions the training split is drawn from.
    pub fn training_conditions(&self) -> Vec<ConditionTag> {
        if self.train.conditions.is_empty() {
            self.dataset.conditions.clone()
        } else {
            self.train.conditions.clone()
        }
    }

    /// One seed for data, initialisation and batching.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self.train.cfg.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.cfg.validate()?;
        if self.dataset.image_resolution != self.model.embed.resolution {
            return Err(Error::Config(format!(
                "dataset images are {} px but the model expects {} px",
                self.dataset.image_resolution, self.model.embed.resolution
            )));
        }
        for c in &self.train.conditions {
            if !self.dataset.conditions.contains(c) {
                return Err(Error::InvalidCondition(format!("training condition {c} is not in the dataset")));
            }
        }
        self.transfer_plan().validate()
    }

    pub fn transfer_plan(&self) -> TransferPlan {
        TransferPlan {
            source: self.training_conditions(),
            target: self.transfer.target,
            k_list: self.transfer.k_list.clone(),
            finetune_epochs: self.transfer.finetune_epochs,
            seeds: self.transfer.seeds.clone(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Applies `SOMGEN_<SECTION>_<KEY>=<json or text>` overrides. Nested keys
    /// are resolved by matching the longest known field name at each level,
    /// so `SOMGEN_TRAIN_BATCH_SIZE` and `SOMGEN_MODEL_EMBED_DIM` both work.
    pub fn apply_env(self, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut doc = serde_json::to_value(&self)?;
        let mut touched = false;
        for (k, v) in vars {
            let Some(rest) = k.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let tokens: Vec<String> = rest.split('_').map(str::to_lowercase).collect();
            let slot = resolve(&mut doc, &tokens).ok_or_else(|| Error::Config(format!("{k} names no configuration field")))?;
            *slot = serde_json::from_str(&v).unwrap_or(Value::String(v));
            touched = true;
        }
        if !touched {
            return Ok(self);
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("environment override: {e}")))
    }
}

fn resolve<'a>(node: &'a mut Value, tokens: &[String]) -> Option<&'a mut Value> {
    if tokens.is_empty() {
        return Some(node);
    }
    let obj = node.as_object_mut()?;
    let hit = (1..=tokens.len()).rev().find(|&n| obj.contains_key(&tokens[..n].join("_")))?;
    resolve(obj.get_mut(&tokens[..hit].join("_"))?, &tokens[hit..])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn profiles_are_consistent_and_roundtrip() {
        for p in [Profile::Desk, Profile::Paper] {
            let c = RunConfig::profile(p);
            c.validate().unwrap();
            assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        }
    }

    #[test]
    fn indivisible_resolution_is_rejected() {
        let mut c = RunConfig::default();
        c.dataset.image_resolution = 60;
        c.model.embed.resolution = 60;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn env_overrides_reach_nested_fields() {
        let c = RunConfig::default()
            .apply_env(env(&[
                ("SOMGEN_TRAIN_BATCH_SIZE", "4"),
                ("SOMGEN_MODEL_EMBED_DIM", "64"),
                ("SOMGEN_DATASET_SNAPSHOTS_PER_CONDITION", "20"),
                ("SOMGEN_TRANSFER_K_LIST", "[0, 8]"),
                ("OTHER_VAR", "x"),
            ]))
            .unwrap();
        assert_eq!(c.train.cfg.batch_size, 4);
        assert_eq!(c.model.embed.dim, 64);
        assert_eq!(c.dataset.snapshots_per_condition, 20);
        assert_eq!(c.transfer.k_list, vec![0, 8]);
        assert!(c.validate().is_err());
        let e = RunConfig::default().apply_env(env(&[("SOMGEN_TRAIN_NOPE", "1")]));
        assert!(matches!(e, Err(Error::Config(_))));
        let e = RunConfig::default().apply_env(env(&[("SOMGEN_TRAIN_LR", "\"fast\"")]));
        assert!(matches!(e, Err(Error::Config(_))));
    }

    #[test]
    fn transfer_plan_excludes_target_from_sources() {
        let plan = RunConfig::default().transfer_plan();
        assert!(!plan.source.contains(&plan.target));
        assert_eq!(plan.source.len(), 3);
        let mut all = RunConfig::default();
        all.train.conditions.clear();
        assert!(matches!(all.validate(), Err(Error::InvalidCondition(_))));
    }
}
