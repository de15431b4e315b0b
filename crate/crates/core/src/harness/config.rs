use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::env::{CollectionWorld, SortingWorld, StackingWorld, World};
use crate::executor::ExecutorConfig;
use crate::flat::FlatConfig;
use crate::gcn::GcnConfig;
use crate::interpreter::InterpreterConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub no_interpreter: bool,
    pub no_localizer: bool,
    pub no_edge_classifier: bool,
    pub no_gcn: bool,
    pub fully_connected_init: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub world: World,
    pub seen_tasks: usize,
    pub unseen_tasks: usize,
    pub demos_per_task: usize,
    /// Demos recorded per unseen task (one conditions the policy, the rest
    /// are scored by the NLL protocol and define the edge ground truth).
    pub unseen_demos: usize,
    /// Collection only: manifest sizes evaluated by the step sweep.
    pub eval_object_counts: Vec<usize>,
    pub interpreter: InterpreterConfig,
    pub gcn: GcnConfig,
    pub executor: ExecutorConfig,
    pub flat: FlatConfig,
    pub train_flat: bool,
    /// Train the executor of the no-graph variant (used by the NLL protocol).
    pub train_no_graph: bool,
    pub ablations: AblationFlags,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Write wall-clock seconds into metrics (breaks byte reproducibility).
    pub record_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment_id: "stacking".into(),
            world: World::Stacking(StackingWorld::new(6)),
            seen_tasks: 400,
            unseen_tasks: 50,
            demos_per_task: 4,
            unseen_demos: 4,
            eval_object_counts: vec![1, 2, 3, 4, 5],
            interpreter: InterpreterConfig::default(),
            gcn: GcnConfig::default(),
            executor: ExecutorConfig::default(),
            flat: FlatConfig::default(),
            train_flat: false,
            train_no_graph: true,
            ablations: AblationFlags::default(),
            seed: 0,
            output_dir: None,
            record_time: false,
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults for a domain name (`stacking`, `sorting`, `collection`).
    pub fn preset(domain: &str) -> Result<Self, HarnessError> {
        let base = Self::default();
        Ok(match domain {
            "stacking" => base,
            "sorting" => Self {
                experiment_id: "sorting".into(),
                world: World::Sorting(SortingWorld::default()),
                seen_tasks: 400,
                demos_per_task: 8,
                ..base
            },
            "collection" => Self {
                experiment_id: "collection".into(),
                world: World::Collection(CollectionWorld::default()),
                seen_tasks: 200,
                train_flat: true,
                ..base
            },
            other => return Err(HarnessError::Config(format!("unknown domain `{other}`"))),
        })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seen_tasks == 0 || self.unseen_tasks == 0 {
            return Err(HarnessError::Config("seen and unseen task counts must be positive".into()));
        }
        if self.demos_per_task == 0 || self.unseen_demos == 0 {
            return Err(HarnessError::Config("demo counts must be positive".into()));
        }
        Ok(())
    }

    /// Reads JSON or TOML (by extension).
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Component seed expanded from the root seed.
    pub fn seed_for(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }
}

/// First eight bytes of `sha256(root || label)`.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_json_and_toml() {
        let c = ExperimentConfig::preset("sorting").unwrap();
        let back: ExperimentConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let t = toml::to_string(&c).unwrap();
        let back: ExperimentConfig = toml::from_str(&t).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let c: ExperimentConfig = toml::from_str("seen_tasks = 7\nseed = 3\n").unwrap();
        assert_eq!(c.seen_tasks, 7);
        assert_eq!(c.demos_per_task, 4);
    }

    #[test]
    fn seeds_differ_by_label() {
        assert_ne!(derive_seed(0, "gcn"), derive_seed(0, "interpreter"));
        assert_eq!(derive_seed(5, "x"), derive_seed(5, "x"));
    }
}
