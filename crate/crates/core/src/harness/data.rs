//! Seeded training, test and probe sets for every experiment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CitiError, Result};
use crate::numerics::derive_seed;
use crate::tasks::{generate_dataset, mix_datasets, SyntheticExample, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_tool_train: usize,
    /// Pool size per general task available for mixing.
    pub n_general_train: usize,
    /// General tasks replayed alongside tool data.
    pub mix_tasks: Vec<TaskKind>,
    /// Share of general examples in the mixed set.
    pub general_share: f64,
    pub n_test: usize,
    pub n_importance: usize,
    pub n_probe: usize,
    /// Task the control model of the ICC experiment is fine-tuned on.
    pub alt_task: TaskKind,
    pub n_alt_train: usize,
    /// Set by the run-level seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_tool_train: 4000,
            n_general_train: 1000,
            mix_tasks: vec![TaskKind::Arith, TaskKind::Copy, TaskKind::Reverse],
            general_share: 3.0 / 7.0,
            n_test: 200,
            n_importance: 512,
            n_probe: 256,
            alt_task: TaskKind::Reverse,
            n_alt_train: 4000,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_tool_train", self.n_tool_train),
            ("n_general_train", self.n_general_train),
            ("n_test", self.n_test),
            ("n_importance", self.n_importance),
            ("n_probe", self.n_probe),
            ("n_alt_train", self.n_alt_train),
        ] {
            if v == 0 {
                return Err(CitiError::contract(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.general_share) {
            return Err(CitiError::contract(format!(
                "general_share = {} outside [0, 1)",
                self.general_share
            )));
        }
        if self.mix_tasks.contains(&TaskKind::Toolcall) {
            return Err(CitiError::contract("mix_tasks must list general tasks only"));
        }
        if self.general_share > 0.0 && self.mix_tasks.is_empty() {
            return Err(CitiError::contract("general_share > 0 needs at least one mix task"));
        }
        if self.alt_task == TaskKind::Toolcall {
            return Err(CitiError::contract("alt_task must be a general task"));
        }
        Ok(())
    }

    fn seed_for(&self, purpose: &str) -> u64 {
        derive_seed(self.seed, purpose)
    }

    pub fn build(&self) -> Result<Datasets> {
        self.validate()?;
        let tool_train = generate_dataset(TaskKind::Toolcall, self.n_tool_train, self.seed_for("train/tool"))?;
        let mut general_train = BTreeMap::new();
        let mut tests = BTreeMap::new();
        for t in TaskKind::ALL {
            tests.insert(t, generate_dataset(t, self.n_test, self.seed_for(&format!("test/{t}")))?);
            if t != TaskKind::Toolcall {
                general_train.insert(t, generate_dataset(t, self.n_general_train, self.seed_for(&format!("train/{t}")))?);
            }
        }
        let mixed = if self.general_share == 0.0 {
            tool_train.clone()
        } else {
            let mut ratios = BTreeMap::new();
            ratios.insert(TaskKind::Toolcall, 1.0 - self.general_share);
            for t in &self.mix_tasks {
                ratios.insert(*t, self.general_share / self.mix_tasks.len() as f64);
            }
            let total = (self.n_tool_train as f64 / (1.0 - self.general_share)).round() as usize;
            mix_datasets(&tool_train, &general_train, &ratios, total, self.seed_for("mix"))?
        };
        let alt_train = generate_dataset(self.alt_task, self.n_alt_train, self.seed_for("train/alt"))?;
        Ok(Datasets {
            tool_train,
            general_train,
            mixed,
            alt_train,
            tests,
        })
    }
}

pub struct Datasets {
    pub tool_train: Vec<SyntheticExample>,
    pub general_train: BTreeMap<TaskKind, Vec<SyntheticExample>>,
    pub mixed: Vec<SyntheticExample>,
    pub alt_train: Vec<SyntheticExample>,
    /// Held-out sets for every task, including TOOLCALL.
    pub tests: BTreeMap<TaskKind, Vec<SyntheticExample>>,
}

impl Datasets {
    pub fn tool_test(&self) -> &[SyntheticExample] {
        &self.tests[&TaskKind::Toolcall]
    }

    pub fn general_tests(&self) -> BTreeMap<TaskKind, Vec<SyntheticExample>> {
        self.tests
            .iter()
            .filter(|(k, _)| **k != TaskKind::Toolcall)
            .map(|(k, v)| (*k, v.clone()))
            .collect()
    }

    /// Held-out examples of every task, tool first.
    pub fn mixed_test(&self) -> Vec<SyntheticExample> {
        let mut out = self.tool_test().to_vec();
        for (k, v) in &self.tests {
            if *k != TaskKind::Toolcall {
                out.extend(v.iter().cloned());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            n_tool_train: 40,
            n_general_train: 10,
            n_test: 5,
            n_alt_train: 8,
            ..DataConfig::default()
        }
    }

    #[test]
    fn mixed_set_has_requested_shares() {
        let d = small().build().unwrap();
        assert_eq!(d.mixed.len(), 70);
        assert_eq!(d.mixed.iter().filter(|e| e.is_tool).count(), 40);
        for t in [TaskKind::Arith, TaskKind::Copy, TaskKind::Reverse] {
            assert_eq!(d.mixed.iter().filter(|e| e.task == t).count(), 10);
        }
        assert!(d.mixed.iter().all(|e| e.task != TaskKind::Recall));
        assert_eq!(d.tests.len(), 5);
        assert_eq!(d.mixed_test().len(), 25);
    }

    #[test]
    fn builds_are_seeded() {
        let a = small().build().unwrap();
        let b = small().build().unwrap();
        assert_eq!(a.mixed, b.mixed);
        let c = DataConfig { seed: 4, ..small() }.build().unwrap();
        assert_ne!(a.tool_train, c.tool_train);
    }

    #[test]
    fn rejects_bad_fields() {
        let e = DataConfig { general_share: 1.0, ..small() }.validate().unwrap_err();
        assert!(e.to_string().contains("general_share"));
        let e = DataConfig { n_test: 0, ..small() }.validate().unwrap_err();
        assert!(e.to_string().contains("n_test"));
    }
}
