//! Run configuration files (TOML) for the command-line pipeline.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::checkpoint::RouterKind;
use crate::error::{Error, Result};
use crate::expert_init::ExpertInitConfig;
use crate::router_init::RouterInitConfig;
use crate::train::{AugmentConfig, OptimConfig, Schedule, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeConfig {
    pub reduction_factor: usize,
    pub expert_hidden: Option<usize>,
    pub gamma: f64,
    pub router: RouterKind,
}

impl Default for MoeConfig {
    fn default() -> Self {
        let e = ExpertInitConfig::default();
        Self {
            reduction_factor: e.reduction_factor,
            expert_hidden: e.expert_hidden,
            gamma: e.gamma,
            router: RouterKind::Cluster,
        }
    }
}

impl MoeConfig {
    pub fn expert_init(&self) -> ExpertInitConfig {
        ExpertInitConfig {
            reduction_factor: self.reduction_factor,
            expert_hidden: self.expert_hidden,
            gamma: self.gamma,
        }
    }
}

/// Dense training before conversion: one learning rate, no mixup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub hflip_p: f64,
    pub mixup_alpha: f64,
    pub classifier_dropout: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            epochs: 30,
            batch_size: 16,
            schedule: Schedule::Cosine,
            hflip_p: 0.5,
            mixup_alpha: 0.0,
            classifier_dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub eval_batch_size: usize,
    /// Validation batches sampled for post-finetune affinity.
    pub affinity_batches: usize,
    pub affinity_batch_size: usize,
    /// Cap on optimizer steps for finetuning.
    pub max_steps: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            eval_batch_size: 64,
            affinity_batches: 4,
            affinity_batch_size: 32,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub moe: MoeConfig,
    pub router_init: RouterInitConfig,
    pub pretrain: PretrainConfig,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Layers `base` (or the defaults), the file at `path` and `key=value`
    /// overrides, later layers winning. Keys are dotted paths such as
    /// `model.experts`; values use TOML syntax and fall back to a string.
    pub fn resolve(base: Option<&RunConfig>, path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut table = match base {
            Some(b) => toml::Table::try_from(b).map_err(|e| Error::Config(e.to_string()))?,
            None => toml::Table::new(),
        };
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let file: toml::Table =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut table, file);
        }
        for set in sets {
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {set:?} is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut parts: Vec<&str> = key.trim().split('.').collect();
            let leaf = parts.pop().unwrap_or_default();
            let mut nested = toml::Table::new();
            nested.insert(leaf.to_string(), value);
            for p in parts.into_iter().rev() {
                let mut outer = toml::Table::new();
                outer.insert(p.to_string(), toml::Value::Table(nested));
                nested = outer;
            }
            merge(&mut table, nested);
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.augment.validate()?;
        self.moe.expert_init().expert_hidden(self.model.ffn_dim)?;
        if !(0.0..=1.0).contains(&self.moe.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.moe.gamma)));
        }
        if self.pretrain.batch_size == 0 || self.data.eval_batch_size == 0 || self.data.affinity_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        let p = &self.pretrain;
        TrainConfig {
            optim: OptimConfig::uniform(p.lr, p.batch_size, p.epochs),
            augment: AugmentConfig {
                hflip_p: p.hflip_p,
                mixup_alpha: p.mixup_alpha,
                classifier_dropout: p.classifier_dropout,
            },
            schedule: p.schedule,
            seed: self.seed,
            max_steps: None,
            eval_batch_size: self.data.eval_batch_size,
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            optim: self.optim.clone(),
            augment: self.augment.clone(),
            schedule: Schedule::Constant,
            seed: self.seed,
            max_steps: self.data.max_steps,
            eval_batch_size: self.data.eval_batch_size,
        }
    }
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}
