//! The full framework (primary, conditional, adaptive refiner) in one
//! parameter store, and its checkpoint format.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{Backbone, BackboneConfig};
use crate::derive_seed;
use crate::diffcore::{DiffError, ParamStore};
use crate::refinement::{AdaptiveRefiner, RefinerInit};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Which sub-model a parameter belongs to, by name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Primary,
    Conditional,
    Refiner,
}

impl Part {
    pub fn name(self) -> &'static str {
        match self {
            Part::Primary => "prim",
            Part::Conditional => "cond",
            Part::Refiner => "refine",
        }
    }

    /// Parameter-name prefix including the separator.
    pub fn prefix(self) -> String {
        format!("{}.", self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub refiner_init: RefinerInit,
    #[serde(default = "default_jitter")]
    pub refiner_jitter: f64,
}

fn default_jitter() -> f64 {
    0.01
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig) -> Self {
        Self {
            backbone,
            refiner_init: RefinerInit::default(),
            refiner_jitter: default_jitter(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Framework {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub primary: Backbone,
    pub conditional: Backbone,
    pub refiner: AdaptiveRefiner,
}

impl Framework {
    /// Each part draws from its own stream derived from `seed`, so the
    /// primary's initialisation does not depend on the other parts.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, DiffError> {
        let mut store = ParamStore::new();
        let rng = |part: Part| ChaCha8Rng::seed_from_u64(derive_seed(seed, part.name()));
        let primary = Backbone::new(
            config.backbone.clone(),
            Part::Primary.name(),
            false,
            &mut store,
            &mut rng(Part::Primary),
        )?;
        let conditional = Backbone::new(
            config.backbone.clone(),
            Part::Conditional.name(),
            true,
            &mut store,
            &mut rng(Part::Conditional),
        )?;
        let refiner = AdaptiveRefiner::new(
            config.backbone.n_classes,
            Part::Refiner.name(),
            config.refiner_init,
            config.refiner_jitter,
            &mut store,
            &mut rng(Part::Refiner),
        )?;
        Ok(Self {
            config,
            store,
            primary,
            conditional,
            refiner,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.store.count_trainable("")
    }

    pub fn count_part(&self, part: Part) -> usize {
        self.store.count_trainable(&part.prefix())
    }

    pub fn hash(&self, part: Part) -> String {
        self.store.hash(&part.prefix())
    }
}

/// Versioned checkpoint: a free-form header plus the framework.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub header: serde_json::Value,
    pub framework: Framework,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: checkpoint format {found} is not supported (expected {CHECKPOINT_VERSION})")]
    Version { path: String, found: u32 },
    #[error("{path}: {source}")]
    Params {
        path: String,
        #[source]
        source: DiffError,
    },
}

pub fn save_checkpoint(path: &Path, header: serde_json::Value, framework: &Framework) -> Result<(), CheckpointError> {
    let p = path.display().to_string();
    let ckpt = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        header,
        framework: framework.clone(),
    };
    let text = serde_json::to_string(&ckpt).map_err(|e| CheckpointError::Json { path: p.clone(), source: e })?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CheckpointError::Io { path: p.clone(), source: e })?;
    }
    std::fs::write(path, text).map_err(|e| CheckpointError::Io { path: p, source: e })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| CheckpointError::Io { path: p.clone(), source: e })?;
    let version: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Json { path: p.clone(), source: e })?;
    let found = version.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { path: p, found });
    }
    let mut ckpt: Checkpoint =
        serde_json::from_value(version).map_err(|e| CheckpointError::Json { path: p.clone(), source: e })?;
    ckpt.framework
        .store
        .reindex()
        .map_err(|e| CheckpointError::Params { path: p, source: e })?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(attention: bool) -> ModelConfig {
        ModelConfig::new(BackboneConfig {
            hidden_dim: 16,
            encoding_dim: 16,
            embed_dim: 8,
            attention,
            ..BackboneConfig::new(12, 6)
        })
    }

    #[test]
    fn framework_is_about_twice_the_backbone() {
        for attention in [true, false] {
            let f = Framework::new(config(attention), 0).unwrap();
            let ratio = f.count_parameters() as f64 / f.count_part(Part::Primary) as f64;
            assert!((1.8..=2.6).contains(&ratio), "{ratio}");
        }
    }

    #[test]
    fn parts_initialise_independently() {
        let a = Framework::new(config(true), 5).unwrap();
        let mut other = config(true);
        other.refiner_init = RefinerInit::CopyPrimary;
        let b = Framework::new(other, 5).unwrap();
        assert_eq!(a.hash(Part::Primary), b.hash(Part::Primary));
        assert_eq!(a.hash(Part::Conditional), b.hash(Part::Conditional));
        assert_ne!(a.hash(Part::Refiner), b.hash(Part::Refiner));
        assert_ne!(a.hash(Part::Primary), Framework::new(config(true), 6).unwrap().hash(Part::Primary));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt").join("phase1.ckpt");
        let f = Framework::new(config(true), 1).unwrap();
        save_checkpoint(&path, serde_json::json!({"seed": 1}), &f).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.framework, f);
        assert_eq!(back.framework.store.find("prim.enc.w"), f.store.find("prim.enc.w"));
        let text = std::fs::read_to_string(&path).unwrap().replacen("\"format_version\":1", "\"format_version\":9", 1);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Version { found: 9, .. })));
    }
}
