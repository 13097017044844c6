use std::path::{Path, PathBuf};
use std::sync::Arc;

use dialport_core::strategy::{DialogueAgent, EchoAgent, StrategyConfig};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Tester,
    Annotator,
    Admin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub token: String,
    pub user: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub storage: PathBuf,
    pub tokens: Vec<TokenEntry>,
    /// Distinct annotators needed before a conversation counts as annotated.
    #[serde(default = "default_quota")]
    pub annotator_quota: usize,
    /// Personas offered to testers who ask for one.
    #[serde(default)]
    pub personas: Vec<Vec<String>>,
    #[serde(default)]
    pub persona_seed: u64,
}

fn default_quota() -> usize {
    3
}

impl ServiceConfig {
    pub fn new(storage: impl Into<PathBuf>, tokens: Vec<TokenEntry>) -> Self {
        Self {
            storage: storage.into(),
            tokens,
            annotator_quota: default_quota(),
            personas: Vec::new(),
            persona_seed: 0,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.annotator_quota < 2 {
            return Err(ServiceError::Config(
                "annotator_quota must be at least 2".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.tokens {
            if t.token.is_empty() || t.user.is_empty() {
                return Err(ServiceError::Config(
                    "tokens need a non-empty token and user".into(),
                ));
            }
            if !seen.insert(&t.token) {
                return Err(ServiceError::Config(format!(
                    "token for {} is not unique",
                    t.user
                )));
            }
        }
        Ok(())
    }
}

/// One deployable model in the pool manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum PoolBackend {
    /// Deterministic stub for protocol dry runs.
    Echo,
    Strategy(StrategyConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: String,
    #[serde(flatten)]
    pub backend: PoolBackend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub models: Vec<PoolEntry>,
}

impl PoolManifest {
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone)]
pub struct PoolModel {
    pub id: String,
    pub agent: Arc<dyn DialogueAgent>,
}

/// The deployed models, in manifest order.
#[derive(Clone, Default)]
pub struct ModelPool {
    models: Vec<PoolModel>,
}

impl ModelPool {
    pub fn new(models: Vec<PoolModel>) -> Result<Self, ServiceError> {
        let mut seen = std::collections::HashSet::new();
        for m in &models {
            if !seen.insert(m.id.as_str()) {
                return Err(ServiceError::Config(format!(
                    "duplicate model id {:?}",
                    m.id
                )));
            }
        }
        Ok(Self { models })
    }

    /// Loads every checkpoint named in the manifest.
    pub fn from_manifest(manifest: &PoolManifest) -> Result<Self, ServiceError> {
        let models = manifest
            .models
            .iter()
            .map(|e| {
                let agent: Arc<dyn DialogueAgent> =
                    match &e.backend {
                        PoolBackend::Echo => Arc::new(EchoAgent),
                        PoolBackend::Strategy(cfg) => Arc::from(cfg.build().map_err(|err| {
                            ServiceError::Config(format!("model {:?}: {err}", e.id))
                        })?),
                    };
                Ok(PoolModel {
                    id: e.id.clone(),
                    agent,
                })
            })
            .collect::<Result<Vec<_>, ServiceError>>()?;
        Self::new(models)
    }

    pub fn echo(ids: &[&str]) -> Self {
        let models = ids
            .iter()
            .map(|id| PoolModel {
                id: (*id).to_owned(),
                agent: Arc::new(EchoAgent),
            })
            .collect();
        Self::new(models).expect("distinct ids")
    }

    pub fn models(&self) -> &[PoolModel] {
        &self.models
    }

    pub fn get(&self, id: &str) -> Option<&PoolModel> {
        self.models.iter().find(|m| m.id == id)
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}
