//! HTTP service for blind live-chat collection, three-criterion ratings and
//! agreement reports.

mod api;
pub mod config;
pub mod protocol;
pub mod reports;
pub mod store;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

pub use api::router;
pub use config::{
    ModelPool, PoolBackend, PoolEntry, PoolManifest, PoolModel, Role, ServiceConfig, TokenEntry,
};
pub use store::{
    Conversation, EndReason, Event, RatingRecord, Scores, SessionStatus, Store, TurnRecord,
};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("service configuration: {0}")]
    Config(String),
    #[error("storage: {0}")]
    Storage(String),
}

type Shared<T> = Arc<tokio::sync::Mutex<T>>;

/// Shared service state: the model pool, the conversations and their store.
pub struct AppState {
    config: ServiceConfig,
    pool: ModelPool,
    store: Store,
    conversations: RwLock<HashMap<String, Shared<Conversation>>>,
    /// Sessions created per model, for least-served balancing.
    served: Mutex<HashMap<String, usize>>,
    /// Mutations hold this shared; reports hold it exclusively to read a
    /// consistent snapshot.
    gate: tokio::sync::RwLock<()>,
    rng: Mutex<StdRng>,
}

impl AppState {
    /// Opens (or creates) the store and replays every stored conversation.
    pub fn open(config: ServiceConfig, pool: ModelPool) -> Result<Arc<Self>, ServiceError> {
        config.validate()?;
        if pool.is_empty() {
            return Err(ServiceError::Config("the model pool is empty".into()));
        }
        let store = Store::open(&config.storage)?;
        let recovery = store.recover()?;
        let mut served: HashMap<String, usize> =
            pool.models().iter().map(|m| (m.id.clone(), 0)).collect();
        let mut conversations = HashMap::new();
        for c in recovery.conversations {
            match served.get_mut(&c.model_id) {
                Some(n) => *n += 1,
                None => log::warn!(
                    "conversation {} belongs to model {:?}, which is not deployed",
                    c.id,
                    c.model_id
                ),
            }
            conversations.insert(c.id.clone(), Arc::new(tokio::sync::Mutex::new(c)));
        }
        let rng = StdRng::seed_from_u64(config.persona_seed);
        Ok(Arc::new(Self {
            config,
            pool,
            store,
            conversations: RwLock::new(conversations),
            served: Mutex::new(served),
            gate: tokio::sync::RwLock::new(()),
            rng: Mutex::new(rng),
        }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn pool(&self) -> &ModelPool {
        &self.pool
    }

    fn principal(&self, token: &str) -> Option<&TokenEntry> {
        self.config.tokens.iter().find(|t| t.token == token)
    }

    /// Least-served model first; ties go to manifest order.
    fn pick_model(&self) -> String {
        let mut served = self.served.lock().expect("served lock");
        let id = self
            .pool
            .models()
            .iter()
            .min_by_key(|m| served.get(&m.id).copied().unwrap_or(0))
            .map(|m| m.id.clone())
            .expect("pool is not empty");
        *served.entry(id.clone()).or_default() += 1;
        id
    }

    fn unpick_model(&self, id: &str) {
        if let Some(n) = self.served.lock().expect("served lock").get_mut(id) {
            *n = n.saturating_sub(1);
        }
    }

    fn random_persona(&self) -> Option<Vec<String>> {
        let personas = &self.config.personas;
        if personas.is_empty() {
            return None;
        }
        let i = self
            .rng
            .lock()
            .expect("rng lock")
            .gen_range(0..personas.len());
        Some(personas[i].clone())
    }

    fn conversation(&self, id: &str) -> Option<Shared<Conversation>> {
        self.conversations
            .read()
            .expect("map lock")
            .get(id)
            .cloned()
    }

    fn insert(&self, c: Conversation) {
        self.conversations
            .write()
            .expect("map lock")
            .insert(c.id.clone(), Arc::new(tokio::sync::Mutex::new(c)));
    }

    /// Copies every conversation while no mutation is in flight.
    pub async fn snapshot(&self) -> Vec<Conversation> {
        let _guard = self.gate.write().await;
        let handles: Vec<Shared<Conversation>> = self
            .conversations
            .read()
            .expect("map lock")
            .values()
            .cloned()
            .collect();
        let mut out = Vec::with_capacity(handles.len());
        for h in handles {
            out.push(h.lock().await.clone());
        }
        out.sort_by(|a, b| a.started_at.cmp(&b.started_at).then(a.id.cmp(&b.id)));
        out
    }

    fn model_ids(&self) -> Vec<String> {
        self.pool.models().iter().map(|m| m.id.clone()).collect()
    }
}
