//! Bottleneck adapters stacked after every transformer block: the active
//! language adapter first, then the language-agnostic task adapter.
//!
//! Each adapter computes `x + up(gelu(down(layer_norm(x))))`. The
//! up-projection starts at zero, so attaching adapters leaves the model's
//! outputs unchanged until they are trained.
//!
//! Parameter naming:
//!
//! ```text
//! adapters.lang.<lang>.blocks.<i>.{ln.weight, ln.bias, down.weight, down.bias, up.weight, up.bias}
//! adapters.task.blocks.<i>.{...}
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::model::ops::{self, LnCache};
use crate::model::{Grads, ParamId, ParamStore, TransformerModel};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("invalid adapter config: {0}")]
    Config(String),
    #[error("adapter {0} is already attached")]
    Duplicate(AdapterKey),
    #[error("no language adapter registered for {0:?}")]
    UnknownLanguage(String),
    #[error("selector {0:?} matches no parameter")]
    UnmatchedSelector(String),
    #[error("parameter {0} is not covered by the freeze plan")]
    Unclassified(String),
    #[error("adapter archive: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterRole {
    Language,
    Task,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// After the block's feed-forward residual.
    #[default]
    AfterFeedForward,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub role: AdapterRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lang: Option<String>,
    pub bottleneck: usize,
    #[serde(default)]
    pub placement: Placement,
}

impl AdapterSpec {
    pub fn language(lang: impl Into<String>, bottleneck: usize) -> Self {
        Self {
            role: AdapterRole::Language,
            lang: Some(lang.into()),
            bottleneck,
            placement: Placement::AfterFeedForward,
        }
    }

    pub fn task(bottleneck: usize) -> Self {
        Self {
            role: AdapterRole::Task,
            lang: None,
            bottleneck,
            placement: Placement::AfterFeedForward,
        }
    }

    /// Reduction factor 2 for language adapters.
    pub fn language_default(lang: impl Into<String>, d_model: usize) -> Self {
        Self::language(lang, (d_model / 2).max(1))
    }

    /// Reduction factor 16 for task adapters.
    pub fn task_default(d_model: usize) -> Self {
        Self::task((d_model / 16).max(1))
    }

    pub fn key(&self) -> AdapterKey {
        AdapterKey {
            role: self.role,
            lang: self.lang.clone(),
        }
    }

    pub fn validate(&self, d_model: usize) -> Result<(), AdapterError> {
        if self.bottleneck == 0 || self.bottleneck >= d_model {
            return Err(AdapterError::Config(format!(
                "bottleneck {} must lie in 1..{d_model}",
                self.bottleneck
            )));
        }
        match (self.role, &self.lang) {
            (AdapterRole::Language, None) => Err(AdapterError::Config(
                "language adapters need a language id".into(),
            )),
            (AdapterRole::Language, Some(l)) if !valid_lang(l) => {
                Err(AdapterError::Config(format!("invalid language id {l:?}")))
            }
            (AdapterRole::Task, Some(_)) => Err(AdapterError::Config(
                "task adapters are language agnostic and take no language id".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Scalars per block: down (d·b + b), up (b·d + d), layer norm (2d).
    pub fn params_per_block(&self, d_model: usize) -> usize {
        let (d, b) = (d_model, self.bottleneck);
        d * b + b + b * d + d + 2 * d
    }
}

fn valid_lang(lang: &str) -> bool {
    !lang.is_empty()
        && lang
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AdapterKey {
    pub role: AdapterRole,
    pub lang: Option<String>,
}

impl AdapterKey {
    pub fn language(lang: impl Into<String>) -> Self {
        Self {
            role: AdapterRole::Language,
            lang: Some(lang.into()),
        }
    }

    pub fn task() -> Self {
        Self {
            role: AdapterRole::Task,
            lang: None,
        }
    }

    /// Name prefix shared by every tensor of this adapter.
    pub fn prefix(&self) -> String {
        match &self.lang {
            Some(l) => format!("adapters.lang.{l}"),
            None => "adapters.task".to_owned(),
        }
    }
}

impl fmt::Display for AdapterKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.prefix())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AdapterLayerIds {
    ln_g: ParamId,
    ln_b: ParamId,
    down_w: ParamId,
    down_b: ParamId,
    up_w: ParamId,
    up_b: ParamId,
}

#[derive(Debug, Clone)]
struct AdapterInstance {
    spec: AdapterSpec,
    layers: Vec<AdapterLayerIds>,
}

#[derive(Debug, Clone, Default)]
pub struct AdapterBank {
    instances: Vec<AdapterInstance>,
}

impl AdapterBank {
    pub fn specs(&self) -> Vec<AdapterSpec> {
        self.instances.iter().map(|i| i.spec.clone()).collect()
    }

    pub fn contains(&self, key: &AdapterKey) -> bool {
        self.instances.iter().any(|i| &i.spec.key() == key)
    }

    pub fn languages(&self) -> Vec<String> {
        self.instances
            .iter()
            .filter_map(|i| i.spec.lang.clone())
            .collect()
    }

    /// Number of per-block adapter modules registered.
    pub fn instance_count(&self) -> usize {
        self.instances.iter().map(|i| i.layers.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Adapters applied after block `layer`, in order.
    pub(crate) fn route(&self, layer: usize, active_lang: Option<&str>) -> Vec<&AdapterLayerIds> {
        let lang = active_lang.and_then(|l| {
            self.instances
                .iter()
                .find(|i| i.spec.role == AdapterRole::Language && i.spec.lang.as_deref() == Some(l))
        });
        let task = self
            .instances
            .iter()
            .find(|i| i.spec.role == AdapterRole::Task);
        lang.into_iter()
            .chain(task)
            .map(|i| &i.layers[layer])
            .collect()
    }
}

pub(crate) struct AdapterCache {
    ln: LnCache,
    z: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

pub(crate) fn adapter_forward(
    p: &ParamStore,
    ids: &AdapterLayerIds,
    x: &Array2<f64>,
) -> (Array2<f64>, AdapterCache) {
    let (z, ln) = ops::layer_norm(x.view(), p.vec(ids.ln_g), p.vec(ids.ln_b));
    let pre = ops::linear(z.view(), p.mat(ids.down_w), p.vec(ids.down_b));
    let act = ops::gelu(&pre);
    let up = ops::linear(act.view(), p.mat(ids.up_w), p.vec(ids.up_b));
    (x + &up, AdapterCache { ln, z, pre, act })
}

pub(crate) fn adapter_backward(
    p: &ParamStore,
    ids: &AdapterLayerIds,
    cache: &AdapterCache,
    dy: &Array2<f64>,
    grads: &mut Grads,
) -> Array2<f64> {
    let d_act = ops::linear_backward(
        cache.act.view(),
        p.mat(ids.up_w),
        dy.view(),
        grads,
        ids.up_w,
        ids.up_b,
    );
    let d_pre = ops::gelu_backward(&d_act, &cache.pre);
    let d_z = ops::linear_backward(
        cache.z.view(),
        p.mat(ids.down_w),
        d_pre.view(),
        grads,
        ids.down_w,
        ids.down_b,
    );
    dy + &ops::layer_norm_backward(
        d_z.view(),
        &cache.ln,
        p.vec(ids.ln_g),
        grads,
        ids.ln_g,
        ids.ln_b,
    )
}

fn adapter_seed(model_seed: u64, key: &AdapterKey) -> u64 {
    // FNV-1a over the key prefix keeps initialization independent of attach order.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.prefix().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ model_seed
}

/// One rule of a [`FreezePlan`]; `*` in the selector matches any run of characters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeRule {
    pub selector: String,
    pub trainable: bool,
}

/// Ordered selectors; the first rule whose selector matches a parameter
/// decides whether it trains. Every parameter must be matched and every
/// selector must match something.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePlan {
    pub rules: Vec<FreezeRule>,
}

impl FreezePlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn train(mut self, selector: impl Into<String>) -> Self {
        self.rules.push(FreezeRule {
            selector: selector.into(),
            trainable: true,
        });
        self
    }

    pub fn freeze(mut self, selector: impl Into<String>) -> Self {
        self.rules.push(FreezeRule {
            selector: selector.into(),
            trainable: false,
        });
        self
    }

    pub fn everything() -> Self {
        Self::new().train("*")
    }

    pub fn nothing() -> Self {
        Self::new().freeze("*")
    }

    /// Causal-LM pretraining of the backbone: the multiple-choice head and
    /// any adapters stay frozen.
    pub fn backbone_language_model(model: &TransformerModel) -> Self {
        let plan = Self::new().freeze("heads.mc.*");
        let plan = if model.adapter_bank().is_empty() {
            plan
        } else {
            plan.freeze("adapters.*")
        };
        plan.train("*")
    }

    pub fn language_adapter(lang: &str) -> Self {
        Self::new()
            .train(format!("{}.*", AdapterKey::language(lang).prefix()))
            .freeze("*")
    }

    pub fn task_adapters() -> Self {
        Self::new()
            .train(format!("{}.*", AdapterKey::task().prefix()))
            .freeze("*")
    }

    /// Parameter name → trainable.
    pub fn resolve(&self, store: &ParamStore) -> Result<BTreeMap<String, bool>, AdapterError> {
        for rule in &self.rules {
            if !store
                .iter()
                .any(|(_, p)| glob_match(&rule.selector, &p.name))
            {
                return Err(AdapterError::UnmatchedSelector(rule.selector.clone()));
            }
        }
        store
            .iter()
            .map(|(_, p)| {
                self.rules
                    .iter()
                    .find(|r| glob_match(&r.selector, &p.name))
                    .map(|r| (p.name.clone(), r.trainable))
                    .ok_or_else(|| AdapterError::Unclassified(p.name.clone()))
            })
            .collect()
    }

    pub fn trainable_set(&self, store: &ParamStore) -> Result<Vec<String>, AdapterError> {
        Ok(self
            .resolve(store)?
            .into_iter()
            .filter(|(_, t)| *t)
            .map(|(n, _)| n)
            .collect())
    }
}

fn glob_match(pattern: &str, name: &str) -> bool {
    let p = pattern.as_bytes();
    let n = name.as_bytes();
    let (mut pi, mut ni) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ni < n.len() {
        if pi < p.len() && p[pi] == b'*' {
            star = Some((pi, ni));
            pi += 1;
        } else if pi < p.len() && p[pi] == n[ni] {
            pi += 1;
            ni += 1;
        } else if let Some((sp, sn)) = star {
            pi = sp + 1;
            ni = sn + 1;
            star = Some((sp, sn + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == b'*')
}

impl TransformerModel {
    /// Registers adapters on every block. Backbone tensors are untouched.
    pub fn attach_adapters(&mut self, specs: &[AdapterSpec]) -> Result<(), AdapterError> {
        let d = self.config.d_model;
        let mut seen: Vec<AdapterKey> = self
            .adapters
            .instances
            .iter()
            .map(|i| i.spec.key())
            .collect();
        for spec in specs {
            spec.validate(d)?;
            let key = spec.key();
            if seen.contains(&key) {
                return Err(AdapterError::Duplicate(key));
            }
            seen.push(key);
        }

        for spec in specs {
            let key = spec.key();
            let prefix = key.prefix();
            let b = spec.bottleneck;
            let mut rng = ChaCha8Rng::seed_from_u64(adapter_seed(self.config.seed, &key));
            let normal = Normal::new(0.0, 0.02).expect("valid std");
            let mut layers = Vec::with_capacity(self.config.n_layers);
            for l in 0..self.config.n_layers {
                let p = format!("{prefix}.blocks.{l}");
                let down: Vec<f64> = (0..d * b).map(|_| normal.sample(&mut rng)).collect();
                let params = &mut self.params;
                layers.push(AdapterLayerIds {
                    ln_g: params.insert(format!("{p}.ln.weight"), vec![d], vec![1.0; d], false),
                    ln_b: params.insert(format!("{p}.ln.bias"), vec![d], vec![0.0; d], false),
                    down_w: params.insert(format!("{p}.down.weight"), vec![d, b], down, true),
                    down_b: params.insert(format!("{p}.down.bias"), vec![b], vec![0.0; b], false),
                    up_w: params.insert(
                        format!("{p}.up.weight"),
                        vec![b, d],
                        vec![0.0; b * d],
                        true,
                    ),
                    up_b: params.insert(format!("{p}.up.bias"), vec![d], vec![0.0; d], false),
                });
            }
            if spec.role == AdapterRole::Language && self.active_language.is_none() {
                self.active_language = spec.lang.clone();
            }
            self.adapters.instances.push(AdapterInstance {
                spec: spec.clone(),
                layers,
            });
        }
        Ok(())
    }

    /// Applies a freeze plan to the trainable flags of every parameter.
    pub fn set_trainable(&mut self, plan: &FreezePlan) -> Result<(), AdapterError> {
        let resolved = plan.resolve(&self.params)?;
        for (_, p) in self.params.iter_mut() {
            p.trainable = resolved[&p.name];
        }
        Ok(())
    }

    /// Routes the forward pass through `lang`'s language adapters.
    pub fn set_active_language(&mut self, lang: &str) -> Result<(), AdapterError> {
        if !self.adapters.contains(&AdapterKey::language(lang)) {
            return Err(AdapterError::UnknownLanguage(lang.to_owned()));
        }
        self.active_language = Some(lang.to_owned());
        Ok(())
    }

    /// Total adapter scalars currently registered.
    pub fn adapter_parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with("adapters."))
            .map(|(_, p)| p.numel())
            .sum()
    }

    /// Writes one adapter's tensors and spec to `path`.
    pub fn save_adapters(&self, key: &AdapterKey, path: &Path) -> Result<(), CheckpointError> {
        let instance = self
            .adapters
            .instances
            .iter()
            .find(|i| &i.spec.key() == key)
            .ok_or_else(|| AdapterError::Config(format!("no adapter {key} to save")))?;
        let prefix = format!("{}.", key.prefix());
        let tensors: Vec<_> = self
            .params
            .iter()
            .filter(|(_, p)| p.name.starts_with(&prefix))
            .map(|(_, p)| (p.name.clone(), p.shape.clone(), p.data.as_slice()))
            .collect();
        let header = AdapterHeader {
            spec: instance.spec.clone(),
            d_model: self.config.d_model,
            n_layers: self.config.n_layers,
        };
        let mut metadata = HashMap::new();
        metadata.insert("kind".into(), "adapter".into());
        metadata.insert(
            "adapter".into(),
            serde_json::to_string(&header).expect("adapter header serializes"),
        );
        checkpoint::write_archive(path, &tensors, metadata)
    }

    /// Loads an adapter archive, registering the adapter if the model lacks
    /// it. The file is fully validated before the model is touched.
    pub fn load_adapters(&mut self, path: &Path) -> Result<AdapterKey, CheckpointError> {
        let archive = checkpoint::read_archive(path)?;
        if archive.kind() != Some("adapter") {
            return Err(AdapterError::Format(format!(
                "expected an adapter archive, found {:?}",
                archive.kind()
            ))
            .into());
        }
        let header: AdapterHeader = archive
            .metadata
            .get("adapter")
            .ok_or_else(|| AdapterError::Format("missing adapter header".into()))
            .and_then(|s| {
                serde_json::from_str(s).map_err(|e| AdapterError::Format(e.to_string()))
            })?;
        if header.d_model != self.config.d_model || header.n_layers != self.config.n_layers {
            return Err(AdapterError::Format(format!(
                "archive built for d_model {} / {} layers, model has {} / {}",
                header.d_model, header.n_layers, self.config.d_model, self.config.n_layers
            ))
            .into());
        }
        header.spec.validate(self.config.d_model)?;
        let key = header.spec.key();
        let existing = self.adapters.instances.iter().find(|i| i.spec.key() == key);
        if let Some(inst) = existing {
            if inst.spec.bottleneck != header.spec.bottleneck {
                return Err(AdapterError::Format(format!(
                    "bottleneck {} in archive, {} in model",
                    header.spec.bottleneck, inst.spec.bottleneck
                ))
                .into());
            }
        }
        let expected =
            expected_adapter_shapes(&header.spec, self.config.d_model, self.config.n_layers);
        if archive.tensors.len() != expected.len() {
            return Err(AdapterError::Format(format!(
                "archive holds {} tensors, expected {}",
                archive.tensors.len(),
                expected.len()
            ))
            .into());
        }
        for (name, shape) in &expected {
            match archive.tensors.get(name) {
                Some(t) if &t.shape == shape && t.data.len() == shape.iter().product::<usize>() => {
                }
                Some(t) => {
                    return Err(AdapterError::Format(format!(
                        "{name}: shape {:?}, expected {shape:?}",
                        t.shape
                    ))
                    .into())
                }
                None => return Err(AdapterError::Format(format!("missing tensor {name}")).into()),
            }
        }

        if existing.is_none() {
            self.attach_adapters(std::slice::from_ref(&header.spec))?;
        }
        for (name, _) in &expected {
            let id = self.params.id(name).expect("validated adapter tensor");
            self.params
                .get_mut(id)
                .data
                .copy_from_slice(&archive.tensors[name].data);
        }
        Ok(key)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdapterHeader {
    spec: AdapterSpec,
    d_model: usize,
    n_layers: usize,
}

fn expected_adapter_shapes(
    spec: &AdapterSpec,
    d: usize,
    n_layers: usize,
) -> Vec<(String, Vec<usize>)> {
    let prefix = spec.key().prefix();
    let b = spec.bottleneck;
    (0..n_layers)
        .flat_map(|l| {
            let p = format!("{prefix}.blocks.{l}");
            vec![
                (format!("{p}.ln.weight"), vec![d]),
                (format!("{p}.ln.bias"), vec![d]),
                (format!("{p}.down.weight"), vec![d, b]),
                (format!("{p}.down.bias"), vec![b]),
                (format!("{p}.up.weight"), vec![b, d]),
                (format!("{p}.up.bias"), vec![d]),
            ]
        })
        .collect()
}
