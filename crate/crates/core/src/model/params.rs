//! Named parameter storage shared by the backbone, the heads and the adapters.
//!
//! Every tensor lives in a flat `Vec<f64>` with an explicit shape. Names are
//! stable and form the contract used by checkpoints, freeze plans and the
//! parameter audits run after each training stage.

use std::collections::{BTreeMap, HashMap};

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
    /// Whether decoupled weight decay applies (false for biases and norms).
    pub decay: bool,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.data {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new tensor. Panics on a duplicate name, which is always a
    /// construction bug rather than a user error.
    pub(crate) fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f64>,
        decay: bool,
    ) -> ParamId {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch for {name}"
        );
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            shape,
            data,
            trainable: true,
            decay,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let p = &self.params[id.0];
        debug_assert_eq!(p.shape.len(), 2, "{} is not a matrix", p.name);
        ArrayView2::from_shape((p.shape[0], p.shape[1]), &p.data).expect("matrix shape")
    }

    pub fn vec(&self, id: ParamId) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[id.0].data[..])
    }

    /// Name → SHA-256 of the little-endian bytes, for before/after audits.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.digest()))
            .collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }
}

/// Names whose digest differs between two snapshots (or that appear in only one).
pub fn changed_parameters(
    before: &BTreeMap<String, String>,
    after: &BTreeMap<String, String>,
) -> Vec<String> {
    let mut changed: Vec<String> = after
        .iter()
        .filter(|(name, digest)| before.get(*name) != Some(*digest))
        .map(|(name, _)| name.clone())
        .collect();
    changed.extend(
        before
            .keys()
            .filter(|name| !after.contains_key(*name))
            .cloned(),
    );
    changed.sort();
    changed
}

/// Gradient buffers aligned with a [`ParamStore`]. Buffers exist only for
/// parameters that requested gradients; the backward pass skips the rest.
#[derive(Debug, Clone)]
pub struct Grads {
    bufs: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Buffers for currently trainable parameters only.
    pub fn for_trainable(store: &ParamStore) -> Self {
        Self::with_filter(store, |p| p.trainable)
    }

    /// Buffers for every parameter regardless of its trainable flag.
    pub fn for_all(store: &ParamStore) -> Self {
        Self::with_filter(store, |_| true)
    }

    fn with_filter(store: &ParamStore, keep: impl Fn(&Parameter) -> bool) -> Self {
        let bufs = store
            .params
            .iter()
            .map(|p| keep(p).then(|| vec![0.0; p.numel()]))
            .collect();
        let shapes = store.params.iter().map(|p| p.shape.clone()).collect();
        Self { bufs, shapes }
    }

    pub fn wants(&self, id: ParamId) -> bool {
        self.bufs.get(id.0).is_some_and(Option::is_some)
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.bufs.get(id.0).and_then(|b| b.as_deref())
    }

    pub fn mat_mut(&mut self, id: ParamId) -> Option<ArrayViewMut2<'_, f64>> {
        let shape = &self.shapes[id.0];
        let (r, c) = (shape[0], shape[1]);
        self.bufs[id.0]
            .as_mut()
            .map(|b| ArrayViewMut2::from_shape((r, c), &mut b[..]).expect("matrix shape"))
    }

    pub fn vec_mut(&mut self, id: ParamId) -> Option<ArrayViewMut1<'_, f64>> {
        self.bufs[id.0]
            .as_mut()
            .map(|b| ArrayViewMut1::from(&mut b[..]))
    }

    pub fn raw_mut(&mut self, id: ParamId) -> Option<&mut [f64]> {
        self.bufs[id.0].as_deref_mut()
    }

    pub fn scale(&mut self, factor: f64) {
        for buf in self.bufs.iter_mut().flatten() {
            buf.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.bufs
            .iter()
            .flatten()
            .flat_map(|b| b.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.bufs
            .iter()
            .flatten()
            .all(|b| b.iter().all(|g| g.is_finite()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.bufs
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.as_deref().map(|b| (ParamId(i), b)))
    }
}
