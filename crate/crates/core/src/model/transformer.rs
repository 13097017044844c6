use ndarray::{s, Array1, Array2, Array3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{self, LnCache};
use super::params::{Grads, ParamId, ParamStore};
use super::{ModelConfig, ModelError};
use crate::adapters::{self, AdapterBank, AdapterCache, AdapterLayerIds};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub(crate) struct BlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
    pub fc_proj_w: ParamId,
    pub fc_proj_b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct BackboneIds {
    pub tok_emb: ParamId,
    pub seg_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockIds>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    pub mc_w: ParamId,
    pub mc_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub(crate) config: ModelConfig,
    pub(crate) params: ParamStore,
    pub(crate) ids: BackboneIds,
    pub(crate) adapters: AdapterBank,
    pub(crate) active_language: Option<String>,
}

/// Several variable-length sequences packed row-wise. Row-wise layers run on
/// the whole matrix; attention runs per span.
#[derive(Debug, Clone, Default)]
pub struct PackedBatch {
    pub tokens: Vec<u32>,
    pub segments: Vec<u32>,
    /// `false` marks padding: such positions are never attended to.
    pub valid: Vec<bool>,
    /// `(start row, length)` of every sequence.
    pub spans: Vec<(usize, usize)>,
}

impl PackedBatch {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an unpadded sequence and returns its start row.
    pub fn push(&mut self, tokens: &[u32], segments: &[u32]) -> usize {
        let valid = vec![true; tokens.len()];
        self.push_masked(tokens, segments, &valid)
    }

    pub fn push_masked(&mut self, tokens: &[u32], segments: &[u32], valid: &[bool]) -> usize {
        assert_eq!(
            tokens.len(),
            segments.len(),
            "tokens/segments length mismatch"
        );
        assert_eq!(tokens.len(), valid.len(), "tokens/mask length mismatch");
        let start = self.tokens.len();
        self.tokens.extend_from_slice(tokens);
        self.segments.extend_from_slice(segments);
        self.valid.extend_from_slice(valid);
        self.spans.push((start, tokens.len()));
        start
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }
}

/// Dropout state for a training forward pass.
pub struct DropoutCtx<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl DropoutCtx<'_> {
    fn mask(&mut self, rows: usize, cols: usize) -> Option<Array2<f64>> {
        if self.p <= 0.0 {
            return None;
        }
        let keep = 1.0 - self.p;
        let scale = 1.0 / keep;
        Some(Array2::from_shape_fn((rows, cols), |_| {
            if self.rng.gen::<f64>() < keep {
                scale
            } else {
                0.0
            }
        }))
    }
}

struct BlockCache {
    ln1: LnCache,
    a1: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    att_out: Array2<f64>,
    drop_attn: Option<Array2<f64>>,
    ln2: LnCache,
    a2: Array2<f64>,
    fc_pre: Array2<f64>,
    fc_act: Array2<f64>,
    drop_mlp: Option<Array2<f64>>,
    adapters: Vec<(AdapterLayerIds, AdapterCache)>,
}

/// Activations retained for the backward pass.
pub struct ForwardPass {
    pub hidden: Array2<f64>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    tokens: Vec<u32>,
    segments: Vec<u32>,
    positions: Vec<usize>,
    spans: Vec<(usize, usize)>,
}

/// Result of the rectangular-batch [`TransformerModel::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// (batch, length, vocab)
    pub logits: Array3<f64>,
    /// (batch, length, d_model), after the final layer norm.
    pub hidden: Array3<f64>,
}

impl TransformerModel {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let proj_normal =
            Normal::new(0.0, INIT_STD / (2.0 * config.n_layers as f64).sqrt()).expect("valid std");
        let d = config.d_model;
        let mut params = ParamStore::new();
        let mut randn = |n: usize, dist: &Normal<f64>| -> Vec<f64> {
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };

        let tok_emb = params.insert(
            "backbone.tok_emb",
            vec![config.vocab_size, d],
            randn(config.vocab_size * d, &normal),
            true,
        );
        let seg_emb = params.insert(
            "backbone.seg_emb",
            vec![config.n_segments, d],
            randn(config.n_segments * d, &normal),
            true,
        );
        let pos_emb = params.insert(
            "backbone.pos_emb",
            vec![config.max_seq_len, d],
            randn(config.max_seq_len * d, &normal),
            true,
        );
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("backbone.blocks.{l}");
            let ff = config.d_ff;
            blocks.push(BlockIds {
                ln1_g: params.insert(format!("{p}.ln1.weight"), vec![d], vec![1.0; d], false),
                ln1_b: params.insert(format!("{p}.ln1.bias"), vec![d], vec![0.0; d], false),
                qkv_w: params.insert(
                    format!("{p}.attn.qkv.weight"),
                    vec![d, 3 * d],
                    randn(d * 3 * d, &normal),
                    true,
                ),
                qkv_b: params.insert(
                    format!("{p}.attn.qkv.bias"),
                    vec![3 * d],
                    vec![0.0; 3 * d],
                    false,
                ),
                proj_w: params.insert(
                    format!("{p}.attn.proj.weight"),
                    vec![d, d],
                    randn(d * d, &proj_normal),
                    true,
                ),
                proj_b: params.insert(format!("{p}.attn.proj.bias"), vec![d], vec![0.0; d], false),
                ln2_g: params.insert(format!("{p}.ln2.weight"), vec![d], vec![1.0; d], false),
                ln2_b: params.insert(format!("{p}.ln2.bias"), vec![d], vec![0.0; d], false),
                fc_w: params.insert(
                    format!("{p}.mlp.fc.weight"),
                    vec![d, ff],
                    randn(d * ff, &normal),
                    true,
                ),
                fc_b: params.insert(format!("{p}.mlp.fc.bias"), vec![ff], vec![0.0; ff], false),
                fc_proj_w: params.insert(
                    format!("{p}.mlp.proj.weight"),
                    vec![ff, d],
                    randn(ff * d, &proj_normal),
                    true,
                ),
                fc_proj_b: params.insert(
                    format!("{p}.mlp.proj.bias"),
                    vec![d],
                    vec![0.0; d],
                    false,
                ),
            });
        }
        let lnf_g = params.insert("backbone.ln_f.weight", vec![d], vec![1.0; d], false);
        let lnf_b = params.insert("backbone.ln_f.bias", vec![d], vec![0.0; d], false);
        let mc_w = params.insert("heads.mc.weight", vec![d], randn(d, &normal), true);
        let mc_b = params.insert("heads.mc.bias", vec![1], vec![0.0], false);

        Ok(Self {
            config,
            params,
            ids: BackboneIds {
                tok_emb,
                seg_emb,
                pos_emb,
                blocks,
                lnf_g,
                lnf_b,
                mc_w,
                mc_b,
            },
            adapters: AdapterBank::default(),
            active_language: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn active_language(&self) -> Option<&str> {
        self.active_language.as_deref()
    }

    pub fn adapter_bank(&self) -> &AdapterBank {
        &self.adapters
    }

    fn validate_batch(&self, batch: &PackedBatch) -> Result<(), ModelError> {
        for &(start, len) in &batch.spans {
            if len == 0 {
                return Err(ModelError::Input("empty sequence".into()));
            }
            if len > self.config.max_seq_len {
                return Err(ModelError::Length {
                    len,
                    max: self.config.max_seq_len,
                });
            }
            for pos in 0..len {
                let tok = batch.tokens[start + pos];
                if tok as usize >= self.config.vocab_size {
                    return Err(ModelError::TokenOutOfRange {
                        id: tok,
                        position: pos,
                        vocab_size: self.config.vocab_size,
                    });
                }
                let seg = batch.segments[start + pos];
                if seg as usize >= self.config.n_segments {
                    return Err(ModelError::SegmentOutOfRange {
                        id: seg,
                        position: pos,
                        n_segments: self.config.n_segments,
                    });
                }
            }
        }
        Ok(())
    }

    /// Forward over a packed batch. Pass a dropout context only while training.
    pub fn forward_packed(
        &self,
        batch: &PackedBatch,
        mut dropout: Option<DropoutCtx<'_>>,
    ) -> Result<ForwardPass, ModelError> {
        self.validate_batch(batch)?;
        let d = self.config.d_model;
        let n = batch.rows();
        let p = &self.params;
        let ids = &self.ids;

        let mut positions = vec![0usize; n];
        for &(start, len) in &batch.spans {
            for i in 0..len {
                positions[start + i] = i;
            }
        }

        let tok = p.mat(ids.tok_emb);
        let seg = p.mat(ids.seg_emb);
        let pos = p.mat(ids.pos_emb);
        let mut x = Array2::<f64>::zeros((n, d));
        for (r, mut row) in x.rows_mut().into_iter().enumerate() {
            row += &tok.row(batch.tokens[r] as usize);
            row += &seg.row(batch.segments[r] as usize);
            row += &pos.row(positions[r]);
        }

        let mut caches = Vec::with_capacity(self.config.n_layers);
        for (layer, b) in ids.blocks.iter().enumerate() {
            let (a1, ln1) = ops::layer_norm(x.view(), p.vec(b.ln1_g), p.vec(b.ln1_b));
            let qkv = ops::linear(a1.view(), p.mat(b.qkv_w), p.vec(b.qkv_b));
            let (att_out, probs) = self.attention(&qkv, batch);
            let mut proj = ops::linear(att_out.view(), p.mat(b.proj_w), p.vec(b.proj_b));
            let drop_attn = dropout.as_mut().and_then(|ctx| ctx.mask(n, d));
            if let Some(m) = &drop_attn {
                proj *= m;
            }
            x += &proj;

            let (a2, ln2) = ops::layer_norm(x.view(), p.vec(b.ln2_g), p.vec(b.ln2_b));
            let fc_pre = ops::linear(a2.view(), p.mat(b.fc_w), p.vec(b.fc_b));
            let fc_act = ops::gelu(&fc_pre);
            let mut mlp = ops::linear(fc_act.view(), p.mat(b.fc_proj_w), p.vec(b.fc_proj_b));
            let drop_mlp = dropout.as_mut().and_then(|ctx| ctx.mask(n, d));
            if let Some(m) = &drop_mlp {
                mlp *= m;
            }
            x += &mlp;

            let mut adapter_caches = Vec::new();
            for layer_ids in self.adapters.route(layer, self.active_language.as_deref()) {
                let (y, cache) = adapters::adapter_forward(p, layer_ids, &x);
                adapter_caches.push((layer_ids.clone(), cache));
                x = y;
            }

            caches.push(BlockCache {
                ln1,
                a1,
                qkv,
                probs,
                att_out,
                drop_attn,
                ln2,
                a2,
                fc_pre,
                fc_act,
                drop_mlp,
                adapters: adapter_caches,
            });
        }
        let (hidden, lnf) = ops::layer_norm(x.view(), p.vec(ids.lnf_g), p.vec(ids.lnf_b));
        Ok(ForwardPass {
            hidden,
            blocks: caches,
            lnf,
            tokens: batch.tokens.clone(),
            segments: batch.segments.clone(),
            positions,
            spans: batch.spans.clone(),
        })
    }

    /// Causal multi-head attention per span; padded keys are masked out.
    fn attention(&self, qkv: &Array2<f64>, batch: &PackedBatch) -> (Array2<f64>, Vec<Array2<f64>>) {
        let d = self.config.d_model;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Array2::<f64>::zeros((qkv.nrows(), d));
        let mut probs = Vec::with_capacity(batch.spans.len() * self.config.n_heads);
        for &(start, len) in &batch.spans {
            let rows = start..start + len;
            let valid = &batch.valid[rows.clone()];
            for h in 0..self.config.n_heads {
                let c = h * hd;
                let q = qkv.slice(s![rows.clone(), c..c + hd]);
                let k = qkv.slice(s![rows.clone(), d + c..d + c + hd]);
                let v = qkv.slice(s![rows.clone(), 2 * d + c..2 * d + c + hd]);
                let mut att = q.dot(&k.t());
                for i in 0..len {
                    let mut row = att.row_mut(i);
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..len {
                        if j > i || !valid[j] {
                            row[j] = f64::NEG_INFINITY;
                        } else {
                            row[j] *= scale;
                            max = max.max(row[j]);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        row.fill(0.0);
                        continue;
                    }
                    let mut sum = 0.0;
                    for w in row.iter_mut() {
                        *w = if *w == f64::NEG_INFINITY {
                            0.0
                        } else {
                            (*w - max).exp()
                        };
                        sum += *w;
                    }
                    row /= sum;
                }
                let y = att.dot(&v);
                out.slice_mut(s![rows.clone(), c..c + hd]).assign(&y);
                probs.push(att);
            }
        }
        (out, probs)
    }

    /// Backpropagates `d_hidden` (gradient w.r.t. the final hidden states)
    /// through the whole network, accumulating into `grads`.
    pub fn backward(&self, pass: &ForwardPass, d_hidden: &Array2<f64>, grads: &mut Grads) {
        let p = &self.params;
        let ids = &self.ids;
        let mut dx = ops::layer_norm_backward(
            d_hidden.view(),
            &pass.lnf,
            p.vec(ids.lnf_g),
            grads,
            ids.lnf_g,
            ids.lnf_b,
        );

        for (b, cache) in ids.blocks.iter().zip(&pass.blocks).rev() {
            for (layer_ids, acache) in cache.adapters.iter().rev() {
                dx = adapters::adapter_backward(p, layer_ids, acache, &dx, grads);
            }

            let mut d_mlp = dx.clone();
            if let Some(m) = &cache.drop_mlp {
                d_mlp *= m;
            }
            let d_act = ops::linear_backward(
                cache.fc_act.view(),
                p.mat(b.fc_proj_w),
                d_mlp.view(),
                grads,
                b.fc_proj_w,
                b.fc_proj_b,
            );
            let d_pre = ops::gelu_backward(&d_act, &cache.fc_pre);
            let d_a2 = ops::linear_backward(
                cache.a2.view(),
                p.mat(b.fc_w),
                d_pre.view(),
                grads,
                b.fc_w,
                b.fc_b,
            );
            dx += &ops::layer_norm_backward(
                d_a2.view(),
                &cache.ln2,
                p.vec(b.ln2_g),
                grads,
                b.ln2_g,
                b.ln2_b,
            );

            let mut d_proj = dx.clone();
            if let Some(m) = &cache.drop_attn {
                d_proj *= m;
            }
            let d_att = ops::linear_backward(
                cache.att_out.view(),
                p.mat(b.proj_w),
                d_proj.view(),
                grads,
                b.proj_w,
                b.proj_b,
            );
            let d_qkv = self.attention_backward(&cache.qkv, &cache.probs, &d_att, &pass.spans);
            let d_a1 = ops::linear_backward(
                cache.a1.view(),
                p.mat(b.qkv_w),
                d_qkv.view(),
                grads,
                b.qkv_w,
                b.qkv_b,
            );
            dx += &ops::layer_norm_backward(
                d_a1.view(),
                &cache.ln1,
                p.vec(b.ln1_g),
                grads,
                b.ln1_g,
                b.ln1_b,
            );
        }

        let d = self.config.d_model;
        for (id, index) in [
            (
                ids.tok_emb,
                &pass.tokens.iter().map(|&t| t as usize).collect::<Vec<_>>(),
            ),
            (
                ids.seg_emb,
                &pass.segments.iter().map(|&s| s as usize).collect(),
            ),
            (ids.pos_emb, &pass.positions),
        ] {
            if let Some(g) = grads.raw_mut(id) {
                for (r, &row) in index.iter().enumerate() {
                    let dst = &mut g[row * d..(row + 1) * d];
                    for (o, v) in dst.iter_mut().zip(dx.row(r)) {
                        *o += v;
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        qkv: &Array2<f64>,
        probs: &[Array2<f64>],
        d_out: &Array2<f64>,
        spans: &[(usize, usize)],
    ) -> Array2<f64> {
        let d = self.config.d_model;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut d_qkv = Array2::<f64>::zeros(qkv.raw_dim());
        let mut probs = probs.iter();
        for &(start, len) in spans {
            let rows = start..start + len;
            for h in 0..self.config.n_heads {
                let att = probs
                    .next()
                    .expect("one probability matrix per span and head");
                let c = h * hd;
                let q = qkv.slice(s![rows.clone(), c..c + hd]);
                let k = qkv.slice(s![rows.clone(), d + c..d + c + hd]);
                let v = qkv.slice(s![rows.clone(), 2 * d + c..2 * d + c + hd]);
                let dy = d_out.slice(s![rows.clone(), c..c + hd]);

                let d_att = dy.dot(&v.t());
                let dv = att.t().dot(&dy);
                let mut d_scores = Array2::<f64>::zeros((len, len));
                for i in 0..len {
                    let pr = att.row(i);
                    let gr = d_att.row(i);
                    let dot = pr.dot(&gr);
                    Zip::from(d_scores.row_mut(i))
                        .and(&pr)
                        .and(&gr)
                        .for_each(|o, &pij, &gij| *o = pij * (gij - dot) * scale);
                }
                let dq = d_scores.dot(&k);
                let dk = d_scores.t().dot(&q);
                d_qkv.slice_mut(s![rows.clone(), c..c + hd]).assign(&dq);
                d_qkv
                    .slice_mut(s![rows.clone(), d + c..d + c + hd])
                    .assign(&dk);
                d_qkv
                    .slice_mut(s![rows.clone(), 2 * d + c..2 * d + c + hd])
                    .assign(&dv);
            }
        }
        d_qkv
    }

    /// Vocabulary logits for the selected hidden rows (weight-tied LM head).
    pub fn lm_logits(&self, hidden: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
        let h = hidden.select(Axis(0), rows);
        h.dot(&self.params.mat(self.ids.tok_emb).t())
    }

    pub(crate) fn lm_logits_backward(
        &self,
        hidden: &Array2<f64>,
        rows: &[usize],
        d_logits: &Array2<f64>,
        d_hidden: &mut Array2<f64>,
        grads: &mut Grads,
    ) {
        let emb = self.params.mat(self.ids.tok_emb);
        let dh = d_logits.dot(&emb);
        for (k, &r) in rows.iter().enumerate() {
            let mut row = d_hidden.row_mut(r);
            row += &dh.row(k);
        }
        if let Some(mut g) = grads.mat_mut(self.ids.tok_emb) {
            let h = hidden.select(Axis(0), rows);
            ndarray::linalg::general_mat_mul(1.0, &d_logits.t(), &h, 1.0, &mut g);
        }
    }

    /// Multiple-choice scores read from the selected (classification) rows.
    pub fn mc_scores_at(&self, hidden: &Array2<f64>, rows: &[usize]) -> Vec<f64> {
        let w = self.params.vec(self.ids.mc_w);
        let b = self.params.vec(self.ids.mc_b)[0];
        rows.iter().map(|&r| hidden.row(r).dot(&w) + b).collect()
    }

    pub(crate) fn mc_backward(
        &self,
        hidden: &Array2<f64>,
        rows: &[usize],
        d_scores: &[f64],
        d_hidden: &mut Array2<f64>,
        grads: &mut Grads,
    ) {
        let w = self.params.vec(self.ids.mc_w).to_owned();
        for (&r, &ds) in rows.iter().zip(d_scores) {
            d_hidden.row_mut(r).scaled_add(ds, &w);
        }
        if let Some(mut g) = grads.vec_mut(self.ids.mc_w) {
            for (&r, &ds) in rows.iter().zip(d_scores) {
                g.scaled_add(ds, &hidden.row(r));
            }
        }
        if let Some(mut g) = grads.vec_mut(self.ids.mc_b) {
            g[0] += d_scores.iter().sum::<f64>();
        }
    }

    /// Rectangular-batch forward: `tokens[b][i]`, `segments[b][i]`, and an
    /// optional `pad_mask[b][i]` that is `true` on real tokens.
    pub fn forward(
        &self,
        tokens: &[Vec<u32>],
        segments: &[Vec<u32>],
        pad_mask: Option<&[Vec<bool>]>,
    ) -> Result<ForwardOutput, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let len = tokens[0].len();
        if tokens.len() != segments.len() {
            return Err(ModelError::Input(
                "tokens and segments batch sizes differ".into(),
            ));
        }
        let mut batch = PackedBatch::new();
        for (b, (t, s)) in tokens.iter().zip(segments).enumerate() {
            if t.len() != len || s.len() != len {
                return Err(ModelError::Input(format!(
                    "sequence {b} has a different length"
                )));
            }
            match pad_mask {
                Some(mask) => {
                    let m = mask.get(b).filter(|m| m.len() == len).ok_or_else(|| {
                        ModelError::Input(format!("pad mask missing for sequence {b}"))
                    })?;
                    batch.push_masked(t, s, m);
                }
                None => {
                    batch.push(t, s);
                }
            }
        }
        let pass = self.forward_packed(&batch, None)?;
        let rows: Vec<usize> = (0..batch.rows()).collect();
        let logits = self.lm_logits(&pass.hidden, &rows);
        let vocab = self.config.vocab_size;
        let d = self.config.d_model;
        let n = tokens.len();
        Ok(ForwardOutput {
            logits: logits
                .into_shape_with_order((n, len, vocab))
                .expect("logits reshape"),
            hidden: pass
                .hidden
                .into_shape_with_order((n, len, d))
                .expect("hidden reshape"),
        })
    }

    /// Next-token logits at the final position of a single sequence.
    pub fn next_token_logits(
        &self,
        tokens: &[u32],
        segments: &[u32],
    ) -> Result<Array1<f64>, ModelError> {
        let mut batch = PackedBatch::new();
        batch.push(tokens, segments);
        let pass = self.forward_packed(&batch, None)?;
        let last = tokens.len() - 1;
        Ok(self.lm_logits(&pass.hidden, &[last]).row(0).to_owned())
    }
}
