//! Batched losses with their gradients.

use ndarray::Array2;

use crate::data::{LmSequence, TokenizedExample};
use crate::model::{
    lm_loss_with_grad, mc_loss_with_grad, DropoutCtx, Grads, LmLoss, LossWeights, ModelError,
    PackedBatch, TransformerModel,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleHeadLoss {
    pub lm: LmLoss,
    /// Mean multiple-choice cross-entropy over the batch's items.
    pub mc: f64,
    pub total: f64,
}

/// LM loss on the gold sequences (token-level mean over the whole batch)
/// plus the multiple-choice loss over each item's candidates, combined as
/// `w_lm * lm + w_mc * mc`. Gradients are accumulated into `grads` when given.
pub fn double_head_loss(
    model: &TransformerModel,
    items: &[&TokenizedExample],
    weights: LossWeights,
    dropout: Option<DropoutCtx<'_>>,
    grads: Option<&mut Grads>,
) -> Result<DoubleHeadLoss, ModelError> {
    weights.validate()?;
    if items.is_empty() {
        return Err(ModelError::DegenerateBatch);
    }
    let mut batch = PackedBatch::new();
    let mut lm_rows = Vec::new();
    let mut targets = Vec::new();
    let mut cls_rows: Vec<Vec<usize>> = Vec::with_capacity(items.len());
    for item in items {
        let mut rows = Vec::with_capacity(item.candidates.len());
        for (ci, c) in item.candidates.iter().enumerate() {
            if c.cls_position >= c.tokens.len() {
                return Err(ModelError::Input(format!(
                    "candidate {ci} has no classification position"
                )));
            }
            let start = batch.push(&c.tokens, &c.segments);
            rows.push(start + c.cls_position);
            if ci == item.gold_index {
                for (p, label) in item.lm_labels.iter().enumerate() {
                    if let Some(t) = label {
                        lm_rows.push(start + p);
                        targets.push(*t);
                    }
                }
            }
        }
        cls_rows.push(rows);
    }
    let pass = model.forward_packed(&batch, dropout)?;
    let logits = model.lm_logits(&pass.hidden, &lm_rows);
    let mask = vec![true; lm_rows.len()];
    let (lm, mut d_logits) = lm_loss_with_grad(logits.view(), &targets, &mask)?;

    let inv_items = 1.0 / items.len() as f64;
    let mut mc_total = 0.0;
    let mut mc_grads = Vec::with_capacity(items.len());
    for (item, rows) in items.iter().zip(&cls_rows) {
        let scores = model.mc_scores_at(&pass.hidden, rows);
        let (loss, g) = mc_loss_with_grad(&scores, item.gold_index)?;
        mc_total += loss;
        mc_grads.push(g);
    }
    let mc = mc_total * inv_items;
    let total = weights.w_lm * lm.loss + weights.w_mc * mc;

    if let Some(grads) = grads {
        let mut d_hidden = Array2::zeros(pass.hidden.raw_dim());
        d_logits *= weights.w_lm;
        model.lm_logits_backward(&pass.hidden, &lm_rows, &d_logits, &mut d_hidden, grads);
        if weights.w_mc > 0.0 {
            for (rows, g) in cls_rows.iter().zip(&mc_grads) {
                let ds: Vec<f64> = g.iter().map(|x| x * weights.w_mc * inv_items).collect();
                model.mc_backward(&pass.hidden, rows, &ds, &mut d_hidden, grads);
            }
        }
        model.backward(&pass, &d_hidden, grads);
    }
    Ok(DoubleHeadLoss { lm, mc, total })
}

/// Causal-LM loss (token-level mean) over plain sequences.
pub fn lm_batch_loss(
    model: &TransformerModel,
    seqs: &[&LmSequence],
    dropout: Option<DropoutCtx<'_>>,
    grads: Option<&mut Grads>,
) -> Result<LmLoss, ModelError> {
    if seqs.is_empty() {
        return Err(ModelError::DegenerateBatch);
    }
    let mut batch = PackedBatch::new();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for s in seqs {
        let start = batch.push(&s.tokens, &s.segments);
        for (p, label) in s.lm_labels.iter().enumerate() {
            if let Some(t) = label {
                rows.push(start + p);
                targets.push(*t);
            }
        }
    }
    let pass = model.forward_packed(&batch, dropout)?;
    let logits = model.lm_logits(&pass.hidden, &rows);
    let mask = vec![true; rows.len()];
    let (lm, d_logits) = lm_loss_with_grad(logits.view(), &targets, &mask)?;
    if let Some(grads) = grads {
        let mut d_hidden = Array2::zeros(pass.hidden.raw_dim());
        model.lm_logits_backward(&pass.hidden, &rows, &d_logits, &mut d_hidden, grads);
        model.backward(&pass, &d_hidden, grads);
    }
    Ok(lm)
}
