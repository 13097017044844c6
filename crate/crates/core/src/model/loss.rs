use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::ops::log_softmax;
use super::ModelError;

/// Relative weights of the two heads in the training objective. The
/// generative head always dominates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_lm: f64,
    pub w_mc: f64,
}

impl LossWeights {
    pub fn new(w_lm: f64, w_mc: f64) -> Result<Self, ModelError> {
        let w = Self { w_lm, w_mc };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.w_lm > 0.0 && self.w_lm.is_finite()) {
            return Err(ModelError::Config(format!(
                "w_lm must be positive, got {}",
                self.w_lm
            )));
        }
        if !(self.w_mc >= 0.0 && self.w_mc.is_finite()) {
            return Err(ModelError::Config(format!(
                "w_mc must be non-negative, got {}",
                self.w_mc
            )));
        }
        if self.w_lm <= self.w_mc {
            return Err(ModelError::Config(format!(
                "language-modeling weight {} must exceed multiple-choice weight {}",
                self.w_lm, self.w_mc
            )));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_lm: 2.0,
            w_mc: 1.0,
        }
    }
}

pub fn combined_loss(lm: f64, mc: f64, weights: LossWeights) -> Result<f64, ModelError> {
    weights.validate()?;
    Ok(weights.w_lm * lm + weights.w_mc * mc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmLoss {
    /// Mean negative log-likelihood over supervised positions.
    pub loss: f64,
    /// Summed negative log-likelihood.
    pub total_nll: f64,
    pub count: usize,
}

/// Next-token cross-entropy: row `i` of `logits` is scored against
/// `targets[i]` when `mask[i]` is set.
pub fn lm_loss(
    logits: ArrayView2<f64>,
    targets: &[u32],
    mask: &[bool],
) -> Result<LmLoss, ModelError> {
    check_lm_inputs(logits, targets, mask)?;
    let mut total = 0.0;
    let mut count = 0;
    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            total -= log_softmax(logits.row(i))[t as usize];
            count += 1;
        }
    }
    if count == 0 {
        return Err(ModelError::DegenerateBatch);
    }
    Ok(LmLoss {
        loss: total / count as f64,
        total_nll: total,
        count,
    })
}

/// As [`lm_loss`], also returning dLoss/dlogits (zero on unsupervised rows).
pub fn lm_loss_with_grad(
    logits: ArrayView2<f64>,
    targets: &[u32],
    mask: &[bool],
) -> Result<(LmLoss, Array2<f64>), ModelError> {
    check_lm_inputs(logits, targets, mask)?;
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(ModelError::DegenerateBatch);
    }
    let inv = 1.0 / count as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let ls = log_softmax(logits.row(i));
        total -= ls[t as usize];
        let mut g = grad.row_mut(i);
        for (o, l) in g.iter_mut().zip(ls.iter()) {
            *o = l.exp() * inv;
        }
        g[t as usize] -= inv;
    }
    Ok((
        LmLoss {
            loss: total / count as f64,
            total_nll: total,
            count,
        },
        grad,
    ))
}

fn check_lm_inputs(
    logits: ArrayView2<f64>,
    targets: &[u32],
    mask: &[bool],
) -> Result<(), ModelError> {
    if logits.nrows() != targets.len() || targets.len() != mask.len() {
        return Err(ModelError::Input(format!(
            "logits rows {}, targets {}, mask {} disagree",
            logits.nrows(),
            targets.len(),
            mask.len()
        )));
    }
    if let Some(&t) = targets
        .iter()
        .zip(mask)
        .find(|(&t, &m)| m && t as usize >= logits.ncols())
        .map(|(t, _)| t)
    {
        return Err(ModelError::TokenOutOfRange {
            id: t,
            position: 0,
            vocab_size: logits.ncols(),
        });
    }
    Ok(())
}

/// Softmax cross-entropy over candidate scores; returns (loss, dloss/dscores).
pub fn mc_loss_with_grad(scores: &[f64], gold: usize) -> Result<(f64, Vec<f64>), ModelError> {
    if gold >= scores.len() {
        return Err(ModelError::Input(format!(
            "gold index {gold} outside {} candidates",
            scores.len()
        )));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln() + max;
    let loss = lse - scores[gold];
    let mut grad: Vec<f64> = scores.iter().map(|s| (s - lse).exp()).collect();
    grad[gold] -= 1.0;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Array2::<f64>::zeros((5, 64));
        let targets = [1, 5, 9, 63, 0];
        let loss = lm_loss(logits.view(), &targets, &[true; 5]).unwrap();
        // ln(64)
        assert!((loss.loss - 4.158_883_083_359_672).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let mut logits = Array2::<f64>::zeros((3, 10));
        let targets = [2u32, 7, 4];
        for (i, &t) in targets.iter().enumerate() {
            logits[[i, t as usize]] = 60.0;
        }
        let loss = lm_loss(logits.view(), &targets, &[true; 3]).unwrap();
        assert!(loss.loss < 1e-20);
    }

    #[test]
    fn masked_loss_is_mean_over_kept_positions() {
        let logits =
            Array2::from_shape_fn((6, 7), |(i, j)| ((i * 7 + j) as f64 * 0.37).sin() * 3.0);
        let targets = [0u32, 6, 3, 2, 5, 1];
        let mask = [true, false, true, false, true, false];
        let got = lm_loss(logits.view(), &targets, &mask).unwrap();

        // Token-by-token recomputation straight from the softmax definition.
        let mut acc = 0.0;
        let mut n = 0.0;
        for i in 0..6 {
            if !mask[i] {
                continue;
            }
            let z: f64 = (0..7).map(|j| logits[[i, j]].exp()).sum();
            acc += -(logits[[i, targets[i] as usize]].exp() / z).ln();
            n += 1.0;
        }
        assert!((got.loss - acc / n).abs() < 1e-12);
        assert_eq!(got.count, 3);
    }

    #[test]
    fn empty_mask_is_degenerate() {
        let logits = Array2::<f64>::zeros((2, 4));
        assert!(matches!(
            lm_loss(logits.view(), &[0, 1], &[false, false]),
            Err(ModelError::DegenerateBatch)
        ));
    }

    #[test]
    fn combined_loss_arithmetic_and_weight_rules() {
        let w = LossWeights::new(2.0, 1.0).unwrap();
        assert_eq!(combined_loss(1.0, 0.5, w).unwrap(), 2.5);
        let lm_only = LossWeights::new(1.5, 0.0).unwrap();
        assert_eq!(combined_loss(0.7, 123.0, lm_only).unwrap(), 1.5 * 0.7);
        assert!(LossWeights::new(1.0, 1.0).is_err());
        assert!(LossWeights::new(1.0, 2.0).is_err());
        let bad = LossWeights {
            w_lm: 1.0,
            w_mc: 3.0,
        };
        assert!(matches!(
            combined_loss(1.0, 1.0, bad),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn lm_gradient_matches_finite_differences() {
        let logits = Array2::from_shape_fn((3, 5), |(i, j)| ((i + 2 * j) as f64 * 0.61).cos());
        let targets = [4u32, 0, 2];
        let mask = [true, true, false];
        let (_, grad) = lm_loss_with_grad(logits.view(), &targets, &mask).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..5 {
                let mut plus = logits.clone();
                plus[[i, j]] += h;
                let mut minus = logits.clone();
                minus[[i, j]] -= h;
                let num = (lm_loss(plus.view(), &targets, &mask).unwrap().loss
                    - lm_loss(minus.view(), &targets, &mask).unwrap().loss)
                    / (2.0 * h);
                assert!((num - grad[[i, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn mc_loss_prefers_gold() {
        let (low, _) = mc_loss_with_grad(&[5.0, 0.0, 0.0], 0).unwrap();
        let (high, grad) = mc_loss_with_grad(&[0.0, 5.0, 0.0], 0).unwrap();
        assert!(low < high);
        assert!(grad.iter().sum::<f64>().abs() < 1e-12);
        assert!(mc_loss_with_grad(&[1.0], 3).is_err());
    }
}
