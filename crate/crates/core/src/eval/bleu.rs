//! Corpus-level BLEU over whitespace tokens with a single reference.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Smoothing {
    /// Any zero n-gram precision makes the score zero.
    None,
    /// A zero match count at order n is replaced by `epsilon` before
    /// dividing by the hypothesis n-gram total.
    AddEpsilon { epsilon: f64 },
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing::AddEpsilon { epsilon: 0.1 }
    }
}

impl Smoothing {
    pub fn describe(&self) -> String {
        match self {
            Smoothing::None => "none".into(),
            Smoothing::AddEpsilon { epsilon } => format!("add-epsilon({epsilon})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    /// Clipped matches and hypothesis totals per order `1..=max_n`.
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub brevity_penalty: f64,
    pub hypothesis_length: u64,
    pub reference_length: u64,
    pub smoothing: Smoothing,
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Geometric mean of modified n-gram precisions times the brevity penalty,
/// accumulated over the whole corpus. Orders for which the hypotheses hold
/// no n-grams at all are left out of the mean; a corpus with no unigram
/// match scores 0 whatever the smoothing.
pub fn bleu<S: AsRef<str>>(
    hypotheses: &[S],
    references: &[S],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<BleuScore, EvalError> {
    if hypotheses.is_empty() {
        return Err(EvalError::Empty(
            "BLEU needs at least one hypothesis".into(),
        ));
    }
    if hypotheses.len() != references.len() {
        return Err(EvalError::Input(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(EvalError::Input("max_n must be at least 1".into()));
    }
    if let Smoothing::AddEpsilon { epsilon } = smoothing {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(EvalError::Input(format!(
                "epsilon must lie in (0, 1), got {epsilon}"
            )));
        }
    }
    let mut matches = vec![0u64; max_n];
    let mut totals = vec![0u64; max_n];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        if r.is_empty() {
            return Err(EvalError::Input("empty reference".into()));
        }
        hyp_len += h.len() as u64;
        ref_len += r.len() as u64;
        for n in 1..=max_n {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            for (g, c) in &hc {
                matches[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if hyp_len == 0 || matches[0] == 0 {
        0.0
    } else {
        let mut log_sum = 0.0;
        let mut orders = 0usize;
        let mut zero = false;
        for (&m, &t) in matches.iter().zip(&totals) {
            if t == 0 {
                continue;
            }
            orders += 1;
            let m = match (m, smoothing) {
                (0, Smoothing::None) => {
                    zero = true;
                    break;
                }
                (0, Smoothing::AddEpsilon { epsilon }) => epsilon,
                (m, _) => m as f64,
            };
            log_sum += (m / t as f64).ln();
        }
        if zero {
            0.0
        } else {
            brevity_penalty * (log_sum / orders as f64).exp()
        }
    };
    Ok(BleuScore {
        score,
        matches,
        totals,
        brevity_penalty,
        hypothesis_length: hyp_len,
        reference_length: ref_len,
        smoothing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_corpus_scores_one() {
        let refs = ["the cat sat on the mat", "hello there my friend"];
        let s = bleu(&refs, &refs, 4, Smoothing::default()).unwrap();
        assert_eq!(s.score, 1.0);
    }

    #[test]
    fn disjoint_vocabulary_scores_zero() {
        let s = bleu(&["a b c d"], &["w x y z"], 4, Smoothing::default()).unwrap();
        assert_eq!(s.score, 0.0);
    }

    #[test]
    fn repeated_word_is_clipped() {
        let s = bleu(&["the the the the"], &["the cat"], 4, Smoothing::default()).unwrap();
        assert_eq!(s.matches, vec![1, 0, 0, 0]);
        assert_eq!(s.totals, vec![4, 3, 2, 1]);
        let expected = (0.25f64 * (0.1 / 3.0) * (0.1 / 2.0) * 0.1).powf(0.25);
        assert!((s.score - expected).abs() < 1e-12);
    }

    #[test]
    fn short_hypothesis_pays_brevity_penalty() {
        let s = bleu(&["the cat"], &["the cat sat down"], 2, Smoothing::None).unwrap();
        assert!((s.brevity_penalty - (-1.0f64).exp()).abs() < 1e-12);
        assert!((s.score - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        let empty: [&str; 0] = [];
        assert!(matches!(
            bleu(&empty, &empty, 4, Smoothing::None),
            Err(EvalError::Empty(_))
        ));
        assert!(bleu(&["a"], &["a", "b"], 4, Smoothing::None).is_err());
        assert!(bleu(&["a"], &[""], 4, Smoothing::None).is_err());
    }
}
