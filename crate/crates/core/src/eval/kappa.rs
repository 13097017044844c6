//! Fleiss' kappa for a fixed number of raters per item.

use serde::{Deserialize, Serialize};

use super::EvalError;

/// `counts[i][j]` raters put item `i` in category `j`; every row sums to `raters`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingsMatrix {
    counts: Vec<Vec<u32>>,
    raters: u32,
}

impl RatingsMatrix {
    pub fn new(counts: Vec<Vec<u32>>) -> Result<Self, EvalError> {
        let first = counts
            .first()
            .ok_or_else(|| EvalError::Empty("ratings matrix has no items".into()))?;
        let categories = first.len();
        if categories == 0 {
            return Err(EvalError::Input("ratings matrix has no categories".into()));
        }
        let raters: u32 = first.iter().sum();
        for (i, row) in counts.iter().enumerate() {
            if row.len() != categories {
                return Err(EvalError::Input(format!(
                    "item {i} has {} categories, expected {categories}",
                    row.len()
                )));
            }
            let n: u32 = row.iter().sum();
            if n != raters {
                return Err(EvalError::Input(format!(
                    "item {i} has {n} ratings, expected {raters}"
                )));
            }
        }
        if raters < 2 {
            return Err(EvalError::Input(format!(
                "need at least 2 raters per item, got {raters}"
            )));
        }
        Ok(Self { counts, raters })
    }

    /// Builds counts from per-item category labels in `0..categories`.
    pub fn from_labels(items: &[Vec<usize>], categories: usize) -> Result<Self, EvalError> {
        let counts = items
            .iter()
            .enumerate()
            .map(|(i, labels)| {
                let mut row = vec![0u32; categories];
                for &l in labels {
                    *row.get_mut(l).ok_or_else(|| {
                        EvalError::Input(format!("item {i}: category {l} outside 0..{categories}"))
                    })? += 1;
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        Self::new(counts)
    }

    pub fn items(&self) -> usize {
        self.counts.len()
    }

    pub fn categories(&self) -> usize {
        self.counts[0].len()
    }

    pub fn raters(&self) -> u32 {
        self.raters
    }

    pub fn counts(&self) -> &[Vec<u32>] {
        &self.counts
    }

    /// Delimited export: one line per item, counts separated by `sep`.
    pub fn to_delimited(&self, sep: char) -> String {
        self.counts
            .iter()
            .map(|r| {
                r.iter()
                    .map(u32::to_string)
                    .collect::<Vec<_>>()
                    .join(&sep.to_string())
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Fleiss' kappa, (P̄ − P̄e) / (1 − P̄e).
///
/// Evaluated in exact integer arithmetic as
/// `((S − Nn)·Nn − (n−1)·ΣC²) / ((n−1)·((Nn)² − ΣC²))`, where `S` is the sum
/// of squared cell counts and `C` the column totals, so the only rounding is
/// the final division. Undefined when every rating falls in one category.
pub fn fleiss_kappa(m: &RatingsMatrix) -> Result<f64, EvalError> {
    let n = m.raters as i128;
    let nn = m.items() as i128 * n;
    let mut s: i128 = 0;
    let mut cols = vec![0i128; m.categories()];
    for row in &m.counts {
        for (j, &c) in row.iter().enumerate() {
            let c = c as i128;
            s += c * c;
            cols[j] += c;
        }
    }
    let sum_c2: i128 = cols.iter().map(|c| c * c).sum();
    let den = (n - 1) * (nn * nn - sum_c2);
    if den == 0 {
        return Err(EvalError::UndefinedKappa);
    }
    let num = (s - nn) * nn - (n - 1) * sum_c2;
    Ok(num as f64 / den as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_fixture() {
        let m = RatingsMatrix::new(vec![vec![3, 0], vec![2, 1]]).unwrap();
        assert_eq!(fleiss_kappa(&m).unwrap(), -0.2);
    }

    #[test]
    fn perfect_agreement() {
        let m = RatingsMatrix::new(vec![vec![3, 0], vec![0, 3], vec![3, 0]]).unwrap();
        assert_eq!(fleiss_kappa(&m).unwrap(), 1.0);
    }

    #[test]
    fn single_category_is_undefined() {
        let m = RatingsMatrix::new(vec![vec![3, 0], vec![3, 0]]).unwrap();
        assert!(matches!(fleiss_kappa(&m), Err(EvalError::UndefinedKappa)));
    }

    #[test]
    fn validates_shape() {
        assert!(RatingsMatrix::new(vec![]).is_err());
        assert!(RatingsMatrix::new(vec![vec![1, 0]]).is_err());
        assert!(RatingsMatrix::new(vec![vec![2, 1], vec![2, 0]]).is_err());
        assert!(RatingsMatrix::from_labels(&[vec![0, 5]], 2).is_err());
        let m = RatingsMatrix::from_labels(&[vec![0, 0, 0], vec![0, 1, 0]], 2).unwrap();
        assert_eq!(m.counts(), &[vec![3, 0], vec![2, 1]]);
        assert_eq!(m.to_delimited(','), "3,0\n2,1");
    }
}
