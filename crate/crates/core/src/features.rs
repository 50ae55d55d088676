//! Indicator feature maps: `theta` over core groups, `eta` over evidence sets, and `zeta`.
//!
//! A group of discrete variables is featurized as the vectorized outer product of
//! per-variable one-hot indicators. The index of an assignment is row-major over the
//! declared variable order, so the feature vector of any complete assignment is one-hot.

use crate::error::{PbpError, Result};
use crate::model::EvidenceMap;

/// One-hot indicator `e_x` of length `cardinality` (0-based).
pub fn indicator(x: usize, cardinality: usize) -> Result<Vec<f64>> {
    if x >= cardinality {
        return Err(PbpError::InvalidInput(format!("state {x} out of range for cardinality {cardinality}")));
    }
    let mut e = vec![0.0; cardinality];
    e[x] = 1.0;
    Ok(e)
}

/// `zeta(X)`: all-ones when unobserved, `e_x` when observed as `x`.
pub fn zeta(var: usize, cardinality: usize, evidence: &EvidenceMap) -> Result<Vec<f64>> {
    match evidence.get(var) {
        Some(x) => indicator(x, cardinality),
        None => Ok(vec![1.0; cardinality]),
    }
}

/// Indicator feature map over an ordered group of variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureMap {
    vars: Vec<usize>,
    cards: Vec<usize>,
}

impl FeatureMap {
    pub fn new(vars: Vec<usize>, cards: Vec<usize>) -> Result<Self> {
        if vars.len() != cards.len() || cards.contains(&0) {
            return Err(PbpError::InvalidInput("feature map needs one positive cardinality per variable".into()));
        }
        Ok(FeatureMap { vars, cards })
    }

    /// Builds the map for `vars` looking cardinalities up in a per-variable table.
    pub fn over(vars: &[usize], cardinalities: &[usize]) -> Self {
        FeatureMap { vars: vars.to_vec(), cards: vars.iter().map(|&v| cardinalities[v]).collect() }
    }

    pub fn vars(&self) -> &[usize] {
        &self.vars
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    /// Product of cardinalities; 1 for the empty group (constant feature).
    pub fn dim(&self) -> usize {
        self.cards.iter().product()
    }

    /// Row-major index of the group's values, given in group order.
    pub fn index_of(&self, values: &[usize]) -> Result<usize> {
        if values.len() != self.vars.len() {
            return Err(PbpError::InvalidInput(format!(
                "assignment has {} values for a group of {}",
                values.len(),
                self.vars.len()
            )));
        }
        let mut idx = 0;
        for (&v, &c) in values.iter().zip(&self.cards) {
            if v >= c {
                return Err(PbpError::InvalidInput(format!("state {v} out of range for cardinality {c}")));
            }
            idx = idx * c + v;
        }
        Ok(idx)
    }

    /// Index of the group's values read from a full assignment indexed by variable id.
    pub fn index_in(&self, assignment: &[usize]) -> usize {
        self.vars.iter().zip(&self.cards).fold(0, |acc, (&v, &c)| acc * c + assignment[v])
    }

    /// Inverse of [`FeatureMap::index_of`].
    pub fn decode(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.cards.len()];
        for k in (0..self.cards.len()).rev() {
            out[k] = index % self.cards[k];
            index /= self.cards[k];
        }
        out
    }

    pub fn features(&self, values: &[usize]) -> Result<Vec<f64>> {
        indicator(self.index_of(values)?, self.dim())
    }
}

/// `theta^S[alpha(S)]` for a complete assignment of the core group.
pub fn sufficient_stats(map: &FeatureMap, values: &[usize]) -> Result<Vec<f64>> {
    map.features(values)
}

/// `eta^S[beta(S)]`; the empty evidence set yields the constant feature `[1]`.
pub fn evidence_features(map: &FeatureMap, values: &[usize]) -> Result<Vec<f64>> {
    map.features(values)
}
