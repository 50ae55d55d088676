//! Two-Stage Regression learning of the operator tensors and the root tensor.
//!
//! All empirical averages run over distinct observable patterns with weights, so a
//! dataset and an exact distribution go through the same code path. With indicator
//! evidence features, ridge regression on the one-hot design reduces to per-cell sums,
//! which is what the stage-1 routines compute.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{PbpError, Result};
use crate::features::FeatureMap;
use crate::junction_tree::LatentJunctionTree;
use crate::linalg::ridge_solve;
use crate::model::{brute_force_joint, Dataset, GraphicalModel};
use crate::tensor::{for_each_index, Mode, ModeLabel, NamedTensor};

/// Default ridge penalty per training sample.
pub const DEFAULT_LAMBDA_PER_SAMPLE: f64 = 1e-3;

/// Ridge penalties for the stage-1 (`lambda1`) and stage-2 (`lambda2`) regressions.
///
/// Penalties are on the sum-of-squares scale, so they grow with the sample count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl RegressionConfig {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let c = RegressionConfig { lambda1, lambda2 };
        c.validate()?;
        Ok(c)
    }

    /// Defaults for `n` samples: both penalties `1e-3 * n`.
    pub fn scaled(n: usize) -> Self {
        let l = DEFAULT_LAMBDA_PER_SAMPLE * n as f64;
        RegressionConfig { lambda1: l, lambda2: l }
    }

    /// No regularization.
    pub fn unregularized() -> Self {
        RegressionConfig { lambda1: 0.0, lambda2: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for l in [self.lambda1, self.lambda2] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(PbpError::InvalidInput(format!("ridge penalty {l} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Distinct observable patterns with probability weights summing to 1.
///
/// Rows are indexed by variable id; latent positions hold 0 and are never read.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedRows {
    rows: Vec<Vec<usize>>,
    weights: Vec<f64>,
    /// Number of samples the weights stand for; penalties are divided by it.
    samples: f64,
}

impl WeightedRows {
    /// Empirical distribution of a dataset.
    pub fn from_dataset(data: &Dataset, num_vars: usize) -> Result<Self> {
        if data.is_empty() {
            return Err(PbpError::InvalidInput("learning needs at least one sample".into()));
        }
        let n = data.len() as f64;
        let mut rows = Vec::new();
        let mut weights = Vec::new();
        for (pattern, count) in data.counts() {
            let mut r = vec![0; num_vars];
            for (&c, v) in data.columns().iter().zip(pattern) {
                r[c] = v;
            }
            rows.push(r);
            weights.push(count as f64 / n);
        }
        Ok(WeightedRows { rows, weights, samples: n })
    }

    /// Exact distribution of the observables of `model`; stands for a single sample, so
    /// configured penalties act as relative penalties.
    pub fn population(model: &GraphicalModel) -> Result<Self> {
        let s = model.structure();
        let joint = brute_force_joint(model)?;
        let obs = s.observables();
        let cards: Vec<usize> = obs.iter().map(|&v| s.cardinality(v)).collect();
        let mut mass = vec![0.0; cards.iter().product()];
        let mut i = 0;
        let data = joint.data();
        for_each_index(&joint.extents(), |a| {
            let idx = obs.iter().zip(&cards).fold(0, |acc, (&v, &c)| acc * c + a[v]);
            mass[idx] += data[i];
            i += 1;
        });
        let map = FeatureMap::new(obs.clone(), cards)?;
        let mut rows = Vec::new();
        let mut weights = Vec::new();
        for (idx, &p) in mass.iter().enumerate() {
            if p > 0.0 {
                let mut r = vec![0; s.len()];
                for (&v, x) in obs.iter().zip(map.decode(idx)) {
                    r[v] = x;
                }
                rows.push(r);
                weights.push(p);
            }
        }
        Ok(WeightedRows { rows, weights, samples: 1.0 })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn samples(&self) -> f64 {
        self.samples
    }
}

/// Stage-1 fit: one prediction per evidence cell, plus the cell of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPredictions {
    /// Evidence-feature index of every row.
    pub cell_of_row: Vec<usize>,
    /// Total weight of each occupied cell.
    pub cell_weights: BTreeMap<usize, f64>,
    /// Fitted conditional expectation for each occupied cell.
    pub predictions: BTreeMap<usize, Vec<f64>>,
}

impl CellPredictions {
    /// Prediction for row `i`.
    pub fn for_row(&self, i: usize) -> &[f64] {
        &self.predictions[&self.cell_of_row[i]]
    }
}

fn separator_map(tree: &LatentJunctionTree, s: usize) -> FeatureMap {
    FeatureMap::over(tree.alpha(s), tree.cardinalities())
}

fn evidence_map(tree: &LatentJunctionTree, s: usize) -> FeatureMap {
    FeatureMap::over(tree.beta(s), tree.cardinalities())
}

/// Ridge regression of one-hot targets on one-hot evidence features.
///
/// The design is one-hot, so the normal equations are diagonal: the prediction for a
/// cell is the weighted target sum over the cell divided by `cell weight + lambda`.
fn stage1<F>(rows: &WeightedRows, evidence: &FeatureMap, dim: usize, lambda: f64, target: F) -> CellPredictions
where
    F: Fn(&[usize]) -> usize,
{
    let lambda = lambda / rows.samples();
    let mut cell_of_row = Vec::with_capacity(rows.len());
    let mut cell_weights: BTreeMap<usize, f64> = BTreeMap::new();
    let mut sums: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (r, &w) in rows.rows().iter().zip(rows.weights()) {
        let c = evidence.index_in(r);
        cell_of_row.push(c);
        *cell_weights.entry(c).or_insert(0.0) += w;
        sums.entry(c).or_insert_with(|| vec![0.0; dim])[target(r)] += w;
    }
    let predictions = sums
        .into_iter()
        .map(|(c, mut s)| {
            let d = cell_weights[&c] + lambda;
            s.iter_mut().for_each(|x| *x /= d);
            (c, s)
        })
        .collect();
    CellPredictions { cell_of_row, cell_weights, predictions }
}

/// Stage 1A: predictions of `E[theta^S | eta^S]` for separator `s`.
pub fn s1a_regress(rows: &WeightedRows, tree: &LatentJunctionTree, s: usize, config: &RegressionConfig) -> Result<CellPredictions> {
    config.validate()?;
    let theta = separator_map(tree, s);
    let eta = evidence_map(tree, s);
    let fit = stage1(rows, &eta, theta.dim(), config.lambda1, |r| theta.index_in(r));
    check_stage1(&fit, config.lambda1, s)?;
    Ok(fit)
}

/// Stage 1B: predictions of `E[outer product of the children's theta | eta^S]`.
///
/// The target index is row-major over the child separators in id order.
pub fn s1b_regress(rows: &WeightedRows, tree: &LatentJunctionTree, s: usize, config: &RegressionConfig) -> Result<CellPredictions> {
    config.validate()?;
    let children = tree.child_separators(s);
    if children.is_empty() {
        return Err(PbpError::InvalidInput(format!("separator {s} has no child separators")));
    }
    let maps: Vec<FeatureMap> = children.iter().map(|&k| separator_map(tree, k)).collect();
    let dim = maps.iter().map(|m| m.dim()).product();
    let eta = evidence_map(tree, s);
    let fit = stage1(rows, &eta, dim, config.lambda1, |r| maps.iter().fold(0, |acc, m| acc * m.dim() + m.index_in(r)));
    check_stage1(&fit, config.lambda1, s)?;
    Ok(fit)
}

fn check_stage1(fit: &CellPredictions, lambda: f64, s: usize) -> Result<()> {
    if lambda == 0.0 && fit.cell_weights.values().all(|&w| w <= 0.0) {
        return Err(PbpError::Singular { separator: Some(s) });
    }
    Ok(())
}

/// Stage-2 solution: the operator as a `target_dim x input_dim` matrix.
#[derive(Debug, Clone)]
pub struct Stage2 {
    pub operator: DMatrix<f64>,
    pub rank_deficient: bool,
}

/// Stage 2: weighted ridge regression `target ≈ M · input` over the stage-1 predictions.
///
/// Rows of the same evidence cell share predictions, so the sums run over cells.
pub fn s2_regress(inputs: &CellPredictions, targets: &CellPredictions, lambda: f64, samples: f64) -> Result<Stage2> {
    if inputs.cell_of_row.len() != targets.cell_of_row.len() || inputs.cell_weights != targets.cell_weights {
        return Err(PbpError::InvalidInput("stage-2 inputs and targets come from different samples".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(PbpError::InvalidInput(format!("ridge penalty {lambda} must be finite and >= 0")));
    }
    let p = inputs.predictions.values().next().map_or(0, |v| v.len());
    let q = targets.predictions.values().next().map_or(0, |v| v.len());
    let mut gram = DMatrix::zeros(p, p);
    let mut cross = DMatrix::zeros(p, q);
    for (c, &w) in &inputs.cell_weights {
        let x = &inputs.predictions[c];
        let y = &targets.predictions[c];
        for i in 0..p {
            let wx = w * x[i];
            if wx == 0.0 {
                continue;
            }
            for j in 0..p {
                gram[(i, j)] += wx * x[j];
            }
            for j in 0..q {
                cross[(i, j)] += wx * y[j];
            }
        }
    }
    let sol = ridge_solve(&gram, &cross, lambda / samples)?;
    if sol.coefficients.iter().any(|x| !x.is_finite()) {
        return Err(PbpError::NonFinite);
    }
    Ok(Stage2 { operator: sol.coefficients.transpose(), rank_deficient: sol.rank_deficient })
}

/// Root tensor: the average outer product of the features of all root separators.
pub fn root_tensor(rows: &WeightedRows, tree: &LatentJunctionTree) -> Result<NamedTensor> {
    let seps = tree.root_separators();
    let maps: Vec<FeatureMap> = seps.iter().map(|&s| separator_map(tree, s)).collect();
    let modes: Vec<Mode> = seps.iter().zip(&maps).map(|(&s, m)| Mode::new(ModeLabel::Separator(s), m.dim())).collect();
    let mut data = vec![0.0; maps.iter().map(|m| m.dim()).product()];
    for (r, &w) in rows.rows().iter().zip(rows.weights()) {
        data[maps.iter().fold(0, |acc, m| acc * m.dim() + m.index_in(r))] += w;
    }
    NamedTensor::new(modes, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsMeta {
    pub tree_hash: String,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Training sample count; absent for population parameters.
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub beta_cap: usize,
    pub train_seconds: f64,
    /// Separators whose stage-2 system was solved by a minimum-norm pseudoinverse.
    pub rank_deficient: Vec<usize>,
}

/// Operator tensors per non-leaf separator plus the root tensor.
///
/// The operator of separator `S` has modes `Separator(S), Separator(S_1), ...` with the
/// children in id order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedParams {
    pub operators: BTreeMap<usize, NamedTensor>,
    pub root: NamedTensor,
    pub meta: ParamsMeta,
}

impl LearnedParams {
    pub fn operator(&self, s: usize) -> Result<&NamedTensor> {
        self.operators
            .get(&s)
            .ok_or_else(|| PbpError::Internal(format!("no operator learned for separator {s}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: LearnedParams = serde_json::from_str(s)?;
        if p.operators.values().chain(std::iter::once(&p.root)).any(|t| t.data().iter().any(|x| !x.is_finite())) {
            return Err(PbpError::NonFinite);
        }
        Ok(p)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Errors unless these parameters were learned on `tree`.
    pub fn check_tree(&self, tree: &LatentJunctionTree) -> Result<()> {
        let found = tree.hash();
        if found != self.meta.tree_hash {
            return Err(PbpError::TreeHashMismatch { expected: self.meta.tree_hash.clone(), found });
        }
        Ok(())
    }
}

/// Learns the operator of one non-leaf separator.
pub fn learn_operator(rows: &WeightedRows, tree: &LatentJunctionTree, s: usize, config: &RegressionConfig) -> Result<(NamedTensor, bool)> {
    let a = s1a_regress(rows, tree, s, config)?;
    let b = s1b_regress(rows, tree, s, config)?;
    let st2 = s2_regress(&a, &b, config.lambda2, rows.samples()).map_err(|e| match e {
        PbpError::Singular { .. } => PbpError::Singular { separator: Some(s) },
        other => other,
    })?;
    if st2.rank_deficient {
        log::info!("separator {s}: stage-2 design is rank deficient, using the minimum-norm solution");
    }
    let children = tree.child_separators(s);
    let mut modes = vec![Mode::new(ModeLabel::Separator(s), tree.feature_dim(s))];
    modes.extend(children.iter().map(|&k| Mode::new(ModeLabel::Separator(k), tree.feature_dim(k))));
    // operator is target x input; the tensor puts the input mode first
    let m = st2.operator;
    let mut data = Vec::with_capacity(m.len());
    for i in 0..m.ncols() {
        for j in 0..m.nrows() {
            data.push(m[(j, i)]);
        }
    }
    Ok((NamedTensor::new(modes, data)?, st2.rank_deficient))
}

/// Runs every regression on weighted rows and assembles the parameters.
pub fn learn_weighted(tree: &LatentJunctionTree, rows: &WeightedRows, config: &RegressionConfig) -> Result<LearnedParams> {
    config.validate()?;
    let start = Instant::now();
    let mut operators = BTreeMap::new();
    let mut rank_deficient = Vec::new();
    for s in tree.non_leaf_separators() {
        let (w, rd) = learn_operator(rows, tree, s, config)?;
        if rd {
            rank_deficient.push(s);
        }
        operators.insert(s, w);
    }
    let root = root_tensor(rows, tree)?;
    Ok(LearnedParams {
        operators,
        root,
        meta: ParamsMeta {
            tree_hash: tree.hash(),
            lambda1: config.lambda1,
            lambda2: config.lambda2,
            n: None,
            seed: None,
            beta_cap: tree.beta_cap(),
            train_seconds: start.elapsed().as_secs_f64(),
            rank_deficient,
        },
    })
}

/// Learns from a dataset of observable samples.
pub fn learn(tree: &LatentJunctionTree, data: &Dataset, config: &RegressionConfig) -> Result<LearnedParams> {
    let start = Instant::now();
    let rows = WeightedRows::from_dataset(data, tree.cardinalities().len())?;
    let mut p = learn_weighted(tree, &rows, config)?;
    p.meta.n = Some(data.len());
    p.meta.train_seconds = start.elapsed().as_secs_f64();
    Ok(p)
}

/// Infinite-data limit of [`learn`]: every average is an exact expectation under `model`.
pub fn learn_population(tree: &LatentJunctionTree, model: &GraphicalModel, config: &RegressionConfig) -> Result<LearnedParams> {
    let start = Instant::now();
    let rows = WeightedRows::population(model)?;
    let mut p = learn_weighted(tree, &rows, config)?;
    p.meta.train_seconds = start.elapsed().as_secs_f64();
    Ok(p)
}
