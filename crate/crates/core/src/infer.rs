//! Message passing with learned operators: leaf tensors, upward and downward sweeps,
//! posterior queries and evidence probabilities.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{PbpError, Result};
use crate::features::{zeta, FeatureMap};
use crate::junction_tree::LatentJunctionTree;
use crate::learn::LearnedParams;
use crate::model::{EvidenceMap, Structure};
use crate::tensor::{contract, hadamard, outer_product, pinv, Mode, ModeLabel, NamedTensor};

/// Feature tensor of a leaf separator and its pseudoinverse.
///
/// `phi` has modes `Separator(s)` then `Variable(a)` for every member of the core group;
/// `phi_pinv` has the variable modes first, then `Separator(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafTensor {
    pub separator: usize,
    pub phi: NamedTensor,
    pub phi_pinv: NamedTensor,
}

impl LeafTensor {
    pub fn build(tree: &LatentJunctionTree, s: usize) -> Result<Self> {
        let map = FeatureMap::over(tree.alpha(s), tree.cardinalities());
        let mut modes = vec![Mode::new(ModeLabel::Separator(s), map.dim())];
        modes.extend(map.vars().iter().zip(map.cards()).map(|(&v, &c)| Mode::new(ModeLabel::Variable(v), c)));
        let phi = NamedTensor::from_fn(modes, |idx| {
            let f = map.index_of(&idx[1..]).expect("index within extents");
            if f == idx[0] { 1.0 } else { 0.0 }
        })?;
        let phi_pinv = pinv(&phi, &[ModeLabel::Separator(s)])?;
        Ok(LeafTensor { separator: s, phi, phi_pinv })
    }

    fn variable_labels(&self) -> Vec<ModeLabel> {
        self.phi.labels()[1..].to_vec()
    }
}

/// Leaf tensors of every leaf separator, keyed by separator id.
pub fn build_leaf_tensors(tree: &LatentJunctionTree) -> Result<BTreeMap<usize, LeafTensor>> {
    tree.leaf_separators().into_iter().map(|s| Ok((s, LeafTensor::build(tree, s)?))).collect()
}

/// Messages keyed by `(from clique, to clique)`; each has the single mode of the
/// separator between the two cliques.
pub type MessageStore = BTreeMap<(usize, usize), NamedTensor>;

/// Outer product of `zeta` over the leaf's core group.
fn evidence_indicator(leaf: &LeafTensor, tree: &LatentJunctionTree, evidence: &EvidenceMap) -> Result<NamedTensor> {
    let mut z = NamedTensor::scalar(1.0);
    for l in leaf.variable_labels() {
        let ModeLabel::Variable(v) = l else { unreachable!("leaf tensors only carry variable modes") };
        let vec = NamedTensor::vector(l, zeta(v, tree.cardinality(v), evidence)?)?;
        z = outer_product(&z, &vec)?;
    }
    Ok(z)
}

/// Message from a leaf clique to its parent: `phi_pinv` contracted with the evidence indicators.
pub fn leaf_message(tree: &LatentJunctionTree, leaf: &LeafTensor, evidence: &EvidenceMap) -> Result<NamedTensor> {
    let z = evidence_indicator(leaf, tree, evidence)?;
    contract(&leaf.phi_pinv, &z, &leaf.variable_labels())
}

/// Contracts `t` with every message in `msgs` over that message's single mode.
fn absorb(mut t: NamedTensor, msgs: &[&NamedTensor]) -> Result<NamedTensor> {
    for m in msgs {
        let l = m.labels();
        t = contract(&t, m, &l)?;
    }
    Ok(t)
}

/// Learned parameters bound to their tree, with leaf tensors precomputed.
#[derive(Debug, Clone)]
pub struct Propagator<'a> {
    tree: &'a LatentJunctionTree,
    params: &'a LearnedParams,
    leaves: BTreeMap<usize, LeafTensor>,
}

impl<'a> Propagator<'a> {
    /// Checks the tree hash and every tensor shape against the tree.
    pub fn new(tree: &'a LatentJunctionTree, params: &'a LearnedParams) -> Result<Self> {
        params.check_tree(tree)?;
        for s in tree.non_leaf_separators() {
            let w = params.operator(s)?;
            let mut want = vec![Mode::new(ModeLabel::Separator(s), tree.feature_dim(s))];
            want.extend(tree.child_separators(s).into_iter().map(|k| Mode::new(ModeLabel::Separator(k), tree.feature_dim(k))));
            if w.modes() != want.as_slice() {
                return Err(PbpError::ModeMismatch(format!("operator of separator {s} has modes {:?}", w.modes())));
            }
        }
        let want: Vec<Mode> =
            tree.root_separators().into_iter().map(|s| Mode::new(ModeLabel::Separator(s), tree.feature_dim(s))).collect();
        if params.root.modes() != want.as_slice() {
            return Err(PbpError::ModeMismatch(format!("root tensor has modes {:?}", params.root.modes())));
        }
        Ok(Propagator { tree, params, leaves: build_leaf_tensors(tree)? })
    }

    pub fn leaf_tensor(&self, s: usize) -> Option<&LeafTensor> {
        self.leaves.get(&s)
    }

    fn parent_sep(&self, c: usize) -> Result<usize> {
        self.tree
            .parent_separator(c)
            .ok_or_else(|| PbpError::Internal(format!("clique {c} has no parent separator")))
    }

    fn get(store: &MessageStore, from: usize, to: usize) -> Result<&NamedTensor> {
        store
            .get(&(from, to))
            .ok_or_else(|| PbpError::Internal(format!("message {from} -> {to} missing from the schedule")))
    }

    /// Leaf messages followed by upward messages, children before parents.
    pub fn upward_pass(&self, evidence: &EvidenceMap) -> Result<MessageStore> {
        let mut store = MessageStore::new();
        for c in self.tree.bottom_up() {
            let clique = self.tree.clique(c);
            let Some(p) = clique.parent else { continue };
            let s = self.parent_sep(c)?;
            let msg = if clique.is_leaf {
                leaf_message(self.tree, &self.leaves[&s], evidence)?
            } else {
                let kids: Vec<&NamedTensor> =
                    clique.children.iter().map(|&k| Self::get(&store, k, c)).collect::<Result<_>>()?;
                absorb(self.params.operator(s)?.clone(), &kids)?
            };
            store.insert((c, p), msg);
        }
        Ok(store)
    }

    /// Messages from the root to each child: the root tensor contracted with the
    /// upward messages of all other children.
    pub fn root_messages(&self, store: &mut MessageStore) -> Result<()> {
        let r = self.tree.root();
        let children = self.tree.clique(r).children.clone();
        for &k in &children {
            let others: Vec<&NamedTensor> =
                children.iter().filter(|&&j| j != k).map(|&j| Self::get(store, j, r)).collect::<Result<_>>()?;
            let msg = absorb(self.params.root.clone(), &others)?;
            store.insert((r, k), msg);
        }
        Ok(())
    }

    /// Downward messages below the root, parents before children.
    pub fn downward_pass(&self, store: &mut MessageStore) -> Result<()> {
        for c in self.tree.top_down() {
            let clique = self.tree.clique(c);
            let Some(p) = clique.parent else { continue };
            if clique.is_leaf {
                continue;
            }
            let s = self.parent_sep(c)?;
            let down = Self::get(store, p, c)?.clone();
            let w = contract(self.params.operator(s)?, &down, &[ModeLabel::Separator(s)])?;
            for &k in &clique.children {
                let others: Vec<&NamedTensor> = clique
                    .children
                    .iter()
                    .filter(|&&j| j != k)
                    .map(|&j| Self::get(store, j, c))
                    .collect::<Result<_>>()?;
                let msg = absorb(w.clone(), &others)?;
                store.insert((c, k), msg);
            }
        }
        Ok(())
    }

    /// Both sweeps.
    pub fn propagate(&self, evidence: &EvidenceMap) -> Result<MessageStore> {
        let mut store = self.upward_pass(evidence)?;
        self.root_messages(&mut store)?;
        self.downward_pass(&mut store)?;
        Ok(store)
    }

    /// Unnormalized estimate of `P[core group of the leaf, evidence]` from a completed store.
    pub fn leaf_joint(&self, store: &MessageStore, leaf_clique: usize) -> Result<NamedTensor> {
        let p = self
            .tree
            .clique(leaf_clique)
            .parent
            .ok_or_else(|| PbpError::InvalidInput(format!("clique {leaf_clique} is not a leaf")))?;
        let s = self.parent_sep(leaf_clique)?;
        let lt = &self.leaves[&s];
        let sep = [ModeLabel::Separator(s)];
        let u = contract(&lt.phi_pinv, Self::get(store, p, leaf_clique)?, &sep)?;
        let v = contract(&lt.phi, Self::get(store, leaf_clique, p)?, &sep)?;
        hadamard(&u, &v)
    }

    fn leaf_of(&self, x: usize) -> Result<usize> {
        self.tree
            .leaf_of(x)
            .ok_or_else(|| PbpError::InvalidInput(format!("variable {x} is not an observable of this tree")))
    }

    /// Estimated `P[evidence]`, clamped at 0; the flag reports whether clamping happened.
    pub fn evidence_probability(&self, evidence: &EvidenceMap) -> Result<(f64, bool)> {
        let first = *self
            .tree
            .observables()
            .first()
            .ok_or_else(|| PbpError::Internal("tree without observables".into()))?;
        let leaf = self.leaf_of(evidence.iter().next().map_or(first, |(v, _)| v))?;
        let store = self.propagate(evidence)?;
        let total = self.leaf_joint(&store, leaf)?.sum();
        Ok(if total < 0.0 { (0.0, true) } else { (total, false) })
    }

    /// Posterior of an observable given evidence.
    pub fn query_posterior(&self, evidence: &EvidenceMap, query: usize) -> Result<QueryOutcome> {
        let leaf = self.leaf_of(query)?;
        if let Some(x) = evidence.get(query) {
            let mut post = vec![0.0; self.tree.cardinality(query)];
            post[x] = 1.0;
            let (p, clamped) = self.evidence_probability(evidence)?;
            return Ok(QueryOutcome { posterior: post, evidence_probability: p, clamped });
        }
        let store = self.propagate(evidence)?;
        let joint = self.leaf_joint(&store, leaf)?;
        let total = joint.sum();
        let drop: Vec<ModeLabel> = joint.labels().into_iter().filter(|l| *l != ModeLabel::Variable(query)).collect();
        let marg = joint.sum_out(&drop)?;
        let mut clamped = false;
        let mut post: Vec<f64> = marg
            .data()
            .iter()
            .map(|&x| {
                if x < 0.0 {
                    clamped = true;
                    0.0
                } else {
                    x
                }
            })
            .collect();
        let z: f64 = post.iter().sum();
        if !(z > 0.0) || !z.is_finite() {
            return Err(PbpError::ZeroEvidence);
        }
        post.iter_mut().for_each(|x| *x /= z);
        let evidence_probability = if total < 0.0 {
            clamped = true;
            0.0
        } else {
            total
        };
        Ok(QueryOutcome { posterior: post, evidence_probability, clamped })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub posterior: Vec<f64>,
    pub evidence_probability: f64,
    /// A negative estimate was clamped to zero somewhere in the result.
    pub clamped: bool,
}

/// Posterior of `query` given `evidence`.
pub fn query_posterior(tree: &LatentJunctionTree, params: &LearnedParams, evidence: &EvidenceMap, query: usize) -> Result<QueryOutcome> {
    Propagator::new(tree, params)?.query_posterior(evidence, query)
}

/// Estimated probability of the evidence, clamped at 0.
pub fn evidence_probability(tree: &LatentJunctionTree, params: &LearnedParams, evidence: &EvidenceMap) -> Result<(f64, bool)> {
    Propagator::new(tree, params)?.evidence_probability(evidence)
}

/// Query result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: String,
    pub evidence: BTreeMap<String, usize>,
    pub posterior: Vec<f64>,
    pub evidence_probability: f64,
    pub clamped: bool,
    pub tree_hash: String,
    pub lambda1: f64,
    pub lambda2: f64,
    pub n: Option<usize>,
    pub seed: Option<u64>,
}

impl QueryResult {
    pub fn new(structure: &Structure, params: &LearnedParams, evidence: &EvidenceMap, query: usize, outcome: QueryOutcome) -> Self {
        QueryResult {
            query: structure.variable(query).name.clone(),
            evidence: evidence.named(structure),
            posterior: outcome.posterior,
            evidence_probability: outcome.evidence_probability,
            clamped: outcome.clamped,
            tree_hash: params.meta.tree_hash.clone(),
            lambda1: params.meta.lambda1,
            lambda2: params.meta.lambda2,
            n: params.meta.n,
            seed: params.meta.seed,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
