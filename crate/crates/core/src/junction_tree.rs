//! Rooted latent junction trees with observable-to-leaf association, core groups
//! `alpha(S)` and evidence sets `beta(S)`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PbpError, Result};
use crate::graph::{self, CliqueTree};
use crate::model::Structure;

pub const DEFAULT_BETA_CAP: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clique {
    pub id: usize,
    pub members: Vec<usize>,
    pub is_leaf: bool,
    /// Observables associated with this clique; nonempty only on leaves.
    pub observables: Vec<usize>,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeparatorSet {
    pub id: usize,
    pub members: Vec<usize>,
    pub parent: usize,
    pub child: usize,
}

/// Undirected clique tree with observables attached to leaves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssociatedTree {
    pub tree: CliqueTree,
    pub delta: Vec<BTreeSet<usize>>,
    pub pendants: usize,
}

impl AssociatedTree {
    fn is_leaf(&self, c: usize) -> bool {
        self.tree.cliques.len() >= 2 && self.tree.degree(c) == 1
    }
}

/// Assigns every observable to exactly one leaf clique containing it.
///
/// Observables found in no leaf get a pendant clique `{X} ∪ latent members of the
/// smallest host`, attached to that host. Leaves left without observables are then pruned,
/// and a tree that ends up with two cliques gets a relay clique equal to their separator
/// so that a non-leaf root exists.
pub fn associate_observables(tree: &CliqueTree, structure: &Structure) -> Result<AssociatedTree> {
    let observables = structure.observables();
    if observables.len() < 2 {
        return Err(PbpError::InvalidModel("at least two observable variables are required".into()));
    }
    let mut t = AssociatedTree { tree: tree.clone(), delta: vec![BTreeSet::new(); tree.cliques.len()], pendants: 0 };
    attach(&mut t, structure, &observables);
    prune(&mut t);
    if t.tree.cliques.len() == 1 {
        // Everything collapsed into one clique: give every observable its own pendant.
        t.delta[0].clear();
        attach(&mut t, structure, &observables);
    }
    if t.tree.cliques.len() == 2 {
        let sep = t.tree.separator(0, 1);
        t.tree.cliques.push(sep);
        t.delta.push(BTreeSet::new());
        t.tree.edges = vec![(0, 2), (1, 2)];
    }
    if !t.tree.running_intersection_holds() || !t.tree.is_tree() {
        return Err(PbpError::Internal("observable association broke the junction tree".into()));
    }
    Ok(t)
}

fn attach(t: &mut AssociatedTree, structure: &Structure, observables: &[usize]) {
    let leaves: Vec<usize> = (0..t.tree.cliques.len()).filter(|&c| t.is_leaf(c)).collect();
    let mut pendants = Vec::new();
    for &x in observables {
        let smallest = |cands: &mut dyn Iterator<Item = usize>| -> Option<usize> {
            cands.min_by_key(|&c| (t.tree.cliques[c].len(), c))
        };
        let leaf = smallest(&mut leaves.iter().copied().filter(|&c| t.tree.cliques[c].contains(&x)));
        match leaf {
            Some(c) => {
                t.delta[c].insert(x);
            }
            None => {
                let host = smallest(&mut (0..t.tree.cliques.len()).filter(|&c| t.tree.cliques[c].contains(&x)))
                    .expect("every variable appears in some clique");
                let mut members: BTreeSet<usize> = t.tree.cliques[host]
                    .iter()
                    .copied()
                    .filter(|&v| !structure.variable(v).is_observable())
                    .collect();
                members.insert(x);
                pendants.push((host, members, x));
            }
        }
    }
    for (host, members, x) in pendants {
        let id = t.tree.cliques.len();
        t.tree.cliques.push(members);
        t.delta.push(BTreeSet::from([x]));
        t.tree.edges.push((host, id));
        t.pendants += 1;
    }
    t.tree.edges.sort();
}

fn prune(t: &mut AssociatedTree) {
    loop {
        let n = t.tree.cliques.len();
        let victim = (0..n).find(|&c| n > 1 && t.tree.degree(c) <= 1 && t.delta[c].is_empty());
        let Some(v) = victim else { break };
        t.tree.cliques.remove(v);
        t.delta.remove(v);
        let shift = |x: usize| if x > v { x - 1 } else { x };
        t.tree.edges = t
            .tree
            .edges
            .iter()
            .filter(|&&(a, b)| a != v && b != v)
            .map(|&(a, b)| (shift(a), shift(b)))
            .collect();
        t.tree.edges.sort();
    }
}

/// Non-leaf clique of minimum eccentricity, ties by lowest id.
pub fn select_root(tree: &CliqueTree) -> usize {
    let n = tree.cliques.len();
    if n == 1 {
        return 0;
    }
    (0..n)
        .filter(|&c| tree.degree(c) >= 2)
        .min_by_key(|&c| (tree.distances_from(c).into_iter().max().unwrap_or(0), c))
        .unwrap_or(0)
}

/// Rooted latent junction tree ready for learning and inference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentJunctionTree {
    cliques: Vec<Clique>,
    separators: Vec<SeparatorSet>,
    root: usize,
    alpha: Vec<Vec<usize>>,
    beta: Vec<Vec<usize>>,
    inside: Vec<Vec<usize>>,
    outside: Vec<Vec<usize>>,
    cardinalities: Vec<usize>,
    names: Vec<String>,
    leaf_of: BTreeMap<usize, usize>,
    beta_cap: usize,
    warnings: Vec<String>,
}

impl LatentJunctionTree {
    pub fn build(structure: &Structure, beta_cap: usize) -> Result<Self> {
        if beta_cap == 0 {
            return Err(PbpError::InvalidInput("beta cap must be positive".into()));
        }
        let moral = graph::moralize(structure);
        if !moral.is_connected() {
            return Err(PbpError::InvalidModel("model graph must be connected".into()));
        }
        let (chordal, order) = graph::triangulate(&moral);
        let tree = graph::build_tree(&chordal, &order)?;
        let assoc = associate_observables(&tree, structure)?;
        let root = select_root(&assoc.tree);
        Self::from_associated(&assoc, root, structure, beta_cap)
    }

    /// Orients `assoc` at `root` and computes inside/outside sets, core groups and evidence sets.
    pub fn from_associated(assoc: &AssociatedTree, root: usize, structure: &Structure, beta_cap: usize) -> Result<Self> {
        let t = &assoc.tree;
        let n = t.cliques.len();
        if root >= n || (n > 1 && t.degree(root) < 2) {
            return Err(PbpError::InvalidInput(format!("clique {root} cannot be the root")));
        }
        let mut parent = vec![None; n];
        let mut children = vec![Vec::new(); n];
        let mut stack = vec![root];
        let mut seen = vec![false; n];
        seen[root] = true;
        while let Some(c) = stack.pop() {
            for m in t.neighbors(c) {
                if !seen[m] {
                    seen[m] = true;
                    parent[m] = Some(c);
                    children[c].push(m);
                    stack.push(m);
                }
            }
        }
        let cliques: Vec<Clique> = (0..n)
            .map(|c| Clique {
                id: c,
                members: t.cliques[c].iter().copied().collect(),
                is_leaf: c != root && children[c].is_empty(),
                observables: assoc.delta[c].iter().copied().collect(),
                parent: parent[c],
                children: children[c].clone(),
            })
            .collect();
        for c in &cliques {
            if !c.observables.is_empty() && !c.is_leaf {
                return Err(PbpError::Internal(format!("observables associated with non-leaf clique {}", c.id)));
            }
        }
        let separators: Vec<SeparatorSet> = (0..n)
            .filter(|&c| c != root)
            .enumerate()
            .map(|(id, c)| SeparatorSet {
                id,
                members: t.separator(c, parent[c].unwrap()).into_iter().collect(),
                parent: parent[c].unwrap(),
                child: c,
            })
            .collect();
        let mut leaf_of = BTreeMap::new();
        for c in &cliques {
            for &x in &c.observables {
                if leaf_of.insert(x, c.id).is_some() {
                    return Err(PbpError::Internal(format!("observable {x} associated twice")));
                }
            }
        }
        let all_obs = structure.observables();
        if leaf_of.len() != all_obs.len() {
            return Err(PbpError::Internal("some observable has no leaf clique".into()));
        }
        let mut tree = LatentJunctionTree {
            cliques,
            separators,
            root,
            alpha: Vec::new(),
            beta: Vec::new(),
            inside: Vec::new(),
            outside: Vec::new(),
            cardinalities: structure.cardinalities(),
            names: structure.variables().iter().map(|v| v.name.clone()).collect(),
            leaf_of,
            beta_cap,
            warnings: Vec::new(),
        };
        for s in 0..tree.separators.len() {
            let (inside, outside) = tree.compute_inside_outside(s);
            tree.inside.push(inside);
            tree.outside.push(outside);
        }
        for s in 0..tree.separators.len() {
            let a = tree.compute_core_group(s);
            let b = tree.compute_evidence_set(s, beta_cap);
            tree.alpha.push(a);
            tree.beta.push(b);
        }
        for w in &tree.warnings {
            log::warn!("{w}");
        }
        Ok(tree)
    }

    pub fn cliques(&self) -> &[Clique] {
        &self.cliques
    }

    pub fn clique(&self, id: usize) -> &Clique {
        &self.cliques[id]
    }

    pub fn separators(&self) -> &[SeparatorSet] {
        &self.separators
    }

    pub fn separator(&self, id: usize) -> &SeparatorSet {
        &self.separators[id]
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn beta_cap(&self) -> usize {
        self.beta_cap
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn cardinality(&self, var: usize) -> usize {
        self.cardinalities[var]
    }

    /// Cardinality of every model variable, by id.
    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn variable_name(&self, var: usize) -> &str {
        &self.names[var]
    }

    /// Separator between `clique` and its parent.
    pub fn parent_separator(&self, clique: usize) -> Option<usize> {
        self.separators.iter().position(|s| s.child == clique)
    }

    /// Separators directly below `clique`, by id.
    pub fn child_separators_of_clique(&self, clique: usize) -> Vec<usize> {
        self.separators.iter().filter(|s| s.parent == clique).map(|s| s.id).collect()
    }

    /// Separators `S_1..S_K` below separator `s` (through its child clique).
    pub fn child_separators(&self, s: usize) -> Vec<usize> {
        self.child_separators_of_clique(self.separators[s].child)
    }

    /// Separators adjacent to the root.
    pub fn root_separators(&self) -> Vec<usize> {
        self.child_separators_of_clique(self.root)
    }

    pub fn is_leaf_separator(&self, s: usize) -> bool {
        self.cliques[self.separators[s].child].is_leaf
    }

    pub fn non_leaf_separators(&self) -> Vec<usize> {
        (0..self.separators.len()).filter(|&s| !self.is_leaf_separator(s)).collect()
    }

    pub fn leaf_separators(&self) -> Vec<usize> {
        (0..self.separators.len()).filter(|&s| self.is_leaf_separator(s)).collect()
    }

    /// Leaf clique an observable is associated with.
    pub fn leaf_of(&self, observable: usize) -> Option<usize> {
        self.leaf_of.get(&observable).copied()
    }

    pub fn observables(&self) -> Vec<usize> {
        self.leaf_of.keys().copied().collect()
    }

    /// `(OV[In(S)], OV[Out(S)])`, each sorted by variable id.
    pub fn inside_outside(&self, s: usize) -> (&[usize], &[usize]) {
        (&self.inside[s], &self.outside[s])
    }

    pub fn alpha(&self, s: usize) -> &[usize] {
        &self.alpha[s]
    }

    pub fn beta(&self, s: usize) -> &[usize] {
        &self.beta[s]
    }

    /// Dimension of the indicator feature vector of `alpha(s)`.
    pub fn feature_dim(&self, s: usize) -> usize {
        self.alpha[s].iter().map(|&v| self.cardinalities[v]).product()
    }

    pub fn separator_cardinality(&self, s: usize) -> usize {
        self.separators[s].members.iter().map(|&v| self.cardinalities[v]).product()
    }

    /// Cliques with every child listed before its parent; siblings by id.
    pub fn bottom_up(&self) -> Vec<usize> {
        let mut order = self.top_down();
        order.reverse();
        order
    }

    /// Cliques with every parent listed before its children (breadth first, children by id).
    pub fn top_down(&self) -> Vec<usize> {
        let mut order = vec![self.root];
        let mut i = 0;
        while i < order.len() {
            let c = order[i];
            order.extend(self.cliques[c].children.iter().copied());
            i += 1;
        }
        order
    }

    fn subtree(&self, c: usize) -> Vec<usize> {
        let mut out = vec![c];
        let mut i = 0;
        while i < out.len() {
            out.extend(self.cliques[out[i]].children.iter().copied());
            i += 1;
        }
        out
    }

    fn clique_distances(&self, from: usize) -> Vec<usize> {
        let n = self.cliques.len();
        let mut dist = vec![usize::MAX; n];
        dist[from] = 0;
        let mut queue = std::collections::VecDeque::from([from]);
        while let Some(c) = queue.pop_front() {
            let cl = &self.cliques[c];
            for m in cl.children.iter().copied().chain(cl.parent) {
                if dist[m] == usize::MAX {
                    dist[m] = dist[c] + 1;
                    queue.push_back(m);
                }
            }
        }
        dist
    }

    fn compute_inside_outside(&self, s: usize) -> (Vec<usize>, Vec<usize>) {
        let sub: BTreeSet<usize> = self.subtree(self.separators[s].child).into_iter().collect();
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for (&x, &c) in &self.leaf_of {
            if sub.contains(&c) {
                inside.push(x);
            } else {
                outside.push(x);
            }
        }
        (inside, outside)
    }

    fn by_distance(&self, vars: &[usize], from: usize) -> Vec<usize> {
        let dist = self.clique_distances(from);
        let mut v = vars.to_vec();
        v.sort_by_key(|&x| (dist[self.leaf_of[&x]], x));
        v
    }

    fn compute_core_group(&mut self, s: usize) -> Vec<usize> {
        let child = self.separators[s].child;
        if self.cliques[child].is_leaf {
            return self.cliques[child].observables.clone();
        }
        let target = self.separator_cardinality(s);
        let ordered = self.by_distance(&self.inside[s], child);
        let mut alpha = Vec::new();
        let mut card = 1usize;
        for x in ordered {
            alpha.push(x);
            card = card.saturating_mul(self.cardinalities[x]);
            if card >= target {
                return alpha;
            }
        }
        self.warnings.push(format!(
            "separator {s}: inside observables have {card} joint states < separator cardinality {target}; \
             rank condition unattainable, consistency not guaranteed"
        ));
        alpha
    }

    fn compute_evidence_set(&mut self, s: usize, cap: usize) -> Vec<usize> {
        let parent = self.separators[s].parent;
        let ordered = self.by_distance(&self.outside[s], parent);
        let mut beta = Vec::new();
        let mut card = 1usize;
        for x in ordered {
            let next = card.saturating_mul(self.cardinalities[x]);
            if next > cap {
                break;
            }
            card = next;
            beta.push(x);
        }
        if beta.is_empty() && !self.is_leaf_separator(s) {
            self.warnings.push(format!(
                "separator {s}: empty evidence set, stage-1 regressions reduce to unconditional means"
            ));
        }
        beta
    }

    /// Running intersection property over the rooted tree.
    pub fn running_intersection_holds(&self) -> bool {
        self.as_clique_tree().running_intersection_holds()
    }

    pub fn as_clique_tree(&self) -> CliqueTree {
        CliqueTree {
            cliques: self.cliques.iter().map(|c| c.members.iter().copied().collect()).collect(),
            edges: self
                .separators
                .iter()
                .map(|s| (s.parent.min(s.child), s.parent.max(s.child)))
                .collect(),
        }
    }

    pub fn dump(&self) -> TreeDump {
        let names = |v: &[usize]| v.iter().map(|&x| self.names[x].clone()).collect::<Vec<_>>();
        TreeDump {
            cliques: self
                .cliques
                .iter()
                .map(|c| CliqueDump {
                    id: c.id,
                    members: names(&c.members),
                    leaf: c.is_leaf,
                    observables: names(&c.observables),
                    parent: c.parent,
                })
                .collect(),
            separators: self
                .separators
                .iter()
                .map(|s| SeparatorDump { id: s.id, members: names(&s.members), parent: s.parent, child: s.child })
                .collect(),
            root: self.root,
            alpha: (0..self.separators.len()).map(|s| (s, names(&self.alpha[s]))).collect(),
            beta: (0..self.separators.len()).map(|s| (s, names(&self.beta[s]))).collect(),
            beta_cap: self.beta_cap,
            warnings: self.warnings.clone(),
        }
    }

    /// SHA-256 of the canonical tree dump, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&self.dump()).expect("tree dump serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliqueDump {
    pub id: usize,
    pub members: Vec<String>,
    pub leaf: bool,
    pub observables: Vec<String>,
    pub parent: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparatorDump {
    pub id: usize,
    pub members: Vec<String>,
    pub parent: usize,
    pub child: usize,
}

/// Debug view of a tree; serialized by `--dump-tree`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDump {
    pub cliques: Vec<CliqueDump>,
    pub separators: Vec<SeparatorDump>,
    pub root: usize,
    pub alpha: BTreeMap<usize, Vec<String>>,
    pub beta: BTreeMap<usize, Vec<String>>,
    pub beta_cap: usize,
    pub warnings: Vec<String>,
}
