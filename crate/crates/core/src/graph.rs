//! Undirected graphs, moralization, min-fill triangulation and clique trees.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{PbpError, Result};
use crate::model::Structure;

/// Simple undirected graph over vertices `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UGraph {
    adj: Vec<BTreeSet<usize>>,
}

impl UGraph {
    pub fn new(n: usize) -> Self {
        UGraph { adj: vec![BTreeSet::new(); n] }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut g = UGraph::new(n);
        for &(a, b) in edges {
            g.add_edge(a, b);
        }
        g
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    pub fn add_edge(&mut self, a: usize, b: usize) {
        if a != b {
            self.adj[a].insert(b);
            self.adj[b].insert(a);
        }
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adj[a].contains(&b)
    }

    pub fn neighbors(&self, v: usize) -> &BTreeSet<usize> {
        &self.adj[v]
    }

    /// Edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e = Vec::new();
        for (a, nb) in self.adj.iter().enumerate() {
            for &b in nb.range(a + 1..) {
                e.push((a, b));
            }
        }
        e
    }

    pub fn is_connected(&self) -> bool {
        if self.adj.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.adj.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &self.adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Undirected skeleton plus edges between co-parents of every child.
pub fn moralize(structure: &Structure) -> UGraph {
    let mut g = UGraph::new(structure.len());
    for &(p, c) in structure.edges() {
        g.add_edge(p, c);
    }
    for c in 0..structure.len() {
        let ps = structure.parents(c);
        for (i, &a) in ps.iter().enumerate() {
            for &b in &ps[i + 1..] {
                g.add_edge(a, b);
            }
        }
    }
    g
}

/// Greedy min-fill elimination, ties broken by lowest vertex id.
///
/// Returns the chordal completion and the elimination order.
pub fn triangulate(graph: &UGraph) -> (UGraph, Vec<usize>) {
    let n = graph.len();
    let mut work = graph.clone();
    let mut chordal = graph.clone();
    let mut alive: BTreeSet<usize> = (0..n).collect();
    let mut order = Vec::with_capacity(n);
    while !alive.is_empty() {
        let mut best: Option<(usize, usize)> = None;
        for &v in &alive {
            let fill = fill_in(&work, v);
            if best.is_none_or(|(f, _)| fill < f) {
                best = Some((fill, v));
            }
        }
        let (_, v) = best.unwrap();
        let nb: Vec<usize> = work.adj[v].iter().copied().collect();
        for (i, &a) in nb.iter().enumerate() {
            for &b in &nb[i + 1..] {
                work.add_edge(a, b);
                chordal.add_edge(a, b);
            }
        }
        for &a in &nb {
            work.adj[a].remove(&v);
        }
        work.adj[v].clear();
        alive.remove(&v);
        order.push(v);
    }
    (chordal, order)
}

fn fill_in(g: &UGraph, v: usize) -> usize {
    let nb: Vec<usize> = g.adj[v].iter().copied().collect();
    let mut missing = 0;
    for (i, &a) in nb.iter().enumerate() {
        for &b in &nb[i + 1..] {
            if !g.has_edge(a, b) {
                missing += 1;
            }
        }
    }
    missing
}

/// Maximum cardinality search followed by a perfect-elimination check.
pub fn is_chordal(g: &UGraph) -> bool {
    let n = g.len();
    if n == 0 {
        return true;
    }
    // MCS visit order; its reverse is a perfect elimination order iff g is chordal.
    let mut weight = vec![0usize; n];
    let mut numbered = vec![false; n];
    let mut visit = Vec::with_capacity(n);
    for _ in 0..n {
        let v = (0..n).filter(|&v| !numbered[v]).max_by_key(|&v| (weight[v], std::cmp::Reverse(v))).unwrap();
        numbered[v] = true;
        visit.push(v);
        for &w in &g.adj[v] {
            if !numbered[w] {
                weight[w] += 1;
            }
        }
    }
    let mut pos = vec![0; n];
    for (i, &v) in visit.iter().enumerate() {
        pos[v] = i;
    }
    // For each v, its earlier-visited neighbours must form a clique. It suffices to check
    // that they are all adjacent to the latest-visited one among them.
    for &v in &visit {
        let earlier: Vec<usize> = g.adj[v].iter().copied().filter(|&w| pos[w] < pos[v]).collect();
        if let Some(&u) = earlier.iter().max_by_key(|&&w| pos[w]) {
            for &w in &earlier {
                if w != u && !g.has_edge(u, w) {
                    return false;
                }
            }
        }
    }
    true
}

/// Maximal cliques of a chordal graph from an elimination order, sorted lexicographically.
pub fn maximal_cliques(chordal: &UGraph, order: &[usize]) -> Vec<BTreeSet<usize>> {
    let mut pos = vec![0; chordal.len()];
    for (i, &v) in order.iter().enumerate() {
        pos[v] = i;
    }
    let mut cands: Vec<BTreeSet<usize>> = order
        .iter()
        .map(|&v| {
            let mut c: BTreeSet<usize> = chordal.adj[v].iter().copied().filter(|&w| pos[w] > pos[v]).collect();
            c.insert(v);
            c
        })
        .collect();
    cands.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    let mut out: Vec<BTreeSet<usize>> = Vec::new();
    for c in cands {
        if !out.iter().any(|o| c.is_subset(o)) {
            out.push(c);
        }
    }
    out.sort();
    out
}

/// Undirected clique tree: cliques plus tree edges `(i, j)` with `i < j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliqueTree {
    pub cliques: Vec<BTreeSet<usize>>,
    pub edges: Vec<(usize, usize)>,
}

impl CliqueTree {
    pub fn neighbors(&self, c: usize) -> Vec<usize> {
        let mut n: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| if a == c { Some(b) } else if b == c { Some(a) } else { None })
            .collect();
        n.sort();
        n
    }

    pub fn degree(&self, c: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == c || b == c).count()
    }

    pub fn separator(&self, a: usize, b: usize) -> BTreeSet<usize> {
        self.cliques[a].intersection(&self.cliques[b]).copied().collect()
    }

    /// Every variable's host cliques form a connected subtree.
    pub fn running_intersection_holds(&self) -> bool {
        let vars: BTreeSet<usize> = self.cliques.iter().flatten().copied().collect();
        for v in vars {
            let hosts: BTreeSet<usize> = (0..self.cliques.len()).filter(|&c| self.cliques[c].contains(&v)).collect();
            let start = *hosts.iter().next().unwrap();
            let mut seen = BTreeSet::from([start]);
            let mut stack = vec![start];
            while let Some(c) = stack.pop() {
                for n in self.neighbors(c) {
                    if hosts.contains(&n) && seen.insert(n) {
                        stack.push(n);
                    }
                }
            }
            if seen != hosts {
                return false;
            }
        }
        true
    }

    pub fn is_tree(&self) -> bool {
        let n = self.cliques.len();
        if n == 0 || self.edges.len() + 1 != n {
            return false;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(c) = stack.pop() {
            for m in self.neighbors(c) {
                if !seen[m] {
                    seen[m] = true;
                    stack.push(m);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Tree distances (in edges) from `start` to every clique.
    pub fn distances_from(&self, start: usize) -> Vec<usize> {
        let n = self.cliques.len();
        let mut dist = vec![usize::MAX; n];
        dist[start] = 0;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(c) = queue.pop_front() {
            for m in self.neighbors(c) {
                if dist[m] == usize::MAX {
                    dist[m] = dist[c] + 1;
                    queue.push_back(m);
                }
            }
        }
        dist
    }
}

/// Maximal cliques joined by a maximum-weight spanning tree on intersection sizes.
///
/// Kruskal over candidate pairs sorted by weight (descending) then by clique-id pair.
/// Pairs with empty intersection are never joined, so a disconnected graph yields a forest.
pub fn build_tree(chordal: &UGraph, order: &[usize]) -> Result<CliqueTree> {
    let cliques = maximal_cliques(chordal, order);
    let k = cliques.len();
    let mut cand = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let w = cliques[i].intersection(&cliques[j]).count();
            if w > 0 {
                cand.push((w, i, j));
            }
        }
    }
    cand.sort_by(|a, b| b.0.cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut uf: Vec<usize> = (0..k).collect();
    fn find(uf: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while uf[r] != r {
            r = uf[r];
        }
        let mut y = x;
        while uf[y] != r {
            let next = uf[y];
            uf[y] = r;
            y = next;
        }
        r
    }
    let mut edges = Vec::new();
    for (_, i, j) in cand {
        let (ri, rj) = (find(&mut uf, i), find(&mut uf, j));
        if ri != rj {
            uf[ri] = rj;
            edges.push((i, j));
        }
    }
    edges.sort();
    let tree = CliqueTree { cliques, edges };
    if !tree.running_intersection_holds() {
        return Err(PbpError::Internal("clique tree violates the running intersection property".into()));
    }
    Ok(tree)
}

/// Moralize, triangulate and build the clique tree of a model structure.
pub fn junction_tree_of(structure: &Structure) -> Result<CliqueTree> {
    let moral = moralize(structure);
    let (chordal, order) = triangulate(&moral);
    build_tree(&chordal, &order)
}

/// Family (`child ∪ parents`) of each variable mapped to the first clique containing it.
pub fn family_hosts(structure: &Structure, tree: &CliqueTree) -> Result<Vec<usize>> {
    (0..structure.len())
        .map(|v| {
            let mut fam: BTreeSet<usize> = structure.parents(v).iter().copied().collect();
            fam.insert(v);
            tree.cliques
                .iter()
                .position(|c| fam.is_subset(c))
                .ok_or_else(|| PbpError::Internal(format!("no clique covers the family of variable {v}")))
        })
        .collect()
}

/// Edge multiset helper for fixtures: names sorted within and across edges.
pub fn named_edges(g: &UGraph, structure: &Structure) -> Vec<(String, String)> {
    let mut e: Vec<(String, String)> = g
        .edges()
        .into_iter()
        .map(|(a, b)| {
            let (x, y) = (structure.variable(a).name.clone(), structure.variable(b).name.clone());
            if x <= y { (x, y) } else { (y, x) }
        })
        .collect();
    e.sort();
    e
}

/// Number of cliques containing each variable.
pub fn host_counts(tree: &CliqueTree) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for c in &tree.cliques {
        for &v in c {
            *m.entry(v).or_insert(0) += 1;
        }
    }
    m
}
