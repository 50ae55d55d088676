//! Independent oracles shared by the integration tests. Everything here is written with
//! plain loops so that it does not lean on the code under test.
#![allow(dead_code)]

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use pbp::graph::CliqueTree;
use pbp::junction_tree::{LatentJunctionTree, DEFAULT_BETA_CAP};
use pbp::learn::{learn_population, RegressionConfig};
use pbp::tensor::contract;
use pbp::model::{EvidenceMap, GraphicalModel, Structure};
use pbp::{Mode, ModeLabel, NamedTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Every index tuple of `extents`, last position fastest.
pub fn odometer(extents: &[usize]) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if extents.iter().any(|&e| e == 0) {
        return out;
    }
    let mut idx = vec![0; extents.len()];
    loop {
        out.push(idx.clone());
        let mut k = extents.len();
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < extents[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

pub fn random_tensor(rng: &mut impl Rng, modes: Vec<Mode>) -> NamedTensor {
    let n: usize = modes.iter().map(|m| m.extent).product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    NamedTensor::new(modes, data).unwrap()
}

fn lookup(t: &NamedTensor, assign: &[(ModeLabel, usize)]) -> f64 {
    let idx: Vec<usize> = t
        .labels()
        .iter()
        .map(|l| assign.iter().find(|(k, _)| k == l).map(|(_, i)| *i).unwrap())
        .collect();
    t.get(&idx)
}

/// Contraction by summing over every index of the contracted modes.
/// Result modes: free modes of `a`, then free modes of `b`.
pub fn naive_contract(a: &NamedTensor, b: &NamedTensor, labels: &[ModeLabel]) -> NamedTensor {
    let free: Vec<Mode> = a
        .modes()
        .iter()
        .chain(b.modes())
        .filter(|m| !labels.contains(&m.label))
        .cloned()
        .collect();
    let inner: Vec<usize> = labels.iter().map(|l| a.extent(l).unwrap()).collect();
    let mut data = Vec::new();
    for out in odometer(&free.iter().map(|m| m.extent).collect::<Vec<_>>()) {
        let mut acc = 0.0;
        for k in odometer(&inner) {
            let mut assign: Vec<(ModeLabel, usize)> = free.iter().map(|m| m.label.clone()).zip(out.iter().copied()).collect();
            assign.extend(labels.iter().cloned().zip(k));
            acc += lookup(a, &assign) * lookup(b, &assign);
        }
        data.push(acc);
    }
    NamedTensor::new(free, data).unwrap()
}

pub fn naive_outer(a: &NamedTensor, b: &NamedTensor) -> NamedTensor {
    naive_contract(a, b, &[])
}

/// Entrywise product in `a`'s mode order.
pub fn naive_hadamard(a: &NamedTensor, b: &NamedTensor) -> NamedTensor {
    let data = odometer(&a.extents())
        .into_iter()
        .map(|idx| {
            let assign: Vec<(ModeLabel, usize)> = a.labels().into_iter().zip(idx).collect();
            lookup(a, &assign) * lookup(b, &assign)
        })
        .collect();
    NamedTensor::new(a.modes().to_vec(), data).unwrap()
}

/// Largest residual of the four Penrose conditions for a candidate pseudoinverse `p` of `a`.
pub fn penrose_residual(a: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let apa = a * p * a - a;
    let pap = p * a * p - p;
    let ap = a * p;
    let pa = p * a;
    let max = |m: &DMatrix<f64>| m.iter().fold(0.0f64, |x, y| x.max(y.abs()));
    max(&apa)
        .max(max(&pap))
        .max(max(&(ap.transpose() - &ap)))
        .max(max(&(pa.transpose() - &pa)))
}

/// Product of two random factors, so the rank is at most `rank`.
pub fn random_low_rank(rng: &mut impl Rng, rows: usize, cols: usize, rank: usize) -> DMatrix<f64> {
    let l = DMatrix::from_fn(rows, rank, |_, _| rng.random_range(-1.0..1.0));
    let r = DMatrix::from_fn(rank, cols, |_, _| rng.random_range(-1.0..1.0));
    l * r
}

/// Cliques on the unique tree path from `a` to `b`, both ends included; `None` when
/// they lie in different components of a forest.
pub fn tree_path(tree: &CliqueTree, a: usize, b: usize) -> Option<Vec<usize>> {
    let n = tree.cliques.len();
    let mut prev = vec![usize::MAX; n];
    let mut seen = vec![false; n];
    let mut queue = std::collections::VecDeque::from([a]);
    seen[a] = true;
    while let Some(c) = queue.pop_front() {
        for &(x, y) in &tree.edges {
            let next = if x == c { y } else if y == c { x } else { continue };
            if !seen[next] {
                seen[next] = true;
                prev[next] = c;
                queue.push_back(next);
            }
        }
    }
    if !seen[b] {
        return None;
    }
    let mut path = vec![b];
    while *path.last().unwrap() != a {
        path.push(prev[*path.last().unwrap()]);
    }
    Some(path)
}

/// No cycles: every component has one edge fewer than it has cliques.
pub fn is_forest(tree: &CliqueTree) -> bool {
    let n = tree.cliques.len();
    let mut components = 0;
    let mut seen = vec![false; n];
    for start in 0..n {
        if seen[start] {
            continue;
        }
        components += 1;
        for c in 0..n {
            if tree_path(tree, start, c).is_some() {
                seen[c] = true;
            }
        }
    }
    tree.edges.len() + components == n
}

/// Running intersection, stated pairwise: `C_i ∩ C_j` lies in every clique on the path
/// between them, and is empty when no path exists.
pub fn rip_by_paths(tree: &CliqueTree) -> bool {
    let n = tree.cliques.len();
    for i in 0..n {
        for j in i + 1..n {
            let shared: BTreeSet<usize> = tree.cliques[i].intersection(&tree.cliques[j]).copied().collect();
            let ok = match tree_path(tree, i, j) {
                Some(path) => path.iter().all(|&c| shared.is_subset(&tree.cliques[c])),
                None => shared.is_empty(),
            };
            if !ok {
                return false;
            }
        }
    }
    true
}

/// Every full assignment with its joint probability.
pub fn joint_table(model: &GraphicalModel) -> Vec<(Vec<usize>, f64)> {
    let s = model.structure();
    odometer(&s.cardinalities())
        .into_iter()
        .map(|a| {
            let p = (0..s.len()).map(|v| model.local_probability(v, &a)).product();
            (a, p)
        })
        .collect()
}

/// `E[e_{g1} ⊗ e_{g2} ⊗ ... | cond = values]`, each group indexed row-major in listed
/// order, groups concatenated. `None` if the conditioning event has probability 0.
pub fn conditional_moment(
    structure: &Structure,
    table: &[(Vec<usize>, f64)],
    cond: &[usize],
    values: &[usize],
    groups: &[&[usize]],
) -> Option<Vec<f64>> {
    let vars: Vec<usize> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    let dim: usize = vars.iter().map(|&v| structure.cardinality(v)).product();
    let mut out = vec![0.0; dim];
    let mut z = 0.0;
    for (a, p) in table {
        if cond.iter().zip(values).any(|(&c, &x)| a[c] != x) {
            continue;
        }
        let idx = vars.iter().fold(0, |acc, &v| acc * structure.cardinality(v) + a[v]);
        out[idx] += p;
        z += p;
    }
    if z <= 0.0 {
        return None;
    }
    Some(out.into_iter().map(|x| x / z).collect())
}

/// Posterior of `query` given `evidence` by scanning the joint table.
pub fn enumerate_posterior(structure: &Structure, table: &[(Vec<usize>, f64)], evidence: &EvidenceMap, query: usize) -> Option<Vec<f64>> {
    let (cond, values): (Vec<usize>, Vec<usize>) = evidence.iter().unzip();
    conditional_moment(structure, table, &cond, &values, &[&[query]])
}

/// Every partial evidence assignment over `vars`: each variable is either unobserved or set to a state.
pub fn all_partial_evidence(structure: &Structure, vars: &[usize]) -> Vec<EvidenceMap> {
    let extents: Vec<usize> = vars.iter().map(|&v| structure.cardinality(v) + 1).collect();
    odometer(&extents)
        .into_iter()
        .map(|choice| {
            EvidenceMap::from_pairs(
                vars.iter()
                    .zip(choice)
                    .filter(|(_, c)| *c > 0)
                    .map(|(&v, c)| (v, c - 1)),
            )
        })
        .collect()
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Worst violation of the operator identity over every non-leaf separator and every
/// complete assignment of its outside observables. The children's statistics are
/// compared in expectation, `E[⊗_k θ_k | Ω] = W ×_S E[θ_S | Ω]`; when a separator has a
/// single child this is the same as the outer product of the children's expectations.
pub fn operator_identity_error(m: &GraphicalModel) -> (f64, usize, usize) {
    let s = m.structure();
    let tree = LatentJunctionTree::build(s, DEFAULT_BETA_CAP).unwrap();
    let params = learn_population(&tree, m, &RegressionConfig::unregularized()).unwrap();
    let table = joint_table(m);
    let mut worst = 0.0f64;
    let mut checks = 0;
    for sep in tree.non_leaf_separators() {
        let w = params.operator(sep).unwrap();
        let children: Vec<usize> = w.labels()[1..]
            .iter()
            .map(|l| match l {
                ModeLabel::Separator(c) => *c,
                other => panic!("unexpected operator mode {other}"),
            })
            .collect();
        let outside = tree.inside_outside(sep).1.to_vec();
        let cards: Vec<usize> = outside.iter().map(|&v| s.cardinality(v)).collect();
        for o in odometer(&cards) {
            let Some(msg) = conditional_moment(s, &table, &outside, &o, &[tree.alpha(sep)]) else { continue };
            let groups: Vec<&[usize]> = children.iter().map(|&c| tree.alpha(c)).collect();
            let target = conditional_moment(s, &table, &outside, &o, &groups).unwrap();
            let v = NamedTensor::vector(ModeLabel::Separator(sep), msg).unwrap();
            let got = contract(w, &v, &[ModeLabel::Separator(sep)]).unwrap();
            worst = worst.max(max_abs(got.data(), &target));
            checks += 1;
        }
    }
    (worst, checks, tree.separators().len())
}
