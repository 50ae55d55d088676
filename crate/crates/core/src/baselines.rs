//! Ground truth and baselines: exact junction-tree sum-product with known CPTs, and EM.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{PbpError, Result};
use crate::graph::{family_hosts, junction_tree_of, CliqueTree};
use crate::model::{random_model_with, rng_from_seed, Dataset, EvidenceMap, GraphicalModel, ModelFile, Structure};

/// Clique tree compiled into flat index tables for repeated two-pass sum-product.
#[derive(Debug, Clone)]
pub struct Calibrator {
    tree: CliqueTree,
    members: Vec<Vec<usize>>,
    /// Per clique, the member values of every entry, flattened `size * members`.
    states: Vec<Vec<usize>>,
    sizes: Vec<usize>,
    hosts: Vec<usize>,
    /// Per variable, a clique containing it.
    holder: Vec<usize>,
    parent: Vec<Option<usize>>,
    /// Cliques in an order where every parent precedes its children.
    order: Vec<usize>,
    children: Vec<Vec<usize>>,
    /// Per clique, the index of every entry into the separator towards its parent.
    up_index: Vec<Vec<usize>>,
    /// Per non-root clique, the index of every entry of its parent into their separator.
    down_index: Vec<Vec<usize>>,
    sep_size: Vec<usize>,
    families: Vec<Vec<usize>>,
    /// Per variable, the CPT entry touched by every entry of its host clique.
    cpt_index: Vec<Vec<usize>>,
}

impl Calibrator {
    pub fn new(structure: &Structure) -> Result<Self> {
        let tree = junction_tree_of(structure)?;
        let hosts = family_hosts(structure, &tree)?;
        let k = tree.cliques.len();
        let members: Vec<Vec<usize>> = tree.cliques.iter().map(|c| c.iter().copied().collect()).collect();
        let mut states = Vec::with_capacity(k);
        let mut sizes = Vec::with_capacity(k);
        for m in &members {
            let cards: Vec<usize> = m.iter().map(|&v| structure.cardinality(v)).collect();
            let size: usize = cards.iter().product();
            let mut flat = Vec::with_capacity(size * m.len());
            let mut idx = vec![0; m.len()];
            for _ in 0..size {
                flat.extend_from_slice(&idx);
                for p in (0..m.len()).rev() {
                    idx[p] += 1;
                    if idx[p] < cards[p] {
                        break;
                    }
                    idx[p] = 0;
                }
            }
            states.push(flat);
            sizes.push(size);
        }
        let mut holder = vec![usize::MAX; structure.len()];
        for (c, m) in members.iter().enumerate() {
            for &v in m {
                if holder[v] == usize::MAX {
                    holder[v] = c;
                }
            }
        }

        let mut parent = vec![None; k];
        let mut order = Vec::with_capacity(k);
        let mut seen = vec![false; k];
        for r in 0..k {
            if seen[r] {
                continue;
            }
            seen[r] = true;
            let mut queue = std::collections::VecDeque::from([r]);
            while let Some(c) = queue.pop_front() {
                order.push(c);
                for n in tree.neighbors(c) {
                    if !seen[n] {
                        seen[n] = true;
                        parent[n] = Some(c);
                        queue.push_back(n);
                    }
                }
            }
        }

        let mut children = vec![Vec::new(); k];
        let mut up_index = vec![Vec::new(); k];
        let mut down_index = vec![Vec::new(); k];
        let mut sep_size = vec![1; k];
        for c in 0..k {
            let Some(p) = parent[c] else { continue };
            children[p].push(c);
            let sep: Vec<usize> = tree.separator(c, p).into_iter().collect();
            let cards: Vec<usize> = sep.iter().map(|&v| structure.cardinality(v)).collect();
            sep_size[c] = cards.iter().product();
            for (side, out) in [(c, &mut up_index[c]), (p, &mut down_index[c])] {
                let pos: Vec<usize> = sep.iter().map(|v| members[side].iter().position(|m| m == v).unwrap()).collect();
                *out = (0..sizes[side]).map(|e| flat_index(&states[side][e * members[side].len()..], &pos, &cards)).collect();
            }
        }

        let mut families = Vec::with_capacity(structure.len());
        let mut cpt_index = Vec::with_capacity(structure.len());
        for v in 0..structure.len() {
            let mut fam = structure.parents(v).to_vec();
            fam.push(v);
            let c = hosts[v];
            let pos: Vec<usize> = fam.iter().map(|u| members[c].iter().position(|m| m == u).unwrap()).collect();
            let cards: Vec<usize> = fam.iter().map(|&u| structure.cardinality(u)).collect();
            cpt_index.push((0..sizes[c]).map(|e| flat_index(&states[c][e * members[c].len()..], &pos, &cards)).collect());
            families.push(fam);
        }

        Ok(Calibrator { tree, members, states, sizes, hosts, holder, parent, order, children, up_index, down_index, sep_size, families, cpt_index })
    }

    pub fn tree(&self) -> &CliqueTree {
        &self.tree
    }

    /// Clique potentials: the product of the CPTs assigned to each clique.
    pub fn potentials(&self, model: &GraphicalModel) -> Vec<Vec<f64>> {
        let mut pots: Vec<Vec<f64>> = self.sizes.iter().map(|&s| vec![1.0; s]).collect();
        for v in 0..self.families.len() {
            let c = self.hosts[v];
            let cpt = model.cpt(v);
            for (e, &i) in self.cpt_index[v].iter().enumerate() {
                pots[c][e] *= cpt[i];
            }
        }
        pots
    }

    /// Clique beliefs `P(clique, evidence)` and the evidence probability.
    pub fn calibrate(&self, potentials: &[Vec<f64>], evidence: &EvidenceMap) -> (Vec<Vec<f64>>, f64) {
        let k = self.sizes.len();
        let mut pots: Vec<Vec<f64>> = potentials.to_vec();
        for (var, val) in evidence.iter() {
            let c = self.holder[var];
            let p = self.members[c].iter().position(|&m| m == var).unwrap();
            let w = self.members[c].len();
            for e in 0..self.sizes[c] {
                if self.states[c][e * w + p] != val {
                    pots[c][e] = 0.0;
                }
            }
        }
        let mut up: Vec<Vec<f64>> = vec![Vec::new(); k];
        for &c in self.order.iter().rev() {
            if self.parent[c].is_none() {
                continue;
            }
            let mut m = vec![0.0; self.sep_size[c]];
            for e in 0..self.sizes[c] {
                let mut x = pots[c][e];
                for &j in &self.children[c] {
                    x *= up[j][self.down_index[j][e]];
                }
                m[self.up_index[c][e]] += x;
            }
            up[c] = m;
        }
        let mut down: Vec<Vec<f64>> = vec![Vec::new(); k];
        for &p in &self.order {
            for &c in &self.children[p] {
                let mut m = vec![0.0; self.sep_size[c]];
                for e in 0..self.sizes[p] {
                    let mut x = pots[p][e];
                    if self.parent[p].is_some() {
                        x *= down[p][self.up_index[p][e]];
                    }
                    for &j in &self.children[p] {
                        if j != c {
                            x *= up[j][self.down_index[j][e]];
                        }
                    }
                    m[self.down_index[c][e]] += x;
                }
                down[c] = m;
            }
        }
        let mut beliefs = pots;
        for c in 0..k {
            for e in 0..self.sizes[c] {
                let mut x = beliefs[c][e];
                if self.parent[c].is_some() {
                    x *= down[c][self.up_index[c][e]];
                }
                for &j in &self.children[c] {
                    x *= up[j][self.down_index[j][e]];
                }
                beliefs[c][e] = x;
            }
        }
        let roots: Vec<usize> = (0..k).filter(|&c| self.parent[c].is_none()).collect();
        let mass: Vec<f64> = roots.iter().map(|&r| beliefs[r].iter().sum()).collect();
        let z: f64 = mass.iter().product();
        // a forest component's beliefs only carry its own evidence; scale by the others
        if roots.len() > 1 {
            for c in 0..k {
                let i = roots.iter().position(|&r| r == self.component_root(c)).unwrap();
                let others: f64 = mass.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, m)| m).product();
                beliefs[c].iter_mut().for_each(|x| *x *= others);
            }
        }
        (beliefs, z)
    }

    fn component_root(&self, mut c: usize) -> usize {
        while let Some(p) = self.parent[c] {
            c = p;
        }
        c
    }

    /// Family marginals `P(X, parents(X) | evidence)` from calibrated beliefs, flattened in
    /// CPT layout, together with the evidence probability.
    pub fn family_posteriors(&self, potentials: &[Vec<f64>], evidence: &EvidenceMap) -> Result<(Vec<Vec<f64>>, f64)> {
        let (beliefs, z) = self.calibrate(potentials, evidence);
        if !(z > 0.0) {
            return Err(PbpError::ZeroEvidence);
        }
        let mut out = Vec::with_capacity(self.families.len());
        for v in 0..self.families.len() {
            let c = self.hosts[v];
            let len = self.cpt_index[v].iter().max().map_or(0, |&m| m + 1);
            let mut f = vec![0.0; len];
            if let Some(i) = self.observed_family_entry(v, evidence) {
                // Fully observed family: the posterior is an exact indicator.
                f[i] = 1.0;
            } else {
                for (e, &i) in self.cpt_index[v].iter().enumerate() {
                    f[i] += beliefs[c][e] / z;
                }
            }
            out.push(f);
        }
        Ok((out, z))
    }

    /// CPT entry fixed by the evidence when it covers the whole family of `v`.
    fn observed_family_entry(&self, v: usize, evidence: &EvidenceMap) -> Option<usize> {
        let values: Vec<usize> = self.families[v].iter().map(|&x| evidence.get(x)).collect::<Option<_>>()?;
        let c = self.hosts[v];
        let w = self.members[c].len();
        let pos: Vec<usize> = self.families[v]
            .iter()
            .map(|x| self.members[c].iter().position(|m| m == x).unwrap())
            .collect();
        (0..self.sizes[c])
            .find(|&e| pos.iter().zip(&values).all(|(&p, &x)| self.states[c][e * w + p] == x))
            .map(|e| self.cpt_index[v][e])
    }

    /// Posterior of one variable given evidence.
    pub fn posterior(&self, potentials: &[Vec<f64>], evidence: &EvidenceMap, query: usize, cardinality: usize) -> Result<Vec<f64>> {
        let (beliefs, z) = self.calibrate(potentials, evidence);
        if !(z > 0.0) {
            return Err(PbpError::ZeroEvidence);
        }
        let c = self.holder[query];
        let p = self.members[c].iter().position(|&m| m == query).unwrap();
        let w = self.members[c].len();
        let mut post = vec![0.0; cardinality];
        for (e, &b) in beliefs[c].iter().enumerate() {
            post[self.states[c][e * w + p]] += b;
        }
        let s: f64 = post.iter().sum();
        if !(s > 0.0) {
            return Err(PbpError::ZeroEvidence);
        }
        post.iter_mut().for_each(|x| *x /= s);
        Ok(post)
    }
}

fn flat_index(values: &[usize], pos: &[usize], cards: &[usize]) -> usize {
    pos.iter().zip(cards).fold(0, |acc, (&p, &c)| acc * c + values[p])
}

/// Exact `P[query | evidence]` by two-pass sum-product over the model's junction tree.
pub fn sum_product_exact(model: &GraphicalModel, evidence: &EvidenceMap, query: usize) -> Result<Vec<f64>> {
    let s = model.structure();
    evidence.validate(s)?;
    if query >= s.len() {
        return Err(PbpError::InvalidInput(format!("unknown query variable id {query}")));
    }
    let cal = Calibrator::new(s)?;
    let pots = cal.potentials(model);
    cal.posterior(&pots, evidence, query, s.cardinality(query))
}

/// `P[evidence]` by sum-product.
pub fn sum_product_evidence(model: &GraphicalModel, evidence: &EvidenceMap) -> Result<f64> {
    evidence.validate(model.structure())?;
    let cal = Calibrator::new(model.structure())?;
    let pots = cal.potentials(model);
    Ok(cal.calibrate(&pots, evidence).1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub restarts: usize,
    pub max_iterations: usize,
    /// Stop when the relative change of the log-likelihood falls below this.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig { restarts: 10, max_iterations: 1000, tolerance: 1e-6, seed: 0 }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.max_iterations == 0 || !(self.tolerance > 0.0) {
            return Err(PbpError::InvalidInput("EM needs restarts >= 1, max iterations >= 1 and a positive tolerance".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EmResult {
    pub model: GraphicalModel,
    /// Observed-data log-likelihood before each M-step, one trace per restart.
    pub traces: Vec<Vec<f64>>,
    pub best_restart: usize,
    pub train_seconds: f64,
}

impl EmResult {
    pub fn final_log_likelihood(&self) -> f64 {
        *self.traces[self.best_restart].last().unwrap()
    }

    pub fn to_json(&self, config: &EmConfig) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            model: ModelFile,
            traces: &'a [Vec<f64>],
            best_restart: usize,
            train_seconds: f64,
            config: &'a EmConfig,
        }
        let out = Out {
            model: ModelFile::from_model(&self.model),
            traces: &self.traces,
            best_restart: self.best_restart,
            train_seconds: self.train_seconds,
            config,
        };
        Ok(serde_json::to_string_pretty(&out)?)
    }
}

/// Seed of restart `r`, split from the configured seed.
fn restart_seed(seed: u64, r: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(r as u64).rotate_left(17) ^ (r as u64)
}

/// EM with random restarts; returns the restart with the highest final log-likelihood.
pub fn em_learn(structure: &Structure, data: &Dataset, config: &EmConfig) -> Result<EmResult> {
    config.validate()?;
    if data.is_empty() {
        return Err(PbpError::InvalidInput("EM needs a non-empty dataset".into()));
    }
    data.validate(structure)?;
    let start = Instant::now();
    let cal = Calibrator::new(structure)?;
    let patterns: Vec<(EvidenceMap, f64)> = data
        .counts()
        .into_iter()
        .map(|(row, n)| (EvidenceMap::from_pairs(data.columns().iter().copied().zip(row)), n as f64))
        .collect();

    let mut best: Option<(f64, usize, GraphicalModel)> = None;
    let mut traces = Vec::with_capacity(config.restarts);
    for r in 0..config.restarts {
        let mut rng = rng_from_seed(restart_seed(config.seed, r));
        let mut model = random_model_with(structure, &mut rng);
        let mut trace = Vec::new();
        for _ in 0..config.max_iterations {
            let (next, ll) = em_step(&cal, structure, &model, &patterns)?;
            let converged = trace.last().is_some_and(|&prev: &f64| ((ll - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < config.tolerance);
            trace.push(ll);
            model = next;
            if converged {
                break;
            }
        }
        let last = *trace.last().unwrap();
        log::debug!("EM restart {r}: {} iterations, log-likelihood {last}", trace.len());
        if best.as_ref().is_none_or(|(b, _, _)| last > *b) {
            best = Some((last, r, model));
        }
        traces.push(trace);
    }
    let (_, best_restart, model) = best.unwrap();
    Ok(EmResult { model, traces, best_restart, train_seconds: start.elapsed().as_secs_f64() })
}

/// One E-step and M-step. Returns the updated model and the log-likelihood of the input model.
pub fn em_step(cal: &Calibrator, structure: &Structure, model: &GraphicalModel, patterns: &[(EvidenceMap, f64)]) -> Result<(GraphicalModel, f64)> {
    let pots = cal.potentials(model);
    let mut counts: Vec<Vec<f64>> = (0..structure.len()).map(|v| vec![0.0; structure.cpt_len(v)]).collect();
    let mut ll = 0.0;
    for (ev, n) in patterns {
        let (fam, z) = cal.family_posteriors(&pots, ev)?;
        ll += n * z.ln();
        for (acc, f) in counts.iter_mut().zip(fam) {
            for (a, x) in acc.iter_mut().zip(f) {
                *a += n * x;
            }
        }
    }
    let cpts = counts
        .into_iter()
        .enumerate()
        .map(|(v, c)| normalize_rows(c, structure.cardinality(v)))
        .collect();
    Ok((GraphicalModel::new(structure.clone(), cpts)?, ll))
}

/// Row-normalized counts; rows without mass become uniform.
pub fn normalize_rows(mut counts: Vec<f64>, k: usize) -> Vec<f64> {
    for row in counts.chunks_mut(k) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|x| *x /= s);
        } else {
            row.iter_mut().for_each(|x| *x = 1.0 / k as f64);
        }
    }
    counts
}

/// Observed-data log-likelihood of a dataset.
pub fn log_likelihood(model: &GraphicalModel, data: &Dataset) -> Result<f64> {
    let cal = Calibrator::new(model.structure())?;
    let pots = cal.potentials(model);
    let mut ll = 0.0;
    for (row, n) in data.counts() {
        let ev = EvidenceMap::from_pairs(data.columns().iter().copied().zip(row));
        let z = cal.calibrate(&pots, &ev).1;
        ll += n as f64 * z.ln();
    }
    Ok(ll)
}

/// Per training size: EM wall-clock (all restarts) and average KL on the query task.
pub fn em_wallclock_and_quality(
    truth: &GraphicalModel,
    datasets: &[Dataset],
    config: &EmConfig,
    query: usize,
    evidence_vars: &[usize],
) -> Result<Vec<(usize, f64, f64)>> {
    let mut out = Vec::with_capacity(datasets.len());
    for d in datasets {
        let fit = em_learn(truth.structure(), d, config)?;
        let eval = crate::experiment::average_kl(truth, query, evidence_vars, |ev| sum_product_exact(&fit.model, ev, query))?;
        out.push((d.len(), fit.train_seconds, eval.avg_kl));
    }
    Ok(out)
}

/// Expected family counts summed over a dataset; useful for checks.
pub fn expected_counts(model: &GraphicalModel, data: &Dataset) -> Result<BTreeMap<usize, Vec<f64>>> {
    let s = model.structure();
    let cal = Calibrator::new(s)?;
    let pots = cal.potentials(model);
    let mut out: BTreeMap<usize, Vec<f64>> = (0..s.len()).map(|v| (v, vec![0.0; s.cpt_len(v)])).collect();
    for (row, n) in data.counts() {
        let ev = EvidenceMap::from_pairs(data.columns().iter().copied().zip(row));
        let (fam, _) = cal.family_posteriors(&pots, &ev)?;
        for (v, f) in fam.into_iter().enumerate() {
            for (a, x) in out.get_mut(&v).unwrap().iter_mut().zip(f) {
                *a += n as f64 * x;
            }
        }
    }
    Ok(out)
}
