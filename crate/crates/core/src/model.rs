//! Discrete directed graphical models with observable and latent variables.
//!
//! CPTs are stored flattened row-major: parent axes in declared edge order, then the
//! child's own axis last. All states are 0-based.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{PbpError, Result};
use crate::tensor::{for_each_index, Mode, ModeLabel, NamedTensor};

/// Name of the generator behind every seeded routine; recorded in output metadata.
pub const RNG_NAME: &str = "ChaCha8Rng";

/// Default cap on the number of joint states enumerated by brute force.
pub const DEFAULT_JOINT_CAP: u128 = 1 << 24;

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Observable,
    Latent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Variable {
    pub id: usize,
    pub name: String,
    pub cardinality: usize,
    pub role: Role,
}

impl Variable {
    pub fn is_observable(&self) -> bool {
        self.role == Role::Observable
    }
}

/// Variables plus directed edges, without parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Structure {
    variables: Vec<Variable>,
    edges: Vec<(usize, usize)>,
    parents: Vec<Vec<usize>>,
}

impl Structure {
    pub fn new(variables: Vec<Variable>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let mut names = BTreeSet::new();
        for (i, v) in variables.iter().enumerate() {
            if v.id != i {
                return Err(PbpError::InvalidModel(format!("variable ids must be contiguous from 0, found {} at {i}", v.id)));
            }
            if v.cardinality < 2 {
                return Err(PbpError::InvalidModel(format!("variable {} has cardinality {} < 2", v.name, v.cardinality)));
            }
            if !names.insert(v.name.as_str()) {
                return Err(PbpError::InvalidModel(format!("duplicate variable name {}", v.name)));
            }
        }
        let n = variables.len();
        let mut parents = vec![Vec::new(); n];
        let mut seen = BTreeSet::new();
        for &(p, c) in &edges {
            if p >= n || c >= n {
                return Err(PbpError::InvalidModel(format!("edge ({p}, {c}) refers to an unknown variable")));
            }
            if p == c || !seen.insert((p, c)) {
                return Err(PbpError::InvalidModel(format!("edge ({p}, {c}) is a self loop or duplicate")));
            }
            parents[c].push(p);
        }
        let s = Structure { variables, edges, parents };
        s.topological_order()?;
        Ok(s)
    }

    /// Convenience constructor from `(name, cardinality, observable)` triples and named edges.
    pub fn from_names(vars: &[(&str, usize, bool)], edges: &[(&str, &str)]) -> Result<Self> {
        let variables: Vec<Variable> = vars
            .iter()
            .enumerate()
            .map(|(id, &(name, cardinality, obs))| Variable {
                id,
                name: name.to_string(),
                cardinality,
                role: if obs { Role::Observable } else { Role::Latent },
            })
            .collect();
        let lookup = |n: &str| {
            variables
                .iter()
                .position(|v| v.name == n)
                .ok_or_else(|| PbpError::InvalidModel(format!("unknown variable {n}")))
        };
        let e = edges.iter().map(|&(p, c)| Ok((lookup(p)?, lookup(c)?))).collect::<Result<Vec<_>>>()?;
        Structure::new(variables, e)
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn variable(&self, id: usize) -> &Variable {
        &self.variables[id]
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn parents(&self, id: usize) -> &[usize] {
        &self.parents[id]
    }

    pub fn cardinality(&self, id: usize) -> usize {
        self.variables[id].cardinality
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.variables.iter().map(|v| v.cardinality).collect()
    }

    pub fn observables(&self) -> Vec<usize> {
        self.variables.iter().filter(|v| v.is_observable()).map(|v| v.id).collect()
    }

    pub fn latents(&self) -> Vec<usize> {
        self.variables.iter().filter(|v| !v.is_observable()).map(|v| v.id).collect()
    }

    pub fn id_of(&self, name: &str) -> Result<usize> {
        self.variables
            .iter()
            .position(|v| v.name == name)
            .ok_or_else(|| PbpError::InvalidInput(format!("unknown variable `{name}`")))
    }

    /// Number of entries of the CPT of `id`.
    pub fn cpt_len(&self, id: usize) -> usize {
        self.parents[id].iter().map(|&p| self.cardinality(p)).product::<usize>() * self.cardinality(id)
    }

    /// Kahn's algorithm, ties broken by lowest id.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let n = self.variables.len();
        let mut indeg: Vec<usize> = self.parents.iter().map(|p| p.len()).collect();
        let mut children = vec![Vec::new(); n];
        for &(p, c) in &self.edges {
            children[p].push(c);
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&v) = ready.iter().next() {
            ready.remove(&v);
            order.push(v);
            for &c in &children[v] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&i| indeg[i] > 0).unwrap();
            return Err(PbpError::Cyclic(self.variables[stuck].name.clone()));
        }
        Ok(order)
    }

    pub fn joint_states(&self) -> u128 {
        self.variables.iter().map(|v| v.cardinality as u128).product()
    }
}

/// A structure with one CPT per variable.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphicalModel {
    structure: Structure,
    cpts: Vec<Vec<f64>>,
}

impl GraphicalModel {
    pub fn new(structure: Structure, cpts: Vec<Vec<f64>>) -> Result<Self> {
        if cpts.len() != structure.len() {
            return Err(PbpError::InvalidModel(format!("{} CPTs for {} variables", cpts.len(), structure.len())));
        }
        for (id, cpt) in cpts.iter().enumerate() {
            let v = structure.variable(id);
            if cpt.len() != structure.cpt_len(id) {
                return Err(PbpError::InvalidModel(format!(
                    "CPT of {} has {} entries, expected {}",
                    v.name,
                    cpt.len(),
                    structure.cpt_len(id)
                )));
            }
            for row in cpt.chunks(v.cardinality) {
                if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                    return Err(PbpError::InvalidModel(format!("CPT of {} has a negative or non-finite entry", v.name)));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-12 {
                    return Err(PbpError::InvalidModel(format!("CPT row of {} sums to {s}", v.name)));
                }
            }
        }
        Ok(GraphicalModel { structure, cpts })
    }

    pub fn structure(&self) -> &Structure {
        &self.structure
    }

    pub fn cpt(&self, id: usize) -> &[f64] {
        &self.cpts[id]
    }

    pub fn cpts(&self) -> &[Vec<f64>] {
        &self.cpts
    }

    /// P(X_id = assignment[id] | parents) for a complete assignment.
    pub fn local_probability(&self, id: usize, assignment: &[usize]) -> f64 {
        let mut row = 0;
        for &p in self.structure.parents(id) {
            row = row * self.structure.cardinality(p) + assignment[p];
        }
        self.cpts[id][row * self.structure.cardinality(id) + assignment[id]]
    }

    pub fn joint_probability(&self, assignment: &[usize]) -> f64 {
        (0..self.structure.len()).map(|i| self.local_probability(i, assignment)).product()
    }

    /// CPT as a tensor with modes `Variable(parent)...`, `Variable(child)`.
    pub fn cpt_tensor(&self, id: usize) -> Result<NamedTensor> {
        let mut modes: Vec<Mode> = self
            .structure
            .parents(id)
            .iter()
            .map(|&p| Mode::new(ModeLabel::Variable(p), self.structure.cardinality(p)))
            .collect();
        modes.push(Mode::new(ModeLabel::Variable(id), self.structure.cardinality(id)));
        NamedTensor::new(modes, self.cpts[id].clone())
    }
}

/// Draws every CPT row from a symmetric Dirichlet(1) distribution.
pub fn random_model(structure: &Structure, seed: u64) -> GraphicalModel {
    let mut rng = rng_from_seed(seed);
    random_model_with(structure, &mut rng)
}

pub fn random_model_with<R: Rng + ?Sized>(structure: &Structure, rng: &mut R) -> GraphicalModel {
    let cpts = (0..structure.len())
        .map(|id| {
            let k = structure.cardinality(id);
            let mut cpt = Vec::with_capacity(structure.cpt_len(id));
            for _ in 0..structure.cpt_len(id) / k {
                cpt.extend(dirichlet_one(k, rng));
            }
            cpt
        })
        .collect();
    GraphicalModel { structure: structure.clone(), cpts }
}

/// One draw from the uniform distribution over the `k`-simplex.
pub(crate) fn dirichlet_one<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let mut row: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect::<Vec<f64>>();
    // Exp1 never returns 0 for all entries in practice, but keep the row valid regardless.
    for x in row.iter_mut() {
        *x = f64::max(*x, 1e-300);
    }
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= s);
    row
}

/// Complete observations of the observable variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    columns: Vec<usize>,
    values: Vec<usize>,
}

impl Dataset {
    pub fn new(columns: Vec<usize>, rows: Vec<Vec<usize>>) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * columns.len());
        for (i, r) in rows.into_iter().enumerate() {
            if r.len() != columns.len() {
                return Err(PbpError::InvalidInput(format!("row {i} has {} values, expected {}", r.len(), columns.len())));
            }
            values.extend(r);
        }
        Ok(Dataset { columns, values })
    }

    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        if self.columns.is_empty() {
            0
        } else {
            self.values.len() / self.columns.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[usize] {
        let w = self.columns.len();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.values.chunks(self.columns.len().max(1))
    }

    /// Checks that columns are exactly the model's observables and all values are in range.
    pub fn validate(&self, structure: &Structure) -> Result<()> {
        let cols: BTreeSet<usize> = self.columns.iter().copied().collect();
        let obs: BTreeSet<usize> = structure.observables().into_iter().collect();
        if cols.len() != self.columns.len() || cols != obs {
            return Err(PbpError::InvalidInput("dataset columns do not match the model's observable variables".into()));
        }
        for (i, r) in self.rows().enumerate() {
            for (&c, &v) in self.columns.iter().zip(r) {
                if v >= structure.cardinality(c) {
                    return Err(PbpError::InvalidInput(format!(
                        "row {i}: value {v} out of range for {}",
                        structure.variable(c).name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of rows with each distinct observation, in lexicographic order of the rows.
    pub fn counts(&self) -> BTreeMap<Vec<usize>, usize> {
        let mut m = BTreeMap::new();
        for r in self.rows() {
            *m.entry(r.to_vec()).or_insert(0) += 1;
        }
        m
    }

    pub fn write_csv<W: std::io::Write>(&self, structure: &Structure, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(self.columns.iter().map(|&c| structure.variable(c).name.as_str()))?;
        for r in self.rows() {
            wr.write_record(r.iter().map(|v| v.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(structure: &Structure, r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let columns = rd
            .headers()?
            .iter()
            .map(|h| structure.id_of(h.trim()))
            .collect::<Result<Vec<_>>>()?;
        let mut values = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != columns.len() {
                return Err(PbpError::InvalidInput("ragged CSV row".into()));
            }
            for f in rec.iter() {
                values.push(
                    f.trim()
                        .parse::<usize>()
                        .map_err(|_| PbpError::InvalidInput(format!("bad state `{f}` in dataset")))?,
                );
            }
        }
        let d = Dataset { columns, values };
        d.validate(structure)?;
        Ok(d)
    }
}

pub fn ancestral_sample(model: &GraphicalModel, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = rng_from_seed(seed);
    ancestral_sample_with(model, n, &mut rng)
}

/// Samples `n` joint configurations in topological order and keeps the observable columns.
pub fn ancestral_sample_with<R: Rng + ?Sized>(model: &GraphicalModel, n: usize, rng: &mut R) -> Result<Dataset> {
    if n == 0 {
        return Err(PbpError::InvalidInput("sample size must be at least 1".into()));
    }
    let s = model.structure();
    let order = s.topological_order()?;
    let columns = s.observables();
    let mut values = Vec::with_capacity(n * columns.len());
    let mut a = vec![0usize; s.len()];
    for _ in 0..n {
        for &v in &order {
            let k = s.cardinality(v);
            let mut row = 0;
            for &p in s.parents(v) {
                row = row * s.cardinality(p) + a[p];
            }
            let probs = &model.cpt(v)[row * k..(row + 1) * k];
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut x = k - 1;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    x = i;
                    break;
                }
            }
            // Rounding can leave `acc` just below 1; never pick a zero-probability tail state.
            while probs[x] == 0.0 && x > 0 {
                x -= 1;
            }
            a[v] = x;
        }
        values.extend(columns.iter().map(|&c| a[c]));
    }
    Ok(Dataset { columns, values })
}

/// Partial assignment of observable variables.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceMap(BTreeMap<usize, usize>);

impl EvidenceMap {
    pub fn new() -> Self {
        EvidenceMap(BTreeMap::new())
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        EvidenceMap(pairs.into_iter().collect())
    }

    pub fn insert(&mut self, var: usize, value: usize) {
        self.0.insert(var, value);
    }

    pub fn get(&self, var: usize) -> Option<usize> {
        self.0.get(&var).copied()
    }

    pub fn contains(&self, var: usize) -> bool {
        self.0.contains_key(&var)
    }

    pub fn remove(&mut self, var: usize) -> Option<usize> {
        self.0.remove(&var)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, structure: &Structure) -> Result<()> {
        for (k, v) in self.iter() {
            if k >= structure.len() {
                return Err(PbpError::InvalidInput(format!("evidence on unknown variable id {k}")));
            }
            let var = structure.variable(k);
            if !var.is_observable() {
                return Err(PbpError::InvalidInput(format!("evidence on latent variable {}", var.name)));
            }
            if v >= var.cardinality {
                return Err(PbpError::InvalidInput(format!("evidence value {v} out of range for {}", var.name)));
            }
        }
        Ok(())
    }

    /// Parses `NAME=state,NAME=state`.
    pub fn parse(structure: &Structure, text: &str) -> Result<Self> {
        let mut e = EvidenceMap::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, val) = part
                .split_once('=')
                .ok_or_else(|| PbpError::InvalidInput(format!("evidence item `{part}` is not NAME=STATE")))?;
            let id = structure.id_of(name.trim())?;
            let v = val
                .trim()
                .parse::<usize>()
                .map_err(|_| PbpError::InvalidInput(format!("bad evidence state `{val}`")))?;
            e.insert(id, v);
        }
        e.validate(structure)?;
        Ok(e)
    }

    pub fn consistent_with(&self, assignment: &[usize]) -> bool {
        self.iter().all(|(k, v)| assignment[k] == v)
    }

    /// Named view, used in result files.
    pub fn named(&self, structure: &Structure) -> BTreeMap<String, usize> {
        self.iter().map(|(k, v)| (structure.variable(k).name.clone(), v)).collect()
    }
}

/// Full joint over all variables, modes `Variable(0..n)` in id order.
pub fn brute_force_joint(model: &GraphicalModel) -> Result<NamedTensor> {
    brute_force_joint_capped(model, DEFAULT_JOINT_CAP)
}

pub fn brute_force_joint_capped(model: &GraphicalModel, cap: u128) -> Result<NamedTensor> {
    let s = model.structure();
    let states = s.joint_states();
    if states > cap {
        return Err(PbpError::CapExceeded { states, cap });
    }
    let modes: Vec<Mode> = s.variables().iter().map(|v| Mode::new(ModeLabel::Variable(v.id), v.cardinality)).collect();
    NamedTensor::from_fn(modes, |a| model.joint_probability(a))
}

/// Joint marginal of the listed variables (in the listed order) from a full joint.
pub fn marginal(joint: &NamedTensor, vars: &[usize]) -> Result<NamedTensor> {
    let drop: Vec<ModeLabel> = joint
        .labels()
        .into_iter()
        .filter(|l| !matches!(l, ModeLabel::Variable(v) if vars.contains(v)))
        .collect();
    let m = joint.sum_out(&drop)?;
    let order: Vec<ModeLabel> = vars.iter().map(|&v| ModeLabel::Variable(v)).collect();
    m.permuted(&order)
}

/// P[query | evidence] by summation over the brute-force joint.
pub fn enumeration_posterior(joint: &NamedTensor, evidence: &EvidenceMap, query: usize) -> Result<Vec<f64>> {
    let q = joint.extent(&ModeLabel::Variable(query))?;
    let extents = joint.extents();
    let labels = joint.labels();
    let qpos = joint.position(&ModeLabel::Variable(query)).unwrap();
    let ev: Vec<(usize, usize)> = evidence
        .iter()
        .map(|(k, v)| {
            labels
                .iter()
                .position(|l| l == &ModeLabel::Variable(k))
                .map(|p| (p, v))
                .ok_or_else(|| PbpError::MissingMode(ModeLabel::Variable(k)))
        })
        .collect::<Result<_>>()?;
    let mut post = vec![0.0; q];
    let mut i = 0;
    let data = joint.data();
    for_each_index(&extents, |idx| {
        if ev.iter().all(|&(p, v)| idx[p] == v) {
            post[idx[qpos]] += data[i];
        }
        i += 1;
    });
    let z: f64 = post.iter().sum();
    if z <= 0.0 {
        return Err(PbpError::ZeroEvidence);
    }
    post.iter_mut().for_each(|p| *p /= z);
    Ok(post)
}

/// P[evidence] by summation over the joint.
pub fn exact_evidence_probability(model: &GraphicalModel, evidence: &EvidenceMap) -> Result<f64> {
    evidence.validate(model.structure())?;
    let joint = brute_force_joint(model)?;
    let mut total = 0.0;
    let mut i = 0;
    let data = joint.data();
    for_each_index(&joint.extents(), |idx| {
        if evidence.consistent_with(idx) {
            total += data[i];
        }
        i += 1;
    });
    Ok(total)
}

/// Exact posterior `P[query | evidence]`.
///
/// Computed by enumeration over the brute-force joint and by junction-tree sum-product
/// with the known CPTs; the two must agree to 1e-10.
pub fn exact_posterior(model: &GraphicalModel, evidence: &EvidenceMap, query: usize) -> Result<Vec<f64>> {
    evidence.validate(model.structure())?;
    if query >= model.structure().len() {
        return Err(PbpError::InvalidInput(format!("unknown query variable id {query}")));
    }
    let joint = brute_force_joint(model)?;
    let by_enumeration = enumeration_posterior(&joint, evidence, query)?;
    let by_sum_product = crate::baselines::sum_product_exact(model, evidence, query)?;
    let gap = by_enumeration
        .iter()
        .zip(&by_sum_product)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if gap > 1e-10 {
        return Err(PbpError::Internal(format!("exact posterior paths disagree by {gap:e}")));
    }
    Ok(by_enumeration)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub cardinality: usize,
    pub observable: bool,
}

/// On-disk model description. `cpts` may be omitted for structure-only files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub variables: Vec<VariableSpec>,
    pub edges: Vec<[String; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpts: Option<BTreeMap<String, Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

impl ModelFile {
    pub fn structure(&self) -> Result<Structure> {
        let vars: Vec<(&str, usize, bool)> =
            self.variables.iter().map(|v| (v.name.as_str(), v.cardinality, v.observable)).collect();
        let edges: Vec<(&str, &str)> = self.edges.iter().map(|[p, c]| (p.as_str(), c.as_str())).collect();
        Structure::from_names(&vars, &edges)
    }

    pub fn model(&self) -> Result<GraphicalModel> {
        let s = self.structure()?;
        let cpts = self
            .cpts
            .as_ref()
            .ok_or_else(|| PbpError::InvalidModel("model file has no CPTs".into()))?;
        let mut tables = Vec::with_capacity(s.len());
        for v in s.variables() {
            tables.push(
                cpts.get(&v.name)
                    .cloned()
                    .ok_or_else(|| PbpError::InvalidModel(format!("missing CPT for {}", v.name)))?,
            );
        }
        GraphicalModel::new(s, tables)
    }

    pub fn from_structure(s: &Structure) -> Self {
        ModelFile {
            variables: s
                .variables()
                .iter()
                .map(|v| VariableSpec { name: v.name.clone(), cardinality: v.cardinality, observable: v.is_observable() })
                .collect(),
            edges: s
                .edges()
                .iter()
                .map(|&(p, c)| [s.variable(p).name.clone(), s.variable(c).name.clone()])
                .collect(),
            cpts: None,
            metadata: None,
        }
    }

    pub fn from_model(m: &GraphicalModel) -> Self {
        let mut f = Self::from_structure(m.structure());
        f.cpts = Some(
            m.structure()
                .variables()
                .iter()
                .map(|v| (v.name.clone(), m.cpt(v.id).to_vec()))
                .collect(),
        );
        f
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
