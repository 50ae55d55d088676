//! KL evaluation and experiment sweeps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{em_learn, Calibrator, EmConfig};
use crate::error::{PbpError, Result};
use crate::infer::Propagator;
use crate::junction_tree::{LatentJunctionTree, DEFAULT_BETA_CAP};
use crate::learn::{learn, RegressionConfig};
use crate::model::{
    ancestral_sample, exact_posterior, random_model, rng_from_seed, Dataset, EvidenceMap, GraphicalModel, Role, Structure,
    Variable,
};

/// Floor applied to estimated probabilities before taking ratios.
pub const KL_FLOOR: f64 = 1e-12;

/// `KL(p || q)` with `0 log(0/q) = 0` and `q` floored at [`KL_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(PbpError::InvalidInput(format!("KL between vectors of length {} and {}", p.len(), q.len())));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|&(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b.max(KL_FLOOR)).ln())
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlSummary {
    pub avg_kl: f64,
    /// Evidence realizations that were averaged.
    pub evaluated: usize,
    /// Realizations skipped for zero probability under the true model (or under the estimate).
    pub skipped: usize,
}

/// Every joint realization of the listed variables, first variable slowest.
pub fn realizations(cards: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = cards.iter().product();
    (0..total)
        .map(|mut i| {
            let mut v = vec![0; cards.len()];
            for k in (0..cards.len()).rev() {
                v[k] = i % cards[k];
                i /= cards[k];
            }
            v
        })
        .collect()
}

/// Average `KL(exact || estimate)` of the query posterior over all realizations of the
/// evidence variables. Realizations with zero true probability are skipped, as are those
/// where the estimator signals zero evidence.
pub fn average_kl<F>(truth: &GraphicalModel, query: usize, evidence_vars: &[usize], mut estimate: F) -> Result<KlSummary>
where
    F: FnMut(&EvidenceMap) -> Result<Vec<f64>>,
{
    let s = truth.structure();
    let cards: Vec<usize> = evidence_vars.iter().map(|&v| s.cardinality(v)).collect();
    let mut total = 0.0;
    let mut evaluated = 0;
    let mut skipped = 0;
    for values in realizations(&cards) {
        let ev = EvidenceMap::from_pairs(evidence_vars.iter().copied().zip(values));
        let exact = match exact_posterior(truth, &ev, query) {
            Ok(p) => p,
            Err(PbpError::ZeroEvidence) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        match estimate(&ev) {
            Ok(q) => {
                total += kl_divergence(&exact, &q)?;
                evaluated += 1;
            }
            Err(PbpError::ZeroEvidence) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let avg_kl = if evaluated > 0 { total / evaluated as f64 } else { f64::NAN };
    Ok(KlSummary { avg_kl, evaluated, skipped })
}

/// Built-in structure resembling the synthetic benchmark: a latent tree over binary
/// latents A, B, C, F with observables D, E and G..L. Query D given G, H, E.
pub fn fig4_structure(cardinality: usize) -> Result<Structure> {
    if cardinality < 2 {
        return Err(PbpError::InvalidInput(format!("cardinality {cardinality} must be at least 2")));
    }
    let names = ["A", "B", "C", "D", "E", "F", "G", "H", "I", "J", "K", "L"];
    let latent = ["A", "B", "C", "F"];
    let vars: Vec<(&str, usize, bool)> = names.iter().map(|&n| (n, cardinality, !latent.contains(&n))).collect();
    Structure::from_names(
        &vars,
        &[
            ("A", "B"),
            ("A", "C"),
            ("A", "E"),
            ("B", "F"),
            ("B", "G"),
            ("B", "K"),
            ("C", "D"),
            ("C", "J"),
            ("C", "L"),
            ("F", "H"),
            ("F", "I"),
        ],
    )
}

pub const FIG4_QUERY: &str = "D";
pub const FIG4_EVIDENCE: [&str; 3] = ["G", "H", "E"];

pub fn fig4_model(cardinality: usize, seed: u64) -> Result<GraphicalModel> {
    Ok(random_model(&fig4_structure(cardinality)?, seed))
}

/// Random latent tree: 1-3 binary latents joined in a tree, each with 1-3 observable
/// children of cardinality 2 or 3 (or all `observable_card` when given); at most 10
/// variables in total.
pub fn random_latent_tree(seed: u64, observable_card: Option<usize>) -> Result<Structure> {
    let mut rng = rng_from_seed(seed);
    let latents = rng.random_range(1..=3usize);
    let mut vars = Vec::new();
    let mut edges = Vec::new();
    for h in 0..latents {
        vars.push(Variable { id: h, name: format!("H{h}"), cardinality: 2, role: Role::Latent });
        if h > 0 {
            edges.push((rng.random_range(0..h), h));
        }
    }
    let budget = 10 - latents;
    let mut counts: Vec<usize> = (0..latents).map(|_| 1).collect();
    // a lone latent needs at least two observables
    if latents == 1 {
        counts[0] = 2;
    }
    let extra = rng.random_range(0..=(budget - counts.iter().sum::<usize>()).min(4));
    for _ in 0..extra {
        let h = rng.random_range(0..latents);
        if counts[h] < 3 {
            counts[h] += 1;
        }
    }
    for (h, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            let id = vars.len();
            let card = observable_card.unwrap_or_else(|| rng.random_range(2..=3));
            vars.push(Variable { id, name: format!("X{id}"), cardinality: card, role: Role::Observable });
            edges.push((h, id));
        }
    }
    Structure::new(vars, edges)
}

/// Random DAG over 3-10 variables with cardinalities 2-3, edges only from lower to higher
/// id, and at least two observables.
pub fn random_dag(seed: u64) -> Result<Structure> {
    let mut rng = rng_from_seed(seed);
    let n = rng.random_range(3..=10usize);
    let p = rng.random_range(0.15..0.5);
    let mut vars: Vec<Variable> = (0..n)
        .map(|id| Variable {
            id,
            name: format!("V{id}"),
            cardinality: rng.random_range(2..=3),
            role: if rng.random_bool(0.6) { Role::Observable } else { Role::Latent },
        })
        .collect();
    vars[n - 1].role = Role::Observable;
    vars[n - 2].role = Role::Observable;
    let mut edges = Vec::new();
    for j in 1..n {
        for i in 0..j {
            if rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    Structure::new(vars, edges)
}

/// Sweep description, read from JSON. Variables are referred to by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Model file; relative paths resolve against the spec file's directory.
    pub model: PathBuf,
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    pub query: String,
    pub evidence: Vec<String>,
    pub out_csv: Option<PathBuf>,
    pub out_json: Option<PathBuf>,
    #[serde(default)]
    pub lambda1: Option<f64>,
    #[serde(default)]
    pub lambda2: Option<f64>,
    #[serde(default = "default_beta_cap")]
    pub beta_cap: usize,
    #[serde(default)]
    pub em: Option<EmConfig>,
}

fn default_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::Pbp, Algorithm::Em]
}

fn default_beta_cap() -> usize {
    DEFAULT_BETA_CAP
}

/// Default training-size grid.
pub fn default_sizes() -> Vec<usize> {
    vec![1 << 10, 1 << 12, 1 << 14, 1 << 16, 1 << 17]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Pbp,
    Em,
    /// The exact posterior compared with itself; validates the harness.
    Exact,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Pbp => "pbp",
            Algorithm::Em => "em",
            Algorithm::Exact => "exact",
        }
    }
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let mut spec: ExperimentSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if spec.model.is_relative() {
            if let Some(dir) = path.parent() {
                spec.model = dir.join(&spec.model);
            }
        }
        Ok(spec)
    }

    pub fn validate(&self, structure: &Structure) -> Result<(usize, Vec<usize>)> {
        if self.sizes.is_empty() || self.sizes[0] == 0 || self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PbpError::InvalidInput("training sizes must be positive and strictly ascending".into()));
        }
        if self.seeds.is_empty() {
            return Err(PbpError::InvalidInput("at least one seed is required".into()));
        }
        let observable = |name: &str| -> Result<usize> {
            let id = structure.id_of(name)?;
            if !structure.variable(id).is_observable() {
                return Err(PbpError::InvalidInput(format!("variable `{name}` is latent")));
            }
            Ok(id)
        };
        let q = observable(&self.query)?;
        let ev = self.evidence.iter().map(|n| observable(n)).collect::<Result<Vec<_>>>()?;
        if ev.contains(&q) {
            return Err(PbpError::InvalidInput("the query variable cannot be an evidence variable".into()));
        }
        Ok((q, ev))
    }

    pub fn regression(&self, n: usize) -> RegressionConfig {
        let d = RegressionConfig::scaled(n);
        RegressionConfig { lambda1: self.lambda1.unwrap_or(d.lambda1), lambda2: self.lambda2.unwrap_or(d.lambda2) }
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub algorithm: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
    pub avg_kl: f64,
    pub skipped: usize,
    pub train_seconds: f64,
}

/// Two-panel summary: mean KL and mean training time per algorithm and size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panels {
    pub quality: Vec<PanelPoint>,
    pub time: Vec<PanelPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelPoint {
    pub algorithm: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub panels: Panels,
    /// Per-row failures as `(algorithm, N, seed, message)`.
    pub failures: Vec<(String, usize, u64, String)>,
}

impl ExperimentOutput {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn panels_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.panels)?)
    }
}

/// Trains and evaluates one algorithm on one dataset.
pub fn evaluate_cell(
    algorithm: Algorithm,
    truth: &GraphicalModel,
    tree: &LatentJunctionTree,
    data: &Dataset,
    query: usize,
    evidence_vars: &[usize],
    regression: &RegressionConfig,
    em: &EmConfig,
) -> Result<(KlSummary, f64)> {
    match algorithm {
        Algorithm::Pbp => {
            let params = learn(tree, data, regression)?;
            let prop = Propagator::new(tree, &params)?;
            let kl = average_kl(truth, query, evidence_vars, |ev| Ok(prop.query_posterior(ev, query)?.posterior))?;
            Ok((kl, params.meta.train_seconds))
        }
        Algorithm::Em => {
            let fit = em_learn(truth.structure(), data, em)?;
            let cal = Calibrator::new(truth.structure())?;
            let pots = cal.potentials(&fit.model);
            let card = truth.structure().cardinality(query);
            let kl = average_kl(truth, query, evidence_vars, |ev| cal.posterior(&pots, ev, query, card))?;
            Ok((kl, fit.train_seconds))
        }
        Algorithm::Exact => {
            let kl = average_kl(truth, query, evidence_vars, |ev| exact_posterior(truth, ev, query))?;
            Ok((kl, 0.0))
        }
    }
}

/// Runs the sweep over sizes, seeds and algorithms. A failing cell is reported and
/// recorded with a NaN KL; the sweep continues.
pub fn run_experiment(spec: &ExperimentSpec, truth: &GraphicalModel) -> Result<ExperimentOutput> {
    let s = truth.structure();
    let (query, evidence_vars) = spec.validate(s)?;
    let tree = LatentJunctionTree::build(s, spec.beta_cap)?;
    let em = spec.em.unwrap_or_default();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &n in &spec.sizes {
        for &seed in &spec.seeds {
            let data = ancestral_sample(truth, n, seed)?;
            let em_cfg = EmConfig { seed, ..em };
            for &alg in &spec.algorithms {
                let (avg_kl, skipped, secs) =
                    match evaluate_cell(alg, truth, &tree, &data, query, &evidence_vars, &spec.regression(n), &em_cfg) {
                        Ok((kl, secs)) => (kl.avg_kl, kl.skipped, secs),
                        Err(e) => {
                            log::error!("{} N={n} seed={seed}: {e}", alg.name());
                            failures.push((alg.name().to_string(), n, seed, e.to_string()));
                            (f64::NAN, 0, f64::NAN)
                        }
                    };
                log::info!("{} N={n} seed={seed}: avg KL {avg_kl:.6e}, {secs:.3}s", alg.name());
                rows.push(ResultRow { algorithm: alg.name().into(), n, seed, avg_kl, skipped, train_seconds: secs });
            }
        }
    }
    let panels = summarize(&rows);
    Ok(ExperimentOutput { rows, panels, failures })
}

/// Means over seeds per (algorithm, N), ignoring failed cells.
pub fn summarize(rows: &[ResultRow]) -> Panels {
    let mut acc: BTreeMap<(String, usize), (f64, f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.avg_kl.is_finite()) {
        let e = acc.entry((r.algorithm.clone(), r.n)).or_insert((0.0, 0.0, 0));
        e.0 += r.avg_kl;
        e.1 += r.train_seconds;
        e.2 += 1;
    }
    let mut quality = Vec::new();
    let mut time = Vec::new();
    for ((alg, n), (kl, secs, k)) in acc {
        quality.push(PanelPoint { algorithm: alg.clone(), n, value: kl / k as f64 });
        time.push(PanelPoint { algorithm: alg, n, value: secs / k as f64 });
    }
    Panels { quality, time }
}
