//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each, and exits
//! non-zero if any criterion fails. Built with `harness = false` so the verdict lines
//! are always visible under `cargo test`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use pbp::baselines::{em_learn, sum_product_exact, Calibrator, EmConfig};
use pbp::experiment::{average_kl, fig4_model, random_dag, random_latent_tree, FIG4_EVIDENCE, FIG4_QUERY};
use pbp::graph::junction_tree_of;
use pbp::infer::{build_leaf_tensors, Propagator};
use pbp::junction_tree::{LatentJunctionTree, DEFAULT_BETA_CAP};
use pbp::learn::{learn, learn_population, LearnedParams, RegressionConfig};
use pbp::linalg::{default_rtol, pinv};
use pbp::model::{ancestral_sample, exact_posterior, random_model, EvidenceMap, GraphicalModel, Role, Structure, Variable};
use pbp::tensor::{contract, hadamard, mode_multiply, outer_product};
use pbp::{Mode, ModeLabel};
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// Seeds of the random models used by the population criteria.
const MODEL_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
/// The fig4 preset instance shared by the finite-sample criteria.
const FIG4_SEED: u64 = 1;

fn population(model: &GraphicalModel) -> (LatentJunctionTree, LearnedParams) {
    let tree = LatentJunctionTree::build(model.structure(), DEFAULT_BETA_CAP).unwrap();
    let params = learn_population(&tree, model, &RegressionConfig::unregularized()).unwrap();
    (tree, params)
}

fn fig4_task(model: &GraphicalModel) -> (usize, Vec<usize>) {
    let s = model.structure();
    let q = s.id_of(FIG4_QUERY).unwrap();
    let ev = FIG4_EVIDENCE.iter().map(|n| s.id_of(n).unwrap()).collect();
    (q, ev)
}

fn pbp_kl(model: &GraphicalModel, tree: &LatentJunctionTree, params: &LearnedParams) -> f64 {
    let (q, ev) = fig4_task(model);
    let prop = Propagator::new(tree, params).unwrap();
    average_kl(model, q, &ev, |e| Ok(prop.query_posterior(e, q)?.posterior)).unwrap().avg_kl
}

fn population_consistency() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut pairs = 0usize;
    let mut cross_checked = 0usize;
    for seed in MODEL_SEEDS {
        let s = random_latent_tree(seed, None).unwrap();
        let m = random_model(&s, seed);
        let (tree, params) = population(&m);
        let prop = Propagator::new(&tree, &params).unwrap();
        let cal = Calibrator::new(&s).unwrap();
        let pots = cal.potentials(&m);
        let obs = s.observables();
        for &q in &obs {
            let others: Vec<usize> = obs.iter().copied().filter(|&v| v != q).collect();
            for ev in all_partial_evidence(&s, &others) {
                let exact = cal.posterior(&pots, &ev, q, s.cardinality(q)).unwrap();
                let got = prop.query_posterior(&ev, q).unwrap().posterior;
                worst = worst.max(max_abs(&exact, &got));
                pairs += 1;
                if ev.len() == others.len() {
                    // Complete evidence: also compare with the enumeration-backed oracle.
                    worst = worst.max(max_abs(&exact_posterior(&m, &ev, q).unwrap(), &got));
                    cross_checked += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-6 && secs <= 120.0,
        format!("max abs error {worst:.2e} over {pairs} (evidence, query) pairs, {cross_checked} also by enumeration; {secs:.1}s"),
    )
}

fn finite_sample_convergence() -> Verdict {
    let start = Instant::now();
    let truth = fig4_model(2, FIG4_SEED).unwrap();
    let tree = LatentJunctionTree::build(truth.structure(), DEFAULT_BETA_CAP).unwrap();
    let kl_at = |n: usize| {
        let data = ancestral_sample(&truth, n, 1).unwrap();
        let params = learn(&tree, &data, &RegressionConfig::scaled(n)).unwrap();
        pbp_kl(&truth, &tree, &params)
    };
    let small = kl_at(1 << 10);
    let large = kl_at(1 << 17);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        large <= 0.02 && large <= small / 5.0 && secs <= 600.0,
        format!("avg KL {small:.3e} at N=2^10, {large:.3e} at N=2^17 (ratio {:.3}); {secs:.1}s", large / small),
    )
}

fn speed_against_em() -> Verdict {
    let start = Instant::now();
    let truth = fig4_model(2, FIG4_SEED).unwrap();
    let s = truth.structure();
    let (q, ev) = fig4_task(&truth);
    let tree = LatentJunctionTree::build(s, DEFAULT_BETA_CAP).unwrap();
    let n = 10_000;
    let data_seeds = [1u64, 2, 3];
    let (mut pbp_secs, mut em_secs, mut pbp_kl_sum, mut em_kl_sum) = (0.0, 0.0, 0.0, 0.0);
    let mut per_seed = Vec::new();
    for d in data_seeds {
        let data = ancestral_sample(&truth, n, d).unwrap();
        let params = learn(&tree, &data, &RegressionConfig::scaled(n)).unwrap();
        let fit = em_learn(s, &data, &EmConfig { seed: d, ..EmConfig::default() }).unwrap();
        let kp = pbp_kl(&truth, &tree, &params);
        let ke = average_kl(&truth, q, &ev, |e| sum_product_exact(&fit.model, e, q)).unwrap().avg_kl;
        pbp_secs += params.meta.train_seconds;
        em_secs += fit.train_seconds;
        pbp_kl_sum += kp;
        em_kl_sum += ke;
        per_seed.push(format!("{:.2}", kp / ke));
    }
    let k = data_seeds.len() as f64;
    let (pbp_kl, em_kl) = (pbp_kl_sum / k, em_kl_sum / k);
    let faster = pbp_secs < em_secs;
    let close = pbp_kl <= 2.0 * em_kl;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        faster && close && secs <= 900.0,
        format!(
            "N=1e4 over {} datasets: train {pbp_secs:.4}s vs EM {em_secs:.2}s ({}); avg KL {pbp_kl:.3e} vs EM {em_kl:.3e}, ratio {:.2} ({}, per dataset [{}]); {secs:.1}s",
            data_seeds.len(),
            if faster { "faster" } else { "NOT faster" },
            pbp_kl / em_kl,
            if close { "within 2x" } else { "NOT within 2x" },
            per_seed.join(", "),
        ),
    )
}

/// Chain of three latents; the middle separator has exactly one child separator.
fn three_separator_structure() -> Structure {
    Structure::from_names(
        &[("H1", 2, false), ("H2", 2, false), ("H3", 2, false), ("X1", 3, true), ("X3", 2, true), ("X4", 3, true)],
        &[("H1", "H2"), ("H2", "H3"), ("H1", "X1"), ("H3", "X3"), ("H3", "X4"), ("X3", "X4")],
    )
    .unwrap()
}

fn operator_identity() -> Verdict {
    let s = three_separator_structure();
    let m = random_model(&s, 11);
    let (err, checks, seps) = operator_identity_error(&m);
    verdict(
        seps == 3 && checks > 0 && err <= 1e-8,
        format!("{seps} separators, {checks} outside assignments, max error {err:.2e}"),
    )
}

fn structural_invariants() -> Verdict {
    let start = Instant::now();
    let mut failures = Vec::new();
    for seed in 0..100 {
        let tree = junction_tree_of(&random_dag(seed).unwrap()).unwrap();
        if !is_forest(&tree) || !rip_by_paths(&tree) {
            failures.push(format!("running intersection, dag {seed}"));
        }
    }
    let mut r = rng(77);
    let mut tensor_err = 0.0f64;
    let var = ModeLabel::Variable;
    for _ in 0..200 {
        let e: Vec<usize> = (0..5).map(|_| r.random_range(1..4)).collect();
        let a = random_tensor(&mut r, vec![Mode::new(var(0), e[0]), Mode::new(var(1), e[1]), Mode::new(var(2), e[2])]);
        let b = random_tensor(&mut r, vec![Mode::new(var(3), e[3]), Mode::new(var(1), e[1]), Mode::new(var(0), e[0])]);
        let c = random_tensor(&mut r, vec![Mode::new(var(2), e[2]), Mode::new(var(1), e[1]), Mode::new(var(0), e[0])]);
        let mat = random_tensor(&mut r, vec![Mode::new(var(4), e[4]), Mode::new(var(1), e[1])]);
        let free = random_tensor(&mut r, vec![Mode::new(var(5), e[4]), Mode::new(var(6), e[3])]);
        let labels = [var(0), var(1)];
        tensor_err = tensor_err
            .max(contract(&a, &b, &labels).unwrap().max_abs_diff(&naive_contract(&a, &b, &labels)).unwrap())
            .max(outer_product(&a, &free).unwrap().max_abs_diff(&naive_outer(&a, &free)).unwrap())
            .max(hadamard(&a, &c).unwrap().max_abs_diff(&naive_hadamard(&a, &c)).unwrap());
        let mm = mode_multiply(&a, &mat, &var(1)).unwrap();
        let slow = naive_contract(&a, &mat, &[var(1)]).permuted(&mm.labels()).unwrap();
        tensor_err = tensor_err.max(mm.max_abs_diff(&slow).unwrap());
    }
    if tensor_err > 1e-12 {
        failures.push(format!("tensor ops differ from loops by {tensor_err:.2e}"));
    }
    let mut penrose = 0.0f64;
    for _ in 0..100 {
        let rows = r.random_range(1..=64);
        let cols = r.random_range(1..=64);
        let rank = r.random_range(1..=rows.min(cols));
        let a = random_low_rank(&mut r, rows, cols, rank);
        penrose = penrose.max(penrose_residual(&a, &pinv(&a, default_rtol(rows, cols)).unwrap()));
    }
    if penrose > 1e-9 {
        failures.push(format!("Penrose residual {penrose:.2e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        failures.is_empty() && secs <= 60.0,
        format!(
            "100 junction trees; tensor ops max diff {tensor_err:.2e}; Penrose max residual {penrose:.2e}; {secs:.1}s{}",
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
        ),
    )
}

fn em_sanity() -> Verdict {
    let mut worst_drop = 0.0f64;
    let mut steps = 0;
    let mut cases: Vec<(Structure, GraphicalModel)> = vec![{
        let m = fig4_model(2, FIG4_SEED).unwrap();
        (m.structure().clone(), m)
    }];
    for seed in MODEL_SEEDS.iter().take(3) {
        let s = random_latent_tree(*seed, None).unwrap();
        let m = random_model(&s, *seed);
        cases.push((s, m));
    }
    for (s, m) in &cases {
        let data = ancestral_sample(m, 2000, 3).unwrap();
        let fit = em_learn(s, &data, &EmConfig::default()).unwrap();
        for t in &fit.traces {
            for w in t.windows(2) {
                worst_drop = worst_drop.max(w[0] - w[1]);
                steps += 1;
            }
        }
    }
    let monotone = worst_drop <= 1e-9;

    let mut exact = true;
    for seed in 0..5 {
        let dag = random_dag(seed).unwrap();
        let vars: Vec<Variable> = dag.variables().iter().map(|v| Variable { role: Role::Observable, ..v.clone() }).collect();
        let s = Structure::new(vars, dag.edges().to_vec()).unwrap();
        let m = random_model(&s, seed);
        let data = ancestral_sample(&m, 500, seed).unwrap();
        let fit = em_learn(&s, &data, &EmConfig { restarts: 2, ..EmConfig::default() }).unwrap();
        for v in 0..s.len() {
            let k = s.cardinality(v);
            let mut counts = vec![0.0; s.cpt_len(v)];
            for row in data.rows() {
                let parent_index = s.parents(v).iter().fold(0, |acc, &p| acc * s.cardinality(p) + row[p]);
                counts[parent_index * k + row[v]] += 1.0;
            }
            let expected: Vec<f64> = counts
                .chunks(k)
                .flat_map(|c| {
                    let total: f64 = c.iter().sum();
                    c.iter().map(move |&x| if total > 0.0 { x / total } else { 1.0 / k as f64 }).collect::<Vec<_>>()
                })
                .collect();
            exact &= fit.model.cpt(v) == expected.as_slice();
        }
    }
    verdict(
        monotone && exact,
        format!(
            "{steps} EM steps over {} restarts, largest log-likelihood drop {worst_drop:.2e}; fully observed EM {} count normalization",
            cases.len() * EmConfig::default().restarts,
            if exact { "equals" } else { "DIFFERS from" }
        ),
    )
}

fn evidence_normalization() -> Verdict {
    let mut models: Vec<GraphicalModel> = MODEL_SEEDS
        .iter()
        .map(|&seed| random_model(&random_latent_tree(seed, None).unwrap(), seed))
        .collect();
    models.push(fig4_model(2, FIG4_SEED).unwrap());
    let mut worst = 0.0f64;
    let mut details = Vec::new();
    for m in &models {
        let s = m.structure();
        let obs = s.observables();
        let cards: Vec<usize> = obs.iter().map(|&v| s.cardinality(v)).collect();
        let states: usize = cards.iter().product();
        assert!(states <= 1 << 12, "model has {states} observable states");
        let (tree, params) = population(m);
        let prop = Propagator::new(&tree, &params).unwrap();
        let total: f64 = odometer(&cards)
            .into_iter()
            .map(|x| prop.evidence_probability(&EvidenceMap::from_pairs(obs.iter().copied().zip(x))).unwrap().0)
            .sum();
        worst = worst.max((total - 1.0).abs());
        details.push(format!("{states}"));
    }
    verdict(
        worst <= 1e-6,
        format!("{} models (observable states {}), max |sum - 1| = {worst:.2e}", models.len(), details.join("/")),
    )
}

fn leaf_tensor_identity() -> Verdict {
    let mut structures: Vec<Structure> = MODEL_SEEDS.iter().map(|&s| random_latent_tree(s, None).unwrap()).collect();
    structures.push(fig4_model(2, FIG4_SEED).unwrap().structure().clone());
    structures.push(three_separator_structure());
    let mut leaves = 0;
    let mut bad = Vec::new();
    for (i, s) in structures.iter().enumerate() {
        let tree = LatentJunctionTree::build(s, DEFAULT_BETA_CAP).unwrap();
        for (sep, leaf) in build_leaf_tensors(&tree).unwrap() {
            leaves += 1;
            let row = [ModeLabel::Separator(sep)];
            let (phi, _, _) = leaf.phi.to_matrix(&row).unwrap();
            let vars: Vec<ModeLabel> = leaf.phi.labels()[1..].to_vec();
            let (phi_pinv, _, _) = leaf.phi_pinv.to_matrix(&vars).unwrap();
            let one_hot = phi.iter().all(|&x| x == 0.0 || x == 1.0)
                && phi.column_iter().all(|c| c.iter().filter(|&&x| x == 1.0).count() == 1)
                && phi.row_iter().all(|r| r.iter().filter(|&&x| x == 1.0).count() == 1);
            let id_left = &phi_pinv * &phi == nalgebra::DMatrix::identity(phi.ncols(), phi.ncols());
            let id_right = &phi * &phi_pinv == nalgebra::DMatrix::identity(phi.nrows(), phi.nrows());
            if !(one_hot && id_left && id_right) {
                bad.push(format!("structure {i} separator {sep}"));
            }
        }
    }
    verdict(
        bad.is_empty() && leaves > 0,
        format!(
            "{leaves} leaf tensors are one-hot reshapings with exact identity products{}",
            if bad.is_empty() { String::new() } else { format!("; violations: {}", bad.join(", ")) }
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("population consistency", population_consistency),
        ("finite-sample convergence", finite_sample_convergence),
        ("speed and quality against EM", speed_against_em),
        ("operator identity", operator_identity),
        ("structural invariants", structural_invariants),
        ("EM sanity", em_sanity),
        ("evidence-probability normalization", evidence_normalization),
        ("leaf-tensor identity", leaf_tensor_identity),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        if !v.pass {
            failed += 1;
        }
        println!("{} criterion {} ({name}): {}", if v.pass { "PASS" } else { "FAIL" }, i + 1, v.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
