use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pbp::infer::{query_posterior, QueryResult};
use pbp::junction_tree::LatentJunctionTree;
use pbp::learn::LearnedParams;
use pbp::model::{EvidenceMap, ModelFile};
use tempfile::TempDir;

fn pbp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pbp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pbp(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Model, 3000-row dataset and learned parameters in a fresh directory.
fn pipeline() -> (TempDir, PathBuf) {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().to_path_buf();
    ok(&d, &["gen-model", "--preset", "fig4", "--seed", "3", "--out", "m.json"]);
    ok(&d, &["sample", "--model", "m.json", "--n", "3000", "--seed", "5", "--out", "d.csv"]);
    ok(&d, &["learn", "--model", "m.json", "--data", "d.csv", "--seed", "5", "--dump-tree", "t.json", "--out", "p.json"]);
    (tmp, d)
}

#[test]
fn gen_model_preset_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let a = ok(d, &["gen-model", "--preset", "fig4", "--seed", "9"]);
    let b = ok(d, &["gen-model", "--preset", "fig4", "--seed", "9"]);
    let c = ok(d, &["gen-model", "--preset", "fig4", "--seed", "10"]);
    assert_eq!(a, b);
    assert_ne!(a, c);
    let f: ModelFile = serde_json::from_str(&a).unwrap();
    let latent: Vec<&str> = f.variables.iter().filter(|v| !v.observable).map(|v| v.name.as_str()).collect();
    assert_eq!(latent, ["A", "B", "C", "F"]);
    assert_eq!(f.variables.len(), 12);
    assert!(f.variables.iter().all(|v| v.cardinality == 2));
    f.model().unwrap();

    let tern: ModelFile = serde_json::from_str(&ok(d, &["gen-model", "--preset", "fig4", "--cardinality", "3"])).unwrap();
    assert!(tern.variables.iter().all(|v| v.cardinality == 3));
}

#[test]
fn gen_model_rejects_bad_input() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    assert_eq!(pbp(d, &["gen-model", "--preset", "fig5"]).status.code(), Some(2));
    fs::write(d.join("bad.json"), r#"{"variables":[{"name":"X","cardinality":2,"observable":true}],"edges":[["X","Y"]]}"#).unwrap();
    assert_eq!(pbp(d, &["gen-model", "--structure", "bad.json"]).status.code(), Some(2));
    fs::write(d.join("s.json"), r#"{"variables":[{"name":"H","cardinality":2,"observable":false},{"name":"X","cardinality":3,"observable":true}],"edges":[["H","X"]]}"#).unwrap();
    let f: ModelFile = serde_json::from_str(&ok(d, &["gen-model", "--structure", "s.json", "--seed", "1"])).unwrap();
    assert_eq!(f.cpts.unwrap()["X"].len(), 6);
}

#[test]
fn sample_writes_observable_columns() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["gen-model", "--preset", "fig4", "--seed", "1", "--out", "m.json"]);
    let a = ok(d, &["sample", "--model", "m.json", "--n", "250", "--seed", "4"]);
    let b = ok(d, &["sample", "--model", "m.json", "--n", "250", "--seed", "4"]);
    assert_eq!(a, b);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "D,E,G,H,I,J,K,L");
    assert_eq!(lines.len(), 251);
    assert_ne!(a, ok(d, &["sample", "--model", "m.json", "--n", "250", "--seed", "5"]));
}

#[test]
fn learn_writes_loadable_params() {
    let (_tmp, d) = pipeline();
    let params = LearnedParams::load(&d.join("p.json")).unwrap();
    assert!(params.meta.train_seconds > 0.0);
    assert_eq!(params.meta.n, Some(3000));
    assert_eq!(params.meta.seed, Some(5));
    assert!((params.meta.lambda1 - 3.0).abs() < 1e-12);
    let structure = ModelFile::load(&d.join("m.json")).unwrap().structure().unwrap();
    let tree = LatentJunctionTree::build(&structure, params.meta.beta_cap).unwrap();
    assert_eq!(params.meta.tree_hash, tree.hash());
    let dump: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("t.json")).unwrap()).unwrap();
    assert_eq!(dump, serde_json::to_value(tree.dump()).unwrap());

    ok(&d, &["learn", "--model", "m.json", "--data", "d.csv", "--out", "p2.json"]);
    assert_eq!(LearnedParams::load(&d.join("p2.json")).unwrap().meta.tree_hash, params.meta.tree_hash);
}

#[test]
fn learn_rejects_mismatched_dataset() {
    let (_tmp, d) = pipeline();
    fs::write(d.join("bad.csv"), "D,E,Q\n0,1,0\n").unwrap();
    let out = pbp(&d, &["learn", "--model", "m.json", "--data", "bad.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(pbp(&d, &["learn", "--model", "m.json", "--data", "d.csv", "--lambda1", "-1"]).status.code(), Some(2));
}

#[test]
fn infer_matches_library() {
    let (_tmp, d) = pipeline();
    let text = ok(&d, &["infer", "--params", "p.json", "--model", "m.json", "--evidence", "G=1,H=0,E=1", "--query", "D"]);
    let got: QueryResult = serde_json::from_str(&text).unwrap();
    assert!((got.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let structure = ModelFile::load(&d.join("m.json")).unwrap().structure().unwrap();
    let params = LearnedParams::load(&d.join("p.json")).unwrap();
    let tree = LatentJunctionTree::build(&structure, params.meta.beta_cap).unwrap();
    let ev = EvidenceMap::parse(&structure, "G=1,H=0,E=1").unwrap();
    let q = structure.id_of("D").unwrap();
    let lib = QueryResult::new(&structure, &params, &ev, q, query_posterior(&tree, &params, &ev, q).unwrap());
    assert_eq!(text.trim_end(), lib.to_json().unwrap());
}

#[test]
fn infer_with_observed_query_is_one_hot() {
    let (_tmp, d) = pipeline();
    let text = ok(&d, &["infer", "--params", "p.json", "--model", "m.json", "--evidence", "D=1,G=0", "--query", "D"]);
    let got: QueryResult = serde_json::from_str(&text).unwrap();
    assert_eq!(got.posterior, vec![0.0, 1.0]);
}

#[test]
fn infer_rejects_tree_mismatch() {
    let (_tmp, d) = pipeline();
    let mut params = LearnedParams::load(&d.join("p.json")).unwrap();
    params.meta.tree_hash = "0".repeat(64);
    fs::write(d.join("p_bad.json"), params.to_json().unwrap()).unwrap();
    let out = pbp(&d, &["infer", "--params", "p_bad.json", "--model", "m.json", "--query", "D"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"));

    ok(&d, &["gen-model", "--preset", "fig4", "--cardinality", "3", "--out", "m3.json"]);
    let out = pbp(&d, &["infer", "--params", "p.json", "--model", "m3.json", "--query", "D"]);
    assert_eq!(out.status.code(), Some(2));
    let out = pbp(&d, &["infer", "--params", "p.json", "--model", "m.json", "--query", "A", "--evidence", "D=7"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn experiment_emits_rows_and_panels() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["gen-model", "--preset", "fig4", "--seed", "1", "--out", "m.json"]);
    fs::write(
        d.join("spec.json"),
        r#"{"model":"m.json","sizes":[512,2048],"seeds":[1,2],"algorithms":["pbp","exact","em"],
            "query":"D","evidence":["G","H","E"],"out_csv":"r.csv","out_json":"r.json",
            "em":{"restarts":2,"max_iterations":50,"tolerance":1e-6,"seed":0}}"#,
    )
    .unwrap();
    ok(d, &["experiment", "spec.json"]);
    let csv = fs::read_to_string(d.join("r.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "algorithm,N,seed,avg_kl,skipped,train_seconds");
    assert_eq!(lines.len(), 1 + 2 * 2 * 3);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        let kl: f64 = f[3].parse().unwrap();
        if f[0] == "exact" {
            assert_eq!(kl, 0.0);
        } else {
            assert!(kl.is_finite() && kl >= 0.0);
        }
    }
    let panels: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(panels["quality"].as_array().unwrap().len(), 6);
    assert_eq!(panels["time"].as_array().unwrap().len(), 6);

    // Everything but the timings repeats under the same seeds.
    ok(d, &["experiment", "spec.json", "--out", "again.csv"]);
    let strip = |s: &str| -> Vec<String> { s.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect() };
    assert_eq!(strip(&csv), strip(&fs::read_to_string(d.join("again.csv")).unwrap()));
    assert!(d.join("again.json").exists());
}

#[test]
fn experiment_rejects_bad_spec() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["gen-model", "--preset", "fig4", "--out", "m.json"]);
    fs::write(d.join("s1.json"), r#"{"model":"m.json","sizes":[100,50],"seeds":[1],"query":"D","evidence":["G"]}"#).unwrap();
    assert_eq!(pbp(d, &["experiment", "s1.json"]).status.code(), Some(2));
    fs::write(d.join("s2.json"), r#"{"model":"m.json","sizes":[100],"seeds":[1],"query":"A","evidence":["G"]}"#).unwrap();
    assert_eq!(pbp(d, &["experiment", "s2.json"]).status.code(), Some(2));
}
