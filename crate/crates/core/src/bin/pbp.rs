use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pbp::experiment::{fig4_structure, run_experiment, ExperimentSpec};
use pbp::infer::{query_posterior, QueryResult};
use pbp::junction_tree::{LatentJunctionTree, DEFAULT_BETA_CAP};
use pbp::learn::{learn, LearnedParams, RegressionConfig};
use pbp::model::{ancestral_sample, random_model, Dataset, EvidenceMap, ModelFile};
use pbp::{PbpError, Result};

#[derive(Parser)]
#[command(name = "pbp", version, about = "Predictive belief propagation for discrete latent-variable models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw random CPTs for a structure file or a named preset.
    GenModel(GenModelArgs),
    /// Ancestral sampling; writes the observable columns as CSV.
    Sample(SampleArgs),
    /// Learn PBP parameters from a dataset.
    Learn(LearnArgs),
    /// Posterior of one variable given evidence, using learned parameters.
    Infer(InferArgs),
    /// Run a KL sweep described by a JSON spec file.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct GenModelArgs {
    /// Structure (or model) JSON; CPTs in it are ignored.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    structure: Option<PathBuf>,
    /// Built-in topology. Only `fig4` is known.
    #[arg(long)]
    preset: Option<String>,
    /// Cardinality of every variable of the preset.
    #[arg(long, default_value_t = 2)]
    cardinality: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LearnArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Stage-1 ridge penalty; defaults to 1e-3 * N.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Stage-2 ridge penalty; defaults to 1e-3 * N.
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_BETA_CAP)]
    beta_cap: usize,
    /// Recorded in the parameter metadata (the seed the data was drawn with).
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the latent junction tree as JSON here.
    #[arg(long)]
    dump_tree: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated `NAME=value` pairs, e.g. `G=1,H=0`.
    #[arg(long, default_value = "")]
    evidence: String,
    #[arg(long)]
    query: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    spec: PathBuf,
    /// Overrides the spec's CSV path; panels go next to it with a `.json` extension.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    beta_cap: Option<usize>,
    /// Replaces the spec's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

fn gen_model(a: GenModelArgs) -> Result<()> {
    let structure = match (&a.structure, a.preset.as_deref()) {
        (Some(path), _) => ModelFile::load(path)?.structure()?,
        (None, Some("fig4")) => fig4_structure(a.cardinality)?,
        (None, Some(other)) => return Err(PbpError::InvalidInput(format!("unknown preset `{other}`"))),
        (None, None) => return Err(PbpError::InvalidInput("need --structure or --preset".into())),
    };
    let model = random_model(&structure, a.seed);
    let mut file = ModelFile::from_model(&model);
    file.metadata = Some(serde_json::json!({ "seed": a.seed }));
    emit(a.out.as_deref(), &file.to_json()?)
}

fn sample(a: SampleArgs) -> Result<()> {
    let model = ModelFile::load(&a.model)?.model()?;
    let data = ancestral_sample(&model, a.n, a.seed)?;
    let mut buf = Vec::new();
    data.write_csv(model.structure(), &mut buf)?;
    match a.out {
        Some(p) => fs::write(p, buf)?,
        None => std::io::stdout().lock().write_all(&buf)?,
    }
    Ok(())
}

fn learn_cmd(a: LearnArgs) -> Result<()> {
    let structure = ModelFile::load(&a.model)?.structure()?;
    let data = Dataset::read_csv(&structure, fs::File::open(&a.data)?)?;
    let tree = LatentJunctionTree::build(&structure, a.beta_cap)?;
    for w in tree.warnings() {
        log::warn!("{w}");
    }
    if let Some(p) = &a.dump_tree {
        fs::write(p, serde_json::to_string_pretty(&tree.dump())?)?;
    }
    let d = RegressionConfig::scaled(data.len());
    let config = RegressionConfig::new(a.lambda1.unwrap_or(d.lambda1), a.lambda2.unwrap_or(d.lambda2))?;
    let mut params = learn(&tree, &data, &config)?;
    params.meta.seed = a.seed;
    log::info!("learned {} operators in {:.4}s", params.operators.len(), params.meta.train_seconds);
    emit(a.out.as_deref(), &params.to_json()?)
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    let structure = ModelFile::load(&a.model)?.structure()?;
    let params = LearnedParams::load(&a.params)?;
    let tree = LatentJunctionTree::build(&structure, params.meta.beta_cap)?;
    params.check_tree(&tree)?;
    let evidence = EvidenceMap::parse(&structure, &a.evidence)?;
    let query = structure.id_of(&a.query)?;
    let outcome = query_posterior(&tree, &params, &evidence, query)?;
    let result = QueryResult::new(&structure, &params, &evidence, query, outcome);
    emit(a.out.as_deref(), &result.to_json()?)
}

fn experiment_cmd(a: ExperimentArgs) -> Result<()> {
    let mut spec = ExperimentSpec::load(&a.spec)?;
    if let Some(out) = a.out {
        spec.out_json = Some(out.with_extension("json"));
        spec.out_csv = Some(out);
    }
    if a.lambda1.is_some() {
        spec.lambda1 = a.lambda1;
    }
    if a.lambda2.is_some() {
        spec.lambda2 = a.lambda2;
    }
    if let Some(cap) = a.beta_cap {
        spec.beta_cap = cap;
    }
    if let Some(seed) = a.seed {
        spec.seeds = vec![seed];
    }
    let truth = ModelFile::load(&spec.model)?.model()?;
    let output = run_experiment(&spec, &truth)?;
    let mut csv = Vec::new();
    output.write_csv(&mut csv)?;
    match &spec.out_csv {
        Some(p) => fs::write(p, &csv)?,
        None => std::io::stdout().lock().write_all(&csv)?,
    }
    if let Some(p) = &spec.out_json {
        fs::write(p, output.panels_json()?)?;
    }
    for (alg, n, seed, msg) in &output.failures {
        eprintln!("failed: {alg} N={n} seed={seed}: {msg}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenModel(a) => gen_model(a),
        Command::Sample(a) => sample(a),
        Command::Learn(a) => learn_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
