//! `advreg`: reproducible runs over the adversarial-regularization library.
//! Every command writes its artifact plus a JSON run manifest; the manifest
//! is written even when the command fails, with the failure cause.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use advreg_core::eval::{
    distribution_divergence, ensembles, evaluate, lambda_sweep, predict_distributions,
    qonly_probe, sweep_table, ProbeConfig,
};
use advreg_core::harness::{train, TrainConfig};
use advreg_core::models::{ModelBundle, ModelDims};
use advreg_core::synthcp::{default_cp_spec, generate_split, Dataset, Split, WorldSpec};
use advreg_core::Error;

#[derive(Parser)]
#[command(name = "advreg", version, about = "adversarial regularization experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Materialize a dataset split from a world spec
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint plus an epoch trace
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Train a question-only probe on frozen encodings
    Probe(ProbeArgs),
    /// Train and evaluate across a (lambda_q, lambda_h) grid
    Sweep(SweepArgs),
    /// Oracle and mean ensembles of two checkpoints
    Ensemble(EnsembleArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// World spec TOML; omit to use the built-in benchmark world
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Seed for the built-in world's tables (ignored with --spec)
    #[arg(long, default_value_t = 0)]
    world_seed: u64,
    #[arg(long)]
    split: Split,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config TOML (see `TrainFile` in the README)
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    train_data: PathBuf,
    /// Checkpoint output path; the epoch trace lands next to it as .trace.tsv
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed when given
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// World spec TOML; when given, prior-divergence fields are filled in
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    train_data: PathBuf,
    /// Extra datasets to score the trained probe on
    #[arg(long)]
    eval_data: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    train_data: PathBuf,
    #[arg(long)]
    test_data: PathBuf,
    /// Comma-separated lambda_q grid values
    #[arg(long, value_delimiter = ',')]
    grid_lq: Vec<f64>,
    /// Comma-separated lambda_h grid values
    #[arg(long, value_delimiter = ',')]
    grid_lh: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Also train a question-only probe per run (slower)
    #[arg(long)]
    probe: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long)]
    checkpoint_a: PathBuf,
    #[arg(long)]
    checkpoint_b: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// On-disk training config: the harness config plus an optional guard tying
/// the run to one world spec.
#[derive(Debug, Serialize, Deserialize)]
struct TrainFile {
    /// Refuse to train if the dataset header's spec hash differs
    expect_spec_hash: Option<String>,
    #[serde(flatten)]
    train: TrainConfig,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    invocation: Vec<String>,
    config_path: Option<String>,
    config_echo: Option<toml::Value>,
    seed: Option<u64>,
    artifacts: Vec<String>,
    tool_version: String,
    timestamp: String,
    status: String,
    error: Option<String>,
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

struct Outcome {
    artifacts: Vec<PathBuf>,
    config_path: Option<PathBuf>,
    config_echo: Option<toml::Value>,
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, out) = match &cli.cmd {
        Cmd::Generate(a) => ("generate", a.out.clone()),
        Cmd::Train(a) => ("train", a.out.clone()),
        Cmd::Eval(a) => ("eval", a.out.clone()),
        Cmd::Probe(a) => ("probe", a.out.clone()),
        Cmd::Sweep(a) => ("sweep", a.out.clone()),
        Cmd::Ensemble(a) => ("ensemble", a.out.clone()),
    };

    let result = run(&cli.cmd);
    let manifest = RunManifest {
        command: command.to_string(),
        invocation: std::env::args().collect(),
        config_path: result
            .as_ref()
            .ok()
            .and_then(|o| o.config_path.as_ref())
            .map(|p| p.display().to_string()),
        config_echo: result.as_ref().ok().and_then(|o| o.config_echo.clone()),
        seed: result.as_ref().ok().and_then(|o| o.seed),
        artifacts: result
            .as_ref()
            .map(|o| o.artifacts.iter().map(|p| p.display().to_string()).collect())
            .unwrap_or_default(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: chrono::Utc::now().to_rfc3339(),
        status: if result.is_ok() { "ok" } else { "failed" }.to_string(),
        error: result.as_ref().err().map(|e| e.to_string()),
    };
    let mpath = manifest_path(&out);
    if let Ok(json) = serde_json::to_string_pretty(&manifest) {
        let _ = std::fs::write(&mpath, json + "\n");
    }

    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: &Cmd) -> advreg_core::Result<Outcome> {
    match cmd {
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Probe(a) => cmd_probe(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Ensemble(a) => cmd_ensemble(a),
    }
}

fn load_world(spec: &Option<PathBuf>, world_seed: u64) -> advreg_core::Result<WorldSpec> {
    match spec {
        Some(path) => WorldSpec::load(path),
        None => Ok(default_cp_spec(world_seed)),
    }
}

fn cmd_generate(a: &GenerateArgs) -> advreg_core::Result<Outcome> {
    let spec = load_world(&a.spec, a.world_seed)?;
    let ds = generate_split(&spec, a.split, a.n, a.seed)?;
    ds.save(&a.out)?;
    println!(
        "wrote {} ({} {} records, spec {})",
        a.out.display(),
        ds.len(),
        ds.split,
        ds.spec_hash
    );
    Ok(Outcome {
        artifacts: vec![a.out.clone()],
        config_path: a.spec.clone(),
        config_echo: toml::Value::try_from(&spec).ok(),
        seed: Some(a.seed),
    })
}

fn cmd_train(a: &TrainArgs) -> advreg_core::Result<Outcome> {
    let text = std::fs::read_to_string(&a.config)?;
    let mut file: TrainFile = toml::from_str(&text).map_err(|e| Error::Parse {
        line: e.span().map(|s| s.start).unwrap_or(0),
        message: e.message().to_string(),
    })?;
    if let Some(seed) = a.seed {
        file.train.seed = seed;
    }
    let ds = Dataset::load(&a.train_data)?;
    if let Some(expected) = &file.expect_spec_hash {
        if expected != &ds.spec_hash {
            return Err(Error::Contract(format!(
                "dataset spec hash {} does not match expected {expected}",
                ds.spec_hash
            )));
        }
    }
    let dims = ModelDims::with_world(ds.vocab_size, ds.raw_dim, ds.num_answers());
    let mut bundle = ModelBundle::init(dims, file.train.seed);
    let trace = train(&mut bundle, &ds.to_batch(), &file.train)?;
    bundle.save(&a.out)?;
    let trace_path = a.out.with_extension("trace.tsv");
    std::fs::write(&trace_path, trace.to_table())?;
    let last = trace.epochs.last();
    println!(
        "wrote {} after {} epochs (final l_vqa {})",
        a.out.display(),
        trace.epochs.len(),
        last.map(|e| format!("{:.4}", e.l_vqa)).unwrap_or_default()
    );
    Ok(Outcome {
        artifacts: vec![a.out.clone(), trace_path],
        config_path: Some(a.config.clone()),
        config_echo: toml::Value::try_from(&file).ok(),
        seed: Some(file.train.seed),
    })
}

fn check_compat(bundle: &ModelBundle, ds: &Dataset) -> advreg_core::Result<()> {
    let d = &bundle.dims;
    if d.vocab != ds.vocab_size || d.raw_dim != ds.raw_dim || d.num_answers != ds.num_answers() {
        return Err(Error::Contract(format!(
            "checkpoint dims (vocab {}, raw {}, answers {}) incompatible with dataset (vocab {}, raw {}, answers {})",
            d.vocab,
            d.raw_dim,
            d.num_answers,
            ds.vocab_size,
            ds.raw_dim,
            ds.num_answers()
        )));
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> advreg_core::Result<Outcome> {
    let bundle = ModelBundle::load(&a.checkpoint)?;
    let ds = Dataset::load(&a.data)?;
    check_compat(&bundle, &ds)?;
    let mut report = evaluate(&bundle, &ds)?;
    if let Some(spec_path) = &a.spec {
        let spec = WorldSpec::load(spec_path)?;
        if spec.hash() != ds.spec_hash {
            return Err(Error::Contract(format!(
                "world spec hash {} does not match dataset spec {}",
                spec.hash(),
                ds.spec_hash
            )));
        }
        let vs_train = distribution_divergence(&bundle, &ds, &spec.p_train)?;
        let vs_test = distribution_divergence(&bundle, &ds, &spec.p_test)?;
        report.tv_vs_train_prior = Some(vs_train.mean_tv);
        report.kl_vs_train_prior = Some(vs_train.mean_kl);
        report.tv_vs_test_prior = Some(vs_test.mean_tv);
        report.kl_vs_test_prior = Some(vs_test.mean_kl);
    }
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Contract(format!("report serialization failed: {e}")))?;
    std::fs::write(&a.out, json + "\n")?;
    println!(
        "accuracy {:.4} over {} records -> {}",
        report.overall_accuracy,
        ds.len(),
        a.out.display()
    );
    Ok(Outcome {
        artifacts: vec![a.out.clone()],
        config_path: None,
        config_echo: None,
        seed: None,
    })
}

fn cmd_probe(a: &ProbeArgs) -> advreg_core::Result<Outcome> {
    let bundle = ModelBundle::load(&a.checkpoint)?;
    let train_ds = Dataset::load(&a.train_data)?;
    check_compat(&bundle, &train_ds)?;
    let mut evals = Vec::new();
    for p in &a.eval_data {
        let ds = Dataset::load(p)?;
        check_compat(&bundle, &ds)?;
        evals.push(ds);
    }
    let eval_refs: Vec<&Dataset> = evals.iter().collect();
    let config = ProbeConfig {
        seed: a.seed,
        ..ProbeConfig::default()
    };
    let report = qonly_probe(&bundle, &train_ds, &eval_refs, &config)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Contract(format!("report serialization failed: {e}")))?;
    std::fs::write(&a.out, json + "\n")?;
    println!(
        "probe train accuracy {:.4} -> {}",
        report.train_accuracy,
        a.out.display()
    );
    Ok(Outcome {
        artifacts: vec![a.out.clone()],
        config_path: None,
        config_echo: None,
        seed: Some(a.seed),
    })
}

fn cmd_sweep(a: &SweepArgs) -> advreg_core::Result<Outcome> {
    let text = std::fs::read_to_string(&a.config)?;
    let file: TrainFile = toml::from_str(&text).map_err(|e| Error::Parse {
        line: e.span().map(|s| s.start).unwrap_or(0),
        message: e.message().to_string(),
    })?;
    let train_ds = Dataset::load(&a.train_data)?;
    let test_ds = Dataset::load(&a.test_data)?;
    if a.grid_lq.is_empty() || a.grid_lh.is_empty() || a.seeds.is_empty() {
        return Err(Error::Config(
            "sweep needs --grid-lq, --grid-lh and --seeds".into(),
        ));
    }
    let mut grid = Vec::new();
    for &lq in &a.grid_lq {
        for &lh in &a.grid_lh {
            grid.push((lq, lh));
        }
    }
    let rows = lambda_sweep(&train_ds, &test_ds, &file.train, &grid, &a.seeds, a.probe)?;
    std::fs::write(&a.out, sweep_table(&rows))?;
    println!("wrote {} sweep rows -> {}", rows.len(), a.out.display());
    Ok(Outcome {
        artifacts: vec![a.out.clone()],
        config_path: Some(a.config.clone()),
        config_echo: toml::Value::try_from(&file).ok(),
        seed: None,
    })
}

#[derive(Serialize)]
struct EnsembleReport {
    accuracy_a: f64,
    accuracy_b: f64,
    oracle_accuracy: f64,
    mean_ensemble_accuracy: f64,
}

fn cmd_ensemble(a: &EnsembleArgs) -> advreg_core::Result<Outcome> {
    let bundle_a = ModelBundle::load(&a.checkpoint_a)?;
    let bundle_b = ModelBundle::load(&a.checkpoint_b)?;
    let ds = Dataset::load(&a.data)?;
    check_compat(&bundle_a, &ds)?;
    check_compat(&bundle_b, &ds)?;
    let labels: Vec<usize> = ds.records.iter().map(|r| r.answer).collect();
    let (da, _, _) = predict_distributions(&bundle_a, &ds)?;
    let (db, _, _) = predict_distributions(&bundle_b, &ds)?;
    let (oracle, mean) = ensembles(&da, &db, &labels)?;
    let accuracy = |dists: &[Vec<f64>]| {
        dists
            .iter()
            .zip(&labels)
            .filter(|(d, &l)| advreg_core::synthcp::argmax(d) == l)
            .count() as f64
            / labels.len() as f64
    };
    let report = EnsembleReport {
        accuracy_a: accuracy(&da),
        accuracy_b: accuracy(&db),
        oracle_accuracy: oracle,
        mean_ensemble_accuracy: mean,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Contract(format!("report serialization failed: {e}")))?;
    std::fs::write(&a.out, json + "\n")?;
    println!(
        "oracle {:.4}, mean ensemble {:.4} -> {}",
        oracle,
        mean,
        a.out.display()
    );
    Ok(Outcome {
        artifacts: vec![a.out.clone()],
        config_path: None,
        config_echo: None,
        seed: None,
    })
}
