use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use goalcons::dataset::load_manifest;
use goalcons::evaluation::{EvalReport, DEFAULT_TOP_K};
use goalcons::hierarchy::{hierarchy_from_json, hierarchy_to_json, DEFAULT_SMOOTHING};
use goalcons::model::{load_checkpoint, save_checkpoint};
use goalcons::training::{
    run_component_ablation, run_formulation_ablation, run_lambda_sweep, train_with_progress, ExperimentTable,
};
use goalcons::{
    build_hierarchy, evaluate, generate_synthetic, gradcheck, CooccurrenceModel, Dataset, Error, Split,
    SyntheticConfig, TrainConfig,
};

#[derive(Parser)]
#[command(name = "goalcons", version, about = "Goal-consistent action anticipation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic procedural-activity dataset.
    GenData {
        /// SyntheticConfig JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Count goal/action co-occurrences on the training split.
    BuildHierarchy {
        #[arg(long)]
        manifest: PathBuf,
        /// Output JSON file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, default_value_t = DEFAULT_SMOOTHING)]
        smoothing: f64,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        common: RunArgs,
    },
    /// Score a checkpoint on a split.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional JSON with `top_k`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
    },
    /// Loss-component or consistency-formulation ablation.
    Ablate {
        #[command(flatten)]
        common: RunArgs,
    },
    /// Sweep the consistency weight.
    Sweep {
        #[command(flatten)]
        common: RunArgs,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// Optional JSON with `instances`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Co-occurrence JSON; built from the training split when omitted.
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the training seed; for ablate and sweep the seed list
    /// becomes `seed, seed+1, ...` with the configured length.
    #[arg(long)]
    seed: Option<u64>,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalOptions {
    #[serde(default = "default_top_k")]
    top_k: usize,
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

#[derive(Debug, Default, Clone, Copy, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum Study {
    #[default]
    Components,
    Formulation,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AblateConfig {
    #[serde(default)]
    train: TrainConfig,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default)]
    study: Study,
}

fn default_lambdas() -> Vec<f64> {
    vec![0.0, 0.1, 0.5, 1.0, 2.5, 5.0]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepConfig {
    #[serde(default)]
    train: TrainConfig,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default = "default_lambdas")]
    lambdas: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GradcheckOptions {
    #[serde(default = "default_instances")]
    instances: usize,
}

fn default_instances() -> usize {
    100
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    seed: u64,
    epochs: usize,
    label_space_hash: String,
    checkpoint: &'a str,
    final_total_loss: Option<f64>,
    final_action_recall: Option<f64>,
    final_report: Option<&'a EvalReport>,
}

/// A failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } => 2,
            Error::Check(_) => 4,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::GenData { config, out, seed } => gen_data(config.as_deref(), &out, seed),
        Command::BuildHierarchy {
            manifest,
            out,
            split,
            smoothing,
        } => cmd_build_hierarchy(&manifest, &out, split, smoothing),
        Command::Train { common } => cmd_train(&common),
        Command::Eval {
            manifest,
            checkpoint,
            config,
            out,
            split,
        } => cmd_eval(&manifest, &checkpoint, config.as_deref(), &out, split),
        Command::Ablate { common } => cmd_ablate(&common),
        Command::Sweep { common } => cmd_sweep(&common),
        Command::Gradcheck { config, out, seed } => cmd_gradcheck(config.as_deref(), &out, seed),
    }
}

/// Reads a JSON config; a missing path yields the all-defaults value.
fn read_config<T: DeserializeOwned>(path: Option<&Path>) -> CliResult<T> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?,
        None => "{}".to_string(),
    };
    serde_json::from_str(&text).map_err(|e| {
        let name = path.map_or_else(|| "<defaults>".into(), |p| p.display().to_string());
        Failure::config(format!("{name}: {e}"))
    })
}

/// Creates `dir`, refusing one that already holds files.
fn prepare_out_dir(dir: &Path) -> CliResult {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Failure::config(format!("--out {} is not a directory", dir.display())));
        }
        if fs::read_dir(dir)?.next().is_some() {
            return Err(Failure::config(format!("--out {} is not empty", dir.display())));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn load_hierarchy(path: Option<&Path>, dataset: &Dataset, smoothing: f64) -> CliResult<Vec<CooccurrenceModel>> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|_| Error::MissingFile(p.to_path_buf()))?;
            Ok(hierarchy_from_json(&text)?)
        }
        None => Ok(build_hierarchy(&dataset.manifest, Split::Train, smoothing)?),
    }
}

fn shifted_seeds(configured: &[u64], seed: Option<u64>) -> Vec<u64> {
    match seed {
        Some(s) => (0..configured.len() as u64).map(|i| s + i).collect(),
        None => configured.to_vec(),
    }
}

fn gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult {
    let mut config: SyntheticConfig = read_config(config)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    prepare_out_dir(out)?;
    let dataset = generate_synthetic(&config)?;
    dataset.write(out)?;
    eprintln!(
        "wrote {} records ({} train, {} val) to {}",
        dataset.manifest.records.len(),
        dataset.manifest.splits.train.len(),
        dataset.manifest.splits.val.len(),
        out.display()
    );
    Ok(())
}

fn cmd_build_hierarchy(manifest: &Path, out: &Path, split: Split, smoothing: f64) -> CliResult {
    let manifest = load_manifest(manifest)?;
    let models = build_hierarchy(&manifest, split, smoothing)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, hierarchy_to_json(&models)?)?;
    Ok(())
}

fn cmd_train(args: &RunArgs) -> CliResult {
    let mut config: TrainConfig = read_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    let dataset = Dataset::load(&args.manifest)?;
    config.validate(dataset.label_space().num_goal_levels())?;
    let hierarchy = if config.loss.use_consistency {
        load_hierarchy(args.hierarchy.as_deref(), &dataset, config.smoothing_epsilon)?
    } else {
        Vec::new()
    };
    prepare_out_dir(&args.out)?;
    let (params, history) = train_with_progress(&config, &dataset, &hierarchy, |epoch| {
        eprintln!("epoch {:>4}  total {:.6}", epoch.epoch, epoch.loss.total);
    })?;
    save_checkpoint(&args.out.join("checkpoint.bin"), &params, config.seed, dataset.label_space())?;
    fs::write(args.out.join("history.csv"), history.to_csv())?;
    let summary = TrainSummary {
        seed: config.seed,
        epochs: config.epochs,
        label_space_hash: dataset.label_space().fingerprint(),
        checkpoint: "checkpoint.bin",
        final_total_loss: history.epochs.last().map(|e| e.loss.total),
        final_action_recall: history.final_action_recall(),
        final_report: history.final_report(),
    };
    fs::write(args.out.join("summary.json"), to_json(&summary)?)?;
    if let Some(r) = summary.final_action_recall {
        eprintln!("final class-mean top-{} action recall: {r:.4}", config.top_k);
    }
    Ok(())
}

fn cmd_eval(manifest: &Path, checkpoint: &Path, config: Option<&Path>, out: &Path, split: Split) -> CliResult {
    let options: EvalOptions = read_config(config)?;
    if options.top_k == 0 {
        return Err(Error::config("top_k", "must be at least 1").into());
    }
    let dataset = Dataset::load(manifest)?;
    if !checkpoint.exists() {
        return Err(Error::MissingFile(checkpoint.to_path_buf()).into());
    }
    let (_, params) = load_checkpoint(checkpoint, dataset.label_space())?;
    prepare_out_dir(out)?;
    let report = evaluate(&params, &dataset, split, options.top_k)?;
    fs::write(out.join("report.json"), to_json(&report)?)?;
    fs::write(out.join("report.csv"), report.to_csv())?;
    eprintln!("class-mean top-{} action recall: {:.4}", options.top_k, report.action_recall());
    Ok(())
}

fn cmd_ablate(args: &RunArgs) -> CliResult {
    let mut config: AblateConfig = read_config(args.config.as_deref())?;
    config.seeds = shifted_seeds(&config.seeds, args.seed);
    let dataset = Dataset::load(&args.manifest)?;
    config.train.validate(dataset.label_space().num_goal_levels())?;
    let hierarchy = load_hierarchy(args.hierarchy.as_deref(), &dataset, config.train.smoothing_epsilon)?;
    prepare_out_dir(&args.out)?;
    let table = match config.study {
        Study::Components => run_component_ablation(&config.train, &dataset, &hierarchy, &config.seeds)?,
        Study::Formulation => run_formulation_ablation(&config.train, &dataset, &hierarchy, &config.seeds)?,
    };
    write_table(&args.out, "ablation", &table)
}

fn cmd_sweep(args: &RunArgs) -> CliResult {
    let mut config: SweepConfig = read_config(args.config.as_deref())?;
    config.seeds = shifted_seeds(&config.seeds, args.seed);
    let dataset = Dataset::load(&args.manifest)?;
    config.train.validate(dataset.label_space().num_goal_levels())?;
    if let Some(bad) = config.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(Error::config("lambdas", format!("{bad} is not a finite non-negative weight")).into());
    }
    let hierarchy = load_hierarchy(args.hierarchy.as_deref(), &dataset, config.train.smoothing_epsilon)?;
    prepare_out_dir(&args.out)?;
    let table = run_lambda_sweep(&config.train, &dataset, &hierarchy, &config.lambdas, &config.seeds)?;
    write_table(&args.out, "sweep", &table)?;
    if let Some(best) = table.rows.iter().max_by(|a, b| a.mean.total_cmp(&b.mean)) {
        eprintln!("best: {} ({:.4})", best.name, best.mean);
    }
    Ok(())
}

fn write_table(dir: &Path, stem: &str, table: &ExperimentTable) -> CliResult {
    fs::write(dir.join(format!("{stem}.csv")), table.summary_csv())?;
    fs::write(dir.join(format!("{stem}_runs.csv")), table.runs_csv())?;
    fs::write(dir.join(format!("{stem}.json")), to_json(table)?)?;
    for row in &table.rows {
        eprintln!("{:<16} {:>8.4} ± {:.4}", row.name, row.mean, row.sd);
    }
    Ok(())
}

fn cmd_gradcheck(config: Option<&Path>, out: &Path, seed: u64) -> CliResult {
    let options: GradcheckOptions = read_config(config)?;
    if options.instances == 0 {
        return Err(Error::config("instances", "must be at least 1").into());
    }
    prepare_out_dir(out)?;
    let summaries = gradcheck::run_all(seed, options.instances)?;
    let mut csv = String::from("check,instances,components,failures,max_rel_error,max_abs_error,passed\n");
    for s in &summaries {
        let _ = writeln!(
            csv,
            "{},{},{},{},{:e},{:e},{}",
            s.name,
            s.instances,
            s.components,
            s.failures,
            s.max_rel_error,
            s.max_abs_error,
            s.passed()
        );
        eprintln!(
            "{:<18} {:>4} instances  max rel error {:.3e}  {}",
            s.name,
            s.instances,
            s.max_rel_error,
            if s.passed() { "ok" } else { "FAILED" }
        );
    }
    fs::write(out.join("gradcheck.csv"), csv)?;
    let failed: Vec<&str> = summaries.iter().filter(|s| !s.passed()).map(|s| s.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Check(format!("gradient mismatch in {}", failed.join(", "))).into())
    }
}

fn to_json<T: Serialize + ?Sized>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(Error::from)?;
    s.push('\n');
    Ok(s)
}
