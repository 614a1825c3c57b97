//! `dino-forge`: train, evaluate, and inspect self-distilled defect
//! classifiers from the command line.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a bad invocation
//! or configuration. Errors print as a single `error: ...` line on stderr.

mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dino_forge_core::data::synth::{generate_synthetic, SynthSpec};
use dino_forge_core::data::{load_embeddings, load_label_table, load_score_table};
use dino_forge_core::engine::{self, Mode, RunInputs, RunOutput};
use dino_forge_core::metrics::{evaluate_scores, rankme, MetricReport};
use dino_forge_core::model::Checkpoint;
use dino_forge_core::objectives::CiwTable;
use dino_forge_core::suite::standard_suite;
use dino_forge_core::CoreError;

use config::Overrides;

/// Errors carry their exit code: bad configuration or invocation exits 2,
/// anything that breaks mid-flight exits 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> CliError {
        CliError::Config(one_line(&msg.into()))
    }

    pub fn runtime(msg: impl Into<String>) -> CliError {
        CliError::Runtime(one_line(&msg.into()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn one_line(msg: &str) -> String {
    msg.split(['\n', '\r']).filter(|s| !s.trim().is_empty()).collect::<Vec<_>>().join("; ")
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config: {msg}"),
            CliError::Runtime(msg) => f.write_str(msg),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> CliError {
        match &e {
            CoreError::InvalidArgument { .. } | CoreError::MalformedFile { .. } => {
                CliError::config(e.to_string())
            }
            _ => CliError::runtime(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "dino-forge",
    version,
    about = "Self-distillation pretraining and multi-label defect classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Self-distillation pretraining on unlabeled images
    Pretrain(TrainArgs),
    /// Joint self-distillation and classification training
    Hybrid(TrainArgs),
    /// Full-model supervised training from a pretrained checkpoint
    Finetune(TrainArgs),
    /// Linear probe: train only the classifier on frozen features
    Probe(TrainArgs),
    /// Supervised training from random initialization
    Supervised(TrainArgs),
    /// Score a prediction CSV against a label CSV
    Evaluate(EvaluateArgs),
    /// Effective rank of an embedding dump
    Rankme(RankmeArgs),
    /// Generate a synthetic defect dataset
    SynthData(SynthArgs),
    /// Run the bundled finite-difference gradient checks
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration TOML
    #[arg(long)]
    config: PathBuf,
    /// Override the run seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the labeled-data fraction
    #[arg(long)]
    fraction: Option<f64>,
    /// Override the decision threshold
    #[arg(long)]
    threshold: Option<f64>,
    /// Base directory to create the run directory under
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint whose backbone initializes this run
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Mid-run checkpoint of this same configuration to continue
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write per-epoch curves.csv into the run directory
    #[arg(long)]
    curves: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Prediction CSV (scores in [0, 1])
    #[arg(long)]
    predictions: PathBuf,
    /// Label CSV with the same header and row order
    #[arg(long)]
    labels: PathBuf,
    /// Class-importance weights CSV; omitted means uniform weights
    #[arg(long)]
    ciw: Option<PathBuf>,
    /// Decision threshold applied to the scores
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Also write the JSON report to this path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RankmeArgs {
    /// Embedding dump: a `dim=D` header then one row of D values per sample
    #[arg(long)]
    embeddings: PathBuf,
    /// Spectrum cutoff for the effective-rank estimate
    #[arg(long, default_value_t = 1e-7)]
    eps: f64,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory to write images, labels.csv, ciw.csv, and spec.json into
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of samples with no defect at all
    #[arg(long)]
    normal_fraction: Option<f64>,
    /// Uniform pixel noise amplitude
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Sample fewer coordinates per case for a fast smoke pass
    #[arg(long)]
    quick: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Pretrain(args) => run_train(Mode::Pretrain, args),
        Command::Hybrid(args) => run_train(Mode::Hybrid, args),
        Command::Finetune(args) => run_train(Mode::Finetune, args),
        Command::Probe(args) => run_train(Mode::Probe, args),
        Command::Supervised(args) => run_train(Mode::Supervised, args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Rankme(args) => run_rankme(args),
        Command::SynthData(args) => run_synth(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::config(format!("{what} {} is not a file", path.display())))
    }
}

/// `<mode>-<utc-timestamp>-<seed>` under the output base; a numeric suffix
/// resolves collisions when two identical runs start within one second.
fn create_run_dir(base: &Path, mode: Mode, seed: u64) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(base)
        .map_err(|e| CliError::runtime(format!("{}: {e}", base.display())))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let stem = format!("{mode}-{stamp}-{seed}");
    for attempt in 1..100u32 {
        let name = if attempt == 1 { stem.clone() } else { format!("{stem}-{attempt}") };
        let dir = base.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::runtime(format!("{}: {e}", dir.display()))),
        }
    }
    Err(CliError::runtime(format!("could not find a free run directory under {}", base.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn report_json(report: &MetricReport) -> Result<String, CliError> {
    let mut json = serde_json::to_string_pretty(report)
        .map_err(|e| CliError::runtime(format!("serializing report: {e}")))?;
    json.push('\n');
    Ok(json)
}

fn run_train(mode: Mode, args: TrainArgs) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: args.seed,
        fraction: args.fraction,
        threshold: args.threshold,
        out: args.out.clone(),
        init_from: args.init_from.clone(),
    };
    let mut prepared = config::materialize(mode, &args.config, &overrides)?;

    let resume_ckpt = match &args.resume {
        Some(path) => {
            if args.init_from.is_some() {
                return Err(CliError::config(
                    "--resume carries the full state; --init-from cannot be combined with it",
                ));
            }
            // A config-file init checkpoint already went into the checkpoint
            // being resumed, so it is dropped here rather than re-applied.
            prepared.init_from = None;
            require_file(path, "resume checkpoint")?;
            Some(Checkpoint::load(path)?)
        }
        None => None,
    };
    let init_ckpt = match &prepared.init_from {
        Some(path) => {
            require_file(path, "init checkpoint")?;
            Some(Checkpoint::load(path)?)
        }
        None => None,
    };

    let run_dir = create_run_dir(&prepared.out_base, mode, prepared.recipe.seed)?;
    write_file(&run_dir.join("config.toml"), &prepared.echo.to_toml()?)?;

    let mut inputs = RunInputs::new(&prepared.dataset);
    inputs.val = prepared.val.as_ref();
    inputs.ciw = prepared.ciw.as_ref();
    inputs.init_from = init_ckpt.as_ref();
    inputs.resume_from = resume_ckpt.as_ref();
    inputs.out_dir = Some(&run_dir);
    let output: RunOutput = engine::run(&prepared.recipe, inputs)?;

    if let Some(metrics) = &output.final_metrics {
        write_file(&run_dir.join("report.json"), &report_json(metrics)?)?;
        let table = report::text_table(metrics);
        write_file(&run_dir.join("report.txt"), &table)?;
        eprint!("{table}");
    }
    if args.curves {
        write_file(&run_dir.join("curves.csv"), &report::curves_csv(&output.log))?;
    }
    println!("{}", run_dir.display());
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    require_file(&args.predictions, "predictions CSV")?;
    require_file(&args.labels, "labels CSV")?;
    let preds = load_score_table(&args.predictions)?;
    let truth = load_label_table(&args.labels)?;
    if preds.codes != truth.codes {
        return Err(CliError::config(format!(
            "prediction classes [{}] do not match label classes [{}]",
            preds.codes.join(","),
            truth.codes.join(",")
        )));
    }
    if preds.paths != truth.paths {
        return Err(CliError::config(
            "prediction rows and label rows must list the same paths in the same order",
        ));
    }
    if let Some(bad) = preds.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(CliError::config(format!("prediction score {bad} is outside [0, 1]")));
    }

    let weights = match &args.ciw {
        Some(path) => {
            require_file(path, "CIW CSV")?;
            let table = CiwTable::from_csv_path(path)?;
            aligned_weights(&table, &preds.codes)?
        }
        None => vec![1.0; preds.codes.len()],
    };
    let report = evaluate_scores(
        &preds.scores,
        &truth.labels,
        preds.paths.len(),
        preds.codes.len(),
        &preds.codes,
        &weights,
        args.threshold,
    )?;

    let json = report_json(&report)?;
    if let Some(out) = &args.out {
        write_file(out, &json)?;
    }
    print!("{json}");
    eprint!("{}", report::text_table(&report));
    Ok(())
}

/// CIW values in the evaluation's class order; the table must cover every
/// class being scored.
fn aligned_weights(table: &CiwTable, codes: &[String]) -> Result<Vec<f64>, CliError> {
    codes
        .iter()
        .map(|code| {
            table
                .codes()
                .iter()
                .position(|c| c == code)
                .map(|i| table.weights()[i])
                .ok_or_else(|| CliError::config(format!("CIW table has no entry for class {code}")))
        })
        .collect()
}

fn run_rankme(args: RankmeArgs) -> Result<(), CliError> {
    require_file(&args.embeddings, "embeddings file")?;
    let (values, n, d) = load_embeddings(&args.embeddings)?;
    let value = rankme(&values, n, d, args.eps)?;
    println!("{value}");
    Ok(())
}

/// Example class-importance weights for the generated dataset, cycling a
/// fixed spread so downstream weighting paths see non-uniform values.
const SYNTH_CIW_CYCLE: [f64; 6] = [2.0, 0.5, 4.5, 1.0, 7.0, 3.0];

fn run_synth(args: SynthArgs) -> Result<(), CliError> {
    let mut spec = SynthSpec::default_desk(args.samples, args.image_size, args.seed);
    if let Some(f) = args.normal_fraction {
        spec.normal_fraction = f;
    }
    if let Some(n) = args.noise {
        spec.noise = n;
    }
    spec.validate().map_err(|e| CliError::config(e.to_string()))?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::runtime(format!("{}: {e}", args.out.display())))?;
    generate_synthetic(&spec, &args.out)?;

    let mut ciw = String::from("code,ciw\n");
    for (i, class) in spec.classes.iter().enumerate() {
        ciw.push_str(&format!("{},{}\n", class.code, SYNTH_CIW_CYCLE[i % SYNTH_CIW_CYCLE.len()]));
    }
    write_file(&args.out.join("ciw.csv"), &ciw)?;
    println!("{}", args.out.display());
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let report = standard_suite(args.quick)?;
    for line in report.lines() {
        println!("{line}");
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(CliError::runtime(format!(
            "gradient check failed, worst relative error {:.3e}",
            report.worst_rel_err()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_flatten_to_one_line() {
        let err = CliError::config("first line\nsecond line\n\nthird");
        assert_eq!(err.to_string(), "config: first line; second line; third");
        assert_eq!(err.exit_code(), 2);
        assert_eq!(CliError::runtime("boom").exit_code(), 1);
    }

    #[test]
    fn core_errors_map_to_exit_codes() {
        let config_side: CliError =
            CoreError::invalid("recipe", "epochs must be >= 1").into();
        assert_eq!(config_side.exit_code(), 2);
        let runtime_side: CliError = CoreError::shape("matmul", "2x3 vs 4x5").into();
        assert_eq!(runtime_side.exit_code(), 1);
    }

    #[test]
    fn ciw_alignment_follows_evaluation_order() {
        let table = CiwTable::new(
            vec!["B".to_string(), "A".to_string()],
            vec![2.0, 5.0],
        )
        .unwrap();
        let codes = vec!["A".to_string(), "B".to_string()];
        assert_eq!(aligned_weights(&table, &codes).unwrap(), vec![5.0, 2.0]);
        let missing = vec!["C".to_string()];
        assert!(aligned_weights(&table, &missing).is_err());
    }
}
