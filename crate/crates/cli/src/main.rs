//! Command-line front end: dataset generation, source pretraining,
//! two-stage adaptation, evaluation, and gradient checking.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use protoalign::bench::{
    self, build_spec, generate_domains, LabeledDataset, MetricsReport,
};
use protoalign::checkpoint;
use protoalign::engine::{self, AdaptReport, ClStageReport, Model, PfaStageReport};
use protoalign::gradcheck;
use protoalign::{Error, Result};

use protoalign_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "protoalign", version, about = "Prototype-anchored feature alignment on synthetic domain shifts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source and target dataset CSVs plus a manifest.
    GenData(GenDataArgs),
    /// Train the source model on the generated source training split.
    Pretrain(PretrainArgs),
    /// Adapt a source checkpoint to unlabeled target inputs.
    Adapt(AdaptArgs),
    /// Score a checkpoint on a labeled dataset CSV.
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Run configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory receiving the four CSVs and manifest.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding source_train.csv from gen-data.
    #[arg(long)]
    data_dir: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Training log JSON path; defaults next to the checkpoint.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Stage {
    Both,
    Pfa,
    Cl,
}

impl Stage {
    fn as_str(self) -> &'static str {
        match self {
            Stage::Both => "both",
            Stage::Pfa => "pfa",
            Stage::Cl => "cl",
        }
    }
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Source (or earlier-stage) checkpoint to adapt.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target dataset CSV; labels inside are used only for reporting.
    #[arg(long)]
    data: PathBuf,
    /// Adapted checkpoint path; omit to skip saving.
    #[arg(long, conflicts_with = "alpha_sweep")]
    out: Option<PathBuf>,
    /// Run report JSON path.
    #[arg(long, default_value = "adapt_report.json")]
    report: PathBuf,
    /// Per-iteration loss CSV path.
    #[arg(long, default_value = "adapt_losses.csv")]
    losses: PathBuf,
    /// Which stage(s) to run.
    #[arg(long, value_enum, default_value = "both")]
    stage: Stage,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma list of reliability percentiles; runs the stage once per
    /// value and emits a comparison table instead of a checkpoint.
    #[arg(long)]
    alpha_sweep: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Metrics report JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Seeded instances per suite.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// Base seed for instance generation.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Optional JSON table output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let started = Instant::now();
    let (name, outcome) = match cli.command {
        Command::GenData(args) => ("gen-data", run_gen_data(args)),
        Command::Pretrain(args) => ("pretrain", run_pretrain(args)),
        Command::Adapt(args) => ("adapt", run_adapt(args)),
        Command::Evaluate(args) => ("evaluate", run_evaluate(args)),
        Command::GradCheck(args) => ("grad-check", run_grad_check(args)),
    };
    match outcome {
        Ok(code) => {
            eprintln!("{name}: done in {:.2}s", started.elapsed().as_secs_f64());
            code
        }
        Err(err) => {
            eprintln!("{name}: error: {err}");
            ExitCode::from(match err {
                Error::NonFinite(_) => 2,
                _ => 1,
            })
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(format!("report serialization failed: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Serialize)]
struct SplitSummary {
    file: String,
    rows: usize,
    class_counts: Vec<usize>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a BTreeMap<String, String>,
    class_count: usize,
    input_dim: usize,
    datasets: BTreeMap<String, SplitSummary>,
}

fn run_gen_data(args: GenDataArgs) -> Result<ExitCode> {
    let config = load_config(&args.config)?;
    let params = config.scenario_params()?;
    let spec = build_spec(&params)?;
    let (source, target) = generate_domains(&spec)?;
    fs::create_dir_all(&args.out_dir)?;
    let mut datasets = BTreeMap::new();
    for (name, data) in [
        ("source_train", &source.train),
        ("source_eval", &source.eval),
        ("target_train", &target.train),
        ("target_eval", &target.eval),
    ] {
        let file = format!("{name}.csv");
        data.save_csv(&args.out_dir.join(&file))?;
        datasets.insert(
            name.to_string(),
            SplitSummary {
                file,
                rows: data.len(),
                class_counts: data.class_counts(spec.class_count())?,
            },
        );
    }
    let manifest = Manifest {
        config: config.resolved(),
        class_count: spec.class_count(),
        input_dim: spec.input_dim(),
        datasets,
    };
    write_json(&args.out_dir.join("manifest.json"), &manifest)?;
    println!("wrote 4 datasets and manifest.json to {}", args.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct PretrainLog<'a> {
    config: &'a BTreeMap<String, String>,
    epoch_losses: &'a [f64],
    train_accuracy: f64,
    converged: bool,
}

fn run_pretrain(args: PretrainArgs) -> Result<ExitCode> {
    let config = load_config(&args.config)?;
    let params = config.scenario_params()?;
    let pretrain = config.pretrain_config()?;
    let data = LabeledDataset::<f64>::load_csv(&args.data_dir.join("source_train.csv"))?;
    let outcome = bench::pretrain_source(&data, params.class_count, &pretrain)?;
    checkpoint::save(&outcome.model, &args.out)?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("log.json"));
    write_json(
        &log_path,
        &PretrainLog {
            config: config.resolved(),
            epoch_losses: &outcome.epoch_losses,
            train_accuracy: outcome.train_accuracy,
            converged: outcome.converged,
        },
    )?;
    println!(
        "train accuracy {:.4} over {} epochs ({})",
        outcome.train_accuracy,
        outcome.epoch_losses.len(),
        if outcome.converged { "converged" } else { "NOT CONVERGED" }
    );
    if outcome.converged {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("pretrain: flagged failure: train accuracy below 0.90");
        Ok(ExitCode::from(2))
    }
}

#[derive(Serialize)]
struct SweepEntry {
    alpha: f64,
    accuracy: f64,
    macro_dice: Option<f64>,
    compactness: f64,
    mean_entropy: f64,
}

#[derive(Serialize)]
struct AdaptRunReport<'a> {
    config: &'a BTreeMap<String, String>,
    stage: &'a str,
    pfa: Option<PfaStageReport>,
    cl: Option<ClStageReport>,
    /// Scores on the provided dataset after adaptation; its labels are
    /// never visible to the adaptation itself.
    final_metrics: Option<MetricsReport>,
    alpha_sweep: Option<Vec<SweepEntry>>,
}

fn run_stage(
    stage: Stage,
    source: &Model<f64>,
    inputs: &protoalign::Matrix64,
    adapt_config: &engine::AdaptationConfig,
) -> Result<(Model<f64>, AdaptReport)> {
    match stage {
        Stage::Both => engine::adapt(source, inputs, adapt_config),
        Stage::Pfa => {
            let (model, report) = engine::run_pfa_stage(source, inputs, adapt_config)?;
            Ok((model, AdaptReport { pfa: Some(report), cl: None }))
        }
        Stage::Cl => {
            let (model, report) = engine::run_cl_stage(source, source, inputs, adapt_config)?;
            Ok((model, AdaptReport { pfa: None, cl: Some(report) }))
        }
    }
}

fn losses_csv(report: &AdaptReport) -> String {
    let mut out = String::from("stage,iteration,t2p,p2t,total,cl\n");
    if let Some(pfa) = &report.pfa {
        for i in 0..pfa.t2p.len() {
            let _ = writeln!(
                out,
                "pfa,{i},{},{},{},",
                fmt_f64(pfa.t2p[i]),
                fmt_f64(pfa.p2t[i]),
                fmt_f64(pfa.total[i])
            );
        }
    }
    if let Some(cl) = &report.cl {
        for (i, value) in cl.cl.iter().enumerate() {
            let cell = value.map(fmt_f64).unwrap_or_default();
            let _ = writeln!(out, "cl,{i},,,,{cell}");
        }
    }
    out
}

fn run_adapt(args: AdaptArgs) -> Result<ExitCode> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.set("seed", &seed.to_string())?;
    }
    let adapt_config = config.adaptation_config()?;
    let source = checkpoint::load::<f64>(&args.checkpoint, adapt_config.temperature)?;
    let data = LabeledDataset::<f64>::load_csv(&args.data)?;

    if let Some(list) = &args.alpha_sweep {
        let mut entries = Vec::new();
        for field in list.split(',') {
            let alpha: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad alpha value {field:?}")))?;
            let mut swept = adapt_config.clone();
            swept.alpha = alpha;
            let (model, _) = run_stage(args.stage, &source, data.inputs(), &swept)?;
            let metrics = bench::evaluate(&model, &data)?;
            entries.push(SweepEntry {
                alpha,
                accuracy: metrics.accuracy,
                macro_dice: metrics.macro_dice,
                compactness: metrics.compactness,
                mean_entropy: metrics.mean_entropy,
            });
        }
        println!("alpha  accuracy  macro_dice  compactness");
        for e in &entries {
            println!(
                "{:>5}  {:>8.4}  {:>10.4}  {:>11.4}",
                e.alpha,
                e.accuracy,
                e.macro_dice.unwrap_or(f64::NAN),
                e.compactness
            );
        }
        let report = AdaptRunReport {
            config: config.resolved(),
            stage: args.stage.as_str(),
            pfa: None,
            cl: None,
            final_metrics: None,
            alpha_sweep: Some(entries),
        };
        write_json(&args.report, &report)?;
        return Ok(ExitCode::SUCCESS);
    }

    let (model, stage_report) = run_stage(args.stage, &source, data.inputs(), &adapt_config)?;
    let metrics = bench::evaluate(&model, &data)?;
    if let Some(out) = &args.out {
        checkpoint::save(&model, out)?;
    }
    fs::write(&args.losses, losses_csv(&stage_report))?;
    println!(
        "stage {}: accuracy {:.4}, compactness {:.4}",
        args.stage.as_str(),
        metrics.accuracy,
        metrics.compactness
    );
    let report = AdaptRunReport {
        config: config.resolved(),
        stage: args.stage.as_str(),
        pfa: stage_report.pfa,
        cl: stage_report.cl,
        final_metrics: Some(metrics),
        alpha_sweep: None,
    };
    write_json(&args.report, &report)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EvaluationReport<'a> {
    config: &'a BTreeMap<String, String>,
    metrics: MetricsReport,
}

fn run_evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let config = load_config(&args.config)?;
    let adapt_config = config.adaptation_config()?;
    let model = checkpoint::load::<f64>(&args.checkpoint, adapt_config.temperature)?;
    let data = LabeledDataset::<f64>::load_csv(&args.data)?;
    let metrics = bench::evaluate(&model, &data)?;
    println!(
        "accuracy {:.4}, macro dice {}, compactness {:.4}",
        metrics.accuracy,
        metrics
            .macro_dice
            .map(|d| format!("{d:.4}"))
            .unwrap_or_else(|| "undefined".into()),
        metrics.compactness
    );
    write_json(&args.out, &EvaluationReport { config: config.resolved(), metrics })?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct SuiteSummary {
    suite: &'static str,
    cases: usize,
    worst_rel_err: f64,
    passed: bool,
}

#[derive(Serialize)]
struct GradCheckReport {
    seed: u64,
    cases_per_suite: usize,
    tolerance: f64,
    suites: Vec<SuiteSummary>,
    passed: bool,
}

fn run_grad_check(args: GradCheckArgs) -> Result<ExitCode> {
    if args.seeds == 0 {
        return Err(Error::invalid("need at least one instance per suite"));
    }
    let results = gradcheck::run_all_suites(args.seed, args.seeds)?;
    let mut suites = Vec::new();
    for name in gradcheck::SUITE_NAMES {
        let cases: Vec<_> = results.iter().filter(|c| c.suite == name).collect();
        let worst = cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
        let passed = cases.iter().all(|c| c.passed);
        suites.push(SuiteSummary {
            suite: name,
            cases: cases.len(),
            worst_rel_err: worst,
            passed,
        });
    }
    let passed = suites.iter().all(|s| s.passed);
    println!("{:<16} {:>6} {:>14} {:>8}", "suite", "cases", "worst rel err", "status");
    for s in &suites {
        println!(
            "{:<16} {:>6} {:>14.3e} {:>8}",
            s.suite,
            s.cases,
            s.worst_rel_err,
            if s.passed { "pass" } else { "FAIL" }
        );
    }
    println!(
        "overall: {} ({} suites x {} cases, tolerance {:.0e})",
        if passed { "pass" } else { "FAIL" },
        suites.len(),
        args.seeds,
        gradcheck::FD_TOLERANCE
    );
    if let Some(out) = &args.out {
        write_json(
            out,
            &GradCheckReport {
                seed: args.seed,
                cases_per_suite: args.seeds,
                tolerance: gradcheck::FD_TOLERANCE,
                suites,
                passed,
            },
        )?;
    }
    if passed {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Error::NonFinite("analytic gradients diverged from finite differences".into()))
    }
}
