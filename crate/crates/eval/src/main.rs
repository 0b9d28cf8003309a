use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use drscreen_core::eventlog::{write_log, LogicalClock};
use drscreen_core::metrics::{
    quadratic_weighted_kappa, BinaryCounts, BinaryTarget, CaseLabel, ConfusionMatrix, MetricResult,
};
use drscreen_core::model::{DmeStatus, MergedDr};
use drscreen_eval::adjudicate::{run_script, Script};
use drscreen_eval::ingest::{read_rows, write_rows, GradeRow, GRADE_COLUMNS};
use drscreen_eval::synth::{generate_synthetic_cohort, write_cohort, CohortSpec};
use drscreen_eval::{emit_report, pipeline, run_evaluation, EvalConfig, EvalError, Result};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "eval", version, about = "Diabetic retinopathy screening evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full evaluation and write the report directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic cohort with known ground truth.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the images selected for adjudication as CSV.
    Select {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay scripted specialist grades through the adjudication engine.
    AdjudicateSim {
        #[arg(long)]
        grades: PathBuf,
        #[arg(long)]
        script: PathBuf,
        /// Event log output; omitted means no log is written.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Sensitivity and specificity for one target from labelled pairs.
    Metrics {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        target: String,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = EvalConfig::from_file(&config)?;
            let output = run_evaluation(&cfg)?;
            emit_report(&output.report, output.event_log.as_deref(), &out)?;
            log::info!("report written to {}", out.display());
        }
        Command::Synth { spec, out, seed } => {
            let spec = CohortSpec::from_file(&spec)?;
            let cohort = generate_synthetic_cohort(&spec, seed)?;
            let files = write_cohort(&cohort, &out, seed)?;
            log::info!("{} images written; config at {}", cohort.images.len(), files.config.display());
        }
        Command::Select { config, out } => {
            let cfg = EvalConfig::from_file(&config)?;
            let prepared = pipeline::prepare(&cfg)?;
            let rows = prepared.selection_rows();
            write_rows(&out, &["task", "image_id", "stratum", "regional", "algorithm"], &rows)?;
            log::info!("{} selected images written to {}", rows.len(), out.display());
        }
        Command::AdjudicateSim { grades, script, log } => adjudicate_sim(&grades, &script, log.as_deref())?,
        Command::Metrics { pairs, target } => metrics(&pairs, &target)?,
    }
    Ok(())
}

fn adjudicate_sim(grades: &Path, script: &Path, log_path: Option<&Path>) -> Result<()> {
    let grades = read_rows(grades, &GRADE_COLUMNS, |r: GradeRow| r.to_record().map(|(g, _)| g))?;
    let text = std::fs::read_to_string(script).map_err(|e| EvalError::io(script, e))?;
    let script = Script::from_toml(&text)?;
    let (engine, summaries, unused) = run_script(&grades, &script, &LogicalClock::default())?;
    for row in unused {
        log::warn!("grade not consumed by the protocol: {row}");
    }
    if let Some(path) = log_path {
        write_log(path, engine.log())?;
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for s in summaries {
        let line = serde_json::to_string(&s).expect("summary serializes");
        writeln!(out, "{line}").map_err(|e| EvalError::io("<stdout>", e))?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct PairRow {
    reference_dr: Option<u8>,
    predicted_dr: Option<u8>,
    reference_dme: Option<u8>,
    predicted_dme: Option<u8>,
}

fn label(dr: Option<u8>, dme: Option<u8>) -> std::result::Result<CaseLabel, String> {
    let dr = dr
        .map(|d| MergedDr::from_index(d as usize).ok_or_else(|| format!("DR category {d} is not in 0-3")))
        .transpose()?;
    let dme = match dme {
        None => None,
        Some(0) => Some(DmeStatus::Absent),
        Some(1) => Some(DmeStatus::Referable),
        Some(v) => return Err(format!("DME flag {v} is not 0 or 1")),
    };
    Ok(CaseLabel { dr, dme })
}

fn metric_line(out: &mut impl Write, m: &MetricResult) -> Result<()> {
    let ci = |v: Option<f64>| v.map(|v| format!("{v:.3}")).unwrap_or_default();
    writeln!(out, "{},{:.3},{},{},{}", m.name, m.estimate, ci(m.ci_low), ci(m.ci_high), m.n)
        .map_err(|e| EvalError::io("<stdout>", e))
}

fn metrics(pairs: &Path, target: &str) -> Result<()> {
    let target: BinaryTarget = target.parse()?;
    let columns = ["reference_dr", "predicted_dr", "reference_dme", "predicted_dme"];
    let rows = read_rows(pairs, &columns, |r: PairRow| {
        Ok((label(r.reference_dr, r.reference_dme)?, label(r.predicted_dr, r.predicted_dme)?))
    })?;
    let counts = BinaryCounts::from_pairs(rows.iter().map(|(r, p)| (r, p)), &target);
    let sensitivity = counts.sensitivity()?;
    let specificity = counts.specificity()?;

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "metric,estimate,ci_low,ci_high,n").map_err(|e| EvalError::io("<stdout>", e))?;
    metric_line(&mut out, &sensitivity)?;
    metric_line(&mut out, &specificity)?;
    let dr_pairs: Vec<(MergedDr, MergedDr)> = rows.iter().filter_map(|(r, p)| Some((r.dr?, p.dr?))).collect();
    if !dr_pairs.is_empty() {
        let cm = ConfusionMatrix::merged_dr(dr_pairs);
        if let Ok(k) = quadratic_weighted_kappa(&cm) {
            metric_line(&mut out, &MetricResult::point("quadratic_weighted_kappa", k, cm.total()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
