//! Report structure and its on-disk form: `report.json` with everything,
//! one CSV per table and one `roc_<target>.csv` per curve.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use drscreen_core::eventlog::EventRecord;
use drscreen_core::metrics::{BinRow, ConfusionMatrix, KappaRow, MetricResult, RegionRow};
use drscreen_core::sampling::{SampleSize, SamplingPlan};
use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    /// SHA-256 of each input file, keyed by role.
    pub input_hashes: BTreeMap<String, String>,
    pub counts: BTreeMap<String, u64>,
    pub reference_mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeReport {
    pub plan: SamplingPlan,
    pub computed: SampleSize,
    pub benchmark: SampleSize,
    pub deviates_from_benchmark: bool,
    pub note: String,
}

/// Median and quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub region: String,
    pub patients: u64,
    pub images: u64,
    pub female: Option<f64>,
    pub age: Option<Quartiles>,
    pub hba1c: Option<Quartiles>,
    pub fbs: Option<Quartiles>,
    pub ldl: Option<Quartiles>,
    /// Regional-grader DR distribution over DR-gradable images, merged scale.
    pub dr_distribution: Option<[f64; 4]>,
    pub referable_dme: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradabilityTable {
    pub task: String,
    pub both_gradable: u64,
    pub regional_gradable_algorithm_ungradable: u64,
    pub regional_ungradable_algorithm_gradable: u64,
    pub both_ungradable: u64,
    pub included: u64,
    pub excluded: u64,
    pub ingested: u64,
}

/// Outcome of adjudicating gradability disagreements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradabilityAdjudication {
    pub task: String,
    pub regional_gradable_adjudicated_gradable: u64,
    pub regional_gradable_adjudicated_ungradable: u64,
    pub regional_ungradable_adjudicated_gradable: u64,
    pub regional_ungradable_adjudicated_ungradable: u64,
    pub adjudicated: u64,
    pub agree_regional: u64,
    pub agree_algorithm: u64,
    pub regional_rate: Option<f64>,
    pub algorithm_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub task: String,
    pub population: u64,
    pub disagreements: u64,
    pub agreed_referable_population: u64,
    pub agreed_referable_sampled: u64,
    pub agreed_nonreferable_population: u64,
    pub agreed_nonreferable_sampled: u64,
    pub selected: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceCount {
    pub task: String,
    pub provenance: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedMatrix {
    /// `grader` or `algorithm`.
    pub rater: String,
    pub task: String,
    pub matrix: ConfusionMatrix,
    pub kappa: Option<MetricResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub target: String,
    pub grader_sensitivity: Option<MetricResult>,
    pub grader_specificity: Option<MetricResult>,
    pub algorithm_sensitivity: Option<MetricResult>,
    pub algorithm_specificity: Option<MetricResult>,
    pub algorithm_auc: Option<MetricResult>,
    /// Two-sided paired permutation p-values, algorithm versus grader.
    pub sensitivity_p_value: Option<f64>,
    pub specificity_p_value: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// `None` at the origin, where nothing is called positive.
    pub threshold: Option<f64>,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocSeries {
    pub target: String,
    pub auc: f64,
    pub n: u64,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub provenance: Provenance,
    pub pipeline: Vec<StageLog>,
    pub sample_size: SampleSizeReport,
    pub cohort: Vec<CohortRow>,
    pub gradability: Vec<GradabilityTable>,
    pub gradability_adjudication: Vec<GradabilityAdjudication>,
    pub selection: Vec<SelectionSummary>,
    pub reference: Vec<ProvenanceCount>,
    pub confusion: Vec<NamedMatrix>,
    pub metrics: Vec<TargetMetrics>,
    pub roc: Vec<RocSeries>,
    pub regions: Vec<RegionRow>,
    pub region_kappas: Vec<KappaRow>,
    pub confidence_bins: Vec<BinRow>,
}

fn f3(v: f64) -> String {
    format!("{v:.3}")
}

fn opt3(v: Option<f64>) -> String {
    v.map(f3).unwrap_or_default()
}

fn est(m: &Option<MetricResult>) -> String {
    opt3(m.as_ref().map(|m| m.estimate))
}

fn lo(m: &Option<MetricResult>) -> String {
    opt3(m.as_ref().and_then(|m| m.ci_low))
}

fn hi(m: &Option<MetricResult>) -> String {
    opt3(m.as_ref().and_then(|m| m.ci_high))
}

fn n_of(m: &Option<MetricResult>) -> String {
    m.as_ref().map(|m| m.n.to_string()).unwrap_or_default()
}

/// File-name form of a target: `severe+|dme` becomes `severe_plus_or_dme`.
pub fn target_slug(target: &str) -> String {
    target.replace('+', "_plus").replace('|', "_or_")
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    fn render(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

fn quartile_cells(q: &Option<Quartiles>) -> [String; 3] {
    match q {
        Some(q) => [f3(q.median), f3(q.q1), f3(q.q3)],
        None => Default::default(),
    }
}

/// Every output file name with its bytes, in a fixed order.
pub fn render_files(report: &EvalReport, event_log: Option<&[EventRecord]>) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut json = serde_json::to_vec_pretty(report).expect("report serializes");
    json.push(b'\n');
    files.push(("report.json".to_owned(), json));

    let mut t = Table::new(&["n_core", "n_inflated", "benchmark_n_core", "benchmark_n_inflated", "deviates_from_benchmark"]);
    let s = &report.sample_size;
    t.push(vec![
        s.computed.n_core.to_string(),
        s.computed.n_inflated.to_string(),
        s.benchmark.n_core.to_string(),
        s.benchmark.n_inflated.to_string(),
        s.deviates_from_benchmark.to_string(),
    ]);
    files.push(("sample_size.csv".into(), t.render()));

    let mut t = Table::new(&[
        "region",
        "patients",
        "images",
        "female",
        "age_median",
        "age_q1",
        "age_q3",
        "hba1c_median",
        "hba1c_q1",
        "hba1c_q3",
        "fbs_median",
        "fbs_q1",
        "fbs_q3",
        "ldl_median",
        "ldl_q1",
        "ldl_q3",
        "no_mild",
        "moderate",
        "severe",
        "pdr",
        "referable_dme",
    ]);
    for r in &report.cohort {
        let mut row = vec![r.region.clone(), r.patients.to_string(), r.images.to_string(), opt3(r.female)];
        for q in [&r.age, &r.hba1c, &r.fbs, &r.ldl] {
            row.extend(quartile_cells(q));
        }
        match r.dr_distribution {
            Some(d) => row.extend(d.iter().map(|v| f3(*v))),
            None => row.extend(std::iter::repeat_n(String::new(), 4)),
        }
        row.push(opt3(r.referable_dme));
        t.push(row);
    }
    files.push(("cohort.csv".into(), t.render()));

    let mut t = Table::new(&[
        "task",
        "both_gradable",
        "regional_gradable_algorithm_ungradable",
        "regional_ungradable_algorithm_gradable",
        "both_ungradable",
        "included",
        "excluded",
        "ingested",
    ]);
    for g in &report.gradability {
        t.push(vec![
            g.task.clone(),
            g.both_gradable.to_string(),
            g.regional_gradable_algorithm_ungradable.to_string(),
            g.regional_ungradable_algorithm_gradable.to_string(),
            g.both_ungradable.to_string(),
            g.included.to_string(),
            g.excluded.to_string(),
            g.ingested.to_string(),
        ]);
    }
    files.push(("gradability.csv".into(), t.render()));

    let mut t = Table::new(&[
        "task",
        "regional_gradable_adjudicated_gradable",
        "regional_gradable_adjudicated_ungradable",
        "regional_ungradable_adjudicated_gradable",
        "regional_ungradable_adjudicated_ungradable",
        "adjudicated",
        "agree_regional",
        "agree_algorithm",
        "regional_rate",
        "algorithm_rate",
    ]);
    for g in &report.gradability_adjudication {
        t.push(vec![
            g.task.clone(),
            g.regional_gradable_adjudicated_gradable.to_string(),
            g.regional_gradable_adjudicated_ungradable.to_string(),
            g.regional_ungradable_adjudicated_gradable.to_string(),
            g.regional_ungradable_adjudicated_ungradable.to_string(),
            g.adjudicated.to_string(),
            g.agree_regional.to_string(),
            g.agree_algorithm.to_string(),
            opt3(g.regional_rate),
            opt3(g.algorithm_rate),
        ]);
    }
    files.push(("gradability_adjudication.csv".into(), t.render()));

    let mut t = Table::new(&[
        "task",
        "population",
        "disagreements",
        "agreed_referable_population",
        "agreed_referable_sampled",
        "agreed_nonreferable_population",
        "agreed_nonreferable_sampled",
        "selected",
    ]);
    for s in &report.selection {
        t.push(vec![
            s.task.clone(),
            s.population.to_string(),
            s.disagreements.to_string(),
            s.agreed_referable_population.to_string(),
            s.agreed_referable_sampled.to_string(),
            s.agreed_nonreferable_population.to_string(),
            s.agreed_nonreferable_sampled.to_string(),
            s.selected.to_string(),
        ]);
    }
    files.push(("selection.csv".into(), t.render()));

    let mut t = Table::new(&["task", "provenance", "count"]);
    for p in &report.reference {
        t.push(vec![p.task.clone(), p.provenance.clone(), p.count.to_string()]);
    }
    files.push(("reference_provenance.csv".into(), t.render()));

    for m in &report.confusion {
        let mut header = vec!["reference".to_owned()];
        header.extend(m.matrix.categories.iter().cloned());
        let mut t = Table { header, rows: Vec::new() };
        for (cat, counts) in m.matrix.categories.iter().zip(&m.matrix.counts) {
            let mut row = vec![cat.clone()];
            row.extend(counts.iter().map(u64::to_string));
            t.push(row);
        }
        files.push((format!("confusion_{}_{}.csv", m.rater, m.task), t.render()));
    }

    let mut t = Table::new(&["target", "rater", "metric", "estimate", "ci_low", "ci_high", "ci_method", "n", "p_value"]);
    for m in &report.metrics {
        let rows: [(&str, &str, &Option<MetricResult>, Option<f64>); 5] = [
            ("grader", "sensitivity", &m.grader_sensitivity, None),
            ("grader", "specificity", &m.grader_specificity, None),
            ("algorithm", "sensitivity", &m.algorithm_sensitivity, m.sensitivity_p_value),
            ("algorithm", "specificity", &m.algorithm_specificity, m.specificity_p_value),
            ("algorithm", "auc", &m.algorithm_auc, None),
        ];
        for (rater, metric, value, p) in rows {
            let method = value
                .as_ref()
                .map(|v| serde_json::to_value(v.ci_method).unwrap().as_str().unwrap_or_default().to_owned())
                .unwrap_or_default();
            t.push(vec![
                m.target.clone(),
                rater.into(),
                metric.into(),
                est(value),
                lo(value),
                hi(value),
                method,
                n_of(value),
                p.map(|p| format!("{p:.4}")).unwrap_or_default(),
            ]);
        }
    }
    files.push(("metrics.csv".into(), t.render()));

    let mut t = Table::new(&["region", "rater", "kappa", "ci_low", "ci_high", "n"]);
    for k in &report.region_kappas {
        for (rater, v) in [("grader", &k.grader_kappa), ("algorithm", &k.algorithm_kappa)] {
            t.push(vec![k.region.clone(), rater.into(), est(v), lo(v), hi(v), k.n.to_string()]);
        }
    }
    files.push(("kappa.csv".into(), t.render()));

    const REGION_METRICS: [&str; 4] =
        ["grader_sensitivity", "algorithm_sensitivity", "grader_specificity", "algorithm_specificity"];
    let mut header: Vec<String> =
        ["region", "target", "reference_positives", "reference_negatives"].map(String::from).to_vec();
    for name in REGION_METRICS {
        header.extend([name.to_owned(), format!("{name}_low"), format!("{name}_high")]);
    }
    header.push("algorithm_auc".into());
    let mut t = Table { header, rows: Vec::new() };
    for r in &report.regions {
        let mut row = vec![
            r.region.clone(),
            r.target.clone(),
            r.reference_positives.to_string(),
            r.reference_negatives.to_string(),
        ];
        for m in [&r.grader_sensitivity, &r.algorithm_sensitivity, &r.grader_specificity, &r.algorithm_specificity] {
            row.extend([est(m), lo(m), hi(m)]);
        }
        row.push(est(&r.algorithm_auc));
        t.push(row);
    }
    files.push(("regions.csv".into(), t.render()));

    let mut t = Table::new(&[
        "target",
        "low",
        "high",
        "n_images",
        "grader_sensitivity",
        "algorithm_sensitivity",
        "grader_specificity",
        "algorithm_specificity",
    ]);
    for b in &report.confidence_bins {
        t.push(vec![
            b.target.clone(),
            f3(b.low),
            f3(b.high),
            b.n_images.to_string(),
            est(&b.grader_sensitivity),
            est(&b.algorithm_sensitivity),
            est(&b.grader_specificity),
            est(&b.algorithm_specificity),
        ]);
    }
    files.push(("confidence_bins.csv".into(), t.render()));

    for series in &report.roc {
        let mut t = Table::new(&["threshold", "fpr", "tpr"]);
        for p in &series.points {
            t.push(vec![p.threshold.map(|v| format!("{v:.6}")).unwrap_or_else(|| "inf".into()), f3(p.fpr), f3(p.tpr)]);
        }
        files.push((format!("roc_{}.csv", target_slug(&series.target)), t.render()));
    }

    if let Some(log) = event_log {
        let mut bytes = Vec::new();
        for r in log {
            bytes.extend(r.to_line().as_bytes());
            bytes.push(b'\n');
        }
        files.push(("adjudication_log.jsonl".into(), bytes));
    }
    files
}

/// Writes the report into `dir`, replacing it. Files are first written to a
/// temporary sibling directory which is then renamed into place, so a
/// failure leaves no partial output.
pub fn emit_report(report: &EvalReport, event_log: Option<&[EventRecord]>, dir: &Path) -> Result<()> {
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::env::current_dir().map_err(|e| EvalError::io(dir, e))?,
    };
    let staging = tempfile::Builder::new()
        .prefix(".report-")
        .tempdir_in(&parent)
        .map_err(|e| EvalError::io(&parent, e))?;
    for (name, bytes) in render_files(report, event_log) {
        let path = staging.path().join(&name);
        fs::write(&path, bytes).map_err(|e| EvalError::io(&path, e))?;
    }
    let staged = staging.keep();
    if dir.exists() {
        let backup = tempfile::Builder::new()
            .prefix(".report-old-")
            .tempdir_in(&parent)
            .map_err(|e| EvalError::io(&parent, e))?
            .keep();
        let old = backup.join("previous");
        fs::rename(dir, &old).map_err(|e| EvalError::io(dir, e))?;
        fs::rename(&staged, dir).map_err(|e| EvalError::io(dir, e))?;
        fs::remove_dir_all(&backup).map_err(|e| EvalError::io(&backup, e))?;
    } else {
        fs::rename(&staged, dir).map_err(|e| EvalError::io(dir, e))?;
    }
    Ok(())
}
