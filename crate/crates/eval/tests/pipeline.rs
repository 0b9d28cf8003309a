use std::collections::BTreeMap;
use std::path::Path;

use drscreen_core::metrics::{quadratic_weighted_kappa, ConfusionMatrix};
use drscreen_eval::config::EvalConfig;
use drscreen_eval::fixtures::{write_count_fixture, ScreeningCounts};
use drscreen_eval::report::{render_files, EvalReport};
use drscreen_eval::synth::{generate_synthetic_cohort, write_cohort, CohortSpec};
use drscreen_eval::{emit_report, run_evaluation, EvalError};

fn metric<'a>(report: &'a EvalReport, target: &str) -> &'a drscreen_eval::report::TargetMetrics {
    report.metrics.iter().find(|m| m.target == target).unwrap()
}

fn r3(v: f64) -> String {
    format!("{v:.3}")
}

fn count_report(dir: &Path) -> EvalReport {
    let files = write_count_fixture(dir, 11, 0, 0).unwrap();
    let cfg = EvalConfig::from_file(&files.config).unwrap();
    run_evaluation(&cfg).unwrap().report
}

#[test]
fn count_fixture_reproduces_published_operating_points() {
    let dir = tempfile::tempdir().unwrap();
    let report = count_report(dir.path());

    // Oracle: the published count matrices themselves.
    let counts = ScreeningCounts::published();
    let by_name: BTreeMap<(&str, &str), &ConfusionMatrix> =
        report.confusion.iter().map(|m| ((m.rater.as_str(), m.task.as_str()), &m.matrix)).collect();
    assert_eq!(by_name[&("grader", "dr")].counts, counts.dr.grader);
    assert_eq!(by_name[&("algorithm", "dr")].counts, counts.dr.algorithm);
    assert_eq!(by_name[&("grader", "dme")].counts, counts.dme.grader);
    assert_eq!(by_name[&("algorithm", "dme")].counts, counts.dme.algorithm);

    let expect = [
        ("moderate+", "grader", 0.740, Some(0.982)),
        ("moderate+", "algorithm", 0.970, Some(0.957)),
        ("severe+", "grader", 0.603, Some(0.997)),
        ("severe+", "algorithm", 0.927, Some(0.976)),
        ("pdr", "grader", 0.606, None),
        ("pdr", "algorithm", 0.719, None),
        ("dme", "grader", 0.613, Some(0.992)),
        ("dme", "algorithm", 0.940, Some(0.982)),
    ];
    for (target, rater, sens, spec) in expect {
        let m = metric(&report, target);
        let (s, p) = match rater {
            "grader" => (&m.grader_sensitivity, &m.grader_specificity),
            _ => (&m.algorithm_sensitivity, &m.algorithm_specificity),
        };
        assert_eq!(r3(s.as_ref().unwrap().estimate), r3(sens), "{rater} {target} sensitivity");
        if let Some(spec) = spec {
            assert_eq!(r3(p.as_ref().unwrap().estimate), r3(spec), "{rater} {target} specificity");
        }
    }

    let grader_cp = metric(&report, "moderate+").grader_sensitivity.clone().unwrap();
    assert_eq!(grader_cp.n, 3083);
    assert_eq!((r3(grader_cp.ci_low.unwrap()), r3(grader_cp.ci_high.unwrap())), ("0.724".into(), "0.755".into()));

    let qwk = |rater| quadratic_weighted_kappa(by_name[&(rater, "dr")]).unwrap();
    assert!((qwk("grader") - 0.776).abs() <= 0.01);
    assert!((qwk("algorithm") - 0.846).abs() <= 0.01);

    // Conservation: excluded + included = ingested, per task.
    for t in &report.gradability {
        assert_eq!(t.included + t.excluded, t.ingested);
    }
    assert_eq!(report.provenance.counts["dr_reference"], 25_326);
    assert_eq!(report.provenance.counts["dme_reference"], 24_219);
    assert!(report.sample_size.deviates_from_benchmark);
    assert_eq!((report.sample_size.computed.n_core, report.sample_size.computed.n_inflated), (6018, 7523));
}

#[test]
fn pipeline_order_is_fixed_and_logged() {
    let dir = tempfile::tempdir().unwrap();
    let report = count_report(dir.path());
    let stages: Vec<&str> = report.pipeline.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(
        stages,
        [
            "ingest",
            "threshold_cascade",
            "gradability_reconciliation",
            "adjudication_selection",
            "reference_assembly",
            "metrics",
            "report"
        ]
    );
}

fn small_spec(images_per_region: usize) -> CohortSpec {
    let mut spec = CohortSpec::from_toml(include_str!("../fixtures/cohort_spec.toml")).unwrap();
    spec.regions.truncate(3);
    for r in &mut spec.regions {
        r.images = images_per_region;
        r.patients = images_per_region / 4;
    }
    spec.dr_ungradable = 0.05;
    spec.dme_ungradable = 0.05;
    spec.algorithm.gradability_error = 0.05;
    spec.grader.gradability_error = 0.05;
    spec
}

fn run_synthetic(dir: &Path, seed: u64) -> drscreen_eval::PipelineOutput {
    let cohort = generate_synthetic_cohort(&small_spec(400), seed).unwrap();
    let files = write_cohort(&cohort, dir, seed).unwrap();
    let text = std::fs::read_to_string(&files.config)
        .unwrap()
        .replace("bootstrap_resamples = 1000", "bootstrap_resamples = 200")
        .replace("permutation_draws = 2000", "permutation_draws = 1000");
    std::fs::write(&files.config, text).unwrap();
    let cfg = EvalConfig::from_file(&files.config).unwrap();
    run_evaluation(&cfg).unwrap()
}

#[test]
fn synthetic_cohort_populates_every_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_synthetic(dir.path(), 5);
    let r = &out.report;
    assert_eq!(r.cohort.len(), 4, "pooled row plus three regions");
    assert_eq!(r.gradability.len(), 2);
    assert_eq!(r.gradability_adjudication.len(), 2);
    assert!(r.gradability_adjudication.iter().all(|g| g.adjudicated > 0));
    assert_eq!(r.selection.len(), 4);
    assert!(!r.reference.is_empty());
    assert_eq!(r.confusion.len(), 4);
    assert_eq!(r.metrics.len(), 5);
    assert!(r.metrics.iter().all(|m| m.sensitivity_p_value.is_some() && m.specificity_p_value.is_some()));
    assert_eq!(r.roc.len(), 5);
    assert!(!r.regions.is_empty() && !r.region_kappas.is_empty() && !r.confidence_bins.is_empty());
    assert!(out.event_log.as_ref().is_some_and(|l| !l.is_empty()));
    for t in &r.gradability {
        assert_eq!(t.included + t.excluded, t.ingested);
    }
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn two_runs_with_the_same_seed_emit_identical_directories() {
    let work = tempfile::tempdir().unwrap();
    let a = run_synthetic(&work.path().join("in-a"), 9);
    let b = run_synthetic(&work.path().join("in-b"), 9);
    emit_report(&a.report, a.event_log.as_deref(), &work.path().join("out-a")).unwrap();
    emit_report(&b.report, b.event_log.as_deref(), &work.path().join("out-b")).unwrap();
    let (da, db) = (dir_bytes(&work.path().join("out-a")), dir_bytes(&work.path().join("out-b")));
    assert!(da.len() > 10);
    assert_eq!(da.keys().collect::<Vec<_>>(), db.keys().collect::<Vec<_>>());
    for (name, bytes) in &da {
        assert!(bytes == &db[name], "{name} differs between runs");
    }

    // Re-emitting over an existing directory gives the same bytes.
    emit_report(&a.report, a.event_log.as_deref(), &work.path().join("out-b")).unwrap();
    assert_eq!(dir_bytes(&work.path().join("out-b")), da);
}

#[test]
fn different_seeds_change_the_simulated_panel() {
    let work = tempfile::tempdir().unwrap();
    let a = run_synthetic(&work.path().join("a"), 1);
    let b = run_synthetic(&work.path().join("b"), 2);
    assert_ne!(a.report.provenance.input_hashes, b.report.provenance.input_hashes);
}

#[test]
fn emits_one_curve_file_per_target_and_header_only_empty_tables() {
    let dir = tempfile::tempdir().unwrap();
    let mut report = count_report(&dir.path().join("in"));
    report.roc.truncate(2);
    report.regions.clear();
    let files = render_files(&report, None);
    let curves: Vec<&String> = files.iter().map(|(n, _)| n).filter(|n| n.starts_with("roc_")).collect();
    assert_eq!(curves, ["roc_moderate_plus.csv", "roc_severe_plus.csv"]);
    let regions = &files.iter().find(|(n, _)| n == "regions.csv").unwrap().1;
    let text = String::from_utf8(regions.clone()).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("region,target,"));

    let out = dir.path().join("out");
    emit_report(&report, None, &out).unwrap();
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), files.len());
}

#[test]
fn unwritable_output_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let report = count_report(&dir.path().join("in"));
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let err = emit_report(&report, None, &blocker.join("out")).unwrap_err();
    assert!(matches!(err, EvalError::Io { .. }));
    assert_eq!(std::fs::read(&blocker).unwrap(), b"x");
}

#[test]
fn missing_sessions_abort_with_the_pending_list() {
    let dir = tempfile::tempdir().unwrap();
    let files = write_count_fixture(dir.path(), 3, 0, 0).unwrap();
    std::fs::write(dir.path().join("empty.jsonl"), b"").unwrap();
    let text = std::fs::read_to_string(&files.config)
        .unwrap()
        .replace("mode = \"supplied\"\npath = \"reference.csv\"", "mode = \"event_log\"\npath = \"empty.jsonl\"");
    std::fs::write(&files.config, text).unwrap();
    let cfg = EvalConfig::from_file(&files.config).unwrap();
    let err = run_evaluation(&cfg).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("lack a resolved session"), "{msg}");
    assert!(msg.contains("I0"), "{msg}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn undefined_pooled_metric_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let files = write_count_fixture(dir.path(), 3, 0, 0).unwrap();
    // Every reference label becomes No/Mild without DME: no positives at all.
    let path = dir.path().join("reference.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    let rewritten: String = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 0 {
                format!("{l}\n")
            } else {
                let id = l.split(',').next().unwrap();
                format!("{id},0,0\n")
            }
        })
        .collect();
    std::fs::write(&path, rewritten).unwrap();
    let cfg = EvalConfig::from_file(&files.config).unwrap();
    let err = run_evaluation(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}
