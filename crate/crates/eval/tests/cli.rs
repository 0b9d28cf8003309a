use std::path::Path;
use std::process::{Command, Output};

use drscreen_core::eventlog::read_log;
use drscreen_eval::fixtures::write_count_fixture;

fn eval(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eval")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn run_writes_a_report_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let files = write_count_fixture(&dir.path().join("in"), 4, 0, 0).unwrap();
    let out = dir.path().join("report");
    let o = eval(&["run", "--config", p(&files.config), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["provenance"]["reference_mode"], "supplied");
    assert!(out.join("metrics.csv").exists());
}

#[test]
fn invalid_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let files = write_count_fixture(dir.path(), 4, 0, 0).unwrap();
    let conf = dir.path().join("confidences.csv");
    let text = std::fs::read_to_string(&conf).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    let mut fields: Vec<String> = lines[1].split(',').map(str::to_owned).collect();
    fields[1] = "1.2".into();
    lines[1] = fields.join(",");
    std::fs::write(&conf, lines.join("\n") + "\n").unwrap();

    let o = eval(&["run", "--config", p(&files.config), "--out", p(&dir.path().join("report"))]);
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("confidences.csv:2"), "{stderr}");
    assert!(!dir.path().join("report").exists());
}

#[test]
fn undefined_metric_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.csv");
    std::fs::write(&pairs, "reference_dr,predicted_dr,reference_dme,predicted_dme\n0,0,,\n0,1,,\n").unwrap();
    let o = eval(&["metrics", "--pairs", p(&pairs), "--target", "moderate+"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn metrics_prints_operating_point_with_intervals() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.csv");
    let mut text = String::from("reference_dr,predicted_dr,reference_dme,predicted_dme\n");
    // 8 of 10 positives found, 18 of 20 negatives cleared.
    for i in 0..10 {
        text.push_str(&format!("2,{},0,0\n", if i < 8 { 2 } else { 0 }));
    }
    for i in 0..20 {
        text.push_str(&format!("0,{},0,0\n", if i < 18 { 0 } else { 1 }));
    }
    std::fs::write(&pairs, text).unwrap();
    let o = eval(&["metrics", "--pairs", p(&pairs), "--target", "moderate+"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "metric,estimate,ci_low,ci_high,n");
    // Clopper-Pearson bounds for 8/10 and 18/20 from exact beta quantiles.
    assert_eq!(lines[1], "sensitivity,0.800,0.444,0.975,10");
    assert_eq!(lines[2], "specificity,0.900,0.683,0.988,20");
    assert!(lines[3].starts_with("quadratic_weighted_kappa,"));

    let bad = eval(&["metrics", "--pairs", p(&pairs), "--target", "mild+"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn adjudicate_sim_walks_rounds_and_tiebreaks() {
    let dir = tempfile::tempdir().unwrap();
    let grades = dir.path().join("grades.csv");
    let header = "image_id,grader_id,grader_role,region,dr_gradable,dr_severity,dme_gradable,dme,round,comment\n";
    let rows = [
        // I1: agree in round one.
        "I1,s-a,specialist,1,1,2,1,0,1,",
        "I1,s-b,specialist,1,1,2,1,0,1,",
        // I2: disagree for three rounds, senior settles.
        "I2,s-a,specialist,1,1,2,1,0,1,",
        "I2,s-b,specialist,1,1,0,1,0,1,",
        "I2,s-a,specialist,1,1,2,1,0,2,",
        "I2,s-b,specialist,1,1,0,1,0,2,",
        "I2,s-a,specialist,1,1,3,1,0,3,",
        "I2,s-b,specialist,1,1,1,1,0,3,",
        "I2,senior,senior,1,1,3,1,0,4,",
        // Not consumed: I1 already agreed.
        "I1,s-a,specialist,1,1,2,1,0,2,",
    ];
    std::fs::write(&grades, format!("{header}{}\n", rows.join("\n"))).unwrap();
    let script = dir.path().join("script.toml");
    std::fs::write(
        &script,
        r#"
[[session]]
image_id = "I1"
task = "dr"
specialist_a = "s-a"
specialist_b = "s-b"
senior = "senior"

[[session]]
image_id = "I2"
task = "dr"
specialist_a = "s-a"
specialist_b = "s-b"
senior = "senior"
"#,
    )
    .unwrap();
    let log = dir.path().join("events.jsonl");
    let o = eval(&["adjudicate-sim", "--grades", p(&grades), "--script", p(&script), "--log", p(&log)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<serde_json::Value> =
        String::from_utf8(o.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["state"], "consensus");
    assert_eq!(lines[0]["specialist_grades"], 2);
    assert_eq!(lines[1]["state"], "tie_broken");
    assert_eq!(lines[1]["specialist_grades"], 6);
    assert_eq!(lines[1]["senior_grades"], 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("I1 s-a round 2"));
    // Open plus grades per session: 1 + 2 for I1, 1 + 6 + 1 for I2.
    assert_eq!(read_log(&log).unwrap().len(), 3 + 8);

    // Drop the senior row: the tie-break cannot happen.
    std::fs::write(&grades, format!("{header}{}\n", rows[..8].join("\n"))).unwrap();
    let o = eval(&["adjudicate-sim", "--grades", p(&grades), "--script", p(&script)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tie-break"));
}

#[test]
fn synth_then_run_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    let mut text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/cohort_spec.toml")).unwrap();
    // Shrink every region so the run stays quick.
    text = text
        .lines()
        .map(|l| {
            if l.starts_with("images = ") {
                "images = 120".to_owned()
            } else if l.starts_with("patients = ") {
                "patients = 40".to_owned()
            } else {
                l.to_owned()
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(&spec, text).unwrap();
    let cohort = dir.path().join("cohort");
    let o = eval(&["synth", "--spec", p(&spec), "--out", p(&cohort), "--seed", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let config = cohort.join("eval.toml");
    let cfg = std::fs::read_to_string(&config)
        .unwrap()
        .replace("bootstrap_resamples = 1000", "bootstrap_resamples = 0")
        .replace("permutation_draws = 2000", "permutation_draws = 0");
    std::fs::write(&config, cfg).unwrap();
    let selection = dir.path().join("selection.csv");
    let o = eval(&["select", "--config", p(&config), "--out", p(&selection)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sel = std::fs::read_to_string(&selection).unwrap();
    assert!(sel.starts_with("task,image_id,stratum,regional,algorithm\n"));
    assert!(sel.lines().count() > 1);

    let out = dir.path().join("report");
    let o = eval(&["run", "--config", p(&config), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("adjudication_log.jsonl").exists());
}
