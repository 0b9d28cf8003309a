//! The evaluation run: ingest, cascade, reconcile, select, build the
//! reference standard, compute metrics, assemble the report.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use drscreen_core::adjudication::{
    assemble_reference_standard, source_agreement, AdjudicationEngine, ReferenceProvenance, ReferenceStandardEntry,
};
use drscreen_core::cascade::classify;
use drscreen_core::eventlog::{read_log, EventRecord, LogicalClock};
use drscreen_core::metrics::{
    confidence_bin_analysis, per_region_breakdown, permutation_test, roc_auc, target_score, unweighted_kappa,
    BinaryTarget, BreakdownOptions, CaseLabel, ConfusionMatrix, MetricResult, ScoredImage,
};
use drscreen_core::model::{DmeStatus, GradeRecord, GradeValue, ImageId, MergedDr, ReferenceValue, Sex, Task};
use drscreen_core::rng::named_seed;
use drscreen_core::sampling::{
    dr_agreement_strata, estimate_sample_size, proportional_allocation, reconcile_gradability,
    select_dme_adjudication, select_dr_adjudication, select_gradability_adjudication, AdjudicationSelection, Inclusion,
};
use drscreen_core::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjudicate::{simulate_panel, TaskPairs};
use crate::config::{EvalConfig, ReferenceSource};
use crate::error::{EvalError, Result};
use crate::ingest::{ingest, read_reference, read_truth, Inputs};
use crate::report::{
    CohortRow, CurvePoint, EvalReport, GradabilityAdjudication, GradabilityTable, NamedMatrix, Provenance,
    ProvenanceCount, Quartiles, RocSeries, SampleSizeReport, SelectionSummary, StageLog, TargetMetrics,
};

pub const ALGORITHM_GRADER: &str = "algorithm";

const GRADABILITY_TASKS: [Task; 2] = [Task::DrGradability, Task::DmeGradability];

#[derive(Debug)]
pub struct PipelineOutput {
    pub report: EvalReport,
    /// Adjudication events behind the reference standard, when there are any.
    pub event_log: Option<Vec<EventRecord>>,
}

/// Everything up to and including adjudication selection.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub inputs: Inputs,
    pub algorithm: BTreeMap<ImageId, GradeRecord>,
    pub gradability: Vec<GradabilityTable>,
    /// (regional, algorithm) calls per task. DR and DME hold images both
    /// call gradable; gradability tasks hold every image.
    pub pairs: BTreeMap<Task, TaskPairs>,
    pub selections: BTreeMap<Task, AdjudicationSelection>,
    pub selection_summary: Vec<SelectionSummary>,
    pub stages: Vec<StageLog>,
}

/// One image picked for the panel, as exported by `eval select`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub task: Task,
    pub image_id: String,
    pub stratum: String,
    pub regional: String,
    pub algorithm: String,
}

fn stage(stages: &mut Vec<StageLog>, name: &str, detail: String) {
    log::info!("{name}: {detail}");
    stages.push(StageLog { stage: name.to_owned(), detail });
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| EvalError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn gradability_table(task: Task, inputs: &Inputs, algorithm: &BTreeMap<ImageId, GradeRecord>) -> Result<GradabilityTable> {
    let mut t = GradabilityTable {
        task: task.code().to_owned(),
        both_gradable: 0,
        regional_gradable_algorithm_ungradable: 0,
        regional_ungradable_algorithm_gradable: 0,
        both_ungradable: 0,
        included: 0,
        excluded: 0,
        ingested: inputs.images.len() as u64,
    };
    for (id, regional) in &inputs.regional {
        let alg = &algorithm[id];
        match (regional.gradability.for_task(task), alg.gradability.for_task(task)) {
            (true, true) => t.both_gradable += 1,
            (true, false) => t.regional_gradable_algorithm_ungradable += 1,
            (false, true) => t.regional_ungradable_algorithm_gradable += 1,
            (false, false) => t.both_ungradable += 1,
        }
        match reconcile_gradability(regional, alg, task)? {
            Inclusion::Include => t.included += 1,
            Inclusion::Exclude => t.excluded += 1,
        }
    }
    Ok(t)
}

fn task_pairs(task: Task, inputs: &Inputs, algorithm: &BTreeMap<ImageId, GradeRecord>) -> TaskPairs {
    inputs
        .regional
        .iter()
        .filter_map(|(id, r)| Some((id.clone(), (r.value_for(task)?, algorithm[id].value_for(task)?))))
        .collect()
}

fn summarize(task: Task, population: usize, sel: &AdjudicationSelection, strata: (usize, usize)) -> SelectionSummary {
    SelectionSummary {
        task: task.code().to_owned(),
        population: population as u64,
        disagreements: sel.disagreement_ids.len() as u64,
        agreed_referable_population: strata.0 as u64,
        agreed_referable_sampled: sel.agreed_referable_sample_ids.len() as u64,
        agreed_nonreferable_population: strata.1 as u64,
        agreed_nonreferable_sampled: sel.agreed_nonreferable_sample_ids.len() as u64,
        selected: sel.len() as u64,
    }
}

/// Runs ingestion through adjudication selection.
pub fn prepare(cfg: &EvalConfig) -> Result<Prepared> {
    let mut stages = Vec::new();

    let inputs = ingest(&cfg.inputs)?;
    stage(
        &mut stages,
        "ingest",
        format!(
            "{} images, {} patients, {} regional grades, {} other grade rows",
            inputs.images.len(),
            inputs.patients.len(),
            inputs.regional.len(),
            inputs.other_grades.len()
        ),
    );

    let mut algorithm = BTreeMap::new();
    for (id, cv) in &inputs.confidences {
        let call = classify(cv, &cfg.thresholds)?;
        algorithm.insert(id.clone(), call.into_grade_record(id.clone(), ALGORITHM_GRADER.into()));
    }
    stage(&mut stages, "threshold_cascade", format!("{} images classified", algorithm.len()));

    let gradability = vec![
        gradability_table(Task::Dr, &inputs, &algorithm)?,
        gradability_table(Task::Dme, &inputs, &algorithm)?,
    ];
    let pairs: BTreeMap<Task, TaskPairs> =
        Task::ALL.into_iter().map(|t| (t, task_pairs(t, &inputs, &algorithm))).collect();
    stage(
        &mut stages,
        "gradability_reconciliation",
        format!(
            "DR: {} included, {} excluded; DME: {} included, {} excluded",
            gradability[0].included, gradability[0].excluded, gradability[1].included, gradability[1].excluded
        ),
    );

    let seed = cfg.sampling.plan.seed;
    let mut selections = BTreeMap::new();
    let mut selection_summary = Vec::new();

    let dr_pairs: BTreeMap<ImageId, (MergedDr, MergedDr)> = pairs[&Task::Dr]
        .iter()
        .map(|(id, (r, a))| match (r, a) {
            (GradeValue::Dr(r), GradeValue::Dr(a)) => (id.clone(), (r.merged(), a.merged())),
            _ => unreachable!("DR pairs hold DR values"),
        })
        .collect();
    let strata = dr_agreement_strata(&dr_pairs);
    let (n_ref, n_non) = match (cfg.sampling.dr_agreed_referable, cfg.sampling.dr_agreed_nonreferable) {
        (Some(r), Some(n)) => (r.min(strata.0), n.min(strata.1)),
        _ => proportional_allocation(strata.0, strata.1, cfg.sampling.dr_agreement_fraction)?,
    };
    let dr_sel = select_dr_adjudication(&dr_pairs, n_ref, n_non, named_seed(seed, "selection/dr"))?;
    selection_summary.push(summarize(Task::Dr, dr_pairs.len(), &dr_sel, strata));
    selections.insert(Task::Dr, dr_sel);

    let dme_pairs: BTreeMap<ImageId, (DmeStatus, DmeStatus)> = pairs[&Task::Dme]
        .iter()
        .map(|(id, (r, a))| match (r, a) {
            (GradeValue::Dme(r), GradeValue::Dme(a)) => (id.clone(), (*r, *a)),
            _ => unreachable!("DME pairs hold DME values"),
        })
        .collect();
    let dme_strata = dme_pairs.values().filter(|(r, a)| r == a).fold((0, 0), |(p, n), (r, _)| {
        if r.is_referable() {
            (p + 1, n)
        } else {
            (p, n + 1)
        }
    });
    let dme_sel = select_dme_adjudication(
        &dme_pairs,
        cfg.sampling.dme_agreement_fraction,
        named_seed(seed, "selection/dme"),
    )?;
    selection_summary.push(summarize(Task::Dme, dme_pairs.len(), &dme_sel, dme_strata));
    selections.insert(Task::Dme, dme_sel);

    for task in GRADABILITY_TASKS {
        let disagreements: BTreeSet<ImageId> =
            pairs[&task].iter().filter(|(_, (r, a))| r != a).map(|(id, _)| id.clone()).collect();
        let k = cfg.sampling.gradability_target.min(disagreements.len());
        let chosen = select_gradability_adjudication(&disagreements, k, named_seed(seed, &format!("selection/{task}")))?;
        let sel = AdjudicationSelection { task: Some(task), disagreement_ids: chosen, ..Default::default() };
        let mut summary = summarize(task, pairs[&task].len(), &sel, (0, 0));
        summary.disagreements = disagreements.len() as u64;
        selection_summary.push(summary);
        selections.insert(task, sel);
    }
    stage(
        &mut stages,
        "adjudication_selection",
        selection_summary.iter().map(|s| format!("{} {}", s.task, s.selected)).collect::<Vec<_>>().join(", "),
    );

    Ok(Prepared { inputs, algorithm, gradability, pairs, selections, selection_summary, stages })
}

impl Prepared {
    /// Selected images in task then id order.
    pub fn selection_rows(&self) -> Vec<SelectionRow> {
        let mut rows = Vec::new();
        for (task, sel) in &self.selections {
            let strata = [
                ("disagreement", &sel.disagreement_ids),
                ("agreed_referable", &sel.agreed_referable_sample_ids),
                ("agreed_nonreferable", &sel.agreed_nonreferable_sample_ids),
            ];
            let mut task_rows: Vec<SelectionRow> = strata
                .iter()
                .flat_map(|(name, ids)| {
                    ids.iter().map(move |id| {
                        let (r, a) = self.pairs[task][id];
                        SelectionRow {
                            task: *task,
                            image_id: id.to_string(),
                            stratum: (*name).to_owned(),
                            regional: r.to_string(),
                            algorithm: a.to_string(),
                        }
                    })
                })
                .collect();
            task_rows.sort_by(|x, y| x.image_id.cmp(&y.image_id));
            rows.extend(task_rows);
        }
        rows
    }
}

struct ReferenceOutcome {
    dr: BTreeMap<ImageId, MergedDr>,
    dme: BTreeMap<ImageId, DmeStatus>,
    provenance: Vec<ProvenanceCount>,
    gradability: Vec<GradabilityAdjudication>,
    event_log: Option<Vec<EventRecord>>,
    mode: &'static str,
}

fn provenance_name(p: ReferenceProvenance) -> &'static str {
    match p {
        ReferenceProvenance::AgreedWithoutAdjudication => "agreed_without_adjudication",
        ReferenceProvenance::AdjudicatedConsensus => "adjudicated_consensus",
        ReferenceProvenance::SeniorTieBreak => "senior_tie_break",
    }
}

fn gradability_adjudication(task: Task, engine: &AdjudicationEngine) -> GradabilityAdjudication {
    let agreement = source_agreement(task, engine.sessions());
    let mut row = GradabilityAdjudication {
        task: task.code().to_owned(),
        regional_gradable_adjudicated_gradable: 0,
        regional_gradable_adjudicated_ungradable: 0,
        regional_ungradable_adjudicated_gradable: 0,
        regional_ungradable_adjudicated_ungradable: 0,
        adjudicated: agreement.resolved,
        agree_regional: agreement.agree_regional,
        agree_algorithm: agreement.agree_algorithm,
        regional_rate: agreement.regional_rate,
        algorithm_rate: agreement.algorithm_rate,
    };
    for s in engine.sessions().filter(|s| s.task == task) {
        let (Some(sources), Some(ReferenceValue::Gradable(fin))) = (s.sources, s.final_value) else {
            continue;
        };
        let GradeValue::Gradable(regional) = sources.regional else { continue };
        match (regional, fin) {
            (true, true) => row.regional_gradable_adjudicated_gradable += 1,
            (true, false) => row.regional_gradable_adjudicated_ungradable += 1,
            (false, true) => row.regional_ungradable_adjudicated_gradable += 1,
            (false, false) => row.regional_ungradable_adjudicated_ungradable += 1,
        }
    }
    row
}

fn from_engine(prep: &Prepared, engine: &AdjudicationEngine, mode: &'static str) -> Result<ReferenceOutcome> {
    let mut dr = BTreeMap::new();
    let mut dme = BTreeMap::new();
    let mut counts: BTreeMap<(Task, ReferenceProvenance), u64> = BTreeMap::new();
    for task in Task::ALL {
        let entries: Vec<ReferenceStandardEntry> =
            assemble_reference_standard(task, &prep.pairs[&task], engine.sessions(), &prep.selections[&task])?;
        for e in entries {
            *counts.entry((task, e.provenance)).or_default() += 1;
            match e.value {
                ReferenceValue::Dr(v) => {
                    dr.insert(e.image_id, v);
                }
                ReferenceValue::Dme(v) => {
                    dme.insert(e.image_id, v);
                }
                ReferenceValue::Gradable(_) => {}
            }
        }
    }
    let provenance = counts
        .into_iter()
        .map(|((task, p), count)| ProvenanceCount {
            task: task.code().to_owned(),
            provenance: provenance_name(p).to_owned(),
            count,
        })
        .collect();
    let gradability = GRADABILITY_TASKS.into_iter().map(|t| gradability_adjudication(t, engine)).collect();
    Ok(ReferenceOutcome { dr, dme, provenance, gradability, event_log: Some(engine.log().to_vec()), mode })
}

fn build_reference(cfg: &EvalConfig, prep: &Prepared) -> Result<ReferenceOutcome> {
    match &cfg.reference {
        ReferenceSource::Supplied { path } => {
            let supplied = read_reference(path)?;
            let mut dr = BTreeMap::new();
            let mut dme = BTreeMap::new();
            for id in prep.pairs[&Task::Dr].keys() {
                if let Some(v) = supplied.get(id).and_then(|s| s.dr) {
                    dr.insert(id.clone(), v);
                }
            }
            for id in prep.pairs[&Task::Dme].keys() {
                if let Some(v) = supplied.get(id).and_then(|s| s.dme) {
                    dme.insert(id.clone(), v);
                }
            }
            let provenance = vec![
                ProvenanceCount { task: "dr".into(), provenance: "supplied".into(), count: dr.len() as u64 },
                ProvenanceCount { task: "dme".into(), provenance: "supplied".into(), count: dme.len() as u64 },
            ];
            Ok(ReferenceOutcome { dr, dme, provenance, gradability: Vec::new(), event_log: None, mode: "supplied" })
        }
        ReferenceSource::EventLog { path, .. } => {
            let records = read_log(path)?;
            let engine = AdjudicationEngine::replay(&records)?;
            from_engine(prep, &engine, "event_log")
        }
        ReferenceSource::Simulated { truth, specialist_accuracy, panels } => {
            let truth = read_truth(truth)?;
            let selections: Vec<(Task, BTreeSet<ImageId>)> =
                prep.selections.iter().map(|(t, s)| (*t, s.all_ids())).collect();
            let engine = simulate_panel(
                &selections,
                &prep.pairs,
                &truth,
                *specialist_accuracy,
                panels,
                named_seed(cfg.seed, "panel"),
                &LogicalClock::default(),
            )?;
            from_engine(prep, &engine, "simulated")
        }
    }
}

/// Linear-interpolation quartiles; `None` for an empty sample.
pub fn quartiles(values: &[f64]) -> Option<Quartiles> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = q * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some(Quartiles { q1: at(0.25), median: at(0.5), q3: at(0.75) })
}

fn cohort_row(region: String, inputs: &Inputs, keep: impl Fn(u8) -> bool) -> CohortRow {
    let patients: Vec<_> = inputs.patients.values().filter(|p| keep(p.region.get())).collect();
    let grades: Vec<_> = inputs
        .regional
        .values()
        .filter(|g| inputs.images.get(&g.image_id).is_some_and(|i| keep(i.region.get())))
        .collect();
    let lab = |f: &dyn Fn(&drscreen_core::model::PatientRecord) -> Option<f64>| {
        quartiles(&patients.iter().filter_map(|p| f(p)).collect::<Vec<_>>())
    };
    let female = (!patients.is_empty())
        .then(|| patients.iter().filter(|p| p.sex == Sex::F).count() as f64 / patients.len() as f64);

    let dr: Vec<MergedDr> = grades.iter().filter_map(|g| g.dr.map(|d| d.merged())).collect();
    let dr_distribution = (!dr.is_empty()).then(|| {
        let mut shares = [0.0; 4];
        for d in &dr {
            shares[d.index()] += 1.0;
        }
        shares.map(|c| c / dr.len() as f64)
    });
    let dme: Vec<DmeStatus> = grades.iter().filter_map(|g| g.dme).collect();
    let referable_dme =
        (!dme.is_empty()).then(|| dme.iter().filter(|d| d.is_referable()).count() as f64 / dme.len() as f64);

    CohortRow {
        region,
        patients: patients.len() as u64,
        images: grades.len() as u64,
        female,
        age: lab(&|p| Some(p.age)),
        hba1c: lab(&|p| p.hba1c),
        fbs: lab(&|p| p.fbs),
        ldl: lab(&|p| p.ldl),
        dr_distribution,
        referable_dme,
    }
}

/// Pooled row first, then each region that has images.
pub fn cohort_table(inputs: &Inputs) -> Vec<CohortRow> {
    let regions: BTreeSet<u8> = inputs.images.values().map(|i| i.region.get()).collect();
    let mut rows = vec![cohort_row("All".into(), inputs, |_| true)];
    rows.extend(regions.into_iter().map(|r| cohort_row(r.to_string(), inputs, move |x| x == r)));
    rows
}

fn scored_images(prep: &Prepared, reference: &ReferenceOutcome) -> Vec<ScoredImage> {
    let mut out = Vec::new();
    for (id, image) in &prep.inputs.images {
        let ref_dr = reference.dr.get(id).copied();
        let ref_dme = reference.dme.get(id).copied();
        if ref_dr.is_none() && ref_dme.is_none() {
            continue;
        }
        let regional = &prep.inputs.regional[id];
        let alg = &prep.algorithm[id];
        let label = |g: &GradeRecord| CaseLabel {
            dr: ref_dr.and(g.dr.map(|d| d.merged())),
            dme: ref_dme.and(g.dme),
        };
        out.push(ScoredImage {
            image_id: id.clone(),
            region: image.region,
            reference: CaseLabel { dr: ref_dr, dme: ref_dme },
            grader: label(regional),
            algorithm: label(alg),
            scores: prep.inputs.confidences.get(id).copied(),
        });
    }
    out
}

/// Paired permutation p-value for algorithm minus grader on one target:
/// sensitivity over reference positives or specificity over reference negatives.
fn paired_p_value(images: &[ScoredImage], target: &BinaryTarget, positives: bool, draws: usize, seed: u64) -> Result<Option<f64>> {
    let paired: Vec<(bool, bool, ())> = images
        .iter()
        .filter(|i| target.positive(&i.reference) == Some(positives))
        .filter_map(|i| {
            let a = target.positive(&i.algorithm)?;
            let g = target.positive(&i.grader)?;
            Some((a == positives, g == positives, ()))
        })
        .collect();
    if draws == 0 || paired.is_empty() {
        return Ok(None);
    }
    let metric = |s: &[(bool, ())]| Some(s.iter().filter(|(c, _)| *c).count() as f64 / s.len() as f64);
    Ok(Some(permutation_test(&paired, metric, draws, seed)?.p_value))
}

fn roc_series(images: &[ScoredImage], target: &BinaryTarget) -> Result<RocSeries> {
    let (scores, labels): (Vec<f64>, Vec<bool>) = images
        .iter()
        .filter(|i| target.positive(&i.algorithm).is_some())
        .filter_map(|i| Some((target_score(target, i.scores.as_ref()?), target.positive(&i.reference)?)))
        .unzip();
    let (points, auc) = roc_auc(&scores, &labels)?;
    Ok(RocSeries {
        target: target.name(),
        auc,
        n: scores.len() as u64,
        points: points
            .into_iter()
            .map(|p| CurvePoint { threshold: p.threshold.is_finite().then_some(p.threshold), fpr: p.fpr, tpr: p.tpr })
            .collect(),
    })
}

fn require(m: &Option<MetricResult>, what: &str, target: &BinaryTarget) -> Result<()> {
    if m.is_none() {
        return Err(Error::UndefinedMetric(format!("pooled {what} for {target} is undefined on this data")).into());
    }
    Ok(())
}

pub fn run_evaluation(cfg: &EvalConfig) -> Result<PipelineOutput> {
    let prep = prepare(cfg)?;
    let mut stages = prep.stages.clone();

    let reference = build_reference(cfg, &prep)?;
    stage(
        &mut stages,
        "reference_assembly",
        format!("{} mode: {} DR and {} DME reference labels", reference.mode, reference.dr.len(), reference.dme.len()),
    );

    let images = scored_images(&prep, &reference);
    let breakdown = per_region_breakdown(
        &images,
        &cfg.targets,
        &BreakdownOptions { bootstrap_resamples: cfg.bootstrap_resamples, seed: named_seed(cfg.seed, "bootstrap") },
    );

    let mut metrics = Vec::new();
    let mut roc = Vec::new();
    for target in &cfg.targets {
        let name = target.name();
        let row = breakdown
            .rows
            .iter()
            .find(|r| r.region == "All" && r.target == name)
            .expect("breakdown has a pooled row per target");
        require(&row.grader_sensitivity, "sensitivity", target)?;
        require(&row.grader_specificity, "specificity", target)?;
        require(&row.algorithm_sensitivity, "sensitivity", target)?;
        require(&row.algorithm_specificity, "specificity", target)?;
        let p = |positives: bool, metric: &str| {
            paired_p_value(
                &images,
                target,
                positives,
                cfg.permutation_draws,
                named_seed(cfg.seed, &format!("permutation/{name}/{metric}")),
            )
        };
        metrics.push(TargetMetrics {
            target: name.clone(),
            grader_sensitivity: row.grader_sensitivity.clone(),
            grader_specificity: row.grader_specificity.clone(),
            algorithm_sensitivity: row.algorithm_sensitivity.clone(),
            algorithm_specificity: row.algorithm_specificity.clone(),
            algorithm_auc: row.algorithm_auc.clone(),
            sensitivity_p_value: p(true, "sensitivity")?,
            specificity_p_value: p(false, "specificity")?,
        });
        roc.push(roc_series(&images, target)?);
    }

    let all_kappa = breakdown.kappas.iter().find(|k| k.region == "All");
    let mut confusion = Vec::new();
    let dr_pairs = |pick: fn(&ScoredImage) -> Option<MergedDr>| {
        images.iter().filter_map(move |i| Some((i.reference.dr?, pick(i)?)))
    };
    confusion.push(NamedMatrix {
        rater: "grader".into(),
        task: "dr".into(),
        matrix: ConfusionMatrix::merged_dr(dr_pairs(|i| i.grader.dr)),
        kappa: all_kappa.and_then(|k| k.grader_kappa.clone()),
    });
    confusion.push(NamedMatrix {
        rater: "algorithm".into(),
        task: "dr".into(),
        matrix: ConfusionMatrix::merged_dr(dr_pairs(|i| i.algorithm.dr)),
        kappa: all_kappa.and_then(|k| k.algorithm_kappa.clone()),
    });
    for (rater, pick) in [
        ("grader", (|i: &ScoredImage| i.grader.dme) as fn(&ScoredImage) -> Option<DmeStatus>),
        ("algorithm", |i: &ScoredImage| i.algorithm.dme),
    ] {
        let pairs = images.iter().filter_map(|i| Some((i.reference.dme?, pick(i)?)));
        let matrix = ConfusionMatrix::from_pairs(pairs, &[DmeStatus::Absent, DmeStatus::Referable])?;
        let kappa = unweighted_kappa(&matrix).ok().map(|k| MetricResult::point("kappa", k, matrix.total()));
        confusion.push(NamedMatrix { rater: rater.into(), task: "dme".into(), matrix, kappa });
    }

    let confidence_bins = confidence_bin_analysis(&images, &cfg.bin_edges, &cfg.targets)?;
    stage(
        &mut stages,
        "metrics",
        format!("{} scored images, {} targets, {} region rows", images.len(), cfg.targets.len(), breakdown.rows.len()),
    );

    let computed = estimate_sample_size(&cfg.sampling.plan)?;
    let benchmark = cfg.sampling.benchmark;
    let deviates = computed != benchmark;
    let note = if deviates {
        format!(
            "computed n_core {} / n_inflated {} differs from the benchmark {} / {}",
            computed.n_core, computed.n_inflated, benchmark.n_core, benchmark.n_inflated
        )
    } else {
        "computed sample sizes match the benchmark".to_owned()
    };
    if deviates {
        log::warn!("{note}");
    }

    let mut input_hashes = BTreeMap::new();
    for (name, path) in [
        ("grades", &cfg.inputs.grades),
        ("confidences", &cfg.inputs.confidences),
        ("images", &cfg.inputs.images),
        ("patients", &cfg.inputs.patients),
    ] {
        input_hashes.insert(name.to_owned(), file_sha256(path)?);
    }
    let reference_path = match &cfg.reference {
        ReferenceSource::Supplied { path } | ReferenceSource::EventLog { path, .. } => path,
        ReferenceSource::Simulated { truth, .. } => truth,
    };
    input_hashes.insert("reference".to_owned(), file_sha256(reference_path)?);

    let mut counts = BTreeMap::new();
    counts.insert("images".to_owned(), prep.inputs.images.len() as u64);
    counts.insert("patients".to_owned(), prep.inputs.patients.len() as u64);
    counts.insert("dr_included".to_owned(), prep.pairs[&Task::Dr].len() as u64);
    counts.insert("dme_included".to_owned(), prep.pairs[&Task::Dme].len() as u64);
    counts.insert("dr_reference".to_owned(), reference.dr.len() as u64);
    counts.insert("dme_reference".to_owned(), reference.dme.len() as u64);
    counts.insert("scored_images".to_owned(), images.len() as u64);
    counts.insert(
        "adjudication_events".to_owned(),
        reference.event_log.as_ref().map_or(0, |l| l.len() as u64),
    );

    let cohort = cohort_table(&prep.inputs);
    stage(&mut stages, "report", format!("{} cohort rows, sample size deviates: {deviates}", cohort.len()));

    let report = EvalReport {
        provenance: Provenance {
            seed: cfg.seed,
            config_hash: cfg.config_hash.clone(),
            input_hashes,
            counts,
            reference_mode: reference.mode.to_owned(),
        },
        pipeline: stages,
        sample_size: SampleSizeReport {
            plan: cfg.sampling.plan,
            computed,
            benchmark,
            deviates_from_benchmark: deviates,
            note,
        },
        cohort,
        gradability: prep.gradability.clone(),
        gradability_adjudication: reference.gradability,
        selection: prep.selection_summary.clone(),
        reference: reference.provenance,
        confusion,
        metrics,
        roc,
        regions: breakdown.rows,
        region_kappas: breakdown.kappas,
        confidence_bins,
    };
    Ok(PipelineOutput { report, event_log: reference.event_log })
}
