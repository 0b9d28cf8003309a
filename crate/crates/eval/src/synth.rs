//! Synthetic screening cohorts with known ground truth.
//!
//! Truth is drawn per region from DR and DME prevalences. Regional grades
//! come from a per-region confusion model over the merged DR scale plus
//! DME sensitivity/specificity. Algorithm calls are drawn from configured
//! sensitivity/specificity, and confidences are then built so that the
//! threshold cascade reproduces each call exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use drscreen_core::cascade::{classify, AlgorithmCall, CascadeThresholds};
use drscreen_core::model::{
    ConfidenceVector, DmeStatus, DrSeverity, GradeRecord, Gradability, GraderRole, ImageId, ImageRecord, MergedDr,
    PatientId, PatientRecord, Region, Sex,
};
use drscreen_core::rng::{named_seed, rng_for, StreamRng};
use drscreen_core::Error;
use rand::Rng;
use serde::Deserialize;

use crate::error::{EvalError, Result};
use crate::ingest::{
    write_rows, ConfidenceRow, GradeRow, ImageRow, PatientRow, Truth, TruthRow, CONFIDENCE_COLUMNS, GRADE_COLUMNS,
    IMAGE_COLUMNS, PATIENT_COLUMNS, TRUTH_COLUMNS,
};

/// Row-normalised regional-grader confusion over the merged DR scale,
/// rows = truth, from the published grader-vs-reference counts.
pub const DEFAULT_GRADER_CONFUSION: [[f64; 4]; 4] = [
    [21843.0, 355.0, 12.0, 33.0],
    [729.0, 1724.0, 13.0, 15.0],
    [17.0, 79.0, 100.0, 8.0],
    [56.0, 87.0, 14.0, 241.0],
];

const PREVALENCE_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub region: u8,
    pub patients: usize,
    pub images: usize,
    /// Merged DR prevalences; must sum to 1 within rounding.
    pub no_mild: f64,
    pub moderate: f64,
    pub severe: f64,
    pub pdr: f64,
    pub dme: f64,
    pub female: f64,
    /// `[median, q1, q3]`
    pub age: [f64; 3],
    pub hba1c: Option<[f64; 3]>,
    pub fbs: Option<[f64; 3]>,
    pub ldl: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraderModel {
    /// Rows = truth, columns = grade; each row is normalised.
    #[serde(default = "default_confusion")]
    pub confusion: [[f64; 4]; 4],
    /// Per-region replacements for `confusion`, keyed by region number.
    #[serde(default)]
    pub region_confusion: BTreeMap<String, [[f64; 4]; 4]>,
    #[serde(default = "default_grader_dme_sens")]
    pub dme_sensitivity: f64,
    #[serde(default = "default_grader_dme_spec")]
    pub dme_specificity: f64,
    /// Probability that a gradability call is flipped.
    #[serde(default)]
    pub gradability_error: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmModel {
    /// For moderate-or-worse DR against truth.
    pub sensitivity: f64,
    pub specificity: f64,
    pub dme_sensitivity: f64,
    pub dme_specificity: f64,
    #[serde(default)]
    pub gradability_error: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    /// Share of true No/Mild images that are Mild.
    #[serde(default = "default_mild_fraction")]
    pub mild_fraction: f64,
    #[serde(default)]
    pub dr_ungradable: f64,
    #[serde(default)]
    pub dme_ungradable: f64,
    pub grader: GraderModel,
    pub algorithm: AlgorithmModel,
    /// Same dotted keys as the evaluation config; defaults when absent.
    #[serde(default)]
    pub thresholds: Option<toml::Table>,
    #[serde(rename = "region")]
    pub regions: Vec<RegionSpec>,
}

fn default_confusion() -> [[f64; 4]; 4] {
    DEFAULT_GRADER_CONFUSION
}

fn default_grader_dme_sens() -> f64 {
    0.613
}

fn default_grader_dme_spec() -> f64 {
    0.992
}

fn default_mild_fraction() -> f64 {
    0.3
}

fn domain(msg: String) -> EvalError {
    Error::Domain(msg).into()
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(domain(format!("{name} = {v} is outside [0, 1]")))
    }
}

fn normalise(name: &str, m: &[[f64; 4]; 4]) -> Result<[[f64; 4]; 4]> {
    let mut out = *m;
    for (i, row) in out.iter_mut().enumerate() {
        if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(domain(format!("{name} row {i} has a negative or non-finite entry")));
        }
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            return Err(domain(format!("{name} row {i} is all zero")));
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

impl CohortSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: CohortSpec = toml::from_str(text).map_err(|e| EvalError::Config(format!("cohort spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn thresholds(&self) -> Result<CascadeThresholds> {
        match &self.thresholds {
            Some(t) => Ok(CascadeThresholds::from_table(t)?),
            None => Ok(CascadeThresholds::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        unit("mild_fraction", self.mild_fraction)?;
        unit("dr_ungradable", self.dr_ungradable)?;
        unit("dme_ungradable", self.dme_ungradable)?;
        unit("grader.dme_sensitivity", self.grader.dme_sensitivity)?;
        unit("grader.dme_specificity", self.grader.dme_specificity)?;
        unit("grader.gradability_error", self.grader.gradability_error)?;
        let a = &self.algorithm;
        unit("algorithm.sensitivity", a.sensitivity)?;
        unit("algorithm.specificity", a.specificity)?;
        unit("algorithm.dme_sensitivity", a.dme_sensitivity)?;
        unit("algorithm.dme_specificity", a.dme_specificity)?;
        unit("algorithm.gradability_error", a.gradability_error)?;
        normalise("grader.confusion", &self.grader.confusion)?;
        for (key, m) in &self.grader.region_confusion {
            normalise(&format!("grader.region_confusion.{key}"), m)?;
        }
        self.thresholds()?;
        if self.regions.is_empty() {
            return Err(domain("cohort spec has no regions".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.regions {
            Region::new(r.region)?;
            if !seen.insert(r.region) {
                return Err(domain(format!("region {} is listed twice", r.region)));
            }
            let p = [r.no_mild, r.moderate, r.severe, r.pdr];
            for (name, v) in ["no_mild", "moderate", "severe", "pdr", "dme", "female"].iter().zip(
                p.iter().copied().chain([r.dme, r.female]),
            ) {
                unit(&format!("region {} {name}", r.region), v)?;
            }
            let total: f64 = p.iter().sum();
            if (total - 1.0).abs() > PREVALENCE_TOLERANCE {
                return Err(domain(format!(
                    "region {}: DR prevalences sum to {total:.4}, expected 1",
                    r.region
                )));
            }
            if r.patients == 0 && r.images > 0 {
                return Err(domain(format!("region {} has images but no patients", r.region)));
            }
            for (name, q) in [("age", Some(r.age)), ("hba1c", r.hba1c), ("fbs", r.fbs), ("ldl", r.ldl)] {
                if let Some([m, q1, q3]) = q {
                    if !(q1 <= m && m <= q3 && q1 >= 0.0) {
                        return Err(domain(format!("region {} {name}: need 0 <= q1 <= median <= q3", r.region)));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Ground truth plus every input file's records.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    pub images: Vec<ImageRecord>,
    pub patients: Vec<PatientRecord>,
    pub regional: Vec<(GradeRecord, Region)>,
    pub confidences: Vec<(ImageId, ConfidenceVector)>,
    pub truth: BTreeMap<ImageId, Truth>,
    /// The calls the confidences were built to reproduce.
    pub algorithm: BTreeMap<ImageId, AlgorithmCall>,
    pub thresholds: CascadeThresholds,
}

fn pick(rng: &mut StreamRng, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Piecewise-linear draw through the quartiles, with tails reaching twice
/// the half-spread beyond q1 and q3.
fn quartile_draw(rng: &mut StreamRng, [m, q1, q3]: [f64; 3]) -> f64 {
    let knots = [(0.0, q1 - 2.0 * (m - q1)), (0.25, q1), (0.5, m), (0.75, q3), (1.0, q3 + 2.0 * (q3 - m))];
    let u: f64 = rng.random();
    let i = knots.iter().rposition(|(p, _)| *p <= u).unwrap_or(0).min(knots.len() - 2);
    let ((p0, v0), (p1, v1)) = (knots[i], knots[i + 1]);
    (v0 + (v1 - v0) * (u - p0) / (p1 - p0)).max(0.0)
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (v * f).round() / f
}

fn five_level(merged: MergedDr, rng: &mut StreamRng, mild_fraction: f64) -> DrSeverity {
    match merged {
        MergedDr::NoOrMild if rng.random_bool(mild_fraction) => DrSeverity::Mild,
        MergedDr::NoOrMild => DrSeverity::NoDr,
        MergedDr::Moderate => DrSeverity::Moderate,
        MergedDr::Severe => DrSeverity::Severe,
        MergedDr::Proliferative => DrSeverity::Proliferative,
    }
}

/// Grade on the five-level scale from a merged call: the truth level when
/// the merged category matches, otherwise the category's canonical level.
fn graded_level(truth: DrSeverity, call: MergedDr) -> DrSeverity {
    if truth.merged() == call {
        return truth;
    }
    match call {
        MergedDr::NoOrMild => DrSeverity::NoDr,
        MergedDr::Moderate => DrSeverity::Moderate,
        MergedDr::Severe => DrSeverity::Severe,
        MergedDr::Proliferative => DrSeverity::Proliferative,
    }
}

fn flip(rng: &mut StreamRng, value: bool, p: f64) -> bool {
    if p > 0.0 && rng.random_bool(p) {
        !value
    } else {
        value
    }
}

fn binary_call(rng: &mut StreamRng, truth: bool, sensitivity: f64, specificity: f64) -> bool {
    if truth {
        rng.random_bool(sensitivity)
    } else {
        !rng.random_bool(specificity)
    }
}

fn above(rng: &mut StreamRng, t: f64) -> f64 {
    t + (1.0 - t) * rng.random::<f64>()
}

fn below(rng: &mut StreamRng, t: f64) -> f64 {
    t * rng.random::<f64>()
}

/// DR scores whose cascade call is `level`: a peak on `level` and the rest
/// spread over the other levels, retried until the cascade agrees.
fn dr_scores_for(level: DrSeverity, thresholds: &CascadeThresholds, rng: &mut StreamRng) -> [f64; 5] {
    let target = level.code() as usize;
    for _ in 0..32 {
        let u: f64 = rng.random();
        let peak = 1.0 - 0.5 * u * u;
        let mut scores = [0.0; 5];
        scores[target] = peak;
        // Lower levels for a positive call, any level for no DR.
        let others: Vec<usize> = if target == 0 { (1..5).collect() } else { (0..target).collect() };
        let weights: Vec<f64> = others.iter().map(|_| rng.random::<f64>() + 1e-9).collect();
        let total: f64 = weights.iter().sum();
        for (i, w) in others.iter().zip(&weights) {
            scores[*i] = (1.0 - peak) * w / total;
        }
        let cv = ConfidenceVector { dr_scores: scores, dme_score: 0.0, dr_gradability_score: 1.0, dme_gradability_score: 1.0, quality_score: 1.0 };
        if classify(&cv, thresholds).ok().and_then(|c| c.dr) == Some(level) {
            return scores;
        }
    }
    let mut one_hot = [0.0; 5];
    one_hot[target] = 1.0;
    one_hot
}

/// Confidences that the cascade maps back to `call`. Ungradable tasks get
/// scores on the matching side of their thresholds as well.
pub fn confidences_for(call: &AlgorithmCall, thresholds: &CascadeThresholds, rng: &mut StreamRng) -> ConfidenceVector {
    let g = call.gradability;
    let dr_level = call.dr.unwrap_or_else(|| five_level(MergedDr::NoOrMild, rng, 0.5));
    let dme_score = match call.dme {
        Some(DmeStatus::Referable) => above(rng, thresholds.dme),
        Some(DmeStatus::Absent) => below(rng, thresholds.dme),
        None if rng.random_bool(0.5) => above(rng, thresholds.dme),
        None => below(rng, thresholds.dme),
    };
    ConfidenceVector {
        dr_scores: dr_scores_for(dr_level, thresholds, rng),
        dme_score,
        dr_gradability_score: if g.dr_gradable { above(rng, thresholds.gradability.dr) } else { below(rng, thresholds.gradability.dr) },
        dme_gradability_score: if g.dme_gradable {
            above(rng, thresholds.gradability.dme)
        } else {
            below(rng, thresholds.gradability.dme)
        },
        quality_score: rng.random(),
    }
}

pub const REGIONAL_ROLE_PREFIX: &str = "regional-";

pub fn generate_synthetic_cohort(spec: &CohortSpec, seed: u64) -> Result<SyntheticCohort> {
    spec.validate()?;
    let thresholds = spec.thresholds()?;
    let default_confusion = normalise("grader.confusion", &spec.grader.confusion)?;
    let base = named_seed(seed, "synthesis");

    let mut cohort = SyntheticCohort {
        images: Vec::new(),
        patients: Vec::new(),
        regional: Vec::new(),
        confidences: Vec::new(),
        truth: BTreeMap::new(),
        algorithm: BTreeMap::new(),
        thresholds,
    };

    for r in &spec.regions {
        let region = Region::new(r.region)?;
        let confusion = match spec.grader.region_confusion.get(&r.region.to_string()) {
            Some(m) => normalise("grader.region_confusion", m)?,
            None => default_confusion,
        };
        let mut rng = rng_for(named_seed(base, &format!("region-{}", r.region)));
        let prevalence = [r.no_mild, r.moderate, r.severe, r.pdr];

        for k in 0..r.patients {
            let patient_id = PatientId(format!("P{:02}-{:05}", r.region, k));
            let lab = |rng: &mut StreamRng, q: Option<[f64; 3]>, d| q.map(|q| round_to(quartile_draw(rng, q), d));
            let age = quartile_draw(&mut rng, r.age).round();
            let sex = if rng.random_bool(r.female) { Sex::F } else { Sex::M };
            let hba1c = lab(&mut rng, r.hba1c, 1);
            let fbs = lab(&mut rng, r.fbs, 0);
            let ldl = lab(&mut rng, r.ldl, 0);
            cohort.patients.push(PatientRecord { patient_id, region, age, sex, hba1c, fbs, ldl });
        }

        for k in 0..r.images {
            let image_id = ImageId(format!("I{:02}-{:05}", r.region, k));
            let patient_id = PatientId(format!("P{:02}-{:05}", r.region, k % r.patients));
            cohort.images.push(ImageRecord {
                image_id: image_id.clone(),
                patient_id,
                region,
                camera_make: "synthetic".into(),
                camera_model: "synthetic".into(),
                capture_year: 2016,
            });

            let merged = MergedDr::from_index(pick(&mut rng, &prevalence)).expect("four categories");
            let truth = Truth {
                gradability: Gradability {
                    dr_gradable: !rng.random_bool(spec.dr_ungradable),
                    dme_gradable: !rng.random_bool(spec.dme_ungradable),
                },
                dr: five_level(merged, &mut rng, spec.mild_fraction),
                dme: DmeStatus::from_flag(rng.random_bool(r.dme)),
            };

            let g = &spec.grader;
            let grader_gradability = Gradability {
                dr_gradable: flip(&mut rng, truth.gradability.dr_gradable, g.gradability_error),
                dme_gradable: flip(&mut rng, truth.gradability.dme_gradable, g.gradability_error),
            };
            let graded_merged = MergedDr::from_index(pick(&mut rng, &confusion[merged.index()])).expect("four categories");
            let graded_dme =
                DmeStatus::from_flag(binary_call(&mut rng, truth.dme.is_referable(), g.dme_sensitivity, g.dme_specificity));
            cohort.regional.push((
                GradeRecord {
                    image_id: image_id.clone(),
                    grader_id: format!("{REGIONAL_ROLE_PREFIX}{:02}", r.region).into(),
                    grader_role: GraderRole::RegionalGrader,
                    gradability: grader_gradability,
                    dr: grader_gradability.dr_gradable.then(|| graded_level(truth.dr, graded_merged)),
                    dme: grader_gradability.dme_gradable.then_some(graded_dme),
                    round: 0,
                    comment: String::new(),
                    timestamp: None,
                },
                region,
            ));

            let a = &spec.algorithm;
            let alg_gradability = Gradability {
                dr_gradable: flip(&mut rng, truth.gradability.dr_gradable, a.gradability_error),
                dme_gradable: flip(&mut rng, truth.gradability.dme_gradable, a.gradability_error),
            };
            let referable = truth.dr.merged().is_referable();
            let positive = binary_call(&mut rng, referable, a.sensitivity, a.specificity);
            let alg_dr = match (positive, referable) {
                (true, true) | (false, false) => truth.dr,
                (true, false) => DrSeverity::Moderate,
                (false, true) => DrSeverity::NoDr,
            };
            let alg_dme =
                DmeStatus::from_flag(binary_call(&mut rng, truth.dme.is_referable(), a.dme_sensitivity, a.dme_specificity));
            let call = AlgorithmCall {
                gradability: alg_gradability,
                dr: alg_gradability.dr_gradable.then_some(alg_dr),
                dme: alg_gradability.dme_gradable.then_some(alg_dme),
            };
            let cv = confidences_for(&call, &thresholds, &mut rng);
            debug_assert_eq!(classify(&cv, &thresholds).ok(), Some(call));
            cohort.confidences.push((image_id.clone(), cv));
            cohort.algorithm.insert(image_id.clone(), call);
            cohort.truth.insert(image_id, truth);
        }
    }
    Ok(cohort)
}

/// File names written by [`write_cohort`].
pub struct CohortFiles {
    pub images: PathBuf,
    pub patients: PathBuf,
    pub grades: PathBuf,
    pub confidences: PathBuf,
    pub truth: PathBuf,
    pub config: PathBuf,
}

impl CohortFiles {
    pub fn in_dir(dir: &Path) -> Self {
        CohortFiles {
            images: dir.join("images.csv"),
            patients: dir.join("patients.csv"),
            grades: dir.join("grades.csv"),
            confidences: dir.join("confidences.csv"),
            truth: dir.join("truth.csv"),
            config: dir.join("eval.toml"),
        }
    }
}

/// Evaluation config for a synthetic cohort directory, using the simulated panel.
pub fn synthetic_config(thresholds: &CascadeThresholds, seed: u64) -> String {
    format!(
        "seed = {seed}\nbootstrap_resamples = 1000\npermutation_draws = 2000\n{}\n\
         [inputs]\ngrades = \"grades.csv\"\nconfidences = \"confidences.csv\"\n\
         images = \"images.csv\"\npatients = \"patients.csv\"\n\n\
         [reference]\nmode = \"simulated\"\ntruth = \"truth.csv\"\nspecialist_accuracy = 0.8\n",
        thresholds.to_config_string()
    )
}

pub fn write_cohort(cohort: &SyntheticCohort, dir: &Path, seed: u64) -> Result<CohortFiles> {
    std::fs::create_dir_all(dir).map_err(|e| EvalError::io(dir, e))?;
    let files = CohortFiles::in_dir(dir);
    write_rows(&files.images, &IMAGE_COLUMNS, &cohort.images.iter().map(ImageRow::from_record).collect::<Vec<_>>())?;
    write_rows(
        &files.patients,
        &PATIENT_COLUMNS,
        &cohort.patients.iter().map(PatientRow::from_record).collect::<Vec<_>>(),
    )?;
    write_rows(
        &files.grades,
        &GRADE_COLUMNS,
        &cohort.regional.iter().map(|(g, r)| GradeRow::from_record(g, *r)).collect::<Vec<_>>(),
    )?;
    write_rows(
        &files.confidences,
        &CONFIDENCE_COLUMNS,
        &cohort.confidences.iter().map(|(id, cv)| ConfidenceRow::from_vector(id, cv)).collect::<Vec<_>>(),
    )?;
    write_rows(
        &files.truth,
        &TRUTH_COLUMNS,
        &cohort.truth.iter().map(|(id, t)| TruthRow::from_truth(id, t)).collect::<Vec<_>>(),
    )?;
    std::fs::write(&files.config, synthetic_config(&cohort.thresholds, seed)).map_err(|e| EvalError::io(&files.config, e))?;
    Ok(files)
}
