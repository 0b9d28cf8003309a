//! Regression fixtures expanded from published count tables.
//!
//! Count matrices fix the marginals of each (reference, rater) pair but not
//! how the grader's and the algorithm's calls line up on the same image.
//! Within each reference category both raters' calls are laid out in
//! category order and paired by position. Any coupling reproduces the
//! per-rater metrics exactly; only joint statistics such as the paired
//! permutation test depend on it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use drscreen_core::adjudication::{AdjudicationEngine, Panel, SessionOptions, SourceCalls};
use drscreen_core::cascade::{AlgorithmCall, CascadeThresholds};
use drscreen_core::eventlog::{EventRecord, LogicalClock};
use drscreen_core::metrics::ConfusionMatrix;
use drscreen_core::model::{
    DmeStatus, DrSeverity, GradeRecord, GradeValue, Gradability, GraderRole, ImageId, ImageRecord, MergedDr, PatientId,
    PatientRecord, Region, Sex,
};
use drscreen_core::rng::{named_seed, rng_for};
use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result};
use crate::ingest::{
    write_rows, ConfidenceRow, GradeRow, ImageRow, PatientRow, CONFIDENCE_COLUMNS, GRADE_COLUMNS, IMAGE_COLUMNS,
    PATIENT_COLUMNS, REFERENCE_COLUMNS,
};
use crate::synth::confidences_for;

pub const SCREENING_COUNTS: &str = include_str!("../fixtures/screening_counts.toml");

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct RaterMatrices {
    pub categories: Vec<String>,
    pub grader: Vec<Vec<u64>>,
    pub algorithm: Vec<Vec<u64>>,
}

impl RaterMatrices {
    pub fn grader_matrix(&self) -> Result<ConfusionMatrix> {
        Ok(ConfusionMatrix::from_counts(self.categories.clone(), self.grader.clone())?)
    }

    pub fn algorithm_matrix(&self) -> Result<ConfusionMatrix> {
        Ok(ConfusionMatrix::from_counts(self.categories.clone(), self.algorithm.clone())?)
    }

    fn row_totals(m: &[Vec<u64>]) -> Vec<u64> {
        m.iter().map(|r| r.iter().sum()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct TwoByTwo {
    pub counts: [[u64; 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TaskPair<T> {
    pub dr: T,
    pub dme: T,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ScreeningCounts {
    pub dr: RaterMatrices,
    pub dme: RaterMatrices,
    /// Regional (rows: gradable, ungradable) by algorithm (same columns).
    pub gradability: TaskPair<TwoByTwo>,
    /// Regional call (rows) by adjudicated value (columns), for images
    /// where the sources disagreed.
    pub gradability_adjudication: TaskPair<TwoByTwo>,
}

impl ScreeningCounts {
    pub fn published() -> Self {
        Self::from_toml(SCREENING_COUNTS).expect("shipped fixture parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let counts: ScreeningCounts = toml::from_str(text).map_err(|e| EvalError::Config(format!("counts: {e}")))?;
        for (name, m) in [("dr", &counts.dr), ("dme", &counts.dme)] {
            m.grader_matrix()?;
            m.algorithm_matrix()?;
            if RaterMatrices::row_totals(&m.grader) != RaterMatrices::row_totals(&m.algorithm) {
                return Err(EvalError::Config(format!(
                    "{name}: grader and algorithm matrices disagree on reference totals"
                )));
            }
        }
        if counts.dr.categories.len() != 4 || counts.dme.categories.len() != 2 {
            return Err(EvalError::Config("expected a 4-category DR and a 2-category DME matrix".into()));
        }
        Ok(counts)
    }
}

/// `(reference, grader, algorithm)` category indices, paired within each
/// reference row by position.
pub fn expand_paired(m: &RaterMatrices) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (r, (g_row, a_row)) in m.grader.iter().zip(&m.algorithm).enumerate() {
        let spread = |row: &Vec<u64>| -> Vec<usize> {
            row.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n as usize)).collect()
        };
        let (g, a) = (spread(g_row), spread(a_row));
        out.extend(g.into_iter().zip(a).map(|(g, a)| (r, g, a)));
    }
    out
}

fn level(merged: MergedDr) -> DrSeverity {
    match merged {
        MergedDr::NoOrMild => DrSeverity::NoDr,
        MergedDr::Moderate => DrSeverity::Moderate,
        MergedDr::Severe => DrSeverity::Severe,
        MergedDr::Proliferative => DrSeverity::Proliferative,
    }
}

fn region_of(i: usize) -> Region {
    Region::new((i / 4 % 13) as u8 + 1).expect("1..=13")
}

fn image_and_patient(i: usize) -> (ImageRecord, Option<PatientRecord>) {
    let region = region_of(i);
    let patient_id = PatientId(format!("P{:06}", i / 4));
    let image = ImageRecord {
        image_id: ImageId(format!("I{i:06}")),
        patient_id: patient_id.clone(),
        region,
        camera_make: "fixture".into(),
        camera_model: "fixture".into(),
        capture_year: 2016,
    };
    let patient = (i % 4 == 0).then(|| PatientRecord {
        patient_id,
        region,
        age: 50.0 + (i / 4 % 30) as f64,
        sex: if i / 4 % 3 == 0 { Sex::M } else { Sex::F },
        hba1c: Some(7.3),
        fbs: Some(139.0),
        ldl: Some(105.0),
    });
    (image, patient)
}

fn regional_record(image_id: &ImageId, gradability: Gradability, dr: Option<DrSeverity>, dme: Option<DmeStatus>) -> GradeRecord {
    GradeRecord {
        image_id: image_id.clone(),
        grader_id: "regional".into(),
        grader_role: GraderRole::RegionalGrader,
        gradability,
        dr,
        dme,
        round: 0,
        comment: String::new(),
        timestamp: None,
    }
}

/// Input files and supplied reference for the count-matrix fixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedCounts {
    pub images: Vec<ImageRecord>,
    pub patients: Vec<PatientRecord>,
    pub regional: Vec<(GradeRecord, Region)>,
    pub algorithm: BTreeMap<ImageId, AlgorithmCall>,
    pub confidences: Vec<(ImageId, drscreen_core::model::ConfidenceVector)>,
    /// Merged DR index and DME flag per image.
    pub reference: BTreeMap<ImageId, (Option<usize>, Option<bool>)>,
}

/// One image per DR matrix entry. The first `dme_total` images also carry
/// the DME matrix entries; the rest are DME-ungradable for both sources.
pub fn expand_counts(counts: &ScreeningCounts, thresholds: &CascadeThresholds, seed: u64) -> Result<ExpandedCounts> {
    let dr = expand_paired(&counts.dr);
    let dme = expand_paired(&counts.dme);
    if dme.len() > dr.len() {
        return Err(EvalError::Config("DME matrix covers more images than the DR matrix".into()));
    }
    let mut rng = rng_for(named_seed(seed, "fixture-confidences"));
    let mut out = ExpandedCounts {
        images: Vec::new(),
        patients: Vec::new(),
        regional: Vec::new(),
        algorithm: BTreeMap::new(),
        confidences: Vec::new(),
        reference: BTreeMap::new(),
    };
    for (i, &(r, g, a)) in dr.iter().enumerate() {
        let (image, patient) = image_and_patient(i);
        let id = image.image_id.clone();
        let merged = |k: usize| MergedDr::from_index(k).expect("four categories");
        let dme_cell = dme.get(i).copied();
        let gradability = Gradability { dr_gradable: true, dme_gradable: dme_cell.is_some() };
        let regional = regional_record(
            &id,
            gradability,
            Some(level(merged(g))),
            dme_cell.map(|(_, g, _)| DmeStatus::from_flag(g == 1)),
        );
        let call = AlgorithmCall {
            gradability,
            dr: Some(level(merged(a))),
            dme: dme_cell.map(|(_, _, a)| DmeStatus::from_flag(a == 1)),
        };
        out.confidences.push((id.clone(), confidences_for(&call, thresholds, &mut rng)));
        out.algorithm.insert(id.clone(), call);
        out.reference.insert(id.clone(), (Some(r), dme_cell.map(|(r, _, _)| r == 1)));
        out.regional.push((regional, image.region));
        out.images.push(image);
        out.patients.extend(patient);
    }
    Ok(out)
}

#[derive(Serialize)]
struct RefRow {
    image_id: String,
    dr: Option<usize>,
    dme: Option<u8>,
}

pub struct FixtureFiles {
    pub dir: PathBuf,
    pub config: PathBuf,
}

/// Writes the count-matrix fixture with a supplied-reference config.
pub fn write_count_fixture(dir: &Path, seed: u64, bootstrap_resamples: usize, permutation_draws: usize) -> Result<FixtureFiles> {
    let thresholds = CascadeThresholds::default();
    let fx = expand_counts(&ScreeningCounts::published(), &thresholds, seed)?;
    std::fs::create_dir_all(dir).map_err(|e| EvalError::io(dir, e))?;
    write_rows(&dir.join("images.csv"), &IMAGE_COLUMNS, &fx.images.iter().map(ImageRow::from_record).collect::<Vec<_>>())?;
    write_rows(
        &dir.join("patients.csv"),
        &PATIENT_COLUMNS,
        &fx.patients.iter().map(PatientRow::from_record).collect::<Vec<_>>(),
    )?;
    write_rows(
        &dir.join("grades.csv"),
        &GRADE_COLUMNS,
        &fx.regional.iter().map(|(g, r)| GradeRow::from_record(g, *r)).collect::<Vec<_>>(),
    )?;
    write_rows(
        &dir.join("confidences.csv"),
        &CONFIDENCE_COLUMNS,
        &fx.confidences.iter().map(|(id, cv)| ConfidenceRow::from_vector(id, cv)).collect::<Vec<_>>(),
    )?;
    let refs: Vec<RefRow> = fx
        .reference
        .iter()
        .map(|(id, (dr, dme))| RefRow { image_id: id.to_string(), dr: *dr, dme: dme.map(u8::from) })
        .collect();
    write_rows(&dir.join("reference.csv"), &REFERENCE_COLUMNS, &refs)?;
    let config = dir.join("eval.toml");
    let text = format!(
        "seed = {seed}\nbootstrap_resamples = {bootstrap_resamples}\npermutation_draws = {permutation_draws}\n{}\n\
         [inputs]\ngrades = \"grades.csv\"\nconfidences = \"confidences.csv\"\n\
         images = \"images.csv\"\npatients = \"patients.csv\"\n\n\
         [reference]\nmode = \"supplied\"\npath = \"reference.csv\"\n",
        thresholds.to_config_string()
    );
    std::fs::write(&config, text).map_err(|e| EvalError::io(&config, e))?;
    Ok(FixtureFiles { dir: dir.to_owned(), config })
}

/// Regional and algorithm gradability records laid out from the two
/// gradability count tables. DR and DME cells are assigned independently
/// by position, so only the per-task marginals are meaningful.
pub fn expand_gradability(counts: &ScreeningCounts) -> Result<Vec<(GradeRecord, GradeRecord)>> {
    let cells = |t: &TwoByTwo| -> Vec<(bool, bool)> {
        let mut v = Vec::new();
        for (r, row) in t.counts.iter().enumerate() {
            for (a, &n) in row.iter().enumerate() {
                v.extend(std::iter::repeat_n((r == 0, a == 0), n as usize));
            }
        }
        v
    };
    let dr = cells(&counts.gradability.dr);
    let dme = cells(&counts.gradability.dme);
    if dr.len() != dme.len() {
        return Err(EvalError::Config(format!(
            "DR and DME gradability tables cover {} and {} images",
            dr.len(),
            dme.len()
        )));
    }
    Ok(dr
        .into_iter()
        .zip(dme)
        .enumerate()
        .map(|(i, ((r_dr, a_dr), (r_dme, a_dme)))| {
            let id = ImageId(format!("G{i:06}"));
            let record = |role: GraderRole, grader: &str, dr: bool, dme: bool| GradeRecord {
                image_id: id.clone(),
                grader_id: grader.into(),
                grader_role: role,
                gradability: Gradability { dr_gradable: dr, dme_gradable: dme },
                dr: dr.then_some(DrSeverity::NoDr),
                dme: dme.then_some(DmeStatus::Absent),
                round: 0,
                comment: String::new(),
                timestamp: None,
            };
            (
                record(GraderRole::RegionalGrader, "regional", r_dr, r_dme),
                record(GraderRole::Algorithm, "algorithm", a_dr, a_dme),
            )
        })
        .collect())
}

/// One adjudicated gradability disagreement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradabilityCase {
    pub regional_gradable: bool,
    pub adjudicated_gradable: bool,
}

pub fn gradability_cases(t: &TwoByTwo) -> Vec<GradabilityCase> {
    let mut v = Vec::new();
    for (r, row) in t.counts.iter().enumerate() {
        for (a, &n) in row.iter().enumerate() {
            let case = GradabilityCase { regional_gradable: r == 0, adjudicated_gradable: a == 0 };
            v.extend(std::iter::repeat_n(case, n as usize));
        }
    }
    v
}

/// Event log in which a panel resolves every DR gradability disagreement
/// by round-1 consensus on the adjudicated value, with source calls attached.
pub fn gradability_adjudication_log(counts: &ScreeningCounts, panel: &Panel) -> Result<Vec<EventRecord>> {
    let clock = LogicalClock::default();
    let mut engine = AdjudicationEngine::new();
    for (i, case) in gradability_cases(&counts.gradability_adjudication.dr).into_iter().enumerate() {
        let image_id = ImageId(format!("G{i:06}"));
        let sources = SourceCalls {
            regional: GradeValue::Gradable(case.regional_gradable),
            algorithm: GradeValue::Gradable(!case.regional_gradable),
        };
        let options = SessionOptions { sources: Some(sources), ..Default::default() };
        let sid = engine
            .open_session(image_id, drscreen_core::model::Task::DrGradability, panel.clone(), options, &clock)?
            .session_id
            .clone();
        let value = GradeValue::Gradable(case.adjudicated_gradable);
        engine.submit_grade(&sid, &panel.specialist_a, value, "", &clock)?;
        engine.submit_grade(&sid, &panel.specialist_b, value, "", &clock)?;
    }
    Ok(engine.log().to_vec())
}
