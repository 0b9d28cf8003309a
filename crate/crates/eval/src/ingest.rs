//! Delimited-text input files and their validation.
//!
//! Every file has a fixed header. Flags are written `0`/`1`; an empty cell
//! means the value is absent. Parse failures name the file and line.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use drscreen_core::model::{
    ConfidenceVector, DmeStatus, DrSeverity, GradeRecord, Gradability, GraderId, GraderRole, ImageId, ImageRecord,
    MergedDr, PatientId, PatientRecord, Region, Sex,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result};

pub const GRADE_COLUMNS: [&str; 10] = [
    "image_id",
    "grader_id",
    "grader_role",
    "region",
    "dr_gradable",
    "dr_severity",
    "dme_gradable",
    "dme",
    "round",
    "comment",
];

pub const CONFIDENCE_COLUMNS: [&str; 10] = [
    "image_id",
    "dr_no",
    "dr_mild",
    "dr_moderate",
    "dr_severe",
    "dr_pdr",
    "dme",
    "dr_gradability",
    "dme_gradability",
    "quality",
];

pub const IMAGE_COLUMNS: [&str; 6] = ["image_id", "patient_id", "region", "camera_make", "camera_model", "capture_year"];
pub const PATIENT_COLUMNS: [&str; 7] = ["patient_id", "region", "age", "sex", "hba1c", "fbs", "ldl"];
pub const REFERENCE_COLUMNS: [&str; 3] = ["image_id", "dr", "dme"];
pub const TRUTH_COLUMNS: [&str; 5] = ["image_id", "dr_gradable", "dr_severity", "dme_gradable", "dme"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRow {
    pub image_id: String,
    pub grader_id: String,
    pub grader_role: String,
    pub region: u8,
    pub dr_gradable: u8,
    pub dr_severity: Option<u8>,
    pub dme_gradable: u8,
    pub dme: Option<u8>,
    pub round: u32,
    pub comment: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRow {
    pub image_id: String,
    pub dr_no: f64,
    pub dr_mild: f64,
    pub dr_moderate: f64,
    pub dr_severe: f64,
    pub dr_pdr: f64,
    pub dme: f64,
    pub dr_gradability: f64,
    pub dme_gradability: f64,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub image_id: String,
    pub patient_id: String,
    pub region: u8,
    pub camera_make: String,
    pub camera_model: String,
    pub capture_year: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRow {
    pub patient_id: String,
    pub region: u8,
    pub age: f64,
    pub sex: String,
    pub hba1c: Option<f64>,
    pub fbs: Option<f64>,
    pub ldl: Option<f64>,
}

/// A supplied reference standard. `dr` is on the merged scale, 0 (no/mild)
/// to 3 (proliferative); `dme` is 0/1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub image_id: String,
    pub dr: Option<u8>,
    pub dme: Option<u8>,
}

/// Latent truth written by the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub image_id: String,
    pub dr_gradable: u8,
    pub dr_severity: u8,
    pub dme_gradable: u8,
    pub dme: u8,
}

fn flag(value: u8, column: &str) -> std::result::Result<bool, String> {
    match value {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(format!("{column} must be 0 or 1, got {v}")),
    }
}

fn region(value: u8) -> std::result::Result<Region, String> {
    Region::new(value).map_err(|e| e.to_string())
}

impl GradeRow {
    pub fn to_record(&self) -> std::result::Result<(GradeRecord, Region), String> {
        let gradability = Gradability {
            dr_gradable: flag(self.dr_gradable, "dr_gradable")?,
            dme_gradable: flag(self.dme_gradable, "dme_gradable")?,
        };
        let dr = self
            .dr_severity
            .map(|v| DrSeverity::from_code(v).map_err(|_| format!("dr_severity {v} is outside 0-4")))
            .transpose()?;
        let dme = self.dme.map(|v| flag(v, "dme").map(DmeStatus::from_flag)).transpose()?;
        let record = GradeRecord {
            image_id: ImageId(self.image_id.clone()),
            grader_id: GraderId(self.grader_id.clone()),
            grader_role: self.grader_role.parse().map_err(|e: drscreen_core::Error| e.to_string())?,
            gradability,
            dr,
            dme,
            round: self.round,
            comment: self.comment.clone(),
            timestamp: None,
        };
        record.validate().map_err(|e| e.to_string())?;
        Ok((record, region(self.region)?))
    }

    pub fn from_record(record: &GradeRecord, region: Region) -> Self {
        GradeRow {
            image_id: record.image_id.0.clone(),
            grader_id: record.grader_id.0.clone(),
            grader_role: record.grader_role.to_string(),
            region: region.get(),
            dr_gradable: record.gradability.dr_gradable.into(),
            dr_severity: record.dr.map(DrSeverity::code),
            dme_gradable: record.gradability.dme_gradable.into(),
            dme: record.dme.map(|d| d.is_referable().into()),
            round: record.round,
            comment: record.comment.clone(),
        }
    }
}

impl ConfidenceRow {
    pub fn to_vector(&self) -> std::result::Result<ConfidenceVector, String> {
        let cv = ConfidenceVector {
            dr_scores: [self.dr_no, self.dr_mild, self.dr_moderate, self.dr_severe, self.dr_pdr],
            dme_score: self.dme,
            dr_gradability_score: self.dr_gradability,
            dme_gradability_score: self.dme_gradability,
            quality_score: self.quality,
        };
        cv.validate().map_err(|e| format!("range error: {e}"))?;
        Ok(cv)
    }

    pub fn from_vector(image_id: &ImageId, cv: &ConfidenceVector) -> Self {
        let [dr_no, dr_mild, dr_moderate, dr_severe, dr_pdr] = cv.dr_scores;
        ConfidenceRow {
            image_id: image_id.0.clone(),
            dr_no,
            dr_mild,
            dr_moderate,
            dr_severe,
            dr_pdr,
            dme: cv.dme_score,
            dr_gradability: cv.dr_gradability_score,
            dme_gradability: cv.dme_gradability_score,
            quality: cv.quality_score,
        }
    }
}

impl ImageRow {
    pub fn to_record(&self) -> std::result::Result<ImageRecord, String> {
        Ok(ImageRecord {
            image_id: ImageId(self.image_id.clone()),
            patient_id: PatientId(self.patient_id.clone()),
            region: region(self.region)?,
            camera_make: self.camera_make.clone(),
            camera_model: self.camera_model.clone(),
            capture_year: self.capture_year,
        })
    }

    pub fn from_record(r: &ImageRecord) -> Self {
        ImageRow {
            image_id: r.image_id.0.clone(),
            patient_id: r.patient_id.0.clone(),
            region: r.region.get(),
            camera_make: r.camera_make.clone(),
            camera_model: r.camera_model.clone(),
            capture_year: r.capture_year,
        }
    }
}

impl PatientRow {
    pub fn to_record(&self) -> std::result::Result<PatientRecord, String> {
        let sex = match self.sex.trim() {
            "F" | "f" => Sex::F,
            "M" | "m" => Sex::M,
            other => return Err(format!("sex must be F or M, got {other:?}")),
        };
        let record = PatientRecord {
            patient_id: PatientId(self.patient_id.clone()),
            region: region(self.region)?,
            age: self.age,
            sex,
            hba1c: self.hba1c,
            fbs: self.fbs,
            ldl: self.ldl,
        };
        record.validate().map_err(|e| e.to_string())?;
        Ok(record)
    }

    pub fn from_record(r: &PatientRecord) -> Self {
        PatientRow {
            patient_id: r.patient_id.0.clone(),
            region: r.region.get(),
            age: r.age,
            sex: match r.sex {
                Sex::F => "F".into(),
                Sex::M => "M".into(),
            },
            hba1c: r.hba1c,
            fbs: r.fbs,
            ldl: r.ldl,
        }
    }
}

/// Reference labels for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SuppliedReference {
    pub dr: Option<MergedDr>,
    pub dme: Option<DmeStatus>,
}

impl ReferenceRow {
    pub fn to_reference(&self) -> std::result::Result<SuppliedReference, String> {
        let dr = self
            .dr
            .map(|v| MergedDr::from_index(v as usize).ok_or_else(|| format!("dr {v} is outside 0-3")))
            .transpose()?;
        let dme = self.dme.map(|v| flag(v, "dme").map(DmeStatus::from_flag)).transpose()?;
        Ok(SuppliedReference { dr, dme })
    }
}

/// Latent per-image truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truth {
    pub gradability: Gradability,
    pub dr: DrSeverity,
    pub dme: DmeStatus,
}

impl TruthRow {
    pub fn to_truth(&self) -> std::result::Result<Truth, String> {
        Ok(Truth {
            gradability: Gradability {
                dr_gradable: flag(self.dr_gradable, "dr_gradable")?,
                dme_gradable: flag(self.dme_gradable, "dme_gradable")?,
            },
            dr: DrSeverity::from_code(self.dr_severity).map_err(|e| e.to_string())?,
            dme: DmeStatus::from_flag(flag(self.dme, "dme")?),
        })
    }

    pub fn from_truth(image_id: &ImageId, t: &Truth) -> Self {
        TruthRow {
            image_id: image_id.0.clone(),
            dr_gradable: t.gradability.dr_gradable.into(),
            dr_severity: t.dr.code(),
            dme_gradable: t.gradability.dme_gradable.into(),
            dme: t.dme.is_referable().into(),
        }
    }
}

/// Reads every row of a headed CSV file, converting each with `convert` and
/// reporting failures with the file and line.
pub fn read_rows<R, T, F>(path: &Path, columns: &[&str], convert: F) -> Result<Vec<T>>
where
    R: DeserializeOwned,
    F: Fn(R) -> std::result::Result<T, String>,
{
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => EvalError::io(path, io),
            other => EvalError::parse(path, 1, format!("{other:?}")),
        })?;
    let headers = reader.headers().map_err(|e| EvalError::parse(path, 1, e.to_string()))?.clone();
    let missing: Vec<&str> = columns.iter().copied().filter(|c| !headers.iter().any(|h| h == *c)).collect();
    if !missing.is_empty() {
        return Err(EvalError::parse(path, 1, format!("missing column(s): {}", missing.join(", "))));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            EvalError::parse(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row: R = record
            .deserialize(Some(&headers))
            .map_err(|e| EvalError::parse(path, line, e.to_string()))?;
        out.push(convert(row).map_err(|m| EvalError::parse(path, line, m))?);
    }
    Ok(out)
}

/// Writes rows under their serde field names as the header. An empty slice
/// still produces the header line.
pub fn write_rows<T: Serialize>(path: &Path, columns: &[&str], rows: &[T]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| EvalError::io(path, std::io::Error::other(e)))?;
    let io = |e: csv::Error| EvalError::io(path, std::io::Error::other(e));
    writer.write_record(columns).map_err(io)?;
    for row in rows {
        writer.serialize(row).map_err(io)?;
    }
    writer.flush().map_err(|e| EvalError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputPaths {
    pub grades: PathBuf,
    pub confidences: PathBuf,
    pub images: PathBuf,
    pub patients: PathBuf,
}

/// Validated inputs with referential integrity checked.
#[derive(Debug, Clone, PartialEq)]
pub struct Inputs {
    pub images: BTreeMap<ImageId, ImageRecord>,
    pub patients: BTreeMap<PatientId, PatientRecord>,
    /// Screening grades by the regional graders, one per image.
    pub regional: BTreeMap<ImageId, GradeRecord>,
    /// Every other grade row (adjudication rounds), in file order.
    pub other_grades: Vec<GradeRecord>,
    pub confidences: BTreeMap<ImageId, ConfidenceVector>,
}

fn unique<K: Ord + Clone + std::fmt::Display, V>(
    items: Vec<V>,
    key: impl Fn(&V) -> K,
    what: &str,
) -> Result<BTreeMap<K, V>> {
    let mut map = BTreeMap::new();
    let mut duplicates = BTreeSet::new();
    for item in items {
        let k = key(&item);
        if map.contains_key(&k) {
            duplicates.insert(k.to_string());
        } else {
            map.insert(k, item);
        }
    }
    if !duplicates.is_empty() {
        return Err(EvalError::Integrity(format!(
            "duplicate {what}: {}",
            duplicates.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(map)
}

fn offenders(what: &str, ids: BTreeSet<String>) -> Result<()> {
    if ids.is_empty() {
        return Ok(());
    }
    Err(EvalError::Integrity(format!(
        "{what}: {}",
        ids.into_iter().collect::<Vec<_>>().join(", ")
    )))
}

pub fn ingest(paths: &InputPaths) -> Result<Inputs> {
    let images = read_rows(&paths.images, &IMAGE_COLUMNS, |r: ImageRow| r.to_record())?;
    let patients = read_rows(&paths.patients, &PATIENT_COLUMNS, |r: PatientRow| r.to_record())?;
    let grades = read_rows(&paths.grades, &GRADE_COLUMNS, |r: GradeRow| r.to_record())?;
    let confidences = read_rows(&paths.confidences, &CONFIDENCE_COLUMNS, |r: ConfidenceRow| {
        Ok((ImageId(r.image_id.clone()), r.to_vector()?))
    })?;
    assemble(images, patients, grades, confidences)
}

/// Integrity checks shared by file ingestion and in-memory construction.
pub fn assemble(
    images: Vec<ImageRecord>,
    patients: Vec<PatientRecord>,
    grades: Vec<(GradeRecord, Region)>,
    confidences: Vec<(ImageId, ConfidenceVector)>,
) -> Result<Inputs> {
    let images = unique(images, |i| i.image_id.clone(), "image ids")?;
    let patients = unique(patients, |p| p.patient_id.clone(), "patient ids")?;
    let confidences = unique(confidences, |(id, _)| id.clone(), "confidence rows")?
        .into_iter()
        .map(|(k, (_, v))| (k, v))
        .collect::<BTreeMap<_, _>>();

    offenders(
        "images reference unknown patients",
        images.values().filter(|i| !patients.contains_key(&i.patient_id)).map(|i| i.image_id.0.clone()).collect(),
    )?;
    offenders(
        "images whose region differs from their patient's",
        images
            .values()
            .filter(|i| patients.get(&i.patient_id).is_some_and(|p| p.region != i.region))
            .map(|i| i.image_id.0.clone())
            .collect(),
    )?;
    offenders(
        "confidences reference unknown images",
        confidences.keys().filter(|id| !images.contains_key(*id)).map(|id| id.0.clone()).collect(),
    )?;
    offenders(
        "grades reference unknown images",
        grades.iter().filter(|(g, _)| !images.contains_key(&g.image_id)).map(|(g, _)| g.image_id.0.clone()).collect(),
    )?;
    offenders(
        "grades whose region differs from the image's",
        grades
            .iter()
            .filter(|(g, r)| images.get(&g.image_id).is_some_and(|i| i.region != *r))
            .map(|(g, _)| g.image_id.0.clone())
            .collect(),
    )?;

    let (regional, other_grades): (Vec<_>, Vec<_>) =
        grades.into_iter().map(|(g, _)| g).partition(|g| g.grader_role == GraderRole::RegionalGrader);
    let regional = unique(regional, |g| g.image_id.clone(), "regional grades for images")?;
    offenders(
        "images without a regional grade",
        images.keys().filter(|id| !regional.contains_key(*id)).map(|id| id.0.clone()).collect(),
    )?;
    offenders(
        "images without algorithm confidences",
        images.keys().filter(|id| !confidences.contains_key(*id)).map(|id| id.0.clone()).collect(),
    )?;
    Ok(Inputs { images, patients, regional, other_grades, confidences })
}

pub fn read_reference(path: &Path) -> Result<BTreeMap<ImageId, SuppliedReference>> {
    let rows = read_rows(path, &REFERENCE_COLUMNS, |r: ReferenceRow| {
        Ok((ImageId(r.image_id.clone()), r.to_reference()?))
    })?;
    Ok(unique(rows, |(id, _)| id.clone(), "reference rows")?.into_iter().map(|(k, (_, v))| (k, v)).collect())
}

pub fn read_truth(path: &Path) -> Result<BTreeMap<ImageId, Truth>> {
    let rows = read_rows(path, &TRUTH_COLUMNS, |r: TruthRow| Ok((ImageId(r.image_id.clone()), r.to_truth()?)))?;
    Ok(unique(rows, |(id, _)| id.clone(), "truth rows")?.into_iter().map(|(k, (_, v))| (k, v)).collect())
}
