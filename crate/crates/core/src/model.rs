//! Domain types shared by every stage of the evaluation.
//!
//! All types are plain immutable values and are `Send + Sync`.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{check_unit, Error, Result};

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(
    /// Identifier of a single fundus image.
    ImageId
);
string_id!(PatientId);
string_id!(
    /// Identifier of one adjudication session.
    SessionId
);
string_id!(
    /// Identifier of a human grader or of the algorithm.
    GraderId
);

/// Five-level ICDR diabetic-retinopathy severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrSeverity {
    NoDr,
    Mild,
    Moderate,
    Severe,
    Proliferative,
}

impl DrSeverity {
    pub const ALL: [DrSeverity; 5] = [
        DrSeverity::NoDr,
        DrSeverity::Mild,
        DrSeverity::Moderate,
        DrSeverity::Severe,
        DrSeverity::Proliferative,
    ];

    /// File encoding, 0 (no DR) through 4 (proliferative).
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::Domain(format!("DR severity code {code} is not in 0..=4")))
    }

    pub fn merged(self) -> MergedDr {
        merge_no_mild(self)
    }
}

impl fmt::Display for DrSeverity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DrSeverity::NoDr => "No DR",
            DrSeverity::Mild => "Mild NPDR",
            DrSeverity::Moderate => "Moderate NPDR",
            DrSeverity::Severe => "Severe NPDR",
            DrSeverity::Proliferative => "Proliferative DR",
        })
    }
}

/// Four-category DR scale on which no-DR and mild NPDR are one bucket.
///
/// This is the scale the reference standard lives on: differences below
/// moderate NPDR are never adjudicated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergedDr {
    NoOrMild,
    Moderate,
    Severe,
    Proliferative,
}

impl MergedDr {
    pub const ALL: [MergedDr; 4] = [
        MergedDr::NoOrMild,
        MergedDr::Moderate,
        MergedDr::Severe,
        MergedDr::Proliferative,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    /// Moderate NPDR or worse.
    pub fn is_referable(self) -> bool {
        self >= MergedDr::Moderate
    }

    pub fn label(self) -> &'static str {
        match self {
            MergedDr::NoOrMild => "No/Mild",
            MergedDr::Moderate => "Moderate",
            MergedDr::Severe => "Severe",
            MergedDr::Proliferative => "Proliferative",
        }
    }
}

impl fmt::Display for MergedDr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for MergedDr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "no/mild" | "no_or_mild" | "nomild" | "0" => Ok(MergedDr::NoOrMild),
            "moderate" | "1" => Ok(MergedDr::Moderate),
            "severe" | "2" => Ok(MergedDr::Severe),
            "proliferative" | "pdr" | "3" => Ok(MergedDr::Proliferative),
            other => Err(Error::Domain(format!("unknown merged DR category {other:?}"))),
        }
    }
}

/// Collapse no-DR and mild NPDR into one category; higher levels map to themselves.
pub fn merge_no_mild(dr: DrSeverity) -> MergedDr {
    match dr {
        DrSeverity::NoDr | DrSeverity::Mild => MergedDr::NoOrMild,
        DrSeverity::Moderate => MergedDr::Moderate,
        DrSeverity::Severe => MergedDr::Severe,
        DrSeverity::Proliferative => MergedDr::Proliferative,
    }
}

/// Referable diabetic macular edema: hard exudates within one disc diameter
/// of the foveal centre.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmeStatus {
    Absent,
    Referable,
}

impl DmeStatus {
    pub fn from_flag(referable: bool) -> Self {
        if referable {
            DmeStatus::Referable
        } else {
            DmeStatus::Absent
        }
    }

    pub fn is_referable(self) -> bool {
        self == DmeStatus::Referable
    }
}

impl fmt::Display for DmeStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DmeStatus::Absent => "No DME",
            DmeStatus::Referable => "DME",
        })
    }
}

/// Per-task gradability; DR and DME are assessed independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Gradability {
    pub dr_gradable: bool,
    pub dme_gradable: bool,
}

impl Gradability {
    pub const BOTH: Gradability = Gradability { dr_gradable: true, dme_gradable: true };

    pub fn for_task(self, task: Task) -> bool {
        match task {
            Task::Dr | Task::DrGradability => self.dr_gradable,
            Task::Dme | Task::DmeGradability => self.dme_gradable,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraderRole {
    RegionalGrader,
    Algorithm,
    Specialist,
    SeniorSpecialist,
}

impl FromStr for GraderRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "regional_grader" | "regional" => Ok(GraderRole::RegionalGrader),
            "algorithm" => Ok(GraderRole::Algorithm),
            "specialist" => Ok(GraderRole::Specialist),
            "senior_specialist" | "senior" => Ok(GraderRole::SeniorSpecialist),
            other => Err(Error::Domain(format!("unknown grader role {other:?}"))),
        }
    }
}

impl fmt::Display for GraderRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraderRole::RegionalGrader => "regional_grader",
            GraderRole::Algorithm => "algorithm",
            GraderRole::Specialist => "specialist",
            GraderRole::SeniorSpecialist => "senior_specialist",
        })
    }
}

/// What is being graded: a severity, DME, or gradability for one of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Dr,
    Dme,
    DrGradability,
    DmeGradability,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Dr, Task::Dme, Task::DrGradability, Task::DmeGradability];

    pub fn code(self) -> &'static str {
        match self {
            Task::Dr => "dr",
            Task::Dme => "dme",
            Task::DrGradability => "dr_gradability",
            Task::DmeGradability => "dme_gradability",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.code() == s.trim())
            .ok_or_else(|| Error::Domain(format!("unknown task {s:?}")))
    }
}

/// A single grade as submitted by a grader for one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum GradeValue {
    Dr(DrSeverity),
    Dme(DmeStatus),
    Gradable(bool),
}

impl GradeValue {
    pub fn is_valid_for(self, task: Task) -> bool {
        matches!(
            (self, task),
            (GradeValue::Dr(_), Task::Dr)
                | (GradeValue::Dme(_), Task::Dme)
                | (GradeValue::Gradable(_), Task::DrGradability | Task::DmeGradability)
        )
    }

    /// The value on the scale the reference standard is kept on.
    pub fn canonical(self) -> ReferenceValue {
        match self {
            GradeValue::Dr(dr) => ReferenceValue::Dr(dr.merged()),
            GradeValue::Dme(dme) => ReferenceValue::Dme(dme),
            GradeValue::Gradable(g) => ReferenceValue::Gradable(g),
        }
    }

    /// Task equivalence: DR grades compare on the merged scale.
    pub fn agrees_with(self, other: GradeValue) -> bool {
        self.canonical() == other.canonical()
    }
}

impl fmt::Display for GradeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradeValue::Dr(v) => v.fmt(f),
            GradeValue::Dme(v) => v.fmt(f),
            GradeValue::Gradable(true) => f.write_str("Gradable"),
            GradeValue::Gradable(false) => f.write_str("Ungradable"),
        }
    }
}

/// A ground-truth value. DR is stored on the merged scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ReferenceValue {
    Dr(MergedDr),
    Dme(DmeStatus),
    Gradable(bool),
}

impl ReferenceValue {
    pub fn is_valid_for(self, task: Task) -> bool {
        matches!(
            (self, task),
            (ReferenceValue::Dr(_), Task::Dr)
                | (ReferenceValue::Dme(_), Task::Dme)
                | (ReferenceValue::Gradable(_), Task::DrGradability | Task::DmeGradability)
        )
    }
}

impl fmt::Display for ReferenceValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReferenceValue::Dr(v) => v.fmt(f),
            ReferenceValue::Dme(v) => v.fmt(f),
            ReferenceValue::Gradable(true) => f.write_str("Gradable"),
            ReferenceValue::Gradable(false) => f.write_str("Ungradable"),
        }
    }
}

/// One grader's assessment of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub image_id: ImageId,
    pub grader_id: GraderId,
    pub grader_role: GraderRole,
    pub gradability: Gradability,
    pub dr: Option<DrSeverity>,
    pub dme: Option<DmeStatus>,
    /// 0 for screening grades, 1.. for adjudication rounds.
    pub round: u32,
    pub comment: String,
    pub timestamp: Option<DateTime<Utc>>,
}

impl GradeRecord {
    /// Checks that severity/DME are present exactly when the task is gradable.
    pub fn validate(&self) -> Result<()> {
        if self.dr.is_some() != self.gradability.dr_gradable {
            return Err(Error::Contract(format!(
                "image {}: DR severity must be present iff the image is DR-gradable",
                self.image_id
            )));
        }
        if self.dme.is_some() != self.gradability.dme_gradable {
            return Err(Error::Contract(format!(
                "image {}: DME status must be present iff the image is DME-gradable",
                self.image_id
            )));
        }
        let adjudicator = matches!(
            self.grader_role,
            GraderRole::Specialist | GraderRole::SeniorSpecialist
        );
        if !adjudicator && self.round != 0 {
            return Err(Error::Contract(format!(
                "image {}: screening grades must have round 0",
                self.image_id
            )));
        }
        Ok(())
    }

    /// This grade expressed for a given task, or `None` if the task is ungradable.
    pub fn value_for(&self, task: Task) -> Option<GradeValue> {
        match task {
            Task::Dr => self.dr.map(GradeValue::Dr),
            Task::Dme => self.dme.map(GradeValue::Dme),
            Task::DrGradability => Some(GradeValue::Gradable(self.gradability.dr_gradable)),
            Task::DmeGradability => Some(GradeValue::Gradable(self.gradability.dme_gradable)),
        }
    }
}

/// Real-valued algorithm outputs for one image, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceVector {
    /// Ordered no DR, mild, moderate, severe, proliferative.
    pub dr_scores: [f64; 5],
    pub dme_score: f64,
    pub dr_gradability_score: f64,
    pub dme_gradability_score: f64,
    pub quality_score: f64,
}

impl ConfidenceVector {
    pub fn validate(&self) -> Result<()> {
        for (level, score) in DrSeverity::ALL.iter().zip(self.dr_scores) {
            check_unit(&format!("DR score for {level}"), score)?;
        }
        check_unit("DME score", self.dme_score)?;
        check_unit("DR gradability score", self.dr_gradability_score)?;
        check_unit("DME gradability score", self.dme_gradability_score)?;
        check_unit("quality score", self.quality_score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: ImageId,
    pub patient_id: PatientId,
    pub region: Region,
    pub camera_make: String,
    pub camera_model: String,
    pub capture_year: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: PatientId,
    pub region: Region,
    pub age: f64,
    pub sex: Sex,
    /// Percent. Absent where not collected.
    pub hba1c: Option<f64>,
    /// Fasting blood sugar, mg/dL.
    pub fbs: Option<f64>,
    /// mg/dL.
    pub ldl: Option<f64>,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.age.is_finite() && self.age >= 0.0) {
            return Err(Error::Domain(format!(
                "patient {}: age {} must be nonnegative",
                self.patient_id, self.age
            )));
        }
        for (name, value) in [("HbA1c", self.hba1c), ("FBS", self.fbs), ("LDL", self.ldl)] {
            if let Some(v) = value {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::Domain(format!(
                        "patient {}: {name} {v} must be nonnegative",
                        self.patient_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Health region, 1 through 13.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Region(u8);

impl Region {
    pub const COUNT: u8 = 13;

    pub fn new(region: u8) -> Result<Self> {
        if (1..=Self::COUNT).contains(&region) {
            Ok(Region(region))
        } else {
            Err(Error::Domain(format!("region {region} is not in 1..=13")))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = Region> {
        (1..=Self::COUNT).map(Region)
    }
}

impl TryFrom<u8> for Region {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        Region::new(value)
    }
}

impl From<Region> for u8 {
    fn from(r: Region) -> u8 {
        r.0
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn merge_examples() {
        assert_eq!(merge_no_mild(DrSeverity::NoDr), MergedDr::NoOrMild);
        assert_eq!(merge_no_mild(DrSeverity::Mild), MergedDr::NoOrMild);
        assert_eq!(merge_no_mild(DrSeverity::Moderate), MergedDr::Moderate);
        assert_eq!(merge_no_mild(DrSeverity::Severe), MergedDr::Severe);
        assert_eq!(merge_no_mild(DrSeverity::Proliferative), MergedDr::Proliferative);
    }

    #[test]
    fn severity_order_is_total_and_transitive() {
        for a in DrSeverity::ALL {
            for b in DrSeverity::ALL {
                let lt = (a < b) as u8 + (a == b) as u8 + (a > b) as u8;
                assert_eq!(lt, 1);
                for c in DrSeverity::ALL {
                    if a <= b && b <= c {
                        assert!(a <= c);
                    }
                }
            }
        }
        assert!(DrSeverity::NoDr < DrSeverity::Mild);
        assert!(DrSeverity::Severe < DrSeverity::Proliferative);
    }

    proptest! {
        #[test]
        fn merge_is_order_preserving(a in 0u8..5, b in 0u8..5) {
            let (a, b) = (DrSeverity::from_code(a).unwrap(), DrSeverity::from_code(b).unwrap());
            if a <= b {
                prop_assert!(a.merged() <= b.merged());
            }
        }

        #[test]
        fn merge_is_idempotent_on_merged_scale(a in 0u8..5) {
            let merged = DrSeverity::from_code(a).unwrap().merged();
            // Re-merging the representative of a merged bucket is a no-op.
            let representative = match merged {
                MergedDr::NoOrMild => DrSeverity::NoDr,
                MergedDr::Moderate => DrSeverity::Moderate,
                MergedDr::Severe => DrSeverity::Severe,
                MergedDr::Proliferative => DrSeverity::Proliferative,
            };
            prop_assert_eq!(representative.merged(), merged);
        }
    }

    #[test]
    fn severity_codes_round_trip_and_reject_out_of_range() {
        for level in DrSeverity::ALL {
            assert_eq!(DrSeverity::from_code(level.code()).unwrap(), level);
        }
        assert!(matches!(DrSeverity::from_code(6), Err(Error::Domain(_))));
    }

    #[test]
    fn grade_record_requires_values_iff_gradable() {
        let mut rec = GradeRecord {
            image_id: "i1".into(),
            grader_id: "g1".into(),
            grader_role: GraderRole::RegionalGrader,
            gradability: Gradability { dr_gradable: true, dme_gradable: false },
            dr: Some(DrSeverity::Mild),
            dme: None,
            round: 0,
            comment: String::new(),
            timestamp: None,
        };
        rec.validate().unwrap();
        rec.dme = Some(DmeStatus::Absent);
        assert!(rec.validate().is_err());
        rec.dme = None;
        rec.round = 2;
        assert!(rec.validate().is_err());
    }

    #[test]
    fn grade_agreement_uses_merged_scale() {
        assert!(GradeValue::Dr(DrSeverity::NoDr).agrees_with(GradeValue::Dr(DrSeverity::Mild)));
        assert!(!GradeValue::Dr(DrSeverity::Mild).agrees_with(GradeValue::Dr(DrSeverity::Moderate)));
        assert!(!GradeValue::Gradable(true).agrees_with(GradeValue::Gradable(false)));
    }

    #[test]
    fn region_bounds() {
        assert!(Region::new(0).is_err());
        assert!(Region::new(14).is_err());
        assert_eq!(Region::all().count(), 13);
    }

    #[test]
    fn patient_lab_values_may_be_absent_but_not_negative() {
        let mut p = PatientRecord {
            patient_id: "p".into(),
            region: Region::new(3).unwrap(),
            age: 60.0,
            sex: Sex::F,
            hba1c: None,
            fbs: Some(130.0),
            ldl: None,
        };
        p.validate().unwrap();
        p.ldl = Some(-1.0);
        assert!(p.validate().is_err());
    }
}
