use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{clopper_pearson_ci, CiMethod, MetricResult, CONFIDENCE_LEVEL};
use crate::error::{Error, Result};
use crate::model::{DmeStatus, MergedDr};

/// DR and DME status of one image as seen by one rater. `None` where the
/// rater did not grade the task (ungradable or not scored).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct CaseLabel {
    pub dr: Option<MergedDr>,
    pub dme: Option<DmeStatus>,
}

impl CaseLabel {
    pub fn dr(dr: MergedDr) -> Self {
        CaseLabel { dr: Some(dr), dme: None }
    }

    pub fn dme(dme: DmeStatus) -> Self {
        CaseLabel { dr: None, dme: Some(dme) }
    }
}

/// Binary positivity rule: DR at or above a level, referable DME, or their union.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BinaryTarget {
    pub dr_at_least: Option<MergedDr>,
    pub dme: bool,
}

impl BinaryTarget {
    pub const MODERATE_OR_WORSE: BinaryTarget = BinaryTarget { dr_at_least: Some(MergedDr::Moderate), dme: false };
    pub const SEVERE_OR_WORSE: BinaryTarget = BinaryTarget { dr_at_least: Some(MergedDr::Severe), dme: false };
    pub const PROLIFERATIVE: BinaryTarget = BinaryTarget { dr_at_least: Some(MergedDr::Proliferative), dme: false };
    pub const DME: BinaryTarget = BinaryTarget { dr_at_least: None, dme: true };

    pub fn or_dme(self) -> Self {
        BinaryTarget { dme: true, ..self }
    }

    /// Positivity of `label`, or `None` if the label lacks a component the
    /// answer depends on.
    pub fn positive(&self, label: &CaseLabel) -> Option<bool> {
        let dr = self.dr_at_least.map(|level| label.dr.map(|d| d >= level));
        let dme = self.dme.then(|| label.dme.map(DmeStatus::is_referable));
        match (dr, dme) {
            (Some(dr), None) => dr,
            (None, Some(dme)) => dme,
            (Some(dr), Some(dme)) => match (dr, dme) {
                (Some(true), _) | (_, Some(true)) => Some(true),
                (Some(false), Some(false)) => Some(false),
                _ => None,
            },
            (None, None) => None,
        }
    }

    pub fn name(&self) -> String {
        let dr = self.dr_at_least.map(|l| match l {
            MergedDr::NoOrMild => "any",
            MergedDr::Moderate => "moderate+",
            MergedDr::Severe => "severe+",
            MergedDr::Proliferative => "pdr",
        });
        match (dr, self.dme) {
            (Some(d), false) => d.to_owned(),
            (Some(d), true) => format!("{d}|dme"),
            (None, true) => "dme".to_owned(),
            (None, false) => "none".to_owned(),
        }
    }
}

impl fmt::Display for BinaryTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for BinaryTarget {
    type Err = Error;

    /// Accepts `moderate+`, `severe+`, `pdr`, `dme` and unions such as `severe+|dme`.
    fn from_str(s: &str) -> Result<Self> {
        let mut target = BinaryTarget { dr_at_least: None, dme: false };
        for part in s.split('|').map(|p| p.trim().to_ascii_lowercase()) {
            match part.as_str() {
                "moderate+" | "moderate" => target.dr_at_least = Some(MergedDr::Moderate),
                "severe+" | "severe" => target.dr_at_least = Some(MergedDr::Severe),
                "pdr" | "proliferative" => target.dr_at_least = Some(MergedDr::Proliferative),
                "dme" => target.dme = true,
                other => return Err(Error::Domain(format!("unknown target component {other:?} in {s:?}"))),
            }
        }
        if target.dr_at_least.is_none() && !target.dme {
            return Err(Error::Domain(format!("empty target {s:?}")));
        }
        Ok(target)
    }
}

/// 2x2 counts under a binary target.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
}

impl BinaryCounts {
    /// Tallies (reference, predicted) label pairs; pairs where either side's
    /// positivity is undetermined are skipped.
    pub fn from_pairs<'a, I>(pairs: I, target: &BinaryTarget) -> Self
    where
        I: IntoIterator<Item = (&'a CaseLabel, &'a CaseLabel)>,
    {
        let mut c = BinaryCounts::default();
        for (reference, predicted) in pairs {
            let (Some(r), Some(p)) = (target.positive(reference), target.positive(predicted)) else {
                continue;
            };
            match (r, p) {
                (true, true) => c.tp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fp += 1,
            }
        }
        c
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn sensitivity(&self) -> Result<MetricResult> {
        let n = self.positives();
        if n == 0 {
            return Err(Error::UndefinedMetric("sensitivity with no reference positives".into()));
        }
        let ci = clopper_pearson_ci(self.tp, n, CONFIDENCE_LEVEL)?;
        Ok(MetricResult::point("sensitivity", self.tp as f64 / n as f64, n).with_ci(ci, CiMethod::ClopperPearson))
    }

    pub fn specificity(&self) -> Result<MetricResult> {
        let n = self.negatives();
        if n == 0 {
            return Err(Error::UndefinedMetric("specificity with no reference negatives".into()));
        }
        let ci = clopper_pearson_ci(self.tn, n, CONFIDENCE_LEVEL)?;
        Ok(MetricResult::point("specificity", self.tn as f64 / n as f64, n).with_ci(ci, CiMethod::ClopperPearson))
    }
}

/// Sensitivity and specificity with 95% Clopper-Pearson intervals.
pub fn sensitivity_specificity(
    pairs: &[(CaseLabel, CaseLabel)],
    target: &BinaryTarget,
) -> Result<(MetricResult, MetricResult)> {
    let counts = BinaryCounts::from_pairs(pairs.iter().map(|(r, p)| (r, p)), target);
    Ok((counts.sensitivity()?, counts.specificity()?))
}
