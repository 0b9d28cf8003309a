//! Conversion of algorithm confidences into discrete calls.
//!
//! Binary outputs (DME, DR gradability, DME gradability) use one inclusive
//! threshold each. The five DR confidences go through a descending-severity
//! cascade: the scores are normalised to a distribution, and the first level
//! (proliferative, severe, moderate, mild) whose tail mass `P(severity >=
//! level)` reaches its threshold is returned. If none does, the call is no DR.

use serde::{Deserialize, Serialize};

use crate::error::{check_unit, Error, Result};
use crate::model::{ConfidenceVector, DmeStatus, DrSeverity, GradeRecord, Gradability, GraderId, GraderRole, ImageId};

/// Tail-mass thresholds for the DR cascade, keyed by the level they gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrTailThresholds {
    pub pdr: f64,
    pub severe: f64,
    pub moderate: f64,
    pub mild: f64,
}

impl DrTailThresholds {
    /// Threshold gating `level`; `None` for no DR, which is the fallthrough.
    pub fn for_level(&self, level: DrSeverity) -> Option<f64> {
        match level {
            DrSeverity::NoDr => None,
            DrSeverity::Mild => Some(self.mild),
            DrSeverity::Moderate => Some(self.moderate),
            DrSeverity::Severe => Some(self.severe),
            DrSeverity::Proliferative => Some(self.pdr),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradabilityThresholds {
    pub dr: f64,
    pub dme: f64,
}

/// Every threshold the algorithm's outputs are compared against.
///
/// Serialised as flat dotted keys: `dr_tail.pdr`, `dr_tail.severe`,
/// `dr_tail.moderate`, `dr_tail.mild`, `dme`, `gradability.dr`,
/// `gradability.dme`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CascadeThresholds {
    pub dr_tail: DrTailThresholds,
    pub dme: f64,
    pub gradability: GradabilityThresholds,
}

impl Default for CascadeThresholds {
    fn default() -> Self {
        CascadeThresholds {
            dr_tail: DrTailThresholds { pdr: 0.35, severe: 0.40, moderate: 0.45, mild: 0.50 },
            dme: 0.45,
            gradability: GradabilityThresholds { dr: 0.5, dme: 0.5 },
        }
    }
}

impl CascadeThresholds {
    pub fn validate(&self) -> Result<()> {
        let t = &self.dr_tail;
        check_unit("dr_tail.pdr", t.pdr)?;
        check_unit("dr_tail.severe", t.severe)?;
        check_unit("dr_tail.moderate", t.moderate)?;
        check_unit("dr_tail.mild", t.mild)?;
        check_unit("dme", self.dme)?;
        check_unit("gradability.dr", self.gradability.dr)?;
        check_unit("gradability.dme", self.gradability.dme)
    }

    /// Reads the threshold keys from a key/value configuration text. Other
    /// keys and sections in the same file are ignored.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Domain(format!("threshold config: {e}")))?;
        Self::from_table(&table)
    }

    pub fn from_table(table: &toml::Table) -> Result<Self> {
        let get = |section: Option<&str>, key: &str| -> Result<f64> {
            let name = match section {
                Some(s) => format!("{s}.{key}"),
                None => key.to_owned(),
            };
            let value = match section {
                Some(s) => table.get(s).and_then(|t| t.as_table()).and_then(|t| t.get(key)),
                None => table.get(key),
            };
            match value {
                Some(toml::Value::Float(f)) => Ok(*f),
                Some(toml::Value::Integer(i)) => Ok(*i as f64),
                Some(other) => Err(Error::Domain(format!("{name} must be a number, got {other}"))),
                None => Err(Error::Domain(format!("missing threshold key {name}"))),
            }
        };
        let thresholds = CascadeThresholds {
            dr_tail: DrTailThresholds {
                pdr: get(Some("dr_tail"), "pdr")?,
                severe: get(Some("dr_tail"), "severe")?,
                moderate: get(Some("dr_tail"), "moderate")?,
                mild: get(Some("dr_tail"), "mild")?,
            },
            dme: get(None, "dme")?,
            gradability: GradabilityThresholds {
                dr: get(Some("gradability"), "dr")?,
                dme: get(Some("gradability"), "dme")?,
            },
        };
        thresholds.validate()?;
        Ok(thresholds)
    }

    pub fn to_config_string(&self) -> String {
        let t = &self.dr_tail;
        format!(
            "dr_tail.pdr = {}\ndr_tail.severe = {}\ndr_tail.moderate = {}\ndr_tail.mild = {}\n\
             dme = {}\ngradability.dr = {}\ngradability.dme = {}\n",
            fmt_f(t.pdr),
            fmt_f(t.severe),
            fmt_f(t.moderate),
            fmt_f(t.mild),
            fmt_f(self.dme),
            fmt_f(self.gradability.dr),
            fmt_f(self.gradability.dme),
        )
    }
}

// toml floats need a decimal point.
fn fmt_f(v: f64) -> String {
    let s = v.to_string();
    if s.contains('.') || s.contains('e') {
        s
    } else {
        format!("{s}.0")
    }
}

/// Inclusive threshold: `score >= threshold`.
pub fn apply_binary_threshold(score: f64, threshold: f64) -> Result<bool> {
    check_unit("score", score)?;
    check_unit("threshold", threshold)?;
    Ok(score >= threshold)
}

/// Single DR severity from five per-level confidences.
pub fn cascade_dr_severity(dr_scores: &[f64; 5], thresholds: &DrTailThresholds) -> Result<DrSeverity> {
    for s in dr_scores {
        check_unit("DR score", *s)?;
    }
    let total: f64 = dr_scores.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("all DR scores are zero".into()));
    }
    let mut tail = 0.0;
    for level in DrSeverity::ALL.into_iter().skip(1).rev() {
        tail += dr_scores[level.code() as usize];
        let threshold = thresholds.for_level(level).expect("levels above no DR are gated");
        check_unit("DR tail threshold", threshold)?;
        if tail / total >= threshold {
            return Ok(level);
        }
    }
    Ok(DrSeverity::NoDr)
}

/// Largest of the five DR scores and the DME score.
pub fn max_confidence(dr_scores: &[f64; 5], dme_score: f64) -> Result<f64> {
    for s in dr_scores {
        check_unit("DR score", *s)?;
    }
    check_unit("DME score", dme_score)?;
    Ok(dr_scores.iter().copied().fold(dme_score, f64::max))
}

/// Normalised tail mass `P(severity >= level)` of a DR score vector.
pub fn dr_tail_mass(dr_scores: &[f64; 5], level: DrSeverity) -> Result<f64> {
    let total: f64 = dr_scores.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("all DR scores are zero".into()));
    }
    Ok(dr_scores[level.code() as usize..].iter().sum::<f64>() / total)
}

/// Discrete algorithm output for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlgorithmCall {
    pub gradability: Gradability,
    pub dr: Option<DrSeverity>,
    pub dme: Option<DmeStatus>,
}

impl AlgorithmCall {
    pub fn into_grade_record(self, image_id: ImageId, grader_id: GraderId) -> GradeRecord {
        GradeRecord {
            image_id,
            grader_id,
            grader_role: GraderRole::Algorithm,
            gradability: self.gradability,
            dr: self.dr,
            dme: self.dme,
            round: 0,
            comment: String::new(),
            timestamp: None,
        }
    }
}

/// Applies gradability thresholds first; severity and DME calls are only
/// made for tasks the algorithm considers gradable.
pub fn classify(cv: &ConfidenceVector, thresholds: &CascadeThresholds) -> Result<AlgorithmCall> {
    cv.validate()?;
    let gradability = Gradability {
        dr_gradable: apply_binary_threshold(cv.dr_gradability_score, thresholds.gradability.dr)?,
        dme_gradable: apply_binary_threshold(cv.dme_gradability_score, thresholds.gradability.dme)?,
    };
    let dr = if gradability.dr_gradable {
        Some(cascade_dr_severity(&cv.dr_scores, &thresholds.dr_tail)?)
    } else {
        None
    };
    let dme = if gradability.dme_gradable {
        Some(DmeStatus::from_flag(apply_binary_threshold(cv.dme_score, thresholds.dme)?))
    } else {
        None
    };
    Ok(AlgorithmCall { gradability, dr, dme })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn tail(pdr: f64, severe: f64, moderate: f64, mild: f64) -> DrTailThresholds {
        DrTailThresholds { pdr, severe, moderate, mild }
    }

    #[test]
    fn binary_threshold_examples() {
        assert!(!apply_binary_threshold(0.0, 0.5).unwrap());
        assert!(apply_binary_threshold(0.5, 0.5).unwrap());
        assert!(apply_binary_threshold(0.93, 0.9).unwrap());
        assert!(matches!(apply_binary_threshold(1.2, 0.5), Err(Error::Domain(_))));
        assert!(matches!(apply_binary_threshold(0.2, -0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn cascade_examples() {
        let any = tail(0.3, 0.6, 0.2, 0.9);
        assert_eq!(cascade_dr_severity(&[1.0, 0.0, 0.0, 0.0, 0.0], &any).unwrap(), DrSeverity::NoDr);
        assert_eq!(
            cascade_dr_severity(&[0.0, 0.0, 0.0, 0.0, 1.0], &tail(1.0, 1.0, 1.0, 1.0)).unwrap(),
            DrSeverity::Proliferative
        );
        assert!(matches!(cascade_dr_severity(&[0.0; 5], &any), Err(Error::Degenerate(_))));
    }

    #[test]
    fn endpoints_mean_always_and_never() {
        let scores = [0.2, 0.2, 0.2, 0.2, 0.2];
        // Threshold 0 on the top level always fires.
        assert_eq!(cascade_dr_severity(&scores, &tail(0.0, 1.0, 1.0, 1.0)).unwrap(), DrSeverity::Proliferative);
        // Threshold 1 fires only with all mass in the tail.
        assert_eq!(cascade_dr_severity(&scores, &tail(1.0, 1.0, 1.0, 1.0)).unwrap(), DrSeverity::NoDr);
    }

    /// Straight-line restatement of the cascade rule, kept separate from the
    /// implementation above.
    fn oracle(scores: &[f64; 5], t: &DrTailThresholds) -> DrSeverity {
        let total = scores[0] + scores[1] + scores[2] + scores[3] + scores[4];
        let p = |i: usize| scores[i] / total;
        let tail_pdr = p(4);
        let tail_severe = p(3) + p(4);
        let tail_moderate = p(2) + p(3) + p(4);
        let tail_mild = p(1) + p(2) + p(3) + p(4);
        if tail_pdr >= t.pdr {
            DrSeverity::Proliferative
        } else if tail_severe >= t.severe {
            DrSeverity::Severe
        } else if tail_moderate >= t.moderate {
            DrSeverity::Moderate
        } else if tail_mild >= t.mild {
            DrSeverity::Mild
        } else {
            DrSeverity::NoDr
        }
    }

    #[test]
    fn cascade_matches_one_pass_oracle_on_random_inputs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20240601);
        for _ in 0..1000 {
            let mut scores = [0.0; 5];
            for s in &mut scores {
                *s = rng.random::<f64>();
            }
            let t = tail(rng.random(), rng.random(), rng.random(), rng.random());
            assert_eq!(cascade_dr_severity(&scores, &t).unwrap(), oracle(&scores, &t));
        }
    }

    #[test]
    fn max_confidence_examples() {
        assert_eq!(max_confidence(&[0.1, 0.2, 0.3, 0.1, 0.3], 0.25).unwrap(), 0.3);
        assert_eq!(max_confidence(&[0.0; 5], 0.0).unwrap(), 0.0);
        let m = max_confidence(&[0.65, 0.1, 0.1, 0.1, 0.05], 0.72).unwrap();
        assert_eq!(m, 0.72);
        // The uncertain bin is strictly below 0.7.
        assert!(m >= 0.7);
        assert!(max_confidence(&[0.0, 0.0, 1.5, 0.0, 0.0], 0.0).is_err());
    }

    fn arb_scores() -> impl Strategy<Value = [f64; 5]> {
        prop::array::uniform5(0.0f64..=1.0).prop_filter("nonzero", |s| s.iter().sum::<f64>() > 1e-6)
    }

    fn arb_tail() -> impl Strategy<Value = DrTailThresholds> {
        (0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(a, b, c, d)| tail(a, b, c, d))
    }

    proptest! {
        #[test]
        fn raising_top_threshold_never_creates_pdr(scores in arb_scores(), t in arb_tail(), bump in 0.0f64..=1.0) {
            let before = cascade_dr_severity(&scores, &t).unwrap();
            let mut raised = t;
            raised.pdr = (t.pdr + bump).min(1.0);
            let after = cascade_dr_severity(&scores, &raised).unwrap();
            if before != DrSeverity::Proliferative {
                prop_assert_ne!(after, DrSeverity::Proliferative);
            }
        }

        #[test]
        fn thresholds_below_the_returned_level_are_irrelevant(scores in arb_scores(), t in arb_tail(), other in arb_tail()) {
            let out = cascade_dr_severity(&scores, &t).unwrap();
            let mut shuffled = t;
            if out > DrSeverity::Mild { shuffled.mild = other.mild; }
            if out > DrSeverity::Moderate { shuffled.moderate = other.moderate; }
            if out > DrSeverity::Severe { shuffled.severe = other.severe; }
            prop_assert_eq!(cascade_dr_severity(&scores, &shuffled).unwrap(), out);
        }

        #[test]
        fn cascade_is_scale_invariant(scores in arb_scores(), t in arb_tail(), c in 0.01f64..=1.0) {
            let scaled = scores.map(|s| s * c);
            // Skip instances that sit on a threshold to within rounding.
            let total: f64 = scores.iter().sum();
            let near_boundary = (1..5).any(|i| {
                let tail_mass = scores[i..].iter().sum::<f64>() / total;
                let thr = t.for_level(DrSeverity::ALL[i]).unwrap();
                (tail_mass - thr).abs() < 1e-9
            });
            prop_assume!(!near_boundary);
            prop_assert_eq!(cascade_dr_severity(&scaled, &t).unwrap(), cascade_dr_severity(&scores, &t).unwrap());
        }
    }

    #[test]
    fn config_keys_parse_and_round_trip() {
        let text = "dr_tail.pdr = 0.3\ndr_tail.severe = 0.4\ndr_tail.moderate = 0.5\ndr_tail.mild = 0.6\n\
                    dme = 0.45\ngradability.dr = 0.5\ngradability.dme = 1\n\n[sampling]\nseed = 3\n";
        let t = CascadeThresholds::from_config_str(text).unwrap();
        assert_eq!(t.dr_tail.mild, 0.6);
        assert_eq!(t.gradability.dme, 1.0);
        let again = CascadeThresholds::from_config_str(&t.to_config_string()).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn config_rejects_missing_and_out_of_range_keys() {
        let missing = "dr_tail.pdr = 0.3\ndme = 0.4\n";
        assert!(CascadeThresholds::from_config_str(missing).is_err());
        let mut bad = CascadeThresholds::default().to_config_string();
        bad = bad.replace("dme = 0.45", "dme = 1.5");
        assert!(CascadeThresholds::from_config_str(&bad).is_err());
    }

    #[test]
    fn classify_skips_ungradable_tasks() {
        let cv = ConfidenceVector {
            dr_scores: [0.0, 0.0, 1.0, 0.0, 0.0],
            dme_score: 0.9,
            dr_gradability_score: 0.9,
            dme_gradability_score: 0.1,
            quality_score: 0.8,
        };
        let call = classify(&cv, &CascadeThresholds::default()).unwrap();
        assert_eq!(call.dr, Some(DrSeverity::Moderate));
        assert_eq!(call.dme, None);
        assert!(!call.gradability.dme_gradable);
    }
}
