//! Sample-size estimation, gradability reconciliation and selection of the
//! images sent to the specialist panel.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{DmeStatus, GradeRecord, ImageId, MergedDr, Task};
use crate::rng::{named_seed, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    /// Expected prevalence of the target condition.
    pub prevalence: f64,
    /// Margin of error as a fraction of the prevalence.
    pub relative_margin: f64,
    /// Two-sided type I error.
    pub alpha: f64,
    pub power: f64,
    /// Expected fraction of ungradable images.
    pub ungradable_rate: f64,
    pub seed: u64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan {
            prevalence: 0.06,
            relative_margin: 0.10,
            alpha: 0.05,
            power: 0.80,
            ungradable_rate: 0.20,
            seed: 0,
        }
    }
}

impl SamplingPlan {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("prevalence", self.prevalence),
            ("relative_margin", self.relative_margin),
            ("alpha", self.alpha),
            ("power", self.power),
            ("ungradable_rate", self.ungradable_rate),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Domain(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSize {
    pub n_core: u64,
    pub n_inflated: u64,
}

/// Single-proportion sample size with a relative margin, inflated for the
/// expected ungradable fraction.
///
/// `n_core` is `z² p(1-p) / d²` rounded to the nearest integer, with
/// `d = relative_margin * p`; `n_inflated` is `ceil(n_core / (1 - ungradable_rate))`.
/// The power field does not enter the single-proportion precision formula.
pub fn estimate_sample_size(plan: &SamplingPlan) -> Result<SampleSize> {
    plan.validate()?;
    let z = Normal::standard().inverse_cdf(1.0 - plan.alpha / 2.0);
    let p = plan.prevalence;
    let d = plan.relative_margin * p;
    let raw = z * z * p * (1.0 - p) / (d * d);
    let n_core = raw.round() as u64;
    let n_inflated = (n_core as f64 / (1.0 - plan.ungradable_rate)).ceil() as u64;
    Ok(SampleSize { n_core, n_inflated })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inclusion {
    Include,
    Exclude,
}

/// An image enters the analysis for a task only if both the regional grader
/// and the algorithm call it gradable for that task.
pub fn reconcile_gradability(regional: &GradeRecord, algorithm: &GradeRecord, task: Task) -> Result<Inclusion> {
    if regional.image_id != algorithm.image_id {
        return Err(Error::Contract(format!(
            "gradability reconciliation across different images: {} vs {}",
            regional.image_id, algorithm.image_id
        )));
    }
    if regional.gradability.for_task(task) && algorithm.gradability.for_task(task) {
        Ok(Inclusion::Include)
    } else {
        Ok(Inclusion::Exclude)
    }
}

/// Images chosen for specialist adjudication for one task.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjudicationSelection {
    pub task: Option<Task>,
    pub disagreement_ids: BTreeSet<ImageId>,
    pub agreed_referable_sample_ids: BTreeSet<ImageId>,
    pub agreed_nonreferable_sample_ids: BTreeSet<ImageId>,
}

impl AdjudicationSelection {
    pub fn contains(&self, id: &ImageId) -> bool {
        self.disagreement_ids.contains(id)
            || self.agreed_referable_sample_ids.contains(id)
            || self.agreed_nonreferable_sample_ids.contains(id)
    }

    pub fn all_ids(&self) -> BTreeSet<ImageId> {
        self.disagreement_ids
            .iter()
            .chain(&self.agreed_referable_sample_ids)
            .chain(&self.agreed_nonreferable_sample_ids)
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.disagreement_ids.len()
            + self.agreed_referable_sample_ids.len()
            + self.agreed_nonreferable_sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_disjoint(&self) -> Result<()> {
        let a = &self.disagreement_ids;
        let b = &self.agreed_referable_sample_ids;
        let c = &self.agreed_nonreferable_sample_ids;
        if a.is_disjoint(b) && a.is_disjoint(c) && b.is_disjoint(c) {
            Ok(())
        } else {
            Err(Error::Contract("adjudication selection sets overlap".into()))
        }
    }
}

/// Uniform sample of `k` ids without replacement (partial Fisher-Yates),
/// deterministic for a given seed and input set.
pub fn sample_ids(population: &BTreeSet<ImageId>, k: usize, seed: u64) -> Result<BTreeSet<ImageId>> {
    if k > population.len() {
        return Err(Error::Domain(format!(
            "requested sample of {k} exceeds population of {}",
            population.len()
        )));
    }
    let mut ids: Vec<&ImageId> = population.iter().collect();
    let mut rng = rng_for(seed);
    let (chosen, _) = ids.partial_shuffle(&mut rng, k);
    Ok(chosen.iter().map(|id| (*id).clone()).collect())
}

/// Random subset of gradability disagreements to adjudicate.
pub fn select_gradability_adjudication(
    disagreements: &BTreeSet<ImageId>,
    target: usize,
    seed: u64,
) -> Result<BTreeSet<ImageId>> {
    sample_ids(disagreements, target, named_seed(seed, "gradability"))
}

/// Sample sizes for the referable and non-referable agreement strata so that
/// together they are `fraction` of all agreements, split in proportion to the
/// strata.
pub fn proportional_allocation(referable: usize, nonreferable: usize, fraction: f64) -> Result<(usize, usize)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Domain(format!("sampling fraction {fraction} is outside [0, 1]")));
    }
    let total = referable + nonreferable;
    if total == 0 {
        return Ok((0, 0));
    }
    let n = (fraction * total as f64).round() as usize;
    let n_ref = ((n as f64) * referable as f64 / total as f64).round() as usize;
    let n_ref = n_ref.min(referable);
    let n_non = (n - n_ref).min(nonreferable);
    Ok((n_ref, n_non))
}

/// DR adjudication subset from per-image (regional, algorithm) calls on the
/// merged scale, restricted to images both call DR-gradable.
///
/// Every disagreement is selected (on the merged scale any disagreement has
/// at least one call at moderate or worse). Agreements are sampled
/// separately at moderate-or-worse and below moderate.
pub fn select_dr_adjudication(
    pairs: &BTreeMap<ImageId, (MergedDr, MergedDr)>,
    n_agreed_referable: usize,
    n_agreed_nonreferable: usize,
    seed: u64,
) -> Result<AdjudicationSelection> {
    let mut disagreement_ids = BTreeSet::new();
    let mut agreed_referable = BTreeSet::new();
    let mut agreed_nonreferable = BTreeSet::new();
    for (id, &(regional, algorithm)) in pairs {
        if regional != algorithm {
            if regional.is_referable() || algorithm.is_referable() {
                disagreement_ids.insert(id.clone());
            }
        } else if regional.is_referable() {
            agreed_referable.insert(id.clone());
        } else {
            agreed_nonreferable.insert(id.clone());
        }
    }
    let selection = AdjudicationSelection {
        task: Some(Task::Dr),
        disagreement_ids,
        agreed_referable_sample_ids: sample_ids(
            &agreed_referable,
            n_agreed_referable,
            named_seed(seed, "dr-agreed-referable"),
        )?,
        agreed_nonreferable_sample_ids: sample_ids(
            &agreed_nonreferable,
            n_agreed_nonreferable,
            named_seed(seed, "dr-agreed-nonreferable"),
        )?,
    };
    selection.check_disjoint()?;
    Ok(selection)
}

/// Agreement counts (referable, non-referable) for DR pairs.
pub fn dr_agreement_strata(pairs: &BTreeMap<ImageId, (MergedDr, MergedDr)>) -> (usize, usize) {
    pairs.values().filter(|(r, a)| r == a).fold((0, 0), |(refer, non), (r, _)| {
        if r.is_referable() {
            (refer + 1, non)
        } else {
            (refer, non + 1)
        }
    })
}

/// DME adjudication subset: all binary disagreements plus a uniform
/// `fraction` of the agreements, restricted to images both call DME-gradable.
pub fn select_dme_adjudication(
    pairs: &BTreeMap<ImageId, (DmeStatus, DmeStatus)>,
    fraction: f64,
    seed: u64,
) -> Result<AdjudicationSelection> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Domain(format!("sampling fraction {fraction} is outside [0, 1]")));
    }
    let mut disagreement_ids = BTreeSet::new();
    let mut agreed = BTreeSet::new();
    for (id, (regional, algorithm)) in pairs {
        if regional != algorithm {
            disagreement_ids.insert(id.clone());
        } else {
            agreed.insert(id.clone());
        }
    }
    let k = (fraction * agreed.len() as f64).round() as usize;
    let sampled = sample_ids(&agreed, k, named_seed(seed, "dme-agreed"))?;
    let (agreed_referable_sample_ids, agreed_nonreferable_sample_ids) = sampled
        .into_iter()
        .partition(|id| pairs[id].0.is_referable());
    let selection = AdjudicationSelection {
        task: Some(Task::Dme),
        disagreement_ids,
        agreed_referable_sample_ids,
        agreed_nonreferable_sample_ids,
    };
    selection.check_disjoint()?;
    Ok(selection)
}
