//! Per-region and per-confidence-bin comparison tables.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{
    bootstrap_ci, quadratic_weighted_kappa, roc_auc, BinaryCounts, BinaryTarget, CaseLabel, CiMethod, ConfusionMatrix,
    MetricResult, CONFIDENCE_LEVEL,
};
use crate::cascade::{dr_tail_mass, max_confidence};
use crate::error::{Error, Result};
use crate::model::{ConfidenceVector, DrSeverity, ImageId, MergedDr, Region};
use crate::rng::named_seed;

/// Everything known about one image once the reference standard exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredImage {
    pub image_id: ImageId,
    pub region: Region,
    pub reference: CaseLabel,
    pub grader: CaseLabel,
    pub algorithm: CaseLabel,
    pub scores: Option<ConfidenceVector>,
}

/// Continuous algorithm score for a target: the DR tail mass at the
/// target level, the DME confidence, or the larger of the two for unions.
pub fn target_score(target: &BinaryTarget, cv: &ConfidenceVector) -> f64 {
    let dr = target.dr_at_least.map(|level| {
        let severity = match level {
            MergedDr::NoOrMild => DrSeverity::NoDr,
            MergedDr::Moderate => DrSeverity::Moderate,
            MergedDr::Severe => DrSeverity::Severe,
            MergedDr::Proliferative => DrSeverity::Proliferative,
        };
        dr_tail_mass(&cv.dr_scores, severity).unwrap_or(0.0)
    });
    let dme = target.dme.then_some(cv.dme_score);
    match (dr, dme) {
        (Some(a), Some(b)) => a.max(b),
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreakdownOptions {
    /// 0 disables kappa intervals.
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    /// `"All"` for the pooled row, otherwise the region number.
    pub region: String,
    pub target: String,
    pub reference_positives: u64,
    pub reference_negatives: u64,
    pub grader_sensitivity: Option<MetricResult>,
    pub algorithm_sensitivity: Option<MetricResult>,
    pub grader_specificity: Option<MetricResult>,
    pub algorithm_specificity: Option<MetricResult>,
    pub algorithm_auc: Option<MetricResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaRow {
    pub region: String,
    pub n: u64,
    pub grader_kappa: Option<MetricResult>,
    pub algorithm_kappa: Option<MetricResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionBreakdown {
    pub rows: Vec<RegionRow>,
    pub kappas: Vec<KappaRow>,
}

fn target_row(region: String, images: &[&ScoredImage], target: &BinaryTarget) -> RegionRow {
    let grader = BinaryCounts::from_pairs(images.iter().map(|i| (&i.reference, &i.grader)), target);
    let algorithm = BinaryCounts::from_pairs(images.iter().map(|i| (&i.reference, &i.algorithm)), target);
    let (mut positives, mut negatives) = (0, 0);
    for image in images {
        match target.positive(&image.reference) {
            Some(true) => positives += 1,
            Some(false) => negatives += 1,
            None => {}
        }
    }

    let (scores, labels): (Vec<f64>, Vec<bool>) = images
        .iter()
        .filter(|i| target.positive(&i.algorithm).is_some())
        .filter_map(|i| Some((target_score(target, i.scores.as_ref()?), target.positive(&i.reference)?)))
        .unzip();
    let algorithm_auc = roc_auc(&scores, &labels)
        .ok()
        .map(|(_, auc)| MetricResult::point("auc", auc, scores.len() as u64));

    RegionRow {
        region,
        target: target.name(),
        reference_positives: positives,
        reference_negatives: negatives,
        grader_sensitivity: grader.sensitivity().ok(),
        algorithm_sensitivity: algorithm.sensitivity().ok(),
        grader_specificity: grader.specificity().ok(),
        algorithm_specificity: algorithm.specificity().ok(),
        algorithm_auc,
    }
}

fn dr_pairs(images: &[&ScoredImage], rater: impl Fn(&ScoredImage) -> Option<MergedDr>) -> Vec<(MergedDr, MergedDr)> {
    images.iter().filter_map(|i| Some((i.reference.dr?, rater(i)?))).collect()
}

fn kappa_with_ci(pairs: &[(MergedDr, MergedDr)], options: &BreakdownOptions, stream: &str) -> Option<MetricResult> {
    let kappa = |p: &[(MergedDr, MergedDr)]| quadratic_weighted_kappa(&ConfusionMatrix::merged_dr(p.iter().copied())).ok();
    let estimate = kappa(pairs)?;
    let result = MetricResult::point("quadratic_weighted_kappa", estimate, pairs.len() as u64);
    if options.bootstrap_resamples == 0 {
        return Some(result);
    }
    match bootstrap_ci(pairs, kappa, options.bootstrap_resamples, CONFIDENCE_LEVEL, named_seed(options.seed, stream)) {
        Ok(ci) => Some(result.with_ci(ci, CiMethod::BootstrapPercentile)),
        Err(_) => Some(result),
    }
}

fn kappa_row(region: String, images: &[&ScoredImage], options: &BreakdownOptions) -> KappaRow {
    let grader = dr_pairs(images, |i| i.grader.dr);
    let algorithm = dr_pairs(images, |i| i.algorithm.dr);
    KappaRow {
        n: images.iter().filter(|i| i.reference.dr.is_some()).count() as u64,
        grader_kappa: kappa_with_ci(&grader, options, &format!("kappa-{region}-grader")),
        algorithm_kappa: kappa_with_ci(&algorithm, options, &format!("kappa-{region}-algorithm")),
        region,
    }
}

/// Pooled ("All") row followed by one row per region, for every target, plus
/// quadratic-weighted kappa on the merged DR scale per region. Metrics that
/// are undefined for a slice are left empty without affecting other rows.
pub fn per_region_breakdown(images: &[ScoredImage], targets: &[BinaryTarget], options: &BreakdownOptions) -> RegionBreakdown {
    let regions: BTreeSet<Region> = images.iter().map(|i| i.region).collect();
    let mut slices: Vec<(String, Vec<&ScoredImage>)> = vec![("All".to_owned(), images.iter().collect())];
    for region in regions {
        slices.push((region.to_string(), images.iter().filter(|i| i.region == region).collect()));
    }
    let mut rows = Vec::new();
    for target in targets {
        for (name, slice) in &slices {
            rows.push(target_row(name.clone(), slice, target));
        }
    }
    let kappas = slices.iter().map(|(name, slice)| kappa_row(name.clone(), slice, options)).collect();
    RegionBreakdown { rows, kappas }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub low: f64,
    pub high: f64,
    pub target: String,
    pub n_images: u64,
    pub grader_sensitivity: Option<MetricResult>,
    pub algorithm_sensitivity: Option<MetricResult>,
    pub grader_specificity: Option<MetricResult>,
    pub algorithm_specificity: Option<MetricResult>,
}

/// Bins images by the algorithm's maximum confidence and compares both
/// raters within each bin. `bin_edges` are interior cut points; bins are
/// `[lo, hi)` except the last, which includes 1.
pub fn confidence_bin_analysis(images: &[ScoredImage], bin_edges: &[f64], targets: &[BinaryTarget]) -> Result<Vec<BinRow>> {
    let mut bounds = vec![0.0];
    for &edge in bin_edges {
        if !(0.0..=1.0).contains(&edge) {
            return Err(Error::Domain(format!("bin edge {edge} is outside [0, 1]")));
        }
        if edge <= *bounds.last().unwrap() && !(edge == 0.0 && bounds.len() == 1) {
            return Err(Error::Domain("bin edges must be strictly increasing".into()));
        }
        if edge > 0.0 && edge < 1.0 {
            bounds.push(edge);
        }
    }
    bounds.push(1.0);

    let mut binned: Vec<Vec<&ScoredImage>> = vec![Vec::new(); bounds.len() - 1];
    for image in images {
        let Some(cv) = &image.scores else { continue };
        let m = max_confidence(&cv.dr_scores, cv.dme_score)?;
        let bin = bounds[1..bounds.len() - 1].iter().filter(|&&e| m >= e).count();
        binned[bin].push(image);
    }

    let mut rows = Vec::new();
    for target in targets {
        for (b, slice) in binned.iter().enumerate() {
            let grader = BinaryCounts::from_pairs(slice.iter().map(|i| (&i.reference, &i.grader)), target);
            let algorithm = BinaryCounts::from_pairs(slice.iter().map(|i| (&i.reference, &i.algorithm)), target);
            rows.push(BinRow {
                low: bounds[b],
                high: bounds[b + 1],
                target: target.name(),
                n_images: slice.len() as u64,
                grader_sensitivity: grader.sensitivity().ok(),
                algorithm_sensitivity: algorithm.sensitivity().ok(),
                grader_specificity: grader.specificity().ok(),
                algorithm_specificity: algorithm.specificity().ok(),
            });
        }
    }
    Ok(rows)
}
