//! Comparison statistics between graders, the algorithm and the reference
//! standard.

mod binomial;
mod breakdown;
mod confusion;
mod kappa;
mod resampling;
mod roc;
mod target;

pub use binomial::{beta_quantile, clopper_pearson_ci};
pub use breakdown::{
    confidence_bin_analysis, per_region_breakdown, target_score, BinRow, BreakdownOptions, KappaRow, RegionBreakdown,
    RegionRow, ScoredImage,
};
pub use confusion::ConfusionMatrix;
pub use kappa::{quadratic_weighted_kappa, unweighted_kappa};
pub use resampling::{
    bootstrap_ci, permutation_test, permutation_test_with, PermutationMode, PermutationResult, MAX_EXCLUDED_FRACTION,
    MAX_REDRAWS,
};
pub use roc::{roc_auc, RocPoint};
pub use target::{sensitivity_specificity, BinaryCounts, BinaryTarget, CaseLabel};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    ClopperPearson,
    BootstrapPercentile,
    None,
}

/// A point estimate with its sample size and optional interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub name: String,
    pub estimate: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub ci_method: CiMethod,
    pub n: u64,
}

impl MetricResult {
    pub fn point(name: impl Into<String>, estimate: f64, n: u64) -> Self {
        MetricResult { name: name.into(), estimate, ci_low: None, ci_high: None, ci_method: CiMethod::None, n }
    }

    pub fn with_ci(mut self, (low, high): (f64, f64), method: CiMethod) -> Self {
        self.ci_low = Some(low);
        self.ci_high = Some(high);
        self.ci_method = method;
        self
    }

    /// `0.740 [0.724-0.755]`
    pub fn display3(&self) -> String {
        match (self.ci_low, self.ci_high) {
            (Some(lo), Some(hi)) => format!("{:.3} [{:.3}-{:.3}]", self.estimate, lo, hi),
            _ => format!("{:.3}", self.estimate),
        }
    }
}

/// Default confidence level for every interval.
pub const CONFIDENCE_LEVEL: f64 = 0.95;
