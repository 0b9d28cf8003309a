//! Evaluation configuration, read from one TOML file.
//!
//! Threshold keys (`dr_tail.*`, `dme`, `gradability.*`) sit at the top
//! level, next to the run settings. Input paths are resolved against the
//! directory holding the config file.
//!
//! ```toml
//! seed = 7
//! bootstrap_resamples = 1000
//! permutation_draws = 2000
//! bin_edges = [0.7]
//! targets = ["moderate+", "severe+", "pdr", "dme", "severe+|dme"]
//! dr_tail.pdr = 0.35
//! # ... remaining thresholds
//!
//! [inputs]
//! grades = "grades.csv"
//! confidences = "confidences.csv"
//! images = "images.csv"
//! patients = "patients.csv"
//!
//! [reference]
//! mode = "simulated"   # or "supplied" / "event_log" with `path`
//! truth = "truth.csv"
//!
//! [sampling]
//! prevalence = 0.06
//! ```

use std::path::{Path, PathBuf};

use drscreen_core::adjudication::{Panel, SeniorVisibility};
use drscreen_core::cascade::CascadeThresholds;
use drscreen_core::metrics::BinaryTarget;
use drscreen_core::sampling::{SampleSize, SamplingPlan};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EvalError, Result};
use crate::ingest::InputPaths;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub plan: SamplingPlan,
    /// Gradability disagreements to adjudicate per task, capped at the number available.
    pub gradability_target: usize,
    /// Fraction of DR agreements sampled for adjudication.
    pub dr_agreement_fraction: f64,
    /// Explicit stratum sizes; override the proportional allocation.
    pub dr_agreed_referable: Option<usize>,
    pub dr_agreed_nonreferable: Option<usize>,
    pub dme_agreement_fraction: f64,
    /// Externally reported sample sizes the computed ones are compared against.
    pub benchmark: SampleSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelConfig {
    pub dr: Panel,
    pub dme: Panel,
    pub gradability: Panel,
    pub senior_visibility: SeniorVisibility,
}

impl Default for PanelConfig {
    fn default() -> Self {
        PanelConfig {
            dr: Panel::new("dr-specialist-a", "dr-specialist-b", "dr-senior"),
            dme: Panel::new("dme-specialist-a", "dme-specialist-b", "dme-senior"),
            gradability: Panel::new("dr-specialist-a", "dr-specialist-b", "dr-senior"),
            senior_visibility: SeniorVisibility::Blind,
        }
    }
}

/// Where the reference standard comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ReferenceSource {
    /// A ready-made reference file.
    Supplied { path: PathBuf },
    /// Replay of a recorded adjudication event log.
    EventLog { path: PathBuf, panels: PanelConfig },
    /// Scripted specialists grading from the latent truth of a synthetic cohort.
    Simulated { truth: PathBuf, specialist_accuracy: f64, panels: PanelConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub inputs: InputPaths,
    pub reference: ReferenceSource,
    pub thresholds: CascadeThresholds,
    pub sampling: SamplingConfig,
    pub bootstrap_resamples: usize,
    pub permutation_draws: usize,
    pub bin_edges: Vec<f64>,
    pub targets: Vec<BinaryTarget>,
    pub seed: u64,
    /// SHA-256 of the config text.
    pub config_hash: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInputs {
    grades: PathBuf,
    confidences: PathBuf,
    images: PathBuf,
    patients: PathBuf,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawPanels {
    dr: Option<[String; 3]>,
    dme: Option<[String; 3]>,
    gradability: Option<[String; 3]>,
    #[serde(default)]
    senior_visibility: SeniorVisibility,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReference {
    mode: String,
    path: Option<PathBuf>,
    truth: Option<PathBuf>,
    specialist_accuracy: Option<f64>,
    #[serde(default)]
    panels: RawPanels,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSampling {
    prevalence: Option<f64>,
    relative_margin: Option<f64>,
    alpha: Option<f64>,
    power: Option<f64>,
    ungradable_rate: Option<f64>,
    seed: Option<u64>,
    gradability_target: Option<usize>,
    dr_agreement_fraction: Option<f64>,
    dr_agreed_referable: Option<usize>,
    dr_agreed_nonreferable: Option<usize>,
    dme_agreement_fraction: Option<f64>,
    benchmark_n_core: Option<u64>,
    benchmark_n_inflated: Option<u64>,
}

#[derive(Deserialize)]
struct RawConfig {
    seed: u64,
    #[serde(default = "default_resamples")]
    bootstrap_resamples: usize,
    #[serde(default = "default_draws")]
    permutation_draws: usize,
    #[serde(default = "default_bin_edges")]
    bin_edges: Vec<f64>,
    #[serde(default = "default_targets")]
    targets: Vec<String>,
    inputs: RawInputs,
    reference: RawReference,
    sampling: Option<RawSampling>,
}

fn default_resamples() -> usize {
    1000
}

fn default_draws() -> usize {
    2000
}

fn default_bin_edges() -> Vec<f64> {
    vec![0.7]
}

/// Benchmark sample sizes for the default plan. The single-proportion
/// formula gives 6,018 / 7,523 for that plan, so reports flag the gap.
pub const BENCHMARK_SAMPLE_SIZE: SampleSize = SampleSize { n_core: 6112, n_inflated: 7450 };

pub const DEFAULT_TARGETS: [&str; 5] = ["moderate+", "severe+", "pdr", "dme", "severe+|dme"];

fn default_targets() -> Vec<String> {
    DEFAULT_TARGETS.iter().map(|s| s.to_string()).collect()
}

fn panel(raw: Option<[String; 3]>, default: Panel) -> Result<Panel> {
    let p = match raw {
        Some([a, b, s]) => Panel::new(a, b, s),
        None => default,
    };
    p.validate()?;
    Ok(p)
}

impl RawPanels {
    fn resolve(self) -> Result<PanelConfig> {
        let d = PanelConfig::default();
        Ok(PanelConfig {
            dr: panel(self.dr, d.dr)?,
            dme: panel(self.dme, d.dme)?,
            gradability: panel(self.gradability, d.gradability)?,
            senior_visibility: self.senior_visibility,
        })
    }
}

impl EvalConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_str_in(&text, base)
    }

    /// Parses config text; relative paths are resolved against `base`.
    pub fn from_str_in(text: &str, base: &Path) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| EvalError::Config(e.to_string()))?;
        let thresholds = CascadeThresholds::from_table(&table)?;
        let mut rest = table;
        for key in ["dr_tail", "dme", "gradability"] {
            rest.remove(key);
        }
        let raw: RawConfig = rest.try_into().map_err(|e: toml::de::Error| EvalError::Config(e.to_string()))?;
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };

        let inputs = InputPaths {
            grades: resolve(raw.inputs.grades),
            confidences: resolve(raw.inputs.confidences),
            images: resolve(raw.inputs.images),
            patients: resolve(raw.inputs.patients),
        };

        let r = raw.reference;
        let need = |field: Option<PathBuf>, name: &str| {
            field.map(resolve).ok_or_else(|| EvalError::Config(format!("reference mode {} needs `{name}`", r.mode)))
        };
        let reference = match r.mode.as_str() {
            "supplied" => ReferenceSource::Supplied { path: need(r.path.clone(), "path")? },
            "event_log" => ReferenceSource::EventLog { path: need(r.path.clone(), "path")?, panels: r.panels.resolve()? },
            "simulated" => {
                let accuracy = r.specialist_accuracy.unwrap_or(0.8);
                if !(0.0..=1.0).contains(&accuracy) {
                    return Err(EvalError::Config(format!("specialist_accuracy {accuracy} is outside [0, 1]")));
                }
                ReferenceSource::Simulated {
                    truth: need(r.truth.clone(), "truth")?,
                    specialist_accuracy: accuracy,
                    panels: r.panels.resolve()?,
                }
            }
            other => {
                return Err(EvalError::Config(format!(
                    "unknown reference mode {other:?}; expected supplied, event_log or simulated"
                )))
            }
        };

        let s = raw.sampling.unwrap_or(RawSampling {
            prevalence: None,
            relative_margin: None,
            alpha: None,
            power: None,
            ungradable_rate: None,
            seed: None,
            gradability_target: None,
            dr_agreement_fraction: None,
            dr_agreed_referable: None,
            dr_agreed_nonreferable: None,
            dme_agreement_fraction: None,
            benchmark_n_core: None,
            benchmark_n_inflated: None,
        });
        let d = SamplingPlan::default();
        let plan = SamplingPlan {
            prevalence: s.prevalence.unwrap_or(d.prevalence),
            relative_margin: s.relative_margin.unwrap_or(d.relative_margin),
            alpha: s.alpha.unwrap_or(d.alpha),
            power: s.power.unwrap_or(d.power),
            ungradable_rate: s.ungradable_rate.unwrap_or(d.ungradable_rate),
            seed: s.seed.unwrap_or(raw.seed),
        };
        plan.validate()?;
        if s.dr_agreed_referable.is_some() != s.dr_agreed_nonreferable.is_some() {
            return Err(EvalError::Config(
                "dr_agreed_referable and dr_agreed_nonreferable must be given together".into(),
            ));
        }
        let sampling = SamplingConfig {
            plan,
            gradability_target: s.gradability_target.unwrap_or(1000),
            dr_agreement_fraction: s.dr_agreement_fraction.unwrap_or(0.05),
            dr_agreed_referable: s.dr_agreed_referable,
            dr_agreed_nonreferable: s.dr_agreed_nonreferable,
            dme_agreement_fraction: s.dme_agreement_fraction.unwrap_or(0.05),
            benchmark: SampleSize {
                n_core: s.benchmark_n_core.unwrap_or(BENCHMARK_SAMPLE_SIZE.n_core),
                n_inflated: s.benchmark_n_inflated.unwrap_or(BENCHMARK_SAMPLE_SIZE.n_inflated),
            },
        };
        for (name, f) in [
            ("dr_agreement_fraction", sampling.dr_agreement_fraction),
            ("dme_agreement_fraction", sampling.dme_agreement_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(EvalError::Config(format!("{name} {f} is outside [0, 1]")));
            }
        }

        let targets = raw
            .targets
            .iter()
            .map(|t| t.parse::<BinaryTarget>())
            .collect::<drscreen_core::Result<Vec<_>>>()?;
        if raw.bootstrap_resamples != 0 && raw.bootstrap_resamples < 100 {
            return Err(EvalError::Config("bootstrap_resamples must be 0 (off) or at least 100".into()));
        }
        if raw.permutation_draws != 0 && raw.permutation_draws < 1000 {
            return Err(EvalError::Config("permutation_draws must be 0 (off) or at least 1000".into()));
        }

        Ok(EvalConfig {
            inputs,
            reference,
            thresholds,
            sampling,
            bootstrap_resamples: raw.bootstrap_resamples,
            permutation_draws: raw.permutation_draws,
            bin_edges: raw.bin_edges,
            targets,
            seed: raw.seed,
            config_hash: hex::encode(Sha256::digest(text.as_bytes())),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
dme = 0.45
dr_tail.pdr = 0.35
dr_tail.severe = 0.4
dr_tail.moderate = 0.45
dr_tail.mild = 0.5
gradability.dr = 0.5
gradability.dme = 0.5

[inputs]
grades = "g.csv"
confidences = "c.csv"
images = "i.csv"
patients = "/abs/p.csv"

[reference]
mode = "supplied"
path = "ref.csv"
"#;

    #[test]
    fn parses_with_defaults_and_resolves_paths() {
        let c = EvalConfig::from_str_in(BASE, Path::new("/data")).unwrap();
        assert_eq!(c.inputs.grades, PathBuf::from("/data/g.csv"));
        assert_eq!(c.inputs.patients, PathBuf::from("/abs/p.csv"));
        assert_eq!(c.sampling.plan.seed, 3);
        assert_eq!(c.targets.len(), 5);
        assert_eq!(c.thresholds, CascadeThresholds::default());
        assert_eq!(c.config_hash.len(), 64);
    }

    #[test]
    fn rejects_bad_settings() {
        let bad_mode = BASE.replace("mode = \"supplied\"", "mode = \"guess\"");
        assert!(matches!(EvalConfig::from_str_in(&bad_mode, Path::new(".")), Err(EvalError::Config(_))));
        let no_threshold = BASE.replace("dme = 0.45\n", "");
        assert!(EvalConfig::from_str_in(&no_threshold, Path::new(".")).is_err());
        let few_draws = BASE.replace("seed = 3", "seed = 3\npermutation_draws = 10");
        assert!(EvalConfig::from_str_in(&few_draws, Path::new(".")).is_err());
    }
}
