//! District calibration document.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::combine::CombinationPolicy;
use super::refine::DEFAULT_EXCLUDED_LANDCOVER;
use super::rules::StageRule;
use super::temporal::{TpaParams, TspParams};
use crate::district::normalize_district_name;
use crate::error::{Error, Result};
use crate::indices::IndexKind;
use crate::phenology::{DateRange, Stage, StageWindows};
use crate::preprocess::OutlierPolicy;

pub const CALIBRATION_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_FOCAL_RADIUS_M: f64 = 20.0;
pub const DEFAULT_TEMPORAL_K: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExclusionConfig {
    pub water_seasonal: bool,
    pub landcover_classes: BTreeSet<u16>,
}

impl Default for ExclusionConfig {
    fn default() -> Self {
        ExclusionConfig {
            water_seasonal: true,
            landcover_classes: DEFAULT_EXCLUDED_LANDCOVER.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierConfig {
    /// Spatial IQR multipliers applied to each stage composite.
    pub composite_k: BTreeMap<IndexKind, f64>,
    /// Per-pixel IQR multiplier on the index time series; `null` disables it.
    pub temporal_k: Option<f64>,
}

impl Default for OutlierConfig {
    fn default() -> Self {
        OutlierConfig {
            composite_k: OutlierPolicy::composite_default().k_per_index,
            temporal_k: Some(DEFAULT_TEMPORAL_K),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistrictCalibration {
    pub schema_version: u32,
    pub district: String,
    pub season: DateRange,
    pub stage_windows: StageWindows,
    #[serde(default)]
    pub allow_atypical_durations: bool,
    pub rules: Vec<StageRule>,
    pub tsp: TspParams,
    pub tpa: Option<TpaParams>,
    pub combination: CombinationPolicy,
    pub exclusions: ExclusionConfig,
    pub outlier: OutlierConfig,
    pub focal_radius_m: f64,
    #[serde(default)]
    pub needs_manual_review: bool,
}

impl DistrictCalibration {
    pub fn rule(&self, stage: Stage) -> Option<&StageRule> {
        self.rules.iter().find(|r| r.stage == stage)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CALIBRATION_SCHEMA_VERSION {
            return Err(Error::InvalidCalibration(format!(
                "unsupported schema_version {} (expected {CALIBRATION_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let canonical = normalize_district_name(&self.district)?;
        if canonical != self.district {
            return Err(Error::InvalidCalibration(format!(
                "district '{}' is not canonical (use '{canonical}')",
                self.district
            )));
        }
        self.stage_windows.validate(self.allow_atypical_durations)?;
        let w = &self.stage_windows;
        if w.land_preparation.start < self.season.start || w.ripening.end > self.season.end {
            return Err(Error::InvalidCalibration(
                "stage windows extend beyond the season".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for r in &self.rules {
            if !seen.insert(r.stage) {
                return Err(Error::InvalidCalibration(format!("duplicate rule for {}", r.stage)));
            }
            r.validate()?;
        }
        for s in Stage::AREA_STAGES {
            if !seen.contains(&s) {
                return Err(Error::InvalidCalibration(format!("missing rule for {s}")));
            }
        }
        self.tsp.validate()?;
        if let Some(tpa) = &self.tpa {
            tpa.validate()?;
        }
        OutlierPolicy::new(self.outlier.composite_k.clone())?;
        if let Some(k) = self.outlier.temporal_k {
            if !(k > 0.0) {
                return Err(Error::InvalidCalibration(format!("temporal_k must be > 0, got {k}")));
            }
        }
        if !self.focal_radius_m.is_finite() || self.focal_radius_m < 0.0 {
            return Err(Error::InvalidCalibration(format!(
                "focal_radius_m must be >= 0, got {}",
                self.focal_radius_m
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let c: DistrictCalibration = serde_json::from_str(text).map_err(|e| Error::json(context, e))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("calibration serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = include_str!("../../data/calibration_example.json");

    #[test]
    fn shipped_example_is_valid_and_round_trips() {
        let c = DistrictCalibration::from_json(EXAMPLE, "example").unwrap();
        assert_eq!(c.district, "Nalgonda");
        let again = DistrictCalibration::from_json(&c.to_json(), "again").unwrap();
        assert_eq!(again, c);
        assert_eq!(again.stage_windows, c.stage_windows);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(EXAMPLE).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(DistrictCalibration::from_json(&v.to_string(), "x").is_err());
        let mut v: serde_json::Value = serde_json::from_str(EXAMPLE).unwrap();
        v["exclusions"]["water_permanent"] = serde_json::json!(false);
        assert!(DistrictCalibration::from_json(&v.to_string(), "x").is_err());
    }

    #[test]
    fn semantic_errors() {
        let base: serde_json::Value = serde_json::from_str(EXAMPLE).unwrap();
        let mut v = base.clone();
        v["district"] = serde_json::json!("Jagitial");
        assert!(DistrictCalibration::from_json(&v.to_string(), "x").is_err());
        let mut v = base.clone();
        v["rules"].as_array_mut().unwrap().remove(0);
        assert!(DistrictCalibration::from_json(&v.to_string(), "x").is_err());
        let mut v = base.clone();
        v["tsp"]["vegetative"] = serde_json::json!(1.5);
        assert!(DistrictCalibration::from_json(&v.to_string(), "x").is_err());
        let mut v = base;
        v["schema_version"] = serde_json::json!(9);
        assert!(DistrictCalibration::from_json(&v.to_string(), "x").is_err());
    }
}
