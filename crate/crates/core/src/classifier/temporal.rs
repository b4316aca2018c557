//! Temporal stability (TSP) and temporal pattern (TPA) filters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phenology::Stage;
use crate::stats::population_std;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TspOutcome {
    pub pass: bool,
    /// Fewer than two valid observations; passed without evidence.
    pub insufficient: bool,
}

/// Passes when the population standard deviation of the valid values is at most `sigma_max`.
pub fn tsp_filter(series: &[f64], sigma_max: f64) -> TspOutcome {
    let valid: Vec<f64> = series.iter().copied().filter(|v| v.is_finite()).collect();
    if valid.len() < 2 {
        return TspOutcome {
            pass: true,
            insufficient: true,
        };
    }
    let sigma = population_std(&valid).expect("non-empty");
    TspOutcome {
        pass: sigma <= sigma_max,
        insufficient: false,
    }
}

/// Per-stage NDVI standard-deviation ceilings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TspParams(pub BTreeMap<Stage, f64>);

impl TspParams {
    pub fn uniform(sigma_max: f64) -> Self {
        TspParams(Stage::AREA_STAGES.into_iter().map(|s| (s, sigma_max)).collect())
    }

    pub fn sigma_max(&self, stage: Stage) -> Option<f64> {
        self.0.get(&stage).copied()
    }

    pub fn validate(&self) -> Result<()> {
        for (stage, s) in &self.0 {
            if !(*s > 0.0 && *s < 1.0) {
                return Err(Error::InvalidCalibration(format!(
                    "TSP sigma for {stage} must be in (0, 1), got {s}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TpaParams {
    pub peak_min: f64,
    pub peak_max: f64,
    pub min_increase: f64,
    pub min_decrease: f64,
}

impl TpaParams {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.peak_min
            && self.peak_min < self.peak_max
            && self.peak_max <= 1.0
            && self.min_increase > 0.0
            && self.min_decrease > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidCalibration(format!("invalid TPA parameters {self:?}")))
        }
    }
}

/// Small allowance for rounding in the delta tests.
const TPA_TOLERANCE: f64 = 1e-12;

/// Peak within bounds, rising enough from the early stage and falling enough by the late one.
pub fn tpa_filter(early: f64, peak: f64, late: f64, p: &TpaParams) -> bool {
    if !(early.is_finite() && peak.is_finite() && late.is_finite()) {
        return false;
    }
    p.peak_min <= peak
        && peak <= p.peak_max
        && peak - early >= p.min_increase - TPA_TOLERANCE
        && peak - late >= p.min_decrease - TPA_TOLERANCE
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nalgonda() -> TpaParams {
        TpaParams {
            peak_min: 0.60,
            peak_max: 0.90,
            min_increase: 0.15,
            min_decrease: 0.15,
        }
    }

    #[test]
    fn tsp_examples() {
        assert!(tsp_filter(&[0.4; 6], 0.01).pass);
        assert!(!tsp_filter(&[0.2, 0.8], 0.15).pass);
        assert!(tsp_filter(&[0.2, 0.8], 0.31).pass);
        let one = tsp_filter(&[0.9, f64::NAN], 0.01);
        assert!(one.pass && one.insufficient);
    }

    #[test]
    fn tpa_examples() {
        let p = nalgonda();
        p.validate().unwrap();
        assert!(tpa_filter(0.18, 0.83, 0.19, &p));
        assert!(!tpa_filter(0.18, 0.95, 0.19, &p));
        assert!(!tpa_filter(0.70, 0.70, 0.70, &p));
        assert!(!tpa_filter(0.18, f64::NAN, 0.19, &p));
        // exactly at the delta boundary
        assert!(tpa_filter(0.45, 0.60, 0.45, &p));
    }

    #[test]
    fn invalid_params() {
        let mut p = nalgonda();
        p.peak_max = 1.2;
        assert!(p.validate().is_err());
        assert!(TspParams::uniform(0.0).validate().is_err());
        TspParams::uniform(0.15).validate().unwrap();
    }
}
