//! Stage rules: index range bounds, ratio criteria and the LSWI-EVI flooding test.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indices::{IndexKind, DENOMINATOR_EPS};
use crate::phenology::{Stage, StageComposite};
use crate::raster::{BinaryMask, MASK_NODATA};

/// Allowed shortfall of LSWI below EVI for a flooded pixel.
pub const LSWI_EVI_MARGIN: f64 = 0.05;
pub const MAX_RATIO_CRITERIA: usize = 3;

/// Index values of one pixel, `NaN` where unavailable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelValues([f64; 5]);

impl Default for PixelValues {
    fn default() -> Self {
        PixelValues([f64::NAN; 5])
    }
}

impl PixelValues {
    pub fn get(&self, k: IndexKind) -> f64 {
        self.0[k.position()]
    }

    pub fn set(&mut self, k: IndexKind, v: f64) {
        self.0[k.position()] = v;
    }

    pub fn with(mut self, k: IndexKind, v: f64) -> Self {
        self.set(k, v);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeBound {
    pub index: IndexKind,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

impl RangeBound {
    pub fn new(index: IndexKind, min: Option<f64>, max: Option<f64>) -> Result<Self> {
        let b = RangeBound { index, min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.min, self.max].into_iter().flatten() {
            if !v.is_finite() {
                return Err(Error::InvalidCalibration(format!("{} bound is not finite", self.index)));
            }
        }
        if let (Some(lo), Some(hi)) = (self.min, self.max) {
            if lo > hi {
                return Err(Error::InvalidCalibration(format!(
                    "{} bound min {lo} exceeds max {hi}",
                    self.index
                )));
            }
        }
        Ok(())
    }

    /// Inclusive on both ends.
    pub fn holds(&self, v: f64) -> bool {
        self.min.is_none_or(|lo| v >= lo) && self.max.is_none_or(|hi| v <= hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    Ratio,
    Difference,
}

/// `lt` and `gt` are strict; `within` is inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    Lt(f64),
    Gt(f64),
    Within([f64; 2]),
}

impl Comparator {
    pub fn holds(&self, v: f64) -> bool {
        match *self {
            Comparator::Lt(x) => v < x,
            Comparator::Gt(x) => v > x,
            Comparator::Within([lo, hi]) => lo <= v && v <= hi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatioCriterion {
    pub kind: CriterionKind,
    pub left: IndexKind,
    pub right: IndexKind,
    pub comparator: Comparator,
}

impl RatioCriterion {
    pub fn validate(&self) -> Result<()> {
        let finite = match self.comparator {
            Comparator::Lt(x) | Comparator::Gt(x) => x.is_finite(),
            Comparator::Within([lo, hi]) => lo.is_finite() && hi.is_finite() && lo <= hi,
        };
        if !finite {
            return Err(Error::InvalidCalibration(format!(
                "criterion {}/{} has an invalid comparator",
                self.left, self.right
            )));
        }
        if self.left == self.right {
            return Err(Error::InvalidCalibration(format!(
                "criterion compares {} with itself",
                self.left
            )));
        }
        Ok(())
    }

    /// `None` for a ratio whose denominator is near zero.
    pub fn value(&self, left: f64, right: f64) -> Option<f64> {
        match self.kind {
            CriterionKind::Ratio if right.abs() < DENOMINATOR_EPS => None,
            CriterionKind::Ratio => Some(left / right),
            CriterionKind::Difference => Some(left - right),
        }
    }

    pub fn holds(&self, left: f64, right: f64) -> bool {
        self.value(left, right).is_some_and(|v| self.comparator.holds(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Basic,
    RatioBased,
    LswiEvi,
}

impl Method {
    /// Preference order for tie-breaking, simplest first.
    pub const ALL: [Method; 3] = [Method::Basic, Method::RatioBased, Method::LswiEvi];

    pub fn name(self) -> &'static str {
        match self {
            Method::Basic => "basic",
            Method::RatioBased => "ratio_based",
            Method::LswiEvi => "lswi_evi",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRule {
    pub stage: Stage,
    pub method: Method,
    pub bounds: Vec<RangeBound>,
    #[serde(default)]
    pub ratios: Vec<RatioCriterion>,
}

impl StageRule {
    pub fn validate(&self) -> Result<()> {
        for b in &self.bounds {
            b.validate()?;
        }
        for r in &self.ratios {
            r.validate()?;
        }
        if self.ratios.len() > MAX_RATIO_CRITERIA {
            return Err(Error::InvalidCalibration(format!(
                "{} rule has {} ratio criteria (max {MAX_RATIO_CRITERIA})",
                self.stage,
                self.ratios.len()
            )));
        }
        match self.method {
            Method::Basic if !self.ratios.is_empty() => Err(Error::InvalidCalibration(format!(
                "{} rule uses method basic but lists ratio criteria",
                self.stage
            ))),
            Method::RatioBased if self.ratios.is_empty() => Err(Error::InvalidCalibration(format!(
                "{} rule uses method ratio_based without ratio criteria",
                self.stage
            ))),
            Method::LswiEvi if !self.ratios.is_empty() => Err(Error::InvalidCalibration(format!(
                "{} rule uses method lswi_evi but lists ratio criteria",
                self.stage
            ))),
            _ if self.bounds.is_empty() && self.ratios.is_empty() && self.method == Method::Basic => Err(
                Error::InvalidCalibration(format!("{} rule has no conditions", self.stage)),
            ),
            _ => Ok(()),
        }
    }

    pub fn referenced_indices(&self) -> BTreeSet<IndexKind> {
        let mut set: BTreeSet<IndexKind> = self.bounds.iter().map(|b| b.index).collect();
        for r in &self.ratios {
            set.insert(r.left);
            set.insert(r.right);
        }
        if self.method == Method::LswiEvi {
            set.insert(IndexKind::Lswi);
            set.insert(IndexKind::Evi);
        }
        set
    }

    /// `None` when any referenced value is nodata.
    pub fn evaluate(&self, px: &PixelValues) -> Option<bool> {
        if self.referenced_indices().iter().any(|k| !px.get(*k).is_finite()) {
            return None;
        }
        let bounds = self.bounds.iter().all(|b| b.holds(px.get(b.index)));
        let extra = match self.method {
            Method::Basic => true,
            Method::RatioBased => self.ratios.iter().all(|r| r.holds(px.get(r.left), px.get(r.right))),
            Method::LswiEvi => px.get(IndexKind::Lswi) >= px.get(IndexKind::Evi) - LSWI_EVI_MARGIN,
        };
        Some(bounds && extra)
    }
}

/// Evaluates `rule` on every pixel of the stage composites.
pub fn apply_stage_rule(composites: &BTreeMap<IndexKind, StageComposite>, rule: &StageRule) -> Result<BinaryMask> {
    let needed = rule.referenced_indices();
    let mut planes = Vec::with_capacity(needed.len());
    for k in &needed {
        let c = composites.get(k).ok_or_else(|| Error::MissingComposite {
            index: k.to_string(),
            stage: rule.stage.to_string(),
        })?;
        if c.stage != rule.stage {
            return Err(Error::Invariant(format!(
                "{} composite passed for {} rule",
                c.stage, rule.stage
            )));
        }
        planes.push((*k, c));
    }
    let grid = planes
        .first()
        .map(|(_, c)| c.grid.clone())
        .ok_or_else(|| Error::InvalidCalibration(format!("{} rule references no index", rule.stage)))?;
    for (_, c) in &planes {
        c.grid.ensure_aligned(&grid, "stage composite")?;
    }
    let values = (0..grid.len())
        .into_par_iter()
        .map(|p| {
            let mut px = PixelValues::default();
            for (k, c) in &planes {
                px.set(*k, c.mean[p]);
            }
            match rule.evaluate(&px) {
                Some(true) => 1,
                Some(false) => 0,
                None => MASK_NODATA,
            }
        })
        .collect();
    BinaryMask::new(grid, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use IndexKind::*;

    fn bound(k: IndexKind, lo: Option<f64>, hi: Option<f64>) -> RangeBound {
        RangeBound::new(k, lo, hi).unwrap()
    }

    #[test]
    fn land_preparation_example() {
        let rule = StageRule {
            stage: Stage::LandPreparation,
            method: Method::Basic,
            bounds: vec![
                bound(Ndvi, Some(0.15), Some(0.30)),
                bound(Lswi, Some(0.10), Some(0.45)),
                // MNDWI > 0 written as a lower bound just above zero
                bound(Mndwi, Some(1e-12), None),
            ],
            ratios: vec![],
        };
        rule.validate().unwrap();
        let px = PixelValues::default()
            .with(Ndvi, 0.20)
            .with(Lswi, 0.30)
            .with(Mndwi, 0.05);
        assert_eq!(rule.evaluate(&px), Some(true));
        assert_eq!(rule.evaluate(&px.with(Mndwi, f64::NAN)), None);
    }

    #[test]
    fn lswi_evi_example() {
        let rule = StageRule {
            stage: Stage::LandPreparation,
            method: Method::LswiEvi,
            bounds: vec![],
            ratios: vec![],
        };
        let px = PixelValues::default().with(Lswi, 0.40).with(Evi, 0.44);
        assert_eq!(rule.evaluate(&px), Some(true));
        assert_eq!(rule.evaluate(&px.with(Lswi, 0.38)), Some(false));
    }

    #[test]
    fn reproductive_low_ndvi_rejected() {
        let rule = StageRule {
            stage: Stage::Reproductive,
            method: Method::Basic,
            bounds: vec![bound(Ndvi, Some(0.45), Some(0.95))],
            ratios: vec![],
        };
        assert_eq!(rule.evaluate(&PixelValues::default().with(Ndvi, 0.30)), Some(false));
    }

    #[test]
    fn ratio_with_zero_denominator_fails() {
        let c = RatioCriterion {
            kind: CriterionKind::Ratio,
            left: Ndvi,
            right: Lswi,
            comparator: Comparator::Gt(0.0),
        };
        assert!(!c.holds(0.5, 0.0));
        let rule = StageRule {
            stage: Stage::Vegetative,
            method: Method::RatioBased,
            bounds: vec![],
            ratios: vec![c],
        };
        let px = PixelValues::default().with(Ndvi, 0.5).with(Lswi, 0.0);
        assert_eq!(rule.evaluate(&px), Some(false));
        assert_eq!(rule.evaluate(&px.with(Lswi, 0.25)), Some(true));
    }

    #[test]
    fn comparators() {
        assert!(!Comparator::Lt(1.0).holds(1.0));
        assert!(!Comparator::Gt(1.0).holds(1.0));
        assert!(Comparator::Within([1.0, 2.0]).holds(1.0));
        assert!(Comparator::Within([1.0, 2.0]).holds(2.0));
        let d = RatioCriterion {
            kind: CriterionKind::Difference,
            left: Mndwi,
            right: Ndvi,
            comparator: Comparator::Lt(0.0),
        };
        assert!(d.holds(-0.2, 0.3));
    }

    #[test]
    fn invalid_rules_rejected() {
        assert!(RangeBound::new(Ndvi, Some(0.5), Some(0.4)).is_err());
        let c = RatioCriterion {
            kind: CriterionKind::Ratio,
            left: Ndvi,
            right: Evi,
            comparator: Comparator::Gt(1.0),
        };
        let mut rule = StageRule {
            stage: Stage::Vegetative,
            method: Method::Basic,
            bounds: vec![bound(Ndvi, Some(0.3), None)],
            ratios: vec![c],
        };
        assert!(rule.validate().is_err());
        rule.method = Method::RatioBased;
        rule.validate().unwrap();
        rule.ratios = vec![c; 4];
        assert!(rule.validate().is_err());
    }

    #[test]
    fn serde_shape() {
        let c = RatioCriterion {
            kind: CriterionKind::Ratio,
            left: Ndvi,
            right: Lswi,
            comparator: Comparator::Within([1.0, 2.5]),
        };
        let v = serde_json::to_value(c).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"kind": "ratio", "left": "NDVI", "right": "LSWI", "comparator": {"within": [1.0, 2.5]}})
        );
        let bad = r#"{"index": "NDVI", "min": 0.1, "maximum": 0.2}"#;
        assert!(serde_json::from_str::<RangeBound>(bad).is_err());
    }
}
