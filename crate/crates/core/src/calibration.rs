//! Threshold derivation from reference samples, candidate scoring, per-district
//! optimization and the district-versus-cluster comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::pipeline::spatial_iqr;
use crate::classifier::{tpa_filter, tsp_filter};
use crate::classifier::{
    CombinationPolicy, Comparator, CriterionKind, DistrictCalibration, ExclusionConfig, Method, OutlierConfig,
    PixelValues, RangeBound, RatioCriterion, StageRule, TpaParams, TspParams, CALIBRATION_SCHEMA_VERSION,
};
use crate::district::normalize_district_name;
use crate::error::{Error, Result};
use crate::indices::{compute_index, IndexKind};
use crate::phenology::{
    build_stage_composite, dates_in_range, detect_stage_transitions, smooth_savgol, DateRange, ReferenceTrajectory,
    Stage, StageWindows, TransitionDiagnostics, TransitionThresholds, SAVGOL_ORDER, SAVGOL_WINDOW,
};
use crate::preprocess::filter_index_cube_temporal;
use crate::raster::{IndexCube, ReflectanceCube};
use crate::reference::{PaddyClass, RasterizedPolygon};
use crate::stats::{population_std, sorted_finite};

pub const MIN_PADDY_SAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeLabel {
    Broad,
    Interquartile,
    Custom,
}

impl fmt::Display for RangeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RangeLabel::Broad => "broad",
            RangeLabel::Interquartile => "interquartile",
            RangeLabel::Custom => "custom",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentileRange {
    pub label: RangeLabel,
    pub low: f64,
    pub high: f64,
}

impl PercentileRange {
    pub fn broad() -> Self {
        PercentileRange {
            label: RangeLabel::Broad,
            low: 10.0,
            high: 90.0,
        }
    }

    pub fn interquartile() -> Self {
        PercentileRange {
            label: RangeLabel::Interquartile,
            low: 25.0,
            high: 75.0,
        }
    }

    pub fn custom(low: f64, high: f64) -> Result<Self> {
        let r = PercentileRange {
            label: RangeLabel::Custom,
            low,
            high,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.low) || !(0.0..=100.0).contains(&self.high) || self.low >= self.high {
            return Err(Error::InvalidParameter(format!(
                "percentile range {}-{} is invalid",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

/// Smallest sample whose empirical CDF reaches `percent`. Unlike interpolated
/// quantiles this is unchanged when every sample is replicated.
pub fn ecdf_quantile(sorted: &[f64], percent: f64) -> f64 {
    let x = percent * sorted.len() as f64 / 100.0;
    let rank = if (x - x.round()).abs() < 1e-9 {
        x.round()
    } else {
        x.ceil()
    };
    sorted[(rank as usize).clamp(1, sorted.len()) - 1]
}

/// Bound spanning the `range` percentiles of the paddy samples.
pub fn derive_bounds(paddy: &[f64], range: &PercentileRange, index: IndexKind) -> Result<RangeBound> {
    range.validate()?;
    let sorted = sorted_finite(paddy.iter().copied());
    if sorted.len() < MIN_PADDY_SAMPLES {
        return Err(Error::InsufficientSamples {
            needed: MIN_PADDY_SAMPLES,
            have: sorted.len(),
            context: format!("paddy {index} samples"),
        });
    }
    let lo = ecdf_quantile(&sorted, range.low);
    let hi = ecdf_quantile(&sorted, range.high);
    RangeBound::new(index, Some(lo), Some(hi))
}

/// Literature thresholds used as the custom candidate range.
pub fn literature_bound(stage: Stage, index: IndexKind) -> Option<RangeBound> {
    use IndexKind::*;
    let (min, max) = match (stage, index) {
        (Stage::LandPreparation, Ndvi) => (Some(0.15), Some(0.30)),
        (Stage::LandPreparation, Lswi) => (Some(0.10), Some(0.45)),
        (Stage::LandPreparation, Mndwi) => (Some(0.0), None),
        (Stage::Vegetative, Ndvi) => (Some(0.25), Some(0.70)),
        (Stage::Vegetative, Evi) => (Some(0.15), None),
        (Stage::Vegetative, Lswi) => (Some(0.20), Some(0.50)),
        (Stage::Reproductive, Ndvi) => (Some(0.45), Some(0.95)),
        (Stage::Reproductive, Evi) => (Some(0.25), Some(0.70)),
        (Stage::Ripening, Ndvi) => (Some(0.15), Some(0.70)),
        (Stage::Ripening, Mndwi) => (None, Some(-0.35)),
        _ => return None,
    };
    Some(RangeBound { index, min, max })
}

/// Indices thresholded in each stage.
pub fn stage_indices(stage: Stage) -> &'static [IndexKind] {
    use IndexKind::*;
    match stage {
        Stage::LandPreparation => &[Ndvi, Lswi, Mndwi],
        Stage::Vegetative => &[Ndvi, Evi, Lswi],
        Stage::Reproductive => &[Ndvi, Evi],
        Stage::Ripening => &[Ndvi, Mndwi],
    }
}

/// Ratio and difference pairs offered to the `ratio_based` method, each as a
/// p10-p90 band and as its two one-sided halves.
pub const RATIO_PAIRS: [(CriterionKind, IndexKind, IndexKind); 6] = [
    (CriterionKind::Ratio, IndexKind::Ndvi, IndexKind::Lswi),
    (CriterionKind::Ratio, IndexKind::Evi, IndexKind::Lswi),
    (CriterionKind::Ratio, IndexKind::Ndvi, IndexKind::Evi),
    (CriterionKind::Ratio, IndexKind::Ndvi, IndexKind::Savi),
    (CriterionKind::Ratio, IndexKind::Savi, IndexKind::Ndvi),
    (CriterionKind::Difference, IndexKind::Mndwi, IndexKind::Ndvi),
];

// ------------------------------------------------------------------ samples

#[derive(Debug, Clone, PartialEq)]
pub struct StageSample {
    /// Stage composite values at the pixel after the spatial outlier filter.
    pub values: PixelValues,
    /// Unfiltered NDVI composite, as used by the pattern test.
    pub raw_ndvi: f64,
    /// NDVI observations of the pixel within the stage window.
    pub ndvi_series: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub class: PaddyClass,
    pub polygon_id: String,
    pub stages: BTreeMap<Stage, StageSample>,
}

/// Computes every index and applies the per-pixel temporal IQR filter.
pub fn prepare_index_cubes(cube: &ReflectanceCube, temporal_k: Option<f64>) -> Result<BTreeMap<IndexKind, IndexCube>> {
    IndexKind::ALL
        .into_iter()
        .map(|k| {
            let raw = compute_index(cube, k)?;
            let cube = match temporal_k {
                Some(tk) => filter_index_cube_temporal(&raw, tk)?.0,
                None => raw,
            };
            Ok((k, cube))
        })
        .collect()
}

/// Stage composites and NDVI window series for every reference pixel. Composites
/// pass through the same spatial IQR filter as in classification.
pub fn collect_samples(
    cubes: &BTreeMap<IndexKind, IndexCube>,
    windows: &StageWindows,
    refs: &[RasterizedPolygon],
    composite_k: &BTreeMap<IndexKind, f64>,
) -> Result<Vec<Sample>> {
    let ndvi = cubes.get(&IndexKind::Ndvi).ok_or_else(|| Error::MissingComposite {
        index: "NDVI".into(),
        stage: "any".into(),
    })?;
    let n = ndvi.grid.len();
    let mut composites = BTreeMap::new();
    let mut raw_ndvi = BTreeMap::new();
    for stage in Stage::ALL {
        for (k, c) in cubes {
            let raw = build_stage_composite(c, windows, stage)?;
            if *k == IndexKind::Ndvi {
                raw_ndvi.insert(stage, raw.mean.clone());
            }
            let filtered = match composite_k.get(k) {
                Some(ck) => spatial_iqr(&raw, *ck)?.0,
                None => raw,
            };
            composites.insert((stage, *k), filtered);
        }
    }
    let mut out = Vec::new();
    for r in refs {
        for p in &r.pixels {
            let stages = Stage::ALL
                .into_iter()
                .map(|stage| {
                    let mut values = PixelValues::default();
                    for k in cubes.keys() {
                        values.set(*k, composites[&(stage, *k)].mean[*p]);
                    }
                    let idx = dates_in_range(&ndvi.dates, windows.get(stage));
                    let ndvi_series = idx.iter().map(|d| ndvi.values[d * n + p]).collect();
                    let sample = StageSample {
                        values,
                        raw_ndvi: raw_ndvi[&stage][*p],
                        ndvi_series,
                    };
                    (stage, sample)
                })
                .collect();
            out.push(Sample {
                class: r.polygon.class,
                polygon_id: r.polygon.id.clone(),
                stages,
            });
        }
    }
    Ok(out)
}

/// Mean smoothed NDVI trajectory of each paddy reference polygon.
pub fn reference_trajectories(ndvi: &IndexCube, refs: &[RasterizedPolygon]) -> Result<Vec<ReferenceTrajectory>> {
    let n = ndvi.grid.len();
    refs.iter()
        .filter(|r| r.polygon.class == PaddyClass::Paddy)
        .map(|r| {
            let raw: Vec<f64> = (0..ndvi.dates.len())
                .map(|d| {
                    let vals: Vec<f64> = r
                        .pixels
                        .iter()
                        .map(|p| ndvi.values[d * n + p])
                        .filter(|v| v.is_finite())
                        .collect();
                    if vals.is_empty() {
                        f64::NAN
                    } else {
                        vals.iter().sum::<f64>() / vals.len() as f64
                    }
                })
                .collect();
            Ok(ReferenceTrajectory {
                field_id: r.polygon.id.clone(),
                dates: ndvi.dates.clone(),
                ndvi: smooth_savgol(&raw, SAVGOL_WINDOW, SAVGOL_ORDER)?.values,
            })
        })
        .collect()
}

/// Stage windows from the majority transitions of the paddy references, spanning
/// the cube's dates with the outer windows trimmed to a typical duration.
pub fn detect_windows(
    ndvi: &IndexCube,
    refs: &[RasterizedPolygon],
    thresholds: &TransitionThresholds,
) -> Result<(StageWindows, Vec<TransitionDiagnostics>)> {
    let (Some(first), Some(last)) = (ndvi.dates.first(), ndvi.dates.last()) else {
        return Err(Error::InvalidParameter("NDVI cube has no dates".into()));
    };
    let trajectories = reference_trajectories(ndvi, refs)?;
    let (windows, diags) = detect_stage_transitions(&trajectories, thresholds, DateRange::new(*first, *last)?)?;
    Ok((windows.trim_outer(), diags))
}

// ------------------------------------------------------------------ scoring

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub sensitivity: f64,
    pub specificity: f64,
    pub balance: f64,
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl CandidateScore {
    pub fn from_predictions(pairs: impl IntoIterator<Item = (PaddyClass, bool)>) -> Result<Self> {
        let (mut tp, mut fn_, mut tn, mut fp) = (0, 0, 0, 0);
        for (class, predicted) in pairs {
            match (class, predicted) {
                (PaddyClass::Paddy, true) => tp += 1,
                (PaddyClass::Paddy, false) => fn_ += 1,
                (PaddyClass::NonPaddy, false) => tn += 1,
                (PaddyClass::NonPaddy, true) => fp += 1,
            }
        }
        if tp + fn_ == 0 || tn + fp == 0 {
            return Err(Error::SingleClass(format!(
                "{} paddy and {} non-paddy samples",
                tp + fn_,
                tn + fp
            )));
        }
        let sensitivity = tp as f64 / (tp + fn_) as f64;
        let specificity = tn as f64 / (tn + fp) as f64;
        Ok(CandidateScore {
            sensitivity,
            specificity,
            balance: (sensitivity + specificity) / 2.0,
            tp,
            fn_,
            tn,
            fp,
        })
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / (self.tp + self.tn + self.fp + self.fn_) as f64
    }
}

/// Scores a stage rule on labeled samples. Nodata counts as a non-paddy decision.
pub fn score_candidate(rule: &StageRule, samples: &[Sample]) -> Result<CandidateScore> {
    CandidateScore::from_predictions(samples.iter().map(|s| {
        let hit = s
            .stages
            .get(&rule.stage)
            .is_some_and(|st| rule.evaluate(&st.values) == Some(true));
        (s.class, hit)
    }))
}

fn stage_values(
    samples: &[Sample],
    stage: Stage,
    class: PaddyClass,
    f: impl Fn(&PixelValues) -> Option<f64>,
) -> Vec<f64> {
    samples
        .iter()
        .filter(|s| s.class == class)
        .filter_map(|s| s.stages.get(&stage).and_then(|st| f(&st.values)))
        .filter(|v| v.is_finite())
        .collect()
}

// ------------------------------------------------------------ optimization

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub district: String,
    pub stage: Stage,
    pub index: String,
    pub range: String,
    pub method: Method,
    pub sensitivity: f64,
    pub specificity: f64,
    pub balance: f64,
    pub selected: bool,
}

pub fn ledger_csv(rows: &[LedgerRow]) -> String {
    let mut out = String::from("district,stage,index,range,method,sensitivity,specificity,balance,selected\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{}\n",
            r.district,
            r.stage,
            r.index,
            r.range,
            r.method.name(),
            r.sensitivity,
            r.specificity,
            r.balance,
            r.selected
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    pub season: Option<DateRange>,
    pub allow_atypical_durations: bool,
    /// Quantile of paddy NDVI standard deviations used as the TSP ceiling.
    pub tsp_quantile: f64,
    pub tsp_default: f64,
    pub tpa: Option<TpaParams>,
    pub combination: CombinationPolicy,
    pub exclusions: ExclusionConfig,
    pub outlier: OutlierConfig,
    pub focal_radius_m: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            season: None,
            allow_atypical_durations: false,
            tsp_quantile: 0.95,
            tsp_default: 0.15,
            tpa: None,
            combination: CombinationPolicy::Majority,
            exclusions: ExclusionConfig::default(),
            outlier: OutlierConfig::default(),
            focal_radius_m: 20.0,
        }
    }
}

pub const TSP_SIGMA_RANGE: (f64, f64) = (0.05, 0.25);

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOutcome {
    pub calibration: DistrictCalibration,
    pub ledger: Vec<LedgerRow>,
    pub stage_scores: BTreeMap<Stage, CandidateScore>,
    /// Stages whose best candidate does not exceed a balance of 0.5.
    pub unresolved: Vec<Stage>,
}

/// Index of the first maximum, so earlier candidates win ties.
fn first_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|b| *s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

fn ratio_pool(samples: &[Sample], stage: Stage) -> Vec<RatioCriterion> {
    RATIO_PAIRS
        .iter()
        .filter_map(|(kind, left, right)| {
            let probe = RatioCriterion {
                kind: *kind,
                left: *left,
                right: *right,
                comparator: Comparator::Gt(0.0),
            };
            let vals = stage_values(samples, stage, PaddyClass::Paddy, |v| {
                probe.value(v.get(*left), v.get(*right))
            });
            let range = derive_bounds(&vals, &PercentileRange::broad(), *left).ok()?;
            let (lo, hi) = (range.min?, range.max?);
            Some(
                [Comparator::Within([lo, hi]), Comparator::Gt(lo), Comparator::Lt(hi)]
                    .map(|comparator| RatioCriterion { comparator, ..probe }),
            )
        })
        .flatten()
        .collect()
}

fn ledger_row(
    district: &str,
    stage: Stage,
    index: String,
    range: String,
    method: Method,
    s: &CandidateScore,
) -> LedgerRow {
    LedgerRow {
        district: district.to_string(),
        stage,
        index,
        range,
        method,
        sensitivity: s.sensitivity,
        specificity: s.specificity,
        balance: s.balance,
        selected: false,
    }
}

fn optimize_stage(
    district: &str,
    stage: Stage,
    samples: &[Sample],
    ledger: &mut Vec<LedgerRow>,
) -> Result<(StageRule, CandidateScore)> {
    let indices = stage_indices(stage);
    let mut per_index = Vec::with_capacity(indices.len());
    for index in indices {
        let paddy = stage_values(samples, stage, PaddyClass::Paddy, |v| Some(v.get(*index)));
        let mut candidates = vec![
            (
                RangeLabel::Broad,
                derive_bounds(&paddy, &PercentileRange::broad(), *index)?,
            ),
            (
                RangeLabel::Interquartile,
                derive_bounds(&paddy, &PercentileRange::interquartile(), *index)?,
            ),
        ];
        if let Some(b) = literature_bound(stage, *index) {
            candidates.push((RangeLabel::Custom, b));
        }
        per_index.push(candidates);
    }

    // every combination of one range per index, first index varying slowest
    let total: usize = per_index.iter().map(Vec::len).product();
    let combos: Vec<Vec<usize>> = (0..total)
        .map(|mut code| {
            let mut pick = vec![0; per_index.len()];
            for (slot, c) in per_index.iter().enumerate().rev() {
                pick[slot] = code % c.len();
                code /= c.len();
            }
            pick
        })
        .collect();
    let basic_of = |pick: &[usize]| StageRule {
        stage,
        method: Method::Basic,
        bounds: pick.iter().zip(&per_index).map(|(i, c)| c[*i].1).collect(),
        ratios: vec![],
    };
    let scored: Vec<CandidateScore> = combos
        .par_iter()
        .map(|pick| score_candidate(&basic_of(pick), samples))
        .collect::<Result<_>>()?;
    let best = first_best(&scored.iter().map(|s| s.balance).collect::<Vec<_>>()).expect("combinations");
    let chosen = &combos[best];

    for (slot, (index, candidates)) in indices.iter().zip(&per_index).enumerate() {
        for (i, (label, b)) in candidates.iter().enumerate() {
            let single = StageRule {
                stage,
                method: Method::Basic,
                bounds: vec![*b],
                ratios: vec![],
            };
            let s = score_candidate(&single, samples)?;
            let mut row = ledger_row(district, stage, index.to_string(), label.to_string(), Method::Basic, &s);
            row.selected = i == chosen[slot];
            ledger.push(row);
        }
    }

    let basic = basic_of(chosen);
    let mut options = vec![(basic.clone(), score_candidate(&basic, samples)?)];

    let pool = ratio_pool(samples, stage);
    if !pool.is_empty() {
        let mut current = StageRule {
            method: Method::RatioBased,
            ..basic.clone()
        };
        let mut current_score: Option<CandidateScore> = None;
        let mut remaining = pool;
        while current.ratios.len() < crate::classifier::rules::MAX_RATIO_CRITERIA && !remaining.is_empty() {
            let trials: Vec<(StageRule, CandidateScore)> = remaining
                .par_iter()
                .map(|c| {
                    let mut r = current.clone();
                    r.ratios.push(*c);
                    let s = score_candidate(&r, samples)?;
                    Ok((r, s))
                })
                .collect::<Result<_>>()?;
            let best = first_best(&trials.iter().map(|t| t.1.balance).collect::<Vec<_>>()).expect("trials");
            if current_score.is_some_and(|cs| trials[best].1.balance <= cs.balance) {
                break;
            }
            current = trials[best].0.clone();
            current_score = Some(trials[best].1);
            remaining.remove(best);
        }
        if let Some(s) = current_score {
            options.push((current, s));
        }
    }

    let lswi = StageRule {
        method: Method::LswiEvi,
        ..basic
    };
    let lswi_score = score_candidate(&lswi, samples)?;
    options.push((lswi, lswi_score));

    let best = first_best(&options.iter().map(|o| o.1.balance).collect::<Vec<_>>()).expect("options");
    for (i, (rule, s)) in options.iter().enumerate() {
        let index = if rule.ratios.is_empty() {
            "all".to_string()
        } else {
            rule.ratios
                .iter()
                .map(|r| match r.kind {
                    CriterionKind::Ratio => format!("{}/{}", r.left, r.right),
                    CriterionKind::Difference => format!("{}-{}", r.left, r.right),
                })
                .collect::<Vec<_>>()
                .join("+")
        };
        let mut row = ledger_row(district, stage, index, "selected".into(), rule.method, s);
        row.selected = i == best;
        ledger.push(row);
    }
    let (rule, score) = options.swap_remove(best);
    Ok((rule, score))
}

fn tsp_ceiling(samples: &[Sample], stage: Stage, opts: &CalibrationOptions) -> f64 {
    let sigmas = sorted_finite(samples.iter().filter(|s| s.class == PaddyClass::Paddy).filter_map(|s| {
        let valid: Vec<f64> = s
            .stages
            .get(&stage)?
            .ndvi_series
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .collect();
        if valid.len() >= 2 {
            population_std(&valid)
        } else {
            None
        }
    }));
    if sigmas.len() < MIN_PADDY_SAMPLES {
        return opts.tsp_default;
    }
    ecdf_quantile(&sigmas, opts.tsp_quantile * 100.0).clamp(TSP_SIGMA_RANGE.0, TSP_SIGMA_RANGE.1)
}

/// Selects bounds, methods and TSP ceilings for one district from labeled samples.
pub fn optimize_from_samples(
    district: &str,
    samples: &[Sample],
    windows: &StageWindows,
    opts: &CalibrationOptions,
) -> Result<CalibrationOutcome> {
    let district = normalize_district_name(district)?;
    let paddy = samples.iter().filter(|s| s.class == PaddyClass::Paddy).count();
    if paddy == 0 || paddy == samples.len() {
        return Err(Error::SingleClass(format!(
            "{district}: {paddy} paddy of {} reference pixels",
            samples.len()
        )));
    }
    let mut ledger = Vec::new();
    let mut rules = Vec::new();
    let mut stage_scores = BTreeMap::new();
    let mut unresolved = Vec::new();
    for stage in Stage::ALL {
        let (rule, score) = optimize_stage(&district, stage, samples, &mut ledger)?;
        if score.balance <= 0.5 && stage != Stage::Ripening {
            warn!("{district}: no {stage} candidate exceeds balance 0.5; flagged for manual review");
            unresolved.push(stage);
        }
        stage_scores.insert(stage, score);
        rules.push(rule);
    }
    let tsp = TspParams(
        Stage::AREA_STAGES
            .into_iter()
            .map(|s| (s, tsp_ceiling(samples, s, opts)))
            .collect(),
    );
    let season = opts
        .season
        .unwrap_or(DateRange::new(windows.land_preparation.start, windows.ripening.end)?);
    let calibration = DistrictCalibration {
        schema_version: CALIBRATION_SCHEMA_VERSION,
        district: district.clone(),
        season,
        stage_windows: *windows,
        allow_atypical_durations: opts.allow_atypical_durations,
        rules,
        tsp,
        tpa: opts.tpa,
        combination: opts.combination,
        exclusions: opts.exclusions.clone(),
        outlier: opts.outlier.clone(),
        focal_radius_m: opts.focal_radius_m,
        needs_manual_review: !unresolved.is_empty(),
    };
    calibration.validate()?;
    info!(
        "{district}: calibrated from {paddy} paddy and {} non-paddy reference pixels",
        samples.len() - paddy
    );
    Ok(CalibrationOutcome {
        calibration,
        ledger,
        stage_scores,
        unresolved,
    })
}

/// Full per-district calibration from index cubes and rasterized references.
pub fn optimize_district(
    district: &str,
    cubes: &BTreeMap<IndexKind, IndexCube>,
    windows: &StageWindows,
    refs: &[RasterizedPolygon],
    opts: &CalibrationOptions,
) -> Result<CalibrationOutcome> {
    windows.validate(opts.allow_atypical_durations)?;
    let samples = collect_samples(cubes, windows, refs, &opts.outlier.composite_k)?;
    optimize_from_samples(district, &samples, windows, opts)
}

/// Pixel-level decision of a calibration without spatial steps: stage rules, TSP,
/// TPA and stage combination.
pub fn predict_sample(calib: &DistrictCalibration, s: &Sample) -> bool {
    let ndvi = |stage: Stage| s.stages.get(&stage).map_or(f64::NAN, |st| st.raw_ndvi);
    let tpa_ok = calib.tpa.as_ref().is_none_or(|p| {
        tpa_filter(
            ndvi(Stage::LandPreparation),
            ndvi(Stage::Reproductive),
            ndvi(Stage::Ripening),
            p,
        )
    });
    let mut yes = 0;
    let mut known = 0;
    for stage in Stage::AREA_STAGES {
        let (Some(rule), Some(st)) = (calib.rule(stage), s.stages.get(&stage)) else {
            continue;
        };
        let Some(hit) = rule.evaluate(&st.values) else {
            continue;
        };
        known += 1;
        let tsp_ok = calib
            .tsp
            .sigma_max(stage)
            .is_none_or(|sigma| tsp_filter(&st.ndvi_series, sigma).pass);
        if hit && tsp_ok && tpa_ok {
            yes += 1;
        }
    }
    known > 0
        && match calib.combination {
            CombinationPolicy::All => yes == 3,
            CombinationPolicy::Any => yes >= 1,
            CombinationPolicy::Majority => yes >= 2,
        }
}

pub fn evaluate_calibration(calib: &DistrictCalibration, samples: &[Sample]) -> Result<CandidateScore> {
    CandidateScore::from_predictions(samples.iter().map(|s| (s.class, predict_sample(calib, s))))
}

// ------------------------------------------------------------ cluster mode

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterAssignment {
    pub clusters: BTreeMap<String, Vec<String>>,
}

impl ClusterAssignment {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut a: ClusterAssignment =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        a.normalize()?;
        Ok(a)
    }

    /// Canonicalizes member names and rejects empty clusters and duplicate membership.
    pub fn normalize(&mut self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, members) in self.clusters.iter_mut() {
            if members.is_empty() {
                return Err(Error::EmptyCluster(name.clone()));
            }
            for m in members.iter_mut() {
                *m = normalize_district_name(m)?;
                if !seen.insert(m.clone()) {
                    return Err(Error::InvalidParameter(format!(
                        "district {m} appears in more than one cluster"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn cluster_of(&self, district: &str) -> Option<&str> {
        self.clusters
            .iter()
            .find(|(_, m)| m.iter().any(|d| d == district))
            .map(|(c, _)| c.as_str())
    }
}

/// Inputs for one district in the mode comparison.
#[derive(Debug, Clone)]
pub struct DistrictInput {
    pub district: String,
    pub cubes: BTreeMap<IndexKind, IndexCube>,
    pub windows: StageWindows,
    pub refs: Vec<RasterizedPolygon>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistrictModeResult {
    pub district: String,
    pub cluster: String,
    pub district_accuracy: f64,
    pub cluster_accuracy: f64,
    pub district_balance: f64,
    pub cluster_balance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSummary {
    pub cluster: String,
    pub size: usize,
    pub members: Vec<String>,
    pub stage_windows: StageWindows,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeComparison {
    pub districts: Vec<DistrictModeResult>,
    pub clusters: Vec<ClusterSummary>,
    pub mean_district_accuracy: f64,
    pub mean_cluster_accuracy: f64,
    /// District-mode minus cluster-mode mean accuracy.
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct ModeComparisonOutcome {
    pub comparison: ModeComparison,
    pub district_calibrations: BTreeMap<String, CalibrationOutcome>,
    pub cluster_calibrations: BTreeMap<String, CalibrationOutcome>,
}

fn average_date(dates: &[NaiveDate]) -> NaiveDate {
    let sum: i64 = dates.iter().map(|d| d.num_days_from_ce() as i64).sum();
    let mean = (sum as f64 / dates.len() as f64).round() as i32;
    NaiveDate::from_num_days_from_ce_opt(mean).expect("date in range")
}

/// Member windows averaged date by date.
pub fn average_windows(windows: &[StageWindows]) -> Result<StageWindows> {
    if windows.is_empty() {
        return Err(Error::InvalidWindows("no windows to average".into()));
    }
    let mut ranges = Vec::with_capacity(4);
    for stage in Stage::ALL {
        let starts: Vec<NaiveDate> = windows.iter().map(|w| w.get(stage).start).collect();
        let ends: Vec<NaiveDate> = windows.iter().map(|w| w.get(stage).end).collect();
        ranges.push(DateRange::new(average_date(&starts), average_date(&ends))?);
    }
    StageWindows::new([ranges[0], ranges[1], ranges[2], ranges[3]])
}

/// Fits one calibration per district and one per cluster (pooled references, averaged
/// windows), then reports per-district accuracy under both.
pub fn compare_modes(
    inputs: &[DistrictInput],
    clusters: &ClusterAssignment,
    opts: &CalibrationOptions,
) -> Result<ModeComparisonOutcome> {
    let mut by_name: BTreeMap<String, &DistrictInput> = BTreeMap::new();
    for i in inputs {
        by_name.insert(normalize_district_name(&i.district)?, i);
    }
    let uncovered: Vec<String> = by_name
        .keys()
        .filter(|d| clusters.cluster_of(d).is_none())
        .cloned()
        .collect();
    if !uncovered.is_empty() {
        return Err(Error::UnmatchedDistricts(uncovered));
    }

    let mut district_calibrations = BTreeMap::new();
    let mut own_samples = BTreeMap::new();
    for (name, input) in &by_name {
        let samples = collect_samples(&input.cubes, &input.windows, &input.refs, &opts.outlier.composite_k)?;
        let outcome = optimize_from_samples(name, &samples, &input.windows, opts)?;
        own_samples.insert(name.clone(), samples);
        district_calibrations.insert(name.clone(), outcome);
    }

    let mut cluster_calibrations = BTreeMap::new();
    let mut summaries = Vec::new();
    let mut results = Vec::new();
    for (cluster, members) in &clusters.clusters {
        let present: Vec<&String> = members.iter().filter(|m| by_name.contains_key(*m)).collect();
        for m in members.iter().filter(|m| !by_name.contains_key(*m)) {
            warn!("cluster {cluster}: no input data for {m}; skipped");
        }
        if present.is_empty() {
            return Err(Error::EmptyCluster(cluster.clone()));
        }
        let windows = average_windows(&present.iter().map(|m| by_name[*m].windows).collect::<Vec<_>>())?;
        let mut member_samples = BTreeMap::new();
        let mut pooled = Vec::new();
        for m in &present {
            let input = by_name[*m];
            let s = collect_samples(&input.cubes, &windows, &input.refs, &opts.outlier.composite_k)?;
            pooled.extend(s.iter().cloned());
            member_samples.insert((*m).clone(), s);
        }
        let outcome = optimize_from_samples(present[0], &pooled, &windows, opts)?;
        for m in &present {
            let own = evaluate_calibration(&district_calibrations[*m].calibration, &own_samples[*m])?;
            let mut shared = outcome.calibration.clone();
            shared.district = (*m).clone();
            let pooled_score = evaluate_calibration(&shared, &member_samples[*m])?;
            results.push(DistrictModeResult {
                district: (*m).clone(),
                cluster: cluster.clone(),
                district_accuracy: own.accuracy(),
                cluster_accuracy: pooled_score.accuracy(),
                district_balance: own.balance,
                cluster_balance: pooled_score.balance,
            });
        }
        summaries.push(ClusterSummary {
            cluster: cluster.clone(),
            size: members.len(),
            members: members.clone(),
            stage_windows: windows,
        });
        cluster_calibrations.insert(cluster.clone(), outcome);
    }
    results.sort_by(|a, b| a.district.cmp(&b.district));
    let n = results.len() as f64;
    let mean_district_accuracy = results.iter().map(|r| r.district_accuracy).sum::<f64>() / n;
    let mean_cluster_accuracy = results.iter().map(|r| r.cluster_accuracy).sum::<f64>() / n;
    Ok(ModeComparisonOutcome {
        comparison: ModeComparison {
            districts: results,
            clusters: summaries,
            mean_district_accuracy,
            mean_cluster_accuracy,
            delta: mean_district_accuracy - mean_cluster_accuracy,
        },
        district_calibrations,
        cluster_calibrations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_bounds_examples() {
        let even: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let b = derive_bounds(&even, &PercentileRange::broad(), IndexKind::Ndvi).unwrap();
        assert!((b.min.unwrap() - 0.1).abs() < 1e-12 && (b.max.unwrap() - 0.9).abs() < 1e-12);
        let b = derive_bounds(&[0.5; 12], &PercentileRange::broad(), IndexKind::Ndvi).unwrap();
        assert_eq!((b.min, b.max), (Some(0.5), Some(0.5)));
        let doubled: Vec<f64> = even.iter().chain(&even).copied().collect();
        let d = derive_bounds(&doubled, &PercentileRange::broad(), IndexKind::Ndvi).unwrap();
        assert_eq!((d.min, d.max), (Some(0.1), Some(0.9)));
        let uniform: Vec<f64> = (0..10_001).map(|i| i as f64 / 10_000.0).collect();
        let b = derive_bounds(&uniform, &PercentileRange::interquartile(), IndexKind::Ndvi).unwrap();
        assert!((b.min.unwrap() - 0.25).abs() < 1e-3 && (b.max.unwrap() - 0.75).abs() < 1e-3);
        assert!(matches!(
            derive_bounds(&even[..9], &PercentileRange::broad(), IndexKind::Ndvi),
            Err(Error::InsufficientSamples { .. })
        ));
        assert!(PercentileRange::custom(60.0, 40.0).is_err());
    }

    fn sample(class: PaddyClass, ndvi: f64) -> Sample {
        let values = PixelValues::default().with(IndexKind::Ndvi, ndvi);
        Sample {
            class,
            polygon_id: "p".into(),
            stages: [(
                Stage::Reproductive,
                StageSample {
                    values,
                    raw_ndvi: ndvi,
                    ndvi_series: vec![ndvi],
                },
            )]
            .into_iter()
            .collect(),
        }
    }

    fn rule(min: f64) -> StageRule {
        StageRule {
            stage: Stage::Reproductive,
            method: Method::Basic,
            bounds: vec![RangeBound::new(IndexKind::Ndvi, Some(min), None).unwrap()],
            ratios: vec![],
        }
    }

    #[test]
    fn scoring_examples() {
        let mut samples: Vec<Sample> = (0..100)
            .map(|i| sample(PaddyClass::Paddy, if i < 80 { 0.8 } else { 0.3 }))
            .collect();
        samples.extend((0..100).map(|i| sample(PaddyClass::NonPaddy, if i < 90 { 0.3 } else { 0.8 })));
        let s = score_candidate(&rule(0.5), &samples).unwrap();
        assert!((s.balance - 0.85).abs() < 1e-12);
        assert_eq!(s.tp + s.fn_, 100);
        let all = score_candidate(&rule(0.0), &samples).unwrap();
        assert_eq!((all.sensitivity, all.specificity, all.balance), (1.0, 0.0, 0.5));
        let paddy_only: Vec<Sample> = samples.into_iter().filter(|s| s.class == PaddyClass::Paddy).collect();
        assert!(matches!(
            score_candidate(&rule(0.5), &paddy_only),
            Err(Error::SingleClass(_))
        ));
    }

    #[test]
    fn first_best_prefers_earlier() {
        assert_eq!(first_best(&[0.9, 0.9, 0.8]), Some(0));
        assert_eq!(first_best(&[0.8, 0.95, 0.88]), Some(1));
        assert_eq!(first_best(&[]), None);
    }

    #[test]
    fn literature_bounds_cover_stage_indices() {
        for stage in Stage::ALL {
            for k in stage_indices(stage) {
                assert!(literature_bound(stage, *k).is_some(), "{stage} {k}");
            }
        }
    }

    #[test]
    fn window_averaging() {
        let d = |s: &str| s.parse::<NaiveDate>().unwrap();
        let mk = |off: u64| {
            let r = |a: u64, b: u64| {
                DateRange::new(
                    d("2019-01-01") + chrono::Days::new(a + off),
                    d("2019-01-01") + chrono::Days::new(b + off),
                )
                .unwrap()
            };
            StageWindows::new([r(0, 29), r(30, 59), r(60, 89), r(90, 119)]).unwrap()
        };
        let avg = average_windows(&[mk(0), mk(10)]).unwrap();
        assert_eq!(avg, mk(5));
        assert!(average_windows(&[]).is_err());
    }

    #[test]
    fn cluster_assignment_validation() {
        let mut a = ClusterAssignment {
            clusters: [(
                "south".to_string(),
                vec!["nalgonda".to_string(), "Suryapet".to_string()],
            )]
            .into_iter()
            .collect(),
        };
        a.normalize().unwrap();
        assert_eq!(a.cluster_of("Nalgonda"), Some("south"));
        let mut empty = ClusterAssignment {
            clusters: [("x".to_string(), vec![])].into_iter().collect(),
        };
        assert!(matches!(empty.normalize(), Err(Error::EmptyCluster(_))));
        let mut dup = ClusterAssignment {
            clusters: [
                ("a".to_string(), vec!["Nalgonda".to_string()]),
                ("b".to_string(), vec!["Nalgonda".to_string()]),
            ]
            .into_iter()
            .collect(),
        };
        assert!(dup.normalize().is_err());
    }
}
