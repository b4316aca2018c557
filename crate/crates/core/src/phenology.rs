//! Trajectory smoothing, growth-stage transition detection and stage composites.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indices::IndexKind;
use crate::raster::{GeoGrid, IndexCube};

pub const SAVGOL_WINDOW: usize = 7;
pub const SAVGOL_ORDER: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    LandPreparation,
    Vegetative,
    Reproductive,
    Ripening,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::LandPreparation,
        Stage::Vegetative,
        Stage::Reproductive,
        Stage::Ripening,
    ];

    /// Stages that may contribute to the final mask.
    pub const AREA_STAGES: [Stage; 3] = [Stage::LandPreparation, Stage::Vegetative, Stage::Reproductive];

    pub fn name(self) -> &'static str {
        match self {
            Stage::LandPreparation => "land_preparation",
            Stage::Vegetative => "vegetative",
            Stage::Reproductive => "reproductive",
            Stage::Ripening => "ripening",
        }
    }

    pub fn position(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| Error::InvalidParameter(format!("unknown stage '{s}'")))
    }
}

// ---------------------------------------------------------------- smoothing

/// Weights that evaluate the least-squares polynomial of degree `order`, fitted to
/// `window` consecutive samples, at sample `position` of that window.
pub fn savgol_coefficients(window: usize, order: usize, position: usize) -> Result<Vec<f64>> {
    check_savgol_params(window, order)?;
    if position >= window {
        return Err(Error::InvalidParameter(format!(
            "position {position} outside window {window}"
        )));
    }
    let half = (window / 2) as f64;
    let design = DMatrix::from_fn(window, order + 1, |j, k| (j as f64 - half).powi(k as i32));
    let pinv = design
        .svd(true, true)
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::Invariant(format!("Savitzky-Golay pseudo-inverse: {e}")))?;
    let x = position as f64 - half;
    Ok((0..window)
        .map(|j| (0..=order).map(|k| x.powi(k as i32) * pinv[(k, j)]).sum())
        .collect())
}

fn check_savgol_params(window: usize, order: usize) -> Result<()> {
    if window % 2 == 0 || window < 3 {
        return Err(Error::InvalidParameter(format!(
            "Savitzky-Golay window must be odd and >= 3, got {window}"
        )));
    }
    if order >= window {
        return Err(Error::InvalidParameter(format!(
            "Savitzky-Golay order {order} must be below window {window}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    /// Smoothed series; `NaN` wherever the input was `NaN`.
    pub values: Vec<f64>,
    /// Series too short (or without valid samples) to smooth; returned unchanged.
    pub unsmoothed: bool,
}

/// Linear interpolation across `NaN` gaps; leading and trailing gaps take the nearest
/// valid value. Samples are assumed evenly spaced.
pub fn interpolate_gaps(series: &[f64]) -> Option<Vec<f64>> {
    let valid: Vec<usize> = (0..series.len()).filter(|i| series[*i].is_finite()).collect();
    let (&first, &last) = (valid.first()?, valid.last()?);
    let mut out = series.to_vec();
    for v in out.iter_mut().take(first) {
        *v = series[first];
    }
    for v in out.iter_mut().skip(last + 1) {
        *v = series[last];
    }
    for pair in valid.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        for (i, slot) in out.iter_mut().enumerate().take(b).skip(a + 1) {
            let t = (i - a) as f64 / (b - a) as f64;
            *slot = series[a] + t * (series[b] - series[a]);
        }
    }
    Some(out)
}

/// Savitzky-Golay smoothing with polynomial fits on truncated windows at both edges.
pub fn smooth_savgol(series: &[f64], window: usize, order: usize) -> Result<Smoothed> {
    check_savgol_params(window, order)?;
    let unchanged = || Smoothed {
        values: series.to_vec(),
        unsmoothed: true,
    };
    if series.len() < window {
        warn!(
            "series of length {} shorter than smoothing window {window}; left unsmoothed",
            series.len()
        );
        return Ok(unchanged());
    }
    let Some(filled) = interpolate_gaps(series) else {
        return Ok(unchanged());
    };
    let coeffs: Vec<Vec<f64>> = (0..window)
        .map(|p| savgol_coefficients(window, order, p))
        .collect::<Result<_>>()?;
    let n = series.len();
    let half = window / 2;
    let values = (0..n)
        .map(|i| {
            if series[i].is_nan() {
                return f64::NAN;
            }
            let (start, pos) = if i < half {
                (0, i)
            } else if i + half >= n {
                (n - window, i - (n - window))
            } else {
                (i - half, half)
            };
            coeffs[pos]
                .iter()
                .zip(&filled[start..start + window])
                .map(|(c, v)| c * v)
                .sum()
        })
        .collect();
    Ok(Smoothed {
        values,
        unsmoothed: false,
    })
}

// ------------------------------------------------------------- stage windows

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if end < start {
            return Err(Error::InvalidWindows(format!("{start} is after {end}")));
        }
        Ok(DateRange { start, end })
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }

    /// Inclusive length in days.
    pub fn duration_days(&self) -> i64 {
        (self.end - self.start).num_days() + 1
    }
}

/// Observed range of stage durations; shorter or longer windows need an explicit override.
pub const MIN_STAGE_DAYS: i64 = 17;
pub const MAX_STAGE_DAYS: i64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageWindows {
    pub land_preparation: DateRange,
    pub vegetative: DateRange,
    pub reproductive: DateRange,
    pub ripening: DateRange,
}

impl StageWindows {
    pub fn new(ranges: [DateRange; 4]) -> Result<Self> {
        let w = StageWindows {
            land_preparation: ranges[0],
            vegetative: ranges[1],
            reproductive: ranges[2],
            ripening: ranges[3],
        };
        w.validate_order()?;
        Ok(w)
    }

    pub fn get(&self, stage: Stage) -> DateRange {
        match stage {
            Stage::LandPreparation => self.land_preparation,
            Stage::Vegetative => self.vegetative,
            Stage::Reproductive => self.reproductive,
            Stage::Ripening => self.ripening,
        }
    }

    pub fn validate_order(&self) -> Result<()> {
        for stage in Stage::ALL {
            let r = self.get(stage);
            if r.end < r.start {
                return Err(Error::InvalidWindows(format!("{stage} ends before it starts")));
            }
        }
        for pair in Stage::ALL.windows(2) {
            let (a, b) = (self.get(pair[0]), self.get(pair[1]));
            if b.start <= a.end {
                return Err(Error::InvalidWindows(format!(
                    "{} ({}..{}) must end before {} starts ({})",
                    pair[0], a.start, a.end, pair[1], b.start
                )));
            }
        }
        Ok(())
    }

    /// Stages whose duration falls outside the observed range.
    pub fn atypical_durations(&self) -> Vec<(Stage, i64)> {
        Stage::ALL
            .into_iter()
            .map(|s| (s, self.get(s).duration_days()))
            .filter(|(_, d)| !(MIN_STAGE_DAYS..=MAX_STAGE_DAYS).contains(d))
            .collect()
    }

    /// Shortens the open-ended outer windows (land preparation and ripening) to at
    /// most the longest typical duration, keeping the detected transitions.
    pub fn trim_outer(&self) -> StageWindows {
        let mut out = *self;
        let max = chrono::Days::new(MAX_STAGE_DAYS as u64 - 1);
        let lp = &mut out.land_preparation;
        if lp.duration_days() > MAX_STAGE_DAYS {
            lp.start = lp.end - max;
        }
        let rip = &mut out.ripening;
        if rip.duration_days() > MAX_STAGE_DAYS {
            rip.end = rip.start + max;
        }
        out
    }

    pub fn validate(&self, allow_atypical_durations: bool) -> Result<()> {
        self.validate_order()?;
        let odd = self.atypical_durations();
        if !allow_atypical_durations && !odd.is_empty() {
            let list: Vec<String> = odd.iter().map(|(s, d)| format!("{s} = {d} days")).collect();
            return Err(Error::InvalidWindows(format!(
                "durations outside {MIN_STAGE_DAYS}-{MAX_STAGE_DAYS} days: {}",
                list.join(", ")
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------- transitions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdLevel {
    Absolute(f64),
    /// Each field's own peak minus this amount.
    PeakMinus(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionThreshold {
    pub level: ThresholdLevel,
    pub direction: Direction,
}

impl TransitionThreshold {
    pub fn up(level: f64) -> Self {
        TransitionThreshold {
            level: ThresholdLevel::Absolute(level),
            direction: Direction::Up,
        }
    }

    /// Index of the first sample that has crossed, and the number of separate
    /// entries into the crossed state.
    fn first_crossing(&self, series: &[f64]) -> (Option<usize>, usize) {
        let peak = series.iter().enumerate().filter(|(_, v)| v.is_finite()).fold(
            None,
            |best: Option<(usize, f64)>, (i, v)| match best {
                Some((_, b)) if b >= *v => best,
                _ => Some((i, *v)),
            },
        );
        let Some((peak_idx, peak_val)) = peak else {
            return (None, 0);
        };
        let level = match self.level {
            ThresholdLevel::Absolute(l) => l,
            ThresholdLevel::PeakMinus(d) => peak_val - d,
        };
        let from = match self.direction {
            Direction::Up => 0,
            Direction::Down => peak_idx,
        };
        let mut first = None;
        let mut entries = 0;
        let mut inside = false;
        for (i, v) in series.iter().enumerate().skip(from) {
            if !v.is_finite() {
                continue;
            }
            let crossed = match self.direction {
                Direction::Up => *v >= level,
                Direction::Down => *v <= level,
            };
            if crossed && !inside {
                entries += 1;
                first.get_or_insert(i);
            }
            inside = crossed;
        }
        (first, entries)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionThresholds {
    pub to_vegetative: TransitionThreshold,
    pub to_reproductive: TransitionThreshold,
    pub to_ripening: TransitionThreshold,
}

impl Default for TransitionThresholds {
    fn default() -> Self {
        TransitionThresholds {
            to_vegetative: TransitionThreshold::up(0.30),
            to_reproductive: TransitionThreshold::up(0.45),
            to_ripening: TransitionThreshold {
                level: ThresholdLevel::PeakMinus(0.10),
                direction: Direction::Down,
            },
        }
    }
}

/// Smoothed NDVI trajectory of one reference field.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub field_id: String,
    pub dates: Vec<NaiveDate>,
    pub ndvi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionDiagnostics {
    pub stage: Stage,
    pub date: NaiveDate,
    pub fields_crossed: usize,
    pub fields_total: usize,
    /// Fields that entered the crossed state more than once.
    pub multi_crossing_fields: Vec<String>,
}

/// Earliest date on which strictly more than half of `first_crossings` are at or before it.
pub fn majority_date(first_crossings: &[Option<NaiveDate>]) -> Option<(NaiveDate, usize)> {
    let mut dates: Vec<NaiveDate> = first_crossings.iter().flatten().copied().collect();
    dates.sort();
    let n = first_crossings.len();
    dates
        .iter()
        .enumerate()
        .map(|(i, d)| (*d, i + 1))
        .filter(|(_, count)| 2 * count > n)
        .find(|(d, count)| dates.get(*count).is_none_or(|next| next != d))
}

/// Detects the three transitions and turns them into stage windows spanning `season`.
///
/// Each transition date is the earliest date on which more than half of the reference
/// fields have crossed the matching threshold; a field's crossing is its first one.
pub fn detect_stage_transitions(
    refs: &[ReferenceTrajectory],
    thresholds: &TransitionThresholds,
    season: DateRange,
) -> Result<(StageWindows, Vec<TransitionDiagnostics>)> {
    if refs.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            have: refs.len(),
            context: "reference trajectories for transition detection".into(),
        });
    }
    for r in refs {
        if r.dates.len() != r.ndvi.len() {
            return Err(Error::DimensionMismatch(format!(
                "field {}: {} dates, {} values",
                r.field_id,
                r.dates.len(),
                r.ndvi.len()
            )));
        }
    }
    let steps = [
        (Stage::Vegetative, thresholds.to_vegetative),
        (Stage::Reproductive, thresholds.to_reproductive),
        (Stage::Ripening, thresholds.to_ripening),
    ];
    let mut diags = Vec::new();
    for (stage, threshold) in steps {
        let mut firsts = Vec::with_capacity(refs.len());
        let mut multi = Vec::new();
        for r in refs {
            let (idx, entries) = threshold.first_crossing(&r.ndvi);
            if entries > 1 {
                multi.push(r.field_id.clone());
            }
            firsts.push(idx.map(|i| r.dates[i]));
        }
        let (date, crossed) = majority_date(&firsts).ok_or(Error::UnresolvedTransition {
            stage: stage.to_string(),
        })?;
        diags.push(TransitionDiagnostics {
            stage,
            date,
            fields_crossed: crossed,
            fields_total: refs.len(),
            multi_crossing_fields: multi,
        });
    }
    let day = chrono::Days::new(1);
    let t: Vec<NaiveDate> = diags.iter().map(|d| d.date).collect();
    let range = |a: NaiveDate, b: Option<NaiveDate>| -> Result<DateRange> {
        let end = match b {
            Some(b) => b
                .checked_sub_days(day)
                .ok_or_else(|| Error::InvalidWindows("date underflow".into()))?,
            None => season.end,
        };
        DateRange::new(a, end)
    };
    let windows = StageWindows::new([
        range(season.start, Some(t[0]))?,
        range(t[0], Some(t[1]))?,
        range(t[1], Some(t[2]))?,
        range(t[2], None)?,
    ])?;
    for (stage, days) in windows.atypical_durations() {
        warn!("detected {stage} window lasts {days} days, outside {MIN_STAGE_DAYS}-{MAX_STAGE_DAYS}");
    }
    Ok((windows, diags))
}

// ------------------------------------------------------------ profiles CSV

/// One row of an exported temporal spectral profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub field_id: String,
    pub date: NaiveDate,
    #[serde(rename = "NDVI")]
    pub ndvi: Option<f64>,
    #[serde(rename = "MNDWI")]
    pub mndwi: Option<f64>,
    #[serde(rename = "LSWI")]
    pub lswi: Option<f64>,
    #[serde(rename = "EVI")]
    pub evi: Option<f64>,
    #[serde(rename = "SAVI")]
    pub savi: Option<f64>,
    pub class: String,
    pub district: String,
}

pub fn read_profiles_csv(path: &Path) -> Result<Vec<ProfileRow>> {
    let ctx = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        context: ctx.clone(),
        source: e,
    })?;
    reader
        .deserialize()
        .map(|r| {
            r.map_err(|e| Error::Csv {
                context: ctx.clone(),
                source: e,
            })
        })
        .collect()
}

/// Groups profile rows of class `class` into date-sorted NDVI trajectories, smoothed
/// with the default Savitzky-Golay parameters.
pub fn trajectories_from_profiles(rows: &[ProfileRow], class: &str) -> Result<Vec<ReferenceTrajectory>> {
    let mut by_field: BTreeMap<&str, Vec<(NaiveDate, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.class == class) {
        by_field
            .entry(r.field_id.as_str())
            .or_default()
            .push((r.date, r.ndvi.unwrap_or(f64::NAN)));
    }
    by_field
        .into_iter()
        .map(|(id, mut obs)| {
            obs.sort_by_key(|(d, _)| *d);
            let dates: Vec<NaiveDate> = obs.iter().map(|(d, _)| *d).collect();
            crate::raster::check_dates_increasing(&dates)?;
            let raw: Vec<f64> = obs.iter().map(|(_, v)| *v).collect();
            Ok(ReferenceTrajectory {
                field_id: id.to_string(),
                dates,
                ndvi: smooth_savgol(&raw, SAVGOL_WINDOW, SAVGOL_ORDER)?.values,
            })
        })
        .collect()
}

// --------------------------------------------------------------- composites

#[derive(Debug, Clone, PartialEq)]
pub struct StageComposite {
    pub district: String,
    pub stage: Stage,
    pub index: IndexKind,
    pub grid: GeoGrid,
    /// Per-pixel mean; `NaN` where `count` is 0.
    pub mean: Vec<f64>,
    pub count: Vec<u32>,
}

/// Positions of `dates` falling inside `range`.
pub fn dates_in_range(dates: &[NaiveDate], range: DateRange) -> Vec<usize> {
    (0..dates.len()).filter(|i| range.contains(dates[*i])).collect()
}

/// Per-pixel mean of the valid observations dated within the stage window.
pub fn build_stage_composite(cube: &IndexCube, windows: &StageWindows, stage: Stage) -> Result<StageComposite> {
    let idx = dates_in_range(&cube.dates, windows.get(stage));
    if idx.is_empty() {
        return Err(Error::EmptyWindow {
            stage: stage.to_string(),
        });
    }
    let n = cube.grid.len();
    let planes: Vec<&[f64]> = idx.iter().map(|d| cube.plane(*d)).collect::<Result<_>>()?;
    let (mean, count): (Vec<f64>, Vec<u32>) = (0..n)
        .into_par_iter()
        .map(|p| {
            let mut sum = 0.0;
            let mut k = 0u32;
            for plane in &planes {
                let v = plane[p];
                if v.is_finite() {
                    sum += v;
                    k += 1;
                }
            }
            if k == 0 {
                (f64::NAN, 0)
            } else {
                (sum / k as f64, k)
            }
        })
        .unzip();
    Ok(StageComposite {
        district: cube.district.clone(),
        stage,
        index: cube.kind,
        grid: cube.grid.clone(),
        mean,
        count,
    })
}
