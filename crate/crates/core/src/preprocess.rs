//! Scene screening, pixel cloud masking, reflectance normalization and IQR outlier
//! removal.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube_io;
use crate::error::{Error, Result};
use crate::indices::IndexKind;
use crate::raster::{GeoGrid, IndexCube, ReflectanceCube};
use crate::stats::{sorted_finite, IqrSummary};

pub const QA_BAND: &str = "QA";
pub const DEFAULT_SCALE: f64 = 10_000.0;
pub const DEFAULT_MAX_CLOUD_FRACTION: f64 = 0.8;

/// Bit positions in the QA bitfield that flag a pixel as cloudy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaConfig {
    #[serde(default = "default_cloud_bit")]
    pub cloud_bit: u8,
    #[serde(default = "default_cirrus_bit")]
    pub cirrus_bit: u8,
}

fn default_cloud_bit() -> u8 {
    10
}

fn default_cirrus_bit() -> u8 {
    11
}

impl Default for QaConfig {
    fn default() -> Self {
        QaConfig {
            cloud_bit: default_cloud_bit(),
            cirrus_bit: default_cirrus_bit(),
        }
    }
}

impl QaConfig {
    fn mask(&self) -> Result<u16> {
        if self.cloud_bit > 15 || self.cirrus_bit > 15 {
            return Err(Error::InvalidParameter(format!(
                "QA bit indices must be < 16, got {} and {}",
                self.cloud_bit, self.cirrus_bit
            )));
        }
        Ok((1u16 << self.cloud_bit) | (1u16 << self.cirrus_bit))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaPlane {
    pub date: NaiveDate,
    pub grid: GeoGrid,
    pub values: Vec<u16>,
}

/// Reads a QA directory (cube plane format, single band `QA`).
pub fn read_qa(dir: &Path) -> Result<Vec<QaPlane>> {
    let (manifest, planes) = cube_io::read_plane_stack(dir)?;
    if manifest.bands.len() != 1 || manifest.bands[0] != QA_BAND {
        return Err(Error::InvalidParameter(format!(
            "{}: QA directory must declare exactly one band named {QA_BAND}",
            dir.display()
        )));
    }
    let grid = manifest.grid()?;
    manifest
        .dates
        .iter()
        .zip(planes)
        .map(|(date, mut per_band)| {
            let plane = per_band.remove(0);
            let values = plane
                .iter()
                .map(|v| {
                    if v.is_nan() {
                        Ok(0)
                    } else if *v >= 0.0 && *v <= u16::MAX as f32 && v.fract() == 0.0 {
                        Ok(*v as u16)
                    } else {
                        Err(Error::InvalidParameter(format!(
                            "QA value {v} on {date} is not a 16-bit integer"
                        )))
                    }
                })
                .collect::<Result<Vec<u16>>>()?;
            Ok(QaPlane {
                date: *date,
                grid: grid.clone(),
                values,
            })
        })
        .collect()
}

pub fn write_qa(planes: &[QaPlane], dir: &Path, district: &str) -> Result<()> {
    let first = planes
        .first()
        .ok_or_else(|| Error::InvalidParameter("no QA planes".into()))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = cube_io::CubeManifest::for_grid(&first.grid, district, f32::NAN);
    manifest.bands = vec![QA_BAND.to_string()];
    manifest.dates = planes.iter().map(|p| p.date).collect();
    for p in planes {
        let plane: Vec<f32> = p.values.iter().map(|v| *v as f32).collect();
        cube_io::write_plane(&cube_io::plane_path(dir, p.date, QA_BAND), &plane)?;
    }
    cube_io::write_manifest(dir, &manifest)
}

fn check_qa_alignment(cube: &ReflectanceCube, qa: &[QaPlane]) -> Result<()> {
    if qa.len() != cube.dates().len() {
        return Err(Error::DimensionMismatch(format!(
            "{} QA planes for {} cube dates",
            qa.len(),
            cube.dates().len()
        )));
    }
    for (plane, date) in qa.iter().zip(cube.dates()) {
        if plane.date != *date {
            return Err(Error::DimensionMismatch(format!(
                "QA date {} does not match cube date {date}",
                plane.date
            )));
        }
        plane.grid.ensure_aligned(cube.grid(), "QA plane")?;
        if plane.values.len() != cube.grid().len() {
            return Err(Error::DimensionMismatch("QA plane size".into()));
        }
    }
    Ok(())
}

/// Pixels with at least one non-nodata band on date `d`.
fn valid_pixels(cube: &ReflectanceCube, d: usize) -> Result<Vec<bool>> {
    let mut valid = vec![false; cube.grid().len()];
    for b in 0..cube.bands().len() {
        for (slot, v) in valid.iter_mut().zip(cube.plane(d, b)?) {
            *slot |= !cube.is_nodata(*v);
        }
    }
    Ok(valid)
}

/// Cloud-flagged fraction of the valid pixels on each date.
///
/// A date without any valid pixel reports 0.
pub fn cloud_fractions(cube: &ReflectanceCube, qa: &[QaPlane], cfg: &QaConfig) -> Result<Vec<f64>> {
    check_qa_alignment(cube, qa)?;
    let bits = cfg.mask()?;
    (0..cube.dates().len())
        .map(|d| {
            let valid = valid_pixels(cube, d)?;
            let (mut n, mut cloudy) = (0usize, 0usize);
            for (ok, flags) in valid.iter().zip(&qa[d].values) {
                if *ok {
                    n += 1;
                    if flags & bits != 0 {
                        cloudy += 1;
                    }
                }
            }
            Ok(if n == 0 { 0.0 } else { cloudy as f64 / n as f64 })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SceneScreening {
    pub cube: ReflectanceCube,
    /// QA planes of the retained dates.
    pub qa: Vec<QaPlane>,
    /// Dropped dates with their cloud fraction.
    pub dropped: Vec<(NaiveDate, f64)>,
}

/// Removes dates whose cloud fraction strictly exceeds `max_cloud_fraction`.
pub fn drop_cloudy_scenes(
    cube: &ReflectanceCube,
    qa: &[QaPlane],
    max_cloud_fraction: f64,
    cfg: &QaConfig,
) -> Result<SceneScreening> {
    if !(max_cloud_fraction > 0.0 && max_cloud_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "max cloud fraction must be in (0, 1], got {max_cloud_fraction}"
        )));
    }
    let fractions = cloud_fractions(cube, qa, cfg)?;
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    for (d, f) in fractions.iter().enumerate() {
        if *f > max_cloud_fraction {
            dropped.push((cube.dates()[d], *f));
        } else {
            keep.push(d);
        }
    }
    if keep.is_empty() {
        return Err(Error::EmptyCube {
            threshold: max_cloud_fraction,
        });
    }
    Ok(SceneScreening {
        cube: cube.select_dates(&keep)?,
        qa: keep.iter().map(|d| qa[*d].clone()).collect(),
        dropped,
    })
}

/// Sets every band of a cloud- or cirrus-flagged pixel to the cube's nodata value.
pub fn mask_cloud_pixels(cube: &ReflectanceCube, qa: &[QaPlane], cfg: &QaConfig) -> Result<ReflectanceCube> {
    check_qa_alignment(cube, qa)?;
    let bits = cfg.mask()?;
    let mut out = cube.clone();
    let nodata = cube.nodata();
    for (d, plane) in qa.iter().enumerate() {
        for b in 0..cube.bands().len() {
            let target = out.plane_mut(d, b)?;
            for (v, flags) in target.iter_mut().zip(&plane.values) {
                if flags & bits != 0 {
                    *v = nodata;
                }
            }
        }
    }
    Ok(out)
}

/// Divides raw digital numbers by `scale` and clamps to `[0, 1]`.
pub fn normalize_reflectance(cube: &ReflectanceCube, scale: f64) -> Result<ReflectanceCube> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidParameter(format!("scale must be > 0, got {scale}")));
    }
    let mut out = cube.clone();
    for d in 0..cube.dates().len() {
        for b in 0..cube.bands().len() {
            let plane = out.plane_mut(d, b)?;
            plane.par_iter_mut().for_each(|v| {
                if !(v.is_nan() || *v == cube.nodata()) {
                    *v = ((*v as f64 / scale).clamp(0.0, 1.0)) as f32;
                }
            });
        }
    }
    Ok(out)
}

/// Minimum valid observations for the IQR test.
pub const IQR_MIN_OBSERVATIONS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct IqrOutcome {
    /// Input series with outliers replaced by `NaN`.
    pub series: Vec<f64>,
    pub masked: usize,
    /// Fewer than four valid observations; series returned unchanged.
    pub insufficient: bool,
}

/// Masks observations outside `[median - k*IQR, median + k*IQR]`.
///
/// `NaN` entries are nodata and are ignored. When the IQR is zero nothing is masked.
pub fn iqr_outlier_mask(series: &[f64], k: f64) -> Result<IqrOutcome> {
    if !(k > 0.0) {
        return Err(Error::InvalidParameter(format!("IQR multiplier must be > 0, got {k}")));
    }
    let sorted = sorted_finite(series.iter().copied());
    if sorted.len() < IQR_MIN_OBSERVATIONS {
        return Ok(IqrOutcome {
            series: series.to_vec(),
            masked: 0,
            insufficient: true,
        });
    }
    let summary = IqrSummary::from_sorted(&sorted).expect("non-empty");
    if summary.iqr() == 0.0 {
        return Ok(IqrOutcome {
            series: series.to_vec(),
            masked: 0,
            insufficient: false,
        });
    }
    let (lo, hi) = summary.bounds(k);
    let mut masked = 0;
    let out = series
        .iter()
        .map(|v| {
            if v.is_finite() && (*v < lo || *v > hi) {
                masked += 1;
                f64::NAN
            } else {
                *v
            }
        })
        .collect();
    Ok(IqrOutcome {
        series: out,
        masked,
        insufficient: false,
    })
}

/// Per-index IQR multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierPolicy {
    pub k_per_index: BTreeMap<IndexKind, f64>,
}

impl OutlierPolicy {
    pub fn new(k_per_index: BTreeMap<IndexKind, f64>) -> Result<Self> {
        let policy = OutlierPolicy { k_per_index };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        for (kind, k) in &self.k_per_index {
            if !(*k > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "IQR multiplier for {kind} must be > 0, got {k}"
                )));
            }
        }
        Ok(())
    }

    /// 2x for NDVI and EVI, 1.5x for LSWI.
    pub fn composite_default() -> Self {
        OutlierPolicy {
            k_per_index: [(IndexKind::Ndvi, 2.0), (IndexKind::Evi, 2.0), (IndexKind::Lswi, 1.5)]
                .into_iter()
                .collect(),
        }
    }

    pub fn multiplier(&self, kind: IndexKind) -> Option<f64> {
        self.k_per_index.get(&kind).copied()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TemporalFilterStats {
    pub masked_observations: usize,
    pub insufficient_pixels: usize,
}

/// Applies [`iqr_outlier_mask`] to every pixel's time series of an index cube.
pub fn filter_index_cube_temporal(cube: &IndexCube, k: f64) -> Result<(IndexCube, TemporalFilterStats)> {
    if !(k > 0.0) {
        return Err(Error::InvalidParameter(format!("IQR multiplier must be > 0, got {k}")));
    }
    let n = cube.grid.len();
    let results: Vec<IqrOutcome> = (0..n)
        .into_par_iter()
        .map(|p| iqr_outlier_mask(&cube.series(p), k))
        .collect::<Result<_>>()?;
    let mut out = cube.clone();
    let mut stats = TemporalFilterStats::default();
    for (p, r) in results.iter().enumerate() {
        stats.masked_observations += r.masked;
        if r.insufficient {
            stats.insufficient_pixels += 1;
        }
        out.set_series(p, &r.series);
    }
    if stats.insufficient_pixels > 0 {
        warn!(
            "{} {}: {} pixel series had fewer than {IQR_MIN_OBSERVATIONS} valid observations",
            cube.district, cube.kind, stats.insufficient_pixels
        );
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Band;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    /// 10x10 grid, two dates, every band set to `v`.
    fn cube(v: f32) -> ReflectanceCube {
        let grid = GeoGrid::new(0.0, 0.0, 10.0, 10, 10, "x").unwrap();
        ReflectanceCube::new(
            grid,
            "Nalgonda",
            vec![d("2019-01-05"), d("2019-01-10")],
            Band::ALL.to_vec(),
            vec![v; 2 * 5 * 100],
            f32::NAN,
        )
        .unwrap()
    }

    fn qa_with_cloudy(cube: &ReflectanceCube, cloudy: [usize; 2], bit: u8) -> Vec<QaPlane> {
        cube.dates()
            .iter()
            .zip(cloudy)
            .map(|(date, n)| {
                let mut values = vec![0u16; 100];
                for v in values.iter_mut().take(n) {
                    *v = 1 << bit;
                }
                QaPlane {
                    date: *date,
                    grid: cube.grid().clone(),
                    values,
                }
            })
            .collect()
    }

    #[test]
    fn drops_only_dates_exceeding_threshold() {
        let c = cube(0.2);
        let qa = qa_with_cloudy(&c, [85, 80], 10);
        let out = drop_cloudy_scenes(&c, &qa, 0.8, &QaConfig::default()).unwrap();
        assert_eq!(out.cube.dates(), &[d("2019-01-10")]);
        assert_eq!(out.dropped.len(), 1);
        assert!((out.dropped[0].1 - 0.85).abs() < 1e-12);
        assert_eq!(out.qa.len(), 1);
    }

    #[test]
    fn cloud_free_cube_is_unchanged() {
        let c = cube(0.2);
        let qa = qa_with_cloudy(&c, [0, 0], 10);
        let out = drop_cloudy_scenes(&c, &qa, 0.8, &QaConfig::default()).unwrap();
        assert_eq!(out.cube, c);
        assert_eq!(mask_cloud_pixels(&c, &qa, &QaConfig::default()).unwrap(), c);
    }

    #[test]
    fn all_dates_dropped_is_an_error() {
        let c = cube(0.2);
        let qa = qa_with_cloudy(&c, [100, 90], 11);
        assert!(matches!(
            drop_cloudy_scenes(&c, &qa, 0.8, &QaConfig::default()),
            Err(Error::EmptyCube { .. })
        ));
        assert!(drop_cloudy_scenes(&c, &qa, 0.0, &QaConfig::default()).is_err());
    }

    #[test]
    fn cloud_fraction_ignores_nodata_pixels() {
        let mut c = cube(0.2);
        // half the pixels of date 0 are nodata in every band
        for b in 0..5 {
            for v in c.plane_mut(0, b).unwrap().iter_mut().skip(50) {
                *v = f32::NAN;
            }
        }
        let qa = qa_with_cloudy(&c, [45, 0], 10);
        let f = cloud_fractions(&c, &qa, &QaConfig::default()).unwrap();
        assert!((f[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn cloud_and_cirrus_pixels_become_nodata() {
        let c = cube(0.2);
        for bit in [10, 11] {
            let qa = qa_with_cloudy(&c, [3, 0], bit);
            let out = mask_cloud_pixels(&c, &qa, &QaConfig::default()).unwrap();
            for b in 0..5 {
                assert!(out.get(0, b, 0, 2).unwrap().is_nan());
                assert_eq!(out.get(0, b, 0, 3).unwrap(), 0.2);
                assert_eq!(out.get(1, b, 0, 0).unwrap(), 0.2);
            }
        }
        // an unrelated bit is ignored
        let qa = qa_with_cloudy(&c, [3, 0], 3);
        assert_eq!(mask_cloud_pixels(&c, &qa, &QaConfig::default()).unwrap(), c);
    }

    #[test]
    fn misaligned_qa_is_rejected() {
        let c = cube(0.2);
        let mut qa = qa_with_cloudy(&c, [0, 0], 10);
        qa.pop();
        assert!(mask_cloud_pixels(&c, &qa, &QaConfig::default()).is_err());
    }

    #[test]
    fn normalization_examples() {
        let mut c = cube(5000.0);
        c.plane_mut(0, 0).unwrap()[1] = 12000.0;
        c.plane_mut(0, 0).unwrap()[2] = f32::NAN;
        let n = normalize_reflectance(&c, DEFAULT_SCALE).unwrap();
        assert_eq!(n.get(0, 0, 0, 0).unwrap(), 0.5);
        assert_eq!(n.get(0, 0, 0, 1).unwrap(), 1.0);
        assert!(n.get(0, 0, 0, 2).unwrap().is_nan());
        assert!(normalize_reflectance(&c, 0.0).is_err());
        assert!(normalize_reflectance(&c, -1.0).is_err());
    }

    #[test]
    fn iqr_masks_the_high_outlier() {
        let s = [0.2, 0.21, 0.22, 0.23, 0.24, 0.25, 0.95];
        let out = iqr_outlier_mask(&s, 2.0).unwrap();
        assert_eq!(out.masked, 1);
        assert!(out.series[6].is_nan());
        assert_eq!(&out.series[..6], &s[..6]);
    }

    #[test]
    fn iqr_masks_low_outliers_too() {
        let s = [0.5, 0.49, 0.51, 0.52, 0.48, 0.5, 0.01, 0.53];
        let out = iqr_outlier_mask(&s, 2.0).unwrap();
        assert_eq!(out.masked, 1);
        assert!(out.series[6].is_nan());
    }

    #[test]
    fn iqr_degenerate_cases() {
        let out = iqr_outlier_mask(&[0.3; 10], 2.0).unwrap();
        assert_eq!(out.masked, 0);
        assert!(!out.insufficient);
        let out = iqr_outlier_mask(&[0.3, f64::NAN, 0.9, 0.1], 2.0).unwrap();
        assert!(out.insufficient);
        assert!(iqr_outlier_mask(&[0.3; 10], 0.0).is_err());
    }

    #[test]
    fn qa_directory_round_trip() {
        let c = cube(0.2);
        let qa = qa_with_cloudy(&c, [7, 0], 11);
        let dir = tempfile::tempdir().unwrap();
        write_qa(&qa, dir.path(), "Nalgonda").unwrap();
        assert_eq!(read_qa(dir.path()).unwrap(), qa);
    }
}
