//! End-to-end classification of one district.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, info};
use rayon::prelude::*;
use serde::Serialize;

use super::combine::combine_stages;
use super::config::DistrictCalibration;
use super::refine::{exclude_landcover, exclude_water, focal_mode, ClassPlane};
use super::rules::apply_stage_rule;
use super::temporal::{tpa_filter, tsp_filter};
use crate::district::normalize_district_name;
use crate::error::{Error, Result};
use crate::indices::{align_to_coarsest, compute_index, IndexKind};
use crate::phenology::{build_stage_composite, dates_in_range, Stage, StageComposite};
use crate::preprocess::{filter_index_cube_temporal, iqr_outlier_mask, TemporalFilterStats};
use crate::raster::{BinaryMask, IndexCube, ReflectanceCube};
use crate::validation::area_from_mask;

/// Optional exclusion rasters, aligned with the cube grid.
#[derive(Debug, Clone, Default)]
pub struct ExclusionInputs {
    pub landcover: Option<ClassPlane>,
    pub water_permanent: Option<BinaryMask>,
    pub water_seasonal: Option<BinaryMask>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageDiagnostics {
    pub stage: Option<Stage>,
    pub rule_ones: usize,
    pub rule_nodata: usize,
    pub tsp_removed: usize,
    /// Pixels passed by TSP with fewer than two observations in the window.
    pub tsp_insufficient: usize,
    pub tpa_removed: usize,
    pub gated_ones: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationDiagnostics {
    pub district: String,
    pub dates: usize,
    pub effective_resolution_m: BTreeMap<IndexKind, f64>,
    pub temporal_outliers: BTreeMap<IndexKind, TemporalFilterStats>,
    /// Pixels removed by the spatial IQR filter, keyed `stage/index`.
    pub composite_outliers: BTreeMap<String, usize>,
    pub stages: Vec<StageDiagnostics>,
    pub tpa_failed: Option<usize>,
    pub combined_ones: usize,
    pub landcover_removed: Option<usize>,
    pub water_removed: usize,
    pub focal_changed: usize,
    pub final_ones: usize,
    pub final_area_ha: f64,
    pub skipped_exclusions: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Classification {
    /// Direct output of each stage rule.
    pub rule_masks: BTreeMap<Stage, BinaryMask>,
    /// Stage masks after the TSP and TPA gates.
    pub stage_masks: BTreeMap<Stage, BinaryMask>,
    pub combined: BinaryMask,
    pub excluded: BinaryMask,
    pub final_mask: BinaryMask,
    pub diagnostics: ClassificationDiagnostics,
}

/// Spatial IQR filter on a composite; masked pixels lose their observation count.
pub(crate) fn spatial_iqr(composite: &StageComposite, k: f64) -> Result<(StageComposite, usize)> {
    let out = iqr_outlier_mask(&composite.mean, k)?;
    let mut filtered = composite.clone();
    for (i, v) in out.series.iter().enumerate() {
        if v.is_nan() && composite.mean[i].is_finite() {
            filtered.count[i] = 0;
        }
    }
    filtered.mean = out.series;
    Ok((filtered, out.masked))
}

fn changed(a: &BinaryMask, b: &BinaryMask) -> usize {
    a.values().iter().zip(b.values()).filter(|(x, y)| x != y).count()
}

fn gate(mask: &mut BinaryMask, pass: &[bool]) -> Result<usize> {
    let mut removed = 0;
    let values: Vec<u8> = mask
        .values()
        .iter()
        .zip(pass)
        .map(|(v, ok)| {
            if *v == 1 && !ok {
                removed += 1;
                0
            } else {
                *v
            }
        })
        .collect();
    *mask = BinaryMask::new(mask.grid.clone(), values)?;
    Ok(removed)
}

/// Runs indices, composites, stage rules, TSP, TPA, stage combination, exclusions
/// and focal smoothing for one district.
pub fn classify_district(
    cube: &ReflectanceCube,
    calib: &DistrictCalibration,
    exclusions: &ExclusionInputs,
) -> Result<Classification> {
    calib.validate().map_err(|e| e.in_stage("calibration"))?;
    let cube_district = normalize_district_name(cube.district()).map_err(|e| e.in_stage("calibration"))?;
    if cube_district != calib.district {
        return Err(Error::InvalidCalibration(format!(
            "calibration for {} cannot be applied to a {} cube",
            calib.district, cube_district
        )));
    }

    let area_rules: Vec<_> = calib.rules.iter().collect();
    let mut needed: BTreeSet<IndexKind> = area_rules.iter().flat_map(|r| r.referenced_indices()).collect();
    needed.insert(IndexKind::Ndvi);

    let mut index_cubes: BTreeMap<IndexKind, IndexCube> = BTreeMap::new();
    let mut temporal_outliers = BTreeMap::new();
    let mut effective_resolution_m = BTreeMap::new();
    for k in &needed {
        let raw = compute_index(cube, *k).map_err(|e| e.in_stage("indices"))?;
        effective_resolution_m.insert(*k, align_to_coarsest(cube, *k).meters);
        let filtered = match calib.outlier.temporal_k {
            Some(tk) => {
                let (f, stats) = filter_index_cube_temporal(&raw, tk).map_err(|e| e.in_stage("outliers"))?;
                temporal_outliers.insert(*k, stats);
                f
            }
            None => raw,
        };
        index_cubes.insert(*k, filtered);
    }
    let ndvi = &index_cubes[&IndexKind::Ndvi];

    // Composites: raw ones feed TPA, spatially filtered ones feed the stage rules.
    let mut composite_stages: BTreeSet<Stage> = calib.rules.iter().map(|r| r.stage).collect();
    if calib.tpa.is_some() {
        composite_stages.extend([Stage::LandPreparation, Stage::Reproductive, Stage::Ripening]);
    }
    let mut raw_composites: BTreeMap<Stage, BTreeMap<IndexKind, StageComposite>> = BTreeMap::new();
    let mut filtered_composites: BTreeMap<Stage, BTreeMap<IndexKind, StageComposite>> = BTreeMap::new();
    let mut composite_outliers = BTreeMap::new();
    for stage in &composite_stages {
        let indices: BTreeSet<IndexKind> = match calib.rule(*stage) {
            Some(r) => r.referenced_indices().into_iter().chain([IndexKind::Ndvi]).collect(),
            None => [IndexKind::Ndvi].into_iter().collect(),
        };
        for k in indices {
            let c = build_stage_composite(&index_cubes[&k], &calib.stage_windows, *stage)
                .map_err(|e| e.in_stage("composites"))?;
            let f = match calib.outlier.composite_k.get(&k) {
                Some(ck) => {
                    let (f, n) = spatial_iqr(&c, *ck).map_err(|e| e.in_stage("composites"))?;
                    composite_outliers.insert(format!("{stage}/{k}"), n);
                    f
                }
                None => c.clone(),
            };
            raw_composites.entry(*stage).or_default().insert(k, c);
            filtered_composites.entry(*stage).or_default().insert(k, f);
        }
    }

    let mut rule_masks = BTreeMap::new();
    for rule in &calib.rules {
        let m = apply_stage_rule(&filtered_composites[&rule.stage], rule).map_err(|e| e.in_stage("rules"))?;
        rule_masks.insert(rule.stage, m);
    }

    let n = cube.grid().len();
    let mut stage_masks = rule_masks.clone();
    let mut stage_diags: BTreeMap<Stage, StageDiagnostics> = BTreeMap::new();
    for (stage, m) in &rule_masks {
        stage_diags.insert(
            *stage,
            StageDiagnostics {
                stage: Some(*stage),
                rule_ones: m.count_ones(),
                rule_nodata: m.values().iter().filter(|v| **v == crate::raster::MASK_NODATA).count(),
                ..Default::default()
            },
        );
    }

    for (stage, mask) in stage_masks.iter_mut() {
        let Some(sigma_max) = calib.tsp.sigma_max(*stage) else {
            continue;
        };
        let idx = dates_in_range(&ndvi.dates, calib.stage_windows.get(*stage));
        let outcomes: Vec<_> = (0..n)
            .into_par_iter()
            .map(|p| {
                let series: Vec<f64> = idx.iter().map(|d| ndvi.values[d * n + p]).collect();
                tsp_filter(&series, sigma_max)
            })
            .collect();
        let pass: Vec<bool> = outcomes.iter().map(|o| o.pass).collect();
        let diag = stage_diags.get_mut(stage).expect("diagnostics for every rule");
        diag.tsp_insufficient = outcomes.iter().filter(|o| o.insufficient).count();
        diag.tsp_removed = gate(mask, &pass).map_err(|e| e.in_stage("tsp"))?;
    }

    let mut tpa_failed = None;
    if let Some(tpa) = &calib.tpa {
        let plane = |s: Stage| &raw_composites[&s][&IndexKind::Ndvi].mean;
        let (early, peak, late) = (
            plane(Stage::LandPreparation),
            plane(Stage::Reproductive),
            plane(Stage::Ripening),
        );
        let pass: Vec<bool> = (0..n).map(|p| tpa_filter(early[p], peak[p], late[p], tpa)).collect();
        tpa_failed = Some(pass.iter().filter(|ok| !**ok).count());
        for stage in Stage::AREA_STAGES {
            let mask = stage_masks.get_mut(&stage).expect("area stage rule present");
            let removed = gate(mask, &pass).map_err(|e| e.in_stage("tpa"))?;
            stage_diags.get_mut(&stage).expect("diagnostics").tpa_removed = removed;
        }
    }
    for (stage, m) in &stage_masks {
        stage_diags.get_mut(stage).expect("diagnostics").gated_ones = m.count_ones();
    }

    let combined = combine_stages(&stage_masks, calib.combination).map_err(|e| e.in_stage("combine"))?;

    let mut skipped = Vec::new();
    let mut excluded = combined.clone();
    let mut landcover_removed = None;
    match &exclusions.landcover {
        Some(lc) => {
            let next = exclude_landcover(&excluded, lc, &calib.exclusions.landcover_classes)
                .map_err(|e| e.in_stage("exclusions"))?;
            landcover_removed = Some(excluded.count_ones() - next.count_ones());
            excluded = next;
        }
        None => skipped.push("landcover".to_string()),
    }
    if exclusions.water_permanent.is_none() {
        skipped.push("water_permanent".to_string());
    }
    if exclusions.water_seasonal.is_none() && calib.exclusions.water_seasonal {
        skipped.push("water_seasonal".to_string());
    }
    let before_water = excluded.count_ones();
    excluded = exclude_water(
        &excluded,
        exclusions.water_permanent.as_ref(),
        exclusions.water_seasonal.as_ref(),
        calib.exclusions.water_seasonal,
    )
    .map_err(|e| e.in_stage("exclusions"))?;
    let water_removed = before_water - excluded.count_ones();
    for s in &skipped {
        info!("{}: {s} exclusion raster not supplied; step skipped", calib.district);
    }

    let final_mask = focal_mode(&excluded, calib.focal_radius_m).map_err(|e| e.in_stage("focal"))?;
    let final_ones = final_mask.count_ones();
    debug!("{}: {final_ones} paddy pixels", calib.district);

    let diagnostics = ClassificationDiagnostics {
        district: calib.district.clone(),
        dates: cube.dates().len(),
        effective_resolution_m,
        temporal_outliers,
        composite_outliers,
        stages: stage_diags.into_values().collect(),
        tpa_failed,
        combined_ones: combined.count_ones(),
        landcover_removed,
        water_removed,
        focal_changed: changed(&excluded, &final_mask),
        final_ones,
        final_area_ha: area_from_mask(&final_mask),
        skipped_exclusions: skipped,
    };
    Ok(Classification {
        rule_masks,
        stage_masks,
        combined,
        excluded,
        final_mask,
        diagnostics,
    })
}
