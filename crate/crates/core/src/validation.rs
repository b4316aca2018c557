//! Accuracy assessment, area estimation and reconciliation with official statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::district::normalize_district_name;
use crate::error::{Error, Result};
use crate::raster::BinaryMask;
use crate::reference::{PaddyClass, RasterizedPolygon};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_PADDY_WEIGHT: f64 = 1.5;
pub const MOE_METHOD: &str = "normal approximation, 95% (1.96 * sqrt(OA * (1 - OA) / N))";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FieldSizeCategory {
    Tiny,
    Small,
    Medium,
    Large,
}

impl FieldSizeCategory {
    pub const ALL: [FieldSizeCategory; 4] = [
        FieldSizeCategory::Tiny,
        FieldSizeCategory::Small,
        FieldSizeCategory::Medium,
        FieldSizeCategory::Large,
    ];

    /// Lower-inclusive hectare classes: `<0.2`, `<0.8`, `<4.0`, rest.
    pub fn from_area_ha(ha: f64) -> Result<Self> {
        if !(ha > 0.0) || !ha.is_finite() {
            return Err(Error::InvalidParameter(format!("field area must be > 0 ha, got {ha}")));
        }
        Ok(if ha < 0.2 {
            FieldSizeCategory::Tiny
        } else if ha < 0.8 {
            FieldSizeCategory::Small
        } else if ha < 4.0 {
            FieldSizeCategory::Medium
        } else {
            FieldSizeCategory::Large
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            FieldSizeCategory::Tiny => "TINY",
            FieldSizeCategory::Small => "SMALL",
            FieldSizeCategory::Medium => "MEDIUM",
            FieldSizeCategory::Large => "LARGE",
        }
    }
}

impl fmt::Display for FieldSizeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Paddy-positive confusion counts. Counts are real-valued so weighted tallies are allowed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    pub tn: f64,
}

impl ConfusionMatrix {
    pub fn new(tp: f64, fp: f64, fn_: f64, tn: f64) -> Result<Self> {
        for v in [tp, fp, fn_, tn] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "confusion count {v} is not a non-negative number"
                )));
            }
        }
        Ok(ConfusionMatrix { tp, fp, fn_, tn })
    }

    pub fn record(&mut self, truth: PaddyClass, predicted: PaddyClass) {
        match (truth, predicted) {
            (PaddyClass::Paddy, PaddyClass::Paddy) => self.tp += 1.0,
            (PaddyClass::Paddy, PaddyClass::NonPaddy) => self.fn_ += 1.0,
            (PaddyClass::NonPaddy, PaddyClass::Paddy) => self.fp += 1.0,
            (PaddyClass::NonPaddy, PaddyClass::NonPaddy) => self.tn += 1.0,
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn total(&self) -> f64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Undefined ratios are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub overall_accuracy: f64,
    pub balanced_accuracy: Option<f64>,
    pub kappa: Option<f64>,
    pub f1: Option<f64>,
    pub producer_accuracy: Option<f64>,
    pub user_accuracy: Option<f64>,
    pub margin_of_error: f64,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricSet> {
    let n = cm.total();
    if !(n > 0.0) {
        return Err(Error::EmptyMatrix);
    }
    let oa = (cm.tp + cm.tn) / n;
    let pa = ratio(cm.tp, cm.tp + cm.fn_);
    let ua = ratio(cm.tp, cm.tp + cm.fp);
    let specificity = ratio(cm.tn, cm.tn + cm.fp);
    let f1 = match (pa, ua) {
        (Some(p), Some(u)) if p + u > 0.0 => Some(2.0 * p * u / (p + u)),
        _ => None,
    };
    let balanced = match (pa, specificity) {
        (Some(p), Some(s)) => Some((p + s) / 2.0),
        _ => None,
    };
    let pe = ((cm.tp + cm.fp) * (cm.tp + cm.fn_) + (cm.fn_ + cm.tn) * (cm.fp + cm.tn)) / (n * n);
    let kappa = if pe < 1.0 { Some((oa - pe) / (1.0 - pe)) } else { None };
    Ok(MetricSet {
        overall_accuracy: oa,
        balanced_accuracy: balanced,
        kappa,
        f1,
        producer_accuracy: pa,
        user_accuracy: ua,
        margin_of_error: 1.96 * (oa * (1.0 - oa) / n).sqrt(),
    })
}

pub fn area_ha(ones: usize, pixel_size_m: f64) -> f64 {
    ones as f64 * pixel_size_m * pixel_size_m / 10_000.0
}

pub fn area_from_mask(mask: &BinaryMask) -> f64 {
    area_ha(mask.count_ones(), mask.grid.pixel_size)
}

// ------------------------------------------------------------------ sampling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub polygon_id: String,
    pub district: String,
    pub category: FieldSizeCategory,
    pub row: usize,
    pub col: usize,
    pub x: f64,
    pub y: f64,
    pub truth: Option<PaddyClass>,
    pub predicted: Option<PaddyClass>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub total_points: usize,
    pub paddy_weight: f64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan {
            total_points: 1000,
            paddy_weight: DEFAULT_PADDY_WEIGHT,
        }
    }
}

/// Largest-remainder apportionment of `total` by `weights`; ties go to the earlier entry.
pub fn allocate(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0) {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|a, b| {
        let (ra, rb) = (exact[*a] - exact[*a].floor(), exact[*b] - exact[*b].floor());
        rb.total_cmp(&ra).then(a.cmp(b))
    });
    let assigned: usize = counts.iter().sum();
    for i in order.into_iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Draws points from reference pixels, stratified by (field-size category, class).
///
/// Each stratum's share is proportional to its reference area, with paddy strata
/// up-weighted by `plan.paddy_weight`. Pixels are drawn without replacement.
pub fn stratify_samples(
    refs: &[RasterizedPolygon],
    mask: &BinaryMask,
    plan: &SamplingPlan,
    seed: u64,
) -> Result<Vec<ValidationPoint>> {
    if !(plan.paddy_weight > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "paddy weight must be > 0, got {}",
            plan.paddy_weight
        )));
    }
    let mut strata: BTreeMap<(FieldSizeCategory, PaddyClass), Vec<(usize, usize)>> = BTreeMap::new();
    let mut areas: BTreeMap<(FieldSizeCategory, PaddyClass), f64> = BTreeMap::new();
    for (pi, r) in refs.iter().enumerate() {
        let key = (r.category, r.polygon.class);
        *areas.entry(key).or_default() += r.polygon.area_ha;
        let pool = strata.entry(key).or_default();
        pool.extend(r.pixels.iter().map(|p| (pi, *p)));
    }
    let keys: Vec<_> = FieldSizeCategory::ALL
        .iter()
        .flat_map(|c| [PaddyClass::Paddy, PaddyClass::NonPaddy].map(|k| (*c, k)))
        .collect();
    for k in &keys {
        if !strata.contains_key(k) {
            warn!("stratum {}/{} has no reference pixels; skipped", k.0, k.1);
        }
    }
    let present: Vec<_> = keys.into_iter().filter(|k| strata.contains_key(k)).collect();
    let weights: Vec<f64> = present
        .iter()
        .map(|k| {
            let w = if k.1 == PaddyClass::Paddy {
                plan.paddy_weight
            } else {
                1.0
            };
            areas[k] * w
        })
        .collect();
    let counts = allocate(plan.total_points, &weights);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = &mask.grid;
    let mut points = Vec::new();
    for (key, want) in present.iter().zip(counts) {
        let pool = &strata[key];
        let n = if want > pool.len() {
            warn!(
                "stratum {}/{} has {} pixels for {want} points; all used",
                key.0,
                key.1,
                pool.len()
            );
            pool.len()
        } else {
            want
        };
        let mut picked = sample(&mut rng, pool.len(), n).into_vec();
        picked.sort_unstable();
        for i in picked {
            let (pi, pixel) = pool[i];
            let (row, col) = (pixel / grid.width, pixel % grid.width);
            let (x, y) = grid.pixel_center(row, col);
            let r = &refs[pi];
            points.push(ValidationPoint {
                polygon_id: r.polygon.id.clone(),
                district: r.polygon.district.clone(),
                category: r.category,
                row,
                col,
                x,
                y,
                truth: Some(r.polygon.class),
                predicted: Some(PaddyClass::from_mask_value(mask.values()[pixel])),
            });
        }
    }
    Ok(points)
}

/// Tallies points per (district, category).
pub fn confusion(points: &[ValidationPoint]) -> Result<BTreeMap<(String, FieldSizeCategory), ConfusionMatrix>> {
    let mut out: BTreeMap<(String, FieldSizeCategory), ConfusionMatrix> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        let (Some(t), Some(pr)) = (p.truth, p.predicted) else {
            return Err(Error::UnlabeledPoint(i));
        };
        out.entry((p.district.clone(), p.category)).or_default().record(t, pr);
    }
    Ok(out)
}

// ------------------------------------------------------------- area stats

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistrictAreaDiff {
    pub district: String,
    pub mapped_ha: f64,
    pub official_ha: f64,
    pub diff_ha: f64,
    pub diff_percent: f64,
}

/// Undefined for zero-variance inputs: `pearson_r`, `r2`, `slope`, `intercept`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaStats {
    pub n: usize,
    pub r2: Option<f64>,
    pub pearson_r: Option<f64>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub rmse_ha: f64,
    pub mae_ha: f64,
    pub bias_ha: f64,
    pub per_district: Vec<DistrictAreaDiff>,
}

pub fn diff_percent(mapped: f64, official: f64) -> f64 {
    100.0 * (mapped - official) / official
}

fn normalize_keyed(values: &[(String, f64)], what: &str) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    let mut unknown = Vec::new();
    for (name, v) in values {
        match normalize_district_name(name) {
            Ok(c) => {
                if out.insert(c.clone(), *v).is_some() {
                    return Err(Error::InvalidParameter(format!("{what}: district {c} listed twice")));
                }
            }
            Err(_) => unknown.push(name.clone()),
        }
    }
    if !unknown.is_empty() {
        return Err(Error::UnmatchedDistricts(unknown));
    }
    Ok(out)
}

/// Regresses mapped on official area over the districts present in both inputs.
///
/// Every mapped district must resolve and have an official figure; official-only
/// districts are ignored.
pub fn area_stats(mapped: &[(String, f64)], official: &[(String, f64)]) -> Result<AreaStats> {
    let m = normalize_keyed(mapped, "mapped areas")?;
    let o = normalize_keyed(official, "official areas")?;
    let missing: Vec<String> = m.keys().filter(|k| !o.contains_key(*k)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::UnmatchedDistricts(missing));
    }
    let pairs: Vec<(String, f64, f64)> = m.iter().map(|(k, v)| (k.clone(), *v, o[k])).collect();
    let n = pairs.len();
    if n < 3 {
        return Err(Error::InsufficientSamples {
            needed: 3,
            have: n,
            context: "matched districts for area statistics".into(),
        });
    }
    for (d, mv, ov) in &pairs {
        if !(ov > &0.0) || !mv.is_finite() || *mv < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "{d}: mapped {mv} ha / official {ov} ha is not usable"
            )));
        }
    }
    let nf = n as f64;
    let mean_x = pairs.iter().map(|p| p.2).sum::<f64>() / nf;
    let mean_y = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pairs.iter().map(|p| (p.2 - mean_x).powi(2)).sum();
    let syy: f64 = pairs.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.2 - mean_x) * (p.1 - mean_y)).sum();
    let slope = (sxx > 0.0).then(|| sxy / sxx);
    let intercept = slope.map(|s| mean_y - s * mean_x);
    let pearson_r = (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt());
    let diffs: Vec<f64> = pairs.iter().map(|p| p.1 - p.2).collect();
    Ok(AreaStats {
        n,
        r2: pearson_r.map(|r| r * r),
        pearson_r,
        slope,
        intercept,
        rmse_ha: (diffs.iter().map(|d| d * d).sum::<f64>() / nf).sqrt(),
        mae_ha: diffs.iter().map(|d| d.abs()).sum::<f64>() / nf,
        bias_ha: diffs.iter().sum::<f64>() / nf,
        per_district: pairs
            .into_iter()
            .map(|(district, mapped_ha, official_ha)| DistrictAreaDiff {
                district,
                mapped_ha,
                official_ha,
                diff_ha: mapped_ha - official_ha,
                diff_percent: diff_percent(mapped_ha, official_ha),
            })
            .collect(),
    })
}

// ------------------------------------------------------------ official CSV

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OfficialSource {
    #[serde(rename = "DES")]
    Des,
    #[serde(rename = "TDA")]
    Tda,
}

impl OfficialSource {
    pub fn name(self) -> &'static str {
        match self {
            OfficialSource::Des => "DES",
            OfficialSource::Tda => "TDA",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfficialRecord {
    pub district: String,
    pub official_ha: f64,
    pub source: OfficialSource,
}

/// Reads `district,official_ha,source` rows, resolving district names.
pub fn read_official_csv(path: &Path) -> Result<Vec<OfficialRecord>> {
    let ctx = path.display().to_string();
    let csv_err = |e| Error::Csv {
        context: ctx.clone(),
        source: e,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let rows: Vec<OfficialRecord> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)?;
    let mut unknown = Vec::new();
    let mut out = Vec::with_capacity(rows.len());
    for mut r in rows {
        match normalize_district_name(&r.district) {
            Ok(c) => {
                r.district = c;
                out.push(r);
            }
            Err(_) => unknown.push(r.district),
        }
    }
    if !unknown.is_empty() {
        return Err(Error::UnmatchedDistricts(unknown));
    }
    Ok(out)
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: FieldSizeCategory,
    pub points: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: Option<MetricSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfficialComparison {
    pub official_ha: f64,
    pub diff_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistrictReport {
    pub district: String,
    pub area_ha: f64,
    pub points: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: Option<MetricSet>,
    pub categories: Vec<CategoryReport>,
    pub official: BTreeMap<String, OfficialComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateReport {
    pub area_ha: f64,
    pub points: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: Option<MetricSet>,
    pub categories: Vec<CategoryReport>,
    /// Keyed by source; totals cover the districts with an official figure.
    pub official: BTreeMap<String, OfficialComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub margin_of_error_method: String,
    pub field_size_classes: String,
    pub points_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub schema_version: u32,
    pub metadata: ReportMetadata,
    pub districts: Vec<DistrictReport>,
    pub state: StateReport,
    /// Area regression per official source.
    pub area_stats: BTreeMap<String, AreaStats>,
}

#[derive(Debug, Clone, Default)]
pub struct ReportInputs {
    /// Mapped paddy area per district.
    pub mapped_ha: Vec<(String, f64)>,
    pub points: Vec<ValidationPoint>,
    pub official: Vec<OfficialRecord>,
    /// Published state total to compare against, with a label.
    pub state_official: Option<(String, f64)>,
    pub seed: Option<u64>,
}

fn category_reports(cms: &BTreeMap<FieldSizeCategory, ConfusionMatrix>) -> Result<Vec<CategoryReport>> {
    cms.iter()
        .map(|(c, cm)| {
            Ok(CategoryReport {
                category: *c,
                points: cm.total() as usize,
                confusion: *cm,
                metrics: if cm.total() > 0.0 { Some(metrics(cm)?) } else { None },
            })
        })
        .collect()
}

/// Assembles per-district, per-category and state-level results.
pub fn build_report(inputs: &ReportInputs) -> Result<ValidationReport> {
    let mapped = normalize_keyed(&inputs.mapped_ha, "mapped areas")?;
    let tallies = confusion(&inputs.points)?;
    let stray: Vec<String> = tallies
        .keys()
        .map(|(d, _)| d.clone())
        .filter(|d| !mapped.contains_key(d))
        .collect();
    if !stray.is_empty() {
        return Err(Error::UnmatchedDistricts(stray));
    }

    let mut by_source: BTreeMap<OfficialSource, Vec<(String, f64)>> = BTreeMap::new();
    for r in &inputs.official {
        by_source
            .entry(r.source)
            .or_default()
            .push((r.district.clone(), r.official_ha));
    }
    let mut official_maps: BTreeMap<OfficialSource, BTreeMap<String, f64>> = BTreeMap::new();
    for (src, rows) in &by_source {
        official_maps.insert(*src, normalize_keyed(rows, src.name())?);
    }

    let mut districts = Vec::with_capacity(mapped.len());
    let mut state_cm = ConfusionMatrix::default();
    let mut state_cats: BTreeMap<FieldSizeCategory, ConfusionMatrix> = BTreeMap::new();
    for (district, area) in &mapped {
        let mut cm = ConfusionMatrix::default();
        let mut cats = BTreeMap::new();
        for ((d, c), m) in tallies.range((district.clone(), FieldSizeCategory::Tiny)..) {
            if d != district {
                break;
            }
            cm.merge(m);
            cats.insert(*c, *m);
            state_cats.entry(*c).or_default().merge(m);
        }
        state_cm.merge(&cm);
        let official = official_maps
            .iter()
            .filter_map(|(src, m)| {
                m.get(district).map(|o| {
                    (
                        src.name().to_string(),
                        OfficialComparison {
                            official_ha: *o,
                            diff_percent: diff_percent(*area, *o),
                        },
                    )
                })
            })
            .collect();
        districts.push(DistrictReport {
            district: district.clone(),
            area_ha: *area,
            points: cm.total() as usize,
            confusion: cm,
            metrics: if cm.total() > 0.0 { Some(metrics(&cm)?) } else { None },
            categories: category_reports(&cats)?,
            official,
        });
    }

    let state_area: f64 = mapped.values().sum();
    let mut state_official = BTreeMap::new();
    for (src, m) in &official_maps {
        let (mut official, mut covered) = (0.0, 0.0);
        for (d, o) in m {
            if let Some(a) = mapped.get(d) {
                official += o;
                covered += a;
            }
        }
        if official > 0.0 {
            state_official.insert(
                src.name().to_string(),
                OfficialComparison {
                    official_ha: official,
                    diff_percent: diff_percent(covered, official),
                },
            );
        }
    }
    if let Some((label, total)) = &inputs.state_official {
        if !(*total > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "state official total {total} must be > 0"
            )));
        }
        state_official.insert(
            label.clone(),
            OfficialComparison {
                official_ha: *total,
                diff_percent: diff_percent(state_area, *total),
            },
        );
    }

    let mut area_stats_map = BTreeMap::new();
    for (src, rows) in &by_source {
        let mapped_rows: Vec<(String, f64)> = mapped
            .iter()
            .filter(|(d, _)| official_maps[src].contains_key(*d))
            .map(|(d, a)| (d.clone(), *a))
            .collect();
        if mapped_rows.len() >= 3 {
            area_stats_map.insert(src.name().to_string(), area_stats(&mapped_rows, rows)?);
        } else {
            warn!(
                "{}: fewer than 3 matched districts; area regression skipped",
                src.name()
            );
        }
    }

    Ok(ValidationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        metadata: ReportMetadata {
            margin_of_error_method: MOE_METHOD.to_string(),
            field_size_classes: "TINY <0.2 ha, SMALL <0.8 ha, MEDIUM <4.0 ha, LARGE >=4.0 ha".to_string(),
            points_seed: inputs.seed,
        },
        districts,
        state: StateReport {
            area_ha: state_area,
            points: state_cm.total() as usize,
            confusion: state_cm,
            metrics: if state_cm.total() > 0.0 {
                Some(metrics(&state_cm)?)
            } else {
                None
            },
            categories: category_reports(&state_cats)?,
            official: state_official,
        },
        area_stats: area_stats_map,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Flat table with one row per district and a final `STATE` row.
pub fn report_csv(report: &ValidationReport) -> String {
    let mut out = String::from("district,oa,kappa,f1,pa,ua,area_ha,points,moe\n");
    let mut row = |name: &str, m: Option<&MetricSet>, area: f64, points: usize| {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.4},{},{}\n",
            name,
            cell(m.map(|m| m.overall_accuracy)),
            cell(m.and_then(|m| m.kappa)),
            cell(m.and_then(|m| m.f1)),
            cell(m.and_then(|m| m.producer_accuracy)),
            cell(m.and_then(|m| m.user_accuracy)),
            area,
            points,
            cell(m.map(|m| m.margin_of_error)),
        ));
    };
    for d in &report.districts {
        row(&d.district, d.metrics.as_ref(), d.area_ha, d.points);
    }
    row(
        "STATE",
        report.state.metrics.as_ref(),
        report.state.area_ha,
        report.state.points,
    );
    out
}

/// One row per (district, category), plus state rows.
pub fn category_csv(report: &ValidationReport) -> String {
    let mut out = String::from("district,category,points,tp,fp,fn,tn,oa,f1\n");
    let blocks = report
        .districts
        .iter()
        .map(|d| (d.district.as_str(), &d.categories))
        .chain([("STATE", &report.state.categories)]);
    for (name, cats) in blocks {
        for c in cats {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                name,
                c.category,
                c.points,
                c.confusion.tp,
                c.confusion.fp,
                c.confusion.fn_,
                c.confusion.tn,
                cell(c.metrics.map(|m| m.overall_accuracy)),
                cell(c.metrics.and_then(|m| m.f1)),
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GeoGrid;
    use crate::reference::{rasterize_district, rectangle_polygon};

    #[test]
    fn category_boundaries_are_lower_inclusive() {
        use FieldSizeCategory::*;
        assert_eq!(FieldSizeCategory::from_area_ha(0.199).unwrap(), Tiny);
        assert_eq!(FieldSizeCategory::from_area_ha(0.2).unwrap(), Small);
        assert_eq!(FieldSizeCategory::from_area_ha(0.8).unwrap(), Medium);
        assert_eq!(FieldSizeCategory::from_area_ha(4.0).unwrap(), Large);
        assert!(FieldSizeCategory::from_area_ha(0.0).is_err());
    }

    #[test]
    fn kappa_hand_example() {
        let cm = ConfusionMatrix::new(40.0, 5.0, 10.0, 45.0).unwrap();
        let m = metrics(&cm).unwrap();
        assert!((m.overall_accuracy - 0.85).abs() < 1e-12);
        assert!((m.kappa.unwrap() - 0.70).abs() < 1e-12);
        assert!((m.producer_accuracy.unwrap() - 0.8).abs() < 1e-12);
        assert!((m.user_accuracy.unwrap() - 40.0 / 45.0).abs() < 1e-12);
        assert!((m.balanced_accuracy.unwrap() - 0.85).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_degenerate_matrices() {
        let m = metrics(&ConfusionMatrix::new(30.0, 0.0, 0.0, 70.0).unwrap()).unwrap();
        assert_eq!((m.overall_accuracy, m.kappa, m.f1), (1.0, Some(1.0), Some(1.0)));
        assert_eq!(m.margin_of_error, 0.0);
        let only_neg = metrics(&ConfusionMatrix::new(0.0, 0.0, 0.0, 10.0).unwrap()).unwrap();
        assert_eq!(only_neg.producer_accuracy, None);
        assert_eq!(only_neg.user_accuracy, None);
        assert_eq!(only_neg.f1, None);
        assert_eq!(only_neg.kappa, None);
        assert!(matches!(metrics(&ConfusionMatrix::default()), Err(Error::EmptyMatrix)));
        assert!(ConfusionMatrix::new(-1.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn f1_from_published_pa_ua() {
        // PA 0.858 and UA 0.991 as a weighted matrix
        let cm = ConfusionMatrix::new(1.0, (1.0 - 0.991) / 0.991, (1.0 - 0.858) / 0.858, 1.0).unwrap();
        let f1 = metrics(&cm).unwrap().f1.unwrap();
        assert!((f1 - 0.920).abs() < 0.0005);
    }

    #[test]
    fn area_examples() {
        let g = GeoGrid::new(0.0, 0.0, 10.0, 10, 10, "x").unwrap();
        assert_eq!(area_from_mask(&BinaryMask::filled(g.clone(), 1)), 1.0);
        assert_eq!(area_from_mask(&BinaryMask::filled(g, 0)), 0.0);
        assert_eq!(area_ha(8_657_400, 10.0), 86_574.0);
    }

    #[test]
    fn allocation_is_exact() {
        assert_eq!(allocate(10, &[1.0, 1.0]), vec![5, 5]);
        assert_eq!(allocate(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(allocate(7, &[0.0, 2.0]), vec![0, 7]);
        assert_eq!(allocate(5, &[]), Vec::<usize>::new());
    }

    fn sampling_fixture() -> (Vec<RasterizedPolygon>, BinaryMask) {
        let g = GeoGrid::new(0.0, 0.0, 10.0, 40, 40, "x").unwrap();
        let polys = vec![
            rectangle_polygon(&g, "p", "Nalgonda", PaddyClass::Paddy, (0, 20), (0, 20)),
            rectangle_polygon(&g, "n", "Nalgonda", PaddyClass::NonPaddy, (20, 40), (20, 40)),
        ];
        let refs = rasterize_district(&polys, "Nalgonda", &g).unwrap();
        let mut v = vec![0u8; 1600];
        for r in 0..20 {
            for c in 0..20 {
                v[r * 40 + c] = 1;
            }
        }
        (refs, BinaryMask::new(g, v).unwrap())
    }

    #[test]
    fn stratified_sampling_proportions_and_determinism() {
        let (refs, mask) = sampling_fixture();
        let equal = SamplingPlan {
            total_points: 100,
            paddy_weight: 1.0,
        };
        let pts = stratify_samples(&refs, &mask, &equal, 7).unwrap();
        let paddy = pts.iter().filter(|p| p.truth == Some(PaddyClass::Paddy)).count();
        assert_eq!((paddy, pts.len() - paddy), (50, 50));
        let doubled = SamplingPlan {
            total_points: 90,
            paddy_weight: 2.0,
        };
        let pts = stratify_samples(&refs, &mask, &doubled, 7).unwrap();
        let paddy = pts.iter().filter(|p| p.truth == Some(PaddyClass::Paddy)).count();
        assert_eq!((paddy, pts.len() - paddy), (60, 30));
        assert_eq!(stratify_samples(&refs, &mask, &doubled, 7).unwrap(), pts);
        assert_ne!(stratify_samples(&refs, &mask, &doubled, 8).unwrap(), pts);
        // mask agrees with truth everywhere
        assert!(pts.iter().all(|p| p.truth == p.predicted));
    }

    #[test]
    fn confusion_tally() {
        let mk = |t, p| ValidationPoint {
            polygon_id: "x".into(),
            district: "Nalgonda".into(),
            category: FieldSizeCategory::Tiny,
            row: 0,
            col: 0,
            x: 0.0,
            y: 0.0,
            truth: Some(t),
            predicted: Some(p),
        };
        use PaddyClass::*;
        let pts = vec![
            mk(Paddy, Paddy),
            mk(Paddy, Paddy),
            mk(Paddy, NonPaddy),
            mk(NonPaddy, NonPaddy),
            mk(NonPaddy, Paddy),
            mk(NonPaddy, NonPaddy),
            mk(NonPaddy, NonPaddy),
            mk(Paddy, Paddy),
            mk(Paddy, NonPaddy),
            mk(NonPaddy, NonPaddy),
        ];
        let cm = confusion(&pts).unwrap()[&("Nalgonda".to_string(), FieldSizeCategory::Tiny)];
        assert_eq!((cm.tp, cm.fn_, cm.fp, cm.tn), (3.0, 2.0, 1.0, 4.0));
        let mut bad = pts;
        bad[3].predicted = None;
        assert!(matches!(confusion(&bad), Err(Error::UnlabeledPoint(3))));
    }

    fn table6() -> (Vec<(String, f64)>, Vec<(String, f64)>) {
        let rows = [
            ("Nalgonda", 86_574.0, 86_191.0),
            ("Suryapet", 85_754.0, 82_472.0),
            ("Nizamabad", 75_612.0, 78_663.0),
            ("Khammam", 48_867.0, 46_292.0),
            ("Karimnagar", 43_052.0, 44_787.0),
        ];
        (
            rows.iter().map(|r| (r.0.to_string(), r.1)).collect(),
            rows.iter().map(|r| (r.0.to_string(), r.2)).collect(),
        )
    }

    #[test]
    fn area_stats_examples() {
        let (m, o) = table6();
        let s = area_stats(&m, &o).unwrap();
        let nal = s.per_district.iter().find(|d| d.district == "Nalgonda").unwrap();
        assert!((nal.diff_percent - 0.4444).abs() < 1e-3);
        let same = area_stats(&o, &o).unwrap();
        assert!((same.r2.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!((same.rmse_ha, same.bias_ha), (0.0, 0.0));
        assert!(s.rmse_ha >= s.mae_ha);
    }

    #[test]
    fn area_stats_errors() {
        let (m, o) = table6();
        let mut bad = m.clone();
        bad.push(("Atlantis".into(), 1.0));
        assert!(matches!(area_stats(&bad, &o), Err(Error::UnmatchedDistricts(v)) if v == vec!["Atlantis".to_string()]));
        let mut extra = m.clone();
        extra.push(("Jagitial".into(), 1.0));
        assert!(
            matches!(area_stats(&extra, &o), Err(Error::UnmatchedDistricts(v)) if v == vec!["Jagtial".to_string()])
        );
        assert!(area_stats(&m[..2], &o).is_err());
    }

    #[test]
    fn report_rollup_and_csv() {
        let (m, o) = table6();
        let official = o
            .iter()
            .map(|(d, v)| OfficialRecord {
                district: d.clone(),
                official_ha: *v,
                source: OfficialSource::Des,
            })
            .collect();
        let inputs = ReportInputs {
            mapped_ha: m.clone(),
            points: vec![],
            official,
            state_official: Some(("published".into(), 300_000.0)),
            seed: None,
        };
        let r = build_report(&inputs).unwrap();
        assert_eq!(r.districts.len(), 5);
        let total: f64 = m.iter().map(|x| x.1).sum();
        assert_eq!(r.state.area_ha, total);
        assert!(r.area_stats.contains_key("DES"));
        assert!(r.state.official.contains_key("published"));
        let csv = report_csv(&r);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.lines().last().unwrap().starts_with("STATE,"));
        assert_eq!(build_report(&inputs).unwrap(), r);
    }
}
