//! Deterministic synthetic reflectance cubes with rice and confounder fields.

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::classifier::{
    CombinationPolicy, DistrictCalibration, ExclusionConfig, Method, OutlierConfig, RangeBound, StageRule, TpaParams,
    TspParams, CALIBRATION_SCHEMA_VERSION,
};
use crate::error::{Error, Result};
use crate::indices::IndexKind;
use crate::phenology::{DateRange, Stage, StageWindows};
use crate::raster::{Band, GeoGrid, ReflectanceCube};
use crate::reference::{rectangle_polygon, PaddyClass, ReferencePolygon};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub district: String,
    pub start: NaiveDate,
    pub step_days: u64,
    pub n_dates: usize,
    pub pixel_size: f64,
    /// Standard deviation of per-observation index noise.
    pub noise_sd: f64,
    /// Half-width of the uniform per-field jitter of green-up and senescence days.
    pub jitter_days: f64,
    /// Shifts every rice and wetland trajectory later by this many days.
    pub shift_days: f64,
    /// Fraction of each pixel's reflectance taken from its four neighbors.
    pub psf_mix: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            district: "Nalgonda".into(),
            start: NaiveDate::from_ymd_opt(2018, 12, 20).expect("valid date"),
            step_days: 5,
            n_dates: 33,
            pixel_size: 10.0,
            noise_sd: 0.01,
            jitter_days: 5.0,
            shift_days: 0.0,
            psf_mix: 0.0,
            seed: 42,
        }
    }
}

impl SceneConfig {
    pub fn dates(&self) -> Vec<NaiveDate> {
        (0..self.n_dates)
            .map(|i| self.start + Days::new(i as u64 * self.step_days))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrajectoryKind {
    Rice,
    /// Evergreen canopy, NDVI near 0.7 all season.
    FlatHigh,
    /// Bare or fallow land, NDVI near 0.2.
    FlatLow,
    /// Flooded vegetation that greens up and never senesces.
    Wetland,
}

impl TrajectoryKind {
    pub fn class(self) -> PaddyClass {
        match self {
            TrajectoryKind::Rice => PaddyClass::Paddy,
            _ => PaddyClass::NonPaddy,
        }
    }
}

/// Per-field phenology parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldParams {
    pub green_day: f64,
    pub senesce_day: f64,
    pub amplitude: f64,
}

impl FieldParams {
    pub const NOMINAL: FieldParams = FieldParams {
        green_day: 66.0,
        senesce_day: 128.0,
        amplitude: 0.75,
    };
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Target (NDVI, LSWI, MNDWI) of a trajectory on day `t` of the season.
pub fn target_indices(kind: TrajectoryKind, t: f64, p: &FieldParams) -> (f64, f64, f64) {
    let veg = logistic((t - p.green_day) / 14.0);
    let sen = logistic((t - p.senesce_day) / 10.0);
    match kind {
        TrajectoryKind::Rice => (
            0.18 + p.amplitude * (veg - sen),
            0.35 + 0.05 * veg - 0.25 * sen,
            0.10 - 0.45 * veg + 0.10 * sen,
        ),
        TrajectoryKind::FlatHigh => (0.70, 0.25, -0.45),
        TrajectoryKind::FlatLow => (0.20, 0.02, -0.15),
        TrajectoryKind::Wetland => (0.18 + p.amplitude * veg, 0.45, 0.15 - 0.30 * veg),
    }
}

/// Reflectance in [`Band::ALL`] order reproducing the given NDVI, LSWI and MNDWI.
pub fn bands_from_indices(ndvi: f64, lswi: f64, mndwi: f64) -> [f64; 5] {
    let n = ndvi.clamp(-0.9, 0.95);
    let l = lswi.clamp(-0.9, 0.9);
    let m = mndwi.clamp(-0.9, 0.9);
    let nir = 0.12 + 0.30 * n.max(0.0);
    let red = nir * (1.0 - n) / (1.0 + n);
    let blue = 0.5 * red;
    let swir = nir * (1.0 - l) / (1.0 + l);
    let green = swir * (1.0 + m) / (1.0 - m);
    [blue, green, red, nir, swir]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block {
    pub kind: TrajectoryKind,
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub width: usize,
    pub height: usize,
    pub blocks: Vec<Block>,
    /// Kind of pixels not covered by any block.
    pub background: TrajectoryKind,
}

impl Layout {
    /// Square fields of side `field_size`, `fields_per_row` per row, placed in the order given.
    pub fn grouped_fields(kinds: &[(TrajectoryKind, usize)], field_size: usize, fields_per_row: usize) -> Layout {
        let total: usize = kinds.iter().map(|k| k.1).sum();
        let rows = total.div_ceil(fields_per_row);
        let mut blocks = Vec::with_capacity(total);
        let mut i = 0;
        for (kind, n) in kinds {
            for _ in 0..*n {
                let (fr, fc) = (i / fields_per_row, i % fields_per_row);
                blocks.push(Block {
                    kind: *kind,
                    rows: (fr * field_size, (fr + 1) * field_size),
                    cols: (fc * field_size, (fc + 1) * field_size),
                });
                i += 1;
            }
        }
        Layout {
            width: fields_per_row * field_size,
            height: rows * field_size,
            blocks,
            background: TrajectoryKind::FlatLow,
        }
    }

    /// Alternating `block`-sized squares of kinds `a` and `b` over a `size` x `size` grid.
    pub fn checkerboard(size: usize, block: usize, a: TrajectoryKind, b: TrajectoryKind) -> Layout {
        let n = size / block;
        let mut blocks = Vec::with_capacity(n * n);
        for br in 0..n {
            for bc in 0..n {
                blocks.push(Block {
                    kind: if (br + bc) % 2 == 0 { a } else { b },
                    rows: (br * block, (br + 1) * block),
                    cols: (bc * block, (bc + 1) * block),
                });
            }
        }
        Layout {
            width: n * block,
            height: n * block,
            blocks,
            background: b,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub cube: ReflectanceCube,
    pub layout: Layout,
    /// One reference polygon per block, ids `f<block index>`.
    pub polygons: Vec<ReferencePolygon>,
    /// Per pixel: 1 rice, 0 anything else.
    pub truth: Vec<u8>,
}

fn jitter(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

pub fn generate(cfg: &SceneConfig, layout: &Layout) -> Result<SyntheticScene> {
    if !(0.0..1.0).contains(&cfg.psf_mix) {
        return Err(Error::InvalidParameter(format!(
            "psf_mix must be in [0, 1), got {}",
            cfg.psf_mix
        )));
    }
    let grid = GeoGrid::new(
        500_000.0,
        1_900_000.0,
        cfg.pixel_size,
        layout.width,
        layout.height,
        "EPSG:32644",
    )?;
    let n = grid.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sd.max(0.0)).map_err(|e| Error::InvalidParameter(format!("noise: {e}")))?;

    let mut kind_of = vec![layout.background; n];
    let mut block_of: Vec<Option<usize>> = vec![None; n];
    for (bi, b) in layout.blocks.iter().enumerate() {
        if b.rows.1 > layout.height || b.cols.1 > layout.width {
            return Err(Error::InvalidParameter(format!("block {bi} exceeds the layout")));
        }
        for r in b.rows.0..b.rows.1 {
            for c in b.cols.0..b.cols.1 {
                kind_of[r * layout.width + c] = b.kind;
                block_of[r * layout.width + c] = Some(bi);
            }
        }
    }
    let mut params: Vec<FieldParams> = layout
        .blocks
        .iter()
        .map(|_| FieldParams {
            green_day: FieldParams::NOMINAL.green_day + cfg.shift_days + jitter(&mut rng, cfg.jitter_days),
            senesce_day: FieldParams::NOMINAL.senesce_day + cfg.shift_days + jitter(&mut rng, cfg.jitter_days),
            amplitude: FieldParams::NOMINAL.amplitude + jitter(&mut rng, 0.03),
        })
        .collect();
    let background_params = FieldParams {
        green_day: FieldParams::NOMINAL.green_day + cfg.shift_days,
        senesce_day: FieldParams::NOMINAL.senesce_day + cfg.shift_days,
        ..FieldParams::NOMINAL
    };
    params.push(background_params);

    let dates = cfg.dates();
    let nb = Band::ALL.len();
    let mut values = vec![0f32; dates.len() * nb * n];
    let mut plane = vec![[0f64; 5]; n];
    for (d, _) in dates.iter().enumerate() {
        let t = (d as u64 * cfg.step_days) as f64;
        for p in 0..n {
            let fp = &params[block_of[p].unwrap_or(layout.blocks.len())];
            let (ndvi, lswi, mndwi) = target_indices(kind_of[p], t, fp);
            plane[p] = bands_from_indices(
                ndvi + noise.sample(&mut rng),
                lswi + noise.sample(&mut rng),
                mndwi + noise.sample(&mut rng),
            );
        }
        if cfg.psf_mix > 0.0 {
            plane = mix_neighbors(&plane, layout.width, layout.height, cfg.psf_mix);
        }
        for b in 0..nb {
            let base = (d * nb + b) * n;
            for p in 0..n {
                values[base + p] = plane[p][b] as f32;
            }
        }
    }
    let cube = ReflectanceCube::new(
        grid.clone(),
        cfg.district.clone(),
        dates,
        Band::ALL.to_vec(),
        values,
        f32::NAN,
    )?;
    let polygons = layout
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| rectangle_polygon(&grid, format!("f{i}"), &cfg.district, b.kind.class(), b.rows, b.cols))
        .collect();
    let truth = kind_of.iter().map(|k| (k.class() == PaddyClass::Paddy) as u8).collect();
    Ok(SyntheticScene {
        cube,
        layout: layout.clone(),
        polygons,
        truth,
    })
}

fn mix_neighbors(plane: &[[f64; 5]], w: usize, h: usize, alpha: f64) -> Vec<[f64; 5]> {
    let mut out = plane.to_vec();
    for r in 0..h {
        for c in 0..w {
            let mut sum = [0.0; 5];
            let mut k = 0.0;
            let neighbors = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
            for (rr, cc) in neighbors {
                if rr < h && cc < w {
                    for (s, v) in sum.iter_mut().zip(plane[rr * w + cc]) {
                        *s += v;
                    }
                    k += 1.0;
                }
            }
            let own = plane[r * w + c];
            for b in 0..5 {
                out[r * w + c][b] = (1.0 - alpha) * own[b] + alpha * sum[b] / k;
            }
        }
    }
    out
}

/// Stage windows of the nominal trajectory, as day offsets from `start`.
pub fn nominal_windows(start: NaiveDate, shift_days: u64) -> StageWindows {
    let r = |a: u64, b: u64| {
        DateRange::new(start + Days::new(a + shift_days), start + Days::new(b + shift_days)).expect("ordered")
    };
    StageWindows::new([r(0, 42), r(43, 75), r(76, 111), r(112, 162)]).expect("ordered windows")
}

fn bound(index: IndexKind, min: Option<f64>, max: Option<f64>) -> RangeBound {
    RangeBound { index, min, max }
}

/// Hand-set calibration matching the nominal rice trajectory: TSP 0.15 on every area
/// stage and TPA with peak 0.60-0.90 and 0.15 rise and fall.
pub fn reference_calibration(cfg: &SceneConfig) -> DistrictCalibration {
    let windows = nominal_windows(cfg.start, 0);
    DistrictCalibration {
        schema_version: CALIBRATION_SCHEMA_VERSION,
        district: cfg.district.clone(),
        season: DateRange::new(windows.land_preparation.start, windows.ripening.end).expect("ordered"),
        stage_windows: windows,
        allow_atypical_durations: false,
        rules: vec![
            StageRule {
                stage: Stage::LandPreparation,
                method: Method::LswiEvi,
                bounds: vec![
                    bound(IndexKind::Ndvi, Some(0.15), Some(0.30)),
                    bound(IndexKind::Lswi, Some(0.10), Some(0.45)),
                ],
                ratios: vec![],
            },
            StageRule {
                stage: Stage::Vegetative,
                method: Method::Basic,
                bounds: vec![
                    bound(IndexKind::Ndvi, Some(0.25), Some(0.70)),
                    bound(IndexKind::Lswi, Some(0.20), Some(0.50)),
                ],
                ratios: vec![],
            },
            StageRule {
                stage: Stage::Reproductive,
                method: Method::Basic,
                bounds: vec![bound(IndexKind::Ndvi, Some(0.45), Some(0.95))],
                ratios: vec![],
            },
            StageRule {
                stage: Stage::Ripening,
                method: Method::Basic,
                bounds: vec![bound(IndexKind::Ndvi, Some(0.15), Some(0.70))],
                ratios: vec![],
            },
        ],
        tsp: TspParams::uniform(0.15),
        tpa: Some(TpaParams {
            peak_min: 0.60,
            peak_max: 0.90,
            min_increase: 0.15,
            min_decrease: 0.15,
        }),
        combination: CombinationPolicy::Majority,
        exclusions: ExclusionConfig::default(),
        outlier: OutlierConfig::default(),
        focal_radius_m: 20.0,
        needs_manual_review: false,
    }
}
