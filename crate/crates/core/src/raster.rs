//! Grid, reflectance cube, index cube and binary mask types.
//!
//! All planes are row-major. Reflectance values are kept as `f32` so that a cube
//! read from disk and written back is bit-identical; derived index values are `f64`
//! with `NaN` marking nodata.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indices::IndexKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoGrid {
    /// Map x of the upper-left corner, meters.
    pub origin_x: f64,
    /// Map y of the upper-left corner, meters. Rows advance southward.
    pub origin_y: f64,
    pub pixel_size: f64,
    pub width: usize,
    pub height: usize,
    pub crs_label: String,
}

impl GeoGrid {
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        pixel_size: f64,
        width: usize,
        height: usize,
        crs_label: impl Into<String>,
    ) -> Result<Self> {
        let grid = GeoGrid {
            origin_x,
            origin_y,
            pixel_size,
            width,
            height,
            crs_label: crs_label.into(),
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_size > 0.0) || !self.pixel_size.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "pixel_size must be > 0, got {}",
                self.pixel_size
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter(format!(
                "grid must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Map coordinates of the center of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.pixel_size,
            self.origin_y - (row as f64 + 0.5) * self.pixel_size,
        )
    }

    pub fn pixel_area_m2(&self) -> f64 {
        self.pixel_size * self.pixel_size
    }

    /// Same raster shape and georeferencing (CRS label compared verbatim).
    pub fn aligned_with(&self, other: &GeoGrid) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.pixel_size == other.pixel_size
            && self.origin_x == other.origin_x
            && self.origin_y == other.origin_y
            && self.crs_label == other.crs_label
    }

    pub(crate) fn ensure_aligned(&self, other: &GeoGrid, what: &str) -> Result<()> {
        if self.aligned_with(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {}x{} @ {} vs {}x{} @ {}",
                self.width, self.height, self.pixel_size, other.width, other.height, other.pixel_size
            )))
        }
    }
}

/// Sentinel-2 bands consumed by the index formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Band {
    B2,
    B3,
    B4,
    B8,
    B11,
}

impl Band {
    pub const ALL: [Band; 5] = [Band::B2, Band::B3, Band::B4, Band::B8, Band::B11];

    pub fn name(self) -> &'static str {
        match self {
            Band::B2 => "B2",
            Band::B3 => "B3",
            Band::B4 => "B4",
            Band::B8 => "B8",
            Band::B11 => "B11",
        }
    }

    /// Native Sentinel-2 ground sampling distance in meters.
    pub fn sentinel2_resolution_m(self) -> f64 {
        match self {
            Band::B11 => 20.0,
            _ => 10.0,
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "B2" => Ok(Band::B2),
            "B3" => Ok(Band::B3),
            "B4" => Ok(Band::B4),
            "B8" => Ok(Band::B8),
            "B11" => Ok(Band::B11),
            other => Err(Error::UnknownBand(other.to_string())),
        }
    }
}

pub(crate) fn check_dates_increasing(dates: &[NaiveDate]) -> Result<()> {
    for pair in dates.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::DateOrder(format!("{} followed by {}", pair[0], pair[1])));
        }
    }
    Ok(())
}

/// Multi-date, multi-band surface reflectance for one district.
#[derive(Debug, Clone)]
pub struct ReflectanceCube {
    grid: GeoGrid,
    district: String,
    dates: Vec<NaiveDate>,
    bands: Vec<Band>,
    values: Vec<f32>,
    nodata: f32,
    native_resolution: BTreeMap<Band, f64>,
}

fn same_f32(a: f32, b: f32) -> bool {
    a == b || (a.is_nan() && b.is_nan())
}

/// `NaN` compares equal to `NaN`.
impl PartialEq for ReflectanceCube {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid
            && self.district == other.district
            && self.dates == other.dates
            && self.bands == other.bands
            && same_f32(self.nodata, other.nodata)
            && self.native_resolution == other.native_resolution
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| same_f32(*a, *b))
    }
}

impl ReflectanceCube {
    /// Builds a cube from a flat `dates x bands x height x width` buffer.
    pub fn new(
        grid: GeoGrid,
        district: impl Into<String>,
        dates: Vec<NaiveDate>,
        bands: Vec<Band>,
        values: Vec<f32>,
        nodata: f32,
    ) -> Result<Self> {
        grid.validate()?;
        if bands.is_empty() {
            return Err(Error::EmptyBands);
        }
        let mut seen = bands.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != bands.len() {
            return Err(Error::InvalidParameter("duplicate band names".into()));
        }
        check_dates_increasing(&dates)?;
        let expected = dates.len() * bands.len() * grid.len();
        if values.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "expected {expected} values ({} dates x {} bands x {}x{}), got {}",
                dates.len(),
                bands.len(),
                grid.height,
                grid.width,
                values.len()
            )));
        }
        Ok(ReflectanceCube {
            grid,
            district: district.into(),
            dates,
            bands,
            values,
            nodata,
            native_resolution: BTreeMap::new(),
        })
    }

    pub fn with_native_resolution(mut self, res: BTreeMap<Band, f64>) -> Self {
        self.native_resolution = res;
        self
    }

    pub fn grid(&self) -> &GeoGrid {
        &self.grid
    }

    pub fn district(&self) -> &str {
        &self.district
    }

    pub fn set_district(&mut self, district: impl Into<String>) {
        self.district = district.into();
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn bands(&self) -> &[Band] {
        &self.bands
    }

    pub fn nodata(&self) -> f32 {
        self.nodata
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn native_resolution(&self) -> &BTreeMap<Band, f64> {
        &self.native_resolution
    }

    /// NaN is always treated as nodata, whatever the declared sentinel.
    pub fn is_nodata(&self, v: f32) -> bool {
        v.is_nan() || v == self.nodata
    }

    pub fn band_index(&self, band: Band) -> Option<usize> {
        self.bands.iter().position(|b| *b == band)
    }

    fn plane_offset(&self, date: usize, band: usize) -> Result<usize> {
        if date >= self.dates.len() || band >= self.bands.len() {
            return Err(Error::OutOfRange {
                date,
                band,
                row: 0,
                col: 0,
            });
        }
        Ok((date * self.bands.len() + band) * self.grid.len())
    }

    pub fn plane(&self, date: usize, band: usize) -> Result<&[f32]> {
        let off = self.plane_offset(date, band)?;
        Ok(&self.values[off..off + self.grid.len()])
    }

    pub fn plane_mut(&mut self, date: usize, band: usize) -> Result<&mut [f32]> {
        let off = self.plane_offset(date, band)?;
        let n = self.grid.len();
        Ok(&mut self.values[off..off + n])
    }

    pub fn get(&self, date: usize, band: usize, row: usize, col: usize) -> Result<f32> {
        if row >= self.grid.height || col >= self.grid.width {
            return Err(Error::OutOfRange { date, band, row, col });
        }
        let plane = self
            .plane(date, band)
            .map_err(|_| Error::OutOfRange { date, band, row, col })?;
        Ok(plane[row * self.grid.width + col])
    }

    /// Keeps the dates at the given positions, in order.
    pub fn select_dates(&self, keep: &[usize]) -> Result<ReflectanceCube> {
        let mut values = Vec::with_capacity(keep.len() * self.bands.len() * self.grid.len());
        let mut dates = Vec::with_capacity(keep.len());
        for &d in keep {
            for b in 0..self.bands.len() {
                values.extend_from_slice(self.plane(d, b)?);
            }
            dates.push(self.dates[d]);
        }
        let cube = ReflectanceCube::new(
            self.grid.clone(),
            self.district.clone(),
            dates,
            self.bands.clone(),
            values,
            self.nodata,
        )?;
        Ok(cube.with_native_resolution(self.native_resolution.clone()))
    }

    /// Restricts the cube to a subset of its bands.
    pub fn select_bands(&self, bands: &[Band]) -> Result<ReflectanceCube> {
        let idx: Vec<usize> = bands
            .iter()
            .map(|b| {
                self.band_index(*b).ok_or_else(|| Error::MissingBand {
                    band: b.to_string(),
                    purpose: "band selection".into(),
                })
            })
            .collect::<Result<_>>()?;
        let mut values = Vec::with_capacity(self.dates.len() * idx.len() * self.grid.len());
        for d in 0..self.dates.len() {
            for &b in &idx {
                values.extend_from_slice(self.plane(d, b)?);
            }
        }
        let res = self
            .native_resolution
            .iter()
            .filter(|(b, _)| bands.contains(b))
            .map(|(b, r)| (*b, *r))
            .collect();
        Ok(ReflectanceCube::new(
            self.grid.clone(),
            self.district.clone(),
            self.dates.clone(),
            bands.to_vec(),
            values,
            self.nodata,
        )?
        .with_native_resolution(res))
    }
}

/// One spectral index evaluated for every date of a cube. `NaN` is nodata.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexCube {
    pub grid: GeoGrid,
    pub district: String,
    pub dates: Vec<NaiveDate>,
    pub kind: IndexKind,
    pub values: Vec<f64>,
}

impl IndexCube {
    pub fn new(
        grid: GeoGrid,
        district: impl Into<String>,
        dates: Vec<NaiveDate>,
        kind: IndexKind,
        values: Vec<f64>,
    ) -> Result<Self> {
        check_dates_increasing(&dates)?;
        if values.len() != dates.len() * grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "index cube expects {} values, got {}",
                dates.len() * grid.len(),
                values.len()
            )));
        }
        Ok(IndexCube {
            grid,
            district: district.into(),
            dates,
            kind,
            values,
        })
    }

    pub fn plane(&self, date: usize) -> Result<&[f64]> {
        if date >= self.dates.len() {
            return Err(Error::OutOfRange {
                date,
                band: 0,
                row: 0,
                col: 0,
            });
        }
        let n = self.grid.len();
        Ok(&self.values[date * n..(date + 1) * n])
    }

    pub fn get(&self, date: usize, row: usize, col: usize) -> Result<f64> {
        if row >= self.grid.height || col >= self.grid.width {
            return Err(Error::OutOfRange {
                date,
                band: 0,
                row,
                col,
            });
        }
        Ok(self.plane(date)?[row * self.grid.width + col])
    }

    /// Time series of one pixel (flat pixel index).
    pub fn series(&self, pixel: usize) -> Vec<f64> {
        let n = self.grid.len();
        (0..self.dates.len()).map(|d| self.values[d * n + pixel]).collect()
    }

    pub fn set_series(&mut self, pixel: usize, series: &[f64]) {
        let n = self.grid.len();
        for (d, v) in series.iter().enumerate() {
            self.values[d * n + pixel] = *v;
        }
    }
}

pub const MASK_NODATA: u8 = 255;

/// Binary paddy / non-paddy plane. Values are 0, 1 or [`MASK_NODATA`].
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub grid: GeoGrid,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(grid: GeoGrid, values: Vec<u8>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "mask expects {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !matches!(**v, 0 | 1 | MASK_NODATA)) {
            return Err(Error::InvalidParameter(format!(
                "mask value {bad} is not 0, 1 or nodata"
            )));
        }
        Ok(BinaryMask { grid, values })
    }

    pub fn filled(grid: GeoGrid, value: u8) -> Self {
        let n = grid.len();
        BinaryMask {
            grid,
            values: vec![value; n],
        }
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> Option<u8> {
        if row < self.grid.height && col < self.grid.width {
            Some(self.values[row * self.grid.width + col])
        } else {
            None
        }
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|v| **v == 1).count()
    }

    /// `1.0`, `0.0`, `NaN` plane for the cube plane format.
    pub fn to_f32(&self) -> Vec<f32> {
        self.values
            .iter()
            .map(|v| match *v {
                0 => 0.0,
                1 => 1.0,
                _ => f32::NAN,
            })
            .collect()
    }

    pub fn from_f32(grid: GeoGrid, plane: &[f32]) -> Result<Self> {
        let values = plane
            .iter()
            .map(|v| {
                if v.is_nan() {
                    Ok(MASK_NODATA)
                } else if *v == 0.0 {
                    Ok(0)
                } else if *v == 1.0 {
                    Ok(1)
                } else {
                    Err(Error::InvalidParameter(format!(
                        "mask plane value {v} is not 0, 1 or NaN"
                    )))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        BinaryMask::new(grid, values)
    }
}
