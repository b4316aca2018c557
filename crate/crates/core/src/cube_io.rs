//! Cube directory format.
//!
//! A cube directory holds `manifest.json` and one raw plane per (date, band) named
//! `<YYYY-MM-DD>_<band>.f32`: little-endian `f32`, row-major, `width * height` values.
//! The same layout carries QA planes (band `QA`), index cubes (bands `NDVI`, ...) and
//! single-plane auxiliary rasters.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::raster::{check_dates_increasing, Band, GeoGrid, IndexCube, ReflectanceCube};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeManifest {
    pub district: String,
    pub crs_label: String,
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size: f64,
    pub width: usize,
    pub height: usize,
    /// `null` or absent means NaN.
    #[serde(
        default = "nan_nodata",
        serialize_with = "ser_nodata",
        deserialize_with = "de_nodata"
    )]
    pub nodata: f32,
    pub bands: Vec<String>,
    pub dates: Vec<NaiveDate>,
    /// Optional native ground sampling distance per band, meters.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub native_resolution_m: BTreeMap<String, f64>,
}

fn nan_nodata() -> f32 {
    f32::NAN
}

fn ser_nodata<S: Serializer>(v: &f32, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_nan() {
        s.serialize_none()
    } else {
        s.serialize_some(&(*v as f64))
    }
}

fn de_nodata<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f32, D::Error> {
    let v: Option<f64> = Option::deserialize(d)?;
    Ok(v.map(|x| x as f32).unwrap_or(f32::NAN))
}

impl CubeManifest {
    pub fn grid(&self) -> Result<GeoGrid> {
        GeoGrid::new(
            self.origin_x,
            self.origin_y,
            self.pixel_size,
            self.width,
            self.height,
            self.crs_label.clone(),
        )
    }

    pub fn for_grid(grid: &GeoGrid, district: &str, nodata: f32) -> Self {
        CubeManifest {
            district: district.to_string(),
            crs_label: grid.crs_label.clone(),
            origin_x: grid.origin_x,
            origin_y: grid.origin_y,
            pixel_size: grid.pixel_size,
            width: grid.width,
            height: grid.height,
            nodata,
            bands: Vec::new(),
            dates: Vec::new(),
            native_resolution_m: BTreeMap::new(),
        }
    }
}

pub fn plane_file_name(date: NaiveDate, band: &str) -> String {
    format!("{}_{}.f32", date.format("%Y-%m-%d"), band)
}

pub fn read_manifest(dir: &Path) -> Result<CubeManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

pub fn write_manifest(dir: &Path, manifest: &CubeManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json("manifest serialization", e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Reads a raw plane and checks it holds exactly `expected` values.
pub fn read_plane(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingPlane(path.to_path_buf())),
        Err(e) => return Err(Error::io(path, e)),
    };
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::DimensionMismatch(format!(
            "{}: expected {expected} values, found {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_plane(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Reads every plane listed in a manifest: `planes[date][band]`.
pub fn read_plane_stack(dir: &Path) -> Result<(CubeManifest, Vec<Vec<Vec<f32>>>)> {
    let manifest = read_manifest(dir)?;
    let grid = manifest.grid()?;
    check_dates_increasing(&manifest.dates)?;
    let mut planes = Vec::with_capacity(manifest.dates.len());
    for date in &manifest.dates {
        let mut per_band = Vec::with_capacity(manifest.bands.len());
        for band in &manifest.bands {
            per_band.push(read_plane(&dir.join(plane_file_name(*date, band)), grid.len())?);
        }
        planes.push(per_band);
    }
    Ok((manifest, planes))
}

/// Loads a reflectance cube. Values are returned exactly as stored.
pub fn read_cube(dir: &Path) -> Result<ReflectanceCube> {
    let manifest = read_manifest(dir)?;
    let bands: Vec<Band> = manifest.bands.iter().map(|b| b.parse()).collect::<Result<_>>()?;
    let (manifest, planes) = read_plane_stack(dir)?;
    let grid = manifest.grid()?;
    let mut values = Vec::with_capacity(manifest.dates.len() * bands.len() * grid.len());
    for per_band in planes {
        for plane in per_band {
            values.extend(plane);
        }
    }
    let res = manifest
        .native_resolution_m
        .iter()
        .map(|(b, r)| Ok((b.parse::<Band>()?, *r)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(ReflectanceCube::new(
        grid,
        manifest.district.clone(),
        manifest.dates.clone(),
        bands,
        values,
        manifest.nodata,
    )?
    .with_native_resolution(res))
}

pub fn write_cube(cube: &ReflectanceCube, dir: &Path) -> Result<()> {
    if cube.bands().is_empty() {
        return Err(Error::EmptyBands);
    }
    ensure_dir(dir)?;
    let mut manifest = CubeManifest::for_grid(cube.grid(), cube.district(), cube.nodata());
    manifest.bands = cube.bands().iter().map(|b| b.to_string()).collect();
    manifest.dates = cube.dates().to_vec();
    manifest.native_resolution_m = cube
        .native_resolution()
        .iter()
        .map(|(b, r)| (b.to_string(), *r))
        .collect();
    for (d, date) in cube.dates().iter().enumerate() {
        for (b, band) in cube.bands().iter().enumerate() {
            write_plane(&dir.join(plane_file_name(*date, band.name())), cube.plane(d, b)?)?;
        }
    }
    write_manifest(dir, &manifest)
}

/// Writes several index cubes sharing one grid and date list as one directory.
pub fn write_index_cubes(cubes: &[IndexCube], dir: &Path) -> Result<()> {
    let first = cubes
        .first()
        .ok_or_else(|| Error::InvalidParameter("no index cubes to write".into()))?;
    for c in cubes {
        c.grid.ensure_aligned(&first.grid, "index cube")?;
        if c.dates != first.dates {
            return Err(Error::DimensionMismatch("index cubes have different dates".into()));
        }
    }
    ensure_dir(dir)?;
    let mut manifest = CubeManifest::for_grid(&first.grid, &first.district, f32::NAN);
    manifest.bands = cubes.iter().map(|c| c.kind.name().to_string()).collect();
    manifest.dates = first.dates.clone();
    for (d, date) in first.dates.iter().enumerate() {
        for c in cubes {
            let plane: Vec<f32> = c.plane(d)?.iter().map(|v| *v as f32).collect();
            write_plane(&dir.join(plane_file_name(*date, c.kind.name())), &plane)?;
        }
    }
    write_manifest(dir, &manifest)
}

/// Reads a bare plane file that must match `grid`.
pub fn read_aux_plane(path: &Path, grid: &GeoGrid) -> Result<Vec<f32>> {
    read_plane(path, grid.len())
}

pub fn plane_path(dir: &Path, date: NaiveDate, band: &str) -> PathBuf {
    dir.join(plane_file_name(date, band))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_cube(nodata: f32) -> ReflectanceCube {
        let grid = GeoGrid::new(500_000.0, 1_900_000.0, 10.0, 4, 4, "EPSG:32644").unwrap();
        let dates = vec!["2019-01-05".parse().unwrap(), "2019-01-10".parse().unwrap()];
        let n = 2 * 5 * 16;
        let mut values: Vec<f32> = (0..n).map(|i| (i as f32) * 0.001 + 1e-7).collect();
        values[3] = nodata;
        values[40] = f32::NAN;
        ReflectanceCube::new(grid, "Nalgonda", dates, Band::ALL.to_vec(), values, nodata).unwrap()
    }

    fn bits(c: &ReflectanceCube) -> Vec<u32> {
        c.values().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for nodata in [f32::NAN, -9999.0] {
            let cube = sample_cube(nodata);
            let dir = tempfile::tempdir().unwrap();
            write_cube(&cube, dir.path()).unwrap();
            let back = read_cube(dir.path()).unwrap();
            assert_eq!(back.dates().len(), 2);
            assert_eq!(back.bands().len(), 5);
            assert_eq!(bits(&cube), bits(&back));
            assert_eq!(cube.nodata().to_bits(), back.nodata().to_bits());
            assert_eq!(cube.grid(), back.grid());
        }
    }

    #[test]
    fn short_plane_is_a_dimension_mismatch() {
        let cube = sample_cube(f32::NAN);
        let dir = tempfile::tempdir().unwrap();
        write_cube(&cube, dir.path()).unwrap();
        let victim = plane_path(dir.path(), cube.dates()[1], "B8");
        write_plane(&victim, &[0.0; 12]).unwrap();
        assert!(matches!(read_cube(dir.path()), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn missing_plane_and_bad_manifest() {
        let cube = sample_cube(f32::NAN);
        let dir = tempfile::tempdir().unwrap();
        write_cube(&cube, dir.path()).unwrap();
        fs::remove_file(plane_path(dir.path(), cube.dates()[0], "B3")).unwrap();
        assert!(matches!(read_cube(dir.path()), Err(Error::MissingPlane(_))));

        write_cube(&cube, dir.path()).unwrap();
        let mut m = read_manifest(dir.path()).unwrap();
        m.dates.reverse();
        write_manifest(dir.path(), &m).unwrap();
        assert!(matches!(read_cube(dir.path()), Err(Error::DateOrder(_))));

        let mut m = read_manifest(dir.path()).unwrap();
        m.dates.reverse();
        m.bands[0] = "B5".into();
        write_manifest(dir.path(), &m).unwrap();
        assert!(matches!(read_cube(dir.path()), Err(Error::UnknownBand(_))));
    }

    #[test]
    fn nodata_null_in_manifest_means_nan() {
        let json = r#"{"district":"x","crs_label":"c","origin_x":0,"origin_y":0,"pixel_size":10,
            "width":1,"height":1,"nodata":null,"bands":["B4"],"dates":["2019-01-01"]}"#;
        let m: CubeManifest = serde_json::from_str(json).unwrap();
        assert!(m.nodata.is_nan());
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains("\"nodata\":null"));
    }
}
