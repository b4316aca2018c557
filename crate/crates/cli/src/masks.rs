//! On-disk layout of classification masks: a JSON manifest plus one raw byte plane per layer.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use phenorice_core::raster::{BinaryMask, GeoGrid, MASK_NODATA};
use serde::{Deserialize, Serialize};

pub const MASK_MANIFEST: &str = "mask_manifest.json";
pub const FINAL_LAYER: &str = "final";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskManifest {
    pub district: String,
    pub crs_label: String,
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size: f64,
    pub width: usize,
    pub height: usize,
    pub nodata: u8,
    pub layers: Vec<String>,
}

impl MaskManifest {
    pub fn new(district: &str, grid: &GeoGrid) -> Self {
        MaskManifest {
            district: district.to_string(),
            crs_label: grid.crs_label.clone(),
            origin_x: grid.origin_x,
            origin_y: grid.origin_y,
            pixel_size: grid.pixel_size,
            width: grid.width,
            height: grid.height,
            nodata: MASK_NODATA,
            layers: Vec::new(),
        }
    }

    pub fn grid(&self) -> Result<GeoGrid> {
        Ok(GeoGrid::new(
            self.origin_x,
            self.origin_y,
            self.pixel_size,
            self.width,
            self.height,
            self.crs_label.clone(),
        )?)
    }
}

pub fn layer_path(dir: &Path, layer: &str) -> PathBuf {
    dir.join(format!("{layer}.u8"))
}

/// Writes the layers and their manifest; returns every file written.
pub fn write_masks(dir: &Path, district: &str, layers: &[(String, &BinaryMask)], pgm: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let Some((_, first)) = layers.first() else {
        bail!("no mask layers to write");
    };
    let mut manifest = MaskManifest::new(district, &first.grid);
    let mut written = Vec::new();
    for (name, mask) in layers {
        let path = layer_path(dir, name);
        fs::write(&path, mask.values()).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
        if pgm {
            let path = dir.join(format!("{name}.pgm"));
            fs::write(&path, to_pgm(mask)).with_context(|| format!("writing {}", path.display()))?;
            written.push(path);
        }
        manifest.layers.push(name.clone());
    }
    let path = dir.join(MASK_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    written.push(path);
    Ok(written)
}

pub fn read_mask_manifest(dir: &Path) -> Result<MaskManifest> {
    let path = dir.join(MASK_MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

pub fn read_mask(dir: &Path, layer: &str) -> Result<(MaskManifest, BinaryMask)> {
    let manifest = read_mask_manifest(dir)?;
    if !manifest.layers.iter().any(|l| l == layer) {
        bail!("{}: no layer '{layer}'", dir.display());
    }
    let path = layer_path(dir, layer);
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let mask = BinaryMask::new(manifest.grid()?, bytes)?;
    Ok((manifest, mask))
}

/// Binary greyscale image: paddy white, background black, nodata mid-grey.
pub fn to_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.grid.width, mask.grid.height).into_bytes();
    out.extend(mask.values().iter().map(|v| match *v {
        1 => 255,
        0 => 0,
        _ => 128,
    }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_round_trip() {
        let grid = GeoGrid::new(0.0, 100.0, 10.0, 3, 2, "EPSG:32644").unwrap();
        let m = BinaryMask::new(grid, vec![0, 1, MASK_NODATA, 1, 1, 0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_masks(dir.path(), "Nalgonda", &[(FINAL_LAYER.to_string(), &m)], true).unwrap();
        assert_eq!(files.len(), 3);
        let (man, back) = read_mask(dir.path(), FINAL_LAYER).unwrap();
        assert_eq!(man.district, "Nalgonda");
        assert_eq!(back, m);
        assert!(read_mask(dir.path(), "combined").is_err());
        let pgm = to_pgm(&m);
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 6..], &[0, 255, 128, 255, 255, 0]);
    }
}
