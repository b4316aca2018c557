//! Land-cover and water exclusion, and focal-mode smoothing of the paddy mask.

use std::collections::BTreeSet;

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, GeoGrid, MASK_NODATA};

/// ESA WorldCover codes for tree cover, shrubland, grassland, built-up and bare/sparse.
pub const DEFAULT_EXCLUDED_LANDCOVER: [u16; 5] = [10, 20, 30, 50, 60];

/// Integer land-cover class codes on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPlane {
    pub grid: GeoGrid,
    pub codes: Vec<u16>,
}

impl ClassPlane {
    pub fn new(grid: GeoGrid, codes: Vec<u16>) -> Result<Self> {
        if codes.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "class plane has {} values for {} pixels",
                codes.len(),
                grid.len()
            )));
        }
        Ok(ClassPlane { grid, codes })
    }

    /// `NaN` becomes class 0 (no data).
    pub fn from_f32(grid: GeoGrid, plane: &[f32]) -> Result<Self> {
        let codes = plane
            .iter()
            .map(|v| {
                if v.is_nan() {
                    Ok(0)
                } else if *v >= 0.0 && *v <= u16::MAX as f32 && v.fract() == 0.0 {
                    Ok(*v as u16)
                } else {
                    Err(Error::InvalidParameter(format!(
                        "land-cover code {v} is not an integer class"
                    )))
                }
            })
            .collect::<Result<_>>()?;
        ClassPlane::new(grid, codes)
    }
}

/// Forces pixels with an excluded land-cover code to 0.
pub fn exclude_landcover(mask: &BinaryMask, landcover: &ClassPlane, excluded: &BTreeSet<u16>) -> Result<BinaryMask> {
    landcover.grid.ensure_aligned(&mask.grid, "land-cover plane")?;
    let values = mask
        .values()
        .iter()
        .zip(&landcover.codes)
        .map(|(v, code)| if excluded.contains(code) { 0 } else { *v })
        .collect();
    BinaryMask::new(mask.grid.clone(), values)
}

/// Forces permanent water, and seasonal water when `exclude_seasonal`, to 0.
pub fn exclude_water(
    mask: &BinaryMask,
    permanent: Option<&BinaryMask>,
    seasonal: Option<&BinaryMask>,
    exclude_seasonal: bool,
) -> Result<BinaryMask> {
    let mut layers = Vec::new();
    if let Some(p) = permanent {
        layers.push(p);
    }
    if exclude_seasonal {
        if let Some(s) = seasonal {
            layers.push(s);
        }
    }
    for l in &layers {
        l.grid.ensure_aligned(&mask.grid, "water mask")?;
    }
    let values = (0..mask.grid.len())
        .map(|p| {
            if layers.iter().any(|l| l.values()[p] == 1) {
                0
            } else {
                mask.values()[p]
            }
        })
        .collect();
    BinaryMask::new(mask.grid.clone(), values)
}

/// Row/column offsets whose pixel centers lie within `radius_m` of the origin pixel center.
pub fn disc_offsets(radius_m: f64, pixel_size: f64) -> Vec<(isize, isize)> {
    let reach = (radius_m / pixel_size).floor() as isize;
    let r2 = radius_m * radius_m * (1.0 + 1e-9);
    let mut out = Vec::new();
    for dr in -reach..=reach {
        for dc in -reach..=reach {
            let (y, x) = (dr as f64 * pixel_size, dc as f64 * pixel_size);
            if x * x + y * y <= r2 {
                out.push((dr, dc));
            }
        }
    }
    out
}

/// Replaces each pixel by the majority value of its circular neighborhood.
///
/// Nodata neighbors do not vote and nodata pixels stay nodata. Ties keep the original
/// value. A radius below the pixel size leaves the mask unchanged.
pub fn focal_mode(mask: &BinaryMask, radius_m: f64) -> Result<BinaryMask> {
    if !radius_m.is_finite() || radius_m < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "focal radius must be >= 0, got {radius_m}"
        )));
    }
    let grid = &mask.grid;
    if radius_m < grid.pixel_size {
        if radius_m > 0.0 {
            warn!(
                "focal radius {radius_m} m is below the {} m pixel size; mask left unchanged",
                grid.pixel_size
            );
        }
        return Ok(mask.clone());
    }
    let offsets = disc_offsets(radius_m, grid.pixel_size);
    let (w, h) = (grid.width as isize, grid.height as isize);
    let src = mask.values();
    let values: Vec<u8> = (0..grid.height)
        .into_par_iter()
        .flat_map_iter(|r| {
            let offsets = &offsets;
            (0..grid.width).map(move |c| {
                let here = src[r * grid.width + c];
                if here == MASK_NODATA {
                    return here;
                }
                let (mut ones, mut zeros) = (0usize, 0usize);
                for (dr, dc) in offsets {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr < 0 || cc < 0 || rr >= h || cc >= w {
                        continue;
                    }
                    match src[(rr * w + cc) as usize] {
                        1 => ones += 1,
                        0 => zeros += 1,
                        _ => {}
                    }
                }
                match ones.cmp(&zeros) {
                    std::cmp::Ordering::Greater => 1,
                    std::cmp::Ordering::Less => 0,
                    std::cmp::Ordering::Equal => here,
                }
            })
        })
        .collect();
    BinaryMask::new(grid.clone(), values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(w: usize, h: usize) -> GeoGrid {
        GeoGrid::new(0.0, 0.0, 10.0, w, h, "x").unwrap()
    }

    #[test]
    fn disc_has_thirteen_pixels() {
        assert_eq!(disc_offsets(20.0, 10.0).len(), 13);
        assert_eq!(disc_offsets(10.0, 10.0).len(), 5);
    }

    #[test]
    fn isolated_pixel_is_removed() {
        let mut v = vec![0u8; 49];
        v[24] = 1;
        let m = BinaryMask::new(grid(7, 7), v).unwrap();
        assert_eq!(focal_mode(&m, 20.0).unwrap().count_ones(), 0);
    }

    #[test]
    fn uniform_field_unchanged_and_small_radius_identity() {
        let m = BinaryMask::filled(grid(6, 6), 1);
        assert_eq!(focal_mode(&m, 20.0).unwrap(), m);
        let mut v = vec![0u8; 49];
        v[24] = 1;
        let m = BinaryMask::new(grid(7, 7), v).unwrap();
        assert_eq!(focal_mode(&m, 5.0).unwrap(), m);
        assert!(focal_mode(&m, -1.0).is_err());
    }

    #[test]
    fn ties_keep_original_and_nodata_abstains() {
        // 1x3 strip: [1, 0, nodata]; center sees one 1 and one 0 in a 10 m disc
        let m = BinaryMask::new(grid(3, 1), vec![1, 0, MASK_NODATA]).unwrap();
        let out = focal_mode(&m, 10.0).unwrap();
        assert_eq!(out.values(), &[1, 0, MASK_NODATA]);
    }

    #[test]
    fn water_and_landcover_exclusion() {
        let g = grid(4, 1);
        let m = BinaryMask::new(g.clone(), vec![1, 1, 1, 0]).unwrap();
        let perm = BinaryMask::new(g.clone(), vec![1, 0, 0, 0]).unwrap();
        let seas = BinaryMask::new(g.clone(), vec![0, 1, 0, 0]).unwrap();
        let out = exclude_water(&m, Some(&perm), Some(&seas), true).unwrap();
        assert_eq!(out.values(), &[0, 0, 1, 0]);
        let out = exclude_water(&m, Some(&perm), Some(&seas), false).unwrap();
        assert_eq!(out.values(), &[0, 1, 1, 0]);

        let lc = ClassPlane::new(g.clone(), vec![40, 50, 40, 50]).unwrap();
        let set: BTreeSet<u16> = DEFAULT_EXCLUDED_LANDCOVER.into_iter().collect();
        assert_eq!(exclude_landcover(&m, &lc, &set).unwrap().values(), &[1, 0, 1, 0]);
        assert_eq!(exclude_landcover(&m, &lc, &BTreeSet::new()).unwrap(), m);
        let other = BinaryMask::filled(grid(2, 2), 0);
        assert!(exclude_water(&m, Some(&other), None, true).is_err());
    }

    #[test]
    fn class_plane_from_f32() {
        let p = ClassPlane::from_f32(grid(3, 1), &[40.0, f32::NAN, 10.0]).unwrap();
        assert_eq!(p.codes, vec![40, 0, 10]);
        assert!(ClassPlane::from_f32(grid(1, 1), &[1.5]).is_err());
    }
}
