//! Spectral indices computed from normalized reflectance.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Band, IndexCube, ReflectanceCube};

/// Denominators smaller than this in magnitude yield nodata.
pub const DENOMINATOR_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IndexKind {
    #[serde(rename = "NDVI")]
    Ndvi,
    #[serde(rename = "MNDWI")]
    Mndwi,
    #[serde(rename = "LSWI")]
    Lswi,
    #[serde(rename = "EVI")]
    Evi,
    #[serde(rename = "SAVI")]
    Savi,
}

impl IndexKind {
    pub const ALL: [IndexKind; 5] = [
        IndexKind::Ndvi,
        IndexKind::Mndwi,
        IndexKind::Lswi,
        IndexKind::Evi,
        IndexKind::Savi,
    ];

    pub fn position(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            IndexKind::Ndvi => "NDVI",
            IndexKind::Mndwi => "MNDWI",
            IndexKind::Lswi => "LSWI",
            IndexKind::Evi => "EVI",
            IndexKind::Savi => "SAVI",
        }
    }

    pub fn required_bands(self) -> &'static [Band] {
        match self {
            IndexKind::Ndvi | IndexKind::Savi => &[Band::B4, Band::B8],
            IndexKind::Mndwi => &[Band::B3, Band::B11],
            IndexKind::Lswi => &[Band::B8, Band::B11],
            IndexKind::Evi => &[Band::B2, Band::B4, Band::B8],
        }
    }

    /// Evaluates the index for one pixel. `None` when the denominator vanishes.
    pub fn evaluate(self, r: &BandValues) -> Option<f64> {
        let (num, den, gain) = match self {
            IndexKind::Ndvi => (r.b8 - r.b4, r.b8 + r.b4, 1.0),
            IndexKind::Mndwi => (r.b3 - r.b11, r.b3 + r.b11, 1.0),
            IndexKind::Lswi => (r.b8 - r.b11, r.b8 + r.b11, 1.0),
            IndexKind::Evi => (r.b8 - r.b4, r.b8 + 6.0 * r.b4 - 7.5 * r.b2 + 1.0, 2.5),
            IndexKind::Savi => (r.b8 - r.b4, r.b8 + r.b4 + 0.5, 1.5),
        };
        if den.abs() < DENOMINATOR_EPS {
            None
        } else {
            Some(gain * num / den)
        }
    }
}

impl fmt::Display for IndexKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IndexKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        IndexKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownIndex(s.to_string()))
    }
}

/// Reflectance of one pixel on one date. Unused bands may be left at 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BandValues {
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub b8: f64,
    pub b11: f64,
}

impl BandValues {
    fn set(&mut self, band: Band, v: f64) {
        match band {
            Band::B2 => self.b2 = v,
            Band::B3 => self.b3 = v,
            Band::B4 => self.b4 = v,
            Band::B8 => self.b8 = v,
            Band::B11 => self.b11 = v,
        }
    }
}

/// Computes one index for every pixel and date of `cube`.
///
/// Any nodata input band, or a near-zero denominator, gives `NaN`.
pub fn compute_index(cube: &ReflectanceCube, kind: IndexKind) -> Result<IndexCube> {
    let needed = kind.required_bands();
    let positions: Vec<(Band, usize)> = needed
        .iter()
        .map(|b| {
            cube.band_index(*b).map(|i| (*b, i)).ok_or_else(|| Error::MissingBand {
                band: b.to_string(),
                purpose: kind.to_string(),
            })
        })
        .collect::<Result<_>>()?;

    let n = cube.grid().len();
    let mut values = vec![f64::NAN; cube.dates().len() * n];
    for (d, out) in values.chunks_mut(n).enumerate() {
        let planes: Vec<(Band, &[f32])> = positions
            .iter()
            .map(|(b, i)| Ok((*b, cube.plane(d, *i)?)))
            .collect::<Result<_>>()?;
        out.par_iter_mut().enumerate().for_each(|(p, slot)| {
            let mut px = BandValues::default();
            for (band, plane) in &planes {
                let v = plane[p];
                if cube.is_nodata(v) {
                    return;
                }
                px.set(*band, v as f64);
            }
            if let Some(v) = kind.evaluate(&px) {
                *slot = v;
            }
        });
    }
    IndexCube::new(
        cube.grid().clone(),
        cube.district(),
        cube.dates().to_vec(),
        kind,
        values,
    )
}

/// Computes several indices, keyed by kind.
pub fn compute_indices(
    cube: &ReflectanceCube,
    kinds: impl IntoIterator<Item = IndexKind>,
) -> Result<BTreeMap<IndexKind, IndexCube>> {
    kinds.into_iter().map(|k| Ok((k, compute_index(cube, k)?))).collect()
}

/// Resolution at which an index is effectively computed.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveResolution {
    pub index: IndexKind,
    pub meters: f64,
    /// Band whose native resolution sets `meters`.
    pub limiting_band: Band,
}

/// Reports the coarsest native resolution among the bands an index reads.
///
/// Bands without a declared native resolution are taken to be at the grid's pixel
/// size, so a cube pre-gridded to one resolution reports that resolution for every
/// index. This is bookkeeping only; no resampling happens here.
pub fn align_to_coarsest(cube: &ReflectanceCube, kind: IndexKind) -> EffectiveResolution {
    let declared = cube.native_resolution();
    let mut best = (kind.required_bands()[0], 0.0_f64);
    for band in kind.required_bands() {
        let res = declared.get(band).copied().unwrap_or(cube.grid().pixel_size);
        if res > best.1 {
            best = (*band, res);
        }
    }
    EffectiveResolution {
        index: kind,
        meters: best.1,
        limiting_band: best.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GeoGrid;

    fn px(b2: f64, b3: f64, b4: f64, b8: f64, b11: f64) -> BandValues {
        BandValues { b2, b3, b4, b8, b11 }
    }

    fn one_pixel_cube(vals: [f32; 5]) -> ReflectanceCube {
        let grid = GeoGrid::new(0.0, 0.0, 10.0, 1, 1, "x").unwrap();
        ReflectanceCube::new(
            grid,
            "Nalgonda",
            vec!["2019-02-01".parse().unwrap()],
            Band::ALL.to_vec(),
            vals.to_vec(),
            f32::NAN,
        )
        .unwrap()
    }

    #[test]
    fn hand_evaluated_examples() {
        let p = px(0.05, 0.0, 0.1, 0.5, 0.0);
        assert_eq!(IndexKind::Ndvi.evaluate(&px(0.0, 0.0, 0.3, 0.3, 0.0)), Some(0.0));
        assert!((IndexKind::Ndvi.evaluate(&p).unwrap() - 0.666667).abs() < 1e-6);
        assert!((IndexKind::Evi.evaluate(&p).unwrap() - 0.579710).abs() < 1e-6);
        assert!((IndexKind::Savi.evaluate(&p).unwrap() - 0.545455).abs() < 1e-6);
        assert_eq!(IndexKind::Mndwi.evaluate(&px(0.0, 0.2, 0.0, 0.0, 0.2)), Some(0.0));
    }

    #[test]
    fn zero_denominator_is_nodata() {
        assert_eq!(IndexKind::Ndvi.evaluate(&px(0.0, 0.0, 0.0, 0.0, 0.0)), None);
        let cube = one_pixel_cube([0.0; 5]);
        assert!(compute_index(&cube, IndexKind::Lswi).unwrap().values[0].is_nan());
    }

    #[test]
    fn nodata_band_propagates() {
        let cube = one_pixel_cube([0.05, 0.1, f32::NAN, 0.5, 0.2]);
        assert!(compute_index(&cube, IndexKind::Ndvi).unwrap().values[0].is_nan());
        // MNDWI does not read B4
        assert!(compute_index(&cube, IndexKind::Mndwi).unwrap().values[0].is_finite());
    }

    #[test]
    fn missing_band_is_reported() {
        let cube = one_pixel_cube([0.05, 0.1, 0.1, 0.5, 0.2])
            .select_bands(&[Band::B4, Band::B8])
            .unwrap();
        let err = compute_index(&cube, IndexKind::Lswi).unwrap_err();
        assert!(matches!(err, Error::MissingBand { .. }));
    }

    #[test]
    fn evi_and_savi_are_not_scale_invariant() {
        let a = px(0.05, 0.0, 0.1, 0.5, 0.0);
        let b = px(0.1, 0.0, 0.2, 1.0, 0.0);
        assert_eq!(
            IndexKind::Ndvi.evaluate(&a).unwrap(),
            IndexKind::Ndvi.evaluate(&b).unwrap()
        );
        assert!((IndexKind::Evi.evaluate(&a).unwrap() - IndexKind::Evi.evaluate(&b).unwrap()).abs() > 1e-3);
        assert!((IndexKind::Savi.evaluate(&a).unwrap() - IndexKind::Savi.evaluate(&b).unwrap()).abs() > 1e-3);
    }

    #[test]
    fn coarsest_resolution_bookkeeping() {
        let cube = one_pixel_cube([0.05, 0.1, 0.1, 0.5, 0.2]);
        for k in IndexKind::ALL {
            assert_eq!(align_to_coarsest(&cube, k).meters, 10.0);
        }
        let res = Band::ALL.iter().map(|b| (*b, b.sentinel2_resolution_m())).collect();
        let cube = cube.with_native_resolution(res);
        let m = align_to_coarsest(&cube, IndexKind::Mndwi);
        assert_eq!(m.meters, 20.0);
        assert_eq!(m.limiting_band, Band::B11);
        assert_eq!(align_to_coarsest(&cube, IndexKind::Ndvi).meters, 10.0);
    }

    #[test]
    fn parse_names() {
        assert_eq!("lswi".parse::<IndexKind>().unwrap(), IndexKind::Lswi);
        assert!("NDWI".parse::<IndexKind>().is_err());
    }
}
