//! Labeled reference polygons and their rasterization onto a grid.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::district::normalize_district_name;
use crate::error::{Error, Result};
use crate::raster::GeoGrid;
use crate::validation::FieldSizeCategory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddyClass {
    Paddy,
    NonPaddy,
}

impl PaddyClass {
    pub fn name(self) -> &'static str {
        match self {
            PaddyClass::Paddy => "paddy",
            PaddyClass::NonPaddy => "non_paddy",
        }
    }

    pub fn from_mask_value(v: u8) -> PaddyClass {
        if v == 1 {
            PaddyClass::Paddy
        } else {
            PaddyClass::NonPaddy
        }
    }
}

impl fmt::Display for PaddyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PaddyClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "paddy" => Ok(PaddyClass::Paddy),
            "non_paddy" => Ok(PaddyClass::NonPaddy),
            other => Err(Error::InvalidReference(format!("unknown class '{other}'"))),
        }
    }
}

/// A ring is a closed or open list of `[x, y]` vertices.
pub type Ring = Vec<[f64; 2]>;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolygon {
    pub id: String,
    pub district: String,
    pub class: PaddyClass,
    pub area_ha: f64,
    /// Parts of a (multi)polygon; each part is an outer ring followed by holes.
    pub parts: Vec<Vec<Ring>>,
}

impl ReferencePolygon {
    pub fn category(&self) -> Result<FieldSizeCategory> {
        FieldSizeCategory::from_area_ha(self.area_ha)
    }

    /// Even-odd containment over every ring of every part.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let mut inside = false;
        for ring in self.parts.iter().flatten() {
            let n = ring.len();
            if n < 3 {
                continue;
            }
            let mut j = n - 1;
            for i in 0..n {
                let ([xi, yi], [xj, yj]) = (ring[i], ring[j]);
                if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
                j = i;
            }
        }
        inside
    }

    fn bbox(&self) -> Option<(f64, f64, f64, f64)> {
        let mut it = self.parts.iter().flatten().flatten();
        let first = it.next()?;
        Some(
            it.fold((first[0], first[1], first[0], first[1]), |(x0, y0, x1, y1), p| {
                (x0.min(p[0]), y0.min(p[1]), x1.max(p[0]), y1.max(p[1]))
            }),
        )
    }

    /// Row-major indices of pixels whose centers fall inside the polygon.
    pub fn rasterize(&self, grid: &GeoGrid) -> Vec<usize> {
        let Some((x0, y0, x1, y1)) = self.bbox() else {
            return Vec::new();
        };
        let ps = grid.pixel_size;
        let clamp = |v: f64, max: usize| -> usize { v.max(0.0).min(max as f64) as usize };
        let c0 = clamp(((x0 - grid.origin_x) / ps).floor(), grid.width);
        let c1 = clamp(((x1 - grid.origin_x) / ps).ceil(), grid.width);
        let r0 = clamp(((grid.origin_y - y1) / ps).floor(), grid.height);
        let r1 = clamp(((grid.origin_y - y0) / ps).ceil(), grid.height);
        let mut out = Vec::new();
        for r in r0..r1 {
            for c in c0..c1 {
                let (x, y) = grid.pixel_center(r, c);
                if self.contains(x, y) {
                    out.push(r * grid.width + c);
                }
            }
        }
        out
    }
}

fn parse_ring(v: &Value) -> Result<Ring> {
    let pts = v
        .as_array()
        .ok_or_else(|| Error::InvalidReference("ring is not an array".into()))?;
    pts.iter()
        .map(|p| match p.as_array().map(|a| a.as_slice()) {
            Some([x, y, ..]) => match (x.as_f64(), y.as_f64()) {
                (Some(x), Some(y)) => Ok([x, y]),
                _ => Err(Error::InvalidReference("non-numeric coordinate".into())),
            },
            _ => Err(Error::InvalidReference("coordinate needs two numbers".into())),
        })
        .collect()
}

fn parse_polygon(v: &Value) -> Result<Vec<Ring>> {
    v.as_array()
        .ok_or_else(|| Error::InvalidReference("polygon coordinates are not an array".into()))?
        .iter()
        .map(parse_ring)
        .collect()
}

fn parse_feature(i: usize, f: &Value) -> Result<ReferencePolygon> {
    let props = f
        .get("properties")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::InvalidReference(format!("feature {i} has no properties")))?;
    let text = |key: &str| -> Result<&str> {
        props
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::InvalidReference(format!("feature {i} lacks string property '{key}'")))
    };
    let class: PaddyClass = text("class")?.parse()?;
    let district = normalize_district_name(text("district")?)?;
    let area_ha = props
        .get("area_ha")
        .and_then(Value::as_f64)
        .ok_or_else(|| Error::InvalidReference(format!("feature {i} lacks numeric 'area_ha'")))?;
    if !(area_ha > 0.0) || !area_ha.is_finite() {
        return Err(Error::InvalidReference(format!("feature {i} has area_ha {area_ha}")));
    }
    let id = match f.get("id").or_else(|| props.get("id")) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => format!("feature-{i}"),
    };
    let geom = f
        .get("geometry")
        .ok_or_else(|| Error::InvalidReference(format!("feature {i} has no geometry")))?;
    let coords = geom
        .get("coordinates")
        .ok_or_else(|| Error::InvalidReference(format!("feature {i} geometry has no coordinates")))?;
    let parts = match geom.get("type").and_then(Value::as_str) {
        Some("Polygon") => vec![parse_polygon(coords)?],
        Some("MultiPolygon") => coords
            .as_array()
            .ok_or_else(|| Error::InvalidReference("multipolygon coordinates are not an array".into()))?
            .iter()
            .map(parse_polygon)
            .collect::<Result<_>>()?,
        other => {
            return Err(Error::InvalidReference(format!(
                "feature {i}: unsupported geometry type {other:?}"
            )))
        }
    };
    Ok(ReferencePolygon {
        id,
        district,
        class,
        area_ha,
        parts,
    })
}

/// Parses a GeoJSON FeatureCollection with `class`, `district` and `area_ha` properties.
pub fn parse_reference_geojson(text: &str, context: &str) -> Result<Vec<ReferencePolygon>> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::json(context, e))?;
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(Error::InvalidReference(format!("{context}: not a FeatureCollection")));
    }
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::InvalidReference(format!("{context}: missing features")))?;
    features.iter().enumerate().map(|(i, f)| parse_feature(i, f)).collect()
}

pub fn read_reference_geojson(path: &Path) -> Result<Vec<ReferencePolygon>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_reference_geojson(&text, &path.display().to_string())
}

/// Serializes polygons back to a FeatureCollection.
pub fn to_geojson(polys: &[ReferencePolygon]) -> Value {
    let features: Vec<Value> = polys
        .iter()
        .map(|p| {
            let coords: Vec<Value> = p
                .parts
                .iter()
                .map(|rings| serde_json::to_value(rings).expect("rings serialize"))
                .collect();
            serde_json::json!({
                "type": "Feature",
                "id": p.id,
                "properties": {"class": p.class.name(), "district": p.district, "area_ha": p.area_ha},
                "geometry": {"type": "MultiPolygon", "coordinates": coords},
            })
        })
        .collect();
    serde_json::json!({"type": "FeatureCollection", "features": features})
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterizedPolygon {
    pub polygon: ReferencePolygon,
    pub category: FieldSizeCategory,
    pub pixels: Vec<usize>,
}

/// Rasterizes the polygons of `district` onto `grid`. A polygon without interior pixels is an error.
pub fn rasterize_district(
    polys: &[ReferencePolygon],
    district: &str,
    grid: &GeoGrid,
) -> Result<Vec<RasterizedPolygon>> {
    polys
        .iter()
        .filter(|p| p.district == district)
        .map(|p| {
            let pixels = p.rasterize(grid);
            if pixels.is_empty() {
                return Err(Error::InvalidReference(format!(
                    "polygon {} covers no pixel center of the {district} grid",
                    p.id
                )));
            }
            Ok(RasterizedPolygon {
                category: p.category()?,
                polygon: p.clone(),
                pixels,
            })
        })
        .collect()
}

/// Axis-aligned rectangle covering pixels `[r0, r1) x [c0, c1)` of `grid`.
pub fn rectangle_polygon(
    grid: &GeoGrid,
    id: impl Into<String>,
    district: &str,
    class: PaddyClass,
    rows: (usize, usize),
    cols: (usize, usize),
) -> ReferencePolygon {
    let ps = grid.pixel_size;
    let x0 = grid.origin_x + cols.0 as f64 * ps;
    let x1 = grid.origin_x + cols.1 as f64 * ps;
    let y0 = grid.origin_y - rows.0 as f64 * ps;
    let y1 = grid.origin_y - rows.1 as f64 * ps;
    let n = (rows.1 - rows.0) * (cols.1 - cols.0);
    ReferencePolygon {
        id: id.into(),
        district: district.to_string(),
        class,
        area_ha: n as f64 * grid.pixel_area_m2() / 10_000.0,
        parts: vec![vec![vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]]],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GeoGrid {
        GeoGrid::new(1000.0, 2000.0, 10.0, 10, 10, "x").unwrap()
    }

    #[test]
    fn rectangle_rasterizes_to_its_pixels() {
        let g = grid();
        let p = rectangle_polygon(&g, "a", "Nalgonda", PaddyClass::Paddy, (2, 4), (3, 6));
        let px = p.rasterize(&g);
        assert_eq!(px, vec![23, 24, 25, 33, 34, 35]);
        assert!((p.area_ha - 0.06).abs() < 1e-12);
    }

    #[test]
    fn holes_are_excluded() {
        let g = grid();
        let mut p = rectangle_polygon(&g, "a", "Nalgonda", PaddyClass::Paddy, (0, 5), (0, 5));
        let hole = rectangle_polygon(&g, "h", "Nalgonda", PaddyClass::Paddy, (2, 3), (2, 3));
        p.parts[0].push(hole.parts[0][0].clone());
        let px = p.rasterize(&g);
        assert_eq!(px.len(), 24);
        assert!(!px.contains(&22));
    }

    #[test]
    fn geojson_round_trip_and_errors() {
        let g = grid();
        let polys = vec![
            rectangle_polygon(&g, "a", "Nalgonda", PaddyClass::Paddy, (0, 2), (0, 2)),
            rectangle_polygon(&g, "b", "Suryapet", PaddyClass::NonPaddy, (5, 9), (5, 9)),
        ];
        let text = to_geojson(&polys).to_string();
        let back = parse_reference_geojson(&text, "t").unwrap();
        assert_eq!(back, polys);

        let mut v = to_geojson(&polys);
        v["features"][0]["properties"]["class"] = serde_json::json!("maize");
        assert!(parse_reference_geojson(&v.to_string(), "t").is_err());
        let mut v = to_geojson(&polys);
        v["features"][0]["properties"]["area_ha"] = serde_json::json!(0.0);
        assert!(parse_reference_geojson(&v.to_string(), "t").is_err());
        let mut v = to_geojson(&polys);
        v["features"][1]["properties"]["district"] = serde_json::json!("Warangal Urban");
        assert_eq!(
            parse_reference_geojson(&v.to_string(), "t").unwrap()[1].district,
            "Hanumakonda"
        );
    }

    #[test]
    fn district_filter_and_empty_polygons() {
        let g = grid();
        let far = GeoGrid::new(0.0, 0.0, 10.0, 10, 10, "x").unwrap();
        let polys = vec![
            rectangle_polygon(&g, "a", "Nalgonda", PaddyClass::Paddy, (0, 2), (0, 2)),
            rectangle_polygon(&far, "b", "Suryapet", PaddyClass::Paddy, (0, 2), (0, 2)),
        ];
        let r = rasterize_district(&polys, "Nalgonda", &g).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].category, FieldSizeCategory::Tiny);
        assert!(rasterize_district(&polys, "Suryapet", &g).is_err());
    }
}
