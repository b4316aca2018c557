use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use phenorice_core::reference::{rasterize_district, read_reference_geojson};
use phenorice_core::validation::{
    area_from_mask, build_report, category_csv, read_official_csv, report_csv, stratify_samples, ReportInputs,
    SamplingPlan, ValidationPoint,
};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{write_json, write_text};
use crate::manifest::{self, RunRecorder, RUN_MANIFEST};
use crate::masks::{read_mask, FINAL_LAYER, MASK_MANIFEST};
use crate::ValidateArgs;

/// Classify output directories matched by `pattern`, sorted.
fn mask_dirs(pattern: &str) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in glob::glob(pattern).with_context(|| format!("bad glob '{pattern}'"))? {
        let path = entry?;
        let dir = if path.is_dir() {
            path
        } else if path.file_name().is_some_and(|n| n == MASK_MANIFEST) {
            path.parent().map(PathBuf::from).unwrap_or_default()
        } else {
            continue;
        };
        if dir.join(MASK_MANIFEST).is_file() {
            dirs.push(dir);
        }
    }
    dirs.sort();
    dirs.dedup();
    if dirs.is_empty() {
        bail!("--masks '{pattern}' matched no classification output");
    }
    Ok(dirs)
}

fn points_csv(points: &[ValidationPoint]) -> String {
    let mut out = String::from("polygon_id,district,category,row,col,x,y,truth,predicted\n");
    let name = |c: Option<phenorice_core::reference::PaddyClass>| c.map(|c| c.name()).unwrap_or("");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{:.3},{:.3},{},{}\n",
            p.polygon_id,
            p.district,
            p.category,
            p.row,
            p.col,
            p.x,
            p.y,
            name(p.truth),
            name(p.predicted)
        ));
    }
    out
}

pub fn run(args: &ValidateArgs) -> Result<()> {
    let mut rec = RunRecorder::start("validate");
    rec.seed(args.seed);
    rec.input("refs", &args.refs)?;
    rec.input("official", &args.official)?;
    let official = read_official_csv(&args.official)?;
    let polys = read_reference_geojson(&args.refs)?;
    let dirs = mask_dirs(&args.masks)?;

    let mut masks = BTreeMap::new();
    for dir in &dirs {
        if dir.join(RUN_MANIFEST).is_file() {
            manifest::verify(dir)?;
        }
        let (man, mask) = read_mask(dir, FINAL_LAYER)?;
        let district = phenorice_core::district::normalize_district_name(&man.district)?;
        let digest = manifest::digest_path(dir)?;
        if masks.insert(district.clone(), (mask, digest)).is_some() {
            bail!("more than one mask for {district}");
        }
    }
    for (district, (_, digest)) in &masks {
        rec.input_digest(&format!("mask.{district}"), digest.clone());
    }
    rec.mark("read");

    // one generator hands each district its sampling seed, in name order
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let plan = SamplingPlan::default();
    let mut inputs = ReportInputs {
        seed: Some(args.seed),
        official,
        ..ReportInputs::default()
    };
    for (district, (mask, _)) in &masks {
        let district_seed = rng.next_u64();
        inputs.mapped_ha.push((district.clone(), area_from_mask(mask)));
        let refs = rasterize_district(&polys, district, &mask.grid)?;
        if refs.is_empty() {
            warn!("{district}: no reference polygons; area only");
            continue;
        }
        let points = stratify_samples(&refs, mask, &plan, district_seed)?;
        info!("{district}: {} validation points", points.len());
        inputs.points.extend(points);
    }
    rec.mark("sample");
    let report = build_report(&inputs)?;
    rec.mark("report");

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let written = vec![
        write_json(&args.out.join("report.json"), &report)?,
        write_text(&args.out.join("report.csv"), &report_csv(&report))?,
        write_text(&args.out.join("categories.csv"), &category_csv(&report))?,
        write_text(&args.out.join("points.csv"), &points_csv(&inputs.points))?,
    ];
    rec.mark("write");
    rec.finish(&args.out, &written)?;
    Ok(())
}
