use std::fs;

use anyhow::{Context, Result};
use chrono::NaiveDate;
use log::info;
use phenorice_core::cube_io::{read_cube, write_cube};
use phenorice_core::preprocess::{drop_cloudy_scenes, mask_cloud_pixels, normalize_reflectance, read_qa, QaConfig};
use serde::Serialize;

use super::{require_dir, write_json};
use crate::manifest::{files_under, RunRecorder};
use crate::PreprocessArgs;

#[derive(Serialize)]
struct DroppedScene {
    date: NaiveDate,
    cloud_fraction: f64,
}

#[derive(Serialize)]
struct PreprocessReport {
    district: String,
    scale: f64,
    max_cloud: f64,
    kept_dates: Vec<NaiveDate>,
    dropped: Vec<DroppedScene>,
}

pub fn run(args: &PreprocessArgs) -> Result<()> {
    let mut rec = RunRecorder::start("preprocess");
    require_dir(&args.cube, "cube")?;
    require_dir(&args.qa, "QA")?;
    rec.input("cube", &args.cube)?;
    rec.input("qa", &args.qa)?;
    let cube = read_cube(&args.cube)?;
    let qa = read_qa(&args.qa)?;
    rec.mark("read");

    let cfg = QaConfig::default();
    let screening = drop_cloudy_scenes(&cube, &qa, args.max_cloud, &cfg)?;
    for (date, f) in &screening.dropped {
        info!("dropped {date}: cloud fraction {f:.3} exceeds {}", args.max_cloud);
    }
    let masked = mask_cloud_pixels(&screening.cube, &screening.qa, &cfg)?;
    let cleaned = normalize_reflectance(&masked, args.scale)?;
    rec.mark("clean");

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_cube(&cleaned, &args.out)?;
    let report = PreprocessReport {
        district: cleaned.district().to_string(),
        scale: args.scale,
        max_cloud: args.max_cloud,
        kept_dates: cleaned.dates().to_vec(),
        dropped: screening
            .dropped
            .iter()
            .map(|(date, cloud_fraction)| DroppedScene {
                date: *date,
                cloud_fraction: *cloud_fraction,
            })
            .collect(),
    };
    write_json(&args.out.join("preprocess_report.json"), &report)?;
    rec.mark("write");
    info!(
        "{}: kept {} of {} dates",
        cleaned.district(),
        cleaned.dates().len(),
        cube.dates().len()
    );
    rec.finish(&args.out, &files_under(&args.out)?)?;
    Ok(())
}
