use std::fs;

use anyhow::{bail, Context, Result};
use log::info;
use phenorice_core::classifier::{classify_district, ClassPlane, DistrictCalibration, ExclusionInputs};
use phenorice_core::cube_io::{read_aux_plane, read_cube};
use phenorice_core::raster::BinaryMask;

use super::{require_dir, write_json};
use crate::manifest::RunRecorder;
use crate::masks::{write_masks, FINAL_LAYER};
use crate::ClassifyArgs;

pub fn run(args: &ClassifyArgs) -> Result<()> {
    let mut rec = RunRecorder::start("classify");
    require_dir(&args.cube, "cube")?;
    rec.input("cube", &args.cube)?;
    rec.calibration(&args.calib)?;
    let cube = read_cube(&args.cube)?;
    let calib = DistrictCalibration::load(&args.calib)?;
    if calib.district != cube.district() {
        bail!(
            "calibration is for {} but the cube covers {}",
            calib.district,
            cube.district()
        );
    }
    let grid = cube.grid().clone();
    let mut exclusions = ExclusionInputs::default();
    if let Some(p) = &args.landcover {
        rec.input("landcover", p)?;
        exclusions.landcover = Some(ClassPlane::from_f32(grid.clone(), &read_aux_plane(p, &grid)?)?);
    }
    if let Some(p) = &args.water_perm {
        rec.input("water_perm", p)?;
        exclusions.water_permanent = Some(BinaryMask::from_f32(grid.clone(), &read_aux_plane(p, &grid)?)?);
    }
    if let Some(p) = &args.water_seas {
        rec.input("water_seas", p)?;
        exclusions.water_seasonal = Some(BinaryMask::from_f32(grid.clone(), &read_aux_plane(p, &grid)?)?);
    }
    rec.mark("read");

    let result = classify_district(&cube, &calib, &exclusions)?;
    rec.mark("classify");

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut layers: Vec<(String, &BinaryMask)> = result
        .stage_masks
        .iter()
        .map(|(stage, m)| (format!("stage_{stage}"), m))
        .collect();
    layers.push(("combined".into(), &result.combined));
    layers.push(("excluded".into(), &result.excluded));
    layers.push((FINAL_LAYER.into(), &result.final_mask));
    let mut written = write_masks(&args.out, cube.district(), &layers, args.pgm)?;
    written.push(write_json(&args.out.join("diagnostics.json"), &result.diagnostics)?);
    rec.mark("write");
    info!(
        "{}: {} paddy pixels, {:.2} ha",
        cube.district(),
        result.diagnostics.final_ones,
        result.diagnostics.final_area_ha
    );
    rec.finish(&args.out, &written)?;
    Ok(())
}
