use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use phenorice_core::calibration::{
    compare_modes, detect_windows, ledger_csv, optimize_district, prepare_index_cubes, CalibrationOptions,
    ClusterAssignment, DistrictInput,
};
use phenorice_core::cube_io::read_cube;
use phenorice_core::district::normalize_district_name;
use phenorice_core::indices::IndexKind;
use phenorice_core::phenology::{DateRange, StageWindows, TransitionThresholds};
use phenorice_core::reference::{rasterize_district, read_reference_geojson, PaddyClass, ReferencePolygon};
use phenorice_core::Error;

use super::{require_dir, write_json, write_text};
use crate::manifest::RunRecorder;
use crate::{CalibrateArgs, Mode};

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "calibration".into());
    out.with_file_name(format!("{stem}{suffix}"))
}

fn out_dir(out: &Path) -> Result<PathBuf> {
    let dir = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Loads one district: index cubes, rasterized references and detected windows.
fn load_district(cube_dir: &Path, polys: &[ReferencePolygon], opts: &mut CalibrationOptions) -> Result<DistrictInput> {
    require_dir(cube_dir, "cube")?;
    let cube = read_cube(cube_dir)?;
    let district = cube.district().to_string();
    let refs = rasterize_district(polys, &district, cube.grid())?;
    let paddy = refs.iter().filter(|r| r.polygon.class == PaddyClass::Paddy).count();
    if paddy == 0 || paddy == refs.len() {
        return Err(Error::SingleClass(format!(
            "{district}: {paddy} paddy of {} reference polygons",
            refs.len()
        ))
        .into());
    }
    let cubes = prepare_index_cubes(&cube, opts.outlier.temporal_k)?;
    let (windows, diags) = detect_windows(&cubes[&IndexKind::Ndvi], &refs, &TransitionThresholds::default())?;
    for d in &diags {
        info!(
            "{district}: {} begins {} ({} of {} fields crossed)",
            d.stage, d.date, d.fields_crossed, d.fields_total
        );
        if !d.multi_crossing_fields.is_empty() {
            warn!(
                "{district}: {} fields crossed the {} threshold more than once",
                d.multi_crossing_fields.len(),
                d.stage
            );
        }
    }
    flag_atypical(&district, &windows, opts);
    let dates = cube.dates();
    let span = DateRange::new(dates[0], dates[dates.len() - 1])?;
    opts.season = Some(match opts.season {
        Some(s) => DateRange::new(s.start.min(span.start), s.end.max(span.end))?,
        None => span,
    });
    Ok(DistrictInput {
        district,
        cubes,
        windows,
        refs,
    })
}

fn flag_atypical(district: &str, windows: &StageWindows, opts: &mut CalibrationOptions) {
    for (stage, days) in windows.atypical_durations() {
        warn!("{district}: detected {stage} window of {days} days kept; calibration flagged for review");
        opts.allow_atypical_durations = true;
    }
}

pub fn run(args: &CalibrateArgs) -> Result<()> {
    let mut rec = RunRecorder::start("calibrate");
    let district = normalize_district_name(&args.district)?;
    rec.input("refs", &args.refs)?;
    for (i, c) in args.cube.iter().enumerate() {
        require_dir(c, "cube")?;
        rec.input(&format!("cube.{i}"), c)?;
    }
    let polys = read_reference_geojson(&args.refs)?;
    let dir = out_dir(&args.out)?;
    let mut opts = CalibrationOptions::default();
    let mut written = Vec::new();

    match args.mode {
        Mode::District => {
            if args.cube.len() != 1 {
                bail!("district mode takes exactly one --cube, got {}", args.cube.len());
            }
            let input = load_district(&args.cube[0], &polys, &mut opts)?;
            if input.district != district {
                bail!("cube belongs to {}, not {district}", input.district);
            }
            rec.mark("prepare");
            let mut outcome = optimize_district(&district, &input.cubes, &input.windows, &input.refs, &opts)?;
            if opts.allow_atypical_durations {
                outcome.calibration.needs_manual_review = true;
            }
            rec.mark("optimize");
            outcome.calibration.save(&args.out)?;
            written.push(args.out.clone());
            written.push(write_text(
                &sibling(&args.out, ".ledger.csv"),
                &ledger_csv(&outcome.ledger),
            )?);
        }
        Mode::Cluster => {
            let path = args.clusters.as_ref().expect("required by the parser");
            rec.input("clusters", path)?;
            let clusters = ClusterAssignment::load(path)?;
            let mut inputs = Vec::new();
            for c in &args.cube {
                inputs.push(load_district(c, &polys, &mut opts)?);
            }
            if !inputs.iter().any(|i| i.district == district) {
                bail!("no --cube for {district}");
            }
            rec.mark("prepare");
            let outcome = compare_modes(&inputs, &clusters, &opts)?;
            rec.mark("optimize");
            let own = clusters
                .cluster_of(&district)
                .ok_or_else(|| Error::UnmatchedDistricts(vec![district.clone()]))?
                .to_string();
            let mut by_cluster = BTreeMap::new();
            for (name, o) in &outcome.cluster_calibrations {
                let mut cal = o.calibration.clone();
                cal.needs_manual_review |= opts.allow_atypical_durations;
                let p = sibling(&args.out, &format!(".cluster-{name}.json"));
                cal.save(&p)?;
                written.push(p);
                by_cluster.insert(name.clone(), cal);
            }
            let mut cal = by_cluster[&own].clone();
            cal.district = district.clone();
            cal.save(&args.out)?;
            written.push(args.out.clone());
            written.push(write_text(
                &sibling(&args.out, ".ledger.csv"),
                &ledger_csv(&outcome.cluster_calibrations[&own].ledger),
            )?);
            written.push(write_json(&sibling(&args.out, ".modes.json"), &outcome.comparison)?);
            info!(
                "mean accuracy: district mode {:.4}, cluster mode {:.4}",
                outcome.comparison.mean_district_accuracy, outcome.comparison.mean_cluster_accuracy
            );
        }
    }
    rec.mark("write");
    rec.finish(&dir, &written)?;
    Ok(())
}
