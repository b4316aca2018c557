#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use phenorice_core::cube_io::write_cube;
use phenorice_core::preprocess::{write_qa, QaPlane};
use phenorice_core::raster::ReflectanceCube;
use phenorice_core::reference::{to_geojson, ReferencePolygon};
use phenorice_core::synthetic::{generate, reference_calibration, Layout, SceneConfig, SyntheticScene, TrajectoryKind};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_phenorice"));
    c.env("RUST_LOG", "info").env_remove("PHENORICE_THREADS");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn run_with_threads(args: &[&str], threads: usize) -> Output {
    bin()
        .env("PHENORICE_THREADS", threads.to_string())
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

pub fn config(district: &str, seed: u64) -> SceneConfig {
    SceneConfig {
        district: district.into(),
        seed,
        ..SceneConfig::default()
    }
}

pub fn mixed_scene(cfg: &SceneConfig) -> SyntheticScene {
    let layout = Layout::grouped_fields(
        &[
            (TrajectoryKind::Rice, 24),
            (TrajectoryKind::FlatHigh, 8),
            (TrajectoryKind::FlatLow, 8),
            (TrajectoryKind::Wetland, 8),
        ],
        3,
        8,
    );
    generate(cfg, &layout).expect("synthetic scene")
}

pub fn write_refs(path: &Path, polys: &[ReferencePolygon]) {
    fs::write(path, to_geojson(polys).to_string()).unwrap();
}

/// Normalized cube, references and the hand-set calibration for one district.
pub struct Fixture {
    pub cube: PathBuf,
    pub refs: PathBuf,
    pub calib: PathBuf,
    pub scene: SyntheticScene,
}

pub fn fixture(root: &Path, district: &str, seed: u64) -> Fixture {
    let cfg = config(district, seed);
    let scene = mixed_scene(&cfg);
    let cube = root.join(format!("cube_{district}"));
    write_cube(&scene.cube, &cube).unwrap();
    let refs = root.join(format!("refs_{district}.geojson"));
    write_refs(&refs, &scene.polygons);
    let calib = root.join(format!("calib_{district}.json"));
    reference_calibration(&cfg).save(&calib).unwrap();
    Fixture {
        cube,
        refs,
        calib,
        scene,
    }
}

/// Writes the scene at digital-number scale plus QA planes; `cloudy` gives the
/// fraction of cloud-flagged pixels per date index.
pub fn write_raw_with_qa(scene: &SyntheticScene, cube_dir: &Path, qa_dir: &Path, cloudy: &[(usize, f64)]) {
    let c = &scene.cube;
    let raw: Vec<f32> = c.values().iter().map(|v| (v * 10_000.0).round()).collect();
    let scaled = ReflectanceCube::new(
        c.grid().clone(),
        c.district(),
        c.dates().to_vec(),
        c.bands().to_vec(),
        raw,
        c.nodata(),
    )
    .unwrap();
    write_cube(&scaled, cube_dir).unwrap();
    let n = c.grid().len();
    let planes: Vec<QaPlane> = c
        .dates()
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let frac = cloudy.iter().find(|(j, _)| *j == i).map_or(0.0, |x| x.1);
            let flagged = (frac * n as f64).round() as usize;
            QaPlane {
                date: *d,
                grid: c.grid().clone(),
                values: (0..n).map(|p| if p < flagged { 1 << 10 } else { 0 }).collect(),
            }
        })
        .collect();
    write_qa(&planes, qa_dir, c.district()).unwrap();
}

/// Every file below `dir` with its bytes, run manifests reduced to their
/// non-timing fields.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            let mut bytes = fs::read(&path).unwrap();
            if path.file_name().unwrap() == "run_manifest.json" {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v.as_object_mut().unwrap().remove("timing");
                bytes = serde_json::to_vec(&v).unwrap();
            }
            out.push((rel, bytes));
        }
    }
    out.sort();
    out
}
