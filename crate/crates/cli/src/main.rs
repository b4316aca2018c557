//! `phenorice`: preprocess reflectance cubes, calibrate district thresholds,
//! classify paddy and validate the resulting maps.

mod commands;
mod logging;
mod manifest;
mod masks;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_INTERNAL: u8 = 3;
pub const THREADS_ENV: &str = "PHENORICE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "phenorice", version, about = "Phenology-based rice paddy mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Drop cloudy scenes, mask cloudy pixels and scale reflectance to 0-1.
    Preprocess(PreprocessArgs),
    /// Derive a district calibration from reference polygons.
    Calibrate(CalibrateArgs),
    /// Classify paddy for one district.
    Classify(ClassifyArgs),
    /// Sample validation points and compare mapped with official areas.
    Validate(ValidateArgs),
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub qa: PathBuf,
    #[arg(long, default_value_t = phenorice_core::preprocess::DEFAULT_SCALE)]
    pub scale: f64,
    #[arg(long, default_value_t = phenorice_core::preprocess::DEFAULT_MAX_CLOUD_FRACTION)]
    pub max_cloud: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    District,
    Cluster,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// Cube directory; repeat once per district in cluster mode.
    #[arg(long, required = true)]
    pub cube: Vec<PathBuf>,
    #[arg(long)]
    pub refs: PathBuf,
    #[arg(long)]
    pub district: String,
    #[arg(long, value_enum, default_value_t = Mode::District)]
    pub mode: Mode,
    #[arg(long, required_if_eq("mode", "cluster"))]
    pub clusters: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub landcover: Option<PathBuf>,
    #[arg(long)]
    pub water_perm: Option<PathBuf>,
    #[arg(long)]
    pub water_seas: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write greyscale PGM images of every mask layer.
    #[arg(long)]
    pub pgm: bool,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    /// Glob matching classify output directories.
    #[arg(long)]
    pub masks: String,
    #[arg(long)]
    pub refs: PathBuf,
    #[arg(long)]
    pub official: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure of an internal consistency check rather than of the inputs.
#[derive(Debug)]
pub struct Internal(pub String);

impl std::fmt::Display for Internal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "internal invariant violated: {}", self.0)
    }
}

impl std::error::Error for Internal {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Internal>() {
            return EXIT_INTERNAL;
        }
        if let Some(e) = cause.downcast_ref::<phenorice_core::Error>() {
            return if e.is_internal() { EXIT_INTERNAL } else { EXIT_INPUT };
        }
    }
    EXIT_INPUT
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| anyhow::anyhow!("{THREADS_ENV} must be a positive integer, got '{raw}'"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Internal(format!("thread pool: {e}")))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Preprocess(a) => commands::preprocess::run(&a),
        Command::Calibrate(a) => commands::calibrate::run(&a),
        Command::Classify(a) => commands::classify::run(&a),
        Command::Validate(a) => commands::validate::run(&a),
    }
}

fn main() -> ExitCode {
    logging::init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INPUT)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_kind() {
        let input = anyhow::Error::new(phenorice_core::Error::UnknownDistrict("Atlantis".into()));
        assert_eq!(exit_code(&input), EXIT_INPUT);
        let internal = anyhow::Error::new(phenorice_core::Error::Invariant("x".into())).context("classify");
        assert_eq!(exit_code(&internal), EXIT_INTERNAL);
        assert_eq!(exit_code(&anyhow::Error::new(Internal("y".into()))), EXIT_INTERNAL);
        assert_eq!(exit_code(&anyhow::anyhow!("missing file")), EXIT_INPUT);
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "phenorice",
            "calibrate",
            "--cube",
            "a",
            "--cube",
            "b",
            "--refs",
            "r.geojson",
            "--district",
            "Nalgonda",
            "--mode",
            "cluster",
            "--clusters",
            "c.json",
            "--out",
            "cal.json",
        ])
        .unwrap();
        match cli.command {
            Command::Calibrate(a) => {
                assert_eq!(a.cube.len(), 2);
                assert_eq!(a.mode, Mode::Cluster);
            }
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from([
            "phenorice",
            "calibrate",
            "--cube",
            "a",
            "--refs",
            "r",
            "--district",
            "Nalgonda",
            "--mode",
            "cluster",
            "--out",
            "o"
        ])
        .is_err());
        let cli = Cli::try_parse_from(["phenorice", "preprocess", "--cube", "c", "--qa", "q", "--out", "o"]).unwrap();
        match cli.command {
            Command::Preprocess(a) => assert_eq!((a.scale, a.max_cloud), (10_000.0, 0.8)),
            other => panic!("{other:?}"),
        }
    }
}
