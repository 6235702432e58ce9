//! Flat `key = value` run files. Command-line flags override file values,
//! file values override the environment, and the environment overrides the
//! built-in defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use hetgroups::sim::SimConfig;

use crate::outcome::{CliError, CliResult, Stage};

pub const OUT_DIR_ENV: &str = "HETGROUPS_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "hetgroups-out";

/// Keys shared by every subcommand's run file.
const RUN_KEYS: [&str; 3] = ["out_dir", "jobs", "log_level"];

/// A scalar that may be written as a number or a string (`k = 2`, `k = "auto"`).
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Int(i64),
    Float(f64),
    Text(String),
}

impl Scalar {
    pub fn text(&self) -> String {
        match self {
            Scalar::Int(v) => v.to_string(),
            Scalar::Float(v) => v.to_string(),
            Scalar::Text(s) => s.clone(),
        }
    }
}

/// Run file for `fit`, `test` and `select-k`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub data: Option<PathBuf>,
    pub method: Option<String>,
    pub k: Option<Scalar>,
    pub lambda: Option<Scalar>,
    pub folds: Option<usize>,
    pub k_max: Option<usize>,
    pub b_refs: Option<usize>,
    pub kind: Option<String>,
    pub fit_dir: Option<PathBuf>,
    pub standardize: Option<bool>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub log_level: Option<String>,
}

/// Settings read from a run file that apply before any subcommand work.
#[derive(Debug, Clone, Default)]
pub struct RunSettings {
    pub out_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub log_level: Option<String>,
}

fn read(path: &Path) -> CliResult<toml::Table> {
    let text = std::fs::read_to_string(path).input(&format!("reading config {}", path.display()))?;
    text.parse::<toml::Table>().input(&format!("parsing config {}", path.display()))
}

pub fn load_run_file(path: Option<&Path>) -> CliResult<RunFile> {
    let Some(path) = path else { return Ok(RunFile::default()) };
    let table = read(path)?;
    table.try_into().input(&format!("config {}", path.display()))
}

/// Splits a simulation file into the simulation settings and the run keys.
pub fn load_sim_file(path: &Path) -> CliResult<(SimConfig, RunSettings)> {
    let mut table = read(path)?;
    let mut run = RunSettings::default();
    for key in RUN_KEYS {
        if let Some(v) = table.remove(key) {
            match (key, v) {
                ("out_dir", toml::Value::String(s)) => run.out_dir = Some(PathBuf::from(s)),
                ("jobs", toml::Value::Integer(j)) if j > 0 => run.jobs = Some(j as usize),
                ("log_level", toml::Value::String(s)) => run.log_level = Some(s),
                (key, v) => return Err(CliError::input(format!("config {}: bad value `{v}` for `{key}`", path.display()))),
            }
        }
    }
    let text = toml::to_string(&table).input("config")?;
    let sim = SimConfig::from_toml(&text).input(&format!("config {}", path.display()))?;
    Ok((sim, run))
}

/// Flag, then file, then `HETGROUPS_OUT_DIR`, then the default.
pub fn resolve_out_dir(flag: Option<PathBuf>, file: Option<PathBuf>) -> PathBuf {
    flag.or(file)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KChoice {
    Auto,
    Fixed(usize),
}

impl std::str::FromStr for KChoice {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(KChoice::Auto);
        }
        match s.parse::<usize>() {
            Ok(k) if k > 0 => Ok(KChoice::Fixed(k)),
            _ => Err(CliError::input(format!("--k must be `auto` or a positive integer, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaChoice {
    Cv,
    Fixed(f64),
}

impl std::str::FromStr for LambdaChoice {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        if s.eq_ignore_ascii_case("cv") {
            return Ok(LambdaChoice::Cv);
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() && v >= 0.0 => Ok(LambdaChoice::Fixed(v)),
            _ => Err(CliError::input(format!("--lambda must be `cv` or a nonnegative number, got `{s}`"))),
        }
    }
}
