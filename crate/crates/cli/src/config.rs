//! Resolved run configurations. Defaults, then `--config` JSON, then flags.

use std::path::{Path, PathBuf};

use pbdwkit::bench::Method;
use pbdwkit::manifold::{GridConfig, HealthFilter, ParameterRanges, WindowCandidate};
use pbdwkit::measurement::{ImagingMode, Region};
use pbdwkit::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasurementConfig {
    pub mode: ImagingMode,
    pub region: Region,
    /// Voxel size in grid points, (axial, cross).
    pub block: (usize, usize),
}

impl Default for MeasurementConfig {
    fn default() -> Self {
        Self {
            mode: ImagingMode::Cfi,
            region: Region::Common,
            block: (2, 2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub out: Option<PathBuf>,
    pub patients: usize,
    pub samples: usize,
    pub seed: u64,
    pub health: HealthFilter,
    pub grid: GridConfig,
    pub ranges: ParameterRanges,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            out: None,
            patients: 50,
            samples: 40,
            seed: 7,
            health: HealthFilter::All,
            grid: GridConfig::default(),
            ranges: ParameterRanges::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Pod,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    pub db: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub kind: BasisKind,
    pub n_max: usize,
    /// Subtract the snapshot mean before POD (global bases only).
    pub center: bool,
    /// One basis per non-empty (phase, HR) cell.
    pub partitioned: bool,
    pub tau: f64,
    pub delta_hr: f64,
    /// Fail when a basis cannot reach `n_max`.
    pub strict: bool,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            db: None,
            out: None,
            kind: BasisKind::Pod,
            n_max: 32,
            center: false,
            partitioned: false,
            tau: 0.125,
            delta_hr: 5.0,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ReconMethod {
    Linear,
    Affine,
    Partitioned,
    DataDriven,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructConfig {
    pub method: ReconMethod,
    /// Basis directory (linear, affine) or partitioned basis directory.
    pub basis: Option<PathBuf>,
    /// Snapshot database used as dictionary by the data-driven method.
    pub dictionary: Option<PathBuf>,
    pub tau: f64,
    pub delta_hr: f64,
    /// Reduced dimension; defaults to the largest admissible one.
    pub n: Option<usize>,
    pub measurement: MeasurementConfig,
    /// Database holding the target snapshot.
    pub target_db: Option<PathBuf>,
    pub index: usize,
    /// Observation CSV, used instead of a target snapshot.
    pub observation: Option<PathBuf>,
    pub t: Option<f64>,
    pub hr: Option<f64>,
    /// Grid used when no database is involved.
    pub grid: Option<GridConfig>,
    pub out: Option<PathBuf>,
    pub stem: String,
    pub timings: bool,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            method: ReconMethod::Affine,
            basis: None,
            dictionary: None,
            tau: 0.125,
            delta_hr: 5.0,
            n: None,
            measurement: MeasurementConfig::default(),
            target_db: None,
            index: 0,
            observation: None,
            t: None,
            hr: None,
            grid: None,
            out: None,
            stem: "u_star".into(),
            timings: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QoiSection {
    pub enabled: bool,
    pub healthy: usize,
    pub sick: usize,
    pub seed: u64,
    pub n: usize,
}

impl Default for QoiSection {
    fn default() -> Self {
        Self {
            enabled: true,
            healthy: 10,
            sick: 10,
            seed: 11,
            n: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Held-out database for window tuning; fixed windows when absent.
    pub validation: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub methods: Vec<Method>,
    /// Empty means `1..=m`.
    pub n_grid: Vec<usize>,
    pub tau: f64,
    pub delta_hr: f64,
    pub window_candidates: Vec<WindowCandidate>,
    /// Dimension at which window candidates are scored.
    pub tune_n: usize,
    pub measurement: MeasurementConfig,
    pub qoi: QoiSection,
    pub timings: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let mut window_candidates = Vec::new();
        for delta_hr in [5.0, 10.0, 20.0, 36.0] {
            for tau in [0.125, 0.25, 0.625] {
                window_candidates.push(WindowCandidate { delta_hr, tau });
            }
        }
        Self {
            train: None,
            test: None,
            validation: None,
            out: None,
            methods: Method::ALL.to_vec(),
            n_grid: Vec::new(),
            tau: 0.125,
            delta_hr: 5.0,
            window_candidates,
            tune_n: 30,
            measurement: MeasurementConfig::default(),
            qoi: QoiSection::default(),
            timings: false,
        }
    }
}

/// Reads the section of `path` for `command`: the value under the key
/// `command` when present, the whole object otherwise.
pub fn load_section<T: DeserializeOwned + Default>(path: Option<&Path>, command: &str) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    if let Some(section) = value.get_mut(command) {
        value = section.take();
    }
    serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Parses `1-10,12,20-32` into a sorted list without duplicates.
pub fn parse_n_grid(s: &str) -> std::result::Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let parse = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("`{x}`: {e}"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (parse(a)?, parse(b)?);
                if a > b {
                    return Err(format!("empty range `{part}`"));
                }
                out.extend(a..=b);
            }
            None => out.push(parse(part)?),
        }
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        return Err("empty n grid".into());
    }
    Ok(out)
}

/// Parses `AxC`, e.g. `2x2`.
pub fn parse_block(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected AxC, got `{s}`"))?;
    let a = a.trim().parse().map_err(|e| format!("`{a}`: {e}"))?;
    let c = c.trim().parse().map_err(|e| format!("`{c}`: {e}"))?;
    Ok((a, c))
}
