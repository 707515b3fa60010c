//! Snapshot databases: random sampling of patients and on-disk persistence.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::generator::{
    synthesize_snapshot, GridConfig, ParameterPoint, Snapshot, ETA_RANGES, HEALTHY_ETA, HR_RANGE, S_RANGE, T_SYS_RANGE,
    U0_RANGE,
};
use crate::error::{Error, Result};
use crate::hilbert::DiscreteSpace;

pub const FORMAT_VERSION: u32 = 1;
pub const PARAM_COLUMNS: [&str; 6] = ["t", "HR", "s", "T_sys", "u0", "eta"];

const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.csv";
const PAYLOAD: &str = "snapshots.f64";

/// Sampling box for the per-patient parameters; `eta` is a union of intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRanges {
    #[serde(rename = "HR")]
    pub hr: (f64, f64),
    pub s: (f64, f64),
    #[serde(rename = "T_sys")]
    pub t_sys: (f64, f64),
    pub u0: (f64, f64),
    pub eta: Vec<(f64, f64)>,
}

impl Default for ParameterRanges {
    fn default() -> Self {
        Self {
            hr: HR_RANGE,
            s: S_RANGE,
            t_sys: T_SYS_RANGE,
            u0: U0_RANGE,
            eta: ETA_RANGES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HealthFilter {
    #[default]
    All,
    Healthy,
    Sick,
}

impl std::str::FromStr for HealthFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "healthy" => Ok(Self::Healthy),
            "sick" => Ok(Self::Sick),
            other => Err(Error::Config(format!("unknown health filter `{other}`"))),
        }
    }
}

impl ParameterRanges {
    /// The `eta` intervals that survive `filter`, with empty pieces removed.
    pub fn eta_intervals(&self, filter: HealthFilter) -> Vec<(f64, f64)> {
        let (hl, hh) = HEALTHY_ETA;
        let mut out = Vec::new();
        for &(lo, hi) in &self.eta {
            match filter {
                HealthFilter::All => out.push((lo, hi)),
                HealthFilter::Healthy => {
                    let (a, b) = (lo.max(hl), hi.min(hh));
                    if a <= b {
                        out.push((a, b));
                    }
                }
                HealthFilter::Sick => {
                    // the healthy interval is closed, so sick pieces must not touch it
                    if lo < hl.min(hi) {
                        out.push((lo, hi.min(hl)));
                    }
                    if lo.max(hh) < hi {
                        out.push((lo.max(hh), hi));
                    }
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        let mut boxes = vec![("HR", self.hr), ("s", self.s), ("T_sys", self.t_sys), ("u0", self.u0)];
        boxes.extend(self.eta.iter().map(|&r| ("eta", r)));
        for (name, (lo, hi)) in boxes {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("invalid {name} range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// A set of snapshots on one grid.
#[derive(Debug, Clone)]
pub struct SnapshotDatabase {
    pub space: DiscreteSpace,
    pub grid: GridConfig,
    pub snapshots: Vec<Snapshot>,
    pub seed: u64,
}

impl SnapshotDatabase {
    pub fn new(grid: GridConfig, snapshots: Vec<Snapshot>, seed: u64) -> Result<Self> {
        grid.validate()?;
        if snapshots.is_empty() {
            return Err(Error::Validation("a database needs at least one snapshot".into()));
        }
        let n = grid.n_dofs();
        for (i, s) in snapshots.iter().enumerate() {
            if s.coeffs.len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    actual: s.coeffs.len(),
                });
            }
            if s.coeffs.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!("snapshot {i} has non-finite entries")));
            }
        }
        Ok(Self {
            space: grid.space(),
            grid,
            snapshots,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Snapshot indices grouped by patient, in order of first appearance.
    pub fn patients(&self) -> Vec<Vec<usize>> {
        let mut groups: Vec<([u64; 5], Vec<usize>)> = Vec::new();
        for (i, s) in self.snapshots.iter().enumerate() {
            let key = s.params.patient_key();
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, g)) => g.push(i),
                None => groups.push((key, vec![i])),
            }
        }
        groups.into_iter().map(|(_, g)| g).collect()
    }

    /// A database restricted to `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<SnapshotDatabase> {
        let snaps = indices.iter().map(|&i| self.snapshots[i].clone()).collect();
        SnapshotDatabase::new(self.grid, snaps, self.seed)
    }
}

/// Draws the patient parameters of patient `index` from its own ChaCha stream.
pub fn draw_patient(ranges: &ParameterRanges, eta_intervals: &[(f64, f64)], seed: u64, index: u64) -> ParameterPoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut uniform = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.gen::<f64>();
    let hr = uniform(ranges.hr);
    let s = uniform(ranges.s);
    let t_sys = uniform(ranges.t_sys);
    let u0 = uniform(ranges.u0);
    let total: f64 = eta_intervals.iter().map(|(lo, hi)| hi - lo).sum();
    let mut x = uniform((0.0, total));
    let mut eta = eta_intervals.last().map(|r| r.1).unwrap_or(f64::NAN);
    for &(lo, hi) in eta_intervals {
        if x <= hi - lo {
            eta = lo + x;
            break;
        }
        x -= hi - lo;
    }
    ParameterPoint {
        t: 0.0,
        hr,
        s,
        t_sys,
        u0,
        eta,
    }
}

/// Samples `n_patients` patients uniformly from `ranges` and emits
/// `samples_per_cycle` equispaced instants of one cardiac cycle for each.
pub fn sample_database(
    ranges: &ParameterRanges,
    n_patients: usize,
    samples_per_cycle: usize,
    grid: &GridConfig,
    seed: u64,
    filter: HealthFilter,
) -> Result<SnapshotDatabase> {
    if n_patients == 0 || samples_per_cycle == 0 {
        return Err(Error::Precondition(
            "need at least one patient and one sample per cycle".into(),
        ));
    }
    ranges.validate()?;
    grid.validate()?;
    let etas = ranges.eta_intervals(filter);
    if etas.is_empty() {
        return Err(Error::Config(format!(
            "eta ranges {:?} leave nothing for the {filter:?} filter",
            ranges.eta
        )));
    }
    let per_patient: Vec<Vec<Snapshot>> = (0..n_patients as u64)
        .into_par_iter()
        .map(|p| {
            let y = draw_patient(ranges, &etas, seed, p);
            let t_c = y.cycle();
            (0..samples_per_cycle)
                .map(|k| synthesize_snapshot(&y.at(k as f64 * t_c / samples_per_cycle as f64), grid))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    SnapshotDatabase::new(*grid, per_patient.into_iter().flatten().collect(), seed)
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsDescriptor {
    kind: String,
    value: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    #[serde(rename = "N")]
    n: usize,
    grid: GridConfig,
    weights: WeightsDescriptor,
    snapshot_count: usize,
    seed: u64,
    param_columns: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamRow {
    t: f64,
    #[serde(rename = "HR")]
    hr: f64,
    s: f64,
    #[serde(rename = "T_sys")]
    t_sys: f64,
    u0: f64,
    eta: f64,
}

pub(crate) fn ensure_dir(path: &Path) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty path"),
        ));
    }
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_f64s(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::integrity(path, "payload length is not a multiple of 8"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes `manifest.json`, `params.csv` and `snapshots.f64` under `dir`.
pub fn save_database(db: &SnapshotDatabase, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        n: db.grid.n_dofs(),
        grid: db.grid,
        weights: WeightsDescriptor {
            kind: "uniform".into(),
            value: db.grid.cell_weight(),
        },
        snapshot_count: db.len(),
        seed: db.seed,
        param_columns: PARAM_COLUMNS.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&dir.join(MANIFEST), &manifest)?;

    let params_path = dir.join(PARAMS);
    let mut w = csv::Writer::from_path(&params_path).map_err(|e| Error::csv(&params_path, e))?;
    for s in &db.snapshots {
        let p = s.params;
        w.serialize(ParamRow {
            t: p.t,
            hr: p.hr,
            s: p.s,
            t_sys: p.t_sys,
            u0: p.u0,
            eta: p.eta,
        })
        .map_err(|e| Error::csv(&params_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&params_path, e))?;

    write_f64s(
        &dir.join(PAYLOAD),
        db.snapshots.iter().flat_map(|s| s.coeffs.iter().copied()),
    )
}

pub fn load_database(dir: &Path) -> Result<SnapshotDatabase> {
    if dir.as_os_str().is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty path"),
        ));
    }
    let manifest_path = dir.join(MANIFEST);
    let manifest: Manifest = read_json(&manifest_path)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(manifest.version));
    }
    manifest
        .grid
        .validate()
        .map_err(|e| Error::integrity(&manifest_path, e.to_string()))?;
    if manifest.n != manifest.grid.n_dofs() {
        return Err(Error::integrity(
            &manifest_path,
            format!(
                "N = {} disagrees with the grid ({})",
                manifest.n,
                manifest.grid.n_dofs()
            ),
        ));
    }
    if manifest.weights.value != manifest.grid.cell_weight() {
        return Err(Error::integrity(
            &manifest_path,
            "weight descriptor disagrees with the grid",
        ));
    }
    if manifest.param_columns != PARAM_COLUMNS {
        return Err(Error::integrity(&manifest_path, "unexpected parameter column order"));
    }

    let params_path = dir.join(PARAMS);
    let mut r = csv::Reader::from_path(&params_path).map_err(|e| Error::csv(&params_path, e))?;
    let header = r.headers().map_err(|e| Error::csv(&params_path, e))?;
    if header.iter().ne(PARAM_COLUMNS.iter().copied()) {
        return Err(Error::integrity(&params_path, "unexpected header"));
    }
    let rows: Vec<ParamRow> = r
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::csv(&params_path, e))?;
    if rows.len() != manifest.snapshot_count {
        return Err(Error::integrity(
            &params_path,
            format!("{} rows, manifest says {}", rows.len(), manifest.snapshot_count),
        ));
    }

    let payload_path = dir.join(PAYLOAD);
    let values = read_f64s(&payload_path)?;
    if values.len() != manifest.snapshot_count * manifest.n {
        return Err(Error::integrity(
            &payload_path,
            format!(
                "{} values, expected {} snapshots of {} dofs",
                values.len(),
                manifest.snapshot_count,
                manifest.n
            ),
        ));
    }
    let snapshots = rows
        .into_iter()
        .zip(values.chunks_exact(manifest.n.max(1)))
        .map(|(p, c)| Snapshot {
            coeffs: c.to_vec(),
            params: ParameterPoint {
                t: p.t,
                hr: p.hr,
                s: p.s,
                t_sys: p.t_sys,
                u0: p.u0,
                eta: p.eta,
            },
        })
        .collect();
    SnapshotDatabase::new(manifest.grid, snapshots, manifest.seed).map_err(|e| Error::integrity(dir, e.to_string()))
}
