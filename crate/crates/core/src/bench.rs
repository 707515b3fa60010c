//! Error metrics, method sweeps, the flow-ratio index and report export.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::estimator::{
    fit_largest_stable, fit_partitioned, local_bases, LocalBasisKind, OmpDictionary, PartitionedFit, Reconstruction,
};
use crate::hilbert::{gram, smallest_singular_value, Basis, DiscreteSpace};
use crate::manifold::{
    draw_patient, label_health, partition_database, station_flux, synthesize_snapshot, CellKey, GridConfig, Health,
    HealthFilter, ParameterPoint, ParameterRanges, Segment, SnapshotDatabase,
};
use crate::measurement::{observe, observe_field, MeasurementSpace, Observation};
use crate::reduced::{nominal_state, pod, ReducedBasis};

/// Measurement consistency tolerance, relative to `|omega|`.
pub const CONSISTENCY_TOL: f64 = 1e-10;
/// Absolute slack added to the relative error bound.
pub const BOUND_SLACK: f64 = 1e-8;
/// Outlet flux below which the flow ratio is undefined.
pub const FLUX_FLOOR: f64 = 1e-14;

/// `|u - u*| / |u|` in the metric norm.
pub fn rel_error(space: &DiscreteSpace, u: &[f64], u_star: &[f64]) -> Result<f64> {
    check_len(space.dim(), u.len())?;
    check_len(space.dim(), u_star.len())?;
    let norm = space.norm_unchecked(u);
    if !(norm > 0.0) {
        return Err(Error::Degenerate("relative error of a zero-norm state".into()));
    }
    let diff: Vec<f64> = u.iter().zip(u_star).map(|(a, b)| a - b).collect();
    Ok(space.norm_unchecked(&diff) / norm)
}

/// Error over one cycle normalized by the cycle energy:
/// `e(t_k) = |u(t_k) - u*(t_k)| / sqrt(sum_j |u(t_j)|^2 dt)` with `dt = T_c / K`.
pub fn time_error(space: &DiscreteSpace, truth: &[&[f64]], recs: &[&[f64]], t_c: f64) -> Result<Vec<f64>> {
    if truth.is_empty() || truth.len() != recs.len() {
        return Err(Error::Precondition(format!(
            "need matching non-empty series, got {} states and {} reconstructions",
            truth.len(),
            recs.len()
        )));
    }
    if !(t_c > 0.0) {
        return Err(Error::Validation(format!("cycle length {t_c} must be positive")));
    }
    let dt = t_c / truth.len() as f64;
    let mut energy = 0.0;
    for u in truth {
        check_len(space.dim(), u.len())?;
        energy += space.norm_unchecked(u).powi(2) * dt;
    }
    if !(energy > 0.0) {
        return Err(Error::Degenerate("zero cycle energy".into()));
    }
    let scale = energy.sqrt();
    truth
        .iter()
        .zip(recs)
        .map(|(u, r)| {
            check_len(space.dim(), r.len())?;
            let diff: Vec<f64> = u.iter().zip(r.iter()).map(|(a, b)| a - b).collect();
            Ok(space.norm_unchecked(&diff) / scale)
        })
        .collect()
}

/// `beta(V_n, W_m)` for nested prefixes of `basis`.
pub fn beta_curve(basis: &Basis, meas: &MeasurementSpace, ns: &[usize]) -> Result<Vec<f64>> {
    basis.ensure_orthonormal("beta curve basis")?;
    let g = gram(meas.representers(), basis)?;
    ns.iter()
        .map(|&n| {
            if n == 0 || n > basis.len() || n > meas.dim() {
                return Err(Error::Precondition(format!(
                    "n = {n} must lie in [1, min({}, {})]",
                    basis.len(),
                    meas.dim()
                )));
            }
            Ok(smallest_singular_value(g.columns(0, n).into_owned()))
        })
        .collect()
}

/// The four benchmarked reconstruction methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Global uncentered POD with linear PBDW.
    #[serde(rename = "POD-lin")]
    PodLin,
    /// Centered POD per partition cell with affine PBDW.
    #[serde(rename = "P-POD-aff")]
    PPodAff,
    /// Strong greedy per partition cell with affine PBDW.
    #[serde(rename = "P-Greedy-aff")]
    PGreedyAff,
    /// OMP selection inside the dispatched cell with affine PBDW.
    #[serde(rename = "P-DB-aff")]
    PDbAff,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::PodLin, Method::PPodAff, Method::PGreedyAff, Method::PDbAff];

    pub fn label(self) -> &'static str {
        match self {
            Method::PodLin => "POD-lin",
            Method::PPodAff => "P-POD-aff",
            Method::PGreedyAff => "P-Greedy-aff",
            Method::PDbAff => "P-DB-aff",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub n_grid: Vec<usize>,
    /// Half-width of the phase windows, seconds.
    pub tau: f64,
    /// Half-width of the heart-rate windows, beats per minute.
    pub delta_hr: f64,
    /// Record wall time per apply. Timings make reports machine dependent.
    pub timings: bool,
}

impl SweepConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("no method selected".into()));
        }
        if self.n_grid.is_empty() {
            return Err(Error::Config("empty n grid".into()));
        }
        if let Some(&bad) = self.n_grid.iter().find(|&&n| n == 0 || n > m) {
            return Err(Error::Config(format!("n = {bad} outside [1, m = {m}]")));
        }
        if !(self.tau > 0.0 && self.delta_hr > 0.0) {
            return Err(Error::Config("window half-widths must be positive".into()));
        }
        Ok(())
    }
}

/// Results of one method over the n grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub method: Method,
    pub n_grid: Vec<usize>,
    pub e_av: Vec<f64>,
    pub e_wc: Vec<f64>,
    /// Smallest inf-sup constant involved at each n.
    pub beta_min: Vec<f64>,
    /// `per_snapshot[j][i]`: error on test snapshot `i` at `n_grid[j]`.
    pub per_snapshot: Vec<Vec<f64>>,
    /// Median apply time in microseconds, when timings were requested.
    pub apply_us_p50: Vec<Option<f64>>,
    /// Largest `|P_W u* - omega| / |omega|` at each n.
    pub consistency_max: Vec<f64>,
    /// Smallest `bound - error` at each n; negative means the bound failed.
    pub bound_margin_min: Vec<f64>,
    /// Cells that could not reach the requested dimension, per n.
    pub capped_cells: Vec<usize>,
    /// Reconstructions that fell back to a smaller dimension (data-driven) per n.
    pub dimension_fallbacks: Vec<usize>,
    /// Test snapshots dispatched to the nearest cell because no cell covered them.
    pub coverage_fallbacks: usize,
    pub best_n_av: usize,
    pub best_n_wc: usize,
}

impl SweepReport {
    /// Smallest n of the grid with `e_av <= tol`.
    pub fn smallest_n_below(&self, tol: f64) -> Option<usize> {
        self.n_grid
            .iter()
            .zip(&self.e_av)
            .find(|(_, &e)| e <= tol)
            .map(|(&n, _)| n)
    }

    pub fn e_av_at(&self, n: usize) -> Option<f64> {
        self.n_grid.iter().position(|&k| k == n).map(|j| self.e_av[j])
    }

    /// Names of the violated sweep invariants.
    pub fn invariant_failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (j, &n) in self.n_grid.iter().enumerate() {
            if self.e_av[j] > self.e_wc[j] * (1.0 + 1e-12) {
                out.push(format!("{} n={n}: e_av > e_wc", self.method));
            }
            if !(self.consistency_max[j] <= CONSISTENCY_TOL) {
                out.push(format!(
                    "{} n={n}: measurement consistency {:e} > {CONSISTENCY_TOL:e}",
                    self.method, self.consistency_max[j]
                ));
            }
            if !(self.bound_margin_min[j] >= 0.0) {
                out.push(format!(
                    "{} n={n}: error bound violated by {:e}",
                    self.method, -self.bound_margin_min[j]
                ));
            }
        }
        out
    }
}

/// Per-reconstruction record, reduced in snapshot order.
#[derive(Debug, Clone, Copy)]
struct Sample {
    error: f64,
    consistency: f64,
    bound_margin: f64,
    beta: f64,
    micros: f64,
    fallback: bool,
}

struct Evaluated<'a> {
    truth: &'a [f64],
    obs: &'a Observation,
    norm: f64,
}

fn evaluate(
    e: &Evaluated<'_>,
    rec: &Reconstruction,
    basis: &ReducedBasis,
    meas: &MeasurementSpace,
    micros: f64,
) -> Result<Sample> {
    let space = meas.space();
    let error = rel_error(space, e.truth, rec.u_star.as_slice())?;
    let back = observe_field(rec.u_star.as_slice(), meas)?;
    let scale = e.obs.values.norm();
    let gap = (&back.values - &e.obs.values).norm();
    let consistency = if scale > 0.0 { gap / scale } else { gap };
    let dist = basis.affine_distance(e.truth)?;
    let bound = dist / (rec.beta_used * e.norm) + BOUND_SLACK;
    Ok(Sample {
        error,
        consistency,
        bound_margin: bound - error,
        beta: rec.beta_used,
        micros,
        fallback: rec.method.contains("fallback"),
    })
}

fn timed<T>(enabled: bool, f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    if enabled {
        let start = Instant::now();
        let out = f()?;
        Ok((out, start.elapsed().as_secs_f64() * 1e6))
    } else {
        Ok((f()?, f64::NAN))
    }
}

/// Runs every requested method over the n grid on the test database.
///
/// Reconstructions run in parallel over test snapshots; results are reduced
/// in snapshot order so reports do not depend on the thread count.
pub fn sweep(
    train: &SnapshotDatabase,
    test: &SnapshotDatabase,
    meas: &Arc<MeasurementSpace>,
    cfg: &SweepConfig,
) -> Result<Vec<SweepReport>> {
    cfg.validate(meas.dim())?;
    if !train.space.same_as(&test.space) || !train.space.same_as(meas.space()) {
        return Err(Error::IncompatibleSpace);
    }
    let observations = test
        .snapshots
        .par_iter()
        .map(|s| observe(s, meas))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<Evaluated<'_>> = test
        .snapshots
        .iter()
        .zip(&observations)
        .map(|(s, obs)| {
            let norm = test.space.norm_unchecked(&s.coeffs);
            if !(norm > 0.0) {
                return Err(Error::Degenerate("zero-norm test snapshot".into()));
            }
            Ok(Evaluated {
                truth: &s.coeffs,
                obs,
                norm,
            })
        })
        .collect::<Result<_>>()?;
    let n_max = *cfg.n_grid.iter().max().expect("validated non-empty");
    let needs_partition = cfg.methods.iter().any(|&m| m != Method::PodLin);
    let partition = if needs_partition {
        Some(partition_database(train, cfg.tau, cfg.delta_hr)?)
    } else {
        None
    };
    let train_refs: Vec<&[f64]> = train.snapshots.iter().map(|s| s.coeffs.as_slice()).collect();

    let mut reports = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        // samples[j][i] for grid index j and test snapshot i
        let (samples, capped, coverage): (Vec<Vec<Sample>>, Vec<usize>, usize) = match method {
            Method::PodLin => {
                let basis = pod(&train.space, &train_refs, n_max.min(train_refs.len()), false)?;
                let mut all = Vec::with_capacity(cfg.n_grid.len());
                let mut capped = Vec::with_capacity(cfg.n_grid.len());
                for &n in &cfg.n_grid {
                    let op = fit_largest_stable(&basis, meas, n)?;
                    capped.push(usize::from(op.n() < n));
                    let row = items
                        .par_iter()
                        .map(|e| {
                            let (rec, us) = timed(cfg.timings, || op.apply(e.obs))?;
                            evaluate(e, &rec, op.basis(), meas, us)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    all.push(row);
                }
                (all, capped, 0)
            }
            Method::PPodAff | Method::PGreedyAff => {
                let partition = partition.as_ref().expect("built for partitioned methods");
                let kind = if method == Method::PPodAff {
                    LocalBasisKind::Pod
                } else {
                    LocalBasisKind::Greedy
                };
                let bases = local_bases(train, partition, kind, n_max)?;
                let mut all = Vec::with_capacity(cfg.n_grid.len());
                let mut capped = Vec::with_capacity(cfg.n_grid.len());
                let mut coverage = 0;
                for &n in &cfg.n_grid {
                    let fit: PartitionedFit = fit_partitioned(partition, &bases, meas, n)?;
                    capped.push(fit.capped.len());
                    let row = items
                        .par_iter()
                        .zip(test.snapshots.par_iter())
                        .map(|(e, s)| {
                            let ((cell, rec, fell_back), us) = timed(cfg.timings, || {
                                fit.estimator.apply_or_nearest(s.params.t, s.params.hr, e.obs)
                            })?;
                            let op = &fit.estimator.operators()[&cell];
                            Ok((evaluate(e, &rec, op.basis(), meas, us)?, fell_back))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    coverage = row.iter().filter(|r| r.1).count();
                    all.push(row.into_iter().map(|r| r.0).collect());
                }
                (all, capped, coverage)
            }
            Method::PDbAff => {
                let partition = partition.as_ref().expect("built for partitioned methods");
                let dictionaries: BTreeMap<CellKey, OmpDictionary> = partition
                    .cells
                    .par_iter()
                    .map(|(&key, members)| {
                        let snaps: Vec<&[f64]> =
                            members.iter().map(|&i| train.snapshots[i].coeffs.as_slice()).collect();
                        let nominal = nominal_state(&snaps)?;
                        Ok((key, OmpDictionary::new(&snaps, &nominal, meas)?))
                    })
                    .collect::<Result<_>>()?;
                let capped = cfg
                    .n_grid
                    .iter()
                    .map(|&n| dictionaries.values().filter(|d| d.len() < n).count())
                    .collect();
                let per_snapshot = items
                    .par_iter()
                    .zip(test.snapshots.par_iter())
                    .map(|(e, s)| {
                        let y = &s.params;
                        let (cell, fell_back) = match partition.dispatch(y) {
                            Ok(c) => (c, false),
                            Err(Error::OutOfCoverage { nearest: Some(c), .. }) => (c, true),
                            Err(err) => return Err(err),
                        };
                        let dict = &dictionaries[&cell];
                        let ns: Vec<usize> = cfg.n_grid.iter().map(|&n| n.min(dict.len() + 1)).collect();
                        let samples = if cfg.timings {
                            // one full run per n so each timing covers selection and fit
                            ns.iter()
                                .map(|&n| {
                                    let (mut out, us) = timed(true, || dict.reconstruct_many(e.obs, &[n]))?;
                                    let (rec, basis) = out.pop().expect("one n requested");
                                    evaluate(e, &rec, &basis, meas, us)
                                })
                                .collect::<Result<Vec<_>>>()?
                        } else {
                            dict.reconstruct_many(e.obs, &ns)?
                                .iter()
                                .map(|(rec, basis)| evaluate(e, rec, basis, meas, f64::NAN))
                                .collect::<Result<Vec<_>>>()?
                        };
                        Ok((samples, fell_back))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let coverage = per_snapshot.iter().filter(|r| r.1).count();
                let all = (0..cfg.n_grid.len())
                    .map(|j| per_snapshot.iter().map(|r| r.0[j]).collect())
                    .collect();
                (all, capped, coverage)
            }
        };
        reports.push(aggregate(method, &cfg.n_grid, samples, capped, coverage, cfg.timings));
    }
    Ok(reports)
}

fn aggregate(
    method: Method,
    n_grid: &[usize],
    samples: Vec<Vec<Sample>>,
    capped_cells: Vec<usize>,
    coverage_fallbacks: usize,
    timings: bool,
) -> SweepReport {
    let mut r = SweepReport {
        method,
        n_grid: n_grid.to_vec(),
        e_av: Vec::new(),
        e_wc: Vec::new(),
        beta_min: Vec::new(),
        per_snapshot: Vec::new(),
        apply_us_p50: Vec::new(),
        consistency_max: Vec::new(),
        bound_margin_min: Vec::new(),
        capped_cells,
        dimension_fallbacks: Vec::new(),
        coverage_fallbacks,
        best_n_av: 0,
        best_n_wc: 0,
    };
    for row in samples {
        let errors: Vec<f64> = row.iter().map(|s| s.error).collect();
        let count = errors.len() as f64;
        r.e_av.push(errors.iter().sum::<f64>() / count);
        r.e_wc.push(errors.iter().copied().fold(0.0, f64::max));
        r.beta_min
            .push(row.iter().map(|s| s.beta).fold(f64::INFINITY, f64::min));
        r.consistency_max
            .push(row.iter().map(|s| s.consistency).fold(0.0, f64::max));
        r.bound_margin_min
            .push(row.iter().map(|s| s.bound_margin).fold(f64::INFINITY, f64::min));
        r.dimension_fallbacks.push(row.iter().filter(|s| s.fallback).count());
        r.apply_us_p50.push(if timings {
            let mut us: Vec<f64> = row.iter().map(|s| s.micros).collect();
            us.sort_by(f64::total_cmp);
            Some(us[us.len() / 2])
        } else {
            None
        });
        r.per_snapshot.push(errors);
    }
    r.best_n_av = argmin_n(n_grid, &r.e_av);
    r.best_n_wc = argmin_n(n_grid, &r.e_wc);
    r
}

fn argmin_n(n_grid: &[usize], values: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..values.len() {
        if values[j] < values[best] {
            best = j;
        }
    }
    n_grid[best]
}

/// Ratio `Q_2 / Q_1` of the branch outlet fluxes through the last axial station.
pub fn flow_ratio(u: &[f64], grid: &GridConfig) -> Result<f64> {
    check_len(grid.n_dofs(), u.len())?;
    let outlet = grid.l - 1;
    let q1 = station_flux(u, grid, Segment::Branch1, outlet);
    let q2 = station_flux(u, grid, Segment::Branch2, outlet);
    if !(q1 > FLUX_FLOOR) {
        return Err(Error::Degenerate(format!(
            "branch 1 outlet flux {q1:e} is not positive"
        )));
    }
    Ok(q2 / q1)
}

/// Blockage index `max(r, 1/r)`: large when either branch is obstructed.
/// A nonpositive ratio carries no flow split and maps to infinity.
pub fn blockage_index(r: f64) -> f64 {
    if r > 0.0 {
        r.max(1.0 / r)
    } else {
        f64::INFINITY
    }
}

/// Midpoint between the smallest sick value and the largest healthy value.
pub fn threshold(healthy: &[f64], sick: &[f64]) -> Result<f64> {
    if healthy.is_empty() || sick.is_empty() {
        return Err(Error::Precondition("threshold needs healthy and sick patients".into()));
    }
    let min_sick = sick.iter().copied().fold(f64::INFINITY, f64::min);
    let max_healthy = healthy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((min_sick + max_healthy) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QoiConfig {
    pub n: usize,
    pub tau: f64,
    pub delta_hr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QoiRow {
    pub patient: usize,
    pub eta: f64,
    pub r_true: f64,
    pub r_rec: f64,
    pub index_true: f64,
    pub index_rec: f64,
    pub label_true: Health,
    pub label_pred: Health,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QoiReport {
    pub rows: Vec<QoiRow>,
    pub threshold: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    /// Sick patients whose reconstructed index falls below
    /// `index_true - 0.05 (1 + index_true)`.
    pub sign_violations: Vec<usize>,
    pub coverage_fallbacks: usize,
}

impl QoiReport {
    pub fn invariant_failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.false_negatives > 0 {
            out.push(format!("QoI: {} false negatives", self.false_negatives));
        }
        for &p in &self.sign_violations {
            out.push(format!("QoI: patient {p} underestimates its blockage index"));
        }
        out
    }
}

/// Balanced patient set: `n_healthy` healthy then `n_sick` sick patients, each
/// at its peak-systole instant.
pub fn qoi_patients(n_healthy: usize, n_sick: usize, seed: u64) -> Result<Vec<ParameterPoint>> {
    let ranges = ParameterRanges::default();
    let healthy = ranges.eta_intervals(HealthFilter::Healthy);
    let sick = ranges.eta_intervals(HealthFilter::Sick);
    if healthy.is_empty() || sick.is_empty() {
        return Err(Error::Config(
            "parameter ranges admit no healthy or no sick patient".into(),
        ));
    }
    Ok((0..n_healthy + n_sick)
        .map(|i| {
            let etas = if i < n_healthy { &healthy } else { &sick };
            let y = draw_patient(&ranges, etas, seed, i as u64);
            y.at(y.t_peak())
        })
        .collect())
}

/// Reconstructs each patient at peak systole with partitioned affine POD-PBDW
/// and classifies it with the threshold computed from the reconstructed indices.
pub fn qoi_pipeline(
    train: &SnapshotDatabase,
    patients: &[ParameterPoint],
    meas: &Arc<MeasurementSpace>,
    cfg: &QoiConfig,
) -> Result<QoiReport> {
    if cfg.n == 0 || cfg.n > meas.dim() {
        return Err(Error::Config(format!(
            "QoI dimension {} outside [1, m = {}]",
            cfg.n,
            meas.dim()
        )));
    }
    let partition = partition_database(train, cfg.tau, cfg.delta_hr)?;
    let bases = local_bases(train, &partition, LocalBasisKind::Pod, cfg.n)?;
    let fit = fit_partitioned(&partition, &bases, meas, cfg.n)?;
    let grid = &train.grid;
    let rows = patients
        .par_iter()
        .enumerate()
        .map(|(i, y)| {
            let truth = synthesize_snapshot(y, grid)?;
            let obs = observe(&truth, meas)?;
            let (_, rec, fell_back) = fit.estimator.apply_or_nearest(y.t, y.hr, &obs)?;
            let r_true = flow_ratio(&truth.coeffs, grid)?;
            let r_rec = match flow_ratio(rec.u_star.as_slice(), grid) {
                Ok(r) => r,
                Err(Error::Degenerate(_)) => f64::NAN,
                Err(e) => return Err(e),
            };
            let row = QoiRow {
                patient: i,
                eta: y.eta,
                r_true,
                r_rec,
                index_true: blockage_index(r_true),
                index_rec: if r_rec.is_nan() {
                    f64::INFINITY
                } else {
                    blockage_index(r_rec)
                },
                label_true: label_health(y)?,
                label_pred: Health::Healthy,
            };
            Ok((row, fell_back))
        })
        .collect::<Result<Vec<_>>>()?;
    let coverage_fallbacks = rows.iter().filter(|r| r.1).count();
    let mut rows: Vec<QoiRow> = rows.into_iter().map(|r| r.0).collect();
    let healthy: Vec<f64> = rows
        .iter()
        .filter(|r| r.label_true == Health::Healthy)
        .map(|r| r.index_rec)
        .collect();
    let sick: Vec<f64> = rows
        .iter()
        .filter(|r| r.label_true == Health::Sick)
        .map(|r| r.index_rec)
        .collect();
    let r_star = threshold(&healthy, &sick)?;
    let mut report = QoiReport {
        rows: Vec::new(),
        threshold: r_star,
        true_positives: 0,
        false_positives: 0,
        true_negatives: 0,
        false_negatives: 0,
        sign_violations: Vec::new(),
        coverage_fallbacks,
    };
    for row in &mut rows {
        row.label_pred = if row.index_rec > r_star {
            Health::Sick
        } else {
            Health::Healthy
        };
        match (row.label_true, row.label_pred) {
            (Health::Sick, Health::Sick) => report.true_positives += 1,
            (Health::Healthy, Health::Sick) => report.false_positives += 1,
            (Health::Healthy, Health::Healthy) => report.true_negatives += 1,
            (Health::Sick, Health::Healthy) => report.false_negatives += 1,
        }
        if row.label_true == Health::Sick && row.index_rec < row.index_true - 0.05 * (1.0 + row.index_true) {
            report.sign_violations.push(row.patient);
        }
    }
    report.rows = rows;
    Ok(report)
}

/// Per-snapshot projection error `|u - P_W u|` for every snapshot of `db`.
pub fn projection_errors(db: &SnapshotDatabase, meas: &MeasurementSpace) -> Result<Vec<f64>> {
    db.snapshots
        .par_iter()
        .map(|s| {
            let field = meas.field(&observe(s, meas)?)?;
            let diff: Vec<f64> = s.coeffs.iter().zip(field.iter()).map(|(a, b)| a - b).collect();
            db.space.norm(&diff)
        })
        .collect()
}

/// `printf("%.17g")` formatting, which round-trips every finite double.
pub fn fmt_g17(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..17).contains(&exp) {
        let fixed = format!("{:.*}", (16 - exp) as usize, x);
        strip_zeros(&fixed).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", strip_zeros(mantissa), exp.abs())
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `sweep.csv`: one row per (method, n).
pub fn write_sweep_csv(reports: &[SweepReport], path: &Path) -> Result<()> {
    let mut out = String::from("method,n,e_av,e_wc,beta_min,apply_us_p50\n");
    for r in reports {
        for (j, n) in r.n_grid.iter().enumerate() {
            let us = r.apply_us_p50[j].map(fmt_g17).unwrap_or_default();
            out.push_str(&format!(
                "{},{n},{},{},{},{us}\n",
                r.method,
                fmt_g17(r.e_av[j]),
                fmt_g17(r.e_wc[j]),
                fmt_g17(r.beta_min[j])
            ));
        }
    }
    write_text(path, &out)
}

/// `per_snapshot.csv`: one row per (method, n, test snapshot).
pub fn write_per_snapshot_csv(reports: &[SweepReport], path: &Path) -> Result<()> {
    let mut out = String::from("method,n,snapshot,rel_error\n");
    for r in reports {
        for (j, n) in r.n_grid.iter().enumerate() {
            for (i, e) in r.per_snapshot[j].iter().enumerate() {
                out.push_str(&format!("{},{n},{i},{}\n", r.method, fmt_g17(*e)));
            }
        }
    }
    write_text(path, &out)
}

fn health_label(h: Health) -> &'static str {
    match h {
        Health::Healthy => "healthy",
        Health::Sick => "sick",
    }
}

/// `qoi.csv`: one row per patient.
pub fn write_qoi_csv(report: &QoiReport, path: &Path) -> Result<()> {
    let mut out = String::from("patient,eta,r_true,r_rec,label_true,label_pred\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.patient,
            fmt_g17(r.eta),
            fmt_g17(r.r_true),
            fmt_g17(r.r_rec),
            health_label(r.label_true),
            health_label(r.label_pred)
        ));
    }
    write_text(path, &out)
}

/// Pretty JSON with keys sorted at every level and a trailing newline.
pub fn write_manifest(value: &serde_json::Value, path: &Path) -> Result<()> {
    // serde_json's default map is ordered by key
    let sorted: serde_json::Value = serde_json::from_str(&value.to_string()).map_err(|e| Error::json(path, e))?;
    let mut text = serde_json::to_string_pretty(&sorted).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_text(path, &text)
}
