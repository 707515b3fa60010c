//! PBDW reconstruction: linear, affine, partitioned and data-driven (OMP).
//!
//! With orthonormal bases of `V_n` and `W_m`, the cross-Gram `G = G(W, V)` is
//! the matrix of `P_{W|V}`. The reduced coefficients solve the least-squares
//! problem `min |omega - G c|`, i.e. the normal equations `G^T G c = G^T omega`,
//! through a thin QR factorization of `G`. The estimate is
//! `u* = V c + W (omega - G c)`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::hilbert::{gram, orthonormalize_tracked, smallest_singular_value, Basis, DEFAULT_DROP_TOL};
use crate::manifold::{
    read_f64s, read_json, write_f64s, write_json, CellKey, ParameterPoint, Partition, SnapshotDatabase,
};
use crate::measurement::{MeasurementSpace, Observation};
use crate::reduced::{nominal_state, pod, strong_greedy, Provenance, ReducedBasis};

/// Smallest inf-sup constant accepted by [`pbdw_fit`].
pub const BETA_FLOOR: f64 = 1e-12;
/// Relative tolerance used by the greedy selection in observation space.
pub const OMP_TOL: f64 = 1e-12;

/// A full-field estimate and its diagnostics.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub u_star: DVector<f64>,
    pub v_star_coeffs: DVector<f64>,
    /// `|omega - P_W v*|`.
    pub correction_norm: f64,
    pub beta_used: f64,
    pub n: usize,
    pub method: String,
}

/// JSON sidecar written next to an exported field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionMeta {
    pub method: String,
    pub n: usize,
    pub beta_used: f64,
    pub correction_norm: f64,
    pub timing_us: Option<f64>,
    pub n_dofs: usize,
}

/// Writes `<stem>.f64` (little-endian field) and `<stem>.json`.
pub fn write_reconstruction(
    rec: &Reconstruction,
    timing_us: Option<f64>,
    dir: &Path,
    stem: &str,
) -> Result<(PathBuf, PathBuf)> {
    let field = dir.join(format!("{stem}.f64"));
    let meta = dir.join(format!("{stem}.json"));
    write_f64s(&field, rec.u_star.iter().copied())?;
    write_json(
        &meta,
        &ReconstructionMeta {
            method: rec.method.clone(),
            n: rec.n,
            beta_used: rec.beta_used,
            correction_norm: rec.correction_norm,
            timing_us,
            n_dofs: rec.u_star.len(),
        },
    )?;
    Ok((field, meta))
}

/// Reads back a field written by [`write_reconstruction`].
pub fn read_reconstruction(dir: &Path, stem: &str) -> Result<(DVector<f64>, ReconstructionMeta)> {
    let field_path = dir.join(format!("{stem}.f64"));
    let meta: ReconstructionMeta = read_json(&dir.join(format!("{stem}.json")))?;
    let field = read_f64s(&field_path)?;
    if field.len() != meta.n_dofs {
        return Err(Error::integrity(
            field_path,
            format!("expected {} values, found {}", meta.n_dofs, field.len()),
        ));
    }
    Ok((DVector::from_vec(field), meta))
}

/// Factorized reconstruction operator for one pair `(V_n, W_m)`.
#[derive(Debug, Clone)]
pub struct PbdwOperator {
    basis: ReducedBasis,
    meas: Arc<MeasurementSpace>,
    cross_gram: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    beta: f64,
    nominal_obs: Option<DVector<f64>>,
}

/// Precomputes the cross-Gram, its thin QR factors and the inf-sup constant.
pub fn pbdw_fit(vn: &ReducedBasis, wm: &Arc<MeasurementSpace>) -> Result<PbdwOperator> {
    let g = gram(wm.representers(), &vn.modes)?;
    PbdwOperator::with_gram(vn.clone(), wm.clone(), g)
}

impl PbdwOperator {
    fn with_gram(basis: ReducedBasis, meas: Arc<MeasurementSpace>, g: DMatrix<f64>) -> Result<Self> {
        let n = basis.dim();
        let m = meas.dim();
        if !basis.modes.is_orthonormal() {
            return Err(Error::Contract("reduced basis must be orthonormal".into()));
        }
        if n == 0 || n > m {
            return Err(Error::Precondition(format!("need 1 <= n <= m, got n = {n}, m = {m}")));
        }
        let beta = smallest_singular_value(g.clone());
        if !(beta > BETA_FLOOR) {
            return Err(Error::IllPosed { n, beta });
        }
        let qr = g.clone().qr();
        let nominal_obs = match &basis.nominal {
            Some(ubar) => Some(meas.representers().coords(ubar.as_slice())?),
            None => None,
        };
        Ok(Self {
            q: qr.q(),
            r: qr.r(),
            basis,
            meas,
            cross_gram: g,
            beta,
            nominal_obs,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn n(&self) -> usize {
        self.basis.dim()
    }

    pub fn basis(&self) -> &ReducedBasis {
        &self.basis
    }

    pub fn measurement(&self) -> &Arc<MeasurementSpace> {
        &self.meas
    }

    /// `G(W, V)`, the matrix of `P_{W|V}` in the orthonormal bases.
    pub fn cross_gram(&self) -> &DMatrix<f64> {
        &self.cross_gram
    }

    /// `omega_bar = P_W u_bar` in observation coordinates, when a nominal state is attached.
    pub fn nominal_observation(&self) -> Option<&DVector<f64>> {
        self.nominal_obs.as_ref()
    }

    fn solve(&self, w: &DVector<f64>) -> DVector<f64> {
        let rhs = self.q.tr_mul(w);
        self.r
            .solve_upper_triangular(&rhs)
            .expect("R is invertible when beta > 0")
    }

    fn reconstruct(&self, w: &DVector<f64>, method: &str) -> Result<Reconstruction> {
        let c = self.solve(w);
        let correction = w - &self.cross_gram * &c;
        let u_star = self.basis.modes.combine(&c)? + self.meas.representers().combine(&correction)?;
        Ok(Reconstruction {
            u_star,
            v_star_coeffs: c,
            correction_norm: correction.norm(),
            beta_used: self.beta,
            n: self.n(),
            method: method.to_string(),
        })
    }

    /// Linear PBDW: `u* = v* + omega - P_W v*`.
    pub fn apply(&self, obs: &Observation) -> Result<Reconstruction> {
        self.meas.check(obs)?;
        self.reconstruct(&obs.values, "pbdw")
    }

    /// Affine PBDW around the attached nominal state: `u_bar + A(omega - omega_bar)`.
    pub fn affine_apply(&self, obs: &Observation) -> Result<Reconstruction> {
        self.meas.check(obs)?;
        let (ubar, wbar) = match (&self.basis.nominal, &self.nominal_obs) {
            (Some(u), Some(w)) => (u, w),
            _ => return Err(Error::Contract("affine reconstruction needs a nominal state".into())),
        };
        let mut rec = self.reconstruct(&(&obs.values - wbar), "affine")?;
        rec.u_star += ubar;
        Ok(rec)
    }
}

pub fn pbdw_apply(op: &PbdwOperator, obs: &Observation) -> Result<Reconstruction> {
    op.apply(obs)
}

pub fn affine_apply(op: &PbdwOperator, obs: &Observation) -> Result<Reconstruction> {
    op.affine_apply(obs)
}

/// One affine operator per partition cell.
#[derive(Debug, Clone)]
pub struct PartitionedEstimator {
    partition: Partition,
    ops: BTreeMap<CellKey, PbdwOperator>,
}

impl PartitionedEstimator {
    /// Cells without an operator are removed from the dispatch table.
    pub fn new(partition: &Partition, ops: BTreeMap<CellKey, PbdwOperator>) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::Precondition("partitioned estimator without any cell".into()));
        }
        let mut partition = partition.clone();
        partition.cells.retain(|k, _| ops.contains_key(k));
        if partition.cells.len() != ops.len() {
            return Err(Error::Contract("operator keys must be cells of the partition".into()));
        }
        Ok(Self { partition, ops })
    }

    pub fn operators(&self) -> &BTreeMap<CellKey, PbdwOperator> {
        &self.ops
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn dispatch(&self, t: f64, hr: f64) -> Result<CellKey> {
        if !(hr > 0.0 && t.is_finite()) {
            return Err(Error::Validation(format!("invalid time/heart rate ({t}, {hr})")));
        }
        let y = ParameterPoint {
            t,
            hr,
            s: 0.0,
            t_sys: 0.0,
            u0: 0.0,
            eta: 0.0,
        };
        self.partition.dispatch(&y)
    }

    pub fn apply(&self, t: f64, hr: f64, obs: &Observation) -> Result<(CellKey, Reconstruction)> {
        let cell = self.dispatch(t, hr)?;
        Ok((cell, self.ops[&cell].affine_apply(obs)?))
    }

    /// Like [`apply`](Self::apply), but an uncovered `(t, HR)` uses the nearest
    /// cell. The flag reports whether that happened.
    pub fn apply_or_nearest(&self, t: f64, hr: f64, obs: &Observation) -> Result<(CellKey, Reconstruction, bool)> {
        let (cell, fallback) = match self.dispatch(t, hr) {
            Ok(c) => (c, false),
            Err(Error::OutOfCoverage { nearest: Some(c), .. }) => (c, true),
            Err(e) => return Err(e),
        };
        Ok((cell, self.ops[&cell].affine_apply(obs)?, fallback))
    }
}

/// How local bases are built inside each partition cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalBasisKind {
    Pod,
    Greedy,
}

/// Centered POD or strong greedy per non-empty cell, each of size at most `n_max`.
pub fn local_bases(
    db: &SnapshotDatabase,
    partition: &Partition,
    kind: LocalBasisKind,
    n_max: usize,
) -> Result<BTreeMap<CellKey, ReducedBasis>> {
    if n_max == 0 {
        return Err(Error::Precondition("local bases need n_max >= 1".into()));
    }
    let cells: Vec<(&CellKey, &Vec<usize>)> = partition.cells.iter().collect();
    let built: Vec<Result<(CellKey, ReducedBasis)>> = cells
        .par_iter()
        .map(|&(&key, members)| {
            let snaps: Vec<&[f64]> = members.iter().map(|&i| db.snapshots[i].coeffs.as_slice()).collect();
            let n = n_max.min(snaps.len());
            let mut basis = match kind {
                LocalBasisKind::Pod => match pod(&db.space, &snaps, n, true) {
                    Err(Error::RankZero) => {
                        // every member equals the mean; keep one direction through it
                        let mut b = pod(&db.space, &snaps, 1, false)?;
                        b.nominal = Some(nominal_state(&snaps)?);
                        b.truncated = true;
                        b
                    }
                    other => other?,
                },
                LocalBasisKind::Greedy => strong_greedy(&db.space, &snaps, n)?,
            };
            basis.source = format!("cell({},{})", key.0, key.1);
            basis.truncated |= basis.dim() < n_max;
            Ok((key, basis))
        })
        .collect();
    built.into_iter().collect()
}

/// Fits the largest prefix of dimension at most `min(n, dim, m)` whose
/// inf-sup constant clears [`BETA_FLOOR`].
pub fn fit_largest_stable(basis: &ReducedBasis, meas: &Arc<MeasurementSpace>, n: usize) -> Result<PbdwOperator> {
    let g_full = gram(meas.representers(), &basis.modes)?;
    let top = n.min(basis.dim()).min(meas.dim());
    let mut last_beta = 0.0;
    for k in (1..=top).rev() {
        let g = g_full.columns(0, k).into_owned();
        match PbdwOperator::with_gram(basis.prefix(k)?, meas.clone(), g) {
            Ok(op) => return Ok(op),
            Err(Error::IllPosed { beta, .. }) => last_beta = beta,
            Err(e) => return Err(e),
        }
    }
    Err(Error::IllPosed { n: 1, beta: last_beta })
}

/// A partitioned estimator at one target dimension.
#[derive(Debug, Clone)]
pub struct PartitionedFit {
    pub estimator: PartitionedEstimator,
    /// Dimension actually used in each cell.
    pub dims: BTreeMap<CellKey, usize>,
    /// Cells that could not use the requested dimension.
    pub capped: Vec<CellKey>,
    /// Smallest inf-sup constant over the cells.
    pub beta_min: f64,
}

/// Fits every cell at `min(n, cell basis size, m)`, lowering the dimension
/// further in cells where the fit is ill-posed. Cells with no stable
/// dimension are left out.
pub fn fit_partitioned(
    partition: &Partition,
    bases: &BTreeMap<CellKey, ReducedBasis>,
    meas: &Arc<MeasurementSpace>,
    n: usize,
) -> Result<PartitionedFit> {
    let mut ops = BTreeMap::new();
    let mut dims = BTreeMap::new();
    let mut capped = Vec::new();
    let mut beta_min = f64::INFINITY;
    for (&key, basis) in bases {
        let fitted = match fit_largest_stable(basis, meas, n) {
            Ok(op) => Some((op.n(), op)),
            Err(Error::IllPosed { .. }) => None,
            Err(e) => return Err(e),
        };
        match fitted {
            Some((k, op)) => {
                if k < n {
                    capped.push(key);
                }
                beta_min = beta_min.min(op.beta());
                dims.insert(key, k);
                ops.insert(key, op);
            }
            None => capped.push(key),
        }
    }
    Ok(PartitionedFit {
        estimator: PartitionedEstimator::new(partition, ops)?,
        dims,
        capped,
        beta_min,
    })
}

/// Affine reconstruction with the operator of the cell covering `(t mod 60/HR, HR)`.
pub fn partitioned_apply(est: &PartitionedEstimator, t: f64, hr: f64, obs: &Observation) -> Result<Reconstruction> {
    est.apply(t, hr, obs).map(|(_, r)| r)
}

/// A dictionary prepared for greedy selection in observation coordinates.
#[derive(Debug, Clone)]
pub struct OmpDictionary {
    meas: Arc<MeasurementSpace>,
    nominal: DVector<f64>,
    nominal_obs: DVector<f64>,
    /// Shifted, normalized elements `(u - u_bar) / |u - u_bar|` as columns.
    elements: DMatrix<f64>,
    /// Position of each element in the input dictionary.
    source: Vec<usize>,
    /// `P_W` of every element, in observation coordinates.
    projections: DMatrix<f64>,
    projection_norms: Vec<f64>,
    /// Mean of the shifted dictionary and its projection.
    mean: Option<(DVector<f64>, DVector<f64>)>,
}

/// Which element a greedy step picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmpPick {
    /// The mean of the shifted dictionary (first step).
    Mean,
    /// An input dictionary element, by its index in the input.
    Element(usize),
}

impl OmpDictionary {
    pub fn new(dict: &[&[f64]], nominal: &DVector<f64>, meas: &Arc<MeasurementSpace>) -> Result<Self> {
        let space = meas.space();
        check_len(space.dim(), nominal.len())?;
        let scale = dict
            .iter()
            .map(|u| space.norm_unchecked(u))
            .fold(space.norm_unchecked(nominal.as_slice()), f64::max);
        let mut cols = Vec::new();
        let mut source = Vec::new();
        for (i, u) in dict.iter().enumerate() {
            check_len(space.dim(), u.len())?;
            let d = DVector::from_column_slice(u) - nominal;
            let norm = space.norm_unchecked(d.as_slice());
            if norm <= OMP_TOL * scale || norm == 0.0 {
                continue;
            }
            cols.push(d / norm);
            source.push(i);
        }
        if cols.is_empty() {
            return Err(Error::SelectionExhausted);
        }
        let elements = DMatrix::from_columns(&cols);
        let w = meas.representers();
        let projections = w.matrix().tr_mul(&space.weighted(&elements));
        let projection_norms = projections.column_iter().map(|c| c.norm()).collect();
        let mean_vec = elements.column_mean();
        let mean = if space.norm_unchecked(mean_vec.as_slice()) > OMP_TOL {
            let proj = w.coords(mean_vec.as_slice())?;
            Some((mean_vec, proj))
        } else {
            None
        };
        Ok(Self {
            nominal_obs: w.coords(nominal.as_slice())?,
            meas: meas.clone(),
            nominal: nominal.clone(),
            elements,
            source,
            projections,
            projection_norms,
            mean,
        })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn nominal(&self) -> &DVector<f64> {
        &self.nominal
    }

    /// Greedy selection of up to `n` directions for the observation `obs`.
    ///
    /// The target is `omega - omega_bar`. Each step after the first solves the
    /// small system `A c = g` with `a_ij = <P_W phi_i, P_W phi_j>` and
    /// `g_i = <omega, P_W phi_i>`, then picks the element maximizing
    /// `|<residual, P_W v>| / |P_W v|`.
    pub fn select(&self, obs: &Observation, n: usize) -> Result<Vec<OmpPick>> {
        self.meas.check(obs)?;
        if n == 0 || n > self.meas.dim() {
            return Err(Error::Precondition(format!(
                "OMP size {n} must lie in [1, m = {}]",
                self.meas.dim()
            )));
        }
        let target = &obs.values - &self.nominal_obs;
        let target_norm = target.norm();
        let mut picks = Vec::with_capacity(n);
        let mut chosen: Vec<DVector<f64>> = Vec::with_capacity(n);
        let mut taken = vec![false; self.len()];
        if let Some((_, proj)) = &self.mean {
            picks.push(OmpPick::Mean);
            chosen.push(proj.clone());
        }
        while picks.len() < n {
            let residual = if chosen.is_empty() {
                target.clone()
            } else {
                let z = DMatrix::from_columns(&chosen);
                let a = z.tr_mul(&z);
                let g = z.tr_mul(&target);
                let c = solve_small(a, &g);
                &target - z * c
            };
            if residual.norm() <= OMP_TOL * target_norm || target_norm == 0.0 {
                break;
            }
            let mut best: Option<(f64, usize)> = None;
            for (k, (&pn, &used)) in self.projection_norms.iter().zip(&taken).enumerate() {
                if used || pn <= OMP_TOL {
                    continue;
                }
                let score = residual.dot(&self.projections.column(k)).abs() / pn;
                if best.is_none_or(|(b, _)| score > b) {
                    best = Some((score, k));
                }
            }
            let (_, k) = best.ok_or(Error::SelectionExhausted)?;
            taken[k] = true;
            picks.push(OmpPick::Element(self.source[k]));
            chosen.push(self.projections.column(k).into_owned());
        }
        Ok(picks)
    }

    fn full_vector(&self, pick: OmpPick) -> DVector<f64> {
        match pick {
            OmpPick::Mean => self.mean.as_ref().expect("mean was picked").0.clone(),
            OmpPick::Element(i) => {
                let k = self.source.iter().position(|&s| s == i).expect("picked element exists");
                self.elements.column(k).into_owned()
            }
        }
    }

    /// Orthonormalized full-space directions of a selection, nominal attached.
    pub fn basis_of(&self, picks: &[OmpPick]) -> Result<ReducedBasis> {
        let vectors: Vec<DVector<f64>> = picks.iter().map(|&p| self.full_vector(p)).collect();
        let (modes, kept) = orthonormalize_tracked(&vectors, self.meas.space(), DEFAULT_DROP_TOL)?;
        let selected = kept
            .iter()
            .filter_map(|&k| match picks[k] {
                OmpPick::Element(i) => Some(i),
                OmpPick::Mean => None,
            })
            .collect();
        Ok(ReducedBasis {
            truncated: modes.len() < picks.len(),
            modes,
            singular_values: None,
            nominal: Some(self.nominal.clone()),
            provenance: Provenance::Omp,
            source: "omp".into(),
            selected,
        })
    }

    /// Data-driven reconstruction, falling back to smaller `n` when the
    /// selected space is unstable.
    pub fn reconstruct(&self, obs: &Observation, n: usize) -> Result<Reconstruction> {
        let picks = self.select(obs, n)?;
        let basis = self.basis_of(&picks)?;
        let mut last_beta = 0.0;
        for k in (1..=basis.dim()).rev() {
            match pbdw_fit(&basis.prefix(k)?, &self.meas) {
                Ok(op) => {
                    let mut rec = op.affine_apply(obs)?;
                    rec.method = fallback_tag(k, basis.dim());
                    return Ok(rec);
                }
                Err(Error::IllPosed { beta, .. }) => last_beta = beta,
                Err(e) => return Err(e),
            }
        }
        Err(Error::IllPosed { n: 1, beta: last_beta })
    }

    /// Reconstructions for every `n` in `ns` from a single greedy run, each
    /// with the basis it used.
    ///
    /// Greedy selections and Gram-Schmidt are prefix-consistent, so this equals
    /// calling [`reconstruct`](Self::reconstruct) once per `n`.
    pub fn reconstruct_many(&self, obs: &Observation, ns: &[usize]) -> Result<Vec<(Reconstruction, ReducedBasis)>> {
        let n_max = ns.iter().copied().max().unwrap_or(0);
        let picks = self.select(obs, n_max)?;
        let full = self.basis_of(&picks)?;
        let g_full = gram(self.meas.representers(), &full.modes)?;
        let mut out = Vec::with_capacity(ns.len());
        for &n in ns {
            // picks a run with this n would have made
            let made = n.min(picks.len());
            let dim = full_prefix_len(&full, &picks, made);
            let mut result = None;
            let mut last_beta = 0.0;
            for k in (1..=dim).rev() {
                let basis = full.prefix(k)?;
                let g = g_full.columns(0, k).into_owned();
                match PbdwOperator::with_gram(basis, self.meas.clone(), g) {
                    Ok(op) => {
                        let mut rec = op.affine_apply(obs)?;
                        rec.method = fallback_tag(k, dim);
                        result = Some((rec, op.basis));
                        break;
                    }
                    Err(Error::IllPosed { beta, .. }) => last_beta = beta,
                    Err(e) => return Err(e),
                }
            }
            out.push(result.ok_or(Error::IllPosed { n: 1, beta: last_beta })?);
        }
        Ok(out)
    }
}

/// Number of orthonormal modes that survive from the first `made` picks.
fn full_prefix_len(full: &ReducedBasis, picks: &[OmpPick], made: usize) -> usize {
    if made == picks.len() {
        return full.dim();
    }
    let kept_elements = picks[..made]
        .iter()
        .filter(|p| matches!(p, OmpPick::Element(i) if full.selected.contains(i)))
        .count();
    let mean_kept = matches!(picks.first(), Some(OmpPick::Mean)) && full.dim() > full.selected.len();
    kept_elements + usize::from(mean_kept && made > 0)
}

fn fallback_tag(used: usize, available: usize) -> String {
    if used == available {
        "omp".to_string()
    } else {
        format!("omp(fallback n={used})")
    }
}

fn solve_small(a: DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    if let Some(ch) = a.clone().cholesky() {
        return ch.solve(g);
    }
    a.svd(true, true)
        .solve(g, 1e-14)
        .expect("both singular vector sets were computed")
}

/// Greedy OMP basis for `obs` over `dict`, shifted by `nominal`.
pub fn omp_select(
    dict: &[&[f64]],
    nominal: &DVector<f64>,
    meas: &Arc<MeasurementSpace>,
    obs: &Observation,
    n: usize,
) -> Result<ReducedBasis> {
    let d = OmpDictionary::new(dict, nominal, meas)?;
    let picks = d.select(obs, n)?;
    d.basis_of(&picks)
}

/// OMP selection followed by affine PBDW on the selected space.
pub fn data_driven_apply(
    dict: &[&[f64]],
    nominal: &DVector<f64>,
    meas: &Arc<MeasurementSpace>,
    obs: &Observation,
    n: usize,
) -> Result<Reconstruction> {
    OmpDictionary::new(dict, nominal, meas)?.reconstruct(obs, n)
}

/// `Basis` re-export point for callers composing operators by hand.
pub fn orthonormal_modes(op: &PbdwOperator) -> &Basis {
    &op.basis.modes
}
