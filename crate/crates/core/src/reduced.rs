//! Reduced bases built from snapshot sets.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::hilbert::{apply_sign_convention, gram, orthonormalize_tracked, Basis, DiscreteSpace, DEFAULT_DROP_TOL};
use crate::manifold::{ensure_dir, read_f64s, read_json, write_f64s, write_json};

/// Eigenvalues of the correlation operator below this fraction of the largest are dropped.
pub const EIGEN_DROP_REL: f64 = 1e-24;
/// Greedy stops once every residual is below this fraction of the largest snapshot norm.
pub const GREEDY_STOP_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Pod,
    Greedy,
    Omp,
}

#[derive(Debug, Clone)]
pub struct ReducedBasis {
    pub modes: Basis,
    pub singular_values: Option<Vec<f64>>,
    pub nominal: Option<DVector<f64>>,
    pub provenance: Provenance,
    /// `"global"` or a cell label.
    pub source: String,
    /// Indices of the selected input elements (greedy and OMP).
    pub selected: Vec<usize>,
    /// Set when the construction stopped before reaching the requested size.
    pub truncated: bool,
}

impl ReducedBasis {
    pub fn dim(&self) -> usize {
        self.modes.len()
    }

    pub fn space(&self) -> &DiscreteSpace {
        self.modes.space()
    }

    /// The first `n` modes with the same nominal state.
    pub fn prefix(&self, n: usize) -> Result<ReducedBasis> {
        if n == 0 {
            return Err(Error::Precondition("a reduced basis needs at least one mode".into()));
        }
        Ok(ReducedBasis {
            modes: self.modes.prefix(n)?,
            singular_values: self.singular_values.as_ref().map(|s| s[..n].to_vec()),
            nominal: self.nominal.clone(),
            provenance: self.provenance,
            source: self.source.clone(),
            selected: self.selected.iter().take(n).copied().collect(),
            truncated: self.truncated,
        })
    }

    /// Distance from `u` to the affine space `nominal + span(modes)`.
    pub fn affine_distance(&self, u: &[f64]) -> Result<f64> {
        let shifted: Vec<f64> = match &self.nominal {
            Some(ubar) => u.iter().zip(ubar.iter()).map(|(a, b)| a - b).collect(),
            None => u.to_vec(),
        };
        crate::hilbert::distance(&self.modes, &shifted)
    }
}

fn as_matrix(space: &DiscreteSpace, snaps: &[&[f64]]) -> Result<DMatrix<f64>> {
    for s in snaps {
        check_len(space.dim(), s.len())?;
    }
    Ok(DMatrix::from_fn(space.dim(), snaps.len(), |i, j| snaps[j][i]))
}

/// Arithmetic mean of the snapshot coefficient vectors.
pub fn nominal_state(snaps: &[&[f64]]) -> Result<DVector<f64>> {
    let first = snaps
        .first()
        .ok_or_else(|| Error::Precondition("mean of an empty snapshot set".into()))?;
    let mut sum = DVector::zeros(first.len());
    for s in snaps {
        check_len(first.len(), s.len())?;
        for (acc, x) in sum.iter_mut().zip(s.iter()) {
            *acc += x;
        }
    }
    Ok(sum / snaps.len() as f64)
}

/// Proper orthogonal decomposition of a snapshot set.
///
/// The metric correlation matrix `C_ij = <u_i, u_j>` is eigendecomposed when
/// there are no more snapshots than dofs. Otherwise the thin SVD of the
/// metric-weighted `N x K` snapshot matrix gives the same modes at a cost
/// bounded by `N`.
pub fn pod(space: &DiscreteSpace, snaps: &[&[f64]], n_max: usize, center: bool) -> Result<ReducedBasis> {
    if snaps.is_empty() {
        return Err(Error::Precondition("POD of an empty snapshot set".into()));
    }
    if n_max == 0 || n_max > snaps.len() {
        return Err(Error::Precondition(format!(
            "POD size {n_max} must lie in [1, {}]",
            snaps.len()
        )));
    }
    let mut x = as_matrix(space, snaps)?;
    let nominal = if center {
        let mean = nominal_state(snaps)?;
        for mut col in x.column_iter_mut() {
            col -= &mean;
        }
        Some(mean)
    } else {
        None
    };
    let (raw_modes, sigma) = if x.ncols() <= x.nrows() {
        pod_by_snapshots(space, &x, n_max)
    } else {
        pod_by_dofs(space, &x, n_max)
    };
    if raw_modes.is_empty() {
        return Err(Error::RankZero);
    }
    let (modes, kept) = orthonormalize_tracked(&raw_modes, space, DEFAULT_DROP_TOL)?;
    let singular_values = kept.iter().map(|&k| sigma[k]).collect();
    Ok(ReducedBasis {
        modes,
        singular_values: Some(singular_values),
        nominal,
        provenance: Provenance::Pod,
        source: "global".into(),
        selected: Vec::new(),
        truncated: kept.len() < n_max,
    })
}

/// Sorted (descending) eigenpairs of a symmetric matrix above the drop threshold.
fn leading_eigenpairs(c: DMatrix<f64>, n_max: usize) -> Vec<(f64, DVector<f64>)> {
    let eig = c.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let lmax = order.first().map_or(0.0, |&k| eig.eigenvalues[k]);
    if !(lmax > 0.0) {
        return Vec::new();
    }
    order
        .into_iter()
        .filter(|&k| eig.eigenvalues[k] > EIGEN_DROP_REL * lmax)
        .take(n_max)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors.column(k).into_owned()))
        .collect()
}

fn pod_by_snapshots(space: &DiscreteSpace, x: &DMatrix<f64>, n_max: usize) -> (Vec<DVector<f64>>, Vec<f64>) {
    let c = x.tr_mul(&space.weighted(x));
    let c = (&c + c.transpose()) * 0.5;
    let pairs = leading_eigenpairs(c, n_max);
    let Some(smax) = pairs.first().map(|(l, _)| l.sqrt()) else {
        return (Vec::new(), Vec::new());
    };
    // small eigenvalues of C carry absolute round-off; measure sigma directly
    pairs
        .into_iter()
        .filter_map(|(_, v)| {
            let mode = x * v;
            let sigma = space.norm_unchecked(mode.as_slice());
            (sigma > EIGEN_DROP_REL.sqrt() * smax).then(|| (mode / sigma, sigma))
        })
        .unzip()
}

fn pod_by_dofs(space: &DiscreteSpace, x: &DMatrix<f64>, n_max: usize) -> (Vec<DVector<f64>>, Vec<f64>) {
    let sqrt_w: Vec<f64> = space.weights().iter().map(|w| w.sqrt()).collect();
    let mut d = x.clone();
    for (mut row, s) in d.row_iter_mut().zip(&sqrt_w) {
        row *= *s;
    }
    let svd = d.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let smax = order.first().map_or(0.0, |&k| svd.singular_values[k]);
    if !(smax > 0.0) {
        return (Vec::new(), Vec::new());
    }
    order
        .into_iter()
        .filter(|&k| svd.singular_values[k] > EIGEN_DROP_REL.sqrt() * smax)
        .take(n_max)
        .map(|k| {
            let mut v = u.column(k).into_owned();
            for (x, s) in v.iter_mut().zip(&sqrt_w) {
                *x /= s;
            }
            (v, svd.singular_values[k])
        })
        .unzip()
}

/// Strong greedy selection: the first direction is the snapshot mean, then
/// each step adds the snapshot with the largest projection residual.
pub fn strong_greedy(space: &DiscreteSpace, snaps: &[&[f64]], n_max: usize) -> Result<ReducedBasis> {
    if snaps.is_empty() {
        return Err(Error::Precondition("greedy selection on an empty snapshot set".into()));
    }
    if n_max == 0 || n_max > snaps.len() {
        return Err(Error::Precondition(format!(
            "greedy size {n_max} must lie in [1, {}]",
            snaps.len()
        )));
    }
    let x = as_matrix(space, snaps)?;
    let mean = nominal_state(snaps)?;
    let scale = x
        .column_iter()
        .map(|c| space.norm_unchecked(c.as_slice()))
        .fold(0.0, f64::max);
    if !(scale > 0.0) {
        return Err(Error::RankZero);
    }
    let stop = GREEDY_STOP_REL * scale;

    let mut modes: Vec<DVector<f64>> = Vec::with_capacity(n_max);
    let mut residuals: Vec<DVector<f64>> = x.column_iter().map(|c| c.into_owned()).collect();
    let mut selected = Vec::new();
    let mut truncated = false;

    let push_mode = |v: DVector<f64>, modes: &mut Vec<DVector<f64>>, residuals: &mut Vec<DVector<f64>>| {
        let mut q = v;
        for _ in 0..2 {
            for p in modes.iter() {
                let c = space.inner_unchecked(p.as_slice(), q.as_slice());
                q.axpy(-c, p, 1.0);
            }
        }
        let norm = space.norm_unchecked(q.as_slice());
        if !(norm > 0.0) {
            return false;
        }
        q /= norm;
        apply_sign_convention(&mut q);
        for r in residuals.iter_mut() {
            let c = space.inner_unchecked(q.as_slice(), r.as_slice());
            r.axpy(-c, &q, 1.0);
        }
        modes.push(q);
        true
    };

    if space.norm_unchecked(mean.as_slice()) > stop {
        push_mode(mean.clone(), &mut modes, &mut residuals);
    }
    while modes.len() < n_max {
        let mut best: Option<(f64, usize)> = None;
        for (i, r) in residuals.iter().enumerate() {
            let norm = space.norm_unchecked(r.as_slice());
            if best.is_none_or(|(b, _)| norm > b) {
                best = Some((norm, i));
            }
        }
        let (norm, idx) = best.expect("non-empty snapshot set");
        if norm <= stop {
            truncated = true;
            break;
        }
        let direction = residuals[idx].clone();
        if !push_mode(direction, &mut modes, &mut residuals) {
            truncated = true;
            break;
        }
        selected.push(idx);
    }
    if modes.is_empty() {
        return Err(Error::RankZero);
    }
    let basis = Basis::new(space.clone(), &modes)?.into_orthonormal()?;
    Ok(ReducedBasis {
        modes: basis,
        singular_values: None,
        nominal: Some(mean),
        provenance: Provenance::Greedy,
        source: "global".into(),
        selected,
        truncated,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct BasisManifest {
    version: u32,
    provenance: Provenance,
    source: String,
    n: usize,
    #[serde(rename = "N")]
    n_dofs: usize,
    nominal: bool,
    singular_values: Option<Vec<f64>>,
    selected: Vec<usize>,
    truncated: bool,
}

const BASIS_MANIFEST: &str = "basis_manifest.json";
const MODES: &str = "modes.f64";
const NOMINAL: &str = "nominal.f64";

/// Writes `basis_manifest.json`, `modes.f64` and, if present, `nominal.f64`.
pub fn save_basis(basis: &ReducedBasis, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let manifest = BasisManifest {
        version: 1,
        provenance: basis.provenance,
        source: basis.source.clone(),
        n: basis.dim(),
        n_dofs: basis.space().dim(),
        nominal: basis.nominal.is_some(),
        singular_values: basis.singular_values.clone(),
        selected: basis.selected.clone(),
        truncated: basis.truncated,
    };
    write_json(&dir.join(BASIS_MANIFEST), &manifest)?;
    // column-major storage is already mode-major
    write_f64s(&dir.join(MODES), basis.modes.matrix().iter().copied())?;
    if let Some(ubar) = &basis.nominal {
        write_f64s(&dir.join(NOMINAL), ubar.iter().copied())?;
    }
    Ok(())
}

pub fn load_basis(dir: &Path, space: &DiscreteSpace) -> Result<ReducedBasis> {
    let manifest_path = dir.join(BASIS_MANIFEST);
    let m: BasisManifest = read_json(&manifest_path)?;
    if m.version != 1 {
        return Err(Error::UnsupportedVersion(m.version));
    }
    if m.n_dofs != space.dim() {
        return Err(Error::integrity(
            &manifest_path,
            format!("N = {} but the space has {}", m.n_dofs, space.dim()),
        ));
    }
    let modes_path = dir.join(MODES);
    let values = read_f64s(&modes_path)?;
    if values.len() != m.n * m.n_dofs || m.n == 0 {
        return Err(Error::integrity(
            &modes_path,
            "payload length disagrees with the manifest",
        ));
    }
    let modes = Basis::from_matrix(space.clone(), DMatrix::from_vec(m.n_dofs, m.n, values))?
        .into_orthonormal()
        .map_err(|e| Error::integrity(&modes_path, e.to_string()))?;
    let nominal = if m.nominal {
        let path = dir.join(NOMINAL);
        let v = read_f64s(&path)?;
        if v.len() != m.n_dofs {
            return Err(Error::integrity(&path, "nominal state has the wrong length"));
        }
        Some(DVector::from_vec(v))
    } else {
        None
    };
    Ok(ReducedBasis {
        modes,
        singular_values: m.singular_values,
        nominal,
        provenance: m.provenance,
        source: m.source,
        selected: m.selected,
        truncated: m.truncated,
    })
}

/// Mean-square distance of the snapshots to `nominal + span(modes)`.
pub fn mean_square_error(basis: &ReducedBasis, snaps: &[&[f64]]) -> Result<f64> {
    let mut acc = 0.0;
    for s in snaps {
        let d = basis.affine_distance(s)?;
        acc += d * d;
    }
    Ok((acc / snaps.len() as f64).sqrt())
}

/// Gram matrix helper for callers holding raw vectors.
pub fn correlation_matrix(space: &DiscreteSpace, snaps: &[&[f64]]) -> Result<DMatrix<f64>> {
    let x = Basis::from_matrix(space.clone(), as_matrix(space, snaps)?)?;
    gram(&x, &x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeated_snapshot_gives_one_mode() {
        let s = DiscreteSpace::new(vec![0.5, 1.0, 2.0, 1.5]).unwrap();
        let u = [1.0, -2.0, 0.5, 3.0];
        let snaps = vec![&u[..]; 5];
        let b = pod(&s, &snaps, 5, false).unwrap();
        assert_eq!(b.dim(), 1);
        let norm = s.norm(&u).unwrap();
        let sv = b.singular_values.unwrap()[0];
        assert!((sv - 5f64.sqrt() * norm).abs() < 1e-12 * sv);
        let expect: Vec<f64> = u.iter().map(|x| x / norm).collect();
        for (a, e) in b.modes.vector(0).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_equal_norm_pair() {
        let s = DiscreteSpace::identity(3).unwrap();
        let a = [3.0, 0.0, 0.0];
        let b = [0.0, 0.0, 3.0];
        let basis = pod(&s, &[&a, &b], 2, false).unwrap();
        let sv = basis.singular_values.clone().unwrap();
        assert!((sv[0] - sv[1]).abs() < 1e-12);
        assert!(basis.affine_distance(&a).unwrap() < 1e-12);
        assert!(basis.affine_distance(&b).unwrap() < 1e-12);
    }

    #[test]
    fn pod_errors() {
        let s = DiscreteSpace::identity(2).unwrap();
        let z = [0.0, 0.0];
        assert!(matches!(pod(&s, &[&z, &z], 1, false), Err(Error::RankZero)));
        let u = [1.0, 0.0];
        assert!(pod(&s, &[&u], 2, false).is_err());
        assert!(pod(&s, &[], 1, false).is_err());
    }

    #[test]
    fn greedy_tie_picks_lowest_index() {
        let s = DiscreteSpace::identity(2).unwrap();
        let e1 = [1.0, 0.0];
        let e2 = [0.0, 1.0];
        let b = strong_greedy(&s, &[&e1, &e2], 2).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((b.modes.vector(0) - DVector::from_vec(vec![r, r])).amax() < 1e-15);
        assert_eq!(b.selected, vec![0]);
    }

    #[test]
    fn greedy_never_picks_the_mean() {
        let s = DiscreteSpace::identity(3).unwrap();
        let a = [1.0, 0.0, 0.0];
        let b = [0.0, 1.0, 0.0];
        let c = [0.0, 0.0, 1.0];
        let mean = [1.0 / 3.0; 3];
        let basis = strong_greedy(&s, &[&mean, &a, &b, &c], 3).unwrap();
        assert!(!basis.selected.contains(&0));
        assert_eq!(basis.selected, vec![1, 2]);
    }

    #[test]
    fn greedy_stops_early_on_exhausted_residuals() {
        let s = DiscreteSpace::identity(3).unwrap();
        let a = [1.0, 1.0, 0.0];
        let b = [2.0, 2.0, 0.0];
        let basis = strong_greedy(&s, &[&a, &b], 2).unwrap();
        assert_eq!(basis.dim(), 1);
        assert!(basis.truncated);
    }

    #[test]
    fn nominal_of_opposites_is_zero() {
        let v = [1.0, -2.5, 3.0];
        let w = [-1.0, 2.5, -3.0];
        assert_eq!(nominal_state(&[&v, &w]).unwrap(), DVector::zeros(3));
        assert_eq!(nominal_state(&[&v]).unwrap(), DVector::from_row_slice(&v));
    }

    #[test]
    fn basis_files_round_trip() {
        let s = DiscreteSpace::new(vec![0.5, 1.0, 2.0, 1.5]).unwrap();
        let a = [1.0, -2.0, 0.5, 3.0];
        let b = [0.0, 1.0, 1.0, -1.0];
        let c = [2.0, 0.0, 0.0, 1.0];
        let basis = pod(&s, &[&a, &b, &c], 2, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_basis(&basis, dir.path()).unwrap();
        let back = load_basis(dir.path(), &s).unwrap();
        assert_eq!(back.modes.matrix(), basis.modes.matrix());
        assert_eq!(back.nominal, basis.nominal);
        assert_eq!(back.singular_values, basis.singular_values);
    }
}
