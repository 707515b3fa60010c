//! Inner-product algebra of the discrete ambient space.
//!
//! The metric is diagonal: `<a, b> = sum_k w_k a_k b_k` with strictly positive
//! quadrature weights `w_k`. Bases are stored column-wise in a dense
//! `N x n` matrix.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};

/// Default relative tolerance below which a vector is considered dependent.
pub const DEFAULT_DROP_TOL: f64 = 1e-10;

const ORTHONORMAL_TOL: f64 = 1e-10;

/// The background discretization: `N` degrees of freedom and a diagonal metric.
#[derive(Debug, Clone)]
pub struct DiscreteSpace {
    weights: Arc<[f64]>,
}

impl DiscreteSpace {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Validation("discrete space needs at least one dof".into()));
        }
        if let Some(k) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Validation(format!(
                "weight {k} = {} is not strictly positive",
                weights[k]
            )));
        }
        Ok(Self {
            weights: weights.into(),
        })
    }

    /// Identity metric on `dim` dofs.
    pub fn identity(dim: usize) -> Result<Self> {
        Self::new(vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn same_as(&self, other: &DiscreteSpace) -> bool {
        Arc::ptr_eq(&self.weights, &other.weights) || self.weights[..] == other.weights[..]
    }

    pub(crate) fn ensure_same(&self, other: &DiscreteSpace) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::IncompatibleSpace)
        }
    }

    pub fn inner(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        check_len(self.dim(), a.len())?;
        check_len(self.dim(), b.len())?;
        Ok(self.inner_unchecked(a, b))
    }

    pub fn norm(&self, a: &[f64]) -> Result<f64> {
        Ok(self.inner(a, a)?.sqrt())
    }

    pub(crate) fn inner_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        self.weights.iter().zip(a).zip(b).map(|((w, x), y)| w * x * y).sum()
    }

    pub(crate) fn norm_unchecked(&self, a: &[f64]) -> f64 {
        self.inner_unchecked(a, a).sqrt()
    }

    /// Columns of `m` scaled row-wise by the metric weights.
    pub(crate) fn weighted(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for (mut row, w) in out.row_iter_mut().zip(self.weights.iter()) {
            row *= *w;
        }
        out
    }
}

/// `<a, b>` in the metric of `space`.
pub fn inner(space: &DiscreteSpace, a: &[f64], b: &[f64]) -> Result<f64> {
    space.inner(a, b)
}

/// An ordered family of vectors in a [`DiscreteSpace`].
#[derive(Debug, Clone)]
pub struct Basis {
    space: DiscreteSpace,
    vectors: DMatrix<f64>,
    orthonormal: bool,
}

impl Basis {
    /// Wraps arbitrary vectors; the result is not flagged orthonormal.
    pub fn new(space: DiscreteSpace, vectors: &[DVector<f64>]) -> Result<Self> {
        for v in vectors {
            check_len(space.dim(), v.len())?;
        }
        let vectors = if vectors.is_empty() {
            DMatrix::zeros(space.dim(), 0)
        } else {
            DMatrix::from_columns(vectors)
        };
        Ok(Self {
            space,
            vectors,
            orthonormal: false,
        })
    }

    pub fn from_matrix(space: DiscreteSpace, vectors: DMatrix<f64>) -> Result<Self> {
        check_len(space.dim(), vectors.nrows())?;
        Ok(Self {
            space,
            vectors,
            orthonormal: false,
        })
    }

    /// Flags the basis orthonormal after checking its Gram matrix against the identity.
    pub fn into_orthonormal(mut self) -> Result<Self> {
        let g = gram(&self, &self)?;
        let n = self.len();
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                if (g[(i, j)] - target).abs() > ORTHONORMAL_TOL {
                    return Err(Error::Contract(format!(
                        "basis is not orthonormal: gram[{i},{j}] = {}",
                        g[(i, j)]
                    )));
                }
            }
        }
        self.orthonormal = true;
        Ok(self)
    }

    pub(crate) fn from_orthonormal_unchecked(space: DiscreteSpace, vectors: DMatrix<f64>) -> Self {
        Self {
            space,
            vectors,
            orthonormal: true,
        }
    }

    pub fn space(&self) -> &DiscreteSpace {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.ncols() == 0
    }

    pub fn is_orthonormal(&self) -> bool {
        self.orthonormal
    }

    /// Vectors as the columns of an `N x n` matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> DVector<f64> {
        self.vectors.column(i).into_owned()
    }

    pub fn vectors(&self) -> Vec<DVector<f64>> {
        self.vectors.column_iter().map(|c| c.into_owned()).collect()
    }

    /// The first `n` vectors. Prefixes of an orthonormal basis stay orthonormal.
    pub fn prefix(&self, n: usize) -> Result<Basis> {
        if n > self.len() {
            return Err(Error::Precondition(format!(
                "prefix of length {n} requested from a basis of length {}",
                self.len()
            )));
        }
        Ok(Basis {
            space: self.space.clone(),
            vectors: self.vectors.columns(0, n).into_owned(),
            orthonormal: self.orthonormal,
        })
    }

    /// Coordinates `<b_i, v>` of `v` against every basis vector.
    pub fn coords(&self, v: &[f64]) -> Result<DVector<f64>> {
        check_len(self.space.dim(), v.len())?;
        let w = self.space.weights();
        let wv: DVector<f64> = DVector::from_iterator(v.len(), w.iter().zip(v).map(|(a, b)| a * b));
        Ok(self.vectors.tr_mul(&wv))
    }

    /// `sum_i c_i b_i`.
    pub fn combine(&self, coeffs: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.len(), coeffs.len())?;
        Ok(&self.vectors * coeffs)
    }

    pub(crate) fn ensure_orthonormal(&self, what: &str) -> Result<()> {
        if self.orthonormal {
            Ok(())
        } else {
            Err(Error::Contract(format!("{what} requires an orthonormal basis")))
        }
    }
}

/// Metric Gram matrix with entries `<a_i, b_j>`.
pub fn gram(a: &Basis, b: &Basis) -> Result<DMatrix<f64>> {
    a.space.ensure_same(&b.space)?;
    Ok(a.vectors.tr_mul(&a.space.weighted(&b.vectors)))
}

/// Modified Gram-Schmidt with one re-orthogonalization pass.
///
/// A vector whose residual after projection is at most `drop_tol` times its
/// original norm is dropped. Each retained vector has its first significant
/// entry made nonnegative.
pub fn orthonormalize(vectors: &[DVector<f64>], space: &DiscreteSpace, drop_tol: f64) -> Result<Basis> {
    let (basis, _) = orthonormalize_tracked(vectors, space, drop_tol)?;
    Ok(basis)
}

/// Same as [`orthonormalize`], also returning the input indices that were kept.
pub fn orthonormalize_tracked(
    vectors: &[DVector<f64>],
    space: &DiscreteSpace,
    drop_tol: f64,
) -> Result<(Basis, Vec<usize>)> {
    if !(drop_tol > 0.0) {
        return Err(Error::Precondition(format!(
            "drop_tol must be positive, got {drop_tol}"
        )));
    }
    let mut kept: Vec<DVector<f64>> = Vec::new();
    let mut kept_idx = Vec::new();
    for (idx, v) in vectors.iter().enumerate() {
        check_len(space.dim(), v.len())?;
        let norm0 = space.norm_unchecked(v.as_slice());
        if !(norm0 > 0.0) {
            continue;
        }
        let mut r = v.clone();
        for _pass in 0..2 {
            for q in &kept {
                let c = space.inner_unchecked(q.as_slice(), r.as_slice());
                r.axpy(-c, q, 1.0);
            }
        }
        let norm = space.norm_unchecked(r.as_slice());
        if norm <= drop_tol * norm0 {
            continue;
        }
        r /= norm;
        apply_sign_convention(&mut r);
        kept.push(r);
        kept_idx.push(idx);
    }
    if kept.is_empty() {
        return Err(Error::RankZero);
    }
    let basis = Basis::from_orthonormal_unchecked(space.clone(), DMatrix::from_columns(&kept));
    Ok((basis, kept_idx))
}

pub(crate) fn apply_sign_convention(v: &mut DVector<f64>) {
    let scale = v.amax();
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12 * scale) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
}

/// Orthogonal projection of `v` onto the span of an orthonormal basis.
pub fn project(onto: &Basis, v: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
    onto.ensure_orthonormal("projection")?;
    let coeffs = onto.coords(v)?;
    let projection = onto.combine(&coeffs)?;
    Ok((coeffs, projection))
}

/// Metric distance from `v` to the span of an orthonormal basis.
pub fn distance(onto: &Basis, v: &[f64]) -> Result<f64> {
    let (_, p) = project(onto, v)?;
    let r: Vec<f64> = v.iter().zip(p.iter()).map(|(a, b)| a - b).collect();
    Ok(onto.space.norm_unchecked(&r))
}

/// Smallest singular value of the cross-Gram `G(W, V)` for orthonormal `V` (n) and `W` (m).
pub fn inf_sup(vn: &Basis, wm: &Basis) -> Result<f64> {
    vn.ensure_orthonormal("inf-sup")?;
    wm.ensure_orthonormal("inf-sup")?;
    if vn.len() > wm.len() {
        return Err(Error::Precondition(format!(
            "inf-sup needs dim(V) <= dim(W), got {} > {}",
            vn.len(),
            wm.len()
        )));
    }
    let g = gram(wm, vn)?;
    Ok(smallest_singular_value(g))
}

pub(crate) fn smallest_singular_value(g: DMatrix<f64>) -> f64 {
    if g.ncols() == 0 {
        return 1.0;
    }
    let s = g.singular_values();
    s.iter().cloned().fold(f64::INFINITY, f64::min).clamp(0.0, 1.0)
}
