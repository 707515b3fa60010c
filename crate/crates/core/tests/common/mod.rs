//! Independent oracles shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use pbdwkit::hilbert::{orthonormalize, Basis, DiscreteSpace, DEFAULT_DROP_TOL};
use pbdwkit::manifold::{GridConfig, Segment};
use pbdwkit::measurement::{cfi_space, MeasurementSpace, Observation, Region, VoxelPartition};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Double-double number `hi + lo`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub fn from(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let e = e + self.lo + o.lo;
        let (hi, lo) = two_sum(s, e);
        Dd { hi, lo }
    }

    pub fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + self.hi * o.lo + self.lo * o.hi;
        let (hi, lo) = two_sum(p, e);
        Dd { hi, lo }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(Dd { hi: -o.hi, lo: -o.lo })
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    /// Square root with one Newton correction in double-double.
    pub fn sqrt(self) -> Dd {
        if self.hi <= 0.0 {
            return Dd::default();
        }
        let x = self.hi.sqrt();
        let x2 = Dd::from(x).mul(Dd::from(x));
        let corr = self.sub(x2).to_f64() / (2.0 * x);
        let (hi, lo) = two_sum(x, corr);
        Dd { hi, lo }
    }
}

/// `sum_i w_i a_i b_i` in double-double.
pub fn dd_inner(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let mut acc = Dd::default();
    for i in 0..w.len() {
        acc = acc.add(Dd::from(w[i]).mul(Dd::from(a[i])).mul(Dd::from(b[i])));
    }
    acc.to_f64()
}

pub fn dd_norm(w: &[f64], a: &[f64]) -> f64 {
    let mut acc = Dd::default();
    for i in 0..w.len() {
        acc = acc.add(Dd::from(w[i]).mul(Dd::from(a[i])).mul(Dd::from(a[i])));
    }
    acc.sqrt().to_f64()
}

pub fn dd_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    values
        .into_iter()
        .fold(Dd::default(), |acc, x| acc.add(Dd::from(x)))
        .to_f64()
}

/// Gaussian elimination with partial pivoting on a dense row-major system.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        let d = a[col][col];
        assert!(d.abs() > 1e-300, "singular system");
        for r in col + 1..n {
            let f = a[r][col] / d;
            if f != 0.0 {
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut s = b[r];
        for c in r + 1..n {
            s -= a[r][c] * x[c];
        }
        x[r] = s / a[r][r];
    }
    x
}

/// Singular values by one-sided Jacobi rotations, descending.
pub fn jacobi_singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    let (rows, cols) = a.shape();
    let mut u: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| a[(i, j)]).collect()).collect();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = u[p].iter().map(|x| x * x).sum();
                let beta: f64 = u[q].iter().map(|x| x * x).sum();
                let gamma: f64 = u[p].iter().zip(&u[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt().max(1e-300));
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (u[p][i], u[q][i]);
                    u[p][i] = c * x - s * y;
                    u[q][i] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut s: Vec<f64> = u.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn random_space<R: Rng>(rng: &mut R, n: usize, identity: bool) -> DiscreteSpace {
    if identity {
        DiscreteSpace::identity(n).unwrap()
    } else {
        DiscreteSpace::new((0..n).map(|_| rng.gen_range(0.2..3.0)).collect()).unwrap()
    }
}

pub fn random_vectors<R: Rng>(rng: &mut R, n_dofs: usize, count: usize) -> Vec<DVector<f64>> {
    (0..count)
        .map(|_| DVector::from_fn(n_dofs, |_, _| rng.gen_range(-1.0..1.0)))
        .collect()
}

pub fn random_basis<R: Rng>(rng: &mut R, space: &DiscreteSpace, n: usize) -> Basis {
    let b = orthonormalize(&random_vectors(rng, space.dim(), n), space, DEFAULT_DROP_TOL).unwrap();
    assert_eq!(b.len(), n);
    b
}

/// Smallest grid with at least `points` grid points and its dof count.
pub fn grid_for(points: usize) -> GridConfig {
    let c = 4;
    let l = points.div_ceil(3 * c).max(2);
    GridConfig::new(l, c, 1.0).unwrap()
}

/// CFI space with `m` random disjoint voxels on `grid` under metric `space`.
pub fn random_measurement<R: Rng>(
    rng: &mut R,
    grid: &GridConfig,
    space: &DiscreteSpace,
    m: usize,
    beam_angle: f64,
) -> Arc<MeasurementSpace> {
    let mut points: Vec<usize> = (0..grid.n_points()).collect();
    points.shuffle(rng);
    let used = rng.gen_range(m..=grid.n_points());
    let mut voxels: Vec<Vec<usize>> = (0..m).map(|i| vec![points[i]]).collect();
    for &p in &points[m..used] {
        let i = rng.gen_range(0..m);
        voxels[i].push(p);
    }
    let vp = VoxelPartition {
        region: Region::Full,
        block: (1, 1),
        voxels,
    };
    Arc::new(cfi_space(&vp, grid, beam_angle, space).unwrap())
}

/// Every grid point of `seg`.
pub fn segment_points(grid: &GridConfig, seg: Segment) -> Vec<usize> {
    (0..grid.l)
        .flat_map(|k| (0..grid.c).map(move |j| grid.point(seg, k, j)))
        .collect()
}

/// Dense saddle-point oracle for `min |u - v|` over `v in nominal + span(V)`
/// subject to `P_W u = omega`. Returns `u`.
///
/// Unknowns `(u, c, lambda)`:
/// `M (u - ubar - V c) + M W lambda = 0`, `V^T M (u - ubar - V c) = 0`,
/// `W^T M u = omega`.
pub fn kkt_oracle(
    weights: &[f64],
    v: &DMatrix<f64>,
    w: &DMatrix<f64>,
    omega: &[f64],
    nominal: Option<&[f64]>,
) -> Vec<f64> {
    let nd = weights.len();
    let n = v.ncols();
    let m = w.ncols();
    let size = nd + n + m;
    let mut a = vec![vec![0.0; size]; size];
    let mut b = vec![0.0; size];
    let ubar = nominal.map(|u| u.to_vec()).unwrap_or_else(|| vec![0.0; nd]);
    for i in 0..nd {
        a[i][i] = weights[i];
        for k in 0..n {
            a[i][nd + k] = -weights[i] * v[(i, k)];
        }
        for k in 0..m {
            a[i][nd + n + k] = weights[i] * w[(i, k)];
        }
        b[i] = weights[i] * ubar[i];
    }
    for k in 0..n {
        let row = nd + k;
        for i in 0..nd {
            a[row][i] = v[(i, k)] * weights[i];
        }
        for l in 0..n {
            a[row][nd + l] = -(0..nd).map(|i| v[(i, k)] * weights[i] * v[(i, l)]).sum::<f64>();
        }
        b[row] = (0..nd).map(|i| v[(i, k)] * weights[i] * ubar[i]).sum();
    }
    for k in 0..m {
        let row = nd + n + k;
        for i in 0..nd {
            a[row][i] = w[(i, k)] * weights[i];
        }
        b[row] = omega[k];
    }
    gauss_solve(a, b)[..nd].to_vec()
}

pub fn rel_diff(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    dd_norm(w, &d) / dd_norm(w, b).max(1e-300)
}

/// Brute-force OMP: every inner product recomputed densely in the full space.
pub fn omp_oracle(
    space: &DiscreteSpace,
    meas: &MeasurementSpace,
    dict: &[DVector<f64>],
    nominal: &DVector<f64>,
    obs: &Observation,
    n: usize,
) -> Vec<Option<usize>> {
    let w = meas.representers();
    let weights = space.weights();
    let proj = |v: &DVector<f64>| {
        let c = DVector::from_fn(w.len(), |k, _| dd_inner(weights, w.vector(k).as_slice(), v.as_slice()));
        w.combine(&c).unwrap()
    };
    let scale = dict
        .iter()
        .map(|u| dd_norm(weights, u.as_slice()))
        .fold(dd_norm(weights, nominal.as_slice()), f64::max);
    let mut shifted = Vec::new();
    for (i, u) in dict.iter().enumerate() {
        let d = u - nominal;
        let norm = dd_norm(weights, d.as_slice());
        if norm > 1e-12 * scale {
            shifted.push((i, &d / norm));
        }
    }
    let target = w.combine(&obs.values).unwrap() - proj(nominal);
    let mean = shifted.iter().fold(DVector::zeros(space.dim()), |a, (_, v)| a + v) / shifted.len() as f64;
    let mut chosen = vec![proj(&mean)];
    let mut picks = vec![None];
    let mut taken = vec![false; shifted.len()];
    while picks.len() < n {
        let k = chosen.len();
        let a: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| dd_inner(weights, chosen[i].as_slice(), chosen[j].as_slice()))
                    .collect()
            })
            .collect();
        let g: Vec<f64> = (0..k)
            .map(|i| dd_inner(weights, chosen[i].as_slice(), target.as_slice()))
            .collect();
        let c = gauss_solve(a, g);
        let mut resid = target.clone();
        for i in 0..k {
            resid -= &chosen[i] * c[i];
        }
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (k, (_, v)) in shifted.iter().enumerate() {
            let pv = proj(v);
            let pn = dd_norm(weights, pv.as_slice());
            if taken[k] || pn <= 1e-12 {
                continue;
            }
            let score = dd_inner(weights, resid.as_slice(), pv.as_slice()).abs() / pn;
            if score > best.0 {
                best = (score, k);
            }
        }
        taken[best.1] = true;
        picks.push(Some(shifted[best.1].0));
        chosen.push(proj(&shifted[best.1].1));
    }
    picks
}
