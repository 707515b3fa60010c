//! Choice of partition window sizes by held-out reconstruction error.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::database::SnapshotDatabase;
use super::partition::partition_database;
use crate::error::{Error, Result};
use crate::estimator::{fit_partitioned, local_bases, LocalBasisKind};
use crate::measurement::{observe, MeasurementSpace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowCandidate {
    pub delta_hr: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub candidate: WindowCandidate,
    /// Mean relative error of partitioned affine POD-PBDW over the test set;
    /// infinite when some test snapshot falls outside every non-empty cell.
    pub mean_error: f64,
}

/// Scores every candidate and returns the best one with all scores in input order.
///
/// Ties go to the smaller `tau`, then the smaller `delta_hr`.
pub fn tune_windows(
    train: &SnapshotDatabase,
    test: &SnapshotDatabase,
    candidates: &[WindowCandidate],
    n_fixed: usize,
    meas: &Arc<MeasurementSpace>,
) -> Result<(WindowCandidate, Vec<WindowScore>)> {
    if candidates.is_empty() {
        return Err(Error::Precondition("window tuning needs at least one candidate".into()));
    }
    if n_fixed == 0 || n_fixed > meas.dim() {
        return Err(Error::Precondition(format!(
            "n_fixed = {n_fixed} must lie in [1, m = {}]",
            meas.dim()
        )));
    }
    let observations = test
        .snapshots
        .iter()
        .map(|s| observe(s, meas))
        .collect::<Result<Vec<_>>>()?;
    let mut scores = Vec::with_capacity(candidates.len());
    for &candidate in candidates {
        let mean_error = score(train, test, &observations, candidate, n_fixed, meas)?;
        scores.push(WindowScore { candidate, mean_error });
    }
    let best = scores
        .iter()
        .min_by(|a, b| {
            a.mean_error
                .total_cmp(&b.mean_error)
                .then(a.candidate.tau.total_cmp(&b.candidate.tau))
                .then(a.candidate.delta_hr.total_cmp(&b.candidate.delta_hr))
        })
        .expect("non-empty candidate list")
        .candidate;
    Ok((best, scores))
}

fn score(
    train: &SnapshotDatabase,
    test: &SnapshotDatabase,
    observations: &[crate::measurement::Observation],
    candidate: WindowCandidate,
    n_fixed: usize,
    meas: &Arc<MeasurementSpace>,
) -> Result<f64> {
    let partition = match partition_database(train, candidate.tau, candidate.delta_hr) {
        Ok(p) => p,
        Err(Error::PartitionCoverage(_)) => return Ok(f64::INFINITY),
        Err(e) => return Err(e),
    };
    let bases = local_bases(train, &partition, LocalBasisKind::Pod, n_fixed)?;
    let fit = fit_partitioned(&partition, &bases, meas, n_fixed)?;
    let errors: Vec<Result<f64>> = test
        .snapshots
        .par_iter()
        .zip(observations.par_iter())
        .map(|(s, obs)| match fit.estimator.apply(s.params.t, s.params.hr, obs) {
            Ok((_, rec)) => {
                let diff: Vec<f64> = s.coeffs.iter().zip(rec.u_star.iter()).map(|(a, b)| a - b).collect();
                let norm = test.space.norm(&s.coeffs)?;
                if norm == 0.0 {
                    return Err(Error::Degenerate("zero-norm test snapshot".into()));
                }
                Ok(test.space.norm(&diff)? / norm)
            }
            Err(Error::OutOfCoverage { .. }) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        })
        .collect();
    let mut sum = 0.0;
    for e in errors {
        sum += e?;
    }
    Ok(sum / test.len() as f64)
}
