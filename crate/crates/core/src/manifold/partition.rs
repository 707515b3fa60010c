//! Windows over (cardiac phase, heart rate) that split a database into cells.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::database::SnapshotDatabase;
use super::generator::{ParameterPoint, HR_RANGE};
use crate::error::{Error, Result};

/// `(time window index, heart-rate window index)`.
pub type CellKey = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub tau: f64,
    pub delta_hr: f64,
    pub time_centers: Vec<f64>,
    pub hr_centers: Vec<f64>,
    /// Non-empty cells only; indices follow database order.
    #[serde(with = "cell_list")]
    pub cells: BTreeMap<CellKey, Vec<usize>>,
}

mod cell_list {
    use super::CellKey;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize)]
    struct Cell {
        time: usize,
        hr: usize,
        members: Vec<usize>,
    }

    pub fn serialize<S: Serializer>(cells: &BTreeMap<CellKey, Vec<usize>>, s: S) -> Result<S::Ok, S::Error> {
        let list: Vec<Cell> = cells
            .iter()
            .map(|(&(time, hr), m)| Cell {
                time,
                hr,
                members: m.clone(),
            })
            .collect();
        list.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<CellKey, Vec<usize>>, D::Error> {
        let list = Vec::<Cell>::deserialize(d)?;
        Ok(list.into_iter().map(|c| ((c.time, c.hr), c.members)).collect())
    }
}

/// Longest cardiac cycle in the admissible heart-rate range.
pub fn longest_cycle() -> f64 {
    60.0 / HR_RANGE.0
}

fn window_count(span: f64, width: f64) -> usize {
    ((span / width) - 1e-12).ceil().max(1.0) as usize
}

/// Window layout before any snapshot is assigned.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowGrid {
    pub tau: f64,
    pub delta_hr: f64,
    pub time_centers: Vec<f64>,
    pub hr_centers: Vec<f64>,
}

impl WindowGrid {
    pub fn new(tau: f64, delta_hr: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) || !(delta_hr > 0.0 && delta_hr.is_finite()) {
            return Err(Error::Precondition(format!(
                "window half-widths must be positive, got tau = {tau}, delta_HR = {delta_hr}"
            )));
        }
        let n_time = window_count(longest_cycle(), 2.0 * tau);
        let n_hr = window_count(HR_RANGE.1 - HR_RANGE.0, 2.0 * delta_hr);
        Ok(Self {
            tau,
            delta_hr,
            time_centers: (0..n_time).map(|i| (2 * i + 1) as f64 * tau).collect(),
            hr_centers: (0..n_hr).map(|j| HR_RANGE.0 + (2 * j + 1) as f64 * delta_hr).collect(),
        })
    }

    pub fn time_contains(&self, i: usize, phase: f64) -> bool {
        let c = self.time_centers[i];
        c - self.tau <= phase && phase <= c + self.tau
    }

    pub fn hr_contains(&self, j: usize, hr: f64) -> bool {
        let c = self.hr_centers[j];
        c - self.delta_hr <= hr && hr <= c + self.delta_hr
    }

    /// Every cell whose closed window contains `(phase, hr)`, in key order.
    pub fn cells_containing(&self, phase: f64, hr: f64) -> Vec<CellKey> {
        let around = |x: f64, width: f64, len: usize| {
            let guess = (x / width).floor();
            let lo = (guess - 1.0).max(0.0);
            let hi = (guess + 1.0).min(len as f64 - 1.0);
            if !(lo <= hi) {
                return 0..0;
            }
            lo as usize..hi as usize + 1
        };
        let mut out = Vec::new();
        for i in around(phase, 2.0 * self.tau, self.time_centers.len()) {
            if !self.time_contains(i, phase) {
                continue;
            }
            for j in around(hr - HR_RANGE.0, 2.0 * self.delta_hr, self.hr_centers.len()) {
                if self.hr_contains(j, hr) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Scaled squared distance from `(phase, hr)` to the center of `cell`.
    pub fn center_distance(&self, cell: CellKey, phase: f64, hr: f64) -> f64 {
        let dt = (phase - self.time_centers[cell.0]) / self.tau;
        let dh = (hr - self.hr_centers[cell.1]) / self.delta_hr;
        dt * dt + dh * dh
    }
}

impl Partition {
    pub fn windows(&self) -> WindowGrid {
        WindowGrid {
            tau: self.tau,
            delta_hr: self.delta_hr,
            time_centers: self.time_centers.clone(),
            hr_centers: self.hr_centers.clone(),
        }
    }

    /// Chooses the cell used to reconstruct a state at `y`.
    ///
    /// Among the non-empty cells containing `(phase, HR)`, the nearest center in
    /// scaled distance wins, then the lower key.
    pub fn dispatch(&self, y: &ParameterPoint) -> Result<CellKey> {
        let windows = self.windows();
        let phase = y.phase();
        let hr = y.hr;
        let best = |cands: &mut dyn Iterator<Item = CellKey>| {
            let mut best: Option<(f64, CellKey)> = None;
            for c in cands {
                let d = windows.center_distance(c, phase, hr);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, c));
                }
            }
            best.map(|(_, c)| c)
        };
        let mut hits = windows
            .cells_containing(phase, hr)
            .into_iter()
            .filter(|c| self.cells.contains_key(c));
        match best(&mut hits) {
            Some(c) => Ok(c),
            None => Err(Error::OutOfCoverage {
                phase,
                hr,
                nearest: best(&mut self.cells.keys().copied()),
            }),
        }
    }
}

/// Assigns every snapshot to each closed window that contains its `(t mod T_c, HR)`.
pub fn partition_database(db: &SnapshotDatabase, tau: f64, delta_hr: f64) -> Result<Partition> {
    let windows = WindowGrid::new(tau, delta_hr)?;
    let mut cells: BTreeMap<CellKey, Vec<usize>> = BTreeMap::new();
    for (idx, s) in db.snapshots.iter().enumerate() {
        let hits = windows.cells_containing(s.params.phase(), s.params.hr);
        if hits.is_empty() {
            return Err(Error::PartitionCoverage(idx));
        }
        for c in hits {
            cells.entry(c).or_default().push(idx);
        }
    }
    Ok(Partition {
        tau,
        delta_hr,
        time_centers: windows.time_centers,
        hr_centers: windows.hr_centers,
        cells,
    })
}
