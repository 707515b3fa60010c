//! Closed-form pulsatile flow in a bifurcating channel.
//!
//! The channel has three straight segments (common, branch 1, branch 2), each
//! sampled on `L` axial stations by `C` cross-section points, with two velocity
//! components (axial, transverse) per point.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::DiscreteSpace;

pub const HR_RANGE: (f64, f64) = (48.0, 120.0);
pub const S_RANGE: (f64, f64) = (0.0, 0.2);
pub const T_SYS_RANGE: (f64, f64) = (0.2863, 0.3182);
pub const U0_RANGE: (f64, f64) = (17.0, 20.0);
pub const ETA_RANGES: [(f64, f64); 3] = [(0.05, 0.2), (0.5, 1.5), (5.0, 20.0)];
pub const HEALTHY_ETA: (f64, f64) = (0.5, 1.5);

/// Diastolic plateau of the inlet waveform.
const DIASTOLE_LEVEL: f64 = 0.1;
/// Relative growth of the axial velocity along a segment.
const AXIAL_MODULATION: f64 = 0.05;
/// Amplitude of the s-driven transverse swirl in the common segment.
const SWIRL_AMPLITUDE: f64 = 0.1;
/// Amplitude of the transverse deflection towards the dominant branch.
const DEFLECTION_AMPLITUDE: f64 = 0.2;

/// One point of the six-dimensional parameter space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterPoint {
    /// Time in seconds.
    pub t: f64,
    /// Heart rate in beats per minute.
    #[serde(rename = "HR")]
    pub hr: f64,
    /// Inlet asymmetry.
    pub s: f64,
    /// Systole duration in seconds.
    #[serde(rename = "T_sys")]
    pub t_sys: f64,
    /// Peak inlet velocity in cm/s.
    pub u0: f64,
    /// Ratio of the distal outlet resistances.
    pub eta: f64,
}

impl ParameterPoint {
    /// Cardiac cycle duration `60 / HR`.
    pub fn cycle(&self) -> f64 {
        60.0 / self.hr
    }

    /// Position inside the current cycle, `t mod T_c`.
    pub fn phase(&self) -> f64 {
        self.t.rem_euclid(self.cycle())
    }

    /// Peak systole instant of the generator waveform.
    pub fn t_peak(&self) -> f64 {
        self.t_sys / 2.0
    }

    /// Same patient at another instant.
    pub fn at(&self, t: f64) -> ParameterPoint {
        ParameterPoint { t, ..*self }
    }

    /// Checks the admissible ranges of every patient parameter and requires `t >= 0`.
    ///
    /// Times past the first cycle are accepted and folded back by [`phase`](Self::phase).
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, (lo, hi): (f64, f64)| {
            if v.is_finite() && lo <= v && v <= hi {
                Ok(())
            } else {
                Err(Error::Validation(format!("{name} = {v} outside [{lo}, {hi}]")))
            }
        };
        check("HR", self.hr, HR_RANGE)?;
        check("s", self.s, S_RANGE)?;
        check("T_sys", self.t_sys, T_SYS_RANGE)?;
        check("u0", self.u0, U0_RANGE)?;
        if !ETA_RANGES.iter().any(|&(lo, hi)| lo <= self.eta && self.eta <= hi) {
            return Err(Error::Validation(format!(
                "eta = {} outside the admissible union",
                self.eta
            )));
        }
        if !(self.t.is_finite() && self.t >= 0.0) {
            return Err(Error::Validation(format!("t = {} must be nonnegative", self.t)));
        }
        Ok(())
    }

    /// Patient parameters without the time coordinate, bitwise, for grouping.
    pub fn patient_key(&self) -> [u64; 5] {
        [
            self.hr.to_bits(),
            self.s.to_bits(),
            self.t_sys.to_bits(),
            self.u0.to_bits(),
            self.eta.to_bits(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Health {
    Healthy,
    Sick,
}

/// Healthy iff `eta` lies in the closed interval `[0.5, 1.5]`.
pub fn label_health(y: &ParameterPoint) -> Result<Health> {
    let eta = y.eta;
    if HEALTHY_ETA.0 <= eta && eta <= HEALTHY_ETA.1 {
        Ok(Health::Healthy)
    } else if ETA_RANGES.iter().any(|&(lo, hi)| lo <= eta && eta <= hi) {
        Ok(Health::Sick)
    } else {
        Err(Error::Validation(format!("eta = {eta} outside the admissible union")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Common,
    Branch1,
    Branch2,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::Common, Segment::Branch1, Segment::Branch2];

    fn index(self) -> usize {
        match self {
            Segment::Common => 0,
            Segment::Branch1 => 1,
            Segment::Branch2 => 2,
        }
    }
}

/// Velocity component stored at each grid point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Axial,
    Transverse,
}

/// Surrogate geometry: `L` axial stations, `C` cross-section points, beam angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub beam_angle: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            l: 8,
            c: 16,
            beam_angle: PI / 3.0,
        }
    }
}

impl GridConfig {
    pub fn new(l: usize, c: usize, beam_angle: f64) -> Result<Self> {
        let g = Self { l, c, beam_angle };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.l < 2 || self.c < 4 {
            return Err(Error::Validation(format!(
                "grid needs L >= 2 and C >= 4, got L = {}, C = {}",
                self.l, self.c
            )));
        }
        if !self.beam_angle.is_finite() {
            return Err(Error::Validation("beam angle must be finite".into()));
        }
        Ok(())
    }

    pub fn points_per_segment(&self) -> usize {
        self.l * self.c
    }

    pub fn n_points(&self) -> usize {
        3 * self.points_per_segment()
    }

    /// Number of dofs `N = 2 * 3 * L * C`.
    pub fn n_dofs(&self) -> usize {
        2 * self.n_points()
    }

    /// Quadrature weight shared by every dof.
    pub fn cell_weight(&self) -> f64 {
        1.0 / (self.l * self.c) as f64
    }

    pub fn space(&self) -> DiscreteSpace {
        DiscreteSpace::new(vec![self.cell_weight(); self.n_dofs()]).expect("grid weights are positive")
    }

    /// Grid point index of `(segment, axial station, cross-section point)`.
    pub fn point(&self, seg: Segment, k: usize, j: usize) -> usize {
        debug_assert!(k < self.l && j < self.c);
        (seg.index() * self.l + k) * self.c + j
    }

    pub fn dof(&self, point: usize, comp: Component) -> usize {
        2 * point
            + match comp {
                Component::Axial => 0,
                Component::Transverse => 1,
            }
    }

    pub fn cross_coordinate(&self, j: usize) -> f64 {
        (j as f64 + 0.5) / self.c as f64
    }

    pub fn axial_coordinate(&self, k: usize) -> f64 {
        k as f64 / (self.l - 1) as f64
    }
}

/// Normalized inlet waveform: a `sin^2` systolic bump over a flat diastole.
pub fn waveform(theta: f64, t_sys: f64, t_c: f64) -> Result<f64> {
    if !(0.0 < t_sys && t_sys < t_c) {
        return Err(Error::Precondition(format!(
            "need 0 < T_sys < T_c, got T_sys = {t_sys}, T_c = {t_c}"
        )));
    }
    if !(0.0 <= theta && theta < t_c) {
        return Err(Error::Precondition(format!("phase {theta} outside [0, {t_c})")));
    }
    Ok(waveform_unchecked(theta, t_sys))
}

fn waveform_unchecked(theta: f64, t_sys: f64) -> f64 {
    if theta < t_sys {
        let s = (PI * theta / t_sys).sin();
        DIASTOLE_LEVEL + (1.0 - DIASTOLE_LEVEL) * s * s
    } else {
        DIASTOLE_LEVEL
    }
}

/// One-dimensional logit-normal inlet profile with asymmetry `s`.
pub fn inlet_profile(x: f64, s: f64) -> Result<f64> {
    if !(0.0 < x && x < 1.0) {
        return Err(Error::Validation(format!("profile coordinate {x} outside (0, 1)")));
    }
    let z = (x / (1.0 - x)).ln() - s;
    Ok((-0.5 * z * z).exp() / (x * (1.0 - x)))
}

/// A discretized velocity field together with the parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub coeffs: Vec<f64>,
    pub params: ParameterPoint,
}

/// Evaluates the closed-form field for `y` on `grid`.
pub fn synthesize_snapshot(y: &ParameterPoint, grid: &GridConfig) -> Result<Snapshot> {
    y.validate()?;
    grid.validate()?;
    let t_c = y.cycle();
    let g = waveform(y.phase(), y.t_sys, t_c)?;
    let amp = y.u0 * g;
    let split1 = 1.0 / (1.0 + y.eta);
    let split2 = y.eta / (1.0 + y.eta);
    let deflection = (y.eta - 1.0) / (y.eta + 1.0);

    let mut coeffs = vec![0.0; grid.n_dofs()];
    for j in 0..grid.c {
        let x = grid.cross_coordinate(j);
        let profile = inlet_profile(x, y.s)?;
        let swirl = (2.0 * PI * x).sin();
        for k in 0..grid.l {
            let a = grid.axial_coordinate(k);
            let axial = amp * profile * (1.0 + AXIAL_MODULATION * a);
            let transverse =
                amp * (SWIRL_AMPLITUDE * y.s * swirl * a + DEFLECTION_AMPLITUDE * deflection * profile * a * a);

            let p = grid.point(Segment::Common, k, j);
            coeffs[grid.dof(p, Component::Axial)] = axial;
            coeffs[grid.dof(p, Component::Transverse)] = transverse;
            let p = grid.point(Segment::Branch1, k, j);
            coeffs[grid.dof(p, Component::Axial)] = split1 * axial;
            let p = grid.point(Segment::Branch2, k, j);
            coeffs[grid.dof(p, Component::Axial)] = split2 * axial;
        }
    }
    Ok(Snapshot { coeffs, params: *y })
}

/// Cross-section flux of the axial component through station `k` of `seg`.
pub fn station_flux(u: &[f64], grid: &GridConfig, seg: Segment, k: usize) -> f64 {
    let dx = 1.0 / grid.c as f64;
    (0..grid.c)
        .map(|j| u[grid.dof(grid.point(seg, k, j), Component::Axial)] * dx)
        .sum()
}
