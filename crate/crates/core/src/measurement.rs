//! Voxel-averaged beam projections (color and vector flow imaging).
//!
//! Voxel `i` with beam direction `b` measures `l_i(u) = sum_{p in voxel} w (u_p . b)`.
//! Its Riesz representer is `chi_i b`; representers of disjoint voxels are
//! orthogonal, so normalizing them yields an orthonormal basis of `W_m` and the
//! observation is simply the vector of coordinates of `P_W u` in that basis.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::hilbert::{Basis, DiscreteSpace};
use crate::manifold::{Component, GridConfig, Segment, Snapshot};

/// Part of the channel covered by the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Common,
    Branch1,
    Branch2,
    Full,
}

impl Region {
    pub fn segments(self) -> Vec<Segment> {
        match self {
            Region::Common => vec![Segment::Common],
            Region::Branch1 => vec![Segment::Branch1],
            Region::Branch2 => vec![Segment::Branch2],
            Region::Full => Segment::ALL.to_vec(),
        }
    }
}

impl std::str::FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "common" => Ok(Region::Common),
            "branch1" => Ok(Region::Branch1),
            "branch2" => Ok(Region::Branch2),
            "full" => Ok(Region::Full),
            other => Err(Error::Config(format!("unknown region `{other}`"))),
        }
    }
}

/// Disjoint blocks of grid points tiling a region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelPartition {
    pub region: Region,
    pub block: (usize, usize),
    /// Grid point indices of every voxel.
    pub voxels: Vec<Vec<usize>>,
}

impl VoxelPartition {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }
}

/// Tiles `region` with `(axial, cross)` blocks of grid points, axial-major.
pub fn build_voxels(grid: &GridConfig, region: Region, block: (usize, usize)) -> Result<VoxelPartition> {
    grid.validate()?;
    let (ba, bc) = block;
    if ba == 0 || bc == 0 || !grid.l.is_multiple_of(ba) || !grid.c.is_multiple_of(bc) {
        return Err(Error::Config(format!(
            "voxel block ({ba}, {bc}) does not divide the grid ({}, {})",
            grid.l, grid.c
        )));
    }
    let mut voxels = Vec::new();
    for seg in region.segments() {
        for a in 0..grid.l / ba {
            for c in 0..grid.c / bc {
                let mut pts = Vec::with_capacity(ba * bc);
                for k in a * ba..(a + 1) * ba {
                    for j in c * bc..(c + 1) * bc {
                        pts.push(grid.point(seg, k, j));
                    }
                }
                voxels.push(pts);
            }
        }
    }
    Ok(VoxelPartition { region, block, voxels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImagingMode {
    Cfi,
    Vfi,
}

impl std::str::FromStr for ImagingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cfi" => Ok(ImagingMode::Cfi),
            "vfi" => Ok(ImagingMode::Vfi),
            other => Err(Error::Config(format!("unknown imaging mode `{other}`"))),
        }
    }
}

/// Everything needed to rebuild a measurement space; also used to match
/// observations with the space that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementDescriptor {
    pub mode: ImagingMode,
    pub region: Region,
    pub block: (usize, usize),
    pub beam_angle: f64,
    #[serde(rename = "N")]
    pub n_dofs: usize,
    pub m: usize,
}

#[derive(Debug, Clone)]
pub struct MeasurementSpace {
    mode: ImagingMode,
    beam: [f64; 2],
    beam_angle: f64,
    voxels: VoxelPartition,
    representers: Basis,
    /// Norms of the raw representers; `l_i(u) = raw_norms[i] * values[i]`.
    raw_norms: Vec<f64>,
}

impl MeasurementSpace {
    pub fn mode(&self) -> ImagingMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.representers.len()
    }

    pub fn beam(&self) -> [f64; 2] {
        self.beam
    }

    pub fn voxels(&self) -> &VoxelPartition {
        &self.voxels
    }

    /// Orthonormal representers; in VFI mode all beam-aligned ones come first.
    pub fn representers(&self) -> &Basis {
        &self.representers
    }

    pub fn space(&self) -> &DiscreteSpace {
        self.representers.space()
    }

    pub fn raw_norms(&self) -> &[f64] {
        &self.raw_norms
    }

    pub fn descriptor(&self) -> MeasurementDescriptor {
        MeasurementDescriptor {
            mode: self.mode,
            region: self.voxels.region,
            block: self.voxels.block,
            beam_angle: self.beam_angle,
            n_dofs: self.space().dim(),
            m: self.dim(),
        }
    }

    /// Raw voxel functionals `l_i(u)` recovered from an observation.
    pub fn raw_measurements(&self, obs: &Observation) -> Result<Vec<f64>> {
        self.check(obs)?;
        Ok(obs.values.iter().zip(&self.raw_norms).map(|(v, r)| v * r).collect())
    }

    /// The element `omega = sum_i values_i w_i` of `W_m`.
    pub fn field(&self, obs: &Observation) -> Result<DVector<f64>> {
        self.check(obs)?;
        self.representers.combine(&obs.values)
    }

    pub(crate) fn check(&self, obs: &Observation) -> Result<()> {
        if obs.descriptor != self.descriptor() {
            return Err(Error::Contract(
                "observation was not produced by this measurement space".into(),
            ));
        }
        check_len(self.dim(), obs.values.len())
    }

    /// Rebuilds the space described by `d` on `grid`.
    pub fn from_descriptor(d: &MeasurementDescriptor, grid: &GridConfig) -> Result<Self> {
        let voxels = build_voxels(grid, d.region, d.block)?;
        let space = grid.space();
        let meas = match d.mode {
            ImagingMode::Cfi => cfi_space(&voxels, grid, d.beam_angle, &space)?,
            ImagingMode::Vfi => vfi_space(&voxels, grid, d.beam_angle, &space)?,
        };
        if meas.descriptor() != *d {
            return Err(Error::Config(
                "measurement descriptor is inconsistent with the grid".into(),
            ));
        }
        Ok(meas)
    }
}

fn check_partition(voxels: &VoxelPartition, grid: &GridConfig) -> Result<()> {
    let mut seen = vec![false; grid.n_points()];
    if voxels.voxels.is_empty() {
        return Err(Error::Config("voxel partition is empty".into()));
    }
    for v in &voxels.voxels {
        if v.is_empty() {
            return Err(Error::Config("empty voxel".into()));
        }
        for &p in v {
            if p >= seen.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Config(format!("voxels overlap or leave the grid at point {p}")));
            }
        }
    }
    Ok(())
}

fn representers(
    voxels: &VoxelPartition,
    grid: &GridConfig,
    space: &DiscreteSpace,
    directions: &[[f64; 2]],
) -> Result<(Basis, Vec<f64>)> {
    check_partition(voxels, grid)?;
    check_len(grid.n_dofs(), space.dim())?;
    let m = voxels.len() * directions.len();
    let mut mat = DMatrix::zeros(space.dim(), m);
    let mut raw_norms = Vec::with_capacity(m);
    let mut col = 0;
    for dir in directions {
        for vox in &voxels.voxels {
            let mut c = mat.column_mut(col);
            for &p in vox {
                c[grid.dof(p, Component::Axial)] = dir[0];
                c[grid.dof(p, Component::Transverse)] = dir[1];
            }
            let norm = space.norm_unchecked(c.as_slice());
            if !(norm > 0.0) {
                return Err(Error::Degenerate("zero representer".into()));
            }
            c /= norm;
            raw_norms.push(norm);
            col += 1;
        }
    }
    let basis = Basis::from_matrix(space.clone(), mat)?.into_orthonormal()?;
    Ok((basis, raw_norms))
}

fn beam(angle: f64) -> [f64; 2] {
    [angle.cos(), angle.sin()]
}

fn beam_perp(angle: f64) -> [f64; 2] {
    [-angle.sin(), angle.cos()]
}

/// Color flow imaging: one beam-projected average per voxel.
pub fn cfi_space(
    voxels: &VoxelPartition,
    grid: &GridConfig,
    beam_angle: f64,
    space: &DiscreteSpace,
) -> Result<MeasurementSpace> {
    let (representers, raw_norms) = representers(voxels, grid, space, &[beam(beam_angle)])?;
    Ok(MeasurementSpace {
        mode: ImagingMode::Cfi,
        beam: beam(beam_angle),
        beam_angle,
        voxels: voxels.clone(),
        representers,
        raw_norms,
    })
}

/// Vector flow imaging: beam and in-plane perpendicular averages per voxel.
pub fn vfi_space(
    voxels: &VoxelPartition,
    grid: &GridConfig,
    beam_angle: f64,
    space: &DiscreteSpace,
) -> Result<MeasurementSpace> {
    let (representers, raw_norms) = representers(voxels, grid, space, &[beam(beam_angle), beam_perp(beam_angle)])?;
    Ok(MeasurementSpace {
        mode: ImagingMode::Vfi,
        beam: beam(beam_angle),
        beam_angle,
        voxels: voxels.clone(),
        representers,
        raw_norms,
    })
}

/// Coordinates of `P_W u` in the orthonormal representer basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub values: DVector<f64>,
    pub descriptor: MeasurementDescriptor,
}

impl Observation {
    pub fn new(values: DVector<f64>, meas: &MeasurementSpace) -> Result<Self> {
        check_len(meas.dim(), values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("observation has non-finite entries".into()));
        }
        Ok(Self {
            values,
            descriptor: meas.descriptor(),
        })
    }

    pub fn norm(&self) -> f64 {
        self.values.norm()
    }

    /// `self - other` for observations of the same space.
    pub fn shifted(&self, other: &DVector<f64>) -> Observation {
        Observation {
            values: &self.values - other,
            descriptor: self.descriptor.clone(),
        }
    }

    /// Writes `voxel_index,component,value` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let n_vox = voxel_count(&self.descriptor);
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(["voxel_index", "component", "value"])
            .map_err(|e| Error::csv(path, e))?;
        for (i, v) in self.values.iter().enumerate() {
            let comp = if i < n_vox { "beam" } else { "perp" };
            w.write_record([(i % n_vox).to_string(), comp.to_string(), v.to_string()])
                .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, meas: &MeasurementSpace) -> Result<Observation> {
        let d = meas.descriptor();
        let n_vox = voxel_count(&d);
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let header = r.headers().map_err(|e| Error::csv(path, e))?;
        if header.iter().ne(["voxel_index", "component", "value"]) {
            return Err(Error::integrity(path, "unexpected observation header"));
        }
        let mut values = vec![f64::NAN; d.m];
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let bad = || Error::integrity(path, format!("malformed row {rec:?}"));
            let i: usize = rec[0].parse().map_err(|_| bad())?;
            let offset = match &rec[1] {
                "beam" => 0,
                "perp" if d.mode == ImagingMode::Vfi => n_vox,
                _ => return Err(bad()),
            };
            let v: f64 = rec[2].parse().map_err(|_| bad())?;
            if i >= n_vox {
                return Err(bad());
            }
            values[offset + i] = v;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::integrity(path, "observation is incomplete"));
        }
        Observation::new(DVector::from_vec(values), meas)
    }
}

fn voxel_count(d: &MeasurementDescriptor) -> usize {
    match d.mode {
        ImagingMode::Cfi => d.m,
        ImagingMode::Vfi => d.m / 2,
    }
}

/// Observes a field: `values_i = <w_i, u>`.
pub fn observe_field(u: &[f64], meas: &MeasurementSpace) -> Result<Observation> {
    let values = meas.representers.coords(u)?;
    Observation::new(values, meas)
}

pub fn observe(u: &Snapshot, meas: &MeasurementSpace) -> Result<Observation> {
    observe_field(&u.coeffs, meas)
}
