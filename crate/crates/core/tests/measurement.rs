mod common;

use std::collections::BTreeSet;

use common::*;
use nalgebra::DVector;
use pbdwkit::hilbert::{distance, gram};
use pbdwkit::manifold::*;
use pbdwkit::measurement::*;
use pbdwkit::Error;
use proptest::prelude::*;
use rand::Rng;

fn descriptor(mode: ImagingMode, region: Region, block: (usize, usize), grid: &GridConfig) -> MeasurementDescriptor {
    let voxels = build_voxels(grid, region, block).unwrap().len();
    MeasurementDescriptor {
        mode,
        region,
        block,
        beam_angle: grid.beam_angle,
        n_dofs: grid.n_dofs(),
        m: if mode == ImagingMode::Cfi { voxels } else { 2 * voxels },
    }
}

fn space_for(mode: ImagingMode, region: Region, block: (usize, usize), grid: &GridConfig) -> MeasurementSpace {
    MeasurementSpace::from_descriptor(&descriptor(mode, region, block, grid), grid).unwrap()
}

#[test]
fn voxels_exactly_cover_the_region() {
    let grid = GridConfig::default();
    for region in [Region::Common, Region::Branch1, Region::Branch2, Region::Full] {
        for block in [(1, 1), (2, 2), (4, 8), (8, 16), (2, 16)] {
            let vp = build_voxels(&grid, region, block).unwrap();
            let mut seen = BTreeSet::new();
            for v in &vp.voxels {
                assert_eq!(v.len(), block.0 * block.1);
                for &p in v {
                    assert!(seen.insert(p), "point {p} in two voxels");
                }
            }
            let want: BTreeSet<usize> = region
                .segments()
                .into_iter()
                .flat_map(|seg| segment_points(&grid, seg))
                .collect();
            assert_eq!(seen, want);
        }
    }
    assert_eq!(build_voxels(&grid, Region::Common, (2, 2)).unwrap().len(), 32);
    assert_eq!(build_voxels(&grid, Region::Common, (8, 16)).unwrap().len(), 1);
    assert!(matches!(
        build_voxels(&grid, Region::Common, (3, 2)),
        Err(Error::Config(_))
    ));
}

#[test]
fn representers_are_orthonormal_and_vfi_contains_cfi() {
    let grid = GridConfig::default();
    let cfi = space_for(ImagingMode::Cfi, Region::Full, (2, 4), &grid);
    let vfi = space_for(ImagingMode::Vfi, Region::Full, (2, 4), &grid);
    assert_eq!(vfi.dim(), 2 * cfi.dim());
    for w in [&cfi, &vfi] {
        let g = gram(w.representers(), w.representers()).unwrap();
        for i in 0..w.dim() {
            for j in 0..w.dim() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - want).abs() < 1e-12);
            }
        }
    }
    for i in 0..cfi.dim() {
        let v = cfi.representers().vector(i);
        assert!(distance(vfi.representers(), v.as_slice()).unwrap() <= 1e-12);
    }
    let b = cfi.beam();
    assert!((b[0].hypot(b[1]) - 1.0).abs() < 1e-15);
}

#[test]
fn raw_functional_of_constant_beam_field_is_voxel_volume() {
    let grid = GridConfig::default();
    let meas = space_for(ImagingMode::Cfi, Region::Common, (2, 2), &grid);
    let b = meas.beam();
    let mut u = vec![0.0; grid.n_dofs()];
    for p in segment_points(&grid, Segment::Common) {
        u[grid.dof(p, Component::Axial)] = b[0];
        u[grid.dof(p, Component::Transverse)] = b[1];
    }
    let obs = observe_field(&u, &meas).unwrap();
    let raw = meas.raw_measurements(&obs).unwrap();
    let volume = dd_sum((0..4).map(|_| grid.cell_weight()));
    for l in raw {
        assert!((l - volume).abs() < 1e-14);
    }
}

#[test]
fn observation_matches_voxel_quadrature_oracle() {
    let mut r = rng(30);
    let grid = GridConfig::default();
    for mode in [ImagingMode::Cfi, ImagingMode::Vfi] {
        let meas = space_for(mode, Region::Full, (2, 2), &grid);
        let n_vox = meas.voxels().len();
        let b = meas.beam();
        let perp = [-b[1], b[0]];
        for _ in 0..5 {
            let u: Vec<f64> = (0..grid.n_dofs()).map(|_| r.gen_range(-20.0..20.0)).collect();
            let obs = observe_field(&u, &meas).unwrap();
            let raw = meas.raw_measurements(&obs).unwrap();
            for (i, &got) in raw.iter().enumerate() {
                let dir = if i < n_vox { b } else { perp };
                let vox = &meas.voxels().voxels[i % n_vox];
                let want = dd_sum(vox.iter().map(|&p| {
                    grid.cell_weight()
                        * (u[grid.dof(p, Component::Axial)] * dir[0] + u[grid.dof(p, Component::Transverse)] * dir[1])
                }));
                assert!((got - want).abs() <= 1e-13 * (1.0 + want.abs()));
            }
        }
    }
}

#[test]
fn vfi_projection_error_never_exceeds_cfi() {
    let grid = GridConfig::default();
    let db = sample_database(&ParameterRanges::default(), 5, 4, &grid, 31, HealthFilter::All).unwrap();
    for region in [Region::Common, Region::Full] {
        let cfi = space_for(ImagingMode::Cfi, region, (2, 2), &grid);
        let vfi = space_for(ImagingMode::Vfi, region, (2, 2), &grid);
        for s in &db.snapshots {
            let ec = distance(cfi.representers(), &s.coeffs).unwrap();
            let ev = distance(vfi.representers(), &s.coeffs).unwrap();
            assert!(ev <= ec + 1e-12, "{ev} > {ec}");
        }
    }
}

#[test]
fn zero_and_perpendicular_fields_give_zero_observation() {
    let grid = GridConfig::default();
    let meas = space_for(ImagingMode::Cfi, Region::Full, (2, 2), &grid);
    let zero = observe_field(&vec![0.0; grid.n_dofs()], &meas).unwrap();
    assert!(zero.values.iter().all(|&v| v == 0.0));
    let b = meas.beam();
    let mut u = vec![0.0; grid.n_dofs()];
    for p in 0..grid.n_points() {
        u[grid.dof(p, Component::Axial)] = -b[1] * (p as f64 + 1.0);
        u[grid.dof(p, Component::Transverse)] = b[0] * (p as f64 + 1.0);
    }
    assert!(observe_field(&u, &meas).unwrap().norm() < 1e-12);
}

#[test]
fn correction_is_supported_in_the_image_region() {
    let grid = GridConfig::default();
    let meas = space_for(ImagingMode::Vfi, Region::Common, (2, 2), &grid);
    let db = sample_database(&ParameterRanges::default(), 1, 1, &grid, 3, HealthFilter::All).unwrap();
    let field = meas.field(&observe(&db.snapshots[0], &meas).unwrap()).unwrap();
    for seg in [Segment::Branch1, Segment::Branch2] {
        for p in segment_points(&grid, seg) {
            assert_eq!(field[grid.dof(p, Component::Axial)], 0.0);
            assert_eq!(field[grid.dof(p, Component::Transverse)], 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn observe_is_linear_and_parseval_holds(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut r = rng(seed);
        let grid = GridConfig::default();
        let meas = space_for(ImagingMode::Vfi, Region::Full, (4, 4), &grid);
        let u: Vec<f64> = (0..grid.n_dofs()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..grid.n_dofs()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mix: Vec<f64> = u.iter().zip(&v).map(|(a, b)| alpha * a + beta * b).collect();
        let ou = observe_field(&u, &meas).unwrap().values;
        let ov = observe_field(&v, &meas).unwrap().values;
        let om = observe_field(&mix, &meas).unwrap().values;
        let lin: DVector<f64> = &ou * alpha + &ov * beta;
        prop_assert!((&om - &lin).norm() <= 1e-12 * (1.0 + om.norm()));
        let pw = meas.field(&observe_field(&u, &meas).unwrap()).unwrap();
        let pw_norm = grid.space().norm(pw.as_slice()).unwrap();
        prop_assert!((pw_norm.powi(2) - ou.norm_squared()).abs() <= 1e-12 * ou.norm_squared().max(1e-300));
    }

    #[test]
    fn vfi_refines_cfi_for_any_field(seed in any::<u64>()) {
        let mut r = rng(seed);
        let grid = GridConfig::default();
        let cfi = space_for(ImagingMode::Cfi, Region::Full, (2, 4), &grid);
        let vfi = space_for(ImagingMode::Vfi, Region::Full, (2, 4), &grid);
        let u: Vec<f64> = (0..grid.n_dofs()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let ec = distance(cfi.representers(), &u).unwrap();
        let ev = distance(vfi.representers(), &u).unwrap();
        prop_assert!(ev <= ec + 1e-12);
    }
}

#[test]
fn observation_csv_round_trip_and_schema() {
    let grid = GridConfig::default();
    let meas = space_for(ImagingMode::Vfi, Region::Common, (2, 2), &grid);
    let db = sample_database(&ParameterRanges::default(), 1, 1, &grid, 8, HealthFilter::All).unwrap();
    let obs = observe(&db.snapshots[0], &meas).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("obs.csv");
    obs.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("voxel_index,component,value\n"));
    assert_eq!(text.lines().filter(|l| l.contains(",perp,")).count(), 32);
    assert_eq!(Observation::read_csv(&path, &meas).unwrap(), obs);
}

#[test]
fn mismatched_space_is_rejected() {
    let grid = GridConfig::default();
    let meas = space_for(ImagingMode::Cfi, Region::Common, (2, 2), &grid);
    let short = vec![0.0; grid.n_dofs() - 1];
    assert!(matches!(observe_field(&short, &meas), Err(Error::Dimension { .. })));
}
