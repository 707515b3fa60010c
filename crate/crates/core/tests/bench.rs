mod common;

use std::sync::Arc;

use common::*;
use nalgebra::DVector;
use pbdwkit::bench::*;
use pbdwkit::hilbert::inf_sup;
use pbdwkit::manifold::*;
use pbdwkit::measurement::*;
use pbdwkit::reduced::pod;
use pbdwkit::Error;
use rand::Rng;

fn measurement(mode: ImagingMode, region: Region, grid: &GridConfig) -> Arc<MeasurementSpace> {
    let voxels = build_voxels(grid, region, (2, 2)).unwrap().len();
    let d = MeasurementDescriptor {
        mode,
        region,
        block: (2, 2),
        beam_angle: grid.beam_angle,
        n_dofs: grid.n_dofs(),
        m: if mode == ImagingMode::Cfi { voxels } else { 2 * voxels },
    };
    Arc::new(MeasurementSpace::from_descriptor(&d, grid).unwrap())
}

fn db(patients: usize, samples: usize, seed: u64) -> SnapshotDatabase {
    sample_database(
        &ParameterRanges::default(),
        patients,
        samples,
        &GridConfig::default(),
        seed,
        HealthFilter::All,
    )
    .unwrap()
}

#[test]
fn rel_error_trivial_cases_and_oracle() {
    let mut r = rng(80);
    let space = random_space(&mut r, 50, false);
    let u = random_vectors(&mut r, 50, 1).pop().unwrap();
    assert_eq!(rel_error(&space, u.as_slice(), u.as_slice()).unwrap(), 0.0);
    let zero = vec![0.0; 50];
    assert!((rel_error(&space, u.as_slice(), &zero).unwrap() - 1.0).abs() < 1e-15);
    for _ in 0..20 {
        let v = random_vectors(&mut r, 50, 1).pop().unwrap();
        let d = &u - &v;
        let want = dd_norm(space.weights(), d.as_slice()) / dd_norm(space.weights(), u.as_slice());
        assert!((rel_error(&space, u.as_slice(), v.as_slice()).unwrap() - want).abs() <= 1e-13 * want);
    }
    assert!(matches!(
        rel_error(&space, &zero, u.as_slice()),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn time_error_matches_quadrature_oracle() {
    let mut r = rng(81);
    let space = random_space(&mut r, 40, false);
    let truth = random_vectors(&mut r, 40, 12);
    let recs = random_vectors(&mut r, 40, 12);
    let t_c = 0.83;
    let tr: Vec<&[f64]> = truth.iter().map(|v| v.as_slice()).collect();
    let rc: Vec<&[f64]> = recs.iter().map(|v| v.as_slice()).collect();
    let got = time_error(&space, &tr, &rc, t_c).unwrap();
    let dt = t_c / 12.0;
    let energy = dd_sum(
        truth
            .iter()
            .map(|u| dd_norm(space.weights(), u.as_slice()).powi(2) * dt),
    );
    for k in 0..12 {
        let d = &truth[k] - &recs[k];
        let want = dd_norm(space.weights(), d.as_slice()) / energy.sqrt();
        assert!((got[k] - want).abs() <= 1e-12 * want);
    }
    assert!(time_error(&space, &tr, &tr, t_c).unwrap().iter().all(|&e| e == 0.0));
    let zeros = vec![vec![0.0; 40]; 12];
    let zr: Vec<&[f64]> = zeros.iter().map(|v| v.as_slice()).collect();
    let curve = time_error(&space, &tr, &zr, t_c).unwrap();
    for k in 0..12 {
        let ratio = curve[k] / space.norm(tr[k]).unwrap();
        assert!((ratio - curve[0] / space.norm(tr[0]).unwrap()).abs() < 1e-14);
    }
    assert!(matches!(time_error(&space, &zr, &tr, t_c), Err(Error::Degenerate(_))));
}

#[test]
fn error_in_time_peaks_at_peak_systole_for_zero_reconstruction() {
    let grid = GridConfig::default();
    let ranges = ParameterRanges::default();
    let y = draw_patient(&ranges, &ranges.eta_intervals(HealthFilter::All), 3, 0);
    let k = 80;
    let states: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            synthesize_snapshot(&y.at(i as f64 * y.cycle() / k as f64), &grid)
                .unwrap()
                .coeffs
        })
        .collect();
    let zeros = vec![vec![0.0; grid.n_dofs()]; k];
    let tr: Vec<&[f64]> = states.iter().map(|v| v.as_slice()).collect();
    let zr: Vec<&[f64]> = zeros.iter().map(|v| v.as_slice()).collect();
    let curve = time_error(&grid.space(), &tr, &zr, y.cycle()).unwrap();
    let argmax = (0..k).max_by(|&a, &b| curve[a].total_cmp(&curve[b])).unwrap();
    let t = argmax as f64 * y.cycle() / k as f64;
    assert!((t - y.t_peak()).abs() <= y.cycle() / k as f64);
}

#[test]
fn beta_curve_is_monotone_and_matches_recomputation() {
    let grid = GridConfig::default();
    let meas = measurement(ImagingMode::Cfi, Region::Full, &grid);
    let train = db(4, 8, 21);
    let snaps: Vec<&[f64]> = train.snapshots.iter().map(|s| s.coeffs.as_slice()).collect();
    let basis = pod(&train.space, &snaps, 20, true).unwrap();
    let ns: Vec<usize> = (1..=basis.dim()).collect();
    let curve = beta_curve(&basis.modes, &meas, &ns).unwrap();
    for (j, &n) in ns.iter().enumerate() {
        let want = inf_sup(&basis.modes.prefix(n).unwrap(), meas.representers()).unwrap();
        assert!((curve[j] - want).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&curve[j]));
        if j > 0 {
            assert!(curve[j] <= curve[j - 1] + 1e-12);
        }
    }
    let inside = meas.representers().prefix(3).unwrap();
    assert!((beta_curve(&inside, &meas, &[1]).unwrap()[0] - 1.0).abs() < 1e-12);
    assert!(beta_curve(&inside, &meas, &[4]).is_err());
}

#[test]
fn flow_ratio_reproduces_the_resistance_ratio() {
    let grid = GridConfig::default();
    let ranges = ParameterRanges::default();
    let base = draw_patient(&ranges, &ranges.eta_intervals(HealthFilter::All), 5, 0);
    for eta in [1.0, 10.0, 0.1, 1.3] {
        let y = ParameterPoint {
            eta,
            ..base.at(base.t_peak())
        };
        let u = synthesize_snapshot(&y, &grid).unwrap();
        let r = flow_ratio(&u.coeffs, &grid).unwrap();
        assert!((r - eta).abs() <= 1e-10 * eta, "{r} vs {eta}");
    }
    assert!(matches!(
        flow_ratio(&vec![0.0; grid.n_dofs()], &grid),
        Err(Error::Degenerate(_))
    ));
    assert!(flow_ratio(&[1.0], &grid).is_err());
}

#[test]
fn threshold_and_blockage_index() {
    assert!((threshold(&[0.9, 1.1], &[5.0, 9.0]).unwrap() - 3.05).abs() < 1e-15);
    assert!(matches!(threshold(&[], &[1.0]), Err(Error::Precondition(_))));
    assert_eq!(blockage_index(4.0), 4.0);
    assert_eq!(blockage_index(0.25), 4.0);
    assert_eq!(blockage_index(1.0), 1.0);
    assert_eq!(blockage_index(-1.0), f64::INFINITY);
}

#[test]
fn g17_formatting_round_trips() {
    assert_eq!(fmt_g17(0.1), "0.10000000000000001");
    assert_eq!(fmt_g17(123.0), "123");
    assert_eq!(fmt_g17(1e20), "1e+20");
    assert_eq!(fmt_g17(1e-5), "1.0000000000000001e-05");
    assert_eq!(fmt_g17(-2.5), "-2.5");
    assert_eq!(fmt_g17(0.0), "0");
    let mut r = rng(82);
    for _ in 0..2000 {
        let x: f64 = r.gen_range(-1.0..1.0) * 10f64.powi(r.gen_range(-300..300));
        assert_eq!(fmt_g17(x).parse::<f64>().unwrap(), x);
    }
}

fn small_sweep(
    methods: Vec<Method>,
) -> (
    SnapshotDatabase,
    SnapshotDatabase,
    Arc<MeasurementSpace>,
    Vec<SweepReport>,
) {
    let grid = GridConfig::default();
    let meas = measurement(ImagingMode::Cfi, Region::Common, &grid);
    let train = db(12, 10, 31);
    let test = db(2, 10, 32);
    let cfg = SweepConfig {
        methods,
        n_grid: vec![1, 2, 4, 8],
        tau: 0.625,
        delta_hr: 36.0,
        timings: false,
    };
    let reports = sweep(&train, &test, &meas, &cfg).unwrap();
    (train, test, meas, reports)
}

#[test]
fn sweep_reports_satisfy_invariants() {
    let (_, test, _, reports) = small_sweep(Method::ALL.to_vec());
    assert_eq!(reports.len(), 4);
    for (rep, method) in reports.iter().zip(Method::ALL) {
        assert_eq!(rep.method, method);
        assert!(rep.invariant_failures().is_empty(), "{:?}", rep.invariant_failures());
        for j in 0..rep.n_grid.len() {
            assert!(rep.e_av[j] <= rep.e_wc[j]);
            assert_eq!(rep.per_snapshot[j].len(), test.len());
            assert!(rep.per_snapshot[j].iter().all(|&e| e >= 0.0 && e.is_finite()));
            let mean = rep.per_snapshot[j].iter().sum::<f64>() / test.len() as f64;
            assert!((mean - rep.e_av[j]).abs() <= 1e-15 * (1.0 + mean));
            assert!(rep.apply_us_p50[j].is_none());
        }
        assert!(rep.n_grid.contains(&rep.best_n_av));
    }
}

#[test]
fn pod_lin_is_exact_in_sample() {
    let grid = GridConfig::default();
    let meas = measurement(ImagingMode::Cfi, Region::Common, &grid);
    let train = db(2, 5, 33);
    let snaps: Vec<&[f64]> = train.snapshots.iter().map(|s| s.coeffs.as_slice()).collect();
    let rank = pod(&train.space, &snaps, snaps.len(), false).unwrap().dim();
    let test = train.subset(&[0, 3, 7]).unwrap();
    let cfg = SweepConfig {
        methods: vec![Method::PodLin],
        n_grid: vec![rank],
        tau: 0.625,
        delta_hr: 36.0,
        timings: false,
    };
    let rep = &sweep(&train, &test, &meas, &cfg).unwrap()[0];
    assert!(rep.e_wc[0] <= 1e-8, "{}", rep.e_wc[0]);
}

#[test]
fn pod_lin_on_training_data_is_non_increasing() {
    let grid = GridConfig::default();
    let meas = measurement(ImagingMode::Cfi, Region::Common, &grid);
    let train = db(6, 8, 34);
    let cfg = SweepConfig {
        methods: vec![Method::PodLin],
        n_grid: (1..=12).collect(),
        tau: 0.625,
        delta_hr: 36.0,
        timings: false,
    };
    let rep = &sweep(&train, &train, &meas, &cfg).unwrap()[0];
    for j in 1..rep.e_av.len() {
        assert!(rep.e_av[j] <= rep.e_av[j - 1] + 1e-12, "{:?}", rep.e_av);
    }
}

#[test]
fn sweep_rejects_bad_configs() {
    let grid = GridConfig::default();
    let meas = measurement(ImagingMode::Cfi, Region::Common, &grid);
    let train = db(2, 4, 35);
    let mut cfg = SweepConfig {
        methods: vec![Method::PodLin],
        n_grid: vec![33],
        tau: 0.625,
        delta_hr: 36.0,
        timings: false,
    };
    assert!(matches!(sweep(&train, &train, &meas, &cfg), Err(Error::Config(_))));
    cfg.n_grid = vec![1];
    cfg.methods.clear();
    assert!(matches!(sweep(&train, &train, &meas, &cfg), Err(Error::Config(_))));
    assert_eq!("p-pod-aff".parse::<Method>().unwrap(), Method::PPodAff);
    assert!("pod".parse::<Method>().is_err());
}

#[test]
fn csv_exports_follow_schema_and_round_trip() {
    let (_, test, _, reports) = small_sweep(vec![Method::PodLin, Method::PPodAff]);
    let dir = tempfile::tempdir().unwrap();
    let sweep_path = dir.path().join("sweep.csv");
    let per_path = dir.path().join("per_snapshot.csv");
    write_sweep_csv(&reports, &sweep_path).unwrap();
    write_per_snapshot_csv(&reports, &per_path).unwrap();

    let mut rd = csv::Reader::from_path(&sweep_path).unwrap();
    assert_eq!(
        rd.headers().unwrap(),
        vec!["method", "n", "e_av", "e_wc", "beta_min", "apply_us_p50"]
    );
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 8);
    for (i, row) in rows.iter().enumerate() {
        let rep = &reports[i / 4];
        let j = i % 4;
        assert_eq!(&row[0], rep.method.label());
        assert_eq!(row[1].parse::<usize>().unwrap(), rep.n_grid[j]);
        assert_eq!(row[2].parse::<f64>().unwrap(), rep.e_av[j]);
        assert_eq!(row[3].parse::<f64>().unwrap(), rep.e_wc[j]);
        assert_eq!(row[4].parse::<f64>().unwrap(), rep.beta_min[j]);
        assert_eq!(&row[5], "");
    }

    let mut rd = csv::Reader::from_path(&per_path).unwrap();
    assert_eq!(rd.headers().unwrap(), vec!["method", "n", "snapshot", "rel_error"]);
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2 * 4 * test.len());
    let last = rows.last().unwrap();
    assert_eq!(
        last[3].parse::<f64>().unwrap(),
        *reports[1].per_snapshot[3].last().unwrap()
    );

    let first = std::fs::read(&sweep_path).unwrap();
    write_sweep_csv(&reports, &sweep_path).unwrap();
    assert_eq!(std::fs::read(&sweep_path).unwrap(), first);
}

#[test]
fn manifest_keys_are_sorted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    let value = serde_json::json!({"zeta": 1, "alpha": {"b": 2, "a": [3, {"y": 0, "x": 1}]}});
    write_manifest(&value, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let pos = |k: &str| text.find(&format!("\"{k}\"")).unwrap();
    assert!(pos("alpha") < pos("zeta"));
    assert!(pos("a") < pos("b"));
    assert!(pos("x") < pos("y"));
    assert!(text.ends_with('\n'));
    let back: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(back, value);
}

#[test]
fn vfi_projection_errors_never_exceed_cfi() {
    let grid = GridConfig::default();
    let test = db(3, 10, 36);
    let cfi = projection_errors(&test, &measurement(ImagingMode::Cfi, Region::Common, &grid)).unwrap();
    let vfi = projection_errors(&test, &measurement(ImagingMode::Vfi, Region::Common, &grid)).unwrap();
    for (c, v) in cfi.iter().zip(&vfi) {
        assert!(v <= &(c + 1e-12));
    }
    let oracle: Vec<f64> = test
        .snapshots
        .iter()
        .map(|s| {
            let meas = measurement(ImagingMode::Cfi, Region::Common, &grid);
            let field = meas.field(&observe(s, &meas).unwrap()).unwrap();
            let d = DVector::from_column_slice(&s.coeffs) - field;
            dd_norm(test.space.weights(), d.as_slice())
        })
        .collect();
    for (a, b) in cfi.iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b));
    }
}

#[test]
fn qoi_pipeline_is_sign_safe_on_a_small_run() {
    let grid = GridConfig::default();
    let meas = measurement(ImagingMode::Cfi, Region::Common, &grid);
    let train = db(20, 20, 37);
    let patients = qoi_patients(4, 4, 38).unwrap();
    for (i, y) in patients.iter().enumerate() {
        assert_eq!(label_health(y).unwrap() == Health::Healthy, i < 4);
        let u = synthesize_snapshot(y, &grid).unwrap();
        assert!((flow_ratio(&u.coeffs, &grid).unwrap() - y.eta).abs() <= 1e-10 * y.eta);
    }
    let cfg = QoiConfig {
        n: 10,
        tau: 0.625,
        delta_hr: 36.0,
    };
    let report = qoi_pipeline(&train, &patients, &meas, &cfg).unwrap();
    assert_eq!(
        report.true_positives + report.false_positives + report.true_negatives + report.false_negatives,
        8
    );
    assert_eq!(report.false_negatives, 0);
    assert!(report.sign_violations.is_empty());
    assert!(report.invariant_failures().is_empty());
    for row in &report.rows {
        assert!((row.r_true - row.eta).abs() <= 1e-10 * row.eta);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("qoi.csv");
    write_qoi_csv(&report, &path).unwrap();
    let mut rd = csv::Reader::from_path(&path).unwrap();
    assert_eq!(
        rd.headers().unwrap(),
        vec!["patient", "eta", "r_true", "r_rec", "label_true", "label_pred"]
    );
    assert_eq!(rd.records().count(), 8);
}
