//! End-to-end runs through the public API: select a bandwidth, build
//! bands, write artifacts, and check the cross-module contracts that unit
//! tests cannot see (determinism across identical runs, bootstrap
//! perturbation, null-test coherence, selector output hygiene).

use drband::bands::bootstrap_curves_with;
use drband::local::estimate_curve_with;
use drband::tuning::select_pilot_with;
use drband::{
    band_from_ensemble, default_h_grid, lepski_candidates, lepski_run, sample_dgp,
    test_uniform_null, write_band_csv, write_curve_csv, BandTarget, CvGrid, Dgp, DgpSpec,
    KernelConfig, Loss, MassPolicy, ScaleMethod, SieveConfig, SimProtocol, WeightsMode,
};

const POLICY: MassPolicy = MassPolicy { multiplier: 0.0 };

fn toy_run(seed: u64) -> (Vec<f64>, drband::BandEstimate) {
    let ds = sample_dgp(&DgpSpec {
        kind: Dgp::Dgp0,
        n: 150,
        seed,
    })
    .unwrap();
    let grid = ds.default_grid();
    let k = KernelConfig::new(0.35).unwrap();
    let mode = WeightsMode::Sieve(SieveConfig::new(2, 1));
    let ens = bootstrap_curves_with(&ds, mode, Loss::Squared, &grid, &k, 60, 21, POLICY, 0.25)
        .unwrap();
    let band = band_from_ensemble(&ens, BandTarget::G, 0.05, ScaleMethod::BootstrapSd).unwrap();
    (grid, band)
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let (_, a) = toy_run(77);
    let (_, b) = toy_run(77);
    assert_eq!(a.c_alpha, b.c_alpha);
    assert!(a.center.iter().zip(&b.center).all(|(x, y)| x == y));
    assert!(a.sigma.iter().zip(&b.sigma).all(|(x, y)| x == y));
    assert!(a.lower.iter().zip(&b.lower).all(|(x, y)| x == y));
    let (_, c) = toy_run(78);
    assert!(
        a.center.iter().zip(&c.center).any(|(x, y)| x != y),
        "different seeds must draw different data"
    );
}

#[test]
fn live_multipliers_perturb_replicates() {
    let ds = sample_dgp(&DgpSpec {
        kind: Dgp::Dgp0,
        n: 150,
        seed: 4,
    })
    .unwrap();
    let grid = ds.default_grid();
    let k = KernelConfig::new(0.35).unwrap();
    let mode = WeightsMode::Sieve(SieveConfig::new(2, 1));
    let ens =
        bootstrap_curves_with(&ds, mode, Loss::Squared, &grid, &k, 20, 5, POLICY, 0.25).unwrap();
    for rep in &ens.replicates {
        assert!(
            rep.g.iter().zip(&ens.center.g).any(|(a, b)| a != b),
            "a live multiplier draw must move the replicate curve"
        );
    }
}

#[test]
fn null_test_accepts_center_and_rejects_far_shift() {
    let (grid, band) = toy_run(31);
    let accept = test_uniform_null(&band, &band.center).unwrap();
    assert!(!accept.reject);
    assert!(accept.violations.is_empty());
    let width = band.mean_width();
    let shifted: Vec<f64> = band.center.iter().map(|c| c + 10.0 * width).collect();
    let reject = test_uniform_null(&band, &shifted).unwrap();
    assert!(reject.reject);
    assert_eq!(reject.violations.len(), grid.len());
}

#[test]
fn csv_artifacts_round_trip_through_disk() {
    let ds = sample_dgp(&DgpSpec {
        kind: Dgp::Dgp0,
        n: 150,
        seed: 8,
    })
    .unwrap();
    let grid = ds.default_grid();
    let k = KernelConfig::new(0.35).unwrap();
    let w = drband::min_variance_weights(&ds, &SieveConfig::new(2, 1)).unwrap();
    let curve = estimate_curve_with(&ds, &w, Loss::Squared, &grid, &k, POLICY).unwrap();
    let (_, band) = toy_run(8);

    let dir = tempfile::tempdir().unwrap();
    let curve_path = dir.path().join("curve.csv");
    let band_path = dir.path().join("band.csv");
    write_curve_csv(std::fs::File::create(&curve_path).unwrap(), &curve).unwrap();
    write_band_csv(std::fs::File::create(&band_path).unwrap(), &band).unwrap();

    let mut rdr = csv::Reader::from_path(&curve_path).unwrap();
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        vec!["t", "g_hat", "gprime_hat"]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), grid.len());
    let g0: f64 = rows[0][1].parse().unwrap();
    assert_eq!(g0, curve.g[0], "full precision survives the round trip");

    let mut rdr = csv::Reader::from_path(&band_path).unwrap();
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        vec!["t", "center", "sigma", "lower", "upper"]
    );
    assert_eq!(rdr.records().count(), grid.len());
}

#[test]
fn pilot_then_lepski_yields_candidate_bandwidth_and_finite_band() {
    let ds = sample_dgp(&DgpSpec {
        kind: Dgp::Dgp1L,
        n: 200,
        seed: 19,
    })
    .unwrap();
    let grid = ds.default_grid();
    let mode = WeightsMode::Sieve(SieveConfig::new(2, 1));
    let cv = CvGrid::over_bandwidths(2, 1, default_h_grid(&ds, 6), 5).unwrap();
    let pilot = select_pilot_with(&ds, None, &cv, Loss::Squared, 23, POLICY).unwrap();
    assert!(pilot.h_tilde > 0.0);

    let lcfg = lepski_candidates(200, pilot.h_tilde, BandTarget::G).unwrap();
    let run = lepski_run(
        &ds,
        mode,
        Loss::Squared,
        &grid,
        &lcfg,
        40,
        29,
        BandTarget::G,
        POLICY,
        &[0.05],
    )
    .unwrap();
    assert!(
        lcfg.candidates.contains(&run.h_hat),
        "selected bandwidth must come from the candidate ladder"
    );
    let band = &run.bands[0];
    assert_eq!(band.alpha, 0.05);
    for i in 0..band.center.len() {
        assert!(band.sigma[i].is_finite() && band.sigma[i] >= 0.0);
        assert!(band.lower[i] <= band.center[i] && band.center[i] <= band.upper[i]);
    }
}

#[test]
fn tiny_protocol_smoke_produces_full_rate_table() {
    let proto = SimProtocol {
        reps: 3,
        b: 24,
        h_grid_points: 4,
        oracle_draws: 100_000,
        seed: 99,
        max_drop_frac: 0.25,
        ..SimProtocol::default()
    };
    let cells = [drband::CellSpec {
        dgp: Dgp::Dgp0,
        n: 300,
        loss: Loss::Squared,
    }];
    let report =
        drband::simulation::run_coverage_with(&cells, &proto, drband::BandMethod::Undersmooth)
            .unwrap();
    // Two arms x three levels for the single cell.
    assert_eq!(report.rows.len(), 2 * proto.levels.len());
    for row in &report.rows {
        assert!((0.0..=1.0).contains(&row.rate));
        assert_eq!(row.reps_completed + row.reps_failed, 3);
    }
}
