use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rydcrit::analysis::*;
use rydcrit::hamiltonian::{dense, BasisSpace, HamiltonianSpec};
use rydcrit::lattice::{build_ring, build_square, Lattice};
use rydcrit::measurement::*;
use rydcrit::observables::CorrelatorSeries;
use rydcrit::Error;

fn snaps_from(lat: &Lattice, records: Vec<u64>) -> SnapshotSet {
    SnapshotSet::new(lat.n_sites(), records, lat.content_hash(), Provenance::default()).unwrap()
}

fn series(x: &[f64], y: Vec<f64>) -> CorrelatorSeries {
    CorrelatorSeries {
        distances: x.to_vec(),
        values: y,
        stderr: None,
        counts: vec![10; x.len()],
        connected: false,
    }
}

fn distances() -> Vec<f64> {
    (2..=16).map(|k| k as f64).collect()
}

fn logistic_curve(grid: &[f64], center: f64, width: f64) -> Vec<f64> {
    grid.iter().map(|d| 0.5 / (1.0 + (-(d - center) / width).exp())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dense_hamiltonian_is_symmetric(n in 3usize..7, omega in 0.1f64..20.0, delta in -30.0f64..30.0, ratio in 0.8f64..2.0) {
        let lat = build_ring(n, 1.0).unwrap();
        let c6 = rydcrit::hamiltonian::c6_from_blockade_ratio(omega, ratio);
        let spec = HamiltonianSpec::from_lattice(&lat, omega, delta, c6).unwrap();
        let basis = BasisSpace::full(n).unwrap();
        let h = dense::hamiltonian(&spec, &basis);
        let scale = h.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!((&h - h.transpose()).amax() <= 1e-14 * scale);
    }

    #[test]
    fn postselection_is_idempotent(seed in any::<u64>(), radius in 0.9f64..2.2) {
        let lat = build_square(3, 3, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records: Vec<u64> = (0..200).map(|_| rng.random::<u64>() & 0x1ff).collect();
        let once = postselect_blockade(&snaps_from(&lat, records), &lat, radius).unwrap();
        let twice = postselect_blockade(&once, &lat, radius).unwrap();
        prop_assert_eq!(once.records(), twice.records());
    }

    #[test]
    fn detection_inversion_round_trips(eta0 in 0.9f64..1.0, p in 0.05f64..0.95, eps in -0.04f64..0.05) {
        let (g1, g2) = forward_detection(eta0, p, eps);
        let inv = infer_detection_error(eta0, g1, g2).unwrap();
        prop_assert!((inv.p_pi - p).abs() < 1e-10);
        prop_assert!((inv.eps_det - eps).abs() < 1e-10);
    }

    #[test]
    fn susceptibility_peak_is_equivariant(shift in -5.0f64..5.0, scale in 0.1f64..10.0, center in -0.5f64..0.5, width in 0.1f64..0.4) {
        let grid: Vec<f64> = (0..50).map(|k| -2.0 + 4.0 * k as f64 / 49.0).collect();
        let n = logistic_curve(&grid, center, width);
        let cfg = SusceptibilityConfig::default();
        let base = susceptibility_peak(&grid, &n, &cfg).unwrap();
        let shifted: Vec<f64> = grid.iter().map(|d| d + shift).collect();
        let moved = susceptibility_peak(&shifted, &n, &cfg).unwrap();
        prop_assert!((moved.delta_max - base.delta_max - shift).abs() < 1e-9);
        let scaled: Vec<f64> = n.iter().map(|v| v * scale).collect();
        let s = susceptibility_peak(&grid, &scaled, &cfg).unwrap();
        prop_assert!((s.delta_max - base.delta_max).abs() < 1e-9);
    }

    #[test]
    fn exact_models_are_recovered(a in 0.05f64..2.0, ds in 0.05f64..1.0, xi in 3.0f64..30.0, tt in 0.005f64..0.03) {
        let x = distances();
        let opts = FitOptions { range: FitRange::everything(), ..Default::default() };
        let cases = [
            (Model::Power, x.iter().map(|d| a * d.powf(-2.0 * ds)).collect::<Vec<_>>()),
            (Model::Exponential, x.iter().map(|d| a * (-d / xi).exp()).collect()),
            (Model::PowerTimesExponential, x.iter().map(|d| a * d.powf(-2.0 * ds) * (-d / xi).exp()).collect()),
            (Model::FiniteTCft, x.iter().map(|d| a * (tt / (std::f64::consts::PI * tt * d).sinh()).powf(2.0 * ds)).collect()),
        ];
        for (model, y) in cases {
            let fit = fit_correlator(&series(&x, y), model, &opts).unwrap();
            prop_assert!((fit.amplitude() - a).abs() < 1e-6 * a.max(1.0), "{model:?} amplitude {}", fit.amplitude());
            match model {
                Model::Exponential => prop_assert!((fit.xi().unwrap() - xi).abs() < 1e-6 * xi),
                Model::FiniteTCft => {
                    prop_assert!((fit.scaling_dim.unwrap() - ds).abs() < 1e-6, "{model:?} {:?}", fit.scaling_dim);
                    prop_assert!((fit.temperature().unwrap() - tt).abs() < 1e-5 * tt);
                }
                _ => prop_assert!((fit.scaling_dim.unwrap() - ds).abs() < 1e-6),
            }
            if model == Model::PowerTimesExponential {
                prop_assert!((fit.xi().unwrap() - xi).abs() < 1e-6 * xi * xi);
            }
        }
    }

    #[test]
    fn pure_power_data_gives_same_exponent_with_cutoff_factor(a in 0.05f64..2.0, ds in 0.05f64..1.0) {
        let x = distances();
        let y: Vec<f64> = x.iter().map(|d| a * d.powf(-2.0 * ds)).collect();
        let opts = FitOptions { range: FitRange::everything(), ..Default::default() };
        let p = fit_correlator(&series(&x, y.clone()), Model::Power, &opts).unwrap();
        let pe = fit_correlator(&series(&x, y), Model::PowerTimesExponential, &opts).unwrap();
        prop_assert!((p.scaling_dim.unwrap() - pe.scaling_dim.unwrap()).abs() < 1e-6);
    }

    #[test]
    fn joint_fit_of_one_series_matches_single_fit(seed in any::<u64>(), ds in 0.1f64..0.6, xi in 4.0f64..20.0) {
        let x = distances();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = x
            .iter()
            .map(|d| 0.3 * d.powf(-2.0 * ds) * (-d / xi).exp() * (1.0 + 0.02 * (rng.random::<f64>() - 0.5)))
            .collect();
        let s = series(&x, y);
        for model in [Model::Power, Model::PowerTimesExponential] {
            let single = fit_correlator(&s, model, &FitOptions::default()).unwrap();
            let joint = joint_fit(std::slice::from_ref(&s), model, &FitOptions::default()).unwrap();
            prop_assert!((single.scaling_dim.unwrap() - joint.scaling_dim.unwrap()).abs() < 1e-9);
            prop_assert!((single.rss() - joint.rss()).abs() <= 1e-9 * single.rss().max(1e-12));
        }
    }

    #[test]
    fn bootstrap_mean_of_linear_statistic_matches_plug_in(seed in any::<u64>(), p in 0.1f64..0.9) {
        let lat = build_ring(6, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records: Vec<u64> = (0..300).map(|_| (0..6).fold(0u64, |b, i| b | ((rng.random::<f64>() < p) as u64) << i)).collect();
        let snaps = snaps_from(&lat, records);
        let stat = |s: &SnapshotSet| Ok((0..s.n_shots()).map(|k| s.get(k, 0) as f64).sum::<f64>() / s.n_shots() as f64);
        let plug_in = stat(&snaps).unwrap();
        let opts = BootstrapOptions { replicates: 200, seed, ..Default::default() };
        let b = bootstrap(&snaps, &opts, stat).unwrap();
        prop_assert!((b.mean - plug_in).abs() <= 3.0 * b.std / (200f64).sqrt() + 1e-15);
    }
}

#[test]
fn joint_fit_needs_two_series_to_flag_incompatibility() {
    let x = distances();
    let a = series(&x, x.iter().map(|d| d.powf(-0.25)).collect());
    let fit = joint_fit(&[a], Model::Power, &FitOptions::default()).unwrap();
    assert!(fit.incompatibility.is_none() || !fit.incompatibility.unwrap().flagged);
}

#[test]
fn bootstrap_of_identical_snapshots_has_zero_spread() {
    let lat = build_ring(8, 1.0).unwrap();
    let snaps = snaps_from(&lat, vec![0b0101_0101; 400]);
    let opts = BootstrapOptions { replicates: 100, seed: 3, ..Default::default() };
    let b = bootstrap(&snaps, &opts, |s| Ok(rydcrit::observables::mean_density(s))).unwrap();
    assert_eq!(b.std, 0.0);
    assert_eq!(b.mean, 0.5);
}

#[test]
fn bootstrap_of_bernoulli_mean_matches_binomial_error() {
    let lat = build_ring(4, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let records: Vec<u64> = (0..1000).map(|_| rng.random_bool(0.5) as u64).collect();
    let snaps = snaps_from(&lat, records);
    let opts = BootstrapOptions { replicates: 1000, seed: 5, ..Default::default() };
    let b = bootstrap(&snaps, &opts, |s| Ok((0..s.n_shots()).map(|k| s.get(k, 0) as f64).sum::<f64>() / s.n_shots() as f64)).unwrap();
    let expected = (0.25f64 / 1000.0).sqrt();
    assert!((b.std / expected - 1.0).abs() < 0.15, "std {} vs {}", b.std, expected);
}

#[test]
fn bootstrap_of_neel_fit_reports_instability() {
    let lat = build_ring(12, 1.0).unwrap();
    let snaps = snaps_from(&lat, vec![0b0101_0101_0101; 200]);
    let opts = BootstrapOptions { replicates: 50, seed: 1, ..Default::default() };
    let err = fit_with_bootstrap(
        &snaps,
        |s| rydcrit::observables::two_point(s, &lat, rydcrit::observables::Field::Sigma, Default::default(), true),
        Model::Power,
        &FitOptions::default(),
        &opts,
    )
    .unwrap_err();
    assert!(matches!(err.root(), Error::BootstrapInstability { .. } | Error::DegenerateFit(..)), "{err}");
}
