use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use urs_core::pricing::implied_vol;
use urs_core::synthetic::{
    generate_dataset, simulate_cir, simulate_cir_with, CirConfig, SyntheticConfig, SyntheticDataset,
};
use urs_core::Error;

// closed-form CIR moments, written out here rather than taken from the crate
fn cir_mean(v0: f64, mu: f64, k: f64, t: f64) -> f64 {
    mu + (v0 - mu) * (-k * t).exp()
}

fn cir_var(v0: f64, mu: f64, k: f64, s: f64, t: f64) -> f64 {
    let e = (-k * t).exp();
    v0 * s * s / k * (e - e * e) + mu * s * s / (2.0 * k) * (1.0 - e).powi(2)
}

#[test]
fn cir_paths_match_the_analytic_moments() {
    let cfg = CirConfig {
        v0: 0.2,
        long_term: 0.15,
        reversion: 10.0,
        vol_of_vol: 0.04,
        dt: 1e-4,
        n: 1000,
        seed: 0,
    };
    let t = cfg.dt * cfg.n as f64;
    let paths = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let ends: Vec<f64> = (0..paths)
        .map(|_| *simulate_cir_with(&cfg, &mut rng).last().unwrap())
        .collect();
    let n = paths as f64;
    let mean = ends.iter().sum::<f64>() / n;
    let var = ends.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let want_mean = cir_mean(cfg.v0, cfg.long_term, cfg.reversion, t);
    let want_var = cir_var(cfg.v0, cfg.long_term, cfg.reversion, cfg.vol_of_vol, t);
    let se_mean = (want_var / n).sqrt();
    let se_var = want_var * (2.0 / (n - 1.0)).sqrt();
    assert!((mean - want_mean).abs() < 4.0 * se_mean, "{mean} vs {want_mean}");
    assert!((var - want_var).abs() < 4.0 * se_var, "{var} vs {want_var}");
}

#[test]
fn cir_path_is_seeded_and_non_negative() {
    let cfg = CirConfig {
        vol_of_vol: 2.0,
        seed: 5,
        ..CirConfig::default()
    };
    let a = simulate_cir(&cfg).unwrap();
    assert_eq!(a, simulate_cir(&cfg).unwrap());
    assert_eq!(a.len(), cfg.n + 1);
    assert!(a.iter().all(|v| *v >= 0.0));
    assert_ne!(a, simulate_cir(&CirConfig { seed: 6, ..cfg }).unwrap());
}

#[test]
fn invalid_settings_list_every_violation() {
    let mut cfg = SyntheticConfig::stationary(0);
    cfg.cir.dt = 0.0;
    cfg.kappa_v = -1.0;
    cfg.options_per_step = 0;
    match generate_dataset(&cfg) {
        Err(Error::Config(v)) => assert_eq!(v.len(), 3, "{v:?}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn defaults_and_shapes() {
    let cfg = SyntheticConfig::default();
    assert_eq!(cfg.kappa_v, 0.01);
    assert_eq!(cfg.cir.n, 200);
    let d = generate_dataset(&SyntheticConfig::stationary(3)).unwrap();
    assert_eq!(d.len(), 200);
    assert_eq!(d.ground_truth.len(), 201);
    assert_eq!(d.prices.len(), 201);
    for (k, b) in d.quotes.iter().enumerate() {
        assert_eq!(b.len(), 5);
        for s in &b.specs {
            assert_eq!(s.spot, d.prices[k + 1]);
            assert!(s.strike >= 0.9 * s.spot - 1e-9 && s.strike <= s.spot + 1e-9);
        }
    }
    let nonstat = SyntheticConfig::non_stationary(3);
    assert_eq!(generate_dataset(&nonstat).unwrap().ground_truth[0], 0.2);
}

#[test]
fn quoted_prices_invert_to_the_deviated_volatilities() {
    let d = generate_dataset(&SyntheticConfig::stationary(9)).unwrap();
    let mut worst = 0.0f64;
    for (b, vols) in d.quotes.iter().zip(&d.deviated) {
        for ((s, y), v) in b.specs.iter().zip(b.prices.iter()).zip(vols) {
            worst = worst.max((implied_vol(s, *y).unwrap() - v).abs());
        }
    }
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn bundle_round_trip_is_exact() {
    let d = generate_dataset(&SyntheticConfig::non_stationary(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    d.export(dir.path()).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["kappa_v"], 0.01);
    assert_eq!(manifest["n"], 200);
    assert_eq!(SyntheticDataset::import(dir.path()).unwrap(), d);
}
