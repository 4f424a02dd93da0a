//! One check per acceptance criterion. Each returns whether it passed and a
//! one-line measurement summary.
#![allow(dead_code)]

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use urs_core::config::RunConfig;
use urs_core::gem::{expected_loglik, gem_fit, m_step, term_ii_joint_ut, term_ii_taylor, GemConfig, MStepObjective};
use urs_core::linalg::spd_factor;
use urs_core::market::MarketExport;
use urs_core::online::{online_fit, OnlineConfig};
use urs_core::pipeline::{evaluate, run_experiment, simulate, train_offline};
use urs_core::reservoir::{init_reservoir, InitConfig};
use urs_core::series::initial_belief;
use urs_core::ssm::{forward_filter, rts_smooth, OptionObservation};
use urs_core::synthetic::{generate_dataset, SyntheticConfig};
use urs_core::{
    augmented_transform, bs_call_price, implied_vol, unscented_transform, Exec, Gaussian, JointGaussian, OptionSpec,
    UtConfig,
};

use super::*;

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn mat_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

fn vec_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}

pub fn linear_oracle() -> Outcome {
    let start = Instant::now();
    let ut = UtConfig::default();
    let (mut worst, mut worst_ev) = (0.0f64, 0.0f64);
    for seed in 0..20u64 {
        let p = 1 + (seed % 4) as usize;
        let q = 1 + (seed % 3) as usize;
        let case = linear_case(seed, p, q, 50);
        let reference = kalman_reference(&case);
        let states = forward_filter(
            &case.dynamics,
            &case.observation,
            &case.initial,
            &case.inputs,
            &case.obs,
            &ut,
        )
        .unwrap();
        let smoothed = rts_smooth(&case.initial, &states).unwrap();
        for (t, s) in states.iter().enumerate() {
            worst = worst
                .max(vec_diff(s.prior.mean(), &reference.prior_means[t]))
                .max(mat_diff(s.prior.cov(), &reference.prior_covs[t]))
                .max(vec_diff(s.posterior.mean(), &reference.post_means[t]))
                .max(mat_diff(s.posterior.cov(), &reference.post_covs[t]));
        }
        for t in 0..=50 {
            worst = worst
                .max(vec_diff(smoothed.marginals[t].mean(), &reference.smooth_means[t]))
                .max(mat_diff(smoothed.marginals[t].cov(), &reference.smooth_covs[t]));
        }
        for t in 0..50 {
            worst = worst.max(mat_diff(&smoothed.cross[t], &reference.smooth_cross[t]));
        }
        let ev: f64 = states.iter().map(|s| s.log_evidence_increment).sum();
        worst_ev = worst_ev.max((ev - reference.log_evidence).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-8 && worst_ev <= 1e-6 && secs < 10.0,
        format!("max moment error {worst:.2e}, log-evidence error {worst_ev:.2e}, {secs:.2}s"),
    )
}

pub fn ut_exactness() -> Outcome {
    let mut r = rng(2);
    let ut = UtConfig::default();
    let (mut worst, mut worst_cross) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = r.random_range(1..=6);
        let k = r.random_range(1..=6);
        let a = normal_matrix(&mut r, k, n);
        let b = normal_vector(&mut r, k);
        let g = Gaussian::new(normal_vector(&mut r, n), spd(&mut r, n, 1.0, 0.1)).unwrap();
        let f = |x: &DVector<f64>| &a * x + &b;
        let out = unscented_transform(&g, f, &ut).unwrap();
        let mean = &a * g.mean() + &b;
        let cov = &a * g.cov() * a.transpose();
        worst = worst
            .max(vec_diff(out.mean(), &mean) / mean.amax().max(1.0))
            .max(mat_diff(out.cov(), &cov) / cov.amax());
        let j = augmented_transform(&g, f, &ut).unwrap();
        let cross = g.cov() * a.transpose();
        worst_cross = worst_cross.max(mat_diff(&j.cross, &cross) / cross.amax());
    }
    outcome(
        worst <= 1e-8 && worst_cross <= 1e-8,
        format!("max relative moment error {worst:.2e}, cross-covariance {worst_cross:.2e} over 100 maps"),
    )
}

pub fn echo_state() -> Outcome {
    let mut counts = Vec::new();
    for p in [4usize, 8, 16] {
        let mut ok = 0;
        for seed in 0..100u64 {
            let params = init_reservoir(&InitConfig {
                p,
                eta1: 0.97,
                seed,
                ..InitConfig::default()
            })
            .unwrap();
            let mut r = rng(10_000 + seed);
            let mut a = normal_vector(&mut r, p);
            let mut b = normal_vector(&mut r, p);
            for _ in 0..200 {
                let u = normal_vector(&mut r, params.input_dim()) * 0.15;
                a = params.evolve(&a, &u).unwrap();
                b = params.evolve(&b, &u).unwrap();
            }
            if (a - b).lp_norm(1) < 1e-6 {
                ok += 1;
            }
        }
        counts.push((p, ok));
    }
    outcome(
        counts.iter().all(|&(_, ok)| ok >= 99),
        counts
            .iter()
            .map(|(p, ok)| format!("p={p}: {ok}/100"))
            .collect::<Vec<_>>()
            .join(", "),
    )
}

pub fn estep_monte_carlo() -> Outcome {
    let start = Instant::now();
    let fx = esn_fixture(2, 2, 5, 8);
    let cfg = GemConfig::default();
    let (ut_value, _) = expected_loglik(&fx.traj, &fx.params, &fx.data, &cfg).unwrap();
    let (mc, se) = mc_expected_loglik(&fx, 1_000_000, 44);
    let z = (ut_value - mc).abs() / se;
    let winv = spd_factor(&fx.params.w).unwrap().inverse();
    let mut worst_rel = 0.0f64;
    for t in 1..=fx.traj.len() {
        let pair = fx.traj.pair(t).unwrap().full().unwrap();
        let scale = (1e-4 / pair.cov().amax()).min(1.0);
        let small = Gaussian::new(pair.mean().clone(), pair.cov() * scale).unwrap();
        let j = JointGaussian::split(&small, 2).unwrap();
        let a = term_ii_joint_ut(&j, &fx.params, &fx.data.inputs[t - 1], &winv, &cfg.ut).unwrap();
        let b = term_ii_taylor(&j, &fx.params, &fx.data.inputs[t - 1], &winv).unwrap();
        worst_rel = worst_rel.max((a - b).abs() / a.abs());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        z <= 3.0 && worst_rel <= 1e-3 && secs < 60.0,
        format!(
            "joint-UT {ut_value:.5} vs Monte Carlo {mc:.5} ± {se:.5} ({z:.2} SE); Taylor gap {worst_rel:.2e}; {secs:.1}s"
        ),
    )
}

/// Largest smooth-loss gradient entry over `G` and `G_in`: the scale the
/// Lasso weight competes against.
pub fn gradient_scale(obj: &MStepObjective, params: &urs_core::ReservoirParams) -> f64 {
    let g = obj.evaluate(params, true).unwrap().grad.unwrap();
    g.g.amax().max(g.g_in.amax())
}

pub fn gem_contract() -> Outcome {
    let mut violations = 0;
    let mut steps = 0;
    let mut zeroed = 0;
    for seed in 0..10u64 {
        let fx = esn_fixture(4, 4, 30, 100 + seed);
        let cfg = GemConfig {
            max_iters: 4,
            ..GemConfig::default()
        };
        let obj = MStepObjective::new(&fx.traj, &fx.data, &fx.params, &cfg).unwrap();
        let mut q = fx.params.clone();
        let out = m_step(&obj, &mut q, 1.0, &cfg).unwrap();
        steps += out.losses.len() - 1;
        violations += out.losses.windows(2).filter(|w| w[1] > w[0]).count();
        let (train, val) = (fx.data.slice(0, 29), fx.data.slice(29, 30));
        let fit = gem_fit(&train, &val, &fx.params, &fx.initial, &cfg).unwrap();
        for r in &fit.report.iterations {
            if let (Some(b), Some(a)) = (r.loss_before, r.loss_after) {
                steps += r.accepted_steps;
                if a > b {
                    violations += 1;
                }
            }
        }
        let frozen = GemConfig {
            update_noise: false,
            ..cfg.clone()
        };
        let obj = MStepObjective::new(&fx.traj, &fx.data, &fx.params, &frozen).unwrap();
        let heavy = GemConfig {
            lasso_alpha: 1e3 * gradient_scale(&obj, &fx.params),
            ..frozen
        };
        let mut q = fx.params.clone();
        m_step(&obj, &mut q, 1.0, &heavy).unwrap();
        if q.g.iter().chain(q.g_in.iter()).all(|&x| x == 0.0) {
            zeroed += 1;
        }
    }
    outcome(
        violations == 0 && zeroed == 10 && steps > 0,
        format!("{steps} accepted steps, {violations} loss increases; weights exactly zero in {zeroed}/10 runs"),
    )
}

pub fn black_scholes() -> Outcome {
    let start = Instant::now();
    let mut r = rng(6);
    let cases: Vec<(OptionSpec, f64)> = (0..50)
        .map(|_| {
            let spot = r.random_range(50.0..150.0);
            let spec = OptionSpec::new(
                spot,
                r.random_range(0.0..0.06),
                spot * r.random_range(0.8..1.2),
                r.random_range(0.1..2.0),
            )
            .unwrap();
            (spec, r.random_range(0.05..0.8))
        })
        .collect();
    let z: Vec<f64> = Exec::Parallel.map_range(cases.len(), |i| {
        let (spec, sigma) = cases[i];
        let (mc, se) = mc_call(&spec, sigma, 10_000_000, 600 + i as u64);
        (bs_call_price(&spec, sigma).unwrap() - mc).abs() / se
    });
    let within = z.iter().filter(|&&x| x <= 3.0).count();
    let worst_z = z.iter().copied().fold(0.0, f64::max);
    let mut worst_iv = 0.0f64;
    for k in 0..200 {
        let sigma = 0.01 * 200f64.powf(k as f64 / 199.0);
        let maturity = r.random_range(0.1..2.0);
        let rate = r.random_range(0.0..0.06);
        // strikes within one standard deviation of the forward keep vega
        // well above the price round-off
        let shift = r.random_range(-1.0..1.0) * sigma * f64::sqrt(maturity);
        let spec = OptionSpec::new(100.0, rate, 100.0 * (rate * maturity + shift).exp(), maturity).unwrap();
        let price = bs_call_price(&spec, sigma).unwrap();
        worst_iv = worst_iv.max((implied_vol(&spec, price).unwrap() - sigma).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        within == 50 && worst_iv <= 1e-8,
        format!(
            "{within}/50 prices within 3 SE (worst {worst_z:.2}); implied-vol round trip {worst_iv:.1e}; {secs:.1}s"
        ),
    )
}

fn band_coverage(summary: &urs_core::pipeline::ExperimentSummary) -> Vec<f64> {
    summary.mean_band_coverage[0].1.clone()
}

fn synthetic_table(non_stationary: bool, max_err: f64, min_cov: f64) -> Outcome {
    let start = Instant::now();
    let mut cfg = RunConfig::default();
    if non_stationary {
        cfg.synthetic = SyntheticConfig::non_stationary(0);
    }
    cfg.eval.baseline = false;
    let summary = run_experiment(&cfg, 10, Exec::default()).unwrap();
    let err = summary.mean_errors[0].1[0];
    let cov = band_coverage(&summary);
    let secs = start.elapsed().as_secs_f64();
    let cov_text = summary
        .horizons
        .iter()
        .zip(&cov)
        .map(|(h, c)| format!("k={h}: {c:.3}"))
        .collect::<Vec<_>>()
        .join(" ");
    outcome(
        err <= max_err && cov.iter().all(|&c| c >= min_cov) && secs < 1800.0,
        format!("k=1 error {err:.4}; 95% coverage {cov_text}; {secs:.0}s"),
    )
}

pub fn synthetic_stationary() -> Outcome {
    synthetic_table(false, 0.05, 0.90)
}

pub fn synthetic_non_stationary() -> Outcome {
    synthetic_table(true, 0.06, 0.85)
}

pub fn market_pipeline() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig {
        seed: 9,
        ..RunConfig::default()
    };
    cfg.fixture = MarketExport {
        half_spread: 0.25,
        distractors: 3,
        rates_in_percent: true,
        ..MarketExport::default()
    };
    let run = |tag: &str| -> Vec<Vec<u8>> {
        let dir = root.path().join(tag);
        let sim = simulate(&cfg, &dir.join("sim")).unwrap();
        let mut c = cfg.clone();
        c.data.options = Some(sim.market.options.clone());
        c.data.spot = Some(sim.market.spot.clone());
        c.data.rates = Some(sim.market.rates.clone());
        let ckpt = train_offline(&c, &dir.join("train")).unwrap();
        evaluate(&ckpt, None, &dir.join("eval"), Exec::default()).unwrap();
        [
            "eval/table.csv",
            "eval/results.csv",
            "eval/coverage.csv",
            "train/trajectory.csv",
        ]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).unwrap())
        .collect()
    };
    let a = run("a");
    let b = run("b");
    let table = String::from_utf8(a[0].clone()).unwrap();
    let header = table.lines().next().unwrap_or_default().to_string();
    let shaped = header == "model,k=1,k=5,k=10,k=15,k=20" && table.lines().count() == 3;
    outcome(
        shaped && a == b,
        format!(
            "table header `{header}`, {} model rows, identical across runs: {}",
            table.lines().count() - 1,
            a == b
        ),
    )
}

pub fn online_sanity() -> Outcome {
    let start = Instant::now();
    let data = generate_dataset(&SyntheticConfig::stationary(0))
        .unwrap()
        .to_series(10)
        .unwrap();
    let (train, val, _) = data.split(1, 0).unwrap();
    let mut init = init_reservoir(&InitConfig {
        p: 4,
        bias_fill: Some(-2.3),
        ..InitConfig::default()
    })
    .unwrap();
    init.v = 1.0;
    let b0 = initial_belief(&train, 4, 1e-4).unwrap();
    let fit = online_fit(&train, &val, &init, &b0, &OnlineConfig::default()).unwrap();
    let learn_secs = start.elapsed().as_secs_f64();
    let frozen_cfg = OnlineConfig {
        param_innovation_var: 0.0,
        param_prior_var: 0.0,
        max_passes: 1,
        ..OnlineConfig::default()
    };
    let frozen = online_fit(&train, &val, &init, &b0, &frozen_cfg).unwrap();
    let plain = forward_filter(
        &init,
        &OptionObservation { v: init.v },
        &b0,
        &train.inputs,
        &train.batches,
        &UtConfig::default(),
    )
    .unwrap();
    let mut worst = 0.0f64;
    for (a, b) in frozen.filtered.iter().zip(&plain) {
        let m = frozen.layout.state_marginal(&a.posterior).unwrap();
        worst = worst
            .max(vec_diff(m.mean(), b.posterior.mean()))
            .max(mat_diff(m.cov(), b.posterior.cov()));
    }
    let secs = start.elapsed().as_secs_f64();
    let rho = fit.passes[fit.best_pass]
        .spectral_radius
        .last()
        .copied()
        .unwrap_or(f64::NAN);
    outcome(
        worst <= 1e-8 && secs < 300.0 && fit.filtered.len() == 199,
        format!(
            "{} steps, {} passes in {learn_secs:.1}s (final spectral radius {rho:.3}); frozen-block gap {worst:.1e}",
            fit.filtered.len() + 1,
            fit.passes.len()
        ),
    )
}
