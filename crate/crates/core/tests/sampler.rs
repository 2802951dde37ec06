mod checks;
mod common;

use checks::sampler::*;
use common::*;
use hist_closure::closure::{ClosureConfig, Variant};
use hist_closure::hmc::{
    log_likelihood, log_prior, potential_energy, run_chain, sample, GaussianPotential,
    HmcConfig, Potential, PosteriorPotential, PrecisionParams, SamplerSettings,
};
use hist_closure::mlp::{ClosureParams, MlpArchitecture};
use hist_closure::train::{residual_variance, TrainReport};
use ndarray::Array2;

#[test]
fn calibrated_on_standard_normal() {
    let c = gaussian_calibration();
    assert!(c.max_mean_error < 0.1, "{c:?}");
    assert!(c.max_variance_error < 0.15, "{c:?}");
    assert!(c.max_ks < c.ks_critical, "{c:?}");
    assert!(c.acceptance > 0.5, "{c:?}");
}

#[test]
fn leapfrog_is_reversible() {
    let e = leapfrog_reversibility_error();
    assert!(e < 1e-12, "{e}");
}

#[test]
fn energy_error_is_second_order() {
    let f = energy_error_halving_factor();
    assert!(f >= 3.5, "{f}");
}

#[test]
fn huge_step_is_mostly_rejected() {
    let pot = GaussianPotential::standard(DIM);
    let chain = sample(&pot, &[0.0; DIM], &gaussian_settings(10.0, 10, 500, 4)).unwrap();
    assert!(chain.acceptance_rate() < 0.1, "{}", chain.acceptance_rate());
}

#[test]
fn sampler_is_seeded() {
    let pot = GaussianPotential::standard(DIM);
    let s = gaussian_settings(0.3, 5, 200, 8);
    let a = sample(&pot, &[0.1; DIM], &s).unwrap();
    assert_eq!(a, sample(&pot, &[0.1; DIM], &s).unwrap());
    let b = sample(&pot, &[0.1; DIM], &SamplerSettings { seed: 9, ..s }).unwrap();
    assert_ne!(a.positions, b.positions);
}

#[test]
fn sampler_rejects_bad_start() {
    struct Wall;
    impl Potential for Wall {
        fn dim(&self) -> usize {
            1
        }
        fn energy_and_grad(&self, q: &[f64]) -> hist_closure::Result<Option<(f64, Vec<f64>)>> {
            Ok((q[0] > 0.0).then(|| (q[0], vec![1.0])))
        }
    }
    assert!(sample(&Wall, &[-1.0], &gaussian_settings(0.1, 3, 10, 0)).is_err());
    // Proposals leaving the support are rejected, never accepted.
    let c = sample(&Wall, &[0.5], &gaussian_settings(0.5, 3, 300, 0)).unwrap();
    assert!(c.positions.iter().all(|q| q[0] > 0.0));
}

fn ten_window_case(seed: u64) -> (hist_closure::truth::ObservationSet, ClosureConfig, ClosureParams) {
    let n_h = 2;
    let k = 8;
    let n_rows = 2 * n_h + 2 + 10;
    let mut r = rng(seed);
    let rows = Array2::from_shape_vec((n_rows, k), uniform_vec(&mut r, n_rows * k, -4.0, 8.0)).unwrap();
    let obs = obs_from_rows(rows, 0.01);
    let cfg = ClosureConfig::history(n_h, 0.01, 15.0);
    let arch = MlpArchitecture::new(n_h + 1, 1, 6, 1);
    let p = ClosureParams::glorot(arch, seed + 1);
    (obs, cfg, p)
}

#[test]
fn log_likelihood_matches_density_sum() {
    for seed in 0..3 {
        let (obs, cfg, p) = ten_window_case(seed);
        let log_gamma = 0.7;
        let sigma = (-0.5 * log_gamma as f64).exp();
        let unit = statrs::distribution::Normal::new(0.0, sigma).unwrap();
        let n_h = cfg.history.n_h;
        let mut want = 0.0;
        let mut count = 0;
        for j in 0..10 {
            // Row j+2n_h+2 is one 2Δt step after row j+2n_h.
            let window: Vec<Vec<f64>> = (0..=2 * n_h).map(|o| obs.states.row(j + 2 * n_h - o).to_vec()).collect();
            let pred = dde_step_oracle(&p, 15.0, 0.01, n_h, &window);
            for (a, b) in obs.states.row(j + 2 * n_h + 2).iter().zip(&pred) {
                want += statrs::distribution::Continuous::ln_pdf(&unit, a - b);
                count += 1;
            }
        }
        assert_eq!(count, 80);
        let got = log_likelihood(&p, log_gamma, &obs, &cfg).unwrap();
        assert!((got - want).abs() <= 1e-12 * want.abs(), "{got} vs {want}");
    }
}

#[test]
fn log_prior_matches_direct_sum() {
    let mut r = rng(5);
    let theta = uniform_vec(&mut r, 40, -2.0, 2.0);
    let prec = PrecisionParams {
        log_gamma: 1.3,
        log_lambda: 0.4,
    };
    let cfg = HmcConfig {
        alpha1: 2.0,
        beta1: 1.5,
        alpha2: 3.0,
        beta2: 0.5,
        ..HmcConfig::default()
    };
    let lam = 0.4f64.exp();
    let laplace: f64 = theta.iter().map(|t| (lam / 2.0).ln() - lam * t.abs()).sum();
    let gamma_ln = |x: f64, a: f64, b: f64| {
        let g = statrs::distribution::Gamma::new(a, b).unwrap();
        statrs::distribution::Continuous::ln_pdf(&g, x)
    };
    let want = laplace + gamma_ln(0.4, 2.0, 1.5) + gamma_ln(1.3, 3.0, 0.5);
    let got = log_prior(&theta, prec, &cfg);
    assert!((got - want).abs() <= 1e-12 * want.abs(), "{got} vs {want}");
}

fn toy_report(obs: &hist_closure::truth::ObservationSet, cfg: &ClosureConfig) -> TrainReport {
    let arch = MlpArchitecture::new(cfg.input_dim(8), 1, 6, 1);
    let params = ClosureParams::glorot(arch, 2);
    TrainReport {
        variant: cfg.variant,
        loss_curve: vec![],
        phase1_iters: 0,
        residual_variance: residual_variance(&params, obs, cfg).unwrap(),
        final_params: params,
    }
}

#[test]
fn stored_log_posterior_round_trips() {
    let (_, _, obs) = small_dataset(0.5, 0.03, 6);
    for variant in [Variant::History, Variant::Instantaneous] {
        let cfg = match variant {
            Variant::History => ClosureConfig::history(2, 0.01, 15.0),
            Variant::Instantaneous => ClosureConfig::instantaneous(0.01, 15.0),
        };
        let report = toy_report(&obs, &cfg);
        let hmc = HmcConfig {
            step_size: 2e-4,
            chain_length: 30,
            seed: 3,
            ..HmcConfig::default()
        };
        let chain = run_chain(&report, &obs, &cfg, &hmc).unwrap();
        assert_eq!(chain.len(), 30);
        assert!(chain.acceptance_rate > 0.0 && chain.acceptance_rate <= 1.0);
        for s in chain.samples.iter().filter(|s| s.accepted) {
            let q = PosteriorPotential::join(&s.theta, s.prec);
            let u = potential_energy(&q, &obs, &cfg, report.final_params.arch, &hmc).unwrap().0;
            assert!((s.log_posterior + u).abs() <= 1e-10 * u.abs().max(1.0));
        }
        assert_eq!(chain, run_chain(&report, &obs, &cfg, &hmc).unwrap());
    }
}

#[test]
fn negative_initial_log_gamma_is_rejected() {
    let (_, _, obs) = small_dataset(0.3, 0.03, 6);
    let cfg = ClosureConfig::history(2, 0.01, 15.0);
    let mut report = toy_report(&obs, &cfg);
    report.residual_variance = 2.0;
    let err = run_chain(&report, &obs, &cfg, &HmcConfig::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
