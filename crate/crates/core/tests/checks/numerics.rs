//! Numerics checks shared by the numerics suite and the acceptance run.

use crate::common::*;
use hist_closure::closure::{dde_rk4_step, ClosureConfig, HistoryWindow};
use hist_closure::mlp::{Activation, ClosureParams, MlpArchitecture};
use hist_closure::truth::{integrate_truth, rk4_step, truth_rhs, SlowState, TruthConfig};

pub const DT_OBS: f64 = 0.01;

pub fn rk4_decay_error(h: f64) -> f64 {
    let n = (1.0 / h).round() as usize;
    let mut x = vec![1.0];
    for _ in 0..n {
        x = rk4_step(|s: &[f64], out: &mut [f64]| out[0] = -s[0], &x, h).unwrap();
    }
    (x[0] - (-1.0f64).exp()).abs()
}

/// Least-squares slope of log(error) against log(step).
pub fn rk4_order_slope() -> f64 {
    let steps: [f64; 3] = [0.1, 0.05, 0.025];
    let pts: Vec<(f64, f64)> = steps.iter().map(|&h| (h.ln(), rk4_decay_error(h).ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub fn truth_rhs_oracle_error() -> f64 {
    let cfg = TruthConfig::default();
    let state = random_full_state(&cfg, 0);
    let d = truth_rhs(&state, &cfg).unwrap();
    let (ox, oy) = truth_rhs_oracle(&state.x, &state.y, &cfg);
    d.x.iter()
        .zip(&ox)
        .chain(d.y.iter().zip(&oy))
        .map(|(a, b)| rel_err(*a, *b))
        .fold(0.0, f64::max)
}

/// Earliest blowup of the truth at the coarse step 0.02, started on the
/// attractor of the bundled configuration.
pub fn coarse_truth_divergence() -> Option<f64> {
    let cfg = TruthConfig {
        seed: 3,
        ..TruthConfig::default()
    };
    let x0 = hist_closure::truth::attractor_initial_state(&cfg).unwrap();
    let coarse = TruthConfig {
        dt: 0.02,
        t_end: 10.0,
        ..cfg
    };
    integrate_truth(&coarse, &x0).unwrap().blowup.map(|b| b.1)
}

pub fn params(input_dim: usize, seed: u64) -> ClosureParams {
    let arch = MlpArchitecture {
        activation: Activation::Tanh,
        ..MlpArchitecture::new(input_dim, 2, 16, 1)
    };
    let mut p = ClosureParams::glorot(arch, seed);
    // Nonzero biases so every parameter participates.
    let mut r = rng(seed + 1000);
    for (v, d) in p.flat.iter_mut().zip(uniform_vec(&mut r, arch.param_count(), -0.1, 0.1)) {
        *v += d;
    }
    p
}

pub fn random_window(seed: u64, len: usize, k: usize) -> HistoryWindow {
    let mut r = rng(seed);
    HistoryWindow {
        states: (0..len)
            .map(|o| SlowState {
                x: uniform_vec(&mut r, k, -5.0, 10.0),
                t: 3.0 - o as f64 * DT_OBS,
            })
            .collect(),
    }
}

/// Worst relative error of the library step against the stencil oracle.
pub fn dde_step_oracle_error(n_h: usize, cases: u64) -> f64 {
    let cfg = ClosureConfig::history(n_h, DT_OBS, 15.0);
    let mut worst: f64 = 0.0;
    for seed in 0..cases {
        let p = params(n_h + 1, 10 + seed);
        let w = random_window(20 + seed, 2 * n_h + 2, 8);
        let got = dde_rk4_step(&w, &p, &cfg).unwrap();
        let xs: Vec<Vec<f64>> = w.states.iter().map(|s| s.x.clone()).collect();
        let want = dde_step_oracle(&p, 15.0, DT_OBS, n_h, &xs);
        assert!((got.t - (w.states[0].t + 2.0 * DT_OBS)).abs() < 1e-12);
        for (a, b) in got.x.iter().zip(&want) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    worst
}

/// Poisons every window slot the stencil must not read and checks that the
/// step is finite and bitwise unchanged.
pub fn stencil_poisoning_holds() -> bool {
    let n_h = 2;
    let cfg = ClosureConfig::history(n_h, DT_OBS, 15.0);
    let p = params(n_h + 1, 3);
    let w = random_window(5, 2 * n_h + 2, 8);
    let clean = dde_rk4_step(&w, &p, &cfg).unwrap();
    let mut poisoned = w.clone();
    poisoned.states[2 * n_h + 1].x.fill(f64::NAN);
    match dde_rk4_step(&poisoned, &p, &cfg) {
        Ok(s) => s.x.iter().all(|v| v.is_finite()) && s.x == clean.x,
        Err(_) => false,
    }
}
