//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's numerical kernels.

#![allow(dead_code)]

use hist_closure::mlp::ClosureParams;
use hist_closure::truth::{make_observations, simulate_truth, FullState, ObservationSet, TruthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Both tendencies of the two-scale model by direct summation, with 1-based
/// indices mirroring the textbook form.
pub fn truth_rhs_oracle(x: &[f64], y: &[f64], cfg: &TruthConfig) -> (Vec<f64>, Vec<f64>) {
    let kk = cfg.k as isize;
    let jj = cfg.j as isize;
    let n_fast = kk * jj;
    let xk = |k: isize| x[((k - 1).rem_euclid(kk)) as usize];
    let yj = |j: isize| y[((j - 1).rem_euclid(n_fast)) as usize];
    let mut dx = Vec::new();
    for k in 1..=kk {
        let mut s = 0.0;
        for j in (jj * (k - 1) + 1)..=(k * jj) {
            s += yj(j);
        }
        dx.push(-xk(k - 1) * (xk(k - 2) - xk(k + 1)) - xk(k) + cfg.forcing - cfg.h * cfg.c / cfg.b * s);
    }
    let mut dy = Vec::new();
    for j in 1..=n_fast {
        let k = (j - 1) / jj + 1;
        dy.push(-cfg.c * cfg.b * yj(j + 1) * (yj(j + 2) - yj(j - 1)) - cfg.c * yj(j) + cfg.h * cfg.c / cfg.b * xk(k));
    }
    (dx, dy)
}

/// Network forward pass computed from the flat layout with explicit loops.
pub fn mlp_oracle(params: &ClosureParams, input: &[f64]) -> Vec<f64> {
    let a = params.arch;
    let mut dims = vec![a.input_dim];
    dims.extend(std::iter::repeat_n(a.hidden_width, a.hidden_layers));
    dims.push(a.output_dim);
    let mut off = 0;
    let mut h = input.to_vec();
    for l in 0..dims.len() - 1 {
        let (n_in, n_out) = (dims[l], dims[l + 1]);
        let w = &params.flat[off..off + n_in * n_out];
        let b = &params.flat[off + n_in * n_out..off + n_in * n_out + n_out];
        off += n_in * n_out + n_out;
        let mut z = vec![0.0; n_out];
        for o in 0..n_out {
            let mut acc = b[o];
            for i in 0..n_in {
                acc += w[o * n_in + i] * h[i];
            }
            z[o] = acc;
        }
        let last = l == dims.len() - 2;
        h = if last {
            z
        } else {
            match a.activation {
                hist_closure::mlp::Activation::Tanh => z.iter().map(|v| v.tanh()).collect(),
                hist_closure::mlp::Activation::Relu => z.iter().map(|v| v.max(0.0)).collect(),
            }
        };
    }
    h
}

/// `f(X, lags)` of the closed slow system with a site-local closure: the
/// network sees `(X_k, X_k(t-τ_1), …)` at every site.
pub fn closed_rhs_oracle(params: &ClosureParams, forcing: f64, x: &[f64], lags: &[&[f64]]) -> Vec<f64> {
    let kk = x.len();
    (0..kk)
        .map(|k| {
            let km1 = x[(k + kk - 1) % kk];
            let km2 = x[(k + kk - 2) % kk];
            let kp1 = x[(k + 1) % kk];
            let mut input = vec![x[k]];
            input.extend(lags.iter().map(|l| l[k]));
            -km1 * (km2 - kp1) - x[k] + forcing + mlp_oracle(params, &input)[0]
        })
        .collect()
}

fn axpy(x: &[f64], a: f64, r: &[f64]) -> Vec<f64> {
    x.iter().zip(r).map(|(x, r)| x + a * r).collect()
}

/// History step written stage by stage. `w(o)` is the state at `t - oΔt`;
/// `window[0]` is the newest.
pub fn dde_step_oracle(params: &ClosureParams, forcing: f64, delta_t: f64, n_h: usize, window: &[Vec<f64>]) -> Vec<f64> {
    let h = 2.0 * delta_t;
    let w = |o: usize| window[o].as_slice();
    let x = w(0);
    // r1: X(t) with X(t-2Δt), …, X(t-2n_hΔt)
    let lags1: Vec<&[f64]> = (1..=n_h).map(|i| w(2 * i)).collect();
    let r1: Vec<f64> = closed_rhs_oracle(params, forcing, x, &lags1).iter().map(|v| h * v).collect();
    // r2, r3: midpoint lags X(t-Δt), X(t-3Δt), …, X(t-(2n_h-1)Δt)
    let lags_mid: Vec<&[f64]> = (1..=n_h).map(|i| w(2 * i - 1)).collect();
    let s2 = axpy(x, 0.5, &r1);
    let r2: Vec<f64> = closed_rhs_oracle(params, forcing, &s2, &lags_mid).iter().map(|v| h * v).collect();
    let s3 = axpy(x, 0.5, &r2);
    let r3: Vec<f64> = closed_rhs_oracle(params, forcing, &s3, &lags_mid).iter().map(|v| h * v).collect();
    // r4: X(t)+r3 with X(t), X(t-2Δt), …, X(t-(2n_h-2)Δt)
    let lags4: Vec<&[f64]> = (0..n_h).map(|i| w(2 * i)).collect();
    let s4 = axpy(x, 1.0, &r3);
    let r4: Vec<f64> = closed_rhs_oracle(params, forcing, &s4, &lags4).iter().map(|v| h * v).collect();
    (0..x.len())
        .map(|k| x[k] + (r1[k] + 2.0 * r2[k] + 2.0 * r3[k] + r4[k]) / 6.0)
        .collect()
}

/// Classical RK4 step of the instantaneous closed system.
pub fn ode_step_oracle(params: &ClosureParams, forcing: f64, delta_t: f64, x: &[f64]) -> Vec<f64> {
    let f = |s: &[f64]| -> Vec<f64> { closed_rhs_oracle(params, forcing, s, &[]).iter().map(|v| delta_t * v).collect() };
    let r1 = f(x);
    let r2 = f(&axpy(x, 0.5, &r1));
    let r3 = f(&axpy(x, 0.5, &r2));
    let r4 = f(&axpy(x, 1.0, &r3));
    (0..x.len())
        .map(|k| x[k] + (r1[k] + 2.0 * r2[k] + 2.0 * r3[k] + r4[k]) / 6.0)
        .collect()
}

/// Central finite difference of `f` along coordinate `i`.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    let mut m = x.to_vec();
    p[i] += h;
    m[i] -= h;
    (f(&p) - f(&m)) / (2.0 * h)
}

/// Relative error with an absolute floor.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// A small attractor-state run of the standard system and its observations.
pub fn small_dataset(t_end: f64, noise: f64, seed: u64) -> (TruthConfig, hist_closure::truth::TruthTrajectory, ObservationSet) {
    let cfg = TruthConfig {
        t_end,
        seed,
        ..TruthConfig::default()
    };
    let x0 = hist_closure::truth::attractor_initial_state(&cfg).unwrap();
    let traj = simulate_truth(&cfg, &x0).unwrap();
    let obs = make_observations(&traj, 2, noise, seed + 100).unwrap();
    (cfg, traj, obs)
}

pub fn random_full_state(cfg: &TruthConfig, seed: u64) -> FullState {
    let mut r = rng(seed);
    FullState {
        x: uniform_vec(&mut r, cfg.k, -5.0, 10.0),
        y: uniform_vec(&mut r, cfg.fast_dim(), -1.0, 1.0),
    }
}

/// Noise-free observation set built directly from `[n × K]` rows.
pub fn obs_from_rows(states: ndarray::Array2<f64>, delta_t: f64) -> ObservationSet {
    let n = states.nrows();
    let k = states.ncols();
    ObservationSet {
        times: (0..n).map(|i| i as f64 * delta_t).collect(),
        states,
        noise_fraction: 0.0,
        per_var_std: vec![1.0; k],
        seed: 0,
        stride: 2,
        delta_t,
    }
}

/// Largest relative error over components where either value exceeds
/// `floor` in magnitude.
pub fn max_rel_err_above(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(x, y)| x.abs() > floor || y.abs() > floor)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()))
        .fold(0.0, f64::max)
}
