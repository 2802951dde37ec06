//! Reverse-mode against finite-difference checks.

use crate::common::*;
use hist_closure::closure::ClosureConfig;
use hist_closure::hmc::{potential_energy, HmcConfig, PosteriorPotential, PrecisionParams};
use hist_closure::mlp::{Activation, ClosureParams, MlpArchitecture};
use hist_closure::train::loss_and_grad;
use ndarray::Array2;

pub const FD_STEP: f64 = 1e-5;

pub const DT_OBS: f64 = 0.01;

pub fn random_params(arch: MlpArchitecture, seed: u64) -> ClosureParams {
    let mut r = rng(seed);
    let flat = uniform_vec(&mut r, arch.param_count(), -0.6, 0.6);
    ClosureParams::new(arch, flat).unwrap()
}

/// Worst gradient mismatch through the network for one seeded case:
/// objective = Σ outputs over a small batch of inputs.
pub fn mlp_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let input_dim = 1 + (seed as usize % 4);
    let arch = MlpArchitecture {
        activation: if seed % 5 == 4 { Activation::Relu } else { Activation::Tanh },
        ..MlpArchitecture::new(input_dim, 1 + seed as usize % 3, 6, 1)
    };
    let p = random_params(arch, seed + 100);
    let rows = 3;
    let x = Array2::from_shape_vec((rows, input_dim), uniform_vec(&mut r, rows * input_dim, -2.0, 2.0)).unwrap();

    let (_, tape) = p.forward_taped(x.view());
    let mut grad = vec![0.0; p.len()];
    p.backward(&tape, Array2::ones((rows, 1)).view(), &mut grad);

    let f = |flat: &[f64]| {
        let q = ClosureParams::new(arch, flat.to_vec()).unwrap();
        x.rows().into_iter().map(|row| mlp_oracle(&q, &row.to_vec())[0]).sum::<f64>()
    };
    let fd: Vec<f64> = (0..p.len()).map(|i| central_diff(&f, &p.flat, i, FD_STEP)).collect();
    max_rel_err_above(&grad, &fd, 1e-8)
}

/// One DDE step from a random window scored against a random target. The
/// library gradient is compared with finite differences of the
/// independently transcribed step.
pub fn dde_step_gradient_error(seed: u64) -> f64 {
    let n_h = 1 + seed as usize % 3;
    let k = 6;
    let mut r = rng(seed + 500);
    let win = 2 * n_h + 2;
    let rows = Array2::from_shape_vec((win + 1, k), uniform_vec(&mut r, (win + 1) * k, -4.0, 8.0)).unwrap();
    let obs = obs_from_rows(rows.clone(), DT_OBS);
    let cfg = ClosureConfig::history(n_h, DT_OBS, 15.0);
    let arch = MlpArchitecture::new(n_h + 1, 2, 8, 1);
    let p = random_params(arch, seed + 600);
    let (_, grad) = loss_and_grad(&p, &obs, &[0], 1, &cfg).unwrap();

    // The first emitted tick steps from the window's second-newest row.
    let window: Vec<Vec<f64>> = (0..win - 1).map(|o| rows.row(win - 2 - o).to_vec()).collect();
    let target = rows.row(win).to_vec();
    let f = |flat: &[f64]| {
        let q = ClosureParams::new(arch, flat.to_vec()).unwrap();
        let next = dde_step_oracle(&q, 15.0, DT_OBS, n_h, &window);
        next.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / k as f64
    };
    let fd: Vec<f64> = (0..p.len()).map(|i| central_diff(&f, &p.flat, i, FD_STEP)).collect();
    max_rel_err_above(&grad, &fd, 1e-8)
}

/// Potential-energy gradient on 10 network coordinates and both log
/// precisions for one seeded case.
pub fn potential_gradient_error(seed: u64) -> f64 {
    let (_, _, obs) = small_dataset(0.3, 0.03, 40 + seed);
    let cfg = if seed % 2 == 0 {
        ClosureConfig::history(2, DT_OBS, 15.0)
    } else {
        ClosureConfig::instantaneous(DT_OBS, 15.0)
    };
    let arch = MlpArchitecture::new(cfg.input_dim(8), 1, 8, 1);
    let p = random_params(arch, seed + 900);
    let prec = PrecisionParams {
        log_gamma: 1.0 + 0.2 * seed as f64,
        log_lambda: 0.5 + 0.05 * seed as f64,
    };
    let hmc = HmcConfig {
        alpha1: 1.0 + (seed % 3) as f64,
        beta1: 1.5,
        alpha2: 2.0,
        beta2: 0.5,
        ..HmcConfig::default()
    };
    let q = PosteriorPotential::join(&p.flat, prec);
    let (_, grad) = potential_energy(&q, &obs, &cfg, arch, &hmc).unwrap();
    let f = |q: &[f64]| potential_energy(q, &obs, &cfg, arch, &hmc).unwrap().0;
    let n = arch.param_count();
    let mut coords: Vec<usize> = (0..10).map(|i| (i * 7 + seed as usize) % n).collect();
    coords.extend([n, n + 1]);
    let (a, b): (Vec<f64>, Vec<f64>) = coords
        .iter()
        .map(|&i| (grad[i], central_diff(&f, &q, i, FD_STEP)))
        .unzip();
    max_rel_err_above(&a, &b, 1e-8)
}
