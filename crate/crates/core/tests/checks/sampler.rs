//! Sampler checks on a standard Normal target.

use crate::common::*;
use hist_closure::hmc::{kinetic_energy, leapfrog, sample, GaussianPotential, Potential, SamplerSettings};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

pub const DIM: usize = 5;

pub fn gaussian_settings(step_size: f64, leapfrog_steps: usize, n_steps: usize, seed: u64) -> SamplerSettings {
    SamplerSettings {
        step_size,
        leapfrog_steps,
        n_steps,
        seed,
    }
}

/// Kolmogorov–Smirnov statistic of `xs` against the standard Normal.
pub fn ks_statistic(xs: &[f64]) -> f64 {
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = unit.cdf(x);
            (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max)
}

/// Outcome of the 5-D standard Normal calibration run.
#[derive(Debug)]
pub struct Calibration {
    pub max_mean_error: f64,
    pub max_variance_error: f64,
    pub max_ks: f64,
    pub ks_critical: f64,
    pub acceptance: f64,
}

pub fn gaussian_calibration() -> Calibration {
    let pot = GaussianPotential::standard(DIM);
    let chain = sample(&pot, &[0.5; DIM], &gaussian_settings(0.25, 8, 10_000, 17)).unwrap();
    let kept: Vec<&Vec<f64>> = chain.positions[chain.positions.len() / 4..].iter().collect();
    let n = kept.len() as f64;
    let mut max_mean_error: f64 = 0.0;
    let mut max_variance_error: f64 = 0.0;
    let mut max_ks: f64 = 0.0;
    // Thinned draws are close to independent for the KS test.
    let thin = 5;
    let mut n_ks = 0;
    for d in 0..DIM {
        let xs: Vec<f64> = kept.iter().map(|q| q[d]).collect();
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        max_mean_error = max_mean_error.max(mean.abs());
        max_variance_error = max_variance_error.max((var - 1.0).abs());
        let thinned: Vec<f64> = xs.iter().step_by(thin).copied().collect();
        n_ks = thinned.len();
        max_ks = max_ks.max(ks_statistic(&thinned));
    }
    Calibration {
        max_mean_error,
        max_variance_error,
        max_ks,
        ks_critical: 1.628 / (n_ks as f64).sqrt(),
        acceptance: chain.acceptance_rate(),
    }
}

pub fn leapfrog_reversibility_error() -> f64 {
    let pot = GaussianPotential::standard(DIM);
    let mut r = rng(3);
    let q0 = uniform_vec(&mut r, DIM, -2.0, 2.0);
    let v0 = uniform_vec(&mut r, DIM, -2.0, 2.0);
    let fwd = leapfrog(&pot, &q0, &v0, 0.1, 25).unwrap().unwrap();
    let back_v: Vec<f64> = fwd.v.iter().map(|x| -x).collect();
    let back = leapfrog(&pot, &fwd.q, &back_v, 0.1, 25).unwrap().unwrap();
    q0.iter()
        .zip(&back.q)
        .chain(v0.iter().zip(back.v.iter().map(|x| -x).collect::<Vec<_>>().iter()))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Ratio of mean |ΔH| at step ε to that at ε/2 over a fixed trajectory
/// length; second order integration gives about 4.
pub fn energy_error_halving_factor() -> f64 {
    let pot = GaussianPotential::standard(DIM);
    let mut r = rng(11);
    let mean_dh = |eps: f64, steps: usize, r: &mut rand_chacha::ChaCha8Rng| {
        let mut total = 0.0;
        for _ in 0..100 {
            let q: Vec<f64> = (0..DIM).map(|_| r.random_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..DIM).map(|_| r.random_range(-2.0..2.0)).collect();
            let h0 = pot.energy(&q).unwrap() + kinetic_energy(&v);
            let end = leapfrog(&pot, &q, &v, eps, steps).unwrap().unwrap();
            total += (end.energy + kinetic_energy(&end.v) - h0).abs();
        }
        total / 100.0
    };
    let coarse = mean_dh(0.1, 10, &mut r);
    let mut r = rng(11);
    let fine = mean_dh(0.05, 20, &mut r);
    coarse / fine
}
