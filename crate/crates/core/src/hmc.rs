//! Hamiltonian Monte Carlo over the closure weights and the two log
//! precisions.
//!
//! The sampler works on any [`Potential`]; [`PosteriorPotential`] supplies
//! the closure posterior, with position vector `[θ_1..θ_N, log γ, log λ]`.
//!
//! ```text
//! log p(D | θ, γ) = (D/2) log γ − (γ/2) Σ‖r‖² − (D/2) log 2π
//! log p(θ | λ)    = N log(λ/2) − λ Σ|θ_i|
//! log p(log λ)    = Gam(log λ; α₁, β₁)
//! log p(log γ)    = Gam(log γ; α₂, β₂)
//! U               = −(log likelihood + log prior),   V = ½‖v‖²
//! ```
//!
//! The Gamma densities are taken literally on the log-precisions, so both
//! must stay non-negative; positions outside that support have infinite
//! energy and are always rejected.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::closure::ClosureConfig;
use crate::error::{Error, Result};
use crate::mlp::{ClosureParams, MlpArchitecture};
use crate::train::{one_step_sse, one_step_sse_grad, TrainReport};
use crate::truth::ObservationSet;

/// Fraction of the chain discarded before computing posterior statistics.
pub const BURN_IN_FRACTION: f64 = 0.25;

/// Steps per window of the low-acceptance diagnostic.
const ACCEPTANCE_WINDOW: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionParams {
    pub log_gamma: f64,
    pub log_lambda: f64,
}

impl PrecisionParams {
    pub fn gamma(&self) -> f64 {
        self.log_gamma.exp()
    }

    pub fn lambda(&self) -> f64 {
        self.log_lambda.exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub chain_length: usize,
    pub alpha1: f64,
    pub beta1: f64,
    pub alpha2: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-4,
            leapfrog_steps: 10,
            chain_length: 4000,
            alpha1: 1.0,
            beta1: 1.0,
            alpha2: 1.0,
            beta2: 1.0,
            seed: 0,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("hmc.step_size", "must be positive"));
        }
        if self.leapfrog_steps == 0 {
            return Err(Error::config("hmc.leapfrog_steps", "must be at least 1"));
        }
        if self.chain_length == 0 {
            return Err(Error::config("hmc.chain_length", "must be at least 1"));
        }
        for (name, v) in [
            ("hmc.alpha1", self.alpha1),
            ("hmc.beta1", self.beta1),
            ("hmc.alpha2", self.alpha2),
            ("hmc.beta2", self.beta2),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, "Gamma shape and rate must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmcSample {
    pub theta: Vec<f64>,
    pub prec: PrecisionParams,
    pub log_posterior: f64,
    /// Whether this step's proposal was accepted (otherwise the sample
    /// repeats the previous state).
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub samples: Vec<HmcSample>,
    pub acceptance_rate: f64,
    pub config: HmcConfig,
}

impl Chain {
    /// A one-sample chain holding a point estimate.
    pub fn single(theta: Vec<f64>, prec: PrecisionParams, log_posterior: f64, config: HmcConfig) -> Self {
        Self {
            samples: vec![HmcSample {
                theta,
                prec,
                log_posterior,
                accepted: true,
            }],
            acceptance_rate: 1.0,
            config,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples left after dropping the first `burn_in` fraction and keeping
    /// every `thinning`-th of the rest.
    pub fn retained(&self, burn_in: f64, thinning: usize) -> Vec<&HmcSample> {
        let start = ((self.samples.len() as f64) * burn_in.clamp(0.0, 1.0)).floor() as usize;
        self.samples[start.min(self.samples.len())..]
            .iter()
            .step_by(thinning.max(1))
            .collect()
    }
}

/// A differentiable potential energy `U(q)`.
pub trait Potential {
    fn dim(&self) -> usize;

    /// `U(q)` and `∇U(q)`, or `None` where `U` is infinite or cannot be
    /// evaluated (out of support, blowup).
    fn energy_and_grad(&self, q: &[f64]) -> Result<Option<(f64, Vec<f64>)>>;

    fn energy(&self, q: &[f64]) -> Result<f64> {
        Ok(self.energy_and_grad(q)?.map_or(f64::INFINITY, |(u, _)| u))
    }
}

/// `U(q) = ½‖q − μ‖²`: standard Normal target centred on `mean`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPotential {
    pub mean: Vec<f64>,
}

impl GaussianPotential {
    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim] }
    }
}

impl Potential for GaussianPotential {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn energy_and_grad(&self, q: &[f64]) -> Result<Option<(f64, Vec<f64>)>> {
        let g: Vec<f64> = q.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(Some((0.5 * g.iter().map(|x| x * x).sum::<f64>(), g)))
    }
}

/// End point of a leapfrog trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct LeapfrogEnd {
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub energy: f64,
    pub grad: Vec<f64>,
}

/// `steps` leapfrog steps (half kick, drift, half kick) with unit mass.
/// `None` if the trajectory leaves the region where `U` is finite.
pub fn leapfrog<P: Potential + ?Sized>(
    pot: &P,
    q: &[f64],
    v: &[f64],
    step_size: f64,
    steps: usize,
) -> Result<Option<LeapfrogEnd>> {
    let Some((u, g)) = pot.energy_and_grad(q)? else {
        return Ok(None);
    };
    leapfrog_from(pot, q, v, u, g, step_size, steps)
}

fn leapfrog_from<P: Potential + ?Sized>(
    pot: &P,
    q: &[f64],
    v: &[f64],
    energy: f64,
    grad: Vec<f64>,
    eps: f64,
    steps: usize,
) -> Result<Option<LeapfrogEnd>> {
    if q.len() != pot.dim() || v.len() != pot.dim() {
        return Err(Error::config("hmc.position", "dimension differs from the potential"));
    }
    let mut q = q.to_vec();
    let mut v = v.to_vec();
    let (mut u, mut g) = (energy, grad);
    for _ in 0..steps {
        for (vi, gi) in v.iter_mut().zip(&g) {
            *vi -= 0.5 * eps * gi;
        }
        for (qi, vi) in q.iter_mut().zip(&v) {
            *qi += eps * vi;
        }
        match pot.energy_and_grad(&q)? {
            Some((un, gn)) if un.is_finite() && gn.iter().all(|x| x.is_finite()) => {
                u = un;
                g = gn;
            }
            _ => return Ok(None),
        }
        for (vi, gi) in v.iter_mut().zip(&g) {
            *vi -= 0.5 * eps * gi;
        }
    }
    Ok(Some(LeapfrogEnd { q, v, energy: u, grad: g }))
}

pub fn kinetic_energy(v: &[f64]) -> f64 {
    0.5 * v.iter().map(|x| x * x).sum::<f64>()
}

/// Sampler settings independent of the target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerSettings {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub n_steps: usize,
    pub seed: u64,
}

/// Raw chain over positions of a generic potential.
#[derive(Debug, Clone, PartialEq)]
pub struct RawChain {
    pub positions: Vec<Vec<f64>>,
    /// `U` at each stored position.
    pub energies: Vec<f64>,
    pub accepted: Vec<bool>,
}

impl RawChain {
    pub fn acceptance_rate(&self) -> f64 {
        if self.accepted.is_empty() {
            return 0.0;
        }
        self.accepted.iter().filter(|&&a| a).count() as f64 / self.accepted.len() as f64
    }
}

/// Runs `n_steps` HMC transitions from `q0`: fresh momentum, leapfrog,
/// Metropolis test on `H = U + V`.
pub fn sample<P: Potential + ?Sized>(pot: &P, q0: &[f64], s: &SamplerSettings) -> Result<RawChain> {
    if !(s.step_size > 0.0) {
        return Err(Error::config("hmc.step_size", "must be positive"));
    }
    let Some((mut u, mut g)) = pot.energy_and_grad(q0)? else {
        return Err(Error::config("hmc.init", "initial position has infinite potential energy"));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut q = q0.to_vec();
    let mut chain = RawChain {
        positions: Vec::with_capacity(s.n_steps),
        energies: Vec::with_capacity(s.n_steps),
        accepted: Vec::with_capacity(s.n_steps),
    };
    let mut window_accepts = 0usize;
    for step in 0..s.n_steps {
        let v: Vec<f64> = (0..q.len()).map(|_| rng.sample(StandardNormal)).collect();
        let h0 = u + kinetic_energy(&v);
        let end = leapfrog_from(pot, &q, &v, u, g.clone(), s.step_size, s.leapfrog_steps)?;
        // The uniform draw is made on every step so the random stream does
        // not depend on whether the proposal was valid.
        let log_u: f64 = rng.random::<f64>().ln();
        let accept = match end {
            Some(end) => {
                let h1 = end.energy + kinetic_energy(&end.v);
                if h1.is_finite() && log_u < h0 - h1 {
                    q = end.q;
                    u = end.energy;
                    g = end.grad;
                    true
                } else {
                    false
                }
            }
            None => false,
        };
        window_accepts += accept as usize;
        chain.positions.push(q.clone());
        chain.energies.push(u);
        chain.accepted.push(accept);
        if (step + 1) % ACCEPTANCE_WINDOW == 0 {
            let rate = window_accepts as f64 / ACCEPTANCE_WINDOW as f64;
            if rate < 0.01 {
                log::warn!(
                    "HMC acceptance {:.3} over steps {}..{}; consider a smaller step size",
                    rate,
                    step + 1 - ACCEPTANCE_WINDOW,
                    step + 1
                );
            }
            window_accepts = 0;
        }
    }
    Ok(chain)
}

/// Log density of `Gamma(α, β)` (shape, rate) at `x`; `-∞` outside the
/// support. With `α = 1` the density is finite at `x = 0`.
pub fn log_gamma_density(x: f64, alpha: f64, beta: f64) -> f64 {
    if x < 0.0 || (x == 0.0 && alpha < 1.0) || !x.is_finite() {
        return f64::NEG_INFINITY;
    }
    let log_x_term = if alpha == 1.0 { 0.0 } else { (alpha - 1.0) * x.ln() };
    alpha * beta.ln() - ln_gamma(alpha) + log_x_term - beta * x
}

fn d_log_gamma_density(x: f64, alpha: f64, beta: f64) -> f64 {
    if alpha == 1.0 {
        -beta
    } else {
        (alpha - 1.0) / x - beta
    }
}

/// Gaussian log likelihood of the single-step (teacher forced) predictions
/// over every window of `obs`; `-∞` if a step blows up.
pub fn log_likelihood(theta: &ClosureParams, log_gamma: f64, obs: &ObservationSet, cfg: &ClosureConfig) -> Result<f64> {
    match one_step_sse(theta, obs, cfg) {
        Ok((sse, d)) => Ok(gaussian_log_likelihood(sse, d, log_gamma)),
        Err(Error::Blowup { .. }) => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e),
    }
}

/// `(D/2) log γ − (γ/2)·sse − (D/2) log 2π`.
pub fn gaussian_log_likelihood(sse: f64, d: usize, log_gamma: f64) -> f64 {
    let d = d as f64;
    0.5 * d * log_gamma - 0.5 * log_gamma.exp() * sse - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
}

/// Laplace prior on `θ` plus Gamma priors on the log precisions.
pub fn log_prior(theta: &[f64], prec: PrecisionParams, cfg: &HmcConfig) -> f64 {
    let n = theta.len() as f64;
    let lambda = prec.lambda();
    let l1: f64 = theta.iter().map(|t| t.abs()).sum();
    n * (lambda / 2.0).ln() - lambda * l1
        + log_gamma_density(prec.log_lambda, cfg.alpha1, cfg.beta1)
        + log_gamma_density(prec.log_gamma, cfg.alpha2, cfg.beta2)
}

/// Negative log posterior of the closure over `[θ, log γ, log λ]`.
#[derive(Debug, Clone)]
pub struct PosteriorPotential<'a> {
    pub obs: &'a ObservationSet,
    pub closure: ClosureConfig,
    pub arch: MlpArchitecture,
    pub hmc: HmcConfig,
}

impl<'a> PosteriorPotential<'a> {
    pub fn new(obs: &'a ObservationSet, closure: ClosureConfig, arch: MlpArchitecture, hmc: HmcConfig) -> Self {
        Self { obs, closure, arch, hmc }
    }

    pub fn split<'q>(&self, q: &'q [f64]) -> (&'q [f64], PrecisionParams) {
        let n = self.arch.param_count();
        (
            &q[..n],
            PrecisionParams {
                log_gamma: q[n],
                log_lambda: q[n + 1],
            },
        )
    }

    pub fn join(theta: &[f64], prec: PrecisionParams) -> Vec<f64> {
        let mut q = theta.to_vec();
        q.push(prec.log_gamma);
        q.push(prec.log_lambda);
        q
    }
}

impl Potential for PosteriorPotential<'_> {
    fn dim(&self) -> usize {
        self.arch.param_count() + 2
    }

    fn energy_and_grad(&self, q: &[f64]) -> Result<Option<(f64, Vec<f64>)>> {
        if q.len() != self.dim() {
            return Err(Error::config("hmc.position", "dimension differs from the network"));
        }
        let (theta, prec) = self.split(q);
        let lp = log_prior(theta, prec, &self.hmc);
        if !lp.is_finite() {
            return Ok(None);
        }
        let params = ClosureParams::new(self.arch, theta.to_vec())?;
        let Some((sse, d, dsse)) = one_step_sse_grad(&params, self.obs, &self.closure)? else {
            return Ok(None);
        };
        let ll = gaussian_log_likelihood(sse, d, prec.log_gamma);
        let u = -(ll + lp);
        if !u.is_finite() {
            return Ok(None);
        }
        let gamma = prec.gamma();
        let lambda = prec.lambda();
        let n = theta.len() as f64;
        let l1: f64 = theta.iter().map(|t| t.abs()).sum();
        let mut grad: Vec<f64> = dsse
            .iter()
            .zip(theta)
            .map(|(ds, t)| 0.5 * gamma * ds + lambda * sign(*t))
            .collect();
        grad.push(-(0.5 * d as f64 - 0.5 * gamma * sse) - d_log_gamma_density(prec.log_gamma, self.hmc.alpha2, self.hmc.beta2));
        grad.push(-(n - lambda * l1) - d_log_gamma_density(prec.log_lambda, self.hmc.alpha1, self.hmc.beta1));
        Ok(Some((u, grad)))
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `U` and its gradient at `q = [θ, log γ, log λ]`; `(+∞, 0)` where the
/// posterior vanishes.
pub fn potential_energy(
    q: &[f64],
    obs: &ObservationSet,
    closure: &ClosureConfig,
    arch: MlpArchitecture,
    hmc: &HmcConfig,
) -> Result<(f64, Vec<f64>)> {
    let pot = PosteriorPotential::new(obs, *closure, arch, hmc.clone());
    Ok(pot
        .energy_and_grad(q)?
        .unwrap_or_else(|| (f64::INFINITY, vec![0.0; q.len()])))
}

/// Initial precisions from a deterministic fit: `γ = 1/residual_variance`,
/// `λ = 1`.
pub fn initial_precision(report: &TrainReport) -> Result<PrecisionParams> {
    if !(report.residual_variance > 0.0 && report.residual_variance.is_finite()) {
        return Err(Error::config("train.residual_variance", "must be positive to initialize γ"));
    }
    Ok(PrecisionParams {
        log_gamma: -report.residual_variance.ln(),
        log_lambda: 0.0,
    })
}

/// Samples the closure posterior starting from a deterministic fit.
pub fn run_chain(init: &TrainReport, obs: &ObservationSet, closure: &ClosureConfig, cfg: &HmcConfig) -> Result<Chain> {
    cfg.validate()?;
    closure.check_params(&init.final_params, obs.k())?;
    if init.final_params.flat.iter().any(|x| !x.is_finite()) {
        return Err(Error::config("hmc.init", "initial parameters must be finite"));
    }
    let prec = initial_precision(init)?;
    if prec.log_gamma < 0.0 {
        return Err(Error::config(
            "hmc.init",
            format!(
                "initial log γ = {:.3} lies outside the Gamma prior support; residual variance exceeds 1",
                prec.log_gamma
            ),
        ));
    }
    let arch = init.final_params.arch;
    let pot = PosteriorPotential::new(obs, *closure, arch, cfg.clone());
    let q0 = PosteriorPotential::join(&init.final_params.flat, prec);
    let raw = sample(
        &pot,
        &q0,
        &SamplerSettings {
            step_size: cfg.step_size,
            leapfrog_steps: cfg.leapfrog_steps,
            n_steps: cfg.chain_length,
            seed: cfg.seed,
        },
    )?;
    let acceptance_rate = raw.acceptance_rate();
    log::info!("HMC finished: {} steps, acceptance {acceptance_rate:.3}", cfg.chain_length);
    let samples = raw
        .positions
        .iter()
        .zip(&raw.energies)
        .zip(&raw.accepted)
        .map(|((q, &u), &accepted)| {
            let (theta, prec) = pot.split(q);
            HmcSample {
                theta: theta.to_vec(),
                prec,
                log_posterior: -u,
                accepted,
            }
        })
        .collect();
    Ok(Chain {
        samples,
        acceptance_rate,
        config: cfg.clone(),
    })
}
