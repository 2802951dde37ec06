//! Deterministic training of the closure network on multi-step rollout
//! losses, using minibatch Adam in two phases: one-step rollouts first, then
//! deeper rollouts for online stability.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::closure::{advance, advance_taped, backprop, Buffer, Closure, ClosureConfig, NeuralClosure, Variant};
use crate::error::{Error, Result};
use crate::mlp::{ClosureParams, MlpArchitecture, Objective};
use crate::truth::ObservationSet;

/// Loss reported when a rollout blows up. Finite so that it can still be
/// logged and compared.
pub const BLOWUP_LOSS: f64 = 1e10;

/// Loss level counted as divergent by the training loop.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Consecutive divergent iterations that abort training.
pub const DIVERGENCE_PATIENCE: usize = 100;

/// Windows evaluated together when sweeping the whole data set.
const SWEEP_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Rollout depth (in `Δt` ticks) during phase 2.
    pub n_f: usize,
    /// Iterations at `n_f = 1`.
    pub phase1_iters: usize,
    /// Iterations at `n_f`.
    pub phase2_iters: usize,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    pub seed: u64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 512,
            n_f: 5,
            phase1_iters: 15_000,
            phase2_iters: 30_000,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.n_f == 0 {
            return Err(Error::config("train.n_f", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("train.adam_beta1", "Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        Ok(())
    }
}

/// Result of [`adam_train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    /// Minibatch loss at every iteration, phase 1 then phase 2.
    pub loss_curve: Vec<f64>,
    pub phase1_iters: usize,
    pub final_params: ClosureParams,
    /// Mean squared one-step residual over the whole training set at the
    /// final parameters.
    pub residual_variance: f64,
}

/// Number of start indices `j` whose window and `n_f`-tick rollout fit in a
/// series of `n_obs` points.
pub fn valid_starts(n_obs: usize, cfg: &ClosureConfig, n_f: usize) -> usize {
    (n_obs + 1).saturating_sub(cfg.window_len() + n_f)
}

fn check_batch(obs: &ObservationSet, cfg: &ClosureConfig, batch: &[usize], n_f: usize) -> Result<()> {
    if n_f == 0 {
        return Err(Error::config("n_f", "must be at least 1"));
    }
    if batch.is_empty() {
        return Err(Error::config("batch", "must not be empty"));
    }
    let n = valid_starts(obs.len(), cfg, n_f);
    if let Some(j) = batch.iter().find(|&&j| j >= n) {
        return Err(Error::config(
            "batch",
            format!("start index {j} leaves no room for the window and {n_f} rollout ticks ({n} valid)"),
        ));
    }
    Ok(())
}

/// Initial window buffer for every start index in `batch`: window entry `o`
/// is observation `j + o`.
fn batch_buffer(obs: &ObservationSet, cfg: &ClosureConfig, batch: &[usize]) -> Buffer {
    let k = obs.k();
    let init = (0..cfg.window_len())
        .map(|o| {
            let mut a = Array2::zeros((batch.len(), k));
            for (b, &j) in batch.iter().enumerate() {
                a.row_mut(b).assign(&obs.states.row(j + o));
            }
            a
        })
        .collect();
    let base_times = batch.iter().map(|&j| obs.times[j]).collect();
    Buffer::new(init, base_times)
}

fn batch_targets(obs: &ObservationSet, cfg: &ClosureConfig, batch: &[usize], tick: usize) -> Array2<f64> {
    let w = cfg.window_len();
    obs.states.select(Axis(0), &batch.iter().map(|j| j + w - 1 + tick).collect::<Vec<_>>())
}

/// Sum of squared residuals between emitted states and the observations.
fn sum_squared_residuals(obs: &ObservationSet, cfg: &ClosureConfig, batch: &[usize], buf: &Buffer) -> f64 {
    buf.emitted()
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let target = batch_targets(obs, cfg, batch, t + 1);
            (s - &target).mapv(|r| r * r).sum()
        })
        .sum()
}

/// Rollout loss for an arbitrary closure: each start `j` seeds a window from
/// the observations, the system is rolled out `n_f` ticks of `Δt`, and every
/// emitted state is compared with the observation at the same time. The
/// result is the squared error averaged over batch, ticks and sites.
///
/// For the history variant the window is the `2n_h + 2` observations from
/// `j`, and ticks alternate between the two interleaved `2Δt` chains. For the
/// instantaneous variant the window is the single observation `j`.
pub fn rollout_loss_with(
    closure: &dyn Closure,
    obs: &ObservationSet,
    batch: &[usize],
    n_f: usize,
    cfg: &ClosureConfig,
) -> Result<f64> {
    cfg.validate()?;
    check_batch(obs, cfg, batch, n_f)?;
    let stepper = cfg.stepper();
    let mut buf = batch_buffer(obs, cfg, batch);
    if let Some(tick) = advance(&stepper, closure, &mut buf, n_f) {
        log::warn!("rollout blew up at tick {tick} while evaluating the loss");
        return Ok(BLOWUP_LOSS);
    }
    let sse = sum_squared_residuals(obs, cfg, batch, &buf);
    Ok(sse / (batch.len() * n_f * obs.k()) as f64)
}

/// History-variant rollout loss of the neural closure.
pub fn loss_history(
    params: &ClosureParams,
    obs: &ObservationSet,
    batch: &[usize],
    n_f: usize,
    cfg: &ClosureConfig,
) -> Result<f64> {
    let cfg = ClosureConfig {
        variant: Variant::History,
        ..*cfg
    };
    cfg.check_params(params, obs.k())?;
    rollout_loss_with(&NeuralClosure::new(params, cfg.stencil), obs, batch, n_f, &cfg)
}

/// Instantaneous-variant rollout loss of the neural closure.
pub fn loss_instantaneous(
    params: &ClosureParams,
    obs: &ObservationSet,
    batch: &[usize],
    n_f: usize,
    cfg: &ClosureConfig,
) -> Result<f64> {
    let cfg = ClosureConfig {
        variant: Variant::Instantaneous,
        ..*cfg
    };
    cfg.check_params(params, obs.k())?;
    rollout_loss_with(&NeuralClosure::new(params, cfg.stencil), obs, batch, n_f, &cfg)
}

/// Rollout loss of the neural closure (variant taken from `cfg`) and its
/// gradient with respect to the flat parameters. A blowup yields
/// [`BLOWUP_LOSS`] with a zero gradient.
pub fn loss_and_grad(
    params: &ClosureParams,
    obs: &ObservationSet,
    batch: &[usize],
    n_f: usize,
    cfg: &ClosureConfig,
) -> Result<(f64, Vec<f64>)> {
    cfg.check_params(params, obs.k())?;
    check_batch(obs, cfg, batch, n_f)?;
    let stepper = cfg.stepper();
    let net = NeuralClosure::new(params, cfg.stencil);
    let mut buf = batch_buffer(obs, cfg, batch);
    let mut grad = vec![0.0; params.len()];
    let tapes = match advance_taped(&stepper, &net, &mut buf, n_f) {
        Ok(t) => t,
        Err(tick) => {
            log::warn!("rollout blew up at tick {tick} while evaluating the loss gradient");
            return Ok((BLOWUP_LOSS, grad));
        }
    };
    let norm = (batch.len() * n_f * obs.k()) as f64;
    let mut sse = 0.0;
    let adj: Vec<Array2<f64>> = buf
        .emitted()
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let r = s - &batch_targets(obs, cfg, batch, t + 1);
            sse += r.mapv(|v| v * v).sum();
            r * (2.0 / norm)
        })
        .collect();
    backprop(&stepper, &net, &buf, &tapes, adj, &mut grad);
    Ok((sse / norm, grad))
}

/// Sum of squared one-step residuals over every valid start in the data set
/// (`n_f = 1`, teacher forcing), with the number of scalar residuals.
pub fn one_step_sse(params: &ClosureParams, obs: &ObservationSet, cfg: &ClosureConfig) -> Result<(f64, usize)> {
    cfg.check_params(params, obs.k())?;
    let n = valid_starts(obs.len(), cfg, 1);
    if n == 0 {
        return Err(Error::config("observations", "too short for a single window"));
    }
    let net = NeuralClosure::new(params, cfg.stencil);
    let stepper = cfg.stepper();
    let mut sse = 0.0;
    let starts: Vec<usize> = (0..n).collect();
    for chunk in starts.chunks(SWEEP_CHUNK) {
        let mut buf = batch_buffer(obs, cfg, chunk);
        if let Some(tick) = advance(&stepper, &net, &mut buf, 1) {
            return Err(Error::Blowup {
                step: tick,
                time: obs.times[chunk[0]],
            });
        }
        sse += sum_squared_residuals(obs, cfg, chunk, &buf);
    }
    Ok((sse, n * obs.k()))
}

/// [`one_step_sse`] with its gradient with respect to the flat parameters.
/// `None` signals a blowup.
pub fn one_step_sse_grad(
    params: &ClosureParams,
    obs: &ObservationSet,
    cfg: &ClosureConfig,
) -> Result<Option<(f64, usize, Vec<f64>)>> {
    cfg.check_params(params, obs.k())?;
    let n = valid_starts(obs.len(), cfg, 1);
    if n == 0 {
        return Err(Error::config("observations", "too short for a single window"));
    }
    let net = NeuralClosure::new(params, cfg.stencil);
    let stepper = cfg.stepper();
    let mut sse = 0.0;
    let mut grad = vec![0.0; params.len()];
    let starts: Vec<usize> = (0..n).collect();
    for chunk in starts.chunks(SWEEP_CHUNK) {
        let mut buf = batch_buffer(obs, cfg, chunk);
        let Ok(tapes) = advance_taped(&stepper, &net, &mut buf, 1) else {
            return Ok(None);
        };
        let r = &buf.emitted()[0] - &batch_targets(obs, cfg, chunk, 1);
        sse += r.mapv(|v| v * v).sum();
        backprop(&stepper, &net, &buf, &tapes, vec![r * 2.0], &mut grad);
    }
    Ok(Some((sse, n * obs.k(), grad)))
}

/// Mean squared one-step residual over the whole data set.
pub fn residual_variance(params: &ClosureParams, obs: &ObservationSet, cfg: &ClosureConfig) -> Result<f64> {
    let (sse, d) = one_step_sse(params, obs, cfg)?;
    Ok(sse / d as f64)
}

/// A fixed minibatch loss as an [`Objective`] over the flat parameters.
#[derive(Debug, Clone)]
pub struct BatchLoss<'a> {
    pub obs: &'a ObservationSet,
    pub cfg: ClosureConfig,
    pub arch: MlpArchitecture,
    pub batch: Vec<usize>,
    pub n_f: usize,
}

impl Objective for BatchLoss<'_> {
    fn dim(&self) -> usize {
        self.arch.param_count()
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let p = ClosureParams::new(self.arch, params.to_vec())?;
        loss_and_grad(&p, self.obs, &self.batch, self.n_f, &self.cfg)
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize, learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn from_config(dim: usize, cfg: &TrainConfig) -> Self {
        Self::new(dim, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Draws minibatches without replacement, reshuffling at every epoch.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            pos: 0,
            batch: batch.min(n).max(1),
            rng,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

/// Trains a freshly initialized network for the variant in `closure_cfg`.
pub fn adam_train(
    obs: &ObservationSet,
    arch: MlpArchitecture,
    cfg: &TrainConfig,
    closure_cfg: &ClosureConfig,
) -> Result<TrainReport> {
    let params = ClosureParams::glorot(arch, cfg.seed);
    adam_train_from(obs, params, cfg, closure_cfg)
}

/// Trains starting from `params`.
pub fn adam_train_from(
    obs: &ObservationSet,
    mut params: ClosureParams,
    cfg: &TrainConfig,
    closure_cfg: &ClosureConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    closure_cfg.check_params(&params, obs.k())?;
    let mut adam = Adam::from_config(params.len(), cfg);
    let mut loss_curve = Vec::with_capacity(cfg.phase1_iters + cfg.phase2_iters);
    let mut divergent = 0usize;
    let phases = [(1usize, cfg.phase1_iters), (cfg.n_f, cfg.phase2_iters)];
    for (phase, &(n_f, iters)) in phases.iter().enumerate() {
        if iters == 0 {
            continue;
        }
        let n = valid_starts(obs.len(), closure_cfg, n_f);
        if n == 0 {
            return Err(Error::config("train.n_f", "observation set too short for the rollout depth"));
        }
        let mut sampler = EpochSampler::new(n, cfg.batch_size, cfg.seed.wrapping_add(1 + phase as u64));
        for _ in 0..iters {
            let batch = sampler.next_batch();
            let (loss, grad) = loss_and_grad(&params, obs, &batch, n_f, closure_cfg)?;
            loss_curve.push(loss);
            if loss > DIVERGENCE_LOSS {
                divergent += 1;
                if divergent >= DIVERGENCE_PATIENCE {
                    return Err(Error::Diverged {
                        iteration: loss_curve.len(),
                        loss,
                    });
                }
            } else {
                divergent = 0;
            }
            adam.step(&mut params.flat, &grad);
            if loss_curve.len() % 1000 == 0 {
                log::info!(
                    "{} training: iteration {} (n_f = {n_f}) loss {loss:.3e}",
                    closure_cfg.variant.name(),
                    loss_curve.len()
                );
            }
        }
    }
    let residual_variance = residual_variance(&params, obs, closure_cfg)?;
    Ok(TrainReport {
        variant: closure_cfg.variant,
        loss_curve,
        phase1_iters: cfg.phase1_iters,
        final_params: params,
        residual_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = vec![5.0];
        let mut adam = Adam::new(1, 1e-2, 0.9, 0.999, 1e-8);
        for _ in 0..5000 {
            let g = vec![2.0 * (x[0] - 1.5)];
            adam.step(&mut x, &g);
        }
        assert!((x[0] - 1.5).abs() < 1e-3, "x = {}", x[0]);
    }

    #[test]
    fn sampler_covers_epoch_without_repeats() {
        let mut s = EpochSampler::new(10, 3, 1);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        // Fourth draw needs a reshuffle but still returns a full batch.
        assert_eq!(s.next_batch().len(), 3);
    }

    #[test]
    fn sampler_is_seeded() {
        let a: Vec<_> = {
            let mut s = EpochSampler::new(50, 7, 3);
            (0..10).map(|_| s.next_batch()).collect()
        };
        let b: Vec<_> = {
            let mut s = EpochSampler::new(50, 7, 3);
            (0..10).map(|_| s.next_batch()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn valid_start_counts() {
        let hist = ClosureConfig::history(2, 0.01, 15.0);
        assert_eq!(valid_starts(10_001, &hist, 1), 9995);
        let inst = ClosureConfig::instantaneous(0.01, 15.0);
        assert_eq!(valid_starts(10_001, &inst, 4), 9997);
        assert_eq!(valid_starts(3, &hist, 1), 0);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            n_f: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
