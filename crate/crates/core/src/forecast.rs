//! Online forecasts from point estimates and posterior chains, and the skill
//! and uncertainty metrics computed on them.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::closure::{rollout_partial, ClosureConfig, HistoryWindow, NeuralClosure, RolloutResult};
use crate::error::{Error, Result};
use crate::hmc::{Chain, HmcSample, BURN_IN_FRACTION};
use crate::mlp::{ClosureParams, MlpArchitecture};
use crate::truth::{integrate_truth, simulate_truth, FullState, TruthConfig};

/// Below this magnitude a truth value is left out of [`sigma_r`].
pub const SIGMA_R_GUARD: f64 = 1e-8;

/// Deterministic forecast, possibly cut short by a blowup.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicForecast {
    pub result: RolloutResult,
    /// First blown-up tick and its time.
    pub divergence: Option<(usize, f64)>,
}

/// Forecast with a single parameter vector. The variant (and therefore the
/// initial window length) comes from `cfg`.
pub fn forecast_deterministic(
    params: &ClosureParams,
    init: &HistoryWindow,
    horizon: usize,
    cfg: &ClosureConfig,
) -> Result<DeterministicForecast> {
    if horizon == 0 {
        return Err(Error::config("forecast.horizon", "must be at least 1"));
    }
    cfg.check_params(params, init.newest().x.len())?;
    let (result, divergence) = rollout_partial(init, &NeuralClosure::new(params, cfg.stencil), cfg, horizon)?;
    if let Some((tick, t)) = divergence {
        log::warn!("deterministic forecast blew up at tick {tick} (t = {t})");
    }
    Ok(DeterministicForecast { result, divergence })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOptions {
    /// Fraction of the chain discarded as burn-in.
    pub burn_in: f64,
    /// Keep every `thinning`-th sample after burn-in.
    pub thinning: usize,
    /// Also produce draws with observation noise `N(0, 1/γ)` added to every
    /// member state.
    pub predictive_noise: bool,
    pub seed: u64,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            burn_in: BURN_IN_FRACTION,
            thinning: 4,
            predictive_noise: false,
            seed: 0,
        }
    }
}

/// Posterior forecast ensemble. Moments exclude observation noise and are
/// taken over members that stayed finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastEnsemble {
    pub times: Vec<f64>,
    /// One `[steps × K]` track per surviving member.
    pub member_states: Vec<Array2<f64>>,
    pub member_closures: Vec<Array2<f64>>,
    pub mean: Array2<f64>,
    pub variance: Array2<f64>,
    pub closure_mean: Array2<f64>,
    pub closure_variance: Array2<f64>,
    /// Forecast of the highest-posterior retained sample.
    pub map_track: Array2<f64>,
    pub map_closure: Array2<f64>,
    /// Retained samples whose rollout blew up.
    pub blown_up: usize,
    /// Noise-inflated member states, when requested.
    pub predictive_draws: Option<Vec<Array2<f64>>>,
}

impl ForecastEnsemble {
    pub fn len(&self) -> usize {
        self.member_states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_states.is_empty()
    }

    pub fn std_dev(&self) -> Array2<f64> {
        self.variance.mapv(f64::sqrt)
    }

    pub fn closure_std_dev(&self) -> Array2<f64> {
        self.closure_variance.mapv(f64::sqrt)
    }
}

/// Pointwise mean and population variance of equally shaped members.
pub fn ensemble_moments(members: &[Array2<f64>]) -> Result<(Array2<f64>, Array2<f64>)> {
    let first = members
        .first()
        .ok_or_else(|| Error::Metric("ensemble has no members".into()))?;
    let dim = first.dim();
    if members.iter().any(|m| m.dim() != dim) {
        return Err(Error::Metric("ensemble members differ in shape".into()));
    }
    let n = members.len() as f64;
    let mut mean = Array2::zeros(dim);
    for m in members {
        mean += m;
    }
    mean /= n;
    let mut var = Array2::zeros(dim);
    for m in members {
        let d = m - &mean;
        var += &(&d * &d);
    }
    var /= n;
    Ok((mean, var))
}

/// Highest stored log posterior among the samples kept after burn-in.
pub fn map_estimate(chain: &Chain) -> Result<&HmcSample> {
    let retained = chain.retained(BURN_IN_FRACTION, 1);
    let pool: Vec<&HmcSample> = if retained.is_empty() {
        chain.samples.iter().collect()
    } else {
        retained
    };
    pool.into_iter()
        .filter(|s| s.log_posterior.is_finite())
        .max_by(|a, b| a.log_posterior.total_cmp(&b.log_posterior))
        .ok_or_else(|| Error::Metric("chain has no sample with finite log posterior".into()))
}

/// One rollout per retained chain sample.
pub fn forecast_ensemble(
    chain: &Chain,
    arch: MlpArchitecture,
    init: &HistoryWindow,
    horizon: usize,
    cfg: &ClosureConfig,
    opts: &EnsembleOptions,
) -> Result<ForecastEnsemble> {
    if horizon == 0 {
        return Err(Error::config("forecast.horizon", "must be at least 1"));
    }
    let retained = chain.retained(opts.burn_in, opts.thinning);
    if retained.is_empty() {
        return Err(Error::config("forecast.thinning", "no chain samples left after burn-in and thinning"));
    }
    let map = map_estimate(chain)?;
    let run = |theta: &[f64]| -> Result<Option<RolloutResult>> {
        let params = ClosureParams::new(arch, theta.to_vec())?;
        let f = forecast_deterministic(&params, init, horizon, cfg)?;
        Ok(f.divergence.is_none().then_some(f.result))
    };

    let mut member_states = Vec::with_capacity(retained.len());
    let mut member_closures = Vec::with_capacity(retained.len());
    let mut gammas = Vec::with_capacity(retained.len());
    let mut times = Vec::new();
    let mut blown_up = 0;
    for s in &retained {
        match run(&s.theta)? {
            Some(r) => {
                times = r.times;
                member_states.push(r.states);
                member_closures.push(r.closures);
                gammas.push(s.prec.gamma());
            }
            None => blown_up += 1,
        }
    }
    if blown_up > 0 {
        log::warn!("{blown_up} of {} ensemble members blew up and were excluded", retained.len());
    }
    if member_states.is_empty() {
        return Err(Error::Blowup { step: 0, time: f64::NAN });
    }
    let (mean, variance) = ensemble_moments(&member_states)?;
    let (closure_mean, closure_variance) = ensemble_moments(&member_closures)?;
    let (map_track, map_closure) = match run(&map.theta)? {
        Some(r) => (r.states, r.closures),
        None => {
            log::warn!("MAP forecast blew up; its track is left as NaN");
            let nan = Array2::from_elem(mean.dim(), f64::NAN);
            (nan.clone(), nan)
        }
    };
    let predictive_draws = opts.predictive_noise.then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        member_states
            .iter()
            .zip(&gammas)
            .map(|(m, g)| {
                let sd = 1.0 / g.sqrt();
                m.mapv(|x| x + sd * rng.sample::<f64, _>(StandardNormal))
            })
            .collect()
    });
    Ok(ForecastEnsemble {
        times,
        member_states,
        member_closures,
        mean,
        variance,
        closure_mean,
        closure_variance,
        map_track,
        map_closure,
        blown_up,
        predictive_draws,
    })
}

/// Normalized cumulative RMSE at every prefix of the forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseSeries {
    pub series: Vec<f64>,
    pub final_value: f64,
}

/// `sqrt(Σ_{i≤n} ‖X_i − X*_i‖²) / sqrt(Σ_{i≤n} ‖X_i‖²)` for every prefix
/// length `n`.
pub fn rmse(truth: ArrayView2<'_, f64>, pred: ArrayView2<'_, f64>) -> Result<RmseSeries> {
    if truth.dim() != pred.dim() {
        return Err(Error::Metric(format!(
            "grid mismatch: truth {:?} vs prediction {:?}",
            truth.dim(),
            pred.dim()
        )));
    }
    if truth.nrows() == 0 {
        return Err(Error::Metric("empty trajectories".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut series = Vec::with_capacity(truth.nrows());
    for (t, p) in truth.outer_iter().zip(pred.outer_iter()) {
        for (a, b) in t.iter().zip(p.iter()) {
            num += (a - b) * (a - b);
            den += a * a;
        }
        series.push(if den > 0.0 {
            (num / den).sqrt()
        } else if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        });
    }
    if den == 0.0 {
        return Err(Error::Metric("truth is identically zero".into()));
    }
    Ok(RmseSeries {
        final_value: *series.last().unwrap(),
        series,
    })
}

/// Fraction of truth values outside `[μ − 2σ, μ + 2σ]`.
pub fn frac_out_2sigma(
    truth: ArrayView2<'_, f64>,
    mean: ArrayView2<'_, f64>,
    variance: ArrayView2<'_, f64>,
) -> Result<f64> {
    if truth.dim() != mean.dim() || truth.dim() != variance.dim() {
        return Err(Error::Metric("truth and ensemble grids differ".into()));
    }
    if truth.is_empty() {
        return Err(Error::Metric("empty trajectories".into()));
    }
    let out = ndarray::Zip::from(&truth)
        .and(&mean)
        .and(&variance)
        .fold(0usize, |acc, &x, &m, &v| acc + ((x - m).abs() > 2.0 * v.sqrt()) as usize);
    Ok(out as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaR {
    pub value: f64,
    /// Terms skipped because `|X| < SIGMA_R_GUARD`.
    pub excluded: usize,
}

/// Mean of `σ_k(t_i) / X_k(t_i)` over the grid, with the signed truth in the
/// denominator. Near-zero truth values are skipped and counted; the mean is
/// over the remaining terms.
pub fn sigma_r(truth: ArrayView2<'_, f64>, variance: ArrayView2<'_, f64>) -> Result<SigmaR> {
    if truth.dim() != variance.dim() {
        return Err(Error::Metric("truth and ensemble grids differ".into()));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for (&x, &v) in truth.iter().zip(variance.iter()) {
        if x.abs() < SIGMA_R_GUARD {
            excluded += 1;
        } else {
            sum += v.sqrt() / x;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Metric("every σ_r term was excluded by the near-zero guard".into()));
    }
    Ok(SigmaR {
        value: sum / used as f64,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse_states: f64,
    pub rmse_states_series: Vec<f64>,
    pub rmse_closure: f64,
    pub rmse_closure_series: Vec<f64>,
    /// Ensemble-only fields are `None` for point forecasts.
    pub frac_out_2sigma_states: Option<f64>,
    pub frac_out_2sigma_closure: Option<f64>,
    pub sigma_r: Option<f64>,
    pub sigma_r_excluded: Option<usize>,
    pub blown_up_members: Option<usize>,
    /// Time at which a point forecast blew up.
    pub divergence_time: Option<f64>,
}

impl MetricsReport {
    /// The report without its time series.
    pub fn summary(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("rmse_states_series");
            obj.remove("rmse_closure_series");
        }
        v
    }
}

/// Metrics of a point forecast. A forecast cut short by a blowup is scored
/// over the part that was computed.
pub fn deterministic_metrics(
    truth_states: ArrayView2<'_, f64>,
    truth_closure: ArrayView2<'_, f64>,
    forecast: &DeterministicForecast,
) -> Result<MetricsReport> {
    let n = forecast.result.states.nrows();
    if n == 0 {
        return Err(Error::Metric("forecast blew up on its first tick".into()));
    }
    let s = rmse(truth_states.slice(ndarray::s![..n, ..]), forecast.result.states.view())?;
    let c = rmse(truth_closure.slice(ndarray::s![..n, ..]), forecast.result.closures.view())?;
    Ok(MetricsReport {
        rmse_states: s.final_value,
        rmse_states_series: s.series,
        rmse_closure: c.final_value,
        rmse_closure_series: c.series,
        frac_out_2sigma_states: None,
        frac_out_2sigma_closure: None,
        sigma_r: None,
        sigma_r_excluded: None,
        blown_up_members: None,
        divergence_time: forecast.divergence.map(|(_, t)| t),
    })
}

/// Metrics of the ensemble mean plus calibration and spread.
pub fn ensemble_metrics(
    truth_states: ArrayView2<'_, f64>,
    truth_closure: ArrayView2<'_, f64>,
    ens: &ForecastEnsemble,
) -> Result<MetricsReport> {
    let s = rmse(truth_states, ens.mean.view())?;
    let c = rmse(truth_closure, ens.closure_mean.view())?;
    let sr = sigma_r(truth_states, ens.variance.view())?;
    Ok(MetricsReport {
        rmse_states: s.final_value,
        rmse_states_series: s.series,
        rmse_closure: c.final_value,
        rmse_closure_series: c.series,
        frac_out_2sigma_states: Some(frac_out_2sigma(truth_states, ens.mean.view(), ens.variance.view())?),
        frac_out_2sigma_closure: Some(frac_out_2sigma(
            truth_closure,
            ens.closure_mean.view(),
            ens.closure_variance.view(),
        )?),
        sigma_r: Some(sr.value),
        sigma_r_excluded: Some(sr.excluded),
        blown_up_members: Some(ens.blown_up),
        divergence_time: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub coarse_step: f64,
    pub horizon: f64,
    /// Time at which the truth model run at `coarse_step` blew up.
    pub truth_divergence_time: Option<f64>,
    /// Whether the reference-step truth stayed finite over the horizon.
    pub reference_finite: bool,
    pub model_finite: bool,
    pub model_divergence_time: Option<f64>,
    /// Model RMSE against the reference truth over the part it computed.
    pub model_rmse: Option<f64>,
}

/// Runs the full truth model with the history model's step `2Δt` and the
/// trained history model at the same step, both from the attractor state
/// `x0`, for `horizon` MTU. The reference is the truth at `truth.dt`.
pub fn coarse_step_stability_experiment(
    truth: &TruthConfig,
    x0: &FullState,
    params: &ClosureParams,
    cfg: &ClosureConfig,
    horizon: f64,
) -> Result<StabilityReport> {
    let coarse_step = 2.0 * cfg.history.delta_t;
    let stride = (cfg.history.delta_t / truth.dt).round() as usize;
    if stride == 0 || ((stride as f64 * truth.dt - cfg.history.delta_t) / cfg.history.delta_t).abs() > 1e-9 {
        return Err(Error::config("closure.history.delta_t", "must be a multiple of truth.dt"));
    }
    let coarse_cfg = TruthConfig {
        dt: coarse_step,
        t_end: horizon,
        ..truth.clone()
    };
    let coarse = integrate_truth(&coarse_cfg, x0)?;
    let truth_divergence_time = coarse.blowup.map(|(_, t)| t);

    let window = cfg.window_len();
    let ticks = (horizon / cfg.history.delta_t).round() as usize;
    let ref_cfg = TruthConfig {
        t_end: (ticks + window) as f64 * cfg.history.delta_t,
        ..truth.clone()
    };
    let reference = simulate_truth(&ref_cfg, x0);
    let reference_finite = reference.is_ok();
    let reference = reference?;
    let rows = reference.subsample_x(stride);
    let init = HistoryWindow::from_rows(rows.view(), window - 1, window, 0.0, cfg.history.delta_t)?;
    let fc = forecast_deterministic(params, &init, ticks, cfg)?;
    let n = fc.result.states.nrows();
    let model_rmse = if n > 0 {
        Some(rmse(rows.slice(ndarray::s![window..window + n, ..]), fc.result.states.view())?.final_value)
    } else {
        None
    };
    Ok(StabilityReport {
        coarse_step,
        horizon,
        truth_divergence_time,
        reference_finite,
        model_finite: fc.divergence.is_none(),
        model_divergence_time: fc.divergence.map(|(_, t)| t),
        model_rmse,
    })
}

/// One cell of a forcing × noise sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqCell {
    pub forcing: f64,
    pub noise_fraction: f64,
    /// `None` if the pipeline failed for this cell.
    pub sigma_r: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqTable {
    pub forcings: Vec<f64>,
    pub noise_fractions: Vec<f64>,
    /// Row-major over `forcings × noise_fractions`.
    pub cells: Vec<UqCell>,
}

impl UqTable {
    pub fn get(&self, fi: usize, ni: usize) -> &UqCell {
        &self.cells[fi * self.noise_fractions.len() + ni]
    }

    /// Whether `σ_r` strictly increases with forcing in every noise column.
    pub fn increasing_in_forcing(&self) -> bool {
        (0..self.noise_fractions.len()).all(|ni| {
            (1..self.forcings.len()).all(|fi| match (self.get(fi - 1, ni).sigma_r, self.get(fi, ni).sigma_r) {
                (Some(a), Some(b)) => b > a,
                _ => false,
            })
        })
    }

    /// Whether `σ_r` strictly increases with noise in every forcing row.
    pub fn increasing_in_noise(&self) -> bool {
        (0..self.forcings.len()).all(|fi| {
            (1..self.noise_fractions.len()).all(|ni| match (self.get(fi, ni - 1).sigma_r, self.get(fi, ni).sigma_r) {
                (Some(a), Some(b)) => b > a,
                _ => false,
            })
        })
    }
}

/// Evaluates `cell(forcing, noise)` over the grid. Failures are recorded in
/// the cell and the sweep continues.
pub fn uq_sweep<F>(forcings: &[f64], noise_fractions: &[f64], mut cell: F) -> UqTable
where
    F: FnMut(f64, f64) -> Result<f64>,
{
    let mut cells = Vec::with_capacity(forcings.len() * noise_fractions.len());
    for &f in forcings {
        for &n in noise_fractions {
            let (sigma_r, error) = match cell(f, n) {
                Ok(v) => (Some(v), None),
                Err(e) => {
                    log::warn!("sweep cell F = {f}, noise = {n} failed: {e}");
                    (None, Some(e.to_string()))
                }
            };
            cells.push(UqCell {
                forcing: f,
                noise_fraction: n,
                sigma_r,
                error,
            });
        }
    }
    let table = UqTable {
        forcings: forcings.to_vec(),
        noise_fractions: noise_fractions.to_vec(),
        cells,
    };
    if !table.increasing_in_forcing() {
        log::warn!("σ_r is not strictly increasing in forcing at every noise level");
    }
    if !table.increasing_in_noise() {
        log::warn!("σ_r is not strictly increasing in noise at every forcing");
    }
    table
}
