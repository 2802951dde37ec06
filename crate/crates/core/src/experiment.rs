//! Seeded experiment configuration and the commands behind the
//! `histclosure` binary.
//!
//! Every command reads and writes files in `output_dir`:
//!
//! | command    | writes                                                              |
//! |------------|---------------------------------------------------------------------|
//! | simulate   | `truth.csv`, `coupling.csv`, `observations.csv`, `observations.json`, `truth_final_state.json` |
//! | train      | `checkpoint_<variant>.json`, `loss_curve_<variant>.csv`             |
//! | hmc        | `chain_<variant>.json`, `chain_<variant>_samples.csv`, `chain_<variant>_log_posterior.csv` |
//! | forecast   | `metrics_<variant>_<source>.json`, `forecast_<variant>_<source>.csv`, band CSVs for chains |
//! | uq-sweep   | `uq_table.csv`                                                      |
//!
//! plus `manifest.<command>.json` with the config hash, seeds and SHA-256 of
//! all inputs and outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::closure::{rollout_partial, ClosureConfig, HistoryConfig, HistoryWindow, InputStencil, Variant, ZeroClosure};
use crate::error::{Error, Result};
use crate::forecast::{
    deterministic_metrics, ensemble_metrics, forecast_deterministic, forecast_ensemble, rmse, uq_sweep, EnsembleOptions,
    ForecastEnsemble, MetricsReport, UqTable,
};
use crate::hmc::{run_chain, Chain, HmcConfig, HmcSample, PrecisionParams};
use crate::io::{
    ensure_dir, fmt_f64, read_csv, read_json, series_header, sha256_hex, write_csv, write_json, write_series_csv,
    Manifest,
};
use crate::mlp::{Activation, ClosureParams, MlpArchitecture};
use crate::train::{adam_train, TrainConfig, TrainReport};
use crate::truth::{
    attractor_initial_state, make_observations, simulate_truth, FullState, ObservationSet, TruthConfig,
    TruthTrajectory,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSection {
    /// Truth steps between observations.
    pub stride: usize,
    pub noise_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosureSection {
    pub variant: Variant,
    pub n_h: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub stencil: InputStencil,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPoint {
    /// Start at the beginning of the training data.
    First,
    /// Start at the end of the training data and forecast beyond it.
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastSection {
    /// Forecast length (MTU).
    pub horizon: f64,
    pub init: InitPoint,
    pub thinning: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: f64,
    #[serde(default)]
    pub predictive_noise: bool,
}

fn default_burn_in() -> f64 {
    crate::hmc::BURN_IN_FRACTION
}

fn default_threads() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub truth: TruthConfig,
    pub observation: ObservationSection,
    pub closure: ClosureSection,
    pub train: TrainConfig,
    pub hmc: HmcConfig,
    pub forecast: ForecastSection,
    /// Upper bound on worker threads.
    #[serde(default = "default_threads")]
    pub threads: usize,
    pub output_dir: PathBuf,
}

const FULL_PRESET: &str = include_str!("../presets/full.json");
const DESK_PRESET: &str = include_str!("../presets/desk.json");
const TOY_PRESET: &str = include_str!("../presets/toy.json");

impl ExperimentConfig {
    /// One of the bundled presets: `full`, `desk` or `toy`.
    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "full" => FULL_PRESET,
            "desk" => DESK_PRESET,
            "toy" => TOY_PRESET,
            other => return Err(Error::config("preset", format!("unknown preset `{other}`"))),
        };
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a configuration file, or the configuration embedded in a
    /// command manifest (whose recorded hash must still match).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::config("config", e.to_string()))?;
        let cfg: Self = if value.get("command").is_some() && value.get("config").is_some() {
            let m: Manifest = serde_json::from_value(value).map_err(|e| Error::config("config", e.to_string()))?;
            let cfg: Self = serde_json::from_value(m.config).map_err(|e| Error::config("config", e.to_string()))?;
            if cfg.config_hash() != m.config_hash {
                return Err(Error::config("config", "embedded configuration does not match the manifest's hash"));
            }
            cfg
        } else {
            serde_json::from_value(value).map_err(|e| Error::config("config", e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.truth.validate()?;
        if self.observation.stride == 0 {
            return Err(Error::config("observation.stride", "must be at least 1"));
        }
        if !(self.observation.noise_fraction >= 0.0 && self.observation.noise_fraction.is_finite()) {
            return Err(Error::config("observation.noise_fraction", "must be non-negative"));
        }
        if self.closure.n_h == 0 {
            return Err(Error::config("closure.n_h", "must be at least 1"));
        }
        self.closure_config().validate()?;
        self.architecture().validate()?;
        self.train.validate()?;
        self.hmc.validate()?;
        let f = &self.forecast;
        if !(f.horizon > 0.0) {
            return Err(Error::config("forecast.horizon", "must be positive"));
        }
        let ticks = f.horizon / self.delta_t();
        if (ticks - ticks.round()).abs() > 1e-6 {
            return Err(Error::config("forecast.horizon", "must be a whole number of observation intervals"));
        }
        if f.thinning == 0 {
            return Err(Error::config("forecast.thinning", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&f.burn_in) {
            return Err(Error::config("forecast.burn_in", "must lie in [0, 1)"));
        }
        if self.threads == 0 {
            return Err(Error::config("threads", "must be at least 1"));
        }
        Ok(())
    }

    /// Observation spacing `Δt = stride · dt`.
    pub fn delta_t(&self) -> f64 {
        self.observation.stride as f64 * self.truth.dt
    }

    pub fn closure_config(&self) -> ClosureConfig {
        ClosureConfig {
            variant: self.closure.variant,
            history: HistoryConfig {
                n_h: self.closure.n_h,
                delta_t: self.delta_t(),
            },
            forcing: self.truth.forcing,
            stencil: self.closure.stencil,
        }
    }

    pub fn architecture(&self) -> MlpArchitecture {
        MlpArchitecture {
            input_dim: self.closure_config().input_dim(self.truth.k),
            hidden_layers: self.closure.hidden_layers,
            hidden_width: self.closure.hidden_width,
            output_dim: 1,
            activation: self.closure.activation,
        }
    }

    pub fn horizon_ticks(&self) -> usize {
        (self.forecast.horizon / self.delta_t()).round() as usize
    }

    /// Same experiment for the other closure variant. `n_f` is the rollout
    /// depth used for that variant.
    pub fn with_variant(&self, variant: Variant, n_f: usize) -> Self {
        let mut c = self.clone();
        c.closure.variant = variant;
        c.train.n_f = n_f;
        c
    }

    /// SHA-256 of everything that can change numeric results; the output
    /// location and thread cap are left out.
    pub fn config_hash(&self) -> String {
        let canonical = Self {
            output_dir: PathBuf::new(),
            threads: 1,
            ..self.clone()
        };
        sha256_hex(serde_json::to_string(&canonical).expect("config serializes").as_bytes())
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("truth".to_owned(), self.truth.seed),
            ("observation".to_owned(), self.observation.seed),
            ("train".to_owned(), self.train.seed),
            ("hmc".to_owned(), self.hmc.seed),
        ])
    }

    fn manifest(&self, command: &str) -> Manifest {
        let config = serde_json::to_value(self).expect("config serializes");
        Manifest::new(command, self.config_hash(), self.seeds(), config)
    }

    fn variant_tag(&self) -> &'static str {
        self.closure.variant.name()
    }
}

/// Truth run and its observations.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub trajectory: TruthTrajectory,
    pub observations: ObservationSet,
}

/// Spins up, integrates the truth and draws the observations.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let x0 = attractor_initial_state(&cfg.truth)?;
    let trajectory = simulate_truth(&cfg.truth, &x0)?;
    let observations = make_observations(
        &trajectory,
        cfg.observation.stride,
        cfg.observation.noise_fraction,
        cfg.observation.seed,
    )?;
    Ok(Dataset {
        trajectory,
        observations,
    })
}

/// Initial window and the truth it should be compared with.
#[derive(Debug, Clone)]
pub struct ForecastTarget {
    pub window: HistoryWindow,
    pub times: Vec<f64>,
    /// `[ticks × K]` slow states on the observation grid after the window.
    pub states: Array2<f64>,
    /// `[ticks × K]` exact coupling term at the same times.
    pub closure: Array2<f64>,
}

/// Noise-free truth on the observation grid, extended past the end of the
/// stored run by integrating on from its final full state when the forecast
/// needs it. The window is taken from the clean truth.
pub fn forecast_target(
    cfg: &ExperimentConfig,
    times: &[f64],
    x: &Array2<f64>,
    coupling: &Array2<f64>,
    final_state: &FullState,
) -> Result<ForecastTarget> {
    let stride = cfg.observation.stride;
    let dt = cfg.delta_t();
    let w = cfg.closure_config().window_len();
    let ticks = cfg.horizon_ticks();
    let mut grid_x = x.slice(s![..;stride, ..]).to_owned();
    let mut grid_c = coupling.slice(s![..;stride, ..]).to_owned();
    let t0 = times[0];
    let n_stored = grid_x.nrows();
    let newest = match cfg.forecast.init {
        InitPoint::First => w - 1,
        InitPoint::Last => n_stored - 1,
    };
    if newest + 1 < w || newest >= n_stored {
        return Err(Error::config("forecast.init", "training data too short for the initial window"));
    }
    let needed = newest + 1 + ticks;
    if needed > n_stored {
        // The stored run ends at a grid point only if its length is a
        // multiple of the stride.
        if (x.nrows() - 1) % stride != 0 {
            return Err(Error::config("truth.t_end", "must be a whole number of observation intervals"));
        }
        let extra = needed - n_stored;
        let ext_cfg = TruthConfig {
            t_end: extra as f64 * dt,
            ..cfg.truth.clone()
        };
        let ext = simulate_truth(&ext_cfg, final_state)?;
        let ex = ext.subsample_x(stride);
        let ec = ext.subsample_coupling(stride);
        grid_x = concatenate(Axis(0), &[grid_x.view(), ex.slice(s![1..=extra, ..])]).unwrap();
        grid_c = concatenate(Axis(0), &[grid_c.view(), ec.slice(s![1..=extra, ..])]).unwrap();
    }
    let window = HistoryWindow::from_rows(grid_x.view(), newest, w, t0, dt)?;
    let range = s![newest + 1..newest + 1 + ticks, ..];
    Ok(ForecastTarget {
        window,
        times: (newest + 1..newest + 1 + ticks).map(|i| t0 + i as f64 * dt).collect(),
        states: grid_x.slice(range).to_owned(),
        closure: grid_c.slice(range).to_owned(),
    })
}

/// [`forecast_target`] for an in-memory dataset.
pub fn dataset_target(cfg: &ExperimentConfig, data: &Dataset) -> Result<ForecastTarget> {
    let traj = &data.trajectory;
    forecast_target(cfg, &traj.times, &traj.x, &traj.coupling, &traj.full_state(traj.len() - 1))
}

/// Trains the configured variant.
pub fn train_variant(cfg: &ExperimentConfig, obs: &ObservationSet) -> Result<TrainReport> {
    adam_train(obs, cfg.architecture(), &cfg.train, &cfg.closure_config())
}

/// Full in-memory pipeline for one cell of the forcing × noise sweep:
/// data, training, sampling, ensemble forecast and its `σ_r`.
pub fn pipeline_sigma_r(cfg: &ExperimentConfig) -> Result<f64> {
    cfg.validate()?;
    let data = generate_data(cfg)?;
    let report = train_variant(cfg, &data.observations)?;
    let chain = run_chain(&report, &data.observations, &cfg.closure_config(), &cfg.hmc)?;
    let target = dataset_target(cfg, &data)?;
    let ens = forecast_ensemble(
        &chain,
        cfg.architecture(),
        &target.window,
        cfg.horizon_ticks(),
        &cfg.closure_config(),
        &ensemble_options(cfg),
    )?;
    Ok(ensemble_metrics(target.states.view(), target.closure.view(), &ens)?
        .sigma_r
        .expect("ensemble metrics include σ_r"))
}

/// Phase-2 rollout depths used for the two variants in the reference
/// experiments.
pub const ROLLOUT_DEPTH_HISTORY: usize = 5;
pub const ROLLOUT_DEPTH_INSTANTANEOUS: usize = 4;

/// Forecast scores of one trained and sampled variant.
#[derive(Debug, Clone, Serialize)]
pub struct VariantScores {
    pub variant: Variant,
    pub residual_variance: f64,
    pub deterministic_rmse: f64,
    pub ensemble_mean_rmse: f64,
    pub frac_out_2sigma: f64,
    pub sigma_r: f64,
    pub acceptance_rate: f64,
    pub ensemble_size: usize,
    pub blown_up_members: usize,
}

/// Both variants on one dataset, plus the uncorrected coarse model.
#[derive(Debug, Clone, Serialize)]
pub struct VariantComparison {
    pub zero_closure_rmse: f64,
    pub history: VariantScores,
    pub instantaneous: VariantScores,
}

/// Trains and samples each variant on the same data and scores both
/// forecasts from the configured initial window.
pub fn compare_variants(cfg: &ExperimentConfig) -> Result<VariantComparison> {
    cfg.validate()?;
    let data = generate_data(cfg)?;
    let target = dataset_target(cfg, &data)?;
    let zero = rollout_partial(&target.window, &ZeroClosure, &cfg.closure_config(), cfg.horizon_ticks())?.0;
    let zero_closure_rmse = rmse(target.states.view(), zero.states.view())?.final_value;
    let score = |variant, n_f| -> Result<VariantScores> {
        let c = cfg.with_variant(variant, n_f);
        let ccfg = c.closure_config();
        let report = train_variant(&c, &data.observations)?;
        let det = forecast_deterministic(&report.final_params, &target.window, c.horizon_ticks(), &ccfg)?;
        let dm = deterministic_metrics(target.states.view(), target.closure.view(), &det)?;
        let chain = run_chain(&report, &data.observations, &ccfg, &c.hmc)?;
        let ens = forecast_ensemble(&chain, c.architecture(), &target.window, c.horizon_ticks(), &ccfg, &ensemble_options(&c))?;
        let em = ensemble_metrics(target.states.view(), target.closure.view(), &ens)?;
        log::info!("{}: deterministic {:.4}, ensemble mean {:.4}", variant.name(), dm.rmse_states, em.rmse_states);
        Ok(VariantScores {
            variant,
            residual_variance: report.residual_variance,
            deterministic_rmse: dm.rmse_states,
            ensemble_mean_rmse: em.rmse_states,
            frac_out_2sigma: em.frac_out_2sigma_states.expect("ensemble metrics include the band fraction"),
            sigma_r: em.sigma_r.expect("ensemble metrics include σ_r"),
            acceptance_rate: chain.acceptance_rate,
            ensemble_size: ens.len(),
            blown_up_members: ens.blown_up,
        })
    };
    Ok(VariantComparison {
        zero_closure_rmse,
        history: score(Variant::History, ROLLOUT_DEPTH_HISTORY)?,
        instantaneous: score(Variant::Instantaneous, ROLLOUT_DEPTH_INSTANTANEOUS)?,
    })
}

fn ensemble_options(cfg: &ExperimentConfig) -> EnsembleOptions {
    EnsembleOptions {
        burn_in: cfg.forecast.burn_in,
        thinning: cfg.forecast.thinning,
        predictive_noise: cfg.forecast.predictive_noise,
        seed: cfg.hmc.seed,
    }
}

// ---------------------------------------------------------------------------
// Persisted artifacts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationMeta {
    pub noise_fraction: f64,
    pub per_var_std: Vec<f64>,
    pub seed: u64,
    pub stride: usize,
    pub delta_t: f64,
}

pub fn save_observations(dir: &Path, obs: &ObservationSet) -> Result<(PathBuf, PathBuf)> {
    let csv = dir.join("observations.csv");
    let json = dir.join("observations.json");
    write_series_csv(&csv, &series_header(&["X"], obs.k()), &obs.times, &[obs.states.view()])?;
    write_json(
        &json,
        &ObservationMeta {
            noise_fraction: obs.noise_fraction,
            per_var_std: obs.per_var_std.clone(),
            seed: obs.seed,
            stride: obs.stride,
            delta_t: obs.delta_t,
        },
    )?;
    Ok((csv, json))
}

pub fn load_observations(dir: &Path) -> Result<ObservationSet> {
    let table = read_csv(&dir.join("observations.csv"))?;
    let meta: ObservationMeta = read_json(&dir.join("observations.json"))?;
    let obs = ObservationSet {
        times: table.column("t").unwrap_or_default(),
        states: table.block("X"),
        noise_fraction: meta.noise_fraction,
        per_var_std: meta.per_var_std,
        seed: meta.seed,
        stride: meta.stride,
        delta_t: meta.delta_t,
    };
    obs.validate()?;
    Ok(obs)
}

/// Deterministic fit as written by `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub closure: ClosureConfig,
    pub train: TrainConfig,
    pub params: ClosureParams,
    pub residual_variance: f64,
}

impl Checkpoint {
    pub fn report(&self) -> TrainReport {
        TrainReport {
            variant: self.closure.variant,
            loss_curve: Vec::new(),
            phase1_iters: self.train.phase1_iters,
            final_params: self.params.clone(),
            residual_variance: self.residual_variance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub config: HmcConfig,
    pub closure: ClosureConfig,
    pub arch: MlpArchitecture,
    pub acceptance_rate: f64,
    pub n_samples: usize,
    pub n_params: usize,
}

/// Writes the chain as a JSON summary, a `[N_s × (N + 2)]` samples CSV and a
/// per-sample log-posterior CSV.
pub fn save_chain(dir: &Path, tag: &str, chain: &Chain, closure: &ClosureConfig, arch: MlpArchitecture) -> Result<Vec<PathBuf>> {
    let n = arch.param_count();
    let meta_path = dir.join(format!("chain_{tag}.json"));
    write_json(
        &meta_path,
        &ChainMeta {
            config: chain.config.clone(),
            closure: *closure,
            arch,
            acceptance_rate: chain.acceptance_rate,
            n_samples: chain.len(),
            n_params: n,
        },
    )?;
    let mut header: Vec<String> = (1..=n).map(|i| format!("theta{i}")).collect();
    header.push("log_gamma".into());
    header.push("log_lambda".into());
    let rows: Vec<Vec<String>> = chain
        .samples
        .iter()
        .map(|s| {
            s.theta
                .iter()
                .chain([&s.prec.log_gamma, &s.prec.log_lambda])
                .map(|&v| fmt_f64(v))
                .collect()
        })
        .collect();
    let samples_path = dir.join(format!("chain_{tag}_samples.csv"));
    write_csv(&samples_path, &header, &rows)?;
    let lp_rows: Vec<Vec<String>> = chain
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| vec![i.to_string(), fmt_f64(s.log_posterior), (s.accepted as u8).to_string()])
        .collect();
    let lp_path = dir.join(format!("chain_{tag}_log_posterior.csv"));
    write_csv(&lp_path, &["step".into(), "log_posterior".into(), "accepted".into()], &lp_rows)?;
    Ok(vec![meta_path, samples_path, lp_path])
}

pub fn load_chain(dir: &Path, tag: &str) -> Result<(Chain, ChainMeta)> {
    let meta_path = dir.join(format!("chain_{tag}.json"));
    let meta: ChainMeta = read_json(&meta_path)?;
    let samples = read_csv(&dir.join(format!("chain_{tag}_samples.csv")))?;
    let lp = read_csv(&dir.join(format!("chain_{tag}_log_posterior.csv")))?;
    let n = meta.n_params;
    if samples.data.ncols() != n + 2 || samples.data.nrows() != lp.data.nrows() {
        return Err(Error::Format {
            path: meta_path,
            reason: "sample and log-posterior files disagree with the chain summary".into(),
        });
    }
    let chain = Chain {
        samples: samples
            .data
            .outer_iter()
            .zip(lp.data.outer_iter())
            .map(|(row, l)| HmcSample {
                theta: row.slice(s![..n]).to_vec(),
                prec: PrecisionParams {
                    log_gamma: row[n],
                    log_lambda: row[n + 1],
                },
                log_posterior: l[1],
                accepted: l[2] != 0.0,
            })
            .collect(),
        acceptance_rate: meta.acceptance_rate,
        config: meta.config.clone(),
    };
    Ok((chain, meta))
}

// ---------------------------------------------------------------------------
// Commands

/// `simulate`: truth run, coupling term and observations.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    let data = generate_data(cfg)?;
    let traj = &data.trajectory;
    let k = cfg.truth.k;
    let truth_path = dir.join("truth.csv");
    write_series_csv(&truth_path, &series_header(&["X"], k), &traj.times, &[traj.x.view()])?;
    let coupling_path = dir.join("coupling.csv");
    write_series_csv(&coupling_path, &series_header(&["C"], k), &traj.times, &[traj.coupling.view()])?;
    let final_path = dir.join("truth_final_state.json");
    write_json(&final_path, &traj.full_state(traj.len() - 1))?;
    let (obs_csv, obs_json) = save_observations(dir, &data.observations)?;

    let mut m = cfg.manifest("simulate");
    for p in [&truth_path, &coupling_path, &final_path, &obs_csv, &obs_json] {
        m.add_output(p)?;
    }
    m.write(dir)?;
    Ok(m)
}

/// `train`: Adam on the observations in `obs_dir` (default: `output_dir`).
pub fn cmd_train(cfg: &ExperimentConfig, obs_dir: Option<&Path>) -> Result<(Manifest, TrainReport)> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    let obs_dir = obs_dir.unwrap_or(dir);
    let obs = load_observations(obs_dir)?;
    check_observations(cfg, &obs)?;
    let report = train_variant(cfg, &obs)?;
    let tag = cfg.variant_tag();

    let ckpt_path = dir.join(format!("checkpoint_{tag}.json"));
    write_json(
        &ckpt_path,
        &Checkpoint {
            closure: cfg.closure_config(),
            train: cfg.train.clone(),
            params: report.final_params.clone(),
            residual_variance: report.residual_variance,
        },
    )?;
    let curve_path = dir.join(format!("loss_curve_{tag}.csv"));
    let rows: Vec<Vec<String>> = report
        .loss_curve
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), fmt_f64(*l)])
        .collect();
    write_csv(&curve_path, &["iteration".into(), "loss".into()], &rows)?;

    let mut m = cfg.manifest(&format!("train_{tag}"));
    m.add_input(&obs_dir.join("observations.csv"))?;
    m.add_output(&ckpt_path)?;
    m.add_output(&curve_path)?;
    m.write(dir)?;
    Ok((m, report))
}

fn check_observations(cfg: &ExperimentConfig, obs: &ObservationSet) -> Result<()> {
    if obs.k() != cfg.truth.k {
        return Err(Error::config("truth.k", "differs from the observation file"));
    }
    if ((obs.delta_t - cfg.delta_t()) / cfg.delta_t()).abs() > 1e-9 {
        return Err(Error::config("observation.stride", "observation spacing differs from the observation file"));
    }
    Ok(())
}

fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<Checkpoint> {
    let ckpt: Checkpoint = read_json(path)?;
    if ckpt.closure != cfg.closure_config() {
        return Err(Error::config("closure", format!("checkpoint {} was trained with a different closure", path.display())));
    }
    Ok(ckpt)
}

/// `hmc`: posterior chain started from a checkpoint.
pub fn cmd_hmc(cfg: &ExperimentConfig, checkpoint: Option<&Path>, obs_dir: Option<&Path>) -> Result<(Manifest, Chain)> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    let tag = cfg.variant_tag();
    let ckpt_path = checkpoint.map_or_else(|| dir.join(format!("checkpoint_{tag}.json")), Path::to_path_buf);
    let ckpt = load_checkpoint(cfg, &ckpt_path)?;
    let obs_dir = obs_dir.unwrap_or(dir);
    let obs = load_observations(obs_dir)?;
    check_observations(cfg, &obs)?;
    let chain = run_chain(&ckpt.report(), &obs, &ckpt.closure, &cfg.hmc)?;
    println!("acceptance rate: {:.4}", chain.acceptance_rate);
    let files = save_chain(dir, tag, &chain, &ckpt.closure, ckpt.params.arch)?;

    let mut m = cfg.manifest(&format!("hmc_{tag}"));
    m.add_input(&ckpt_path)?;
    m.add_input(&obs_dir.join("observations.csv"))?;
    for f in &files {
        m.add_output(f)?;
    }
    m.write(dir)?;
    Ok((m, chain))
}

/// Parameters to forecast with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForecastSource {
    Checkpoint,
    Chain,
}

impl ForecastSource {
    pub fn name(self) -> &'static str {
        match self {
            ForecastSource::Checkpoint => "deterministic",
            ForecastSource::Chain => "bayesian",
        }
    }
}

/// `forecast`: online forecast from the checkpoint or chain in `output_dir`
/// against the truth stored in `truth_dir` (default: `output_dir`).
pub fn cmd_forecast(cfg: &ExperimentConfig, source: ForecastSource, truth_dir: Option<&Path>) -> Result<(Manifest, MetricsReport)> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    let truth_dir = truth_dir.unwrap_or(dir);
    let truth_path = truth_dir.join("truth.csv");
    let coupling_path = truth_dir.join("coupling.csv");
    let final_path = truth_dir.join("truth_final_state.json");
    let truth = read_csv(&truth_path)?;
    let coupling = read_csv(&coupling_path)?;
    let final_state: FullState = read_json(&final_path)?;
    let target = forecast_target(
        cfg,
        &truth.column("t").unwrap_or_default(),
        &truth.block("X"),
        &coupling.block("C"),
        &final_state,
    )?;
    let tag = cfg.variant_tag();
    let ccfg = cfg.closure_config();
    let ticks = cfg.horizon_ticks();
    let k = cfg.truth.k;
    let mut m = cfg.manifest(&format!("forecast_{tag}_{}", source.name()));
    for p in [&truth_path, &coupling_path, &final_path] {
        m.add_input(p)?;
    }
    let stem = format!("{tag}_{}", source.name());
    let mut outputs = Vec::new();

    let metrics = match source {
        ForecastSource::Checkpoint => {
            let ckpt_path = dir.join(format!("checkpoint_{tag}.json"));
            let ckpt = load_checkpoint(cfg, &ckpt_path)?;
            m.add_input(&ckpt_path)?;
            let fc = forecast_deterministic(&ckpt.params, &target.window, ticks, &ccfg)?;
            let n = fc.result.states.nrows();
            let path = dir.join(format!("forecast_{stem}.csv"));
            write_series_csv(
                &path,
                &series_header(&["X", "P"], k),
                &fc.result.times,
                &[fc.result.states.view(), fc.result.closures.view()],
            )?;
            outputs.push(path);
            deterministic_metrics(target.states.slice(s![..n, ..]), target.closure.slice(s![..n, ..]), &fc)?
        }
        ForecastSource::Chain => {
            let (chain, meta) = load_chain(dir, tag)?;
            if meta.closure != ccfg {
                return Err(Error::config("closure", "chain was sampled with a different closure"));
            }
            m.add_input(&dir.join(format!("chain_{tag}_samples.csv")))?;
            let ens = forecast_ensemble(&chain, meta.arch, &target.window, ticks, &ccfg, &ensemble_options(cfg))?;
            outputs.extend(write_bands(dir, &stem, &target, &ens, k)?);
            ensemble_metrics(target.states.view(), target.closure.view(), &ens)?
        }
    };
    let metrics_path = dir.join(format!("metrics_{stem}.json"));
    write_json(&metrics_path, &metrics)?;
    outputs.push(metrics_path);
    for p in &outputs {
        m.add_output(p)?;
    }
    m.write(dir)?;
    Ok((m, metrics))
}

/// Mean, `±2σ` band, MAP track and truth for states and closure.
fn write_bands(dir: &Path, stem: &str, target: &ForecastTarget, ens: &ForecastEnsemble, k: usize) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for (what, mean, var, map, truth) in [
        ("states", &ens.mean, &ens.variance, &ens.map_track, &target.states),
        ("closure", &ens.closure_mean, &ens.closure_variance, &ens.map_closure, &target.closure),
    ] {
        let sd = var.mapv(f64::sqrt);
        let lo = mean - &(&sd * 2.0);
        let hi = mean + &(&sd * 2.0);
        let path = dir.join(format!("band_{stem}_{what}.csv"));
        write_series_csv(
            &path,
            &series_header(&["truth", "mean", "lo", "hi", "map"], k),
            &ens.times,
            &[truth.view(), mean.view(), lo.view(), hi.view(), map.view()],
        )?;
        paths.push(path);
    }
    Ok(paths)
}

/// `uq-sweep`: `σ_r` over a forcing × noise grid, each cell a full
/// in-memory pipeline run.
pub fn cmd_uq_sweep(cfg: &ExperimentConfig, forcings: &[f64], noise_fractions: &[f64]) -> Result<(Manifest, UqTable)> {
    cfg.validate()?;
    if forcings.is_empty() || noise_fractions.is_empty() {
        return Err(Error::config("uq_sweep", "forcing and noise lists must be non-empty"));
    }
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    let table = uq_sweep(forcings, noise_fractions, |f, n| {
        let mut c = cfg.clone();
        c.truth.forcing = f;
        c.observation.noise_fraction = n;
        pipeline_sigma_r(&c)
    });
    let path = dir.join("uq_table.csv");
    let rows: Vec<Vec<String>> = table
        .cells
        .iter()
        .map(|c| {
            vec![
                fmt_f64(c.forcing),
                fmt_f64(c.noise_fraction),
                c.sigma_r.map_or_else(|| "NaN".into(), fmt_f64),
            ]
        })
        .collect();
    write_csv(&path, &["forcing".into(), "noise_fraction".into(), "sigma_r".into()], &rows)?;
    let mut m = cfg.manifest("uq_sweep");
    let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    m.args.insert("forcings".into(), list(forcings));
    m.args.insert("noises".into(), list(noise_fractions));
    m.add_output(&path)?;
    m.write(dir)?;
    Ok((m, table))
}
