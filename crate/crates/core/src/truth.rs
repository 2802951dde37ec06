//! Two-timescale Lorenz '96 truth model and the sparse, noisy observation
//! set derived from it.
//!
//! The full state is stored as one flat vector `[X_1..X_K, Y_1..Y_{JK}]` so
//! the generic [`Rk4`] stepper can advance it without copies.

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magnitude above which a state component is treated as blown up.
pub const BLOWUP_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    /// Number of slow variables.
    pub k: usize,
    /// Fast variables per slow variable.
    pub j: usize,
    pub forcing: f64,
    /// Coupling constant.
    pub h: f64,
    /// Spatial scale ratio.
    pub b: f64,
    /// Temporal scale ratio.
    pub c: f64,
    /// Integrator step (MTU).
    pub dt: f64,
    /// Simulation horizon (MTU), measured after spin-up.
    pub t_end: f64,
    /// Discarded spin-up before t = 0 (MTU).
    #[serde(default = "default_spin_up")]
    pub spin_up: f64,
    pub seed: u64,
}

fn default_spin_up() -> f64 {
    2.0
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self {
            k: 8,
            j: 32,
            forcing: 15.0,
            h: 1.0,
            b: 10.0,
            c: 10.0,
            dt: 0.005,
            t_end: 100.0,
            spin_up: default_spin_up(),
            seed: 0,
        }
    }
}

impl TruthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 4 {
            return Err(Error::config("truth.k", "K must be at least 4"));
        }
        if self.j < 3 {
            return Err(Error::config("truth.j", "J must be at least 3"));
        }
        for (name, v) in [("truth.dt", self.dt), ("truth.t_end", self.t_end)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.spin_up >= 0.0) {
            return Err(Error::config("truth.spin_up", "must be non-negative"));
        }
        for (name, v) in [
            ("truth.forcing", self.forcing),
            ("truth.h", self.h),
            ("truth.b", self.b),
            ("truth.c", self.c),
        ] {
            if !v.is_finite() {
                return Err(Error::config(name, "must be finite"));
            }
        }
        if self.b == 0.0 {
            return Err(Error::config("truth.b", "must be non-zero"));
        }
        Ok(())
    }

    /// Number of fast variables, `J·K`.
    pub fn fast_dim(&self) -> usize {
        self.j * self.k
    }

    pub fn state_dim(&self) -> usize {
        self.k + self.fast_dim()
    }

    /// `hc/b`, the slow/fast coupling coefficient.
    pub fn coupling_coeff(&self) -> f64 {
        self.h * self.c / self.b
    }

    /// Number of integration steps to reach `t_end`.
    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl FullState {
    pub fn zeros(cfg: &TruthConfig) -> Self {
        Self {
            x: vec![0.0; cfg.k],
            y: vec![0.0; cfg.fast_dim()],
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.x.len() + self.y.len());
        v.extend_from_slice(&self.x);
        v.extend_from_slice(&self.y);
        v
    }

    pub fn from_flat(flat: &[f64], k: usize) -> Self {
        Self {
            x: flat[..k].to_vec(),
            y: flat[k..].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.y).all(|v| v.is_finite())
    }

    fn check_dims(&self, cfg: &TruthConfig) -> Result<()> {
        if self.x.len() != cfg.k {
            return Err(Error::config(
                "state.x",
                format!("expected {} slow values, got {}", cfg.k, self.x.len()),
            ));
        }
        if self.y.len() != cfg.fast_dim() {
            return Err(Error::config(
                "state.y",
                format!("expected {} fast values, got {}", cfg.fast_dim(), self.y.len()),
            ));
        }
        Ok(())
    }
}

/// Resolved slice of the state at a given time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowState {
    pub x: Vec<f64>,
    pub t: f64,
}

/// Writes the Lorenz '96 tendencies for a flat `[X, Y]` state into `out`.
pub(crate) fn truth_rhs_flat(cfg: &TruthConfig, state: &[f64], out: &mut [f64]) {
    let k_n = cfg.k;
    let jk = cfg.fast_dim();
    let j_n = cfg.j;
    let (x, y) = state.split_at(k_n);
    let (dx, dy) = out.split_at_mut(k_n);
    let hcb = cfg.coupling_coeff();
    let cb = cfg.c * cfg.b;

    for k in 0..k_n {
        let km1 = (k + k_n - 1) % k_n;
        let km2 = (k + k_n - 2) % k_n;
        let kp1 = (k + 1) % k_n;
        let coupling: f64 = y[k * j_n..(k + 1) * j_n].iter().sum();
        dx[k] = -x[km1] * (x[km2] - x[kp1]) - x[k] + cfg.forcing - hcb * coupling;
    }
    for j in 0..jk {
        let jp1 = (j + 1) % jk;
        let jp2 = (j + 2) % jk;
        let jm1 = (j + jk - 1) % jk;
        dy[j] = -cb * y[jp1] * (y[jp2] - y[jm1]) - cfg.c * y[j] + hcb * x[j / j_n];
    }
}

/// Exact coupling term `-(hc/b)·Σ_j Y_j` for every slow site.
pub fn coupling_term(cfg: &TruthConfig, y: &[f64]) -> Vec<f64> {
    let hcb = cfg.coupling_coeff();
    y.chunks(cfg.j).map(|c| -hcb * c.iter().sum::<f64>()).collect()
}

/// Time derivative of the full two-scale system. The returned value holds
/// `dX/dt` in `x` and `dY/dt` in `y`.
pub fn truth_rhs(state: &FullState, cfg: &TruthConfig) -> Result<FullState> {
    state.check_dims(cfg)?;
    let flat = state.to_flat();
    let mut out = vec![0.0; flat.len()];
    truth_rhs_flat(cfg, &flat, &mut out);
    Ok(FullState::from_flat(&out, cfg.k))
}

/// Reusable scratch space for classical fourth-order Runge-Kutta steps.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    /// Advances `state` in place by one step of size `h`.
    pub fn step<F>(&mut self, rhs: &F, state: &mut [f64], h: f64)
    where
        F: Fn(&[f64], &mut [f64]),
    {
        rhs(state, &mut self.k1);
        for i in 0..state.len() {
            self.tmp[i] = state[i] + 0.5 * h * self.k1[i];
        }
        rhs(&self.tmp, &mut self.k2);
        for i in 0..state.len() {
            self.tmp[i] = state[i] + 0.5 * h * self.k2[i];
        }
        rhs(&self.tmp, &mut self.k3);
        for i in 0..state.len() {
            self.tmp[i] = state[i] + h * self.k3[i];
        }
        rhs(&self.tmp, &mut self.k4);
        for i in 0..state.len() {
            state[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// One classical RK4 step of `rhs` from `state` with step size `step`.
///
/// A non-finite result is reported as a blowup at step index 1.
pub fn rk4_step<F>(rhs: F, state: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]),
{
    if !(step > 0.0) {
        return Err(Error::config("step", "RK4 step must be positive"));
    }
    let mut out = state.to_vec();
    Rk4::new(state.len()).step(&rhs, &mut out, step);
    if !all_bounded(&out) {
        return Err(Error::Blowup { step: 1, time: step });
    }
    Ok(out)
}

pub(crate) fn all_bounded(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite() && x.abs() <= BLOWUP_THRESHOLD)
}

/// Draws `X ~ N(0, 1)` and `Y ~ N(0, 0.1²)` from the configured seed.
pub fn random_initial_state(cfg: &TruthConfig) -> FullState {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let nx = Normal::new(0.0, 1.0).unwrap();
    let ny = Normal::new(0.0, 0.1).unwrap();
    let x = (0..cfg.k).map(|_| nx.sample(&mut rng)).collect();
    let y = (0..cfg.fast_dim()).map(|_| ny.sample(&mut rng)).collect();
    FullState { x, y }
}

/// Random initial state advanced through the configured spin-up, so that it
/// sits on the attractor.
pub fn attractor_initial_state(cfg: &TruthConfig) -> Result<FullState> {
    cfg.validate()?;
    let mut flat = random_initial_state(cfg).to_flat();
    let n_spin = (cfg.spin_up / cfg.dt).round() as usize;
    let rhs = |s: &[f64], out: &mut [f64]| truth_rhs_flat(cfg, s, out);
    let mut rk = Rk4::new(flat.len());
    for step in 1..=n_spin {
        rk.step(&rhs, &mut flat, cfg.dt);
        if !all_bounded(&flat) {
            return Err(Error::Blowup {
                step,
                time: step as f64 * cfg.dt - cfg.spin_up,
            });
        }
    }
    Ok(FullState::from_flat(&flat, cfg.k))
}

/// Stored truth run: slow and fast states plus the exact coupling term at
/// every integration step.
#[derive(Debug, Clone)]
pub struct TruthTrajectory {
    pub times: Vec<f64>,
    /// `[n_times × K]`
    pub x: Array2<f64>,
    /// `[n_times × JK]`
    pub y: Array2<f64>,
    /// `[n_times × K]`, `-(hc/b)·ΣY` per slow site.
    pub coupling: Array2<f64>,
    pub dt: f64,
}

impl TruthTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn full_state(&self, i: usize) -> FullState {
        FullState {
            x: self.x.row(i).to_vec(),
            y: self.y.row(i).to_vec(),
        }
    }

    /// Every `stride`-th slow state, starting at index 0.
    pub fn subsample_x(&self, stride: usize) -> Array2<f64> {
        self.x.slice(s![..;stride, ..]).to_owned()
    }

    pub fn subsample_coupling(&self, stride: usize) -> Array2<f64> {
        self.coupling.slice(s![..;stride, ..]).to_owned()
    }
}

/// Outcome of an integration that may stop early at a blowup.
#[derive(Debug, Clone)]
pub struct TruthRun {
    pub trajectory: TruthTrajectory,
    /// `(step, time)` of the first non-finite or out-of-bounds state.
    pub blowup: Option<(usize, f64)>,
}

/// Integrates the truth model from `x0`, stopping at the first blown-up
/// state. The returned trajectory holds every state up to (excluding) the
/// offending one.
pub fn integrate_truth(cfg: &TruthConfig, x0: &FullState) -> Result<TruthRun> {
    cfg.validate()?;
    x0.check_dims(cfg)?;
    if !x0.is_finite() {
        return Err(Error::config("x0", "initial state must be finite"));
    }
    let n = cfg.n_steps();
    let (k, jk) = (cfg.k, cfg.fast_dim());
    let mut x = Array2::zeros((n + 1, k));
    let mut y = Array2::zeros((n + 1, jk));
    let mut coupling = Array2::zeros((n + 1, k));
    let mut times = Vec::with_capacity(n + 1);

    let mut flat = x0.to_flat();
    let rhs = |s: &[f64], out: &mut [f64]| truth_rhs_flat(cfg, s, out);
    let mut rk = Rk4::new(flat.len());
    let mut store = |i: usize, flat: &[f64], times: &mut Vec<f64>| {
        x.row_mut(i).assign(&ArrayView1::from(&flat[..k]));
        y.row_mut(i).assign(&ArrayView1::from(&flat[k..]));
        coupling
            .row_mut(i)
            .assign(&Array1::from(coupling_term(cfg, &flat[k..])));
        times.push(i as f64 * cfg.dt);
    };
    store(0, &flat, &mut times);
    let mut blowup = None;
    for step in 1..=n {
        rk.step(&rhs, &mut flat, cfg.dt);
        if !all_bounded(&flat) {
            blowup = Some((step, step as f64 * cfg.dt));
            break;
        }
        store(step, &flat, &mut times);
    }
    let stored = times.len();
    let trajectory = TruthTrajectory {
        times,
        x: x.slice(s![..stored, ..]).to_owned(),
        y: y.slice(s![..stored, ..]).to_owned(),
        coupling: coupling.slice(s![..stored, ..]).to_owned(),
        dt: cfg.dt,
    };
    Ok(TruthRun { trajectory, blowup })
}

/// Integrates the truth model over `[0, t_end]`, failing on blowup.
pub fn simulate_truth(cfg: &TruthConfig, x0: &FullState) -> Result<TruthTrajectory> {
    let run = integrate_truth(cfg, x0)?;
    match run.blowup {
        Some((step, time)) => Err(Error::Blowup { step, time }),
        None => Ok(run.trajectory),
    }
}

/// Subsampled, noise-corrupted slow-variable series used for training.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub times: Vec<f64>,
    /// `[n_points × K]`
    pub states: Array2<f64>,
    pub noise_fraction: f64,
    /// Per-variable standard deviation of the clean subsampled series.
    pub per_var_std: Vec<f64>,
    pub seed: u64,
    pub stride: usize,
    /// Spacing of `times`.
    pub delta_t: f64,
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn k(&self) -> usize {
        self.states.ncols()
    }

    /// Checks the documented invariants.
    pub fn validate(&self) -> Result<()> {
        if self.states.nrows() != self.times.len() {
            return Err(Error::config(
                "observations.states",
                "row count differs from the time grid length",
            ));
        }
        if self.per_var_std.len() != self.k() {
            return Err(Error::config("observations.per_var_std", "length differs from K"));
        }
        for w in self.times.windows(2) {
            let d = w[1] - w[0];
            if !(d > 0.0) || ((d - self.delta_t) / self.delta_t).abs() > 1e-9 {
                return Err(Error::config(
                    "observations.times",
                    "grid must be strictly increasing with uniform spacing",
                ));
            }
        }
        if self.noise_fraction > 0.0 && self.per_var_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config(
                "observations.per_var_std",
                "must be positive when noise is applied",
            ));
        }
        Ok(())
    }
}

/// Keeps every `stride`-th slow state and adds independent Gaussian noise
/// with standard deviation `noise_fraction·σ_k` per variable.
pub fn make_observations(
    traj: &TruthTrajectory,
    stride: usize,
    noise_fraction: f64,
    seed: u64,
) -> Result<ObservationSet> {
    if stride == 0 {
        return Err(Error::config("observation.stride", "must be at least 1"));
    }
    if !(noise_fraction >= 0.0 && noise_fraction.is_finite()) {
        return Err(Error::config("observation.noise_fraction", "must be non-negative"));
    }
    let clean = traj.subsample_x(stride);
    let times: Vec<f64> = traj.times.iter().step_by(stride).copied().collect();
    let per_var_std: Vec<f64> = clean
        .columns()
        .into_iter()
        .map(|c| c.std(0.0))
        .collect();

    let mut states = clean;
    if noise_fraction > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).unwrap();
        // Row-major draw order keeps the noise stream independent of K.
        for mut row in states.rows_mut() {
            for (v, s) in row.iter_mut().zip(&per_var_std) {
                *v += noise_fraction * s * unit.sample(&mut rng);
            }
        }
    }
    let obs = ObservationSet {
        times,
        states,
        noise_fraction,
        per_var_std,
        seed,
        stride,
        delta_t: traj.dt * stride as f64,
    };
    obs.validate()?;
    Ok(obs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovOptions {
    /// Discarded transient (MTU).
    pub transient: f64,
    /// Averaging window (MTU).
    pub averaging: f64,
    /// Time between perturbation renormalizations (MTU).
    pub renorm_interval: f64,
    /// Perturbation size in the slow variables.
    pub perturbation: f64,
}

impl Default for LyapunovOptions {
    fn default() -> Self {
        Self {
            transient: 5.0,
            averaging: 50.0,
            renorm_interval: 0.05,
            perturbation: 1e-8,
        }
    }
}

/// Largest Lyapunov exponent (1/MTU) with default options.
pub fn estimate_max_lyapunov(cfg: &TruthConfig) -> Result<f64> {
    estimate_max_lyapunov_with(cfg, &LyapunovOptions::default())
}

/// Benettin-style estimate: a reference and a perturbed trajectory are
/// integrated side by side; every `renorm_interval` the growth of their
/// slow-variable separation is logged and the full-state difference is
/// rescaled back to `perturbation`.
pub fn estimate_max_lyapunov_with(cfg: &TruthConfig, opts: &LyapunovOptions) -> Result<f64> {
    cfg.validate()?;
    if !(opts.renorm_interval >= cfg.dt && opts.averaging > 0.0 && opts.perturbation > 0.0) {
        return Err(Error::config("lyapunov", "invalid estimator options"));
    }
    let mut reference = random_initial_state(cfg).to_flat();
    let rhs = |s: &[f64], out: &mut [f64]| truth_rhs_flat(cfg, s, out);
    let mut rk = Rk4::new(reference.len());
    let n_transient = ((cfg.spin_up + opts.transient) / cfg.dt).round() as usize;
    for step in 1..=n_transient {
        rk.step(&rhs, &mut reference, cfg.dt);
        if !all_bounded(&reference) {
            return Err(Error::Blowup {
                step,
                time: step as f64 * cfg.dt,
            });
        }
    }

    let k = cfg.k;
    let d0 = opts.perturbation;
    let dir_norm = (k as f64).sqrt();
    let mut perturbed = reference.clone();
    for v in &mut perturbed[..k] {
        *v += d0 / dir_norm;
    }

    let steps_per_renorm = (opts.renorm_interval / cfg.dt).round() as usize;
    let interval = steps_per_renorm as f64 * cfg.dt;
    let n_renorm = (opts.averaging / interval).round() as usize;
    let mut log_growth = 0.0;
    let mut step = n_transient;
    for _ in 0..n_renorm {
        for _ in 0..steps_per_renorm {
            rk.step(&rhs, &mut reference, cfg.dt);
            rk.step(&rhs, &mut perturbed, cfg.dt);
            step += 1;
        }
        if !all_bounded(&reference) || !all_bounded(&perturbed) {
            return Err(Error::Blowup {
                step,
                time: step as f64 * cfg.dt,
            });
        }
        let d = reference[..k]
            .iter()
            .zip(&perturbed[..k])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if d == 0.0 {
            return Err(Error::Metric("perturbation collapsed to zero".into()));
        }
        log_growth += (d / d0).ln();
        let scale = d0 / d;
        for (p, r) in perturbed.iter_mut().zip(&reference) {
            *p = r + (*p - r) * scale;
        }
    }
    Ok(log_growth / (n_renorm as f64 * interval))
}
