//! Parameterized slow dynamics and their differentiable time stepping.
//!
//! Two closed systems share one stepping kernel:
//!
//! * the instantaneous ODE `dX_k/dt = A_k(X) + F + P(X_k; θ)`, advanced with
//!   classical RK4 at the observation spacing `Δt`;
//! * the history DDE `dX_k/dt = A_k(X) + F + P(X_k(t), X_k(t-τ_1), …; θ)`
//!   with lags `τ_i = 2iΔt`, advanced with RK4 at step `2Δt`.
//!
//! Here `A_k(X) = -X_{k-1}(X_{k-2} - X_{k+1}) - X_k` is the cyclic advection
//! and damping of the resolved variables.
//!
//! For the DDE the four RK4 stages read their delayed inputs from a window of
//! states spaced `Δt` apart (offset `o` means time `t - oΔt`):
//!
//! | stage | current state  | lagged inputs             |
//! |-------|----------------|---------------------------|
//! | r1    | X(t)           | 2, 4, …, 2n_h             |
//! | r2    | X(t) + r1/2    | 1, 3, …, 2n_h - 1         |
//! | r3    | X(t) + r2/2    | 1, 3, …, 2n_h - 1         |
//! | r4    | X(t) + r3      | 0, 2, …, 2n_h - 2         |
//!
//! so a step never needs data off the `Δt` grid. Forecasting runs two
//! interleaved `2Δt` chains (anchored on even and odd multiples of `Δt`),
//! each supplying the other's odd-offset lags; see [`rollout`].

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{ClosureParams, MlpTape};
use crate::truth::{all_bounded, ObservationSet, SlowState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Delay equation with lagged closure inputs, stepped at `2Δt`.
    #[default]
    History,
    /// Closure of the current state only, stepped at `Δt`.
    Instantaneous,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::History => "history",
            Variant::Instantaneous => "instantaneous",
        }
    }
}

/// What the network sees when evaluating the closure at site `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputStencil {
    /// `X_k` at the current time and each lag: `n_lags + 1` inputs.
    #[default]
    SiteLocal,
    /// The whole resolved state, cyclically rotated so site `k` comes first,
    /// at the current time and each lag: `K·(n_lags + 1)` inputs.
    FullState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryConfig {
    /// Number of lags.
    pub n_h: usize,
    /// Observation spacing (MTU).
    pub delta_t: f64,
}

impl HistoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_h == 0 {
            return Err(Error::config("closure.history.n_h", "must be at least 1"));
        }
        if !(self.delta_t > 0.0) {
            return Err(Error::config("closure.history.delta_t", "must be positive"));
        }
        Ok(())
    }

    /// Lags `τ_i = 2iΔt`, `i = 1..=n_h`.
    pub fn lags(&self) -> Vec<f64> {
        (1..=self.n_h).map(|i| 2.0 * i as f64 * self.delta_t).collect()
    }

    /// States needed to start a forecast: `2n_h + 2`.
    pub fn window_len(&self) -> usize {
        2 * self.n_h + 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosureConfig {
    pub variant: Variant,
    pub history: HistoryConfig,
    pub forcing: f64,
    #[serde(default)]
    pub stencil: InputStencil,
}

impl ClosureConfig {
    pub fn history(n_h: usize, delta_t: f64, forcing: f64) -> Self {
        Self {
            variant: Variant::History,
            history: HistoryConfig { n_h, delta_t },
            forcing,
            stencil: InputStencil::SiteLocal,
        }
    }

    pub fn instantaneous(delta_t: f64, forcing: f64) -> Self {
        Self {
            variant: Variant::Instantaneous,
            history: HistoryConfig { n_h: 1, delta_t },
            forcing,
            stencil: InputStencil::SiteLocal,
        }
    }

    pub fn n_lags(&self) -> usize {
        match self.variant {
            Variant::History => self.history.n_h,
            Variant::Instantaneous => 0,
        }
    }

    /// Network input width for `k` resolved variables.
    pub fn input_dim(&self, k: usize) -> usize {
        let per_site = match self.stencil {
            InputStencil::SiteLocal => 1,
            InputStencil::FullState => k,
        };
        per_site * (self.n_lags() + 1)
    }

    /// Consecutive states needed to start a rollout.
    pub fn window_len(&self) -> usize {
        match self.variant {
            Variant::History => self.history.window_len(),
            Variant::Instantaneous => 1,
        }
    }

    pub fn stepper(&self) -> Stepper {
        match self.variant {
            Variant::History => Stepper::history(&self.history, self.forcing),
            Variant::Instantaneous => Stepper::instantaneous(self.history.delta_t, self.forcing),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.history.validate()?;
        if !self.forcing.is_finite() {
            return Err(Error::config("closure.forcing", "must be finite"));
        }
        Ok(())
    }

    /// Checks that `params` fit this configuration for `k` sites.
    pub fn check_params(&self, params: &ClosureParams, k: usize) -> Result<()> {
        self.validate()?;
        params.arch.validate()?;
        if params.arch.output_dim != 1 {
            return Err(Error::config("closure.arch.output_dim", "closure network must output one value"));
        }
        let want = self.input_dim(k);
        if params.arch.input_dim != want {
            return Err(Error::config(
                "closure.arch.input_dim",
                format!("{} variant needs {want} inputs, got {}", self.variant.name(), params.arch.input_dim),
            ));
        }
        Ok(())
    }
}

/// A subgrid tendency `P` evaluated for a batch of states.
///
/// `current` is `[B × K]`, each entry of `lags` likewise; `times` holds the
/// physical time of every batch row. Returns `[B × K]`.
pub trait Closure {
    fn evaluate(&self, times: &[f64], current: ArrayView2<'_, f64>, lags: &[ArrayView2<'_, f64>]) -> Array2<f64>;
}

/// `P ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroClosure;

impl Closure for ZeroClosure {
    fn evaluate(&self, _: &[f64], current: ArrayView2<'_, f64>, _: &[ArrayView2<'_, f64>]) -> Array2<f64> {
        Array2::zeros(current.dim())
    }
}

/// Replays a stored coupling-term series (e.g. the exact truth coupling) by
/// time lookup, ignoring the state. Times off the stored grid are rounded to
/// the nearest sample; times outside it yield NaN.
#[derive(Debug, Clone)]
pub struct CouplingLookup {
    pub t0: f64,
    pub dt: f64,
    /// `[n_times × K]`
    pub values: Array2<f64>,
}

impl Closure for CouplingLookup {
    fn evaluate(&self, times: &[f64], current: ArrayView2<'_, f64>, _: &[ArrayView2<'_, f64>]) -> Array2<f64> {
        let mut out = Array2::from_elem(current.dim(), f64::NAN);
        for (b, t) in times.iter().enumerate() {
            let idx = ((t - self.t0) / self.dt).round();
            if idx >= 0.0 && (idx as usize) < self.values.nrows() {
                out.row_mut(b).assign(&self.values.row(idx as usize));
            }
        }
        out
    }
}

/// The neural closure `P(·; θ)`.
#[derive(Debug, Clone, Copy)]
pub struct NeuralClosure<'a> {
    pub params: &'a ClosureParams,
    pub stencil: InputStencil,
}

impl<'a> NeuralClosure<'a> {
    pub fn new(params: &'a ClosureParams, stencil: InputStencil) -> Self {
        Self { params, stencil }
    }

    fn inputs(&self, current: ArrayView2<'_, f64>, lags: &[ArrayView2<'_, f64>]) -> Array2<f64> {
        let (b_n, k_n) = current.dim();
        let slots: Vec<ArrayView2<'_, f64>> = std::iter::once(current).chain(lags.iter().copied()).collect();
        match self.stencil {
            InputStencil::SiteLocal => {
                let mut inp = Array2::zeros((b_n * k_n, slots.len()));
                for (s, slot) in slots.iter().enumerate() {
                    for b in 0..b_n {
                        for k in 0..k_n {
                            inp[[b * k_n + k, s]] = slot[[b, k]];
                        }
                    }
                }
                inp
            }
            InputStencil::FullState => {
                let mut inp = Array2::zeros((b_n * k_n, slots.len() * k_n));
                for (s, slot) in slots.iter().enumerate() {
                    for b in 0..b_n {
                        for k in 0..k_n {
                            for i in 0..k_n {
                                inp[[b * k_n + k, s * k_n + i]] = slot[[b, (k + i) % k_n]];
                            }
                        }
                    }
                }
                inp
            }
        }
    }

    /// Routes `∂L/∂inputs` back to the current state and each lag.
    fn scatter(&self, dinp: &Array2<f64>, b_n: usize, k_n: usize, n_lags: usize) -> (Array2<f64>, Vec<Array2<f64>>) {
        let mut slots = vec![Array2::zeros((b_n, k_n)); n_lags + 1];
        match self.stencil {
            InputStencil::SiteLocal => {
                for (s, slot) in slots.iter_mut().enumerate() {
                    for b in 0..b_n {
                        for k in 0..k_n {
                            slot[[b, k]] += dinp[[b * k_n + k, s]];
                        }
                    }
                }
            }
            InputStencil::FullState => {
                for (s, slot) in slots.iter_mut().enumerate() {
                    for b in 0..b_n {
                        for k in 0..k_n {
                            for i in 0..k_n {
                                slot[[b, (k + i) % k_n]] += dinp[[b * k_n + k, s * k_n + i]];
                            }
                        }
                    }
                }
            }
        }
        let current = slots.remove(0);
        (current, slots)
    }

    fn evaluate_taped(&self, current: ArrayView2<'_, f64>, lags: &[ArrayView2<'_, f64>]) -> (Array2<f64>, MlpTape) {
        let (out, tape) = self.params.forward_taped(self.inputs(current, lags).view());
        (into_sites(out, current.dim()), tape)
    }

    fn vjp(
        &self,
        tape: &MlpTape,
        dp: ArrayView2<'_, f64>,
        n_lags: usize,
        grad: &mut [f64],
    ) -> (Array2<f64>, Vec<Array2<f64>>) {
        let (b_n, k_n) = dp.dim();
        let dout = dp.to_shape((b_n * k_n, 1)).unwrap();
        let dinp = self.params.backward(tape, dout.view(), grad);
        self.scatter(&dinp, b_n, k_n, n_lags)
    }
}

fn into_sites(out: Array2<f64>, dim: (usize, usize)) -> Array2<f64> {
    out.into_shape_with_order(dim).expect("one closure value per site")
}

impl Closure for NeuralClosure<'_> {
    fn evaluate(&self, _: &[f64], current: ArrayView2<'_, f64>, lags: &[ArrayView2<'_, f64>]) -> Array2<f64> {
        let out = self.params.forward_batch(self.inputs(current, lags).view());
        into_sites(out, current.dim())
    }
}

/// `-X_{k-1}(X_{k-2} - X_{k+1}) - X_k + F`, row-wise and cyclic in `k`.
pub fn advection(x: ArrayView2<'_, f64>, forcing: f64) -> Array2<f64> {
    let (b_n, k_n) = x.dim();
    let mut out = Array2::zeros((b_n, k_n));
    for b in 0..b_n {
        for k in 0..k_n {
            let km1 = x[[b, (k + k_n - 1) % k_n]];
            let km2 = x[[b, (k + k_n - 2) % k_n]];
            let kp1 = x[[b, (k + 1) % k_n]];
            out[[b, k]] = -km1 * (km2 - kp1) - x[[b, k]] + forcing;
        }
    }
    out
}

fn advection_vjp(x: ArrayView2<'_, f64>, g: ArrayView2<'_, f64>) -> Array2<f64> {
    let (b_n, k_n) = x.dim();
    let mut dx = Array2::zeros((b_n, k_n));
    for b in 0..b_n {
        for k in 0..k_n {
            let (im1, im2, ip1) = ((k + k_n - 1) % k_n, (k + k_n - 2) % k_n, (k + 1) % k_n);
            let gk = g[[b, k]];
            dx[[b, im1]] -= (x[[b, im2]] - x[[b, ip1]]) * gk;
            dx[[b, im2]] -= x[[b, im1]] * gk;
            dx[[b, ip1]] += x[[b, im1]] * gk;
            dx[[b, k]] -= gk;
        }
    }
    dx
}

/// Fraction of the step at which each RK4 stage is evaluated.
const STAGE_TIME: [f64; 4] = [0.0, 0.5, 0.5, 1.0];

/// RK4 step over a window of `Δt`-spaced states. Slot `o` of a window holds
/// the state at `t - oΔt`; slot 0 is the current state.
#[derive(Debug, Clone, PartialEq)]
pub struct Stepper {
    h: f64,
    stride: usize,
    n_slots: usize,
    lag_slots: [Vec<usize>; 4],
    forcing: f64,
    delta_t: f64,
}

/// Intermediate values of one taped step.
#[derive(Debug, Clone)]
pub(crate) struct StepTape {
    stage_states: Vec<Array2<f64>>,
    nets: Vec<MlpTape>,
}

impl Stepper {
    /// `2Δt` step of the history DDE.
    pub fn history(cfg: &HistoryConfig, forcing: f64) -> Self {
        let n_h = cfg.n_h;
        let even: Vec<usize> = (1..=n_h).map(|i| 2 * i).collect();
        let odd: Vec<usize> = (1..=n_h).map(|i| 2 * i - 1).collect();
        let last: Vec<usize> = (0..n_h).map(|i| 2 * i).collect();
        Self {
            h: 2.0 * cfg.delta_t,
            stride: 2,
            n_slots: 2 * n_h + 1,
            lag_slots: [even, odd.clone(), odd, last],
            forcing,
            delta_t: cfg.delta_t,
        }
    }

    /// `Δt` step of the instantaneous ODE.
    pub fn instantaneous(delta_t: f64, forcing: f64) -> Self {
        Self {
            h: delta_t,
            stride: 1,
            n_slots: 1,
            lag_slots: Default::default(),
            forcing,
            delta_t,
        }
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    /// Step length in units of `Δt`.
    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Window slots read by one step.
    pub fn slot_count(&self) -> usize {
        self.n_slots
    }

    /// Lag slots read by each stage, r1 first.
    pub fn stage_lag_slots(&self) -> &[Vec<usize>; 4] {
        &self.lag_slots
    }

    /// Lag offsets (in `Δt`) defining the closure's input signature.
    pub fn closure_lags(&self) -> &[usize] {
        &self.lag_slots[0]
    }

    fn stage_state(&self, x0: ArrayView2<'_, f64>, stage: usize, prev: Option<&Array2<f64>>) -> Array2<f64> {
        match (stage, prev) {
            (0, _) => x0.to_owned(),
            (1 | 2, Some(r)) => &x0 + &(r * 0.5),
            (3, Some(r)) => &x0 + r,
            _ => unreachable!(),
        }
    }

    fn combine(x0: ArrayView2<'_, f64>, r: &[Array2<f64>]) -> Array2<f64> {
        let mut out = x0.to_owned();
        for (ri, w) in r.iter().zip([1.0, 2.0, 2.0, 1.0]) {
            out.scaled_add(w / 6.0, ri);
        }
        out
    }

    /// Advances every batch row by one step. `anchor_times` is the time of
    /// slot 0 per row.
    pub fn step(&self, closure: &dyn Closure, anchor_times: &[f64], slots: &[ArrayView2<'_, f64>]) -> Array2<f64> {
        assert_eq!(slots.len(), self.n_slots, "window slot count");
        let x0 = slots[0];
        let mut r: Vec<Array2<f64>> = Vec::with_capacity(4);
        let mut times = vec![0.0; anchor_times.len()];
        for stage in 0..4 {
            let state = self.stage_state(x0, stage, r.last());
            let lags: Vec<_> = self.lag_slots[stage].iter().map(|&o| slots[o]).collect();
            for (t, a) in times.iter_mut().zip(anchor_times) {
                *t = a + STAGE_TIME[stage] * self.h;
            }
            let mut f = advection(state.view(), self.forcing);
            f += &closure.evaluate(&times, state.view(), &lags);
            f *= self.h;
            r.push(f);
        }
        Self::combine(x0, &r)
    }

    pub(crate) fn step_taped(&self, net: &NeuralClosure<'_>, slots: &[ArrayView2<'_, f64>]) -> (Array2<f64>, StepTape) {
        assert_eq!(slots.len(), self.n_slots, "window slot count");
        let x0 = slots[0];
        let mut r: Vec<Array2<f64>> = Vec::with_capacity(4);
        let mut tape = StepTape {
            stage_states: Vec::with_capacity(4),
            nets: Vec::with_capacity(4),
        };
        for stage in 0..4 {
            let state = self.stage_state(x0, stage, r.last());
            let lags: Vec<_> = self.lag_slots[stage].iter().map(|&o| slots[o]).collect();
            let (p, net_tape) = net.evaluate_taped(state.view(), &lags);
            let mut f = advection(state.view(), self.forcing);
            f += &p;
            f *= self.h;
            r.push(f);
            tape.stage_states.push(state);
            tape.nets.push(net_tape);
        }
        (Self::combine(x0, &r), tape)
    }

    /// Pulls `adj = ∂L/∂(new state)` back through a taped step. Adds the
    /// parameter gradient into `grad` and returns `∂L/∂slot` for every slot.
    pub(crate) fn step_vjp(
        &self,
        net: &NeuralClosure<'_>,
        tape: &StepTape,
        adj: ArrayView2<'_, f64>,
        grad: &mut [f64],
    ) -> Vec<Array2<f64>> {
        let mut dslots = vec![Array2::zeros(adj.dim()); self.n_slots];
        dslots[0] += &adj;
        let mut dr: Vec<Array2<f64>> = [1.0, 2.0, 2.0, 1.0].iter().map(|w| &adj * (w / 6.0)).collect();
        for stage in (0..4).rev() {
            let g = &dr[stage] * self.h;
            let state = tape.stage_states[stage].view();
            let mut dstate = advection_vjp(state, g.view());
            let n_lags = self.lag_slots[stage].len();
            let (dcur, dlags) = net.vjp(&tape.nets[stage], g.view(), n_lags, grad);
            dstate += &dcur;
            for (&o, dl) in self.lag_slots[stage].iter().zip(&dlags) {
                dslots[o] += dl;
            }
            dslots[0] += &dstate;
            match stage {
                1 | 2 => dr[stage - 1].scaled_add(0.5, &dstate),
                3 => dr[2] += &dstate,
                _ => {}
            }
        }
        dslots
    }
}

/// States of a batch of trajectories on the `Δt` grid, oldest first. Each
/// entry is `[B × K]`; entry `i` is at time `base_times[b] + iΔt`.
#[derive(Debug, Clone)]
pub(crate) struct Buffer {
    pub states: Vec<Array2<f64>>,
    pub base_times: Vec<f64>,
    pub n_init: usize,
}

impl Buffer {
    pub fn new(init: Vec<Array2<f64>>, base_times: Vec<f64>) -> Self {
        let n_init = init.len();
        Self {
            states: init,
            base_times,
            n_init,
        }
    }

    fn slots(&self, anchor: usize, n: usize) -> Vec<ArrayView2<'_, f64>> {
        (0..n).map(|o| self.states[anchor - o].view()).collect()
    }

    /// Emitted states (everything after the initial window).
    pub fn emitted(&self) -> &[Array2<f64>] {
        &self.states[self.n_init..]
    }
}

/// Advances `buf` by `horizon` ticks of `Δt`. Each new state at index `i` is
/// one step from the state at `i - stride`, so for the history stepper the
/// even- and odd-indexed states form two interleaved chains. Returns the
/// 1-based tick that first blew up, if any.
pub(crate) fn advance(stepper: &Stepper, closure: &dyn Closure, buf: &mut Buffer, horizon: usize) -> Option<usize> {
    assert!(buf.states.len() >= stepper.n_slots + stepper.stride - 1);
    let mut times = vec![0.0; buf.base_times.len()];
    for tick in 1..=horizon {
        let anchor = buf.states.len() - stepper.stride;
        for (t, b) in times.iter_mut().zip(&buf.base_times) {
            *t = b + anchor as f64 * stepper.delta_t;
        }
        let next = stepper.step(closure, &times, &buf.slots(anchor, stepper.n_slots));
        if !all_bounded(next.as_slice().unwrap()) {
            return Some(tick);
        }
        buf.states.push(next);
    }
    None
}

/// Taped counterpart of [`advance`]. A blowup is returned as `Err(tick)`.
pub(crate) fn advance_taped(
    stepper: &Stepper,
    net: &NeuralClosure<'_>,
    buf: &mut Buffer,
    horizon: usize,
) -> std::result::Result<Vec<StepTape>, usize> {
    let mut tapes = Vec::with_capacity(horizon);
    for tick in 1..=horizon {
        let anchor = buf.states.len() - stepper.stride;
        let (next, tape) = stepper.step_taped(net, &buf.slots(anchor, stepper.n_slots));
        if !all_bounded(next.as_slice().unwrap()) {
            return Err(tick);
        }
        buf.states.push(next);
        tapes.push(tape);
    }
    Ok(tapes)
}

/// Reverse sweep over a taped rollout. `emitted_adj[t]` is `∂L/∂(state at
/// emitted tick t)`. Adds `∂L/∂θ` into `grad`; returns the adjoints of the
/// initial window states, oldest first.
pub(crate) fn backprop(
    stepper: &Stepper,
    net: &NeuralClosure<'_>,
    buf: &Buffer,
    tapes: &[StepTape],
    emitted_adj: Vec<Array2<f64>>,
    grad: &mut [f64],
) -> Vec<Array2<f64>> {
    let n_init = buf.n_init;
    let dim = buf.states[0].dim();
    let mut adj: Vec<Array2<f64>> = (0..n_init).map(|_| Array2::zeros(dim)).collect();
    adj.extend(emitted_adj);
    assert_eq!(adj.len(), buf.states.len());
    for t in (0..tapes.len()).rev() {
        let i = n_init + t;
        let anchor = i - stepper.stride;
        let dslots = stepper.step_vjp(net, &tapes[t], adj[i].view(), grad);
        for (o, d) in dslots.into_iter().enumerate() {
            adj[anchor - o] += &d;
        }
    }
    adj.truncate(n_init);
    adj
}

/// Ordered states at `t, t-Δt, …, t-(2n_h+1)Δt`, newest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryWindow {
    pub states: Vec<SlowState>,
}

impl HistoryWindow {
    /// Window of `len` observations ending at row `newest`.
    pub fn from_observations(obs: &ObservationSet, newest: usize, len: usize) -> Result<Self> {
        if len == 0 || newest + 1 < len || newest >= obs.len() {
            return Err(Error::config(
                "window",
                format!("cannot take {len} rows ending at {newest} from {} observations", obs.len()),
            ));
        }
        let states = (0..len)
            .map(|o| SlowState {
                x: obs.states.row(newest - o).to_vec(),
                t: obs.times[newest - o],
            })
            .collect();
        Ok(Self { states })
    }

    /// Window from consecutive rows of a `[n × K]` array sampled every `Δt`
    /// from `t0`.
    pub fn from_rows(rows: ArrayView2<'_, f64>, newest: usize, len: usize, t0: f64, delta_t: f64) -> Result<Self> {
        if len == 0 || newest + 1 < len || newest >= rows.nrows() {
            return Err(Error::config("window", "window does not fit in the series"));
        }
        let states = (0..len)
            .map(|o| SlowState {
                x: rows.row(newest - o).to_vec(),
                t: t0 + (newest - o) as f64 * delta_t,
            })
            .collect();
        Ok(Self { states })
    }

    pub fn newest(&self) -> &SlowState {
        &self.states[0]
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn validate(&self, min_len: usize, delta_t: f64) -> Result<()> {
        if self.states.len() < min_len {
            return Err(Error::config(
                "window",
                format!("need {min_len} states, got {}", self.states.len()),
            ));
        }
        let k = self.states[0].x.len();
        for (o, w) in self.states.windows(2).enumerate() {
            if w[1].x.len() != k {
                return Err(Error::config("window", "inconsistent state dimension"));
            }
            let gap = w[0].t - w[1].t;
            if ((gap - delta_t) / delta_t).abs() > 1e-9 {
                return Err(Error::config(
                    "window",
                    format!("spacing between slots {o} and {} is {gap}, expected {delta_t}", o + 1),
                ));
            }
        }
        Ok(())
    }

    /// Oldest-first `[1 × K]` arrays for the rollout buffer.
    fn to_buffer(&self, n: usize) -> Buffer {
        let init: Vec<Array2<f64>> = self.states[..n]
            .iter()
            .rev()
            .map(|s| Array2::from_shape_vec((1, s.x.len()), s.x.clone()).unwrap())
            .collect();
        Buffer::new(init, vec![self.states[n - 1].t])
    }
}

/// Forecast along the `Δt` grid with the closure evaluated at every emitted
/// state.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub times: Vec<f64>,
    /// `[steps × K]`
    pub states: Array2<f64>,
    /// `[steps × K]`
    pub closures: Array2<f64>,
}

impl RolloutResult {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Tendency `dX/dt` of the parameterized slow system for one state. `lags`
/// holds the states at `t - τ_1, …, t - τ_{n_h}` (empty for the
/// instantaneous variant).
pub fn closure_rhs(params: &ClosureParams, cfg: &ClosureConfig, current: &[f64], lags: &[Vec<f64>]) -> Result<Vec<f64>> {
    let k = current.len();
    cfg.check_params(params, k)?;
    if lags.len() != cfg.n_lags() || lags.iter().any(|l| l.len() != k) {
        return Err(Error::config(
            "lags",
            format!("expected {} lagged states of length {k}", cfg.n_lags()),
        ));
    }
    let cur = ArrayView2::from_shape((1, k), current).unwrap();
    let lag_views: Vec<_> = lags.iter().map(|l| ArrayView2::from_shape((1, k), l).unwrap()).collect();
    let mut f = advection(cur, cfg.forcing);
    f += &NeuralClosure::new(params, cfg.stencil).evaluate(&[0.0], cur, &lag_views);
    Ok(f.into_raw_vec_and_offset().0)
}

fn blowup(tick: usize, t0: f64, delta_t: f64) -> Error {
    Error::Blowup {
        step: tick,
        time: t0 + tick as f64 * delta_t,
    }
}

/// One `2Δt` step of the history DDE from a window whose newest state is at
/// `t`. Only slots `0..=2n_h` are read.
pub fn dde_rk4_step(window: &HistoryWindow, params: &ClosureParams, cfg: &ClosureConfig) -> Result<SlowState> {
    let hist = ClosureConfig {
        variant: Variant::History,
        ..*cfg
    };
    let stepper = hist.stepper();
    step_from_window(window, params, &hist, &stepper)
}

/// One `Δt` RK4 step of the instantaneous ODE.
pub fn ode_rk4_step(state: &SlowState, params: &ClosureParams, cfg: &ClosureConfig) -> Result<SlowState> {
    let inst = ClosureConfig {
        variant: Variant::Instantaneous,
        ..*cfg
    };
    let window = HistoryWindow {
        states: vec![state.clone()],
    };
    step_from_window(&window, params, &inst, &inst.stepper())
}

fn step_from_window(
    window: &HistoryWindow,
    params: &ClosureParams,
    cfg: &ClosureConfig,
    stepper: &Stepper,
) -> Result<SlowState> {
    window.validate(stepper.slot_count(), cfg.history.delta_t)?;
    let k = window.newest().x.len();
    cfg.check_params(params, k)?;
    let slots: Vec<Array2<f64>> = window.states[..stepper.slot_count()]
        .iter()
        .map(|s| Array2::from_shape_vec((1, k), s.x.clone()).unwrap())
        .collect();
    let views: Vec<_> = slots.iter().map(|s| s.view()).collect();
    let t = window.newest().t;
    let next = stepper.step(&NeuralClosure::new(params, cfg.stencil), &[t], &views);
    if !all_bounded(next.as_slice().unwrap()) {
        return Err(blowup(stepper.stride(), t, cfg.history.delta_t));
    }
    Ok(SlowState {
        x: next.into_raw_vec_and_offset().0,
        t: t + stepper.step_size(),
    })
}

/// Rollout that keeps whatever was computed before a blowup. The second
/// value is the first blown-up tick and its time.
pub fn rollout_partial(
    init: &HistoryWindow,
    closure: &dyn Closure,
    cfg: &ClosureConfig,
    horizon: usize,
) -> Result<(RolloutResult, Option<(usize, f64)>)> {
    cfg.validate()?;
    let n_init = cfg.window_len();
    init.validate(n_init, cfg.history.delta_t)?;
    let stepper = cfg.stepper();
    let delta_t = cfg.history.delta_t;
    let mut buf = init.to_buffer(n_init);
    let failed = advance(&stepper, closure, &mut buf, horizon);

    let k = init.newest().x.len();
    let emitted = buf.emitted();
    let steps = emitted.len();
    let t_newest = init.newest().t;
    let mut states = Array2::zeros((steps, k));
    let mut closures = Array2::zeros((steps, k));
    let lags = stepper.closure_lags();
    for (t, s) in emitted.iter().enumerate() {
        states.row_mut(t).assign(&s.row(0));
        let i = n_init + t;
        let lag_views: Vec<_> = lags.iter().map(|&o| buf.states[i - o].view()).collect();
        let time = t_newest + (t + 1) as f64 * delta_t;
        let p = closure.evaluate(&[time], buf.states[i].view(), &lag_views);
        closures.row_mut(t).assign(&p.row(0));
    }
    let times = (1..=steps).map(|t| t_newest + t as f64 * delta_t).collect();
    let result = RolloutResult { times, states, closures };
    Ok((result, failed.map(|tick| (tick, t_newest + tick as f64 * delta_t))))
}

/// Online forecast of the history DDE for `horizon` ticks of `Δt` from a
/// `2n_h + 2` state window.
///
/// Tick 1 is one `2Δt` step from the window's second-newest state (the
/// chain anchored on even offsets from the oldest state), tick 2 one step
/// from the newest state, and so on: every new state is one step from the
/// state two ticks earlier, with odd-offset lags supplied by the other
/// chain.
pub fn rollout(init: &HistoryWindow, params: &ClosureParams, cfg: &ClosureConfig, horizon: usize) -> Result<RolloutResult> {
    let hist = ClosureConfig {
        variant: Variant::History,
        ..*cfg
    };
    rollout_with(init, &NeuralClosure::new(params, cfg.stencil), &hist, horizon, Some(params))
}

/// Online forecast of the instantaneous ODE for `horizon` ticks of `Δt`.
pub fn rollout_instantaneous(
    init: &SlowState,
    params: &ClosureParams,
    cfg: &ClosureConfig,
    horizon: usize,
) -> Result<RolloutResult> {
    let inst = ClosureConfig {
        variant: Variant::Instantaneous,
        ..*cfg
    };
    let window = HistoryWindow {
        states: vec![init.clone()],
    };
    rollout_with(&window, &NeuralClosure::new(params, cfg.stencil), &inst, horizon, Some(params))
}

/// Rollout with an arbitrary closure, e.g. [`CouplingLookup`] or
/// [`ZeroClosure`]. The stepper is chosen by `cfg.variant`.
pub fn rollout_with(
    init: &HistoryWindow,
    closure: &dyn Closure,
    cfg: &ClosureConfig,
    horizon: usize,
    params: Option<&ClosureParams>,
) -> Result<RolloutResult> {
    if horizon == 0 {
        return Err(Error::config("horizon", "must be at least 1"));
    }
    if let Some(p) = params {
        cfg.check_params(p, init.newest().x.len())?;
    }
    let (res, failed) = rollout_partial(init, closure, cfg, horizon)?;
    match failed {
        Some((tick, time)) => Err(Error::Blowup { step: tick, time }),
        None => Ok(res),
    }
}
