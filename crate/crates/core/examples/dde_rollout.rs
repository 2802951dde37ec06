//! Online rollouts of the history-based (DDE) and instantaneous (ODE)
//! coarse models. Driving them with the exact coupling term shows the
//! stepping error alone; dropping the coupling shows what a closure has to
//! make up for.
//!
//! ```text
//! cargo run --release --example dde_rollout
//! ```

use hist_closure::closure::{rollout_with, ClosureConfig, CouplingLookup, HistoryWindow, ZeroClosure};
use hist_closure::forecast::rmse;
use hist_closure::truth::{attractor_initial_state, simulate_truth, TruthConfig};

fn main() -> hist_closure::Result<()> {
    let tc = TruthConfig {
        t_end: 5.2,
        ..TruthConfig::default()
    };
    let traj = simulate_truth(&tc, &attractor_initial_state(&tc)?)?;
    let grid = traj.subsample_x(2);
    let delta_t = 2.0 * tc.dt;
    let lookup = CouplingLookup {
        t0: 0.0,
        dt: tc.dt,
        values: traj.coupling.clone(),
    };
    for cfg in [ClosureConfig::history(2, delta_t, tc.forcing), ClosureConfig::instantaneous(delta_t, tc.forcing)] {
        let w = cfg.window_len();
        let init = HistoryWindow::from_rows(grid.view(), w - 1, w, 0.0, delta_t)?;
        for ticks in [100, 500] {
            let truth = grid.slice(ndarray::s![w..w + ticks, ..]);
            let exact = rollout_with(&init, &lookup, &cfg, ticks, None)?;
            let zero = rollout_with(&init, &ZeroClosure, &cfg, ticks, None)?;
            println!(
                "{:>13} at {:.0} MTU: exact coupling rmse {:.2e}, no coupling rmse {:.3}",
                cfg.variant.name(),
                ticks as f64 * delta_t,
                rmse(truth, exact.states.view())?.final_value,
                rmse(truth, zero.states.view())?.final_value
            );
        }
    }
    Ok(())
}
