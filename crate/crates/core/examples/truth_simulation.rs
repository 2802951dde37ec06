//! Integrates the two-scale truth model from a spun-up attractor state,
//! draws sparse noisy observations and estimates the largest Lyapunov
//! exponent.
//!
//! ```text
//! cargo run --release --example truth_simulation
//! ```

use hist_closure::truth::{
    attractor_initial_state, estimate_max_lyapunov, make_observations, simulate_truth, TruthConfig,
};

fn main() -> hist_closure::Result<()> {
    let cfg = TruthConfig {
        t_end: 20.0,
        ..TruthConfig::default()
    };
    let x0 = attractor_initial_state(&cfg)?;
    let traj = simulate_truth(&cfg, &x0)?;
    let obs = make_observations(&traj, 2, 0.03, 11)?;
    println!(
        "K = {}, J = {}, F = {}: {} truth steps, {} observations every {} MTU",
        cfg.k,
        cfg.j,
        cfg.forcing,
        traj.len(),
        obs.len(),
        2.0 * cfg.dt
    );
    for k in 0..cfg.k {
        let col = traj.x.column(k);
        let mean = col.mean().unwrap_or(f64::NAN);
        println!(
            "X{}: mean {mean:6.3}, clean std {:.3}, coupling mean {:6.3}",
            k + 1,
            obs.per_var_std[k],
            traj.coupling.column(k).mean().unwrap_or(f64::NAN)
        );
    }
    println!("largest Lyapunov exponent: {:.2} per MTU", estimate_max_lyapunov(&cfg)?);
    Ok(())
}
