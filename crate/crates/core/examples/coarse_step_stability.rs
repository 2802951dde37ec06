//! The full truth model blows up when stepped at the coarse model's step,
//! while a trained history closure at the same step stays bounded.
//!
//! ```text
//! cargo run --release --example coarse_step_stability -- desk
//! ```

use hist_closure::experiment::{generate_data, train_variant, ExperimentConfig};
use hist_closure::forecast::coarse_step_stability_experiment;
use hist_closure::truth::attractor_initial_state;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = ExperimentConfig::preset(&std::env::args().nth(1).unwrap_or_else(|| "toy".into()))?;
    let data = generate_data(&cfg)?;
    let report = train_variant(&cfg, &data.observations)?;
    let x0 = attractor_initial_state(&cfg.truth)?;
    let s = coarse_step_stability_experiment(&cfg.truth, &x0, &report.final_params, &cfg.closure_config(), 10.0)?;
    match s.truth_divergence_time {
        Some(t) => println!("truth at step {} diverges at t = {t:.2} MTU", s.coarse_step),
        None => println!("truth at step {} stays finite", s.coarse_step),
    }
    match s.model_divergence_time {
        Some(t) => println!("history model diverges at t = {t:.2} MTU"),
        None => println!(
            "history model finite over {} MTU, rmse {:.3}",
            s.horizon,
            s.model_rmse.unwrap_or(f64::NAN)
        ),
    }
    Ok(())
}
