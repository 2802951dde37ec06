//! Deterministic two-phase training of a closure on simulated observations,
//! followed by a deterministic forecast.
//!
//! ```text
//! cargo run --release --example train_closure -- toy
//! ```

use hist_closure::experiment::{dataset_target, generate_data, train_variant, ExperimentConfig};
use hist_closure::forecast::{deterministic_metrics, forecast_deterministic};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = ExperimentConfig::preset(&std::env::args().nth(1).unwrap_or_else(|| "toy".into()))?;
    let data = generate_data(&cfg)?;
    let report = train_variant(&cfg, &data.observations)?;
    let n = report.loss_curve.len();
    println!(
        "{} closure, {} weights: loss {:.4e} -> {:.4e}, residual variance {:.4e}",
        report.variant.name(),
        report.final_params.len(),
        report.loss_curve[0],
        report.loss_curve[n - 1],
        report.residual_variance
    );
    let target = dataset_target(&cfg, &data)?;
    let fc = forecast_deterministic(&report.final_params, &target.window, cfg.horizon_ticks(), &cfg.closure_config())?;
    let m = deterministic_metrics(target.states.view(), target.closure.view(), &fc)?;
    println!(
        "forecast over {} MTU: state rmse {:.3}, closure rmse {:.3}",
        cfg.forecast.horizon, m.rmse_states, m.rmse_closure
    );
    Ok(())
}
