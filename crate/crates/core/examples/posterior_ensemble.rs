//! Trains a closure, samples its posterior with HMC and scores the ensemble
//! forecast: mean-forecast RMSE, out-of-2σ fraction and relative spread.
//!
//! ```text
//! cargo run --release --example posterior_ensemble -- toy
//! ```

use hist_closure::experiment::{dataset_target, generate_data, train_variant, ExperimentConfig};
use hist_closure::forecast::{ensemble_metrics, forecast_ensemble, EnsembleOptions};
use hist_closure::hmc::run_chain;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = ExperimentConfig::preset(&std::env::args().nth(1).unwrap_or_else(|| "toy".into()))?;
    let ccfg = cfg.closure_config();
    let data = generate_data(&cfg)?;
    let report = train_variant(&cfg, &data.observations)?;
    let chain = run_chain(&report, &data.observations, &ccfg, &cfg.hmc)?;
    println!("{} HMC steps, acceptance rate {:.3}", chain.len(), chain.acceptance_rate);

    let target = dataset_target(&cfg, &data)?;
    let opts = EnsembleOptions {
        burn_in: cfg.forecast.burn_in,
        thinning: cfg.forecast.thinning,
        predictive_noise: cfg.forecast.predictive_noise,
        seed: cfg.hmc.seed,
    };
    let ens = forecast_ensemble(&chain, cfg.architecture(), &target.window, cfg.horizon_ticks(), &ccfg, &opts)?;
    let m = ensemble_metrics(target.states.view(), target.closure.view(), &ens)?;
    println!("{}", serde_json::to_string_pretty(&m.summary())?);
    Ok(())
}
