//! Relative ensemble spread over a forcing × noise grid.
//!
//! ```text
//! cargo run --release --example uq_sweep -- toy
//! ```

use hist_closure::experiment::{pipeline_sigma_r, ExperimentConfig};
use hist_closure::forecast::uq_sweep;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cfg = ExperimentConfig::preset(&std::env::args().nth(1).unwrap_or_else(|| "toy".into()))?;
    let table = uq_sweep(&[5.0, 15.0], &[0.03, 0.1], |f, n| {
        let mut c = cfg.clone();
        c.truth.forcing = f;
        c.observation.noise_fraction = n;
        pipeline_sigma_r(&c)
    });
    for c in &table.cells {
        match (c.sigma_r, &c.error) {
            (Some(s), _) => println!("F = {:>4}, noise = {:.2}: σ_r = {s:+.4}", c.forcing, c.noise_fraction),
            (None, e) => println!("F = {:>4}, noise = {:.2}: failed ({e:?})", c.forcing, c.noise_fraction),
        }
    }
    println!(
        "increasing in forcing: {}, increasing in noise: {}",
        table.increasing_in_forcing(),
        table.increasing_in_noise()
    );
    Ok(())
}
