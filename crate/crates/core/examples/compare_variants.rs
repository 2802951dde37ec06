//! Trains and samples both closure variants on one dataset and prints their
//! forecast scores as JSON.
//!
//! ```text
//! cargo run --release --example compare_variants -- desk
//! ```

use hist_closure::experiment::{compare_variants, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let preset = std::env::args().nth(1).unwrap_or_else(|| "toy".into());
    let cfg = ExperimentConfig::preset(&preset)?;
    let cmp = compare_variants(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&cmp)?);
    Ok(())
}
