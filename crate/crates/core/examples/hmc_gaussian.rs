//! The Hamiltonian Monte Carlo sampler on a standard Normal target.
//!
//! ```text
//! cargo run --release --example hmc_gaussian
//! ```

use hist_closure::hmc::{sample, GaussianPotential, SamplerSettings};

fn main() -> hist_closure::Result<()> {
    let dim = 5;
    let chain = sample(
        &GaussianPotential::standard(dim),
        &vec![2.0; dim],
        &SamplerSettings {
            step_size: 0.25,
            leapfrog_steps: 8,
            n_steps: 5000,
            seed: 1,
        },
    )?;
    let kept = &chain.positions[chain.positions.len() / 4..];
    let n = kept.len() as f64;
    println!("acceptance rate {:.3}, {} draws after burn-in", chain.acceptance_rate(), kept.len());
    for d in 0..dim {
        let mean = kept.iter().map(|q| q[d]).sum::<f64>() / n;
        let var = kept.iter().map(|q| (q[d] - mean).powi(2)).sum::<f64>() / n;
        println!("coordinate {d}: mean {mean:+.3}, variance {var:.3}");
    }
    Ok(())
}
