//! Reverse-mode gradient of a closure network compared with central
//! differences on a few weights.
//!
//! ```text
//! cargo run --release --example closure_gradients
//! ```

use hist_closure::mlp::{ClosureParams, MlpArchitecture};
use ndarray::Array2;

fn main() {
    let arch = MlpArchitecture::new(3, 2, 16, 1);
    let params = ClosureParams::glorot(arch, 7);
    let x = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - 2.0) * 0.7 + j as f64 * 0.3);

    let objective = |p: &ClosureParams| p.forward_batch(x.view()).sum();
    let (_, tape) = params.forward_taped(x.view());
    let mut grad = vec![0.0; params.len()];
    params.backward(&tape, Array2::ones((5, 1)).view(), &mut grad);

    println!("{} parameters; Σ outputs = {:.6}", params.len(), objective(&params));
    let h = 1e-6;
    for i in [0, 17, 100, params.len() - 1] {
        let mut plus = params.clone();
        plus.flat[i] += h;
        let mut minus = params.clone();
        minus.flat[i] -= h;
        let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
        println!("θ[{i:3}]: reverse {:+.8e}, central difference {fd:+.8e}", grad[i]);
    }
}
