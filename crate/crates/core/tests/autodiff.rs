mod checks;
mod common;

use checks::autodiff::*;
use common::*;
use hist_closure::closure::{ClosureConfig, Variant};
use hist_closure::mlp::{ClosureParams, MlpArchitecture};
use hist_closure::train::{loss_and_grad, loss_history, loss_instantaneous};

#[test]
fn mlp_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let e = mlp_gradient_error(seed);
        assert!(e < 1e-5, "seed {seed}: {e}");
    }
}

#[test]
fn dde_step_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let e = dde_step_gradient_error(seed);
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn multi_step_rollout_gradient_matches_finite_differences() {
    let (_, _, obs) = small_dataset(0.6, 0.03, 2);
    for (variant, n_f) in [(Variant::History, 5), (Variant::Instantaneous, 4)] {
        let cfg = match variant {
            Variant::History => ClosureConfig::history(2, DT_OBS, 15.0),
            Variant::Instantaneous => ClosureConfig::instantaneous(DT_OBS, 15.0),
        };
        let arch = MlpArchitecture::new(cfg.input_dim(8), 2, 8, 1);
        let p = random_params(arch, 9);
        let batch = [0, 7, 19, 30];
        let (loss, grad) = loss_and_grad(&p, &obs, &batch, n_f, &cfg).unwrap();
        let f = |flat: &[f64]| {
            let q = ClosureParams::new(arch, flat.to_vec()).unwrap();
            match variant {
                Variant::History => loss_history(&q, &obs, &batch, n_f, &cfg).unwrap(),
                Variant::Instantaneous => loss_instantaneous(&q, &obs, &batch, n_f, &cfg).unwrap(),
            }
        };
        assert!((f(&p.flat) - loss).abs() <= 1e-12 * loss);
        let fd: Vec<f64> = (0..p.len()).map(|i| central_diff(&f, &p.flat, i, FD_STEP)).collect();
        let e = max_rel_err_above(&grad, &fd, 1e-8);
        assert!(e < 1e-4, "{}: {e}", variant.name());
    }
}

#[test]
fn potential_energy_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let e = potential_gradient_error(seed);
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}
