//! Acceptance run: one PASS/FAIL line per criterion. Built without the test
//! harness so the lines are never captured.
//!
//! Criteria 1-4 and 8 run at their stated scale and are enforced. The
//! forecast-skill, calibration and UQ-ordering criteria (5-7) need trained
//! and sampled models; `HISTCLOSURE_ACCEPTANCE_SCALE` selects `ci`
//! (default, minutes), `desk` (about an hour per variant pair) or `full`
//! (many hours). Their lines are always printed; they are enforced only when
//! `HISTCLOSURE_ACCEPTANCE_STRICT=1`, because at `ci` scale the models are
//! far from converged and the outcome says little about the method.

mod checks;
mod common;

use checks::{autodiff, cli, numerics, sampler};
use hist_closure::closure::Variant;
use hist_closure::experiment::{
    compare_variants, generate_data, pipeline_sigma_r, train_variant, ExperimentConfig, ROLLOUT_DEPTH_HISTORY,
};
use hist_closure::forecast::{coarse_step_stability_experiment, uq_sweep};
use hist_closure::truth::attractor_initial_state;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scale {
    Ci,
    Desk,
    Full,
}

impl Scale {
    fn from_env() -> Self {
        match std::env::var("HISTCLOSURE_ACCEPTANCE_SCALE").as_deref() {
            Ok("desk") => Scale::Desk,
            Ok("full") => Scale::Full,
            Ok("ci") | Err(_) => Scale::Ci,
            Ok(other) => panic!("unknown acceptance scale {other:?}"),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Scale::Ci => "ci",
            Scale::Desk => "desk",
            Scale::Full => "full",
        }
    }

    /// Experiment behind criteria 4-7 at this scale.
    fn experiment(self) -> ExperimentConfig {
        match self {
            Scale::Full => ExperimentConfig::preset("full").unwrap(),
            Scale::Desk => ExperimentConfig::preset("desk").unwrap(),
            Scale::Ci => {
                let mut c = ExperimentConfig::preset("desk").unwrap();
                c.truth.t_end = 10.0;
                c.closure.hidden_width = 16;
                c.train.phase1_iters = 400;
                c.train.phase2_iters = 400;
                c.hmc.chain_length = 40;
                c.forecast.thinning = 2;
                c
            }
        }
    }
}

struct Outcome {
    id: u8,
    pass: bool,
    enforced: bool,
    detail: String,
}

impl Outcome {
    fn line(&self) -> String {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        let note = if self.enforced { "" } else { " (reported, not enforced)" };
        format!("criterion {}: {tag}{note} | {}", self.id, self.detail)
    }
}

fn numerics_oracles() -> (bool, String) {
    let slope = numerics::rk4_order_slope();
    let rhs = numerics::truth_rhs_oracle_error();
    let dde = (1..=3).map(|n_h| numerics::dde_step_oracle_error(n_h, 10)).fold(0.0, f64::max);
    let poison = numerics::stencil_poisoning_holds();
    let pass = (slope - 4.0).abs() <= 0.1 && rhs <= 1e-14 && dde <= 1e-14 && poison;
    (
        pass,
        format!("RK4 slope {slope:.4}, truth rhs err {rhs:.1e}, DDE step err {dde:.1e}, poisoning {poison}"),
    )
}

fn autodiff_checks() -> (bool, String) {
    let worst = |f: fn(u64) -> f64| (0..20).map(f).fold(0.0, f64::max);
    let mlp = worst(autodiff::mlp_gradient_error);
    let step = worst(autodiff::dde_step_gradient_error);
    let pot = worst(autodiff::potential_gradient_error);
    let pass = mlp < 1e-4 && step < 1e-4 && pot < 1e-4;
    (
        pass,
        format!("worst rel err over 20 seeds: network {mlp:.1e}, DDE step {step:.1e}, potential {pot:.1e}"),
    )
}

fn sampler_checks() -> (bool, String) {
    let c = sampler::gaussian_calibration();
    let rev = sampler::leapfrog_reversibility_error();
    let halving = sampler::energy_error_halving_factor();
    let pass = c.max_mean_error < 0.1
        && c.max_variance_error < 0.15
        && c.max_ks < c.ks_critical
        && rev < 1e-12
        && halving >= 3.5;
    (
        pass,
        format!(
            "mean err {:.3}, var err {:.3}, KS {:.4} < {:.4}, reversibility {rev:.1e}, halving factor {halving:.2}",
            c.max_mean_error, c.max_variance_error, c.max_ks, c.ks_critical
        ),
    )
}

fn stability(cfg: &ExperimentConfig) -> (bool, String) {
    let c = cfg.with_variant(Variant::History, ROLLOUT_DEPTH_HISTORY);
    let data = generate_data(&c).unwrap();
    let report = train_variant(&c, &data.observations).unwrap();
    let x0 = attractor_initial_state(&c.truth).unwrap();
    let s = coarse_step_stability_experiment(&c.truth, &x0, &report.final_params, &c.closure_config(), 10.0).unwrap();
    let div_ok = s.truth_divergence_time.is_some_and(|t| t > 0.0 && t < 0.5);
    let pass = div_ok && s.model_finite;
    (
        pass,
        format!(
            "truth at step {} diverges at {:?} MTU; history model finite to {} MTU: {} (rmse {:.3})",
            s.coarse_step,
            s.truth_divergence_time,
            s.horizon,
            s.model_finite,
            s.model_rmse.unwrap_or(f64::NAN)
        ),
    )
}

fn reproducibility() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let diffs = cli::rerun_differences(dir.path());
    (
        diffs.is_empty(),
        if diffs.is_empty() {
            "all toy-pipeline outputs byte-identical on rerun from manifests".into()
        } else {
            format!("differing outputs: {diffs:?}")
        },
    )
}

fn main() {
    let scale = Scale::from_env();
    let strict = std::env::var("HISTCLOSURE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let cfg = scale.experiment();
    let mut outcomes = Vec::new();
    let mut record = |id: u8, enforced: bool, (pass, detail): (bool, String)| {
        let o = Outcome {
            id,
            pass,
            enforced,
            detail,
        };
        println!("{}", o.line());
        outcomes.push(o);
    };

    record(1, true, numerics_oracles());
    record(2, true, autodiff_checks());
    record(3, true, sampler_checks());
    record(4, true, stability(&cfg));

    let cmp = compare_variants(&cfg).unwrap();
    let (h, i) = (&cmp.history, &cmp.instantaneous);
    let mut pass5 = h.deterministic_rmse < i.deterministic_rmse
        && h.ensemble_mean_rmse < i.ensemble_mean_rmse
        && [h.deterministic_rmse, i.deterministic_rmse, h.ensemble_mean_rmse, i.ensemble_mean_rmse]
            .iter()
            .all(|&r| r < cmp.zero_closure_rmse);
    if scale == Scale::Full {
        pass5 &= (0.1..=0.35).contains(&h.deterministic_rmse);
    }
    record(
        5,
        strict,
        (
            pass5,
            format!(
                "[{} scale] rmse at {} MTU: deterministic history {:.3} vs instantaneous {:.3}; ensemble mean {:.3} vs {:.3}; zero closure {:.3}",
                scale.name(),
                cfg.forecast.horizon,
                h.deterministic_rmse,
                i.deterministic_rmse,
                h.ensemble_mean_rmse,
                i.ensemble_mean_rmse,
                cmp.zero_closure_rmse
            ),
        ),
    );
    record(
        6,
        strict,
        (
            h.frac_out_2sigma < 0.3 && h.frac_out_2sigma < i.frac_out_2sigma,
            format!(
                "[{} scale] out-of-2σ fraction: history {:.3} vs instantaneous {:.3} (acceptance {:.2} / {:.2})",
                scale.name(),
                h.frac_out_2sigma,
                i.frac_out_2sigma,
                h.acceptance_rate,
                i.acceptance_rate
            ),
        ),
    );

    let hist = cfg.with_variant(Variant::History, ROLLOUT_DEPTH_HISTORY);
    let table = uq_sweep(&[5.0, 15.0], &[0.03, 0.1], |f, n| {
        let mut c = hist.clone();
        c.truth.forcing = f;
        c.observation.noise_fraction = n;
        pipeline_sigma_r(&c)
    });
    let cells: Vec<String> = table
        .cells
        .iter()
        .map(|c| format!("F={} noise={}: {:.4}", c.forcing, c.noise_fraction, c.sigma_r.unwrap_or(f64::NAN)))
        .collect();
    record(
        7,
        strict,
        (
            table.increasing_in_forcing() && table.increasing_in_noise(),
            format!("[{} scale] history σ_r: {}", scale.name(), cells.join(", ")),
        ),
    );

    record(8, true, reproducibility());

    let failed: Vec<u8> = outcomes.iter().filter(|o| o.enforced && !o.pass).map(|o| o.id).collect();
    if !failed.is_empty() {
        eprintln!("enforced criteria failed: {failed:?}");
        std::process::exit(1);
    }
}
