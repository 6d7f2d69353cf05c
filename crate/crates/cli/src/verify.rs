//! Named numerical checks run by `cotlab verify`.

use std::io::Write;
use std::path::Path;

use cotlab_core::inference::{cot_rollout, eval_loss_mc};
use cotlab_core::linalg::{gaussian_matrix, norm, random_orthogonal, sub};
use cotlab_core::looped::{loop_grad_on, loop_loss_closed_mc, loop_loss_closed_on, loop_loss_mc, sample_covariances, LoopGradient};
use cotlab_core::model::{construct_multistep, init_random};
use cotlab_core::objectives::{
    central_difference, compare_gradients, cot_loss_sample, grad_full_sample, grad_reduced_sample, reduced_loss_sample,
};
use cotlab_core::task::{gd_iterates, sample_task};
use cotlab_core::theory::{
    concentration_check, error_structure_fit, no_cot_lower_bound, no_cot_lower_bound_simplified, one_step_optimum_eta,
    wishart_moment_check, wishart_moment_check_against, ConcentrationConfig, ConcentrationVariant, StructureSample,
    WishartSampler,
};
use cotlab_core::training::{eig_ode_rhs, integrate_eig_ode, train, Mode, Optimizer, TrainInit};
use cotlab_core::{LoopedParams, LsaParams, Matrix, ReducedParams, RngStream, TrainConfig, Verdict};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::table::{write_json, Format, Table};

type CheckFn = fn(&mut RngStream) -> CliResult<Verdict>;

/// Every check, in the order `verify` runs them by default.
pub const CHECKS: &[(&str, &str, CheckFn)] = &[
    ("construction", "constructed weights reproduce gradient descent", construction),
    ("lower-bound", "one-step loss bound and its Monte Carlo estimate", lower_bound),
    ("moments", "Wishart first and second moments", moments),
    ("moments-control", "moment check rejects a wrong target", moments_control),
    ("zero-blocks", "off-pattern gradients vanish under antithetic batches", zero_blocks),
    ("grad-fd", "analytic gradients against finite differences", grad_fd),
    ("concentration", "concentration of the weighted Wishart product", concentration),
    ("structure-fit", "structure of the concentration deviation", structure_fit),
    ("eig-ode", "eigenvalue dynamics converge to (-eta, 1)", eig_ode),
    ("loop-equivalence", "direct and trace-form looped losses agree", loop_equivalence),
    ("loop-grad-fd", "looped gradients against common-random-number differences", loop_grad_fd),
];

fn verdict(check: &str, params: Value, summary: Value, bound: Option<f64>, stderr: Option<f64>, pass: bool) -> Verdict {
    Verdict {
        check: check.into(),
        params,
        estimate_summary: summary,
        bound,
        stderr,
        pass,
    }
}

fn construction(rng: &mut RngStream) -> CliResult<Verdict> {
    let (d, n, eta, k) = (10, 20, 0.4, 20);
    let params = construct_multistep(d, eta);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let task = sample_task(rng, d, n);
        let r = cot_rollout(&task, &params, k, eta)?;
        let it = gd_iterates(&task, eta, k);
        for (a, b) in r.w_hats.iter().zip(&it.iters[1..]) {
            worst = worst.max(norm(&sub(a, b)) / norm(b));
        }
    }
    Ok(verdict(
        "construction",
        json!({"d": d, "n": n, "eta": eta, "steps": k + 1, "tasks": 100}),
        json!({"max_rel_error": worst}),
        Some(1e-10),
        None,
        worst <= 1e-10,
    ))
}

fn lower_bound(rng: &mut RngStream) -> CliResult<Verdict> {
    let (d, n) = (10, 20);
    let lb = no_cot_lower_bound(n, d);
    let gap = (lb - no_cot_lower_bound_simplified(n, d)).abs();
    let est = eval_loss_mc(&construct_multistep(d, one_step_optimum_eta(n, d)), d, n, 0, 200_000, rng);
    let pass = gap <= 1e-12 && est.agrees_with(lb, 0.01 * lb, 4.0);
    Ok(verdict(
        "lower-bound",
        json!({"d": d, "n": n, "tasks": 200_000}),
        json!({"bound": lb, "identity_gap": gap, "mc_mean": est.mean}),
        Some(lb),
        Some(est.stderr),
        pass,
    ))
}

fn moments(rng: &mut RngStream) -> CliResult<Verdict> {
    Ok(Verdict::from_moments(&wishart_moment_check(5, 10, 100_000, rng)))
}

fn moments_control(rng: &mut RngStream) -> CliResult<Verdict> {
    let (d, n) = (5, 10);
    let first = Matrix::identity(d).scale(n as f64);
    let wrong = Matrix::identity(d).scale((n * (n + d)) as f64);
    let r = wishart_moment_check_against(d, n, 100_000, rng, &first, &wrong);
    Ok(verdict(
        "moments-control",
        json!({"d": d, "n": n, "samples": 100_000, "second_target": "n(n+d) I"}),
        json!({"max_z_second": r.max_z_second, "wrong_target_rejected": !r.pass}),
        Some(4.0),
        None,
        !r.pass,
    ))
}

fn zero_blocks(rng: &mut RngStream) -> CliResult<Verdict> {
    let cfg = TrainConfig {
        mode: Mode::Theory,
        optimizer: Optimizer::GradientFlow { h: 0.01 },
        batch: 200,
        antithetic: true,
        iterations: 100,
        log_every: 1,
        ..TrainConfig::heatmap_recipe(rng.fork_seed())
    };
    let out = train(&cfg, TrainInit::FromSeed, |_, _| {})?;
    let ratios: Vec<f64> = out.records.iter().filter_map(|r| r.off_pattern_grad_ratio).collect();
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    Ok(verdict(
        "zero-blocks",
        json!({"d": cfg.d, "n": cfg.n, "k": cfg.k, "steps": cfg.iterations, "batch": cfg.batch}),
        json!({"max_ratio": worst, "steps_checked": ratios.len()}),
        Some(1e-12),
        None,
        worst <= 1e-12 && ratios.len() > cfg.iterations,
    ))
}

fn grad_fd(rng: &mut RngStream) -> CliResult<Verdict> {
    let (mut worst_full, mut worst_reduced) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let d = 1 + (rng.uniform(0.0, 4.0) as usize).min(3);
        let n = 1 + (rng.uniform(0.0, 6.0) as usize).min(5);
        let k = (rng.uniform(0.0, 4.0) as usize).min(3);
        let eta = rng.uniform(0.1, 0.9);
        let task = sample_task(rng, d, n);

        let params = init_random(rng, d, 0.5);
        let g = grad_full_sample(&task, &params, k, eta).to_flat();
        let fd = central_difference(&params.to_flat(), |th| {
            cot_loss_sample(&task, &LsaParams::from_flat(d, th).expect("length"), k, eta).total
        });
        let c = compare_gradients(&g, &fd, 1e-4);
        worst_full = worst_full.max(c.max_rel_error).max(c.normwise_rel_error);

        let rp = ReducedParams {
            v31: gaussian_matrix(rng, d, d).scale(0.5),
            w13: gaussian_matrix(rng, d, d).scale(0.5),
            w24: rng.uniform(-1.5, -0.5),
        };
        let gr = grad_reduced_sample(&task, &rp, k, eta, true);
        let mut analytic = gr.g_v31.as_slice().to_vec();
        analytic.extend_from_slice(gr.g_w13.as_slice());
        analytic.push(gr.g_w24);
        let mut theta = rp.v31.as_slice().to_vec();
        theta.extend_from_slice(rp.w13.as_slice());
        theta.push(rp.w24);
        let fd = central_difference(&theta, |th| {
            let q = ReducedParams {
                v31: Matrix::from_vec(d, d, th[..d * d].to_vec()).expect("length"),
                w13: Matrix::from_vec(d, d, th[d * d..2 * d * d].to_vec()).expect("length"),
                w24: th[2 * d * d],
            };
            reduced_loss_sample(&task, &q, k, eta).total
        });
        let c = compare_gradients(&analytic, &fd, 1e-4);
        worst_reduced = worst_reduced.max(c.max_rel_error).max(c.normwise_rel_error);
    }
    Ok(verdict(
        "grad-fd",
        json!({"configs": 20, "max_d": 4, "max_n": 6, "max_k": 3}),
        json!({"max_rel_error_full": worst_full, "max_rel_error_reduced": worst_reduced}),
        Some(1e-5),
        None,
        worst_full <= 1e-5 && worst_reduced <= 1e-5,
    ))
}

fn concentration(rng: &mut RngStream) -> CliResult<Verdict> {
    let cfg = ConcentrationConfig::new(8, 8192, 5, 0.5, 200_000);
    let variant = ConcentrationVariant::Single {
        lambda: Matrix::identity(8),
    };
    let r = concentration_check(&cfg, &variant, rng)?;
    Ok(Verdict::from_concentration(&r, serde_json::to_value(cfg).expect("serializable")))
}

fn structure_fit(rng: &mut RngStream) -> CliResult<Verdict> {
    let d = 6;
    let cfg = ConcentrationConfig::new(d, 4096, 3, 0.5, 200_000);
    let mut samples = Vec::new();
    let mut noise_sq = 0.0;
    for _ in 0..4 {
        let l: Vec<f64> = (0..d).map(|_| rng.uniform(0.2, 1.0)).collect();
        let g: Vec<f64> = (0..d).map(|_| rng.uniform(0.2, 1.0)).collect();
        let (lambda, gamma) = (Matrix::from_diag(&l), Matrix::from_diag(&g));
        let variant = ConcentrationVariant::Pair {
            lambda: lambda.clone(),
            gamma: gamma.clone(),
        };
        let r = concentration_check(&cfg, &variant, rng)?;
        noise_sq += (r.split_noise * r.main_term.operator_norm()).powi(2);
        samples.push(StructureSample {
            delta: r.deviation(cfg.eta, cfg.k),
            lambda,
            gamma: Some(gamma),
        });
    }
    let fit = error_structure_fit(&samples)?;
    let noise = noise_sq.sqrt();
    Ok(verdict(
        "structure-fit",
        json!({"d": d, "n": cfg.n, "k": cfg.k, "eta": cfg.eta, "pairs": 4, "samples": cfg.samples}),
        json!({"coefficients": fit.coefficients, "residual_abs": fit.residual_abs, "residual_rel": fit.residual_rel}),
        Some(3.0 * noise),
        Some(noise),
        fit.residual_abs < 3.0 * noise,
    ))
}

fn eig_ode(rng: &mut RngStream) -> CliResult<Verdict> {
    let mut worst_rhs = 0.0f64;
    for eta in [0.2, 0.4, 0.8] {
        for k in [5, 20] {
            let (dv, dw) = eig_ode_rhs(-eta, 1.0, eta, k);
            worst_rhs = worst_rhs.max(dv.abs()).max(dw.abs());
        }
    }
    let sigma = 0.3;
    let lv: Vec<f64> = (0..16).map(|_| rng.uniform(-2.0 * sigma, -sigma)).collect();
    let lw: Vec<f64> = (0..16).map(|_| rng.uniform(sigma, 0.5)).collect();
    let sol = integrate_eig_ode(&lv, &lw, 0.4, 20, 1e-3, 40.0, 1e-3)?;
    let dist = sol
        .final_v
        .iter()
        .zip(&sol.final_w)
        .map(|(v, w)| (v + 0.4).abs().max((w - 1.0).abs()))
        .fold(0.0, f64::max);
    Ok(verdict(
        "eig-ode",
        json!({"eta": 0.4, "k": 20, "h": 1e-3, "starts": 16}),
        json!({"fixed_point_residual": worst_rhs, "max_final_distance": dist}),
        Some(1e-3),
        None,
        worst_rhs <= 1e-12 && dist <= 1e-3,
    ))
}

fn random_symmetric(rng: &mut RngStream, d: usize, lo: f64, hi: f64) -> Matrix {
    let u = random_orthogonal(rng, d);
    let diag: Vec<f64> = (0..d).map(|_| rng.uniform(lo, hi)).collect();
    u.matmul(&Matrix::from_diag(&diag)).matmul_t(&u)
}

fn loop_equivalence(rng: &mut RngStream) -> CliResult<Verdict> {
    let n = 1024;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let d = 2 + (rng.uniform(0.0, 7.0) as usize).min(6);
        let loops = 1 + (rng.uniform(0.0, 4.0) as usize).min(3);
        let p = LoopedParams::new(random_symmetric(rng, d, 0.2, 1.2), loops)?;
        let direct = loop_loss_mc(&p, n, 5_000, &mut rng.derive(1));
        let closed = loop_loss_closed_mc(&p, n, 5_000, WishartSampler::Bartlett, &mut rng.derive(2));
        worst = worst.max((direct.mean - closed.mean).abs() / direct.combined_stderr(&closed));
    }
    Ok(verdict(
        "loop-equivalence",
        json!({"configs": 10, "n": n, "tasks": 5_000, "max_d": 8, "max_loops": 4}),
        json!({"max_z": worst}),
        Some(4.0),
        None,
        worst <= 4.0,
    ))
}

fn loop_grad_fd(rng: &mut RngStream) -> CliResult<Verdict> {
    let mut worst = 0.0f64;
    for d in 2..=4 {
        for loops in 1..=3 {
            let covs = sample_covariances(rng, d, 12, 100, WishartSampler::Direct);
            let sym = random_symmetric(rng, d, 0.1, 0.9);
            let iso = Matrix::identity(d).scale(rng.uniform(0.2, 0.8));
            for (a, kind) in [(sym, LoopGradient::Exact), (iso, LoopGradient::Sum)] {
                let p = LoopedParams::new(a.clone(), loops)?;
                let g = loop_grad_on(&p, &covs, kind);
                let fd = central_difference(a.as_slice(), |th| {
                    let q = LoopedParams::new(Matrix::from_vec(d, d, th.to_vec()).expect("length"), loops).expect("square");
                    loop_loss_closed_on(&q, &covs)
                });
                let c = compare_gradients(g.as_slice(), &fd, 1e-4);
                worst = worst.max(c.max_rel_error).max(c.normwise_rel_error);
            }
        }
    }
    Ok(verdict(
        "loop-grad-fd",
        json!({"d": [2, 3, 4], "loops": [1, 2, 3], "n": 12, "covariances": 100}),
        json!({"max_rel_error": worst}),
        Some(1e-4),
        None,
        worst <= 1e-4,
    ))
}

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.0).collect()
}

pub fn run_verify(run_id: &str, checks: &[String], seed: u64, out: &Path, format: Format) -> CliResult<()> {
    let selected: Vec<&(&str, &str, CheckFn)> = if checks.is_empty() {
        CHECKS.iter().collect()
    } else {
        checks
            .iter()
            .map(|name| {
                CHECKS
                    .iter()
                    .find(|c| c.0 == name)
                    .ok_or_else(|| CliError::Usage(format!("unknown check {name:?}; known: {}", check_names().join(", "))))
            })
            .collect::<CliResult<_>>()?
    };
    let root = RngStream::new(seed);
    let mut verdicts = Vec::new();
    let stdout = std::io::stdout();
    let mut stdout = stdout.lock();
    for (i, (name, _, f)) in selected.into_iter().enumerate() {
        // each check owns a stream, so selecting a subset does not change results
        let idx = CHECKS.iter().position(|c| c.0 == *name).expect("registered") as u64;
        let mut rng = root.derive(idx);
        let v = f(&mut rng)?;
        if format == Format::Csv {
            if i == 0 {
                writeln!(stdout, "{:<18} {:<6} summary", "check", "result")?;
            }
            writeln!(
                stdout,
                "{:<18} {:<6} {}",
                v.check,
                if v.pass { "PASS" } else { "FAIL" },
                v.estimate_summary
            )?;
        } else {
            writeln!(stdout, "{}", serde_json::to_string(&v).expect("serializable"))?;
        }
        verdicts.push(v);
    }
    let mut t = Table::new(&["check", "pass", "bound", "stderr", "params", "estimate_summary"]);
    for v in &verdicts {
        t.push(vec![
            v.check.as_str().into(),
            if v.pass { "true" } else { "false" }.into(),
            v.bound.into(),
            v.stderr.into(),
            v.params.to_string().into(),
            v.estimate_summary.to_string().into(),
        ]);
    }
    t.write(out, &format!("{run_id}_verify"), format)?;
    write_json(&out.join(format!("{run_id}_verdicts.json")), &serde_json::to_value(&verdicts).expect("serializable"))?;
    let failed: Vec<&str> = verdicts.iter().filter(|v| !v.pass).map(|v| v.check.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("checks failed: {}", failed.join(", "))))
    }
}

pub fn run_verify_config(run: &RunConfig, out: &Path, format: Format, seed: Option<u64>) -> CliResult<()> {
    let section = run.verify.clone().unwrap_or(crate::config::VerifySection {
        checks: Vec::new(),
        seed: 0,
    });
    run_verify(&run.run_id, &section.checks, seed.unwrap_or(section.seed), out, format)
}
