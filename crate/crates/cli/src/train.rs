use std::path::Path;

use cotlab_core::model::{pattern_residual, save_checkpoint};
use cotlab_core::training::{train, TrainInit};
use cotlab_core::{CheckpointMeta, TrainConfig, TrajectoryRecord};
use log::info;
use serde_json::json;

use crate::config::{ConstructSection, RunConfig};
use crate::error::{CliError, CliResult};
use crate::table::{write_json, Format, Table};

pub const TRAJECTORY_COLUMNS: &[&str] = &[
    "step",
    "cot_loss",
    "cot_loss_stderr",
    "eval_loss",
    "eval_loss_stderr",
    "off_pattern_mass",
    "off_pattern_mass_live",
    "product_error",
    "scale_error",
    "alpha",
    "grad_norm_v",
    "grad_norm_w",
    "off_pattern_grad_ratio",
    "wall_ms",
];

pub const SPECTRUM_COLUMNS: &[&str] = &["step", "index", "lambda_v", "lambda_w", "off_basis_v", "off_basis_w"];

fn trajectory_table(records: &[TrajectoryRecord]) -> Table {
    let mut t = Table::new(TRAJECTORY_COLUMNS);
    for r in records {
        t.push(vec![
            r.step.into(),
            r.cot_loss.mean.into(),
            r.cot_loss.stderr.into(),
            r.eval_loss.map(|e| e.mean).into(),
            r.eval_loss.map(|e| e.stderr).into(),
            r.pattern.off_pattern_mass.into(),
            r.pattern.off_pattern_mass_live.into(),
            r.pattern.product_error.into(),
            r.pattern.scale_error.into(),
            r.pattern.alpha.into(),
            r.grad_norm_v.into(),
            r.grad_norm_w.into(),
            r.off_pattern_grad_ratio.into(),
            r.wall_ms.into(),
        ]);
    }
    t
}

fn spectrum_table(records: &[TrajectoryRecord]) -> Table {
    let mut t = Table::new(SPECTRUM_COLUMNS);
    for r in records {
        if let Some(sp) = &r.spectral {
            for (i, (v, w)) in sp.lambda_v.iter().zip(&sp.lambda_w).enumerate() {
                t.push(vec![
                    r.step.into(),
                    i.into(),
                    (*v).into(),
                    (*w).into(),
                    sp.off_basis_v.into(),
                    sp.off_basis_w.into(),
                ]);
            }
        }
    }
    t
}

pub fn run_train(run: &RunConfig, cfg: &TrainConfig, out: &Path, format: Format) -> CliResult<()> {
    info!("train {}: d={} n={} k={} iterations={}", run.run_id, cfg.d, cfg.n, cfg.k, cfg.iterations);
    let outcome = train(cfg, TrainInit::FromSeed, |r, _| {
        info!("{} step {}: cot loss {:.5}", run.run_id, r.step, r.cot_loss.mean);
    })?;
    trajectory_table(&outcome.records).write(out, &format!("{}_trajectory", run.run_id), format)?;
    let spectrum = spectrum_table(&outcome.records);
    if spectrum.len() > 0 {
        spectrum.write(out, &format!("{}_spectrum", run.run_id), format)?;
    }
    let step = outcome.diverged_at.map_or(cfg.iterations, |s| s.saturating_sub(1));
    let meta = CheckpointMeta {
        d: cfg.d,
        n: cfg.n,
        eta: cfg.eta,
        k: cfg.k,
        seed: cfg.seed,
        step,
    };
    save_checkpoint(&out.join(format!("{}.ckpt", run.run_id)), &outcome.params, &meta)?;

    let last = outcome.records.last().expect("train logs the final step");
    let summary = json!({
        "run_id": run.run_id,
        "claim": run.claim,
        "final_cot_loss": {"mean": last.cot_loss.mean, "stderr": last.cot_loss.stderr},
        "final_eval_loss": last.eval_loss.map(|e| json!({"mean": e.mean, "stderr": e.stderr})),
        "pattern_residual": pattern_residual(&outcome.params, cfg.eta),
        "diverged_at": outcome.diverged_at,
        "step": step,
    });
    write_json(&out.join(format!("{}_summary.json", run.run_id)), &summary)?;
    match outcome.diverged_at {
        Some(step) => Err(CliError::Diverged {
            run_id: run.run_id.clone(),
            step,
        }),
        None => Ok(()),
    }
}

pub fn run_construct(run: &RunConfig, c: &ConstructSection, out: &Path) -> CliResult<()> {
    if c.d == 0 || c.n == 0 || !(c.eta.is_finite() && c.eta > 0.0) {
        return Err(CliError::Usage("construct needs d, n >= 1 and eta > 0".into()));
    }
    let params = cotlab_core::construct_multistep(c.d, c.eta);
    let meta = CheckpointMeta {
        d: c.d,
        n: c.n,
        eta: c.eta,
        k: c.k,
        seed: 0,
        step: 0,
    };
    let path = out.join(format!("{}.ckpt", run.run_id));
    save_checkpoint(&path, &params, &meta)?;
    info!("wrote {}", path.display());
    Ok(())
}
