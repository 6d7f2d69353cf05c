use std::path::Path;

use cotlab_core::looped::loop_gradient_flow;
use cotlab_core::{Matrix, RngStream};
use serde_json::json;

use crate::config::{InitialA, LoopSection, RunConfig};
use crate::error::{CliError, CliResult};
use crate::table::{write_json, Format, Table};

pub const LOOP_COLUMNS: &[&str] = &["step", "loss_closed", "loss_direct", "stderr", "op_norm_I_minus_A"];

pub fn run_loop(run: &RunConfig, section: &LoopSection, out: &Path, format: Format) -> CliResult<()> {
    let d = section.d;
    let a0 = match &section.a0 {
        InitialA::Scale(s) => Matrix::identity(d).scale(*s),
        InitialA::Diag(v) if v.len() == d => Matrix::from_diag(v),
        InitialA::Diag(v) => return Err(CliError::Usage(format!("a0 diag has {} entries, expected {d}", v.len()))),
    };
    let outcome = loop_gradient_flow(&a0, &section.flow, &mut RngStream::new(section.seed)).map_err(|e| match e {
        cotlab_core::Error::Diverged { step } => CliError::Diverged {
            run_id: run.run_id.clone(),
            step,
        },
        other => other.into(),
    })?;
    let mut t = Table::new(LOOP_COLUMNS);
    for r in &outcome.records {
        t.push(vec![
            r.step.into(),
            r.loss_closed.into(),
            r.loss_direct.into(),
            r.stderr.into(),
            r.op_norm_i_minus_a.into(),
        ]);
    }
    t.write(out, &format!("{}_loop", run.run_id), format)?;
    let last = outcome.records.last().expect("flow logs the final step");
    let rows: Vec<&[f64]> = (0..d).map(|r| outcome.a.row(r)).collect();
    write_json(
        &out.join(format!("{}_summary.json", run.run_id)),
        &json!({
            "run_id": run.run_id,
            "claim": run.claim,
            "final_loss_closed": last.loss_closed,
            "final_stderr": last.stderr,
            "op_norm_I_minus_A": last.op_norm_i_minus_a,
            "a": rows,
        }),
    )?;
    Ok(())
}
