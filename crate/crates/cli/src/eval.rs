use std::path::{Path, PathBuf};
use std::time::Instant;

use cotlab_core::inference::{check_ood_window, eval_loss_mc, eval_loss_ood_mc};
use cotlab_core::model::load_checkpoint;
use cotlab_core::task::sample_window_covariance;
use cotlab_core::{Matrix, RngStream};
use log::info;

use crate::config::{EvalSection, RunConfig, SigmaSpec};
use crate::error::{CliError, CliResult};
use crate::table::{Format, Table};

pub const EVAL_COLUMNS: &[&str] = &[
    "run_id",
    "d",
    "n",
    "k_train",
    "k_prime",
    "eta",
    "sigma_id",
    "n_tasks",
    "loss_mean",
    "loss_stderr",
    "wall_ms",
];

/// Stream ids split from the evaluation seed.
const STREAM_COVARIANCE: u64 = 1;
const STREAM_TASKS: u64 = 2;

/// `None` stands for the identity, evaluated without a Cholesky factor.
fn covariances(specs: &[SigmaSpec], d: usize, eta: f64, rng: &RngStream) -> CliResult<Vec<(String, Option<Matrix>)>> {
    if specs.is_empty() {
        return Ok(vec![("identity".into(), None)]);
    }
    let mut cov_rng = rng.derive(STREAM_COVARIANCE);
    let mut out = Vec::new();
    for (i, s) in specs.iter().enumerate() {
        match s {
            SigmaSpec::Identity => out.push(("identity".into(), None)),
            SigmaSpec::Diag(v) => {
                if v.len() != d {
                    return Err(CliError::Usage(format!("sigma diag has {} entries, expected {d}", v.len())));
                }
                out.push((format!("diag{i}"), Some(Matrix::from_diag(v))));
            }
            SigmaSpec::Matrix(rows) => {
                let m = Matrix::from_rows(rows)?;
                if m.shape() != (d, d) || !m.is_symmetric(1e-12) {
                    return Err(CliError::Usage(format!("sigma matrix {i} must be symmetric {d}x{d}")));
                }
                out.push((format!("matrix{i}"), Some(m)));
            }
            SigmaSpec::Window { count, delta } => {
                if !(*delta > 0.0 && *delta < 1.0) {
                    return Err(CliError::Usage(format!("window delta must lie in (0, 1), got {delta}")));
                }
                for j in 0..*count {
                    let cov = sample_window_covariance(&mut cov_rng, d, eta, *delta);
                    check_ood_window(&cov, eta, *delta)?;
                    out.push((format!("window{i}_{j}"), Some(cov)));
                }
            }
        }
    }
    Ok(out)
}

struct Loaded {
    path: PathBuf,
    params: cotlab_core::LsaParams,
    n: usize,
    k_train: Option<usize>,
    eta: Option<f64>,
}

fn load(path: &Path, section: &EvalSection) -> CliResult<Loaded> {
    let (params, meta) = load_checkpoint(path)?;
    let n = section
        .n
        .or(meta.as_ref().map(|m| m.n))
        .ok_or_else(|| CliError::Usage(format!("{} has no sidecar; set eval.n", path.display())))?;
    Ok(Loaded {
        path: path.to_path_buf(),
        params,
        n,
        k_train: meta.as_ref().map(|m| m.k),
        eta: meta.as_ref().map(|m| m.eta).or(section.eta),
    })
}

pub fn run_eval(run: &RunConfig, section: &EvalSection, out: &Path, format: Format) -> CliResult<()> {
    if section.tasks < 2 {
        return Err(CliError::Usage("eval.tasks must be at least 2".into()));
    }
    if section.checkpoints.is_empty() || section.k_prime.is_empty() {
        return Err(CliError::Usage("eval needs at least one checkpoint and one k_prime".into()));
    }
    let loaded = section
        .checkpoints
        .iter()
        .map(|p| load(p, section))
        .collect::<CliResult<Vec<_>>>()?;
    let root = RngStream::new(section.seed);
    let mut table = Table::new(EVAL_COLUMNS);
    for ck in &loaded {
        let d = ck.params.d;
        let needs_eta = section.sigma.iter().any(|s| matches!(s, SigmaSpec::Window { .. }));
        let eta = match (ck.eta, needs_eta) {
            (Some(e), _) => e,
            (None, false) => f64::NAN,
            (None, true) => return Err(CliError::Usage("window covariances need eta from a sidecar or eval.eta".into())),
        };
        let covs = covariances(&section.sigma, d, eta, &root)?;
        for &k_prime in &section.k_prime {
            for (si, (sigma_id, cov)) in covs.iter().enumerate() {
                // identical tasks for every checkpoint and chain length
                let mut rng = root.derive(STREAM_TASKS).derive(si as u64);
                let start = Instant::now();
                let est = match cov {
                    None => eval_loss_mc(&ck.params, d, ck.n, k_prime, section.tasks, &mut rng),
                    Some(c) => eval_loss_ood_mc(&ck.params, c, d, ck.n, k_prime, section.tasks, &mut rng)?,
                };
                let wall_ms = start.elapsed().as_secs_f64() * 1e3;
                info!(
                    "{} k'={k_prime} {sigma_id}: {:.5} +- {:.5}",
                    ck.path.display(),
                    est.mean,
                    est.stderr
                );
                table.push(vec![
                    run.run_id.as_str().into(),
                    d.into(),
                    ck.n.into(),
                    ck.k_train.into(),
                    k_prime.into(),
                    ck.eta.into(),
                    sigma_id.as_str().into(),
                    section.tasks.into(),
                    est.mean.into(),
                    est.stderr.into(),
                    wall_ms.into(),
                ]);
            }
        }
    }
    table.write(out, &format!("{}_eval", run.run_id), format)?;
    Ok(())
}
