//! Looped linear attention for in-context regression with a single trainable
//! matrix `A`.
//!
//! The prompt is `(d+1) x (n+1)`: columns `(x_j, y_j)` followed by the query
//! `(x_q, 0)`. One loop applies `Z <- Z - (1/n) V Z M Z^T W Z` with
//! `W = [[A, 0], [0, 0]]`, `V = [[0, 0], [0, 1]]` and `M` masking the query
//! column out of the keys, so only the label row moves. After `L` loops the
//! prediction `-Z[d, n]` equals `w*^T (I - (I - S A)^L) x_q`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, gaussian_matrix, matpow, Matrix, RngStream};
use crate::mc::{chunked_reduce, mc_matrix, mc_scalar, Estimate, MatrixMoments, Moments};
use crate::theory::{sample_s, WishartSampler};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopedParams {
    pub a: Matrix,
    pub loops: usize,
}

impl LoopedParams {
    pub fn new(a: Matrix, loops: usize) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::NonSquare {
                rows: a.rows(),
                cols: a.cols(),
            });
        }
        if loops == 0 {
            return Err(Error::InvalidConfig("at least one loop is required".into()));
        }
        Ok(LoopedParams { a, loops })
    }

    pub fn d(&self) -> usize {
        self.a.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IclTask {
    pub x: Matrix,
    pub x_query: Vec<f64>,
    pub w_star: Vec<f64>,
    pub y: Vec<f64>,
    pub y_query: f64,
}

impl IclTask {
    pub fn new(x: Matrix, x_query: Vec<f64>, w_star: Vec<f64>) -> Result<Self> {
        if x.rows() != w_star.len() || x_query.len() != w_star.len() {
            return Err(Error::DimensionMismatch("task vectors must have length d".into()));
        }
        let y = x.tr_matvec(&w_star);
        let y_query = dot(&w_star, &x_query);
        Ok(IclTask {
            x,
            x_query,
            w_star,
            y,
            y_query,
        })
    }

    pub fn d(&self) -> usize {
        self.x.rows()
    }

    pub fn n(&self) -> usize {
        self.x.cols()
    }
}

pub fn sample_icl_task(rng: &mut RngStream, d: usize, n: usize) -> IclTask {
    let x = gaussian_matrix(rng, d, n);
    let x_query = rng.normal_vec(d);
    let w_star = rng.normal_vec(d);
    IclTask::new(x, x_query, w_star).expect("shapes agree by construction")
}

/// Runs the `L` loops on the prompt and returns `-Z^L[d, n]`.
pub fn loop_forward(task: &IclTask, params: &LoopedParams) -> Result<f64> {
    let (d, n) = (task.d(), task.n());
    if params.d() != d {
        return Err(Error::DimensionMismatch(format!(
            "A is {}x{} but the task has d={d}",
            params.d(),
            params.d()
        )));
    }
    let nf = n as f64;
    let mut labels = task.y.clone();
    let mut query_label = 0.0;
    for _ in 0..params.loops {
        // keys restricted to the data columns: u = A^T X r / n
        let u: Vec<f64> = params
            .a
            .tr_matvec(&task.x.matvec(&labels))
            .iter()
            .map(|v| v / nf)
            .collect();
        let shift = task.x.tr_matvec(&u);
        query_label -= dot(&u, &task.x_query);
        labels.iter_mut().zip(&shift).for_each(|(l, s)| *l -= s);
    }
    Ok(-query_label)
}

/// `E[(TF_L - y_q)^2]` by simulating the loops on fresh tasks.
pub fn loop_loss_mc(params: &LoopedParams, n: usize, tasks: usize, rng: &mut RngStream) -> Estimate {
    let d = params.d();
    mc_scalar(rng, tasks, |r| {
        let task = sample_icl_task(r, d, n);
        let e = loop_forward(&task, params).expect("dimensions agree") - task.y_query;
        e * e
    })
}

fn residual_power(s: &Matrix, a: &Matrix, p: usize) -> Matrix {
    let mut m = Matrix::identity(s.rows());
    m.axpy(-1.0, &s.matmul(a));
    matpow(&m, p).expect("square")
}

/// `tr((I - S A)^{2L})` for one empirical covariance.
pub fn loop_loss_closed_sample(s: &Matrix, params: &LoopedParams) -> f64 {
    residual_power(s, &params.a, 2 * params.loops).trace()
}

/// `E[tr((I - S A)^{2L})]`.
pub fn loop_loss_closed_mc(params: &LoopedParams, n: usize, tasks: usize, sampler: WishartSampler, rng: &mut RngStream) -> Estimate {
    let d = params.d();
    mc_scalar(rng, tasks, |r| loop_loss_closed_sample(&sample_s(r, d, n, sampler), params))
}

/// `-sum_{i=0}^{2L-1} (I - S A)^i S (I - S A)^{2L-1-i}` for one `S`.
///
/// This equals the gradient of `tr((I - S A)^{2L})` only when `A` commutes
/// with `S`, e.g. for `A` a multiple of the identity.
pub fn loop_grad_sum_sample(s: &Matrix, params: &LoopedParams) -> Matrix {
    let d = s.rows();
    let two_l = 2 * params.loops;
    let mut m = Matrix::identity(d);
    m.axpy(-1.0, &s.matmul(&params.a));
    let mut powers = vec![Matrix::identity(d)];
    for i in 1..two_l {
        let next = powers[i - 1].matmul(&m);
        powers.push(next);
    }
    let mut g = Matrix::zeros(d, d);
    for i in 0..two_l {
        g.axpy(-1.0, &powers[i].matmul(s).matmul(&powers[two_l - 1 - i]));
    }
    g
}

/// Exact gradient of `tr((I - S A)^{2L})` in `A`: `-2L S (I - A^T S)^{2L-1}`.
pub fn loop_grad_exact_sample(s: &Matrix, params: &LoopedParams) -> Matrix {
    let d = s.rows();
    let mut m = Matrix::identity(d);
    m.axpy(-1.0, &params.a.transpose().matmul(s));
    let p = matpow(&m, 2 * params.loops - 1).expect("square");
    s.matmul(&p).scale(-2.0 * params.loops as f64)
}

/// Which per-sample expression the gradient estimators and the flow use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopGradient {
    /// Derivative of the trace loss.
    Exact,
    /// Symmetrized sum of `2L` products.
    Sum,
}

#[derive(Clone, Debug)]
pub struct MatrixEstimate {
    pub mean: Matrix,
    pub stderr: Matrix,
}

fn grad_mc(params: &LoopedParams, n: usize, tasks: usize, sampler: WishartSampler, kind: LoopGradient, rng: &mut RngStream) -> MatrixEstimate {
    let d = params.d();
    let m = mc_matrix(rng, tasks, d, d, |r| {
        let s = sample_s(r, d, n, sampler);
        match kind {
            LoopGradient::Exact => loop_grad_exact_sample(&s, params),
            LoopGradient::Sum => loop_grad_sum_sample(&s, params),
        }
    });
    MatrixEstimate {
        mean: m.mean(),
        stderr: m.stderr(),
    }
}

/// Monte Carlo estimate of `-sum_i E[(I - S A)^i S (I - S A)^{2L-1-i}]`.
pub fn loop_grad_mc(params: &LoopedParams, n: usize, tasks: usize, sampler: WishartSampler, rng: &mut RngStream) -> MatrixEstimate {
    grad_mc(params, n, tasks, sampler, LoopGradient::Sum, rng)
}

/// Monte Carlo estimate of the exact gradient of the trace loss.
pub fn loop_grad_exact_mc(params: &LoopedParams, n: usize, tasks: usize, sampler: WishartSampler, rng: &mut RngStream) -> MatrixEstimate {
    grad_mc(params, n, tasks, sampler, LoopGradient::Exact, rng)
}

/// Draws `count` covariances up front so losses and gradients can be
/// evaluated with common random numbers.
pub fn sample_covariances(rng: &mut RngStream, d: usize, n: usize, count: usize, sampler: WishartSampler) -> Vec<Matrix> {
    let base = rng.fork_seed();
    let root = RngStream::new(base);
    (0..count)
        .map(|i| sample_s(&mut root.derive(i as u64), d, n, sampler))
        .collect()
}

/// Mean trace loss over a fixed set of covariances.
pub fn loop_loss_closed_on(params: &LoopedParams, covs: &[Matrix]) -> f64 {
    covs.iter().map(|s| loop_loss_closed_sample(s, params)).sum::<f64>() / covs.len() as f64
}

/// Mean per-sample gradient over a fixed set of covariances.
pub fn loop_grad_on(params: &LoopedParams, covs: &[Matrix], kind: LoopGradient) -> Matrix {
    let d = params.d();
    let mut g = Matrix::zeros(d, d);
    for s in covs {
        let gi = match kind {
            LoopGradient::Exact => loop_grad_exact_sample(s, params),
            LoopGradient::Sum => loop_grad_sum_sample(s, params),
        };
        g += &gi;
    }
    g.scale(1.0 / covs.len() as f64)
}

/// Population value of both losses at `L = 1`:
/// `(d - 2 tr A + (1 + (d+1)/n) tr A^2, d - 2 tr A + (1 + 1/n) tr A^2 + (tr A)^2 / n)`
/// for symmetric `A`, as `(direct, trace form)`.
pub fn loop_losses_one_loop(a: &Matrix, n: usize) -> (f64, f64) {
    let d = a.rows() as f64;
    let nf = n as f64;
    let tr = a.trace();
    let tr2 = a.matmul(a).trace();
    (
        d - 2.0 * tr + (1.0 + (d + 1.0) / nf) * tr2,
        d - 2.0 * tr + (1.0 + 1.0 / nf) * tr2 + tr * tr / nf,
    )
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopFlowConfig {
    pub n: usize,
    pub loops: usize,
    pub h: f64,
    pub steps: usize,
    pub batch: usize,
    pub log_every: usize,
    /// Tasks for the direct loss at each log; 0 skips it.
    #[serde(default)]
    pub direct_tasks: usize,
    #[serde(default = "default_gradient")]
    pub gradient: LoopGradient,
}

fn default_gradient() -> LoopGradient {
    LoopGradient::Exact
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopRecord {
    pub step: usize,
    pub loss_closed: f64,
    pub loss_direct: Option<f64>,
    /// Standard error of `loss_closed`.
    pub stderr: f64,
    pub op_norm_i_minus_a: f64,
    /// Frobenius norm of the entrywise standard error of the step's gradient.
    pub grad_stderr: f64,
}

#[derive(Clone, Debug)]
pub struct LoopFlowOutcome {
    pub a: Matrix,
    pub records: Vec<LoopRecord>,
}

/// Euler steps `A <- A - h g` with Monte Carlo gradients of the trace loss.
/// Covariances are sampled with the Bartlett construction when `n >= d`.
pub fn loop_gradient_flow(a0: &Matrix, cfg: &LoopFlowConfig, rng: &mut RngStream) -> Result<LoopFlowOutcome> {
    let d = a0.rows();
    if !a0.is_square() {
        return Err(Error::NonSquare {
            rows: a0.rows(),
            cols: a0.cols(),
        });
    }
    if !(cfg.h > 0.0) || cfg.batch < 2 || cfg.log_every == 0 || cfg.loops == 0 {
        return Err(Error::InvalidConfig("need h > 0, batch >= 2, log_every >= 1, loops >= 1".into()));
    }
    if !a0.is_symmetric(1e-12) {
        log::warn!("non-symmetric initial A: the flow is only characterized for symmetric starts");
    }
    let sampler = if cfg.n >= d {
        WishartSampler::Bartlett
    } else {
        WishartSampler::Direct
    };
    let mut params = LoopedParams::new(a0.clone(), cfg.loops)?;
    let mut records = Vec::new();
    let mut eval_rng = rng.derive(1);
    let mut step_rng = rng.derive(0);
    for step in 0..=cfg.steps {
        let base = step_rng.fork_seed();
        let (loss, grad) = chunked_reduce(
            base,
            cfg.batch,
            || (Moments::default(), MatrixMoments::new(d, d)),
            |acc, _, r| {
                let s = sample_s(r, d, cfg.n, sampler);
                acc.0.push(loop_loss_closed_sample(&s, &params));
                let g = match cfg.gradient {
                    LoopGradient::Exact => loop_grad_exact_sample(&s, &params),
                    LoopGradient::Sum => loop_grad_sum_sample(&s, &params),
                };
                acc.1.push(&g);
            },
            |t, p| {
                t.0.merge(&p.0);
                t.1.merge(&p.1);
            },
        );
        if step % cfg.log_every == 0 || step == cfg.steps {
            let est = loss.estimate();
            let loss_direct = (cfg.direct_tasks >= 2).then(|| loop_loss_mc(&params, cfg.n, cfg.direct_tasks, &mut eval_rng).mean);
            let mut gap = Matrix::identity(d);
            gap.axpy(-1.0, &params.a);
            records.push(LoopRecord {
                step,
                loss_closed: est.mean,
                loss_direct,
                stderr: est.stderr,
                op_norm_i_minus_a: gap.operator_norm(),
                grad_stderr: grad.stderr().frobenius_norm(),
            });
        }
        if step == cfg.steps {
            break;
        }
        params.a.axpy(-cfg.h, &grad.mean());
        if !params.a.is_finite() {
            return Err(Error::Diverged { step: step + 1 });
        }
    }
    Ok(LoopFlowOutcome { a: params.a, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{central_difference, compare_gradients};

    #[test]
    fn zero_a_predicts_zero() {
        let task = sample_icl_task(&mut RngStream::new(1), 4, 9);
        let p = LoopedParams::new(Matrix::zeros(4, 4), 3).unwrap();
        assert_eq!(loop_forward(&task, &p).unwrap(), 0.0);
    }

    #[test]
    fn one_loop_is_one_gradient_step() {
        let task = sample_icl_task(&mut RngStream::new(2), 3, 7);
        let eta = 0.3;
        let p = LoopedParams::new(Matrix::identity(3).scale(eta), 1).unwrap();
        let xy = task.x.matvec(&task.y);
        let expected = eta / 7.0 * dot(&xy, &task.x_query);
        assert!((loop_forward(&task, &p).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn forward_matches_matrix_power_form() {
        let mut rng = RngStream::new(3);
        let task = sample_icl_task(&mut rng, 4, 10);
        let a = gaussian_matrix(&mut rng, 4, 4).scale(0.3);
        let p = LoopedParams::new(a.clone(), 3).unwrap();
        let s = task.x.matmul_t(&task.x).scale(0.1);
        let m = residual_power(&s, &a, 3);
        let mut e = Matrix::identity(4);
        e.axpy(-1.0, &m);
        let expected = dot(&task.w_star, &e.matvec(&task.x_query));
        assert!((loop_forward(&task, &p).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn both_losses_equal_d_at_zero() {
        let p = LoopedParams::new(Matrix::zeros(5, 5), 2).unwrap();
        let closed = loop_loss_closed_mc(&p, 10, 50, WishartSampler::Direct, &mut RngStream::new(1));
        assert_eq!(closed.mean, 5.0);
        let direct = loop_loss_mc(&p, 10, 20_000, &mut RngStream::new(2));
        assert!(direct.agrees_with(5.0, 0.0, 4.0), "{direct:?}");
    }

    #[test]
    fn gradients_agree_for_isotropic_a() {
        let mut rng = RngStream::new(4);
        let s = sample_s(&mut rng, 3, 8, WishartSampler::Direct);
        let p = LoopedParams::new(Matrix::identity(3).scale(0.6), 2).unwrap();
        let a = loop_grad_sum_sample(&s, &p);
        let b = loop_grad_exact_sample(&s, &p);
        assert!((&a - &b).max_abs() < 1e-12);
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(5);
        let covs = sample_covariances(&mut rng, 3, 6, 40, WishartSampler::Direct);
        let a = gaussian_matrix(&mut rng, 3, 3).symmetrized().scale(0.3);
        let p = LoopedParams::new(a.clone(), 2).unwrap();
        let g = loop_grad_on(&p, &covs, LoopGradient::Exact);
        let fd = central_difference(a.as_slice(), |th| {
            let q = LoopedParams::new(Matrix::from_vec(3, 3, th.to_vec()).unwrap(), 2).unwrap();
            loop_loss_closed_on(&q, &covs)
        });
        let cmp = compare_gradients(g.as_slice(), &fd, 1e-4);
        assert!(cmp.max_rel_error < 1e-6, "{cmp:?}");
    }

    #[test]
    fn identity_start_is_stationary_when_s_is_identity() {
        let p = LoopedParams::new(Matrix::identity(3), 2).unwrap();
        let s = Matrix::identity(3);
        assert_eq!(loop_grad_sum_sample(&s, &p).max_abs(), 0.0);
        assert_eq!(loop_grad_exact_sample(&s, &p).max_abs(), 0.0);
    }
}
