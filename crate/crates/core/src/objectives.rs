//! Teacher-forced chain-of-thought loss, closed-form per-sample gradients for
//! the full and reduced parameterizations, batch estimators and a central
//! finite-difference oracle.
//!
//! In a teacher-forced prompt every token sits in its exact layout, so the
//! Gram matrix `Z Z^T / n` is block diagonal: a fixed `(d+1)`-block over the
//! `(x, y)` rows and a growing `(d+1)`-block over the `(w, 1)` rows. The
//! per-sample routines below exploit that split.

use serde::{Deserialize, Serialize};

use crate::linalg::{Matrix, RngStream};
use crate::mc::{chunked_reduce, Estimate, MatrixMoments, Moments};
use crate::model::{LsaParams, ReducedParams};
use crate::task::{gd_iterates, sample_task, token_dim, TaskInstance};

/// Per-step squared errors `L_i` and their sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub per_step: Vec<f64>,
}

impl LossReport {
    fn from_steps(per_step: Vec<f64>) -> Self {
        LossReport {
            total: per_step.iter().sum(),
            per_step,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradPair {
    pub g_v: Matrix,
    pub g_w: Matrix,
}

impl GradPair {
    pub fn zeros(d: usize) -> Self {
        let de = token_dim(d);
        GradPair {
            g_v: Matrix::zeros(de, de),
            g_w: Matrix::zeros(de, de),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.g_v.as_slice().to_vec();
        out.extend_from_slice(self.g_w.as_slice());
        out
    }

    fn add_assign(&mut self, other: &GradPair) {
        self.g_v += &other.g_v;
        self.g_w += &other.g_w;
    }

    fn scale(&mut self, alpha: f64) {
        self.g_v.scale_mut(alpha);
        self.g_w.scale_mut(alpha);
    }
}

/// Gradients of the reduced model with respect to `(V31, W13, w24)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedGrad {
    pub g_v31: Matrix,
    pub g_w13: Matrix,
    pub g_w24: f64,
}

impl ReducedGrad {
    pub fn zeros(d: usize) -> Self {
        ReducedGrad {
            g_v31: Matrix::zeros(d, d),
            g_w13: Matrix::zeros(d, d),
            g_w24: 0.0,
        }
    }
}

fn data_gram(task: &TaskInstance) -> Matrix {
    let (d, n) = (task.d(), task.n());
    let nf = n as f64;
    let mut g = Matrix::zeros(d + 1, d + 1);
    g.set_block(0, 0, &task.s);
    let xy = task.x.matvec(&task.y);
    for r in 0..d {
        g[(r, d)] = xy[r] / nf;
        g[(d, r)] = xy[r] / nf;
    }
    g[(d, d)] = task.y.iter().map(|v| v * v).sum::<f64>() / nf;
    g
}

fn sym_apply(g: &Matrix, v: &[f64], out: &mut [f64]) {
    let m = g.rows();
    for (r, o) in out.iter_mut().enumerate().take(m) {
        let row = g.row(r);
        let mut s = 0.0;
        for c in 0..m {
            s += row[c] * v[c];
        }
        *o = s;
    }
}

/// Per-step quantities handed to the visitor of [`teacher_forced`].
struct StepView<'a> {
    gx: &'a Matrix,
    gw: &'a Matrix,
    /// `(w_i, 1)`, the nonzero tail of the last token.
    zw: &'a [f64],
    /// `G W z`.
    c: &'a [f64],
    /// Output minus target.
    r: &'a [f64],
}

/// Shared teacher-forced pass over the `k + 1` prompts of one task.
fn teacher_forced<F>(task: &TaskInstance, params: &LsaParams, k: usize, eta: f64, mut visit: F) -> LossReport
where
    F: FnMut(StepView<'_>),
{
    let d = task.d();
    let h = d + 1;
    let de = token_dim(d);
    let nf = task.n() as f64;
    let it = gd_iterates(task, eta, k);
    let gx = data_gram(task);
    let mut gw = Matrix::zeros(h, h);
    let mut zw = vec![0.0; h];
    let mut a = vec![0.0; de];
    let mut c = vec![0.0; de];
    let mut r = vec![0.0; de];
    let mut per_step = Vec::with_capacity(k + 1);
    for i in 0..=k {
        zw[..d].copy_from_slice(&it.iters[i]);
        zw[d] = 1.0;
        gw.add_outer(1.0 / nf, &zw, &zw);
        // a = W z, where z is zero outside the last h rows
        for (row, ar) in a.iter_mut().enumerate() {
            let wrow = &params.w.row(row)[h..];
            *ar = wrow.iter().zip(&zw).map(|(x, y)| x * y).sum();
        }
        sym_apply(&gx, &a[..h], &mut c[..h]);
        sym_apply(&gw, &a[h..], &mut c[h..]);
        let target_w: &[f64] = if i == k { &task.w_star } else { &it.iters[i + 1] };
        let mut loss = 0.0;
        for (row, rr) in r.iter_mut().enumerate() {
            let vc: f64 = params.v.row(row).iter().zip(&c).map(|(x, y)| x * y).sum();
            // z - target vanishes except on the weight slice
            let zt = if row > d && row < 2 * d + 1 {
                it.iters[i][row - h] - target_w[row - h]
            } else {
                0.0
            };
            *rr = vc + zt;
            loss += *rr * *rr;
        }
        per_step.push(0.5 * loss);
        visit(StepView {
            gx: &gx,
            gw: &gw,
            zw: &zw,
            c: &c,
            r: &r,
        });
    }
    LossReport::from_steps(per_step)
}

/// `1/2 sum_i ||f(Z_i) - (0, 0, w_{i+1}, 1)||^2` with `w_{k+1} := w*`.
pub fn cot_loss_sample(task: &TaskInstance, params: &LsaParams, k: usize, eta: f64) -> LossReport {
    teacher_forced(task, params, k, eta, |_| {})
}

/// Loss and analytic gradient: `dV = sum_i r_i c_i^T` and `dW = sum_i (G_i V^T r_i) z_i^T`.
pub fn loss_and_grad_full_sample(task: &TaskInstance, params: &LsaParams, k: usize, eta: f64) -> (LossReport, GradPair) {
    let d = task.d();
    let h = d + 1;
    let de = token_dim(d);
    let mut grad = GradPair::zeros(d);
    let mut b = vec![0.0; de];
    let mut e = vec![0.0; de];
    let report = teacher_forced(task, params, k, eta, |step| {
        let StepView { gx, gw, zw, c, r } = step;
        grad.g_v.add_outer(1.0, r, c);
        b.iter_mut().for_each(|x| *x = 0.0);
        for (row, &rr) in r.iter().enumerate() {
            if rr == 0.0 {
                continue;
            }
            for (bj, vj) in b.iter_mut().zip(params.v.row(row)) {
                *bj += vj * rr;
            }
        }
        sym_apply(gx, &b[..h], &mut e[..h]);
        sym_apply(gw, &b[h..], &mut e[h..]);
        // z_i is zero on the first h rows, so only the last h columns of dW move
        let gwm = grad.g_w.as_mut_slice();
        for (row, &er) in e.iter().enumerate() {
            if er == 0.0 {
                continue;
            }
            let dst = &mut gwm[row * de + h..(row + 1) * de];
            for (g, z) in dst.iter_mut().zip(zw) {
                *g += er * z;
            }
        }
    });
    (report, grad)
}

pub fn grad_full_sample(task: &TaskInstance, params: &LsaParams, k: usize, eta: f64) -> GradPair {
    loss_and_grad_full_sample(task, params, k, eta).1
}

/// Simplified per-sample loss of the reduced model, `1/2 sum_i ||f(w_i) - w_{i+1}||^2`.
pub fn reduced_loss_sample(task: &TaskInstance, rp: &ReducedParams, k: usize, eta: f64) -> LossReport {
    loss_and_grad_reduced_sample(task, rp, k, eta, false).0
}

/// Loss and gradient of the reduced model. With `f_i = w_i + V S u_i`,
/// `u_i = W w_i + w24 w*` and residual `r_i`:
/// `dV = sum r_i (S u_i)^T`, `dW = sum S V^T r_i w_i^T`, `dw24 = sum (S V^T r_i) . w*`.
pub fn loss_and_grad_reduced_sample(
    task: &TaskInstance,
    rp: &ReducedParams,
    k: usize,
    eta: f64,
    train_w24: bool,
) -> (LossReport, ReducedGrad) {
    let d = task.d();
    let it = gd_iterates(task, eta, k);
    let mut grad = ReducedGrad::zeros(d);
    let mut per_step = Vec::with_capacity(k + 1);
    for i in 0..=k {
        let w_i = &it.iters[i];
        let mut u = rp.w13.matvec(w_i);
        u.iter_mut().zip(&task.w_star).for_each(|(a, w)| *a += rp.w24 * w);
        let su = task.s.matvec(&u);
        let update = rp.v31.matvec(&su);
        let target: &[f64] = if i == k { &task.w_star } else { &it.iters[i + 1] };
        let r: Vec<f64> = (0..d).map(|j| w_i[j] + update[j] - target[j]).collect();
        per_step.push(0.5 * r.iter().map(|x| x * x).sum::<f64>());
        grad.g_v31.add_outer(1.0, &r, &su);
        let svr = task.s.matvec(&rp.v31.tr_matvec(&r));
        grad.g_w13.add_outer(1.0, &svr, w_i);
        if train_w24 {
            grad.g_w24 += svr.iter().zip(&task.w_star).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    (LossReport::from_steps(per_step), grad)
}

pub fn grad_reduced_sample(task: &TaskInstance, rp: &ReducedParams, k: usize, eta: f64, train_w24: bool) -> ReducedGrad {
    loss_and_grad_reduced_sample(task, rp, k, eta, train_w24).1
}

/// Batch settings for the Monte Carlo estimators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub eta: f64,
    pub batch: usize,
    /// Pair each `w*` with `-w*` on the same inputs.
    pub antithetic: bool,
}

impl McConfig {
    fn units(&self) -> usize {
        if self.antithetic {
            assert!(self.batch >= 2 && self.batch.is_multiple_of(2), "antithetic batches must be even");
            self.batch / 2
        } else {
            assert!(self.batch >= 2, "batch must be at least 2");
            self.batch
        }
    }
}

/// Batch mean of the full gradient with entrywise standard errors.
///
/// In antithetic mode the sampling unit is a pair, so standard errors are
/// computed over pair means.
#[derive(Clone, Debug)]
pub struct GradEstimate {
    pub loss: Estimate,
    pub mean: GradPair,
    pub stderr: GradPair,
}

#[derive(Clone, Debug)]
pub struct ReducedGradEstimate {
    pub loss: Estimate,
    pub mean: ReducedGrad,
}

/// Evaluates `f` on one sampling unit: a fresh task, or a task and its negation.
fn unit_tasks(cfg: &McConfig, rng: &mut RngStream) -> Vec<TaskInstance> {
    let task = sample_task(rng, cfg.d, cfg.n);
    if cfg.antithetic {
        let neg = task.negated();
        vec![task, neg]
    } else {
        vec![task]
    }
}

pub fn cot_loss_mc(params: &LsaParams, cfg: &McConfig, rng: &mut RngStream) -> Estimate {
    let base = rng.fork_seed();
    chunked_reduce(
        base,
        cfg.units(),
        Moments::default,
        |acc, _, r| {
            let tasks = unit_tasks(cfg, r);
            let total: f64 = tasks
                .iter()
                .map(|t| cot_loss_sample(t, params, cfg.k, cfg.eta).total)
                .sum();
            acc.push(total / tasks.len() as f64);
        },
        |t, p| t.merge(&p),
    )
    .estimate()
}

struct GradAcc {
    loss: Moments,
    v: MatrixMoments,
    w: MatrixMoments,
}

pub fn grad_full_mc(params: &LsaParams, cfg: &McConfig, rng: &mut RngStream) -> GradEstimate {
    let de = token_dim(cfg.d);
    let base = rng.fork_seed();
    let acc = chunked_reduce(
        base,
        cfg.units(),
        || GradAcc {
            loss: Moments::default(),
            v: MatrixMoments::new(de, de),
            w: MatrixMoments::new(de, de),
        },
        |acc, _, r| {
            let tasks = unit_tasks(cfg, r);
            let mut g = GradPair::zeros(cfg.d);
            let mut loss = 0.0;
            for t in &tasks {
                let (l, gi) = loss_and_grad_full_sample(t, params, cfg.k, cfg.eta);
                loss += l.total;
                g.add_assign(&gi);
            }
            let m = 1.0 / tasks.len() as f64;
            g.scale(m);
            acc.loss.push(loss * m);
            acc.v.push(&g.g_v);
            acc.w.push(&g.g_w);
        },
        |t, p| {
            t.loss.merge(&p.loss);
            t.v.merge(&p.v);
            t.w.merge(&p.w);
        },
    );
    GradEstimate {
        loss: acc.loss.estimate(),
        mean: GradPair {
            g_v: acc.v.mean(),
            g_w: acc.w.mean(),
        },
        stderr: GradPair {
            g_v: acc.v.stderr(),
            g_w: acc.w.stderr(),
        },
    }
}

pub fn grad_reduced_mc(rp: &ReducedParams, cfg: &McConfig, train_w24: bool, rng: &mut RngStream) -> ReducedGradEstimate {
    let d = cfg.d;
    let base = rng.fork_seed();
    let units = cfg.units();
    let (loss, grad) = chunked_reduce(
        base,
        units,
        || (Moments::default(), ReducedGrad::zeros(d)),
        |acc, _, r| {
            let tasks = unit_tasks(cfg, r);
            let m = 1.0 / tasks.len() as f64;
            let mut unit = ReducedGrad::zeros(d);
            let mut loss = 0.0;
            for t in &tasks {
                let (l, g) = loss_and_grad_reduced_sample(t, rp, cfg.k, cfg.eta, train_w24);
                loss += l.total;
                unit.g_v31 += &g.g_v31;
                unit.g_w13 += &g.g_w13;
                unit.g_w24 += g.g_w24;
            }
            acc.0.push(loss * m);
            acc.1.g_v31.axpy(m, &unit.g_v31);
            acc.1.g_w13.axpy(m, &unit.g_w13);
            acc.1.g_w24 += m * unit.g_w24;
        },
        |t, p| {
            t.0.merge(&p.0);
            t.1.g_v31 += &p.1.g_v31;
            t.1.g_w13 += &p.1.g_w13;
            t.1.g_w24 += p.1.g_w24;
        },
    );
    let inv = 1.0 / units as f64;
    ReducedGradEstimate {
        loss: loss.estimate(),
        mean: ReducedGrad {
            g_v31: grad.g_v31.scale(inv),
            g_w13: grad.g_w13.scale(inv),
            g_w24: grad.g_w24 * inv,
        },
    }
}

/// Finite-difference step `1e-6 * max(1, |theta|)`.
pub fn fd_step(theta: f64) -> f64 {
    1e-6 * theta.abs().max(1.0)
}

/// Central differences of `f` at `theta`, one coordinate at a time.
pub fn central_difference<F>(theta: &[f64], mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let h = fd_step(theta[i]);
            x[i] = theta[i] + h;
            let plus = f(&x);
            x[i] = theta[i] - h;
            let minus = f(&x);
            x[i] = theta[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdComparison {
    /// Largest `|a - f| / |a|` over entries with `|a| > rel_floor * max|a|`.
    pub max_rel_error: f64,
    /// `max|a - f| / max|a|` over all entries.
    pub normwise_rel_error: f64,
    /// Largest `|a - f|` over entries below the floor.
    pub max_abs_error_small: f64,
    pub checked: usize,
}

/// Entrywise comparison of an analytic gradient against finite differences.
///
/// Central differences carry an absolute roundoff of order
/// `eps * |loss| / h`, so entries many orders below the largest one are
/// compared in absolute terms only.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], rel_floor: f64) -> FdComparison {
    let scale = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let floor = rel_floor * scale;
    let mut out = FdComparison {
        max_rel_error: 0.0,
        normwise_rel_error: 0.0,
        max_abs_error_small: 0.0,
        checked: 0,
    };
    let mut worst = 0.0f64;
    for (a, f) in analytic.iter().zip(numeric) {
        let diff = (a - f).abs();
        worst = worst.max(diff);
        if a.abs() > floor && a.abs() > 0.0 {
            out.checked += 1;
            out.max_rel_error = out.max_rel_error.max(diff / a.abs());
        } else {
            out.max_abs_error_small = out.max_abs_error_small.max(diff);
        }
    }
    out.normwise_rel_error = if scale > 0.0 {
        worst / scale
    } else if worst > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    out
}
