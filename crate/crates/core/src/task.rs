//! Linear-regression tasks, their gradient-descent iterates and the prompt
//! token layout.
//!
//! A token has `d_e = 2d + 2` rows laid out as `(x, y, w, indicator)`:
//! rows `0..d` carry an input, row `d` its label, rows `d+1..2d+1` a weight
//! vector and row `2d+1` is 1 on weight tokens and 0 on data tokens.

use std::io::{BufRead, Write};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, gaussian_with_cov, random_orthogonal, Matrix, RngStream};

/// Token dimension for data dimension `d`.
pub const fn token_dim(d: usize) -> usize {
    2 * d + 2
}

/// One noiseless regression task `y = X^T w*`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskInstance {
    /// `d x n`, one example per column.
    pub x: Matrix,
    pub w_star: Vec<f64>,
    pub y: Vec<f64>,
    /// Empirical covariance `X X^T / n`.
    pub s: Matrix,
}

impl TaskInstance {
    pub fn new(x: Matrix, w_star: Vec<f64>) -> Result<Self> {
        if x.rows() != w_star.len() {
            return Err(Error::DimensionMismatch(format!(
                "x has {} rows, w* has length {}",
                x.rows(),
                w_star.len()
            )));
        }
        let y = x.tr_matvec(&w_star);
        let s = x.matmul_t(&x).scale(1.0 / x.cols() as f64);
        Ok(TaskInstance { x, w_star, y, s })
    }

    pub fn d(&self) -> usize {
        self.x.rows()
    }

    pub fn n(&self) -> usize {
        self.x.cols()
    }

    /// The antithetic partner: same inputs, `w*` and labels negated.
    pub fn negated(&self) -> TaskInstance {
        TaskInstance {
            x: self.x.clone(),
            w_star: self.w_star.iter().map(|v| -v).collect(),
            y: self.y.iter().map(|v| -v).collect(),
            s: self.s.clone(),
        }
    }
}

pub fn sample_task(rng: &mut RngStream, d: usize, n: usize) -> TaskInstance {
    let x = gaussian_matrix(rng, d, n);
    let w_star = rng.normal_vec(d);
    TaskInstance::new(x, w_star).expect("shapes agree by construction")
}

/// Task with inputs drawn from `N(0, cov)` and `w* ~ N(0, I)`.
pub fn sample_task_cov(rng: &mut RngStream, d: usize, n: usize, cov: &Matrix) -> Result<TaskInstance> {
    if cov.shape() != (d, d) {
        return Err(Error::DimensionMismatch(format!(
            "covariance is {}x{}, expected {d}x{d}",
            cov.rows(),
            cov.cols()
        )));
    }
    let x = gaussian_with_cov(rng, cov, n)?;
    let w_star = rng.normal_vec(d);
    TaskInstance::new(x, w_star)
}

/// Covariance `U diag(lambda) U^T` with `lambda` uniform on `[delta/eta, (2-delta)/eta]`.
pub fn sample_window_covariance(rng: &mut RngStream, d: usize, eta: f64, delta: f64) -> Matrix {
    let u = random_orthogonal(rng, d);
    let lambda: Vec<f64> = (0..d)
        .map(|_| rng.uniform(delta / eta, (2.0 - delta) / eta))
        .collect();
    u.matmul(&Matrix::from_diag(&lambda)).matmul(&u.transpose()).symmetrized()
}

/// Logs a warning when `eta` falls outside `(0.1, 0.9)`.
pub fn check_eta(eta: f64) -> bool {
    let ok = eta > 0.1 && eta < 0.9;
    if !ok {
        warn!("learning rate {eta} lies outside (0.1, 0.9); convergence guarantees do not apply");
    }
    ok
}

/// Gradient-descent iterates `w_0 = 0, ..., w_{k+1}` on the in-context least squares objective.
#[derive(Clone, Debug, PartialEq)]
pub struct GdIterates {
    pub eta: f64,
    pub iters: Vec<Vec<f64>>,
}

impl GdIterates {
    /// Number of chain steps `k`; `iters` holds `k + 2` vectors.
    pub fn k(&self) -> usize {
        self.iters.len() - 2
    }
}

pub fn gd_iterates(task: &TaskInstance, eta: f64, k: usize) -> GdIterates {
    let n = task.n() as f64;
    let mut iters = Vec::with_capacity(k + 2);
    let mut w = vec![0.0; task.d()];
    iters.push(w.clone());
    for _ in 0..=k {
        let residual: Vec<f64> = task
            .x
            .tr_matvec(&w)
            .iter()
            .zip(&task.y)
            .map(|(p, y)| p - y)
            .collect();
        let grad = task.x.matvec(&residual);
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= eta * g / n;
        }
        iters.push(w.clone());
    }
    GdIterates { eta, iters }
}

/// `(I - (I - eta S)^i) w*`.
pub fn gd_closed_form(task: &TaskInstance, eta: f64, i: usize) -> Vec<f64> {
    let d = task.d();
    let step = &Matrix::identity(d) - &task.s.scale(eta);
    let decay = crate::linalg::matpow(&step, i).expect("square");
    let residual = decay.matvec(&task.w_star);
    task.w_star.iter().zip(&residual).map(|(w, r)| w - r).collect()
}

/// Token matrix `Z_i` with `n + i + 1` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSequence {
    pub d: usize,
    pub n: usize,
    pub step_index: usize,
    pub tokens: Matrix,
}

impl PromptSequence {
    pub fn d_e(&self) -> usize {
        token_dim(self.d)
    }

    pub fn last_column(&self) -> Vec<f64> {
        self.tokens.column(self.tokens.cols() - 1)
    }
}

/// `(x, y, 0_d, 0)`.
pub fn data_token(x: &[f64], y: f64) -> Vec<f64> {
    let d = x.len();
    let mut t = vec![0.0; token_dim(d)];
    t[..d].copy_from_slice(x);
    t[d] = y;
    t
}

/// `(0_d, 0, w, 1)`.
pub fn weight_token(w: &[f64]) -> Vec<f64> {
    let d = w.len();
    let mut t = vec![0.0; token_dim(d)];
    t[d + 1..2 * d + 1].copy_from_slice(w);
    t[2 * d + 1] = 1.0;
    t
}

/// The weight slice (rows `d+1..2d+1`) of a token.
pub fn weight_slice(token: &[f64], d: usize) -> &[f64] {
    &token[d + 1..2 * d + 1]
}

pub fn build_prompt(task: &TaskInstance, iterates: &GdIterates, i: usize) -> Result<PromptSequence> {
    let k = iterates.k();
    if i > k {
        return Err(Error::StepOutOfRange { step: i, max: k });
    }
    let (d, n) = (task.d(), task.n());
    let mut tokens = Matrix::zeros(token_dim(d), n + i + 1);
    for j in 0..n {
        tokens.set_column(j, &data_token(&task.x.column(j), task.y[j]));
    }
    for m in 0..=i {
        tokens.set_column(n + m, &weight_token(&iterates.iters[m]));
    }
    Ok(PromptSequence {
        d,
        n,
        step_index: i,
        tokens,
    })
}

/// Teacher target `(0_d, 0, w_{i+1}, 1)`, with `w*` in place of `w_{k+1}`.
pub fn target_token(iterates: &GdIterates, i: usize, final_w: &[f64]) -> Result<Vec<f64>> {
    let k = iterates.k();
    if i > k {
        return Err(Error::StepOutOfRange { step: i, max: k });
    }
    Ok(if i == k {
        weight_token(final_w)
    } else {
        weight_token(&iterates.iters[i + 1])
    })
}

/// One line of the task dump format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub d: usize,
    pub n: usize,
    pub seed: u64,
    pub w_star: Vec<f64>,
    /// Column-major: `x[j*d + r]` is row `r` of example `j`.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl TaskRecord {
    pub fn from_task(task: &TaskInstance, seed: u64) -> Self {
        let (d, n) = (task.d(), task.n());
        let x = (0..n).flat_map(|j| task.x.column(j)).collect();
        TaskRecord {
            d,
            n,
            seed,
            w_star: task.w_star.clone(),
            x,
            y: task.y.clone(),
        }
    }

    pub fn to_task(&self) -> Result<TaskInstance> {
        if self.x.len() != self.d * self.n || self.w_star.len() != self.d {
            return Err(Error::DimensionMismatch("task record shape".into()));
        }
        let x = Matrix::from_fn(self.d, self.n, |r, c| self.x[c * self.d + r]);
        TaskInstance::new(x, self.w_star.clone())
    }
}

pub fn write_tasks_jsonl<W: Write>(mut out: W, records: &[TaskRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_tasks_jsonl<R: BufRead>(input: R) -> Result<Vec<TaskRecord>> {
    let mut records = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}
