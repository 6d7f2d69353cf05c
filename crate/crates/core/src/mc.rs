//! Monte Carlo plumbing shared by every estimator in the crate.
//!
//! Work is split into units (one task, or one antithetic pair). Unit `i` draws
//! from `RngStream::new(base).derive(i)`, units are grouped into chunks of
//! [`CHUNK`], each chunk is summed sequentially and chunk partials are folded in
//! index order. The result therefore depends only on the base seed, never on
//! the number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{Matrix, RngStream};

pub const CHUNK: usize = 64;

/// A Monte Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate {
            mean: value,
            stderr: 0.0,
            count: 1,
        }
    }

    /// `|mean - target| <= max(abs_tol, sigmas * stderr)`.
    pub fn agrees_with(&self, target: f64, abs_tol: f64, sigmas: f64) -> bool {
        (self.mean - target).abs() <= abs_tol.max(sigmas * self.stderr)
    }

    /// Standard error of the difference of two independent estimates.
    pub fn combined_stderr(&self, other: &Estimate) -> f64 {
        self.stderr.hypot(other.stderr)
    }
}

/// Running sum and sum of squares of scalar samples.
#[derive(Clone, Copy, Debug, Default)]
pub struct Moments {
    pub count: usize,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn merge(&mut self, other: &Moments) {
        self.count += other.count;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }

    pub fn estimate(&self) -> Estimate {
        let n = self.count as f64;
        let mean = self.sum / n;
        let var = if self.count > 1 {
            ((self.sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        Estimate {
            mean,
            stderr: (var / n).sqrt(),
            count: self.count,
        }
    }
}

/// Entrywise running moments of matrix-valued samples.
#[derive(Clone, Debug)]
pub struct MatrixMoments {
    pub count: usize,
    pub sum: Matrix,
    pub sum_sq: Matrix,
}

impl MatrixMoments {
    pub fn new(rows: usize, cols: usize) -> Self {
        MatrixMoments {
            count: 0,
            sum: Matrix::zeros(rows, cols),
            sum_sq: Matrix::zeros(rows, cols),
        }
    }

    pub fn push(&mut self, x: &Matrix) {
        self.count += 1;
        self.sum += x;
        for (s, v) in self.sum_sq.as_mut_slice().iter_mut().zip(x.as_slice()) {
            *s += v * v;
        }
    }

    pub fn merge(&mut self, other: &MatrixMoments) {
        self.count += other.count;
        self.sum += &other.sum;
        self.sum_sq += &other.sum_sq;
    }

    pub fn mean(&self) -> Matrix {
        self.sum.scale(1.0 / self.count as f64)
    }

    /// Entrywise standard error of the mean.
    pub fn stderr(&self) -> Matrix {
        let n = self.count as f64;
        let mut out = self.sum.clone();
        for (o, &sq) in out.as_mut_slice().iter_mut().zip(self.sum_sq.as_slice()) {
            let mean = *o / n;
            let var = if self.count > 1 {
                ((sq - n * mean * mean) / (n - 1.0)).max(0.0)
            } else {
                0.0
            };
            *o = (var / n).sqrt();
        }
        out
    }
}

/// Deterministic chunked parallel reduction over `units` work items.
///
/// `add(acc, unit, rng)` folds unit `unit` into a chunk accumulator, `merge`
/// folds a finished chunk into the running total.
pub fn chunked_reduce<A, I, F, M>(base_seed: u64, units: usize, init: I, add: F, mut merge: M) -> A
where
    A: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, usize, &mut RngStream) + Sync,
    M: FnMut(&mut A, A),
{
    let root = RngStream::new(base_seed);
    let chunks = units.div_ceil(CHUNK);
    let partials: Vec<A> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            for unit in c * CHUNK..((c + 1) * CHUNK).min(units) {
                let mut rng = root.derive(unit as u64);
                add(&mut acc, unit, &mut rng);
            }
            acc
        })
        .collect();
    let mut total = init();
    for p in partials {
        merge(&mut total, p);
    }
    total
}

/// Scalar Monte Carlo mean over `units` independent draws of `sample`.
pub fn mc_scalar<F>(rng: &mut RngStream, units: usize, sample: F) -> Estimate
where
    F: Fn(&mut RngStream) -> f64 + Sync,
{
    let base = rng.fork_seed();
    chunked_reduce(
        base,
        units,
        Moments::default,
        |acc, _, r| acc.push(sample(r)),
        |total, part| total.merge(&part),
    )
    .estimate()
}

/// Entrywise matrix Monte Carlo mean over `units` draws of `sample`.
pub fn mc_matrix<F>(rng: &mut RngStream, units: usize, rows: usize, cols: usize, sample: F) -> MatrixMoments
where
    F: Fn(&mut RngStream) -> Matrix + Sync,
{
    let base = rng.fork_seed();
    chunked_reduce(
        base,
        units,
        || MatrixMoments::new(rows, cols),
        |acc, _, r| acc.push(&sample(r)),
        |total, part| total.merge(&part),
    )
}
