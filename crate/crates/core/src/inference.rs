//! Autoregressive chain-of-thought rollouts and evaluation losses.
//!
//! Each generated token is appended verbatim, including whatever the model
//! writes into the rows outside the weight slice.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::{matpow, norm, sub, Matrix, RngStream};
use crate::mc::{mc_scalar, Estimate};
use crate::model::{embed_reduced, forward_with_gram, Gram, LsaParams, ReducedParams};
use crate::task::{gd_iterates, sample_task, sample_task_cov, weight_slice, weight_token, TaskInstance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    /// `w_hat_1 ..= w_hat_{k'+1}`.
    pub w_hats: Vec<Vec<f64>>,
    /// `||w_hat_i - w_i||` against gradient descent, same indexing as `w_hats`.
    pub per_step_pred_error: Vec<f64>,
    /// `||w_hat_{k'+1} - w*||`.
    pub final_error: f64,
    /// The last generated token in full.
    pub final_token: Vec<f64>,
}

fn rollout_impl(task: &TaskInstance, params: &LsaParams, k_prime: usize, zero_extra: bool) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let d = task.d();
    if params.d != d {
        return Err(crate::error::Error::DimensionMismatch(format!(
            "parameters for d={} applied to a task with d={d}",
            params.d
        )));
    }
    let mut gram = Gram::from_task(task);
    let mut z = weight_token(&vec![0.0; d]);
    let mut w_hats = Vec::with_capacity(k_prime + 1);
    for _ in 0..=k_prime {
        gram.push(&z);
        let mut out = forward_with_gram(params, &gram, &z);
        if zero_extra {
            let w = weight_slice(&out, d).to_vec();
            out = weight_token(&w);
            // the indicator written by the model is kept
        }
        w_hats.push(weight_slice(&out, d).to_vec());
        z = out;
    }
    Ok((w_hats, z))
}

/// Generates `k' + 1` tokens starting from the prompt with `w_0 = 0`.
///
/// `eta` only defines the reference iterates used for `per_step_pred_error`.
pub fn cot_rollout(task: &TaskInstance, params: &LsaParams, k_prime: usize, eta: f64) -> Result<Rollout> {
    let (w_hats, final_token) = rollout_impl(task, params, k_prime, false)?;
    let it = gd_iterates(task, eta, k_prime);
    let per_step_pred_error = w_hats
        .iter()
        .zip(&it.iters[1..])
        .map(|(a, b)| norm(&sub(a, b)))
        .collect();
    let final_error = norm(&sub(w_hats.last().expect("k'+1 >= 1 tokens"), &task.w_star));
    Ok(Rollout {
        w_hats,
        per_step_pred_error,
        final_error,
        final_token,
    })
}

/// Largest change of any predicted weight when every generated token is
/// reduced to `(0, 0, w_hat, 1)` before being fed back.
pub fn extra_entry_sensitivity(task: &TaskInstance, params: &LsaParams, k_prime: usize) -> Result<f64> {
    let (a, _) = rollout_impl(task, params, k_prime, false)?;
    let (b, _) = rollout_impl(task, params, k_prime, true)?;
    Ok(a.iter()
        .zip(&b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max))
}

/// `1/2 ||f(Z_hat_{k'}) - (0, 0, w*, 1)||^2` for one task.
pub fn eval_loss_sample(task: &TaskInstance, params: &LsaParams, k_prime: usize) -> Result<f64> {
    let (_, last) = rollout_impl(task, params, k_prime, false)?;
    let target = weight_token(&task.w_star);
    Ok(0.5 * last.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
}

pub fn eval_loss_mc(params: &LsaParams, d: usize, n: usize, k_prime: usize, tasks: usize, rng: &mut RngStream) -> Estimate {
    assert!(tasks >= 2, "need at least two tasks");
    mc_scalar(rng, tasks, |r| {
        let task = sample_task(r, d, n);
        eval_loss_sample(&task, params, k_prime).expect("dimensions agree")
    })
}

/// Whether every eigenvalue of `cov` lies in `[delta/eta, (2-delta)/eta]`;
/// logs a warning otherwise, and when `delta < 0.1`.
pub fn check_ood_window(cov: &Matrix, eta: f64, delta: f64) -> Result<bool> {
    if delta < 0.1 {
        warn!("delta = {delta} is below 0.1");
    }
    let (values, _) = cov.sym_eigen()?;
    let (lo, hi) = (delta / eta, (2.0 - delta) / eta);
    let inside = values.iter().all(|&l| l >= lo && l <= hi);
    if !inside {
        warn!(
            "covariance spectrum [{:.4}, {:.4}] leaves the window [{lo:.4}, {hi:.4}]",
            values[0],
            values[values.len() - 1]
        );
    }
    Ok(inside)
}

/// Evaluation loss with inputs drawn from `N(0, cov)`.
pub fn eval_loss_ood_mc(
    params: &LsaParams,
    cov: &Matrix,
    d: usize,
    n: usize,
    k_prime: usize,
    tasks: usize,
    rng: &mut RngStream,
) -> Result<Estimate> {
    assert!(tasks >= 2, "need at least two tasks");
    cov.cholesky()?;
    Ok(mc_scalar(rng, tasks, |r| {
        let task = sample_task_cov(r, d, n, cov).expect("covariance validated");
        eval_loss_sample(&task, params, k_prime).expect("dimensions agree")
    }))
}

/// Split of the final error of a reduced-model rollout into the gradient
/// descent gap and propagated one-step prediction errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    pub final_error: f64,
    /// `||w_{k'+1} - w*||`.
    pub gd_gap: f64,
    /// `||(I + V S W)^i D_{k'+1-i}||` for `i = 0..=k'`, where `D_j = f(w_{j-1}) - w_j`.
    pub propagated: Vec<f64>,
    pub bound: f64,
}

pub fn error_decomposition(task: &TaskInstance, rp: &ReducedParams, k_prime: usize, eta: f64) -> Result<ErrorDecomposition> {
    let d = task.d();
    let rollout = cot_rollout(task, &embed_reduced(rp, d), k_prime, eta)?;
    let it = gd_iterates(task, eta, k_prime);
    let gd_gap = norm(&sub(&it.iters[k_prime + 1], &task.w_star));
    let mut m = rp.v31.matmul(&task.s).matmul(&rp.w13);
    m += &Matrix::identity(d);
    let propagated = (0..=k_prime)
        .map(|i| {
            let j = k_prime + 1 - i;
            let pred = crate::model::reduced_forward(&it.iters[j - 1], task, rp)?;
            let delta = sub(&pred, &it.iters[j]);
            Ok(norm(&matpow(&m, i)?.matvec(&delta)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let bound = gd_gap + propagated.iter().sum::<f64>();
    Ok(ErrorDecomposition {
        final_error: rollout.final_error,
        gd_gap,
        propagated,
        bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{construct_multistep, forward_last_token, init_random};
    use crate::task::build_prompt;

    #[test]
    fn construction_rollout_reproduces_gd() {
        let task = sample_task(&mut RngStream::new(1), 10, 20);
        let eta = 0.4;
        let r = cot_rollout(&task, &construct_multistep(10, eta), 20, eta).unwrap();
        let it = gd_iterates(&task, eta, 20);
        for (i, (a, b)) in r.w_hats.iter().zip(&it.iters[1..]).enumerate() {
            let rel = norm(&sub(a, b)) / norm(b);
            assert!(rel < 1e-10, "step {i}: {rel}");
        }
        let expected = norm(&sub(&it.iters[21], &task.w_star));
        assert!((r.final_error - expected).abs() < 1e-10);
    }

    #[test]
    fn zero_params_predict_zero() {
        let task = sample_task(&mut RngStream::new(2), 4, 6);
        let r = cot_rollout(&task, &LsaParams::zeros(4), 3, 0.4).unwrap();
        assert!(r.w_hats.iter().all(|w| w.iter().all(|&v| v == 0.0)));
        assert_eq!(r.final_error, norm(&task.w_star));
    }

    #[test]
    fn single_step_rollout_is_one_forward_pass() {
        let task = sample_task(&mut RngStream::new(3), 3, 5);
        let p = init_random(&mut RngStream::new(4), 3, 0.5);
        let r = cot_rollout(&task, &p, 0, 0.4).unwrap();
        let z0 = build_prompt(&task, &gd_iterates(&task, 0.4, 0), 0).unwrap();
        let out = forward_last_token(&z0, &p).unwrap();
        for (a, b) in r.final_token.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pattern_params_ignore_extra_entries() {
        let task = sample_task(&mut RngStream::new(5), 4, 8);
        let rp = ReducedParams {
            v31: Matrix::from_diag(&[-0.3, -0.4, -0.5, -0.35]),
            w13: Matrix::from_diag(&[0.9, 1.1, 1.0, 0.8]),
            w24: -1.0,
        };
        let s = extra_entry_sensitivity(&task, &embed_reduced(&rp, 4), 6).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn decomposition_bounds_the_final_error() {
        let task = sample_task(&mut RngStream::new(6), 5, 12);
        let rp = ReducedParams {
            v31: Matrix::identity(5).scale(-0.38),
            w13: Matrix::identity(5).scale(1.05),
            w24: -1.0,
        };
        let dec = error_decomposition(&task, &rp, 8, 0.4).unwrap();
        assert!(dec.final_error <= dec.bound * (1.0 + 1e-12));
        assert_eq!(dec.propagated.len(), 9);
    }

    #[test]
    fn window_check_flags_out_of_range_covariance() {
        let eta = 0.4;
        assert!(check_ood_window(&Matrix::identity(3).scale(2.0), eta, 0.5).unwrap());
        assert!(!check_ood_window(&Matrix::identity(3).scale(2.5 / eta), eta, 0.5).unwrap());
    }
}
