//! Optimizers, initializations, the training loop and the idealized
//! eigenvalue ODE.

use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::eval_loss_mc;
use crate::linalg::{random_orthogonal, Matrix, RngStream};
use crate::mc::Estimate;
use crate::model::{embed_reduced, extract_reduced, init_random, pattern_residual, LsaParams, PatternReport, ReducedParams};
use crate::objectives::{grad_full_mc, GradPair, McConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Reduced blocks only, `w24` held at -1, simultaneously diagonalizable start.
    Theory,
    /// Both full factors trained from a random start.
    Experiment,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    /// Explicit Euler steps of the gradient flow.
    GradientFlow {
        #[serde(default = "default_h")]
        h: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_h() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_sigma() -> f64 {
    0.3
}
fn default_init_scale() -> f64 {
    0.1
}
fn default_log_every() -> usize {
    50
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    Standard,
    RandomOrthogonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub eta: f64,
    pub mode: Mode,
    pub optimizer: Optimizer,
    pub batch: usize,
    #[serde(default)]
    pub antithetic: bool,
    pub iterations: usize,
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Tasks for the periodic evaluation loss; 0 disables it.
    #[serde(default)]
    pub eval_tasks: usize,
    /// Chain length at evaluation; defaults to `k`.
    #[serde(default)]
    pub eval_k_prime: Option<usize>,
    /// Standard deviation of the random start (experiment mode).
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// Eigenvalue margin of the structured start (theory mode).
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_basis")]
    pub basis: Basis,
}

fn default_basis() -> Basis {
    Basis::Standard
}

impl TrainConfig {
    /// d=10, n=20, k=20, eta=0.4, Adam 1e-3, batch 1000, 750 iterations, init scale 0.1.
    pub fn heatmap_recipe(seed: u64) -> Self {
        TrainConfig {
            d: 10,
            n: 20,
            k: 20,
            eta: 0.4,
            mode: Mode::Experiment,
            optimizer: Optimizer::adam(1e-3),
            batch: 1000,
            antithetic: false,
            iterations: 750,
            seed,
            log_every: 50,
            eval_tasks: 0,
            eval_k_prime: None,
            init_scale: 0.1,
            sigma: default_sigma(),
            basis: Basis::Standard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d == 0 || self.n == 0 {
            return bad("d and n must be positive".into());
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if self.batch < 2 {
            return bad("batch must be at least 2".into());
        }
        if self.antithetic && !self.batch.is_multiple_of(2) {
            return bad("antithetic batches must be even".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        match self.optimizer {
            Optimizer::GradientFlow { h } if !(h > 0.0) => return bad(format!("step h must be positive, got {h}")),
            Optimizer::Adam { lr, .. } if !(lr > 0.0) => return bad(format!("lr must be positive, got {lr}")),
            _ => {}
        }
        if self.mode == Mode::Theory && !(self.sigma > 0.0 && self.sigma <= 0.5) {
            return Err(Error::BadSigma(self.sigma));
        }
        if self.mode == Mode::Experiment && !(self.init_scale >= 0.0) {
            return bad("init_scale must be non-negative".into());
        }
        crate::task::check_eta(self.eta);
        if self.mode == Mode::Theory {
            check_sigma(self.sigma, self.eta, self.k);
        }
        Ok(())
    }

    fn mc(&self) -> McConfig {
        McConfig {
            d: self.d,
            n: self.n,
            k: self.k,
            eta: self.eta,
            batch: self.batch,
            antithetic: self.antithetic,
        }
    }
}

/// Warns when `sigma <= 3(1-eta)/((2-eta)(k+1))`.
pub fn check_sigma(sigma: f64, eta: f64, k: usize) -> bool {
    let threshold = 3.0 * (1.0 - eta) / ((2.0 - eta) * (k as f64 + 1.0));
    let ok = sigma > threshold;
    if !ok {
        warn!("sigma = {sigma} does not exceed {threshold:.4}; the structured start may be too small");
    }
    ok
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

enum Stepper {
    Flow(f64),
    Adam(Adam),
}

impl Stepper {
    fn new(opt: &Optimizer, len: usize) -> Self {
        match *opt {
            Optimizer::GradientFlow { h } => Stepper::Flow(h),
            Optimizer::Adam { lr, beta1, beta2, eps } => Stepper::Adam(Adam::new(len, lr, beta1, beta2, eps)),
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            Stepper::Flow(h) => params.iter_mut().zip(grad).for_each(|(p, g)| *p -= *h * g),
            Stepper::Adam(a) => a.step(params, grad),
        }
    }
}

/// Structured start: `V31 = U diag(lv) U^T` with `lv` uniform on `[-2 sigma, -sigma]`,
/// `W13 = U diag(lw) U^T` with `lw` uniform on `[sigma, 1/2]`, `w24 = -1`.
pub fn init_assumption1(rng: &mut RngStream, d: usize, sigma: f64, basis: Basis) -> Result<(ReducedParams, Matrix)> {
    if !(sigma > 0.0 && sigma <= 0.5) {
        return Err(Error::BadSigma(sigma));
    }
    let u = match basis {
        Basis::Standard => Matrix::identity(d),
        Basis::RandomOrthogonal => random_orthogonal(rng, d),
    };
    let lv: Vec<f64> = (0..d).map(|_| rng.uniform(-2.0 * sigma, -sigma)).collect();
    let lw: Vec<f64> = (0..d).map(|_| rng.uniform(sigma, 0.5)).collect();
    let compose = |l: &[f64]| {
        if basis == Basis::Standard {
            Matrix::from_diag(l)
        } else {
            u.matmul(&Matrix::from_diag(l)).matmul(&u.transpose()).symmetrized()
        }
    };
    Ok((
        ReducedParams {
            v31: compose(&lv),
            w13: compose(&lw),
            w24: -1.0,
        },
        u,
    ))
}

/// Eigenvalues of the reduced blocks measured in a fixed basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralTrace {
    pub lambda_v: Vec<f64>,
    pub lambda_w: Vec<f64>,
    /// `||V31 - U diag(lambda_v) U^T||_F`.
    pub off_basis_v: f64,
    pub off_basis_w: f64,
}

pub fn spectral_trace(rp: &ReducedParams, u: &Matrix) -> SpectralTrace {
    let measure = |m: &Matrix| {
        let proj = u.transpose().matmul(m).matmul(u);
        let lambda = proj.diag();
        let rebuilt = u.matmul(&Matrix::from_diag(&lambda)).matmul(&u.transpose());
        (lambda, (m - &rebuilt).frobenius_norm())
    };
    let (lambda_v, off_basis_v) = measure(&rp.v31);
    let (lambda_w, off_basis_w) = measure(&rp.w13);
    SpectralTrace {
        lambda_v,
        lambda_w,
        off_basis_v,
        off_basis_w,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub cot_loss: Estimate,
    pub eval_loss: Option<Estimate>,
    pub pattern: PatternReport,
    pub spectral: Option<SpectralTrace>,
    pub grad_norm_v: f64,
    pub grad_norm_w: f64,
    /// Theory mode: largest off-pattern gradient entry over the largest pattern entry.
    pub off_pattern_grad_ratio: Option<f64>,
    pub wall_ms: f64,
}

/// Where training starts from.
#[derive(Clone, Debug)]
pub enum TrainInit {
    /// Draw the start prescribed by the mode from the config seed.
    FromSeed,
    Full(LsaParams),
    /// Structured start with the basis used for spectral tracing.
    Reduced { rp: ReducedParams, basis: Matrix },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final parameters, or the last finite ones when training diverged.
    pub params: LsaParams,
    pub records: Vec<TrajectoryRecord>,
    pub diverged_at: Option<usize>,
    /// Spectral basis in theory mode.
    pub basis: Option<Matrix>,
}

/// Stream ids split from the run seed.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_BATCH: u64 = 1;
pub const STREAM_EVAL: u64 = 2;

fn pattern_mask(d: usize) -> (Vec<bool>, Vec<bool>) {
    let de = crate::task::token_dim(d);
    let mut v = vec![false; de * de];
    let mut w = vec![false; de * de];
    for r in d + 1..2 * d + 1 {
        for c in 0..d {
            v[r * de + c] = true;
        }
    }
    for r in 0..d {
        for c in d + 1..2 * d + 1 {
            w[r * de + c] = true;
        }
    }
    w[d * de + 2 * d + 1] = true;
    (v, w)
}

fn off_pattern_ratio(g: &GradPair, d: usize) -> f64 {
    let (mv, mw) = pattern_mask(d);
    let (mut on, mut off) = (0.0f64, 0.0f64);
    for (vals, mask) in [(g.g_v.as_slice(), &mv), (g.g_w.as_slice(), &mw)] {
        for (x, &m) in vals.iter().zip(mask.iter()) {
            if m {
                on = on.max(x.abs());
            } else {
                off = off.max(x.abs());
            }
        }
    }
    if on > 0.0 {
        off / on
    } else if off > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Runs `cfg.iterations` optimizer steps; `observer` sees every logged record
/// together with the parameters it describes.
pub fn train<O>(cfg: &TrainConfig, init: TrainInit, mut observer: O) -> Result<TrainOutcome>
where
    O: FnMut(&TrajectoryRecord, &LsaParams),
{
    cfg.validate()?;
    let root = RngStream::new(cfg.seed);
    let mut init_rng = root.derive(STREAM_INIT);
    let mut batch_rng = root.derive(STREAM_BATCH);
    let eval_rng = root.derive(STREAM_EVAL);
    let d = cfg.d;

    let (mut params, basis) = match (init, cfg.mode) {
        (TrainInit::FromSeed, Mode::Experiment) => (init_random(&mut init_rng, d, cfg.init_scale), None),
        (TrainInit::FromSeed, Mode::Theory) => {
            let (rp, u) = init_assumption1(&mut init_rng, d, cfg.sigma, cfg.basis)?;
            (embed_reduced(&rp, d), Some(u))
        }
        (TrainInit::Full(p), Mode::Experiment) => (p, None),
        (TrainInit::Reduced { rp, basis }, Mode::Theory) => (embed_reduced(&rp, d), Some(basis)),
        (TrainInit::Full(p), Mode::Theory) => (embed_reduced(&extract_reduced(&p), d), Some(Matrix::identity(d))),
        (TrainInit::Reduced { rp, .. }, Mode::Experiment) => (embed_reduced(&rp, d), None),
    };
    if params.d != d {
        return Err(Error::InvalidConfig(format!("initial parameters have d={}, config has d={d}", params.d)));
    }

    let mut flat = params.to_flat();
    let mut stepper = match cfg.mode {
        Mode::Experiment => Stepper::new(&cfg.optimizer, flat.len()),
        Mode::Theory => Stepper::new(&cfg.optimizer, 2 * d * d),
    };
    let mc = cfg.mc();
    let k_eval = cfg.eval_k_prime.unwrap_or(cfg.k);
    let start = Instant::now();
    let mut records = Vec::new();

    for step in 0..=cfg.iterations {
        let est = grad_full_mc(&params, &mc, &mut batch_rng);
        let grad = &est.mean;
        if step % cfg.log_every == 0 || step == cfg.iterations {
            let eval_loss = (cfg.eval_tasks >= 2).then(|| {
                let mut r = eval_rng.clone();
                eval_loss_mc(&params, d, cfg.n, k_eval, cfg.eval_tasks, &mut r)
            });
            let rp = extract_reduced(&params);
            let record = TrajectoryRecord {
                step,
                cot_loss: est.loss,
                eval_loss,
                pattern: pattern_residual(&params, cfg.eta),
                spectral: basis.as_ref().map(|u| spectral_trace(&rp, u)),
                grad_norm_v: grad.g_v.frobenius_norm(),
                grad_norm_w: grad.g_w.frobenius_norm(),
                off_pattern_grad_ratio: (cfg.mode == Mode::Theory).then(|| off_pattern_ratio(grad, d)),
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            info!(
                "step {step}: cot loss {:.6} +- {:.2e}",
                record.cot_loss.mean, record.cot_loss.stderr
            );
            observer(&record, &params);
            records.push(record);
        }
        if step == cfg.iterations {
            break;
        }
        let previous = params.clone();
        match cfg.mode {
            Mode::Experiment => {
                stepper.step(&mut flat, &grad.to_flat());
                params = LsaParams::from_flat(d, &flat)?;
            }
            Mode::Theory => {
                let rp = extract_reduced(&params);
                let mut theta = rp.v31.as_slice().to_vec();
                theta.extend_from_slice(rp.w13.as_slice());
                let mut g = grad.g_v.block(d + 1, 0, d, d).into_vec();
                g.extend(grad.g_w.block(0, d + 1, d, d).into_vec());
                stepper.step(&mut theta, &g);
                let next = ReducedParams {
                    v31: Matrix::from_vec(d, d, theta[..d * d].to_vec())?,
                    w13: Matrix::from_vec(d, d, theta[d * d..].to_vec())?,
                    w24: -1.0,
                };
                params = embed_reduced(&next, d);
            }
        }
        if !params.is_finite() {
            warn!("non-finite parameters after step {}", step + 1);
            return Ok(TrainOutcome {
                params: previous,
                records,
                diverged_at: Some(step + 1),
                basis,
            });
        }
    }
    Ok(TrainOutcome {
        params,
        records,
        diverged_at: None,
        basis,
    })
}

/// Right-hand sides of the decoupled eigenvalue dynamics with the interaction terms dropped.
pub fn eig_ode_rhs(lambda_v: f64, lambda_w: f64, eta: f64, k: usize) -> (f64, f64) {
    let kp1 = k as f64 + 1.0;
    let two_m = 2.0 - eta;
    let one_m = 1.0 - eta;
    let lw_gap = 1.0 - lambda_w;
    let coeff = kp1 * lw_gap * lw_gap + (2.0 / eta) * lambda_w * lw_gap + lambda_w * lambda_w / (eta * two_m);
    let dv = -coeff * lambda_v + one_m / two_m * lambda_w - 1.0;
    let v2 = lambda_v * lambda_v;
    let dw = (kp1 - 1.0 / eta) * v2 * lw_gap + one_m / (eta * two_m) * v2 * lambda_w + one_m / two_m * lambda_v;
    (dv, dw)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigOdePoint {
    pub t: f64,
    pub lambda_v: f64,
    pub lambda_w: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigOdeSolution {
    /// One trajectory per coordinate, sampled about ten times per unit time.
    pub trajectories: Vec<Vec<EigOdePoint>>,
    pub final_v: Vec<f64>,
    pub final_w: Vec<f64>,
    /// First time each coordinate is within `tol` of `(-eta, 1)` in both components.
    pub hit_time: Vec<Option<f64>>,
}

/// Explicit Euler integration of [`eig_ode_rhs`] for each coordinate up to `t_max`.
pub fn integrate_eig_ode(lv0: &[f64], lw0: &[f64], eta: f64, k: usize, h: f64, t_max: f64, tol: f64) -> Result<EigOdeSolution> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("step h must be positive, got {h}")));
    }
    if lv0.len() != lw0.len() {
        return Err(Error::DimensionMismatch("initial eigenvalue lists differ in length".into()));
    }
    let steps = (t_max / h).round() as usize;
    let every = ((0.1 / h).round() as usize).max(1);
    let mut sol = EigOdeSolution {
        trajectories: Vec::with_capacity(lv0.len()),
        final_v: Vec::with_capacity(lv0.len()),
        final_w: Vec::with_capacity(lv0.len()),
        hit_time: Vec::with_capacity(lv0.len()),
    };
    for (&v0, &w0) in lv0.iter().zip(lw0) {
        let (mut v, mut w) = (v0, w0);
        let mut traj = vec![EigOdePoint {
            t: 0.0,
            lambda_v: v,
            lambda_w: w,
        }];
        let near = |v: f64, w: f64| (v + eta).abs() <= tol && (w - 1.0).abs() <= tol;
        let mut hit = near(v, w).then_some(0.0);
        for s in 1..=steps {
            let (dv, dw) = eig_ode_rhs(v, w, eta, k);
            v += h * dv;
            w += h * dw;
            if !(v.is_finite() && w.is_finite()) {
                return Err(Error::Diverged { step: s });
            }
            let t = s as f64 * h;
            if hit.is_none() && near(v, w) {
                hit = Some(t);
            }
            if s % every == 0 || s == steps {
                traj.push(EigOdePoint {
                    t,
                    lambda_v: v,
                    lambda_w: w,
                });
            }
        }
        sol.trajectories.push(traj);
        sol.final_v.push(v);
        sol.final_w.push(w);
        sol.hit_time.push(hit);
    }
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_point_is_exact() {
        for eta in [0.2, 0.4, 0.8] {
            for k in [5, 20] {
                let (a, b) = eig_ode_rhs(-eta, 1.0, eta, k);
                assert!(a.abs() < 1e-12 && b.abs() < 1e-12, "eta={eta} k={k}: {a} {b}");
            }
        }
    }

    #[test]
    fn rhs_at_zero_w() {
        let sigma = 0.3;
        let (dv, dw) = eig_ode_rhs(-sigma, 0.0, 0.4, 20);
        assert!((dv - (21.0 * sigma - 1.0)).abs() < 1e-14);
        // (k+1-1/eta) sigma^2 + (1-eta)/(2-eta) (-sigma)
        let expected = (21.0 - 2.5) * 0.09 - 0.6 / 1.6 * 0.3;
        assert!((dw - expected).abs() < 1e-14);
    }

    #[test]
    fn fixed_point_start_does_not_drift() {
        let sol = integrate_eig_ode(&[-0.4], &[1.0], 0.4, 20, 1e-3, 10.0, 1e-3).unwrap();
        assert!((sol.final_v[0] + 0.4).abs() < 1e-12);
        assert!((sol.final_w[0] - 1.0).abs() < 1e-12);
        assert_eq!(sol.hit_time[0], Some(0.0));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut a = Adam::new(2, 0.1, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, -1.0];
        a.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-8);
        assert!((p[1] + 0.9).abs() < 1e-8);
    }

    #[test]
    fn structured_start_respects_ranges() {
        let (rp, u) = init_assumption1(&mut RngStream::new(1), 6, 0.2, Basis::RandomOrthogonal).unwrap();
        let tr = spectral_trace(&rp, &u);
        for (&v, &w) in tr.lambda_v.iter().zip(&tr.lambda_w) {
            assert!((-0.4..=-0.2).contains(&v));
            assert!((0.2..=0.5).contains(&w));
        }
        assert!(tr.off_basis_v < 1e-12 && tr.off_basis_w < 1e-12);
        let (rp, _) = init_assumption1(&mut RngStream::new(2), 4, 0.5, Basis::Standard).unwrap();
        assert_eq!(rp.w13, Matrix::identity(4).scale(0.5));
        assert!(matches!(init_assumption1(&mut RngStream::new(3), 4, 0.6, Basis::Standard), Err(Error::BadSigma(_))));
    }

    #[test]
    fn zero_iterations_leave_the_start_unchanged() {
        let mut cfg = TrainConfig::heatmap_recipe(3);
        cfg.d = 2;
        cfg.n = 4;
        cfg.k = 1;
        cfg.batch = 8;
        cfg.iterations = 0;
        let out = train(&cfg, TrainInit::FromSeed, |_, _| {}).unwrap();
        let expected = init_random(&mut RngStream::new(3).derive(STREAM_INIT), 2, 0.1);
        assert_eq!(out.params, expected);
        assert_eq!(out.records.len(), 1);
    }
}
