//! Closed-form quantities and Monte Carlo checks on Wishart moments.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, matpow, Matrix, RngStream};
use crate::mc::{mc_matrix, MatrixMoments};

/// `n / (n + d + 1)`.
pub fn one_step_optimum_eta(n: usize, d: usize) -> f64 {
    n as f64 / (n + d + 1) as f64
}

/// `1/2 (d - 2 eta d + eta^2 (n + d + 1) d / n)` at `eta = n/(n+d+1)`.
pub fn no_cot_lower_bound(n: usize, d: usize) -> f64 {
    let eta = one_step_optimum_eta(n, d);
    let (nf, df) = (n as f64, d as f64);
    0.5 * (df - 2.0 * eta * df + eta * eta * (nf + df + 1.0) * df / nf)
}

/// `1/2 d (d + 1) / (n + d + 1)`, the simplified form of [`no_cot_lower_bound`].
pub fn no_cot_lower_bound_simplified(n: usize, d: usize) -> f64 {
    let (nf, df) = (n as f64, d as f64);
    0.5 * df * (df + 1.0) / (nf + df + 1.0)
}

/// How empirical covariances are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WishartSampler {
    /// Form `X X^T / n` from a Gaussian `d x n` matrix.
    Direct,
    /// Bartlett decomposition: `T T^T / n` with `T` lower triangular,
    /// `T_ii^2 ~ chi^2_{n-i}` (0-based `i`) and standard normal entries below
    /// the diagonal. Same law as `Direct` at `O(d^2)` cost; needs `n >= d`.
    Bartlett,
}

pub fn sample_s(rng: &mut RngStream, d: usize, n: usize, sampler: WishartSampler) -> Matrix {
    match sampler {
        WishartSampler::Direct => {
            let x = gaussian_matrix(rng, d, n);
            x.matmul_t(&x).scale(1.0 / n as f64)
        }
        WishartSampler::Bartlett => {
            assert!(n >= d, "Bartlett sampling needs n >= d");
            let mut t = Matrix::zeros(d, d);
            for i in 0..d {
                t[(i, i)] = rng.chi_squared((n - i) as f64).sqrt();
                for j in 0..i {
                    t[(i, j)] = rng.normal();
                }
            }
            t.matmul_t(&t).scale(1.0 / n as f64)
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentReport {
    pub d: usize,
    pub n: usize,
    pub samples: usize,
    /// Largest entrywise `|z|` of the `E[X X^T]` estimate against its target.
    pub max_z_first: f64,
    /// Same for `E[(X X^T)^2]`.
    pub max_z_second: f64,
    pub pass: bool,
}

/// Entrywise z-scores of Monte Carlo `E[X X^T]` and `E[(X X^T)^2]` against the given targets.
pub fn wishart_moment_check_against(
    d: usize,
    n: usize,
    samples: usize,
    rng: &mut RngStream,
    first_target: &Matrix,
    second_target: &Matrix,
) -> MomentReport {
    let both = mc_matrix(rng, samples, d, 2 * d, |r| {
        let x = gaussian_matrix(r, d, n);
        let a = x.matmul_t(&x);
        let a2 = a.matmul(&a);
        let mut out = Matrix::zeros(d, 2 * d);
        out.set_block(0, 0, &a);
        out.set_block(0, d, &a2);
        out
    });
    let mean = both.mean();
    let se = both.stderr();
    let max_z = |offset: usize, target: &Matrix| {
        let mut worst = 0.0f64;
        for r in 0..d {
            for c in 0..d {
                let diff = mean[(r, c + offset)] - target[(r, c)];
                let s = se[(r, c + offset)];
                let z = if s > 0.0 {
                    diff.abs() / s
                } else if diff == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                };
                worst = worst.max(z);
            }
        }
        worst
    };
    let max_z_first = max_z(0, first_target);
    let max_z_second = max_z(d, second_target);
    MomentReport {
        d,
        n,
        samples,
        max_z_first,
        max_z_second,
        pass: max_z_first <= 4.0 && max_z_second <= 4.0,
    }
}

/// Checks `E[X X^T] = n I` and `E[(X X^T)^2] = n(n+d+1) I`.
pub fn wishart_moment_check(d: usize, n: usize, samples: usize, rng: &mut RngStream) -> MomentReport {
    let first = Matrix::identity(d).scale(n as f64);
    let second = Matrix::identity(d).scale((n * (n + d + 1)) as f64);
    wishart_moment_check_against(d, n, samples, rng, &first, &second)
}

/// Which expectation [`concentration_check`] estimates.
#[derive(Clone, Debug, PartialEq)]
pub enum ConcentrationVariant {
    /// `E[S L (I - eta S)^k S]`, main term `L`.
    Single { lambda: Matrix },
    /// `E[S L (I - eta S)^k G S]`, main term `L G`.
    Pair { lambda: Matrix, gamma: Matrix },
}

impl ConcentrationVariant {
    fn parts(&self) -> (&Matrix, Option<&Matrix>) {
        match self {
            ConcentrationVariant::Single { lambda } => (lambda, None),
            ConcentrationVariant::Pair { lambda, gamma } => (lambda, Some(gamma)),
        }
    }

    pub fn main_term(&self) -> Matrix {
        match self.parts() {
            (l, None) => l.clone(),
            (l, Some(g)) => l.matmul(g),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConcentrationReport {
    /// Monte Carlo estimate of the expectation.
    pub estimate: Matrix,
    pub main_term: Matrix,
    /// `||estimate / (1-eta)^k - main||_op / ||main||_op`, or the absolute
    /// `||estimate||_op` when `(1-eta)^k` vanishes.
    pub rel_error: f64,
    /// `c_const * k^2 d / n`.
    pub bound: f64,
    /// Frobenius norm of the entrywise standard error, on the scale of `rel_error`.
    pub mc_stderr: f64,
    pub main_degenerate: bool,
    pub pass: bool,
    /// Half the Frobenius distance between the estimates of the two sample
    /// halves, on the scale of `rel_error`.
    pub split_noise: f64,
}

impl ConcentrationReport {
    /// `estimate / (1-eta)^k - main`, the finite-sample deviation term.
    pub fn deviation(&self, eta: f64, k: usize) -> Matrix {
        let decay = (1.0 - eta).powi(k as i32);
        &self.estimate.scale(1.0 / decay) - &self.main_term
    }
}

/// Settings for [`concentration_check`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationConfig {
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub eta: f64,
    pub samples: usize,
    pub c_const: f64,
    pub sampler: WishartSampler,
    /// Subtract the first-order term in `S - I`, whose mean is exactly zero.
    pub control_variate: bool,
}

impl ConcentrationConfig {
    pub fn new(d: usize, n: usize, k: usize, eta: f64, samples: usize) -> Self {
        ConcentrationConfig {
            d,
            n,
            k,
            eta,
            samples,
            c_const: 10.0,
            sampler: WishartSampler::Bartlett,
            control_variate: true,
        }
    }
}

/// Monte Carlo estimate of `E[S L (I - eta S)^k G S]` (with `G = I` for the
/// single variant) compared against `(1 - eta)^k L G`.
///
/// With `control_variate` set, each sample has
/// `(1-eta)^k (E L G + L G E - k eta/(1-eta) L E G)` removed, `E = S - I`,
/// which is the linearization of the integrand around `S = I`.
pub fn concentration_check(cfg: &ConcentrationConfig, variant: &ConcentrationVariant, rng: &mut RngStream) -> Result<ConcentrationReport> {
    let ConcentrationConfig {
        d,
        n,
        k,
        eta,
        samples,
        c_const,
        sampler,
        control_variate,
    } = *cfg;
    let (lambda, gamma) = variant.parts();
    if lambda.shape() != (d, d) || gamma.is_some_and(|g| g.shape() != (d, d)) {
        return Err(Error::DimensionMismatch("spectral matrices must be d x d".into()));
    }
    if samples < 4 {
        return Err(Error::InvalidConfig("need at least 4 samples".into()));
    }
    let lambda = lambda.clone();
    let gamma = gamma.cloned().unwrap_or_else(|| Matrix::identity(d));
    let decay = (1.0 - eta).powi(k as i32);
    let use_cv = control_variate && (1.0 - eta).abs() > 1e-12;
    let lg = lambda.matmul(&gamma);
    let sample = move |r: &mut RngStream| {
        let s = sample_s(r, d, n, sampler);
        let mut step = Matrix::identity(d);
        step.axpy(-eta, &s);
        let mut m = s
            .matmul(&lambda)
            .matmul(&matpow(&step, k).expect("square"))
            .matmul(&gamma)
            .matmul(&s);
        if use_cv {
            let mut e = s.clone();
            e.axpy(-1.0, &Matrix::identity(d));
            let mut lin = e.matmul(&lg);
            lin += &lg.matmul(&e);
            lin.axpy(-(k as f64) * eta / (1.0 - eta), &lambda.matmul(&e).matmul(&gamma));
            m.axpy(-decay, &lin);
        }
        m
    };
    let half = samples / 2;
    let first: MatrixMoments = mc_matrix(rng, half, d, d, &sample);
    let second: MatrixMoments = mc_matrix(rng, samples - half, d, d, &sample);
    let mut all = first.clone();
    all.merge(&second);
    let estimate = all.mean();
    let stderr = all.stderr();
    let main_term = variant.main_term();
    let main_norm = main_term.operator_norm();
    let main_degenerate = decay.abs() < 1e-300 || main_norm == 0.0;
    let (scale, denom) = if main_degenerate {
        (1.0, 1.0)
    } else {
        (1.0 / decay, main_norm)
    };
    let rel_error = if main_degenerate {
        estimate.operator_norm()
    } else {
        (&estimate.scale(scale) - &main_term).operator_norm() / denom
    };
    let mc_stderr = stderr.frobenius_norm() * scale.abs() / denom;
    let split_noise = (&first.mean() - &second.mean()).frobenius_norm() * scale.abs() / (2.0 * denom);
    let bound = c_const * (k * k * d) as f64 / n as f64;
    Ok(ConcentrationReport {
        estimate,
        main_term,
        rel_error,
        bound,
        mc_stderr,
        main_degenerate,
        pass: rel_error <= bound + 4.0 * mc_stderr,
        split_noise,
    })
}

/// One observation for [`error_structure_fit`]: a deviation matrix and the
/// spectral matrices it was produced with (`gamma = None` for the single variant).
#[derive(Clone, Debug)]
pub struct StructureSample {
    pub delta: Matrix,
    pub lambda: Matrix,
    pub gamma: Option<Matrix>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StructureFit {
    /// `(a1, a2)` for the single variant, `(a1..a5)` for the pair variant.
    pub coefficients: Vec<f64>,
    /// Residual Frobenius norm over the Frobenius norm of all deltas.
    pub residual_rel: f64,
    pub residual_abs: f64,
}

fn structure_basis(lambda: &Matrix, gamma: Option<&Matrix>) -> Vec<Matrix> {
    let d = lambda.rows();
    let eye = Matrix::identity(d);
    match gamma {
        None => vec![lambda.clone(), eye.scale(lambda.trace())],
        Some(g) => vec![
            lambda.matmul(g),
            g.scale(lambda.trace()),
            lambda.scale(g.trace()),
            eye.scale(lambda.trace() * g.trace()),
            eye.scale(lambda.matmul(g).trace()),
        ],
    }
}

fn frob_dot(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

/// Joint least-squares fit of
/// `delta = a1 LG + a2 tr(L) G + a3 tr(G) L + a4 tr(L)tr(G) I + a5 tr(LG) I`
/// (or `a1 L + a2 tr(L) I` without `G`) over all samples.
///
/// A single `(L, G)` pair never identifies the five-term model because the
/// last two terms are both multiples of `I`; at least two pairs with different
/// `tr(L)tr(G) / tr(LG)` ratios are needed.
pub fn error_structure_fit(samples: &[StructureSample]) -> Result<StructureFit> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidConfig("no samples to fit".into()))?;
    let pair = first.gamma.is_some();
    if samples.iter().any(|s| s.gamma.is_some() != pair) {
        return Err(Error::InvalidConfig("cannot mix single and pair samples".into()));
    }
    let bases: Vec<Vec<Matrix>> = samples
        .iter()
        .map(|s| structure_basis(&s.lambda, s.gamma.as_ref()))
        .collect();
    let p = bases[0].len();
    let mut gram = Matrix::zeros(p, p);
    let mut rhs = vec![0.0; p];
    for (basis, s) in bases.iter().zip(samples) {
        for i in 0..p {
            rhs[i] += frob_dot(&basis[i], &s.delta);
            for j in 0..p {
                gram[(i, j)] += frob_dot(&basis[i], &basis[j]);
            }
        }
    }
    let diag: Vec<f64> = gram.diag().iter().map(|v| v.sqrt()).collect();
    if diag.contains(&0.0) {
        return Err(Error::RankDeficientBasis);
    }
    let corr = Matrix::from_fn(p, p, |i, j| gram[(i, j)] / (diag[i] * diag[j]));
    let (eig, _) = corr.sym_eigen()?;
    if eig[0] < 1e-10 * eig[p - 1] {
        return Err(Error::RankDeficientBasis);
    }
    let coefficients = gram.solve_spd(&rhs).map_err(|_| Error::RankDeficientBasis)?;
    let (mut res_sq, mut tot_sq) = (0.0, 0.0);
    for (basis, s) in bases.iter().zip(samples) {
        let mut fit = Matrix::zeros(s.delta.rows(), s.delta.cols());
        for (b, a) in basis.iter().zip(&coefficients) {
            fit.axpy(*a, b);
        }
        res_sq += (&s.delta - &fit).frobenius_norm().powi(2);
        tot_sq += s.delta.frobenius_norm().powi(2);
    }
    let residual_abs = res_sq.sqrt();
    Ok(StructureFit {
        coefficients,
        residual_rel: if tot_sq > 0.0 { residual_abs / tot_sq.sqrt() } else { 0.0 },
        residual_abs,
    })
}

/// Verdict object emitted by every named check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Verdict {
    pub check: String,
    pub params: Value,
    pub estimate_summary: Value,
    pub bound: Option<f64>,
    pub stderr: Option<f64>,
    pub pass: bool,
}

impl Verdict {
    pub fn from_moments(r: &MomentReport) -> Self {
        Verdict {
            check: "moments".into(),
            params: json!({"d": r.d, "n": r.n, "samples": r.samples}),
            estimate_summary: json!({"max_z_first": r.max_z_first, "max_z_second": r.max_z_second}),
            bound: Some(4.0),
            stderr: None,
            pass: r.pass,
        }
    }

    pub fn from_concentration(r: &ConcentrationReport, params: Value) -> Self {
        Verdict {
            check: "concentration".into(),
            params,
            estimate_summary: json!({
                "rel_error": r.rel_error,
                "main_degenerate": r.main_degenerate,
                "split_noise": r.split_noise,
            }),
            bound: Some(r.bound),
            stderr: Some(r.mc_stderr),
            pass: r.pass,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert!((one_step_optimum_eta(20, 10) - 20.0 / 31.0).abs() < 1e-15);
        assert!((one_step_optimum_eta(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((one_step_optimum_eta(1_000_000_000, 10) - 1.0).abs() < 1e-7);
        assert!((no_cot_lower_bound(20, 10) - 55.0 / 31.0).abs() < 1e-12);
        assert!(no_cot_lower_bound(10_000_000, 3) < 1e-5);
    }

    #[test]
    fn bound_identity_on_a_grid() {
        for d in 1..30 {
            for n in 1..60 {
                let a = no_cot_lower_bound(n, d);
                let b = no_cot_lower_bound_simplified(n, d);
                assert!((a - b).abs() <= 1e-12 * b.max(1.0), "d={d} n={n}");
            }
        }
    }

    #[test]
    fn synthetic_structure_is_recovered() {
        let alpha = [0.7, -0.2, 0.35, 0.05, -0.4];
        let pairs = [
            (vec![1.0, 2.0, 3.0, 0.5], vec![0.3, -1.0, 2.0, 1.5]),
            (vec![-0.5, 1.5, 0.2, 2.5], vec![1.0, 0.4, -0.7, 0.9]),
        ];
        let samples: Vec<StructureSample> = pairs
            .iter()
            .map(|(l, g)| {
                let (lm, gm) = (Matrix::from_diag(l), Matrix::from_diag(g));
                let mut delta = Matrix::zeros(4, 4);
                for (b, a) in structure_basis(&lm, Some(&gm)).iter().zip(alpha) {
                    delta.axpy(a, b);
                }
                StructureSample {
                    delta,
                    lambda: lm,
                    gamma: Some(gm),
                }
            })
            .collect();
        let fit = error_structure_fit(&samples).unwrap();
        for (a, b) in fit.coefficients.iter().zip(alpha) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        assert!(fit.residual_rel < 1e-12);
        assert!(matches!(error_structure_fit(&samples[..1]), Err(Error::RankDeficientBasis)));
    }

    #[test]
    fn identity_spectra_are_rank_deficient() {
        let eye = Matrix::identity(3);
        let s = StructureSample {
            delta: eye.clone(),
            lambda: eye.clone(),
            gamma: Some(eye.clone()),
        };
        assert!(matches!(error_structure_fit(&[s.clone(), s]), Err(Error::RankDeficientBasis)));
    }

    #[test]
    fn scalar_moments_at_d1() {
        let r = wishart_moment_check(1, 6, 20_000, &mut RngStream::new(4));
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn degenerate_main_term_switches_to_absolute_error() {
        let r = concentration_check(
            &ConcentrationConfig::new(3, 50, 1, 1.0, 200),
            &ConcentrationVariant::Single { lambda: Matrix::identity(3) },
            &mut RngStream::new(1),
        )
        .unwrap();
        assert!(r.main_degenerate);
        assert!(r.rel_error > 0.0);
    }
}
