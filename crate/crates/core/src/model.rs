//! One-layer linear self-attention with a residual connection, its block
//! views, the reduced three-block model and the gradient-descent construction.
//!
//! Blocks are numbered 1..=4 along each axis following the token layout
//! `(x, y, w, indicator)`, so `V[3][1]` maps inputs to the weight slice and
//! `W[2][4]` is the scalar coupling the label row to the indicator row.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, RngStream};
use crate::task::{token_dim, weight_slice, PromptSequence, TaskInstance};

/// Row/column range of block `b` (1-based) for data dimension `d`.
pub fn block_range(d: usize, b: usize) -> Range<usize> {
    match b {
        1 => 0..d,
        2 => d..d + 1,
        3 => d + 1..2 * d + 1,
        4 => 2 * d + 1..2 * d + 2,
        _ => panic!("block index {b} outside 1..=4"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Factor {
    V,
    W,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsaParams {
    pub d: usize,
    pub v: Matrix,
    pub w: Matrix,
}

impl LsaParams {
    pub fn zeros(d: usize) -> Self {
        let de = token_dim(d);
        LsaParams {
            d,
            v: Matrix::zeros(de, de),
            w: Matrix::zeros(de, de),
        }
    }

    pub fn new(d: usize, v: Matrix, w: Matrix) -> Result<Self> {
        let de = token_dim(d);
        if v.shape() != (de, de) || w.shape() != (de, de) {
            return Err(Error::DimensionMismatch(format!(
                "expected {de}x{de} factors, got V {:?} and W {:?}",
                v.shape(),
                w.shape()
            )));
        }
        Ok(LsaParams { d, v, w })
    }

    pub fn d_e(&self) -> usize {
        token_dim(self.d)
    }

    fn factor(&self, f: Factor) -> &Matrix {
        match f {
            Factor::V => &self.v,
            Factor::W => &self.w,
        }
    }

    fn factor_mut(&mut self, f: Factor) -> &mut Matrix {
        match f {
            Factor::V => &mut self.v,
            Factor::W => &mut self.w,
        }
    }

    /// Copy of block `(r, c)` of factor `f`.
    pub fn block(&self, f: Factor, r: usize, c: usize) -> Matrix {
        let (rr, cr) = (block_range(self.d, r), block_range(self.d, c));
        self.factor(f).block(rr.start, cr.start, rr.len(), cr.len())
    }

    pub fn set_block(&mut self, f: Factor, r: usize, c: usize, value: &Matrix) {
        let (rr, cr) = (block_range(self.d, r), block_range(self.d, c));
        assert_eq!(value.shape(), (rr.len(), cr.len()), "block shape mismatch");
        self.factor_mut(f).set_block(rr.start, cr.start, value);
    }

    pub fn w24(&self) -> f64 {
        self.w[(self.d, 2 * self.d + 1)]
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.w.is_finite()
    }

    /// `V` then `W`, row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.v.as_slice().to_vec();
        out.extend_from_slice(self.w.as_slice());
        out
    }

    pub fn from_flat(d: usize, flat: &[f64]) -> Result<Self> {
        let de = token_dim(d);
        if flat.len() != 2 * de * de {
            return Err(Error::DimensionMismatch(format!(
                "{} values for two {de}x{de} factors",
                flat.len()
            )));
        }
        let v = Matrix::from_vec(de, de, flat[..de * de].to_vec())?;
        let w = Matrix::from_vec(de, de, flat[de * de..].to_vec())?;
        Ok(LsaParams { d, v, w })
    }
}

/// `(V31, W13, w24)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedParams {
    pub v31: Matrix,
    pub w13: Matrix,
    pub w24: f64,
}

impl ReducedParams {
    pub fn zeros(d: usize) -> Self {
        ReducedParams {
            v31: Matrix::zeros(d, d),
            w13: Matrix::zeros(d, d),
            w24: 0.0,
        }
    }

    pub fn d(&self) -> usize {
        self.v31.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.v31.is_finite() && self.w13.is_finite() && self.w24.is_finite()
    }
}

/// `Gram = Z Z^T / n` kept as a running sum so tokens can be appended cheaply.
#[derive(Clone, Debug)]
pub struct Gram {
    n: f64,
    g: Matrix,
}

impl Gram {
    /// Gram matrix of the data tokens of `task` alone.
    pub fn from_task(task: &TaskInstance) -> Self {
        let (d, n) = (task.d(), task.n());
        let mut g = Matrix::zeros(token_dim(d), token_dim(d));
        g.set_block(0, 0, &task.s);
        let xy: Vec<f64> = task.x.matvec(&task.y).iter().map(|v| v / n as f64).collect();
        for (r, v) in xy.iter().enumerate() {
            g[(r, d)] = *v;
            g[(d, r)] = *v;
        }
        g[(d, d)] = task.y.iter().map(|v| v * v).sum::<f64>() / n as f64;
        Gram { n: n as f64, g }
    }

    pub fn push(&mut self, token: &[f64]) {
        self.g.add_outer(1.0 / self.n, token, token);
    }

    pub fn matrix(&self) -> &Matrix {
        &self.g
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.g.matvec(v)
    }
}

/// `z + V G W z` for the last token `z` and a prepared Gram matrix.
pub fn forward_with_gram(params: &LsaParams, gram: &Gram, z: &[f64]) -> Vec<f64> {
    let c = gram.apply(&params.w.matvec(z));
    let mut out = params.v.matvec(&c);
    out.iter_mut().zip(z).for_each(|(o, zi)| *o += zi);
    out
}

/// Last column of `Z + V Z (Z^T W Z) / n`, normalized by the example count `n`.
pub fn forward_last_token(z: &PromptSequence, params: &LsaParams) -> Result<Vec<f64>> {
    if z.d_e() != params.d_e() || z.tokens.rows() != params.d_e() {
        return Err(Error::DimensionMismatch(format!(
            "prompt token dimension {} vs parameter dimension {}",
            z.tokens.rows(),
            params.d_e()
        )));
    }
    let last = z.last_column();
    let scores = z.tokens.tr_matvec(&params.w.matvec(&last));
    let mixed: Vec<f64> = z.tokens.matvec(&scores).iter().map(|v| v / z.n as f64).collect();
    let mut out = params.v.matvec(&mixed);
    out.iter_mut().zip(&last).for_each(|(o, l)| *o += l);
    Ok(out)
}

/// `w_i + V31 S (W13 w_i + w24 w*)`.
pub fn reduced_forward(w_i: &[f64], task: &TaskInstance, rp: &ReducedParams) -> Result<Vec<f64>> {
    let d = task.d();
    if w_i.len() != d || rp.d() != d || rp.w13.rows() != d {
        return Err(Error::DimensionMismatch(format!(
            "reduced model of size {} applied to a task of dimension {d}",
            rp.d()
        )));
    }
    let mut u = rp.w13.matvec(w_i);
    u.iter_mut().zip(&task.w_star).for_each(|(a, w)| *a += rp.w24 * w);
    let update = rp.v31.matvec(&task.s.matvec(&u));
    Ok(w_i.iter().zip(&update).map(|(a, b)| a + b).collect())
}

/// `V31 = -eta I`, `W13 = I`, `w24 = -1`, everything else zero.
pub fn construct_multistep(d: usize, eta: f64) -> LsaParams {
    embed_reduced(
        &ReducedParams {
            v31: Matrix::identity(d).scale(-eta),
            w13: Matrix::identity(d),
            w24: -1.0,
        },
        d,
    )
}

pub fn extract_reduced(params: &LsaParams) -> ReducedParams {
    ReducedParams {
        v31: params.block(Factor::V, 3, 1),
        w13: params.block(Factor::W, 1, 3),
        w24: params.w24(),
    }
}

pub fn embed_reduced(rp: &ReducedParams, d: usize) -> LsaParams {
    let mut p = LsaParams::zeros(d);
    p.set_block(Factor::V, 3, 1, &rp.v31);
    p.set_block(Factor::W, 1, 3, &rp.w13);
    p.w[(d, 2 * d + 1)] = rp.w24;
    p
}

/// Deviation of trained weights from `W13 = aI, w24 = -a, V31 = -(eta/a) I`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternReport {
    /// `||off-pattern entries||_F / ||all entries||_F` over both factors.
    pub off_pattern_mass: f64,
    /// `||V31 W13 + eta I||_F / sqrt(d)`.
    pub product_error: f64,
    /// `||W13 + w24 I||_F / sqrt(d)`.
    pub scale_error: f64,
    /// Same ratio as `off_pattern_mass` with the first `d + 1` columns of `W`
    /// left out. Those columns multiply entries of the last token that are
    /// always zero, so they never receive a gradient and keep their initial values.
    pub off_pattern_mass_live: f64,
    /// Mean diagonal of `W13`.
    pub alpha: f64,
}

fn is_pattern_entry(d: usize, f: Factor, r: usize, c: usize) -> bool {
    match f {
        Factor::V => block_range(d, 3).contains(&r) && c + d + 1 == r,
        Factor::W => (r < d && c == r + d + 1) || (r == d && c == 2 * d + 1),
    }
}

pub fn pattern_residual(params: &LsaParams, eta: f64) -> PatternReport {
    let d = params.d;
    let de = params.d_e();
    let (mut total, mut off, mut total_live, mut off_live) = (0.0, 0.0, 0.0, 0.0);
    for f in [Factor::V, Factor::W] {
        let m = params.factor(f);
        for r in 0..de {
            for c in 0..de {
                let sq = m[(r, c)] * m[(r, c)];
                let live = !(f == Factor::W && c <= d);
                total += sq;
                if live {
                    total_live += sq;
                }
                if !is_pattern_entry(d, f, r, c) {
                    off += sq;
                    if live {
                        off_live += sq;
                    }
                }
            }
        }
    }
    let ratio = |num: f64, den: f64| if den > 0.0 { (num / den).sqrt() } else { 0.0 };
    let rp = extract_reduced(params);
    let sqrt_d = (d as f64).sqrt();
    let mut prod = rp.v31.matmul(&rp.w13);
    prod.axpy(eta, &Matrix::identity(d));
    let mut scale = rp.w13.clone();
    scale.axpy(rp.w24, &Matrix::identity(d));
    PatternReport {
        off_pattern_mass: ratio(off, total),
        product_error: prod.frobenius_norm() / sqrt_d,
        scale_error: scale.frobenius_norm() / sqrt_d,
        off_pattern_mass_live: ratio(off_live, total_live),
        alpha: rp.w13.trace() / d as f64,
    }
}

/// Sidecar metadata stored next to a binary checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub d: usize,
    pub n: usize,
    pub eta: f64,
    pub k: usize,
    pub seed: u64,
    pub step: usize,
}

const MAGIC: &[u8; 4] = b"LSA1";

/// `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the 16-byte header, `V`, `W` as little-endian f64, and the JSON sidecar.
pub fn save_checkpoint(path: &Path, params: &LsaParams, meta: &CheckpointMeta) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + 16 * params.d_e() * params.d_e());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(params.d as u32).to_le_bytes());
    bytes.extend_from_slice(&[0u8; 8]);
    for v in params.to_flat() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&bytes)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

/// Reads a checkpoint; the sidecar is optional.
pub fn load_checkpoint(path: &Path) -> Result<(LsaParams, Option<CheckpointMeta>)> {
    let bad = |reason: &str| Error::BadCheckpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let bytes = fs::read(path).map_err(|e| bad(&e.to_string()))?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("missing LSA1 header"));
    }
    let d = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let de = token_dim(d);
    if bytes.len() != 16 + 16 * de * de {
        return Err(bad(&format!("payload size {} does not fit d={d}", bytes.len() - 16)));
    }
    let flat: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let params = LsaParams::from_flat(d, &flat)?;
    if !params.is_finite() {
        return Err(bad("non-finite parameter"));
    }
    let side = sidecar_path(path);
    let meta = if side.exists() {
        let text = fs::read_to_string(&side)?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| bad(&e.to_string()))?;
        if meta.d != d {
            return Err(bad("sidecar dimension disagrees with header"));
        }
        Some(meta)
    } else {
        None
    };
    Ok((params, meta))
}

/// Entries i.i.d. `N(0, scale^2)` over both full factors.
pub fn init_random(rng: &mut RngStream, d: usize, scale: f64) -> LsaParams {
    let de = token_dim(d);
    let v = crate::linalg::gaussian_matrix(rng, de, de).scale(scale);
    let w = crate::linalg::gaussian_matrix(rng, de, de).scale(scale);
    LsaParams { d, v, w }
}

/// Weight slice of `forward_last_token`.
pub fn predicted_weights(z: &PromptSequence, params: &LsaParams) -> Result<Vec<f64>> {
    Ok(weight_slice(&forward_last_token(z, params)?, params.d).to_vec())
}
