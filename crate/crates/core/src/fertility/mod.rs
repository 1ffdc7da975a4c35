//! Tokenizer fertility: how many tokens a tokenizer emits per character, as a
//! function of its vocabulary size.
//!
//! The fitted model is a quadratic in the natural log of the vocabulary size,
//! `f(V) = a ln²V + b ln V + c`, evaluated at `min(V, clamp_v)` so that it
//! stays non-increasing past the quadratic's turning point.

mod bpe;

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bpe::{
    count_chars, decode, encode, load_corpus, measure_ratio, pretokenize, sweep_ratios, train_bpe, Encoder,
    MergeTable, TrainedTokenizer, BASE_ALPHABET,
};

use crate::error::{Error, Result};

/// Vocabulary size above which `f` is held constant.
pub const DEFAULT_CLAMP_V: f64 = 200_000.0;

/// Vocabulary sizes of the standard tokenizer sweep.
pub const SWEEP_VOCAB_SIZES: [usize; 24] = [
    1024, 2048, 3072, 4096, 5120, 6144, 7168, 8192, 9216, 10240, 12288, 16384, 20480, 24576, 28672, 32768, 48128,
    64512, 78848, 96256, 128000, 256000, 512000, 1024000,
];

/// A measured tokens-per-character ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FertilityPoint {
    pub vocab_size: f64,
    pub ratio: f64,
}

/// Quadratic-in-log-V fertility model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FertilityFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub clamp_v: f64,
    #[serde(default)]
    pub rmse: Option<f64>,
    #[serde(default)]
    pub r2: Option<f64>,
}

impl FertilityFit {
    /// Builds a fit from coefficients, clamping at `min(200K, turning point)`.
    pub fn from_coefficients(a: f64, b: f64, c: f64) -> Self {
        let mut fit = Self {
            a,
            b,
            c,
            clamp_v: DEFAULT_CLAMP_V,
            rmse: None,
            r2: None,
        };
        if let Some(turn) = fit.turning_point() {
            fit.clamp_v = turn.min(DEFAULT_CLAMP_V);
        }
        fit
    }

    /// Published BPE coefficients (`a = 0.0064, b = -0.1581, c = 1.2047`).
    pub fn paper_2024() -> Self {
        Self::from_coefficients(0.0064, -0.1581, 1.2047)
    }

    /// Tokens per character at vocabulary size `v`.
    pub fn eval(&self, v: f64) -> f64 {
        let x = v.min(self.clamp_v).ln();
        (self.a * x + self.b) * x + self.c
    }

    /// `d f / d V` at `v`, zero in the clamped region.
    pub fn derivative(&self, v: f64) -> f64 {
        if v >= self.clamp_v {
            0.0
        } else {
            (2.0 * self.a * v.ln() + self.b) / v
        }
    }

    pub fn is_convex(&self) -> bool {
        self.a > 0.0
    }

    /// `exp(-b / 2a)`, the minimum of the unclamped quadratic.
    pub fn turning_point(&self) -> Option<f64> {
        self.is_convex().then(|| (-self.b / (2.0 * self.a)).exp())
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.a, self.b, self.c, self.clamp_v].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("fertility coefficients must be finite"));
        }
        if !(self.clamp_v >= 2.0) {
            return Err(Error::invalid("clamp_v must be at least 2"));
        }
        if !(self.eval(self.clamp_v) > 0.0 && self.eval(2.0) > 0.0) {
            return Err(Error::invalid("fertility must be positive over its domain"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let fit: Self = serde_json::from_str(&text)?;
        fit.validate()?;
        Ok(fit)
    }
}

/// Least-squares fit of `ratio = a ln²V + b ln V + c` via the normal equations.
///
/// Solved in mean-centred log coordinates for conditioning, then mapped back.
/// A fitted `a <= 0` is reported through [`FertilityFit::is_convex`]; the clamp
/// then defaults to 200K.
pub fn fit_fertility(points: &[FertilityPoint]) -> Result<FertilityFit> {
    let mut distinct: Vec<f64> = points.iter().map(|p| p.vocab_size).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Underdetermined(format!(
            "fertility fit needs at least 3 distinct vocabulary sizes, got {}",
            distinct.len()
        )));
    }
    for p in points {
        if !(p.vocab_size >= 2.0 && p.ratio.is_finite()) {
            return Err(Error::invalid(format!("bad fertility point {p:?}")));
        }
    }

    let n = points.len() as f64;
    let mean = points.iter().map(|p| p.vocab_size.ln()).sum::<f64>() / n;
    let mut m = [[0.0; 3]; 3];
    let mut rhs = [0.0; 3];
    for p in points {
        let t = p.vocab_size.ln() - mean;
        let basis = [t * t, t, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += basis[i] * basis[j];
            }
            rhs[i] += basis[i] * p.ratio;
        }
    }
    let [q2, q1, q0] = solve3(m, rhs).ok_or_else(|| Error::Underdetermined("singular normal equations".into()))?;

    let a = q2;
    let b = q1 - 2.0 * q2 * mean;
    let c = q2 * mean * mean - q1 * mean + q0;
    let mut fit = FertilityFit::from_coefficients(a, b, c);

    // Goodness of fit on the unclamped quadratic over the supplied points.
    let mean_ratio = points.iter().map(|p| p.ratio).sum::<f64>() / n;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for p in points {
        let t = p.vocab_size.ln() - mean;
        let pred = (q2 * t + q1) * t + q0;
        ss_res += (p.ratio - pred).powi(2);
        ss_tot += (p.ratio - mean_ratio).powi(2);
    }
    fit.rmse = Some((ss_res / n).sqrt());
    fit.r2 = Some(if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 });
    Ok(fit)
}

fn solve3(mut m: [[f64; 3]; 3], mut rhs: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..3 {
            let k = m[row][col] / m[col][col];
            for j in col..3 {
                m[row][j] -= k * m[col][j];
            }
            rhs[row] -= k * rhs[col];
        }
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        let tail: f64 = (i + 1..3).map(|j| m[i][j] * x[j]).sum();
        x[i] = (rhs[i] - tail) / m[i][i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

pub fn read_points<R: Read>(reader: R) -> Result<Vec<FertilityPoint>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn write_points<W: Write>(writer: W, points: &[FertilityPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}
