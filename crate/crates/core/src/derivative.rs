//! Derivative-based estimation: the vocabulary at which training FLOPs for a
//! fixed character count stop falling, and the anchored power law
//! `N_v = N_v0 (N_nv / N_nv0)^γ` fitted over a ladder of such optima.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::fertility::FertilityFit;
use crate::optim::{bisect, huber, huber_grad, log_grid, multistart, Bracket, MinimizerOptions, Objective, HUBER_DELTA};
use crate::scale::{round_vocab, ShapeTable};

/// Smallest vocabulary considered by the root search.
pub const MIN_ROOT_VOCAB: f64 = 2.0;

/// Model sizes used to build derivative-optimal `(N_nv, N_v)` pairs.
pub const DERIVATIVE_LADDER: [f64; 7] = [33e6, 85e6, 151e6, 302e6, 631e6, 1130e6, 2870e6];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopsDerivative {
    pub value: f64,
    /// True when `v` is at or above the fertility clamp, where `f` is flat.
    pub clamped: bool,
}

/// `∂C/∂V = 6h [(N_nv + V d)(2a ln V + b)/V + f(V) d]`.
pub fn dflops_dv(n_nv: f64, v: f64, d: f64, h: f64, fert: &FertilityFit) -> Result<FlopsDerivative> {
    ensure_positive("n_nv", n_nv)?;
    ensure_positive("embedding width", d)?;
    ensure_positive("character count", h)?;
    if !(v > MIN_ROOT_VOCAB) {
        return Err(Error::invalid(format!("vocabulary size must exceed 2, got {v}")));
    }
    if v >= fert.clamp_v {
        return Ok(FlopsDerivative {
            value: 6.0 * h * fert.eval(fert.clamp_v) * d,
            clamped: true,
        });
    }
    Ok(FlopsDerivative {
        value: 6.0 * h * bracket(n_nv, v, d, fert),
        clamped: false,
    })
}

/// The bracketed factor of `∂C/∂V`; `h` only scales it.
fn bracket(n_nv: f64, v: f64, d: f64, fert: &FertilityFit) -> f64 {
    (n_nv + v * d) * (2.0 * fert.a * v.ln() + fert.b) / v + fert.eval(v) * d
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RootSolution {
    pub vocab: f64,
    /// True when no sign change was found below the clamp.
    pub boundary: bool,
}

/// Root of `∂C/∂V` on `(2, clamp_v)`: a 64-probe log scan followed by
/// bisection to 1e-6 relative. Independent of the character count.
pub fn solve_v_root(n_nv: f64, d: f64, fert: &FertilityFit) -> Result<RootSolution> {
    ensure_positive("n_nv", n_nv)?;
    ensure_positive("embedding width", d)?;
    let lo = MIN_ROOT_VOCAB;
    let hi = fert.clamp_v;
    if !(hi > lo) {
        return Err(Error::invalid(format!("fertility clamp {hi} leaves no search window")));
    }
    let g = |v: f64| bracket(n_nv, v, d, fert);
    if g(lo) > 0.0 {
        return Err(Error::Degenerate(format!(
            "FLOPs already increase with vocabulary at V={lo} (n_nv={n_nv:e}, d={d})"
        )));
    }
    let probes = log_grid(lo, hi, 64);
    for w in probes.windows(2) {
        let (f0, f1) = (g(w[0]), g(w[1]));
        if f0 <= 0.0 && f1 > 0.0 {
            let b = Bracket {
                lo: w[0],
                hi: w[1],
                f_lo: f0,
                f_hi: f1,
            };
            return Ok(RootSolution {
                vocab: bisect(g, b, 1e-6)?,
                boundary: false,
            });
        }
    }
    Ok(RootSolution { vocab: hi, boundary: true })
}

/// Anchored scaling law for vocabulary parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaFit {
    pub gamma: f64,
    pub anchor_n_nv: f64,
    pub anchor_n_v: f64,
}

impl GammaFit {
    /// `γ = 0.83` with a 33M anchor whose `N_v0` is back-solved from the
    /// published 3B prediction (43K vocabulary at width 3200).
    pub fn paper_2024() -> Self {
        const GAMMA: f64 = 0.83;
        const ANCHOR_N_NV: f64 = 33e6;
        let n_v_3b = 43e3 * 3200.0;
        Self {
            gamma: GAMMA,
            anchor_n_nv: ANCHOR_N_NV,
            anchor_n_v: n_v_3b / (3e9 / ANCHOR_N_NV).powf(GAMMA),
        }
    }

    /// Whether γ lies in the expected `(0, 1)` range.
    pub fn in_expected_range(&self) -> bool {
        self.gamma > 0.0 && self.gamma < 1.0
    }

    pub fn validate(&self) -> Result<()> {
        ensure_positive("anchor_n_nv", self.anchor_n_nv)?;
        ensure_positive("anchor_n_v", self.anchor_n_v)?;
        if !self.gamma.is_finite() {
            return Err(Error::invalid("gamma must be finite"));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let fit: Self = serde_json::from_str(&text)?;
        fit.validate()?;
        Ok(fit)
    }

    /// `N_v0 (n_nv / N_nv0)^γ`.
    pub fn n_v(&self, n_nv: f64) -> f64 {
        self.anchor_n_v * (n_nv / self.anchor_n_nv).powf(self.gamma)
    }
}

struct GammaObjective {
    /// `(ln(N_nv / N_nv0), ln(N_v / N_v0))`
    points: Vec<(f64, f64)>,
}

impl Objective for GammaObjective {
    fn value(&self, x: &[f64]) -> f64 {
        self.points.iter().map(|&(u, w)| huber(x[0] * u - w, HUBER_DELTA)).sum()
    }

    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        grad[0] = self
            .points
            .iter()
            .map(|&(u, w)| huber_grad(x[0] * u - w, HUBER_DELTA) * u)
            .sum();
    }
}

/// Fits γ by Huber regression through the first pair, which becomes the anchor.
pub fn fit_gamma(pairs: &[(f64, f64)]) -> Result<GammaFit> {
    if pairs.len() < 2 {
        return Err(Error::Underdetermined("gamma fit needs at least 2 pairs".into()));
    }
    for &(n_nv, n_v) in pairs {
        ensure_positive("n_nv", n_nv)?;
        ensure_positive("n_v", n_v)?;
    }
    let (n0, v0) = pairs[0];
    let points: Vec<(f64, f64)> = pairs[1..]
        .iter()
        .map(|&(n, v)| ((n / n0).ln(), (v / v0).ln()))
        .collect();
    if points.iter().all(|&(u, _)| u == 0.0) {
        return Err(Error::Underdetermined(
            "every pair shares the anchor's n_nv, the slope is undefined".into(),
        ));
    }
    let objective = GammaObjective { points };
    let opts = MinimizerOptions::default();
    let starts: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 19.0]).collect();
    let best = multistart(&objective, &starts, &opts)?;
    Ok(GammaFit {
        gamma: best.x[0],
        anchor_n_nv: n0,
        anchor_n_v: v0,
    })
}

/// Derivative-optimal `(N_nv, N_v)` at each ladder size, with widths from
/// `shapes`.
pub fn derivative_pairs(ladder: &[f64], shapes: &ShapeTable, fert: &FertilityFit) -> Result<Vec<(f64, f64)>> {
    ladder
        .iter()
        .map(|&n_nv| {
            let d = shapes.embed_dim_for(n_nv)? as f64;
            let root = solve_v_root(n_nv, d, fert)?;
            Ok((n_nv, root.vocab * d))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaPrediction {
    pub n_v: f64,
    pub embed_dim: u32,
    pub vocab_size: u64,
}

/// Applies the anchored law; `embed_dim` overrides the shape-table width.
pub fn predict_nv(fit: &GammaFit, n_nv: f64, shapes: &ShapeTable, embed_dim: Option<u32>) -> Result<GammaPrediction> {
    ensure_positive("n_nv", n_nv)?;
    let embed_dim = match embed_dim {
        Some(d) => d,
        None => shapes.embed_dim_for(n_nv)?,
    };
    let n_v = fit.n_v(n_nv);
    Ok(GammaPrediction {
        n_v,
        embed_dim,
        vocab_size: round_vocab(n_v / embed_dim as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scale::flops_cost;

    #[test]
    fn stationary_point_of_fertility() {
        let fert = FertilityFit::from_coefficients(0.0064, -0.1581, 1.2047);
        // With a larger clamp so the turning point is inside the domain.
        let fert = FertilityFit { clamp_v: 1e6, ..fert };
        let v = (0.1581f64 / (2.0 * 0.0064)).exp();
        let got = dflops_dv(33e6, v, 512.0, 1e9, &fert).unwrap();
        let expected = 6.0 * 1e9 * fert.eval(v) * 512.0;
        assert!((got.value - expected).abs() < 1e-9 * expected);
        assert!(got.value > 0.0);
    }

    #[test]
    fn near_zero_close_to_the_small_model_root() {
        let fert = FertilityFit::paper_2024();
        let (n, v, d): (f64, f64, f64) = (33e6, 1e4, 512.0);
        let first = (n + v * d) * (2.0 * fert.a * v.ln() + fert.b) / v;
        let second = fert.eval(v) * d;
        let got = dflops_dv(n, v, d, 1e9, &fert).unwrap().value / 6e9;
        assert!(got.abs() < 0.05 * first.abs().max(second));
    }

    #[test]
    fn clamped_region() {
        let fert = FertilityFit::paper_2024();
        let got = dflops_dv(1e9, 3e5, 2048.0, 1e10, &fert).unwrap();
        assert!(got.clamped);
        assert_eq!(got.value, 6.0 * 1e10 * fert.eval(fert.clamp_v) * 2048.0);
        assert!(dflops_dv(1e9, 2.0, 2048.0, 1e10, &fert).is_err());
    }

    #[test]
    fn matches_finite_differences_of_flops() {
        let fert = FertilityFit::paper_2024();
        for &(n, d) in &[(33e6, 512.0), (3e9, 3200.0), (70e9, 8192.0)] {
            for v in log_grid(2e3, 1.5e5, 50) {
                let h = 1e9;
                let step = v * 1e-4;
                let fd = (flops_cost(n, v + step, d, h, &fert).unwrap() - flops_cost(n, v - step, d, h, &fert).unwrap())
                    / (2.0 * step);
                let an = dflops_dv(n, v, d, h, &fert).unwrap().value;
                let scale = 6.0 * h * ((n + v * d) * (2.0 * fert.a * v.ln() + fert.b).abs() / v + fert.eval(v) * d);
                assert!((fd - an).abs() <= 1e-6 * scale, "n={n} v={v} fd={fd} an={an}");
            }
        }
    }

    fn grid_argmin(n: f64, d: f64, h: f64, fert: &FertilityFit) -> (f64, f64) {
        let grid = log_grid(1e3, fert.clamp_v, 10_000);
        let i = (0..grid.len())
            .min_by(|&i, &j| {
                let ci = flops_cost(n, grid[i], d, h, fert).unwrap();
                let cj = flops_cost(n, grid[j], d, h, fert).unwrap();
                ci.total_cmp(&cj)
            })
            .unwrap();
        let step = grid[i.min(grid.len() - 2) + 1] - grid[i.min(grid.len() - 2)];
        (grid[i], step)
    }

    #[test]
    fn root_matches_grid_minimum_and_ignores_h() {
        let fert = FertilityFit::paper_2024();
        for &(n, d, expect) in &[(33e6, 512.0, 1.0e4), (3e9, 3200.0, 6.6e4)] {
            let root = solve_v_root(n, d, &fert).unwrap();
            assert!(!root.boundary);
            assert!((root.vocab / expect - 1.0).abs() < 0.05, "{n}: {root:?}");
            for h in [1e8, 1e10, 1e12] {
                let (g, step) = grid_argmin(n, d, h, &fert);
                assert!((root.vocab - g).abs() <= step, "h={h} root={} grid={g}", root.vocab);
            }
        }
    }

    #[test]
    fn root_degenerate_and_boundary() {
        // f increasing everywhere: C grows with V from the start.
        let rising = FertilityFit {
            a: 0.0,
            b: 0.01,
            c: 0.2,
            clamp_v: 2e5,
            rmse: None,
            r2: None,
        };
        assert!(matches!(solve_v_root(1e8, 512.0, &rising), Err(Error::Degenerate(_))));
        // Huge n_nv relative to d: C still falling at the clamp.
        let root = solve_v_root(1e15, 1.0, &FertilityFit::paper_2024()).unwrap();
        assert!(root.boundary);
        assert_eq!(root.vocab, FertilityFit::paper_2024().clamp_v);
    }

    #[test]
    fn gamma_two_point_and_duplicates() {
        let fit = fit_gamma(&[(1e6, 1e3), (4e6, 2e3)]).unwrap();
        assert!((fit.gamma - 0.5).abs() < 1e-9, "{fit:?}");
        assert_eq!(fit.anchor_n_nv, 1e6);
        let dup = fit_gamma(&[(1e6, 1e3), (4e6, 2e3), (4e6, 2e3), (16e6, 4e3)]).unwrap();
        assert!((dup.gamma - 0.5).abs() < 1e-9);
        assert!(matches!(fit_gamma(&[(1e6, 1e3), (1e6, 2e3)]), Err(Error::Underdetermined(_))));
        assert!(fit_gamma(&[(1e6, 1e3)]).is_err());
    }

    #[test]
    fn gamma_from_derivative_ladder() {
        let fert = FertilityFit::paper_2024();
        let pairs = derivative_pairs(&DERIVATIVE_LADDER, &ShapeTable::default(), &fert).unwrap();
        let fit = fit_gamma(&pairs).unwrap();
        assert!(fit.gamma > 0.80 && fit.gamma < 0.86, "{fit:?}");
        assert!(fit.in_expected_range());
    }

    #[test]
    fn preset_reproduces_published_rows() {
        let fit = GammaFit::paper_2024();
        assert!((fit.anchor_n_v / 3.2582e6 - 1.0).abs() < 1e-3);
        let shapes = ShapeTable::default();
        let anchor = predict_nv(&fit, fit.anchor_n_nv, &shapes, None).unwrap();
        assert!((anchor.n_v - fit.anchor_n_v).abs() < 1e-6);
        let p = predict_nv(&fit, 3e9, &shapes, Some(3200)).unwrap();
        assert!((p.vocab_size as f64 / 43e3 - 1.0).abs() < 0.01);
        let p = predict_nv(&fit, 70e9, &shapes, Some(8192)).unwrap();
        assert!((p.vocab_size as f64 / 231e3 - 1.0).abs() < 0.02, "{p:?}");
        assert_eq!(p.vocab_size % 128, 0);
    }

    #[test]
    fn anchored_law_is_exact_power_law() {
        let fit = GammaFit::paper_2024();
        let mut prev_ratio = f64::INFINITY;
        for n in log_grid(1e7, 1e12, 30) {
            let s = 3.7;
            assert!((fit.n_v(s * n) / fit.n_v(n) - s.powf(fit.gamma)).abs() < 1e-12);
            let ratio = fit.n_v(n) / n;
            assert!(ratio < prev_ratio);
            prev_ratio = ratio;
        }
    }

    #[test]
    fn json_shape() {
        let v = serde_json::to_value(GammaFit::paper_2024()).unwrap();
        for k in ["gamma", "anchor_n_nv", "anchor_n_v"] {
            assert!(v.get(k).is_some());
        }
    }
}
