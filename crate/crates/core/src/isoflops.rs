//! IsoFLOPs analysis: interpolate training trajectories to fixed budgets, pick
//! the lowest-loss configuration per budget, and fit power laws of the optimal
//! `N_nv`, `N_v` and `H` against compute with a shared `N_nv`/`H` exponent.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::fertility::FertilityFit;
use crate::optim::{huber, huber_grad, minimize, multistart, MinimizerOptions, Objective, HUBER_DELTA};
use crate::scale::{round_vocab, tokens_from_chars, FlopsBudget, RunRecord, ShapeTable};

/// Coefficient range of the initial-guess grid, in `ln k`.
pub const LOG_K_RANGE: (f64, f64) = (-20.0, 15.0);
/// Exponent range of the initial-guess grid.
pub const ALPHA_RANGE: (f64, f64) = (0.0, 1.0);
/// Grid points per axis.
pub const GRID_POINTS: usize = 20;
/// Seeded random restarts of the joint fit.
pub const JOINT_RESTARTS: usize = 50;

/// `y = k C^alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub k: f64,
    pub alpha: f64,
    /// Root-mean-square log residual.
    #[serde(default)]
    pub rmse: f64,
    /// Coefficient of determination in log space.
    #[serde(default)]
    pub r2: f64,
}

impl PowerLawFit {
    pub fn new(k: f64, alpha: f64) -> Self {
        Self {
            k,
            alpha,
            rmse: 0.0,
            r2: 1.0,
        }
    }

    pub fn eval(&self, c: f64) -> f64 {
        self.k * c.powf(self.alpha)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub objective: f64,
    pub optima: usize,
    pub flops_min: f64,
    pub flops_max: f64,
    pub starts: usize,
}

/// Fitted allocation laws. `nv.alpha == h.alpha` by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationLaws {
    pub nv: PowerLawFit,
    pub v: PowerLawFit,
    pub h: PowerLawFit,
    #[serde(default)]
    pub diagnostics: FitDiagnostics,
}

impl AllocationLaws {
    /// Published laws `N_nv = 0.08 C^0.50`, `N_v = 0.20 C^0.42`,
    /// `H = 6.42 C^0.50`.
    pub fn paper_2024() -> Self {
        Self {
            nv: PowerLawFit::new(0.08, 0.50),
            v: PowerLawFit::new(0.20, 0.42),
            h: PowerLawFit::new(6.42, 0.50),
            diagnostics: FitDiagnostics::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, law) in [("nv", &self.nv), ("v", &self.v), ("h", &self.h)] {
            ensure_positive(&format!("{name}.k"), law.k)?;
            if !(0.0..=1.0).contains(&law.alpha) {
                return Err(Error::invalid(format!("{name}.alpha = {} outside [0, 1]", law.alpha)));
            }
        }
        if self.nv.alpha != self.h.alpha {
            return Err(Error::invalid("nv and h laws must share their exponent"));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let laws: Self = serde_json::from_str(&text)?;
        laws.validate()?;
        Ok(laws)
    }
}

/// The lowest-loss configuration found at one budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetOptimum {
    pub flops: f64,
    pub n_nv: f64,
    pub n_v: f64,
    pub h: f64,
    pub loss_u: f64,
    pub vocab_size: f64,
    pub embed_dim: u32,
    /// Another candidate reached the same loss; the smaller `n_v` was kept.
    #[serde(default)]
    pub tied: bool,
}

/// One `(n_nv, vocab)` trajectory interpolated to a budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BudgetCandidate {
    pub n_nv: f64,
    pub vocab_size: f64,
    pub embed_dim: u32,
    pub h: f64,
    pub loss_u: f64,
}

impl BudgetCandidate {
    pub fn n_v(&self) -> f64 {
        self.vocab_size * self.embed_dim as f64
    }
}

type FamilyKey = (u64, u64, u32);

fn family_key(r: &RunRecord) -> FamilyKey {
    (r.n_nv.to_bits(), r.vocab_size.to_bits(), r.embed_dim)
}

/// Groups records into `(n_nv, vocab, d)` trajectories sorted by FLOPs.
fn families(records: &[RunRecord]) -> BTreeMap<FamilyKey, Vec<&RunRecord>> {
    let mut out: BTreeMap<FamilyKey, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        out.entry(family_key(r)).or_default().push(r);
    }
    for runs in out.values_mut() {
        runs.sort_by(|a, b| a.flops.total_cmp(&b.flops));
    }
    out
}

fn interpolate(runs: &[&RunRecord], budget: f64) -> Option<BudgetCandidate> {
    let first = runs.first()?;
    let x = budget.ln();
    for w in runs.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.flops <= budget && budget <= b.flops {
            let (xa, xb) = (a.flops.ln(), b.flops.ln());
            let t = if xb > xa { (x - xa) / (xb - xa) } else { 0.0 };
            let lerp = |p: f64, q: f64| p + t * (q - p);
            return Some(BudgetCandidate {
                n_nv: a.n_nv,
                vocab_size: a.vocab_size,
                embed_dim: a.embed_dim,
                h: lerp(a.chars_seen.ln(), b.chars_seen.ln()).exp(),
                loss_u: lerp(a.loss_u, b.loss_u),
            });
        }
    }
    // A single checkpoint sitting exactly on the budget.
    (runs.len() == 1 && first.flops == budget).then(|| BudgetCandidate {
        n_nv: first.n_nv,
        vocab_size: first.vocab_size,
        embed_dim: first.embed_dim,
        h: first.chars_seen,
        loss_u: first.loss_u,
    })
}

fn candidates(records: &[RunRecord], budget: f64) -> Vec<BudgetCandidate> {
    families(records)
        .values()
        .filter_map(|runs| interpolate(runs, budget))
        .collect()
}

/// Loss of every trajectory that brackets `budget`, interpolated linearly in
/// `ln FLOPs`. Trajectories that do not reach the budget are left out.
pub fn loss_curve_at_budget(records: &[RunRecord], budget: FlopsBudget) -> Result<Vec<BudgetCandidate>> {
    let out = candidates(records, budget.value());
    if out.is_empty() {
        return Err(Error::Empty(format!("no trajectory brackets {:e} FLOPs", budget.value())));
    }
    Ok(out)
}

/// Inserts `factor - 1` interpolated records between neighbouring vocabulary
/// sizes of each `(n_nv, d)` family, matching checkpoints by index.
///
/// Interpolation is linear in `(ln N_v, ln H, loss_u, lm_loss)`; tokens and
/// FLOPs of the new records are recomputed from `fert`.
pub fn densify(records: &[RunRecord], factor: usize, fert: &FertilityFit) -> Result<Vec<RunRecord>> {
    if factor == 0 {
        return Err(Error::invalid("densify factor must be at least 1"));
    }
    let mut out = records.to_vec();
    if factor == 1 {
        return Ok(out);
    }
    let mut groups: BTreeMap<(u64, u32), BTreeMap<u64, Vec<&RunRecord>>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.n_nv.to_bits(), r.embed_dim))
            .or_default()
            .entry(r.vocab_size.to_bits())
            .or_default()
            .push(r);
    }
    for vocabs in groups.values() {
        // Positive f64 bit patterns order like the values themselves.
        let trajectories: Vec<Vec<&RunRecord>> = vocabs
            .values()
            .map(|runs| {
                let mut runs = runs.clone();
                runs.sort_by(|a, b| a.chars_seen.total_cmp(&b.chars_seen));
                runs
            })
            .collect();
        for pair in trajectories.windows(2) {
            let (lo, hi) = (&pair[0], &pair[1]);
            for (a, b) in lo.iter().zip(hi.iter()) {
                for j in 1..factor {
                    let t = j as f64 / factor as f64;
                    let lerp = |p: f64, q: f64| p + t * (q - p);
                    let d = a.embed_dim as f64;
                    let n_v = lerp(a.n_v().ln(), b.n_v().ln()).exp();
                    let vocab = n_v / d;
                    let h = lerp(a.chars_seen.ln(), b.chars_seen.ln()).exp();
                    let tokens = tokens_from_chars(h, vocab, fert)?;
                    out.push(RunRecord {
                        run_id: format!("{}~{}@{}/{}", a.run_id, b.run_id, j, factor),
                        n_nv: a.n_nv,
                        vocab_size: vocab,
                        embed_dim: a.embed_dim,
                        chars_seen: h,
                        tokens_seen: tokens,
                        flops: 6.0 * (a.n_nv + n_v) * tokens,
                        lm_loss: lerp(a.lm_loss, b.lm_loss),
                        loss_u: lerp(a.loss_u, b.loss_u),
                        synthetic: true,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// A budget that no trajectory reached.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedBudget {
    pub flops: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimaSelection {
    pub optima: Vec<BudgetOptimum>,
    pub skipped: Vec<SkippedBudget>,
}

/// Relative loss difference below which two candidates count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

/// Lowest-`loss_u` interpolated candidate per budget. Ties go to the smaller
/// `n_v`.
pub fn select_optima(records: &[RunRecord], budgets: &[FlopsBudget]) -> OptimaSelection {
    let fams = families(records);
    let mut optima = Vec::new();
    let mut skipped = Vec::new();
    for b in budgets {
        let c = b.value();
        let cands: Vec<BudgetCandidate> = fams.values().filter_map(|runs| interpolate(runs, c)).collect();
        let Some(best_loss) = cands.iter().map(|x| x.loss_u).min_by(f64::total_cmp) else {
            skipped.push(SkippedBudget {
                flops: c,
                reason: "outside every trajectory".into(),
            });
            continue;
        };
        let tol = TIE_TOLERANCE * best_loss.abs().max(1.0);
        let mut tied: Vec<&BudgetCandidate> = cands.iter().filter(|x| x.loss_u - best_loss <= tol).collect();
        tied.sort_by(|a, b| a.n_v().total_cmp(&b.n_v()).then(a.n_nv.total_cmp(&b.n_nv)));
        let w = tied[0];
        optima.push(BudgetOptimum {
            flops: c,
            n_nv: w.n_nv,
            n_v: w.n_v(),
            h: w.h,
            loss_u: w.loss_u,
            vocab_size: w.vocab_size,
            embed_dim: w.embed_dim,
            tied: tied.len() > 1,
        });
    }
    OptimaSelection { optima, skipped }
}

/// `n` budgets at the centres of equal log-width bins over the records' FLOPs
/// range, so the extremes that only one trajectory reaches are avoided.
pub fn geometric_budgets(records: &[RunRecord], n: usize) -> Result<Vec<FlopsBudget>> {
    if n == 0 {
        return Err(Error::invalid("budget count must be positive"));
    }
    let lo = records.iter().map(|r| r.flops).min_by(f64::total_cmp);
    let hi = records.iter().map(|r| r.flops).max_by(f64::total_cmp);
    let (Some(lo), Some(hi)) = (lo, hi) else {
        return Err(Error::Empty("run records".into()));
    };
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| FlopsBudget::new((a + (b - a) * (i as f64 + 0.5) / n as f64).exp()))
        .collect()
}

/// Huber loss of log residuals for the three laws, in centred coordinates:
/// θ = [K1', α1, K2', α2, K3'] with `ln y = K' + α (ln C - m)`.
struct LawsObjective {
    points: Vec<[f64; 4]>,
    delta: f64,
}

impl LawsObjective {
    fn residuals(theta: &[f64], p: &[f64; 4]) -> [f64; 3] {
        let x = p[0];
        [
            theta[0] + theta[1] * x - p[1],
            theta[2] + theta[3] * x - p[2],
            theta[4] + theta[1] * x - p[3],
        ]
    }
}

impl Objective for LawsObjective {
    fn value(&self, theta: &[f64]) -> f64 {
        self.points
            .iter()
            .flat_map(|p| Self::residuals(theta, p))
            .map(|r| huber(r, self.delta))
            .sum()
    }

    fn gradient(&self, theta: &[f64], grad: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for p in &self.points {
            let r = Self::residuals(theta, p).map(|r| huber_grad(r, self.delta));
            grad[0] += r[0];
            grad[1] += (r[0] + r[2]) * p[0];
            grad[2] += r[1];
            grad[3] += r[1] * p[0];
            grad[4] += r[2];
        }
    }
}

/// Single-law objective used for warm starts: θ = [K', α].
struct SingleLaw {
    points: Vec<(f64, f64)>,
    delta: f64,
}

impl Objective for SingleLaw {
    fn value(&self, t: &[f64]) -> f64 {
        self.points.iter().map(|&(x, y)| huber(t[0] + t[1] * x - y, self.delta)).sum()
    }

    fn gradient(&self, t: &[f64], grad: &mut [f64]) {
        grad[0] = 0.0;
        grad[1] = 0.0;
        for &(x, y) in &self.points {
            let g = huber_grad(t[0] + t[1] * x - y, self.delta);
            grad[0] += g;
            grad[1] += g * x;
        }
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
}

fn fit_quality(xs: &[f64], ys: &[f64], k_centred: f64, alpha: f64) -> (f64, f64) {
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let r = k_centred + alpha * x - y;
        ss_res += r * r;
        ss_tot += (y - mean) * (y - mean);
    }
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    ((ss_res / n).sqrt(), r2)
}

/// Options for [`fit_power_laws`].
#[derive(Debug, Clone)]
pub struct PowerLawOptions {
    pub delta: f64,
    pub seed: u64,
}

impl Default for PowerLawOptions {
    fn default() -> Self {
        Self {
            delta: HUBER_DELTA,
            seed: 0,
        }
    }
}

/// Jointly fits `N_nv = k1 C^α1`, `N_v = k2 C^α2`, `H = k3 C^α1` by summed
/// Huber loss on log residuals.
///
/// Each law is first fitted alone from a 20 x 20 grid over `ln k` and `α`; the
/// best single-law solutions seed the joint fit alongside seeded random
/// restarts.
pub fn fit_power_laws(optima: &[BudgetOptimum], opts: &PowerLawOptions) -> Result<AllocationLaws> {
    if optima.len() < 4 {
        return Err(Error::Underdetermined(format!(
            "power-law fit needs at least 4 optima, have {}",
            optima.len()
        )));
    }
    for o in optima {
        for (name, v) in [("flops", o.flops), ("n_nv", o.n_nv), ("n_v", o.n_v), ("h", o.h)] {
            ensure_positive(name, v)?;
        }
    }
    let flops_min = optima.iter().map(|o| o.flops).fold(f64::INFINITY, f64::min);
    let flops_max = optima.iter().map(|o| o.flops).fold(0.0, f64::max);
    if (flops_max / flops_min).log10() < 2.0 {
        return Err(Error::Underdetermined(format!(
            "optima span {flops_min:e}..{flops_max:e} FLOPs, need at least two decades"
        )));
    }

    let m = optima.iter().map(|o| o.flops.ln()).sum::<f64>() / optima.len() as f64;
    let xs: Vec<f64> = optima.iter().map(|o| o.flops.ln() - m).collect();
    let series: [Vec<f64>; 3] = [
        optima.iter().map(|o| o.n_nv.ln()).collect(),
        optima.iter().map(|o| o.n_v.ln()).collect(),
        optima.iter().map(|o| o.h.ln()).collect(),
    ];
    let min_opts = MinimizerOptions::default();

    // Grid in (ln k, α) mapped to centred coordinates K' = ln k + α m.
    let grid: Vec<Vec<f64>> = linspace(LOG_K_RANGE.0, LOG_K_RANGE.1, GRID_POINTS)
        .flat_map(|k| linspace(ALPHA_RANGE.0, ALPHA_RANGE.1, GRID_POINTS).map(move |a| vec![k + a * m, a]))
        .collect();
    let mut single = Vec::with_capacity(3);
    for ys in &series {
        let obj = SingleLaw {
            points: xs.iter().copied().zip(ys.iter().copied()).collect(),
            delta: opts.delta,
        };
        single.push(multistart(&obj, &grid, &min_opts)?.x);
    }

    let objective = LawsObjective {
        points: xs
            .iter()
            .enumerate()
            .map(|(i, &x)| [x, series[0][i], series[1][i], series[2][i]])
            .collect(),
        delta: opts.delta,
    };
    let (nv, v, h) = (&single[0], &single[1], &single[2]);
    let mut starts = vec![
        vec![nv[0], 0.5 * (nv[1] + h[1]), v[0], v[1], h[0]],
        vec![nv[0], nv[1], v[0], v[1], h[0]],
        vec![nv[0], h[1], v[0], v[1], h[0]],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..JOINT_RESTARTS {
        let mut draw = || {
            let a = rng.random_range(ALPHA_RANGE.0..=ALPHA_RANGE.1);
            (rng.random_range(LOG_K_RANGE.0..=LOG_K_RANGE.1) + a * m, a)
        };
        let (k1, a1) = draw();
        let (k2, a2) = draw();
        let (k3, _) = draw();
        starts.push(vec![k1, a1, k2, a2, k3]);
    }
    let best = multistart(&objective, &starts, &min_opts)?;
    let polished = minimize(&objective, &best.x, &min_opts);
    let t = if polished.value <= best.value { polished.x } else { best.x };

    let law = |kc: f64, alpha: f64, ys: &[f64]| {
        let (rmse, r2) = fit_quality(&xs, ys, kc, alpha);
        PowerLawFit {
            k: (kc - alpha * m).exp(),
            alpha,
            rmse,
            r2,
        }
    };
    Ok(AllocationLaws {
        nv: law(t[0], t[1], &series[0]),
        v: law(t[2], t[3], &series[1]),
        h: law(t[4], t[1], &series[2]),
        diagnostics: FitDiagnostics {
            objective: objective.value(&t),
            optima: optima.len(),
            flops_min,
            flops_max,
            starts: 3 * grid.len() + starts.len(),
        },
    })
}

/// Allocation read off the laws at one budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Allocation {
    pub n_nv: f64,
    pub n_v: f64,
    pub h: f64,
    pub embed_dim: u32,
    pub vocab_size: u64,
}

/// Evaluates the three laws at `budget`; the width comes from `shapes` at the
/// predicted `n_nv` unless `embed_dim` is given.
pub fn predict_allocation(
    laws: &AllocationLaws,
    budget: FlopsBudget,
    shapes: &ShapeTable,
    embed_dim: Option<u32>,
) -> Result<Allocation> {
    let c = budget.value();
    let n_nv = laws.nv.eval(c);
    let n_v = laws.v.eval(c);
    let embed_dim = match embed_dim {
        Some(d) => d,
        None => shapes.embed_dim_for(n_nv)?,
    };
    Ok(Allocation {
        n_nv,
        n_v,
        h: laws.h.eval(c),
        embed_dim,
        vocab_size: round_vocab(n_v / embed_dim as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, n_nv: f64, vocab: f64, flops: f64, h: f64, loss_u: f64) -> RunRecord {
        RunRecord {
            run_id: id.into(),
            n_nv,
            vocab_size: vocab,
            embed_dim: 512,
            chars_seen: h,
            tokens_seen: h * 0.3,
            flops,
            lm_loss: 3.0,
            loss_u,
            synthetic: false,
        }
    }

    fn budget(c: f64) -> FlopsBudget {
        FlopsBudget::new(c).unwrap()
    }

    #[test]
    fn constant_and_exact_interpolation() {
        let recs = vec![
            rec("a", 1e8, 4096.0, 1e18, 1e9, -5.0),
            rec("a", 1e8, 4096.0, 1e19, 1e10, -5.0),
        ];
        let c = loss_curve_at_budget(&recs, budget(3e18)).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].loss_u, -5.0);
        let recs = vec![
            rec("a", 1e8, 4096.0, 1e18, 1e9, -5.0),
            rec("a", 1e8, 4096.0, 1e19, 1e10, -5.2),
        ];
        assert_eq!(loss_curve_at_budget(&recs, budget(1e19)).unwrap()[0].loss_u, -5.2);
        assert_eq!(loss_curve_at_budget(&recs, budget(1e18)).unwrap()[0].loss_u, -5.0);
        let mid = loss_curve_at_budget(&recs, budget(10f64.powf(18.5))).unwrap()[0];
        assert!((mid.loss_u + 5.1).abs() < 1e-12);
        assert!((mid.h / 10f64.powf(9.5) - 1.0).abs() < 1e-12);
        assert!(matches!(loss_curve_at_budget(&recs, budget(1e20)), Err(Error::Empty(_))));
    }

    #[test]
    fn selection_prefers_lower_loss_then_smaller_vocab() {
        let recs = vec![
            rec("a", 1e8, 4096.0, 1e18, 1e9, -5.0),
            rec("a", 1e8, 4096.0, 1e19, 1e10, -5.0),
            rec("b", 1e8, 8192.0, 1e18, 1e9, -5.1),
            rec("b", 1e8, 8192.0, 1e19, 1e10, -5.1),
        ];
        let sel = select_optima(&recs, &[budget(2e18), budget(1e21)]);
        assert_eq!(sel.optima.len(), 1);
        assert_eq!(sel.optima[0].vocab_size, 8192.0);
        assert!(!sel.optima[0].tied);
        assert_eq!(sel.skipped.len(), 1);
        assert_eq!(sel.skipped[0].flops, 1e21);

        let recs = vec![
            rec("a", 1e8, 4096.0, 1e18, 1e9, -5.0),
            rec("a", 1e8, 4096.0, 1e19, 1e10, -5.0),
            rec("b", 1e8, 8192.0, 1e18, 1e9, -5.0),
            rec("b", 1e8, 8192.0, 1e19, 1e10, -5.0),
        ];
        let sel = select_optima(&recs, &[budget(2e18)]);
        assert_eq!(sel.optima[0].vocab_size, 4096.0);
        assert!(sel.optima[0].tied);
    }

    #[test]
    fn densify_identity_and_midpoint() {
        let fert = FertilityFit::paper_2024();
        let recs = vec![
            rec("a", 1e8, 4096.0, 1e18, 1e9, 1.0),
            rec("b", 1e8, 16384.0, 1e18, 1e9, 2.0),
        ];
        assert_eq!(densify(&recs, 1, &fert).unwrap(), recs);
        let dense = densify(&recs, 2, &fert).unwrap();
        assert_eq!(dense.len(), 3);
        let mid = &dense[2];
        assert!(mid.synthetic);
        assert!((mid.loss_u - 1.5).abs() < 1e-15);
        assert!((mid.vocab_size - 8192.0).abs() < 1e-9);
        let expected = crate::scale::flops_cost(1e8, mid.vocab_size, 512.0, 1e9, &fert).unwrap();
        assert!((mid.flops / expected - 1.0).abs() < 1e-12);
        assert!(densify(&recs, 0, &fert).is_err());
    }

    fn planted_optima(laws: &AllocationLaws, budgets: &[f64]) -> Vec<BudgetOptimum> {
        budgets
            .iter()
            .map(|&c| BudgetOptimum {
                flops: c,
                n_nv: laws.nv.eval(c),
                n_v: laws.v.eval(c),
                h: laws.h.eval(c),
                loss_u: 0.0,
                vocab_size: 0.0,
                embed_dim: 0,
                tied: false,
            })
            .collect()
    }

    #[test]
    fn recovers_published_laws() {
        let truth = AllocationLaws::paper_2024();
        let budgets: Vec<f64> = crate::optim::log_grid(1e17, 1e21, 12);
        let fit = fit_power_laws(&planted_optima(&truth, &budgets), &PowerLawOptions::default()).unwrap();
        for (got, want) in [(fit.nv, truth.nv), (fit.v, truth.v), (fit.h, truth.h)] {
            assert!((got.alpha - want.alpha).abs() < 1e-6, "{got:?} vs {want:?}");
            assert!((got.k / want.k - 1.0).abs() < 1e-6, "{got:?} vs {want:?}");
            assert!(got.r2 > 0.999999);
        }
        assert_eq!(fit.nv.alpha, fit.h.alpha);
        assert!((fit.v.alpha / fit.nv.alpha - 0.84).abs() < 1e-6);
        fit.validate().unwrap();
    }

    #[test]
    fn reorder_and_duplicate_invariance() {
        let truth = AllocationLaws::paper_2024();
        let budgets: Vec<f64> = crate::optim::log_grid(1e17, 1e21, 8);
        let mut pts = planted_optima(&truth, &budgets);
        let base = fit_power_laws(&pts, &PowerLawOptions::default()).unwrap();
        pts.reverse();
        pts.push(pts[2]);
        let other = fit_power_laws(&pts, &PowerLawOptions::default()).unwrap();
        assert!((base.v.alpha - other.v.alpha).abs() < 1e-9);
        assert!((base.nv.k / other.nv.k - 1.0).abs() < 1e-9);
    }

    #[test]
    fn requires_spread() {
        let truth = AllocationLaws::paper_2024();
        let narrow = planted_optima(&truth, &crate::optim::log_grid(1e18, 5e19, 6));
        assert!(matches!(
            fit_power_laws(&narrow, &PowerLawOptions::default()),
            Err(Error::Underdetermined(_))
        ));
        let few = planted_optima(&truth, &[1e17, 1e19, 1e21]);
        assert!(fit_power_laws(&few, &PowerLawOptions::default()).is_err());
    }

    #[test]
    fn published_laws_predict_table_scale() {
        let laws = AllocationLaws::paper_2024();
        let shapes = ShapeTable::default();
        let a = predict_allocation(&laws, budget(1.3e21), &shapes, Some(3200)).unwrap();
        assert!((a.n_nv / 2.88e9 - 1.0).abs() < 0.01);
        let a = predict_allocation(&laws, budget(7.1e21), &shapes, None).unwrap();
        assert!((a.n_v / 0.3e9 - 1.0).abs() < 0.1, "{a:?}");
        let flat = AllocationLaws {
            v: PowerLawFit::new(1e6, 0.0),
            ..AllocationLaws::paper_2024()
        };
        let p1 = predict_allocation(&flat, budget(1e18), &shapes, Some(512)).unwrap();
        let p2 = predict_allocation(&flat, budget(1e24), &shapes, Some(512)).unwrap();
        assert_eq!(p1.n_v, p2.n_v);
    }

    #[test]
    fn json_layout() {
        let v = serde_json::to_value(AllocationLaws::paper_2024()).unwrap();
        for k in ["nv", "v", "h", "diagnostics"] {
            assert!(v.get(k).is_some());
        }
        assert_eq!(v["v"]["alpha"], 0.42);
        let back: AllocationLaws = serde_json::from_str(r#"{"nv":{"k":0.08,"alpha":0.5},"v":{"k":0.2,"alpha":0.42},"h":{"k":6.42,"alpha":0.5}}"#).unwrap();
        back.validate().unwrap();
    }

    #[test]
    fn geometric_budgets_stay_inside_range() {
        let recs = vec![rec("a", 1e8, 4096.0, 1e16, 1e9, -5.0), rec("a", 1e8, 4096.0, 1e20, 1e10, -5.0)];
        let b = geometric_budgets(&recs, 8).unwrap();
        assert_eq!(b.len(), 8);
        assert!(b[0].value() > 1e16 && b[7].value() < 1e20);
        assert!(b.windows(2).all(|w| w[0].value() < w[1].value()));
    }
}
