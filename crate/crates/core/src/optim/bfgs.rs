use serde::Serialize;

use super::{dot, inf_norm, nelder_mead, Objective};

#[derive(Debug, Clone, Copy)]
pub struct MinimizerOptions {
    pub max_iter: usize,
    /// Absolute infinity-norm gradient tolerance.
    pub grad_tol: f64,
    /// Relative objective decrease below which an iteration counts as stagnant.
    pub f_tol: f64,
    /// Enables the Nelder-Mead fallback when the line search stalls.
    pub simplex_fallback: bool,
}

impl Default for MinimizerOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-14,
            f_tol: 1e-14,
            simplex_fallback: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub used_fallback: bool,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const STAGNANT_LIMIT: usize = 3;

enum Outcome {
    Converged,
    Stalled,
    Exhausted,
}

/// BFGS with a strong-Wolfe line search.
///
/// When the line search cannot make progress the search direction is reset to
/// steepest descent once; if that stalls too, a Nelder-Mead polish is run from
/// the current point and BFGS restarts from its result. A stall that the
/// simplex cannot improve on is treated as convergence to working precision.
pub fn minimize<O: Objective + ?Sized>(obj: &O, x0: &[f64], opts: &MinimizerOptions) -> Minimum {
    let mut state = run_bfgs(obj, x0, opts);
    let mut used_fallback = false;
    let mut iterations = state.iterations;

    for _ in 0..2 {
        if !matches!(state.outcome, Outcome::Stalled) || !opts.simplex_fallback {
            break;
        }
        used_fallback = true;
        let polished = nelder_mead(obj, &state.x, 1e-3, 4000);
        let improvement = state.value - polished.value;
        // Near an exact fit the objective approaches zero, so relative
        // improvement alone would never settle.
        if !(improvement > 1e-12 * state.value.abs().max(1e-12)) {
            state.outcome = Outcome::Converged;
            break;
        }
        let restarted = run_bfgs(obj, &polished.x, opts);
        iterations += restarted.iterations;
        state = if restarted.value <= polished.value {
            restarted
        } else {
            State {
                x: polished.x,
                value: polished.value,
                iterations: 0,
                outcome: Outcome::Stalled,
            }
        };
    }

    let converged = match state.outcome {
        Outcome::Converged => true,
        Outcome::Stalled => !opts.simplex_fallback,
        Outcome::Exhausted => false,
    };
    Minimum {
        x: state.x,
        value: state.value,
        iterations,
        converged,
        used_fallback,
    }
}

struct State {
    x: Vec<f64>,
    value: f64,
    iterations: usize,
    outcome: Outcome,
}

fn run_bfgs<O: Objective + ?Sized>(obj: &O, x0: &[f64], opts: &MinimizerOptions) -> State {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut f = obj.value(&x);
    let mut g = vec![0.0; n];
    if !f.is_finite() {
        return State {
            x,
            value: f,
            iterations: 0,
            outcome: Outcome::Exhausted,
        };
    }
    obj.gradient(&x, &mut g);

    // Inverse Hessian approximation, row-major.
    let mut h = identity(n);
    let mut fresh = true;
    let mut stagnant = 0;
    let mut dir = vec![0.0; n];

    for iter in 0..opts.max_iter {
        if inf_norm(&g) <= opts.grad_tol {
            return State {
                x,
                value: f,
                iterations: iter,
                outcome: Outcome::Converged,
            };
        }

        mat_vec_neg(&h, &g, &mut dir);
        if dot(&g, &dir) >= 0.0 {
            h = identity(n);
            fresh = true;
            dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
        }

        let Some(step) = line_search(obj, &x, f, &g, &dir) else {
            if fresh {
                return State {
                    x,
                    value: f,
                    iterations: iter,
                    outcome: Outcome::Stalled,
                };
            }
            h = identity(n);
            fresh = true;
            continue;
        };

        let s: Vec<f64> = step.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = step.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 0.0 && sy.is_finite() {
            if fresh {
                let scale = sy / dot(&y, &y);
                h.iter_mut().for_each(|v| *v *= scale);
            }
            bfgs_update(&mut h, &s, &y, sy);
            fresh = false;
        }

        let decrease = f - step.f;
        let scale = f.abs().max(step.f.abs()).max(f64::MIN_POSITIVE);
        if decrease <= opts.f_tol * scale {
            stagnant += 1;
        } else {
            stagnant = 0;
        }

        x = step.x;
        f = step.f;
        g = step.g;

        if stagnant >= STAGNANT_LIMIT {
            return State {
                x,
                value: f,
                iterations: iter + 1,
                outcome: Outcome::Converged,
            };
        }
    }

    State {
        x,
        value: f,
        iterations: opts.max_iter,
        outcome: Outcome::Exhausted,
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn mat_vec_neg(m: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for i in 0..n {
        out[i] = -dot(&m[i * n..(i + 1) * n], v);
    }
}

/// H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let mut hy = vec![0.0; n];
    for i in 0..n {
        hy[i] = dot(&h[i * n..(i + 1) * n], y);
    }
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

struct Step {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

struct Probe<'a, O: ?Sized> {
    obj: &'a O,
    x: &'a [f64],
    dir: &'a [f64],
}

impl<O: Objective + ?Sized> Probe<'_, O> {
    fn eval(&self, alpha: f64) -> (Step, f64) {
        let x: Vec<f64> = self.x.iter().zip(self.dir).map(|(a, d)| a + alpha * d).collect();
        let f = self.obj.value(&x);
        let mut g = vec![0.0; x.len()];
        if f.is_finite() {
            self.obj.gradient(&x, &mut g);
        }
        let slope = dot(&g, self.dir);
        (Step { x, f, g }, slope)
    }
}

/// Strong-Wolfe line search (bracketing phase followed by zoom).
fn line_search<O: Objective + ?Sized>(obj: &O, x: &[f64], f0: f64, g0: &[f64], dir: &[f64]) -> Option<Step> {
    let slope0 = dot(g0, dir);
    if !(slope0 < 0.0) {
        return None;
    }
    let probe = Probe { obj, x, dir };
    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut slope_prev = slope0;
    let mut alpha = 1.0;

    for i in 0..40 {
        let (step, slope) = probe.eval(alpha);
        if !step.f.is_finite() {
            alpha = 0.5 * (alpha_prev + alpha);
            if alpha - alpha_prev < 1e-20 {
                return None;
            }
            continue;
        }
        if step.f > f0 + C1 * alpha * slope0 || (i > 0 && step.f >= f_prev) {
            return zoom(&probe, f0, slope0, (alpha_prev, f_prev, slope_prev), (alpha, step.f, slope));
        }
        if slope.abs() <= -C2 * slope0 {
            return Some(step);
        }
        if slope >= 0.0 {
            return zoom(&probe, f0, slope0, (alpha, step.f, slope), (alpha_prev, f_prev, slope_prev));
        }
        alpha_prev = alpha;
        f_prev = step.f;
        slope_prev = slope;
        alpha *= 2.0;
    }
    None
}

fn zoom<O: Objective + ?Sized>(
    probe: &Probe<'_, O>,
    f0: f64,
    slope0: f64,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
) -> Option<Step> {
    let mut best: Option<Step> = None;
    for _ in 0..60 {
        let width = (hi.0 - lo.0).abs();
        if width <= 1e-16 * lo.0.abs().max(hi.0.abs()).max(1e-300) {
            break;
        }
        let alpha = cubic_min(lo, hi).unwrap_or(0.5 * (lo.0 + hi.0));
        let (step, slope) = probe.eval(alpha);
        if !step.f.is_finite() || step.f > f0 + C1 * alpha * slope0 || step.f >= lo.1 {
            hi = (alpha, step.f, slope);
        } else {
            if slope.abs() <= -C2 * slope0 {
                return Some(step);
            }
            if slope * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (alpha, step.f, slope);
            best = Some(step);
        }
    }
    // Accept a sufficient-decrease point even if the curvature condition
    // could not be met within working precision.
    best.filter(|s| s.f < f0)
}

/// Minimizer of the cubic interpolating two (alpha, f, f') triples, if it lies
/// safely inside the interval.
fn cubic_min(a: (f64, f64, f64), b: (f64, f64, f64)) -> Option<f64> {
    let (x0, f0, d0) = a;
    let (x1, f1, d1) = b;
    let d1_ = d0 + d1 - 3.0 * (f0 - f1) / (x0 - x1);
    let disc = d1_ * d1_ - d0 * d1;
    if !(disc >= 0.0) {
        return None;
    }
    let d2 = (x1 - x0).signum() * disc.sqrt();
    let denom = d1 - d0 + 2.0 * d2;
    if denom == 0.0 {
        return None;
    }
    let x = x1 - (x1 - x0) * (d1 + d2 - d1_) / denom;
    let (lo, hi) = if x0 < x1 { (x0, x1) } else { (x1, x0) };
    let margin = 0.1 * (hi - lo);
    (x.is_finite() && x > lo + margin && x < hi - margin).then_some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    #[test]
    fn rosenbrock_from_classic_start() {
        let m = minimize(&rosenbrock, &[-1.2, 1.0], &MinimizerOptions::default());
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-6, "{:?}", m.x);
        assert!((m.x[1] - 1.0).abs() < 1e-6, "{:?}", m.x);
    }

    #[test]
    fn ill_conditioned_quadratic() {
        let f = |x: &[f64]| 0.5 * (x[0] - 3.0).powi(2) + 0.5e-8 * (x[1] + 2.0).powi(2);
        struct Exact<F>(F);
        impl<F: Fn(&[f64]) -> f64 + Sync> Objective for Exact<F> {
            fn value(&self, x: &[f64]) -> f64 {
                (self.0)(x)
            }
            fn gradient(&self, x: &[f64], g: &mut [f64]) {
                g[0] = x[0] - 3.0;
                g[1] = 1e-8 * (x[1] + 2.0);
            }
        }
        let m = minimize(&Exact(f), &[0.0, 0.0], &MinimizerOptions::default());
        assert!((m.x[0] - 3.0).abs() < 1e-8);
        assert!((m.x[1] + 2.0).abs() < 1e-6, "{:?}", m.x);
    }

    #[test]
    fn non_smooth_huber_line_fit() {
        use crate::optim::huber;
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
        let f = move |p: &[f64]| -> f64 {
            xs.iter().map(|&x| huber(p[0] + p[1] * x - (0.3 + 0.7 * x), 1e-3)).sum()
        };
        let m = minimize(&f, &[5.0, -2.0], &MinimizerOptions::default());
        assert!((m.x[0] - 0.3).abs() < 1e-6, "{:?}", m);
        assert!((m.x[1] - 0.7).abs() < 1e-6, "{:?}", m);
    }
}
