//! Numerical building blocks shared by the fitters and solvers: the Huber
//! loss, a dense BFGS minimizer with a strong-Wolfe line search and a
//! Nelder-Mead fallback, a deterministic parallel multi-start driver, and
//! one-dimensional root finding / line search.

mod bfgs;
mod huber;
mod multistart;
mod roots;
mod simplex;

pub use bfgs::{minimize, Minimum, MinimizerOptions};
pub use huber::{huber, huber_grad, HUBER_DELTA};
pub use multistart::multistart;
pub use roots::{bisect, golden_section_min, log_grid, log_scan_bracket, Bracket};
pub use simplex::nelder_mead;

/// Step used for central-difference gradients, scaled by `max(1, |x_i|)`.
pub const FD_STEP: f64 = 1e-6;

/// A scalar objective over a real parameter vector.
///
/// Implementors that know their gradient should override
/// [`Objective::gradient`]; the default uses central differences.
pub trait Objective: Sync {
    fn value(&self, x: &[f64]) -> f64;

    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        central_difference(|p| self.value(p), x, grad);
    }
}

impl<F> Objective for F
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    fn value(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &mut [f64]) {
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = FD_STEP * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_quadratic_is_exact() {
        let f = |x: &[f64]| 3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + x[1];
        let mut g = [0.0; 2];
        central_difference(f, &[1.5, -2.0], &mut g);
        assert!((g[0] - (9.0 + 4.0)).abs() < 1e-6);
        assert!((g[1] - (-3.0 + 1.0)).abs() < 1e-6);
    }
}
