/// Transition scale used by every robust fit in the toolkit.
pub const HUBER_DELTA: f64 = 1e-3;

/// Huber loss of a residual: quadratic within `delta`, linear outside.
#[inline]
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Derivative of [`huber`] with respect to the residual.
#[inline]
pub fn huber_grad(r: f64, delta: f64) -> f64 {
    r.clamp(-delta, delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn continuous_at_the_transition() {
        let d = 0.5;
        let inside = huber(d - 1e-12, d);
        let outside = huber(d + 1e-12, d);
        assert!((inside - outside).abs() < 1e-11);
        assert!((huber(2.0, d) - 0.5 * (2.0 - 0.25)).abs() < 1e-15);
        assert!((huber(-0.2, d) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        for &r in &[-3.0, -0.3, 0.0, 0.1, 0.7, 4.0] {
            let h = 1e-7;
            let fd = (huber(r + h, 0.5) - huber(r - h, 0.5)) / (2.0 * h);
            assert!((fd - huber_grad(r, 0.5)).abs() < 1e-6, "r={r}");
        }
    }
}
