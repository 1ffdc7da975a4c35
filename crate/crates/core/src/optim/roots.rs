use crate::error::{Error, Result};

/// An interval on which a function changes sign.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracket {
    pub lo: f64,
    pub hi: f64,
    pub f_lo: f64,
    pub f_hi: f64,
}

/// `n` points spaced evenly in log space on `[lo, hi]`, endpoints included.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| {
                    if i == 0 {
                        lo
                    } else if i == n - 1 {
                        hi
                    } else {
                        (a + (b - a) * i as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

/// Scans `probes` log-spaced points on `[lo, hi]` and returns the first
/// adjacent pair whose values change sign (a probe landing exactly on zero
/// yields a degenerate bracket at that point).
pub fn log_scan_bracket(f: impl Fn(f64) -> f64, lo: f64, hi: f64, probes: usize) -> Option<Bracket> {
    let grid = log_grid(lo, hi, probes.max(2));
    let mut prev_x = grid[0];
    let mut prev_f = f(prev_x);
    if prev_f == 0.0 {
        return Some(Bracket {
            lo: prev_x,
            hi: prev_x,
            f_lo: 0.0,
            f_hi: 0.0,
        });
    }
    for &x in &grid[1..] {
        let fx = f(x);
        if fx == 0.0 || fx.signum() != prev_f.signum() {
            return Some(Bracket {
                lo: prev_x,
                hi: x,
                f_lo: prev_f,
                f_hi: fx,
            });
        }
        prev_x = x;
        prev_f = fx;
    }
    None
}

/// Bisection on a sign-changing bracket until the interval width falls below
/// `rtol` times the midpoint magnitude.
pub fn bisect(f: impl Fn(f64) -> f64, bracket: Bracket, rtol: f64) -> Result<f64> {
    let Bracket {
        mut lo,
        mut hi,
        mut f_lo,
        f_hi,
    } = bracket;
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() {
        return Err(Error::invalid(format!("no sign change on [{lo}, {hi}]")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (hi - lo).abs() <= rtol * mid.abs() {
            return Ok(mid);
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == f_lo.signum() {
            lo = mid;
            f_lo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Golden-section search for the minimum of a unimodal function on `[lo, hi]`.
/// Returns `(x, f(x))`.
pub fn golden_section_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    let fx = f(x);
    // Endpoints are never probed by the interior iteration.
    [(lo, f(lo)), (hi, f(hi)), (x, fx)]
        .into_iter()
        .min_by(|p, q| p.1.total_cmp(&q.1))
        .unwrap()
}
