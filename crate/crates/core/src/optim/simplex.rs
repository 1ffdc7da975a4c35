use super::{Minimum, Objective};

/// Nelder-Mead downhill simplex. `scale` sets the initial edge length relative
/// to `max(1, |x_i|)`.
pub fn nelder_mead<O: Objective + ?Sized>(obj: &O, x0: &[f64], scale: f64, max_evals: usize) -> Minimum {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), obj.value(x0)));
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += scale * x0[i].abs().max(1.0);
        let f = obj.value(&p);
        simplex.push((p, f));
    }
    let mut evals = n + 1;
    let mut iterations = 0;
    let mut converged = false;

    let key = |v: f64| if v.is_nan() { f64::INFINITY } else { v };

    while evals < max_evals {
        iterations += 1;
        simplex.sort_by(|a, b| key(a.1).total_cmp(&key(b.1)));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let spread = (worst - best).abs();
        let size = simplex[1..]
            .iter()
            .flat_map(|(p, _)| p.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0_f64, f64::max);
        if spread <= 1e-16 * best.abs().max(1e-300) && size <= 1e-12 {
            converged = true;
            break;
        }
        if size <= 1e-15 {
            converged = true;
            break;
        }

        let mut centroid = vec![0.0; n];
        for (p, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let reflected = along(1.0);
        let fr = obj.value(&reflected);
        evals += 1;
        if key(fr) < key(simplex[0].1) {
            let expanded = along(2.0);
            let fe = obj.value(&expanded);
            evals += 1;
            simplex[n] = if key(fe) < key(fr) { (expanded, fe) } else { (reflected, fr) };
            continue;
        }
        if key(fr) < key(simplex[n - 1].1) {
            simplex[n] = (reflected, fr);
            continue;
        }
        let contracted = if key(fr) < key(simplex[n].1) { along(0.5) } else { along(-0.5) };
        let fc = obj.value(&contracted);
        evals += 1;
        if key(fc) < key(simplex[n].1).min(key(fr)) {
            simplex[n] = (contracted, fc);
            continue;
        }
        let anchor = simplex[0].0.clone();
        for (p, f) in simplex.iter_mut().skip(1) {
            for (v, a) in p.iter_mut().zip(&anchor) {
                *v = a + 0.5 * (*v - a);
            }
            *f = obj.value(p);
        }
        evals += n;
    }

    simplex.sort_by(|a, b| key(a.1).total_cmp(&key(b.1)));
    let (x, value) = simplex.swap_remove(0);
    Minimum {
        x,
        value,
        iterations,
        converged,
        used_fallback: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_minimum_of_shifted_bowl() {
        let f = |x: &[f64]| (x[0] - 1.0).powi(2) + 2.0 * (x[1] + 0.5).powi(2);
        let m = nelder_mead(&f, &[3.0, 3.0], 0.1, 10_000);
        assert!((m.x[0] - 1.0).abs() < 1e-6);
        assert!((m.x[1] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn handles_abs_kink() {
        let f = |x: &[f64]| (x[0] - 2.0).abs() + (x[1] + 1.0).abs();
        let m = nelder_mead(&f, &[0.0, 0.0], 0.2, 10_000);
        assert!(m.value < 1e-8, "{m:?}");
    }
}
