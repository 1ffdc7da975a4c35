use std::cmp::Ordering;

use rayon::prelude::*;

use super::{minimize, Minimum, MinimizerOptions, Objective};
use crate::error::{Error, Result};

/// Runs the minimizer from every start in parallel and returns the best
/// converged result. Selection orders by objective value, then by
/// lexicographic parameter order, so the outcome does not depend on thread
/// scheduling.
pub fn multistart<O: Objective>(obj: &O, starts: &[Vec<f64>], opts: &MinimizerOptions) -> Result<Minimum> {
    if starts.is_empty() {
        return Err(Error::invalid("multistart needs at least one initial guess"));
    }
    let results: Vec<Minimum> = starts.par_iter().map(|x0| minimize(obj, x0, opts)).collect();

    let best_converged = results
        .iter()
        .filter(|m| m.converged && m.value.is_finite())
        .min_by(|a, b| compare(a, b));
    if let Some(best) = best_converged {
        return Ok(best.clone());
    }

    let best_any = results.iter().filter(|m| m.value.is_finite()).min_by(|a, b| compare(a, b));
    Err(Error::NonConvergence {
        message: format!("{} starts, none met the convergence criteria", starts.len()),
        best: best_any.map(|m| m.x.clone()),
    })
}

fn compare(a: &Minimum, b: &Minimum) -> Ordering {
    a.value.total_cmp(&b.value).then_with(|| {
        a.x.iter()
            .zip(&b.x)
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}
