//! Synthetic experiment grids: records generated from a known parametric loss
//! and fertility fit, used to check that the fitters recover what was planted.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::fertility::FertilityFit;
use crate::isoflops::{AllocationLaws, BudgetOptimum};
use crate::parametric::ParametricLoss;
use crate::scale::RunRecord;

/// One model size of the ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderRung {
    pub n_nv: f64,
    pub embed_dim: u32,
    /// Training characters of the longest run at this size.
    pub chars: f64,
}

/// Model sizes, widths and character budgets of the reference experiments.
pub const DEFAULT_LADDER: [LadderRung; 6] = [
    LadderRung { n_nv: 33e6, embed_dim: 512, chars: 4.3e9 },
    LadderRung { n_nv: 85e6, embed_dim: 768, chars: 11.1e9 },
    LadderRung { n_nv: 151e6, embed_dim: 768, chars: 19.6e9 },
    LadderRung { n_nv: 302e6, embed_dim: 1024, chars: 43.0e9 },
    LadderRung { n_nv: 631e6, embed_dim: 1536, chars: 101.6e9 },
    LadderRung { n_nv: 1130e6, embed_dim: 2048, chars: 201.3e9 },
];

pub const DEFAULT_VOCAB_SIZES: [f64; 10] = [
    4096.0, 6144.0, 8192.0, 10240.0, 16384.0, 24576.0, 32768.0, 48128.0, 64512.0, 96256.0,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthPlan {
    pub loss: ParametricLoss,
    pub fertility: FertilityFit,
    pub ladder: Vec<LadderRung>,
    pub vocab_sizes: Vec<f64>,
    /// Checkpoints per run, geometrically spaced in characters.
    pub checkpoints: usize,
    /// Ratio between the last and first checkpoint's characters.
    pub span: f64,
    /// Multiplier applied to every rung's character budget.
    pub char_scale: f64,
    /// Standard deviation of additive Gaussian noise on `loss_u`.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthPlan {
    fn default() -> Self {
        Self {
            loss: ParametricLoss::paper_2024(),
            fertility: FertilityFit::paper_2024(),
            ladder: DEFAULT_LADDER.to_vec(),
            vocab_sizes: DEFAULT_VOCAB_SIZES.to_vec(),
            checkpoints: 16,
            span: 100.0,
            char_scale: 1.0,
            noise: 0.0,
            seed: 0,
        }
    }
}

fn strictly_increasing(xs: impl Iterator<Item = f64>) -> bool {
    let v: Vec<f64> = xs.collect();
    v.windows(2).all(|w| w[0] < w[1])
}

impl SynthPlan {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.fertility.validate()?;
        if self.ladder.is_empty() || self.vocab_sizes.is_empty() {
            return Err(Error::invalid("ladder and vocabulary list must be non-empty"));
        }
        for r in &self.ladder {
            ensure_positive("ladder n_nv", r.n_nv)?;
            ensure_positive("ladder chars", r.chars)?;
            if r.embed_dim == 0 {
                return Err(Error::invalid("ladder embed_dim must be positive"));
            }
        }
        if !strictly_increasing(self.ladder.iter().map(|r| r.n_nv)) {
            return Err(Error::invalid("ladder must be sorted by n_nv"));
        }
        if !self.vocab_sizes.iter().all(|&v| v >= 2.0) || !strictly_increasing(self.vocab_sizes.iter().copied()) {
            return Err(Error::invalid("vocabulary sizes must be sorted and at least 2"));
        }
        if self.checkpoints == 0 {
            return Err(Error::invalid("checkpoints must be positive"));
        }
        if !(self.span >= 1.0) {
            return Err(Error::invalid("span must be at least 1"));
        }
        ensure_positive("char_scale", self.char_scale)?;
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be non-negative"));
        }
        Ok(())
    }

    /// Reads a plan from JSON (`.json`) or TOML (anything else).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)?
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Characters at checkpoint `i` of a rung.
    fn chars_at(&self, rung: &LadderRung, i: usize) -> f64 {
        let top = rung.chars * self.char_scale;
        if self.checkpoints == 1 {
            return top;
        }
        let frac = i as f64 / (self.checkpoints - 1) as f64;
        top * self.span.powf(frac - 1.0)
    }
}

/// Entropy in nats of a Zipf(1) distribution over `v` ranks.
fn zipf_entropy(v: usize) -> f64 {
    let harmonic: f64 = (1..=v).map(|k| 1.0 / k as f64).sum();
    let weighted: f64 = (1..=v).map(|k| (k as f64).ln() / k as f64).sum();
    harmonic.ln() + weighted / harmonic
}

/// Generates one record per (rung, vocabulary, checkpoint).
///
/// `loss_u` is the planted loss plus noise; `lm_loss` adds the entropy of a
/// Zipf unigram distribution over the vocabulary, so `loss_u <= lm_loss`.
/// Each rung draws its noise from its own stream, so output is identical for
/// a given seed regardless of thread count.
pub fn generate(plan: &SynthPlan) -> Result<Vec<RunRecord>> {
    plan.validate()?;
    let normal = Normal::new(0.0, plan.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let entropies: HashMap<u64, f64> = plan
        .vocab_sizes
        .par_iter()
        .map(|&v| (v.to_bits(), zipf_entropy(v.round() as usize)))
        .collect();
    let per_rung: Vec<Vec<RunRecord>> = plan
        .ladder
        .par_iter()
        .enumerate()
        .map(|(idx, rung)| {
            let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
            rng.set_stream(idx as u64);
            let d = rung.embed_dim as f64;
            let mut out = Vec::with_capacity(plan.vocab_sizes.len() * plan.checkpoints);
            for &v in &plan.vocab_sizes {
                let f = plan.fertility.eval(v);
                for i in 0..plan.checkpoints {
                    let h = plan.chars_at(rung, i);
                    let tokens = h * f;
                    let noise = if plan.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                    let loss_u = plan.loss.loss_from_tokens(rung.n_nv, v * d, tokens) + noise;
                    out.push(RunRecord {
                        run_id: format!("n{:.0}M-v{}-c{:02}", rung.n_nv / 1e6, v, i),
                        n_nv: rung.n_nv,
                        vocab_size: v,
                        embed_dim: rung.embed_dim,
                        chars_seen: h,
                        tokens_seen: tokens,
                        flops: 6.0 * (rung.n_nv + v * d) * tokens,
                        lm_loss: loss_u + entropies[&v.to_bits()],
                        loss_u,
                        synthetic: false,
                    });
                }
            }
            out
        })
        .collect();
    Ok(per_rung.into_iter().flatten().collect())
}

/// Budget optima lying exactly on `laws`, optionally perturbed by
/// multiplicative log-normal noise of log-scale `sigma` on each quantity.
pub fn plant_optima(laws: &AllocationLaws, budgets: &[f64], sigma: f64, seed: u64) -> Result<Vec<BudgetOptimum>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("noise must be non-negative"));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = move || if sigma > 0.0 { normal.sample(&mut rng).exp() } else { 1.0 };
    budgets
        .iter()
        .map(|&c| {
            ensure_positive("budget", c)?;
            Ok(BudgetOptimum {
                flops: c,
                n_nv: laws.nv.eval(c) * jitter(),
                n_v: laws.v.eval(c) * jitter(),
                h: laws.h.eval(c) * jitter(),
                loss_u: 0.0,
                vocab_size: 0.0,
                embed_dim: 0,
                tied: false,
            })
        })
        .collect()
}
