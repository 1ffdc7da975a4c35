//! Per-token loss metrics: language-model loss, unigram-normalized loss
//! `L_u`, and bits per character. All logs are natural; bits appear only at
//! the BPC boundary.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One predicted token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenEvent {
    pub id: u32,
    /// Natural-log model probability of the token given its context.
    pub logprob: f64,
    /// Characters this token covers.
    pub char_len: u32,
}

impl TokenEvent {
    pub fn validate(&self) -> Result<()> {
        if !(self.logprob <= 0.0) {
            return Err(Error::invalid(format!(
                "token {}: logprob must be <= 0, got {}",
                self.id, self.logprob
            )));
        }
        if self.char_len == 0 {
            return Err(Error::invalid(format!("token {}: char_len must be >= 1", self.id)));
        }
        Ok(())
    }
}

/// Corpus unigram probabilities over a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct UnigramTable {
    probs: Vec<f64>,
}

impl UnigramTable {
    /// Builds from explicit probabilities, which must sum to 1 within 1e-9.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("unigram table".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("unigram probabilities must lie in [0, 1]"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("unigram probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    /// Probability of `id`, or `None` when it is outside the support.
    pub fn prob(&self, id: u32) -> Option<f64> {
        self.probs.get(id as usize).copied().filter(|&p| p > 0.0)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Empirical token frequencies with additive smoothing of strength
/// `smoothing` (1 is add-one) over all `vocab_size` ids.
pub fn build_unigram_table(tokens: &[u32], vocab_size: usize, smoothing: f64) -> Result<UnigramTable> {
    if tokens.is_empty() {
        return Err(Error::Empty("token sequence".into()));
    }
    if vocab_size == 0 {
        return Err(Error::invalid("vocabulary size must be positive"));
    }
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(Error::invalid("smoothing must be non-negative"));
    }
    let mut counts = vec![0u64; vocab_size];
    for &t in tokens {
        let slot = counts.get_mut(t as usize).ok_or(Error::TokenIndex { id: t, vocab_size })?;
        *slot += 1;
    }
    let total = tokens.len() as f64 + smoothing * vocab_size as f64;
    let probs = counts.iter().map(|&c| (c as f64 + smoothing) / total).collect();
    Ok(UnigramTable { probs })
}

fn non_empty(events: &[TokenEvent]) -> Result<()> {
    if events.is_empty() {
        Err(Error::Empty("token event stream".into()))
    } else {
        Ok(())
    }
}

/// Mean negative log-likelihood per token (nats).
pub fn lm_loss(events: &[TokenEvent]) -> Result<f64> {
    non_empty(events)?;
    Ok(-events.iter().map(|e| e.logprob).sum::<f64>() / events.len() as f64)
}

/// `-(1/T) Σ [log p(w_i | context) - log p(w_i)]` in nats; may be negative.
pub fn unigram_loss(events: &[TokenEvent], table: &UnigramTable) -> Result<f64> {
    non_empty(events)?;
    let mut total = 0.0;
    for e in events {
        let p = table.prob(e.id).ok_or(Error::MissingToken { id: e.id })?;
        total += e.logprob - p.ln();
    }
    Ok(-total / events.len() as f64)
}

/// Bits per character: total negative log-likelihood over total characters.
pub fn bpc(events: &[TokenEvent]) -> Result<f64> {
    non_empty(events)?;
    let chars: u64 = events.iter().map(|e| e.char_len as u64).sum();
    if chars == 0 {
        return Err(Error::invalid("token events cover zero characters"));
    }
    let nats: f64 = -events.iter().map(|e| e.logprob).sum::<f64>();
    Ok(nats / (std::f64::consts::LN_2 * chars as f64))
}

/// Reads JSON-lines token events (`{"id":…,"logprob":…,"char_len":…}`),
/// skipping blank lines.
pub fn read_events<R: BufRead>(reader: R) -> Result<Vec<TokenEvent>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("<events line {}>", n + 1), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: TokenEvent = serde_json::from_str(&line)?;
        ev.validate()?;
        out.push(ev);
    }
    Ok(out)
}
