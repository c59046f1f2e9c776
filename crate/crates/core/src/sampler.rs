//! Token selection: greedy argmax, or temperature / top-k / nucleus sampling.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Greedy,
    Nucleus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub top_p: f64,
    pub top_k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            mode: SamplerMode::Nucleus,
            top_p: 0.2,
            top_k: 400,
            temperature: 0.7,
            max_new_tokens: 32,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        SamplerConfig {
            mode: SamplerMode::Greedy,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if self.top_k < 1 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Highest logit, lowest id on ties.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

/// The distribution nucleus sampling draws from, as `(token, probability)`
/// in descending probability order (ascending id among equals).
///
/// Logits are divided by the temperature, cut to the `top_k` largest, and
/// then to the shortest prefix whose cumulative probability reaches
/// `top_p`. At least one token always survives.
pub fn nucleus_distribution(logits: &[f32], sc: &SamplerConfig) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // Stable sort keeps ascending ids among equal logits.
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    order.truncate(sc.top_k.max(1));

    let scaled: Vec<f64> = order
        .iter()
        .map(|&i| logits[i] as f64 / sc.temperature)
        .collect();
    let max = scaled[0];
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = weights.iter().sum();

    let mut kept = Vec::new();
    let mut cum = 0.0;
    for (&id, w) in order.iter().zip(&weights) {
        let p = w / z;
        kept.push((id, p));
        cum += p;
        if cum >= sc.top_p {
            break;
        }
    }
    let mass: f64 = kept.iter().map(|(_, p)| p).sum();
    for (_, p) in &mut kept {
        *p /= mass;
    }
    kept
}

pub fn sample_token(logits: &[f32], sc: &SamplerConfig, rng: &mut Rng) -> usize {
    assert!(!logits.is_empty(), "sample_token needs at least one logit");
    match sc.mode {
        SamplerMode::Greedy => argmax(logits),
        SamplerMode::Nucleus => {
            let dist = nucleus_distribution(logits, sc);
            let u: f64 = rng.random();
            let mut cum = 0.0;
            for &(id, p) in &dist {
                cum += p;
                if u < cum {
                    return id;
                }
            }
            dist.last().map(|&(id, _)| id).unwrap_or(0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    /// Emitted tokens, without the terminating EOS.
    pub ids: Vec<u32>,
    /// Stopped by the length limit (or by `step_fn`) before EOS.
    pub truncated: bool,
}

/// Autoregressive loop. `step_fn` receives the tokens emitted so far and
/// returns next-token logits, or `None` when no further step is possible.
pub fn decode_sequence<F>(mut step_fn: F, eos: u32, sc: &SamplerConfig, rng: &mut Rng) -> Decoded
where
    F: FnMut(&[u32]) -> Option<Vec<f32>>,
{
    let mut ids = Vec::new();
    while ids.len() < sc.max_new_tokens {
        let Some(logits) = step_fn(&ids) else {
            return Decoded { ids, truncated: true };
        };
        let tok = sample_token(&logits, sc, rng) as u32;
        if tok == eos {
            return Decoded { ids, truncated: false };
        }
        ids.push(tok);
    }
    Decoded { ids, truncated: true }
}
