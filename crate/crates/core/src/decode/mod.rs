//! Beam search with length penalty, greedy decoding, checkpoint averaging
//! and corpus BLEU.

mod average;
mod bleu;
mod nmt;

pub use average::{average_checkpoints, CheckpointSet};
pub use bleu::{bleu4, bleu_tokens, BleuStats};
pub use nmt::{beam_search, greedy_decode, greedy_decode_batch, translate_ids, DecodeContext, NmtScorer};

use crate::corpus::vocab::EOS;
use crate::error::{bail, Result};

/// `((5 + length) / 6)^alpha`
pub fn length_penalty(length: usize, alpha: f64) -> Result<f64> {
    if length == 0 {
        bail!(Domain, "length penalty is defined for lengths >= 1");
    }
    Ok(((5.0 + length as f64) / 6.0).powf(alpha))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    pub alpha: f64,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam: 4,
            alpha: 0.6,
            max_len: 64,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            bail!(Config, "beam size must be at least 1");
        }
        if !(self.alpha >= 0.0) {
            bail!(Config, "length-penalty alpha must be non-negative");
        }
        if self.max_len == 0 {
            bail!(Config, "maximum output length must be at least 1");
        }
        Ok(())
    }
}

/// A scored output sequence. `tokens` ends with EOS iff `finished`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without the trailing EOS.
    pub fn output(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Next-token log-probabilities for a set of output prefixes.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    /// One row of `vocab_size` log-probabilities per prefix.
    fn log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;
}

fn better(a: &Hypothesis, b: &Hypothesis) -> bool {
    a.score > b.score || (a.score == b.score && a.tokens < b.tokens)
}

/// Length-normalized beam search.
///
/// Every step keeps the `beam` best expansions by log-probability; those
/// ending in EOS move to the finished pool, scored by
/// `logprob / length_penalty(len, alpha)` with EOS counted in `len`. The
/// search stops when no live prefix remains, when `max_len` is reached (live
/// prefixes then join the pool unfinished), or when no live prefix can still
/// beat the best finished score.
pub fn beam_search_with<M: StepModel>(model: &mut M, cfg: &BeamConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let v = model.vocab_size();
    let mut alive: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut pool: Vec<Hypothesis> = Vec::new();
    let max_penalty = length_penalty(cfg.max_len, cfg.alpha)?;
    for step in 1..=cfg.max_len {
        let prefixes: Vec<Vec<u32>> = alive.iter().map(|(p, _)| p.clone()).collect();
        let lps = model.log_probs(&prefixes)?;
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(alive.len() * v);
        for (bi, row) in lps.iter().enumerate() {
            for (t, &lp) in row.iter().enumerate() {
                if lp > f64::NEG_INFINITY {
                    cands.push((alive[bi].1 + lp, bi, t as u32));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| (a.1, a.2).cmp(&(b.1, b.2))));
        cands.truncate(cfg.beam);
        let mut next = Vec::with_capacity(cands.len());
        for c in &cands {
            let mut tokens = alive[c.1].0.clone();
            tokens.push(c.2);
            if c.2 == EOS {
                let score = c.0 / length_penalty(step, cfg.alpha)?;
                pool.push(Hypothesis {
                    tokens,
                    logprob: c.0,
                    score,
                    finished: true,
                });
            } else {
                next.push((tokens, c.0));
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
        if step == cfg.max_len {
            for (tokens, lp) in alive.drain(..) {
                let score = lp / length_penalty(tokens.len(), cfg.alpha)?;
                pool.push(Hypothesis {
                    tokens,
                    logprob: lp,
                    score,
                    finished: false,
                });
            }
            break;
        }
        if let Some(best) = pool.iter().map(|h| h.score).reduce(f64::max) {
            let hope = alive.iter().map(|(_, lp)| lp / max_penalty).fold(f64::NEG_INFINITY, f64::max);
            if best >= hope {
                break;
            }
        }
    }
    let mut best: Option<Hypothesis> = None;
    for h in pool {
        if best.as_ref().is_none_or(|b| better(&h, b)) {
            best = Some(h);
        }
    }
    best.ok_or_else(|| crate::Error::Numeric("beam search found no hypothesis".into()))
}

/// Argmax decoding until EOS or `max_len` tokens.
pub fn greedy_with<M: StepModel>(model: &mut M, max_len: usize) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for _ in 0..max_len {
        let lp = model.log_probs(std::slice::from_ref(&out))?;
        let next = argmax(&lp[0]);
        out.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(out)
}

/// Index of the largest value, the first one on ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best as u32
}
