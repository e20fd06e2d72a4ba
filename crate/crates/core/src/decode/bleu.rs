use std::collections::HashMap;

use crate::error::{bail, Result};

const MAX_ORDER: usize = 4;
/// Floor for an n-gram precision with no matches.
const EPSILON: f64 = 1e-9;

/// Sufficient statistics of corpus BLEU.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn add_sentence(&mut self, hyp: &[String], reference: &[String]) {
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
            self.matches[n - 1] += h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }

    /// Score in `[0, 100]`.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let log_p: f64 = (0..MAX_ORDER)
            .map(|i| {
                if self.matches[i] == 0 {
                    (EPSILON / self.totals[i].max(1) as f64).ln()
                } else {
                    (self.matches[i] as f64 / self.totals[i] as f64).ln()
                }
            })
            .sum::<f64>()
            / MAX_ORDER as f64;
        let bp = if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        100.0 * bp * log_p.exp()
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// Lowercases tokens for scoring.
pub fn bleu_tokens(sentence: &[String]) -> Vec<String> {
    sentence.iter().map(|t| t.to_lowercase()).collect()
}

/// Corpus-level BLEU-4 of lowercased token sequences. Precisions without a
/// match are floored at `1e-9 / total`; the brevity penalty is
/// `exp(1 - r/c)` when the hypotheses are not longer than the references.
pub fn bleu4(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        bail!(Data, "{} hypotheses for {} references", hypotheses.len(), references.len());
    }
    if references.is_empty() {
        bail!(Data, "no references to score against");
    }
    let mut stats = BleuStats::default();
    for (i, (h, r)) in hypotheses.iter().zip(references).enumerate() {
        if r.is_empty() {
            bail!(Data, "reference {} is empty", i + 1);
        }
        stats.add_sentence(&bleu_tokens(h), &bleu_tokens(r));
    }
    Ok(stats.score())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn toks(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| tokenize(l)).collect()
    }

    #[test]
    fn identical_is_one_hundred() {
        let r = toks(&["the cat sat on the mat", "a b c d e"]);
        assert!((bleu4(&r, &r).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn clipped_unigrams() {
        let h = toks(&["the the the the"]);
        let r = toks(&["the cat"]);
        let mut s = BleuStats::default();
        s.add_sentence(&h[0], &r[0]);
        assert_eq!(s.matches, [1, 0, 0, 0]);
        assert_eq!(s.totals, [4, 3, 2, 1]);
        // hypothesis longer than reference: no brevity penalty
        let direct = 100.0 * (((0.25f64).ln() + (1e-9f64 / 3.0).ln() + (1e-9f64 / 2.0).ln() + 1e-9f64.ln()) / 4.0).exp();
        assert!((bleu4(&h, &r).unwrap() - direct).abs() < 1e-9);
    }

    #[test]
    fn brevity_penalty() {
        let r = toks(&["a b c d e f g h"]);
        let h = toks(&["a b c d"]);
        let s = bleu4(&h, &r).unwrap();
        assert!((s - 100.0 * (1.0f64 - 2.0).exp()).abs() < 1e-9);
    }

    #[test]
    fn case_and_errors() {
        assert!((bleu4(&toks(&["The Cat sat down"]), &toks(&["the cat SAT down"])).unwrap() - 100.0).abs() < 1e-9);
        assert!(bleu4(&toks(&["a"]), &toks(&[""])).is_err());
        assert!(bleu4(&toks(&["a"]), &toks(&["a", "b"])).is_err());
        assert_eq!(bleu4(&toks(&[""]), &toks(&["a b"])).unwrap(), 0.0);
    }
}
