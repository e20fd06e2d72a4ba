use super::{argmax, beam_search_with, greedy_with, BeamConfig, Hypothesis, StepModel};
use crate::corpus::vocab::{BOS, EOS, PAD, RESERVED_COUNT};
use crate::error::{bail, Result};
use crate::heads::GroupId;
use crate::model::{Bound, Dropout, IdMatrix, ModelParams};
use crate::tensor::{Float, Tape, Var};

/// What a model conditions on besides the source words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DecodeContext {
    None,
    /// Tag token ids prepended to the source.
    Tags(Vec<u32>),
    /// Corpus group for the domain-aware heads.
    Group(GroupId),
}

fn check_context<T: Float>(params: &ModelParams<T>, context: &DecodeContext) -> Result<Option<GroupId>> {
    let cfg = &params.config;
    match context {
        DecodeContext::Group(g) => {
            if !cfg.head_kind.needs_group() {
                bail!(Context, "the {} head takes no group id", cfg.head_kind);
            }
            if g.get() == 0 || g.get() > cfg.n_groups {
                bail!(Context, "group {g} outside 1..={}", cfg.n_groups);
            }
            Ok(Some(*g))
        }
        _ if cfg.head_kind.needs_group() => {
            bail!(Context, "the {} head needs a group id to decode", cfg.head_kind)
        }
        DecodeContext::Tags(tags) => {
            if let Some(t) = tags.iter().find(|&&t| (t as usize) < RESERVED_COUNT || t as usize >= cfg.vocab_size) {
                bail!(Context, "token id {t} cannot be a tag");
            }
            Ok(None)
        }
        DecodeContext::None => Ok(None),
    }
}

fn with_tags(src: &[u32], context: &DecodeContext) -> Vec<u32> {
    match context {
        DecodeContext::Tags(tags) => tags.iter().chain(src).copied().collect(),
        _ => src.to_vec(),
    }
}

fn log_softmax<T: Float>(row: &[T]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.as_f64()));
    let lse = row.iter().map(|&x| (x.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&x| x.as_f64() - lse).collect()
}

/// Scores output prefixes for one source sentence; the encoder runs once.
pub struct NmtScorer<'p, T: Float> {
    params: &'p ModelParams<T>,
    tape: Tape<T>,
    vars: Vec<Var>,
    base: usize,
    src: Vec<u32>,
    enc: Vec<T>,
    group: Option<GroupId>,
}

impl<'p, T: Float> NmtScorer<'p, T> {
    pub fn new(params: &'p ModelParams<T>, src: &[u32], context: &DecodeContext) -> Result<Self> {
        let group = check_context(params, context)?;
        let src = with_tags(src, context);
        if src.is_empty() {
            bail!(Data, "cannot translate an empty sentence");
        }
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let base = tape.len();
        let m = IdMatrix::from_rows(std::slice::from_ref(&src), PAD);
        let enc = bound.encode(&mut tape, &m, &mut Dropout::off())?;
        let enc = tape.value(enc).to_vec();
        let vars = bound.vars;
        tape.truncate(base);
        Ok(Self {
            params,
            tape,
            vars,
            base,
            src,
            enc,
            group,
        })
    }
}

impl<T: Float> StepModel for NmtScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    fn log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let n = prefixes.len();
        let d = self.params.config.d_model;
        let tape = &mut self.tape;
        tape.truncate(self.base);
        let bound = Bound {
            params: self.params,
            vars: self.vars.clone(),
        };
        let srcs = vec![self.src.clone(); n];
        let src = IdMatrix::from_rows(&srcs, PAD);
        let enc = tape.input(&[n * self.src.len(), d], self.enc.repeat(n), false)?;
        let rows: Vec<Vec<u32>> = prefixes
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect())
            .collect();
        let tgt = IdMatrix::from_rows(&rows, PAD);
        let states = bound.decode_states(tape, enc, &src, &tgt, &mut Dropout::off())?;
        let last: Vec<usize> = rows.iter().enumerate().map(|(r, p)| r * tgt.cols + p.len() - 1).collect();
        let picked = tape.select_rows(states, &last)?;
        let groups = self.group.map(|g| vec![g; n]);
        let logits = bound.logits(tape, picked, groups.as_deref())?;
        let v = self.params.config.vocab_size;
        Ok(tape.value(logits).chunks(v).map(log_softmax).collect())
    }
}

fn effective_len<T: Float>(params: &ModelParams<T>, max_len: usize) -> usize {
    max_len.min(params.config.max_len)
}

/// Best hypothesis for `src` under length-normalized beam search.
pub fn beam_search<T: Float>(
    params: &ModelParams<T>,
    src: &[u32],
    context: &DecodeContext,
    cfg: &BeamConfig,
) -> Result<Hypothesis> {
    let mut scorer = NmtScorer::new(params, src, context)?;
    let cfg = BeamConfig {
        max_len: effective_len(params, cfg.max_len),
        ..*cfg
    };
    beam_search_with(&mut scorer, &cfg)
}

/// Beam-search output without the trailing EOS.
pub fn translate_ids<T: Float>(
    params: &ModelParams<T>,
    src: &[u32],
    context: &DecodeContext,
    cfg: &BeamConfig,
) -> Result<Vec<u32>> {
    Ok(beam_search(params, src, context, cfg)?.output().to_vec())
}

/// Argmax decoding of one sentence; the result ends with EOS unless
/// `max_len` was reached first.
pub fn greedy_decode<T: Float>(
    params: &ModelParams<T>,
    src: &[u32],
    context: &DecodeContext,
    max_len: usize,
) -> Result<Vec<u32>> {
    let mut scorer = NmtScorer::new(params, src, context)?;
    greedy_with(&mut scorer, effective_len(params, max_len))
}

/// Argmax decoding of many sentences in lockstep. `contexts` holds one
/// context per sentence. Outputs exclude EOS.
pub fn greedy_decode_batch<T: Float>(
    params: &ModelParams<T>,
    srcs: &[Vec<u32>],
    contexts: &[DecodeContext],
    max_len: usize,
) -> Result<Vec<Vec<u32>>> {
    if srcs.len() != contexts.len() {
        bail!(Context, "{} sentences but {} contexts", srcs.len(), contexts.len());
    }
    if srcs.is_empty() {
        return Ok(Vec::new());
    }
    let groups: Vec<Option<GroupId>> = contexts.iter().map(|c| check_context(params, c)).collect::<Result<_>>()?;
    let groups: Option<Vec<GroupId>> = groups.into_iter().collect();
    let rows: Vec<Vec<u32>> = srcs.iter().zip(contexts).map(|(s, c)| with_tags(s, c)).collect();
    if rows.iter().any(Vec::is_empty) {
        bail!(Data, "cannot translate an empty sentence");
    }
    let n = rows.len();
    let max_len = effective_len(params, max_len);
    let src = IdMatrix::from_rows(&rows, PAD);
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let enc = bound.encode(&mut tape, &src, &mut Dropout::off())?;
    let base = tape.len();
    let mut out: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut done = vec![false; n];
    let v = params.config.vocab_size;
    for step in 0..max_len {
        tape.truncate(base);
        let prefixes: Vec<Vec<u32>> = out
            .iter()
            .map(|o| std::iter::once(BOS).chain(o.iter().copied()).collect())
            .collect();
        let tgt = IdMatrix::from_rows(&prefixes, PAD);
        let states = bound.decode_states(&mut tape, enc, &src, &tgt, &mut Dropout::off())?;
        let last: Vec<usize> = (0..n).map(|r| r * tgt.cols + step).collect();
        let picked = tape.select_rows(states, &last)?;
        let logits = bound.logits(&mut tape, picked, groups.as_deref())?;
        for (r, row) in tape.value(logits).chunks(v).enumerate() {
            if !done[r] {
                let t = argmax(row);
                if t == EOS {
                    done[r] = true;
                } else {
                    out[r].push(t);
                }
            } else {
                out[r].push(PAD);
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    for o in &mut out {
        while o.last() == Some(&PAD) {
            o.pop();
        }
    }
    Ok(out)
}
