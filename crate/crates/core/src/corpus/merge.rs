use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParallelCorpus, Split};
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MergeOptions {
    /// Upper bound on how many times a corpus's size it may contribute.
    /// `None` equalizes every corpus to the largest one.
    pub ratio_cap: Option<f64>,
}

fn joined(corpora: &[ParallelCorpus], field: impl Fn(&ParallelCorpus) -> &str) -> String {
    let mut parts: Vec<&str> = Vec::new();
    for c in corpora {
        let f = field(c);
        if !parts.contains(&f) {
            parts.push(f);
        }
    }
    parts.join("+")
}

fn merged_meta(corpora: &[ParallelCorpus]) -> ParallelCorpus {
    ParallelCorpus {
        name: joined(corpora, |c| &c.name),
        src_lang: joined(corpora, |c| &c.src_lang),
        tgt_lang: joined(corpora, |c| &c.tgt_lang),
        domain: joined(corpora, |c| &c.domain),
        split: Split::Train,
        pairs: Vec::new(),
        groups: None,
    }
}

fn check_inputs(corpora: &[ParallelCorpus]) -> Result<bool> {
    if corpora.is_empty() {
        bail!(Data, "nothing to merge");
    }
    for c in corpora {
        if c.is_empty() {
            bail!(Data, "corpus `{}` is empty", c.name);
        }
        if c.split != Split::Train {
            bail!(Data, "corpus `{}` is a {} split, only training data is merged", c.name, c.split);
        }
        c.validate()?;
    }
    let labeled = corpora.iter().filter(|c| c.groups.is_some()).count();
    if labeled != 0 && labeled != corpora.len() {
        bail!(Data, "either all or none of the merged corpora must carry group ids");
    }
    Ok(labeled != 0)
}

/// Equalizes corpus sizes by repetition and shuffles the union.
///
/// With `M` the largest size, a corpus of `n` pairs contributes
/// `floor(M/n)` full copies followed by its first `M mod n` pairs (`M` is
/// lowered to `floor(cap·n)` when a ratio cap is set).
pub fn oversample_merge(corpora: &[ParallelCorpus], seed: u64, opts: MergeOptions) -> Result<ParallelCorpus> {
    let labeled = check_inputs(corpora)?;
    let max = corpora.iter().map(ParallelCorpus::len).max().unwrap_or(0);
    let mut items = Vec::new();
    for c in corpora {
        let n = c.len();
        let target = match opts.ratio_cap {
            Some(r) => max.min(((r * n as f64).floor() as usize).max(n)),
            None => max,
        };
        for k in 0..target {
            let i = k % n;
            items.push((c.pairs[i].clone(), c.groups.as_ref().map(|g| g[i])));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    let mut out = merged_meta(corpora);
    if labeled {
        out.groups = Some(items.iter().map(|(_, g)| g.unwrap()).collect());
    }
    out.pairs = items.into_iter().map(|(p, _)| p).collect();
    Ok(out)
}

/// Plain concatenation in input order.
pub fn concat(corpora: &[ParallelCorpus]) -> Result<ParallelCorpus> {
    let labeled = check_inputs(corpora)?;
    let mut out = merged_meta(corpora);
    out.pairs = corpora.iter().flat_map(|c| c.pairs.iter().cloned()).collect();
    if labeled {
        out.groups = Some(corpora.iter().flat_map(|c| c.groups.clone().unwrap()).collect());
    }
    Ok(out)
}
