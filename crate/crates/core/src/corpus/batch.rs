use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocab, BOS, EOS, PAD};
use super::ParallelCorpus;
use crate::error::{bail, Result};
use crate::heads::GroupId;
use crate::model::IdMatrix;

/// One encoded sentence pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
    pub group: Option<GroupId>,
}

impl Example {
    /// Padded positions this pair occupies: source plus shifted target.
    pub fn cost(&self) -> usize {
        self.src.len() + self.tgt.len() + 1
    }
}

/// Encodes every pair of `corpus`, carrying its group ids along.
pub fn encode_corpus(corpus: &ParallelCorpus, vocab: &Vocab) -> Vec<Example> {
    corpus
        .pairs
        .iter()
        .enumerate()
        .map(|(i, (s, t))| Example {
            src: vocab.encode(s),
            tgt: vocab.encode(t),
            group: corpus.groups.as_ref().map(|g| g[i]),
        })
        .collect()
}

/// Padded source, BOS-prefixed target input, EOS-suffixed target output and
/// per-sentence group ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub src: IdMatrix,
    pub tgt_in: IdMatrix,
    pub tgt_out: IdMatrix,
    pub groups: Option<Vec<GroupId>>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Result<Self> {
        if examples.is_empty() {
            bail!(Batch, "a batch needs at least one sentence");
        }
        let labeled = examples.iter().filter(|e| e.group.is_some()).count();
        if labeled != 0 && labeled != examples.len() {
            bail!(Batch, "group ids must be present for every sentence or none");
        }
        let src: Vec<Vec<u32>> = examples.iter().map(|e| e.src.clone()).collect();
        let tin: Vec<Vec<u32>> = examples
            .iter()
            .map(|e| std::iter::once(BOS).chain(e.tgt.iter().copied()).collect())
            .collect();
        let tout: Vec<Vec<u32>> = examples
            .iter()
            .map(|e| e.tgt.iter().copied().chain(std::iter::once(EOS)).collect())
            .collect();
        Ok(Self {
            src: IdMatrix::from_rows(&src, PAD),
            tgt_in: IdMatrix::from_rows(&tin, PAD),
            tgt_out: IdMatrix::from_rows(&tout, PAD),
            groups: (labeled != 0).then(|| examples.iter().map(|e| e.group.unwrap()).collect()),
        })
    }

    pub fn len(&self) -> usize {
        self.src.rows
    }

    pub fn is_empty(&self) -> bool {
        self.src.rows == 0
    }

    /// Padded size, the quantity bounded by the token cap.
    pub fn token_count(&self) -> usize {
        self.src.rows * (self.src.cols + self.tgt_in.cols)
    }

    /// Target tokens excluding the appended EOS.
    pub fn target_tokens(&self) -> usize {
        self.tgt_out.valid_count() - self.tgt_out.rows
    }
}

/// Groups examples of similar length into batches of at most `max_tokens`
/// padded positions and returns them in a seeded order.
pub fn make_batches(examples: &[Example], max_tokens: usize, seed: u64) -> Result<Vec<Batch>> {
    if let Some((i, e)) = examples.iter().enumerate().find(|(_, e)| e.cost() > max_tokens) {
        bail!(
            Length,
            "sentence {} needs {} positions, over the batch cap of {max_tokens}",
            i + 1,
            e.cost()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| (examples[i].src.len(), examples[i].tgt.len()));
    let mut batches = Vec::new();
    let mut current: Vec<&Example> = Vec::new();
    let (mut max_src, mut max_tgt) = (0, 0);
    for i in order {
        let e = &examples[i];
        let (s, t) = (max_src.max(e.src.len()), max_tgt.max(e.tgt.len() + 1));
        if !current.is_empty() && (current.len() + 1) * (s + t) > max_tokens {
            batches.push(Batch::from_examples(&current)?);
            current.clear();
            max_src = e.src.len();
            max_tgt = e.tgt.len() + 1;
        } else {
            max_src = s;
            max_tgt = t;
        }
        current.push(e);
    }
    if !current.is_empty() {
        batches.push(Batch::from_examples(&current)?);
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}
