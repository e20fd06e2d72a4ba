use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::time::Instant;

use super::train::{train_until_converged, StageOptions, StageOutcome, StopReason, Trainer};
use super::{CorpusGroup, ExperimentPlan, Handoff, PrepConfig, StrategyKind};
use crate::corpus::tags::remove_tag_tokens;
use crate::corpus::{
    build_vocab, concat, detokenize, inject_tags, learn_bpe, oversample_merge, random_vocab_map, remap_vocab, Example,
    MergeOptions, ParallelCorpus, Sentence, SubwordModel, TagScheme, Vocab,
};
use crate::decode::{average_checkpoints, bleu4, CheckpointSet, greedy_decode_batch, translate_ids, BeamConfig, DecodeContext};
use crate::error::{bail, Result};
use crate::heads::{GroupId, HeadKind};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Float;

/// Decorrelated seed for one named use of a run seed (FNV-1a over the label).
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// How a model learns which corpus a sentence comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Conditioning {
    Plain,
    /// Target-language and domain tokens prefixed to the source.
    Tags,
    /// Group ids fed to a domain-aware head.
    Groups,
}

impl Conditioning {
    pub fn of(strategy: StrategyKind) -> Self {
        if strategy.uses_tags() {
            Self::Tags
        } else if strategy.uses_groups() {
            Self::Groups
        } else {
            Self::Plain
        }
    }
}

/// Segmentation, vocabulary and tag scheme a model was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub bpe: SubwordModel,
    pub vocab: Vocab,
    pub scheme: TagScheme,
}

/// Learns subwords on the training sides of `corpora` and a vocabulary over
/// the segmented text, tag tokens included.
pub fn prepare(corpora: &[ParallelCorpus], scheme: &TagScheme, prep: &PrepConfig) -> Result<Prepared> {
    let tags = scheme.tags();
    let bpe = learn_bpe(corpora, prep.bpe_merges, &tags);
    let segmented: Vec<ParallelCorpus> = corpora.iter().map(|c| bpe.apply_corpus(c)).collect();
    let vocab = build_vocab(&segmented, &tags, prep.vocab_cap)?;
    Ok(Prepared {
        bpe,
        vocab,
        scheme: scheme.clone(),
    })
}

/// A second stage can only start from the first stage's embeddings when the
/// vocabularies agree token for token, or when the child vocabulary was
/// mapped into the parent id space.
pub fn check_vocab_handoff(parent: &Vocab, child: &Vocab, mapped: bool) -> Result<()> {
    if parent.len() != child.len() {
        bail!(Vocab, "parent vocabulary has {} entries, child {}", parent.len(), child.len());
    }
    if !mapped && parent.tokens() != child.tokens() {
        let at = parent.tokens().iter().zip(child.tokens()).position(|(a, b)| a != b).unwrap_or(0);
        bail!(
            Vocab,
            "vocabularies differ from id {at} (`{}` vs `{}`); a random vocabulary map is required",
            parent.tokens()[at],
            child.tokens()[at]
        );
    }
    Ok(())
}

/// Turns output ids back into words: subwords are joined and tags dropped.
pub struct Detokenizer<'a> {
    pub vocab: &'a Vocab,
    pub bpe: &'a SubwordModel,
    pub scheme: &'a TagScheme,
}

impl Detokenizer<'_> {
    pub fn words(&self, ids: &[u32]) -> Sentence {
        remove_tag_tokens(&detokenize(self.bpe, &self.vocab.decode(ids)), self.scheme)
    }
}

/// What the decoder is given for sentences of group `group` translated into
/// `tgt_lang`.
pub fn decode_context(
    prepared: &Prepared,
    conditioning: Conditioning,
    group: GroupId,
    tgt_lang: &str,
) -> Result<DecodeContext> {
    Ok(match conditioning {
        Conditioning::Plain => DecodeContext::None,
        Conditioning::Groups => DecodeContext::Group(group),
        Conditioning::Tags => {
            let ids = prepared
                .scheme
                .prefix(group.get(), tgt_lang)?
                .iter()
                .map(|t| {
                    prepared
                        .vocab
                        .id(t)
                        .ok_or_else(|| crate::Error::Scheme(format!("tag `{t}` is not in the vocabulary")))
                })
                .collect::<Result<_>>()?;
            DecodeContext::Tags(ids)
        }
    })
}

/// Encoded sources with their decoding contexts and word-level references.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalSet {
    pub srcs: Vec<Vec<u32>>,
    pub contexts: Vec<DecodeContext>,
    pub refs: Vec<Sentence>,
}

impl EvalSet {
    /// The first `limit` pairs of `corpus`, conditioned as group `group`.
    pub fn build(
        corpus: &ParallelCorpus,
        group: GroupId,
        limit: Option<usize>,
        prepared: &Prepared,
        conditioning: Conditioning,
    ) -> Result<Self> {
        let context = decode_context(prepared, conditioning, group, &corpus.tgt_lang)?;
        let n = limit.unwrap_or(corpus.len()).min(corpus.len());
        let mut set = Self::default();
        for (s, t) in &corpus.pairs[..n] {
            let seg = crate::corpus::apply_bpe(&prepared.bpe, s);
            set.srcs.push(prepared.vocab.encode(&seg));
            set.contexts.push(context.clone());
            set.refs.push(t.clone());
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.srcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.srcs.is_empty()
    }

    pub fn extend(&mut self, other: EvalSet) {
        self.srcs.extend(other.srcs);
        self.contexts.extend(other.contexts);
        self.refs.extend(other.refs);
    }

    /// Greedy translations, decoded in length-sorted chunks.
    pub fn greedy<T: Float>(&self, params: &ModelParams<T>, chunk: usize) -> Result<Vec<Vec<u32>>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| self.srcs[i].len());
        let mut out = vec![Vec::new(); self.len()];
        for part in order.chunks(chunk.max(1)) {
            let srcs: Vec<Vec<u32>> = part.iter().map(|&i| self.srcs[i].clone()).collect();
            let ctx: Vec<DecodeContext> = part.iter().map(|&i| self.contexts[i].clone()).collect();
            let longest = srcs.iter().map(Vec::len).max().unwrap_or(0);
            let hyps = greedy_decode_batch(params, &srcs, &ctx, output_cap(longest))?;
            for (&i, h) in part.iter().zip(hyps) {
                out[i] = h;
            }
        }
        Ok(out)
    }

    /// Beam-search translations.
    pub fn beam<T: Float>(&self, params: &ModelParams<T>, cfg: &BeamConfig) -> Result<Vec<Vec<u32>>> {
        self.srcs
            .iter()
            .zip(&self.contexts)
            .map(|(s, c)| {
                let cfg = BeamConfig {
                    max_len: cfg.max_len.min(output_cap(s.len())),
                    ..*cfg
                };
                translate_ids(params, s, c, &cfg)
            })
            .collect()
    }

    /// Sources of `sentences`, all decoded with `context`; no references.
    pub fn from_sources(sentences: &[Sentence], context: &DecodeContext, prepared: &Prepared) -> Self {
        let mut set = Self::default();
        for s in sentences {
            set.srcs.push(prepared.vocab.encode(&crate::corpus::apply_bpe(&prepared.bpe, s)));
            set.contexts.push(context.clone());
        }
        set
    }

    pub fn bleu(&self, hyps: &[Vec<u32>], detok: &Detokenizer) -> Result<f64> {
        let words: Vec<Sentence> = hyps.iter().map(|h| detok.words(h)).collect();
        bleu4(&words, &self.refs)
    }
}

/// Output length allowance for a source of `len` tokens.
fn output_cap(len: usize) -> usize {
    2 * len + 10
}

/// One training stage of a run.
#[derive(Clone, Debug)]
pub struct StageRecord<T: Float = f32> {
    pub label: String,
    pub config: ModelConfig,
    /// Weights before the first update.
    pub initial: ModelParams<T>,
    /// Weights handed to the next stage or used for testing.
    pub handoff: ModelParams<T>,
    pub outcome: StageOutcome<T>,
    pub train_pairs: usize,
    /// Distinct group ids in the training data; empty when none are attached.
    pub train_groups: Vec<GroupId>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestScore {
    pub corpus: String,
    pub group: GroupId,
    pub bleu: f64,
    /// Detokenized beam outputs, aligned with `references`.
    pub hypotheses: Vec<Sentence>,
    pub references: Vec<Sentence>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome<T: Float = f32> {
    pub strategy: StrategyKind,
    pub conditioning: Conditioning,
    /// Preprocessing of the final stage.
    pub prepared: Prepared,
    pub stages: Vec<StageRecord<T>>,
    /// Average of the final stage's last checkpoints.
    pub model: ModelParams<T>,
    pub scores: Vec<TestScore>,
}

impl<T: Float> RunOutcome<T> {
    pub fn score(&self, corpus: &str) -> Option<f64> {
        self.scores.iter().find(|s| s.corpus == corpus).map(|s| s.bleu)
    }
}

/// Weights a second stage starts from, with the schedule step they reached.
#[derive(Clone, Debug)]
pub struct ParentModel<T: Float = f32> {
    pub params: ModelParams<T>,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Merge {
    Concat,
    Oversample,
}

#[allow(clippy::too_many_arguments)]
fn spec<'a>(
    label: &'static str,
    members: &[&'a CorpusGroup],
    merge: Merge,
    conditioning: Conditioning,
    head: HeadKind,
    n_groups: usize,
    dev: &[&'a CorpusGroup],
) -> StageSpec<'a> {
    StageSpec {
        label,
        members: members.to_vec(),
        merge,
        conditioning,
        head,
        n_groups,
        dev: dev.to_vec(),
    }
}

struct StageSpec<'a> {
    label: &'static str,
    members: Vec<&'a CorpusGroup>,
    merge: Merge,
    conditioning: Conditioning,
    head: HeadKind,
    n_groups: usize,
    dev: Vec<&'a CorpusGroup>,
}

#[derive(Clone)]
struct Finished<T: Float> {
    record: StageRecord<T>,
    trainer: Trainer<T>,
}

/// Executes plans; first stages shared between strategies (the tagged parent
/// of fine tuning and mixed fine tuning) are trained once per runner.
pub struct Runner<T: Float = f32> {
    cache: HashMap<u64, Finished<T>>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

impl<T: Float> Default for Runner<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Runner<T> {
    pub fn new() -> Self {
        Self {
            cache: HashMap::new(),
            verbose: false,
        }
    }

    fn log(&self, msg: &str) {
        if self.verbose {
            eprintln!("{msg}");
        }
    }

    /// Trains every stage of `plan.strategy` and scores each test set with
    /// the averaged final model.
    pub fn run(&mut self, plan: &ExperimentPlan) -> Result<RunOutcome<T>> {
        self.run_with(plan, None, None)
    }

    /// Like [`Runner::run`], with preprocessing given instead of learned and,
    /// for two-stage strategies, the first stage replaced by `parent`.
    pub fn run_with(
        &mut self,
        plan: &ExperimentPlan,
        prepared: Option<Prepared>,
        parent: Option<ParentModel<T>>,
    ) -> Result<RunOutcome<T>> {
        plan.validate()?;
        let d = plan.n_groups();
        let all: Vec<&CorpusGroup> = plan.groups().collect();
        let parents: Vec<&CorpusGroup> = plan.parents.iter().collect();
        let child = vec![&plan.child];
        let shared = match prepared {
            Some(p) => {
                if p.scheme != plan.scheme {
                    bail!(Scheme, "prepared tag scheme does not match the plan's corpora");
                }
                p
            }
            None => {
                let train: Vec<ParallelCorpus> = all.iter().map(|g| g.train.clone()).collect();
                prepare(&train, &plan.scheme, &plan.prep)?
            }
        };
        if let Some(parent) = parent {
            return self.adapt(plan, shared, parent);
        }
        use Conditioning::*;
        use Merge::*;
        let v = HeadKind::Vanilla;
        let (stages, prepared) = match plan.strategy {
            StrategyKind::InDomainOnly => {
                let s = self.stage(plan, &spec("in_domain", &child, Concat, Plain, v, 1, &child), &shared, None)?;
                (vec![s], shared)
            }
            StrategyKind::Concat => {
                let s = self.stage(plan, &spec("concat", &all, Concat, Plain, v, 1, &all), &shared, None)?;
                (vec![s], shared)
            }
            StrategyKind::MultiDomain => {
                let s = self.stage(plan, &spec("multi_domain", &all, Oversample, Tags, v, 1, &all), &shared, None)?;
                (vec![s], shared)
            }
            StrategyKind::FineTuning => {
                let parent_spec = spec("tagged_parent", &parents, Oversample, Tags, v, 1, &all);
                let child_spec = spec("fine_tune", &child, Concat, Tags, v, 1, &child);
                if plan.cross_lingual() {
                    self.cross_lingual_fine_tuning(plan, &parent_spec, &child_spec, &shared.bpe)?
                } else {
                    let first = self.stage(plan, &parent_spec, &shared, None)?;
                    check_vocab_handoff(&shared.vocab, &shared.vocab, false)?;
                    let second = self.stage(plan, &child_spec, &shared, Some(&first))?;
                    (vec![first, second], shared)
                }
            }
            StrategyKind::MixedFineTuning => {
                let first = self.stage(plan, &spec("tagged_parent", &parents, Oversample, Tags, v, 1, &all), &shared, None)?;
                let second = self.stage(plan, &spec("mixed", &all, Oversample, Tags, v, 1, &all), &shared, Some(&first))?;
                (vec![first, second], shared)
            }
            StrategyKind::Proposed(h) => {
                let s = self.stage(plan, &spec("proposed", &all, Oversample, Groups, h, d, &all), &shared, None)?;
                (vec![s], shared)
            }
            StrategyKind::ProposedMft(h) => {
                let first = self.stage(plan, &spec("grouped_parent", &parents, Oversample, Groups, h, d, &all), &shared, None)?;
                let second = self.stage(plan, &spec("grouped_mixed", &all, Oversample, Groups, h, d, &all), &shared, Some(&first))?;
                (vec![first, second], shared)
            }
        };
        self.finish(plan, stages.into_iter().map(|f| f.record).collect(), prepared)
    }

    /// Second stage of a two-stage strategy on top of given parent weights.
    fn adapt(&mut self, plan: &ExperimentPlan, prepared: Prepared, parent: ParentModel<T>) -> Result<RunOutcome<T>> {
        use Conditioning::*;
        use Merge::*;
        let v = HeadKind::Vanilla;
        let d = plan.n_groups();
        let all: Vec<&CorpusGroup> = plan.groups().collect();
        let child = vec![&plan.child];
        let child_spec = match plan.strategy {
            StrategyKind::FineTuning if plan.cross_lingual() => {
                bail!(Plan, "cross-lingual fine tuning builds its own parent vocabulary and cannot start from a checkpoint")
            }
            StrategyKind::FineTuning => spec("fine_tune", &child, Concat, Tags, v, 1, &child),
            StrategyKind::MixedFineTuning => spec("mixed", &all, Oversample, Tags, v, 1, &all),
            StrategyKind::ProposedMft(h) => spec("grouped_mixed", &all, Oversample, Groups, h, d, &all),
            other => bail!(Plan, "strategy `{other}` has a single stage and cannot start from a parent model"),
        };
        let first = Finished {
            record: StageRecord {
                label: "parent".into(),
                config: parent.params.config.clone(),
                initial: parent.params.clone(),
                handoff: parent.params.clone(),
                outcome: StageOutcome {
                    checkpoints: CheckpointSet::new(),
                    trace: Vec::new(),
                    batches: 0,
                    stop: StopReason::Converged,
                },
                train_pairs: 0,
                train_groups: Vec::new(),
                seconds: 0.0,
            },
            trainer: Trainer {
                step: parent.step,
                ..Trainer::new(parent.params)
            },
        };
        let second = self.stage(plan, &child_spec, &prepared, Some(&first))?;
        self.finish(plan, vec![second.record], prepared)
    }

    fn finish(&self, plan: &ExperimentPlan, records: Vec<StageRecord<T>>, prepared: Prepared) -> Result<RunOutcome<T>> {
        let last = records.last().expect("every strategy has a stage");
        let k = plan.decoding.last_k.min(last.outcome.checkpoints.len());
        let model = average_checkpoints(&last.outcome.checkpoints, k)?;
        let conditioning = Conditioning::of(plan.strategy);
        let detok = Detokenizer {
            vocab: &prepared.vocab,
            bpe: &prepared.bpe,
            scheme: &prepared.scheme,
        };
        let mut scores = Vec::new();
        for g in plan.groups() {
            if let Some(test) = &g.test {
                let set = EvalSet::build(test, g.group, plan.decoding.test_sentences, &prepared, conditioning)?;
                if set.is_empty() {
                    continue;
                }
                let hyps = set.beam(&model, &plan.decoding.beam)?;
                let hypotheses: Vec<Sentence> = hyps.iter().map(|h| detok.words(h)).collect();
                let bleu = bleu4(&hypotheses, &set.refs)?;
                self.log(&format!("  {} test {}: {bleu:.2}", plan.strategy, g.name()));
                scores.push(TestScore {
                    corpus: g.name().to_owned(),
                    group: g.group,
                    bleu,
                    hypotheses,
                    references: set.refs,
                });
            }
        }
        Ok(RunOutcome {
            strategy: plan.strategy,
            conditioning,
            prepared,
            stages: records,
            model,
            scores,
        })
    }

    /// Parent and child keep separate vocabularies; child tokens are placed
    /// in parent embedding slots by a seeded random map.
    fn cross_lingual_fine_tuning(
        &mut self,
        plan: &ExperimentPlan,
        parent_spec: &StageSpec,
        child_spec: &StageSpec,
        bpe: &SubwordModel,
    ) -> Result<(Vec<Finished<T>>, Prepared)> {
        let tags = plan.scheme.tags();
        let seg = |gs: &[&CorpusGroup]| -> Vec<ParallelCorpus> { gs.iter().map(|g| bpe.apply_corpus(&g.train)).collect() };
        let parent_vocab = build_vocab(&seg(&parent_spec.members), &tags, plan.prep.vocab_cap)?;
        let own = build_vocab(&seg(&child_spec.members), &tags, parent_vocab.len())?;
        let map = random_vocab_map(&parent_vocab, &own, sub_seed(plan.seed, "vocab_map"))?;
        let child_vocab = remap_vocab(&parent_vocab, &own, &map)?;
        check_vocab_handoff(&parent_vocab, &child_vocab, true)?;
        let parent = Prepared {
            bpe: bpe.clone(),
            vocab: parent_vocab,
            scheme: plan.scheme.clone(),
        };
        let childp = Prepared {
            vocab: child_vocab,
            ..parent.clone()
        };
        let first = self.stage(plan, parent_spec, &parent, None)?;
        let second = self.stage(plan, child_spec, &childp, Some(&first))?;
        Ok((vec![first, second], childp))
    }

    fn stage(
        &mut self,
        plan: &ExperimentPlan,
        spec: &StageSpec,
        prepared: &Prepared,
        previous: Option<&Finished<T>>,
    ) -> Result<Finished<T>> {
        let key = previous.is_none().then(|| stage_key(plan, spec, prepared));
        if let Some(hit) = key.and_then(|k| self.cache.get(&k)) {
            self.log(&format!("  {} stage {}: reused", plan.strategy, spec.label));
            return Ok(hit.clone());
        }
        let started = Instant::now();
        let mut config = plan.model.clone();
        config.vocab_size = prepared.vocab.len();
        config.head_kind = spec.head;
        config.n_groups = spec.n_groups;
        config.seed = plan.seed;
        let mut trainer = match previous {
            None => Trainer::new(ModelParams::init(&config, sub_seed(plan.seed, "init"))?),
            Some(prev) => {
                let diff = prev.record.config.diff(&config);
                if !diff.is_empty() {
                    bail!(
                        Checkpoint,
                        "stage `{}` cannot start from the parent model; parent vs stage config differs in {}",
                        spec.label,
                        diff.join(", ")
                    );
                }
                let t = &plan.training;
                Trainer::resume(&prev.trainer, prev.record.handoff.clone(), t.reset_moments, t.continue_schedule)
            }
        };
        let initial = trainer.params.clone();
        let (examples, train_groups) = stage_examples(plan, spec, prepared, &config)?;
        let mut dev = EvalSet::default();
        for g in &spec.dev {
            dev.extend(EvalSet::build(&g.dev, g.group, Some(plan.training.dev_sentences), prepared, spec.conditioning)?);
        }
        let detok = Detokenizer {
            vocab: &prepared.vocab,
            bpe: &prepared.bpe,
            scheme: &prepared.scheme,
        };
        let mut dev_bleu = |p: &ModelParams<T>| -> Result<f64> {
            let hyps = dev.greedy(p, 100)?;
            dev.bleu(&hyps, &detok)
        };
        let t = &plan.training;
        let opts = StageOptions {
            max_tokens: t.max_tokens,
            warmup: t.warmup,
            lr_scale: t.lr_scale,
            label_smoothing: t.label_smoothing,
            keep_checkpoints: plan.decoding.last_k,
        };
        let mut monitor = t.monitor()?;
        let outcome = train_until_converged(
            &mut trainer,
            &examples,
            &mut dev_bleu,
            &mut monitor,
            &opts,
            sub_seed(plan.seed, spec.label),
        )?;
        let handoff = match t.handoff {
            Handoff::Averaged => {
                let k = plan.decoding.last_k.min(outcome.checkpoints.len());
                average_checkpoints(&outcome.checkpoints, k)?
            }
            Handoff::LastRaw => outcome.checkpoints.last().expect("a stage ends with a checkpoint").1.clone(),
        };
        let seconds = started.elapsed().as_secs_f64();
        self.log(&format!(
            "  {} stage {}: {} pairs, {} batches, {} ({:.0}s), dev {:.2}",
            plan.strategy,
            spec.label,
            examples.len(),
            outcome.batches,
            match outcome.stop {
                StopReason::Converged => "converged",
                StopReason::BatchCap => "batch cap",
            },
            seconds,
            outcome.trace.last().map_or(0.0, |r| r.dev_bleu),
        ));
        let finished = Finished {
            record: StageRecord {
                label: spec.label.to_owned(),
                config,
                initial,
                handoff,
                train_pairs: examples.len(),
                train_groups,
                outcome,
                seconds,
            },
            trainer,
        };
        if let Some(k) = key {
            self.cache.insert(k, finished.clone());
        }
        Ok(finished)
    }
}

/// Everything that determines the result of a from-scratch stage.
fn stage_key(plan: &ExperimentPlan, spec: &StageSpec, prepared: &Prepared) -> u64 {
    let mut h = DefaultHasher::new();
    spec.label.hash(&mut h);
    for g in &spec.members {
        (g.group, &g.train.name, &g.train.pairs).hash(&mut h);
    }
    for g in &spec.dev {
        (g.group, &g.dev.name, &g.dev.pairs).hash(&mut h);
    }
    (spec.merge, spec.conditioning, spec.head, spec.n_groups).hash(&mut h);
    prepared.vocab.tokens().hash(&mut h);
    prepared.bpe.to_text().hash(&mut h);
    format!("{:?}{:?}{:?}{:?}", plan.scheme, plan.model, plan.training, plan.decoding.last_k).hash(&mut h);
    plan.seed.hash(&mut h);
    h.finish()
}

/// Segmented, conditioned, merged and encoded training data of a stage.
/// Pairs longer than the model's maximum length are dropped.
fn stage_examples(
    plan: &ExperimentPlan,
    spec: &StageSpec,
    prepared: &Prepared,
    config: &ModelConfig,
) -> Result<(Vec<Example>, Vec<GroupId>)> {
    let mut parts = Vec::with_capacity(spec.members.len());
    for g in &spec.members {
        let seg = prepared.bpe.apply_corpus(&g.train);
        parts.push(match spec.conditioning {
            Conditioning::Plain => seg,
            Conditioning::Tags => inject_tags(&seg, &prepared.scheme, g.group.get(), &g.train.tgt_lang)?,
            Conditioning::Groups => seg.with_group(g.group),
        });
    }
    let merged = match spec.merge {
        Merge::Concat => concat(&parts)?,
        Merge::Oversample => oversample_merge(
            &parts,
            sub_seed(plan.seed, &format!("{}_merge", spec.label)),
            MergeOptions {
                ratio_cap: plan.training.oversample_cap,
            },
        )?,
    };
    let mut groups: Vec<GroupId> = merged.groups.iter().flatten().copied().collect();
    groups.sort();
    groups.dedup();
    let examples: Vec<Example> = crate::corpus::batch::encode_corpus(&merged, &prepared.vocab)
        .into_iter()
        .filter(|e| e.src.len() <= config.max_len && e.tgt.len() < config.max_len)
        .collect();
    if examples.is_empty() {
        bail!(Data, "stage `{}` has no training pairs within the length limit", spec.label);
    }
    Ok((examples, groups))
}
