//! Adaptation strategies: experiment plans, the convergence rule, the
//! training loop and the single- and two-stage runners.

mod monitor;
mod run;
mod train;

use std::fmt;
use std::str::FromStr;

pub use monitor::{plateaued, stopping_eval, ConvergenceMonitor};
pub use run::{
    check_vocab_handoff, decode_context, prepare, sub_seed, Conditioning, Detokenizer, EvalSet, ParentModel, Prepared, RunOutcome, Runner,
    StageRecord, TestScore,
};
pub use train::{trace_tsv, train_until_converged, StageOptions, StageOutcome, StopReason, TraceRow, Trainer};

use crate::corpus::{ParallelCorpus, Split, TagScheme};
use crate::decode::BeamConfig;
use crate::error::{bail, Error, Result};
use crate::heads::{GroupId, HeadKind};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    InDomainOnly,
    Concat,
    FineTuning,
    MultiDomain,
    MixedFineTuning,
    Proposed(HeadKind),
    ProposedMft(HeadKind),
}

impl StrategyKind {
    pub fn validate(self) -> Result<()> {
        match self {
            Self::Proposed(HeadKind::Vanilla) | Self::ProposedMft(HeadKind::Vanilla) => {
                bail!(Plan, "{} needs a domain-aware head, not vanilla", self.base_name())
            }
            _ => Ok(()),
        }
    }

    fn base_name(self) -> &'static str {
        match self {
            Self::InDomainOnly => "in_domain_only",
            Self::Concat => "concat",
            Self::FineTuning => "fine_tuning",
            Self::MultiDomain => "multi_domain",
            Self::MixedFineTuning => "mixed_fine_tuning",
            Self::Proposed(_) => "proposed",
            Self::ProposedMft(_) => "proposed_mft",
        }
    }

    /// Output head of the final model.
    pub fn head_kind(self) -> HeadKind {
        match self {
            Self::Proposed(h) | Self::ProposedMft(h) => h,
            _ => HeadKind::Vanilla,
        }
    }

    pub fn two_stage(self) -> bool {
        matches!(self, Self::FineTuning | Self::MixedFineTuning | Self::ProposedMft(_))
    }

    pub fn uses_tags(self) -> bool {
        matches!(self, Self::FineTuning | Self::MultiDomain | Self::MixedFineTuning)
    }

    pub fn uses_groups(self) -> bool {
        matches!(self, Self::Proposed(_) | Self::ProposedMft(_))
    }

    /// Strategies that cannot serve more than one target language.
    pub fn single_target(self) -> bool {
        matches!(self, Self::FineTuning | Self::Proposed(_) | Self::ProposedMft(_))
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Proposed(h) | Self::ProposedMft(h) => write!(f, "{}:{}", self.base_name(), h),
            _ => f.write_str(self.base_name()),
        }
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    /// Parses `fine_tuning`, `proposed:domextr`, `proposed_mft:domspec`, ...
    fn from_str(s: &str) -> Result<Self> {
        let (base, head) = match s.split_once(':') {
            Some((b, h)) => (b, Some(h.parse::<HeadKind>()?)),
            None => (s, None),
        };
        let kind = match (base, head) {
            ("in_domain_only", None) => Self::InDomainOnly,
            ("concat", None) => Self::Concat,
            ("fine_tuning", None) => Self::FineTuning,
            ("multi_domain", None) => Self::MultiDomain,
            ("mixed_fine_tuning", None) => Self::MixedFineTuning,
            ("proposed", Some(h)) => Self::Proposed(h),
            ("proposed_mft", Some(h)) => Self::ProposedMft(h),
            ("proposed" | "proposed_mft", None) => bail!(Config, "strategy `{s}` needs a head, e.g. `{s}:domextr`"),
            _ => bail!(Config, "unknown strategy `{s}`"),
        };
        kind.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(kind)
    }
}

/// Handoff weights for the second stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Handoff {
    Averaged,
    LastRaw,
}

/// Training hyperparameters shared by every stage of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    /// Padded-token budget per batch.
    pub max_tokens: usize,
    pub warmup: u64,
    /// Multiplier on the inverse-square-root schedule.
    pub lr_scale: f64,
    pub label_smoothing: f64,
    pub eval_interval: u64,
    pub window: usize,
    pub min_delta: f64,
    /// Batch cap per stage.
    pub max_batches: u64,
    /// Dev sentences evaluated per corpus.
    pub dev_sentences: usize,
    pub handoff: Handoff,
    /// Clear Adam moments when a stage resumes from another.
    pub reset_moments: bool,
    /// Keep counting learning-rate schedule steps across stages.
    pub continue_schedule: bool,
    pub oversample_cap: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            max_tokens: 2048,
            warmup: 400,
            lr_scale: 1.0,
            label_smoothing: 0.1,
            eval_interval: 200,
            window: 5,
            min_delta: 0.05,
            max_batches: 20_000,
            dev_sentences: 200,
            handoff: Handoff::Averaged,
            reset_moments: true,
            continue_schedule: true,
            oversample_cap: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        ConvergenceMonitor::new(self.eval_interval, self.window, self.min_delta, self.max_batches)?;
        if self.max_tokens == 0 || self.dev_sentences == 0 {
            bail!(Config, "batch token cap and dev size must be positive");
        }
        if !(self.lr_scale > 0.0) || !(0.0..1.0).contains(&self.label_smoothing) {
            bail!(Config, "lr_scale must be positive and label smoothing in [0, 1)");
        }
        if let Some(r) = self.oversample_cap {
            if !(r >= 1.0) {
                bail!(Config, "oversampling cap {r} must be at least 1");
            }
        }
        Ok(())
    }

    pub fn monitor(&self) -> Result<ConvergenceMonitor> {
        ConvergenceMonitor::new(self.eval_interval, self.window, self.min_delta, self.max_batches)
    }
}

/// Test-time decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodingConfig {
    pub beam: BeamConfig,
    /// Checkpoints averaged for the final model and the stage handoff.
    pub last_k: usize,
    /// Test sentences scored per corpus; `None` scores all.
    pub test_sentences: Option<usize>,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            beam: BeamConfig::default(),
            last_k: 5,
            test_sentences: None,
        }
    }
}

/// Subword and vocabulary sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct PrepConfig {
    pub bpe_merges: usize,
    pub vocab_cap: usize,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            bpe_merges: 2000,
            vocab_cap: 4000,
        }
    }
}

/// The splits of one corpus and its group id.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusGroup {
    pub group: GroupId,
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: Option<ParallelCorpus>,
}

impl CorpusGroup {
    pub fn new(group: usize, train: ParallelCorpus, dev: ParallelCorpus, test: Option<ParallelCorpus>) -> Self {
        Self {
            group: GroupId::raw(group as u16),
            train,
            dev,
            test,
        }
    }

    pub fn name(&self) -> &str {
        &self.train.name
    }

    fn validate(&self) -> Result<()> {
        let splits = [Some(&self.train), Some(&self.dev), self.test.as_ref()];
        for (c, want) in splits.iter().zip(Split::ALL) {
            if let Some(c) = c {
                if c.split != want {
                    bail!(Plan, "corpus `{}` given as {want} split but is {}", c.name, c.split);
                }
                c.validate()?;
                if (c.src_lang.as_str(), c.tgt_lang.as_str()) != (self.train.src_lang.as_str(), self.train.tgt_lang.as_str()) {
                    bail!(Plan, "splits of `{}` disagree on the language pair", self.train.name);
                }
            }
        }
        if self.dev.is_empty() {
            bail!(Plan, "corpus `{}` has no dev data", self.train.name);
        }
        Ok(())
    }
}

/// Which corpora play which role under which strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub child: CorpusGroup,
    pub parents: Vec<CorpusGroup>,
    pub scheme: TagScheme,
    pub strategy: StrategyKind,
    /// Architecture; vocabulary size, head and group count are filled in
    /// per stage.
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub decoding: DecodingConfig,
    pub prep: PrepConfig,
    pub seed: u64,
}

impl ExperimentPlan {
    /// A plan whose tag scheme covers every group, with target-language tags
    /// only when there is more than one target language.
    pub fn new(child: CorpusGroup, parents: Vec<CorpusGroup>, strategy: StrategyKind, seed: u64) -> Self {
        let mut langs: Vec<&str> = Vec::new();
        for g in std::iter::once(&child).chain(&parents) {
            if !langs.contains(&g.train.tgt_lang.as_str()) {
                langs.push(&g.train.tgt_lang);
            }
        }
        let scheme = TagScheme::new(parents.len() + 1, &langs, langs.len() > 1);
        Self {
            child,
            parents,
            scheme,
            strategy,
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            decoding: DecodingConfig::default(),
            prep: PrepConfig::default(),
            seed,
        }
    }

    /// Child first, then parents.
    pub fn groups(&self) -> impl Iterator<Item = &CorpusGroup> {
        std::iter::once(&self.child).chain(&self.parents)
    }

    pub fn n_groups(&self) -> usize {
        self.parents.len() + 1
    }

    pub fn target_languages(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for g in self.groups() {
            if !out.contains(&g.train.tgt_lang.as_str()) {
                out.push(&g.train.tgt_lang);
            }
        }
        out
    }

    /// Cross-lingual transfer: the child's source language is not a parent
    /// source language.
    pub fn cross_lingual(&self) -> bool {
        !self.parents.is_empty() && self.parents.iter().all(|p| p.train.src_lang != self.child.train.src_lang)
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        let d = self.n_groups();
        let mut seen = vec![false; d];
        for g in self.groups() {
            g.validate()?;
            let k = g.group.get();
            if k == 0 || k > d || seen[k - 1] {
                bail!(Plan, "group ids must be 1..={d}, one per corpus; `{}` has {k}", g.name());
            }
            seen[k - 1] = true;
        }
        if self.parents.is_empty() && !matches!(self.strategy, StrategyKind::InDomainOnly | StrategyKind::MultiDomain | StrategyKind::Concat | StrategyKind::Proposed(_)) {
            bail!(Plan, "{} needs at least one out-of-domain corpus", self.strategy);
        }
        let langs = self.target_languages();
        if self.strategy.single_target() && langs.len() > 1 {
            bail!(
                Plan,
                "{} supports one target language, the plan has {} ({})",
                self.strategy,
                langs.len(),
                langs.join(", ")
            );
        }
        if self.strategy.uses_tags() {
            if self.scheme.n_domains < d {
                bail!(Scheme, "tag scheme has {} domain tags for {d} corpora", self.scheme.n_domains);
            }
            if langs.len() > 1 && !self.scheme.include_lang_tag {
                bail!(Scheme, "several target languages need target-language tags");
            }
        }
        self.model.validate()?;
        self.training.validate()?;
        self.decoding.beam.validate()?;
        if self.decoding.last_k == 0 {
            bail!(Config, "last_k must be at least 1");
        }
        if self.prep.vocab_cap < crate::corpus::vocab::RESERVED_COUNT + self.scheme.tags().len() {
            bail!(Config, "vocabulary cap {} leaves no room beyond reserved and tag tokens", self.prep.vocab_cap);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn corpus(name: &str, src: &str, tgt: &str, split: Split) -> ParallelCorpus {
        let pairs = vec![(tokenize("a b"), tokenize("c d"))];
        ParallelCorpus::new(name, src, tgt, "d", split, pairs).unwrap()
    }

    fn group(k: usize, name: &str, src: &str, tgt: &str) -> CorpusGroup {
        CorpusGroup::new(
            k,
            corpus(name, src, tgt, Split::Train),
            corpus(name, src, tgt, Split::Dev),
            Some(corpus(name, src, tgt, Split::Test)),
        )
    }

    #[test]
    fn strategy_names_round_trip() {
        let all = [
            StrategyKind::InDomainOnly,
            StrategyKind::Concat,
            StrategyKind::FineTuning,
            StrategyKind::MultiDomain,
            StrategyKind::MixedFineTuning,
            StrategyKind::Proposed(HeadKind::DomSpec),
            StrategyKind::ProposedMft(HeadKind::DomSpecExtr),
        ];
        for s in all {
            assert_eq!(s.to_string().parse::<StrategyKind>().unwrap(), s);
        }
        assert!("proposed:vanilla".parse::<StrategyKind>().is_err());
        assert!("proposed".parse::<StrategyKind>().is_err());
        assert!("fine_tuning:domextr".parse::<StrategyKind>().is_err());
        assert!(StrategyKind::ProposedMft(HeadKind::Vanilla).validate().is_err());
    }

    #[test]
    fn target_language_rule() {
        let child = group(1, "in", "ja", "en");
        let parents = vec![group(2, "out", "ja", "zh")];
        for s in [StrategyKind::FineTuning, StrategyKind::Proposed(HeadKind::DomExtr), StrategyKind::ProposedMft(HeadKind::DomSpec)] {
            let p = ExperimentPlan::new(child.clone(), parents.clone(), s, 1);
            assert!(matches!(p.validate(), Err(Error::Plan(_))), "{s}");
        }
        for s in [StrategyKind::MultiDomain, StrategyKind::MixedFineTuning] {
            let p = ExperimentPlan::new(child.clone(), parents.clone(), s, 1);
            p.validate().unwrap();
            assert!(p.scheme.include_lang_tag);
        }
    }

    #[test]
    fn group_ids_must_be_contiguous() {
        let p = ExperimentPlan::new(group(1, "in", "a", "b"), vec![group(3, "out", "a", "b")], StrategyKind::MultiDomain, 1);
        assert!(matches!(p.validate(), Err(Error::Plan(_))));
        let p = ExperimentPlan::new(group(1, "in", "a", "b"), vec![group(1, "out", "a", "b")], StrategyKind::MultiDomain, 1);
        assert!(matches!(p.validate(), Err(Error::Plan(_))));
        let p = ExperimentPlan::new(group(2, "in", "a", "b"), vec![group(1, "out", "a", "b")], StrategyKind::MultiDomain, 1);
        p.validate().unwrap();
    }

    #[test]
    fn two_stage_needs_parents_and_tags() {
        let p = ExperimentPlan::new(group(1, "in", "a", "b"), vec![], StrategyKind::FineTuning, 1);
        assert!(matches!(p.validate(), Err(Error::Plan(_))));
        let mut p = ExperimentPlan::new(group(1, "in", "a", "b"), vec![group(2, "out", "a", "b")], StrategyKind::MultiDomain, 1);
        p.scheme.n_domains = 1;
        assert!(matches!(p.validate(), Err(Error::Scheme(_))));
    }

    #[test]
    fn cross_lingual_detection() {
        let p = ExperimentPlan::new(group(1, "in", "ja", "en"), vec![group(2, "out", "zh", "en")], StrategyKind::FineTuning, 1);
        assert!(p.cross_lingual());
        let p = ExperimentPlan::new(group(1, "in", "ja", "en"), vec![group(2, "out", "ja", "en")], StrategyKind::FineTuning, 1);
        assert!(!p.cross_lingual());
    }
}
