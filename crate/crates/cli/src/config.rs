//! Sectioned `key = value` experiment configuration.
//!
//! ```text
//! # comment
//! [data]
//! corpus_dir = corpora
//! in_domain = in
//! out_of_domain = out
//! ```
//!
//! Every key is checked against the documented list of its section and
//! every value is validated before any command does work.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mdnmt::corpus::{CorpusSpec, DomainSpec, SynthSpec};
use mdnmt::decode::BeamConfig;
use mdnmt::heads::HeadKind;
use mdnmt::model::ModelConfig;
use mdnmt::strategy::{DecodingConfig, Handoff, PrepConfig, StrategyKind, TrainingConfig};
use mdnmt::{Error, Result};

/// Keys accepted in each section; `domain.` and `corpus.` are prefixes.
pub const KEYS: &[(&str, &[&str])] = &[
    (
        "data",
        &["corpus_dir", "prep_dir", "in_domain", "out_of_domain", "bpe_merges", "vocab_cap"],
    ),
    (
        "synth",
        &["n_concepts", "min_len", "max_len", "zipf", "languages", "domain.", "corpus."],
    ),
    (
        "model",
        &["d_model", "n_heads", "d_ff", "n_enc_layers", "n_dec_layers", "dropout", "max_len"],
    ),
    (
        "training",
        &[
            "seed",
            "max_tokens",
            "warmup",
            "lr_scale",
            "label_smoothing",
            "eval_interval",
            "window",
            "min_delta",
            "max_batches",
            "dev_sentences",
            "handoff",
            "reset_moments",
            "continue_schedule",
            "oversample_cap",
        ],
    ),
    ("strategy", &["kind", "head"]),
    ("decoding", &["beam", "alpha", "max_len", "last_k", "test_sentences"]),
];

#[derive(Clone, Debug)]
struct Entry {
    key: String,
    value: String,
    line: usize,
}

/// Raw sections in file order.
#[derive(Clone, Debug, Default)]
pub struct ConfigFile {
    sections: BTreeMap<String, Vec<Entry>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, Vec<Entry>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            let n = i + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !KEYS.iter().any(|(s, _)| *s == name) {
                    let known: Vec<&str> = KEYS.iter().map(|(s, _)| *s).collect();
                    return Err(Error::Config(format!(
                        "line {n}: unknown section [{name}]; expected one of {}",
                        known.join(", ")
                    )));
                }
                if sections.contains_key(name) {
                    return Err(Error::Config(format!("line {n}: section [{name}] appears twice")));
                }
                sections.insert(name.to_owned(), Vec::new());
                current = Some(name.to_owned());
                continue;
            }
            let Some(section) = &current else {
                return Err(Error::Config(format!("line {n}: `{line}` is outside any section")));
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {n}: expected `key = value`")))?;
            let (key, value) = (key.trim(), value.trim());
            let allowed = KEYS.iter().find(|(s, _)| s == section).map(|(_, k)| *k).unwrap_or(&[]);
            let known = allowed
                .iter()
                .any(|k| if k.ends_with('.') { key.starts_with(k) && key.len() > k.len() } else { key == *k });
            if !known {
                return Err(Error::Config(format!(
                    "line {n}: unknown key `{key}` in [{section}]; accepted keys: {}",
                    allowed.join(", ")
                )));
            }
            let entries = sections.get_mut(section).expect("section registered");
            if entries.iter().any(|e| e.key == key) {
                return Err(Error::Config(format!("line {n}: key `{key}` repeated in [{section}]")));
            }
            entries.push(Entry {
                key: key.to_owned(),
                value: value.to_owned(),
                line: n,
            });
        }
        Ok(Self { sections })
    }

    pub fn has(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    fn entry(&self, section: &str, key: &str) -> Option<&Entry> {
        self.sections.get(section)?.iter().find(|e| e.key == key)
    }

    fn get<V: FromStr>(&self, section: &str, key: &str) -> Result<Option<V>> {
        match self.entry(section, key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|_| {
                Error::Config(format!(
                    "line {}: [{section}] {key} has invalid value `{}`",
                    e.line, e.value
                ))
            }),
        }
    }

    fn set<V: FromStr>(&self, section: &str, key: &str, slot: &mut V) -> Result<()> {
        if let Some(v) = self.get(section, key)? {
            *slot = v;
        }
        Ok(())
    }

    fn prefixed(&self, section: &str, prefix: &str) -> Vec<(&str, &Entry)> {
        self.sections
            .get(section)
            .map(|es| {
                es.iter()
                    .filter_map(|e| e.key.strip_prefix(prefix).map(|rest| (rest, e)))
                    .collect()
            })
            .unwrap_or_default()
    }
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

fn bad_entry(section: &str, e: &Entry, why: impl Display) -> Error {
    Error::Config(format!("line {}: [{section}] {}: {why}", e.line, e.key))
}

/// Where corpora live and which of them play which role.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub corpus_dir: PathBuf,
    pub prep_dir: PathBuf,
    /// Corpus names; files are `<name>.<split>.tsv` with manifests.
    pub in_domain: String,
    pub out_of_domain: Vec<String>,
}

impl DataConfig {
    /// In-domain corpus first, then the out-of-domain ones; group `k` is the
    /// `k`-th name.
    pub fn corpus_names(&self) -> Vec<&str> {
        std::iter::once(self.in_domain.as_str())
            .chain(self.out_of_domain.iter().map(String::as_str))
            .collect()
    }

    pub fn group_of(&self, name: &str) -> Result<usize> {
        self.corpus_names()
            .iter()
            .position(|n| *n == name)
            .map(|i| i + 1)
            .ok_or_else(|| {
                Error::Context(format!(
                    "domain `{name}` is not one of the configured corpora ({})",
                    self.corpus_names().join(", ")
                ))
            })
    }
}

/// A fully validated experiment configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: Option<DataConfig>,
    pub synth: Option<SynthSpec>,
    pub prep: PrepConfig,
    /// Architecture; vocabulary size, head and group count are filled in per
    /// stage.
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub seed: u64,
    pub strategy: StrategyKind,
    pub decoding: DecodingConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_text(&text, base)
    }

    /// Parses and validates `text`; relative paths resolve against `base`.
    pub fn from_text(text: &str, base: &Path) -> Result<Self> {
        let file = ConfigFile::parse(text)?;
        let mut prep = PrepConfig::default();
        file.set("data", "bpe_merges", &mut prep.bpe_merges)?;
        file.set("data", "vocab_cap", &mut prep.vocab_cap)?;
        let data = if file.has("data") {
            let need = |key: &str| -> Result<String> {
                file.get::<String>("data", key)?
                    .ok_or_else(|| Error::Config(format!("[data] needs `{key}`")))
            };
            let corpus_dir = base.join(need("corpus_dir")?);
            let prep_dir = match file.get::<String>("data", "prep_dir")? {
                Some(p) => base.join(p),
                None => corpus_dir.join("prepared"),
            };
            let out_of_domain = list(&file.get::<String>("data", "out_of_domain")?.unwrap_or_default());
            let data = DataConfig {
                corpus_dir,
                prep_dir,
                in_domain: need("in_domain")?,
                out_of_domain,
            };
            let names = data.corpus_names();
            for (i, n) in names.iter().enumerate() {
                if names[..i].contains(n) {
                    return Err(Error::Config(format!("[data] corpus `{n}` is listed twice")));
                }
            }
            Some(data)
        } else {
            None
        };
        let synth = if file.has("synth") {
            Some(synth_spec(&file)?)
        } else {
            None
        };

        let mut model = ModelConfig::default();
        file.set("model", "d_model", &mut model.d_model)?;
        file.set("model", "n_heads", &mut model.n_heads)?;
        file.set("model", "d_ff", &mut model.d_ff)?;
        file.set("model", "n_enc_layers", &mut model.n_enc_layers)?;
        file.set("model", "n_dec_layers", &mut model.n_dec_layers)?;
        file.set("model", "dropout", &mut model.dropout)?;
        file.set("model", "max_len", &mut model.max_len)?;

        let mut training = TrainingConfig::default();
        let mut seed = 1u64;
        file.set("training", "seed", &mut seed)?;
        file.set("training", "max_tokens", &mut training.max_tokens)?;
        file.set("training", "warmup", &mut training.warmup)?;
        file.set("training", "lr_scale", &mut training.lr_scale)?;
        file.set("training", "label_smoothing", &mut training.label_smoothing)?;
        file.set("training", "eval_interval", &mut training.eval_interval)?;
        file.set("training", "window", &mut training.window)?;
        file.set("training", "min_delta", &mut training.min_delta)?;
        file.set("training", "max_batches", &mut training.max_batches)?;
        file.set("training", "dev_sentences", &mut training.dev_sentences)?;
        file.set("training", "reset_moments", &mut training.reset_moments)?;
        file.set("training", "continue_schedule", &mut training.continue_schedule)?;
        if let Some(h) = file.get::<String>("training", "handoff")? {
            training.handoff = match h.as_str() {
                "averaged" => Handoff::Averaged,
                "last" => Handoff::LastRaw,
                _ => return Err(Error::Config(format!("[training] handoff must be `averaged` or `last`, got `{h}`"))),
            };
        }
        if let Some(c) = file.get::<String>("training", "oversample_cap")? {
            training.oversample_cap = match c.as_str() {
                "none" => None,
                _ => Some(c.parse().map_err(|_| {
                    Error::Config(format!("[training] oversample_cap must be `none` or a ratio, got `{c}`"))
                })?),
            };
        }

        let strategy = strategy(&file)?;

        let mut decoding = DecodingConfig::default();
        let mut beam = BeamConfig::default();
        file.set("decoding", "beam", &mut beam.beam)?;
        file.set("decoding", "alpha", &mut beam.alpha)?;
        file.set("decoding", "max_len", &mut beam.max_len)?;
        decoding.beam = beam;
        file.set("decoding", "last_k", &mut decoding.last_k)?;
        if let Some(n) = file.get::<String>("decoding", "test_sentences")? {
            decoding.test_sentences = match n.as_str() {
                "all" => None,
                _ => Some(n.parse().map_err(|_| {
                    Error::Config(format!("[decoding] test_sentences must be `all` or a count, got `{n}`"))
                })?),
            };
        }

        let cfg = Self {
            data,
            synth,
            prep,
            model,
            training,
            seed,
            strategy,
            decoding,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every value that does not depend on the corpora.
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.synth {
            s.validate().map_err(|e| Error::Config(format!("[synth] {}", strip_category(&e))))?;
        }
        self.strategy.validate()?;
        let probe = ModelConfig {
            vocab_size: self.prep.vocab_cap.max(mdnmt::corpus::vocab::RESERVED_COUNT),
            head_kind: self.strategy.head_kind(),
            n_groups: self.data.as_ref().map_or(1, |d| d.corpus_names().len()),
            ..self.model.clone()
        };
        probe.validate()?;
        self.training.validate()?;
        self.decoding.beam.validate()?;
        if self.decoding.last_k == 0 {
            return Err(Error::Config("[decoding] last_k must be at least 1".into()));
        }
        if self.prep.vocab_cap <= mdnmt::corpus::vocab::RESERVED_COUNT {
            return Err(Error::Config("[data] vocab_cap leaves no room for tokens".into()));
        }
        Ok(())
    }

    pub fn data(&self) -> Result<&DataConfig> {
        self.data
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs a [data] section".into()))
    }

    pub fn synth(&self) -> Result<&SynthSpec> {
        self.synth
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs a [synth] section".into()))
    }
}

/// The message of `e` without its category prefix.
pub fn strip_category(e: &Error) -> String {
    let s = e.to_string();
    match s.split_once(": ") {
        Some((_, rest)) => rest.to_owned(),
        None => s,
    }
}

fn strategy(file: &ConfigFile) -> Result<StrategyKind> {
    let kind = file
        .get::<String>("strategy", "kind")?
        .unwrap_or_else(|| "in_domain_only".into());
    let head = file.get::<String>("strategy", "head")?;
    let name = match (kind.as_str(), head) {
        ("proposed" | "proposed_mft", Some(h)) => format!("{kind}:{h}"),
        ("proposed" | "proposed_mft", None) => {
            return Err(Error::Config(format!("[strategy] kind `{kind}` needs a `head`")))
        }
        (_, Some(h)) => {
            let _: HeadKind = h.parse()?;
            return Err(Error::Config(format!(
                "[strategy] `head` applies only to proposed and proposed_mft, not `{kind}`"
            )));
        }
        (_, None) => kind,
    };
    name.parse()
}

fn synth_spec(file: &ConfigFile) -> Result<SynthSpec> {
    let mut spec = SynthSpec {
        n_concepts: 2000,
        min_len: 4,
        max_len: 12,
        zipf: 1.0,
        languages: Vec::new(),
        domains: Vec::new(),
        corpora: Vec::new(),
    };
    file.set("synth", "n_concepts", &mut spec.n_concepts)?;
    file.set("synth", "min_len", &mut spec.min_len)?;
    file.set("synth", "max_len", &mut spec.max_len)?;
    file.set("synth", "zipf", &mut spec.zipf)?;
    spec.languages = list(&file.get::<String>("synth", "languages")?.unwrap_or_default());
    for (name, e) in file.prefixed("synth", "domain.") {
        let parts = list(&e.value);
        let [start, size, reorder] = parts.as_slice() else {
            return Err(bad_entry("synth", e, "expected `start, size, reorder`"));
        };
        spec.domains.push(DomainSpec {
            name: name.to_owned(),
            region_start: start.parse().map_err(|_| bad_entry("synth", e, "bad region start"))?,
            region_size: size.parse().map_err(|_| bad_entry("synth", e, "bad region size"))?,
            reorder: reorder.parse().map_err(|err| bad_entry("synth", e, strip_category(&err)))?,
        });
    }
    for (name, e) in file.prefixed("synth", "corpus.") {
        let parts = list(&e.value);
        let [src, tgt, domain, train, dev, test] = parts.as_slice() else {
            return Err(bad_entry("synth", e, "expected `src, tgt, domain, train, dev, test`"));
        };
        let count = |s: &String| s.parse::<usize>().map_err(|_| bad_entry("synth", e, format!("bad size `{s}`")));
        spec.corpora.push(CorpusSpec::new(
            name,
            src,
            tgt,
            domain,
            [count(train)?, count(dev)?, count(test)?],
        ));
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "
[data]
corpus_dir = corpora
in_domain = in
out_of_domain = out, far
vocab_cap = 500

[model]
d_model = 32
n_heads = 4

[training]
seed = 9
max_batches = 40
oversample_cap = none

[strategy]
kind = proposed_mft
head = domextr

[decoding]
beam = 2
test_sentences = all
";

    #[test]
    fn parses_sections_and_resolves_paths() {
        let cfg = ExperimentConfig::from_text(BASE, Path::new("/exp")).unwrap();
        let data = cfg.data().unwrap();
        assert_eq!(data.corpus_dir, Path::new("/exp/corpora"));
        assert_eq!(data.prep_dir, Path::new("/exp/corpora/prepared"));
        assert_eq!(data.corpus_names(), ["in", "out", "far"]);
        assert_eq!(data.group_of("far").unwrap(), 3);
        assert!(matches!(data.group_of("x"), Err(Error::Context(_))));
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.training.max_batches, 40);
        assert_eq!(cfg.training.oversample_cap, None);
        assert_eq!(cfg.strategy, StrategyKind::ProposedMft(HeadKind::DomExtr));
        assert_eq!(cfg.decoding.beam.beam, 2);
        assert_eq!(cfg.decoding.test_sentences, None);
        assert_eq!(cfg.prep.vocab_cap, 500);
    }

    fn rejects(text: &str, needle: &str) {
        match ExperimentConfig::from_text(text, Path::new(".")) {
            Err(Error::Config(m)) => assert!(m.contains(needle), "`{m}` lacks `{needle}`"),
            other => panic!("expected a config error containing `{needle}`, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        rejects("[model]\nd_modle = 3\n", "unknown key `d_modle`");
        rejects("[modle]\n", "unknown section");
        rejects("d_model = 3\n", "outside any section");
        rejects("[model]\nd_model = 3\nd_model = 4\n", "repeated");
        rejects("[model]\nd_model\n", "key = value");
    }

    #[test]
    fn invalid_values_are_rejected_before_any_work() {
        rejects("[model]\nd_model = many\n", "invalid value");
        rejects("[model]\nd_model = 30\nn_heads = 4\n", "divisible");
        rejects("[training]\nwindow = 0\n", "window");
        rejects("[decoding]\nbeam = 0\n", "beam");
        rejects("[decoding]\nlast_k = 0\n", "last_k");
        rejects("[strategy]\nkind = proposed\n", "needs a `head`");
        rejects("[strategy]\nkind = fine_tuning\nhead = domextr\n", "applies only");
        rejects("[training]\nhandoff = maybe\n", "handoff");
        rejects("[synth]\nlanguages = ja\ncorpus.c = ja, ja, nowhere, 1, 1, 1\n", "[synth]");
        rejects("[data]\ncorpus_dir = c\nin_domain = a\nout_of_domain = a\n", "twice");
        assert!(matches!(
            ExperimentConfig::from_text("[strategy]\nkind = proposed\nhead = vanilla\n", Path::new(".")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn synth_section() {
        let text = "
[synth]
n_concepts = 300
languages = ja, en
domain.in = 0, 100, identity
domain.out = 50, 100, swap_pairs
corpus.in = ja, en, in, 20, 5, 5
corpus.out = ja, en, out, 200, 5, 5
";
        let cfg = ExperimentConfig::from_text(text, Path::new(".")).unwrap();
        let s = cfg.synth().unwrap();
        assert_eq!(s.n_concepts, 300);
        assert_eq!(s.domains.len(), 2);
        assert_eq!(s.corpora[1].train, 200);
        assert!(cfg.data().is_err());
    }
}
