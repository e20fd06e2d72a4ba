//! Parallel corpora and everything that turns them into training batches:
//! tagging, oversampled merging, subword segmentation, vocabularies,
//! batching, and a synthetic task generator.

pub mod batch;
pub mod bpe;
pub mod merge;
pub mod synth;
pub mod tags;
pub mod vocab;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{bail, Error, Result};
use crate::heads::GroupId;

pub use batch::{make_batches, Batch, Example};
pub use bpe::{apply_bpe, detokenize, learn_bpe, SubwordModel, END_OF_WORD};
pub use merge::{concat, oversample_merge, MergeOptions};
pub use synth::{synth_tasks, CorpusSpec, DomainSpec, Reorder, SynthSpec, SynthWorld};
pub use tags::{inject_tags, strip_tags, TagScheme};
pub use vocab::{build_vocab, random_vocab_map, remap_vocab, Vocab, VocabMap};

pub type Sentence = Vec<String>;

/// Splits text on whitespace.
pub fn tokenize(text: &str) -> Sentence {
    text.split_whitespace().map(str::to_owned).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown split `{s}`")))
    }
}

/// Sentence pairs of one domain and language direction.
///
/// `groups`, when present, holds the corpus-group id of every pair; it is
/// how group identity reaches the domain-aware output heads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub name: String,
    pub src_lang: String,
    pub tgt_lang: String,
    pub domain: String,
    pub split: Split,
    pub pairs: Vec<(Sentence, Sentence)>,
    pub groups: Option<Vec<GroupId>>,
}

impl ParallelCorpus {
    pub fn new(
        name: &str,
        src_lang: &str,
        tgt_lang: &str,
        domain: &str,
        split: Split,
        pairs: Vec<(Sentence, Sentence)>,
    ) -> Result<Self> {
        let c = Self {
            name: name.to_owned(),
            src_lang: src_lang.to_owned(),
            tgt_lang: tgt_lang.to_owned(),
            domain: domain.to_owned(),
            split,
            pairs,
            groups: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.split == Split::Train && self.pairs.is_empty() {
            bail!(Data, "training corpus `{}` is empty", self.name);
        }
        if let Some(i) = self.pairs.iter().position(|(s, t)| s.is_empty() || t.is_empty()) {
            bail!(Data, "corpus `{}` pair {} has an empty side", self.name, i + 1);
        }
        if let Some(g) = &self.groups {
            if g.len() != self.pairs.len() {
                bail!(Data, "corpus `{}` has {} group ids for {} pairs", self.name, g.len(), self.pairs.len());
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Labels every pair with `group`.
    pub fn with_group(mut self, group: GroupId) -> Self {
        self.groups = Some(vec![group; self.pairs.len()]);
        self
    }

    pub fn without_groups(mut self) -> Self {
        self.groups = None;
        self
    }

    pub fn sources(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|(s, _)| s)
    }

    pub fn targets(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|(_, t)| t)
    }

    /// Applies `f` to both sides of every pair.
    pub fn map_sentences(&self, mut f: impl FnMut(&Sentence) -> Sentence) -> Self {
        let pairs = self.pairs.iter().map(|(s, t)| (f(s), f(t))).collect();
        Self { pairs, ..self.clone_meta() }
    }

    fn clone_meta(&self) -> Self {
        Self {
            name: self.name.clone(),
            src_lang: self.src_lang.clone(),
            tgt_lang: self.tgt_lang.clone(),
            domain: self.domain.clone(),
            split: self.split,
            pairs: Vec::new(),
            groups: self.groups.clone(),
        }
    }

    /// `key=value` lines describing the corpus.
    pub fn manifest(&self) -> Vec<(String, String)> {
        vec![
            ("name".into(), self.name.clone()),
            ("src_lang".into(), self.src_lang.clone()),
            ("tgt_lang".into(), self.tgt_lang.clone()),
            ("domain".into(), self.domain.clone()),
            ("split".into(), self.split.name().into()),
            ("pairs".into(), self.pairs.len().to_string()),
        ]
    }

    /// Writes `<stem>.tsv` (one `source<TAB>target` pair per line) and
    /// `<stem>.manifest` (the [`ParallelCorpus::manifest`] lines followed by
    /// `extra`).
    pub fn write(&self, dir: &Path, stem: &str, extra: &[(String, String)]) -> Result<()> {
        let mut text = String::new();
        for (s, t) in &self.pairs {
            text.push_str(&s.join(" "));
            text.push('\t');
            text.push_str(&t.join(" "));
            text.push('\n');
        }
        write_file(&dir.join(format!("{stem}.tsv")), &text)?;
        let mut manifest = String::new();
        for (k, v) in self.manifest().iter().chain(extra) {
            manifest.push_str(&format!("{k}={v}\n"));
        }
        write_file(&dir.join(format!("{stem}.manifest")), &manifest)
    }

    /// Reads a corpus written by [`ParallelCorpus::write`].
    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let manifest = read_file(&dir.join(format!("{stem}.manifest")))?;
        let kv = parse_key_values(&manifest)?;
        let get = |k: &str| {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::Data(format!("manifest of `{stem}` lacks `{k}`")))
        };
        let text = read_file(&dir.join(format!("{stem}.tsv")))?;
        let pairs = parse_pairs(&text)?;
        let expected: usize = get("pairs")?
            .parse()
            .map_err(|_| Error::Data(format!("manifest of `{stem}` has a bad pair count")))?;
        if expected != pairs.len() {
            bail!(Data, "`{stem}` has {} pairs, manifest says {expected}", pairs.len());
        }
        Self::new(
            &get("name")?,
            &get("src_lang")?,
            &get("tgt_lang")?,
            &get("domain")?,
            get("split")?.parse()?,
            pairs,
        )
    }
}

/// Parses `source<TAB>target` lines.
pub fn parse_pairs(text: &str) -> Result<Vec<(Sentence, Sentence)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let (s, t) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("line {} has no TAB separator", i + 1)))?;
            Ok((tokenize(s), tokenize(t)))
        })
        .collect()
}

/// Parses `key=value` lines, ignoring blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(str::trim)
        .enumerate()
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("line {}: expected key=value", i + 1)))?;
            Ok((k.trim().to_owned(), v.trim().to_owned()))
        })
        .collect()
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(s: &str, t: &str) -> (Sentence, Sentence) {
        (tokenize(s), tokenize(t))
    }

    #[test]
    fn train_corpus_must_be_nonempty() {
        let r = ParallelCorpus::new("x", "j", "e", "d", Split::Train, vec![]);
        assert!(matches!(r, Err(Error::Data(_))));
        assert!(ParallelCorpus::new("x", "j", "e", "d", Split::Dev, vec![]).is_ok());
        let r = ParallelCorpus::new("x", "j", "e", "d", Split::Test, vec![pair("a", "")]);
        assert!(r.is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("mdnmt-corpus-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let c = ParallelCorpus::new(
            "alt",
            "j",
            "e",
            "news",
            Split::Dev,
            vec![pair("猫 が いる", "there is a cat"), pair("b", "c d")],
        )
        .unwrap();
        c.write(&dir, "alt.dev", &[("seed".into(), "3".into())]).unwrap();
        let back = ParallelCorpus::read(&dir, "alt.dev").unwrap();
        assert_eq!(back, c);
        let manifest = std::fs::read_to_string(dir.join("alt.dev.manifest")).unwrap();
        assert!(manifest.contains("seed=3\n"));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn key_values_skip_comments() {
        let kv = parse_key_values("# c\n a = 1 \n\nb=x=y\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "x=y".into())]);
        assert!(parse_key_values("novalue").is_err());
    }
}
