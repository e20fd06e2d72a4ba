use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use super::{read_file, write_file, ParallelCorpus, Sentence};
use crate::error::{Error, Result};

/// Suffix carried by the last symbol of every word.
pub const END_OF_WORD: &str = "</w>";

/// Ordered byte-pair merge rules plus the tokens that are never split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SubwordModel {
    pub merges: Vec<(String, String)>,
    pub protected: BTreeSet<String>,
    ranks: HashMap<(String, String), usize>,
}

impl SubwordModel {
    pub fn new(merges: Vec<(String, String)>, protected: impl IntoIterator<Item = String>) -> Self {
        let ranks = merges.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        Self {
            merges,
            protected: protected.into_iter().collect(),
            ranks,
        }
    }

    /// One merge per line, the two symbols separated by a space.
    pub fn to_text(&self) -> String {
        self.merges.iter().map(|(a, b)| format!("{a} {b}\n")).collect()
    }

    pub fn from_text(text: &str, protected: impl IntoIterator<Item = String>) -> Result<Self> {
        let merges = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, l)| {
                let mut parts = l.split(' ');
                match (parts.next(), parts.next(), parts.next()) {
                    (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => Ok((a.to_owned(), b.to_owned())),
                    _ => Err(Error::Data(format!("merge rule on line {} is not a symbol pair", i + 1))),
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self::new(merges, protected))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_text())
    }

    pub fn load(path: &Path, protected: impl IntoIterator<Item = String>) -> Result<Self> {
        Self::from_text(&read_file(path)?, protected)
    }

    /// Segments one word.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        if self.protected.contains(word) {
            return vec![word.to_owned()];
        }
        let mut symbols = initial_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == *a && symbols[i + 1] == *b {
                    out.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = out;
        }
        symbols
    }

    /// Segments both sides of every pair, caching repeated words.
    pub fn apply_corpus(&self, corpus: &ParallelCorpus) -> ParallelCorpus {
        let mut cache: HashMap<String, Vec<String>> = HashMap::new();
        corpus.map_sentences(|s| {
            let mut out = Vec::with_capacity(s.len() * 2);
            for w in s {
                let seg = cache.entry(w.clone()).or_insert_with(|| self.segment_word(w));
                out.extend(seg.iter().cloned());
            }
            out
        })
    }
}

fn initial_symbols(word: &str) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = symbols.last_mut() {
        last.push_str(END_OF_WORD);
    }
    symbols
}

/// Learns `n_merges` merges over the source and target words of `corpora`.
/// Each round merges the most frequent adjacent symbol pair; equal counts
/// go to the lexicographically smallest pair. Learning stops early when no
/// pair is left.
pub fn learn_bpe(corpora: &[ParallelCorpus], n_merges: usize, protected: &[String]) -> SubwordModel {
    let protected_set: BTreeSet<String> = protected.iter().cloned().collect();
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for c in corpora {
        for (s, t) in &c.pairs {
            for w in s.iter().chain(t) {
                if !protected_set.contains(w) {
                    *freq.entry(w.as_str()).or_default() += 1;
                }
            }
        }
    }
    // Symbols are interned so that pair counting hashes integers.
    let mut names: Vec<String> = Vec::new();
    let mut ids: HashMap<String, u32> = HashMap::new();
    let mut intern = |s: String, names: &mut Vec<String>| -> u32 {
        *ids.entry(s.clone()).or_insert_with(|| {
            names.push(s);
            (names.len() - 1) as u32
        })
    };
    let mut words: Vec<(Vec<u32>, usize)> = freq
        .iter()
        .map(|(w, &f)| {
            let syms = initial_symbols(w).into_iter().map(|s| intern(s, &mut names)).collect();
            (syms, f)
        })
        .collect();
    let mut merges = Vec::with_capacity(n_merges);
    for _ in 0..n_merges {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (syms, f) in &words {
            for w in syms.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += f;
            }
        }
        let best = counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (&names[pa.0 as usize], &names[pa.1 as usize]);
                let kb = (&names[pb.0 as usize], &names[pb.1 as usize]);
                kb.cmp(&ka)
            })
        });
        let Some(((a, b), _)) = best else { break };
        let merged = format!("{}{}", names[a as usize], names[b as usize]);
        merges.push((names[a as usize].clone(), names[b as usize].clone()));
        let m = intern(merged, &mut names);
        for (syms, _) in &mut words {
            if syms.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    out.push(m);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
        }
    }
    SubwordModel::new(merges, protected_set)
}

/// Subword segmentation of a token sequence; protected tokens stay whole.
pub fn apply_bpe(model: &SubwordModel, sentence: &[String]) -> Sentence {
    sentence.iter().flat_map(|w| model.segment_word(w)).collect()
}

/// Inverse of [`apply_bpe`]: joins symbols up to each end-of-word marker.
/// Protected tokens stand alone.
pub fn detokenize(model: &SubwordModel, subwords: &[String]) -> Sentence {
    let mut words = Vec::new();
    let mut current = String::new();
    for s in subwords {
        if let Some(stem) = s.strip_suffix(END_OF_WORD) {
            current.push_str(stem);
            words.push(std::mem::take(&mut current));
        } else if current.is_empty() && model.protected.contains(s) {
            words.push(s.clone());
        } else {
            current.push_str(s);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, Split};

    fn corpus(lines: &[&str]) -> ParallelCorpus {
        let pairs = lines.iter().map(|l| (tokenize(l), tokenize(l))).collect();
        ParallelCorpus::new("c", "a", "b", "d", Split::Train, pairs).unwrap()
    }

    #[test]
    fn zero_merges_is_character_level() {
        let m = learn_bpe(&[corpus(&["abc de"])], 0, &[]);
        assert!(m.merges.is_empty());
        assert_eq!(apply_bpe(&m, &tokenize("abc")), vec!["a", "b", "c</w>"]);
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let lines = vec!["aaab"; 10];
        let m = learn_bpe(&[corpus(&lines)], 1, &[]);
        assert_eq!(m.merges[0], ("a".to_string(), "a".to_string()));
        assert_eq!(apply_bpe(&m, &tokenize("aaab")), vec!["aa", "a", "b</w>"]);
        let m2 = learn_bpe(&[corpus(&lines)], 2, &[]);
        assert_eq!(apply_bpe(&m2, &tokenize("aaab")), vec!["aa", "ab</w>"]);
    }

    #[test]
    fn ties_break_lexicographically() {
        // "ab" and "cd" are equally frequent
        let m = learn_bpe(&[corpus(&["cd ab"])], 1, &[]);
        assert_eq!(m.merges[0], ("a".to_string(), "b</w>".to_string()));
    }

    #[test]
    fn learning_is_deterministic() {
        let c = corpus(&["the cat sat on the mat", "a cat and a hat"]);
        assert_eq!(learn_bpe(&[c.clone()], 20, &[]), learn_bpe(&[c], 20, &[]));
    }

    #[test]
    fn tags_are_not_split() {
        let tags = vec!["2d1".to_string()];
        let m = learn_bpe(&[corpus(&["2d1 d1d1", "2d1 x"])], 10, &tags);
        let seg = apply_bpe(&m, &tokenize("2d1 d1"));
        assert_eq!(seg[0], "2d1");
        assert_eq!(detokenize(&m, &seg[1..]), tokenize("d1"));
        let seg = apply_bpe(&m, &tokenize("2d1 hello"));
        assert_eq!(detokenize(&m, &seg), tokenize("2d1 hello"));
    }

    #[test]
    fn round_trip_with_unicode() {
        let c = corpus(&["日本語 の 文 です", "naïve café ünïcödé", "ab ab abab"]);
        let m = learn_bpe(&[c.clone()], 15, &[]);
        for (s, _) in &c.pairs {
            assert_eq!(&detokenize(&m, &apply_bpe(&m, s)), s);
        }
    }

    #[test]
    fn text_round_trip() {
        let m = learn_bpe(&[corpus(&["hello hello world"])], 5, &[]);
        let back = SubwordModel::from_text(&m.to_text(), []).unwrap();
        assert_eq!(back.merges, m.merges);
        assert!(SubwordModel::from_text("a b c\n", []).is_err());
    }
}
