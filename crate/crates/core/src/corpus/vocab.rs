use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{read_file, write_file, ParallelCorpus};
use crate::error::{bail, Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
/// Number of special symbols preceding the tag tokens.
pub const RESERVED_COUNT: usize = SPECIALS.len();

/// Bijective token ↔ id table. Ids `0..n_reserved` hold the special
/// symbols followed by the tag tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    n_reserved: usize,
}

impl Vocab {
    /// Builds a table from tokens in id order. The first `n_reserved`
    /// entries must be the special symbols and then the tags.
    pub fn from_tokens(tokens: Vec<String>, n_reserved: usize) -> Result<Self> {
        if n_reserved < RESERVED_COUNT || tokens.len() < n_reserved {
            bail!(Vocab, "vocabulary must start with the {RESERVED_COUNT} special symbols");
        }
        if tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            bail!(Vocab, "vocabulary must start with {SPECIALS:?}");
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                bail!(Vocab, "token {i} is empty or contains whitespace");
            }
            if index.insert(t.clone(), i as u32).is_some() {
                bail!(Vocab, "token `{t}` appears twice");
            }
        }
        Ok(Self {
            tokens,
            index,
            n_reserved,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_reserved(&self) -> usize {
        self.n_reserved
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Ids for `tokens`, unknown ones as [`UNK`].
    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Tokens for `ids`, stopping at [`EOS`] and skipping [`PAD`]/[`BOS`].
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK as usize]).to_owned())
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    /// Reads a vocabulary file. The reserved block is the special symbols
    /// followed by whichever of `tags` come next, in order.
    pub fn from_text(text: &str, tags: &[String]) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        let n_tags = tokens
            .iter()
            .skip(RESERVED_COUNT)
            .take_while(|t| tags.contains(t))
            .count();
        Self::from_tokens(tokens, RESERVED_COUNT + n_tags)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_text())
    }

    pub fn load(path: &Path, tags: &[String]) -> Result<Self> {
        Self::from_text(&read_file(path)?, tags)
    }
}

/// Reserved symbols, then `tags`, then corpus tokens by descending count
/// (ties lexicographic) until the table holds `cap` entries.
pub fn build_vocab(corpora: &[ParallelCorpus], tags: &[String], cap: usize) -> Result<Vocab> {
    let reserved = RESERVED_COUNT + tags.len();
    if cap < reserved {
        bail!(Config, "vocabulary cap {cap} is below the {reserved} reserved tokens");
    }
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(tags.iter().cloned());
    let skip: HashSet<&str> = tokens.iter().map(String::as_str).collect();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in corpora {
        for (s, t) in &c.pairs {
            for w in s.iter().chain(t) {
                if !skip.contains(w.as_str()) {
                    *counts.entry(w.as_str()).or_default() += 1;
                }
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    tokens.extend(ranked.into_iter().take(cap - reserved).map(|(t, _)| t.to_owned()));
    Vocab::from_tokens(tokens, reserved)
}

/// Child id → parent id table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabMap {
    pub table: Vec<u32>,
}

impl VocabMap {
    pub fn map(&self, child_id: u32) -> u32 {
        self.table[child_id as usize]
    }
}

/// Assigns the child vocabulary to parent embedding slots. Reserved ids map
/// to themselves, tokens the parent already knows keep the parent id, and
/// every new token takes a distinct, randomly chosen unclaimed parent slot.
pub fn random_vocab_map(parent: &Vocab, child: &Vocab, seed: u64) -> Result<VocabMap> {
    let reserved = child.n_reserved;
    if reserved != parent.n_reserved || child.tokens[..reserved] != parent.tokens[..reserved] {
        bail!(Mapping, "parent and child vocabularies disagree on the reserved tokens");
    }
    let capacity = parent.len() - reserved;
    if child.len() - reserved > capacity {
        bail!(
            Mapping,
            "child vocabulary has {} tokens but the parent only {capacity} slots",
            child.len() - reserved
        );
    }
    let mut table: Vec<Option<u32>> = vec![None; child.len()];
    let mut claimed = vec![false; parent.len()];
    for i in 0..reserved {
        table[i] = Some(i as u32);
        claimed[i] = true;
    }
    for (i, tok) in child.tokens.iter().enumerate().skip(reserved) {
        if let Some(p) = parent.id(tok) {
            table[i] = Some(p);
            claimed[p as usize] = true;
        }
    }
    let mut free: Vec<u32> = (0..parent.len() as u32).filter(|&p| !claimed[p as usize]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    free.shuffle(&mut rng);
    let mut free = free.into_iter();
    let table = table
        .into_iter()
        .map(|slot| slot.or_else(|| free.next()).ok_or_else(|| Error::Mapping("ran out of parent slots".into())))
        .collect::<Result<_>>()?;
    Ok(VocabMap { table })
}

/// The child vocabulary re-indexed into the parent id space: slot `p` holds
/// the child token mapped to `p`, or the parent token when none is.
pub fn remap_vocab(parent: &Vocab, child: &Vocab, map: &VocabMap) -> Result<Vocab> {
    if map.table.len() != child.len() {
        bail!(Mapping, "mapping covers {} of {} child tokens", map.table.len(), child.len());
    }
    let mut tokens = parent.tokens.clone();
    for (c, &p) in map.table.iter().enumerate() {
        let Some(slot) = tokens.get_mut(p as usize) else {
            bail!(Mapping, "parent slot {p} out of range");
        };
        *slot = child.tokens[c].clone();
    }
    Vocab::from_tokens(tokens, parent.n_reserved).map_err(|e| Error::Mapping(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, Split};

    fn corpus(lines: &[&str]) -> ParallelCorpus {
        let pairs = lines.iter().map(|l| (tokenize(l), tokenize("z"))).collect();
        ParallelCorpus::new("c", "a", "b", "d", Split::Train, pairs).unwrap()
    }

    fn tags() -> Vec<String> {
        vec!["2d1".into(), "2d2".into()]
    }

    #[test]
    fn reserved_first_then_frequency() {
        let v = build_vocab(&[corpus(&["b a a", "c b a 2d1"])], &tags(), 100).unwrap();
        let order: Vec<&str> = v.tokens().iter().map(String::as_str).collect();
        // z appears twice (targets), ties broken lexicographically
        assert_eq!(order, ["<pad>", "<s>", "</s>", "<unk>", "2d1", "2d2", "a", "b", "z", "c"]);
        assert_eq!(v.n_reserved(), 6);
    }

    #[test]
    fn cap_boundaries() {
        let c = corpus(&["b a a"]);
        let v = build_vocab(&[c.clone()], &tags(), 7).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.token(6), Some("a"));
        assert!(matches!(build_vocab(&[c], &tags(), 5), Err(Error::Config(_))));
    }

    #[test]
    fn encode_decode() {
        let v = build_vocab(&[corpus(&["x y"])], &[], 100).unwrap();
        let ids = v.encode(&tokenize("x q y"));
        assert_eq!(ids[1], UNK);
        let mut with_eos = ids.clone();
        with_eos.extend([EOS, v.id("x").unwrap()]);
        assert_eq!(v.decode(&with_eos), tokenize("x <unk> y"));
    }

    #[test]
    fn text_round_trip() {
        let v = build_vocab(&[corpus(&["x y y"])], &tags(), 100).unwrap();
        let back = Vocab::from_text(&v.to_text(), &tags()).unwrap();
        assert_eq!(back, v);
        assert!(Vocab::from_text("a\nb\n", &[]).is_err());
    }

    #[test]
    fn random_map_properties() {
        let parent = build_vocab(&[corpus(&["p1 p2 p3 p4 p5 p6 shared"])], &tags(), 100).unwrap();
        let child = build_vocab(&[corpus(&["c1 c2 c3 shared"])], &tags(), 100).unwrap();
        let m = random_vocab_map(&parent, &child, 1).unwrap();
        for i in 0..child.n_reserved() {
            assert_eq!(m.map(i as u32), i as u32);
        }
        let mut seen = HashSet::new();
        assert!(m.table.iter().all(|&p| seen.insert(p)));
        let shared = child.id("shared").unwrap();
        assert_eq!(m.map(shared), parent.id("shared").unwrap());
        assert_eq!(m, random_vocab_map(&parent, &child, 1).unwrap());
        let distinct = (2..7).filter(|&s| random_vocab_map(&parent, &child, s).unwrap() != m).count();
        assert!(distinct >= 4);
        let remapped = remap_vocab(&parent, &child, &m).unwrap();
        assert_eq!(remapped.len(), parent.len());
        for (i, t) in child.tokens().iter().enumerate() {
            assert_eq!(remapped.id(t), Some(m.map(i as u32)));
        }
    }

    #[test]
    fn random_map_capacity() {
        let parent = build_vocab(&[corpus(&["p1"])], &tags(), 100).unwrap();
        let child = build_vocab(&[corpus(&["c1 c2 c3"])], &tags(), 100).unwrap();
        assert!(matches!(random_vocab_map(&parent, &child, 1), Err(Error::Mapping(_))));
    }
}
