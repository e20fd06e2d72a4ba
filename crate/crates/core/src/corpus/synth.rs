//! Deterministic toy translation tasks.
//!
//! Sentences are drawn from a base language of integer concepts. A language
//! spells each concept as a fixed word (a seeded bijection), so translation
//! is word substitution plus the reordering rule of the sentence's domain.
//! Each domain draws its concepts from its own region of the concept
//! space; regions may overlap partially.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParallelCorpus, Sentence, Split};
use crate::error::{bail, Error, Result};

const CONSONANTS: &[char] = &[
    'b', 'c', 'd', 'f', 'g', 'h', 'j', 'k', 'l', 'm', 'n', 'p', 'q', 'r', 's', 't', 'v', 'w', 'x', 'z',
];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
const CONSONANTS_PER_LANG: usize = 5;
const MAX_ATTEMPTS: usize = 200;

/// Word-order rule applied when translating a sentence of a domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reorder {
    Identity,
    /// `a b c d e → b a d c e`
    SwapPairs,
    /// Reverses consecutive windows of the given width.
    ReverseWindow(usize),
    Reverse,
    /// Moves the first `k` words to the end.
    RotateLeft(usize),
}

impl Reorder {
    pub fn apply<T: Clone>(&self, xs: &[T]) -> Vec<T> {
        match *self {
            Reorder::Identity => xs.to_vec(),
            Reorder::SwapPairs => xs
                .chunks(2)
                .flat_map(|c| c.iter().rev().cloned().collect::<Vec<_>>())
                .collect(),
            Reorder::ReverseWindow(w) => xs
                .chunks(w.max(1))
                .flat_map(|c| c.iter().rev().cloned().collect::<Vec<_>>())
                .collect(),
            Reorder::Reverse => xs.iter().rev().cloned().collect(),
            Reorder::RotateLeft(k) => {
                let k = if xs.is_empty() { 0 } else { k % xs.len() };
                xs[k..].iter().chain(&xs[..k]).cloned().collect()
            }
        }
    }
}

impl fmt::Display for Reorder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reorder::Identity => f.write_str("identity"),
            Reorder::SwapPairs => f.write_str("swap_pairs"),
            Reorder::ReverseWindow(w) => write!(f, "reverse_window:{w}"),
            Reorder::Reverse => f.write_str("reverse"),
            Reorder::RotateLeft(k) => write!(f, "rotate:{k}"),
        }
    }
}

impl FromStr for Reorder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown reordering rule `{s}`"));
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a.parse::<usize>().map_err(|_| bad())?)),
            None => (s, None),
        };
        match (name, arg) {
            ("identity", None) => Ok(Reorder::Identity),
            ("swap_pairs", None) => Ok(Reorder::SwapPairs),
            ("reverse", None) => Ok(Reorder::Reverse),
            ("reverse_window", Some(w)) if w > 0 => Ok(Reorder::ReverseWindow(w)),
            ("rotate", Some(k)) => Ok(Reorder::RotateLeft(k)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    /// Concepts `region_start..region_start + region_size`.
    pub region_start: usize,
    pub region_size: usize,
    pub reorder: Reorder,
}

impl DomainSpec {
    /// A domain of the same size as `anchor` sharing `fraction` of its
    /// region (the tail of the anchor's region).
    pub fn overlapping(name: &str, anchor: &DomainSpec, fraction: f64, reorder: Reorder) -> Self {
        let shared = (fraction.clamp(0.0, 1.0) * anchor.region_size as f64).round() as usize;
        Self {
            name: name.to_owned(),
            region_start: anchor.region_start + anchor.region_size - shared,
            region_size: anchor.region_size,
            reorder,
        }
    }

    pub fn region(&self) -> std::ops::Range<usize> {
        self.region_start..self.region_start + self.region_size
    }

    /// Fraction of this region also covered by `other`.
    pub fn overlap_fraction(&self, other: &DomainSpec) -> f64 {
        let r = other.region();
        self.region().filter(|c| r.contains(c)).count() as f64 / self.region_size as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub name: String,
    pub src_lang: String,
    pub tgt_lang: String,
    pub domain: String,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl CorpusSpec {
    pub fn new(name: &str, src: &str, tgt: &str, domain: &str, sizes: [usize; 3]) -> Self {
        Self {
            name: name.to_owned(),
            src_lang: src.to_owned(),
            tgt_lang: tgt.to_owned(),
            domain: domain.to_owned(),
            train: sizes[0],
            dev: sizes[1],
            test: sizes[2],
        }
    }

    fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_concepts: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Exponent of the rank-frequency law inside a region; 0 is uniform.
    pub zipf: f64,
    /// Language codes; the position selects the spelling alphabet.
    pub languages: Vec<String>,
    pub domains: Vec<DomainSpec>,
    pub corpora: Vec<CorpusSpec>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            bail!(Generator, "sentence lengths must satisfy 1 <= min_len <= max_len");
        }
        if self.n_concepts == 0 || self.languages.is_empty() || self.corpora.is_empty() {
            bail!(Generator, "need concepts, languages and corpora");
        }
        if !(self.zipf >= 0.0) {
            bail!(Generator, "zipf exponent must be non-negative");
        }
        for d in &self.domains {
            if d.region_size == 0 || d.region_start + d.region_size > self.n_concepts {
                bail!(Generator, "domain `{}` region exceeds the {} concepts", d.name, self.n_concepts);
            }
        }
        for c in &self.corpora {
            if c.train == 0 {
                bail!(Generator, "corpus `{}` has no training pairs", c.name);
            }
            if !self.domains.iter().any(|d| d.name == c.domain) {
                bail!(Generator, "corpus `{}` uses unknown domain `{}`", c.name, c.domain);
            }
            for l in [&c.src_lang, &c.tgt_lang] {
                if !self.languages.contains(l) {
                    bail!(Generator, "corpus `{}` uses unknown language `{l}`", c.name);
                }
            }
        }
        Ok(())
    }

    pub fn domain(&self, name: &str) -> Result<&DomainSpec> {
        self.domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Generator(format!("unknown domain `{name}`")))
    }
}

/// Lexicons and sampling state derived from a spec and a seed.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub spec: SynthSpec,
    seed: u64,
    words: HashMap<String, Vec<String>>,
    concepts: HashMap<String, HashMap<String, usize>>,
}

fn spell(mut index: usize, syllables: usize, consonants: &[char]) -> String {
    let base = consonants.len() * VOWELS.len();
    let mut out = String::with_capacity(2 * syllables);
    for _ in 0..syllables {
        let d = index % base;
        index /= base;
        out.push(consonants[d / VOWELS.len()]);
        out.push(VOWELS[d % VOWELS.len()]);
    }
    out
}

impl SynthWorld {
    pub fn new(spec: &SynthSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let base = (CONSONANTS_PER_LANG * VOWELS.len()) as f64;
        let syllables = ((spec.n_concepts as f64).ln() / base.ln()).ceil().max(2.0) as usize;
        let mut words = HashMap::new();
        let mut concepts = HashMap::new();
        for (li, lang) in spec.languages.iter().enumerate() {
            let consonants: Vec<char> = (0..CONSONANTS_PER_LANG)
                .map(|k| CONSONANTS[(li * CONSONANTS_PER_LANG + k) % CONSONANTS.len()])
                .collect();
            let mut perm: Vec<usize> = (0..spec.n_concepts).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(li as u64 + 1)));
            perm.shuffle(&mut rng);
            let lex: Vec<String> = perm.iter().map(|&p| spell(p, syllables, &consonants)).collect();
            let inv = lex.iter().enumerate().map(|(c, w)| (w.clone(), c)).collect();
            words.insert(lang.clone(), lex);
            concepts.insert(lang.clone(), inv);
        }
        Ok(Self {
            spec: spec.clone(),
            seed,
            words,
            concepts,
        })
    }

    pub fn word(&self, lang: &str, concept: usize) -> Result<&str> {
        self.words
            .get(lang)
            .and_then(|l| l.get(concept))
            .map(String::as_str)
            .ok_or_else(|| Error::Generator(format!("no word for concept {concept} in `{lang}`")))
    }

    pub fn concept(&self, lang: &str, word: &str) -> Result<usize> {
        self.concepts
            .get(lang)
            .and_then(|l| l.get(word))
            .copied()
            .ok_or_else(|| Error::Generator(format!("`{word}` is not a word of `{lang}`")))
    }

    /// The reference translation the generator assigns to `source`.
    pub fn translate(&self, src_lang: &str, tgt_lang: &str, domain: &str, source: &[String]) -> Result<Sentence> {
        let d = self.spec.domain(domain)?;
        let cs = source
            .iter()
            .map(|w| self.concept(src_lang, w))
            .collect::<Result<Vec<_>>>()?;
        d.reorder
            .apply(&cs)
            .into_iter()
            .map(|c| self.word(tgt_lang, c).map(str::to_owned))
            .collect()
    }

    fn sampler(&self, d: &DomainSpec, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<f64>) {
        let mut ranked: Vec<usize> = d.region().collect();
        ranked.shuffle(rng);
        let mut acc = 0.0;
        let cdf = (0..ranked.len())
            .map(|r| {
                acc += 1.0 / ((r + 1) as f64).powf(self.spec.zipf);
                acc
            })
            .collect();
        (ranked, cdf)
    }

    /// All corpora of the `SynthSpec`, train/dev/test for each (empty splits
    /// omitted), with dev and test sources disjoint from training and from
    /// each other.
    pub fn generate(&self) -> Result<Vec<ParallelCorpus>> {
        let mut out = Vec::new();
        for (ci, c) in self.spec.corpora.iter().enumerate() {
            let d = self.spec.domain(&c.domain)?;
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(1000 * (ci as u64 + 1)));
            let (ranked, cdf) = self.sampler(d, &mut rng);
            let total = *cdf.last().unwrap();
            let mut seen: HashSet<Vec<usize>> = HashSet::new();
            for split in Split::ALL {
                let n = c.size(split);
                if n == 0 {
                    continue;
                }
                let mut pairs = Vec::with_capacity(n);
                let mut attempts = 0;
                while pairs.len() < n {
                    let len = rng.gen_range(self.spec.min_len..=self.spec.max_len);
                    let cs: Vec<usize> = (0..len)
                        .map(|_| {
                            let u = rng.gen::<f64>() * total;
                            ranked[cdf.partition_point(|&x| x <= u).min(ranked.len() - 1)]
                        })
                        .collect();
                    let fresh = seen.insert(cs.clone());
                    if split != Split::Train && !fresh {
                        attempts += 1;
                        if attempts > MAX_ATTEMPTS * n {
                            bail!(
                                Generator,
                                "cannot draw {n} {split} sentences for `{}` disjoint from the other splits",
                                c.name
                            );
                        }
                        continue;
                    }
                    let src: Sentence = cs.iter().map(|&k| self.word(&c.src_lang, k).map(str::to_owned)).collect::<Result<_>>()?;
                    let tgt: Sentence = d
                        .reorder
                        .apply(&cs)
                        .into_iter()
                        .map(|k| self.word(&c.tgt_lang, k).map(str::to_owned))
                        .collect::<Result<_>>()?;
                    pairs.push((src, tgt));
                }
                out.push(ParallelCorpus::new(&c.name, &c.src_lang, &c.tgt_lang, &c.domain, split, pairs)?);
            }
        }
        Ok(out)
    }
}

/// `SynthWorld::new(spec, seed)?.generate()`
pub fn synth_tasks(spec: &SynthSpec, seed: u64) -> Result<Vec<ParallelCorpus>> {
    SynthWorld::new(spec, seed)?.generate()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        let ind = DomainSpec {
            name: "in".into(),
            region_start: 0,
            region_size: 40,
            reorder: Reorder::SwapPairs,
        };
        let out = DomainSpec::overlapping("out", &ind, 0.25, Reorder::Identity);
        SynthSpec {
            n_concepts: 120,
            min_len: 3,
            max_len: 7,
            zipf: 1.0,
            languages: vec!["j".into(), "e".into()],
            domains: vec![ind, out],
            corpora: vec![
                CorpusSpec::new("alt", "j", "e", "in", [50, 10, 10]),
                CorpusSpec::new("kftt", "j", "e", "out", [200, 10, 0]),
            ],
        }
    }

    #[test]
    fn reorder_rules() {
        let xs = [1, 2, 3, 4, 5];
        assert_eq!(Reorder::SwapPairs.apply(&xs), vec![2, 1, 4, 3, 5]);
        assert_eq!(Reorder::ReverseWindow(3).apply(&xs), vec![3, 2, 1, 5, 4]);
        assert_eq!(Reorder::Reverse.apply(&xs), vec![5, 4, 3, 2, 1]);
        assert_eq!(Reorder::RotateLeft(2).apply(&xs), vec![3, 4, 5, 1, 2]);
        for r in ["identity", "swap_pairs", "reverse_window:3", "reverse", "rotate:1"] {
            assert_eq!(r.parse::<Reorder>().unwrap().to_string(), r);
        }
        assert!("reverse_window:0".parse::<Reorder>().is_err());
    }

    #[test]
    fn deterministic_and_sized() {
        let a = synth_tasks(&spec(), 4).unwrap();
        assert_eq!(a, synth_tasks(&spec(), 4).unwrap());
        assert_ne!(a, synth_tasks(&spec(), 5).unwrap());
        let sizes: Vec<(String, Split, usize)> = a.iter().map(|c| (c.name.clone(), c.split, c.len())).collect();
        assert_eq!(sizes.len(), 5);
        assert_eq!(sizes[0], ("alt".into(), Split::Train, 50));
        assert_eq!(sizes[4], ("kftt".into(), Split::Dev, 10));
    }

    #[test]
    fn splits_are_disjoint() {
        let all = synth_tasks(&spec(), 1).unwrap();
        let alt: Vec<_> = all.iter().filter(|c| c.name == "alt").collect();
        let train: HashSet<_> = alt[0].sources().collect();
        for other in &alt[1..] {
            assert!(other.sources().all(|s| !train.contains(s)));
        }
    }

    #[test]
    fn impossible_disjointness_is_reported() {
        let mut s = spec();
        s.n_concepts = 2;
        s.domains = vec![DomainSpec {
            name: "in".into(),
            region_start: 0,
            region_size: 1,
            reorder: Reorder::Identity,
        }];
        s.min_len = 1;
        s.max_len = 1;
        s.corpora = vec![CorpusSpec::new("x", "j", "e", "in", [5, 1, 0])];
        assert!(matches!(synth_tasks(&s, 0), Err(Error::Generator(_))));
    }

    #[test]
    fn overlap_helper() {
        let s = spec();
        assert_eq!(s.domains[1].overlap_fraction(&s.domains[0]), 0.25);
        assert_eq!(s.domains[1].region_start, 30);
    }
}
