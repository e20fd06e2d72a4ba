use super::ParallelCorpus;
use crate::error::{bail, Result};

/// Reserved source-prefix tokens: `2d<k>` for domain `k` and `2<lang>` for a
/// target language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagScheme {
    pub n_domains: usize,
    pub target_langs: Vec<String>,
    pub include_lang_tag: bool,
}

impl TagScheme {
    pub fn new(n_domains: usize, target_langs: &[&str], include_lang_tag: bool) -> Self {
        Self {
            n_domains,
            target_langs: target_langs.iter().map(|s| s.to_string()).collect(),
            include_lang_tag,
        }
    }

    pub fn domain_tag(k: usize) -> String {
        format!("2d{k}")
    }

    pub fn lang_tag(lang: &str) -> String {
        format!("2{lang}")
    }

    /// Every tag of the scheme: language tags (when enabled) then domain
    /// tags in index order.
    pub fn tags(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.include_lang_tag {
            out.extend(self.target_langs.iter().map(|l| Self::lang_tag(l)));
        }
        out.extend((1..=self.n_domains).map(Self::domain_tag));
        out
    }

    pub fn is_tag(&self, token: &str) -> bool {
        self.tags().iter().any(|t| t == token)
    }

    /// Prefix tokens for a sentence of domain `k` translated into `tgt_lang`.
    pub fn prefix(&self, domain_index: usize, tgt_lang: &str) -> Result<Vec<String>> {
        if domain_index == 0 || domain_index > self.n_domains {
            bail!(Scheme, "domain tag 2d{domain_index} is not registered (1..={})", self.n_domains);
        }
        let mut out = Vec::with_capacity(2);
        if self.include_lang_tag {
            if !self.target_langs.iter().any(|l| l == tgt_lang) {
                bail!(Scheme, "target-language tag 2{tgt_lang} is not registered");
            }
            out.push(Self::lang_tag(tgt_lang));
        }
        out.push(Self::domain_tag(domain_index));
        Ok(out)
    }
}

/// Prefixes every source sentence with `[lang tag][domain tag]`.
pub fn inject_tags(
    corpus: &ParallelCorpus,
    scheme: &TagScheme,
    domain_index: usize,
    tgt_lang: &str,
) -> Result<ParallelCorpus> {
    let prefix = scheme.prefix(domain_index, tgt_lang)?;
    let mut out = corpus.clone();
    for (src, _) in &mut out.pairs {
        let mut tagged = prefix.clone();
        tagged.append(src);
        *src = tagged;
    }
    Ok(out)
}

/// Removes the prefix that [`inject_tags`] adds under `scheme`.
pub fn strip_tags(corpus: &ParallelCorpus, scheme: &TagScheme) -> ParallelCorpus {
    let mut out = corpus.clone();
    for (src, _) in &mut out.pairs {
        let mut skip = 0;
        if scheme.include_lang_tag && src.first().is_some_and(|t| scheme.target_langs.iter().any(|l| TagScheme::lang_tag(l) == *t)) {
            skip += 1;
        }
        if src
            .get(skip)
            .is_some_and(|t| (1..=scheme.n_domains).any(|k| TagScheme::domain_tag(k) == *t))
        {
            skip += 1;
        }
        src.drain(..skip);
    }
    out
}

/// Drops every tag token of `scheme` from a sentence.
pub fn remove_tag_tokens(sentence: &[String], scheme: &TagScheme) -> Vec<String> {
    let tags = scheme.tags();
    sentence.iter().filter(|t| !tags.contains(t)).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, Split};

    fn corpus() -> ParallelCorpus {
        ParallelCorpus::new(
            "c",
            "x",
            "j",
            "d",
            Split::Train,
            vec![(tokenize("hello world"), tokenize("a b")), (tokenize("2d1 x"), tokenize("y"))],
        )
        .unwrap()
    }

    #[test]
    fn prefix_with_and_without_lang_tag() {
        let s = TagScheme::new(2, &["j", "e"], true);
        let t = inject_tags(&corpus(), &s, 1, "j").unwrap();
        assert_eq!(t.pairs[0].0.join(" "), "2j 2d1 hello world");
        assert_eq!(t.pairs[0].1.join(" "), "a b");
        let s = TagScheme::new(2, &["j"], false);
        let t = inject_tags(&corpus(), &s, 1, "j").unwrap();
        assert_eq!(t.pairs[0].0.join(" "), "2d1 hello world");
    }

    #[test]
    fn round_trip_even_with_tag_like_words() {
        for include in [true, false] {
            let s = TagScheme::new(3, &["j", "e"], include);
            for k in 1..=3 {
                let t = inject_tags(&corpus(), &s, k, "e").unwrap();
                assert_eq!(strip_tags(&t, &s), corpus());
            }
        }
    }

    #[test]
    fn unknown_tags_are_scheme_errors() {
        let s = TagScheme::new(2, &["j"], true);
        assert!(matches!(inject_tags(&corpus(), &s, 3, "j"), Err(crate::Error::Scheme(_))));
        assert!(matches!(inject_tags(&corpus(), &s, 0, "j"), Err(crate::Error::Scheme(_))));
        assert!(matches!(inject_tags(&corpus(), &s, 1, "c"), Err(crate::Error::Scheme(_))));
    }

    #[test]
    fn tag_listing() {
        let s = TagScheme::new(2, &["j", "e"], true);
        assert_eq!(s.tags(), vec!["2j", "2e", "2d1", "2d2"]);
        assert!(s.is_tag("2d2") && !s.is_tag("2d3"));
    }
}
