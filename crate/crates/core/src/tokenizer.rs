//! Word-level tokenizer: lowercase, split on whitespace, every punctuation
//! mark is its own token.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::corpus::{Corpus, PLACEHOLDER};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const CLS: u32 = 3;
pub const SEP: u32 = 4;

pub const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from its full token list, specials included.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        for (id, special) in SPECIALS.iter().enumerate() {
            match tokens.get(id) {
                Some(t) if t == special => {}
                Some(t) => {
                    return Err(Error::Vocab(format!(
                        "expected {special} at line {id}, found {t:?}"
                    )))
                }
                None => return Err(Error::Vocab(format!("missing {special} at line {id}"))),
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), id as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?} at line {id}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
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

    pub fn lookup(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }
}

/// Splits text into lowercase word and punctuation tokens. Placeholders are
/// treated like any other punctuation mark.
pub fn split(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.extend(ch.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Token ids for placeholder-free text; unknown words map to [`UNK`].
pub fn encode(text: &str, vocab: &Vocab) -> Result<Vec<u32>> {
    if text.contains(PLACEHOLDER) {
        return Err(Error::Tokenize(format!(
            "placeholder {PLACEHOLDER:?} in input {text:?}"
        )));
    }
    Ok(split(text).iter().map(|t| vocab.lookup(t)).collect())
}

/// Specials, then every token seen at least `min_freq` times in sentences and
/// candidates, ordered by descending frequency and then lexicographically.
pub fn build_vocab(corpus: &Corpus, min_freq: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let min_freq = min_freq.max(1);
    let placeholder = PLACEHOLDER.to_string();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for pair in &corpus.pairs {
        let texts = pair
            .sentences
            .iter()
            .map(|s| s.text.as_str())
            .chain(pair.candidates.iter().map(String::as_str));
        for text in texts {
            for tok in split(text) {
                if tok != placeholder {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, n)| *n >= min_freq && !SPECIALS.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t))
        .collect();
    Vocab::from_tokens(tokens)
}

pub fn save_vocab(vocab: &Vocab, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = vocab.tokens.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocab> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Vocab::from_tokens(text.lines().map(str::to_string).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SchemaSentence, TwinPair};
    use crate::synth::synth_generate;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn one_sentence(text: &str) -> Corpus {
        Corpus::new(
            "one",
            vec![TwinPair {
                id: "0".into(),
                sentences: [
                    SchemaSentence::new(text, None),
                    SchemaSentence::new("b _", None),
                ],
                candidates: ["a".into(), "b".into()],
            }],
        )
    }

    #[test]
    fn split_rule() {
        assert_eq!(split("Doesn't fit."), ["doesn", "'", "t", "fit", "."]);
        assert!(split("").is_empty());
        assert_eq!(split("  A\tB  "), ["a", "b"]);
    }

    #[test]
    fn encode_unknown_and_empty() {
        let v = Vocab::from_tokens(
            SPECIALS
                .iter()
                .map(|s| s.to_string())
                .chain(["fit".to_string()])
                .collect(),
        )
        .unwrap();
        assert_eq!(encode("zebra", &v).unwrap(), [UNK]);
        assert_eq!(encode("FIT", &v).unwrap(), [5]);
        assert!(encode("", &v).unwrap().is_empty());
        assert!(encode("a _ b", &v).is_err());
    }

    #[test]
    fn ordering_rule() {
        // "a a b _" plus the pair's other sentence and candidates
        let c = Corpus::new(
            "one",
            vec![TwinPair {
                id: "0".into(),
                sentences: [
                    SchemaSentence::new("a a b _", None),
                    SchemaSentence::new("_", None),
                ],
                candidates: ["a".into(), "b".into()],
            }],
        );
        let v = build_vocab(&c, 1).unwrap();
        assert_eq!(&v.tokens()[5..], ["a", "b"]);
        assert_eq!(v, build_vocab(&c, 1).unwrap());
    }

    #[test]
    fn min_freq_filters() {
        let v = build_vocab(&one_sentence("x x y _"), 2).unwrap();
        // "b" also reaches 2 through the second sentence and a candidate
        assert_eq!(&v.tokens()[5..], ["b", "x"]);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            build_vocab(&Corpus::new("e", vec![]), 1),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn synthetic_vocab_size() {
        let c = synth_generate(7, 200, 8);
        // independent count: the generator separates every token with a space
        let mut distinct = HashSet::new();
        for p in &c.pairs {
            for s in &p.sentences {
                distinct.extend(s.text.split(' ').filter(|w| *w != "_"));
            }
        }
        let v = build_vocab(&c, 1).unwrap();
        assert_eq!(v.len(), 5 + distinct.len());
    }

    #[test]
    fn file_round_trip_and_errors() {
        let dir = std::env::temp_dir().join(format!("cssr-vocab-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();

        let v = build_vocab(&synth_generate(1, 20, 8), 1).unwrap();
        let path = dir.join("v.txt");
        save_vocab(&v, &path).unwrap();
        assert_eq!(load_vocab(&path).unwrap(), v);

        let hand = dir.join("hand.txt");
        fs::write(&hand, "[PAD]\n[UNK]\n[MASK]\n[CLS]\n[SEP]\nthe\ncat\n").unwrap();
        assert_eq!(load_vocab(&hand).unwrap().len(), 7);

        let no_mask = dir.join("nomask.txt");
        fs::write(&no_mask, "[PAD]\n[UNK]\nthe\n[CLS]\n[SEP]\n").unwrap();
        assert!(load_vocab(&no_mask).is_err());

        let dup = dir.join("dup.txt");
        fs::write(&dup, "[PAD]\n[UNK]\n[MASK]\n[CLS]\n[SEP]\nthe\nthe\n").unwrap();
        assert!(load_vocab(&dup).is_err());

        fs::remove_dir_all(&dir).ok();
    }

    proptest! {
        #[test]
        fn vocab_tokens_encode_to_own_id(seed in 0u64..500) {
            let v = build_vocab(&synth_generate(seed, 30, 8), 1).unwrap();
            for (id, tok) in v.tokens().iter().enumerate().skip(SPECIALS.len()) {
                prop_assert_eq!(encode(tok, &v).unwrap(), vec![id as u32]);
            }
        }

        #[test]
        fn encode_is_total(s in "[^_]{0,40}") {
            let v = build_vocab(&synth_generate(0, 5, 8), 1).unwrap();
            let a = encode(&s, &v).unwrap();
            prop_assert_eq!(&a, &encode(&s, &v).unwrap());
            prop_assert!(a.iter().all(|&id| (id as usize) < v.len()));
        }
    }
}
