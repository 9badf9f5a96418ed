//! Vocabulary, whitespace tokenization and corpus ingestion.
//!
//! The output alphabet holds `M` tokens with dense ids `0..M`. The reserved
//! input-only symbols take the ids right after it: `[MASK]` = `M`,
//! `[CLS]` = `M + 1`, `[SEP]` = `M + 2`. Reserved symbols can appear in
//! model inputs but never in a conditional distribution.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const MASK_TOKEN: &str = "[MASK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

/// Default cap on sequence length.
pub const DEFAULT_MAX_LEN: usize = 500;

const RESERVED: [&str; 3] = [MASK_TOKEN, CLS_TOKEN, SEP_TOKEN];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Casing {
    /// Lowercase every token on ingest.
    Lower,
    #[default]
    None,
}

impl Casing {
    fn apply<'a>(self, token: &'a str) -> std::borrow::Cow<'a, str> {
        match self {
            Casing::Lower => std::borrow::Cow::Owned(token.to_lowercase()),
            Casing::None => std::borrow::Cow::Borrowed(token),
        }
    }
}

/// What `encode` does with a token outside the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OovPolicy {
    #[default]
    Error,
    MapToMask,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    tokens: Vec<String>,
    casing: Casing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    casing: Casing,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, casing: Casing) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyVocabulary { min_count: 0 });
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, token) in tokens.iter().enumerate() {
            if RESERVED.contains(&token.as_str()) {
                return Err(Error::ReservedToken(token.clone()));
            }
            if index.insert(token.clone(), id).is_some() {
                return Err(Error::DuplicateToken(token.clone()));
            }
        }
        Ok(Self {
            tokens,
            index,
            casing,
        })
    }

    /// Builds a vocabulary from whitespace-tokenized lines.
    ///
    /// Tokens are ordered by descending frequency, ties broken
    /// lexicographically. Reserved symbols found in the text are skipped.
    pub fn build<S: AsRef<str>>(lines: &[S], min_count: usize, casing: Casing) -> Result<Self> {
        if lines.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let min_count = min_count.max(1);
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for raw in line.as_ref().split_whitespace() {
                let token = casing.apply(raw);
                if RESERVED.contains(&token.as_ref()) {
                    continue;
                }
                *counts.entry(token.into_owned()).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> =
            counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
        if kept.is_empty() {
            return Err(Error::EmptyVocabulary { min_count });
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::new(kept.into_iter().map(|(t, _)| t).collect(), casing)
    }

    /// Size `M` of the output alphabet.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn casing(&self) -> Casing {
        self.casing
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn mask_id(&self) -> TokenId {
        self.tokens.len()
    }

    pub fn cls_id(&self) -> TokenId {
        self.tokens.len() + 1
    }

    pub fn sep_id(&self) -> TokenId {
        self.tokens.len() + 2
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        (self.mask_id()..=self.sep_id()).contains(&id)
    }

    /// Number of ids valid as model input (`M` plus the reserved symbols).
    pub fn input_len(&self) -> usize {
        self.tokens.len() + RESERVED.len()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        match id.checked_sub(self.tokens.len()) {
            None => Some(self.tokens[id].as_str()),
            Some(r) => RESERVED.get(r).copied(),
        }
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        if let Some(r) = RESERVED.iter().position(|&s| s == token) {
            return Some(self.tokens.len() + r);
        }
        self.index.get(self.casing.apply(token).as_ref()).copied()
    }

    /// Encodes whitespace-separated text.
    ///
    /// OOV errors carry the 1-based token position.
    pub fn encode(&self, text: &str) -> Result<Sequence> {
        self.encode_with(text, OovPolicy::Error)
    }

    pub fn encode_with(&self, text: &str, policy: OovPolicy) -> Result<Sequence> {
        let ids = text
            .split_whitespace()
            .enumerate()
            .map(|(i, token)| match (self.id(token), policy) {
                (Some(id), _) => Ok(id),
                (None, OovPolicy::MapToMask) => Ok(self.mask_id()),
                (None, OovPolicy::Error) => Err(Error::OutOfVocabulary {
                    token: token.to_string(),
                    position: i + 1,
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        Sequence::new(ids)
    }

    pub fn decode(&self, seq: &Sequence) -> Result<String> {
        Ok(self.decode_tokens(seq)?.join(" "))
    }

    pub fn decode_tokens(&self, seq: &Sequence) -> Result<Vec<&str>> {
        self.decode_ids(seq.ids())
    }

    pub fn decode_ids(&self, ids: &[TokenId]) -> Result<Vec<&str>> {
        ids.iter()
            .enumerate()
            .map(|(i, &id)| {
                self.token(id).ok_or(Error::InvalidTokenId {
                    id,
                    position: i + 1,
                })
            })
            .collect()
    }

    /// Checks that every id is valid model input under this vocabulary.
    pub fn check(&self, seq: &Sequence) -> Result<()> {
        match seq.ids().iter().position(|&id| id >= self.input_len()) {
            Some(i) => Err(Error::InvalidTokenId {
                id: seq.ids()[i],
                position: i + 1,
            }),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> String {
        let file = VocabularyFile {
            tokens: self.tokens.clone(),
            casing: self.casing,
        };
        let mut s = serde_json::to_string(&file).expect("vocabulary serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: VocabularyFile = serde_json::from_str(s)?;
        Self::new(file.tokens, file.casing)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// A token id sequence `x_1..x_T`; positions are 0-based in this API.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sequence(Vec<TokenId>);

impl Sequence {
    pub fn new(ids: Vec<TokenId>) -> Result<Self> {
        Self::with_max_len(ids, DEFAULT_MAX_LEN)
    }

    pub fn with_max_len(ids: Vec<TokenId>, max: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if ids.len() > max {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max,
            });
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.0
    }

    pub fn first_mask(&self, vocab: &Vocabulary) -> Option<usize> {
        self.0.iter().position(|&id| id == vocab.mask_id())
    }

    pub fn mask_count(&self, vocab: &Vocabulary) -> usize {
        self.0.iter().filter(|&&id| id == vocab.mask_id()).count()
    }

    pub(crate) fn set(&mut self, position: usize, id: TokenId) {
        self.0[position] = id;
    }

    pub(crate) fn from_ids_unchecked(ids: Vec<TokenId>) -> Self {
        debug_assert!(!ids.is_empty());
        Self(ids)
    }
}

/// `X` with position `t` replaced by `[MASK]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    ids: Vec<TokenId>,
    position: usize,
}

impl MaskedSequence {
    pub fn new(seq: &Sequence, position: usize, vocab: &Vocabulary) -> Result<Self> {
        if position >= seq.len() {
            return Err(Error::PositionOutOfRange {
                position,
                len: seq.len(),
            });
        }
        Ok(Self::from_context(seq.ids().to_vec(), position, vocab.mask_id()))
    }

    pub(crate) fn from_context(mut ids: Vec<TokenId>, position: usize, mask: TokenId) -> Self {
        ids[position] = mask;
        Self { ids, position }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A set of training or evaluation sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<Sequence>,
    pub source: String,
}

impl Corpus {
    pub fn new(sentences: Vec<Sequence>, source: impl Into<String>) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self {
            sentences,
            source: source.into(),
        })
    }

    pub fn encode_lines<S: AsRef<str>>(
        lines: &[S],
        vocab: &Vocabulary,
        policy: OovPolicy,
        source: impl Into<String>,
    ) -> Result<Self> {
        let sentences = lines
            .iter()
            .map(|l| vocab.encode_with(l.as_ref(), policy))
            .collect::<Result<Vec<_>>>()?;
        Self::new(sentences, source)
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Sequence::len).sum()
    }
}

/// Reads a one-sentence-per-line UTF-8 file, skipping blank lines.
pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn abc() -> Vocabulary {
        Vocabulary::new(vec!["a".into(), "b".into(), "c".into()], Casing::None).unwrap()
    }

    #[test]
    fn build_orders_by_frequency_then_lexicographic() {
        let v = Vocabulary::build(&["a b", "a c"], 1, Casing::None).unwrap();
        assert_eq!(v.tokens(), ["a", "b", "c"]);
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn build_filters_by_min_count() {
        let v = Vocabulary::build(&["a b", "a c"], 2, Casing::None).unwrap();
        assert_eq!(v.tokens(), ["a"]);
    }

    #[test]
    fn build_lowercases() {
        let v = Vocabulary::build(&["A b"], 1, Casing::Lower).unwrap();
        assert!(v.tokens().contains(&"a".to_string()));
        assert!(!v.tokens().contains(&"A".to_string()));
    }

    #[test]
    fn build_fails_when_everything_is_filtered() {
        let err = Vocabulary::build(&["a b"], 5, Casing::None).unwrap_err();
        assert!(matches!(err, Error::EmptyVocabulary { min_count: 5 }));
        assert!(matches!(
            Vocabulary::build::<&str>(&[], 1, Casing::None),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn build_skips_reserved_symbols() {
        let v = Vocabulary::build(&["a [MASK] b"], 1, Casing::None).unwrap();
        assert_eq!(v.tokens(), ["a", "b"]);
        assert!(matches!(
            Vocabulary::new(vec!["[SEP]".into()], Casing::None),
            Err(Error::ReservedToken(_))
        ));
    }

    #[test]
    fn reserved_ids_follow_the_alphabet() {
        let v = abc();
        assert_eq!((v.mask_id(), v.cls_id(), v.sep_id()), (3, 4, 5));
        assert!(v.is_reserved(3) && !v.is_reserved(2) && !v.is_reserved(6));
        assert_eq!(v.id("[MASK]"), Some(3));
    }

    #[test]
    fn encode_and_decode() {
        let v = abc();
        let s = v.encode("a b a").unwrap();
        assert_eq!(s.ids(), [0, 1, 0]);
        assert_eq!(v.decode(&s).unwrap(), "a b a");
        let m = Sequence::new(vec![v.mask_id()]).unwrap();
        assert_eq!(v.decode(&m).unwrap(), "[MASK]");
    }

    #[test]
    fn encode_errors() {
        let v = abc();
        assert!(matches!(v.encode(""), Err(Error::EmptySequence)));
        match v.encode("a z") {
            Err(Error::OutOfVocabulary { token, position }) => {
                assert_eq!(token, "z");
                assert_eq!(position, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        let s = v.encode_with("a z", OovPolicy::MapToMask).unwrap();
        assert_eq!(s.ids(), [0, 3]);
    }

    #[test]
    fn decode_rejects_invalid_ids() {
        let v = abc();
        let s = Sequence::new(vec![0, 9]).unwrap();
        assert!(matches!(
            v.decode(&s),
            Err(Error::InvalidTokenId { id: 9, position: 2 })
        ));
    }

    #[test]
    fn sequence_length_bounds() {
        assert!(Sequence::new(vec![0; DEFAULT_MAX_LEN]).is_ok());
        assert!(matches!(
            Sequence::new(vec![0; DEFAULT_MAX_LEN + 1]),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn masked_sequence_replaces_only_the_target() {
        let v = abc();
        let s = v.encode("a b c").unwrap();
        let m = MaskedSequence::new(&s, 1, &v).unwrap();
        assert_eq!(m.ids(), [0, 3, 2]);
        assert!(MaskedSequence::new(&s, 3, &v).is_err());
    }

    #[test]
    fn vocabulary_file_is_deterministic() {
        let lines = ["the cat sat", "the dog sat", "a cat"];
        let a = Vocabulary::build(&lines, 1, Casing::Lower).unwrap().to_json();
        let b = Vocabulary::build(&lines, 1, Casing::Lower).unwrap().to_json();
        assert_eq!(a, b);
        assert!(a.starts_with("{\"tokens\":[\"cat\",\"sat\",\"the\""));
        assert!(a.ends_with("\"casing\":\"lower\"}\n"));
        assert_eq!(Vocabulary::from_json(&a).unwrap().to_json(), a);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(words in prop::collection::vec(0usize..3, 1..40)) {
            let v = abc();
            let text = words.iter().map(|&i| v.tokens()[i].as_str()).collect::<Vec<_>>().join(" ");
            let seq = v.encode(&text).unwrap();
            prop_assert_eq!(v.decode(&seq).unwrap(), text);
        }
    }
}
