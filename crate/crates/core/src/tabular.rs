//! Exhaustively parameterized scorer: one logit vector per (position, context).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{MaskedSequence, TokenId, Vocabulary};
use crate::mrf::Scorer;

pub const DEFAULT_TABLE_CAP: usize = 1_000_000;

/// Logits looked up by `(t, ids at every position except t)`.
/// Missing entries mean all-zero logits.
#[derive(Debug, Clone)]
pub struct TabularScorer {
    vocab: Vocabulary,
    table: HashMap<(usize, Vec<TokenId>), Vec<f64>>,
    cap: usize,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    /// 1-based
    position: usize,
    context: Vec<String>,
    logits: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename = "tabular")]
struct Checkpoint {
    entries: Vec<Entry>,
}

impl TabularScorer {
    /// The zero-logit scorer: every conditional is uniform.
    pub fn zero(vocab: Vocabulary) -> Self {
        Self::with_cap(vocab, DEFAULT_TABLE_CAP)
    }

    pub fn with_cap(vocab: Vocabulary, cap: usize) -> Self {
        Self {
            vocab,
            table: HashMap::new(),
            cap,
        }
    }

    /// Stores logits for slot `position` given the other tokens, listed in
    /// position order with the slot itself left out.
    pub fn insert(&mut self, position: usize, context: Vec<TokenId>, logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.vocab.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} logits, got {}",
                self.vocab.len(),
                logits.len()
            )));
        }
        if let Some(bad) = logits.iter().find(|l| !l.is_finite()) {
            return Err(Error::Checkpoint(format!("non-finite logit {bad}")));
        }
        if let Some(&id) = context.iter().find(|&&id| id >= self.vocab.input_len()) {
            return Err(Error::InvalidTokenId { id, position: 0 });
        }
        let key = (position, context);
        if !self.table.contains_key(&key) && self.table.len() >= self.cap {
            return Err(Error::TableFull(self.cap));
        }
        self.table.insert(key, logits);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn to_json(&self) -> String {
        let mut keys: Vec<_> = self.table.keys().collect();
        keys.sort();
        let entries = keys
            .into_iter()
            .map(|key| Entry {
                position: key.0 + 1,
                context: key
                    .1
                    .iter()
                    .map(|&id| self.vocab.token(id).unwrap_or_default().to_string())
                    .collect(),
                logits: self.table[key].clone(),
            })
            .collect();
        let mut s = serde_json::to_string(&Checkpoint { entries }).expect("table serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str, vocab: Vocabulary) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        let mut scorer = Self::zero(vocab);
        for e in ck.entries {
            let context = e
                .context
                .iter()
                .enumerate()
                .map(|(i, tok)| {
                    scorer.vocab.id(tok).ok_or_else(|| Error::OutOfVocabulary {
                        token: tok.clone(),
                        position: i + 1,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let position = e
                .position
                .checked_sub(1)
                .ok_or_else(|| Error::Checkpoint("positions are 1-based".into()))?;
            scorer.insert(position, context, e.logits)?;
        }
        Ok(scorer)
    }
}

impl Scorer for TabularScorer {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn logits(&self, ms: &MaskedSequence) -> Result<Vec<f64>> {
        let t = ms.position();
        let context: Vec<TokenId> = ms
            .ids()
            .iter()
            .enumerate()
            .filter(|&(s, _)| s != t)
            .map(|(_, &id)| id)
            .collect();
        Ok(self
            .table
            .get(&(t, context))
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.vocab.len()]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::lexicon::Sequence;

    #[test]
    fn missing_entries_are_zero() {
        let s = TabularScorer::zero(fixtures::toy_vocabulary(3));
        let seq = Sequence::new(vec![0, 1]).unwrap();
        let ms = MaskedSequence::new(&seq, 0, s.vocab()).unwrap();
        assert_eq!(s.logits(&ms).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn cap_is_enforced() {
        let mut s = TabularScorer::with_cap(fixtures::toy_vocabulary(2), 1);
        s.insert(0, vec![0], vec![1.0, 2.0]).unwrap();
        s.insert(0, vec![0], vec![3.0, 2.0]).unwrap();
        assert!(matches!(
            s.insert(1, vec![0], vec![1.0, 2.0]),
            Err(Error::TableFull(1))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let f2 = fixtures::f2();
        let json = f2.to_json();
        let back = TabularScorer::from_json(&json, f2.vocab().clone()).unwrap();
        assert_eq!(back.to_json(), json);
        for seq in crate::mrf::enumerate_states(3, 2) {
            for t in 0..2 {
                let ms = MaskedSequence::new(&seq, t, f2.vocab()).unwrap();
                assert_eq!(back.logits(&ms).unwrap(), f2.logits(&ms).unwrap());
            }
        }
    }

    #[test]
    fn mask_blind() {
        let f2 = fixtures::f2();
        for t in 0..2 {
            let a = Sequence::new(vec![0, 2]).unwrap();
            let mut b = a.clone();
            b.set(t, 1);
            let la = f2.logits(&MaskedSequence::new(&a, t, f2.vocab()).unwrap()).unwrap();
            let lb = f2.logits(&MaskedSequence::new(&b, t, f2.vocab()).unwrap()).unwrap();
            assert_eq!(la, lb);
        }
    }
}
