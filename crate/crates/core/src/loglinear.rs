//! A trainable log-linear scorer with windowed pairwise interactions.
//!
//! `logits(X\t)[v] = bias[v] + Σ_{s≠t, |s−t|≤w} A[x_s][v][s−t]`
//!
//! Inputs range over the output alphabet plus `[MASK]`; offsets outside the
//! window contribute nothing, so `w = 0` is a unigram model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{MaskedSequence, Sequence, TokenId, Vocabulary};
use crate::mrf::Scorer;
use crate::training::TrainableScorer;

pub const DEFAULT_WINDOW: usize = 3;

#[derive(Debug, Clone)]
pub struct LogLinearScorer {
    vocab: Vocabulary,
    window: usize,
    /// `bias` (M) followed by `A` flattened as `[input][output][offset]`.
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename = "loglinear")]
struct Checkpoint {
    w: usize,
    bias: Vec<f64>,
    #[serde(rename = "A")]
    a: Vec<f64>,
}

impl LogLinearScorer {
    pub fn zeros(vocab: Vocabulary, window: usize) -> Self {
        let n = Self::param_count(vocab.len(), window);
        Self {
            vocab,
            window,
            params: vec![0.0; n],
        }
    }

    /// Parameters drawn uniformly from `[-scale, scale)`.
    pub fn random<R: Rng + ?Sized>(vocab: Vocabulary, window: usize, scale: f64, rng: &mut R) -> Self {
        let mut s = Self::zeros(vocab, window);
        for p in &mut s.params {
            *p = rng.gen_range(-scale..scale);
        }
        s
    }

    pub fn from_params(vocab: Vocabulary, window: usize, params: Vec<f64>) -> Result<Self> {
        let n = Self::param_count(vocab.len(), window);
        if params.len() != n {
            return Err(Error::Checkpoint(format!(
                "expected {n} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(Self {
            vocab,
            window,
            params,
        })
    }

    pub fn param_count(m: usize, window: usize) -> usize {
        m + (m + 1) * m * 2 * window
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn bias(&self) -> &[f64] {
        &self.params[..self.vocab.len()]
    }

    fn slot(&self, offset: isize) -> usize {
        let w = self.window as isize;
        debug_assert!(offset != 0 && offset.abs() <= w);
        (if offset < 0 { offset + w } else { offset + w - 1 }) as usize
    }

    fn a_index(&self, input: TokenId, output: TokenId, slot: usize) -> usize {
        let m = self.vocab.len();
        m + (input * m + output) * 2 * self.window + slot
    }

    /// Interaction weight for `input` at relative offset `offset` (nonzero,
    /// within the window) on output `output`.
    pub fn interaction(&self, input: TokenId, output: TokenId, offset: isize) -> f64 {
        self.params[self.a_index(input, output, self.slot(offset))]
    }

    /// Positions `s ≠ t` inside the window together with their slot.
    fn neighbours(&self, len: usize, t: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let lo = t.saturating_sub(self.window);
        let hi = (t + self.window).min(len - 1);
        (lo..=hi)
            .filter(move |&s| s != t)
            .map(move |s| (s, self.slot(s as isize - t as isize)))
    }

    fn check_input(&self, ids: &[TokenId], s: usize) -> Result<TokenId> {
        let x = ids[s];
        if x > self.vocab.mask_id() {
            return Err(Error::InvalidTokenId { id: x, position: s + 1 });
        }
        Ok(x)
    }

    fn logits_at(&self, ids: &[TokenId], t: usize) -> Result<Vec<f64>> {
        let m = self.vocab.len();
        let mut out = self.bias().to_vec();
        for (s, slot) in self.neighbours(ids.len(), t) {
            let x = self.check_input(ids, s)?;
            let base = self.a_index(x, 0, slot);
            let stride = 2 * self.window;
            for (v, o) in out.iter_mut().enumerate().take(m) {
                *o += self.params[base + v * stride];
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let m = self.vocab.len();
        let ck = Checkpoint {
            w: self.window,
            bias: self.params[..m].to_vec(),
            a: self.params[m..].to_vec(),
        };
        let mut s = serde_json::to_string(&ck).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str, vocab: Vocabulary) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.bias.len() != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "bias has {} entries but the vocabulary has {} tokens",
                ck.bias.len(),
                vocab.len()
            )));
        }
        let mut params = ck.bias;
        params.extend(ck.a);
        Self::from_params(vocab, ck.w, params)
    }
}

impl Scorer for LogLinearScorer {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn logits(&self, ms: &MaskedSequence) -> Result<Vec<f64>> {
        self.logits_at(ms.ids(), ms.position())
    }

    fn logits_all(&self, seq: &Sequence) -> Result<Vec<Vec<f64>>> {
        (0..seq.len()).map(|t| self.logits_at(seq.ids(), t)).collect()
    }

    fn as_trainable(&self) -> Option<&dyn TrainableScorer> {
        Some(self)
    }
}

impl TrainableScorer for LogLinearScorer {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn accumulate_gradient(
        &self,
        context: &[TokenId],
        position: usize,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        let m = self.vocab.len();
        for (g, u) in grad[..m].iter_mut().zip(upstream) {
            *g += u;
        }
        let stride = 2 * self.window;
        for (s, slot) in self.neighbours(context.len(), position) {
            let x = self.check_input(context, s)?;
            let base = self.a_index(x, 0, slot);
            for (v, u) in upstream.iter().enumerate() {
                grad[base + v * stride] += u;
            }
        }
        Ok(())
    }
}
