//! The sequence-level Markov random field defined by a masked-LM scorer.
//!
//! A scorer maps a masked sequence `X\t` to `M` logits. Position `t`
//! contributes the log-potential `logits(X\t)[x_t]` to the joint, unless some
//! other position holds `[MASK]`, in which case it contributes 0. The joint
//! over fixed-length, mask-free sequences is `exp(sum of log-potentials) / Z`
//! and the per-position conditional is the softmax of the logits.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lexicon::{MaskedSequence, Sequence, TokenId, Vocabulary};
use crate::training::TrainableScorer;

/// Default cap on the number of states enumerated for `log Z`.
pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

/// The logit function of a masked language model.
///
/// Implementations must be mask-blind: `logits` may not look at the
/// original token under the mask, and must return finite values.
pub trait Scorer: Send + Sync {
    fn vocab(&self) -> &Vocabulary;

    /// Logits over the output alphabet for the masked slot.
    fn logits(&self, ms: &MaskedSequence) -> Result<Vec<f64>>;

    /// Logits for every position of `seq`, computed in one pass with the
    /// sequence fed as-is (no extra masking).
    ///
    /// The default masks each slot in turn, which agrees with a single
    /// pass for any scorer whose output at `t` ignores the input at `t`.
    fn logits_all(&self, seq: &Sequence) -> Result<Vec<Vec<f64>>> {
        let mask = self.vocab().mask_id();
        (0..seq.len())
            .map(|t| self.logits(&MaskedSequence::from_context(seq.ids().to_vec(), t, mask)))
            .collect()
    }

    fn as_trainable(&self) -> Option<&dyn TrainableScorer> {
        None
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn logits(&self, ms: &MaskedSequence) -> Result<Vec<f64>> {
        (**self).logits(ms)
    }
    fn logits_all(&self, seq: &Sequence) -> Result<Vec<Vec<f64>>> {
        (**self).logits_all(seq)
    }
    fn as_trainable(&self) -> Option<&dyn TrainableScorer> {
        (**self).as_trainable()
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn logits(&self, ms: &MaskedSequence) -> Result<Vec<f64>> {
        (**self).logits(ms)
    }
    fn logits_all(&self, seq: &Sequence) -> Result<Vec<Vec<f64>>> {
        (**self).logits_all(seq)
    }
    fn as_trainable(&self) -> Option<&dyn TrainableScorer> {
        (**self).as_trainable()
    }
}

/// Numerically stable `log Σ exp(x_i)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Streaming log-sum-exp accumulator.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LogSumExp {
    max: f64,
    sum: f64,
}

impl LogSumExp {
    pub(crate) fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    pub(crate) fn push(&mut self, x: f64) {
        if x > self.max {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        } else {
            self.sum += (x - self.max).exp();
        }
    }

    pub(crate) fn value(&self) -> f64 {
        self.max + self.sum.ln()
    }
}

/// Indices kept by top-k truncation: highest logits first, ties to the lower id.
pub fn top_k_indices(logits: &[f64], k: usize) -> Vec<TokenId> {
    let mut order: Vec<TokenId> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Softmax over `logits`, optionally truncated to the `top_k` largest.
///
/// Truncated entries are exactly zero. Normalization always runs over ids in
/// ascending order, so `top_k = M` and no truncation give identical results.
pub fn softmax(logits: &[f64], top_k: Option<usize>) -> Result<Vec<f64>> {
    let m = logits.len();
    let keep: Vec<bool> = match top_k {
        Some(k) if k == 0 || k > m => {
            return Err(Error::InvalidConfig(vec![format!(
                "top_k must be in 1..={m}, got {k}"
            )]))
        }
        Some(k) if k < m => {
            let mut keep = vec![false; m];
            for i in top_k_indices(logits, k) {
                keep[i] = true;
            }
            keep
        }
        _ => vec![true; m],
    };
    let max = logits
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .zip(&keep)
        .map(|(&l, &k)| if k { (l - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(probs)
}

fn check_position(seq: &Sequence, t: usize) -> Result<()> {
    if t >= seq.len() {
        return Err(Error::PositionOutOfRange {
            position: t,
            len: seq.len(),
        });
    }
    Ok(())
}

fn check_output_token(vocab: &Vocabulary, seq: &Sequence, t: usize) -> Result<TokenId> {
    let x = seq.ids()[t];
    if x == vocab.mask_id() {
        Err(Error::MaskTarget(t))
    } else if x >= vocab.len() {
        Err(Error::InvalidTokenId {
            id: x,
            position: t + 1,
        })
    } else {
        Ok(x)
    }
}

/// `log φ_t(X)`: the logit of `x_t` given the sequence masked at `t`, or 0
/// when `[MASK]` occurs at any other position.
pub fn log_potential<S: Scorer + ?Sized>(scorer: &S, seq: &Sequence, t: usize) -> Result<f64> {
    let vocab = scorer.vocab();
    vocab.check(seq)?;
    check_position(seq, t)?;
    let mask = vocab.mask_id();
    if seq
        .ids()
        .iter()
        .enumerate()
        .any(|(s, &id)| s != t && id == mask)
    {
        return Ok(0.0);
    }
    let x = check_output_token(vocab, seq, t)?;
    let logits = scorer.logits(&MaskedSequence::from_context(seq.ids().to_vec(), t, mask))?;
    Ok(logits[x])
}

fn reject_reserved(vocab: &Vocabulary, seq: &Sequence) -> Result<()> {
    vocab.check(seq)?;
    if let Some(s) = seq.first_mask(vocab) {
        return Err(Error::MaskInSequence(s));
    }
    if let Some(s) = seq.ids().iter().position(|&id| id >= vocab.len()) {
        return Err(Error::InvalidTokenId {
            id: seq.ids()[s],
            position: s + 1,
        });
    }
    Ok(())
}

/// `Σ_t log φ_t(X)` for a mask-free sequence. Used for ranking.
pub fn unnormalized_log_joint<S: Scorer + ?Sized>(scorer: &S, seq: &Sequence) -> Result<f64> {
    let vocab = scorer.vocab();
    reject_reserved(vocab, seq)?;
    let mask = vocab.mask_id();
    let mut total = 0.0;
    for (t, &x) in seq.ids().iter().enumerate() {
        let logits = scorer.logits(&MaskedSequence::from_context(seq.ids().to_vec(), t, mask))?;
        total += logits[x];
    }
    Ok(total)
}

/// `M^T`, saturating.
pub fn state_count(m: usize, len: usize) -> u128 {
    let mut n: u128 = 1;
    for _ in 0..len {
        n = n.saturating_mul(m as u128);
    }
    n
}

pub(crate) fn check_cap(m: usize, len: usize, cap: u64) -> Result<usize> {
    let states = state_count(m, len);
    if states > cap as u128 {
        return Err(Error::EnumerationCap { states, cap });
    }
    Ok(states as usize)
}

/// Decodes a canonical state index (first position most significant).
pub fn state_from_index(mut index: usize, m: usize, len: usize) -> Vec<TokenId> {
    let mut ids = vec![0; len];
    for slot in ids.iter_mut().rev() {
        *slot = index % m;
        index /= m;
    }
    ids
}

pub fn state_index(ids: &[TokenId], m: usize) -> usize {
    ids.iter().fold(0, |acc, &x| acc * m + x)
}

/// All `M^T` mask-free sequences in lexicographic id order.
pub fn enumerate_states(m: usize, len: usize) -> impl Iterator<Item = Sequence> {
    let n = state_count(m, len).min(usize::MAX as u128) as usize;
    (0..n).map(move |i| Sequence::from_ids_unchecked(state_from_index(i, m, len)))
}

/// Exact `log Z` by enumeration under the default cap.
pub fn partition_function_log<S: Scorer + ?Sized>(scorer: &S, len: usize) -> Result<f64> {
    partition_function_log_capped(scorer, len, DEFAULT_ENUMERATION_CAP)
}

pub fn partition_function_log_capped<S: Scorer + ?Sized>(
    scorer: &S,
    len: usize,
    cap: u64,
) -> Result<f64> {
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    let m = scorer.vocab().len();
    check_cap(m, len, cap)?;
    let mut acc = LogSumExp::new();
    for seq in enumerate_states(m, len) {
        acc.push(unnormalized_log_joint(scorer, &seq)?);
    }
    Ok(acc.value())
}

/// `p_θ(X) = exp(Σ_t log φ_t(X) − log Z)`.
pub fn joint_probability<S: Scorer + ?Sized>(scorer: &S, seq: &Sequence) -> Result<f64> {
    let score = unnormalized_log_joint(scorer, seq)?;
    let log_z = partition_function_log(scorer, seq.len())?;
    Ok((score - log_z).exp())
}

/// `p(· | X\t)` over the output alphabet, with optional top-k truncation.
pub fn conditional<S: Scorer + ?Sized>(
    scorer: &S,
    seq: &Sequence,
    t: usize,
    top_k: Option<usize>,
) -> Result<Vec<f64>> {
    let vocab = scorer.vocab();
    vocab.check(seq)?;
    check_position(seq, t)?;
    let logits = scorer.logits(&MaskedSequence::from_context(
        seq.ids().to_vec(),
        t,
        vocab.mask_id(),
    ))?;
    softmax(&logits, top_k)
}

/// Input indices sorted by unnormalized log-joint, highest first, with
/// their scores. Ties keep input order.
pub fn rank_order<S: Scorer + ?Sized>(scorer: &S, seqs: &[Sequence]) -> Result<Vec<(usize, f64)>> {
    if let Some(first) = seqs.first() {
        if let Some(bad) = seqs.iter().find(|s| s.len() != first.len()) {
            return Err(Error::MixedLengths {
                expected: first.len(),
                found: bad.len(),
            });
        }
    }
    let mut scored = seqs
        .par_iter()
        .enumerate()
        .map(|(i, s)| Ok((i, unnormalized_log_joint(scorer, s)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
    Ok(scored)
}

/// Sorts fixed-length sentences by unnormalized log-joint, highest first.
/// Ties keep input order.
pub fn rank_sentences<S: Scorer + ?Sized>(
    scorer: &S,
    seqs: &[Sequence],
) -> Result<Vec<(Sequence, f64)>> {
    Ok(rank_order(scorer, seqs)?
        .into_iter()
        .map(|(i, score)| (seqs[i].clone(), score))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::tabular::TabularScorer;
    use proptest::prelude::*;

    fn seq(ids: &[usize]) -> Sequence {
        Sequence::new(ids.to_vec()).unwrap()
    }

    #[test]
    fn log_potential_mask_cases() {
        let s = TabularScorer::zero(fixtures::toy_vocabulary(3));
        let mask = 3;
        assert!(matches!(
            log_potential(&s, &seq(&[mask, 0]), 0),
            Err(Error::MaskTarget(0))
        ));
        assert_eq!(log_potential(&s, &seq(&[0, mask]), 0).unwrap(), 0.0);
    }

    #[test]
    fn log_potential_reads_the_table() {
        let vocab = fixtures::toy_vocabulary(3);
        let mut s = TabularScorer::zero(vocab);
        // context for t=0 is the token at position 1 ('b')
        s.insert(0, vec![1], vec![0.5, -1.0, 2.0]).unwrap();
        assert_eq!(log_potential(&s, &seq(&[0, 1]), 0).unwrap(), 0.5);
        assert_eq!(log_potential(&s, &seq(&[2, 1]), 0).unwrap(), 2.0);
    }

    #[test]
    fn other_masks_zero_every_other_potential() {
        let f2 = fixtures::f2();
        let mask = f2.vocab().mask_id();
        let s = seq(&[1, mask, 2]);
        let s3 = fixtures::loglinear_fixture(3, 2, 5, 1.0);
        for t in [0, 2] {
            assert_eq!(log_potential(&s3, &s, t).unwrap(), 0.0);
        }
    }

    #[test]
    fn joint_of_single_position_is_its_potential() {
        let f = fixtures::loglinear_fixture(3, 1, 9, 1.0);
        let s = seq(&[2]);
        assert_eq!(
            unnormalized_log_joint(&f, &s).unwrap(),
            log_potential(&f, &s, 0).unwrap()
        );
    }

    #[test]
    fn joint_rejects_masks() {
        let f = fixtures::f2();
        assert!(matches!(
            unnormalized_log_joint(&f, &seq(&[0, 3])),
            Err(Error::MaskInSequence(1))
        ));
    }

    #[test]
    fn zero_scorer_partition_and_joint() {
        let z1 = TabularScorer::zero(fixtures::toy_vocabulary(1));
        assert_eq!(partition_function_log(&z1, 3).unwrap(), 0.0);
        assert_eq!(joint_probability(&z1, &seq(&[0, 0])).unwrap(), 1.0);
        let z3 = TabularScorer::zero(fixtures::toy_vocabulary(3));
        assert!((partition_function_log(&z3, 2).unwrap() - 9f64.ln()).abs() < 1e-15);
        assert_eq!(unnormalized_log_joint(&z3, &seq(&[0, 1])).unwrap(), 0.0);
        for s in enumerate_states(3, 2) {
            assert!((joint_probability(&z3, &s).unwrap() - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn partition_cap_is_enforced() {
        let z = TabularScorer::zero(fixtures::toy_vocabulary(10));
        assert!(matches!(
            partition_function_log_capped(&z, 4, 1000),
            Err(Error::EnumerationCap { states: 10000, cap: 1000 })
        ));
    }

    #[test]
    fn softmax_examples() {
        let ln2 = 2f64.ln();
        assert_eq!(softmax(&[0.0; 3], None).unwrap(), vec![1.0 / 3.0; 3]);
        let p = softmax(&[0.0, 0.0, ln2], None).unwrap();
        for (a, b) in p.iter().zip([0.25, 0.25, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(softmax(&[0.0, 0.0, ln2], Some(1)).unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(softmax(&[0.0], Some(2)).is_err());
    }

    #[test]
    fn top_k_ties_go_to_lower_ids() {
        assert_eq!(top_k_indices(&[1.0, 3.0, 1.0, 3.0], 3), vec![1, 3, 0]);
        assert_eq!(softmax(&[1.0, 1.0, 1.0], Some(1)).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn rank_examples() {
        let z = TabularScorer::zero(fixtures::toy_vocabulary(3));
        let a = seq(&[0, 1]);
        let b = seq(&[2, 2]);
        let r = rank_sentences(&z, std::slice::from_ref(&a)).unwrap();
        assert_eq!(r, vec![(a.clone(), 0.0)]);
        let r = rank_sentences(&z, &[b.clone(), a.clone()]).unwrap();
        assert_eq!(r[0].0, b);
        assert_eq!(r[1].0, a);
        assert!(matches!(
            rank_sentences(&z, &[a, seq(&[0])]),
            Err(Error::MixedLengths { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn state_index_round_trip() {
        for i in 0..27 {
            assert_eq!(state_index(&state_from_index(i, 3, 3), 3), i);
        }
        assert_eq!(state_from_index(5, 3, 2), vec![1, 2]);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in prop::collection::vec(-50.0f64..50.0, 1..64)) {
            let p = softmax(&logits, None).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn softmax_is_shift_invariant(
            logits in prop::collection::vec(-20.0f64..20.0, 2..32),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&logits, None).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
            let q = softmax(&shifted, None).unwrap();
            let argmax = |v: &[f64]| top_k_indices(v, 1)[0];
            prop_assert_eq!(argmax(&p), argmax(&q));
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn top_k_truncation_zeroes_the_tail(
            logits in prop::collection::vec(-5.0f64..5.0, 2..20),
            k in 1usize..20,
        ) {
            let k = k.min(logits.len());
            let p = softmax(&logits, Some(k)).unwrap();
            let kept = top_k_indices(&logits, k);
            for (i, &pi) in p.iter().enumerate() {
                if !kept.contains(&i) { prop_assert_eq!(pi, 0.0); }
            }
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert_eq!(softmax(&logits, Some(logits.len())).unwrap(), softmax(&logits, None).unwrap());
        }
    }
}
