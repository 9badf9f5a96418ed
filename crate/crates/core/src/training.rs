//! Pseudo log-likelihood objectives and plain-SGD fitting.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{Corpus, MaskedSequence, Sequence, TokenId, Vocabulary};
use crate::mrf::{log_sum_exp, softmax, Scorer};

/// A scorer with a flat parameter vector and an analytic logit Jacobian.
pub trait TrainableScorer: Scorer {
    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    /// Adds `Σ_v upstream[v] · ∂logits(context, position)[v] / ∂θ` to `grad`.
    fn accumulate_gradient(
        &self,
        context: &[TokenId],
        position: usize,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainMode {
    /// Every position of every sequence.
    ExactPll,
    /// `k` positions per sequence, drawn uniformly with replacement.
    StochasticPll { k: usize },
    /// Mask each position with probability `rate` (at least one) and predict
    /// all masked slots from the corrupted sequence.
    MultiMask { rate: f64 },
}

pub const DEFAULT_MASK_RATE: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// L2 penalty coefficient; 0 disables it.
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            mode: TrainMode::ExactPll,
            l2: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be at least 1".into());
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            out.push(format!("l2 must be non-negative, got {}", self.l2));
        }
        match self.mode {
            TrainMode::StochasticPll { k: 0 } => out.push("K must be at least 1".into()),
            TrainMode::MultiMask { rate } if !(rate > 0.0 && rate < 1.0) => {
                out.push(format!("mask_rate must be in (0, 1), got {rate}"))
            }
            _ => {}
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p))
        }
    }
}

fn check_sentence(vocab: &Vocabulary, seq: &Sequence) -> Result<()> {
    vocab.check(seq)?;
    if let Some(s) = seq.first_mask(vocab) {
        return Err(Error::MaskInSequence(s));
    }
    match seq.ids().iter().position(|&id| id >= vocab.len()) {
        Some(s) => Err(Error::InvalidTokenId {
            id: seq.ids()[s],
            position: s + 1,
        }),
        None => Ok(()),
    }
}

/// `log p(x_t | X\t)` without truncation.
pub fn log_conditional<S: Scorer + ?Sized>(scorer: &S, seq: &Sequence, t: usize) -> Result<f64> {
    let mask = scorer.vocab().mask_id();
    let logits = scorer.logits(&MaskedSequence::from_context(seq.ids().to_vec(), t, mask))?;
    Ok(logits[seq.ids()[t]] - log_sum_exp(&logits))
}

fn pll_sum<S: Scorer + ?Sized>(scorer: &S, corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let per_sentence = corpus
        .sentences
        .par_iter()
        .map(|seq| {
            check_sentence(scorer.vocab(), seq)?;
            (0..seq.len())
                .map(|t| log_conditional(scorer, seq, t))
                .sum::<Result<f64>>()
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_sentence.iter().sum())
}

/// `PLL(θ; D) = (1/|D|) Σ_X Σ_t log p(x_t | X\t)`.
pub fn pseudo_log_likelihood<S: Scorer + ?Sized>(scorer: &S, corpus: &Corpus) -> Result<f64> {
    Ok(pll_sum(scorer, corpus)? / corpus.len() as f64)
}

/// PLL summed over the corpus and divided by its token count.
pub fn per_token_pll<S: Scorer + ?Sized>(scorer: &S, corpus: &Corpus) -> Result<f64> {
    Ok(pll_sum(scorer, corpus)? / corpus.token_count() as f64)
}

/// Unbiased estimate of the per-position mean `(1/T) Σ_t log p(x_t | X\t)`
/// from `k` uniformly drawn positions.
pub fn stochastic_pll_estimate<S: Scorer + ?Sized, R: Rng + ?Sized>(
    scorer: &S,
    seq: &Sequence,
    k: usize,
    rng: &mut R,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidConfig(vec!["K must be at least 1".into()]));
    }
    check_sentence(scorer.vocab(), seq)?;
    let mut total = 0.0;
    for _ in 0..k {
        let t = rng.gen_range(0..seq.len());
        total += log_conditional(scorer, seq, t)?;
    }
    Ok(total / k as f64)
}

/// Replaces each position with `mask` independently with probability
/// `rate`, conditioned on at least one replacement. Returns the corrupted
/// sequence and the `(position, original id)` of every masked slot.
///
/// The first masked slot is drawn from its exact conditional law and later
/// slots independently, which is the same distribution as redrawing the
/// whole pattern until something is masked.
pub fn corrupt_multi_mask<R: Rng + ?Sized>(
    seq: &Sequence,
    rate: f64,
    mask: TokenId,
    rng: &mut R,
) -> Result<(Sequence, Vec<(usize, TokenId)>)> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidConfig(vec![format!(
            "mask_rate must be in (0, 1), got {rate}"
        )]));
    }
    let len = seq.len();
    let log_keep = (-rate).ln_1p();
    // P(at least one mask among the first n) = -expm1(n ln(1 - rate))
    let any = |n: usize| -(n as f64 * log_keep).exp_m1();
    let u = rng.gen::<f64>() * any(len);
    let first = (0..len).find(|&i| any(i + 1) >= u).unwrap_or(len - 1);

    let mut ids = seq.ids().to_vec();
    let mut targets = vec![(first, ids[first])];
    ids[first] = mask;
    for (i, id) in ids.iter_mut().enumerate().skip(first + 1) {
        if rng.gen_bool(rate) {
            targets.push((i, *id));
            *id = mask;
        }
    }
    Ok((Sequence::from_ids_unchecked(ids), targets))
}

/// One context fed to the scorer and the slots predicted from it.
struct Item {
    context: Vec<TokenId>,
    targets: Vec<(usize, TokenId)>,
    /// Read every target from one `logits_all` pass over `context`.
    batched: bool,
    weight: f64,
}

fn plan<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    batch: &[Sequence],
    mode: TrainMode,
    rng: &mut R,
) -> Result<Vec<Item>> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let per_seq = 1.0 / batch.len() as f64;
    let mut items = Vec::with_capacity(batch.len());
    for seq in batch {
        check_sentence(vocab, seq)?;
        let ids = seq.ids();
        match mode {
            TrainMode::ExactPll => items.push(Item {
                context: ids.to_vec(),
                targets: ids.iter().copied().enumerate().collect(),
                batched: false,
                weight: per_seq,
            }),
            TrainMode::StochasticPll { k } => {
                if k == 0 {
                    return Err(Error::InvalidConfig(vec!["K must be at least 1".into()]));
                }
                let targets = (0..k)
                    .map(|_| {
                        let t = rng.gen_range(0..seq.len());
                        (t, ids[t])
                    })
                    .collect();
                items.push(Item {
                    context: ids.to_vec(),
                    targets,
                    batched: false,
                    weight: per_seq / k as f64,
                });
            }
            TrainMode::MultiMask { rate } => {
                let (corrupted, targets) = corrupt_multi_mask(seq, rate, vocab.mask_id(), rng)?;
                items.push(Item {
                    context: corrupted.into_ids(),
                    targets,
                    batched: true,
                    weight: per_seq,
                });
            }
        }
    }
    Ok(items)
}

/// Logit rows for each target of `item`, plus the masked context each row
/// was computed from.
fn item_rows<S: Scorer + ?Sized>(
    scorer: &S,
    item: &Item,
) -> Result<Vec<(Vec<TokenId>, Vec<f64>)>> {
    let mask = scorer.vocab().mask_id();
    if item.batched {
        let seq = Sequence::from_ids_unchecked(item.context.clone());
        let rows = scorer.logits_all(&seq)?;
        Ok(item
            .targets
            .iter()
            .map(|&(t, _)| (item.context.clone(), rows[t].clone()))
            .collect())
    } else {
        item.targets
            .iter()
            .map(|&(t, _)| {
                let ms = MaskedSequence::from_context(item.context.clone(), t, mask);
                let row = scorer.logits(&ms)?;
                Ok((ms.ids().to_vec(), row))
            })
            .collect()
    }
}

/// The training objective for `batch` under `mode`: the batch-mean of each
/// sequence's summed (exact, multi-mask) or averaged (stochastic) log
/// conditionals. Draws the same randomness as [`pll_gradient`].
pub fn pll_objective<S: Scorer + ?Sized, R: Rng + ?Sized>(
    scorer: &S,
    batch: &[Sequence],
    mode: TrainMode,
    rng: &mut R,
) -> Result<f64> {
    let items = plan(scorer.vocab(), batch, mode, rng)?;
    let per_item = items
        .par_iter()
        .map(|item| {
            let rows = item_rows(scorer, item)?;
            Ok(item
                .targets
                .iter()
                .zip(&rows)
                .map(|(&(_, x), (_, row))| item.weight * (row[x] - log_sum_exp(row)))
                .sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_item.iter().sum())
}

/// Gradient of [`pll_objective`] with respect to the scorer parameters.
pub fn pll_gradient<R: Rng + ?Sized>(
    scorer: &dyn Scorer,
    batch: &[Sequence],
    mode: TrainMode,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let trainable = scorer.as_trainable().ok_or(Error::NotTrainable)?;
    gradient(trainable, batch, mode, rng)
}

fn gradient<R: Rng + ?Sized>(
    scorer: &dyn TrainableScorer,
    batch: &[Sequence],
    mode: TrainMode,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let items = plan(scorer.vocab(), batch, mode, rng)?;
    let n = scorer.params().len();
    let parts = items
        .par_iter()
        .map(|item| {
            let mut grad = vec![0.0; n];
            for (&(t, x), (context, row)) in item.targets.iter().zip(item_rows(scorer, item)?) {
                let mut upstream = softmax(&row, None)?;
                for u in &mut upstream {
                    *u *= -item.weight;
                }
                upstream[x] += item.weight;
                scorer.accumulate_gradient(&context, t, &upstream, &mut grad)?;
            }
            Ok(grad)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = vec![0.0; n];
    for part in parts {
        for (a, b) in total.iter_mut().zip(part) {
            *a += b;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub pll: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn final_pll(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |r| r.pll)
    }
}

/// Fits `scorer` by gradient ascent on the PLL objective with plain SGD
/// over shuffled mini-batches. Epoch 0 in the trace is the initial PLL.
pub fn train_pll<S: TrainableScorer>(
    scorer: &mut S,
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<TrainTrace> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = TrainTrace::default();
    let record = |epoch: usize, scorer: &S, trace: &mut TrainTrace| -> Result<()> {
        let pll = pseudo_log_likelihood(scorer, corpus)?;
        if !pll.is_finite() {
            return Err(Error::Diverged { epoch, pll });
        }
        log::debug!("epoch {epoch}: pll {pll:.6}");
        trace.epochs.push(EpochRecord {
            epoch,
            pll,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        Ok(())
    };
    record(0, scorer, &mut trace)?;

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sequence> = chunk.iter().map(|&i| corpus.sentences[i].clone()).collect();
            let grad = gradient(&*scorer, &batch, config.mode, &mut rng)?;
            for (p, g) in scorer.params_mut().iter_mut().zip(grad) {
                *p += config.learning_rate * (g - config.l2 * *p);
            }
            if scorer.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    pll: f64::NAN,
                });
            }
        }
        record(epoch, scorer, &mut trace)?;
    }
    Ok(trace)
}
