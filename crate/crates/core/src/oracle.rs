//! Brute-force ground truth for small state spaces.
//!
//! States are the `M^T` mask-free sequences in lexicographic id order (first
//! position most significant); see [`crate::mrf::state_index`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{MaskedSequence, Sequence, Vocabulary};
use crate::mrf::{
    check_cap, conditional, enumerate_states, state_from_index, state_index,
    unnormalized_log_joint, LogSumExp, Scorer, DEFAULT_ENUMERATION_CAP,
};

/// Largest state space for which a dense kernel is built.
pub const KERNEL_STATE_CAP: u64 = 4096;

pub const STATIONARY_TOLERANCE: f64 = 1e-10;
pub const STATIONARY_MAX_ITERATIONS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionTable {
    /// Alphabet size `M`.
    pub m: usize,
    /// Sequence length `T`.
    pub length: usize,
    pub probs: Vec<f64>,
}

impl DistributionTable {
    pub fn uniform(m: usize, length: usize) -> Result<Self> {
        let n = check_cap(m, length, DEFAULT_ENUMERATION_CAP)?;
        Ok(Self {
            m,
            length,
            probs: vec![1.0 / n as f64; n],
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn state(&self, index: usize) -> Sequence {
        Sequence::from_ids_unchecked(state_from_index(index, self.m, self.length))
    }

    pub fn states(&self) -> impl Iterator<Item = Sequence> {
        enumerate_states(self.m, self.length)
    }

    pub fn prob(&self, seq: &Sequence) -> f64 {
        self.probs[state_index(seq.ids(), self.m)]
    }

    fn same_space(&self, other: &Self) -> Result<()> {
        if self.m != other.m || self.length != other.length || self.len() != other.len() {
            return Err(Error::StateSpaceMismatch);
        }
        Ok(())
    }
}

/// Dense row-stochastic matrix over the canonical state order.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub m: usize,
    pub length: usize,
    n: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.data[from * self.n + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.data[from * self.n..(from + 1) * self.n]
    }

    /// `π P`.
    pub fn apply(&self, pi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (i, &w) in pi.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, &p) in out.iter_mut().zip(self.row(i)) {
                *o += w * p;
            }
        }
        out
    }

    /// Largest `|π_i P_ij − π_j P_ji|`.
    pub fn detailed_balance_residual(&self, pi: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in i + 1..self.n {
                worst = worst.max((pi[i] * self.get(i, j) - pi[j] * self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// The joint `p_θ` over every state, with `Z` summed explicitly.
pub fn enumerate_joint<S: Scorer + ?Sized>(scorer: &S, length: usize) -> Result<DistributionTable> {
    enumerate_joint_capped(scorer, length, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_joint_capped<S: Scorer + ?Sized>(
    scorer: &S,
    length: usize,
    cap: u64,
) -> Result<DistributionTable> {
    let m = scorer.vocab().len();
    check_cap(m, length, cap)?;
    let scores = enumerate_states(m, length)
        .map(|s| unnormalized_log_joint(scorer, &s))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = LogSumExp::new();
    for &s in &scores {
        acc.push(s);
    }
    let log_z = acc.value();
    Ok(DistributionTable {
        m,
        length,
        probs: scores.iter().map(|s| (s - log_z).exp()).collect(),
    })
}

/// The random-scan Gibbs kernel:
/// `P(X → X') = (1/T) Σ_t [X' = X off t] · p(x'_t | X\t)`.
pub fn gibbs_transition_matrix<S: Scorer + ?Sized>(
    scorer: &S,
    length: usize,
    top_k: Option<usize>,
) -> Result<TransitionMatrix> {
    let m = scorer.vocab().len();
    let n = check_cap(m, length, KERNEL_STATE_CAP)?;
    let mut data = vec![0.0; n * n];
    let weight = 1.0 / length as f64;
    for (from, state) in enumerate_states(m, length).enumerate() {
        let mut ids = state.ids().to_vec();
        for t in 0..length {
            let dist = conditional(scorer, &state, t, top_k)?;
            let orig = ids[t];
            for (v, p) in dist.into_iter().enumerate() {
                ids[t] = v;
                data[from * n + state_index(&ids, m)] += weight * p;
            }
            ids[t] = orig;
        }
    }
    Ok(TransitionMatrix {
        m,
        length,
        n,
        data,
    })
}

/// Power iteration from the uniform distribution until `‖πP − π‖₁ ≤ 1e-10`.
pub fn stationary_distribution(p: &TransitionMatrix) -> Result<DistributionTable> {
    let mut pi = vec![1.0 / p.n as f64; p.n];
    let mut residual = f64::INFINITY;
    for _ in 0..STATIONARY_MAX_ITERATIONS {
        let next = p.apply(&pi);
        residual = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if residual <= STATIONARY_TOLERANCE {
            let total: f64 = pi.iter().sum();
            for x in &mut pi {
                *x /= total;
            }
            return Ok(DistributionTable {
                m: p.m,
                length: p.length,
                probs: pi,
            });
        }
    }
    Err(Error::NoConvergence {
        residual,
        iterations: STATIONARY_MAX_ITERATIONS,
    })
}

/// `½ Σ |p_i − q_i|`.
pub fn total_variation(p: &DistributionTable, q: &DistributionTable) -> Result<f64> {
    p.same_space(q)?;
    Ok(0.5 * p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Normalized histogram of mask-free samples.
pub fn empirical_distribution<'a, I>(samples: I, m: usize, length: usize) -> Result<DistributionTable>
where
    I: IntoIterator<Item = &'a Sequence>,
{
    let n = check_cap(m, length, DEFAULT_ENUMERATION_CAP)?;
    let mut counts = vec![0usize; n];
    let mut total = 0usize;
    for s in samples {
        if s.len() != length || s.ids().iter().any(|&x| x >= m) {
            return Err(Error::StateSpaceMismatch);
        }
        counts[state_index(s.ids(), m)] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(DistributionTable {
        m,
        length,
        probs: counts.iter().map(|&c| c as f64 / total as f64).collect(),
    })
}

/// A scorer whose conditionals are the exact fiber conditionals of a
/// strictly positive joint `q`: `logits(X\t)[v] = ln q(X with x_t = v)`.
///
/// Contexts that hold `[MASK]` anywhere but the target get zero logits.
#[derive(Debug, Clone)]
pub struct JointConditionalScorer {
    vocab: Vocabulary,
    joint: DistributionTable,
}

impl JointConditionalScorer {
    pub fn new(vocab: Vocabulary, joint: DistributionTable) -> Result<Self> {
        if vocab.len() != joint.m {
            return Err(Error::StateSpaceMismatch);
        }
        if joint.probs.iter().any(|&p| p.is_nan() || p <= 0.0) {
            return Err(Error::InvalidConfig(vec![
                "joint must be strictly positive".into(),
            ]));
        }
        Ok(Self { vocab, joint })
    }
}

impl Scorer for JointConditionalScorer {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn logits(&self, ms: &MaskedSequence) -> Result<Vec<f64>> {
        let m = self.joint.m;
        if ms.len() != self.joint.length {
            return Err(Error::StateSpaceMismatch);
        }
        let t = ms.position();
        let clean = ms
            .ids()
            .iter()
            .enumerate()
            .all(|(s, &x)| s == t || x < m);
        if !clean {
            return Ok(vec![0.0; m]);
        }
        let mut ids = ms.ids().to_vec();
        Ok((0..m)
            .map(|v| {
                ids[t] = v;
                self.joint.probs[state_index(&ids, m)].ln()
            })
            .collect())
    }
}

/// How far the stationary law of the conditional kernel sits from the joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelReport {
    pub length: usize,
    pub tv_stationary_joint: f64,
    /// Largest detailed-balance violation of the kernel under its own
    /// stationary distribution.
    pub detailed_balance_residual: f64,
    pub stationary: DistributionTable,
    pub joint: DistributionTable,
}

pub fn kernel_report<S: Scorer + ?Sized>(
    scorer: &S,
    length: usize,
    top_k: Option<usize>,
) -> Result<KernelReport> {
    let kernel = gibbs_transition_matrix(scorer, length, top_k)?;
    let stationary = stationary_distribution(&kernel)?;
    let joint = enumerate_joint(scorer, length)?;
    Ok(KernelReport {
        length,
        tv_stationary_joint: total_variation(&stationary, &joint)?,
        detailed_balance_residual: kernel.detailed_balance_residual(&stationary.probs),
        stationary,
        joint,
    })
}
