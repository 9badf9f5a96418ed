//! Small seeded scorers for oracle checks, tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lexicon::{Casing, Corpus, OovPolicy, Vocabulary};
use crate::loglinear::LogLinearScorer;
use crate::tabular::TabularScorer;
use crate::training::{train_pll, TrainConfig, TrainMode};

/// `M` single-letter tokens `a, b, c, …` (falling back to `t<i>` past `z`).
pub fn toy_vocabulary(m: usize) -> Vocabulary {
    let tokens = (0..m)
        .map(|i| match u8::try_from(i) {
            Ok(i) if i < 26 => char::from(b'a' + i).to_string(),
            _ => format!("t{i}"),
        })
        .collect();
    Vocabulary::new(tokens, Casing::None).expect("toy vocabulary is valid")
}

/// Fixture F2: a tabular scorer over `M = 3`, `T = 2` with every context
/// (including a masked neighbour) filled from `U(-2, 2)`, seed 17.
pub fn f2() -> TabularScorer {
    let vocab = toy_vocabulary(3);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut scorer = TabularScorer::zero(vocab);
    for t in 0..2 {
        for ctx in 0..=3 {
            let logits = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            scorer.insert(t, vec![ctx], logits).expect("fixture fits");
        }
    }
    scorer
}

/// A log-linear scorer over the toy vocabulary with parameters drawn from
/// `U(-scale, scale)`.
pub fn loglinear_fixture(m: usize, window: usize, seed: u64, scale: f64) -> LogLinearScorer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LogLinearScorer::random(toy_vocabulary(m), window, scale, &mut rng)
}

/// Six-token sentences over a ten-word vocabulary.
pub const TOY_SENTENCES: [&str; 8] = [
    "the cat sat on the mat",
    "the dog sat on the mat",
    "a cat sat on a mat",
    "the dog ran to the cat",
    "a dog ran to a mat",
    "the cat ran to the dog",
    "a cat sat on the dog",
    "the dog sat on a cat",
];

pub const TOY_LENGTH: usize = 6;

pub fn toy_corpus() -> (Vocabulary, Corpus) {
    let vocab = Vocabulary::build(&TOY_SENTENCES, 1, Casing::Lower).expect("toy vocabulary");
    let corpus = Corpus::encode_lines(&TOY_SENTENCES, &vocab, OovPolicy::Error, "toy")
        .expect("toy corpus encodes");
    (vocab, corpus)
}

/// A window-2 log-linear scorer fitted to [`TOY_SENTENCES`] by exact PLL.
pub fn trained_toy_scorer() -> LogLinearScorer {
    let (vocab, corpus) = toy_corpus();
    let mut scorer = LogLinearScorer::zeros(vocab, 2);
    let config = TrainConfig {
        learning_rate: 0.5,
        epochs: 60,
        batch_size: 4,
        seed: 7,
        mode: TrainMode::ExactPll,
        l2: 0.0,
    };
    train_pll(&mut scorer, &corpus, &config).expect("toy training converges");
    scorer
}
