use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use markovmouth::fixtures::toy_vocabulary;
use markovmouth::training::{per_token_pll, train_pll, TrainConfig, TrainMode};
use markovmouth::{Corpus, LogLinearScorer, Sequence};

fn unigram_corpus(weights: &[f64], sentences: usize, length: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = WeightedIndex::new(weights).unwrap();
    let seqs = (0..sentences)
        .map(|_| Sequence::new((0..length).map(|_| dist.sample(&mut rng)).collect()).unwrap())
        .collect();
    Corpus::new(seqs, "unigram").unwrap()
}

fn negative_entropy(weights: &[f64]) -> f64 {
    let z: f64 = weights.iter().sum();
    weights.iter().map(|w| w / z).map(|p| p * p.ln()).sum()
}

#[test]
fn unigram_window_zero_recovers_the_entropy() {
    let weights = [5.0, 3.0, 2.0, 1.0];
    let corpus = unigram_corpus(&weights, 2000, 6, 4);
    let mut scorer = LogLinearScorer::zeros(toy_vocabulary(4), 0);
    let config = TrainConfig {
        learning_rate: 0.5,
        epochs: 10,
        batch_size: 50,
        seed: 1,
        mode: TrainMode::ExactPll,
        l2: 0.0,
    };
    train_pll(&mut scorer, &corpus, &config).unwrap();
    let got = per_token_pll(&scorer, &corpus).unwrap();
    assert!((got - negative_entropy(&weights)).abs() < 0.05, "{got}");
}

#[test]
fn every_mode_improves_the_objective() {
    let corpus = unigram_corpus(&[4.0, 1.0, 1.0], 200, 5, 9);
    for mode in [
        TrainMode::ExactPll,
        TrainMode::StochasticPll { k: 2 },
        TrainMode::MultiMask { rate: 0.3 },
    ] {
        let mut scorer = LogLinearScorer::zeros(toy_vocabulary(3), 1);
        let config = TrainConfig {
            learning_rate: 0.2,
            epochs: 5,
            batch_size: 20,
            mode,
            ..TrainConfig::default()
        };
        let trace = train_pll(&mut scorer, &corpus, &config).unwrap();
        assert_eq!(trace.epochs.len(), 6);
        assert!(trace.final_pll() > trace.epochs[0].pll, "{mode:?}");
    }
}
