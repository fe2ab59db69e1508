use proptest::prelude::*;
use sfl_core::Rng;
use sfl_lab::data::{fixed_windows, generate_data, sample_windows, unigram_entropy, DataSpec, MarkovChain};
use sfl_lab::LabError;

fn spec(vocab: usize, temperature: f64) -> DataSpec {
    DataSpec {
        vocab,
        temperature,
        train_tokens: 100_000,
        eval_tokens: 4_096,
        ..DataSpec::default()
    }
}

#[test]
fn hot_chain_is_uniform() {
    let s = spec(32, 1e6);
    let c = generate_data(&s).unwrap();
    let h = unigram_entropy(&c.train, 32);
    let log_v = 32f64.ln();
    assert!((h - log_v).abs() / log_v < 0.02, "H = {h}, ln V = {log_v}");
    let mut chain = MarkovChain::new(s).unwrap();
    let ce = chain.cross_entropy(&c.eval);
    assert!((ce - log_v).abs() / log_v < 0.02, "entropy rate {ce}");
}

#[test]
fn cold_chain_is_a_deterministic_cycle() {
    let s = spec(32, 0.0);
    let c = generate_data(&s).unwrap();
    let mut chain = MarkovChain::new(s).unwrap();
    assert_eq!(chain.cross_entropy(&c.train), 0.0);
    // A deterministic order-2 chain over 32 symbols cycles with period at
    // most 32^2 once the burn-in has passed.
    let tail = &c.train[c.train.len() - 4096..];
    let period = (1..=1024)
        .find(|&p| tail[p..].iter().zip(tail).all(|(a, b)| a == b))
        .expect("no cycle found");
    assert!(period >= 1);
}

#[test]
fn same_seed_same_tokens() {
    let a = generate_data(&spec(32, 0.5)).unwrap();
    let b = generate_data(&spec(32, 0.5)).unwrap();
    assert_eq!(a.train[..1000], b.train[..1000]);
    assert_eq!(a.eval, b.eval);
    let other = generate_data(&DataSpec {
        seed: 8,
        ..spec(32, 0.5)
    })
    .unwrap();
    assert_ne!(a.train[..1000], other.train[..1000]);
}

#[test]
fn train_and_eval_streams_differ() {
    let c = generate_data(&spec(32, 0.5)).unwrap();
    assert_ne!(c.train[..256], c.eval[..256]);
}

#[test]
fn default_chain_is_learnable() {
    let s = DataSpec::default();
    let c = generate_data(&s).unwrap();
    let mut chain = MarkovChain::new(s.clone()).unwrap();
    let ce = chain.cross_entropy(&c.eval);
    let log_v = (s.vocab as f64).ln();
    let h1 = unigram_entropy(&c.train, s.vocab);
    assert!(ce < log_v, "held-out entropy rate {ce} >= ln V {log_v}");
    // The context carries information beyond the marginal.
    assert!(ce < h1 - 0.5, "rate {ce}, unigram {h1}");
}

#[test]
fn probabilities_are_normalized() {
    let mut chain = MarkovChain::new(spec(16, 0.7)).unwrap();
    for ctx in [[0, 0], [3, 9], [15, 15]] {
        let p = chain.probs(&ctx);
        assert_eq!(p.len(), 16);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x >= 0.0));
    }
}

#[test]
fn invalid_specs_are_rejected() {
    for bad in [
        DataSpec {
            vocab: 1,
            ..DataSpec::default()
        },
        DataSpec {
            order: 0,
            ..DataSpec::default()
        },
        DataSpec {
            temperature: -1.0,
            ..DataSpec::default()
        },
        DataSpec {
            temperature: f64::NAN,
            ..DataSpec::default()
        },
    ] {
        assert!(matches!(MarkovChain::new(bad), Err(LabError::Config(_))));
    }
}

#[test]
fn fixed_windows_do_not_overlap() {
    let stream: Vec<usize> = (0..100).collect();
    let w = fixed_windows(&stream, 10, 3);
    assert_eq!(w, vec![(0..10).collect::<Vec<_>>(), (10..20).collect(), (20..30).collect()]);
    assert_eq!(fixed_windows(&stream, 40, 5).len(), 2);
}

proptest! {
    #[test]
    fn sampled_windows_are_contiguous_slices(len in 2usize..40, count in 1usize..10, seed in 0u64..1000) {
        let stream: Vec<usize> = (0..200).collect();
        let mut rng = Rng::new(seed);
        let ws = sample_windows(&stream, len, count, &mut rng);
        prop_assert_eq!(ws.len(), count);
        for w in ws {
            prop_assert_eq!(w.len(), len);
            prop_assert!(w.windows(2).all(|p| p[1] == p[0] + 1));
        }
    }

    #[test]
    fn tokens_stay_in_vocab(vocab in 2usize..20, order in 1usize..4, temp in 0.0f64..3.0, seed in 0u64..100) {
        let s = DataSpec { vocab, order, temperature: temp, seed, train_tokens: 500, eval_tokens: 100 };
        let c = generate_data(&s).unwrap();
        prop_assert_eq!(c.train.len(), 500);
        prop_assert!(c.train.iter().chain(&c.eval).all(|&t| t < vocab));
    }
}
