//! Sampler invariants, the topic conditional and KL properties.

use herbrx_core::lda::{
    fit, gibbs_sweep, infer_topics, kl_topics, topic_conditional, Corpus, GibbsState, LdaConfig, TopicDistribution,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_corpus(docs: usize, herbs: usize, rng: &mut impl Rng) -> Corpus {
    (0..docs)
        .map(|_| {
            let len = rng.random_range(2..8);
            let mut d: Vec<usize> = (0..len).map(|_| rng.random_range(0..herbs)).collect();
            d.sort();
            d.dedup();
            d
        })
        .collect()
}

fn distribution() -> impl Strategy<Value = TopicDistribution> {
    prop::collection::vec(0.01f64..1.0, 2..10).prop_map(|v| {
        let s: f64 = v.iter().sum();
        TopicDistribution(v.into_iter().map(|x| x / s).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// For two topics the conditional equals the brute-force ratio of the
    /// document and herb factors.
    #[test]
    fn two_topic_conditional_matches_direct_formula(
        d0 in 0usize..20, d1 in 0usize..20,
        h0 in 0usize..10, h1 in 0usize..10,
        extra0 in 0usize..30, extra1 in 0usize..30,
        alpha in 0.01f64..5.0, beta in 0.001f64..2.0, n in 1usize..50,
    ) {
        let (t0, t1) = (h0 + extra0, h1 + extra1);
        let w = topic_conditional(&[d0, d1], &[h0, h1], &[t0, t1], alpha, beta, n);
        let f = |d: usize, h: usize, t: usize| (d as f64 + alpha) * (h as f64 + beta) / (t as f64 + n as f64 * beta);
        let (a, b) = (f(d0, h0, t0), f(d1, h1, t1));
        prop_assert!((w[0] - a / (a + b)).abs() < 1e-12);
        prop_assert!((w[0] + w[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_identity(p in distribution(), seed in any::<u64>()) {
        prop_assert!(kl_topics(&p, &p).unwrap().abs() <= 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..p.len()).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let g = TopicDistribution(raw.into_iter().map(|x| x / s).collect());
        let kl = kl_topics(&p, &g).unwrap();
        prop_assert!(kl >= -1e-12);
        if p.0.iter().zip(&g.0).any(|(a, b)| (a - b).abs() > 1e-6) {
            prop_assert!(kl > 0.0);
        }
    }

    #[test]
    fn sweeps_conserve_counts(seed in any::<u64>(), topics in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus = random_corpus(30, 12, &mut rng);
        let cfg = LdaConfig::with_topics(topics);
        let mut state = GibbsState::random(&corpus, topics, 12, &mut rng).unwrap();
        let tokens = state.total_tokens();
        for _ in 0..5 {
            gibbs_sweep(&mut state, &corpus, &cfg, &mut rng).unwrap();
            state.check_consistent(&corpus).unwrap();
            prop_assert_eq!(state.total_tokens(), tokens);
        }
    }

    #[test]
    fn keeping_every_topic_leaves_state_unchanged(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus = random_corpus(20, 10, &mut rng);
        let cfg = LdaConfig::with_topics(3);
        let mut state = GibbsState::random(&corpus, 3, 10, &mut rng).unwrap();
        let before = state.clone();
        state.sweep_with(&corpus, &cfg, |_, old| old);
        prop_assert_eq!(state, before);
    }
}

#[test]
fn fit_is_deterministic_per_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let corpus = random_corpus(40, 15, &mut rng);
    let cfg = LdaConfig { burn_in: 20, samples: 10, seed: 9, ..LdaConfig::with_topics(3) };
    let (a, da) = fit(&corpus, 15, &cfg).unwrap();
    let (b, db) = fit(&corpus, 15, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(da, db);
    for d in &da {
        assert!((d.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let t = infer_topics(&a, &corpus[0], &cfg).unwrap();
    assert_eq!(t, infer_topics(&a, &corpus[0], &cfg).unwrap());
}

#[test]
fn fold_in_prefers_the_planted_topic() {
    // Two disjoint topics over herbs 0..4 and 4..8.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let corpus: Corpus = (0..200)
        .map(|i| {
            let base = if i % 2 == 0 { 0 } else { 4 };
            let mut d: Vec<usize> = (0..3).map(|_| base + rng.random_range(0..4)).collect();
            d.sort();
            d.dedup();
            d
        })
        .collect();
    let cfg = LdaConfig { alpha: 0.1, burn_in: 100, samples: 50, seed: 1, ..LdaConfig::with_topics(2) };
    let (model, _) = fit(&corpus, 8, &cfg).unwrap();
    let a = infer_topics(&model, &[0, 1, 2], &cfg).unwrap();
    let b = infer_topics(&model, &[4, 5, 6], &cfg).unwrap();
    assert_ne!(a.argmax(), b.argmax());
    assert!(kl_topics(&a, &b).unwrap() > kl_topics(&a, &infer_topics(&model, &[0, 3], &cfg).unwrap()).unwrap());
}
