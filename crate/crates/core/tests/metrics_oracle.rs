//! Metrics against brute-force enumeration, plus their structural properties.

use herbrx_core::metrics::{
    aggregate_folds, count_metrics, logic_score, similarity, AvoidanceMode, MetricsReport, PairRuleTable,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const UNIVERSE: usize = 30;

fn herb_set(min: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::btree_set(0..UNIVERSE, min..12).prop_map(|s| s.into_iter().collect())
}

/// Membership scan over the whole universe.
fn oracle_counts(g: &[usize], r: &[usize]) -> (usize, usize, usize) {
    let (mut nc, mut np, mut ng) = (0, 0, 0);
    for h in 0..UNIVERSE {
        let (a, b) = (g.contains(&h), r.contains(&h));
        np += a as usize;
        ng += b as usize;
        nc += (a && b) as usize;
    }
    (nc, np, ng)
}

fn oracle_logic(rx: &[usize], common: &[(usize, usize)], taboo: &[(usize, usize)]) -> (i64, i64) {
    let mut pos = 0;
    let mut neg = 0;
    for a in 0..UNIVERSE {
        for b in a + 1..UNIVERSE {
            let (ia, ib) = (rx.contains(&a), rx.contains(&b));
            if common.contains(&(a, b)) && ia && ib {
                pos += 1;
            }
            if taboo.contains(&(a, b)) {
                if ia && ib {
                    neg -= 1;
                } else if ia || ib {
                    neg += 1;
                }
            }
        }
    }
    (pos, neg)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn similarity_matches_enumeration(g in herb_set(0), r in herb_set(1)) {
        let s = similarity(&g, &r).unwrap();
        let (nc, np, ng) = oracle_counts(&g, &r);
        prop_assert_eq!((s.nc, s.np, s.ng), (nc, np, ng));
        prop_assert_eq!(s.p, if np == 0 { 0.0 } else { nc as f64 / np as f64 });
        prop_assert_eq!(s.r, nc as f64 / ng as f64);
        prop_assert_eq!(s.iou, nc as f64 / (np + ng - nc) as f64);
        for v in [s.p, s.r, s.iou] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if np > 0 {
            prop_assert!(s.iou <= s.p.min(s.r));
        }
    }

    #[test]
    fn logic_score_is_monotone_in_common_pairs(rx in herb_set(1), extra in 0..UNIVERSE) {
        let rules = PairRuleTable::from_pairs([(0, 1), (2, 3), (4, extra.max(5))], [(6, 7)]).unwrap();
        let before = logic_score(&rx, &rules, AvoidanceMode::ExactlyOne);
        let mut grown = rx.clone();
        grown.push(extra);
        let after = logic_score(&grown, &rules, AvoidanceMode::ExactlyOne);
        prop_assert!(after.s_pos >= before.s_pos);
        prop_assert_eq!(after.s_total, after.s_pos + after.s_neg);
    }
}

#[test]
fn count_metrics_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..200)
        .map(|_| {
            let pick = |rng: &mut ChaCha8Rng, min: usize| {
                let mut v: Vec<usize> = (0..rng.random_range(min..10)).map(|_| rng.random_range(0..UNIVERSE)).collect();
                v.sort();
                v.dedup();
                v
            };
            (pick(&mut rng, 0), pick(&mut rng, 1))
        })
        .collect();
    let c = count_metrics(&pairs).unwrap();
    let (mut sp, mut sg, mut sc) = (0, 0, 0);
    for (g, r) in &pairs {
        let (nc, np, ng) = oracle_counts(g, r);
        sp += np;
        sg += ng;
        sc += nc;
    }
    let n = pairs.len() as f64;
    assert_eq!(c.nb_p, sp as f64 / n);
    assert_eq!(c.nb_c, sc as f64 / n);
    assert_eq!(c.nb_d, (sp as f64 / n - sg as f64 / n).abs());

    let report = MetricsReport::compute(&pairs, None).unwrap();
    let iou: f64 = pairs.iter().map(|(g, r)| similarity(g, r).unwrap().iou).sum::<f64>() / n;
    assert!((report.iou_sim - iou).abs() <= 1e-12);
}

#[test]
fn logic_score_matches_pair_scanner() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut all: Vec<(usize, usize)> = (0..UNIVERSE).flat_map(|a| (a + 1..UNIVERSE).map(move |b| (a, b))).collect();
    for i in (1..all.len()).rev() {
        all.swap(i, rng.random_range(0..=i));
    }
    let (common, taboo) = (all[..25].to_vec(), all[25..50].to_vec());
    let rules = PairRuleTable::from_pairs(common.iter().copied(), taboo.iter().copied()).unwrap();
    for _ in 0..200 {
        let mut rx: Vec<usize> = (0..rng.random_range(2..15)).map(|_| rng.random_range(0..UNIVERSE)).collect();
        rx.sort();
        rx.dedup();
        let s = logic_score(&rx, &rules, AvoidanceMode::ExactlyOne);
        assert_eq!((s.s_pos, s.s_neg), oracle_logic(&rx, &common, &taboo));
    }
}

#[test]
fn aggregate_means_recompute_from_raw_values() {
    let reports: Vec<MetricsReport> = (0..4)
        .map(|k| {
            MetricsReport::compute(&[(vec![k, k + 1], vec![k + 1, 9]), (vec![2], vec![2, 3, 4])], Some(0.1 * k as f64))
                .unwrap()
        })
        .collect();
    let s = aggregate_folds(&reports).unwrap();
    let mean_iou = reports.iter().map(|r| r.iou_sim * 100.0).sum::<f64>() / 4.0;
    assert!((s.columns[2].mean.unwrap() - mean_iou).abs() <= 1e-12);
    assert!(s.to_table().contains("IoU_sim (%)"));
    assert!(s.to_csv().starts_with("metric,mean,std,formatted\np_sim,"));
}
