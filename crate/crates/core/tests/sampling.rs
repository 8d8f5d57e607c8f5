use std::collections::BTreeSet;

use dsm_core::fixtures::{micro_cohort, micro_vocab};
use dsm_core::losses::matching_loss;
use dsm_core::network::NetworkConfig;
use dsm_core::sampling::{build_cohort_pairs, run_audit, synthesis_budget, AuditConfig, PairRef, SearchView, SynthesisPolicy};
use dsm_core::text::encode_search;
use dsm_core::train::{cohort_loss, cohort_pairs, init_params, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct RawSearch {
    query: String,
    ads: Vec<(String, bool)>,
}

fn random_cohort(rng: &mut ChaCha8Rng) -> Vec<RawSearch> {
    let m = rng.random_range(1..=6);
    (0..m)
        .map(|_| {
            let n_ads = rng.random_range(1..=5);
            let mut ids: Vec<String> = Vec::new();
            while ids.len() < n_ads {
                let id = format!("ad{}", rng.random_range(0..8));
                if !ids.contains(&id) {
                    ids.push(id);
                }
            }
            let click_rate = rng.random_range(0.0..1.0);
            RawSearch { query: format!("q{}", rng.random_range(0..4)), ads: ids.into_iter().map(|id| (id, rng.random_bool(click_rate))).collect() }
        })
        .collect()
}

fn views(raw: &[RawSearch]) -> Vec<SearchView<'_>> {
    raw.iter().map(|s| SearchView { query: &s.query, ads: s.ads.iter().map(|(a, c)| (a.as_str(), *c)).collect() }).collect()
}

fn identity<'a>(raw: &'a [RawSearch], p: &PairRef) -> (&'a str, &'a str) {
    (&raw[p.query].query, &raw[p.ad.0].ads[p.ad.1].0)
}

#[test]
fn cohort_pair_algebra_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut synthesized_total = 0;
    for trial in 0..1000 {
        let raw = random_cohort(&mut rng);
        let m = raw.len();
        let pairs = build_cohort_pairs(&views(&raw), SynthesisPolicy::default(), &mut rng);

        let mut served = BTreeSet::new();
        let mut clicked = BTreeSet::new();
        for s in &raw {
            for (a, c) in &s.ads {
                served.insert((s.query.as_str(), a.as_str()));
                if *c {
                    clicked.insert((s.query.as_str(), a.as_str()));
                }
            }
        }
        let mut want_pos = Vec::new();
        let mut want_neg = Vec::new();
        for (i, s) in raw.iter().enumerate() {
            for (k, (a, c)) in s.ads.iter().enumerate() {
                if *c {
                    want_pos.push(PairRef::served(i, k));
                } else if !clicked.contains(&(s.query.as_str(), a.as_str())) {
                    want_neg.push(PairRef::served(i, k));
                }
            }
        }
        assert_eq!(pairs.positives, want_pos, "trial {trial}");
        assert_eq!(pairs.observed_negatives, want_neg, "trial {trial}");

        let mut candidates = BTreeSet::new();
        for q in &raw {
            for s in &raw {
                for (a, _) in &s.ads {
                    if !served.contains(&(q.query.as_str(), a.as_str())) {
                        candidates.insert((q.query.as_str(), a.as_str()));
                    }
                }
            }
        }
        let expected =
            if want_neg.len() < want_pos.len() { (want_pos.len() - want_neg.len()).min(synthesis_budget(m)).min(candidates.len()) } else { 0 };
        assert_eq!(pairs.synthesized_negatives.len(), expected, "trial {trial}");
        assert!(pairs.synthesized_negatives.len() < (m * (m - 1)).max(1));
        let mut seen = BTreeSet::new();
        for p in &pairs.synthesized_negatives {
            assert!(!p.is_served() && p.query != p.ad.0);
            let id = identity(&raw, p);
            assert!(!served.contains(&id), "trial {trial}: synthesized {id:?} was served");
            assert!(seen.insert(id), "trial {trial}: duplicate {id:?}");
        }
        synthesized_total += pairs.synthesized_negatives.len();

        let off = build_cohort_pairs(&views(&raw), SynthesisPolicy::disabled(), &mut rng);
        assert!(off.synthesized_negatives.is_empty());
        assert_eq!(off.positives, pairs.positives);
    }
    assert!(synthesized_total > 100, "the scan never exercised synthesis");
}

#[test]
fn budget_values() {
    assert_eq!(synthesis_budget(1), 0);
    assert_eq!(synthesis_budget(2), 1);
    assert_eq!(synthesis_budget(3), 5);
    assert_eq!(synthesis_budget(21), 419);
}

#[test]
fn lemma_audit_without_synthesis_passes_across_ten_seeds() {
    let cfg = AuditConfig::default();
    assert_eq!((cfg.n_searches, cfg.ads_per_search, cfg.n_draws, cfg.n_seeds), (4, 2, 20_000, 10));
    let started = std::time::Instant::now();
    let summary = run_audit(&cfg).unwrap();
    assert!(started.elapsed().as_secs() < 300);
    assert_eq!(summary.per_seed.len(), 10);
    for s in &summary.per_seed {
        assert!(!s.synthesis);
        assert!(s.coordinates.len() <= 20);
        for c in &s.coordinates {
            assert!(c.std_error >= 0.0);
            assert_eq!(c.within_3se, (c.mean_cohort_gradient - c.full_gradient).abs() <= 3.0 * c.std_error);
        }
    }
    assert!(summary.pass_fraction >= 0.95, "{}", summary.pass_fraction);
    assert_eq!(summary.passed, Some(true));
}

#[test]
fn audit_with_synthesis_reports_but_does_not_judge() {
    let summary = run_audit(&AuditConfig { synthesis: true, n_draws: 500, n_seeds: 2, ..AuditConfig::default() }).unwrap();
    assert_eq!(summary.passed, None);
    assert!(summary.per_seed.iter().all(|s| s.synthesis));
}

#[test]
fn combined_gradient_is_sum_of_component_gradients() {
    let net = NetworkConfig::micro();
    let vocab = micro_vocab();
    let records = micro_cohort();
    let searches: Vec<_> = records.iter().map(|r| encode_search(r, &vocab, net.l_q, net.l_a)).collect();
    let cohort: Vec<_> = searches.iter().collect();
    for seed in 0..5 {
        let params = init_params(&net, &TrainConfig { seed, init_stddev: 0.5, ..TrainConfig::default() }, vocab.len()).unwrap();
        let pairs = cohort_pairs(&cohort, SynthesisPolicy::default(), &mut ChaCha8Rng::seed_from_u64(seed));
        let both = cohort_loss(&params, &net, &cohort, &pairs, true, |_, _| (1.0, 1.0)).unwrap();
        let p_only = cohort_loss(&params, &net, &cohort, &pairs, true, |_, _| (1.0, 0.0)).unwrap();
        let q_only = cohort_loss(&params, &net, &cohort, &pairs, true, |_, _| (0.0, 1.0)).unwrap();
        assert!((both.report.l - both.report.p - both.report.q).abs() < 1e-12);
        let sum = p_only.grads.add(&q_only.grads);
        for (name, g) in both.grads.iter() {
            for (a, b) in g.data().iter().zip(sum.get(name).unwrap().data()) {
                assert!((a - b).abs() < 1e-10, "{name}: {a} vs {b}");
            }
        }
    }
}

proptest! {
    #[test]
    fn matching_loss_falls_with_positive_and_rises_with_negative_scores(
        pos in prop::collection::vec(-6.0f64..6.0, 1..5),
        neg in prop::collection::vec(-6.0f64..6.0, 1..5),
        which in 0usize..5,
        delta in 1e-3f64..1.0,
    ) {
        let base = matching_loss(&pos, &neg).unwrap();
        let mut up_pos = pos.clone();
        up_pos[which % pos.len()] += delta;
        prop_assert!(matching_loss(&up_pos, &neg).unwrap() < base);
        let mut up_neg = neg.clone();
        up_neg[which % neg.len()] += delta;
        prop_assert!(matching_loss(&pos, &up_neg).unwrap() > base);
    }
}
