use dsm_core::baselines::bm25::{bm25_score, Bm25Stats};
use dsm_core::baselines::lm::{LmConfig, LmModel};
use dsm_core::text::{EncodedPair, PAD_ID};
use proptest::prelude::*;

fn pair(q: &[usize], a: &[usize]) -> EncodedPair {
    let pad = |ids: &[usize], n: usize| {
        let mut v = vec![PAD_ID; n];
        v[..ids.len()].copy_from_slice(ids);
        (v, (0..n).map(|i| i < ids.len()).collect::<Vec<bool>>())
    };
    let (query_ids, query_mask) = pad(q, 4);
    let (ad_ids, ad_mask) = pad(a, 6);
    EncodedPair {
        query_ids,
        ad_ids,
        query_mask,
        ad_mask,
        exact_match: vec![false; 24],
        label: 0.0,
        position: 1,
        query_key: String::new(),
        ad_key: String::new(),
    }
}

#[test]
fn lm_weight_vector_spans_both_sides() {
    let m = LmModel::new(30, &LmConfig { embed_dim: 5, ..LmConfig::default() }).unwrap();
    assert_eq!(m.params.get("w").unwrap().shape(), &[10, 1]);
    assert_eq!(m.embed_dim(), 5);
}

#[test]
fn bm25_stats_invariants() {
    let docs = [vec!["a", "b", "a"], vec!["b", "c"], vec!["d"]];
    let s = Bm25Stats::build(&docs).unwrap();
    assert_eq!(s.n_docs, 3);
    assert!(s.doc_freq.values().all(|&df| df <= s.n_docs));
    assert_eq!(s.doc_freq["a"], 1);
    assert_eq!(s.doc_freq["b"], 2);
    assert!((s.avg_len - 2.0).abs() < 1e-15);
    assert!(Bm25Stats::build::<Vec<&str>, &str>(&[]).is_err());
}

proptest! {
    #[test]
    fn lm_ignores_word_order_within_a_side(
        q in prop::collection::vec(2usize..30, 1..=4),
        a in prop::collection::vec(2usize..30, 1..=6),
        seed in 0u64..50,
        rot in 0usize..6,
    ) {
        let m = LmModel::new(30, &LmConfig { embed_dim: 4, seed, ..LmConfig::default() }).unwrap();
        let base = m.predict(&pair(&q, &a)).unwrap();
        let mut q2 = q.clone();
        q2.reverse();
        let mut a2 = a.clone();
        let r = rot % a2.len();
        a2.rotate_left(r);
        let permuted = m.predict(&pair(&q2, &a2)).unwrap();
        prop_assert!((base - permuted).abs() < 1e-12);
        prop_assert_eq!(m.predict(&pair(&q, &a)).unwrap(), base);
    }

    #[test]
    fn bm25_is_positive_exactly_on_overlap(
        docs in prop::collection::vec(prop::collection::vec("[a-f]", 1..6), 1..6),
        query in prop::collection::vec("[a-h]", 1..4),
        which in 0usize..6,
    ) {
        let stats = Bm25Stats::build(&docs).unwrap();
        let doc = &docs[which % docs.len()];
        let s = bm25_score(&query, doc, &stats);
        let overlap = query.iter().any(|t| doc.contains(t));
        prop_assert!(s >= 0.0);
        prop_assert_eq!(s > 0.0, overlap);
        let mut doubled = query.clone();
        doubled.extend(query.iter().cloned());
        prop_assert!(bm25_score(&doubled, doc, &stats) >= s);
    }
}
