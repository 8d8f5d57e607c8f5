use dsm_core::text::{
    ad_tokens, build_vocab, encode_pair, normalize_bytes, normalize_text, AdImpression, CohortRecord, Vocab, OOV_ID, PAD_ID, SEP_TOKEN,
};
use proptest::prelude::*;

fn ad(title: &str, description: &str, url: &str) -> AdImpression {
    AdImpression { position: 1, title: title.into(), description: description.into(), display_url: url.into(), clicked: false }
}

#[test]
fn url_splits_into_components() {
    assert_eq!(normalize_text("www.Hotels.com/boston?x=1&y_z-w"), ["www", "hotels", "com", "boston", "x", "1", "y", "z", "w"]);
}

#[test]
fn invalid_utf8_acts_as_a_separator() {
    assert_eq!(normalize_bytes(b"red\xffshoe"), ["red", "shoe"]);
}

#[test]
fn frequency_ties_break_lexicographically() {
    let docs = [vec!["b", "a", "c"], vec!["b", "a"], vec!["c", "c"]];
    let v = Vocab::build(docs.iter().map(|d| d.iter().copied()), 1).unwrap();
    assert_eq!(v.tokens(), ["[PAD]", "[OOV]", "c", "a", "b", SEP_TOKEN]);
    let v = Vocab::build(docs.iter().map(|d| d.iter().copied()), 3).unwrap();
    assert_eq!(v.tokens(), ["[PAD]", "[OOV]", "c", SEP_TOKEN]);
    assert_eq!(v.id("a"), OOV_ID);
    assert!(Vocab::build(docs.iter().map(|d| d.iter().copied()), 0).is_err());
}

#[test]
fn encoding_layout() {
    let records = [CohortRecord { search_id: "1".into(), query_text: "Cheap red SHOES".into(), ads: vec![ad("Red shoes", "cheap", "shop.com")] }];
    let vocab = build_vocab(&records, 1).unwrap();
    let p = encode_pair("cheap red shoes now", &records[0].ads[0], &vocab, 3, 8);
    assert_eq!(p.query_mask, [true, true, true]);
    assert_eq!(p.query_ids.iter().map(|&i| vocab.token(i).unwrap()).collect::<Vec<_>>(), ["cheap", "red", "shoes"]);
    let ad_toks: Vec<&str> = p.ad_ids.iter().zip(&p.ad_mask).filter(|(_, &m)| m).map(|(&i, _)| vocab.token(i).unwrap()).collect();
    assert_eq!(ad_toks, ["red", "shoes", SEP_TOKEN, "cheap", SEP_TOKEN, "shop", "com"]);
    assert_eq!(p.ad_ids[7], PAD_ID);
    assert!(!p.ad_mask[7]);
    // query "cheap" matches ad position 3
    assert!(p.exact(0, 3));
    assert!(p.exact(1, 0));
    assert!(!p.exact(0, 2));
    assert_eq!(p.exact_match.iter().filter(|&&e| e).count(), 3);
}

proptest! {
    #[test]
    fn normalization_is_idempotent(raw in "\\PC{0,40}") {
        let once = normalize_text(&raw);
        prop_assert_eq!(normalize_text(&once.join(" ")), once);
    }

    #[test]
    fn in_vocab_tokens_decode_back(
        q in prop::collection::vec("[a-e]{1,3}", 1..8),
        t in prop::collection::vec("[a-e]{1,3}", 1..5),
        l_q in 1usize..6,
        l_a in 1usize..12,
    ) {
        let query = q.join(" ");
        let a = ad(&t.join(" "), "x", "y");
        let record = CohortRecord { search_id: "s".into(), query_text: query.clone(), ads: vec![a.clone()] };
        let vocab = build_vocab(std::slice::from_ref(&record), 1).unwrap();
        let p = encode_pair(&query, &a, &vocab, l_q, l_a);
        let decode = |ids: &[usize], mask: &[bool]| -> Vec<String> {
            ids.iter().zip(mask).filter(|(_, &m)| m).map(|(&i, _)| vocab.token(i).unwrap().to_string()).collect()
        };
        let want_q: Vec<String> = normalize_text(&query).into_iter().take(l_q).collect();
        prop_assert_eq!(decode(&p.query_ids, &p.query_mask), want_q);
        let want_a: Vec<String> = ad_tokens(&a).into_iter().take(l_a).collect();
        prop_assert_eq!(decode(&p.ad_ids, &p.ad_mask), want_a);
        prop_assert!(p.query_ids.iter().zip(&p.query_mask).all(|(&i, &m)| m || i == PAD_ID));
    }
}
