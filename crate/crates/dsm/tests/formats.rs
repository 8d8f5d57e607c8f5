use dsm::cohorts::{parse_cohorts, read_cohorts, write_cohorts};
use dsm::embeddings::pretrained_from_lines;
use dsm::tables::{query_frequencies, read_ads, read_frequencies, read_ground_truth, write_ads, write_frequencies, write_ground_truth};
use dsm::Error;
use dsm_core::synth::{generate_corpus, GeneratorConfig};
use dsm_core::text::{Vocab, PAD_ID};

const LINE_A: &str = r#"{"search_id":"1","query":"boston hotels","ads":[{"position":1,"title":"Boston Hotel Deals","description":"cheap rooms","display_url":"www.hotels.com","clicked":true}]}"#;
const LINE_B: &str = r#"{"search_id":"2","query":"red shoes","ads":[{"position":1,"title":"Shoes","description":"red","display_url":"shoes.com","clicked":false},{"position":2,"title":"Boots","description":"brown","display_url":"boots.com","clicked":true}]}"#;
const LINE_C: &str =
    r#"{"search_id":"3","query":"hats","ads":[{"position":3,"title":"Wool hats","description":"warm","display_url":"hats.com","clicked":false}]}"#;

fn six_ads() -> String {
    let ads: Vec<String> =
        (1..=6).map(|p| format!(r#"{{"position":{p},"title":"t","description":"d","display_url":"u","clicked":false}}"#)).collect();
    format!(r#"{{"search_id":"x","query":"q","ads":[{}]}}"#, ads.join(","))
}

#[test]
fn three_lines_read_in_order() {
    let text = [LINE_A, LINE_B, LINE_C].join("\n");
    let f = parse_cohorts(&text, "mem").unwrap();
    let ids: Vec<&str> = f.records.iter().map(|r| r.search_id.as_str()).collect();
    assert_eq!(ids, ["1", "2", "3"]);
    assert_eq!(f.malformed, 0);
}

#[test]
fn six_ad_line_is_skipped_and_counted() {
    let mut lines: Vec<String> = (0..9).map(|_| LINE_A.to_string()).collect();
    lines.insert(4, six_ads());
    let f = parse_cohorts(&lines.join("\n"), "mem").unwrap();
    assert_eq!(f.records.len(), 9);
    assert_eq!(f.malformed, 1);
    assert_eq!(f.first_malformed, Some(5));
}

#[test]
fn too_many_malformed_lines_is_fatal_and_names_first_line() {
    let text = [LINE_A, "not json", LINE_B, "{}", LINE_C].join("\n");
    match parse_cohorts(&text, "mem") {
        Err(Error::Data(msg)) => assert!(msg.contains("line 2"), "{msg}"),
        other => panic!("expected data error, got {other:?}"),
    }
}

#[test]
fn crlf_file_parses_like_lf_file() {
    let dir = tempfile::tempdir().unwrap();
    let lf = dir.path().join("lf.jsonl");
    let crlf = dir.path().join("crlf.jsonl");
    std::fs::write(&lf, [LINE_A, LINE_B, LINE_C].join("\n")).unwrap();
    std::fs::write(&crlf, [LINE_A, LINE_B, LINE_C].join("\r\n") + "\r\n").unwrap();
    assert_eq!(read_cohorts(&lf).unwrap(), read_cohorts(&crlf).unwrap());
}

#[test]
fn unreadable_file_is_an_error() {
    assert!(matches!(read_cohorts(std::path::Path::new("/nonexistent/cohorts.jsonl")), Err(Error::Io { .. })));
}

#[test]
fn generated_corpus_round_trips_through_jsonl() {
    let corpus = generate_corpus(&GeneratorConfig { n_queries: 200, n_ads: 200, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    write_cohorts(&path, &corpus.train.records).unwrap();
    let back = read_cohorts(&path).unwrap();
    assert_eq!(back.malformed, 0);
    assert_eq!(back.records, corpus.train.records);
}

#[test]
fn side_tables_round_trip() {
    let corpus = generate_corpus(&GeneratorConfig { n_queries: 100, n_ads: 100, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.tsv");
    write_ground_truth(&gt, &corpus.ground_truth).unwrap();
    assert_eq!(read_ground_truth(&gt).unwrap(), corpus.ground_truth);
    let ads = dir.path().join("ads.tsv");
    write_ads(&ads, &corpus.ads).unwrap();
    let back = read_ads(&ads).unwrap();
    assert_eq!(back.len(), corpus.ads.len());
    assert_eq!(back[&corpus.ads[3].ad_id], corpus.ads[3]);
    let freq = query_frequencies(&corpus.train.records);
    let f = dir.path().join("freq.tsv");
    write_frequencies(&f, &freq).unwrap();
    assert_eq!(read_frequencies(&f).unwrap(), freq);
    assert_eq!(freq.values().sum::<u64>() as usize, corpus.train.records.len());
}

fn vocab4() -> Vocab {
    Vocab::from_tokens(["[PAD]", "[OOV]", "a", "b", "c", "d", "[SEP]"].map(String::from).to_vec(), 1)
}

#[test]
fn embedding_file_covering_everything() {
    let lines = ["a 1 2", "b 3 4", "c 5 6", "d 7 8"];
    let t = pretrained_from_lines(&lines, &vocab4(), 2, 0.1, 0).unwrap();
    assert_eq!(t.coverage, 1.0);
    assert_eq!(t.table.row(5), &[7.0, 8.0]);
    assert_eq!(t.table.row(PAD_ID), &[0.0, 0.0]);
}

#[test]
fn empty_embedding_file_initializes_every_row() {
    let t = pretrained_from_lines::<&str>(&[], &vocab4(), 3, 0.1, 0).unwrap();
    assert_eq!(t.coverage, 0.0);
    for id in 1..7 {
        assert!(t.table.row(id).iter().all(|v| v.abs() <= 0.2 && *v != 0.0));
    }
}

#[test]
fn half_covered_embedding_file_copies_rows_exactly() {
    let lines = ["b 0.25 -1.5", "zzz 9 9", "d 1e-3 4"];
    let t = pretrained_from_lines(&lines, &vocab4(), 2, 0.1, 0).unwrap();
    assert_eq!(t.coverage, 0.5);
    assert_eq!(t.table.row(3), &[0.25, -1.5]);
    assert_eq!(t.table.row(5), &[1e-3, 4.0]);
    assert_ne!(t.table.row(2), &[0.0, 0.0]);
}

#[test]
fn embedding_dim_mismatch_names_line() {
    let lines = ["a 1 2", "b 3"];
    match pretrained_from_lines(&lines, &vocab4(), 2, 0.1, 0) {
        Err(Error::Data(msg)) => assert!(msg.contains("line 2"), "{msg}"),
        other => panic!("expected data error, got {other:?}"),
    }
}
