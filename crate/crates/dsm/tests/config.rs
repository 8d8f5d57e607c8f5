use dsm::config::RunConfig;
use dsm::Error;

#[test]
fn unknown_keys_are_rejected_at_every_level() {
    for doc in [
        r#"{"netwrk": {}}"#,
        r#"{"network": {"d5": 3}}"#,
        r#"{"train": {"learning_rat": 0.1}}"#,
        r#"{"generator": {"n_query": 10}}"#,
        r#"{"metrics": {"k": [5]}}"#,
        r#"{"lm": {"dim": 4}}"#,
        r#"{"bm25": {"k2": 1.0}}"#,
        r#"{"sampler_audit": {"draws": 10}}"#,
    ] {
        match RunConfig::from_json(doc) {
            Err(Error::Config(msg)) => assert!(msg.contains("unknown field"), "{doc}: {msg}"),
            other => panic!("{doc}: {other:?}"),
        }
    }
}

#[test]
fn missing_keys_take_defaults_and_defaults_round_trip() {
    let cfg = RunConfig::from_json(r#"{"train": {"epochs": 3}}"#).unwrap();
    assert_eq!(cfg.train.epochs, 3);
    let defaults = RunConfig::default();
    assert_eq!(cfg.train.learning_rate, defaults.train.learning_rate);
    assert_eq!(cfg.network, defaults.network);
    let text = serde_json::to_string(&defaults).unwrap();
    assert_eq!(RunConfig::from_json(&text).unwrap(), defaults);
    assert_eq!(RunConfig::from_json("{}").unwrap(), defaults);
}

#[test]
fn invalid_values_are_config_errors() {
    for doc in [r#"{"train": {"epochs": 0}}"#, r#"{"vocab": {"min_count": 0}}"#, r#"{"metrics": {"ks": []}}"#, r#"{"bm25": {"b": 2.0}}"#] {
        assert!(matches!(RunConfig::from_json(doc), Err(Error::Config(_))), "{doc}");
    }
}

#[test]
fn enum_sections_replace_the_default_variant() {
    use dsm_core::optim::Schedule;
    use dsm_core::train::EmbeddingMode;
    let cfg = RunConfig::from_json(
        r#"{"train": {"schedule": {"step_decay": {"factor": 0.5, "every_n_steps": 10}}, "embedding_mode": {"pretrained": "v.txt"}}}"#,
    )
    .unwrap();
    assert_eq!(cfg.train.schedule, Schedule::StepDecay { factor: 0.5, every_n_steps: 10 });
    assert_eq!(cfg.train.embedding_mode, EmbeddingMode::Pretrained("v.txt".into()));
    assert_eq!(cfg.train.learning_rate, RunConfig::default().train.learning_rate);
    assert!(RunConfig::from_json("[1]").is_err());
}
