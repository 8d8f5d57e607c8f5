//! Prints one PASS/FAIL line per acceptance criterion and exits non-zero if any fail.
//!
//! Criterion 5 and 8 train ten desk-scale models through the `dsm` binary and take
//! about 12 minutes on one core.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use dsm::pipeline::DsmModel;
use dsm::{CheckpointError, Error};
use dsm_core::convergence::{convergence_diagnostic, running_min, ToyNonConvex};
use dsm_core::fixtures::{micro_gradient_check, micro_vocab, GradCheckConfig};
use dsm_core::metrics::{auc, decompose_eval, ndcg_at_k, prediction_bias, wilcoxon_signed_rank, FrequencyBucket, QueryRanking, ScoredImpression};
use dsm_core::network::{dsm_forward, NetworkConfig};
use dsm_core::sampling::{build_cohort_pairs, run_audit, synthesis_budget, AuditConfig, PairRef, SearchView, SynthesisPolicy};
use dsm_core::synth::{ctr_by_position, generate_corpus, GeneratorConfig};
use dsm_core::text::{encode_pair, AdImpression, MAX_ADS};
use dsm_core::train::{init_params, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn dsm(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dsm")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("dsm {} exited {:?}: {}", args[0], out.status.code(), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Result<serde_json::Value, String> {
    let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let report = match micro_gradient_check(&GradCheckConfig::default()) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let secs = start.elapsed().as_secs_f64();
    outcome(
        report.max_rel_error < 1e-4 && secs < 60.0,
        format!("max rel error {:.2e} over {} coordinates in {secs:.1}s", report.max_rel_error, report.coordinates),
    )
}

fn attention_normalization() -> Outcome {
    const WORDS: [&str; 10] = ["red", "shoe", "cheap", "blue", "hat", "warm", "wool", "sale", "fast", "zebra"];
    let net = NetworkConfig::micro();
    let vocab = micro_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let text = |rng: &mut ChaCha8Rng, max: usize| {
        let n = rng.random_range(1..=max);
        (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
    };
    let mut worst = 0.0f64;
    for pass in 0..100 {
        let ad = AdImpression { position: 1, title: text(&mut rng, 3), description: text(&mut rng, 2), display_url: "sale".into(), clicked: false };
        let query = text(&mut rng, net.l_q + 1);
        let pair = encode_pair(&query, &ad, &vocab, net.l_q, net.l_a);
        let params = init_params(&net, &TrainConfig { seed: pass, init_stddev: 0.5, ..TrainConfig::default() }, vocab.len()).unwrap();
        let out = &dsm_forward(std::slice::from_ref(&pair), &params, &net).unwrap()[0];
        for (w, mask) in [(&out.t_q, &pair.query_mask), (&out.t_a, &pair.ad_mask)] {
            worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
            if w.iter().zip(mask).any(|(&x, &m)| !m && x != 0.0) {
                return outcome(false, format!("pass {pass}: nonzero weight on padding"));
            }
        }
    }
    outcome(worst < 1e-6, format!("100 passes, max |sum - 1| {worst:.1e}, padding exactly 0"))
}

fn pair_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut synthesized = 0;
    for trial in 0..1000 {
        let m = rng.random_range(1..=6);
        let raw: Vec<(String, Vec<(String, bool)>)> = (0..m)
            .map(|_| {
                let mut ids = BTreeSet::new();
                let n = rng.random_range(1..=5);
                while ids.len() < n {
                    ids.insert(format!("ad{}", rng.random_range(0..8)));
                }
                let rate = rng.random_range(0.0..1.0);
                (format!("q{}", rng.random_range(0..4)), ids.into_iter().map(|a| (a, rng.random_bool(rate))).collect())
            })
            .collect();
        let views: Vec<SearchView> =
            raw.iter().map(|(q, ads)| SearchView { query: q, ads: ads.iter().map(|(a, c)| (a.as_str(), *c)).collect() }).collect();
        let pairs = build_cohort_pairs(&views, SynthesisPolicy::default(), &mut rng);

        let served: BTreeSet<(&str, &str)> = raw.iter().flat_map(|(q, ads)| ads.iter().map(move |(a, _)| (q.as_str(), a.as_str()))).collect();
        let clicked: BTreeSet<(&str, &str)> =
            raw.iter().flat_map(|(q, ads)| ads.iter().filter(|x| x.1).map(move |(a, _)| (q.as_str(), a.as_str()))).collect();
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (i, (q, ads)) in raw.iter().enumerate() {
            for (k, (a, c)) in ads.iter().enumerate() {
                if *c {
                    pos.push(PairRef::served(i, k));
                } else if !clicked.contains(&(q.as_str(), a.as_str())) {
                    neg.push(PairRef::served(i, k));
                }
            }
        }
        if pairs.positives != pos || pairs.observed_negatives != neg {
            return outcome(false, format!("trial {trial}: served pairs differ from the exhaustive scan"));
        }
        let mut seen = BTreeSet::new();
        for p in &pairs.synthesized_negatives {
            let id = (raw[p.query].0.as_str(), raw[p.ad.0].1[p.ad.1].0.as_str());
            if served.contains(&id) || !seen.insert(id) {
                return outcome(false, format!("trial {trial}: synthesized {id:?} collides"));
            }
        }
        let n = pairs.synthesized_negatives.len();
        if n > synthesis_budget(m) || (m > 1 && n >= m * (m - 1)) {
            return outcome(false, format!("trial {trial}: {n} synthesized for m = {m}"));
        }
        synthesized += n;
    }
    outcome(synthesized > 0, format!("1000 cohorts, {synthesized} synthesized negatives, no collisions"))
}

fn lemma_audit() -> Outcome {
    let cfg = AuditConfig::default();
    let start = Instant::now();
    let summary = match run_audit(&cfg) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let secs = start.elapsed().as_secs_f64();
    let coords = summary.per_seed.iter().map(|s| s.coordinates.len()).max().unwrap_or(0);
    let shaped = (cfg.n_searches, cfg.ads_per_search, cfg.n_draws, summary.per_seed.len()) == (4, 2, 20_000, 10) && coords <= 20;
    outcome(
        shaped && summary.passed == Some(true) && summary.pass_fraction >= 0.95 && secs < 300.0,
        format!("{:.4} of coordinates within 3 SE across 10 seeds ({coords} coordinates each) in {secs:.1}s", summary.pass_fraction),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for set in 0..50 {
        let n = rng.random_range(2..25);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
        let mut labels: Vec<f64> = (0..n).map(|_| rng.random_bool(0.5) as u8 as f64).collect();
        labels[0] = 1.0;
        labels[1] = 0.0;
        let (mut wins, mut total) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1.0 && labels[j] == 0.0 {
                    total += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        if auc(&scores, &labels).unwrap() != wins / total {
            return outcome(false, format!("AUC differs from pair counting on set {set}"));
        }
    }
    let reversed = QueryRanking { query: "q".into(), candidates: vec![(3, 0.1), (0, 0.9)] };
    let ndcg = ndcg_at_k(&[reversed], 2).unwrap().mean;
    let d: Vec<f64> = (1..=10).map(|i| if i <= 2 { -(i as f64) } else { i as f64 }).collect();
    let w = wilcoxon_signed_rank(&d, &[0.0; 10]).unwrap().w;
    outcome((ndcg - 0.6309).abs() < 1e-4 && w == 3.0, format!("AUC exact on 50 tied sets, NDCG {ndcg:.4}, W {w}"))
}

fn calibration_bias() -> Outcome {
    let cfg = GeneratorConfig { n_queries: 10_000, valid_fraction: 0.1, test_fraction: 0.5, ..GeneratorConfig::default() };
    let corpus = generate_corpus(&cfg).unwrap();
    let (p, y): (Vec<f64>, Vec<f64>) = corpus.test.impressions().map(|(p, c, _)| (p, c as u8 as f64)).unzip();
    let bias = prediction_bias(&p, &y).unwrap();
    outcome(p.len() >= 50_000 && (bias - 1.0).abs() <= 0.02, format!("bias {bias:.4} on {} impressions", p.len()))
}

fn decomposition_plumbing() -> Outcome {
    let cfg = GeneratorConfig::default();
    let corpus = generate_corpus(&cfg).unwrap();
    let ctr: Vec<f64> = ctr_by_position(&corpus.train).iter().map(|c| c.unwrap_or(f64::NAN)).collect();
    let decreasing = cfg.position_ctrs.windows(2).all(|w| w[0] > w[1]) && ctr.windows(2).all(|w| w[0] > w[1]);
    let classes: Vec<_> = [4, 5, 20, 21].iter().map(|&c| FrequencyBucket::classify(c)).collect();
    let freq: BTreeMap<String, u64> = [("a", 4), ("b", 5), ("c", 20), ("d", 21)].iter().map(|(q, c)| (q.to_string(), *c)).collect();
    let preds: Vec<ScoredImpression> = freq
        .keys()
        .enumerate()
        .map(|(i, q)| ScoredImpression { score: i as f64, label: (i % 2) as f64, position: (i % MAX_ADS) as u8 + 1, query_key: q.clone() })
        .collect();
    let b = decompose_eval(&preds, &freq);
    let counts = [FrequencyBucket::Tail, FrequencyBucket::Torso, FrequencyBucket::Head].map(|f| b.frequency_bucket(f).n);
    let bounds = classes == [FrequencyBucket::Tail, FrequencyBucket::Torso, FrequencyBucket::Torso, FrequencyBucket::Head] && counts == [1, 2, 1];
    outcome(decreasing && bounds, format!("train CTR by position {}, counts 4/5/20/21 -> tail/torso/torso/head", fmt(&ctr)))
}

fn convergence() -> Outcome {
    let toy = ToyNonConvex::new(100);
    let mut ratios = Vec::new();
    for seed in 0..5 {
        let m = running_min(&toy.run_sgd(10_000, 0.05, seed).unwrap());
        ratios.push(m[10_000 - 1] / m[10_000 / 16 - 1]);
    }
    let series: Vec<f64> = (1..=10_000).map(|t| 1.0 / (t as f64).sqrt()).collect();
    let slope = convergence_diagnostic(&series).unwrap().slope;
    outcome(
        ratios.iter().all(|&r| r <= 0.5) && (slope + 0.5).abs() <= 0.05,
        format!("running-min ratio T/(T/16) {} over 5 seeds, analytic slope {slope:.4}", fmt(&ratios)),
    )
}

fn determinism(work: &Path) -> Result<Outcome, String> {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/tiny.json");
    let data = work.join("tiny");
    dsm(&["gen-data", "--config", s(&cfg), "--out", s(&data)])?;
    let train = |out: &Path| {
        dsm(&["train", "--config", s(&cfg), "--train", s(&data.join("train.jsonl")), "--valid", s(&data.join("valid.jsonl")), "--out", s(out)])
    };
    let (a, b) = (work.join("det_a"), work.join("det_b"));
    train(&a)?;
    train(&b)?;
    let bytes = |p: PathBuf| std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
    let same = bytes(a.join("model.ckpt"))? == bytes(b.join("model.ckpt"))? && bytes(a.join("history.json"))? == bytes(b.join("history.json"))?;

    let model = DsmModel::load(&a.join("model.ckpt")).map_err(|e| e.to_string())?;
    let copy = work.join("copy.ckpt");
    model.save(&copy).map_err(|e| e.to_string())?;
    let back = DsmModel::load(&copy).map_err(|e| e.to_string())?;
    let round_trip =
        model.params.iter().zip(back.params.iter()).all(|((n1, t1), (n2, t2))| {
            n1 == n2 && t1.shape() == t2.shape() && t1.data().iter().zip(t2.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        }) && model.params.len() == back.params.len();

    let mut corrupt = bytes(copy.clone())?;
    let n = corrupt.len();
    corrupt[n - 5] ^= 0x10;
    std::fs::write(&copy, &corrupt).map_err(|e| e.to_string())?;
    let checksum = matches!(DsmModel::load(&copy), Err(Error::Checkpoint { source: CheckpointError::Checksum(_), .. }));
    corrupt[0] = b'X';
    std::fs::write(&copy, &corrupt).map_err(|e| e.to_string())?;
    let magic = matches!(DsmModel::load(&copy), Err(Error::Checkpoint { source: CheckpointError::BadMagic { .. }, .. }));
    Ok(outcome(
        same && round_trip && checksum && magic,
        format!(
            "identical runs byte-equal {same}, round trip bit-exact {round_trip}, corrupt byte -> Checksum {checksum}, bad magic -> BadMagic {magic}"
        ),
    ))
}

struct DeskRuns {
    bayes: f64,
    full_auc: Vec<f64>,
    no_match_auc: Vec<f64>,
    lm_auc: Vec<f64>,
    full_ndcg5: Vec<f64>,
    bm25_ndcg5: f64,
    secs: f64,
}

fn desk_runs(work: &Path) -> Result<DeskRuns, String> {
    let start = Instant::now();
    let data = work.join("desk");
    dsm(&["gen-data", "--out", s(&data)])?;
    let summary = read_json(&data.join("summary.json"))?;
    let bayes = summary["test_bayes_auc_bound"].as_f64().ok_or("summary lacks a Bayes bound")?;
    let (train, valid, test, freq, graded) =
        (data.join("train.jsonl"), data.join("valid.jsonl"), data.join("test.jsonl"), data.join("freq.tsv"), data.join("ground_truth.tsv"));
    let bm25 = work.join("bm25.json");
    dsm(&["baseline", "bm25", "--graded", s(&graded), "--report", s(&bm25)])?;
    let bm25_ndcg5 = read_json(&bm25)?["ndcg"]["5"].as_f64().ok_or("bm25 report lacks ndcg@5")?;

    let mut runs = DeskRuns { bayes, full_auc: vec![], no_match_auc: vec![], lm_auc: vec![], full_ndcg5: vec![], bm25_ndcg5, secs: 0.0 };
    for seed in SEEDS {
        let seed_arg = seed.to_string();
        for ablation in ["full", "no-matching-loss"] {
            let out = work.join(format!("{ablation}-{seed}"));
            dsm(&["train", "--train", s(&train), "--valid", s(&valid), "--out", s(&out), "--seed", &seed_arg, "--ablation", ablation])?;
            let ckpt = out.join("model.ckpt");
            let report = out.join("eval.json");
            dsm(&["eval", "--ckpt", s(&ckpt), "--data", s(&test), "--freq-table", s(&freq), "--report", s(&report)])?;
            let auc = read_json(&report)?["auc"].as_f64().ok_or("eval report lacks auc")?;
            if ablation == "full" {
                runs.full_auc.push(auc);
                let m = out.join("match.json");
                dsm(&["match", "--ckpt", s(&ckpt), "--graded", s(&graded), "--report", s(&m)])?;
                runs.full_ndcg5.push(read_json(&m)?["ndcg"]["5"].as_f64().ok_or("match report lacks ndcg@5")?);
            } else {
                runs.no_match_auc.push(auc);
            }
        }
        let out = work.join(format!("lm-{seed}"));
        dsm(&["baseline", "lm", "train", "--train", s(&train), "--valid", s(&valid), "--out", s(&out), "--seed", &seed_arg])?;
        let report = out.join("eval.json");
        dsm(&["baseline", "lm", "eval", "--ckpt", s(&out.join("lm.ckpt")), "--data", s(&test), "--freq-table", s(&freq), "--report", s(&report)])?;
        runs.lm_auc.push(read_json(&report)?["auc"].as_f64().ok_or("lm report lacks auc")?);
    }
    runs.secs = start.elapsed().as_secs_f64();
    Ok(runs)
}

fn ablation_direction(r: &DeskRuns) -> Outcome {
    let (full, no_match, lm) = (median(&r.full_auc), median(&r.no_match_auc), median(&r.lm_auc));
    let below = r.full_auc.iter().chain(&r.no_match_auc).filter(|&&a| a < 0.65).count();
    let checks = [
        (full >= no_match, "full below ablation"),
        (full >= lm + 0.02 && no_match >= lm + 0.02, "not 0.02 above LM"),
        (below == 0, "runs below 0.65"),
        (r.bayes >= 0.80, "Bayes bound below 0.80"),
        (r.secs < 1800.0, "over 30 minutes"),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.0).map(|c| c.1).collect();
    let verdict = if failed.is_empty() { String::new() } else { format!(" [{}; {below} of 10 runs below 0.65]", failed.join(", ")) };
    outcome(
        failed.is_empty(),
        format!(
            "median AUC full {full:.4} no_matching_loss {no_match:.4} LM {lm:.4}; full [{}] no_matching_loss [{}]; bayes {:.4}; {:.0}s{verdict}",
            fmt(&r.full_auc),
            fmt(&r.no_match_auc),
            r.bayes,
            r.secs
        ),
    )
}

fn matching_direction(r: &DeskRuns) -> Outcome {
    let dsm = median(&r.full_ndcg5);
    outcome(dsm >= r.bm25_ndcg5, format!("median DSM NDCG@5 {dsm:.4} [{}] vs BM25 {:.4}", fmt(&r.full_ndcg5), r.bm25_ndcg5))
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(u32, Outcome)> = vec![
        (1, gradient_fidelity()),
        (2, attention_normalization()),
        (3, pair_algebra()),
        (4, lemma_audit()),
        (6, metric_oracles()),
        (7, calibration_bias()),
        (9, decomposition_plumbing()),
        (10, convergence()),
        (11, determinism(work.path()).unwrap_or_else(|e| outcome(false, e))),
    ];
    match desk_runs(work.path()) {
        Ok(r) => {
            results.push((5, ablation_direction(&r)));
            results.push((8, matching_direction(&r)));
        }
        Err(e) => {
            results.push((5, outcome(false, e.clone())));
            results.push((8, outcome(false, e)));
        }
    }
    results.sort_by_key(|r| r.0);
    for (n, o) in &results {
        println!("criterion {n}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<u32> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    if !failed.is_empty() {
        println!("acceptance: {} of {} criteria failed: {failed:?}", failed.len(), results.len());
        std::process::exit(1);
    }
    println!("acceptance: all {} criteria passed", results.len());
}
