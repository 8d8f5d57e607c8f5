//! The `dsm` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dsm_core::baselines::lm::LmModel;
use dsm_core::fixtures::micro_gradient_check;
use dsm_core::metrics::{ndcg_at_k, wilcoxon_signed_rank, MetricsReport, QueryRanking};
use dsm_core::sampling::run_audit;
use dsm_core::synth::{bayes_auc_bound, ctr_by_position, generate_corpus};
use dsm_core::text::{build_vocab, EncodedPair};
use dsm_core::train::{train, Ablation, EmbeddingMode};
use serde::Serialize;

use crate::cohorts::{read_cohorts, write_cohorts};
use crate::config::RunConfig;
use crate::embeddings::load_pretrained_embeddings;
use crate::pipeline::{
    encode_records, graded_pools, rank_with_bm25, rank_with_dsm, rank_with_lm, scored_report, DsmMeta, DsmModel, LmBundle, LmMeta,
};
use crate::tables::{query_frequencies, read_ads, read_frequencies, read_ground_truth, write_ads, write_frequencies, write_ground_truth};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "dsm", version, about = "Deeply supervised query-ad matching: data, training, evaluation, diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with planted relevance.
    GenData(GenDataArgs),
    /// Train DSM and write the best-validation checkpoint.
    Train(TrainArgs),
    /// Score a cohort file and write a report with decompositions.
    Eval(EvalArgs),
    /// Rank a graded set by final-layer logits and report NDCG / precision.
    Match(MatchArgs),
    /// Finite-difference check of the micro model's full objective.
    Gradcheck(ConfigArg),
    /// Monte-Carlo audit of the cohort gradient against the full population.
    SamplerAudit(AuditArgs),
    /// Baseline models.
    Baseline {
        #[command(subcommand)]
        which: Baseline,
    },
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// JSON run configuration [default: built-in defaults]
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Generator seed (overrides generator.seed)
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    Full,
    NoMatchingLoss,
    LossNormalized,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::NoMatchingLoss => Ablation::NoMatchingLoss,
            AblationArg::LossNormalized => Ablation::LossNormalized,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Training cohort JSONL
    #[arg(long)]
    pub train: PathBuf,
    /// Validation cohort JSONL
    #[arg(long)]
    pub valid: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Training seed (overrides train.seed)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs (overrides train.epochs)
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate (overrides train.learning_rate)
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Objective variant (overrides train.ablation)
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
    /// Fixed pretrained word vectors (overrides train.embedding_mode)
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// DSM checkpoint
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Cohort JSONL to score
    #[arg(long)]
    pub data: PathBuf,
    /// Training query frequencies (query<TAB>count)
    #[arg(long)]
    pub freq_table: PathBuf,
    /// Output report JSON
    #[arg(long)]
    pub report: PathBuf,
    /// Accuracy threshold [default: the one chosen on validation, stored in the checkpoint]
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradedArgs {
    /// Graded set (query<TAB>ad_id<TAB>relevance<TAB>grade)
    #[arg(long)]
    pub graded: PathBuf,
    /// Ad catalog (ad_id<TAB>title<TAB>description<TAB>display_url) [default: ads.tsv beside the graded set]
    #[arg(long)]
    pub ads: Option<PathBuf>,
    /// Cutoffs
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,7")]
    pub k: Vec<usize>,
    /// Minimum grade counted relevant by precision@K
    #[arg(long, default_value_t = dsm_core::metrics::DEFAULT_RELEVANT_GRADE)]
    pub relevant_grade: u8,
    /// Output report JSON
    #[arg(long)]
    pub report: PathBuf,
    /// Another ranking report to compare against with the Wilcoxon signed-rank test
    #[arg(long)]
    pub compare: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// DSM checkpoint
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub graded: GradedArgs,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Also write the full report JSON here
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Baseline {
    /// Logistic regression over mean-pooled word embeddings.
    Lm {
        #[command(subcommand)]
        action: LmAction,
    },
    /// BM25 ranking of a graded set.
    Bm25(Bm25Args),
}

#[derive(Debug, Subcommand)]
pub enum LmAction {
    /// Train the LM baseline.
    Train(LmTrainArgs),
    /// Score a cohort file with an LM checkpoint.
    Eval(LmEvalArgs),
    /// Rank a graded set by LM logits.
    Match(LmMatchArgs),
}

#[derive(Debug, Args)]
pub struct LmTrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Training cohort JSONL
    #[arg(long)]
    pub train: PathBuf,
    /// Validation cohort JSONL
    #[arg(long)]
    pub valid: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Seed (overrides lm.seed)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fixed pretrained word vectors
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LmEvalArgs {
    /// LM checkpoint
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Cohort JSONL to score
    #[arg(long)]
    pub data: PathBuf,
    /// Training query frequencies (query<TAB>count)
    #[arg(long)]
    pub freq_table: PathBuf,
    /// Output report JSON
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct LmMatchArgs {
    /// LM checkpoint
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub graded: GradedArgs,
}

#[derive(Debug, Args)]
pub struct Bm25Args {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub graded: GradedArgs,
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Match(a) => match_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::SamplerAudit(a) => audit_cmd(a),
        Command::Baseline { which: Baseline::Bm25(a) } => bm25_cmd(a),
        Command::Baseline { which: Baseline::Lm { action } } => match action {
            LmAction::Train(a) => lm_train_cmd(a),
            LmAction::Eval(a) => lm_eval_cmd(a),
            LmAction::Match(a) => lm_match_cmd(a),
        },
    }
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    RunConfig::load_or_default(arg.config.as_deref())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(Error::io(path))
}

#[derive(Debug, Serialize)]
struct CorpusSummary {
    train_searches: usize,
    train_impressions: usize,
    valid_impressions: usize,
    test_impressions: usize,
    unique_queries: usize,
    graded_pairs: usize,
    test_bayes_auc_bound: Option<f64>,
    train_ctr_by_position: Vec<Option<f64>>,
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.generator.seed = seed;
    }
    cfg.generator.validate().map_err(|e| Error::Config(e.to_string()))?;
    let corpus = generate_corpus(&cfg.generator)?;
    create_dir(&a.out)?;
    write_cohorts(&a.out.join("train.jsonl"), &corpus.train.records)?;
    write_cohorts(&a.out.join("valid.jsonl"), &corpus.valid.records)?;
    write_cohorts(&a.out.join("test.jsonl"), &corpus.test.records)?;
    write_ground_truth(&a.out.join("ground_truth.tsv"), &corpus.ground_truth)?;
    write_ads(&a.out.join("ads.tsv"), &corpus.ads)?;
    write_frequencies(&a.out.join("freq.tsv"), &query_frequencies(&corpus.train.records))?;
    let summary = CorpusSummary {
        train_searches: corpus.train.records.len(),
        train_impressions: corpus.train.n_impressions(),
        valid_impressions: corpus.valid.n_impressions(),
        test_impressions: corpus.test.n_impressions(),
        unique_queries: corpus.graded_pools().len(),
        graded_pairs: corpus.ground_truth.len(),
        test_bayes_auc_bound: bayes_auc_bound(&corpus.test).ok(),
        train_ctr_by_position: ctr_by_position(&corpus.train).to_vec(),
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    log::info!("wrote corpus of {} training searches to {}", summary.train_searches, a.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainOutcome<'a> {
    best_epoch: usize,
    validation: &'a MetricsReport,
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(ab) = a.ablation {
        cfg.train.ablation = ab.into();
    }
    if let Some(p) = &a.pretrained {
        cfg.train.embedding_mode = EmbeddingMode::Pretrained(p.display().to_string());
    }
    cfg.validate()?;
    let train_file = read_cohorts(&a.train)?;
    let valid_file = read_cohorts(&a.valid)?;
    let vocab = build_vocab(&train_file.records, cfg.vocab.min_count)?;
    let net = &cfg.network;
    let train_set = encode_records(&train_file.records, &vocab, net);
    let valid_set = encode_records(&valid_file.records, &vocab, net);
    let pretrained = match &cfg.train.embedding_mode {
        EmbeddingMode::Learned => None,
        EmbeddingMode::Pretrained(path) => {
            let table = load_pretrained_embeddings(Path::new(path), &vocab, net.d1, cfg.train.init_stddev, cfg.train.seed)?;
            log::info!("pretrained embeddings cover {:.3} of the vocabulary", table.coverage);
            Some(table.table)
        }
    };
    create_dir(&a.out)?;
    let run = match train(net, &cfg.train, vocab.len(), &train_set, &valid_set, pretrained) {
        Ok(run) => run,
        Err(abort) => {
            write_json(&a.out.join("history.json"), &abort.history)?;
            return Err(abort.error.into());
        }
    };
    let meta = DsmMeta {
        network: net.clone(),
        vocab: vocab.tokens().to_vec(),
        min_count: vocab.min_count,
        threshold: run.threshold,
        best_epoch: run.best_epoch,
    };
    let model = DsmModel::new(run.best, meta);
    model.save(&a.out.join("model.ckpt"))?;
    write_json(&a.out.join("history.json"), &run.history)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let validation = &run.history.epochs[run.best_epoch - 1].validation;
    write_json(&a.out.join("report.json"), &TrainOutcome { best_epoch: run.best_epoch, validation })?;
    log::info!("best epoch {} validation AUC {:?}", run.best_epoch, validation.auc);
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model = DsmModel::load(&a.ckpt)?;
    let data = read_cohorts(&a.data)?;
    let freq = read_frequencies(&a.freq_table)?;
    let searches = model.encode(&data.records);
    let scores = model.probabilities(&searches)?;
    let report = scored_report(&searches, &scores, &freq, a.threshold.unwrap_or(model.meta.threshold));
    write_json(&a.report, &report)
}

/// A ranking report with the per-query NDCG needed for paired comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct RankingReport {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub n_queries: usize,
    /// Per-query NDCG keyed by cutoff, in graded-set order.
    pub per_query_ndcg: BTreeMap<String, Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wilcoxon: Option<BTreeMap<String, dsm_core::metrics::WilcoxonResult>>,
}

pub fn ranking_report(rankings: &[QueryRanking], ks: &[usize], relevant_grade: u8) -> Result<RankingReport> {
    let metrics = MetricsReport::ranking(rankings, ks, relevant_grade)?;
    let mut per_query_ndcg = BTreeMap::new();
    for &k in ks {
        per_query_ndcg.insert(k.to_string(), ndcg_at_k(rankings, k)?.per_query);
    }
    Ok(RankingReport { metrics, n_queries: rankings.len(), per_query_ndcg, wilcoxon: None })
}

fn finish_ranking(rankings: &[QueryRanking], g: &GradedArgs) -> Result<()> {
    if g.k.is_empty() || g.k.contains(&0) {
        return Err(Error::Config("--k needs positive cutoffs".into()));
    }
    let mut report = ranking_report(rankings, &g.k, g.relevant_grade)?;
    if let Some(other) = &g.compare {
        let text = std::fs::read_to_string(other).map_err(Error::io(other))?;
        let other: RankingReport = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", other.display())))?;
        let mut tests = BTreeMap::new();
        for (k, ours) in &report.per_query_ndcg {
            if let Some(theirs) = other.per_query_ndcg.get(k) {
                if theirs.len() != ours.len() {
                    return Err(Error::Data(format!("compared reports rank different query sets at K={k}")));
                }
                match wilcoxon_signed_rank(ours, theirs) {
                    Ok(w) => {
                        tests.insert(k.clone(), w);
                    }
                    Err(e) => log::warn!("Wilcoxon at K={k}: {e}"),
                }
            }
        }
        report.wilcoxon = Some(tests);
    }
    write_json(&g.report, &report)
}

type Graded = (Vec<dsm_core::synth::GroundTruthRow>, BTreeMap<String, dsm_core::synth::CatalogAd>);

fn read_graded(g: &GradedArgs) -> Result<Graded> {
    let rows = read_ground_truth(&g.graded)?;
    let ads_path = g.ads.clone().unwrap_or_else(|| g.graded.with_file_name("ads.tsv"));
    Ok((rows, read_ads(&ads_path)?))
}

fn match_cmd(a: MatchArgs) -> Result<()> {
    let model = DsmModel::load(&a.ckpt)?;
    let (rows, ads) = read_graded(&a.graded)?;
    let pools = graded_pools(&rows, &ads)?;
    finish_ranking(&rank_with_dsm(&model, &pools)?, &a.graded)
}

fn gradcheck_cmd(a: ConfigArg) -> Result<()> {
    let cfg = load_config(&a)?;
    let report = micro_gradient_check(&cfg.gradcheck)?;
    let worst = report.worst.as_ref().map_or_else(|| "-".to_string(), |(n, i)| format!("{n}[{i}]"));
    println!(
        "max relative error {:.3e} at {worst} over {} coordinates (tolerance {:.0e})",
        report.max_rel_error, report.coordinates, cfg.gradcheck.tolerance
    );
    if report.max_rel_error >= cfg.gradcheck.tolerance {
        return Err(Error::Acceptance(format!("gradient check error {:.3e}", report.max_rel_error)));
    }
    Ok(())
}

fn audit_cmd(a: AuditArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let summary = run_audit(&cfg.sampler_audit)?;
    if let Some(path) = &a.report {
        write_json(path, &summary)?;
    }
    for (i, s) in summary.per_seed.iter().enumerate() {
        let hits = s.coordinates.iter().filter(|c| c.within_3se).count();
        println!(
            "seed {}: {hits}/{} coordinates within 3 SE, max |deviation| {:.3e}",
            cfg.sampler_audit.base_seed + i as u64,
            s.coordinates.len(),
            s.max_abs_deviation
        );
    }
    println!("pooled pass fraction {:.4}", summary.pass_fraction);
    match summary.passed {
        Some(false) => Err(Error::Acceptance(format!("pass fraction {:.4} below {}", summary.pass_fraction, cfg.sampler_audit.min_pass_fraction))),
        _ => Ok(()),
    }
}

fn bm25_cmd(a: Bm25Args) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let (rows, ads) = read_graded(&a.graded)?;
    let pools = graded_pools(&rows, &ads)?;
    finish_ranking(&rank_with_bm25(&ads, &pools, &cfg.bm25)?, &a.graded)
}

fn lm_train_cmd(a: LmTrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.lm.seed = s;
    }
    cfg.validate()?;
    let train_file = read_cohorts(&a.train)?;
    let valid_file = read_cohorts(&a.valid)?;
    let vocab = build_vocab(&train_file.records, cfg.vocab.min_count)?;
    let (l_q, l_a) = (cfg.network.l_q, cfg.network.l_a);
    let net = &cfg.network;
    let pairs: Vec<EncodedPair> = encode_records(&train_file.records, &vocab, net).into_iter().flat_map(|s| s.pairs).collect();
    let mut model = match &a.pretrained {
        None => LmModel::new(vocab.len(), &cfg.lm)?,
        Some(path) => {
            let table = load_pretrained_embeddings(path, &vocab, cfg.lm.embed_dim, cfg.lm.init_stddev, cfg.lm.seed)?;
            LmModel::with_embedding(table.table, &cfg.lm)?
        }
    };
    let losses = model.train(&pairs, &cfg.lm)?;
    let meta = LmMeta { config: cfg.lm.clone(), vocab: vocab.tokens().to_vec(), min_count: vocab.min_count, l_q, l_a, threshold: 0.5 };
    let mut bundle = LmBundle::new(model, meta);
    let valid = bundle.encode(&valid_file.records);
    let scores = bundle.probabilities(&valid)?;
    let labels: Vec<f64> = valid.iter().flat_map(|s| s.pairs.iter().map(|p| p.label)).collect();
    if !scores.is_empty() {
        bundle.meta.threshold = dsm_core::metrics::best_threshold(&scores, &labels)?.0;
    }
    create_dir(&a.out)?;
    bundle.save(&a.out.join("lm.ckpt"))?;
    write_json(&a.out.join("history.json"), &losses)?;
    write_json(&a.out.join("report.json"), &MetricsReport::classification(&scores, &labels, bundle.meta.threshold))
}

fn lm_eval_cmd(a: LmEvalArgs) -> Result<()> {
    let bundle = LmBundle::load(&a.ckpt)?;
    let data = read_cohorts(&a.data)?;
    let freq = read_frequencies(&a.freq_table)?;
    let searches = bundle.encode(&data.records);
    let scores = bundle.probabilities(&searches)?;
    write_json(&a.report, &scored_report(&searches, &scores, &freq, bundle.meta.threshold))
}

fn lm_match_cmd(a: LmMatchArgs) -> Result<()> {
    let bundle = LmBundle::load(&a.ckpt)?;
    let (rows, ads) = read_graded(&a.graded)?;
    let pools = graded_pools(&rows, &ads)?;
    finish_ranking(&rank_with_lm(&bundle, &pools)?, &a.graded)
}
