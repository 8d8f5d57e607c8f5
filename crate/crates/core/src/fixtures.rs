//! The fixed micro-scale cohort used for gradient checking.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient_check, GradCheckReport};
use crate::network::{DsmVars, NetworkConfig};
use crate::sampling::SynthesisPolicy;
use crate::text::{encode_search, AdImpression, CohortRecord, Vocab};
use crate::train::{cohort_objective, cohort_pairs, init_params, TrainConfig};
use crate::Result;

const WORDS: [&str; 9] = ["red", "shoe", "cheap", "blue", "hat", "warm", "wool", "sale", "fast"];

/// PAD, OOV, nine words and the separator: twelve entries.
pub fn micro_vocab() -> Vocab {
    let mut tokens = vec![String::from("[PAD]"), String::from("[OOV]")];
    tokens.extend(WORDS.iter().map(|w| w.to_string()));
    tokens.push(crate::text::SEP_TOKEN.into());
    Vocab::from_tokens(tokens, 1)
}

fn ad(position: u8, title: &str, desc: &str, clicked: bool) -> AdImpression {
    AdImpression { position, title: title.into(), description: desc.into(), display_url: "sale".into(), clicked }
}

/// Three searches whose clicks outnumber the unclicked ads, so the cohort
/// exercises synthesized negatives.
pub fn micro_cohort() -> Vec<CohortRecord> {
    vec![
        CohortRecord {
            search_id: "a".into(),
            query_text: "red shoe".into(),
            ads: vec![ad(1, "red shoe", "cheap", true), ad(2, "blue hat", "warm", false)],
        },
        CohortRecord { search_id: "b".into(), query_text: "warm wool hat".into(), ads: vec![ad(1, "wool hat", "fast", true)] },
        CohortRecord {
            search_id: "c".into(),
            query_text: "cheap".into(),
            ads: vec![ad(1, "fast sale", "red", true), ad(2, "shoe", "warm wool", true)],
        },
    ]
}

/// Settings of the micro-model gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub network: NetworkConfig,
    pub seed: u64,
    pub init_stddev: f64,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { network: NetworkConfig::micro(), seed: 0, init_stddev: 0.5, eps: 3e-4, tolerance: 1e-4 }
    }
}

/// Checks the gradient of the full objective `P + Q` (forward pass, CTR loss
/// and cohort matching loss with synthesized negatives) on the micro cohort.
pub fn micro_gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let net = &cfg.network;
    net.validate()?;
    let vocab = micro_vocab();
    let searches: Vec<_> = micro_cohort().iter().map(|r| encode_search(r, &vocab, net.l_q, net.l_a)).collect();
    let cohort: Vec<_> = searches.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pairs = cohort_pairs(&cohort, SynthesisPolicy::default(), &mut rng);
    let train_cfg = TrainConfig { init_stddev: cfg.init_stddev, seed: cfg.seed, ..TrainConfig::default() };
    let params = init_params(net, &train_cfg, vocab.len())?;
    gradient_check(&params, cfg.eps, |tape, vars| {
        let dv = DsmVars::from_vars(vars.clone(), net)?;
        Ok(cohort_objective(tape, &dv, &cohort, &pairs, true, |_, _| (1.0, 1.0))?.total)
    })
}
