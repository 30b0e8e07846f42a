//! Loss-term ablation on the synthetic benchmark: the full objective
//! against ID-only training and against uniform dense triplet weights.

use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::data::{self, Dataset, PairingMode, Split, SyntheticConfig};
use crate::error::Result;
use crate::eval::{self, Direction, RetrievalResult};
use crate::model::ModelConfig;
use crate::train::{self, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    IdOnly,
    NoCoAttention,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::IdOnly, Variant::NoCoAttention];

    /// `base` with this variant's loss switches applied.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::IdOnly => {
                cfg.objective.weights.lambda_ic = 0.0;
                cfg.objective.weights.lambda_dt = 0.0;
            }
            Variant::NoCoAttention => cfg.objective.co_attention = false,
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::IdOnly => "id_only",
            Variant::NoCoAttention => "no_co_attention",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub train_identities: usize,
    pub test_identities: usize,
    pub images_per_identity: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub direction: Direction,
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            train_identities: 64,
            test_identities: 16,
            images_per_identity: 8,
            epochs: 30,
            seeds: vec![0, 1, 2],
            direction: Direction::B2a,
            data: SyntheticConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    #[serde(rename = "mAP")]
    pub m_ap: f64,
    pub rank1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub runs: Vec<RunResult>,
}

impl AblationReport {
    /// Mean mAP of `variant` over its runs, in percent.
    pub fn mean_map(&self, variant: Variant) -> f64 {
        let v: Vec<f64> = self.runs.iter().filter(|r| r.variant == variant).map(|r| r.m_ap).collect();
        100.0 * v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

/// Trains `variant` on the training split of `ds` and scores the held-out
/// identities.
pub fn run_variant(ds: &Dataset, cfg: &AblationConfig, variant: Variant, seed: u64) -> Result<RetrievalResult> {
    let train_ids = ds.split_identities(Split::Train, cfg.train_identities)?;
    let test_ids = ds.split_identities(Split::Test, cfg.train_identities)?;
    let mut tc = variant.apply(&cfg.train);
    tc.epochs = cfg.epochs;
    tc.seed = seed;
    let mut mc = cfg.model;
    (mc.height, mc.width) = (cfg.data.height, cfg.data.width);
    let fit = train::fit(ds, &train_ids, mc, &tc, None)?;
    let (qm, gm) = cfg.direction.modalities();
    let q = eval::extract_descriptors(&fit.model.extractor, ds, qm, &test_ids)?;
    let g = eval::extract_descriptors(&fit.model.extractor, ds, gm, &test_ids)?;
    eval::evaluate_retrieval(&q, &g)
}

/// Generates one dataset per seed under `root` and runs every variant on
/// it. `progress` sees each run as it finishes.
pub fn run_ablation(
    cfg: &AblationConfig,
    root: &Path,
    mut progress: impl FnMut(&RunResult),
) -> Result<AblationReport> {
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let syn = SyntheticConfig {
            n_identities: cfg.train_identities + cfg.test_identities,
            images_per_identity: cfg.images_per_identity,
            seed,
            ..cfg.data.clone()
        };
        let dir = root.join(format!("seed-{seed}"));
        data::generate_synthetic_dataset(&dir, &syn, true)?;
        let ds = data::load_directory_dataset(&dir, PairingMode::CrossModal)?;
        for variant in Variant::ALL {
            let r = run_variant(&ds, cfg, variant, seed)?;
            let run = RunResult {
                variant,
                seed,
                m_ap: r.m_ap,
                rank1: r.cmc[0],
            };
            progress(&run);
            runs.push(run);
        }
    }
    Ok(AblationReport { runs })
}
