//! TOML run configuration with dotted-path overrides.
//!
//! ```toml
//! seed = 7
//! [data]
//! root = "data"
//! [train]
//! epochs = 30
//! [loss]
//! lambda_dt = 0.5
//! ```
//!
//! Every section is optional and every field has a default except the
//! ones a command cannot run without (dataset root, checkpoint paths,
//! generation counts). Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::gradcheck::DEFAULT_STEP;
use crate::cmalign::DEFAULT_TOP_K;
use crate::data::{Split, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::Direction;
use crate::gradsuite::{SuiteConfig, DEFAULT_TOL};
use crate::losses::LossWeights;
use crate::model::{Modality, ModelConfig, LAYER5};
use crate::objective::ObjectiveConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub root: Option<PathBuf>,
    /// Needed by `gen` only.
    pub n_identities: Option<usize>,
    /// Needed by `gen` only.
    pub images_per_identity: Option<usize>,
    pub train_identities: usize,
    pub height: usize,
    pub width: usize,
    pub occlusion_prob: f64,
    pub occlusion_max_rows: usize,
    pub max_shift: f64,
    pub scale_jitter: f64,
    pub noise: f64,
    pub clutter: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        Self {
            root: None,
            n_identities: None,
            images_per_identity: None,
            train_identities: 64,
            height: s.height,
            width: s.width,
            occlusion_prob: s.occlusion_prob,
            occlusion_max_rows: s.occlusion_max_rows,
            max_shift: s.max_shift,
            scale_jitter: s.scale_jitter,
            noise: s.noise,
            clutter: s.clutter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda_ic: f64,
    pub lambda_dt: f64,
    pub alpha: f64,
    pub beta: f64,
    pub id_margin: f64,
    pub co_attention: bool,
    pub detach_masks: bool,
    pub normalize_dense: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let o = ObjectiveConfig::default();
        Self {
            lambda_ic: o.weights.lambda_ic,
            lambda_dt: o.weights.lambda_dt,
            alpha: o.weights.alpha,
            beta: o.weights.beta,
            id_margin: o.id_margin,
            co_attention: o.co_attention,
            detach_masks: o.detach_masks,
            normalize_dense: o.normalize_dense,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    pub direction: Direction,
    pub split: Split,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            direction: Direction::B2a,
            split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchSection {
    pub image_a: Option<PathBuf>,
    pub image_b: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub k: usize,
    pub layer: usize,
    pub modality_a: Modality,
    pub modality_b: Modality,
}

impl Default for MatchSection {
    fn default() -> Self {
        Self {
            image_a: None,
            image_b: None,
            checkpoint: None,
            k: DEFAULT_TOP_K,
            layer: LAYER5,
            modality_a: Modality::A,
            modality_b: Modality::B,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub tol: f64,
    /// `all` or a comma-separated list of case names.
    pub ops: String,
    pub seeds: u64,
    pub step: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            ops: "all".into(),
            seeds: 10,
            step: DEFAULT_STEP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossSection,
    pub eval: EvalSection,
    #[serde(rename = "match")]
    pub matching: MatchSection,
    pub gradcheck: GradcheckSection,
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::Config(format!("{origin}: {e}")))
}

/// Sets `path = value` inside `table`, creating sections as needed. The
/// value is read as a TOML literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let path = path.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key {path:?}")));
    }
    let (last, parents) = keys.split_last().expect("non-empty split");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {path:?}: {k} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_table(parse_table(text, "config")?)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts empty), applies `overrides` in order and
    /// then `seed`.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_table(&text, &p.display().to_string())?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        if let Some(s) = seed {
            table.insert("seed".into(), toml::Value::Integer(s as i64));
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        if self.gradcheck.seeds == 0 || !(self.gradcheck.step > 0.0) || !(self.gradcheck.tol > 0.0) {
            return Err(Error::Config("gradcheck seeds, step and tol must be positive".into()));
        }
        Ok(())
    }

    /// The configuration as TOML, with every default filled in.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved-config.txt");
        fs::write(&path, self.resolved()).map_err(|e| Error::io(path, e))
    }

    pub fn require<'a, T>(value: &'a Option<T>, key: &str) -> Result<&'a T> {
        value
            .as_ref()
            .ok_or_else(|| Error::Config(format!("missing required key {key}")))
    }

    pub fn synthetic_config(&self) -> Result<SyntheticConfig> {
        let d = &self.data;
        Ok(SyntheticConfig {
            n_identities: *Self::require(&d.n_identities, "data.n_identities")?,
            images_per_identity: *Self::require(&d.images_per_identity, "data.images_per_identity")?,
            height: d.height,
            width: d.width,
            occlusion_prob: d.occlusion_prob,
            occlusion_max_rows: d.occlusion_max_rows,
            max_shift: d.max_shift,
            scale_jitter: d.scale_jitter,
            noise: d.noise,
            clutter: d.clutter,
            seed: self.seed,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            height: self.data.height,
            width: self.data.width,
            ..self.model
        }
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        let l = &self.loss;
        ObjectiveConfig {
            weights: LossWeights {
                lambda_ic: l.lambda_ic,
                lambda_dt: l.lambda_dt,
                alpha: l.alpha,
                beta: l.beta,
            },
            id_margin: l.id_margin,
            gem_power: self.model.gem_power,
            co_attention: l.co_attention,
            detach_masks: l.detach_masks,
            normalize_dense: l.normalize_dense,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            objective: self.objective_config(),
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn suite_config(&self) -> SuiteConfig {
        SuiteConfig {
            tol: self.gradcheck.tol,
            seeds: self.gradcheck.seeds,
            step: self.gradcheck.step,
        }
    }
}
