//! Experiment configuration (TOML) and the table-model file format
//! (JSON). Unknown keys in the config are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fsd_core::decoding::{AcceptancePolicy, DraftingConfig, LengthSchedule, SamplingMode};
use fsd_core::divergence::DivergenceKind;
use fsd_core::models::{generate_pair, ModelBackend, SyntheticPairSpec, TableModel};
use fsd_core::prob::{ProbDist, TokenId};
use serde::{Deserialize, Serialize};

use crate::remote::{RemoteModel, RemoteModelConfig, Transport};
use crate::{LabError, Result};

pub const DEFAULT_COST_RATIO: f64 = 0.125;

fn default_cost_ratio() -> f64 {
    DEFAULT_COST_RATIO
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Prompt corpus path, relative to the config file.
    pub corpus: Option<PathBuf>,
    pub max_new_tokens: usize,
    pub seeds: Vec<u64>,
    /// Draft forward-pass cost relative to a target forward pass, used by
    /// the proxy-speed metric.
    #[serde(default = "default_cost_ratio")]
    pub cost_ratio: f64,
    pub models: ModelsConfig,
    #[serde(default)]
    pub drafting: DraftingFileConfig,
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelsKind {
    Synthetic,
    Tables,
    Remote,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    pub kind: ModelsKind,
    // synthetic
    pub seed: Option<u64>,
    pub vocab_size: Option<usize>,
    pub order: Option<usize>,
    pub alpha: Option<f64>,
    pub noise_temperature: Option<f64>,
    // tables
    pub target: Option<PathBuf>,
    pub draft: Option<PathBuf>,
    // remote
    pub target_cmd: Option<Vec<String>>,
    pub draft_cmd: Option<Vec<String>>,
    pub target_addr: Option<String>,
    pub draft_addr: Option<String>,
    pub timeout_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Fixed,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeKind {
    Greedy,
    Sampled,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DraftingFileConfig {
    pub candidate_length: usize,
    pub length_schedule: ScheduleKind,
    pub draft_mode: ModeKind,
    pub draft_temperature: f64,
    pub rejection_sampling: ModeKind,
    pub rejection_temperature: f64,
    pub bonus_token: bool,
    pub stop_token: Option<u32>,
}

impl Default for DraftingFileConfig {
    fn default() -> Self {
        DraftingFileConfig {
            candidate_length: 5,
            length_schedule: ScheduleKind::Fixed,
            draft_mode: ModeKind::Greedy,
            draft_temperature: 1.0,
            rejection_sampling: ModeKind::Sampled,
            rejection_temperature: 1.0,
            bonus_token: true,
            stop_token: None,
        }
    }
}

impl DraftingFileConfig {
    pub fn to_core(&self, candidate_length: usize) -> DraftingConfig {
        let mode = |kind: ModeKind, temperature: f64| match kind {
            ModeKind::Greedy => SamplingMode::Greedy,
            ModeKind::Sampled => SamplingMode::Sampled { temperature },
        };
        DraftingConfig {
            candidate_length,
            length_schedule: match self.length_schedule {
                ScheduleKind::Fixed => LengthSchedule::Fixed,
                ScheduleKind::Dynamic => LengthSchedule::Dynamic,
            },
            draft_mode: mode(self.draft_mode, self.draft_temperature),
            rejection_sampling: mode(self.rejection_sampling, self.rejection_temperature),
            bonus_token: self.bonus_token,
            stop_token: self.stop_token.map(TokenId),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceName {
    Kl,
    Js,
    Tv,
}

impl From<DivergenceName> for DivergenceKind {
    fn from(name: DivergenceName) -> Self {
        match name {
            DivergenceName::Kl => DivergenceKind::Kl,
            DivergenceName::Js => DivergenceKind::Js,
            DivergenceName::Tv => DivergenceKind::Tv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Sd,
    Fsd,
    Rfsd,
    Random,
    TargetOnly,
    DraftOnly,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Sd => "sd",
            PolicyKind::Fsd => "fsd",
            PolicyKind::Rfsd => "rfsd",
            PolicyKind::Random => "random",
            PolicyKind::TargetOnly => "target-only",
            PolicyKind::DraftOnly => "draft-only",
        }
    }

    /// Whether the threshold grid applies to this policy.
    pub fn uses_threshold(self) -> bool {
        matches!(self, PolicyKind::Fsd | PolicyKind::Rfsd)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub divergence: Option<DivergenceName>,
    pub rate: Option<f64>,
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            PolicyKind::Fsd | PolicyKind::Rfsd => {
                if self.divergence.is_none() {
                    return Err(LabError::Config(format!(
                        "policy '{}' requires a divergence",
                        self.kind.name()
                    )));
                }
            }
            PolicyKind::Random => {
                let rate = self
                    .rate
                    .ok_or_else(|| LabError::Config("random policy requires a rate".into()))?;
                if !(0.0..=1.0).contains(&rate) {
                    return Err(LabError::Config(format!("rate {rate} outside [0, 1]")));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn instantiate(&self, threshold: f64) -> AcceptancePolicy {
        match self.kind {
            PolicyKind::Sd => AcceptancePolicy::Sd,
            PolicyKind::Fsd => AcceptancePolicy::Fsd {
                kind: self.divergence.unwrap().into(),
                threshold,
            },
            PolicyKind::Rfsd => AcceptancePolicy::Rfsd {
                kind: self.divergence.unwrap().into(),
                threshold,
            },
            PolicyKind::Random => AcceptancePolicy::Random {
                rate: self.rate.unwrap(),
            },
            PolicyKind::TargetOnly => AcceptancePolicy::TargetOnly,
            PolicyKind::DraftOnly => AcceptancePolicy::DraftOnly,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub policies: Vec<PolicyConfig>,
    pub t_grid: Vec<f64>,
    pub l_grid: Vec<usize>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweep.policies.is_empty() {
            return Err(LabError::Config("policy list is empty".into()));
        }
        if self.sweep.t_grid.is_empty() {
            return Err(LabError::Config("t_grid is empty".into()));
        }
        if self.sweep.l_grid.is_empty() {
            return Err(LabError::Config("l_grid is empty".into()));
        }
        if self.sweep.t_grid.iter().any(|&t| t < 0.0) {
            return Err(LabError::Config("t_grid entries must be >= 0".into()));
        }
        if self.sweep.l_grid.iter().any(|&l| l == 0) {
            return Err(LabError::Config("l_grid entries must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(LabError::Config("seed list is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &s in &self.seeds {
            if !seen.insert(s) {
                return Err(LabError::Config(format!("duplicate seed {s}")));
            }
        }
        for p in &self.sweep.policies {
            p.validate()?;
        }
        Ok(())
    }
}

/// A shareable target/draft backend pair.
pub struct ModelPair {
    pub target: Arc<dyn ModelBackend + Send + Sync>,
    pub draft: Arc<dyn ModelBackend + Send + Sync>,
}

impl ModelPair {
    pub fn vocab_size(&self) -> usize {
        self.target.vocab_size()
    }
}

fn require<T: Clone>(field: &Option<T>, name: &str) -> Result<T> {
    field
        .clone()
        .ok_or_else(|| LabError::Config(format!("missing models.{name}")))
}

/// Builds the backend pair described by the config. Relative paths are
/// resolved against `base_dir`.
pub fn build_models(models: &ModelsConfig, base_dir: &Path) -> Result<ModelPair> {
    match models.kind {
        ModelsKind::Synthetic => {
            let spec = SyntheticPairSpec {
                seed: require(&models.seed, "seed")?,
                vocab_size: require(&models.vocab_size, "vocab_size")?,
                order: require(&models.order, "order")?,
                alpha: require(&models.alpha, "alpha")?,
                noise_temperature: models.noise_temperature.unwrap_or(1.0),
            };
            let (target, draft) = generate_pair(&spec)?;
            Ok(ModelPair {
                target: Arc::new(target),
                draft: Arc::new(draft),
            })
        }
        ModelsKind::Tables => {
            let target = load_table_model(&base_dir.join(require(&models.target, "target")?))?;
            let draft = load_table_model(&base_dir.join(require(&models.draft, "draft")?))?;
            Ok(ModelPair {
                target: Arc::new(target),
                draft: Arc::new(draft),
            })
        }
        ModelsKind::Remote => {
            let timeout_ms = models.timeout_ms.unwrap_or(5000);
            let vocab_size = require(&models.vocab_size, "vocab_size")?;
            let transport_for = |cmd: &Option<Vec<String>>, addr: &Option<String>, which: &str| {
                if let Some(cmd) = cmd {
                    Ok(Transport::Subprocess(cmd.clone()))
                } else if let Some(addr) = addr {
                    Ok(Transport::Tcp(addr.clone()))
                } else {
                    Err(LabError::Config(format!(
                        "remote models need {which}_cmd or {which}_addr"
                    )))
                }
            };
            let target = RemoteModel::connect(&RemoteModelConfig {
                transport: transport_for(&models.target_cmd, &models.target_addr, "target")?,
                timeout_ms,
                vocab_size,
            })?;
            let draft = RemoteModel::connect(&RemoteModelConfig {
                transport: transport_for(&models.draft_cmd, &models.draft_addr, "draft")?,
                timeout_ms,
                vocab_size,
            })?;
            Ok(ModelPair {
                target: Arc::new(target),
                draft: Arc::new(draft),
            })
        }
    }
}

/// On-disk table model: `{"vocab_size":V,"order":n,"default":[..],
/// "table":{"0,1":[..], "":[..]}}`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableModelFile {
    vocab_size: usize,
    order: usize,
    default: Vec<f64>,
    table: BTreeMap<String, Vec<f64>>,
}

fn parse_context(key: &str) -> Result<Vec<TokenId>> {
    if key.is_empty() {
        return Ok(Vec::new());
    }
    key.split(',')
        .map(|s| {
            s.trim()
                .parse::<u32>()
                .map(TokenId)
                .map_err(|e| LabError::Config(format!("bad context key '{key}': {e}")))
        })
        .collect()
}

fn context_key(ctx: &[TokenId]) -> String {
    ctx.iter()
        .map(|t| t.0.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn load_table_model(path: &Path) -> Result<TableModel> {
    let text = std::fs::read_to_string(path)?;
    let file: TableModelFile = serde_json::from_str(&text)?;
    let mut table = BTreeMap::new();
    for (key, probs) in file.table {
        table.insert(parse_context(&key)?, ProbDist::new(probs)?);
    }
    Ok(TableModel::new(
        file.vocab_size,
        file.order,
        table,
        ProbDist::new(file.default)?,
    )?)
}

pub fn save_table_model(path: &Path, model: &TableModel) -> Result<()> {
    let file = TableModelFile {
        vocab_size: model.vocab_size(),
        order: model.order(),
        default: model.default_dist().probs().to_vec(),
        table: model
            .table()
            .iter()
            .map(|(ctx, dist)| (context_key(ctx), dist.probs().to_vec()))
            .collect(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}
