//! JSON experiment configuration.
//!
//! ```json
//! {
//!   "model":    { "num_layers": 8, "d_model": 32, "num_q_heads": 8, "num_kv_heads": 2,
//!                 "d_k": 4, "d_v": 4, "vocab_size": 64, "seed": 1 },
//!   "layout":   { "text_prefix_len": 4, "num_frames": 8, "patches_per_frame": 16,
//!                 "text_suffix_len": 4 },
//!   "policy":   { "recent_window": 16, "sink_len": 4, "clie_layer_index": 2,
//!                 "st_layer_index": 4, "tile_size": 16 },
//!   "workload": { "num_salient": 8, "salient_gain": 4.0, "seed": 7 },
//!   "experiment": { "policies": ["pure_kv", "full"], "patterns": ["dense", "spatial_temporal"],
//!                   "budgets": [1.0, 0.2], "decode_steps": 8,
//!                   "validation": { "enabled": true, "n_perm": 999, "seed": 0 } }
//! }
//! ```
//!
//! Only `model` and `layout` are required. `recent_window` defaults to one
//! frame of patches.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::DEFAULT_TILE_SIZE;
use crate::cache::{PolicyConfig, PolicyKind, DEFAULT_CLIE_LAYER_INDEX};
use crate::engine::ModelConfig;
use crate::error::{Error, Result};
use crate::masks::{PatternSpec, SparsityPattern, TokenLayout};

use super::workload::WorkloadSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub layout: LayoutConfig,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub workload: WorkloadSection,
    #[serde(default)]
    pub experiment: ExperimentGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutConfig {
    #[serde(default)]
    pub text_prefix_len: usize,
    pub num_frames: usize,
    pub patches_per_frame: usize,
    #[serde(default)]
    pub text_suffix_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub recent_window: Option<usize>,
    pub sink_len: usize,
    pub clie_layer_index: usize,
    pub st_layer_index: usize,
    pub tile_size: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            recent_window: None,
            sink_len: 4,
            clie_layer_index: DEFAULT_CLIE_LAYER_INDEX,
            st_layer_index: DEFAULT_CLIE_LAYER_INDEX + 2,
            tile_size: DEFAULT_TILE_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSection {
    pub num_salient: usize,
    pub salient_gain: f64,
    pub seed: u64,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        Self {
            num_salient: 0,
            salient_gain: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentGrid {
    pub policies: Vec<PolicyKind>,
    pub patterns: Vec<String>,
    pub budgets: Vec<f64>,
    pub decode_steps: usize,
    pub validation: ValidationSection,
}

pub const DEFAULT_BUDGETS: [f64; 6] = [1.0, 0.5, 0.35, 0.2, 0.1, 0.05];

impl Default for ExperimentGrid {
    fn default() -> Self {
        Self {
            policies: vec![
                PolicyKind::Full,
                PolicyKind::PureKv,
                PolicyKind::H2oLike,
                PolicyKind::StreamingLike,
            ],
            patterns: vec!["spatial_temporal".into()],
            budgets: DEFAULT_BUDGETS.to_vec(),
            decode_steps: 8,
            validation: ValidationSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationSection {
    pub enabled: bool,
    pub n_perm: usize,
    pub seed: u64,
    pub analysis_layer: Option<usize>,
}

impl Default for ValidationSection {
    fn default() -> Self {
        Self {
            enabled: true,
            n_perm: 999,
            seed: 0,
            analysis_layer: None,
        }
    }
}

fn at(path: impl Into<String>, err: impl std::fmt::Display) -> Error {
    Error::ConfigAt {
        path: path.into(),
        message: err.to_string(),
    }
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        at(if path.is_empty() { ".".into() } else { path }, e.into_inner())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| at("model", e))?;
        let layout = self.token_layout()?;
        if self.policy.tile_size == 0 {
            return Err(at("policy.tile_size", "must be >= 1"));
        }
        if self.policy.recent_window == Some(0) {
            return Err(at("policy.recent_window", "must be >= 1"));
        }
        if self.policy.st_layer_index <= self.policy.clie_layer_index {
            return Err(at(
                "policy.st_layer_index",
                format!(
                    "must be greater than clie_layer_index ({})",
                    self.policy.clie_layer_index
                ),
            ));
        }
        if self.policy.clie_layer_index >= self.model.num_layers {
            return Err(at("policy.clie_layer_index", "out of range for model.num_layers"));
        }
        if self.policy.st_layer_index > self.model.num_layers {
            return Err(at("policy.st_layer_index", "exceeds model.num_layers"));
        }
        self.workload_spec()?
            .validate()
            .map_err(|e| at("workload", e))?;
        for (i, b) in self.experiment.budgets.iter().enumerate() {
            if !(*b > 0.0 && *b <= 1.0) {
                return Err(at(format!("experiment.budgets[{i}]"), "must be in (0, 1]"));
            }
        }
        for (i, p) in self.experiment.patterns.iter().enumerate() {
            let spec: PatternSpec = p
                .parse()
                .map_err(|e| at(format!("experiment.patterns[{i}]"), e))?;
            crate::masks::build_mask(&layout, &spec.resolve(&layout))
                .map_err(|e| at(format!("experiment.patterns[{i}]"), e))?;
        }
        if self.experiment.validation.n_perm < 100 {
            return Err(at("experiment.validation.n_perm", "must be >= 100"));
        }
        if let Some(a) = self.experiment.validation.analysis_layer {
            if a >= self.model.num_layers {
                return Err(at("experiment.validation.analysis_layer", "out of range"));
            }
        }
        Ok(())
    }

    pub fn token_layout(&self) -> Result<TokenLayout> {
        let l = &self.layout;
        TokenLayout::uniform(
            l.text_prefix_len,
            l.num_frames,
            l.patches_per_frame,
            l.text_suffix_len,
        )
        .map_err(|e| at("layout", e))
    }

    pub fn recent_window(&self) -> usize {
        self.policy
            .recent_window
            .unwrap_or(self.layout.patches_per_frame.max(1))
    }

    pub fn policy_for(&self, kind: PolicyKind, budget_fraction: f64) -> PolicyConfig {
        PolicyConfig {
            kind,
            budget_fraction,
            recent_window: self.recent_window(),
            sink_len: self.policy.sink_len,
            clie_layer_index: self.policy.clie_layer_index,
            st_layer_index: self.policy.st_layer_index,
        }
    }

    pub fn patterns(&self) -> Result<Vec<SparsityPattern>> {
        let layout = self.token_layout()?;
        self.experiment
            .patterns
            .iter()
            .map(|p| Ok(p.parse::<PatternSpec>()?.resolve(&layout)))
            .collect()
    }

    pub fn workload_spec(&self) -> Result<WorkloadSpec> {
        Ok(WorkloadSpec {
            layout: self.token_layout()?,
            num_salient: self.workload.num_salient,
            salient_gain: self.workload.salient_gain,
            seed: self.workload.seed,
        })
    }

    /// Replaces both the model and workload seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.workload.seed = seed;
        self
    }
}
