//! Run configuration: one TOML document holding the model, training, data,
//! evaluation, and path settings, with named presets and `key=value`
//! overrides.

use std::path::{Path, PathBuf};

use agt_core::data::SyntheticSpec;
use agt_core::eval::DEFAULT_THRESHOLDS;
use agt_core::model::ModelConfig;
use agt_core::nn::EvalNorm;
use agt_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: SyntheticSpec,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub paths: Paths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub thresholds: Vec<f64>,
    /// Detections scoring below this are dropped.
    pub score_threshold: f64,
    /// Duration bins of the segmentation-error analysis.
    pub error_bins: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            score_threshold: 0.0,
            error_bins: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Training corpus; synthesized from `[data]` when absent.
    pub train_data: Option<PathBuf>,
    /// Evaluation corpus; falls back to the training corpus.
    pub test_data: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            train_data: None,
            test_data: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Four-node model used for gradient checks and smoke runs.
    Toy,
    /// Small synthetic corpus the model should fit.
    Overfit,
    ThumosLike,
    CharadesLike,
    EpicLike,
}

impl Preset {
    pub fn config(self) -> RunConfig {
        match self {
            Preset::Toy => toy(),
            Preset::Overfit => overfit(),
            Preset::ThumosLike => paper_scale(256, 300, 20, 0.0),
            Preset::CharadesLike => paper_scale(64, 100, 157, 0.1),
            Preset::EpicLike => paper_scale(1024, 1200, 97, 0.0),
        }
    }
}

fn toy() -> RunConfig {
    from_fixture(agt_core::fixture::toy())
}

fn overfit() -> RunConfig {
    from_fixture(agt_core::fixture::overfit())
}

fn from_fixture(fixture: agt_core::fixture::Fixture) -> RunConfig {
    RunConfig {
        model: fixture.model,
        train: fixture.train,
        data: fixture.data,
        eval: EvalSettings::default(),
        paths: Paths::default(),
    }
}

/// Published per-dataset settings: 512-wide model, 4 + 4 layers, AdamW at
/// 1e-5 with one tenfold decay, on 2048-wide clip features.
fn paper_scale(
    max_positions: usize,
    num_queries: usize,
    num_classes: usize,
    dropout: f64,
) -> RunConfig {
    let input_dim = 2048;
    RunConfig {
        model: ModelConfig {
            input_dim,
            model_dim: 512,
            encoder_layers: 4,
            decoder_layers: 4,
            heads: 8,
            num_queries,
            max_positions,
            num_classes,
            dropout,
            ffn_dim: 2048,
            leaky_slope: 0.01,
            eval_norm: EvalNorm::Running,
            branch_gain: 1.0,
        },
        train: TrainConfig {
            learning_rate: 1e-5,
            weight_decay: 1e-5,
            total_steps: 3_000_000,
            decay_step: 2_000_000,
            ..TrainConfig::default()
        },
        data: SyntheticSpec {
            input_dim,
            num_classes,
            chunks: (max_positions / 2, max_positions),
            ..SyntheticSpec::default()
        },
        eval: EvalSettings::default(),
        paths: Paths::default(),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let v = |e: agt_core::Error| CliError::Validation(e.to_string());
        self.model.validate().map_err(v)?;
        self.train.validate().map_err(v)?;
        self.data.validate().map_err(v)?;
        if self.data.input_dim != self.model.input_dim {
            return Err(CliError::Validation(format!(
                "data.input_dim {} differs from model.input_dim {}",
                self.data.input_dim, self.model.input_dim
            )));
        }
        if self.data.num_classes != self.model.num_classes {
            return Err(CliError::Validation(format!(
                "data.num_classes {} differs from model.num_classes {}",
                self.data.num_classes, self.model.num_classes
            )));
        }
        if self.eval.thresholds.is_empty()
            || self
                .eval
                .thresholds
                .iter()
                .any(|t| !(0.0..=1.0).contains(t))
        {
            return Err(CliError::Validation(
                "eval.thresholds must be a non-empty list in [0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.eval.score_threshold) {
            return Err(CliError::Validation(
                "eval.score_threshold must lie in [0, 1]".into(),
            ));
        }
        if self.eval.error_bins == 0 {
            return Err(CliError::Validation(
                "eval.error_bins must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to TOML")
    }

    /// Applies `section.key=value` overrides. Values are read as TOML
    /// literals, falling back to a bare string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, CliError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = toml::Value::try_from(self).expect("run config converts to a TOML value");
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Validation(format!("override `{o}` is not key=value")))?;
            let value = parse_literal(raw.trim());
            set_path(&mut doc, key.trim(), value)?;
        }
        let text = toml::to_string(&doc).expect("TOML value serializes");
        Self::parse(&text)
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| CliError::Validation(format!("empty override key `{key}`")))?;
    let mut node = doc;
    for p in parts {
        node = node.get_mut(p).filter(|n| n.is_table()).ok_or_else(|| {
            CliError::Validation(format!("unknown config section `{p}` in `{key}`"))
        })?;
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| CliError::Validation(format!("`{key}` does not name a field")))?;
    // Optional fields are omitted from the document while unset.
    table.insert(last.to_string(), value);
    Ok(())
}
