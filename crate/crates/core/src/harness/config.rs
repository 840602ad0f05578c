use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{
    gen_manytask_suite, gen_tabular_suite, gen_temporal_suite, load_delimited, read_schema, DatasetBundle,
    DelimitedSchema, ManyTaskConfig, SplitName, TabularConfig, TemporalConfig,
};
use crate::error::{Error, Result};
use crate::gating::MaskMode;
use crate::layers::{Activation, ExpertKind};
use crate::model::{Architecture, ModelKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum DatasetConfig {
    Tabular(TabularConfig),
    Temporal(TemporalConfig),
    Manytask(ManyTaskConfig),
    /// Delimited file; the schema defaults to the sidecar next to `path`.
    File {
        path: PathBuf,
        #[serde(default)]
        schema: Option<PathBuf>,
    },
}

impl DatasetConfig {
    pub fn build(&self) -> Result<DatasetBundle> {
        match self {
            DatasetConfig::Tabular(c) => gen_tabular_suite(c),
            DatasetConfig::Temporal(c) => gen_temporal_suite(c),
            DatasetConfig::Manytask(c) => gen_manytask_suite(c),
            DatasetConfig::File { path, schema } => {
                let schema: DelimitedSchema = match schema {
                    Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                    None => read_schema(path)?,
                };
                load_delimited(path, &schema)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    /// One independent shared-bottom network per task.
    Stl,
    SharedBottom,
    Mmoe,
    Mmoeex,
}

impl ModelChoice {
    pub fn name(self) -> &'static str {
        match self {
            ModelChoice::Stl => "stl",
            ModelChoice::SharedBottom => "shared_bottom",
            ModelChoice::Mmoe => "mmoe",
            ModelChoice::Mmoeex => "mmoeex",
        }
    }

    pub fn model_kind(self) -> ModelKind {
        match self {
            ModelChoice::Stl | ModelChoice::SharedBottom => ModelKind::SharedBottom,
            ModelChoice::Mmoe => ModelKind::Mmoe,
            ModelChoice::Mmoeex => ModelKind::Mmoeex,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelChoice,
    pub experts: usize,
    pub expert_kind: ExpertKind,
    pub expert_hidden: usize,
    pub expert_activation: Activation,
    pub tower_hidden: Vec<usize>,
    pub tower_activation: Activation,
    /// Mixture models only; mmoeex falls back to 0.5 when unset.
    pub alpha: Option<f64>,
    /// Mixture models only; mmoeex falls back to exclusivity when unset.
    pub mask_mode: Option<MaskMode>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelChoice::Mmoeex,
            experts: 6,
            expert_kind: ExpertKind::Dense,
            expert_hidden: 16,
            expert_activation: Activation::Relu,
            tower_hidden: vec![8],
            tower_activation: Activation::Relu,
            alpha: None,
            mask_mode: None,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            experts: self.experts,
            expert_kind: self.expert_kind,
            expert_hidden: self.expert_hidden,
            expert_activation: self.expert_activation,
            tower_hidden: self.tower_hidden.clone(),
            tower_activation: self.tower_activation,
            mask_mode: self.mask_mode.unwrap_or(MaskMode::Exclusivity),
            alpha: self.alpha.unwrap_or(0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub maml: bool,
    /// Temporary-update step size; the outer learning rate when unset.
    pub inner_lr: Option<f64>,
    pub allow_many_tasks: bool,
    pub seed: u64,
    /// Split on which expert diversity is measured.
    pub diversity_split: SplitName,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 50,
            batch_size: 64,
            lr: 0.001,
            weight_decay: 0.001,
            lr_decay: 0.9,
            lr_decay_every: 10,
            maml: false,
            inner_lr: None,
            allow_many_tasks: false,
            seed: 0,
            diversity_split: SplitName::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `key=value` overrides. Keys are dotted paths into the config
    /// object; values are parsed as JSON and fall back to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key, parsed)?;
        }
        serde_json::from_value(value).map_err(|e| Error::Config(format!("override produced an invalid config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let t = &self.training;
        if m.kind != ModelChoice::Mmoeex && (m.alpha.is_some() || m.mask_mode.is_some()) {
            return Err(Error::Config(format!(
                "alpha and mask_mode apply only to mmoeex, not {}",
                m.kind.name()
            )));
        }
        if t.maml && m.kind == ModelChoice::Stl {
            return Err(Error::Config("maml needs a multi-task model, not stl".into()));
        }
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(t.lr > 0.0) || t.weight_decay < 0.0 || !(t.lr_decay > 0.0) {
            return Err(Error::Config("lr and lr_decay must be > 0, weight_decay >= 0".into()));
        }
        if let Some(inner) = t.inner_lr {
            if !(inner >= 0.0) {
                return Err(Error::Config(format!("inner_lr must be >= 0, got {inner}")));
            }
        }
        if m.experts == 0 || m.expert_hidden == 0 {
            return Err(Error::Config("experts and expert_hidden must be positive".into()));
        }
        if let Some(alpha) = m.alpha {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
            }
        }
        Ok(())
    }
}

fn set_path(root: &mut Value, key: &str, new: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just created")
            }
            _ => return Err(Error::Config(format!("override key `{key}`: `{part}` is not inside an object"))),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), new);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Err(Error::Config(format!("empty override key `{key}`")))
}
