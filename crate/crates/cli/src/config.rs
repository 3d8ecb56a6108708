use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use wavy_core::blocks::ModelConfig;
use wavy_core::experiments::{BlockcheckSettings, DynamicsConfig, GradcheckSettings};
use wavy_core::train::{TaskKind, TaskSpec, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// A configuration problem: bad JSON, an unknown or missing key, a value out
/// of range. Reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub dynamics: Option<DynamicsConfig>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub oversmoothing: OversmoothingSection,
    #[serde(default)]
    pub checks: ChecksSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub task: TaskKind,
    pub mask_fraction: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    /// Seeds model initialization, the training stream and the validation set.
    pub seed: u64,
    pub eval_every: usize,
    pub val_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            task: TaskKind::MajorityToken,
            mask_fraction: 0.15,
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            weight_decay: t.weight_decay,
            warmup_frac: t.warmup_frac,
            seed: t.seed,
            eval_every: t.eval_every,
            val_size: t.val_size,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_frac: self.warmup_frac,
            seed: self.seed,
            eval_every: self.eval_every,
            val_size: self.val_size,
        }
    }

    /// Vocabulary and sequence length come from the model section.
    pub fn task_spec(&self, model: &ModelConfig) -> TaskSpec {
        TaskSpec {
            mask_fraction: self.mask_fraction,
            ..TaskSpec::new(self.task, model.vocab, model.max_len, self.seed)
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OversmoothingSection {
    pub inputs: usize,
    /// Token sequence length; the model's `max_len` when absent.
    pub seq_len: Option<usize>,
    pub model_seed: u64,
    pub input_seed: u64,
}

impl Default for OversmoothingSection {
    fn default() -> Self {
        Self {
            inputs: 32,
            seq_len: None,
            model_seed: 0,
            input_seed: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChecksSection {
    pub seed: u64,
    pub jvp_instances: usize,
    pub model_samples: usize,
    pub relu: bool,
    pub scheme_instances: usize,
    pub taus: Vec<f64>,
    pub identity_instances: usize,
}

impl Default for ChecksSection {
    fn default() -> Self {
        let g = GradcheckSettings::default();
        let b = BlockcheckSettings::default();
        Self {
            seed: 0,
            jvp_instances: g.jvp_instances,
            model_samples: g.model_samples,
            relu: g.relu,
            scheme_instances: b.instances,
            taus: b.taus,
            identity_instances: b.identity_instances,
        }
    }
}

impl ChecksSection {
    pub fn gradcheck(&self) -> GradcheckSettings {
        GradcheckSettings {
            seed: self.seed,
            jvp_instances: self.jvp_instances,
            model_samples: self.model_samples,
            relu: self.relu,
            ..GradcheckSettings::default()
        }
    }

    pub fn blockcheck(&self) -> BlockcheckSettings {
        BlockcheckSettings {
            seed: self.seed,
            instances: self.scheme_instances,
            taus: self.taus.clone(),
            identity_instances: self.identity_instances,
            ..BlockcheckSettings::default()
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

pub const PRESETS: &[(&str, &str)] = &[
    ("toy", include_str!("../presets/toy.json")),
    ("glue", include_str!("../presets/glue.json")),
    ("squad", include_str!("../presets/squad.json")),
    ("bert-pretrain", include_str!("../presets/bert-pretrain.json")),
    ("deit", include_str!("../presets/deit.json")),
    ("deep-merged", include_str!("../presets/deep-merged.json")),
];

pub fn preset(name: &str) -> Result<Value, ConfigError> {
    let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
        ConfigError(format!("unknown preset `{name}` (available: {})", names.join(", ")))
    })?;
    serde_json::from_str(text).map_err(|e| ConfigError(format!("preset `{name}`: {e}")))
}

/// Recursively overlays `top` onto `base`; objects merge key by key, any
/// other value replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses a merged document, naming the offending field on failure.
pub fn from_value(doc: Value) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.inner().to_string();
        let field = inner
            .strip_prefix("missing field `")
            .and_then(|rest| rest.split('`').next())
            .map(|f| if path == "." { f.to_string() } else { format!("{path}.{f}") });
        match field {
            Some(f) => ConfigError(format!("{f}: missing required field")),
            None => ConfigError(format!("{path}: {inner}")),
        }
    })?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(ConfigError(format!(
            "schema_version: expected {SCHEMA_VERSION}, got {}",
            cfg.schema_version
        )));
    }
    Ok(cfg)
}

/// Reads the config file, layering it over the preset when one is named.
pub fn load(path: &Path, preset_name: Option<&str>) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    let top: Value = serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    let doc = match preset_name {
        Some(name) => {
            let mut base = preset(name)?;
            merge(&mut base, top);
            base
        }
        None => top,
    };
    from_value(doc)
}
