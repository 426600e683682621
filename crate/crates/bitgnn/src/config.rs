//! Plain-text `key=value` model configuration.
//!
//! One pair per line; `#` starts a comment; unknown keys are rejected;
//! every key has a default except `task`. The canonical serialization
//! emitted by [`ModelConfig::to_text`] round-trips through
//! [`ModelConfig::parse`] and is embedded in checkpoints.

use thiserror::Error;

use crate::aggregators::AggregatorKind;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value {value:?} for key {key:?}")]
    BadValue { line: usize, key: String, value: String },
    #[error("missing required key \"task\"")]
    MissingTask,
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    GraphRegression,
    GraphClassification,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::GraphRegression => "regression",
            Self::GraphClassification => "classification",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerOrder {
    TransformFirst,
    AggregateFirst,
}

impl LayerOrder {
    pub fn name(self) -> &'static str {
        match self {
            Self::TransformFirst => "transform_first",
            Self::AggregateFirst => "aggregate_first",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrecisionMode {
    /// First and last layer full precision, middle layers binary.
    Binary,
    /// Every layer full precision (the 32/32 baseline).
    Full,
}

impl PrecisionMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Binary => "binary",
            Self::Full => "full",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggMode {
    Fixed(AggregatorKind),
    MixedSum,
    MixedConcat,
    Gna,
    Ana,
    AnaHybrid(usize),
}

impl AggMode {
    pub fn to_text(self) -> String {
        match self {
            Self::Fixed(k) => format!("fixed:{}", k.name()),
            Self::MixedSum => "mixed_sum".into(),
            Self::MixedConcat => "mixed_concat".into(),
            Self::Gna => "gna".into(),
            Self::Ana => "ana".into(),
            Self::AnaHybrid(h) => format!("ana_hybrid:{h}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mixed_sum" => Some(Self::MixedSum),
            "mixed_concat" => Some(Self::MixedConcat),
            "gna" => Some(Self::Gna),
            "ana" => Some(Self::Ana),
            _ => {
                if let Some(kind) = s.strip_prefix("fixed:") {
                    return AggregatorKind::from_name(kind).map(Self::Fixed);
                }
                if let Some(h) = s.strip_prefix("ana_hybrid:") {
                    let h: usize = h.parse().ok()?;
                    if (1..=3).contains(&h) {
                        return Some(Self::AnaHybrid(h));
                    }
                }
                None
            }
        }
    }
}

/// Full hyperparameter record for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    /// 0 means "infer from the dataset".
    pub feat_dim: usize,
    /// 0 means "infer from the dataset".
    pub out_dim: usize,
    pub order: LayerOrder,
    pub precision: PrecisionMode,
    pub agg_mode: AggMode,
    pub bias: bool,
    pub tau: f64,
    pub tau_anneal: bool,
    pub beta_min: f64,
    pub beta_max: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub task: TaskKind,
}

impl ModelConfig {
    pub fn defaults(task: TaskKind) -> Self {
        Self {
            layers: 4,
            hidden_dim: 64,
            feat_dim: 0,
            out_dim: 0,
            order: LayerOrder::TransformFirst,
            precision: PrecisionMode::Binary,
            agg_mode: AggMode::Fixed(AggregatorKind::Mean),
            bias: true,
            tau: 1.0,
            tau_anneal: false,
            beta_min: 0.1,
            beta_max: 10.0,
            lr: 1e-3,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            task,
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::defaults(TaskKind::GraphRegression);
        let mut saw_task = false;

        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw_line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Malformed { line, text: content.to_string() });
            };
            let key = key.trim();
            let value = value.trim();
            let bad = || ConfigError::BadValue {
                line,
                key: key.to_string(),
                value: value.to_string(),
            };
            match key {
                "layers" => cfg.layers = value.parse().map_err(|_| bad())?,
                "hidden_dim" => cfg.hidden_dim = value.parse().map_err(|_| bad())?,
                "feat_dim" => cfg.feat_dim = value.parse().map_err(|_| bad())?,
                "out_dim" => cfg.out_dim = value.parse().map_err(|_| bad())?,
                "order" => {
                    cfg.order = match value {
                        "transform_first" => LayerOrder::TransformFirst,
                        "aggregate_first" => LayerOrder::AggregateFirst,
                        _ => return Err(bad()),
                    }
                }
                "precision" => {
                    cfg.precision = match value {
                        "binary" => PrecisionMode::Binary,
                        "full" => PrecisionMode::Full,
                        _ => return Err(bad()),
                    }
                }
                "agg_mode" => cfg.agg_mode = AggMode::parse(value).ok_or_else(bad)?,
                "bias" => cfg.bias = parse_bool(value).ok_or_else(bad)?,
                "tau" => cfg.tau = value.parse().map_err(|_| bad())?,
                "tau_anneal" => cfg.tau_anneal = parse_bool(value).ok_or_else(bad)?,
                "beta_min" => cfg.beta_min = value.parse().map_err(|_| bad())?,
                "beta_max" => cfg.beta_max = value.parse().map_err(|_| bad())?,
                "lr" => cfg.lr = value.parse().map_err(|_| bad())?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad())?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad())?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
                "task" => {
                    cfg.task = match value {
                        "regression" => TaskKind::GraphRegression,
                        "classification" => TaskKind::GraphClassification,
                        _ => return Err(bad()),
                    };
                    saw_task = true;
                }
                _ => return Err(ConfigError::UnknownKey { line, key: key.to_string() }),
            }
        }
        if !saw_task {
            return Err(ConfigError::MissingTask);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.layers == 0 {
            return Err(ConfigError::Invalid("layers must be >= 1".into()));
        }
        if self.hidden_dim == 0 {
            return Err(ConfigError::Invalid("hidden_dim must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be >= 1".into()));
        }
        if self.tau <= 0.0 {
            return Err(ConfigError::Invalid("tau must be positive".into()));
        }
        if !(self.beta_min > 0.0 && self.beta_min < self.beta_max) {
            return Err(ConfigError::Invalid("need 0 < beta_min < beta_max".into()));
        }
        if let AggMode::AnaHybrid(h) = self.agg_mode {
            if !(1..=3).contains(&h) {
                return Err(ConfigError::Invalid("hybrid term count must be in 1..=3".into()));
            }
        }
        Ok(())
    }

    /// Canonical serialization; fixed key order, parseable by
    /// [`ModelConfig::parse`].
    pub fn to_text(&self) -> String {
        format!(
            "task={}\nlayers={}\nhidden_dim={}\nfeat_dim={}\nout_dim={}\norder={}\nprecision={}\nagg_mode={}\nbias={}\ntau={}\ntau_anneal={}\nbeta_min={}\nbeta_max={}\nlr={}\nepochs={}\nbatch_size={}\nseed={}\n",
            self.task.name(),
            self.layers,
            self.hidden_dim,
            self.feat_dim,
            self.out_dim,
            self.order.name(),
            self.precision.name(),
            self.agg_mode.to_text(),
            self.bias,
            self.tau,
            self.tau_anneal,
            self.beta_min,
            self.beta_max,
            self.lr,
            self.epochs,
            self.batch_size,
            self.seed,
        )
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "1" => Some(true),
        "false" | "0" => Some(false),
        _ => None,
    }
}
