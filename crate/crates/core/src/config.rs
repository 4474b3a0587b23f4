//! Run configuration as flat `key = value` text.
//!
//! Every key is a [`RunConfig`] field name. Lines starting with `#` and
//! blank lines are ignored; keys missing from a file keep their defaults.
//! [`RunConfig::to_text`] writes every field, so a saved file is the fully
//! resolved configuration and loads back to an equal value.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::contrastive::Temperature;
use crate::data::{format_boosts, parse_boosts, SyntheticSpec};
use crate::nn::Activation;
use crate::objective::LossSwitches;
use crate::sarl::SarlConfig;
use crate::scalar::Precision;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: {reason}")]
    Value { key: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Text form of one config value.
trait ConfigValue: Sized {
    fn render(&self) -> String;
    fn parse_value(s: &str) -> Result<Self, String>;
}

macro_rules! via_from_str {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn render(&self) -> String {
                self.to_string()
            }
            fn parse_value(s: &str) -> Result<Self, String> {
                <$t>::from_str(s).map_err(|e| format!("`{s}`: {e}"))
            }
        }
    )*};
}

via_from_str!(usize, u64, f64, bool, Activation, Precision);

impl ConfigValue for PathBuf {
    fn render(&self) -> String {
        self.display().to_string()
    }
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok(PathBuf::from(s))
    }
}

/// An empty value means "none".
impl ConfigValue for Option<PathBuf> {
    fn render(&self) -> String {
        self.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
    }
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok((!s.is_empty()).then(|| PathBuf::from(s)))
    }
}

impl ConfigValue for Vec<(usize, usize, f64)> {
    fn render(&self) -> String {
        format_boosts(self)
    }
    fn parse_value(s: &str) -> Result<Self, String> {
        parse_boosts(s)
    }
}

macro_rules! run_config {
    ($( $(#[doc = $doc:expr])* $field:ident : $ty:ty = $default:expr, )*) => {
        /// Everything a run needs. Field names double as config-file keys.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            /// All keys in file order.
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field), )*];

            /// Writes every field, each preceded by its description.
            pub fn to_text(&self) -> String {
                let mut out = String::from("# sadcl run configuration\n");
                $(
                    out.push('\n');
                    $( writeln!(out, "#{}", $doc).expect("string write"); )*
                    writeln!(out, "{} = {}", stringify!($field), ConfigValue::render(&self.$field))
                        .expect("string write");
                )*
                out
            }

            /// Overrides one field from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                let bad = |reason: String| ConfigError::Value { key: key.to_string(), reason };
                match key {
                    $( stringify!($field) => self.$field = ConfigValue::parse_value(value).map_err(bad)?, )*
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
                Ok(())
            }
        }
    };
}

run_config! {
    /// Embedding width d of the encoder and decoder.
    dim: usize = 64,
    /// Output width d' of the projection head.
    proj_dim: usize = 32,
    /// Hidden width d_h of the projection head.
    proj_hidden: usize = 64,
    /// Attention heads; must divide dim.
    heads: usize = 4,
    encoder_layers: usize = 1,
    decoder_layers: usize = 2,
    /// Feed-forward hidden width inside every transformer layer.
    ffn_hidden: usize = 128,
    /// Query self-attention before cross-attention in each decoder layer.
    query_self_attention: bool = true,
    /// Feed-forward activation: relu or gelu.
    activation: Activation = Activation::Relu,
    /// Sample-to-sample contrastive term.
    sscl_on: bool = true,
    /// Prototype-to-sample contrastive term.
    pscl_on: bool = true,
    sscl_weight: f64 = 1.0,
    pscl_weight: f64 = 1.0,
    /// Contrastive temperature.
    tau: f64 = 0.1,
    /// Prototype screening threshold on classifier scores.
    epsilon: f64 = 0.8,
    /// Memory-bank capacity per class.
    bank_capacity: usize = 64,
    /// Unit-normalize projected vectors before similarities.
    normalize: bool = true,
    /// Peak learning rate of the one-cycle schedule.
    lr: f64 = 1e-3,
    /// Decoupled AdamW weight decay.
    weight_decay: f64 = 5e-3,
    epochs: usize = 20,
    /// Images per iteration. 16 keeps desk runs short; 64 is the large-scale setting.
    batch_size: usize = 16,
    /// Fraction of all steps spent rising to the peak rate.
    warmup_fraction: f64 = 0.3,
    /// Dataset file; when empty the synthetic data_* fields are generated in memory.
    dataset: Option<PathBuf> = None,
    data_classes: usize = 16,
    data_grid_h: usize = 8,
    data_grid_w: usize = 8,
    data_channels: usize = 16,
    /// Expected number of positive labels per image.
    data_cardinality: f64 = 2.9,
    /// Co-occurrence boosts as j:k:b entries separated by `;`.
    data_boosts: Vec<(usize, usize, f64)> = Vec::new(),
    data_signature_strength: f64 = 1.0,
    /// Standard deviation of the additive noise.
    data_noise: f64 = 0.3,
    data_train_size: usize = 2000,
    data_test_size: usize = 500,
    data_seed: u64 = 0,
    /// Seed for parameter initialization and batch shuffling.
    seed: u64 = 0,
    /// Arithmetic used for training: train (f32) or high (f64).
    precision: Precision = Precision::Train,
    /// Single-threaded fixed-order execution.
    deterministic: bool = true,
    /// Directory receiving checkpoints, logs and reports.
    out_dir: PathBuf = PathBuf::from("runs/default"),
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                reason: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Syntax {
                    line: n + 1,
                    reason: format!("duplicate key `{key}`"),
                });
            }
            config.set(key, value.trim())?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        fs::write(path, self.to_text()).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// The generator spec described by the data_* fields.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.data_classes,
            grid_h: self.data_grid_h,
            grid_w: self.data_grid_w,
            raw_channels: self.data_channels,
            cardinality: self.data_cardinality,
            boosts: self.data_boosts.clone(),
            signature_strength: self.data_signature_strength,
            noise: self.data_noise,
            train_size: self.data_train_size,
            test_size: self.data_test_size,
            seed: self.data_seed,
        }
    }

    /// Copies a dataset's shape into the data_* fields so the model matches it.
    pub fn adopt_spec(&mut self, spec: &SyntheticSpec) {
        self.data_classes = spec.num_classes;
        self.data_grid_h = spec.grid_h;
        self.data_grid_w = spec.grid_w;
        self.data_channels = spec.raw_channels;
        self.data_cardinality = spec.cardinality;
        self.data_boosts = spec.boosts.clone();
        self.data_signature_strength = spec.signature_strength;
        self.data_noise = spec.noise;
        self.data_train_size = spec.train_size;
        self.data_test_size = spec.test_size;
        self.data_seed = spec.seed;
    }

    pub fn sarl(&self) -> SarlConfig {
        SarlConfig {
            grid_h: self.data_grid_h,
            grid_w: self.data_grid_w,
            raw_channels: self.data_channels,
            dim: self.dim,
            heads: self.heads,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            ffn_hidden: self.ffn_hidden,
            num_classes: self.data_classes,
            query_self_attention: self.query_self_attention,
            activation: self.activation,
        }
    }

    pub fn switches(&self) -> LossSwitches {
        LossSwitches {
            sscl: self.sscl_on,
            pscl: self.pscl_on,
            sscl_weight: self.sscl_weight,
            pscl_weight: self.pscl_weight,
        }
    }

    pub fn temperature(&self) -> Temperature {
        Temperature::new(self.tau).expect("validated")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        self.sarl().validate().map_err(ConfigError::Invalid)?;
        if self.proj_dim == 0 || self.proj_hidden == 0 || self.ffn_hidden == 0 {
            return fail("projection and feed-forward widths must be positive".into());
        }
        if Temperature::new(self.tau).is_err() {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return fail(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        for (name, w) in [("sscl_weight", self.sscl_weight), ("pscl_weight", self.pscl_weight)] {
            if !(w >= 0.0 && w.is_finite()) {
                return fail(format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail(format!("warmup_fraction must lie in [0, 1), got {}", self.warmup_fraction));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be at least 1".into());
        }
        if self.dataset.is_none() {
            self.synthetic_spec()
                .validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }
}
