//! Policy configuration and model shape.
//!
//! Configs are single JSON documents. Absent keys take the defaults of the
//! selected [`Profile`], unknown keys are rejected, and every invariant is
//! checked before anything is constructed from the result.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Environment variable that overrides [`PolicyConfig::seed`].
pub const SEED_ENV: &str = "CONFKV_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Greedy,
    /// Sample from `softmax(logits / t)`.
    Temperature(f64),
}

/// Named default sets, one per workload column of the hyperparameter table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Profile {
    #[default]
    WikiText,
    Niah,
    Vwa,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wikitext" | "default" => Ok(Profile::WikiText),
            "niah" => Ok(Profile::Niah),
            "vwa" => Ok(Profile::Vwa),
            other => Err(Error::ConfigParse(format!("unknown profile `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    /// Confidence threshold; `c >= tau` selects the tight budget.
    pub tau: f64,
    /// Budget on confident steps.
    pub n_high: usize,
    /// Budget on uncertain steps.
    pub n_low: usize,
    /// Most recent entries that are never evicted.
    pub protected_p: usize,
    /// Weight of normalized attention mass in the rank score.
    pub alpha: f64,
    /// EMA decay for attention mass.
    pub ema_lambda: f64,
    /// Most recent generated tokens kept at high precision.
    pub fp16_window_w: usize,
    /// Attention block size.
    pub block_size_b: usize,
    pub w_entropy: f64,
    pub w_margin: f64,
    pub w_top: f64,
    pub pyramid_enabled: bool,
    pub pyramid_beta: f64,
    pub pyramid_n_min: usize,
    /// Minimum number of entries outside the FP16 window before a
    /// quantization pass creates a segment. `1` quantizes every step.
    pub int8_group: usize,
    pub sampling_mode: SamplingMode,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self::profile(Profile::WikiText)
    }
}

impl PolicyConfig {
    pub fn profile(profile: Profile) -> Self {
        let base = Self {
            tau: 0.7,
            n_high: 128,
            n_low: 256,
            protected_p: 32,
            alpha: 0.65,
            ema_lambda: 0.90,
            fp16_window_w: 128,
            block_size_b: 128,
            w_entropy: 0.4,
            w_margin: 0.3,
            w_top: 0.3,
            pyramid_enabled: false,
            pyramid_beta: 0.5,
            pyramid_n_min: 96,
            int8_group: 128,
            sampling_mode: SamplingMode::Greedy,
            seed: 0,
        };
        match profile {
            Profile::WikiText => base,
            Profile::Niah => Self {
                n_high: 256,
                n_low: 512,
                protected_p: 64,
                alpha: 0.70,
                fp16_window_w: 256,
                ..base
            },
            Profile::Vwa => Self {
                n_high: 256,
                n_low: 512,
                protected_p: 64,
                alpha: 0.65,
                fp16_window_w: 256,
                ..base
            },
        }
    }

    /// Parse a JSON document over the default profile.
    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_json_with_profile(text, Profile::WikiText)
    }

    /// Parse a JSON document, filling absent keys from `profile`.
    pub fn from_json_with_profile(text: &str, profile: Profile) -> Result<Self> {
        let doc: Value =
            serde_json::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        let Value::Object(overrides) = doc else {
            return Err(Error::ConfigParse("config must be a JSON object".into()));
        };
        let Value::Object(mut merged) = serde_json::to_value(Self::profile(profile))? else {
            unreachable!("PolicyConfig serializes to an object");
        };
        for (key, value) in overrides {
            if !merged.contains_key(&key) {
                return Err(Error::ConfigParse(format!("unknown key `{key}`")));
            }
            merged.insert(key, value);
        }
        let cfg: Self = serde_json::from_value(Value::Object(merged))
            .map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Apply `CONFKV_SEED` if it is set.
    pub fn with_env_overrides(mut self) -> Result<Self> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::ConfigParse(format!("{SEED_ENV}=`{raw}` is not a u64")))?;
        }
        Ok(self)
    }

    /// Set a single key from a JSON value, then revalidate.
    pub fn with_override(&self, key: &str, value: Value) -> Result<Self> {
        let mut map = Map::new();
        map.insert(key.to_string(), value);
        let Value::Object(mut merged) = serde_json::to_value(self)? else {
            unreachable!("PolicyConfig serializes to an object");
        };
        if !merged.contains_key(key) {
            return Err(Error::ConfigParse(format!("unknown key `{key}`")));
        }
        merged.extend(map);
        let cfg: Self = serde_json::from_value(Value::Object(merged))
            .map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// First 16 hex digits of SHA-256 over the compact JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Invariant(msg));
        for (name, v) in [("tau", self.tau), ("alpha", self.alpha), ("ema_lambda", self.ema_lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.n_high > self.n_low {
            return fail(format!(
                "n_high <= n_low violated ({} > {})",
                self.n_high, self.n_low
            ));
        }
        if self.protected_p > self.pyramid_n_min {
            return fail(format!(
                "protected_p <= pyramid_n_min violated ({} > {})",
                self.protected_p, self.pyramid_n_min
            ));
        }
        if self.pyramid_n_min > self.n_high {
            return fail(format!(
                "pyramid_n_min <= n_high violated ({} > {})",
                self.pyramid_n_min, self.n_high
            ));
        }
        let weights = [
            ("w_entropy", self.w_entropy),
            ("w_margin", self.w_margin),
            ("w_top", self.w_top),
        ];
        for (name, w) in weights {
            if w < 0.0 || !w.is_finite() {
                return fail(format!("{name} must be a finite nonnegative weight, got {w}"));
            }
        }
        let sum = self.w_entropy + self.w_margin + self.w_top;
        if (sum - 1.0).abs() > 1e-9 {
            return fail(format!("weights do not sum to 1 (sum = {sum})"));
        }
        if self.block_size_b < 1 {
            return fail("block_size_b must be >= 1".into());
        }
        if !(self.pyramid_beta > 0.0 && self.pyramid_beta <= 1.0) {
            return fail(format!("pyramid_beta must lie in (0, 1], got {}", self.pyramid_beta));
        }
        if self.int8_group < 1 {
            return fail("int8_group must be >= 1".into());
        }
        if let SamplingMode::Temperature(t) = self.sampling_mode {
            if !(t > 0.0 && t.is_finite()) {
                return fail(format!("sampling temperature must be positive, got {t}"));
            }
        }
        Ok(())
    }
}

/// Convenience alias for [`PolicyConfig::from_json`].
pub fn load_config(text: &str) -> Result<PolicyConfig> {
    PolicyConfig::from_json(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            head_dim: 16,
            vocab_size: 64,
        }
    }
}

impl ModelShape {
    pub fn new(num_layers: usize, num_heads: usize, head_dim: usize, vocab_size: usize) -> Result<Self> {
        let shape = Self {
            num_layers,
            num_heads,
            head_dim,
            vocab_size,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.head_dim == 0 || self.vocab_size == 0 {
            return Err(Error::Invariant(format!(
                "model shape dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Elements per cached token per tensor (`heads * head_dim`).
    pub fn lanes(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn model_dim(&self) -> usize {
        self.lanes()
    }
}
