//! Adaptation hyperparameters, validation, and the flat `key = value`
//! config-file format.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which decoder produces the before/after transcripts of an adaptation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeProtocol {
    Greedy,
    Beam,
}

impl fmt::Display for DecodeProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeProtocol::Greedy => write!(f, "greedy"),
            DecodeProtocol::Beam => write!(f, "beam"),
        }
    }
}

impl FromStr for DecodeProtocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(DecodeProtocol::Greedy),
            "beam" => Ok(DecodeProtocol::Beam),
            other => Err(format!(
                "unknown decode protocol {other:?} (expected greedy|beam)"
            )),
        }
    }
}

/// Every knob of the adaptation loop.
///
/// Defaults are the published operating point for the frame-synchronous
/// model: N=10, T=2.5, tau_scale=0.4 and
/// (eta_i, eta_f, B, lambda_lm, alpha, lambda_ns) = (4e-5, 2e-5, 5, 0.3, 1.5, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationConfig {
    /// Adaptation iterations per utterance.
    pub n: usize,
    /// Softmax temperature applied inside the losses.
    pub temperature: f64,
    /// Negative-class threshold scale; tau = tau_scale / C.
    pub tau_scale: f64,
    /// Entropy order; must differ from 1 (1 itself selects Shannon entropy
    /// and is rejected by validation because the generalized form divides
    /// by 1 - alpha).
    pub alpha: f64,
    /// Weight of the negative-sampling term.
    pub lambda_ns: f64,
    /// Shallow-fusion weight during beam search.
    pub lambda_lm: f64,
    pub beam_width: usize,
    /// Cosine-annealed learning-rate endpoints.
    pub eta_i: f64,
    pub eta_f: f64,
    pub weight_decay: f64,
    /// Parameter groups the optimizer may touch. Empty selects the model's
    /// mode default: the feature extractor for frame-synchronous models, the
    /// encoder for autoregressive ones.
    pub trainable_groups: BTreeSet<String>,
    pub use_beam_search: bool,
    pub use_gem: bool,
    pub use_ns: bool,
    /// Drop frames whose argmax is blank from the entropy term.
    pub blank_mask_gem: bool,
    /// Same mask for the negative-sampling term (off by default; the loss is
    /// defined over every timestep).
    pub blank_mask_ns: bool,
    pub seed: u64,
    /// Re-run decoding and logit acquisition at every iteration rather than
    /// freezing the first estimate.
    pub reacquire_every_step: bool,
    /// Decoder for the before/after transcripts.
    pub decode: DecodeProtocol,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            n: 10,
            temperature: 2.5,
            tau_scale: 0.4,
            alpha: 1.5,
            lambda_ns: 1.0,
            lambda_lm: 0.3,
            beam_width: 5,
            eta_i: 4e-5,
            eta_f: 2e-5,
            weight_decay: 0.0,
            trainable_groups: BTreeSet::new(),
            use_beam_search: true,
            use_gem: true,
            use_ns: true,
            blank_mask_gem: true,
            blank_mask_ns: false,
            seed: 0,
            reacquire_every_step: true,
            decode: DecodeProtocol::Greedy,
        }
    }
}

impl AdaptationConfig {
    /// Negative-class threshold for a vocabulary of `c` classes.
    /// tau_scale < 1 guarantees tau < 1/C, so the argmax class can never be
    /// selected as a negative.
    pub fn tau(&self, c: usize) -> f64 {
        self.tau_scale / c as f64
    }

    /// Check every invariant; reports the first violated one by name.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return fail("T must be positive");
        }
        if !self.tau_scale.is_finite() || self.tau_scale <= 0.0 {
            return fail("tau_scale must be positive");
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return fail("alpha must be positive");
        }
        if self.alpha == 1.0 {
            return fail("alpha must differ from 1");
        }
        if !self.lambda_ns.is_finite() || self.lambda_ns < 0.0 {
            return fail("lambda_ns must be non-negative");
        }
        if !self.lambda_lm.is_finite() || self.lambda_lm < 0.0 {
            return fail("lambda_lm must be non-negative");
        }
        if self.beam_width < 1 {
            return fail("beam_width must be at least 1");
        }
        if !self.eta_i.is_finite() || self.eta_i <= 0.0 {
            return fail("eta_i must be positive");
        }
        if !self.eta_f.is_finite() || self.eta_f <= 0.0 {
            return fail("eta_f must be positive");
        }
        if self.eta_f > self.eta_i {
            return fail("eta_f must not exceed eta_i");
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return fail("weight_decay must be non-negative");
        }
        if self.n > 0 && !self.use_gem && !self.use_ns {
            return fail("at least one of use_gem or use_ns must be enabled when N > 0");
        }
        Ok(())
    }

    /// Serialize as the flat `key = value` file format.
    pub fn to_file_string(&self) -> String {
        let groups: Vec<&str> = self.trainable_groups.iter().map(String::as_str).collect();
        let mut s = String::new();
        s.push_str("# adaptation configuration\n");
        s.push_str(&format!("N = {}\n", self.n));
        s.push_str(&format!("T = {}\n", self.temperature));
        s.push_str(&format!("tau_scale = {}\n", self.tau_scale));
        s.push_str(&format!("alpha = {}\n", self.alpha));
        s.push_str(&format!("lambda_ns = {}\n", self.lambda_ns));
        s.push_str(&format!("lambda_lm = {}\n", self.lambda_lm));
        s.push_str(&format!("beam_width = {}\n", self.beam_width));
        s.push_str(&format!("eta_i = {}\n", self.eta_i));
        s.push_str(&format!("eta_f = {}\n", self.eta_f));
        s.push_str(&format!("weight_decay = {}\n", self.weight_decay));
        s.push_str(&format!("trainable_groups = {}\n", groups.join(",")));
        s.push_str(&format!("use_beam_search = {}\n", self.use_beam_search));
        s.push_str(&format!("use_gem = {}\n", self.use_gem));
        s.push_str(&format!("use_ns = {}\n", self.use_ns));
        s.push_str(&format!("blank_mask_gem = {}\n", self.blank_mask_gem));
        s.push_str(&format!("blank_mask_ns = {}\n", self.blank_mask_ns));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!(
            "reacquire_every_step = {}\n",
            self.reacquire_every_step
        ));
        s.push_str(&format!("decode = {}\n", self.decode));
        s
    }

    /// Parse the `key = value` format on top of the built-in defaults.
    /// `#` starts a comment; unknown keys are rejected.
    pub fn from_file_string(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = AdaptationConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| ConfigError::Parse {
                line: lineno + 1,
                reason,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected key = value".into()))?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| err(format!("invalid {what} value {value:?}"));
            match key {
                "N" => cfg.n = value.parse().map_err(|_| bad("integer"))?,
                "T" => cfg.temperature = value.parse().map_err(|_| bad("float"))?,
                "tau_scale" => cfg.tau_scale = value.parse().map_err(|_| bad("float"))?,
                "alpha" => cfg.alpha = value.parse().map_err(|_| bad("float"))?,
                "lambda_ns" => cfg.lambda_ns = value.parse().map_err(|_| bad("float"))?,
                "lambda_lm" => cfg.lambda_lm = value.parse().map_err(|_| bad("float"))?,
                "beam_width" => cfg.beam_width = value.parse().map_err(|_| bad("integer"))?,
                "eta_i" => cfg.eta_i = value.parse().map_err(|_| bad("float"))?,
                "eta_f" => cfg.eta_f = value.parse().map_err(|_| bad("float"))?,
                "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad("float"))?,
                "trainable_groups" => {
                    cfg.trainable_groups = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect();
                }
                "use_beam_search" => {
                    cfg.use_beam_search = value.parse().map_err(|_| bad("bool"))?
                }
                "use_gem" => cfg.use_gem = value.parse().map_err(|_| bad("bool"))?,
                "use_ns" => cfg.use_ns = value.parse().map_err(|_| bad("bool"))?,
                "blank_mask_gem" => cfg.blank_mask_gem = value.parse().map_err(|_| bad("bool"))?,
                "blank_mask_ns" => cfg.blank_mask_ns = value.parse().map_err(|_| bad("bool"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("integer"))?,
                "reacquire_every_step" => {
                    cfg.reacquire_every_step = value.parse().map_err(|_| bad("bool"))?
                }
                "decode" => cfg.decode = value.parse().map_err(|e: String| err(e))?,
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_file_string(&text)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }
}

/// Returns the config unchanged when every invariant holds.
pub fn validate_config(config: AdaptationConfig) -> Result<AdaptationConfig, ConfigError> {
    config.validate()?;
    Ok(config)
}
