//! Training hyperparameters and per-dataset presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{ArchSamplerConfig, GdaConfig, Strategies};
use crate::encoder::{Activation, PRELU_INIT};
use crate::error::{Error, Result};
use crate::graph::DEFAULT_PI;

/// Initial slope used when a config asks for randomized leaky ReLU.
pub const RRELU_SUBSTITUTE_SLOPE: f64 = 0.125;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationConfig {
    Identity,
    Relu,
    Prelu,
    /// Accepted for compatibility; trained as PReLU.
    Rrelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_pi")]
    pub pi: f64,
    pub hidden_size: usize,
    pub proj_size: usize,
    #[serde(default = "default_n_transforms")]
    pub n_transforms: usize,
    /// Inclusive bounds for view-1 propagation counts.
    pub k_range: [usize; 2],
    /// Inclusive bounds for view-2 propagation counts.
    pub k2_range: [usize; 2],
    pub fixed_k: usize,
    pub eval_k: usize,
    pub gda: GdaConfig,
    pub strategies: Strategies,
    pub activation: ActivationConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub symmetric_loss: bool,
}

fn default_pi() -> f64 {
    DEFAULT_PI
}

fn default_n_transforms() -> usize {
    2
}

pub const PRESETS: [&str; 6] = [
    "cora",
    "citeseer",
    "pubmed",
    "coauthor-cs",
    "amazon-photo",
    "amazon-computers",
];

impl TrainConfig {
    /// Published settings for a benchmark dataset, all strategies on.
    pub fn preset(name: &str) -> Result<Self> {
        #[allow(clippy::type_complexity)]
        let (epochs, k, k2, hidden, proj, lr, wd, act, edr, fdr, eval_k): (
            usize,
            [usize; 2],
            [usize; 2],
            usize,
            usize,
            f64,
            f64,
            ActivationConfig,
            (f64, f64),
            (f64, f64),
            usize,
        ) = match name.to_ascii_lowercase().as_str() {
            "cora" => (500, [0, 4], [1, 4], 512, 512, 2e-4, 1e-6, ActivationConfig::Relu, (0.3, 0.3), (0.3, 0.3), 2),
            "citeseer" => (400, [2, 4], [1, 3], 512, 512, 1e-5, 1e-6, ActivationConfig::Relu, (0.3, 0.2), (0.3, 0.2), 2),
            "pubmed" => (900, [0, 3], [0, 3], 512, 128, 2e-3, 1e-5, ActivationConfig::Relu, (0.5, 0.4), (0.3, 0.5), 1),
            "coauthor-cs" => (1000, [0, 3], [1, 3], 256, 256, 5e-4, 1e-5, ActivationConfig::Rrelu, (0.3, 0.2), (0.3, 0.4), 1),
            "amazon-photo" => (1500, [3, 5], [1, 3], 256, 256, 1e-3, 0.0, ActivationConfig::Prelu, (0.3, 0.4), (0.2, 0.3), 1),
            "amazon-computers" => (2000, [1, 4], [0, 3], 256, 256, 1e-3, 1e-5, ActivationConfig::Rrelu, (0.7, 0.2), (0.2, 0.2), 1),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            epochs,
            lr,
            weight_decay: wd,
            pi: DEFAULT_PI,
            hidden_size: hidden,
            proj_size: proj,
            n_transforms: 2,
            k_range: k,
            k2_range: k2,
            fixed_k: eval_k,
            eval_k,
            gda: GdaConfig {
                edr1: edr.0,
                edr2: edr.1,
                fdr1: fdr.0,
                fdr2: fdr.1,
            },
            strategies: Strategies::ALL,
            activation: act,
            seed: 0,
            precision: Precision::Single,
            symmetric_loss: false,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return fail(format!("pi must lie in (0, 1), got {}", self.pi));
        }
        if self.hidden_size == 0 || self.proj_size == 0 {
            return fail("hidden_size and proj_size must be positive".into());
        }
        if self.n_transforms == 0 {
            return fail("n_transforms must be at least 1".into());
        }
        for (name, r) in [("k_range", self.k_range), ("k2_range", self.k2_range)] {
            if r[0] > r[1] {
                return fail(format!("{name} lower bound {} exceeds upper bound {}", r[0], r[1]));
            }
        }
        self.gda.validate()
    }

    pub fn sampler_config(&self) -> ArchSamplerConfig {
        ArchSamplerConfig {
            n_transforms: self.n_transforms,
            low: self.k_range[0],
            high: self.k_range[1],
            low2: self.k2_range[0],
            high2: self.k2_range[1],
            strategies: self.strategies,
            fixed_k: self.fixed_k,
        }
    }

    /// Activation actually trained, its initial slope, and whether a
    /// substitution happened.
    pub fn resolved_activation(&self) -> (Activation, f64, bool) {
        match self.activation {
            ActivationConfig::Identity => (Activation::Identity, 0.0, false),
            ActivationConfig::Relu => (Activation::Relu, 0.0, false),
            ActivationConfig::Prelu => (Activation::Prelu, PRELU_INIT, false),
            ActivationConfig::Rrelu => (Activation::Prelu, RRELU_SUBSTITUTE_SLOPE, true),
        }
    }
}
