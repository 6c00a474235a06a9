//! Layered settings: documented defaults, then a TOML file, then command-line flags.

use std::path::Path;

use anyhow::{Context, Result};
use codail::ail::{Algorithm, Ratio, TrainerConfig};
use codail::experiments::{default_ratios, DemoStage, EvalProtocol};
use serde::{Deserialize, Serialize};

/// Every tunable of every subcommand. Unknown keys in a file are errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Settings {
    /// Particle scenario name, `fixture:<name>`, or a path to a `.game` file.
    pub scenario: String,
    /// Write checkpoints every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Imitation trainer.
    pub trainer: TrainerConfig,
    /// Demonstrator training, generation and acceptance.
    pub demonstrator: DemoStage,
    pub eval: EvalProtocol,
    pub sweep: SweepSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    pub ratios: Vec<Ratio>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings { ratios: default_ratios() }
    }
}

/// Desk-scale defaults. Batch 1000, λ = 0.05 and 2×128 hidden layers follow the
/// published setup; its 55,000-epoch budget is cut to 100. The discriminator
/// steps ten times faster than the policy.
impl Default for Settings {
    fn default() -> Self {
        Settings {
            scenario: "keep_away".into(),
            checkpoint_every: 10,
            trainer: TrainerConfig {
                epochs: 100,
                lr: 1e-4,
                discriminator_lr: Some(1e-3),
                ..Default::default()
            },
            demonstrator: DemoStage::default(),
            eval: EvalProtocol::default(),
            sweep: SweepSettings::default(),
        }
    }
}

/// Flags that override file and default values. `None` leaves the lower layer.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub scenario: Option<String>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lambda: Option<f64>,
    pub algorithm: Option<Algorithm>,
    pub ratio: Option<Ratio>,
    pub episodes: Option<usize>,
    pub horizon: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub ratios: Option<Vec<Ratio>>,
}

/// Which trainer the training flags apply to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Imitation,
    Demonstrator,
}

impl Settings {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Defaults, overlaid with `file` when given, overlaid with `flags`.
    pub fn resolve(file: Option<&Path>, flags: &Overrides, target: Target) -> Result<Self> {
        let mut s = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        s.apply(flags, target);
        Ok(s)
    }

    pub fn apply(&mut self, o: &Overrides, target: Target) {
        let t = match target {
            Target::Imitation => &mut self.trainer,
            Target::Demonstrator => &mut self.demonstrator.trainer,
        };
        if let Some(v) = o.seed {
            t.seed = v;
        }
        if let Some(v) = o.epochs {
            t.epochs = v;
        }
        if let Some(v) = o.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = o.lr {
            t.lr = v;
        }
        if let Some(v) = o.lambda {
            t.lambda = v;
        }
        if let Some(v) = o.ratio {
            t.ratio = v;
        }
        if let Some(v) = o.algorithm {
            self.trainer.algorithm = v;
        }
        if let Some(v) = &o.scenario {
            self.scenario = v.clone();
        }
        if let Some(v) = o.episodes {
            self.demonstrator.episodes = v;
        }
        if let Some(v) = o.horizon {
            self.demonstrator.horizon = v;
        }
        if let Some(v) = o.checkpoint_every {
            self.checkpoint_every = v;
        }
        if let Some(v) = &o.ratios {
            self.sweep.ratios = v.clone();
        }
    }

    /// Every violated constraint across the trainers.
    pub fn violations(&self) -> Vec<String> {
        let mut v: Vec<String> = self.trainer.violations().into_iter().map(|m| format!("trainer: {m}")).collect();
        v.extend(self.demonstrator.trainer.violations().into_iter().map(|m| format!("demonstrator.trainer: {m}")));
        if self.demonstrator.episodes == 0 {
            v.push("demonstrator.episodes must be at least 1".into());
        }
        if self.eval.episodes == 0 {
            v.push("eval.episodes must be at least 1".into());
        }
        if self.sweep.ratios.is_empty() {
            v.push("sweep.ratios must not be empty".into());
        }
        v
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
