use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn model_config(self) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(),
            Preset::Paper => ModelConfig::paper(),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

/// Optimization settings shared by pretraining and fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the reference loss; ignored by pretraining.
    pub omega: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub preset: Preset,
}

impl TrainConfig {
    /// Desk pretraining defaults.
    pub fn desk_pretrain() -> Self {
        TrainConfig {
            omega: 0.0,
            batch_size: 16,
            grad_clip: 1.0,
            steps: 2000,
            learning_rate: 1e-3,
            seed: 0,
            preset: Preset::Desk,
        }
    }

    /// Desk fine-tuning defaults.
    pub fn desk_finetune() -> Self {
        TrainConfig {
            steps: 300,
            ..Self::desk_pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        super::validate_omega(self.omega)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!("grad_clip {} must be > 0", self.grad_clip)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Applies `key=value` overrides, as found in config files.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "omega" => self.omega = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "learning_rate" | "lr" => self.learning_rate = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "preset" => self.preset = value.trim().parse()?,
            other => return Err(Error::Config(format!("unknown training key `{other}`"))),
        }
        Ok(())
    }

    /// Resolved settings as `key=value` lines.
    pub fn describe(&self) -> String {
        format!(
            "preset={}\nomega={}\nbatch_size={}\ngrad_clip={}\nsteps={}\nlearning_rate={}\nseed={}\n",
            self.preset,
            self.omega,
            self.batch_size,
            self.grad_clip,
            self.steps,
            self.learning_rate,
            self.seed
        )
    }
}
