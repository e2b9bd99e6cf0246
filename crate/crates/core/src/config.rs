//! Run configuration, read from TOML. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamWConfig;
use crate::data::DataSource;
use crate::error::{Error, Result};
use crate::growth::{GrowthOperatorKind, DEFAULT_MOMENTUM};
use crate::model::ModelConfig;
use crate::schedule::{AdaReg, StagePlan};
use crate::search::SearchConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Prog,
    AutoProg,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Prog => "prog",
            Mode::AutoProg => "autoprog",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Mode::Baseline),
            "prog" => Ok(Mode::Prog),
            "autoprog" => Ok(Mode::AutoProg),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthConfig {
    /// Smallest scaling ratio of the growth space.
    #[serde(default = "default_s1")]
    pub s1: f64,
    /// Growth operator; required for `prog`, MoGrow by default for `autoprog`.
    #[serde(default)]
    pub operator: Option<GrowthOperatorKind>,
    /// EMA momentum of the momentum network.
    #[serde(default = "default_momentum")]
    pub momentum: f32,
}

fn default_s1() -> f64 {
    0.5
}

fn default_momentum() -> f32 {
    DEFAULT_MOMENTUM
}

impl Default for GrowthConfig {
    fn default() -> Self {
        Self {
            s1: default_s1(),
            operator: None,
            momentum: default_momentum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_min_lr")]
    pub min_lr: f32,
    #[serde(default = "default_wd")]
    pub weight_decay: f32,
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    #[serde(default = "default_eps")]
    pub eps: f32,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

fn default_lr() -> f32 {
    1e-3
}
fn default_min_lr() -> f32 {
    1e-5
}
fn default_wd() -> f32 {
    0.05
}
fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_eps() -> f32 {
    1e-8
}
fn default_warmup() -> usize {
    3
}
fn default_batch() -> usize {
    64
}
fn default_eval_batch() -> usize {
    250
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            min_lr: default_min_lr(),
            weight_decay: default_wd(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            warmup_epochs: default_warmup(),
            batch_size: default_batch(),
            eval_batch_size: default_eval_batch(),
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub plan: StagePlan,
    #[serde(default)]
    pub growth: GrowthConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub adareg: AdaReg,
    pub data: DataSource,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/latest")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.plan.validate()?;
        self.search.validate()?;
        if self.mode == Mode::Prog && self.growth.operator.is_none() {
            return Err(Error::Config("mode `prog` requires growth.operator".into()));
        }
        if !(0.0..=1.0).contains(&self.growth.momentum) {
            return Err(Error::Config(format!(
                "growth.momentum = {} must lie in [0, 1]",
                self.growth.momentum
            )));
        }
        if self.optim.batch_size == 0 || self.optim.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    /// Operator used at growth events.
    pub fn operator(&self) -> GrowthOperatorKind {
        self.growth.operator.unwrap_or(GrowthOperatorKind::MoGrow)
    }
}
