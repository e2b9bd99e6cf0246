//! Stage planning: the growth space, per-stage candidate sets, the manual
//! uniform-linear schedule and regularisation ramps.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SubNetSpec};

/// Epoch accounting shared by all training modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub total_epochs: usize,
    pub stages: usize,
    /// Epochs of sampled supernet training at the start of each searched stage.
    #[serde(default = "default_supernet_epochs")]
    pub supernet_epochs: usize,
}

fn default_supernet_epochs() -> usize {
    2
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.total_epochs % self.stages != 0 {
            return Err(Error::Config(format!(
                "{} stages must divide {} epochs",
                self.stages, self.total_epochs
            )));
        }
        Ok(())
    }

    /// Stricter check for searched schedules: every stage needs room for its
    /// supernet epochs plus at least one epoch on the chosen sub-network.
    pub fn validate_for_search(&self) -> Result<()> {
        self.validate()?;
        if self.total_epochs > 0 && self.epochs_per_stage() < self.supernet_epochs + 1 {
            return Err(Error::Config(format!(
                "{} epochs per stage leave no room after {} supernet epochs",
                self.epochs_per_stage(),
                self.supernet_epochs
            )));
        }
        Ok(())
    }

    pub fn epochs_per_stage(&self) -> usize {
        self.total_epochs / self.stages.max(1)
    }

    /// Stage index (0-based) of a 0-based epoch.
    pub fn stage_of(&self, epoch: usize) -> usize {
        (epoch / self.epochs_per_stage().max(1)).min(self.stages.saturating_sub(1))
    }
}

/// Candidate depths and grids derived from a ladder of scaling ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct GrowthSpace {
    pub ratios: Vec<f64>,
    pub depths: Vec<usize>,
    pub grids: Vec<usize>,
    pub max_depth: usize,
    pub max_grid: usize,
}

fn scaled(ratio: f64, max: usize) -> usize {
    ((ratio * max as f64).round() as usize).clamp(1, max)
}

/// Equispaced ratios from `s1` to 1 with `rungs` entries; candidate values
/// are rounded to the nearest integer and deduplicated.
pub fn build_growth_space(cfg: &ModelConfig, s1: f64, rungs: usize) -> Result<GrowthSpace> {
    if !(s1 > 0.0 && s1 <= 1.0) {
        return Err(Error::Config(format!("s1 = {s1} must lie in (0, 1]")));
    }
    if rungs == 0 {
        return Err(Error::Config("growth space needs at least one rung".into()));
    }
    let ratios: Vec<f64> = if s1 == 1.0 || rungs == 1 {
        vec![1.0]
    } else {
        (0..rungs)
            .map(|k| {
                if k + 1 == rungs {
                    1.0
                } else {
                    s1 + (1.0 - s1) * k as f64 / (rungs - 1) as f64
                }
            })
            .collect()
    };
    let pick = |max: usize| {
        let mut v: Vec<usize> = ratios.iter().map(|&r| scaled(r, max)).collect();
        v.dedup();
        v
    };
    Ok(GrowthSpace {
        depths: pick(cfg.max_depth),
        grids: pick(cfg.max_grid),
        ratios,
        max_depth: cfg.max_depth,
        max_grid: cfg.max_grid,
    })
}

impl GrowthSpace {
    pub fn s1(&self) -> f64 {
        self.ratios[0]
    }

    /// Spec at ratio rung `k` for both dimensions.
    pub fn rung_spec(&self, k: usize) -> SubNetSpec {
        let r = self.ratios[k.min(self.ratios.len() - 1)];
        SubNetSpec::new(scaled(r, self.max_depth), scaled(r, self.max_grid))
    }

    pub fn full(&self) -> SubNetSpec {
        SubNetSpec::new(self.max_depth, self.max_grid)
    }

    pub fn contains(&self, spec: SubNetSpec) -> bool {
        self.depths.contains(&spec.depth) && self.grids.contains(&spec.grid)
    }
}

/// Sub-network per stage; the last entry is the full model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrowthSchedule {
    pub stages: Vec<SubNetSpec>,
}

/// Stage `k` uses rung `k` of the ladder for both depth and grid; stages
/// beyond the ladder stay on its last rung.
pub fn uniform_linear_schedule(space: &GrowthSpace, stages: usize) -> GrowthSchedule {
    GrowthSchedule {
        stages: (0..stages).map(|k| space.rung_spec(k)).collect(),
    }
}

impl GrowthSchedule {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Schedule(m));
        let Some(last) = self.stages.last() else {
            return fail("schedule has no stages".into());
        };
        for s in &self.stages {
            cfg.check_spec(*s)?;
        }
        if *last != cfg.full_spec() {
            return fail(format!("final stage {last} is not the full model {}", cfg.full_spec()));
        }
        if let Some(w) = self.stages.windows(2).find(|w| !w[0].within(&w[1])) {
            return fail(format!("stage {} shrinks to {}", w[0], w[1]));
        }
        Ok(())
    }

    /// Ratio form: per-stage `(depth / max_depth, grid / max_grid)`.
    pub fn to_ratios(&self, cfg: &ModelConfig) -> (Vec<f64>, Vec<f64>) {
        self.stages
            .iter()
            .map(|s| {
                (
                    s.depth as f64 / cfg.max_depth as f64,
                    s.grid as f64 / cfg.max_grid as f64,
                )
            })
            .unzip()
    }

    pub fn from_ratios(cfg: &ModelConfig, depth: &[f64], grid: &[f64]) -> Result<Self> {
        if depth.len() != grid.len() {
            return Err(Error::Schedule(format!(
                "{} depth ratios vs {} grid ratios",
                depth.len(),
                grid.len()
            )));
        }
        if let Some(r) = depth.iter().chain(grid).find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::Schedule(format!("ratio {r} outside (0, 1]")));
        }
        Ok(Self {
            stages: depth
                .iter()
                .zip(grid)
                .map(|(&l, &n)| SubNetSpec::new(scaled(l, cfg.max_depth), scaled(n, cfg.max_grid)))
                .collect(),
        })
    }

    /// Line format: a header line, then `stage depth grid` per stage
    /// (stages numbered from 1).
    pub fn encode(&self) -> String {
        let mut out = String::from("stage depth grid\n");
        for (k, s) in self.stages.iter().enumerate() {
            let _ = writeln!(out, "{} {} {}", k + 1, s.depth, s.grid);
        }
        out
    }

    pub fn decode(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        match lines.next() {
            Some((_, h)) if h.split_whitespace().eq(["stage", "depth", "grid"]) => {}
            other => {
                return Err(Error::Schedule(format!(
                    "line {}: expected header `stage depth grid`",
                    other.map_or(1, |(i, _)| i + 1)
                )))
            }
        }
        let mut stages = Vec::new();
        for (i, line) in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parsed: Option<Vec<usize>> = fields.iter().map(|f| f.parse().ok()).collect();
            match parsed.as_deref() {
                Some(&[k, d, g]) if k == stages.len() + 1 => stages.push(SubNetSpec::new(d, g)),
                _ => {
                    return Err(Error::Schedule(format!(
                        "line {}: expected `{} <depth> <grid>`, got `{line}`",
                        i + 1,
                        stages.len() + 1
                    )))
                }
            }
        }
        Ok(Self { stages })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read_to_string(path)?)
    }
}

fn pick_three(values: &[usize]) -> Vec<usize> {
    let mut v = vec![values[0], values[(values.len() - 1) / 2], values[values.len() - 1]];
    v.dedup();
    v
}

/// Candidate set of a stage.
///
/// The first stage (`stage == 0`) takes the smallest, lower-median and
/// largest candidate of each dimension. Later stages take the previous
/// choice plus the next three depths and the next grid, keeping specs whose
/// size measure is at least the previous choice's.
pub fn build_stage_space(
    cfg: &ModelConfig,
    space: &GrowthSpace,
    stage: usize,
    prev: Option<SubNetSpec>,
) -> Result<Vec<SubNetSpec>> {
    let (depths, grids) = match (stage, prev) {
        (0, _) => (pick_three(&space.depths), pick_three(&space.grids)),
        (_, None) => {
            return Err(Error::Search(format!("stage {stage} needs the previous choice")))
        }
        (_, Some(p)) => {
            if !space.contains(p) {
                return Err(Error::NotInSpace(p.to_string()));
            }
            let next = |vals: &[usize], cur: usize, n: usize| -> Vec<usize> {
                std::iter::once(cur)
                    .chain(vals.iter().copied().filter(|&v| v > cur).take(n))
                    .collect()
            };
            (next(&space.depths, p.depth, 3), next(&space.grids, p.grid, 1))
        }
    };
    let floor = prev.map_or(0, |p| cfg.size_measure(p));
    Ok(depths
        .iter()
        .flat_map(|&d| grids.iter().map(move |&g| SubNetSpec::new(d, g)))
        .filter(|s| cfg.size_measure(*s) >= floor)
        .collect())
}

/// Linear ramp of one regulariser between its minimum and maximum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ramp {
    pub min: f32,
    pub max: f32,
}

impl Ramp {
    pub const fn fixed(v: f32) -> Self {
        Self { min: v, max: v }
    }

    pub fn at(&self, s: f64, s1: f64) -> f32 {
        if s1 >= 1.0 {
            return self.max;
        }
        let t = ((s - s1) / (1.0 - s1)).clamp(0.0, 1.0) as f32;
        self.min + (self.max - self.min) * t
    }
}

/// Adaptive regularisation: intensities grow with model scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaReg {
    #[serde(default = "default_drop_path")]
    pub drop_path: Ramp,
    #[serde(default = "default_input_noise")]
    pub input_noise: Ramp,
}

fn default_drop_path() -> Ramp {
    Ramp { min: 0.0, max: 0.1 }
}

fn default_input_noise() -> Ramp {
    Ramp { min: 0.0, max: 0.1 }
}

impl Default for AdaReg {
    fn default() -> Self {
        Self {
            drop_path: default_drop_path(),
            input_noise: default_input_noise(),
        }
    }
}

/// Intensities in effect at one scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegIntensity {
    pub drop_path: f32,
    pub input_noise: f32,
}

/// Scale of a spec: mean of its depth and grid ratios.
pub fn spec_scale(cfg: &ModelConfig, spec: SubNetSpec) -> f64 {
    0.5 * (spec.depth as f64 / cfg.max_depth as f64 + spec.grid as f64 / cfg.max_grid as f64)
}

impl AdaReg {
    pub fn intensity(&self, s: f64, s1: f64) -> RegIntensity {
        RegIntensity {
            drop_path: self.drop_path.at(s, s1),
            input_noise: self.input_noise.at(s, s1),
        }
    }
}
