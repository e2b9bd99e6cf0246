//! Per-stage schedule search: candidates are scored by `L · T^α`.
//!
//! Costs are counted in multiply-accumulates, the usual "FLOPs" convention
//! for vision transformers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SubNetSpec};

/// Forward cost of one sample at `spec`.
pub fn forward_flops(cfg: &ModelConfig, spec: SubNetSpec) -> f64 {
    let d = cfg.embed_dim as f64;
    let t = spec.tokens() as f64;
    let n2 = (spec.grid * spec.grid) as f64;
    let hidden = cfg.mlp_hidden() as f64;
    // qkv + proj, two MLP layers, scores and weighted sum
    let block = t * (4.0 * d * d + 2.0 * d * hidden) + 2.0 * t * t * d;
    let stem = n2 * (cfg.channels * cfg.patch * cfg.patch) as f64 * d;
    let head = d * cfg.classes as f64;
    spec.depth as f64 * block + stem + head
}

/// Training cost of one sample: forward plus a backward pass counted as
/// twice the forward.
pub fn estimate_cost(cfg: &ModelConfig, spec: SubNetSpec) -> f64 {
    3.0 * forward_flops(cfg, spec)
}

/// Per-spec costs, optionally scaled by measured calibration factors.
#[derive(Clone, Debug)]
pub struct CostModel {
    cfg: ModelConfig,
    calibration: Vec<(SubNetSpec, f64)>,
}

impl CostModel {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            calibration: Vec::new(),
        }
    }

    /// Multiplies the analytic cost of `spec` by `factor` (e.g. measured over
    /// predicted wall time).
    pub fn calibrate(&mut self, spec: SubNetSpec, factor: f64) {
        self.calibration.retain(|(s, _)| *s != spec);
        self.calibration.push((spec, factor));
    }

    pub fn cost(&self, spec: SubNetSpec) -> f64 {
        let f = self
            .calibration
            .iter()
            .find(|(s, _)| *s == spec)
            .map_or(1.0, |(_, f)| *f);
        estimate_cost(&self.cfg, spec) * f
    }

    /// Mean per-step cost of a schedule with equal-length stages, relative
    /// to always training the full model.
    pub fn schedule_ratio(&self, stages: &[SubNetSpec]) -> f64 {
        let full = self.cost(self.cfg.full_spec());
        stages.iter().map(|s| self.cost(*s)).sum::<f64>() / (stages.len() as f64 * full)
    }
}

/// Balancing exponent: the spread of `T^α` matches the spread of `L`.
/// Degenerate spreads give zero.
pub fn compute_alpha(scores: &[(f64, f64)]) -> Result<f64> {
    if let Some(&(l, t)) = scores.iter().find(|(l, t)| !(*l > 0.0) || !(*t > 0.0)) {
        return Err(Error::Search(format!(
            "loss {l} and cost {t} must both be positive"
        )));
    }
    if scores.len() < 2 {
        return Ok(0.0);
    }
    let range = |f: fn(&(f64, f64)) -> f64| {
        let lo = scores.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = scores.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        (hi / lo).ln()
    };
    let (l, t) = (range(|s| s.0), range(|s| s.1));
    Ok(if l == 0.0 || t == 0.0 { 0.0 } else { l / t })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaPolicy {
    Balanced,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default = "default_alpha")]
    pub alpha: AlphaPolicy,
    /// Training samples used to score candidates.
    #[serde(default = "default_eval_subset")]
    pub eval_subset: usize,
    /// Seed fixing which samples form the subset.
    #[serde(default)]
    pub eval_seed: u64,
}

fn default_alpha() -> AlphaPolicy {
    AlphaPolicy::Balanced
}

fn default_eval_subset() -> usize {
    250
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            eval_subset: default_eval_subset(),
            eval_seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_subset == 0 {
            return Err(Error::Config("search.eval_subset must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub spec: SubNetSpec,
    pub loss: f64,
    pub cost: f64,
    pub score: f64,
}

/// Outcome of one stage's traversal.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSearch {
    pub alpha: f64,
    pub scores: Vec<CandidateScore>,
    pub chosen: SubNetSpec,
}

/// Index of the lowest score; ties go to the lower cost, then to the
/// earlier candidate.
pub fn argmin_score(scores: &[CandidateScore]) -> Option<usize> {
    (0..scores.len()).min_by(|&a, &b| {
        let (x, y) = (&scores[a], &scores[b]);
        x.score
            .total_cmp(&y.score)
            .then(x.cost.total_cmp(&y.cost))
            .then(a.cmp(&b))
    })
}

/// Scores every candidate and picks the minimum of `L · T^α`.
///
/// `loss` is only called when there is more than one candidate.
pub fn search_stage(
    candidates: &[SubNetSpec],
    cost: impl Fn(SubNetSpec) -> f64,
    mut loss: impl FnMut(SubNetSpec) -> Result<f64>,
    policy: AlphaPolicy,
) -> Result<StageSearch> {
    match candidates {
        [] => Err(Error::Search("empty candidate set".into())),
        [only] => Ok(StageSearch {
            alpha: 0.0,
            scores: Vec::new(),
            chosen: *only,
        }),
        _ => {
            let mut pairs = Vec::with_capacity(candidates.len());
            for &spec in candidates {
                pairs.push((loss(spec)?, cost(spec)));
            }
            let alpha = match policy {
                AlphaPolicy::Balanced => compute_alpha(&pairs)?,
                AlphaPolicy::Fixed(a) => {
                    compute_alpha(&pairs)?;
                    a
                }
            };
            let scores: Vec<CandidateScore> = candidates
                .iter()
                .zip(&pairs)
                .map(|(&spec, &(l, t))| CandidateScore {
                    spec,
                    loss: l,
                    cost: t,
                    score: l * t.powf(alpha),
                })
                .collect();
            let chosen = scores[argmin_score(&scores).expect("non-empty")].spec;
            Ok(StageSearch {
                alpha,
                scores,
                chosen,
            })
        }
    }
}
