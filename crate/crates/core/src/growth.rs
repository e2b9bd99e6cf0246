//! Growth operators: map a smaller network's parameters onto a larger one.
//!
//! Layer indices handed to [`depth_map`] count from the classifier end:
//! index 0 is the block right before the head. Parameter stores number
//! blocks from the input side, so [`depth_plan`] does the conversion and is
//! the only place that knows about both conventions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{derive_seed, init_block, interpolate_pos_encoding, pos_grid, ModelConfig, SubNetSpec};
use crate::params::{block_index, block_prefix, rename_block, ParamStore};

/// Momentum coefficient of the EMA network.
pub const DEFAULT_MOMENTUM: f32 = 0.998;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrowthOperatorKind {
    RandInit,
    Stacking,
    Interpolation,
    /// Interpolation plus zero-initialised residual scales on the new blocks.
    Identity,
    /// Interpolation applied to the momentum network.
    MoGrow,
}

impl GrowthOperatorKind {
    pub const ALL: [GrowthOperatorKind; 5] = [
        Self::RandInit,
        Self::Stacking,
        Self::Interpolation,
        Self::Identity,
        Self::MoGrow,
    ];

    fn depth_rule(self) -> GrowthOperatorKind {
        match self {
            Self::Identity | Self::MoGrow => Self::Interpolation,
            k => k,
        }
    }
}

impl fmt::Display for GrowthOperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RandInit => "randinit",
            Self::Stacking => "stacking",
            Self::Interpolation => "interpolation",
            Self::Identity => "identity",
            Self::MoGrow => "mogrow",
        })
    }
}

impl FromStr for GrowthOperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown growth operator `{s}`")))
    }
}

/// Where a target layer's parameters come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSource {
    Layer(usize),
    Fresh,
}

/// Source of target layer `i` when growing from `small` to `large` layers.
/// Both `i` and the returned index count from the classifier end.
pub fn depth_map(kind: GrowthOperatorKind, i: usize, small: usize, large: usize) -> Result<LayerSource> {
    if small > large {
        return Err(Error::Shrink {
            from: format!("{small} layers"),
            to: format!("{large} layers"),
        });
    }
    if small == 0 || i >= large {
        return Err(Error::Config(format!(
            "depth_map: layer {i} of {large} grown from {small}"
        )));
    }
    Ok(match kind.depth_rule() {
        GrowthOperatorKind::RandInit if i < small => LayerSource::Layer(i),
        GrowthOperatorKind::RandInit => LayerSource::Fresh,
        GrowthOperatorKind::Stacking => LayerSource::Layer(i % small),
        // nearest neighbour for any ratio; i / small when large == 2 * small
        _ => LayerSource::Layer(i * small / large),
    })
}

/// One entry per target block in execution order (input side first), with
/// sources also in execution order. `new` marks blocks that duplicate an
/// earlier (classifier-side) copy of the same source, or are fresh.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlannedLayer {
    pub source: LayerSource,
    pub new: bool,
}

pub fn depth_plan(kind: GrowthOperatorKind, small: usize, large: usize) -> Result<Vec<PlannedLayer>> {
    let mut seen = vec![false; small];
    let mut by_classifier = Vec::with_capacity(large);
    for i in 0..large {
        let src = depth_map(kind, i, small, large)?;
        let (source, new) = match src {
            LayerSource::Layer(s) => {
                let new = std::mem::replace(&mut seen[s], true);
                (LayerSource::Layer(small - 1 - s), new)
            }
            LayerSource::Fresh => (LayerSource::Fresh, true),
        };
        by_classifier.push(PlannedLayer { source, new });
    }
    by_classifier.reverse();
    Ok(by_classifier)
}

/// Per-name origin of a grown store: `Some(source_name)` when the tensor
/// carries an existing one over unchanged in shape, `None` when it is fresh,
/// resampled, or a duplicate of a layer whose original copy carries over.
pub type Provenance = BTreeMap<String, Option<String>>;

/// EMA copy of the online parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState {
    pub params: ParamStore,
    pub momentum: f32,
}

impl MomentumState {
    pub fn new(online: &ParamStore, momentum: f32) -> Self {
        Self {
            params: online.detached(),
            momentum,
        }
    }

    /// `ω̃ ← m·ω̃ + (1 − m)·ω`, evaluated as `ω̃ + (1 − m)(ω − ω̃)` so that a
    /// converged pair stays bit-identical.
    pub fn update(&mut self, online: &ParamStore) -> Result<()> {
        if !self.params.same_layout(online) {
            let bad = self
                .params
                .iter()
                .find(|(n, t)| online.get(n).map(|o| o.shape()) != Some(t.shape()))
                .map(|(n, _)| n.to_string())
                .or_else(|| online.names().find(|n| !self.params.contains(n)).map(str::to_string))
                .unwrap_or_default();
            return Err(Error::Shape {
                op: "momentum_update",
                detail: format!("tensor `{bad}` differs between momentum and online networks"),
            });
        }
        let m = self.momentum;
        let step = 1.0 - m;
        for (name, ema) in self.params.iter_mut() {
            let src = online.get(name).expect("layouts match").data();
            let dst = ema.data_mut();
            if m == 0.0 {
                dst.copy_from_slice(src);
            } else if step != 0.0 {
                for (e, &w) in dst.iter_mut().zip(src) {
                    *e += step * (w - *e);
                }
            }
        }
        Ok(())
    }

    /// Restarts the EMA as an exact copy of `online` (after a growth event).
    pub fn rebuild(&mut self, online: &ParamStore) {
        self.params = online.detached();
    }
}

/// Grows `small` (laid out for `from`) to `to` with operator `kind`.
///
/// Shared parameters are copied; the positional table is resampled to the
/// target grid; blocks follow [`depth_plan`]. Fresh blocks draw from streams
/// derived from `seed`.
pub fn grow(
    kind: GrowthOperatorKind,
    cfg: &ModelConfig,
    small: &ParamStore,
    from: SubNetSpec,
    to: SubNetSpec,
    momentum: Option<&MomentumState>,
    seed: u64,
) -> Result<ParamStore> {
    grow_with_provenance(kind, cfg, small, from, to, momentum, seed).map(|(p, _)| p)
}

pub fn grow_with_provenance(
    kind: GrowthOperatorKind,
    cfg: &ModelConfig,
    small: &ParamStore,
    from: SubNetSpec,
    to: SubNetSpec,
    momentum: Option<&MomentumState>,
    seed: u64,
) -> Result<(ParamStore, Provenance)> {
    cfg.check_spec(from)?;
    cfg.check_spec(to)?;
    if !from.within(&to) {
        return Err(Error::Shrink {
            from: from.to_string(),
            to: to.to_string(),
        });
    }
    let source = match kind {
        GrowthOperatorKind::MoGrow => &momentum.ok_or(Error::MissingMomentum)?.params,
        _ => small,
    };
    if source.depth() < from.depth {
        return Err(Error::InvalidSpec {
            spec: from.to_string(),
            reason: format!("source store only holds {} blocks", source.depth()),
        });
    }

    let mut out = ParamStore::new();
    let mut prov = Provenance::new();
    for (name, t) in source.iter().filter(|(n, _)| block_index(n).is_none()) {
        if name == "pos" && pos_grid(t)? != to.grid {
            out.insert(name, interpolate_pos_encoding(t, to.grid)?);
            prov.insert(name.to_string(), None);
        } else {
            out.insert(name, t.detached());
            prov.insert(name.to_string(), Some(name.to_string()));
        }
    }

    for (j, layer) in depth_plan(kind, from.depth, to.depth)?.into_iter().enumerate() {
        let prefix = block_prefix(j);
        match layer.source {
            LayerSource::Layer(s) => {
                for (role, t) in source.block(s) {
                    let src_name = format!("{}{role}", block_prefix(s));
                    let name = rename_block(&src_name, j).expect("block name");
                    out.insert(name.clone(), t.detached());
                    prov.insert(name, (!layer.new).then_some(src_name));
                }
            }
            LayerSource::Fresh => {
                let fresh_seed = derive_seed(seed, &format!("grow/{from}/{to}"));
                for (role, t) in init_block(cfg, fresh_seed, &format!("block{j}")) {
                    let name = format!("{prefix}{role}");
                    prov.insert(name.clone(), None);
                    out.insert(name, t);
                }
            }
        }
        if kind == GrowthOperatorKind::Identity && layer.new {
            let name = format!("{prefix}rezero");
            out.insert(name.clone(), Tensor::scalar(0.0));
            prov.insert(name, None);
        }
    }
    Ok((out, prov))
}
