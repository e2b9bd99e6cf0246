//! Weight-nested supernet over one stage's candidate specs.
//!
//! The supernet stores parameters for the largest candidate only. A smaller
//! depth activates the always-active layers (the copies of the base
//! network's blocks) plus a prefix of the optional layers; a smaller grid
//! reads the stored positional table through bilinear resampling.

use std::collections::BTreeSet;

use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::growth::{
    depth_plan, grow_with_provenance, GrowthOperatorKind, LayerSource, MomentumState, Provenance,
};
use crate::model::{build_model, forward_blocks, interpolate_pos_encoding, pos_grid, ModelConfig, SubNetSpec};
use crate::params::{block_index, block_prefix, rename_block, ParamStore};

/// Layers of the supernet executed for one spec.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActiveView {
    pub spec: SubNetSpec,
    /// Block indices into the supernet store, ascending (execution order).
    pub layers: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ElasticSupernet {
    pub params: ParamStore,
    base: SubNetSpec,
    largest: SubNetSpec,
    always: Vec<bool>,
    /// Optional layers in the order they switch on as depth grows.
    activation: Vec<usize>,
    candidates: Vec<SubNetSpec>,
}

fn check_candidates(base: SubNetSpec, candidates: &[SubNetSpec]) -> Result<SubNetSpec> {
    if candidates.is_empty() {
        return Err(Error::Search("empty candidate set".into()));
    }
    if let Some(bad) = candidates.iter().find(|c| !base.within(c)) {
        return Err(Error::InvalidSpec {
            spec: bad.to_string(),
            reason: format!("smaller than the base spec {base}"),
        });
    }
    Ok(SubNetSpec::new(
        candidates.iter().map(|c| c.depth).max().unwrap_or(base.depth),
        candidates.iter().map(|c| c.grid).max().unwrap_or(base.grid),
    ))
}

/// Layer roles for growing `small` to `large` blocks under `kind`: the
/// always-active flags and the activation order of the remaining layers.
/// Later copies of a source switch on after earlier ones; among equals the
/// layer nearer the classifier goes first.
fn layer_roles(kind: GrowthOperatorKind, small: usize, large: usize) -> Result<(Vec<bool>, Vec<usize>)> {
    let plan = depth_plan(kind, small, large)?;
    let always: Vec<bool> = plan.iter().map(|l| !l.new).collect();
    let mut copies = vec![0usize; small];
    let mut optional = Vec::new();
    // walk from the classifier end so copy ranks follow depth_plan
    for (from_top, j) in (0..large).rev().enumerate() {
        let rank = match plan[j].source {
            LayerSource::Layer(s) => {
                copies[s] += 1;
                copies[s] - 1
            }
            LayerSource::Fresh => 1,
        };
        if plan[j].new {
            optional.push((rank, from_top, j));
        }
    }
    optional.sort_unstable();
    Ok((always, optional.into_iter().map(|(_, _, j)| j).collect()))
}

impl ElasticSupernet {
    /// Grows `base_params` (laid out for `base`) into a supernet over
    /// `candidates` with operator `kind`. When the largest candidate equals
    /// the base the parameters are taken over unchanged.
    ///
    /// Returns the supernet and the provenance of its tensors.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        cfg: &ModelConfig,
        base_params: &ParamStore,
        base: SubNetSpec,
        candidates: &[SubNetSpec],
        kind: GrowthOperatorKind,
        momentum: Option<&MomentumState>,
        seed: u64,
    ) -> Result<(Self, Provenance)> {
        let largest = check_candidates(base, candidates)?;
        let (params, prov) = if largest == base {
            let prov = base_params
                .names()
                .map(|n| (n.to_string(), Some(n.to_string())))
                .collect();
            (base_params.detached(), prov)
        } else {
            grow_with_provenance(kind, cfg, base_params, base, largest, momentum, seed)?
        };
        let (always, activation) = layer_roles(kind, base.depth, largest.depth)?;
        Ok((
            Self {
                params,
                base,
                largest,
                always,
                activation,
                candidates: candidates.to_vec(),
            },
            prov,
        ))
    }

    /// Randomly initialised supernet for the first stage. Layer roles follow
    /// interpolation growth from the smallest depth.
    pub fn from_scratch(
        cfg: &ModelConfig,
        base: SubNetSpec,
        candidates: &[SubNetSpec],
        seed: u64,
    ) -> Result<Self> {
        let largest = check_candidates(base, candidates)?;
        let params = build_model(cfg, largest, seed)?;
        let (always, activation) =
            layer_roles(GrowthOperatorKind::Interpolation, base.depth, largest.depth)?;
        Ok(Self {
            params,
            base,
            largest,
            always,
            activation,
            candidates: candidates.to_vec(),
        })
    }

    pub fn base(&self) -> SubNetSpec {
        self.base
    }

    pub fn largest(&self) -> SubNetSpec {
        self.largest
    }

    pub fn candidates(&self) -> &[SubNetSpec] {
        &self.candidates
    }

    /// Block indices that every candidate executes.
    pub fn always_active(&self) -> Vec<usize> {
        (0..self.always.len()).filter(|&j| self.always[j]).collect()
    }

    pub fn select(&self, spec: SubNetSpec) -> Result<ActiveView> {
        if !self.candidates.contains(&spec) {
            return Err(Error::NotInSpace(spec.to_string()));
        }
        let extra = spec.depth - self.base.depth;
        let mut layers = self.always_active();
        layers.extend_from_slice(&self.activation[..extra]);
        layers.sort_unstable();
        Ok(ActiveView { spec, layers })
    }

    /// Uniform draw over the candidates.
    pub fn sample_subnet(&self, rng: &mut impl Rng) -> SubNetSpec {
        self.candidates[rng.gen_range(0..self.candidates.len())]
    }

    /// Parameter names read by a view.
    pub fn view_names(&self, view: &ActiveView) -> BTreeSet<String> {
        let active: BTreeSet<usize> = view.layers.iter().copied().collect();
        self.params
            .names()
            .filter(|n| block_index(n).map_or(true, |b| active.contains(&b)))
            .map(str::to_string)
            .collect()
    }

    /// Standalone parameters of `spec` taken from the supernet.
    pub fn export_subnet(&self, spec: SubNetSpec) -> Result<(ParamStore, Provenance)> {
        self.export_from(&self.params, spec)
    }

    /// Exports `spec` from any store laid out like the supernet, such as its
    /// momentum copy. Active blocks are renumbered from zero and the
    /// positional table is resampled to the spec's grid.
    pub fn export_from(&self, store: &ParamStore, spec: SubNetSpec) -> Result<(ParamStore, Provenance)> {
        let view = self.select(spec)?;
        let mut out = ParamStore::new();
        let mut prov = Provenance::new();
        for (name, t) in store.iter().filter(|(n, _)| block_index(n).is_none()) {
            if name == "pos" && pos_grid(t)? != spec.grid {
                out.insert(name, interpolate_pos_encoding(t, spec.grid)?);
                prov.insert(name.to_string(), None);
            } else {
                out.insert(name, t.detached());
                prov.insert(name.to_string(), Some(name.to_string()));
            }
        }
        for (j, &layer) in view.layers.iter().enumerate() {
            let prefix = block_prefix(layer);
            for (role, t) in store.block(layer) {
                let src = format!("{prefix}{role}");
                let dst = rename_block(&src, j).expect("block name");
                out.insert(dst.clone(), t.detached());
                prov.insert(dst, Some(src));
            }
        }
        Ok((out, prov))
    }

    /// Inference logits of `spec` on images already sized for its grid.
    pub fn forward(&self, cfg: &ModelConfig, spec: SubNetSpec, images: &Tensor) -> Result<Tensor> {
        let view = self.select(spec)?;
        forward_blocks(cfg, &self.params, &view.layers, spec.grid, images)
    }
}
