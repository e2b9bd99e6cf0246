//! Toy vision transformer executable at any [`SubNetSpec`].
//!
//! Depth is elastic through an ordered list of blocks; the patch count is
//! elastic through input down-sampling plus positional-table resampling.

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, RowMix, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{block_prefix, ParamStore};

pub const LAYERNORM_EPS: f32 = 1e-6;
pub const INIT_STD: f32 = 0.02;

/// A point in the growth space: `depth` transformer blocks over a
/// `grid × grid` patch lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubNetSpec {
    pub depth: usize,
    pub grid: usize,
}

impl SubNetSpec {
    pub const fn new(depth: usize, grid: usize) -> Self {
        Self { depth, grid }
    }

    /// Componentwise `self ≤ other`.
    pub fn within(&self, other: &SubNetSpec) -> bool {
        self.depth <= other.depth && self.grid <= other.grid
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid + 1
    }
}

impl fmt::Display for SubNetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(depth={}, grid={})", self.depth, self.grid)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub max_depth: usize,
    pub max_grid: usize,
    /// Patch side in pixels.
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: f32,
    pub classes: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
}

fn default_channels() -> usize {
    3
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.max_depth == 0 || self.max_grid == 0 || self.patch == 0 {
            return bad("max_depth, max_grid and patch must be positive".into());
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.mlp_ratio <= 0.0 || self.classes == 0 || self.channels == 0 {
            return bad("mlp_ratio, classes and channels must be positive".into());
        }
        Ok(())
    }

    pub fn full_spec(&self) -> SubNetSpec {
        SubNetSpec::new(self.max_depth, self.max_grid)
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f32) * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Input side in pixels for a patch grid.
    pub fn side(&self, grid: usize) -> usize {
        grid * self.patch
    }

    pub fn check_spec(&self, spec: SubNetSpec) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::InvalidSpec {
                spec: spec.to_string(),
                reason,
            })
        };
        if spec.depth == 0 || spec.depth > self.max_depth {
            return fail(format!("depth must lie in 1..={}", self.max_depth));
        }
        if spec.grid == 0 || spec.grid > self.max_grid {
            return fail(format!("grid must lie in 1..={}", self.max_grid));
        }
        Ok(())
    }

    /// Scalar count of one transformer block.
    pub fn block_params(&self) -> usize {
        let d = self.embed_dim;
        let h = self.mlp_hidden();
        // two norms, qkv, proj, fc1, fc2
        4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d)
    }

    /// Size measure used to filter stage growth spaces: depth-dependent
    /// parameters plus the positional table.
    pub fn size_measure(&self, spec: SubNetSpec) -> usize {
        spec.depth * self.block_params() + spec.tokens() * self.embed_dim
    }
}

/// Stable 64-bit FNV-1a, used to derive per-tensor seeds.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub(crate) fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut z = seed ^ fnv1a(tag);
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn trunc_normal(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f32 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * INIT_STD;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn block_shapes(cfg: &ModelConfig) -> Vec<(&'static str, Vec<usize>)> {
    let d = cfg.embed_dim;
    let h = cfg.mlp_hidden();
    vec![
        ("norm1.g", vec![d]),
        ("norm1.b", vec![d]),
        ("attn.qkv.w", vec![d, 3 * d]),
        ("attn.qkv.b", vec![3 * d]),
        ("attn.proj.w", vec![d, d]),
        ("attn.proj.b", vec![d]),
        ("norm2.g", vec![d]),
        ("norm2.b", vec![d]),
        ("mlp.fc1.w", vec![d, h]),
        ("mlp.fc1.b", vec![h]),
        ("mlp.fc2.w", vec![h, d]),
        ("mlp.fc2.b", vec![d]),
    ]
}

fn init_tensor(role: &str, shape: &[usize], seed: u64) -> Tensor {
    if role.ends_with(".g") {
        Tensor::full(shape, 1.0)
    } else if role.ends_with(".b") {
        Tensor::zeros(shape)
    } else {
        trunc_normal(shape, seed)
    }
}

/// Freshly initialised parameters of one block, keyed by role.
pub fn init_block(cfg: &ModelConfig, seed: u64, tag: &str) -> Vec<(String, Tensor)> {
    block_shapes(cfg)
        .into_iter()
        .map(|(role, shape)| {
            let t = init_tensor(role, &shape, derive_seed(seed, &format!("{tag}/{role}")));
            (role.to_string(), t)
        })
        .collect()
}

/// Initialises a model for `spec`: truncated-normal (std 0.02) weights,
/// zero biases, unit norm gains. Each tensor draws from its own stream
/// derived from `seed` and its name.
pub fn build_model(cfg: &ModelConfig, spec: SubNetSpec, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    cfg.check_spec(spec)?;
    let d = cfg.embed_dim;
    let mut store = ParamStore::new();
    let stem_in = cfg.channels * cfg.patch * cfg.patch;
    let shared: [(&str, Vec<usize>); 8] = [
        ("patch.w", vec![stem_in, d]),
        ("patch.b", vec![d]),
        ("cls", vec![1, d]),
        ("pos", vec![spec.tokens(), d]),
        ("head.norm.g", vec![d]),
        ("head.norm.b", vec![d]),
        ("head.fc.w", vec![d, cfg.classes]),
        ("head.fc.b", vec![cfg.classes]),
    ];
    for (name, shape) in shared {
        store.insert(name, init_tensor(name, &shape, derive_seed(seed, name)));
    }
    for i in 0..spec.depth {
        let prefix = block_prefix(i);
        for (role, t) in init_block(cfg, seed, &format!("block{i}")) {
            store.insert(format!("{prefix}{role}"), t);
        }
    }
    Ok(store)
}

/// One-dimensional align-corners bilinear taps: for each destination index
/// the two source indices and their weights.
fn linear_taps(src: usize, dst: usize) -> Vec<[(usize, f32); 2]> {
    (0..dst)
        .map(|i| {
            let x = if dst == 1 || src == 1 {
                0.0
            } else {
                (i * (src - 1)) as f64 / (dst - 1) as f64
            };
            let i0 = (x.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let w1 = (x - i0 as f64) as f32;
            [(i0, 1.0 - w1), (i1, w1)]
        })
        .collect()
}

/// Bilinear (align-corners) resampling weights from an `src × src` lattice
/// to a `dst × dst` one, as `(dst_index, src_index, weight)` triples over
/// row-major cells. Zero weights are omitted.
pub fn bilinear_weights(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let taps = linear_taps(src, dst);
    let mut out = Vec::with_capacity(dst * dst * 4);
    for (y, ty) in taps.iter().enumerate() {
        for (x, tx) in taps.iter().enumerate() {
            for &(sy, wy) in ty {
                for &(sx, wx) in tx {
                    let w = wy * wx;
                    if w != 0.0 {
                        out.push((y * dst + x, sy * src + sx, w));
                    }
                }
            }
        }
    }
    out
}

/// Row map taking a `(1 + src², d)` positional table to `(1 + dst², d)`:
/// the class slot is copied, the lattice resampled bilinearly.
pub fn pos_mix(src: usize, dst: usize) -> RowMix {
    let mut entries = vec![(0, 0, 1.0)];
    entries.extend(
        bilinear_weights(src, dst)
            .into_iter()
            .map(|(d, s, w)| (d + 1, s + 1, w)),
    );
    RowMix {
        in_rows: 1 + src * src,
        out_rows: 1 + dst * dst,
        entries,
    }
}

fn square_side(cells: usize) -> Option<usize> {
    let s = (cells as f64).sqrt().round() as usize;
    (s * s == cells).then_some(s)
}

/// Grid side of a positional table of shape `(1 + n², d)`.
pub fn pos_grid(pe: &Tensor) -> Result<usize> {
    let shape = pe.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(shape_err("pos_grid", format!("positional table {shape:?}")));
    }
    square_side(shape[0] - 1).ok_or_else(|| {
        shape_err(
            "interpolate_pos_encoding",
            format!("{} grid rows do not form a square", shape[0] - 1),
        )
    })
}

/// Resamples a positional table from its own grid to `target` (class row copied).
pub fn interpolate_pos_encoding(pe: &Tensor, target: usize) -> Result<Tensor> {
    let src = pos_grid(pe)?;
    if target == 0 {
        return Err(shape_err("interpolate_pos_encoding", "target grid 0"));
    }
    let d = pe.shape()[1];
    let mix = pos_mix(src, target);
    let mut out = vec![0.0f32; mix.out_rows * d];
    let v = pe.data();
    for &(dst, s, w) in &mix.entries {
        for j in 0..d {
            out[dst * d + j] += w * v[s * d + j];
        }
    }
    Tensor::new(vec![mix.out_rows, d], out)
}

/// Bilinear (align-corners, no antialiasing) resize of `[b, c, h, h]` images.
pub fn resize_images(batch: &Tensor, side: usize) -> Result<Tensor> {
    let s = batch.shape();
    if s.len() != 4 || s[2] != s[3] || s[2] == 0 || side == 0 {
        return Err(shape_err(
            "resize_input",
            format!("expected square [b, c, h, h] images and positive target, got {s:?} -> {side}"),
        ));
    }
    let (b, c, src) = (s[0], s[1], s[2]);
    if src == side {
        return Ok(batch.detached());
    }
    let taps = linear_taps(src, side);
    let v = batch.data();
    let mut out = vec![0.0f32; b * c * side * side];
    for plane in 0..b * c {
        let ip = &v[plane * src * src..(plane + 1) * src * src];
        let op = &mut out[plane * side * side..(plane + 1) * side * side];
        for (y, ty) in taps.iter().enumerate() {
            for (x, tx) in taps.iter().enumerate() {
                let mut acc = 0.0;
                for &(sy, wy) in ty {
                    for &(sx, wx) in tx {
                        acc += wy * wx * ip[sy * src + sx];
                    }
                }
                op[y * side + x] = acc;
            }
        }
    }
    Tensor::new(vec![b, c, side, side], out)
}

/// `[b, c, n·p, n·p]` images to `[b, n², c·p·p]` patch rows.
fn patchify(batch: &Tensor, grid: usize, patch: usize) -> Tensor {
    let s = batch.shape();
    let (b, c, side) = (s[0], s[1], s[2]);
    let v = batch.data();
    let cols = c * patch * patch;
    let mut out = Vec::with_capacity(b * grid * grid * cols);
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                for ch in 0..c {
                    for py in 0..patch {
                        let row = ((bi * c + ch) * side + gy * patch + py) * side + gx * patch;
                        out.extend_from_slice(&v[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, grid * grid, cols], out).expect("patch layout")
}

/// Stochastic-depth settings for one training step.
#[derive(Clone, Copy, Debug)]
pub struct DropPath {
    pub prob: f32,
    pub seed: u64,
}

/// Builds the forward pass on `g`. `blocks` lists the store's block indices
/// to execute, in order; the positional table is resampled to `grid` when
/// its own grid differs.
pub struct Forward<'a> {
    cfg: &'a ModelConfig,
    params: &'a ParamStore,
    vars: HashMap<String, Var>,
    trainable: bool,
}

impl<'a> Forward<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ParamStore, trainable: bool) -> Self {
        Self {
            cfg,
            params,
            vars: HashMap::new(),
            trainable,
        }
    }

    fn p(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let v = if self.trainable {
            g.param(name, t)
        } else {
            g.input(t)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn linear(&mut self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(g, &format!("{prefix}.w"))?;
        let b = self.p(g, &format!("{prefix}.b"))?;
        g.linear(x, w, b)
    }

    fn norm(&mut self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gam = self.p(g, &format!("{prefix}.g"))?;
        let bet = self.p(g, &format!("{prefix}.b"))?;
        g.layernorm(x, gam, bet, LAYERNORM_EPS)
    }

    fn residual(
        &mut self,
        g: &mut Graph,
        x: Var,
        branch: Var,
        rezero: Option<Var>,
        drop: Option<(f32, &mut ChaCha8Rng)>,
    ) -> Result<Var> {
        let mut y = branch;
        if let Some(s) = rezero {
            y = g.mul_scalar_var(y, s)?;
        }
        if let Some((p, rng)) = drop {
            if p > 0.0 {
                let batch = g.shape(y)[0];
                let keep = 1.0 - p;
                let factors = (0..batch)
                    .map(|_| if rng.gen::<f32>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                y = g.scale_leading(y, factors)?;
            }
        }
        g.add(x, y)
    }

    fn attention(&mut self, g: &mut Graph, h: Var, prefix: &str) -> Result<Var> {
        let qkv = self.linear(g, h, &format!("{prefix}attn.qkv"))?;
        let o = g.attention(qkv, self.cfg.heads)?;
        self.linear(g, o, &format!("{prefix}attn.proj"))
    }

    /// Records the forward pass and returns the `[batch, classes]` logits.
    pub fn run(
        &mut self,
        g: &mut Graph,
        blocks: &[usize],
        grid: usize,
        images: &Tensor,
        drop_path: Option<DropPath>,
    ) -> Result<Var> {
        let cfg = self.cfg;
        if blocks.is_empty() {
            return Err(Error::InvalidSpec {
                spec: SubNetSpec::new(0, grid).to_string(),
                reason: "depth must be at least 1".into(),
            });
        }
        let s = images.shape();
        let side = cfg.side(grid);
        if s.len() != 4 || s[1] != cfg.channels || s[2] != side || s[3] != side {
            return Err(shape_err(
                "forward",
                format!(
                    "images {s:?} do not match grid {grid} (expected [b, {}, {side}, {side}])",
                    cfg.channels
                ),
            ));
        }
        let patches = patchify(images, grid, cfg.patch);
        let x = g.input(&patches);
        let x = self.linear(g, x, "patch")?;
        let cls = self.p(g, "cls")?;
        let x = g.prepend_row(x, cls)?;
        let mut pos = self.p(g, "pos")?;
        let own = square_side(g.shape(pos)[0] - 1)
            .ok_or_else(|| shape_err("forward", "positional table is not square"))?;
        if own != grid {
            pos = g.mix_rows(pos, Rc::new(pos_mix(own, grid)))?;
        }
        let mut x = g.add_bcast(x, pos)?;

        let mut rng = drop_path.map(|d| (d.prob, ChaCha8Rng::seed_from_u64(d.seed)));
        for &bi in blocks {
            let prefix = block_prefix(bi);
            let rezero_name = format!("{prefix}rezero");
            let rezero = if self.params.contains(&rezero_name) {
                Some(self.p(g, &rezero_name)?)
            } else {
                None
            };
            let h = self.norm(g, x, &format!("{prefix}norm1"))?;
            let a = self.attention(g, h, &prefix)?;
            let drop = rng.as_mut().map(|(p, r)| (*p, r));
            x = self.residual(g, x, a, rezero, drop)?;

            let h = self.norm(g, x, &format!("{prefix}norm2"))?;
            let h = self.linear(g, h, &format!("{prefix}mlp.fc1"))?;
            let h = g.gelu(h);
            let m = self.linear(g, h, &format!("{prefix}mlp.fc2"))?;
            let drop = rng.as_mut().map(|(p, r)| (*p, r));
            x = self.residual(g, x, m, rezero, drop)?;
        }
        let c = g.select_row(x, 0)?;
        let c = self.norm(g, c, "head.norm")?;
        self.linear(g, c, "head.fc")
    }
}

/// Evaluates `spec` on a batch: blocks `0..spec.depth` of `params`.
pub fn forward(
    cfg: &ModelConfig,
    params: &ParamStore,
    spec: SubNetSpec,
    images: &Tensor,
) -> Result<Tensor> {
    if spec.depth == 0 {
        return Err(Error::InvalidSpec {
            spec: spec.to_string(),
            reason: "depth must be at least 1".into(),
        });
    }
    if spec.depth > params.depth() {
        return Err(Error::InvalidSpec {
            spec: spec.to_string(),
            reason: format!("store only holds {} blocks", params.depth()),
        });
    }
    let blocks: Vec<usize> = (0..spec.depth).collect();
    forward_blocks(cfg, params, &blocks, spec.grid, images)
}

/// Evaluates an explicit block list without recording gradients.
pub fn forward_blocks(
    cfg: &ModelConfig,
    params: &ParamStore,
    blocks: &[usize],
    grid: usize,
    images: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let logits = Forward::new(cfg, params, false).run(&mut g, blocks, grid, images, None)?;
    Ok(g.to_tensor(logits))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            max_depth: 4,
            max_grid: 4,
            patch: 2,
            embed_dim: 32,
            heads: 4,
            mlp_ratio: 2.0,
            classes: 10,
            channels: 3,
        }
    }

    fn images(b: usize, side: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..b * 3 * side * side).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![b, 3, side, side], data).unwrap()
    }

    #[test]
    fn full_model_and_pos_shape() {
        let cfg = tiny();
        let full = build_model(&cfg, cfg.full_spec(), 0).unwrap();
        assert_eq!(full.depth(), 4);
        let small = build_model(&cfg, SubNetSpec::new(2, 4), 0).unwrap();
        assert_eq!(small.get("pos").unwrap().shape(), &[17, 32]);
        assert_eq!(small.depth(), 2);
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = tiny();
        let a = build_model(&cfg, SubNetSpec::new(3, 3), 9).unwrap();
        let b = build_model(&cfg, SubNetSpec::new(3, 3), 9).unwrap();
        let c = build_model(&cfg, SubNetSpec::new(3, 3), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn out_of_bounds_spec_rejected() {
        let cfg = tiny();
        assert!(build_model(&cfg, SubNetSpec::new(5, 2), 0).is_err());
        assert!(build_model(&cfg, SubNetSpec::new(1, 0), 0).is_err());
    }

    #[test]
    fn block_param_count_matches_store() {
        let cfg = tiny();
        let s = build_model(&cfg, SubNetSpec::new(1, 1), 0).unwrap();
        let counted: usize = s.block(0).iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(counted, cfg.block_params());
    }

    #[test]
    fn forward_shapes_and_purity() {
        let cfg = tiny();
        let p = build_model(&cfg, cfg.full_spec(), 1).unwrap();
        let x = images(2, 8, 3);
        let a = forward(&cfg, &p, cfg.full_spec(), &x).unwrap();
        assert_eq!(a.shape(), &[2, 10]);
        let b = forward(&cfg, &p, cfg.full_spec(), &x).unwrap();
        assert_eq!(a, b);
        assert!(forward(&cfg, &p, SubNetSpec::new(0, 4), &x).is_err());
        assert!(forward(&cfg, &p, SubNetSpec::new(4, 3), &x).is_err());
    }

    #[test]
    fn identity_resize() {
        let x = images(2, 6, 1);
        let y = resize_images(&x, 6).unwrap();
        assert!(x.max_abs_diff(&y) <= 1e-6);
    }

    #[test]
    fn constant_image_stays_constant() {
        let x = Tensor::full(&[1, 3, 5, 5], 0.25);
        for side in [2, 3, 8, 11] {
            let y = resize_images(&x, side).unwrap();
            assert!(y.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
        }
    }

    #[test]
    fn checkerboard_corners_survive_upsampling() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let y = resize_images(&x, 4).unwrap();
        let v = y.data();
        assert_eq!((v[0], v[3], v[12], v[15]), (0.0, 1.0, 1.0, 0.0));
        // direct evaluation of the bilinear formula at (1/3, 1/3) in source units
        let (u, w) = (1.0f32 / 3.0, 1.0f32 / 3.0);
        let expect = (1.0 - u) * w + u * (1.0 - w);
        assert!((v[5] - expect).abs() < 1e-6);
    }

    #[test]
    fn pos_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 5;
        let data = (0..17 * d).map(|_| rng.gen::<f32>()).collect();
        let pe = Tensor::new(vec![17, d], data).unwrap();
        let same = interpolate_pos_encoding(&pe, 4).unwrap();
        assert!(pe.max_abs_diff(&same) <= 1e-6);

        let mut c = Tensor::full(&[10, d], 0.5);
        c.data_mut()[..d].iter_mut().for_each(|v| *v = -3.0);
        let up = interpolate_pos_encoding(&c, 7).unwrap();
        assert_eq!(up.shape(), &[50, d]);
        assert!(up.data()[..d].iter().all(|&v| v == -3.0));
        assert!(up.data()[d..].iter().all(|v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn pos_ramp_stays_monotone() {
        // ramp along x on a 2×2 lattice, class row arbitrary
        let pe = Tensor::new(vec![5, 1], vec![9.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let up = interpolate_pos_encoding(&pe, 4).unwrap();
        let v = &up.data()[1..];
        for y in 0..4 {
            let row = &v[y * 4..y * 4 + 4];
            // bilinear oracle on the 2→4 case: x/3 for x = 0..3
            for (x, &val) in row.iter().enumerate() {
                assert!((val - x as f32 / 3.0).abs() < 1e-6);
            }
        }
        assert_eq!(up.data()[0], 9.0);
    }

    #[test]
    fn non_square_pos_rejected() {
        let pe = Tensor::zeros(&[6, 2]);
        assert!(interpolate_pos_encoding(&pe, 3).is_err());
    }

    #[test]
    fn forward_accepts_foreign_pos_grid() {
        let cfg = tiny();
        let p = build_model(&cfg, SubNetSpec::new(2, 2), 1).unwrap();
        let y = forward(&cfg, &p, SubNetSpec::new(2, 4), &images(1, 8, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 10]);
        assert!(forward(&cfg, &p, SubNetSpec::new(2, 3), &images(1, 8, 0)).is_err());
    }
}
