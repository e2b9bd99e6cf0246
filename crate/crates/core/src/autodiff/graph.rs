//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Parameters enter the tape by name through [`Graph::param`]; after
//! [`Graph::backward`] their gradients are handed back as [`Grads`], which
//! the caller folds into a [`ParamStore`]. Anything entered through
//! [`Graph::input`] is treated as a constant and never receives a gradient.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{numel, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sparse linear map between row sets: `out[dst] += weight * in[src]`.
///
/// Used to resample positional-encoding tables; gradients flow through the
/// transpose.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMix {
    pub in_rows: usize,
    pub out_rows: usize,
    pub entries: Vec<(usize, usize, f32)>,
}

enum Op {
    Input,
    Param(String),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
        shared: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<f32>,
    },
    Add(Var, Var),
    AddBcast(Var, Var),
    Mul(Var, Var),
    MulScalarVar(Var, Var),
    Scale(Var, f32),
    ScaleLeading(Var, Rc<Vec<f32>>),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    IndexFirst(Var, usize),
    PrependRow(Var, Var),
    SelectRow(Var, usize),
    MixRows(Var, Rc<RowMix>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
///
/// A graph can be [`reset`](Graph::reset) and reused; buffers of the
/// previous tape are then recycled instead of freshly allocated.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    pool: RefCell<Vec<Vec<f32>>>,
}

/// Parameter gradients produced by one backward pass, in tape order.
#[derive(Debug, Default)]
pub struct Grads {
    params: Vec<(String, Vec<f32>)>,
}

impl Grads {
    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    /// Adds every gradient into the matching store tensor.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, g) in &self.params {
            store
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?
                .accumulate_grad(g)?;
        }
        Ok(())
    }
}

const SQRT_2_OVER_PI: f32 = 0.797_884_6;

/// Polynomial `exp` (Cephes coefficients, ~1 ulp on the reduced range).
/// Branch-free so loops over it vectorise.
#[inline]
pub(crate) fn exp(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0;
    let x = x.clamp(-87.0, 88.0);
    let shifted = x * LOG2E + ROUND;
    let n = shifted - ROUND;
    // integer part read straight from the mantissa of `shifted`
    let ni = shifted.to_bits().wrapping_sub(ROUND.to_bits());
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.987_569_1e-4;
    let p = p * r + 1.398_199_9e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_6e-2;
    let p = p * r + 1.666_666_5e-1;
    let p = p * r + 5.000_000_1e-1;
    let y = p * r * r + r + 1.0;
    y * f32::from_bits(ni.wrapping_add(127) << 23)
}
const GELU_COEF: f32 = 0.044_715;

fn tanh(u: f32) -> f32 {
    1.0 - 2.0 / (1.0 + exp(2.0 * u))
}

fn gelu(x: f32) -> f32 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + tanh(u))
}

fn gelu_grad(x: f32) -> f32 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// `c = a · b + beta · c` on strided views; `c` is contiguous row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    sa: (usize, usize),
    b: &[f32],
    sb: (usize, usize),
    c: &mut [f32],
    beta: f32,
) {
    gemm_strided(m, k, n, a, sa, b, sb, c, (n, 1), beta);
}

#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    (rsc, csc): (usize, usize),
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every strided access inside the
    // slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Visits every element of a tensor of shape `shape` permuted by `perm`,
/// yielding `(output_index, input_index)` pairs in output order.
fn for_each_permuted(shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for dst in 0..total {
        f(dst, src);
        for d in (0..nd).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears the tape, keeping its buffers for reuse.
    pub fn reset(&mut self) {
        let nodes = std::mem::take(&mut self.nodes);
        let keep = (4 * nodes.len()).max(256);
        let pool = self.pool.get_mut();
        for node in nodes {
            pool.push(node.value);
            match node.op {
                Op::Attention { probs, .. } | Op::CrossEntropy { probs, .. } => pool.push(probs),
                Op::LayerNorm { xhat, rstd, .. } => {
                    pool.push(xhat);
                    pool.push(rstd);
                }
                _ => {}
            }
        }
        // Buffers that entered from outside the pool would otherwise pile up.
        if pool.len() > keep {
            pool.sort_unstable_by_key(|b| std::cmp::Reverse(b.capacity()));
            pool.truncate(keep);
        }
    }

    /// Returns gradient buffers to the pool once they have been consumed.
    pub fn recycle(&self, grads: Grads) {
        let mut pool = self.pool.borrow_mut();
        pool.extend(grads.params.into_iter().map(|(_, g)| g));
    }

    /// Empty buffer with capacity for `n` values, reused when possible.
    fn buffer(&self, n: usize) -> Vec<f32> {
        let mut pool = self.pool.borrow_mut();
        let best = pool
            .iter()
            .enumerate()
            .filter(|(_, b)| b.capacity() >= n)
            .min_by_key(|(_, b)| b.capacity())
            .map(|(i, _)| i);
        match best {
            Some(i) => {
                let mut b = pool.swap_remove(i);
                b.clear();
                b
            }
            None => Vec::with_capacity(n),
        }
    }

    fn zeros(&self, n: usize) -> Vec<f32> {
        let mut b = self.buffer(n);
        b.resize(n, 0.0);
        b
    }

    fn copied(&self, src: &[f32]) -> Vec<f32> {
        let mut b = self.buffer(src.len());
        b.extend_from_slice(src);
        b
    }

    fn filled(&self, it: impl ExactSizeIterator<Item = f32>) -> Vec<f32> {
        let mut b = self.buffer(it.len());
        b.extend(it);
        b
    }

    fn give_back(&self, b: Vec<f32>) {
        self.pool.borrow_mut().push(b);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), self.copied(t.data()), Op::Input, false)
    }

    pub fn input_owned(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(shape_err("input", format!("shape {:?} vs {} values", shape, data.len())));
        }
        Ok(self.push(shape, data, Op::Input, false))
    }

    /// Trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            self.copied(t.data()),
            Op::Param(name.to_string()),
            true,
        )
    }

    /// `a · b` (or `a · bᵀ` with `trans_b`) over the last two axes.
    ///
    /// `a` is `[.., m, k]`. `b` is either a shared 2-D matrix or carries the
    /// same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}: need rank >= 2")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (bk, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let shared = sb.len() == 2;
        if bk != k || (!shared && sb[..sb.len() - 2] != sa[..sa.len() - 2]) {
            return Err(shape_err(
                "matmul",
                format!("{sa:?} x {sb:?} (trans_b={trans_b})"),
            ));
        }
        let groups = numel(&sa[..sa.len() - 2]);
        let mut out = self.zeros(groups * m * n);
        let bstr = if trans_b { (1, k) } else { (n, 1) };
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            if shared {
                gemm(groups * m, k, n, av, (k, 1), bv, bstr, &mut out, 0.0);
            } else {
                for g in 0..groups {
                    gemm(
                        m,
                        k,
                        n,
                        &av[g * m * k..(g + 1) * m * k],
                        (k, 1),
                        &bv[g * k * n..(g + 1) * k * n],
                        bstr,
                        &mut out[g * m * n..(g + 1) * m * n],
                        0.0,
                    );
                }
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                trans_b,
                groups,
                m,
                k,
                n,
                shared,
            },
            ng,
        ))
    }

    /// Affine map over the last axis: `x · w + b` with `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let k = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sx.is_empty() || sw[0] != k || self.shape(b) != [sw[1]] {
            return Err(shape_err(
                "linear",
                format!("x {sx:?}, w {sw:?}, b {:?}", self.shape(b)),
            ));
        }
        let n = sw[1];
        let rows = numel(&sx) / k.max(1);
        let mut out = self.zeros(rows * n);
        gemm(rows, k, n, self.value(x), (k, 1), self.value(w), (n, 1), &mut out, 0.0);
        let bv = self.value(b);
        for row in out.chunks_mut(n.max(1)) {
            add_into(row, bv);
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(shape, out, Op::Linear { x, w, b }, ng))
    }

    /// Multi-head scaled dot-product attention over packed projections
    /// `qkv: [b, t, 3d]` (query, key, value blocks, heads contiguous within
    /// each). Returns `[b, t, d]` with heads concatenated.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % (3 * heads) != 0 {
            return Err(shape_err(
                "attention",
                format!("qkv {s:?} with {heads} heads"),
            ));
        }
        let (b, t, d3) = (s[0], s[1], s[2]);
        let d = d3 / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let qv = self.value(qkv);
        let mut probs = self.zeros(b * heads * t * t);
        let mut out = self.zeros(b * t * d);
        for bi in 0..b {
            for h in 0..heads {
                let base = bi * t * d3 + h * dh;
                let p = &mut probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                // S = Q Kᵀ
                gemm(t, dh, t, &qv[base..], (d3, 1), &qv[base + d..], (1, d3), p, 0.0);
                for row in p.chunks_mut(t) {
                    let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    for v in row.iter_mut() {
                        *v = exp((*v - mx) * scale);
                    }
                    let z: f32 = row.iter().sum();
                    let inv = 1.0 / z;
                    row.iter_mut().for_each(|v| *v *= inv);
                }
                // O = P V
                gemm_strided(
                    t,
                    t,
                    dh,
                    p,
                    (t, 1),
                    &qv[base + 2 * d..],
                    (d3, 1),
                    &mut out[bi * t * d + h * dh..],
                    (d, 1),
                    0.0,
                );
            }
        }
        let ng = self.ng(qkv);
        Ok(self.push(vec![b, t, d], out, Op::Attention { qkv, heads, probs }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self.filled(self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add_bcast", format!("{sa:?} + {sb:?}")));
        }
        let bv = self.value(b);
        let mut out = self.copied(self.value(a));
        for chunk in out.chunks_mut(bv.len().max(1)) {
            add_into(chunk, bv);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddBcast(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self.filled(self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err(
                "mul_scalar_var",
                format!("scale has shape {:?}, expected one element", self.shape(s)),
            ));
        }
        let c = self.value(s)[0];
        let out = self.filled(self.value(x).iter().map(|v| v * c));
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulScalarVar(x, s), ng))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out = self.filled(self.value(x).iter().map(|v| v * c));
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), ng)
    }

    /// Scales each slice along the first axis by a constant factor.
    pub fn scale_leading(&mut self, x: Var, factors: Vec<f32>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&factors.len()) {
            return Err(shape_err(
                "scale_leading",
                format!("{shape:?} with {} factors", factors.len()),
            ));
        }
        let inner = numel(&shape[1..]);
        let out = self.filled(
            self.value(x)
                .iter()
                .enumerate()
                .map(|(i, v)| v * factors[i / inner.max(1)]),
        );
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::ScaleLeading(x, Rc::new(factors)), ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.filled(self.value(x).iter().map(|&v| gelu(v)));
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| shape_err("softmax", "rank-0 input"))?;
        let mut out = self.copied(self.value(x));
        for row in out.chunks_mut(d.max(1)) {
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = exp(*v - mx);
                s += *v;
            }
            let inv = 1.0 / s;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::Softmax(x), ng))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| shape_err("layernorm", "rank-0 input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layernorm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    shape,
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let rows = xv.len() / d.max(1);
        let mut xhat = self.zeros(xv.len());
        let mut rstd = self.zeros(rows);
        let mut out = self.zeros(xv.len());
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&v| (v as f64 - mean) * (v as f64 - mean))
                .sum::<f64>()
                / d as f64;
            let rs = (1.0 / (var + eps as f64).sqrt()) as f32;
            rstd[r] = rs;
            for j in 0..d {
                let h = ((row[j] as f64 - mean) as f32) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape(x), shape),
            ));
        }
        let out = self.copied(self.value(x));
        let ng = self.ng(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), ng))
    }

    /// Axis permutation: output axis `j` is input axis `perm[j]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{shape:?} by {perm:?}")));
        }
        let xv = self.value(x);
        let mut out = self.zeros(xv.len());
        for_each_permuted(&shape, perm, |d, s| out[d] = xv[s]);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let ng = self.ng(x);
        Ok(self.push(out_shape, out, Op::Permute(x, perm.to_vec()), ng))
    }

    /// `x[index]` along the first axis.
    pub fn index_first(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || index >= shape[0] {
            return Err(shape_err("index_first", format!("index {index} into {shape:?}")));
        }
        let inner = numel(&shape[1..]);
        let out = self.copied(&self.value(x)[index * inner..(index + 1) * inner]);
        let ng = self.ng(x);
        Ok(self.push(shape[1..].to_vec(), out, Op::IndexFirst(x, index), ng))
    }

    /// Prepends `row` (shape `[1, d]` or `[d]`) to every sequence of `x: [b, t, d]`.
    pub fn prepend_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let rn = self.value(row).len();
        if sx.len() != 3 || sx[2] != rn {
            return Err(shape_err(
                "prepend_row",
                format!("{sx:?} with row {:?}", self.shape(row)),
            ));
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let xv = self.value(x);
        let rv = self.value(row);
        let mut out = self.buffer(b * (t + 1) * d);
        for bi in 0..b {
            out.extend_from_slice(rv);
            out.extend_from_slice(&xv[bi * t * d..(bi + 1) * t * d]);
        }
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(vec![b, t + 1, d], out, Op::PrependRow(x, row), ng))
    }

    /// `x[:, index, :]` for `x: [b, t, d]`.
    pub fn select_row(&mut self, x: Var, index: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || index >= sx[1] {
            return Err(shape_err("select_row", format!("row {index} of {sx:?}")));
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let xv = self.value(x);
        let mut out = self.buffer(b * d);
        for bi in 0..b {
            let o = (bi * t + index) * d;
            out.extend_from_slice(&xv[o..o + d]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![b, d], out, Op::SelectRow(x, index), ng))
    }

    /// Applies a [`RowMix`] to the rows of a 2-D tensor.
    pub fn mix_rows(&mut self, x: Var, mix: Rc<RowMix>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[0] != mix.in_rows {
            return Err(shape_err(
                "mix_rows",
                format!("{sx:?} with a map from {} rows", mix.in_rows),
            ));
        }
        let d = sx[1];
        let xv = self.value(x);
        let mut out = self.zeros(mix.out_rows * d);
        for &(dst, src, w) in &mix.entries {
            let (o, s) = (&mut out[dst * d..(dst + 1) * d], &xv[src * d..(src + 1) * d]);
            o.iter_mut().zip(s).for_each(|(o, &s)| *o += w * s);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![mix.out_rows, d], out, Op::MixRows(x, mix), ng))
    }

    /// Mean softmax cross-entropy of `logits: [b, c]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let (b, c) = (s[0], s[1]);
        let lv = self.value(logits);
        let mut probs = self.zeros(b * c);
        let mut total = 0.0f64;
        for i in 0..b {
            let row = &lv[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for j in 0..c {
                let e = exp(row[j] - mx);
                probs[i * c + j] = e;
                z += e;
            }
            probs[i * c..(i + 1) * c].iter_mut().for_each(|p| *p /= z);
            total += (z.ln() + mx - row[labels[i]]) as f64;
        }
        let loss = (total / b as f64) as f32;
        let ng = self.ng(logits);
        Ok(self.push(
            vec![1],
            self.filled(std::iter::once(loss)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|&v| v as f64).sum::<f64>() as f32;
        let ng = self.ng(x);
        let out = self.filled(std::iter::once(s));
        self.push(vec![1], out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = (self.value(x).iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32;
        let ng = self.ng(x);
        let out = self.filled(std::iter::once(s));
        self.push(vec![1], out, Op::Mean(x), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(self.filled(std::iter::once(1.0)));
        let mut out = Grads::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            if let Op::Param(name) = &node.op {
                out.params.push((name.clone(), g));
            } else {
                self.give_back(g);
            }
        }
        out.params.reverse();
        Ok(out)
    }

    fn backprop(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        // Returns the gradient buffer for `v`, or None when `v` is constant.
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].needs_grad {
                    let len = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| self.zeros(len)))
                } else {
                    None
                }
            }};
        }

        match &node.op {
            Op::Input | Op::Param(_) => {}
            &Op::MatMul {
                a,
                b,
                trans_b,
                groups,
                m,
                k,
                n,
                shared,
            } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                // strides of the logical right operand [k, n]
                let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
                if let Some(ga) = buf!(a) {
                    if shared {
                        gemm(groups * m, n, k, g, (n, 1), bv, (csb, rsb), ga, 1.0);
                    } else {
                        for gi in 0..groups {
                            gemm(
                                m,
                                n,
                                k,
                                &g[gi * m * n..(gi + 1) * m * n],
                                (n, 1),
                                &bv[gi * k * n..(gi + 1) * k * n],
                                (csb, rsb),
                                &mut ga[gi * m * k..(gi + 1) * m * k],
                                1.0,
                            );
                        }
                    }
                }
                if let Some(gb) = buf!(b) {
                    let rows = if shared { groups * m } else { m };
                    let reps = if shared { 1 } else { groups };
                    for gi in 0..reps {
                        let ab = &av[gi * rows * k..(gi + 1) * rows * k];
                        let gc = &g[gi * rows * n..(gi + 1) * rows * n];
                        let dst = &mut gb[gi * k * n..(gi + 1) * k * n];
                        if trans_b {
                            // dB[n, k] += dCᵀ · A
                            gemm(n, rows, k, gc, (1, n), ab, (k, 1), dst, 1.0);
                        } else {
                            // dB[k, n] += Aᵀ · dC
                            gemm(k, rows, n, ab, (1, k), gc, (n, 1), dst, 1.0);
                        }
                    }
                }
            }
            &Op::Linear { x, w, b } => {
                let n = *node.shape.last().unwrap();
                let k = self.nodes[w.0].shape[0];
                let rows = g.len() / n.max(1);
                if let Some(gx) = buf!(x) {
                    gemm(rows, n, k, g, (n, 1), &self.nodes[w.0].value, (1, n), gx, 1.0);
                }
                if let Some(gw) = buf!(w) {
                    gemm(k, rows, n, &self.nodes[x.0].value, (1, k), g, (n, 1), gw, 1.0);
                }
                if let Some(gb) = buf!(b) {
                    for row in g.chunks(n.max(1)) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Attention { qkv, heads, probs } => {
                if let Some(gq) = buf!(*qkv) {
                    let qv = &self.nodes[qkv.0].value;
                    let (b, t, d) = (node.shape[0], node.shape[1], node.shape[2]);
                    let d3 = 3 * d;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f32).sqrt();
                    let mut ds = self.zeros(t * t);
                    for bi in 0..b {
                        for h in 0..*heads {
                            let base = bi * t * d3 + h * dh;
                            let go = &g[bi * t * d + h * dh..];
                            let p = &probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                            // dV += Pᵀ dO
                            gemm_strided(t, t, dh, p, (1, t), go, (d, 1), &mut gq[base + 2 * d..], (d3, 1), 1.0);
                            // dP = dO Vᵀ
                            gemm(t, dh, t, go, (d, 1), &qv[base + 2 * d..], (1, d3), &mut ds, 0.0);
                            for (dr, pr) in ds.chunks_mut(t).zip(p.chunks(t)) {
                                let dot: f32 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                                for (dv, &pv) in dr.iter_mut().zip(pr) {
                                    *dv = pv * (*dv - dot) * scale;
                                }
                            }
                            // dQ += dS K ; dK += dSᵀ Q
                            gemm_strided(t, t, dh, &ds, (t, 1), &qv[base + d..], (d3, 1), &mut gq[base..], (d3, 1), 1.0);
                            gemm_strided(t, t, dh, &ds, (1, t), &qv[base..], (d3, 1), &mut gq[base + d..], (d3, 1), 1.0);
                        }
                    }
                    self.give_back(ds);
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = buf!(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = buf!(b) {
                    add_into(gb, g);
                }
            }
            &Op::AddBcast(a, b) => {
                if let Some(ga) = buf!(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = buf!(b) {
                    let nb = gb.len();
                    for chunk in g.chunks(nb) {
                        add_into(gb, chunk);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = buf!(a) {
                    let bv = &self.nodes[b.0].value;
                    ga.iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (g, y))| *d += g * y);
                }
                if let Some(gb) = buf!(b) {
                    let av = &self.nodes[a.0].value;
                    gb.iter_mut().zip(g.iter().zip(av)).for_each(|(d, (g, x))| *d += g * x);
                }
            }
            &Op::MulScalarVar(x, s) => {
                let c = self.nodes[s.0].value[0];
                if let Some(gx) = buf!(x) {
                    gx.iter_mut().zip(g).for_each(|(d, &g)| *d += c * g);
                }
                if let Some(gs) = buf!(s) {
                    let xv = &self.nodes[x.0].value;
                    gs[0] += g.iter().zip(xv).map(|(&g, &x)| (g * x) as f64).sum::<f64>() as f32;
                }
            }
            &Op::Scale(x, c) => {
                if let Some(gx) = buf!(x) {
                    gx.iter_mut().zip(g).for_each(|(d, &g)| *d += c * g);
                }
            }
            Op::ScaleLeading(x, factors) => {
                if let Some(gx) = buf!(*x) {
                    let inner = gx.len() / factors.len().max(1);
                    for (i, (d, &g)) in gx.iter_mut().zip(g).enumerate() {
                        *d += factors[i / inner.max(1)] * g;
                    }
                }
            }
            &Op::Gelu(x) => {
                if let Some(gx) = buf!(x) {
                    let xv = &self.nodes[x.0].value;
                    for ((d, &g), &x) in gx.iter_mut().zip(g).zip(xv) {
                        *d += g * gelu_grad(x);
                    }
                }
            }
            &Op::Softmax(x) => {
                if let Some(gx) = buf!(x) {
                    let d = *node.shape.last().unwrap();
                    for ((dst, gr), y) in gx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(node.value.chunks(d))
                    {
                        let dot: f32 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dst[j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap();
                let gam = &self.nodes[gamma.0].value;
                if let Some(gg) = buf!(*gamma) {
                    for (gr, h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * h[j];
                        }
                    }
                }
                if let Some(gbeta) = buf!(*beta) {
                    for gr in g.chunks(d) {
                        add_into(gbeta, gr);
                    }
                }
                if let Some(gx) = buf!(*x) {
                    let mut dh = vec![0.0f32; d];
                    for (r, ((dst, gr), h)) in gx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let mut m1 = 0.0f32;
                        let mut m2 = 0.0f32;
                        for j in 0..d {
                            dh[j] = gr[j] * gam[j];
                            m1 += dh[j];
                            m2 += dh[j] * h[j];
                        }
                        m1 /= d as f32;
                        m2 /= d as f32;
                        let rs = rstd[r];
                        for j in 0..d {
                            dst[j] += rs * (dh[j] - m1 - h[j] * m2);
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = buf!(x) {
                    add_into(gx, g);
                }
            }
            Op::Permute(x, perm) => {
                let in_shape = self.nodes[x.0].shape.clone();
                if let Some(gx) = buf!(*x) {
                    for_each_permuted(&in_shape, perm, |d, s| gx[s] += g[d]);
                }
            }
            &Op::IndexFirst(x, index) => {
                if let Some(gx) = buf!(x) {
                    let inner = g.len();
                    add_into(&mut gx[index * inner..(index + 1) * inner], g);
                }
            }
            &Op::PrependRow(x, row) => {
                let (b, t1, d) = (node.shape[0], node.shape[1], node.shape[2]);
                if let Some(gr) = buf!(row) {
                    for bi in 0..b {
                        add_into(gr, &g[bi * t1 * d..bi * t1 * d + d]);
                    }
                }
                if let Some(gx) = buf!(x) {
                    let t = t1 - 1;
                    for bi in 0..b {
                        add_into(
                            &mut gx[bi * t * d..(bi + 1) * t * d],
                            &g[bi * t1 * d + d..(bi + 1) * t1 * d],
                        );
                    }
                }
            }
            &Op::SelectRow(x, index) => {
                let t = self.nodes[x.0].shape[1];
                let d = node.shape[1];
                if let Some(gx) = buf!(x) {
                    for (bi, gr) in g.chunks(d).enumerate() {
                        let o = (bi * t + index) * d;
                        add_into(&mut gx[o..o + d], gr);
                    }
                }
            }
            Op::MixRows(x, mix) => {
                let d = node.shape[1];
                if let Some(gx) = buf!(*x) {
                    for &(dst, src, w) in &mix.entries {
                        let gs = &g[dst * d..(dst + 1) * d];
                        gx[src * d..(src + 1) * d]
                            .iter_mut()
                            .zip(gs)
                            .for_each(|(o, &v)| *o += w * v);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if let Some(gl) = buf!(*logits) {
                    let b = labels.len();
                    let c = probs.len() / b.max(1);
                    let s = g[0] / b as f32;
                    for i in 0..b {
                        for j in 0..c {
                            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                            gl[i * c + j] += s * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = buf!(x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(x) => {
                if let Some(gx) = buf!(x) {
                    let s = g[0] / gx.len().max(1) as f32;
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
        }
    }
}
