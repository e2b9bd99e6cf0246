//! Acceptance suite. Every criterion runs at its stated tolerance and prints
//! one PASS/FAIL line; the test fails if any criterion does.
//!
//! Run with `cargo test -p autoprog-core --test acceptance -- --nocapture`
//! to watch progress; the summary lines are written to stderr directly so
//! they also show up under the default capture.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use autoprog_core::config::RunConfig;
use autoprog_core::data::Dataset;
use autoprog_core::growth::{depth_map, grow, GrowthOperatorKind, LayerSource, MomentumState};
use autoprog_core::model::{build_model, forward, ModelConfig, SubNetSpec};
use autoprog_core::params::ParamStore;
use autoprog_core::schedule::{build_growth_space, build_stage_space, uniform_linear_schedule, GrowthSchedule};
use autoprog_core::search::{forward_flops, search_stage, AlphaPolicy, CostModel};
use autoprog_core::supernet::ElasticSupernet;
use autoprog_core::train::{read_metrics, run, RunFiles, RunOutput};
use autoprog_core::{Graph, Tensor};

type Check = Result<String, String>;

struct Outcome {
    id: usize,
    passed: bool,
    line: String,
}

fn say(msg: &str) {
    let mut e = std::io::stderr().lock();
    let _ = writeln!(e, "{msg}");
}

/// `AUTOPROG_ACCEPTANCE=1,7` restricts the run to those criteria; the rest
/// are reported as skipped and count as failures.
fn selected(id: usize) -> bool {
    match std::env::var("AUTOPROG_ACCEPTANCE") {
        Ok(list) => list.split(',').any(|s| s.trim().parse() == Ok(id)),
        Err(_) => true,
    }
}

fn criterion(id: usize, name: &str, budget_secs: Option<f64>, f: impl FnOnce() -> Check) -> Outcome {
    if !selected(id) {
        let line = format!("SKIP criterion {id:>2} ({name}): not selected");
        say(&line);
        return Outcome { id, passed: false, line };
    }
    say(&format!("[acceptance] criterion {id}: {name} ..."));
    let start = Instant::now();
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
    let secs = start.elapsed().as_secs_f64();
    let result = match (result, budget_secs) {
        (Ok(d), Some(b)) if secs > b => Err(format!("{d}; took {secs:.2}s, budget {b}s")),
        (r, _) => r,
    };
    let (passed, detail) = match result {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    let line = format!(
        "{} criterion {id:>2} ({name}, {secs:.2}s): {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    say(&line);
    Outcome { id, passed, line }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn images(b: usize, side: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..b * 3 * side * side).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
    Tensor::new(vec![b, 3, side, side], data).unwrap()
}

fn toy(d: usize, depth: usize, grid: usize, patch: usize) -> ModelConfig {
    ModelConfig {
        max_depth: depth,
        max_grid: grid,
        patch,
        embed_dim: d,
        heads: 4,
        mlp_ratio: 2.0,
        classes: 10,
        channels: 3,
    }
}

/// Adds N(0, std) noise to every tensor so gains, biases and the positional
/// table are all non-trivial.
fn perturb(p: &ParamStore, std: f32, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = p.detached();
    for (_, t) in out.iter_mut() {
        for v in t.data_mut() {
            *v += std * rng.sample::<f32, _>(rand_distr::StandardNormal);
        }
    }
    out
}

fn max_abs(a: &Tensor, b: &Tensor) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

// ---------------------------------------------------------------- 1

fn c1_growth_operators() -> Check {
    use GrowthOperatorKind::*;
    let mut checked = 0usize;
    for kind in GrowthOperatorKind::ALL {
        for s in 1..=12 {
            for l in s..=12 {
                let mut src = Vec::with_capacity(l);
                for i in 0..l {
                    let m = depth_map(kind, i, s, l).map_err(|e| format!("{kind} {s}->{l} at {i}: {e}"))?;
                    if let LayerSource::Layer(x) = m {
                        ensure(x < s, || format!("{kind} {s}->{l}: layer {i} maps to {x}"))?;
                    }
                    src.push(m);
                }
                checked += 1;
                ensure(depth_map(kind, l, s, l).is_err(), || format!("{kind} accepted i = l"))?;
                match kind {
                    RandInit => {
                        let want: Vec<_> = (0..l)
                            .map(|i| if i < s { LayerSource::Layer(i) } else { LayerSource::Fresh })
                            .collect();
                        ensure(src == want, || format!("randinit {s}->{l}: {src:?}"))?;
                    }
                    Stacking => {
                        let want: Vec<_> = (0..l).map(|i| LayerSource::Layer(i % s)).collect();
                        ensure(src == want, || format!("stacking {s}->{l}: {src:?}"))?;
                    }
                    Interpolation | Identity | MoGrow => {
                        let idx: Vec<usize> = src
                            .iter()
                            .map(|m| match m {
                                LayerSource::Layer(x) => Ok(*x),
                                LayerSource::Fresh => Err(format!("{kind} {s}->{l} produced a fresh layer")),
                            })
                            .collect::<Result<_, _>>()?;
                        ensure(idx.windows(2).all(|w| w[0] <= w[1]), || {
                            format!("{kind} {s}->{l} not monotone: {idx:?}")
                        })?;
                        let used: BTreeSet<usize> = idx.iter().copied().collect();
                        ensure(used.len() == s, || format!("{kind} {s}->{l} misses sources: {idx:?}"))?;
                    }
                }
            }
            if s < 12 {
                ensure(depth_map(kind, 0, s + 1, s).is_err(), || format!("{kind} allowed shrinking"))?;
            }
        }
    }
    let (a, b) = (LayerSource::Layer(0), LayerSource::Layer(1));
    let map = |k, s, l| (0..l).map(|i| depth_map(k, i, s, l).unwrap()).collect::<Vec<_>>();
    ensure(map(Stacking, 2, 4) == [a, b, a, b], || "stacking 2->4 is not [A,B,A,B]".into())?;
    ensure(map(Interpolation, 2, 4) == [a, a, b, b], || "interpolation 2->4 is not [A,A,B,B]".into())?;
    Ok(format!("{checked} (kind, l_s, l_l) triples, doubling mappings match"))
}

// ---------------------------------------------------------------- 2

fn c2_function_preservation() -> Check {
    let cfg = toy(64, 8, 4, 4);
    let small = SubNetSpec::new(4, 4);
    let params = perturb(&build_model(&cfg, small, 11).unwrap(), 0.05, 12);
    let grown = grow(GrowthOperatorKind::Identity, &cfg, &params, small, cfg.full_spec(), None, 13)
        .map_err(|e| e.to_string())?;
    ensure(grown.depth() == 8, || format!("grown depth {}", grown.depth()))?;
    let mut worst = 0.0f32;
    for b in 0..16 {
        let x = images(8, cfg.side(4), 100 + b);
        let before = forward(&cfg, &params, small, &x).map_err(|e| e.to_string())?;
        let after = forward(&cfg, &grown, cfg.full_spec(), &x).map_err(|e| e.to_string())?;
        worst = worst.max(max_abs(&before, &after));
    }
    ensure(worst < 1e-5, || format!("max |Δlogit| = {worst:e}"))?;
    Ok(format!("max |Δlogit| over 16 batches = {worst:.2e}"))
}

// ---------------------------------------------------------------- 3

fn c3_mogrow_identity() -> Check {
    let cfg = toy(32, 8, 6, 2);
    let mut cases = 0;
    for (from, to) in [((2, 3), (4, 3)), ((3, 4), (8, 6)), ((4, 6), (5, 6)), ((4, 3), (4, 6))] {
        let (from, to) = (SubNetSpec::new(from.0, from.1), SubNetSpec::new(to.0, to.1));
        let online = build_model(&cfg, from, 21).unwrap();
        let mut ema = MomentumState::new(&online, 0.9);
        ema.update(&perturb(&online, 0.1, 22)).unwrap();
        let a = grow(GrowthOperatorKind::MoGrow, &cfg, &online, from, to, Some(&ema), 5).map_err(|e| e.to_string())?;
        let b = grow(GrowthOperatorKind::Interpolation, &cfg, &ema.params, from, to, None, 5)
            .map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{from} -> {to}: stores differ"))?;
        let c = grow(GrowthOperatorKind::Interpolation, &cfg, &online, from, to, None, 5).map_err(|e| e.to_string())?;
        ensure(a != c, || format!("{from} -> {to}: momentum copy had no effect"))?;
        cases += 1;
    }
    Ok(format!("{cases} growth cases tensor-equal"))
}

// ---------------------------------------------------------------- 4

fn check_supernet(cfg: &ModelConfig, net: &ElasticSupernet, stage: usize) -> Result<(usize, f32), String> {
    let cands = net.candidates().to_vec();
    let views: Vec<(SubNetSpec, BTreeSet<String>)> = cands
        .iter()
        .map(|&s| Ok((s, net.view_names(&net.select(s).map_err(|e| e.to_string())?))))
        .collect::<Result<_, String>>()?;
    let mut pairs = 0;
    for (a, na) in &views {
        for (b, nb) in &views {
            if a.depth <= b.depth {
                pairs += 1;
                ensure(na.is_subset(nb), || {
                    let extra: Vec<_> = na.difference(nb).collect();
                    format!("stage {stage}: {a} not nested in {b}, extra {extra:?}")
                })?;
            }
        }
    }
    let mut worst = 0.0f32;
    for &s in &cands {
        let x = images(2, cfg.side(s.grid), 40 + s.depth as u64 * 10 + s.grid as u64);
        let via_net = net.forward(cfg, s, &x).map_err(|e| e.to_string())?;
        let (exported, _) = net.export_subnet(s).map_err(|e| e.to_string())?;
        ensure(exported.depth() == s.depth, || format!("export of {s} has depth {}", exported.depth()))?;
        let direct = forward(cfg, &exported, s, &x).map_err(|e| e.to_string())?;
        worst = worst.max(max_abs(&via_net, &direct));
    }
    ensure(worst <= 1e-6, || format!("stage {stage}: export/forward mismatch {worst:e}"))?;
    Ok((pairs, worst))
}

fn c4_weight_nesting() -> Check {
    let cfg = toy(16, 8, 8, 2);
    let space = build_growth_space(&cfg, 0.5, 4).map_err(|e| e.to_string())?;
    let mut supernets = 0;
    let mut pairs = 0;
    let mut worst = 0.0f32;
    // every reachable previous choice, stage by stage
    let mut frontier: Vec<Option<SubNetSpec>> = vec![None];
    for stage in 0..4 {
        let mut next = BTreeSet::new();
        for prev in &frontier {
            let cands = build_stage_space(&cfg, &space, stage, *prev).map_err(|e| e.to_string())?;
            ensure(!cands.is_empty() && cands.len() <= 9, || format!("stage {stage}: {} candidates", cands.len()))?;
            if let Some(p) = prev {
                ensure(cands.iter().all(|c| cfg.size_measure(*c) >= cfg.size_measure(*p)), || {
                    format!("stage {stage}: candidate smaller than {p}")
                })?;
            }
            next.extend(cands.iter().copied());
            let base = SubNetSpec::new(
                cands.iter().map(|c| c.depth).min().unwrap(),
                cands.iter().map(|c| c.grid).min().unwrap(),
            );
            let net = match prev {
                None => ElasticSupernet::from_scratch(&cfg, base, &cands, 1).map_err(|e| e.to_string())?,
                Some(p) => {
                    let online = perturb(&build_model(&cfg, *p, 2).unwrap(), 0.05, 3);
                    let ema = MomentumState::new(&perturb(&online, 0.01, 4), 0.998);
                    ElasticSupernet::build(&cfg, &online, *p, &cands, GrowthOperatorKind::MoGrow, Some(&ema), 5)
                        .map_err(|e| e.to_string())?
                        .0
                }
            };
            let (n, w) = check_supernet(&cfg, &net, stage)?;
            pairs += n;
            worst = worst.max(w);
            supernets += 1;
        }
        frontier = next.into_iter().map(Some).collect();
    }
    Ok(format!(
        "{supernets} stage supernets, {pairs} nested pairs, export/forward max diff {worst:.1e}"
    ))
}

// ---------------------------------------------------------------- 5

/// Independent scorer: recomputes the balancing exponent from the raw
/// (loss, cost) pairs and scans for the best candidate.
fn brute_force(pairs: &[(f64, f64)]) -> usize {
    if pairs.len() == 1 {
        return 0;
    }
    let lmax = pairs.iter().map(|p| p.0).fold(f64::MIN, f64::max);
    let lmin = pairs.iter().map(|p| p.0).fold(f64::MAX, f64::min);
    let tmax = pairs.iter().map(|p| p.1).fold(f64::MIN, f64::max);
    let tmin = pairs.iter().map(|p| p.1).fold(f64::MAX, f64::min);
    let alpha = if lmax == lmin || tmax == tmin {
        0.0
    } else {
        (lmax / lmin).ln() / (tmax / tmin).ln()
    };
    let mut best = 0;
    let mut best_score = pairs[0].0 * pairs[0].1.powf(alpha);
    for (i, &(l, t)) in pairs.iter().enumerate().skip(1) {
        let s = l * t.powf(alpha);
        if s < best_score || (s == best_score && t < pairs[best].1) {
            best = i;
            best_score = s;
        }
    }
    best
}

fn c5_search_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut degenerate = 0;
    for f in 0..100 {
        let n = rng.gen_range(1..=9);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen_range(0.2..3.0), rng.gen_range(1.0e6..8.0e6)))
            .collect();
        match f % 5 {
            0 => pairs.iter_mut().for_each(|p| p.0 = 1.25),
            1 => pairs.iter_mut().for_each(|p| p.1 = 4.0e6),
            2 => {
                // duplicated candidates tie exactly on score
                let first = pairs[0];
                pairs.iter_mut().step_by(2).for_each(|p| *p = first);
            }
            _ => {}
        }
        if f % 5 < 3 {
            degenerate += 1;
        }
        let specs: Vec<SubNetSpec> = (0..n).map(|i| SubNetSpec::new(i + 1, 2 * i + 1)).collect();
        let lookup = |s: SubNetSpec| pairs[s.depth - 1];
        let res = search_stage(&specs, |s| lookup(s).1, |s| Ok(lookup(s).0), AlphaPolicy::Balanced)
            .map_err(|e| format!("fixture {f}: {e}"))?;
        let want = specs[brute_force(&pairs)];
        ensure(res.chosen == want, || {
            format!("fixture {f}: chose {} but oracle picks {want}; pairs {pairs:?}", res.chosen)
        })?;
    }
    let fixed = [(1.0, 1.0), (0.9, 2.0), (0.85, 4.0)];
    let specs: Vec<SubNetSpec> = (1..=3).map(|d| SubNetSpec::new(d, d)).collect();
    let res = search_stage(&specs, |s| fixed[s.depth - 1].1, |s| Ok(fixed[s.depth - 1].0), AlphaPolicy::Balanced)
        .map_err(|e| e.to_string())?;
    ensure(res.chosen == specs[brute_force(&fixed)], || "three-candidate fixture disagrees".into())?;
    Ok(format!("100 fixtures ({degenerate} degenerate) agree with the brute-force scorer"))
}

// ---------------------------------------------------------------- 6

fn c6_cost_model() -> Check {
    let deit_s = ModelConfig {
        max_depth: 12,
        max_grid: 14,
        patch: 16,
        embed_dim: 384,
        heads: 6,
        mlp_ratio: 4.0,
        classes: 1000,
        channels: 3,
    };
    let full = forward_flops(&deit_s, deit_s.full_spec());
    let rel = (full - 4.6e9).abs() / 4.6e9;
    ensure(rel <= 0.10, || format!("DeiT-S forward {:.3}G, {:.1}% off 4.6G", full / 1e9, rel * 100.0))?;
    let mut ratios = Vec::new();
    for cfg in [deit_s, toy(64, 8, 8, 4)] {
        let space = build_growth_space(&cfg, 0.5, 4).map_err(|e| e.to_string())?;
        let sched = uniform_linear_schedule(&space, 4);
        let r = CostModel::new(&cfg).schedule_ratio(&sched.stages);
        ensure(r < 0.55, || format!("schedule {:?} has FLOPs ratio {r:.3}", sched.stages))?;
        ratios.push(r);
    }
    Ok(format!(
        "DeiT-S forward {:.3}G ({:.1}% off); uniform-linear ratio {:.3} (DeiT-S), {:.3} (desk)",
        full / 1e9,
        rel * 100.0,
        ratios[0],
        ratios[1]
    ))
}

// ---------------------------------------------------------------- 7

/// Straightforward double-precision ViT used only as the finite-difference
/// oracle. Same parameter names and layout as the engine.
mod reference {
    use super::*;

    pub struct P<'a>(pub &'a std::collections::BTreeMap<String, Vec<f64>>);

    impl P<'_> {
        fn get(&self, n: &str) -> &[f64] {
            &self.0[n]
        }
    }

    fn linear(x: &[f64], rows: usize, w: &[f64], b: &[f64], din: usize, dout: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * dout];
        for r in 0..rows {
            for o in 0..dout {
                let mut s = b[o];
                for i in 0..din {
                    s += x[r * din + i] * w[i * dout + o];
                }
                out[r * dout + o] = s;
            }
        }
        out
    }

    fn layernorm(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + 1e-6).sqrt();
            for i in 0..d {
                o[i] = (row[i] - mean) * r * g[i] + b[i];
            }
        }
        out
    }

    fn gelu(x: f64) -> f64 {
        let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3));
        0.5 * x * (1.0 + u.tanh())
    }

    /// Mean cross-entropy of a batch of `[3, side, side]` images.
    pub fn loss(cfg: &ModelConfig, p: &P, depth: usize, grid: usize, imgs: &[f64], labels: &[usize]) -> f64 {
        let (d, c, pt) = (cfg.embed_dim, cfg.channels, cfg.patch);
        let side = grid * pt;
        let t = grid * grid + 1;
        let h = cfg.heads;
        let dh = d / h;
        let hid = cfg.mlp_hidden();
        let b = labels.len();
        let mut total = 0.0;
        for bi in 0..b {
            let img = &imgs[bi * c * side * side..(bi + 1) * c * side * side];
            let cols = c * pt * pt;
            let mut patches = Vec::with_capacity(grid * grid * cols);
            for gy in 0..grid {
                for gx in 0..grid {
                    for ch in 0..c {
                        for py in 0..pt {
                            for px in 0..pt {
                                patches.push(img[(ch * side + gy * pt + py) * side + gx * pt + px]);
                            }
                        }
                    }
                }
            }
            let emb = linear(&patches, grid * grid, p.get("patch.w"), p.get("patch.b"), cols, d);
            let mut x: Vec<f64> = p.get("cls").to_vec();
            x.extend(emb);
            for (v, pe) in x.iter_mut().zip(p.get("pos")) {
                *v += pe;
            }
            for l in 0..depth {
                let n = |r: &str| format!("blocks.{l}.{r}");
                let hn = layernorm(&x, d, p.get(&n("norm1.g")), p.get(&n("norm1.b")));
                let qkv = linear(&hn, t, p.get(&n("attn.qkv.w")), p.get(&n("attn.qkv.b")), d, 3 * d);
                let mut o = vec![0.0; t * d];
                for head in 0..h {
                    for i in 0..t {
                        let q = &qkv[i * 3 * d + head * dh..][..dh];
                        let s: Vec<f64> = (0..t)
                            .map(|j| {
                                let k = &qkv[j * 3 * d + d + head * dh..][..dh];
                                q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                            })
                            .collect();
                        let m = s.iter().copied().fold(f64::MIN, f64::max);
                        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                        let z: f64 = e.iter().sum();
                        for j in 0..t {
                            let v = &qkv[j * 3 * d + 2 * d + head * dh..][..dh];
                            for k in 0..dh {
                                o[i * d + head * dh + k] += e[j] / z * v[k];
                            }
                        }
                    }
                }
                let a = linear(&o, t, p.get(&n("attn.proj.w")), p.get(&n("attn.proj.b")), d, d);
                x.iter_mut().zip(&a).for_each(|(x, a)| *x += a);
                let hn = layernorm(&x, d, p.get(&n("norm2.g")), p.get(&n("norm2.b")));
                let f1: Vec<f64> = linear(&hn, t, p.get(&n("mlp.fc1.w")), p.get(&n("mlp.fc1.b")), d, hid)
                    .into_iter()
                    .map(gelu)
                    .collect();
                let f2 = linear(&f1, t, p.get(&n("mlp.fc2.w")), p.get(&n("mlp.fc2.b")), hid, d);
                x.iter_mut().zip(&f2).for_each(|(x, a)| *x += a);
            }
            let cls = layernorm(&x[..d], d, p.get("head.norm.g"), p.get("head.norm.b"));
            let logits = linear(&cls, 1, p.get("head.fc.w"), p.get("head.fc.b"), d, cfg.classes);
            let m = logits.iter().copied().fold(f64::MIN, f64::max);
            let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - logits[labels[bi]];
        }
        total / b as f64
    }
}

fn c7_gradients() -> Check {
    let cfg = ModelConfig {
        max_depth: 2,
        max_grid: 2,
        patch: 2,
        embed_dim: 8,
        heads: 2,
        mlp_ratio: 2.0,
        classes: 5,
        channels: 3,
    };
    let spec = cfg.full_spec();
    let params = perturb(&build_model(&cfg, spec, 71).unwrap(), 0.4, 72);
    let x = images(3, cfg.side(2), 73);
    let labels = vec![0, 3, 4];

    let mut g = Graph::new();
    let blocks: Vec<usize> = (0..spec.depth).collect();
    let logits = autoprog_core::model::Forward::new(&cfg, &params, true)
        .run(&mut g, &blocks, spec.grid, &x, None)
        .map_err(|e| e.to_string())?;
    let loss = g.cross_entropy(logits, &labels).map_err(|e| e.to_string())?;
    let engine_loss = g.scalar(loss) as f64;
    let grads = g.backward(loss).map_err(|e| e.to_string())?;

    let mut store: std::collections::BTreeMap<String, Vec<f64>> = params
        .iter()
        .map(|(n, t)| (n.to_string(), t.data().iter().map(|&v| v as f64).collect()))
        .collect();
    let imgs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let ref_loss = reference::loss(&cfg, &reference::P(&store), spec.depth, spec.grid, &imgs, &labels);
    ensure((ref_loss - engine_loss).abs() < 1e-4 * ref_loss.abs().max(1.0), || {
        format!("reference loss {ref_loss} vs engine {engine_loss}")
    })?;

    // Key biases shift every score of a query equally, which softmax
    // ignores: their exact gradient is zero, so they are checked absolutely
    // and left out of the relative-error sample.
    let d = cfg.embed_dim;
    let key_bias = |name: &str, i: usize| name.ends_with("attn.qkv.b") && (d..2 * d).contains(&i);
    let scale = grads.names().flat_map(|n| grads.get(n).unwrap()).fold(0.0f32, |m, v| m.max(v.abs()));
    for l in 0..spec.depth {
        let name = format!("blocks.{l}.attn.qkv.b");
        let worst = grads.get(&name).unwrap()[d..2 * d].iter().fold(0.0f32, |m, v| m.max(v.abs()));
        ensure(worst <= 1e-6 * scale, || format!("{name}: key-bias gradient {worst:e}, expected 0"))?;
    }

    // every tensor at least once, then uniform over all scalars
    let names: Vec<String> = store.keys().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(74);
    let total: usize = store.values().map(Vec::len).sum();
    let mut picks: Vec<(String, usize)> = Vec::new();
    let mut pick = |picks: &mut Vec<(String, usize)>, name: &str, i: usize| {
        if !key_bias(name, i) && !picks.iter().any(|(n, j)| n == name && *j == i) {
            picks.push((name.to_string(), i));
        }
    };
    for n in &names {
        while !picks.iter().any(|(p, _)| p == n) {
            let i = rng.gen_range(0..store[n].len());
            pick(&mut picks, n, i);
        }
    }
    while picks.len() < 120 {
        let mut k = rng.gen_range(0..total);
        for n in &names {
            if k < store[n].len() {
                pick(&mut picks, n, k);
                break;
            }
            k -= store[n].len();
        }
    }

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for (name, i) in &picks {
        let analytic = grads.get(name).ok_or_else(|| format!("no gradient for {name}"))?[*i] as f64;
        let orig = store[name][*i];
        store.get_mut(name).unwrap()[*i] = orig + h;
        let up = reference::loss(&cfg, &reference::P(&store), spec.depth, spec.grid, &imgs, &labels);
        store.get_mut(name).unwrap()[*i] = orig - h;
        let down = reference::loss(&cfg, &reference::P(&store), spec.depth, spec.grid, &imgs, &labels);
        store.get_mut(name).unwrap()[*i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs());
        let rel = if denom == 0.0 { 0.0 } else { (analytic - numeric).abs() / denom };
        if rel > worst {
            worst = rel;
            worst_at = format!("{name}[{i}] analytic {analytic:e} numeric {numeric:e}");
        }
    }
    ensure(worst < 1e-3, || format!("max relative error {worst:e} at {worst_at}"))?;
    Ok(format!(
        "{} parameters over {} tensors, max relative error {worst:.2e}",
        picks.len(),
        names.len()
    ))
}

// ---------------------------------------------------------------- 8

const DESK: &str = r#"
mode = "baseline"

[model]
max_depth = 8
max_grid = 8
patch = 4
embed_dim = 64
heads = 4
mlp_ratio = 2.0
classes = 10

[plan]
total_epochs = 28
stages = 4
supernet_epochs = 2

[growth]
s1 = 0.5
operator = "mogrow"

[data.synthetic]
classes = 10
train = 5000
eval = 1000
side = 32
seed = 7
noise = 2.0
distractor = 0.5
"#;

struct Pair {
    seed: u64,
    baseline: RunOutput,
    autoprog: RunOutput,
}

fn desk_pair(seed: u64, train: &Dataset, eval: &Dataset) -> Result<Pair, String> {
    let mut base = RunConfig::from_toml(DESK).map_err(|e| e.to_string())?;
    base.seed = seed;
    let mut auto = base.clone();
    auto.mode = autoprog_core::config::Mode::AutoProg;
    let t = Instant::now();
    let baseline = run(&base, train, eval, None, None).map_err(|e| e.to_string())?;
    say(&format!(
        "[acceptance]   seed {seed} baseline: acc {:.4}, {:.3e} FLOPs, {:.0}s",
        baseline.final_accuracy().unwrap_or(0.0),
        baseline.total_flops(),
        t.elapsed().as_secs_f64()
    ));
    let t = Instant::now();
    let autoprog = run(&auto, train, eval, None, None).map_err(|e| e.to_string())?;
    say(&format!(
        "[acceptance]   seed {seed} autoprog: acc {:.4}, {:.3e} FLOPs, {:.0}s, schedule {:?}",
        autoprog.final_accuracy().unwrap_or(0.0),
        autoprog.total_flops(),
        t.elapsed().as_secs_f64(),
        autoprog.schedule.stages.iter().map(|s| (s.depth, s.grid)).collect::<Vec<_>>()
    ));
    Ok(Pair {
        seed,
        baseline,
        autoprog,
    })
}

fn c8_desk_speedup() -> Check {
    let cfg = RunConfig::from_toml(DESK).map_err(|e| e.to_string())?;
    let (train, eval) = cfg.data.load().map_err(|e| e.to_string())?;
    let seeds = [0u64, 1, 2];
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let pairs: Vec<Pair> = if threads > 1 {
        let (train, eval) = (&train, &eval);
        std::thread::scope(|s| {
            let hs: Vec<_> = seeds.iter().map(|&sd| s.spawn(move || desk_pair(sd, train, eval))).collect();
            hs.into_iter().map(|h| h.join().expect("seed thread")).collect::<Result<_, _>>()
        })?
    } else {
        seeds.iter().map(|&sd| desk_pair(sd, &train, &eval)).collect::<Result<_, _>>()?
    };
    let mut gaps = Vec::new();
    let mut ratios = Vec::new();
    for p in &pairs {
        let gap = 100.0 * (p.baseline.final_accuracy().unwrap_or(0.0) - p.autoprog.final_accuracy().unwrap_or(0.0));
        let ratio = p.autoprog.total_flops() / p.baseline.total_flops();
        say(&format!("[acceptance]   seed {}: gap {gap:+.2} points, FLOPs ratio {ratio:.3}", p.seed));
        gaps.push(gap);
        ratios.push(ratio);
    }
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    let detail = format!(
        "mean accuracy gap {mean_gap:+.2} points (per seed {:?}), FLOPs ratio ≤ {max_ratio:.3} (per seed {:?})",
        gaps.iter().map(|g| format!("{g:+.2}")).collect::<Vec<_>>(),
        ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()
    );
    ensure(mean_gap <= 2.0 && max_ratio <= 0.70, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn c9_schedule_accounting() -> Check {
    let text = DESK
        .replace("max_depth = 8", "max_depth = 6")
        .replace("embed_dim = 64", "embed_dim = 32")
        .replace("total_epochs = 28", "total_epochs = 12")
        .replace("train = 5000", "train = 640")
        .replace("eval = 1000", "eval = 200")
        .replace("mode = \"baseline\"", "mode = \"autoprog\"");
    let cfg = RunConfig::from_toml(&text).map_err(|e| e.to_string())?;
    let (train, eval) = cfg.data.load().map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = run(&cfg, &train, &eval, None, Some(dir.path())).map_err(|e| e.to_string())?;
    let metrics = std::fs::read_to_string(dir.path().join(RunFiles::METRICS)).map_err(|e| e.to_string())?;
    let recs = read_metrics(&metrics).map_err(|e| e.to_string())?;
    let epochs = cfg.plan.total_epochs;
    ensure(recs.len() == epochs, || format!("{} epoch records for |t| = {epochs}", recs.len()))?;
    ensure(recs.iter().enumerate().all(|(i, r)| r.epoch == i + 1), || "epochs not 1..=|t|".into())?;
    let steps = (train.len() / cfg.optim.batch_size) * epochs;
    ensure(out.optimizer_steps == steps as u64, || {
        format!("{} optimizer steps, expected {steps}", out.optimizer_steps)
    })?;
    ensure(recs.windows(2).all(|w| w[1].cumulative_flops >= w[0].cumulative_flops), || {
        "cumulative FLOPs decreased".into()
    })?;
    let supernet = recs.iter().filter(|r| r.phase == "supernet").count();
    let sched = GrowthSchedule::load(&dir.path().join(RunFiles::SCHEDULE)).map_err(|e| e.to_string())?;
    ensure(sched == out.schedule, || "schedule file differs from the realised schedule".into())?;
    ensure(sched.stages.windows(2).all(|w| w[0].within(&w[1])), || format!("schedule decreases: {sched:?}"))?;
    ensure(sched.stages.last() == Some(&cfg.model.full_spec()), || format!("does not end on full: {sched:?}"))?;

    let again = run(&cfg, &train, &eval, Some(&sched), None).map_err(|e| e.to_string())?;
    ensure(again.records.len() == epochs && again.records.iter().all(|r| r.phase == "train"), || {
        "retraining used supernet epochs or changed the epoch count".into()
    })?;
    Ok(format!(
        "{epochs} epochs ({supernet} of them supernet), {steps} steps, schedule {:?}",
        sched.stages.iter().map(|s| (s.depth, s.grid)).collect::<Vec<_>>()
    ))
}

// ---------------------------------------------------------------- 10

fn c10_ema() -> Check {
    let cfg = toy(16, 3, 3, 2);
    let online = perturb(&build_model(&cfg, cfg.full_spec(), 91).unwrap(), 0.1, 92);
    let stepped = perturb(&online, 0.01, 93);
    for m in [0.0f32, 0.9, 0.998, 1.0] {
        // fixed point: bit-identical after an update with unchanged weights
        let mut st = MomentumState::new(&online, m);
        for _ in 0..3 {
            st.update(&online).map_err(|e| e.to_string())?;
        }
        ensure(st.params == online, || format!("m = {m}: fixed point moved"))?;

        // one online step after a rebuild
        let mut st = MomentumState::new(&stepped, m);
        st.rebuild(&online);
        st.update(&stepped).map_err(|e| e.to_string())?;
        for (name, e) in st.params.iter() {
            let (w0, w1) = (online.get(name).unwrap().data(), stepped.get(name).unwrap().data());
            let norm = |f: &dyn Fn(usize) -> f64| (0..w0.len()).map(|i| f(i).powi(2)).sum::<f64>().sqrt();
            let delta = norm(&|i| w1[i] as f64 - w0[i] as f64);
            let moved = norm(&|i| e.data()[i] as f64 - w0[i] as f64);
            let gap = norm(&|i| e.data()[i] as f64 - w1[i] as f64);
            // f32 storage rounds each element relative to its magnitude
            let slack = 4.0 * f32::EPSILON as f64 * norm(&|i| w1[i].abs().max(w0[i].abs()) as f64) + 1e-12;
            ensure(moved <= (1.0 - m as f64) * delta + slack, || {
                format!("m = {m}, {name}: EMA moved {moved:e} > (1-m)·|Δω| = {:e}", (1.0 - m as f64) * delta)
            })?;
            ensure(gap <= m as f64 * delta + slack, || {
                format!("m = {m}, {name}: |ω̃ − ω| = {gap:e} > m·|Δω|")
            })?;
            for (i, &v) in e.data().iter().enumerate() {
                let want = m as f64 * w0[i] as f64 + (1.0 - m as f64) * w1[i] as f64;
                ensure((v as f64 - want).abs() <= 1e-6 * (1.0 + want.abs()), || {
                    format!("m = {m}, {name}[{i}]: {v} vs {want}")
                })?;
            }
        }
    }
    Ok("fixed point and one-step bounds hold for m in {0, 0.9, 0.998, 1}".into())
}

#[test]
fn acceptance() {
    let outcomes = vec![
        criterion(1, "growth operators", Some(1.0), c1_growth_operators),
        criterion(2, "identity growth preserves function", Some(10.0), c2_function_preservation),
        criterion(3, "MoGrow = interpolation of the EMA", Some(1.0), c3_mogrow_identity),
        criterion(4, "weight nesting", Some(30.0), c4_weight_nesting),
        criterion(5, "search oracle", Some(1.0), c5_search_oracle),
        criterion(6, "cost model", None, c6_cost_model),
        criterion(7, "gradients", None, c7_gradients),
        criterion(8, "desk-scale speedup", None, c8_desk_speedup),
        criterion(9, "schedule accounting", None, c9_schedule_accounting),
        criterion(10, "momentum network", None, c10_ema),
    ];
    say("[acceptance] summary");
    for o in &outcomes {
        say(&o.line);
    }
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
