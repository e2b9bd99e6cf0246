//! Training loops: regular training, fixed growth schedules and the
//! searched schedule with per-stage supernets.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, Graph, Tensor};
use crate::checkpoint::Checkpoint;
use crate::config::{Mode, RunConfig};
use crate::data::{add_noise, epoch_order, Dataset};
use crate::error::{Error, Result};
use crate::growth::{grow_with_provenance, GrowthOperatorKind, MomentumState};
use crate::model::{build_model, derive_seed, resize_images, DropPath, Forward, ModelConfig, SubNetSpec};
use crate::params::ParamStore;
use crate::schedule::{
    build_growth_space, build_stage_space, spec_scale, uniform_linear_schedule, GrowthSchedule,
    GrowthSpace,
};
use crate::search::{search_stage, CostModel};
use crate::supernet::ElasticSupernet;

/// One line of the metric stream, written after every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// 1-based epoch.
    pub epoch: usize,
    /// 1-based stage.
    pub stage: usize,
    /// `train` or `supernet`.
    pub phase: String,
    pub depth: usize,
    pub grid: usize,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    /// Mean training cost of one optimizer step in this epoch.
    pub step_flops: f64,
    pub cumulative_flops: f64,
    pub wall_seconds: f64,
}

/// Score of one candidate in one stage's search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub stage: usize,
    pub depth: usize,
    pub grid: usize,
    pub loss: f64,
    pub cost: f64,
    pub alpha: f64,
    pub score: f64,
    pub chosen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthEvent {
    /// Epochs completed before the event.
    pub epoch: usize,
    pub from: SubNetSpec,
    pub to: SubNetSpec,
    pub operator: GrowthOperatorKind,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub params: ParamStore,
    pub spec: SubNetSpec,
    /// Sub-network trained in each stage.
    pub schedule: GrowthSchedule,
    pub records: Vec<MetricRecord>,
    pub search: Vec<SearchRecord>,
    pub growth_events: Vec<GrowthEvent>,
    pub optimizer_steps: u64,
}

impl RunOutput {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.eval_accuracy)
    }

    pub fn total_flops(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cumulative_flops)
    }

    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint {
            config: cfg.clone(),
            spec: self.spec,
            optimizer_steps: self.optimizer_steps,
            params: self.params.clone(),
        }
    }
}

/// Writes output files as training progresses.
pub struct RunFiles {
    metrics: BufWriter<File>,
    search: BufWriter<File>,
    growth: BufWriter<File>,
}

impl RunFiles {
    pub const METRICS: &'static str = "metrics.jsonl";
    pub const SEARCH: &'static str = "search.jsonl";
    pub const GROWTH: &'static str = "growth.jsonl";
    pub const SCHEDULE: &'static str = "schedule.txt";
    pub const CHECKPOINT: &'static str = "checkpoint.bin";

    /// Creates `dir` and truncates the record streams in it.
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(dir.join(name))?;
            Ok(BufWriter::new(f))
        };
        Ok(Self {
            metrics: open(Self::METRICS)?,
            search: open(Self::SEARCH)?,
            growth: open(Self::GROWTH)?,
        })
    }

    fn line(w: &mut BufWriter<File>, v: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut *w, v)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

/// Reads a metric stream back, validating every line.
pub fn read_metrics(text: &str) -> Result<Vec<MetricRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Config(format!("metrics line {}: {e}", i + 1)))
        })
        .collect()
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    train: &'a Dataset,
    eval: &'a Dataset,
    cost: CostModel,
    opt: AdamW,
    graph: Graph,
    steps_per_epoch: usize,
    total_steps: usize,
    warmup_steps: usize,
    s1: f64,
    epoch: usize,
    cumulative: f64,
    start: Instant,
    sample_rng: ChaCha8Rng,
    out: RunOutput,
    files: Option<RunFiles>,
}

/// How each step picks its sub-network.
enum Phase<'s> {
    Fixed(SubNetSpec),
    Supernet(&'s ElasticSupernet),
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a RunConfig, train: &'a Dataset, eval: &'a Dataset, s1: f64, files: Option<RunFiles>) -> Result<Self> {
        let model = &cfg.model;
        if train.is_empty() && cfg.plan.total_epochs > 0 {
            return Err(Error::Dataset("training split is empty".into()));
        }
        if train.side() != model.side(model.max_grid) {
            return Err(Error::Config(format!(
                "images are {}px but the full model expects {}px (grid {} × patch {})",
                train.side(),
                model.side(model.max_grid),
                model.max_grid,
                model.patch
            )));
        }
        if train.classes() != model.classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model {}",
                train.classes(),
                model.classes
            )));
        }
        let steps_per_epoch = (train.len() / cfg.optim.batch_size).max(1);
        Ok(Self {
            cfg,
            train,
            eval,
            cost: CostModel::new(model),
            opt: AdamW::new(cfg.optim.adamw()),
            graph: Graph::new(),
            steps_per_epoch,
            total_steps: steps_per_epoch * cfg.plan.total_epochs,
            warmup_steps: steps_per_epoch * cfg.optim.warmup_epochs,
            s1,
            epoch: 0,
            cumulative: 0.0,
            start: Instant::now(),
            sample_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "subnet-sampling")),
            out: RunOutput {
                params: ParamStore::new(),
                spec: model.full_spec(),
                schedule: GrowthSchedule { stages: Vec::new() },
                records: Vec::new(),
                search: Vec::new(),
                growth_events: Vec::new(),
                optimizer_steps: 0,
            },
            files,
        })
    }

    fn model(&self) -> &'a ModelConfig {
        &self.cfg.model
    }

    /// Linear warm-up followed by cosine decay to `min_lr`.
    fn lr_at(&self, step: usize) -> f32 {
        let o = &self.cfg.optim;
        if step < self.warmup_steps {
            return o.lr * (step + 1) as f32 / self.warmup_steps as f32;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        o.min_lr + (o.lr - o.min_lr) * (0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
    }

    fn images_at(&self, images: Tensor, grid: usize) -> Result<Tensor> {
        let side = self.model().side(grid);
        if images.shape()[2] == side {
            Ok(images)
        } else {
            resize_images(&images, side)
        }
    }

    /// One optimizer step on `blocks` of `params` at `spec`.
    fn step(
        &mut self,
        params: &mut ParamStore,
        ema: &mut MomentumState,
        blocks: &[usize],
        spec: SubNetSpec,
        indices: &[usize],
    ) -> Result<f64> {
        let step = self.opt.steps();
        let reg = self.cfg.adareg.intensity(spec_scale(self.model(), spec), self.s1);
        let (images, labels) = self.train.batch(indices);
        let mut images = self.images_at(images, spec.grid)?;
        add_noise(&mut images, reg.input_noise, derive_seed(self.cfg.seed, &format!("noise/{step}")));
        let drop = DropPath {
            prob: reg.drop_path,
            seed: derive_seed(self.cfg.seed, &format!("drop-path/{step}")),
        };
        let model = self.model();
        self.graph.reset();
        let g = &mut self.graph;
        let logits = Forward::new(model, params, true).run(g, blocks, spec.grid, &images, Some(drop))?;
        let loss = g.cross_entropy(logits, &labels)?;
        let value = g.scalar(loss) as f64;
        let grads = g.backward(loss)?;
        params.clear_grads();
        grads.accumulate_into(params)?;
        let names: Vec<String> = grads.names().map(str::to_string).collect();
        g.recycle(grads);
        self.opt.set_lr(self.lr_at(step as usize));
        self.opt.step_named(params, names.iter().map(String::as_str))?;
        params.clear_grads();
        ema.update(params)?;
        self.cumulative += self.cost.cost(spec) * indices.len() as f64;
        Ok(value)
    }

    /// Runs one epoch and appends its metric record.
    fn epoch(&mut self, stage: usize, params: &mut ParamStore, ema: &mut MomentumState, phase: Phase<'_>) -> Result<()> {
        let order = epoch_order(self.train.len(), self.cfg.seed, self.epoch);
        let before = self.cumulative;
        let mut loss_sum = 0.0;
        let b = self.cfg.optim.batch_size.min(self.train.len());
        let full_blocks = |d: usize| (0..d).collect::<Vec<_>>();
        for chunk in order.chunks_exact(b).take(self.steps_per_epoch) {
            let (spec, blocks) = match &phase {
                Phase::Fixed(s) => (*s, full_blocks(s.depth)),
                Phase::Supernet(net) => {
                    let s = net.sample_subnet(&mut self.sample_rng);
                    (s, net.select(s)?.layers)
                }
            };
            loss_sum += self.step(params, ema, &blocks, spec, chunk)?;
        }
        let (spec, blocks, phase_name) = match &phase {
            Phase::Fixed(s) => (*s, full_blocks(s.depth), "train"),
            Phase::Supernet(net) => (net.largest(), net.select(net.largest())?.layers, "supernet"),
        };
        let acc = accuracy(
            self.model(),
            params,
            &blocks,
            spec.grid,
            self.eval,
            self.cfg.optim.eval_batch_size,
            &mut self.graph,
        )?;
        self.epoch += 1;
        let rec = MetricRecord {
            epoch: self.epoch,
            stage: stage + 1,
            phase: phase_name.to_string(),
            depth: spec.depth,
            grid: spec.grid,
            train_loss: loss_sum / self.steps_per_epoch as f64,
            eval_accuracy: acc,
            step_flops: (self.cumulative - before) / self.steps_per_epoch as f64,
            cumulative_flops: self.cumulative,
            wall_seconds: self.start.elapsed().as_secs_f64(),
        };
        if let Some(f) = &mut self.files {
            RunFiles::line(&mut f.metrics, &rec)?;
        }
        self.out.records.push(rec);
        Ok(())
    }

    /// Grows `params` from `from` to `to`, carrying optimizer moments and
    /// restarting the momentum network. No-op when the spec is unchanged.
    fn grow(&mut self, params: &mut ParamStore, ema: &mut MomentumState, from: SubNetSpec, to: SubNetSpec) -> Result<()> {
        if from == to {
            return Ok(());
        }
        let kind = self.cfg.operator();
        let seed = derive_seed(self.cfg.seed, &format!("grow/{}", self.epoch));
        let (grown, prov) = grow_with_provenance(kind, self.model(), params, from, to, Some(ema), seed)?;
        self.opt.remap(&prov, &grown);
        *params = grown;
        ema.rebuild(params);
        let ev = GrowthEvent {
            epoch: self.epoch,
            from,
            to,
            operator: kind,
        };
        if let Some(f) = &mut self.files {
            RunFiles::line(&mut f.growth, &ev)?;
        }
        self.out.growth_events.push(ev);
        Ok(())
    }

    /// Trains a fixed schedule; stage boundaries apply growth.
    fn run_schedule(mut self, schedule: &GrowthSchedule) -> Result<RunOutput> {
        schedule.validate(self.model())?;
        if schedule.stages.len() != self.cfg.plan.stages {
            return Err(Error::Schedule(format!(
                "{} stages in schedule, {} in plan",
                schedule.stages.len(),
                self.cfg.plan.stages
            )));
        }
        let tau = self.cfg.plan.epochs_per_stage();
        let mut spec = schedule.stages[0];
        let mut params = build_model(self.model(), spec, self.cfg.seed)?;
        let mut ema = MomentumState::new(&params, self.cfg.growth.momentum);
        for (k, &next) in schedule.stages.iter().enumerate() {
            self.grow(&mut params, &mut ema, spec, next)?;
            spec = next;
            for _ in 0..tau {
                self.epoch(k, &mut params, &mut ema, Phase::Fixed(spec))?;
            }
        }
        self.out.schedule = schedule.clone();
        self.finish(params, spec)
    }

    fn search_subset(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.train.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.cfg.search.eval_seed));
        idx.truncate(self.cfg.search.eval_subset.min(self.train.len()));
        idx
    }

    /// Mean training loss of `spec` on the search subset, without
    /// stochastic regularisation.
    fn search_loss(&mut self, net: &ElasticSupernet, spec: SubNetSpec, subset: &[usize]) -> Result<f64> {
        let blocks = net.select(spec)?.layers;
        let mut total = 0.0;
        for chunk in subset.chunks(self.cfg.optim.eval_batch_size) {
            let (images, labels) = self.train.batch(chunk);
            let images = self.images_at(images, spec.grid)?;
            let model = self.model();
            self.graph.reset();
            let g = &mut self.graph;
            let logits = Forward::new(model, &net.params, false).run(g, &blocks, spec.grid, &images, None)?;
            let loss = g.cross_entropy(logits, &labels)?;
            total += g.scalar(loss) as f64 * chunk.len() as f64;
        }
        Ok(total / subset.len().max(1) as f64)
    }

    fn run_autoprog(mut self, space: &GrowthSpace) -> Result<RunOutput> {
        let plan = &self.cfg.plan;
        plan.validate_for_search()?;
        let model = self.model();
        let kind = self.cfg.operator();
        let tau = plan.epochs_per_stage();
        let subset = self.search_subset();
        let mut prev: Option<SubNetSpec> = None;
        let mut params = ParamStore::new();
        let mut ema = MomentumState::new(&params, self.cfg.growth.momentum);
        let mut realized = Vec::with_capacity(plan.stages);

        for k in 0..plan.stages {
            let cands = if k + 1 == plan.stages {
                vec![model.full_spec()]
            } else {
                build_stage_space(model, space, k, prev)?
            };
            let mut remaining = tau;
            let chosen = if let [only] = cands[..] {
                match prev {
                    None => {
                        params = build_model(model, only, self.cfg.seed)?;
                        ema = MomentumState::new(&params, self.cfg.growth.momentum);
                    }
                    Some(p) => self.grow(&mut params, &mut ema, p, only)?,
                }
                only
            } else {
                let base = cands.iter().copied().min().expect("non-empty");
                let base = SubNetSpec::new(
                    cands.iter().map(|c| c.depth).min().unwrap_or(base.depth),
                    cands.iter().map(|c| c.grid).min().unwrap_or(base.grid),
                );
                let mut net = match prev {
                    None => ElasticSupernet::from_scratch(model, base, &cands, self.cfg.seed)?,
                    Some(p) => {
                        let seed = derive_seed(self.cfg.seed, &format!("supernet/{k}"));
                        let (net, prov) = ElasticSupernet::build(model, &params, p, &cands, kind, Some(&ema), seed)?;
                        self.opt.remap(&prov, &net.params);
                        net
                    }
                };
                // Sampling only needs the layer roles, so the weights are
                // moved out while the phase borrows `net`.
                let mut sup_params = std::mem::take(&mut net.params);
                let mut sup_ema = MomentumState::new(&sup_params, self.cfg.growth.momentum);
                let epochs = plan.supernet_epochs.min(remaining);
                for _ in 0..epochs {
                    self.epoch(k, &mut sup_params, &mut sup_ema, Phase::Supernet(&net))?;
                }
                remaining -= epochs;
                net.params = sup_params;

                let cost = self.cost.clone();
                let policy = self.cfg.search.alpha;
                let result = search_stage(
                    &cands,
                    |s| cost.cost(s),
                    |s| self.search_loss(&net, s, &subset),
                    policy,
                )?;
                for sc in &result.scores {
                    let rec = SearchRecord {
                        stage: k + 1,
                        depth: sc.spec.depth,
                        grid: sc.spec.grid,
                        loss: sc.loss,
                        cost: sc.cost,
                        alpha: result.alpha,
                        score: sc.score,
                        chosen: sc.spec == result.chosen,
                    };
                    if let Some(f) = &mut self.files {
                        RunFiles::line(&mut f.search, &rec)?;
                    }
                    self.out.search.push(rec);
                }
                let (exported, prov) = net.export_subnet(result.chosen)?;
                let (ema_params, _) = net.export_from(&sup_ema.params, result.chosen)?;
                self.opt.remap(&prov, &exported);
                params = exported;
                ema = MomentumState {
                    params: ema_params,
                    momentum: self.cfg.growth.momentum,
                };
                result.chosen
            };
            for _ in 0..remaining {
                self.epoch(k, &mut params, &mut ema, Phase::Fixed(chosen))?;
            }
            realized.push(chosen);
            prev = Some(chosen);
        }
        self.out.schedule = GrowthSchedule { stages: realized };
        let spec = prev.unwrap_or(model.full_spec());
        self.finish(params, spec)
    }

    fn finish(mut self, params: ParamStore, spec: SubNetSpec) -> Result<RunOutput> {
        self.out.params = params;
        self.out.spec = spec;
        self.out.optimizer_steps = self.opt.steps();
        Ok(self.out)
    }
}

/// Top-1 accuracy of `blocks` at `grid` on a whole split. Images are
/// resampled to the grid's input size.
pub fn accuracy(
    cfg: &ModelConfig,
    params: &ParamStore,
    blocks: &[usize],
    grid: usize,
    data: &Dataset,
    batch: usize,
    graph: &mut Graph,
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let side = cfg.side(grid);
    let mut correct = 0usize;
    for chunk in idx.chunks(batch.max(1)) {
        let (images, labels) = data.batch(chunk);
        let images = if images.shape()[2] == side { images } else { resize_images(&images, side)? };
        graph.reset();
        let logits = Forward::new(cfg, params, false).run(graph, blocks, grid, &images, None)?;
        let c = cfg.classes;
        let v = graph.value(logits);
        for (row, &l) in v.chunks(c).zip(&labels) {
            let best = (0..c).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap_or(0);
            correct += (best == l) as usize;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy of a checkpoint on `data`, optionally at a different grid; the
/// positional table is resampled on the fly.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, grid: Option<usize>) -> Result<f64> {
    let cfg = &ckpt.config.model;
    let grid = grid.unwrap_or(ckpt.spec.grid);
    if grid == 0 {
        return Err(Error::Config("evaluation grid must be positive".into()));
    }
    let blocks: Vec<usize> = (0..ckpt.spec.depth).collect();
    accuracy(cfg, &ckpt.params, &blocks, grid, data, ckpt.config.optim.eval_batch_size, &mut Graph::new())
}

fn write_outputs(cfg: &RunConfig, out: &RunOutput, dir: &Path) -> Result<()> {
    out.checkpoint(cfg).save(&dir.join(RunFiles::CHECKPOINT))?;
    if cfg.mode != Mode::Baseline && !out.schedule.stages.is_empty() {
        out.schedule.save(&dir.join(RunFiles::SCHEDULE))?;
    }
    Ok(())
}

/// Entry point for all modes. With `schedule` set, AutoProg retrains that
/// schedule without supernet epochs. When `out_dir` is given the metric,
/// search and growth streams plus the final checkpoint are written there.
pub fn run(
    cfg: &RunConfig,
    train: &Dataset,
    eval: &Dataset,
    schedule: Option<&GrowthSchedule>,
    out_dir: Option<&Path>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let files = out_dir.map(RunFiles::create).transpose()?;
    let model = &cfg.model;
    let out = match (cfg.mode, schedule) {
        (Mode::Baseline, None) => {
            let stages = GrowthSchedule {
                stages: vec![model.full_spec(); cfg.plan.stages],
            };
            Trainer::new(cfg, train, eval, 1.0, files)?.run_schedule(&stages)?
        }
        (Mode::Baseline, Some(_)) => {
            return Err(Error::Config("a schedule file only applies to prog and autoprog runs".into()))
        }
        (Mode::Prog, None) | (Mode::AutoProg, None) => {
            let space = build_growth_space(model, cfg.growth.s1, cfg.plan.stages)?;
            let t = Trainer::new(cfg, train, eval, space.s1(), files)?;
            if cfg.mode == Mode::Prog {
                t.run_schedule(&uniform_linear_schedule(&space, cfg.plan.stages))?
            } else {
                t.run_autoprog(&space)?
            }
        }
        (_, Some(s)) => {
            let s1 = s
                .stages
                .iter()
                .map(|&sp| spec_scale(model, sp))
                .fold(1.0, f64::min);
            Trainer::new(cfg, train, eval, s1, files)?.run_schedule(s)?
        }
    };
    if let Some(dir) = out_dir {
        write_outputs(cfg, &out, dir)?;
    }
    Ok(out)
}
