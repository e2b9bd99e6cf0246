use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use autoprog_core::checkpoint::Checkpoint;
use autoprog_core::config::{Mode, RunConfig};
use autoprog_core::schedule::GrowthSchedule;
use autoprog_core::train::{self, read_metrics, MetricRecord};

mod plot;

#[derive(Parser)]
#[command(name = "autoprog", version, about = "Progressive training for toy vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Prog,
    Autoprog,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::Prog => Mode::Prog,
            ModeArg::Autoprog => Mode::AutoProg,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, schedule and checkpoint.
    Train {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        config: PathBuf,
        /// Retrain a previously searched schedule (no supernet epochs).
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-1 accuracy of a checkpoint, optionally at another grid.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long, value_enum, default_value = "eval")]
        split: Split,
    },
    /// Render a learning curve from a metric stream.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        /// Also write an SVG chart here.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train {
            mode,
            config,
            schedule,
            seed,
            out,
        } => train_cmd(mode.into(), &config, schedule.as_deref(), seed, out),
        Command::Eval { checkpoint, grid, split } => eval_cmd(&checkpoint, grid, split),
        Command::Plot { metrics, svg } => plot_cmd(&metrics, svg.as_deref()),
    }
}

fn train_cmd(mode: Mode, path: &Path, schedule: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::load(path)?;
    cfg.mode = mode;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    let schedule = schedule
        .map(|p| GrowthSchedule::load(p).with_context(|| format!("reading schedule {}", p.display())))
        .transpose()?;
    let (train_set, eval_set) = cfg.data.load().context("loading dataset")?;
    eprintln!(
        "{} run: {} train / {} eval images, {} epochs, writing to {}",
        cfg.mode,
        train_set.len(),
        eval_set.len(),
        cfg.plan.total_epochs,
        cfg.out_dir.display()
    );
    let out = train::run(&cfg, &train_set, &eval_set, schedule.as_ref(), Some(&cfg.out_dir))?;
    for r in &out.records {
        print_record(r);
    }
    if cfg.mode != Mode::Baseline {
        let stages: Vec<String> = out.schedule.stages.iter().map(|s| format!("({}, {})", s.depth, s.grid)).collect();
        println!("schedule: {}", stages.join(" -> "));
    }
    println!(
        "final accuracy {:.4}, {:.3e} FLOPs, {} optimizer steps",
        out.final_accuracy().unwrap_or(0.0),
        out.total_flops(),
        out.optimizer_steps
    );
    Ok(())
}

fn print_record(r: &MetricRecord) {
    println!(
        "epoch {:>3} stage {} {:<8} depth {:>2} grid {:>2}  loss {:.4}  acc {:.4}  flops {:.3e}  {:.1}s",
        r.epoch, r.stage, r.phase, r.depth, r.grid, r.train_loss, r.eval_accuracy, r.cumulative_flops, r.wall_seconds
    );
}

fn eval_cmd(path: &Path, grid: Option<usize>, split: Split) -> Result<()> {
    let ckpt = Checkpoint::load(path)?;
    let (train_set, eval_set) = ckpt.config.data.load().context("loading dataset named in checkpoint")?;
    let data = match split {
        Split::Train => &train_set,
        Split::Eval => &eval_set,
    };
    let grid_used = grid.unwrap_or(ckpt.spec.grid);
    let acc = train::evaluate(&ckpt, data, grid)?;
    println!(
        "depth {} grid {} (trained at {}): accuracy {:.4} on {} images",
        ckpt.spec.depth,
        grid_used,
        ckpt.spec.grid,
        acc,
        data.len()
    );
    Ok(())
}

fn plot_cmd(path: &Path, svg: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let records = read_metrics(&text)?;
    if records.is_empty() {
        bail!("{} has no records", path.display());
    }
    print!("{}", plot::text_chart(&records, 60, 16));
    if let Some(p) = svg {
        std::fs::write(p, plot::svg_chart(&records))?;
        println!("wrote {}", p.display());
    }
    Ok(())
}
