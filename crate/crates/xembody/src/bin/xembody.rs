//! Command-line front end: dataset collection, pretraining, finetuning,
//! evaluation, gradient checking, and episode inspection.

use clap::{Args, Parser, Subcommand};
use std::error::Error;
use std::path::{Path, PathBuf};

use xembody::dataset::{
    compute_norm_stats, load_episode, save_episode, Episode, Manifest, NormStats,
};
use xembody::embodiment::{builtin, EmbodimentSpec, BUILTIN_NAMES};
use xembody::gradcheck::{run_gradcheck_f32, run_gradcheck_f64};
use xembody::harness::{collect_dataset, evaluate, toy_collect, write_eval_csv, TaskConfig};
use xembody::mxt::{load_checkpoint, model_from_checkpoint, MxtConfig, MxtModel};
use xembody::training::{pretrain, train, write_loss_history, TrainConfig};

#[derive(Parser)]
#[command(name = "xembody", about = "Cross-embodiment imitation learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainArgs {
    /// Training configuration JSON; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the number of optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Write the per-step loss history to this CSV file.
    #[arg(long)]
    history: Option<PathBuf>,
}

impl TrainArgs {
    fn load(&self) -> Result<TrainConfig, Box<dyn Error>> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the scripted expert and record a dataset of episodes.
    Collect {
        /// Task name: toy-collect or toy-collect-bi.
        #[arg(long)]
        task: String,
        /// Embodiment name, e.g. locoman-uni-r or human-bi.
        #[arg(long)]
        embodiment: String,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for episode files, stats, and the manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Jointly pretrain one shared trunk over one or more datasets.
    Pretrain {
        /// Dataset manifest path; repeat for multiple source embodiments.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
        /// Use the aggregated single-tokenizer ablation architecture.
        #[arg(long)]
        agg: bool,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetune a fresh model around a pretrained trunk.
    Finetune {
        /// Pretraining checkpoint providing the trunk weights.
        #[arg(long)]
        trunk: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from random initialization on one dataset.
    TrainScratch {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        /// Use the aggregated single-tokenizer ablation architecture.
        #[arg(long)]
        agg: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the fixed evaluation protocol on a trained policy.
    Eval {
        /// Policy checkpoint (embeds architecture and normalization stats).
        #[arg(long)]
        policy: PathBuf,
        /// Task name: toy-collect or toy-collect-bi.
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 24)]
        trials_id: usize,
        #[arg(long, default_value_t = 12)]
        trials_ood: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Steps of each predicted chunk to execute before re-inference
        /// (0 = full chunk).
        #[arg(long, default_value_t = 0)]
        replan: usize,
        /// Per-trial results CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Substep completion-rate CSV (one row per substep and split).
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Full JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        /// Write both reports as JSON to this path.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print a human-readable summary of one episode file.
    Inspect {
        #[arg(long)]
        episode: PathBuf,
    },
}

fn task_by_name(name: &str) -> Result<TaskConfig, Box<dyn Error>> {
    match name {
        "toy-collect" => Ok(toy_collect(false)),
        "toy-collect-bi" => Ok(toy_collect(true)),
        other => Err(format!("unknown task {other}; available: toy-collect, toy-collect-bi").into()),
    }
}

fn spec_by_name(name: &str) -> Result<EmbodimentSpec, Box<dyn Error>> {
    builtin(name)
        .map_err(|_| format!("unknown embodiment {name}; available: {}", BUILTIN_NAMES.join(", ")).into())
}

fn load_dataset(manifest_path: &Path) -> Result<(EmbodimentSpec, Vec<Episode>, NormStats), Box<dyn Error>> {
    let manifest = Manifest::load(manifest_path)?;
    let spec = spec_by_name(&manifest.embodiment)?;
    let episodes = manifest.load_episodes(manifest_path)?;
    let stats = match &manifest.stats {
        Some(p) => {
            let base = manifest_path.parent().unwrap_or(Path::new("."));
            let full = if p.is_absolute() { p.clone() } else { base.join(p) };
            NormStats::load(&full)?
        }
        None => compute_norm_stats(&episodes)?,
    };
    Ok((spec, episodes, stats))
}

fn cmd_collect(
    task: &str,
    embodiment: &str,
    episodes: usize,
    seed: u64,
    out: &Path,
) -> Result<(), Box<dyn Error>> {
    let task = task_by_name(task)?;
    let spec = spec_by_name(embodiment)?;
    std::fs::create_dir_all(out)?;
    let dataset = collect_dataset(&spec, &task, episodes, seed)?;
    let stats = compute_norm_stats(&dataset)?;
    let mut paths = Vec::with_capacity(dataset.len());
    for (i, ep) in dataset.iter().enumerate() {
        let rel = PathBuf::from(format!("ep_{i:04}.xep"));
        save_episode(ep, &out.join(&rel))?;
        paths.push(rel);
    }
    stats.save(&out.join("stats.json"))?;
    let manifest = Manifest {
        embodiment: spec.name.clone(),
        episodes: paths,
        stats: Some(PathBuf::from("stats.json")),
    };
    manifest.save(&out.join("manifest.json"))?;
    let frames: usize = dataset.iter().map(|e| e.len()).sum();
    println!(
        "collected {} episodes ({} frames) for {} on {} -> {}",
        dataset.len(),
        frames,
        spec.name,
        task.name,
        out.display()
    );
    Ok(())
}

fn cmd_pretrain(
    data: &[PathBuf],
    targs: &TrainArgs,
    agg: bool,
    out: &Path,
) -> Result<(), Box<dyn Error>> {
    let cfg = targs.load()?;
    let mut mcfg = MxtConfig::default();
    mcfg.agg = agg;
    let datasets: Vec<(EmbodimentSpec, Vec<Episode>, NormStats)> = data
        .iter()
        .map(|p| load_dataset(p))
        .collect::<Result<_, _>>()?;
    let outcome = pretrain::<f32>(&mcfg, &datasets, &cfg, Some(out))?;
    if let Some(h) = &targs.history {
        write_loss_history(h, &outcome.history)?;
    }
    println!(
        "pretrained on {} datasets for {} steps: val {:.6} -> best {:.6} at step {} -> {}",
        datasets.len(),
        cfg.steps,
        outcome.initial_val,
        outcome.best_val,
        outcome.best_step,
        out.display()
    );
    Ok(())
}

fn cmd_finetune(
    trunk: &Path,
    data: &Path,
    targs: &TrainArgs,
    out: &Path,
) -> Result<(), Box<dyn Error>> {
    let cfg = targs.load()?;
    let ckpt = load_checkpoint::<f32>(trunk)?;
    let (spec, episodes, stats) = load_dataset(data)?;
    let mut model = MxtModel::<f32>::build(ckpt.config.clone(), &spec, cfg.seed);
    model.load_trunk_from(&ckpt.store).map_err(|e| format!("trunk load: {e}"))?;
    let outcome = train(
        &mut model,
        &episodes,
        &stats,
        &cfg,
        cfg.lr_finetune,
        cfg.trunk_dropout_finetune,
        Some(out),
    )?;
    if let Some(h) = &targs.history {
        write_loss_history(h, &outcome.history)?;
    }
    println!(
        "finetuned {} for {} steps: val {:.6} -> best {:.6} at step {} -> {}",
        spec.name,
        cfg.steps,
        outcome.initial_val,
        outcome.best_val,
        outcome.best_step,
        out.display()
    );
    Ok(())
}

fn cmd_train_scratch(
    data: &Path,
    targs: &TrainArgs,
    agg: bool,
    out: &Path,
) -> Result<(), Box<dyn Error>> {
    let cfg = targs.load()?;
    let mut mcfg = MxtConfig::default();
    mcfg.agg = agg;
    let (spec, episodes, stats) = load_dataset(data)?;
    let mut model = MxtModel::<f32>::build(mcfg, &spec, cfg.seed);
    let outcome = train(
        &mut model,
        &episodes,
        &stats,
        &cfg,
        cfg.lr_pretrain,
        cfg.trunk_dropout_finetune,
        Some(out),
    )?;
    if let Some(h) = &targs.history {
        write_loss_history(h, &outcome.history)?;
    }
    println!(
        "trained {} from scratch for {} steps: val {:.6} -> best {:.6} at step {} -> {}",
        spec.name,
        cfg.steps,
        outcome.initial_val,
        outcome.best_val,
        outcome.best_step,
        out.display()
    );
    Ok(())
}

fn write_plot_csv(path: &Path, report: &xembody::harness::EvalReport) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "split,substep,completion_rate")?;
    for (split, stats) in [("id", &report.id), ("ood", &report.ood)] {
        for (i, rate) in stats.substep_rates.iter().enumerate() {
            writeln!(f, "{split},{i},{rate:.6}")?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    policy: &Path,
    task: &str,
    trials_id: usize,
    trials_ood: usize,
    seed: u64,
    replan: usize,
    csv: Option<&Path>,
    plot: Option<&Path>,
    report_out: Option<&Path>,
) -> Result<(), Box<dyn Error>> {
    let mut task = task_by_name(task)?;
    task.replan = replan;
    let ckpt = load_checkpoint::<f32>(policy)?;
    let spec = spec_by_name(&ckpt.embodiment)?;
    let model = model_from_checkpoint(&ckpt, &spec)?;
    let stats = ckpt
        .stats
        .as_ref()
        .ok_or("checkpoint has no normalization stats; was it produced by finetune/train-scratch?")?;
    let report = evaluate(&model, stats, &task, trials_id, trials_ood, seed);
    if let Some(p) = csv {
        write_eval_csv(p, &report)?;
    }
    if let Some(p) = plot {
        write_plot_csv(p, &report)?;
    }
    if let Some(p) = report_out {
        report.save_json(p)?;
    }
    for (name, s) in [("id", &report.id), ("ood", &report.ood)] {
        println!(
            "{name}: {}/{} successes (SR {:.1}%), mean score {:.2}",
            s.successes,
            s.trials,
            100.0 * s.success_rate,
            s.mean_score
        );
    }
    Ok(())
}

fn cmd_gradcheck(json: Option<&Path>) -> Result<(), Box<dyn Error>> {
    let r64 = run_gradcheck_f64();
    let r32 = run_gradcheck_f32();
    println!("{}", r64.summary());
    println!("{}", r32.summary());
    if let Some(p) = json {
        std::fs::write(p, serde_json::to_string_pretty(&[&r64, &r32])?)?;
    }
    if r64.pass && r32.pass {
        Ok(())
    } else {
        Err("gradient check failed".into())
    }
}

fn cmd_inspect(path: &Path) -> Result<(), Box<dyn Error>> {
    let ep = load_episode(path)?;
    println!("embodiment: {}", ep.embodiment);
    println!("task: {} (seed {})", ep.meta.task, ep.meta.seed);
    println!("frames: {}", ep.len());
    if let (Some(first), Some(last)) = (ep.frames.first(), ep.frames.last()) {
        println!("duration: {:.2} s", last.timestamp - first.timestamp);
    }
    println!("substeps achieved: {:?}", ep.meta.substep_success);
    println!("observations:");
    for (m, shape) in &ep.schema.obs {
        println!("  {:<18} {:?}", m.name(), shape);
    }
    println!("actions:");
    for (m, dim) in &ep.schema.act {
        println!("  {:<18} dim {}", m.name(), dim);
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Collect {
            task,
            embodiment,
            episodes,
            seed,
            out,
        } => cmd_collect(task, embodiment, *episodes, *seed, out),
        Command::Pretrain {
            data,
            train,
            agg,
            out,
        } => cmd_pretrain(data, train, *agg, out),
        Command::Finetune {
            trunk,
            data,
            train,
            out,
        } => cmd_finetune(trunk, data, train, out),
        Command::TrainScratch {
            data,
            train,
            agg,
            out,
        } => cmd_train_scratch(data, train, *agg, out),
        Command::Eval {
            policy,
            task,
            trials_id,
            trials_ood,
            seed,
            replan,
            csv,
            plot,
            report,
        } => cmd_eval(
            policy,
            task,
            *trials_id,
            *trials_ood,
            *seed,
            *replan,
            csv.as_deref(),
            plot.as_deref(),
            report.as_deref(),
        ),
        Command::Gradcheck { json } => cmd_gradcheck(json.as_deref()),
        Command::Inspect { episode } => cmd_inspect(episode),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
