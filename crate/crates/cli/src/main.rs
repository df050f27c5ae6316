use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use objabn::data::generate_synthetic;
use objabn::harness::{
    evaluate, load_model, train, visualize, write_metrics, Checkpoint, RunConfig,
};
use objabn::{Dataset, Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "objabn",
    version,
    about = "Object-aware attention branch networks for video"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "TOML")]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Trained checkpoint; its configuration is used unless --config is given.
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: Split,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic moving-shapes dataset.
    Generate,
    /// Train a model.
    Train {
        /// Continue from this checkpoint up to the configured epoch count.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Accuracy, map agreement with masks and entropy table.
    Eval(EvalArgs),
    /// Attention sharpness table only (`entropy.csv`).
    Entropy(EvalArgs),
    /// Overlay the attention maps of one video.
    Visualize {
        #[command(flatten)]
        eval: EvalArgs,
        /// Video id inside the chosen split.
        #[arg(long)]
        video: String,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.synthetic.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

/// Checkpoint plus the configuration that decides where its data lives.
fn open_checkpoint(common: &Common, args: &EvalArgs) -> Result<(Checkpoint, RunConfig)> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => ckpt.config.clone(),
    };
    Ok((ckpt, cfg))
}

fn open_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    Dataset::open(&match split {
        Split::Train => cfg.data.train_root(),
        Split::Val => cfg.data.val_root(),
    })
}

fn out_dir(common: &Common, ckpt_path: &Path, name: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        ckpt_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(name)
    })
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Generate => {
            let cfg = load_config(common)?;
            let root = common.out.clone().unwrap_or_else(|| cfg.data.root.clone());
            let summary = generate_synthetic(&cfg.synthetic, &root)?;
            println!(
                "wrote {} train and {} val videos ({} classes) to {}",
                summary.train_videos,
                summary.val_videos,
                summary.classes.len(),
                root.display()
            );
        }
        Command::Train { resume } => {
            let cfg = load_config(common)?;
            let report = train(&cfg, resume.as_deref())?;
            if let Some(last) = report.epochs.last() {
                println!(
                    "epoch {} loss {:.4} train accuracy {:.3}",
                    last.epoch, last.mean_total, last.train_accuracy
                );
            }
            println!("final checkpoint {}", report.final_checkpoint.display());
        }
        Command::Eval(args) => {
            let (ckpt, cfg) = open_checkpoint(common, args)?;
            let ds = open_split(&cfg, args.split)?;
            let metrics = evaluate(&ckpt, &ds)?;
            let dir = out_dir(common, &args.checkpoint, "eval");
            write_metrics(&metrics, &dir)?;
            print!("{}", metrics.to_text());
        }
        Command::Entropy(args) => {
            let (ckpt, cfg) = open_checkpoint(common, args)?;
            let ds = open_split(&cfg, args.split)?;
            let metrics = evaluate(&ckpt, &ds)?;
            let dir = out_dir(common, &args.checkpoint, "entropy");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join("entropy.csv");
            std::fs::write(&path, metrics.entropy_table.to_csv())
                .map_err(|e| Error::io(&path, e))?;
            println!("{}", metrics.entropy_table.to_text());
        }
        Command::Visualize { eval, video } => {
            let (ckpt, cfg) = open_checkpoint(common, eval)?;
            let ds = open_split(&cfg, eval.split)?;
            let v =
                ds.videos.iter().find(|v| &v.id == video).ok_or_else(|| {
                    Error::data(format!("no video {video:?} in the chosen split"))
                })?;
            let (model, store) = load_model(&ckpt)?;
            let dir = out_dir(common, &eval.checkpoint, "visualize").join(video);
            let vis = visualize(&model, &store, v, &ckpt.config.val_protocol(), &dir)?;
            println!(
                "{} ({} rows x {} frames)",
                vis.grid.display(),
                vis.rows,
                vis.columns
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
