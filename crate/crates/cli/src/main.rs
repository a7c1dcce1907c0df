use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use arl_cli::commands::{self, EvalArgs, LabelgenArgs};
use arl_cli::{resolve_seed, CmdResult, DataSource, Failure, Precision, RunConfig};
use arl_core::autodiff::OpKind;
use arl_core::training::SearchBudget;
use arl_core::{ArlError, Mode, Split};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "arl", version, about = "Absolute-relative few-shot learning at desk scale")]
struct Cli {
    /// Worker threads for evaluation; 1 makes every command bit-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic attributed dataset on disk.
    Gen {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 32)]
        classes: usize,
        #[arg(long = "per-class", default_value_t = 30)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised ArL (or baseline) training.
    Train(TrainOpts),
    /// Unsupervised contrastive training on augmentation keys.
    TrainUnsup(TrainOpts),
    /// Episodic evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Manifest path or synthetic:SEED,CLASSES,PER_CLASS,SIDE.
        #[arg(long, default_value = "synthetic:7,32,30,32")]
        data: DataSource,
        #[arg(long = "L", default_value_t = 5)]
        way: usize,
        #[arg(long = "Z", default_value_t = 1)]
        shot: usize,
        #[arg(long = "Q", default_value_t = 15)]
        queries: usize,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every op and the full objective.
    Gradcheck {
        #[arg(long, default_value = "f64")]
        precision: Precision,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "inject-fault", hide = true)]
        inject_fault: Option<String>,
    },
    /// Validation accuracy as a function of the soft-label exponent p.
    SweepP {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4")]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the pairwise relation labels of one sampled episode.
    Labelgen {
        #[arg(long, default_value = "synthetic:7,32,30,32")]
        data: DataSource,
        #[arg(long = "episode-seed")]
        episode_seed: Option<u64>,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
        #[arg(long = "L", default_value_t = 5)]
        way: usize,
        #[arg(long = "Z", default_value_t = 1)]
        shot: usize,
        #[arg(long = "Q", default_value_t = 1)]
        queries: usize,
        #[arg(long, default_value = "train", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Random search of (alpha, beta, gamma) on validation episodes.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 500)]
        iterations: usize,
        #[arg(long = "val-episodes", default_value_t = 200)]
        val_episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct TrainOpts {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `out` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from `model.ckpt` in the output directory if present.
    #[arg(long)]
    resume: bool,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{}`", s)),
    }
}

fn load_config(path: &PathBuf, out: Option<PathBuf>, seed: Option<u64>) -> CmdResult<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(o) = out {
        cfg.out = o;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CmdResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| ArlError::Config(format!("thread pool: {}", e)))?;
    }
    let log = &mut io::stdout();
    match cli.cmd {
        Cmd::Gen {
            seed,
            classes,
            per_class,
            side,
            out,
        } => {
            commands::gen(resolve_seed(seed)?, classes, per_class, side, &out, log)?;
        }
        Cmd::Train(o) => {
            let cfg = load_config(&o.config, o.out, o.seed)?;
            commands::train(&cfg, Mode::Supervised, o.resume, log)?;
        }
        Cmd::TrainUnsup(o) => {
            let cfg = load_config(&o.config, o.out, o.seed)?;
            commands::train(&cfg, Mode::Unsupervised, o.resume, log)?;
        }
        Cmd::Eval {
            ckpt,
            data,
            way,
            shot,
            queries,
            episodes,
            seed,
            split,
            out,
        } => {
            let out = out.unwrap_or_else(|| ckpt.parent().map(PathBuf::from).unwrap_or_default());
            let args = EvalArgs {
                ckpt,
                data,
                split,
                way,
                shot,
                queries,
                episodes,
                seed: resolve_seed(seed)?,
                out,
            };
            commands::eval(&args, log)?;
        }
        Cmd::Gradcheck {
            precision,
            seed,
            inject_fault,
        } => {
            let fault = match inject_fault {
                Some(name) => Some(
                    OpKind::from_name(&name).ok_or_else(|| ArlError::Config(format!("no op named `{}`", name)))?,
                ),
                None => None,
            };
            commands::gradcheck(precision, resolve_seed(seed)?, fault, log)?;
        }
        Cmd::SweepP { config, values, out } => {
            let cfg = load_config(&config, out, None)?;
            commands::sweep_p(&cfg, &values, log)?;
        }
        Cmd::Labelgen {
            data,
            episode_seed,
            p,
            way,
            shot,
            queries,
            split,
            out,
        } => {
            let args = LabelgenArgs {
                data,
                split,
                way,
                shot,
                queries,
                episode_seed: resolve_seed(episode_seed)?,
                p,
                out,
            };
            commands::labelgen(&args, log)?;
        }
        Cmd::Search {
            config,
            trials,
            iterations,
            val_episodes,
            seed,
            out,
        } => {
            let cfg = load_config(&config, out, None)?;
            let budget = SearchBudget {
                trials,
                iterations,
                val_episodes,
            };
            commands::search(&cfg, &budget, resolve_seed(seed)?, log)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            if let Failure::Arl(ArlError::DescriptorMismatch { checkpoint, dataset }) = &e {
                eprintln!("checkpoint: {}\ndataset:    {}", checkpoint, dataset);
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
