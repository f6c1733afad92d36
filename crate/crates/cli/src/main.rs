use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seco::online_matching::OmOptimizer;
use seco_cli::commands;
use seco_cli::{LoadedConfig, RunConfig};

/// Visually guided separation of unseen instrument categories.
#[derive(Parser, Debug)]
#[command(name = "seco", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration (a `resolved_config.json` reproduces a run).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed of the command's randomness (dataset, initialization and
    /// batches, or test-pair selection).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct Scoring {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Number of test pairs.
    #[arg(long)]
    pairs: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
    /// BSS-eval distortion filter length.
    #[arg(long)]
    filter_len: Option<usize>,
    /// Online matching step size.
    #[arg(long)]
    beta: Option<f64>,
    /// Online matching objective weight.
    #[arg(long)]
    om_lambda: Option<f64>,
    /// Online matching optimizer.
    #[arg(long, value_enum)]
    optimizer: Option<Optimizer>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic instrument dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        clips_per_cat: Option<usize>,
        #[arg(long)]
        train_cats: Option<usize>,
        #[arg(long)]
        test_cats: Option<usize>,
        #[arg(long)]
        clip_seconds: Option<f64>,
    },
    /// Train the separation model (resumes if the output holds a checkpoint).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        batch: Option<usize>,
        /// Weight of the consistency objective.
        #[arg(long)]
        lambda: Option<f64>,
        /// Drop the inter-modal consistency term.
        #[arg(long)]
        no_inter: bool,
        /// Drop the intra-modal consistency term.
        #[arg(long)]
        no_intra: bool,
    },
    /// Score the trained model on the test pairs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scoring: Scoring,
    },
    /// Score before and after per-pair online matching.
    OnlineMatch {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scoring: Scoring,
        /// Adaptation steps per pair.
        #[arg(long)]
        om_iters: Option<usize>,
    },
    /// Score after each of several online matching step counts.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scoring: Scoring,
        /// Comma-separated step counts.
        #[arg(long, value_delimiter = ',')]
        om_iters: Option<Vec<usize>>,
    },
    /// Collect summaries and training logs of several runs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directories.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
}

fn base(common: &Common) -> seco::Result<LoadedConfig> {
    let mut loaded = LoadedConfig::from_file(common.config.as_deref())?;
    if let Some(out) = &common.out {
        loaded.config.out_dir = Some(out.clone());
    }
    Ok(loaded)
}

fn apply_scoring(cfg: &mut RunConfig, s: &Scoring, seed: Option<u64>) {
    if let Some(d) = &s.data {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(m) = &s.model {
        cfg.model_path = Some(m.clone());
    }
    if let Some(v) = s.pairs {
        cfg.eval.test_pairs = v;
    }
    if let Some(v) = s.jobs {
        cfg.eval.jobs = v;
    }
    if let Some(v) = s.filter_len {
        cfg.eval.filter_len = v;
    }
    if let Some(v) = s.beta {
        cfg.online_matching.beta = v;
    }
    if let Some(v) = s.om_lambda {
        cfg.online_matching.lambda = v;
    }
    if let Some(v) = s.optimizer {
        cfg.online_matching.optimizer = match v {
            Optimizer::Sgd => OmOptimizer::Sgd,
            Optimizer::Adam => OmOptimizer::Adam,
        };
    }
    if let Some(v) = seed {
        cfg.eval.test_seed = v;
    }
}

fn run(cli: Cli) -> seco::Result<()> {
    match cli.command {
        Command::GenData {
            common,
            clips_per_cat,
            train_cats,
            test_cats,
            clip_seconds,
        } => {
            let mut cfg = base(&common)?.config;
            let s = &mut cfg.synth;
            if let Some(v) = common.seed {
                s.seed = v;
            }
            if let Some(v) = clips_per_cat {
                s.clips_per_category = v;
            }
            if let Some(v) = train_cats {
                s.train_categories = v;
            }
            if let Some(v) = test_cats {
                s.test_categories = v;
            }
            if let Some(v) = clip_seconds {
                s.clip_seconds = v;
            }
            commands::gen_data(&cfg).map(|_| ())
        }
        Command::Train {
            common,
            data,
            iters,
            batch,
            lambda,
            no_inter,
            no_intra,
        } => {
            let mut cfg = base(&common)?.config;
            if let Some(d) = data {
                cfg.data_dir = Some(d);
            }
            let t = &mut cfg.train;
            if let Some(v) = common.seed {
                t.seed = v;
            }
            if let Some(v) = iters {
                t.total_iters = v;
            }
            if let Some(v) = batch {
                t.batch_size = v;
            }
            if let Some(v) = lambda {
                t.lambda = v;
            }
            if no_inter {
                t.use_inter = false;
            }
            if no_intra {
                t.use_intra = false;
            }
            commands::train(&cfg).map(|_| ())
        }
        Command::Eval { common, scoring } => {
            let mut loaded = base(&common)?;
            apply_scoring(&mut loaded.config, &scoring, common.seed);
            let mut cfg = loaded.config.clone();
            commands::eval(&mut cfg, &loaded).map(|_| ())
        }
        Command::OnlineMatch {
            common,
            scoring,
            om_iters,
        } => {
            let mut loaded = base(&common)?;
            apply_scoring(&mut loaded.config, &scoring, common.seed);
            if let Some(t) = om_iters {
                loaded.config.online_matching.iterations = t;
            }
            let mut cfg = loaded.config.clone();
            commands::online_match(&mut cfg, &loaded).map(|_| ())
        }
        Command::Sweep {
            common,
            scoring,
            om_iters,
        } => {
            let mut loaded = base(&common)?;
            apply_scoring(&mut loaded.config, &scoring, common.seed);
            if let Some(t) = om_iters {
                loaded.config.eval.om_iters = t;
            }
            let mut cfg = loaded.config.clone();
            commands::sweep(&mut cfg, &loaded).map(|_| ())
        }
        Command::Report { common, runs } => {
            let cfg = base(&common)?.config;
            commands::report(&cfg, &runs).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
