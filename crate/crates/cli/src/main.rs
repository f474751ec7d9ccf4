use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trajcon_core::metrics::PredictionMode;
use trajcon_core::pipeline::{
    cmd_ablate, cmd_embed, cmd_eval, cmd_gen_data, cmd_train, DataPart, InferenceArgs, Regime, RunConfig,
};
use trajcon_core::{Error, Result};

/// Action-aware contrastive trajectory prediction at desk scale.
#[derive(Parser, Debug)]
#[command(name = "trajcon", version)]
struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the dataset path (JSONL); synthetic data is used when unset.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Prints the effective configuration and exits.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a synthetic dataset and its vocabulary.
    GenData {
        /// Number of records.
        #[arg(long)]
        records: Option<usize>,
        /// Seed of the generator (independent of the run seed).
        #[arg(long)]
        data_seed: Option<u64>,
    },
    /// Trains a model and writes checkpoints and logs.
    Train(TrainArgs),
    /// Scores sampled predictions and writes metrics files.
    Eval {
        #[command(flatten)]
        target: Target,
        /// Number of sampled futures per window.
        #[arg(long)]
        samples: Option<usize>,
        /// Scores one sample per window instead of the best of all samples.
        #[arg(long)]
        single: bool,
        /// Prediction horizons in seconds, comma separated.
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<f64>>,
    },
    /// Exports encoder embeddings as CSV.
    Embed {
        #[command(flatten)]
        target: Target,
    },
    /// Runs a grid of regimes, betas and seeds.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75")]
        betas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "none,simclr,abc,abc_plus")]
        regimes: Vec<Regime>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[command(flatten)]
        train: TrainArgs,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    regime: Option<Regime>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Frozen checkpoint directory used to draw synthetic samples under abc_plus.
    #[arg(long)]
    generator_checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Target {
    /// Run directory written by `train`; defaults to the output directory.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Which records to use: train, val, test or all.
    #[arg(long, default_value = "test")]
    split: DataPart,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(r) = self.regime {
            cfg.loss.regime = r;
        }
        if let Some(b) = self.beta {
            cfg.loss.beta = b;
        }
        if let Some(e) = self.epochs {
            cfg.optim.epochs = e;
        }
        if let Some(g) = &self.generator_checkpoint {
            cfg.loss.generator_checkpoint = Some(g.clone());
        }
    }
}

impl Target {
    fn args(&self, cfg: &RunConfig) -> InferenceArgs {
        InferenceArgs {
            run: self.run.clone().unwrap_or_else(|| cfg.out.clone()),
            out: cfg.out.clone(),
            part: self.split,
        }
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(d) = &cli.data {
        cfg.data.path = Some(d.clone());
    }
    match &cli.command {
        Some(Command::GenData { records, data_seed }) => {
            if let Some(n) = records {
                cfg.data.synthetic.n_records = *n;
            }
            if let Some(s) = data_seed {
                cfg.data.synthetic.seed = *s;
            }
        }
        Some(Command::Train(t)) | Some(Command::Ablate { train: t, .. }) => t.apply(&mut cfg),
        Some(Command::Eval {
            samples,
            single,
            horizons,
            ..
        }) => {
            if let Some(l) = samples {
                cfg.eval.samples = *l;
            }
            if *single {
                cfg.eval.mode = PredictionMode::Single;
            }
            if let Some(h) = horizons {
                cfg.eval.horizons = h.clone();
            }
        }
        _ => {}
    }
    cfg.normalized()
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(Error::Config("no command given (see --help)".into()));
    };
    match command {
        Command::GenData { .. } => {
            let s = cmd_gen_data(&cfg, &cfg.out)?;
            println!("wrote {}", s.path.display());
            for (label, n) in &s.histogram {
                println!("{label:>12} {n}");
            }
        }
        Command::Train(_) => {
            let s = cmd_train(&cfg)?;
            let last = s.epochs.last();
            println!(
                "trained {} epochs ({} steps), best epoch {}, final L_traj {:.4}",
                s.epochs.len(),
                s.steps.len(),
                s.best_epoch,
                last.map_or(f64::NAN, |e| e.l_traj)
            );
            println!("checkpoint in {}", s.out.display());
        }
        Command::Eval { target, .. } => {
            let report = cmd_eval(&cfg, &target.args(&cfg))?;
            print!("{}", report.to_table());
        }
        Command::Embed { target } => {
            let s = cmd_embed(&cfg, &target.args(&cfg))?;
            println!("embedded {} windows", s.ids.len());
            match s.silhouette {
                Some(v) => println!("silhouette {v:.4}"),
                None => println!("silhouette n/a"),
            }
        }
        Command::Ablate {
            betas, regimes, seeds, ..
        } => {
            let s = cmd_ablate(&cfg, betas, regimes, seeds)?;
            print!("{}", s.table);
            let failed = s.rows.iter().filter(|r| r.result.is_err()).count();
            if failed > 0 {
                log::warn!("{failed} of {} cells failed", s.rows.len());
            }
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
