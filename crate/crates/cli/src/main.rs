use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use mplab::config::RunConfig;
use mplab::datagen::Setting;
use mplab::pipeline::{self, DecodeMode, PipelineError, Split};

/// Semi-supervised CTC experiments: data generation, seed training,
/// iterative and momentum pseudo-labeling, decoding and scoring.
///
/// Log verbosity is read from MPLAB_LOG (error, warn, info, debug, trace).
#[derive(Debug, Parser)]
#[command(name = "mplab", version)]
struct Cli {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.w=0.9`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Dev,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Greedy,
    Beam,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset into <workdir>/data.
    GenData {
        /// in_domain_small, in_domain_large or out_domain.
        #[arg(long)]
        setting: Option<String>,
    },
    /// Train the n-gram LM into <workdir>/lm.arpa.
    LmTrain,
    /// Supervised seed model on the labeled set.
    TrainSeed,
    /// Supervised model on labeled plus transcribed unlabeled data.
    Topline,
    /// Iterative pseudo-labeling from a checkpoint.
    Ipl {
        #[arg(long)]
        init: PathBuf,
    },
    /// Momentum pseudo-labeling from a checkpoint.
    Mpl {
        #[arg(long)]
        init: PathBuf,
    },
    /// Decode a split into <workdir>/hyp.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "greedy")]
        mode: ModeArg,
        /// Fuse the workdir LM into beam search.
        #[arg(long)]
        lm: bool,
    },
    /// Score a hypothesis file against a reference file.
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Seed-model WER; with --topline-wer enables WRR.
        #[arg(long, requires = "topline_wer")]
        seed_wer: Option<f64>,
        #[arg(long, requires = "seed_wer")]
        topline_wer: Option<f64>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every stage end to end, writing <workdir>/report.txt.
    Run,
    /// Print the effective configuration.
    ShowConfig,
}

fn effective_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(dir) = &cli.workdir {
        cfg = cfg.with_workdir(dir);
    }
    Ok(cfg)
}

fn show(path: &Path) {
    println!("{}", path.display());
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = effective_config(&cli)?;
    match cli.command {
        Command::GenData { setting } => {
            if let Some(name) = setting {
                cfg.datagen.setting = Setting::parse(&name)?;
            }
            show(&pipeline::cmd_gen_data(&cfg)?);
        }
        Command::LmTrain => match pipeline::cmd_lm_train(&cfg)? {
            Some(path) => show(&path),
            None => info!("lm.order is 0; no LM written"),
        },
        Command::TrainSeed => show(&pipeline::cmd_train_seed(&cfg)?),
        Command::Topline => show(&pipeline::cmd_topline(&cfg)?),
        Command::Ipl { init } => show(&pipeline::cmd_ipl(&cfg, &init)?),
        Command::Mpl { init } => {
            let out = pipeline::cmd_mpl(&cfg, &init)?;
            for path in [&out.averaged, &out.online, &out.offline] {
                show(path);
            }
        }
        Command::Decode { checkpoint, split, mode, lm } => {
            let split = match split {
                SplitArg::Dev => Split::Dev,
                SplitArg::Test => Split::Test,
            };
            let mode = match mode {
                ModeArg::Greedy => DecodeMode::Greedy,
                ModeArg::Beam => DecodeMode::Beam,
            };
            show(&pipeline::cmd_decode(&cfg, &checkpoint, split, mode, lm)?);
        }
        Command::Eval { hyp, reference, seed_wer, topline_wer, out } => {
            let anchors = seed_wer.zip(topline_wer);
            let report = pipeline::cmd_eval(&hyp, &reference, anchors)?;
            print!("{}", report.text);
            if let Some(path) = out {
                std::fs::write(&path, &report.text)
                    .map_err(|source| PipelineError::Io { path: path.clone(), source })?;
            }
        }
        Command::Run => {
            let report = pipeline::run_pipeline(&cfg)?;
            print!("{}", report.text);
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MPLAB_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
