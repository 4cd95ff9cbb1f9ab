//! Command-line front end: JSON experiment configs, the shared pipeline and
//! the five subcommands.

pub mod commands;
pub mod config;
pub mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use gvse_core::eval::Setting;
use gvse_core::Error;

use crate::config::ExperimentConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_ARTIFACT: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else if matches!(e, Error::Artifact(_)) {
        EXIT_ARTIFACT
    } else {
        EXIT_INPUT
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SettingArg {
    Czsl,
    Gzsl,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::Czsl => Setting::Czsl,
            SettingArg::Gzsl => Setting::Gzsl,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gvse", version, about = "Graph-based visual-semantic entanglement for zero-shot recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the knowledge graph and write it as JSON.
    BuildGraph,
    /// Factorise attribute co-occurrence into word vectors.
    TrainEmbed,
    /// Train a model and write a checkpoint plus an epoch log.
    Train,
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "czsl")]
        setting: SettingArg,
    },
    /// Sweep one ablation axis.
    Ablate {
        #[arg(long)]
        axis: String,
    },
}

impl Cli {
    pub fn resolve_config(&self) -> gvse_core::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn execute(cli: &Cli) -> gvse_core::Result<()> {
    let cfg = cli.resolve_config()?;
    match &cli.command {
        Command::BuildGraph => {
            let path = commands::cmd_build_graph(&cfg)?;
            println!("graph written to {}", path.display());
        }
        Command::TrainEmbed => {
            let (path, err) = commands::cmd_train_embed(&cfg)?;
            println!("embedding written to {} (reconstruction error {err:.3e})", path.display());
        }
        Command::Train => {
            let path = commands::cmd_train(&cfg)?;
            println!("checkpoint written to {}", path.display());
        }
        Command::Eval { checkpoint, setting } => {
            let ck = checkpoint
                .clone()
                .unwrap_or_else(|| cfg.out_dir.join(commands::CHECKPOINT_FILE));
            let (path, r) = commands::cmd_eval(&cfg, &ck, (*setting).into())?;
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            println!(
                "{} {}: acc {} acc_s {} acc_u {} h {} -> {}",
                r.setting.as_str(),
                r.split,
                fmt(r.acc),
                fmt(r.acc_s),
                fmt(r.acc_u),
                fmt(r.h),
                path.display()
            );
        }
        Command::Ablate { axis } => {
            let (path, rows) = commands::cmd_ablate(&cfg, axis)?;
            println!("{} arms written to {}", rows.len(), path.display());
        }
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
