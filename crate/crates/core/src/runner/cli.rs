//! Argument parsing and dispatch for the `sevtrain` binary.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
//! Failures print one `error kind=<kind> [field=<field>] message=<json>` line
//! on standard error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::{
    cmd_eval_adv, cmd_eval_corrupt, cmd_gen_data, cmd_make_targets, cmd_report, cmd_train, report_line, ModelRef,
    RunConfig,
};
use crate::error::{Error, Result};
use crate::numfmt::sig9;
use crate::objectives::Scale;

pub const THREADS_ENV: &str = "SEVTRAIN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sevtrain", version, about = "Semantically targeted adversarial training and mistake-severity evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the configured seeds with this one.
    #[arg(long)]
    seed: Option<u64>,
    /// Training preset; replaces any inline stages.
    #[arg(long)]
    preset: Option<String>,
    /// `paper` or `desk`.
    #[arg(long)]
    scale: Option<String>,
    /// Print the fully resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a recipe and write checkpoints and the training log.
    Train(Common),
    /// Adversarial ε-sweep of one checkpoint.
    EvalAdv {
        #[command(flatten)]
        common: Common,
        /// Checkpoint manifest, optionally as `name=path`.
        #[arg(long)]
        checkpoint: String,
    },
    /// Corruption grid for one or more checkpoints.
    EvalCorrupt {
        #[command(flatten)]
        common: Common,
        /// Checkpoint manifest, optionally as `name=path`; repeatable.
        #[arg(long, required = true)]
        checkpoint: Vec<String>,
    },
    /// Compare evaluation results across directories.
    Report {
        /// Directories written by eval-adv or eval-corrupt.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the similarity matrix and semantic target sets.
    MakeTargets(Common),
    /// Materialise the configured train and test sets.
    GenData(Common),
}

/// Machine-parsable diagnostic line for `e`.
pub fn error_line(e: &Error) -> String {
    let message = serde_json::to_string(&e.to_string()).expect("string serializes");
    match e {
        Error::Config { field, .. } => format!("error kind={} field={field} message={message}", e.kind()),
        _ => format!("error kind={} message={message}", e.kind()),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 1,
        _ => 2,
    }
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(p) = &self.preset {
            cfg.recipe.preset = Some(p.clone());
            cfg.recipe.stages = None;
        }
        if let Some(s) = &self.scale {
            cfg.recipe.scale = Scale::parse(s).map_err(|e| Error::config("--scale", e.to_string()))?;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out(cfg: &RunConfig) -> Result<PathBuf> {
        cfg.output_dir
            .clone()
            .ok_or_else(|| Error::config("output_dir", "no output directory; pass --out or set output_dir"))
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::config(THREADS_ENV, format!("expected a positive integer, got {v:?}")))?;
    // A pool built earlier in the process stays in effect.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    configure_threads()?;
    let common = match &cli.command {
        Command::Train(c) | Command::MakeTargets(c) | Command::GenData(c) => Some(c),
        Command::EvalAdv { common, .. } | Command::EvalCorrupt { common, .. } => Some(common),
        Command::Report { .. } => None,
    };
    if let Some(c) = common {
        if c.print_config {
            println!("{}", c.config()?.resolved_json()?);
            return Ok(());
        }
    }
    match cli.command {
        Command::Train(c) => {
            let cfg = c.config()?;
            let out = Common::out(&cfg)?;
            let mut progress = |seed: u64, row: &crate::objectives::EpochLog| {
                eprintln!(
                    "seed {seed} epoch {} stage {} {} loss={} train_acc={}",
                    row.epoch,
                    row.stage,
                    row.objective,
                    sig9(row.mean_loss),
                    sig9(row.train_acc)
                );
            };
            for s in cmd_train(&cfg, &out, Some(&mut progress))? {
                println!("seed {} final {} checksum {}", s.seed, s.final_checkpoint.display(), s.final_checksum);
            }
        }
        Command::EvalAdv { common, checkpoint } => {
            let cfg = common.config()?;
            let out = Common::out(&cfg)?;
            for r in cmd_eval_adv(&cfg, &ModelRef::parse(&checkpoint), &out)? {
                println!("{}", report_line(&r));
            }
        }
        Command::EvalCorrupt { common, checkpoint } => {
            let cfg = common.config()?;
            let out = Common::out(&cfg)?;
            let models: Vec<ModelRef> = checkpoint.iter().map(|c| ModelRef::parse(c)).collect();
            for f in cmd_eval_corrupt(&cfg, &models, &out)? {
                for r in &f.reports {
                    println!("{} {}", f.model, report_line(r));
                }
            }
        }
        Command::Report { dirs, out } => {
            let summary = cmd_report(&dirs, &out)?;
            for cmp in [&summary.adversarial, &summary.corruption].into_iter().flatten() {
                for w in &cmp.win_counts {
                    println!("{} {} {} wins={} ties={}", w.model, w.metric.name(), w.level, w.wins, w.ties);
                }
            }
        }
        Command::MakeTargets(c) => {
            let cfg = c.config()?;
            let out = Common::out(&cfg)?;
            let targets = cmd_make_targets(&cfg, &out)?;
            println!("wrote target sets for {} classes (k={})", targets.num_classes(), targets.k);
        }
        Command::GenData(c) => {
            let cfg = c.config()?;
            let out = Common::out(&cfg)?;
            let (train, test) = cmd_gen_data(&cfg, &out)?;
            println!("wrote {} training and {} test images", train.len(), test.len());
        }
    }
    Ok(())
}

/// Parse `args` (including the program name), run the command and return
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let _ = e.print();
            let message = serde_json::to_string(&e.kind().to_string()).expect("string serializes");
            eprintln!("error kind=usage message={message}");
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}
