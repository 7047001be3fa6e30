//! Command-line front end: `mdm train|decode|sweep|eval|gen`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::{Error, Result};

pub mod commands;
pub mod config;

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(
        ".{name}.tmp{}.{:?}",
        std::process::id(),
        std::thread::current().id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "mdm", version, about = "Desk-scale masked diffusion language modeling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// Run configuration file (`section.key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a denoiser; writes checkpoints, vocabulary and a loss log to output.dir.
    Train(ConfigArgs),
    /// Decode source sentences from a JSONL file.
    Decode {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the steps x gamma x M x seed grid over data.test into output.dir/sweep.csv.
    Sweep(ConfigArgs),
    /// Score candidate files (one per run) against references.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "candidates", required = true)]
        candidates: Vec<PathBuf>,
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        sources: Option<PathBuf>,
        /// Where to write the JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate a synthetic corpus.
    Gen {
        #[arg(long)]
        task: String,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
        /// Also write the task's word-vector table here.
        #[arg(long)]
        wordvecs: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env();
    cfg.apply_overrides(&args.set)?;
    Ok(cfg)
}

fn is_usage(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::UnknownTask(_))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => commands::cmd_train(&load_config(&args)?),
        Command::Decode { cfg, input, output } => commands::cmd_decode(&load_config(&cfg)?, &input, &output),
        Command::Sweep(args) => commands::cmd_sweep(&load_config(&args)?).map(|n| log::info!("ran {n} cells")),
        Command::Eval {
            cfg,
            candidates,
            references,
            sources,
            report,
        } => {
            load_config(&cfg)?;
            let rep = commands::cmd_eval(&candidates, &references, sources.as_deref())?;
            print!("{}", rep.to_table());
            if let Some(p) = report {
                write_atomic(&p, rep.to_json()?.as_bytes())?;
            }
            Ok(())
        }
        Command::Gen {
            task,
            size,
            seed,
            output,
            wordvecs,
            dim,
            noise,
        } => commands::cmd_gen(&task, size, seed, &output, wordvecs.as_deref().map(|p| (p, dim, noise))),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if is_usage(&e) {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["mdm", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["mdm", "train", "--set", "no.such=1"]), EXIT_USAGE);
        assert_eq!(run(["mdm", "train"]), EXIT_USAGE);
        assert_eq!(run(["mdm", "--help"]), EXIT_OK);
    }
}
