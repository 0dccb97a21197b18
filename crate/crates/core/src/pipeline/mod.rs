//! Command-line orchestration: configuration, output-directory locking,
//! per-command manifests and exit codes.

pub mod commands;
pub mod config;
pub mod svg;

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::Error;
pub use commands::{run, Command, CommandArgs, Outputs};
pub use config::{validate_config, validate_config_text, RunConfig, TTestWeights};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "geomort", version, about = "County mortality from satellite imagery")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory (same as `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long = "learning-rate", global = true)]
    learning_rate: Option<f64>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Validate and normalise the county CSV.
    Ingest {
        #[arg(long)]
        counties: Option<PathBuf>,
    },
    /// Emit the 7×7 tile manifest for every school.
    PlanGrid {
        #[arg(long)]
        schools: Option<PathBuf>,
    },
    /// Download manifest tiles through the disk cache (needs GEOMORT_MAPS_KEY).
    Fetch,
    /// Generate the synthetic corpus.
    Synth,
    /// Select counties and assign train/validation/test splits.
    Split,
    /// Train the image model.
    Train,
    /// Predict counties and report the held-out correlation.
    Eval,
    /// Extract (or import) per-image embeddings.
    Embed {
        /// CSV `fips,school,row,col,e0,…` computed elsewhere.
        #[arg(long = "import")]
        import: Option<PathBuf>,
    },
    /// Spectral clustering and 2-D coordinates of embeddings.
    Cluster,
    /// SHAP attributions and filter activation maps.
    Explain,
    /// Covariate-model tables, univariable fits and cluster t-tests.
    Report,
}

/// Exclusive marker file removed when the run ends.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, Error> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(vec![format!(
                "{} is locked by another run (delete {} if it is stale)",
                dir.display(),
                path.display()
            )])),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Validation(_) | Error::Ingestion { .. } => EXIT_DATA,
        _ => EXIT_FAILURE,
    }
}

fn report_error(e: &Error) {
    match e {
        Error::Config(list) => {
            eprintln!("configuration error:");
            for m in list {
                eprintln!("  {m}");
            }
        }
        Error::Validation(rows) => {
            eprintln!("data validation failed:");
            for r in rows {
                eprintln!("  row {}: {}", r.row, r.message);
            }
        }
        other => eprintln!("error: {other}"),
    }
}

/// Run one command inside a locked output directory and write its manifest.
pub fn execute(cmd: Command, cfg: &RunConfig, args: &CommandArgs) -> Result<Outputs, Error> {
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.resolved"), cfg.resolved_text())
        .map_err(|e| Error::io(cfg.out_dir.join("config.resolved"), e))?;
    let out = run(cmd, cfg, args)?;
    commands::write_output_manifest(&cfg.out_dir, cmd, out.files())?;
    Ok(out)
}

/// Parse `argv`, run the command and return the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut bad = Vec::new();
    for s in &cli.set {
        match s.split_once('=') {
            Some((k, v)) => overrides.push((k.trim().to_string(), v.trim().to_string())),
            None => bad.push(format!("--set expects KEY=VALUE, found {s:?}")),
        }
    }
    if let Some(o) = &cli.out {
        overrides.push(("out_dir".into(), o.display().to_string()));
    }
    if let Some(s) = cli.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(e) = cli.epochs {
        overrides.push(("epochs".into(), e.to_string()));
    }
    if let Some(lr) = cli.learning_rate {
        overrides.push(("learning_rate".into(), lr.to_string()));
    }
    let mut args = CommandArgs::default();
    let cmd = match cli.command {
        Cmd::Ingest { counties } => {
            if let Some(p) = counties {
                overrides.push(("counties_csv".into(), p.display().to_string()));
            }
            Command::Ingest
        }
        Cmd::PlanGrid { schools } => {
            if let Some(p) = schools {
                overrides.push(("schools_csv".into(), p.display().to_string()));
            }
            Command::PlanGrid
        }
        Cmd::Fetch => Command::Fetch,
        Cmd::Synth => Command::Synth,
        Cmd::Split => Command::Split,
        Cmd::Train => Command::Train,
        Cmd::Eval => Command::Eval,
        Cmd::Embed { import } => {
            args.import_embeddings = import;
            Command::Embed
        }
        Cmd::Cluster => Command::Cluster,
        Cmd::Explain => Command::Explain,
        Cmd::Report => Command::Report,
    };
    let cfg = match validate_config(cli.config.as_deref(), &overrides) {
        Ok(c) if bad.is_empty() => c,
        Ok(_) => {
            report_error(&Error::Config(bad));
            return EXIT_CONFIG;
        }
        Err(Error::Config(mut list)) => {
            list.extend(bad);
            report_error(&Error::Config(list));
            return EXIT_CONFIG;
        }
        Err(e) => {
            report_error(&e);
            return exit_code(&e);
        }
    };
    match execute(cmd, &cfg, &args) {
        Ok(out) => {
            for line in &out.summary {
                println!("{}: {line}", cmd.name());
            }
            EXIT_OK
        }
        Err(e) => {
            report_error(&e);
            exit_code(&e)
        }
    }
}
