//! Command-line front end for psfforge pipelines.
//!
//! Every subcommand reads one strict JSON [`RunConfig`], writes its artifacts
//! into `--out-dir` together with a `manifest.json` holding the resolved
//! config, input checksums and the tool version.

pub mod commands;
pub mod config;
pub mod sweep;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use psfforge_core::io;
use psfforge_core::scene::FileChecksum;
use psfforge_core::PsfError;
use serde::Serialize;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("[{module}] {message}")]
    Runtime { module: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime { .. } => 3,
        }
    }
}

/// Attach a module tag to a core error.
pub(crate) trait Tagged<T> {
    fn tag(self, module: &'static str) -> Result<T, CliError>;
}

impl<T> Tagged<T> for Result<T, PsfError> {
    fn tag(self, module: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime {
            module,
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "psfforge", version, about = "PSF design, simulation and dense 3D localization")]
pub struct Cli {
    /// JSON run config (defaults apply when omitted)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overrides the config
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads
    #[arg(long, global = true, env = "PSFFORGE_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Design an extended-depth-of-field mask
    DesignEdof {
        #[arg(long)]
        range_um: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Optimize a mask pair for the joint Cramér-Rao bound
    DesignCrlbPair {
        #[arg(long)]
        range_um: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        /// Start from these masks instead of the seeded astigmatic pair
        #[arg(long, requires = "mask2")]
        mask1: Option<PathBuf>,
        #[arg(long, requires = "mask1")]
        mask2: Option<PathBuf>,
    },
    /// Per-depth bounds of a mask pair (zero masks when omitted)
    Crlb {
        #[arg(long, requires = "mask2")]
        mask1: Option<PathBuf>,
        #[arg(long, requires = "mask1")]
        mask2: Option<PathBuf>,
        #[arg(long)]
        range_um: Option<f64>,
    },
    /// Generate a labelled dual-channel dataset
    Simulate {
        #[arg(long)]
        mask1: PathBuf,
        #[arg(long)]
        mask2: PathBuf,
        #[arg(long)]
        n_examples: Option<usize>,
    },
    /// Localize emitters in image pairs
    Localize {
        /// Channel images of one frame; repeat for more frames
        #[arg(long, num_args = 2, value_names = ["CH1", "CH2"], action = clap::ArgAction::Append)]
        pair: Vec<PathBuf>,
        /// A directory written by `simulate`
        #[arg(long, conflicts_with = "pair")]
        dataset: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["mask1", "mask2"])]
        bank: Option<PathBuf>,
        #[arg(long, requires = "mask2")]
        mask1: Option<PathBuf>,
        #[arg(long, requires = "mask1")]
        mask2: Option<PathBuf>,
    },
    /// Match localizations against ground truth
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        threshold_nm: Option<f64>,
    },
    /// Estimate the channel-2 to channel-1 affine transform
    Register {
        #[arg(long)]
        locs1: PathBuf,
        #[arg(long)]
        locs2: PathBuf,
    },
    /// Warp an image with a registration transform
    Warp {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        transform: PathBuf,
    },
    /// Link pooled localizations into tracks
    Track {
        #[arg(long, required_unless_present = "synthetic")]
        locs: Option<PathBuf>,
        /// Track a simulated nucleus instead of an input file
        #[arg(long, conflicts_with = "locs")]
        synthetic: bool,
    },
    /// Mean-square displacement of tracks
    Msd {
        #[arg(long)]
        tracks: PathBuf,
    },
    /// Jaccard and RMSE against emitter density
    SweepDensity {
        #[arg(long, conflicts_with_all = ["mask1", "mask2"], required_unless_present = "mask1")]
        bank: Option<PathBuf>,
        #[arg(long, requires = "mask2")]
        mask1: Option<PathBuf>,
        #[arg(long, requires = "mask1")]
        mask2: Option<PathBuf>,
        #[arg(long)]
        n_images: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::DesignEdof { .. } => "design-edof",
            Command::DesignCrlbPair { .. } => "design-crlb-pair",
            Command::Crlb { .. } => "crlb",
            Command::Simulate { .. } => "simulate",
            Command::Localize { .. } => "localize",
            Command::Evaluate { .. } => "evaluate",
            Command::Register { .. } => "register",
            Command::Warp { .. } => "warp",
            Command::Track { .. } => "track",
            Command::Msd { .. } => "msd",
            Command::SweepDensity { .. } => "sweep-density",
        }
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: &'a RunConfig,
    inputs: &'a [FileChecksum],
    outputs: &'a [FileChecksum],
}

/// Collects checksums of everything a run reads and writes.
pub struct Run {
    pub out_dir: PathBuf,
    inputs: Vec<FileChecksum>,
    outputs: Vec<FileChecksum>,
}

impl Run {
    fn new(out_dir: PathBuf) -> Self {
        Self {
            out_dir,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Record an input file (and its sidecar, if any).
    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        for p in [path.to_path_buf(), io::sidecar_path(path)] {
            if p == path || p.exists() {
                self.inputs.push(FileChecksum {
                    path: p.display().to_string(),
                    sha256: io::sha256_file(&p).tag("io")?,
                });
            }
        }
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Record an output written at `name` relative to the output directory.
    pub fn output(&mut self, name: &str) -> Result<(), CliError> {
        let sha256 = io::sha256_file(&self.path(name)).tag("io")?;
        self.outputs.push(FileChecksum {
            path: name.to_string(),
            sha256,
        });
        Ok(())
    }

    /// Record a raw array output and its JSON sidecar.
    pub fn output_array(&mut self, name: &str) -> Result<(), CliError> {
        self.output(name)?;
        self.output(&format!("{name}.json"))
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, header: &[&str], rows: &[T]) -> Result<(), CliError> {
        io::write_csv_with_header(&self.path(name), header, rows).tag("io")?;
        self.output(name)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        io::save_json(&self.path(name), value).tag("io")?;
        self.output(name)
    }

    fn finish(self, command: &'static str, config: &RunConfig) -> Result<(), CliError> {
        let manifest = Manifest {
            tool: "psfforge",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        io::save_json(&self.out_dir.join("manifest.json"), &manifest).tag("io")
    }
}

/// Apply command-line overrides that belong in the resolved config.
fn apply_overrides(cfg: &mut RunConfig, cmd: &Command) {
    let z_grid = |r: f64| psfforge_core::crlb::CrlbEvalSpec::grid(0.0, r, 0.25);
    match cmd {
        Command::DesignEdof { range_um, iters } => {
            if let Some(r) = range_um {
                cfg.edof.range_um = *r;
            }
            if let Some(i) = iters {
                cfg.edof.options.iterations = *i;
            }
        }
        Command::DesignCrlbPair { range_um, iters, .. } => {
            if let Some(r) = range_um {
                cfg.eval.z_grid = z_grid(*r);
            }
            if let Some(i) = iters {
                cfg.pair.options.iterations = *i;
            }
        }
        Command::Crlb { range_um: Some(r), .. } => cfg.eval.z_grid = z_grid(*r),
        Command::Simulate { n_examples: Some(n), .. } => cfg.dataset.n_examples = *n,
        Command::Evaluate {
            threshold_nm: Some(t), ..
        } => cfg.matching.threshold_um = t * 1e-3,
        Command::SweepDensity { n_images: Some(n), .. } => cfg.sweep.n_images = *n,
        _ => {}
    }
}

/// Resolve the config for `cli`: file or defaults, then flag overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    apply_overrides(&mut cfg, &cli.command);
    cfg.propagate_seed();
    cfg.validate()?;
    Ok(cfg)
}

/// Execute a parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    if cli.threads == Some(0) {
        return Err(CliError::Config("--threads must be >= 1".into()));
    }
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| CliError::Runtime {
        module: "io",
        message: format!("cannot create {}: {e}", cli.out_dir.display()),
    })?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Runtime {
        module: "cli",
        message: e.to_string(),
    })?;
    let mut run = Run::new(cli.out_dir.clone());
    pool.install(|| commands::execute(&cli.command, &cfg, &mut run))?;
    run.finish(cli.command.name(), &cfg)
}

/// Parse, run and map the outcome to a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("psfforge: {e}");
            e.exit_code()
        }
    }
}
