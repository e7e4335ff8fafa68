use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use semcrc::calibrate::Method;
use semcrc::report::{cmd_calibrate, cmd_evaluate, cmd_export_maps, cmd_scenario, RunConfig};
use semcrc::synth::{generate, PhantomConfig};
use semcrc::tensor_io::save_sample_set;

#[derive(Parser)]
#[command(name = "semcrc", version, about = "Conformal risk control for voxel-wise intervals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit λ̂ on a calibration manifest.
    Calibrate(Common),
    /// Score a stored result on a test manifest.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Result file from `calibrate` (default: <out>/result.json).
        #[arg(long)]
        result: Option<PathBuf>,
    },
    /// Run a synthetic scenario file.
    Scenario(Common),
    /// Write per-voxel interval length maps.
    ExportMaps {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        result: Option<PathBuf>,
    },
    /// Write a phantom dataset as a manifest.
    Generate {
        /// Phantom preset: heterogeneous, homogeneous, two-organ or easy.
        #[arg(long, default_value = "heterogeneous")]
        preset: String,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Default)]
struct Common {
    /// JSON file with run options; flags override it. For `scenario` it is the scenario file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    d_opt: Option<usize>,
    #[arg(long)]
    d_min: Option<usize>,
    #[arg(long)]
    n_opt: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(self, scenario: bool) -> Result<RunConfig> {
        let mut config = match (&self.config, scenario) {
            (Some(path), false) => RunConfig::load_json(path).with_context(|| format!("reading {}", path.display()))?,
            (Some(path), true) => RunConfig {
                scenario: Some(path.clone()),
                ..RunConfig::default()
            },
            (None, _) => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field { config.$field = v; }
            )*};
        }
        set!(method, epsilon, gamma, k, d_min, n_opt, seed, out);
        if self.manifest.is_some() {
            config.manifest = self.manifest;
        }
        if self.d_opt.is_some() {
            config.d_opt = self.d_opt;
        }
        Ok(config)
    }
}

fn preset(name: &str) -> Result<PhantomConfig> {
    Ok(match name {
        "heterogeneous" => PhantomConfig::heterogeneous(),
        "homogeneous" => PhantomConfig::homogeneous(),
        "two-organ" | "two_organ" => PhantomConfig::two_organ(),
        "easy" => PhantomConfig::easy(),
        other => anyhow::bail!("unknown preset {other:?}"),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Calibrate(common) => {
            let config = common.resolve(false)?;
            let file = cmd_calibrate(&config)?;
            println!("{} calibrated on {} samples", file.result.method, file.result.n_cal);
            for entry in &file.legend {
                println!("  {:<16} {:.6}", entry.name, entry.lambda);
            }
            for w in &file.result.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Evaluate { common, result } => {
            let config = common.resolve(false)?;
            for row in cmd_evaluate(&config, result.as_deref())? {
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!("{:<16} risk {} length {}", row.organ, fmt(row.risk), fmt(row.mean_length));
            }
        }
        Command::Scenario(common) => {
            let config = common.resolve(true)?;
            let reports = cmd_scenario(&config)?;
            println!("wrote {} scenario reports to {}", reports.len(), config.out.display());
        }
        Command::ExportMaps { common, result } => {
            let config = common.resolve(false)?;
            let written = cmd_export_maps(&config, result.as_deref())?;
            println!("wrote {} maps", written.len());
        }
        Command::Generate { preset: name, n, seed, out } => {
            let phantom = preset(&name)?.with_seed(seed);
            let set = generate(&phantom, n)?;
            let path = save_sample_set(&set, &out)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
