//! Command-line driver: `precompute` builds the four estimator bundles,
//! `accuracy` runs the estimator study against Monte Carlo truth, and `mc`
//! runs the closed-loop controller comparison. Every command reads one JSON
//! config document; an absent config means the desk-scale defaults.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gppce::bundle;
use gppce::config::{ControllerKind, RunConfig};
use gppce::mc;

#[derive(Parser)]
#[command(name = "gppce", version, about = "GPPCE moment estimation and stochastic NMPC studies")]
struct Cli {
    /// JSON run configuration; omitted means the built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory, overriding the configured one.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Master seed override for both Monte Carlo studies.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Scale the studies up to the published sizes (100 control settings,
    /// 400 closed-loop runs).
    #[arg(long, global = true)]
    paper_scale: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the four estimator bundles and write them to the output directory.
    Precompute,
    /// Run the estimator accuracy study; requires the bundles from `precompute`.
    Accuracy,
    /// Run the closed-loop Monte Carlo comparison for one controller.
    Mc {
        /// Controller flavor: snmpc, nominal, or unscented.
        #[arg(long, default_value = "snmpc", value_parser = parse_controller)]
        controller: ControllerKind,

        /// Number of closed-loop runs, overriding the configured count.
        #[arg(long, value_name = "N")]
        runs: Option<usize>,
    },
}

fn parse_controller(s: &str) -> std::result::Result<ControllerKind, String> {
    s.parse().map_err(|e: gppce::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> gppce::Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.paper_scale {
        cfg.apply_paper_scale();
    }
    if let Some(seed) = cli.seed {
        cfg.mc.master_seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.to_string_lossy().into_owned();
    }
    let out_dir = PathBuf::from(&cfg.output.dir);
    match cli.command {
        Command::Precompute => cmd_precompute(&cfg, &out_dir),
        Command::Accuracy => cmd_accuracy(&cfg, &out_dir),
        Command::Mc { controller, runs } => {
            if let Some(n) = runs {
                cfg.mc.n_runs = n;
            }
            cmd_mc(&cfg, &out_dir, controller)
        }
    }
}

fn cmd_precompute(cfg: &RunConfig, out_dir: &Path) -> gppce::Result<ExitCode> {
    let families = cfg.build_families()?;
    let paths = bundle::save_families(out_dir, &families)?;
    for p in &paths {
        println!("wrote {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_accuracy(cfg: &RunConfig, out_dir: &Path) -> gppce::Result<ExitCode> {
    let families = bundle::load_families(out_dir)?;
    let records = mc::accuracy_study(&cfg.plant, &families, &cfg.accuracy_options())?;
    let path = out_dir.join("accuracy.csv");
    mc::write_accuracy_csv(&path, &records)?;
    let failed = records.iter().filter(|r| !r.ok).count();
    println!("wrote {} ({} cells, {failed} failed)", path.display(), records.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_mc(cfg: &RunConfig, out_dir: &Path, kind: ControllerKind) -> gppce::Result<ExitCode> {
    let families = match kind {
        ControllerKind::Snmpc => Some(bundle::load_families(out_dir)?),
        ControllerKind::Nominal | ControllerKind::Unscented => None,
    };
    let ctrl = cfg.build_controller(kind, families)?;
    let opts = cfg.mc_options(kind);
    let (records, summary) = mc::closed_loop_mc(&ctrl, &opts)?;
    let dir = out_dir.join(kind.as_str());
    fs::create_dir_all(&dir)?;
    mc::write_mc_outputs(&dir, &records, &summary)?;

    println!(
        "controller {}: {} runs, {} failed, {} fallback steps",
        summary.controller, summary.n_runs, summary.n_failed, summary.fallback_steps_total
    );
    println!(
        "violation fractions: path {:.3}, namw {:.3}, ppm {:.3}",
        summary.violation_fraction_path,
        summary.violation_fraction_namw,
        summary.violation_fraction_ppm
    );
    println!(
        "batch time: mean {:.1} s, std {:.1} s; mean objective {:.1}",
        summary.batch_time_mean, summary.batch_time_std, summary.objective_mean
    );
    println!("wrote {}", dir.display());

    // Scattered per-run failures are reported above rather than failing the
    // whole experiment; a tenth of the batch failing is no longer scattered.
    let failed_fraction = summary.n_failed as f64 / summary.n_runs as f64;
    Ok(if failed_fraction > 0.10 { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}
