//! `symlens` — train small PDE emulators and diagnose how well they
//! internalize grid symmetries (forward equivariance error plus
//! metric-weighted gradient influence over group orbits).

mod config;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use config::Config;
use std::path::PathBuf;
use symlens::diag::sweep::{run_sweep, SweepConfig};
use symlens::models::build;
use symlens::pde::dataset::{generate_dataset, Dataset};
use symlens::train::{train, write_loss_curve};
use symlens::Real;

#[derive(Parser)]
#[command(name = "symlens", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override training seeds / checkpoint selection (repeatable).
    #[arg(long)]
    seed: Vec<u64>,
    /// Override the sweep group: d4 | th | tv | grid.
    #[arg(long)]
    group: Option<String>,
    /// Override the translation stride.
    #[arg(long)]
    stride: Option<usize>,
    /// Override the CG relative tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Override the output directory of this subcommand.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the reference dataset.
    GenData(CommonArgs),
    /// Train one model per seed and write checkpoints + loss curves.
    Train(CommonArgs),
    /// Run the equivariance/influence sweep over trained checkpoints.
    Sweep(CommonArgs),
    /// Re-render SVG figures from an existing sweep report.
    Render(CommonArgs),
    /// gen-data, train and sweep in one go.
    All(CommonArgs),
}

/// Apply flag overrides onto the loaded config.
fn resolve(args: &CommonArgs) -> Result<Config> {
    let mut cfg = Config::load(&args.config)?;
    if !args.seed.is_empty() {
        cfg.train.seeds = args.seed.clone();
    }
    if let Some(group) = &args.group {
        cfg.sweep.group = group.clone();
    }
    if let Some(stride) = args.stride {
        cfg.sweep.stride = Some(stride);
    }
    if let Some(tol) = args.tol {
        cfg.sweep.tol = tol;
    }
    Ok(cfg)
}

fn cmd_gen_data(cfg: &Config, out: Option<&PathBuf>) -> Result<()> {
    let dir = out.unwrap_or(&cfg.data.dir).clone();
    let req = cfg.dataset_request()?;
    let manifest = generate_dataset(&req, &dir)?;
    cfg.write_snapshot(&dir)?;
    println!(
        "dataset: {} trajectories x {} states on {}x{} grid -> {}",
        manifest.trajectories,
        manifest.states,
        manifest.grid,
        manifest.grid,
        dir.display()
    );
    println!(
        "sigma = [{}, {}, {}]",
        manifest.sigma[0], manifest.sigma[1], manifest.sigma[2]
    );
    Ok(())
}

fn cmd_train(cfg: &Config, out: Option<&PathBuf>) -> Result<()> {
    let dir = out.unwrap_or(&cfg.train.dir).clone();
    std::fs::create_dir_all(&dir)?;
    let dataset = Dataset::load(&cfg.data.dir).context("loading dataset (run gen-data first)")?;
    for &seed in &cfg.train.seeds {
        let model_cfg = cfg.model_config(seed)?;
        let model = build::<Real>(model_cfg)?;
        println!(
            "training {} seed {seed} ({} params, {} epochs)",
            model_cfg.family_name(),
            model.param_count(),
            cfg.train.epochs
        );
        let ckpt = dir.join(format!("{}_seed{seed}.ckpt", cfg.model.family));
        let outcome = train(model, &dataset, &cfg.train_config(seed), Some(&ckpt))?;
        let curve_path = dir.join(format!("{}_seed{seed}_loss.csv", cfg.model.family));
        write_loss_curve(&curve_path, &outcome.curve)?;
        println!(
            "  best test smse {:.6e} at epoch {} -> {}",
            outcome.meta.best_test_smse,
            outcome.meta.best_epoch,
            ckpt.display()
        );
    }
    cfg.write_snapshot(&dir)?;
    Ok(())
}

fn cmd_sweep(cfg: &Config, out: Option<&PathBuf>) -> Result<()> {
    let dir = out.unwrap_or(&cfg.sweep.dir).clone();
    let checkpoints: Vec<PathBuf> = cfg
        .train
        .seeds
        .iter()
        .map(|&s| cfg.checkpoint_path(s))
        .collect();
    let sweep_cfg = SweepConfig {
        dataset_dir: cfg.data.dir.clone(),
        checkpoints,
        group: cfg.orbit_spec()?,
        batch_size: cfg.sweep.batch_size,
        batch_count: cfg.sweep.batches,
        lambda: cfg.sweep.lambda,
        cg: cfg.cg_config(),
        out_dir: dir.clone(),
    };
    let output = run_sweep(&sweep_cfg)?;
    cfg.write_snapshot(&dir)?;
    println!(
        "sweep {} over {} elements: {} influence values ({} non-converged), {} error ratios",
        output.summary.group,
        output.summary.elements.len(),
        output.summary.influence_processed,
        output.summary.influence_excluded_nonconverged,
        output.summary.error_reported
    );
    for f in &output.files {
        println!("  wrote {}", f.display());
    }
    Ok(())
}

fn cmd_render(cfg: &Config, out: Option<&PathBuf>) -> Result<()> {
    let dir = out.unwrap_or(&cfg.sweep.dir).clone();
    let outcome = symlens::diag::sweep::render_from_dir(&dir)?;
    cfg.write_snapshot(&dir)?;
    for f in &outcome.written {
        println!("wrote {}", f.display());
    }
    for s in &outcome.skipped {
        println!("skipped: {s}");
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData(args) => {
            let cfg = resolve(args)?;
            cmd_gen_data(&cfg, args.out.as_ref())
        }
        Command::Train(args) => {
            let cfg = resolve(args)?;
            cmd_train(&cfg, args.out.as_ref())
        }
        Command::Sweep(args) => {
            let cfg = resolve(args)?;
            cmd_sweep(&cfg, args.out.as_ref())
        }
        Command::Render(args) => {
            let cfg = resolve(args)?;
            cmd_render(&cfg, args.out.as_ref())
        }
        Command::All(args) => {
            let cfg = resolve(args)?;
            cmd_gen_data(&cfg, None)?;
            cmd_train(&cfg, None)?;
            cmd_sweep(&cfg, args.out.as_ref())
        }
    }
}
