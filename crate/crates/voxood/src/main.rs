//! Command-line driver for the volumetric OOD detection pipeline.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use voxood::config::{RunConfig, OUT_ROOT_ENV};
use voxood::pipeline::{
    cmd_anomaly_map, cmd_corrupt, cmd_evaluate, cmd_fit_stats, cmd_pipeline, cmd_score,
    cmd_synth_data, cmd_train_ddpm, cmd_train_vqvae, Layout,
};
use voxood::stats::format_auc;

#[derive(Parser)]
#[command(
    name = "voxood",
    version,
    about = "Unsupervised out-of-distribution detection for 3D volumes via a latent diffusion pipeline"
)]
struct Cli {
    /// Config file (TOML, optionally naming a preset). Defaults to the
    /// built-in `desk` preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Deterministic mode (on by default; kept as an explicit switch).
    #[arg(long, global = true)]
    deterministic: bool,

    /// Output root; also settable via VOXOOD_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic ID splits and far-OOD test families.
    SynthData,
    /// Apply the near-OOD corruption suite to the ID test split.
    Corrupt {
        /// Corruption classes to skip (e.g. `gaussian_noise:0.01`).
        #[arg(long)]
        skip: Vec<String>,
    },
    /// Train the first-stage compression model.
    TrainVqvae,
    /// Train the latent denoiser (requires the first stage).
    TrainDdpm,
    /// Fit validation z-scoring statistics.
    FitStats,
    /// Score every entry of a manifest.
    Score {
        /// Manifest of volumes to score.
        #[arg(long)]
        manifest: PathBuf,
        /// Report name (written to reports/<name>.report).
        #[arg(long)]
        report: String,
        /// Also write per-voxel anomaly maps.
        #[arg(long)]
        maps: bool,
    },
    /// Write anomaly maps for a manifest.
    AnomalyMap {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Assemble the AUC table from score reports.
    Evaluate {
        /// Report files for the primary model (repeatable). Must include the
        /// ID test report.
        #[arg(long = "report", required = true)]
        reports: Vec<PathBuf>,
        /// Optional report files for a second model; enables paired tests.
        #[arg(long = "baseline-report")]
        baseline_reports: Vec<PathBuf>,
        /// Display name of the primary model.
        #[arg(long, default_value = "ldm")]
        model_name: String,
    },
    /// Run every stage end to end.
    Pipeline,
}

fn load_config(cli: &Cli) -> voxood::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset("desk")?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    if let Some(out) = &cli.out {
        cfg.out_root = out.clone();
    } else if let Ok(env_out) = std::env::var(OUT_ROOT_ENV) {
        if cli.config.is_none() {
            cfg.out_root = PathBuf::from(env_out);
        }
    }
    cfg = cfg.with_seed_applied();
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> voxood::Result<()> {
    let cfg = load_config(cli)?;
    if cfg.workers > 0 {
        // Ignore failure: the global pool may already exist in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    let layout = Layout::new(&cfg.out_root);
    match &cli.command {
        Command::SynthData => {
            let out = cmd_synth_data(&cfg)?;
            println!(
                "synth-data: {} train / {} val / {} test ID volumes, {} far-OOD families",
                out.train.len(),
                out.val.len(),
                out.test.len(),
                out.far.len()
            );
        }
        Command::Corrupt { skip } => {
            let near = cmd_corrupt(&cfg, skip)?;
            println!("corrupt: {} near-OOD volumes -> {}", near.len(), layout.near_manifest().display());
        }
        Command::TrainVqvae => {
            let out = cmd_train_vqvae(&cfg)?;
            println!(
                "train-vqvae: {} epochs, best val recon mse {:.6e} -> {}",
                out.meta.epoch,
                out.meta.best_val,
                out.checkpoint.display()
            );
        }
        Command::TrainDdpm => {
            let out = cmd_train_ddpm(&cfg)?;
            println!(
                "train-ddpm: {} epochs, best val loss {:.6e} -> {}",
                out.meta.epoch,
                out.meta.best_val,
                out.checkpoint.display()
            );
        }
        Command::FitStats => {
            let stats = cmd_fit_stats(&cfg)?;
            println!(
                "fit-stats: {} validation volumes, {} metric columns -> {}",
                stats.n_val,
                stats.metric_mean.len(),
                layout.stats_file().display()
            );
        }
        Command::Score { manifest, report, maps } => {
            let reports = cmd_score(&cfg, manifest, report, *maps)?;
            let failed = reports.iter().filter(|r| r.error.is_some()).count();
            println!(
                "score: {} volumes ({} failed) -> {}",
                reports.len(),
                failed,
                layout.report(report).display()
            );
        }
        Command::AnomalyMap { manifest } => {
            let paths = cmd_anomaly_map(&cfg, manifest)?;
            println!("anomaly-map: {} maps -> {}", paths.len(), layout.maps_dir().display());
        }
        Command::Evaluate { reports, baseline_reports, model_name } => {
            let mut models = vec![(model_name.clone(), reports.clone())];
            if !baseline_reports.is_empty() {
                models.push(("baseline".to_string(), baseline_reports.clone()));
            }
            let table = cmd_evaluate(&cfg, &models)?;
            print!("{}", table.render_text());
        }
        Command::Pipeline => {
            let out = cmd_pipeline(&cfg)?;
            println!(
                "pipeline complete: vqvae {} epochs (val mse {:.3e}), ddpm {} epochs (val loss {:.3e})",
                out.vq.meta.epoch, out.vq.meta.best_val, out.ddpm.meta.epoch, out.ddpm.meta.best_val
            );
            print!("{}", out.table.render_text());
            let worst = out
                .table
                .cells
                .iter()
                .min_by(|a, b| a.auc.partial_cmp(&b.auc).unwrap());
            if let Some(c) = worst {
                println!("lowest AUC: {} on {}", format_auc(c.auc), c.ood_class);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
