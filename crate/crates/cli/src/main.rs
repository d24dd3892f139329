use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use nsvae::codec::Container;
use nsvae::dataio::{synth_clusters, write_feature_dataset, FileFormat};
use nsvae::nullspace::diagnostics_csv;
use nsvae::pipeline::{
    ablation_csv, checkpoint_path, diagnose, evaluate_checkpoint, run_ablation, run_experiment, standard_grid,
    ExperimentConfig, ENV_PREFIX,
};

#[derive(Parser)]
#[command(name = "nsvae", version, about = "Class-incremental learning with null-space VAE replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-cluster feature file (.csv or binary).
    GenData {
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 250)]
        per_class: usize,
        #[arg(long, default_value_t = 1.0)]
        spread: f64,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one configuration over all its seeds.
    Train {
        /// Flat `key = value` config; `NSVAE_<KEY>` variables override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write one checkpoint per seed and task under `<out>/checkpoints`.
        #[arg(long)]
        checkpoints: bool,
    },
    /// Run the standard comparison grid built around one base config.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Keep only these grid entries (repeatable).
        #[arg(long = "only")]
        only: Vec<String>,
    },
    /// Compare checkpoints of one run, given in task order.
    Diagnose {
        #[arg(required = true, num_args = 2..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-evaluate a checkpoint's classifier on the test splits of its config.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print the effective config (defaults, file and overrides applied).
    ShowConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(path, std::env::vars())?)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            classes,
            dim,
            per_class,
            spread,
            seed,
            out,
        } => {
            let synth = synth_clusters(classes, dim, per_class, spread, seed)?;
            write_feature_dataset(&out, &synth.dataset, FileFormat::from_path(&out))?;
            eprintln!("wrote {} records to {}", synth.dataset.len(), out.display());
        }
        Command::Train {
            config,
            out,
            checkpoints,
        } => {
            let cfg = load_config(config.as_deref())?;
            fs::create_dir_all(&out)?;
            let ckpt_dir = out.join("checkpoints");
            let report = run_experiment(&cfg, checkpoints.then_some(ckpt_dir.as_path()))?;
            write(&out.join("report.json"), report.to_json()?)?;
            write(&out.join("metrics.json"), serde_json::to_string_pretty(&report.metrics())?)?;
            write(&out.join("accuracy.csv"), report.accuracy_csv())?;
            write(&out.join("proportions.csv"), report.proportion_csv())?;
            write(&out.join("timings.json"), serde_json::to_string_pretty(&report.timings)?)?;
            let s = &report.summary;
            println!(
                "{}: FAA {:.2} ± {:.2}{}",
                cfg.variant,
                100.0 * s.faa_mean,
                100.0 * s.faa_std,
                s.aia_mean
                    .map_or(String::new(), |a| format!(", AIA {:.2}", 100.0 * a))
            );
            if checkpoints {
                println!(
                    "checkpoints under {}",
                    checkpoint_path(&ckpt_dir, cfg.seeds[0], 0).parent().unwrap().display()
                );
            }
        }
        Command::Ablate { config, out, only } => {
            let base = load_config(config.as_deref())?;
            let grid: Vec<_> = standard_grid(&base)
                .into_iter()
                .filter(|(name, _)| only.is_empty() || only.contains(name))
                .collect();
            if grid.is_empty() {
                bail!("no grid entry matches {only:?}");
            }
            fs::create_dir_all(&out)?;
            let (rows, _) = run_ablation(&grid)?;
            write(&out.join("ablation.csv"), ablation_csv(&rows))?;
            write(&out.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
            for r in &rows {
                println!(
                    "{:24} FAA {:6.2} ± {:5.2}  memory {:>8}  mean R {}",
                    r.name,
                    100.0 * r.faa_mean,
                    100.0 * r.faa_std,
                    r.memory_total,
                    r.mean_proportion.map_or("-".into(), |v| format!("{v:.4}"))
                );
            }
        }
        Command::Diagnose {
            checkpoints,
            out,
            samples,
            seed,
        } => {
            let containers = checkpoints
                .iter()
                .map(|p| {
                    let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
                    Container::from_bytes(&bytes).with_context(|| format!("decoding {}", p.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            let d = diagnose(&containers, samples, seed)?;
            fs::create_dir_all(&out)?;
            write(&out.join("diagnostics.json"), serde_json::to_string_pretty(&d)?)?;
            write(&out.join("pca.csv"), &d.pca_csv)?;
            let rows: Vec<_> = d.proportions.iter().map(|p| (p.task, p.layer.clone())).collect();
            write(&out.join("proportions.csv"), diagnostics_csv(&rows))?;
            for r in &d.drift {
                println!("drift task {} -> {}: {:.4}", r.from_task, r.to_task, r.drift);
            }
        }
        Command::Eval { config, checkpoint } => {
            let cfg = load_config(config.as_deref())?;
            let bytes = fs::read(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let acc = evaluate_checkpoint(&cfg, &Container::from_bytes(&bytes)?)?;
            println!("{}", serde_json::to_string(&acc)?);
        }
        Command::ShowConfig { config } => {
            let cfg = load_config(config.as_deref())?;
            print!("{}", cfg.to_toml_string()?);
            eprintln!("every key can be overridden with {ENV_PREFIX}<KEY>");
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
