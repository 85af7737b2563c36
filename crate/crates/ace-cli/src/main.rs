//! `ace` — train, evaluate, and explain transformation-classification
//! anomaly detectors on concept-annotated image datasets.

use std::path::{Path, PathBuf};

use ace_cli::checkpoint::{self, Checkpoint, CheckpointHeader};
use ace_cli::config::{load_experiment_config, load_synthetic_spec};
use ace_cli::dataset_io::{load_dataset, save_dataset};
use ace_cli::{reports, runner};
use ace_core::harness::OneVsAllOutcome;
use ace_core::{generate_synthetic, normality_score, roc_auc, run_experiment, ScoredSample};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "ace",
    version,
    about = "Anomaly detection with concept-based explanations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic concept-annotated dataset.
    Generate {
        /// TOML dataset spec (image_size, n_classes, n_concepts,
        /// samples_per_class, optional noise_std and seed).
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one experiment cell and save its checkpoint.
    Train {
        /// TOML experiment config; omitted fields use backbone defaults.
        #[arg(long)]
        config: PathBuf,
        /// Input dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory (receives model.ace and losses.csv).
        #[arg(long)]
        out: PathBuf,
        /// Normal class for the one-vs-all split; defaults to the first
        /// class the config selects.
        #[arg(long)]
        k_ind: Option<usize>,
        /// Training seed; defaults to the first seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a dataset with a saved checkpoint.
    Eval {
        /// Checkpoint to load: a train output directory or a .ace file.
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory to score.
        #[arg(long)]
        data: PathBuf,
        /// Class treated as normal when labelling scores; defaults to the
        /// class the checkpoint was trained on.
        #[arg(long)]
        k_ind: Option<usize>,
        /// Write the score CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full one-vs-all grid and write a report.
    Run {
        /// TOML experiment config; omitted fields use backbone defaults.
        #[arg(long)]
        config: PathBuf,
        /// Input dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Output report directory.
        #[arg(long)]
        out: PathBuf,
        /// Worker thread count (defaults to the number of cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Rerun the grid over a parameter sweep.
    Sweep {
        #[command(subcommand)]
        sweep: SweepCommand,
    },
    /// Print the table from a report directory.
    Report {
        /// Report directory containing report.json.
        dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum SweepCommand {
    /// Sweep the fraction of concept dimensions used in training.
    Concepts {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated fractions in (0, 1].
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.25, 0.5, 0.75, 1.0])]
        fractions: Vec<f64>,
    },
    /// Sweep the concept-loss weight alpha.
    Alpha {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated non-negative weights.
        #[arg(long, value_delimiter = ',', default_values_t = [0.001, 0.01, 0.1, 1.0, 10.0])]
        alphas: Vec<f64>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { spec, out } => cmd_generate(&spec, &out),
        Command::Train {
            config,
            data,
            out,
            k_ind,
            seed,
        } => cmd_train(&config, &data, &out, k_ind, seed),
        Command::Eval {
            model,
            data,
            k_ind,
            out,
        } => cmd_eval(&model, &data, k_ind, out.as_deref()),
        Command::Run {
            config,
            data,
            out,
            jobs,
        } => cmd_run(&config, &data, &out, jobs),
        Command::Sweep { sweep } => match sweep {
            SweepCommand::Concepts {
                config,
                data,
                out,
                fractions,
            } => cmd_sweep(&config, &data, &out, SweepKind::Concepts(fractions)),
            SweepCommand::Alpha {
                config,
                data,
                out,
                alphas,
            } => cmd_sweep(&config, &data, &out, SweepKind::Alpha(alphas)),
        },
        Command::Report { dir } => cmd_report(&dir),
    }
}

fn cmd_generate(spec_path: &Path, out: &Path) -> Result<()> {
    let spec = load_synthetic_spec(spec_path)?;
    let dataset = generate_synthetic(&spec).map_err(|e| anyhow::anyhow!("{e}"))?;
    save_dataset(&dataset, out)?;
    let (h, w, c) = dataset.dims();
    println!(
        "wrote {} samples ({}x{}x{}, {} classes, {} concepts) to {}",
        dataset.len(),
        h,
        w,
        c,
        dataset.n_classes(),
        dataset.n_concepts(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    config_path: &Path,
    data: &Path,
    out: &Path,
    k_ind: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let config = load_experiment_config(config_path)?;
    let dataset = load_dataset(data)?;
    let classes = config
        .k_ind
        .resolve(dataset.n_classes())
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let k_ind = match k_ind {
        Some(k) => {
            if k >= dataset.n_classes() {
                bail!(
                    "--k-ind {k} is out of range for a dataset with {} classes",
                    dataset.n_classes()
                );
            }
            k
        }
        None => classes[0],
    };
    let seed = seed.unwrap_or(config.seeds[0]);

    let outcome =
        run_experiment(&config, &dataset, k_ind, seed).map_err(|e| anyhow::anyhow!("{e}"))?;

    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    let ckpt = Checkpoint {
        header: CheckpointHeader {
            model: config.model_config_for(&dataset),
            experiment: config,
            k_ind,
            seed,
        },
        params: outcome.params,
        centroids: outcome.centroids,
        knn: outcome.knn,
    };
    checkpoint::save(&ckpt, &out.join("model.ace"))?;
    std::fs::write(out.join("losses.csv"), reports::loss_csv(&outcome.history))
        .context("writing losses.csv")?;
    println!(
        "trained k_ind {} seed {}: auc {:.4}, concept_acc {:.4}; checkpoint at {}",
        k_ind,
        seed,
        outcome.auc,
        outcome.concept_acc,
        out.join("model.ace").display()
    );
    Ok(())
}

fn cmd_eval(model: &Path, data: &Path, k_ind: Option<usize>, out: Option<&Path>) -> Result<()> {
    let model_file = if model.is_dir() {
        model.join("model.ace")
    } else {
        model.to_path_buf()
    };
    let ckpt = checkpoint::load(&model_file)?;
    let dataset = load_dataset(data)?;
    let k_ind = k_ind.unwrap_or(ckpt.header.k_ind);
    if k_ind >= dataset.n_classes() {
        bail!(
            "--k-ind {k_ind} is out of range for a dataset with {} classes",
            dataset.n_classes()
        );
    }
    let (_, width, _) = dataset.dims();
    let bank = ckpt
        .header
        .experiment
        .bank_for(width)
        .map_err(|e| anyhow::anyhow!("{e}"))?;

    let mut scored = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let sample = dataset.sample(i);
        let feature = ckpt.params.encode(&sample.image).map_err(|e| anyhow::anyhow!("{e}"))?;
        let ns = match &ckpt.knn {
            Some(index) => index.score(&feature),
            None => normality_score(&sample.image, &ckpt.params, &bank, &ckpt.centroids)
                .map_err(|e| anyhow::anyhow!("{e}"))?,
        };
        scored.push(ScoredSample {
            sample_id: i,
            normality_score: ns,
            anomaly_label: u8::from(sample.class_id != k_ind),
            concept_probs: ckpt
                .params
                .predict_concepts(&feature)
                .map_err(|e| anyhow::anyhow!("{e}"))?,
        });
    }

    let csv = reports::scores_csv(&scored, dataset.n_concepts());
    match out {
        Some(path) => {
            std::fs::write(path, csv)
                .with_context(|| format!("writing scores to {}", path.display()))?;
            let labels: Vec<u8> = scored.iter().map(|s| s.anomaly_label).collect();
            let scores: Vec<f64> = scored.iter().map(|s| s.normality_score).collect();
            let mut line = format!(
                "scored {} samples against class {} to {}",
                scored.len(),
                k_ind,
                path.display()
            );
            if labels.contains(&0) && labels.contains(&1) {
                let auc = roc_auc(&scores, &labels).map_err(|e| anyhow::anyhow!("{e}"))?;
                line.push_str(&format!("; auc {auc:.4}"));
            }
            println!("{line}");
        }
        None => print!("{csv}"),
    }
    Ok(())
}

/// Prints per-cell failure warnings and errors out (after artifacts are
/// written) when any cell failed.
fn surface_failures(outcome: &OneVsAllOutcome, total: usize) -> Result<()> {
    for f in &outcome.failures {
        eprintln!(
            "warning: cell (k_ind {}, seed {}) failed: {}",
            f.k_ind, f.seed, f.message
        );
    }
    if !outcome.failures.is_empty() {
        bail!(
            "{} of {} cells failed; report covers the {} that succeeded",
            outcome.failures.len(),
            total,
            outcome.report.cells.len()
        );
    }
    Ok(())
}

fn cmd_run(config_path: &Path, data: &Path, out: &Path, jobs: Option<usize>) -> Result<()> {
    let config = load_experiment_config(config_path)?;
    let dataset = load_dataset(data)?;
    let outcome = runner::run_grid(&config, &dataset, jobs)?;
    reports::write_run_artifacts(&outcome, out)?;
    print!("{}", reports::format_report(&outcome.report));
    println!("report written to {}", out.display());
    let total = outcome.report.cells.len() + outcome.failures.len();
    surface_failures(&outcome, total)
}

enum SweepKind {
    Concepts(Vec<f64>),
    Alpha(Vec<f64>),
}

fn cmd_sweep(config_path: &Path, data: &Path, out: &Path, kind: SweepKind) -> Result<()> {
    let config = load_experiment_config(config_path)?;
    let dataset = load_dataset(data)?;
    let (label, points) = match kind {
        SweepKind::Concepts(fractions) => (
            "concept fraction",
            ace_core::sweep_concept_fraction(&config, &dataset, &fractions)
                .map_err(|e| anyhow::anyhow!("{e}"))?,
        ),
        SweepKind::Alpha(alphas) => (
            "alpha",
            ace_core::sweep_alpha(&config, &dataset, &alphas)
                .map_err(|e| anyhow::anyhow!("{e}"))?,
        ),
    };
    reports::write_sweep_artifacts(&points, out)?;
    println!("{label:>16} {:>10} {:>14}", "auc", "concept_acc");
    let mut failed = 0usize;
    let mut total = 0usize;
    for p in &points {
        println!(
            "{:>16} {:>10.4} {:>14.4}",
            p.value, p.outcome.report.average.auc, p.outcome.report.average.concept_acc
        );
        for f in &p.outcome.failures {
            eprintln!(
                "warning: point {} cell (k_ind {}, seed {}) failed: {}",
                p.value, f.k_ind, f.seed, f.message
            );
        }
        failed += p.outcome.failures.len();
        total += p.outcome.report.cells.len() + p.outcome.failures.len();
    }
    println!("sweep written to {}", out.display());
    if failed > 0 {
        bail!("{failed} of {total} sweep cells failed");
    }
    Ok(())
}

fn cmd_report(dir: &Path) -> Result<()> {
    let report = reports::read_report(dir)?;
    print!("{}", reports::format_report(&report));
    Ok(())
}
