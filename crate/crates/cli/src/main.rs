//! Command-line experiments: analytic cost tables, toy descriptor training,
//! gradient checks, end-to-end simulations and retrieval evaluation.
//!
//! Every subcommand is deterministic given `--seed` and writes its artifacts
//! under the directory given by `--out`. Exit codes: 0 on success, 1 when a
//! check fails or an input is unusable, 2 on usage errors.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use revisit_core::gradcheck::{run_gradcheck_with_fault, GradCheckConfig};
use revisit_core::loss::LossKind;
use revisit_core::netvlad::flops::{default_configs, report_csv, FlopsConfig};
use revisit_core::placedb::{pr_curve, read_jsonl, PrCurve};
use revisit_core::sim::pipeline::{
    attach_ground_truth, run_pipeline, IdentityProvider, PipelineConfig,
};
use revisit_core::sim::tuples::{generate_tuples, TupleDatasetConfig};
use revisit_core::sim::{
    generate, trajectory_csv, GroundTruth, MeasurementConfig, SimConfig, SimLoopProvider,
};
use revisit_core::train::{toy_train, ToyTrainConfig, TrainLog};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "revisit",
    version,
    about = "Loop-closure and kidnap-recovery experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LossArg {
    Triplet,
    Allpair,
    /// Run both losses under identical seeds and emit a comparison summary.
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Emit the analytic computation/parameter table as CSV
    Flops {
        /// JSON array of table configurations; the built-in table when absent
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the aggregation layer on synthetic tuples and log the run
    TrainToy {
        #[arg(long, value_enum)]
        loss: LossArg,
        /// JSON with `train` and `dataset` sections; defaults when absent
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every analytic gradient path
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Tuples per loss kind
        #[arg(long, default_value_t = 100)]
        tuples: usize,
        /// Tuples for the through-aggregation check
        #[arg(long, default_value_t = 20)]
        feature_tuples: usize,
        /// Test fixture: corrupt one gradient to prove the check catches it
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a stream, run the full pipeline, write all reports
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precision-recall of store-and-compare retrieval over a stream
    PrEval {
        /// Keyframe stream, JSON lines
        #[arg(long)]
        stream: PathBuf,
        /// Ground truth JSON written by `simulate`
        #[arg(long)]
        gt: PathBuf,
        /// Exclusion window, in keyframes
        #[arg(long, default_value_t = 150)]
        exclusion: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainToyFile {
    train: ToyTrainConfig,
    dataset: TupleDatasetConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct SimulateFile {
    sim: SimConfig,
    #[serde(default)]
    pipeline: PipelineConfig,
    #[serde(default)]
    measurement: MeasurementConfig,
}

#[derive(Serialize)]
struct TrainComparison {
    triplet_final_val_pct: f64,
    allpair_final_val_pct: f64,
    triplet_cumulative_zero_loss: usize,
    allpair_cumulative_zero_loss: usize,
    allpair_val_ge_triplet: bool,
    allpair_zero_loss_le_triplet: bool,
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    write_file(dir, name, &serde_json::to_string_pretty(value)?)
}

fn cmd_flops(config: Option<&Path>, out: &Path) -> Result<()> {
    let configs: Vec<FlopsConfig> = match config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text).context("parsing flops config")?
        }
        None => default_configs(),
    };
    let csv = report_csv(&configs);
    let path = write_file(out, "flops.csv", &csv)?;
    println!("wrote {} ({} rows)", path.display(), csv.lines().count() - 1);
    Ok(())
}

fn run_one_loss(
    dataset: &revisit_core::train::TupleDataset,
    cfg: &ToyTrainConfig,
    kind: LossKind,
    out: &Path,
) -> Result<TrainLog> {
    let (log, _) = toy_train(dataset, cfg, kind)?;
    let name = match kind {
        LossKind::Triplet => "train_log_triplet.csv",
        LossKind::Allpair => "train_log_allpair.csv",
    };
    let path = write_file(out, name, &log.to_csv())?;
    println!(
        "{kind:?}: final val pairs {:.2}%, cumulative zero-loss {} -> {}",
        log.final_val_pairs_pct(),
        log.cumulative_zero_loss(),
        path.display()
    );
    Ok(log)
}

fn cmd_train_toy(
    loss: LossArg,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let mut file: TrainToyFile = match config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text).context("parsing train config")?
        }
        None => TrainToyFile::default(),
    };
    if let Some(seed) = seed {
        file.train.seed = seed;
        file.dataset.seed = seed;
    }
    if file.train.dim != file.dataset.channels {
        bail!(
            "train.dim ({}) must equal dataset.channels ({})",
            file.train.dim,
            file.dataset.channels
        );
    }
    let dataset = generate_tuples(&file.dataset);
    match loss {
        LossArg::Triplet => {
            run_one_loss(&dataset, &file.train, LossKind::Triplet, out)?;
        }
        LossArg::Allpair => {
            run_one_loss(&dataset, &file.train, LossKind::Allpair, out)?;
        }
        LossArg::Both => {
            let triplet = run_one_loss(&dataset, &file.train, LossKind::Triplet, out)?;
            let allpair = run_one_loss(&dataset, &file.train, LossKind::Allpair, out)?;
            let comparison = TrainComparison {
                triplet_final_val_pct: triplet.final_val_pairs_pct(),
                allpair_final_val_pct: allpair.final_val_pairs_pct(),
                triplet_cumulative_zero_loss: triplet.cumulative_zero_loss(),
                allpair_cumulative_zero_loss: allpair.cumulative_zero_loss(),
                allpair_val_ge_triplet: allpair.final_val_pairs_pct()
                    >= triplet.final_val_pairs_pct(),
                allpair_zero_loss_le_triplet: allpair.cumulative_zero_loss()
                    <= triplet.cumulative_zero_loss(),
            };
            let path = write_json(out, "comparison.json", &comparison)?;
            println!("comparison -> {}", path.display());
        }
    }
    Ok(())
}

fn cmd_gradcheck(
    seed: u64,
    tuples: usize,
    feature_tuples: usize,
    inject: bool,
    out: Option<&Path>,
) -> Result<bool> {
    let cfg = GradCheckConfig {
        seed,
        tuples,
        feature_tuples,
        ..Default::default()
    };
    let report = run_gradcheck_with_fault(&cfg, inject);
    println!(
        "triplet max relative error:  {:.3e}",
        report.triplet_max_rel
    );
    println!(
        "allpair max relative error:  {:.3e}",
        report.allpair_max_rel
    );
    println!(
        "netvlad chain max rel error: {:.3e}",
        report.netvlad_max_rel
    );
    println!(
        "tolerance {:.1e}: {}",
        report.tolerance,
        if report.pass { "PASS" } else { "FAIL" }
    );
    if let Some(dir) = out {
        write_json(dir, "gradcheck.json", &report)?;
    }
    Ok(report.pass)
}

fn cmd_simulate(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let text = fs::read_to_string(config)
        .with_context(|| format!("reading config {}", config.display()))?;
    let mut file: SimulateFile = serde_json::from_str(&text).context("parsing sim config")?;
    if let Some(seed) = seed {
        file.sim.seed = seed;
    }
    let (stream, truth) = generate(&file.sim)?;
    let mut provider = SimLoopProvider::new(&truth, file.measurement, file.sim.seed ^ 0x5151);
    let output = run_pipeline(&stream, &file.pipeline, &mut provider)?;

    write_file(out, "stream.jsonl", &revisit_core::placedb::write_jsonl(&stream))?;
    write_json(out, "ground_truth.json", &truth)?;
    write_json(out, "world_report.json", &output.world_report)?;
    write_json(out, "accepted_loops.json", &output.accepted)?;
    if let Some(report) = &output.solve_report {
        write_json(out, "solve_report.json", report)?;
    }
    let records = attach_ground_truth(
        &output.records,
        &truth,
        file.pipeline.placedb.exclusion_window,
    );
    if records.iter().any(|r| r.true_match.is_some()) {
        let curve = pr_curve(&records, file.pipeline.placedb.locality_window)?;
        write_pr(out, &curve)?;
    }
    let initial: Vec<(u64, revisit_core::Pose)> = output
        .initial_trajectory
        .iter()
        .map(|f| (f.frame, f.pose))
        .collect();
    let optimized: Vec<(u64, revisit_core::Pose)> = output
        .optimized_trajectory
        .iter()
        .map(|f| (f.frame, f.pose))
        .collect();
    write_file(out, "trajectory_odometry.csv", &trajectory_csv(&initial))?;
    write_file(out, "trajectory_optimized.csv", &trajectory_csv(&optimized))?;
    write_file(out, "posegraph.g2o", &output.g2o)?;

    println!(
        "{} frames, {} keyframes, {} worlds in {} sets, {} accepted loops -> {}",
        output.frames_processed,
        output.keyframes_stored,
        output.world_report.worlds.len(),
        output.world_report.sets.len(),
        output.accepted.len(),
        out.display()
    );
    Ok(())
}

fn write_pr(out: &Path, curve: &PrCurve) -> Result<()> {
    write_file(out, "pr_curve.csv", &curve.to_csv())?;
    let max_recall = curve.points.last().map(|p| p.recall).unwrap_or(0.0);
    write_json(
        out,
        "pr_summary.json",
        &serde_json::json!({
            "auc": curve.auc,
            "max_recall": max_recall,
            "thresholds": curve.points.len(),
        }),
    )?;
    println!("pr auc {:.4} over {} thresholds", curve.auc, curve.points.len());
    Ok(())
}

fn cmd_pr_eval(stream_path: &Path, gt_path: &Path, exclusion: u64, out: &Path) -> Result<()> {
    let stream_text = fs::read_to_string(stream_path)
        .with_context(|| format!("reading stream {}", stream_path.display()))?;
    let stream = read_jsonl(&stream_text).context("parsing keyframe stream")?;
    let gt_text = fs::read_to_string(gt_path)
        .with_context(|| format!("reading ground truth {}", gt_path.display()))?;
    let truth: GroundTruth = serde_json::from_str(&gt_text).context("parsing ground truth")?;

    let mut cfg = PipelineConfig::default();
    cfg.placedb.exclusion_window = exclusion;
    cfg.solve = false;
    let mut provider = IdentityProvider;
    let output = run_pipeline(&stream, &cfg, &mut provider)?;
    let records = attach_ground_truth(&output.records, &truth, cfg.placedb.exclusion_window);
    let curve = pr_curve(&records, cfg.placedb.locality_window)?;
    write_pr(out, &curve)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Flops { config, out } => cmd_flops(config.as_deref(), out).map(|_| true),
        Command::TrainToy {
            loss,
            config,
            seed,
            out,
        } => cmd_train_toy(*loss, config.as_deref(), *seed, out).map(|_| true),
        Command::Gradcheck {
            seed,
            tuples,
            feature_tuples,
            inject_sign_flip,
            out,
        } => cmd_gradcheck(
            seed.unwrap_or(0),
            *tuples,
            *feature_tuples,
            *inject_sign_flip,
            out.as_deref(),
        ),
        Command::Simulate { config, seed, out } => {
            cmd_simulate(config, *seed, out).map(|_| true)
        }
        Command::PrEval {
            stream,
            gt,
            exclusion,
            out,
        } => cmd_pr_eval(stream, gt, *exclusion, out).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
