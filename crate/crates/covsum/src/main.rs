use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use covsum::cluster::{clustering_representation, kmeans};
use covsum::data::{load_cached_cuts, load_dataset, read_matrix, store_cached_cuts, VideoRecord};
use covsum::gradcheck::finite_difference_check;
use covsum::metrics::{f_measure_multi, kendall_tau, spearman_rho, AggregationMode, EvalReport};
use covsum::model::{forward_single, ModelParams};
use covsum::train::{train, TrainConfig};
use covsum::{generate_summary, Kernel, KtsConfig, ModelConfig, SummaryMask, Tape, ValueMode};

#[derive(Parser)]
#[command(name = "covsum", version, about = "Co-summarization of videos with a hierarchical transformer")]
struct Cli {
    /// Overrides the seed from --config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON training configuration; fields mirror TrainConfig.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KernelArg {
    Linear,
    Rbf,
}

#[derive(Subcommand)]
enum Command {
    /// Detect shot boundaries in one feature file; prints a JSON cut array.
    Segment {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 40)]
        max_segments: usize,
        #[arg(long, default_value_t = 1.0)]
        penalty: f64,
        #[arg(long, value_enum, default_value_t = KernelArg::Linear)]
        kernel: KernelArg,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
    },
    /// Group a dataset's videos by k-means over semantic representations.
    Cluster {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 25)]
        k: usize,
        /// Use a trained model for representations instead of mean features.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train a model; writes model.bin and loss_log.json.
    Train {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Score and summarize every video; writes one prediction JSON each.
    Summarize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0.15)]
        gamma: f64,
        #[arg(long, value_enum, default_value_t = ValueModeArg::Mean)]
        value_mode: ValueModeArg,
    },
    /// Evaluate predictions against a dataset; writes eval_report.json.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_enum, default_value_t = AggArg::Mean)]
        aggregation: AggArg,
    },
    /// Generate a synthetic dataset with planted shots and importance.
    Synth {
        #[arg(long, default_value_t = 8)]
        videos: usize,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        clusters: usize,
    },
    /// Verify analytic gradients against finite differences on toy dims.
    Gradcheck {
        #[arg(long, default_value_t = 200)]
        coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ValueModeArg {
    Mean,
    Sum,
}

impl From<ValueModeArg> for ValueMode {
    fn from(v: ValueModeArg) -> Self {
        match v {
            ValueModeArg::Mean => ValueMode::Mean,
            ValueModeArg::Sum => ValueMode::Sum,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AggArg {
    Mean,
    Max,
}

impl From<AggArg> for AggregationMode {
    fn from(v: AggArg) -> Self {
        match v {
            AggArg::Mean => AggregationMode::Mean,
            AggArg::Max => AggregationMode::Max,
        }
    }
}

/// Prediction JSON written by `summarize` and read by `eval`.
#[derive(Serialize, Deserialize)]
struct Prediction {
    video_id: String,
    gamma: f64,
    selected_shots: Vec<usize>,
    /// Run-length encoded selection as [start, len] pairs.
    y: Vec<(usize, usize)>,
    /// Frame count, so the mask can be rebuilt.
    num_frames: usize,
    /// Predicted per-frame importance, used for rank-based evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame_scores: Option<Vec<f64>>,
}

fn load_train_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Shot boundaries with the on-disk cache next to the manifest.
fn segmented_records(manifest_path: &Path, records: &mut [VideoRecord]) -> Result<()> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    for record in records.iter_mut() {
        if let Some(bounds) = load_cached_cuts(dir, &record.id)? {
            record.boundaries = Some(bounds);
        } else {
            let bounds = covsum::kts::kts(&record.features, &KtsConfig::default())?;
            store_cached_cuts(dir, &record.id, &bounds)?;
            record.boundaries = Some(bounds);
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;

    match &cli.command {
        Command::Segment { features, max_segments, penalty, kernel, sigma } => {
            let tensor = read_matrix(features)?;
            let cfg = KtsConfig {
                max_segments: *max_segments,
                penalty_coefficient: *penalty,
                kernel: match kernel {
                    KernelArg::Linear => Kernel::Linear,
                    KernelArg::Rbf => Kernel::Rbf { sigma: *sigma },
                },
            };
            let bounds = covsum::kts::kts(&tensor, &cfg)?;
            println!("{}", serde_json::to_string(bounds.cuts())?);
        }

        Command::Cluster { manifest, k, model } => {
            let cfg = load_train_config(&cli)?;
            let (mut manifest_data, mut records) = load_dataset(manifest)?;
            let params = model.as_deref().map(ModelParams::load).transpose()?;
            if params.is_some() {
                segmented_records(manifest, &mut records)?;
            }
            let reps = records
                .iter()
                .map(|r| clustering_representation(r, params.as_ref()))
                .collect::<Result<Vec<_>, _>>()?;
            let k = (*k).clamp(1, records.len());
            let result = kmeans(&reps, k, cfg.seed)?;
            let assignments: Vec<(String, usize)> = records
                .iter()
                .zip(&result.assignments)
                .map(|(r, &a)| (r.id.clone(), a))
                .collect();
            fs::write(cli.out.join("clusters.json"), serde_json::to_string_pretty(&assignments)?)?;
            for (entry, &a) in manifest_data.videos.iter_mut().zip(&result.assignments) {
                entry.cluster_id = Some(a);
            }
            manifest_data.save(&cli.out.join("manifest.json"))?;
            println!("wrote {} and {}", cli.out.join("clusters.json").display(), cli.out.join("manifest.json").display());
        }

        Command::Train { manifest } => {
            let cfg = load_train_config(&cli)?;
            let (_, mut records) = load_dataset(manifest)?;
            segmented_records(manifest, &mut records)?;
            let outcome = train(&mut records, &cfg)?;
            let model_path = cli.out.join("model.bin");
            outcome.params.save(&model_path)?;
            fs::write(cli.out.join("loss_log.json"), serde_json::to_string_pretty(&outcome.log)?)?;
            let last = outcome.log.epochs.last().map(|e| e.total).unwrap_or(f64::NAN);
            println!("trained {} epochs, final epoch loss {last:.6}; model at {}", cfg.epochs, model_path.display());
        }

        Command::Summarize { manifest, model, gamma, value_mode } => {
            let params = ModelParams::load(model)?;
            let (_, mut records) = load_dataset(manifest)?;
            segmented_records(manifest, &mut records)?;
            let pred_dir = cli.out.join("predictions");
            fs::create_dir_all(&pred_dir)?;
            for record in &records {
                let bounds = record.boundaries.as_ref().expect("segmented above");
                let mut tape = Tape::new();
                let ids = params.register(&mut tape);
                let fwd = forward_single(&mut tape, &ids, &record.features, bounds)?;
                let frame_scores = tape.data(fwd.frame_scores).to_vec();
                let mask = generate_summary(&frame_scores, bounds, *gamma, (*value_mode).into())?;
                let prediction = Prediction {
                    video_id: record.id.clone(),
                    gamma: *gamma,
                    selected_shots: mask.selected_shots.clone(),
                    y: mask.runs(),
                    num_frames: record.num_frames(),
                    frame_scores: Some(frame_scores),
                };
                let path = pred_dir.join(format!("{}.json", record.id));
                fs::write(&path, serde_json::to_string_pretty(&prediction)?)?;
            }
            println!("wrote {} prediction files to {}", records.len(), pred_dir.display());
        }

        Command::Eval { manifest, predictions, aggregation } => {
            let (_, records) = load_dataset(manifest)?;
            let mode: AggregationMode = (*aggregation).into();
            let mut reports = Vec::new();
            for record in &records {
                let path = predictions.join(format!("{}.json", record.id));
                let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                let pred: Prediction = serde_json::from_str(&text)?;
                let mask = SummaryMask::from_runs(pred.num_frames, &pred.y, pred.gamma, pred.selected_shots.clone());
                let (precision, recall, f) = match &record.user_summaries {
                    Some(gts) => f_measure_multi(&mask.y, gts, mode)?,
                    None => match &record.gt_scores {
                        Some(gt) => {
                            let gt_mask: Vec<bool> = gt.iter().map(|&g| g > 0.5).collect();
                            f_measure_multi(&mask.y, &[gt_mask], mode)?
                        }
                        None => bail!("video {:?} has neither user summaries nor ground-truth scores", record.id),
                    },
                };
                let (tau, rho) = match (&record.gt_scores, &pred.frame_scores) {
                    (Some(gt), Some(scores)) => {
                        (Some(kendall_tau(scores, gt)?), Some(spearman_rho(scores, gt)?))
                    }
                    _ => (None, None),
                };
                reports.push(EvalReport {
                    video_id: record.id.clone(),
                    precision,
                    recall,
                    f_measure: f,
                    kendall_tau: tau,
                    spearman_rho: rho,
                    aggregation_mode: mode,
                });
            }
            let mean = |f: &dyn Fn(&EvalReport) -> Option<f64>| -> Option<f64> {
                let values: Vec<f64> = reports.iter().filter_map(f).collect();
                (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
            };
            let aggregate = serde_json::json!({
                "mean_f_measure": mean(&|r| Some(r.f_measure)),
                "mean_kendall_tau": mean(&|r| r.kendall_tau),
                "mean_spearman_rho": mean(&|r| r.spearman_rho),
            });
            let report = serde_json::json!({ "videos": reports, "aggregate": aggregate });
            let path = cli.out.join("eval_report.json");
            fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            println!("{}", serde_json::to_string_pretty(&aggregate)?);
            println!("full report at {}", path.display());
        }

        Command::Synth { videos, frames, dim, clusters } => {
            let cfg = load_train_config(&cli)?;
            let synth_cfg = covsum::synth::SynthConfig {
                seed: cfg.seed,
                n_videos: *videos,
                frames: *frames,
                d_f: *dim,
                n_clusters: *clusters,
            };
            let (manifest, _) = covsum::synth::synth_dataset(&cli.out, &synth_cfg)?;
            println!("wrote {} videos under {}", manifest.videos.len(), cli.out.display());
        }

        Command::Gradcheck { coords, step } => {
            let toy = ModelConfig {
                d_f: 8,
                d_s: 6,
                d_v: 6,
                f_layers: 1,
                f_heads: 2,
                f_ff: 12,
                s_layers: 1,
                s_heads: 2,
                s_ff: 10,
            };
            let cfg = load_train_config(&cli)?;
            let mut failed = false;
            for supervised in [true, false] {
                let report = finite_difference_check(&toy, supervised, *coords, *step, cfg.seed)?;
                let label = if supervised { "supervised" } else { "unsupervised" };
                let verdict = if report.max_rel_err < 1e-4 { "PASS" } else { "FAIL" };
                println!(
                    "[{verdict}] gradcheck {label}: {} coords, max relative error {:.3e}",
                    report.coords_checked, report.max_rel_err
                );
                failed |= report.max_rel_err >= 1e-4;
            }
            if failed {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}
