//! `forgenet`: batch command-line interface to the manipulation-detector
//! pipeline — synthetic data generation, mask construction, receptive-field
//! inspection, training, evaluation, inference, gradient verification, and
//! the λ-grid ablation.
//!
//! Exit codes: 0 success, 1 validation/config error, 2 I/O error,
//! 3 check failure (gradcheck, rf contract).

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use forgenet_core::checkpoint;
use forgenet_core::dataio::{self, Dataset, SynthParams};
use forgenet_core::error::{Error, Result};
use forgenet_core::maskgen;
use forgenet_core::model::{receptive_field, Model, REQUIRED_RECEPTIVE_FIELD};
use forgenet_core::tensor::run_gradcheck;
use forgenet_core::trainer::{self, PredictMode};

use config::{load_arch_config, load_train_config, parse_f64_list, TrainOverrides};

#[derive(Parser)]
#[command(
    name = "forgenet",
    version,
    about = "Local-feature face-manipulation detector"
)]
struct Cli {
    /// Cap internal parallelism (default: machine parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Machine-readable JSON on stdout where applicable.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the deterministic synthetic manipulation benchmark.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Real images per split; fakes match this count.
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.02)]
        amplitude: f32,
        #[arg(long, default_value_t = 32)]
        levels: u32,
        #[arg(long, default_value_t = 3)]
        smoothing: u32,
        /// Comma-separated objectives: fake, fake-cvm, face, or none.
        #[arg(long, default_value = "fake")]
        objectives: String,
    },
    /// Write a mask PNG (zeros, ones, or convex hull of landmarks).
    Mask {
        #[arg(long, value_parser = ["zm", "om", "cvm"])]
        kind: String,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        /// Landmark JSON file (required for cvm).
        #[arg(long)]
        landmarks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the layer-by-layer receptive-field table.
    Rf {
        /// Architecture TOML (defaults to the built-in stack).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report only; do not fail when the final RF is not 33.
        #[arg(long)]
        allow_rf_mismatch: bool,
    },
    /// Train on a manifest pair and write history plus checkpoints.
    Train {
        #[arg(long)]
        arch_config: Option<PathBuf>,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        val_manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Evaluate a checkpoint over a manifest; writes metrics + curve CSVs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "classifier")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Center-crop size (defaults to the manifest crop size).
        #[arg(long)]
        crop_size: Option<usize>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Per-image fake probability for one image or a directory of PNGs.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "dir")]
        image: Option<PathBuf>,
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long, default_value = "classifier")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        head: usize,
        /// Center-crop before inference (any size ≥ 33 works without it).
        #[arg(long)]
        crop_size: Option<usize>,
        /// Write per-image segmentation-probability heatmap PNGs here.
        #[arg(long)]
        heatmap_dir: Option<PathBuf>,
    },
    /// 64-bit finite-difference verification of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// λ-grid × seed ablation; writes a results CSV.
    Ablate {
        /// Comma-separated λ_seg values.
        #[arg(long)]
        lambdas: String,
        /// Number of seeds per λ (seeds are train-config seed + 0..N).
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        arch_config: Option<PathBuf>,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        val_manifest: PathBuf,
        #[arg(long)]
        test_manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Treat help/version as success, usage problems as validation
            // errors.
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                ExitCode::from(2)
            } else if e.is_check() {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Synth {
            out,
            count,
            size,
            seed,
            amplitude,
            levels,
            smoothing,
            objectives,
        } => {
            let params = SynthParams {
                count_per_class: *count,
                size: *size,
                seed: *seed,
                amplitude: *amplitude,
                levels: *levels,
                smoothing_passes: *smoothing,
            };
            let objectives = dataio::parse_objectives(objectives)?;
            let summary = dataio::synth_dataset(&params, &objectives, out)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("serializable")
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Mask {
            kind,
            height,
            width,
            landmarks,
            out,
        } => {
            let mask = match kind.as_str() {
                "zm" => maskgen::zeros_mask(*height, *width),
                "om" => maskgen::ones_mask(*height, *width),
                "cvm" => {
                    let path = landmarks
                        .as_ref()
                        .ok_or_else(|| Error::config("--kind cvm requires --landmarks"))?;
                    let lm = maskgen::load_landmarks(path)?;
                    maskgen::convex_hull_mask(&lm, *height, *width)?
                }
                _ => unreachable!("constrained by clap"),
            };
            maskgen::save_mask_png(&mask, out)?;
            if cli.json {
                println!(
                    "{}",
                    json!({"out": out, "kind": kind, "positive_pixels": mask.count_ones()})
                );
            } else {
                println!(
                    "wrote {} ({} positive pixels)",
                    out.display(),
                    mask.count_ones()
                );
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Rf {
            config,
            allow_rf_mismatch,
        } => {
            let mut arch = load_arch_config(config.as_deref())?;
            if *allow_rf_mismatch {
                arch.allow_rf_mismatch = true;
            }
            let rf = receptive_field(&arch);
            if cli.json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&rf).expect("serializable")
                );
            } else {
                println!("{:<10} {:>5} {:>5} {:>7}", "layer", "rf", "jump", "offset");
                for layer in &rf.layers {
                    println!(
                        "{:<10} {:>5} {:>5} {:>7}",
                        layer.name, layer.rf, layer.jump, layer.center_offset
                    );
                }
                println!(
                    "final rf={} jump={} offset={}",
                    rf.final_rf, rf.final_jump, rf.final_center_offset
                );
            }
            if rf.final_rf != REQUIRED_RECEPTIVE_FIELD && !arch.allow_rf_mismatch {
                eprintln!(
                    "error: final receptive field is {} pixels, required {}",
                    rf.final_rf, REQUIRED_RECEPTIVE_FIELD
                );
                return Ok(ExitCode::from(3));
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Train {
            arch_config,
            train_config,
            train_manifest,
            val_manifest,
            out_dir,
            overrides,
        } => {
            let arch = load_arch_config(arch_config.as_deref())?;
            let cfg = overrides.apply(load_train_config(train_config.as_deref())?)?;
            let mut train_ds = Dataset::open(train_manifest)?;
            let mut val_ds = Dataset::open(val_manifest)?;
            let outcome = trainer::train(&mut train_ds, &mut val_ds, &arch, &cfg, Some(out_dir))?;
            let summary = json!({
                "best_epoch": outcome.best_epoch,
                "best_val_accuracy": outcome.best_val_accuracy,
                "epochs_ran": outcome.history.len(),
                "checkpoint": out_dir.join("best"),
                "history": out_dir.join("history.jsonl"),
            });
            if cli.json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&summary).expect("serializable")
                );
            } else {
                println!(
                    "best epoch {} val_accuracy {:.4} ({} epochs ran); checkpoint at {}",
                    outcome.best_epoch,
                    outcome.best_val_accuracy,
                    outcome.history.len(),
                    out_dir.join("best").display()
                );
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Eval {
            checkpoint,
            manifest,
            mode,
            head,
            threshold,
            crop_size,
            batch_size,
            out_dir,
        } => {
            let model = checkpoint::load_checkpoint(checkpoint)?;
            let mode = PredictMode::parse(mode)?;
            let mut ds = Dataset::open(manifest)?;
            ds.preload()?;
            let metrics = trainer::evaluate(
                &model,
                &ds,
                mode,
                *head,
                *threshold,
                *crop_size,
                *batch_size,
            )?;
            std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
            trainer::write_metrics_json(&metrics, &out_dir.join("metrics.json"))?;
            trainer::write_pr_csv(&metrics.pr, &out_dir.join("pr.csv"))?;
            trainer::write_roc_csv(&metrics.roc, &out_dir.join("roc.csv"))?;
            if cli.json {
                println!(
                    "{}",
                    json!({"accuracy": metrics.accuracy, "auc": metrics.auc,
                           "n_samples": metrics.n_samples, "out_dir": out_dir})
                );
            } else {
                println!(
                    "accuracy {:.4}  auc {:.4}  ({} samples); wrote {}",
                    metrics.accuracy,
                    metrics.auc,
                    metrics.n_samples,
                    out_dir.display()
                );
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Infer {
            checkpoint,
            image,
            dir,
            mode,
            head,
            crop_size,
            heatmap_dir,
        } => {
            let model = checkpoint::load_checkpoint(checkpoint)?;
            let mode = PredictMode::parse(mode)?;
            let mut paths: Vec<PathBuf> = Vec::new();
            if let Some(p) = image {
                paths.push(p.clone());
            } else if let Some(d) = dir {
                let mut entries: Vec<PathBuf> = std::fs::read_dir(d)
                    .map_err(|e| Error::io(d, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "png"))
                    .collect();
                entries.sort();
                paths.extend(entries);
            } else {
                return Err(Error::config("infer needs --image or --dir"));
            }
            if let Some(hd) = heatmap_dir {
                std::fs::create_dir_all(hd).map_err(|e| Error::io(hd, e))?;
            }
            for path in &paths {
                let (prob, grid) = infer_one(
                    &model,
                    path,
                    mode,
                    *head,
                    *crop_size,
                    heatmap_dir.as_deref(),
                )?;
                if cli.json {
                    println!(
                        "{}",
                        json!({"image": path, "fake_probability": prob,
                               "grid": [grid.0, grid.1]})
                    );
                } else {
                    println!(
                        "{}\t{:.6}\tgrid {}x{}",
                        path.display(),
                        prob,
                        grid.0,
                        grid.1
                    );
                }
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Gradcheck { seed } => {
            let reports = run_gradcheck(*seed)?;
            let mut failed = false;
            for r in &reports {
                println!(
                    "{} {:<24} max_rel_err {:.3e} (tolerance {:.0e})",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_rel_err,
                    r.tolerance
                );
                failed |= !r.passed;
            }
            if failed {
                return Err(Error::Check("gradient check failed".into()));
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Ablate {
            lambdas,
            seeds,
            arch_config,
            train_config,
            train_manifest,
            val_manifest,
            test_manifest,
            out_dir,
            overrides,
        } => {
            let arch = load_arch_config(arch_config.as_deref())?;
            let cfg = overrides.apply(load_train_config(train_config.as_deref())?)?;
            let lambdas = parse_f64_list(lambdas)?;
            if lambdas.is_empty() {
                return Err(Error::config("--lambdas list is empty"));
            }
            let seed_list: Vec<u64> = (0..*seeds).map(|i| cfg.seed + i).collect();
            let mut train_ds = Dataset::open(train_manifest)?;
            let mut val_ds = Dataset::open(val_manifest)?;
            let mut test_ds = Dataset::open(test_manifest)?;
            let rows = trainer::ablate(
                &mut train_ds,
                &mut val_ds,
                &mut test_ds,
                &arch,
                &cfg,
                &lambdas,
                &seed_list,
                Some(out_dir),
            )?;
            if cli.json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&rows).expect("serializable")
                );
            } else {
                println!("lambda  seed  accuracy    auc       iou");
                for r in &rows {
                    println!(
                        "{:<7} {:<5} {:<11.4} {:<9.4} {:<9.4}",
                        r.lambda_seg, r.seed, r.accuracy, r.auc, r.iou
                    );
                }
                println!("wrote {}", out_dir.join("ablation.csv").display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn infer_one(
    model: &Model<f32>,
    path: &Path,
    mode: PredictMode,
    head: usize,
    crop_size: Option<usize>,
    heatmap_dir: Option<&Path>,
) -> Result<(f64, (usize, usize))> {
    use forgenet_core::tensor::Tensor;

    let image = dataio::load_image(path)?;
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let image = match crop_size {
        Some(s) => {
            if s > h || s > w {
                return Err(Error::dim(format!(
                    "crop {s} exceeds image {h}x{w} ({})",
                    path.display()
                )));
            }
            let (top, left) = ((h - s) / 2, (w - s) / 2);
            let mut data = vec![0.0f32; c * s * s];
            for ch in 0..c {
                for r in 0..s {
                    for col in 0..s {
                        data[ch * s * s + r * s + col] =
                            image.data()[ch * h * w + (top + r) * w + left + col];
                    }
                }
            }
            Tensor::from_vec(vec![c, s, s], data)?
        }
        None => image,
    };
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let batch = Tensor::from_vec(vec![1, c, h, w], image.data().to_vec())?;
    let output = model.forward_eval(&batch)?;
    let prob = trainer::batch_scores(&output, mode, head)?[0];

    if let Some(dir) = heatmap_dir {
        if let Some(seg) = output.seg_logits.get(head) {
            let (gh, gw) = output.grid;
            let g = gh * gw;
            let d = seg.data();
            let mut pixels = vec![0u8; g];
            for j in 0..g {
                let l0 = d[j];
                let l1 = d[g + j];
                let m = l0.max(l1);
                let p1 = ((l1 - m).exp() / ((l0 - m).exp() + (l1 - m).exp())) as f64;
                pixels[j] = (p1 * 255.0).round() as u8;
            }
            let img =
                image::GrayImage::from_raw(gw as u32, gh as u32, pixels).expect("sized from grid");
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let out = dir.join(format!("{stem}_heatmap.png"));
            img.save(&out).map_err(|e| Error::Image {
                path: out.clone(),
                message: e.to_string(),
            })?;
        }
    }
    Ok((prob, output.grid))
}
