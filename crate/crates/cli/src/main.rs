//! `deformdet` command-line tool.
//!
//! Exit codes: 0 success, 1 gradient check failure, 2 usage or invalid
//! config/input, 3 I/O error, 4 numeric divergence during training.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deformdet::deform::inject_offset_grad_sign_bug;
use deformdet::detect::{read_detections, write_detections};
use deformdet::eval::{evaluate, group_detections, EvalConfig};
use deformdet::gradcheck::{run_suite, REL_TOL};
use deformdet::synth::{generate_dataset, Dataset, GenSpec, RgbImage, Split};
use deformdet::train::{
    ablation_csv, ablation_run, evaluate_model, load_checkpoint, parse_variants, resume_training,
    train, TrainConfig,
};
use deformdet::Error;

#[derive(Parser, Debug)]
#[command(name = "deformdet", version, about = "Synthetic defect detection: data, training, evaluation")]
#[command(after_help = "Exit codes: 0 ok, 1 gradcheck failure, 2 usage/config error, 3 I/O error, 4 divergence")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset (images, labels, manifest).
    GenData {
        /// Generation spec, `key = value` lines.
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of images.
        #[arg(long)]
        count: usize,
    },
    /// Train a detector; outputs go to the `out` directory named in the config.
    Train {
        /// Training config, `key = value` lines.
        #[arg(long)]
        config: PathBuf,
        /// Continue from `out/checkpoint` up to `steps`.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint or a detections file against a dataset split.
    Eval {
        /// Checkpoint directory to run on the images.
        #[arg(long, conflicts_with = "detections", required_unless_present = "detections")]
        checkpoint: Option<PathBuf>,
        /// Precomputed detections, `image_id class_id score cx cy w h` lines.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Report directory (report.txt, pr.csv, pr.svg).
        #[arg(long)]
        out: PathBuf,
        /// Split to score: train, val, test or all.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0.05)]
        score_thresh: f64,
        #[arg(long, default_value_t = 0.5)]
        nms_iou: f64,
        /// Last IoU threshold of the sweep, 0.95 or 0.90.
        #[arg(long, default_value_t = 0.95)]
        iou_upper: f64,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Detect defects in one PPM image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Detections file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        score_thresh: f64,
        #[arg(long, default_value_t = 0.5)]
        nms_iou: f64,
    },
    /// Compare every backward pass with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_offset_grad_bug: bool,
    },
    /// Train and evaluate each variant in a variants file; writes one CSV row per variant.
    Ablate {
        /// Base training config.
        #[arg(long)]
        config: PathBuf,
        /// Variants file, `name dc_stages neck` lines (`-` for no DC stages).
        #[arg(long)]
        variants: PathBuf,
        /// CSV output path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Divergence { .. } => 4,
        _ => 2,
    }
}

fn parse_split(s: &str) -> Result<Option<Split>, Error> {
    if s == "all" {
        return Ok(None);
    }
    Split::parse(s)
        .map(Some)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{s}` (train, val, test, all)")))
}

fn write_file(path: &Path, body: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, body).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cmd: Command) -> Result<u8, Error> {
    match cmd {
        Command::GenData { spec, out, count } => {
            let spec = GenSpec::read(&spec)?;
            let summary = generate_dataset(&spec, count, &out)?;
            print!("{}", summary.to_text());
        }
        Command::Train { config, resume } => {
            let cfg = TrainConfig::read(&config)?;
            let outcome = if resume { resume_training(&cfg)? } else { train(&cfg)? };
            if let Some(last) = outcome.losses.last() {
                println!(
                    "step {} loss {:.6} (cls {:.6}, box {:.6})",
                    cfg.steps, last.total, last.cls, last.boxes
                );
            }
            for (step, m50, m5095) in &outcome.evals {
                println!("eval step {step}: mAP@50 {m50:.4} mAP@50:95 {m5095:.4}");
            }
            println!("checkpoint {}", cfg.out.join("checkpoint").display());
        }
        Command::Eval {
            checkpoint,
            detections,
            data,
            out,
            split,
            score_thresh,
            nms_iou,
            iou_upper,
            threads,
        } => {
            let split = parse_split(&split)?;
            let eval_cfg = match iou_upper {
                u if (u - 0.95).abs() < 1e-9 => EvalConfig::default(),
                u if (u - 0.90).abs() < 1e-9 => EvalConfig::upper_090(),
                u => return Err(Error::InvalidArgument(format!("--iou-upper must be 0.95 or 0.90, got {u}"))),
            };
            let ds = Dataset::open(&data)?;
            let report = match (checkpoint, detections) {
                (Some(dir), _) => {
                    let model = load_checkpoint(&dir)?;
                    let samples = ds.load_split(split, model.config.num_classes)?;
                    evaluate_model(&model, &samples, score_thresh, nms_iou, &eval_cfg, threads)?
                }
                (None, Some(file)) => {
                    let nc = deformdet::synth::NUM_CLASSES;
                    let samples = ds.load_split(split, nc)?;
                    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
                    let all = read_detections(&file)?;
                    // detections for images outside the split are ignored
                    let kept: Vec<_> = all.into_iter().filter(|(id, _)| ids.contains(id)).collect();
                    let dets = group_detections(&ids, &kept)?;
                    let gts: Vec<_> = samples.into_iter().map(|s| s.boxes).collect();
                    evaluate(&dets, &gts, nc, &eval_cfg)?
                }
                (None, None) => unreachable!("clap requires one of --checkpoint/--detections"),
            };
            report.write(&out)?;
            print!("{}", report.to_table());
        }
        Command::Infer {
            checkpoint,
            image,
            out,
            score_thresh,
            nms_iou,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let img = RgbImage::read(&image)?;
            let id = image
                .file_stem()
                .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned());
            let dets = model.detect(&img.to_tensor(), score_thresh, nms_iou)?.remove(0);
            let tagged: Vec<_> = dets.into_iter().map(|d| (id.clone(), d)).collect();
            write_detections(&out, &tagged)?;
            println!("{} detections -> {}", tagged.len(), out.display());
        }
        Command::Gradcheck {
            seed,
            inject_offset_grad_bug,
        } => {
            inject_offset_grad_sign_bug(inject_offset_grad_bug);
            let report = run_suite(seed)?;
            print!("{}", report.to_text());
            if !report.passed() {
                eprintln!(
                    "gradcheck failed (tolerance {REL_TOL:e}): {}",
                    report.failing_ops().join(", ")
                );
                return Ok(1);
            }
            println!("all gradients within {REL_TOL:e}");
        }
        Command::Ablate { config, variants, out } => {
            let cfg = TrainConfig::read(&config)?;
            let text = fs::read_to_string(&variants).map_err(|e| Error::Io {
                path: variants.clone(),
                source: e,
            })?;
            let variants = parse_variants(&text, &variants.display().to_string())?;
            let ds = Dataset::open(&cfg.data)?;
            let nc = cfg.model.num_classes;
            let train_set = ds.load_split(cfg.train_split, nc)?;
            let mut eval_set = ds.load_split(cfg.val_split, nc)?;
            if eval_set.is_empty() {
                eval_set = train_set.clone();
            }
            let rows = ablation_run(&cfg, &variants, &train_set, &eval_set)?;
            let csv = ablation_csv(&rows);
            write_file(&out, &csv)?;
            print!("{csv}");
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
