use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use saccade::commands::{self, Ablation, EvalOptions, TrainRunConfig};
use saccade::data::DatasetConfig;
use saccade::evaluator::BoxChoice;
use saccade::gradcheck_suite::GradOp;
use saccade::network::NetworkConfig;
use saccade::Result;

// Like println!, but a closed stdout (e.g. piped into `head`) is not fatal.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "saccade", version, about = "Keypoint-refined center-based object detection on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset (train/, val/, manifest.json).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a detector on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON run config {network, train, max_train_images}.
        #[arg(long)]
        config: Option<PathBuf>,
        /// default | desk | smoke; ignored when --config is given.
        #[arg(long, default_value = "desk")]
        profile: String,
        /// no-aggregation | no-corner-attn (repeatable)
        #[arg(long)]
        ablate: Vec<String>,
        /// corners | diag:T | mid-edge:T
        #[arg(long)]
        keypoints: Option<String>,
        #[arg(long)]
        refine_iterations: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint (or the ground-truth oracle) on a split directory.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Decode the split's encoded ground truth instead of a model.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "eval_report.json")]
        report: PathBuf,
        #[arg(long, default_value = "pp")]
        nms: String,
        #[arg(long, default_value_t = 0.5)]
        iou_threshold: f64,
        #[arg(long, default_value_t = 100)]
        top_k: usize,
        #[arg(long)]
        no_refine: bool,
        #[arg(long, default_value_t = 1)]
        refine_iterations: usize,
        /// Score coarse boxes even when refined ones exist.
        #[arg(long)]
        coarse: bool,
    },
    /// Detect objects in PPM images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long, default_value = "detections.jsonl")]
        out: PathBuf,
        #[arg(long, default_value = "pp")]
        nms: String,
        #[arg(long, default_value_t = 0.5)]
        iou_threshold: f64,
        #[arg(long, default_value_t = 100)]
        top_k: usize,
        #[arg(long)]
        no_refine: bool,
        #[arg(long, default_value_t = 1)]
        refine_iterations: usize,
        /// Directory for annotated copies.
        #[arg(long)]
        draw: Option<PathBuf>,
    },
    /// Time peak-picking against IoU NMS.
    BenchNms {
        #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "5,20,50")]
        densities: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long)]
        op: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { config, out, force } => {
            let cfg = match config {
                Some(p) => commands::load_json::<DatasetConfig>(&p)?,
                None => DatasetConfig::default(),
            };
            let m = commands::gen_data(&cfg, &out, force)?;
            for s in &m.splits {
                say!("{:?}: {} images, {} boxes", s.split, s.num_images, s.num_boxes);
            }
            say!("checksum {}", m.checksum);
        }
        Command::Train {
            data,
            out,
            config,
            profile,
            ablate,
            keypoints,
            refine_iterations,
            epochs,
            seed,
            resume,
            quiet,
        } => {
            let mut cfg = match config {
                Some(p) => commands::load_json::<TrainRunConfig>(&p)?,
                None => match profile.as_str() {
                    "default" => TrainRunConfig::default(),
                    "desk" => TrainRunConfig::desk(),
                    "smoke" => TrainRunConfig::smoke(),
                    other => {
                        return Err(saccade::Error::InvalidArgument(format!(
                            "unknown profile `{other}` (default | desk | smoke)"
                        )))
                    }
                },
            };
            for a in &ablate {
                Ablation::parse(a)?.apply(&mut cfg.network);
            }
            if let Some(k) = keypoints {
                cfg.network.keypoints = commands::parse_keypoints(&k)?;
            }
            if let Some(n) = refine_iterations {
                cfg.network.refine_iterations = n;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
                cfg.network.init_seed = s;
            }
            let summary = commands::train(&data, &cfg, &out, resume.as_deref(), quiet)?;
            if let Some(r) = &summary.final_eval {
                say!("{}", r.table());
            }
            say!("checkpoint {}", summary.checkpoint_path.display());
        }
        Command::Eval {
            checkpoint,
            oracle,
            data,
            report,
            nms,
            iou_threshold,
            top_k,
            no_refine,
            refine_iterations,
            coarse,
        } => {
            let options = EvalOptions {
                decoder: commands::decoder_from_flags(&nms, iou_threshold, top_k, no_refine, refine_iterations)?,
                box_choice: if coarse { BoxChoice::Coarse } else { BoxChoice::Refined },
            };
            let ck = if oracle { None } else { checkpoint.as_deref() };
            let r = commands::eval(ck, &data, &options, &report, &NetworkConfig::default())?;
            say!("{}", r.table());
        }
        Command::Infer {
            checkpoint,
            images,
            out,
            nms,
            iou_threshold,
            top_k,
            no_refine,
            refine_iterations,
            draw,
        } => {
            let decoder = commands::decoder_from_flags(&nms, iou_threshold, top_k, no_refine, refine_iterations)?;
            let s = commands::infer(&checkpoint, &images, &decoder, &out, draw.as_deref())?;
            for (path, err) in &s.failures {
                eprintln!("{}: {err}", path.display());
            }
            say!("{} detections written to {}", s.detections, out.display());
            if !s.failures.is_empty() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::BenchNms {
            sizes,
            densities,
            repeats,
            seed,
            out,
        } => {
            let r = commands::bench_nms(&sizes, &densities, repeats, seed, out.as_deref())?;
            say!("{}", r.table());
        }
        Command::Gradcheck { op, seed, seeds, out } => {
            let ops = if op.is_empty() {
                GradOp::SUITE.to_vec()
            } else {
                op.iter().map(|s| GradOp::parse(s)).collect::<Result<Vec<_>>>()?
            };
            let summaries = commands::gradcheck(&ops, seed, seeds, out.as_deref())?;
            let mut ok = true;
            for s in &summaries {
                say!("{s}");
                ok &= s.passed;
            }
            if !ok {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("SACCADE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
