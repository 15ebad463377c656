//! The operations behind each `saccade` subcommand. Every command writes a
//! [`RunManifest`] next to its results.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bench::{run_nms_bench, BenchReport};
use crate::data::{read_dataset, read_manifest, read_ppm, write_dataset, write_ppm, DatasetConfig, DatasetManifest, RgbImage};
use crate::decoder::{decode, outputs_from_targets, DecoderConfig, Detection, NmsMode};
use crate::encoder::encode_targets;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, BoxChoice, EvalReport};
use crate::gradcheck_suite::{run_suite, GradOp, OpSummary};
use crate::network::{self, KeypointMode, NetworkConfig};
use crate::trainer::{
    load_checkpoint, resume, save_checkpoint, Checkpoint, EpochEval, LogRecord, TrainConfig, TrainObserver,
};

pub const RUN_MANIFEST_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const EVAL_LOG_FILE: &str = "eval_log.jsonl";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub tool_version: String,
    pub dataset_checksum: Option<String>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(command: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            dataset_checksum: None,
            timings: BTreeMap::new(),
        })
    }

    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f();
        self.timings.insert(phase.to_string(), t.elapsed().as_secs_f64());
        out
    }

    fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(RUN_MANIFEST_FILE), self)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Byte offset of a 1-based line/column in `text`.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    start + column.saturating_sub(1)
}

/// Parses a JSON config; unknown or mistyped fields are reported with
/// their location, and missing fields take their documented defaults.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        offset: byte_offset(&text, e.line(), e.column()),
        reason: format!("{e}"),
    })
}

// ---------------------------------------------------------------------------

/// Generates a dataset into `out_dir`, refusing a non-empty directory
/// unless `force` is set.
pub fn gen_data(config: &DatasetConfig, out_dir: &Path, force: bool) -> Result<DatasetManifest> {
    config.validate()?;
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir)
            .map_err(|e| Error::io(out_dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::InvalidArgument(format!(
                "{} is not empty; pass --force to overwrite",
                out_dir.display()
            )));
        }
    }
    create_dir(out_dir)?;
    let mut run = RunManifest::new("gen-data", config)?;
    let manifest = run.time("generate", || write_dataset(config, out_dir))?;
    run.dataset_checksum = Some(manifest.checksum.clone());
    run.write(out_dir)?;
    Ok(manifest)
}

/// Training ablations mirroring the module-removal experiments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoAggregation,
    NoCornerAttn,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "no-aggregation" => Ok(Ablation::NoAggregation),
            "no-corner-attn" => Ok(Ablation::NoCornerAttn),
            other => Err(Error::InvalidArgument(format!(
                "unknown ablation `{other}` (expected no-aggregation | no-corner-attn)"
            ))),
        }
    }

    pub fn apply(self, net: &mut NetworkConfig) {
        match self {
            Ablation::NoAggregation => net.aggregation = false,
            Ablation::NoCornerAttn => net.corner_attn = false,
        }
    }
}

/// Parses `corners`, `diag:T` or `mid-edge:T`.
pub fn parse_keypoints(s: &str) -> Result<KeypointMode> {
    let bad = || Error::InvalidArgument(format!("bad keypoint mode `{s}` (corners | diag:T | mid-edge:T)"));
    let (kind, t) = match s.split_once(':') {
        Some((k, t)) => (k, Some(t.parse::<f64>().map_err(|_| bad())?)),
        None => (s, None),
    };
    match (kind, t) {
        ("corners", None) => Ok(KeypointMode::Corners),
        ("diag", Some(t)) => Ok(KeypointMode::DiagPts { t }),
        ("mid-edge", Some(t)) => Ok(KeypointMode::MidEdgePts { t }),
        _ => Err(bad()),
    }
}

/// Everything a training run is configured by.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Use only the first N training images.
    pub max_train_images: Option<usize>,
}

impl TrainRunConfig {
    /// Tuned schedule for the default synthetic dataset.
    pub fn desk() -> Self {
        Self {
            train: TrainConfig::desk_profile(),
            ..Self::default()
        }
    }

    /// Eight images, two epochs.
    pub fn smoke() -> Self {
        Self {
            train: TrainConfig {
                epochs: 2,
                lr_drop_epoch: 2,
                ..TrainConfig::desk_profile()
            },
            max_train_images: Some(8),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()
    }
}

struct FileObserver {
    log: BufWriter<File>,
    evals: BufWriter<File>,
    checkpoint: PathBuf,
    quiet: bool,
}

impl TrainObserver for FileObserver {
    fn on_step(&mut self, r: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.log, r)?;
        self.log.write_all(b"\n").map_err(|e| Error::io(TRAIN_LOG_FILE, e))
    }

    fn on_eval(&mut self, e: &EpochEval) -> Result<()> {
        if !self.quiet {
            eprintln!(
                "epoch {:>3}  AP@50 {:.4}  AP@70 {:.4}  AP@90 {:.4}",
                e.epoch,
                e.report.ap_at(0.5).unwrap_or(f64::NAN),
                e.report.ap_at(0.7).unwrap_or(f64::NAN),
                e.report.ap_at(0.9).unwrap_or(f64::NAN)
            );
        }
        serde_json::to_writer(&mut self.evals, e)?;
        self.evals.write_all(b"\n").map_err(|e| Error::io(EVAL_LOG_FILE, e))
    }

    fn on_epoch_end(&mut self, ck: &Checkpoint) -> Result<()> {
        self.log.flush().map_err(|e| Error::io(TRAIN_LOG_FILE, e))?;
        self.evals.flush().map_err(|e| Error::io(EVAL_LOG_FILE, e))?;
        if !self.quiet {
            let last = ck.loss_history.last().copied().unwrap_or(f64::NAN);
            eprintln!("epoch {:>3}/{}  last loss {last:.4}", ck.epoch, ck.train_config.epochs);
        }
        save_checkpoint(ck, &self.checkpoint)
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub final_eval: Option<EvalReport>,
}

/// Trains on `data_dir/train` (evaluating on `data_dir/val`), writing the
/// checkpoint, step log and evaluation log into `out_dir`. With
/// `resume_from`, continues that checkpoint under the run's training schedule,
/// so a larger `epochs` extends an earlier run.
pub fn train(
    data_dir: &Path,
    config: &TrainRunConfig,
    out_dir: &Path,
    resume_from: Option<&Path>,
    quiet: bool,
) -> Result<TrainSummary> {
    config.validate()?;
    let manifest = read_manifest(data_dir)?;
    let mut run = RunManifest::new("train", config)?;
    run.dataset_checksum = Some(manifest.checksum.clone());
    let (train_set, val_set) = run.time("load", || {
        let mut t = read_dataset(&data_dir.join("train"))?;
        if let Some(n) = config.max_train_images {
            t = t.select(&(0..n.min(t.len())).collect::<Vec<_>>());
        }
        let v = read_dataset(&data_dir.join("val"))?;
        Ok((t, v))
    })?;
    create_dir(out_dir)?;
    let start = match resume_from {
        Some(p) => {
            let mut ck = load_checkpoint(p)?;
            if ck.net_config != config.network {
                return Err(Error::Config {
                    field: "network".into(),
                    reason: "checkpoint network config differs from the run config".into(),
                });
            }
            ck.train_config = config.train.clone();
            ck
        }
        None => Checkpoint::fresh(&config.network, &config.train)?,
    };
    let append = resume_from.is_some();
    let open = |name: &str| -> Result<BufWriter<File>> {
        let path = out_dir.join(name);
        let f = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(BufWriter::new(f))
    };
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    let mut observer = FileObserver {
        log: open(TRAIN_LOG_FILE)?,
        evals: open(EVAL_LOG_FILE)?,
        checkpoint: checkpoint_path.clone(),
        quiet,
    };
    let epochs = config.train.epochs;
    let outcome = run.time("train", || resume(start, &train_set, Some(&val_set), epochs, &mut observer))?;
    save_checkpoint(&outcome.checkpoint, &checkpoint_path)?;
    run.write(out_dir)?;
    Ok(TrainSummary {
        final_eval: outcome.evals.last().map(|e| e.report.clone()),
        checkpoint: outcome.checkpoint,
        checkpoint_path,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalOptions {
    pub decoder: DecoderConfig,
    pub box_choice: BoxChoice,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            decoder: DecoderConfig::default(),
            box_choice: BoxChoice::Refined,
        }
    }
}

/// Evaluates a checkpoint on a split directory, or (with `checkpoint =
/// None`) decodes the split's own encoded ground truth as a perfect oracle.
/// Writes the report to `report_path` and validates it by reading it back.
pub fn eval(
    checkpoint: Option<&Path>,
    split_dir: &Path,
    options: &EvalOptions,
    report_path: &Path,
    oracle_net: &NetworkConfig,
) -> Result<EvalReport> {
    options.decoder.validate()?;
    let mut run = RunManifest::new("eval", options)?;
    let data = run.time("load", || read_dataset(split_dir))?;
    let report = run.time("evaluate", || {
        let dets: Vec<Vec<Detection>> = match checkpoint {
            Some(path) => {
                let ck = load_checkpoint(path)?;
                let net = &ck.net_config;
                for img in &data.images {
                    if img.width != net.input_width || img.height != net.input_height {
                        return Err(Error::Config {
                            field: "network.input_width".into(),
                            reason: format!(
                                "checkpoint expects {}x{} images, dataset has {}x{}",
                                net.input_width, net.input_height, img.width, img.height
                            ),
                        });
                    }
                }
                data.images
                    .iter()
                    .map(|img| {
                        let out = network::infer(&img.to_tensor(), &ck.params, net)?;
                        decode(&out, Some(&ck.params), &options.decoder, net)
                    })
                    .collect::<Result<_>>()?
            }
            None => data
                .labels
                .iter()
                .map(|boxes| {
                    let t = encode_targets(boxes, oracle_net)?;
                    decode(&outputs_from_targets(&t), None, &options.decoder, oracle_net)
                })
                .collect::<Result<_>>()?,
        };
        Ok(evaluate(&dets, &data.labels, options.box_choice))
    })?;
    if let Some(parent) = report_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
        run.write(parent)?;
    }
    write_json(report_path, &report)?;
    let back: EvalReport = load_json(report_path)?;
    if back != report {
        return Err(Error::Dataset {
            path: report_path.to_path_buf(),
            reason: "report failed read-back validation".into(),
        });
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InferRecord {
    pub image: String,
    #[serde(flatten)]
    pub detection: Detection,
}

#[derive(Clone, Debug, Default)]
pub struct InferSummary {
    pub detections: usize,
    /// Per-file failures; the remaining files are still processed.
    pub failures: Vec<(PathBuf, String)>,
}

const COARSE_COLOR: [u8; 3] = [255, 220, 0];
const REFINED_COLOR: [u8; 3] = [0, 230, 255];

/// Runs detection over image files, writing JSON-lines detections and
/// optionally annotated copies (coarse boxes yellow, refined boxes cyan).
pub fn infer(
    checkpoint: &Path,
    images: &[PathBuf],
    decoder: &DecoderConfig,
    out_file: &Path,
    draw_dir: Option<&Path>,
) -> Result<InferSummary> {
    decoder.validate()?;
    let mut run = RunManifest::new("infer", decoder)?;
    let ck = run.time("load", || load_checkpoint(checkpoint))?;
    let net = &ck.net_config;
    if let Some(d) = draw_dir {
        create_dir(d)?;
    }
    let mut out = BufWriter::new(File::create(out_file).map_err(|e| Error::io(out_file, e))?);
    let mut summary = InferSummary::default();
    let detect = |path: &Path| -> Result<(RgbImage, Vec<Detection>)> {
        let img = read_ppm(path)?;
        if img.width != net.input_width || img.height != net.input_height {
            return Err(Error::InvalidArgument(format!(
                "image is {}x{}, model expects {}x{}",
                img.width, img.height, net.input_width, net.input_height
            )));
        }
        let outputs = network::infer(&img.to_tensor(), &ck.params, net)?;
        Ok((img, decode(&outputs, Some(&ck.params), decoder, net)?))
    };
    run.time("detect", || {
        for path in images {
            match detect(path) {
                Ok((mut img, dets)) => {
                    let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
                    for d in &dets {
                        let rec = InferRecord {
                            image: name.clone(),
                            detection: d.clone(),
                        };
                        serde_json::to_writer(&mut out, &rec)?;
                        out.write_all(b"\n").map_err(|e| Error::io(out_file, e))?;
                    }
                    summary.detections += dets.len();
                    if let Some(dir) = draw_dir {
                        for d in &dets {
                            img.draw_rect(d.coarse_box, COARSE_COLOR);
                            if let Some(r) = d.refined_box {
                                img.draw_rect(r, REFINED_COLOR);
                            }
                        }
                        write_ppm(&dir.join(&name), &img)?;
                    }
                }
                Err(e) => summary.failures.push((path.clone(), e.to_string())),
            }
        }
        Ok(())
    })?;
    out.flush().map_err(|e| Error::io(out_file, e))?;
    if let Some(parent) = out_file.parent().filter(|p| !p.as_os_str().is_empty()) {
        run.write(parent)?;
    }
    Ok(summary)
}

pub fn bench_nms(sizes: &[usize], densities: &[usize], repeats: usize, seed: u64, out_dir: Option<&Path>) -> Result<BenchReport> {
    #[derive(Serialize)]
    struct BenchArgs<'a> {
        sizes: &'a [usize],
        densities: &'a [usize],
        repeats: usize,
        seed: u64,
    }
    let mut run = RunManifest::new(
        "bench-nms",
        &BenchArgs {
            sizes,
            densities,
            repeats,
            seed,
        },
    )?;
    let report = run.time("bench", || run_nms_bench(sizes, densities, repeats, seed))?;
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        write_json(&dir.join("bench_nms.json"), &report)?;
        run.write(dir)?;
    }
    Ok(report)
}

pub fn gradcheck(ops: &[GradOp], seed: u64, seeds: usize, out_dir: Option<&Path>) -> Result<Vec<OpSummary>> {
    #[derive(Serialize)]
    struct Args<'a> {
        ops: &'a [GradOp],
        seed: u64,
        seeds: usize,
    }
    let mut run = RunManifest::new("gradcheck", &Args { ops, seed, seeds })?;
    let summaries = run.time("check", || run_suite(ops, seed, seeds))?;
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        write_json(&dir.join("gradcheck.json"), &summaries)?;
        run.write(dir)?;
    }
    Ok(summaries)
}

/// Decoder settings from the common inference flags.
pub fn decoder_from_flags(nms: &str, iou_threshold: f64, top_k: usize, no_refine: bool, refine_iterations: usize) -> Result<DecoderConfig> {
    let nms_mode = match nms {
        "pp" => NmsMode::PeakPicking,
        "iou" => NmsMode::Iou {
            threshold: iou_threshold,
        },
        other => return Err(Error::InvalidArgument(format!("unknown NMS mode `{other}` (pp | iou)"))),
    };
    let cfg = DecoderConfig {
        top_k,
        nms_mode,
        use_refinement: !no_refine,
        refine_iterations,
        ..DecoderConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}
