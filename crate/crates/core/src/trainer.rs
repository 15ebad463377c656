//! Adam training loop, learning-rate schedule, and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{augment, AugmentConfig, Dataset};
use crate::decoder::{decode, DecoderConfig};
use crate::encoder::{encode_targets, GroundTruthTarget};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, BoxChoice, EvalReport};
use crate::losses::{total_loss, FocalParams, LossBreakdown, LossWeights, RefineResiduals};
use crate::network::{self, forward, refine_step, BoundParams, Mode, ModelParams, NetworkConfig, OutputVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Zero-based epoch from which `lr * lr_drop_factor` applies.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    /// Evaluate on the validation split every this many epochs (0 = never).
    pub eval_every: usize,
    /// Global gradient-norm clip; off unless set.
    pub max_grad_norm: Option<f64>,
    pub augment: AugmentConfig,
    pub loss_weights: LossWeights,
    pub focal: FocalParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.25e-4,
            lr_drop_epoch: 50,
            lr_drop_factor: 0.1,
            epochs: 60,
            batch_size: 8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            eval_every: 0,
            max_grad_norm: None,
            augment: AugmentConfig::default(),
            loss_weights: LossWeights::default(),
            focal: FocalParams::default(),
        }
    }
}

impl TrainConfig {
    /// Schedule tuned for the 64x64 synthetic-shapes set on one CPU core:
    /// a larger step size and half the epochs of the default schedule.
    pub fn desk_profile() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 30,
            lr_drop_epoch: 25,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(Error::Config {
                field: field.to_string(),
                reason,
            })
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("{} must be positive", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.lr_drop_epoch > self.epochs {
            return bad(
                "lr_drop_epoch",
                format!("{} exceeds epochs {}", self.lr_drop_epoch, self.epochs),
            );
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta1", "Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon", "must be positive".into());
        }
        let (lo, hi) = self.augment.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad("augment.scale_range", format!("({lo}, {hi}) must be positive and ordered"));
        }
        if !(0.0..=1.0).contains(&self.augment.hflip_prob) {
            return bad("augment.hflip_prob", format!("{} not in [0, 1]", self.augment.hflip_prob));
        }
        self.loss_weights.validate()
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.learning_rate * self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }
}

/// Adam moments per parameter plus the shared step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = |_| -> BTreeMap<String, Tensor> {
            params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect()
        };
        Self {
            step: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }
}

/// One bias-corrected Adam update. Every parameter must have a gradient.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    for (name, p) in params.iter() {
        match grads.get(name) {
            None => return Err(Error::MissingGradient(name.clone())),
            Some(g) if g.shape() != p.shape() => {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient of `{name}` has shape {:?}, parameter {:?}", g.shape(), p.shape()),
                ))
            }
            _ => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()))
            .data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
        }
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()))
            .data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
        }
        let (m, v) = (state.m[name].data(), state.v[name].data());
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *pi -= lr * m_hat / (v_hat.sqrt() + hyper.epsilon);
        }
    }
    Ok(())
}

/// Teacher-forced refinement for training: keypoints are placed around the
/// ground-truth centers using the detached predicted size (or `start_wh`
/// when given), and each iteration regresses `gt_wh - current_wh`.
pub fn refinement_residuals(
    g: &mut Graph,
    outputs: &OutputVars,
    params: &BoundParams,
    target: &GroundTruthTarget,
    config: &NetworkConfig,
    start_wh: Option<&[(f64, f64)]>,
) -> Result<RefineResiduals> {
    let mut res = RefineResiduals::default();
    if !config.aggregation || target.objects.is_empty() {
        return Ok(res);
    }
    let centers: Vec<(f64, f64)> = target.objects.iter().map(|o| o.center).collect();
    let mut wh: Vec<(f64, f64)> = match start_wh {
        Some(s) => s.to_vec(),
        None => detached_wh_at_objects(g, outputs, target),
    };
    let n = centers.len();
    for _ in 0..config.refine_iterations {
        let Some(pred) = refine_step(g, outputs.backbone_features, params, &centers, &wh, config.keypoints)? else {
            break;
        };
        let mut tgt = Tensor::zeros(&[2, 1, n]);
        for (i, o) in target.objects.iter().enumerate() {
            tgt.data_mut()[i] = o.wh.0 - wh[i].0;
            tgt.data_mut()[n + i] = o.wh.1 - wh[i].1;
        }
        let vals = g.value(pred).data().to_vec();
        for (i, w) in wh.iter_mut().enumerate() {
            w.0 += vals[i];
            w.1 += vals[n + i];
        }
        res.predictions.push(pred);
        res.targets.push(tgt);
    }
    Ok(res)
}

/// Predicted `(w, h)` read at each object's center cell, outside the graph.
pub fn detached_wh_at_objects(g: &Graph, outputs: &OutputVars, target: &GroundTruthTarget) -> Vec<(f64, f64)> {
    let wh = g.value(outputs.wh_map);
    target
        .objects
        .iter()
        .map(|o| (wh.at3(0, o.cell.1, o.cell.0), wh.at3(1, o.cell.1, o.cell.0)))
        .collect()
}

/// Loss and per-parameter gradients (sorted by name) for one sample.
pub fn sample_gradients(
    params: &ModelParams,
    image: &Tensor,
    target: &GroundTruthTarget,
    net: &NetworkConfig,
    weights: &LossWeights,
    focal: &FocalParams,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let img = g.constant(image.clone());
    let out = forward(&mut g, img, &p, net, Mode::Train)?;
    let refine = refinement_residuals(&mut g, &out, &p, target, net, None)?;
    let (loss, breakdown) = total_loss(&mut g, &out, &refine, target, weights, focal)?;
    g.backward(loss)?;
    let grads = p
        .iter()
        .map(|(name, v)| {
            let t = g
                .grad(*v)
                .unwrap_or_else(|| Tensor::zeros(g.value(*v).shape()));
            (name.clone(), t)
        })
        .collect();
    Ok((breakdown, grads))
}

/// One training-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub train_config: TrainConfig,
    pub net_config: NetworkConfig,
    /// Total loss of every step so far.
    pub loss_history: Vec<f64>,
}

impl Checkpoint {
    pub fn fresh(net: &NetworkConfig, train: &TrainConfig) -> Result<Self> {
        let params = ModelParams::init(net)?;
        Ok(Self {
            adam: AdamState::new(&params),
            params,
            epoch: 0,
            train_config: train.clone(),
            net_config: net.clone(),
            loss_history: Vec::new(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    pub evals: Vec<EpochEval>,
    /// Center-cell collisions seen while encoding targets.
    pub encoder_collisions: usize,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Deterministic sample order of an epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, (epoch as u64) << 32 | 0xffff_ffff));
    order
}

/// Augmented image and its encoded targets for one draw.
pub fn prepare_sample(
    data: &Dataset,
    index: usize,
    epoch: usize,
    net: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<(Tensor, GroundTruthTarget)> {
    let image = data.images[index].to_tensor();
    let mut rng = rng_for(cfg.seed, (epoch as u64) << 32 | index as u64);
    let (img, boxes) = augment(&image, &data.labels[index], &cfg.augment, &mut rng);
    let target = encode_targets(&boxes, net)?;
    Ok((img, target))
}

/// Runs inference, decoding and evaluation over a dataset.
pub fn evaluate_dataset(
    params: &ModelParams,
    net: &NetworkConfig,
    data: &Dataset,
    decoder: &DecoderConfig,
    choice: BoxChoice,
) -> Result<EvalReport> {
    let dets = data
        .images
        .par_iter()
        .map(|img| {
            let out = network::infer(&img.to_tensor(), params, net)?;
            decode(&out, Some(params), decoder, net)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate(&dets, &data.labels, choice))
}

/// Optional observer called after each step and each evaluation.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &LogRecord) -> Result<()> {
        Ok(())
    }
    fn on_eval(&mut self, _eval: &EpochEval) -> Result<()> {
        Ok(())
    }
    fn on_epoch_end(&mut self, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

pub fn train(
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    net: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let start = Checkpoint::fresh(net, cfg)?;
    resume(start, train_set, val_set, cfg.epochs, &mut ())
}

/// Continues `checkpoint` until `until_epoch` epochs are complete.
pub fn resume(
    checkpoint: Checkpoint,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    until_epoch: usize,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let mut ck = checkpoint;
    let net = ck.net_config.clone();
    let cfg = ck.train_config.clone();
    net.validate()?;
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let hyper = AdamHyper {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        epsilon: cfg.adam_epsilon,
    };
    let mut log = Vec::new();
    let mut evals = Vec::new();
    let mut collisions = 0;

    for epoch in ck.epoch..until_epoch {
        let lr = cfg.lr_at_epoch(epoch);
        let order = epoch_order(cfg.seed, epoch, train_set.len());
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let (img, target) = prepare_sample(train_set, i, epoch, &net, &cfg)?;
                    let (b, g) = sample_gradients(&ck.params, &img, &target, &net, &cfg.loss_weights, &cfg.focal)?;
                    Ok((b, g, target.collisions))
                })
                .collect::<Result<Vec<_>>>()?;

            let scale = 1.0 / batch.len() as f64;
            let mut mean = LossBreakdown::default();
            let mut grads: BTreeMap<String, Tensor> = ck
                .params
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect();
            for (b, g, c) in &results {
                mean.add_scaled(b, scale);
                collisions += c;
                for (name, acc) in grads.iter_mut() {
                    for (a, x) in acc.data_mut().iter_mut().zip(g[name].data()) {
                        *a += scale * x;
                    }
                }
            }
            let step = ck.adam.step + 1;
            for (term, value) in mean.terms() {
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step: step as usize,
                        term,
                        value,
                    });
                }
            }
            if let Some(max_norm) = cfg.max_grad_norm {
                let norm = grads
                    .values()
                    .flat_map(|t| t.data().iter())
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                if norm > max_norm {
                    let s = max_norm / norm;
                    for t in grads.values_mut() {
                        t.data_mut().iter_mut().for_each(|x| *x *= s);
                    }
                }
            }
            adam_step(&mut ck.params, &grads, &mut ck.adam, lr, &hyper)?;
            if !ck.params.all_finite() {
                return Err(Error::NonFiniteLoss {
                    step: step as usize,
                    term: "parameters",
                    value: f64::NAN,
                });
            }
            ck.loss_history.push(mean.total);
            let record = LogRecord {
                step,
                epoch,
                lr,
                losses: mean,
            };
            observer.on_step(&record)?;
            log.push(record);
        }
        ck.epoch = epoch + 1;

        if let Some(val) = val_set {
            if cfg.eval_every > 0 && ck.epoch.is_multiple_of(cfg.eval_every) && !val.is_empty() {
                let report = evaluate_dataset(
                    &ck.params,
                    &net,
                    val,
                    &DecoderConfig {
                        refine_iterations: net.refine_iterations,
                        ..DecoderConfig::default()
                    },
                    BoxChoice::Refined,
                )?;
                let e = EpochEval {
                    epoch: ck.epoch,
                    report,
                };
                observer.on_eval(&e)?;
                evals.push(e);
            }
        }
        observer.on_epoch_end(&ck)?;
    }
    Ok(TrainOutcome {
        checkpoint: ck,
        log,
        evals,
        encoder_collisions: collisions,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint file: 8-byte magic, u64 LE header length, JSON header, then a
// little-endian f64 payload addressed by the header's byte offsets.

const CKPT_MAGIC: &[u8; 8] = b"SACCKPT\n";
const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    epoch: usize,
    adam_step: u64,
    train_config: TrainConfig,
    net_config: NetworkConfig,
    tensors: Vec<TensorEntry>,
    payload_bytes: usize,
    payload_sha256: String,
}

pub fn checkpoint_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut payload: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    let mut push = |group: &str, name: &str, shape: &[usize], data: &[f64], entries: &mut Vec<TensorEntry>| {
        entries.push(TensorEntry {
            name: name.to_string(),
            group: group.to_string(),
            shape: shape.to_vec(),
            offset: payload.len(),
            len: data.len(),
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, t) in ck.params.iter() {
        push("param", name, t.shape(), t.data(), &mut entries);
    }
    for (name, t) in &ck.adam.m {
        push("adam_m", name, t.shape(), t.data(), &mut entries);
    }
    for (name, t) in &ck.adam.v {
        push("adam_v", name, t.shape(), t.data(), &mut entries);
    }
    push(
        "loss_history",
        "loss_history",
        &[ck.loss_history.len()],
        &ck.loss_history,
        &mut entries,
    );
    let header = CheckpointHeader {
        version: CKPT_VERSION,
        epoch: ck.epoch,
        adam_step: ck.adam.step,
        train_config: ck.train_config.clone(),
        net_config: ck.net_config.clone(),
        tensors: entries,
        payload_bytes: payload.len(),
        payload_sha256: crate::data::sha256_hex(&payload),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(ck)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let fail = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
        return Err(fail("not a checkpoint file (bad magic)".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fail("header length exceeds file size".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| fail(format!("bad header: {e}")))?;
    if header.version != CKPT_VERSION {
        return Err(fail(format!(
            "version {} unsupported (expected {CKPT_VERSION})",
            header.version
        )));
    }
    let payload = &bytes[header_end..];
    if payload.len() != header.payload_bytes {
        return Err(fail(format!(
            "payload is {} bytes, header says {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    if crate::data::sha256_hex(payload) != header.payload_sha256 {
        return Err(fail("payload checksum mismatch".into()));
    }
    let mut params = ModelParams::new();
    let mut adam = AdamState {
        step: header.adam_step,
        ..Default::default()
    };
    let mut loss_history = Vec::new();
    for e in &header.tensors {
        let end = e.offset + e.len * 8;
        if end > payload.len() || e.shape.iter().product::<usize>() != e.len {
            return Err(fail(format!("tensor `{}` ({}) is out of bounds", e.name, e.group)));
        }
        let data: Vec<f64> = payload[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        match e.group.as_str() {
            "loss_history" => loss_history = data,
            group => {
                let t = Tensor::new(e.shape.clone(), data)?;
                match group {
                    "param" => params.insert(e.name.clone(), t),
                    "adam_m" => {
                        adam.m.insert(e.name.clone(), t);
                    }
                    "adam_v" => {
                        adam.v.insert(e.name.clone(), t);
                    }
                    other => return Err(fail(format!("unknown tensor group `{other}`"))),
                }
            }
        }
    }
    for (name, p) in params.iter() {
        for (kind, moments) in [("first", &adam.m), ("second", &adam.v)] {
            if moments.get(name).map(Tensor::shape) != Some(p.shape()) {
                return Err(fail(format!("{kind} moment of `{name}` missing or misshapen")));
            }
        }
    }
    Ok(Checkpoint {
        params,
        adam,
        epoch: header.epoch,
        train_config: header.train_config,
        net_config: header.net_config,
        loss_history,
    })
}
