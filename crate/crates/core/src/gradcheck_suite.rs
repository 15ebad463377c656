//! Finite-difference verification of every differentiable operation and of
//! the composed training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::{check_gradients, weighted_sum, GradCheckReport};
use crate::autodiff::{Graph, Tensor, Var};
use crate::encoder::{encode_targets, GtBox};
use crate::error::{Error, Result};
use crate::losses::{focal_loss_node, masked_l1_node, total_loss, FocalParams, LossWeights};
use crate::network::{forward, KeypointMode, Mode, ModelParams, NetworkConfig};
use crate::trainer::{detached_wh_at_objects, refinement_residuals};

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradOp {
    Conv2d,
    Relu,
    Sigmoid,
    Upsample,
    BilinearSample,
    FocalLoss,
    MaskedL1,
    Network,
    /// Deliberately wrong analytic gradient; must be reported as a failure.
    NegativeControl,
}

impl GradOp {
    /// The operations checked by default.
    pub const SUITE: [GradOp; 8] = [
        GradOp::Conv2d,
        GradOp::Relu,
        GradOp::Sigmoid,
        GradOp::Upsample,
        GradOp::BilinearSample,
        GradOp::FocalLoss,
        GradOp::MaskedL1,
        GradOp::Network,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::Conv2d => "conv2d",
            GradOp::Relu => "relu",
            GradOp::Sigmoid => "sigmoid",
            GradOp::Upsample => "upsample_nearest2x",
            GradOp::BilinearSample => "bilinear_sample",
            GradOp::FocalLoss => "focal_loss",
            GradOp::MaskedL1 => "masked_l1",
            GradOp::Network => "network",
            GradOp::NegativeControl => "negative_control",
        }
    }

    pub fn parse(s: &str) -> Result<GradOp> {
        [GradOp::SUITE.as_slice(), &[GradOp::NegativeControl]]
            .concat()
            .into_iter()
            .find(|op| op.name() == s || (s == "upsample" && *op == GradOp::Upsample))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown gradcheck op `{s}`")))
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero so the ReLU kink is never straddled by
/// the finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random_tensor(rng, shape, -2.0, 2.0);
    for v in t.data_mut() {
        if v.abs() < 1e-3 {
            *v += 1e-2f64.copysign(*v);
        }
    }
    t
}

fn check_op(op: GradOp, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let name = op.name();
    match op {
        GradOp::Conv2d => {
            let (stride, pad) = [(1, 1), (2, 1), (1, 0), (2, 0)][(seed % 4) as usize];
            let k = if seed % 5 == 4 { 1 } else { 3 };
            let input = random_tensor(&mut rng, &[4, 5, 5], -1.0, 1.0);
            let weight = random_tensor(&mut rng, &[2, 4, k, k], -1.0, 1.0);
            let bias = random_tensor(&mut rng, &[2], -1.0, 1.0);
            let h_out = (5 + 2 * pad - k) / stride + 1;
            let out_w = random_tensor(&mut rng, &[2, h_out, h_out], -1.0, 1.0);
            check_gradients(
                name,
                &[input, weight, bias],
                |g: &mut Graph, v: &[Var]| {
                    let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
                    weighted_sum(g, y, &out_w)
                },
                FD_STEP,
                OP_TOLERANCE,
                None,
            )
        }
        GradOp::Relu => {
            let x = away_from_zero(&mut rng, &[3, 4, 5]);
            let w = random_tensor(&mut rng, &[3, 4, 5], -1.0, 1.0);
            check_gradients(
                name,
                &[x],
                |g: &mut Graph, v: &[Var]| {
                    let y = g.relu(v[0]);
                    weighted_sum(g, y, &w)
                },
                FD_STEP,
                OP_TOLERANCE,
                None,
            )
        }
        GradOp::Sigmoid => {
            let x = random_tensor(&mut rng, &[2, 3, 4], -6.0, 6.0);
            let w = random_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
            check_gradients(
                name,
                &[x],
                |g: &mut Graph, v: &[Var]| {
                    let y = g.sigmoid(v[0]);
                    weighted_sum(g, y, &w)
                },
                FD_STEP,
                OP_TOLERANCE,
                None,
            )
        }
        GradOp::Upsample => {
            let x = random_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
            let w = random_tensor(&mut rng, &[2, 6, 8], -1.0, 1.0);
            check_gradients(
                name,
                &[x],
                |g: &mut Graph, v: &[Var]| {
                    let y = g.upsample_nearest2x(v[0])?;
                    weighted_sum(g, y, &w)
                },
                FD_STEP,
                OP_TOLERANCE,
                None,
            )
        }
        GradOp::BilinearSample => {
            let f = random_tensor(&mut rng, &[3, 6, 7], -1.0, 1.0);
            let points: Vec<(f64, f64)> = (0..9)
                .map(|_| (rng.random_range(0.0..6.0), rng.random_range(0.0..5.0)))
                .collect();
            let w = random_tensor(&mut rng, &[points.len(), 3], -1.0, 1.0);
            check_gradients(
                name,
                &[f],
                |g: &mut Graph, v: &[Var]| {
                    let y = g.bilinear_sample(v[0], &points)?;
                    weighted_sum(g, y, &w)
                },
                FD_STEP,
                OP_TOLERANCE,
                None,
            )
        }
        GradOp::FocalLoss => {
            let pred = random_tensor(&mut rng, &[2, 5, 5], 0.02, 0.98);
            let mut gt = random_tensor(&mut rng, &[2, 5, 5], 0.0, 0.99);
            gt.data_mut()[3] = 1.0;
            gt.data_mut()[31] = 1.0;
            let fp = FocalParams::default();
            check_gradients(
                name,
                &[pred],
                |g: &mut Graph, v: &[Var]| focal_loss_node(g, v[0], &gt, &fp),
                FD_STEP,
                OP_TOLERANCE,
                None,
            )
        }
        GradOp::MaskedL1 => {
            let pred = random_tensor(&mut rng, &[2, 4, 4], -3.0, 3.0);
            let mut target = pred.clone();
            // keep every residual at least 0.1 away from the kink
            for v in target.data_mut() {
                *v += if rng.random::<bool>() { 1.0 } else { -1.0 } * rng.random_range(0.1..2.0);
            }
            let mask: Vec<bool> = (0..16).map(|_| rng.random::<bool>()).collect();
            check_gradients(
                name,
                &[pred],
                |g: &mut Graph, v: &[Var]| masked_l1_node(g, v[0], &target, &mask),
                FD_STEP,
                OP_TOLERANCE,
                None,
            )
        }
        GradOp::Network => check_network(seed),
        GradOp::NegativeControl => {
            let x = random_tensor(&mut rng, &[5], 0.5, 2.0);
            check_gradients(
                name,
                &[x],
                |g: &mut Graph, v: &[Var]| {
                    // value sum(x^2) but reports gradient x instead of 2x
                    let xs = g.value(v[0]).data().to_vec();
                    let value = xs.iter().map(|a| a * a).sum();
                    g.scalar_loss(v[0], value, xs)
                },
                FD_STEP,
                OP_TOLERANCE,
                None,
            )
        }
    }
}

/// Tiny network used for the composed check (16x16 input).
pub fn gradcheck_network_config(seed: u64) -> NetworkConfig {
    NetworkConfig {
        num_classes: 2,
        input_height: 16,
        input_width: 16,
        backbone_channels: vec![3, 4, 4],
        head_hidden_channels: 4,
        keypoints: KeypointMode::Corners,
        init_seed: seed,
        ..NetworkConfig::default()
    }
}

/// Full training objective with respect to every parameter. Sampling
/// geometry for refinement is computed once at the unperturbed point,
/// which is exactly what detaching it means.
fn check_network(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let net = gradcheck_network_config(seed);
    let params = ModelParams::init(&net)?;
    // Perturb biases so no unit sits at an exact ReLU kink.
    let mut params = params;
    for (name, t) in params.iter_mut() {
        if name.ends_with(".bias") {
            for v in t.data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
    }
    let image = random_tensor(&mut rng, &[3, 16, 16], 0.0, 1.0);
    let boxes = vec![
        GtBox::new(0, 1.5, 2.0, 9.0, 8.5),
        GtBox::new(1, 8.0, 7.0, 15.0, 15.5),
    ];
    let target = encode_targets(&boxes, &net)?;
    let names: Vec<String> = params.names().cloned().collect();
    let tensors: Vec<Tensor> = names.iter().map(|n| params.get(n).cloned().expect("param")).collect();
    let weights = LossWeights::default();
    let focal = FocalParams::default();

    let start_wh = {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let img = g.constant(image.clone());
        let out = forward(&mut g, img, &p, &net, Mode::Train)?;
        detached_wh_at_objects(&g, &out, &target)
    };

    check_gradients(
        GradOp::Network.name(),
        &tensors,
        |g: &mut Graph, vars: &[Var]| {
            let p = crate::network::BoundParams::from_vars(names.iter().cloned().zip(vars.iter().copied()));
            let img = g.constant(image.clone());
            let out = forward(g, img, &p, &net, Mode::Train)?;
            let refine = refinement_residuals(g, &out, &p, &target, &net, Some(&start_wh))?;
            let (loss, _) = total_loss(g, &out, &refine, &target, &weights, &focal)?;
            Ok(loss)
        },
        FD_STEP,
        NETWORK_TOLERANCE,
        None,
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct OpSummary {
    pub op: GradOp,
    pub seeds: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub failing_seeds: Vec<u64>,
}

/// Runs `ops` over `seeds` consecutive seeds starting at `first_seed`.
pub fn run_suite(ops: &[GradOp], first_seed: u64, seeds: usize) -> Result<Vec<OpSummary>> {
    ops.iter()
        .map(|&op| {
            let mut s = OpSummary {
                op,
                seeds,
                checked: 0,
                max_rel_error: 0.0,
                tolerance: 0.0,
                passed: true,
                failing_seeds: Vec::new(),
            };
            for seed in first_seed..first_seed + seeds as u64 {
                let r = check_op(op, seed)?;
                s.checked += r.checked;
                s.max_rel_error = s.max_rel_error.max(r.max_rel_error);
                s.tolerance = r.tolerance;
                if !r.passed() {
                    s.passed = false;
                    s.failing_seeds.push(seed);
                }
            }
            Ok(s)
        })
        .collect()
}

impl std::fmt::Display for OpSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<18} {}  max rel err {:.2e} (tol {:.0e}) over {} seeds, {} entries",
            self.op.name(),
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance,
            self.seeds,
            self.checked
        )?;
        if !self.failing_seeds.is_empty() {
            write!(f, "  failing seeds {:?}", self.failing_seeds)?;
        }
        Ok(())
    }
}
