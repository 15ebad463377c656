//! Micro fully-convolutional backbone and the four detector heads.
//!
//! Backbone: three stride-2 blocks (two 3x3 conv + ReLU each) down to 1/8,
//! one nearest-neighbour 2x up block merged with the 1/4 skip, giving a
//! stride-4 feature map. Heads are two-layer modules (3x3 conv + ReLU, then
//! 1x1 conv with no activation):
//!
//! * center: per-class centerness heatmap (sigmoid)
//! * wh / offset: object size and sub-cell center offset (raw linear)
//! * corner: class-agnostic 4-channel keypoint heatmap (training only)
//! * refine: residual width/height from features bilinearly sampled at the
//!   center and four keypoints of each object

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Prior probability used to initialise heatmap biases.
const HEATMAP_PRIOR: f64 = 0.1;

/// Which four points besides the center feed the refinement head (and
/// supervise the corner heatmap).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KeypointMode {
    #[default]
    Corners,
    /// `center * (1 - t) + corner * t`
    DiagPts { t: f64 },
    /// `center * (1 - t) + edge_midpoint * t`
    MidEdgePts { t: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub num_classes: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub output_stride: usize,
    pub backbone_channels: Vec<usize>,
    pub head_hidden_channels: usize,
    pub refine_iterations: usize,
    pub keypoints: KeypointMode,
    /// Build and train the refinement head.
    pub aggregation: bool,
    /// Build and train the corner heatmap head.
    pub corner_attn: bool,
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            input_height: 64,
            input_width: 64,
            output_stride: 4,
            backbone_channels: vec![16, 24, 32],
            head_hidden_channels: 32,
            refine_iterations: 1,
            keypoints: KeypointMode::Corners,
            aggregation: true,
            corner_attn: true,
            init_seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Error::Config {
            field: field.to_string(),
            reason,
        };
        if self.num_classes == 0 {
            return Err(bad("num_classes", "must be at least 1".into()));
        }
        if self.output_stride != 4 {
            return Err(bad(
                "output_stride",
                format!("the backbone has a fixed stride of 4, got {}", self.output_stride),
            ));
        }
        // Three stride-2 stages plus the 2x up block need a multiple of 8.
        for (field, v) in [("input_height", self.input_height), ("input_width", self.input_width)] {
            if v == 0 || v % (2 * self.output_stride) != 0 {
                return Err(bad(
                    field,
                    format!("{v} is not a positive multiple of {}", 2 * self.output_stride),
                ));
            }
        }
        if self.backbone_channels.len() != 3 || self.backbone_channels.contains(&0) {
            return Err(bad(
                "backbone_channels",
                format!("expected three positive widths, got {:?}", self.backbone_channels),
            ));
        }
        if self.head_hidden_channels == 0 {
            return Err(bad("head_hidden_channels", "must be positive".into()));
        }
        match self.keypoints {
            KeypointMode::Corners => {}
            KeypointMode::DiagPts { t } | KeypointMode::MidEdgePts { t } => {
                if !(t > 0.0 && t <= 1.0) {
                    return Err(bad("keypoints.t", format!("{t} not in (0, 1]")));
                }
            }
        }
        Ok(())
    }

    pub fn feature_height(&self) -> usize {
        self.input_height / self.output_stride
    }

    pub fn feature_width(&self) -> usize {
        self.input_width / self.output_stride
    }

    /// Channel count of the backbone output.
    pub fn feature_channels(&self) -> usize {
        self.backbone_channels[1]
    }
}

/// Center plus the four keypoints used for aggregation, in the order
/// top-left, top-right, bottom-left, bottom-right (corners / diagonal
/// points) or left, right, top, bottom (edge midpoints).
pub fn compute_keypoints(center: (f64, f64), w: f64, h: f64, mode: KeypointMode) -> [(f64, f64); 4] {
    let (cx, cy) = center;
    let (hw, hh) = (w / 2.0, h / 2.0);
    let lerp = |t: f64, p: (f64, f64)| (cx * (1.0 - t) + p.0 * t, cy * (1.0 - t) + p.1 * t);
    match mode {
        KeypointMode::Corners => [
            (cx - hw, cy - hh),
            (cx + hw, cy - hh),
            (cx - hw, cy + hh),
            (cx + hw, cy + hh),
        ],
        KeypointMode::DiagPts { t } => [
            lerp(t, (cx - hw, cy - hh)),
            lerp(t, (cx + hw, cy - hh)),
            lerp(t, (cx - hw, cy + hh)),
            lerp(t, (cx + hw, cy + hh)),
        ],
        KeypointMode::MidEdgePts { t } => [
            lerp(t, (cx - hw, cy)),
            lerp(t, (cx + hw, cy)),
            lerp(t, (cx, cy - hh)),
            lerp(t, (cx, cy + hh)),
        ],
    }
}

/// All learnable tensors, keyed by dotted path. Iteration is sorted by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Number of scalars under a name prefix, e.g. `"head.center."`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Seeded initialisation for every tensor the config needs.
    pub fn init(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ModelParams::new();
        let mut conv = |params: &mut ModelParams, name: &str, c_out: usize, c_in: usize, k: usize, gain: f64, bias: f64| {
            let fan_in = (c_in * k * k) as f64;
            let normal = Normal::new(0.0, gain / fan_in.sqrt()).expect("valid std");
            let w: Vec<f64> = (0..c_out * c_in * k * k).map(|_| normal.sample(&mut rng)).collect();
            params.insert(
                format!("{name}.weight"),
                Tensor::new(vec![c_out, c_in, k, k], w).expect("shape"),
            );
            params.insert(format!("{name}.bias"), Tensor::full(&[c_out], bias));
        };
        let he = 2f64.sqrt();
        let [c0, c1, c2] = [config.backbone_channels[0], config.backbone_channels[1], config.backbone_channels[2]];
        conv(&mut params, "backbone.down1.conv1", c0, 3, 3, he, 0.0);
        conv(&mut params, "backbone.down1.conv2", c0, c0, 3, he, 0.0);
        conv(&mut params, "backbone.down2.conv1", c1, c0, 3, he, 0.0);
        conv(&mut params, "backbone.down2.conv2", c1, c1, 3, he, 0.0);
        conv(&mut params, "backbone.down3.conv1", c2, c1, 3, he, 0.0);
        conv(&mut params, "backbone.down3.conv2", c2, c2, 3, he, 0.0);
        conv(&mut params, "backbone.up.conv", c1, c2, 3, 1.0, 0.0);

        let hidden = config.head_hidden_channels;
        let prior_bias = -((1.0 - HEATMAP_PRIOR) / HEATMAP_PRIOR).ln();
        let mut heads = vec![
            (HeadKind::Center, config.num_classes, prior_bias),
            (HeadKind::Wh, 2, 0.0),
            (HeadKind::Offset, 2, 0.0),
        ];
        if config.corner_attn {
            heads.push((HeadKind::Corner, 4, prior_bias));
        }
        for (kind, c_out, bias) in heads {
            let name = kind.prefix();
            conv(&mut params, &format!("{name}.conv1"), hidden, c1, 3, he, 0.0);
            conv(&mut params, &format!("{name}.conv2"), c_out, hidden, 1, 1.0, bias);
        }
        if config.aggregation {
            let name = HeadKind::Refine.prefix();
            conv(&mut params, &format!("{name}.conv1"), hidden, 5 * c1, 1, he, 0.0);
            conv(&mut params, &format!("{name}.conv2"), 2, hidden, 1, 0.1, 0.0);
        }
        Ok(params)
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), g.param(t.clone())))
                .collect(),
        }
    }

    /// Registers every tensor as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), g.constant(t.clone())))
                .collect(),
        }
    }
}

/// Graph handles for a [`ModelParams`], by name.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    fn has_prefix(&self, prefix: &str) -> bool {
        self.vars.keys().any(|k| k.starts_with(prefix))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Center,
    Wh,
    Offset,
    Corner,
    Refine,
}

impl HeadKind {
    pub fn prefix(self) -> &'static str {
        match self {
            HeadKind::Center => "head.center",
            HeadKind::Wh => "head.wh",
            HeadKind::Offset => "head.offset",
            HeadKind::Corner => "head.corner",
            HeadKind::Refine => "head.refine",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    /// Pre-sigmoid center logits are not exposed; this is the probability map.
    pub center_heatmap: Var,
    pub wh_map: Var,
    pub offset_map: Var,
    pub corner_heatmap: Option<Var>,
    pub backbone_features: Var,
}

/// Materialised network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkOutputs {
    pub center_heatmap: Tensor,
    pub wh_map: Tensor,
    pub offset_map: Tensor,
    pub corner_heatmap: Option<Tensor>,
    pub backbone_features: Tensor,
}

impl OutputVars {
    pub fn materialize(&self, g: &Graph) -> NetworkOutputs {
        NetworkOutputs {
            center_heatmap: g.value(self.center_heatmap).clone(),
            wh_map: g.value(self.wh_map).clone(),
            offset_map: g.value(self.offset_map).clone(),
            corner_heatmap: self.corner_heatmap.map(|v| g.value(v).clone()),
            backbone_features: g.value(self.backbone_features).clone(),
        }
    }
}

fn conv(g: &mut Graph, p: &BoundParams, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"))?;
    let b = p.var(&format!("{name}.bias"))?;
    g.conv2d(x, w, b, stride, pad)
}

fn conv_relu(g: &mut Graph, p: &BoundParams, name: &str, x: Var, stride: usize) -> Result<Var> {
    let y = conv(g, p, name, x, stride, 1)?;
    Ok(g.relu(y))
}

/// Two-layer head: 3x3 conv + ReLU, then 1x1 conv without activation.
/// Spatial dims are preserved.
pub fn head_forward(g: &mut Graph, features: Var, params: &BoundParams, prefix: &str) -> Result<Var> {
    let hidden = conv_relu(g, params, &format!("{prefix}.conv1"), features, 1)?;
    conv(g, params, &format!("{prefix}.conv2"), hidden, 1, 0)
}

pub fn backbone_forward(g: &mut Graph, image: Var, p: &BoundParams) -> Result<Var> {
    let x = conv_relu(g, p, "backbone.down1.conv1", image, 2)?;
    let x = conv_relu(g, p, "backbone.down1.conv2", x, 1)?;
    let x = conv_relu(g, p, "backbone.down2.conv1", x, 2)?;
    let skip = conv_relu(g, p, "backbone.down2.conv2", x, 1)?;
    let x = conv_relu(g, p, "backbone.down3.conv1", skip, 2)?;
    let x = conv_relu(g, p, "backbone.down3.conv2", x, 1)?;
    let x = g.upsample_nearest2x(x)?;
    let x = conv(g, p, "backbone.up.conv", x, 1, 1)?;
    let x = g.add(x, skip)?;
    Ok(g.relu(x))
}

fn check_image(g: &Graph, image: Var, config: &NetworkConfig) -> Result<()> {
    let (c, h, w) = g.value(image).dims3()?;
    if c != 3 || h != config.input_height || w != config.input_width {
        return Err(Error::shape(
            "forward",
            format!(
                "image is {c}x{h}x{w}, config expects 3x{}x{}",
                config.input_height, config.input_width
            ),
        ));
    }
    Ok(())
}

/// Full forward pass. The corner head only runs in [`Mode::Train`].
pub fn forward(g: &mut Graph, image: Var, params: &BoundParams, config: &NetworkConfig, mode: Mode) -> Result<OutputVars> {
    config.validate()?;
    check_image(g, image, config)?;
    let features = backbone_forward(g, image, params)?;
    let center_logits = head_forward(g, features, params, HeadKind::Center.prefix())?;
    let center_heatmap = g.sigmoid(center_logits);
    let wh_map = head_forward(g, features, params, HeadKind::Wh.prefix())?;
    let offset_map = head_forward(g, features, params, HeadKind::Offset.prefix())?;
    let corner_heatmap = if mode == Mode::Train && params.has_prefix(HeadKind::Corner.prefix()) {
        let logits = head_forward(g, features, params, HeadKind::Corner.prefix())?;
        Some(g.sigmoid(logits))
    } else {
        None
    };
    Ok(OutputVars {
        center_heatmap,
        wh_map,
        offset_map,
        corner_heatmap,
        backbone_features: features,
    })
}

/// Inference-mode forward pass on plain tensors.
pub fn infer(image: &Tensor, params: &ModelParams, config: &NetworkConfig) -> Result<NetworkOutputs> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let img = g.constant(image.clone());
    let out = forward(&mut g, img, &p, config, Mode::Infer)?;
    Ok(out.materialize(&g))
}

/// One refinement step: sample features at the center and four keypoints
/// of each object and regress `(dw, dh)`. Returns `[2, 1, N]`, or `None`
/// for an empty object list. Coordinates are in feature-map units.
pub fn refine_step(
    g: &mut Graph,
    features: Var,
    params: &BoundParams,
    centers: &[(f64, f64)],
    wh: &[(f64, f64)],
    mode: KeypointMode,
) -> Result<Option<Var>> {
    if centers.len() != wh.len() {
        return Err(Error::shape(
            "refine_step",
            format!("{} centers but {} sizes", centers.len(), wh.len()),
        ));
    }
    if centers.is_empty() {
        return Ok(None);
    }
    let n = centers.len();
    let mut points = Vec::with_capacity(5 * n);
    for (&c, &(w, h)) in centers.iter().zip(wh) {
        points.push(c);
        points.extend(compute_keypoints(c, w.max(0.0), h.max(0.0), mode));
    }
    let c_b = g.value(features).dims3()?.0;
    let sampled = g.bilinear_sample(features, &points)?; // [5N, C]
    let per_object = g.reshape(sampled, &[n, 5 * c_b])?;
    let columns = g.transpose2d(per_object)?; // [5C, N]
    let input = g.reshape(columns, &[5 * c_b, 1, n])?;
    let prefix = HeadKind::Refine.prefix();
    let hidden = conv(g, params, &format!("{prefix}.conv1"), input, 1, 0)?;
    let hidden = g.relu(hidden);
    Ok(Some(conv(g, params, &format!("{prefix}.conv2"), hidden, 1, 0)?))
}

/// Result of iterated aggregation refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    /// Total `(dw, dh)` summed over iterations.
    pub residuals: Vec<(f64, f64)>,
    pub refined_wh: Vec<(f64, f64)>,
}

/// Applies the refinement head `config.refine_iterations` times, each
/// iteration placing keypoints with the previous iteration's sizes.
pub fn aggregate_refine(
    features: &Tensor,
    centers: &[(f64, f64)],
    coarse_wh: &[(f64, f64)],
    params: &ModelParams,
    config: &NetworkConfig,
) -> Result<Refinement> {
    aggregate_refine_n(features, centers, coarse_wh, params, config, config.refine_iterations)
}

pub fn aggregate_refine_n(
    features: &Tensor,
    centers: &[(f64, f64)],
    coarse_wh: &[(f64, f64)],
    params: &ModelParams,
    config: &NetworkConfig,
    iterations: usize,
) -> Result<Refinement> {
    let mut wh = coarse_wh.to_vec();
    let mut residuals = vec![(0.0, 0.0); wh.len()];
    if iterations == 0 || centers.is_empty() {
        return Ok(Refinement {
            residuals,
            refined_wh: wh,
        });
    }
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let f = g.constant(features.clone());
    for _ in 0..iterations {
        let Some(out) = refine_step(&mut g, f, &p, centers, &wh, config.keypoints)? else {
            break;
        };
        let vals = g.value(out).data();
        let n = wh.len();
        for i in 0..n {
            let d = (vals[i], vals[n + i]);
            residuals[i].0 += d.0;
            residuals[i].1 += d.1;
            wh[i].0 += d.0;
            wh[i].1 += d.1;
        }
    }
    Ok(Refinement {
        residuals,
        refined_wh: wh,
    })
}
