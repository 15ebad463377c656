use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: ConvGeometry,
        cols: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Upsample2x(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    Transpose2d(Var),
    BilinearSample {
        features: Var,
        taps: Vec<[(usize, f64); 4]>,
    },
    /// Terminal scalar whose gradient with respect to `input` is known at
    /// forward time (losses).
    ScalarLoss { input: Var, grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Record of every operation applied during one forward pass, replayed in
/// reverse by [`Graph::backward`]. Nodes are appended in evaluation order,
/// so node indices are already a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf; its gradient is accumulated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Accumulated gradient of a trainable leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Clears every accumulated leaf gradient.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c_in, h, w) = self.value(input).dims3()?;
        let wshape = self.value(weight).shape().to_vec();
        let [c_out, wc_in, k, k2] = wshape[..] else {
            return Err(Error::shape("conv2d", format!("weight must be 4-d, got {wshape:?}")));
        };
        if k != k2 || !(k == 1 || k == 3) {
            return Err(Error::shape("conv2d", format!("kernel must be 1x1 or 3x3, got {k}x{k2}")));
        }
        if wc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("weight expects {wc_in} input channels but input has {c_in}"),
            ));
        }
        if self.value(bias).shape() != [c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} does not match {c_out} output channels", self.value(bias).shape()),
            ));
        }
        if !(stride == 1 || stride == 2) || pad > 1 {
            return Err(Error::InvalidArgument(format!(
                "conv2d supports stride 1|2 and pad 0|1, got stride {stride} pad {pad}"
            )));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape("conv2d", format!("input {h}x{w} smaller than kernel {k}")));
        }
        let geometry = ConvGeometry {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        };
        let cols = kernels::im2col(self.value(input).data(), &geometry);
        let n = geometry.out_len();
        let mut out = vec![0.0; c_out * n];
        let bias_vals = self.value(bias).data();
        for (co, row) in out.chunks_mut(n).enumerate() {
            row.fill(bias_vals[co]);
        }
        kernels::gemm(
            c_out,
            geometry.patch_len(),
            n,
            self.value(weight).data(),
            false,
            &cols,
            false,
            1.0,
            &mut out,
        );
        let value = Tensor::new(vec![c_out, geometry.h_out, geometry.w_out], out)?;
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
                cols: if rg { cols } else { Vec::new() },
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ci in 0..c {
            for y in 0..h2 {
                for xo in 0..w2 {
                    out[(ci * h2 + y) * w2 + xo] = src[(ci * h + y / 2) * w + xo / 2];
                }
            }
        }
        let value = Tensor::new(vec![c, h2, w2], out)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Upsample2x(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Transposes a 2-d tensor `[R, C]` into `[C, R]`.
    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let [r, c] = src.shape()[..] else {
            return Err(Error::shape("transpose2d", format!("expected 2-d, got {:?}", src.shape())));
        };
        let s = src.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = s[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Transpose2d(x), rg))
    }

    /// Samples `features[C, H, W]` at continuous `(x, y)` grid coordinates,
    /// returning `[P, C]`. Coordinates are clamped into the grid. Gradient
    /// flows to the features only.
    pub fn bilinear_sample(&mut self, features: Var, points: &[(f64, f64)]) -> Result<Var> {
        let (c, h, w) = self.value(features).dims3()?;
        let src = self.value(features).data();
        let plane = h * w;
        let taps: Vec<_> = points
            .iter()
            .map(|&(x, y)| kernels::bilinear_taps(x, y, h, w))
            .collect();
        let mut out = vec![0.0; points.len() * c];
        for (p, t) in taps.iter().enumerate() {
            for ci in 0..c {
                let base = ci * plane;
                out[p * c + ci] = t.iter().map(|&(i, wt)| wt * src[base + i]).sum();
            }
        }
        let value = if points.is_empty() {
            Tensor::new(vec![0, c], out)?
        } else {
            Tensor::new(vec![points.len(), c], out)?
        };
        let rg = self.needs(features);
        Ok(self.push(value, Op::BilinearSample { features, taps }, rg))
    }

    /// Records a scalar loss whose value and input-gradient were computed
    /// externally.
    pub fn scalar_loss(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).len() {
            return Err(Error::shape(
                "scalar_loss",
                format!("gradient has {} entries, input has {}", grad.len(), self.value(input).len()),
            ));
        }
        let rg = self.needs(input);
        Ok(self.push(Tensor::scalar(value), Op::ScalarLoss { input, grad }, rg))
    }

    /// Reverse pass from a scalar. Leaf gradients accumulate across calls
    /// until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    let acc = self.nodes[idx].grad.get_or_insert_with(|| vec![0.0; upstream.len()]);
                    for (a, g) in acc.iter_mut().zip(&upstream) {
                        *a += g;
                    }
                }
                op => self.propagate(op, &upstream, &mut grads),
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut accum = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(g);
        };
        match op {
            Op::Leaf => unreachable!(),
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
                cols,
            } => {
                let c_out = self.nodes[weight.0].value.shape()[0];
                let n = geometry.out_len();
                let p = geometry.patch_len();
                accum(*bias, &mut |g| {
                    for (co, row) in up.chunks(n).enumerate() {
                        g[co] += row.iter().sum::<f64>();
                    }
                });
                accum(*weight, &mut |g| {
                    kernels::gemm(c_out, n, p, up, false, cols, true, 1.0, g);
                });
                let wdata = self.nodes[weight.0].value.data();
                accum(*input, &mut |g| {
                    let mut dcols = vec![0.0; p * n];
                    kernels::gemm(p, c_out, n, wdata, true, up, false, 0.0, &mut dcols);
                    kernels::col2im_add(&dcols, geometry, g);
                });
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.data();
                accum(*x, &mut |g| {
                    for ((gi, u), xi) in g.iter_mut().zip(up).zip(xv) {
                        if *xi > 0.0 {
                            *gi += u;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let xv = self.nodes[x.0].value.data();
                accum(*x, &mut |g| {
                    for ((gi, u), xi) in g.iter_mut().zip(up).zip(xv) {
                        let s = kernels::sigmoid(*xi);
                        *gi += u * s * (1.0 - s);
                    }
                });
            }
            Op::Upsample2x(x) => {
                let shape = self.nodes[x.0].value.shape();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let w2 = 2 * w;
                accum(*x, &mut |g| {
                    for ci in 0..c {
                        for y in 0..2 * h {
                            for xo in 0..w2 {
                                g[(ci * h + y / 2) * w + xo / 2] += up[(ci * 2 * h + y) * w2 + xo];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    accum(*v, &mut |g| {
                        for (gi, u) in g.iter_mut().zip(up) {
                            *gi += u;
                        }
                    });
                }
            }
            Op::Scale(x, f) => accum(*x, &mut |g| {
                for (gi, u) in g.iter_mut().zip(up) {
                    *gi += u * f;
                }
            }),
            Op::Sum(x) => accum(*x, &mut |g| {
                for gi in g.iter_mut() {
                    *gi += up[0];
                }
            }),
            Op::Reshape(x) => accum(*x, &mut |g| {
                for (gi, u) in g.iter_mut().zip(up) {
                    *gi += u;
                }
            }),
            Op::Transpose2d(x) => {
                let shape = self.nodes[x.0].value.shape();
                let (r, c) = (shape[0], shape[1]);
                accum(*x, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += up[j * r + i];
                        }
                    }
                });
            }
            Op::BilinearSample { features, taps } => {
                let shape = self.nodes[features.0].value.shape();
                let (c, plane) = (shape[0], shape[1] * shape[2]);
                accum(*features, &mut |g| {
                    for (p, t) in taps.iter().enumerate() {
                        for ci in 0..c {
                            let u = up[p * c + ci];
                            for &(i, wt) in t {
                                g[ci * plane + i] += wt * u;
                            }
                        }
                    }
                });
            }
            Op::ScalarLoss { input, grad } => accum(*input, &mut |g| {
                for (gi, d) in g.iter_mut().zip(grad) {
                    *gi += up[0] * d;
                }
            }),
        }
    }
}
