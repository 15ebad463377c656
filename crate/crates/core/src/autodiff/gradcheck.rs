//! Central finite-difference checks of analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor for the relative error, so that entries whose true
/// gradient is ~0 are compared absolutely at this scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `build`'s analytic gradient with respect to each of `inputs`
/// against central differences with step `eps`.
///
/// `build` receives a fresh graph and one trainable var per input and must
/// return a scalar. `select` picks which flat elements of input `i` to
/// perturb (`None` checks them all).
pub fn check_gradients<F>(
    name: &str,
    inputs: &[Tensor],
    build: F,
    eps: f64,
    tolerance: f64,
    select: Option<&dyn Fn(usize, usize) -> Vec<usize>>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for i in 0..inputs.len() {
        let indices = match select {
            Some(f) => f(i, inputs[i].len()),
            None => (0..inputs[i].len()).collect(),
        };
        for j in indices {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            max_rel = max_rel.max(relative_error(analytic[i].data()[j], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        checked,
        max_rel_error: max_rel,
        tolerance,
    })
}

/// `sum(out * weights)` as a graph scalar; a random `weights` tensor keeps
/// the upstream gradient from being uniform.
pub fn weighted_sum(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let value: f64 = g
        .value(out)
        .data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a * b)
        .sum();
    g.scalar_loss(out, value, weights.data().to_vec())
}
