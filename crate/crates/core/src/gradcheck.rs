//! Central finite-difference checks of graph gradients.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of the backward rules it verifies.

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const REL_TOLERANCE: f64 = 1e-4;
/// Denominator floor: components smaller than this are compared absolutely
/// at `REL_TOLERANCE * DENOM_FLOOR`.
pub const DENOM_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOLERANCE && self.max_rel_error.is_finite()
    }

    fn record(&mut self, analytic: f64, numeric: f64, label: impl FnOnce() -> String) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_error || e.is_nan() {
            self.max_rel_error = e;
            self.worst = Some(label());
        }
    }
}

/// Scalar `sum(out ⊙ weights)` with fixed random weights, turning any
/// tensor-valued output into a loss with a generic gradient.
pub fn random_projection<R: Rng + ?Sized>(g: &mut Graph, out: Var, rng: &mut R) -> Result<Var> {
    let w = Tensor::rand_uniform(g.shape(out), -1.0, 1.0, rng);
    let wv = g.constant(&w);
    let prod = g.mul(out, wv)?;
    Ok(g.sum(prod))
}

fn pick<R: Rng + ?Sized>(n: usize, limit: Option<usize>, rng: &mut R) -> Vec<usize> {
    match limit {
        Some(k) if k < n => {
            let mut idx = sample(rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// Check d loss / d input for every input tensor of `f`.
///
/// `f` must be deterministic. `limit` caps the number of coordinates
/// checked per input (sampled without replacement).
pub fn check_inputs<F, R>(name: &str, inputs: &[Tensor], f: F, limit: Option<usize>, rng: &mut R) -> Result<CheckResult>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.variable(t)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.scalar(loss))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut result = CheckResult {
        name: name.to_string(),
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        for i in pick(inputs[k].numel(), limit, rng) {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + STEP;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - STEP;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            result.record(analytic[i], numeric, || format!("input {k}[{i}]: analytic {} numeric {numeric}", analytic[i]));
        }
    }
    Ok(result)
}

/// Check d loss / d parameter for every parameter in `store` that `f` reads.
pub fn check_params<F, R>(name: &str, store: &ParamStore, f: F, limit: Option<usize>, rng: &mut R) -> Result<CheckResult>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut result = CheckResult {
        name: name.to_string(),
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut work = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, s)?;
        Ok(g.scalar(loss))
    };
    for (id, analytic) in grads.param_grads() {
        let n = analytic.len();
        for i in pick(n, limit, rng) {
            let orig = work.get(&id)?.tensor.data()[i];
            work.get_mut(&id)?.tensor.data_mut()[i] = orig + STEP;
            let up = eval(&work)?;
            work.get_mut(&id)?.tensor.data_mut()[i] = orig - STEP;
            let down = eval(&work)?;
            work.get_mut(&id)?.tensor.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            result.record(analytic[i], numeric, || format!("{id}[{i}]: analytic {} numeric {numeric}", analytic[i]));
        }
    }
    Ok(result)
}
