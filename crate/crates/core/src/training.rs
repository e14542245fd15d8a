//! Mini-batch gradient accumulation shared by the training loops.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::parallel::{self, Execution};

/// Per-sample losses and parameter gradients of one mini-batch.
pub struct BatchGradients {
    pub losses: Vec<f64>,
    pub grads: Vec<ParamGrads>,
}

impl BatchGradients {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len().max(1) as f64
    }

    /// Add the batch-mean gradient into `store`, summing samples in batch order.
    pub fn accumulate_mean(&self, store: &mut ParamStore) -> Result<()> {
        let scale = 1.0 / self.grads.len().max(1) as f64;
        for sample in &self.grads {
            for (id, g) in sample {
                store.accumulate(id, g, scale)?;
            }
        }
        Ok(())
    }
}

/// Exponential moving average of every parameter tensor.
#[derive(Clone, Debug)]
pub struct WeightAverage {
    decay: f64,
    shadow: Vec<(String, Vec<f64>)>,
}

impl WeightAverage {
    pub fn new(store: &ParamStore, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("averaging decay must lie in [0, 1), got {decay}")));
        }
        Ok(Self {
            decay,
            shadow: store.iter().map(|p| (p.id.clone(), p.tensor.data().to_vec())).collect(),
        })
    }

    pub fn update(&mut self, store: &ParamStore) -> Result<()> {
        let d = self.decay;
        for (id, avg) in &mut self.shadow {
            let current = store.get(id)?.tensor.data();
            for (a, &v) in avg.iter_mut().zip(current) {
                *a = d * *a + (1.0 - d) * v;
            }
        }
        Ok(())
    }

    /// Overwrite the parameters in `store` with their averages.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        for (id, avg) in &self.shadow {
            store.get_mut(id)?.tensor.data_mut().copy_from_slice(avg);
        }
        Ok(())
    }
}

/// Gradients of one item, keyed by parameter id.
pub type ParamGrads = Vec<(String, Vec<f64>)>;

/// Evaluate `loss_fn` on every item with its own graph and collect the
/// gradients. Items may run concurrently under `exec`; the result is
/// identical either way.
pub fn batch_gradients<T, F>(exec: Execution, store: &ParamStore, items: &[T], loss_fn: F) -> Result<BatchGradients>
where
    T: Sync,
    F: Fn(&mut Graph, &ParamStore, &T) -> Result<Var> + Sync + Send,
{
    let per_item = parallel::map(exec, items, |item| -> Result<(f64, ParamGrads)> {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, store, item)?;
        let value = g.scalar(loss);
        Ok((value, g.backward(loss)?.param_grads()))
    });
    let mut out = BatchGradients {
        losses: Vec::with_capacity(items.len()),
        grads: Vec::with_capacity(items.len()),
    };
    for r in per_item {
        let (l, g) = r?;
        out.losses.push(l);
        out.grads.push(g);
    }
    Ok(out)
}
