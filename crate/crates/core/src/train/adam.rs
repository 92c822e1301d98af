use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Adam with bias correction; state is keyed by parameter name so it can be checkpointed.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

/// Gradients of the trainable parameters, in name order.
pub type NamedGrads = Vec<(String, Tensor)>;

pub fn collect_grads(store: &ParamStore, grads: &GradStore) -> NamedGrads {
    store
        .trainable()
        .filter_map(|(name, var)| grads.get(var.as_tensor()).map(|g| (name.clone(), g.clone())))
        .collect()
}

pub fn global_norm(grads: &NamedGrads) -> Result<f64> {
    let mut total = 0.0;
    for (_, g) in grads {
        total += g.sqr()?.sum_all()?.to_scalar::<f64>()?;
    }
    Ok(total.sqrt())
}

/// Rescales all gradients by `max_norm / norm` when the global norm exceeds `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut NamedGrads, max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads)?;
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            *g = g.affine(scale, 0.0)?;
        }
    }
    Ok(norm)
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &ParamStore, grads: &NamedGrads) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let var = store
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
            let g = g.detach();
            let m = match self.first.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let denom = (v.affine(1.0 / c2, 0.0)?.sqrt()? + self.eps)?;
            let update = (m.affine(self.lr / c1, 0.0)? / denom)?;
            var.set(&(var.as_tensor().detach() - update)?)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moment tensors under `first.<name>` / `second.<name>` keys.
    pub fn state_tensors(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (k, v) in &self.first {
            out.insert(format!("first.{k}"), v.clone());
        }
        for (k, v) in &self.second {
            out.insert(format!("second.{k}"), v.clone());
        }
        out
    }

    pub fn load_state(&mut self, step: u64, tensors: HashMap<String, Tensor>) -> Result<()> {
        self.step = step;
        self.first.clear();
        self.second.clear();
        for (k, v) in tensors {
            if let Some(name) = k.strip_prefix("first.") {
                self.first.insert(name.to_string(), v);
            } else if let Some(name) = k.strip_prefix("second.") {
                self.second.insert(name.to_string(), v);
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimizer tensor `{k}`")));
            }
        }
        Ok(())
    }
}
