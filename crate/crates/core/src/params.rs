//! Named parameter storage shared by every model.
//!
//! Parameters live in a `BTreeMap` so that iteration order (and therefore
//! optimizer state layout and checkpoint contents) is deterministic.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};

pub const DEVICE: Device = Device::Cpu;
pub const DTYPE: DType = DType::F64;

#[derive(Clone, Debug)]
pub struct Param {
    pub var: Var,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn builder<'a>(&'a mut self, rng: &'a mut ChaCha8Rng) -> ParamBuilder<'a> {
        ParamBuilder {
            store: self,
            rng,
            prefix: String::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|p| &p.var)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, p)| (k, &p.var))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), p.var.dims().to_vec()))
            .collect()
    }

    pub fn to_tensors(&self) -> HashMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), p.var.as_tensor().copy().expect("cpu copy")))
            .collect()
    }

    /// Overwrites every stored parameter from `tensors`. Names and shapes must match exactly.
    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        for (name, p) in &self.entries {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.dims() != p.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: {:?} vs {:?}",
                    t.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&t.to_dtype(DTYPE)?)?;
        }
        Ok(())
    }

    /// Sets every parameter whose name starts with `prefix` to `value`.
    pub fn fill(&self, prefix: &str, value: f64) -> Result<usize> {
        let mut n = 0;
        for (name, p) in self.entries.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            p.var
                .set(&Tensor::full(value, p.var.dims(), &DEVICE)?)?;
            n += 1;
        }
        Ok(n)
    }

    /// Sets a single named parameter from a flat vector.
    pub fn set(&self, name: &str, values: &[f64]) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        let t = Tensor::from_slice(values, var.dims(), &DEVICE)?;
        var.set(&t)?;
        Ok(())
    }

    /// Adds iid `N(0, std^2)` noise to every trainable parameter matching `prefix`.
    pub fn perturb(&self, prefix: &str, std: f64, rng: &mut impl Rng) -> Result<()> {
        for (name, p) in &self.entries {
            if !p.trainable || !name.starts_with(prefix) {
                continue;
            }
            let noise = normal_tensor(p.var.dims(), std, rng)?;
            p.var.set(&(p.var.as_tensor() + noise)?)?;
        }
        Ok(())
    }
}

pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl ParamBuilder<'_> {
    /// Returns a builder that prefixes names with `name.`.
    pub fn pp(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = self.path(name);
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    fn insert(&mut self, name: &str, t: Tensor, trainable: bool) -> Result<Tensor> {
        let path = self.path(name);
        if self.store.entries.contains_key(&path) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter `{path}`"
            )));
        }
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.store.entries.insert(path, Param { var, trainable });
        Ok(out)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let t = if bound > 0.0 {
            let dist = Uniform::new(-bound, bound).expect("bound > 0");
            let n: usize = shape.iter().product();
            let v: Vec<f64> = (0..n).map(|_| dist.sample(self.rng)).collect();
            Tensor::from_vec(v, shape, &DEVICE)?
        } else {
            Tensor::zeros(shape, DTYPE, &DEVICE)?
        };
        self.insert(name, t, true)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let t = normal_tensor(shape, std, self.rng)?;
        self.insert(name, t, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        self.insert(name, Tensor::full(value, shape, &DEVICE)?, true)
    }

    /// A stored but non-trainable value (persisted in checkpoints, skipped by the optimizer).
    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        self.insert(name, Tensor::full(value, shape, &DEVICE)?, false)?;
        Ok(self.store.entries[&self.path(name)].var.clone())
    }

    /// Like [`constant`](Self::constant) but returns the variable handle for in-place updates.
    pub fn constant_var(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<Var> {
        self.insert(name, Tensor::full(value, shape, &DEVICE)?, trainable)?;
        Ok(self.store.entries[&self.path(name)].var.clone())
    }
}

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    Ok(Tensor::from_vec(v, shape, &DEVICE)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn builder_prefixes_and_rejects_duplicates() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        {
            let mut b = store.builder(&mut rng);
            let mut enc = b.pp("enc");
            enc.normal("w", &[2, 3], 1.0).unwrap();
            assert!(enc.normal("w", &[2, 3], 1.0).is_err());
            b.buffer("flag", &[1], 0.0).unwrap();
        }
        assert!(store.get("enc.w").is_some());
        assert_eq!(store.num_trainable(), 6);
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn fill_only_touches_prefix() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        {
            let mut b = store.builder(&mut rng);
            b.normal("a.w", &[2], 1.0).unwrap();
            b.normal("ab.w", &[2], 1.0).unwrap();
            b.normal("b.w", &[2], 1.0).unwrap();
        }
        assert_eq!(store.fill("a.", 0.0).unwrap(), 1);
        let a: Vec<f64> = store.get("a.w").unwrap().as_tensor().to_vec1().unwrap();
        assert_eq!(a, vec![0.0, 0.0]);
        let ab: Vec<f64> = store.get("ab.w").unwrap().as_tensor().to_vec1().unwrap();
        assert!(ab.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        store.builder(&mut rng).normal("w", &[2], 1.0).unwrap();
        let mut bad = HashMap::new();
        bad.insert("w".to_string(), Tensor::zeros(3, DTYPE, &DEVICE).unwrap());
        assert!(store.load_tensors(&bad).is_err());
    }
}
