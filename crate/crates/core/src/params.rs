//! Named parameter and buffer registry.
//!
//! Trainable weights are candle [`Var`]s keyed by a dotted path; running
//! statistics live in a separate buffer table so the optimizer never sees
//! them. Initial values are drawn from a ChaCha stream seeded by
//! `(store seed, parameter path)`, which makes initialization independent of
//! construction order and bit-reproducible across runs.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Initial value distributions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal { std: f64 },
    /// Normal truncated at two standard deviations.
    TruncNormal { std: f64 },
    /// `N(0, 2 / fan_out)` with `fan_out = k * k * out_channels / groups`.
    ConvFanOut { fan_out: usize },
    Uniform { bound: f64 },
}

/// A shared, mutable running-statistics tensor.
#[derive(Clone, Debug)]
pub struct Buffer(Arc<RwLock<Tensor>>);

impl Buffer {
    pub fn get(&self) -> Tensor {
        self.0.read().expect("buffer lock poisoned").clone()
    }

    pub fn set(&self, t: Tensor) {
        *self.0.write().expect("buffer lock poisoned") = t;
    }
}

#[derive(Default)]
struct Tables {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Buffer>,
}

#[derive(Clone)]
pub struct ParamStore {
    tables: Arc<Mutex<Tables>>,
    dtype: DType,
    device: Device,
    seed: u64,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.params().len())
            .field("dtype", &self.dtype)
            .field("seed", &self.seed)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            tables: Arc::new(Mutex::new(Tables::default())),
            dtype,
            device,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    /// Trainable parameters in path order.
    pub fn params(&self) -> Vec<(String, Var)> {
        let t = self.tables.lock().expect("param table poisoned");
        t.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn buffers(&self) -> Vec<(String, Buffer)> {
        let t = self.tables.lock().expect("param table poisoned");
        t.buffers.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn param(&self, name: &str) -> Option<Var> {
        self.tables.lock().expect("param table poisoned").params.get(name).cloned()
    }

    pub fn num_scalars(&self) -> usize {
        self.params().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Current values of every parameter and buffer, keyed by path.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, v) in self.params() {
            out.insert(format!("param/{k}"), v.as_tensor().detach());
        }
        for (k, b) in self.buffers() {
            out.insert(format!("buffer/{k}"), b.get());
        }
        out
    }

    /// Overwrites parameters and buffers from a snapshot produced by
    /// [`ParamStore::snapshot`]. Every registered entry must be present with a
    /// matching shape.
    pub fn restore(&self, snap: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, v) in self.params() {
            let key = format!("param/{k}");
            let t = snap
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            if t.dims() != v.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, model expects {:?}",
                    t.dims(),
                    v.dims()
                )));
            }
            v.set(&t.to_dtype(self.dtype)?)?;
        }
        for (k, b) in self.buffers() {
            let key = format!("buffer/{k}");
            let t = snap
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            if t.dims() != b.get().dims() {
                return Err(Error::Checkpoint(format!("tensor `{key}` has wrong shape")));
            }
            b.set(t.to_dtype(self.dtype)?);
        }
        Ok(())
    }

    fn rng_for(&self, path: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(path.as_bytes());
        let d = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&d);
        ChaCha8Rng::from_seed(seed)
    }

    fn sample(&self, path: &str, n: usize, init: Init) -> Vec<f64> {
        let mut rng = self.rng_for(path);
        let mut normal = |std: f64, trunc: bool| loop {
            let z: f64 = StandardNormal.sample(&mut rng);
            if !trunc || z.abs() <= 2.0 {
                break z * std;
            }
        };
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal { std } => (0..n).map(|_| normal(std, false)).collect(),
            Init::TruncNormal { std } => (0..n).map(|_| normal(std, true)).collect(),
            Init::ConvFanOut { fan_out } => {
                let std = (2.0 / fan_out.max(1) as f64).sqrt();
                (0..n).map(|_| normal(std, false)).collect()
            }
            Init::Uniform { bound } => {
                let mut rng = self.rng_for(path);
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        }
    }
}

/// A path prefix into a [`ParamStore`], in the spirit of `VarBuilder::pp`.
#[derive(Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope {
        Scope {
            store: self.store.clone(),
            prefix: self.path(name.as_ref()),
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param<S: Into<Shape>>(&self, name: &str, shape: S, init: Init) -> Result<Var> {
        let path = self.path(name);
        let shape = shape.into();
        let values = self.store.sample(&path, shape.elem_count(), init);
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let mut tables = self.store.tables.lock().expect("param table poisoned");
        if tables.params.contains_key(&path) || tables.buffers.contains_key(&path) {
            return Err(Error::invalid(format!("parameter `{path}` registered twice")));
        }
        tables.params.insert(path, var.clone());
        Ok(var)
    }

    pub fn buffer<S: Into<Shape>>(&self, name: &str, shape: S, init: Init) -> Result<Buffer> {
        let path = self.path(name);
        let shape = shape.into();
        let values = self.store.sample(&path, shape.elem_count(), init);
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let buf = Buffer(Arc::new(RwLock::new(t)));
        let mut tables = self.store.tables.lock().expect("param table poisoned");
        if tables.params.contains_key(&path) || tables.buffers.contains_key(&path) {
            return Err(Error::invalid(format!("buffer `{path}` registered twice")));
        }
        tables.buffers.insert(path, buf.clone());
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_on_seed_and_path_not_order() -> Result<()> {
        let a = ParamStore::new(3, DType::F32, Device::Cpu);
        let a1 = a.root().param("x.w", (4, 4), Init::TruncNormal { std: 0.02 })?;
        let a2 = a.root().param("y.w", (4, 4), Init::TruncNormal { std: 0.02 })?;
        let b = ParamStore::new(3, DType::F32, Device::Cpu);
        let b2 = b.root().pp("y").param("w", (4, 4), Init::TruncNormal { std: 0.02 })?;
        let b1 = b.root().pp("x").param("w", (4, 4), Init::TruncNormal { std: 0.02 })?;
        let v = |t: &Var| t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v(&a1), v(&b1));
        assert_eq!(v(&a2), v(&b2));
        assert_ne!(v(&a1), v(&a2));
        Ok(())
    }

    #[test]
    fn truncated_normal_stays_within_two_sigma() -> Result<()> {
        let s = ParamStore::new(1, DType::F64, Device::Cpu);
        let w = s.root().param("w", 4096, Init::TruncNormal { std: 0.02 })?;
        let v = w.to_vec1::<f64>()?;
        assert!(v.iter().all(|x| x.abs() <= 0.04));
        Ok(())
    }

    #[test]
    fn duplicate_names_are_rejected() -> Result<()> {
        let s = ParamStore::new(1, DType::F32, Device::Cpu);
        s.root().param("w", 2, Init::Zeros)?;
        assert!(s.root().param("w", 2, Init::Zeros).is_err());
        assert!(s.root().buffer("w", 2, Init::Zeros).is_err());
        Ok(())
    }
}
