//! Named, seeded parameter storage.
//!
//! The CPU backend cannot be seeded, so every tensor is initialized here from a
//! ChaCha stream in creation order. Same architecture + same seed = same parameters.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Result, Shape, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f32),
    /// `U(-b, b)`.
    Uniform(f32),
    /// Normal with the given std, truncated at two std.
    TruncNormal(f32),
}

#[derive(Debug, Clone)]
struct Entry {
    var: Var,
    trainable: bool,
}

pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn sample(&mut self, len: usize, init: Init) -> Vec<f32> {
        match init {
            Init::Zeros => vec![0.0; len],
            Init::Ones => vec![1.0; len],
            Init::Const(v) => vec![v; len],
            Init::Uniform(b) => (0..len).map(|_| self.rng.random_range(-b..=b)).collect(),
            Init::TruncNormal(std) => (0..len)
                .map(|_| loop {
                    // Box-Muller
                    let u1: f32 = self.rng.random_range(f32::EPSILON..1.0);
                    let u2: f32 = self.rng.random();
                    let z = (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos();
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
                .collect(),
        }
    }

    fn create(&mut self, name: &str, shape: Shape, init: Init, trainable: bool) -> Result<Tensor> {
        if self.entries.contains_key(name) {
            candle_core::bail!("parameter `{name}` defined twice");
        }
        let data = self.sample(shape.elem_count(), init);
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let tensor = var.as_tensor().clone();
        self.entries.insert(name.to_string(), Entry { var, trainable });
        Ok(tensor)
    }

    /// Trainable parameter.
    pub fn param<S: Into<Shape>>(&mut self, name: &str, shape: S, init: Init) -> Result<Tensor> {
        self.create(name, shape.into(), init, true)
    }

    /// Non-trainable state (e.g. running statistics) that is still checkpointed.
    pub fn buffer<S: Into<Shape>>(&mut self, name: &str, shape: S, init: Init) -> Result<Var> {
        self.create(name, shape.into(), init, false)?;
        Ok(self.entries[name].var.clone())
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.var.clone())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.var.elem_count())
            .sum()
    }

    /// Every stored tensor, trainable or not, by name.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), e.var.as_tensor()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Overwrites one tensor in place; shapes must match.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| candle_core::Error::Msg(format!("unknown parameter `{name}`")))?;
        if entry.var.dims() != value.dims() {
            candle_core::bail!(
                "shape mismatch for `{name}`: expected {:?}, got {:?}",
                entry.var.dims(),
                value.dims()
            );
        }
        entry.var.set(&value.to_dtype(DType::F32)?)
    }
}
