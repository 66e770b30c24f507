//! Parameter storage, the handful of layers the model needs, and AdamW.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Shape, Tensor, Var, D};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{key_of, stream_rng, Stream};

pub fn cpu() -> Device {
    Device::Cpu
}

/// Named trainable variables. Initial values depend only on the store seed
/// and the variable name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            vars: BTreeMap::new(),
        }
    }

    fn insert(&mut self, name: &str, data: Vec<f32>, shape: Shape) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Contract(format!("parameter `{name}` defined twice")));
        }
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &cpu())?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    /// `U(-bound, bound)` initialization.
    pub fn uniform<S: Into<Shape>>(&mut self, name: &str, shape: S, bound: f32) -> Result<Tensor> {
        let shape = shape.into();
        let mut rng = stream_rng(self.seed, Stream::Init, &[key_of(name)]);
        let data = (0..shape.elem_count())
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.insert(name, data, shape)
    }

    pub fn constant<S: Into<Shape>>(&mut self, name: &str, shape: S, value: f32) -> Result<Tensor> {
        let shape = shape.into();
        self.insert(name, vec![value; shape.elem_count()], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Overwrites a variable in place; layers holding it see the new values.
    pub fn set(&self, name: &str, values: &[f32]) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        if values.len() != var.elem_count() {
            return Err(Error::Contract(format!(
                "parameter `{name}` has {} elements, got {}",
                var.elem_count(),
                values.len()
            )));
        }
        var.set(&Tensor::from_slice(values, var.shape(), &cpu())?)?;
        Ok(())
    }

    pub fn set_tensor(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        if value.dims() != var.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, checkpoint holds {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(DType::F32)?)?;
        Ok(())
    }

    pub fn zero_with_prefix(&self, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            if name.starts_with(prefix) {
                var.set(&var.zeros_like()?)?;
            }
        }
        Ok(())
    }

    pub fn values(&self, name: &str) -> Result<Vec<f32>> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        Ok(var.as_tensor().flatten_all()?.to_vec1()?)
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f32>>> {
        self.vars
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().flatten_all()?.to_vec1()?)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let bound = 1.0 / (input as f32).sqrt();
        Ok(Linear {
            weight: store.uniform(&format!("{name}.weight"), (output, input), bound)?,
            bias: store.uniform(&format!("{name}.bias"), output, bound)?,
        })
    }

    /// `x: [..., input]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zeros(usize),
    Replicate(usize),
}

/// 1-D convolution over `[B, C, L]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let bound = 1.0 / ((input * kernel) as f32).sqrt();
        Ok(Conv1d {
            weight: store.uniform(&format!("{name}.weight"), (output, input, kernel), bound)?,
            bias: store.uniform(&format!("{name}.bias"), output, bound)?,
            stride,
            padding,
        })
    }

    /// He-uniform weights and zero bias, for convolutions followed by ReLU.
    pub fn he(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let bound = (6.0 / (input * kernel) as f32).sqrt();
        Ok(Conv1d {
            weight: store.uniform(&format!("{name}.weight"), (output, input, kernel), bound)?,
            bias: store.constant(&format!("{name}.bias"), output, 0.0)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = match self.padding {
            // Explicit padding keeps candle's transposed-conv length arithmetic
            // from underflowing in backward on short inputs.
            Padding::Zeros(p) => x.pad_with_zeros(2, p, p)?.conv1d(&self.weight, 0, self.stride, 1, 1)?,
            Padding::Replicate(p) => x.pad_with_same(2, p, p)?.conv1d(&self.weight, 0, self.stride, 1, 1)?,
        };
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

/// Normalization over the last dimension, written with differentiable
/// primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.constant(&format!("{name}.gamma"), dim, 1.0)?,
            beta: store.constant(&format!("{name}.beta"), dim, 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Group normalization for `[B, C, T]`: statistics over each group of
/// `C / groups` channels and all positions, then a per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::InvalidConfig(format!(
                "{channels} channels cannot form {groups} groups"
            )));
        }
        Ok(GroupNorm {
            gamma: store.constant(&format!("{name}.gamma"), channels, 1.0)?,
            beta: store.constant(&format!("{name}.beta"), channels, 0.0)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, t) = x.dims3()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * t))?;
        let centered = g.broadcast_sub(&g.mean_keepdim(2)?)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?.reshape((b, c, t))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1))?)?)
    }
}

/// AdamW with decoupled weight decay and per-prefix learning-rate
/// multipliers.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// `(prefix, multiplier)`; the first matching prefix wins, default 1.
    pub lr_multipliers: Vec<(String, f64)>,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64, lr_multipliers: Vec<(String, f64)>) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            lr_multipliers,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn multiplier(&self, name: &str) -> f64 {
        self.lr_multipliers
            .iter()
            .find(|(p, _)| name.starts_with(p.as_str()))
            .map_or(1.0, |(_, m)| *m)
    }

    /// Applies one update to every variable that has a gradient and is not
    /// excluded by `frozen`.
    pub fn apply(
        &mut self,
        store: &ParamStore,
        grads: &GradStore,
        lr: f64,
        frozen: impl Fn(&str) -> bool,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in store.vars() {
            if frozen(name) {
                continue;
            }
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients carry their op graph; storing anything derived from
            // them would keep every step's forward pass alive.
            let g = &g.detach();
            let lr = lr * self.multiplier(name);
            let m = match self.first.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            let theta = var.as_tensor();
            let decayed = if var.rank() >= 2 {
                (theta * (1.0 - lr * self.weight_decay))?
            } else {
                theta.clone()
            };
            var.set(&(decayed - (update * lr)?)?.detach())?;
            self.first.insert(name.clone(), m.detach());
            self.second.insert(name.clone(), v.detach());
        }
        Ok(())
    }

    /// Moment tensors keyed `adam.m.<name>` / `adam.v.<name>`.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (n, t) in &self.first {
            out.insert(format!("adam.m.{n}"), t.clone());
        }
        for (n, t) in &self.second {
            out.insert(format!("adam.v.{n}"), t.clone());
        }
        out
    }

    pub fn load_state_tensor(&mut self, key: &str, value: Tensor) -> bool {
        if let Some(n) = key.strip_prefix("adam.m.") {
            self.first.insert(n.to_string(), value);
            true
        } else if let Some(n) = key.strip_prefix("adam.v.") {
            self.second.insert(n.to_string(), value);
            true
        } else {
            false
        }
    }
}

/// Host-side Bernoulli keep mask scaled by `1 / (1 - p)`.
pub fn dropout_mask<R: Rng + ?Sized>(rng: &mut R, len: usize, p: f64) -> Vec<f32> {
    let scale = (1.0 / (1.0 - p)) as f32;
    (0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
        .collect()
}
