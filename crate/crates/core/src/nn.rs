//! Parameter storage, initialisation, the handful of layers shared by the
//! autoencoder and the denoiser, and an Adam optimiser with inspectable state.
//!
//! Activations are channels-last throughout: a linear layer contracts the last
//! axis, and convolutions take `(N, H, W, C)` inputs.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::seed;

/// Named, ordered collection of trainable tensors.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    /// When set, `get` hands out detached tensors, so no gradients flow to this store.
    frozen: bool,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self { vars: BTreeMap::new(), dtype, frozen: false }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidState(format!("duplicate parameter name {name}")));
        }
        let tensor = tensor.to_dtype(self.dtype)?;
        self.vars.insert(name.to_string(), Var::from_tensor(&tensor)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.vars
            .get(name)
            .map(|v| if self.frozen { v.as_tensor().detach() } else { v.as_tensor().clone() })
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    /// View sharing this store's storage whose tensors carry no gradient.
    pub fn frozen_view(&self) -> Self {
        Self { vars: self.vars.clone(), dtype: self.dtype, frozen: true }
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
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

    /// Fresh storage holding copies of every tensor; later updates to either
    /// store are invisible to the other.
    pub fn deep_copy(&self) -> Result<Self> {
        self.to_dtype(self.dtype)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = Self::new(dtype);
        for (name, var) in &self.vars {
            out.vars.insert(name.clone(), Var::from_tensor(&var.as_tensor().to_dtype(dtype)?.copy()?)?);
        }
        Ok(out)
    }

    /// Copy of the tensors under `prefix`, with the prefix kept.
    pub fn extract(&self, prefix: &str) -> Result<Self> {
        let mut out = Self::new(self.dtype);
        for (name, var) in self.vars.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.vars.insert(name.clone(), Var::from_tensor(&var.as_tensor().copy()?)?);
        }
        Ok(out)
    }

    /// Overwrite a tensor in place; the new value must keep its shape.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, var) in &self.vars {
            let vals = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidState(format!("parameter {name} has non-finite values")));
            }
        }
        Ok(())
    }
}

/// Seeded tensor initialiser.
pub struct Init {
    rng: ChaCha8Rng,
    dtype: DType,
}

impl Init {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { rng: seed::rng(seed), dtype }
    }

    pub fn normal(&mut self, dims: &[usize], std: f64) -> Result<Tensor> {
        let n = dims.iter().product();
        let v: Vec<f32> = seed::normal_vec(&mut self.rng, n).into_iter().map(|x| x * std as f32).collect();
        Ok(Tensor::from_vec(v, dims, &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    pub fn zeros(&self, dims: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(dims, self.dtype, &Device::Cpu)?)
    }

    pub fn ones(&self, dims: &[usize]) -> Result<Tensor> {
        Ok(Tensor::ones(dims, self.dtype, &Device::Cpu)?)
    }
}

/// Contract the last axis of `x` with `w: (in, out)` and add `b: (out)`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (rows, last) = match dims.split_last() {
        Some((last, lead)) => (lead.iter().product::<usize>(), *last),
        None => return invalid("linear input must have rank >= 1"),
    };
    let (w_in, w_out) = w.dims2()?;
    if last != w_in {
        return invalid(format!("linear expects last dim {w_in}, got {last}"));
    }
    let mut y = x.reshape((rows, w_in))?.matmul(w)?;
    if let Some(b) = b {
        y = y.broadcast_add(b)?;
    }
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = w_out;
    Ok(y.reshape(out_dims)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn init(store: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, d_out: usize, std: f64) -> Result<()> {
        store.insert(&format!("{name}.w"), init.normal(&[d_in, d_out], std)?)?;
        store.insert(&format!("{name}.b"), init.zeros(&[d_out])?)
    }

    pub fn init_zero(store: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Result<()> {
        store.insert(&format!("{name}.w"), init.zeros(&[d_in, d_out])?)?;
        store.insert(&format!("{name}.b"), init.zeros(&[d_out])?)
    }

    pub fn load(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            w: store.get(&format!("{name}.w"))?,
            b: store.get(&format!("{name}.b"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.w, Some(&self.b))
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize) -> Result<()> {
        store.insert(&format!("{name}.gamma"), init.ones(&[dim])?)?;
        store.insert(&format!("{name}.beta"), init.zeros(&[dim])?)
    }

    pub fn load(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            gamma: store.get(&format!("{name}.gamma"))?,
            beta: store.get(&format!("{name}.beta"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// 3×3 convolution, stride 1, zero padding 1, on `(N, H, W, C)`.
/// Weights are `(9·C_in, C_out)` with rows ordered (dy, dx, c).
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub w: Tensor,
    pub b: Tensor,
}

impl Conv3x3 {
    pub fn init(store: &mut ParamStore, init: &mut Init, name: &str, c_in: usize, c_out: usize) -> Result<()> {
        let std = (2.0 / (9 * c_in) as f64).sqrt();
        store.insert(&format!("{name}.w"), init.normal(&[9 * c_in, c_out], std)?)?;
        store.insert(&format!("{name}.b"), init.zeros(&[c_out])?)
    }

    pub fn load(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            w: store.get(&format!("{name}.w"))?,
            b: store.get(&format!("{name}.b"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w, c) = x.dims4()?;
        if self.w.dims()[0] != 9 * c {
            return invalid(format!("conv expects {} input channels, got {c}", self.w.dims()[0] / 9));
        }
        let padded = x.pad_with_zeros(1, 1, 1)?.pad_with_zeros(2, 1, 1)?;
        if c < 8 {
            // Few channels: a single im2col matmul.
            let mut taps = Vec::with_capacity(9);
            for dy in 0..3 {
                for dx in 0..3 {
                    taps.push(padded.narrow(1, dy, h)?.narrow(2, dx, w)?);
                }
            }
            return linear(&Tensor::cat(&taps, 3)?, &self.w, Some(&self.b));
        }
        let mut acc: Option<Tensor> = None;
        for dy in 0..3 {
            for dx in 0..3 {
                let k = dy * 3 + dx;
                let tap = padded.narrow(1, dy, h)?.narrow(2, dx, w)?;
                let y = linear(&tap, &self.w.narrow(0, k * c, c)?, None)?;
                acc = Some(match acc {
                    Some(a) => (a + y)?,
                    None => y,
                });
            }
        }
        Ok(acc.expect("nine taps").broadcast_add(&self.b)?)
    }
}

/// 2×2 stride-2 convolution on `(N, H, W, C)`: space-to-depth then a linear map
/// from `4·C_in` (ordered dy, dx, c) to `C_out`.
#[derive(Debug, Clone)]
pub struct Down2x2 {
    pub w: Tensor,
    pub b: Tensor,
}

impl Down2x2 {
    pub fn init(store: &mut ParamStore, init: &mut Init, name: &str, c_in: usize, c_out: usize) -> Result<()> {
        let std = (2.0 / (4 * c_in) as f64).sqrt();
        store.insert(&format!("{name}.w"), init.normal(&[4 * c_in, c_out], std)?)?;
        store.insert(&format!("{name}.b"), init.zeros(&[c_out])?)
    }

    pub fn load(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            w: store.get(&format!("{name}.w"))?,
            b: store.get(&format!("{name}.b"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, h, w, c) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return invalid(format!("stride-2 conv needs even H, W; got {h}x{w}"));
        }
        let x = x
            .reshape((n, h / 2, 2, w / 2, 2, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((n, h / 2, w / 2, 4 * c))?;
        linear(&x, &self.w, Some(&self.b))
    }
}

/// Learned 2× upsampling on `(N, H, W, C)`: a linear map to `4·C_out`
/// (ordered dy, dx, c) followed by depth-to-space.
#[derive(Debug, Clone)]
pub struct Up2x2 {
    pub w: Tensor,
    pub b: Tensor,
}

impl Up2x2 {
    pub fn init(store: &mut ParamStore, init: &mut Init, name: &str, c_in: usize, c_out: usize) -> Result<()> {
        let std = (2.0 / c_in as f64).sqrt();
        store.insert(&format!("{name}.w"), init.normal(&[c_in, 4 * c_out], std)?)?;
        store.insert(&format!("{name}.b"), init.zeros(&[4 * c_out])?)
    }

    pub fn load(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            w: store.get(&format!("{name}.w"))?,
            b: store.get(&format!("{name}.b"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, h, w, _) = x.dims4()?;
        let c = self.b.dims()[0] / 4;
        Ok(linear(x, &self.w, Some(&self.b))?
            .reshape((n, h, w, 2, 2, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((n, 2 * h, 2 * w, c))?)
    }
}

/// Tanh-approximated GELU composed from primitive ops, so its gradient is
/// the exact derivative of the forward expression.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = ((x + (x.sqr()? * x)?.affine(0.044715, 0.0)?)? * c)?;
    Ok(((inner.tanh()? + 1.0)? * x)?.affine(0.5, 0.0)?)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    // Shifting by a constant leaves softmax unchanged, so the max needs no gradient.
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
    /// Linear warmup length in steps.
    pub warmup: usize,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            warmup: 0,
        }
    }
}

/// Adam with bias correction. Moments are keyed by parameter name so the
/// state can be checkpointed and restored exactly.
#[derive(Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn lr_now(&self) -> f64 {
        let w = self.config.warmup as f64;
        if w > 0.0 && (self.step as f64) < w {
            self.config.lr * self.step as f64 / w
        } else {
            self.config.lr
        }
    }

    /// Apply one update to every parameter of `store` that has a gradient.
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        let mut present = Vec::new();
        for (name, var) in store.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                // Gradients carry the forward graph; detach so moments do not pin it.
                let g = g.detach();
                sq += scalar_f64(&g.sqr()?.sum_all()?)?;
                present.push((name, var, g));
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::InvalidState("non-finite gradient norm".into()));
        }
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let lr = self.lr_now();
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (name, var, g) in present {
            let g = (g * scale)?;
            let m_prev = match self.m.get(name) {
                Some(m) => m.clone(),
                None => g.zeros_like()?,
            };
            let v_prev = match self.v.get(name) {
                Some(v) => v.clone(),
                None => g.zeros_like()?,
            };
            let m = ((m_prev * b1)? + (&g * (1.0 - b1))?)?.detach();
            let v = ((v_prev * b2)? + (g.sqr()? * (1.0 - b2))?)?.detach();
            let denom = ((&v / bc2)?.sqrt()? + self.config.eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(norm)
    }

    /// Moments as named tensors (`m/<param>`, `v/<param>`).
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (k, t) in &self.m {
            out.push((format!("m/{k}"), t.clone()));
        }
        for (k, t) in &self.v {
            out.push((format!("v/{k}"), t.clone()));
        }
        out
    }

    pub fn restore(config: AdamConfig, step: u64, state: Vec<(String, Tensor)>) -> Result<Self> {
        let mut adam = Self::new(config);
        adam.step = step;
        for (k, t) in state {
            if let Some(name) = k.strip_prefix("m/") {
                adam.m.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix("v/") {
                adam.v.insert(name.to_string(), t);
            } else {
                return Err(Error::Format(format!("unexpected optimiser tensor {k}")));
            }
        }
        Ok(adam)
    }
}
