//! Parameter storage and the handful of layers every network here is built from.
//!
//! Parameters live in a [`ParamStore`] keyed by slash-separated paths such as
//! `llformer/dt/enc0/dm/q/pw/weight`. Initialization draws from a seeded
//! ChaCha stream in construction order, so two stores built from the same
//! seed and config hold bit-identical weights.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self { vars: BTreeMap::new(), dtype, device: Device::Cpu, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Wraps already materialized tensors (e.g. from a checkpoint). Later
    /// lookups of these names return the stored values instead of initializing.
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>, dtype: DType, seed: u64) -> Result<Self> {
        let mut store = Self::new(dtype, seed);
        for (name, t) in tensors {
            let var = Var::from_tensor(&t.to_dtype(dtype)?)?;
            store.vars.insert(name, var);
        }
        Ok(store)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Builder<'_> {
        Builder { store: self, prefix: String::new() }
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Variables whose path starts with `prefix/`, in name order.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        let want = format!("{prefix}/");
        self.vars.iter().filter(|(k, _)| k.starts_with(&want)).map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn all_vars(&self) -> Vec<(String, Var)> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Snapshot of every parameter as plain tensors.
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars.iter().map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?))).collect()
    }

    /// Drops every parameter whose path does not start with one of `prefixes`.
    pub fn retain_prefixes(&mut self, prefixes: &[&str]) {
        self.vars.retain(|k, _| prefixes.iter().any(|p| k.starts_with(&format!("{p}/"))));
    }

    /// Overwrites every parameter at or under `path` with zeros.
    pub fn zero(&self, path: &str) -> Result<usize> {
        let under = format!("{path}/");
        let mut n = 0;
        for (k, v) in &self.vars {
            if k == path || k.starts_with(&under) {
                v.set(&v.as_tensor().zeros_like()?)?;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::InvalidInput(format!("no parameters under {path}")));
        }
        Ok(n)
    }

    /// Overwrites one parameter with `values` (row-major).
    pub fn assign(&self, name: &str, values: &[f64]) -> Result<()> {
        let v = self.vars.get(name).ok_or_else(|| Error::InvalidInput(format!("no parameter named {name}")))?;
        let t = Tensor::from_slice(values, v.shape(), &self.device)?.to_dtype(self.dtype)?;
        v.set(&t)?;
        Ok(())
    }

    fn sample(&mut self, n: usize, init: Init) -> Vec<f64> {
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z * std
                })
                .collect(),
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..=b)).collect(),
        }
    }

    fn get_or_init(&mut self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(&name) {
            if v.dims() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, model expects {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n = shape.iter().product();
        let data = self.sample(n, init);
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }
}

/// Scoped view into a [`ParamStore`] used while constructing modules.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Builder<'_> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}/{}", self.prefix, name.as_ref())
        };
        Builder { store: self.store, prefix }
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}/{}", self.prefix, name) };
        self.store.get_or_init(full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &mut Builder, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = b.var("weight", &[d_out, d_in], Init::Uniform(bound))?;
        let bias = if bias { Some(b.var("bias", &[d_out], Init::Uniform(bound))?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn with_init(b: &mut Builder, d_in: usize, d_out: usize, w: Init, bias: Option<Init>) -> Result<Self> {
        let weight = b.var("weight", &[d_out, d_in], w)?;
        let bias = match bias {
            Some(init) => Some(b.var("bias", &[d_out], init)?),
            None => None,
        };
        Ok(Self { weight, bias })
    }

    /// Applies the map over the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = match x.rank() {
            2 => x.matmul(&self.weight.t()?)?,
            _ => x.broadcast_matmul(&self.weight.t()?)?,
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Dense `k×k` convolution over NCHW input.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, c_in: usize, c_out: usize, k: usize, stride: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let weight = b.var("weight", &[c_out, c_in, k, k], Init::Uniform(bound))?;
        let bias = if bias { Some(b.var("bias", &[c_out], Init::Uniform(bound))?) } else { None };
        Ok(Self { weight, bias, stride, padding: k / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }
}

/// Pointwise (1×1) convolution, bias-free.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub weight: Tensor,
}

impl Conv1x1 {
    pub fn new(b: &mut Builder, c_in: usize, c_out: usize) -> Result<Self> {
        let bound = 1.0 / (c_in as f64).sqrt();
        let weight = b.var("weight", &[c_out, c_in], Init::Uniform(bound))?;
        Ok(Self { weight })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv1x1(x, &self.weight)
    }
}

pub fn conv1x1(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (co, ci) = weight.dims2()?;
    if ci != c {
        return Err(Error::shape("conv1x1", format!("{ci} input channels"), c));
    }
    let y = weight.broadcast_matmul(&x.reshape((b, c, h * w))?)?;
    Ok(y.reshape((b, co, h, w))?)
}

/// Depthwise 3×3 convolution with zero padding, bias-free.
#[derive(Debug, Clone)]
pub struct DepthwiseConv3x3 {
    /// Shape `(channels, 3, 3)`.
    pub weight: Tensor,
}

impl DepthwiseConv3x3 {
    pub fn new(b: &mut Builder, c: usize) -> Result<Self> {
        let weight = b.var("weight", &[c, 3, 3], Init::Uniform(1.0 / 3.0))?;
        Ok(Self { weight })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        depthwise3x3(x, &self.weight)
    }
}

/// Sum of nine shifted, per-channel-scaled copies of the padded input.
pub use crate::kernels::{depthwise3x3, gelu};

/// Layer normalization over the last dimension with optional affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, d: usize) -> Result<Self> {
        Ok(Self {
            weight: b.var("weight", &[d], Init::Const(1.0))?,
            bias: b.var("bias", &[d], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = layer_norm_last(x, self.eps)?;
        Ok(y.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Two-layer GELU perceptron used inside transformer blocks.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder, d: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut b.pp("fc1"), d, hidden, true)?,
            fc2: Linear::new(&mut b.pp("fc2"), hidden, d, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn layer_norm_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    crate::kernels::normalize_axis(x, x.rank() - 1, eps)
}

/// Layer normalization across channels at every spatial site of an NCHW map.
pub fn layer_norm_channels(x: &Tensor, eps: f64) -> Result<Tensor> {
    crate::kernels::normalize_axis(x, 1, eps)
}

/// Nearest-neighbour upsampling of an NCHW map by an integer factor, built
/// from a broadcast so that its gradient accumulates with other uses of `x`
/// (candle's `upsample_nearest2d` backward overwrites them).
pub fn upsample_nearest(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, c, h0, w0) = x.dims4()?;
    if h % h0 != 0 || w % w0 != 0 || h / h0 != w / w0 {
        return Err(Error::shape(
            "upsample_nearest",
            format!("uniform integer factor of {h0}x{w0}"),
            format!("{h}x{w}"),
        ));
    }
    let s = h / h0;
    Ok(x.reshape((b, c, h0, 1, w0, 1))?.broadcast_as((b, c, h0, s, w0, s))?.reshape((b, c, h, w))?)
}

pub fn l2_normalize_last(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-24)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Standard multi-head scaled dot-product attention over `(B, N, D)` tokens.
/// Returns the merged output `(B, Nq, D)` and the attention weights
/// `(B, heads, Nq, Nk)`.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    bias: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (b, nq, d) = q.dims3()?;
    let (_, nk, dk) = k.dims3()?;
    if dk != d || d % heads != 0 {
        return Err(Error::shape(
            "attention",
            format!("dim divisible by {heads} heads, equal across q/k"),
            format!("q {d}, k {dk}"),
        ));
    }
    let dh = d / heads;
    let split =
        |t: &Tensor, n: usize| -> Result<Tensor> { Ok(t.reshape((b, n, heads, dh))?.transpose(1, 2)?.contiguous()?) };
    let (qh, kh, vh) = (split(q, nq)?, split(k, nk)?, split(v, nk)?);
    let mut logits = (qh.matmul(&kh.t()?)? / (dh as f64).sqrt())?;
    if let Some(bias) = bias {
        logits = logits.broadcast_add(bias)?;
    }
    let attn = softmax_last(&logits)?;
    let out = attn.matmul(&vh)?;
    let merged = out.transpose(1, 2)?.contiguous()?.reshape((b, nq, d))?;
    Ok((merged, attn))
}

pub fn sinusoidal_embedding(t: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = vec![0f64; dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half.max(1) as f64).exp();
        v[i] = (t as f64 * freq).sin();
        v[half + i] = (t as f64 * freq).cos();
    }
    Ok(Tensor::from_vec(v, dim, device)?.to_dtype(dtype)?)
}
