//! Neural-network building blocks on top of the autodiff graph: a named
//! parameter store, shape-checked layer builders, and initializers.
//!
//! Layers are free functions that append ops to a [`Graph`] through a
//! [`Binder`], which resolves parameter names either from a [`ParamStore`]
//! (training, inference) or from externally created graph leaves (gradient
//! checking). Static shapes ride along in [`Tv`] so mismatches surface at
//! build time with the offending layer name.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Named weight tensors, ordered by name so sweeps are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "parameter `{name}` already exists"
            )));
        }
        self.map.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    /// Replace an existing tensor; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter `{name}`: cannot change shape {:?} -> {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of stored scalars.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut archive = Archive::new();
        for (name, tensor) in &self.map {
            archive.insert_tensor(name, tensor)?;
        }
        Ok(archive)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let mut store = ParamStore::new();
        for name in archive.names() {
            store.insert(name, archive.tensor::<T>(name)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ParamStore::from_archive(&Archive::load(path)?)
    }

    /// Hex digest over the serialized archive bytes; changes iff any
    /// name, shape, or value changes.
    pub fn checksum(&self) -> Result<String> {
        let mut bytes = Vec::new();
        self.to_archive()?.write_to(&mut bytes)?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// A graph variable with its statically known shape.
#[derive(Debug, Clone)]
pub struct Tv {
    pub var: Var,
    pub shape: Vec<usize>,
}

impl Tv {
    pub fn new(var: Var, shape: &[usize]) -> Self {
        Tv {
            var,
            shape: shape.to_vec(),
        }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }
}

/// Resolves parameter names to graph variables. Backed either by a
/// [`ParamStore`] (each parameter is registered in the graph on first use)
/// or by pre-created variables (for gradient checks, where the caller owns
/// the leaves).
pub struct Binder<'a, T: Scalar> {
    pub g: &'a mut Graph<T>,
    store: Option<&'a ParamStore<T>>,
    bound: HashMap<String, (Var, Vec<usize>)>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>) -> Self {
        Binder {
            g,
            store: Some(store),
            bound: HashMap::new(),
        }
    }

    /// Use externally created variables instead of a store.
    pub fn with_vars(
        g: &'a mut Graph<T>,
        vars: impl IntoIterator<Item = (String, Var, Vec<usize>)>,
    ) -> Self {
        Binder {
            g,
            store: None,
            bound: vars
                .into_iter()
                .map(|(name, var, shape)| (name, (var, shape)))
                .collect(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        Ok(self.fetch(name)?.0)
    }

    pub fn fetch(&mut self, name: &str) -> Result<(Var, Vec<usize>)> {
        if let Some(entry) = self.bound.get(name) {
            return Ok(entry.clone());
        }
        let store = self.store.ok_or_else(|| {
            Error::InvalidArgument(format!("parameter `{name}` was not provided"))
        })?;
        let tensor = store.get(name)?;
        let var = self.g.param(name, tensor);
        let entry = (var, tensor.shape().to_vec());
        self.bound.insert(name.to_string(), entry.clone());
        Ok(entry)
    }
}

fn rows_of(shape: &[usize]) -> usize {
    shape[..shape.len() - 1].iter().product()
}

/// `x @ W + b` where `W` is `{prefix}.w` of shape `(in, out)` and `b` is
/// `{prefix}.b` of shape `(out,)`. Any leading shape is kept.
pub fn linear<T: Scalar>(b: &mut Binder<T>, x: &Tv, prefix: &str) -> Result<Tv> {
    let (w, w_shape) = b.fetch(&format!("{prefix}.w"))?;
    let (bias, _) = b.fetch(&format!("{prefix}.b"))?;
    if w_shape.len() != 2 || w_shape[0] != x.last_dim() {
        return Err(Error::ShapeMismatch(format!(
            "linear `{prefix}`: input {:?} vs weight {:?}",
            x.shape, w_shape
        )));
    }
    let (in_dim, out_dim) = (w_shape[0], w_shape[1]);
    let rows = rows_of(&x.shape);
    let x2 = if x.rank() == 2 {
        x.var
    } else {
        b.g.reshape(x.var, &[rows, in_dim])
    };
    let y = b.g.matmul(x2, w);
    let y = b.g.add_broadcast(y, bias);
    let mut out_shape = x.shape.clone();
    *out_shape.last_mut().unwrap() = out_dim;
    let y = if x.rank() == 2 {
        y
    } else {
        b.g.reshape(y, &out_shape)
    };
    Ok(Tv::new(y, &out_shape))
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization over the last axis with `{prefix}.g` / `{prefix}.b`.
pub fn layer_norm<T: Scalar>(b: &mut Binder<T>, x: &Tv, prefix: &str) -> Result<Tv> {
    let (gamma, g_shape) = b.fetch(&format!("{prefix}.g"))?;
    let (beta, _) = b.fetch(&format!("{prefix}.b"))?;
    if g_shape != [x.last_dim()] {
        return Err(Error::ShapeMismatch(format!(
            "layer norm `{prefix}`: input {:?} vs gain {:?}",
            x.shape, g_shape
        )));
    }
    let y = b.g.layernorm(x.var, gamma, beta, LAYER_NORM_EPS);
    Ok(Tv::new(y, &x.shape))
}

/// Two-layer feed-forward with GELU: `{prefix}.expand`, `{prefix}.project`.
pub fn ffn<T: Scalar>(b: &mut Binder<T>, x: &Tv, prefix: &str) -> Result<Tv> {
    let h = linear(b, x, &format!("{prefix}.expand"))?;
    let h = Tv::new(b.g.gelu(h.var), &h.shape);
    linear(b, &h, &format!("{prefix}.project"))
}

/// Multi-head scaled-dot-product attention with separate query, key, and
/// value sources, all `(B, T, D)` with matching `B` and `D` (key and value
/// must share `T`). Parameters: `{prefix}.q/.k/.v/.out`, each a `(D, D)`
/// linear. Also returns the `(B*heads, T_q, T_kv)` attention weights so
/// callers can inspect them.
pub fn attention_qkv<T: Scalar>(
    b: &mut Binder<T>,
    q: &Tv,
    k: &Tv,
    v: &Tv,
    prefix: &str,
    heads: usize,
) -> Result<(Tv, Var)> {
    if q.rank() != 3 || k.rank() != 3 || v.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "attention `{prefix}`: inputs must be (B, T, D), got {:?}, {:?}, {:?}",
            q.shape, k.shape, v.shape
        )));
    }
    let (batch, t_q, dim) = (q.shape[0], q.shape[1], q.shape[2]);
    let t_kv = k.shape[1];
    if k.shape[0] != batch || k.shape[2] != dim || v.shape != [batch, t_kv, dim] {
        return Err(Error::ShapeMismatch(format!(
            "attention `{prefix}`: query {:?} vs key {:?} vs value {:?}",
            q.shape, k.shape, v.shape
        )));
    }
    if heads == 0 || dim % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "attention `{prefix}`: embed dim {dim} not divisible by {heads} heads"
        )));
    }
    let dk = dim / heads;

    let qp = linear(b, q, &format!("{prefix}.q"))?;
    let kp = linear(b, k, &format!("{prefix}.k"))?;
    let vp = linear(b, v, &format!("{prefix}.v"))?;

    // (B, T, D) -> (B*heads, T, dk)
    let mut split = |x: Var, t: usize| -> Var {
        let x = b.g.reshape(x, &[batch, t, heads, dk]);
        let x = b.g.transpose(x, 1, 2);
        b.g.reshape(x, &[batch * heads, t, dk])
    };
    let qh = split(qp.var, t_q);
    let kh = split(kp.var, t_kv);
    let vh = split(vp.var, t_kv);

    let kt = b.g.transpose(kh, 1, 2);
    let scores = b.g.matmul(qh, kt);
    let scores = b.g.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = b.g.softmax(scores);
    let ctx = b.g.matmul(weights, vh);

    // (B*heads, T_q, dk) -> (B, T_q, D)
    let ctx = b.g.reshape(ctx, &[batch, heads, t_q, dk]);
    let ctx = b.g.transpose(ctx, 1, 2);
    let ctx = b.g.reshape(ctx, &[batch, t_q, dim]);
    let out = linear(b, &Tv::new(ctx, &[batch, t_q, dim]), &format!("{prefix}.out"))?;
    Ok((out, weights))
}

/// Multi-head attention where keys and values share a source. Queries come
/// from `q`, keys and values from `kv`.
pub fn attention<T: Scalar>(
    b: &mut Binder<T>,
    q: &Tv,
    kv: &Tv,
    prefix: &str,
    heads: usize,
) -> Result<Tv> {
    Ok(attention_qkv(b, q, kv, kv, prefix, heads)?.0)
}

/// Pre-norm transformer encoder block: self-attention and feed-forward,
/// each behind layer norm with a residual connection.
/// Parameters: `{prefix}.ln1`, `{prefix}.attn.*`, `{prefix}.ln2`,
/// `{prefix}.ffn.*`.
pub fn encoder_block<T: Scalar>(
    b: &mut Binder<T>,
    x: &Tv,
    prefix: &str,
    heads: usize,
) -> Result<Tv> {
    let normed = layer_norm(b, x, &format!("{prefix}.ln1"))?;
    let attended = attention(b, &normed, &normed, &format!("{prefix}.attn"), heads)?;
    let x = Tv::new(b.g.add(x.var, attended.var), &x.shape);
    let normed = layer_norm(b, &x, &format!("{prefix}.ln2"))?;
    let fed = ffn(b, &normed, &format!("{prefix}.ffn"))?;
    Ok(Tv::new(b.g.add(x.var, fed.var), &x.shape))
}

/// Weight initialization scheme for [`init_linear`].
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
}

pub fn random_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], init: Init) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = match init {
        Init::Xavier => {
            // For matrices fan-in/out are the two dims; otherwise fall back
            // to treating the last dim as fan-out.
            let (fan_in, fan_out) = match shape {
                [r, c] => (*r, *c),
                _ => (n / shape.last().copied().unwrap_or(1).max(1), *shape.last().unwrap_or(&1)),
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n)
                .map(|_| T::from_f64(rng.gen_range(-limit..=limit)))
                .collect()
        }
        Init::Normal(std) => {
            use rand_distr::{Distribution, StandardNormal};
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    T::from_f64(z * std)
                })
                .collect()
        }
    };
    Tensor::from_vec(shape, data).expect("sized to shape")
}

/// Create `{prefix}.w` (in, out) and a zero `{prefix}.b` (out,).
pub fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    init: Init,
) -> Result<()> {
    store.insert(
        &format!("{prefix}.w"),
        random_tensor(rng, &[in_dim, out_dim], init),
    )?;
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[out_dim]))
}

/// Create `{prefix}.g` (ones) and `{prefix}.b` (zeros).
pub fn init_layer_norm<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dim: usize,
) -> Result<()> {
    store.insert(&format!("{prefix}.g"), Tensor::full(&[dim], T::ONE))?;
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[dim]))
}

pub fn init_attention<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dim: usize,
) -> Result<()> {
    for proj in ["q", "k", "v", "out"] {
        init_linear(store, rng, &format!("{prefix}.{proj}"), dim, dim, Init::Xavier)?;
    }
    Ok(())
}

pub fn init_ffn<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dim: usize,
    hidden: usize,
) -> Result<()> {
    init_linear(store, rng, &format!("{prefix}.expand"), dim, hidden, Init::Xavier)?;
    init_linear(store, rng, &format!("{prefix}.project"), hidden, dim, Init::Xavier)
}

pub fn init_encoder_block<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dim: usize,
    hidden: usize,
) -> Result<()> {
    init_layer_norm(store, &format!("{prefix}.ln1"), dim)?;
    init_attention(store, rng, &format!("{prefix}.attn"), dim)?;
    init_layer_norm(store, &format!("{prefix}.ln2"), dim)?;
    init_ffn(store, rng, &format!("{prefix}.ffn"), dim, hidden)
}
