//! Parameter storage and the differentiable layers the model is assembled from.

use engine::{GradientMap, Graph, Padding, Scalar, Tensor, Var};
use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

const LN_EPS: f64 = 1e-5;

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { params: IndexMap::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(CoreError::Config(format!("parameter `{name}` registered twice")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| CoreError::MissingParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params.get_mut(name).ok_or_else(|| CoreError::MissingParam(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn zeros_like(&self) -> Self {
        Self { params: self.params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect() }
    }

    /// Same names and shapes in the same order.
    pub fn same_layout<U: Scalar>(&self, other: &ParamStore<U>) -> bool {
        self.len() == other.len() && self.iter().zip(other.iter()).all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }
}

/// Parameters placed on a graph as leaves.
pub struct Bound<'g, T: Scalar> {
    graph: &'g Graph<T>,
    vars: IndexMap<String, Var<'g, T>>,
}

impl<'g, T: Scalar> Bound<'g, T> {
    /// Trainable leaves receive gradients; otherwise they are constants.
    pub fn new(graph: &'g Graph<T>, store: &ParamStore<T>, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(k, v)| {
                let var = if trainable { graph.param(v.clone()) } else { graph.constant(v.clone()) };
                (k.to_string(), var)
            })
            .collect();
        Self { graph, vars }
    }

    /// Binds existing graph variables under the store's names, in order.
    pub fn from_vars(graph: &'g Graph<T>, store: &ParamStore<T>, vars: &[Var<'g, T>]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(CoreError::Shape(format!("{} variables for {} parameters", vars.len(), store.len())));
        }
        let mut out = IndexMap::new();
        for ((name, t), v) in store.iter().zip(vars) {
            if v.shape() != t.shape() {
                return Err(CoreError::Shape(format!("`{name}`: variable {:?} vs parameter {:?}", v.shape(), t.shape())));
            }
            out.insert(name.to_string(), *v);
        }
        Ok(Self { graph, vars: out })
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.vars.get(name).copied().ok_or_else(|| CoreError::MissingParam(name.into()))
    }

    /// Gradient for every parameter; unreachable ones are zero.
    pub fn gradients(&self, grads: &GradientMap<T>) -> ParamStore<T> {
        let params = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))))
            .collect();
        ParamStore { params }
    }
}

fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
}

fn check_width<T: Scalar>(op: &str, x: &Var<'_, T>, rank: usize, width: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != rank || s[rank - 1] != width {
        return Err(CoreError::Shape(format!("{op}: expected rank-{rank} input with last dimension {width}, got {s:?}")));
    }
    Ok(())
}

/// `y = x W + b` with `W: [din, dout]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize, bias: bool) -> Self {
        Self { name: name.into(), din, dout, bias }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let bound = (6.0 / (self.din + self.dout) as f64).sqrt();
        store.insert(format!("{}.w", self.name), uniform(rng, &[self.din, self.dout], bound))?;
        if self.bias {
            store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.dout]))?;
        }
        Ok(())
    }

    /// `x`: `[.., N, din]`.
    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        if s.is_empty() || s[s.len() - 1] != self.din {
            return Err(CoreError::Shape(format!("{}: expected last dimension {}, got {s:?}", self.name, self.din)));
        }
        let y = x.matmul(p.get(&format!("{}.w", self.name))?)?;
        if self.bias {
            Ok(y.add(p.get(&format!("{}.b", self.name))?)?)
        } else {
            Ok(y)
        }
    }

    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.din * self.dout) as u64
    }
}

/// Layer normalisation over the last axis with learned scale and offset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.insert(format!("{}.g", self.name), Tensor::ones(&[self.dim]))?;
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.dim]))
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = x.layer_norm(LN_EPS)?.mul(p.get(&format!("{}.g", self.name))?)?;
        Ok(y.add(p.get(&format!("{}.b", self.name))?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply<'g, T: Scalar>(self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::Tanh => x.tanh()?,
        })
    }
}

/// Affine–activation stack whose last layer is linear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `widths = [din, hidden.., dout]`.
    pub fn new(name: &str, widths: &[usize], activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(CoreError::Config(format!("{name}: MLP needs at least input and output widths")));
        }
        let layers = widths.windows(2).enumerate().map(|(i, w)| Linear::new(format!("{name}.{i}"), w[0], w[1], true)).collect();
        Ok(Self { layers, activation })
    }

    pub fn din(&self) -> usize {
        self.layers[0].din
    }

    pub fn dout(&self) -> usize {
        self.layers[self.layers.len() - 1].dout
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init(store, rng))
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, mut x: Var<'g, T>) -> Result<Var<'g, T>> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(p, x)?;
            if i < last {
                x = self.activation.apply(x)?;
            }
        }
        Ok(x)
    }

    pub fn macs(&self, rows: usize) -> u64 {
        self.layers.iter().map(|l| l.macs(rows)).sum()
    }
}

/// Channel-pair angular frequencies `ω_k = 100^(−k/(n−1))`, `k < n`.
pub fn geometric_frequencies(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|k| 100f64.powf(-(k as f64) / (n - 1) as f64)).collect()
}

/// Rotary tables for width `d` (`d % 4 == 0`): channels `(2k, 2k+1)` turn by
/// `ω_k·u` for `k < d/4` and by `ω_{k−d/4}·v` above.
#[derive(Debug, Clone)]
pub struct RopeTables<T: Scalar> {
    pub cos: Tensor<T>,
    pub sin: Tensor<T>,
    /// Signed permutation with `(x P)[2k] = −x[2k+1]`, `(x P)[2k+1] = x[2k]`.
    pub rotate_half: Tensor<T>,
}

impl<T: Scalar> RopeTables<T> {
    pub fn new(coords: &[[f64; 2]], d: usize) -> Result<Self> {
        if d == 0 || !d.is_multiple_of(4) {
            return Err(CoreError::Config(format!("rotary width {d} is not divisible by 4")));
        }
        let n = d / 4;
        let freqs = geometric_frequencies(n);
        let t = coords.len();
        let mut cos = vec![T::zero(); t * d];
        let mut sin = vec![T::zero(); t * d];
        for (i, c) in coords.iter().enumerate() {
            for pair in 0..d / 2 {
                let angle = if pair < n { freqs[pair] * c[0] } else { freqs[pair - n] * c[1] };
                for ch in [2 * pair, 2 * pair + 1] {
                    cos[i * d + ch] = T::from_f64_lossy(angle.cos());
                    sin[i * d + ch] = T::from_f64_lossy(angle.sin());
                }
            }
        }
        let mut p = vec![T::zero(); d * d];
        for k in 0..d / 2 {
            p[(2 * k + 1) * d + 2 * k] = T::from_f64_lossy(-1.0);
            p[2 * k * d + 2 * k + 1] = T::one();
        }
        Ok(Self {
            cos: Tensor::new(vec![t, d], cos)?,
            sin: Tensor::new(vec![t, d], sin)?,
            rotate_half: Tensor::new(vec![d, d], p)?,
        })
    }

    pub fn apply<'g>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = x.graph();
        let s = x.shape();
        if s.len() < 2 || s[s.len() - 2..] != *self.cos.shape() {
            return Err(CoreError::Shape(format!("rotary fusion: tokens {s:?} vs tables {:?}", self.cos.shape())));
        }
        let turned = x.matmul(g.constant(self.rotate_half.clone()))?;
        let a = x.mul(g.constant(self.cos.clone()))?;
        Ok(a.add(turned.mul(g.constant(self.sin.clone()))?)?)
    }
}

/// Rotary positional fusion of `tokens: [N, C]` with `coords: N × (u, v)` in grid units.
pub fn rope_fuse<'g, T: Scalar>(tokens: Var<'g, T>, coords: &[[f64; 2]]) -> Result<Var<'g, T>> {
    let s = tokens.shape();
    if s.len() != 2 || s[0] != coords.len() {
        return Err(CoreError::Shape(format!("rope_fuse: tokens {s:?} vs {} coordinates", coords.len())));
    }
    RopeTables::new(coords, s[1])?.apply(tokens)
}

/// Positions for rotary fusion inside attention: query and key coordinates.
#[derive(Debug, Clone, Copy)]
pub struct RopeCoords<'a> {
    pub query: &'a [[f64; 2]],
    pub key: &'a [[f64; 2]],
}

/// Pre-norm multi-head attention block with residual on the query path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attention {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
}

impl Attention {
    pub fn new(name: impl Into<String>, dim: usize, heads: usize) -> Result<Self> {
        let name = name.into();
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(CoreError::Config(format!("{name}: width {dim} not divisible by {heads} heads")));
        }
        Ok(Self { name, dim, heads })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn norm(&self) -> LayerNorm {
        LayerNorm { name: format!("{}.ln", self.name), dim: self.dim }
    }

    fn proj(&self, which: &str, bias: bool) -> Linear {
        Linear::new(format!("{}.{which}", self.name), self.dim, self.dim, bias)
    }

    /// The key projection has no bias: it would shift every logit of a row equally.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.norm().init(store)?;
        self.proj("q", true).init(store, rng)?;
        self.proj("k", false).init(store, rng)?;
        self.proj("v", true).init(store, rng)?;
        self.proj("o", true).init(store, rng)
    }

    fn split_heads<'g, T: Scalar>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let t = x.shape()[0];
        Ok(x.reshape(&[t, self.heads, self.head_dim()])?.permute(&[1, 0, 2])?)
    }

    /// Returns the block output `[Tq, C]` and attention weights `[heads, Tq, Tk]`.
    pub fn forward_with_weights<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        x_q: Var<'g, T>,
        x_kv: Var<'g, T>,
        rope: Option<RopeCoords<'_>>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        check_width(&self.name, &x_q, 2, self.dim)?;
        check_width(&self.name, &x_kv, 2, self.dim)?;
        let (tq, tk) = (x_q.shape()[0], x_kv.shape()[0]);
        let ln = self.norm();
        let a = ln.forward(p, x_q)?;
        let b = if x_q.id() == x_kv.id() { a } else { ln.forward(p, x_kv)? };
        let mut q = self.split_heads(self.proj("q", true).forward(p, a)?)?;
        let mut k = self.split_heads(self.proj("k", false).forward(p, b)?)?;
        let v = self.split_heads(self.proj("v", true).forward(p, b)?)?;
        if let Some(rc) = rope {
            if rc.query.len() != tq || rc.key.len() != tk {
                return Err(CoreError::Shape(format!(
                    "{}: rotary coordinates {}/{} for {tq}/{tk} tokens",
                    self.name,
                    rc.query.len(),
                    rc.key.len()
                )));
            }
            q = RopeTables::new(rc.query, self.head_dim())?.apply(q)?;
            k = RopeTables::new(rc.key, self.head_dim())?.apply(k)?;
        }
        let logits = q.matmul(k.permute(&[0, 2, 1])?)?.scale(1.0 / (self.head_dim() as f64).sqrt())?;
        let w = logits.softmax()?;
        let o = w.matmul(v)?.permute(&[1, 0, 2])?.reshape(&[tq, self.dim])?;
        let out = self.proj("o", true).forward(p, o)?.add(x_q)?;
        Ok((out, w))
    }

    /// `x + Attn(LN(x), LN(x))`.
    pub fn mhsa<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>, rope: Option<&[[f64; 2]]>) -> Result<Var<'g, T>> {
        let rc = rope.map(|c| RopeCoords { query: c, key: c });
        Ok(self.forward_with_weights(p, x, x, rc)?.0)
    }

    /// `x_q + Attn(LN(x_q), LN(x_kv))`.
    pub fn mhca<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        x_q: Var<'g, T>,
        x_kv: Var<'g, T>,
        rope: Option<RopeCoords<'_>>,
    ) -> Result<Var<'g, T>> {
        Ok(self.forward_with_weights(p, x_q, x_kv, rope)?.0)
    }

    /// Projections `4·Tq·C²`-style terms plus `2·Tq·Tk·C` for logits and mixing.
    pub fn macs(&self, tq: usize, tk: usize) -> u64 {
        let c = self.dim as u64;
        let (tq, tk) = (tq as u64, tk as u64);
        2 * tq * c * c + 2 * tk * c * c + 2 * tq * tk * c
    }
}

/// Convolution stack `3 → channels…` with the given strides and `same` padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoder {
    pub name: String,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub image_size: usize,
}

impl Encoder {
    pub fn new(name: &str, image_size: usize, channels: &[usize], strides: &[usize]) -> Result<Self> {
        if channels.len() != strides.len() + 1 || strides.is_empty() || strides.contains(&0) {
            return Err(CoreError::Config("encoder needs one stride per convolution".into()));
        }
        Ok(Self { name: name.into(), channels: channels.to_vec(), strides: strides.to_vec(), kernel: 3, image_size })
    }

    pub fn grid(&self) -> usize {
        self.strides.iter().fold(self.image_size, |s, &st| s.div_ceil(st))
    }

    pub fn out_channels(&self) -> usize {
        self.channels[self.channels.len() - 1]
    }

    /// He-uniform kernels, zero bias.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let k = self.kernel;
        for (i, w) in self.channels.windows(2).enumerate() {
            let bound = (6.0 / (w[0] * k * k) as f64).sqrt();
            store.insert(format!("{}.{i}.w", self.name), uniform(rng, &[w[1], w[0], k, k], bound))?;
            store.insert(format!("{}.{i}.b", self.name), Tensor::zeros(&[w[1], 1, 1]))?;
        }
        Ok(())
    }

    /// `image: [3, S, S]` → tokens `[H·W, C]` in row-major cell order.
    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, image: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = self.image_size;
        if image.shape() != [self.channels[0], s, s] {
            return Err(CoreError::Shape(format!("encoder expects [{}, {s}, {s}], got {:?}", self.channels[0], image.shape())));
        }
        let last = self.strides.len() - 1;
        let mut x = image;
        for (i, &stride) in self.strides.iter().enumerate() {
            x = x.conv2d(p.get(&format!("{}.{i}.w", self.name))?, stride, Padding::Same)?;
            let shape = x.shape();
            x = x.add(p.get(&format!("{}.{i}.b", self.name))?.broadcast_to(&shape)?)?;
            if i < last {
                x = x.relu()?;
            }
        }
        let shape = x.shape();
        Ok(x.reshape(&[shape[0], shape[1] * shape[2]])?.t()?)
    }

    pub fn macs(&self) -> u64 {
        let mut size = self.image_size;
        let mut total = 0u64;
        for (w, &st) in self.channels.windows(2).zip(&self.strides) {
            size = size.div_ceil(st);
            total += conv_macs(self.kernel, w[0], w[1], size, size);
        }
        total
    }
}

/// `k²·Cin·Cout·H·W` for an output map of `H × W`.
pub fn conv_macs(k: usize, cin: usize, cout: usize, h: usize, w: usize) -> u64 {
    (k * k * cin * cout * h * w) as u64
}

/// Fixed sinusoidal embedding of grid positions `(u, v)` into `c` channels.
pub fn grid_positional_embedding<T: Scalar>(coords: &[[f64; 2]], c: usize) -> Result<Tensor<T>> {
    if !c.is_multiple_of(4) {
        return Err(CoreError::Config(format!("positional width {c} is not divisible by 4")));
    }
    let n = c / 4;
    let freqs = geometric_frequencies(n);
    let mut out = Vec::with_capacity(coords.len() * c);
    for p in coords {
        for &x in p {
            for &w in &freqs {
                out.push(T::from_f64_lossy((w * x).sin()));
                out.push(T::from_f64_lossy((w * x).cos()));
            }
        }
    }
    Ok(Tensor::new(vec![coords.len(), c], out)?)
}

/// Fourier features `[sin(2^k π x_j), cos(2^k π x_j)]` for every column `j` and `k < n_freq`.
pub fn fourier_features<T: Scalar>(rows: &[Vec<f64>], n_freq: usize) -> Result<Tensor<T>> {
    let dim = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != dim) {
        return Err(CoreError::Shape("fourier features need equal-width rows".into()));
    }
    let mut out = Vec::with_capacity(rows.len() * dim * n_freq * 2);
    for r in rows {
        for &x in r {
            for k in 0..n_freq {
                let a = (1u64 << k) as f64 * std::f64::consts::PI * x;
                out.push(T::from_f64_lossy(a.sin()));
                out.push(T::from_f64_lossy(a.cos()));
            }
        }
    }
    Ok(Tensor::new(vec![rows.len(), dim * n_freq * 2], out)?)
}
