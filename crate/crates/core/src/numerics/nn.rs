//! Named parameters and the layer helpers every model is assembled from.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Ordered collection of named tensors with per-name freeze flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen.contains(name)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if trainable {
            self.frozen.remove(name);
        } else {
            self.frozen.insert(name.to_string());
        }
    }

    /// Freeze every parameter for which `keep_trainable` is false.
    pub fn freeze_except(&mut self, keep_trainable: impl Fn(&str) -> bool) {
        self.frozen = self
            .params
            .keys()
            .filter(|k| !keep_trainable(k))
            .cloned()
            .collect();
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    /// Copy every parameter whose name starts with `prefix` into `self`.
    pub fn absorb(&mut self, other: &ParamStore, prefix: &str) {
        for (k, v) in other.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.params.insert(k.to_string(), v.clone());
        }
    }

    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let t = self.get(name)?;
        Ok(g.param(name, t, self.is_trainable(name)))
    }
}

/// Register `{name}.w` `[din, dout]` (Xavier normal) and `{name}.b` (zeros).
pub fn init_linear<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, din: usize, dout: usize) {
    let std = (2.0 / (din + dout) as f64).sqrt();
    store.insert(format!("{name}.w"), Tensor::randn(&[din, dout], std, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[dout]));
}

pub fn init_zero_linear(store: &mut ParamStore, name: &str, din: usize, dout: usize) {
    store.insert(format!("{name}.w"), Tensor::zeros(&[din, dout]));
    store.insert(format!("{name}.b"), Tensor::zeros(&[dout]));
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.g"), Tensor::ones(&[dim]));
    store.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
}

pub fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = store.bind(g, &format!("{name}.w"))?;
    let b = store.bind(g, &format!("{name}.b"))?;
    g.linear(x, w, Some(b))
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let gamma = store.bind(g, &format!("{name}.g"))?;
    let beta = store.bind(g, &format!("{name}.b"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Register q/k/v/o projections for an attention block.
pub fn init_attention<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    dim_q: usize,
    dim_kv: usize,
    dim: usize,
) {
    init_linear(store, rng, &format!("{name}.q"), dim_q, dim);
    init_linear(store, rng, &format!("{name}.k"), dim_kv, dim);
    init_linear(store, rng, &format!("{name}.v"), dim_kv, dim);
    init_linear(store, rng, &format!("{name}.o"), dim, dim_q);
}

/// Output of a multi-head attention call; `weights` is `[B·H, Tq, Tk]`.
pub struct Attended {
    pub out: Var,
    pub weights: Var,
}

/// Multi-head scaled dot-product attention with learned projections.
/// `xq` is `[B, Tq, Dq]`, `xkv` is `[B, Tk, Dkv]`.
pub fn attention(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    xq: Var,
    xkv: Var,
    heads: usize,
) -> Result<Attended> {
    let q = linear(g, store, &format!("{name}.q"), xq)?;
    let k = linear(g, store, &format!("{name}.k"), xkv)?;
    let v = linear(g, store, &format!("{name}.v"), xkv)?;
    let (b, tq, d) = dims3(g, q)?;
    let tk = g.shape(k)[1];
    if d % heads != 0 {
        return Err(Error::invalid(format!("dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let q = split_heads(g, q, b, tq, heads, dh)?;
    let k = split_heads(g, k, b, tk, heads, dh)?;
    let v = split_heads(g, v, b, tk, heads, dh)?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = g.softmax(scores, 2)?;
    let ctx = g.bmm(weights, v, false)?;
    let ctx = g.reshape(ctx, &[b, heads, tq, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, tq, d])?;
    let out = linear(g, store, &format!("{name}.o"), ctx)?;
    Ok(Attended { out, weights })
}

fn dims3(g: &Graph, v: Var) -> Result<(usize, usize, usize)> {
    match *g.shape(v) {
        [a, b, c] => Ok((a, b, c)),
        ref s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected rank 3".into(),
        }),
    }
}

fn split_heads(g: &mut Graph, x: Var, b: usize, t: usize, heads: usize, dh: usize) -> Result<Var> {
    let x = g.reshape(x, &[b, t, heads, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, t, dh])
}

/// Inverted dropout: zero each element with probability `p` and scale the
/// survivors by `1/(1-p)`.
pub fn dropout<R: Rng + ?Sized>(g: &mut Graph, x: Var, p: f64, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
    }
    if p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = g.shape(x).to_vec();
    let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep });
    let m = g.constant(mask);
    g.mul(x, m)
}

/// Fixed sinusoidal encoding, `[positions.len(), dim]`.
pub fn sinusoidal(positions: &[f64], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = p * freq;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[positions.len(), dim], data).expect("consistent extents")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn repeated_bind_shares_one_leaf() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::ones(&[2]));
        let mut g = Graph::new();
        let a = store.bind(&mut g, "w").unwrap();
        let b = store.bind(&mut g, "w").unwrap();
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let l = g.sum_all(s);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.param("w").unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::ones(&[2]));
        store.set_trainable("w", false);
        let mut g = Graph::new();
        let w = store.bind(&mut g, "w").unwrap();
        let l = g.sum_all(w);
        let grads = g.backward(l).unwrap();
        assert!(grads.param("w").is_none());
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        init_attention(&mut store, &mut rng, "att", 6, 6, 6);
        init_layer_norm(&mut store, "ln", 6);
        let x = Tensor::randn(&[2, 3, 6], 1.0, &mut rng);
        let err = grad_check(
            |g, x| {
                let h = layer_norm(g, &store, "ln", x)?;
                let a = attention(g, &store, "att", h, h, 2)?;
                let y = g.gelu(a.out);
                let y = g.mul(y, y)?;
                Ok(g.mean_all(y))
            },
            &x,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn sinusoidal_is_bounded_and_distinct() {
        let pe = sinusoidal(&[0.0, 1.0, 2.0], 8);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(pe.row(1), pe.row(2));
    }
}
