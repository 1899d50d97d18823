//! The video noise predictor: per-frame patch tokens pass through blocks of
//! sparse-causal self-attention, cross-attention to the conditioning
//! tokens, temporal attention across frames and an MLP.

use rand::Rng;

use super::latent::LATENT_CHANNELS;
use crate::error::{Error, Result};
use crate::numerics::nn::{self, Attended, ParamStore};
use crate::numerics::{Graph, Tensor, Var};
use crate::synthdata::scene::GRID;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    /// Token width.
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Side of the square latent patch that forms one token.
    pub patch: usize,
    /// Conditioning sequence length and width.
    pub cond_tokens: usize,
    pub cond_dim: usize,
    /// Standard deviation of the output projection at init; small values
    /// make the untrained predictor output close to zero.
    pub out_init_std: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            depth: 2,
            heads: 2,
            patch: 2,
            cond_tokens: 8,
            cond_dim: 32,
            out_init_std: 0.02,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("denoiser dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.dim % 4 != 0 {
            return bad(format!("denoiser dim {} must be divisible by 4", self.dim));
        }
        if self.patch == 0 || GRID % self.patch != 0 {
            return bad(format!("latent patch {} must divide {GRID}", self.patch));
        }
        if self.depth == 0 || self.cond_tokens == 0 || self.cond_dim == 0 {
            return bad("denoiser depth and conditioning extents must be positive".into());
        }
        if self.out_init_std < 0.0 {
            return bad("out_init_std must be non-negative".into());
        }
        Ok(())
    }

    /// Tokens per frame.
    pub fn tokens(&self) -> usize {
        (GRID / self.patch).pow(2)
    }

    /// Features per token.
    pub fn token_features(&self) -> usize {
        LATENT_CHANNELS * self.patch * self.patch
    }
}

/// Key frames of frame `i` under sparse-causal attention: the two previous
/// frames, clamped at 0.
pub fn sc_key_frames(i: usize) -> [usize; 2] {
    [i.saturating_sub(2), i.saturating_sub(1)]
}

/// Key frames of the first-frame-anchored variant: frame 0 and frame `i-1`.
pub fn anchored_key_frames(i: usize) -> [usize; 2] {
    [0, i.saturating_sub(1)]
}

/// Sparse-causal attention over `[B, F, S, d]` token grids. Queries come
/// from `xq` at frame `i`; keys and values come from `xkv` at frames
/// `i-2` and `i-1`. The returned output has the shape of `xq` and the
/// weights are `[B·F·H, S, 2S]`.
pub fn sc_attention(g: &mut Graph, store: &ParamStore, name: &str, xq: Var, xkv: Var, heads: usize) -> Result<Attended> {
    let [b, f, s, d] = *g.shape(xq) else {
        return Err(Error::InvalidShape {
            shape: g.shape(xq).to_vec(),
            reason: "sparse-causal attention expects [B, F, S, d]".into(),
        });
    };
    if g.shape(xkv)[..3] != [b, f, s] {
        return Err(Error::ShapeMismatch {
            op: "sc_attention",
            lhs: g.shape(xq).to_vec(),
            rhs: g.shape(xkv).to_vec(),
        });
    }
    let dk = g.shape(xkv)[3];
    let first: Vec<usize> = (0..f).map(|i| sc_key_frames(i)[0]).collect();
    let second: Vec<usize> = (0..f).map(|i| sc_key_frames(i)[1]).collect();
    let k0 = g.index_select(xkv, 1, &first)?;
    let k1 = g.index_select(xkv, 1, &second)?;
    let kv = g.concat(&[k0, k1], 2)?;
    let kv = g.reshape(kv, &[b * f, 2 * s, dk])?;
    let q = g.reshape(xq, &[b * f, s, d])?;
    let att = nn::attention(g, store, name, q, kv, heads)?;
    let out = g.reshape(att.out, &[b, f, s, d])?;
    Ok(Attended { out, weights: att.weights })
}

/// Whether a parameter belongs to a denoiser attention block (the set
/// that stays trainable during co-training).
pub fn is_attention_param(name: &str) -> bool {
    name.starts_with("den.") && [".attn1.", ".attn2.", ".attn_t."].iter().any(|k| name.contains(k))
}

#[derive(Clone, Debug)]
pub struct VideoDenoiser {
    pub cfg: DenoiserConfig,
}

impl VideoDenoiser {
    pub fn new(cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Register the `den.*` parameters.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = &self.cfg;
        let d = c.dim;
        nn::init_linear(store, rng, "den.in", c.token_features(), d);
        nn::init_linear(store, rng, "den.t1", d, d);
        nn::init_linear(store, rng, "den.t2", d, d);
        for i in 0..c.depth {
            let p = format!("den.b{i}");
            nn::init_layer_norm(store, &format!("{p}.ln1"), d);
            nn::init_attention(store, rng, &format!("{p}.attn1"), d, d, d);
            nn::init_layer_norm(store, &format!("{p}.ln2"), d);
            nn::init_attention(store, rng, &format!("{p}.attn2"), d, c.cond_dim, d);
            nn::init_layer_norm(store, &format!("{p}.ln3"), d);
            nn::init_attention(store, rng, &format!("{p}.attn_t"), d, d, d);
            nn::init_layer_norm(store, &format!("{p}.ln4"), d);
            nn::init_linear(store, rng, &format!("{p}.mlp1"), d, 2 * d);
            nn::init_linear(store, rng, &format!("{p}.mlp2"), 2 * d, d);
        }
        nn::init_layer_norm(store, "den.ln_f", d);
        let out = c.token_features();
        store.insert("den.out.w", Tensor::randn(&[d, out], c.out_init_std, rng));
        store.insert("den.out.b", Tensor::zeros(&[out]));
    }

    /// `[F·S, d]` table: spatial position in the first half of the
    /// features, frame index in the second.
    fn position_table(&self, frames: usize) -> Tensor {
        let (s, d) = (self.cfg.tokens(), self.cfg.dim);
        let sp = nn::sinusoidal(&(0..s).map(|i| i as f64).collect::<Vec<_>>(), d / 2);
        let fp = nn::sinusoidal(&(0..frames).map(|i| i as f64).collect::<Vec<_>>(), d / 2);
        Tensor::from_fn(&[frames * s, d], |k| {
            let (row, col) = (k / d, k % d);
            let (fi, si) = (row / s, row % s);
            if col < d / 2 {
                sp.data()[si * (d / 2) + col]
            } else {
                fp.data()[fi * (d / 2) + col - d / 2]
            }
        })
    }

    /// `[B, F, c, h, w]` latents to `[B, F, S, c·p·p]` patch tokens.
    pub fn tokenize(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let [b, f, c, h, w] = *g.shape(z) else {
            return Err(Error::InvalidShape {
                shape: g.shape(z).to_vec(),
                reason: "expected [B, F, c, h, w] latents".into(),
            });
        };
        if c != LATENT_CHANNELS || h != GRID || w != GRID {
            return Err(Error::InvalidShape {
                shape: g.shape(z).to_vec(),
                reason: format!("expected {LATENT_CHANNELS}×{GRID}×{GRID} latent frames"),
            });
        }
        let p = self.cfg.patch;
        let n = GRID / p;
        let x = g.reshape(z, &[b, f, c, n, p, n, p])?;
        let x = g.permute(x, &[0, 1, 3, 5, 2, 4, 6])?;
        g.reshape(x, &[b, f, n * n, c * p * p])
    }

    /// Inverse of [`Self::tokenize`].
    pub fn untokenize(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let [b, f, _, _] = *g.shape(x) else {
            return Err(Error::invalid("expected [B, F, S, features] tokens"));
        };
        let (p, c) = (self.cfg.patch, LATENT_CHANNELS);
        let n = GRID / p;
        let x = g.reshape(x, &[b, f, n, n, c, p, p])?;
        let x = g.permute(x, &[0, 1, 4, 2, 5, 3, 6])?;
        g.reshape(x, &[b, f, c, GRID, GRID])
    }

    /// Noise prediction for `[B, F, c, h, w]` latents at per-sample
    /// timesteps `t`. `cond` is `[B, L, d_c]`; `None` is the null
    /// (all-zero) condition.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var, t: &[usize], cond: Option<Var>) -> Result<Var> {
        let c = &self.cfg;
        let x = self.tokenize(g, z)?;
        let [b, f, s, _] = *g.shape(x) else { unreachable!() };
        if t.len() != b {
            return Err(Error::invalid(format!("{} timesteps for batch {b}", t.len())));
        }
        let d = c.dim;
        let cond = match cond {
            Some(v) => {
                if g.shape(v) != [b, c.cond_tokens, c.cond_dim] {
                    return Err(Error::ShapeMismatch {
                        op: "denoiser condition",
                        lhs: vec![b, c.cond_tokens, c.cond_dim],
                        rhs: g.shape(v).to_vec(),
                    });
                }
                v
            }
            None => g.constant(Tensor::zeros(&[b, c.cond_tokens, c.cond_dim])),
        };
        let cond = g.reshape(cond, &[b, 1, c.cond_tokens, c.cond_dim])?;
        let cond = g.index_select(cond, 1, &vec![0; f])?;
        let cond = g.reshape(cond, &[b * f, c.cond_tokens, c.cond_dim])?;

        let h = nn::linear(g, store, "den.in", x)?;
        let h = g.reshape(h, &[b, f * s, d])?;
        let pos = g.constant(self.position_table(f));
        let h = g.add_suffix(h, pos)?;
        let te = g.constant(nn::sinusoidal(&t.iter().map(|&v| v as f64).collect::<Vec<_>>(), d));
        let te = nn::linear(g, store, "den.t1", te)?;
        let te = g.gelu(te);
        let te = nn::linear(g, store, "den.t2", te)?;
        let te = g.reshape(te, &[b, 1, d])?;
        let te = g.index_select(te, 1, &vec![0; f * s])?;
        let h = g.add(h, te)?;
        let mut h = g.reshape(h, &[b, f, s, d])?;

        for i in 0..c.depth {
            let p = format!("den.b{i}");
            let a = nn::layer_norm(g, store, &format!("{p}.ln1"), h)?;
            let sc = sc_attention(g, store, &format!("{p}.attn1"), a, a, c.heads)?;
            h = g.add(h, sc.out)?;

            let a = nn::layer_norm(g, store, &format!("{p}.ln2"), h)?;
            let a = g.reshape(a, &[b * f, s, d])?;
            let x = nn::attention(g, store, &format!("{p}.attn2"), a, cond, c.heads)?.out;
            let x = g.reshape(x, &[b, f, s, d])?;
            h = g.add(h, x)?;

            let a = nn::layer_norm(g, store, &format!("{p}.ln3"), h)?;
            let a = g.permute(a, &[0, 2, 1, 3])?;
            let a = g.reshape(a, &[b * s, f, d])?;
            let x = nn::attention(g, store, &format!("{p}.attn_t"), a, a, c.heads)?.out;
            let x = g.reshape(x, &[b, s, f, d])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            h = g.add(h, x)?;

            let a = nn::layer_norm(g, store, &format!("{p}.ln4"), h)?;
            let a = nn::linear(g, store, &format!("{p}.mlp1"), a)?;
            let a = g.gelu(a);
            let a = nn::linear(g, store, &format!("{p}.mlp2"), a)?;
            h = g.add(h, a)?;
        }
        let h = nn::layer_norm(g, store, "den.ln_f", h)?;
        let out = nn::linear(g, store, "den.out", h)?;
        self.untokenize(g, out)
    }
}
