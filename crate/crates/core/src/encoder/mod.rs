//! Progressive fMRI encoder: 1-D patch tokens, windowed spatiotemporal
//! attention and the pooled / unpooled projection heads.

pub mod mbm;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::nn::{self, ParamStore};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct PatchConfig {
    /// Voxels per token.
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub mask_ratio: f64,
    /// Rows `l` of the unpooled conditioning embedding.
    pub latent_tokens: usize,
    /// Width `d_c` of the unpooled conditioning embedding.
    pub cond_dim: usize,
    pub dropout: f64,
    /// Temporal attention sublayers; bypassed when the window is 1.
    pub temporal: bool,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            decoder_dim: 32,
            decoder_depth: 2,
            mask_ratio: 0.75,
            latent_tokens: 8,
            cond_dim: 32,
            dropout: 0.6,
            temporal: true,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.depth == 0 || self.heads == 0 {
            return bad("patch_size, depth and heads must be positive".into());
        }
        if self.embed_dim % self.heads != 0 || self.decoder_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} and decoder_dim {} must be divisible by heads {}",
                self.embed_dim, self.decoder_dim, self.heads
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio {} must be in (0, 1)", self.mask_ratio));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        if self.latent_tokens == 0 || self.cond_dim == 0 {
            return bad("latent_tokens and cond_dim must be positive".into());
        }
        Ok(())
    }
}

/// Token count for `voxels` voxels in patches of `patch_size`.
pub fn num_tokens(voxels: usize, patch_size: usize) -> Result<usize> {
    if voxels == 0 {
        return Err(Error::invalid("cannot patchify zero voxels"));
    }
    if patch_size == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    Ok(voxels.div_ceil(patch_size))
}

/// `[n, P, p]` patches back to `[n, V]` voxels, dropping the zero padding.
pub fn unpatchify(patches: &Tensor, voxels: usize) -> Result<Tensor> {
    let [n, pt, p] = *patches.shape() else {
        return Err(Error::InvalidShape {
            shape: patches.shape().to_vec(),
            reason: "patches must be [n, P, p]".into(),
        });
    };
    if pt * p < voxels {
        return Err(Error::invalid(format!("{pt} patches of {p} cannot hold {voxels} voxels")));
    }
    Ok(Tensor::from_fn(&[n, voxels], |i| patches.data()[(i / voxels) * pt * p + i % voxels]))
}

/// `[..., V]` voxels to `[..., P, p]` zero-padded patches.
pub fn patch_values(x: &Tensor, patch_size: usize) -> Result<Tensor> {
    let v = *x.shape().last().ok_or_else(|| Error::invalid("scalar input"))?;
    let pt = num_tokens(v, patch_size)?;
    let rows = x.numel() / v;
    let mut data = vec![0.0; rows * pt * patch_size];
    for r in 0..rows {
        data[r * pt * patch_size..r * pt * patch_size + v].copy_from_slice(&x.data()[r * v..(r + 1) * v]);
    }
    let mut shape = x.shape()[..x.rank() - 1].to_vec();
    shape.extend([pt, patch_size]);
    Tensor::new(&shape, data)
}

/// Token tensor `[n, w, P, b]` flowing through the encoder.
#[derive(Clone, Debug)]
pub struct TokenWindow {
    pub tokens: Var,
    pub n: usize,
    pub w: usize,
    pub p_tok: usize,
    pub b: usize,
    pub positions: Vec<usize>,
    pub frame_positions: Vec<usize>,
}

impl TokenWindow {
    pub fn with_tokens(&self, tokens: Var) -> Self {
        Self { tokens, ..self.clone() }
    }

    /// `[n·w, P, b]`: attention over tokens within each (sample, slot).
    pub fn spatial_view(&self, g: &mut Graph) -> Result<Var> {
        g.reshape(self.tokens, &[self.n * self.w, self.p_tok, self.b])
    }

    pub fn from_spatial(&self, g: &mut Graph, v: Var) -> Result<Self> {
        Ok(self.with_tokens(g.reshape(v, &[self.n, self.w, self.p_tok, self.b])?))
    }

    /// `[n·P, w, b]`: attention over window slots for each (sample, token).
    pub fn temporal_view(&self, g: &mut Graph) -> Result<Var> {
        let t = g.permute(self.tokens, &[0, 2, 1, 3])?;
        g.reshape(t, &[self.n * self.p_tok, self.w, self.b])
    }

    pub fn from_temporal(&self, g: &mut Graph, v: Var) -> Result<Self> {
        let t = g.reshape(v, &[self.n, self.p_tok, self.w, self.b])?;
        Ok(self.with_tokens(g.permute(t, &[0, 2, 1, 3])?))
    }
}

/// Pooled and unpooled encoder embeddings.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[n, b]`
    pub pooled: Var,
    /// `[n, l, d_c]`
    pub unpooled: Var,
}

/// Trunk output plus the spatial attention maps of every layer,
/// each `[n·w·heads, P, P]`.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub tokens: TokenWindow,
    pub spatial_attention: Vec<Var>,
}

/// Register a pre-norm transformer block (attention + MLP) under `prefix`.
pub(crate) fn init_block<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, dim: usize) {
    nn::init_layer_norm(store, &format!("{prefix}.ln1"), dim);
    nn::init_attention(store, rng, &format!("{prefix}.sa"), dim, dim, dim);
    init_mlp(store, rng, prefix, dim);
}

fn init_mlp<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, dim: usize) {
    nn::init_layer_norm(store, &format!("{prefix}.ln2"), dim);
    nn::init_linear(store, rng, &format!("{prefix}.mlp1"), dim, 2 * dim);
    nn::init_linear(store, rng, &format!("{prefix}.mlp2"), 2 * dim, dim);
}

/// Residual MLP sublayer on `[..., dim]`.
pub(crate) fn mlp(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = nn::layer_norm(g, store, &format!("{prefix}.ln2"), x)?;
    let h = nn::linear(g, store, &format!("{prefix}.mlp1"), h)?;
    let h = g.gelu(h);
    let h = nn::linear(g, store, &format!("{prefix}.mlp2"), h)?;
    g.add(x, h)
}

/// Pre-norm block on `[B, T, D]`; returns the output and attention weights.
pub(crate) fn block(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, heads: usize) -> Result<(Var, Var)> {
    let h = nn::layer_norm(g, store, &format!("{prefix}.ln1"), x)?;
    let a = nn::attention(g, store, &format!("{prefix}.sa"), h, h, heads)?;
    let x = g.add(x, a.out)?;
    Ok((mlp(g, store, prefix, x)?, a.weights))
}

/// Residual spatial attention over the `[n·w, P, b]` view.
pub fn spatial_attend(g: &mut Graph, store: &ParamStore, prefix: &str, x: &TokenWindow, heads: usize) -> Result<(TokenWindow, Var)> {
    let v = x.spatial_view(g)?;
    let h = nn::layer_norm(g, store, &format!("{prefix}.ln1"), v)?;
    let a = nn::attention(g, store, &format!("{prefix}.sa"), h, h, heads)?;
    let out = g.add(v, a.out)?;
    Ok((x.from_spatial(g, out)?, a.weights))
}

/// Residual temporal attention over the `[n·P, w, b]` view.
pub fn temporal_attend(g: &mut Graph, store: &ParamStore, prefix: &str, x: &TokenWindow, heads: usize) -> Result<(TokenWindow, Var)> {
    let v = x.temporal_view(g)?;
    let h = nn::layer_norm(g, store, &format!("{prefix}.lnt"), v)?;
    let a = nn::attention(g, store, &format!("{prefix}.ta"), h, h, heads)?;
    let out = g.add(v, a.out)?;
    Ok((x.from_temporal(g, out)?, a.weights))
}

/// Spatial then temporal attention, each with a residual connection.
/// Returns the attended window and the spatial and temporal weights.
pub fn spatiotemporal_attend(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: &TokenWindow,
    heads: usize,
) -> Result<(TokenWindow, Var, Var)> {
    let (x, ws) = spatial_attend(g, store, prefix, x, heads)?;
    let (x, wt) = temporal_attend(g, store, prefix, &x, heads)?;
    Ok((x, ws, wt))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FmriEncoder {
    pub cfg: PatchConfig,
    pub voxels: usize,
}

impl FmriEncoder {
    pub fn new(cfg: PatchConfig, voxels: usize) -> Result<Self> {
        cfg.validate()?;
        num_tokens(voxels, cfg.patch_size)?;
        Ok(Self { cfg, voxels })
    }

    pub fn tokens(&self) -> usize {
        self.voxels.div_ceil(self.cfg.patch_size)
    }

    /// Register every `enc.*` parameter. Temporal output projections start
    /// at zero, so a window-1 checkpoint extends to wider windows unchanged.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let (b, p) = (self.cfg.embed_dim, self.cfg.patch_size);
        nn::init_linear(store, rng, "enc.patch", p, b);
        for i in 0..self.cfg.depth {
            let pre = format!("enc.l{i}");
            nn::init_layer_norm(store, &format!("{pre}.ln1"), b);
            nn::init_attention(store, rng, &format!("{pre}.sa"), b, b, b);
            nn::init_layer_norm(store, &format!("{pre}.lnt"), b);
            nn::init_attention(store, rng, &format!("{pre}.ta"), b, b, b);
            nn::init_zero_linear(store, &format!("{pre}.ta.o"), b, b);
            init_mlp(store, rng, &pre, b);
        }
        nn::init_layer_norm(store, "enc.ln_f", b);
        nn::init_linear(store, rng, "enc.pool", b, b);
        nn::init_linear(store, rng, "enc.tokmix", self.tokens(), self.cfg.latent_tokens);
        nn::init_linear(store, rng, "enc.unpool", b, self.cfg.cond_dim);
    }

    /// Fixed position table `[w, P, b]`: token plus slot encodings.
    pub fn position_table(&self, w: usize) -> Tensor {
        let (pt, b) = (self.tokens(), self.cfg.embed_dim);
        let tok = nn::sinusoidal(&(0..pt).map(|i| i as f64).collect::<Vec<_>>(), b);
        let frame = nn::sinusoidal(&(0..w).map(|i| i as f64).collect::<Vec<_>>(), b);
        Tensor::from_fn(&[w, pt, b], |i| {
            let (s, rest) = (i / (pt * b), i % (pt * b));
            tok.data()[rest] + frame.data()[s * b + rest % b]
        })
    }

    /// `[n, w, V]` (or `[n, V]`, read as w = 1) voxels to embedded tokens.
    pub fn patchify(&self, g: &mut Graph, store: &ParamStore, fmri: Var) -> Result<TokenWindow> {
        let shape = g.shape(fmri).to_vec();
        let (n, w, v) = match shape[..] {
            [n, v] => (n, 1, v),
            [n, w, v] => (n, w, v),
            _ => {
                return Err(Error::InvalidShape {
                    shape,
                    reason: "fmri must be [n, V] or [n, w, V]".into(),
                })
            }
        };
        if v != self.voxels {
            return Err(Error::ShapeMismatch {
                op: "patchify",
                lhs: shape,
                rhs: vec![self.voxels],
            });
        }
        let (pt, p, b) = (self.tokens(), self.cfg.patch_size, self.cfg.embed_dim);
        let mut x = g.reshape(fmri, &[n, w, v])?;
        if pt * p > v {
            let pad = g.constant(Tensor::zeros(&[n, w, pt * p - v]));
            x = g.concat(&[x, pad], 2)?;
        }
        let x = g.reshape(x, &[n, w, pt, p])?;
        let x = nn::linear(g, store, "enc.patch", x)?;
        let pos = g.constant(self.position_table(w));
        let tokens = g.add_suffix(x, pos)?;
        Ok(TokenWindow {
            tokens,
            n,
            w,
            p_tok: pt,
            b,
            positions: (0..pt).collect(),
            frame_positions: (0..w).collect(),
        })
    }

    /// Layer `i`: spatial attention, temporal attention when enabled and
    /// the window is wider than one slot, then the MLP.
    pub fn layer(&self, g: &mut Graph, store: &ParamStore, i: usize, x: &TokenWindow) -> Result<(TokenWindow, Var)> {
        let pre = format!("enc.l{i}");
        let (mut x, ws) = spatial_attend(g, store, &pre, x, self.cfg.heads)?;
        if self.cfg.temporal && x.w > 1 {
            x = temporal_attend(g, store, &pre, &x, self.cfg.heads)?.0;
        }
        let out = mlp(g, store, &pre, x.tokens)?;
        Ok((x.with_tokens(out), ws))
    }

    pub fn trunk(&self, g: &mut Graph, store: &ParamStore, x: TokenWindow) -> Result<Encoded> {
        let mut x = x;
        let mut maps = Vec::with_capacity(self.cfg.depth);
        for i in 0..self.cfg.depth {
            let (y, ws) = self.layer(g, store, i, &x)?;
            x = y;
            maps.push(ws);
        }
        let t = nn::layer_norm(g, store, "enc.ln_f", x.tokens)?;
        Ok(Encoded {
            tokens: x.with_tokens(t),
            spatial_attention: maps,
        })
    }

    /// Heads on `[n, w, P, b]` (or `[n, P, b]`) tokens: slot average, then
    /// pooled = linear(token mean), unpooled = token mix `P → l` followed
    /// by a channel map `b → d_c`.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<EncoderOutput> {
        let t = match g.shape(tokens).len() {
            4 => g.mean_axis(tokens, 1)?,
            3 => tokens,
            _ => {
                return Err(Error::InvalidShape {
                    shape: g.shape(tokens).to_vec(),
                    reason: "tokens must be [n, w, P, b] or [n, P, b]".into(),
                })
            }
        };
        let mean = g.mean_axis(t, 1)?;
        let pooled = nn::linear(g, store, "enc.pool", mean)?;
        let tt = g.permute(t, &[0, 2, 1])?;
        let mixed = nn::linear(g, store, "enc.tokmix", tt)?;
        let mixed = g.permute(mixed, &[0, 2, 1])?;
        let unpooled = nn::linear(g, store, "enc.unpool", mixed)?;
        Ok(EncoderOutput { pooled, unpooled })
    }

    /// Full forward pass on a `[n, w, V]` window tensor. Dropout on the
    /// trunk output is applied only when `dropout_rng` is given.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fmri: Var,
        dropout_rng: Option<&mut R>,
    ) -> Result<(EncoderOutput, Encoded)> {
        let x = self.patchify(g, store, fmri)?;
        let enc = self.trunk(g, store, x)?;
        let mut t = enc.tokens.tokens;
        if let Some(r) = dropout_rng {
            t = nn::dropout(g, t, self.cfg.dropout, r)?;
        }
        Ok((self.project(g, store, t)?, enc))
    }
}

/// Zero a random `fraction` of voxels in every row (training augmentation).
pub fn sparsify<R: Rng + ?Sized>(x: &Tensor, fraction: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(x.shape(), |i| if rng.random::<f64>() < fraction { 0.0 } else { x.data()[i] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check_at;
    use crate::rng;

    fn tiny() -> PatchConfig {
        PatchConfig {
            patch_size: 4,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            decoder_dim: 8,
            decoder_depth: 1,
            latent_tokens: 3,
            cond_dim: 5,
            ..PatchConfig::default()
        }
    }

    #[test]
    fn token_counts_follow_padding_rule() {
        assert_eq!(num_tokens(64, 16).unwrap(), 4);
        assert_eq!(num_tokens(60, 16).unwrap(), 4);
        assert!(num_tokens(0, 16).is_err());
        let x = Tensor::from_fn(&[1, 60], |i| i as f64 + 1.0);
        let p = patch_values(&x, 16).unwrap();
        assert_eq!(p.shape(), &[1, 4, 16]);
        assert_eq!(&p.data()[60..], &[0.0; 4]);
        assert!(FmriEncoder::new(PatchConfig::default(), 0).is_err());
    }

    #[test]
    fn identity_embedding_round_trips() {
        let cfg = PatchConfig {
            patch_size: 4,
            embed_dim: 4,
            heads: 1,
            decoder_dim: 4,
            ..tiny()
        };
        let enc = FmriEncoder::new(cfg, 10).unwrap();
        let mut store = ParamStore::new();
        store.insert("enc.patch.w", Tensor::eye(4));
        store.insert("enc.patch.b", Tensor::zeros(&[4]));
        let x = Tensor::from_fn(&[2, 10], |i| (i as f64).sin());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let tw = enc.patchify(&mut g, &store, xv).unwrap();
        let tokens = g.value(tw.tokens).clone();
        let table = enc.position_table(1);
        let patches = Tensor::from_fn(&[2, 3, 4], |i| tokens.data()[i] - table.data()[i % table.numel()]);
        let back = unpatchify(&patches, 10).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn views_have_reference_shapes_and_round_trip() {
        let mut g = Graph::new();
        let data = Tensor::from_fn(&[2, 2, 8, 16], |i| i as f64);
        let v = g.constant(data.clone());
        let tw = TokenWindow {
            tokens: v,
            n: 2,
            w: 2,
            p_tok: 8,
            b: 16,
            positions: (0..8).collect(),
            frame_positions: vec![0, 1],
        };
        let s = tw.spatial_view(&mut g).unwrap();
        assert_eq!(g.shape(s), &[4, 8, 16]);
        let t = tw.temporal_view(&mut g).unwrap();
        assert_eq!(g.shape(t), &[16, 2, 16]);
        let back = tw.from_temporal(&mut g, t).unwrap();
        assert_eq!(g.value(back.tokens), &data);
        // temporal view row (sample 1, token 3) holds slots 0 and 1 of that token
        let tv = g.value(t);
        let row = 8 + 3;
        assert_eq!(tv.data()[row * 32], data.data()[(2 * 8 + 3) * 16]);
        assert_eq!(tv.data()[row * 32 + 16], data.data()[(3 * 8 + 3) * 16]);
    }

    #[test]
    fn single_slot_temporal_attention_is_value_path_plus_residual() {
        let mut r = rng::stream(1, "t");
        let mut store = ParamStore::new();
        nn::init_layer_norm(&mut store, "x.lnt", 8);
        nn::init_attention(&mut store, &mut r, "x.ta", 8, 8, 8);
        let data = Tensor::randn(&[3, 1, 4, 8], 1.0, &mut r);
        let mut g = Graph::new();
        let v = g.constant(data.clone());
        let tw = TokenWindow {
            tokens: v,
            n: 3,
            w: 1,
            p_tok: 4,
            b: 8,
            positions: (0..4).collect(),
            frame_positions: vec![0],
        };
        let (out, weights) = temporal_attend(&mut g, &store, "x", &tw, 2).unwrap();
        assert!(g.value(weights).data().iter().all(|&w| w == 1.0));
        let flat = g.constant(data.reshape(&[12, 8]).unwrap());
        let h = nn::layer_norm(&mut g, &store, "x.lnt", flat).unwrap();
        let vp = nn::linear(&mut g, &store, "x.ta.v", h).unwrap();
        let op = nn::linear(&mut g, &store, "x.ta.o", vp).unwrap();
        let expect = g.add(op, flat).unwrap();
        let got = g.value(out.tokens).data().to_vec();
        let want = g.value(expect).data();
        assert!(got.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    fn encoder_and_store(temporal: bool, voxels: usize) -> (FmriEncoder, ParamStore) {
        let enc = FmriEncoder::new(PatchConfig { temporal, ..tiny() }, voxels).unwrap();
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut rng::stream(2, "init"));
        // give the temporal output projections nonzero weights
        for i in 0..enc.cfg.depth {
            let t = Tensor::randn(&[8, 8], 0.3, &mut rng::stream(3, &format!("ta{i}")));
            store.insert(format!("enc.l{i}.ta.o.w"), t);
        }
        (enc, store)
    }

    fn run(enc: &FmriEncoder, store: &ParamStore, x: &Tensor) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (out, _) = enc.encode::<rng::Rng>(&mut g, store, xv, None).unwrap();
        (g.value(out.pooled).clone(), g.value(out.unpooled).clone())
    }

    #[test]
    fn window_one_matches_spatial_only_network() {
        let x = Tensor::randn(&[3, 1, 22], 1.0, &mut rng::stream(4, "x"));
        let (a, sa) = encoder_and_store(true, 22);
        let (b, sb) = encoder_and_store(false, 22);
        let (pa, ua) = run(&a, &sa, &x);
        let (pb, ub) = run(&b, &sb, &x);
        assert!(pa.max_abs_diff(&pb) <= 1e-12 && ua.max_abs_diff(&ub) <= 1e-12);
        // with a wider window the temporal layers matter
        let x2 = Tensor::randn(&[3, 2, 22], 1.0, &mut rng::stream(4, "x2"));
        let (pa, _) = run(&a, &sa, &x2);
        let (pb, _) = run(&b, &sb, &x2);
        assert!(pa.max_abs_diff(&pb) > 1e-6);
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let (enc, store) = encoder_and_store(true, 20);
        let x = Tensor::randn(&[4, 2, 20], 1.0, &mut rng::stream(5, "x"));
        let perm = [2, 0, 3, 1];
        let xp = x.select_leading(&perm).unwrap();
        let (p, u) = run(&enc, &store, &x);
        let (pp, up) = run(&enc, &store, &xp);
        assert!(p.select_leading(&perm).unwrap().max_abs_diff(&pp) < 1e-12);
        assert!(u.select_leading(&perm).unwrap().max_abs_diff(&up) < 1e-12);
    }

    #[test]
    fn projection_contracts() {
        let (enc, store) = encoder_and_store(true, 20);
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 1, enc.tokens(), 8]));
        let out = enc.project(&mut g, &store, z).unwrap();
        let bias = store.get("enc.pool.b").unwrap();
        for i in 0..2 {
            assert_eq!(g.value(out.pooled).row(i), bias.data());
        }
        for v in [7, 20, 33] {
            let (enc, store) = encoder_and_store(true, v);
            let (p, u) = run(&enc, &store, &Tensor::ones(&[2, 2, v]));
            assert_eq!(p.shape(), &[2, 8]);
            assert_eq!(u.shape(), &[2, 3, 5]);
        }
    }

    #[test]
    fn both_heads_reach_the_patch_embedding() {
        let (enc, store) = encoder_and_store(true, 20);
        let x = Tensor::randn(&[2, 2, 20], 1.0, &mut rng::stream(6, "x"));
        for head in 0..2 {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let (out, _) = enc.encode::<rng::Rng>(&mut g, &store, xv, None).unwrap();
            let h = if head == 0 { out.pooled } else { out.unpooled };
            let sq = g.mul(h, h).unwrap();
            let loss = g.sum_all(sq);
            let grads = g.backward(loss).unwrap();
            assert!(grads.param("enc.patch.w").unwrap().sq_norm() > 0.0);
        }
    }

    #[test]
    fn encoder_loss_passes_grad_check() {
        let (enc, store) = encoder_and_store(true, 12);
        let x = Tensor::randn(&[2, 2, 12], 1.0, &mut rng::stream(7, "x"));
        let target = Tensor::randn(&[2, 3, 5], 1.0, &mut rng::stream(7, "y"));
        for name in ["enc.patch.w", "enc.l0.ta.q.w", "enc.l1.sa.v.w", "enc.tokmix.w"] {
            let p0 = store.get(name).unwrap().clone();
            let f = |g: &mut Graph, p: Var| {
                g.bind_as(name, p);
                let xv = g.constant(x.clone());
                let (out, _) = enc.encode::<rng::Rng>(g, &store, xv, None)?;
                let t = g.constant(target.clone());
                let d = g.sub(out.unpooled, t)?;
                let sq = g.mul(d, d)?;
                let a = g.mean_all(sq);
                let s = g.sum_all(out.pooled);
                let s = g.scale(s, 0.1);
                g.add(a, s)
            };
            let coords: Vec<usize> = (0..p0.numel()).step_by(3).collect();
            let err = grad_check_at(f, &p0, &coords).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn sparsify_zeroes_about_the_fraction() {
        let x = Tensor::ones(&[100, 100]);
        let y = sparsify(&x, 0.2, &mut rng::stream(8, "s"));
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e4;
        assert!((zeros - 0.2).abs() < 0.02);
    }
}
