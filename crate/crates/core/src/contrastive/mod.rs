//! Tri-modal contrastive alignment of pooled fMRI embeddings with frozen
//! text and image embedders.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng;
use crate::synthdata::scene::{synonym, CHANNELS, FRAME_SIZE, PAD, VOCAB};

/// Default logit scale ε.
pub const DEFAULT_EPS: f64 = 20.0;
/// Width of a caption token embedding (the generator's text conditioning).
pub const TOKEN_DIM: usize = 32;
const NORM_EPS: f64 = 1e-12;
const EMBEDDER_SEED: u64 = 0xe1b3_dd00_0c11_7a2e;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Text,
    Image,
}

/// Fixed random map from a modality input to the unit sphere in `R^b`.
/// Weights never change after construction and never enter a tape as
/// trainable leaves.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEmbedder {
    pub modality: Modality,
    /// Text: `[VOCAB, TOKEN_DIM]` token table. Image: unused (empty).
    pub table: Tensor,
    /// Text: `[TOKEN_DIM, b]`. Image: `[pooled pixels, b]`.
    pub weights: Tensor,
}

/// Image inputs are average-pooled to 8×8×3 before the random map.
const IMAGE_POOL: usize = 4;
const IMAGE_FEATURES: usize = (FRAME_SIZE / IMAGE_POOL) * (FRAME_SIZE / IMAGE_POOL) * CHANNELS;

impl FrozenEmbedder {
    /// Text embedder: a random token table in which every synonym id sits
    /// close to its word, followed by a random projection of the mean
    /// non-padding token.
    pub fn text(dim: usize) -> Self {
        let mut r = rng::stream(EMBEDDER_SEED, "text-table");
        let mut table = Tensor::randn(&[VOCAB, TOKEN_DIM], 1.0, &mut r);
        table.data_mut()[PAD * TOKEN_DIM..(PAD + 1) * TOKEN_DIM].fill(0.0);
        for t in 0..VOCAB {
            if let Some(s) = synonym(t) {
                if s > t {
                    for k in 0..TOKEN_DIM {
                        let jitter: f64 = 0.1 * r.sample::<f64, _>(rand_distr::StandardNormal);
                        table.data_mut()[s * TOKEN_DIM + k] = table.data()[t * TOKEN_DIM + k] + jitter;
                    }
                }
            }
        }
        let weights = Tensor::randn(&[TOKEN_DIM, dim], (1.0 / TOKEN_DIM as f64).sqrt(), &mut r);
        Self {
            modality: Modality::Text,
            table,
            weights,
        }
    }

    pub fn image(dim: usize) -> Self {
        let mut r = rng::stream(EMBEDDER_SEED, "image-map");
        let weights = Tensor::randn(&[IMAGE_FEATURES, dim], (1.0 / IMAGE_FEATURES as f64).sqrt(), &mut r);
        Self {
            modality: Modality::Image,
            table: Tensor::zeros(&[0]),
            weights,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }

    /// `[n, CAPTION_LEN]` token ids to `[n, CAPTION_LEN, TOKEN_DIM]` token
    /// embeddings (padding maps to zero).
    pub fn token_embeddings(&self, captions: &[Vec<usize>]) -> Result<Tensor> {
        if self.modality != Modality::Text {
            return Err(Error::invalid("token embeddings need the text embedder"));
        }
        let len = captions.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(captions.len() * len * TOKEN_DIM);
        for cap in captions {
            if cap.len() != len {
                return Err(Error::invalid("captions differ in length"));
            }
            for &t in cap {
                if t >= VOCAB {
                    return Err(Error::IndexOutOfRange { index: t, bound: VOCAB });
                }
                data.extend_from_slice(self.table.row(t));
            }
        }
        Tensor::new(&[captions.len(), len, TOKEN_DIM], data)
    }

    /// `[n, b]` unit-norm caption embeddings.
    pub fn embed_text(&self, captions: &[Vec<usize>]) -> Result<Tensor> {
        let tok = self.token_embeddings(captions)?;
        let len = tok.shape()[1];
        let mut mean = Tensor::zeros(&[captions.len(), TOKEN_DIM]);
        for (i, cap) in captions.iter().enumerate() {
            let used = cap.iter().filter(|&&t| t != PAD).count().max(1) as f64;
            for j in 0..len {
                for k in 0..TOKEN_DIM {
                    mean.data_mut()[i * TOKEN_DIM + k] += tok.data()[(i * len + j) * TOKEN_DIM + k] / used;
                }
            }
        }
        Ok(normalize_rows(&mean.matmul(&self.weights)?))
    }

    /// `[n, F, H, W, C]` clips (or `[n, H, W, C]` frames) to `[n, b]`
    /// unit-norm embeddings; clips are averaged over frames first.
    pub fn embed_image(&self, frames: &Tensor) -> Result<Tensor> {
        if self.modality != Modality::Image {
            return Err(Error::invalid("image embedding needs the image embedder"));
        }
        let frame = FRAME_SIZE * FRAME_SIZE * CHANNELS;
        let (n, per) = match *frames.shape() {
            [n, f, h, w, c] if h * w * c == frame => (n, f),
            [n, h, w, c] if h * w * c == frame => (n, 1),
            _ => {
                return Err(Error::InvalidShape {
                    shape: frames.shape().to_vec(),
                    reason: "expected [n, F, 32, 32, 3] or [n, 32, 32, 3]".into(),
                })
            }
        };
        let g = FRAME_SIZE / IMAGE_POOL;
        let mut feats = Tensor::zeros(&[n, IMAGE_FEATURES]);
        let scale = 1.0 / (per * IMAGE_POOL * IMAGE_POOL) as f64;
        for i in 0..n {
            for f in 0..per {
                let px = &frames.data()[(i * per + f) * frame..(i * per + f + 1) * frame];
                for y in 0..FRAME_SIZE {
                    for x in 0..FRAME_SIZE {
                        for c in 0..CHANNELS {
                            let k = ((y / IMAGE_POOL) * g + x / IMAGE_POOL) * CHANNELS + c;
                            feats.data_mut()[i * IMAGE_FEATURES + k] += (px[(y * FRAME_SIZE + x) * CHANNELS + c] - 0.5) * scale;
                        }
                    }
                }
            }
        }
        Ok(normalize_rows(&feats.matmul(&self.weights)?))
    }
}

pub fn normalize_rows(x: &Tensor) -> Tensor {
    let d = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d.max(1)) {
        let n = (row.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// Which pairs enter the tri-modal objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContrastiveMode {
    Full,
    Text,
    Image,
}

impl std::str::FromStr for ContrastiveMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "text" => Ok(Self::Text),
            "image" => Ok(Self::Image),
            _ => Err(Error::Config(format!("contrastive mode must be full|text|image, got {s}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub eps: f64,
    pub mode: ContrastiveMode,
    /// Average the row-wise and column-wise cross-entropies.
    pub symmetric: bool,
    /// L2-normalize the fMRI embeddings before the logit product.
    pub normalize: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            mode: ContrastiveMode::Full,
            symmetric: false,
            normalize: true,
        }
    }
}

fn logits(g: &mut Graph, a: Var, b: Var, eps: f64) -> Result<Var> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(Error::ShapeMismatch {
            op: "clip_loss",
            lhs: sa,
            rhs: sb,
        });
    }
    if sa[0] == 0 {
        return Err(Error::invalid("contrastive loss needs at least one row"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("logit scale must be positive, got {eps}")));
    }
    let (n, d) = (sa[0], sa[1]);
    let a3 = g.reshape(a, &[1, n, d])?;
    let b3 = g.reshape(b, &[1, n, d])?;
    let l = g.bmm(a3, b3, true)?;
    let l = g.reshape(l, &[n, n])?;
    Ok(g.scale(l, eps))
}

/// Cross-entropy of `ε a·bᵀ` against the diagonal (row `i` targets `i`).
pub fn clip_loss(g: &mut Graph, a: Var, b: Var, eps: f64) -> Result<Var> {
    let l = logits(g, a, b, eps)?;
    let n = g.shape(l)[0];
    g.cross_entropy(l, &(0..n).collect::<Vec<_>>())
}

/// Mean of the row-query and column-query losses.
pub fn clip_loss_symmetric(g: &mut Graph, a: Var, b: Var, eps: f64) -> Result<Var> {
    let l = logits(g, a, b, eps)?;
    let n = g.shape(l)[0];
    let targets: Vec<usize> = (0..n).collect();
    let rows = g.cross_entropy(l, &targets)?;
    let lt = g.permute(l, &[1, 0])?;
    let cols = g.cross_entropy(lt, &targets)?;
    let s = g.add(rows, cols)?;
    Ok(g.scale(s, 0.5))
}

/// `(L(f, t) + L(f, i)) / 2`, or a single term in the text / image modes.
pub fn trimodal_loss(g: &mut Graph, emb_f: Var, emb_t: Var, emb_i: Var, cfg: &ContrastiveConfig) -> Result<Var> {
    let f = if cfg.normalize { g.l2_normalize(emb_f, NORM_EPS) } else { emb_f };
    let term = |g: &mut Graph, other: Var| {
        if cfg.symmetric {
            clip_loss_symmetric(g, f, other, cfg.eps)
        } else {
            clip_loss(g, f, other, cfg.eps)
        }
    };
    match cfg.mode {
        ContrastiveMode::Text => term(g, emb_t),
        ContrastiveMode::Image => term(g, emb_i),
        ContrastiveMode::Full => {
            let a = term(g, emb_t)?;
            let b = term(g, emb_i)?;
            let s = g.add(a, b)?;
            Ok(g.scale(s, 0.5))
        }
    }
}

/// Fraction of rows of `queries` whose most cosine-similar row of
/// `keys` is their own pair.
pub fn retrieval_eval(queries: &Tensor, keys: &Tensor) -> Result<f64> {
    if queries.shape() != keys.shape() || queries.rank() != 2 || queries.shape()[0] == 0 {
        return Err(Error::ShapeMismatch {
            op: "retrieval_eval",
            lhs: queries.shape().to_vec(),
            rhs: keys.shape().to_vec(),
        });
    }
    let q = normalize_rows(queries);
    let k = normalize_rows(keys);
    let sim = q.matmul(&k.transpose2()?)?;
    let n = q.shape()[0];
    let hits = (0..n)
        .filter(|&i| {
            let row = sim.row(i);
            let best = (0..n).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == i
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Draw up to `size` sample indices with pairwise distinct scene ids.
pub fn unique_scene_batch<R: Rng + ?Sized>(scene_ids: &[usize], size: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scene_ids.len()).collect();
    order.shuffle(rng);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(size);
    for i in order {
        if out.len() == size {
            break;
        }
        if seen.insert(scene_ids[i]) {
            out.push(i);
        }
    }
    out
}

/// Replace each word with its synonym id with probability `p`.
pub fn augment_caption<R: Rng + ?Sized>(caption: &[usize], p: f64, rng: &mut R) -> Vec<usize> {
    caption
        .iter()
        .map(|&t| match synonym(t) {
            Some(s) if rng.random::<f64>() < p => s,
            _ => t,
        })
        .collect()
}

/// With probability `p`, crop a random `(32-2m)²` window of every frame of
/// a `[F, H, W, C]` clip and resize back to 32×32 (nearest neighbour).
pub fn random_crop<R: Rng + ?Sized>(clip: &Tensor, p: f64, margin: usize, rng: &mut R) -> Tensor {
    if rng.random::<f64>() >= p || margin == 0 {
        return clip.clone();
    }
    let ox = rng.random_range(0..=2 * margin);
    let oy = rng.random_range(0..=2 * margin);
    let side = FRAME_SIZE - 2 * margin;
    let frame = FRAME_SIZE * FRAME_SIZE * CHANNELS;
    Tensor::from_fn(clip.shape(), |i| {
        let (f, rest) = (i / frame, i % frame);
        let (y, x, c) = (rest / (FRAME_SIZE * CHANNELS), (rest / CHANNELS) % FRAME_SIZE, rest % CHANNELS);
        let sy = oy + y * side / FRAME_SIZE;
        let sx = ox + x * side / FRAME_SIZE;
        clip.data()[f * frame + (sy * FRAME_SIZE + sx) * CHANNELS + c]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::synthdata::scene::{scene_caption, pad_caption, SceneCatalog};
    use proptest::prelude::*;

    fn eval(f: impl Fn(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
        normalize_rows(&Tensor::randn(&[n, d], 1.0, &mut rng::stream(seed, "u")))
    }

    #[test]
    fn single_row_loss_is_zero() {
        let a = unit_rows(1, 4, 1);
        let l = eval(|g| {
            let x = g.constant(a.clone());
            clip_loss(g, x, x, 20.0)
        });
        assert_eq!(l, 0.0);
    }

    #[test]
    fn orthonormal_pairs_saturate() {
        let a = Tensor::eye(6);
        let l = eval(|g| {
            let x = g.constant(a.clone());
            clip_loss(g, x, x, 100.0)
        });
        assert!(l < 1e-6, "{l}");
        // monotone decreasing in eps
        let mut prev = f64::INFINITY;
        for eps in [0.5, 1.0, 2.0, 5.0, 10.0, 50.0] {
            let l = eval(|g| {
                let x = g.constant(a.clone());
                clip_loss(g, x, x, eps)
            });
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn random_unit_embeddings_sit_near_log_n() {
        let mut total = 0.0;
        for s in 0..100 {
            let (a, b) = (unit_rows(16, 64, 2 * s), unit_rows(16, 64, 2 * s + 1));
            total += eval(|g| {
                let x = g.constant(a.clone());
                let y = g.constant(b.clone());
                clip_loss(g, x, y, 1.0)
            });
        }
        let mean = total / 100.0;
        assert!((mean - 16f64.ln()).abs() < 0.3, "{mean}");
    }

    #[test]
    fn empty_and_mismatched_batches_rejected() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[0, 4]));
        assert!(clip_loss(&mut g, z, z, 1.0).is_err());
        let a = g.constant(Tensor::zeros(&[2, 4]));
        let b = g.constant(Tensor::zeros(&[3, 4]));
        assert!(clip_loss(&mut g, a, b, 1.0).is_err());
        let cfg = ContrastiveConfig::default();
        assert!(trimodal_loss(&mut g, a, a, b, &cfg).is_err());
    }

    #[test]
    fn trimodal_identities() {
        let f = Tensor::randn(&[5, 8], 1.0, &mut rng::stream(3, "f"));
        let t = unit_rows(5, 8, 4);
        let i = unit_rows(5, 8, 5);
        let cfg = ContrastiveConfig::default();
        let run = |f: &Tensor, t: &Tensor, i: &Tensor, cfg: ContrastiveConfig| {
            eval(|g| {
                let (fv, tv, iv) = (g.constant(f.clone()), g.constant(t.clone()), g.constant(i.clone()));
                trimodal_loss(g, fv, tv, iv, &cfg)
            })
        };
        let same = run(&f, &t, &t, cfg);
        let single = eval(|g| {
            let fv = g.constant(f.clone());
            let fv = g.l2_normalize(fv, NORM_EPS);
            let tv = g.constant(t.clone());
            clip_loss(g, fv, tv, cfg.eps)
        });
        assert_eq!(same, single);
        let full = run(&f, &t, &i, cfg);
        let text = run(&f, &t, &i, ContrastiveConfig { mode: ContrastiveMode::Text, ..cfg });
        let image = run(&f, &t, &i, ContrastiveConfig { mode: ContrastiveMode::Image, ..cfg });
        assert!((full - 0.5 * (text + image)).abs() < 1e-12);
        assert_eq!(text, single);
        // joint row permutation
        let perm = [3, 1, 4, 0, 2];
        let p = |x: &Tensor| x.select_leading(&perm).unwrap();
        assert!((run(&p(&f), &p(&t), &p(&i), cfg) - full).abs() < 1e-12);
        let sym = run(&f, &t, &i, ContrastiveConfig { symmetric: true, ..cfg });
        assert!(sym.is_finite() && sym != full);
    }

    #[test]
    fn trimodal_gradient_checks_and_embedders_stay_frozen() {
        let t = unit_rows(4, 6, 6);
        let i = unit_rows(4, 6, 7);
        let f0 = Tensor::randn(&[4, 6], 1.0, &mut rng::stream(8, "f"));
        let cfg = ContrastiveConfig { eps: 3.0, ..ContrastiveConfig::default() };
        let err = grad_check(
            |g, f| {
                let tv = g.constant(t.clone());
                let iv = g.constant(i.clone());
                trimodal_loss(g, f, tv, iv, &cfg)
            },
            &f0,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
        let mut g = Graph::new();
        let f = g.input(f0.clone());
        let tv = g.constant(t.clone());
        let iv = g.constant(i.clone());
        let l = trimodal_loss(&mut g, f, tv, iv, &cfg).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(tv).is_none() && grads.get(iv).is_none());
        assert!(grads.get(f).is_some());
    }

    #[test]
    fn retrieval_oracles() {
        let a = unit_rows(20, 8, 9);
        assert_eq!(retrieval_eval(&a, &a).unwrap(), 1.0);
        let mut total = 0.0;
        for s in 0..200 {
            total += retrieval_eval(&unit_rows(50, 16, 1000 + s), &unit_rows(50, 16, 5000 + s)).unwrap();
        }
        let mean = total / 200.0;
        assert!((mean - 0.02).abs() < 0.006, "{mean}");
    }

    #[test]
    fn embedders_are_fixed_and_unit_norm() {
        let t = FrozenEmbedder::text(16);
        assert_eq!(t, FrozenEmbedder::text(16));
        let cat = SceneCatalog::new();
        let caps: Vec<Vec<usize>> = (0..5).map(|id| pad_caption(&scene_caption(cat.semantic_code(id), id))).collect();
        let e = t.embed_text(&caps).unwrap();
        for r in 0..5 {
            let n: f64 = e.row(r).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
        let img = FrozenEmbedder::image(16);
        let clip = crate::synthdata::render_clip(&cat.scene(3, (1, 0), (0, 0)), 2, 3).frames;
        let e = img.embed_image(&clip.reshape(&[1, 2, 32, 32, 3]).unwrap()).unwrap();
        assert_eq!(e.shape(), &[1, 16]);
        assert!(img.token_embeddings(&caps).is_err());
        // synonyms embed close to their words
        let syn = augment_caption(&caps[0], 1.0, &mut rng::stream(1, "a"));
        assert_ne!(syn, caps[0]);
        let es = t.embed_text(&[syn, caps[0].clone()]).unwrap();
        let cos: f64 = es.row(0).iter().zip(es.row(1)).map(|(a, b)| a * b).sum();
        assert!(cos > 0.9, "{cos}");
    }

    #[test]
    fn crop_keeps_shape_and_range() {
        let cat = SceneCatalog::new();
        let clip = crate::synthdata::render_clip(&cat.scene(9, (1, 1), (0, 0)), 3, 3).frames;
        let c = random_crop(&clip, 1.0, 2, &mut rng::stream(2, "c"));
        assert_eq!(c.shape(), clip.shape());
        assert!(c.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(random_crop(&clip, 0.0, 2, &mut rng::stream(2, "c")), clip);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn batches_never_repeat_a_scene(
            ids in proptest::collection::vec(0usize..40, 1..120),
            size in 1usize..32,
            seed in any::<u64>(),
        ) {
            let b = unique_scene_batch(&ids, size, &mut rng::stream(seed, "batch"));
            let distinct: std::collections::HashSet<usize> = ids.iter().copied().collect();
            prop_assert_eq!(b.len(), size.min(distinct.len()));
            let mut seen = std::collections::HashSet::new();
            for &i in &b {
                prop_assert!(seen.insert(ids[i]));
            }
        }
    }
}
