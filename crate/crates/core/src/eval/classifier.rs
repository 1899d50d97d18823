//! Small softmax-regression classifiers over the synthetic catalogs, used
//! to score reconstructions semantically. Both train on their own pinned
//! seed, so their weights do not depend on the run being evaluated.

use std::sync::OnceLock;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{AdamW, Graph, ParamStore, Tensor};
use crate::rng;
use crate::synthdata::scene::{render_clip, SceneCatalog, BLOCK, CHANNELS, FRAME_SIZE, GRID, NUM_CLASSES};

const STUB_SEED: u64 = 0xc1a5_5f1e_0000_0001;
const TRAIN_SAMPLES: usize = 1536;
const TRAIN_STEPS: usize = 250;
const CLIP_FRAMES: usize = 6;
const STUB_FPS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StubKind {
    /// Scene class of a single frame.
    Frame,
    /// Motion-catalog class (direction × sprite layout) of a clip.
    Video,
}

/// Block-mean pooled `[GRID, GRID, C]` grid of an `[H, W, C]` frame.
pub fn pooled(frame: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; GRID * GRID * CHANNELS];
    let norm = 1.0 / (BLOCK * BLOCK) as f64;
    for y in 0..FRAME_SIZE {
        for x in 0..FRAME_SIZE {
            for c in 0..CHANNELS {
                out[((y / BLOCK) * GRID + x / BLOCK) * CHANNELS + c] += norm * frame[(y * FRAME_SIZE + x) * CHANNELS + c];
            }
        }
    }
    out
}

pub fn frame_features(frame: &[f64]) -> Vec<f64> {
    pooled(frame)
}

/// Circular shifts probed by the motion features.
const SHIFTS: [(i64, i64); 9] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (0, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

/// Pooled first frame followed by nine normalized correlations between
/// consecutive temporally-centred luminance grids at one-block shifts.
pub fn video_features(clip: &[f64], frames: usize) -> Vec<f64> {
    let n = FRAME_SIZE * FRAME_SIZE * CHANNELS;
    let lum: Vec<Vec<f64>> = (0..frames)
        .map(|k| {
            pooled(&clip[k * n..(k + 1) * n])
                .chunks(CHANNELS)
                .map(|c| c.iter().sum::<f64>())
                .collect()
        })
        .collect();
    let cells = GRID * GRID;
    let mean: Vec<f64> = (0..cells).map(|i| lum.iter().map(|l| l[i]).sum::<f64>() / frames as f64).collect();
    let q: Vec<Vec<f64>> = lum.iter().map(|l| l.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let energy: f64 = q.iter().flatten().map(|v| v * v).sum::<f64>() + 1e-9;
    let g = GRID as i64;
    let mut feats = pooled(&clip[..n]);
    for (sx, sy) in SHIFTS {
        let mut r = 0.0;
        for k in 0..frames.saturating_sub(1) {
            for y in 0..g {
                for x in 0..g {
                    let src = ((y - sy).rem_euclid(g) * g + (x - sx).rem_euclid(g)) as usize;
                    r += q[k + 1][(y * g + x) as usize] * q[k][src];
                }
            }
        }
        feats.push(4.0 * r / energy);
    }
    feats
}

fn training_set(kind: StubKind) -> (Vec<Vec<f64>>, Vec<usize>) {
    let cat = SceneCatalog::new();
    let label = match kind {
        StubKind::Frame => "stub-frame",
        StubKind::Video => "stub-video",
    };
    let mut r = rng::stream(STUB_SEED, label);
    let mut xs = Vec::with_capacity(TRAIN_SAMPLES);
    let mut ys = Vec::with_capacity(TRAIN_SAMPLES);
    let n = FRAME_SIZE * FRAME_SIZE * CHANNELS;
    for _ in 0..TRAIN_SAMPLES {
        let scene = cat.random_scene(&mut r);
        let start = r.random_range(0..24);
        let clip = render_clip(&scene, start + CLIP_FRAMES, STUB_FPS).frames;
        let data = &clip.data()[start * n..];
        match kind {
            StubKind::Frame => {
                xs.push(frame_features(&data[..n]));
                ys.push(scene.scene_id);
            }
            StubKind::Video => {
                xs.push(video_features(data, CLIP_FRAMES));
                ys.push(scene.video_class());
            }
        }
    }
    (xs, ys)
}

/// One softmax-regression head over a contiguous feature range.
#[derive(Clone, Debug)]
struct Head {
    features: std::ops::Range<usize>,
    classes: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Tensor,
    bias: Tensor,
}

impl Head {
    fn standardize(&self, xs: &[Vec<f64>]) -> Tensor {
        let d = self.mean.len();
        Tensor::from_fn(&[xs.len(), d], |i| {
            let (r, j) = (i / d, i % d);
            (xs[r][self.features.start + j] - self.mean[j]) * self.scale[j]
        })
    }

    fn fit(xs: &[Vec<f64>], ys: &[usize], features: std::ops::Range<usize>, classes: usize) -> Result<Self> {
        let n = xs.len() as f64;
        let mean: Vec<f64> = features.clone().map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = features
            .clone()
            .zip(&mean)
            .map(|(j, m)| {
                let v = xs.iter().map(|x| (x[j] - m).powi(2)).sum::<f64>() / n;
                if v > 1e-12 {
                    1.0 / v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let d = mean.len();
        let mut head = Self {
            features,
            classes,
            mean,
            scale,
            weights: Tensor::zeros(&[d, classes]),
            bias: Tensor::zeros(&[classes]),
        };
        let x = head.standardize(xs);
        let mut store = ParamStore::new();
        store.insert("w", head.weights.clone());
        store.insert("b", head.bias.clone());
        let mut opt = AdamW::new(0.05, 1e-3);
        opt.clip_norm = None;
        for _ in 0..TRAIN_STEPS {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let w = store.bind(&mut g, "w")?;
            let b = store.bind(&mut g, "b")?;
            let logits = g.linear(xv, w, Some(b))?;
            let loss = g.cross_entropy(logits, ys)?;
            let grads = g.backward(loss)?;
            opt.step(&mut store, &grads)?;
        }
        head.weights = store.get("w")?.clone();
        head.bias = store.get("b")?.clone();
        Ok(head)
    }

    fn probs(&self, xs: &[Vec<f64>]) -> Result<Tensor> {
        let x = self.standardize(xs);
        let logits = x.matmul(&self.weights)?;
        let bias = Tensor::from_fn(logits.shape(), |i| self.bias.data()[i % self.classes]);
        logits.add(&bias)?.softmax(1)
    }
}

/// Two independent heads whose product gives the distribution over
/// `8 × 8` classes, class id `low + 8·high`.
#[derive(Clone, Debug)]
pub struct ClassifierStub {
    pub kind: StubKind,
    pub classes: usize,
    features: usize,
    low: Head,
    high: Head,
}

const FACTOR: usize = 8;

impl ClassifierStub {
    /// Fit on freshly rendered catalog samples with the pinned seed.
    pub fn train(kind: StubKind) -> Result<Self> {
        let (xs, ys) = training_set(kind);
        let features = xs[0].len();
        let pooled_len = GRID * GRID * CHANNELS;
        let (low_range, high_range) = match kind {
            StubKind::Frame => (0..features, 0..features),
            StubKind::Video => (0..pooled_len, pooled_len..features),
        };
        let lo: Vec<usize> = ys.iter().map(|y| y % FACTOR).collect();
        let hi: Vec<usize> = ys.iter().map(|y| y / FACTOR).collect();
        Ok(Self {
            kind,
            classes: NUM_CLASSES,
            features,
            low: Head::fit(&xs, &lo, low_range, FACTOR)?,
            high: Head::fit(&xs, &hi, high_range, NUM_CLASSES / FACTOR)?,
        })
    }

    /// Process-wide cached instance.
    pub fn shared(kind: StubKind) -> Result<&'static ClassifierStub> {
        static FRAME: OnceLock<ClassifierStub> = OnceLock::new();
        static VIDEO: OnceLock<ClassifierStub> = OnceLock::new();
        let cell = match kind {
            StubKind::Frame => &FRAME,
            StubKind::Video => &VIDEO,
        };
        if let Some(s) = cell.get() {
            return Ok(s);
        }
        let stub = Self::train(kind)?;
        Ok(cell.get_or_init(|| stub))
    }

    /// `[n, classes]` probability rows for feature vectors.
    pub fn probs(&self, xs: &[Vec<f64>]) -> Result<Tensor> {
        if xs.iter().any(|x| x.len() != self.features) {
            return Err(Error::invalid(format!("classifier expects {} features", self.features)));
        }
        let lo = self.low.probs(xs)?;
        let hi = self.high.probs(xs)?;
        let c = self.classes;
        Ok(Tensor::from_fn(&[xs.len(), c], |i| {
            let (r, k) = (i / c, i % c);
            lo.row(r)[k % FACTOR] * hi.row(r)[k / FACTOR]
        }))
    }

    /// Probabilities for `[n, H, W, C]` frames.
    pub fn frame_probs(&self, frames: &Tensor) -> Result<Tensor> {
        let n = FRAME_SIZE * FRAME_SIZE * CHANNELS;
        self.probs(&frames.data().chunks(n).map(frame_features).collect::<Vec<_>>())
    }

    /// Probabilities for `[n, F, H, W, C]` clips.
    pub fn video_probs(&self, clips: &Tensor) -> Result<Tensor> {
        let f = clips.shape()[1];
        let per = f * FRAME_SIZE * FRAME_SIZE * CHANNELS;
        self.probs(&clips.data().chunks(per).map(|c| video_features(c, f)).collect::<Vec<_>>())
    }
}

pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let c = probs.shape()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = probs.row(i);
            (0..c).all(|k| row[k] <= row[y] || k == y)
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::scene::DIRECTIONS;

    #[test]
    fn motion_features_peak_at_the_true_shift() {
        let cat = SceneCatalog::new();
        for (d, &(mx, my)) in DIRECTIONS.iter().enumerate() {
            let scene = cat.scene(9 + d, (mx, my), (2, 3));
            let clip = render_clip(&scene, 6, 3).frames;
            let f = video_features(clip.data(), 6);
            let corr = &f[f.len() - 9..];
            let best = (0..9).max_by(|&a, &b| corr[a].total_cmp(&corr[b])).unwrap();
            assert_eq!(SHIFTS[best], (mx as i64, my as i64), "direction {d}");
        }
    }

    #[test]
    fn stubs_classify_held_out_renders() {
        let cat = SceneCatalog::new();
        let mut r = rng::stream(77, "held-out");
        let mut frames = Vec::new();
        let mut clips = Vec::new();
        let (mut fy, mut vy) = (Vec::new(), Vec::new());
        for _ in 0..200 {
            let s = cat.random_scene(&mut r);
            let clip = render_clip(&s, 6, 3).frames;
            frames.extend_from_slice(&clip.data()[..FRAME_SIZE * FRAME_SIZE * CHANNELS]);
            clips.extend_from_slice(clip.data());
            fy.push(s.scene_id);
            vy.push(s.video_class());
        }
        let frames = Tensor::new(&[200, 32, 32, 3], frames).unwrap();
        let clips = Tensor::new(&[200, 6, 32, 32, 3], clips).unwrap();
        let fs = ClassifierStub::shared(StubKind::Frame).unwrap();
        let vs = ClassifierStub::shared(StubKind::Video).unwrap();
        let fp = fs.frame_probs(&frames).unwrap();
        let vp = vs.video_probs(&clips).unwrap();
        for row in 0..5 {
            assert!((fp.row(row).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let fa = accuracy(&fp, &fy);
        let va = accuracy(&vp, &vy);
        assert!(fa > 0.9, "frame accuracy {fa}");
        assert!(va > 0.9, "video accuracy {va}");
    }
}
