//! Paired fMRI / video / caption dataset generator.
//!
//! One synthetic subject watches two independent stimulus sequences (train
//! and test). Voxels are laid out in four contiguous regions:
//! a semantic region driven by the scene's semantic code, a motion region
//! driven by sprite velocity, a luminance region driven by mean frame
//! brightness, and a noise-only region. Selection and feature
//! standardization use training statistics only.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use super::bold::{simulate_bold, SubjectRecording};
use super::hrf::HrfModel;
use super::scene::{frame_len, window_caption, SceneCatalog, SyntheticScene, CAPTION_LEN, CHANNELS, FRAME_SIZE, SEMANTIC_DIM};
use super::select::{select_voxels, SelectionConfig};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

pub const REGION_NAMES: [&str; 4] = ["semantic", "motion", "luminance", "noise"];

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub train_scans: usize,
    pub test_scans: usize,
    pub voxels: usize,
    pub repeats: usize,
    pub snr: f64,
    pub tr_seconds: f64,
    pub fps: usize,
    pub min_scene_frames: usize,
    pub max_scene_frames: usize,
    /// Voxel fractions of the semantic, motion and luminance regions; the
    /// remainder is noise.
    pub region_fractions: [f64; 3],
    pub selection: SelectionConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_scans: 432,
            test_scans: 120,
            voxels: 256,
            repeats: 6,
            snr: 1.0,
            tr_seconds: 2.0,
            fps: 3,
            min_scene_frames: 9,
            max_scene_frames: 24,
            region_fractions: [0.25, 0.125, 0.125],
            selection: SelectionConfig::default(),
        }
    }
}

/// Scans kept before and after the sampled range so every window and lag
/// configuration stays in bounds.
pub const MARGIN_SCANS: usize = 6;

impl DatasetConfig {
    pub fn frames_per_scan(&self) -> usize {
        let f = self.fps as f64 * self.tr_seconds;
        f.round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fps as f64 * self.tr_seconds;
        if self.fps == 0 || (f - f.round()).abs() > 1e-9 || f < 1.0 {
            return Err(Error::Config(format!(
                "fps {} x tr {} must be a positive whole number of frames",
                self.fps, self.tr_seconds
            )));
        }
        if self.train_scans < 2 || self.test_scans < 2 || self.voxels < 4 || self.repeats < 2 {
            return Err(Error::Config("dataset needs >= 2 scans per split, >= 4 voxels, >= 2 repeats".into()));
        }
        if !(self.snr > 0.0) || self.min_scene_frames == 0 || self.max_scene_frames < self.min_scene_frames {
            return Err(Error::Config("invalid snr or scene duration range".into()));
        }
        let total: f64 = self.region_fractions.iter().sum();
        if self.region_fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || total > 1.0 {
            return Err(Error::Config("region fractions must be in [0,1] and sum to <= 1".into()));
        }
        Ok(())
    }

    /// Region label for every voxel.
    pub fn region_labels(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self
            .region_fractions
            .iter()
            .map(|f| (f * self.voxels as f64).round() as usize)
            .collect();
        let used: usize = sizes.iter().sum();
        sizes.push(self.voxels.saturating_sub(used));
        let mut labels = Vec::with_capacity(self.voxels);
        for (r, &n) in sizes.iter().enumerate() {
            labels.extend(std::iter::repeat_n(r, n));
        }
        labels.truncate(self.voxels);
        labels
    }
}

/// Direction of the fMRI window relative to its target scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowDirection {
    Forward,
    Backward,
}

impl std::str::FromStr for WindowDirection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Self::Forward),
            "backward" => Ok(Self::Backward),
            _ => Err(Error::Config(format!("window direction must be forward|backward, got {s}"))),
        }
    }
}

/// One split: `n` samples, each the video of one scan paired with the fMRI
/// recorded over the whole split (including margins).
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// `[N, F, H, W, C]`, pixels in [0, 1].
    pub clips: Tensor,
    /// `[N, F]` scene class of every frame.
    pub frame_class: Vec<Vec<usize>>,
    pub video_class: Vec<usize>,
    pub scene_id: Vec<usize>,
    /// Index of the scene occurrence within the split's stimulus sequence.
    pub scene_instance: Vec<usize>,
    /// `[N, CAPTION_LEN]` caption tokens per sample.
    pub captions: Vec<Vec<usize>>,
    /// `[T_total, V_sel]` repeat-averaged, standardized features.
    pub fmri: Tensor,
    /// `[R, T_total, V_sel]` standardized individual repeats.
    pub repeats: Tensor,
}

impl Split {
    pub fn len(&self) -> usize {
        self.clips.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frames(&self) -> usize {
        self.clips.shape()[1]
    }

    pub fn voxels(&self) -> usize {
        self.fmri.shape()[1]
    }

    /// Scan indices (into `fmri`) making up the window of sample `t`, in
    /// chronological order.
    pub fn window_scans(&self, t: usize, w: usize, shift: usize, dir: WindowDirection) -> Result<Vec<usize>> {
        let total = self.fmri.shape()[0];
        let anchor = MARGIN_SCANS + t + shift;
        let start = match dir {
            WindowDirection::Forward => Some(anchor),
            WindowDirection::Backward => (anchor + 1).checked_sub(w),
        };
        match start {
            Some(s) if w >= 1 && s + w <= total && t < self.len() => Ok((s..s + w).collect()),
            _ => Err(Error::IndexOutOfRange {
                index: anchor + w,
                bound: total,
            }),
        }
    }

    /// `[n, w, V]` windows of the averaged features for samples `idx`.
    pub fn windows(&self, idx: &[usize], w: usize, shift: usize, dir: WindowDirection) -> Result<Tensor> {
        let v = self.voxels();
        let mut data = Vec::with_capacity(idx.len() * w * v);
        for &t in idx {
            for s in self.window_scans(t, w, shift, dir)? {
                data.extend_from_slice(self.fmri.row(s));
            }
        }
        Tensor::new(&[idx.len(), w, v], data)
    }

    /// One clip `[F, H, W, C]`.
    pub fn clip(&self, i: usize) -> Tensor {
        let f = self.frames();
        let n = f * frame_len();
        Tensor::new(&[f, FRAME_SIZE, FRAME_SIZE, CHANNELS], self.clips.data()[i * n..(i + 1) * n].to_vec())
            .expect("clip extents")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub seed: u64,
    pub train: Split,
    pub test: Split,
    /// Selected voxel indices into the full voxel axis.
    pub selected: Vec<usize>,
    /// Region label of every selected voxel.
    pub region: Vec<usize>,
    pub signal_mask: Vec<bool>,
    pub t_stats: Vec<f64>,
}

struct Stimulus {
    scenes: Vec<SyntheticScene>,
    /// Per frame: (scene occurrence index, frame index within the scene).
    frames: Vec<(usize, usize)>,
}

fn stimulus_sequence<R: Rng + ?Sized>(catalog: &SceneCatalog, cfg: &DatasetConfig, frames: usize, r: &mut R) -> Stimulus {
    let mut scenes = Vec::new();
    let mut seq = Vec::with_capacity(frames);
    while seq.len() < frames {
        let mut scene = catalog.random_scene(r);
        if let Some(prev) = scenes.last() {
            while scene.scene_id == SyntheticScene::clone(prev).scene_id {
                scene = catalog.random_scene(r);
            }
        }
        let dur = r.random_range(cfg.min_scene_frames..=cfg.max_scene_frames);
        let idx = scenes.len();
        scenes.push(scene);
        for k in 0..dur {
            seq.push((idx, k));
        }
    }
    seq.truncate(frames);
    Stimulus { scenes, frames: seq }
}

/// Fixed per-subject tuning of every voxel to the stimulus features.
struct Tuning {
    labels: Vec<usize>,
    weights: Vec<Vec<f64>>,
}

const MOTION_FEATURES: usize = 3;

impl Tuning {
    fn new<R: Rng + ?Sized>(labels: Vec<usize>, r: &mut R) -> Self {
        let weights = labels
            .iter()
            .map(|&l| {
                let dim = match l {
                    0 => SEMANTIC_DIM,
                    1 => MOTION_FEATURES,
                    2 => CHANNELS,
                    _ => 0,
                };
                (0..dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
            })
            .collect();
        Self { labels, weights }
    }

    fn features(region: usize, scene: &SyntheticScene, mean_rgb: &[f64; 3]) -> Vec<f64> {
        match region {
            0 => scene.semantic_code.clone(),
            1 => {
                let [vx, vy] = scene.motion_code;
                vec![vx, vy, (vx * vx + vy * vy).sqrt()]
            }
            2 => mean_rgb.iter().map(|c| c - 0.5).collect(),
            _ => Vec::new(),
        }
    }
}

fn render_stimulus(stim: &Stimulus, fps: usize) -> Vec<Vec<f64>> {
    let n = frame_len();
    stim.frames
        .iter()
        .map(|&(s, k)| {
            let mut px = vec![0.0; n];
            stim.scenes[s].render_into(k, fps, &mut px);
            px
        })
        .collect()
}

fn mean_rgb(px: &[f64]) -> [f64; 3] {
    let mut m = [0.0; 3];
    for chunk in px.chunks(CHANNELS) {
        for c in 0..CHANNELS {
            m[c] += chunk[c];
        }
    }
    let n = (px.len() / CHANNELS) as f64;
    m.map(|v| v / n)
}

/// `[T_hi × V]` neural drive, each signal voxel standardized over time.
fn neural_drive(stim: &Stimulus, pixels: &[Vec<f64>], tuning: &Tuning) -> Tensor {
    let t = stim.frames.len();
    let v = tuning.labels.len();
    let mut drive = vec![0.0; t * v];
    for (i, (&(s, _), px)) in stim.frames.iter().zip(pixels).enumerate() {
        let rgb = mean_rgb(px);
        let scene = &stim.scenes[s];
        let feats: Vec<Vec<f64>> = (0..3).map(|r| Tuning::features(r, scene, &rgb)).collect();
        for j in 0..v {
            let l = tuning.labels[j];
            if l < 3 {
                drive[i * v + j] = tuning.weights[j].iter().zip(&feats[l]).map(|(w, f)| w * f).sum();
            }
        }
    }
    for j in 0..v {
        let col: Vec<f64> = (0..t).map(|i| drive[i * v + j]).collect();
        let mean = col.iter().sum::<f64>() / t as f64;
        let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t as f64).sqrt();
        for i in 0..t {
            drive[i * v + j] = if sd > 1e-12 { (drive[i * v + j] - mean) / sd } else { 0.0 };
        }
    }
    Tensor::new(&[t, v], drive).expect("drive extents")
}

fn clean_signal_std(rec_clean: &Tensor, mask: &[bool]) -> f64 {
    let v = mask.len();
    let vals: Vec<f64> = rec_clean
        .data()
        .iter()
        .enumerate()
        .filter(|(i, _)| mask[i % v])
        .map(|(_, &x)| x)
        .collect();
    if vals.is_empty() {
        return 1.0;
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    (vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
}

struct RawSplit {
    stim: Stimulus,
    pixels: Vec<Vec<f64>>,
    recording: SubjectRecording,
}

fn raw_split(
    cfg: &DatasetConfig,
    catalog: &SceneCatalog,
    tuning: &Tuning,
    hrf: &HrfModel,
    samples: usize,
    seed: u64,
    label: &str,
    noise_sigma: Option<f64>,
) -> Result<(RawSplit, f64)> {
    let fps_scan = cfg.frames_per_scan();
    let total_scans = samples + 2 * MARGIN_SCANS;
    let mut r = rng::stream(seed, &format!("stimulus-{label}"));
    let stim = stimulus_sequence(catalog, cfg, total_scans * fps_scan, &mut r);
    let pixels = render_stimulus(&stim, cfg.fps);
    let drive = neural_drive(&stim, &pixels, tuning);
    let mask: Vec<bool> = tuning.labels.iter().map(|&l| l < 3).collect();
    let sigma = match noise_sigma {
        Some(s) => s,
        None => {
            let clean = super::bold::convolve_drive(&drive, hrf, fps_scan)?;
            clean_signal_std(&clean, &mask) / cfg.snr
        }
    };
    let mut nr = rng::stream(seed, &format!("noise-{label}"));
    let recording = simulate_bold(&drive, hrf, fps_scan, cfg.tr_seconds, sigma, cfg.repeats, &mut nr)?;
    Ok((RawSplit { stim, pixels, recording }, sigma))
}

fn build_split(raw: &RawSplit, cfg: &DatasetConfig, samples: usize, selected: &[usize], stats: &[(f64, f64)]) -> Result<Split> {
    let f = cfg.frames_per_scan();
    let n = frame_len();
    let mut clips = Vec::with_capacity(samples * f * n);
    let mut frame_class = Vec::with_capacity(samples);
    let mut video_class = Vec::with_capacity(samples);
    let mut scene_id = Vec::with_capacity(samples);
    let mut scene_instance = Vec::with_capacity(samples);
    let mut captions = Vec::with_capacity(samples);
    for t in 0..samples {
        let frame0 = (MARGIN_SCANS + t) * f;
        let mut classes = Vec::with_capacity(f);
        for k in 0..f {
            clips.extend_from_slice(&raw.pixels[frame0 + k]);
            classes.push(raw.stim.scenes[raw.stim.frames[frame0 + k].0].scene_id);
        }
        let (mid, _) = raw.stim.frames[frame0 + f / 2];
        let mid_scene = &raw.stim.scenes[mid];
        video_class.push(mid_scene.video_class());
        scene_id.push(mid_scene.scene_id);
        scene_instance.push(mid);
        let first = &raw.stim.scenes[raw.stim.frames[frame0].0];
        let last = &raw.stim.scenes[raw.stim.frames[frame0 + f - 1].0];
        let cap = window_caption(&[first, last]);
        debug_assert_eq!(cap.len(), CAPTION_LEN);
        captions.push(cap);
        frame_class.push(classes);
    }
    let standardize = |rep: &Tensor| -> Tensor {
        let t_total = rep.shape()[0];
        let v = rep.shape()[1];
        Tensor::from_fn(&[t_total, selected.len()], |i| {
            let (row, col) = (i / selected.len(), i % selected.len());
            let (m, s) = stats[col];
            (rep.data()[row * v + selected[col]] - m) / s
        })
    };
    let fmri = standardize(&raw.recording.averaged());
    let reps: Vec<Tensor> = raw.recording.repeats.iter().map(standardize).collect();
    Ok(Split {
        clips: Tensor::new(&[samples, f, FRAME_SIZE, FRAME_SIZE, CHANNELS], clips)?,
        frame_class,
        video_class,
        scene_id,
        scene_instance,
        captions,
        fmri,
        repeats: Tensor::stack(&reps)?,
    })
}

impl Dataset {
    pub fn generate(cfg: &DatasetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let catalog = SceneCatalog::new();
        let labels = cfg.region_labels();
        let tuning = Tuning::new(labels.clone(), &mut rng::stream(seed, "tuning"));
        let hrf = HrfModel::canonical(1.0 / cfg.fps as f64);
        let (train_raw, sigma) = raw_split(cfg, &catalog, &tuning, &hrf, cfg.train_scans, seed, "train", None)?;
        let (test_raw, _) = raw_split(cfg, &catalog, &tuning, &hrf, cfg.test_scans, seed, "test", Some(sigma))?;

        // selection and standardization see only the sampled training scans
        let lo = MARGIN_SCANS;
        let hi = MARGIN_SCANS + cfg.train_scans;
        let train_reps: Vec<Tensor> = train_raw
            .recording
            .repeats
            .iter()
            .map(|r| r.select_leading(&(lo..hi).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        let sel = select_voxels(&train_reps, &cfg.selection)?;
        if sel.indices.is_empty() {
            return Err(Error::NonFinite("voxel selection kept no voxels".into()));
        }
        let avg = train_raw.recording.averaged();
        let v = cfg.voxels;
        let stats: Vec<(f64, f64)> = sel
            .indices
            .iter()
            .map(|&j| {
                let col: Vec<f64> = (lo..hi).map(|t| avg.data()[t * v + j]).collect();
                let m = col.iter().sum::<f64>() / col.len() as f64;
                let s = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
                (m, if s > 1e-12 { s } else { 1.0 })
            })
            .collect();
        let train = build_split(&train_raw, cfg, cfg.train_scans, &sel.indices, &stats)?;
        let test = build_split(&test_raw, cfg, cfg.test_scans, &sel.indices, &stats)?;
        Ok(Self {
            config: cfg.clone(),
            seed,
            train,
            test,
            region: sel.indices.iter().map(|&j| labels[j]).collect(),
            selected: sel.indices,
            signal_mask: train_raw.recording.signal_mask.clone(),
            t_stats: sel.t_stats,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, split) in [("train", &self.train), ("test", &self.test)] {
            let d = dir.join(name);
            fs::create_dir_all(&d)?;
            let n = split.len();
            let f = split.frames();
            let mut clips = Container::new();
            clips.put_f64("clips", split.clips.clone());
            let fc: Vec<usize> = split.frame_class.iter().flatten().copied().collect();
            clips.put_i64("frame_class", &[n, f], fc.iter().map(|&x| x as i64).collect())?;
            clips.put_indices("video_class", &split.video_class);
            clips.put_indices("scene_id", &split.scene_id);
            clips.put_indices("scene_instance", &split.scene_instance);
            clips.write(&d.join("clips.bin"))?;

            let mut fmri = Container::new();
            fmri.put_f64("fmri", split.fmri.clone());
            fmri.put_f64("repeats", split.repeats.clone());
            fmri.put_indices("selected", &self.selected);
            fmri.put_indices("region", &self.region);
            let mask: Vec<usize> = self.signal_mask.iter().map(|&m| usize::from(m)).collect();
            fmri.put_indices("signal_mask", &mask);
            fmri.put_f64("t_stats", Tensor::new(&[self.t_stats.len()], self.t_stats.clone())?);
            fmri.write(&d.join("fmri.bin"))?;

            let mut caps = Container::new();
            let flat: Vec<i64> = split.captions.iter().flatten().map(|&x| x as i64).collect();
            caps.put_i64("captions", &[n, CAPTION_LEN], flat)?;
            caps.write(&d.join("captions.bin"))?;

            let meta = format!(
                "tr_seconds={}\nfps={}\nwindow_frames={}\nvoxel_count={}\nseed={}\n",
                self.config.tr_seconds,
                self.config.fps,
                f,
                self.selected.len(),
                self.seed
            );
            fs::write(d.join("meta.txt"), meta)?;
        }
        Ok(())
    }

    /// Load a dataset written by [`Dataset::write`]. The generator config is
    /// not stored; the caller supplies it.
    pub fn read(dir: &Path, config: &DatasetConfig) -> Result<Self> {
        let mut splits = Vec::new();
        let mut shared = None;
        let mut seed = 0;
        for name in ["train", "test"] {
            let d = dir.join(name);
            let clips = Container::read(&d.join("clips.bin"))?;
            let fmri = Container::read(&d.join("fmri.bin"))?;
            let caps = Container::read(&d.join("captions.bin"))?;
            let meta = fs::read_to_string(d.join("meta.txt"))?;
            seed = meta
                .lines()
                .find_map(|l| l.strip_prefix("seed="))
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format {
                    path: d.join("meta.txt"),
                    reason: "missing seed".into(),
                })?;
            let (fc_shape, fc) = clips.i64("frame_class")?;
            let f = fc_shape[1];
            let frame_class = fc.chunks(f).map(|c| c.iter().map(|&x| x as usize).collect()).collect();
            let (_, cap) = caps.i64("captions")?;
            let captions = cap.chunks(CAPTION_LEN).map(|c| c.iter().map(|&x| x as usize).collect()).collect();
            splits.push(Split {
                clips: clips.f64("clips")?.clone(),
                frame_class,
                video_class: clips.indices("video_class")?,
                scene_id: clips.indices("scene_id")?,
                scene_instance: clips.indices("scene_instance")?,
                captions,
                fmri: fmri.f64("fmri")?.clone(),
                repeats: fmri.f64("repeats")?.clone(),
            });
            shared = Some((
                fmri.indices("selected")?,
                fmri.indices("region")?,
                fmri.indices("signal_mask")?.into_iter().map(|m| m == 1).collect(),
                fmri.f64("t_stats")?.data().to_vec(),
            ));
        }
        let (selected, region, signal_mask, t_stats) = shared.expect("two splits");
        let test = splits.pop().expect("test");
        let train = splits.pop().expect("train");
        Ok(Self {
            config: config.clone(),
            seed,
            train,
            test,
            selected,
            region,
            signal_mask,
            t_stats,
        })
    }
}
