//! Stage bodies. Each returns the artifacts it wrote, relative to the run
//! directory.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample as sample_indices;

use super::config::{GuidanceMode, NegativeSource, RunConfig};
use super::{checkpoint, Run, Stage};
use crate::container::Container;
use crate::contrastive::{augment_caption, random_crop, retrieval_eval, trimodal_loss, unique_scene_batch, FrozenEmbedder};
use crate::diffusion::{
    self, ddim_sample, fmri_condition, fmri_negative, train_gen_step, GuidanceSpec, LatentClip, NetDenoiser, NoiseSchedule,
    VideoDenoiser,
};
use crate::encoder::mbm::{init_decoder, mbm_forward, sample_masks, MaskSet};
use crate::encoder::{sparsify, FmriEncoder};
use crate::error::{Error, Result};
use crate::eval::attention::{attention_report, report_layers, ColumnMean};
use crate::eval::classifier::{ClassifierStub, StubKind};
use crate::eval::nway::{nway_topk_items, NwayConfig};
use crate::eval::report::{attention_csv, bar_chart_svg, fmt, metric_means, metrics_csv, write_text, ItemMetrics, METRIC_NAMES};
use crate::eval::ssim::{ssim_clip, SsimConfig};
use crate::numerics::nn::ParamStore;
use crate::numerics::{AdamW, Graph, Tensor};
use crate::rng;
use crate::synthdata::dataset::{Dataset, Split, REGION_NAMES};

const PRETRAIN_CKPT: &str = "ckpt/pretrain.nct";
const CONTRASTIVE_CKPT: &str = "ckpt/contrastive.nct";
const TRAIN_GEN_CKPT: &str = "ckpt/train_gen.nct";
const COTRAIN_CKPT: &str = "ckpt/cotrain.nct";
const SAMPLES: &str = "samples.nct";
pub const METRICS_CSV: &str = "metrics.csv";

/// Weight decay of every optimizer.
const WEIGHT_DECAY: f64 = 0.01;
/// Held-out items scored during training.
const EVAL_ITEMS: usize = 64;
/// Learning-curve evaluation period in steps.
const EVAL_EVERY: usize = 50;
/// Conditions per DDIM call.
const SAMPLE_CHUNK: usize = 16;
/// Windows per attention-map forward pass.
const ATTENTION_CHUNK: usize = 32;

pub(crate) fn execute(run: &mut Run, stage: Stage) -> Result<Vec<String>> {
    match stage {
        Stage::GenData => gen_data(run),
        Stage::Pretrain => pretrain(run),
        Stage::Contrastive => contrastive(run),
        Stage::TrainGen => train_gen(run),
        Stage::Cotrain => cotrain(run),
        Stage::Sample => sample(run),
        Stage::Evaluate => evaluate(run),
        Stage::Interpret => interpret(run),
        Stage::Report => report(run),
        Stage::Ablate => Err(Error::Config("ablate is not a single-run stage".into())),
    }
}

fn rel_files(root: &Path, sub: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut todo = vec![root.join(sub)];
    while let Some(d) = todo.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                todo.push(p);
            } else {
                let rel = p.strip_prefix(root).expect("under root");
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_dataset(run: &Run) -> Result<Dataset> {
    Dataset::read(&run.path("data"), &run.cfg.dataset())
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} loss")))
    }
}

fn save_ckpt(run: &Run, rel: &str, stage: Stage, store: &ParamStore, keep: impl Fn(&str) -> bool) -> Result<()> {
    checkpoint::save(&run.path(rel), stage.name(), &run.cfg.stage_hash(stage), store, keep)
}

fn load_ckpt(run: &Run, rel: &str, stage: Stage) -> Result<ParamStore> {
    checkpoint::load(&run.path(rel), stage.name())
}

fn write_rel(run: &Run, rel: &str, text: &str, out: &mut Vec<String>) -> Result<()> {
    write_text(&run.path(rel), text)?;
    out.push(rel.to_string());
    Ok(())
}

fn batch<R: rand::Rng + ?Sized>(n: usize, size: usize, r: &mut R) -> Vec<usize> {
    let mut idx = sample_indices(r, n, size.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Evenly spaced indices into `0..n`, at most `k` of them (`k = 0` is all).
pub fn spread(n: usize, k: usize) -> Vec<usize> {
    if k == 0 || k >= n {
        return (0..n).collect();
    }
    (0..k).map(|i| i * n / k).collect()
}

/// One item per scene instance (its first sample), the held-out pairs of
/// the retrieval test.
pub fn distinct_scene_items(split: &Split) -> Vec<usize> {
    let mut seen = std::collections::BTreeSet::new();
    (0..split.len()).filter(|&i| seen.insert(split.scene_instance[i])).collect()
}

fn clips_of(split: &Split, idx: &[usize]) -> Result<Tensor> {
    Tensor::stack(&idx.iter().map(|&i| split.clip(i)).collect::<Vec<_>>())
}

fn windows_of(cfg: &RunConfig, split: &Split, idx: &[usize]) -> Result<Tensor> {
    split.windows(idx, cfg.window, cfg.hrf_shift_scans, cfg.window_direction)
}

fn latents_of(split: &Split, idx: &[usize]) -> Result<Tensor> {
    let z: Vec<Tensor> = idx.iter().map(|&i| LatentClip::from_pixels(&split.clip(i)).map(|l| l.z)).collect::<Result<_>>()?;
    Tensor::stack(&z)
}

fn gen_data(run: &mut Run) -> Result<Vec<String>> {
    let ds = Dataset::generate(&run.cfg.dataset(), run.cfg.seed)?;
    let dir = run.path("data");
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    ds.write(&dir)?;
    rel_files(&run.dir, "data")
}

/// Masked-patch MSE of the pretraining evaluation set.
fn mbm_eval(enc: &FmriEncoder, store: &ParamStore, x: &Tensor, masks: &MaskSet) -> Result<f64> {
    let mut g = Graph::new();
    let out = mbm_forward(enc, &mut g, store, x, masks)?;
    Ok(g.value(out.loss).item())
}

fn pretrain(run: &mut Run) -> Result<Vec<String>> {
    let cfg = run.cfg.clone();
    let ds = load_dataset(run)?;
    let enc = FmriEncoder::new(cfg.patch(), ds.train.voxels())?;
    let mut store = ParamStore::new();
    let mut r = rng::stream(cfg.seed, "pretrain");
    enc.init(&mut store, &mut r);
    init_decoder(&enc, &mut store, &mut r);
    // every recorded training scan is unlabeled pretraining data
    let scans = &ds.train.fmri;
    let eval_idx = spread(ds.test.fmri.shape()[0], EVAL_ITEMS);
    let eval_x = ds.test.fmri.select_leading(&eval_idx)?;
    let eval_masks = sample_masks(eval_idx.len(), enc.tokens(), cfg.mask_ratio, &mut rng::stream(cfg.seed, "pretrain-eval"))?;
    let mut opt = AdamW::new(cfg.pretrain_lr, WEIGHT_DECAY);
    let mut curve = String::from("step,train_loss\n");
    let mut evals = String::from("step,eval_masked_mse\n");
    for step in 0..cfg.pretrain_steps {
        if step % EVAL_EVERY == 0 {
            let _ = writeln!(evals, "{step},{}", fmt(mbm_eval(&enc, &store, &eval_x, &eval_masks)?));
        }
        let idx = batch(scans.shape()[0], cfg.pretrain_batch, &mut r);
        let x = scans.select_leading(&idx)?;
        let masks = sample_masks(idx.len(), enc.tokens(), cfg.mask_ratio, &mut r)?;
        let mut g = Graph::new();
        let out = mbm_forward(&enc, &mut g, &store, &x, &masks)?;
        let loss = check_finite(g.value(out.loss).item(), "masked modeling")?;
        let grads = g.backward(out.loss)?;
        opt.step(&mut store, &grads)?;
        let _ = writeln!(curve, "{step},{}", fmt(loss));
    }
    let _ = writeln!(evals, "{},{}", cfg.pretrain_steps, fmt(mbm_eval(&enc, &store, &eval_x, &eval_masks)?));
    save_ckpt(run, PRETRAIN_CKPT, Stage::Pretrain, &store, |_| true)?;
    let mut out = vec![PRETRAIN_CKPT.to_string()];
    write_rel(run, "curves/pretrain.csv", &curve, &mut out)?;
    write_rel(run, "curves/pretrain_eval.csv", &evals, &mut out)?;
    Ok(out)
}

/// Pooled fMRI embeddings of `[n, w, V]` windows without dropout.
fn pooled(enc: &FmriEncoder, store: &ParamStore, windows: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(windows.clone());
    let (out, _) = enc.encode::<rng::Rng>(&mut g, store, x, None)?;
    Ok(g.value(out.pooled).clone())
}

/// Retrieval@1 of held-out fMRI against caption and clip embeddings.
pub struct RetrievalScores {
    pub text: f64,
    pub image: f64,
    pub chance: f64,
}

fn retrieval(cfg: &RunConfig, enc: &FmriEncoder, store: &ParamStore, ds: &Dataset) -> Result<RetrievalScores> {
    let idx = distinct_scene_items(&ds.test);
    let f = pooled(enc, store, &windows_of(cfg, &ds.test, &idx)?)?;
    let caps: Vec<Vec<usize>> = idx.iter().map(|&i| ds.test.captions[i].clone()).collect();
    let t = FrozenEmbedder::text(cfg.embed_dim).embed_text(&caps)?;
    let im = FrozenEmbedder::image(cfg.embed_dim).embed_image(&clips_of(&ds.test, &idx)?)?;
    Ok(RetrievalScores {
        text: retrieval_eval(&f, &t)?,
        image: retrieval_eval(&f, &im)?,
        chance: 1.0 / idx.len() as f64,
    })
}

fn retrieval_row(step: usize, s: &RetrievalScores) -> String {
    format!("{step},{},{},{}\n", fmt(s.text), fmt(s.image), fmt(s.chance))
}

fn contrastive(run: &mut Run) -> Result<Vec<String>> {
    let cfg = run.cfg.clone();
    let ds = load_dataset(run)?;
    let enc = FmriEncoder::new(cfg.patch(), ds.train.voxels())?;
    let pre = load_ckpt(run, PRETRAIN_CKPT, Stage::Pretrain)?;
    let mut store = ParamStore::new();
    for (n, t) in pre.iter().filter(|(n, _)| n.starts_with("enc.")) {
        store.insert(n, t.clone());
    }
    let mut curve = String::from("step,train_loss\n");
    let mut evals = String::from("step,retrieval_text,retrieval_image,chance\n");
    evals.push_str(&retrieval_row(0, &retrieval(&cfg, &enc, &store, &ds)?));
    if let Some(ccfg) = cfg.contrastive_config() {
        let text = FrozenEmbedder::text(cfg.embed_dim);
        let image = FrozenEmbedder::image(cfg.embed_dim);
        let mut r = rng::stream(cfg.seed, "contrastive");
        let mut opt = AdamW::new(cfg.contrastive_lr, WEIGHT_DECAY);
        for step in 0..cfg.contrastive_steps {
            let idx = unique_scene_batch(&ds.train.scene_id, cfg.contrastive_batch, &mut r);
            if idx.len() < 2 {
                return Err(Error::Config("contrastive batches need at least two distinct scenes".into()));
            }
            let x = sparsify(&windows_of(&cfg, &ds.train, &idx)?, cfg.sparsify, &mut r);
            let caps: Vec<Vec<usize>> = idx
                .iter()
                .map(|&i| augment_caption(&ds.train.captions[i], cfg.caption_synonym_prob, &mut r))
                .collect();
            let crops: Vec<Tensor> = idx
                .iter()
                .map(|&i| random_crop(&ds.train.clip(i), cfg.crop_prob, cfg.crop_margin, &mut r))
                .collect();
            let et = text.embed_text(&caps)?;
            let ei = image.embed_image(&Tensor::stack(&crops)?)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let (out, _) = enc.encode(&mut g, &store, xv, Some(&mut r))?;
            let tv = g.constant(et);
            let iv = g.constant(ei);
            let loss = trimodal_loss(&mut g, out.pooled, tv, iv, &ccfg)?;
            let value = check_finite(g.value(loss).item(), "contrastive")?;
            let grads = g.backward(loss)?;
            opt.step(&mut store, &grads)?;
            let _ = writeln!(curve, "{step},{}", fmt(value));
        }
        evals.push_str(&retrieval_row(cfg.contrastive_steps, &retrieval(&cfg, &enc, &store, &ds)?));
    }
    save_ckpt(run, CONTRASTIVE_CKPT, Stage::Contrastive, &store, |_| true)?;
    let mut out = vec![CONTRASTIVE_CKPT.to_string()];
    write_rel(run, "curves/contrastive.csv", &curve, &mut out)?;
    write_rel(run, "curves/contrastive_eval.csv", &evals, &mut out)?;
    Ok(out)
}

fn train_gen(run: &mut Run) -> Result<Vec<String>> {
    let cfg = run.cfg.clone();
    let ds = load_dataset(run)?;
    let den = VideoDenoiser::new(cfg.denoiser())?;
    let schedule = NoiseSchedule::default_linear(cfg.timesteps)?;
    let mut store = ParamStore::new();
    let mut r = rng::stream(cfg.seed, "train-gen");
    den.init(&mut store, &mut r);
    let all: Vec<usize> = (0..ds.train.len()).collect();
    let z_all = latents_of(&ds.train, &all)?;
    let tokens = FrozenEmbedder::text(cfg.embed_dim).token_embeddings(&ds.train.captions)?;
    let mut opt = AdamW::new(cfg.gen_lr, WEIGHT_DECAY);
    let mut curve = String::from("step,train_loss\n");
    for step in 0..cfg.gen_steps {
        let idx = batch(all.len(), cfg.gen_batch, &mut r);
        let z0 = z_all.select_leading(&idx)?;
        let cond = tokens.select_leading(&idx)?;
        let loss = train_gen_step(&den, &schedule, &mut store, &mut opt, &z0, &cond, cfg.cond_drop, &mut r)?;
        let _ = writeln!(curve, "{step},{}", fmt(loss));
    }
    save_ckpt(run, TRAIN_GEN_CKPT, Stage::TrainGen, &store, |_| true)?;
    let mut out = vec![TRAIN_GEN_CKPT.to_string()];
    write_rel(run, "curves/train_gen.csv", &curve, &mut out)?;
    Ok(out)
}

/// Fixed held-out batch for the co-training curve: windows, clean
/// latents, timesteps and noise.
pub struct CotrainProbe {
    pub windows: Tensor,
    pub z0: Tensor,
    pub t: Vec<usize>,
    pub noise: Tensor,
}

impl CotrainProbe {
    pub fn new(cfg: &RunConfig, ds: &Dataset, schedule: &NoiseSchedule) -> Result<Self> {
        let idx = spread(ds.test.len(), EVAL_ITEMS.min(32));
        let z0 = latents_of(&ds.test, &idx)?;
        let (t, noise) = diffusion::draw_noise(schedule, &z0, &mut rng::stream(cfg.seed, "cotrain-probe"));
        Ok(Self {
            windows: windows_of(cfg, &ds.test, &idx)?,
            z0,
            t,
            noise,
        })
    }

    /// Noise-prediction MSE of the probe, no dropout or condition drop.
    pub fn loss(&self, enc: &FmriEncoder, den: &VideoDenoiser, schedule: &NoiseSchedule, store: &ParamStore) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(self.windows.clone());
        let (out, _) = enc.encode::<rng::Rng>(&mut g, store, x, None)?;
        let loss = diffusion::noise_prediction_loss(&mut g, den, store, schedule, &self.z0, &self.t, &self.noise, Some(out.unpooled))?;
        Ok(g.value(loss).item())
    }
}

/// Run `steps` co-training steps on the training split, recording the
/// per-step loss and the probe loss every [`EVAL_EVERY`] steps.
#[allow(clippy::too_many_arguments)]
pub fn cotrain_loop(
    cfg: &RunConfig,
    ds: &Dataset,
    enc: &FmriEncoder,
    den: &VideoDenoiser,
    schedule: &NoiseSchedule,
    store: &mut ParamStore,
    steps: usize,
    seed_label: &str,
) -> Result<(String, String)> {
    let probe = CotrainProbe::new(cfg, ds, schedule)?;
    let all: Vec<usize> = (0..ds.train.len()).collect();
    let z_all = latents_of(&ds.train, &all)?;
    let mut r = rng::stream(cfg.seed, seed_label);
    let mut opt = AdamW::new(cfg.cotrain_lr, WEIGHT_DECAY);
    let mut curve = String::from("step,train_loss\n");
    let mut evals = String::from("step,probe_loss\n");
    for step in 0..steps {
        if step % EVAL_EVERY == 0 {
            let _ = writeln!(evals, "{step},{}", fmt(probe.loss(enc, den, schedule, store)?));
        }
        let idx = batch(all.len(), cfg.cotrain_batch, &mut r);
        let x = windows_of(cfg, &ds.train, &idx)?;
        let z0 = z_all.select_leading(&idx)?;
        let loss = diffusion::cotrain_step(enc, den, schedule, store, &mut opt, &x, &z0, cfg.cond_drop, &mut r)?;
        let _ = writeln!(curve, "{step},{}", fmt(loss));
    }
    let _ = writeln!(evals, "{steps},{}", fmt(probe.loss(enc, den, schedule, store)?));
    store.unfreeze_all();
    Ok((curve, evals))
}

fn cotrain(run: &mut Run) -> Result<Vec<String>> {
    let cfg = run.cfg.clone();
    let ds = load_dataset(run)?;
    let enc = FmriEncoder::new(cfg.patch(), ds.train.voxels())?;
    let den = VideoDenoiser::new(cfg.denoiser())?;
    let schedule = NoiseSchedule::default_linear(cfg.timesteps)?;
    let mut store = load_ckpt(run, CONTRASTIVE_CKPT, Stage::Contrastive)?;
    store.absorb(&load_ckpt(run, TRAIN_GEN_CKPT, Stage::TrainGen)?, "");
    let (curve, evals) = cotrain_loop(&cfg, &ds, &enc, &den, &schedule, &mut store, cfg.cotrain_steps, "cotrain")?;
    save_ckpt(run, COTRAIN_CKPT, Stage::Cotrain, &store, |_| true)?;
    let mut out = vec![COTRAIN_CKPT.to_string()];
    write_rel(run, "curves/cotrain.csv", &curve, &mut out)?;
    write_rel(run, "curves/cotrain_eval.csv", &evals, &mut out)?;
    Ok(out)
}

/// Test items reconstructed by the sampler.
pub fn sample_items(cfg: &RunConfig, ds: &Dataset) -> Vec<usize> {
    spread(ds.test.len(), cfg.sample_items)
}

fn sample(run: &mut Run) -> Result<Vec<String>> {
    let cfg = run.cfg.clone();
    let ds = load_dataset(run)?;
    let enc = FmriEncoder::new(cfg.patch(), ds.train.voxels())?;
    let den = VideoDenoiser::new(cfg.denoiser())?;
    let schedule = NoiseSchedule::default_linear(cfg.timesteps)?;
    let store = load_ckpt(run, COTRAIN_CKPT, Stage::Cotrain)?;
    let items = sample_items(&cfg, &ds);
    let positive = fmri_condition(&enc, &store, &windows_of(&cfg, &ds.test, &items)?)?;
    let negative = match cfg.guidance {
        GuidanceMode::ClassifierFree => None,
        GuidanceMode::Adversarial => {
            let split = match cfg.negative_source {
                NegativeSource::Test => &ds.test,
                NegativeSource::Train => &ds.train,
            };
            let all: Vec<usize> = (0..split.len()).collect();
            Some(fmri_negative(&enc, &store, &windows_of(&cfg, split, &all)?)?)
        }
    };
    let net = NetDenoiser { net: &den, store: &store };
    let base_seed = if cfg.sample_seed == 0 { cfg.seed } else { cfg.sample_seed };
    let per = positive.numel() / items.len();
    let frames = ds.test.frames();
    let mut latents = Vec::with_capacity(items.len());
    for (k, chunk) in (0..items.len()).collect::<Vec<_>>().chunks(SAMPLE_CHUNK).enumerate() {
        let mut shape = positive.shape().to_vec();
        shape[0] = chunk.len();
        let pos = Tensor::new(&shape, positive.data()[chunk[0] * per..(chunk[chunk.len() - 1] + 1) * per].to_vec())?;
        let spec = GuidanceSpec {
            positive: pos,
            negative: negative.clone(),
            scale: cfg.guidance_scale,
        };
        let seed = rng::stream_seed(base_seed, "ddim", k as u64);
        for clip in ddim_sample(&net, &schedule, &spec, frames, &cfg.ddim(), seed)? {
            latents.push(clip.z);
        }
    }
    let mut c = Container::new();
    c.put_indices("items", &items);
    c.put_f64("latents", Tensor::stack(&latents)?);
    c.write(&run.path(SAMPLES))?;
    Ok(vec![SAMPLES.to_string()])
}

/// Retrieval-style 2-way identification of each generated clip: the
/// fraction of other-scene test clips that are less cosine-similar to it
/// than its own ground truth, in the frozen image embedding.
pub fn identification(gen: &Tensor, gt: &Tensor, scene: &[usize]) -> Vec<f64> {
    let d = gen.shape()[1];
    let n = gen.shape()[0];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    (0..n)
        .map(|i| {
            let gi = &gen.data()[i * d..(i + 1) * d];
            let own = dot(gi, &gt.data()[i * d..(i + 1) * d]);
            let others: Vec<usize> = (0..n).filter(|&j| scene[j] != scene[i]).collect();
            if others.is_empty() {
                return 0.5;
            }
            let wins = others.iter().filter(|&&j| own > dot(gi, &gt.data()[j * d..(j + 1) * d])).count();
            wins as f64 / others.len() as f64
        })
        .collect()
}

/// Per-item metrics of generated `[n, F, H, W, C]` clips against ground
/// truth.
pub fn score_clips(cfg: &RunConfig, gen: &Tensor, gt: &Tensor, scene: &[usize], items: &[usize]) -> Result<Vec<ItemMetrics>> {
    let n = items.len();
    let f = gen.shape()[1];
    let frame_shape: Vec<usize> = std::iter::once(n * f).chain(gen.shape()[2..].iter().copied()).collect();
    let gen_frames = gen.reshape(&frame_shape)?;
    let gt_frames = gt.reshape(&frame_shape)?;
    let ssim_cfg = SsimConfig::default();
    let frame = ClassifierStub::shared(StubKind::Frame)?;
    let video = ClassifierStub::shared(StubKind::Video)?;
    let (fg, fp) = (frame.frame_probs(&gt_frames)?, frame.frame_probs(&gen_frames)?);
    let (vg, vp) = (video.video_probs(gt)?, video.video_probs(gen)?);
    let nway = |n_way: usize, label: &str| {
        let mut c = NwayConfig::new(n_way, 1, cfg.nway_trials, rng::stream_seed(cfg.seed, label, n_way as u64));
        if cfg.nway_gt_k > 0 {
            c.gt_k = Some(cfg.nway_gt_k);
        }
        c
    };
    let per_item = |v: Vec<f64>| -> Vec<f64> { v.chunks(f).map(|c| c.iter().sum::<f64>() / f as f64).collect() };
    let f2 = per_item(nway_topk_items(&fg, &fp, &nway(2, "frame-nway"))?);
    let f50 = per_item(nway_topk_items(&fg, &fp, &nway(50, "frame-nway"))?);
    let v2 = nway_topk_items(&vg, &vp, &nway(2, "video-nway"))?;
    let v50 = nway_topk_items(&vg, &vp, &nway(50, "video-nway"))?;
    let image = FrozenEmbedder::image(cfg.embed_dim);
    let ident = identification(&image.embed_image(gen)?, &image.embed_image(gt)?, scene);
    let per = gen.numel() / n;
    let clip = |t: &Tensor, i: usize| Tensor::new(&gen.shape()[1..], t.data()[i * per..(i + 1) * per].to_vec());
    (0..n)
        .map(|i| {
            Ok(ItemMetrics {
                item: items[i],
                ssim: ssim_clip(&clip(gen, i)?, &clip(gt, i)?, &ssim_cfg)?,
                two_way_top1: f2[i],
                fifty_way_top1: f50[i],
                video_two_way: v2[i],
                video_fifty_way: v50[i],
                identification: ident[i],
            })
        })
        .collect()
}

/// Decoded, `[0, 1]`-clamped generated clips of a finished sample stage,
/// with their test item indices.
pub fn generated_clips(run: &Run) -> Result<(Vec<usize>, Tensor)> {
    let c = Container::read(&run.path(SAMPLES))?;
    let items = c.indices("items")?;
    let lat = c.f64("latents")?;
    let px = diffusion::latent::decode(lat)?.map(|v| v.clamp(0.0, 1.0));
    Ok((items, px))
}

fn evaluate(run: &mut Run) -> Result<Vec<String>> {
    let cfg = run.cfg.clone();
    let ds = load_dataset(run)?;
    let (items, gen) = generated_clips(run)?;
    let gt = clips_of(&ds.test, &items)?;
    let scene: Vec<usize> = items.iter().map(|&i| ds.test.scene_instance[i]).collect();
    let rows = score_clips(&cfg, &gen, &gt, &scene, &items)?;
    let means = metric_means(&rows);
    let mut out = Vec::new();
    write_rel(run, METRICS_CSV, &metrics_csv(&rows), &mut out)?;
    let labels: Vec<String> = METRIC_NAMES.iter().map(|s| s.to_string()).collect();
    write_rel(run, "metrics.svg", &bar_chart_svg("Mean test metrics", &labels, &means), &mut out)?;
    Ok(out)
}

/// Stages whose encoders are interpreted, with their checkpoints.
const INTERPRETED: [(Stage, &str); 3] = [
    (Stage::Pretrain, PRETRAIN_CKPT),
    (Stage::Contrastive, CONTRASTIVE_CKPT),
    (Stage::Cotrain, COTRAIN_CKPT),
];

/// Column-mean spatial attention of every encoder layer over `[n, w, V]`
/// windows.
pub fn layer_attention(enc: &FmriEncoder, store: &ParamStore, windows: &Tensor) -> Result<Vec<ColumnMean>> {
    let n = windows.shape()[0];
    let mut acc = vec![ColumnMean::default(); enc.cfg.depth];
    for chunk in (0..n).collect::<Vec<_>>().chunks(ATTENTION_CHUNK) {
        let x = windows.select_leading(chunk)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (_, encoded) = enc.encode::<rng::Rng>(&mut g, store, xv, None)?;
        for (a, v) in acc.iter_mut().zip(&encoded.spatial_attention) {
            a.add(g.value(*v))?;
        }
    }
    Ok(acc)
}

fn interpret(run: &mut Run) -> Result<Vec<String>> {
    let cfg = run.cfg.clone();
    let ds = load_dataset(run)?;
    let enc = FmriEncoder::new(cfg.patch(), ds.train.voxels())?;
    let all: Vec<usize> = (0..ds.test.len()).collect();
    let mut out = Vec::new();
    for (stage, ckpt) in INTERPRETED {
        let store = load_ckpt(run, ckpt, stage)?;
        // the pretrained encoder has only seen single scans
        let w = if stage == Stage::Pretrain { 1 } else { cfg.window };
        let windows = ds.test.windows(&all, w, cfg.hrf_shift_scans, cfg.window_direction)?;
        let acc = layer_attention(&enc, &store, &windows)?;
        let reports = attention_report(stage.name(), &acc, &report_layers(cfg.depth), cfg.patch_size, &ds.region, &REGION_NAMES)?;
        for rep in reports {
            let base = format!("attention_{}_{}", stage.name(), rep.layer);
            write_rel(run, &format!("{base}.csv"), &attention_csv(&rep), &mut out)?;
            let title = format!("Attention share, {} layer {}", stage.name(), rep.layer);
            write_rel(run, &format!("{base}.svg"), &bar_chart_svg(&title, &rep.regions, &rep.shares), &mut out)?;
        }
    }
    Ok(out)
}

fn read_csv_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect())
}

fn report(run: &mut Run) -> Result<Vec<String>> {
    let mut s = String::from("# Run summary\n\n## Mean test metrics\n\n| metric | mean |\n|---|---|\n");
    let rows = read_csv_rows(&run.path(METRICS_CSV))?;
    for (k, name) in METRIC_NAMES.iter().enumerate() {
        let vals: Vec<f64> = rows.iter().filter_map(|r| r.get(k + 1)?.parse().ok()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        let _ = writeln!(s, "| {name} | {mean:.4} |");
    }
    s.push_str("\n## Learning curves (first and last evaluation)\n\n");
    for name in ["pretrain_eval", "contrastive_eval", "cotrain_eval"] {
        let rows = read_csv_rows(&run.path(&format!("curves/{name}.csv")))?;
        if let (Some(a), Some(b)) = (rows.first(), rows.last()) {
            let _ = writeln!(s, "- {name}: step {} -> {}: [{}] -> [{}]", a[0], b[0], a[1..].join(", "), b[1..].join(", "));
        }
    }
    s.push_str("\n## Attention shares\n\n| file | ");
    s.push_str(&REGION_NAMES.join(" | "));
    s.push_str(" |\n|---|");
    s.push_str(&"---|".repeat(REGION_NAMES.len()));
    s.push('\n');
    let interp = run.manifest.stages.get(&Stage::Interpret).map(|r| r.artifacts.clone()).unwrap_or_default();
    for a in interp.iter().filter(|a| a.ends_with(".csv")) {
        let shares: Vec<String> = read_csv_rows(&run.path(a))?.into_iter().filter_map(|r| r.get(1).cloned()).collect();
        let _ = writeln!(s, "| {a} | {} |", shares.join(" | "));
    }
    let mut out = Vec::new();
    write_rel(run, "summary.md", &s, &mut out)?;
    Ok(out)
}
