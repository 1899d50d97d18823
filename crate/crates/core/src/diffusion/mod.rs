//! Latent video diffusion: noise schedule, forward noising, guided noise
//! estimates, deterministic DDIM sampling and the two generator training
//! stages (caption-conditioned and fMRI-conditioned co-training).

pub mod denoiser;
pub mod latent;

use rand::Rng;
use rand_distr::StandardNormal;

pub use denoiser::{anchored_key_frames, is_attention_param, sc_attention, sc_key_frames, DenoiserConfig, VideoDenoiser};
pub use latent::{LatentClip, LATENT_CHANNELS};

use crate::encoder::FmriEncoder;
use crate::error::{Error, Result};
use crate::numerics::nn::ParamStore;
use crate::numerics::{AdamW, Graph, Tensor, Var};
use crate::rng;
use crate::synthdata::scene::GRID;

pub const DEFAULT_TIMESTEPS: usize = 100;
pub const DEFAULT_DDIM_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 12.5;

/// Linear β schedule. `alphas_cum[t]` is the product of `1 - β_s` for
/// `s < t`, so `alphas_cum[0] == 1` is clean data.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas_cum: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::Config(format!("need at least 2 timesteps, got {timesteps}")));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!("β range ({beta_start}, {beta_end}) must satisfy 0 < start < end < 1")));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
            .collect();
        let mut alphas_cum = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for b in &betas {
            alphas_cum.push(acc);
            acc *= 1.0 - b;
        }
        Ok(Self { betas, alphas_cum })
    }

    /// β from `1e-3` to `0.2`: the usual `1e-4..0.02` range rescaled for a
    /// tenth of the steps.
    pub fn default_linear(timesteps: usize) -> Result<Self> {
        let scale = 1000.0 / timesteps as f64;
        Self::linear(timesteps, (1e-4 * scale).min(0.1), (0.02 * scale).min(0.999))
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cum
            .get(t)
            .copied()
            .ok_or(Error::IndexOutOfRange { index: t, bound: self.timesteps() })
    }
}

/// `√ᾱ·z0 + √(1-ᾱ)·noise` for an explicit `ᾱ`.
pub fn q_sample_alpha(z0: &Tensor, alpha_bar: f64, noise: &Tensor) -> Result<Tensor> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z0.zip_map(noise, "q_sample", |x, n| a * x + b * n)
}

/// Forward noising at integer timestep `t`.
pub fn q_sample(schedule: &NoiseSchedule, z0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
    q_sample_alpha(z0, schedule.alpha_bar(t)?, noise)
}

/// Latent `z_t` at timestep `t` under a schedule.
#[derive(Clone, Debug)]
pub struct DiffusionState<'a> {
    pub z: Tensor,
    pub t: usize,
    pub schedule: &'a NoiseSchedule,
}

/// Anything that predicts the noise in `[B, F, c, h, w]` latents. `cond`
/// of `None` is the null condition.
pub trait Denoiser {
    fn predict(&self, z: &Tensor, t: usize, cond: Option<&Tensor>) -> Result<Tensor>;
}

/// A [`VideoDenoiser`] bound to its weights, evaluated without a tape.
pub struct NetDenoiser<'a> {
    pub net: &'a VideoDenoiser,
    pub store: &'a ParamStore,
}

impl Denoiser for NetDenoiser<'_> {
    fn predict(&self, z: &Tensor, t: usize, cond: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let c = cond.map(|c| g.constant(c.clone()));
        let ts = vec![t; z.shape()[0]];
        let out = self.net.forward(&mut g, self.store, zv, &ts, c)?;
        Ok(g.value(out).clone())
    }
}

/// Positive condition, optional negative condition (`None` is the null
/// condition, giving classifier-free guidance) and scale.
#[derive(Clone, Debug)]
pub struct GuidanceSpec {
    pub positive: Tensor,
    pub negative: Option<Tensor>,
    pub scale: f64,
}

impl GuidanceSpec {
    pub fn batch(&self) -> usize {
        self.positive.shape()[0]
    }

    fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0) || !self.scale.is_finite() {
            return Err(Error::invalid(format!("guidance scale {} must be finite and ≥ 0", self.scale)));
        }
        Ok(())
    }
}

/// Repeat a `[1, ...]` tensor to `[b, ...]`; other batch sizes pass through.
fn broadcast_batch(t: &Tensor, b: usize) -> Result<Tensor> {
    if t.shape()[0] == b {
        return Ok(t.clone());
    }
    if t.shape()[0] != 1 {
        return Err(Error::invalid(format!("cannot broadcast batch {} to {b}", t.shape()[0])));
    }
    t.select_leading(&vec![0; b])
}

/// `ε(z, c̄) + s·(ε(z, c) − ε(z, c̄))`, with `c̄` the null condition when
/// `spec.negative` is `None`. At `s = 1` the conditional estimate is
/// returned as is.
pub fn guided_noise<D: Denoiser + ?Sized>(den: &D, state: &DiffusionState, spec: &GuidanceSpec) -> Result<Tensor> {
    spec.validate()?;
    state.schedule.alpha_bar(state.t)?;
    let b = state.z.shape()[0];
    let pos = broadcast_batch(&spec.positive, b)?;
    let e_pos = den.predict(&state.z, state.t, Some(&pos))?;
    let e_neg = match &spec.negative {
        Some(n) => den.predict(&state.z, state.t, Some(&broadcast_batch(n, b)?))?,
        None => den.predict(&state.z, state.t, None)?,
    };
    let s = spec.scale;
    e_neg.zip_map(&e_pos, "guided_noise", |n, p| if s == 1.0 { p } else { n + s * (p - n) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DdimConfig {
    pub steps: usize,
    /// Clamp the predicted clean latent to `[-c, c]` at every step.
    pub clip_x0: Option<f64>,
}

impl Default for DdimConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_DDIM_STEPS, clip_x0: Some(3.0) }
    }
}

/// Descending visit order of `steps` timesteps spread over `1..T`.
pub fn ddim_timesteps(timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::invalid("DDIM needs at least one step"));
    }
    if steps > timesteps {
        return Err(Error::invalid(format!("{steps} DDIM steps exceed {timesteps} training timesteps")));
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|k| (((k + 1) as f64) * (timesteps - 1) as f64 / steps as f64).round() as usize)
        .collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

/// Deterministic (η = 0) DDIM from a seeded Gaussian start. Returns one
/// latent clip of `frames` frames per positive condition.
pub fn ddim_sample<D: Denoiser + ?Sized>(
    den: &D,
    schedule: &NoiseSchedule,
    spec: &GuidanceSpec,
    frames: usize,
    cfg: &DdimConfig,
    seed: u64,
) -> Result<Vec<LatentClip>> {
    let ts = ddim_timesteps(schedule.timesteps(), cfg.steps)?;
    if frames == 0 {
        return Err(Error::invalid("cannot sample zero frames"));
    }
    let b = spec.batch();
    let shape = [b, frames, LATENT_CHANNELS, GRID, GRID];
    let mut z = Tensor::randn(&shape, 1.0, &mut rng::stream(seed, "ddim-init"));
    for (k, &t) in ts.iter().enumerate() {
        let a_t = schedule.alpha_bar(t)?;
        let a_prev = match ts.get(k + 1) {
            Some(&tp) => schedule.alpha_bar(tp)?,
            None => 1.0,
        };
        let state = DiffusionState { z, t, schedule };
        let eps = guided_noise(den, &state, spec)?;
        let z_t = state.z;
        let (sa, sb) = (a_t.sqrt(), (1.0 - a_t).sqrt());
        let x0 = z_t.zip_map(&eps, "ddim", |zv, e| {
            let x = (zv - sb * e) / sa;
            match cfg.clip_x0 {
                Some(c) => x.clamp(-c, c),
                None => x,
            }
        })?;
        let (pa, pb) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
        z = x0.zip_map(&eps, "ddim", |x, e| pa * x + pb * e)?;
        if !z.all_finite() {
            return Err(Error::NonFinite(format!("DDIM latent at t={t}")));
        }
    }
    let per = frames * LATENT_CHANNELS * GRID * GRID;
    let data = z.into_data();
    (0..b)
        .map(|i| {
            Ok(LatentClip {
                z: Tensor::new(&shape[1..], data[i * per..(i + 1) * per].to_vec())?,
            })
        })
        .collect()
}

/// Mean Euclidean distance over all pairs of clips.
pub fn mean_pairwise_distance(clips: &[LatentClip]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..clips.len() {
        for j in i + 1..clips.len() {
            let d: f64 = clips[i].z.data().iter().zip(clips[j].z.data()).map(|(a, b)| (a - b).powi(2)).sum();
            sum += d.sqrt();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Uniform timesteps in `1..T` and unit Gaussian noise for a batch.
pub fn draw_noise<R: Rng + ?Sized>(schedule: &NoiseSchedule, z0: &Tensor, rng: &mut R) -> (Vec<usize>, Tensor) {
    let b = z0.shape()[0];
    let t = (0..b).map(|_| rng.random_range(1..schedule.timesteps())).collect();
    let noise = Tensor::from_fn(z0.shape(), |_| rng.sample(StandardNormal));
    (t, noise)
}

/// Zero the whole condition of each sample with probability `p`.
pub fn drop_condition<R: Rng + ?Sized>(g: &mut Graph, cond: Var, p: f64, rng: &mut R) -> Result<Var> {
    if p <= 0.0 {
        return Ok(cond);
    }
    let shape = g.shape(cond).to_vec();
    let per: usize = shape[1..].iter().product();
    let keep: Vec<f64> = (0..shape[0]).map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 }).collect();
    let mask = g.constant(Tensor::from_fn(&shape, |i| keep[i / per]));
    g.mul(cond, mask)
}

/// Noise-prediction MSE for `[B, F, c, h, w]` clean latents at per-sample
/// timesteps.
pub fn noise_prediction_loss(
    g: &mut Graph,
    den: &VideoDenoiser,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    z0: &Tensor,
    t: &[usize],
    noise: &Tensor,
    cond: Option<Var>,
) -> Result<Var> {
    let b = z0.shape()[0];
    if t.len() != b {
        return Err(Error::invalid(format!("{} timesteps for batch {b}", t.len())));
    }
    let per = z0.numel() / b.max(1);
    let alphas = t.iter().map(|&ti| schedule.alpha_bar(ti)).collect::<Result<Vec<_>>>()?;
    if noise.shape() != z0.shape() {
        return Err(Error::ShapeMismatch {
            op: "noise_prediction_loss",
            lhs: z0.shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    let zt = Tensor::from_fn(z0.shape(), |i| {
        let a = alphas[i / per];
        a.sqrt() * z0.data()[i] + (1.0 - a).sqrt() * noise.data()[i]
    });
    let zv = g.constant(zt);
    let pred = den.forward(g, store, zv, t, cond)?;
    let target = g.constant(noise.clone());
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}

fn finite_loss(g: &Graph, loss: Var, what: &str) -> Result<f64> {
    let v = g.value(loss).item();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} loss")))
    }
}

/// One caption-conditioned generator step; every `den.*` parameter trains.
/// `cond` is the `[B, L, d_c]` caption token embedding.
#[allow(clippy::too_many_arguments)]
pub fn train_gen_step<R: Rng + ?Sized>(
    den: &VideoDenoiser,
    schedule: &NoiseSchedule,
    store: &mut ParamStore,
    opt: &mut AdamW,
    z0: &Tensor,
    cond: &Tensor,
    cond_drop: f64,
    rng: &mut R,
) -> Result<f64> {
    let (t, noise) = draw_noise(schedule, z0, rng);
    let mut g = Graph::new();
    let c = g.constant(cond.clone());
    let c = drop_condition(&mut g, c, cond_drop, rng)?;
    let loss = noise_prediction_loss(&mut g, den, store, schedule, z0, &t, &noise, Some(c))?;
    let value = finite_loss(&g, loss, "generator")?;
    let grads = g.backward(loss)?;
    opt.step(store, &grads)?;
    Ok(value)
}

/// Restrict training to the encoder and the denoiser attention blocks.
pub fn freeze_for_cotrain(store: &mut ParamStore) {
    store.freeze_except(|n| n.starts_with("enc.") || is_attention_param(n));
}

/// One co-training step: the encoder embeds the `[B, w, V]` windows and
/// its unpooled output conditions the denoiser. Only the encoder and the
/// denoiser attention blocks receive updates.
#[allow(clippy::too_many_arguments)]
pub fn cotrain_step<R: Rng + ?Sized>(
    enc: &FmriEncoder,
    den: &VideoDenoiser,
    schedule: &NoiseSchedule,
    store: &mut ParamStore,
    opt: &mut AdamW,
    fmri: &Tensor,
    z0: &Tensor,
    cond_drop: f64,
    rng: &mut R,
) -> Result<f64> {
    if !store.contains("enc.patch.w") {
        return Err(Error::Prerequisite {
            stage: "cotrain".into(),
            missing: "contrastive".into(),
        });
    }
    freeze_for_cotrain(store);
    let (t, noise) = draw_noise(schedule, z0, rng);
    let mut g = Graph::new();
    let x = g.constant(fmri.clone());
    let (out, _) = enc.encode(&mut g, store, x, Some(&mut *rng))?;
    let c = drop_condition(&mut g, out.unpooled, cond_drop, rng)?;
    let loss = noise_prediction_loss(&mut g, den, store, schedule, z0, &t, &noise, Some(c))?;
    let value = finite_loss(&g, loss, "co-training")?;
    let grads = g.backward(loss)?;
    opt.step(store, &grads)?;
    Ok(value)
}

/// Encoder embedding of a batch of `[n, w, V]` windows, no dropout.
pub fn fmri_condition(enc: &FmriEncoder, store: &ParamStore, windows: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(windows.clone());
    let (out, _) = enc.encode::<rng::Rng>(&mut g, store, x, None)?;
    Ok(g.value(out.unpooled).clone())
}

/// The adversarial negative: the encoder embedding of the element-wise
/// mean of a set of `[n, w, V]` windows, as `[1, L, d_c]`.
pub fn fmri_negative(enc: &FmriEncoder, store: &ParamStore, windows: &Tensor) -> Result<Tensor> {
    let n = windows.shape()[0];
    if n == 0 {
        return Err(Error::invalid("negative condition needs a non-empty set"));
    }
    let per = windows.numel() / n;
    let mut mean = vec![0.0; per];
    for row in windows.data().chunks(per) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut shape = windows.shape().to_vec();
    shape[0] = 1;
    fmri_condition(enc, store, &Tensor::new(&shape, mean)?)
}
