use rand::Rng;
use rand_distr::StandardNormal;

use super::hrf::HrfModel;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Repeated viewings of one stimulus by one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecording {
    /// One `[T × V]` BOLD array per viewing.
    pub repeats: Vec<Tensor>,
    /// Ground truth: voxel carries stimulus-driven signal.
    pub signal_mask: Vec<bool>,
    pub tr_seconds: f64,
}

impl SubjectRecording {
    pub fn scans(&self) -> usize {
        self.repeats.first().map_or(0, |r| r.shape()[0])
    }

    pub fn voxel_count(&self) -> usize {
        self.repeats.first().map_or(0, |r| r.shape()[1])
    }

    pub fn duration_seconds(&self) -> f64 {
        self.scans() as f64 * self.tr_seconds
    }

    /// Mean over repeats, `[T × V]`.
    pub fn averaged(&self) -> Tensor {
        let mut acc = Tensor::zeros(self.repeats[0].shape());
        for r in &self.repeats {
            acc.add_assign(r);
        }
        acc.scale(1.0 / self.repeats.len() as f64)
    }
}

/// Noiseless BOLD: per-voxel causal convolution of the `[T_hi × V]` drive
/// with the response kernel, point-sampled at the start of every TR.
pub fn convolve_drive(drive: &Tensor, hrf: &HrfModel, samples_per_tr: usize) -> Result<Tensor> {
    if drive.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: drive.shape().to_vec(),
            reason: "drive must be [T_hi x V]".into(),
        });
    }
    let (t_hi, v) = (drive.shape()[0], drive.shape()[1]);
    if samples_per_tr == 0 || t_hi % samples_per_tr != 0 {
        return Err(Error::invalid(format!(
            "drive length {t_hi} is not a multiple of {samples_per_tr} samples per TR"
        )));
    }
    let scans = t_hi / samples_per_tr;
    let mut out = vec![0.0; scans * v];
    let mut column = vec![0.0; t_hi];
    for j in 0..v {
        for (t, c) in column.iter_mut().enumerate() {
            *c = drive.data()[t * v + j];
        }
        if column.iter().all(|&x| x == 0.0) {
            continue;
        }
        let y = hrf.convolve(&column);
        for s in 0..scans {
            out[s * v + j] = y[s * samples_per_tr];
        }
    }
    Tensor::new(&[scans, v], out)
}

/// Convolve, downsample to the TR grid and add i.i.d. Gaussian noise
/// independently for each of `repeats` viewings.
pub fn simulate_bold<R: Rng + ?Sized>(
    drive: &Tensor,
    hrf: &HrfModel,
    samples_per_tr: usize,
    tr_seconds: f64,
    noise_sigma: f64,
    repeats: usize,
    rng: &mut R,
) -> Result<SubjectRecording> {
    if noise_sigma < 0.0 || !noise_sigma.is_finite() {
        return Err(Error::invalid(format!("noise_sigma must be non-negative, got {noise_sigma}")));
    }
    if repeats == 0 {
        return Err(Error::invalid("at least one repeat required"));
    }
    let clean = convolve_drive(drive, hrf, samples_per_tr)?;
    let v = drive.shape()[1];
    let signal_mask = (0..v)
        .map(|j| (0..drive.shape()[0]).any(|t| drive.data()[t * v + j] != 0.0))
        .collect();
    let repeats = (0..repeats)
        .map(|_| {
            if noise_sigma == 0.0 {
                clean.clone()
            } else {
                Tensor::from_fn(clean.shape(), |i| clean.data()[i] + noise_sigma * rng.sample::<f64, _>(StandardNormal))
            }
        })
        .collect();
    Ok(SubjectRecording {
        repeats,
        signal_mask,
        tr_seconds,
    })
}
