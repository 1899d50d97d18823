use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SsimConfig {
    /// Side of the square Gaussian window.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || !(self.sigma > 0.0) || !(self.k1 > 0.0) || !(self.k2 > 0.0) || !(self.dynamic_range > 0.0) {
            return Err(Error::Config(format!("invalid SSIM configuration {self:?}")));
        }
        Ok(())
    }

    /// Normalized `window × window` Gaussian weights, row-major.
    pub fn weights(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        w
    }
}

/// Mean local SSIM of two `[H, W, C]` frames over every window position
/// that fits inside the frame, averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    cfg.validate()?;
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let [h, w, ch] = *a.shape() else {
        return Err(Error::InvalidShape {
            shape: a.shape().to_vec(),
            reason: "SSIM expects [H, W, C] frames".into(),
        });
    };
    let win = cfg.window;
    if h < win || w < win {
        return Err(Error::InvalidShape {
            shape: a.shape().to_vec(),
            reason: format!("frame smaller than the {win}×{win} window"),
        });
    }
    let weights = cfg.weights();
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    for c in 0..ch {
        let mut sum = 0.0;
        for y0 in 0..=h - win {
            for x0 in 0..=w - win {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..win {
                    for dx in 0..win {
                        let k = ((y0 + dy) * w + x0 + dx) * ch + c;
                        let wt = weights[dy * win + dx];
                        let (va, vb) = (ad[k], bd[k]);
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * (va * vb);
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                let num = (2.0 * (ma * mb) + c1) * (2.0 * cov + c2);
                let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                sum += num / den;
            }
        }
        total += sum / ((h - win + 1) * (w - win + 1)) as f64;
    }
    Ok(total / ch as f64)
}

/// SSIM of two `[F, H, W, C]` clips, computed per frame and averaged.
pub fn ssim_clip(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 4 {
        return Err(Error::ShapeMismatch {
            op: "ssim_clip",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let f = a.shape()[0];
    let frame = &a.shape()[1..];
    let per: usize = frame.iter().product();
    let mut total = 0.0;
    for i in 0..f {
        let fa = Tensor::new(frame, a.data()[i * per..(i + 1) * per].to_vec())?;
        let fb = Tensor::new(frame, b.data()[i * per..(i + 1) * per].to_vec())?;
        total += ssim(&fa, &fb, cfg)?;
    }
    Ok(total / f as f64)
}
