//! Canonical double-gamma hemodynamic response.

use crate::error::{Error, Result};

/// Double-gamma response sampled on a fixed grid.
///
/// `h(t) = (t/p)^a1 · e^{-(t-p)/b1} − c · (t/u)^a2 · e^{-(t-u)/b2}` with
/// `b1 = p/a1` and `b2 = u/a2`, so the positive lobe peaks at `p` seconds
/// and the undershoot at `u` seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct HrfModel {
    pub kernel: Vec<f64>,
    pub dt: f64,
    pub peak_delay: f64,
    pub undershoot_delay: f64,
    pub length: f64,
}

const PEAK_SHAPE: f64 = 6.0;
const UNDERSHOOT_SHAPE: f64 = 12.0;
const UNDERSHOOT_RATIO: f64 = 0.35;

impl HrfModel {
    pub fn new(dt: f64, peak_delay: f64, undershoot_delay: f64, length: f64) -> Result<Self> {
        if !(dt > 0.0 && peak_delay > 0.0 && undershoot_delay > peak_delay && length > dt) {
            return Err(Error::invalid(format!(
                "hrf parameters dt={dt} peak={peak_delay} undershoot={undershoot_delay} length={length}"
            )));
        }
        let n = (length / dt).round() as usize;
        let b1 = peak_delay / PEAK_SHAPE;
        let b2 = undershoot_delay / UNDERSHOOT_SHAPE;
        let kernel = (0..n)
            .map(|i| {
                let t = i as f64 * dt;
                let pos = (t / peak_delay).powf(PEAK_SHAPE) * (-(t - peak_delay) / b1).exp();
                let neg = (t / undershoot_delay).powf(UNDERSHOOT_SHAPE) * (-(t - undershoot_delay) / b2).exp();
                pos - UNDERSHOOT_RATIO * neg
            })
            .collect();
        Ok(Self {
            kernel,
            dt,
            peak_delay,
            undershoot_delay,
            length,
        })
    }

    /// Peak 6 s, undershoot 16 s, 32 s support.
    pub fn canonical(dt: f64) -> Self {
        Self::new(dt, 6.0, 16.0, 32.0).expect("canonical parameters are valid")
    }

    pub fn sum(&self) -> f64 {
        self.kernel.iter().sum()
    }

    pub fn argmax(&self) -> usize {
        self.kernel
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0
    }

    /// Causal convolution of `signal` with the kernel, same length as `signal`.
    pub fn convolve(&self, signal: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; signal.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let kmax = self.kernel.len().min(i + 1);
            *o = (0..kmax).map(|k| self.kernel[k] * signal[i - k]).sum();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_shape_invariants() {
        let h = HrfModel::canonical(1.0 / 3.0);
        assert_eq!(h.kernel.len(), 96);
        assert_eq!(h.kernel[0], 0.0);
        assert!(h.sum().is_finite() && h.sum() > 0.0);
        let peak_t = h.argmax() as f64 * h.dt;
        assert!((peak_t - h.peak_delay).abs() <= h.dt, "peak at {peak_t}");
        let max = h.kernel[h.argmax()];
        assert_eq!(h.kernel.iter().filter(|&&v| v == max).count(), 1);
        // single positive lobe: rises to the peak then falls
        let p = h.argmax();
        assert!(h.kernel[..=p].windows(2).all(|w| w[1] >= w[0]));
        let min_i = h
            .kernel
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |a, (i, &v)| if v < a.1 { (i, v) } else { a })
            .0;
        assert!(h.kernel[p..=min_i].windows(2).all(|w| w[1] <= w[0]));
        assert!(h.kernel[min_i] < 0.0);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(HrfModel::new(0.0, 6.0, 16.0, 32.0).is_err());
        assert!(HrfModel::new(0.5, 6.0, 5.0, 32.0).is_err());
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let h = HrfModel::canonical(1.0);
        let s: Vec<f64> = (0..50).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let y = h.convolve(&s);
        for t in [0usize, 3, 17, 49] {
            let mut direct = 0.0;
            for tau in 0..=t {
                if t - tau < h.kernel.len() {
                    direct += s[tau] * h.kernel[t - tau];
                }
            }
            assert!((y[t] - direct).abs() < 1e-12);
        }
    }
}
