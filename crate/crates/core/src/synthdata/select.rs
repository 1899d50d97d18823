//! Reproducibility-based voxel selection.
//!
//! For every voxel and every viewing `r`, the Fisher-z transformed Pearson
//! correlations with each other viewing are averaged; the `R` resulting
//! values are tested against zero with a one-sample t-test (`R − 1` degrees
//! of freedom) at a Bonferroni-corrected level. Voxels are ranked by the
//! t statistic; the selection is the voxels that pass the test and rank in
//! the top `keep_fraction` of all voxels.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Correlations are clamped to ±(1 − 1e-7) before the Fisher transform.
pub const FISHER_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionConfig {
    /// Family-wise significance level before Bonferroni correction.
    pub alpha: f64,
    pub keep_fraction: f64,
    /// Drop voxels that fail the corrected significance threshold; when
    /// off, only the top `keep_fraction` by t statistic is kept.
    pub significance_filter: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            keep_fraction: 0.5,
            significance_filter: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelSelection {
    /// Selected voxel indices, ascending.
    pub indices: Vec<usize>,
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    pub passing: usize,
}

pub fn fisher_z(r: f64) -> f64 {
    r.clamp(-FISHER_CLAMP, FISHER_CLAMP).atanh()
}

/// Pearson correlation; `None` when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}

/// Per-voxel one-sample t statistic of the mean cross-repeat Fisher z.
/// Voxels with an undefined correlation get z = 0; zero spread around a
/// nonzero mean gives an infinite t.
pub fn reproducibility_t(repeats: &[Tensor]) -> Result<Vec<f64>> {
    if repeats.len() < 2 {
        return Err(Error::invalid("voxel selection needs at least two repeats"));
    }
    let shape = repeats[0].shape().to_vec();
    if shape.len() != 2 || repeats.iter().any(|r| r.shape() != shape.as_slice()) {
        return Err(Error::InvalidShape {
            shape,
            reason: "repeats must share one [T x V] shape".into(),
        });
    }
    let (t, v) = (shape[0], shape[1]);
    let nrep = repeats.len();
    let mut stats = Vec::with_capacity(v);
    let mut series = vec![vec![0.0; t]; nrep];
    for j in 0..v {
        for (r, s) in repeats.iter().zip(series.iter_mut()) {
            for (i, x) in s.iter_mut().enumerate() {
                *x = r.data()[i * v + j];
            }
        }
        let mut z = vec![vec![0.0; nrep]; nrep];
        for a in 0..nrep {
            for b in a + 1..nrep {
                let zab = pearson(&series[a], &series[b]).map_or(0.0, fisher_z);
                z[a][b] = zab;
                z[b][a] = zab;
            }
        }
        let samples: Vec<f64> = (0..nrep)
            .map(|a| z[a].iter().sum::<f64>() / (nrep - 1) as f64)
            .collect();
        let mean = samples.iter().sum::<f64>() / nrep as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (nrep - 1) as f64;
        let tstat = if var > 0.0 {
            mean / (var / nrep as f64).sqrt()
        } else if mean == 0.0 {
            0.0
        } else {
            // identical repeat correlations: infinitely significant
            mean.signum() * f64::INFINITY
        };
        stats.push(tstat);
    }
    Ok(stats)
}

pub fn select_voxels(repeats: &[Tensor], cfg: &SelectionConfig) -> Result<VoxelSelection> {
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) || !(cfg.keep_fraction > 0.0 && cfg.keep_fraction <= 1.0) {
        return Err(Error::invalid(format!("selection config {cfg:?}")));
    }
    let t_stats = reproducibility_t(repeats)?;
    let v = t_stats.len();
    let dof = (repeats.len() - 1) as f64;
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::invalid(e.to_string()))?;
    let p_values: Vec<f64> = t_stats.iter().map(|&t| dist.sf(t)).collect();
    let threshold = cfg.alpha / v as f64;
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| t_stats[b].total_cmp(&t_stats[a]).then(a.cmp(&b)));
    let keep = ((v as f64) * cfg.keep_fraction).ceil() as usize;
    let passing = p_values.iter().filter(|&&p| p < threshold).count();
    let mut indices: Vec<usize> = order
        .into_iter()
        .take(keep)
        .filter(|&j| !cfg.significance_filter || p_values[j] < threshold)
        .collect();
    indices.sort_unstable();
    Ok(VoxelSelection {
        indices,
        t_stats,
        p_values,
        passing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn noisy_repeats(signal: &[Vec<f64>], nrep: usize, sigma: f64, seed: u64) -> Vec<Tensor> {
        let t = signal.len();
        let v = signal[0].len();
        let mut r = rng::stream(seed, "sel");
        (0..nrep)
            .map(|_| {
                let noise = Tensor::randn(&[t, v], sigma, &mut r);
                Tensor::from_fn(&[t, v], |i| signal[i / v][i % v] + noise.data()[i])
            })
            .collect()
    }

    #[test]
    fn constant_voxel_is_excluded_without_panicking() {
        let mut reps = noisy_repeats(&vec![vec![0.0; 3]; 20], 4, 1.0, 1);
        for r in &mut reps {
            for t in 0..20 {
                r.data_mut()[t * 3 + 1] = 5.0;
            }
        }
        let t = reproducibility_t(&reps).unwrap();
        assert_eq!(t[1], 0.0);
        let sel = select_voxels(&reps, &SelectionConfig::default()).unwrap();
        assert!(!sel.indices.contains(&1));
    }

    #[test]
    fn perfectly_reproducible_voxels_rank_first() {
        let mut r = rng::stream(2, "sig");
        let t = 60;
        let signal: Vec<Vec<f64>> = (0..t)
            .map(|_| {
                let s = rng_normal(&mut r);
                (0..8).map(|j| if j < 4 { s * (j + 1) as f64 } else { 0.0 }).collect()
            })
            .collect();
        let mut reps = noisy_repeats(&signal, 6, 1.0, 3);
        // make the signal voxels exactly identical across repeats (r = 1)
        for rep in &mut reps {
            for i in 0..t {
                for j in 0..4 {
                    rep.data_mut()[i * 8 + j] = signal[i][j];
                }
            }
        }
        let sel = select_voxels(&reps, &SelectionConfig::default()).unwrap();
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&a, &b| sel.t_stats[b].total_cmp(&sel.t_stats[a]));
        assert!(order[..4].iter().all(|&j| j < 4), "{:?}", sel.t_stats);
    }

    fn rng_normal(r: &mut rng::Rng) -> f64 {
        use rand::Rng as _;
        r.sample(rand_distr::StandardNormal)
    }

    #[test]
    fn needs_two_equal_shape_repeats() {
        let one = vec![Tensor::zeros(&[5, 2])];
        assert!(select_voxels(&one, &SelectionConfig::default()).is_err());
        let mixed = vec![Tensor::zeros(&[5, 2]), Tensor::zeros(&[4, 2])];
        assert!(select_voxels(&mixed, &SelectionConfig::default()).is_err());
    }

    #[test]
    fn invariant_to_scaling_and_permutation() {
        let mut r = rng::stream(4, "sig");
        let signal: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..10).map(|j| if j % 3 == 0 { rng_normal(&mut r) } else { 0.0 }).collect())
            .collect();
        let reps = noisy_repeats(&signal, 6, 0.8, 5);
        let base = select_voxels(&reps, &SelectionConfig::default()).unwrap();
        let scaled: Vec<Tensor> = reps.iter().map(|t| t.scale(37.5)).collect();
        assert_eq!(select_voxels(&scaled, &SelectionConfig::default()).unwrap().indices, base.indices);
        let perm: Vec<usize> = (0..10).rev().collect();
        let permuted: Vec<Tensor> = reps
            .iter()
            .map(|t| Tensor::from_fn(&[50, 10], |i| t.data()[(i / 10) * 10 + perm[i % 10]]))
            .collect();
        let sel = select_voxels(&permuted, &SelectionConfig::default()).unwrap();
        let mut mapped: Vec<usize> = sel.indices.iter().map(|&j| perm[j]).collect();
        mapped.sort_unstable();
        assert_eq!(mapped, base.indices);
    }
}
