//! Aggregation of encoder spatial attention into per-region shares.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-region share of the attention received at one stage and layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionReport {
    pub stage: String,
    pub layer: usize,
    pub regions: Vec<String>,
    pub shares: Vec<f64>,
}

/// First, middle and last layer ids.
pub fn report_layers(depth: usize) -> Vec<usize> {
    let mut l = vec![0, depth / 2, depth.saturating_sub(1)];
    l.dedup();
    l
}

/// Running column mean of `[B·H, Tq, Tk]` softmax maps: the mean
/// attention each key token receives over heads, samples and queries.
#[derive(Clone, Debug, Default)]
pub struct ColumnMean {
    sums: Vec<f64>,
    rows: usize,
}

impl ColumnMean {
    pub fn add(&mut self, weights: &Tensor) -> Result<()> {
        let [_, _, tk] = *weights.shape() else {
            return Err(Error::InvalidShape {
                shape: weights.shape().to_vec(),
                reason: "attention maps are [B·H, Tq, Tk]".into(),
            });
        };
        if self.sums.is_empty() {
            self.sums = vec![0.0; tk];
        } else if self.sums.len() != tk {
            return Err(Error::invalid(format!("attention width changed from {} to {tk}", self.sums.len())));
        }
        for row in weights.data().chunks(tk) {
            self.sums.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            self.rows += 1;
        }
        Ok(())
    }

    pub fn mean(&self) -> Vec<f64> {
        self.sums.iter().map(|s| s / self.rows.max(1) as f64).collect()
    }
}

/// Map per-token attention to voxels (each token spreads its share evenly
/// over its `patch_size` voxels; padding voxels past the end are
/// dropped), sum per region and normalize to 1.
pub fn region_shares(token_attention: &[f64], patch_size: usize, voxel_region: &[usize], regions: usize) -> Result<Vec<f64>> {
    let v = voxel_region.len();
    if token_attention.len() != v.div_ceil(patch_size) {
        return Err(Error::invalid(format!(
            "{} token weights for {v} voxels with patch size {patch_size}",
            token_attention.len()
        )));
    }
    let mut shares = vec![0.0; regions];
    for (j, &r) in voxel_region.iter().enumerate() {
        if r >= regions {
            return Err(Error::IndexOutOfRange { index: r, bound: regions });
        }
        shares[r] += token_attention[j / patch_size] / patch_size as f64;
    }
    let total: f64 = shares.iter().sum();
    if !(total > 0.0) {
        return Err(Error::NonFinite("attention mass".into()));
    }
    shares.iter_mut().for_each(|s| *s /= total);
    Ok(shares)
}

/// Reports for the requested layers of one stage. `per_layer` holds the
/// accumulated column means of every encoder layer.
pub fn attention_report(
    stage: &str,
    per_layer: &[ColumnMean],
    layers: &[usize],
    patch_size: usize,
    voxel_region: &[usize],
    region_names: &[&str],
) -> Result<Vec<AttentionReport>> {
    layers
        .iter()
        .map(|&l| {
            let acc = per_layer.get(l).ok_or(Error::IndexOutOfRange { index: l, bound: per_layer.len() })?;
            Ok(AttentionReport {
                stage: stage.to_string(),
                layer: l,
                regions: region_names.iter().map(|s| s.to_string()).collect(),
                shares: region_shares(&acc.mean(), patch_size, voxel_region, region_names.len())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn layer_choice() {
        assert_eq!(report_layers(1), vec![0]);
        assert_eq!(report_layers(2), vec![0, 1]);
        assert_eq!(report_layers(4), vec![0, 2, 3]);
    }

    #[test]
    fn uniform_attention_gives_voxel_fractions() {
        let regions = [0, 0, 0, 1, 1, 2, 3, 3, 3, 3, 3, 3];
        let mut acc = ColumnMean::default();
        acc.add(&Tensor::full(&[2, 3, 3], 1.0 / 3.0)).unwrap();
        let rep = attention_report("s", &[acc], &[0], 4, &regions, &["a", "b", "c", "d"]).unwrap();
        let want = [3.0 / 12.0, 2.0 / 12.0, 1.0 / 12.0, 6.0 / 12.0];
        for (s, w) in rep[0].shares.iter().zip(want) {
            assert!((s - w).abs() < 1e-12);
        }
        // a padded final token keeps voxels on equal footing
        let mut acc = ColumnMean::default();
        acc.add(&Tensor::full(&[1, 2, 3], 1.0 / 3.0)).unwrap();
        let shares = region_shares(&acc.mean(), 4, &[0, 0, 0, 0, 1, 1, 1, 1, 2, 2], 3).unwrap();
        for (s, w) in shares.iter().zip([0.4, 0.4, 0.2]) {
            assert!((s - w).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_layer_is_an_error() {
        let acc = ColumnMean::default();
        assert!(attention_report("s", &[acc], &[1], 4, &[0; 4], &["a"]).is_err());
    }

    proptest! {
        #[test]
        fn shares_sum_to_one(seed in 0u64..10_000) {
            let w = Tensor::randn(&[4, 5, 6], 1.0, &mut rng::stream(seed, "att")).softmax(2).unwrap();
            let mut acc = ColumnMean::default();
            acc.add(&w).unwrap();
            let regions: Vec<usize> = (0..23).map(|i| (i * 7 + seed as usize) % 4).collect();
            let s = region_shares(&acc.mean(), 4, &regions, 4).unwrap();
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
