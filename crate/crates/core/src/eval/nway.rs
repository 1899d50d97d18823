use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

/// Settings of the N-way top-K test. `gt_k` is the number of top ground
/// truth classes that count as correct; `None` uses `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct NwayConfig {
    pub n_way: usize,
    pub k: usize,
    pub gt_k: Option<usize>,
    pub trials: usize,
    pub seed: u64,
}

impl NwayConfig {
    pub fn new(n_way: usize, k: usize, trials: usize, seed: u64) -> Self {
        Self { n_way, k, gt_k: None, trials, seed }
    }
}

/// Class indices sorted by descending probability, ties by index.
fn ranked(p: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx
}

/// Success rate of every item. Each trial draws `N-1` distractor classes
/// without replacement from the classes outside the ground truth top
/// `gt_k`; the trial succeeds when a ground truth class lands in the top
/// `K` of the prediction restricted to the ground truth top-1 class plus
/// the distractors. Distractor sets for one seed are nested across `N`.
pub fn nway_topk_items(gt_probs: &Tensor, pred_probs: &Tensor, cfg: &NwayConfig) -> Result<Vec<f64>> {
    if gt_probs.shape() != pred_probs.shape() || gt_probs.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "nway_topk",
            lhs: gt_probs.shape().to_vec(),
            rhs: pred_probs.shape().to_vec(),
        });
    }
    let [n, classes] = *gt_probs.shape() else { unreachable!() };
    let gt_k = cfg.gt_k.unwrap_or(cfg.k);
    if cfg.n_way < 1 || cfg.n_way > classes {
        return Err(Error::invalid(format!("{}-way test over {classes} classes", cfg.n_way)));
    }
    if cfg.k < 1 || cfg.k > cfg.n_way || gt_k < 1 || gt_k > classes {
        return Err(Error::invalid(format!("top-{} (ground truth top-{gt_k}) in a {}-way test", cfg.k, cfg.n_way)));
    }
    if cfg.trials == 0 {
        return Err(Error::invalid("at least one trial is required"));
    }
    if cfg.n_way - 1 > classes - gt_k {
        return Err(Error::invalid(format!(
            "{} distractors cannot be drawn from {} non-ground-truth classes",
            cfg.n_way - 1,
            classes - gt_k
        )));
    }
    let mut r = rng::stream(cfg.seed, "nway");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let gt_rank = ranked(gt_probs.row(i));
        let gt_set = &gt_rank[..gt_k];
        let mut pool: Vec<usize> = (0..classes).filter(|c| !gt_set.contains(c)).collect();
        let pred = pred_probs.row(i);
        let mut hits = 0usize;
        for _ in 0..cfg.trials {
            pool.shuffle(&mut r);
            let mut set: Vec<usize> = Vec::with_capacity(cfg.n_way);
            set.push(gt_rank[0]);
            set.extend_from_slice(&pool[..cfg.n_way - 1]);
            set.sort_by(|&a, &b| pred[b].total_cmp(&pred[a]).then(a.cmp(&b)));
            if set[..cfg.k].iter().any(|c| gt_set.contains(c)) {
                hits += 1;
            }
        }
        out.push(hits as f64 / cfg.trials as f64);
    }
    Ok(out)
}

/// Mean success rate over items.
pub fn nway_topk(gt_probs: &Tensor, pred_probs: &Tensor, cfg: &NwayConfig) -> Result<f64> {
    let items = nway_topk_items(gt_probs, pred_probs, cfg)?;
    Ok(items.iter().sum::<f64>() / items.len().max(1) as f64)
}

/// One-hot rows for integer labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    Tensor::from_fn(&[labels.len(), classes], |i| if labels[i / classes] == i % classes { 1.0 } else { 0.0 })
}
