//! Single-axis ablations over several seeds, compared with the full model.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::stages::METRICS_CSV;
use super::{Run, RunConfig, Stage};
use crate::error::{Error, Result};
use crate::eval::report::{ablation_csv, bar_chart_svg, metric_means, write_text, AblationRow, ItemMetrics, METRIC_NAMES};

/// Config keys that may be ablated.
pub const AXES: [&str; 3] = ["window", "contrastive", "guidance"];

pub const FULL: &str = "full";

/// One ablation axis: a config key and the values tried for it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// `key=v1,v2;key=v3` to axes. Unknown keys and unparsable values are
/// errors.
pub fn parse_axes(spec: &str) -> Result<Vec<AblationAxis>> {
    let mut out = Vec::new();
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, vs) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("ablation axis `{part}` is not key=values")))?;
        let axis = AblationAxis {
            key: k.trim().to_string(),
            values: vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect(),
        };
        if axis.values.is_empty() {
            return Err(Error::Config(format!("ablation axis `{}` has no values", axis.key)));
        }
        out.push(axis);
    }
    if out.is_empty() {
        return Err(Error::Config("no ablation axes given".into()));
    }
    Ok(out)
}

/// The single-ablation variants of the default study: window 1 and 3,
/// no contrastive stage, classifier-free guidance.
pub fn default_axes() -> Vec<AblationAxis> {
    parse_axes("window=1,3;contrastive=off;guidance=classifier-free").expect("static axes")
}

/// Named variant configs of `base` for the given axes.
pub fn variants(base: &RunConfig, axes: &[AblationAxis]) -> Result<Vec<(String, RunConfig)>> {
    let mut out = vec![(FULL.to_string(), base.clone())];
    for axis in axes {
        if !AXES.contains(&axis.key.as_str()) {
            return Err(Error::Config(format!(
                "unknown ablation axis `{}` (expected one of {})",
                axis.key,
                AXES.join(", ")
            )));
        }
        for v in &axis.values {
            let mut cfg = base.clone();
            cfg.set(&axis.key, v)?;
            cfg.validate()?;
            out.push((format!("{}={v}", axis.key), cfg));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    /// Per variant, per seed, the test-set mean of every metric.
    pub samples: BTreeMap<String, Vec<[f64; 6]>>,
}

impl AblationResult {
    /// Per-seed values of one metric for one variant.
    pub fn metric(&self, variant: &str, metric: &str) -> Option<Vec<f64>> {
        let k = METRIC_NAMES.iter().position(|m| *m == metric)?;
        Some(self.samples.get(variant)?.iter().map(|s| s[k]).collect())
    }

    pub fn row(&self, variant: &str, metric: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.metric == metric)
    }
}

fn read_metrics(path: &Path) -> Result<Vec<ItemMetrics>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("bad metrics row `{l}`"),
                })
            };
            Ok(ItemMetrics {
                item: num(0)? as usize,
                ssim: num(1)?,
                two_way_top1: num(2)?,
                fifty_way_top1: num(3)?,
                video_two_way: num(4)?,
                video_fifty_way: num(5)?,
                identification: num(6)?,
            })
        })
        .collect()
}

/// Run every variant for `ablation_seeds` seeds (the base seed and the
/// following ones) and compare each with the full model. Variant runs
/// live under `<base>/ablation/seed-<s>/<variant>` and reuse the stages
/// they share with the base run and with each other. `progress` receives
/// one line per finished variant run.
pub fn ablation_suite(base: &mut Run, axes: &[AblationAxis], mut progress: impl FnMut(&str)) -> Result<AblationResult> {
    if !base.is_current(Stage::Evaluate) {
        return Err(Error::Prerequisite {
            stage: Stage::Ablate.name().into(),
            missing: Stage::Evaluate.name().into(),
        });
    }
    if base.cfg.ablation_seeds < 2 {
        return Err(Error::Config("ablation needs at least two seeds".into()));
    }
    let names: Vec<String> = variants(&base.cfg, axes)?.into_iter().map(|(n, _)| n).collect();
    let mut samples: BTreeMap<String, Vec<[f64; 6]>> = BTreeMap::new();
    let mut artifacts = Vec::new();
    for k in 0..base.cfg.ablation_seeds {
        let seed = base.cfg.seed + k as u64;
        let seeded = RunConfig { seed, ..base.cfg.clone() };
        let mut donors: Vec<PathBuf> = vec![base.dir.clone()];
        for (name, cfg) in variants(&seeded, axes)? {
            let rel = format!("ablation/seed-{seed}/{name}");
            let dir = base.dir.join(&rel);
            let mut run = Run::open(&dir, cfg)?;
            for stage in [Stage::GenData, Stage::Pretrain, Stage::Contrastive, Stage::TrainGen, Stage::Cotrain, Stage::Sample, Stage::Evaluate] {
                run.run_stage_with(stage, false, &donors)?;
            }
            let means = metric_means(&read_metrics(&dir.join(METRICS_CSV))?);
            progress(&format!("seed {seed} {name}: identification {:.4}", means[5]));
            samples.entry(name).or_default().push(means);
            artifacts.push(format!("{rel}/{}", super::manifest::MANIFEST_FILE));
            donors.push(dir);
        }
    }
    let full = &samples[FULL];
    let mut rows = Vec::new();
    for name in &names {
        let s = &samples[name];
        for (k, metric) in METRIC_NAMES.iter().enumerate() {
            let a: Vec<f64> = s.iter().map(|m| m[k]).collect();
            let b: Vec<f64> = full.iter().map(|m| m[k]).collect();
            rows.push(AblationRow::compare(name, metric, &a, &b)?);
        }
    }
    write_text(&base.path("ablation.csv"), &ablation_csv(&rows))?;
    let ident: Vec<f64> = names
        .iter()
        .map(|n| rows.iter().find(|r| &r.variant == n && r.metric == "identification").map_or(0.0, |r| r.mean))
        .collect();
    write_text(&base.path("ablation.svg"), &bar_chart_svg("Mean 2-way identification", &names, &ident))?;
    artifacts.insert(0, "ablation.csv".into());
    artifacts.insert(1, "ablation.svg".into());
    base.record(Stage::Ablate, artifacts, 0.0)?;
    Ok(AblationResult { rows, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing_and_variant_naming() {
        let axes = parse_axes("window=1,2,3").unwrap();
        let v = variants(&RunConfig::quick(), &axes).unwrap();
        let names: Vec<&str> = v.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["full", "window=1", "window=2", "window=3"]);
        assert_eq!(v[1].1.window, 1);
        assert_eq!(v[2].1, v[0].1);
        assert!(matches!(variants(&RunConfig::quick(), &parse_axes("depth=1").unwrap()), Err(Error::Config(_))));
        assert!(matches!(variants(&RunConfig::quick(), &parse_axes("window=7").unwrap()), Err(Error::Config(_))));
        assert!(parse_axes("window").is_err());
        assert!(parse_axes("").is_err());
        assert_eq!(default_axes().len(), 3);
    }
}
