//! CSV and SVG writers for evaluation outputs.

use std::fmt::Write as _;
use std::path::Path;

use super::attention::AttentionReport;
use super::stats::{ablation_stats, mean_std, p_band};
use crate::error::Result;

/// Per-item metrics of one evaluated run.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemMetrics {
    pub item: usize,
    pub ssim: f64,
    pub two_way_top1: f64,
    pub fifty_way_top1: f64,
    pub video_two_way: f64,
    pub video_fifty_way: f64,
    /// Retrieval-style 2-way identification against other test items.
    pub identification: f64,
}

pub const METRIC_NAMES: [&str; 6] = ["ssim", "2way_top1", "50way_top1", "video_2way", "video_50way", "identification"];

impl ItemMetrics {
    pub fn values(&self) -> [f64; 6] {
        [
            self.ssim,
            self.two_way_top1,
            self.fifty_way_top1,
            self.video_two_way,
            self.video_fifty_way,
            self.identification,
        ]
    }
}

/// Fixed-precision formatting so that identical numbers give identical
/// bytes.
pub fn fmt(v: f64) -> String {
    format!("{v:.9}")
}

pub fn metrics_csv(rows: &[ItemMetrics]) -> String {
    let mut s = format!("item,{}\n", METRIC_NAMES.join(","));
    for r in rows {
        let vals: Vec<String> = r.values().iter().map(|&v| fmt(v)).collect();
        let _ = writeln!(s, "{},{}", r.item, vals.join(","));
    }
    s
}

/// Column means of a metrics table, in [`METRIC_NAMES`] order.
pub fn metric_means(rows: &[ItemMetrics]) -> [f64; 6] {
    let mut out = [0.0; 6];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r.values()) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= rows.len().max(1) as f64);
    out
}

/// One ablation row: per-seed values of one metric for one variant,
/// compared with the full model.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub p: f64,
    pub band: String,
}

impl AblationRow {
    pub fn compare(variant: &str, metric: &str, samples: &[f64], full: &[f64]) -> Result<Self> {
        let (mean, std) = mean_std(samples);
        let p = ablation_stats(samples, full)?;
        Ok(Self {
            variant: variant.to_string(),
            metric: metric.to_string(),
            mean,
            std,
            p,
            band: p_band(p).to_string(),
        })
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,metric,mean,std,p,band\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.variant, r.metric, fmt(r.mean), fmt(r.std), fmt(r.p), r.band);
    }
    s
}

pub fn attention_csv(rep: &AttentionReport) -> String {
    let mut s = String::from("region,share\n");
    for (r, v) in rep.regions.iter().zip(&rep.shares) {
        let _ = writeln!(s, "{r},{}", fmt(*v));
    }
    s
}

/// A minimal horizontal bar chart.
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[f64]) -> String {
    let (w, row, left) = (480.0, 22.0, 150.0);
    let h = 40.0 + row * labels.len() as f64;
    let max = values.iter().copied().fold(0.0, f64::max).max(1e-12);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <text x=\"10\" y=\"20\" font-weight=\"bold\">{}</text>\n",
        escape(title)
    );
    for (i, (l, &v)) in labels.iter().zip(values).enumerate() {
        let y = 32.0 + row * i as f64;
        let bw = (w - left - 60.0) * v.max(0.0) / max;
        let _ = writeln!(
            s,
            "<text x=\"10\" y=\"{:.1}\">{}</text><rect x=\"{left}\" y=\"{y:.1}\" width=\"{bw:.2}\" height=\"{:.1}\" fill=\"#4a78b0\"/><text x=\"{:.1}\" y=\"{:.1}\">{v:.3}</text>",
            y + 14.0,
            escape(l),
            row - 6.0,
            left + bw + 4.0,
            y + 14.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layouts() {
        let m = ItemMetrics {
            item: 3,
            ssim: 0.5,
            two_way_top1: 1.0,
            fifty_way_top1: 0.0,
            video_two_way: 0.25,
            video_fifty_way: 0.125,
            identification: 1.0,
        };
        let csv = metrics_csv(&[m.clone(), m]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "item,ssim,2way_top1,50way_top1,video_2way,video_50way,identification");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("3,0.500000000,1.000000000"));
        let row = AblationRow::compare("w=1", "identification", &[0.5, 0.6], &[0.5, 0.6]).unwrap();
        assert_eq!(row.p, 1.0);
        assert_eq!(row.band, "p>0.05");
        assert!(ablation_csv(&[row]).starts_with("variant,metric,mean,std,p,band\nw=1,identification,"));
    }

    #[test]
    fn svg_has_one_bar_per_label() {
        let svg = bar_chart_svg("a<b", &["x".into(), "y".into()], &[0.2, 0.8]);
        assert_eq!(svg.matches("<rect").count(), 2);
        assert!(svg.contains("a&lt;b"));
    }
}
