//! Evaluation: SSIM, N-way top-K classification tests, significance
//! testing for ablations, attention interpretability and report writers.

pub mod attention;
pub mod classifier;
pub mod nway;
pub mod report;
pub mod ssim;
pub mod stats;

pub use attention::{attention_report, region_shares, report_layers, AttentionReport, ColumnMean};
pub use classifier::{ClassifierStub, StubKind};
pub use nway::{nway_topk, nway_topk_items, one_hot, NwayConfig};
pub use report::{AblationRow, ItemMetrics};
pub use ssim::{ssim, ssim_clip, SsimConfig};
pub use stats::{ablation_stats, mean_std, p_band, welch_t_test};
