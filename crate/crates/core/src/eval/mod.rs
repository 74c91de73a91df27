//! Metrics, bucket tables, prefix curves and attention exports.

mod buckets;
mod heatmap;
mod metrics;
mod prefix;

pub use buckets::{
    accuracy_gap, bucket_by_confidence, bucket_by_wer, record_wer, routed_accuracy, wer_bucket_index, BucketRow,
    BucketTable, WerBuckets, WER_EDGES,
};
pub use heatmap::{export_heatmaps, heatmap_labels, write_heatmaps, HeatmapMatrix};
pub use metrics::{align, intent_accuracy, wer, EditCounts};
pub use prefix::{prefix_sweep, PrefixCurve, PrefixPoint};
