//! Beam-search decoding, confidence routing and latency measurement.

mod beam;
mod engine;
mod latency;
mod pool;
mod records;

pub use beam::{
    allowed_tokens, beam_search, first_pass_confidence, masked_log_probs, BeamResult, ConfidenceMode, Hypothesis,
};
pub use engine::{
    decode, evaluate_both, infer_first_pass, infer_second_pass, route, FirstPassOutput, InferenceOptions, PassOutput,
    RoutedPrediction, Source, Timings,
};
pub use latency::{measure_latency, report_from_rows, Aggregate, LatencyReport, LatencyRow, RtfEntry};
pub use pool::parallel_map;
pub use records::{read_predictions, write_predictions, PredictionRecord};
