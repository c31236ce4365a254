//! Span metrics, ensembling and reports.

mod ensemble;
mod report;
mod scores;
mod span;

pub use ensemble::{ensemble_predict, EnsemblePrediction, FLOOR_PROB};
pub use report::{
    bucket_by_wer, evaluate_run, BucketRow, ExamplePrediction, MetricsReport, Subset, SubsetRow, SystemPredictions,
    DEFAULT_WER_EDGES,
};
pub use scores::{aos, exact_match, frame_f1, span_tokens_to_frames, token_f1, transcript_tokens_in};
pub use span::FrameSpan;
