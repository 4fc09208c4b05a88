//! The assembled matcher: configuration, parameters, forward pass,
//! training, evaluation, weight files and benchmarking.

mod bench;
mod config;
mod eval;
mod model;
mod train;
mod weights;

pub use bench::{benchmark, bench_csv, BenchMode, BenchRow};
pub use config::ModelConfig;
pub use eval::{
    evaluate, evaluate_baseline, nn_baseline, score_matches, synthetic_pairs, EvalMetrics, EvalPair,
    DEFAULT_RATIO,
};
pub use model::{
    forward, forward_capture, forward_graph, hybrid_block, match_pair, ActivationNorm, AttentionCapture,
    BlockParams, Diagnostics, ModelParams, PairFeatures, PhaseTimes, Stream, StreamCapture, Streams,
};
pub use train::{model_grad_check, pair_loss, train, train_with, AdamConfig, MetricRecord, TrainConfig, TrainOutcome};
pub use weights::{load_weights, load_weights_as, save_weights, WEIGHTS_VERSION};
