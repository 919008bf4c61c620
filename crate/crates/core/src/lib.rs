//! Filter importance scoring and greedy structured pruning for small CNNs.
//!
//! A filter's Classification Accuracy Reduction (CAR) is the drop in top-1
//! accuracy when its output channel is zeroed. Filters are ranked by CAR (or a
//! weight-magnitude index), pruned greedily under an accuracy floor, and the
//! pruned network is compacted into a smaller dense one.

pub mod compact;
pub mod data;
pub mod error;
pub mod importance;
pub mod interpret;
pub mod network;
pub mod ops;
pub mod pruner;
pub mod store;
pub mod tensor;
pub mod trace;
pub mod train;

pub use compact::{compact, compacted_parameter_count, compression_ratio, CompressionRatio, LayerRatio};
pub use data::{load_cifar10, load_idx, subset, LabeledDataset};
pub use error::{Error, Result};
pub use importance::{
    car_class_scores, car_scores, rank_filters, weight_importance, CarTable, ClassCarTable, FilterScore,
    ImportanceIndex, WeightDirection,
};
pub use interpret::{
    class_interpretation, per_class_compare, top_patches, ClassComparison, ClassInterpretation, PatchRecord,
};
pub use network::{argmax, evaluate, predict, EvalResult, FilterMask, FilterRef, LayerParams, LayerSpec, Network};
pub use pruner::{benchmark_indexes, greedy_prune, prune_report, PruneConfig, PruneOutcome, PruneReport, StopRule};
pub use store::{load_model, save_model};
pub use tensor::Tensor;
pub use trace::{PruneIteration, PruneTrace, StopReason};
pub use train::{backward_and_sgd_step, train, SgdConfig};
