//! IGNNet: an interpretable graph neural network for tabular data.
//!
//! Each feature of a tabular dataset becomes a node of a graph whose edges
//! are inter-feature Pearson correlations. Message passing over that graph,
//! followed by a linear per-node readout, yields a prediction that is an
//! exactly additive weighted sum of per-feature scores. The crate also ships
//! the training loop, an explanation extractor, and a KernelSHAP convergence
//! auditor that validates the scores against sampled Shapley approximations.

pub mod autodiff;
pub mod data;
pub mod explain;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod openml;
pub mod optim;
pub mod shap;
pub mod tensor;
pub mod train;

pub use autodiff::{grad_check, BatchNormState, Mode, Tape, Var};
pub use data::{
    fit_preprocessor, load_csv, oversample_minority, split_dataset, transform, DatasetSchema,
    Preprocessor, Split, TabularDataset,
};
pub use explain::{emit_chart, explain_instance, group_scores, Explanation};
pub use graph::{
    build_feature_graph, calibrate_delta, normalize_adjacency, pearson_matrix, CorrelationMatrix,
    FeatureGraph,
};
pub use model::{
    init_params, predict, ArchitectureConfig, HeadKind, IgnnetParams, SavedModel, TrainMetadata,
};
pub use openml::fetch_openml;
pub use optim::{adam_step, AdamConfig, AdamState};
pub use shap::{
    audit_chart, convergence_audit, exact_shapley, kernel_shap, ShapAuditReport, ShapResult,
};
pub use tensor::Tensor;
pub use train::{cross_entropy_loss, train, TrainConfig, TrainReport};
