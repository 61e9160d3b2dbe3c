//! Core algorithms for mixed-supervision cell localization and counting.
//!
//! The crate implements a two-branch convolutional network (a skip-connected
//! encoder-decoder for per-pixel cell probability maps plus a small dense head
//! for scalar count regression), the joint loss that trains it from images
//! with either point annotations or approximate "eyeballed" cell counts, the
//! training loop with selective parameter updates, object-level detection
//! metrics, and a deterministic synthetic dataset generator.
//!
//! Everything here is pure computation: no file IO, no threads, no global
//! state. All randomness flows through explicitly seeded [`rand_chacha`]
//! generators, so every result is reproducible from `(inputs, seed)`. The
//! crate is `no_std`-compatible (with `alloc`); the companion `cytoloc` crate
//! carries the CLI, file formats, and experiment orchestration.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod eval;
pub mod loss;
pub mod net;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use data::{
    count_from_points, expected_d1_size, generate_mask, partition, AnnotatedImage, CellCount,
    CountSource, DataError, DatasetSplit, GroundTruthMask, PointSet, SupervisionLevel,
};
pub use eval::{
    binarize_and_clean, count_components, detection_metrics, evaluate_image, evaluate_images,
    match_points, relative_difference, AggregateMetrics, DistanceMode, EvalConfig, EvalError,
    ImageMetrics, LabeledComponents, MatchResult, MetricsReport,
};
pub use loss::{
    joint_loss, joint_loss_grads, loss_consistency, loss_count, loss_localization,
    loss_localization_grad, mask_component_count, HeadGrads, LossBreakdown, LossError, LossWeights,
};
pub use net::{
    ForwardTrace, Gradients, LayerRow, MultitaskPrediction, NetError, Network, NetworkConfig,
    ParamGroup, ParamMeta,
};
pub use synth::{synthesize_dataset, SynthConfig, SynthError};
pub use tensor::{BinaryMask, Tensor};
pub use train::{
    train, train_step, validation_loss, HistoryRow, NullObserver, TrainConfig, TrainError,
    TrainObserver, TrainOutcome, TrainState, Variant,
};
