//! Mixed-supervision training loop.
//!
//! Each epoch visits all training images in a seeded-shuffled order. Point-
//! annotated (D1) images propagate the full joint loss; count-only (D2)
//! images propagate only the count term, and the optimizer update is masked
//! so decoder parameters stay bit-identical. The masking is doubly enforced:
//! the D2 gradient is structurally zero on the decoder (no localization head
//! gradient exists), and the update skips the group outright, guarding
//! against future loss changes.
//!
//! After each epoch the mean validation joint loss (dropout off, same
//! term weights and warm-up gating as training) decides checkpoint
//! selection; the parameters with the lowest validation loss are returned
//! alongside the final ones.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_mask, AnnotatedImage, DataError, DatasetSplit, GroundTruthMask, SupervisionLevel,
};
use crate::loss::{joint_loss, joint_loss_grads, LossBreakdown, LossError, LossWeights};
use crate::net::{Gradients, NetError, Network, ParamGroup, NUM_TENSORS};
use crate::rng::{self, shuffle, STREAM_DROPOUT, STREAM_EPOCH_BASE};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("split references image '{id}' which is not in the dataset")]
    MissingImage { id: String },
    #[error("validation image '{id}' must carry point annotations")]
    ValidationNeedsPoints { id: String },
    #[error("variant {variant} trains on point-annotated images only, got '{image_id}'")]
    VariantNeedsPoints { variant: Variant, image_id: String },
    #[error("non-finite prediction at epoch {epoch} on image '{image_id}'")]
    NonFinitePrediction { epoch: u32, image_id: String },
    #[error(
        "non-finite loss at epoch {epoch} on image '{image_id}' \
         (l_s={l_s:?}, l_c={l_c}, l_t={l_t})"
    )]
    NonFiniteLoss {
        epoch: u32,
        image_id: String,
        l_s: Option<f64>,
        l_c: f64,
        l_t: f64,
    },
    #[error("invalid training config: {reason}")]
    BadConfig { reason: &'static str },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Model variants of the comparison experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full method: joint loss over D1 and D2 with selective updates.
    MixedSupervision,
    /// Encoder + decoder only, trained on D1 with the localization term only.
    SingleLocalization,
    /// Encoder + counting head only, trained on D1 and D2 with the count
    /// term only.
    SingleCounting,
    /// Ablation: mixed supervision with the consistency weight forced to 0.
    NoConsistency,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::MixedSupervision,
        Variant::SingleLocalization,
        Variant::SingleCounting,
        Variant::NoConsistency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MixedSupervision => "mixed_supervision",
            Variant::SingleLocalization => "single_localization",
            Variant::SingleCounting => "single_counting",
            Variant::NoConsistency => "no_consistency",
        }
    }

    /// Whether this variant trains the localization branch at all.
    pub fn trains_localization(self) -> bool {
        !matches!(self, Variant::SingleCounting)
    }

    /// Whether this variant trains the counting branch at all.
    pub fn trains_counting(self) -> bool {
        !matches!(self, Variant::SingleLocalization)
    }
}

impl core::fmt::Display for Variant {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for Variant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, UnknownVariant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or(UnknownVariant)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("unknown variant (expected one of mixed_supervision, single_localization, single_counting, no_consistency)")]
pub struct UnknownVariant;

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Factor of the optional exponential learning-rate schedule.
    pub lr_decay: f64,
    /// Epochs between learning-rate decays; 0 (the default) disables the
    /// schedule. The 0.9 "exponential decay" of the training recipe is
    /// carried by the optimizer's first-moment coefficient instead: a 0.9
    /// per-epoch LR decay would shrink the rate by nine orders of magnitude
    /// over 200 epochs.
    pub lr_decay_period: u32,
    pub batch_size: usize,
    pub max_epochs: u32,
    pub weights: LossWeights,
    pub seed: u64,
    pub variant: Variant,
    /// Disk radius for dilating point annotations into training masks.
    pub dilation_radius: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            lr_decay: 0.9,
            lr_decay_period: 0,
            batch_size: 1,
            max_epochs: 200,
            weights: LossWeights::default(),
            seed: 0,
            variant: Variant::MixedSupervision,
            dilation_radius: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |reason| Err(TrainError::BadConfig { reason });
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive and finite");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.dilation_radius == 0 {
            return bad("dilation_radius must be at least 1");
        }
        let w = &self.weights;
        if !(w.alpha.is_finite() && w.alpha >= 0.0 && w.beta.is_finite() && w.beta >= 0.0) {
            return bad("loss weights must be finite and non-negative");
        }
        Ok(())
    }

    /// Learning rate at `epoch` under the optional decay schedule.
    pub fn effective_lr(&self, epoch: u32) -> f64 {
        if self.lr_decay_period == 0 {
            return self.learning_rate;
        }
        let steps = (epoch / self.lr_decay_period) as f64;
        self.learning_rate * libm::pow(self.lr_decay, steps)
    }
}

/// Per-tensor Adam moments. Tensors in masked groups are skipped entirely:
/// values, moments, and step counters all stay frozen.
#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: Vec<u64>,
}

impl AdamState {
    fn new(net: &Network) -> Self {
        let m: Vec<Vec<f32>> = (0..NUM_TENSORS)
            .map(|i| alloc::vec![0.0; net.tensor_data(i).len()])
            .collect();
        Self {
            v: m.clone(),
            t: alloc::vec![0; NUM_TENSORS],
            m,
        }
    }

    fn update(&mut self, net: &mut Network, grads: &Gradients, lr: f64, active: &GroupMask) {
        for (idx, param) in net.params_mut().into_iter().enumerate() {
            if !active.allows(ParamGroup::of_tensor(idx)) {
                continue;
            }
            self.t[idx] += 1;
            let bc1 = 1.0 - libm::pow(ADAM_BETA1, self.t[idx] as f64);
            let bc2 = 1.0 - libm::pow(ADAM_BETA2, self.t[idx] as f64);
            let g = grads.tensor(idx);
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for i in 0..param.len() {
                let gi = g[i] as f64;
                let mi = ADAM_BETA1 * m[i] as f64 + (1.0 - ADAM_BETA1) * gi;
                let vi = ADAM_BETA2 * v[i] as f64 + (1.0 - ADAM_BETA2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let step = lr * (mi / bc1) / (libm::sqrt(vi / bc2) + ADAM_EPS);
                param[i] -= step as f32;
            }
        }
    }
}

/// Which parameter groups the current update may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct GroupMask {
    shared: bool,
    decoder: bool,
    counting: bool,
}

impl GroupMask {
    const NONE: GroupMask = GroupMask {
        shared: false,
        decoder: false,
        counting: false,
    };

    fn allows(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::SharedEncoder => self.shared,
            ParamGroup::LocalizationDecoder => self.decoder,
            ParamGroup::CountingHead => self.counting,
        }
    }

    fn union(&mut self, other: &GroupMask) {
        self.shared |= other.shared;
        self.decoder |= other.decoder;
        self.counting |= other.counting;
    }
}

/// How one image is routed under a variant: the supervision level driving the
/// loss, the adjusted term weights, and the parameter groups allowed to move.
fn plan(
    variant: Variant,
    image: &AnnotatedImage,
    weights: &LossWeights,
) -> Result<(SupervisionLevel, LossWeights, GroupMask), TrainError> {
    let level = image.level();
    let d2_mask = GroupMask {
        shared: true,
        decoder: false,
        counting: true,
    };
    let level_mask = |level| match level {
        SupervisionLevel::D1 => GroupMask {
            shared: true,
            decoder: true,
            counting: true,
        },
        SupervisionLevel::D2 => d2_mask,
    };
    match variant {
        Variant::MixedSupervision => Ok((level, weights.clone(), level_mask(level))),
        Variant::NoConsistency => {
            let weights = LossWeights {
                beta: 0.0,
                ..weights.clone()
            };
            Ok((level, weights, level_mask(level)))
        }
        Variant::SingleLocalization => {
            if level == SupervisionLevel::D2 {
                return Err(TrainError::VariantNeedsPoints {
                    variant,
                    image_id: String::from(image.id()),
                });
            }
            let weights = LossWeights {
                alpha: 0.0,
                beta: 0.0,
                ..weights.clone()
            };
            Ok((
                SupervisionLevel::D1,
                weights,
                GroupMask {
                    shared: true,
                    decoder: true,
                    counting: false,
                },
            ))
        }
        Variant::SingleCounting => {
            let weights = LossWeights {
                beta: 0.0,
                ..weights.clone()
            };
            // Points, if present, are ignored: the image contributes its
            // count exactly as a D2 image would.
            Ok((SupervisionLevel::D2, weights, d2_mask))
        }
    }
}

fn training_mask(
    image: &AnnotatedImage,
    level: SupervisionLevel,
    radius: usize,
) -> Result<Option<GroundTruthMask>, TrainError> {
    match level {
        SupervisionLevel::D1 => {
            let points = image.points().expect("D1 images carry points");
            Ok(Some(generate_mask(points, radius)?))
        }
        SupervisionLevel::D2 => Ok(None),
    }
}

/// One image's loss, gradients (already group-masked), and group mask.
fn forward_backward(
    network: &Network,
    dropout_rng: &mut ChaCha8Rng,
    image: &AnnotatedImage,
    config: &TrainConfig,
    epoch: u32,
) -> Result<(LossBreakdown, Gradients, GroupMask), TrainError> {
    let (level, weights, active) = plan(config.variant, image, &config.weights)?;
    let mask = training_mask(image, level, config.dilation_radius)?;
    let (pred, trace) = network.forward_train(image.pixels(), dropout_rng)?;
    if !pred.mask_probs.is_finite() || !pred.count_estimate.is_finite() {
        return Err(TrainError::NonFinitePrediction {
            epoch,
            image_id: String::from(image.id()),
        });
    }
    let (breakdown, head) = joint_loss_grads(
        &pred,
        mask.as_ref(),
        image.count().value(),
        level,
        &weights,
        epoch,
    )?;
    if !breakdown.joint.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            epoch,
            image_id: String::from(image.id()),
            l_s: breakdown.l_s,
            l_c: breakdown.l_c,
            l_t: breakdown.l_t,
        });
    }
    let mut grads = network.backward(&trace, head.d_mask.as_ref(), head.d_count);
    for group in ParamGroup::ALL {
        if !active.allows(group) {
            grads.zero_group(group);
        }
    }
    Ok((breakdown, grads, active))
}

/// Mutable training context: the network plus optimizer and dropout state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub network: Network,
    adam: AdamState,
    dropout_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(network: Network, config: &TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let adam = AdamState::new(&network);
        Ok(Self {
            network,
            adam,
            dropout_rng: rng::stream(config.seed, STREAM_DROPOUT),
        })
    }
}

/// One forward/backward/update on a single image (batch size 1 semantics).
/// For a D2 image every decoder parameter is bit-identical afterwards.
pub fn train_step(
    state: &mut TrainState,
    image: &AnnotatedImage,
    config: &TrainConfig,
    epoch: u32,
) -> Result<LossBreakdown, TrainError> {
    let (breakdown, grads, active) =
        forward_backward(&state.network, &mut state.dropout_rng, image, config, epoch)?;
    state
        .adam
        .update(&mut state.network, &grads, config.effective_lr(epoch), &active);
    Ok(breakdown)
}

/// Per-epoch mean losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: u32,
    pub train_joint: f64,
    pub val_joint: f64,
}

/// Receives per-step and per-epoch results during [`train`]; the library core
/// does no IO, so persistence hooks in here.
pub trait TrainObserver {
    fn on_step(
        &mut self,
        _epoch: u32,
        _image_id: &str,
        _level: SupervisionLevel,
        _loss: &LossBreakdown,
    ) {
    }
    fn on_epoch(&mut self, _row: &HistoryRow) {}
}

/// Observer that discards everything.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullObserver;

impl TrainObserver for NullObserver {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Network as of the final epoch.
    pub network: Network,
    /// Flat parameters (canonical order) of the best-validation epoch.
    pub best_params: Vec<f32>,
    pub best_epoch: u32,
    pub best_val_loss: f64,
    pub history: Vec<HistoryRow>,
}

impl TrainOutcome {
    /// The checkpoint-selected network: final architecture with the
    /// best-epoch parameters loaded.
    pub fn best_network(&self) -> Network {
        let mut net = self.network.clone();
        net.load_flat_params(&self.best_params)
            .expect("parameters came from this architecture");
        net
    }
}

/// Mean validation joint loss (dropout off) under the variant's routing, with
/// the same term weights and warm-up gating as training at `epoch`.
pub fn validation_loss(
    network: &Network,
    images: &[&AnnotatedImage],
    config: &TrainConfig,
    epoch: u32,
) -> Result<f64, TrainError> {
    if images.is_empty() {
        return Err(TrainError::EmptyValidationSet);
    }
    let mut total = 0.0f64;
    for image in images {
        let (level, weights, _) = plan(config.variant, image, &config.weights)?;
        let mask = training_mask(image, level, config.dilation_radius)?;
        let pred = network.predict(image.pixels())?;
        let breakdown = joint_loss(
            &pred,
            mask.as_ref(),
            image.count().value(),
            level,
            &weights,
            epoch,
        )?;
        total += breakdown.joint;
    }
    Ok(total / images.len() as f64)
}

/// Trains for `max_epochs` epochs and returns the final network, the
/// best-validation checkpoint, and the per-epoch history.
///
/// Each epoch visits D1 and D2 training images in one interleaved shuffled
/// order drawn from a per-epoch stream of `config.seed`; the whole run is
/// deterministic given `(network, split, data, config)`. The
/// `single_localization` variant trains on D1 only; the other variants
/// consume D1 and D2.
pub fn train(
    network: Network,
    split: &DatasetSplit,
    data: &[AnnotatedImage],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let index: BTreeMap<&str, &AnnotatedImage> = data.iter().map(|img| (img.id(), img)).collect();
    let lookup = |id: &String| {
        index
            .get(id.as_str())
            .copied()
            .ok_or_else(|| TrainError::MissingImage { id: id.clone() })
    };

    let mut train_ids: Vec<&String> = split.train_d1.iter().collect();
    if config.variant != Variant::SingleLocalization {
        train_ids.extend(split.train_d2.iter());
    }
    let train_images: Vec<&AnnotatedImage> =
        train_ids.iter().map(|id| lookup(id)).collect::<Result<_, _>>()?;
    if train_images.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let val_images: Vec<&AnnotatedImage> = split
        .validation
        .iter()
        .map(lookup)
        .collect::<Result<_, _>>()?;
    if val_images.is_empty() {
        return Err(TrainError::EmptyValidationSet);
    }
    for image in &val_images {
        if image.level() != SupervisionLevel::D1 {
            return Err(TrainError::ValidationNeedsPoints {
                id: String::from(image.id()),
            });
        }
    }

    let mut state = TrainState::new(network, config)?;
    let mut history = Vec::with_capacity(config.max_epochs as usize);
    let mut best: Option<(f64, u32, Vec<f32>)> = None;

    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..train_images.len()).collect();
        let mut epoch_rng = rng::stream(config.seed, STREAM_EPOCH_BASE + epoch as u64);
        shuffle(&mut epoch_rng, &mut order);
        let lr = config.effective_lr(epoch);

        let mut epoch_joint = 0.0f64;
        let mut pending: Option<Gradients> = None;
        let mut pending_n = 0usize;
        let mut pending_mask = GroupMask::NONE;
        for &i in &order {
            let image = train_images[i];
            let (breakdown, grads, active) =
                forward_backward(&state.network, &mut state.dropout_rng, image, config, epoch)?;
            observer.on_step(epoch, image.id(), image.level(), &breakdown);
            epoch_joint += breakdown.joint;
            match &mut pending {
                Some(acc) => acc.accumulate(&grads),
                None => pending = Some(grads),
            }
            pending_n += 1;
            pending_mask.union(&active);
            if pending_n == config.batch_size {
                flush_batch(&mut state, &mut pending, &mut pending_n, &mut pending_mask, lr);
            }
        }
        flush_batch(&mut state, &mut pending, &mut pending_n, &mut pending_mask, lr);

        let train_joint = epoch_joint / train_images.len() as f64;
        let val_joint = validation_loss(&state.network, &val_images, config, epoch)?;
        let row = HistoryRow {
            epoch,
            train_joint,
            val_joint,
        };
        observer.on_epoch(&row);
        history.push(row);
        if best.as_ref().map_or(true, |(b, _, _)| val_joint < *b) {
            best = Some((val_joint, epoch, state.network.flat_params()));
        }
    }

    let (best_val_loss, best_epoch, best_params) = best.expect("max_epochs >= 1");
    Ok(TrainOutcome {
        network: state.network,
        best_params,
        best_epoch,
        best_val_loss,
        history,
    })
}

/// Applies the pending batch (mean gradient) and resets the accumulator.
fn flush_batch(
    state: &mut TrainState,
    pending: &mut Option<Gradients>,
    pending_n: &mut usize,
    pending_mask: &mut GroupMask,
    lr: f64,
) {
    if let Some(mut grads) = pending.take() {
        if *pending_n > 1 {
            grads.scale(1.0 / *pending_n as f32);
        }
        state.adam.update(&mut state.network, &grads, lr, pending_mask);
    }
    *pending_n = 0;
    *pending_mask = GroupMask::NONE;
}
