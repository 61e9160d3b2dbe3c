//! Shared-encoder multitask network: a dense localization branch and a scalar
//! counting branch on top of one convolutional encoder.
//!
//! Layout: four encoder blocks (two 3x3 conv+ReLU with dropout between, then
//! 2x2 max pool), a bottleneck block of the same shape without pooling, four
//! decoder blocks (2x nearest upsample, concatenate the matching pre-pool
//! encoder features, 3x3 conv+ReLU), and a 1x1 conv + sigmoid localization
//! head. The counting branch global-average-pools the bottleneck output
//! through two ReLU dense layers into one linear unit.
//!
//! The backward pass is hand-written. Gradients accumulate into a [`Gradients`]
//! mirror so callers can sum over a batch before updating, and every parameter
//! tensor belongs to exactly one [`ParamGroup`] so training can freeze whole
//! branches per image.

mod layers;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DIM_MULTIPLE;
use crate::rng::{self, STREAM_INIT};
use crate::tensor::Tensor;
use layers::{
    apply_factors, dropout_factors, global_avg_pool, global_avg_pool_backward, maxpool2_backward,
    maxpool2_forward, relu_backward, relu_inplace, sigmoid, upsample2_backward, upsample2_forward,
    Conv2d, Dense,
};

/// Sigmoid outputs are clamped to `[PROB_EPS, 1 - PROB_EPS]` so downstream
/// log-losses stay finite.
pub const PROB_EPS: f32 = 1e-7;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetError {
    #[error("channel and unit widths must all be nonzero")]
    ZeroWidth,
    #[error("dropout rate must lie in [0, 1), got {rate}")]
    BadDropoutRate { rate: f32 },
    #[error(
        "input must have {expected_channels} channels and nonzero height and width \
         divisible by {multiple}, got {channels}x{height}x{width}"
    )]
    BadInputShape {
        expected_channels: usize,
        multiple: usize,
        channels: usize,
        height: usize,
        width: usize,
    },
    #[error("parameter buffer holds {got} values, network needs {expected}")]
    ParamCountMismatch { expected: usize, got: usize },
}

/// Architecture hyperparameters. Defaults give the full-size network; tests
/// shrink the widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub input_channels: usize,
    /// Output channels of the four encoder blocks, shallow to deep.
    pub encoder_channels: [usize; 4],
    pub bottleneck_channels: usize,
    /// Hidden widths of the two ReLU dense layers in the counting branch.
    pub dense_units: [usize; 2],
    /// Dropout rate applied between the paired convolutions of each encoder
    /// and bottleneck block (training only).
    pub dropout_rate: f32,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            encoder_channels: [32, 64, 128, 256],
            bottleneck_channels: 512,
            dense_units: [32, 16],
            dropout_rate: 0.2,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let widths_ok = self.input_channels > 0
            && self.encoder_channels.iter().all(|&c| c > 0)
            && self.bottleneck_channels > 0
            && self.dense_units.iter().all(|&u| u > 0);
        if !widths_ok {
            return Err(NetError::ZeroWidth);
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NetError::BadDropoutRate {
                rate: self.dropout_rate,
            });
        }
        Ok(())
    }
}

/// Which branch a parameter tensor belongs to. D2 images (count-only
/// supervision) update `SharedEncoder` and `CountingHead` but never
/// `LocalizationDecoder`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Encoder blocks and bottleneck.
    SharedEncoder,
    /// Decoder blocks and the 1x1 localization head.
    LocalizationDecoder,
    /// The three dense layers of the counting branch.
    CountingHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [
        ParamGroup::SharedEncoder,
        ParamGroup::LocalizationDecoder,
        ParamGroup::CountingHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::SharedEncoder => "shared_encoder",
            ParamGroup::LocalizationDecoder => "localization_decoder",
            ParamGroup::CountingHead => "counting_head",
        }
    }

    /// Group of the canonical tensor index (see the index constants below).
    pub fn of_tensor(idx: usize) -> ParamGroup {
        debug_assert!(idx < NUM_TENSORS);
        if idx < DEC_BASE {
            ParamGroup::SharedEncoder
        } else if idx < DENSE_BASE {
            ParamGroup::LocalizationDecoder
        } else {
            ParamGroup::CountingHead
        }
    }
}

impl core::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

// Canonical tensor order: each conv or dense layer contributes (weight, bias).
// Encoder blocks 0..4 (conv1, conv2), bottleneck (conv1, conv2), decoder
// blocks 0..4 deepest-first, localization head, dense layers 0..3.
const fn enc_idx(block: usize, conv: usize) -> usize {
    4 * block + 2 * conv
}
const BNECK1: usize = 16;
const BNECK2: usize = 18;
const DEC_BASE: usize = 20;
const fn dec_idx(block: usize) -> usize {
    DEC_BASE + 2 * block
}
const LOC_HEAD: usize = 28;
const DENSE_BASE: usize = 30;
const fn dense_idx(layer: usize) -> usize {
    DENSE_BASE + 2 * layer
}
/// Number of parameter tensors (weights and biases counted separately).
pub const NUM_TENSORS: usize = 36;

#[derive(Debug, Clone)]
struct EncoderBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    conv2: Conv2d,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    conv: Conv2d,
}

/// Joint prediction for one image.
#[derive(Debug, Clone)]
pub struct MultitaskPrediction {
    /// Per-pixel cell probability, `1 x H x W`, strictly inside `(0, 1)`.
    pub mask_probs: Tensor,
    /// Raw counting-branch output (may be negative; clamp before reporting).
    pub count_estimate: f32,
}

/// Activations recorded during a training forward pass, consumed by
/// [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    enc: Vec<EncTrace>,
    bneck_input: Tensor,
    bneck_relu1: Tensor,
    bneck_drop: Vec<f32>,
    /// Bottleneck output; root of both branches.
    shared: Tensor,
    dec_cat: Vec<Tensor>,
    dec_relu: Vec<Tensor>,
    probs: Tensor,
    gap: Vec<f32>,
    fc1: Vec<f32>,
    fc2: Vec<f32>,
}

#[derive(Debug, Clone)]
struct EncTrace {
    input: Tensor,
    relu1: Tensor,
    drop: Vec<f32>,
    /// Pre-pool activations, reused as the skip connection.
    relu2: Tensor,
    argmax: Vec<u32>,
}

struct EncPartial {
    input: Tensor,
    relu1: Tensor,
    drop: Vec<f32>,
    argmax: Vec<u32>,
}

/// Per-tensor gradients in canonical order, shapes mirroring the network.
#[derive(Debug, Clone)]
pub struct Gradients {
    tensors: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        let tensors = (0..NUM_TENSORS)
            .map(|i| vec![0.0; net.tensor_data(i).len()])
            .collect();
        Self { tensors }
    }

    pub fn tensor(&self, idx: usize) -> &[f32] {
        &self.tensors[idx]
    }

    /// Elementwise sum, for accumulating a batch.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for t in &mut self.tensors {
            for v in t {
                *v *= factor;
            }
        }
    }

    /// Zeroes every tensor of the group (explicit update masking).
    pub fn zero_group(&mut self, group: ParamGroup) {
        for (idx, t) in self.tensors.iter_mut().enumerate() {
            if ParamGroup::of_tensor(idx) == group {
                t.fill(0.0);
            }
        }
    }

    /// `(weight, bias)` buffers of the layer whose weight sits at `idx`.
    fn wb_mut(&mut self, idx: usize) -> (&mut [f32], &mut [f32]) {
        let (head, tail) = self.tensors.split_at_mut(idx + 1);
        (&mut head[idx], &mut tail[0])
    }
}

/// Name, group, and length of one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamMeta {
    pub name: String,
    pub group: ParamGroup,
    pub len: usize,
}

/// One row of [`Network::describe`].
#[derive(Debug, Clone)]
pub struct LayerRow {
    pub name: String,
    pub output: String,
    pub params: usize,
    pub group: Option<ParamGroup>,
}

#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    encoder: Vec<EncoderBlock>,
    bottleneck: Bottleneck,
    decoder: Vec<DecoderBlock>,
    loc_head: Conv2d,
    count_fc: Vec<Dense>,
}

impl Network {
    /// Builds and He-initializes the network. The same `(config, seed)` pair
    /// always yields bit-identical weights.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let ec = config.encoder_channels;
        let cb = config.bottleneck_channels;
        let mut in_ch = config.input_channels;
        let mut encoder = Vec::with_capacity(4);
        for &out_ch in &ec {
            encoder.push(EncoderBlock {
                conv1: Conv2d::new(in_ch, out_ch, 3),
                conv2: Conv2d::new(out_ch, out_ch, 3),
            });
            in_ch = out_ch;
        }
        let bottleneck = Bottleneck {
            conv1: Conv2d::new(ec[3], cb, 3),
            conv2: Conv2d::new(cb, cb, 3),
        };
        let mut decoder = Vec::with_capacity(4);
        let mut prev = cb;
        for j in 0..4 {
            let skip = ec[3 - j];
            decoder.push(DecoderBlock {
                conv: Conv2d::new(prev + skip, skip, 3),
            });
            prev = skip;
        }
        let loc_head = Conv2d::new(ec[0], 1, 1);
        let count_fc = vec![
            Dense::new(cb, config.dense_units[0]),
            Dense::new(config.dense_units[0], config.dense_units[1]),
            Dense::new(config.dense_units[1], 1),
        ];
        let mut net = Self {
            config,
            encoder,
            bottleneck,
            decoder,
            loc_head,
            count_fc,
        };
        let mut rng = rng::stream(seed, STREAM_INIT);
        for block in &mut net.encoder {
            block.conv1.init_he(&mut rng);
            block.conv2.init_he(&mut rng);
        }
        net.bottleneck.conv1.init_he(&mut rng);
        net.bottleneck.conv2.init_he(&mut rng);
        for block in &mut net.decoder {
            block.conv.init_he(&mut rng);
        }
        net.loc_head.init_he(&mut rng);
        for fc in &mut net.count_fc {
            fc.init_he(&mut rng);
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    fn check_input(&self, image: &Tensor) -> Result<(), NetError> {
        let (c, h, w) = image.shape();
        let ok = c == self.config.input_channels
            && h > 0
            && w > 0
            && h % DIM_MULTIPLE == 0
            && w % DIM_MULTIPLE == 0;
        if !ok {
            return Err(NetError::BadInputShape {
                expected_channels: self.config.input_channels,
                multiple: DIM_MULTIPLE,
                channels: c,
                height: h,
                width: w,
            });
        }
        Ok(())
    }

    /// Inference pass: no dropout, no trace.
    pub fn predict(&self, image: &Tensor) -> Result<MultitaskPrediction, NetError> {
        let (pred, _) = self.run_forward(image, None, false)?;
        Ok(pred)
    }

    /// Training pass with dropout (per the configured rate) and a recorded
    /// trace for [`Network::backward`]. Dropout draws come from `rng` in a
    /// fixed order, so identical rng state gives an identical pass.
    pub fn forward_train(
        &self,
        image: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<(MultitaskPrediction, ForwardTrace), NetError> {
        let (pred, trace) = self.run_forward(image, Some(rng), true)?;
        Ok((pred, trace.expect("trace requested")))
    }

    fn run_forward(
        &self,
        image: &Tensor,
        mut dropout: Option<&mut ChaCha8Rng>,
        want_trace: bool,
    ) -> Result<(MultitaskPrediction, Option<ForwardTrace>), NetError> {
        self.check_input(image)?;
        let rate = self.config.dropout_rate;
        let factors_for = |len: usize, dropout: &mut Option<&mut ChaCha8Rng>| match dropout {
            Some(rng) => dropout_factors(rng, len, rate),
            None => vec![1.0; len],
        };

        let mut enc_partials = Vec::with_capacity(4);
        let mut skips = Vec::with_capacity(4);
        let mut x = image.clone();
        for block in &self.encoder {
            let input = x;
            let mut relu1 = block.conv1.forward(&input);
            relu_inplace(relu1.data_mut());
            let drop = factors_for(relu1.data().len(), &mut dropout);
            let dropped = apply_factors(&relu1, &drop);
            let mut relu2 = block.conv2.forward(&dropped);
            relu_inplace(relu2.data_mut());
            let (pooled, argmax) = maxpool2_forward(&relu2);
            if want_trace {
                enc_partials.push(EncPartial {
                    input,
                    relu1,
                    drop,
                    argmax,
                });
            }
            skips.push(relu2);
            x = pooled;
        }

        let bneck_input = x;
        let mut bneck_relu1 = self.bottleneck.conv1.forward(&bneck_input);
        relu_inplace(bneck_relu1.data_mut());
        let bneck_drop = factors_for(bneck_relu1.data().len(), &mut dropout);
        let bdropped = apply_factors(&bneck_relu1, &bneck_drop);
        let mut shared = self.bottleneck.conv2.forward(&bdropped);
        relu_inplace(shared.data_mut());

        let gap = global_avg_pool(&shared);
        let mut fc1 = self.count_fc[0].forward(&gap);
        relu_inplace(&mut fc1);
        let mut fc2 = self.count_fc[1].forward(&fc1);
        relu_inplace(&mut fc2);
        let count_estimate = self.count_fc[2].forward(&fc2)[0];

        let mut dec_cat = Vec::with_capacity(4);
        let mut dec_relu = Vec::with_capacity(4);
        let mut z = shared.clone();
        for (j, block) in self.decoder.iter().enumerate() {
            let up = upsample2_forward(&z);
            let cat = up.concat_channels(&skips[3 - j]);
            let mut out = block.conv.forward(&cat);
            relu_inplace(out.data_mut());
            if want_trace {
                dec_cat.push(cat);
                dec_relu.push(out.clone());
            }
            z = out;
        }

        let mut probs = self.loc_head.forward(&z);
        for v in probs.data_mut() {
            *v = sigmoid(*v).clamp(PROB_EPS, 1.0 - PROB_EPS);
        }

        let pred = MultitaskPrediction {
            mask_probs: probs.clone(),
            count_estimate,
        };
        let trace = if want_trace {
            let enc = enc_partials
                .into_iter()
                .zip(skips)
                .map(|(p, relu2)| EncTrace {
                    input: p.input,
                    relu1: p.relu1,
                    drop: p.drop,
                    relu2,
                    argmax: p.argmax,
                })
                .collect();
            Some(ForwardTrace {
                enc,
                bneck_input,
                bneck_relu1,
                bneck_drop,
                shared,
                dec_cat,
                dec_relu,
                probs,
                gap,
                fc1,
                fc2,
            })
        } else {
            None
        };
        Ok((pred, trace))
    }

    /// Backpropagates head gradients to all parameters.
    ///
    /// `d_mask` is dL/d(mask probability) (or `None` when no localization
    /// term is active); `d_count` is dL/d(count estimate). Branches with no
    /// head gradient contribute exactly zero: with `d_mask = None`, decoder
    /// and localization-head gradients stay structurally zero and nothing
    /// flows through the skip connections.
    pub fn backward(
        &self,
        t: &ForwardTrace,
        d_mask: Option<&Tensor>,
        d_count: f64,
    ) -> Gradients {
        let mut g = Gradients::zeros_like(self);

        let mut d_dec: Option<Tensor> = None;
        if let Some(dm) = d_mask {
            // Through the clamped sigmoid: dp/dz = p (1 - p) of the clamped p.
            let p = &t.probs;
            let mut d_z = Tensor::zeros(1, p.height(), p.width());
            for (out, (&dp, &pv)) in d_z
                .data_mut()
                .iter_mut()
                .zip(dm.data().iter().zip(p.data()))
            {
                *out = dp * pv * (1.0 - pv);
            }
            let (dw, db) = g.wb_mut(LOC_HEAD);
            d_dec = self.loc_head.backward(&t.dec_relu[3], &d_z, dw, db, true);
        }

        let mut d_shared_count: Option<Tensor> = None;
        if d_count != 0.0 {
            let (dw, db) = g.wb_mut(dense_idx(2));
            let mut d_fc2 = self.count_fc[2].backward(&t.fc2, &[d_count as f32], dw, db);
            relu_backward(&t.fc2, &mut d_fc2);
            let (dw, db) = g.wb_mut(dense_idx(1));
            let mut d_fc1 = self.count_fc[1].backward(&t.fc1, &d_fc2, dw, db);
            relu_backward(&t.fc1, &mut d_fc1);
            let (dw, db) = g.wb_mut(dense_idx(0));
            let d_gap = self.count_fc[0].backward(&t.gap, &d_fc1, dw, db);
            d_shared_count = Some(global_avg_pool_backward(&d_gap, t.shared.shape()));
        }

        let mut d_skips: [Option<Tensor>; 4] = [None, None, None, None];
        let mut d_shared_dec: Option<Tensor> = None;
        if let Some(mut d_out) = d_dec {
            for j in (0..4).rev() {
                relu_backward(t.dec_relu[j].data(), d_out.data_mut());
                let (dw, db) = g.wb_mut(dec_idx(j));
                let d_cat = self.decoder[j]
                    .conv
                    .backward(&t.dec_cat[j], &d_out, dw, db, true)
                    .expect("dx requested");
                let skip_ch = t.enc[3 - j].relu2.channels();
                let (d_up, d_skip) = d_cat.split_channels(d_cat.channels() - skip_ch);
                d_skips[3 - j] = Some(d_skip);
                d_out = upsample2_backward(&d_up);
            }
            d_shared_dec = Some(d_out);
        }

        let d_shared = match (d_shared_dec, d_shared_count) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            (a, b) => a.or(b),
        };
        let Some(mut d_shared) = d_shared else {
            return g;
        };

        relu_backward(t.shared.data(), d_shared.data_mut());
        let bdropped = apply_factors(&t.bneck_relu1, &t.bneck_drop);
        let (dw, db) = g.wb_mut(BNECK2);
        let d_bdrop = self
            .bottleneck
            .conv2
            .backward(&bdropped, &d_shared, dw, db, true)
            .expect("dx requested");
        let mut d_b1 = apply_factors(&d_bdrop, &t.bneck_drop);
        relu_backward(t.bneck_relu1.data(), d_b1.data_mut());
        let (dw, db) = g.wb_mut(BNECK1);
        let mut d_pool = self
            .bottleneck
            .conv1
            .backward(&t.bneck_input, &d_b1, dw, db, true)
            .expect("dx requested");

        for i in (0..4).rev() {
            let tr = &t.enc[i];
            let mut d_relu2 = maxpool2_backward(&d_pool, &tr.argmax, tr.relu2.shape());
            if let Some(ds) = &d_skips[i] {
                d_relu2.add_assign(ds);
            }
            relu_backward(tr.relu2.data(), d_relu2.data_mut());
            let dropped = apply_factors(&tr.relu1, &tr.drop);
            let (dw, db) = g.wb_mut(enc_idx(i, 1));
            let d_drop = self.encoder[i]
                .conv2
                .backward(&dropped, &d_relu2, dw, db, true)
                .expect("dx requested");
            let mut d_relu1 = apply_factors(&d_drop, &tr.drop);
            relu_backward(tr.relu1.data(), d_relu1.data_mut());
            let (dw, db) = g.wb_mut(enc_idx(i, 0));
            let dx = self.encoder[i]
                .conv1
                .backward(&tr.input, &d_relu1, dw, db, i > 0);
            if i > 0 {
                d_pool = dx.expect("dx requested");
            }
        }
        g
    }

    /// Per-tensor name, group, and length in canonical order.
    pub fn tensor_meta(&self) -> Vec<ParamMeta> {
        let mut meta = Vec::with_capacity(NUM_TENSORS);
        let push = |meta: &mut Vec<ParamMeta>, name: String, len: usize| {
            let group = ParamGroup::of_tensor(meta.len());
            meta.push(ParamMeta { name, group, len });
        };
        for (i, b) in self.encoder.iter().enumerate() {
            push(&mut meta, alloc::format!("encoder{}.conv1.weight", i + 1), b.conv1.weight.len());
            push(&mut meta, alloc::format!("encoder{}.conv1.bias", i + 1), b.conv1.bias.len());
            push(&mut meta, alloc::format!("encoder{}.conv2.weight", i + 1), b.conv2.weight.len());
            push(&mut meta, alloc::format!("encoder{}.conv2.bias", i + 1), b.conv2.bias.len());
        }
        push(&mut meta, String::from("bottleneck.conv1.weight"), self.bottleneck.conv1.weight.len());
        push(&mut meta, String::from("bottleneck.conv1.bias"), self.bottleneck.conv1.bias.len());
        push(&mut meta, String::from("bottleneck.conv2.weight"), self.bottleneck.conv2.weight.len());
        push(&mut meta, String::from("bottleneck.conv2.bias"), self.bottleneck.conv2.bias.len());
        for (j, b) in self.decoder.iter().enumerate() {
            push(&mut meta, alloc::format!("decoder{}.conv.weight", j + 1), b.conv.weight.len());
            push(&mut meta, alloc::format!("decoder{}.conv.bias", j + 1), b.conv.bias.len());
        }
        push(&mut meta, String::from("loc_head.weight"), self.loc_head.weight.len());
        push(&mut meta, String::from("loc_head.bias"), self.loc_head.bias.len());
        for (d, fc) in self.count_fc.iter().enumerate() {
            push(&mut meta, alloc::format!("count_fc{}.weight", d + 1), fc.weight.len());
            push(&mut meta, alloc::format!("count_fc{}.bias", d + 1), fc.bias.len());
        }
        meta
    }

    fn params(&self) -> Vec<&Vec<f32>> {
        let mut v = Vec::with_capacity(NUM_TENSORS);
        for b in &self.encoder {
            v.extend([&b.conv1.weight, &b.conv1.bias, &b.conv2.weight, &b.conv2.bias]);
        }
        v.extend([
            &self.bottleneck.conv1.weight,
            &self.bottleneck.conv1.bias,
            &self.bottleneck.conv2.weight,
            &self.bottleneck.conv2.bias,
        ]);
        for b in &self.decoder {
            v.extend([&b.conv.weight, &b.conv.bias]);
        }
        v.extend([&self.loc_head.weight, &self.loc_head.bias]);
        for fc in &self.count_fc {
            v.extend([&fc.weight, &fc.bias]);
        }
        v
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut v = Vec::with_capacity(NUM_TENSORS);
        for b in &mut self.encoder {
            let EncoderBlock { conv1, conv2 } = b;
            v.extend([&mut conv1.weight, &mut conv1.bias, &mut conv2.weight, &mut conv2.bias]);
        }
        let Bottleneck { conv1, conv2 } = &mut self.bottleneck;
        v.extend([&mut conv1.weight, &mut conv1.bias, &mut conv2.weight, &mut conv2.bias]);
        for b in &mut self.decoder {
            let DecoderBlock { conv } = b;
            v.extend([&mut conv.weight, &mut conv.bias]);
        }
        v.extend([&mut self.loc_head.weight, &mut self.loc_head.bias]);
        for fc in &mut self.count_fc {
            let Dense { weight, bias, .. } = fc;
            v.extend([&mut *weight, &mut *bias]);
        }
        v
    }

    pub fn tensor_data(&self, idx: usize) -> &[f32] {
        self.params()[idx]
    }

    pub fn tensor_data_mut(&mut self, idx: usize) -> &mut [f32] {
        self.params_mut()
            .into_iter()
            .nth(idx)
            .expect("tensor index in range")
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// All parameters concatenated in canonical order (checkpoint payload).
    pub fn flat_params(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.params() {
            out.extend_from_slice(t);
        }
        out
    }

    pub fn load_flat_params(&mut self, data: &[f32]) -> Result<(), NetError> {
        let expected = self.num_params();
        if data.len() != expected {
            return Err(NetError::ParamCountMismatch {
                expected,
                got: data.len(),
            });
        }
        let mut off = 0;
        for t in self.params_mut() {
            let len = t.len();
            t.copy_from_slice(&data[off..off + len]);
            off += len;
        }
        Ok(())
    }

    /// FNV-1a hash over the little-endian bytes of every parameter in the
    /// group, in canonical order. Bit-identical weights give equal hashes.
    pub fn group_checksum(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (idx, t) in self.params().iter().enumerate() {
            if ParamGroup::of_tensor(idx) != group {
                continue;
            }
            for v in t.iter() {
                for byte in v.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Layer-by-layer summary for a given input size.
    pub fn describe(&self, input_hw: (usize, usize)) -> Vec<LayerRow> {
        let cfg = &self.config;
        let (mut h, mut w) = input_hw;
        let mut rows = Vec::new();
        let shape = |c: usize, h: usize, w: usize| alloc::format!("{c}x{h}x{w}");
        rows.push(LayerRow {
            name: String::from("input"),
            output: shape(cfg.input_channels, h, w),
            params: 0,
            group: None,
        });
        for (i, b) in self.encoder.iter().enumerate() {
            let c = cfg.encoder_channels[i];
            rows.push(LayerRow {
                name: alloc::format!("encoder{}.conv1", i + 1),
                output: shape(c, h, w),
                params: b.conv1.num_params(),
                group: Some(ParamGroup::SharedEncoder),
            });
            rows.push(LayerRow {
                name: alloc::format!("encoder{}.conv2", i + 1),
                output: shape(c, h, w),
                params: b.conv2.num_params(),
                group: Some(ParamGroup::SharedEncoder),
            });
            h /= 2;
            w /= 2;
            rows.push(LayerRow {
                name: alloc::format!("encoder{}.pool", i + 1),
                output: shape(c, h, w),
                params: 0,
                group: None,
            });
        }
        for (name, conv) in [
            ("bottleneck.conv1", &self.bottleneck.conv1),
            ("bottleneck.conv2", &self.bottleneck.conv2),
        ] {
            rows.push(LayerRow {
                name: String::from(name),
                output: shape(cfg.bottleneck_channels, h, w),
                params: conv.num_params(),
                group: Some(ParamGroup::SharedEncoder),
            });
        }
        for (j, b) in self.decoder.iter().enumerate() {
            h *= 2;
            w *= 2;
            let skip = cfg.encoder_channels[3 - j];
            rows.push(LayerRow {
                name: alloc::format!("decoder{}.upsample+concat", j + 1),
                output: shape(b.conv.in_ch, h, w),
                params: 0,
                group: None,
            });
            rows.push(LayerRow {
                name: alloc::format!("decoder{}.conv", j + 1),
                output: shape(skip, h, w),
                params: b.conv.num_params(),
                group: Some(ParamGroup::LocalizationDecoder),
            });
        }
        rows.push(LayerRow {
            name: String::from("loc_head"),
            output: shape(1, h, w),
            params: self.loc_head.num_params(),
            group: Some(ParamGroup::LocalizationDecoder),
        });
        rows.push(LayerRow {
            name: String::from("count.gap"),
            output: alloc::format!("{}", cfg.bottleneck_channels),
            params: 0,
            group: None,
        });
        for (d, fc) in self.count_fc.iter().enumerate() {
            rows.push(LayerRow {
                name: alloc::format!("count_fc{}", d + 1),
                output: alloc::format!("{}", fc.out_dim),
                params: fc.num_params(),
                group: Some(ParamGroup::CountingHead),
            });
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            input_channels: 3,
            encoder_channels: [2, 3, 4, 5],
            bottleneck_channels: 6,
            dense_units: [7, 5],
            dropout_rate: 0.2,
        }
    }

    fn zero_image(h: usize, w: usize) -> Tensor {
        Tensor::zeros(3, h, w)
    }

    #[test]
    fn forward_shapes_and_ranges() {
        let net = Network::new(tiny_config(), 7).unwrap();
        let mut img = zero_image(32, 48);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i % 251) as f32 / 250.0;
        }
        let pred = net.predict(&img).unwrap();
        assert_eq!(pred.mask_probs.shape(), (1, 32, 48));
        assert!(pred.mask_probs.is_finite());
        assert!(pred
            .mask_probs
            .data()
            .iter()
            .all(|&p| p > 0.0 && p < 1.0));
        assert!(pred.count_estimate.is_finite());
    }

    #[test]
    fn all_zero_input_stays_finite() {
        let net = Network::new(tiny_config(), 1).unwrap();
        let pred = net.predict(&zero_image(16, 16)).unwrap();
        assert!(pred.mask_probs.is_finite());
        assert!(pred.count_estimate.is_finite());
    }

    #[test]
    fn rejects_bad_input_shapes() {
        let net = Network::new(tiny_config(), 1).unwrap();
        // 100 is not divisible by 16.
        let err = net.predict(&Tensor::zeros(3, 100, 100)).unwrap_err();
        assert!(matches!(err, NetError::BadInputShape { height: 100, .. }));
        assert!(net.predict(&Tensor::zeros(1, 32, 32)).is_err());
        assert!(net.predict(&Tensor::zeros(3, 32, 40)).is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = tiny_config();
        cfg.dropout_rate = 1.0;
        assert!(matches!(
            Network::new(cfg, 0),
            Err(NetError::BadDropoutRate { .. })
        ));
        let mut cfg = tiny_config();
        cfg.encoder_channels[2] = 0;
        assert_eq!(Network::new(cfg, 0).unwrap_err(), NetError::ZeroWidth);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = tiny_config();
        let a = Network::new(cfg.clone(), 42).unwrap();
        let b = Network::new(cfg.clone(), 42).unwrap();
        let c = Network::new(cfg, 43).unwrap();
        for g in ParamGroup::ALL {
            assert_eq!(a.group_checksum(g), b.group_checksum(g));
        }
        assert_ne!(
            a.group_checksum(ParamGroup::SharedEncoder),
            c.group_checksum(ParamGroup::SharedEncoder)
        );
    }

    #[test]
    fn tensor_meta_is_canonical() {
        let net = Network::new(tiny_config(), 3).unwrap();
        let meta = net.tensor_meta();
        assert_eq!(meta.len(), NUM_TENSORS);
        assert_eq!(meta[0].name, "encoder1.conv1.weight");
        assert_eq!(meta[LOC_HEAD].name, "loc_head.weight");
        assert_eq!(meta[DENSE_BASE + 5].name, "count_fc3.bias");
        for (i, m) in meta.iter().enumerate() {
            assert_eq!(m.group, ParamGroup::of_tensor(i));
            assert_eq!(m.len, net.tensor_data(i).len());
        }
        let by_meta: usize = meta.iter().map(|m| m.len).sum();
        assert_eq!(by_meta, net.num_params());
    }

    #[test]
    fn flat_params_round_trip() {
        let mut a = Network::new(tiny_config(), 5).unwrap();
        let b = Network::new(tiny_config(), 9).unwrap();
        let params = b.flat_params();
        a.load_flat_params(&params).unwrap();
        for g in ParamGroup::ALL {
            assert_eq!(a.group_checksum(g), b.group_checksum(g));
        }
        assert!(matches!(
            a.load_flat_params(&params[1..]),
            Err(NetError::ParamCountMismatch { .. })
        ));
    }

    #[test]
    fn predict_matches_forward_train_without_dropout() {
        let mut cfg = tiny_config();
        cfg.dropout_rate = 0.0;
        let net = Network::new(cfg, 11).unwrap();
        let mut img = zero_image(16, 32);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 97) as f32 / 96.0;
        }
        let mut rng = crate::rng::stream(0, crate::rng::STREAM_DROPOUT);
        let (train_pred, _) = net.forward_train(&img, &mut rng).unwrap();
        let pred = net.predict(&img).unwrap();
        assert_eq!(pred.mask_probs.data(), train_pred.mask_probs.data());
        assert_eq!(pred.count_estimate, train_pred.count_estimate);
    }

    #[test]
    fn count_only_backward_leaves_decoder_untouched() {
        let net = Network::new(tiny_config(), 2).unwrap();
        let img = {
            let mut t = zero_image(16, 16);
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = (i % 7) as f32 / 7.0;
            }
            t
        };
        let mut rng = crate::rng::stream(0, crate::rng::STREAM_DROPOUT);
        let (_, trace) = net.forward_train(&img, &mut rng).unwrap();
        let g = net.backward(&trace, None, 1.0);
        for idx in 0..NUM_TENSORS {
            let nonzero = g.tensor(idx).iter().any(|&v| v != 0.0);
            match ParamGroup::of_tensor(idx) {
                ParamGroup::LocalizationDecoder => {
                    assert!(!nonzero, "decoder tensor {idx} received gradient")
                }
                ParamGroup::CountingHead => {}
                ParamGroup::SharedEncoder => {}
            }
        }
        // The counting path must reach at least the first dense layer.
        assert!(g.tensor(DENSE_BASE).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn describe_tracks_spatial_dims() {
        let net = Network::new(tiny_config(), 1).unwrap();
        let rows = net.describe((64, 64));
        assert_eq!(rows[0].output, "3x64x64");
        let bneck = rows.iter().find(|r| r.name == "bottleneck.conv2").unwrap();
        assert_eq!(bneck.output, "6x4x4");
        let loc = rows.iter().find(|r| r.name == "loc_head").unwrap();
        assert_eq!(loc.output, "1x64x64");
        assert_eq!(loc.group, Some(ParamGroup::LocalizationDecoder));
        let total: usize = rows.iter().map(|r| r.params).sum();
        assert_eq!(total, net.num_params());
    }
}
