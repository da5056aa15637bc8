//! The learned smoothing network: a stack of dilated 3×3 conv blocks
//! (conv → batch norm → ReLU), squeeze-and-excitation channel weighting and a
//! 1×1 fusion conv down to a single non-negative TFD channel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conv::{conv2d_backward_with, conv2d_with};
use super::layers::{Activation, BatchNorm, BatchNormCache};
use super::se::{SeBlock, SeCache};
use super::tensor::{FeatureMap, Tensor};
use super::{Mode, Precision};
use crate::error::{Error, Result};
use crate::tfd::TfMatrix;

/// Smallest supported TFD side length.
pub const MIN_INPUT_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeSpec {
    pub channels: usize,
    pub reduction: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub conv_blocks: Vec<ConvBlockSpec>,
    pub se_blocks: Vec<SeSpec>,
    pub fusion: FusionSpec,
}

impl Default for NetworkSpec {
    /// Six blocks with widths (32, 64, 64, 64, 64, 64) and dilations
    /// 1, 2, 4, ..., 32, then SE blocks with reductions 4, 2, 1.
    fn default() -> Self {
        NetworkSpec::new(&[32, 64, 64, 64, 64, 64], &[1, 2, 4, 8, 16, 32], &[4, 2, 1])
    }
}

impl NetworkSpec {
    /// Chains `widths` into conv blocks fed by a single input channel; SE
    /// blocks act on the last width.
    pub fn new(widths: &[usize], dilations: &[usize], reductions: &[usize]) -> Self {
        let mut in_channels = 1;
        let conv_blocks = widths
            .iter()
            .zip(dilations)
            .map(|(&out_channels, &dilation)| {
                let block = ConvBlockSpec {
                    in_channels,
                    out_channels,
                    kernel: 3,
                    dilation,
                };
                in_channels = out_channels;
                block
            })
            .collect();
        NetworkSpec {
            conv_blocks,
            se_blocks: reductions
                .iter()
                .map(|&reduction| SeSpec {
                    channels: in_channels,
                    reduction,
                })
                .collect(),
            fusion: FusionSpec {
                in_channels,
                out_channels: 1,
                kernel: 1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::invalid("network spec", reason));
        if self.conv_blocks.is_empty() {
            return fail("at least one conv block is required".into());
        }
        let mut channels = 1;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.in_channels != channels {
                return fail(format!(
                    "conv block {i} expects {} input channels but receives {channels}",
                    b.in_channels
                ));
            }
            if b.out_channels == 0 || b.dilation == 0 || b.kernel % 2 == 0 {
                return fail(format!("conv block {i} needs positive width/dilation and odd kernel"));
            }
            channels = b.out_channels;
        }
        for (i, se) in self.se_blocks.iter().enumerate() {
            if se.channels != channels {
                return fail(format!("SE block {i} sized for {} channels, got {channels}", se.channels));
            }
            if se.reduction == 0 || se.channels % se.reduction != 0 {
                return fail(format!(
                    "SE block {i}: reduction {} does not divide {} channels",
                    se.reduction, se.channels
                ));
            }
        }
        let f = &self.fusion;
        if f.in_channels != channels || f.out_channels != 1 || f.kernel != 1 {
            return fail(format!(
                "fusion must map {channels} channels to 1 with a 1x1 kernel, got {f:?}"
            ));
        }
        Ok(())
    }

    /// Side length of the square region seen by one output of the conv stack.
    pub fn receptive_field(&self) -> usize {
        1 + self
            .conv_blocks
            .iter()
            .map(|b| (b.kernel - 1) * b.dilation)
            .sum::<usize>()
    }

    /// Closed-form number of stored values, batch-norm running statistics
    /// included.
    pub fn parameter_count(&self) -> usize {
        let conv: usize = self
            .conv_blocks
            .iter()
            .map(|b| b.out_channels * b.in_channels * b.kernel * b.kernel + b.out_channels + 4 * b.out_channels)
            .sum();
        let se: usize = self
            .se_blocks
            .iter()
            .map(|s| 2 * s.channels * s.channels / s.reduction + s.channels / s.reduction + s.channels)
            .sum();
        let f = &self.fusion;
        conv + se + f.out_channels * f.in_channels * f.kernel * f.kernel + f.out_channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub dilation: usize,
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epoch: usize,
    pub steps: u64,
    pub loss_history: Vec<f64>,
    pub val_history: Vec<f64>,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Option<crate::train::Optimizer>,
}

/// Network description plus every learned parameter and running statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub blocks: Vec<ConvBlock>,
    pub se: Vec<SeBlock>,
    pub fusion_weight: Tensor,
    pub fusion_bias: Tensor,
    pub meta: TrainingMeta,
}

fn he_uniform(rng: &mut ChaCha8Rng, t: &mut Tensor, fan_in: usize) {
    let bound = (6.0 / fan_in as f64).sqrt();
    t.data.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
}

/// He-uniform weights from a seeded generator, zero biases, unit BN scale,
/// zero BN shift, running statistics (0, 1).
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<Checkpoint> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = spec
        .conv_blocks
        .iter()
        .map(|b| {
            let mut weight = Tensor::zeros(&[b.out_channels, b.in_channels, b.kernel, b.kernel]);
            he_uniform(&mut rng, &mut weight, b.in_channels * b.kernel * b.kernel);
            ConvBlock {
                dilation: b.dilation,
                weight,
                bias: Tensor::zeros(&[b.out_channels]),
                bn: BatchNorm::new(b.out_channels),
            }
        })
        .collect();
    let mut se = Vec::with_capacity(spec.se_blocks.len());
    for s in &spec.se_blocks {
        let mut block = SeBlock::new(s.channels, s.reduction)?;
        he_uniform(&mut rng, &mut block.squeeze.weight, s.channels);
        he_uniform(&mut rng, &mut block.excite.weight, s.channels / s.reduction);
        se.push(block);
    }
    let f = spec.fusion;
    let mut fusion_weight = Tensor::zeros(&[f.out_channels, f.in_channels, f.kernel, f.kernel]);
    he_uniform(&mut rng, &mut fusion_weight, f.in_channels * f.kernel * f.kernel);
    Ok(Checkpoint {
        spec: spec.clone(),
        blocks,
        se,
        fusion_weight,
        fusion_bias: Tensor::zeros(&[f.out_channels]),
        meta: TrainingMeta {
            seed,
            ..TrainingMeta::default()
        },
    })
}

impl Checkpoint {
    /// Trainable tensors in a fixed order, with stable names.
    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("conv{i}.weight"), &b.weight));
            out.push((format!("conv{i}.bias"), &b.bias));
            out.push((format!("bn{i}.scale"), &b.bn.scale));
            out.push((format!("bn{i}.shift"), &b.bn.shift));
        }
        for (j, s) in self.se.iter().enumerate() {
            out.push((format!("se{j}.w1"), &s.squeeze.weight));
            out.push((format!("se{j}.b1"), &s.squeeze.bias));
            out.push((format!("se{j}.w2"), &s.excite.weight));
            out.push((format!("se{j}.b2"), &s.excite.bias));
        }
        out.push(("fusion.weight".into(), &self.fusion_weight));
        out.push(("fusion.bias".into(), &self.fusion_bias));
        out
    }

    /// Same order as [`Checkpoint::trainable`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            out.push(&mut b.bn.scale);
            out.push(&mut b.bn.shift);
        }
        for s in &mut self.se {
            out.push(&mut s.squeeze.weight);
            out.push(&mut s.squeeze.bias);
            out.push(&mut s.excite.weight);
            out.push(&mut s.excite.bias);
        }
        out.push(&mut self.fusion_weight);
        out.push(&mut self.fusion_bias);
        out
    }

    pub fn zero_grad(&mut self) {
        self.trainable_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Number of stored values, running statistics included.
    pub fn stored_values(&self) -> usize {
        let params: usize = self.trainable().iter().map(|(_, t)| t.len()).sum();
        let stats: usize = self.blocks.iter().map(|b| 2 * b.bn.channels()).sum();
        params + stats
    }

    pub fn is_finite(&self) -> bool {
        self.trainable().iter().all(|(_, t)| t.is_finite())
            && self
                .blocks
                .iter()
                .all(|b| b.bn.running_mean.iter().chain(&b.bn.running_var).all(|v| v.is_finite()))
    }

    /// Verifies every tensor shape against the spec.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.blocks.len() != self.spec.conv_blocks.len() || self.se.len() != self.spec.se_blocks.len() {
            return Err(Error::invalid("checkpoint", "layer count does not match the spec"));
        }
        for (b, s) in self.blocks.iter().zip(&self.spec.conv_blocks) {
            b.weight
                .expect_shape(&[s.out_channels, s.in_channels, s.kernel, s.kernel])?;
            b.bias.expect_shape(&[s.out_channels])?;
            b.bn.scale.expect_shape(&[s.out_channels])?;
            b.bn.shift.expect_shape(&[s.out_channels])?;
            if b.dilation != s.dilation
                || b.bn.running_mean.len() != s.out_channels
                || b.bn.running_var.len() != s.out_channels
            {
                return Err(Error::invalid("checkpoint", "conv block does not match the spec"));
            }
        }
        for (b, s) in self.se.iter().zip(&self.spec.se_blocks) {
            let hidden = s.channels / s.reduction;
            b.squeeze.weight.expect_shape(&[hidden, s.channels])?;
            b.squeeze.bias.expect_shape(&[hidden])?;
            b.excite.weight.expect_shape(&[s.channels, hidden])?;
            b.excite.bias.expect_shape(&[s.channels])?;
        }
        let f = &self.spec.fusion;
        self.fusion_weight
            .expect_shape(&[f.out_channels, f.in_channels, f.kernel, f.kernel])?;
        self.fusion_bias.expect_shape(&[f.out_channels])?;
        Ok(())
    }
}

/// Divides an input WVD by its largest absolute value.
pub fn scale_input(wvd: &TfMatrix) -> TfMatrix {
    wvd.peak_normalized()
}

/// Stacks equally sized matrices into a `B×1×H×W` map.
pub fn stack(matrices: &[&TfMatrix]) -> Result<FeatureMap> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::invalid("batch", "empty batch"))?;
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(matrices.len() * h * w);
    for m in matrices {
        if m.shape() != (h, w) {
            return Err(Error::shape((h, w), m.shape()));
        }
        data.extend_from_slice(m.data());
    }
    FeatureMap::from_vec(matrices.len(), 1, h, w, data)
}

/// Splits a `B×1×H×W` map back into matrices.
pub fn unstack(map: &FeatureMap) -> Vec<TfMatrix> {
    (0..map.batch)
        .map(|s| TfMatrix::from_vec(map.height, map.width, map.sample(s).to_vec()).unwrap())
        .collect()
}

fn check_input(ckpt: &Checkpoint, x: &FeatureMap) -> Result<()> {
    if x.channels != 1 {
        return Err(Error::shape("1 input channel", x.channels));
    }
    if x.height < MIN_INPUT_SIZE || x.width < MIN_INPUT_SIZE {
        return Err(Error::invalid(
            "network input",
            format!(
                "{}x{} is below the minimum supported size {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}",
                x.height, x.width
            ),
        ));
    }
    if x.batch == 0 {
        return Err(Error::invalid("network input", "empty batch"));
    }
    ckpt.validate()
}

/// Inference-mode forward pass; a pure function of input and checkpoint.
pub fn forward_infer(ckpt: &Checkpoint, x: &FeatureMap) -> Result<FeatureMap> {
    forward_infer_with(ckpt, x, Precision::F64)
}

pub fn forward_infer_with(ckpt: &Checkpoint, x: &FeatureMap, precision: Precision) -> Result<FeatureMap> {
    check_input(ckpt, x)?;
    let mut a = x.clone();
    for b in &ckpt.blocks {
        let z = conv2d_with(&a, &b.weight, &b.bias, b.dilation, precision)?;
        a = b.bn.infer(&z)?;
        Activation::Relu.forward_in_place(&mut a.data);
    }
    for se in &ckpt.se {
        a = se.forward(&a)?.0;
    }
    let mut out = conv2d_with(&a, &ckpt.fusion_weight, &ckpt.fusion_bias, 1, precision)?;
    Activation::Relu.forward_in_place(&mut out.data);
    Ok(out)
}

/// Smooths one WVD with a trained checkpoint (input scaled to unit peak).
pub fn infer(ckpt: &Checkpoint, wvd: &TfMatrix) -> Result<TfMatrix> {
    let x = stack(&[&scale_input(wvd)])?;
    Ok(unstack(&forward_infer(ckpt, &x)?).remove(0))
}

struct BlockTrace {
    bn: BatchNormCache,
    output: FeatureMap,
}

struct Trace {
    input: FeatureMap,
    blocks: Vec<BlockTrace>,
    se: Vec<(SeCache, FeatureMap)>,
    output: FeatureMap,
}

/// Owns a checkpoint and the activations of the last training-mode forward
/// pass, so that gradients can be accumulated into the checkpoint.
pub struct KlNet {
    ckpt: Checkpoint,
    trace: Option<Trace>,
    precision: Precision,
}

impl KlNet {
    pub fn new(ckpt: Checkpoint) -> Result<Self> {
        ckpt.validate()?;
        Ok(KlNet {
            ckpt,
            trace: None,
            precision: Precision::F64,
        })
    }

    /// Arithmetic for the convolution products of later passes.
    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    pub fn checkpoint_mut(&mut self) -> &mut Checkpoint {
        &mut self.ckpt
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.ckpt
    }

    /// Training mode uses batch statistics, updates running statistics and
    /// records the activations needed by [`KlNet::backward`].
    pub fn forward(&mut self, x: &FeatureMap, mode: Mode) -> Result<FeatureMap> {
        match mode {
            Mode::Infer => {
                self.trace = None;
                forward_infer_with(&self.ckpt, x, self.precision)
            }
            Mode::Train => self.forward_train(x),
        }
    }

    /// Convenience wrapper for a single TFD; the input is peak-scaled first.
    pub fn forward_tfd(&mut self, wvd: &TfMatrix, mode: Mode) -> Result<TfMatrix> {
        let x = stack(&[&scale_input(wvd)])?;
        Ok(unstack(&self.forward(&x, mode)?).remove(0))
    }

    fn forward_train(&mut self, x: &FeatureMap) -> Result<FeatureMap> {
        check_input(&self.ckpt, x)?;
        self.trace = None;
        let mut blocks: Vec<BlockTrace> = Vec::with_capacity(self.ckpt.blocks.len());
        for b in &mut self.ckpt.blocks {
            let input = blocks.last().map_or(x, |t| &t.output);
            let z = conv2d_with(input, &b.weight, &b.bias, b.dilation, self.precision)?;
            let (mut output, bn) = b.bn.forward_train(&z)?;
            drop(z);
            Activation::Relu.forward_in_place(&mut output.data);
            blocks.push(BlockTrace { bn, output });
        }
        let mut se: Vec<(SeCache, FeatureMap)> = Vec::with_capacity(self.ckpt.se.len());
        for block in &self.ckpt.se {
            let input = se.last().map_or(&blocks.last().unwrap().output, |(_, o)| o);
            let (output, cache) = block.forward(input)?;
            se.push((cache, output));
        }
        let fused_input = se.last().map_or(&blocks.last().unwrap().output, |(_, o)| o);
        let mut output = conv2d_with(
            fused_input,
            &self.ckpt.fusion_weight,
            &self.ckpt.fusion_bias,
            1,
            self.precision,
        )?;
        Activation::Relu.forward_in_place(&mut output.data);
        self.trace = Some(Trace {
            input: x.clone(),
            blocks,
            se,
            output: output.clone(),
        });
        Ok(output)
    }

    /// Back-propagates `d_out = ∂L/∂output` through the recorded pass and
    /// accumulates parameter gradients into the checkpoint.
    pub fn backward(&mut self, d_out: &FeatureMap) -> Result<()> {
        let trace = self.trace.take().ok_or(Error::NoForwardPass)?;
        if d_out.shape() != trace.output.shape() {
            return Err(Error::shape(trace.output.shape(), d_out.shape()));
        }
        let precision = self.precision;
        let ckpt = &mut self.ckpt;
        let mut d = d_out.clone();
        d.data = Activation::Relu.backward(&trace.output.data, &d.data);

        let last_block = &trace.blocks.last().unwrap().output;
        let fused_input = trace.se.last().map_or(last_block, |(_, o)| o);
        d = conv2d_backward_with(
            fused_input,
            &mut ckpt.fusion_weight,
            &mut ckpt.fusion_bias,
            1,
            &d,
            true,
            precision,
        )?
        .expect("input gradient requested");

        for j in (0..ckpt.se.len()).rev() {
            let input = if j == 0 { last_block } else { &trace.se[j - 1].1 };
            d = ckpt.se[j].backward(input, &trace.se[j].0, &d)?;
        }

        for i in (0..ckpt.blocks.len()).rev() {
            let bt = &trace.blocks[i];
            d.data = Activation::Relu.backward(&bt.output.data, &d.data);
            let block = &mut ckpt.blocks[i];
            d = block.bn.backward(&bt.bn, &d)?;
            let input = if i == 0 { &trace.input } else { &trace.blocks[i - 1].output };
            match conv2d_backward_with(
                input,
                &mut block.weight,
                &mut block.bias,
                block.dilation,
                &d,
                i > 0,
                precision,
            )? {
                Some(dx) => d = dx,
                None => break,
            }
        }
        Ok(())
    }
}

/// One finite-difference probe of a parameter coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientProbe {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradientProbe {
    /// `|a − n| / max(|a|, |n|, 1e-3)`.
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(1e-3);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Step for whole-network gradient checks; small enough that ReLU kinks are
/// rarely crossed.
pub const GRADIENT_CHECK_STEP: f64 = 1e-6;

/// Replaces every bias and batch-norm shift with seeded uniform values in
/// `[−scale, scale]`, moving a fresh initialization off the degenerate
/// all-zero-offset point before a gradient check.
pub fn jitter_offsets(ckpt: &mut Checkpoint, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |t: &mut Tensor| t.data.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    for b in &mut ckpt.blocks {
        fill(&mut b.bias);
        fill(&mut b.bn.shift);
    }
    for s in &mut ckpt.se {
        fill(&mut s.squeeze.bias);
        fill(&mut s.excite.bias);
    }
    fill(&mut ckpt.fusion_bias);
}

/// Layer a trainable tensor belongs to: `block{i}` for a conv block and its
/// batch norm, `se{j}` for a squeeze-excitation block, `fusion`.
pub fn layer_of(tensor: &str) -> String {
    let head = tensor.split('.').next().unwrap_or(tensor);
    match head.strip_prefix("conv").or_else(|| head.strip_prefix("bn")) {
        Some(i) => format!("block{i}"),
        None => head.to_string(),
    }
}

/// Compares back-propagated gradients of `L = Σ probe·forward(x)` (training
/// mode) against central differences with step `h`. Every layer contributes
/// up to `per_layer` seeded random coordinates, spread round-robin over its
/// tensors.
pub fn gradient_check(
    ckpt: &Checkpoint,
    x: &FeatureMap,
    probe: &FeatureMap,
    per_layer: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<GradientProbe>> {
    let loss = |c: Checkpoint| -> Result<f64> {
        let y = KlNet::new(c)?.forward(x, Mode::Train)?;
        if y.shape() != probe.shape() {
            return Err(Error::shape(y.shape(), probe.shape()));
        }
        Ok(y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum())
    };
    let mut net = KlNet::new(ckpt.clone())?;
    net.checkpoint_mut().zero_grad();
    net.forward(x, Mode::Train)?;
    net.backward(probe)?;
    let grads = net.checkpoint();
    let tensors = grads.trainable();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<usize>> = tensors
        .iter()
        .map(|(_, t)| {
            let mut coords: Vec<usize> = (0..t.len()).collect();
            rand::seq::SliceRandom::shuffle(&mut coords[..], &mut rng);
            coords
        })
        .collect();
    let mut layers: Vec<(String, Vec<usize>)> = Vec::new();
    for (t, (name, _)) in tensors.iter().enumerate() {
        let layer = layer_of(name);
        match layers.iter_mut().find(|(l, _)| *l == layer) {
            Some((_, members)) => members.push(t),
            None => layers.push((layer, vec![t])),
        }
    }
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (_, members) in &layers {
        let mut taken = 0;
        while taken < per_layer && members.iter().any(|&t| !pools[t].is_empty()) {
            for &t in members {
                if taken == per_layer {
                    break;
                }
                if let Some(index) = pools[t].pop() {
                    picks.push((t, index));
                    taken += 1;
                }
            }
        }
    }
    picks.sort_unstable();

    let mut probes = Vec::with_capacity(picks.len());
    for (t, index) in picks {
        let shifted = |delta: f64| -> Result<f64> {
            let mut c = ckpt.clone();
            c.trainable_mut()[t].data[index] += delta;
            loss(c)
        };
        let numeric = (shifted(h)? - shifted(-h)?) / (2.0 * h);
        probes.push(GradientProbe {
            tensor: tensors[t].0.clone(),
            index,
            analytic: tensors[t].1.grad[index],
            numeric,
        });
    }
    Ok(probes)
}
