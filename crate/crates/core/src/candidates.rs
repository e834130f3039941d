//! The eight candidate operations of the cell search space, composed from
//! tensor-core primitives.
//!
//! Composition follows the DARTS convention: separable convs are two stacked
//! ReLU -> depthwise -> pointwise -> BN blocks (stride in the first), dilated
//! convs are one such block with dilation 2, pooling carries a trailing BN,
//! and a downsampling skip is a factorized reduce. Batch norms are affine in
//! evaluation networks and non-learnable during search so that architecture
//! parameters and affine scales do not confound each other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{uniform_vec, ChaCha8Rng};
use crate::scalar::Scalar;
use crate::tensor::{BnStats, ConvSpec, PoolKind, Tape, Tensor};

/// Candidate operation kinds. The declaration order is the architecture
/// parameter index and is fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "sep_conv_3x3")]
    SepConv3x3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5x5,
    #[serde(rename = "dil_conv_3x3")]
    DilConv3x3,
    #[serde(rename = "dil_conv_5x5")]
    DilConv5x5,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3x3,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3x3,
    #[serde(rename = "skip_connect")]
    SkipConnect,
    #[serde(rename = "zero")]
    Zero,
}

pub const NUM_OPS: usize = 8;

pub const ALL_OPS: [OpKind; NUM_OPS] = [
    OpKind::SepConv3x3,
    OpKind::SepConv5x5,
    OpKind::DilConv3x3,
    OpKind::DilConv5x5,
    OpKind::MaxPool3x3,
    OpKind::AvgPool3x3,
    OpKind::SkipConnect,
    OpKind::Zero,
];

impl OpKind {
    pub fn index(self) -> usize {
        ALL_OPS.iter().position(|&k| k == self).unwrap()
    }

    pub fn from_index(i: usize) -> Result<Self> {
        ALL_OPS.get(i).copied().ok_or_else(|| Error::arg(format!("op index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::SkipConnect => "skip_connect",
            OpKind::Zero => "zero",
        }
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OpKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ALL_OPS
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown op name {s:?}")))
    }
}

/// Batch-norm hyperparameters shared across a network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig { momentum: 0.1, eps: 1e-5 }
    }
}

/// He-style uniform bound from fan-in.
fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Bias-free convolution layer.
pub struct Conv2dLayer<T> {
    pub weight: Tensor<T>,
    pub spec: ConvSpec,
}

impl<T: Scalar> Conv2dLayer<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_c / groups) * kernel * kernel;
        let b = init_bound(fan_in);
        let values = uniform_vec(rng, out_c * (in_c / groups) * kernel * kernel, -b, b);
        let weight = Tensor::param(vec![out_c, in_c / groups, kernel, kernel], values).unwrap();
        Conv2dLayer { weight, spec: ConvSpec { stride, padding, dilation, groups } }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        tape.conv2d(x, &self.weight, self.spec)
    }
}

pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running: BnStats<T>,
    pub cfg: BnConfig,
    pub affine: bool,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize, affine: bool, cfg: BnConfig) -> Self {
        let gamma = Tensor::from_vec(vec![channels], vec![T::one(); channels]).unwrap();
        let beta = Tensor::from_vec(vec![channels], vec![T::zero(); channels]).unwrap();
        gamma.set_requires_grad(affine);
        beta.set_requires_grad(affine);
        BatchNorm { gamma, beta, running: BnStats::new(channels), cfg, affine }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        tape.batch_norm(x, &self.gamma, &self.beta, &mut self.running, self.cfg.momentum, self.cfg.eps, train)
    }

    pub fn params(&self, out: &mut Vec<Tensor<T>>) {
        if self.affine {
            out.push(self.gamma.clone());
            out.push(self.beta.clone());
        }
    }
}

/// ReLU -> 1x1 conv -> BN. The standard preprocessing block.
pub struct ReluConvBn<T> {
    pub conv: Conv2dLayer<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Scalar> ReluConvBn<T> {
    pub fn new(in_c: usize, out_c: usize, affine: bool, cfg: BnConfig, rng: &mut ChaCha8Rng) -> Self {
        ReluConvBn {
            conv: Conv2dLayer::new(in_c, out_c, 1, 1, 0, 1, 1, rng),
            bn: BatchNorm::new(out_c, affine, cfg),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let x = tape.relu(x)?;
        let x = self.conv.forward(tape, &x)?;
        self.bn.forward(tape, &x, train)
    }

    pub fn params(&self, out: &mut Vec<Tensor<T>>) {
        out.push(self.conv.weight.clone());
        self.bn.params(out);
    }
}

/// One ReLU -> depthwise -> pointwise -> BN block.
struct SepBlock<T> {
    dw: Conv2dLayer<T>,
    pw: Conv2dLayer<T>,
    bn: BatchNorm<T>,
}

impl<T: Scalar> SepBlock<T> {
    fn new(
        channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        affine: bool,
        cfg: BnConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let padding = dilation * (kernel - 1) / 2;
        SepBlock {
            dw: Conv2dLayer::new(channels, channels, kernel, stride, padding, dilation, channels, rng),
            pw: Conv2dLayer::new(channels, channels, 1, 1, 0, 1, 1, rng),
            bn: BatchNorm::new(channels, affine, cfg),
        }
    }

    fn forward(&mut self, tape: &mut Tape<T>, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let x = tape.relu(x)?;
        let x = self.dw.forward(tape, &x)?;
        let x = self.pw.forward(tape, &x)?;
        self.bn.forward(tape, &x, train)
    }

    fn params(&self, out: &mut Vec<Tensor<T>>) {
        out.push(self.dw.weight.clone());
        out.push(self.pw.weight.clone());
        self.bn.params(out);
    }
}

/// Two stacked separable blocks; stride lives in the first.
pub struct SepConv<T> {
    block1: SepBlock<T>,
    block2: SepBlock<T>,
}

/// One separable block with dilation 2.
pub struct DilConv<T> {
    block: SepBlock<T>,
}

/// 3x3 pooling followed by BN.
pub struct PoolOp<T> {
    kind: PoolKind,
    stride: usize,
    bn: BatchNorm<T>,
}

/// Stride-2 channel-preserving projection: two parallel 1x1 stride-2 convs
/// on pixel-offset views, concatenated, then BN.
pub struct FactorizedReduce<T> {
    conv1: Conv2dLayer<T>,
    conv2: Conv2dLayer<T>,
    bn: BatchNorm<T>,
}

impl<T: Scalar> FactorizedReduce<T> {
    pub fn new(in_c: usize, out_c: usize, affine: bool, cfg: BnConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if out_c % 2 != 0 {
            return Err(Error::arg(format!("factorized reduce needs even channels, got {out_c}")));
        }
        Ok(FactorizedReduce {
            conv1: Conv2dLayer::new(in_c, out_c / 2, 1, 2, 0, 1, 1, rng),
            conv2: Conv2dLayer::new(in_c, out_c / 2, 1, 2, 0, 1, 1, rng),
            bn: BatchNorm::new(out_c, affine, cfg),
        })
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let x = tape.relu(x)?;
        let a = self.conv1.forward(tape, &x)?;
        let shifted = tape.crop_tl(&x, 1, 1)?;
        let b = self.conv2.forward(tape, &shifted)?;
        let cat = tape.concat_channels(&[a, b])?;
        self.bn.forward(tape, &cat, train)
    }

    pub fn params(&self, out: &mut Vec<Tensor<T>>) {
        out.push(self.conv1.weight.clone());
        out.push(self.conv2.weight.clone());
        self.bn.params(out);
    }
}

enum OpBody<T> {
    Sep(SepConv<T>),
    Dil(DilConv<T>),
    Pool(PoolOp<T>),
    Identity,
    Reduce(FactorizedReduce<T>),
    Zero,
}

/// A materialized candidate operation on one edge.
pub struct OpInstance<T> {
    pub kind: OpKind,
    pub channels: usize,
    pub stride: usize,
    body: OpBody<T>,
}

/// Builds a candidate op with freshly initialized weights.
pub fn build_op<T: Scalar>(
    kind: OpKind,
    channels: usize,
    stride: usize,
    affine: bool,
    cfg: BnConfig,
    rng: &mut ChaCha8Rng,
) -> Result<OpInstance<T>> {
    if !(stride == 1 || stride == 2) {
        return Err(Error::arg(format!("unsupported stride {stride}")));
    }
    if channels < 1 {
        return Err(Error::arg("channels must be >= 1"));
    }
    let body = match kind {
        OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
            let k = if kind == OpKind::SepConv3x3 { 3 } else { 5 };
            OpBody::Sep(SepConv {
                block1: SepBlock::new(channels, k, stride, 1, affine, cfg, rng),
                block2: SepBlock::new(channels, k, 1, 1, affine, cfg, rng),
            })
        }
        OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
            let k = if kind == OpKind::DilConv3x3 { 3 } else { 5 };
            OpBody::Dil(DilConv { block: SepBlock::new(channels, k, stride, 2, affine, cfg, rng) })
        }
        OpKind::MaxPool3x3 => {
            OpBody::Pool(PoolOp { kind: PoolKind::Max, stride, bn: BatchNorm::new(channels, affine, cfg) })
        }
        OpKind::AvgPool3x3 => {
            OpBody::Pool(PoolOp { kind: PoolKind::Avg, stride, bn: BatchNorm::new(channels, affine, cfg) })
        }
        OpKind::SkipConnect => {
            if stride == 1 {
                OpBody::Identity
            } else {
                OpBody::Reduce(FactorizedReduce::new(channels, channels, affine, cfg, rng)?)
            }
        }
        OpKind::Zero => OpBody::Zero,
    };
    Ok(OpInstance { kind, channels, stride, body })
}

impl<T: Scalar> OpInstance<T> {
    /// Applies the op. Differentiable end to end; the zero op contributes a
    /// constant, so no gradient flows through it.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::dim(format!("op expects {} channels, input has {c}", self.channels)));
        }
        match &mut self.body {
            OpBody::Sep(sep) => {
                let x = sep.block1.forward(tape, x, train)?;
                sep.block2.forward(tape, &x, train)
            }
            OpBody::Dil(dil) => dil.block.forward(tape, x, train),
            OpBody::Pool(pool) => {
                let x = tape.pool2d(x, pool.kind, 3, pool.stride, 1)?;
                pool.bn.forward(tape, &x, train)
            }
            OpBody::Identity => Ok(x.clone()),
            OpBody::Reduce(red) => red.forward(tape, x, train),
            OpBody::Zero => {
                Ok(Tensor::zeros(vec![n, c, h.div_ceil(self.stride), w.div_ceil(self.stride)]))
            }
        }
    }

    /// Learnable tensors in a fixed order (conv weights and, when affine,
    /// BN gamma/beta; running stats excluded).
    pub fn params(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        match &self.body {
            OpBody::Sep(sep) => {
                sep.block1.params(&mut out);
                sep.block2.params(&mut out);
            }
            OpBody::Dil(dil) => dil.block.params(&mut out),
            OpBody::Pool(pool) => pool.bn.params(&mut out),
            OpBody::Identity | OpBody::Zero => {}
            OpBody::Reduce(red) => red.params(&mut out),
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn op_order_is_the_alpha_index() {
        let names: Vec<&str> = ALL_OPS.iter().map(|k| k.name()).collect();
        assert_eq!(
            names,
            vec![
                "sep_conv_3x3",
                "sep_conv_5x5",
                "dil_conv_3x3",
                "dil_conv_5x5",
                "max_pool_3x3",
                "avg_pool_3x3",
                "skip_connect",
                "zero"
            ]
        );
        for (i, k) in ALL_OPS.iter().enumerate() {
            assert_eq!(k.index(), i);
            assert_eq!(OpKind::from_index(i).unwrap(), *k);
        }
    }

    #[test]
    fn op_names_serialize_stably() {
        let json = serde_json::to_string(&OpKind::SepConv3x3).unwrap();
        assert_eq!(json, "\"sep_conv_3x3\"");
        let back: OpKind = serde_json::from_str("\"dil_conv_5x5\"").unwrap();
        assert_eq!(back, OpKind::DilConv5x5);
        assert!(serde_json::from_str::<OpKind>("\"conv_7x7\"").is_err());
    }

    #[test]
    fn weightless_ops_have_zero_params() {
        let cfg = BnConfig::default();
        let mut rng = rng_from(0);
        for (kind, stride) in [(OpKind::Zero, 1), (OpKind::SkipConnect, 1)] {
            let op = build_op::<f64>(kind, 16, stride, false, cfg, &mut rng).unwrap();
            assert_eq!(op.param_count(), 0, "{kind}");
        }
    }

    #[test]
    fn sep_conv_param_count_matches_constituents() {
        let cfg = BnConfig::default();
        let mut rng = rng_from(1);
        let c = 16;
        // Two blocks of depthwise (C*1*3*3) + pointwise (C*C*1*1); BN not
        // learnable during search.
        let op = build_op::<f64>(OpKind::SepConv3x3, c, 1, false, cfg, &mut rng).unwrap();
        assert_eq!(op.param_count(), 2 * (c * 9 + c * c));
        // Affine mode adds gamma+beta per BN.
        let op = build_op::<f64>(OpKind::SepConv3x3, c, 1, true, cfg, &mut rng).unwrap();
        assert_eq!(op.param_count(), 2 * (c * 9 + c * c + 2 * c));
    }

    #[test]
    fn dil_conv_param_count_matches_constituents() {
        let cfg = BnConfig::default();
        let mut rng = rng_from(2);
        let c = 16;
        let op = build_op::<f64>(OpKind::DilConv5x5, c, 1, false, cfg, &mut rng).unwrap();
        assert_eq!(op.param_count(), c * 25 + c * c);
        let op = build_op::<f64>(OpKind::MaxPool3x3, c, 1, true, cfg, &mut rng).unwrap();
        assert_eq!(op.param_count(), 2 * c);
    }

    #[test]
    fn invalid_stride_rejected() {
        let mut rng = rng_from(0);
        assert!(build_op::<f64>(OpKind::Zero, 8, 3, false, BnConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn all_kinds_map_shapes_for_both_strides() {
        let cfg = BnConfig::default();
        let mut rng = rng_from(3);
        for kind in ALL_OPS {
            for stride in [1usize, 2] {
                let mut op = build_op::<f64>(kind, 8, stride, false, cfg, &mut rng).unwrap();
                let x = Tensor::from_vec(vec![2, 8, 8, 8], uniform_vec(&mut rng, 2 * 8 * 64, -1.0, 1.0)).unwrap();
                let mut tape = Tape::new();
                let y = op.forward(&mut tape, &x, true).unwrap();
                assert_eq!(y.shape(), &[2, 8, 8 / stride, 8 / stride], "{kind} stride {stride}");
            }
        }
    }

    #[test]
    fn zero_op_outputs_zeros_and_blocks_gradient() {
        let cfg = BnConfig::default();
        let mut rng = rng_from(4);
        let mut op = build_op::<f64>(OpKind::Zero, 4, 1, false, cfg, &mut rng).unwrap();
        let x = Tensor::param(vec![1, 4, 6, 6], uniform_vec(&mut rng, 4 * 36, -1.0, 1.0)).unwrap();
        let mut tape = Tape::new();
        let y = op.forward(&mut tape, &x, true).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
        let loss = tape.sum_all(&y).unwrap();
        tape.backward(&loss).unwrap();
        // The zero op is constant in x: either no gradient or an all-zero one.
        assert!(x.grad().map_or(true, |g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn skip_connect_is_identity_at_stride_1() {
        let cfg = BnConfig::default();
        let mut rng = rng_from(5);
        let mut op = build_op::<f64>(OpKind::SkipConnect, 4, 1, false, cfg, &mut rng).unwrap();
        let x = Tensor::from_vec(vec![1, 4, 4, 4], uniform_vec(&mut rng, 64, -1.0, 1.0)).unwrap();
        let mut tape = Tape::new();
        let y = op.forward(&mut tape, &x, true).unwrap();
        assert!(y.ptr_eq(&x));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let cfg = BnConfig::default();
        let mut rng = rng_from(6);
        let mut op = build_op::<f64>(OpKind::SepConv3x3, 8, 1, false, cfg, &mut rng).unwrap();
        let x = Tensor::zeros(vec![1, 4, 8, 8]);
        let mut tape = Tape::new();
        assert!(op.forward(&mut tape, &x, true).is_err());
    }
}
