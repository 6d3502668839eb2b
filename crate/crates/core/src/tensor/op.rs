use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::Error;

/// Catalog operation together with its attributes.
///
/// Broadcasting (add, sub, mul) only aligns trailing axes: the shorter shape
/// must equal a suffix of the longer one.
#[derive(Clone, Debug)]
pub enum Op {
    Add,
    Sub,
    Mul,
    /// `[.., m, k] x [k, n]` (shared rhs) or `[.., m, k] x [.., k, n]` with
    /// identical leading dims.
    MatMul,
    Reshape { shape: Vec<usize> },
    /// Swaps two axes.
    Transpose { axes: (usize, usize) },
    Slice { axis: usize, start: usize, end: usize },
    Concat { axis: usize },
    /// Rows of a `[V, d]` table; output shape is `ids_shape ++ [d]`.
    EmbeddingGather { ids: Arc<[usize]>, ids_shape: Vec<usize> },
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    /// Normalisation without affine parameters; variance is biased.
    LayerNorm { axis: usize, eps: f64 },
    Gelu,
    Relu,
    /// `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, optional bias `[O]`.
    Conv2d { stride: usize, pad: usize },
    /// Positions where `mask` is true are replaced by `value`; the mask
    /// shape must be a suffix of the input shape.
    MaskedFill { mask: Arc<[bool]>, mask_shape: Vec<usize>, value: f64 },
    /// `None` reduces every axis to a scalar.
    ReduceSum { axis: Option<usize> },
    ReduceMean { axis: Option<usize> },
    Scale { factor: f64 },
    /// `x / sqrt(sum(x^2) + eps)` along `axis`.
    L2Normalize { axis: usize, eps: f64 },
    /// Mean (optionally weighted) negative log-likelihood of `targets` under
    /// softmax over the last axis. A zero total weight yields loss 0.
    CrossEntropyWithLogits { targets: Arc<[usize]>, weights: Option<Arc<[f64]>> },
}

/// Attribute-free name of a catalog operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Reshape,
    Transpose,
    Slice,
    Concat,
    EmbeddingGather,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Gelu,
    Relu,
    Conv2d,
    MaskedFill,
    ReduceSum,
    ReduceMean,
    Scale,
    L2Normalize,
    CrossEntropyWithLogits,
}

const NAMES: [(OpKind, &str); 21] = [
    (OpKind::Add, "add"),
    (OpKind::Sub, "sub"),
    (OpKind::Mul, "mul"),
    (OpKind::MatMul, "matmul"),
    (OpKind::Reshape, "reshape"),
    (OpKind::Transpose, "transpose"),
    (OpKind::Slice, "slice"),
    (OpKind::Concat, "concat"),
    (OpKind::EmbeddingGather, "embedding_gather"),
    (OpKind::Softmax, "softmax"),
    (OpKind::LogSoftmax, "log_softmax"),
    (OpKind::LayerNorm, "layer_norm"),
    (OpKind::Gelu, "gelu"),
    (OpKind::Relu, "relu"),
    (OpKind::Conv2d, "conv2d"),
    (OpKind::MaskedFill, "masked_fill"),
    (OpKind::ReduceSum, "reduce_sum"),
    (OpKind::ReduceMean, "reduce_mean"),
    (OpKind::Scale, "scale"),
    (OpKind::L2Normalize, "l2_normalize"),
    (OpKind::CrossEntropyWithLogits, "cross_entropy_with_logits"),
];

impl OpKind {
    pub const ALL: [OpKind; 21] = {
        let mut out = [OpKind::Add; 21];
        let mut i = 0;
        while i < 21 {
            out[i] = NAMES[i].0;
            i += 1;
        }
        out
    };

    pub fn name(self) -> &'static str {
        NAMES.iter().find(|(k, _)| *k == self).map(|(_, n)| *n).unwrap()
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        NAMES
            .iter()
            .find(|(_, n)| *n == s)
            .map(|(k, _)| *k)
            .ok_or_else(|| Error::Catalog(s.to_string()))
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::MatMul => OpKind::MatMul,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Slice { .. } => OpKind::Slice,
            Op::Concat { .. } => OpKind::Concat,
            Op::EmbeddingGather { .. } => OpKind::EmbeddingGather,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu => OpKind::Gelu,
            Op::Relu => OpKind::Relu,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaskedFill { .. } => OpKind::MaskedFill,
            Op::ReduceSum { .. } => OpKind::ReduceSum,
            Op::ReduceMean { .. } => OpKind::ReduceMean,
            Op::Scale { .. } => OpKind::Scale,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::CrossEntropyWithLogits { .. } => OpKind::CrossEntropyWithLogits,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind().name()
    }
}
