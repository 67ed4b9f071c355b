//! Differentiable primitives and the [`GraphExt`] convenience layer.

mod conv;
mod linear;
mod norm;
mod pointwise;
mod reduce;
mod shape;

pub use conv::{conv_out_len, Conv1d, DepthwiseCausalConv, Padding};
pub use linear::{BatchMatmul, Linear};
pub use norm::LayerNorm;
pub use pointwise::{
    sigmoid, silu, softplus, softplus_inverse, Affine, Binary, BinaryKind, ScaleRows, Unary,
    UnaryKind, SOFTPLUS_LINEAR_THRESHOLD,
};
pub use reduce::{log_sum_exp, softmax_in_place, CrossEntropy, Dot, RowMax, Softmax, Sum};
pub use shape::{
    BroadcastRow, Concat, GatherElements, GatherRows, PrependToken, ReverseSeq, ScatterRows,
    SelectToken, SetToken, TransposeLast2,
};

use crate::autograd::Graph;
use crate::error::Result;
use crate::tensor::Element;

/// Named constructors for every primitive, available on any [`Graph`].
pub trait GraphExt<E: Element>: Graph<E> {
    fn linear(&mut self, x: &Self::Var, w: &Self::Var, b: Option<&Self::Var>) -> Result<Self::Var> {
        match b {
            Some(b) => self.apply(Linear { has_bias: true }, &[x, w, b]),
            None => self.apply(Linear { has_bias: false }, &[x, w]),
        }
    }

    fn conv1d(
        &mut self,
        x: &Self::Var,
        w: &Self::Var,
        b: Option<&Self::Var>,
        stride: usize,
        padding: Padding,
        groups: usize,
    ) -> Result<Self::Var> {
        let op = Conv1d {
            stride,
            padding,
            groups,
            has_bias: b.is_some(),
        };
        match b {
            Some(b) => self.apply(op, &[x, w, b]),
            None => self.apply(op, &[x, w]),
        }
    }

    fn depthwise_causal_conv(&mut self, x: &Self::Var, w: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(DepthwiseCausalConv, &[x, w, b])
    }

    fn layernorm(&mut self, x: &Self::Var, gamma: &Self::Var, beta: &Self::Var, eps: f64) -> Result<Self::Var> {
        self.apply(LayerNorm::new(eps), &[x, gamma, beta])
    }

    fn silu(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Unary(UnaryKind::Silu), &[x])
    }

    fn softplus(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Unary(UnaryKind::Softplus), &[x])
    }

    fn exp(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Unary(UnaryKind::Exp), &[x])
    }

    fn sigmoid(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Unary(UnaryKind::Sigmoid), &[x])
    }

    fn square(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Unary(UnaryKind::Square), &[x])
    }

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Binary(BinaryKind::Add), &[a, b])
    }

    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Binary(BinaryKind::Sub), &[a, b])
    }

    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Binary(BinaryKind::Mul), &[a, b])
    }

    fn affine(&mut self, x: &Self::Var, scale: f64, shift: f64) -> Result<Self::Var> {
        self.apply(Affine { scale, shift }, &[x])
    }

    fn scale_rows(&mut self, x: &Self::Var, s: &Self::Var) -> Result<Self::Var> {
        self.apply(ScaleRows, &[x, s])
    }

    fn softmax(&mut self, x: &Self::Var, axis: usize) -> Result<Self::Var> {
        self.apply(Softmax { axis }, &[x])
    }

    fn cross_entropy(&mut self, logits: &Self::Var, labels: &[usize]) -> Result<Self::Var> {
        self.apply(
            CrossEntropy {
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    fn sum(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Sum { mean: false }, &[x])
    }

    fn mean(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Sum { mean: true }, &[x])
    }

    fn dot(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Dot, &[a, b])
    }

    fn row_max(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(RowMax, &[x])
    }

    fn reverse_seq(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(ReverseSeq, &[x])
    }

    fn transpose_last2(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(TransposeLast2, &[x])
    }

    fn concat(&mut self, xs: &[&Self::Var], axis: usize) -> Result<Self::Var> {
        self.apply(Concat { axis }, xs)
    }

    fn prepend_token(&mut self, token: &Self::Var, seq: &Self::Var) -> Result<Self::Var> {
        self.apply(PrependToken, &[token, seq])
    }

    fn select_token(&mut self, x: &Self::Var, index: usize) -> Result<Self::Var> {
        self.apply(SelectToken { index }, &[x])
    }

    fn set_token(&mut self, seq: &Self::Var, row: &Self::Var, index: usize) -> Result<Self::Var> {
        self.apply(SetToken { index }, &[seq, row])
    }

    fn gather_rows(&mut self, x: &Self::Var, indices: Vec<usize>) -> Result<Self::Var> {
        self.apply(GatherRows { indices }, &[x])
    }

    fn scatter_rows(&mut self, x: &Self::Var, indices: Vec<usize>, rows: usize) -> Result<Self::Var> {
        self.apply(ScatterRows { indices, rows }, &[x])
    }

    fn gather_elements(&mut self, x: &Self::Var, positions: Vec<(usize, usize)>) -> Result<Self::Var> {
        self.apply(GatherElements { positions }, &[x])
    }

    fn broadcast_row(&mut self, table: &Self::Var, row: usize, batch: usize) -> Result<Self::Var> {
        self.apply(BroadcastRow { row, batch }, &[table])
    }

    fn batch_matmul(&mut self, a: &Self::Var, b: &Self::Var, transpose_b: bool, scale: f64) -> Result<Self::Var> {
        self.apply(BatchMatmul { transpose_b, scale }, &[a, b])
    }
}

impl<E: Element, G: Graph<E> + ?Sized> GraphExt<E> for G {}
