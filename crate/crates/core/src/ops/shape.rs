//! Data-movement primitives: reversal, transposition, concatenation and
//! row gather/scatter.

use crate::autograd::Op;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Reverse the sequence axis of a `[B, L, ..]` tensor.
pub struct ReverseSeq;

impl<E: Element> Op<E> for ReverseSeq {
    fn name(&self) -> &'static str {
        "reverse"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let x = inputs[0];
        if x.ndim() < 2 {
            return Err(Error::shape("reverse", format!("need [B, L, ..], got {:?}", x.shape())));
        }
        Ok(x.reverse_axis1())
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        vec![Some(grad.reverse_axis1())]
    }
}

/// Swap the last two axes.
pub struct TransposeLast2;

impl<E: Element> Op<E> for TransposeLast2 {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let x = inputs[0];
        if x.ndim() < 2 {
            return Err(Error::shape("transpose", format!("need >= 2 axes, got {:?}", x.shape())));
        }
        Ok(x.transpose_last2())
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        vec![Some(grad.transpose_last2())]
    }
}

/// Concatenate along `axis`; all other axes must agree.
pub struct Concat {
    pub axis: usize,
}

impl<E: Element> Op<E> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        let nd = first.ndim();
        if self.axis >= nd {
            return Err(Error::shape("concat", format!("axis {} out of range", self.axis)));
        }
        for t in inputs {
            if t.ndim() != nd {
                return Err(Error::shape("concat", "operands differ in rank"));
            }
            for ax in 0..nd {
                if ax != self.axis && t.dim(ax) != first.dim(ax) {
                    return Err(Error::Dimension {
                        op: "concat",
                        axis: ax,
                        expected: first.dim(ax),
                        got: t.dim(ax),
                    });
                }
            }
        }
        let outer: usize = first.shape()[..self.axis].iter().product();
        let inner: usize = first.shape()[self.axis + 1..].iter().product();
        let total: usize = inputs.iter().map(|t| t.dim(self.axis)).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for t in inputs {
                let chunk = t.dim(self.axis) * inner;
                out.extend_from_slice(&t.data()[o * chunk..][..chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[self.axis] = total;
        Tensor::new(shape, out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let first = inputs[0];
        let outer: usize = first.shape()[..self.axis].iter().product();
        let inner: usize = first.shape()[self.axis + 1..].iter().product();
        let total: usize = inputs.iter().map(|t| t.dim(self.axis)).sum();
        let mut start = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (t, &need) in inputs.iter().zip(needs) {
            let chunk = t.dim(self.axis) * inner;
            if need {
                let mut d = Vec::with_capacity(t.len());
                for o in 0..outer {
                    d.extend_from_slice(&grad.data()[o * total * inner + start..][..chunk]);
                }
                out.push(Some(Tensor::new(t.shape().to_vec(), d).unwrap()));
            } else {
                out.push(None);
            }
            start += chunk;
        }
        out
    }
}

/// `[token[D], seq[B, N, D]] -> [B, N + 1, D]` with the token at index 0 of
/// every batch row.
pub struct PrependToken;

impl<E: Element> Op<E> for PrependToken {
    fn name(&self) -> &'static str {
        "prepend_token"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let (tok, seq) = (inputs[0], inputs[1]);
        if seq.ndim() != 3 {
            return Err(Error::shape("prepend_token", format!("need [B, N, D], got {:?}", seq.shape())));
        }
        let (b, n, d) = (seq.dim(0), seq.dim(1), seq.dim(2));
        if tok.len() != d {
            return Err(Error::Dimension {
                op: "prepend_token",
                axis: 2,
                expected: d,
                got: tok.len(),
            });
        }
        let mut out = Vec::with_capacity(b * (n + 1) * d);
        for bi in 0..b {
            out.extend_from_slice(tok.data());
            out.extend_from_slice(&seq.data()[bi * n * d..][..n * d]);
        }
        Tensor::new([b, n + 1, d], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let (tok, seq) = (inputs[0], inputs[1]);
        let (b, n, d) = (seq.dim(0), seq.dim(1), seq.dim(2));
        let gt = needs[0].then(|| {
            let mut g = vec![E::zero(); d];
            for bi in 0..b {
                for (a, &v) in g.iter_mut().zip(&grad.data()[bi * (n + 1) * d..][..d]) {
                    *a += v;
                }
            }
            Tensor::new(tok.shape().to_vec(), g).unwrap()
        });
        let gs = needs[1].then(|| {
            let mut g = Vec::with_capacity(seq.len());
            for bi in 0..b {
                g.extend_from_slice(&grad.data()[(bi * (n + 1) + 1) * d..][..n * d]);
            }
            Tensor::new(seq.shape().to_vec(), g).unwrap()
        });
        vec![gt, gs]
    }
}

/// `[B, L, D] -> [B, D]` taking one sequence position.
pub struct SelectToken {
    pub index: usize,
}

impl<E: Element> Op<E> for SelectToken {
    fn name(&self) -> &'static str {
        "select_token"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let x = inputs[0];
        if x.ndim() != 3 || self.index >= x.dim(1) {
            return Err(Error::shape(
                "select_token",
                format!("index {} invalid for {:?}", self.index, x.shape()),
            ));
        }
        let (b, l, d) = (x.dim(0), x.dim(1), x.dim(2));
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            out.extend_from_slice(&x.data()[(bi * l + self.index) * d..][..d]);
        }
        Tensor::new([b, d], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let x = inputs[0];
        let (b, l, d) = (x.dim(0), x.dim(1), x.dim(2));
        let mut g = Tensor::zeros(x.shape().to_vec());
        for bi in 0..b {
            g.data_mut()[(bi * l + self.index) * d..][..d].copy_from_slice(&grad.data()[bi * d..][..d]);
        }
        vec![Some(g)]
    }
}

/// Overwrite one sequence position: `(seq[B, L, D], row[B, D]) -> [B, L, D]`.
pub struct SetToken {
    pub index: usize,
}

impl<E: Element> Op<E> for SetToken {
    fn name(&self) -> &'static str {
        "set_token"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let (seq, row) = (inputs[0], inputs[1]);
        if seq.ndim() != 3 || self.index >= seq.dim(1) || row.len() != seq.dim(0) * seq.dim(2) {
            return Err(Error::shape(
                "set_token",
                format!("cannot place {:?} into {:?}", row.shape(), seq.shape()),
            ));
        }
        let (b, l, d) = (seq.dim(0), seq.dim(1), seq.dim(2));
        let mut out = seq.clone();
        for bi in 0..b {
            out.data_mut()[(bi * l + self.index) * d..][..d].copy_from_slice(&row.data()[bi * d..][..d]);
        }
        Ok(out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let (seq, row) = (inputs[0], inputs[1]);
        let (b, l, d) = (seq.dim(0), seq.dim(1), seq.dim(2));
        let gs = needs[0].then(|| {
            let mut g = grad.clone();
            for bi in 0..b {
                g.data_mut()[(bi * l + self.index) * d..][..d]
                    .iter_mut()
                    .for_each(|v| *v = E::zero());
            }
            g
        });
        let gr = needs[1].then(|| {
            let mut g = Vec::with_capacity(b * d);
            for bi in 0..b {
                g.extend_from_slice(&grad.data()[(bi * l + self.index) * d..][..d]);
            }
            Tensor::new(row.shape().to_vec(), g).unwrap()
        });
        vec![gs, gr]
    }
}

/// Pick rows of a `[R, D]` matrix.
pub struct GatherRows {
    pub indices: Vec<usize>,
}

impl<E: Element> Op<E> for GatherRows {
    fn name(&self) -> &'static str {
        "gather_rows"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let x = inputs[0];
        let (r, d) = (x.rows(), x.last_dim());
        let mut out = Vec::with_capacity(self.indices.len() * d);
        for &i in &self.indices {
            if i >= r {
                return Err(Error::shape("gather_rows", format!("row {i} out of {r}")));
            }
            out.extend_from_slice(&x.data()[i * d..][..d]);
        }
        Tensor::new([self.indices.len(), d], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let x = inputs[0];
        let d = x.last_dim();
        let mut g = Tensor::zeros(x.shape().to_vec());
        for (k, &i) in self.indices.iter().enumerate() {
            for (a, &v) in g.data_mut()[i * d..][..d].iter_mut().zip(&grad.data()[k * d..][..d]) {
                *a += v;
            }
        }
        vec![Some(g)]
    }
}

/// Place rows of `x[r, D]` at `indices` of a zero `[rows, D]` matrix.
pub struct ScatterRows {
    pub indices: Vec<usize>,
    pub rows: usize,
}

impl<E: Element> Op<E> for ScatterRows {
    fn name(&self) -> &'static str {
        "scatter_rows"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let x = inputs[0];
        let d = x.last_dim();
        if x.rows() != self.indices.len() {
            return Err(Error::Dimension {
                op: "scatter_rows",
                axis: 0,
                expected: self.indices.len(),
                got: x.rows(),
            });
        }
        let mut out = Tensor::zeros([self.rows, d]);
        for (k, &i) in self.indices.iter().enumerate() {
            if i >= self.rows {
                return Err(Error::shape("scatter_rows", format!("row {i} out of {}", self.rows)));
            }
            for (a, &v) in out.data_mut()[i * d..][..d].iter_mut().zip(&x.data()[k * d..][..d]) {
                *a += v;
            }
        }
        Ok(out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let x = inputs[0];
        let d = x.last_dim();
        let mut g = Vec::with_capacity(x.len());
        for &i in &self.indices {
            g.extend_from_slice(&grad.data()[i * d..][..d]);
        }
        vec![Some(Tensor::new(x.shape().to_vec(), g).unwrap())]
    }
}

/// Pick individual `(row, col)` entries of a matrix into a vector.
pub struct GatherElements {
    pub positions: Vec<(usize, usize)>,
}

impl<E: Element> Op<E> for GatherElements {
    fn name(&self) -> &'static str {
        "gather_elements"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let x = inputs[0];
        let (r, c) = (x.rows(), x.last_dim());
        let mut out = Vec::with_capacity(self.positions.len());
        for &(i, j) in &self.positions {
            if i >= r || j >= c {
                return Err(Error::shape("gather_elements", format!("({i}, {j}) outside [{r}, {c}]")));
            }
            out.push(x.data()[i * c + j]);
        }
        Tensor::new([self.positions.len()], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let x = inputs[0];
        let c = x.last_dim();
        let mut g = Tensor::zeros(x.shape().to_vec());
        for (k, &(i, j)) in self.positions.iter().enumerate() {
            g.data_mut()[i * c + j] += grad.data()[k];
        }
        vec![Some(g)]
    }
}

/// Repeat row `row` of a `[T, D]` table `batch` times.
pub struct BroadcastRow {
    pub row: usize,
    pub batch: usize,
}

impl<E: Element> Op<E> for BroadcastRow {
    fn name(&self) -> &'static str {
        "broadcast_row"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let x = inputs[0];
        let (r, d) = (x.rows(), x.last_dim());
        if self.row >= r {
            return Err(Error::shape("broadcast_row", format!("row {} out of {r}", self.row)));
        }
        let src = &x.data()[self.row * d..][..d];
        let mut out = Vec::with_capacity(self.batch * d);
        for _ in 0..self.batch {
            out.extend_from_slice(src);
        }
        Tensor::new([self.batch, d], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let x = inputs[0];
        let d = x.last_dim();
        let mut g = Tensor::zeros(x.shape().to_vec());
        for row in grad.data().chunks(d) {
            for (a, &v) in g.data_mut()[self.row * d..][..d].iter_mut().zip(row) {
                *a += v;
            }
        }
        vec![Some(g)]
    }
}
