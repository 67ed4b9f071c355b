use crate::autograd::Op;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Numerically stable `log Σ exp(v)`; `-inf` when every entry is `-inf`.
pub fn log_sum_exp<E: Element>(v: &[E]) -> E {
    let m = v.iter().copied().fold(E::neg_infinity(), E::max);
    if m == E::neg_infinity() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<E>().ln()
}

/// In-place softmax of a contiguous slice.
pub fn softmax_in_place<E: Element>(v: &mut [E]) {
    let m = v.iter().copied().fold(E::neg_infinity(), E::max);
    let mut s = E::zero();
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    let inv = E::one() / s;
    v.iter_mut().for_each(|x| *x *= inv);
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Softmax along an arbitrary axis.
pub struct Softmax {
    pub axis: usize,
}

impl<E: Element> Op<E> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let x = inputs[0];
        if self.axis >= x.ndim() {
            return Err(Error::shape(
                "softmax",
                format!("axis {} out of range for shape {:?}", self.axis, x.shape()),
            ));
        }
        let (outer, n, inner) = split_axis(x.shape(), self.axis);
        let mut buf = Vec::new();
        buf.try_reserve_exact(x.len())
            .map_err(|_| Error::OutOfMemory(format!("softmax output {:?}", x.shape())))?;
        buf.extend_from_slice(x.data());
        let mut out = Tensor::new(x.shape().to_vec(), buf)?;
        if inner == 1 {
            out.data_mut().chunks_mut(n).for_each(softmax_in_place);
            return Ok(out);
        }
        let mut buf = vec![E::zero(); n];
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = d[(o * n + j) * inner + i];
                }
                softmax_in_place(&mut buf);
                for (j, &b) in buf.iter().enumerate() {
                    d[(o * n + j) * inner + i] = b;
                }
            }
        }
        Ok(out)
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        grad: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let (outer, n, inner) = split_axis(output.shape(), self.axis);
        let (y, g) = (output.data(), grad.data());
        let mut gx = vec![E::zero(); y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let dot: E = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                for j in 0..n {
                    gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                }
            }
        }
        vec![Some(Tensor::new(output.shape().to_vec(), gx).unwrap())]
    }
}

/// Mean cross-entropy of `logits[B, C]` against integer labels.
pub struct CrossEntropy {
    pub labels: Vec<usize>,
}

impl<E: Element> Op<E> for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let x = inputs[0];
        let c = x.last_dim();
        if x.rows() != self.labels.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                axis: 0,
                expected: self.labels.len(),
                got: x.rows(),
            });
        }
        let mut total = 0.0;
        for (row, &label) in x.data().chunks(c).zip(&self.labels) {
            if label >= c {
                return Err(Error::Label { label, classes: c });
            }
            total += (log_sum_exp(row) - row[label]).f64();
        }
        Ok(Tensor::scalar(E::of(total / self.labels.len().max(1) as f64)))
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
        let scale = grad.data()[0] / E::of(self.labels.len().max(1) as f64);
        let mut gx = x.clone();
        for (row, &label) in gx.data_mut().chunks_mut(c).zip(&self.labels) {
            softmax_in_place(row);
            row[label] -= E::one();
            row.iter_mut().for_each(|v| *v *= scale);
        }
        vec![Some(gx)]
    }
}

/// Sum of all entries, optionally divided by the entry count.
pub struct Sum {
    pub mean: bool,
}

impl<E: Element> Op<E> for Sum {
    fn name(&self) -> &'static str {
        if self.mean {
            "mean"
        } else {
            "sum"
        }
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let x = inputs[0];
        let mut s = x.sum();
        if self.mean {
            s /= E::of(x.len().max(1) as f64);
        }
        Ok(Tensor::scalar(s))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let x = inputs[0];
        let mut g = grad.data()[0];
        if self.mean {
            g /= E::of(x.len().max(1) as f64);
        }
        vec![Some(Tensor::full(x.shape().to_vec(), g))]
    }
}

/// `Σ a ⊙ b` over equally shaped tensors.
pub struct Dot;

impl<E: Element> Op<E> for Dot {
    fn name(&self) -> &'static str {
        "dot"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let (a, b) = (inputs[0], inputs[1]);
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "dot",
                format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        Ok(Tensor::scalar(
            a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum(),
        ))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let g = grad.data()[0];
        vec![
            needs[0].then(|| inputs[1].map(|v| v * g)),
            needs[1].then(|| inputs[0].map(|v| v * g)),
        ]
    }
}

/// Maximum over the last axis; the gradient goes to the first maximizer.
pub struct RowMax;

impl<E: Element> Op<E> for RowMax {
    fn name(&self) -> &'static str {
        "row_max"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let x = inputs[0];
        let n = x.last_dim();
        if n == 0 {
            return Err(Error::shape("row_max", "empty rows"));
        }
        let d: Vec<E> = x
            .data()
            .chunks(n)
            .map(|r| r.iter().copied().fold(E::neg_infinity(), E::max))
            .collect();
        let shape = x.shape()[..x.ndim() - 1].to_vec();
        Tensor::new(shape, d)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let x = inputs[0];
        let n = x.last_dim();
        let mut gx = Tensor::zeros(x.shape().to_vec());
        for (r, (row, dst)) in x.data().chunks(n).zip(gx.data_mut().chunks_mut(n)).enumerate() {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            dst[best] = grad.data()[r];
        }
        vec![Some(gx)]
    }
}
