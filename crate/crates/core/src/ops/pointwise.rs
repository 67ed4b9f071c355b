use crate::autograd::Op;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Above this input softplus returns `x` itself; the neglected term
/// `log1p(exp(-x))` is below 1e-13.
pub const SOFTPLUS_LINEAR_THRESHOLD: f64 = 30.0;

#[inline]
pub fn sigmoid<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

#[inline]
pub fn silu<E: Element>(x: E) -> E {
    x * sigmoid(x)
}

#[inline]
pub fn softplus<E: Element>(x: E) -> E {
    if x > E::of(SOFTPLUS_LINEAR_THRESHOLD) {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Silu,
    Softplus,
    Exp,
    Sigmoid,
    Square,
}

pub struct Unary(pub UnaryKind);

impl<E: Element> Op<E> for Unary {
    fn name(&self) -> &'static str {
        match self.0 {
            UnaryKind::Silu => "silu",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Exp => "exp",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Square => "square",
        }
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let x = inputs[0];
        Ok(match self.0 {
            UnaryKind::Silu => x.map(silu),
            UnaryKind::Softplus => x.map(softplus),
            UnaryKind::Exp => x.map(|v| v.exp()),
            UnaryKind::Sigmoid => x.map(sigmoid),
            UnaryKind::Square => x.map(|v| v * v),
        })
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        grad: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let x = inputs[0];
        let d: Vec<E> = match self.0 {
            UnaryKind::Silu => x
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&v, &g)| {
                    let s = sigmoid(v);
                    g * s * (E::one() + v * (E::one() - s))
                })
                .collect(),
            UnaryKind::Softplus => x
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&v, &g)| g * sigmoid(v))
                .collect(),
            UnaryKind::Exp => output
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&y, &g)| g * y)
                .collect(),
            UnaryKind::Sigmoid => output
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&y, &g)| g * y * (E::one() - y))
                .collect(),
            UnaryKind::Square => x
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&v, &g)| g * (v + v))
                .collect(),
        };
        vec![Some(Tensor::new(x.shape().to_vec(), d).unwrap())]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Elementwise binary op on identically shaped tensors.
pub struct Binary(pub BinaryKind);

impl<E: Element> Op<E> for Binary {
    fn name(&self) -> &'static str {
        match self.0 {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let (a, b) = (inputs[0], inputs[1]);
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "binary",
                format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        Ok(match self.0 {
            BinaryKind::Add => a.zip_map(b, |x, y| x + y),
            BinaryKind::Sub => a.zip_map(b, |x, y| x - y),
            BinaryKind::Mul => a.zip_map(b, |x, y| x * y),
        })
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let (a, b) = (inputs[0], inputs[1]);
        match self.0 {
            BinaryKind::Add => vec![
                needs[0].then(|| grad.clone()),
                needs[1].then(|| grad.clone()),
            ],
            BinaryKind::Sub => vec![
                needs[0].then(|| grad.clone()),
                needs[1].then(|| grad.map(|g| -g)),
            ],
            BinaryKind::Mul => vec![
                needs[0].then(|| grad.zip_map(b, |g, y| g * y)),
                needs[1].then(|| grad.zip_map(a, |g, x| g * x)),
            ],
        }
    }
}

/// `scale * x + shift` with constant scalars.
pub struct Affine {
    pub scale: f64,
    pub shift: f64,
}

impl<E: Element> Op<E> for Affine {
    fn name(&self) -> &'static str {
        "affine"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let (s, c) = (E::of(self.scale), E::of(self.shift));
        Ok(inputs[0].map(|v| s * v + c))
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let s = E::of(self.scale);
        vec![Some(grad.map(|g| g * s))]
    }
}

/// Multiply each row of `x[R, D]` by the matching entry of `s[R]`.
pub struct ScaleRows;

impl<E: Element> Op<E> for ScaleRows {
    fn name(&self) -> &'static str {
        "scale_rows"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let (x, s) = (inputs[0], inputs[1]);
        if x.rows() != s.len() {
            return Err(Error::Dimension {
                op: "scale_rows",
                axis: 0,
                expected: x.rows(),
                got: s.len(),
            });
        }
        let d = x.last_dim();
        let mut out = x.clone();
        for (row, &sv) in out.data_mut().chunks_mut(d.max(1)).zip(s.data()) {
            row.iter_mut().for_each(|v| *v *= sv);
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
        let (x, s) = (inputs[0], inputs[1]);
        let d = x.last_dim().max(1);
        let gx = needs[0].then(|| {
            let mut g = grad.clone();
            for (row, &sv) in g.data_mut().chunks_mut(d).zip(s.data()) {
                row.iter_mut().for_each(|v| *v *= sv);
            }
            g
        });
        let gs = needs[1].then(|| {
            let d: Vec<E> = grad
                .data()
                .chunks(d)
                .zip(x.data().chunks(d))
                .map(|(g, xr)| g.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                .collect();
            Tensor::new(s.shape().to_vec(), d).unwrap()
        });
        vec![gx, gs]
    }
}
