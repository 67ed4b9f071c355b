use crate::autograd::Op;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, Tensor};

/// Affine map over the last axis: `x[.., Din] · W[Din, Dout] + b[Dout]`.
pub struct Linear {
    pub has_bias: bool,
}

impl<E: Element> Op<E> for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let (x, w) = (inputs[0], inputs[1]);
        if w.ndim() != 2 {
            return Err(Error::shape("linear", format!("weight must be 2-D, got {:?}", w.shape())));
        }
        let (din, dout) = (w.dim(0), w.dim(1));
        if x.ndim() == 0 || x.last_dim() != din {
            return Err(Error::Dimension {
                op: "linear",
                axis: x.ndim().saturating_sub(1),
                expected: din,
                got: x.last_dim(),
            });
        }
        let rows = x.rows();
        let mut out = vec![E::zero(); rows * dout];
        if self.has_bias {
            let b = inputs[2];
            if b.len() != dout {
                return Err(Error::Dimension {
                    op: "linear",
                    axis: 0,
                    expected: dout,
                    got: b.len(),
                });
            }
            for r in out.chunks_mut(dout) {
                r.copy_from_slice(b.data());
            }
        }
        gemm(rows, din, dout, x.data(), false, w.data(), false, &mut out, self.has_bias);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        Tensor::new(shape, out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (din, dout) = (w.dim(0), w.dim(1));
        let rows = x.rows();
        let gx = needs[0].then(|| {
            let mut gx = vec![E::zero(); rows * din];
            gemm(rows, dout, din, grad.data(), false, w.data(), true, &mut gx, false);
            Tensor::new(x.shape().to_vec(), gx).unwrap()
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![E::zero(); din * dout];
            gemm(din, rows, dout, x.data(), true, grad.data(), false, &mut gw, false);
            Tensor::new([din, dout], gw).unwrap()
        });
        let mut out = vec![gx, gw];
        if self.has_bias {
            out.push(needs[2].then(|| {
                let mut gb = vec![E::zero(); dout];
                for r in grad.data().chunks(dout) {
                    for (a, &g) in gb.iter_mut().zip(r) {
                        *a += g;
                    }
                }
                Tensor::new([dout], gb).unwrap()
            }));
        }
        out
    }
}

/// Batched product `a[B, M, K] · op(b)` where `op(b)` is `b[B, K, N]`, or
/// `b[B, N, K]` transposed when `transpose_b` is set.
pub struct BatchMatmul {
    pub transpose_b: bool,
    pub scale: f64,
}

impl BatchMatmul {
    fn dims<E: Element>(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<(usize, usize, usize, usize)> {
        if a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) {
            return Err(Error::shape(
                "batch_matmul",
                format!("incompatible operands {:?} and {:?}", a.shape(), b.shape()),
            ));
        }
        let (bs, m, k) = (a.dim(0), a.dim(1), a.dim(2));
        let (kb, n) = if self.transpose_b {
            (b.dim(2), b.dim(1))
        } else {
            (b.dim(1), b.dim(2))
        };
        if kb != k {
            return Err(Error::Dimension {
                op: "batch_matmul",
                axis: if self.transpose_b { 2 } else { 1 },
                expected: k,
                got: kb,
            });
        }
        Ok((bs, m, k, n))
    }
}

impl<E: Element> Op<E> for BatchMatmul {
    fn name(&self) -> &'static str {
        "batch_matmul"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (bs, m, k, n) = self.dims(a, b)?;
        let mut out = Vec::new();
        out.try_reserve_exact(bs * m * n)
            .map_err(|_| Error::OutOfMemory(format!("batch_matmul output [{bs}, {m}, {n}]")))?;
        out.resize(bs * m * n, E::zero());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..],
                false,
                &b.data()[i * k * n..],
                self.transpose_b,
                &mut out[i * m * n..],
                false,
            );
        }
        if self.scale != 1.0 {
            let s = E::of(self.scale);
            out.iter_mut().for_each(|v| *v *= s);
        }
        Tensor::new([bs, m, n], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (bs, m, k, n) = self.dims(a, b).unwrap();
        let mut g = grad.clone();
        if self.scale != 1.0 {
            g.scale(E::of(self.scale));
        }
        let ga = needs[0].then(|| {
            let mut ga = vec![E::zero(); bs * m * k];
            for i in 0..bs {
                // dA = G · op(B)^T
                gemm(
                    m,
                    n,
                    k,
                    &g.data()[i * m * n..],
                    false,
                    &b.data()[i * k * n..],
                    !self.transpose_b,
                    &mut ga[i * m * k..],
                    false,
                );
            }
            Tensor::new(a.shape().to_vec(), ga).unwrap()
        });
        let gb = needs[1].then(|| {
            let mut gb = vec![E::zero(); bs * k * n];
            for i in 0..bs {
                if self.transpose_b {
                    // B is [N, K]: dB = G^T · A
                    gemm(
                        n,
                        m,
                        k,
                        &g.data()[i * m * n..],
                        true,
                        &a.data()[i * m * k..],
                        false,
                        &mut gb[i * k * n..],
                        false,
                    );
                } else {
                    gemm(
                        k,
                        m,
                        n,
                        &a.data()[i * m * k..],
                        true,
                        &g.data()[i * m * n..],
                        false,
                        &mut gb[i * k * n..],
                        false,
                    );
                }
            }
            Tensor::new(b.shape().to_vec(), gb).unwrap()
        });
        vec![ga, gb]
    }
}
