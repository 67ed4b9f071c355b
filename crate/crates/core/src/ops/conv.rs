use serde::{Deserialize, Serialize};

use crate::autograd::Op;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// `p` zeros on both ends.
    Symmetric(usize),
    /// `K - 1` zeros on the left only; output `t` sees inputs `<= t`.
    CausalLeft,
}

impl Padding {
    pub fn sides(self, kernel: usize) -> (usize, usize) {
        match self {
            Padding::Symmetric(p) => (p, p),
            Padding::CausalLeft => (kernel.saturating_sub(1), 0),
        }
    }
}

/// Output length of a 1-D convolution, or an error when the kernel does not
/// fit in the padded signal.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: Padding) -> Result<usize> {
    let (pl, pr) = padding.sides(kernel);
    let padded = len + pl + pr;
    if kernel == 0 || stride == 0 || kernel > padded {
        return Err(Error::InvalidGeometry {
            op: "conv1d",
            kernel,
            padded_len: padded,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Grouped 1-D convolution over `[B, C_in, L]` with weights `[C_out, C_in/groups, K]`.
pub struct Conv1d {
    pub stride: usize,
    pub padding: Padding,
    pub groups: usize,
    pub has_bias: bool,
}

struct ConvGeom {
    batch: usize,
    c_in: usize,
    len: usize,
    c_out: usize,
    kernel: usize,
    cg: usize,
    og: usize,
    l_out: usize,
    pad_left: usize,
}

impl Conv1d {
    fn geom<E: Element>(&self, x: &Tensor<E>, w: &Tensor<E>) -> Result<ConvGeom> {
        if x.ndim() != 3 || w.ndim() != 3 {
            return Err(Error::shape(
                "conv1d",
                format!("expected x [B,C,L] and w [O,C/g,K], got {:?} and {:?}", x.shape(), w.shape()),
            ));
        }
        let (batch, c_in, len) = (x.dim(0), x.dim(1), x.dim(2));
        let (c_out, cg, kernel) = (w.dim(0), w.dim(1), w.dim(2));
        if self.groups == 0 || c_in % self.groups != 0 || c_out % self.groups != 0 {
            return Err(Error::shape(
                "conv1d",
                format!("channels {c_in}->{c_out} not divisible by groups {}", self.groups),
            ));
        }
        if cg != c_in / self.groups {
            return Err(Error::Dimension {
                op: "conv1d",
                axis: 1,
                expected: c_in / self.groups,
                got: cg,
            });
        }
        let l_out = conv_out_len(len, kernel, self.stride, self.padding)?;
        Ok(ConvGeom {
            batch,
            c_in,
            len,
            c_out,
            kernel,
            cg,
            og: c_out / self.groups,
            l_out,
            pad_left: self.padding.sides(kernel).0,
        })
    }

    fn im2col<E: Element>(&self, g: &ConvGeom, x: &[E], b: usize, grp: usize, cols: &mut [E]) {
        let k = g.kernel;
        for ci in 0..g.cg {
            let chan = grp * g.cg + ci;
            let src = &x[(b * g.c_in + chan) * g.len..][..g.len];
            for kk in 0..k {
                let row = &mut cols[(ci * k + kk) * g.l_out..][..g.l_out];
                for (t, slot) in row.iter_mut().enumerate() {
                    let pos = (t * self.stride + kk) as isize - g.pad_left as isize;
                    *slot = if pos >= 0 && (pos as usize) < g.len {
                        src[pos as usize]
                    } else {
                        E::zero()
                    };
                }
            }
        }
    }
}

impl<E: Element> Op<E> for Conv1d {
    fn name(&self) -> &'static str {
        "conv1d"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let (x, w) = (inputs[0], inputs[1]);
        let g = self.geom(x, w)?;
        if self.has_bias && inputs[2].len() != g.c_out {
            return Err(Error::Dimension {
                op: "conv1d",
                axis: 0,
                expected: g.c_out,
                got: inputs[2].len(),
            });
        }
        let ck = g.cg * g.kernel;
        let mut cols = vec![E::zero(); ck * g.l_out];
        let mut out = vec![E::zero(); g.batch * g.c_out * g.l_out];
        for b in 0..g.batch {
            for grp in 0..self.groups {
                self.im2col(&g, x.data(), b, grp, &mut cols);
                let dst = &mut out[(b * g.c_out + grp * g.og) * g.l_out..][..g.og * g.l_out];
                if self.has_bias {
                    let bias = &inputs[2].data()[grp * g.og..][..g.og];
                    for (o, row) in dst.chunks_mut(g.l_out).enumerate() {
                        row.iter_mut().for_each(|v| *v = bias[o]);
                    }
                }
                gemm(
                    g.og,
                    ck,
                    g.l_out,
                    &w.data()[grp * g.og * ck..],
                    false,
                    &cols,
                    false,
                    dst,
                    self.has_bias,
                );
            }
        }
        Tensor::new([g.batch, g.c_out, g.l_out], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let g = self.geom(x, w).unwrap();
        let ck = g.cg * g.kernel;
        let mut cols = vec![E::zero(); ck * g.l_out];
        let mut gcols = vec![E::zero(); ck * g.l_out];
        let mut gx = needs[0].then(|| vec![E::zero(); x.len()]);
        let mut gw = needs[1].then(|| vec![E::zero(); w.len()]);
        for b in 0..g.batch {
            for grp in 0..self.groups {
                let gout = &grad.data()[(b * g.c_out + grp * g.og) * g.l_out..][..g.og * g.l_out];
                if let Some(gw) = gw.as_mut() {
                    self.im2col(&g, x.data(), b, grp, &mut cols);
                    gemm(
                        g.og,
                        g.l_out,
                        ck,
                        gout,
                        false,
                        &cols,
                        true,
                        &mut gw[grp * g.og * ck..],
                        true,
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(
                        ck,
                        g.og,
                        g.l_out,
                        &w.data()[grp * g.og * ck..],
                        true,
                        gout,
                        false,
                        &mut gcols,
                        false,
                    );
                    for ci in 0..g.cg {
                        let chan = grp * g.cg + ci;
                        let dst = &mut gx[(b * g.c_in + chan) * g.len..][..g.len];
                        for kk in 0..g.kernel {
                            let row = &gcols[(ci * g.kernel + kk) * g.l_out..][..g.l_out];
                            for (t, &v) in row.iter().enumerate() {
                                let pos = (t * self.stride + kk) as isize - g.pad_left as isize;
                                if pos >= 0 && (pos as usize) < g.len {
                                    dst[pos as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![
            gx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
            gw.map(|d| Tensor::new(w.shape().to_vec(), d).unwrap()),
        ];
        if self.has_bias {
            out.push(needs[2].then(|| {
                let mut gb = vec![E::zero(); g.c_out];
                for (i, row) in grad.data().chunks(g.l_out).enumerate() {
                    gb[i % g.c_out] += row.iter().copied().sum::<E>();
                }
                Tensor::new([g.c_out], gb).unwrap()
            }));
        }
        out
    }
}

/// Depthwise causal convolution over token-major `[B, L, C]` input with
/// weights `[C, 1, K]` and bias `[C]`.
///
/// Equivalent to `Conv1d { groups: C, padding: CausalLeft }` applied to the
/// `[B, C, L]` transpose, without materializing the transpose.
pub struct DepthwiseCausalConv;

impl DepthwiseCausalConv {
    fn check<E: Element>(x: &Tensor<E>, w: &Tensor<E>, b: &Tensor<E>) -> Result<(usize, usize, usize, usize)> {
        if x.ndim() != 3 || w.ndim() != 3 || w.dim(1) != 1 {
            return Err(Error::shape(
                "depthwise_causal_conv",
                format!("expected x [B,L,C] and w [C,1,K], got {:?} and {:?}", x.shape(), w.shape()),
            ));
        }
        let (bs, l, c) = (x.dim(0), x.dim(1), x.dim(2));
        if w.dim(0) != c {
            return Err(Error::Dimension {
                op: "depthwise_causal_conv",
                axis: 0,
                expected: c,
                got: w.dim(0),
            });
        }
        if b.len() != c {
            return Err(Error::Dimension {
                op: "depthwise_causal_conv",
                axis: 0,
                expected: c,
                got: b.len(),
            });
        }
        Ok((bs, l, c, w.dim(2)))
    }
}

impl<E: Element> Op<E> for DepthwiseCausalConv {
    fn name(&self) -> &'static str {
        "depthwise_causal_conv"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let (x, w, bias) = (inputs[0], inputs[1], inputs[2]);
        let (bs, l, c, k) = Self::check(x, w, bias)?;
        // Transposed weights [K, C] so the inner loop runs over contiguous channels.
        let wt: Vec<E> = (0..k * c).map(|i| w.data()[(i % c) * k + i / c]).collect();
        let mut out = Vec::with_capacity(x.len());
        for _ in 0..bs * l {
            out.extend_from_slice(bias.data());
        }
        let xd = x.data();
        for b in 0..bs {
            for t in 0..l {
                let dst = &mut out[(b * l + t) * c..][..c];
                for kk in 0..k {
                    let s = t as isize + kk as isize - (k as isize - 1);
                    if s < 0 {
                        continue;
                    }
                    let src = &xd[(b * l + s as usize) * c..][..c];
                    let wk = &wt[kk * c..][..c];
                    for ((o, &xv), &wv) in dst.iter_mut().zip(src).zip(wk) {
                        *o += wv * xv;
                    }
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (bs, l, c, k) = Self::check(x, w, inputs[2]).unwrap();
        let wt: Vec<E> = (0..k * c).map(|i| w.data()[(i % c) * k + i / c]).collect();
        let mut gx = needs[0].then(|| vec![E::zero(); x.len()]);
        let mut gwt = vec![E::zero(); k * c];
        let (xd, gd) = (x.data(), grad.data());
        for b in 0..bs {
            for t in 0..l {
                let g = &gd[(b * l + t) * c..][..c];
                for kk in 0..k {
                    let s = t as isize + kk as isize - (k as isize - 1);
                    if s < 0 {
                        continue;
                    }
                    let off = (b * l + s as usize) * c;
                    if needs[1] {
                        let src = &xd[off..][..c];
                        for ((a, &gv), &xv) in gwt[kk * c..][..c].iter_mut().zip(g).zip(src) {
                            *a += gv * xv;
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        for ((a, &gv), &wv) in gx[off..][..c].iter_mut().zip(g).zip(&wt[kk * c..][..c]) {
                            *a += gv * wv;
                        }
                    }
                }
            }
        }
        let gw = needs[1].then(|| {
            let d: Vec<E> = (0..c * k).map(|i| gwt[(i % k) * c + i / k]).collect();
            Tensor::new(w.shape().to_vec(), d).unwrap()
        });
        let gb = needs[2].then(|| {
            let mut gb = vec![E::zero(); c];
            for row in gd.chunks(c) {
                for (a, &v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
            Tensor::new([c], gb).unwrap()
        });
        vec![gx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()), gw, gb]
    }
}
