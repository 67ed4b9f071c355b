use crate::autograd::Op;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Layer normalization over the last axis with affine `gamma`, `beta`.
pub struct LayerNorm {
    pub eps: f64,
    stats: Vec<(f64, f64)>,
}

impl LayerNorm {
    pub fn new(eps: f64) -> Self {
        Self {
            eps,
            stats: Vec::new(),
        }
    }
}

impl<E: Element> Op<E> for LayerNorm {
    fn name(&self) -> &'static str {
        "layernorm"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], save: bool) -> Result<Tensor<E>> {
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        let d = x.last_dim();
        if d == 0 || x.ndim() == 0 {
            return Err(Error::shape("layernorm", "last axis must be non-empty"));
        }
        for p in [gamma, beta] {
            if p.len() != d {
                return Err(Error::Dimension {
                    op: "layernorm",
                    axis: 0,
                    expected: d,
                    got: p.len(),
                });
            }
        }
        let mut out = vec![E::zero(); x.len()];
        if save {
            self.stats.clear();
            self.stats.reserve(x.rows());
        }
        let (gd, bd) = (gamma.data(), beta.data());
        for (row, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = if var == 0.0 && self.eps == 0.0 {
                0.0
            } else {
                1.0 / (var + self.eps).sqrt()
            };
            let (m, r) = (E::of(mean), E::of(rstd));
            for i in 0..d {
                dst[i] = (row[i] - m) * r * gd[i] + bd[i];
            }
            if save {
                self.stats.push((mean, rstd));
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
        let (x, gamma) = (inputs[0], inputs[1]);
        let d = x.last_dim();
        let mut gx = needs[0].then(|| vec![E::zero(); x.len()]);
        let mut gg = vec![E::zero(); d];
        let mut gb = vec![E::zero(); d];
        let mut xhat = vec![E::zero(); d];
        let mut gxhat = vec![E::zero(); d];
        for (r, (row, g)) in x.data().chunks(d).zip(grad.data().chunks(d)).enumerate() {
            let (mean, rstd) = self.stats[r];
            let (m, rs) = (E::of(mean), E::of(rstd));
            let mut s1 = E::zero();
            let mut s2 = E::zero();
            for i in 0..d {
                xhat[i] = (row[i] - m) * rs;
                gg[i] += g[i] * xhat[i];
                gb[i] += g[i];
                gxhat[i] = g[i] * gamma.data()[i];
                s1 += gxhat[i];
                s2 += gxhat[i] * xhat[i];
            }
            if let Some(gx) = gx.as_mut() {
                let inv_d = E::of(1.0 / d as f64);
                let dst = &mut gx[r * d..][..d];
                for i in 0..d {
                    dst[i] = rs * (gxhat[i] - s1 * inv_d - xhat[i] * s2 * inv_d);
                }
            }
        }
        vec![
            gx.map(|v| Tensor::new(x.shape().to_vec(), v).unwrap()),
            needs[1].then(|| Tensor::new([d], gg).unwrap()),
            needs[2].then(|| Tensor::new([d], gb).unwrap()),
        ]
    }
}
