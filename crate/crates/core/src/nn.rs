//! Parameter groups shared by the model layers.

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore};
use crate::error::Result;
use crate::ops::GraphExt;
use crate::tensor::{Element, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Affine map over the last axis, `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearParams {
    /// Uniform `±1/√d_in` initialization.
    pub fn init<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let w = store.add(
            format!("{prefix}.w"),
            Tensor::uniform([d_in, d_out], -bound, bound, rng),
        );
        let b = bias.then(|| {
            store.add(
                format!("{prefix}.b"),
                Tensor::uniform([d_out], -bound, bound, rng),
            )
        });
        Self { w, b, d_in, d_out }
    }

    pub fn forward<E: Element, G: Graph<E>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let w = g.param(self.w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.linear(x, &w, Some(&b))
            }
            None => g.linear(x, &w, None),
        }
    }

    /// Zero weight and bias.
    pub fn zero<E: Element>(&self, store: &mut ParamStore<E>) {
        store.get_mut(self.w).data_mut().fill(E::zero());
        if let Some(b) = self.b {
            store.get_mut(b).data_mut().fill(E::zero());
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn init<E: Element>(store: &mut ParamStore<E>, prefix: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full([d], E::one())),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros([d])),
        }
    }

    pub fn forward<E: Element, G: Graph<E>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layernorm(x, &gamma, &beta, LAYERNORM_EPS)
    }
}

/// Two-layer perceptron `d → hidden → d` with SiLU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub up: LinearParams,
    pub down: LinearParams,
}

impl Mlp {
    pub fn init<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        prefix: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: LinearParams::init(store, &format!("{prefix}.up"), d, hidden, true, rng),
            down: LinearParams::init(store, &format!("{prefix}.down"), hidden, d, true, rng),
        }
    }

    pub fn forward<E: Element, G: Graph<E>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let h = self.up.forward(g, x)?;
        let h = g.silu(&h)?;
        self.down.forward(g, &h)
    }
}
