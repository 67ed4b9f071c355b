//! Bidirectional Mamba block.
//!
//! ```text
//! h   = LayerNorm(T)
//! X,Z = Linear_X(h), Linear_Z(h)
//! y_f = SSM_f(Conv_f(X))
//! y_b = Reverse(SSM_b(Conv_b(Reverse(X))))
//! T'  = T + Linear_out((y_f + y_b) ⊙ SiLU(Z))
//! ```
//!
//! The convolutions are depthwise and causal along the token axis. Tensors
//! stay token-major `[B, L, D]` throughout; the depthwise kernel reads the
//! channel axis directly, so no explicit transpose is materialized.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::nn::{LayerNormParams, LinearParams};
use crate::ops::GraphExt;
use crate::ssm::{ssm_forward, ScanMode, SsmParams};
use crate::tensor::{Element, Tensor};

/// Which halves of the block see the reversed sequence.
///
/// | variant | conv | SSM |
/// |---------|------|-----|
/// | I       | uni  | uni |
/// | II      | uni  | bi  |
/// | III     | bi   | bi  |
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Directionality {
    pub conv_bidirectional: bool,
    pub ssm_bidirectional: bool,
}

impl Directionality {
    pub const UNIDIRECTIONAL: Self = Self {
        conv_bidirectional: false,
        ssm_bidirectional: false,
    };
    pub const SHARED_CONV: Self = Self {
        conv_bidirectional: false,
        ssm_bidirectional: true,
    };
    pub const BIDIRECTIONAL: Self = Self {
        conv_bidirectional: true,
        ssm_bidirectional: true,
    };

    pub const ALL: [Self; 3] = [Self::UNIDIRECTIONAL, Self::SHARED_CONV, Self::BIDIRECTIONAL];

    pub fn validate(&self) -> Result<()> {
        if self.conv_bidirectional && !self.ssm_bidirectional {
            return Err(Error::Config(
                "a bidirectional convolution requires a bidirectional SSM".into(),
            ));
        }
        Ok(())
    }

    pub fn variant(&self) -> &'static str {
        match (self.conv_bidirectional, self.ssm_bidirectional) {
            (false, false) => "I",
            (false, true) => "II",
            (true, true) => "III",
            (true, false) => "invalid",
        }
    }

    pub fn from_variant(name: &str) -> Result<Self> {
        match name {
            "I" | "i" | "1" => Ok(Self::UNIDIRECTIONAL),
            "II" | "ii" | "2" => Ok(Self::SHARED_CONV),
            "III" | "iii" | "3" => Ok(Self::BIDIRECTIONAL),
            other => Err(Error::Config(format!("unknown directionality variant {other:?}"))),
        }
    }
}

impl Default for Directionality {
    fn default() -> Self {
        Self::BIDIRECTIONAL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub d_model: usize,
    pub expand: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub ssm_skip: bool,
    pub directionality: Directionality,
    pub scan: ScanMode,
}

impl BlockConfig {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            expand: 2,
            d_state: 16,
            d_conv: 4,
            ssm_skip: true,
            directionality: Directionality::default(),
            scan: ScanMode::Sequential,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        self.directionality.validate()?;
        for (name, v) in [
            ("d_model", self.d_model),
            ("expand", self.expand),
            ("d_state", self.d_state),
            ("d_conv", self.d_conv),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Depthwise causal convolution over the token axis.
#[derive(Clone, Debug)]
pub struct CausalConvParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl CausalConvParams {
    fn init<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        prefix: &str,
        channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (kernel as f64).sqrt();
        Self {
            w: store.add(
                format!("{prefix}.w"),
                Tensor::uniform([channels, 1, kernel], -bound, bound, rng),
            ),
            b: store.add(
                format!("{prefix}.b"),
                Tensor::uniform([channels], -bound, bound, rng),
            ),
        }
    }

    fn forward<E: Element, G: Graph<E>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.depthwise_causal_conv(x, &w, &b)
    }
}

#[derive(Clone, Debug)]
pub struct BiMambaBlock {
    pub norm: LayerNormParams,
    pub lin_x: LinearParams,
    pub lin_z: LinearParams,
    pub conv_f: CausalConvParams,
    /// Present only when the convolution is bidirectional.
    pub conv_b: Option<CausalConvParams>,
    pub ssm_f: SsmParams,
    /// Present only when the SSM is bidirectional.
    pub ssm_b: Option<SsmParams>,
    pub lin_out: LinearParams,
    pub directionality: Directionality,
    pub scan: ScanMode,
}

impl BiMambaBlock {
    pub fn init<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        prefix: &str,
        cfg: &BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, di) = (cfg.d_model, cfg.d_inner());
        let dir = cfg.directionality;
        Ok(Self {
            norm: LayerNormParams::init(store, &format!("{prefix}.norm"), d),
            lin_x: LinearParams::init(store, &format!("{prefix}.lin_x"), d, di, false, rng),
            lin_z: LinearParams::init(store, &format!("{prefix}.lin_z"), d, di, false, rng),
            conv_f: CausalConvParams::init(store, &format!("{prefix}.conv_f"), di, cfg.d_conv, rng),
            conv_b: dir
                .conv_bidirectional
                .then(|| CausalConvParams::init(store, &format!("{prefix}.conv_b"), di, cfg.d_conv, rng)),
            ssm_f: SsmParams::init(store, &format!("{prefix}.ssm_f"), di, cfg.d_state, cfg.ssm_skip, rng),
            ssm_b: dir.ssm_bidirectional.then(|| {
                SsmParams::init(store, &format!("{prefix}.ssm_b"), di, cfg.d_state, cfg.ssm_skip, rng)
            }),
            lin_out: LinearParams::init(store, &format!("{prefix}.lin_out"), di, d, true, rng),
            directionality: dir,
            scan: cfg.scan,
        })
    }

    /// `[B, L, D] → [B, L, D]`.
    pub fn forward<E: Element, G: Graph<E>>(&self, g: &mut G, t: &G::Var) -> Result<G::Var> {
        let shape = g.value(t).shape().to_vec();
        if shape.len() != 3 || shape[2] != self.lin_x.d_in {
            return Err(Error::shape(
                "bimamba",
                format!("expected [B, L, {}], got {shape:?}", self.lin_x.d_in),
            ));
        }
        if shape[1] == 0 {
            return Err(Error::shape("bimamba", "sequence must contain at least one token"));
        }
        let h = self.norm.forward(g, t)?;
        let xs = self.lin_x.forward(g, &h)?;
        let z = self.lin_z.forward(g, &h)?;

        let conv_f = self.conv_f.forward(g, &xs)?;
        let y_f = ssm_forward(g, &conv_f, &self.ssm_f, self.scan)?;
        let y = match &self.ssm_b {
            Some(ssm_b) => {
                let back_in = match &self.conv_b {
                    Some(conv_b) => {
                        let rev = g.reverse_seq(&xs)?;
                        conv_b.forward(g, &rev)?
                    }
                    None => g.reverse_seq(&conv_f)?,
                };
                let y_rev = ssm_forward(g, &back_in, ssm_b, self.scan)?;
                let y_b = g.reverse_seq(&y_rev)?;
                g.add(&y_f, &y_b)?
            }
            None => y_f,
        };
        let gate = g.silu(&z)?;
        let mixed = g.mul(&y, &gate)?;
        let out = self.lin_out.forward(g, &mixed)?;
        g.add(t, &out)
    }

    /// The same block with forward and backward path parameters exchanged.
    pub fn swapped_directions(&self) -> Self {
        let mut s = self.clone();
        if let Some(b) = s.ssm_b.as_mut() {
            std::mem::swap(b, &mut s.ssm_f);
        }
        if let Some(b) = s.conv_b.as_mut() {
            std::mem::swap(b, &mut s.conv_f);
        }
        s
    }
}

/// Sequential composition of blocks.
pub fn stack_forward<E: Element, G: Graph<E>>(
    g: &mut G,
    t0: &G::Var,
    blocks: &[BiMambaBlock],
) -> Result<G::Var> {
    if blocks.is_empty() {
        return Err(Error::Config("a block stack needs at least one block".into()));
    }
    let mut t = blocks[0].forward(g, t0)?;
    for b in &blocks[1..] {
        t = b.forward(g, &t)?;
    }
    Ok(t)
}
