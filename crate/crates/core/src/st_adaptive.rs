//! Spatio-temporal adaptive front end.
//!
//! A per-task convolution maps `C_i` input channels to `D`; two strided
//! convolutions with a narrow and a wide kernel then cut the signal into
//! tokens, which are concatenated along the token axis behind a learned
//! class token:
//!
//! ```text
//! [B, C_i, L] -> [B, D, L] -> [B, N_s + N_w, D] -> [B, 1 + N_s + N_w, D]
//! ```
//!
//! Convolutions run channel-major; their outputs are transposed to
//! token-major right after each temporal convolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::ops::{conv_out_len, GraphExt, Padding};
use crate::tensor::{Element, Tensor};

pub const CLASS_TOKEN_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: usize,
    pub name: String,
    pub channels: usize,
    pub num_classes: usize,
}

/// Checks ids are dense `0..T`, channels ≥ 1 and classes ≥ 2.
pub fn validate_tasks(tasks: &[TaskSpec]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Config("at least one task is required".into()));
    }
    for (i, t) in tasks.iter().enumerate() {
        if t.task_id != i {
            return Err(Error::Config(format!(
                "task ids must be dense and ordered: position {i} holds id {}",
                t.task_id
            )));
        }
        if t.channels == 0 {
            return Err(Error::Config(format!("task {i} has zero channels")));
        }
        if t.num_classes < 2 {
            return Err(Error::Config(format!("task {i} needs at least two classes")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Kernel of the per-task channel-mixing convolution (odd).
    pub spatial_kernel: usize,
    pub small_kernel: usize,
    pub small_stride: usize,
    pub wide_kernel: usize,
    pub wide_stride: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            spatial_kernel: 1,
            small_kernel: 8,
            small_stride: 8,
            wide_kernel: 64,
            wide_stride: 8,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "spatial_kernel must be odd to preserve length, got {}",
                self.spatial_kernel
            )));
        }
        for (name, v) in [
            ("small_kernel", self.small_kernel),
            ("small_stride", self.small_stride),
            ("wide_kernel", self.wide_kernel),
            ("wide_stride", self.wide_stride),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Shortest accepted signal.
    pub fn min_len(&self) -> usize {
        self.small_kernel.max(self.wide_kernel)
    }

    /// `(N_s, N_w)` for a signal of length `len`.
    pub fn token_count(&self, len: usize) -> Result<(usize, usize)> {
        if len < self.min_len() {
            return Err(Error::SignalTooShort {
                len,
                min: self.min_len(),
            });
        }
        let pad = Padding::Symmetric(0);
        Ok((
            conv_out_len(len, self.small_kernel, self.small_stride, pad)?,
            conv_out_len(len, self.wide_kernel, self.wide_stride, pad)?,
        ))
    }
}

#[derive(Clone, Debug)]
pub struct ConvParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvParams {
    fn init<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        prefix: &str,
        c_out: usize,
        c_in: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        Self {
            w: store.add(
                format!("{prefix}.w"),
                Tensor::uniform([c_out, c_in, kernel], -bound, bound, rng),
            ),
            b: store.add(
                format!("{prefix}.b"),
                Tensor::uniform([c_out], -bound, bound, rng),
            ),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StAdaptive {
    pub d_model: usize,
    pub cfg: TokenizerConfig,
    pub tasks: Vec<TaskSpec>,
    /// Indexed by task id.
    pub spatial: Vec<ConvParams>,
    pub small: ConvParams,
    pub wide: ConvParams,
    pub class_token: ParamId,
}

impl StAdaptive {
    pub fn init<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        prefix: &str,
        d_model: usize,
        cfg: &TokenizerConfig,
        tasks: &[TaskSpec],
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        validate_tasks(tasks)?;
        let spatial = tasks
            .iter()
            .map(|t| {
                ConvParams::init(
                    store,
                    &format!("{prefix}.spatial.{}", t.task_id),
                    d_model,
                    t.channels,
                    cfg.spatial_kernel,
                    rng,
                )
            })
            .collect();
        let small = ConvParams::init(store, &format!("{prefix}.small"), d_model, d_model, cfg.small_kernel, rng);
        let wide = ConvParams::init(store, &format!("{prefix}.wide"), d_model, d_model, cfg.wide_kernel, rng);
        let class_token = store.add(
            format!("{prefix}.class_token"),
            Tensor::randn([d_model], CLASS_TOKEN_STD, rng),
        );
        Ok(Self {
            d_model,
            cfg: cfg.clone(),
            tasks: tasks.to_vec(),
            spatial,
            small,
            wide,
            class_token,
        })
    }

    pub fn task(&self, task_id: usize) -> Result<&TaskSpec> {
        self.tasks.get(task_id).ok_or(Error::UnknownTask(task_id))
    }

    /// `[B, C_i, L] → [B, D, L]`.
    pub fn spatial_adapt<E: Element, G: Graph<E>>(&self, g: &mut G, x: &G::Var, task_id: usize) -> Result<G::Var> {
        let spec = self.task(task_id)?;
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("spatial_adapt", format!("expected [B, C, L], got {shape:?}")));
        }
        if shape[1] != spec.channels {
            return Err(Error::ChannelMismatch {
                task: task_id,
                expected: spec.channels,
                got: shape[1],
            });
        }
        let p = &self.spatial[task_id];
        let w = g.param(p.w);
        let b = g.param(p.b);
        let pad = Padding::Symmetric(self.cfg.spatial_kernel / 2);
        g.conv1d(x, &w, Some(&b), 1, pad, 1)
    }

    /// `[B, D, L] → [B, N_s + N_w, D]`, narrow-kernel tokens first.
    pub fn tokenize<E: Element, G: Graph<E>>(&self, g: &mut G, y: &G::Var) -> Result<G::Var> {
        let len = g.value(y).shape().last().copied().unwrap_or(0);
        self.cfg.token_count(len)?;
        let small = self.temporal(g, y, &self.small, self.cfg.small_stride)?;
        let wide = self.temporal(g, y, &self.wide, self.cfg.wide_stride)?;
        g.concat(&[&small, &wide], 1)
    }

    fn temporal<E: Element, G: Graph<E>>(
        &self,
        g: &mut G,
        y: &G::Var,
        p: &ConvParams,
        stride: usize,
    ) -> Result<G::Var> {
        let w = g.param(p.w);
        let b = g.param(p.b);
        let z = g.conv1d(y, &w, Some(&b), stride, Padding::Symmetric(0), 1)?;
        g.transpose_last2(&z)
    }

    /// `[B, N, D] → [B, N + 1, D]` with the class token at index 0.
    pub fn prepend_class_token<E: Element, G: Graph<E>>(&self, g: &mut G, t: &G::Var) -> Result<G::Var> {
        let tok = g.param(self.class_token);
        g.prepend_token(&tok, t)
    }

    /// Full front end: `[B, C_i, L] → [B, 1 + N_s + N_w, D]`.
    pub fn forward<E: Element, G: Graph<E>>(&self, g: &mut G, x: &G::Var, task_id: usize) -> Result<G::Var> {
        let len = g.value(x).shape().last().copied().unwrap_or(0);
        self.task(task_id)?;
        self.cfg.token_count(len)?;
        let y = self.spatial_adapt(g, x, task_id)?;
        let t = self.tokenize(g, &y)?;
        self.prepend_class_token(g, &t)
    }
}
