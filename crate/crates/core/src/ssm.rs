//! Selective state-space layer: input-dependent `Δ`, `B`, `C`, zero-order-hold
//! discretization with the first-order input approximation, and the linear
//! recurrence `h_t = Ā_t h_{t-1} + B̄_t x_t`, `y_t = C_t · h_t (+ D x_t)`.
//!
//! `A` is diagonal and parameterized as `A = -exp(A_log)`, so every
//! discretized decay `exp(Δ A)` lies in `(0, 1)` for `Δ > 0`.
//!
//! Two scan kernels are provided and interchangeable through [`ScanMode`]:
//! a left-to-right loop and a work-efficient (up-sweep / down-sweep) prefix
//! scan over the associative composition of affine maps
//! `(a₂, b₂) ∘ (a₁, b₁) = (a₁ a₂, a₂ b₁ + b₂)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Op, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::ops::{softplus_inverse, GraphExt};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    #[default]
    Sequential,
    Parallel,
}

// ---------------------------------------------------------------------------
// Lane kernels

/// `h_t = a_t h_{t-1} + u_t`, `h_{-1} = 0`, written into `h`.
pub fn recurrence_sequential<E: Element>(a: &[E], u: &[E], h: &mut [E]) {
    let mut state = E::zero();
    for ((&at, &ut), ht) in a.iter().zip(u).zip(h.iter_mut()) {
        state = at * state + ut;
        *ht = state;
    }
}

/// Same recurrence as [`recurrence_sequential`], evaluated as a Blelloch
/// exclusive scan over `(a, u)` pairs followed by one combine per element.
///
/// `scratch_a` and `scratch_b` are resized to the next power of two.
pub fn recurrence_blelloch<E: Element>(
    a: &[E],
    u: &[E],
    h: &mut [E],
    scratch_a: &mut Vec<E>,
    scratch_b: &mut Vec<E>,
) {
    let len = a.len();
    if len == 0 {
        return;
    }
    let n = len.next_power_of_two();
    scratch_a.clear();
    scratch_b.clear();
    scratch_a.extend_from_slice(a);
    scratch_b.extend_from_slice(u);
    // Identity element (1, 0) pads to a power of two.
    scratch_a.resize(n, E::one());
    scratch_b.resize(n, E::zero());
    let (sa, sb) = (scratch_a.as_mut_slice(), scratch_b.as_mut_slice());

    // Up-sweep: node i accumulates the composition of its left sibling
    // subtree (earlier) followed by its own subtree (later).
    let mut stride = 2;
    while stride <= n {
        let half = stride / 2;
        let mut i = stride - 1;
        while i < n {
            let l = i - half;
            let (a1, b1) = (sa[l], sb[l]);
            let (a2, b2) = (sa[i], sb[i]);
            sa[i] = a1 * a2;
            sb[i] = a2 * b1 + b2;
            i += stride;
        }
        stride *= 2;
    }

    // Down-sweep to an exclusive prefix.
    sa[n - 1] = E::one();
    sb[n - 1] = E::zero();
    let mut stride = n;
    while stride >= 2 {
        let half = stride / 2;
        let mut i = stride - 1;
        while i < n {
            let l = i - half;
            let (ta, tb) = (sa[l], sb[l]);
            let (pa, pb) = (sa[i], sb[i]);
            sa[l] = pa;
            sb[l] = pb;
            // prefix (pa, pb) followed by the left subtree (ta, tb)
            sa[i] = pa * ta;
            sb[i] = ta * pb + tb;
            i += stride;
        }
        stride /= 2;
    }

    // Inclusive value: apply element t to the exclusive prefix state.
    for t in 0..len {
        h[t] = a[t] * sb[t] + u[t];
    }
}

fn run_lane<E: Element>(mode: ScanMode, a: &[E], u: &[E], h: &mut [E], sa: &mut Vec<E>, sb: &mut Vec<E>) {
    match mode {
        ScanMode::Sequential => recurrence_sequential(a, u, h),
        ScanMode::Parallel => recurrence_blelloch(a, u, h, sa, sb),
    }
}

// ---------------------------------------------------------------------------
// Materialized reference path

/// Zero-order-hold discretization with diagonal `A`:
/// `Ā = exp(Δ A)` and `B̄ = Δ B` (first-order approximation), both
/// `[B, L, D, N]`.
pub fn discretize<E: Element>(
    delta: &Tensor<E>,
    a: &Tensor<E>,
    b_in: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    if delta.ndim() != 3 || a.ndim() != 2 || b_in.ndim() != 3 {
        return Err(Error::shape(
            "discretize",
            format!(
                "expected Δ [B,L,D], A [D,N], B [B,L,N]; got {:?}, {:?}, {:?}",
                delta.shape(),
                a.shape(),
                b_in.shape()
            ),
        ));
    }
    let (bs, l, d) = (delta.dim(0), delta.dim(1), delta.dim(2));
    let n = a.dim(1);
    if a.dim(0) != d {
        return Err(Error::Dimension {
            op: "discretize",
            axis: 0,
            expected: d,
            got: a.dim(0),
        });
    }
    if b_in.dim(0) != bs || b_in.dim(1) != l || b_in.dim(2) != n {
        return Err(Error::shape(
            "discretize",
            format!("B must be [{bs}, {l}, {n}], got {:?}", b_in.shape()),
        ));
    }
    if let Some(bad) = delta.data().iter().find(|v| !(**v > E::zero())) {
        return Err(Error::Domain {
            op: "discretize",
            msg: format!("time step must be positive, got {bad}"),
        });
    }
    let mut abar = Vec::with_capacity(bs * l * d * n);
    let mut bbar = Vec::with_capacity(bs * l * d * n);
    for b in 0..bs {
        for t in 0..l {
            let brow = &b_in.data()[(b * l + t) * n..][..n];
            for di in 0..d {
                let dt = delta.data()[(b * l + t) * d + di];
                let arow = &a.data()[di * n..][..n];
                for k in 0..n {
                    abar.push((dt * arow[k]).exp());
                    bbar.push(dt * brow[k]);
                }
            }
        }
    }
    Ok((
        Tensor::new([bs, l, d, n], abar)?,
        Tensor::new([bs, l, d, n], bbar)?,
    ))
}

fn check_scan_shapes<E: Element>(
    abar: &Tensor<E>,
    bbar: &Tensor<E>,
    x: &Tensor<E>,
    c: &Tensor<E>,
    skip: Option<&Tensor<E>>,
) -> Result<(usize, usize, usize, usize)> {
    if abar.ndim() != 4 || x.ndim() != 3 || c.ndim() != 3 {
        return Err(Error::shape("selective_scan", "expected Ā [B,L,D,N], x [B,L,D], C [B,L,N]"));
    }
    let (bs, l, d, n) = (abar.dim(0), abar.dim(1), abar.dim(2), abar.dim(3));
    if bbar.shape() != abar.shape() {
        return Err(Error::shape("selective_scan", "Ā and B̄ shapes differ"));
    }
    if x.shape() != [bs, l, d] {
        return Err(Error::shape("selective_scan", format!("x must be [{bs}, {l}, {d}], got {:?}", x.shape())));
    }
    if c.shape() != [bs, l, n] {
        return Err(Error::shape("selective_scan", format!("C must be [{bs}, {l}, {n}], got {:?}", c.shape())));
    }
    if let Some(s) = skip {
        if s.len() != d {
            return Err(Error::Dimension {
                op: "selective_scan",
                axis: 0,
                expected: d,
                got: s.len(),
            });
        }
    }
    Ok((bs, l, d, n))
}

fn scan_materialized<E: Element>(
    mode: ScanMode,
    abar: &Tensor<E>,
    bbar: &Tensor<E>,
    x: &Tensor<E>,
    c: &Tensor<E>,
    skip: Option<&Tensor<E>>,
    keep_states: bool,
) -> Result<(Tensor<E>, Option<Tensor<E>>)> {
    let (bs, l, d, n) = check_scan_shapes(abar, bbar, x, c, skip)?;
    let mut y = vec![E::zero(); bs * l * d];
    let mut states = keep_states.then(|| vec![E::zero(); bs * l * d * n]);
    let (mut la, mut lu, mut lh) = (vec![E::zero(); l], vec![E::zero(); l], vec![E::zero(); l]);
    let (mut sa, mut sb) = (Vec::new(), Vec::new());
    for b in 0..bs {
        for di in 0..d {
            for k in 0..n {
                for t in 0..l {
                    let idx = ((b * l + t) * d + di) * n + k;
                    la[t] = abar.data()[idx];
                    lu[t] = bbar.data()[idx] * x.data()[(b * l + t) * d + di];
                }
                run_lane(mode, &la, &lu, &mut lh, &mut sa, &mut sb);
                for t in 0..l {
                    y[(b * l + t) * d + di] += c.data()[(b * l + t) * n + k] * lh[t];
                    if let Some(s) = states.as_mut() {
                        s[((b * l + t) * d + di) * n + k] = lh[t];
                    }
                }
            }
            if let Some(s) = skip {
                for t in 0..l {
                    let i = (b * l + t) * d + di;
                    y[i] += s.data()[di] * x.data()[i];
                }
            }
        }
    }
    Ok((
        Tensor::new([bs, l, d], y)?,
        states.map(|s| Tensor::new([bs, l, d, n], s)).transpose()?,
    ))
}

/// Left-to-right evaluation of the discretized recurrence from `h_0 = 0`.
pub fn selective_scan_sequential<E: Element>(
    abar: &Tensor<E>,
    bbar: &Tensor<E>,
    x: &Tensor<E>,
    c: &Tensor<E>,
    skip: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    Ok(scan_materialized(ScanMode::Sequential, abar, bbar, x, c, skip, false)?.0)
}

/// Prefix-scan evaluation of the same recurrence.
pub fn selective_scan_parallel<E: Element>(
    abar: &Tensor<E>,
    bbar: &Tensor<E>,
    x: &Tensor<E>,
    c: &Tensor<E>,
    skip: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    Ok(scan_materialized(ScanMode::Parallel, abar, bbar, x, c, skip, false)?.0)
}

/// Hidden states `h_t` as `[B, L, D, N]` (sequential kernel).
pub fn scan_states<E: Element>(
    abar: &Tensor<E>,
    bbar: &Tensor<E>,
    x: &Tensor<E>,
    c: &Tensor<E>,
) -> Result<Tensor<E>> {
    Ok(scan_materialized(ScanMode::Sequential, abar, bbar, x, c, None, true)?
        .1
        .expect("states requested"))
}

// ---------------------------------------------------------------------------
// Fused differentiable scan

/// Differentiable selective scan over inputs
/// `[x [B,L,D], Δ [B,L,D], A [D,N], B [B,L,N], C [B,L,N], (skip [D])]`.
///
/// Discretization is fused into the scan so `Ā`/`B̄` are never
/// materialized; the backward pass recomputes them from `Δ` and `A` and
/// reuses the hidden states saved by the forward pass.
pub struct SelectiveScan<E> {
    pub mode: ScanMode,
    pub has_skip: bool,
    states: Option<Vec<E>>,
}

impl<E: Element> SelectiveScan<E> {
    pub fn new(mode: ScanMode, has_skip: bool) -> Self {
        Self {
            mode,
            has_skip,
            states: None,
        }
    }
}

struct ScanDims {
    bs: usize,
    l: usize,
    d: usize,
    n: usize,
}

fn fused_dims<E: Element>(inputs: &[&Tensor<E>], has_skip: bool) -> Result<ScanDims> {
    let (x, delta, a, bm, cm) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
    if x.ndim() != 3 || a.ndim() != 2 {
        return Err(Error::shape(
            "selective_scan",
            format!("expected x [B,L,D] and A [D,N], got {:?} and {:?}", x.shape(), a.shape()),
        ));
    }
    let (bs, l, d) = (x.dim(0), x.dim(1), x.dim(2));
    let n = a.dim(1);
    if delta.shape() != x.shape() {
        return Err(Error::shape("selective_scan", format!("Δ must match x {:?}, got {:?}", x.shape(), delta.shape())));
    }
    if a.dim(0) != d {
        return Err(Error::Dimension {
            op: "selective_scan",
            axis: 0,
            expected: d,
            got: a.dim(0),
        });
    }
    for m in [bm, cm] {
        if m.shape() != [bs, l, n] {
            return Err(Error::shape("selective_scan", format!("B/C must be [{bs}, {l}, {n}], got {:?}", m.shape())));
        }
    }
    if has_skip && inputs[5].len() != d {
        return Err(Error::Dimension {
            op: "selective_scan",
            axis: 0,
            expected: d,
            got: inputs[5].len(),
        });
    }
    Ok(ScanDims { bs, l, d, n })
}

impl<E: Element> SelectiveScan<E> {
    fn forward_sequential(&self, inputs: &[&Tensor<E>], dims: &ScanDims, states: Option<&mut [E]>) -> Vec<E> {
        let ScanDims { bs, l, d, n } = *dims;
        let (x, delta, a, bm, cm) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
        );
        let mut y = vec![E::zero(); bs * l * d];
        let mut h = vec![E::zero(); d * n];
        let mut states = states;
        for b in 0..bs {
            h.iter_mut().for_each(|v| *v = E::zero());
            for t in 0..l {
                let row = b * l + t;
                let brow = &bm[row * n..][..n];
                let crow = &cm[row * n..][..n];
                for di in 0..d {
                    let dt = delta[row * d + di];
                    let xv = x[row * d + di];
                    let arow = &a[di * n..][..n];
                    let hrow = &mut h[di * n..][..n];
                    let mut acc = E::zero();
                    for k in 0..n {
                        let decay = (dt * arow[k]).exp();
                        let hv = decay * hrow[k] + dt * brow[k] * xv;
                        hrow[k] = hv;
                        acc += crow[k] * hv;
                    }
                    y[row * d + di] = acc;
                }
                if let Some(s) = states.as_deref_mut() {
                    s[row * d * n..][..d * n].copy_from_slice(&h);
                }
            }
        }
        y
    }

    fn forward_parallel(&self, inputs: &[&Tensor<E>], dims: &ScanDims, states: Option<&mut [E]>) -> Vec<E> {
        let ScanDims { bs, l, d, n } = *dims;
        let (x, delta, a, bm, cm) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
        );
        // One lane per (batch, channel); each lane scans its N states.
        let lane = |bd: usize| -> (Vec<E>, Vec<E>) {
            let (b, di) = (bd / d, bd % d);
            let mut ycol = vec![E::zero(); l];
            let mut hcol = vec![E::zero(); l * n];
            let (mut la, mut lu, mut lh) = (vec![E::zero(); l], vec![E::zero(); l], vec![E::zero(); l]);
            let (mut sa, mut sb) = (Vec::new(), Vec::new());
            for k in 0..n {
                let ak = a[di * n + k];
                for t in 0..l {
                    let row = b * l + t;
                    let dt = delta[row * d + di];
                    la[t] = (dt * ak).exp();
                    lu[t] = dt * bm[row * n + k] * x[row * d + di];
                }
                recurrence_blelloch(&la, &lu, &mut lh, &mut sa, &mut sb);
                for t in 0..l {
                    ycol[t] += cm[(b * l + t) * n + k] * lh[t];
                    hcol[t * n + k] = lh[t];
                }
            }
            (ycol, hcol)
        };
        #[cfg(feature = "parallel")]
        let cols: Vec<(Vec<E>, Vec<E>)> = {
            use rayon::prelude::*;
            (0..bs * d).into_par_iter().map(lane).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let cols: Vec<(Vec<E>, Vec<E>)> = (0..bs * d).map(lane).collect();

        let mut y = vec![E::zero(); bs * l * d];
        let mut states = states;
        for (bd, (ycol, hcol)) in cols.into_iter().enumerate() {
            let (b, di) = (bd / d, bd % d);
            for t in 0..l {
                y[(b * l + t) * d + di] = ycol[t];
            }
            if let Some(s) = states.as_deref_mut() {
                for t in 0..l {
                    s[((b * l + t) * d + di) * n..][..n].copy_from_slice(&hcol[t * n..][..n]);
                }
            }
        }
        y
    }
}

impl<E: Element> Op<E> for SelectiveScan<E> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], save: bool) -> Result<Tensor<E>> {
        let dims = fused_dims(inputs, self.has_skip)?;
        if let Some(bad) = inputs[1].data().iter().find(|v| !(**v >= E::zero()) || !v.is_finite()) {
            return Err(Error::Domain {
                op: "selective_scan",
                msg: format!("time step must be non-negative and finite, got {bad}"),
            });
        }
        let mut states = save.then(|| vec![E::zero(); dims.bs * dims.l * dims.d * dims.n]);
        let mut y = match self.mode {
            ScanMode::Sequential => self.forward_sequential(inputs, &dims, states.as_deref_mut()),
            ScanMode::Parallel => self.forward_parallel(inputs, &dims, states.as_deref_mut()),
        };
        if self.has_skip {
            let (x, skip) = (inputs[0].data(), inputs[5].data());
            for (i, v) in y.iter_mut().enumerate() {
                *v += skip[i % dims.d] * x[i];
            }
        }
        self.states = states;
        Tensor::new([dims.bs, dims.l, dims.d], y)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>> {
        let dims = fused_dims(inputs, self.has_skip).unwrap();
        let ScanDims { bs, l, d, n } = dims;
        let states = self
            .states
            .as_ref()
            .expect("selective_scan backward without saved states");
        let (x, delta, a, bm, cm) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
        );
        let g = grad.data();
        let mut gx = vec![E::zero(); bs * l * d];
        let mut gdelta = vec![E::zero(); bs * l * d];
        let mut ga = vec![E::zero(); d * n];
        let mut gb = vec![E::zero(); bs * l * n];
        let mut gc = vec![E::zero(); bs * l * n];
        // Adjoint of h_t, carried backwards: λ_t = C_t g_t + Ā_{t+1} λ_{t+1}.
        let mut carry = vec![E::zero(); d * n];
        for b in 0..bs {
            carry.iter_mut().for_each(|v| *v = E::zero());
            for t in (0..l).rev() {
                let row = b * l + t;
                let brow = &bm[row * n..][..n];
                let crow = &cm[row * n..][..n];
                let hrow_all = &states[row * d * n..][..d * n];
                let prev_all = (t > 0).then(|| &states[(row - 1) * d * n..][..d * n]);
                for di in 0..d {
                    let dt = delta[row * d + di];
                    let xv = x[row * d + di];
                    let gy = g[row * d + di];
                    let arow = &a[di * n..][..n];
                    let hrow = &hrow_all[di * n..][..n];
                    let mut gdt = E::zero();
                    let mut gxv = E::zero();
                    for k in 0..n {
                        let decay = (dt * arow[k]).exp();
                        let lam = carry[di * n + k] + crow[k] * gy;
                        gc[row * n + k] += gy * hrow[k];
                        let hprev = prev_all.map_or(E::zero(), |p| p[di * n + k]);
                        let gdecay = lam * hprev;
                        gdt += gdecay * decay * arow[k] + lam * brow[k] * xv;
                        ga[di * n + k] += gdecay * decay * dt;
                        gb[row * n + k] += lam * dt * xv;
                        gxv += lam * dt * brow[k];
                        carry[di * n + k] = lam * decay;
                    }
                    gdelta[row * d + di] = gdt;
                    gx[row * d + di] = gxv;
                }
            }
        }
        let mut gskip = None;
        if self.has_skip {
            let skip = inputs[5].data();
            for (i, v) in gx.iter_mut().enumerate() {
                *v += skip[i % d] * g[i];
            }
            if needs[5] {
                let mut gs = vec![E::zero(); d];
                for (i, &gv) in g.iter().enumerate() {
                    gs[i % d] += gv * x[i];
                }
                gskip = Some(Tensor::new([d], gs).unwrap());
            }
        }
        let mut out = vec![
            needs[0].then(|| Tensor::new([bs, l, d], gx).unwrap()),
            needs[1].then(|| Tensor::new([bs, l, d], gdelta).unwrap()),
            needs[2].then(|| Tensor::new([d, n], ga).unwrap()),
            needs[3].then(|| Tensor::new([bs, l, n], gb).unwrap()),
            needs[4].then(|| Tensor::new([bs, l, n], gc).unwrap()),
        ];
        if self.has_skip {
            out.push(gskip);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Parameters and layer

/// Parameters of one selective SSM over `d_inner` channels with
/// `d_state` states per channel.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub a_log: ParamId,
    pub dt_down: ParamId,
    pub dt_up: ParamId,
    pub dt_bias: ParamId,
    pub proj_b: ParamId,
    pub proj_c: ParamId,
    pub skip_d: Option<ParamId>,
    pub d_inner: usize,
    pub d_state: usize,
}

pub const DT_MIN: f64 = 0.001;
pub const DT_MAX: f64 = 0.1;

/// Rank of the low-rank `Δ` projection for `d_inner` channels.
pub fn dt_rank(d_inner: usize) -> usize {
    d_inner.div_ceil(16).max(1)
}

impl SsmParams {
    pub fn init<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        prefix: &str,
        d_inner: usize,
        d_state: usize,
        skip: bool,
        rng: &mut R,
    ) -> Self {
        let rank = dt_rank(d_inner);
        let a_log = Tensor::from_fn([d_inner, d_state], |i| E::of(((i % d_state) + 1) as f64).ln());
        let bound_in = 1.0 / (d_inner as f64).sqrt();
        let bound_rank = 1.0 / (rank as f64).sqrt();
        let dt_bias = Tensor::from_fn([d_inner], |_| {
            let log_dt = rng.random_range(DT_MIN.ln()..DT_MAX.ln());
            E::of(softplus_inverse(log_dt.exp()))
        });
        Self {
            a_log: store.add(format!("{prefix}.a_log"), a_log),
            dt_down: store.add(
                format!("{prefix}.dt_down"),
                Tensor::uniform([d_inner, rank], -bound_in, bound_in, rng),
            ),
            dt_up: store.add(
                format!("{prefix}.dt_up"),
                Tensor::uniform([rank, d_inner], -bound_rank, bound_rank, rng),
            ),
            dt_bias: store.add(format!("{prefix}.dt_bias"), dt_bias),
            proj_b: store.add(
                format!("{prefix}.proj_b"),
                Tensor::uniform([d_inner, d_state], -bound_in, bound_in, rng),
            ),
            proj_c: store.add(
                format!("{prefix}.proj_c"),
                Tensor::uniform([d_inner, d_state], -bound_in, bound_in, rng),
            ),
            skip_d: skip.then(|| store.add(format!("{prefix}.skip_d"), Tensor::full([d_inner], E::one()))),
            d_inner,
            d_state,
        }
    }
}

/// Selective SSM over token-major input `x [B, L, D]` in the forward
/// direction.
pub fn ssm_forward<E: Element, G: Graph<E>>(
    g: &mut G,
    x: &G::Var,
    p: &SsmParams,
    mode: ScanMode,
) -> Result<G::Var> {
    let dt_down = g.param(p.dt_down);
    let dt_up = g.param(p.dt_up);
    let dt_bias = g.param(p.dt_bias);
    let low = g.linear(x, &dt_down, None)?;
    let pre = g.linear(&low, &dt_up, Some(&dt_bias))?;
    let delta = g.softplus(&pre)?;

    let a_log = g.param(p.a_log);
    let a_pos = g.exp(&a_log)?;
    let a = g.affine(&a_pos, -1.0, 0.0)?;

    let proj_b = g.param(p.proj_b);
    let proj_c = g.param(p.proj_c);
    let bm = g.linear(x, &proj_b, None)?;
    let cm = g.linear(x, &proj_c, None)?;

    match p.skip_d {
        Some(id) => {
            let skip = g.param(id);
            g.apply(SelectiveScan::new(mode, true), &[x, &delta, &a, &bm, &cm, &skip])
        }
        None => g.apply(SelectiveScan::new(mode, false), &[x, &delta, &a, &bm, &cm]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn blelloch_matches_loop_on_odd_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for len in [1usize, 2, 3, 5, 7, 8, 13, 64, 100] {
            let a: Vec<f64> = (0..len).map(|_| rng.random_range(0.1..0.99)).collect();
            let u: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut h1 = vec![0.0; len];
            let mut h2 = vec![0.0; len];
            recurrence_sequential(&a, &u, &mut h1);
            recurrence_blelloch(&a, &u, &mut h2, &mut Vec::new(), &mut Vec::new());
            for (x, y) in h1.iter().zip(&h2) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "len {len}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn discretize_rejects_non_positive_step() {
        let delta = Tensor::<f64>::from_f64([1, 1, 1], &[0.0]).unwrap();
        let a = Tensor::from_f64([1, 1], &[-1.0]).unwrap();
        let b = Tensor::from_f64([1, 1, 1], &[1.0]).unwrap();
        assert!(matches!(discretize(&delta, &a, &b), Err(Error::Domain { .. })));
    }

    #[test]
    fn dt_bias_lands_in_range() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = SsmParams::init(&mut store, "s", 64, 4, true, &mut rng);
        for &b in store.get(p.dt_bias).data() {
            let dt = crate::ops::softplus(b);
            assert!((DT_MIN - 1e-12..=DT_MAX + 1e-12).contains(&dt), "{dt}");
        }
    }
}
