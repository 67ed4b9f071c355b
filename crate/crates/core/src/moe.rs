//! Task-aware noisy top-k mixture of experts with a universal expert.
//!
//! ```text
//! t_cat  = [t_cls ; t_task]
//! G      = Linear_Gate(t_cat) + ε · softplus(Linear_Noise(t_cat))   (ε only in training)
//! e      = softmax over the k largest entries of G, zero elsewhere
//! ω      = 1 − max(e)
//! y      = Σ_i e_i · E_i(t_cls) + ω · E_u(t_cls)
//! ```
//!
//! Only the selected experts run on each row. The auxiliary losses are the
//! coefficient of variation of expert importance and the router z-loss
//! `mean(logsumexp(G)²)`.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Op, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::nn::{LinearParams, Mlp};
use crate::ops::{log_sum_exp, GraphExt};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoePlacement {
    /// Once, on the class token after the last block.
    #[default]
    AfterBlocks,
    /// After every block, added back onto the class token.
    EachBlock,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMode {
    /// CV of batch-summed expert importance.
    #[default]
    Importance,
    /// Mean over rows of the CV of each row's gate vector.
    PerToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub d_task: usize,
    /// Expert hidden width as a multiple of `d_model`.
    pub expert_expand: usize,
    pub aux_weight: f64,
    /// Feed the task embedding to the gate; `false` zeroes it.
    pub task_aware: bool,
    pub use_universal: bool,
    pub use_task_experts: bool,
    pub gate_noise: bool,
    pub placement: MoePlacement,
    pub balance: BalanceMode,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            num_experts: 8,
            top_k: 2,
            d_task: 32,
            expert_expand: 2,
            aux_weight: 0.01,
            task_aware: true,
            use_universal: true,
            use_task_experts: true,
            gate_noise: true,
            placement: MoePlacement::AfterBlocks,
            balance: BalanceMode::Importance,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_task_experts && !self.use_universal {
            return Err(Error::Config("MoE needs task experts, a universal expert, or both".into()));
        }
        if self.use_task_experts && (self.top_k == 0 || self.top_k > self.num_experts) {
            return Err(Error::Config(format!(
                "top_k must lie in 1..={}, got {}",
                self.num_experts, self.top_k
            )));
        }
        if self.expert_expand == 0 {
            return Err(Error::Config("expert_expand must be positive".into()));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::Config(format!("aux_weight must be finite and non-negative, got {}", self.aux_weight)));
        }
        Ok(())
    }
}

/// Routing outcome for one row.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    /// Gate logits before top-k masking (noise included in training).
    pub logits: Vec<f64>,
    /// Selected experts, strongest first.
    pub selected: Vec<usize>,
    /// Full-width weights, zero off the selection.
    pub weights: Vec<f64>,
    pub omega: f64,
}

/// Indices of the `k` largest entries, strongest first; ties go to the lower
/// index.
pub fn top_k_indices(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Softmax over the surviving logits, zero elsewhere.
pub fn top_k_softmax(logits: &[f64], k: usize) -> Vec<f64> {
    let sel = top_k_indices(logits, k);
    let vals: Vec<f64> = sel.iter().map(|&i| logits[i]).collect();
    let lse = log_sum_exp(&vals);
    let mut w = vec![0.0; logits.len()];
    for (&i, &v) in sel.iter().zip(&vals) {
        w[i] = (v - lse).exp();
    }
    w
}

/// Softmax restricted to a fixed survivor set per row of `[R, N]`.
pub struct MaskedSoftmax {
    pub selected: Vec<Vec<usize>>,
}

impl<E: Element> Op<E> for MaskedSoftmax {
    fn name(&self) -> &'static str {
        "masked_softmax"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let x = inputs[0];
        let n = x.last_dim();
        if x.rows() != self.selected.len() {
            return Err(Error::Dimension {
                op: "masked_softmax",
                axis: 0,
                expected: self.selected.len(),
                got: x.rows(),
            });
        }
        let mut out = Tensor::zeros(x.shape().to_vec());
        for ((row, dst), sel) in x.data().chunks(n).zip(out.data_mut().chunks_mut(n)).zip(&self.selected) {
            if sel.is_empty() || sel.iter().any(|&j| j >= n) {
                return Err(Error::shape("masked_softmax", "survivor index out of range"));
            }
            let m = sel.iter().map(|&j| row[j]).fold(E::neg_infinity(), E::max);
            let mut s = E::zero();
            for &j in sel {
                dst[j] = (row[j] - m).exp();
                s += dst[j];
            }
            for &j in sel {
                dst[j] /= s;
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
        let n = output.last_dim();
        let mut gx = Tensor::zeros(output.shape().to_vec());
        for (((y, g), dst), sel) in output
            .data()
            .chunks(n)
            .zip(grad.data().chunks(n))
            .zip(gx.data_mut().chunks_mut(n))
            .zip(&self.selected)
        {
            let dot: E = sel.iter().map(|&j| y[j] * g[j]).sum();
            for &j in sel {
                dst[j] = y[j] * (g[j] - dot);
            }
        }
        vec![Some(gx)]
    }
}

fn cv(v: &[f64]) -> Option<(f64, f64, f64)> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return None;
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    Some((std / mean, mean, std))
}

/// Coefficient of variation (population std over mean) of batch-summed
/// expert importance for gate weights `[B, N_e]`.
pub fn balance_loss(weights: &Tensor<f64>) -> Result<f64> {
    let n = weights.last_dim();
    let mut imp = vec![0.0; n];
    for row in weights.data().chunks(n) {
        imp.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    cv(&imp)
        .map(|c| c.0)
        .ok_or_else(|| Error::DegenerateGate("expert importance sums to zero".into()))
}

/// `mean_b (logsumexp(logits_b))²`.
pub fn z_loss(logits: &Tensor<f64>) -> f64 {
    let n = logits.last_dim();
    let rows = logits.rows().max(1) as f64;
    logits
        .data()
        .chunks(n)
        .map(|r| {
            let l = log_sum_exp(r);
            l * l
        })
        .sum::<f64>()
        / rows
}

/// Differentiable balance loss over gate weights `[B, N_e]`.
pub struct BalanceLoss {
    pub mode: BalanceMode,
}

impl BalanceLoss {
    fn groups<E: Element>(&self, x: &Tensor<E>) -> Vec<Vec<f64>> {
        let n = x.last_dim();
        match self.mode {
            BalanceMode::Importance => {
                let mut imp = vec![0.0; n];
                for row in x.data().chunks(n) {
                    imp.iter_mut().zip(row).for_each(|(a, b)| *a += b.f64());
                }
                vec![imp]
            }
            BalanceMode::PerToken => x.data().chunks(n).map(|r| r.iter().map(|v| v.f64()).collect()).collect(),
        }
    }
}

impl<E: Element> Op<E> for BalanceLoss {
    fn name(&self) -> &'static str {
        "balance_loss"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let x = inputs[0];
        if x.len() == 0 {
            return Err(Error::DegenerateGate("no gate weights".into()));
        }
        let groups = self.groups(x);
        let mut total = 0.0;
        for grp in &groups {
            total += cv(grp)
                .ok_or_else(|| Error::DegenerateGate("expert importance sums to zero".into()))?
                .0;
        }
        Ok(Tensor::scalar(E::of(total / groups.len() as f64)))
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
        let groups = self.groups(x);
        let scale = grad.data()[0].f64() / groups.len() as f64;
        let nf = n as f64;
        let group_grad = |v: &[f64]| -> Vec<f64> {
            let (ratio, mean, std) = cv(v).unwrap_or((0.0, 1.0, 0.0));
            v.iter()
                .map(|&vj| {
                    let dstd = if std > 0.0 { (vj - mean) / (nf * std) } else { 0.0 };
                    scale * (dstd / mean - ratio / (nf * mean))
                })
                .collect()
        };
        let mut gx = vec![E::zero(); x.len()];
        match self.mode {
            BalanceMode::Importance => {
                let gi = group_grad(&groups[0]);
                for row in gx.chunks_mut(n) {
                    row.iter_mut().zip(&gi).for_each(|(d, &g)| *d = E::of(g));
                }
            }
            BalanceMode::PerToken => {
                for (row, grp) in gx.chunks_mut(n).zip(&groups) {
                    let gi = group_grad(grp);
                    row.iter_mut().zip(&gi).for_each(|(d, &g)| *d = E::of(g));
                }
            }
        }
        vec![Some(Tensor::new(x.shape().to_vec(), gx).unwrap())]
    }
}

/// Differentiable router z-loss over logits `[B, N_e]`.
pub struct ZLoss;

impl<E: Element> Op<E> for ZLoss {
    fn name(&self) -> &'static str {
        "z_loss"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>], _save: bool) -> Result<Tensor<E>> {
        let x = inputs[0];
        let n = x.last_dim();
        let rows = x.rows().max(1);
        let s: f64 = x
            .data()
            .chunks(n)
            .map(|r| {
                let l = log_sum_exp(r).f64();
                l * l
            })
            .sum();
        Ok(Tensor::scalar(E::of(s / rows as f64)))
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
        let scale = grad.data()[0] / E::of(x.rows().max(1) as f64);
        let mut gx = x.clone();
        for row in gx.data_mut().chunks_mut(n) {
            let lse = log_sum_exp(row);
            let two = E::of(2.0);
            for v in row.iter_mut() {
                *v = if *v == E::neg_infinity() {
                    E::zero()
                } else {
                    scale * two * lse * (*v - lse).exp()
                };
            }
        }
        vec![Some(gx)]
    }
}

/// Gate randomness for one forward call.
pub enum GateMode<'r> {
    /// Deterministic routing.
    Eval,
    /// Gaussian noise drawn from the supplied generator.
    Train(&'r mut dyn rand::RngCore),
}

impl GateMode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, GateMode::Train(_))
    }
}

#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub cfg: MoeConfig,
    pub d_model: usize,
    pub num_tasks: usize,
    pub task_experts: Vec<Mlp>,
    pub universal: Option<Mlp>,
    pub task_embeddings: Option<ParamId>,
    pub gate: Option<LinearParams>,
    pub noise: Option<LinearParams>,
}

/// Result of one MoE forward call.
pub struct MoeOutput<V> {
    pub y: V,
    pub decisions: Vec<GateDecision>,
    /// Balance loss, when task experts are routed.
    pub balance: Option<V>,
    pub z: Option<V>,
}

impl MoeLayer {
    pub fn init<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        prefix: &str,
        d_model: usize,
        num_tasks: usize,
        cfg: &MoeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.expert_expand * d_model;
        let routed = cfg.use_task_experts;
        let task_experts = if routed {
            (0..cfg.num_experts)
                .map(|i| Mlp::init(store, &format!("{prefix}.expert.{i}"), d_model, hidden, rng))
                .collect()
        } else {
            Vec::new()
        };
        let universal = cfg
            .use_universal
            .then(|| Mlp::init(store, &format!("{prefix}.universal"), d_model, hidden, rng));
        let d_cat = d_model + cfg.d_task;
        let task_embeddings = (routed && cfg.d_task > 0).then(|| {
            store.add(
                format!("{prefix}.task_embeddings"),
                Tensor::randn([num_tasks, cfg.d_task], 1.0, rng),
            )
        });
        let gate = routed.then(|| LinearParams::init(store, &format!("{prefix}.gate"), d_cat, cfg.num_experts, true, rng));
        let noise = (routed && cfg.gate_noise)
            .then(|| LinearParams::init(store, &format!("{prefix}.noise"), d_cat, cfg.num_experts, true, rng));
        Ok(Self {
            cfg: cfg.clone(),
            d_model,
            num_tasks,
            task_experts,
            universal,
            task_embeddings,
            gate,
            noise,
        })
    }

    fn gate_input<E: Element, G: Graph<E>>(&self, g: &mut G, t_cls: &G::Var, task_id: usize) -> Result<G::Var> {
        let batch = g.value(t_cls).dim(0);
        let t_task = match self.task_embeddings {
            Some(table) if self.cfg.task_aware => {
                let table = g.param(table);
                g.broadcast_row(&table, task_id, batch)?
            }
            _ => g.constant(Tensor::zeros([batch, self.cfg.d_task])),
        };
        g.concat(&[t_cls, &t_task], 1)
    }

    /// Gate logits `[B, N_e]` (noisy in training).
    pub fn gate_logits<E: Element, G: Graph<E>>(
        &self,
        g: &mut G,
        t_cls: &G::Var,
        task_id: usize,
        mode: &mut GateMode<'_>,
    ) -> Result<G::Var> {
        if task_id >= self.num_tasks {
            return Err(Error::UnknownTask(task_id));
        }
        let gate = self
            .gate
            .as_ref()
            .ok_or_else(|| Error::Config("gating requires task experts".into()))?;
        let t_cat = self.gate_input(g, t_cls, task_id)?;
        let clean = gate.forward(g, &t_cat)?;
        match (mode, &self.noise) {
            (GateMode::Train(rng), Some(noise)) => {
                let shape = g.value(&clean).shape().to_vec();
                let eps = Tensor::from_fn(shape, |_| {
                    let v: f64 = StandardNormal.sample(&mut **rng);
                    E::of(v)
                });
                let eps = g.constant(eps);
                let raw = noise.forward(g, &t_cat)?;
                let scale = g.softplus(&raw)?;
                let jitter = g.mul(&eps, &scale)?;
                g.add(&clean, &jitter)
            }
            _ => Ok(clean),
        }
    }

    /// `t_cls [B, D] → y [B, D]` for a task-homogeneous batch.
    pub fn forward<E: Element, G: Graph<E>>(
        &self,
        g: &mut G,
        t_cls: &G::Var,
        task_id: usize,
        mode: &mut GateMode<'_>,
    ) -> Result<MoeOutput<G::Var>> {
        let shape = g.value(t_cls).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.d_model {
            return Err(Error::shape("moe", format!("expected [B, {}], got {shape:?}", self.d_model)));
        }
        if task_id >= self.num_tasks {
            return Err(Error::UnknownTask(task_id));
        }
        let batch = shape[0];

        if !self.cfg.use_task_experts {
            let u = self.universal.as_ref().expect("validated config");
            let y = u.forward(g, t_cls)?;
            let decisions = (0..batch)
                .map(|_| GateDecision {
                    logits: Vec::new(),
                    selected: Vec::new(),
                    weights: Vec::new(),
                    omega: 1.0,
                })
                .collect();
            return Ok(MoeOutput {
                y,
                decisions,
                balance: None,
                z: None,
            });
        }

        let logits = self.gate_logits(g, t_cls, task_id, mode)?;
        let n_e = self.cfg.num_experts;
        let lv = g.value(&logits).to_f64_vec();
        let selected: Vec<Vec<usize>> = lv.chunks(n_e).map(|r| top_k_indices(r, self.cfg.top_k)).collect();
        let weights = g.apply(
            MaskedSoftmax {
                selected: selected.clone(),
            },
            &[&logits],
        )?;
        let wv = g.value(&weights).to_f64_vec();

        let mut y: Option<G::Var> = None;
        for (j, expert) in self.task_experts.iter().enumerate() {
            let rows: Vec<usize> = (0..batch).filter(|&b| selected[b].contains(&j)).collect();
            if rows.is_empty() {
                continue;
            }
            let xj = g.gather_rows(t_cls, rows.clone())?;
            let yj = expert.forward(g, &xj)?;
            let wj = g.gather_elements(&weights, rows.iter().map(|&b| (b, j)).collect())?;
            let yj = g.scale_rows(&yj, &wj)?;
            let yj = g.scatter_rows(&yj, rows, batch)?;
            y = Some(match y {
                Some(acc) => g.add(&acc, &yj)?,
                None => yj,
            });
        }
        let mut y = y.expect("every row selects at least one expert");

        let omega_v: Vec<f64> = wv.chunks(n_e).map(|r| 1.0 - r.iter().copied().fold(0.0, f64::max)).collect();
        if let Some(u) = &self.universal {
            let yu = u.forward(g, t_cls)?;
            let m = g.row_max(&weights)?;
            let omega = g.affine(&m, -1.0, 1.0)?;
            let yu = g.scale_rows(&yu, &omega)?;
            y = g.add(&y, &yu)?;
        }

        let balance = g.apply(BalanceLoss { mode: self.cfg.balance }, &[&weights])?;
        let z = g.apply(ZLoss, &[&logits])?;
        let decisions = (0..batch)
            .map(|b| GateDecision {
                logits: lv[b * n_e..][..n_e].to_vec(),
                selected: selected[b].clone(),
                weights: wv[b * n_e..][..n_e].to_vec(),
                omega: omega_v[b],
            })
            .collect();
        Ok(MoeOutput {
            y,
            decisions,
            balance: Some(balance),
            z: Some(z),
        })
    }
}

/// Per-task expert activation probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStats {
    /// `[T][N_e]`: fraction of decisions for task `t` selecting expert `j`.
    pub matrix: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl ActivationStats {
    /// Row-wise `max − min` spread.
    pub fn spread(&self) -> Vec<f64> {
        self.matrix
            .iter()
            .map(|r| {
                let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mn = r.iter().copied().fold(f64::INFINITY, f64::min);
                mx - mn
            })
            .collect()
    }

    /// Mean row spread over tasks that received at least one decision.
    pub fn mean_spread(&self) -> f64 {
        let s: Vec<f64> = self
            .spread()
            .into_iter()
            .zip(&self.counts)
            .filter(|(_, &c)| c > 0)
            .map(|(v, _)| v)
            .collect();
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }

    /// CSV with columns `task_id,expert_id,probability`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "task_id,expert_id,probability")?;
        for (t, row) in self.matrix.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                writeln!(w, "{t},{j},{p}")?;
            }
        }
        Ok(())
    }
}

/// Tally `(task_id, decision)` pairs into activation probabilities.
pub fn activation_stats<'a, I>(decisions: I, num_tasks: usize, num_experts: usize) -> Result<ActivationStats>
where
    I: IntoIterator<Item = (usize, &'a GateDecision)>,
{
    let mut hits = vec![vec![0usize; num_experts]; num_tasks];
    let mut counts = vec![0usize; num_tasks];
    let mut any = false;
    for (t, d) in decisions {
        if t >= num_tasks {
            return Err(Error::UnknownTask(t));
        }
        any = true;
        counts[t] += 1;
        for &j in &d.selected {
            if j >= num_experts {
                return Err(Error::Config(format!("expert index {j} out of range")));
            }
            hits[t][j] += 1;
        }
    }
    if !any {
        return Err(Error::EmptyStats);
    }
    let matrix = hits
        .iter()
        .zip(&counts)
        .map(|(h, &c)| h.iter().map(|&v| if c == 0 { 0.0 } else { v as f64 / c as f64 }).collect())
        .collect();
    Ok(ActivationStats { matrix, counts })
}
