//! Central finite-difference verification of tape gradients (64-bit only).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::GraphExt;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-6;

/// Central differences carry round-off of order `ε_mach·|f|/h`, so gradients
/// below this fraction of the checked scalar are also compared absolutely.
pub const OUTPUT_FLOOR: f64 = 1e-4;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative discrepancy between an analytic and a numeric derivative.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    rel_error_at(analytic, numeric, 0.0)
}

/// [`rel_error`] for a derivative of a scalar of magnitude `output`.
pub fn rel_error_at(analytic: f64, numeric: f64, output: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(ABS_FLOOR).max(OUTPUT_FLOOR * output.abs());
    (analytic - numeric).abs() / denom
}

/// Reduce a non-scalar output to a scalar with fixed pseudo-random weights,
/// so every output entry contributes a distinct direction.
fn reduce(tape: &mut Tape<'_, f64>, out: Var) -> Result<Var> {
    if tape.value(&out).len() == 1 {
        return Ok(out);
    }
    let shape = tape.value(&out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut rng);
    let w = tape.constant(w);
    tape.dot(&out, &w)
}

fn scalar_value(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: &dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let s = reduce(&mut tape, out)?;
    if let Some(op) = tape.first_non_finite() {
        return Err(Error::NumericInstability { op });
    }
    Ok(tape.value(&s).data()[0])
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("finite-difference eps {eps} outside [1e-6, 1e-4]")));
    }
    Ok(())
}

/// Worst relative error between tape gradients and central differences over
/// every entry of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    grad_check_with_params(&ParamStore::new(), f, inputs, eps, usize::MAX)
}

/// Like [`grad_check`], but the closure may also read parameters from
/// `store`; parameter gradients are checked too. At most `max_per_tensor`
/// entries of each tensor are probed (evenly strided).
pub fn grad_check_with_params<F>(
    store: &ParamStore<f64>,
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    max_per_tensor: usize,
) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    for t in inputs {
        if !t.all_finite() {
            return Err(Error::NumericInstability { op: "input".into() });
        }
    }

    let (input_grads, param_grads, base) = {
        let mut tape = Tape::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let s = reduce(&mut tape, out)?;
        if let Some(op) = tape.first_non_finite() {
            return Err(Error::NumericInstability { op });
        }
        let base = tape.value(&s).data()[0];
        let grads = tape.backward(s)?;
        let ig: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        let pg: Vec<Tensor<f64>> = store
            .ids()
            .map(|id| {
                grads
                    .param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()))
            })
            .collect();
        (ig, pg, base)
    };

    let mut worst: f64 = 0.0;
    let probe = |len: usize| -> Vec<usize> {
        if len <= max_per_tensor {
            (0..len).collect()
        } else {
            let step = len as f64 / max_per_tensor as f64;
            (0..max_per_tensor).map(|i| (i as f64 * step) as usize).collect()
        }
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, analytic) in input_grads.iter().enumerate() {
        for i in probe(work[k].len()) {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = scalar_value(store, &work, &f)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = scalar_value(store, &work, &f)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_error_at(analytic.data()[i], numeric, base));
        }
    }

    let mut pstore = store.clone();
    for (id, analytic) in store.ids().zip(&param_grads) {
        for i in probe(analytic.len()) {
            let orig = pstore.get(id).data()[i];
            pstore.get_mut(id).data_mut()[i] = orig + eps;
            let plus = scalar_value(&pstore, inputs, &f)?;
            pstore.get_mut(id).data_mut()[i] = orig - eps;
            let minus = scalar_value(&pstore, inputs, &f)?;
            pstore.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_error_at(analytic.data()[i], numeric, base));
        }
    }
    Ok(worst)
}

/// Which part of the suite to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Ssm,
    Block,
    Moe,
    Model,
    All,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "ops" => Scope::Ops,
            "ssm" => Scope::Ssm,
            "block" => Scope::Block,
            "moe" => Scope::Moe,
            "model" => Scope::Model,
            "all" => Scope::All,
            other => return Err(Error::Config(format!("unknown gradcheck scope {other:?}"))),
        })
    }

    fn includes(self, other: Scope) -> bool {
        self == Scope::All || self == other
    }
}

/// Tolerance for single primitives.
pub const PRIMITIVE_TOL: f64 = 1e-5;
/// Tolerance for composite layers and the full model.
pub const COMPOSITE_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), lo, hi, rng)
}

/// Finite-difference checks of every differentiable primitive on small
/// shapes drawn from `seed`.
pub fn primitive_checks(seed: u64) -> Result<Vec<CheckResult>> {
    use crate::moe::{BalanceLoss, BalanceMode, MaskedSoftmax, ZLoss};
    use crate::ops::Padding;
    use crate::ssm::{ScanMode, SelectiveScan};
    use rand::Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(1..=2usize);
    let l = rng.random_range(3..=6usize);
    let d = rng.random_range(2..=4usize);
    let n = rng.random_range(1..=3usize);
    let eps = DEFAULT_EPS;
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64| {
        out.push(CheckResult {
            name: name.to_string(),
            error: err,
            tolerance: PRIMITIVE_TOL,
        })
    };

    let x = randn(&[b, l, d], &mut rng);
    let w = randn(&[d, 3], &mut rng);
    let bias = randn(&[3], &mut rng);
    push(
        "linear",
        grad_check(|g, v| g.linear(&v[0], &v[1], Some(&v[2])), &[x.clone(), w, bias], eps)?,
    );

    let xc = randn(&[b, 4, l + 2], &mut rng);
    let wc = randn(&[2, 2, 3], &mut rng);
    let bc = randn(&[2], &mut rng);
    push(
        "conv1d_symmetric_grouped",
        grad_check(
            |g, v| g.conv1d(&v[0], &v[1], Some(&v[2]), 2, Padding::Symmetric(1), 2),
            &[xc.clone(), wc, bc],
            eps,
        )?,
    );
    let wk = randn(&[3, 4, 2], &mut rng);
    push(
        "conv1d_causal",
        grad_check(|g, v| g.conv1d(&v[0], &v[1], None, 1, Padding::CausalLeft, 1), &[xc, wk], eps)?,
    );
    let wd = randn(&[d, 1, 3], &mut rng);
    let bd = randn(&[d], &mut rng);
    push(
        "depthwise_causal_conv",
        grad_check(|g, v| g.depthwise_causal_conv(&v[0], &v[1], &v[2]), &[x.clone(), wd, bd], eps)?,
    );
    let gamma = randn(&[d], &mut rng);
    let beta = randn(&[d], &mut rng);
    push(
        "layernorm",
        grad_check(|g, v| g.layernorm(&v[0], &v[1], &v[2], 1e-5), &[x.clone(), gamma, beta], eps)?,
    );
    push("silu", grad_check(|g, v| g.silu(&v[0]), &[x.clone()], eps)?);
    push("softplus", grad_check(|g, v| g.softplus(&v[0]), &[x.clone()], eps)?);
    push("exp", grad_check(|g, v| g.exp(&v[0]), &[x.clone()], eps)?);
    push("sigmoid", grad_check(|g, v| g.sigmoid(&v[0]), &[x.clone()], eps)?);
    push("square", grad_check(|g, v| g.square(&v[0]), &[x.clone()], eps)?);
    let y = randn(&[b, l, d], &mut rng);
    push("add", grad_check(|g, v| g.add(&v[0], &v[1]), &[x.clone(), y.clone()], eps)?);
    push("sub", grad_check(|g, v| g.sub(&v[0], &v[1]), &[x.clone(), y.clone()], eps)?);
    push("mul", grad_check(|g, v| g.mul(&v[0], &v[1]), &[x.clone(), y.clone()], eps)?);
    push("affine", grad_check(|g, v| g.affine(&v[0], -1.5, 0.25), &[x.clone()], eps)?);
    push("dot", grad_check(|g, v| g.dot(&v[0], &v[1]), &[x.clone(), y], eps)?);
    push("sum", grad_check(|g, v| g.sum(&v[0]), &[x.clone()], eps)?);
    push("mean", grad_check(|g, v| g.mean(&v[0]), &[x.clone()], eps)?);
    for axis in 0..3 {
        push(
            &format!("softmax_axis{axis}"),
            grad_check(|g, v| g.softmax(&v[0], axis), &[x.clone()], eps)?,
        );
    }
    let logits = randn(&[3, 4], &mut rng);
    let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
    push(
        "cross_entropy",
        grad_check(|g, v| g.cross_entropy(&v[0], &labels), &[logits.clone()], eps)?,
    );
    push("row_max", grad_check(|g, v| g.row_max(&v[0]), &[logits.clone()], eps)?);
    let s = randn(&[3], &mut rng);
    push(
        "scale_rows",
        grad_check(|g, v| g.scale_rows(&v[0], &v[1]), &[logits.clone(), s], eps)?,
    );
    push("reverse_seq", grad_check(|g, v| g.reverse_seq(&v[0]), &[x.clone()], eps)?);
    push("transpose_last2", grad_check(|g, v| g.transpose_last2(&v[0]), &[x.clone()], eps)?);
    let x2 = randn(&[b, 2, d], &mut rng);
    push(
        "concat",
        grad_check(|g, v| g.concat(&[&v[0], &v[1]], 1), &[x.clone(), x2], eps)?,
    );
    let tok = randn(&[d], &mut rng);
    push(
        "prepend_token",
        grad_check(|g, v| g.prepend_token(&v[0], &v[1]), &[tok, x.clone()], eps)?,
    );
    let idx = rng.random_range(0..l);
    push("select_token", grad_check(|g, v| g.select_token(&v[0], idx), &[x.clone()], eps)?);
    let row = randn(&[b, d], &mut rng);
    push(
        "set_token",
        grad_check(|g, v| g.set_token(&v[0], &v[1], idx), &[x.clone(), row], eps)?,
    );
    push(
        "gather_rows",
        grad_check(|g, v| g.gather_rows(&v[0], vec![2, 0]), &[logits.clone()], eps)?,
    );
    let few = randn(&[2, 4], &mut rng);
    push(
        "scatter_rows",
        grad_check(|g, v| g.scatter_rows(&v[0], vec![1, 3], 4), &[few], eps)?,
    );
    push(
        "gather_elements",
        grad_check(
            |g, v| g.gather_elements(&v[0], vec![(0, 1), (2, 3), (1, 0)]),
            &[logits.clone()],
            eps,
        )?,
    );
    let table = randn(&[3, d], &mut rng);
    push(
        "broadcast_row",
        grad_check(|g, v| g.broadcast_row(&v[0], 1, b + 1), &[table], eps)?,
    );
    let qa = randn(&[b, l, d], &mut rng);
    let kb = randn(&[b, l, d], &mut rng);
    let vb = randn(&[b, d, 3], &mut rng);
    push(
        "batch_matmul_transposed",
        grad_check(|g, v| g.batch_matmul(&v[0], &v[1], true, 0.5), &[qa.clone(), kb], eps)?,
    );
    push(
        "batch_matmul",
        grad_check(|g, v| g.batch_matmul(&v[0], &v[1], false, 1.0), &[qa, vb], eps)?,
    );

    let sel: Vec<Vec<usize>> = (0..3).map(|_| top_two(&mut rng)).collect();
    push(
        "masked_softmax",
        grad_check(
            |g, v| g.apply(MaskedSoftmax { selected: sel.clone() }, &[&v[0]]),
            &[logits.clone()],
            eps,
        )?,
    );
    let gates = uniform(&[3, 4], 0.1, 1.0, &mut rng);
    for mode in [BalanceMode::Importance, BalanceMode::PerToken] {
        push(
            &format!("balance_loss_{mode:?}").to_lowercase(),
            grad_check(|g, v| g.apply(BalanceLoss { mode }, &[&v[0]]), &[gates.clone()], eps)?,
        );
    }
    push("z_loss", grad_check(|g, v| g.apply(ZLoss, &[&v[0]]), &[logits], eps)?);

    let delta = uniform(&[b, l, d], 0.05, 0.8, &mut rng);
    let a = uniform(&[d, n], -1.5, -0.2, &mut rng);
    let bm = randn(&[b, l, n], &mut rng);
    let cm = randn(&[b, l, n], &mut rng);
    let skip = randn(&[d], &mut rng);
    for mode in [ScanMode::Sequential, ScanMode::Parallel] {
        let tag = format!("{mode:?}").to_lowercase();
        push(
            &format!("selective_scan_{tag}"),
            grad_check(
                |g, v| g.apply(SelectiveScan::new(mode, false), &[&v[0], &v[1], &v[2], &v[3], &v[4]]),
                &[x.clone(), delta.clone(), a.clone(), bm.clone(), cm.clone()],
                eps,
            )?,
        );
        push(
            &format!("selective_scan_{tag}_skip"),
            grad_check(
                |g, v| g.apply(SelectiveScan::new(mode, true), &[&v[0], &v[1], &v[2], &v[3], &v[4], &v[5]]),
                &[x.clone(), delta.clone(), a.clone(), bm.clone(), cm.clone(), skip.clone()],
                eps,
            )?,
        );
    }
    Ok(out)
}

fn top_two(rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::index::sample;
    let mut v = sample(rng, 4, 2).into_vec();
    v.sort_unstable();
    v
}

/// Checks of the SSM layer, one block per directionality variant, the MoE
/// layer and a tiny end-to-end model.
pub fn composite_checks(scope: Scope, seed: u64) -> Result<Vec<CheckResult>> {
    use crate::bimamba::{BiMambaBlock, BlockConfig, Directionality};
    use crate::model::{EegMamba, EegMambaConfig};
    use crate::moe::{GateMode, MoeConfig, MoeLayer};
    use crate::ssm::{ssm_forward, ScanMode, SsmParams};
    use crate::st_adaptive::{TaskSpec, TokenizerConfig};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let eps = DEFAULT_EPS;
    let mut push = |name: String, err: f64| {
        out.push(CheckResult {
            name,
            error: err,
            tolerance: COMPOSITE_TOL,
        })
    };

    if scope.includes(Scope::Ssm) {
        for mode in [ScanMode::Sequential, ScanMode::Parallel] {
            let mut store = ParamStore::new();
            let p = SsmParams::init(&mut store, "ssm", 2, 2, true, &mut rng);
            let x = randn(&[1, 4, 2], &mut rng);
            let err = grad_check_with_params(&store, |g, v| ssm_forward(g, &v[0], &p, mode), &[x], eps, usize::MAX)?;
            push(format!("ssm_{mode:?}").to_lowercase(), err);
        }
    }
    if scope.includes(Scope::Block) {
        for dir in Directionality::ALL {
            let mut store = ParamStore::new();
            let cfg = BlockConfig {
                d_state: 2,
                directionality: dir,
                ..BlockConfig::new(4)
            };
            let block = BiMambaBlock::init(&mut store, "block", &cfg, &mut rng)?;
            let x = randn(&[1, 6, 4], &mut rng);
            let err = grad_check_with_params(&store, |g, v| block.forward(g, &v[0]), &[x], eps, usize::MAX)?;
            push(format!("bimamba_block_{}", dir.variant()), err);
        }
    }
    if scope.includes(Scope::Moe) {
        let mut store = ParamStore::new();
        let cfg = MoeConfig {
            num_experts: 3,
            top_k: 2,
            d_task: 2,
            ..MoeConfig::default()
        };
        let layer = MoeLayer::init(&mut store, "moe", 4, 2, &cfg, &mut rng)?;
        let x = randn(&[3, 4], &mut rng);
        let err = grad_check_with_params(
            &store,
            |g, v| {
                let mut noise = ChaCha8Rng::seed_from_u64(seed ^ 0x9a7e);
                let o = layer.forward(g, &v[0], 1, &mut GateMode::Train(&mut noise))?;
                let s = g.sum(&o.y)?;
                let s = g.add(&s, o.balance.as_ref().unwrap())?;
                g.add(&s, o.z.as_ref().unwrap())
            },
            &[x],
            eps,
            usize::MAX,
        )?;
        push("moe_layer".into(), err);
    }
    if scope.includes(Scope::Model) {
        let task = TaskSpec {
            task_id: 0,
            name: "tiny".into(),
            channels: 2,
            num_classes: 3,
        };
        let mut cfg = EegMambaConfig::multi_task(vec![task]);
        cfg.d_model = 8;
        cfg.n_blocks = 1;
        cfg.d_state = 2;
        cfg.tokenizer = TokenizerConfig {
            spatial_kernel: 1,
            small_kernel: 4,
            small_stride: 4,
            wide_kernel: 8,
            wide_stride: 4,
        };
        cfg.moe = Some(MoeConfig {
            num_experts: 2,
            top_k: 1,
            d_task: 4,
            ..MoeConfig::default()
        });
        let (model, store) = EegMamba::build::<f64, _>(&cfg, &mut rng)?;
        let x = randn(&[2, 2, 16], &mut rng);
        let err = grad_check_with_params(
            &store,
            |g, v| {
                let mut noise = ChaCha8Rng::seed_from_u64(seed ^ 0x51de);
                let o = model.forward(g, &v[0], 0, &mut GateMode::Train(&mut noise))?;
                let ce = g.cross_entropy(&o.logits, &[0, 2])?;
                let s = g.add(&ce, o.balance.as_ref().unwrap())?;
                g.add(&s, o.z.as_ref().unwrap())
            },
            &[x],
            eps,
            8,
        )?;
        push("model_tiny".into(), err);
    }
    Ok(out)
}

/// Run the requested part of the suite.
pub fn run_suite(scope: Scope, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if scope.includes(Scope::Ops) {
        out.extend(primitive_checks(seed)?);
    }
    out.extend(composite_checks(scope, seed)?);
    Ok(out)
}
