//! Joint multi-task training, evaluation and run bookkeeping.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Tape};
use crate::checkpoint::{arrays_to_tensors, read_container, save_checkpoint, write_container, NamedArray, STATE_MAGIC};
use crate::dataset::{load_batch, plan_epoch, stratified_split, Batch, Sample, SampleSource};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, argmax, macro_auc, macro_f1};
use crate::model::EegMamba;
use crate::moe::{activation_stats, ActivationStats, GateDecision, GateMode};
use crate::ops::{softmax_in_place, GraphExt};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the auxiliary router losses; `None` takes the model's value.
    pub aux_weight: Option<f64>,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub train_fraction: f64,
    /// Evaluate every this many epochs (and always after the last).
    pub eval_every: usize,
    pub eval_mode: EvalMode,
}

/// How a variable-length sample is presented at evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Split into non-overlapping windows as long as the task's shortest
    /// sample and average the class probabilities. Training batches are
    /// cropped to their shortest member, so this matches the lengths the
    /// model is trained on.
    #[default]
    Windowed,
    /// One forward pass over the whole sample.
    Full,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 2e-4,
            aux_weight: None,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            train_fraction: 0.8,
            eval_every: 1,
            eval_mode: EvalMode::default(),
        }
    }
}

impl TrainConfig {
    /// Single-task schedule: 200 epochs.
    pub fn single_task() -> Self {
        Self {
            epochs: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if let Some(w) = self.aux_weight {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("aux_weight must be finite and non-negative, got {w}")));
            }
        }
        Ok(())
    }

    pub fn aux_weight_for(&self, model: &EegMamba) -> f64 {
        self.aux_weight
            .or_else(|| model.cfg.moe.as_ref().map(|m| m.aux_weight))
            .unwrap_or(0.0)
    }
}

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam<E: Element> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(store: &ParamStore<E>, cfg: &TrainConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<E>, grads: Vec<(crate::autograd::ParamId, Tensor<E>)>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (E::of(self.beta1), E::of(self.beta2));
        let c1 = E::of(1.0 - self.beta1.powi(t));
        let c2 = E::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (E::of(self.lr), E::of(self.eps));
        for (id, g) in grads {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = b1 * *mv + (E::one() - b1) * gv;
                *vv = b2 * *vv + (E::one() - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub ce: f64,
    pub balance: f64,
    pub z: f64,
    pub total: f64,
}

/// One forward/backward/update on a task-homogeneous batch.
pub fn train_step<E: Element>(
    model: &EegMamba,
    store: &mut ParamStore<E>,
    opt: &mut Adam<E>,
    batch: &Batch<E>,
    aux_weight: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    let (losses, grads) = {
        let mut g = Tape::new(store);
        let x = g.constant(batch.x.clone());
        let out = model.forward(&mut g, &x, batch.task_id, &mut GateMode::Train(rng))?;
        let ce = g.cross_entropy(&out.logits, &batch.labels)?;
        let mut losses = StepLosses {
            ce: g.value(&ce).data()[0].f64(),
            ..Default::default()
        };
        let mut total = ce;
        if let Some(b) = &out.balance {
            losses.balance = g.value(b).data()[0].f64();
        }
        if let Some(z) = &out.z {
            losses.z = g.value(z).data()[0].f64();
        }
        if aux_weight != 0.0 {
            for a in out.balance.iter().chain(&out.z) {
                let s = g.affine(a, aux_weight, 0.0)?;
                total = g.add(&total, &s)?;
            }
        }
        losses.total = g.value(&total).data()[0].f64();
        for (name, v) in [("ce", losses.ce), ("balance", losses.balance), ("z", losses.z), ("total", losses.total)] {
            if !v.is_finite() {
                return Err(Error::Diverged {
                    loss: name,
                    task: batch.task_id,
                });
            }
        }
        let grads = g.backward(total)?;
        (losses, grads.into_params())
    };
    opt.update(store, grads);
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_id: usize,
    pub name: String,
    pub samples: usize,
    pub accuracy: f64,
    /// `None` when no class pair is present.
    pub auc: Option<f64>,
    pub f1: f64,
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub tasks: Vec<TaskMetrics>,
    pub activation: Option<ActivationStats>,
}

impl MetricsReport {
    /// Mean accuracy over tasks that have evaluation samples.
    pub fn mean_accuracy(&self) -> f64 {
        let v: Vec<f64> = self.tasks.iter().filter(|t| t.samples > 0).map(|t| t.accuracy).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

/// Class probabilities of one sample, averaged over non-overlapping centred
/// windows of length `window` (clamped to the sample length).
pub fn sample_probabilities<E: Element>(
    model: &EegMamba,
    store: &ParamStore<E>,
    s: &Sample,
    window: usize,
) -> Result<(Vec<f64>, Vec<GateDecision>)> {
    let len = s.len();
    let w = window.min(len).max(1);
    let n = len / w;
    let start = (len - n * w) / 2;
    let mut data = Vec::with_capacity(n * s.channels * w);
    for k in 0..n {
        for c in 0..s.channels {
            data.extend(s.channel(c)[start + k * w..][..w].iter().map(|&v| E::of(v as f64)));
        }
    }
    let x = Tensor::new([n, s.channels, w], data)?;
    let (logits, dec) = model.predict(store, &x, s.task_id)?;
    let classes = logits.shape()[1];
    let mut p = vec![0.0; classes];
    for row in logits.to_f64_vec().chunks(classes) {
        let mut r = row.to_vec();
        softmax_in_place(&mut r);
        for (a, b) in p.iter_mut().zip(&r) {
            *a += b / n as f64;
        }
    }
    Ok((p, dec))
}

/// Deterministic evaluation of every sample in `subset`.
pub fn evaluate<E: Element, S: SampleSource + ?Sized>(
    model: &EegMamba,
    store: &ParamStore<E>,
    source: &mut S,
    subset: &[usize],
    mode: EvalMode,
) -> Result<MetricsReport> {
    let n_tasks = model.num_tasks();
    let mut window = vec![usize::MAX; n_tasks];
    for m in source.meta() {
        if let Some(w) = window.get_mut(m.task_id) {
            *w = (*w).min(m.len);
        }
    }
    let mut probs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_tasks];
    let mut labels: Vec<Vec<usize>> = vec![Vec::new(); n_tasks];
    let mut decisions: Vec<(usize, GateDecision)> = Vec::new();
    for &i in subset {
        let s = source.load(i)?;
        model.task(s.task_id)?;
        let w = match mode {
            EvalMode::Full => s.len(),
            EvalMode::Windowed => window[s.task_id],
        };
        let (p, dec) = sample_probabilities(model, store, &s, w)?;
        probs[s.task_id].push(p);
        labels[s.task_id].push(s.label);
        decisions.extend(dec.into_iter().filter(|d| !d.selected.is_empty()).map(|d| (s.task_id, d)));
    }
    let mut tasks = Vec::new();
    for (t, spec) in model.cfg.tasks.iter().enumerate() {
        let preds: Vec<usize> = probs[t].iter().map(|p| argmax(p)).collect();
        let (auc, skipped) = macro_auc(&probs[t], &labels[t], spec.num_classes);
        if !skipped.is_empty() && !labels[t].is_empty() {
            log::warn!("task {t}: classes {skipped:?} absent from evaluation split; AUC skips them");
        }
        tasks.push(TaskMetrics {
            task_id: t,
            name: spec.name.clone(),
            samples: labels[t].len(),
            accuracy: accuracy(&preds, &labels[t]),
            auc,
            f1: macro_f1(&preds, &labels[t], spec.num_classes),
        });
    }
    let activation = match model.cfg.moe.as_ref() {
        Some(m) if m.use_task_experts && !decisions.is_empty() => {
            Some(activation_stats(decisions.iter().map(|(t, d)| (*t, d)), n_tasks, m.num_experts)?)
        }
        _ => None,
    };
    Ok(MetricsReport { tasks, activation })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_ce: f64,
    pub train_balance: f64,
    pub train_z: f64,
    pub train_total: f64,
    /// Present on evaluated epochs.
    pub eval: Option<Vec<TaskMetrics>>,
    pub mean_accuracy: Option<f64>,
}

/// Epoch-level random stream: the run seed selects the key, the epoch the
/// stream, so an epoch replays identically after a resume.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

pub struct TrainOutcome<E: Element> {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_store: ParamStore<E>,
    pub final_report: Option<MetricsReport>,
    pub train_indices: Vec<usize>,
    pub eval_indices: Vec<usize>,
}

pub const LAST_CHECKPOINT: &str = "last.egmb";
pub const BEST_CHECKPOINT: &str = "best.egmb";
pub const STATE_FILE: &str = "state.egms";
pub const HISTORY_CSV: &str = "history.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const ACTIVATION_CSV: &str = "expert_activation.csv";

#[derive(Serialize, Deserialize)]
struct StateMeta {
    next_epoch: usize,
    adam_step: u64,
    best_epoch: Option<usize>,
    best_accuracy: f64,
    train: TrainConfig,
}

fn save_state<E: Element>(dir: &Path, opt: &Adam<E>, store: &ParamStore<E>, meta: &StateMeta, history: &[EpochRecord]) -> Result<()> {
    let mut arrays = Vec::new();
    for (id, name, _) in store.iter() {
        for (prefix, t) in [("m", &opt.m[id.0]), ("v", &opt.v[id.0])] {
            arrays.push(NamedArray {
                name: format!("{prefix}.{name}"),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.f64() as f32).collect(),
            });
        }
    }
    let meta = serde_json::json!({ "state": meta, "history": history }).to_string();
    let tmp = dir.join(format!("{STATE_FILE}.tmp"));
    write_container(BufWriter::new(File::create(&tmp)?), STATE_MAGIC, &meta, &arrays)?;
    fs::rename(tmp, dir.join(STATE_FILE))?;
    Ok(())
}

#[derive(Deserialize)]
struct StateFile {
    state: StateMeta,
    history: Vec<EpochRecord>,
}

pub fn write_history_csv<W: Write>(mut w: W, history: &[EpochRecord]) -> Result<()> {
    writeln!(w, "epoch,train_total,train_ce,train_balance,train_z,mean_accuracy")?;
    for r in history {
        let acc = r.mean_accuracy.map(|a| a.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.epoch, r.train_total, r.train_ce, r.train_balance, r.train_z, acc
        )?;
    }
    Ok(())
}

pub fn write_metrics_csv<W: Write>(mut w: W, history: &[EpochRecord]) -> Result<()> {
    writeln!(w, "epoch,task_id,task,samples,accuracy,auc,f1")?;
    for r in history {
        for t in r.eval.iter().flatten() {
            let auc = t.auc.map(|a| a.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{},{},{},{}", r.epoch, t.task_id, t.name, t.samples, t.accuracy, auc, t.f1)?;
        }
    }
    Ok(())
}

/// Train with best-checkpoint selection by mean evaluation accuracy.
///
/// With `out_dir`, the last and best checkpoints, optimizer state and CSV
/// history are written after every epoch, and an existing state file in the
/// directory is resumed from. A resumed run may raise `epochs`; every other
/// setting must match.
pub fn run_training<E: Element, S: SampleSource + ?Sized>(
    cfg: &TrainConfig,
    model: &EegMamba,
    store: &mut ParamStore<E>,
    source: &mut S,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<E>> {
    cfg.validate()?;
    let meta = source.meta().to_vec();
    for m in &meta {
        let spec = model.task(m.task_id)?;
        if m.label >= spec.num_classes {
            return Err(Error::Label {
                label: m.label,
                classes: spec.num_classes,
            });
        }
    }
    let (train_idx, eval_idx) = stratified_split(&meta, cfg.train_fraction, cfg.seed)?;
    let aux_weight = cfg.aux_weight_for(model);
    let mut opt = Adam::new(store, cfg);
    let mut history = Vec::new();
    let mut start = 0;
    let mut best_epoch = None;
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_store = store.clone();

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let state_path = dir.join(STATE_FILE);
        if state_path.exists() {
            let (meta_json, arrays) = read_container(BufReader::new(File::open(&state_path)?), STATE_MAGIC)?;
            let st: StateFile = serde_json::from_str(&meta_json)?;
            let same = TrainConfig {
                epochs: cfg.epochs,
                ..st.state.train.clone()
            } == *cfg;
            if !same {
                return Err(Error::ConfigMismatch("saved training state was produced with a different training config".into()));
            }
            let (ck_model, ck_store) = crate::checkpoint::load_checkpoint::<E>(&dir.join(LAST_CHECKPOINT))?;
            if ck_model.cfg != model.cfg {
                return Err(Error::ConfigMismatch("saved checkpoint has a different model config".into()));
            }
            *store = ck_store;
            let tensors = arrays_to_tensors::<E>(&arrays)?;
            for (name, t) in tensors {
                let (kind, pname) = name.split_once('.').ok_or_else(|| Error::Config(format!("bad state entry {name}")))?;
                let id = store
                    .id_of(pname)
                    .ok_or_else(|| Error::ConfigMismatch(format!("state entry for unknown parameter {pname}")))?;
                match kind {
                    "m" => opt.m[id.0] = t,
                    "v" => opt.v[id.0] = t,
                    _ => return Err(Error::Config(format!("bad state entry {name}"))),
                }
            }
            opt.step = st.state.adam_step;
            start = st.state.next_epoch;
            best_epoch = st.state.best_epoch;
            best_acc = st.state.best_accuracy;
            history = st.history;
            if dir.join(BEST_CHECKPOINT).exists() {
                let (_, bs) = crate::checkpoint::load_checkpoint::<E>(&dir.join(BEST_CHECKPOINT))?;
                best_store = bs;
            }
            log::info!("resuming at epoch {start}");
        }
    }

    let mut final_report = None;
    for epoch in start..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let plans = plan_epoch(&meta, &train_idx, cfg.batch_size, &mut rng)?;
        let mut sums = StepLosses::default();
        let mut weight = 0usize;
        for plan in &plans {
            let batch: Batch<E> = load_batch(source, plan, &mut rng)?;
            let l = train_step(model, store, &mut opt, &batch, aux_weight, &mut rng)?;
            let n = batch.labels.len();
            sums.ce += l.ce * n as f64;
            sums.balance += l.balance * n as f64;
            sums.z += l.z * n as f64;
            sums.total += l.total * n as f64;
            weight += n;
        }
        let w = weight.max(1) as f64;
        let mut rec = EpochRecord {
            epoch,
            train_ce: sums.ce / w,
            train_balance: sums.balance / w,
            train_z: sums.z / w,
            train_total: sums.total / w,
            eval: None,
            mean_accuracy: None,
        };
        let last = epoch + 1 == cfg.epochs;
        if !eval_idx.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || last) {
            let report = evaluate(model, store, source, &eval_idx, cfg.eval_mode)?;
            let acc = report.mean_accuracy();
            rec.mean_accuracy = Some(acc);
            rec.eval = Some(report.tasks.clone());
            if acc > best_acc {
                best_acc = acc;
                best_epoch = Some(epoch);
                best_store = store.clone();
                if let Some(dir) = out_dir {
                    save_checkpoint(&dir.join(BEST_CHECKPOINT), &model.cfg, store)?;
                }
            }
            if last {
                final_report = Some(report);
            }
        }
        log::info!(
            "epoch {epoch}: loss {:.4} (ce {:.4}, balance {:.4}, z {:.4}) acc {}",
            rec.train_total,
            rec.train_ce,
            rec.train_balance,
            rec.train_z,
            rec.mean_accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into())
        );
        history.push(rec);
        if let Some(dir) = out_dir {
            save_checkpoint(&dir.join(LAST_CHECKPOINT), &model.cfg, store)?;
            let meta = StateMeta {
                next_epoch: epoch + 1,
                adam_step: opt.step,
                best_epoch,
                best_accuracy: best_acc,
                train: cfg.clone(),
            };
            save_state(dir, &opt, store, &meta, &history)?;
            write_history_csv(BufWriter::new(File::create(dir.join(HISTORY_CSV))?), &history)?;
            write_metrics_csv(BufWriter::new(File::create(dir.join(METRICS_CSV))?), &history)?;
            if let Some(act) = final_report.as_ref().and_then(|r| r.activation.as_ref()) {
                act.write_csv(BufWriter::new(File::create(dir.join(ACTIVATION_CSV))?))?;
            }
        }
    }
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_store,
        final_report,
        train_indices: train_idx,
        eval_indices: eval_idx,
    })
}

/// Paths of the files a run directory holds.
pub fn run_files(dir: &Path) -> [PathBuf; 5] {
    [
        dir.join(LAST_CHECKPOINT),
        dir.join(BEST_CHECKPOINT),
        dir.join(STATE_FILE),
        dir.join(HISTORY_CSV),
        dir.join(METRICS_CSV),
    ]
}
