//! Multi-task signal containers, synthetic generators and batching.
//!
//! Container layout (little-endian):
//!
//! ```text
//! "EEGD" | u32 version | u32 task_count
//! task_count × { u32 id | u32 name_len | name | u32 channels | u32 classes | f32 sampling_rate }
//! u64 sample_count
//! sample_count × { u32 task | u32 label | u32 length | f32 × channels·length (channel-major) }
//! ```

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Cursor;
use crate::error::{Error, Result};
use crate::st_adaptive::TaskSpec;
use crate::tensor::{Element, Tensor};

pub const DATASET_MAGIC: [u8; 4] = *b"EEGD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub spec: TaskSpec,
    pub sampling_rate: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub task_id: usize,
    pub label: usize,
    pub channels: usize,
    /// Channel-major `[channels, len]`.
    pub data: Vec<f32>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.data.len() / self.channels.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let l = self.len();
        &self.data[c * l..][..l]
    }
}

/// Header information for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleMeta {
    pub task_id: usize,
    pub label: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub tasks: Vec<TaskInfo>,
    pub samples: Vec<Sample>,
}

fn check_sample(tasks: &[TaskInfo], task_id: usize, label: usize, channels: Option<usize>) -> Result<()> {
    let t = tasks.get(task_id).ok_or(Error::UnknownTask(task_id))?;
    if label >= t.spec.num_classes {
        return Err(Error::Label {
            label,
            classes: t.spec.num_classes,
        });
    }
    if let Some(c) = channels {
        if c != t.spec.channels {
            return Err(Error::ChannelMismatch {
                task: task_id,
                expected: t.spec.channels,
                got: c,
            });
        }
    }
    Ok(())
}

fn check_tasks(tasks: &[TaskInfo]) -> Result<()> {
    let specs: Vec<TaskSpec> = tasks.iter().map(|t| t.spec.clone()).collect();
    crate::st_adaptive::validate_tasks(&specs)
}

impl Dataset {
    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.tasks.iter().map(|t| t.spec.clone()).collect()
    }

    pub fn meta(&self) -> Vec<SampleMeta> {
        self.samples
            .iter()
            .map(|s| SampleMeta {
                task_id: s.task_id,
                label: s.label,
                len: s.len(),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        check_tasks(&self.tasks)?;
        for s in &self.samples {
            check_sample(&self.tasks, s.task_id, s.label, Some(s.channels))?;
            if s.data.len() % s.channels.max(1) != 0 {
                return Err(Error::shape("dataset", "payload is not a whole number of frames"));
            }
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        self.validate()?;
        w.write_all(&DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.tasks.len() as u32).to_le_bytes())?;
        for t in &self.tasks {
            w.write_all(&(t.spec.task_id as u32).to_le_bytes())?;
            w.write_all(&(t.spec.name.len() as u32).to_le_bytes())?;
            w.write_all(t.spec.name.as_bytes())?;
            w.write_all(&(t.spec.channels as u32).to_le_bytes())?;
            w.write_all(&(t.spec.num_classes as u32).to_le_bytes())?;
            w.write_all(&t.sampling_rate.to_le_bytes())?;
        }
        w.write_all(&(self.samples.len() as u64).to_le_bytes())?;
        let mut buf = Vec::new();
        for s in &self.samples {
            w.write_all(&(s.task_id as u32).to_le_bytes())?;
            w.write_all(&(s.label as u32).to_le_bytes())?;
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            buf.clear();
            for v in &s.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut v = Vec::new();
        self.write(&mut v)?;
        Ok(v)
    }

    pub fn read<R: Read + Seek>(r: R) -> Result<Self> {
        let mut reader = ContainerReader::new(r)?;
        let samples = (0..reader.len()).map(|i| reader.load(i)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tasks: reader.tasks.clone(),
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

/// Indexed reader that loads payloads on demand.
pub struct ContainerReader<R> {
    inner: R,
    pub tasks: Vec<TaskInfo>,
    meta: Vec<SampleMeta>,
    offsets: Vec<u64>,
}

impl<R: Read + Seek> ContainerReader<R> {
    /// Parse the header and index every sample, skipping over payloads.
    pub fn new(mut inner: R) -> Result<Self> {
        let total = inner.seek(SeekFrom::End(0))?;
        inner.seek(SeekFrom::Start(0))?;
        let mut c = Cursor::new(&mut inner);
        c.magic(DATASET_MAGIC)?;
        c.version(DATASET_VERSION)?;
        let n_tasks = c.u32("task count")? as usize;
        let mut tasks = Vec::with_capacity(n_tasks.min(1024));
        for _ in 0..n_tasks {
            let task_id = c.u32("task id")? as usize;
            let name_len = c.u32("task name length")? as usize;
            if name_len > 4096 {
                return Err(c.fail(format!("task name length {name_len} is implausible")));
            }
            let name = c.string(name_len, "task name")?;
            let channels = c.u32("channel count")? as usize;
            let num_classes = c.u32("class count")? as usize;
            let sampling_rate = c.f32("sampling rate")?;
            tasks.push(TaskInfo {
                spec: TaskSpec {
                    task_id,
                    name,
                    channels,
                    num_classes,
                },
                sampling_rate,
            });
        }
        let at = c.offset;
        check_tasks(&tasks).map_err(|e| Error::Format {
            offset: at,
            msg: e.to_string(),
        })?;
        let count = c.u64("sample count")?;
        let mut offset = c.offset;
        drop(c);

        let mut meta = Vec::new();
        let mut offsets = Vec::new();
        let mut head = [0u8; 12];
        for i in 0..count {
            if total.saturating_sub(offset) < 12 {
                return Err(Error::Format {
                    offset,
                    msg: format!("truncated header of sample {i}"),
                });
            }
            inner.read_exact(&mut head)?;
            let task_id = u32::from_le_bytes(head[0..4].try_into().unwrap()) as usize;
            let label = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
            let len = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
            check_sample(&tasks, task_id, label, None).map_err(|e| Error::Format {
                offset,
                msg: format!("sample {i}: {e}"),
            })?;
            let payload = (tasks[task_id].spec.channels * len * 4) as u64;
            let start = offset + 12;
            if total.saturating_sub(start) < payload {
                return Err(Error::Format {
                    offset: start,
                    msg: format!("truncated payload of sample {i}: needs {payload} bytes"),
                });
            }
            meta.push(SampleMeta { task_id, label, len });
            offsets.push(start);
            offset = start + payload;
            inner.seek(SeekFrom::Start(offset))?;
        }
        if offset != total {
            return Err(Error::Format {
                offset,
                msg: format!("{} trailing bytes after last sample", total - offset),
            });
        }
        Ok(Self {
            inner,
            tasks,
            meta,
            offsets,
        })
    }

    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.tasks.iter().map(|t| t.spec.clone()).collect()
    }
}

/// Random access to samples by index.
pub trait SampleSource {
    fn meta(&self) -> &[SampleMeta];
    fn load(&mut self, index: usize) -> Result<Sample>;

    fn len(&self) -> usize {
        self.meta().len()
    }

    fn is_empty(&self) -> bool {
        self.meta().is_empty()
    }
}

impl<R: Read + Seek> SampleSource for ContainerReader<R> {
    fn meta(&self) -> &[SampleMeta] {
        &self.meta
    }

    fn load(&mut self, index: usize) -> Result<Sample> {
        let m = self.meta[index];
        let channels = self.tasks[m.task_id].spec.channels;
        self.inner.seek(SeekFrom::Start(self.offsets[index]))?;
        let mut raw = vec![0u8; channels * m.len * 4];
        self.inner.read_exact(&mut raw)?;
        Ok(Sample {
            task_id: m.task_id,
            label: m.label,
            channels,
            data: raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
        })
    }
}

/// In-memory source; `meta` is cached at construction.
pub struct MemorySource<'a> {
    data: &'a Dataset,
    meta: Vec<SampleMeta>,
}

impl<'a> MemorySource<'a> {
    pub fn new(data: &'a Dataset) -> Self {
        Self {
            meta: data.meta(),
            data,
        }
    }
}

impl SampleSource for MemorySource<'_> {
    fn meta(&self) -> &[SampleMeta] {
        &self.meta
    }

    fn load(&mut self, index: usize) -> Result<Sample> {
        Ok(self.data.samples[index].clone())
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Each class is a sinusoid at its own frequency (Hz).
    SinusoidFrequency,
    /// A shared latent source mixed into channels with a class-specific
    /// sign pattern (Walsh row index).
    ChannelCorrelation,
    /// A fixed carrier gated by periodic bursts at a class-specific rate (Hz).
    EnvelopeBurst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskConfig {
    pub name: String,
    pub channels: usize,
    pub classes: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub kind: GeneratorKind,
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default = "default_rate")]
    pub sampling_rate: f64,
    /// One generating parameter per class; defaults depend on `kind`.
    #[serde(default)]
    pub class_params: Option<Vec<f64>>,
}

fn default_rate() -> f64 {
    128.0
}

pub const BURST_CARRIER_HZ: f64 = 24.0;

impl SyntheticTaskConfig {
    pub fn new(name: &str, channels: usize, classes: usize, kind: GeneratorKind, seed: u64) -> Self {
        Self {
            name: name.into(),
            channels,
            classes,
            min_len: 256,
            max_len: 2048,
            kind,
            noise_std: 0.3,
            seed,
            sampling_rate: default_rate(),
            class_params: None,
        }
    }

    /// Generating parameter of every class.
    pub fn params(&self) -> Vec<f64> {
        if let Some(p) = &self.class_params {
            return p.clone();
        }
        (0..self.classes)
            .map(|c| match self.kind {
                GeneratorKind::SinusoidFrequency => 5.0 + 7.0 * c as f64,
                GeneratorKind::ChannelCorrelation => (c + 1) as f64,
                GeneratorKind::EnvelopeBurst => 1.0 + 2.0 * c as f64,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("task {:?}: {m}", self.name)));
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.classes < 2 {
            return bad("at least two classes are required".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("invalid length range [{}, {}]", self.min_len, self.max_len));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be finite and non-negative, got {}", self.noise_std));
        }
        if !(self.sampling_rate > 0.0) {
            return bad("sampling_rate must be positive".into());
        }
        let p = self.params();
        if p.len() != self.classes {
            return bad(format!("{} class parameters for {} classes", p.len(), self.classes));
        }
        let nyquist = self.sampling_rate / 2.0;
        match self.kind {
            GeneratorKind::SinusoidFrequency | GeneratorKind::EnvelopeBurst => {
                for &v in &p {
                    if !(v > 0.0 && v < nyquist) {
                        return bad(format!("class parameter {v} Hz outside (0, {nyquist})"));
                    }
                }
            }
            GeneratorKind::ChannelCorrelation => {
                if self.channels < 2 {
                    return bad("channel-correlation needs at least two channels".into());
                }
                let pats: Vec<Vec<f64>> = p.iter().map(|&r| self.sign_pattern(r)).collect::<Result<_>>()?;
                for i in 0..pats.len() {
                    for j in 0..i {
                        let same = pats[i] == pats[j];
                        let neg = pats[i].iter().zip(&pats[j]).all(|(a, b)| *a == -*b);
                        if same || neg {
                            return bad(format!("classes {j} and {i} share a mixing pattern"));
                        }
                    }
                    if pats[i].iter().all(|&s| s == pats[i][0]) {
                        return bad(format!("class {i} mixing pattern is uniform"));
                    }
                }
            }
        }
        for i in 0..p.len() {
            for j in 0..i {
                if (p[i] - p[j]).abs() < 1e-9 {
                    return bad(format!("classes {j} and {i} share parameter {}", p[i]));
                }
            }
        }
        Ok(())
    }

    /// `±1` mixing pattern for Walsh row `row` over this task's channels.
    pub fn sign_pattern(&self, row: f64) -> Result<Vec<f64>> {
        if row < 1.0 || row.fract() != 0.0 {
            return Err(Error::Config(format!("Walsh row must be a positive integer, got {row}")));
        }
        let r = row as usize;
        Ok((0..self.channels)
            .map(|i| if (i & r).count_ones() % 2 == 0 { 1.0 } else { -1.0 })
            .collect())
    }

    fn generate_one<R: Rng + ?Sized>(&self, label: usize, len: usize, params: &[f64], rng: &mut R) -> Vec<f32> {
        let fs = self.sampling_rate;
        let c = self.channels;
        let noise = Normal::new(0.0, self.noise_std.max(0.0)).unwrap();
        let mut out = vec![0f32; c * len];
        let p = params[label];
        match self.kind {
            GeneratorKind::SinusoidFrequency => {
                for ch in 0..c {
                    let phase = rng.random_range(0.0..2.0 * PI);
                    let amp = rng.random_range(0.8..1.2);
                    for t in 0..len {
                        let v = amp * (2.0 * PI * p * t as f64 / fs + phase).sin();
                        out[ch * len + t] = v as f32;
                    }
                }
            }
            GeneratorKind::ChannelCorrelation => {
                let pattern = self.sign_pattern(p).expect("validated");
                // Latent source: a few random low-frequency components.
                let comps: Vec<(f64, f64, f64)> = (0..4)
                    .map(|_| {
                        (
                            rng.random_range(2.0..20.0),
                            rng.random_range(0.0..2.0 * PI),
                            rng.random_range(0.5..1.0),
                        )
                    })
                    .collect();
                let norm = comps.iter().map(|c| c.2 * c.2 / 2.0).sum::<f64>().sqrt();
                for t in 0..len {
                    let tt = t as f64 / fs;
                    let z: f64 = comps.iter().map(|&(f, ph, a)| a * (2.0 * PI * f * tt + ph).sin()).sum::<f64>() / norm;
                    for ch in 0..c {
                        out[ch * len + t] = (pattern[ch] * z) as f32;
                    }
                }
            }
            GeneratorKind::EnvelopeBurst => {
                let phase = rng.random_range(0.0..2.0 * PI);
                for ch in 0..c {
                    let carrier_phase = rng.random_range(0.0..2.0 * PI);
                    for t in 0..len {
                        let tt = t as f64 / fs;
                        let env = (0.5 + 0.5 * (2.0 * PI * p * tt + phase).cos()).powi(4);
                        let v = 2.0 * env * (2.0 * PI * BURST_CARRIER_HZ * tt + carrier_phase).sin();
                        out[ch * len + t] = v as f32;
                    }
                }
            }
        }
        if self.noise_std > 0.0 {
            for v in out.iter_mut() {
                *v += noise.sample(rng) as f32;
            }
        }
        out
    }
}

/// Generate `n_per_class` samples of every class of every task. Task ids
/// follow the order of `configs`; sample order is task, then round, then
/// class.
pub fn generate_synthetic(configs: &[SyntheticTaskConfig], n_per_class: usize) -> Result<Dataset> {
    if configs.is_empty() {
        return Err(Error::Config("no synthetic tasks configured".into()));
    }
    let mut ds = Dataset::default();
    for (task_id, cfg) in configs.iter().enumerate() {
        cfg.validate()?;
        ds.tasks.push(TaskInfo {
            spec: TaskSpec {
                task_id,
                name: cfg.name.clone(),
                channels: cfg.channels,
                num_classes: cfg.classes,
            },
            sampling_rate: cfg.sampling_rate as f32,
        });
        let params = cfg.params();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..n_per_class {
            for label in 0..cfg.classes {
                let len = rng.random_range(cfg.min_len..=cfg.max_len);
                let data = cfg.generate_one(label, len, &params, &mut rng);
                ds.samples.push(Sample {
                    task_id,
                    label,
                    channels: cfg.channels,
                    data,
                });
            }
        }
    }
    Ok(ds)
}

/// Four tasks with 1, 4, 8 and 22 channels and 2, 3, 2 and 4 classes.
pub fn default_suite(seed: u64) -> Vec<SyntheticTaskConfig> {
    vec![
        SyntheticTaskConfig::new("sine-1ch", 1, 2, GeneratorKind::SinusoidFrequency, seed),
        SyntheticTaskConfig::new("corr-4ch", 4, 3, GeneratorKind::ChannelCorrelation, seed.wrapping_add(1)),
        SyntheticTaskConfig::new("burst-8ch", 8, 2, GeneratorKind::EnvelopeBurst, seed.wrapping_add(2)),
        SyntheticTaskConfig::new("sine-22ch", 22, 4, GeneratorKind::SinusoidFrequency, seed.wrapping_add(3)),
    ]
}

// ---------------------------------------------------------------------------
// Split and batching

/// Stratified split by `(task, class)`: within each group a shuffled
/// `train_fraction` share goes to training, the rest to evaluation. Groups
/// of two or more samples keep at least one of each.
pub fn stratified_split(meta: &[SampleMeta], train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let mut groups: std::collections::BTreeMap<(usize, usize), Vec<usize>> = Default::default();
    for (i, m) in meta.iter().enumerate() {
        groups.entry((m.task_id, m.label)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (_, mut idx) in groups {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let mut k = (n as f64 * train_fraction).round() as usize;
        if n >= 2 {
            k = k.clamp(1, n - 1);
        }
        train.extend_from_slice(&idx[..k]);
        eval.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    Ok((train, eval))
}

/// Sample indices of one task-homogeneous batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub task_id: usize,
    pub indices: Vec<usize>,
}

/// Shuffle each task's samples, cut them into batches, then interleave the
/// tasks round-robin until every batch is used.
pub fn plan_epoch<R: Rng + ?Sized>(
    meta: &[SampleMeta],
    subset: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<BatchPlan>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let n_tasks = subset.iter().map(|&i| meta[i].task_id + 1).max().unwrap_or(0);
    let mut per_task: Vec<Vec<usize>> = vec![Vec::new(); n_tasks];
    for &i in subset {
        per_task[meta[i].task_id].push(i);
    }
    let mut queues: Vec<std::collections::VecDeque<Vec<usize>>> = per_task
        .into_iter()
        .map(|mut v| {
            v.shuffle(rng);
            v.chunks(batch_size).map(|c| c.to_vec()).collect()
        })
        .collect();
    let mut plans = Vec::new();
    loop {
        let mut any = false;
        for (t, q) in queues.iter_mut().enumerate() {
            if let Some(indices) = q.pop_front() {
                plans.push(BatchPlan { task_id: t, indices });
                any = true;
            }
        }
        if !any {
            break;
        }
    }
    Ok(plans)
}

#[derive(Clone, Debug)]
pub struct Batch<E: Element> {
    pub task_id: usize,
    /// `[B, C_i, L]`, cropped to the shortest member.
    pub x: Tensor<E>,
    pub labels: Vec<usize>,
}

/// Crop every sample to the shortest length in the group, each at a random
/// offset, and stack.
pub fn collate<E: Element, R: Rng + ?Sized>(samples: &[Sample], rng: &mut R) -> Result<Batch<E>> {
    let first = samples.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let (task_id, channels) = (first.task_id, first.channels);
    let len = samples.iter().map(Sample::len).min().unwrap();
    let mut data = Vec::with_capacity(samples.len() * channels * len);
    for s in samples {
        if s.task_id != task_id {
            return Err(Error::Config("mixed-task batch".into()));
        }
        let off = if s.len() > len { rng.random_range(0..=s.len() - len) } else { 0 };
        for c in 0..channels {
            data.extend(s.channel(c)[off..off + len].iter().map(|&v| E::of(v as f64)));
        }
    }
    Ok(Batch {
        task_id,
        x: Tensor::new([samples.len(), channels, len], data)?,
        labels: samples.iter().map(|s| s.label).collect(),
    })
}

/// Load and collate one planned batch.
pub fn load_batch<E: Element, S: SampleSource + ?Sized, R: Rng + ?Sized>(
    source: &mut S,
    plan: &BatchPlan,
    rng: &mut R,
) -> Result<Batch<E>> {
    let samples = plan.indices.iter().map(|&i| source.load(i)).collect::<Result<Vec<_>>>()?;
    collate(&samples, rng)
}

/// One epoch of batches over `subset`, loading payloads one batch at a time.
pub fn iterate_batches<'s, E: Element, S: SampleSource + ?Sized>(
    source: &'s mut S,
    subset: &[usize],
    batch_size: usize,
    rng: &'s mut ChaCha8Rng,
) -> Result<impl Iterator<Item = Result<Batch<E>>> + 's> {
    let plans = plan_epoch(source.meta(), subset, batch_size, rng)?;
    Ok(plans.into_iter().map(move |p| load_batch(source, &p, rng)))
}
