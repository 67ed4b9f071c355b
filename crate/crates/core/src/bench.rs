//! Memory and latency scaling of a BiMamba stack against a naive attention
//! stack over sequence length.
//!
//! Peak memory is read from [`CountingAllocator`], which the measuring
//! binary must install as its global allocator.

use std::alloc::{GlobalAlloc, Layout, System};
use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Eval, Graph, ParamStore};
use crate::bimamba::{BiMambaBlock, BlockConfig};
use crate::error::{Error, Result};
use crate::nn::{LayerNormParams, LinearParams, Mlp};
use crate::ops::GraphExt;
use crate::ssm::ScanMode;
use crate::tensor::Tensor;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static LIMIT: AtomicUsize = AtomicUsize::new(usize::MAX);
static INSTALLED: AtomicBool = AtomicBool::new(false);

/// System allocator wrapper tracking live and peak bytes. An optional limit
/// makes allocations beyond it fail (observable through `try_reserve`).
pub struct CountingAllocator;

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let size = layout.size();
        let now = CURRENT.fetch_add(size, Ordering::Relaxed) + size;
        if now > LIMIT.load(Ordering::Relaxed) {
            CURRENT.fetch_sub(size, Ordering::Relaxed);
            return std::ptr::null_mut();
        }
        let p = unsafe { System.alloc(layout) };
        if p.is_null() {
            CURRENT.fetch_sub(size, Ordering::Relaxed);
        } else {
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let old = layout.size();
        if new_size > old {
            let grow = new_size - old;
            let now = CURRENT.fetch_add(grow, Ordering::Relaxed) + grow;
            if now > LIMIT.load(Ordering::Relaxed) {
                CURRENT.fetch_sub(grow, Ordering::Relaxed);
                return std::ptr::null_mut();
            }
            let p = unsafe { System.realloc(ptr, layout, new_size) };
            if p.is_null() {
                CURRENT.fetch_sub(grow, Ordering::Relaxed);
            } else {
                PEAK.fetch_max(now, Ordering::Relaxed);
            }
            p
        } else {
            let p = unsafe { System.realloc(ptr, layout, new_size) };
            if !p.is_null() {
                CURRENT.fetch_sub(old - new_size, Ordering::Relaxed);
            }
            p
        }
    }
}

pub fn allocator_installed() -> bool {
    INSTALLED.load(Ordering::Relaxed)
}

pub fn current_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

/// Restart peak tracking from the current live size.
pub fn reset_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
}

pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

/// Cap live bytes; `None` removes the cap.
pub fn set_limit(limit: Option<usize>) {
    LIMIT.store(limit.unwrap_or(usize::MAX), Ordering::Relaxed);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Bimamba,
    NaiveAttention,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Bimamba => "bimamba",
            ModelKind::NaiveAttention => "naive-attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "bimamba" | "mamba" => Ok(ModelKind::Bimamba),
            "attention" | "naive-attention" | "attn" => Ok(ModelKind::NaiveAttention),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Single-head attention followed by an MLP, both pre-norm residual. The
/// full `[B, L, L]` score matrix is materialized.
#[derive(Clone, Debug)]
pub struct NaiveAttentionBlock {
    pub norm1: LayerNormParams,
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub out: LinearParams,
    pub norm2: LayerNormParams,
    pub mlp: Mlp,
    pub d_model: usize,
}

impl NaiveAttentionBlock {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore<f32>, prefix: &str, d_model: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            norm1: LayerNormParams::init(store, &format!("{prefix}.norm1"), d_model),
            q: LinearParams::init(store, &format!("{prefix}.q"), d_model, d_model, true, rng),
            k: LinearParams::init(store, &format!("{prefix}.k"), d_model, d_model, true, rng),
            v: LinearParams::init(store, &format!("{prefix}.v"), d_model, d_model, true, rng),
            out: LinearParams::init(store, &format!("{prefix}.out"), d_model, d_model, true, rng),
            norm2: LayerNormParams::init(store, &format!("{prefix}.norm2"), d_model),
            mlp: Mlp::init(store, &format!("{prefix}.mlp"), d_model, hidden, rng),
            d_model,
        }
    }

    pub fn forward<G: Graph<f32>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let h = self.norm1.forward(g, x)?;
        let q = self.q.forward(g, &h)?;
        let k = self.k.forward(g, &h)?;
        let v = self.v.forward(g, &h)?;
        let scores = g.batch_matmul(&q, &k, true, 1.0 / (self.d_model as f64).sqrt())?;
        let probs = g.softmax(&scores, 2)?;
        drop(scores);
        let ctx = g.batch_matmul(&probs, &v, false, 1.0)?;
        drop(probs);
        let a = self.out.forward(g, &ctx)?;
        let x = g.add(x, &a)?;
        let h = self.norm2.forward(g, &x)?;
        let m = self.mlp.forward(g, &h)?;
        g.add(&x, &m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub d_state: usize,
    pub batch: usize,
    pub lengths: Vec<usize>,
    pub kinds: Vec<ModelKind>,
    pub repeats: usize,
    pub warmup: usize,
    pub scan: ScanMode,
    pub seed: u64,
    /// Fail allocations once live bytes grow this far above the level at
    /// the start of a length's measurement. Only fallible reservations (the
    /// attention score buffers) turn into OOM rows; anything else aborts.
    pub memory_limit: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_blocks: 2,
            d_state: 16,
            batch: 1,
            lengths: vec![512, 1024, 2048, 4096, 8192, 16384],
            kinds: vec![ModelKind::Bimamba, ModelKind::NaiveAttention],
            repeats: 3,
            warmup: 1,
            scan: ScanMode::Sequential,
            seed: 0,
            memory_limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub peak_bytes: usize,
    pub latency_ms_median: f64,
    pub latency_ms_min: f64,
    pub latency_ms_max: f64,
    pub tokens_per_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kind: ModelKind,
    pub len: usize,
    /// `None` when the forward pass ran out of memory.
    pub result: Option<Measurement>,
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    pub batch: usize,
    pub d_model: usize,
}

pub const CSV_HEADER: &str = "model_kind,L,peak_bytes,latency_ms_median,latency_ms_min,latency_ms_max,threads";

pub fn thread_count() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Size the global worker pool. Has no effect without the `parallel`
/// feature; fails if the pool was already built.
pub fn set_threads(n: usize) -> Result<()> {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        Ok(())
    }
}

enum Stack {
    Mamba(Vec<BiMambaBlock>),
    Attention(Vec<NaiveAttentionBlock>),
}

impl Stack {
    fn forward(&self, store: &ParamStore<f32>, x: &Tensor<f32>) -> Result<()> {
        let mut g = Eval::new(store);
        assert!(!g.is_recording(), "benchmarks must not record a tape");
        let mut t = g.constant(x.clone());
        match self {
            Stack::Mamba(blocks) => {
                for b in blocks {
                    t = b.forward(&mut g, &t)?;
                }
            }
            Stack::Attention(blocks) => {
                for b in blocks {
                    t = b.forward(&mut g, &t)?;
                }
            }
        }
        std::hint::black_box(&t);
        Ok(())
    }
}

fn build(kind: ModelKind, cfg: &BenchConfig) -> Result<(Stack, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bc = BlockConfig {
        d_state: cfg.d_state,
        scan: cfg.scan,
        ..BlockConfig::new(cfg.d_model)
    };
    let stack = match kind {
        ModelKind::Bimamba => Stack::Mamba(
            (0..cfg.n_blocks)
                .map(|i| BiMambaBlock::init(&mut store, &format!("block.{i}"), &bc, &mut rng))
                .collect::<Result<_>>()?,
        ),
        ModelKind::NaiveAttention => Stack::Attention(
            (0..cfg.n_blocks)
                .map(|i| NaiveAttentionBlock::init(&mut store, &format!("attn.{i}"), cfg.d_model, bc.d_inner(), &mut rng))
                .collect(),
        ),
    };
    Ok((stack, store))
}

/// Sweep every kind over every length. Out-of-memory forwards produce rows
/// without a measurement; other errors abort.
pub fn bench_forward(cfg: &BenchConfig) -> Result<BenchResult> {
    if !allocator_installed() {
        return Err(Error::Config("peak memory needs CountingAllocator as the global allocator".into()));
    }
    if cfg.repeats == 0 || cfg.batch == 0 || cfg.lengths.is_empty() {
        return Err(Error::Config("repeats, batch and lengths must be non-empty".into()));
    }
    let threads = thread_count();
    let mut rows = Vec::new();
    for &kind in &cfg.kinds {
        let (stack, store) = build(kind, cfg)?;
        for &len in &cfg.lengths {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ len as u64);
            let x = Tensor::<f32>::randn([cfg.batch, len, cfg.d_model], 1.0, &mut rng);
            set_limit(cfg.memory_limit.map(|m| current_bytes() + m));
            let outcome = measure(&stack, &store, &x, cfg);
            set_limit(None);
            let result = match outcome {
                Ok(m) => Some(m),
                Err(Error::OutOfMemory(what)) => {
                    log::warn!("{} at L={len}: out of memory ({what})", kind.as_str());
                    None
                }
                Err(e) => return Err(e),
            };
            rows.push(BenchRow {
                kind,
                len,
                result,
                threads,
            });
        }
    }
    Ok(BenchResult {
        rows,
        batch: cfg.batch,
        d_model: cfg.d_model,
    })
}

fn measure(stack: &Stack, store: &ParamStore<f32>, x: &Tensor<f32>, cfg: &BenchConfig) -> Result<Measurement> {
    for _ in 0..cfg.warmup {
        stack.forward(store, x)?;
    }
    let mut times = Vec::with_capacity(cfg.repeats);
    let mut peak = 0;
    for _ in 0..cfg.repeats {
        let base = current_bytes();
        reset_peak();
        let t = Instant::now();
        stack.forward(store, x)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        peak = peak.max(peak_bytes().saturating_sub(base));
    }
    times.sort_by(f64::total_cmp);
    let median = if times.len() % 2 == 1 {
        times[times.len() / 2]
    } else {
        (times[times.len() / 2 - 1] + times[times.len() / 2]) / 2.0
    };
    Ok(Measurement {
        peak_bytes: peak,
        latency_ms_median: median,
        latency_ms_min: times[0],
        latency_ms_max: *times.last().unwrap(),
        tokens_per_s: (x.dim(0) * x.dim(1)) as f64 / (median / 1e3),
    })
}

impl BenchResult {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.rows {
            match &r.result {
                Some(m) => writeln!(
                    w,
                    "{},{},{},{:.3},{:.3},{:.3},{}",
                    r.kind.as_str(),
                    r.len,
                    m.peak_bytes,
                    m.latency_ms_median,
                    m.latency_ms_min,
                    m.latency_ms_max,
                    r.threads
                )?,
                None => writeln!(w, "{},{},OOM,OOM,OOM,OOM,{}", r.kind.as_str(), r.len, r.threads)?,
            }
        }
        Ok(())
    }

    /// Markdown table with throughput and the scaling fits.
    pub fn write_table<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "batch {}, width {}", self.batch, self.d_model)?;
        writeln!(w)?;
        writeln!(w, "| kind | L | peak MiB | median ms | tokens/s |")?;
        writeln!(w, "|------|---|----------|-----------|----------|")?;
        for r in &self.rows {
            match &r.result {
                Some(m) => writeln!(
                    w,
                    "| {} | {} | {:.2} | {:.2} | {:.0} |",
                    r.kind.as_str(),
                    r.len,
                    m.peak_bytes as f64 / (1 << 20) as f64,
                    m.latency_ms_median,
                    m.tokens_per_s
                )?,
                None => writeln!(w, "| {} | {} | OOM | OOM | OOM |", r.kind.as_str(), r.len)?,
            }
        }
        writeln!(w)?;
        for kind in [ModelKind::Bimamba, ModelKind::NaiveAttention] {
            if let Some(s) = self.scaling(kind) {
                writeln!(
                    w,
                    "{}: memory R² linear {:.4}, quadratic {:.4}",
                    kind.as_str(),
                    s.linear.r2,
                    s.quadratic.r2
                )?;
            }
        }
        Ok(())
    }

    /// `(L, peak_bytes, median_ms)` of successful rows of one kind.
    pub fn series(&self, kind: ModelKind) -> Vec<(usize, f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.kind == kind)
            .filter_map(|r| r.result.as_ref().map(|m| (r.len, m.peak_bytes as f64, m.latency_ms_median)))
            .collect()
    }

    pub fn scaling(&self, kind: ModelKind) -> Option<Scaling> {
        let s = self.series(kind);
        if s.len() < 4 {
            return None;
        }
        let xs: Vec<f64> = s.iter().map(|r| r.0 as f64).collect();
        let ys: Vec<f64> = s.iter().map(|r| r.1).collect();
        Some(Scaling {
            linear: poly_fit(&xs, &ys, 1)?,
            quadratic: poly_fit(&xs, &ys, 2)?,
        })
    }

    /// `latency(2L) / latency(L)` for consecutive doubled lengths.
    pub fn latency_ratios(&self, kind: ModelKind) -> Vec<(usize, f64)> {
        let s = self.series(kind);
        let mut out = Vec::new();
        for a in &s {
            if let Some(b) = s.iter().find(|b| b.0 == 2 * a.0) {
                out.push((a.0, b.2 / a.2));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fit {
    /// Coefficients from the constant term upwards.
    pub coef: [f64; 3],
    pub r2: f64,
    pub rss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scaling {
    pub linear: Fit,
    /// Full quadratic `a + bL + cL²`.
    pub quadratic: Fit,
}

impl Scaling {
    /// Fraction of the quadratic fit at length `len` owed to the `cL²` term.
    pub fn quadratic_share(&self, len: f64) -> f64 {
        let [a, b, c] = self.quadratic.coef;
        let total = a + b * len + c * len * len;
        if total == 0.0 {
            0.0
        } else {
            c * len * len / total
        }
    }
}

/// Least-squares polynomial fit of degree 1 or 2 with R².
pub fn poly_fit(xs: &[f64], ys: &[f64], degree: usize) -> Option<Fit> {
    let n = degree + 1;
    if xs.len() != ys.len() || xs.len() < n || !(1..=2).contains(&degree) {
        return None;
    }
    // Scale x for conditioning.
    let scale = xs.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let mut ata = [[0.0; 3]; 3];
    let mut aty = [0.0; 3];
    for (&x, &y) in xs.iter().zip(ys) {
        let u = x / scale;
        let row = [1.0, u, u * u];
        for i in 0..n {
            aty[i] += row[i] * y;
            for j in 0..n {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    let c = solve(ata, aty, n)?;
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let mut rss = 0.0;
    let mut tss = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let u = x / scale;
        let pred = c[0] + c[1] * u + c[2] * u * u;
        rss += (y - pred) * (y - pred);
        tss += (y - mean) * (y - mean);
    }
    let r2 = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    Some(Fit {
        coef: [c[0], c[1] / scale, c[2] / (scale * scale)],
        r2,
        rss,
    })
}

fn solve(mut a: [[f64; 3]; 3], mut b: [f64; 3], n: usize) -> Option<[f64; 3]> {
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for k in col..n {
                a[r][k] -= f * a[col][k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    Some(x)
}
