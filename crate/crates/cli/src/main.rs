use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use eegmamba::bench::{bench_forward, set_threads, BenchConfig, CountingAllocator, ModelKind};
use eegmamba::checkpoint::load_checkpoint;
use eegmamba::dataset::{
    default_suite, generate_synthetic, stratified_split, ContainerReader, Dataset, SampleSource, SyntheticTaskConfig,
};
use eegmamba::gradcheck::{run_suite, Scope};
use eegmamba::model::{EegMamba, EegMambaConfig};
use eegmamba::moe::MoeConfig;
use eegmamba::st_adaptive::TaskSpec;
use eegmamba::train::{evaluate, run_training, MetricsReport, TrainConfig, ACTIVATION_CSV, METRICS_CSV};
use eegmamba::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{Map, Value};

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

const THREADS_VAR: &str = "EEGMAMBA_THREADS";

/// Multi-task classification of multichannel signals with bidirectional
/// selective state-space blocks and a task-aware mixture of experts.
///
/// Every subcommand accepts --seed, --config and --out. Files are only
/// written below --out. The worker thread count can be set with the
/// EEGMAMBA_THREADS environment variable.
#[derive(Parser, Debug)]
#[command(name = "eegmamba", version, about, long_about, max_term_width = 100)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Seed for data generation, initialization, batching and gate noise.
    /// Overrides `train.seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config with optional sections `preset`, `model`, `train`, `data`
    /// and `bench`. Unknown keys are rejected.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate or inspect a dataset container.
    Dataset {
        #[command(subcommand)]
        cmd: DatasetCmd,
    },
    /// Train a model; writes checkpoints, history and metrics CSVs, and resumes
    /// from a previous run in the same directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint; writes metrics.csv and expert_activation.csv.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients; exits 0 iff every
    /// check is within tolerance.
    Gradcheck(GradcheckArgs),
    /// Forward-pass memory and latency sweep; writes bench.csv and bench.md.
    Bench(BenchArgs),
    /// Per-task expert activation frequencies of a checkpoint.
    ExpertStats(EvalArgs),
    /// Export class-token features of a checkpoint to features.csv.
    Features(EvalArgs),
}

#[derive(Subcommand, Debug)]
enum DatasetCmd {
    /// Write a synthetic dataset to <out>/dataset.eegd (suite from `data.tasks`,
    /// default four-task suite otherwise).
    Gen {
        /// Samples per class; overrides `data.n_per_class`.
        #[arg(long)]
        n_per_class: Option<usize>,
    },
    /// Print tasks, class counts and length ranges of a container.
    Inspect {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset container; synthetic data from the config when absent.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides `preset`.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Dataset container; synthetic data from the config when absent.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Which part of the split to use (split by `train.train_fraction` and the seed).
    #[arg(long, value_enum, default_value_t = Split::Eval)]
    split: Split,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value = "all", value_parser = ["ops", "ssm", "block", "moe", "model", "all"])]
    scope: String,
    #[arg(long, value_enum, default_value_t = Dims::Tiny)]
    dims: Dims,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    /// Comma-separated model kinds: bimamba, attention.
    #[arg(long, value_delimiter = ',')]
    kinds: Option<Vec<String>>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Report OOM once a forward pass grows live memory by this many MiB.
    #[arg(long, value_name = "MIB")]
    memory_limit: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
enum Preset {
    #[default]
    MultiTask,
    SingleTask,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Eval,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Dims {
    Tiny,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    preset: Preset,
    /// Keys of the model config to override on top of the preset.
    model: Map<String, Value>,
    train: TrainConfig,
    data: DataConfig,
    bench: BenchConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DataConfig {
    tasks: Option<Vec<SyntheticTaskConfig>>,
    n_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            tasks: None,
            n_per_class: 300,
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn out_file(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(self.out.join(name))
    }

    fn synthetic(&self, n_per_class: Option<usize>) -> Result<Dataset> {
        let suite = self.cfg.data.tasks.clone().unwrap_or_else(|| default_suite(self.seed));
        Ok(generate_synthetic(&suite, n_per_class.unwrap_or(self.cfg.data.n_per_class))?)
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.cfg.train.clone()
        }
    }

    fn model_config(&self, preset: Preset, tasks: Vec<TaskSpec>) -> Result<EegMambaConfig> {
        let base = match preset {
            Preset::MultiTask => EegMambaConfig::multi_task(tasks.clone()),
            Preset::SingleTask => {
                if tasks.len() != 1 {
                    bail!("the single-task preset needs a dataset with one task, got {}", tasks.len());
                }
                EegMambaConfig::single_task(tasks[0].clone())
            }
        };
        if self.cfg.model.contains_key("tasks") {
            bail!("model.tasks is taken from the dataset and cannot be set");
        }
        let mut v = serde_json::to_value(base)?;
        merge(&mut v, &Value::Object(self.cfg.model.clone()))?;
        let cfg = EegMambaConfig::from_json(&v.to_string()).context("model config")?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, over: &Value) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let slot = b.entry(k.clone()).or_insert(Value::Null);
                if k == "moe" && slot.is_null() && v.is_object() {
                    *slot = serde_json::to_value(MoeConfig::default())?;
                }
                merge(slot, v)?;
            }
        }
        (b, o) => *b = o.clone(),
    }
    Ok(())
}

/// Dataset held in memory or streamed from a container.
enum Source {
    Memory(Dataset, Vec<eegmamba::dataset::SampleMeta>),
    File(ContainerReader<std::io::BufReader<File>>),
}

impl Source {
    fn open(ctx: &Ctx, data: Option<&Path>) -> Result<Self> {
        match data {
            Some(p) => {
                let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
                let r = ContainerReader::new(std::io::BufReader::new(f)).with_context(|| format!("reading {}", p.display()))?;
                Ok(Source::File(r))
            }
            None => {
                let ds = ctx.synthetic(None)?;
                let meta = ds.meta();
                Ok(Source::Memory(ds, meta))
            }
        }
    }

    fn tasks(&self) -> Vec<TaskSpec> {
        match self {
            Source::Memory(ds, _) => ds.task_specs(),
            Source::File(r) => r.task_specs(),
        }
    }
}

impl SampleSource for Source {
    fn meta(&self) -> &[eegmamba::dataset::SampleMeta] {
        match self {
            Source::Memory(_, m) => m,
            Source::File(r) => r.meta(),
        }
    }

    fn load(&mut self, index: usize) -> eegmamba::Result<eegmamba::dataset::Sample> {
        match self {
            Source::Memory(ds, _) => ds
                .samples
                .get(index)
                .cloned()
                .ok_or_else(|| eegmamba::Error::Config(format!("sample index {index} out of range"))),
            Source::File(r) => r.load(index),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.common.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info })
        .format_target(false)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_VAR) {
        let n: usize = v.parse().ok().filter(|&n| n > 0).with_context(|| format!("{THREADS_VAR} must be a positive integer, got {v:?}"))?;
        set_threads(n)?;
    }
    let cfg: RunConfig = match &cli.common.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    let ctx = Ctx {
        seed: cli.common.seed.unwrap_or(cfg.train.seed),
        cfg,
        out: cli.common.out.clone(),
    };
    match cli.cmd {
        Command::Dataset { cmd } => match cmd {
            DatasetCmd::Gen { n_per_class } => dataset_gen(&ctx, n_per_class),
            DatasetCmd::Inspect { data } => dataset_inspect(&data),
        },
        Command::Train(a) => train(&ctx, &a),
        Command::Eval(a) => eval(&ctx, &a),
        Command::Gradcheck(a) => gradcheck(&ctx, &a),
        Command::Bench(a) => bench(&ctx, &a),
        Command::ExpertStats(a) => expert_stats(&ctx, &a),
        Command::Features(a) => features(&ctx, &a),
    }
}

fn dataset_gen(ctx: &Ctx, n_per_class: Option<usize>) -> Result<()> {
    let ds = ctx.synthetic(n_per_class)?;
    let path = ctx.out_file("dataset.eegd")?;
    ds.save(&path)?;
    println!("wrote {} samples over {} tasks to {}", ds.samples.len(), ds.tasks.len(), path.display());
    Ok(())
}

fn dataset_inspect(path: &Path) -> Result<()> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let r = ContainerReader::new(std::io::BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
    println!("{} samples", r.meta().len());
    for t in r.task_specs() {
        let m: Vec<_> = r.meta().iter().filter(|m| m.task_id == t.task_id).collect();
        let mut per_class = vec![0usize; t.num_classes];
        for s in &m {
            if let Some(c) = per_class.get_mut(s.label) {
                *c += 1;
            }
        }
        let lo = m.iter().map(|s| s.len).min().unwrap_or(0);
        let hi = m.iter().map(|s| s.len).max().unwrap_or(0);
        println!(
            "task {} {:?}: {} channels, {} classes, {} samples {:?}, length {}..={}",
            t.task_id,
            t.name,
            t.channels,
            t.num_classes,
            m.len(),
            per_class,
            lo,
            hi
        );
    }
    Ok(())
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let mut source = Source::open(ctx, a.data.as_deref())?;
    let model_cfg = ctx.model_config(a.preset.unwrap_or(ctx.cfg.preset), source.tasks())?;
    let mut tc = ctx.train_config();
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    let (model, mut store) = EegMamba::build::<f32, _>(&model_cfg, &mut ChaCha8Rng::seed_from_u64(ctx.seed))?;
    log::info!("{} parameters, {} samples", store.num_scalars(), source.meta().len());
    fs::write(ctx.out_file("model.json")?, serde_json::to_string_pretty(&model_cfg)?)?;
    fs::write(ctx.out_file("train.json")?, serde_json::to_string_pretty(&tc)?)?;
    let outcome = run_training(&tc, &model, &mut store, &mut source, Some(&ctx.out))?;
    if let Some(r) = &outcome.final_report {
        print_report(r);
    }
    if let Some(b) = outcome.best_epoch {
        println!("best epoch {b}");
    }
    Ok(())
}

fn subset(ctx: &Ctx, source: &Source, split: Split) -> Result<Vec<usize>> {
    let (train, eval) = stratified_split(source.meta(), ctx.cfg.train.train_fraction, ctx.seed)?;
    Ok(match split {
        Split::Train => train,
        Split::Eval => eval,
        Split::All => (0..source.meta().len()).collect(),
    })
}

fn load_for_eval(ctx: &Ctx, a: &EvalArgs) -> Result<(EegMamba, ParamStore<f32>, Source, Vec<usize>)> {
    let (model, store) =
        load_checkpoint::<f32>(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let source = Source::open(ctx, a.data.as_deref())?;
    if source.tasks() != model.cfg.tasks {
        bail!("dataset tasks do not match the checkpoint's tasks");
    }
    let idx = subset(ctx, &source, a.split)?;
    Ok((model, store, source, idx))
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let (model, store, mut source, idx) = load_for_eval(ctx, a)?;
    let report = evaluate(&model, &store, &mut source, &idx, ctx.cfg.train.eval_mode)?;
    let mut w = BufWriter::new(File::create(ctx.out_file(METRICS_CSV)?)?);
    writeln!(w, "task_id,task,samples,accuracy,auc,f1")?;
    for t in &report.tasks {
        let auc = t.auc.map(|a| a.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{},{}", t.task_id, t.name, t.samples, t.accuracy, auc, t.f1)?;
    }
    w.flush()?;
    if let Some(act) = &report.activation {
        act.write_csv(BufWriter::new(File::create(ctx.out_file(ACTIVATION_CSV)?)?))?;
    }
    print_report(&report);
    Ok(())
}

fn print_report(r: &MetricsReport) {
    println!("| task | samples | accuracy | AUC | F1 |");
    println!("|------|---------|----------|-----|----|");
    for t in &r.tasks {
        let auc = t.auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
        println!("| {} | {} | {:.4} | {} | {:.4} |", t.name, t.samples, t.accuracy, auc, t.f1);
    }
    println!("mean accuracy {:.4}", r.mean_accuracy());
}

fn gradcheck(ctx: &Ctx, a: &GradcheckArgs) -> Result<()> {
    let Dims::Tiny = a.dims;
    let results = run_suite(Scope::parse(&a.scope)?, ctx.seed)?;
    let mut w = BufWriter::new(File::create(ctx.out_file("gradcheck.csv")?)?);
    writeln!(w, "check,rel_error,tolerance,passed")?;
    let mut failed = 0;
    for r in &results {
        writeln!(w, "{},{:e},{:e},{}", r.name, r.error, r.tolerance, r.passed())?;
        println!("{} {:<40} {:.3e} (tol {:.0e})", if r.passed() { "ok  " } else { "FAIL" }, r.name, r.error, r.tolerance);
        failed += usize::from(!r.passed());
    }
    w.flush()?;
    if failed > 0 {
        bail!("{failed} of {} gradient checks exceeded tolerance", results.len());
    }
    println!("{} checks passed", results.len());
    Ok(())
}

fn bench(ctx: &Ctx, a: &BenchArgs) -> Result<()> {
    let mut cfg = ctx.cfg.bench.clone();
    cfg.seed = ctx.seed;
    if let Some(l) = &a.lengths {
        cfg.lengths = l.clone();
    }
    if let Some(k) = &a.kinds {
        cfg.kinds = k.iter().map(|s| ModelKind::parse(s)).collect::<eegmamba::Result<_>>()?;
    }
    if let Some(b) = a.batch {
        cfg.batch = b;
    }
    if let Some(d) = a.d_model {
        cfg.d_model = d;
    }
    if let Some(r) = a.repeats {
        cfg.repeats = r;
    }
    if let Some(m) = a.memory_limit {
        cfg.memory_limit = Some(m << 20);
    }
    let res = bench_forward(&cfg)?;
    res.write_csv(BufWriter::new(File::create(ctx.out_file("bench.csv")?)?))?;
    let mut table = Vec::new();
    res.write_table(&mut table)?;
    fs::write(ctx.out_file("bench.md")?, &table)?;
    std::io::stdout().write_all(&table)?;
    Ok(())
}

fn expert_stats(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let (model, store, mut source, idx) = load_for_eval(ctx, a)?;
    let report = evaluate(&model, &store, &mut source, &idx, ctx.cfg.train.eval_mode)?;
    let act = report
        .activation
        .context("the checkpoint has no task experts, so there are no activation statistics")?;
    act.write_csv(BufWriter::new(File::create(ctx.out_file(ACTIVATION_CSV)?)?))?;
    for ((t, row), s) in model.cfg.tasks.iter().zip(&act.matrix).zip(act.spread()) {
        let cells: Vec<String> = row.iter().map(|p| format!("{p:.2}")).collect();
        println!("{:<12} [{}] spread {:.3}", t.name, cells.join(" "), s);
    }
    println!("mean spread {:.4}", act.mean_spread());
    Ok(())
}

fn features(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let (model, store, mut source, idx) = load_for_eval(ctx, a)?;
    let mut w = BufWriter::new(File::create(ctx.out_file("features.csv")?)?);
    write!(w, "sample,task_id,label")?;
    for j in 0..model.cfg.d_model {
        write!(w, ",f{j}")?;
    }
    writeln!(w)?;
    for &i in &idx {
        let s = source.load(i)?;
        let x = Tensor::new([1, s.channels, s.len()], s.data.clone())?;
        let f = model.export_features(&store, &x, s.task_id)?;
        write!(w, "{i},{},{}", s.task_id, s.label)?;
        for v in f.data() {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    println!("wrote {} feature rows", idx.len());
    Ok(())
}
