use eegmamba::dataset::{
    generate_synthetic, load_batch, plan_epoch, Batch, Dataset, GeneratorKind, MemorySource, Sample, SampleSource,
    SyntheticTaskConfig,
};
use eegmamba::metrics::{accuracy, macro_auc, macro_f1, roc_auc};
use eegmamba::model::{EegMamba, EegMambaConfig};
use eegmamba::moe::MoeConfig;
use eegmamba::st_adaptive::TokenizerConfig;
use eegmamba::train::{
    evaluate, run_files, run_training, sample_probabilities, train_step, Adam, EvalMode, TrainConfig, HISTORY_CSV,
};
use eegmamba::{Error, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn suite(noise: f64, seed: u64) -> Vec<SyntheticTaskConfig> {
    let short = |c: SyntheticTaskConfig| SyntheticTaskConfig {
        min_len: 64,
        max_len: 96,
        noise_std: noise,
        ..c
    };
    vec![
        short(SyntheticTaskConfig::new("sine", 1, 2, GeneratorKind::SinusoidFrequency, seed)),
        short(SyntheticTaskConfig::new("corr", 4, 3, GeneratorKind::ChannelCorrelation, seed + 1)),
    ]
}

fn tiny(ds: &Dataset, moe: bool) -> EegMambaConfig {
    EegMambaConfig {
        d_model: 8,
        n_blocks: 1,
        d_state: 4,
        tokenizer: TokenizerConfig {
            spatial_kernel: 1,
            small_kernel: 4,
            small_stride: 4,
            wide_kernel: 16,
            wide_stride: 8,
        },
        moe: moe.then(|| MoeConfig {
            num_experts: 3,
            top_k: 2,
            d_task: 4,
            ..MoeConfig::default()
        }),
        ..EegMambaConfig::multi_task(ds.task_specs())
    }
}

fn build(cfg: &EegMambaConfig, seed: u64) -> (EegMamba, ParamStore<f32>) {
    EegMamba::build(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn first_batch(ds: &Dataset, task: usize, size: usize) -> Batch<f32> {
    let mut src = MemorySource::new(ds);
    let idx: Vec<usize> = (0..ds.samples.len()).filter(|&i| ds.samples[i].task_id == task).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let plans = plan_epoch(src.meta(), &idx, size, &mut rng).unwrap();
    load_batch(&mut src, &plans[0], &mut rng).unwrap()
}

fn fast() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 8,
        learning_rate: 5e-3,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_aux_weight_leaves_cross_entropy() {
    let ds = generate_synthetic(&suite(0.3, 0), 6).unwrap();
    let (model, mut store) = build(&tiny(&ds, true), 1);
    let mut opt = Adam::new(&store, &TrainConfig::default());
    let batch = first_batch(&ds, 1, 8);
    let l = train_step(&model, &mut store, &mut opt, &batch, 0.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(l.total, l.ce);
    assert!(l.balance > 0.0 && l.z > 0.0);

    let (model, mut store) = build(&tiny(&ds, true), 1);
    let mut opt = Adam::new(&store, &TrainConfig::default());
    let w = train_step(&model, &mut store, &mut opt, &batch, 0.5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(w.ce, l.ce);
    assert!((w.total - (w.ce + 0.5 * (w.balance + w.z))).abs() < 1e-5);
}

#[test]
fn disabled_experts_report_zero_aux_losses() {
    let ds = generate_synthetic(&suite(0.3, 0), 6).unwrap();
    let (model, mut store) = build(&tiny(&ds, false), 1);
    let mut opt = Adam::new(&store, &TrainConfig::default());
    let batch = first_batch(&ds, 0, 8);
    let l = train_step(&model, &mut store, &mut opt, &batch, 0.01, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!((l.balance, l.z), (0.0, 0.0));
    assert_eq!(l.total, l.ce);
}

#[test]
fn loss_decreases_over_fifty_steps() {
    let cfgs = vec![SyntheticTaskConfig {
        min_len: 64,
        max_len: 96,
        noise_std: 0.0,
        ..SyntheticTaskConfig::new("sine", 1, 2, GeneratorKind::SinusoidFrequency, 11)
    }];
    let ds = generate_synthetic(&cfgs, 16).unwrap();
    let mut ratios: Vec<f64> = (0..5)
        .map(|seed| {
            let (model, mut store) = build(&tiny(&ds, true), seed);
            let tc = TrainConfig {
                learning_rate: 5e-3,
                ..TrainConfig::default()
            };
            let mut opt = Adam::new(&store, &tc);
            let mut src = MemorySource::new(&ds);
            let all: Vec<usize> = (0..ds.samples.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ce = Vec::new();
            while ce.len() < 50 {
                for plan in plan_epoch(src.meta(), &all, 8, &mut rng).unwrap() {
                    let batch = load_batch(&mut src, &plan, &mut rng).unwrap();
                    ce.push(train_step(&model, &mut store, &mut opt, &batch, 0.01, &mut rng).unwrap().ce);
                }
            }
            let head: f64 = ce[..10].iter().sum();
            let tail: f64 = ce[40..50].iter().sum();
            tail / head
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[2] < 0.8, "median late/early loss ratio {}", ratios[2]);
}

#[test]
fn perfect_predictor_scores_one() {
    let labels = [0, 1, 2, 1, 0, 2, 2];
    assert_eq!(accuracy(&labels, &labels), 1.0);
    assert_eq!(macro_f1(&labels, &labels, 3), 1.0);
    let probs: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| (0..3).map(|c| if c == l { 0.8 } else { 0.1 }).collect())
        .collect();
    assert_eq!(macro_auc(&probs, &labels, 3).0, Some(1.0));
}

#[test]
fn binary_auc_examples() {
    assert_eq!(roc_auc(&[0.9, 0.2], &[true, false]), Some(1.0));
    assert_eq!(roc_auc(&[0.4, 0.6], &[true, false]), Some(0.0));
    assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]), Some(0.5));
    assert_eq!(roc_auc(&[0.5, 0.7], &[true, true]), None);
    // Pairwise count oracle.
    let s = [0.1, 0.4, 0.35, 0.8, 0.4];
    let p = [false, false, true, true, true];
    let mut wins = 0.0;
    for i in 0..5 {
        for j in 0..5 {
            if p[i] && !p[j] {
                wins += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
            }
        }
    }
    assert!((roc_auc(&s, &p).unwrap() - wins / 6.0).abs() < 1e-15);
}

#[test]
fn absent_class_is_skipped_in_macro_auc() {
    let probs = vec![vec![0.7, 0.2, 0.1], vec![0.2, 0.7, 0.1], vec![0.6, 0.3, 0.1]];
    let (auc, skipped) = macro_auc(&probs, &[0, 1, 0], 3);
    assert_eq!(skipped, vec![2]);
    assert_eq!(auc, Some(1.0));
}

#[test]
fn random_predictor_has_chance_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let labels: Vec<usize> = (0..1000).map(|i| i % 2).collect();
    let probs: Vec<Vec<f64>> = (0..1000)
        .map(|_| {
            let p: f64 = rng.random();
            vec![1.0 - p, p]
        })
        .collect();
    let auc = macro_auc(&probs, &labels, 2).0.unwrap();
    assert!((auc - 0.5).abs() < 0.05, "{auc}");
    let labels4: Vec<usize> = (0..1000).map(|i| i % 4).collect();
    let probs4: Vec<Vec<f64>> = (0..1000).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
    let auc4 = macro_auc(&probs4, &labels4, 4).0.unwrap();
    assert!((auc4 - 0.5).abs() < 0.05, "{auc4}");
}

#[test]
fn evaluation_metrics_lie_in_unit_interval() {
    let ds = generate_synthetic(&suite(0.3, 4), 5).unwrap();
    let (model, store) = build(&tiny(&ds, true), 5);
    let mut src = MemorySource::new(&ds);
    let all: Vec<usize> = (0..ds.samples.len()).collect();
    let report = evaluate(&model, &store, &mut src, &all, EvalMode::Full).unwrap();
    assert_eq!(report.tasks.len(), 2);
    for t in &report.tasks {
        assert_eq!(t.samples, 5 * [2, 3][t.task_id]);
        for v in [t.accuracy, t.f1, t.auc.unwrap()] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
    let act = report.activation.unwrap();
    for row in &act.matrix {
        assert!((row.iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }
}

#[test]
fn runs_are_seed_deterministic() {
    let ds = generate_synthetic(&suite(0.3, 7), 6).unwrap();
    let cfg = tiny(&ds, true);
    let run = || {
        let (model, mut store) = build(&cfg, 8);
        let mut src = MemorySource::new(&ds);
        let out = run_training(&fast(), &model, &mut store, &mut src, None).unwrap();
        (out.history, store)
    };
    let (h1, s1) = run();
    let (h2, s2) = run();
    assert_eq!(h1, h2);
    assert_eq!(s1.iter().map(|p| p.2.clone()).collect::<Vec<_>>(), s2.iter().map(|p| p.2.clone()).collect::<Vec<_>>());
    assert_eq!(h1.len(), 2);
    assert!(h1.iter().all(|r| r.mean_accuracy.is_some()));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let ds = generate_synthetic(&suite(0.3, 9), 6).unwrap();
    let cfg = tiny(&ds, true);
    let full_dir = tempfile::tempdir().unwrap();
    let (model, mut store) = build(&cfg, 10);
    let mut src = MemorySource::new(&ds);
    let full = run_training(&fast(), &model, &mut store, &mut src, Some(full_dir.path())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let (model, mut part) = build(&cfg, 10);
    let first = TrainConfig { epochs: 1, ..fast() };
    run_training(&first, &model, &mut part, &mut src, Some(dir.path())).unwrap();
    // Resuming ignores the freshly initialized store and continues from disk.
    let (model, mut fresh) = build(&cfg, 99);
    let resumed = run_training(&fast(), &model, &mut fresh, &mut src, Some(dir.path())).unwrap();

    assert_eq!(resumed.history, full.history);
    for ((_, _, a), (_, _, b)) in fresh.iter().zip(store.iter()) {
        assert_eq!(a, b);
    }
    for f in run_files(dir.path()) {
        assert!(f.exists(), "{}", f.display());
    }
    let csv = std::fs::read_to_string(dir.path().join(HISTORY_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(std::fs::read(dir.path().join(HISTORY_CSV)).unwrap(), std::fs::read(full_dir.path().join(HISTORY_CSV)).unwrap());

    let changed = TrainConfig {
        learning_rate: 1e-3,
        ..fast()
    };
    assert!(matches!(
        run_training(&changed, &model, &mut fresh, &mut src, Some(dir.path())),
        Err(Error::ConfigMismatch(_))
    ));
}

#[test]
fn labels_outside_model_classes_are_rejected() {
    let ds = generate_synthetic(&suite(0.3, 0), 2).unwrap();
    let mut cfg = tiny(&ds, true);
    cfg.tasks[1].num_classes = 2;
    let (model, mut store) = build(&cfg, 0);
    let mut src = MemorySource::new(&ds);
    assert!(matches!(
        run_training(&fast(), &model, &mut store, &mut src, None),
        Err(Error::Label { label: 2, classes: 2 })
    ));
}

#[test]
fn windowed_evaluation_averages_centred_windows() {
    let ds = generate_synthetic(&suite(0.3, 2), 2).unwrap();
    let (model, store) = build(&tiny(&ds, true), 7);
    let s = Sample {
        task_id: 0,
        label: 1,
        channels: 1,
        data: (0..140).map(|i| (i as f32 * 0.3).sin()).collect(),
    };
    let probs_of = |lo: usize| {
        let x = Tensor::new([1, 1, 64], s.data[lo..lo + 64].to_vec()).unwrap();
        let mut p = model.predict(&store, &x, 0).unwrap().0.to_f64_vec();
        let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = p.iter().map(|v| (v - m).exp()).sum();
        p.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
        p
    };
    // 140 = 2 windows of 64 plus 12 spare samples split evenly on both sides.
    let (a, b) = (probs_of(6), probs_of(70));
    let (p, _) = sample_probabilities(&model, &store, &s, 64).unwrap();
    for j in 0..2 {
        assert!((p[j] - (a[j] + b[j]) / 2.0).abs() < 1e-6, "{p:?} {a:?} {b:?}");
    }
    let (full, _) = sample_probabilities(&model, &store, &s, 140).unwrap();
    let (clamped, _) = sample_probabilities(&model, &store, &s, 1000).unwrap();
    assert_eq!(full, clamped);
    assert!((full.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    let mut src = MemorySource::new(&ds);
    let all: Vec<usize> = (0..ds.samples.len()).collect();
    let w = evaluate(&model, &store, &mut src, &all, EvalMode::Windowed).unwrap();
    assert_eq!(w.tasks.iter().map(|t| t.samples).collect::<Vec<_>>(), vec![4, 6]);
}
