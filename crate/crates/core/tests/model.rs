use eegmamba::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CHECKPOINT_MAGIC};
use eegmamba::model::{EegMamba, EegMambaConfig};
use eegmamba::moe::MoeConfig;
use eegmamba::st_adaptive::{TaskSpec, TokenizerConfig};
use eegmamba::{Error, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tasks() -> Vec<TaskSpec> {
    [(3, 4), (1, 2), (5, 3)]
        .iter()
        .enumerate()
        .map(|(i, &(channels, num_classes))| TaskSpec {
            task_id: i,
            name: format!("task{i}"),
            channels,
            num_classes,
        })
        .collect()
}

fn tiny() -> EegMambaConfig {
    EegMambaConfig {
        d_model: 8,
        n_blocks: 2,
        d_state: 4,
        tokenizer: TokenizerConfig {
            spatial_kernel: 1,
            small_kernel: 4,
            small_stride: 4,
            wide_kernel: 16,
            wide_stride: 8,
        },
        moe: Some(MoeConfig {
            num_experts: 3,
            top_k: 2,
            d_task: 4,
            ..MoeConfig::default()
        }),
        ..EegMambaConfig::multi_task(tasks())
    }
}

fn build<E: eegmamba::Element>(cfg: &EegMambaConfig, seed: u64) -> (EegMamba, ParamStore<E>) {
    EegMamba::build(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn input(channels: usize, len: usize, seed: u64) -> Tensor<f32> {
    Tensor::randn([2, channels, len], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn logits_width_follows_task_classes() {
    let (m, store) = build::<f32>(&tiny(), 0);
    for t in tasks() {
        let (logits, dec) = m.predict(&store, &input(t.channels, 64, 1), t.task_id).unwrap();
        assert_eq!(logits.shape(), &[2, t.num_classes]);
        assert_eq!(dec.len(), 2);
        assert!(logits.all_finite());
    }
    assert!(matches!(m.predict(&store, &input(3, 64, 1), 7), Err(Error::UnknownTask(7))));
    assert!(matches!(
        m.predict(&store, &input(3, 8, 1), 0),
        Err(Error::SignalTooShort { .. })
    ));
}

#[test]
fn logits_shape_is_independent_of_length() {
    let (m, store) = build::<f32>(&tiny(), 0);
    let a = m.predict(&store, &input(3, 128, 2), 0).unwrap().0;
    let b = m.predict(&store, &input(3, 512, 3), 0).unwrap().0;
    assert_eq!(a.shape(), b.shape());
}

#[test]
fn presets_have_published_sizes() {
    let multi = EegMambaConfig::multi_task(tasks());
    assert_eq!((multi.n_blocks, multi.d_model), (8, 256));
    let moe = multi.moe.as_ref().unwrap();
    assert_eq!((moe.num_experts, moe.top_k), (8, 2));
    let single = EegMambaConfig::single_task(tasks()[2].clone());
    assert_eq!((single.n_blocks, single.d_model), (2, 128));
    assert!(single.moe.is_none());
    assert_eq!(single.tasks.len(), 1);
    assert_eq!(single.tasks[0].task_id, 0);
}

#[test]
fn parameter_count_is_a_function_of_config() {
    let cfg = tiny();
    let counts: Vec<usize> = (0..3).map(|s| build::<f32>(&cfg, s).1.num_scalars()).collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(counts[0], TINY_PARAMS);
    let (_, f64_store) = build::<f64>(&cfg, 9);
    assert_eq!(f64_store.num_scalars(), TINY_PARAMS);
}

// Counted by hand for `tiny()`: D=8, inner width 16, state 4, Δ rank 1.
const FRONT: usize = (8 * (3 + 1 + 5) + 3 * 8) + (8 * 8 * 4 + 8) + (8 * 8 * 16 + 8) + 8;
const SSM: usize = 16 * 4 + 16 + 16 + 16 + 16 * 4 + 16 * 4 + 16;
const BLOCK: usize = 2 * 8 + 2 * 8 * 16 + 2 * (16 * 4 + 16) + 2 * SSM + (16 * 8 + 8);
const EXPERT: usize = (8 * 16 + 16) + (16 * 8 + 8);
const MOE: usize = 4 * EXPERT + 3 * 4 + 2 * (12 * 3 + 3);
const HEADS: usize = 8 * (4 + 2 + 3) + (4 + 2 + 3);
const TINY_PARAMS: usize = FRONT + 2 * BLOCK + MOE + HEADS;

#[test]
fn one_model_serves_every_task() {
    let (m, store) = build::<f32>(&tiny(), 4);
    let before = store.num_scalars();
    for t in tasks().iter().rev().chain(tasks().iter()) {
        m.predict(&store, &input(t.channels, 100, t.task_id as u64), t.task_id).unwrap();
    }
    assert_eq!(store.num_scalars(), before);
}

#[test]
fn single_task_model_has_no_gate() {
    let mut cfg = EegMambaConfig::single_task(tasks()[0].clone());
    cfg.d_model = 8;
    cfg.d_state = 4;
    let (m, store) = build::<f32>(&cfg, 5);
    let (logits, dec) = m.predict(&store, &input(3, 128, 6), 0).unwrap();
    assert_eq!(logits.shape(), &[2, 4]);
    assert!(dec.is_empty());
    // Without experts the head reads the class-token features directly.
    let feats = m.export_features(&store, &input(3, 128, 6), 0).unwrap();
    let head = &m.heads[0];
    let (w, b) = (store.get(head.w), store.get(head.b.unwrap()));
    for r in 0..2 {
        for c in 0..4 {
            let v: f32 = b.data()[c] + (0..8).map(|i| feats.at(&[r, i]) * w.at(&[i, c])).sum::<f32>();
            assert!((v - logits.at(&[r, c])).abs() < 1e-5);
        }
    }
}

#[test]
fn features_are_deterministic_and_init_dependent() {
    let cfg = tiny();
    let (m, store) = build::<f64>(&cfg, 7);
    let x = Tensor::<f64>::randn([4, 3, 96], 1.0, &mut ChaCha8Rng::seed_from_u64(8));
    let a = m.export_features(&store, &x, 0).unwrap();
    assert_eq!(a.shape(), &[4, 8]);
    assert_eq!(a, m.export_features(&store, &x, 0).unwrap());

    // Features from independent initializations are far apart relative to
    // their own scale.
    let (m2, store2) = build::<f64>(&cfg, 70);
    let b = m2.export_features(&store2, &x, 0).unwrap();
    let dist: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = a.data().iter().map(|p| p * p).sum::<f64>().sqrt();
    assert!(dist > 0.1 * norm, "dist {dist} norm {norm}");
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.egmb");
    let cfg = tiny();
    let (m, store) = build::<f32>(&cfg, 11);
    save_checkpoint(&path, &cfg, &store).unwrap();
    let (m2, store2) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(m2.cfg, cfg);
    for t in tasks() {
        let x = input(t.channels, 80, 12);
        let (a, _) = m.predict(&store, &x, t.task_id).unwrap();
        let (b, _) = m2.predict(&store2, &x, t.task_id).unwrap();
        let bits = |v: &Tensor<f32>| v.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
    load_checkpoint_for::<f32>(&path, &cfg).unwrap();
}

#[test]
fn checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.egmb");
    let mut single = EegMambaConfig::single_task(tasks()[0].clone());
    single.d_model = 8;
    single.d_state = 4;
    let (_, store) = build::<f32>(&single, 0);
    save_checkpoint(&path, &single, &store).unwrap();
    assert!(matches!(
        load_checkpoint_for::<f32>(&path, &tiny()),
        Err(Error::ConfigMismatch(_))
    ));

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], &CHECKPOINT_MAGIC);
    let mut corrupt = bytes.clone();
    corrupt[0] ^= 0xff;
    std::fs::write(&path, &corrupt).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Format { offset: 0, .. })));

    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        match load_checkpoint::<f32>(&path) {
            Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
            other => panic!("cut {cut}: {:?}", other.map(|_| ())),
        }
    }
}

#[test]
fn config_json_rejects_unknown_keys() {
    let cfg = tiny();
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(EegMambaConfig::from_json(&text).unwrap(), cfg);
    let typo = text.replacen("\"d_state\"", "\"d_sate\"", 1);
    assert!(EegMambaConfig::from_json(&typo).is_err());
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["moe"]["top_kk"] = 2.into();
    assert!(EegMambaConfig::from_json(&v.to_string()).is_err());
    let mut bad = cfg.clone();
    bad.moe.as_mut().unwrap().top_k = 9;
    assert!(EegMambaConfig::from_json(&serde_json::to_string(&bad).unwrap()).is_err());
}
