use eegmamba::ssm::{
    discretize, scan_states, selective_scan_parallel, selective_scan_sequential, ssm_forward, ScanMode, SelectiveScan,
    SsmParams, DT_MAX, DT_MIN,
};
use eegmamba::tensor::max_rel_diff;
use eegmamba::{Error, Eval, Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

/// Straightforward loop over the recurrence, independent of the library.
fn naive_scan(abar: &Tensor<f64>, bbar: &Tensor<f64>, x: &Tensor<f64>, c: &Tensor<f64>) -> Vec<f64> {
    let s = abar.shape();
    let (bs, l, d, n) = (s[0], s[1], s[2], s[3]);
    let mut y = vec![0.0; bs * l * d];
    for b in 0..bs {
        for di in 0..d {
            let mut h = vec![0.0; n];
            for tt in 0..l {
                let mut acc = 0.0;
                for k in 0..n {
                    h[k] = abar.at(&[b, tt, di, k]) * h[k] + bbar.at(&[b, tt, di, k]) * x.at(&[b, tt, di]);
                    acc += c.at(&[b, tt, k]) * h[k];
                }
                y[(b * l + tt) * d + di] = acc;
            }
        }
    }
    y
}

struct Instance {
    x: Tensor<f64>,
    delta: Tensor<f64>,
    a: Tensor<f64>,
    bm: Tensor<f64>,
    cm: Tensor<f64>,
}

fn instance(rng: &mut ChaCha8Rng, bs: usize, l: usize, d: usize, n: usize) -> Instance {
    Instance {
        x: Tensor::randn([bs, l, d], 1.0, rng),
        delta: Tensor::uniform([bs, l, d], 0.001, 1.0, rng),
        a: Tensor::uniform([d, n], -3.0, -0.05, rng),
        bm: Tensor::randn([bs, l, n], 1.0, rng),
        cm: Tensor::randn([bs, l, n], 1.0, rng),
    }
}

fn fused(inst: &Instance, mode: ScanMode) -> Tensor<f64> {
    let store = ParamStore::new();
    let mut g = Eval::new(&store);
    let v: Vec<_> = [&inst.x, &inst.delta, &inst.a, &inst.bm, &inst.cm]
        .into_iter()
        .map(|t| g.constant(t.clone()))
        .collect();
    let y = g
        .apply(SelectiveScan::new(mode, false), &[&v[0], &v[1], &v[2], &v[3], &v[4]])
        .unwrap();
    (*y).clone()
}

#[test]
fn discretize_examples() {
    let (abar, bbar) = discretize(&t(&[1, 1, 1], &[1.0]), &t(&[1, 1], &[-1.0]), &t(&[1, 1, 1], &[1.0])).unwrap();
    assert!((abar.data()[0] - (-1f64).exp()).abs() < 1e-12);
    assert!((abar.data()[0] - 0.367879).abs() < 1e-6);
    assert_eq!(bbar.data()[0], 1.0);

    let (abar, _) = discretize(&t(&[1, 2, 2], &[0.3, 2.0, 0.7, 1e-3]), &Tensor::zeros([2, 3]), &Tensor::zeros([1, 2, 3])).unwrap();
    assert!(abar.data().iter().all(|&v| v == 1.0));

    let (abar, bbar) = discretize(&t(&[1, 1, 1], &[1e-8]), &t(&[1, 1], &[-2.0]), &t(&[1, 1, 1], &[0.5])).unwrap();
    assert!((abar.data()[0] - 1.0).abs() < 1e-7);
    assert!(bbar.data()[0].abs() < 1e-8);
}

#[test]
fn discretize_rejects_non_positive_step() {
    for bad in [0.0, -0.1] {
        let r = discretize(&t(&[1, 1, 1], &[bad]), &t(&[1, 1], &[-1.0]), &t(&[1, 1, 1], &[1.0]));
        assert!(matches!(r, Err(Error::Domain { .. })));
    }
}

#[test]
fn hand_unrolled_two_step_recurrence() {
    let e = (-1f64).exp();
    let abar = t(&[1, 2, 1, 1], &[e, e]);
    let bbar = t(&[1, 2, 1, 1], &[1.0, 1.0]);
    let x = t(&[1, 2, 1], &[1.0, 0.0]);
    let c = t(&[1, 2, 1], &[1.0, 1.0]);
    for y in [
        selective_scan_sequential(&abar, &bbar, &x, &c, None).unwrap(),
        selective_scan_parallel(&abar, &bbar, &x, &c, None).unwrap(),
    ] {
        // h1 = 1, h2 = e^-1 h1.
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!((y.data()[1] - e).abs() < 1e-12);
    }

    // The fused op discretizes internally from Δ = 1, A = -1, B = 1.
    let inst = Instance {
        x,
        delta: t(&[1, 2, 1], &[1.0, 1.0]),
        a: t(&[1, 1], &[-1.0]),
        bm: t(&[1, 2, 1], &[1.0, 1.0]),
        cm: c,
    };
    for mode in [ScanMode::Sequential, ScanMode::Parallel] {
        let y = fused(&inst, mode);
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!((y.data()[1] - e).abs() < 1e-12);
    }
}

#[test]
fn zero_input_gives_zero_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut inst = instance(&mut rng, 2, 9, 3, 4);
    inst.x = Tensor::zeros([2, 9, 3]);
    for mode in [ScanMode::Sequential, ScanMode::Parallel] {
        assert!(fused(&inst, mode).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn matches_naive_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inst = instance(&mut rng, 2, 5, 3, 4);
    let (abar, bbar) = discretize(&inst.delta, &inst.a, &inst.bm).unwrap();
    let oracle = naive_scan(&abar, &bbar, &inst.x, &inst.cm);
    let seq = selective_scan_sequential(&abar, &bbar, &inst.x, &inst.cm, None).unwrap();
    let fused_seq = fused(&inst, ScanMode::Sequential);
    for (i, o) in oracle.iter().enumerate() {
        assert!((seq.data()[i] - o).abs() < 1e-12);
        assert!((fused_seq.data()[i] - o).abs() < 1e-12);
    }
}

#[test]
fn single_step_parallel_is_bitwise_sequential() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inst = instance(&mut rng, 2, 1, 4, 3);
    let (abar, bbar) = discretize(&inst.delta, &inst.a, &inst.bm).unwrap();
    let s = selective_scan_sequential(&abar, &bbar, &inst.x, &inst.cm, None).unwrap();
    let p = selective_scan_parallel(&abar, &bbar, &inst.x, &inst.cm, None).unwrap();
    assert_eq!(s, p);
    assert_eq!(fused(&inst, ScanMode::Sequential), fused(&inst, ScanMode::Parallel));
}

#[test]
fn parallel_matches_sequential_on_reference_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inst = instance(&mut rng, 2, 64, 8, 4);
    let (abar, bbar) = discretize(&inst.delta, &inst.a, &inst.bm).unwrap();
    let s = selective_scan_sequential(&abar, &bbar, &inst.x, &inst.cm, None).unwrap();
    let p = selective_scan_parallel(&abar, &bbar, &inst.x, &inst.cm, None).unwrap();
    assert!(max_rel_diff(&s, &p, 1e-12) < 1e-10);
}

#[test]
fn parallel_matches_sequential_in_single_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inst = instance(&mut rng, 2, 100, 4, 4);
    let (abar, bbar) = discretize(&inst.delta.cast::<f32>(), &inst.a.cast::<f32>(), &inst.bm.cast::<f32>()).unwrap();
    let (x, c) = (inst.x.cast::<f32>(), inst.cm.cast::<f32>());
    let s = selective_scan_sequential(&abar, &bbar, &x, &c, None).unwrap();
    let p = selective_scan_parallel(&abar, &bbar, &x, &c, None).unwrap();
    assert!(max_rel_diff(&s, &p, 1e-3) < 1e-5);
}

#[test]
fn skip_term_adds_feedthrough() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inst = instance(&mut rng, 1, 7, 3, 2);
    let (abar, bbar) = discretize(&inst.delta, &inst.a, &inst.bm).unwrap();
    let skip = t(&[3], &[0.5, -1.0, 2.0]);
    let with = selective_scan_sequential(&abar, &bbar, &inst.x, &inst.cm, Some(&skip)).unwrap();
    let without = selective_scan_sequential(&abar, &bbar, &inst.x, &inst.cm, None).unwrap();
    for i in 0..with.len() {
        let expect = without.data()[i] + skip.data()[i % 3] * inst.x.data()[i];
        assert!((with.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn layer_with_only_skip_is_feedthrough() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let p = SsmParams::init(&mut store, "ssm", 4, 3, true, &mut rng);
    for id in [p.proj_b, p.proj_c, p.dt_down, p.dt_up] {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = Tensor::<f64>::randn([2, 6, 4], 1.0, &mut rng);
    let mut g = Eval::new(&store);
    let xv = g.constant(x.clone());
    for mode in [ScanMode::Sequential, ScanMode::Parallel] {
        let y = ssm_forward(&mut g, &xv, &p, mode).unwrap();
        assert_eq!(g.value(&y).to_f64_vec(), x.to_f64_vec());
    }
}

#[test]
fn layer_is_stable_for_large_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    let p = SsmParams::init(&mut store, "ssm", 6, 4, true, &mut rng);
    let x = Tensor::from_fn([1, 200, 6], |i| if i % 3 == 0 { -1e3 } else { 1e3 });
    let mut g = Eval::new(&store);
    let xv = g.constant(x);
    for mode in [ScanMode::Sequential, ScanMode::Parallel] {
        let y = ssm_forward(&mut g, &xv, &p, mode).unwrap();
        assert!(g.value(&y).all_finite());
    }
}

#[test]
fn step_bias_initialization_lands_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let p = SsmParams::init(&mut store, "ssm", 64, 4, true, &mut rng);
    for &b in store.get(p.dt_bias).data() {
        let dt = (1.0 + b.exp()).ln();
        assert!((DT_MIN - 1e-12..=DT_MAX + 1e-12).contains(&dt), "{dt}");
    }
    // A = -exp(A_log) starts at -(1..N).
    let a_log = store.get(p.a_log);
    for (i, &v) in a_log.data().iter().enumerate() {
        assert!((v.exp() - ((i % 4) + 1) as f64).abs() < 1e-12);
    }
}

#[test]
fn fused_scan_rejects_negative_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut inst = instance(&mut rng, 1, 3, 2, 2);
    inst.delta.data_mut()[1] = -0.5;
    let store = ParamStore::new();
    let mut g = Eval::new(&store);
    let v: Vec<_> = [&inst.x, &inst.delta, &inst.a, &inst.bm, &inst.cm]
        .into_iter()
        .map(|t| g.constant(t.clone()))
        .collect();
    let r = g.apply(SelectiveScan::new(ScanMode::Sequential, false), &[&v[0], &v[1], &v[2], &v[3], &v[4]]);
    assert!(matches!(r, Err(Error::Domain { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn parallel_equals_sequential(seed in any::<u64>(), l in 1usize..=128) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bs = rng.random_range(1..=2);
        let d = rng.random_range(1..=4);
        let n = rng.random_range(1..=4);
        let inst = instance(&mut rng, bs, l, d, n);
        let (abar, bbar) = discretize(&inst.delta, &inst.a, &inst.bm).unwrap();
        let s = selective_scan_sequential(&abar, &bbar, &inst.x, &inst.cm, None).unwrap();
        let p = selective_scan_parallel(&abar, &bbar, &inst.x, &inst.cm, None).unwrap();
        prop_assert!(max_rel_diff(&s, &p, 1e-12) < 1e-10);
        let fs = fused(&inst, ScanMode::Sequential);
        let fp = fused(&inst, ScanMode::Parallel);
        prop_assert!(max_rel_diff(&fs, &fp, 1e-12) < 1e-10);
        prop_assert!(max_rel_diff(&s, &fs, 1e-12) < 1e-10);
    }

    #[test]
    fn hidden_state_is_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = instance(&mut rng, 1, 50, 3, 3);
        let (abar, bbar) = discretize(&inst.delta, &inst.a, &inst.bm).unwrap();
        let amax = abar.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(amax < 1.0);
        let mut umax: f64 = 0.0;
        for (i, &b) in bbar.data().iter().enumerate() {
            umax = umax.max((b * inst.x.data()[i / 3]).abs());
        }
        let h = scan_states(&abar, &bbar, &inst.x, &inst.cm).unwrap();
        prop_assert!(h.max_abs() <= umax / (1.0 - amax) + 1e-12);
    }

    #[test]
    fn output_is_linear_in_input(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = instance(&mut rng, 2, 20, 3, 4);
        let x2 = Tensor::<f64>::randn([2, 20, 3], 1.0, &mut rng);
        let (abar, bbar) = discretize(&inst.delta, &inst.a, &inst.bm).unwrap();
        let mix = inst.x.zip_map(&x2, |a, b| alpha * a + beta * b);
        for mode_parallel in [false, true] {
            let scan = |x: &Tensor<f64>| if mode_parallel {
                selective_scan_parallel(&abar, &bbar, x, &inst.cm, None).unwrap()
            } else {
                selective_scan_sequential(&abar, &bbar, x, &inst.cm, None).unwrap()
            };
            let y1 = scan(&inst.x);
            let y2 = scan(&x2);
            let ym = scan(&mix);
            for i in 0..ym.len() {
                let expect = alpha * y1.data()[i] + beta * y2.data()[i];
                prop_assert!((ym.data()[i] - expect).abs() <= 1e-10 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn output_is_causal(seed in any::<u64>(), t0 in 0usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = instance(&mut rng, 1, 30, 3, 2);
        let mut pert = Instance { x: inst.x.clone(), delta: inst.delta.clone(), a: inst.a.clone(), bm: inst.bm.clone(), cm: inst.cm.clone() };
        for di in 0..3 {
            pert.x.data_mut()[t0 * 3 + di] += 2.0;
        }
        pert.delta.data_mut()[t0 * 3] += 0.3;
        pert.bm.data_mut()[t0 * 2] -= 1.0;
        pert.cm.data_mut()[t0 * 2 + 1] += 1.0;
        for mode in [ScanMode::Sequential, ScanMode::Parallel] {
            let y1 = fused(&inst, mode);
            let y2 = fused(&pert, mode);
            for i in 0..t0 * 3 {
                prop_assert_eq!(y1.data()[i].to_bits(), y2.data()[i].to_bits());
            }
        }
    }
}
