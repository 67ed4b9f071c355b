use std::sync::Arc;

use eegmamba::gradcheck::{grad_check, DEFAULT_EPS};
use eegmamba::ops::Padding;
use eegmamba::{Error, Eval, Graph, GraphExt, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

type V = Arc<Tensor<f64>>;

fn eval1<F>(f: F, x: Tensor<f64>) -> Vec<f64>
where
    F: for<'a> Fn(&mut Eval<'a, f64>, &V) -> eegmamba::Result<V>,
{
    let store = ParamStore::new();
    let mut g = Eval::new(&store);
    let xv = g.constant(x);
    let y = f(&mut g, &xv).unwrap();
    g.value(&y).to_f64_vec()
}

#[test]
fn linear_identity_and_hand_dot() {
    let store = ParamStore::new();
    let mut g = Eval::new(&store);
    let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2], &[0.0, 0.0]));
    let y = g.linear(&x, &w, Some(&b)).unwrap();
    assert_eq!(g.value(&y).to_f64_vec(), vec![1.0, 2.0]);

    let x = g.constant(t(&[1, 2], &[1.0, 1.0]));
    let w = g.constant(t(&[2, 1], &[2.0, 3.0]));
    let b = g.constant(t(&[1], &[0.5]));
    let y = g.linear(&x, &w, Some(&b)).unwrap();
    assert_eq!(g.value(&y).to_f64_vec(), vec![5.5]);
}

#[test]
fn linear_shape_error_names_axis() {
    let store = ParamStore::new();
    let mut g = Eval::new(&store);
    let x = g.constant(Tensor::<f64>::zeros([2, 3]));
    let w = g.constant(Tensor::<f64>::zeros([4, 2]));
    match g.linear(&x, &w, None) {
        Err(Error::Dimension { axis, expected, got, .. }) => {
            assert_eq!((axis, expected, got), (1, 4, 3));
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("mismatch accepted"),
    }
}

#[test]
fn linear_weight_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::<f64>::randn([3, 4], 1.0, &mut rng);
    let w = Tensor::<f64>::randn([4, 5], 1.0, &mut rng);
    let err = grad_check(
        |g, v| {
            let y = g.linear(&v[0], &v[1], None)?;
            g.sum(&y)
        },
        &[x, w],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn conv1d_identity_kernel_and_causal_pair() {
    let store = ParamStore::new();
    let mut g = Eval::new(&store);
    let x = g.constant(t(&[1, 1, 4], &[1.0, 1.0, 1.0, 1.0]));
    let w = g.constant(t(&[1, 1, 1], &[1.0]));
    let y = g.conv1d(&x, &w, None, 1, Padding::Symmetric(0), 1).unwrap();
    assert_eq!(g.value(&y).to_f64_vec(), vec![1.0; 4]);

    let x = g.constant(t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
    let w = g.constant(t(&[1, 1, 2], &[1.0, 1.0]));
    let y = g.conv1d(&x, &w, None, 1, Padding::CausalLeft, 1).unwrap();
    assert_eq!(g.value(&y).to_f64_vec(), vec![1.0, 3.0, 5.0, 7.0]);
}

#[test]
fn conv1d_output_length_and_geometry_error() {
    let store = ParamStore::new();
    let mut g = Eval::new(&store);
    let x = g.constant(Tensor::<f64>::zeros([1, 2, 10]));
    let w = g.constant(Tensor::<f64>::zeros([3, 2, 4]));
    let y = g.conv1d(&x, &w, None, 3, Padding::Symmetric(1), 1).unwrap();
    // floor((10 + 2 - 4) / 3) + 1
    assert_eq!(g.value(&y).shape(), &[1, 3, 3]);

    let w = g.constant(Tensor::<f64>::zeros([1, 2, 11]));
    assert!(matches!(
        g.conv1d(&x, &w, None, 1, Padding::Symmetric(0), 1),
        Err(Error::InvalidGeometry { .. })
    ));
}

#[test]
fn layernorm_examples() {
    let ln = |x: Tensor<f64>, eps: f64| {
        let d = x.last_dim();
        eval1(
            move |g, xv| {
                let gamma = g.constant(Tensor::full([d], 1.0));
                let beta = g.constant(Tensor::zeros([d]));
                g.layernorm(xv, &gamma, &beta, eps)
            },
            x,
        )
    };
    assert_eq!(ln(t(&[1, 3], &[2.5, 2.5, 2.5]), 1e-5), vec![0.0, 0.0, 0.0]);
    let y = ln(t(&[1, 2], &[1.0, 3.0]), 0.0);
    assert!((y[0] + 1.0).abs() < 1e-15 && (y[1] - 1.0).abs() < 1e-15, "{y:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f64>::randn([4, 7], 3.0, &mut rng);
    let y = ln(x, 1e-12);
    for row in y.chunks(7) {
        let m = row.iter().sum::<f64>() / 7.0;
        let v = row.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / 7.0;
        assert!(m.abs() < 1e-10);
        assert!((v - 1.0).abs() < 1e-6);
    }
}

#[test]
fn layernorm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::<f64>::randn([2, 5], 1.0, &mut rng);
    let gamma = Tensor::<f64>::randn([5], 1.0, &mut rng);
    let beta = Tensor::<f64>::randn([5], 1.0, &mut rng);
    let err = grad_check(|g, v| g.layernorm(&v[0], &v[1], &v[2], 1e-5), &[x, gamma, beta], DEFAULT_EPS).unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn pointwise_analytic_values() {
    assert_eq!(eval1(|g, x| g.silu(x), t(&[1], &[0.0])), vec![0.0]);
    let sp = eval1(|g, x| g.softplus(x), t(&[1], &[0.0]))[0];
    assert!((sp - std::f64::consts::LN_2).abs() < 1e-15);
    // Overflow guard.
    assert_eq!(eval1(|g, x| g.softplus(x), t(&[1], &[800.0])), vec![800.0]);
    let big = eval1(|g, x| g.softplus(x), t(&[1], &[31.0]))[0];
    assert!((big - (1.0 + 31f64.exp()).ln()).abs() < 1e-13);
    assert_eq!(eval1(|g, x| g.softmax(x, 1), t(&[1, 2], &[0.0, 0.0])), vec![0.5, 0.5]);
    let e = eval1(|g, x| g.exp(x), t(&[1], &[1.0]))[0];
    assert_eq!(e, std::f64::consts::E);
}

#[test]
fn cross_entropy_confident_and_label_error() {
    let store = ParamStore::new();
    let mut g = Eval::new(&store);
    let logits = g.constant(t(&[1, 2], &[10.0, -10.0]));
    let ce = g.cross_entropy(&logits, &[0]).unwrap();
    let v = g.value(&ce).data()[0];
    // Direct log-softmax: log(1 + e^-20).
    assert!((v - (-20f64).exp().ln_1p()).abs() < 1e-15);
    assert!(v < 1e-4);
    assert!(matches!(
        g.cross_entropy(&logits, &[2]),
        Err(Error::Label { label: 2, classes: 2 })
    ));
}

#[test]
fn conv_causality_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::<f64>::randn([1, 3, 12], 1.0, &mut rng);
    let w = Tensor::<f64>::randn([2, 3, 4], 1.0, &mut rng);
    let run = |x: &Tensor<f64>| {
        let store = ParamStore::new();
        let mut g = Eval::new(&store);
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv1d(&xv, &wv, None, 1, Padding::CausalLeft, 1).unwrap();
        g.value(&y).clone()
    };
    let base = run(&x);
    for t0 in 0..12 {
        let mut x2 = x.clone();
        for c in 0..3 {
            x2.data_mut()[c * 12 + t0] += 5.0;
        }
        let y2 = run(&x2);
        for c in 0..2 {
            for tt in 0..t0 {
                assert_eq!(base.at(&[0, c, tt]).to_bits(), y2.at(&[0, c, tt]).to_bits());
            }
        }
    }
}

#[test]
fn tape_and_eval_agree_and_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::<f64>::randn([2, 6, 3], 1.0, &mut rng);
    let run_tape = || {
        let store = ParamStore::new();
        let mut g = Tape::new(&store);
        let xv = g.leaf(x.clone());
        let s = g.softmax(&xv, 1).unwrap();
        let y = g.silu(&s).unwrap();
        let total = g.sum(&y).unwrap();
        let grads = g.backward(total).unwrap();
        (g.value(&y).clone(), grads.get(xv).unwrap().clone())
    };
    let (y1, g1) = run_tape();
    let (y2, g2) = run_tape();
    assert_eq!(y1, y2);
    assert_eq!(g1, g2);
    let ye = eval1(
        |g, xv| {
            let s = g.softmax(xv, 1)?;
            g.silu(&s)
        },
        x.clone(),
    );
    assert_eq!(y1.to_f64_vec(), ye);
}

#[test]
fn gradients_accumulate_over_reuse() {
    // y = x * x through two uses of the same node: dy/dx = 2x.
    let store = ParamStore::new();
    let mut g = Tape::new(&store);
    let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]));
    let y = g.mul(&x, &x).unwrap();
    let s = g.sum(&y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().to_f64_vec(), vec![2.0, -4.0, 1.0]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-50.0f64..50.0, 12)) {
        let y = eval1(|g, x| g.softmax(x, 1), t(&[3, 4], &data));
        for row in y.chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_non_negative_and_silu_sign(data in prop::collection::vec(-100.0f64..100.0, 16)) {
        let sp = eval1(|g, x| g.softplus(x), t(&[16], &data));
        prop_assert!(sp.iter().all(|v| *v >= 0.0));
        let si = eval1(|g, x| g.silu(x), t(&[16], &data));
        for (x, y) in data.iter().zip(&si) {
            if *x != 0.0 && y.abs() > 0.0 {
                prop_assert_eq!(x.signum(), y.signum());
            }
        }
    }

    #[test]
    fn causal_conv_ignores_future(seed in any::<u64>(), t0 in 0usize..10, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn([2, 2, 10], 1.0, &mut rng);
        let w = Tensor::<f64>::randn([2, 1, k], 1.0, &mut rng);
        let b = Tensor::<f64>::randn([2], 1.0, &mut rng);
        let run = |x: &Tensor<f64>| {
            let store = ParamStore::new();
            let mut g = Eval::new(&store);
            let xv = g.constant(x.clone().reshape([2, 10, 2]).unwrap());
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let y = g.depthwise_causal_conv(&xv, &wv, &bv).unwrap();
            g.value(&y).clone()
        };
        let mut x2 = x.clone();
        x2.data_mut()[t0 * 2] += 3.0;
        x2.data_mut()[20 + t0 * 2 + 1] -= 1.0;
        let (y1, y2) = (run(&x), run(&x2));
        for bi in 0..2 {
            for tt in 0..t0 {
                for c in 0..2 {
                    prop_assert_eq!(y1.at(&[bi, tt, c]).to_bits(), y2.at(&[bi, tt, c]).to_bits());
                }
            }
        }
    }
}
