use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

#[test]
fn softmax_of_one_two_three() {
    let t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    let y = t.value(t.softmax(x).unwrap());
    let s: f64 = y.data().iter().sum();
    assert!((s - 1.0).abs() < 1e-12);
    assert!(y.data()[0] < y.data()[1] && y.data()[1] < y.data()[2]);
}

#[test]
fn same_padding_conv_preserves_plane() {
    let t = Tape::<f64>::new();
    let x = t.constant(random(&[1, 4, 4], 1)).unwrap();
    let w = t.constant(random(&[1, 1, 3, 3], 2)).unwrap();
    let y = t.conv2d(x, w, None, 1, 1, 1).unwrap();
    assert_eq!(t.shape(y), vec![1, 4, 4]);

    let x = t.constant(random(&[2, 9, 7], 3)).unwrap();
    let w = t.constant(random(&[3, 2, 3, 3], 4)).unwrap();
    let y = t.conv2d(x, w, None, 2, 1, 1).unwrap();
    // (9 + 2 - 3) / 2 + 1 = 5, (7 + 2 - 3) / 2 + 1 = 4
    assert_eq!(t.shape(y), vec![3, 5, 4]);
}

#[test]
fn conv_matches_sliding_window() {
    let (x, w, b) = (random(&[2, 5, 6], 5), random(&[3, 2, 3, 3], 6), random(&[3], 7));
    let t = Tape::<f64>::new();
    let (vx, vw, vb) = (t.constant(x.clone()).unwrap(), t.constant(w.clone()).unwrap(), t.constant(b.clone()).unwrap());
    let y = t.value(t.conv2d(vx, vw, Some(vb), 2, 1, 1).unwrap());
    let (oh, ow) = (3, 3);
    for co in 0..3 {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = b.data()[co];
                for ci in 0..2 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let (yy, xx) = ((oi * 2 + ki) as isize - 1, (oj * 2 + kj) as isize - 1);
                            if yy >= 0 && yy < 5 && xx >= 0 && xx < 6 {
                                acc += x.data()[(ci * 5 + yy as usize) * 6 + xx as usize]
                                    * w.data()[((co * 2 + ci) * 3 + ki) * 3 + kj];
                            }
                        }
                    }
                }
                assert!((y.data()[(co * oh + oi) * ow + oj] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let (a, b) = (random(&[2, 3], 11), random(&[3, 2], 12));
    let t = Tape::<f64>::new();
    let y = t.matmul(t.constant(a.clone()).unwrap(), t.constant(b.clone()).unwrap()).unwrap();
    let got = t.value(y);
    for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
        assert!((g - e).abs() < 1e-12);
    }
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let t = Tape::<f64>::new();
    let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = t.constant(Tensor::zeros(&[2, 3])).unwrap();
    match t.matmul(a, b).unwrap_err() {
        Error::ShapeMismatch { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn non_finite_inputs_are_rejected() {
    let t = Tape::<f64>::new();
    assert!(t.leaf(Tensor::new(&[1], vec![f64::INFINITY]).unwrap()).is_err());
    let x = t.leaf(Tensor::new(&[1], vec![1000.0]).unwrap()).unwrap();
    assert!(matches!(t.exp(x), Err(Error::NonFinite { op: "exp" })));
}

#[test]
fn grad_of_sum_is_ones() {
    let t = Tape::<f64>::new();
    let x = t.leaf(random(&[2, 3, 4], 3)).unwrap();
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), Tensor::ones(&[2, 3, 4]));
}

#[test]
fn grad_of_square_sum_is_twice_input() {
    let t = Tape::<f64>::new();
    let xv = random(&[5, 2], 4);
    let x = t.leaf(xv.clone()).unwrap();
    let s = t.sum(t.mul(x, x).unwrap()).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(x).unwrap().max_abs_diff(&xv.map(|v| 2.0 * v)) < 1e-15);
}

#[test]
fn repeated_backward_accumulates() {
    let t = Tape::<f64>::new();
    let x = t.leaf(random(&[3], 5)).unwrap();
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), Tensor::full(&[3], 2.0));
    t.zero_grad();
    assert!(t.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar_root() {
    let t = Tape::<f64>::new();
    let x = t.leaf(random(&[3], 5)).unwrap();
    assert!(matches!(t.backward(x), Err(Error::NonScalarRoot(_))));
}

#[test]
fn constants_get_no_gradient() {
    let t = Tape::<f64>::new();
    let c = t.constant(random(&[3], 1)).unwrap();
    let x = t.leaf(random(&[3], 2)).unwrap();
    let s = t.sum(t.mul(c, x).unwrap()).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(c).is_none());
    assert_eq!(t.grad(x).unwrap(), t.value(c));
}

#[test]
fn layer_norm_statistics() {
    let t = Tape::<f64>::new();
    let x = t.constant(random(&[6, 17], 9).map(|v| 3.0 * v + 2.0)).unwrap();
    let y = t.value(t.layer_norm(x, 1e-5).unwrap());
    for row in y.data().chunks(17) {
        let mean = row.iter().sum::<f64>() / 17.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 17.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn global_max_pool_prefers_first_tie() {
    let t = Tape::<f64>::new();
    let x = t.leaf(Tensor::new(&[1, 2, 2], vec![1.0, 3.0, 3.0, 0.0]).unwrap()).unwrap();
    let m = t.global_max_pool(x).unwrap();
    t.backward(t.sum(m).unwrap()).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn concat_and_split_gradients() {
    let t = Tape::<f64>::new();
    let a = t.leaf(random(&[2, 3], 1)).unwrap();
    let b = t.leaf(random(&[2, 1], 2)).unwrap();
    let c = t.concat(&[a, b], 1).unwrap();
    assert_eq!(t.shape(c), vec![2, 4]);
    let w = t.constant(Tensor::from_fn(&[2, 4], |i| i as f64)).unwrap();
    t.backward(t.sum(t.mul(c, w).unwrap()).unwrap()).unwrap();
    assert_eq!(t.grad(a).unwrap().data(), &[0.0, 1.0, 2.0, 4.0, 5.0, 6.0]);
    assert_eq!(t.grad(b).unwrap().data(), &[3.0, 7.0]);
}

fn linear_combo_grad(a: f64, b: f64, x: &Tensor<f64>) -> Tensor<f64> {
    let t = Tape::<f64>::new();
    let v = t.leaf(x.clone()).unwrap();
    let f = t.sum(t.gelu(v).unwrap()).unwrap();
    let g = t.sum(t.mul(t.sigmoid(v).unwrap(), v).unwrap()).unwrap();
    let root = t.add(t.mul_scalar(f, a).unwrap(), t.mul_scalar(g, b).unwrap()).unwrap();
    t.backward(root).unwrap();
    t.grad(v).unwrap()
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(&[3, 4], vals).unwrap()).unwrap();
        let y = t.value(t.softmax(x).unwrap());
        for row in y.data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let x = random(&[7], seed);
        let combined = linear_combo_grad(a, b, &x);
        let gf = linear_combo_grad(1.0, 0.0, &x);
        let gg = linear_combo_grad(0.0, 1.0, &x);
        for i in 0..7 {
            let expect = a * gf.data()[i] + b * gg.data()[i];
            prop_assert!((combined.data()[i] - expect).abs() < 1e-10);
        }
    }
}
