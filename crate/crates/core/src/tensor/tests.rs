use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::param((0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(), shape).unwrap()
}

/// Central-difference check of every parameter element against the
/// analytic gradient. Returns the worst relative error seen.
fn fd_check(params: &[Tensor<f64>], f: impl Fn() -> Tensor<f64>) -> f64 {
    let h = 1e-5;
    for p in params {
        p.zero_grad();
    }
    f().backward().unwrap();
    let mut worst: f64 = 0.0;
    for p in params {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        for i in 0..p.numel() {
            let orig = p.data()[i];
            p.update_data(|d| d[i] = orig + h);
            let up = f().item();
            p.update_data(|d| d[i] = orig - h);
            let down = f().item();
            p.update_data(|d| d[i] = orig);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let err = if a.abs() < 1e-6 {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / a.abs().max(numeric.abs())
            };
            worst = worst.max(err);
        }
    }
    worst
}

fn weights(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor<f64> {
    Tensor::new((0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[m, n]).unwrap()
}

#[test]
fn matmul_identity_and_dot() {
    let i = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
    assert_eq!(i.matmul(&b).unwrap().to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    let r = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
    let c = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
    assert_eq!(r.matmul(&c).unwrap().to_vec(), vec![11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::<f64>::zeros(&[2, 3]).unwrap();
    let b = Tensor::<f64>::zeros(&[2, 3]).unwrap();
    let err = a.matmul(&b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, TensorError::Shape { op: "matmul", .. }));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_param(&mut rng, &[4, 5]);
    let b = rand_param(&mut rng, &[5, 3]);
    let w = weights(&mut rng, 4, 3);
    let err = fd_check(&[a.clone(), b.clone()], || a.matmul(&b).unwrap().mul(&w).unwrap().sum());
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn softmax_examples() {
    let x = Tensor::<f64>::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
    let y = x.softmax_rows(None).unwrap().to_vec();
    for v in y {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = Tensor::from_rows(&[vec![5.0, 5.0]]).unwrap();
    let y = x.softmax_rows(Some(&[true, false])).unwrap().to_vec();
    assert_eq!(y, vec![1.0, 0.0]);
    let x = Tensor::<f64>::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
    let y = x.softmax_rows(None).unwrap().to_vec();
    let expected = [0.09003057, 0.24472847, 0.66524096];
    for (a, b) in y.iter().zip(expected) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

#[test]
fn softmax_fully_masked_row_is_zero_and_flagged() {
    let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let (y, flagged) = x.softmax_rows_flagged(Some(&[true, true, false, false])).unwrap();
    assert_eq!(flagged, vec![1]);
    assert_eq!(&y.to_vec()[2..], &[0.0, 0.0]);
}

#[test]
fn std_normalize_examples() {
    let x = Tensor::from_rows(&[vec![2.0, -2.0]]).unwrap();
    assert_eq!(x.std_normalize_rows().unwrap().to_vec(), vec![1.0, -1.0]);
    let x = Tensor::from_rows(&[vec![5.0, 5.0, 5.0]]).unwrap();
    let y = x.std_normalize_rows().unwrap().to_vec();
    for v in y {
        assert!((v - 5.0 / STD_EPS).abs() / (5.0 / STD_EPS) < 1e-12);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = weights(&mut rng, 3, 8);
    let y = x.std_normalize_rows().unwrap();
    for i in 0..3 {
        let r = y.row(i);
        let mean = r.iter().sum::<f64>() / 8.0;
        let std = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0).sqrt();
        assert!((std - 1.0).abs() < 1e-9, "row {i} std {std}");
    }
}

#[test]
fn std_normalize_rejects_single_column() {
    let x = Tensor::<f64>::zeros(&[2, 1]).unwrap();
    assert!(x.std_normalize_rows().is_err());
}

#[test]
fn backward_simple_cases() {
    let x = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    x.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 4]);

    let x = Tensor::param(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
    x.mul(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
}

#[test]
fn backward_accumulates_until_zero_grad() {
    let x = Tensor::param(vec![1.0, 2.0], &[1, 2]).unwrap();
    let loss = x.sum();
    loss.backward().unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    x.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let x = Tensor::param(vec![1.0, 2.0], &[1, 2]).unwrap();
    let err = x.scale(2.0).backward().unwrap_err();
    assert!(matches!(err, TensorError::Contract { op: "backward", .. }));
}

#[test]
fn independent_parameter_gets_exact_zero_grad() {
    let x = Tensor::param(vec![1.0, 2.0], &[1, 2]).unwrap();
    let y = Tensor::param(vec![3.0, 4.0], &[1, 2]).unwrap();
    let unused = y.scale(0.0);
    let _ = unused;
    x.exp().sum().backward().unwrap();
    assert!(y.grad().is_none());
}

#[test]
fn elementwise_ops_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_param(&mut rng, &[3, 4]);
    let b = rand_param(&mut rng, &[3, 4]);
    let r = rand_param(&mut rng, &[1, 4]);
    let w = weights(&mut rng, 3, 4);
    let cases: Vec<(&str, Box<dyn Fn() -> Tensor<f64>>)> = vec![
        ("add", Box::new(|| a.add(&b).unwrap().mul(&w).unwrap().sum())),
        ("sub", Box::new(|| a.sub(&b).unwrap().mul(&w).unwrap().sum())),
        ("mul", Box::new(|| a.mul(&b).unwrap().mul(&w).unwrap().sum())),
        ("div", Box::new(|| a.div(&b.abs().add_scalar(0.5)).unwrap().mul(&w).unwrap().sum())),
        ("scale", Box::new(|| a.scale(-1.7).mul(&w).unwrap().sum())),
        ("transpose", Box::new(|| a.transpose().unwrap().matmul(&w).unwrap().sum())),
        ("concat", Box::new(|| a.concat_cols(&b).unwrap().mul(&w.concat_cols(&w).unwrap()).unwrap().sum())),
        ("slice", Box::new(|| a.slice_cols(1, 2).unwrap().mul(&w.slice_cols(0, 2).unwrap()).unwrap().sum())),
        ("gather", Box::new(|| a.gather_rows(&[2, 0, 2]).unwrap().mul(&w).unwrap().sum())),
        ("pick", Box::new(|| a.pick(&[0, 3, 1]).unwrap().exp().sum())),
        ("log", Box::new(|| a.abs().add_scalar(0.1).log().mul(&w).unwrap().sum())),
        ("exp", Box::new(|| a.exp().mul(&w).unwrap().sum())),
        ("sigmoid", Box::new(|| a.sigmoid().mul(&w).unwrap().sum())),
        ("tanh", Box::new(|| a.tanh().mul(&w).unwrap().sum())),
        ("gelu", Box::new(|| a.gelu().mul(&w).unwrap().sum())),
        ("leaky_relu", Box::new(|| a.leaky_relu(0.2).mul(&w).unwrap().sum())),
        ("mean", Box::new(|| a.mul(&b).unwrap().mean())),
        ("sum_rows", Box::new(|| a.sum_rows().unwrap().exp().sum())),
        ("add_row", Box::new(|| a.add_row(&r).unwrap().mul(&w).unwrap().sum())),
        ("mul_row", Box::new(|| a.mul_row(&r).unwrap().mul(&w).unwrap().sum())),
        ("affine", Box::new(|| a.affine(&b.transpose().unwrap(), &r.slice_cols(0, 3).unwrap()).unwrap().exp().sum())),
        ("mul_scalar_tensor", Box::new(|| a.mul_scalar_tensor(&r.slice_cols(2, 1).unwrap()).unwrap().mul(&w).unwrap().sum())),
        ("softmax", Box::new(|| a.softmax_rows(None).unwrap().mul(&w).unwrap().sum())),
        (
            "softmax_masked",
            Box::new(|| {
                let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
                a.softmax_rows(Some(&mask)).unwrap().mul(&w).unwrap().sum()
            }),
        ),
        ("log_softmax", Box::new(|| a.log_softmax_rows().unwrap().mul(&w).unwrap().sum())),
        ("std_normalize", Box::new(|| a.std_normalize_rows().unwrap().mul(&w).unwrap().sum())),
        ("layer_norm", Box::new(|| a.layer_norm_rows().unwrap().mul(&w).unwrap().sum())),
        ("l2_normalize", Box::new(|| a.l2_normalize_rows().unwrap().mul(&w).unwrap().sum())),
    ];
    for (name, f) in cases {
        let err = fd_check(&[a.clone(), b.clone(), r.clone()], f);
        assert!(err < 1e-4, "{name}: max rel err {err}");
    }
}

#[test]
fn constant_inputs_do_not_track() {
    let a = Tensor::new(vec![1.0, 2.0], &[1, 2]).unwrap();
    assert!(!a.exp().requires_grad());
    assert!(a.exp().sum().backward().is_err());
}

#[test]
fn rank_and_length_validation() {
    assert!(Tensor::<f64>::new(vec![0.0; 16], &[2, 2, 2, 2]).is_err());
    assert!(Tensor::<f64>::new(vec![0.0; 3], &[2, 2]).is_err());
    assert!(Tensor::<f64>::new(vec![0.0; 8], &[2, 2, 2]).is_ok());
}

#[test]
fn works_in_single_precision() {
    let x = Tensor::<f32>::param(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
    let y = x.softmax_rows(None).unwrap();
    let s: f32 = y.to_vec().iter().sum();
    assert!((s - 1.0).abs() < 1e-6);
    x.mul(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
}

mod props {
    use proptest::prelude::*;

    use super::super::Tensor;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12), mask_bits in proptest::collection::vec(any::<bool>(), 12)) {
            let x = Tensor::new(vals, &[3, 4]).unwrap();
            let (y, degenerate) = x.softmax_rows_flagged(Some(&mask_bits)).unwrap();
            let y = y.to_vec();
            for i in 0..3 {
                let row = &y[i * 4..(i + 1) * 4];
                let admitted = mask_bits[i * 4..(i + 1) * 4].iter().any(|&b| b);
                let s: f64 = row.iter().sum();
                if admitted {
                    prop_assert!((s - 1.0).abs() < 1e-9);
                } else {
                    prop_assert!(degenerate.contains(&i));
                    prop_assert_eq!(s, 0.0);
                }
                for j in 0..4 {
                    if !mask_bits[i * 4 + j] {
                        prop_assert_eq!(row[j], 0.0);
                    }
                }
            }
        }
    }
}
