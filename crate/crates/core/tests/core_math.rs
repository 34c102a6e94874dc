mod common;

use common::{all_op_gradient_errors, naive_dft, random_vec, rng, svd_norm, three_layer_net_error};
use lipscde::autodiff::{Graph, Param, ParamStore};
use lipscde::fourier::{dft, gaussian_masks, idft};
use lipscde::lipschitz::{conv1d, lipschitz_conv1d, spectral_norm_project};
use lipscde::tensor::Tensor;
use proptest::prelude::*;

#[test]
fn every_op_matches_finite_differences() {
    for (name, err) in all_op_gradient_errors(3) {
        assert!(err < 1e-4, "{name}: relative gradient error {err:e}");
    }
}

#[test]
fn three_layer_net_matches_finite_differences() {
    for seed in 0..3 {
        let err = three_layer_net_error(seed);
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn repeated_backward_accumulates() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::vector(vec![1.0, 2.0, 3.0]), None);
    let mut g = Graph::new();
    let v = g.param(&store, p);
    let sq = g.mul(v, v);
    let root = g.sum(sq);
    g.backward(root, &mut store).unwrap();
    g.backward(root, &mut store).unwrap();
    assert_eq!(store.grad(p).data(), &[4.0, 8.0, 12.0]);
    store.zero_grad();
    assert_eq!(store.grad(p).data(), &[0.0; 3]);
}

#[test]
fn dft_of_length_seven_matches_direct_sum() {
    let x = random_vec(&mut rng(70), 7);
    let spec = dft(&x).unwrap();
    let (re, im) = naive_dft(&x);
    for k in 0..7 {
        assert!((spec.real.data()[k] - re[k]).abs() < 1e-10);
        assert!((spec.imag.data()[k] - im[k]).abs() < 1e-10);
    }
}

#[test]
fn dft_round_trip_power_of_two_and_odd() {
    for n in [1, 2, 8, 13, 64, 100] {
        let x = random_vec(&mut rng(n as u64), n);
        let back = idft(&dft(&x).unwrap()).unwrap();
        let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "n={n}: {err:e}");
    }
}

#[test]
fn masks_match_scalar_evaluation() {
    let n = 8;
    let (low, high) = gaussian_masks(n, 1.0).unwrap();
    for k in 0..n {
        let w = 2.0 * std::f64::consts::PI * k.min(n - k) as f64 / n as f64;
        let expect = (-w * w / 2.0).exp();
        assert!((low[k] - expect).abs() < 1e-15, "bin {k}");
        assert!((high[k] - (1.0 - expect)).abs() < 1e-15);
    }
    assert_eq!(low[0], 1.0);
    assert_eq!(high[0], 0.0);
    assert!(gaussian_masks(8, 0.0).is_err());
    assert!(gaussian_masks(8, -1.0).is_err());
}

#[test]
fn projection_of_diagonal_matches_exact_singular_values() {
    let m = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 0.0]).unwrap();
    let p = spectral_norm_project(&m, 1.0);
    assert!(p.max_abs_diff(&Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap()) < 1e-12);
    let id = Tensor::identity(2);
    assert_eq!(spectral_norm_project(&id, 1.0), id);
}

#[test]
fn projected_random_matrix_is_within_bound_by_svd() {
    for seed in 0..10 {
        let m = Tensor::matrix(5, 3, random_vec(&mut rng(seed), 15).iter().map(|v| 3.0 * v).collect()).unwrap();
        let p = spectral_norm_project(&m, 0.9);
        assert!(svd_norm(&p) <= 0.9 + 1e-6, "seed {seed}: {}", svd_norm(&p));
    }
}

#[test]
fn conv_matches_sliding_window_sum() {
    let mut r = rng(9);
    let (t_len, width) = (11, 3);
    let x = random_vec(&mut r, t_len);
    let k = random_vec(&mut r, width);
    let out = conv1d(
        &Tensor::matrix(t_len, 1, x.clone()).unwrap(),
        &Tensor::new(vec![1, 1, width], k.clone()).unwrap(),
    )
    .unwrap();
    for t in 0..t_len {
        let mut acc = 0.0;
        for (j, kv) in k.iter().enumerate() {
            let pos = t as isize + j as isize - 1;
            if (0..t_len as isize).contains(&pos) {
                acc += kv * x[pos as usize];
            }
        }
        assert!((out.data()[t] - acc).abs() < 1e-10);
    }
}

#[test]
fn conv_identity_and_zero_kernels() {
    let x = Tensor::matrix(6, 2, random_vec(&mut rng(4), 12)).unwrap();
    let mut delta = Tensor::zeros(&[2, 2, 3]);
    delta.data_mut()[1] = 1.0;
    delta.data_mut()[6 + 3 + 1] = 1.0;
    assert!(conv1d(&x, &delta).unwrap().max_abs_diff(&x) < 1e-15);
    let zero = conv1d(&x, &Tensor::zeros(&[2, 2, 3])).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
    assert!(conv1d(&x, &Tensor::zeros(&[1, 2, 13])).is_err());
}

#[test]
fn lipschitz_conv_is_contractive() {
    let mut r = rng(12);
    let kernel = Param {
        name: "k".into(),
        value: Tensor::new(vec![3, 2, 3], random_vec(&mut r, 18).iter().map(|v| 4.0 * v).collect()).unwrap(),
        grad: Tensor::zeros(&[3, 2, 3]),
        lipschitz_bound: Some(1.0),
    };
    for _ in 0..20 {
        let a = Tensor::matrix(9, 2, random_vec(&mut r, 18)).unwrap();
        let b = Tensor::matrix(9, 2, random_vec(&mut r, 18)).unwrap();
        let ya = lipschitz_conv1d(&a, &kernel).unwrap();
        let yb = lipschitz_conv1d(&b, &kernel).unwrap();
        for t in 0..9 {
            let dy: f64 = ya.row(t).iter().zip(yb.row(t)).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let wa = lipscde::lipschitz::conv_window(&a, t, 3);
            let wb = lipscde::lipschitz::conv_window(&b, t, 3);
            let dx: f64 = wa.iter().zip(&wb).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            assert!(dy <= dx * (1.0 + 1e-6));
        }
    }
}

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, n)
}

proptest! {
    #[test]
    fn dft_is_linear(x in vec_strategy(12), y in vec_strategy(12), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let (sx, sy, sm) = (dft(&x).unwrap(), dft(&y).unwrap(), dft(&mix).unwrap());
        for k in 0..12 {
            let re = a * sx.real.data()[k] + b * sy.real.data()[k];
            let im = a * sx.imag.data()[k] + b * sy.imag.data()[k];
            prop_assert!((sm.real.data()[k] - re).abs() < 1e-9);
            prop_assert!((sm.imag.data()[k] - im).abs() < 1e-9);
        }
    }

    #[test]
    fn masks_partition_unity(n in 1usize..200, sigma in 0.01..10.0f64) {
        let (low, high) = gaussian_masks(n, sigma).unwrap();
        for (l, h) in low.iter().zip(&high) {
            prop_assert!((l + h - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_is_idempotent(data in vec_strategy(12), bound in 0.1..5.0f64) {
        let m = Tensor::matrix(4, 3, data).unwrap();
        let once = spectral_norm_project(&m, bound);
        let twice = spectral_norm_project(&once, bound);
        prop_assert!(once.max_abs_diff(&twice) < 1e-8);
        prop_assert!(svd_norm(&once) <= bound + 1e-6);
    }

    #[test]
    fn projected_map_is_lipschitz(data in vec_strategy(15), x in vec_strategy(3), y in vec_strategy(3)) {
        prop_assume!(x != y);
        let l = spectral_norm_project(&Tensor::matrix(5, 3, data).unwrap(), 1.0);
        let d: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p - q).collect();
        let out = l.matvec(&d);
        let norm = |v: &[f64]| v.iter().map(|t| t * t).sum::<f64>().sqrt();
        prop_assert!(norm(&out) <= norm(&d) * (1.0 + 1e-6));
    }
}
