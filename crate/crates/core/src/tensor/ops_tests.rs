use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, GradCheckConfig};
use super::ops::*;
use super::reference::conv2d_direct;
use super::Tensor;
use crate::error::Error;
use crate::params::ParamStore;

fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
    Tensor::new(data.to_vec(), shape).unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Finite-difference check of `f` with respect to freshly drawn inputs.
/// The scalar loss is a random projection of the output so that every
/// output coordinate carries a distinct weight.
fn fd_check(
    shapes: &[&[usize]],
    seed: u64,
    f: impl Fn(&[Tensor<f64>]) -> crate::Result<Tensor<f64>>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let len = s.iter().product();
            store
                .add(format!("in{i}"), Tensor::parameter(random_vec(&mut rng, len), s).unwrap())
                .unwrap()
        })
        .collect();
    let probe = f(&inputs).unwrap();
    let weights = Tensor::new(random_vec(&mut rng, probe.numel()), probe.shape()).unwrap();
    let cfg = GradCheckConfig {
        coords_per_param: 64,
        min_coords: 0,
        tolerance: 1e-6,
        ..Default::default()
    };
    let report = grad_check(
        &store,
        || Ok(sum(&mul_broadcast(&f(&inputs)?, &weights)?)),
        &cfg,
    )
    .unwrap();
    assert!(report.checked() > 0);
    report.max_rel_error()
}

#[test]
fn conv_identity_kernel() {
    let x = t(&[1., 2., 3., 4., 5., 6., 7., 8., 9.], &[1, 1, 3, 3]);
    let k = t(&[1.0], &[1, 1, 1, 1]);
    let y = conv2d(&x, &k, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn conv_zero_kernel_annihilates() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = t(&random_vec(&mut rng, 2 * 3 * 5 * 5), &[2, 3, 5, 5]);
    let k = Tensor::zeros(&[4, 3, 3, 3]);
    let y = conv2d(&x, &k, 2, 1).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_ones_kernel_on_ramp() {
    // Window sums of the 4x4 ramp 1..16, enumerated by hand.
    let x = t(&(1..=16).map(f64::from).collect::<Vec<_>>(), &[1, 1, 4, 4]);
    let k = t(&[1.0; 9], &[1, 1, 3, 3]);
    let y = conv2d(&x, &k, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.to_vec(), vec![54.0, 63.0, 90.0, 99.0]);
    let (direct, _) = conv2d_direct(&x.to_vec(), (1, 1, 4, 4), &k.to_vec(), (1, 3, 3), 1, 0);
    assert_eq!(direct, y.to_vec());
}

#[test]
fn conv_channel_mismatch_names_both_shapes() {
    let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
    let k = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
    let err = conv2d(&x, &k, 1, 0).unwrap_err().to_string();
    assert!(err.contains("[1, 3, 3, 3]") && err.contains("[1, 2, 4, 4]"), "{err}");
}

#[test]
fn conv_rejects_oversized_kernel_and_zero_stride() {
    let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
    assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 5, 5]), 1, 1).is_err());
    assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 3, 3]), 1, 1).is_ok());
    assert!(conv2d(&x, &Tensor::zeros(&[1, 1, 1, 1]), 0, 0).is_err());
}

#[test]
fn conv_shape_algebra_is_exhaustive() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for h in 1..=16 {
        for w in 1..=16 {
            for k in 1..=3 {
                for s in 1..=3 {
                    for p in 0..=1 {
                        let x = Tensor::<f64>::zeros(&[1, 1, h, w]);
                        let kern = Tensor::zeros(&[1, 1, k, k]);
                        let res = conv2d(&x, &kern, s, p);
                        if k > h + 2 * p || k > w + 2 * p {
                            assert!(res.is_err());
                            continue;
                        }
                        let y = res.unwrap();
                        assert_eq!(y.shape()[2], (h + 2 * p - k) / s + 1);
                        assert_eq!(y.shape()[3], (w + 2 * p - k) / s + 1);
                        if k <= h && k <= w {
                            let mp = max_pool2d(&x, k, s).unwrap();
                            assert_eq!(mp.shape()[2], (h - k) / s + 1);
                            assert_eq!(mp.shape()[3], (w - k) / s + 1);
                        } else {
                            assert!(max_pool2d(&x, k, s).is_err());
                        }
                    }
                }
            }
        }
    }
    // Values against the direct loop on a random subset of geometries.
    for _ in 0..60 {
        let (n, c, o) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(3..10), rng.random_range(3..10));
        let (k, s, p) = (rng.random_range(1..4), rng.random_range(1..3), rng.random_range(0..2));
        let xv = random_vec(&mut rng, n * c * h * w);
        let kv = random_vec(&mut rng, o * c * k * k);
        let y = conv2d(&t(&xv, &[n, c, h, w]), &t(&kv, &[o, c, k, k]), s, p).unwrap();
        let (direct, (ho, wo)) = conv2d_direct(&xv, (n, c, h, w), &kv, (o, k, k), s, p);
        assert_eq!(y.shape(), &[n, o, ho, wo]);
        for (a, b) in y.data().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_is_linear_in_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = [2, 3, 7, 6];
    let len = shape.iter().product();
    let (xv, yv) = (random_vec(&mut rng, len), random_vec(&mut rng, len));
    let k = t(&random_vec(&mut rng, 4 * 3 * 3 * 3), &[4, 3, 3, 3]);
    let (a, b) = (0.7, -1.3);
    let mixed: Vec<f64> = xv.iter().zip(&yv).map(|(x, y)| a * x + b * y).collect();
    let lhs = conv2d(&t(&mixed, &shape), &k, 1, 1).unwrap();
    let cx = conv2d(&t(&xv, &shape), &k, 1, 1).unwrap();
    let cy = conv2d(&t(&yv, &shape), &k, 1, 1).unwrap();
    for ((l, x), y) in lhs.data().iter().zip(cx.data().iter()).zip(cy.data().iter()) {
        assert!((l - (a * x + b * y)).abs() < 1e-12);
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    for (seed, (s, p)) in [(1, 1), (2, 0), (1, 0)].into_iter().enumerate() {
        let err = fd_check(&[&[2, 3, 5, 6], &[4, 3, 3, 3]], seed as u64, |v| conv2d(&v[0], &v[1], s, p));
        assert!(err < 1e-6, "stride {s} pad {p}: {err}");
    }
}

#[test]
fn global_pool_examples() {
    let c = t(&[2.5; 8], &[1, 2, 2, 2]);
    assert_eq!(pool_global(&c, PoolMode::Avg).unwrap().to_vec(), vec![2.5, 2.5]);
    assert_eq!(pool_global(&c, PoolMode::Max).unwrap().to_vec(), vec![2.5, 2.5]);

    let x = Tensor::parameter(vec![1., 2., 3., 4.], &[1, 1, 2, 2]).unwrap();
    assert_eq!(pool_global(&x, PoolMode::Avg).unwrap().to_vec(), vec![2.5]);
    let m = pool_global(&x, PoolMode::Max).unwrap();
    assert_eq!(m.shape(), &[1, 1, 1, 1]);
    assert_eq!(m.to_vec(), vec![4.0]);
    sum(&m).backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![0., 0., 0., 1.]);
}

#[test]
fn max_ties_route_to_first_in_scan_order() {
    let x = Tensor::parameter(vec![1., 4., 4., 0.], &[1, 1, 2, 2]).unwrap();
    sum(&pool_global(&x, PoolMode::Max).unwrap()).backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![0., 1., 0., 0.]);

    let y = Tensor::parameter(vec![4., 4., 4., 4.], &[1, 1, 2, 2]).unwrap();
    sum(&max_pool2d(&y, 2, 2).unwrap()).backward().unwrap();
    assert_eq!(y.grad().unwrap(), vec![1., 0., 0., 0.]);

    let z = Tensor::parameter(vec![2., 2.], &[1, 2, 1, 1]).unwrap();
    sum(&pool_channel(&z, PoolMode::Max).unwrap()).backward().unwrap();
    assert_eq!(z.grad().unwrap(), vec![1., 0.]);
}

#[test]
fn channel_pool_examples() {
    let x = t(&[0.3, -2.0, 5.0, 1.0], &[1, 1, 2, 2]);
    for mode in [PoolMode::Avg, PoolMode::Max] {
        assert_eq!(pool_channel(&x, mode).unwrap().to_vec(), x.to_vec());
    }
    let y = t(&[3.0, -1.0], &[1, 2, 1, 1]);
    assert_eq!(pool_channel(&y, PoolMode::Avg).unwrap().to_vec(), vec![1.0]);
    assert_eq!(pool_channel(&y, PoolMode::Max).unwrap().to_vec(), vec![3.0]);

    let z = t(&[0.5, -1.5, 0.5, -1.5, 0.5, -1.5], &[1, 3, 1, 2]);
    let a = pool_channel(&z, PoolMode::Avg).unwrap().to_vec();
    let m = pool_channel(&z, PoolMode::Max).unwrap().to_vec();
    assert_eq!(a, m);
    assert_eq!(pool_channel(&z, PoolMode::Avg).unwrap().shape(), &[1, 1, 1, 2]);
}

#[test]
fn max_pool_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = t(&random_vec(&mut rng, 2 * 3 * 4 * 5), &[2, 3, 4, 5]);
    assert_eq!(max_pool2d(&x, 1, 1).unwrap().to_vec(), x.to_vec());

    let y = t(&[1., 2., 3., 4.], &[1, 1, 2, 2]);
    assert_eq!(max_pool2d(&y, 2, 2).unwrap().to_vec(), vec![4.0]);

    let c = t(&[-0.25; 16], &[1, 1, 4, 4]);
    let pooled = max_pool2d(&c, 2, 2).unwrap();
    assert_eq!(pooled.to_vec(), vec![-0.25; 4]);

    let err = max_pool2d(&y, 3, 1).unwrap_err();
    assert!(matches!(err, Error::Shape { op: "max_pool2d", .. }));
}

#[test]
fn pooling_gradients_match_finite_differences() {
    let shape: &[usize] = &[2, 3, 4, 6];
    for mode in [PoolMode::Avg, PoolMode::Max] {
        assert!(fd_check(&[shape], 3, |v| pool_global(&v[0], mode)) < 1e-6);
        assert!(fd_check(&[shape], 4, |v| pool_channel(&v[0], mode)) < 1e-6);
    }
    assert!(fd_check(&[shape], 5, |v| max_pool2d(&v[0], 2, 2)) < 1e-6);
    assert!(fd_check(&[shape], 6, |v| avg_pool2d(&v[0], 2, 2)) < 1e-6);
}

#[test]
fn linear_examples() {
    let x = t(&[0.5, -1.0, 2.0, 3.0, 0.0, 1.5], &[2, 3]);
    let eye = t(&[1., 0., 0., 0., 1., 0., 0., 0., 1.], &[3, 3]);
    let zero_b = Tensor::zeros(&[3]);
    assert_eq!(linear(&x, &eye, &zero_b).unwrap().to_vec(), x.to_vec());

    let b = t(&[0.1, -0.2], &[2]);
    let y = linear(&x, &Tensor::zeros(&[3, 2]), &b).unwrap();
    assert_eq!(y.to_vec(), vec![0.1, -0.2, 0.1, -0.2]);

    let x2 = t(&[1.0, 2.0], &[1, 2]);
    let w2 = t(&[2.0, 0.0, 0.0, 2.0], &[2, 2]);
    assert_eq!(linear(&x2, &w2, &Tensor::zeros(&[2])).unwrap().to_vec(), vec![2.0, 4.0]);

    assert!(linear(&x, &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2])).is_err());
}

#[test]
fn dense_gradients_match_finite_differences() {
    assert!(fd_check(&[&[3, 4], &[4, 5], &[5]], 7, |v| linear(&v[0], &v[1], &v[2])) < 1e-6);
    assert!(fd_check(&[&[3, 4], &[2, 4]], 8, |v| matmul_nt(&v[0], &v[1])) < 1e-6);
}

#[test]
fn elementwise_examples() {
    assert_eq!(sigmoid(&t(&[0.0], &[1])).to_vec(), vec![0.5]);
    let s = sigmoid(&t(&[-800.0, 800.0], &[2])).to_vec();
    assert_eq!(s, vec![0.0, 1.0]);

    let x = t(&[1.0, -2.0, 3.0, 4.0], &[1, 1, 2, 2]);
    let ones = Tensor::full(&[1, 1, 1, 1], 1.0);
    assert_eq!(mul_broadcast(&x, &ones).unwrap().to_vec(), x.to_vec());
    assert!(mul_broadcast(&x, &Tensor::full(&[1, 2, 1, 1], 1.0)).is_err());
    assert!(mul_broadcast(&x, &Tensor::full(&[4], 1.0)).is_err());

    let r = Tensor::parameter(vec![-1.0, 0.0, 2.0], &[3]).unwrap();
    sum(&relu(&r)).backward().unwrap();
    assert_eq!(r.grad().unwrap(), vec![0.0, 0.0, 1.0]);
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let shape: &[usize] = &[2, 3, 3, 2];
    assert!(fd_check(&[shape], 10, |v| Ok(sigmoid(&v[0]))) < 1e-6);
    assert!(fd_check(&[shape], 11, |v| Ok(relu(&v[0]))) < 1e-6);
    assert!(fd_check(&[shape, &[2, 3, 1, 1]], 12, |v| mul_broadcast(&v[0], &v[1])) < 1e-6);
    assert!(fd_check(&[shape, &[2, 1, 3, 2]], 13, |v| mul_broadcast(&v[0], &v[1])) < 1e-6);
    assert!(fd_check(&[shape, shape], 14, |v| add(&v[0], &v[1])) < 1e-6);
    assert!(fd_check(&[shape, &[3]], 15, |v| add_channel_bias(&v[0], &v[1])) < 1e-6);
}

#[test]
fn concat_examples() {
    let a = t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
    assert_eq!(concat_channels(std::slice::from_ref(&a)).unwrap().to_vec(), a.to_vec());

    let v1 = Tensor::full(&[1, 1, 2, 2], 7.0);
    let v2 = Tensor::full(&[1, 1, 2, 2], -3.0);
    let c = concat_channels(&[v1, v2]).unwrap();
    assert_eq!(c.shape(), &[1, 2, 2, 2]);
    assert_eq!(c.to_vec(), vec![7., 7., 7., 7., -3., -3., -3., -3.]);

    let bad = Tensor::<f64>::zeros(&[1, 1, 3, 2]);
    assert!(concat_channels(&[a, bad]).is_err());
}

#[test]
fn concat_split_duality() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let chans = [2, 1, 3];
    let parts: Vec<Tensor<f64>> = chans
        .iter()
        .map(|&c| t(&random_vec(&mut rng, 2 * c * 3 * 3), &[2, c, 3, 3]))
        .collect();
    let cat = concat_channels(&parts).unwrap();
    let mut start = 0;
    for (p, &c) in parts.iter().zip(&chans) {
        let back = narrow_channels(&cat, start, c).unwrap();
        assert_eq!(back.to_vec(), p.to_vec());
        start += c;
    }
    let err = fd_check(&[&[2, 2, 3, 3], &[2, 1, 3, 3], &[2, 3, 3, 3]], 22, concat_channels);
    assert!(err < 1e-6);
    assert!(fd_check(&[&[2, 4, 2, 2]], 23, |v| narrow_channels(&v[0], 1, 2)) < 1e-6);
}

#[test]
fn batch_norm_examples() {
    // Zero-mean, unit (biased) variance per channel.
    let x = t(&[1.0, -1.0, 1.0, -1.0, 2.0, 0.0, -2.0, 0.0], &[2, 1, 2, 2]);
    let var = x.data().iter().map(|v| v * v).sum::<f64>() / 8.0;
    let x = t(&x.to_vec().iter().map(|v| v / var.sqrt()).collect::<Vec<_>>(), &[2, 1, 2, 2]);
    let mut stats = RunningStats::new(1);
    let y = batch_norm(&x, &t(&[1.0], &[1]), &t(&[0.0], &[1]), &mut stats, NormMode::Train).unwrap();
    for (a, b) in y.data().iter().zip(x.data().iter()) {
        assert!((a - b).abs() < 1e-5);
    }
    // Running stats moved toward the batch statistics.
    assert!((stats.mean[0] - 0.0).abs() < 1e-12);
    assert!((stats.var[0] - (0.9 + 0.1 * 8.0 / 7.0)).abs() < 1e-12);

    let mut stats = RunningStats::new(1);
    let y = batch_norm(&x, &t(&[0.0], &[1]), &t(&[0.75], &[1]), &mut stats, NormMode::Train).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.75));

    let mut stats = RunningStats {
        mean: vec![1.0],
        var: vec![4.0],
    };
    let y = batch_norm(&t(&[3.0], &[1, 1, 1, 1]), &t(&[1.0], &[1]), &t(&[0.0], &[1]), &mut stats, NormMode::Eval)
        .unwrap();
    assert!((y.item() - 2.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-15);
    assert!((y.item() - 1.0).abs() < 1e-5);
    assert_eq!(stats.mean, vec![1.0], "eval mode leaves stats untouched");

    let err = batch_norm(&t(&[3.0], &[1, 1, 1, 1]), &t(&[1.0], &[1]), &t(&[0.0], &[1]), &mut stats, NormMode::Train)
        .unwrap_err();
    assert!(matches!(err, Error::InvalidArgument { op: "batch_norm", .. }));
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    for mode in [NormMode::Train, NormMode::Eval] {
        let err = fd_check(&[&[3, 2, 2, 3], &[2], &[2]], 30, |v| {
            let mut stats = RunningStats {
                mean: vec![0.1, -0.2],
                var: vec![0.8, 1.3],
            };
            batch_norm(&v[0], &v[1], &v[2], &mut stats, mode)
        });
        assert!(err < 1e-6, "{mode:?}: {err}");
    }
}

#[test]
fn reshape_and_reductions() {
    let x = Tensor::parameter(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 6, 1, 1]).unwrap();
    let r = reshape(&x, &[2, 3]).unwrap();
    assert_eq!(r.shape(), &[2, 3]);
    assert!(reshape(&x, &[4, 2]).is_err());
    mean(&r).backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0 / 6.0; 6]);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = t(&random_vec(&mut rng, 2 * 3 * 8 * 8), &[2, 3, 8, 8]);
        let k = t(&random_vec(&mut rng, 5 * 3 * 3 * 3), &[5, 3, 3, 3]);
        let y = relu(&conv2d(&x, &k, 1, 1).unwrap());
        max_pool2d(&y, 2, 2).unwrap().to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn single_precision_tracks_double() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xv = random_vec(&mut rng, 3 * 6 * 6);
    let kv = random_vec(&mut rng, 2 * 3 * 3 * 3);
    let y64 = conv2d(&t(&xv, &[1, 3, 6, 6]), &t(&kv, &[2, 3, 3, 3]), 1, 1).unwrap();
    let y32 = conv2d(
        &Tensor::<f32>::from_f64(&xv, &[1, 3, 6, 6]).unwrap(),
        &Tensor::<f32>::from_f64(&kv, &[2, 3, 3, 3]).unwrap(),
        1,
        1,
    )
    .unwrap();
    for (a, b) in y64.data().iter().zip(y32.data().iter()) {
        assert!((a - f64::from(*b)).abs() < 1e-5);
    }
}
