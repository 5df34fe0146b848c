use mfstf_core::{AdamState, BnMode, Error, RunningStats, Tape, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn conv2d_counts_overlaps() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 3, 3], 1.0));
    let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, k, b).unwrap();
    let d = y.data();
    assert_eq!(d[4], 9.0);
    for corner in [0, 2, 6, 8] {
        assert_eq!(d[corner], 4.0);
    }
}

#[test]
fn conv2d_zero_kernel_and_table_shape() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::full(&[9, 13, 13], 0.7));
    let k = tape.constant(Tensor::zeros(&[16, 9, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[16]));
    let y = tape.conv2d(x, k, b).unwrap();
    assert_eq!(y.shape(), vec![16, 13, 13]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[3, 5, 5]));
    let k = tape.constant(Tensor::zeros(&[2, 4, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(tape.conv2d(x, k, b), Err(Error::Contract { .. })));
}

#[test]
fn conv2d_identity_1x1_reproduces_input() {
    let tape = Tape::new();
    let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| (i as f64).sin()).collect();
    let x = tape.constant(t(&[2, 3, 4, 4], data.clone()));
    let mut kd = vec![0.0; 9];
    for c in 0..3 {
        kd[c * 3 + c] = 1.0;
    }
    let k = tape.constant(t(&[3, 3, 1, 1], kd));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.conv2d(x, k, b).unwrap();
    assert_eq!(&*y.data(), data.as_slice());
}

fn channel_stats(d: &[f64], batch: usize, ch: usize, spatial: usize, c: usize) -> (f64, f64) {
    let vals: Vec<f64> = (0..batch)
        .flat_map(|b| d[(b * ch + c) * spatial..(b * ch + c + 1) * spatial].to_vec())
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

#[test]
fn batchnorm_train_normalizes() {
    let tape = Tape::new();
    let data: Vec<f64> = (0..4 * 3 * 5 * 5).map(|i| ((i * 7919) % 101) as f64 * 0.3 - 4.0).collect();
    let x = tape.constant(t(&[4, 3, 5, 5], data));
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let mut rs = RunningStats::new(3);
    let y = tape.batch_norm(x, g, b, BnMode::Train(Some(&mut rs))).unwrap();
    for c in 0..3 {
        let (mean, var) = channel_stats(&y.data(), 4, 3, 25, c);
        assert!(mean.abs() <= 1e-5, "mean {}", mean);
        assert!((var - 1.0).abs() <= 1e-3, "var {}", var);
    }
    assert_eq!(rs.tracked, 1);
}

#[test]
fn batchnorm_affine_and_constant_channel() {
    let tape = Tape::new();
    let mut data: Vec<f64> = (0..2 * 2 * 9).map(|i| (i as f64 * 1.3).cos()).collect();
    // channel 1 constant
    for b in 0..2 {
        for i in 0..9 {
            data[(b * 2 + 1) * 9 + i] = 5.0;
        }
    }
    let x = tape.constant(t(&[2, 2, 3, 3], data));
    let g = tape.constant(t(&[2], vec![2.0, 2.0]));
    let b = tape.constant(t(&[2], vec![3.0, 3.0]));
    let y = tape.batch_norm(x, g, b, BnMode::Train(None)).unwrap();
    let (mean, var) = channel_stats(&y.data(), 2, 2, 9, 0);
    assert!((mean - 3.0).abs() < 1e-9);
    assert!((var.sqrt() - 2.0).abs() < 1e-3);
    let d = y.data();
    for bb in 0..2 {
        for i in 0..9 {
            assert_eq!(d[(bb * 2 + 1) * 9 + i], 3.0);
        }
    }
}

#[test]
fn batchnorm_eval_requires_stats() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let rs = RunningStats::new(2);
    assert!(matches!(
        tape.batch_norm(x, g, b, BnMode::Eval(&rs)),
        Err(Error::UninitializedStats)
    ));
}

#[test]
fn relu_values_and_gradients() {
    let tape = Tape::new();
    let x = tape.variable(t(&[3], vec![-1.0, 0.0, 2.0]));
    let y = x.relu();
    assert_eq!(&*y.data(), &[0.0, 0.0, 2.0]);
    let g = tape.backward(y.sum()).unwrap();
    assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 1.0]);

    let tape = Tape::new();
    let neg = tape.variable(Tensor::full(&[4], -0.5));
    let g = tape.backward(neg.relu().sum()).unwrap();
    assert!(g.get(neg).unwrap().iter().all(|&v| v == 0.0));

    let tape = Tape::new();
    let pos = tape.variable(t(&[3], vec![0.5, 1.0, 3.0]));
    let y = pos.relu();
    assert_eq!(&*y.data(), &[0.5, 1.0, 3.0]);
    let g = tape.backward(y.sum()).unwrap();
    assert_eq!(g.get(pos).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn elementwise_mul_examples() {
    let tape = Tape::new();
    let a = tape.variable(t(&[3], vec![1.0, 2.0, 3.0]));
    let b = tape.variable(t(&[3], vec![4.0, 5.0, 6.0]));
    let ab = a.mul(b).unwrap();
    assert_eq!(&*ab.data(), &[4.0, 10.0, 18.0]);
    let ba = b.mul(a).unwrap();
    assert_eq!(&*ab.data(), &*ba.data());
    let ones = tape.constant(Tensor::full(&[3], 1.0));
    assert_eq!(&*a.mul(ones).unwrap().data(), &[1.0, 2.0, 3.0]);
    let c = tape.constant(Tensor::zeros(&[2]));
    assert!(a.mul(c).is_err());
}

#[test]
fn concat_examples() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[64, 13, 13]));
    let b = tape.constant(Tensor::zeros(&[32, 13, 13]));
    assert_eq!(tape.concat_channels(&[a, b]).unwrap().shape(), vec![96, 13, 13]);

    let only = tape.constant(t(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let c = tape.concat_channels(&[only]).unwrap();
    assert_eq!(&*c.data(), &[1.0, 2.0, 3.0, 4.0]);

    let p: Vec<_> = (0..3)
        .map(|i| tape.constant(Tensor::full(&[1, 2, 2], i as f64)))
        .collect();
    let c = tape.concat_channels(&p).unwrap();
    assert_eq!(c.shape(), vec![3, 2, 2]);
    assert_eq!(&*c.data(), &[0., 0., 0., 0., 1., 1., 1., 1., 2., 2., 2., 2.]);

    let bad = tape.constant(Tensor::zeros(&[1, 3, 2]));
    assert!(tape.concat_channels(&[p[0], bad]).is_err());
}

#[test]
fn global_avg_pool_examples() {
    let tape = Tape::new();
    let x = tape.constant(t(&[2, 2, 2], vec![1.0, 3.0, 5.0, 7.0, 2.5, 2.5, 2.5, 2.5]));
    let y = tape.global_avg_pool(x).unwrap();
    assert_eq!(&*y.data(), &[4.0, 2.5]);
    let big = tape.constant(Tensor::zeros(&[96, 13, 13]));
    assert_eq!(tape.global_avg_pool(big).unwrap().shape(), vec![96]);
}

#[test]
fn linear_examples() {
    let tape = Tape::new();
    let x = tape.constant(t(&[2], vec![3.0, 4.0]));
    let eye = tape.constant(t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
    let zb = tape.constant(Tensor::zeros(&[2]));
    assert_eq!(&*tape.linear(x, eye, Some(zb)).unwrap().data(), &[3.0, 4.0]);
    let zw = tape.constant(Tensor::zeros(&[2, 2]));
    let b = tape.constant(t(&[2], vec![1.0, 2.0]));
    assert_eq!(&*tape.linear(x, zw, Some(b)).unwrap().data(), &[1.0, 2.0]);
    let w = tape.constant(t(&[1, 2], vec![1.0, 1.0]));
    let b0 = tape.constant(Tensor::zeros(&[1]));
    assert_eq!(&*tape.linear(x, w, Some(b0)).unwrap().data(), &[7.0]);
    let w3 = tape.constant(Tensor::zeros(&[1, 3]));
    assert!(tape.linear(x, w3, None).is_err());
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let y = tape.softmax(tape.constant(t(&[2], vec![0.0, 0.0]))).unwrap();
    assert_eq!(&*y.data(), &[0.5, 0.5]);
    let y = tape.softmax(tape.constant(t(&[2], vec![1000.0, 0.0]))).unwrap();
    assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1] < 1e-300);
    let nan = tape.constant(t(&[2], vec![f64::NAN, 0.0]));
    assert!(tape.softmax(nan).is_err());
}

#[test]
fn cross_entropy_examples() {
    let tape = Tape::new();
    let p = tape.constant(t(&[3], vec![0.0, 1.0, 0.0]));
    assert_eq!(tape.cross_entropy(p, &[1]).unwrap().item(), 0.0);
    let u = tape.constant(Tensor::full(&[5], 0.2));
    for l in 0..5 {
        let ce = tape.cross_entropy(u, &[l]).unwrap().item();
        assert!((ce - 5f64.ln()).abs() < 1e-12);
    }
    let e = (-1f64).exp();
    let p = tape.constant(t(&[2], vec![e, 1.0 - e]));
    assert!((tape.cross_entropy(p, &[0]).unwrap().item() - 1.0).abs() < 1e-12);
    assert!(tape.cross_entropy(p, &[2]).is_err());
    let z = tape.constant(t(&[2], vec![0.0, 1.0]));
    assert!((tape.cross_entropy(z, &[0]).unwrap().item() - 1e12f64.ln()).abs() < 1e-9);
}

#[test]
fn l2_norm_examples() {
    let tape = Tape::new();
    let x = tape.variable(t(&[2], vec![3.0, 4.0]));
    assert_eq!(tape.l2_norm(x).item(), 5.0);
    let z = tape.variable(Tensor::zeros(&[3]));
    let n = tape.l2_norm(z);
    assert_eq!(n.item(), 0.0);
    let g = tape.backward(n).unwrap();
    assert_eq!(g.get(z).unwrap(), &[0.0, 0.0, 0.0]);
    let x3 = tape.constant(t(&[2], vec![7.5, 10.0]));
    assert!((tape.l2_norm(x3).item() - 2.5 * 5.0).abs() < 1e-12);
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.variable(Tensor::full(&[2, 3, 4], 0.3));
    let g = tape.backward(x.sum()).unwrap();
    assert!(g.get(x).unwrap().iter().all(|&v| v == 1.0));

    let tape = Tape::new();
    let x = tape.variable(t(&[3], vec![1.0, -2.0, 0.5]));
    let y = tape.variable(t(&[3], vec![4.0, 0.25, -3.0]));
    let g = tape.backward(x.mul(y).unwrap().sum()).unwrap();
    assert_eq!(g.get(x).unwrap(), &[4.0, 0.25, -3.0]);
    assert_eq!(g.get(y).unwrap(), &[1.0, -2.0, 0.5]);

    assert!(tape.backward(x).is_err());
}

#[test]
fn backward_accumulates_over_paths() {
    // f = sum(x*x) + sum(3x): combined gradient = 2x + 3.
    let tape = Tape::new();
    let x = tape.variable(t(&[3], vec![1.0, 2.0, -1.0]));
    let a = x.mul(x).unwrap().sum();
    let b = x.scale(3.0).sum();
    let g = tape.backward(a.add(b).unwrap()).unwrap();
    assert_eq!(g.get(x).unwrap(), &[5.0, 7.0, 1.0]);
}

#[test]
fn adam_first_step_hand_computed() {
    let mut p = Tensor::from_vec(vec![1.0]).with_grad();
    p.grad = Some(vec![1.0]);
    let mut adam = AdamState::new(0.001);
    adam.step(&mut [&mut p]).unwrap();
    assert!((p.data[0] - (1.0 - 0.001)).abs() < 1e-10);
}

proptest! {
    #[test]
    fn softmax_on_simplex(v in proptest::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(v.clone()));
        let y = tape.softmax(x).unwrap();
        let s: f64 = y.data().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-6);
        prop_assert!(y.data().iter().all(|&p| p > 0.0 && p <= 1.0));
        let shifted = tape.constant(Tensor::from_vec(v.iter().map(|a| a + c).collect()));
        let z = tape.softmax(shifted).unwrap();
        for (a, b) in y.data().iter().zip(z.data().iter()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn two_path_gradient_is_sum(v in proptest::collection::vec(-3.0f64..3.0, 1..10)) {
        let n = v.len();
        let x = Tensor::from_vec(v);
        let grad_of = |paths: u8| {
            let tape = Tape::new();
            let xv = tape.variable(x.clone());
            let p1 = xv.mul(xv).unwrap().sum();
            let p2 = tape.l2_norm(xv.scale(2.0));
            let loss = match paths {
                1 => p1,
                2 => p2,
                _ => p1.add(p2).unwrap(),
            };
            tape.backward(loss).unwrap().get_or_zeros(xv)
        };
        let (g1, g2, g12) = (grad_of(1), grad_of(2), grad_of(3));
        for i in 0..n {
            prop_assert!((g12[i] - g1[i] - g2[i]).abs() <= 1e-12);
        }
    }
}
