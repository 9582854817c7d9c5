use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdd::tensor::gradcheck::{check_gradients, GradCheckOptions};
use rdd::tensor::{RoiBox, Tape, Tensor};
use rdd::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct nested-loop cross-correlation.
fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [kn, _, kh, kw] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, kn, oh, ow]);
    for b in 0..n {
        for o in 0..kn {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.get(&[b, ch, iy as usize, ix as usize]) * k.get(&[o, ch, i, j]);
                                }
                            }
                        }
                    }
                    out.set(&[b, o, y, xx], acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv_sum_of_ones() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = x.conv2d(k, 1, 0).unwrap();
    assert_eq!(y.value().shape(), &[1, 1, 1, 1]);
    assert_eq!(y.value().item(), 9.0);
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xt = rand_tensor(&mut rng, &[2, 1, 5, 4]);
    let tape = Tape::new();
    let y = tape.constant(xt.clone()).conv2d(tape.constant(Tensor::ones(&[1, 1, 1, 1])), 1, 0).unwrap();
    assert_eq!(*y.value(), xt);
}

#[test]
fn conv_channel_mismatch_is_config_error() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
    let k = tape.constant(Tensor::ones(&[1, 3, 3, 3]));
    assert!(matches!(x.conv2d(k, 1, 1), Err(Error::Config(_))));
    let big = tape.constant(Tensor::ones(&[1, 2, 7, 7]));
    assert!(matches!(x.conv2d(big, 1, 1), Err(Error::Config(_))));
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xt = rand_tensor(&mut rng, &[1, 2, 5, 5]);
    let kt = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let tape = Tape::new();
    let y = tape.constant(xt.clone()).conv2d(tape.constant(kt.clone()), 1, 0).unwrap();
    assert!(y.value().max_abs_diff(&conv_oracle(&xt, &kt, 1, 0)) < 1e-12);

    // all shapes up to 4x4x8x8, with strides and padding
    for seed in 0..60u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=4);
        let c = rng.random_range(1..=4);
        let h = rng.random_range(3..=8);
        let w = rng.random_range(3..=8);
        let kn = rng.random_range(1..=4);
        let ks = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=1);
        let xt = rand_tensor(&mut rng, &[n, c, h, w]);
        let kt = rand_tensor(&mut rng, &[kn, c, ks, ks]);
        let tape = Tape::new();
        let y = tape.constant(xt.clone()).conv2d(tape.constant(kt.clone()), stride, pad).unwrap();
        let want = conv_oracle(&xt, &kt, stride, pad);
        assert!(y.value().max_abs_diff(&want) < 1e-12, "seed {seed}");
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xt = rand_tensor(&mut rng, &[2, 3, 6, 6]);
        let kt = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let tape = Tape::new();
        let y = tape.constant(xt).conv2d(tape.constant(kt), 2, 1).unwrap().relu();
        y.value().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn elementwise_examples() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
    let zero = tape.constant(Tensor::scalar(0.0));
    assert_eq!(*x.add(zero).unwrap().value(), *x.value());
    let other = tape.constant(Tensor::ones(&[2]));
    assert!(matches!(x.add(other), Err(Error::Config(_))));
}

#[test]
fn reduction_examples() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap());
    assert_eq!(x.l1_norm(&[]).unwrap().value().item(), 6.0);
    let y = tape.constant(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
    assert_eq!(y.l2_norm(&[]).unwrap().value().item(), 5.0);
    let m = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
    assert_eq!(m.sum(&[1]).unwrap().value().data(), &[3.0, 12.0]);
    assert_eq!(m.mean(&[0]).unwrap().value().data(), &[1.5, 2.5, 3.5]);
    assert!(matches!(m.sum(&[2]), Err(Error::Config(_))));
    let empty = tape.constant(Tensor::zeros(&[0, 3]));
    assert!(matches!(empty.sum(&[0]), Err(Error::Config(_))));
}

#[test]
fn backward_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xt = rand_tensor(&mut rng, &[4, 3]);

    let tape = Tape::new();
    let x = tape.leaf(xt.clone());
    let g = tape.backward(x.sum_all()).unwrap();
    assert_eq!(*g.get(x).unwrap(), Tensor::ones(&[4, 3]));

    let tape = Tape::new();
    let x = tape.leaf(xt.clone());
    let n = x.l2_norm(&[]).unwrap();
    let g = tape.backward(n.mul(n).unwrap()).unwrap();
    assert!(g.get(x).unwrap().max_abs_diff(&xt.map(|v| 2.0 * v)) < 1e-12);
}

#[test]
fn backward_contract_errors() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[3]));
    assert!(matches!(tape.backward(x.relu()), Err(Error::Usage(_))));
    let s = x.sum_all();
    assert!(tape.backward(s).is_ok());
    assert!(matches!(tape.backward(s), Err(Error::Usage(_))));
}

#[test]
fn constants_never_receive_gradient() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::full(&[2], 3.0));
    let g = tape.backward(a.mul(b).unwrap().sum_all()).unwrap();
    assert!(g.get(b).is_none());
    assert_eq!(g.get(a).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn l2_norm_gradient_is_zero_at_origin() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[4]));
    let g = tape.backward(x.l2_norm(&[]).unwrap()).unwrap();
    assert_eq!(*g.get(x).unwrap(), Tensor::zeros(&[4]));
}

#[test]
fn bilinear_examples() {
    let tape = Tape::new();
    let f = tape.constant(Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
    assert_eq!(f.bilinear_sample(0.5, 0.5).unwrap().value().item(), 1.5);
    assert_eq!(f.bilinear_sample(1.0, 0.0).unwrap().value().item(), 1.0);
    assert_eq!(f.bilinear_sample(-3.0, 7.0).unwrap().value().item(), 2.0);
    let c = tape.constant(Tensor::full(&[2, 5, 4], 0.25));
    let v = c.bilinear_sample(2.7, 1.3).unwrap().value();
    assert!(v.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
}

#[test]
fn composed_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xt = rand_tensor(&mut rng, &[1, 2, 6, 6]);
    let kt = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let report = check_gradients(
        &[xt, kt],
        |_, v| Ok(v[0].conv2d(v[1], 1, 1)?.relu().sum_all()),
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures);
}

#[test]
fn roi_and_softmax_and_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ft = rand_tensor(&mut rng, &[2, 3, 6, 7]);
    let boxes = vec![RoiBox::new(0, 2.3, 3.1, 3.4, 2.2), RoiBox::new(1, 5.2, 1.0, 4.0, 5.0)];
    let gamma = rand_tensor(&mut rng, &[3]);
    let beta = rand_tensor(&mut rng, &[3]);
    let w = rand_tensor(&mut rng, &[2, 3, 3, 3]);
    let report = check_gradients(
        &[ft, gamma, beta, w],
        |tape, v| {
            let p = v[0].roi_align(&boxes, 3)?;
            let (bn, _, _) = p.batch_norm(v[1], v[2], 1e-5)?;
            let s = bn.channel_softmax(2.0)?;
            let wv = tape.constant(Tensor::from_fn(&[2, 3, 3, 3], |i| (i as f64 * 0.37).sin()));
            let d = s.sub(v[3])?.mul(wv)?;
            Ok(d.l2_norm(&[1, 2, 3])?.sum_all())
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures);
}
