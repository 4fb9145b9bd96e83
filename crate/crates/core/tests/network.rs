//! Network oracles: hand-computed forward goldens, corner enumeration for
//! single affine layers, Monte-Carlo containment for the interval pass, and
//! finite-difference checks for both gradient paths.

use geocert::network::{Layer, Network};
use geocert::tensor::{BoundedTensor, Tensor};

/// Deterministic xorshift stream in [0, 1).
fn xrand(seed: u64) -> impl FnMut() -> f64 {
    let mut s = seed.max(1);
    move || {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 53) as f64
    }
}

fn ulps(a: f64, b: f64) -> u64 {
    fn key(x: f64) -> i64 {
        let b = x.to_bits() as i64;
        if b < 0 {
            i64::MIN.wrapping_sub(b)
        } else {
            b
        }
    }
    key(a).wrapping_sub(key(b)).unsigned_abs()
}

fn dense(w: Vec<Vec<f64>>, b: Vec<f64>) -> Layer<f64> {
    let out = w.len();
    let inp = w[0].len();
    let flat: Vec<f64> = w.into_iter().flatten().collect();
    Layer::Dense { w: Tensor::from_vec(vec![out, inp], flat), b }
}

fn rand_dense(rng: &mut impl FnMut() -> f64, inp: usize, out: usize) -> Layer<f64> {
    let w: Vec<f64> = (0..out * inp).map(|_| rng() * 2.0 - 1.0).collect();
    let b: Vec<f64> = (0..out).map(|_| rng() * 0.5 - 0.25).collect();
    Layer::Dense { w: Tensor::from_vec(vec![out, inp], w), b }
}

fn rand_conv(
    rng: &mut impl FnMut() -> f64,
    ic: usize,
    oc: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Layer<f64> {
    let w: Vec<f64> = (0..oc * ic * k * k).map(|_| rng() - 0.5).collect();
    let b: Vec<f64> = (0..oc).map(|_| rng() * 0.2 - 0.1).collect();
    Layer::Conv2d { w: Tensor::from_vec(vec![oc, ic, k, k], w), b, stride, padding }
}

fn rand_box(rng: &mut impl FnMut() -> f64, shape: Vec<usize>) -> BoundedTensor<f64> {
    let n: usize = shape.iter().product();
    let mut lo = Vec::with_capacity(n);
    let mut hi = Vec::with_capacity(n);
    for _ in 0..n {
        let a = rng() * 2.0 - 1.0;
        let b = a + rng() * 0.6;
        lo.push(a);
        hi.push(b);
    }
    BoundedTensor::new(Tensor::from_vec(shape.clone(), lo), Tensor::from_vec(shape, hi))
}

#[test]
fn dense_forward_golden() {
    let net = Network::new(vec![2], vec![dense(vec![vec![1.0, -1.0]], vec![0.5])]).unwrap();
    let y = net.forward_concrete(&Tensor::from_vec(vec![1, 2], vec![0.5, 0.5]));
    assert_eq!(y.shape(), &[1, 1]);
    assert_eq!(y.as_slice(), &[0.5]);
    assert_eq!(net.predict(&Tensor::from_vec(vec![2], vec![0.5, 0.5])), vec![0.5]);
    assert_eq!(net.output_dim(), 1);
    assert_eq!(net.input_shape(), &[2]);
}

#[test]
fn identity_dense_relu_preserves_nonnegative_input() {
    let eye = dense(
        vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
        vec![0.0; 3],
    );
    let net = Network::new(vec![3], vec![eye, Layer::Relu]).unwrap();
    let x = vec![0.1, 0.0, 2.5];
    assert_eq!(net.predict(&Tensor::from_vec(vec![3], x.clone())), x);
}

#[test]
fn empty_network_rejected() {
    assert!(Network::<f64>::new(vec![2], vec![]).is_err());
}

#[test]
fn shape_chain_validation() {
    // Dense expecting 3 inputs after a layer producing 2.
    assert!(Network::new(
        vec![2],
        vec![dense(vec![vec![1.0, 1.0], vec![0.0, 1.0]], vec![0.0; 2]), dense(vec![vec![1.0, 1.0, 1.0]], vec![0.0])],
    )
    .is_err());
    // Conv channel mismatch: input has 1 channel, filter expects 2.
    let mut rng = xrand(7);
    assert!(Network::new(vec![1, 4, 4], vec![rand_conv(&mut rng, 2, 3, 3, 1, 1)]).is_err());
    // Final output must be a vector.
    assert!(Network::new(vec![1, 4, 4], vec![rand_conv(&mut rng, 1, 2, 3, 1, 1)]).is_err());
    // Normalize channel count must match.
    assert!(Network::new(
        vec![2, 4, 4],
        vec![Layer::Normalize { mean: vec![0.5], std: vec![1.0] }, Layer::Flatten, dense(vec![vec![0.0; 32]], vec![0.0])],
    )
    .is_err());
    // Dense weight/bias length mismatch.
    assert!(Network::new(
        vec![2],
        vec![Layer::Dense { w: Tensor::from_vec(vec![2, 2], vec![1.0; 4]), b: vec![0.0; 3] }],
    )
    .is_err());
    // Nonpositive Normalize std rejected.
    assert!(Network::new(
        vec![1, 2, 2],
        vec![Layer::Normalize { mean: vec![0.0], std: vec![0.0] }, Layer::Flatten, dense(vec![vec![0.0; 4]], vec![0.0])],
    )
    .is_err());
}

#[test]
fn interval_dense_golden() {
    let net = Network::new(vec![2], vec![dense(vec![vec![1.0, -1.0]], vec![0.5])]).unwrap();
    let x = BoundedTensor::new(
        Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]),
        Tensor::from_vec(vec![1, 2], vec![1.0, 1.0]),
    );
    let out = net.forward_interval(&x);
    assert_eq!(out.lo.as_slice(), &[-0.5]);
    assert_eq!(out.hi.as_slice(), &[1.5]);
}

#[test]
fn relu_interval_golden() {
    let net = Network::new(vec![1], vec![Layer::Relu]).unwrap();
    let x = BoundedTensor::new(
        Tensor::from_vec(vec![1, 1], vec![-1.0]),
        Tensor::from_vec(vec![1, 1], vec![2.0]),
    );
    let out = net.forward_interval(&x);
    assert_eq!(out.lo.as_slice(), &[0.0]);
    assert_eq!(out.hi.as_slice(), &[2.0]);
}

/// One affine layer is exact under interval propagation: the output box
/// equals the true range, recovered here by corner enumeration.
#[test]
fn single_affine_interval_is_exact_range() {
    let mut rng = xrand(42);
    for trial in 0..20 {
        let net = Network::new(vec![3], vec![rand_dense(&mut rng, 3, 4)]).unwrap();
        let bx = rand_box(&mut rng, vec![1, 3]);
        let out = net.forward_interval(&bx);
        let mut min = vec![f64::INFINITY; 4];
        let mut max = vec![f64::NEG_INFINITY; 4];
        for corner in 0..8u32 {
            let x: Vec<f64> = (0..3)
                .map(|i| {
                    if corner >> i & 1 == 1 {
                        bx.hi.as_slice()[i]
                    } else {
                        bx.lo.as_slice()[i]
                    }
                })
                .collect();
            let y = net.predict(&Tensor::from_vec(vec![3], x));
            for (o, v) in y.iter().enumerate() {
                min[o] = min[o].min(*v);
                max[o] = max[o].max(*v);
            }
        }
        for o in 0..4 {
            assert!(
                (out.lo.as_slice()[o] - min[o]).abs() < 1e-12
                    && (out.hi.as_slice()[o] - max[o]).abs() < 1e-12,
                "trial {trial} output {o}: [{}, {}] vs corners [{}, {}]",
                out.lo.as_slice()[o],
                out.hi.as_slice()[o],
                min[o],
                max[o]
            );
        }
    }
    // Same exactness for the frozen batch-norm affine, including a negative
    // scale (endpoint swap).
    let bn = Layer::BatchNormEval {
        scale: vec![1.5, -2.0],
        shift: vec![0.1, -0.3],
        mean: vec![0.2, 0.1],
        var: vec![0.25, 4.0],
        eps: 1e-5,
    };
    let net = Network::new(vec![2], vec![bn]).unwrap();
    let bx = BoundedTensor::new(
        Tensor::from_vec(vec![1, 2], vec![-0.4, 0.2]),
        Tensor::from_vec(vec![1, 2], vec![0.9, 1.1]),
    );
    let out = net.forward_interval(&bx);
    let mut min = vec![f64::INFINITY; 2];
    let mut max = vec![f64::NEG_INFINITY; 2];
    for corner in 0..4u32 {
        let x: Vec<f64> = (0..2)
            .map(|i| if corner >> i & 1 == 1 { bx.hi.as_slice()[i] } else { bx.lo.as_slice()[i] })
            .collect();
        let y = net.predict(&Tensor::from_vec(vec![2], x));
        for (o, v) in y.iter().enumerate() {
            min[o] = min[o].min(*v);
            max[o] = max[o].max(*v);
        }
    }
    for o in 0..2 {
        assert!((out.lo.as_slice()[o] - min[o]).abs() < 1e-12);
        assert!((out.hi.as_slice()[o] - max[o]).abs() < 1e-12);
    }
}

#[test]
fn degenerate_input_collapses_to_concrete() {
    let mut rng = xrand(99);
    let net = Network::new(
        vec![1, 4, 4],
        vec![
            Layer::Normalize { mean: vec![0.3], std: vec![0.8] },
            rand_conv(&mut rng, 1, 2, 3, 1, 1),
            Layer::Relu,
            Layer::Flatten,
            rand_dense(&mut rng, 32, 5),
        ],
    )
    .unwrap();
    let x: Vec<f64> = (0..16).map(|_| rng()).collect();
    let xt = Tensor::from_vec(vec![1, 1, 4, 4], x);
    let y = net.forward_concrete(&xt);
    let out = net.forward_interval(&BoundedTensor::point(xt));
    for o in 0..5 {
        let c = y.as_slice()[o];
        assert!(ulps(out.lo.as_slice()[o], c) <= 4, "lo {} vs {}", out.lo.as_slice()[o], c);
        assert!(ulps(out.hi.as_slice()[o], c) <= 4, "hi {} vs {}", out.hi.as_slice()[o], c);
    }
}

fn sample_nets(seed: u64) -> Vec<(Network<f64>, Vec<usize>)> {
    let mut rng = xrand(seed);
    let mut nets = Vec::new();
    nets.push((
        Network::new(
            vec![6],
            vec![rand_dense(&mut rng, 6, 8), Layer::Relu, rand_dense(&mut rng, 8, 8), Layer::Relu, rand_dense(&mut rng, 8, 3)],
        )
        .unwrap(),
        vec![6],
    ));
    nets.push((
        Network::new(
            vec![1, 5, 5],
            vec![
                Layer::Normalize { mean: vec![0.2], std: vec![0.5] },
                rand_conv(&mut rng, 1, 3, 3, 2, 1),
                Layer::Relu,
                Layer::Flatten,
                rand_dense(&mut rng, 27, 4),
            ],
        )
        .unwrap(),
        vec![1, 5, 5],
    ));
    nets.push((
        Network::new(
            vec![4],
            vec![
                rand_dense(&mut rng, 4, 6),
                Layer::BatchNormEval {
                    scale: vec![1.0, -0.5, 2.0, 0.7, -1.2, 0.0],
                    shift: vec![0.1; 6],
                    mean: vec![0.0, 0.1, -0.1, 0.2, 0.0, 0.3],
                    var: vec![1.0, 0.5, 2.0, 1.5, 0.25, 1.0],
                    eps: 1e-5,
                },
                Layer::Relu,
                rand_dense(&mut rng, 6, 2),
            ],
        )
        .unwrap(),
        vec![4],
    ));
    nets
}

#[test]
fn ibp_soundness_monte_carlo() {
    for seed in 1..=7u64 {
        let mut rng = xrand(seed * 7919);
        for (net, shape) in sample_nets(seed) {
            let mut bshape = vec![1];
            bshape.extend_from_slice(&shape);
            let bx = rand_box(&mut rng, bshape.clone());
            let out = net.forward_interval(&bx);
            let n: usize = shape.iter().product();
            for _ in 0..100 {
                let x: Vec<f64> = (0..n)
                    .map(|i| {
                        let (l, h) = (bx.lo.as_slice()[i], bx.hi.as_slice()[i]);
                        l + rng() * (h - l)
                    })
                    .collect();
                let y = net.forward_concrete(&Tensor::from_vec(bshape.clone(), x));
                for o in 0..net.output_dim() {
                    let v = y.as_slice()[o];
                    assert!(
                        v >= out.lo.as_slice()[o] - 1e-9 && v <= out.hi.as_slice()[o] + 1e-9,
                        "seed {seed}: output {o} = {v} outside [{}, {}]",
                        out.lo.as_slice()[o],
                        out.hi.as_slice()[o]
                    );
                }
            }
        }
    }
}

#[test]
fn ibp_monotone_under_box_shrink() {
    for seed in 1..=5u64 {
        let mut rng = xrand(seed * 31 + 1);
        for (net, shape) in sample_nets(seed + 100) {
            let mut bshape = vec![1];
            bshape.extend_from_slice(&shape);
            let outer = rand_box(&mut rng, bshape.clone());
            let n: usize = shape.iter().product();
            let mut lo = Vec::with_capacity(n);
            let mut hi = Vec::with_capacity(n);
            for i in 0..n {
                let (l, h) = (outer.lo.as_slice()[i], outer.hi.as_slice()[i]);
                let a = l + rng() * (h - l) * 0.5;
                let b = a + (h - a) * rng();
                lo.push(a);
                hi.push(b);
            }
            let inner = BoundedTensor::new(
                Tensor::from_vec(bshape.clone(), lo),
                Tensor::from_vec(bshape.clone(), hi),
            );
            let big = net.forward_interval(&outer);
            let small = net.forward_interval(&inner);
            for o in 0..net.output_dim() {
                assert!(small.lo.as_slice()[o] >= big.lo.as_slice()[o] - 1e-12);
                assert!(small.hi.as_slice()[o] <= big.hi.as_slice()[o] + 1e-12);
            }
        }
    }
}

#[test]
fn scalar_linear_gradient() {
    let net = Network::new(vec![1], vec![dense(vec![vec![3.0]], vec![0.0])]).unwrap();
    let x = Tensor::from_vec(vec![1, 1], vec![2.0]);
    let (y, tape) = net.forward_concrete_taped(&x);
    assert_eq!(y.as_slice(), &[6.0]);
    let g = net.backward_concrete(&tape, &Tensor::from_vec(vec![1, 1], vec![1.0]));
    assert_eq!(g, vec![2.0, 1.0]); // dL/dw = x, dL/db = 1
}

/// Radius-term gradients for an all-positive weight matrix: the hi endpoint
/// differentiates to the input's hi, the lo endpoint to the input's lo.
#[test]
fn radius_gradient_positive_weights() {
    let w = vec![vec![0.5, 1.5, 0.25], vec![2.0, 0.75, 1.0]];
    let net = Network::new(vec![3], vec![dense(w, vec![0.0, 0.0])]).unwrap();
    let lo = vec![0.1, -0.4, 0.7];
    let hi = vec![0.3, 0.2, 1.1];
    let bx = BoundedTensor::new(
        Tensor::from_vec(vec![1, 3], lo.clone()),
        Tensor::from_vec(vec![1, 3], hi.clone()),
    );
    let (_, tape) = net.forward_interval_taped(&bx);
    for o in 0..2 {
        let mut gh = vec![0.0; 2];
        gh[o] = 1.0;
        let g = net.backward_interval(
            &tape,
            &Tensor::from_vec(vec![1, 2], vec![0.0; 2]),
            &Tensor::from_vec(vec![1, 2], gh),
        );
        for i in 0..3 {
            assert!((g[o * 3 + i] - hi[i]).abs() < 1e-15, "dW[{o},{i}] = {}", g[o * 3 + i]);
        }
        assert!((g[6 + o] - 1.0).abs() < 1e-15);

        let mut gl = vec![0.0; 2];
        gl[o] = 1.0;
        let g = net.backward_interval(
            &tape,
            &Tensor::from_vec(vec![1, 2], gl),
            &Tensor::from_vec(vec![1, 2], vec![0.0; 2]),
        );
        for i in 0..3 {
            assert!((g[o * 3 + i] - lo[i]).abs() < 1e-15);
        }
    }
}

/// |W| differentiates with sign(0) = 0: a zero weight gets no radius
/// contribution.
#[test]
fn sign_zero_gets_no_radius_gradient() {
    let net = Network::new(vec![2], vec![dense(vec![vec![0.0, 0.7]], vec![0.0])]).unwrap();
    let bx = BoundedTensor::new(
        Tensor::from_vec(vec![1, 2], vec![0.2, -0.5]),
        Tensor::from_vec(vec![1, 2], vec![0.8, 0.1]),
    );
    let (_, tape) = net.forward_interval_taped(&bx);
    let g = net.backward_interval(
        &tape,
        &Tensor::from_vec(vec![1, 1], vec![0.0]),
        &Tensor::from_vec(vec![1, 1], vec![1.0]),
    );
    let mid0 = (0.2 + 0.8) / 2.0;
    assert!((g[0] - mid0).abs() < 1e-15, "zero weight must see only the mid term, got {}", g[0]);
}

fn fd_gradient(
    net: &mut Network<f64>,
    loss: &dyn Fn(&Network<f64>) -> f64,
    h: f64,
) -> Vec<f64> {
    let base = net.params();
    let mut g = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        net.set_params(&p);
        let up = loss(net);
        p[i] = base[i] - h;
        net.set_params(&p);
        let down = loss(net);
        g.push((up - down) / (2.0 * h));
    }
    net.set_params(&base);
    g
}

fn assert_close(analytic: &[f64], fd: &[f64], tol: f64) {
    assert_eq!(analytic.len(), fd.len());
    for (i, (a, f)) in analytic.iter().zip(fd).enumerate() {
        let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-6);
        assert!(rel < tol, "param {i}: analytic {a} vs fd {f} (rel {rel})");
    }
}

#[test]
fn concrete_gradients_match_finite_differences_dense() {
    let mut rng = xrand(2024);
    let mut net = Network::new(
        vec![2],
        vec![rand_dense(&mut rng, 2, 16), Layer::Relu, rand_dense(&mut rng, 16, 2)],
    )
    .unwrap();
    let x = Tensor::from_vec(vec![3, 2], (0..6).map(|_| rng() * 2.0 - 1.0).collect());
    let c = Tensor::from_vec(vec![3, 2], (0..6).map(|_| rng() * 2.0 - 1.0).collect());
    let (_, tape) = net.forward_concrete_taped(&x);
    let analytic = net.backward_concrete(&tape, &c);
    let loss = |n: &Network<f64>| {
        let y = n.forward_concrete(&x);
        y.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum()
    };
    let fd = fd_gradient(&mut net, &loss, 1e-6);
    assert_close(&analytic, &fd, 1e-4);
}

#[test]
fn concrete_gradients_match_finite_differences_conv() {
    let mut rng = xrand(777);
    let mut net = Network::new(
        vec![1, 6, 6],
        vec![
            rand_conv(&mut rng, 1, 2, 3, 2, 1),
            Layer::Relu,
            Layer::Flatten,
            rand_dense(&mut rng, 18, 3),
        ],
    )
    .unwrap();
    let x = Tensor::from_vec(vec![2, 1, 6, 6], (0..72).map(|_| rng()).collect());
    let c = Tensor::from_vec(vec![2, 3], (0..6).map(|_| rng() * 2.0 - 1.0).collect());
    let (_, tape) = net.forward_concrete_taped(&x);
    let analytic = net.backward_concrete(&tape, &c);
    let loss = |n: &Network<f64>| {
        let y = n.forward_concrete(&x);
        y.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum()
    };
    let fd = fd_gradient(&mut net, &loss, 1e-6);
    assert_close(&analytic, &fd, 1e-4);
}

/// Interval-pass gradients through every layer type, checked against central
/// finite differences of a fixed linear functional of both endpoints.
#[test]
fn interval_gradients_match_finite_differences() {
    let mut rng = xrand(31337);
    let mut net = Network::new(
        vec![1, 4, 4],
        vec![
            Layer::Normalize { mean: vec![0.25], std: vec![0.7] },
            rand_conv(&mut rng, 1, 2, 3, 1, 0),
            Layer::Relu,
            Layer::Flatten,
            rand_dense(&mut rng, 8, 4),
            Layer::BatchNormEval {
                scale: vec![1.2, -0.8, 0.5, 1.0],
                shift: vec![0.0, 0.1, -0.1, 0.2],
                mean: vec![0.1, 0.0, 0.2, -0.1],
                var: vec![1.0, 0.5, 2.0, 0.8],
                eps: 1e-5,
            },
        ],
    )
    .unwrap();
    let bx = rand_box(&mut rng, vec![2, 1, 4, 4]);
    let cl = Tensor::from_vec(vec![2, 4], (0..8).map(|_| rng() * 2.0 - 1.0).collect());
    let ch = Tensor::from_vec(vec![2, 4], (0..8).map(|_| rng() * 2.0 - 1.0).collect());
    let (_, tape) = net.forward_interval_taped(&bx);
    let analytic = net.backward_interval(&tape, &cl, &ch);
    let loss = |n: &Network<f64>| {
        let out = n.forward_interval(&bx);
        let a: f64 = out.lo.as_slice().iter().zip(cl.as_slice()).map(|(a, b)| a * b).sum();
        let b: f64 = out.hi.as_slice().iter().zip(ch.as_slice()).map(|(a, b)| a * b).sum();
        a + b
    };
    let fd = fd_gradient(&mut net, &loss, 1e-6);
    assert_close(&analytic, &fd, 1e-4);
}

#[test]
fn batched_forward_matches_per_sample() {
    let mut rng = xrand(555);
    let net = Network::new(
        vec![1, 5, 5],
        vec![rand_conv(&mut rng, 1, 3, 3, 2, 1), Layer::Relu, Layer::Flatten, rand_dense(&mut rng, 27, 4)],
    )
    .unwrap();
    let x = Tensor::from_vec(vec![3, 1, 5, 5], (0..75).map(|_| rng()).collect());
    let batch = net.forward_concrete(&x);
    for s in 0..3 {
        let one = Tensor::from_vec(vec![1, 5, 5], x.as_slice()[s * 25..(s + 1) * 25].to_vec());
        let y = net.predict(&one);
        for o in 0..4 {
            assert!((batch.as_slice()[s * 4 + o] - y[o]).abs() < 1e-12);
        }
    }
    let bx = rand_box(&mut rng, vec![3, 1, 5, 5]);
    let batch_iv = net.forward_interval(&bx);
    for s in 0..3 {
        let one = BoundedTensor::new(
            Tensor::from_vec(vec![1, 1, 5, 5], bx.lo.as_slice()[s * 25..(s + 1) * 25].to_vec()),
            Tensor::from_vec(vec![1, 1, 5, 5], bx.hi.as_slice()[s * 25..(s + 1) * 25].to_vec()),
        );
        let out = net.forward_interval(&one);
        for o in 0..4 {
            assert!((batch_iv.lo.as_slice()[s * 4 + o] - out.lo.as_slice()[o]).abs() < 1e-12);
            assert!((batch_iv.hi.as_slice()[s * 4 + o] - out.hi.as_slice()[o]).abs() < 1e-12);
        }
    }
}

#[test]
fn batched_backward_is_sum_of_per_sample_gradients() {
    let mut rng = xrand(4242);
    let net = Network::new(
        vec![3],
        vec![rand_dense(&mut rng, 3, 5), Layer::Relu, rand_dense(&mut rng, 5, 2)],
    )
    .unwrap();
    let x = Tensor::from_vec(vec![2, 3], (0..6).map(|_| rng() * 2.0 - 1.0).collect());
    let c = Tensor::from_vec(vec![2, 2], (0..4).map(|_| rng() * 2.0 - 1.0).collect());
    let (_, tape) = net.forward_concrete_taped(&x);
    let g = net.backward_concrete(&tape, &c);
    let mut sum = vec![0.0; g.len()];
    for s in 0..2 {
        let xs = Tensor::from_vec(vec![1, 3], x.as_slice()[s * 3..(s + 1) * 3].to_vec());
        let cs = Tensor::from_vec(vec![1, 2], c.as_slice()[s * 2..(s + 1) * 2].to_vec());
        let (_, t) = net.forward_concrete_taped(&xs);
        for (acc, v) in sum.iter_mut().zip(net.backward_concrete(&t, &cs)) {
            *acc += v;
        }
    }
    for (a, b) in g.iter().zip(&sum) {
        assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
    }
}

#[test]
fn params_roundtrip() {
    let mut rng = xrand(12);
    let mut net = Network::new(
        vec![1, 4, 4],
        vec![rand_conv(&mut rng, 1, 2, 3, 1, 1), Layer::Relu, Layer::Flatten, rand_dense(&mut rng, 32, 3)],
    )
    .unwrap();
    let n = 2 * 1 * 3 * 3 + 2 + 32 * 3 + 3;
    assert_eq!(net.param_count(), n);
    let p = net.params();
    assert_eq!(p.len(), n);
    let bumped: Vec<f64> = p.iter().map(|v| v + 1.0).collect();
    net.set_params(&bumped);
    assert_eq!(net.params(), bumped);
}

#[test]
#[should_panic]
fn backward_rejects_mismatched_output_grad() {
    let net = Network::new(vec![2], vec![dense(vec![vec![1.0, 1.0]], vec![0.0])]).unwrap();
    let (_, tape) = net.forward_concrete_taped(&Tensor::from_vec(vec![1, 2], vec![0.1, 0.2]));
    net.backward_concrete(&tape, &Tensor::from_vec(vec![1, 3], vec![1.0, 1.0, 1.0]));
}

#[test]
fn he_initialization_scale() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let layer: Layer<f64> = Layer::dense_init(&mut rng, 1000, 4);
    if let Layer::Dense { w, .. } = &layer {
        let var: f64 =
            w.as_slice().iter().map(|v| v * v).sum::<f64>() / w.as_slice().len() as f64;
        // He variance 2/fan_in with generous sampling slack.
        assert!(var > 1.4 / 1000.0 && var < 2.8 / 1000.0, "sample variance {var}");
    } else {
        panic!("dense_init must build a dense layer");
    }
}
