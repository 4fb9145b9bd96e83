//! Acceptance gate: one test per shipping criterion. Every test prints a
//! single ACCEPT/REJECT line with the measured numbers and the tolerance it
//! was held to, then asserts. Tolerances are pinned here, not in config.
//!
//! Heavy criteria use the bundled MNIST IDX files under data/mnist; the
//! desk-scale training check (criterion 6) trains two conv nets on a 10k
//! subset and certifies 500 test images, so this binary takes minutes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use geocert::certify::{certify_dataset, split_params, CertifyOptions};
use geocert::data::{arch_from_json, load_idx, Dataset};
use geocert::geometry::TransformChain;
use geocert::interp::{interpolate, make_interp_grid, perturb, reference_interpolate};
use geocert::network::{Layer, Network};
use geocert::tensor::Tensor;
use geocert::train::{fit, loss_ct, loss_r, tune_nu, TrainConfig};

fn verdict(criterion: usize, ok: bool, detail: &str) {
    println!("{} criterion {criterion}: {detail}", if ok { "ACCEPT" } else { "REJECT" });
    assert!(ok, "criterion {criterion}: {detail}");
}

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn mnist(split: &str) -> Dataset<f32> {
    let dir = mnist_dir();
    load_idx(
        &dir.join(format!("{split}-images-idx3-ubyte.gz")),
        &dir.join(format!("{split}-labels-idx1-ubyte.gz")),
    )
    .expect("bundled MNIST files")
}

fn xrand(seed: u64) -> impl FnMut() -> f64 {
    let mut s = seed.max(1);
    move || {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Random transformation chain within the fuzz widths: up to three affine
/// stages from {R, Tu, Tv, Sc, Sh}, occasionally a pixelwise stage.
fn random_chain(rng: &mut impl FnMut() -> f64, pixelwise: bool) -> TransformChain<f64> {
    let stages = 1 + (rng() * 3.0) as usize;
    let mut spec = String::new();
    for _ in 0..stages {
        let kind = (rng() * 5.0) as usize;
        let tok = match kind {
            0 => format!("R({:.4})", 0.2 + rng() * 4.8),
            1 => format!("Tu({:.4})", 0.1 + rng() * 1.9),
            2 => format!("Tv({:.4})", 0.1 + rng() * 1.9),
            3 => format!("Sc({:.4})", 0.2 + rng() * 4.8),
            _ => format!("Sh({:.4})", 0.2 + rng() * 4.8),
        };
        spec.push_str(&tok);
        spec.push(' ');
    }
    if pixelwise && rng() < 0.4 {
        spec.push_str(&format!("C({:.4}) B({:.4})", rng() * 3.0, rng() * 0.01));
    }
    TransformChain::parse(spec.trim()).unwrap()
}

fn random_image(rng: &mut impl FnMut() -> f64, c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_vec(vec![c, h, w], (0..c * h * w).map(|_| rng()).collect())
}

#[test]
fn criterion_1_golden_example() {
    let start = Instant::now();
    #[rustfmt::skip]
    let x = Tensor::from_vec(vec![1, 3, 3], vec![
        0.55, 0.50, 0.42,
        0.53, 0.49, 0.51,
        0.56, 0.62, 0.45,
    ]);
    let chain = TransformChain::<f64>::parse("Sc(-2,2)").unwrap();
    let grid = make_interp_grid(3, 3, &chain);
    let z_ok = grid.z == vec![4, 2, 4, 2, 1, 2, 4, 2, 4];

    let out = interpolate(&x, &grid);
    let display = [
        (0.53, 0.57), (0.49, 0.51), (0.40, 0.44),
        (0.52, 0.54), (0.49, 0.49), (0.50, 0.52),
        (0.54, 0.58), (0.61, 0.63), (0.43, 0.47),
    ];
    let round2 = |v: f64| (v * 100.0).round() / 100.0;
    let mut display_ok = true;
    for (i, &(lo, hi)) in display.iter().enumerate() {
        let got = out.get(i);
        display_ok &= (round2(got.lo), round2(got.hi)) == (lo, hi);
    }

    let reference = reference_interpolate(&x, &chain);
    let mut gap = 0.0f64;
    for i in 0..9 {
        gap = gap.max((out.get(i).lo - reference.get(i).lo).abs());
        gap = gap.max((out.get(i).hi - reference.get(i).hi).abs());
    }
    let ms = start.elapsed().as_secs_f64() * 1e3;
    verdict(
        1,
        z_ok && display_ok && gap <= 1e-9 && ms < 1000.0,
        &format!(
            "3x3 Sc(2%) grid counts {}, nine two-decimal intervals {}, reference gap {gap:.2e} (<= 1e-9), {ms:.1} ms",
            if z_ok { "match" } else { "differ" },
            if display_ok { "match" } else { "differ" },
        ),
    );
}

#[test]
fn criterion_2_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = xrand(0xC2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let h = 3 + (rng() * 14.0) as usize;
        let w = 3 + (rng() * 14.0) as usize;
        let x = random_image(&mut rng, 1, h.min(16), w.min(16));
        let chain = random_chain(&mut rng, false);
        let grid = make_interp_grid(x.shape()[1], x.shape()[2], &chain);
        let fast = interpolate(&x, &grid);
        let slow = reference_interpolate(&x, &chain);
        for i in 0..x.as_slice().len() {
            worst = worst.max((fast.get(i).lo - slow.get(i).lo).abs());
            worst = worst.max((fast.get(i).hi - slow.get(i).hi).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        worst <= 1e-9 && secs < 60.0,
        &format!(
            "1000 fuzzed chains up to 16x16: max endpoint gap vs dense reference {worst:.2e} (<= 1e-9), {secs:.1} s (< 60)"
        ),
    );
}

#[test]
fn criterion_3_soundness_monte_carlo() {
    let start = Instant::now();
    let mut rng = xrand(0xC3);
    let mut worst_pixel = 0.0f64;
    let mut worst_logit = 0.0f64;
    for case in 0..200 {
        let h = 4 + (rng() * 9.0) as usize;
        let w = 4 + (rng() * 9.0) as usize;
        let x = random_image(&mut rng, 1, h, w);
        let chain = random_chain(&mut rng, true);
        let box_out = perturb(&batched(&x), &chain);

        let mut seeder = ChaCha8Rng::seed_from_u64(case as u64);
        let net = random_small_net(&mut seeder, 1, h, w, case % 2 == 0);
        let net_out = net.forward_interval(&box_out);

        let params = chain.params();
        for _ in 0..50 {
            let theta: Vec<f64> = params.iter().map(|p| p.lo + p.width() * rng()).collect();
            let cell = chain.at(&theta).unwrap();
            let concrete = perturb(&batched(&x), &cell).lo;
            for i in 0..concrete.as_slice().len() {
                let v = concrete.as_slice()[i];
                let iv = box_out.get(i);
                worst_pixel = worst_pixel.max(iv.lo - v).max(v - iv.hi);
            }
            let logits = net.forward_concrete(&concrete);
            for (o, &v) in logits.as_slice().iter().enumerate() {
                let iv = net_out.get(o);
                worst_logit = worst_logit.max(iv.lo - v).max(v - iv.hi);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        3,
        worst_pixel <= 1e-9 && worst_logit <= 1e-9 && secs < 120.0,
        &format!(
            "200 cases x 50 samples: max pixel escape {worst_pixel:.2e}, max logit escape {worst_logit:.2e} (<= 1e-9), {secs:.1} s (< 120)"
        ),
    );
}

fn batched(x: &Tensor<f64>) -> Tensor<f64> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    Tensor::from_vec(shape, x.as_slice().to_vec())
}

fn random_small_net(
    rng: &mut ChaCha8Rng,
    c: usize,
    h: usize,
    w: usize,
    with_conv: bool,
) -> Network<f64> {
    if with_conv {
        let (oh, ow) = ((h + 2 - 3) / 1 + 1, (w + 2 - 3) / 1 + 1);
        Network::new(
            vec![c, h, w],
            vec![
                Layer::conv2d_init(rng, c, 2, 3, 1, 1),
                Layer::Relu,
                Layer::Flatten,
                Layer::dense_init(rng, 2 * oh * ow, 4),
            ],
        )
        .unwrap()
    } else {
        Network::new(
            vec![c, h, w],
            vec![
                Layer::Flatten,
                Layer::dense_init(rng, c * h * w, 8),
                Layer::Relu,
                Layer::dense_init(rng, 8, 4),
            ],
        )
        .unwrap()
    }
}

#[test]
fn criterion_4_gradient_checks() {
    let start = Instant::now();
    let mut seeder = ChaCha8Rng::seed_from_u64(0xC4);
    // Two conv and two dense layers, checked in 64-bit through the full
    // interval perturbation pipeline.
    let net = Network::new(
        vec![1, 8, 8],
        vec![
            Layer::conv2d_init(&mut seeder, 1, 2, 3, 2, 1),
            Layer::Relu,
            Layer::conv2d_init(&mut seeder, 2, 3, 3, 1, 1),
            Layer::Relu,
            Layer::Flatten,
            Layer::dense_init(&mut seeder, 48, 8),
            Layer::Relu,
            Layer::dense_init(&mut seeder, 8, 3),
        ],
    )
    .unwrap();
    let mut rng = xrand(0xC4F);
    let x = Tensor::from_vec(vec![2, 1, 8, 8], (0..128).map(|_| rng()).collect());
    let chain = TransformChain::<f64>::parse("R(5) Tu(1)").unwrap();
    let theta: Vec<f64> = chain.params().iter().map(|p| p.mid()).collect();
    let ball: Vec<geocert::Interval<f64>> =
        theta.iter().map(|&t| geocert::Interval::new(t - 0.004, t + 0.004)).collect();

    let mut worst = 0.0f64;
    {
        let y = vec![1usize, 2];
        let (_, grads) = loss_ct(&net, &x, &y, &chain, &theta, &ball, 0.4);
        worst = worst.max(fd_worst(&net, &grads, |n| {
            loss_ct(n, &x, &y, &chain, &theta, &ball, 0.4).0
        }));
    }
    {
        let targets = Tensor::from_vec(vec![2, 3], vec![0.2, -0.1, 0.4, 0.0, 0.3, -0.2]);
        let (_, grads) = loss_r(&net, &x, &targets, &chain, &theta, &ball, 0.6);
        worst = worst.max(fd_worst(&net, &grads, |n| {
            loss_r(n, &x, &targets, &chain, &theta, &ball, 0.6).0
        }));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        4,
        worst < 1e-4 && secs < 120.0,
        &format!(
            "classification and regression losses on a 2-conv/2-dense net: max relative gradient error {worst:.2e} (< 1e-4), {secs:.1} s (< 120)"
        ),
    );
}

/// Max relative error of analytic grads vs central finite differences.
fn fd_worst(
    net: &Network<f64>,
    grads: &[f64],
    mut eval: impl FnMut(&Network<f64>) -> f64,
) -> f64 {
    let h = 1e-6;
    let base = net.params();
    let mut worst = 0.0f64;
    let mut probe = net.clone();
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        probe.set_params(&p);
        let up = eval(&probe);
        p[i] = base[i] - h;
        probe.set_params(&p);
        let down = eval(&probe);
        let fd = (up - down) / (2.0 * h);
        let rel = (grads[i] - fd).abs() / grads[i].abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn criterion_5_tuning_reproduction() {
    let start = Instant::now();
    let train = mnist("train");
    let chain = TransformChain::<f32>::parse("R(30)").unwrap();

    // Training ball: width 0.5 degrees (nu = 0.25 degrees).
    let t = tune_nu(&train.images, &chain, &[0.25f32.to_radians()], 42);
    // Certification cell: width 0.25 degrees (nu = 0.125 degrees).
    let c = tune_nu(&train.images, &chain, &[0.125f32.to_radians()], 43);
    let secs = start.elapsed().as_secs_f64();

    let t_mean_ok = (t.mean - 0.019).abs() <= 0.019 * 0.2;
    let t_max_ok = (t.max - 0.234).abs() <= 0.05;
    let c_mean_ok = (c.mean - 0.010).abs() <= 0.010 * 0.2;
    let c_max_ok = (c.max - 0.124).abs() <= 0.05;
    verdict(
        5,
        t_mean_ok && t_max_ok && c_mean_ok && c_max_ok && secs < 600.0,
        &format!(
            "60k MNIST R(30): width 0.5 deg mean {:.4} (0.019 +-20%) max {:.4} (0.234 +-0.05); width 0.25 deg mean {:.4} (0.010 +-20%) max {:.4} (0.124 +-0.05); {:.0} s",
            t.mean, t.max, c.mean, c.max, secs
        ),
    );
}

fn desk_config(kappa_final: f64) -> TrainConfig<f32> {
    let chain = TransformChain::<f32>::parse("R(30)").unwrap();
    let mut cfg = TrainConfig::new(chain, vec![0.25f32.to_radians()]);
    cfg.epochs = 25;
    cfg.warmup_epochs = 5;
    cfg.rampup_epochs = 15;
    cfg.kappa_final = kappa_final;
    cfg.batch_size = 128;
    cfg.lr = 2e-3;
    cfg.seed = 0;
    cfg
}

fn desk_arch(stats: &[(f32, f32)]) -> Network<f32> {
    let arch = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mnist-2conv.json"),
    )
    .unwrap();
    arch_from_json(&arch, stats, 0).unwrap()
}

#[test]
fn criterion_6_desk_scale_training() {
    let start = Instant::now();
    let train = mnist("train").head(10_000);
    let test = mnist("t10k").head(500);
    let plan =
        split_params(&TransformChain::<f32>::parse("R(30)").unwrap(), &[240]).unwrap();
    let opts = CertifyOptions::default();

    let mut cgt = desk_arch(&train.channel_stats);
    fit(&mut cgt, &train.images, &train.labels, &desk_config(0.5)).unwrap();
    let cgt_report = certify_dataset(&cgt, &test.images, &test.labels, &plan, &opts);

    let mut aug = desk_arch(&train.channel_stats);
    fit(&mut aug, &train.images, &train.labels, &desk_config(1.0)).unwrap();
    let aug_report = certify_dataset(&aug, &test.images, &test.labels, &plan, &opts);

    let secs = start.elapsed().as_secs_f64();
    let clean = cgt_report.aggregate.clean_acc;
    let certified = cgt_report.aggregate.certified;
    let baseline = aug_report.aggregate.certified;
    verdict(
        6,
        certified >= 0.60 && clean >= 0.97 && baseline <= 0.05 && secs <= 1800.0,
        &format!(
            "10k-image R(30) training, 500 images certified at 0.25-deg splits: robust-trained clean {clean:.3} (>= 0.97) certified {certified:.3} (>= 0.60); augmentation-only certified {baseline:.3} (<= 0.05, clean {:.3}); {secs:.0} s (<= 1800)",
            aug_report.aggregate.clean_acc
        ),
    );
}

#[test]
fn criterion_7_sparsity_and_amortization() {
    let start = Instant::now();
    // One 0.25-degree-wide rotation cell on 28x28, as certification uses.
    let chain = TransformChain::<f32>::parse("R(14.75,15)").unwrap();
    let grid = make_interp_grid(28, 28, &chain);
    let cells = (28.0f64 * 28.0) * (28.0 * 28.0);
    let nnz_fraction = grid.w.len() as f64 / cells;

    let test = mnist("t10k").head(256);
    let t0 = Instant::now();
    let fast = interpolate(&test.images, &grid);
    let batched_s = t0.elapsed().as_secs_f64();
    assert_eq!(fast.lo.as_slice().len(), 256 * 784);

    let t1 = Instant::now();
    for i in 0..256 {
        let img = Tensor::from_vec(vec![1, 28, 28], test.images.chunk(i, 784).to_vec());
        let slow = reference_interpolate(&img, &chain);
        // Same math, so spot-check agreement while we pay for the loop.
        assert!((slow.get(100).lo - fast.get(i * 784 + 100).lo).abs() < 1e-5);
    }
    let reference_s = t1.elapsed().as_secs_f64();
    let speedup = reference_s / batched_s;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        7,
        nnz_fraction < 0.01 && speedup >= 10.0 && secs < 60.0,
        &format!(
            "0.25-deg rotation cell on 28x28: stored weights {:.3}% of dense ({} of {:.0}, > 99% zero), prebuilt-grid batch interpolation {speedup:.0}x faster than 256 dense calls ({batched_s:.4} s vs {reference_s:.4} s); {secs:.1} s total",
            nnz_fraction * 100.0,
            grid.w.len(),
            cells
        ),
    );
}

#[test]
fn criterion_8_determinism() {
    let train = mnist("train").head(1000);
    let test = mnist("t10k").head(40);

    let mut cfg = desk_config(0.5);
    cfg.epochs = 3;
    cfg.warmup_epochs = 1;
    cfg.rampup_epochs = 1;
    cfg.batch_size = 128;
    cfg.seed = 7;
    let mut a = desk_arch(&train.channel_stats);
    let mut b = desk_arch(&train.channel_stats);
    fit(&mut a, &train.images, &train.labels, &cfg).unwrap();
    fit(&mut b, &train.images, &train.labels, &cfg).unwrap();
    let train_ok = a.params() == b.params();

    let chain = TransformChain::<f32>::parse("R(2)").unwrap();
    let plan = split_params(&chain, &[8]).unwrap();
    let mut reports = Vec::new();
    for workers in [1usize, 2, 3] {
        let opts = CertifyOptions { batch: 16, workers, early_exit: true };
        reports.push(certify_dataset(&a, &test.images, &test.labels, &plan, &opts));
    }
    let verdict_key = |r: &geocert::certify::DatasetReport| {
        r.per_image
            .iter()
            .map(|p| (p.index, p.certified, p.margin.to_bits(), p.failing_split))
            .collect::<Vec<_>>()
    };
    let workers_ok = verdict_key(&reports[0]) == verdict_key(&reports[1])
        && verdict_key(&reports[0]) == verdict_key(&reports[2]);

    verdict(
        8,
        train_ok && workers_ok,
        &format!(
            "same-seed training bitwise identical: {train_ok}; certification verdicts and margins identical across 1/2/3 workers: {workers_ok}"
        ),
    );
}

#[test]
fn criterion_9_refinement_monotonicity() {
    let mut rng = xrand(0xC9);
    let mut flips = 0usize;
    let mut certified_seen = 0usize;
    for case in 0..50 {
        let h = 4 + (rng() * 5.0) as usize;
        let w = 4 + (rng() * 5.0) as usize;
        let mut seeder = ChaCha8Rng::seed_from_u64(1000 + case as u64);
        let net = noisy_brightness_net(&mut seeder, h, w);
        let x = Tensor::from_vec(
            vec![1, h, w],
            (0..h * w).map(|_| 0.75 + 0.2 * (rng() - 0.5)).collect(),
        );
        let chain = if case % 2 == 0 {
            TransformChain::<f64>::parse(&format!("R({:.3})", 1.0 + rng() * 3.0)).unwrap()
        } else {
            TransformChain::<f64>::parse(&format!(
                "Sc({:.3}) Sh({:.3})",
                1.0 + rng() * 2.0,
                1.0 + rng()
            ))
            .unwrap()
        };
        let counts: Vec<usize> =
            (0..chain.param_count()).map(|_| 1 + (rng() * 2.0) as usize).collect();
        let doubled: Vec<usize> = counts.iter().map(|&k| 2 * k).collect();

        let coarse = certify_one(&net, &x, &chain, &counts);
        let fine = certify_one(&net, &x, &chain, &doubled);
        if coarse.certified {
            certified_seen += 1;
            if !fine.certified {
                flips += 1;
            }
        }
    }
    verdict(
        9,
        flips == 0 && certified_seen >= 10,
        &format!(
            "50 fuzzed instances, split counts doubled: {flips} certified->uncertified flips (require 0); {certified_seen} coarse-certified cases exercised"
        ),
    );
}

/// Mean-brightness discriminator with noisy weights and a fuzzed decision
/// threshold, so coarse splitting certifies some cases and not others.
fn noisy_brightness_net(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Network<f64> {
    use rand::Rng;
    let n = (h * w) as f64;
    let mut wts = Vec::with_capacity(2 * h * w);
    for row in 0..2 {
        let base = if row == 0 { 1.0 } else { -1.0 };
        for _ in 0..h * w {
            wts.push(base / n * (1.0 + 0.3 * (rng.gen::<f64>() - 0.5)));
        }
    }
    let threshold = 0.6 + 0.9 * rng.gen::<f64>();
    Network::new(
        vec![1, h, w],
        vec![
            Layer::Flatten,
            Layer::Dense { w: Tensor::from_vec(vec![2, h * w], wts), b: vec![0.0, threshold] },
        ],
    )
    .unwrap()
}

fn certify_one(
    net: &Network<f64>,
    x: &Tensor<f64>,
    chain: &TransformChain<f64>,
    counts: &[usize],
) -> geocert::certify::ImageVerdict<f64> {
    let plan = split_params(chain, counts).unwrap();
    geocert::certify::certify_classification(net, x, 0, &plan, false)
}
