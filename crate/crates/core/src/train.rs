//! Certifiably robust training against geometric transformations.
//!
//! Each mini-batch draws one concrete parameter vector from the
//! augmentation box together with a small local ball around it. The loss
//! mixes the cross-entropy of the transformed sample with the worst-case
//! cross-entropy of the interval pipeline over the ball; kappa anneals from
//! clean training toward the robust mixture while the ball radius nu ramps
//! up, so bounds stay tight early when the net is still random.
//!
//! Everything is deterministic for a fixed seed: batch b of epoch e uses an
//! independently derived counter seed, batches are fixed index chunks of a
//! seeded shuffle, and gradient accumulation runs in fixed order.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::certify::{worst_case_logits, SplitPlan};
use crate::error::{GeoCertError, Result};
use crate::geometry::TransformChain;
use crate::interp::{make_interp_grid, perturb, perturb_with_grid};
use crate::interval::{Interval, Scalar};
use crate::network::Network;
use crate::tensor::Tensor;

/// Training hyperparameters. `chain` is the augmentation/certification
/// parameter box; `nu_final` is the local-ball half-width per parameter in
/// internal units (radians, pixels, fractions).
#[derive(Clone, Debug)]
pub struct TrainConfig<T: Scalar> {
    pub chain: TransformChain<T>,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub rampup_epochs: usize,
    pub kappa_final: f64,
    pub nu_final: Vec<T>,
    pub lr: f64,
    /// Epoch at which the learning rate decays by 10x; defaults to 80% of
    /// the run.
    pub lr_decay_epoch: Option<usize>,
    pub grad_clip_l2: f64,
    pub seed: u64,
}

impl<T: Scalar> TrainConfig<T> {
    pub fn new(chain: TransformChain<T>, nu_final: Vec<T>) -> Self {
        TrainConfig {
            chain,
            epochs: 100,
            batch_size: 256,
            warmup_epochs: 15,
            rampup_epochs: 50,
            kappa_final: 0.5,
            nu_final,
            lr: 1e-3,
            lr_decay_epoch: None,
            grad_clip_l2: 8.0,
            seed: 0,
        }
    }
}

/// Mixing weight and ball radius for an epoch: kappa stays 1 through
/// warm-up, then decays linearly to `kappa_final` at the last epoch; nu is 0
/// at warm-up end and ramps linearly to `nu_final` over `rampup_epochs`.
pub fn schedules<T: Scalar>(epoch: usize, cfg: &TrainConfig<T>) -> (f64, Vec<T>) {
    let kappa = if epoch < cfg.warmup_epochs {
        1.0
    } else {
        let span = cfg.epochs.saturating_sub(1).saturating_sub(cfg.warmup_epochs);
        if span == 0 {
            cfg.kappa_final
        } else {
            let t = ((epoch - cfg.warmup_epochs) as f64 / span as f64).min(1.0);
            1.0 + t * (cfg.kappa_final - 1.0)
        }
    };
    let ramp = if epoch <= cfg.warmup_epochs {
        0.0
    } else if cfg.rampup_epochs == 0 {
        1.0
    } else {
        (((epoch - cfg.warmup_epochs) as f64) / cfg.rampup_epochs as f64).min(1.0)
    };
    let nu = cfg.nu_final.iter().map(|v| *v * T::lit(ramp)).collect();
    (kappa, nu)
}

/// Draws one concrete parameter vector uniformly from the chain's box and
/// widens it into the local ball `[theta - nu, theta + nu]`. The ball may
/// overshoot the box near its edges; training on the slightly larger region
/// is sound.
pub fn sample_local_ball<T: Scalar, R: Rng>(
    chain: &TransformChain<T>,
    nu: &[T],
    rng: &mut R,
) -> (Vec<T>, Vec<Interval<T>>) {
    let params = chain.params();
    assert_eq!(nu.len(), params.len(), "one radius per parameter");
    let mut theta = Vec::with_capacity(params.len());
    let mut ball = Vec::with_capacity(params.len());
    for (p, &r) in params.iter().zip(nu) {
        debug_assert!(r >= T::zero());
        let t: f64 = rng.gen();
        let v = p.lo + p.width() * T::lit(t);
        theta.push(v);
        ball.push(Interval::new(v - r, v + r));
    }
    (theta, ball)
}

/// Cross-entropy of a logit vector, stabilized via log-sum-exp.
pub fn cross_entropy<T: Scalar>(logits: &[T], y: usize) -> T {
    ce_and_softmax(logits, y).0
}

fn ce_and_softmax<T: Scalar>(logits: &[T], y: usize) -> (T, Vec<T>) {
    assert!(y < logits.len());
    let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let sum = logits.iter().map(|z| (*z - m).exp()).fold(T::zero(), |a, b| a + b);
    let lse = m + sum.ln();
    let soft = logits.iter().map(|z| (*z - lse).exp()).collect();
    (lse - logits[y], soft)
}

fn add_into<T: Scalar>(acc: &mut [T], inc: Vec<T>) {
    for (a, b) in acc.iter_mut().zip(inc) {
        *a = *a + b;
    }
}

/// Tractable robust classification loss over a mini-batch:
/// `kappa * CE(f(P(x, theta)), y) + (1 - kappa) * CE(worst(P(x, ball)), y)`,
/// both terms averaged over the batch. Returns the loss and its gradient
/// w.r.t. all trainable parameters. A term with zero coefficient is not
/// evaluated.
pub fn loss_ct<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    y: &[usize],
    chain: &TransformChain<T>,
    theta: &[T],
    theta_l: &[Interval<T>],
    kappa: f64,
) -> (T, Vec<T>) {
    let n = x.shape()[0];
    assert_eq!(y.len(), n, "one label per sample");
    let k = net.output_dim();
    assert!(k >= 2, "classification needs at least two logits");
    let inv_n = T::lit(1.0 / n as f64);
    let mut loss = T::zero();
    let mut grads = vec![T::zero(); net.param_count()];

    if kappa > 0.0 {
        let scale = T::lit(kappa) * inv_n;
        let cell = chain.at(theta).expect("theta matches the chain arity");
        // Degenerate parameter box: both planes coincide, take the lower.
        let xc = perturb(x, &cell).lo;
        let (logits, tape) = net.forward_concrete_taped(&xc);
        let mut dz = vec![T::zero(); n * k];
        for s in 0..n {
            let row = &logits.as_slice()[s * k..(s + 1) * k];
            let (ce, soft) = ce_and_softmax(row, y[s]);
            loss = loss + scale * ce;
            for j in 0..k {
                let delta = if j == y[s] { T::one() } else { T::zero() };
                dz[s * k + j] = scale * (soft[j] - delta);
            }
        }
        add_into(&mut grads, net.backward_concrete(&tape, &Tensor::from_vec(vec![n, k], dz)));
    }

    if kappa < 1.0 {
        let scale = T::lit(1.0 - kappa) * inv_n;
        let ball = chain.with_params(theta_l).expect("ball matches the chain arity");
        let px = perturb(x, &ball);
        let (out, tape) = net.forward_interval_taped(&px);
        let mut gl = vec![T::zero(); n * k];
        let mut gh = vec![T::zero(); n * k];
        for s in 0..n {
            let logits: Vec<Interval<T>> = (0..k).map(|o| out.get(s * k + o)).collect();
            let wc = worst_case_logits(&logits, y[s]);
            let (ce, soft) = ce_and_softmax(&wc, y[s]);
            loss = loss + scale * ce;
            for j in 0..k {
                let delta = if j == y[s] { T::one() } else { T::zero() };
                let g = scale * (soft[j] - delta);
                // The label reads its lower bound, the rest their upper.
                if j == y[s] {
                    gl[s * k + j] = g;
                } else {
                    gh[s * k + j] = g;
                }
            }
        }
        let g = net.backward_interval(
            &tape,
            &Tensor::from_vec(vec![n, k], gl),
            &Tensor::from_vec(vec![n, k], gh),
        );
        add_into(&mut grads, g);
    }
    (loss, grads)
}

/// Robust regression loss over a mini-batch:
/// `kappa * MSE(f(P(x, theta)), t) + (1 - kappa) * (MSE(lo, t) + MSE(hi, t)) / 2`.
pub fn loss_r<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    targets: &Tensor<T>,
    chain: &TransformChain<T>,
    theta: &[T],
    theta_l: &[Interval<T>],
    kappa: f64,
) -> (T, Vec<T>) {
    let n = x.shape()[0];
    let k = net.output_dim();
    assert_eq!(targets.shape(), &[n, k], "targets must be [batch, outputs]");
    let inv = T::lit(1.0 / (n * k) as f64);
    let two = T::lit(2.0);
    let mut loss = T::zero();
    let mut grads = vec![T::zero(); net.param_count()];

    if kappa > 0.0 {
        let scale = T::lit(kappa) * inv;
        let cell = chain.at(theta).expect("theta matches the chain arity");
        let xc = perturb(x, &cell).lo;
        let (pred, tape) = net.forward_concrete_taped(&xc);
        let mut dz = vec![T::zero(); n * k];
        for (i, (p, t)) in pred.as_slice().iter().zip(targets.as_slice()).enumerate() {
            let e = *p - *t;
            loss = loss + scale * e * e;
            dz[i] = scale * two * e;
        }
        add_into(&mut grads, net.backward_concrete(&tape, &Tensor::from_vec(vec![n, k], dz)));
    }

    if kappa < 1.0 {
        // Each endpoint's MSE carries weight (1 - kappa)/2.
        let scale = T::lit((1.0 - kappa) / 2.0) * inv;
        let ball = chain.with_params(theta_l).expect("ball matches the chain arity");
        let px = perturb(x, &ball);
        let (out, tape) = net.forward_interval_taped(&px);
        let mut gl = vec![T::zero(); n * k];
        let mut gh = vec![T::zero(); n * k];
        for i in 0..n * k {
            let t = targets.as_slice()[i];
            let el = out.lo.as_slice()[i] - t;
            let eh = out.hi.as_slice()[i] - t;
            loss = loss + scale * (el * el + eh * eh);
            gl[i] = scale * two * el;
            gh[i] = scale * two * eh;
        }
        let g = net.backward_interval(
            &tape,
            &Tensor::from_vec(vec![n, k], gl),
            &Tensor::from_vec(vec![n, k], gh),
        );
        add_into(&mut grads, g);
    }
    (loss, grads)
}

/// Ideal robust classification loss: clean cross-entropy plus the mean
/// worst-case cross-entropy over every cell of the plan. Exact but K times
/// the work of `loss_ct`; intended for validation with tiny plans.
pub fn loss_ci<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    y: &[usize],
    chain: &TransformChain<T>,
    plan: &SplitPlan<T>,
    kappa: f64,
) -> T {
    let n = x.shape()[0];
    let k = net.output_dim();
    assert!(!plan.cells.is_empty());
    assert_eq!(plan.counts.len(), chain.param_count(), "plan does not match the chain");
    let inv_n = T::lit(1.0 / n as f64);
    let mut loss = T::zero();
    if kappa > 0.0 {
        let logits = net.forward_concrete(x);
        for s in 0..n {
            loss = loss
                + T::lit(kappa) * inv_n
                    * cross_entropy(&logits.as_slice()[s * k..(s + 1) * k], y[s]);
        }
    }
    if kappa < 1.0 {
        let scale = T::lit((1.0 - kappa) / plan.cells.len() as f64) * inv_n;
        for cell in &plan.cells {
            let out = net.forward_interval(&perturb(x, cell));
            for s in 0..n {
                let logits: Vec<Interval<T>> = (0..k).map(|o| out.get(s * k + o)).collect();
                loss = loss + scale * cross_entropy(&worst_case_logits(&logits, y[s]), y[s]);
            }
        }
    }
    loss
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub kappa: f64,
    pub nu: Vec<f64>,
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<EpochLog>,
}

/// Counter-derived subseed: deterministic, and distinct per (epoch, batch).
fn subseed(seed: u64, epoch: u64, batch: u64) -> u64 {
    let mut z = seed
        ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ batch.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn l2_clip<T: Scalar>(g: &mut [T], max_norm: f64) {
    let norm = g.iter().fold(T::zero(), |a, &b| a + b * b).sqrt();
    let cap = T::lit(max_norm);
    if norm > cap {
        let s = cap / norm;
        for v in g.iter_mut() {
            *v = *v * s;
        }
    }
}

/// Trains the network in place with Adam. One transformation parameter draw
/// per mini-batch; bitwise deterministic for a fixed seed. Aborts with a
/// diagnostic if the loss stops being finite.
pub fn fit<T: Scalar>(
    net: &mut Network<T>,
    images: &Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig<T>,
) -> Result<TrainLog> {
    if !(0.0..=1.0).contains(&cfg.kappa_final) {
        return Err(GeoCertError::InvalidParameter("kappa_final must be in [0, 1]".into()));
    }
    if cfg.warmup_epochs + cfg.rampup_epochs > cfg.epochs {
        return Err(GeoCertError::InvalidParameter(
            "warmup + rampup epochs exceed the training budget".into(),
        ));
    }
    if cfg.nu_final.len() != cfg.chain.param_count() {
        return Err(GeoCertError::InvalidParameter(format!(
            "nu has {} entries but the chain has {} parameters",
            cfg.nu_final.len(),
            cfg.chain.param_count()
        )));
    }
    if cfg.nu_final.iter().any(|v| *v < T::zero()) {
        return Err(GeoCertError::InvalidParameter("nu must be nonnegative".into()));
    }
    let n = images.shape()[0];
    assert_eq!(labels.len(), n, "one label per image");
    let plane: usize = images.shape()[1..].iter().product();
    let batch_size = cfg.batch_size.max(1);
    let milestone = cfg.lr_decay_epoch.unwrap_or(cfg.epochs * 4 / 5);

    let pcount = net.param_count();
    let mut m = vec![T::zero(); pcount];
    let mut v = vec![T::zero(); pcount];
    let (b1, b2, eps) = (T::lit(0.9), T::lit(0.999), T::lit(1e-8));
    let mut step = 0i32;
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let (kappa, nu) = schedules(epoch, cfg);
        let lr = if epoch >= milestone { cfg.lr * 0.1 } else { cfg.lr };
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(subseed(cfg.seed, epoch as u64, u64::MAX)));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (b, idx) in perm.chunks(batch_size).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, epoch as u64, b as u64));
            let (theta, ball) = sample_local_ball(&cfg.chain, &nu, &mut rng);
            let mut data = Vec::with_capacity(idx.len() * plane);
            let mut ys = Vec::with_capacity(idx.len());
            for &i in idx {
                data.extend_from_slice(images.chunk(i, plane));
                ys.push(labels[i]);
            }
            let mut shape = vec![idx.len()];
            shape.extend_from_slice(&images.shape()[1..]);
            let bx = Tensor::from_vec(shape, data);
            let (loss, mut g) = loss_ct(net, &bx, &ys, &cfg.chain, &theta, &ball, kappa);
            if !loss.is_finite() {
                return Err(GeoCertError::InvalidParameter(format!(
                    "training diverged: non-finite loss at epoch {epoch}, batch {b}"
                )));
            }
            l2_clip(&mut g, cfg.grad_clip_l2);
            step += 1;
            let mut p = net.params();
            let (c1, c2) = (T::one() - b1.powi(step), T::one() - b2.powi(step));
            let lr_t = T::lit(lr);
            for i in 0..pcount {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] = p[i] - lr_t * mh / (vh.sqrt() + eps);
            }
            net.set_params(&p);
            epoch_loss += loss.as_f64();
            batches += 1;
        }
        log.entries.push(EpochLog {
            epoch,
            kappa,
            nu: nu.iter().map(|x| x.as_f64()).collect(),
            lr,
            mean_loss: epoch_loss / batches.max(1) as f64,
        });
    }
    Ok(log)
}

/// Pixel-width statistics used to pick nu: how wide the interval image gets
/// for local balls around sampled transformation parameters. Two summaries
/// per draw: the image-averaged mean pixel width (how wide bounds are
/// typically) and the image-averaged max pixel width (how wide the worst
/// pixel gets, the tuning target compared against familiar epsilon values).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TuneReport {
    pub seed: u64,
    pub nu: Vec<f64>,
    /// The sampled ball centers, one vector per draw (internal units).
    pub thetas: Vec<Vec<f64>>,
    /// Mean over images of the per-image mean pixel width, per draw.
    pub per_sample_mean: Vec<f64>,
    /// Mean over images of the per-image max pixel width, per draw.
    pub per_sample_max: Vec<f64>,
    /// Grand mean of `per_sample_mean`.
    pub mean: f64,
    /// Grand mean of `per_sample_max`.
    pub max: f64,
    /// Absolute widest pixel across all draws and images.
    pub peak: f64,
}

const TUNE_DRAWS: usize = 10;

/// Samples `TUNE_DRAWS` ball centers and measures, for every image, the
/// maximum pixel interval width of `P(x, theta_k +- nu)`. The candidate must
/// fit inside the parameter box (`nu < width` per dimension, or 0).
pub fn tune_nu<T: Scalar>(
    images: &Tensor<T>,
    chain: &TransformChain<T>,
    nu: &[T],
    seed: u64,
) -> TuneReport {
    let shape = images.shape();
    assert!(shape.len() == 4, "expected [n, channels, h, w] images");
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let plane: usize = shape[1..].iter().product();
    let params = chain.params();
    assert_eq!(nu.len(), params.len(), "one radius per parameter");
    for (r, p) in nu.iter().zip(&params) {
        assert!(
            *r == T::zero() || *r < p.width(),
            "candidate radius must fit inside the parameter range"
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = TuneReport {
        seed,
        nu: nu.iter().map(|v| v.as_f64()).collect(),
        thetas: Vec::with_capacity(TUNE_DRAWS),
        per_sample_mean: Vec::with_capacity(TUNE_DRAWS),
        per_sample_max: Vec::with_capacity(TUNE_DRAWS),
        mean: 0.0,
        max: 0.0,
        peak: 0.0,
    };
    const CHUNK: usize = 512;
    for _ in 0..TUNE_DRAWS {
        let (theta, ball) = sample_local_ball(chain, nu, &mut rng);
        let cell = chain.with_params(&ball).expect("ball matches the chain arity");
        let grid = make_interp_grid(h, w, &cell);
        let mut sum_mean = 0.0;
        let mut sum_max = 0.0;
        let mut at = 0;
        while at < n {
            let take = CHUNK.min(n - at);
            let mut shp = vec![take];
            shp.extend_from_slice(&shape[1..]);
            let data = images.as_slice()[at * plane..(at + take) * plane].to_vec();
            let out = perturb_with_grid(&Tensor::from_vec(shp, data), &grid, &cell);
            for s in 0..take {
                let mut img_sum = 0.0f64;
                let mut img_max = 0.0f64;
                for i in s * plane..(s + 1) * plane {
                    let wd = (out.hi.as_slice()[i] - out.lo.as_slice()[i]).as_f64();
                    img_sum += wd;
                    img_max = img_max.max(wd);
                }
                sum_mean += img_sum / plane as f64;
                sum_max += img_max;
                report.peak = report.peak.max(img_max);
            }
            at += take;
        }
        report.thetas.push(theta.iter().map(|v| v.as_f64()).collect());
        report.per_sample_mean.push(if n == 0 { 0.0 } else { sum_mean / n as f64 });
        report.per_sample_max.push(if n == 0 { 0.0 } else { sum_max / n as f64 });
    }
    report.mean = report.per_sample_mean.iter().sum::<f64>() / TUNE_DRAWS as f64;
    report.max = report.per_sample_max.iter().sum::<f64>() / TUNE_DRAWS as f64;
    report
}
