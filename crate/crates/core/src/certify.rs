//! Parameter splitting and certification judgments.
//!
//! A transformation's parameter box is subdivided into axis-aligned cells;
//! each cell is certified independently with the interval pipeline
//! (interpolate, then propagate through the network), and a classification
//! is robust only if the worst-case logits pick the label in every cell.
//! Split boundaries are placed at `lo + width * (i/K)`, so doubling every
//! count reproduces the parent boundaries exactly and refinement can only
//! tighten bounds.
//!
//! Certification of a dataset builds each cell's interpolation grid once and
//! reuses it for every image; worker count and image order never change the
//! verdicts because batches are formed deterministically and each image's
//! result depends only on its own pixels.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GeoCertError, Result};
use crate::geometry::TransformChain;
use crate::interp::{make_interp_grid, perturb_with_grid};
use crate::interval::{Interval, Scalar};
use crate::network::Network;
use crate::tensor::Tensor;

/// Axis-aligned subdivision of a parameter box into `prod(counts)` cells,
/// enumerated with the last parameter varying fastest.
#[derive(Clone, Debug)]
pub struct SplitPlan<T: Scalar> {
    pub counts: Vec<usize>,
    pub cells: Vec<TransformChain<T>>,
}

/// Uniformly splits every parameter of the chain into `counts[d]` pieces and
/// takes the cross product.
pub fn split_params<T: Scalar>(chain: &TransformChain<T>, counts: &[usize]) -> Result<SplitPlan<T>> {
    if counts.len() != chain.param_count() {
        return Err(GeoCertError::InvalidParameter(format!(
            "chain has {} parameters but {} split counts were given",
            chain.param_count(),
            counts.len()
        )));
    }
    if counts.iter().any(|&k| k == 0) {
        return Err(GeoCertError::InvalidParameter("split counts must be >= 1".into()));
    }
    let base = chain.params();
    // Boundary i of dimension d sits at lo + width * (i/K); the final
    // boundary is pinned to hi so the union is the box exactly.
    let pieces: Vec<Vec<Interval<T>>> = base
        .iter()
        .zip(counts)
        .map(|(p, &k)| {
            let width = p.width();
            (0..k)
                .map(|i| {
                    let lo = p.lo + width * T::lit(i as f64 / k as f64);
                    let hi = if i + 1 == k {
                        p.hi
                    } else {
                        p.lo + width * T::lit((i + 1) as f64 / k as f64)
                    };
                    Interval::new(lo, hi)
                })
                .collect()
        })
        .collect();
    let total: usize = counts.iter().product();
    let mut cells = Vec::with_capacity(total);
    for mut idx in 0..total {
        let mut sel = vec![0usize; counts.len()];
        for d in (0..counts.len()).rev() {
            sel[d] = idx % counts[d];
            idx /= counts[d];
        }
        let params: Vec<Interval<T>> = sel.iter().enumerate().map(|(d, &i)| pieces[d][i]).collect();
        cells.push(chain.with_params(&params)?);
    }
    Ok(SplitPlan { counts: counts.to_vec(), cells })
}

/// Adversarial logit vector: the label keeps its lower bound, every other
/// class its upper bound.
pub fn worst_case_logits<T: Scalar>(out: &[Interval<T>], y: usize) -> Vec<T> {
    assert!(y < out.len(), "label {y} out of range for {} logits", out.len());
    out.iter()
        .enumerate()
        .map(|(j, iv)| if j == y { iv.lo } else { iv.hi })
        .collect()
}

/// First index attaining the maximum (ties resolve to the lowest index).
fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `v[y] - max_{j != y} v[j]`; positive iff `y` is the strict unique argmax.
fn margin<T: Scalar>(v: &[T], y: usize) -> T {
    let mut other = T::neg_infinity();
    for (j, x) in v.iter().enumerate() {
        if j != y {
            other = other.max(*x);
        }
    }
    v[y] - other
}

/// Certification outcome for one image.
#[derive(Clone, Debug)]
pub struct ImageVerdict<T> {
    pub certified: bool,
    pub predicted: usize,
    pub failing_split: Option<usize>,
    pub worst_margin: T,
}

fn batched<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    Tensor::from_vec(shape, x.as_slice().to_vec())
}

/// Worst-case margins of one cell for a batch of images.
fn cell_margins<T: Scalar>(
    net: &Network<T>,
    cell: &TransformChain<T>,
    grid: &crate::interp::SparseInterpGrid<T>,
    x: &Tensor<T>,
    ys: &[usize],
) -> Vec<T> {
    let perturbed = perturb_with_grid(x, grid, cell);
    let out = net.forward_interval(&perturbed);
    let k = net.output_dim();
    ys.iter()
        .enumerate()
        .map(|(s, &y)| {
            let logits: Vec<Interval<T>> = (0..k).map(|o| out.get(s * k + o)).collect();
            margin(&worst_case_logits(&logits, y), y)
        })
        .collect()
}

/// Certifies one image against every cell of the plan. A clean
/// misclassification fails immediately (reported against the first cell);
/// otherwise cells are scanned in order, exiting at the first failure when
/// `early_exit` is set.
pub fn certify_classification<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    y: usize,
    plan: &SplitPlan<T>,
    early_exit: bool,
) -> ImageVerdict<T> {
    assert_eq!(x.shape(), net.input_shape(), "certify takes one unbatched image");
    assert!(net.input_shape().len() == 3, "certification needs [channels, h, w] inputs");
    assert!(y < net.output_dim() && net.output_dim() >= 2);
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let xb = batched(x);
    let clean = net.forward_concrete(&xb).into_vec();
    let predicted = argmax(&clean);
    if predicted != y {
        return ImageVerdict {
            certified: false,
            predicted,
            failing_split: Some(0),
            worst_margin: margin(&clean, y),
        };
    }
    let mut worst = T::infinity();
    let mut failing = None;
    for (k, cell) in plan.cells.iter().enumerate() {
        let grid = make_interp_grid(h, w, cell);
        let m = cell_margins(net, cell, &grid, &xb, &[y])[0];
        worst = worst.min(m);
        if m <= T::zero() && failing.is_none() {
            failing = Some(k);
            if early_exit {
                break;
            }
        }
    }
    ImageVerdict { certified: failing.is_none(), predicted, failing_split: failing, worst_margin: worst }
}

/// Output hull for one image: the smallest box containing every cell's
/// interval output.
#[derive(Clone, Debug)]
pub struct RegressionBound<T> {
    pub lo: Vec<T>,
    pub hi: Vec<T>,
}

pub fn certify_regression<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    plan: &SplitPlan<T>,
) -> RegressionBound<T> {
    assert_eq!(x.shape(), net.input_shape());
    assert!(net.input_shape().len() == 3, "certification needs [channels, h, w] inputs");
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let xb = batched(x);
    let k = net.output_dim();
    let mut lo = vec![T::infinity(); k];
    let mut hi = vec![T::neg_infinity(); k];
    for cell in &plan.cells {
        let grid = make_interp_grid(h, w, cell);
        let out = net.forward_interval(&perturb_with_grid(&xb, &grid, cell));
        for o in 0..k {
            lo[o] = lo[o].min(out.lo.as_slice()[o]);
            hi[o] = hi[o].max(out.hi.as_slice()[o]);
        }
    }
    RegressionBound { lo, hi }
}

/// Knobs for dataset certification. `workers = 0` uses all available cores;
/// the worker count never changes verdicts, only wall time.
#[derive(Clone, Debug)]
pub struct CertifyOptions {
    pub batch: usize,
    pub workers: usize,
    pub early_exit: bool,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions { batch: 128, workers: 0, early_exit: true }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerImageReport {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    pub certified: bool,
    pub margin: f64,
    pub failing_split: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AggregateReport {
    pub images: usize,
    pub clean_acc: f64,
    pub certified: f64,
    /// Certified fraction among clean-correct images.
    pub certified_given_clean: f64,
    pub wall_time_s: f64,
    pub sec_per_image: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetReport {
    pub per_image: Vec<PerImageReport>,
    pub aggregate: AggregateReport,
}

/// Certifies a labeled image set. Cells form the outer loop so each
/// interpolation grid is built once and amortized over all images; images
/// are processed in fixed-size batches handed to the worker pool.
pub fn certify_dataset<T: Scalar>(
    net: &Network<T>,
    images: &Tensor<T>,
    labels: &[usize],
    plan: &SplitPlan<T>,
    opts: &CertifyOptions,
) -> DatasetReport {
    let shape = images.shape();
    assert!(shape.len() == 4, "expected [n, channels, h, w] images");
    assert_eq!(&shape[1..], net.input_shape(), "images do not match the network input");
    let n = shape[0];
    assert_eq!(labels.len(), n, "one label per image");
    let (h, w) = (shape[2], shape[3]);
    let plane: usize = shape[1..].iter().product();
    let batch = opts.batch.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .expect("worker pool");
    let start = Instant::now();

    // Clean pass: predictions and concrete margins.
    let mut predicted = vec![0usize; n];
    let mut margins = vec![T::infinity(); n];
    let mut failing: Vec<Option<usize>> = vec![None; n];
    let mut alive: Vec<usize> = Vec::with_capacity(n);
    let gather = |idx: &[usize]| {
        let mut data = Vec::with_capacity(idx.len() * plane);
        for &i in idx {
            data.extend_from_slice(images.chunk(i, plane));
        }
        Tensor::from_vec(vec![idx.len(), shape[1], h, w], data)
    };
    let all: Vec<usize> = (0..n).collect();
    let clean_rows: Vec<Vec<T>> = pool.install(|| {
        all.par_chunks(batch)
            .map(|idx| net.forward_concrete(&gather(idx)).into_vec())
            .collect::<Vec<_>>()
            .into_iter()
            .flat_map(|rows| {
                let k = net.output_dim();
                (0..rows.len() / k).map(move |s| rows[s * k..(s + 1) * k].to_vec()).collect::<Vec<_>>()
            })
            .collect()
    });
    for i in 0..n {
        predicted[i] = argmax(&clean_rows[i]);
        if predicted[i] == labels[i] {
            alive.push(i);
        } else {
            margins[i] = margin(&clean_rows[i], labels[i]);
            failing[i] = Some(0);
        }
    }

    // Cells outer, image batches inner; one grid per cell.
    let mut out = vec![false; n]; // permanently failed (early-exited)
    for (k, cell) in plan.cells.iter().enumerate() {
        if alive.is_empty() {
            break;
        }
        let grid = make_interp_grid(h, w, cell);
        let work: Vec<&[usize]> = alive.chunks(batch).collect();
        let results: Vec<Vec<T>> = pool.install(|| {
            work.par_iter()
                .map(|idx| {
                    let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                    cell_margins(net, cell, &grid, &gather(idx), &ys)
                })
                .collect()
        });
        for (idx, ms) in work.iter().zip(&results) {
            for (&i, &m) in idx.iter().zip(ms) {
                margins[i] = margins[i].min(m);
                if m <= T::zero() && failing[i].is_none() {
                    failing[i] = Some(k);
                    if opts.early_exit {
                        out[i] = true;
                    }
                }
            }
        }
        if opts.early_exit {
            alive.retain(|&i| !out[i]);
        }
    }

    let wall = start.elapsed().as_secs_f64();
    let per_image: Vec<PerImageReport> = (0..n)
        .map(|i| PerImageReport {
            index: i,
            label: labels[i],
            predicted: predicted[i],
            certified: failing[i].is_none(),
            margin: margins[i].as_f64(),
            failing_split: failing[i],
        })
        .collect();
    let certified = per_image.iter().filter(|v| v.certified).count();
    let clean = per_image.iter().filter(|v| v.predicted == v.label).count();
    let aggregate = AggregateReport {
        images: n,
        clean_acc: if n == 0 { 0.0 } else { clean as f64 / n as f64 },
        certified: if n == 0 { 0.0 } else { certified as f64 / n as f64 },
        certified_given_clean: if clean == 0 { 0.0 } else { certified as f64 / clean as f64 },
        wall_time_s: wall,
        sec_per_image: if n == 0 { 0.0 } else { wall / n as f64 },
    };
    DatasetReport { per_image, aggregate }
}
