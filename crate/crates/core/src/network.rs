//! Feedforward networks with a concrete forward pass, an interval forward
//! pass, and reverse-mode gradients through both.
//!
//! The interval pass propagates boxes layer by layer: an affine layer maps
//! midpoint and radius separately (`mu = W m + b`, `rho = |W| r`), monotone
//! activations apply endpointwise, and `Normalize`/`BatchNormEval` act as
//! per-channel affine maps. `|W|` differentiates via `sign(W)` with
//! `sign(0) = 0`, so both endpoint bounds are differentiable almost
//! everywhere and every subgradient choice is deterministic.
//!
//! Trainable parameters are dense and convolution weights/biases;
//! `Normalize` holds dataset statistics and `BatchNormEval` frozen inference
//! statistics, neither of which trains here. Batches are leading-axis;
//! per-sample work inside a batch is independent, and parameter-gradient
//! accumulation runs in a fixed sample order so results do not depend on any
//! worker pool.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{GeoCertError, Result};
use crate::interval::{Interval, Scalar};
use crate::tensor::{col2im, conv_out_dims, gemm, gemm_nt, gemm_tn, im2col, BoundedTensor, Tensor};

/// One network stage. Weight matrices are row-major `[out, in]`; convolution
/// weights are `[c_out, c_in, kh, kw]` with symmetric zero padding.
#[derive(Clone, Debug)]
pub enum Layer<T> {
    Normalize { mean: Vec<T>, std: Vec<T> },
    Dense { w: Tensor<T>, b: Vec<T> },
    Conv2d { w: Tensor<T>, b: Vec<T>, stride: usize, padding: usize },
    Relu,
    Flatten,
    BatchNormEval { scale: Vec<T>, shift: Vec<T>, mean: Vec<T>, var: Vec<T>, eps: T },
}

impl<T: Scalar> Layer<T> {
    /// Dense layer with He-initialized weights and zero bias.
    pub fn dense_init<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize) -> Self {
        let normal = Normal::new(0.0, (2.0 / in_dim as f64).sqrt()).unwrap();
        let w: Vec<T> = (0..out_dim * in_dim).map(|_| T::lit(normal.sample(rng))).collect();
        Layer::Dense { w: Tensor::from_vec(vec![out_dim, in_dim], w), b: vec![T::zero(); out_dim] }
    }

    /// Convolution with He-initialized weights (fan-in `c_in * k * k`) and
    /// zero bias.
    pub fn conv2d_init<R: Rng>(
        rng: &mut R,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        let w: Vec<T> = (0..out_ch * fan_in).map(|_| T::lit(normal.sample(rng))).collect();
        Layer::Conv2d {
            w: Tensor::from_vec(vec![out_ch, in_ch, k, k], w),
            b: vec![T::zero(); out_ch],
            stride,
            padding,
        }
    }

    fn trainable_len(&self) -> usize {
        match self {
            Layer::Dense { w, b } | Layer::Conv2d { w, b, .. } => w.len() + b.len(),
            _ => 0,
        }
    }
}

/// Layer list plus the validated shape chain. The output is always a vector
/// of `output_dim` values.
#[derive(Clone, Debug)]
pub struct Network<T> {
    layers: Vec<Layer<T>>,
    input_shape: Vec<usize>,
    /// `shapes[i]` is the (batchless) input shape of layer `i`; the last
    /// entry is the output shape.
    shapes: Vec<Vec<usize>>,
    output_dim: usize,
}

fn shape_err(expected: impl Into<String>, got: impl Into<String>) -> GeoCertError {
    GeoCertError::ShapeMismatch { expected: expected.into(), got: got.into() }
}

fn layer_out_shape<T: Scalar>(layer: &Layer<T>, cur: &[usize]) -> Result<Vec<usize>> {
    match layer {
        Layer::Normalize { mean, std } => {
            if cur.is_empty() || mean.len() != cur[0] || std.len() != cur[0] {
                return Err(shape_err(
                    format!("{} channel statistics", cur.first().copied().unwrap_or(0)),
                    format!("{} means, {} stds", mean.len(), std.len()),
                ));
            }
            if std.iter().any(|s| *s <= T::zero()) {
                return Err(GeoCertError::InvalidParameter("Normalize std must be positive".into()));
            }
            Ok(cur.to_vec())
        }
        Layer::Dense { w, b } => {
            if w.shape().len() != 2 {
                return Err(shape_err("2-d weight matrix", format!("{:?}", w.shape())));
            }
            let (out, inp) = (w.shape()[0], w.shape()[1]);
            if b.len() != out {
                return Err(shape_err(format!("{out} biases"), format!("{}", b.len())));
            }
            if cur != [inp] {
                return Err(shape_err(format!("[{inp}] input"), format!("{cur:?}")));
            }
            Ok(vec![out])
        }
        Layer::Conv2d { w, b, stride, padding } => {
            if w.shape().len() != 4 {
                return Err(shape_err("4-d convolution weights", format!("{:?}", w.shape())));
            }
            let (oc, ic, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
            if b.len() != oc {
                return Err(shape_err(format!("{oc} biases"), format!("{}", b.len())));
            }
            if *stride == 0 {
                return Err(GeoCertError::InvalidParameter("convolution stride must be >= 1".into()));
            }
            if cur.len() != 3 || cur[0] != ic {
                return Err(shape_err(format!("[{ic}, h, w] input"), format!("{cur:?}")));
            }
            let (h, wd) = (cur[1], cur[2]);
            if h + 2 * padding < kh || wd + 2 * padding < kw {
                return Err(GeoCertError::InvalidParameter(format!(
                    "kernel {kh}x{kw} larger than padded {h}x{wd} input"
                )));
            }
            let (oh, ow) = conv_out_dims(h, wd, kh, kw, *stride, *padding);
            Ok(vec![oc, oh, ow])
        }
        Layer::Relu => Ok(cur.to_vec()),
        Layer::Flatten => Ok(vec![cur.iter().product()]),
        Layer::BatchNormEval { scale, shift, mean, var, eps } => {
            let c = cur.first().copied().unwrap_or(0);
            if scale.len() != c || shift.len() != c || mean.len() != c || var.len() != c {
                return Err(shape_err(
                    format!("{c} batch-norm statistics"),
                    format!("{}/{}/{}/{}", scale.len(), shift.len(), mean.len(), var.len()),
                ));
            }
            if *eps <= T::zero() || var.iter().any(|v| *v < T::zero()) {
                return Err(GeoCertError::InvalidParameter(
                    "BatchNormEval needs eps > 0 and nonnegative variances".into(),
                ));
            }
            Ok(cur.to_vec())
        }
    }
}

/// Per-channel effective affine of an eval-mode batch norm.
fn bn_affine<T: Scalar>(scale: &[T], shift: &[T], mean: &[T], var: &[T], eps: T) -> (Vec<T>, Vec<T>) {
    let a: Vec<T> = scale.iter().zip(var).map(|(s, v)| *s / (*v + eps).sqrt()).collect();
    let c: Vec<T> = a.iter().zip(shift).zip(mean).map(|((a, sh), m)| *sh - *a * *m).collect();
    (a, c)
}

impl<T: Scalar> Network<T> {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(GeoCertError::InvalidParameter("network must have at least one layer".into()));
        }
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(GeoCertError::InvalidParameter(format!(
                "invalid input shape {input_shape:?}"
            )));
        }
        let mut shapes = vec![input_shape.clone()];
        for layer in &layers {
            let next = layer_out_shape(layer, shapes.last().unwrap())?;
            shapes.push(next);
        }
        let out = shapes.last().unwrap();
        if out.len() != 1 {
            return Err(shape_err("a final vector of logits/outputs", format!("{out:?}")));
        }
        let output_dim = out[0];
        Ok(Network { layers, input_shape, shapes, output_dim })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::trainable_len).sum()
    }

    /// Trainable parameters in layer order, weights before bias.
    pub fn params(&self) -> Vec<T> {
        let mut p = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            if let Layer::Dense { w, b } | Layer::Conv2d { w, b, .. } = layer {
                p.extend_from_slice(w.as_slice());
                p.extend_from_slice(b);
            }
        }
        p
    }

    pub fn set_params(&mut self, p: &[T]) {
        assert_eq!(p.len(), self.param_count(), "parameter vector length mismatch");
        let mut at = 0;
        for layer in &mut self.layers {
            if let Layer::Dense { w, b } | Layer::Conv2d { w, b, .. } = layer {
                let wl = w.len();
                w.as_mut_slice().copy_from_slice(&p[at..at + wl]);
                at += wl;
                let bl = b.len();
                b.copy_from_slice(&p[at..at + bl]);
                at += bl;
            }
        }
    }

    fn batch_of(&self, shape: &[usize]) -> usize {
        assert!(
            shape.len() == self.input_shape.len() + 1 && shape[1..] == self.input_shape[..],
            "input shape {:?} does not match network input {:?} (batched)",
            shape,
            self.input_shape
        );
        shape[0]
    }

    pub fn forward_concrete(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = self.batch_of(x.shape());
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = self.apply_concrete(i, layer, &cur, n);
        }
        cur
    }

    /// Single-sample convenience wrapper around the batched pass.
    pub fn predict(&self, x: &Tensor<T>) -> Vec<T> {
        assert_eq!(x.shape(), self.input_shape.as_slice(), "predict takes one unbatched sample");
        let mut shape = vec![1];
        shape.extend_from_slice(&self.input_shape);
        let y = self.forward_concrete(&Tensor::from_vec(shape, x.as_slice().to_vec()));
        y.into_vec()
    }

    pub fn forward_interval(&self, x: &BoundedTensor<T>) -> BoundedTensor<T> {
        let n = self.batch_of(x.lo.shape());
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = self.apply_interval(i, layer, &cur, n);
        }
        cur
    }

    pub fn predict_interval(&self, x: &BoundedTensor<T>) -> Vec<Interval<T>> {
        assert_eq!(x.lo.shape(), self.input_shape.as_slice());
        let mut shape = vec![1];
        shape.extend_from_slice(&self.input_shape);
        let b = BoundedTensor::new(
            Tensor::from_vec(shape.clone(), x.lo.as_slice().to_vec()),
            Tensor::from_vec(shape, x.hi.as_slice().to_vec()),
        );
        let out = self.forward_interval(&b);
        (0..self.output_dim).map(|o| out.get(o)).collect()
    }

    pub fn forward_concrete_taped(&self, x: &Tensor<T>) -> (Tensor<T>, ConcreteTape<T>) {
        let n = self.batch_of(x.shape());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = self.apply_concrete(i, layer, acts.last().unwrap(), n);
            acts.push(next);
        }
        (acts.last().unwrap().clone(), ConcreteTape { acts })
    }

    pub fn forward_interval_taped(&self, x: &BoundedTensor<T>) -> (BoundedTensor<T>, IntervalTape<T>) {
        let n = self.batch_of(x.lo.shape());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = self.apply_interval(i, layer, acts.last().unwrap(), n);
            acts.push(next);
        }
        (acts.last().unwrap().clone(), IntervalTape { acts })
    }

    fn batched_shape(&self, i: usize, n: usize) -> Vec<usize> {
        let mut s = vec![n];
        s.extend_from_slice(&self.shapes[i]);
        s
    }

    fn apply_concrete(&self, i: usize, layer: &Layer<T>, x: &Tensor<T>, n: usize) -> Tensor<T> {
        let in_shape = &self.shapes[i];
        let out_shape = self.batched_shape(i + 1, n);
        match layer {
            Layer::Dense { w, b } => {
                let (out, inp) = (w.shape()[0], w.shape()[1]);
                let mut y = vec![T::zero(); n * out];
                gemm_nt(n, inp, out, x.as_slice(), w.as_slice(), &mut y, false);
                for row in y.chunks_mut(out) {
                    for (v, bo) in row.iter_mut().zip(b) {
                        *v = *v + *bo;
                    }
                }
                Tensor::from_vec(out_shape, y)
            }
            Layer::Conv2d { w, b, stride, padding } => {
                let (ic, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oc, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
                let (oh, ow) = conv_out_dims(h, wd, kh, kw, *stride, *padding);
                let k = ic * kh * kw;
                let mut cols = vec![T::zero(); k * oh * ow];
                let mut y = vec![T::zero(); n * oc * oh * ow];
                for s in 0..n {
                    im2col(x.chunk(s, ic * h * wd), ic, h, wd, kh, kw, *stride, *padding, &mut cols);
                    let ys = &mut y[s * oc * oh * ow..(s + 1) * oc * oh * ow];
                    gemm(oc, k, oh * ow, w.as_slice(), &cols, ys, false);
                    for o in 0..oc {
                        for v in &mut ys[o * oh * ow..(o + 1) * oh * ow] {
                            *v = *v + b[o];
                        }
                    }
                }
                Tensor::from_vec(out_shape, y)
            }
            Layer::Relu => {
                let y: Vec<T> = x.as_slice().iter().map(|v| v.max(T::zero())).collect();
                Tensor::from_vec(out_shape, y)
            }
            Layer::Flatten => Tensor::from_vec(out_shape, x.as_slice().to_vec()),
            Layer::Normalize { mean, std } => {
                Tensor::from_vec(out_shape, channel_map(x.as_slice(), in_shape, |c, v| (v - mean[c]) / std[c]))
            }
            Layer::BatchNormEval { scale, shift, mean, var, eps } => {
                let (a, c) = bn_affine(scale, shift, mean, var, *eps);
                Tensor::from_vec(out_shape, channel_map(x.as_slice(), in_shape, |ch, v| a[ch] * v + c[ch]))
            }
        }
    }

    fn apply_interval(&self, i: usize, layer: &Layer<T>, x: &BoundedTensor<T>, n: usize) -> BoundedTensor<T> {
        let in_shape = &self.shapes[i];
        let out_shape = self.batched_shape(i + 1, n);
        let wrap = |lo: Vec<T>, hi: Vec<T>| {
            BoundedTensor::new(
                Tensor::from_vec(out_shape.clone(), lo),
                Tensor::from_vec(out_shape.clone(), hi),
            )
        };
        match layer {
            Layer::Dense { w, b } => {
                let (out, inp) = (w.shape()[0], w.shape()[1]);
                let (m, r) = mid_rad(x);
                let wabs: Vec<T> = w.as_slice().iter().map(|v| v.abs()).collect();
                let mut mu = vec![T::zero(); n * out];
                let mut rho = vec![T::zero(); n * out];
                gemm_nt(n, inp, out, &m, w.as_slice(), &mut mu, false);
                gemm_nt(n, inp, out, &r, &wabs, &mut rho, false);
                let mut lo = vec![T::zero(); n * out];
                let mut hi = vec![T::zero(); n * out];
                for s in 0..n {
                    for o in 0..out {
                        let mu_v = mu[s * out + o] + b[o];
                        let rho_v = rho[s * out + o];
                        lo[s * out + o] = mu_v - rho_v;
                        hi[s * out + o] = mu_v + rho_v;
                    }
                }
                wrap(lo, hi)
            }
            Layer::Conv2d { w, b, stride, padding } => {
                let (ic, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oc, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
                let (oh, ow) = conv_out_dims(h, wd, kh, kw, *stride, *padding);
                let k = ic * kh * kw;
                let plane = ic * h * wd;
                let wabs: Vec<T> = w.as_slice().iter().map(|v| v.abs()).collect();
                let (m, r) = mid_rad(x);
                let mut cols = vec![T::zero(); k * oh * ow];
                let mut mu = vec![T::zero(); oc * oh * ow];
                let mut rho = vec![T::zero(); oc * oh * ow];
                let mut lo = vec![T::zero(); n * oc * oh * ow];
                let mut hi = vec![T::zero(); n * oc * oh * ow];
                for s in 0..n {
                    im2col(&m[s * plane..(s + 1) * plane], ic, h, wd, kh, kw, *stride, *padding, &mut cols);
                    gemm(oc, k, oh * ow, w.as_slice(), &cols, &mut mu, false);
                    im2col(&r[s * plane..(s + 1) * plane], ic, h, wd, kh, kw, *stride, *padding, &mut cols);
                    gemm(oc, k, oh * ow, &wabs, &cols, &mut rho, false);
                    let base = s * oc * oh * ow;
                    for o in 0..oc {
                        for p in 0..oh * ow {
                            let at = o * oh * ow + p;
                            let mu_v = mu[at] + b[o];
                            lo[base + at] = mu_v - rho[at];
                            hi[base + at] = mu_v + rho[at];
                        }
                    }
                }
                wrap(lo, hi)
            }
            Layer::Relu => wrap(
                x.lo.as_slice().iter().map(|v| v.max(T::zero())).collect(),
                x.hi.as_slice().iter().map(|v| v.max(T::zero())).collect(),
            ),
            Layer::Flatten => wrap(x.lo.as_slice().to_vec(), x.hi.as_slice().to_vec()),
            Layer::Normalize { mean, std } => wrap(
                channel_map(x.lo.as_slice(), in_shape, |c, v| (v - mean[c]) / std[c]),
                channel_map(x.hi.as_slice(), in_shape, |c, v| (v - mean[c]) / std[c]),
            ),
            Layer::BatchNormEval { scale, shift, mean, var, eps } => {
                let (a, c) = bn_affine(scale, shift, mean, var, *eps);
                // Negative channel scales swap which endpoint feeds which.
                let lo = channel_zip(x.lo.as_slice(), x.hi.as_slice(), in_shape, |ch, l, h| {
                    if a[ch] >= T::zero() { a[ch] * l + c[ch] } else { a[ch] * h + c[ch] }
                });
                let hi = channel_zip(x.lo.as_slice(), x.hi.as_slice(), in_shape, |ch, l, h| {
                    if a[ch] >= T::zero() { a[ch] * h + c[ch] } else { a[ch] * l + c[ch] }
                });
                wrap(lo, hi)
            }
        }
    }

    fn param_spans(&self) -> Vec<(usize, usize)> {
        let mut spans = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for layer in &self.layers {
            let len = layer.trainable_len();
            spans.push((at, len));
            at += len;
        }
        spans
    }

    /// Gradient of a scalar loss w.r.t. all trainable parameters, given its
    /// gradient w.r.t. the concrete outputs. Returns a flat vector aligned
    /// with `params()`.
    pub fn backward_concrete(&self, tape: &ConcreteTape<T>, out_grad: &Tensor<T>) -> Vec<T> {
        assert_eq!(
            tape.acts.len(),
            self.layers.len() + 1,
            "tape does not belong to this network"
        );
        assert_eq!(
            out_grad.shape(),
            tape.acts.last().unwrap().shape(),
            "output gradient shape mismatch"
        );
        let n = tape.acts[0].shape()[0];
        let spans = self.param_spans();
        let mut grads = vec![T::zero(); self.param_count()];
        let mut g = out_grad.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (off, len) = spans[i];
            g = self.backward_concrete_layer(i, layer, &tape.acts[i], &g, n, &mut grads[off..off + len]);
        }
        grads
    }

    fn backward_concrete_layer(
        &self,
        i: usize,
        layer: &Layer<T>,
        x: &Tensor<T>,
        g: &Tensor<T>,
        n: usize,
        pg: &mut [T],
    ) -> Tensor<T> {
        let in_shape = &self.shapes[i];
        let bshape = self.batched_shape(i, n);
        match layer {
            Layer::Dense { w, .. } => {
                let (out, inp) = (w.shape()[0], w.shape()[1]);
                let (dw, db) = pg.split_at_mut(out * inp);
                gemm_tn(out, n, inp, g.as_slice(), x.as_slice(), dw, false);
                for s in 0..n {
                    for o in 0..out {
                        db[o] = db[o] + g.as_slice()[s * out + o];
                    }
                }
                let mut dx = vec![T::zero(); n * inp];
                gemm(n, out, inp, g.as_slice(), w.as_slice(), &mut dx, false);
                Tensor::from_vec(bshape, dx)
            }
            Layer::Conv2d { w, stride, padding, .. } => {
                let (ic, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oc, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
                let (oh, ow) = conv_out_dims(h, wd, kh, kw, *stride, *padding);
                let k = ic * kh * kw;
                let plane = ic * h * wd;
                let (dw, db) = pg.split_at_mut(oc * k);
                let mut cols = vec![T::zero(); k * oh * ow];
                let mut dcols = vec![T::zero(); k * oh * ow];
                let mut dx = vec![T::zero(); n * plane];
                for s in 0..n {
                    let gs = &g.as_slice()[s * oc * oh * ow..(s + 1) * oc * oh * ow];
                    im2col(x.chunk(s, plane), ic, h, wd, kh, kw, *stride, *padding, &mut cols);
                    gemm_nt(oc, oh * ow, k, gs, &cols, dw, true);
                    for o in 0..oc {
                        for p in 0..oh * ow {
                            db[o] = db[o] + gs[o * oh * ow + p];
                        }
                    }
                    gemm_tn(k, oc, oh * ow, w.as_slice(), gs, &mut dcols, false);
                    col2im(&dcols, ic, h, wd, kh, kw, *stride, *padding, &mut dx[s * plane..(s + 1) * plane]);
                }
                Tensor::from_vec(bshape, dx)
            }
            Layer::Relu => {
                let dx: Vec<T> = x
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(xv, gv)| if *xv > T::zero() { *gv } else { T::zero() })
                    .collect();
                Tensor::from_vec(bshape, dx)
            }
            Layer::Flatten => Tensor::from_vec(bshape, g.as_slice().to_vec()),
            Layer::Normalize { std, .. } => {
                Tensor::from_vec(bshape, channel_map(g.as_slice(), in_shape, |c, v| v / std[c]))
            }
            Layer::BatchNormEval { scale, shift, mean, var, eps } => {
                let (a, _) = bn_affine(scale, shift, mean, var, *eps);
                Tensor::from_vec(bshape, channel_map(g.as_slice(), in_shape, |c, v| a[c] * v))
            }
        }
    }

    /// Gradient of a scalar loss w.r.t. all trainable parameters, given its
    /// gradients w.r.t. the lower and upper output bounds.
    pub fn backward_interval(
        &self,
        tape: &IntervalTape<T>,
        grad_lo: &Tensor<T>,
        grad_hi: &Tensor<T>,
    ) -> Vec<T> {
        assert_eq!(
            tape.acts.len(),
            self.layers.len() + 1,
            "tape does not belong to this network"
        );
        let out_shape = tape.acts.last().unwrap().lo.shape();
        assert_eq!(grad_lo.shape(), out_shape, "lower-bound gradient shape mismatch");
        assert_eq!(grad_hi.shape(), out_shape, "upper-bound gradient shape mismatch");
        let n = tape.acts[0].lo.shape()[0];
        let spans = self.param_spans();
        let mut grads = vec![T::zero(); self.param_count()];
        let mut gl = grad_lo.clone();
        let mut gh = grad_hi.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (off, len) = spans[i];
            let (nl, nh) =
                self.backward_interval_layer(i, layer, &tape.acts[i], &gl, &gh, n, &mut grads[off..off + len]);
            gl = nl;
            gh = nh;
        }
        grads
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_interval_layer(
        &self,
        i: usize,
        layer: &Layer<T>,
        x: &BoundedTensor<T>,
        gl: &Tensor<T>,
        gh: &Tensor<T>,
        n: usize,
        pg: &mut [T],
    ) -> (Tensor<T>, Tensor<T>) {
        let in_shape = &self.shapes[i];
        let bshape = self.batched_shape(i, n);
        let half = T::lit(0.5);
        match layer {
            Layer::Dense { w, .. } => {
                let (out, inp) = (w.shape()[0], w.shape()[1]);
                let (m, r) = mid_rad(x);
                let (gmu, grho) = mu_rho_grads(gl.as_slice(), gh.as_slice());
                let wabs: Vec<T> = w.as_slice().iter().map(|v| v.abs()).collect();
                let (dw, db) = pg.split_at_mut(out * inp);
                // dW = gmu' m + sign(W) . (grho' r)
                gemm_tn(out, n, inp, &gmu, &m, dw, false);
                let mut dwr = vec![T::zero(); out * inp];
                gemm_tn(out, n, inp, &grho, &r, &mut dwr, false);
                for ((dwv, wv), dr) in dw.iter_mut().zip(w.as_slice()).zip(&dwr) {
                    *dwv = *dwv + sign(*wv) * *dr;
                }
                for s in 0..n {
                    for o in 0..out {
                        db[o] = db[o] + gmu[s * out + o];
                    }
                }
                let mut dm = vec![T::zero(); n * inp];
                let mut dr = vec![T::zero(); n * inp];
                gemm(n, out, inp, &gmu, w.as_slice(), &mut dm, false);
                gemm(n, out, inp, &grho, &wabs, &mut dr, false);
                let (nl, nh) = endpoint_grads(&dm, &dr, half);
                (Tensor::from_vec(bshape.clone(), nl), Tensor::from_vec(bshape, nh))
            }
            Layer::Conv2d { w, stride, padding, .. } => {
                let (ic, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oc, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
                let (oh, ow) = conv_out_dims(h, wd, kh, kw, *stride, *padding);
                let k = ic * kh * kw;
                let plane = ic * h * wd;
                let opl = oc * oh * ow;
                let (m, r) = mid_rad(x);
                let (gmu, grho) = mu_rho_grads(gl.as_slice(), gh.as_slice());
                let wabs: Vec<T> = w.as_slice().iter().map(|v| v.abs()).collect();
                let (dw, db) = pg.split_at_mut(oc * k);
                let mut dwr = vec![T::zero(); oc * k];
                let mut cols = vec![T::zero(); k * oh * ow];
                let mut dcols = vec![T::zero(); k * oh * ow];
                let mut dm = vec![T::zero(); n * plane];
                let mut dr = vec![T::zero(); n * plane];
                for s in 0..n {
                    let gmu_s = &gmu[s * opl..(s + 1) * opl];
                    let grho_s = &grho[s * opl..(s + 1) * opl];
                    im2col(&m[s * plane..(s + 1) * plane], ic, h, wd, kh, kw, *stride, *padding, &mut cols);
                    gemm_nt(oc, oh * ow, k, gmu_s, &cols, dw, true);
                    gemm_tn(k, oc, oh * ow, w.as_slice(), gmu_s, &mut dcols, false);
                    col2im(&dcols, ic, h, wd, kh, kw, *stride, *padding, &mut dm[s * plane..(s + 1) * plane]);
                    im2col(&r[s * plane..(s + 1) * plane], ic, h, wd, kh, kw, *stride, *padding, &mut cols);
                    gemm_nt(oc, oh * ow, k, grho_s, &cols, &mut dwr, true);
                    gemm_tn(k, oc, oh * ow, &wabs, grho_s, &mut dcols, false);
                    col2im(&dcols, ic, h, wd, kh, kw, *stride, *padding, &mut dr[s * plane..(s + 1) * plane]);
                    for o in 0..oc {
                        for p in 0..oh * ow {
                            db[o] = db[o] + gmu_s[o * oh * ow + p];
                        }
                    }
                }
                for ((dwv, wv), drv) in dw.iter_mut().zip(w.as_slice()).zip(&dwr) {
                    *dwv = *dwv + sign(*wv) * *drv;
                }
                let (nl, nh) = endpoint_grads(&dm, &dr, half);
                (Tensor::from_vec(bshape.clone(), nl), Tensor::from_vec(bshape, nh))
            }
            Layer::Relu => {
                let nl: Vec<T> = x
                    .lo
                    .as_slice()
                    .iter()
                    .zip(gl.as_slice())
                    .map(|(v, g)| if *v > T::zero() { *g } else { T::zero() })
                    .collect();
                let nh: Vec<T> = x
                    .hi
                    .as_slice()
                    .iter()
                    .zip(gh.as_slice())
                    .map(|(v, g)| if *v > T::zero() { *g } else { T::zero() })
                    .collect();
                (Tensor::from_vec(bshape.clone(), nl), Tensor::from_vec(bshape, nh))
            }
            Layer::Flatten => (
                Tensor::from_vec(bshape.clone(), gl.as_slice().to_vec()),
                Tensor::from_vec(bshape, gh.as_slice().to_vec()),
            ),
            Layer::Normalize { std, .. } => (
                Tensor::from_vec(bshape.clone(), channel_map(gl.as_slice(), in_shape, |c, v| v / std[c])),
                Tensor::from_vec(bshape, channel_map(gh.as_slice(), in_shape, |c, v| v / std[c])),
            ),
            Layer::BatchNormEval { scale, shift, mean, var, eps } => {
                let (a, _) = bn_affine(scale, shift, mean, var, *eps);
                let nl = channel_zip(gl.as_slice(), gh.as_slice(), in_shape, |c, l, h| {
                    if a[c] >= T::zero() { a[c] * l } else { a[c] * h }
                });
                let nh = channel_zip(gl.as_slice(), gh.as_slice(), in_shape, |c, l, h| {
                    if a[c] >= T::zero() { a[c] * h } else { a[c] * l }
                });
                (Tensor::from_vec(bshape.clone(), nl), Tensor::from_vec(bshape, nh))
            }
        }
    }
}

/// Records the input to each layer of a concrete forward pass.
pub struct ConcreteTape<T> {
    acts: Vec<Tensor<T>>,
}

impl<T> ConcreteTape<T> {
    /// Recorded output of the pass (last activation).
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().unwrap()
    }
}

/// Records the interval input to each layer of an interval forward pass.
pub struct IntervalTape<T> {
    acts: Vec<BoundedTensor<T>>,
}

impl<T> IntervalTape<T> {
    pub fn output(&self) -> &BoundedTensor<T> {
        self.acts.last().unwrap()
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn mid_rad<T: Scalar>(x: &BoundedTensor<T>) -> (Vec<T>, Vec<T>) {
    let half = T::lit(0.5);
    let m: Vec<T> =
        x.lo.as_slice().iter().zip(x.hi.as_slice()).map(|(l, h)| (*l + *h) * half).collect();
    let r: Vec<T> =
        x.lo.as_slice().iter().zip(x.hi.as_slice()).map(|(l, h)| (*h - *l) * half).collect();
    (m, r)
}

/// lo = mu - rho and hi = mu + rho, so dmu = glo + ghi and drho = ghi - glo.
fn mu_rho_grads<T: Scalar>(gl: &[T], gh: &[T]) -> (Vec<T>, Vec<T>) {
    let gmu: Vec<T> = gl.iter().zip(gh).map(|(l, h)| *l + *h).collect();
    let grho: Vec<T> = gl.iter().zip(gh).map(|(l, h)| *h - *l).collect();
    (gmu, grho)
}

/// m = (lo + hi)/2 and r = (hi - lo)/2, so dlo = (dm - dr)/2, dhi = (dm + dr)/2.
fn endpoint_grads<T: Scalar>(dm: &[T], dr: &[T], half: T) -> (Vec<T>, Vec<T>) {
    let nl: Vec<T> = dm.iter().zip(dr).map(|(m, r)| (*m - *r) * half).collect();
    let nh: Vec<T> = dm.iter().zip(dr).map(|(m, r)| (*m + *r) * half).collect();
    (nl, nh)
}

/// Applies `f(channel, value)` over a batched tensor whose batchless shape
/// starts with the channel axis.
fn channel_map<T: Scalar>(x: &[T], in_shape: &[usize], f: impl Fn(usize, T) -> T) -> Vec<T> {
    let channels = in_shape[0];
    let plane: usize = in_shape[1..].iter().product();
    x.iter()
        .enumerate()
        .map(|(i, v)| f(i / plane % channels, *v))
        .collect()
}

fn channel_zip<T: Scalar>(
    a: &[T],
    b: &[T],
    in_shape: &[usize],
    f: impl Fn(usize, T, T) -> T,
) -> Vec<T> {
    let channels = in_shape[0];
    let plane: usize = in_shape[1..].iter().product();
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(i, (av, bv))| f(i / plane % channels, *av, *bv))
        .collect()
}
