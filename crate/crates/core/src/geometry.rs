//! Coordinate conventions, inverse affine transforms over interval
//! parameters, and the pixelwise contrast/brightness stage.
//!
//! Images use centered coordinates: pixel (i, j) of an HxW image sits at
//! u = j - (W-1)/2, v = (H-1)/2 - i, so transforms act about the image
//! center with v pointing up. A transform chain lists its affine stages in
//! forward application order; certification needs the inverse map, which
//! applies the per-stage inverses in reverse order. Transform parameters are
//! intervals throughout; a concrete parameter is a degenerate interval, so
//! there is exactly one code path.

use crate::error::{GeoCertError, Result};
use crate::interval::{Interval, Scalar};
use crate::tensor::{BoundedTensor, Tensor};

/// One affine stage. Angles are stored in radians; constructors take the
/// API-surface unit (degrees) and convert exactly once.
#[derive(Clone, Debug, PartialEq)]
pub enum AffineKind<T: Scalar> {
    Rotate(Interval<T>),
    Translate(Interval<T>, Interval<T>),
    Scale(Interval<T>),
    Shear(Interval<T>),
}

impl<T: Scalar> AffineKind<T> {
    /// Rotation by an angle range in degrees.
    pub fn rotate_deg(phi: Interval<T>) -> Self {
        Self::Rotate(phi * (T::PI() / T::lit(180.0)))
    }

    /// Translation by pixel offsets along u (right) and v (up).
    pub fn translate(du: Interval<T>, dv: Interval<T>) -> Self {
        Self::Translate(du, dv)
    }

    /// Scaling by a factor 1 + lambda; requires 1 + lambda.lo > 0.
    pub fn scale(lambda: Interval<T>) -> Self {
        Self::Scale(lambda)
    }

    /// Horizontal shear by gamma.
    pub fn shear(gamma: Interval<T>) -> Self {
        Self::Shear(gamma)
    }
}

/// Unit of one parameter axis at the API surface (reports, CLI specs).
/// Internally degrees become radians and percentages become fractions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Degrees,
    Pixels,
    Percent,
    Raw,
}

impl ParamKind {
    /// Surface unit to internal unit.
    pub fn to_internal<T: Scalar>(self, x: T) -> T {
        match self {
            ParamKind::Degrees => x * (T::PI() / T::lit(180.0)),
            ParamKind::Percent => x / T::lit(100.0),
            _ => x,
        }
    }

    /// Internal unit back to the surface unit.
    pub fn to_surface<T: Scalar>(self, x: T) -> T {
        match self {
            ParamKind::Degrees => x * (T::lit(180.0) / T::PI()),
            ParamKind::Percent => x * T::lit(100.0),
            _ => x,
        }
    }
}

/// Ordered affine stages plus an optional pixelwise contrast/brightness
/// stage (alpha, beta), always applied after interpolation.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformChain<T: Scalar> {
    pub affine: Vec<AffineKind<T>>,
    pub pixelwise: Option<(Interval<T>, Interval<T>)>,
}

impl<T: Scalar> TransformChain<T> {
    pub fn new(
        affine: Vec<AffineKind<T>>,
        pixelwise: Option<(Interval<T>, Interval<T>)>,
    ) -> Result<Self> {
        if affine.is_empty() && pixelwise.is_none() {
            return Err(GeoCertError::InvalidParameter("empty transform chain".into()));
        }
        for kind in &affine {
            if let AffineKind::Scale(l) = kind {
                if T::one() + l.lo <= T::zero() {
                    return Err(GeoCertError::InvalidParameter(format!(
                        "scale factor 1 + lambda must stay positive, got lambda.lo = {}",
                        l.lo
                    )));
                }
            }
        }
        Ok(Self { affine, pixelwise })
    }

    /// Parses the transform grammar: whitespace-separated tokens
    /// `R(deg_lo,deg_hi) Tu(px_lo,px_hi) Tv(px_lo,px_hi) Sc(pct_lo,pct_hi)
    /// Sh(pct_lo,pct_hi) C(pct_lo,pct_hi) B(lo,hi)` in forward application
    /// order. A single argument `N(x)` is shorthand for the symmetric range
    /// `N(-|x|,|x|)`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut affine = Vec::new();
        let mut alpha: Option<Interval<T>> = None;
        let mut beta: Option<Interval<T>> = None;
        let mut cursor = 0;
        for (idx, tok) in spec.split_whitespace().enumerate() {
            let at = spec[cursor..].find(tok).expect("token from this string") + cursor;
            cursor = at + tok.len();
            let fail = |what: &str| {
                GeoCertError::InvalidParameter(format!(
                    "token {} ('{}') at char {}: {}",
                    idx + 1,
                    tok,
                    at,
                    what
                ))
            };

            let open = tok.find('(').ok_or_else(|| fail("expected NAME(lo,hi)"))?;
            if !tok.ends_with(')') {
                return Err(fail("missing closing parenthesis"));
            }
            let name = &tok[..open];
            let args: Vec<&str> = tok[open + 1..tok.len() - 1].split(',').collect();
            let nums: Vec<f64> = args
                .iter()
                .map(|a| a.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| fail("arguments must be numbers"))?;
            let (lo, hi) = match nums[..] {
                [x] => (-x.abs(), x.abs()),
                [lo, hi] => (lo, hi),
                _ => return Err(fail("expected one or two arguments")),
            };
            let range = Interval::checked(T::lit(lo), T::lit(hi))
                .map_err(|_| fail("bounds are inverted or non-finite"))?;
            let zero = Interval::point(T::zero());
            match name {
                "R" => affine.push(AffineKind::rotate_deg(range)),
                "Tu" => affine.push(AffineKind::translate(range, zero)),
                "Tv" => affine.push(AffineKind::translate(zero, range)),
                "Sc" => affine.push(AffineKind::scale(range * T::lit(0.01))),
                "Sh" => affine.push(AffineKind::shear(range * T::lit(0.01))),
                "C" => {
                    if alpha.replace(range * T::lit(0.01)).is_some() {
                        return Err(fail("duplicate contrast stage"));
                    }
                }
                "B" => {
                    if beta.replace(range).is_some() {
                        return Err(fail("duplicate brightness stage"));
                    }
                }
                _ => return Err(fail("unknown transform name")),
            }
        }
        let zero = Interval::point(T::zero());
        let pixelwise = match (alpha, beta) {
            (None, None) => None,
            (a, b) => Some((a.unwrap_or(zero), b.unwrap_or(zero))),
        };
        Self::new(affine, pixelwise)
    }

    /// Number of scalar parameters (theta dimensions).
    pub fn param_count(&self) -> usize {
        let affine: usize = self
            .affine
            .iter()
            .map(|k| if matches!(k, AffineKind::Translate(..)) { 2 } else { 1 })
            .sum();
        affine + if self.pixelwise.is_some() { 2 } else { 0 }
    }

    /// Concatenation of all parameter intervals: affine stages in order,
    /// then contrast and brightness if present.
    pub fn params(&self) -> Vec<Interval<T>> {
        let mut out = Vec::with_capacity(self.param_count());
        for kind in &self.affine {
            match kind {
                AffineKind::Rotate(p) | AffineKind::Scale(p) | AffineKind::Shear(p) => {
                    out.push(*p)
                }
                AffineKind::Translate(du, dv) => {
                    out.push(*du);
                    out.push(*dv);
                }
            }
        }
        if let Some((a, b)) = self.pixelwise {
            out.push(a);
            out.push(b);
        }
        out
    }

    /// Surface unit of each parameter axis, aligned with [`Self::params`].
    pub fn param_kinds(&self) -> Vec<ParamKind> {
        let mut out = Vec::with_capacity(self.param_count());
        for kind in &self.affine {
            match kind {
                AffineKind::Rotate(_) => out.push(ParamKind::Degrees),
                AffineKind::Translate(..) => {
                    out.push(ParamKind::Pixels);
                    out.push(ParamKind::Pixels);
                }
                AffineKind::Scale(_) | AffineKind::Shear(_) => out.push(ParamKind::Percent),
            }
        }
        if self.pixelwise.is_some() {
            out.push(ParamKind::Percent);
            out.push(ParamKind::Raw);
        }
        out
    }

    /// Same chain structure with substituted parameter intervals; validates
    /// the result. Used for splitting and for concrete parameter samples.
    pub fn with_params(&self, params: &[Interval<T>]) -> Result<Self> {
        if params.len() != self.param_count() {
            return Err(GeoCertError::InvalidParameter(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        let mut next = || it.next().expect("length checked");
        let affine = self
            .affine
            .iter()
            .map(|k| match k {
                AffineKind::Rotate(_) => AffineKind::Rotate(next()),
                AffineKind::Translate(..) => AffineKind::Translate(next(), next()),
                AffineKind::Scale(_) => AffineKind::Scale(next()),
                AffineKind::Shear(_) => AffineKind::Shear(next()),
            })
            .collect();
        let pixelwise = self.pixelwise.map(|_| (next(), next()));
        Self::new(affine, pixelwise)
    }

    /// Degenerate chain at a concrete parameter vector.
    pub fn at(&self, values: &[T]) -> Result<Self> {
        let points: Vec<Interval<T>> = values.iter().map(|&v| Interval::point(v)).collect();
        self.with_params(&points)
    }
}

/// Centered pixel coordinates of an HxW image.
#[derive(Clone, Debug)]
pub struct CoordGrid<T> {
    pub u: Tensor<T>,
    pub v: Tensor<T>,
    pub h: usize,
    pub w: usize,
}

/// U(i,j) = j - (W-1)/2 and V(i,j) = (H-1)/2 - i, exactly.
pub fn coord_grid<T: Scalar>(h: usize, w: usize) -> CoordGrid<T> {
    assert!(h >= 1 && w >= 1);
    let cu = T::lit((w as f64 - 1.0) / 2.0);
    let cv = T::lit((h as f64 - 1.0) / 2.0);
    let mut u = Vec::with_capacity(h * w);
    let mut v = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            u.push(T::lit(j as f64) - cu);
            v.push(cv - T::lit(i as f64));
        }
    }
    CoordGrid {
        u: Tensor::from_vec(vec![h, w], u),
        v: Tensor::from_vec(vec![h, w], v),
        h,
        w,
    }
}

/// Per-stage inverse with parameter-dependent values precomputed once.
enum InverseStep<T: Scalar> {
    Rotate { cos: Interval<T>, sin: Interval<T> },
    Translate(Interval<T>, Interval<T>),
    ScaleRecip(Interval<T>),
    Shear(Interval<T>),
}

fn inverse_steps<T: Scalar>(chain: &TransformChain<T>) -> Vec<InverseStep<T>> {
    chain
        .affine
        .iter()
        .rev()
        .map(|kind| match kind {
            AffineKind::Rotate(phi) => InverseStep::Rotate { cos: phi.cos(), sin: phi.sin() },
            AffineKind::Translate(du, dv) => InverseStep::Translate(*du, *dv),
            // Validated at construction: 1 + lambda > 0.
            AffineKind::Scale(l) => InverseStep::ScaleRecip((*l + T::one()).recip()),
            AffineKind::Shear(g) => InverseStep::Shear(*g),
        })
        .collect()
}

/// Inverse coordinates of every grid point under every parameter choice in
/// the chain: applies the stage inverses in reverse application order.
pub fn inverse_transform<T: Scalar>(
    chain: &TransformChain<T>,
    grid: &CoordGrid<T>,
) -> (BoundedTensor<T>, BoundedTensor<T>) {
    let steps = inverse_steps(chain);
    let n = grid.h * grid.w;
    let mut ulo = Vec::with_capacity(n);
    let mut uhi = Vec::with_capacity(n);
    let mut vlo = Vec::with_capacity(n);
    let mut vhi = Vec::with_capacity(n);
    for i in 0..n {
        let (u, v) = inverse_point(&steps, grid.u.as_slice()[i], grid.v.as_slice()[i]);
        ulo.push(u.lo);
        uhi.push(u.hi);
        vlo.push(v.lo);
        vhi.push(v.hi);
    }
    let shape = vec![grid.h, grid.w];
    (
        BoundedTensor::new(
            Tensor::from_vec(shape.clone(), ulo),
            Tensor::from_vec(shape.clone(), uhi),
        ),
        BoundedTensor::new(Tensor::from_vec(shape.clone(), vlo), Tensor::from_vec(shape, vhi)),
    )
}

fn inverse_point<T: Scalar>(
    steps: &[InverseStep<T>],
    u0: T,
    v0: T,
) -> (Interval<T>, Interval<T>) {
    let mut u = Interval::point(u0);
    let mut v = Interval::point(v0);
    for step in steps {
        match step {
            InverseStep::Rotate { cos, sin } => {
                let nu = u * *cos + v * *sin;
                let nv = v * *cos - u * *sin;
                u = nu;
                v = nv;
            }
            InverseStep::Translate(du, dv) => {
                u = u - *du;
                v = v - *dv;
            }
            InverseStep::ScaleRecip(r) => {
                u = u * *r;
                v = v * *r;
            }
            InverseStep::Shear(g) => {
                u = u - *g * v;
            }
        }
    }
    (u, v)
}

/// One pixel through the contrast/brightness stage:
/// clamp01((1 + alpha) * x + beta).
#[inline]
pub fn pixelwise_interval<T: Scalar>(
    x: Interval<T>,
    alpha: Interval<T>,
    beta: Interval<T>,
) -> Interval<T> {
    ((x * (alpha + T::one())) + beta).clamp01()
}

/// Contrast/brightness over a whole bounded tensor.
pub fn apply_pixelwise<T: Scalar>(
    x: &BoundedTensor<T>,
    alpha: Interval<T>,
    beta: Interval<T>,
) -> BoundedTensor<T> {
    let n = x.len();
    let mut lo = Vec::with_capacity(n);
    let mut hi = Vec::with_capacity(n);
    for i in 0..n {
        let out = pixelwise_interval(x.get(i), alpha, beta);
        lo.push(out.lo);
        hi.push(out.hi);
    }
    BoundedTensor::new(
        Tensor::from_vec(x.shape().to_vec(), lo),
        Tensor::from_vec(x.shape().to_vec(), hi),
    )
}

/// Parses a comma-separated per-axis value list in surface units (degrees,
/// pixels, percent) into internal units; a single value broadcasts to all
/// axes. Used for `--nu` and split-width specs.
pub fn parse_axis_values<T: Scalar>(chain: &TransformChain<T>, spec: &str) -> Result<Vec<T>> {
    let kinds = chain.param_kinds();
    let raw: Vec<f64> = spec
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| {
            GeoCertError::InvalidParameter(format!("axis values must be numbers: '{spec}'"))
        })?;
    let values: Vec<f64> = if raw.len() == 1 {
        vec![raw[0]; kinds.len()]
    } else if raw.len() == kinds.len() {
        raw
    } else {
        return Err(GeoCertError::InvalidParameter(format!(
            "expected 1 or {} axis values, got {}",
            kinds.len(),
            raw.len()
        )));
    };
    Ok(kinds.iter().zip(values).map(|(k, v)| k.to_internal(T::lit(v))).collect())
}
