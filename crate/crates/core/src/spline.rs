//! Monotone rational-quadratic splines with linear tails.
//!
//! A spline is defined by `K + 1` knots spanning `[-B, B]` on both axes and a
//! positive derivative at every knot. Outside `[-B, B]` it is the identity.
//! Raw conditioner outputs (`3K + 1` values) decode into a spline through
//! softmax widths/heights and softplus derivatives; raw zeros decode to the
//! identity.

use crate::scalar::{sigmoid, softplus, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplineConfig<T> {
    pub bins: usize,
    pub tail_bound: T,
    pub min_bin_width: T,
    pub min_bin_height: T,
    pub min_derivative: T,
}

impl<T: Scalar> SplineConfig<T> {
    pub fn new(bins: usize, tail_bound: f64) -> Self {
        Self {
            bins,
            tail_bound: T::c(tail_bound),
            min_bin_width: T::c(1e-3),
            min_bin_height: T::c(1e-3),
            min_derivative: T::c(1e-3),
        }
    }

    /// Number of raw parameters per transformed dimension.
    pub fn raw_len(&self) -> usize {
        3 * self.bins + 1
    }

    /// Softplus shift that makes a raw zero decode to a unit derivative.
    fn derivative_shift(&self) -> T {
        let target = T::one() - self.min_derivative;
        (target.exp() - T::one()).ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RqSpline<T> {
    xs: Vec<T>,
    ys: Vec<T>,
    derivs: Vec<T>,
    tail_bound: T,
}

/// Partial derivatives of one bin evaluation with respect to everything the
/// output depends on, for reverse-mode use.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct BinPartials<T> {
    pub bin: usize,
    /// ∂(y, logdet)/∂x
    pub x: (T, T),
    pub xk: (T, T),
    pub wk: (T, T),
    pub hk: (T, T),
    pub dk: (T, T),
    pub dk1: (T, T),
}

/// A decoded spline plus what the reverse pass through the decoder needs.
#[derive(Debug, Clone)]
pub(crate) struct DecodedSpline<T> {
    pub spline: RqSpline<T>,
    width_probs: Vec<T>,
    height_probs: Vec<T>,
    deriv_slopes: Vec<T>,
}

impl<T: Scalar> Default for DecodedSpline<T> {
    fn default() -> Self {
        Self {
            spline: RqSpline::default(),
            width_probs: Vec::new(),
            height_probs: Vec::new(),
            deriv_slopes: Vec::new(),
        }
    }
}

impl<T: Scalar> Default for RqSpline<T> {
    fn default() -> Self {
        Self {
            xs: Vec::new(),
            ys: Vec::new(),
            derivs: Vec::new(),
            tail_bound: T::zero(),
        }
    }
}

impl<T: Scalar> RqSpline<T> {
    /// Builds a spline from explicit knots. Returns `None` unless the knots
    /// are strictly increasing, span `[-B, B]` on both axes and every
    /// derivative is positive.
    pub fn from_knots(xs: Vec<T>, ys: Vec<T>, derivs: Vec<T>) -> Option<Self> {
        let k = xs.len().checked_sub(1)?;
        if k == 0 || ys.len() != k + 1 || derivs.len() != k + 1 {
            return None;
        }
        let b = xs[k];
        let increasing = |v: &[T]| v.windows(2).all(|w| w[0] < w[1]);
        if !(b > T::zero()
            && xs[0] == -b
            && ys[0] == -b
            && ys[k] == b
            && increasing(&xs)
            && increasing(&ys)
            && derivs.iter().all(|&d| d > T::zero() && d.is_finite()))
        {
            return None;
        }
        Some(Self {
            xs,
            ys,
            derivs,
            tail_bound: b,
        })
    }

    pub fn identity(bins: usize, tail_bound: T) -> Self {
        decode_spline_params(&vec![T::zero(); 3 * bins + 1], &SplineConfig {
            bins,
            tail_bound,
            min_bin_width: T::c(1e-3),
            min_bin_height: T::c(1e-3),
            min_derivative: T::c(1e-3),
        })
    }

    pub fn bins(&self) -> usize {
        self.xs.len() - 1
    }

    pub fn tail_bound(&self) -> T {
        self.tail_bound
    }

    pub fn knots_x(&self) -> &[T] {
        &self.xs
    }

    pub fn knots_y(&self) -> &[T] {
        &self.ys
    }

    pub fn derivatives(&self) -> &[T] {
        &self.derivs
    }

    fn inside(&self, v: T) -> bool {
        v >= -self.tail_bound && v <= self.tail_bound
    }

    /// `(s(x), ln s'(x))`.
    pub fn forward(&self, x: T) -> (T, T) {
        if !self.inside(x) {
            return (x, T::zero());
        }
        let k = find_bin(&self.xs, x);
        let (y, ld, _) = self.eval_bin(k, x, false);
        (y, ld)
    }

    pub(crate) fn forward_with_partials(&self, x: T) -> (T, T, Option<BinPartials<T>>) {
        if !self.inside(x) {
            return (x, T::zero(), None);
        }
        let k = find_bin(&self.xs, x);
        self.eval_bin(k, x, true)
    }

    /// `(s⁻¹(y), ln (s⁻¹)'(y))`, in closed form through the root of the
    /// bin's quadratic.
    pub fn inverse(&self, y: T) -> (T, T) {
        if !self.inside(y) {
            return (y, T::zero());
        }
        let k = find_bin(&self.ys, y);
        let (xk, wk) = (self.xs[k], self.xs[k + 1] - self.xs[k]);
        let (yk, hk) = (self.ys[k], self.ys[k + 1] - self.ys[k]);
        let (dk, dk1) = (self.derivs[k], self.derivs[k + 1]);
        let s = hk / wk;
        let two = T::c(2.0);
        let dy = y - yk;
        let mix = dk + dk1 - two * s;
        let a = hk * (s - dk) + dy * mix;
        let b = hk * dk - dy * mix;
        let c = -s * dy;
        let disc = (b * b - T::c(4.0) * a * c).max(T::zero());
        let xi = (two * c / (-b - disc.sqrt())).max(T::zero()).min(T::one());
        let x = xk + xi * wk;
        let (_, ld, _) = self.eval_bin(k, x, false);
        (x, -ld)
    }

    fn eval_bin(&self, k: usize, x: T, partials: bool) -> (T, T, Option<BinPartials<T>>) {
        let (xk, wk) = (self.xs[k], self.xs[k + 1] - self.xs[k]);
        let (yk, hk) = (self.ys[k], self.ys[k + 1] - self.ys[k]);
        let (dk, dk1) = (self.derivs[k], self.derivs[k + 1]);
        let one = T::one();
        let two = T::c(2.0);
        let xi = ((x - xk) / wk).max(T::zero()).min(one);
        let s = hk / wk;
        let t1 = xi * (one - xi);
        let mix = dk + dk1 - two * s;
        let den = s + mix * t1;
        let num_y = s * xi * xi + dk * t1;
        let ratio = num_y / den;
        let y = yk + hk * ratio;
        let num_d = dk1 * xi * xi + two * s * t1 + dk * (one - xi) * (one - xi);
        let logdet = two * s.ln() + num_d.ln() - two * den.ln();
        if !partials {
            return (y, logdet, None);
        }

        let one_m2xi = one - two * xi;
        // ∂den
        let den_xi = mix * one_m2xi;
        let den_s = one - two * t1;
        let den_d = t1;
        // ∂num_y
        let ny_xi = two * s * xi + dk * one_m2xi;
        let ny_s = xi * xi;
        let ny_dk = t1;
        // ∂ratio
        let r = |dn: T, dd: T| (dn - ratio * dd) / den;
        let y_xi = hk * r(ny_xi, den_xi);
        let y_s = hk * r(ny_s, den_s);
        let y_dk = hk * r(ny_dk, den_d);
        let y_dk1 = hk * r(T::zero(), den_d);
        // ∂num_d
        let nd_xi = two * dk1 * xi + two * s * one_m2xi - two * dk * (one - xi);
        let nd_s = two * t1;
        let nd_dk = (one - xi) * (one - xi);
        let nd_dk1 = xi * xi;
        let l_xi = nd_xi / num_d - two * den_xi / den;
        let l_s = two / s + nd_s / num_d - two * den_s / den;
        let l_dk = nd_dk / num_d - two * den_d / den;
        let l_dk1 = nd_dk1 / num_d - two * den_d / den;

        // ξ = (x - xk)/wk, s = hk/wk
        let inv_w = one / wk;
        let p = BinPartials {
            bin: k,
            x: (y_xi * inv_w, l_xi * inv_w),
            xk: (-y_xi * inv_w, -l_xi * inv_w),
            wk: (
                -(y_xi * xi + y_s * s) * inv_w,
                -(l_xi * xi + l_s * s) * inv_w,
            ),
            hk: (ratio + y_s * inv_w, l_s * inv_w),
            dk: (y_dk, l_dk),
            dk1: (y_dk1, l_dk1),
        };
        (y, logdet, Some(p))
    }
}

/// Index `k` with `knots[k] <= v < knots[k + 1]`; the last bin is closed.
fn find_bin<T: Scalar>(knots: &[T], v: T) -> usize {
    let k = knots.len() - 1;
    let pos = knots[1..k].partition_point(|&kn| kn <= v);
    pos.min(k - 1)
}

fn softmax_into<T: Scalar>(raw: &[T], out: &mut Vec<T>) {
    let max = raw.iter().copied().fold(T::neg_infinity(), T::max);
    out.clear();
    out.extend(raw.iter().map(|&r| (r - max).exp()));
    let sum = out.iter().fold(T::zero(), |a, &b| a + b);
    out.iter_mut().for_each(|p| *p /= sum);
}

/// Cumulative knots from softmax probabilities, pinned to `[-B, B]`.
fn knots_from_probs<T: Scalar>(probs: &[T], min_bin: T, bound: T, out: &mut Vec<T>) {
    let k = probs.len();
    let span = T::c(2.0) * bound;
    let scale = T::one() - min_bin * T::from_usize_lossy(k);
    out.clear();
    out.push(-bound);
    let mut acc = -bound;
    for &p in &probs[..k - 1] {
        acc += span * (min_bin + scale * p);
        out.push(acc);
    }
    out.push(bound);
}

/// Decodes `3K + 1` raw values into a spline: `K` width logits, `K` height
/// logits and `K + 1` derivative pre-activations.
pub fn decode_spline_params<T: Scalar>(raw: &[T], cfg: &SplineConfig<T>) -> RqSpline<T> {
    let mut d = DecodedSpline::default();
    decode_into(raw, cfg, &mut d);
    d.spline
}

pub(crate) fn decode_into<T: Scalar>(raw: &[T], cfg: &SplineConfig<T>, out: &mut DecodedSpline<T>) {
    let k = cfg.bins;
    assert_eq!(raw.len(), cfg.raw_len(), "raw spline parameter count");
    softmax_into(&raw[..k], &mut out.width_probs);
    softmax_into(&raw[k..2 * k], &mut out.height_probs);
    knots_from_probs(&out.width_probs, cfg.min_bin_width, cfg.tail_bound, &mut out.spline.xs);
    knots_from_probs(&out.height_probs, cfg.min_bin_height, cfg.tail_bound, &mut out.spline.ys);
    let shift = cfg.derivative_shift();
    out.spline.derivs.clear();
    out.deriv_slopes.clear();
    for &r in &raw[2 * k..] {
        out.spline.derivs.push(cfg.min_derivative + softplus(r + shift));
        out.deriv_slopes.push(sigmoid(r + shift));
    }
    out.spline.tail_bound = cfg.tail_bound;
}

impl<T: Scalar> DecodedSpline<T> {
    /// Pushes `(gy, glogdet)` through one bin evaluation and the decoder.
    /// Adds raw-parameter gradients into `raw_grad` and returns ∂/∂x.
    pub(crate) fn backward(
        &self,
        cfg: &SplineConfig<T>,
        p: &BinPartials<T>,
        gy: T,
        gl: T,
        raw_grad: &mut [T],
    ) -> T {
        let k = cfg.bins;
        let g = |pair: (T, T)| gy * pair.0 + gl * pair.1;
        let (g_xk, g_wk, g_hk) = (g(p.xk), g(p.wk), g(p.hk));
        // y_k has unit partial on y, none on logdet
        let g_yk = gy;
        let bin = p.bin;

        let span = T::c(2.0) * cfg.tail_bound;
        // widths: xk = -B + Σ_{j<bin} W_j, wk = W_bin
        let wscale = span * (T::one() - cfg.min_bin_width * T::from_usize_lossy(k));
        softmax_backward(
            &self.width_probs,
            |j| wscale * (if j < bin { g_xk } else { T::zero() } + if j == bin { g_wk } else { T::zero() }),
            &mut raw_grad[..k],
        );
        let hscale = span * (T::one() - cfg.min_bin_height * T::from_usize_lossy(k));
        softmax_backward(
            &self.height_probs,
            |j| hscale * (if j < bin { g_yk } else { T::zero() } + if j == bin { g_hk } else { T::zero() }),
            &mut raw_grad[k..2 * k],
        );
        raw_grad[2 * k + bin] += g(p.dk) * self.deriv_slopes[bin];
        raw_grad[2 * k + bin + 1] += g(p.dk1) * self.deriv_slopes[bin + 1];
        g(p.x)
    }
}

fn softmax_backward<T: Scalar>(probs: &[T], grad_p: impl Fn(usize) -> T, raw_grad: &mut [T]) {
    let gp: Vec<T> = (0..probs.len()).map(&grad_p).collect();
    let inner = probs.iter().zip(&gp).fold(T::zero(), |a, (&p, &g)| a + p * g);
    for ((rg, &p), &g) in raw_grad.iter_mut().zip(probs).zip(&gp) {
        *rg += p * (g - inner);
    }
}
