//! Quadrature, bracketing root search, normal-distribution helpers and
//! seedable random streams.

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::NumericsError;

pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Tail half-width, in units of the dominating Gaussian scale, beyond which
/// integrands are treated as zero.
pub const TAIL_SDS: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    AdaptiveSimpson,
    TensorProduct2d,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSpec {
    pub scheme: Scheme,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_depth: u32,
}

impl QuadratureSpec {
    pub fn new(scheme: Scheme, abs_tol: f64, rel_tol: f64, max_depth: u32) -> Result<Self, NumericsError> {
        if !(abs_tol > 0.0 && rel_tol > 0.0 && max_depth >= 1) {
            return Err(NumericsError::InvalidSpec);
        }
        Ok(Self { scheme, abs_tol, rel_tol, max_depth })
    }

    pub fn one_d() -> Self {
        Self { scheme: Scheme::AdaptiveSimpson, abs_tol: 1e-10, rel_tol: 1e-10, max_depth: 40 }
    }

    pub fn two_d() -> Self {
        Self { scheme: Scheme::TensorProduct2d, abs_tol: 1e-8, rel_tol: 1e-8, max_depth: 40 }
    }

    fn scaled(&self, factor: f64) -> Self {
        Self { abs_tol: self.abs_tol * factor, rel_tol: self.rel_tol, ..*self }
    }
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self::one_d()
    }
}

const INITIAL_PANELS: usize = 16;

struct Panel {
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

/// Adaptive Simpson quadrature of `f` over `[lo, hi]`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, spec: &QuadratureSpec) -> Result<f64, NumericsError> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(NumericsError::InvalidInterval { lo, hi });
    }
    let width = (hi - lo) / INITIAL_PANELS as f64;
    let mut panels = Vec::with_capacity(INITIAL_PANELS);
    let mut coarse = 0.0;
    let mut f_left = f(lo);
    for k in 0..INITIAL_PANELS {
        let a = lo + width * k as f64;
        let b = if k + 1 == INITIAL_PANELS { hi } else { a + width };
        let m = 0.5 * (a + b);
        let (fm, fb) = (f(m), f(b));
        let whole = simpson(a, b, f_left, fm, fb);
        coarse += whole;
        panels.push(Panel { a, b, fa: f_left, fm, fb, whole, tol: 0.0, depth: 0 });
        f_left = fb;
    }
    let total_tol = spec.abs_tol.max(spec.rel_tol * coarse.abs());
    for p in panels.iter_mut() {
        p.tol = total_tol * (p.b - p.a) / (hi - lo);
    }

    let mut sum = Accumulator::default();
    let mut err_bound = 0.0;
    let mut converged = true;
    let mut stack = panels;
    stack.reverse();
    while let Some(p) = stack.pop() {
        let m = 0.5 * (p.a + p.b);
        let lm = 0.5 * (p.a + m);
        let rm = 0.5 * (m + p.b);
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(p.a, m, p.fa, flm, p.fm);
        let right = simpson(m, p.b, p.fm, frm, p.fb);
        let delta = left + right - p.whole;
        if !delta.is_finite() {
            return Err(NumericsError::NonFinite { at: m });
        }
        if delta.abs() <= 15.0 * p.tol || m <= p.a || m >= p.b {
            sum.add(left + right + delta / 15.0);
            err_bound += delta.abs() / 15.0;
        } else if p.depth >= spec.max_depth {
            converged = false;
            sum.add(left + right + delta / 15.0);
            err_bound += delta.abs() / 15.0;
        } else {
            let tol = 0.5 * p.tol;
            let depth = p.depth + 1;
            stack.push(Panel { a: m, b: p.b, fa: p.fm, fm: frm, fb: p.fb, whole: right, tol, depth });
            stack.push(Panel { a: p.a, b: m, fa: p.fa, fm: flm, fb: p.fm, whole: left, tol, depth });
        }
    }
    let estimate = sum.value();
    if converged {
        Ok(estimate)
    } else {
        Err(NumericsError::NoConvergence { estimate, error_bound: err_bound })
    }
}

/// Integrates `f` over consecutive sub-intervals split at `breaks`, which
/// keeps narrow features from hiding between initial sample points.
pub fn integrate_pieces<F: Fn(f64) -> f64>(f: F, breaks: &[f64], spec: &QuadratureSpec) -> Result<f64, NumericsError> {
    let mut pts: Vec<f64> = breaks.iter().copied().filter(|v| v.is_finite()).collect();
    pts.sort_by(|a, b| a.total_cmp(b));
    pts.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
    let span = pts.last().copied().unwrap_or(0.0) - pts.first().copied().unwrap_or(0.0);
    let mut total = Accumulator::default();
    for w in pts.windows(2) {
        let share = spec.scaled((w[1] - w[0]) / span);
        total.add(integrate(&f, w[0], w[1], &share)?);
    }
    Ok(total.value())
}

/// Iterated (tensor-product) adaptive quadrature over `x_box × y_box`.
pub fn integrate2d<F: Fn(f64, f64) -> f64>(
    f: F,
    x_box: (f64, f64),
    y_box: (f64, f64),
    spec: &QuadratureSpec,
) -> Result<f64, NumericsError> {
    let inner_spec = spec.scaled(1.0 / (x_box.1 - x_box.0).max(1.0));
    let failure: Cell<Option<NumericsError>> = Cell::new(None);
    let outer = integrate(
        |x| match integrate(|y| f(x, y), y_box.0, y_box.1, &inner_spec) {
            Ok(v) => v,
            Err(e) => {
                let v = e.best_estimate().unwrap_or(0.0);
                failure.set(Some(e));
                v
            }
        },
        x_box.0,
        x_box.1,
        spec,
    )?;
    match failure.into_inner() {
        Some(e) => Err(e),
        None => Ok(outer),
    }
}

/// Bisection on a bracketing interval.
pub fn find_root<G: Fn(f64) -> f64>(g: G, lo: f64, hi: f64, tol: f64) -> Result<f64, NumericsError> {
    let (mut a, mut b) = (lo, hi);
    let (mut ga, gb) = (g(a), g(b));
    if ga == 0.0 {
        return Ok(a);
    }
    if gb == 0.0 {
        return Ok(b);
    }
    if !(ga * gb < 0.0) {
        return Err(NumericsError::NoSignChange { lo, hi });
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let gm = g(m);
        if gm.abs() <= tol || (b - a) <= tol || m == a || m == b {
            return Ok(m);
        }
        if (gm < 0.0) == (ga < 0.0) {
            a = m;
            ga = gm;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Probabilists' Hermite polynomials He_0..=He_m at `t`.
pub fn hermite_all(m: usize, t: f64, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    if m >= 1 {
        out.push(t);
    }
    for k in 2..=m {
        let next = t * out[k - 1] - (k - 1) as f64 * out[k - 2];
        out.push(next);
    }
}

/// k-th derivative of the N(0, s²) density at `u`.
pub fn gaussian_derivative(k: usize, u: f64, s: f64) -> f64 {
    let t = u / s;
    let mut he = Vec::with_capacity(k + 1);
    hermite_all(k, t, &mut he);
    let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
    sign * he[k] * normal_pdf(t) / s.powi(k as i32 + 1)
}

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
pub struct Accumulator {
    sum: f64,
    comp: f64,
}

impl Accumulator {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Fixed-shape pairwise sum; the result depends only on the slice contents.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        let mut acc = Accumulator::default();
        xs.iter().for_each(|&v| acc.add(v));
        return acc.value();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Immutable descriptor of one reproducible random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn generator(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

pub fn standard_normal_draws(stream: RngStream, count: usize) -> Vec<f64> {
    let mut rng = stream.generator();
    (0..count).map(|_| StandardNormal.sample(&mut rng)).collect()
}
