//! Population moment functionals, expansion polynomials, the CDF
//! approximations built from them, and Cornish–Fisher inversion.

use std::fmt;
use std::str::FromStr;

use crate::bandwidth::{optimal_bandwidth, pair_kernel, pilot_bandwidth, IlVariant};
use crate::density::{density_functionals, smoothed_mean, Component, DensityFunctionals, MixtureDensity};
use crate::error::{Error, Result};
use crate::kernel::{
    hermite_order_kernel, kernel_constants, pilot_convolution_functionals, KernelConstants, KernelSpec,
    PilotFunctionals,
};
use crate::numerics::{find_root, integrate_pieces, normal_cdf, normal_pdf, normal_quantile, QuadratureSpec};

pub const CACHE_HEADER: &str = "pilotkde-context v1";

/// Everything about a simulation design that does not depend on (x, n).
#[derive(Debug, Clone)]
pub struct ExpansionSetup {
    pub model: MixtureDensity,
    pub kernel: KernelSpec,
    pub pilot: KernelSpec,
    pub l: usize,
    pub lp: usize,
    pub variant: IlVariant,
    pub constants: KernelConstants,
    pub density: DensityFunctionals,
    pub pilot_funcs: PilotFunctionals,
}

impl ExpansionSetup {
    pub fn new(
        model: MixtureDensity,
        kernel: KernelSpec,
        pilot: KernelSpec,
        l: usize,
        lp: usize,
        variant: IlVariant,
    ) -> Result<Self> {
        if kernel.order() != l {
            return Err(Error::Input(format!("kernel order {} does not match L = {l}", kernel.order())));
        }
        let constants = kernel_constants(&kernel);
        let density = density_functionals(&model, l, lp, &QuadratureSpec::one_d())?;
        if !(density.i_l > 0.0) {
            return Err(Error::NonPositiveFunctional(density.i_l));
        }
        let pilot_funcs = pilot_convolution_functionals(&pilot, l, lp)?;
        Ok(Self { model, kernel, pilot, l, lp, variant, constants, density, pilot_funcs })
    }

    /// Gaussian K of order 2 with the order-`lp` Hermite pilot.
    pub fn standard(model: MixtureDensity, lp: usize, variant: IlVariant) -> Result<Self> {
        let kernel = hermite_order_kernel(2)?;
        let pilot = hermite_order_kernel(lp)?;
        Self::new(model, kernel, pilot, 2, lp, variant)
    }

    pub fn h0(&self, n: usize) -> Result<f64> {
        optimal_bandwidth(&self.constants, self.l, self.density.i_l, n)
    }

    pub fn b0(&self, n: usize) -> Result<f64> {
        pilot_bandwidth(&self.density, &self.pilot_funcs, self.l, self.lp, n, self.variant)
    }

    /// C_PI = 2 I_L⁻¹ / (2L + 1).
    pub fn c_pi(&self) -> f64 {
        2.0 / ((2 * self.l + 1) as f64 * self.density.i_l)
    }

    /// h₀ n^{1/(2L+1)}, free of n.
    pub fn bandwidth_constant(&self) -> Result<f64> {
        self.h0(1)
    }

    /// 𝓛(x) = f^{(2L)}(x) − E f^{(2L)}(X), with the expectation equal to I_L.
    pub fn script_l(&self, x: f64) -> f64 {
        self.model.deriv(x, 2 * self.l) - self.density.i_l
    }

    /// C_{Γ,l}(x) for l = 0…L−1.
    pub fn c_gamma(&self, x: f64) -> Vec<f64> {
        let big_l = self.l;
        (0..big_l)
            .map(|l| {
                let m = big_l + l;
                let fact: f64 = (1..m).map(|k| k as f64).product();
                -self.constants.kappa(m as u32, 1) * self.model.deriv(x, m) / fact
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum BPolicy {
    #[default]
    None,
    MseOptimal,
    Fixed(f64),
}

/// Moments of the kernel evaluated at (X − x)/h.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalMoments {
    pub mu20: f64,
    pub mu30: f64,
    pub mu40: f64,
    pub mu11: f64,
    pub mu21: f64,
    pub mu02: f64,
    pub xi11: f64,
    pub rho11: f64,
    pub delta: f64,
}

struct RawMoments<'a> {
    setup: &'a ExpansionSetup,
    x: f64,
    h: f64,
    breaks: Vec<f64>,
    quad: QuadratureSpec,
}

impl<'a> RawMoments<'a> {
    fn new(setup: &'a ExpansionSetup, x: f64, h: f64) -> Self {
        let a = setup.kernel.effective_support();
        let mut breaks = vec![-a, 0.0, a];
        for c in setup.model.components() {
            let u = (c.mean - x) / h;
            if u.abs() < a {
                breaks.push(u);
            }
        }
        Self { setup, x, h, breaks, quad: QuadratureSpec::one_d() }
    }

    /// ∫ K^a J^c f(x + uh) du, i.e. E[K^a J^c] / h, with J = K′u + K.
    fn raw(&self, a: i32, c: i32) -> Result<f64> {
        let k = &self.setup.kernel;
        let f = &self.setup.model;
        Ok(integrate_pieces(
            |u| {
                let kv = k.evaluate(u);
                let jv = if c == 0 { 0.0 } else { k.derivative(1, u) * u + kv };
                kv.powi(a) * jv.powi(c) * f.pdf(self.x + u * self.h)
            },
            &self.breaks,
            &self.quad,
        )?)
    }

    /// ∫ K(u) f^{(2L)}(x + uh) f(x + uh) du.
    fn kernel_weighted_curvature(&self) -> Result<f64> {
        let k = &self.setup.kernel;
        let f = &self.setup.model;
        let two_l = 2 * self.setup.l;
        Ok(integrate_pieces(
            |u| {
                let y = self.x + u * self.h;
                k.evaluate(u) * f.deriv(y, two_l) * f.pdf(y)
            },
            &self.breaks,
            &self.quad,
        )?)
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// h⁻¹ E[(K − m₁)^k (K² − m₂)^l] from raw moments r[p] = E[K^p]/h.
fn central_mixed(r: &[f64], h: f64, k: usize, l: usize) -> f64 {
    // E[K^p] = h r[p] for p ≥ 1, and 1 for p = 0
    let e = |p: usize| if p == 0 { 1.0 } else { h * r[p] };
    let (m1, m2) = (e(1), e(2));
    let mut acc = 0.0;
    for i in 0..=k {
        for j in 0..=l {
            let w = binomial(k, i) * binomial(l, j) * (-m1).powi((k - i) as i32) * (-m2).powi((l - j) as i32);
            acc += w * e(i + 2 * j);
        }
    }
    acc / h
}

pub fn local_moments(setup: &ExpansionSetup, x: f64, h: f64) -> Result<LocalMoments> {
    if !(h > 0.0) {
        return Err(Error::Input(format!("bandwidth must be positive, got {h}")));
    }
    let raw = RawMoments::new(setup, x, h);
    let r: Vec<f64> = (0..=4).map(|p| if p == 0 { Ok(1.0) } else { raw.raw(p, 0) }).collect::<Result<_>>()?;
    let r01 = raw.raw(0, 1)?;
    let r11 = raw.raw(1, 1)?;
    let mu20 = r[2] - h * r[1] * r[1];
    let mu30 = central_mixed(&r, h, 3, 0);
    let mu40 = central_mixed(&r, h, 4, 0);
    let mu11 = central_mixed(&r, h, 1, 1);
    let mu21 = central_mixed(&r, h, 2, 1);
    let mu02 = central_mixed(&r, h, 0, 2);
    let xi11 = r11 - h * r[1] * r01;
    let delta = (r11 - r[2]) - h * r[1] * (r01 - r[1]);
    let rho11 = raw.kernel_weighted_curvature()? - r[1] * setup.density.i_l;
    Ok(LocalMoments { mu20, mu30, mu40, mu11, mu21, mu02, xi11, rho11, delta })
}

/// ω₁₁₁ and ψ₁₁₁ with the K-factors at X_i and X_j. Both centred factors
/// have mean zero, so the double-centring of the pair kernel drops out and
/// the expectation reduces to h⁻¹ ∫ G₁(y) ∫ P(v) G₂(y − bv) dv dy.
pub fn pilot_moments(setup: &ExpansionSetup, x: f64, h: f64, b: f64) -> Result<(f64, f64)> {
    if !(h > 0.0) || !(b > 0.0) {
        return Err(Error::Input(format!("bandwidths must be positive, got h = {h}, b = {b}")));
    }
    let k = &setup.kernel;
    let f = &setup.model;
    let raw = RawMoments::new(setup, x, h);
    let m1 = h * raw.raw(1, 0)?;
    let mj = h * raw.raw(0, 1)?;
    let pair = pair_kernel(&setup.pilot, setup.variant);
    let p = pair.even_derivative(2 * setup.l);
    let reach = pair.effective_support();
    let ka = k.effective_support();

    let g_k = |y: f64| (k.evaluate((y - x) / h) - m1) * f.pdf(y);
    let g_j = |y: f64| {
        let u = (y - x) / h;
        (k.derivative(1, u) * u + k.evaluate(u) - mj) * f.pdf(y)
    };
    let inner_quad = QuadratureSpec::one_d();
    let inner = |y: f64, second: &dyn Fn(f64) -> f64| -> Result<f64> {
        let centre = (y - x) / b;
        let half = ka * h / b;
        let mut breaks = vec![-reach, 0.0, reach];
        for v in [centre - half, centre, centre + half] {
            if v.abs() < reach {
                breaks.push(v);
            }
        }
        Ok(integrate_pieces(|v| p.eval(v) * second(y - b * v), &breaks, &inner_quad)?)
    };

    let (lo, hi) = f.padded_support(crate::numerics::TAIL_SDS + 2.0);
    let mut outer_breaks = f.breakpoints(crate::numerics::TAIL_SDS + 2.0);
    outer_breaks.extend([x - ka * h, x, x + ka * h].iter().filter(|v| **v > lo && **v < hi));
    let outer_quad = QuadratureSpec::two_d();
    let run = |second: &dyn Fn(f64) -> f64| -> Result<f64> {
        let failure = std::cell::RefCell::new(None);
        let v = integrate_pieces(
            |y| {
                let first = g_k(y);
                if first == 0.0 {
                    return 0.0;
                }
                match inner(y, second) {
                    Ok(v) => first * v,
                    Err(e) => {
                        failure.borrow_mut().get_or_insert(e);
                        0.0
                    }
                }
            },
            &outer_breaks,
            &outer_quad,
        )?;
        match failure.into_inner() {
            Some(e) => Err(e),
            None => Ok(v / h),
        }
    };
    let omega = run(&g_k)?;
    let psi = run(&g_j)?;
    Ok((omega, psi))
}

/// All population symbols an expansion at one (x, n) needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionContext {
    pub model: MixtureDensity,
    pub kernel: KernelSpec,
    pub pilot: KernelSpec,
    pub l: usize,
    pub lp: usize,
    pub variant: IlVariant,
    pub x: f64,
    pub n: usize,
    pub h0: f64,
    pub b: Option<f64>,
    pub f_x: f64,
    /// E f̂_{h₀}(x)
    pub center: f64,
    pub i_l: f64,
    pub mu20: f64,
    pub mu30: f64,
    pub mu40: f64,
    pub mu11: f64,
    pub mu21: f64,
    pub mu02: f64,
    pub xi11: f64,
    pub rho11: f64,
    pub omega111: Option<f64>,
    pub psi111: Option<f64>,
    pub delta: f64,
    pub c_pi: f64,
    pub c_gamma: Vec<f64>,
    pub script_l: f64,
}

pub fn build_context(setup: &ExpansionSetup, x: f64, n: usize, b_policy: BPolicy) -> Result<ExpansionContext> {
    let h0 = setup.h0(n)?;
    let b = match b_policy {
        BPolicy::None => None,
        BPolicy::MseOptimal => Some(setup.b0(n)?),
        BPolicy::Fixed(b) if b > 0.0 => Some(b),
        BPolicy::Fixed(b) => return Err(Error::Input(format!("pilot bandwidth must be positive, got {b}"))),
    };
    let m = local_moments(setup, x, h0)?;
    let (omega111, psi111) = match b {
        Some(b) => {
            let (w, p) = pilot_moments(setup, x, h0, b)?;
            (Some(w), Some(p))
        }
        None => (None, None),
    };
    let ctx = ExpansionContext {
        model: setup.model.clone(),
        kernel: setup.kernel.clone(),
        pilot: setup.pilot.clone(),
        l: setup.l,
        lp: setup.lp,
        variant: setup.variant,
        x,
        n,
        h0,
        b,
        f_x: setup.model.pdf(x),
        center: smoothed_mean(&setup.model, &setup.kernel, h0, x)?,
        i_l: setup.density.i_l,
        mu20: m.mu20,
        mu30: m.mu30,
        mu40: m.mu40,
        mu11: m.mu11,
        mu21: m.mu21,
        mu02: m.mu02,
        xi11: m.xi11,
        rho11: m.rho11,
        omega111,
        psi111,
        delta: m.delta,
        c_pi: setup.c_pi(),
        c_gamma: setup.c_gamma(x),
        script_l: setup.script_l(x),
    };
    ctx.validate()?;
    Ok(ctx)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HallPolynomials {
    pub p1: f64,
    pub p2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PluginPolynomials {
    pub p3: Vec<f64>,
    pub p4: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PilotPolynomials {
    pub frak_p1: Vec<f64>,
    pub frak_p2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentPolynomials {
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub frak_q1: f64,
    pub frak_q2: f64,
}

fn he3(z: f64) -> f64 {
    z * z * z - 3.0 * z
}

fn he5(z: f64) -> f64 {
    let z2 = z * z;
    z * (z2 * z2 - 10.0 * z2 + 15.0)
}

pub fn hall_polynomials(ctx: &ExpansionContext, z: f64) -> HallPolynomials {
    let s = ctx.mu20;
    HallPolynomials {
        p1: -ctx.mu30 * s.powf(-1.5) * (z * z - 1.0) / 6.0,
        p2: -ctx.mu40 * s.powi(-2) * he3(z) / 24.0 - ctx.mu30.powi(2) * s.powi(-3) * he5(z) / 72.0,
    }
}

pub fn plugin_polynomials(ctx: &ExpansionContext, z: f64) -> PluginPolynomials {
    let s = ctx.mu20;
    let p3 = ctx.c_gamma.iter().map(|cg| -ctx.c_pi * cg * ctx.rho11 / s * z).collect();
    let p4 = -ctx.c_pi * ctx.rho11 * ctx.xi11 * s.powf(-1.5) * (z * z - 1.0) + 0.5 * ctx.c_pi * ctx.rho11 * s.powf(-0.5) * z * z;
    PluginPolynomials { p3, p4 }
}

fn require(field: Option<f64>, kind: CdfKind, name: &'static str) -> Result<f64> {
    field.ok_or_else(|| Error::MissingField { kind: kind.to_string(), field: name })
}

pub fn pilot_polynomials(ctx: &ExpansionContext, z: f64) -> Result<PilotPolynomials> {
    let omega = require(ctx.omega111, CdfKind::Pilot2, "omega111")?;
    let psi = require(ctx.psi111, CdfKind::Pilot2, "psi111")?;
    Ok(pilot_polynomials_with(ctx, omega, psi, z))
}

fn pilot_polynomials_with(ctx: &ExpansionContext, omega: f64, psi: f64, z: f64) -> PilotPolynomials {
    let s = ctx.mu20;
    let frak_p1 = ctx.c_gamma.iter().map(|cg| -0.5 * ctx.c_pi * cg * s.powf(-1.5) * omega * (z * z - 1.0)).collect();
    let frak_p2 = -ctx.c_pi
        * (0.5 * s.powi(-2) * ctx.xi11 * omega * he3(z) + psi / s * z - 0.25 * omega / s * (z * z * z - z));
    PilotPolynomials { frak_p1, frak_p2 }
}

pub fn student_polynomials(ctx: &ExpansionContext, z: f64) -> Result<StudentPolynomials> {
    let omega = require(ctx.omega111, CdfKind::Student, "omega111")?;
    let s = ctx.mu20;
    let z2 = z * z;
    let studentise = 1.0 + ctx.delta / s;
    Ok(StudentPolynomials {
        q1: 0.5 * s.powf(-1.5) * ctx.mu11 - s.powf(-1.5) * (ctx.mu30 - 3.0 * ctx.mu11) * (z2 - 1.0) / 6.0,
        q2: -ctx.f_x / s * z2,
        q3: -s.powi(-3) * ctx.mu30.powi(2) * z
            - (2.0 / 3.0 * s.powi(-3) * ctx.mu30.powi(2) - s.powi(-2) * ctx.mu40 / 12.0) * he3(z)
            - s.powi(-3) * ctx.mu30.powi(3) * he5(z) / 18.0,
        frak_q1: 0.5 * ctx.c_pi * studentise * s.powf(-0.5) * ctx.rho11 * z2,
        frak_q2: 0.25 * ctx.c_pi * omega / s * studentise * (z2 * z - 2.0 * z),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CdfKind {
    Normal,
    Hall1,
    Hall2,
    Main,
    Pilot1,
    Pilot2,
    Student,
}

impl CdfKind {
    pub const ALL: [CdfKind; 7] =
        [CdfKind::Normal, CdfKind::Hall1, CdfKind::Hall2, CdfKind::Main, CdfKind::Pilot1, CdfKind::Pilot2, CdfKind::Student];

    pub fn as_str(self) -> &'static str {
        match self {
            CdfKind::Normal => "normal",
            CdfKind::Hall1 => "hall1",
            CdfKind::Hall2 => "hall2",
            CdfKind::Main => "main",
            CdfKind::Pilot1 => "pilot1",
            CdfKind::Pilot2 => "pilot2",
            CdfKind::Student => "student",
        }
    }
}

impl fmt::Display for CdfKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CdfKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CdfKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| Error::Input(format!("unknown approximation '{s}'")))
    }
}

/// Rate factors multiplying each polynomial family.
struct Rates {
    p1: f64,
    p2: f64,
    p3: Vec<f64>,
    p4: f64,
    frak_p1: Vec<f64>,
    frak_p2: f64,
}

fn rates(ctx: &ExpansionContext) -> Rates {
    let n = ctx.n as f64;
    let h = ctx.h0;
    let l = ctx.l as i32;
    let nh = n * h;
    let pilot_scale = ctx.b.map(|b| b.powi(-2 * l)).unwrap_or(f64::NAN);
    Rates {
        p1: nh.powf(-0.5),
        p2: 1.0 / nh,
        p3: (0..ctx.l).map(|j| h.powi(l + j as i32 + 1)).collect(),
        p4: n.powf(-0.5) * h.sqrt(),
        frak_p1: (0..ctx.l)
            .map(|j| n.powf(-0.5) * h.powf((2 * l + 2 * j as i32 + 1) as f64 / 2.0) * pilot_scale)
            .collect(),
        frak_p2: pilot_scale / n,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The bracket multiplying φ(z) in the chosen approximation.
pub fn correction(ctx: &ExpansionContext, z: f64, kind: CdfKind) -> Result<f64> {
    if kind == CdfKind::Normal {
        return Ok(0.0);
    }
    let r = rates(ctx);
    let hall = hall_polynomials(ctx, z);
    let first = r.p1 * hall.p1;
    let second = first + r.p2 * hall.p2;
    let plugin = || {
        let pp = plugin_polynomials(ctx, z);
        dot(&r.p3, &pp.p3) + r.p4 * pp.p4
    };
    let pilot = || -> Result<f64> {
        let omega = require(ctx.omega111, kind, "omega111")?;
        let psi = require(ctx.psi111, kind, "psi111")?;
        require(ctx.b, kind, "b")?;
        let pp = pilot_polynomials_with(ctx, omega, psi, z);
        Ok(dot(&r.frak_p1, &pp.frak_p1) + r.frak_p2 * pp.frak_p2)
    };
    Ok(match kind {
        CdfKind::Normal => 0.0,
        CdfKind::Hall1 => first,
        CdfKind::Hall2 => second,
        CdfKind::Main => second + plugin(),
        CdfKind::Pilot1 => first + pilot()?,
        CdfKind::Pilot2 => second + plugin() + pilot()?,
        CdfKind::Student => {
            let omega = require(ctx.omega111, kind, "omega111")?;
            let psi = require(ctx.psi111, kind, "psi111")?;
            require(ctx.b, kind, "b")?;
            let q = student_polynomials(ctx, z)?;
            let pl = plugin_polynomials(ctx, z);
            let pp = pilot_polynomials_with(ctx, omega, psi, z);
            r.p1 * q.q1
                + r.p4 * (q.q2 + pl.p4 + q.frak_q1)
                + r.p2 * q.q3
                + dot(&r.p3, &pl.p3)
                + dot(&r.frak_p1, &pp.frak_p1)
                + r.frak_p2 * (pp.frak_p2 + q.frak_q2)
        }
    })
}

/// Φ(z) + φ(z)·[bracket of `kind`].
pub fn cdf_approx(ctx: &ExpansionContext, z: f64, kind: CdfKind) -> Result<f64> {
    let c = correction(ctx, z, kind)?;
    Ok(normal_cdf(z) + normal_pdf(z) * c)
}

const QUANTILE_RANGE: f64 = 6.0;
const QUANTILE_STEP: f64 = 1e-3;

/// z* with cdf_approx(z*) = α, on the branch reached by scanning outward
/// from the normal quantile.
pub fn cornish_fisher_quantile(ctx: &ExpansionContext, kind: CdfKind, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Input(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let z0 = normal_quantile(alpha).clamp(-QUANTILE_RANGE, QUANTILE_RANGE);
    if kind == CdfKind::Normal {
        return Ok(z0);
    }
    // fail fast on an incomplete context
    correction(ctx, z0, kind)?;
    let g = |z: f64| cdf_approx(ctx, z, kind).map(|v| v - alpha).unwrap_or(f64::NAN);
    let g0 = g(z0);
    if g0 == 0.0 {
        return Ok(z0);
    }
    let preferred = if g0 < 0.0 { 1.0 } else { -1.0 };
    let not_found = || Error::QuantileNotFound { kind: kind.to_string(), alpha };
    for dir in [preferred, -preferred] {
        let mut prev = (z0, g0);
        let mut k = 1usize;
        loop {
            let z = z0 + dir * QUANTILE_STEP * k as f64;
            if z.abs() > QUANTILE_RANGE + 1e-12 {
                break;
            }
            let gz = g(z);
            if !gz.is_finite() {
                return Err(Error::NonFinite("approximate cdf"));
            }
            if gz == 0.0 {
                return Ok(z);
            }
            if gz.signum() != prev.1.signum() {
                let (lo, hi) = if prev.0 < z { (prev.0, z) } else { (z, prev.0) };
                return find_root(g, lo, hi, 1e-13).map_err(|_| not_found());
            }
            prev = (z, gz);
            k += 1;
        }
    }
    Err(not_found())
}

/// Coefficients of h₀ in the series for μ₂₀ and μ₃₀, l = 0…L.
#[derive(Debug, Clone, PartialEq)]
pub struct MuSeries {
    pub m2: Vec<f64>,
    pub m3: Vec<f64>,
}

pub fn mu_series(model: &MixtureDensity, constants: &KernelConstants, x: f64, l: usize) -> MuSeries {
    let f = model.pdf(x);
    let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
    let kap = |s: usize, t: u32| constants.kappa(s as u32, t);
    let mut m2 = vec![kap(0, 2) * f, -f * f];
    let mut m3 = vec![kap(0, 3) * f, -3.0 * kap(0, 2) * f * f];
    for j in 2..=l {
        m2.push(kap(j, 2) * model.deriv(x, j) / fact(j));
        let mut c = kap(j, 3) * model.deriv(x, j) / fact(j);
        if j == 2 {
            c += 2.0 * f.powi(3);
        } else {
            c -= 3.0 * kap(j - 1, 2) * model.deriv(x, j - 1) / fact(j - 1) * f;
        }
        m3.push(c);
    }
    m2.truncate(l + 1);
    m3.truncate(l + 1);
    MuSeries { m2, m3 }
}

/// Ordered tuples of positive integers with the given length and sum.
fn compositions(len: usize, total: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if len == 0 {
        if total == 0 {
            out.push(prefix.clone());
        }
        return;
    }
    for first in 1..=total.saturating_sub(len - 1) {
        prefix.push(first);
        compositions(len - 1, total - first, prefix, out);
        prefix.pop();
    }
}

/// Coefficient of h₀^q in μ₃₀ μ₂₀^{−3/2}.
pub fn skewness_coefficient(series: &MuSeries, q: usize) -> f64 {
    let m20 = series.m2[0];
    let mut acc = 0.0;
    for l in 0..=q.min(series.m3.len() - 1) {
        let rest = q - l;
        for k in 0..=rest {
            let mut double_fact = 1.0;
            let mut d = 2 * k + 1;
            while d > 1 {
                double_fact *= d as f64;
                d -= 2;
            }
            let k_fact: f64 = (1..=k).map(|v| v as f64).product();
            let w = if k.is_multiple_of(2) { 1.0 } else { -1.0 } * double_fact / (2f64.powi(k as i32) * k_fact)
                * m20.powf(-(2.0 * k as f64 + 3.0) / 2.0);
            let mut tuples = Vec::new();
            compositions(k, rest, &mut Vec::new(), &mut tuples);
            let mut inner = 0.0;
            for t in &tuples {
                if t.iter().all(|&i| i < series.m2.len()) {
                    inner += t.iter().map(|&i| series.m2[i]).product::<f64>();
                }
            }
            acc += w * series.m3[l] * inner;
        }
    }
    acc
}

/// The n-free functions of x that make up the power-series coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gammas {
    pub g10: f64,
    pub g11: f64,
    pub g210: f64,
    pub g220: f64,
    pub g310: f64,
    pub g311: f64,
    pub g410: f64,
    pub g411: f64,
    pub g420: f64,
    pub g421: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerSeries {
    /// h₀ = c n^{−1/(2L+1)}
    pub c: f64,
    pub a: Vec<f64>,
    pub b_coeff: Vec<f64>,
    pub gammas: Gammas,
}

impl PowerSeries {
    /// Σ_j coeffs[j] n^{−(L+j)/(2L+1)}.
    pub fn sum(coeffs: &[f64], l: usize, n: f64) -> f64 {
        let d = (2 * l + 1) as f64;
        coeffs.iter().enumerate().map(|(j, c)| c * n.powf(-((l + j) as f64) / d)).sum()
    }
}

/// Coefficients a_j (deterministic bandwidth) and b_j, j ≤ 2 (plug-in), of
/// the expansions in powers of n^{−1/(2L+1)}, evaluated at z.
pub fn power_series_coeffs(setup: &ExpansionSetup, x: f64, z: f64) -> Result<PowerSeries> {
    let l = setup.l;
    let c = setup.bandwidth_constant()?;
    let f = setup.model.pdf(x);
    if !(f > 0.0) {
        return Err(Error::Input(format!("density vanishes at x = {x}")));
    }
    let k = &setup.constants;
    let (k02, k03, k04) = (k.kappa(0, 2), k.kappa(0, 3), k.kappa(0, 4));
    let tau0 = k.tau(0);
    let c_pi = setup.c_pi();
    let c_gamma = setup.c_gamma(x);
    let script_l = setup.script_l(x);
    let series = mu_series(&setup.model, k, x, l);
    let z2m1 = z * z - 1.0;

    let gammas = Gammas {
        g10: -k02.powf(-1.5) * k03 * f.powf(-0.5) / 6.0,
        g11: 0.5 * (k02.powf(-0.5) * f.sqrt() - k02.powf(-2.5) * k03 * f.sqrt() / 2.0),
        g210: -k02.powi(-2) * k04 / f / 24.0,
        g220: -k02.powi(-3) * k03 * k03 / f / 72.0,
        g310: -c_pi * c_gamma[0] / k02 * script_l,
        g311: -c_pi * c_gamma[0] * k02.powi(-2) * script_l * f,
        g410: -c_pi * k02.powf(-1.5) * tau0 * script_l * f.sqrt(),
        g411: -1.5 * c_pi * k02.powf(-2.5) * tau0 * script_l * f.powf(1.5),
        g420: 0.5 * c_pi * k02.powf(-0.5) * script_l * f.sqrt(),
        g421: 0.25 * c_pi * k02.powf(-1.5) * script_l * f.powf(1.5),
    };

    let mut a: Vec<f64> = (0..=l)
        .map(|q| -c.powf(q as f64 - 0.5) * skewness_coefficient(&series, q) * z2m1 / 6.0)
        .collect();
    a[l] += (gammas.g210 * he3(z) + gammas.g220 * he5(z)) / c;

    let lf = l as f64;
    let mut b_coeff = vec![a[0]];
    if l >= 1 {
        b_coeff.push(
            a[1] + c.powf(lf + 1.0) * gammas.g310 * z + c.sqrt() * (gammas.g410 * z2m1 + gammas.g420 * z * z),
        );
    }
    if l >= 2 {
        let mut b2 = a[2]
            + c.powf(lf + 2.0) * gammas.g311 * z
            + c.powf(1.5) * (gammas.g411 * z2m1 + gammas.g421 * z * z);
        if c_gamma.len() > 1 {
            b2 += c.powf(lf + 2.0) * (-c_pi * c_gamma[1] / k02 * script_l) * z;
        }
        b_coeff.push(b2);
    }
    Ok(PowerSeries { c, a, b_coeff, gammas })
}

impl ExpansionContext {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu20 > 0.0) {
            return Err(Error::NonPositiveFunctional(self.mu20));
        }
        if !(self.c_pi > 0.0) {
            return Err(Error::NonPositiveFunctional(self.c_pi));
        }
        if self.c_gamma.len() != self.l {
            return Err(Error::Input("C_Gamma must have L entries".into()));
        }
        let scalars = [
            self.h0, self.f_x, self.center, self.mu20, self.mu30, self.mu40, self.mu11, self.mu21, self.mu02, self.xi11,
            self.rho11, self.delta, self.script_l,
        ];
        if scalars.iter().chain(self.omega111.iter()).chain(self.psi111.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("expansion context"));
        }
        Ok(())
    }

    /// Flat `key = value` text; floats use their shortest round-trip form.
    pub fn to_cache_string(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |v| format!("{v:?}"));
        let comps: Vec<String> =
            self.model.components().iter().map(|c| format!("{:?}:{:?}:{:?}", c.weight, c.mean, c.sd)).collect();
        let cg: Vec<String> = self.c_gamma.iter().map(|v| format!("{v:?}")).collect();
        let lines = [
            ("model", comps.join(",")),
            ("kernel_order", self.kernel.order().to_string()),
            ("pilot_order", self.pilot.order().to_string()),
            ("variant", self.variant.to_string()),
            ("l", self.l.to_string()),
            ("lp", self.lp.to_string()),
            ("x", format!("{:?}", self.x)),
            ("n", self.n.to_string()),
            ("h0", format!("{:?}", self.h0)),
            ("b", opt(self.b)),
            ("f_x", format!("{:?}", self.f_x)),
            ("center", format!("{:?}", self.center)),
            ("i_l", format!("{:?}", self.i_l)),
            ("mu20", format!("{:?}", self.mu20)),
            ("mu30", format!("{:?}", self.mu30)),
            ("mu40", format!("{:?}", self.mu40)),
            ("mu11", format!("{:?}", self.mu11)),
            ("mu21", format!("{:?}", self.mu21)),
            ("mu02", format!("{:?}", self.mu02)),
            ("xi11", format!("{:?}", self.xi11)),
            ("rho11", format!("{:?}", self.rho11)),
            ("omega111", opt(self.omega111)),
            ("psi111", opt(self.psi111)),
            ("delta", format!("{:?}", self.delta)),
            ("c_pi", format!("{:?}", self.c_pi)),
            ("c_gamma", cg.join(",")),
            ("script_l", format!("{:?}", self.script_l)),
        ];
        let mut out = String::from(CACHE_HEADER);
        out.push('\n');
        for (k, v) in lines {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn from_cache_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CACHE_HEADER => {}
            _ => return Err(Error::Config { line: 1, message: format!("expected header '{CACHE_HEADER}'") }),
        }
        let mut map = std::collections::HashMap::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config { line: i + 1, message: "expected key = value".into() })?;
            map.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
        }
        let get = |k: &str| -> Result<&(usize, String)> {
            map.get(k).ok_or_else(|| Error::Config { line: 0, message: format!("missing key '{k}'") })
        };
        let bad = |line: usize, k: &str| Error::Config { line, message: format!("invalid value for '{k}'") };
        let real = |k: &str| -> Result<f64> {
            let (line, v) = get(k)?;
            v.parse::<f64>().map_err(|_| bad(*line, k))
        };
        let int = |k: &str| -> Result<usize> {
            let (line, v) = get(k)?;
            v.parse::<usize>().map_err(|_| bad(*line, k))
        };
        let opt = |k: &str| -> Result<Option<f64>> {
            let (line, v) = get(k)?;
            if v == "none" {
                Ok(None)
            } else {
                v.parse::<f64>().map(Some).map_err(|_| bad(*line, k))
            }
        };
        let list = |k: &str| -> Result<Vec<f64>> {
            let (line, v) = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|s| s.trim().parse::<f64>().map_err(|_| bad(*line, k))).collect()
        };
        let (mline, mtext) = get("model")?;
        let comps = mtext
            .split(',')
            .map(|c| {
                let parts: Vec<f64> = c.split(':').map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad(*mline, "model"))?;
                match parts[..] {
                    [weight, mean, sd] => Ok(Component { weight, mean, sd }),
                    _ => Err(bad(*mline, "model")),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let variant = get("variant")?.1.parse::<IlVariant>()?;
        let ctx = ExpansionContext {
            model: MixtureDensity::new(comps)?,
            kernel: hermite_order_kernel(int("kernel_order")?)?,
            pilot: hermite_order_kernel(int("pilot_order")?)?,
            l: int("l")?,
            lp: int("lp")?,
            variant,
            x: real("x")?,
            n: int("n")?,
            h0: real("h0")?,
            b: opt("b")?,
            f_x: real("f_x")?,
            center: real("center")?,
            i_l: real("i_l")?,
            mu20: real("mu20")?,
            mu30: real("mu30")?,
            mu40: real("mu40")?,
            mu11: real("mu11")?,
            mu21: real("mu21")?,
            mu02: real("mu02")?,
            xi11: real("xi11")?,
            rho11: real("rho11")?,
            omega111: opt("omega111")?,
            psi111: opt("psi111")?,
            delta: real("delta")?,
            c_pi: real("c_pi")?,
            c_gamma: list("c_gamma")?,
            script_l: real("script_l")?,
        };
        ctx.validate()?;
        Ok(ctx)
    }

    /// True when this context was built for the given design point.
    pub fn matches(&self, setup: &ExpansionSetup, x: f64, n: usize, b: Option<f64>) -> bool {
        self.model == setup.model
            && self.kernel.order() == setup.kernel.order()
            && self.pilot.order() == setup.pilot.order()
            && self.variant == setup.variant
            && self.l == setup.l
            && self.lp == setup.lp
            && self.x == x
            && self.n == n
            && self.b == b
    }
}
