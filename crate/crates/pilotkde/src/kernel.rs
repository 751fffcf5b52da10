//! Gaussian-based kernels of arbitrary even order, their derivatives,
//! moments and the pilot-kernel convolution functionals.

use crate::error::{Error, Result};
use crate::numerics::{hermite_all, integrate, normal_pdf, QuadratureSpec, TAIL_SDS};

/// A kernel written as `Σ_j coeffs[j] · φ_s^{(2j)}(u)` where `φ_s` is the
/// N(0, s²) density. Every kernel in this family is even and smooth, and its
/// derivatives are exact Hermite expressions.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    order: usize,
    scale: f64,
    coeffs: Vec<f64>,
    label: String,
}

impl KernelSpec {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn effective_support(&self) -> f64 {
        TAIL_SDS * self.scale
    }

    pub fn evaluate(&self, u: f64) -> f64 {
        self.derivative(0, u)
    }

    pub fn derivative(&self, k: usize, u: f64) -> f64 {
        let mut he = Vec::with_capacity(2 * self.coeffs.len() + k);
        self.derivative_with(k, u, &mut he)
    }

    /// Same as [`derivative`](Self::derivative) with a caller-owned scratch
    /// buffer, for hot loops.
    pub fn derivative_with(&self, k: usize, u: f64, he: &mut Vec<f64>) -> f64 {
        let s = self.scale;
        let t = u / s;
        let top = 2 * (self.coeffs.len() - 1) + k;
        hermite_all(top, t, he);
        let mut acc = 0.0;
        let mut inv_pow = s.powi(-(k as i32) - 1);
        let inv_s2 = 1.0 / (s * s);
        for (j, c) in self.coeffs.iter().enumerate() {
            acc += c * he[2 * j + k] * inv_pow;
            inv_pow *= inv_s2;
        }
        let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
        sign * acc * normal_pdf(t)
    }

    /// Exact convolution `self * other`, itself a member of the family.
    pub fn convolve(&self, other: &KernelSpec) -> KernelSpec {
        let mut coeffs = vec![0.0; self.coeffs.len() + other.coeffs.len() - 1];
        for (i, a) in self.coeffs.iter().enumerate() {
            for (j, b) in other.coeffs.iter().enumerate() {
                coeffs[i + j] += a * b;
            }
        }
        KernelSpec {
            order: self.order.min(other.order),
            scale: self.scale.hypot(other.scale),
            coeffs,
            label: format!("{}*{}", self.label, other.label),
        }
    }

    /// ∫ u^s K(u) du.
    pub fn moment(&self, s: u32) -> f64 {
        kernel_moment(self, s, 1)
    }

    /// The even-order derivative `K^{(k)}` as a polynomial in `(u/s)²` times
    /// `exp(−u²/2s²)`, for fast evaluation in pair sums.
    pub fn even_derivative(&self, k: usize) -> EvenDerivative {
        assert!(k.is_multiple_of(2), "odd derivatives of an even kernel are not even");
        let top = 2 * (self.coeffs.len() - 1) + k;
        // He_m coefficients in t, ascending
        let mut he: Vec<Vec<f64>> = vec![vec![1.0], vec![0.0, 1.0]];
        for m in 2..=top.max(1) {
            let mut next = vec![0.0; m + 1];
            for (i, c) in he[m - 1].iter().enumerate() {
                next[i + 1] += c;
            }
            for (i, c) in he[m - 2].iter().enumerate() {
                next[i] -= (m - 1) as f64 * c;
            }
            he.push(next);
        }
        let mut poly_t = vec![0.0; top + 1];
        let s = self.scale;
        for (j, c) in self.coeffs.iter().enumerate() {
            let m = 2 * j + k;
            let w = c / s.powi(m as i32 + 1) * crate::numerics::INV_SQRT_2PI;
            for (i, h) in he[m].iter().enumerate() {
                poly_t[i] += w * h;
            }
        }
        let coeffs_t2 = poly_t.iter().step_by(2).copied().collect();
        EvenDerivative { coeffs_t2, inv_scale: 1.0 / s, cutoff: TAIL_SDS * s }
    }
}

/// Fast evaluator for an even kernel derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct EvenDerivative {
    coeffs_t2: Vec<f64>,
    inv_scale: f64,
    cutoff: f64,
}

impl EvenDerivative {
    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        let t = u * self.inv_scale;
        let t2 = t * t;
        let mut acc = 0.0;
        for c in self.coeffs_t2.iter().rev() {
            acc = acc * t2 + c;
        }
        acc * (-0.5 * t2).exp()
    }

    /// Half-width beyond which the value is below double precision noise
    /// relative to the peak.
    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }
}

pub fn gaussian_kernel() -> KernelSpec {
    KernelSpec { order: 2, scale: 1.0, coeffs: vec![1.0], label: "gauss".into() }
}

fn double_factorial_odd(m: i64) -> f64 {
    // m!! for odd m, with (-1)!! = 1
    let mut acc = 1.0;
    let mut k = m;
    while k > 1 {
        acc *= k as f64;
        k -= 2;
    }
    acc
}

/// ∫ u^{2j} φ^{(2k)}(u) du, zero when k > j.
fn hermite_moment(j: usize, k: usize) -> f64 {
    if k > j {
        return 0.0;
    }
    let mut falling = 1.0;
    for m in (2 * j - 2 * k + 1)..=(2 * j) {
        falling *= m as f64;
    }
    falling * double_factorial_odd(2 * (j - k) as i64 - 1)
}

/// Gaussian-times-even-polynomial kernel whose moments vanish through
/// `order − 1`. Coefficients come from the lower-triangular moment system.
pub fn hermite_order_kernel(order: usize) -> Result<KernelSpec> {
    if order < 2 || order % 2 == 1 {
        return Err(Error::KernelOrder(order));
    }
    let terms = order / 2;
    let mut coeffs = vec![0.0; terms];
    for j in 0..terms {
        let rhs = if j == 0 { 1.0 } else { 0.0 };
        let partial: f64 = (0..j).map(|k| coeffs[k] * hermite_moment(j, k)).sum();
        coeffs[j] = (rhs - partial) / hermite_moment(j, j);
    }
    let label = if order == 2 { "gauss".to_string() } else { format!("hermite{order}") };
    Ok(KernelSpec { order, scale: 1.0, coeffs, label })
}

/// Half-width past which u^power times the kernel is negligible. The
/// polynomial factors of higher-order kernels push the tail outward.
fn moment_reach(spec: &KernelSpec, power: u32) -> f64 {
    let degree = power as f64 + 2.0 * (spec.coeffs.len() - 1) as f64;
    spec.scale * (TAIL_SDS + 0.5 * degree)
}

/// κ_st = ∫ u^s K(u)^t du.
pub fn kernel_moment(spec: &KernelSpec, s: u32, t: u32) -> f64 {
    let a = moment_reach(spec, s);
    let q = QuadratureSpec::one_d();
    integrate(|u| u.powi(s as i32) * spec.evaluate(u).powi(t as i32), -a, a, &q)
        .unwrap_or_else(|e| e.best_estimate().unwrap_or(f64::NAN))
}

/// τ_l = ∫ u^l {K(u)K'(u)u + K(u)²} du.
pub fn kernel_tau(spec: &KernelSpec, l: u32) -> f64 {
    let a = moment_reach(spec, l + 2);
    let q = QuadratureSpec::one_d();
    integrate(
        |u| {
            let k = spec.evaluate(u);
            u.powi(l as i32) * (k * spec.derivative(1, u) * u + k * k)
        },
        -a,
        a,
        &q,
    )
    .unwrap_or_else(|e| e.best_estimate().unwrap_or(f64::NAN))
}

const KAPPA_MAX_POWER: u32 = 4;

#[derive(Debug, Clone)]
pub struct KernelConstants {
    pub order: usize,
    /// (1/L!) ∫ u^L K.
    pub c_l: f64,
    /// ∫ K².
    pub r_k: f64,
    kernel: KernelSpec,
    kappa_table: Vec<[f64; KAPPA_MAX_POWER as usize]>,
    tau_table: Vec<f64>,
}

impl KernelConstants {
    pub fn kappa(&self, s: u32, t: u32) -> f64 {
        match self.kappa_table.get(s as usize) {
            Some(row) if (1..=KAPPA_MAX_POWER).contains(&t) => row[t as usize - 1],
            _ => kernel_moment(&self.kernel, s, t),
        }
    }

    pub fn tau(&self, l: u32) -> f64 {
        match self.tau_table.get(l as usize) {
            Some(v) => *v,
            None => kernel_tau(&self.kernel, l),
        }
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }
}

pub fn kernel_constants(spec: &KernelSpec) -> KernelConstants {
    let order = spec.order();
    let max_s = 2 * order as u32 + 2;
    let kappa_table = (0..=max_s)
        .map(|s| {
            let mut row = [0.0; KAPPA_MAX_POWER as usize];
            for t in 1..=KAPPA_MAX_POWER {
                row[t as usize - 1] = kernel_moment(spec, s, t);
            }
            row
        })
        .collect::<Vec<_>>();
    let tau_table = (0..=2 * order as u32).map(|l| kernel_tau(spec, l)).collect();
    let factorial: f64 = (1..=order).map(|k| k as f64).product();
    KernelConstants {
        order,
        c_l: kappa_table[order][0] / factorial,
        r_k: kappa_table[0][1],
        kernel: spec.clone(),
        kappa_table,
        tau_table,
    }
}

/// Integral functionals of the pilot kernel entering the pilot bandwidths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PilotFunctionals {
    /// ∫ (H^{(2L)} * H)(u)² du
    pub int_h2l_conv_h_sq: f64,
    /// ∫ H^{(2L)}(u)² du
    pub int_h2l_sq: f64,
    /// ∫ u^{Lp} (H * H)(u) du
    pub int_ulp_hconvh: f64,
    /// ∫ u^{Lp} H(u) du
    pub int_ulp_h: f64,
}

pub fn pilot_convolution_functionals(pilot: &KernelSpec, l: usize, lp: usize) -> Result<PilotFunctionals> {
    let q = QuadratureSpec::one_d();
    let self_conv = pilot.convolve(pilot);
    let wide = self_conv.effective_support();
    let narrow = pilot.effective_support();
    // (H^{(2L)} * H) = (H * H)^{(2L)}
    let int_h2l_conv_h_sq = integrate(|u| self_conv.derivative(2 * l, u).powi(2), -wide, wide, &q)?;
    let int_h2l_sq = integrate(|u| pilot.derivative(2 * l, u).powi(2), -narrow, narrow, &q)?;
    let (far_conv, far) = (moment_reach(&self_conv, lp as u32), moment_reach(pilot, lp as u32));
    let int_ulp_hconvh = integrate(|u| u.powi(lp as i32) * self_conv.evaluate(u), -far_conv, far_conv, &q)?;
    let int_ulp_h = integrate(|u| u.powi(lp as i32) * pilot.evaluate(u), -far, far, &q)?;
    Ok(PilotFunctionals { int_h2l_conv_h_sq, int_h2l_sq, int_ulp_hconvh, int_ulp_h })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_four_coefficients() {
        let k = hermite_order_kernel(4).unwrap();
        assert_eq!(k.coefficients().len(), 2);
        assert!((k.coefficients()[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn convolution_scale() {
        let g = gaussian_kernel();
        let gg = g.convolve(&g);
        assert!((gg.scale() - 2f64.sqrt()).abs() < 1e-15);
        assert!((gg.evaluate(0.0) - 1.0 / (2.0 * std::f64::consts::PI.sqrt())).abs() < 1e-15);
    }
}
