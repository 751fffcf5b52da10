//! The estimator, its variance estimate and the standardised statistics.

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::numerics::pairwise_sum;

/// Population quantities a statistic is centred and scaled by.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatContext {
    pub x: f64,
    /// E f̂_{h₀}(x)
    pub center: f64,
    /// μ₂₀ at h₀
    pub mu20: f64,
    pub h0: f64,
}

impl StatContext {
    pub fn new(x: f64, center: f64, mu20: f64, h0: f64) -> Result<Self> {
        if !(mu20 > 0.0) || !(h0 > 0.0) {
            return Err(Error::Input(format!("mu20 and h0 must be positive, got {mu20}, {h0}")));
        }
        Ok(Self { x, center, mu20, h0 })
    }
}

fn check_bandwidth(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!("bandwidth must be positive, got {h}")))
    }
}

/// f̂_h(x) = (nh)⁻¹ Σ K((X_i − x)/h).
pub fn kde(data: &[f64], kernel: &KernelSpec, h: f64, x: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("empty sample".into()));
    }
    check_bandwidth(h)?;
    let terms: Vec<f64> = data.iter().map(|&xi| kernel.evaluate((xi - x) / h)).collect();
    Ok(pairwise_sum(&terms) / (data.len() as f64 * h))
}

/// μ̂₂₀(h) = h⁻¹{n⁻¹ΣK² − (n⁻¹ΣK)²}, computed from centred terms so it never
/// goes negative.
pub fn variance_estimate(data: &[f64], kernel: &KernelSpec, h: f64, x: f64) -> Result<f64> {
    if data.len() < 2 {
        return Err(Error::Input("at least two observations are required".into()));
    }
    check_bandwidth(h)?;
    let n = data.len() as f64;
    let k: Vec<f64> = data.iter().map(|&xi| kernel.evaluate((xi - x) / h)).collect();
    let mean = pairwise_sum(&k) / n;
    let sq: Vec<f64> = k.iter().map(|v| (v - mean).powi(2)).collect();
    Ok(pairwise_sum(&sq) / n / h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaFunctionals {
    pub gamma1: f64,
    pub gamma2: f64,
}

/// Γ₁ = (nh)⁻¹Σ{K′u + K} and Γ₂ = (nh)⁻¹Σ{2K + 4K′u + K″u²}, with u = (X_i − x)/h.
pub fn gamma_functionals(data: &[f64], kernel: &KernelSpec, h: f64, x: f64) -> Result<GammaFunctionals> {
    if data.is_empty() {
        return Err(Error::Input("empty sample".into()));
    }
    check_bandwidth(h)?;
    let mut he = Vec::new();
    let mut g1 = Vec::with_capacity(data.len());
    let mut g2 = Vec::with_capacity(data.len());
    for &xi in data {
        let u = (xi - x) / h;
        let k0 = kernel.derivative_with(0, u, &mut he);
        let k1 = kernel.derivative_with(1, u, &mut he);
        let k2 = kernel.derivative_with(2, u, &mut he);
        g1.push(k1 * u + k0);
        g2.push(2.0 * k0 + 4.0 * k1 * u + k2 * u * u);
    }
    let nh = data.len() as f64 * h;
    Ok(GammaFunctionals { gamma1: pairwise_sum(&g1) / nh, gamma2: pairwise_sum(&g2) / nh })
}

/// √(n h) (f̂_h(x) − center) / √μ₂₀.
pub fn standardized_stat(data: &[f64], kernel: &KernelSpec, h_used: f64, ctx: &StatContext) -> Result<f64> {
    let f_hat = kde(data, kernel, h_used, ctx.x)?;
    Ok((data.len() as f64 * h_used).sqrt() * (f_hat - ctx.center) / ctx.mu20.sqrt())
}

/// Studentised statistic, with μ̂₂₀ taken at the same bandwidth.
pub fn studentized_stat(data: &[f64], kernel: &KernelSpec, h_used: f64, x: f64, center: f64) -> Result<f64> {
    let var = variance_estimate(data, kernel, h_used, x)?;
    if !(var > 0.0) {
        return Err(Error::DegenerateSample("zero variance estimate"));
    }
    let f_hat = kde(data, kernel, h_used, x)?;
    Ok((data.len() as f64 * h_used).sqrt() * (f_hat - center) / var.sqrt())
}
