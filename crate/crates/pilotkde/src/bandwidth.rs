//! Optimal, pilot and plug-in bandwidths.

use std::fmt;
use std::str::FromStr;

use crate::density::{DensityFunctionals, MixtureDensity};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::kernel::{KernelConstants, KernelSpec, PilotFunctionals};
use crate::numerics::{integrate, integrate2d, pairwise_sum, QuadratureSpec};

/// Estimator of the curvature functional ∫ f^{(L)}².
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum IlVariant {
    #[default]
    Ustat,
    Convo,
    Squared,
}

impl IlVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            IlVariant::Ustat => "ustat",
            IlVariant::Convo => "convo",
            IlVariant::Squared => "squared",
        }
    }
}

impl fmt::Display for IlVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IlVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ustat" => Ok(IlVariant::Ustat),
            "convo" => Ok(IlVariant::Convo),
            "squared" => Ok(IlVariant::Squared),
            other => Err(Error::Input(format!("unknown variant '{other}'"))),
        }
    }
}

/// h₀ = (R(K) / (2L C_L² I_L))^{1/(2L+1)} n^{−1/(2L+1)}.
pub fn optimal_bandwidth(constants: &KernelConstants, l: usize, i_l: f64, n: usize) -> Result<f64> {
    if !(i_l > 0.0) {
        return Err(Error::NonPositiveFunctional(i_l));
    }
    if n == 0 {
        return Err(Error::Input("sample size must be positive".into()));
    }
    let p = 1.0 / (2 * l + 1) as f64;
    let c = constants.r_k / (2.0 * l as f64 * constants.c_l.powi(2) * i_l);
    Ok(c.powf(p) * (n as f64).powf(-p))
}

/// MSE-optimal pilot bandwidth. The convo formula also serves the squared
/// variant, whose off-diagonal part is the convo statistic.
pub fn pilot_bandwidth(
    density: &DensityFunctionals,
    pilot: &PilotFunctionals,
    l: usize,
    lp: usize,
    n: usize,
    variant: IlVariant,
) -> Result<f64> {
    if density.cross_l_lp == 0.0 || !density.cross_l_lp.is_finite() {
        return Err(Error::NonPositiveFunctional(density.cross_l_lp));
    }
    let (spread, moment) = match variant {
        IlVariant::Ustat => (pilot.int_h2l_conv_h_sq, pilot.int_ulp_h),
        IlVariant::Convo | IlVariant::Squared => (pilot.int_h2l_sq, pilot.int_ulp_hconvh),
    };
    let lp_fact: f64 = (1..=lp).map(|k| k as f64).product();
    let num = (4 * l + 1) as f64 * density.int_f_sq.powi(2) * spread;
    let den = lp as f64 / lp_fact.powi(2) * moment.powi(2) * density.cross_l_lp.powi(2);
    let e = (4 * l + 2 * lp + 1) as f64;
    Ok((num / den).powf(1.0 / e) * (n as f64).powf(-2.0 / e))
}

/// The pair kernel of the chosen estimator: `H^{(2L)}` or `(H*H)^{(2L)}`.
pub fn pair_kernel(pilot: &KernelSpec, variant: IlVariant) -> KernelSpec {
    match variant {
        IlVariant::Ustat => pilot.clone(),
        IlVariant::Convo | IlVariant::Squared => pilot.convolve(pilot),
    }
}

/// Estimate of ∫ f^{(L)}² from a sample.
pub fn estimate_il(data: &[f64], pilot: &KernelSpec, l: usize, b: f64, variant: IlVariant, exec: Execution) -> Result<f64> {
    let n = data.len();
    if n < 2 {
        return Err(Error::Input("at least two observations are required".into()));
    }
    if !(b > 0.0) {
        return Err(Error::Input(format!("pilot bandwidth must be positive, got {b}")));
    }
    let kern = pair_kernel(pilot, variant).even_derivative(2 * l);
    let inv_b = 1.0 / b;
    let rows = map_indexed(exec, n - 1, |i| {
        let xi = data[i];
        let mut s = 0.0;
        for &xj in &data[i + 1..] {
            s += kern.eval((xi - xj) * inv_b);
        }
        s
    });
    let upper = pairwise_sum(&rows);
    let nf = n as f64;
    let scale = b.powi(-(2 * l as i32 + 1));
    Ok(match variant {
        IlVariant::Ustat | IlVariant::Convo => 2.0 * upper / (nf * (nf - 1.0)) * scale,
        IlVariant::Squared => (2.0 * upper / (nf * nf) + kern.eval(0.0) / nf) * scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PluginBandwidth {
    pub il_hat: f64,
    pub h_hat: f64,
    pub b: f64,
    pub variant: IlVariant,
}

/// ĥ with |Î_L| in place of I_L.
pub fn plugin_bandwidth(
    data: &[f64],
    constants: &KernelConstants,
    pilot: &KernelSpec,
    l: usize,
    b: f64,
    variant: IlVariant,
    exec: Execution,
) -> Result<PluginBandwidth> {
    let il_hat = estimate_il(data, pilot, l, b, variant, exec)?;
    let h_hat = bandwidth_from_functional(constants, l, il_hat, data.len())?;
    Ok(PluginBandwidth { il_hat, h_hat, b, variant })
}

/// The plug-in map Î ↦ ĥ, including the absolute-value safeguard.
pub fn bandwidth_from_functional(constants: &KernelConstants, l: usize, il_hat: f64, n: usize) -> Result<f64> {
    if il_hat == 0.0 {
        return Err(Error::DegenerateSample("estimated curvature functional is exactly zero"));
    }
    optimal_bandwidth(constants, l, il_hat.abs(), n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandwidthReport {
    pub h0: f64,
    pub b0: f64,
    pub il_true: f64,
    pub il_hat: f64,
    pub h_hat: f64,
    pub variant: IlVariant,
    pub linear_term: f64,
    pub quadratic_term: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linearization {
    /// (ĥ − h₀)/h₀
    pub exact_dev: f64,
    /// −(C_PI/n) Σ V_i
    pub projection_dev: f64,
    /// −(C_PI/2) binom(n,2)⁻¹ Σ_{i<j} W_ij
    pub quadratic_dev: f64,
}

/// Model-side pieces of the Hoeffding split of the ustat estimator, computed
/// once per (model, b) and reused across samples.
#[derive(Debug, Clone)]
pub struct LinearizationModel {
    model: MixtureDensity,
    density: DensityFunctionals,
    pilot: KernelSpec,
    constants: KernelConstants,
    l: usize,
    lp: usize,
    b: f64,
    c_pi: f64,
    bias_weight: f64,
    mean_pair: f64,
}

impl LinearizationModel {
    pub fn new(
        model: &MixtureDensity,
        density: &DensityFunctionals,
        constants: &KernelConstants,
        pilot: &KernelSpec,
        l: usize,
        lp: usize,
        b: f64,
    ) -> Result<Self> {
        let lp_fact: f64 = (1..=lp).map(|k| k as f64).product();
        let a = pilot.effective_support();
        let (lo, hi) = model.padded_support(crate::numerics::TAIL_SDS + 2.0);
        // E Î_Lij = ∬ H(u) f^{(2L)}(y + ub) f(y) dy du
        let mean_pair = integrate2d(
            |u, y| pilot.evaluate(u) * model.deriv(y + u * b, 2 * l) * model.pdf(y),
            (-a, a),
            (lo, hi),
            &QuadratureSpec::two_d(),
        )?;
        Ok(Self {
            model: model.clone(),
            density: *density,
            pilot: pilot.clone(),
            constants: constants.clone(),
            l,
            lp,
            b,
            c_pi: 2.0 / ((2 * l + 1) as f64 * density.i_l),
            bias_weight: pilot.moment(lp as u32) / lp_fact,
            mean_pair,
        })
    }

    pub fn c_pi(&self) -> f64 {
        self.c_pi
    }

    /// E Î_Lij.
    pub fn mean_pair(&self) -> f64 {
        self.mean_pair
    }

    /// E[Î_Lij | X_i = y] = ∫ H(u) f^{(2L)}(y + ub) du.
    pub fn conditional_pair(&self, y: f64) -> Result<f64> {
        let a = self.pilot.effective_support();
        Ok(integrate(
            |u| self.pilot.evaluate(u) * self.model.deriv(y + u * self.b, 2 * self.l),
            -a,
            a,
            &QuadratureSpec::one_d(),
        )?)
    }

    pub fn projection_weight(&self, y: f64) -> f64 {
        let l = self.l;
        (self.model.deriv(y, 2 * l) - self.density.e_f2l)
            + self.bias_weight * self.b.powi(self.lp as i32) * (self.model.deriv(y, 2 * l + self.lp) - self.density.e_f2l_lp)
    }

    pub fn diagnose(&self, data: &[f64], exec: Execution) -> Result<(Linearization, BandwidthReport)> {
        let n = data.len();
        let plug = plugin_bandwidth(data, &self.constants, &self.pilot, self.l, self.b, IlVariant::Ustat, exec)?;
        let h0 = optimal_bandwidth(&self.constants, self.l, self.density.i_l, n)?;
        let v: Vec<f64> = data.iter().map(|&y| self.projection_weight(y)).collect();
        let cond = map_indexed(exec, n, |i| self.conditional_pair(data[i]));
        let cond = cond.into_iter().collect::<Result<Vec<f64>>>()?;
        let nf = n as f64;
        let mean_w = plug.il_hat - 2.0 / nf * pairwise_sum(&cond) + self.mean_pair;
        let lin = Linearization {
            exact_dev: (plug.h_hat - h0) / h0,
            projection_dev: -self.c_pi * pairwise_sum(&v) / nf,
            quadratic_dev: -0.5 * self.c_pi * mean_w,
        };
        let report = BandwidthReport {
            h0,
            b0: self.b,
            il_true: self.density.i_l,
            il_hat: plug.il_hat,
            h_hat: plug.h_hat,
            variant: IlVariant::Ustat,
            linear_term: lin.projection_dev,
            quadratic_term: lin.quadratic_dev,
        };
        Ok((lin, report))
    }
}

/// One-shot version of [`LinearizationModel::diagnose`].
#[allow(clippy::too_many_arguments)]
pub fn linearization_diagnostic(
    data: &[f64],
    model: &MixtureDensity,
    density: &DensityFunctionals,
    constants: &KernelConstants,
    pilot: &KernelSpec,
    l: usize,
    lp: usize,
    b: f64,
) -> Result<Linearization> {
    let lm = LinearizationModel::new(model, density, constants, pilot, l, lp, b)?;
    Ok(lm.diagnose(data, Execution::default())?.0)
}
