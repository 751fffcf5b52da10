//! Gaussian-mixture target densities.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::numerics::{gaussian_derivative, integrate, integrate_pieces, QuadratureSpec, RngStream, TAIL_SDS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDensity {
    components: Vec<Component>,
}

impl MixtureDensity {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Mixture("no components".into()));
        }
        if components.iter().any(|c| !(c.weight > 0.0) || !(c.sd > 0.0) || !c.mean.is_finite()) {
            return Err(Error::Mixture("weights and sds must be positive, means finite".into()));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Mixture(format!("weights sum to {total}")));
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.deriv(x, 0)
    }

    pub fn deriv(&self, x: f64, k: usize) -> f64 {
        self.components.iter().map(|c| c.weight * gaussian_derivative(k, x - c.mean, c.sd)).sum()
    }

    /// Union of `mean ± 8·sd` over components.
    pub fn support(&self) -> (f64, f64) {
        self.padded_support(TAIL_SDS)
    }

    pub fn padded_support(&self, sds: f64) -> (f64, f64) {
        let lo = self.components.iter().map(|c| c.mean - sds * c.sd).fold(f64::INFINITY, f64::min);
        let hi = self.components.iter().map(|c| c.mean + sds * c.sd).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// Support endpoints plus every component mean, used as quadrature breaks.
    pub fn breakpoints(&self, sds: f64) -> Vec<f64> {
        let (lo, hi) = self.padded_support(sds);
        let mut pts = vec![lo, hi];
        pts.extend(self.components.iter().map(|c| c.mean));
        pts
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }
}

pub fn marron_wand(id: u32) -> Result<MixtureDensity> {
    let comps = match id {
        1 => vec![Component { weight: 1.0, mean: 0.0, sd: 1.0 }],
        2 => vec![
            Component { weight: 0.2, mean: 0.0, sd: 1.0 },
            Component { weight: 0.2, mean: 0.5, sd: 2.0 / 3.0 },
            Component { weight: 0.6, mean: 13.0 / 12.0, sd: 5.0 / 9.0 },
        ],
        other => return Err(Error::UnknownModel(other)),
    };
    MixtureDensity::new(comps)
}

pub fn pdf_deriv(model: &MixtureDensity, x: f64, k: usize) -> f64 {
    model.deriv(x, k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityFunctionals {
    /// ∫ f^{(L)}(x)² dx
    pub i_l: f64,
    /// ∫ f(x)² dx
    pub int_f_sq: f64,
    /// ∫ f^{(L)} f^{(L+Lp)} dx
    pub cross_l_lp: f64,
    /// E f^{(2L)}(X) = ∫ f^{(2L)} f dx
    pub e_f2l: f64,
    /// E f^{(2L+Lp)}(X)
    pub e_f2l_lp: f64,
}

const FUNCTIONAL_PAD_SDS: f64 = TAIL_SDS + 2.0;

pub fn density_functionals(model: &MixtureDensity, l: usize, lp: usize, quad: &QuadratureSpec) -> Result<DensityFunctionals> {
    let breaks = model.breakpoints(FUNCTIONAL_PAD_SDS);
    let int = |g: &dyn Fn(f64) -> f64| integrate_pieces(g, &breaks, quad);
    Ok(DensityFunctionals {
        i_l: int(&|x| model.deriv(x, l).powi(2))?,
        int_f_sq: int(&|x| model.pdf(x).powi(2))?,
        cross_l_lp: int(&|x| model.deriv(x, l) * model.deriv(x, l + lp))?,
        e_f2l: int(&|x| model.deriv(x, 2 * l) * model.pdf(x))?,
        e_f2l_lp: int(&|x| model.deriv(x, 2 * l + lp) * model.pdf(x))?,
    })
}

/// E f̂_h(x) = ∫ K(u) f(x + uh) du.
pub fn smoothed_mean(model: &MixtureDensity, kernel: &KernelSpec, h: f64, x: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Input(format!("bandwidth must be positive, got {h}")));
    }
    let a = kernel.effective_support();
    Ok(integrate(|u| kernel.evaluate(u) * model.pdf(x + u * h), -a, a, &QuadratureSpec::one_d())?)
}

/// Closed form of [`smoothed_mean`] for the Gaussian kernel: each component
/// variance is inflated by h².
pub fn smoothed_mean_gaussian(model: &MixtureDensity, h: f64, x: f64) -> f64 {
    model
        .components()
        .iter()
        .map(|c| c.weight * gaussian_derivative(0, x - c.mean, c.sd.hypot(h)))
        .sum()
}

pub fn sample(model: &MixtureDensity, n: usize, stream: RngStream) -> Vec<f64> {
    let mut rng = stream.generator();
    let comps = model.components();
    (0..n)
        .map(|_| {
            let c = if comps.len() == 1 {
                &comps[0]
            } else {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = &comps[comps.len() - 1];
                for c in comps {
                    acc += c.weight;
                    if u < acc {
                        pick = c;
                        break;
                    }
                }
                pick
            };
            let z: f64 = StandardNormal.sample(&mut rng);
            c.mean + c.sd * z
        })
        .collect()
}
