//! Mixture-tracking diffusion coefficients.
//!
//! Lognormal mode: dS = r(t) S dt + sigma_mix(t, S) S dW with
//!   sigma_mix^2(t, y) = sum_i Lambda_i(t, y) nu_i(t)^2.
//!
//! Normal mode: dY = f(t, Y) dt + sigma_f(t, Y) dW with
//!   f = sum_i Lambda_i mu_i(t),  sigma_f^2 = sum_i Lambda_i sigma_i(t)^2,
//! and the exp transform S = exp(Y) follows by Ito.
//!
//! `general_coefficient_oracle` evaluates the defining double-quadrature
//! identity for the squared diffusion coefficient of a density-tracking SDE,
//!
//!   sigma_f(y)^2 = 2 / (sum_i lambda_i p_i(y))
//!       * [ int_b^y int_b^x sum_i lambda_i dp_i/dt(u) du dx
//!         + int_b^y f(x) sum_i lambda_i p_i(x) dx ],
//!
//! with analytic dp/dt kernels, and serves as the independent cross-check of
//! both closed forms above.

use crate::error::{ModelError, Result};
use crate::market_model::{
    component_density_time_derivs, lambda_weights, mixture_density, MixtureSpec, Support,
    YieldCurve,
};
use crate::math::quad;

/// Which mixture family the model tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    LognormalMixture,
    NormalMixture,
}

/// A mixture spec bound to a discount curve and a mode.
#[derive(Debug, Clone)]
pub struct LocalVolModel {
    pub spec: MixtureSpec,
    pub curve: YieldCurve,
    pub mode: Mode,
}

impl LocalVolModel {
    pub fn new(spec: MixtureSpec, curve: YieldCurve, mode: Mode) -> Result<Self> {
        match mode {
            Mode::LognormalMixture => {
                if spec.support() != Support::PositiveHalfLine {
                    return Err(ModelError::InvalidInput(
                        "lognormal mode requires a positive-half-line mixture".into(),
                    ));
                }
            }
            Mode::NormalMixture => {
                if spec.support() != Support::WholeLine {
                    return Err(ModelError::InvalidInput(
                        "normal mode requires a whole-line mixture".into(),
                    ));
                }
            }
        }
        Ok(Self { spec, curve, mode })
    }

    pub fn lognormal(spec: MixtureSpec, curve: YieldCurve) -> Result<Self> {
        Self::new(spec, curve, Mode::LognormalMixture)
    }

    pub fn normal(spec: MixtureSpec, curve: YieldCurve) -> Result<Self> {
        Self::new(spec, curve, Mode::NormalMixture)
    }
}

/// sigma_mix^2(t, y) = sum_i Lambda_i(t, y) nu_i(t)^2; equals nu_bar^2 on
/// [0, epsilon]. Lognormal mode only.
pub fn sigma_mix_squared(model: &LocalVolModel, t: f64, y: f64) -> Result<f64> {
    if model.mode != Mode::LognormalMixture {
        return Err(ModelError::UnsupportedMode("sigma_mix is a lognormal-mode quantity".into()));
    }
    if y <= 0.0 {
        return Err(ModelError::Domain(format!("sigma_mix needs y > 0, got {y}")));
    }
    let w = lambda_weights(&model.spec, &model.curve, t, y)?;
    let nus = model.spec.vol_levels(t);
    Ok(w.iter().zip(&nus).map(|(wi, nu)| wi * nu * nu).sum())
}

/// d(sigma_mix^2)/dy, analytic. With log densities l_i(y) of the components,
/// dLambda_i/dy = Lambda_i (l_i' - sum_j Lambda_j l_j') and
/// l_i'(y) = -(ln y - m_i)/(V_i^2 y) (the lognormal Jacobian term is common
/// to all components and cancels in Lambda).
pub fn dsigma_mix2_dy(model: &LocalVolModel, t: f64, y: f64) -> Result<f64> {
    if model.mode != Mode::LognormalMixture {
        return Err(ModelError::UnsupportedMode("sigma_mix is a lognormal-mode quantity".into()));
    }
    if y <= 0.0 {
        return Err(ModelError::Domain(format!("sigma_mix needs y > 0, got {y}")));
    }
    if t <= model.spec.epsilon() {
        return Ok(0.0);
    }
    let w = lambda_weights(&model.spec, &model.curve, t, y)?;
    let params = model.spec.component_params(&model.curve, t)?;
    let nus = model.spec.vol_levels(t);
    let ly = y.ln();
    let lprime: Vec<f64> = params.iter().map(|&(m, v2)| -(ly - m) / (v2 * y)).collect();
    let avg_lp: f64 = w.iter().zip(&lprime).map(|(wi, lp)| wi * lp).sum();
    let mut out = 0.0;
    for i in 0..w.len() {
        out += w[i] * (lprime[i] - avg_lp) * nus[i] * nus[i];
    }
    Ok(out)
}

/// Normal-mode drift and squared diffusion (f, sigma_f^2) at (t, y).
pub fn normal_mixture_coefficients(model: &LocalVolModel, t: f64, y: f64) -> Result<(f64, f64)> {
    if model.mode != Mode::NormalMixture {
        return Err(ModelError::UnsupportedMode(
            "normal_mixture_coefficients requires normal mode".into(),
        ));
    }
    let w = lambda_weights(&model.spec, &model.curve, t, y)?;
    let (mut drift, mut diff2) = (0.0, 0.0);
    match model.spec.components() {
        crate::market_model::ComponentSet::Normal(cs) => {
            for (wi, c) in w.iter().zip(cs) {
                let s = c.vol.level(t);
                drift += wi * c.drift.value(t);
                diff2 += wi * s * s;
            }
        }
        _ => unreachable!("normal mode validated at construction"),
    }
    Ok((drift, diff2))
}

/// Ito transform of the normal-mode SDE to S = exp(Y): returns
/// (drift, diffusion) of dS = S (f + sigma_f^2 / 2) dt + S sigma_f dW,
/// both in level units.
pub fn exp_transform_coefficients(model: &LocalVolModel, t: f64, s: f64) -> Result<(f64, f64)> {
    if s <= 0.0 {
        return Err(ModelError::Domain(format!("exp transform needs s > 0, got {s}")));
    }
    let (f, a2) = normal_mixture_coefficients(model, t, s.ln())?;
    Ok((s * (f + 0.5 * a2), s * a2.sqrt()))
}

/// Default truncation of an unbounded lower support limit: the smallest
/// component 8-sigma left quantile (in the density coordinate).
fn default_lower_bound(spec: &MixtureSpec, curve: &YieldCurve, t: f64) -> Result<f64> {
    let params = spec.component_params(curve, t)?;
    let g_lo = params
        .iter()
        .map(|&(m, v2)| m - 8.0 * v2.sqrt())
        .fold(f64::INFINITY, f64::min);
    Ok(match spec.support() {
        Support::PositiveHalfLine => g_lo.exp(),
        Support::WholeLine => g_lo,
    })
}

/// Squared diffusion coefficient at (t, y) straight from the density-matching
/// identity, by nested adaptive quadrature (inner tolerance 1e-10, outer
/// 1e-8, both scaled by the local density magnitude). `f` is the drift
/// function of the candidate SDE; `lower` overrides the truncated support
/// lower bound b.
pub fn general_coefficient_oracle<F: Fn(f64) -> f64>(
    spec: &MixtureSpec,
    curve: &YieldCurve,
    f: F,
    t: f64,
    y: f64,
    lower: Option<f64>,
) -> Result<f64> {
    let b = match lower {
        Some(b) => b,
        None => default_lower_bound(spec, curve, t)?,
    };
    if y <= b {
        return Err(ModelError::Domain(format!("oracle needs y > lower bound, got y = {y}, b = {b}")));
    }
    let dens_y = mixture_density(spec, curve, t, y)?;
    if dens_y <= 0.0 {
        return Err(ModelError::Numerical("density underflow at evaluation point".into()));
    }
    // Tolerances scale with the natural size of each integrand so the oracle
    // works at both near-mode and tail points.
    let scale = dens_y.max(1e-12);
    let dpdt_sum = |u: f64| -> f64 {
        let dd = component_density_time_derivs(spec, curve, t, u).expect("validated domain");
        spec.weights().iter().zip(&dd).map(|(w, d)| w * d).sum()
    };
    let inner = |x: f64| -> f64 {
        let (v, _) = quad::integrate(&dpdt_sum, b, x, 1e-10 * scale.max(1.0))
            .expect("inner quadrature converges for smooth kernels");
        v
    };
    let outer_integrand = |x: f64| -> f64 {
        let p = mixture_density(spec, curve, t, x).expect("validated domain");
        inner(x) + f(x) * p
    };
    let (outer, _) = quad::integrate(&outer_integrand, b, y, 1e-8 * scale.max(1.0))?;
    Ok(2.0 * outer / dens_y)
}
