//! Core domain types: yield curves, component volatility curves, mixture
//! specifications, and the two density-level primitives everything else is
//! built on: the mixture density and the state-dependent weights
//!
//!   Lambda_i(t, y) = lambda_i p_i(t, y) / sum_j lambda_j p_j(t, y),
//!
//! evaluated in log-density space so deep tails cannot underflow.
//!
//! Two component families are supported. In lognormal mode component i is a
//! geometric Brownian motion sharing the curve's drift r(t) = r_d - r_f, so
//! its log-price at t is N(ln s0 + R(t) - V_i(t)^2/2, V_i(t)^2) with
//! V_i(t)^2 = int_0^t nu_i(s)^2 ds. In normal mode component i is an
//! arithmetic Brownian motion started at 0 with mean m_i(t) = int mu_i and
//! variance v_i(t)^2 = int sigma_i^2.
//!
//! All component vol curves of one mixture share a common level
//! nu_bar = sqrt(sum_i lambda_i nu_i^2) on the regularization interval
//! [0, epsilon], and the weights are frozen at lambda there. The switch at
//! epsilon is a jump (no transitory blending); integrated variances remain
//! exact and continuous, which is all the closed forms downstream need.

use crate::error::{ModelError, Result};
use crate::math::normal::norm_pdf;

/// Hard floor for volatility levels (the model family requires vols bounded
/// away from zero).
pub const VOL_FLOOR: f64 = 1e-8;

/// Below this time in years a density request is treated as the t = 0 point mass.
pub const MIN_DENSITY_TIME: f64 = 1e-12;

/// Which leg of the two-currency curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leg {
    Domestic,
    Foreign,
}

/// Deterministic two-currency discount curve. Interpolation is log-linear in
/// the discount factor (piecewise-constant forward rates); df(0) = 1.
#[derive(Debug, Clone)]
pub struct YieldCurve {
    /// (maturity in years, domestic df, foreign df), maturities strictly increasing.
    pillars: Vec<(f64, f64, f64)>,
}

impl YieldCurve {
    pub fn new(pillars: Vec<(f64, f64, f64)>) -> Result<Self> {
        if pillars.is_empty() {
            return Err(ModelError::InvalidInput("curve needs at least one pillar".into()));
        }
        let mut prev = 0.0;
        for &(t, dfd, dff) in &pillars {
            if t <= prev {
                return Err(ModelError::InvalidInput(format!(
                    "pillar maturities must be strictly increasing and positive, got {t}"
                )));
            }
            for df in [dfd, dff] {
                if !(df > 0.0 && df <= 1.0) {
                    return Err(ModelError::InvalidInput(format!(
                        "discount factors must lie in (0, 1], got {df}"
                    )));
                }
            }
            prev = t;
        }
        Ok(Self { pillars })
    }

    /// Flat curve (both legs df = 1 up to `horizon`): zero rates.
    pub fn zero_rates(horizon: f64) -> Self {
        Self { pillars: vec![(horizon, 1.0, 1.0)] }
    }

    pub fn last_maturity(&self) -> f64 {
        self.pillars.last().expect("validated non-empty").0
    }

    /// Discount factor by log-linear interpolation inside the pillars; the
    /// forward rate of the final interval extends flat beyond the last
    /// pillar (quotes stop at a finite maturity, contracts do not).
    pub fn df(&self, leg: Leg, t: f64) -> Result<f64> {
        if t < 0.0 {
            return Err(ModelError::Domain(format!("df needs t >= 0, got {t}")));
        }
        let pick = |p: &(f64, f64, f64)| match leg {
            Leg::Domestic => p.1,
            Leg::Foreign => p.2,
        };
        // Segment ends: (t0=0, df=1) implied before the first pillar.
        let mut lo_t = 0.0;
        let mut lo_ln = 0.0;
        for p in &self.pillars {
            let hi_t = p.0;
            let hi_ln = pick(p).ln();
            if t <= hi_t {
                let w = (t - lo_t) / (hi_t - lo_t);
                return Ok((lo_ln + w * (hi_ln - lo_ln)).exp());
            }
            lo_t = hi_t;
            lo_ln = hi_ln;
        }
        let (last_t, last_ln) = (lo_t, lo_ln);
        let (prev_t, prev_ln) = if self.pillars.len() > 1 {
            let p = &self.pillars[self.pillars.len() - 2];
            (p.0, pick(p).ln())
        } else {
            (0.0, 0.0)
        };
        let slope = (last_ln - prev_ln) / (last_t - prev_t);
        Ok((last_ln + slope * (t - last_t)).exp())
    }

    /// R(a, t) = int_a^t r(s) ds = -ln(df(t)/df(a)) for one leg.
    pub fn integrated_rate(&self, a: f64, t: f64, leg: Leg) -> Result<f64> {
        if a < 0.0 || t < a {
            return Err(ModelError::Domain(format!(
                "integrated_rate needs 0 <= a <= t, got a = {a}, t = {t}"
            )));
        }
        if t == a {
            return Ok(0.0);
        }
        Ok(-(self.df(leg, t)? / self.df(leg, a)?).ln())
    }

    /// R(a, t) = R_d(a, t) - R_f(a, t): the integrated risk-neutral drift of
    /// the exchange rate.
    pub fn drift_integral(&self, a: f64, t: f64) -> Result<f64> {
        Ok(self.integrated_rate(a, t, Leg::Domestic)? - self.integrated_rate(a, t, Leg::Foreign)?)
    }

    /// Instantaneous drift rate r(t) = r_d(t) - r_f(t); piecewise constant,
    /// right-continuous, with the final interval's rate extending beyond the
    /// last pillar.
    pub fn drift_rate(&self, t: f64) -> Result<f64> {
        if t < 0.0 {
            return Err(ModelError::Domain(format!("drift_rate: t = {t} outside curve")));
        }
        let mut lo_t = 0.0;
        let mut lo_d = 0.0;
        let mut lo_f = 0.0;
        for p in &self.pillars {
            let (hi_t, d, f) = (p.0, p.1.ln(), p.2.ln());
            if t < hi_t || (hi_t - self.last_maturity()).abs() < 1e-15 {
                let dt = hi_t - lo_t;
                return Ok((-(d - lo_d) + (f - lo_f)) / dt);
            }
            lo_t = hi_t;
            lo_d = d;
            lo_f = f;
        }
        unreachable!("t validated within curve range")
    }
}

/// Shape of a volatility curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolKind {
    Constant,
    PiecewiseConstant,
}

/// Deterministic component volatility curve: piecewise constant on
/// (epsilon, horizon], overridden by the mixture-wide common level nu_bar on
/// [0, epsilon]. The last level extends flat beyond the final segment end.
#[derive(Debug, Clone)]
pub struct VolCurve {
    /// (segment end in years, level in 1/sqrt(years)), ends strictly increasing.
    segments: Vec<(f64, f64)>,
    epsilon: f64,
    /// Common regularization level on [0, epsilon]; stamped by MixtureSpec.
    reg_level: Option<f64>,
}

impl VolCurve {
    pub fn constant(level: f64) -> Result<Self> {
        Self::piecewise(vec![(f64::INFINITY, level)])
    }

    pub fn piecewise(segments: Vec<(f64, f64)>) -> Result<Self> {
        if segments.is_empty() {
            return Err(ModelError::InvalidInput("vol curve needs at least one segment".into()));
        }
        let mut prev = 0.0;
        for &(end, level) in &segments {
            if end <= prev {
                return Err(ModelError::InvalidInput(
                    "vol segment ends must be strictly increasing and positive".into(),
                ));
            }
            if level < VOL_FLOOR {
                return Err(ModelError::InvalidInput(format!(
                    "vol level {level} below floor {VOL_FLOOR}"
                )));
            }
            prev = end;
        }
        Ok(Self { segments, epsilon: 0.0, reg_level: None })
    }

    pub fn kind(&self) -> VolKind {
        let first = self.segments[0].1;
        if self.segments.iter().all(|&(_, l)| l == first) {
            VolKind::Constant
        } else {
            VolKind::PiecewiseConstant
        }
    }

    /// Raw (end, level) segments, without the regularization override.
    pub fn segments(&self) -> &[(f64, f64)] {
        &self.segments
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub(crate) fn set_regularization(&mut self, epsilon: f64, nu_bar: f64) {
        self.epsilon = epsilon;
        self.reg_level = if epsilon > 0.0 { Some(nu_bar) } else { None };
    }

    /// Level at time t (right-continuous at segment ends, nu_bar on [0, epsilon]).
    pub fn level(&self, t: f64) -> f64 {
        if let Some(nb) = self.reg_level {
            if t <= self.epsilon {
                return nb;
            }
        }
        self.raw_level(t)
    }

    /// Level ignoring the regularization override.
    pub(crate) fn raw_level(&self, t: f64) -> f64 {
        for &(end, level) in &self.segments {
            if t < end {
                return level;
            }
        }
        self.segments.last().expect("non-empty").1
    }

    /// V(t)^2 = int_0^t level(s)^2 ds, exact for the piecewise-constant shape
    /// including the [0, epsilon] override.
    pub fn integrated_variance(&self, t: f64) -> Result<f64> {
        if t < 0.0 {
            return Err(ModelError::Domain(format!("integrated_variance needs t >= 0, got {t}")));
        }
        let mut total = 0.0;
        let mut lo = 0.0;
        if let Some(nb) = self.reg_level {
            let cap = t.min(self.epsilon);
            total += nb * nb * cap;
            if t <= self.epsilon {
                return Ok(total);
            }
            lo = self.epsilon;
        }
        for &(end, level) in &self.segments {
            if lo >= t {
                break;
            }
            let hi = end.min(t);
            if hi > lo {
                total += level * level * (hi - lo);
            }
            lo = lo.max(end);
        }
        if lo < t {
            // Flat extension of the final level.
            let level = self.segments.last().expect("non-empty").1;
            total += level * level * (t - lo);
        }
        Ok(total)
    }
}

/// Piecewise-constant deterministic drift curve mu(t) for normal-mode components.
#[derive(Debug, Clone)]
pub struct DriftCurve {
    /// (segment end in years, value in 1/years).
    segments: Vec<(f64, f64)>,
    epsilon: f64,
    reg_value: Option<f64>,
}

impl DriftCurve {
    pub fn constant(value: f64) -> Self {
        Self { segments: vec![(f64::INFINITY, value)], epsilon: 0.0, reg_value: None }
    }

    pub fn piecewise(segments: Vec<(f64, f64)>) -> Result<Self> {
        if segments.is_empty() {
            return Err(ModelError::InvalidInput("drift curve needs at least one segment".into()));
        }
        let mut prev = 0.0;
        for &(end, _) in &segments {
            if end <= prev {
                return Err(ModelError::InvalidInput(
                    "drift segment ends must be strictly increasing and positive".into(),
                ));
            }
            prev = end;
        }
        Ok(Self { segments, epsilon: 0.0, reg_value: None })
    }

    fn set_regularization(&mut self, epsilon: f64, mu_bar: f64) {
        self.epsilon = epsilon;
        self.reg_value = if epsilon > 0.0 { Some(mu_bar) } else { None };
    }

    /// Raw (end, value) segments, without the regularization override.
    pub fn segments(&self) -> &[(f64, f64)] {
        &self.segments
    }

    pub fn value(&self, t: f64) -> f64 {
        if let Some(mb) = self.reg_value {
            if t <= self.epsilon {
                return mb;
            }
        }
        self.raw_value(t)
    }

    fn raw_value(&self, t: f64) -> f64 {
        for &(end, v) in &self.segments {
            if t < end {
                return v;
            }
        }
        self.segments.last().expect("non-empty").1
    }

    /// m(t) = int_0^t mu(s) ds.
    pub fn integral(&self, t: f64) -> Result<f64> {
        if t < 0.0 {
            return Err(ModelError::Domain(format!("drift integral needs t >= 0, got {t}")));
        }
        let mut total = 0.0;
        let mut lo = 0.0;
        if let Some(mb) = self.reg_value {
            let cap = t.min(self.epsilon);
            total += mb * cap;
            if t <= self.epsilon {
                return Ok(total);
            }
            lo = self.epsilon;
        }
        for &(end, v) in &self.segments {
            if lo >= t {
                break;
            }
            let hi = end.min(t);
            if hi > lo {
                total += v * (hi - lo);
            }
            lo = lo.max(end);
        }
        if lo < t {
            total += self.segments.last().expect("non-empty").1 * (t - lo);
        }
        Ok(total)
    }
}

/// One normal-mode component: an arithmetic Brownian motion with
/// deterministic drift mu_i(t) and diffusion sigma_i(t), started at 0.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    pub drift: DriftCurve,
    pub vol: VolCurve,
}

impl GaussianComponent {
    pub fn new(drift: DriftCurve, vol: VolCurve) -> Self {
        Self { drift, vol }
    }

    /// m_i(t) = int_0^t mu_i.
    pub fn mean(&self, t: f64) -> Result<f64> {
        self.drift.integral(t)
    }

    /// v_i(t)^2 = int_0^t sigma_i^2.
    pub fn variance(&self, t: f64) -> Result<f64> {
        self.vol.integrated_variance(t)
    }
}

/// Support of the mixture marginals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    WholeLine,
    PositiveHalfLine,
}

#[derive(Debug, Clone)]
pub enum ComponentSet {
    /// Lognormal mode: one vol curve per component, drift shared with the curve.
    Lognormal(Vec<VolCurve>),
    /// Normal mode: full (drift, vol) component pairs.
    Normal(Vec<GaussianComponent>),
}

/// A validated mixture specification: weights on the simplex, component
/// curves already stamped with the common regularization level, the support,
/// the initial level, and the regularization horizon epsilon.
#[derive(Debug, Clone)]
pub struct MixtureSpec {
    weights: Vec<f64>,
    components: ComponentSet,
    support: Support,
    s0: f64,
    epsilon: f64,
}

fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(ModelError::InvalidInput("mixture needs at least one component".into()));
    }
    if weights.len() > 8 {
        return Err(ModelError::InvalidInput(format!(
            "at most 8 mixture components supported, got {}",
            weights.len()
        )));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(ModelError::InvalidInput("mixture weights must be nonnegative".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-10 {
        return Err(ModelError::InvalidInput(format!("mixture weights must sum to 1, got {sum}")));
    }
    Ok(())
}

impl MixtureSpec {
    /// Lognormal mixture on the positive half line: components are GBMs with
    /// vol curves `vols`, all sharing s0 > 0. Stamps the common level
    /// nu_bar = sqrt(sum lambda_i nu_i(eps+)^2) on [0, epsilon].
    pub fn lognormal(weights: Vec<f64>, mut vols: Vec<VolCurve>, s0: f64, epsilon: f64) -> Result<Self> {
        validate_weights(&weights)?;
        if vols.len() != weights.len() {
            return Err(ModelError::InvalidInput("one vol curve per weight required".into()));
        }
        if s0 <= 0.0 {
            return Err(ModelError::InvalidInput("positive-half-line support requires s0 > 0".into()));
        }
        if epsilon < 0.0 {
            return Err(ModelError::InvalidInput("epsilon must be nonnegative".into()));
        }
        let nu_bar2: f64 = weights
            .iter()
            .zip(&vols)
            .map(|(w, v)| {
                let l = v.raw_level(epsilon);
                w * l * l
            })
            .sum();
        for v in &mut vols {
            v.set_regularization(epsilon, nu_bar2.sqrt());
        }
        Ok(Self {
            weights,
            components: ComponentSet::Lognormal(vols),
            support: Support::PositiveHalfLine,
            s0,
            epsilon,
        })
    }

    /// Normal mixture on the whole line, started at Y_0 = 0. Stamps the
    /// common (mu_bar, sigma_bar) pair on [0, epsilon].
    pub fn normal(weights: Vec<f64>, mut comps: Vec<GaussianComponent>, epsilon: f64) -> Result<Self> {
        validate_weights(&weights)?;
        if comps.len() != weights.len() {
            return Err(ModelError::InvalidInput("one component per weight required".into()));
        }
        if epsilon < 0.0 {
            return Err(ModelError::InvalidInput("epsilon must be nonnegative".into()));
        }
        let sigma_bar2: f64 = weights
            .iter()
            .zip(&comps)
            .map(|(w, c)| {
                let l = c.vol.raw_level(epsilon);
                w * l * l
            })
            .sum();
        let mu_bar: f64 =
            weights.iter().zip(&comps).map(|(w, c)| w * c.drift.raw_value(epsilon)).sum();
        for c in &mut comps {
            c.vol.set_regularization(epsilon, sigma_bar2.sqrt());
            c.drift.set_regularization(epsilon, mu_bar);
        }
        Ok(Self {
            weights,
            components: ComponentSet::Normal(comps),
            support: Support::WholeLine,
            s0: 0.0,
            epsilon,
        })
    }

    pub fn m(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn support(&self) -> Support {
        self.support
    }

    pub fn s0(&self) -> f64 {
        self.s0
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn components(&self) -> &ComponentSet {
        &self.components
    }

    /// Component vol levels nu_i(t) (lognormal) or sigma_i(t) (normal).
    pub fn vol_levels(&self, t: f64) -> Vec<f64> {
        match &self.components {
            ComponentSet::Lognormal(vs) => vs.iter().map(|v| v.level(t)).collect(),
            ComponentSet::Normal(cs) => cs.iter().map(|c| c.vol.level(t)).collect(),
        }
    }

    /// Common regularization level nu_bar (the vol on [0, epsilon]).
    pub fn nu_bar(&self) -> f64 {
        match &self.components {
            ComponentSet::Lognormal(vs) => vs[0].level(0.0),
            ComponentSet::Normal(cs) => cs[0].vol.level(0.0),
        }
    }

    /// Per-component (mean, variance) of the mixture kernel at time t, in the
    /// density coordinate: ln y for lognormal mode, y itself for normal mode.
    pub fn component_params(&self, curve: &YieldCurve, t: f64) -> Result<Vec<(f64, f64)>> {
        match &self.components {
            ComponentSet::Lognormal(vs) => {
                let r = curve.drift_integral(0.0, t)?;
                let base = self.s0.ln() + r;
                vs.iter()
                    .map(|v| {
                        let var = v.integrated_variance(t)?;
                        Ok((base - 0.5 * var, var))
                    })
                    .collect()
            }
            ComponentSet::Normal(cs) => {
                cs.iter().map(|c| Ok((c.mean(t)?, c.variance(t)?))).collect()
            }
        }
    }

    /// Time derivatives (dm/dt, d(v^2)/dt) of the kernel parameters at t,
    /// used by the quadrature oracle's analytic d(density)/dt.
    pub fn component_param_derivs(&self, curve: &YieldCurve, t: f64) -> Result<Vec<(f64, f64)>> {
        match &self.components {
            ComponentSet::Lognormal(vs) => {
                let r = curve.drift_rate(t)?;
                vs.iter()
                    .map(|v| {
                        let nu2 = v.level(t) * v.level(t);
                        Ok((r - 0.5 * nu2, nu2))
                    })
                    .collect()
            }
            ComponentSet::Normal(cs) => cs
                .iter()
                .map(|c| {
                    let s2 = c.vol.level(t) * c.vol.level(t);
                    Ok((c.drift.value(t), s2))
                })
                .collect(),
        }
    }
}

/// Per-component log kernel densities in the density coordinate g(y)
/// (g = ln for lognormal mode before the Jacobian, identity for normal mode).
fn component_log_densities(params: &[(f64, f64)], g: f64) -> Vec<f64> {
    params
        .iter()
        .map(|&(mean, var)| {
            let z = (g - mean) / var.sqrt();
            -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
        })
        .collect()
}

fn check_point(spec: &MixtureSpec, t: f64, y: f64) -> Result<()> {
    if t < 0.0 {
        return Err(ModelError::Domain(format!("t must be nonnegative, got {t}")));
    }
    if spec.support == Support::PositiveHalfLine && y <= 0.0 {
        return Err(ModelError::Domain(format!(
            "y must be positive on the positive-half-line support, got {y}"
        )));
    }
    Ok(())
}

/// Mixture marginal density at (t, y): sum_i lambda_i p_i(t, y), in level
/// units (lognormal mode includes the 1/y Jacobian). t = 0 is a point mass
/// and is rejected.
pub fn mixture_density(spec: &MixtureSpec, curve: &YieldCurve, t: f64, y: f64) -> Result<f64> {
    check_point(spec, t, y)?;
    if t < MIN_DENSITY_TIME {
        return Err(ModelError::Domain(
            "density undefined at t = 0 (point mass); evaluate at t > 0".into(),
        ));
    }
    let params = spec.component_params(curve, t)?;
    let g = match spec.support {
        Support::PositiveHalfLine => y.ln(),
        Support::WholeLine => y,
    };
    let logs = component_log_densities(&params, g);
    let mut dens = 0.0;
    for (w, lp) in spec.weights.iter().zip(&logs) {
        dens += w * lp.exp();
    }
    if spec.support == Support::PositiveHalfLine {
        dens /= y;
    }
    Ok(dens)
}

/// Mixture density of the log-state (lognormal mode: density of ln S_t at x).
/// Used by the density-tracking PDE, which works in log coordinates.
pub fn mixture_density_logspace(spec: &MixtureSpec, curve: &YieldCurve, t: f64, x: f64) -> Result<f64> {
    if spec.support != Support::PositiveHalfLine {
        return Err(ModelError::UnsupportedMode(
            "log-space density only defined for the lognormal mixture".into(),
        ));
    }
    if t < MIN_DENSITY_TIME {
        return Err(ModelError::Domain("density undefined at t = 0".into()));
    }
    let params = spec.component_params(curve, t)?;
    let logs = component_log_densities(&params, x);
    Ok(spec.weights.iter().zip(&logs).map(|(w, lp)| w * lp.exp()).sum())
}

/// State-dependent mixture weights Lambda_i(t, y). Exactly lambda for
/// t <= epsilon; otherwise a softmax over log component densities (the
/// lognormal Jacobian cancels in the ratio), so extreme tails stay
/// normalized instead of underflowing to 0/0.
pub fn lambda_weights(spec: &MixtureSpec, curve: &YieldCurve, t: f64, y: f64) -> Result<Vec<f64>> {
    check_point(spec, t, y)?;
    if t <= spec.epsilon || t < MIN_DENSITY_TIME || spec.m() == 1 {
        return Ok(spec.weights.clone());
    }
    let params = spec.component_params(curve, t)?;
    let g = match spec.support {
        Support::PositiveHalfLine => y.ln(),
        Support::WholeLine => y,
    };
    let logs = component_log_densities(&params, g);
    let mut shifted: Vec<f64> = spec
        .weights
        .iter()
        .zip(&logs)
        .map(|(w, lp)| if *w > 0.0 { w.ln() + lp } else { f64::NEG_INFINITY })
        .collect();
    let max = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in shifted.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    for s in shifted.iter_mut() {
        *s /= total;
    }
    Ok(shifted)
}

/// Closed-form mixture CDF at (t, y) (probability that the state is <= y).
pub fn mixture_cdf(spec: &MixtureSpec, curve: &YieldCurve, t: f64, y: f64) -> Result<f64> {
    check_point(spec, t, y)?;
    if t < MIN_DENSITY_TIME {
        return Err(ModelError::Domain("CDF degenerate at t = 0".into()));
    }
    let params = spec.component_params(curve, t)?;
    let g = match spec.support {
        Support::PositiveHalfLine => y.ln(),
        Support::WholeLine => y,
    };
    let mut c = 0.0;
    for (&w, &(mean, var)) in spec.weights.iter().zip(&params) {
        c += w * crate::math::normal::norm_cdf((g - mean) / var.sqrt());
    }
    Ok(c)
}

/// d(kernel density)/dt at fixed y for each component, in level units,
/// from the chain rule through (m_i(t), v_i(t)^2):
///   d ln p / dt = (z^2 - 1) vdot/v + z mdot/v,  z = (g - m)/v.
pub fn component_density_time_derivs(
    spec: &MixtureSpec,
    curve: &YieldCurve,
    t: f64,
    y: f64,
) -> Result<Vec<f64>> {
    check_point(spec, t, y)?;
    let params = spec.component_params(curve, t)?;
    let derivs = spec.component_param_derivs(curve, t)?;
    let (g, jac) = match spec.support {
        Support::PositiveHalfLine => (y.ln(), y),
        Support::WholeLine => (y, 1.0),
    };
    let mut out = Vec::with_capacity(spec.m());
    for (&(mean, var), &(mdot, v2dot)) in params.iter().zip(&derivs) {
        let v = var.sqrt();
        let z = (g - mean) / v;
        let vdot = 0.5 * v2dot / v;
        let p = norm_pdf(z) / (v * jac);
        out.push(p * ((z * z - 1.0) * vdot / v + z * mdot / v));
    }
    Ok(out)
}
