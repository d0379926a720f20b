//! Carry-adjusted Black-Scholes machinery and closed-form mixture pricing.
//!
//! bs_call(s, K, tau, Rd, Rf, V) = s e^{-Rf} Phi(d1) - K e^{-Rd} Phi(d2),
//!   d1 = [ln(s/K) + Rd - Rf + V^2/2] / V,  d2 = d1 - V,
//! with Rd, Rf integrated rates over the period and V the total standard
//! deviation (not annualized). Mixture prices are convex combinations of
//! these formulas with the component total vols V_i(T), so European pricing
//! stays closed-form. Implied vol inverts the same formula with a
//! bisection-safeguarded Newton iteration; implied densities come from the
//! second strike derivative of the undiscounted call price.

use crate::error::{ModelError, Result};
use crate::local_vol::{LocalVolModel, Mode};
use crate::market_model::Leg;
use crate::math::normal::{norm_cdf, norm_pdf};

/// Payoff side of a quoted option. Only calls are quoted in this workflow;
/// puts enter through parity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptionKind {
    Call,
}

/// A market quote: maturity, strike, premium.
#[derive(Debug, Clone, Copy)]
pub struct OptionQuote {
    pub maturity: f64,
    pub strike: f64,
    pub price: f64,
    pub kind: OptionKind,
}

impl OptionQuote {
    pub fn new(maturity: f64, strike: f64, price: f64) -> Result<Self> {
        if !(strike > 0.0) || !(maturity > 0.0) {
            return Err(ModelError::InvalidInput(format!(
                "quote needs K > 0 and T > 0, got K = {strike}, T = {maturity}"
            )));
        }
        Ok(Self { maturity, strike, price, kind: OptionKind::Call })
    }

    /// No-arbitrage band given spot and the two discount factors to maturity:
    /// max(s0 df_f - K df_d, 0) <= price <= s0 df_f.
    pub fn validate_bounds(&self, s0: f64, df_d: f64, df_f: f64) -> Result<()> {
        let lower = (s0 * df_f - self.strike * df_d).max(0.0);
        let upper = s0 * df_f;
        if self.price < lower || self.price > upper {
            return Err(ModelError::InvalidInput(format!(
                "quote price {} outside no-arbitrage band [{lower}, {upper}]",
                self.price
            )));
        }
        Ok(())
    }
}

/// One point of a conditional smile: implied vol of the (t, T, K) option,
/// annualized as V(t, T, K) / sqrt(T - t).
#[derive(Debug, Clone, Copy)]
pub struct SmilePoint {
    pub t: f64,
    pub maturity: f64,
    pub strike: f64,
    pub implied_vol: f64,
}

impl SmilePoint {
    pub fn new(t: f64, maturity: f64, strike: f64, implied_vol: f64) -> Result<Self> {
        if !(t < maturity) {
            return Err(ModelError::InvalidInput(format!(
                "smile point needs t < T, got t = {t}, T = {maturity}"
            )));
        }
        if !(implied_vol > 0.0) {
            return Err(ModelError::InvalidInput(format!(
                "smile point needs implied_vol > 0, got {implied_vol}"
            )));
        }
        Ok(Self { t, maturity, strike, implied_vol })
    }
}

fn check_bs_inputs(s: f64, k: f64, tau: f64, v: f64) -> Result<()> {
    if !(s > 0.0) || !(k > 0.0) {
        return Err(ModelError::InvalidInput(format!("need s > 0 and K > 0, got s = {s}, K = {k}")));
    }
    if !(tau > 0.0) {
        return Err(ModelError::InvalidInput(format!("need tau > 0, got {tau}")));
    }
    if !(v >= 0.0) || !v.is_finite() {
        return Err(ModelError::InvalidInput(format!("need total vol V >= 0, got {v}")));
    }
    Ok(())
}

/// Two-rate call with total standard deviation V over the period. V = 0 is
/// the discounted-intrinsic limit, not an error.
pub fn bs_call(s: f64, k: f64, tau: f64, rd: f64, rf: f64, v: f64) -> Result<f64> {
    check_bs_inputs(s, k, tau, v)?;
    if v == 0.0 {
        return Ok((s * (-rf).exp() - k * (-rd).exp()).max(0.0));
    }
    let d1 = ((s / k).ln() + rd - rf + 0.5 * v * v) / v;
    let d2 = d1 - v;
    Ok(s * (-rf).exp() * norm_cdf(d1) - k * (-rd).exp() * norm_cdf(d2))
}

/// Two-rate put, same conventions as `bs_call`.
pub fn bs_put(s: f64, k: f64, tau: f64, rd: f64, rf: f64, v: f64) -> Result<f64> {
    check_bs_inputs(s, k, tau, v)?;
    if v == 0.0 {
        return Ok((k * (-rd).exp() - s * (-rf).exp()).max(0.0));
    }
    let d1 = ((s / k).ln() + rd - rf + 0.5 * v * v) / v;
    let d2 = d1 - v;
    Ok(k * (-rd).exp() * norm_cdf(-d2) - s * (-rf).exp() * norm_cdf(-d1))
}

/// dPrice/dV of `bs_call` (sensitivity to total vol, not annualized vol).
fn bs_vega_total(s: f64, k: f64, rd: f64, rf: f64, v: f64) -> f64 {
    let d1 = ((s / k).ln() + rd - rf + 0.5 * v * v) / v;
    s * (-rf).exp() * norm_pdf(d1)
}

fn mixture_price_parts(model: &LocalVolModel, k: f64, t: f64) -> Result<(f64, f64, Vec<f64>)> {
    if model.mode != Mode::LognormalMixture {
        return Err(ModelError::UnsupportedMode(
            "closed-form mixture pricing requires lognormal mode".into(),
        ));
    }
    if !(k > 0.0) || !(t > 0.0) {
        return Err(ModelError::InvalidInput(format!("need K > 0 and T > 0, got K = {k}, T = {t}")));
    }
    let rd = model.curve.integrated_rate(0.0, t, Leg::Domestic)?;
    let rf = model.curve.integrated_rate(0.0, t, Leg::Foreign)?;
    let vols = match model.spec.components() {
        crate::market_model::ComponentSet::Lognormal(vs) => vs,
        _ => unreachable!("lognormal mode validated above"),
    };
    let mut totals = Vec::with_capacity(vols.len());
    for vcurve in vols {
        totals.push(vcurve.integrated_variance(t)?.sqrt());
    }
    Ok((rd, rf, totals))
}

/// Sum lambda_i bs_call(s0, K, T, Rd, Rf, V_i(T)). Lognormal mode only.
pub fn mixture_call(model: &LocalVolModel, k: f64, t: f64) -> Result<f64> {
    let (rd, rf, totals) = mixture_price_parts(model, k, t)?;
    let s0 = model.spec.s0();
    let mut px = 0.0;
    for (lam, v) in model.spec.weights().iter().zip(&totals) {
        px += lam * bs_call(s0, k, t, rd, rf, *v)?;
    }
    Ok(px)
}

/// Sum lambda_i bs_put(s0, K, T, Rd, Rf, V_i(T)). Lognormal mode only.
pub fn mixture_put(model: &LocalVolModel, k: f64, t: f64) -> Result<f64> {
    let (rd, rf, totals) = mixture_price_parts(model, k, t)?;
    let s0 = model.spec.s0();
    let mut px = 0.0;
    for (lam, v) in model.spec.weights().iter().zip(&totals) {
        px += lam * bs_put(s0, k, t, rd, rf, *v)?;
    }
    Ok(px)
}

/// Invert `bs_call` in V. Returns the total standard deviation over the
/// period; callers annualize as V / sqrt(tau). Bisection-safeguarded Newton
/// on the bracket [1e-9, 5 sqrt(tau) + 5], terminating at 1e-12 currency.
pub fn implied_vol(price: f64, s: f64, k: f64, tau: f64, rd: f64, rf: f64) -> Result<f64> {
    check_bs_inputs(s, k, tau, 1.0)?;
    let lower_bound = (s * (-rf).exp() - k * (-rd).exp()).max(0.0);
    let upper_bound = s * (-rf).exp();
    if price <= lower_bound {
        return Err(ModelError::Domain(format!(
            "price {price} at or below the intrinsic lower bound {lower_bound}"
        )));
    }
    if price >= upper_bound {
        return Err(ModelError::Domain(format!(
            "price {price} at or above the upper bound {upper_bound}"
        )));
    }
    let (mut lo, mut hi) = (1e-9, 5.0 * tau.sqrt() + 5.0);
    let f = |v: f64| bs_call(s, k, tau, rd, rf, v).map(|p| p - price);
    if f(lo)? > 0.0 {
        // Root below the bracket floor: the price is indistinguishable from
        // intrinsic at V = 1e-9.
        return Ok(lo);
    }
    if f(hi)? < 0.0 {
        return Err(ModelError::Numerical(format!(
            "no total vol below {hi} reproduces price {price}"
        )));
    }
    let mut v = 0.5 * (lo + hi);
    for _ in 0..200 {
        let fv = f(v)?;
        if fv.abs() <= 1e-12 {
            return Ok(v);
        }
        if fv > 0.0 {
            hi = v;
        } else {
            lo = v;
        }
        let vega = bs_vega_total(s, k, rd, rf, v);
        let newton = v - fv / vega;
        v = if vega > 1e-300 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-15 {
            return Ok(v);
        }
    }
    Err(ModelError::Numerical("implied vol iteration did not converge".into()))
}

/// Terminal density from a call price function: e^{Rd} d^2C/dK^2 by central
/// second differences at steps h and 2h with Richardson extrapolation. The
/// two estimates must agree; wild disagreement at non-negligible magnitude
/// means h is too small (cancellation) or the price function is not smooth.
pub fn implied_density<F>(price: F, rd: f64, k: f64, h: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    if !(h > 0.0) || !(k > h * 2.0) {
        return Err(ModelError::InvalidInput(format!(
            "need 0 < 2h < K for central differencing, got K = {k}, h = {h}"
        )));
    }
    let second = |step: f64| -> Result<f64> {
        let (pm, p0, pp) = (price(k - step)?, price(k)?, price(k + step)?);
        Ok((pm - 2.0 * p0 + pp) / (step * step))
    };
    let d_h = second(h)?;
    let d_2h = second(2.0 * h)?;
    let scale = d_h.abs().max(d_2h.abs());
    if scale > 1e-10 && (d_h - d_2h).abs() > 0.5 * scale {
        return Err(ModelError::Numerical(format!(
            "second-difference estimates disagree ({d_h} vs {d_2h}); step h = {h} is too small \
             for the available price precision"
        )));
    }
    Ok(rd.exp() * (4.0 * d_h - d_2h) / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_model::{MixtureSpec, VolCurve, YieldCurve};
    use crate::math::quad;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    pub(crate) fn fx_curve() -> YieldCurve {
        YieldCurve::new(vec![
            (1.0, 0.974454, 0.985738),
            (2.0, 0.946724, 0.960891),
            (3.0, 0.914757, 0.925555),
            (4.0, 0.879548, 0.885228),
            (5.0, 0.841922, 0.84227),
            (6.0, 0.803363, 0.799019),
            (7.0, 0.764915, 0.756466),
        ])
        .unwrap()
    }

    pub(crate) fn calibrated_model() -> LocalVolModel {
        let spec = MixtureSpec::lognormal(
            vec![0.970532, 0.029468],
            vec![VolCurve::constant(0.089281).unwrap(), VolCurve::constant(0.707406).unwrap()],
            1.07,
            1e-4,
        )
        .unwrap();
        LocalVolModel::lognormal(spec, fx_curve()).unwrap()
    }

    #[test]
    fn zero_vol_is_discounted_intrinsic() {
        assert_abs_diff_eq!(bs_call(100.0, 80.0, 1.0, 0.0, 0.0, 0.0).unwrap(), 20.0);
        assert_abs_diff_eq!(bs_put(100.0, 80.0, 1.0, 0.0, 0.0, 0.0).unwrap(), 0.0);
        let c = bs_call(100.0, 80.0, 2.0, 0.04, 0.01, 0.0).unwrap();
        assert_relative_eq!(c, 100.0 * (-0.01f64).exp() - 80.0 * (-0.04f64).exp());
    }

    #[test]
    fn vanishing_strike_is_sure_delivery() {
        let c = bs_call(100.0, 1e-10, 1.0, 0.03, 0.01, 0.2).unwrap();
        assert_relative_eq!(c, 100.0 * (-0.01f64).exp(), max_relative = 1e-11);
    }

    // Frozen lognormal-expectation quadrature values (40-digit arithmetic,
    // payoff integrated against the terminal density).
    #[test]
    fn call_matches_expectation_quadrature() {
        let c = bs_call(1.07, 1.07, 1.0, 0.025878, 0.014364, 0.10).unwrap();
        assert_abs_diff_eq!(c, 0.048133756838153009, epsilon = 1e-12);
        let c2 = bs_call(1.07, 1.25, 1.0, 0.05, 0.01, 0.3).unwrap();
        assert_abs_diff_eq!(c2, 0.078926124198914490, epsilon = 1e-12);
    }

    #[test]
    fn put_matches_expectation_quadrature() {
        let p = bs_put(1.07, 1.07, 1.0, 0.025878, 0.014364, 0.10).unwrap();
        assert_abs_diff_eq!(p, 0.036059123199877956, epsilon = 1e-12);
    }

    #[test]
    fn call_monotone_in_total_vol() {
        let mut last = 0.0;
        for i in 1..=40 {
            let v = 0.05 * i as f64;
            let c = bs_call(1.0, 1.1, 1.0, 0.02, 0.01, v).unwrap();
            assert!(c > last, "call not increasing at V = {v}");
            last = c;
        }
    }

    #[test]
    fn put_call_parity_single() {
        for &(k, v) in &[(0.9, 0.1), (1.07, 0.25), (1.4, 0.8)] {
            let c = bs_call(1.07, k, 1.0, 0.026, 0.014, v).unwrap();
            let p = bs_put(1.07, k, 1.0, 0.026, 0.014, v).unwrap();
            let fwd = 1.07 * (-0.014f64).exp() - k * (-0.026f64).exp();
            assert_abs_diff_eq!(c - p, fwd, epsilon = 1e-14);
        }
    }

    #[test]
    fn mixture_put_call_parity() {
        let m = calibrated_model();
        let t = 1.0;
        let dfd = m.curve.df(Leg::Domestic, t).unwrap();
        let dff = m.curve.df(Leg::Foreign, t).unwrap();
        for &k in &[0.8, 1.0, 1.07, 1.2, 1.5] {
            let c = mixture_call(&m, k, t).unwrap();
            let p = mixture_put(&m, k, t).unwrap();
            assert_abs_diff_eq!(c - p, 1.07 * dff - k * dfd, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_component_mixture_is_bs() {
        let spec =
            MixtureSpec::lognormal(vec![1.0], vec![VolCurve::constant(0.2).unwrap()], 1.07, 0.0)
                .unwrap();
        let m = LocalVolModel::lognormal(spec, fx_curve()).unwrap();
        let rd = m.curve.integrated_rate(0.0, 1.5, Leg::Domestic).unwrap();
        let rf = m.curve.integrated_rate(0.0, 1.5, Leg::Foreign).unwrap();
        let v = 0.2 * 1.5f64.sqrt();
        for &k in &[0.9, 1.07, 1.3] {
            assert_relative_eq!(
                mixture_call(&m, k, 1.5).unwrap(),
                bs_call(1.07, k, 1.5, rd, rf, v).unwrap(),
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn mixture_call_monotone_and_convex_in_strike() {
        let m = calibrated_model();
        let t = 1.0;
        let ks: Vec<f64> = (1..=60).map(|i| 0.5 + 0.02 * i as f64).collect();
        let px: Vec<f64> = ks.iter().map(|&k| mixture_call(&m, k, t).unwrap()).collect();
        for w in px.windows(2) {
            assert!(w[1] < w[0], "call price not decreasing in K");
        }
        for w in px.windows(3) {
            assert!(w[0] - 2.0 * w[1] + w[2] >= -1e-10, "call price not convex in K");
        }
    }

    #[test]
    fn mixture_call_increasing_in_maturity() {
        let m = calibrated_model();
        let mut last = 0.0;
        for i in 1..=12 {
            let t = 0.5 * i as f64;
            let c = mixture_call(&m, 1.07, t).unwrap();
            assert!(c > last, "call not increasing at T = {t}");
            last = c;
        }
    }

    #[test]
    fn mixture_call_within_no_arbitrage_bounds() {
        let m = calibrated_model();
        for &t in &[0.5, 1.0, 4.0] {
            let dfd = m.curve.df(Leg::Domestic, t).unwrap();
            let dff = m.curve.df(Leg::Foreign, t).unwrap();
            for &k in &[0.6, 1.07, 1.9] {
                let c = mixture_call(&m, k, t).unwrap();
                assert!(c >= (1.07 * dff - k * dfd).max(0.0) - 1e-15);
                assert!(c <= 1.07 * dff + 1e-15);
            }
        }
    }

    #[test]
    fn normal_mode_pricing_rejected() {
        use crate::market_model::{DriftCurve, GaussianComponent};
        let comps = vec![GaussianComponent::new(
            DriftCurve::constant(0.02),
            VolCurve::constant(0.2).unwrap(),
        )];
        let spec = MixtureSpec::normal(vec![1.0], comps, 0.0).unwrap();
        let m = LocalVolModel::normal(spec, fx_curve()).unwrap();
        assert!(matches!(mixture_call(&m, 1.0, 1.0), Err(ModelError::UnsupportedMode(_))));
    }

    #[test]
    fn implied_vol_round_trip() {
        for &v in &[0.01, 0.2, 1.5] {
            let price = bs_call(1.07, 1.1, 2.0, 0.05, 0.02, v).unwrap();
            let got = implied_vol(price, 1.07, 1.1, 2.0, 0.05, 0.02).unwrap();
            assert_abs_diff_eq!(got, v, epsilon = 1e-10);
        }
    }

    #[test]
    fn implied_vol_bound_violations_identified() {
        let err = implied_vol(0.0, 1.0, 2.0, 1.0, 0.0, 0.0).unwrap_err();
        assert!(err.to_string().contains("lower bound"), "got: {err}");
        let err = implied_vol(1.5, 1.0, 2.0, 1.0, 0.0, 0.0).unwrap_err();
        assert!(err.to_string().contains("upper bound"), "got: {err}");
    }

    // ATM one-year implied vol of the calibrated two-component model; the
    // reference value 10.72% comes from the published conditional-smile
    // table (0y row, K / S-bar = 1 read at K = s0 forward-adjusted).
    #[test]
    fn calibrated_atm_vol_level() {
        let m = calibrated_model();
        let sbar = 1.07 * (m.curve.drift_integral(0.0, 1.0).unwrap()).exp();
        let px = mixture_call(&m, sbar, 1.0).unwrap();
        let rd = m.curve.integrated_rate(0.0, 1.0, Leg::Domestic).unwrap();
        let rf = m.curve.integrated_rate(0.0, 1.0, Leg::Foreign).unwrap();
        let v = implied_vol(px, 1.07, sbar, 1.0, rd, rf).unwrap();
        assert_abs_diff_eq!(v, 0.1072, epsilon = 5e-4);
    }

    #[test]
    fn flat_smile_for_single_component() {
        let spec =
            MixtureSpec::lognormal(vec![1.0], vec![VolCurve::constant(0.2).unwrap()], 1.07, 0.0)
                .unwrap();
        let m = LocalVolModel::lognormal(spec, fx_curve()).unwrap();
        let t = 1.0;
        let rd = m.curve.integrated_rate(0.0, t, Leg::Domestic).unwrap();
        let rf = m.curve.integrated_rate(0.0, t, Leg::Foreign).unwrap();
        for &k in &[0.7, 0.9, 1.07, 1.3, 1.6] {
            let px = mixture_call(&m, k, t).unwrap();
            let v = implied_vol(px, 1.07, k, t, rd, rf).unwrap() / t.sqrt();
            assert_abs_diff_eq!(v, 0.2, epsilon = 1e-10);
        }
    }

    #[test]
    fn implied_density_matches_mixture_density() {
        let m = calibrated_model();
        let t = 1.0;
        let rd = m.curve.integrated_rate(0.0, t, Leg::Domestic).unwrap();
        let price = |k: f64| mixture_call(&m, k, t);
        for &k in &[0.9, 1.07, 1.3] {
            let got = implied_density(&price, rd, k, 1e-3 * k).unwrap();
            let want = crate::market_model::mixture_density(&m.spec, &m.curve, t, k).unwrap();
            assert_relative_eq!(got, want, max_relative = 1e-3);
        }
    }

    #[test]
    fn implied_density_of_gbm_is_lognormal() {
        let spec =
            MixtureSpec::lognormal(vec![1.0], vec![VolCurve::constant(0.25).unwrap()], 1.07, 0.0)
                .unwrap();
        let m = LocalVolModel::lognormal(spec, fx_curve()).unwrap();
        let t = 2.0;
        let rd = m.curve.integrated_rate(0.0, t, Leg::Domestic).unwrap();
        let price = |k: f64| mixture_call(&m, k, t);
        let k = 1.2;
        let got = implied_density(&price, rd, k, 1e-3 * k).unwrap();
        let want = crate::market_model::mixture_density(&m.spec, &m.curve, t, k).unwrap();
        assert_relative_eq!(got, want, max_relative = 1e-4);
    }

    #[test]
    fn implied_density_integrates_to_one() {
        let m = calibrated_model();
        let t = 1.0;
        let rd = m.curve.integrated_rate(0.0, t, Leg::Domestic).unwrap();
        let price = |k: f64| mixture_call(&m, k, t);
        let dens = |k: f64| implied_density(&price, rd, k, 1e-3 * k).unwrap();
        // Strike range covering all but ~1e-8 of mass of the widest
        // component (total vol 0.707).
        let (mass, _) = quad::integrate(&dens, 1.07 * (-4.5f64 * 0.71).exp(), 1.07 * (4.5f64 * 0.71).exp(), 1e-6)
            .unwrap();
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-4);
    }

    #[test]
    fn implied_density_step_too_small_detected() {
        let m = calibrated_model();
        let t = 1.0;
        let rd = m.curve.integrated_rate(0.0, t, Leg::Domestic).unwrap();
        let price = |k: f64| mixture_call(&m, k, t);
        let err = implied_density(&price, rd, 1.07, 1e-9 * 1.07).unwrap_err();
        assert!(err.to_string().contains("too small"), "got: {err}");
    }

    #[test]
    fn quote_and_smile_point_validation() {
        assert!(OptionQuote::new(1.0, -1.0, 0.05).is_err());
        let q = OptionQuote::new(1.0, 1.07, 0.048).unwrap();
        assert!(q.validate_bounds(1.07, 0.974454, 0.985738).is_ok());
        let q = OptionQuote::new(1.0, 1.07, 1.2).unwrap();
        assert!(q.validate_bounds(1.07, 0.974454, 0.985738).is_err());
        assert!(SmilePoint::new(2.0, 1.0, 1.07, 0.1).is_err());
        assert!(SmilePoint::new(1.0, 2.0, 1.07, -0.1).is_err());
    }
}
