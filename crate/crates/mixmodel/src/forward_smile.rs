//! Conditional future smiles: the implied-vol curve of T-expiry options seen
//! from time t, given that the spot sits at its time-0 expectation.
//!
//! The reported quantity V(t, T, K) is defined through
//!   e^{-R_d(t,T)} E_t[(S_T - K)^+ | S_t = Sbar_t]
//!     = bs_call(Sbar_t, K, T - t, R_d(t,T), R_f(t,T), V),
//! with Sbar_t = E_0(S_t) = s0 e^{R(0,t)}, and is returned annualized as
//! V / sqrt(T - t).
//!
//! Two engines share the request type. The local-vol diffusion is Markov in
//! the spot, so conditioning is an exact restart at (t, Sbar_t): one Monte
//! Carlo ensemble per row prices every strike (common random numbers keep
//! the smile shape stable; the standard error is reported per strike). The
//! uncertain-vol engine is closed form: the scenario stays hidden, so
//! conditioning on the level alone weights each scenario's GBM transition
//! price by the posterior Lambda_k(t, Sbar_t). At t = 0 the two coincide
//! with the unconditional mixture price, so the local-vol engine also takes
//! the closed-form path there.

use crate::error::{ModelError, Result};
use crate::local_vol::{LocalVolModel, Mode};
use crate::market_model::{lambda_weights, ComponentSet, Leg};
use crate::pricing::{bs_call, implied_vol};
use crate::simulation::{mc_price, simulate_local_vol, PathEnsemble, SimConfig};
use std::str::FromStr;

/// Engine choice for the conditional smile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    LocalVol,
    UncertainVol,
}

impl FromStr for Engine {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local-vol" => Ok(Engine::LocalVol),
            "uncertain-vol" => Ok(Engine::UncertainVol),
            other => Err(ModelError::InvalidInput(format!(
                "unknown engine '{other}' (expected local-vol or uncertain-vol)"
            ))),
        }
    }
}

impl std::fmt::Display for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Engine::LocalVol => "local-vol",
            Engine::UncertainVol => "uncertain-vol",
        })
    }
}

/// One conditional-smile row: observation time t, option expiry T, strikes
/// as moneyness K / Sbar_t. The simulation's start state and horizon are
/// derived from (t, Sbar_t, T); only n_paths, dt, scheme and seed are taken
/// from `sim`.
#[derive(Debug, Clone)]
pub struct ForwardSmileRequest {
    pub model: LocalVolModel,
    pub t: f64,
    pub maturity: f64,
    pub moneyness: Vec<f64>,
    pub sim: SimConfig,
    pub engine: Engine,
}

impl ForwardSmileRequest {
    pub fn new(
        model: LocalVolModel,
        t: f64,
        maturity: f64,
        moneyness: Vec<f64>,
        sim: SimConfig,
        engine: Engine,
    ) -> Result<Self> {
        if !(t >= 0.0) || !(maturity > t) {
            return Err(ModelError::InvalidInput(format!(
                "need 0 <= t < T, got t = {t}, T = {maturity}"
            )));
        }
        if moneyness.is_empty() {
            return Err(ModelError::InvalidInput("need at least one moneyness point".into()));
        }
        if let Some(bad) = moneyness.iter().find(|k| !(**k > 0.0) || !k.is_finite()) {
            return Err(ModelError::InvalidInput(format!("moneyness must be > 0, got {bad}")));
        }
        Ok(Self { model, t, maturity, moneyness, sim, engine })
    }
}

/// One strike of a conditional smile. `vol` is the annualized implied vol
/// V(t,T,K)/sqrt(T-t), or None when the price cannot be inverted (outside
/// the no-arbitrage band within noise); `price` and `std_error` are always
/// reported so failures carry their diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct ForwardSmilePoint {
    pub t: f64,
    pub maturity: f64,
    pub strike: f64,
    pub moneyness: f64,
    pub price: f64,
    pub std_error: f64,
    pub vol: Option<f64>,
}

/// Sbar_t = E_0(S_t) = s0 e^{R(0,t)}: the time-0 expectation of the spot
/// under the risk-neutral drift R = R_d - R_f.
pub fn expected_spot(model: &LocalVolModel, t: f64) -> Result<f64> {
    Ok(model.spec.s0() * model.curve.drift_integral(0.0, t)?.exp())
}

/// Per-scenario total standard deviations over [t, T] from the regularized
/// component vol curves.
fn scenario_total_vols(model: &LocalVolModel, t: f64, maturity: f64) -> Result<Vec<f64>> {
    let vols = match model.spec.components() {
        ComponentSet::Lognormal(vs) => vs,
        ComponentSet::Normal(_) => {
            return Err(ModelError::UnsupportedMode(
                "conditional smiles require the lognormal mode".into(),
            ))
        }
    };
    let mut totals = Vec::with_capacity(vols.len());
    for v in vols {
        totals.push((v.integrated_variance(maturity)? - v.integrated_variance(t)?).sqrt());
    }
    Ok(totals)
}

/// Closed-form conditional call price under the uncertain-vol model:
/// sum_k Lambda_k(t, sbar) bs_call(sbar, K, T-t, R_d, R_f, V_k(t,T)).
/// At t <= epsilon the posterior is the prior, so t = 0 prices the
/// unconditional mixture.
fn closed_form_points(req: &ForwardSmileRequest, sbar: f64) -> Result<Vec<ForwardSmilePoint>> {
    let (t, maturity) = (req.t, req.maturity);
    let tau = maturity - t;
    let rd = req.model.curve.integrated_rate(t, maturity, Leg::Domestic)?;
    let rf = req.model.curve.integrated_rate(t, maturity, Leg::Foreign)?;
    let posterior = lambda_weights(&req.model.spec, &req.model.curve, t, sbar)?;
    let totals = scenario_total_vols(&req.model, t, maturity)?;
    let mut out = Vec::with_capacity(req.moneyness.len());
    for &m in &req.moneyness {
        let k = m * sbar;
        let mut price = 0.0;
        for (w, v) in posterior.iter().zip(&totals) {
            price += w * bs_call(sbar, k, tau, rd, rf, *v)?;
        }
        let vol = implied_vol(price, sbar, k, tau, rd, rf).ok().map(|v| v / tau.sqrt());
        out.push(ForwardSmilePoint {
            t,
            maturity,
            strike: k,
            moneyness: m,
            price,
            std_error: 0.0,
            vol,
        });
    }
    Ok(out)
}

/// Monte Carlo conditional call prices from one shared restarted ensemble.
fn monte_carlo_points(req: &ForwardSmileRequest, sbar: f64) -> Result<Vec<ForwardSmilePoint>> {
    let cfg = SimConfig::new(
        req.sim.n_paths,
        req.sim.dt,
        req.sim.scheme,
        req.sim.seed,
        req.t,
        sbar,
        req.maturity,
    )?;
    let ensemble = simulate_local_vol(&req.model, &cfg)?;
    smile_from_ensemble(&req.model, &ensemble, req.maturity, &req.moneyness)
}

/// Conditional future smile K -> V(t, T, K)/sqrt(T-t) at S_t = Sbar_t.
pub fn conditional_future_smile(req: &ForwardSmileRequest) -> Result<Vec<ForwardSmilePoint>> {
    if req.model.mode != Mode::LognormalMixture {
        return Err(ModelError::UnsupportedMode(
            "conditional smiles require the lognormal mode".into(),
        ));
    }
    let sbar = expected_spot(&req.model, req.t)?;
    match req.engine {
        Engine::UncertainVol => closed_form_points(req, sbar),
        // The diffusion marginal at T started from (0, s0) equals the
        // mixture law, so the t = 0 row needs no simulation.
        Engine::LocalVol if req.t == 0.0 => closed_form_points(req, sbar),
        Engine::LocalVol => monte_carlo_points(req, sbar),
    }
}

/// Per-row max - min excursion of the annualized vols, skipping failed
/// points. Rows must be internally consistent in (t, T) and contain at
/// least one inverted vol.
pub fn smile_flattening_metric(rows: &[Vec<ForwardSmilePoint>]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let first = row
            .first()
            .ok_or_else(|| ModelError::InvalidInput(format!("row {i} is empty")))?;
        if row.iter().any(|p| p.t != first.t || p.maturity != first.maturity) {
            return Err(ModelError::InvalidInput(format!("row {i} mixes (t, T) pairs")));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in row {
            if let Some(v) = p.vol {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !lo.is_finite() {
            return Err(ModelError::InvalidInput(format!("row {i} has no inverted vols")));
        }
        out.push(hi - lo);
    }
    Ok(out)
}

/// Price a smile row off a finished ensemble started at (t, Sbar_t). Each
/// strike is priced on its out-of-the-money side and mapped back through
/// put-call parity, which keeps wing estimates positive where the direct
/// call payoff is dominated by discounting noise.
pub fn smile_from_ensemble(
    model: &LocalVolModel,
    ensemble: &PathEnsemble,
    maturity: f64,
    moneyness: &[f64],
) -> Result<Vec<ForwardSmilePoint>> {
    let t = ensemble.t_start;
    if (ensemble.grid.last().copied().unwrap_or(t) - maturity).abs() > 1e-9 {
        return Err(ModelError::InvalidInput("ensemble horizon does not match maturity".into()));
    }
    let sbar = expected_spot(model, t)?;
    if (ensemble.s_start - sbar).abs() > 1e-9 * sbar {
        return Err(ModelError::InvalidInput(format!(
            "ensemble starts at {}, expected spot is {sbar}",
            ensemble.s_start
        )));
    }
    let tau = maturity - t;
    let rd = model.curve.integrated_rate(t, maturity, Leg::Domestic)?;
    let rf = model.curve.integrated_rate(t, maturity, Leg::Foreign)?;
    let forward = sbar * (rd - rf).exp();
    let df_d = (-rd).exp();
    let df_f = (-rf).exp();
    let mut out = Vec::with_capacity(moneyness.len());
    for &m in moneyness {
        let k = m * sbar;
        let (price, se) = if k >= forward {
            mc_price(ensemble, |s| (s - k).max(0.0), df_d)?
        } else {
            let (put, se) = mc_price(ensemble, |s| (k - s).max(0.0), df_d)?;
            (put + sbar * df_f - k * df_d, se)
        };
        let vol = implied_vol(price, sbar, k, tau, rd, rf).ok().map(|v| v / tau.sqrt());
        out.push(ForwardSmilePoint {
            t,
            maturity,
            strike: k,
            moneyness: m,
            price,
            std_error: se,
            vol,
        });
    }
    Ok(out)
}
