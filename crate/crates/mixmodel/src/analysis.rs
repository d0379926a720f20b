//! Verification laboratory for the model's correlation and density claims.
//!
//! Terminal decorrelation: corr(S_T, sigma_mix^2(T, S_T)) = 0 and
//! corr(S_T, v(T)) = 0 for the average-variance accumulator, both checked on
//! simulated ensembles with influence-function standard errors, and
//! independently through quadrature of the closed-form moments
//! E{sigma^2 S} = s0 e^{R(T)} sum lambda nu^2 and E{sigma^2} = sum lambda nu^2.
//!
//! Instantaneous correlation: dS and d(sigma_mix^2) share one Brownian
//! driver, so their correlation is sign(d sigma^2/dy) wherever the slope is
//! nonzero, and undefined where it vanishes.
//!
//! Posterior identity: in the uncertain-volatility model,
//! Q{xi = nu_k | S_t = x} = Lambda_k(t, x), with conditional second moment
//! sum_k Lambda_k nu_k^2 = sigma_mix^2(t, x).
//!
//! Fokker-Planck tracking: conservative flux-form Crank-Nicolson in the
//! natural coordinate (log level for the lognormal family), zero-flux
//! boundaries, implicit-Euler startup; the discrete mass functional
//! h * sum(q) is conserved to solver precision by construction.

use crate::error::{ModelError, Result};
use crate::local_vol::{dsigma_mix2_dy, sigma_mix_squared, LocalVolModel, Mode};
use crate::market_model::{
    lambda_weights, mixture_cdf, mixture_density, mixture_density_logspace, ComponentSet,
    MixtureSpec, Support,
};
use crate::math::normal::norm_pdf;
use crate::math::stats::{correlation, mean_se, silverman_bandwidth};
use crate::math::{quad, tridiag};
use crate::simulation::{rng, PathEnsemble};

/// A correlation estimate with its standard error and, when the model gives
/// one, the analytic covariance it is tested against.
#[derive(Debug, Clone, Copy)]
pub struct CorrelationReport {
    pub estimate: f64,
    pub std_error: f64,
    pub n: usize,
    pub analytic_cov: Option<f64>,
}

/// Spot/vol decorrelation report: the correlation estimate plus the two
/// moment checks that make the zero-covariance claim concrete.
#[derive(Debug, Clone, Copy)]
pub struct SpotVolReport {
    pub corr: CorrelationReport,
    /// Analytic E{sigma_mix^2(T, S_T) S_T} = s0 e^{R(T)} sum lambda nu^2(T).
    pub analytic_moment_sigma2_s: f64,
    /// Analytic E{sigma_mix^2(T, S_T)} = sum lambda nu^2(T).
    pub analytic_moment_sigma2: f64,
    /// Sample counterpart of `analytic_moment_sigma2_s` with its SE.
    pub sample_moment_sigma2_s: (f64, f64),
    /// Sample counterpart of `analytic_moment_sigma2` with its SE.
    pub sample_moment_sigma2: (f64, f64),
}

/// cov(component mean, component variance) under the mixing measure at time
/// t: sum lambda m_i sigma_i^2 - (sum lambda m_i)(sum lambda sigma_i^2),
/// the closed-form covariance behind the whole-line decorrelation result.
/// Zero when all component means agree.
pub fn normal_mixture_covariance(spec: &MixtureSpec, t: f64) -> Result<f64> {
    if spec.support() != Support::WholeLine {
        return Err(ModelError::UnsupportedMode(
            "normal_mixture_covariance requires a whole-line mixture".into(),
        ));
    }
    if !(t > 0.0) {
        return Err(ModelError::InvalidInput(format!("need t > 0, got {t}")));
    }
    let comps = match spec.components() {
        ComponentSet::Normal(cs) => cs,
        _ => unreachable!("whole-line support validated above"),
    };
    let lam = spec.weights();
    let (mut em, mut ev, mut emv) = (0.0, 0.0, 0.0);
    for (l, c) in lam.iter().zip(comps) {
        let m = c.drift.integral(t)?;
        let s = c.vol.level(t);
        em += l * m;
        ev += l * s * s;
        emv += l * m * s * s;
    }
    Ok(emv - em * ev)
}

fn ensemble_is_from_origin(ensemble: &PathEnsemble, model: &LocalVolModel) -> Result<()> {
    if ensemble.t_start != 0.0 || (ensemble.s_start - model.spec.s0()).abs() > 1e-12 {
        return Err(ModelError::InvalidInput(
            "this check needs an ensemble simulated from (0, s0)".into(),
        ));
    }
    Ok(())
}

/// Correlation of (S_T, sigma_mix^2(T, S_T)) on a terminal sample, with the
/// analytic zero covariance and the two moment identities attached.
pub fn terminal_corr_spot_vol(
    ensemble: &PathEnsemble,
    model: &LocalVolModel,
    t_horizon: f64,
) -> Result<SpotVolReport> {
    if model.mode != Mode::LognormalMixture {
        return Err(ModelError::UnsupportedMode("spot/vol check requires lognormal mode".into()));
    }
    if model.spec.m() == 1 {
        return Err(ModelError::Domain(
            "sigma_mix^2 is deterministic for a single component; correlation undefined".into(),
        ));
    }
    ensemble_is_from_origin(ensemble, model)?;
    let horizon = *ensemble.grid.last().expect("non-empty grid");
    if (horizon - t_horizon).abs() > 1e-9 {
        return Err(ModelError::InvalidInput(format!(
            "ensemble horizon {horizon} does not match requested T = {t_horizon}"
        )));
    }
    let spots = ensemble.terminal();
    let mut vols = Vec::with_capacity(spots.len());
    for &s in spots {
        vols.push(sigma_mix_squared(model, t_horizon, s)?);
    }
    let (estimate, std_error) = correlation(spots, &vols)?;
    let nus = model.spec.vol_levels(t_horizon);
    let sum_lam_nu2: f64 =
        model.spec.weights().iter().zip(&nus).map(|(l, nu)| l * nu * nu).sum();
    let fwd = model.spec.s0() * model.curve.drift_integral(0.0, t_horizon)?.exp();
    let products: Vec<f64> = spots.iter().zip(&vols).map(|(s, v)| s * v).collect();
    Ok(SpotVolReport {
        corr: CorrelationReport {
            estimate,
            std_error,
            n: spots.len(),
            analytic_cov: Some(0.0),
        },
        analytic_moment_sigma2_s: fwd * sum_lam_nu2,
        analytic_moment_sigma2: sum_lam_nu2,
        sample_moment_sigma2_s: mean_se(&products)?,
        sample_moment_sigma2: mean_se(&vols)?,
    })
}

/// Correlation of (S_T, v(T)) where v is the ensemble's accumulated variance
/// integral; serves local-vol and uncertain-vol ensembles alike.
pub fn terminal_corr_avg_variance(ensemble: &PathEnsemble) -> Result<CorrelationReport> {
    let spots = ensemble.terminal();
    let vs = ensemble.terminal_avg_variance();
    let (estimate, std_error) = correlation(spots, vs)?;
    Ok(CorrelationReport { estimate, std_error, n: spots.len(), analytic_cov: Some(0.0) })
}

/// Limit correlation of (dS_t, d sigma_mix^2(t, S_t)): both increments are
/// driven by the same Brownian motion, so the value is sign(d sigma^2/dy)
/// where the slope is nonzero and undefined (None) where it vanishes.
pub fn instantaneous_corr_check(model: &LocalVolModel, t: f64, y: f64) -> Result<Option<f64>> {
    let slope = dsigma_mix2_dy(model, t, y)?;
    let scale = sigma_mix_squared(model, t, y)? / y;
    if slope.abs() <= 1e-10 * scale.max(1e-300) {
        return Ok(None);
    }
    Ok(Some(slope.signum()))
}

/// Finite-step Monte Carlo estimate of the instantaneous correlation: one
/// Euler step of length dt from (t, y), correlating dS against the resulting
/// change in sigma_mix^2. Converges to the symbolic value as dt -> 0.
pub fn instantaneous_corr_mc(
    model: &LocalVolModel,
    t: f64,
    y: f64,
    dt: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Option<f64>> {
    if !(dt > 0.0) || n_samples < 3 {
        return Err(ModelError::InvalidInput("need dt > 0 and n_samples >= 3".into()));
    }
    if instantaneous_corr_check(model, t, y)?.is_none() {
        return Ok(None);
    }
    let s2 = sigma_mix_squared(model, t, y)?;
    let r = model.curve.drift_rate(t)?;
    let mut rr = rng::path_rng(seed, 0);
    let mut ds = Vec::with_capacity(n_samples);
    let mut dsig = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let z = rng::standard_normal(&mut rr);
        let step = r * y * dt + s2.sqrt() * y * dt.sqrt() * z;
        ds.push(step);
        dsig.push(sigma_mix_squared(model, t + dt, y + step)? - s2);
    }
    let (est, _) = correlation(&ds, &dsig)?;
    Ok(Some(est))
}

/// Bayes identity of the uncertain-volatility model: the posterior scenario
/// probabilities at (t, x) are the mixture weights Lambda_k(t, x), and the
/// posterior second moment sum_k Lambda_k nu_k(t)^2 is the local variance.
pub fn posterior_weights_check(
    model: &LocalVolModel,
    t: f64,
    x: f64,
) -> Result<(Vec<f64>, f64)> {
    if model.mode != Mode::LognormalMixture {
        return Err(ModelError::UnsupportedMode("posterior check requires lognormal mode".into()));
    }
    let posterior = lambda_weights(&model.spec, &model.curve, t, x)?;
    let nus = model.spec.vol_levels(t);
    let conditional_var = posterior.iter().zip(&nus).map(|(p, nu)| p * nu * nu).sum();
    Ok((posterior, conditional_var))
}

/// Kernel-smoothed scenario-label frequencies near x from an
/// uncertain-volatility ensemble: (frequencies, standard errors). Bandwidth
/// defaults to Silverman's rule on the terminal sample.
pub fn posterior_label_frequencies(
    ensemble: &PathEnsemble,
    x: f64,
    m: usize,
    bandwidth: Option<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let labels = ensemble.scenario_labels.as_ref().ok_or_else(|| {
        ModelError::InvalidInput("ensemble carries no scenario labels".into())
    })?;
    let spots = ensemble.terminal();
    let h = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => return Err(ModelError::InvalidInput(format!("bandwidth {h} not positive"))),
        None => silverman_bandwidth(spots)?,
    };
    let mut wsum = 0.0;
    let mut w2sum = 0.0;
    let mut wk = vec![0.0; m];
    for (&s, &l) in spots.iter().zip(labels) {
        if l >= m {
            return Err(ModelError::InvalidInput(format!("label {l} out of range (m = {m})")));
        }
        let w = norm_pdf((s - x) / h);
        wsum += w;
        w2sum += w * w;
        wk[l] += w;
    }
    if wsum <= 0.0 {
        return Err(ModelError::Numerical(format!("no sample mass near x = {x}")));
    }
    let n_eff = wsum * wsum / w2sum;
    let freqs: Vec<f64> = wk.iter().map(|w| w / wsum).collect();
    let ses = freqs.iter().map(|f| (f * (1.0 - f) / n_eff).sqrt()).collect();
    Ok((freqs, ses))
}

/// Zero-covariance identity independent of Monte Carlo: quadrature of
/// E{sigma^2 S} - E{sigma^2} E{S} against the closed-form density. Returns
/// the covariance, which should vanish to quadrature accuracy.
pub fn zero_covariance_quadrature(model: &LocalVolModel, t: f64) -> Result<f64> {
    if model.mode != Mode::LognormalMixture {
        return Err(ModelError::UnsupportedMode("quadrature check requires lognormal mode".into()));
    }
    let params = model.spec.component_params(&model.curve, t)?;
    let lo = params
        .iter()
        .map(|&(m, v2)| m - 8.5 * v2.sqrt())
        .fold(f64::INFINITY, f64::min)
        .exp();
    let hi = params
        .iter()
        .map(|&(m, v2)| m + 8.5 * v2.sqrt())
        .fold(f64::NEG_INFINITY, f64::max)
        .exp();
    let p = |y: f64| mixture_density(&model.spec, &model.curve, t, y).expect("y > 0 on range");
    let s2 = |y: f64| sigma_mix_squared(model, t, y).expect("y > 0 on range");
    let (e_s2_s, _) = quad::integrate(&|y| s2(y) * y * p(y), lo, hi, 1e-12)?;
    let (e_s2, _) = quad::integrate(&|y| s2(y) * p(y), lo, hi, 1e-12)?;
    let (e_s, _) = quad::integrate(&|y| y * p(y), lo, hi, 1e-12)?;
    Ok(e_s2_s - e_s2 * e_s)
}

/// One row of the moment-ODE verification.
#[derive(Debug, Clone, Copy)]
pub struct OdeCheckRow {
    pub t: f64,
    pub mc_mean: f64,
    pub mc_se: f64,
    pub analytic: f64,
}

/// The moment C_t = E{v(t) S_t} solves C' = r C + A with
/// A_u = E{sigma_mix^2(u, S_u) S_u}, giving
/// C_t = e^{R(t)} int_0^t e^{-R(u)} A_u du. The integral is evaluated by
/// quadrature with the analytic A_u = s0 e^{R(u)} sum lambda nu^2(u) and
/// compared against the simulated E{v(t) S_t} at every recorded time.
pub fn avg_variance_ode_check(
    ensemble: &PathEnsemble,
    model: &LocalVolModel,
) -> Result<Vec<OdeCheckRow>> {
    if model.mode != Mode::LognormalMixture {
        return Err(ModelError::UnsupportedMode("ODE check requires lognormal mode".into()));
    }
    ensemble_is_from_origin(ensemble, model)?;
    let s0 = model.spec.s0();
    let lam = model.spec.weights().to_vec();
    let mut rows = Vec::with_capacity(ensemble.grid.len());
    for (j, &t) in ensemble.grid.iter().enumerate() {
        let spots = &ensemble.paths[j];
        let vs = &ensemble.avg_variance[j];
        let products: Vec<f64> = spots.iter().zip(vs).map(|(s, v)| s * v).collect();
        let (mc_mean, mc_se) = mean_se(&products)?;
        let integrand = |u: f64| -> f64 {
            let nus = model.spec.vol_levels(u);
            s0 * lam.iter().zip(&nus).map(|(l, nu)| l * nu * nu).sum::<f64>()
        };
        let (integral, _) = quad::integrate(&integrand, 0.0, t, 1e-12)?;
        let analytic = model.curve.drift_integral(0.0, t)?.exp() * integral;
        rows.push(OdeCheckRow { t, mc_mean, mc_se, analytic });
    }
    Ok(rows)
}

/// Terminal density from the forward equation plus run diagnostics.
#[derive(Debug, Clone)]
pub struct FokkerPlanckResult {
    /// Density on the input grid, in the grid's own units (per level in
    /// lognormal mode, per state unit in normal mode).
    pub density: Vec<f64>,
    /// Discrete mass at t_end minus mass at t_start (h * sum q).
    pub mass_drift: f64,
    pub min_density: f64,
    pub steps: usize,
}

/// Level grid uniform in log space: n points covering
/// center * e^{+-half_width}.
pub fn log_uniform_grid(center: f64, half_width: f64, n: usize) -> Result<Vec<f64>> {
    if !(center > 0.0) || !(half_width > 0.0) || n < 2 {
        return Err(ModelError::InvalidInput(
            "log grid needs center > 0, half_width > 0, n >= 2".into(),
        ));
    }
    let xc = center.ln();
    let h = 2.0 * half_width / (n - 1) as f64;
    Ok((0..n).map(|j| (xc - half_width + h * j as f64).exp()).collect())
}

/// Mass outside [lo, hi] at time t under the closed-form mixture.
fn mass_outside(model: &LocalVolModel, t: f64, lo: f64, hi: f64) -> Result<f64> {
    Ok(mixture_cdf(&model.spec, &model.curve, t, lo)?
        + (1.0 - mixture_cdf(&model.spec, &model.curve, t, hi)?))
}

/// Evolve the forward (Fokker-Planck) equation for the mixture-tracking SDE
/// from t_start = 2 epsilon (initial condition: the closed-form mixture) to
/// t_end, and return the density on the input grid.
///
/// Lognormal mode expects a geometric grid (uniform in log level) and solves
/// for the log-state density q(x, t):
///   dq/dt = -d/dx[(r - sigma^2/2) q] + 1/2 d^2/dx^2[sigma^2 q],
/// in conservative interface-flux form with zero-flux boundaries, so the
/// discrete mass h * sum(q) is exactly invariant. Normal mode solves the
/// analogous equation in the state coordinate on a uniform grid. Startup is
/// four implicit-Euler half-steps (the initial density has steep curvature),
/// then Crank-Nicolson with a step ramping from t_start/40 up to 1e-3.
pub fn fokker_planck_evolve(
    model: &LocalVolModel,
    grid: &[f64],
    t_end: f64,
) -> Result<FokkerPlanckResult> {
    let spec = &model.spec;
    let eps = spec.epsilon();
    if !(eps > 0.0) {
        return Err(ModelError::InvalidInput(
            "forward evolution starts from t = 2 epsilon; epsilon must be positive".into(),
        ));
    }
    let t_start = 2.0 * eps;
    if !(t_end > t_start) {
        return Err(ModelError::InvalidInput(format!(
            "t_end = {t_end} must exceed t_start = {t_start}"
        )));
    }
    let n = grid.len();
    if n < 50 {
        return Err(ModelError::InvalidInput(format!("grid too coarse ({n} points)")));
    }
    // Transform to the solver coordinate and validate uniformity.
    let x: Vec<f64> = match model.mode {
        Mode::LognormalMixture => {
            if grid[0] <= 0.0 {
                return Err(ModelError::InvalidInput("lognormal mode needs a positive grid".into()));
            }
            grid.iter().map(|&y| y.ln()).collect()
        }
        Mode::NormalMixture => grid.to_vec(),
    };
    let h = (x[n - 1] - x[0]) / (n - 1) as f64;
    if !(h > 0.0) {
        return Err(ModelError::InvalidInput("grid must be strictly increasing".into()));
    }
    for j in 0..n - 1 {
        if ((x[j + 1] - x[j]) - h).abs() > 1e-9 * h {
            return Err(ModelError::InvalidInput(
                "grid must be uniform in the solver coordinate (geometric in level for the \
                 lognormal family)"
                    .into(),
            ));
        }
    }
    // Coverage: at least 99.99% of closed-form mass inside the grid at both
    // ends of the run (diffusion makes interior times no worse).
    for &t in &[t_start, t_end] {
        let outside = mass_outside(model, t, grid[0], grid[n - 1])?;
        if outside > 1e-4 {
            return Err(ModelError::InvalidInput(format!(
                "grid covers too little mass at t = {t}: {outside:.2e} outside (limit 1e-4)"
            )));
        }
    }
    // Resolvability: the narrowest component at t_start must span a few
    // cells or the initial spike aliases onto the grid.
    let params0 = spec.component_params(&model.curve, t_start)?;
    let v_min = params0.iter().map(|&(_, v2)| v2.sqrt()).fold(f64::INFINITY, f64::min);
    if v_min < 1.5 * h {
        return Err(ModelError::Numerical(format!(
            "initial density too narrow for this grid: component sd {v_min:.3e} < 1.5 h = \
             {:.3e}; refine the grid or increase epsilon",
            1.5 * h
        )));
    }
    // Initial condition in the solver coordinate.
    let mut q = Vec::with_capacity(n);
    for j in 0..n {
        let d = match model.mode {
            Mode::LognormalMixture => mixture_density_logspace(spec, &model.curve, t_start, x[j])?,
            Mode::NormalMixture => mixture_density(spec, &model.curve, t_start, x[j])?,
        };
        q.push(d);
    }
    let mass0 = h * q.iter().sum::<f64>();

    // Interface midpoints for the advective flux.
    let xm: Vec<f64> = (0..n - 1).map(|j| 0.5 * (x[j] + x[j + 1])).collect();
    // Tridiagonal generator A(t): dq/dt = A q, assembled from interface
    // fluxes F_{j+1/2} = b_{j+1/2}(q_j + q_{j+1})/2 - (d_{j+1}q_{j+1} -
    // d_j q_j)/h with F = 0 at the outer interfaces; column sums telescope
    // to zero, which is what conserves h * sum(q).
    let build = |t: f64, lo: &mut [f64], di: &mut [f64], up: &mut [f64]| -> Result<()> {
        let (b_mid, d_nod) = coefficient_rows(model, t, &xm, &x)?;
        lo.fill(0.0);
        di.fill(0.0);
        up.fill(0.0);
        for j in 0..n - 1 {
            let adv = 0.5 * b_mid[j] / h;
            let dif_l = d_nod[j] / (h * h);
            let dif_r = d_nod[j + 1] / (h * h);
            // Right interface of row j.
            di[j] += -adv - dif_l;
            up[j] += -adv + dif_r;
            // Left interface of row j+1.
            di[j + 1] += adv - dif_r;
            lo[j + 1] += adv + dif_l;
        }
        Ok(())
    };
    let mut lo = vec![0.0; n];
    let mut di = vec![0.0; n];
    let mut up = vec![0.0; n];
    let mut sl = vec![0.0; n];
    let mut sd = vec![0.0; n];
    let mut su = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let mut steps = 0usize;
    let mut u = t_start;
    let dt0 = t_start / 40.0;
    let mut step_once = |theta: f64,
                         dt: f64,
                         t_matrix: f64,
                         q: &mut Vec<f64>,
                         lo: &mut Vec<f64>,
                         di: &mut Vec<f64>,
                         up: &mut Vec<f64>|
     -> Result<()> {
        build(t_matrix, lo, di, up)?;
        for j in 0..n {
            // Explicit part (I + (1-theta) dt A) q.
            let mut v = (1.0 + (1.0 - theta) * dt * di[j]) * q[j];
            if j > 0 {
                v += (1.0 - theta) * dt * lo[j] * q[j - 1];
            }
            if j + 1 < n {
                v += (1.0 - theta) * dt * up[j] * q[j + 1];
            }
            rhs[j] = v;
            sl[j] = -theta * dt * lo[j];
            sd[j] = 1.0 - theta * dt * di[j];
            su[j] = -theta * dt * up[j];
        }
        tridiag::solve(&sl[1..], &sd, &su[..n - 1], &mut rhs)?;
        q.copy_from_slice(&rhs);
        steps += 1;
        let mut qmax: f64 = 0.0;
        let mut qmin: f64 = f64::INFINITY;
        for &v in q.iter() {
            qmax = qmax.max(v);
            qmin = qmin.min(v);
        }
        if qmin < -1e-7 * qmax {
            return Err(ModelError::Numerical(format!(
                "oscillation detected at t = {:.6}: min density {qmin:.3e} vs max {qmax:.3e}; \
                 refine the time step or grid",
                t_matrix
            )));
        }
        Ok(())
    };
    // Rannacher startup damps the high-frequency content of the narrow
    // initial condition that Crank-Nicolson would preserve.
    for _ in 0..4 {
        let dt = 0.5 * dt0;
        step_once(1.0, dt, u + dt, &mut q, &mut lo, &mut di, &mut up)?;
        u += dt;
    }
    while u < t_end - 1e-13 {
        let dt = (t_end - u).min(1e-3f64.min((u / 20.0).max(dt0)));
        step_once(0.5, dt, u + 0.5 * dt, &mut q, &mut lo, &mut di, &mut up)?;
        u += dt;
    }
    let mass = h * q.iter().sum::<f64>();
    let mass_drift = mass - mass0;
    if mass_drift.abs() > 1e-6 * mass0.max(1e-12) {
        return Err(ModelError::Numerical(format!(
            "mass drifted by {mass_drift:.3e} over the run (limit 1e-6 relative)"
        )));
    }
    let min_density = q.iter().copied().fold(f64::INFINITY, f64::min);
    let density = match model.mode {
        Mode::LognormalMixture => q.iter().zip(grid).map(|(&qq, &y)| qq / y).collect(),
        Mode::NormalMixture => q,
    };
    Ok(FokkerPlanckResult { density, mass_drift, min_density, steps })
}

/// Advection at interfaces and diffusion at nodes for the forward equation
/// at time t, in the solver coordinate.
fn coefficient_rows(
    model: &LocalVolModel,
    t: f64,
    xm: &[f64],
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let spec = &model.spec;
    let params = spec.component_params(&model.curve, t)?;
    let log_lam: Vec<f64> = spec.weights().iter().map(|l| l.ln()).collect();
    match model.mode {
        Mode::LognormalMixture => {
            let nus = spec.vol_levels(t);
            let nu2: Vec<f64> = nus.iter().map(|nu| nu * nu).collect();
            let sig2_at = |xx: f64| -> f64 {
                mix_convex_logspace(&params, &log_lam, &nu2, xx)
            };
            let r = model.curve.drift_rate(t)?;
            let b_mid = xm.iter().map(|&xx| r - 0.5 * sig2_at(xx)).collect();
            let d_nod = x.iter().map(|&xx| 0.5 * sig2_at(xx)).collect();
            Ok((b_mid, d_nod))
        }
        Mode::NormalMixture => {
            let comps = match spec.components() {
                ComponentSet::Normal(cs) => cs,
                _ => unreachable!("normal mode validated at construction"),
            };
            let mus: Vec<f64> = comps.iter().map(|c| c.drift.value(t)).collect();
            let sig2: Vec<f64> = comps.iter().map(|c| c.vol.level(t).powi(2)).collect();
            let b_mid = xm
                .iter()
                .map(|&xx| mix_convex_logspace(&params, &log_lam, &mus, xx))
                .collect();
            let d_nod = x
                .iter()
                .map(|&xx| 0.5 * mix_convex_logspace(&params, &log_lam, &sig2, xx))
                .collect();
            Ok((b_mid, d_nod))
        }
    }
}

/// Lambda-weighted convex combination of per-component values at solver
/// state xx, with the weights computed by stable softmax over the component
/// log densities.
fn mix_convex_logspace(
    params: &[(f64, f64)],
    log_lam: &[f64],
    values: &[f64],
    xx: f64,
) -> f64 {
    let m = params.len();
    let mut amax = f64::NEG_INFINITY;
    let mut logs = [0.0f64; 8];
    for i in 0..m {
        let (mean, v2) = params[i];
        let z2 = (xx - mean) * (xx - mean) / v2;
        let a = log_lam[i] - 0.5 * v2.ln() - 0.5 * z2;
        logs[i] = a;
        if a > amax {
            amax = a;
        }
    }
    let (mut wsum, mut acc) = (0.0, 0.0);
    for i in 0..m {
        let w = (logs[i] - amax).exp();
        wsum += w;
        acc += w * values[i];
    }
    acc / wsum
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_model::{DriftCurve, GaussianComponent, VolCurve, YieldCurve};
    use crate::simulation::{simulate_local_vol, simulate_uncertain_vol, Scheme, SimConfig};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn fx_curve() -> YieldCurve {
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

    fn calibrated_model() -> LocalVolModel {
        let spec = MixtureSpec::lognormal(
            vec![0.970532, 0.029468],
            vec![VolCurve::constant(0.089281).unwrap(), VolCurve::constant(0.707406).unwrap()],
            1.07,
            1e-4,
        )
        .unwrap();
        LocalVolModel::lognormal(spec, fx_curve()).unwrap()
    }

    fn fp_model(eps: f64) -> LocalVolModel {
        let spec = MixtureSpec::lognormal(
            vec![0.970532, 0.029468],
            vec![VolCurve::constant(0.089281).unwrap(), VolCurve::constant(0.707406).unwrap()],
            1.07,
            eps,
        )
        .unwrap();
        LocalVolModel::lognormal(spec, fx_curve()).unwrap()
    }

    #[test]
    fn normal_covariance_hand_value() {
        // lambda = (1/2, 1/2), means (1, -1), variances (1, 4) at t = 1:
        // cov = 0.5*1*1 + 0.5*(-1)*4 - 0 * 2.5 = -1.5.
        let comps = vec![
            GaussianComponent::new(DriftCurve::constant(1.0), VolCurve::constant(1.0).unwrap()),
            GaussianComponent::new(DriftCurve::constant(-1.0), VolCurve::constant(2.0).unwrap()),
        ];
        let spec = MixtureSpec::normal(vec![0.5, 0.5], comps, 0.0).unwrap();
        assert_relative_eq!(normal_mixture_covariance(&spec, 1.0).unwrap(), -1.5);
    }

    #[test]
    fn normal_covariance_degenerate_cases() {
        let comps = vec![
            GaussianComponent::new(DriftCurve::constant(0.07), VolCurve::constant(0.1).unwrap()),
            GaussianComponent::new(DriftCurve::constant(0.07), VolCurve::constant(0.9).unwrap()),
        ];
        let spec = MixtureSpec::normal(vec![0.4, 0.6], comps, 0.0).unwrap();
        assert_abs_diff_eq!(normal_mixture_covariance(&spec, 2.5).unwrap(), 0.0, epsilon = 1e-15);
        let single = vec![GaussianComponent::new(
            DriftCurve::constant(0.05),
            VolCurve::constant(0.3).unwrap(),
        )];
        let spec1 = MixtureSpec::normal(vec![1.0], single, 0.0).unwrap();
        assert_abs_diff_eq!(normal_mixture_covariance(&spec1, 1.0).unwrap(), 0.0);
    }

    fn lv_ensemble(n: usize, dt: f64, seed: u64) -> (LocalVolModel, crate::simulation::PathEnsemble) {
        let m = calibrated_model();
        let cfg = SimConfig::new(n, dt, Scheme::EulerLog, seed, 0.0, 1.07, 1.0).unwrap();
        let ens = simulate_local_vol(&m, &cfg).unwrap();
        (m, ens)
    }

    #[test]
    fn spot_vol_correlation_vanishes() {
        // Fine dt: sigma^2 functionals of the terminal state converge slowly
        // in the weak sense (the early-time weight transition is sharp).
        let (m, ens) = lv_ensemble(30_000, 5e-4, 101);
        let rep = terminal_corr_spot_vol(&ens, &m, 1.0).unwrap();
        assert!(
            rep.corr.estimate.abs() < 3.0 * rep.corr.std_error,
            "corr {} vs se {}",
            rep.corr.estimate,
            rep.corr.std_error
        );
        assert_eq!(rep.corr.analytic_cov, Some(0.0));
        let (mean, se) = rep.sample_moment_sigma2_s;
        assert!(
            (mean - rep.analytic_moment_sigma2_s).abs() < 3.0 * se,
            "E(sigma2 S): {mean} vs {}",
            rep.analytic_moment_sigma2_s
        );
        let (mean2, se2) = rep.sample_moment_sigma2;
        assert!(
            (mean2 - rep.analytic_moment_sigma2).abs() < 3.0 * se2,
            "E(sigma2): {mean2} vs {}",
            rep.analytic_moment_sigma2
        );
    }

    #[test]
    fn spot_vol_single_component_rejected() {
        let spec =
            MixtureSpec::lognormal(vec![1.0], vec![VolCurve::constant(0.2).unwrap()], 1.07, 0.0)
                .unwrap();
        let m = LocalVolModel::lognormal(spec, fx_curve()).unwrap();
        let cfg = SimConfig::new(100, 0.1, Scheme::EulerLog, 1, 0.0, 1.07, 1.0).unwrap();
        let ens = simulate_local_vol(&m, &cfg).unwrap();
        assert!(terminal_corr_spot_vol(&ens, &m, 1.0).is_err());
    }

    #[test]
    fn avg_variance_correlation_vanishes_lv_and_uv() {
        let (m, ens) = lv_ensemble(30_000, 0.01, 103);
        let rep = terminal_corr_avg_variance(&ens).unwrap();
        assert!(
            rep.estimate.abs() < 3.0 * rep.std_error,
            "lv: corr {} vs se {}",
            rep.estimate,
            rep.std_error
        );
        let cfg = SimConfig::new(30_000, 0.01, Scheme::EulerLog, 104, 0.0, 1.07, 1.0).unwrap();
        let uv = simulate_uncertain_vol(&m, &cfg).unwrap();
        let rep = terminal_corr_avg_variance(&uv).unwrap();
        assert!(
            rep.estimate.abs() < 3.0 * rep.std_error,
            "uv: corr {} vs se {}",
            rep.estimate,
            rep.std_error
        );
    }

    #[test]
    fn avg_variance_degenerate_for_gbm() {
        let spec =
            MixtureSpec::lognormal(vec![1.0], vec![VolCurve::constant(0.2).unwrap()], 1.07, 0.0)
                .unwrap();
        let m = LocalVolModel::lognormal(spec, fx_curve()).unwrap();
        let cfg = SimConfig::new(200, 0.1, Scheme::EulerLog, 5, 0.0, 1.07, 1.0).unwrap();
        let ens = simulate_local_vol(&m, &cfg).unwrap();
        assert!(terminal_corr_avg_variance(&ens).is_err());
    }

    #[test]
    fn instantaneous_corr_is_plus_minus_one() {
        let m = calibrated_model();
        // sigma_mix^2 has a trough near the forward: negative slope on the
        // left wing, positive on the right.
        assert_eq!(instantaneous_corr_check(&m, 1.0, 0.8).unwrap(), Some(-1.0));
        assert_eq!(instantaneous_corr_check(&m, 1.0, 1.5).unwrap(), Some(1.0));
    }

    #[test]
    fn instantaneous_corr_undefined_for_single_component() {
        let spec =
            MixtureSpec::lognormal(vec![1.0], vec![VolCurve::constant(0.2).unwrap()], 1.07, 0.0)
                .unwrap();
        let m = LocalVolModel::lognormal(spec, fx_curve()).unwrap();
        assert_eq!(instantaneous_corr_check(&m, 1.0, 1.07).unwrap(), None);
    }

    #[test]
    fn instantaneous_corr_mc_approaches_limit() {
        let m = calibrated_model();
        for &(y, want) in &[(0.85, -1.0), (1.4, 1.0)] {
            let est = instantaneous_corr_mc(&m, 1.0, y, 1e-6, 20_000, 7).unwrap().unwrap();
            assert!((est - want).abs() < 0.01, "y = {y}: MC corr {est} vs {want}");
        }
    }

    #[test]
    fn posterior_identity_on_grid() {
        let m = calibrated_model();
        for &t in &[0.3, 1.0, 2.7] {
            for &x in &[0.6, 0.95, 1.07, 1.3, 1.9] {
                let (post, cvar) = posterior_weights_check(&m, t, x).unwrap();
                let lw = lambda_weights(&m.spec, &m.curve, t, x).unwrap();
                for (a, b) in post.iter().zip(&lw) {
                    assert_abs_diff_eq!(a, b, epsilon = 1e-15);
                }
                let s2 = sigma_mix_squared(&m, t, x).unwrap();
                assert_abs_diff_eq!(cvar, s2, epsilon = 1e-12);
                assert_abs_diff_eq!(post.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn posterior_is_prior_before_epsilon() {
        let m = calibrated_model();
        let (post, _) = posterior_weights_check(&m, 0.5e-4, 1.07).unwrap();
        assert_abs_diff_eq!(post[0], 0.970532, epsilon = 1e-15);
        assert_abs_diff_eq!(post[1], 0.029468, epsilon = 1e-15);
    }

    #[test]
    fn posterior_mc_frequencies_match_lambda() {
        let m = calibrated_model();
        let cfg = SimConfig::new(60_000, 0.01, Scheme::EulerLog, 211, 0.0, 1.07, 1.0).unwrap();
        let ens = simulate_uncertain_vol(&m, &cfg).unwrap();
        for &x in &[1.0, 1.07, 1.15] {
            let (freqs, ses) = posterior_label_frequencies(&ens, x, 2, None).unwrap();
            let lw = lambda_weights(&m.spec, &m.curve, 1.0, x).unwrap();
            for k in 0..2 {
                assert!(
                    (freqs[k] - lw[k]).abs() < 3.0 * ses[k] + 5e-3,
                    "x = {x}, k = {k}: freq {} vs Lambda {}, se {}",
                    freqs[k],
                    lw[k],
                    ses[k]
                );
            }
        }
    }

    #[test]
    fn zero_covariance_by_quadrature() {
        let m = calibrated_model();
        for &t in &[0.5, 1.0, 3.0] {
            let cov = zero_covariance_quadrature(&m, t).unwrap();
            assert_abs_diff_eq!(cov, 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn moment_ode_verified_against_mc() {
        // The uncertain-volatility engine shares the marginal law and uses
        // exact transitions, so the ODE identity is tested free of Euler
        // weak error; only sampling noise remains.
        let m = calibrated_model();
        let cfg = SimConfig::new(30_000, 0.01, Scheme::EulerLog, 301, 0.0, 1.07, 1.0)
            .unwrap()
            .with_record_times(vec![0.25, 0.5, 0.75, 1.0])
            .unwrap();
        let ens = simulate_uncertain_vol(&m, &cfg).unwrap();
        for row in avg_variance_ode_check(&ens, &m).unwrap() {
            assert!(
                (row.mc_mean - row.analytic).abs() < 3.0 * row.mc_se,
                "t = {}: MC {} vs analytic {}, se {}",
                row.t,
                row.mc_mean,
                row.analytic,
                row.mc_se
            );
        }
    }

    #[test]
    fn fokker_planck_gbm_matches_analytic() {
        let spec =
            MixtureSpec::lognormal(vec![1.0], vec![VolCurve::constant(0.10).unwrap()], 1.07, 5e-3)
                .unwrap();
        let m = LocalVolModel::lognormal(spec, fx_curve()).unwrap();
        let grid = log_uniform_grid(1.07, 0.55, 800).unwrap();
        let res = fokker_planck_evolve(&m, &grid, 1.0).unwrap();
        let mut l1 = 0.0;
        for (j, &y) in grid.iter().enumerate() {
            let want = mixture_density(&m.spec, &m.curve, 1.0, y).unwrap();
            // L1 in the log coordinate: |q - q_exact| h = |p - p_exact| y h.
            l1 += (res.density[j] - want).abs() * y;
        }
        l1 *= (grid[1] / grid[0]).ln();
        assert!(l1 < 1e-4, "GBM L1 = {l1}");
        assert!(res.mass_drift.abs() < 1e-6, "mass drift {}", res.mass_drift);
    }

    #[test]
    fn fokker_planck_mixture_matches_closed_form() {
        let m = fp_model(5e-3);
        let grid = log_uniform_grid(1.07, 2.0, 1200).unwrap();
        let res = fokker_planck_evolve(&m, &grid, 0.5).unwrap();
        let mut l1 = 0.0;
        for (j, &y) in grid.iter().enumerate() {
            let want = mixture_density(&m.spec, &m.curve, 0.5, y).unwrap();
            l1 += (res.density[j] - want).abs() * y;
        }
        l1 *= (grid[1] / grid[0]).ln();
        // Oracle value for this exact configuration: 2.1e-4.
        assert!(l1 < 1e-3, "mixture L1 = {l1}");
        assert!(res.mass_drift.abs() < 1e-6, "mass drift {}", res.mass_drift);
        assert!(res.min_density > -1e-10, "negative density {}", res.min_density);
    }

    #[test]
    fn fokker_planck_normal_mode() {
        let comps = vec![
            GaussianComponent::new(DriftCurve::constant(0.05), VolCurve::constant(0.15).unwrap()),
            GaussianComponent::new(DriftCurve::constant(-0.04), VolCurve::constant(0.4).unwrap()),
        ];
        let spec = MixtureSpec::normal(vec![0.7, 0.3], comps, 5e-3).unwrap();
        let m = LocalVolModel::normal(spec, fx_curve()).unwrap();
        let n = 1200;
        let (lo, hi) = (-2.2f64, 2.3f64);
        let grid: Vec<f64> =
            (0..n).map(|j| lo + (hi - lo) * j as f64 / (n - 1) as f64).collect();
        let res = fokker_planck_evolve(&m, &grid, 1.0).unwrap();
        let h = grid[1] - grid[0];
        let mut l1 = 0.0;
        for (j, &xx) in grid.iter().enumerate() {
            let want = mixture_density(&m.spec, &m.curve, 1.0, xx).unwrap();
            l1 += (res.density[j] - want).abs() * h;
        }
        assert!(l1 < 1e-3, "normal-mode L1 = {l1}");
    }

    #[test]
    fn fokker_planck_guards() {
        let m = fp_model(5e-3);
        // Narrow grid: coverage failure.
        let narrow = log_uniform_grid(1.07, 0.3, 400).unwrap();
        let err = fokker_planck_evolve(&m, &narrow, 1.0).unwrap_err();
        assert!(err.to_string().contains("covers too little"), "got: {err}");
        // Tiny epsilon: unresolvable initial spike on any reasonable grid.
        let tiny = fp_model(1e-4);
        let grid = log_uniform_grid(1.07, 2.3, 1000).unwrap();
        let err = fokker_planck_evolve(&tiny, &grid, 1.0).unwrap_err();
        assert!(err.to_string().contains("too narrow"), "got: {err}");
        // Non-geometric level grid.
        let n = 400;
        let bad: Vec<f64> =
            (0..n).map(|j| 0.4 + (2.6 - 0.4) * j as f64 / (n - 1) as f64).collect();
        let err = fokker_planck_evolve(&m, &bad, 1.0).unwrap_err();
        assert!(err.to_string().contains("uniform"), "got: {err}");
        // Epsilon zero: no startup time.
        let zero_eps = fp_model(0.0);
        let g2 = log_uniform_grid(1.07, 2.0, 1000).unwrap();
        assert!(fokker_planck_evolve(&zero_eps, &g2, 1.0).is_err());
    }
}
