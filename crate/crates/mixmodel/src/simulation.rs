//! Monte Carlo engines.
//!
//! Local-vol engine (lognormal mode, euler-log scheme):
//!   ln S_{k+1} = ln S_k + (r(t_k) - sigma_mix^2(t_k, S_k)/2) dt
//!                + sigma_mix(t_k, S_k) sqrt(dt) Z_k,
//! with level and Milstein variants on S itself. Normal mode evolves the
//! whole-line state directly: Y_{k+1} = Y_k + f dt + sigma_f sqrt(dt) Z.
//!
//! Uncertain-vol engine: one component index per path drawn from the mixture
//! weights at the start state (independent RNG stream), then exact GBM
//! transitions between recording times using interval variances, so the only
//! discretization is the recording grid itself.
//!
//! Every path owns two deterministic ChaCha substreams (Brownian and
//! scenario), so ensembles are bit-identical for a given seed regardless of
//! thread count.

use crate::error::{ModelError, Result};
use crate::local_vol::{LocalVolModel, Mode};
use crate::market_model::{lambda_weights, ComponentSet};
use rayon::prelude::*;
use std::str::FromStr;

/// Time-stepping scheme for the local-vol engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    EulerLog,
    EulerLevel,
    MilsteinLevel,
}

impl FromStr for Scheme {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler-log" => Ok(Scheme::EulerLog),
            "euler-level" => Ok(Scheme::EulerLevel),
            "milstein-level" => Ok(Scheme::MilsteinLevel),
            other => Err(ModelError::InvalidInput(format!(
                "unknown scheme '{other}' (expected euler-log, euler-level or milstein-level)"
            ))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::EulerLog => "euler-log",
            Scheme::EulerLevel => "euler-level",
            Scheme::MilsteinLevel => "milstein-level",
        })
    }
}

/// Simulation request: path count, step, scheme, seed, start state and
/// horizon. `record_times` are the grid-aligned times at which states are
/// kept; the horizon is always the last one.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub scheme: Scheme,
    pub seed: u64,
    pub t_start: f64,
    pub s_start: f64,
    pub horizon: f64,
    pub record_times: Vec<f64>,
}

/// Relative tolerance for "dt divides the interval exactly": grid counts are
/// rounded and must land within this of an integer.
const GRID_ALIGN_TOL: f64 = 1e-9;

fn aligned_steps(span: f64, dt: f64) -> Result<usize> {
    let raw = span / dt;
    let rounded = raw.round();
    if rounded < 1.0 || (raw - rounded).abs() > GRID_ALIGN_TOL * rounded.max(1.0) {
        return Err(ModelError::InvalidInput(format!(
            "dt = {dt} does not divide the interval {span} into a whole number of steps"
        )));
    }
    Ok(rounded as usize)
}

impl SimConfig {
    pub fn new(
        n_paths: usize,
        dt: f64,
        scheme: Scheme,
        seed: u64,
        t_start: f64,
        s_start: f64,
        horizon: f64,
    ) -> Result<Self> {
        if n_paths < 1 {
            return Err(ModelError::InvalidInput("need n_paths >= 1".into()));
        }
        if !(dt > 0.0) {
            return Err(ModelError::InvalidInput(format!("need dt > 0, got {dt}")));
        }
        if !(t_start >= 0.0) || !(horizon > t_start) {
            return Err(ModelError::InvalidInput(format!(
                "need 0 <= t_start < horizon, got t_start = {t_start}, horizon = {horizon}"
            )));
        }
        if !s_start.is_finite() {
            return Err(ModelError::InvalidInput(format!("start state {s_start} not finite")));
        }
        aligned_steps(horizon - t_start, dt)?;
        Ok(Self {
            n_paths,
            dt,
            scheme,
            seed,
            t_start,
            s_start,
            horizon,
            record_times: vec![horizon],
        })
    }

    /// Replace the recording times. They must be strictly increasing,
    /// grid-aligned, inside (t_start, horizon], and end at the horizon.
    pub fn with_record_times(mut self, times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(ModelError::InvalidInput("need at least one recording time".into()));
        }
        let mut prev = self.t_start;
        for &tau in &times {
            if tau <= prev {
                return Err(ModelError::InvalidInput(
                    "recording times must be strictly increasing and after t_start".into(),
                ));
            }
            aligned_steps(tau - self.t_start, self.dt)?;
            prev = tau;
        }
        if (times[times.len() - 1] - self.horizon).abs() > GRID_ALIGN_TOL {
            return Err(ModelError::InvalidInput(
                "last recording time must equal the horizon".into(),
            ));
        }
        self.record_times = times;
        Ok(self)
    }

    fn n_steps(&self) -> usize {
        aligned_steps(self.horizon - self.t_start, self.dt).expect("validated at construction")
    }

    /// Step indices (1-based within the grid) at which states are recorded.
    fn record_steps(&self) -> Vec<usize> {
        self.record_times
            .iter()
            .map(|&tau| {
                aligned_steps(tau - self.t_start, self.dt).expect("validated at construction")
            })
            .collect()
    }
}

/// Simulated ensemble. `paths[j][p]` is the state of path p at `grid[j]`
/// (levels in lognormal mode, whole-line states in normal mode);
/// `avg_variance[j][p]` is the accumulated integral of instantaneous
/// variance from t_start to grid[j] (divide by elapsed time for the average
/// percentage variance), non-decreasing in j by construction. Rejected paths
/// (level schemes stepping through zero) are dropped and counted.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub grid: Vec<f64>,
    pub paths: Vec<Vec<f64>>,
    pub avg_variance: Vec<Vec<f64>>,
    pub scenario_labels: Option<Vec<usize>>,
    pub attempted: usize,
    pub rejected: usize,
    pub t_start: f64,
    pub s_start: f64,
}

impl PathEnsemble {
    pub fn n_paths(&self) -> usize {
        self.paths.last().map_or(0, Vec::len)
    }

    pub fn rejection_fraction(&self) -> f64 {
        self.rejected as f64 / self.attempted as f64
    }

    /// States at the horizon (the last recording time).
    pub fn terminal(&self) -> &[f64] {
        self.paths.last().expect("ensemble has at least one recording time")
    }

    /// Accumulated variance integrals at the horizon.
    pub fn terminal_avg_variance(&self) -> &[f64] {
        self.avg_variance.last().expect("ensemble has at least one recording time")
    }

    /// Index of a recording time, within grid-alignment tolerance.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        self.grid
            .iter()
            .position(|&g| (g - t).abs() <= 1e-9 * t.abs().max(1.0))
            .ok_or_else(|| ModelError::InvalidInput(format!("time {t} was not recorded")))
    }
}

/// Deterministic per-path RNG substreams.
pub mod rng {
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brownian-increment stream for one path.
    pub fn path_rng(seed: u64, path_id: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(path_id);
        r
    }

    /// Scenario-draw stream for one path; stream ids live in the upper half
    /// of the u64 range so they never collide with Brownian streams.
    pub fn scenario_rng(seed: u64, path_id: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream((1u64 << 63) | path_id);
        r
    }

    /// Uniform on (0, 1), never returning an endpoint: the top 53 bits of a
    /// u64 draw, offset half a lattice spacing.
    pub fn uniform(r: &mut impl RngCore) -> f64 {
        ((r.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
    }

    /// Standard normal via the inverse CDF (keeps substreams deterministic
    /// with exactly one u64 consumed per variate).
    pub fn standard_normal(r: &mut impl RngCore) -> f64 {
        crate::math::normal::inv_norm_cdf(uniform(r))
    }
}

/// Per-step coefficient tables: everything that depends on time alone is
/// computed once so the path loop only does state-dependent work.
struct LognormalTables {
    log_lam: Vec<f64>,
    nu_bar2: f64,
    /// Per step at t_k: (pre-epsilon flag, drift rate, per-component
    /// (log-mean, log-sd, ln(log-sd), nu^2)).
    steps: Vec<(bool, f64, Vec<(f64, f64, f64, f64)>)>,
}

impl LognormalTables {
    fn build(model: &LocalVolModel, cfg: &SimConfig) -> Result<Self> {
        let spec = &model.spec;
        let eps = spec.epsilon();
        let n = cfg.n_steps();
        let mut steps = Vec::with_capacity(n);
        for k in 0..n {
            let t = cfg.t_start + k as f64 * cfg.dt;
            let r = model.curve.drift_rate(t)?;
            if t <= eps || t < crate::market_model::MIN_DENSITY_TIME {
                steps.push((true, r, Vec::new()));
                continue;
            }
            let params = spec.component_params(&model.curve, t)?;
            let nus = spec.vol_levels(t);
            let comp = params
                .iter()
                .zip(&nus)
                .map(|(&(m, v2), &nu)| {
                    let v = v2.sqrt();
                    (m, v, v.ln(), nu * nu)
                })
                .collect();
            steps.push((false, r, comp));
        }
        Ok(Self {
            log_lam: spec.weights().iter().map(|l| l.ln()).collect(),
            nu_bar2: spec.nu_bar() * spec.nu_bar(),
            steps,
        })
    }

    /// sigma_mix^2 and d(sigma_mix^2)/dy at state y for step k.
    fn sigma2(&self, k: usize, y: f64, want_deriv: bool) -> (f64, f64) {
        let (pre_eps, _, comp) = &self.steps[k];
        if *pre_eps {
            return (self.nu_bar2, 0.0);
        }
        let ly = y.ln();
        let m = comp.len();
        let mut logw = [0.0f64; 8];
        let mut zs = [0.0f64; 8];
        debug_assert!(m <= 8, "component count bounded by spec validation");
        let mut amax = f64::NEG_INFINITY;
        for i in 0..m {
            let (mean, sd, ln_sd, _) = comp[i];
            let z = (ly - mean) / sd;
            zs[i] = z;
            let a = self.log_lam[i] - ln_sd - 0.5 * z * z;
            logw[i] = a;
            if a > amax {
                amax = a;
            }
        }
        let mut wsum = 0.0;
        let mut s2 = 0.0;
        let mut w = [0.0f64; 8];
        for i in 0..m {
            let wi = (logw[i] - amax).exp();
            w[i] = wi;
            wsum += wi;
            s2 += wi * comp[i].3;
        }
        s2 /= wsum;
        if !want_deriv {
            return (s2, 0.0);
        }
        // dLambda_i/dy = Lambda_i (l_i' - sum_j Lambda_j l_j'),
        // l_i' = -z_i / (sd_i y).
        let mut avg_lp = 0.0;
        for i in 0..m {
            avg_lp += (w[i] / wsum) * (-zs[i] / (comp[i].1 * y));
        }
        let mut ds2 = 0.0;
        for i in 0..m {
            let lp = -zs[i] / (comp[i].1 * y);
            ds2 += (w[i] / wsum) * (lp - avg_lp) * comp[i].3;
        }
        (s2, ds2)
    }

    fn drift_rate(&self, k: usize) -> f64 {
        self.steps[k].1
    }
}

struct NormalTables {
    log_lam: Vec<f64>,
    /// Per step at t_k: per-component (mean, sd, ln(sd), mu, sigma^2) where
    /// (mean, sd) describe the component law at t_k and (mu, sigma^2) are the
    /// instantaneous coefficients.
    steps: Vec<Vec<(f64, f64, f64, f64, f64)>>,
    pre_eps: Vec<bool>,
    lam: Vec<f64>,
}

impl NormalTables {
    fn build(model: &LocalVolModel, cfg: &SimConfig) -> Result<Self> {
        let spec = &model.spec;
        let comps = match spec.components() {
            ComponentSet::Normal(cs) => cs,
            _ => unreachable!("normal mode validated at construction"),
        };
        let eps = spec.epsilon();
        let n = cfg.n_steps();
        let mut steps = Vec::with_capacity(n);
        let mut pre_eps = Vec::with_capacity(n);
        for k in 0..n {
            let t = cfg.t_start + k as f64 * cfg.dt;
            pre_eps.push(t <= eps || t < crate::market_model::MIN_DENSITY_TIME);
            let params = spec.component_params(&model.curve, t)?;
            let row = params
                .iter()
                .zip(comps)
                .map(|(&(mean, var), c)| {
                    let sd = var.max(1e-300).sqrt();
                    let s = c.vol.level(t);
                    (mean, sd, sd.ln(), c.drift.value(t), s * s)
                })
                .collect();
            steps.push(row);
        }
        Ok(Self {
            log_lam: spec.weights().iter().map(|l| l.ln()).collect(),
            steps,
            pre_eps,
            lam: spec.weights().to_vec(),
        })
    }

    /// (f, sigma_f^2) at state x for step k.
    fn coefficients(&self, k: usize, x: f64) -> (f64, f64) {
        let comp = &self.steps[k];
        let m = comp.len();
        if self.pre_eps[k] {
            let mut f = 0.0;
            let mut a2 = 0.0;
            for i in 0..m {
                f += self.lam[i] * comp[i].3;
                a2 += self.lam[i] * comp[i].4;
            }
            return (f, a2);
        }
        let mut logw = [0.0f64; 8];
        let mut amax = f64::NEG_INFINITY;
        for i in 0..m {
            let (mean, sd, ln_sd, _, _) = comp[i];
            let z = (x - mean) / sd;
            let a = self.log_lam[i] - ln_sd - 0.5 * z * z;
            logw[i] = a;
            if a > amax {
                amax = a;
            }
        }
        let (mut wsum, mut f, mut a2) = (0.0, 0.0, 0.0);
        for i in 0..m {
            let wi = (logw[i] - amax).exp();
            wsum += wi;
            f += wi * comp[i].3;
            a2 += wi * comp[i].4;
        }
        (f / wsum, a2 / wsum)
    }
}

fn assemble(
    cfg: &SimConfig,
    per_path: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    labels: Option<Vec<usize>>,
) -> PathEnsemble {
    let n_rec = cfg.record_times.len();
    let kept = per_path.iter().filter(|p| p.is_some()).count();
    let mut paths = vec![Vec::with_capacity(kept); n_rec];
    let mut avg_variance = vec![Vec::with_capacity(kept); n_rec];
    let mut kept_labels = labels.as_ref().map(|_| Vec::with_capacity(kept));
    for (p, row) in per_path.into_iter().enumerate() {
        if let Some((states, vs)) = row {
            for j in 0..n_rec {
                paths[j].push(states[j]);
                avg_variance[j].push(vs[j]);
            }
            if let (Some(out), Some(ls)) = (kept_labels.as_mut(), labels.as_ref()) {
                out.push(ls[p]);
            }
        }
    }
    PathEnsemble {
        grid: cfg.record_times.clone(),
        paths,
        avg_variance,
        scenario_labels: kept_labels,
        attempted: cfg.n_paths,
        rejected: cfg.n_paths - kept,
        t_start: cfg.t_start,
        s_start: cfg.s_start,
    }
}

/// Simulate the mixture-tracking SDE. Lognormal mode supports all three
/// schemes (euler-log is positivity-preserving; level schemes reject paths
/// that step through zero and report the rejection fraction). Normal mode
/// evolves the whole-line state with the Euler scheme.
pub fn simulate_local_vol(model: &LocalVolModel, cfg: &SimConfig) -> Result<PathEnsemble> {
    match model.mode {
        Mode::LognormalMixture => simulate_lv_lognormal(model, cfg),
        Mode::NormalMixture => simulate_lv_normal(model, cfg),
    }
}

fn simulate_lv_lognormal(model: &LocalVolModel, cfg: &SimConfig) -> Result<PathEnsemble> {
    if !(cfg.s_start > 0.0) {
        return Err(ModelError::InvalidInput(format!(
            "lognormal mode needs s_start > 0, got {}",
            cfg.s_start
        )));
    }
    let tables = LognormalTables::build(model, cfg)?;
    let record_steps = cfg.record_steps();
    let n_steps = cfg.n_steps();
    let (dt, sqdt) = (cfg.dt, cfg.dt.sqrt());
    let scheme = cfg.scheme;
    let per_path: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut r = rng::path_rng(cfg.seed, p as u64);
            let mut rec = Vec::with_capacity(record_steps.len());
            let mut vrec = Vec::with_capacity(record_steps.len());
            let mut next_rec = 0;
            let mut v = 0.0;
            match scheme {
                Scheme::EulerLog => {
                    let mut x = cfg.s_start.ln();
                    for k in 0..n_steps {
                        let (s2, _) = tables.sigma2(k, x.exp(), false);
                        v += s2 * dt;
                        let z = rng::standard_normal(&mut r);
                        x += (tables.drift_rate(k) - 0.5 * s2) * dt + s2.sqrt() * sqdt * z;
                        if next_rec < record_steps.len() && k + 1 == record_steps[next_rec] {
                            rec.push(x.exp());
                            vrec.push(v);
                            next_rec += 1;
                        }
                    }
                }
                Scheme::EulerLevel | Scheme::MilsteinLevel => {
                    let mut s = cfg.s_start;
                    for k in 0..n_steps {
                        let want_deriv = scheme == Scheme::MilsteinLevel;
                        let (s2, ds2) = tables.sigma2(k, s, want_deriv);
                        v += s2 * dt;
                        let z = rng::standard_normal(&mut r);
                        let sig = s2.sqrt();
                        let mut step =
                            tables.drift_rate(k) * s * dt + sig * s * sqdt * z;
                        if want_deriv {
                            // 0.5 b b' dt (Z^2 - 1), b = sigma S,
                            // b' = sigma + S dsigma^2/dy / (2 sigma).
                            let bprime = sig + s * ds2 / (2.0 * sig);
                            step += 0.5 * sig * s * bprime * dt * (z * z - 1.0);
                        }
                        s += step;
                        if s <= 0.0 {
                            return None;
                        }
                        if next_rec < record_steps.len() && k + 1 == record_steps[next_rec] {
                            rec.push(s);
                            vrec.push(v);
                            next_rec += 1;
                        }
                    }
                }
            }
            Some((rec, vrec))
        })
        .collect();
    Ok(assemble(cfg, per_path, None))
}

fn simulate_lv_normal(model: &LocalVolModel, cfg: &SimConfig) -> Result<PathEnsemble> {
    if cfg.scheme != Scheme::EulerLog {
        return Err(ModelError::UnsupportedMode(
            "normal mode evolves a whole-line state; level schemes do not apply".into(),
        ));
    }
    let tables = NormalTables::build(model, cfg)?;
    let record_steps = cfg.record_steps();
    let n_steps = cfg.n_steps();
    let (dt, sqdt) = (cfg.dt, cfg.dt.sqrt());
    let per_path: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut r = rng::path_rng(cfg.seed, p as u64);
            let mut rec = Vec::with_capacity(record_steps.len());
            let mut vrec = Vec::with_capacity(record_steps.len());
            let mut next_rec = 0;
            let mut x = cfg.s_start;
            let mut v = 0.0;
            for k in 0..n_steps {
                let (f, a2) = tables.coefficients(k, x);
                v += a2 * dt;
                let z = rng::standard_normal(&mut r);
                x += f * dt + a2.sqrt() * sqdt * z;
                if next_rec < record_steps.len() && k + 1 == record_steps[next_rec] {
                    rec.push(x);
                    vrec.push(v);
                    next_rec += 1;
                }
            }
            Some((rec, vrec))
        })
        .collect();
    Ok(assemble(cfg, per_path, None))
}

/// Simulate the uncertain-volatility model: a single component index per
/// path, drawn with the mixture weights evaluated at the start state (prior
/// weights when starting at the origin, posterior weights when restarting
/// mid-path), then exact GBM transitions between recording times. The
/// variance accumulator is the component's deterministic interval variance.
pub fn simulate_uncertain_vol(model: &LocalVolModel, cfg: &SimConfig) -> Result<PathEnsemble> {
    if model.mode != Mode::LognormalMixture {
        return Err(ModelError::UnsupportedMode(
            "the uncertain-volatility engine requires lognormal mode".into(),
        ));
    }
    if !(cfg.s_start > 0.0) {
        return Err(ModelError::InvalidInput(format!(
            "lognormal mode needs s_start > 0, got {}",
            cfg.s_start
        )));
    }
    let spec = &model.spec;
    let vols = match spec.components() {
        ComponentSet::Lognormal(vs) => vs,
        _ => unreachable!("lognormal mode validated above"),
    };
    let draw_weights = lambda_weights(spec, &model.curve, cfg.t_start, cfg.s_start)?;
    let m = spec.m();
    // Per recording interval: integrated drift, and per component the exact
    // interval variance with cumulative prefix.
    let mut bounds = vec![cfg.t_start];
    bounds.extend_from_slice(&cfg.record_times);
    let n_rec = cfg.record_times.len();
    let mut drift_r = Vec::with_capacity(n_rec);
    let mut dv2 = vec![Vec::with_capacity(n_rec); m];
    let mut v2cum = vec![Vec::with_capacity(n_rec); m];
    for j in 0..n_rec {
        let (a, b) = (bounds[j], bounds[j + 1]);
        drift_r.push(model.curve.drift_integral(a, b)?);
        for (i, vc) in vols.iter().enumerate() {
            let d = vc.integrated_variance(b)? - vc.integrated_variance(a)?;
            dv2[i].push(d);
            let prev = if j == 0 { 0.0 } else { v2cum[i][j - 1] };
            v2cum[i].push(prev + d);
        }
    }
    let results: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut scen = rng::scenario_rng(cfg.seed, p as u64);
            let u = rng::uniform(&mut scen);
            let mut acc = 0.0;
            let mut label = m - 1;
            for (i, w) in draw_weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    label = i;
                    break;
                }
            }
            let mut r = rng::path_rng(cfg.seed, p as u64);
            let mut x = cfg.s_start.ln();
            let mut rec = Vec::with_capacity(n_rec);
            let mut vrec = Vec::with_capacity(n_rec);
            for j in 0..n_rec {
                let dv = dv2[label][j];
                let z = rng::standard_normal(&mut r);
                x += drift_r[j] - 0.5 * dv + dv.sqrt() * z;
                rec.push(x.exp());
                vrec.push(v2cum[label][j]);
            }
            (label, rec, vrec)
        })
        .collect();
    let labels: Vec<usize> = results.iter().map(|r| r.0).collect();
    let per_path: Vec<Option<(Vec<f64>, Vec<f64>)>> =
        results.into_iter().map(|(_, rec, vrec)| Some((rec, vrec))).collect();
    Ok(assemble(cfg, per_path, Some(labels)))
}

/// Discounted sample mean and standard error of a terminal payoff.
pub fn mc_price<F>(ensemble: &PathEnsemble, payoff: F, discount: f64) -> Result<(f64, f64)>
where
    F: Fn(f64) -> f64,
{
    let term = ensemble.terminal();
    let n = term.len();
    if n == 0 {
        return Err(ModelError::InvalidInput("ensemble has no surviving paths".into()));
    }
    let mut mean = 0.0;
    for &s in term {
        mean += payoff(s);
    }
    mean /= n as f64;
    let mut var = 0.0;
    for &s in term {
        let d = payoff(s) - mean;
        var += d * d;
    }
    let se = if n > 1 { (var / ((n - 1) as f64 * n as f64)).sqrt() } else { 0.0 };
    Ok((discount * mean, discount * se))
}
