//! Smile calibration: fit mixture weights and component vols to quoted
//! implied volatilities.
//!
//! Parameters live in an unconstrained space: weights through a floored
//! softmax (lambda_i = floor + (1 - m floor) softmax_i, last logit pinned to
//! zero), vols through a logistic map onto [nu_min, nu_max]. The objective
//! is the sum of squared residuals, by default in annualized-vol units
//! (model implied vol minus quote), optionally in price units. Minimization
//! is damped least squares (Levenberg-Marquardt trust region) with a
//! forward-difference Jacobian; no analytic gradients are required. Eight
//! deterministic starts run concurrently and the best accepted optimum wins.
//! Underdetermined problems (fewer quotes than free parameters) are
//! regularized by a Tikhonov pull of the weights toward 1/m.

use crate::error::{ModelError, Result};
use crate::local_vol::LocalVolModel;
use crate::market_model::{Leg, MixtureSpec, VolCurve, YieldCurve, VOL_FLOOR};
use crate::pricing::{bs_call, implied_vol, mixture_call, SmilePoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Units the residuals are measured in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSpace {
    /// Annualized implied-vol differences (default: equalizes strike
    /// influence across the smile).
    VolSpace,
    /// Premium differences in currency units.
    PriceSpace,
}

/// Strength of the equal-weight pull used when quotes underdetermine the
/// parameters: penalty residuals sqrt(TIKHONOV) (lambda_i - 1/m). Small
/// enough to leave the quote fit untouched; its job is only to select one
/// point of the solution manifold.
const TIKHONOV: f64 = 1e-8;

/// A calibration instance: quotes share one spot and one curve.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    pub quotes: Vec<SmilePoint>,
    pub s0: f64,
    pub curve: YieldCurve,
    pub m: usize,
    pub vol_bounds: (f64, f64),
    pub weight_floor: f64,
    pub loss: LossSpace,
    pub epsilon: f64,
}

impl CalibrationProblem {
    /// Validates the instance and rejects infeasible quotes up front. Every
    /// quote must be a spot quote (t = 0) whose Black-Scholes premium lies
    /// strictly inside the no-arbitrage band (s0 df_f - K df_d)^+ < C <
    /// s0 df_f; a premium that touches either end at double precision has no
    /// invertible implied vol and is reported by index.
    pub fn new(quotes: Vec<SmilePoint>, s0: f64, curve: YieldCurve, m: usize) -> Result<Self> {
        if m < 1 {
            return Err(ModelError::InvalidInput("need at least one component".into()));
        }
        if m > 8 {
            return Err(ModelError::InvalidInput(format!("at most 8 components supported, got {m}")));
        }
        if quotes.is_empty() {
            return Err(ModelError::InvalidInput("no quotes supplied".into()));
        }
        if !(s0 > 0.0) {
            return Err(ModelError::InvalidInput(format!("need s0 > 0, got {s0}")));
        }
        let problem = Self {
            quotes,
            s0,
            curve,
            m,
            vol_bounds: (1e-3, 5.0),
            weight_floor: 1e-6,
            loss: LossSpace::VolSpace,
            epsilon: 1e-4,
        };
        problem.validate()?;
        Ok(problem)
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.vol_bounds;
        if !(lo >= VOL_FLOOR) || !(hi > lo) {
            return Err(ModelError::InvalidInput(format!(
                "vol bounds need {VOL_FLOOR:e} <= lo < hi, got ({lo}, {hi})"
            )));
        }
        if !(self.weight_floor >= 0.0) || !(self.weight_floor < 1.0 / self.m as f64) {
            return Err(ModelError::InvalidInput(format!(
                "weight floor must lie in [0, 1/m), got {}",
                self.weight_floor
            )));
        }
        if !(self.epsilon >= 0.0) {
            return Err(ModelError::InvalidInput("epsilon must be nonnegative".into()));
        }
        let mut bad = Vec::new();
        for (i, q) in self.quotes.iter().enumerate() {
            if q.t != 0.0 {
                bad.push(format!("quote {i}: t = {} (spot quotes need t = 0)", q.t));
                continue;
            }
            let df_d = self.curve.df(Leg::Domestic, q.maturity)?;
            let df_f = self.curve.df(Leg::Foreign, q.maturity)?;
            let rd = self.curve.integrated_rate(0.0, q.maturity, Leg::Domestic)?;
            let rf = self.curve.integrated_rate(0.0, q.maturity, Leg::Foreign)?;
            let v = q.implied_vol * q.maturity.sqrt();
            let px = bs_call(self.s0, q.strike, q.maturity, rd, rf, v)?;
            let lower = (self.s0 * df_f - q.strike * df_d).max(0.0);
            let upper = self.s0 * df_f;
            if !(px > lower) || !(px < upper) {
                bad.push(format!(
                    "quote {i}: premium {px:.9e} not strictly inside the no-arbitrage band \
                     ({lower:.9e}, {upper:.9e})"
                ));
            }
        }
        if !bad.is_empty() {
            return Err(ModelError::InvalidInput(format!(
                "infeasible quotes: {}",
                bad.join("; ")
            )));
        }
        Ok(())
    }

    /// m - 1 free weight logits plus m vol parameters.
    fn n_params(&self) -> usize {
        2 * self.m - 1
    }

    /// Underdetermined instances get the Tikhonov pull.
    fn regularized(&self) -> bool {
        self.quotes.len() < self.n_params()
    }
}

/// Calibration output: the fitted spec plus fit diagnostics. `residuals`
/// holds the per-quote misfit in the problem's loss units and
/// `loss_value` is their sum of squares (the Tikhonov penalty, when active,
/// is excluded here and reported only through the fit itself).
#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub spec: MixtureSpec,
    pub loss_value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub residuals: Vec<f64>,
}

/// Floored softmax / logistic reparameterization of (lambda, nu).
struct Transform {
    m: usize,
    floor: f64,
    lo: f64,
    hi: f64,
}

impl Transform {
    fn weights(&self, theta: &[f64]) -> Vec<f64> {
        // Last logit pinned to zero removes the softmax shift gauge.
        let mut z = Vec::with_capacity(self.m);
        z.extend_from_slice(&theta[..self.m - 1]);
        z.push(0.0);
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ws: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let sum: f64 = ws.iter().sum();
        let scale = 1.0 - self.m as f64 * self.floor;
        ws.iter().map(|w| self.floor + scale * w / sum).collect()
    }

    fn vols(&self, theta: &[f64]) -> Vec<f64> {
        theta[self.m - 1..]
            .iter()
            .map(|&u| self.lo + (self.hi - self.lo) / (1.0 + (-u).exp()))
            .collect()
    }

    /// Inverse map for warm starts; inputs are clipped into the interior.
    fn pack(&self, lam: &[f64], nu: &[f64]) -> Vec<f64> {
        let scale = 1.0 - self.m as f64 * self.floor;
        let raw: Vec<f64> = lam
            .iter()
            .map(|&l| (((l - self.floor) / scale).max(1e-12)).ln())
            .collect();
        let mut theta = Vec::with_capacity(2 * self.m - 1);
        for i in 0..self.m - 1 {
            theta.push(raw[i] - raw[self.m - 1]);
        }
        for &v in nu {
            let p = ((v - self.lo) / (self.hi - self.lo)).clamp(1e-9, 1.0 - 1e-9);
            theta.push((p / (1.0 - p)).ln());
        }
        theta
    }
}

/// Quote data predigested for the residual loop.
struct PreparedQuote {
    strike: f64,
    maturity: f64,
    sqrt_t: f64,
    rd: f64,
    rf: f64,
    market_iv: f64,
    market_px: f64,
}

fn prepare(problem: &CalibrationProblem) -> Result<Vec<PreparedQuote>> {
    problem
        .quotes
        .iter()
        .map(|q| {
            let rd = problem.curve.integrated_rate(0.0, q.maturity, Leg::Domestic)?;
            let rf = problem.curve.integrated_rate(0.0, q.maturity, Leg::Foreign)?;
            let v = q.implied_vol * q.maturity.sqrt();
            Ok(PreparedQuote {
                strike: q.strike,
                maturity: q.maturity,
                sqrt_t: q.maturity.sqrt(),
                rd,
                rf,
                market_iv: q.implied_vol,
                market_px: bs_call(problem.s0, q.strike, q.maturity, rd, rf, v)?,
            })
        })
        .collect()
}

fn spec_from_theta(problem: &CalibrationProblem, tf: &Transform, theta: &[f64]) -> Result<MixtureSpec> {
    let lam = tf.weights(theta);
    let vols = tf
        .vols(theta)
        .into_iter()
        .map(VolCurve::constant)
        .collect::<Result<Vec<_>>>()?;
    MixtureSpec::lognormal(lam, vols, problem.s0, problem.epsilon)
}

/// Per-quote residuals at theta, with the Tikhonov rows appended when the
/// instance is underdetermined.
fn residuals(
    problem: &CalibrationProblem,
    tf: &Transform,
    prepared: &[PreparedQuote],
    theta: &[f64],
) -> Result<Vec<f64>> {
    let spec = spec_from_theta(problem, tf, theta)?;
    let model = LocalVolModel::lognormal(spec, problem.curve.clone())?;
    let mut rs = Vec::with_capacity(prepared.len() + problem.m);
    for q in prepared {
        let px = mixture_call(&model, q.strike, q.maturity)?;
        match problem.loss {
            LossSpace::VolSpace => {
                let v = implied_vol(px, problem.s0, q.strike, q.maturity, q.rd, q.rf)?;
                rs.push(v / q.sqrt_t - q.market_iv);
            }
            LossSpace::PriceSpace => rs.push(px - q.market_px),
        }
    }
    if problem.regularized() {
        let lam = tf.weights(theta);
        let pull = TIKHONOV.sqrt();
        let target = 1.0 / problem.m as f64;
        for l in &lam {
            rs.push(pull * (l - target));
        }
    }
    Ok(rs)
}

/// Dense symmetric solve by Gaussian elimination with partial pivoting;
/// the systems here are at most 15 x 15.
fn solve_dense(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<()> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).expect("finite"))
            .expect("nonempty");
        if a[piv][col].abs() < 1e-300 {
            return Err(ModelError::Numerical("singular normal equations".into()));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut v = b[col];
        for k in col + 1..n {
            v -= a[col][k] * b[k];
        }
        b[col] = v / a[col][col];
    }
    Ok(())
}

struct FitOutcome {
    theta: Vec<f64>,
    loss: f64,
    iterations: usize,
    converged: bool,
    /// Loss after every accepted step, for the monotonicity invariant.
    #[cfg_attr(not(test), allow(dead_code))]
    accepted_losses: Vec<f64>,
}

/// Damped least squares: solve (J^T J + mu diag(J^T J)) delta = -J^T r,
/// growing mu on rejection and shrinking it on acceptance. Stops when the
/// accepted step norm falls below 1e-10 or the relative loss improvement
/// falls below 1e-12.
fn levenberg_marquardt<F>(f: &F, theta0: Vec<f64>, max_iter: usize) -> Result<FitOutcome>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = theta0.len();
    let mut theta = theta0;
    let mut r = f(&theta)?;
    let mut loss: f64 = r.iter().map(|v| v * v).sum();
    let mut mu = 1e-3;
    let mut iterations = 0;
    let mut accepted_losses = vec![loss];
    let mut converged = false;
    for _ in 0..max_iter {
        if loss < 1e-30 {
            converged = true;
            break;
        }
        // Forward-difference Jacobian, column per parameter.
        let mut jac = vec![vec![0.0; n]; r.len()];
        for j in 0..n {
            let h = 1e-6 * (1.0 + theta[j].abs());
            let mut bumped = theta.clone();
            bumped[j] += h;
            let rb = f(&bumped)?;
            for (row, (rbi, ri)) in rb.iter().zip(&r).enumerate() {
                jac[row][j] = (rbi - ri) / h;
            }
        }
        let mut jtj = vec![vec![0.0; n]; n];
        let mut jtr = vec![0.0; n];
        for (row, ri) in jac.iter().zip(&r) {
            for i in 0..n {
                jtr[i] += row[i] * ri;
                for k in 0..n {
                    jtj[i][k] += row[i] * row[k];
                }
            }
        }
        // Inner damping loop: retry with larger mu until a step is accepted
        // or the damping saturates.
        let mut stalled = false;
        loop {
            let mut a: Vec<Vec<f64>> = jtj.clone();
            for i in 0..n {
                a[i][i] += mu * jtj[i][i].max(1e-12);
            }
            let mut delta: Vec<f64> = jtr.iter().map(|v| -v).collect();
            solve_dense(&mut a, &mut delta)?;
            let trial: Vec<f64> = theta.iter().zip(&delta).map(|(t, d)| t + d).collect();
            let rt = f(&trial)?;
            let lt: f64 = rt.iter().map(|v| v * v).sum();
            if lt < loss {
                let step = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
                let rel_drop = (loss - lt) / loss.max(1e-300);
                theta = trial;
                r = rt;
                loss = lt;
                accepted_losses.push(loss);
                iterations += 1;
                mu = (mu / 3.0).max(1e-12);
                if step < 1e-10 || rel_drop < 1e-12 {
                    converged = true;
                }
                break;
            }
            mu *= 4.0;
            if mu > 1e12 {
                stalled = true;
                break;
            }
        }
        if converged {
            break;
        }
        if stalled {
            // No descent direction at saturated damping: a local optimum to
            // the resolution of the difference Jacobian.
            converged = true;
            break;
        }
    }
    Ok(FitOutcome { theta, loss, iterations, converged, accepted_losses })
}

/// Deterministic multi-start grid: vol levels fan out geometrically around
/// the mean quote vol with a start-specific spread, weights alternate
/// between equal and front-loaded, and a small seeded jitter decorrelates
/// starts that would otherwise coincide after clipping.
fn starting_points(
    problem: &CalibrationProblem,
    tf: &Transform,
    init: Option<&MixtureSpec>,
) -> Result<Vec<Vec<f64>>> {
    let m = problem.m;
    let vbar = problem.quotes.iter().map(|q| q.implied_vol).sum::<f64>()
        / problem.quotes.len() as f64;
    let spreads = [0.25, 0.5, 1.0, 1.6, 0.75, 1.25, 2.0, 0.4];
    let mut starts = Vec::with_capacity(spreads.len() + 1);
    if let Some(spec) = init {
        if spec.m() != m {
            return Err(ModelError::InvalidInput(format!(
                "warm start has {} components, problem has {m}",
                spec.m()
            )));
        }
        let t_ref = problem.quotes[0].maturity;
        starts.push(tf.pack(spec.weights(), &spec.vol_levels(t_ref)));
    }
    for (k, &spread) in spreads.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + k as u64);
        let mut lam = vec![1.0 / m as f64; m];
        if k % 2 == 1 && m > 1 {
            // Front-loaded weights: geometric 3:1 decay toward high vols.
            let mut w = 1.0;
            for l in lam.iter_mut() {
                *l = w;
                w /= 3.0;
            }
            let sum: f64 = lam.iter().sum();
            for l in lam.iter_mut() {
                *l /= sum;
            }
        }
        let mut nus = Vec::with_capacity(m);
        for i in 0..m {
            let center = if m == 1 {
                0.0
            } else {
                2.0 * (i as f64 + 0.5) / m as f64 - 1.0
            };
            let jitter: f64 = rng.gen_range(-0.05..0.05);
            let nu = (vbar * (spread * center + jitter).exp())
                .clamp(tf.lo * 1.0001, tf.hi * 0.9999);
            nus.push(nu);
        }
        starts.push(tf.pack(&lam, &nus));
    }
    Ok(starts)
}

/// Fit the mixture to the problem's quotes. `init` adds a warm start to the
/// deterministic multi-start set. Components of the winning fit are sorted
/// by vol level, which removes the labeling ambiguity.
pub fn calibrate(
    problem: &CalibrationProblem,
    init: Option<&MixtureSpec>,
) -> Result<CalibrationResult> {
    let tf = Transform {
        m: problem.m,
        floor: problem.weight_floor,
        lo: problem.vol_bounds.0,
        hi: problem.vol_bounds.1,
    };
    let prepared = prepare(problem)?;
    let objective = |theta: &[f64]| residuals(problem, &tf, &prepared, theta);
    let starts = starting_points(problem, &tf, init)?;
    let outcomes: Vec<Result<FitOutcome>> = starts
        .into_par_iter()
        .map(|theta0| levenberg_marquardt(&objective, theta0, 200))
        .collect();
    let best = outcomes
        .into_iter()
        .filter_map(|o| o.ok())
        .min_by(|a, b| a.loss.partial_cmp(&b.loss).expect("finite losses"))
        .ok_or_else(|| ModelError::Numerical("all calibration starts failed".into()))?;

    // Sort components by vol level (the label gauge), rebuild, re-audit.
    let lam = tf.weights(&best.theta);
    let nus = tf.vols(&best.theta);
    let mut order: Vec<usize> = (0..problem.m).collect();
    order.sort_by(|&i, &j| nus[i].partial_cmp(&nus[j]).expect("finite vols"));
    let lam_sorted: Vec<f64> = order.iter().map(|&i| lam[i]).collect();
    let nus_sorted: Vec<f64> = order.iter().map(|&i| nus[i]).collect();
    let wsum: f64 = lam_sorted.iter().sum();
    if (wsum - 1.0).abs() > 1e-14 {
        return Err(ModelError::Numerical(format!(
            "weight transform lost normalization: sum = {wsum:.17}"
        )));
    }
    if lam_sorted.iter().any(|&l| l < problem.weight_floor - 1e-15) {
        return Err(ModelError::Numerical("weight transform violated the floor".into()));
    }
    let spec = MixtureSpec::lognormal(
        lam_sorted,
        nus_sorted
            .into_iter()
            .map(VolCurve::constant)
            .collect::<Result<Vec<_>>>()?,
        problem.s0,
        problem.epsilon,
    )?;

    // Per-quote residuals of the sorted spec (sorting is loss-neutral).
    let model = LocalVolModel::lognormal(spec.clone(), problem.curve.clone())?;
    let mut res = Vec::with_capacity(prepared.len());
    for q in &prepared {
        let px = mixture_call(&model, q.strike, q.maturity)?;
        match problem.loss {
            LossSpace::VolSpace => {
                let v = implied_vol(px, problem.s0, q.strike, q.maturity, q.rd, q.rf)?;
                res.push(v / q.sqrt_t - q.market_iv);
            }
            LossSpace::PriceSpace => res.push(px - q.market_px),
        }
    }
    let loss_value = res.iter().map(|v| v * v).sum();
    Ok(CalibrationResult {
        spec,
        loss_value,
        iterations: best.iterations,
        converged: best.converged,
        residuals: res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

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

    fn nine_strikes(s0: f64) -> Vec<f64> {
        (0..9).map(|i| s0 * (0.8 + 0.05 * i as f64)).collect()
    }

    /// One-year dollar-euro smile quotes (annualized vols, s0 = 1.07).
    fn fx_smile_quotes() -> Vec<SmilePoint> {
        let vols =
            [0.1617, 0.1373, 0.1198, 0.1102, 0.1072, 0.1084, 0.1130, 0.1226, 0.1361];
        nine_strikes(1.07)
            .into_iter()
            .zip(vols)
            .map(|(k, v)| SmilePoint::new(0.0, 1.0, k, v).unwrap())
            .collect()
    }

    fn model_smile(spec: &MixtureSpec, curve: &YieldCurve, strikes: &[f64], t: f64) -> Vec<f64> {
        let model = LocalVolModel::lognormal(spec.clone(), curve.clone()).unwrap();
        let rd = curve.integrated_rate(0.0, t, Leg::Domestic).unwrap();
        let rf = curve.integrated_rate(0.0, t, Leg::Foreign).unwrap();
        strikes
            .iter()
            .map(|&k| {
                let px = mixture_call(&model, k, t).unwrap();
                implied_vol(px, spec.s0(), k, t, rd, rf).unwrap() / t.sqrt()
            })
            .collect()
    }

    #[test]
    fn round_trip_recovers_generating_smile() {
        let gen = MixtureSpec::lognormal(
            vec![0.75, 0.25],
            vec![VolCurve::constant(0.12).unwrap(), VolCurve::constant(0.35).unwrap()],
            1.07,
            1e-4,
        )
        .unwrap();
        let curve = fx_curve();
        let strikes = nine_strikes(1.07);
        let ivs = model_smile(&gen, &curve, &strikes, 1.0);
        let quotes: Vec<SmilePoint> = strikes
            .iter()
            .zip(&ivs)
            .map(|(&k, &v)| SmilePoint::new(0.0, 1.0, k, v).unwrap())
            .collect();
        let problem = CalibrationProblem::new(quotes, 1.07, curve.clone(), 2).unwrap();
        let fit = calibrate(&problem, None).unwrap();
        assert!(fit.converged);
        // Recovered surface within 1e-6 vol points of the generator.
        let fitted = model_smile(&fit.spec, &curve, &strikes, 1.0);
        for (a, b) in fitted.iter().zip(&ivs) {
            assert!((a - b).abs() < 1e-8, "iv {a} vs generator {b}");
        }
        // Sorted parameters match the generator.
        let w = fit.spec.weights();
        let nus = fit.spec.vol_levels(1.0);
        assert_abs_diff_eq!(w[0], 0.75, epsilon = 1e-4);
        assert_abs_diff_eq!(w[1], 0.25, epsilon = 1e-4);
        assert_abs_diff_eq!(nus[0], 0.12, epsilon = 1e-4);
        assert_abs_diff_eq!(nus[1], 0.35, epsilon = 1e-4);
        assert!(fit.loss_value < 1e-14, "loss {}", fit.loss_value);
    }

    #[test]
    fn price_space_round_trip_matches() {
        let gen = MixtureSpec::lognormal(
            vec![0.75, 0.25],
            vec![VolCurve::constant(0.12).unwrap(), VolCurve::constant(0.35).unwrap()],
            1.07,
            1e-4,
        )
        .unwrap();
        let curve = fx_curve();
        let strikes = nine_strikes(1.07);
        let ivs = model_smile(&gen, &curve, &strikes, 1.0);
        let quotes: Vec<SmilePoint> = strikes
            .iter()
            .zip(&ivs)
            .map(|(&k, &v)| SmilePoint::new(0.0, 1.0, k, v).unwrap())
            .collect();
        let mut problem = CalibrationProblem::new(quotes, 1.07, curve, 2).unwrap();
        problem.loss = LossSpace::PriceSpace;
        let fit = calibrate(&problem, None).unwrap();
        let nus = fit.spec.vol_levels(1.0);
        assert_abs_diff_eq!(nus[0], 0.12, epsilon = 1e-4);
        assert_abs_diff_eq!(nus[1], 0.35, epsilon = 1e-4);
        assert_abs_diff_eq!(fit.spec.weights()[0], 0.75, epsilon = 1e-4);
    }

    #[test]
    fn flat_smile_single_component() {
        let curve = fx_curve();
        let quotes: Vec<SmilePoint> = nine_strikes(1.07)[2..7]
            .iter()
            .map(|&k| SmilePoint::new(0.0, 1.0, k, 0.10).unwrap())
            .collect();
        let problem = CalibrationProblem::new(quotes, 1.07, curve, 1).unwrap();
        let fit = calibrate(&problem, None).unwrap();
        assert!(fit.converged);
        assert!(fit.loss_value < 1e-12, "loss {}", fit.loss_value);
        assert_eq!(fit.spec.weights(), &[1.0]);
        assert_abs_diff_eq!(fit.spec.vol_levels(1.0)[0], 0.10, epsilon = 1e-7);
    }

    #[test]
    fn fx_smile_fit_reproduces_quotes() {
        let problem =
            CalibrationProblem::new(fx_smile_quotes(), 1.07, fx_curve(), 2).unwrap();
        let fit = calibrate(&problem, None).unwrap();
        assert!(fit.converged);
        // Every quote reproduced within 0.05 vol points.
        for (r, q) in fit.residuals.iter().zip(&problem.quotes) {
            assert!(
                r.abs() < 5e-4,
                "residual {:.4} vp at strike {}",
                r * 100.0,
                q.strike
            );
        }
        // The known optimum for this quote set.
        let w = fit.spec.weights();
        let nus = fit.spec.vol_levels(1.0);
        assert_abs_diff_eq!(w[0], 0.970532, epsilon = 1e-3);
        assert_abs_diff_eq!(w[1], 0.029468, epsilon = 1e-3);
        assert_abs_diff_eq!(nus[0], 0.089281, epsilon = 1e-3);
        assert_abs_diff_eq!(nus[1], 0.707406, epsilon = 1e-3);
    }

    #[test]
    fn warm_start_is_honored() {
        let init = MixtureSpec::lognormal(
            vec![0.97, 0.03],
            vec![VolCurve::constant(0.09).unwrap(), VolCurve::constant(0.70).unwrap()],
            1.07,
            1e-4,
        )
        .unwrap();
        let problem =
            CalibrationProblem::new(fx_smile_quotes(), 1.07, fx_curve(), 2).unwrap();
        let fit = calibrate(&problem, Some(&init)).unwrap();
        assert!(fit.converged);
        assert!(fit.residuals.iter().all(|r| r.abs() < 5e-4));
        let bad = MixtureSpec::lognormal(
            vec![1.0],
            vec![VolCurve::constant(0.1).unwrap()],
            1.07,
            1e-4,
        )
        .unwrap();
        assert!(calibrate(&problem, Some(&bad)).is_err());
    }

    #[test]
    fn accepted_losses_decrease_monotonically() {
        let problem =
            CalibrationProblem::new(fx_smile_quotes(), 1.07, fx_curve(), 2).unwrap();
        let tf = Transform { m: 2, floor: problem.weight_floor, lo: 1e-3, hi: 5.0 };
        let prepared = prepare(&problem).unwrap();
        let f = |theta: &[f64]| residuals(&problem, &tf, &prepared, theta);
        let theta0 = tf.pack(&[0.5, 0.5], &[0.2, 0.4]);
        let out = levenberg_marquardt(&f, theta0, 200).unwrap();
        assert!(out.converged);
        for pair in out.accepted_losses.windows(2) {
            assert!(pair[1] < pair[0], "loss increased: {} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn underdetermined_quotes_are_regularized() {
        // Two quotes against three parameters: the equal-weight pull makes
        // the problem well-posed; the quotes themselves are still matched.
        let gen = MixtureSpec::lognormal(
            vec![0.6, 0.4],
            vec![VolCurve::constant(0.10).unwrap(), VolCurve::constant(0.25).unwrap()],
            1.07,
            1e-4,
        )
        .unwrap();
        let curve = fx_curve();
        let strikes = [1.00, 1.15];
        let ivs = model_smile(&gen, &curve, &strikes, 1.0);
        let quotes: Vec<SmilePoint> = strikes
            .iter()
            .zip(&ivs)
            .map(|(&k, &v)| SmilePoint::new(0.0, 1.0, k, v).unwrap())
            .collect();
        let problem = CalibrationProblem::new(quotes, 1.07, curve, 2).unwrap();
        assert!(problem.regularized());
        let fit = calibrate(&problem, None).unwrap();
        assert!(fit.converged);
        for r in &fit.residuals {
            assert!(r.abs() < 1e-6, "residual {r}");
        }
        let w = fit.spec.weights();
        assert!(w.iter().all(|&l| l >= problem.weight_floor));
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn infeasible_quotes_rejected_with_diagnostics() {
        // A 5000% vol premium reaches the upper no-arbitrage bound at double
        // precision, so no implied vol exists for it.
        let quotes = vec![
            SmilePoint::new(0.0, 1.0, 1.07, 0.10).unwrap(),
            SmilePoint::new(0.0, 1.0, 1.07, 50.0).unwrap(),
        ];
        let err = CalibrationProblem::new(quotes, 1.07, fx_curve(), 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("quote 1"), "got: {msg}");
        assert!(msg.contains("no-arbitrage"), "got: {msg}");
        // Forward-start quotes are not calibration inputs.
        let fwd = vec![SmilePoint::new(1.0, 2.0, 1.07, 0.10).unwrap()];
        let err = CalibrationProblem::new(fwd, 1.07, fx_curve(), 2).unwrap_err();
        assert!(err.to_string().contains("t = 0"), "got: {}", err.to_string());
    }

    #[test]
    fn problem_validation_errors() {
        let quotes = vec![SmilePoint::new(0.0, 1.0, 1.07, 0.1).unwrap()];
        assert!(CalibrationProblem::new(quotes.clone(), 1.07, fx_curve(), 0).is_err());
        assert!(CalibrationProblem::new(vec![], 1.07, fx_curve(), 2).is_err());
        assert!(CalibrationProblem::new(quotes.clone(), -1.0, fx_curve(), 2).is_err());
        let mut p = CalibrationProblem::new(quotes, 1.07, fx_curve(), 2).unwrap();
        p.vol_bounds = (0.5, 0.1);
        assert!(p.validate().is_err());
    }
}
