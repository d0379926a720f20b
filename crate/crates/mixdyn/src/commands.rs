//! Subcommand implementations. Every command loads versioned JSON documents,
//! stamps its artifacts with a config hash and seed, and keeps machine
//! output (CSV/JSON, stdout or --out) separate from human summaries
//! (stderr). Exit codes: 0 pass, 1 tolerance failure, 2 input error.

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use mixmodel::analysis::{
    fokker_planck_evolve, log_uniform_grid, normal_mixture_covariance,
    posterior_label_frequencies, posterior_weights_check, terminal_corr_avg_variance,
    terminal_corr_spot_vol, zero_covariance_quadrature,
};
use mixmodel::calibration::{calibrate, CalibrationProblem, LossSpace};
use mixmodel::forward_smile::{
    conditional_future_smile, expected_spot, Engine, ForwardSmilePoint, ForwardSmileRequest,
};
use mixmodel::io::{CurveDocument, ModelDocument, ModeTag};
use mixmodel::local_vol::{
    normal_mixture_coefficients, sigma_mix_squared, LocalVolModel, Mode,
};
use mixmodel::market_model::{
    lambda_weights, mixture_density, ComponentSet, DriftCurve, GaussianComponent, Leg,
    MixtureSpec, VolCurve, YieldCurve,
};
use mixmodel::math::{quad, stats};
use mixmodel::pricing::{implied_vol, mixture_call, SmilePoint};
use mixmodel::simulation::{
    rng, simulate_local_vol, simulate_uncertain_vol, PathEnsemble, Scheme, SimConfig,
};
use rand::Rng;
use serde_json::json;
use std::io::Write;
use std::path::PathBuf;

use crate::util;

const EMBEDDED_MODEL: &str = include_str!("../../../fixtures/calibrated_model.json");
const EMBEDDED_CURVE: &str = include_str!("../../../fixtures/discount_curve.json");
const EMBEDDED_REFERENCE: &str = include_str!("../../../fixtures/reference_smiles.csv");

/// Model + curve document pair shared by most subcommands.
#[derive(Args, Debug)]
pub struct ModelInput {
    /// Model document (JSON).
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    /// Yield-curve document (JSON); omitted means zero rates on both legs.
    #[arg(long, value_name = "FILE")]
    pub curve: Option<PathBuf>,
}

struct Loaded {
    doc: ModelDocument,
    curve: YieldCurve,
    model: LocalVolModel,
    /// Raw input file contents, in load order, for the config hash.
    raw: Vec<String>,
}

impl ModelInput {
    fn load(&self) -> Result<Loaded> {
        let model_json = util::read_file(&self.config)?;
        let doc = ModelDocument::from_json(&model_json)?;
        let (curve, curve_json) = match &self.curve {
            Some(path) => {
                let json = util::read_file(path)?;
                (CurveDocument::from_json(&json)?.to_curve()?, json)
            }
            None => (YieldCurve::zero_rates(100.0), String::new()),
        };
        let model = doc.to_model(curve.clone())?;
        Ok(Loaded { doc, curve, model, raw: vec![model_json, curve_json] })
    }
}

fn hash_of(command: &str, args: &[String], loaded_raw: &[String]) -> u64 {
    let inputs: Vec<&str> = loaded_raw.iter().map(String::as_str).collect();
    util::config_hash(command, args, &inputs)
}

// ---------------------------------------------------------------- price --

#[derive(Args, Debug)]
pub struct PriceArgs {
    #[command(flatten)]
    model: ModelInput,
    /// Option maturity in years.
    #[arg(long)]
    maturity: f64,
    /// Strikes: comma list or lo:hi:step range.
    #[arg(long)]
    strikes: String,
    /// Output CSV path (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

pub fn run_price(args: &PriceArgs) -> Result<i32> {
    let loaded = args.model.load()?;
    let strikes = util::parse_grid(&args.strikes)?;
    let t = args.maturity;
    let hash = hash_of(
        "price",
        &[format!("maturity={t}"), format!("strikes={}", args.strikes)],
        &loaded.raw,
    );
    let s0 = loaded.model.spec.s0();
    let rd = loaded.curve.integrated_rate(0.0, t, Leg::Domestic)?;
    let rf = loaded.curve.integrated_rate(0.0, t, Leg::Foreign)?;

    let mut body = String::new();
    body.push_str(&util::csv_header(hash, 0));
    body.push_str("strike,price,implied_vol_annualized\n");
    for &k in &strikes {
        let price = mixture_call(&loaded.model, k, t)?;
        let vol = implied_vol(price, s0, k, t, rd, rf).ok().map(|v| v / t.sqrt());
        let vol_cell = match vol {
            Some(v) => format!("{v:.8}"),
            None => "NA".to_string(),
        };
        body.push_str(&format!("{k:.6},{price:.10},{vol_cell}\n"));
    }
    let mut w = util::out_writer(args.out.as_ref())?;
    w.write_all(body.as_bytes())?;
    w.flush()?;
    Ok(0)
}

// ------------------------------------------------------------ calibrate --

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// Implied-vol quote CSV with columns maturity,strike,implied_vol.
    #[arg(long, value_name = "FILE")]
    quotes: PathBuf,
    /// Number of mixture components.
    #[arg(long)]
    m: usize,
    /// Spot level the mixture starts from.
    #[arg(long)]
    s0: f64,
    /// Yield-curve document (JSON); omitted means zero rates on both legs.
    #[arg(long, value_name = "FILE")]
    curve: Option<PathBuf>,
    /// Regularization horizon epsilon.
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    /// Residual space: vol or price.
    #[arg(long, default_value = "vol")]
    loss: String,
    /// Warm-start model document added to the deterministic multi-start set.
    #[arg(long, value_name = "FILE")]
    init: Option<PathBuf>,
    /// Output model JSON path (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

pub fn run_calibrate(args: &CalibrateArgs) -> Result<i32> {
    let quote_text = util::read_file(&args.quotes)?;
    let rows = util::read_quotes(&args.quotes)?;
    let quotes: Vec<SmilePoint> = rows
        .iter()
        .map(|&(t, k, iv)| SmilePoint::new(0.0, t, k, iv).map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;
    let (curve, curve_json) = match &args.curve {
        Some(path) => {
            let json = util::read_file(path)?;
            (CurveDocument::from_json(&json)?.to_curve()?, json)
        }
        None => (YieldCurve::zero_rates(100.0), String::new()),
    };
    let init_doc = args.init.as_ref().map(|p| util::read_file(p)).transpose()?;
    let init_spec = init_doc
        .as_deref()
        .map(|json| ModelDocument::from_json(json)?.to_spec().map_err(anyhow::Error::from))
        .transpose()?;

    let mut problem = CalibrationProblem::new(quotes, args.s0, curve, args.m)?;
    problem.epsilon = args.epsilon;
    problem.loss = match args.loss.as_str() {
        "vol" => LossSpace::VolSpace,
        "price" => LossSpace::PriceSpace,
        other => bail!("loss must be vol or price, got '{other}'"),
    };

    let hash = util::config_hash(
        "calibrate",
        &[
            format!("m={}", args.m),
            format!("s0={}", args.s0),
            format!("epsilon={}", args.epsilon),
            format!("loss={}", args.loss),
        ],
        &[&quote_text, &curve_json, init_doc.as_deref().unwrap_or("")],
    );

    let result = calibrate(&problem, init_spec.as_ref())?;

    let mut doc = ModelDocument::from_spec(&result.spec);
    doc.meta = Some(json!({
        "tool": "mixdyn calibrate",
        "config_hash": format!("{hash:016x}"),
        "seed": 0,
        "loss_value": result.loss_value,
        "iterations": result.iterations,
        "converged": result.converged,
    }));
    let mut w = util::out_writer(args.out.as_ref())?;
    w.write_all(doc.to_json().as_bytes())?;
    w.flush()?;

    let worst = result.residuals.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    eprintln!(
        "calibrate: m={} loss={:.6e} iterations={} converged={} worst residual={:.3e}",
        args.m, result.loss_value, result.iterations, result.converged, worst
    );
    for (i, ((t, k, iv), r)) in rows.iter().zip(&result.residuals).enumerate() {
        eprintln!("  quote {i}: T={t} K={k} market_iv={iv:.6} residual={r:+.3e}");
    }
    let pairs: Vec<String> = result
        .spec
        .weights()
        .iter()
        .zip(result.spec.vol_levels(1.0))
        .map(|(l, nu)| format!("({l:.6}, {nu:.6})"))
        .collect();
    eprintln!("  components (lambda, nu at t=1): {}", pairs.join(" "));
    Ok(if result.converged { 0 } else { 1 })
}

// ------------------------------------------------------------- simulate --

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    model: ModelInput,
    /// Path engine: local-vol or uncertain-vol.
    #[arg(long, default_value = "local-vol")]
    engine: String,
    /// Number of Monte Carlo paths.
    #[arg(long, default_value_t = 10_000)]
    paths: usize,
    /// Time step in years.
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// Simulation horizon in years.
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    /// Start time.
    #[arg(long, default_value_t = 0.0)]
    t_start: f64,
    /// Start state; defaults to the model's s0 (lognormal) or 0 (normal).
    #[arg(long)]
    s_start: Option<f64>,
    /// Stepping scheme: euler-log, euler-level or milstein-level.
    #[arg(long, default_value = "euler-log")]
    scheme: String,
    /// RNG seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Recording times (comma list, grid-aligned, ending at the horizon).
    #[arg(long)]
    record: Option<String>,
    /// Keep every k-th path in the dump (all paths still drive the summary).
    #[arg(long, default_value_t = 1)]
    thin: usize,
    /// Dump format: csv, or bin (JSON header line + row-major f64 LE).
    #[arg(long, default_value = "csv")]
    format: String,
    /// Output path (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

pub fn run_simulate(args: &SimulateArgs) -> Result<i32> {
    let loaded = args.model.load()?;
    let engine: Engine = args.engine.parse()?;
    let scheme: Scheme = args.scheme.parse()?;
    if args.thin < 1 {
        bail!("--thin must be >= 1");
    }
    let s_start = args.s_start.unwrap_or(match loaded.model.mode {
        Mode::LognormalMixture => loaded.model.spec.s0(),
        Mode::NormalMixture => 0.0,
    });
    let mut cfg = SimConfig::new(
        args.paths,
        args.dt,
        scheme,
        args.seed,
        args.t_start,
        s_start,
        args.horizon,
    )?;
    if let Some(times) = &args.record {
        cfg = cfg.with_record_times(util::parse_grid(times)?)?;
    }
    let hash = hash_of(
        "simulate",
        &[
            format!("engine={engine}"),
            format!("paths={}", args.paths),
            format!("dt={}", args.dt),
            format!("horizon={}", args.horizon),
            format!("t_start={}", args.t_start),
            format!("s_start={s_start}"),
            format!("scheme={scheme}"),
            format!("record={}", args.record.as_deref().unwrap_or("")),
            format!("thin={}", args.thin),
        ],
        &loaded.raw,
    );

    let ensemble = match engine {
        Engine::LocalVol => simulate_local_vol(&loaded.model, &cfg)?,
        Engine::UncertainVol => simulate_uncertain_vol(&loaded.model, &cfg)?,
    };

    let mut columns: Vec<String> = vec!["path".into()];
    if ensemble.scenario_labels.is_some() {
        columns.push("label".into());
    }
    for &t in &ensemble.grid {
        columns.push(format!("s@{t}"));
    }
    columns.push(format!("ivar@{}", args.horizon));

    let n = ensemble.n_paths();
    let row_of = |p: usize| -> Vec<f64> {
        let mut row = vec![p as f64];
        if let Some(labels) = &ensemble.scenario_labels {
            row.push(labels[p] as f64);
        }
        for states in &ensemble.paths {
            row.push(states[p]);
        }
        row.push(ensemble.terminal_avg_variance()[p]);
        row
    };

    let mut w = util::out_writer(args.out.as_ref())?;
    match args.format.as_str() {
        "csv" => {
            w.write_all(util::csv_header(hash, args.seed).as_bytes())?;
            writeln!(w, "{}", columns.join(","))?;
            for p in (0..n).step_by(args.thin) {
                let row = row_of(p);
                let mut cells = vec![format!("{}", p)];
                if ensemble.scenario_labels.is_some() {
                    cells.push(format!("{}", row[1] as usize));
                }
                let skip = cells.len();
                cells.extend(row.iter().skip(skip).map(|v| format!("{v:.10e}")));
                writeln!(w, "{}", cells.join(","))?;
            }
        }
        "bin" => {
            let rows = (n + args.thin - 1) / args.thin;
            let header = json!({
                "artifact_version": 1,
                "config_hash": format!("{hash:016x}"),
                "seed": args.seed,
                "columns": columns,
                "rows": rows,
                "dtype": "f64le",
            });
            writeln!(w, "{header}")?;
            for p in (0..n).step_by(args.thin) {
                for v in row_of(p) {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        other => bail!("format must be csv or bin, got '{other}'"),
    }
    w.flush()?;

    let terminal = ensemble.terminal();
    let (mean, se) = stats::mean_se(terminal)?;
    let (vbar, _) = stats::mean_se(ensemble.terminal_avg_variance())?;
    eprintln!(
        "simulate: {} paths kept ({} rejected), terminal mean {:.6} (se {:.2e}), \
         mean accumulated variance {:.6}",
        n, ensemble.rejected, mean, se, vbar
    );
    Ok(0)
}

// ------------------------------------------------------------- localvol --

#[derive(Args, Debug)]
pub struct LocalvolArgs {
    #[command(flatten)]
    model: ModelInput,
    /// Evaluation times: comma list or lo:hi:step range.
    #[arg(long)]
    t: String,
    /// State levels: comma list or lo:hi:step range.
    #[arg(long)]
    y: String,
    /// Output CSV path (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

pub fn run_localvol(args: &LocalvolArgs) -> Result<i32> {
    let loaded = args.model.load()?;
    let ts = util::parse_grid(&args.t)?;
    let ys = util::parse_grid(&args.y)?;
    let hash = hash_of(
        "localvol",
        &[format!("t={}", args.t), format!("y={}", args.y)],
        &loaded.raw,
    );
    let mut body = String::new();
    body.push_str(&util::csv_header(hash, 0));
    body.push_str("t,y,drift,diffusion2,sigma_mix2\n");
    for &t in &ts {
        for &y in &ys {
            let (drift, diff2, sig2) = match loaded.model.mode {
                Mode::LognormalMixture => {
                    let s2 = sigma_mix_squared(&loaded.model, t, y)?;
                    let r = loaded.curve.drift_rate(t)?;
                    (r * y, s2 * y * y, format!("{s2:.10e}"))
                }
                Mode::NormalMixture => {
                    let (f, a2) = normal_mixture_coefficients(&loaded.model, t, y)?;
                    (f, a2, "NA".to_string())
                }
            };
            body.push_str(&format!("{t},{y},{drift:.10e},{diff2:.10e},{sig2}\n"));
        }
    }
    let mut w = util::out_writer(args.out.as_ref())?;
    w.write_all(body.as_bytes())?;
    w.flush()?;
    Ok(0)
}

// --------------------------------------------------------------- verify --

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    model: ModelInput,
    /// all, or a comma list of terminal-corr, avg-var-corr, posterior,
    /// fokker-planck, normal-mixture-covariance.
    #[arg(long, default_value = "all")]
    check: String,
    /// Monte Carlo paths per suite.
    #[arg(long, default_value_t = 50_000)]
    paths: usize,
    /// Time step for the local-vol ensemble.
    #[arg(long, default_value_t = 0.005)]
    dt: f64,
    /// Check horizon in years.
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    /// RNG seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output JSON path (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct Suite {
    name: String,
    status: String,
    metrics: serde_json::Value,
    tolerances: serde_json::Value,
    note: String,
}

impl Suite {
    fn skipped(name: &str, note: &str) -> Self {
        Self {
            name: name.into(),
            status: "skipped".into(),
            metrics: json!({}),
            tolerances: json!({}),
            note: note.into(),
        }
    }
}

#[derive(serde::Serialize)]
struct VerifyReport {
    artifact_version: u32,
    config_hash: String,
    seed: u64,
    suites: Vec<Suite>,
}

const SUITE_NAMES: [&str; 5] =
    ["terminal-corr", "avg-var-corr", "posterior", "fokker-planck", "normal-mixture-covariance"];

pub fn run_verify(args: &VerifyArgs) -> Result<i32> {
    let loaded = args.model.load()?;
    let checks: Vec<String> = if args.check == "all" {
        SUITE_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        let list: Vec<String> = args.check.split(',').map(|s| s.trim().to_string()).collect();
        for c in &list {
            if !SUITE_NAMES.contains(&c.as_str()) {
                bail!("unknown check '{c}' (expected all or one of {})", SUITE_NAMES.join(", "));
            }
        }
        list
    };
    let hash = hash_of(
        "verify",
        &[
            format!("check={}", args.check),
            format!("paths={}", args.paths),
            format!("dt={}", args.dt),
            format!("horizon={}", args.horizon),
        ],
        &loaded.raw,
    );

    // The local-vol origin ensemble is shared by both correlation suites.
    let mut lv_ensemble: Option<PathEnsemble> = None;
    let mut lv = |model: &LocalVolModel| -> Result<PathEnsemble> {
        if lv_ensemble.is_none() {
            let (scheme, s_start) = match model.mode {
                Mode::LognormalMixture => (Scheme::EulerLog, model.spec.s0()),
                Mode::NormalMixture => (Scheme::EulerLevel, 0.0),
            };
            let cfg = SimConfig::new(
                args.paths,
                args.dt,
                scheme,
                args.seed,
                0.0,
                s_start,
                args.horizon,
            )?;
            lv_ensemble = Some(simulate_local_vol(model, &cfg)?);
        }
        Ok(lv_ensemble.clone().expect("just filled"))
    };

    let mut suites = Vec::new();
    for name in &checks {
        let suite = match name.as_str() {
            "terminal-corr" => suite_terminal_corr(&loaded, args, &mut lv)?,
            "avg-var-corr" => suite_avg_var_corr(&loaded, &mut lv)?,
            "posterior" => suite_posterior(&loaded, args)?,
            "fokker-planck" => suite_fokker_planck(&loaded, args)?,
            "normal-mixture-covariance" => suite_normal_cov(&loaded, args)?,
            _ => unreachable!("validated above"),
        };
        suites.push(suite);
    }

    let failed = suites.iter().any(|s| s.status == "fail");
    for s in &suites {
        eprintln!("verify: {:<28} {:<7} {}", s.name, s.status, s.note);
    }
    let report = VerifyReport {
        artifact_version: 1,
        config_hash: format!("{hash:016x}"),
        seed: args.seed,
        suites,
    };
    let mut w = util::out_writer(args.out.as_ref())?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    w.write_all(text.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(if failed { 1 } else { 0 })
}

fn suite_terminal_corr(
    loaded: &Loaded,
    args: &VerifyArgs,
    lv: &mut impl FnMut(&LocalVolModel) -> Result<PathEnsemble>,
) -> Result<Suite> {
    if loaded.model.mode != Mode::LognormalMixture {
        return Ok(Suite::skipped("terminal-corr", "requires the lognormal mode"));
    }
    if loaded.model.spec.m() == 1 {
        return Ok(Suite::skipped(
            "terminal-corr",
            "single component: sigma_mix^2 is deterministic; degenerate, skipped",
        ));
    }
    let model = &loaded.model;
    let ens = lv(model)?;
    let rep = terminal_corr_spot_vol(&ens, model, args.horizon)?;
    let quad_cov = zero_covariance_quadrature(model, args.horizon)?;

    // Moment identity E{sigma_mix^2 S} = s0 e^R sum lambda nu^2 by
    // quadrature: the Monte Carlo version of this moment carries an O(dt)
    // weak bias, so the correlation is checked on paths and the moment on
    // the closed-form density.
    let t = args.horizon;
    let params = model.spec.component_params(&model.curve, t)?;
    let lo = params.iter().map(|&(m, v2)| m - 8.5 * v2.sqrt()).fold(f64::INFINITY, f64::min).exp();
    let hi =
        params.iter().map(|&(m, v2)| m + 8.5 * v2.sqrt()).fold(f64::NEG_INFINITY, f64::max).exp();
    let integrand = |y: f64| {
        sigma_mix_squared(model, t, y).expect("interior point")
            * y
            * mixture_density(&model.spec, &model.curve, t, y).expect("interior point")
    };
    let (moment_quad, _) = quad::integrate(&integrand, lo, hi, 1e-12)?;
    let moment_rel = (moment_quad - rep.analytic_moment_sigma2_s).abs()
        / rep.analytic_moment_sigma2_s;

    let corr_ok = rep.corr.estimate.abs() <= 3.0 * rep.corr.std_error;
    let pass = corr_ok && quad_cov.abs() <= 1e-8 && moment_rel <= 1e-8;
    Ok(Suite {
        name: "terminal-corr".into(),
        status: if pass { "pass" } else { "fail" }.into(),
        metrics: json!({
            "corr": rep.corr.estimate,
            "corr_se": rep.corr.std_error,
            "n": rep.corr.n,
            "moment_quadrature": moment_quad,
            "moment_analytic": rep.analytic_moment_sigma2_s,
            "moment_rel_gap": moment_rel,
            "quadrature_cov": quad_cov,
        }),
        tolerances: json!({
            "corr": "3 standard errors of 0",
            "moment_rel_gap": 1e-8,
            "quadrature_cov": 1e-8,
        }),
        note: format!(
            "corr {:+.4} (se {:.4}); moment rel {:.1e}; quadrature cov {:.1e}",
            rep.corr.estimate, rep.corr.std_error, moment_rel, quad_cov
        ),
    })
}

fn suite_avg_var_corr(
    loaded: &Loaded,
    lv: &mut impl FnMut(&LocalVolModel) -> Result<PathEnsemble>,
) -> Result<Suite> {
    if loaded.model.mode != Mode::LognormalMixture {
        return Ok(Suite::skipped(
            "avg-var-corr",
            "zero-correlation identity holds in the lognormal mode; \
             normal-mode covariance is generally nonzero",
        ));
    }
    if loaded.model.spec.m() == 1 {
        return Ok(Suite::skipped(
            "avg-var-corr",
            "single component: accumulated variance is deterministic; degenerate, skipped",
        ));
    }
    let ens = lv(&loaded.model)?;
    let rep = terminal_corr_avg_variance(&ens)?;
    let pass = rep.estimate.abs() <= 3.0 * rep.std_error;
    Ok(Suite {
        name: "avg-var-corr".into(),
        status: if pass { "pass" } else { "fail" }.into(),
        metrics: json!({
            "corr": rep.estimate,
            "corr_se": rep.std_error,
            "n": rep.n,
        }),
        tolerances: json!({ "corr": "3 standard errors of 0" }),
        note: format!("corr {:+.4} (se {:.4})", rep.estimate, rep.std_error),
    })
}

fn suite_posterior(loaded: &Loaded, args: &VerifyArgs) -> Result<Suite> {
    if loaded.model.mode != Mode::LognormalMixture {
        return Ok(Suite::skipped("posterior", "requires the lognormal mode"));
    }
    let model = &loaded.model;
    let m = model.spec.m();
    let h = args.horizon;

    // Bayes identity E{xi^2 | S_t = x} = sigma_mix^2(t, x) on a (t, x) grid.
    let mut worst_rel = 0.0f64;
    let mut worst_norm = 0.0f64;
    for &t in &[0.25 * h, 0.5 * h, h] {
        let sbar = expected_spot(model, t)?;
        for f in [0.85, 0.95, 1.0, 1.05, 1.15] {
            let x = sbar * f;
            let (weights, cvar) = posterior_weights_check(model, t, x)?;
            let target = sigma_mix_squared(model, t, x)?;
            worst_rel = worst_rel.max((cvar - target).abs() / target);
            worst_norm = worst_norm.max((weights.iter().sum::<f64>() - 1.0).abs());
        }
    }

    // Scenario-label frequencies near x against Lambda_k(T, x). The
    // uncertain-vol transitions are exact, so a coarse step only sets the
    // recording grid.
    let cfg = SimConfig::new(
        args.paths,
        0.01,
        Scheme::EulerLog,
        args.seed + 1,
        0.0,
        model.spec.s0(),
        h,
    )?;
    let uv = simulate_uncertain_vol(model, &cfg)?;
    let sbar = expected_spot(model, h)?;
    let mut worst_z = 0.0f64;
    for f in [0.95, 1.0, 1.05] {
        let x = sbar * f;
        let (freqs, ses) = posterior_label_frequencies(&uv, x, m, None)?;
        let lam = lambda_weights(&model.spec, &model.curve, h, x)?;
        for k in 0..m {
            if ses[k] > 0.0 {
                worst_z = worst_z.max((freqs[k] - lam[k]).abs() / ses[k]);
            }
        }
    }

    let pass = worst_rel <= 1e-12 && worst_norm <= 1e-12 && worst_z <= 3.0;
    Ok(Suite {
        name: "posterior".into(),
        status: if pass { "pass" } else { "fail" }.into(),
        metrics: json!({
            "identity_worst_rel": worst_rel,
            "weight_norm_worst": worst_norm,
            "label_freq_worst_z": worst_z,
        }),
        tolerances: json!({
            "identity_worst_rel": 1e-12,
            "weight_norm_worst": 1e-12,
            "label_freq": "3 standard errors",
        }),
        note: format!("identity rel {worst_rel:.1e}; label |z| max {worst_z:.2}"),
    })
}

fn suite_fokker_planck(loaded: &Loaded, args: &VerifyArgs) -> Result<Suite> {
    // The forward evolution starts from t = 2 epsilon; tiny calibration-size
    // epsilons make that start needlessly stiff, so the check raises epsilon
    // to 5e-3. The marginal at the horizon is epsilon-insensitive.
    let eps_used = loaded.doc.epsilon.max(5e-3);
    let raised = eps_used > loaded.doc.epsilon;
    let mut doc = loaded.doc.clone();
    doc.epsilon = eps_used;
    let model = doc.to_model(loaded.curve.clone())?;
    let t_end = args.horizon;
    if t_end <= 2.5 * eps_used {
        bail!("fokker-planck horizon {t_end} too close to the start t = 2 epsilon");
    }

    let n_grid = 2000usize;
    let (grid, weights): (Vec<f64>, Vec<f64>) = match model.mode {
        Mode::LognormalMixture => {
            let spec = &model.spec;
            let mut nu_max = 0.0f64;
            for &t in &[2.0 * eps_used, 0.25 * t_end, 0.5 * t_end, 0.75 * t_end, t_end] {
                nu_max = spec.vol_levels(t).iter().fold(nu_max, |a, &v| a.max(v));
            }
            let r_abs = model.curve.drift_integral(0.0, t_end)?.abs();
            let half = (4.2 * nu_max * t_end.sqrt() + r_abs + 0.15).max(0.5);
            let grid = log_uniform_grid(spec.s0(), half, n_grid)?;
            let ln_step = (grid[n_grid - 1] / grid[0]).ln() / (n_grid - 1) as f64;
            let weights = grid.iter().map(|y| y * ln_step).collect();
            (grid, weights)
        }
        Mode::NormalMixture => {
            let comps = match model.spec.components() {
                ComponentSet::Normal(c) => c.clone(),
                _ => unreachable!("normal mode"),
            };
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for c in &comps {
                let mean = c.mean(t_end)?;
                let sd = c.variance(t_end)?.sqrt();
                lo = lo.min(mean - 6.0 * sd);
                hi = hi.max(mean + 6.0 * sd);
            }
            let h = (hi - lo) / (n_grid - 1) as f64;
            let grid: Vec<f64> = (0..n_grid).map(|i| lo + i as f64 * h).collect();
            let weights = vec![h; n_grid];
            (grid, weights)
        }
    };

    let result = fokker_planck_evolve(&model, &grid, t_end)?;
    let mut l1 = 0.0;
    for ((&y, &p), &w) in grid.iter().zip(&result.density).zip(&weights) {
        let q = mixture_density(&model.spec, &model.curve, t_end, y)?;
        l1 += (p - q).abs() * w;
    }
    let pass = l1 < 1e-3 && result.mass_drift.abs() < 1e-6;
    let note = if raised {
        format!("L1 {l1:.2e}; epsilon raised to {eps_used} for the evolution start")
    } else {
        format!("L1 {l1:.2e}")
    };
    Ok(Suite {
        name: "fokker-planck".into(),
        status: if pass { "pass" } else { "fail" }.into(),
        metrics: json!({
            "l1_distance": l1,
            "mass_drift": result.mass_drift,
            "steps": result.steps,
            "grid_points": n_grid,
            "epsilon_used": eps_used,
        }),
        tolerances: json!({ "l1_distance": 1e-3, "mass_drift": 1e-6 }),
        note,
    })
}

fn suite_normal_cov(loaded: &Loaded, args: &VerifyArgs) -> Result<Suite> {
    // Reference identities, independent of the loaded model: equal means
    // give an exactly zero covariance, and the half-half mixture with means
    // +-1 and sds (1, 2) at t = 1 gives -1.5.
    let eq = MixtureSpec::normal(
        vec![0.6, 0.4],
        vec![
            GaussianComponent::new(DriftCurve::constant(0.03), VolCurve::constant(0.15)?),
            GaussianComponent::new(DriftCurve::constant(0.03), VolCurve::constant(0.4)?),
        ],
        1e-3,
    )?;
    let cov_eq = normal_mixture_covariance(&eq, 1.0)?;
    let hand = MixtureSpec::normal(
        vec![0.5, 0.5],
        vec![
            GaussianComponent::new(DriftCurve::constant(1.0), VolCurve::constant(1.0)?),
            GaussianComponent::new(DriftCurve::constant(-1.0), VolCurve::constant(2.0)?),
        ],
        0.0,
    )?;
    let cov_hand = normal_mixture_covariance(&hand, 1.0)?;

    let mc = |spec: &MixtureSpec, t: f64, seed: u64, n: usize| -> Result<(f64, f64)> {
        let comps = match spec.components() {
            ComponentSet::Normal(c) => c.clone(),
            _ => bail!("normal covariance needs a normal-mode spec"),
        };
        let weights = spec.weights();
        let mut r = rng::path_rng(seed, 0);
        let (mut ys, mut vs) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let u: f64 = r.gen();
            let mut k = 0;
            let mut cum = 0.0;
            for (i, &wk) in weights.iter().enumerate() {
                cum += wk;
                if u < cum {
                    k = i;
                    break;
                }
                k = i;
            }
            let mean = comps[k].mean(t)?;
            let sd = comps[k].variance(t)?.sqrt();
            ys.push(mean + sd * rng::standard_normal(&mut r));
            vs.push(comps[k].vol.level(t).powi(2));
        }
        let my = ys.iter().sum::<f64>() / n as f64;
        let mv = vs.iter().sum::<f64>() / n as f64;
        let prods: Vec<f64> = ys.iter().zip(&vs).map(|(y, v)| (y - my) * (v - mv)).collect();
        Ok(stats::mean_se(&prods)?)
    };

    let n = args.paths.max(20_000);
    let (mc_hand, se_hand) = mc(&hand, 1.0, args.seed + 2, n)?;
    let z_hand = (mc_hand - cov_hand).abs() / se_hand;
    let mut pass = cov_eq.abs() <= 1e-16 && (cov_hand + 1.5).abs() <= 1e-12 && z_hand <= 3.0;

    let mut metrics = json!({
        "equal_means_cov": cov_eq,
        "hand_case_cov": cov_hand,
        "hand_case_mc": mc_hand,
        "hand_case_mc_se": se_hand,
    });
    let mut note = format!("equal-means {cov_eq:.1e}; hand case {cov_hand:.6} (MC z {z_hand:.2})");
    if loaded.doc.mode == ModeTag::Normal {
        let cov_model = normal_mixture_covariance(&loaded.model.spec, args.horizon)?;
        let (mc_model, se_model) = mc(&loaded.model.spec, args.horizon, args.seed + 3, n)?;
        let z_model = (mc_model - cov_model).abs() / se_model;
        pass = pass && z_model <= 3.0;
        metrics["model_cov"] = json!(cov_model);
        metrics["model_mc"] = json!(mc_model);
        metrics["model_mc_se"] = json!(se_model);
        note = format!("{note}; model cov {cov_model:.6} (MC z {z_model:.2})");
    }
    Ok(Suite {
        name: "normal-mixture-covariance".into(),
        status: if pass { "pass" } else { "fail" }.into(),
        metrics,
        tolerances: json!({
            "equal_means_cov": 1e-16,
            "hand_case_cov": "|cov + 1.5| <= 1e-12",
            "monte_carlo": "3 standard errors",
        }),
        note,
    })
}

// -------------------------------------------------- conditional smiles --

struct SmileRow {
    t: f64,
    expected_spot: f64,
    points: Vec<ForwardSmilePoint>,
}

struct SmileRun {
    engine: Engine,
    paths: usize,
    dt: f64,
    scheme: Scheme,
    seed: u64,
}

/// One conditional smile per observation time; row seeds are
/// seed + round(t) so reruns of a single row are reproducible.
fn compute_rows(
    model: &LocalVolModel,
    ts: &[f64],
    tenor: f64,
    moneyness: &[f64],
    run: &SmileRun,
) -> Result<Vec<SmileRow>> {
    let mut rows = Vec::with_capacity(ts.len());
    for &t in ts {
        let row_seed = run.seed.wrapping_add(t.round() as u64);
        let sim =
            SimConfig::new(run.paths, run.dt, run.scheme, row_seed, 0.0, 1.0, tenor)?;
        let req = ForwardSmileRequest::new(
            model.clone(),
            t,
            t + tenor,
            moneyness.to_vec(),
            sim,
            run.engine,
        )?;
        let points = conditional_future_smile(&req)?;
        rows.push(SmileRow { t, expected_spot: expected_spot(model, t)?, points });
    }
    Ok(rows)
}

fn write_smile_csv(
    w: &mut dyn Write,
    hash: u64,
    run: &SmileRun,
    tenor: f64,
    moneyness: &[f64],
    rows: &[SmileRow],
) -> Result<()> {
    w.write_all(util::csv_header(hash, run.seed).as_bytes())?;
    writeln!(
        w,
        "# engine={} paths={} dt={} scheme={} tenor={} cells=annualized implied vol in percent",
        run.engine, run.paths, run.dt, run.scheme, tenor
    )?;
    let labels: Vec<String> = moneyness.iter().map(|m| format!("{m}")).collect();
    writeln!(w, "t,expected_spot,{}", labels.join(","))?;
    for row in rows {
        let cells: Vec<String> = row.points.iter().map(|p| util::pct_or_na(p.vol)).collect();
        writeln!(w, "{},{:.6},{}", row.t, row.expected_spot, cells.join(","))?;
    }
    Ok(())
}

fn row_excursion(points: &[ForwardSmilePoint]) -> Option<f64> {
    let vols: Vec<f64> = points.iter().filter_map(|p| p.vol).collect();
    let hi = vols.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = vols.iter().copied().fold(f64::INFINITY, f64::min);
    if vols.is_empty() {
        None
    } else {
        Some(hi - lo)
    }
}

#[derive(Args, Debug)]
pub struct ForwardSmileArgs {
    #[command(flatten)]
    model: ModelInput,
    /// Smile observation times: comma list or lo:hi:step range.
    #[arg(long)]
    t: String,
    /// Option tenor in years; each row prices maturity t + tenor.
    #[arg(long, default_value_t = 1.0)]
    tenor: f64,
    /// Strike-to-forward-spot ratios K / Sbar_t: comma list or range.
    #[arg(long, default_value = "0.8:1.2:0.05")]
    moneyness: String,
    /// Restart engine: local-vol (Monte Carlo) or uncertain-vol (closed form).
    #[arg(long, default_value = "local-vol")]
    engine: String,
    /// Monte Carlo paths per row.
    #[arg(long, default_value_t = 200_000)]
    paths: usize,
    /// Time step in years.
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// Stepping scheme for the local-vol engine.
    #[arg(long, default_value = "euler-log")]
    scheme: String,
    /// Base RNG seed; row seeds are seed + round(t).
    #[arg(long, default_value_t = 9000)]
    seed: u64,
    /// Output CSV path (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

pub fn run_forward_smile(args: &ForwardSmileArgs) -> Result<i32> {
    let loaded = args.model.load()?;
    let ts = util::parse_grid(&args.t)?;
    let moneyness = util::parse_grid(&args.moneyness)?;
    let run = SmileRun {
        engine: args.engine.parse()?,
        paths: args.paths,
        dt: args.dt,
        scheme: args.scheme.parse()?,
        seed: args.seed,
    };
    let hash = hash_of(
        "forward-smile",
        &[
            format!("t={}", args.t),
            format!("tenor={}", args.tenor),
            format!("moneyness={}", args.moneyness),
            format!("engine={}", args.engine),
            format!("paths={}", args.paths),
            format!("dt={}", args.dt),
            format!("scheme={}", args.scheme),
        ],
        &loaded.raw,
    );

    let rows = compute_rows(&loaded.model, &ts, args.tenor, &moneyness, &run)?;
    let mut w = util::out_writer(args.out.as_ref())?;
    write_smile_csv(&mut w, hash, &run, args.tenor, &moneyness, &rows)?;
    w.flush()?;

    for row in &rows {
        let max_se = row.points.iter().fold(0.0f64, |a, p| a.max(p.std_error));
        match row_excursion(&row.points) {
            Some(exc) => eprintln!(
                "forward-smile: t={} excursion {:.2} vol points, max price se {:.1e}",
                row.t,
                100.0 * exc,
                max_se
            ),
            None => eprintln!(
                "forward-smile: t={} no invertible cells, max price se {:.1e}",
                row.t, max_se
            ),
        }
    }
    Ok(0)
}

// ------------------------------------------------------ reproduce-table2 --

#[derive(Args, Debug)]
pub struct ReproduceArgs {
    /// Monte Carlo paths per row; below 200000 the run is flagged as smoke
    /// mode and tolerances widen by sqrt(200000 / paths).
    #[arg(long, default_value_t = 200_000)]
    paths: usize,
    /// Time step in years.
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// Base RNG seed; row seeds are seed + round(t).
    #[arg(long, default_value_t = 9000)]
    seed: u64,
    /// Override the embedded model document.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the embedded curve document.
    #[arg(long, value_name = "FILE")]
    curve: Option<PathBuf>,
    /// Override the embedded reference grid CSV.
    #[arg(long, value_name = "FILE")]
    reference: Option<PathBuf>,
    /// Output CSV path for the computed grid (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

struct ReferenceGrid {
    moneyness: Vec<f64>,
    /// (t, published expected spot, published vols in percent).
    rows: Vec<(f64, f64, Vec<f64>)>,
}

fn parse_reference(text: &str) -> Result<ReferenceGrid> {
    let mut lines = text.lines().filter(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| anyhow!("reference grid is empty"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "t" || cols[1] != "expected_spot" {
        bail!("reference header must be t,expected_spot,<moneyness...>");
    }
    let moneyness: Vec<f64> = cols[2..]
        .iter()
        .map(|c| c.parse::<f64>().with_context(|| format!("reference moneyness '{c}'")))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 2 + moneyness.len() {
            bail!("reference row {} has {} cells, expected {}", i + 1, cells.len(), 2 + moneyness.len());
        }
        let num = |s: &str| -> Result<f64> {
            s.trim().parse::<f64>().with_context(|| format!("reference row {} cell '{s}'", i + 1))
        };
        let t = num(cells[0])?;
        let sbar = num(cells[1])?;
        let vols: Vec<f64> = cells[2..].iter().map(|c| num(c)).collect::<Result<_>>()?;
        rows.push((t, sbar, vols));
    }
    if rows.is_empty() {
        bail!("reference grid has no data rows");
    }
    Ok(ReferenceGrid { moneyness, rows })
}

pub fn run_reproduce(args: &ReproduceArgs) -> Result<i32> {
    let model_json = match &args.config {
        Some(p) => util::read_file(p)?,
        None => EMBEDDED_MODEL.to_string(),
    };
    let curve_json = match &args.curve {
        Some(p) => util::read_file(p)?,
        None => EMBEDDED_CURVE.to_string(),
    };
    let reference_csv = match &args.reference {
        Some(p) => util::read_file(p)?,
        None => EMBEDDED_REFERENCE.to_string(),
    };
    let curve = CurveDocument::from_json(&curve_json)?.to_curve()?;
    let model = ModelDocument::from_json(&model_json)?.to_model(curve)?;
    let reference = parse_reference(&reference_csv)?;

    let full_paths = 200_000usize;
    let widen = ((full_paths as f64 / args.paths as f64).sqrt()).max(1.0);
    let smoke = args.paths < full_paths;
    let tol_closed = 0.05;
    let tol_mc = 0.3 * widen;
    let tenor = 1.0;

    let run = SmileRun {
        engine: Engine::LocalVol,
        paths: args.paths,
        dt: args.dt,
        scheme: Scheme::EulerLog,
        seed: args.seed,
    };
    let hash = util::config_hash(
        "reproduce-table2",
        &[format!("paths={}", args.paths), format!("dt={}", args.dt)],
        &[&model_json, &curve_json, &reference_csv],
    );
    if smoke {
        eprintln!(
            "reproduce-table2: smoke mode at {} paths; tolerances widened x{:.2} \
             (0.3 -> {:.2} vol points on Monte Carlo rows)",
            args.paths, widen, tol_mc
        );
    }

    let ts: Vec<f64> = reference.rows.iter().map(|r| r.0).collect();
    let rows = compute_rows(&model, &ts, tenor, &reference.moneyness, &run)?;

    let mut w = util::out_writer(args.out.as_ref())?;
    write_smile_csv(&mut w, hash, &run, tenor, &reference.moneyness, &rows)?;
    if smoke {
        writeln!(w, "# smoke_mode=true tolerance_widening={widen:.4}")?;
    }
    w.flush()?;

    // Per-cell deviations against the published grid, in vol points.
    let mut offenders: Vec<String> = Vec::new();
    let mut total = 0usize;
    for (row, (t, _, ref_vols)) in rows.iter().zip(&reference.rows) {
        let tol = if *t == 0.0 { tol_closed } else { tol_mc };
        let mut devs = Vec::with_capacity(ref_vols.len());
        for (point, &ref_pct) in row.points.iter().zip(ref_vols) {
            total += 1;
            match point.vol {
                Some(v) => {
                    let dev = 100.0 * v - ref_pct;
                    devs.push(format!("{dev:+.2}"));
                    if dev.abs() > tol {
                        offenders.push(format!(
                            "(t={t}, K/S={:.2}): {:.2} vs {ref_pct:.2} ({dev:+.2} vp)",
                            point.moneyness,
                            100.0 * v
                        ));
                    }
                }
                None => {
                    devs.push("NA".to_string());
                    offenders.push(format!(
                        "(t={t}, K/S={:.2}): no implied vol (price {:.2e}, se {:.2e})",
                        point.moneyness, point.price, point.std_error
                    ));
                }
            }
        }
        eprintln!("reproduce-table2: t={t} deviations (vp): {} [tol {tol:.2}]", devs.join(" "));
    }

    if offenders.is_empty() {
        eprintln!("reproduce-table2: PASS ({total} cells within tolerance)");
        Ok(0)
    } else {
        eprintln!(
            "reproduce-table2: FAIL ({} of {total} cells outside tolerance): {}",
            offenders.len(),
            offenders.join("; ")
        );
        Ok(1)
    }
}
