//! Sample statistics used by the verification suites.

use crate::error::{ModelError, Result};

/// Sample mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> Result<(f64, f64)> {
    let n = xs.len();
    if n == 0 {
        return Err(ModelError::InvalidInput("empty sample".into()));
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    Ok((mean, (var / n as f64).sqrt()))
}

/// Pearson correlation with a distribution-robust (influence function)
/// standard error: with standardized samples x~, y~ and r = mean(x~ y~),
/// se^2 = mean[(x~ y~ - (r/2)(x~^2 + y~^2))^2] / n. For bivariate normal data
/// this reduces to the classical (1 - r^2)/sqrt(n); for the heavy-tailed
/// products arising from sigma^2(S_T) it is several times wider, which is the
/// honest yardstick for a "within 3 SE of zero" test.
pub fn correlation(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    let n = xs.len();
    if n != ys.len() || n < 3 {
        return Err(ModelError::InvalidInput(
            "correlation needs two equal-length samples with n >= 3".into(),
        ));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let vx = xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>() / nf;
    let vy = ys.iter().map(|y| (y - my) * (y - my)).sum::<f64>() / nf;
    // Degenerate also covers spread at rounding level: a deterministic
    // quantity summed per path leaves O(eps) noise around the mean.
    if vx <= 0.0 || vy <= 0.0 || vx.sqrt() <= 1e-10 * mx.abs() || vy.sqrt() <= 1e-10 * my.abs() {
        return Err(ModelError::Domain("correlation undefined for a degenerate sample".into()));
    }
    let (sx, sy) = (vx.sqrt(), vy.sqrt());
    let mut r = 0.0;
    for i in 0..n {
        r += (xs[i] - mx) / sx * ((ys[i] - my) / sy);
    }
    r /= nf;
    let mut s2 = 0.0;
    for i in 0..n {
        let xt = (xs[i] - mx) / sx;
        let yt = (ys[i] - my) / sy;
        let psi = xt * yt - 0.5 * r * (xt * xt + yt * yt);
        s2 += psi * psi;
    }
    let se = (s2 / nf).sqrt() / nf.sqrt();
    Ok((r, se))
}

/// Kolmogorov-Smirnov statistic of a sample against a CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(sample: &mut [f64], cdf: F) -> Result<f64> {
    let n = sample.len();
    if n == 0 {
        return Err(ModelError::InvalidInput("empty sample".into()));
    }
    sample.sort_by(|a, b| a.partial_cmp(b).expect("NaN in KS sample"));
    let nf = n as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sample.iter().enumerate() {
        let c = cdf(x);
        d = d.max((c - i as f64 / nf).abs());
        d = d.max(((i as f64 + 1.0) / nf - c).abs());
    }
    Ok(d)
}

/// Asymptotic Kolmogorov p-value: Q(sqrt(n) d) with
/// Q(x) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 x^2). That series converges
/// slowly for small x, where the Jacobi-theta dual
/// Q(x) = 1 - sqrt(2 pi)/x sum_{k>=1} exp(-(2k-1)^2 pi^2 / (8 x^2))
/// is used instead; both are exact, and they agree to machine precision at
/// the crossover.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let x = (n as f64).sqrt() * d;
    if x < 0.05 {
        return 1.0;
    }
    if x < 1.18 {
        let t = std::f64::consts::PI.powi(2) / (8.0 * x * x);
        let cdf = (2.0 * std::f64::consts::PI).sqrt() / x
            * ((-t).exp() + (-9.0 * t).exp() + (-25.0 * t).exp() + (-49.0 * t).exp());
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut p = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * x * x).exp();
        if term < 1e-18 {
            break;
        }
        p += if k % 2 == 1 { 2.0 * term } else { -2.0 * term };
    }
    p.clamp(0.0, 1.0)
}

/// Silverman's rule-of-thumb bandwidth for a one-dimensional sample.
pub fn silverman_bandwidth(xs: &[f64]) -> Result<f64> {
    let (_, _) = mean_se(xs)?;
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(1.06 * sd * n.powf(-0.2))
}
