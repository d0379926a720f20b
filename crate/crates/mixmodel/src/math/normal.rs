//! Standard normal distribution primitives.
//!
//! `norm_cdf` routes through `libm::erfc` (musl's ~1 ulp implementation), so
//! Phi is accurate to better than 1e-15 relative on |x| <= 8 and keeps full
//! relative accuracy deep into the left tail. `inv_norm_cdf` is Wichura's
//! AS 241 (PPND16) rational-minimax routine, relative error ~1e-16 for
//! p in [5e-324, 1); it is the inverse-CDF sampler used by the Monte Carlo
//! engines (one uniform in, one Gaussian out, no rejection state).

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF, Phi(x) = erfc(-x/sqrt(2)) / 2.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

const INV_A: [f64; 8] = [
    3.3871328727963666080e0,
    1.3314166789178437745e2,
    1.9715909503065514427e3,
    1.3731693765509461125e4,
    4.5921953931549871457e4,
    6.7265770927008700853e4,
    3.3430575583588128105e4,
    2.5090809287301226727e3,
];
const INV_B: [f64; 8] = [
    1.0,
    4.2313330701600911252e1,
    6.8718700749205790830e2,
    5.3941960214247511077e3,
    2.1213794301586595867e4,
    3.9307895800092710610e4,
    2.8729085735721942674e4,
    5.2264952788528545610e3,
];
const INV_C: [f64; 8] = [
    1.42343711074968357734e0,
    4.63033784615654529590e0,
    5.76949722146069140550e0,
    3.64784832476320460504e0,
    1.27045825245236838258e0,
    2.41780725177450611770e-1,
    2.27238449892691845833e-2,
    7.74545014278341407640e-4,
];
const INV_D: [f64; 8] = [
    1.0,
    2.05319162663775882187e0,
    1.67638483018380384940e0,
    6.89767334985100004550e-1,
    1.48103976427480074590e-1,
    1.51986665636164571966e-2,
    5.47593808499534494600e-4,
    1.05075007164441684324e-9,
];
const INV_E: [f64; 8] = [
    6.65790464350110377720e0,
    5.46378491116411436990e0,
    1.78482653991729133580e0,
    2.96560571828504891230e-1,
    2.65321895265761230930e-2,
    1.24266094738807843860e-3,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
];
const INV_F: [f64; 8] = [
    1.0,
    5.99832206555887937690e-1,
    1.36929880922735805310e-1,
    1.48753612908506148525e-2,
    7.86869131145613259100e-4,
    1.84631831751005468180e-5,
    1.42151175831644588870e-7,
    2.04426310338993978564e-15,
];

fn rational(num: &[f64; 8], den: &[f64; 8], x: f64) -> f64 {
    let mut n = 0.0;
    let mut d = 0.0;
    for i in (0..8).rev() {
        n = n * x + num[i];
        d = d * x + den[i];
    }
    n / d
}

/// Inverse standard normal CDF (AS 241, PPND16). Requires p in (0, 1).
pub fn inv_norm_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0, "inv_norm_cdf needs p in (0,1)");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * rational(&INV_A, &INV_B, r);
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let r = (-tail.ln()).sqrt();
    let x = if r <= 5.0 {
        rational(&INV_C, &INV_D, r - 1.6)
    } else {
        rational(&INV_E, &INV_F, r - 5.0)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}
