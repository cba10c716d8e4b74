// SPDX-License-Identifier: Apache-2.0

//! Log-gamma, digamma, trigamma and the multivariate log-beta function.
//!
//! All three gamma-family functions use the same scheme: shift the argument
//! upward with the functional recurrence until the asymptotic (Stirling /
//! Bernoulli) series converges to double precision, then evaluate the series.
//! Only positive arguments are supported; the Dirichlet losses never need the
//! reflection formula.

use crate::error::{Error, Result};

/// Euler–Mascheroni constant γ.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

// Threshold above which the asymptotic digamma series is used.
const DIGAMMA_SHIFT: f64 = 6.0;
const LGAMMA_SHIFT: f64 = 10.0;
const TRIGAMMA_SHIFT: f64 = 10.0;

/// B_{2k} / (2k) for k = 1..=6.
const DIGAMMA_SERIES: [f64; 6] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
];

/// B_{2k} / (2k (2k - 1)) for k = 1..=6.
const LGAMMA_SERIES: [f64; 6] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360_360.0,
];

/// B_{2k} for k = 1..=7.
const TRIGAMMA_SERIES: [f64; 7] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
];

/// ln Γ(x) for x > 0; NaN otherwise.
pub(crate) fn ln_gamma_raw(x: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return f64::NAN;
    }
    let mut x = x;
    let mut shift = 0.0;
    // Accumulate the product in chunks so it cannot overflow for tiny x.
    let mut prod = 1.0;
    while x < LGAMMA_SHIFT {
        prod *= x;
        x += 1.0;
        if !(1e-250..=1e250).contains(&prod) {
            shift += prod.ln();
            prod = 1.0;
        }
    }
    shift += prod.ln();
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut pow = inv;
    for c in LGAMMA_SERIES {
        series += c * pow;
        pow *= inv2;
    }
    (x - 0.5) * x.ln() - x + LN_SQRT_2PI + series - shift
}

/// ψ(x) for x > 0; NaN otherwise.
pub(crate) fn digamma_raw(x: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return f64::NAN;
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < DIGAMMA_SHIFT {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    let mut series = 0.0;
    let mut pow = inv2;
    for c in DIGAMMA_SERIES {
        series += c * pow;
        pow *= inv2;
    }
    acc + x.ln() - 0.5 / x - series
}

/// ψ′(x) for x > 0; NaN otherwise.
pub(crate) fn trigamma_raw(x: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return f64::NAN;
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < TRIGAMMA_SHIFT {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut pow = inv2 * inv;
    for b in TRIGAMMA_SERIES {
        series += b * pow;
        pow *= inv2;
    }
    acc + inv + 0.5 * inv2 + series
}

fn checked(func: &'static str, x: f64, f: fn(f64) -> f64) -> Result<f64> {
    if x > 0.0 && x.is_finite() {
        Ok(f(x))
    } else {
        Err(Error::Domain { func, value: x })
    }
}

pub fn ln_gamma(x: f64) -> Result<f64> {
    checked("ln_gamma", x, ln_gamma_raw)
}

/// Digamma ψ(x) = d/dx ln Γ(x), accurate to about 1e-13 absolute on
/// [1e-3, 1e6].
pub fn digamma(x: f64) -> Result<f64> {
    checked("digamma", x, digamma_raw)
}

pub fn trigamma(x: f64) -> Result<f64> {
    checked("trigamma", x, trigamma_raw)
}

/// ln B(α) = Σ ln Γ(α_k) − ln Γ(Σ α_k).
pub fn log_beta(alpha: &[f64]) -> Result<f64> {
    if alpha.is_empty() {
        return Err(Error::Empty("log_beta concentration vector"));
    }
    let mut total = 0.0;
    let mut acc = 0.0;
    for &a in alpha {
        acc += ln_gamma(a).map_err(|_| Error::Domain {
            func: "log_beta",
            value: a,
        })?;
        total += a;
    }
    Ok(acc - ln_gamma_raw(total))
}
