//! Rényi-DP accounting for composed Poisson-subsampled Gaussian mechanisms.
//!
//! The subsampled bound follows the binomial expansion for integer orders and
//! the two-sided erfc series for fractional orders (Mironov, Talwar, Zhang
//! 2019). Conversion to (ε, δ) uses the tighter bound of Balle et al. 2020.
//! Without subsampling the mechanism is a plain Gaussian and ε is computed
//! exactly from its privacy profile rather than through RDP.

use serde::{Deserialize, Serialize};

use super::special::{log_add, log_erfc, log_ndtr, log_sub};
use crate::error::{Error, Result};

pub fn default_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (1..=125).map(|i| 1.0 + 0.5 * i as f64).collect();
    orders.extend([128.0, 256.0]);
    orders
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    pub orders: Vec<f64>,
    /// Per-step Rényi divergence at each order.
    pub losses: Vec<f64>,
    /// Set when q = 1; enables exact conversion.
    pub gaussian_sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantResult {
    pub epsilon: f64,
    /// ε from the RDP conversion alone; equals `epsilon` whenever q < 1.
    pub rdp_epsilon: f64,
    /// Order minimizing the RDP conversion.
    pub order: f64,
    /// Composed (T-fold) losses per order.
    pub curve: RdpCurve,
    pub mechanisms: u64,
}

fn check_sigma_q(sigma: f64, q: f64) -> Result<()> {
    if sigma == 0.0 {
        return Err(Error::InfinitePrivacyLoss);
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Input(format!("noise multiplier must be positive, got {sigma}")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Input(format!("sampling rate must be in (0, 1], got {q}")));
    }
    Ok(())
}

pub fn rdp_curve(sigma: f64, q: f64, orders: &[f64]) -> Result<RdpCurve> {
    check_sigma_q(sigma, q)?;
    if orders.is_empty() || orders.iter().any(|&a| !(a > 1.0 && a.is_finite())) {
        return Err(Error::Input("orders must be finite and greater than 1".into()));
    }
    let losses = orders.iter().map(|&a| rdp_subsampled_gaussian(sigma, q, a)).collect();
    Ok(RdpCurve { orders: orders.to_vec(), losses, gaussian_sigma: (q == 1.0).then_some(sigma) })
}

/// Rényi divergence of order `alpha` for one step of the sampled Gaussian.
pub fn rdp_subsampled_gaussian(sigma: f64, q: f64, alpha: f64) -> f64 {
    if q == 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    let log_a = if alpha.fract() == 0.0 { log_a_int(q, sigma, alpha as u64) } else { log_a_frac(q, sigma, alpha) };
    log_a / (alpha - 1.0)
}

fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let s2 = sigma * sigma;
    let mut log_a = f64::NEG_INFINITY;
    let mut log_binom = 0.0;
    for i in 0..=alpha {
        if i > 0 {
            log_binom += ((alpha - i + 1) as f64).ln() - (i as f64).ln();
        }
        let fi = i as f64;
        let term = log_binom + fi * lq + (alpha - i) as f64 * l1q + (fi * fi - fi) / (2.0 * s2);
        log_a = log_add(log_a, term);
    }
    log_a
}

fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let s2 = sigma * sigma;
    let z0 = s2 * (1.0 / q - 1.0).ln() + 0.5;
    let sqrt2s = std::f64::consts::SQRT_2 * sigma;
    let ln_half = 0.5f64.ln();
    let (mut a0, mut a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    // binomial(alpha, i) tracked as sign and log-magnitude
    let (mut log_coef, mut positive) = (0.0, true);
    let mut i = 0u64;
    loop {
        let fi = i as f64;
        let j = alpha - fi;
        let lt0 = log_coef + fi * lq + j * l1q;
        let lt1 = log_coef + j * lq + fi * l1q;
        let le0 = ln_half + log_erfc((fi - z0) / sqrt2s);
        let le1 = ln_half + log_erfc((z0 - j) / sqrt2s);
        let ls0 = lt0 + (fi * fi - fi) / (2.0 * s2) + le0;
        let ls1 = lt1 + (j * j - j) / (2.0 * s2) + le1;
        if positive {
            a0 = log_add(a0, ls0);
            a1 = log_add(a1, ls1);
        } else {
            a0 = log_sub(a0, ls0);
            a1 = log_sub(a1, ls1);
        }
        if ls0.max(ls1) < -30.0 || i > 10_000 {
            break;
        }
        let factor = alpha - fi;
        log_coef += factor.abs().ln() - (fi + 1.0).ln();
        if factor < 0.0 {
            positive = !positive;
        }
        i += 1;
    }
    log_add(a0, a1)
}

/// Composes `rounds` identical steps and converts to (ε, δ).
pub fn compose_and_convert(curve: &RdpCurve, rounds: u64, delta: f64) -> Result<AccountantResult> {
    if rounds == 0 {
        return Err(Error::Input("at least one mechanism must be composed".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Input(format!("delta must be in (0, 1), got {delta}")));
    }
    let t = rounds as f64;
    let composed: Vec<f64> = curve.losses.iter().map(|l| l * t).collect();
    let (mut best, mut order) = (f64::INFINITY, f64::NAN);
    for (&a, &r) in curve.orders.iter().zip(&composed) {
        let eps = r + (-1.0 / a).ln_1p() - (delta.ln() + a.ln()) / (a - 1.0);
        if eps < best {
            best = eps;
            order = a;
        }
    }
    let rdp_epsilon = best.max(0.0);
    let epsilon = match curve.gaussian_sigma {
        Some(sigma) => gaussian_epsilon(sigma / t.sqrt(), delta),
        None => rdp_epsilon,
    };
    Ok(AccountantResult {
        epsilon,
        rdp_epsilon,
        order,
        curve: RdpCurve { orders: curve.orders.clone(), losses: composed, gaussian_sigma: curve.gaussian_sigma },
        mechanisms: rounds,
    })
}

/// Exact ε of a sensitivity-1 Gaussian mechanism with noise std `sigma`.
pub fn gaussian_epsilon(sigma: f64, delta: f64) -> f64 {
    let ln_delta = delta.ln();
    let ln_profile = |eps: f64| {
        let a = log_ndtr(0.5 / sigma - eps * sigma);
        let b = eps + log_ndtr(-0.5 / sigma - eps * sigma);
        log_sub(a, b)
    };
    if ln_profile(0.0) <= ln_delta {
        return 0.0;
    }
    let mut hi = 1.0;
    while ln_profile(hi) > ln_delta {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ln_profile(mid) > ln_delta {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    hi
}

pub fn epsilon_for(sigma: f64, q: f64, rounds: u64, delta: f64) -> Result<AccountantResult> {
    let curve = rdp_curve(sigma, q, &default_orders())?;
    compose_and_convert(&curve, rounds, delta)
}

pub const CALIBRATION_TOL: f64 = 1e-4;

/// Smallest noise multiplier (to within [`CALIBRATION_TOL`]) whose ε does not exceed the target.
pub fn calibrate_sigma(epsilon_target: f64, delta: f64, q: f64, rounds: u64) -> Result<f64> {
    if !(epsilon_target > 0.0 && epsilon_target.is_finite()) {
        return Err(Error::Input(format!("target epsilon must be positive, got {epsilon_target}")));
    }
    let eps = |s: f64| epsilon_for(s, q, rounds, delta).map(|r| r.epsilon);
    let mut hi = 1.0;
    while eps(hi)? > epsilon_target {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::Calibration(format!("no sigma below 1e6 reaches epsilon {epsilon_target}")));
        }
    }
    let mut lo = 0.0;
    while hi - lo > CALIBRATION_TOL {
        let mid = 0.5 * (lo + hi);
        if eps(mid)? > epsilon_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}
