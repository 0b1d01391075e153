//! Per-provider clipping, Gaussian noise and privacy accounting.

mod accountant;
pub mod special;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use accountant::{
    calibrate_sigma, compose_and_convert, default_orders, epsilon_for, gaussian_epsilon, rdp_curve,
    rdp_subsampled_gaussian, AccountantResult, RdpCurve, CALIBRATION_TOL,
};

use crate::error::{Error, Result};
use crate::model::l2_norm;

/// Privacy parameters of a training run. Sampling rates and the number of
/// rounds come from the training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    /// Used to calibrate σ when `noise_multiplier` is absent.
    #[serde(default)]
    pub epsilon_target: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub clip_norm: f64,
    #[serde(default)]
    pub noise_multiplier: Option<f64>,
}

fn default_delta() -> f64 {
    1e-5
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must be in (0, 1), got {}", self.delta)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        match (self.epsilon_target, self.noise_multiplier) {
            (None, None) => Err(Error::Config("either epsilon_target or noise_multiplier is required".into())),
            (Some(e), _) if !(e > 0.0) => Err(Error::Config(format!("epsilon_target must be positive, got {e}"))),
            (_, Some(s)) if !(s >= 0.0 && s.is_finite()) => {
                Err(Error::Config(format!("noise_multiplier must be non-negative, got {s}")))
            }
            _ => Ok(()),
        }
    }

    /// The noise multiplier to train with: the explicit one if given, else calibrated.
    pub fn resolve_sigma(&self, q: f64, rounds: u64) -> Result<f64> {
        self.validate()?;
        match (self.noise_multiplier, self.epsilon_target) {
            (Some(s), _) => Ok(s),
            (None, Some(e)) => calibrate_sigma(e, self.delta, q, rounds),
            (None, None) => unreachable!("validated"),
        }
    }
}

/// Scales `v` in place to L2 norm at most `c`; returns the norm before clipping.
pub fn clip_in_place(v: &mut [f64], c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::Input(format!("clip norm must be positive, got {c}")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("update passed to clipping".into()));
    }
    let norm = l2_norm(v);
    let scale = (norm / c).max(1.0);
    if scale > 1.0 {
        for x in v.iter_mut() {
            *x /= scale;
        }
        // rounding can leave the result a few ulps above c
        let mut n = l2_norm(v);
        while n > c {
            let shrink = c / n;
            for x in v.iter_mut() {
                *x *= shrink * (1.0 - f64::EPSILON);
            }
            n = l2_norm(v);
        }
    }
    Ok(norm)
}

pub fn clip_update(delta: &[f64], c: f64) -> Result<Vec<f64>> {
    let mut v = delta.to_vec();
    clip_in_place(&mut v, c)?;
    Ok(v)
}

pub fn gaussian_noise<R: Rng + ?Sized>(dim: usize, std: f64, rng: &mut R) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; dim];
    }
    (0..dim).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}
