//! Scalar schedules: mixing ratio, backbone architecture-LR scaling, and
//! cosine annealing of the weight learning rate.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default steepness of the reverse-sigmoid mixing schedule.
pub const DEFAULT_K: f64 = 6.0;
/// Default decay sharpness of the heterogeneous LR scaling.
pub const DEFAULT_TAU: f64 = 5.0;

/// `μ = 1 - (t/T)²`.
pub fn parabolic_mu(t: f64, total: f64) -> Result<f64> {
    check_epoch("parabolic_mu", t, total)?;
    let r = t / total;
    Ok(1.0 - r * r)
}

/// `μ = 1 - σ(k · (t - T/2) / (T/2))`.
pub fn reverse_sigmoid_mu(t: f64, total: f64, k: f64) -> Result<f64> {
    check_epoch("reverse_sigmoid_mu", t, total)?;
    if k <= 0.0 {
        return Err(Error::invalid(
            "reverse_sigmoid_mu",
            format!("steepness k={k} must be positive"),
        ));
    }
    let half = total / 2.0;
    Ok(1.0 - sigmoid((t - half) / half * k))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_epoch(op: &'static str, t: f64, total: f64) -> Result<()> {
    if !(total > 0.0) {
        return Err(Error::invalid(op, format!("T={total} must be positive")));
    }
    if !(0.0..=total).contains(&t) {
        return Err(Error::invalid(op, format!("t={t} outside [0, {total}]")));
    }
    Ok(())
}

/// `lr0 · ½ (1 + cos(π t / T))`; `t` is clamped into `[0, T]`.
pub fn cosine_anneal(lr0: f64, t: f64, total: f64) -> f64 {
    if total <= 0.0 {
        return lr0;
    }
    let t = t.clamp(0.0, total);
    lr0 * 0.5 * (1.0 + (PI * t / total).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HlsConfig {
    /// Base architecture learning rate.
    pub xi0: f64,
    pub tau: f64,
}

impl HlsConfig {
    pub fn new(xi0: f64, tau: f64) -> Result<Self> {
        if !(xi0 > 0.0) || !(tau > 0.0) {
            return Err(Error::invalid(
                "HlsConfig",
                format!("xi0={xi0} and tau={tau} must be positive"),
            ));
        }
        Ok(Self { xi0, tau })
    }
}

/// Backbone architecture learning rate `ξ₀ · (1 - e^{-τμ})`.
pub fn hls_scale(cfg: &HlsConfig, mu: f64) -> f64 {
    cfg.xi0 * (1.0 - (-cfg.tau * mu).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixingKind {
    Parabolic,
    ReverseSigmoid,
    Constant,
}

impl MixingKind {
    pub fn name(self) -> &'static str {
        match self {
            MixingKind::Parabolic => "parabolic",
            MixingKind::ReverseSigmoid => "reverse-sigmoid",
            MixingKind::Constant => "constant",
        }
    }
}

impl fmt::Display for MixingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MixingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parabolic" => Ok(MixingKind::Parabolic),
            "reverse-sigmoid" => Ok(MixingKind::ReverseSigmoid),
            "constant" => Ok(MixingKind::Constant),
            _ => Err(Error::invalid(
                "MixingKind",
                format!("unknown mixing kind {s:?}"),
            )),
        }
    }
}

/// Mixing ratio μ as a function of the epoch index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingSchedule {
    pub kind: MixingKind,
    pub total: usize,
    pub k: f64,
    pub constant: f64,
}

impl MixingSchedule {
    pub fn parabolic(total: usize) -> Self {
        Self {
            kind: MixingKind::Parabolic,
            total,
            k: DEFAULT_K,
            constant: 1.0,
        }
    }

    pub fn reverse_sigmoid(total: usize, k: f64) -> Self {
        Self {
            kind: MixingKind::ReverseSigmoid,
            total,
            k,
            constant: 1.0,
        }
    }

    pub fn constant(total: usize, mu: f64) -> Self {
        Self {
            kind: MixingKind::Constant,
            total,
            k: DEFAULT_K,
            constant: mu,
        }
    }

    /// μ at epoch `t` (epochs count from 1 to `total`, matching the training loop).
    pub fn mu(&self, t: usize) -> Result<f64> {
        let (t, total) = (t as f64, self.total as f64);
        match self.kind {
            MixingKind::Parabolic => parabolic_mu(t, total),
            MixingKind::ReverseSigmoid => reverse_sigmoid_mu(t, total, self.k),
            MixingKind::Constant => {
                check_epoch("constant mu", t, total)?;
                if !(0.0..=1.0).contains(&self.constant) {
                    return Err(Error::invalid(
                        "constant mu",
                        format!("{} outside [0, 1]", self.constant),
                    ));
                }
                Ok(self.constant)
            }
        }
    }
}
