//! Model parameters, the default potential family, and the derived
//! constants κ, Θ, Φ, Φ′ with the fugacity gate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;
use thiserror::Error;

use crate::graph::{jbar, DecayProfile, Graph};
use crate::torus;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("hard-core radius must lie in (0, 1), got {0}")]
    HardCore(f64),
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

/// Volume of the `d`-ball of radius `r`.
pub fn ball_volume(d: usize, r: f64) -> f64 {
    PI.powf(d as f64 / 2.0) * r.powi(d as i32) / gamma(d as f64 / 2.0 + 1.0)
}

/// `floor(1 / vol(ball of diameter ρ))`, the per-vertex occupancy cap.
pub fn derive_kappa(d: usize, rho_hc: f64) -> Result<usize, ParamError> {
    if !(rho_hc > 0.0 && rho_hc < 1.0) {
        return Err(ParamError::HardCore(rho_hc));
    }
    // A relative nudge absorbs rounding in exact ratios such as 1/0.25.
    let ratio = 1.0 / ball_volume(d, rho_hc / 2.0);
    Ok(((ratio * (1.0 + 1e-12)).floor() as usize).max(1))
}

/// `Θ = κβ(Ū¹ + κŪ² + κJ̄(1)V̄)`.
pub fn derive_theta(kappa: usize, beta: f64, u1bar: f64, u2bar: f64, jbar1: f64, vbar: f64) -> f64 {
    let k = kappa as f64;
    k * beta * (u1bar + k * u2bar + k * jbar1 * vbar)
}

/// `Φ = Σ_k (z e^Θ)^k`, finite only below the gate.
pub fn phi(z: f64, theta: f64) -> Option<f64> {
    let q = z * theta.exp();
    (q < 1.0).then(|| q / (1.0 - q))
}

/// `Φ′ = Σ_k k (z e^Θ)^k`.
pub fn phi_prime(z: f64, theta: f64) -> Option<f64> {
    let q = z * theta.exp();
    (q < 1.0).then(|| q / (1.0 - q).powi(2))
}

/// Estimator modes whose error control relies on the gate.
pub const GATED_MODES: [&str; 3] = ["rdmk-bound", "xi", "dlr-check"];

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GateReport {
    pub ok: bool,
    /// `1 - z e^Θ`.
    pub margin: f64,
    pub theta: f64,
    pub disabled_modes: Vec<&'static str>,
}

pub fn check_gate(z: f64, theta: f64) -> GateReport {
    let margin = 1.0 - z * theta.exp();
    let ok = margin > 0.0;
    GateReport { ok, margin, theta, disabled_modes: if ok { Vec::new() } else { GATED_MODES.to_vec() } }
}

/// Bounds on the negative parts of the potentials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PotentialBounds {
    pub u1bar: f64,
    pub u2bar: f64,
    pub vbar: f64,
}

/// The default potential family:
/// `U1(x) = u1 cos(2π c·x)`, `V(x,x') = v0 cos(2π e·(x-x'))`, and
/// `U2 = u2 s((r-ρ)/w)` outside the hard core with `s` a smooth step
/// from 1 to 0 over width `w` (no step when `w` is absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Potentials {
    #[serde(default)]
    pub u1: f64,
    #[serde(default)]
    pub u1_wave: Vec<f64>,
    #[serde(default)]
    pub u2: f64,
    #[serde(default)]
    pub u2_range: Option<f64>,
    #[serde(default)]
    pub v0: f64,
    #[serde(default)]
    pub v_wave: Vec<f64>,
    /// Hard-core radius; zero disables the hard core.
    #[serde(default)]
    pub rho_hc: f64,
}

impl Default for Potentials {
    fn default() -> Self {
        Self { u1: 0.0, u1_wave: Vec::new(), u2: 0.0, u2_range: None, v0: 0.0, v_wave: Vec::new(), rho_hc: 0.0 }
    }
}

fn is_zero_wave(w: &[f64]) -> bool {
    w.iter().all(|&c| c == 0.0)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Potentials {
    #[inline]
    pub fn u1_at(&self, x: &[f64]) -> f64 {
        if self.u1 == 0.0 {
            0.0
        } else if is_zero_wave(&self.u1_wave) {
            self.u1
        } else {
            self.u1 * (2.0 * PI * dot(&self.u1_wave, x)).cos()
        }
    }

    #[inline]
    pub fn v_at(&self, x: &[f64], y: &[f64]) -> f64 {
        if self.v0 == 0.0 {
            0.0
        } else if is_zero_wave(&self.v_wave) {
            self.v0
        } else {
            let s: f64 = self.v_wave.iter().zip(x.iter().zip(y)).map(|(e, (a, b))| e * (a - b)).sum();
            self.v0 * (2.0 * PI * s).cos()
        }
    }

    /// The smooth part `Ũ2` as a function of distance (continued as `u2`
    /// inside the core).
    #[inline]
    pub fn u2_tilde(&self, r: f64) -> f64 {
        match self.u2_range {
            None => self.u2,
            Some(w) => {
                let t = ((r - self.rho_hc) / w).clamp(0.0, 1.0);
                self.u2 * (1.0 - t * t * (3.0 - 2.0 * t))
            }
        }
    }

    /// `U2`, `+∞` inside the hard core.
    #[inline]
    pub fn u2_at(&self, x: &[f64], y: &[f64]) -> f64 {
        if self.rho_hc == 0.0 && self.u2 == 0.0 {
            return 0.0;
        }
        let r = torus::dist(x, y);
        if self.rho_hc > 0.0 && r <= self.rho_hc {
            f64::INFINITY
        } else {
            self.u2_tilde(r)
        }
    }

    pub fn has_hard_core(&self) -> bool {
        self.rho_hc > 0.0
    }

    pub fn bounds(&self) -> PotentialBounds {
        let neg = |amp: f64, wave: &[f64]| if is_zero_wave(wave) { (-amp).max(0.0) } else { amp.abs() };
        PotentialBounds {
            u1bar: neg(self.u1, &self.u1_wave),
            u2bar: (-self.u2).max(0.0),
            vbar: neg(self.v0, &self.v_wave),
        }
    }

    /// Whether every potential is invariant under all translations.
    pub fn translation_invariant(&self) -> bool {
        self.u1 == 0.0 || is_zero_wave(&self.u1_wave)
    }

    pub fn validate(&self, d: usize) -> Result<(), ParamError> {
        for (name, w) in [("u1_wave", &self.u1_wave), ("v_wave", &self.v_wave)] {
            if !w.is_empty() && w.len() != d {
                return Err(ParamError::Invalid(format!("{name} must have {d} entries")));
            }
            if w.iter().any(|c| c.fract() != 0.0) {
                return Err(ParamError::Invalid(format!("{name} must be integer for periodicity")));
            }
        }
        if !(0.0..1.0).contains(&self.rho_hc) {
            return Err(ParamError::HardCore(self.rho_hc));
        }
        if let Some(w) = self.u2_range {
            if !(w > 0.0) {
                return Err(ParamError::Invalid("u2_range must be positive".into()));
            }
        }
        Ok(())
    }
}

fn default_m_tau() -> usize {
    32
}

/// The full parameter set of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub d: usize,
    pub beta: f64,
    pub z: f64,
    #[serde(alias = "potential")]
    pub potentials: Potentials,
    /// Uniform jump rate on every edge.
    pub lambda0: f64,
    #[serde(alias = "J")]
    pub decay: DecayProfile,
    /// Time slices per β-period.
    #[serde(default = "default_m_tau")]
    pub m_tau: usize,
    /// Largest loop length multiplicity the samplers will create.
    pub k_max: usize,
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), ParamError> {
        let bad = |m: &str| Err(ParamError::Invalid(m.to_string()));
        if self.d == 0 {
            return bad("d must be positive");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        if !(self.z >= 0.0) {
            return bad("z must be nonnegative");
        }
        if !(self.lambda0 >= 0.0) {
            return bad("lambda0 must be nonnegative");
        }
        if self.m_tau < 2 {
            return bad("m_tau must be at least 2");
        }
        if self.k_max == 0 {
            return bad("k_max must be positive");
        }
        self.decay.validate(64).map_err(ParamError::Invalid)?;
        self.potentials.validate(self.d)
    }

    /// Occupancy cap, `None` without a hard core.
    pub fn kappa(&self) -> Option<usize> {
        if self.potentials.has_hard_core() {
            derive_kappa(self.d, self.potentials.rho_hc).ok()
        } else {
            None
        }
    }

    /// Time step `β / M_τ`.
    pub fn delta(&self) -> f64 {
        self.beta / self.m_tau as f64
    }

    /// Θ on `g`; infinite without a hard core.
    pub fn theta(&self, g: &Graph) -> f64 {
        match self.kappa() {
            None => f64::INFINITY,
            Some(k) => {
                let b = self.potentials.bounds();
                derive_theta(k, self.beta, b.u1bar, b.u2bar, jbar(&self.decay, g, 1), b.vbar)
            }
        }
    }

    pub fn gate(&self, g: &Graph) -> GateReport {
        check_gate(self.z, self.theta(g))
    }
}
