//! Domain types shared by every other module: Bloch vectors, target states,
//! device parameters and the control vector.
//!
//! Sign convention: `z = +1` is the excited state |e⟩ and `z = -1` the ground
//! state |g⟩, so a mean `z` of 0.17 is 58.5 % excitation.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Norm slack tolerated after an exact rotation.
pub const NORM_EPSILON: f64 = 1e-9;

/// Qubit state as the expectation values (⟨σx⟩, ⟨σy⟩, ⟨σz⟩).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BlochVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl BlochVector {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub const fn ground() -> Self {
        Self::new(0.0, 0.0, -1.0)
    }

    pub const fn excited() -> Self {
        Self::new(0.0, 0.0, 1.0)
    }

    pub const fn mixed() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(&self, other: &Self) -> Self {
        Self::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Tr ρ² = (1 + |r|²) / 2.
    pub fn purity(&self) -> f64 {
        0.5 * (1.0 + self.norm_sq())
    }

    /// Length of the transverse (coherence) part.
    pub fn coherence(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl Add for BlochVector {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl Sub for BlochVector {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl Mul<f64> for BlochVector {
    type Output = Self;
    fn mul(self, k: f64) -> Self {
        Self::new(self.x * k, self.y * k, self.z * k)
    }
}

/// Target |Ψ_{θ,φ}⟩ = cos(θ/2)|e⟩ + sin(θ/2) e^{iφ}|g⟩.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetState {
    pub theta: f64,
    pub phi: f64,
}

impl TargetState {
    pub fn new(theta: f64, phi: f64) -> Result<Self> {
        let t = Self { theta, phi };
        t.validate()?;
        Ok(t)
    }

    /// Like [`TargetState::new`] but wraps `phi` into [0, 2π) first.
    pub fn wrapped(theta: f64, phi: f64) -> Result<Self> {
        let mut phi = phi.rem_euclid(TAU);
        // rem_euclid can round up to exactly TAU for tiny negative inputs
        if phi >= TAU {
            phi = 0.0;
        }
        Self::new(theta, phi)
    }

    pub fn excited() -> Self {
        Self {
            theta: 0.0,
            phi: 0.0,
        }
    }

    pub fn ground() -> Self {
        Self { theta: PI, phi: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=PI).contains(&self.theta) {
            return Err(Error::AngleOutOfRange {
                name: "theta",
                value: self.theta,
                min: 0.0,
                max: PI,
            });
        }
        if !(0.0..TAU).contains(&self.phi) {
            return Err(Error::AngleOutOfRange {
                name: "phi",
                value: self.phi,
                min: 0.0,
                max: TAU,
            });
        }
        Ok(())
    }

    pub fn bloch(&self) -> BlochVector {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        BlochVector::new(st * cp, st * sp, ct)
    }
}

impl Default for TargetState {
    fn default() -> Self {
        Self::excited()
    }
}

/// Unit Bloch vector (sinθ cosφ, sinθ sinφ, cosθ) of a target state.
pub fn bloch_from_angles(target: &TargetState) -> Result<BlochVector> {
    target.validate()?;
    Ok(target.bloch())
}

/// F = (1 + r·n) / 2 for a pure target with unit Bloch vector n.
pub fn fidelity(r: &BlochVector, target: &TargetState) -> f64 {
    (0.5 * (1.0 + r.dot(&target.bloch()))).clamp(0.0, 1.0)
}

/// Measured device rates and efficiencies. Rates are in s⁻¹, bandwidths in
/// Hz, the delay in seconds. The GHz frequencies are bookkeeping only: the
/// dynamics run in the frame rotating at the qubit frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicalParams {
    pub gamma1: f64,
    pub gamma_phi: f64,
    pub eta: f64,
    pub bandwidth: f64,
    pub fm_bandwidth: f64,
    pub delay: f64,
    pub gamma_m: f64,
    pub f_q: f64,
    pub f_c: f64,
    pub detuning: f64,
    pub thermal_z0: f64,
}

impl PhysicalParams {
    /// Independently measured device values.
    pub fn device() -> Self {
        Self {
            gamma1: 1.0 / 4.7e-6,
            gamma_phi: 1.0 / 22e-6,
            eta: 0.35,
            bandwidth: 3.3e6,
            fm_bandwidth: 2.0e6,
            delay: 0.12e-6,
            gamma_m: 1.0 / 84e-6,
            f_q: 6.27,
            f_c: 7.86,
            detuning: 0.1,
            thermal_z0: -1.0,
        }
    }

    /// Perfect detection with no extra dephasing; filters and delay are
    /// left at the device values (pair with a Markovian-limit run).
    pub fn ideal() -> Self {
        Self {
            eta: 1.0,
            gamma_phi: 0.0,
            gamma_m: 0.0,
            ..Self::device()
        }
    }

    /// Measurement strength √(ηγ₁/2) of each quadrature, in s^{-1/2}.
    pub fn kappa(&self) -> f64 {
        (0.5 * self.eta * self.gamma1).sqrt()
    }

    /// Transverse decay rate γ₁/2 + γ_φ (+ any extra dephasing).
    pub fn gamma2(&self, extra_dephasing: f64) -> f64 {
        0.5 * self.gamma1 + self.gamma_phi + extra_dephasing
    }

    pub fn initial_state(&self) -> BlochVector {
        BlochVector::new(0.0, 0.0, self.thermal_z0)
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("gamma1", self.gamma1),
            ("gamma_phi", self.gamma_phi),
            ("bandwidth", self.bandwidth),
            ("fm_bandwidth", self.fm_bandwidth),
            ("delay", self.delay),
            ("gamma_m", self.gamma_m),
        ];
        for (name, v) in rates {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(invalid("eta", format!("must lie in [0, 1], got {}", self.eta)));
        }
        if self.fm_bandwidth > self.bandwidth {
            return Err(invalid(
                "fm_bandwidth",
                format!(
                    "FM-path bandwidth {} exceeds detection bandwidth {}",
                    self.fm_bandwidth, self.bandwidth
                ),
            ));
        }
        if !(-1.0..=1.0).contains(&self.thermal_z0) {
            return Err(invalid("thermal_z0", "must lie in [-1, 1]"));
        }
        Ok(())
    }
}

impl Default for PhysicalParams {
    fn default() -> Self {
        Self::device()
    }
}

/// Angular rates (rad/s) multiplying σx, σy, σz in H_c/ħ.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlVector {
    pub u: f64,
    pub v: f64,
    pub w: f64,
}

impl ControlVector {
    pub const fn new(u: f64, v: f64, w: f64) -> Self {
        Self { u, v, w }
    }
}
