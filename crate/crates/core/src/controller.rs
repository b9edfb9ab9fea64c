//! The three feedback boxes (Rabi, FM, Drift) and the parameter map that
//! targets an arbitrary point of the Bloch sphere.
//!
//! Record inputs `h_i`, `h_q` are instantaneous record values in s^{-1/2}
//! (record increments divided by dt, possibly filtered and delayed). Gains
//! are in s^{-1/2}, so the outputs are angular rates in rad/s.
//!
//! The Rabi box rotates the record pair clockwise by `alpha`. Together with
//! the handedness of [`crate::sme::control_rotation`] this is the one
//! convention under which the feedback law stabilizes its own target; the
//! pair is pinned by `ideal_law_stabilizes_every_target` in the oracle
//! tests.

use std::f64::consts::{FRAC_PI_2, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{ControlVector, PhysicalParams, TargetState};

/// Static AC-Stark offset k·ε₀² of the exact FM model, in rad/s. Chosen so
/// the coherence-maximizing β of the equator target sits near −10°.
pub const DEFAULT_STARK_OFFSET: f64 = TAU * 1.85e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FmMode {
    #[default]
    Off,
    /// w = G_FM·V_β.
    Linear,
    /// w = k|ε₀e^{iβ} + G(V_I + iV_Q)|² − kε₀².
    Exact,
}

/// Mixing parameters of the exact FM model. The path gain G is not stored:
/// it follows from 2·k·G·ε₀ = G_FM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FmNonlinearity {
    /// Stark coefficient k (rad/s per squared amplitude unit).
    pub stark_coeff: f64,
    /// Carrier amplitude ε₀.
    pub carrier: f64,
}

impl FmNonlinearity {
    /// Path amplitude gain G that realizes the linear gain `g_fm`.
    pub fn path_gain(&self, g_fm: f64) -> f64 {
        g_fm / (2.0 * self.stark_coeff * self.carrier)
    }

    /// k·ε₀², the offset that renormalizes the qubit frequency.
    pub fn static_offset(&self) -> f64 {
        self.stark_coeff * self.carrier * self.carrier
    }

    pub fn validate(&self) -> Result<()> {
        if self.carrier == 0.0 || !self.carrier.is_finite() {
            return Err(invalid(
                "fm_nl.carrier",
                "exact FM mode needs a non-zero carrier amplitude",
            ));
        }
        if self.stark_coeff == 0.0 || !self.stark_coeff.is_finite() {
            return Err(invalid(
                "fm_nl.stark_coeff",
                "exact FM mode needs a non-zero Stark coefficient",
            ));
        }
        Ok(())
    }
}

impl Default for FmNonlinearity {
    fn default() -> Self {
        Self {
            stark_coeff: DEFAULT_STARK_OFFSET,
            carrier: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub g_r: f64,
    pub alpha: f64,
    pub g_fm: f64,
    pub beta: f64,
    pub u_bar: f64,
    pub v_bar: f64,
    pub fm_mode: FmMode,
    pub fm_nl: FmNonlinearity,
}

impl ControllerConfig {
    /// Every box switched off.
    pub fn off() -> Self {
        Self::default()
    }

    pub fn fm_active(&self) -> bool {
        self.fm_mode != FmMode::Off
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("g_r", self.g_r),
            ("alpha", self.alpha),
            ("g_fm", self.g_fm),
            ("beta", self.beta),
            ("u_bar", self.u_bar),
            ("v_bar", self.v_bar),
        ] {
            if !v.is_finite() {
                return Err(invalid(name, "must be finite"));
            }
        }
        if self.g_r < 0.0 {
            return Err(invalid("g_r", "gain must be >= 0"));
        }
        if self.g_fm < 0.0 {
            return Err(invalid("g_fm", "gain must be >= 0"));
        }
        if self.fm_mode == FmMode::Exact {
            self.fm_nl.validate()?;
        }
        Ok(())
    }

    /// Precomputes the trigonometry used on every step.
    pub fn compile(&self) -> Result<Controller> {
        self.validate()?;
        let (sa, ca) = self.alpha.sin_cos();
        let (sb, cb) = self.beta.sin_cos();
        let quadratic = match self.fm_mode {
            // k·G² = G_FM·(G/ε₀)/2
            FmMode::Exact => {
                let g = self.fm_nl.path_gain(self.g_fm);
                self.fm_nl.stark_coeff * g * g
            }
            _ => 0.0,
        };
        Ok(Controller {
            rabi: [self.g_r * ca, self.g_r * sa],
            fm: [self.g_fm * cb, self.g_fm * sb],
            quadratic,
            drift: [self.u_bar, self.v_bar],
            fm_on: self.fm_active(),
        })
    }
}

/// G_R^opt = √(γ₁/2η), the Rabi gain of the excited-state law.
pub fn optimal_rabi_gain(params: &PhysicalParams) -> f64 {
    (params.gamma1 / (2.0 * params.eta)).sqrt()
}

fn snap(v: f64) -> f64 {
    if v.abs() < 1e-12 {
        0.0
    } else {
        v
    }
}

/// Gains, phases and drifts that stabilize `target` exactly when detection
/// is perfect and the loop is instantaneous.
pub fn feedback_law(target: &TargetState, params: &PhysicalParams) -> Result<ControllerConfig> {
    target.validate()?;
    if params.eta <= 0.0 {
        return Err(invalid("eta", "the feedback law needs a non-zero efficiency"));
    }
    let (st, ct) = target.theta.sin_cos();
    let (sp, cp) = target.phi.sin_cos();
    let (st, ct, sp, cp) = (snap(st), snap(ct), snap(sp), snap(cp));
    let scale = (params.gamma1 / (8.0 * params.eta)).sqrt();
    let drift = params.gamma1 / (8.0 * params.eta) * (ct - params.eta) * st;
    let g_fm = scale * st;
    Ok(ControllerConfig {
        g_r: scale * (1.0 + ct),
        alpha: FRAC_PI_2,
        g_fm,
        beta: target.phi - FRAC_PI_2,
        u_bar: snap(-sp * drift),
        v_bar: snap(cp * drift),
        fm_mode: if g_fm > 0.0 { FmMode::Linear } else { FmMode::Off },
        fm_nl: FmNonlinearity::default(),
    })
}

/// Transverse drive (δu, δv) = G_R·R(−α)·(h_I, h_Q).
pub fn rabi_box(h_i: f64, h_q: f64, cfg: &ControllerConfig) -> (f64, f64) {
    let (sa, ca) = cfg.alpha.sin_cos();
    (
        cfg.g_r * (ca * h_i + sa * h_q),
        cfg.g_r * (-sa * h_i + ca * h_q),
    )
}

/// Frequency modulation w from the FM-path records.
pub fn fm_box(h_i: f64, h_q: f64, cfg: &ControllerConfig) -> Result<f64> {
    let (sb, cb) = cfg.beta.sin_cos();
    let v_beta = h_i * cb + h_q * sb;
    match cfg.fm_mode {
        FmMode::Off => Ok(0.0),
        FmMode::Linear => Ok(cfg.g_fm * v_beta),
        FmMode::Exact => {
            cfg.fm_nl.validate()?;
            let k = cfg.fm_nl.stark_coeff;
            let eps0 = cfg.fm_nl.carrier;
            let g = cfg.fm_nl.path_gain(cfg.g_fm);
            Ok(k * (2.0 * g * eps0 * v_beta + g * g * (h_i * h_i + h_q * h_q)))
        }
    }
}

/// u = ū + δu, v = v̄ + δv, w from the FM box (zero when it is off).
pub fn total_controls(rabi_out: (f64, f64), fm_out: f64, cfg: &ControllerConfig) -> ControlVector {
    ControlVector::new(
        cfg.u_bar + rabi_out.0,
        cfg.v_bar + rabi_out.1,
        if cfg.fm_active() { fm_out } else { 0.0 },
    )
}

/// Hot-loop form of a [`ControllerConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Controller {
    rabi: [f64; 2],
    fm: [f64; 2],
    quadratic: f64,
    drift: [f64; 2],
    fm_on: bool,
}

impl Controller {
    pub fn fm_on(&self) -> bool {
        self.fm_on
    }

    #[inline]
    pub fn controls(&self, rabi_in: (f64, f64), fm_in: (f64, f64)) -> ControlVector {
        let [c, s] = self.rabi;
        let (hi, hq) = rabi_in;
        let u = self.drift[0] + c * hi + s * hq;
        let v = self.drift[1] - s * hi + c * hq;
        let w = if self.fm_on {
            let (fi, fq) = fm_in;
            self.fm[0] * fi + self.fm[1] * fq + self.quadratic * (fi * fi + fq * fq)
        } else {
            0.0
        };
        ControlVector::new(u, v, w)
    }
}
