//! Single-trajectory integrator of the heterodyne-monitored qubit with
//! feedback.
//!
//! One step of length dt runs, in order:
//! 1. draw the vacuum-noise increments dW_I, dW_Q ~ N(0, dt);
//! 2. condition the state on the records y = κ⟨σ⟩dt + dW;
//! 3. delay the records, then low-pass them (Rabi path at B, FM path at B_f);
//! 4. map the filtered records to (u, v, w);
//! 5. rotate the conditioned state exactly under H_c for dt;
//! 6. clip |r| back onto the unit ball if it overshoots.
//!
//! In the Markovian limit the filters are bypassed and the delay is zero, so
//! the rotation in step 5 is driven by the record produced in step 2 of the
//! same step.

use std::collections::VecDeque;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::controller::{Controller, ControllerConfig};
use crate::error::{invalid, Error, Result};
use crate::model::{BlochVector, ControlVector, PhysicalParams, NORM_EPSILON};

/// Overshoot beyond which a step is treated as an integration failure.
pub const CLIP_FAILURE_THRESHOLD: f64 = 0.05;

/// Fraction of clipped steps above which the run is flagged as too coarse.
pub const CLIP_WARNING_FRACTION: f64 = 1e-3;

/// Default integration step, 2 ns.
pub const DEFAULT_DT: f64 = 2e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasurementScheme {
    /// Completely positive Kraus update; keeps ρ ≥ 0 and pure states pure.
    #[default]
    Kraus,
    /// Explicit Euler–Maruyama on the Itô Bloch equations.
    Euler,
}

/// Integration settings shared by every trajectory of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    pub dt: f64,
    /// Bypass both filters and use a zero loop delay.
    pub markovian_limit: bool,
    pub scheme: MeasurementScheme,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            markovian_limit: false,
            scheme: MeasurementScheme::Kraus,
        }
    }
}

impl SimSettings {
    pub fn markovian(dt: f64) -> Self {
        Self {
            dt,
            markovian_limit: true,
            ..Self::default()
        }
    }
}

/// Integrated record increments V_I·dt, V_Q·dt (units s^{1/2}).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub y_i: f64,
    pub y_q: f64,
}

/// Conditions `r` on one pair of record increments.
///
/// Returns the updated state and the records y = κ⟨σ_{x,y}⟩dt + dW, with
/// κ = √(ηγ₁/2). `extra_dephasing` adds to γ_φ (e.g. γ_m while the FM box
/// drives the cavity).
pub fn measurement_update(
    r: &BlochVector,
    dw_i: f64,
    dw_q: f64,
    params: &PhysicalParams,
    extra_dephasing: f64,
    dt: f64,
    scheme: MeasurementScheme,
) -> (BlochVector, MeasurementRecord) {
    let kappa = params.kappa();
    let rec = MeasurementRecord {
        y_i: kappa * r.x * dt + dw_i,
        y_q: kappa * r.y * dt + dw_q,
    };
    let next = match scheme {
        MeasurementScheme::Euler => {
            let g2 = params.gamma2(extra_dephasing);
            euler_update(r, dw_i, dw_q, params.gamma1, g2, kappa, dt)
        }
        MeasurementScheme::Kraus => {
            let dephase = (-(params.gamma_phi + extra_dephasing) * dt).exp();
            kraus_update(r, &rec, params.gamma1, params.eta, kappa, dephase, dt)
        }
    };
    (next, rec)
}

#[inline]
fn euler_update(
    r: &BlochVector,
    dw_i: f64,
    dw_q: f64,
    gamma1: f64,
    gamma2: f64,
    kappa: f64,
    dt: f64,
) -> BlochVector {
    let BlochVector { x, y, z } = *r;
    let zp = 1.0 + z;
    BlochVector::new(
        x - gamma2 * x * dt + kappa * ((zp - x * x) * dw_i - x * y * dw_q),
        y - gamma2 * y * dt + kappa * (-x * y * dw_i + (zp - y * y) * dw_q),
        z - gamma1 * zp * dt - kappa * zp * (x * dw_i + y * dw_q),
    )
}

/// ρ ← (MρM† + (1−η)γ₁dt σ₋ρσ₊) / Tr, with
/// M = 1 − (γ₁dt/2)|e⟩⟨e| + κ(y_I + i y_Q)σ₋, followed by the exact pure
/// dephasing channel. Basis order (e, g); ρ_eg = (x − iy)/2.
#[inline]
fn kraus_update(
    r: &BlochVector,
    rec: &MeasurementRecord,
    gamma1: f64,
    eta: f64,
    kappa: f64,
    dephase: f64,
    dt: f64,
) -> BlochVector {
    let p = 0.5 * (1.0 + r.z);
    let q = 0.5 * (1.0 - r.z);
    let (c_re, c_im) = (0.5 * r.x, -0.5 * r.y);
    let a = 1.0 - 0.5 * gamma1 * dt;
    let (zr, zi) = (kappa * rec.y_i, kappa * rec.y_q);

    let ee = a * a * p;
    let eg_re = a * (p * zr + c_re);
    let eg_im = a * (c_im - p * zi);
    let gg = (zr * zr + zi * zi) * p + 2.0 * (zr * c_re - zi * c_im) + q
        + (1.0 - eta) * gamma1 * dt * p;
    let inv = 1.0 / (ee + gg);
    BlochVector::new(
        2.0 * eg_re * inv * dephase,
        -2.0 * eg_im * inv * dephase,
        (ee - gg) * inv,
    )
}

/// Rotates `r` exactly under H_c = u σx + v σy + w σz for a time dt, i.e. by
/// the angle |Ω|dt about Ω = 2(u, v, w).
pub fn control_rotation(r: &BlochVector, c: &ControlVector, dt: f64) -> BlochVector {
    let om = BlochVector::new(2.0 * c.u * dt, 2.0 * c.v * dt, 2.0 * c.w * dt);
    let th2 = om.norm_sq();
    if th2 == 0.0 {
        return *r;
    }
    // r' = r + s·(ω×r) + k·ω×(ω×r), s = sinθ/θ, k = (1−cosθ)/θ²
    let (s, k) = if th2 < 1e-4 {
        (
            1.0 - th2 / 6.0 + th2 * th2 / 120.0,
            0.5 - th2 / 24.0 + th2 * th2 / 720.0,
        )
    } else {
        let th = th2.sqrt();
        let (sn, cs) = th.sin_cos();
        (sn / th, (1.0 - cs) / th2)
    };
    let c1 = om.cross(r);
    let c2 = om.cross(&c1);
    BlochVector::new(
        r.x + s * c1.x + k * c2.x,
        r.y + s * c1.y + k * c2.y,
        r.z + s * c1.z + k * c2.z,
    )
}

/// One-pole low-pass on both quadratures, h ← h + 2πB(in − h)dt.
#[derive(Debug, Clone, PartialEq)]
pub struct LowPass {
    gain: f64,
    bypass: bool,
    state: [f64; 2],
}

impl LowPass {
    pub fn new(bandwidth: f64, dt: f64) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(invalid("bandwidth", "must be > 0 (or use a bypass filter)"));
        }
        let gain = TAU * bandwidth * dt;
        if gain >= 1.0 {
            return Err(invalid(
                "dt",
                format!("2π·B·dt = {gain:.3} must be < 1 for a stable filter"),
            ));
        }
        Ok(Self {
            gain,
            bypass: false,
            state: [0.0; 2],
        })
    }

    pub fn bypass() -> Self {
        Self {
            gain: 1.0,
            bypass: true,
            state: [0.0; 2],
        }
    }

    pub fn state(&self) -> (f64, f64) {
        (self.state[0], self.state[1])
    }

    /// Feeds instantaneous record values (increment / dt) and returns the
    /// updated outputs.
    #[inline]
    pub fn step(&mut self, in_i: f64, in_q: f64) -> (f64, f64) {
        if self.bypass {
            self.state = [in_i, in_q];
        } else {
            self.state[0] += self.gain * (in_i - self.state[0]);
            self.state[1] += self.gain * (in_q - self.state[1]);
        }
        (self.state[0], self.state[1])
    }
}

/// Functional form of [`LowPass::step`]; `bandwidth = None` bypasses.
pub fn filter_step(
    state: (f64, f64),
    in_i: f64,
    in_q: f64,
    bandwidth: Option<f64>,
    dt: f64,
) -> Result<((f64, f64), f64, f64)> {
    match bandwidth {
        None => Ok(((in_i, in_q), in_i, in_q)),
        Some(b) => {
            let mut f = LowPass::new(b, dt)?;
            f.state = [state.0, state.1];
            let (oi, oq) = f.step(in_i, in_q);
            Ok(((oi, oq), oi, oq))
        }
    }
}

/// Fixed-length delay line for record pairs, zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayLine {
    buf: VecDeque<(f64, f64)>,
}

impl DelayLine {
    /// A line of `steps` samples; zero steps passes inputs straight through.
    pub fn new(steps: usize) -> Self {
        Self {
            buf: std::iter::repeat_n((0.0, 0.0), steps).collect(),
        }
    }

    /// round(T_d / dt) samples.
    pub fn for_delay(delay: f64, dt: f64) -> Self {
        Self::new((delay / dt).round() as usize)
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    #[inline]
    pub fn step(&mut self, in_i: f64, in_q: f64) -> (f64, f64) {
        match self.buf.pop_front() {
            None => (in_i, in_q),
            Some(out) => {
                self.buf.push_back((in_i, in_q));
                out
            }
        }
    }
}

/// Pushes an input pair and returns the pair from `buffer.len()` steps ago.
pub fn delay_step(buffer: &mut DelayLine, in_i: f64, in_q: f64) -> (f64, f64) {
    buffer.step(in_i, in_q)
}

/// Filter memories and the delay line carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalChainState {
    pub rabi_filter: LowPass,
    pub fm_filter: LowPass,
    pub delay: DelayLine,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepDiagnostics {
    pub steps: u64,
    pub clips: u64,
    pub max_norm: f64,
}

impl StepDiagnostics {
    pub fn clip_fraction(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.clips as f64 / self.steps as f64
        }
    }

    pub fn dt_too_coarse(&self) -> bool {
        self.clip_fraction() > CLIP_WARNING_FRACTION
    }

    pub fn merge(&mut self, other: &Self) {
        self.steps += other.steps;
        self.clips += other.clips;
        self.max_norm = self.max_norm.max(other.max_norm);
    }
}

/// Everything a trajectory needs that does not change from step to step.
#[derive(Debug, Clone)]
pub struct Stepper {
    params: PhysicalParams,
    controller: Controller,
    settings: SimSettings,
    sqrt_dt: f64,
    extra_dephasing: f64,
}

impl Stepper {
    pub fn new(cfg: &ControllerConfig, params: &PhysicalParams, settings: &SimSettings) -> Result<Self> {
        params.validate()?;
        if !(settings.dt > 0.0) || !settings.dt.is_finite() {
            return Err(invalid("dt", "must be > 0"));
        }
        let controller = cfg.compile()?;
        let s = Self {
            params: *params,
            controller,
            settings: *settings,
            sqrt_dt: settings.dt.sqrt(),
            extra_dephasing: if controller.fm_on() { params.gamma_m } else { 0.0 },
        };
        // surface filter stability problems at construction
        s.new_chain()?;
        Ok(s)
    }

    pub fn dt(&self) -> f64 {
        self.settings.dt
    }

    pub fn params(&self) -> &PhysicalParams {
        &self.params
    }

    pub fn settings(&self) -> &SimSettings {
        &self.settings
    }

    pub fn new_chain(&self) -> Result<SignalChainState> {
        let dt = self.settings.dt;
        if self.settings.markovian_limit {
            return Ok(SignalChainState {
                rabi_filter: LowPass::bypass(),
                fm_filter: LowPass::bypass(),
                delay: DelayLine::new(0),
            });
        }
        Ok(SignalChainState {
            rabi_filter: LowPass::new(self.params.bandwidth, dt)?,
            fm_filter: if self.controller.fm_on() {
                LowPass::new(self.params.fm_bandwidth, dt)?
            } else {
                LowPass::bypass()
            },
            delay: DelayLine::for_delay(self.params.delay, dt),
        })
    }

    #[inline]
    pub fn step<R: Rng + ?Sized>(
        &self,
        r: &BlochVector,
        chain: &mut SignalChainState,
        rng: &mut R,
        diag: &mut StepDiagnostics,
    ) -> Result<BlochVector> {
        let (dw_i, dw_q) = self.draw_noise(rng);
        self.step_with_noise(r, chain, dw_i, dw_q, diag).map(|(r, _)| r)
    }

    /// Independent increments dW_I, dW_Q ~ N(0, dt).
    #[inline]
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        (a * self.sqrt_dt, b * self.sqrt_dt)
    }

    /// One step driven by caller-supplied Wiener increments.
    #[inline]
    pub fn step_with_noise(
        &self,
        r: &BlochVector,
        chain: &mut SignalChainState,
        dw_i: f64,
        dw_q: f64,
        diag: &mut StepDiagnostics,
    ) -> Result<(BlochVector, MeasurementRecord)> {
        let dt = self.settings.dt;
        let (mid, rec) = measurement_update(
            r,
            dw_i,
            dw_q,
            &self.params,
            self.extra_dephasing,
            dt,
            self.settings.scheme,
        );
        let (di, dq) = chain.delay.step(rec.y_i / dt, rec.y_q / dt);
        let rabi_in = chain.rabi_filter.step(di, dq);
        let fm_in = if self.controller.fm_on() {
            chain.fm_filter.step(di, dq)
        } else {
            (0.0, 0.0)
        };
        let c = self.controller.controls(rabi_in, fm_in);
        let mut next = control_rotation(&mid, &c, dt);

        diag.steps += 1;
        let n2 = next.norm_sq();
        if !(n2 <= 1.0) {
            let n = n2.sqrt();
            if !n.is_finite() || n > 1.0 + CLIP_FAILURE_THRESHOLD {
                return Err(Error::IntegrationFailure {
                    step: diag.steps,
                    norm: n,
                });
            }
            diag.max_norm = diag.max_norm.max(n);
            if n > 1.0 + NORM_EPSILON {
                diag.clips += 1;
            }
            next = next * (1.0 / n);
        }
        Ok((next, rec))
    }
}

/// When to store samples along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampling {
    pub steps: usize,
    /// Store every `stride` steps; 0 stores only the initial and final state.
    pub stride: usize,
}

impl Sampling {
    pub fn new(duration: f64, sample_interval: Option<f64>, dt: f64) -> Result<Self> {
        if !(duration >= dt) {
            return Err(invalid("duration", format!("must be >= dt ({dt:e} s)")));
        }
        let steps = (duration / dt).round() as usize;
        let stride = match sample_interval {
            None => 0,
            Some(s) if s > 0.0 => ((s / dt).round() as usize).max(1),
            Some(_) => return Err(invalid("sample_interval", "must be > 0")),
        };
        Ok(Self { steps, stride })
    }

    pub fn is_sample(&self, step: usize) -> bool {
        step == 0 || step == self.steps || (self.stride > 0 && step % self.stride == 0)
    }

    pub fn sample_steps(&self) -> Vec<usize> {
        (0..=self.steps).filter(|&s| self.is_sample(s)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<BlochVector>,
    /// Every record increment, when requested.
    pub records: Option<Vec<MeasurementRecord>>,
    pub diagnostics: StepDiagnostics,
}

impl Trajectory {
    pub fn last(&self) -> BlochVector {
        *self.states.last().expect("trajectory holds at least the initial state")
    }
}

/// Integrates one trajectory with an explicit RNG.
pub fn run_trajectory<R: Rng + ?Sized>(
    init: &BlochVector,
    stepper: &Stepper,
    sampling: &Sampling,
    rng: &mut R,
    keep_records: bool,
) -> Result<Trajectory> {
    let dt = stepper.dt();
    let mut chain = stepper.new_chain()?;
    let mut diag = StepDiagnostics::default();
    let mut r = *init;
    let n_samples = sampling.sample_steps().len();
    let mut times = Vec::with_capacity(n_samples);
    let mut states = Vec::with_capacity(n_samples);
    let mut records = keep_records.then(|| Vec::with_capacity(sampling.steps));
    times.push(0.0);
    states.push(r);
    for k in 1..=sampling.steps {
        let (dw_i, dw_q) = stepper.draw_noise(rng);
        let (next, rec) = stepper.step_with_noise(&r, &mut chain, dw_i, dw_q, &mut diag)?;
        r = next;
        if let Some(recs) = records.as_mut() {
            recs.push(rec);
        }
        if sampling.is_sample(k) {
            times.push(k as f64 * dt);
            states.push(r);
        }
    }
    Ok(Trajectory {
        times,
        states,
        records,
        diagnostics: diag,
    })
}

/// Integrates one trajectory; a pure function of `seed` and the inputs.
#[allow(clippy::too_many_arguments)]
pub fn simulate_trajectory(
    init: &BlochVector,
    cfg: &ControllerConfig,
    params: &PhysicalParams,
    settings: &SimSettings,
    duration: f64,
    sample_interval: Option<f64>,
    seed: u64,
    keep_records: bool,
) -> Result<Trajectory> {
    let stepper = Stepper::new(cfg, params, settings)?;
    let sampling = Sampling::new(duration, sample_interval, settings.dt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let traj = run_trajectory(init, &stepper, &sampling, &mut rng, keep_records)?;
    if traj.diagnostics.dt_too_coarse() {
        log::warn!(
            "clip fraction {:.2e} exceeds {:.0e}; dt = {:e} s is too coarse",
            traj.diagnostics.clip_fraction(),
            CLIP_WARNING_FRACTION,
            settings.dt
        );
    }
    Ok(traj)
}
