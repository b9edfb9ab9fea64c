//! Monte Carlo ensembles of independent trajectories.
//!
//! Trajectory `i` draws its noise from ChaCha8 seeded with `master_seed` on
//! stream `i` ([`trajectory_rng`]); this derivation is part of the stable
//! interface. Trajectories are reduced in fixed blocks of [`BLOCK`] indices
//! and the block results are merged in index order, so statistics are
//! bit-identical for any number of worker threads.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::ControllerConfig;
use crate::error::{invalid, Error, Result};
use crate::model::{BlochVector, PhysicalParams};
use crate::sme::{run_trajectory, Sampling, SimSettings, StepDiagnostics, Stepper, CLIP_WARNING_FRACTION};

pub const BLOCK: usize = 64;

/// RNG of trajectory `index` in an ensemble seeded with `master_seed`.
pub fn trajectory_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleSpec {
    pub n_trajectories: usize,
    pub duration: f64,
    /// None keeps only the initial and final samples.
    pub sample_interval: Option<f64>,
    pub master_seed: u64,
    pub init: BlochVector,
}

impl EnsembleSpec {
    pub fn new(n_trajectories: usize, duration: f64, master_seed: u64, init: BlochVector) -> Self {
        Self {
            n_trajectories,
            duration,
            sample_interval: None,
            master_seed,
            init,
        }
    }

    pub fn sampled_every(mut self, interval: f64) -> Self {
        self.sample_interval = Some(interval);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub times: Vec<f64>,
    pub mean_x: Vec<f64>,
    pub mean_y: Vec<f64>,
    pub mean_z: Vec<f64>,
    pub sem_x: Vec<f64>,
    pub sem_y: Vec<f64>,
    pub sem_z: Vec<f64>,
    pub n_trajectories: usize,
    pub clip_fraction: f64,
}

impl EnsembleStats {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn mean(&self, i: usize) -> BlochVector {
        BlochVector::new(self.mean_x[i], self.mean_y[i], self.mean_z[i])
    }

    pub fn sem(&self, i: usize) -> BlochVector {
        BlochVector::new(self.sem_x[i], self.sem_y[i], self.sem_z[i])
    }

    pub fn final_mean(&self) -> BlochVector {
        self.mean(self.len() - 1)
    }

    pub fn final_sem(&self) -> BlochVector {
        self.sem(self.len() - 1)
    }
}

/// Running count / mean / M2 per sample and component.
#[derive(Debug, Clone)]
struct Moments {
    n: f64,
    mean: Vec<[f64; 3]>,
    m2: Vec<[f64; 3]>,
    diag: StepDiagnostics,
}

impl Moments {
    fn new(samples: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![[0.0; 3]; samples],
            m2: vec![[0.0; 3]; samples],
            diag: StepDiagnostics::default(),
        }
    }

    fn push(&mut self, states: &[BlochVector]) {
        self.n += 1.0;
        for ((m, s), r) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(states) {
            for (k, v) in r.to_array().into_iter().enumerate() {
                let d = v - m[k];
                m[k] += d / self.n;
                s[k] += d * (v - m[k]);
            }
        }
    }

    /// Chan et al. pairwise merge.
    fn merge(mut self, other: &Self) -> Self {
        if other.n == 0.0 {
            return self;
        }
        let n = self.n + other.n;
        for i in 0..self.mean.len() {
            for k in 0..3 {
                let d = other.mean[i][k] - self.mean[i][k];
                self.mean[i][k] += d * other.n / n;
                self.m2[i][k] += other.m2[i][k] + d * d * self.n * other.n / n;
            }
        }
        self.n = n;
        self.diag.merge(&other.diag);
        self
    }
}

/// Runs the ensemble for an already-built stepper.
pub fn run_ensemble_with(stepper: &Stepper, spec: &EnsembleSpec) -> Result<EnsembleStats> {
    if spec.n_trajectories < 2 {
        return Err(invalid("n_trajectories", "need at least 2 trajectories"));
    }
    let sampling = Sampling::new(spec.duration, spec.sample_interval, stepper.dt())?;
    let steps = sampling.sample_steps();
    let n_samples = steps.len();
    let n_blocks = spec.n_trajectories.div_ceil(BLOCK);

    let blocks: Vec<Moments> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = Moments::new(n_samples);
            let hi = ((b + 1) * BLOCK).min(spec.n_trajectories);
            for i in b * BLOCK..hi {
                let mut rng = trajectory_rng(spec.master_seed, i as u64);
                let traj = run_trajectory(&spec.init, stepper, &sampling, &mut rng, false)?;
                acc.push(&traj.states);
                acc.diag.merge(&traj.diagnostics);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    let total = pairwise_merge(blocks);
    let n = total.n;
    let sem = |m2: f64| (m2 / (n - 1.0) / n).sqrt();
    let pick = |k: usize| -> (Vec<f64>, Vec<f64>) {
        total
            .mean
            .iter()
            .zip(&total.m2)
            .map(|(m, s)| (m[k], sem(s[k])))
            .unzip()
    };
    let (mean_x, sem_x) = pick(0);
    let (mean_y, sem_y) = pick(1);
    let (mean_z, sem_z) = pick(2);
    let clip_fraction = total.diag.clip_fraction();
    if clip_fraction > CLIP_WARNING_FRACTION {
        log::warn!(
            "ensemble clip fraction {clip_fraction:.2e} exceeds {CLIP_WARNING_FRACTION:.0e}; reduce dt"
        );
    }
    Ok(EnsembleStats {
        times: steps.iter().map(|&s| s as f64 * stepper.dt()).collect(),
        mean_x,
        mean_y,
        mean_z,
        sem_x,
        sem_y,
        sem_z,
        n_trajectories: spec.n_trajectories,
        clip_fraction,
    })
}

fn pairwise_merge(mut parts: Vec<Moments>) -> Moments {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => a.merge(&b),
                None => a,
            });
        }
        parts = next;
    }
    parts.pop().expect("at least one block")
}

pub fn run_ensemble(
    cfg: &ControllerConfig,
    params: &PhysicalParams,
    settings: &SimSettings,
    spec: &EnsembleSpec,
) -> Result<EnsembleStats> {
    let stepper = Stepper::new(cfg, params, settings)?;
    run_ensemble_with(&stepper, spec)
}

/// Least-squares fit of f(t) = asymptote − amplitude·e^{−rate·t}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpFit {
    pub rate: f64,
    pub asymptote: f64,
    pub amplitude: f64,
    /// Root-mean-square residual of the fit.
    pub residual: f64,
}

impl ExpFit {
    pub fn eval(&self, t: f64) -> f64 {
        self.asymptote - self.amplitude * (-self.rate * t).exp()
    }
}

/// Linear least squares in (a, b) at fixed rate; returns (a, b, sse).
fn project(times: &[f64], series: &[f64], rate: f64) -> (f64, f64, f64) {
    let n = times.len() as f64;
    let (mut se, mut see, mut sy, mut sey) = (0.0, 0.0, 0.0, 0.0);
    for (&t, &y) in times.iter().zip(series) {
        let e = -(-rate * t).exp();
        se += e;
        see += e * e;
        sy += y;
        sey += e * y;
    }
    let det = n * see - se * se;
    let (a, b) = if det.abs() < 1e-300 {
        (sy / n, 0.0)
    } else {
        ((see * sy - se * sey) / det, (n * sey - se * sy) / det)
    };
    let sse = times
        .iter()
        .zip(series)
        .map(|(&t, &y)| {
            let r = y - (a - b * (-rate * t).exp());
            r * r
        })
        .sum();
    (a, b, sse)
}

/// Fits f(t) = a − b·e^{−Γt} by scanning Γ on a log grid and refining the
/// best bracket with golden-section search. The linear coefficients are
/// solved exactly at each Γ.
pub fn fit_exponential(times: &[f64], series: &[f64]) -> Result<ExpFit> {
    if times.len() != series.len() {
        return Err(invalid("series", "times and series differ in length"));
    }
    if times.len() < 10 {
        return Err(invalid("series", "need at least 10 points"));
    }
    let t0 = times[0];
    let span = times[times.len() - 1] - t0;
    if !(span > 0.0) {
        return Err(invalid("times", "must span a positive interval"));
    }
    let rel: Vec<f64> = times.iter().map(|t| t - t0).collect();
    let sse = |log_rate: f64| project(&rel, series, log_rate.exp()).2;

    let (lo, hi) = ((0.05 / span).ln(), (2000.0 / span).ln());
    let grid = 240;
    let points: Vec<(f64, f64)> = (0..=grid)
        .map(|i| {
            let l = lo + (hi - lo) * i as f64 / grid as f64;
            (l, sse(l))
        })
        .collect();
    let best = points
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map(|(i, _)| i)
        .expect("non-empty grid");
    let fail = |l: f64| Error::FitFailed {
        residual: (sse(l) / rel.len() as f64).sqrt(),
    };
    if best == 0 || best == grid {
        return Err(fail(points[best].0));
    }

    let (mut a, mut b) = (points[best - 1].0, points[best + 1].0);
    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (sse(c), sse(d));
    while b - a > 1e-10 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = sse(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = sse(d);
        }
    }
    let l = 0.5 * (a + b);
    let rate = l.exp();
    if rate * span < 2.0 {
        return Err(fail(l));
    }
    let (asymptote, amp0, err) = project(&rel, series, rate);
    // amplitude referred to the absolute time origin
    Ok(ExpFit {
        rate,
        asymptote,
        amplitude: amp0 * (rate * t0).exp(),
        residual: (err / rel.len() as f64).sqrt(),
    })
}

/// Least-squares fit of f(t) = a + e^{−Γt}(b cos ωt + c sin ωt).
///
/// A Bloch-vector component relaxing along a complex pair of modes has a
/// suppressed initial slope, which drags a single-exponential rate well
/// below the true decay rate. Γ here is the envelope rate; ω = 0 recovers
/// the single exponential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DampedFit {
    pub rate: f64,
    pub omega: f64,
    /// One asymptote per fitted series.
    pub asymptotes: Vec<f64>,
    /// Root-mean-square residual over all series.
    pub residual: f64,
}

fn project_damped(times: &[f64], series: &[f64], rate: f64, omega: f64) -> (f64, f64) {
    let basis = |t: f64| {
        let e = (-rate * t).exp();
        let (s, c) = (omega * t).sin_cos();
        [1.0, e * c, e * s]
    };
    let mut ata = Matrix3::zeros();
    let mut aty = Vector3::zeros();
    for (&t, &y) in times.iter().zip(series) {
        let v = Vector3::from(basis(t));
        ata += v * v.transpose();
        aty += v * y;
    }
    // without oscillation the sine column vanishes
    let coef = match ata.try_inverse() {
        Some(inv) if omega * times[times.len() - 1] > 1e-6 => inv * aty,
        _ => {
            let (a, b, _) = project(times, series, rate);
            Vector3::new(a, -b, 0.0)
        }
    };
    let sse = times
        .iter()
        .zip(series)
        .map(|(&t, &y)| {
            let r = y - Vector3::from(basis(t)).dot(&coef);
            r * r
        })
        .sum();
    (coef[0], sse)
}

/// Fits [`DampedFit`] to a single series.
pub fn fit_damped_exponential(times: &[f64], series: &[f64]) -> Result<DampedFit> {
    fit_damped_joint(times, &[series])
}

/// Fits several series sharing one (Γ, ω), each with its own linear
/// coefficients, by a (log Γ, ω) grid scan followed by local zooming. ω is
/// searched on [0, 10 cycles per span].
pub fn fit_damped_joint(times: &[f64], series: &[&[f64]]) -> Result<DampedFit> {
    if series.is_empty() || series.iter().any(|s| s.len() != times.len()) {
        return Err(invalid("series", "times and series differ in length"));
    }
    if times.len() < 10 {
        return Err(invalid("series", "need at least 10 points"));
    }
    let t0 = times[0];
    let span = times[times.len() - 1] - t0;
    if !(span > 0.0) {
        return Err(invalid("times", "must span a positive interval"));
    }
    let rel: Vec<f64> = times.iter().map(|t| t - t0).collect();
    let sse = |l: f64, w: f64| -> f64 {
        series
            .iter()
            .map(|s| project_damped(&rel, s, l.exp(), w.max(0.0)).1)
            .sum()
    };

    let (lo, hi) = ((0.05 / span).ln(), (2000.0 / span).ln());
    let w_max = 20.0 * std::f64::consts::PI / span;
    let (nl, nw) = (160, 60);
    let mut best = (lo, 0.0, f64::INFINITY);
    for i in 0..=nl {
        let l = lo + (hi - lo) * i as f64 / nl as f64;
        for j in 0..=nw {
            let w = w_max * j as f64 / nw as f64;
            let e = sse(l, w);
            if e < best.2 {
                best = (l, w, e);
            }
        }
    }
    let n_points = (rel.len() * series.len()) as f64;
    let fail = |e: f64| Error::FitFailed {
        residual: (e / n_points).sqrt(),
    };
    let (mut dl, mut dw) = ((hi - lo) / nl as f64, w_max / nw as f64);
    if best.0 <= lo + 0.5 * dl || best.0 >= hi - 0.5 * dl {
        return Err(fail(best.2));
    }
    for _ in 0..30 {
        let (l0, w0) = (best.0, best.1);
        for i in -4..=4 {
            for j in -4..=4 {
                let (l, w) = (l0 + dl * i as f64 / 4.0, (w0 + dw * j as f64 / 4.0).max(0.0));
                let e = sse(l, w);
                if e < best.2 {
                    best = (l, w, e);
                }
            }
        }
        dl *= 0.5;
        dw *= 0.5;
    }
    let rate = best.0.exp();
    if rate * span < 2.0 {
        return Err(fail(best.2));
    }
    Ok(DampedFit {
        rate,
        omega: best.1,
        asymptotes: series.iter().map(|s| project_damped(&rel, s, rate, best.1).0).collect(),
        residual: (best.2 / n_points).sqrt(),
    })
}
