//! Deterministic cross-check of the Monte Carlo engine in the Markovian
//! limit.
//!
//! With the filters bypassed and no loop delay, the ensemble mean obeys an
//! affine equation ṙ = A r + b. The generator is recovered numerically from
//! one-step expectations of the production stepper at a handful of probe
//! states, so no hand-derived feedback master equation enters the check.
//! Affinity itself is tested through the fit residual.

use nalgebra::{Complex, DMatrix, Matrix3, Matrix4, SymmetricEigen, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::controller::{feedback_law, ControllerConfig};
use crate::error::{invalid, Error, Result};
use crate::model::{BlochVector, PhysicalParams, TargetState};
use crate::sme::{SimSettings, StepDiagnostics, Stepper};

/// Step used by [`ideal_fixed_point_check`].
pub const ORACLE_DT: f64 = 1e-9;

/// Tolerated overshoot of |r*| before a steady state is called unphysical.
pub const STEADY_STATE_NORM_TOLERANCE: f64 = 1e-2;

/// The six poles plus one interior point: an over-determined affine fit.
pub const PROBES: [BlochVector; 7] = [
    BlochVector::new(1.0, 0.0, 0.0),
    BlochVector::new(-1.0, 0.0, 0.0),
    BlochVector::new(0.0, 1.0, 0.0),
    BlochVector::new(0.0, -1.0, 0.0),
    BlochVector::new(0.0, 0.0, 1.0),
    BlochVector::new(0.0, 0.0, -1.0),
    BlochVector::new(0.1, 0.1, 0.1),
];

/// How the one-step expectation over (dW_I, dW_Q) is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbeMethod {
    /// Tensor Gauss–Hermite rule with `nodes` points per quadrature.
    Quadrature { nodes: usize },
    /// `draws` antithetic pairs per probe.
    MonteCarlo { draws: usize, seed: u64 },
}

impl Default for ProbeMethod {
    fn default() -> Self {
        Self::Quadrature { nodes: 12 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGenerator {
    pub a: Matrix3<f64>,
    pub b: Vector3<f64>,
    /// RMS misfit of the affine model over all probes (s⁻¹).
    pub fit_residual: f64,
    /// Statistical (or quadrature) uncertainty of `fit_residual` (s⁻¹).
    pub residual_uncertainty: f64,
}

impl AffineGenerator {
    /// Residual at most five times its uncertainty.
    pub fn is_affine(&self) -> bool {
        self.fit_residual <= 5.0 * self.residual_uncertainty
    }

    pub fn eigenvalues(&self) -> Vec<Complex<f64>> {
        self.a.complex_eigenvalues().iter().copied().collect()
    }

    /// Smallest decay rate −Re λ over the spectrum of A.
    pub fn slowest_rate(&self) -> f64 {
        self.eigenvalues()
            .iter()
            .map(|l| -l.re)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn apply(&self, r: &BlochVector) -> BlochVector {
        let v = self.a * Vector3::new(r.x, r.y, r.z) + self.b;
        BlochVector::new(v[0], v[1], v[2])
    }

    /// Solution of ṙ = A r + b at time `t` from `r0`.
    pub fn propagate(&self, r0: &BlochVector, t: f64) -> BlochVector {
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(self.a * t));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(self.b * t));
        let v = m.exp() * Vector4::new(r0.x, r0.y, r0.z, 1.0);
        BlochVector::new(v[0], v[1], v[2])
    }
}

/// Nodes and weights of the Gauss rule for the standard normal density.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Golub–Welsch on the Jacobi matrix of the probabilists' Hermite
    // polynomials, whose recurrence is x He_k = He_{k+1} + k He_{k-1}.
    let mut j = DMatrix::zeros(n, n);
    for k in 1..n {
        let off = (k as f64).sqrt();
        j[(k - 1, k)] = off;
        j[(k, k - 1)] = off;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Mean and standard error of Δr/dt from `probe` over one step.
fn probe_drift(stepper: &Stepper, probe: &BlochVector, method: &ProbeMethod, index: u64) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let dt = stepper.dt();
    let sq = dt.sqrt();
    let mut diag = StepDiagnostics::default();
    let mut increment = |dw_i: f64, dw_q: f64| -> Result<Vector3<f64>> {
        let mut chain = stepper.new_chain()?;
        let (r, _) = stepper.step_with_noise(probe, &mut chain, dw_i, dw_q, &mut diag)?;
        let d = r - *probe;
        Ok(Vector3::new(d.x, d.y, d.z) / dt)
    };
    match *method {
        ProbeMethod::Quadrature { nodes } => {
            let (xs, ws) = gauss_hermite(nodes);
            let mut acc = Vector3::zeros();
            for (xi, wi) in xs.iter().zip(&ws) {
                for (xq, wq) in xs.iter().zip(&ws) {
                    acc += increment(xi * sq, xq * sq)? * (wi * wq);
                }
            }
            Ok((acc, Vector3::zeros()))
        }
        ProbeMethod::MonteCarlo { draws, seed } => {
            if draws < 2 {
                return Err(invalid("draws", "need at least 2 antithetic pairs"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index);
            let (mut mean, mut m2) = (Vector3::zeros(), Vector3::zeros());
            for k in 0..draws {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                let s = 0.5 * (increment(a * sq, b * sq)? + increment(-a * sq, -b * sq)?);
                let d: Vector3<f64> = s - mean;
                mean += d / (k + 1) as f64;
                m2 += d.component_mul(&(s - mean));
            }
            let sem = m2.map(|v| (v / ((draws - 1) * draws) as f64).sqrt());
            Ok((mean, sem))
        }
    }
}

/// Fits the Markovian-limit generator of `cfg` from one-step probe
/// expectations.
pub fn extract_generator(
    cfg: &ControllerConfig,
    params: &PhysicalParams,
    settings: &SimSettings,
    method: &ProbeMethod,
) -> Result<AffineGenerator> {
    if !settings.markovian_limit {
        return Err(invalid(
            "markovian_limit",
            "the affine generator exists only with bypassed filters and no delay",
        ));
    }
    let stepper = Stepper::new(cfg, params, settings)?;
    let mut rows = Vec::with_capacity(PROBES.len());
    for (i, p) in PROBES.iter().enumerate() {
        rows.push(probe_drift(&stepper, p, method, i as u64)?);
    }

    // least squares of [r, 1] ↦ drift, all three components at once
    let n = PROBES.len();
    let x = DMatrix::from_fn(n, 4, |i, j| if j < 3 { PROBES[i].to_array()[j] } else { 1.0 });
    let y = DMatrix::from_fn(n, 3, |i, k| rows[i].0[k]);
    let xtx = x.transpose() * &x;
    let coef = xtx
        .try_inverse()
        .ok_or(Error::SingularGenerator)?
        * x.transpose()
        * &y;
    let a = Matrix3::from_fn(|k, j| coef[(j, k)]);
    let b = Vector3::new(coef[(3, 0)], coef[(3, 1)], coef[(3, 2)]);
    let resid = &y - &x * &coef;
    let fit_residual = (resid.norm_squared() / (3 * n) as f64).sqrt();

    let scale = a.abs().max().max(b.abs().max());
    let residual_uncertainty = match method {
        ProbeMethod::MonteCarlo { .. } => {
            let ms: f64 = rows.iter().map(|r| r.1.norm_squared()).sum::<f64>() / (3 * n) as f64;
            ms.sqrt()
        }
        // A one-step expectation departs from affinity only at O(rate·dt).
        ProbeMethod::Quadrature { .. } => scale * (scale * settings.dt).max(1e-9),
    };
    Ok(AffineGenerator {
        a,
        b,
        fit_residual,
        residual_uncertainty,
    })
}

/// r* = −A⁻¹b.
pub fn steady_state(g: &AffineGenerator) -> Result<BlochVector> {
    let scale = g.a.abs().max();
    if scale == 0.0 || (g.a.determinant() / scale.powi(3)).abs() < 1e-12 {
        return Err(Error::SingularGenerator);
    }
    let sol = g.a.lu().solve(&(-g.b)).ok_or(Error::SingularGenerator)?;
    let r = BlochVector::new(sol[0], sol[1], sol[2]);
    if r.norm() > 1.0 + STEADY_STATE_NORM_TOLERANCE {
        return Err(Error::UnphysicalSteadyState { norm: r.norm() });
    }
    Ok(r)
}

/// Distance between the oracle steady state of the feedback law and the
/// target itself, under perfect detection and no excess dephasing.
pub fn ideal_fixed_point_check(target: &TargetState) -> Result<f64> {
    let params = PhysicalParams::ideal();
    let cfg = feedback_law(target, &params)?;
    let g = extract_generator(&cfg, &params, &SimSettings::markovian(ORACLE_DT), &ProbeMethod::default())?;
    Ok((steady_state(&g)? - target.bloch()).norm())
}
