//! Figure-level experiments: parameter sweeps, transients, the empirical
//! G_FM optimization and the oracle comparison matrix. Each experiment is a
//! pure function of its [`ExperimentConfig`] and returns a [`Table`].
//!
//! Every point of a sweep reuses the same master seed, so neighbouring
//! points see common random numbers and their differences are far less
//! noisy than their absolute values.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{feedback_law, optimal_rabi_gain, ControllerConfig, FmMode, FmNonlinearity};
use crate::ensemble::{
    fit_damped_joint, fit_exponential, run_ensemble, DampedFit, EnsembleSpec, EnsembleStats, ExpFit,
};
use crate::error::{invalid, Result};
use crate::model::{fidelity, BlochVector, PhysicalParams, TargetState};
use crate::oracle::{extract_generator, steady_state, ProbeMethod};
use crate::sme::{MeasurementScheme, SimSettings, DEFAULT_DT};

/// How the controller is derived. By default the feedback law for the
/// configured target is used; the scales and offsets act on the law values
/// and the optional absolute fields override them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    pub law: bool,
    pub g_r_scale: f64,
    pub g_fm_scale: f64,
    /// Added to the law β (rad).
    pub beta_offset: f64,
    pub g_r: Option<f64>,
    pub alpha: Option<f64>,
    pub g_fm: Option<f64>,
    pub beta: Option<f64>,
    pub u_bar: Option<f64>,
    pub v_bar: Option<f64>,
    /// Linear when unset and G_FM > 0. Forced off when G_FM = 0.
    pub fm_mode: Option<FmMode>,
    pub fm_nl: FmNonlinearity,
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self {
            law: true,
            g_r_scale: 1.0,
            g_fm_scale: 1.0,
            beta_offset: 0.0,
            g_r: None,
            alpha: None,
            g_fm: None,
            beta: None,
            u_bar: None,
            v_bar: None,
            fm_mode: None,
            fm_nl: FmNonlinearity::default(),
        }
    }
}

impl ControllerSection {
    pub fn resolve(&self, target: &TargetState, params: &PhysicalParams) -> Result<ControllerConfig> {
        let mut c = if self.law {
            let mut c = feedback_law(target, params)?;
            c.g_r *= self.g_r_scale;
            c.g_fm *= self.g_fm_scale;
            c.beta += self.beta_offset;
            c
        } else {
            ControllerConfig::off()
        };
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut c.g_r, self.g_r);
        set(&mut c.alpha, self.alpha);
        set(&mut c.g_fm, self.g_fm);
        set(&mut c.beta, self.beta);
        set(&mut c.u_bar, self.u_bar);
        set(&mut c.v_bar, self.v_bar);
        c.fm_nl = self.fm_nl;
        c.fm_mode = if c.g_fm > 0.0 {
            self.fm_mode.unwrap_or(FmMode::Linear)
        } else {
            FmMode::Off
        };
        c.validate()?;
        Ok(c)
    }
}

/// Grid sizes and search settings of the sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub gain_points: usize,
    pub max_gain_ratio: f64,
    /// Second efficiency branch of the gain sweep; it shares the absolute
    /// gains of the main branch.
    pub low_eta: Option<f64>,
    pub alpha_points: usize,
    pub gain_ratios: Vec<f64>,
    /// Must be a multiple of 4.
    pub beta_points: usize,
    pub theta_points: usize,
    /// β offset used at every point of the θ sweep (rad).
    pub theta_beta_offset: f64,
    /// Run [`optimize_gfm`] before the β and θ sweeps.
    pub optimize_gfm: bool,
    pub gfm_scan_points: usize,
    /// Upper end of the G_FM search in units of the law value at θ=π/2.
    pub gfm_max_ratio: f64,
    pub gfm_max_evaluations: usize,
    /// Relative bracket width at which the golden-section search stops.
    pub gfm_tolerance: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            gain_points: 25,
            max_gain_ratio: 12.0,
            low_eta: Some(0.005),
            alpha_points: 16,
            gain_ratios: vec![0.35, 1.0, 11.4],
            beta_points: 24,
            theta_points: 13,
            theta_beta_offset: -10f64.to_radians(),
            optimize_gfm: true,
            gfm_scan_points: 6,
            gfm_max_ratio: 3.0,
            gfm_max_evaluations: 20,
            gfm_tolerance: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub dt: f64,
    pub duration: f64,
    pub n_trajectories: usize,
    pub seed: u64,
    /// Sampling interval of time series (s). Sweeps sample the final time only.
    pub sample_interval: f64,
    pub markovian_limit: bool,
    pub scheme: MeasurementScheme,
    /// Initial state; the thermal state of `physical` when unset.
    pub init: Option<BlochVector>,
    pub sweep: SweepSection,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            duration: 30e-6,
            n_trajectories: 4000,
            seed: 0,
            sample_interval: 0.25e-6,
            markovian_limit: false,
            scheme: MeasurementScheme::Kraus,
            init: None,
            sweep: SweepSection::default(),
        }
    }
}

impl SimSection {
    pub fn settings(&self) -> SimSettings {
        SimSettings {
            dt: self.dt,
            markovian_limit: self.markovian_limit,
            scheme: self.scheme,
        }
    }
}

/// A full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub physical: PhysicalParams,
    pub controller: ControllerSection,
    pub target: TargetState,
    pub sim: SimSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            physical: PhysicalParams::device(),
            controller: ControllerSection::default(),
            target: TargetState::excited(),
            sim: SimSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.physical.validate()?;
        self.target.validate()?;
        self.controller.resolve(&self.target, &self.physical)?;
        let s = &self.sim;
        if !(s.dt > 0.0 && s.dt.is_finite()) {
            return Err(invalid("sim.dt", "must be positive"));
        }
        if !(s.duration > 0.0 && s.duration.is_finite()) {
            return Err(invalid("sim.duration", "must be positive"));
        }
        if s.n_trajectories < 2 {
            return Err(invalid("sim.n_trajectories", "need at least 2"));
        }
        if !(s.sample_interval > 0.0) {
            return Err(invalid("sim.sample_interval", "must be positive"));
        }
        if let Some(r) = s.init {
            if !r.is_finite() || r.norm() > 1.0 + 1e-9 {
                return Err(invalid("sim.init", "must lie in the Bloch ball"));
            }
        }
        let w = &s.sweep;
        if w.beta_points < 4 || w.beta_points % 4 != 0 {
            return Err(invalid("sim.sweep.beta_points", "must be a positive multiple of 4"));
        }
        if w.gain_points < 2 || w.alpha_points < 2 || w.theta_points < 2 || w.gfm_scan_points < 3 {
            return Err(invalid("sim.sweep", "grids need at least 2 points (3 for the G_FM scan)"));
        }
        if !(w.max_gain_ratio > 0.0) || !(w.gfm_max_ratio > 0.0) || !(w.gfm_tolerance > 0.0) {
            return Err(invalid("sim.sweep", "ranges and tolerances must be positive"));
        }
        if let Some(eta) = w.low_eta {
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(invalid("sim.sweep.low_eta", "must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    pub fn controller_config(&self) -> Result<ControllerConfig> {
        self.controller.resolve(&self.target, &self.physical)
    }

    pub fn init(&self) -> BlochVector {
        self.sim.init.unwrap_or_else(|| self.physical.initial_state())
    }

    fn spec(&self, sampled: bool) -> EnsembleSpec {
        let s = EnsembleSpec::new(self.sim.n_trajectories, self.sim.duration, self.sim.seed, self.init());
        if sampled {
            s.sampled_every(self.sim.sample_interval)
        } else {
            s
        }
    }

    fn run(&self, cfg: &ControllerConfig, params: &PhysicalParams, sampled: bool) -> Result<EnsembleStats> {
        run_ensemble(cfg, params, &self.sim.settings(), &self.spec(sampled))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Num(f64),
    Text(String),
    Bool(bool),
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Self::Num(v) => Some(*v),
            _ => None,
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Self::Num(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Self::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Self::Text(v.to_string())
    }
}

/// Tabular result plus scalar summaries (fits, optima) of an experiment.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<Cell>>,
    pub summary: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl Table {
    pub fn new(columns: &[(&str, &str)]) -> Self {
        Self {
            columns: columns
                .iter()
                .map(|(n, u)| Column {
                    name: n.to_string(),
                    unit: u.to_string(),
                })
                .collect(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Numeric column by name; non-numeric cells become NaN.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[i].as_f64().unwrap_or(f64::NAN)).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("# ");
        let head: Vec<String> = self.columns.iter().map(|c| format!("{} [{}]", c.name, c.unit)).collect();
        out.push_str(&head.join(","));
        out.push('\n');
        let names: Vec<&str> = self.columns.iter().map(|c| c.name.as_str()).collect();
        out.push_str(&names.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .map(|c| match c {
                    Cell::Num(v) => format!("{v}"),
                    Cell::Text(s) => s.clone(),
                    Cell::Bool(b) => b.to_string(),
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }
}

const MEAN_COLUMNS: [(&str, &str); 6] = [
    ("mean_x", "1"),
    ("mean_y", "1"),
    ("mean_z", "1"),
    ("sem_x", "1"),
    ("sem_y", "1"),
    ("sem_z", "1"),
];

fn with_means(leading: &[(&'static str, &'static str)]) -> Vec<(&'static str, &'static str)> {
    leading.iter().copied().chain(MEAN_COLUMNS).collect()
}

fn mean_cells(m: &BlochVector, s: &BlochVector) -> [Cell; 6] {
    [m.x.into(), m.y.into(), m.z.into(), s.x.into(), s.y.into(), s.z.into()]
}

/// Gain ratios on [0, max]: zero plus points that crowd quadratically in
/// log scale around 1.
pub fn gain_grid(points: usize, max_ratio: f64) -> Vec<f64> {
    let m = points - 1;
    let mut grid = vec![0.0];
    let ln_max = max_ratio.ln();
    for j in 0..m {
        let u = if m == 1 { 1.0 } else { -1.0 + 2.0 * j as f64 / (m - 1) as f64 };
        grid.push((ln_max * u * u.abs()).exp());
    }
    grid
}

/// `n` evenly spaced points on [lo, hi), or on [lo, hi] when `closed`.
fn linspace(lo: f64, hi: f64, n: usize, closed: bool) -> Vec<f64> {
    let d = if closed { (n - 1) as f64 } else { n as f64 };
    (0..n).map(|i| lo + (hi - lo) * i as f64 / d).collect()
}

/// Ensemble time series for the configured controller.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Table> {
    cfg.validate()?;
    let ctrl = cfg.controller_config()?;
    let stats = cfg.run(&ctrl, &cfg.physical, true)?;
    let mut t = Table::new(&with_means(&[("t", "s")]).into_iter().chain([("fidelity", "1")]).collect::<Vec<_>>());
    for i in 0..stats.len() {
        let m = stats.mean(i);
        let mut row = vec![stats.times[i].into()];
        row.extend(mean_cells(&m, &stats.sem(i)));
        row.push(fidelity(&m, &cfg.target).into());
        t.push(row);
    }
    t.summary.insert("clip_fraction".into(), stats.clip_fraction);
    Ok(t)
}

/// Final Bloch means against G_R/G_R^opt, for the configured efficiency and
/// optionally a low-efficiency branch at the same absolute gains.
pub fn sweep_gain(cfg: &ExperimentConfig) -> Result<Table> {
    cfg.validate()?;
    if cfg.target.theta != 0.0 {
        log::warn!("gain sweep expects the excited-state target");
    }
    let w = &cfg.sim.sweep;
    let g_opt = optimal_rabi_gain(&cfg.physical);
    let base = cfg.controller_config()?;
    let mut etas = vec![cfg.physical.eta];
    etas.extend(w.low_eta);
    let jobs: Vec<(f64, f64)> = etas
        .iter()
        .flat_map(|&e| gain_grid(w.gain_points, w.max_gain_ratio).into_iter().map(move |r| (e, r)))
        .collect();
    let results: Vec<EnsembleStats> = jobs
        .par_iter()
        .map(|&(eta, ratio)| {
            let params = PhysicalParams { eta, ..cfg.physical };
            let ctrl = ControllerConfig {
                g_r: ratio * g_opt,
                ..base
            };
            cfg.run(&ctrl, &params, false)
        })
        .collect::<Result<_>>()?;
    let mut t = Table::new(&with_means(&[("eta", "1"), ("gain_ratio", "1"), ("g_r", "s^-1/2")]));
    for (&(eta, ratio), s) in jobs.iter().zip(&results) {
        let mut row = vec![eta.into(), ratio.into(), (ratio * g_opt).into()];
        row.extend(mean_cells(&s.final_mean(), &s.final_sem()));
        t.push(row);
    }
    Ok(t)
}

/// Final Bloch means against the Rabi rotation angle α for each of the
/// configured gain ratios.
pub fn sweep_alpha(cfg: &ExperimentConfig) -> Result<Table> {
    cfg.validate()?;
    let w = &cfg.sim.sweep;
    let g_opt = optimal_rabi_gain(&cfg.physical);
    let base = cfg.controller_config()?;
    let jobs: Vec<(f64, f64)> = w
        .gain_ratios
        .iter()
        .flat_map(|&r| linspace(0.0, TAU, w.alpha_points, false).into_iter().map(move |a| (r, a)))
        .collect();
    let results: Vec<EnsembleStats> = jobs
        .par_iter()
        .map(|&(ratio, alpha)| {
            let ctrl = ControllerConfig {
                g_r: ratio * g_opt,
                alpha,
                ..base
            };
            cfg.run(&ctrl, &cfg.physical, false)
        })
        .collect::<Result<_>>()?;
    let mut t = Table::new(&with_means(&[("gain_ratio", "1"), ("alpha", "rad")]));
    for (&(ratio, alpha), s) in jobs.iter().zip(&results) {
        let mut row = vec![ratio.into(), alpha.into()];
        row.extend(mean_cells(&s.final_mean(), &s.final_sem()));
        t.push(row);
    }
    Ok(t)
}

/// First-harmonic fit x + iy = C₁e^{iβ} + C₀ of a β sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaAnalysis {
    /// β at which the fitted oscillation points along +y (rad).
    pub beta_opt: f64,
    pub x_at_opt: f64,
    pub y_at_opt: f64,
    pub amplitude: f64,
    /// Correlation of mean_x(β) with mean_y(β + π/2).
    pub quadrature_correlation: f64,
}

/// `betas` must cover one period uniformly with a multiple of 4 points.
pub fn analyze_beta(betas: &[f64], xs: &[f64], ys: &[f64]) -> Result<BetaAnalysis> {
    let n = betas.len();
    if n < 4 || n % 4 != 0 || xs.len() != n || ys.len() != n {
        return Err(invalid("beta grid", "need a uniform grid with a multiple of 4 points"));
    }
    let (mut c1r, mut c1i, mut c0r, mut c0i) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let (s, c) = betas[i].sin_cos();
        // (x + iy)(cos β − i sin β)
        c1r += xs[i] * c + ys[i] * s;
        c1i += ys[i] * c - xs[i] * s;
        c0r += xs[i];
        c0i += ys[i];
    }
    let nf = n as f64;
    let (c1r, c1i, c0r, c0i) = (c1r / nf, c1i / nf, c0r / nf, c0i / nf);
    let amplitude = c1r.hypot(c1i);
    let beta_opt = wrap_pi(FRAC_PI_2 - c1i.atan2(c1r));

    let lag = n / 4;
    let shifted: Vec<f64> = (0..n).map(|i| ys[(i + lag) % n]).collect();
    Ok(BetaAnalysis {
        beta_opt,
        x_at_opt: c0r,
        y_at_opt: c0i + amplitude,
        amplitude,
        quadrature_correlation: pearson(xs, &shifted),
    })
}

fn wrap_pi(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// G_FM for the β and θ sweeps: optimized when requested, else the
/// configured value.
fn equator_gfm(cfg: &ExperimentConfig, table: &mut Table) -> Result<f64> {
    if cfg.sim.sweep.optimize_gfm {
        let opt = optimize_gfm(cfg)?;
        table.summary.insert("g_fm_opt".into(), opt.g_fm);
        table.warnings.extend(opt.table.warnings);
        Ok(opt.g_fm)
    } else {
        Ok(cfg.controller_config()?.g_fm)
    }
}

/// Final x and y against the FM phase β for the configured (equator) target.
pub fn sweep_beta(cfg: &ExperimentConfig) -> Result<Table> {
    cfg.validate()?;
    let mut t = Table::new(&with_means(&[("beta", "rad"), ("beta_deg", "deg")]));
    let g_fm = equator_gfm(cfg, &mut t)?;
    let base = ControllerConfig {
        g_fm,
        fm_mode: if g_fm > 0.0 {
            cfg.controller.fm_mode.unwrap_or(FmMode::Linear)
        } else {
            FmMode::Off
        },
        ..cfg.controller_config()?
    };
    let betas = linspace(-PI, PI, cfg.sim.sweep.beta_points, false);
    let results: Vec<EnsembleStats> = betas
        .par_iter()
        .map(|&beta| cfg.run(&ControllerConfig { beta, ..base }, &cfg.physical, false))
        .collect::<Result<_>>()?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (&beta, s) in betas.iter().zip(&results) {
        let m = s.final_mean();
        xs.push(m.x);
        ys.push(m.y);
        let mut row = vec![beta.into(), beta.to_degrees().into()];
        row.extend(mean_cells(&m, &s.final_sem()));
        t.push(row);
    }
    let a = analyze_beta(&betas, &xs, &ys)?;
    t.summary.insert("g_fm".into(), g_fm);
    t.summary.insert("beta_opt".into(), a.beta_opt);
    t.summary.insert("beta_opt_deg".into(), a.beta_opt.to_degrees());
    t.summary.insert("x_at_opt".into(), a.x_at_opt);
    t.summary.insert("y_at_opt".into(), a.y_at_opt);
    t.summary.insert("amplitude".into(), a.amplitude);
    t.summary.insert("quadrature_correlation".into(), a.quadrature_correlation);
    Ok(t)
}

/// Final state against the polar angle of the target at the configured φ,
/// with G_FM = G_FM^opt·sinθ and a fixed β offset from the law.
pub fn sweep_theta(cfg: &ExperimentConfig) -> Result<Table> {
    cfg.validate()?;
    let mut t = Table::new(
        &with_means(&[("theta", "rad")])
            .into_iter()
            .chain([("fidelity", "1"), ("purity", "1"), ("coherence", "1")])
            .collect::<Vec<_>>(),
    );
    let eq_cfg = ExperimentConfig {
        target: TargetState::new(FRAC_PI_2, cfg.target.phi)?,
        ..cfg.clone()
    };
    let g_fm_opt = equator_gfm(&eq_cfg, &mut t)?;
    let w = &cfg.sim.sweep;
    let thetas = linspace(0.0, PI, w.theta_points, true);
    let jobs: Vec<(TargetState, ControllerConfig)> = thetas
        .iter()
        .map(|&theta| {
            let target = TargetState::new(theta, cfg.target.phi)?;
            let section = ControllerSection {
                g_fm: Some(g_fm_opt * snap_sin(theta)),
                beta_offset: w.theta_beta_offset,
                ..cfg.controller
            };
            Ok((target, section.resolve(&target, &cfg.physical)?))
        })
        .collect::<Result<_>>()?;
    let results: Vec<EnsembleStats> = jobs
        .par_iter()
        .map(|(_, ctrl)| cfg.run(ctrl, &cfg.physical, false))
        .collect::<Result<_>>()?;
    for ((target, _), s) in jobs.iter().zip(&results) {
        let m = s.final_mean();
        let mut row = vec![target.theta.into()];
        row.extend(mean_cells(&m, &s.final_sem()));
        row.extend([fidelity(&m, target).into(), m.purity().into(), m.coherence().into()]);
        t.push(row);
    }
    t.summary.insert("g_fm_opt".into(), g_fm_opt);
    Ok(t)
}

fn snap_sin(theta: f64) -> f64 {
    let s = theta.sin();
    if s.abs() < 1e-12 {
        0.0
    } else {
        s
    }
}

/// Exponential fits of a transient.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TransientFits {
    pub z: Option<ExpFit>,
    pub coherence: Option<ExpFit>,
    /// max_t mean_y − final mean_y, and the final standard error.
    /// Shared envelope rate of every component that moves by more than 0.05.
    pub envelope: Option<DampedFit>,
    pub y_overshoot: f64,
    pub y_final_sem: f64,
}

pub fn fit_transient(stats: &EnsembleStats) -> TransientFits {
    let coh: Vec<f64> = (0..stats.len()).map(|i| stats.mean(i).coherence()).collect();
    let y_max = stats.mean_y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let fit = |s: &[f64], what: &str| match fit_exponential(&stats.times, s) {
        Ok(f) => Some(f),
        Err(e) => {
            log::warn!("{what} fit failed: {e}");
            None
        }
    };
    TransientFits {
        z: fit(&stats.mean_z, "mean_z"),
        coherence: if coh.iter().any(|c| *c > 0.05) {
            fit(&coh, "coherence")
        } else {
            None
        },
        envelope: {
            let moving: Vec<&[f64]> = [&stats.mean_x, &stats.mean_y, &stats.mean_z]
                .into_iter()
                .filter(|v| v.len() > 1 && (v[v.len() - 1] - v[0]).abs() > 0.05)
                .map(|v| v.as_slice())
                .collect();
            if moving.is_empty() {
                None
            } else {
                fit_damped_joint(&stats.times, &moving)
                    .map_err(|e| log::warn!("envelope fit failed: {e}"))
                    .ok()
            }
        },
        y_overshoot: y_max - stats.final_mean().y,
        y_final_sem: stats.final_sem().y,
    }
}

/// Bloch means against feedback duration, starting from the thermal state.
pub fn transient(cfg: &ExperimentConfig) -> Result<Table> {
    let mut t = simulate(cfg)?;
    // rebuild the stats view from the table to fit without a second run
    let stats = stats_from_table(&t)?;
    let fits = fit_transient(&stats);
    if let Some(f) = fits.z {
        t.summary.insert("z_rate".into(), f.rate);
        t.summary.insert("z_rate_over_gamma1".into(), f.rate / cfg.physical.gamma1);
        t.summary.insert("z_asymptote".into(), f.asymptote);
    } else {
        t.warnings.push("mean_z exponential fit failed".into());
    }
    if let Some(f) = fits.coherence {
        t.summary.insert("coherence_rate".into(), f.rate);
        t.summary.insert("coherence_rate_over_gamma1".into(), f.rate / cfg.physical.gamma1);
    }
    if let Some(f) = &fits.envelope {
        t.summary.insert("envelope_rate_over_gamma1".into(), f.rate / cfg.physical.gamma1);
        t.summary.insert("envelope_omega_over_gamma1".into(), f.omega / cfg.physical.gamma1);
    }
    t.summary.insert("y_overshoot".into(), fits.y_overshoot);
    t.summary.insert("y_final_sem".into(), fits.y_final_sem);
    Ok(t)
}

fn stats_from_table(t: &Table) -> Result<EnsembleStats> {
    let col = |n: &str| t.column(n).ok_or_else(|| invalid("table", "missing column"));
    Ok(EnsembleStats {
        times: col("t")?,
        mean_x: col("mean_x")?,
        mean_y: col("mean_y")?,
        mean_z: col("mean_z")?,
        sem_x: col("sem_x")?,
        sem_y: col("sem_y")?,
        sem_z: col("sem_z")?,
        n_trajectories: 0,
        clip_fraction: t.summary.get("clip_fraction").copied().unwrap_or(0.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GfmOptimum {
    pub g_fm: f64,
    /// √(x² + y²) of the final mean at the optimum.
    pub coherence: f64,
    pub evaluations: usize,
    /// Final bracket width relative to the optimum.
    pub bracket: f64,
    pub unimodal: bool,
    /// Every evaluated point, in evaluation order.
    pub table: Table,
}

/// Maximizes the final x² + y² over G_FM for the configured target with a
/// coarse scan followed by golden-section refinement. All candidates share
/// the master seed.
pub fn optimize_gfm(cfg: &ExperimentConfig) -> Result<GfmOptimum> {
    cfg.validate()?;
    let w = &cfg.sim.sweep;
    let law = feedback_law(&TargetState::new(FRAC_PI_2, cfg.target.phi)?, &cfg.physical)?.g_fm;
    let hi = w.gfm_max_ratio * law;
    let mut table = Table::new(&with_means(&[("g_fm", "s^-1/2"), ("g_fm_ratio", "1"), ("coherence_sq", "1")]));
    let eval = |g: f64| -> Result<(f64, f64, EnsembleStats)> {
        let section = ControllerSection {
            g_fm: Some(g),
            ..cfg.controller
        };
        let ctrl = section.resolve(&cfg.target, &cfg.physical)?;
        let s = cfg.run(&ctrl, &cfg.physical, false)?;
        let m = s.final_mean();
        // noise on x² + y² from the component errors
        let e = s.final_sem();
        let sigma = 2.0 * (m.x * m.x * e.x * e.x + m.y * m.y * e.y * e.y).sqrt();
        Ok((m.x * m.x + m.y * m.y, sigma, s))
    };
    let record = |table: &mut Table, g: f64, r: &(f64, f64, EnsembleStats)| {
        let mut row = vec![g.into(), (g / law).into(), r.0.into()];
        row.extend(mean_cells(&r.2.final_mean(), &r.2.final_sem()));
        table.push(row);
    };

    let scan = linspace(0.0, hi, w.gfm_scan_points, true);
    let scanned: Vec<(f64, f64, EnsembleStats)> = scan.par_iter().map(|&g| eval(g)).collect::<Result<_>>()?;
    for (&g, r) in scan.iter().zip(&scanned) {
        record(&mut table, g, r);
    }
    let vals: Vec<(f64, f64)> = scanned.iter().map(|r| (r.0, r.1)).collect();
    let best = (0..vals.len()).max_by(|&a, &b| vals[a].0.total_cmp(&vals[b].0)).expect("non-empty scan");
    let unimodal = is_unimodal(&vals, best);
    if !unimodal {
        let msg = "coherence profile over G_FM is not unimodal within noise".to_string();
        log::warn!("{msg}");
        table.warnings.push(msg);
    }

    let mut evaluations = scan.len();
    let mut a = scan[best.saturating_sub(1)];
    let mut b = scan[(best + 1).min(scan.len() - 1)];
    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = eval(c)?;
    record(&mut table, c, &fc);
    let mut fd = eval(d)?;
    record(&mut table, d, &fd);
    evaluations += 2;
    let (mut best_g, mut best_v) = (scan[best], vals[best].0);
    loop {
        for (g, v) in [(c, fc.0), (d, fd.0)] {
            if v > best_v {
                best_g = g;
                best_v = v;
            }
        }
        let centre = 0.5 * (a + b);
        if (b - a) <= w.gfm_tolerance * centre || evaluations >= w.gfm_max_evaluations {
            break;
        }
        if fc.0 > fd.0 {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = eval(c)?;
            record(&mut table, c, &fc);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = eval(d)?;
            record(&mut table, d, &fd);
        }
        evaluations += 1;
    }
    let bracket = (b - a) / best_g.max(f64::MIN_POSITIVE);
    if bracket > w.gfm_tolerance {
        let msg = format!("G_FM search stopped at relative bracket {bracket:.3}");
        log::warn!("{msg}");
        table.warnings.push(msg);
    }
    table.summary.insert("g_fm_opt".into(), best_g);
    table.summary.insert("g_fm_law".into(), law);
    table.summary.insert("coherence".into(), best_v.sqrt());
    table.summary.insert("evaluations".into(), evaluations as f64);
    table.summary.insert("bracket".into(), bracket);
    Ok(GfmOptimum {
        g_fm: best_g,
        coherence: best_v.sqrt(),
        evaluations,
        bracket,
        unimodal,
        table,
    })
}

/// Rises up to `peak` and falls after it, allowing two standard errors of
/// backsliding between neighbours.
fn is_unimodal(vals: &[(f64, f64)], peak: usize) -> bool {
    let ok = |lo: &(f64, f64), hi: &(f64, f64)| hi.0 + 2.0 * lo.1.hypot(hi.1) >= lo.0;
    vals[..=peak].windows(2).all(|w| ok(&w[0], &w[1])) && vals[peak..].windows(2).all(|w| ok(&w[1], &w[0]))
}

/// One configuration of the oracle comparison matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCase {
    pub name: String,
    pub params: PhysicalParams,
    pub controller: ControllerConfig,
}

/// Ten Markovian-limit configurations around `params` and the ideal device.
pub fn oracle_matrix(params: &PhysicalParams) -> Result<Vec<OracleCase>> {
    let ideal = PhysicalParams::ideal();
    let law = |t: f64, p: f64, pp: &PhysicalParams| feedback_law(&TargetState::new(t, p)?, pp);
    let case = |name: &str, params: PhysicalParams, controller: ControllerConfig| OracleCase {
        name: name.into(),
        params,
        controller,
    };
    let mut strong = law(0.0, 0.0, params)?;
    strong.g_r *= 3.0;
    let mut detuned = law(2.0 * PI / 3.0, PI, params)?;
    detuned.g_fm *= 1.5;
    detuned.alpha = 1.2;
    Ok(vec![
        case("controls_off", *params, ControllerConfig::off()),
        case("ideal_excited", ideal, law(0.0, 0.0, &ideal)?),
        case("ideal_equator_y", ideal, law(FRAC_PI_2, FRAC_PI_2, &ideal)?),
        case("ideal_quarter_x", ideal, law(PI / 4.0, 0.0, &ideal)?),
        case("excited", *params, law(0.0, 0.0, params)?),
        case("equator_y", *params, law(FRAC_PI_2, FRAC_PI_2, params)?),
        case("quarter_y", *params, law(PI / 4.0, FRAC_PI_2, params)?),
        case("lower_x", *params, law(3.0 * PI / 4.0, 0.0, params)?),
        case("excited_strong_rabi", *params, strong),
        case("off_law_mixed", *params, detuned),
    ])
}

/// Compares ensemble means at the configured duration with the oracle
/// solution at the same time, for the ten-configuration matrix.
pub fn oracle_compare(cfg: &ExperimentConfig) -> Result<Table> {
    cfg.validate()?;
    let settings = SimSettings {
        markovian_limit: true,
        ..cfg.sim.settings()
    };
    let cases = oracle_matrix(&cfg.physical)?;
    let rows: Vec<Vec<Cell>> = cases
        .par_iter()
        .map(|c| -> Result<Vec<Cell>> {
            let g = extract_generator(&c.controller, &c.params, &settings, &ProbeMethod::default())?;
            let r_star = steady_state(&g)?;
            let init = cfg.sim.init.unwrap_or_else(|| c.params.initial_state());
            let r_t = g.propagate(&init, cfg.sim.duration);
            let spec = EnsembleSpec::new(cfg.sim.n_trajectories, cfg.sim.duration, cfg.sim.seed, init);
            let s = run_ensemble(&c.controller, &c.params, &settings, &spec)?;
            let (m, e) = (s.final_mean(), s.final_sem());
            // bias floor of the one-step fit, carried to the state
            let floor = g.residual_uncertainty.max(g.fit_residual) / g.slowest_rate().max(f64::MIN_POSITIVE);
            let sig = |se: f64| se.hypot(floor);
            let z = |a: f64, b: f64, se: f64| (a - b).abs() / sig(se);
            let worst = z(m.x, r_t.x, e.x).max(z(m.y, r_t.y, e.y)).max(z(m.z, r_t.z, e.z));
            Ok(vec![
                c.name.as_str().into(),
                r_star.x.into(),
                r_star.y.into(),
                r_star.z.into(),
                r_t.x.into(),
                r_t.y.into(),
                r_t.z.into(),
                m.x.into(),
                m.y.into(),
                m.z.into(),
                sig(e.x).into(),
                sig(e.y).into(),
                sig(e.z).into(),
                worst.into(),
                g.fit_residual.into(),
                g.residual_uncertainty.into(),
                (worst <= 3.0 && g.is_affine()).into(),
            ])
        })
        .collect::<Result<_>>()?;
    let mut t = Table::new(&[
        ("config", "-"),
        ("steady_x", "1"),
        ("steady_y", "1"),
        ("steady_z", "1"),
        ("oracle_x", "1"),
        ("oracle_y", "1"),
        ("oracle_z", "1"),
        ("mc_x", "1"),
        ("mc_y", "1"),
        ("mc_z", "1"),
        ("sigma_x", "1"),
        ("sigma_y", "1"),
        ("sigma_z", "1"),
        ("max_deviation", "sigma"),
        ("fit_residual", "s^-1"),
        ("residual_uncertainty", "s^-1"),
        ("pass", "-"),
    ]);
    for r in rows {
        if r[16] == Cell::Bool(false) {
            let msg = format!("oracle mismatch in {:?}", r[0]);
            log::warn!("{msg}");
            t.warnings.push(msg);
        }
        t.push(r);
    }
    Ok(t)
}
