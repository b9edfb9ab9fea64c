//! Pass/fail checks behind `--check`, one set per subcommand.

use std::f64::consts::{FRAC_PI_2, PI};

use qfb_core::controller::FmMode;
use qfb_core::experiments::{ExperimentConfig, Table};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn col(t: &Table, name: &str) -> Vec<f64> {
    t.column(name).unwrap_or_default()
}

fn argmax(v: &[f64]) -> Option<usize> {
    (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b]))
}

pub fn sweep_gain(cfg: &ExperimentConfig, t: &Table) -> Vec<Check> {
    let (eta, ratio, z, sz) = (col(t, "eta"), col(t, "gain_ratio"), col(t, "mean_z"), col(t, "sem_z"));
    let branch = |e: f64| -> Vec<usize> { (0..eta.len()).filter(|&i| eta[i] == e).collect() };
    let mut out = Vec::new();
    let main = branch(cfg.physical.eta);
    if let Some(k) = argmax(&main.iter().map(|&i| z[i]).collect::<Vec<_>>()) {
        let i = main[k];
        out.push(check(
            "max_mean_z",
            (z[i] - 0.17).abs() <= 0.05 && (ratio[i] - 1.0).abs() <= 0.2,
            format!("max mean_z {:.4} at gain ratio {:.3}", z[i], ratio[i]),
        ));
    }
    if let Some(low) = cfg.sim.sweep.low_eta {
        let idx = branch(low);
        let monotone = idx.windows(2).all(|w| z[w[1]] + 2.0 * sz[w[0]].hypot(sz[w[1]]) >= z[w[0]]);
        let top = idx.iter().map(|&i| z[i]).fold(f64::NEG_INFINITY, f64::max);
        let never_positive = idx.iter().all(|&i| z[i] <= 2.0 * sz[i]);
        out.push(check(
            "low_eta_monotone_saturating",
            monotone && top <= 0.02 && never_positive,
            format!("monotone {monotone}, max {top:.4}"),
        ));
    }
    out
}

pub fn sweep_alpha(_cfg: &ExperimentConfig, t: &Table) -> Vec<Check> {
    let (ratio, alpha, z) = (col(t, "gain_ratio"), col(t, "alpha"), col(t, "mean_z"));
    let mut out = Vec::new();
    let high: Vec<usize> = (0..ratio.len()).filter(|&i| (ratio[i] - 11.4).abs() < 1e-9).collect();
    if !high.is_empty() {
        let worst = high.iter().map(|&i| z[i].abs()).fold(0.0, f64::max);
        out.push(check("high_gain_randomizes", worst <= 0.05, format!("max |mean_z| {worst:.4}")));
    }
    let unit: Vec<usize> = (0..ratio.len()).filter(|&i| (ratio[i] - 1.0).abs() < 1e-9).collect();
    if let Some(k) = argmax(&unit.iter().map(|&i| z[i]).collect::<Vec<_>>()) {
        let a = alpha[unit[k]];
        out.push(check(
            "optimal_alpha",
            (a - FRAC_PI_2).abs() <= 0.2,
            format!("mean_z maximal at alpha {a:.3}"),
        ));
    }
    let (x, y, sx, sy) = (col(t, "mean_x"), col(t, "mean_y"), col(t, "sem_x"), col(t, "sem_y"));
    let worst = (0..x.len())
        .map(|i| (x[i].abs() / sx[i].max(1e-12)).max(y[i].abs() / sy[i].max(1e-12)))
        .fold(0.0, f64::max);
    out.push(check("no_coherence", worst <= 3.0, format!("worst |x|,|y| {worst:.2} sem")));
    out
}

pub fn sweep_beta(cfg: &ExperimentConfig, t: &Table) -> Vec<Check> {
    let s = |k: &str| t.summary.get(k).copied().unwrap_or(f64::NAN);
    let mut out = vec![check(
        "quadrature",
        s("quadrature_correlation") > 0.9,
        format!("correlation {:.3}", s("quadrature_correlation")),
    )];
    let deg = s("beta_opt_deg");
    match cfg.controller.fm_mode.unwrap_or(FmMode::Linear) {
        FmMode::Exact => out.push(check(
            "beta_shift",
            (-15.0..=-5.0).contains(&deg),
            format!("optimal beta {deg:.2} deg"),
        )),
        _ => {
            out.push(check("beta_centred", deg.abs() <= 5.0, format!("optimal beta {deg:.2} deg")));
            out.push(check(
                "equator_state",
                s("x_at_opt").abs() <= 0.05 && (0.22..=0.45).contains(&s("y_at_opt")),
                format!("x {:.4}, y {:.4} at optimum", s("x_at_opt"), s("y_at_opt")),
            ));
        }
    }
    out
}

pub fn sweep_theta(_cfg: &ExperimentConfig, t: &Table) -> Vec<Check> {
    let (theta, coh, pur) = (col(t, "theta"), col(t, "coherence"), col(t, "purity"));
    let top = coh.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lower: Vec<f64> = (0..theta.len())
        .filter(|&i| theta[i] >= FRAC_PI_2 - 1e-12)
        .map(|i| pur[i])
        .collect();
    let monotone = lower.windows(2).all(|w| w[1] >= w[0]);
    let mut out = vec![
        check("max_coherence", (0.30..=0.60).contains(&top), format!("max coherence {top:.4}")),
        check("purity_monotone", monotone, format!("purity for theta >= pi/2: {lower:.3?}")),
    ];
    if let Some(i) = theta.iter().position(|&th| (th - PI).abs() < 1e-12) {
        let r = t.rows[i].clone();
        let get = |n: &str| r[t.column_index(n).unwrap()].as_f64().unwrap_or(f64::NAN);
        let ok = [("mean_x", "sem_x", 0.0), ("mean_y", "sem_y", 0.0), ("mean_z", "sem_z", -1.0)]
            .iter()
            .all(|(m, e, want)| (get(m) - want).abs() <= 3.0 * get(e) + 1e-12);
        out.push(check("ground_target", ok, "theta = pi row at the ground state".into()));
    }
    out
}

pub fn transient(cfg: &ExperimentConfig, t: &Table) -> Vec<Check> {
    let s = |k: &str| t.summary.get(k).copied();
    let rate = s("z_rate_over_gamma1");
    let mut out = Vec::new();
    let theta = cfg.target.theta;
    if theta == 0.0 {
        out.push(check(
            "excited_rate",
            rate.is_some_and(|r| (r - 4.0).abs() <= 1.2),
            format!("z rate {rate:?} gamma1"),
        ));
    } else if (theta - FRAC_PI_2).abs() < 1e-12 {
        out.push(check(
            "equator_rate",
            rate.is_some_and(|r| (r - 1.5).abs() <= 0.45),
            format!("z rate {rate:?} gamma1"),
        ));
        let (ov, se) = (s("y_overshoot").unwrap_or(0.0), s("y_final_sem").unwrap_or(0.0));
        out.push(check("y_bump", ov > 2.0 * se, format!("overshoot {ov:.4}, sem {se:.4}")));
    }
    if theta < PI {
        let env = s("envelope_rate_over_gamma1");
        out.push(check(
            "at_least_t1",
            env.is_some_and(|r| r >= 0.9),
            format!("envelope rate {env:?} gamma1"),
        ));
    }
    out
}

pub fn optimize_gfm(cfg: &ExperimentConfig, t: &Table) -> Vec<Check> {
    let s = |k: &str| t.summary.get(k).copied().unwrap_or(f64::NAN);
    let w = &cfg.sim.sweep;
    let g = col(t, "g_fm");
    let c = col(t, "coherence_sq");
    let baseline = g.iter().position(|&v| v == 0.0).map(|i| c[i]);
    vec![
        check(
            "converged",
            s("bracket") <= w.gfm_tolerance && s("evaluations") <= w.gfm_max_evaluations as f64,
            format!("bracket {:.4} after {} evaluations", s("bracket"), s("evaluations")),
        ),
        check("unimodal", t.warnings.iter().all(|m| !m.contains("unimodal")), "scan profile".into()),
        check(
            "baseline_below_optimum",
            baseline.is_some_and(|b| b.sqrt() < s("coherence")),
            format!("G_FM=0 coherence {:?} vs {:.4}", baseline.map(f64::sqrt), s("coherence")),
        ),
    ]
}

pub fn oracle_compare(_cfg: &ExperimentConfig, t: &Table) -> Vec<Check> {
    let i = t.column_index("pass").expect("pass column");
    let j = t.column_index("max_deviation").expect("deviation column");
    t.rows
        .iter()
        .map(|r| {
            let name = match &r[0] {
                qfb_core::experiments::Cell::Text(s) => s.clone(),
                _ => String::new(),
            };
            check(
                &name,
                r[i] == qfb_core::experiments::Cell::Bool(true),
                format!("max deviation {:.2} sigma", r[j].as_f64().unwrap_or(f64::NAN)),
            )
        })
        .collect()
}

pub fn simulate(_cfg: &ExperimentConfig, t: &Table) -> Vec<Check> {
    let clip = t.summary.get("clip_fraction").copied().unwrap_or(0.0);
    vec![check(
        "clip_fraction",
        clip <= qfb_core::sme::CLIP_WARNING_FRACTION,
        format!("clip fraction {clip:.2e}"),
    )]
}
