//! Module-level worked examples at moderate ensemble sizes. The full-size
//! versions live in the acceptance suite.

use std::f64::consts::FRAC_PI_2;

use qfb_core::controller::feedback_law;
use qfb_core::ensemble::{fit_exponential, run_ensemble, EnsembleSpec};
use qfb_core::model::{BlochVector, PhysicalParams, TargetState};
use qfb_core::oracle::{extract_generator, steady_state, ProbeMethod};
use qfb_core::sme::SimSettings;

fn equator() -> TargetState {
    TargetState::new(FRAC_PI_2, FRAC_PI_2).unwrap()
}

#[test]
fn excited_law_steady_value() {
    let p = PhysicalParams::device();
    let cfg = feedback_law(&TargetState::excited(), &p).unwrap();
    let spec = EnsembleSpec::new(1000, 30e-6, 5, p.initial_state());
    let s = run_ensemble(&cfg, &p, &SimSettings::default(), &spec).unwrap();
    let m = s.final_mean();
    assert!((m.z - 0.17).abs() < 0.05, "{m:?}");
    assert!(m.x.abs() < 4.0 * s.final_sem().x && m.y.abs() < 4.0 * s.final_sem().y);
}

#[test]
fn transient_rates() {
    let p = PhysicalParams::device();
    let run = |t: &TargetState| {
        let cfg = feedback_law(t, &p).unwrap();
        let spec = EnsembleSpec::new(1000, 30e-6, 6, p.initial_state()).sampled_every(0.1e-6);
        run_ensemble(&cfg, &p, &SimSettings::default(), &spec).unwrap()
    };
    let e = run(&TargetState::excited());
    let rate = fit_exponential(&e.times, &e.mean_z).unwrap().rate / p.gamma1;
    assert!((rate - 4.0).abs() < 1.2, "{rate}");
    let q = run(&equator());
    let rate = fit_exponential(&q.times, &q.mean_z).unwrap().rate / p.gamma1;
    assert!((rate - 1.5).abs() < 0.45, "{rate}");
}

#[test]
fn oracle_matches_markovian_ensemble_for_excited_law() {
    let p = PhysicalParams::device();
    let cfg = feedback_law(&TargetState::excited(), &p).unwrap();
    let settings = SimSettings::markovian(2e-9);
    let g = extract_generator(&cfg, &p, &settings, &ProbeMethod::default()).unwrap();
    let r = steady_state(&g).unwrap();
    let spec = EnsembleSpec::new(1000, 30e-6, 7, p.initial_state());
    let s = run_ensemble(&cfg, &p, &settings, &spec).unwrap();
    assert!((r.z - s.final_mean().z).abs() < 0.05, "{r:?} vs {:?}", s.final_mean());
}

#[test]
fn ideal_equator_steady_state_is_plus_y() {
    let p = PhysicalParams::ideal();
    let cfg = feedback_law(&equator(), &p).unwrap();
    let g = extract_generator(&cfg, &p, &SimSettings::markovian(1e-9), &ProbeMethod::default()).unwrap();
    let r = steady_state(&g).unwrap();
    assert!((r - BlochVector::new(0.0, 1.0, 0.0)).norm() < 1e-2, "{r:?}");
}

#[test]
fn controls_off_steady_state_is_ground() {
    let p = PhysicalParams::device();
    let g = extract_generator(
        &qfb_core::controller::ControllerConfig::off(),
        &p,
        &SimSettings::markovian(2e-9),
        &ProbeMethod::MonteCarlo { draws: 4000, seed: 1 },
    )
    .unwrap();
    let r = steady_state(&g).unwrap();
    assert!((r - BlochVector::ground()).norm() < 1e-2, "{r:?}");
}
