use std::f64::consts::PI;

use mp3c::config::ScenarioConfig;
use mp3c::exec::Execution;
use mp3c::harness::{extract_phasor, measure_impedance, run_scenario, Scenario, TraceOptions};
use mp3c::smallsignal::Frame;
use num_complex::Complex64;
use proptest::prelude::*;

fn configured(text: &str) -> (ScenarioConfig, Scenario) {
    let cfg = ScenarioConfig::from_toml_str(text).unwrap();
    let sc = cfg.scenario().unwrap();
    (cfg, sc)
}

const MP3C: &str = "[opp]\nm_grid = [0.95]\n[sweep]\nfrequencies = [310.0, 1130.0, 2470.0]\n";

#[test]
fn sequential_and_parallel_sweeps_are_identical() {
    let (cfg, sc) = configured(MP3C);
    let mut sweep = cfg.sweep_config().unwrap();
    sweep.exec = Execution::Sequential;
    let a = measure_impedance(&sweep, &sc).unwrap();
    sweep.exec = Execution::Parallel;
    let b = measure_impedance(&sweep, &sc).unwrap();
    assert_eq!(a.samples(), b.samples());
    assert_eq!(a.to_csv(), measure_impedance(&sweep, &sc).unwrap().to_csv());
}

#[test]
fn measured_impedance_is_nearly_amplitude_independent() {
    // Transitions cannot be advanced before the commit instant, so larger
    // probes lose a little low-frequency damping to that one-sided clamp.
    let (cfg, sc) = configured(MP3C);
    let large = cfg.sweep_config().unwrap();
    let mut small = large.clone();
    small.perturb_amp *= 0.5;
    let a = measure_impedance(&small, &sc).unwrap();
    let b = measure_impedance(&large, &sc).unwrap();
    for ((f, za), (_, zb)) in a.samples().iter().zip(b.samples()) {
        assert!((za - zb).norm() < 0.04 * za.norm(), "{f} Hz: {za} vs {zb}");
    }
}

#[test]
fn controlled_converter_is_resistive_at_low_frequency() {
    let (cfg, sc) = configured(MP3C);
    let curve = measure_impedance(&cfg.sweep_config().unwrap(), &sc).unwrap();
    let (f, z) = curve.samples()[0];
    assert_eq!(f, 310.0);
    // passive plant alone is 3.1 ohm
    assert!(z.re > 100.0, "{z}");
}

#[test]
fn dq_sweep_of_the_passive_plant_sees_the_shifted_frequency() {
    let (cfg, sc) = configured("[controller]\nmode = \"off\"\n[sweep]\nframe = \"dq\"\nfrequencies = [160.0]\nsettle_periods = 2\n");
    let sweep = cfg.sweep_config().unwrap();
    assert_eq!(sweep.frame, Frame::Dq);
    let z = measure_impedance(&sweep, &sc).unwrap().samples()[0].1;
    let want = Complex64::new(3.1, 2.0 * PI * 210.0 * 0.178);
    assert!((z - want).norm() < 0.02 * want.norm(), "{z}");
}

#[test]
fn unperturbed_runs_are_deterministic() {
    let (_, sc) = configured("[converter]\nm = 0.9\n[opp]\nm_grid = [0.9]\n");
    let opts = TraceOptions {
        sample_period: 2e-6,
        record_from: 0.0,
    };
    let a = run_scenario(&sc, 0.04, opts).unwrap();
    let b = run_scenario(&sc, 0.04, opts).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.events.len(), b.events.len());
}

proptest! {
    #[test]
    fn phasor_extraction_recovers_a_tone(amp in 0.1f64..100.0, phase in -PI..PI, k in 1u32..40) {
        let f = 50.0 * k as f64;
        let dt: f64 = 1e-5;
        let n = (0.02 / dt).round() as usize;
        let x: Vec<f64> = (0..n).map(|i| amp * (2.0 * PI * f * i as f64 * dt + phase).cos()).collect();
        let z = extract_phasor(&x, 0.0, dt, f).unwrap();
        prop_assert!((z - Complex64::from_polar(amp, phase)).norm() < 1e-9 * amp);
    }
}
