//! Closed-loop scenarios and impedance sweeps.
//!
//! A scenario advances the circuit exactly between the merged set of
//! switching instants, controller samples and output samples. A sweep runs
//! one scenario per probe frequency with a small positive-sequence tone added
//! to the PCC voltage and reads `Z = −V/I` from single-bin Fourier
//! projections over an integer number of periods.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::frames::{from_dq, AlphaBeta, Dq, ThreePhase};
use crate::mp3c::{ControlMode, Controller, ControllerConfig, GateEvent, LinearCorrection};
use crate::numfmt::sig9;
use crate::opp::PatternTable;
use crate::plant::{
    advance_with, ExtraDrive, GridConfig, Perturbation, PlantParams, PlantState, Tone,
};
use crate::smallsignal::{Frame, ImpedanceCurve, Source};
use crate::trajectory::{
    ff_voltage_refs, line_voltages, nominal_current_trajectory, references_for, LineTopology,
    NominalTrajectory, OperatingPoint,
};

#[derive(Debug, Clone, PartialEq)]
pub enum PatternSource {
    Table(PatternTable),
    /// Ideal sinusoidal converter voltages at the reference phasors.
    Fundamental,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub params: PlantParams,
    pub grid: GridConfig,
    pub controller: ControllerConfig,
    pub op: OperatingPoint,
    pub topology: LineTopology,
    pub source: PatternSource,
    /// Added to the sum current at t = 0.
    pub initial_offset: AlphaBeta,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceOptions {
    pub sample_period: f64,
    pub record_from: f64,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            sample_period: 1e-6,
            record_from: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub sample_period: f64,
    pub t0: f64,
    pub i_sum: Vec<AlphaBeta>,
    pub i_diff: Vec<AlphaBeta>,
    pub v_pcc: Vec<AlphaBeta>,
    pub u: Vec<[ThreePhase; 2]>,
    /// Every transition applied, in time order.
    pub events: Vec<GateEvent>,
    /// Unfiltered sum-current error at each controller sample.
    pub errors: Vec<(f64, AlphaBeta)>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.i_sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.i_sum.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.sample_period
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "t_s,i_sum_alpha,i_sum_beta,i_diff_alpha,i_diff_beta,v_pcc_alpha,v_pcc_beta\n",
        );
        for k in 0..self.len() {
            let (a, b, c) = (self.i_sum[k].0, self.i_diff[k].0, self.v_pcc[k].0);
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                sig9(self.time(k)),
                sig9(a.re),
                sig9(a.im),
                sig9(b.re),
                sig9(b.im),
                sig9(c.re),
                sig9(c.im)
            );
        }
        s
    }
}

struct Prepared {
    trajectory: NominalTrajectory,
    u0: [ThreePhase; 2],
    extra: ExtraDrive,
}

fn prepare(sc: &Scenario) -> Result<Prepared> {
    let linear = sc.controller.mode == ControlMode::Linear;
    match (&sc.source, linear) {
        (PatternSource::Table(table), false) => {
            if table.p != sc.controller.p {
                return Err(Error::Config(format!(
                    "pattern pulse number {} differs from controller p = {}",
                    table.p, sc.controller.p
                )));
            }
            let refs = references_for(&sc.op, table, &sc.params, &sc.grid, sc.topology)?;
            let trajectory = nominal_current_trajectory(&refs, &sc.params, &sc.grid)?;
            let u0 = trajectory
                .timeline()
                .map(|t| t.u_start())
                .unwrap_or([ThreePhase::ZERO; 2]);
            Ok(Prepared {
                trajectory,
                u0,
                extra: ExtraDrive::default(),
            })
        }
        (PatternSource::Fundamental, false) if sc.controller.mode == ControlMode::Mp3c => Err(
            Error::Config("pattern control needs a pattern table".into()),
        ),
        _ => {
            let (v_sum, v_diff) = ff_voltage_refs(
                sc.op.i_sum_ref,
                sc.op.i_diff_ref,
                Dq::new(sc.grid.v_pcc_peak, 0.0),
                &sc.params,
                sc.grid.omega1(),
            );
            let w = sc.grid.omega1();
            let extra = ExtraDrive {
                sum_tones: vec![Tone {
                    value: from_dq(v_sum, sc.grid.phi_ini).0 * 0.5,
                    omega: w,
                }],
                diff_tones: vec![Tone {
                    value: from_dq(v_diff, sc.grid.phi_ini).0,
                    omega: w,
                }],
            };
            let trajectory =
                NominalTrajectory::fundamental(sc.op.i_sum_ref, sc.op.i_diff_ref, &sc.grid);
            Ok(Prepared {
                trajectory,
                u0: [ThreePhase::ZERO; 2],
                extra,
            })
        }
    }
}

/// Runs one scenario over `[0, duration)`.
pub fn run_scenario(sc: &Scenario, duration: f64, opts: TraceOptions) -> Result<Trace> {
    sc.controller.validate()?;
    if !(duration > 0.0) || !(opts.sample_period > 0.0) {
        return Err(Error::InvalidParameter(
            "duration and sample period must be positive".into(),
        ));
    }
    let prep = prepare(sc)?;
    let mut controller =
        Controller::new(sc.controller, sc.params, sc.grid, sc.topology, sc.op.vdc)?;
    let td = sc.controller.td;
    let dt = opts.sample_period;

    let (i_sum, i_diff) = prep.trajectory.at(0.0);
    let passive = sc
        .grid
        .perturbation_tone()
        .map_or(Complex64::new(0.0, 0.0), |tone| {
            -tone.value * sc.params.sum_branch().admittance(tone.omega)
        });
    let mut state = PlantState {
        t: 0.0,
        i_sum: i_sum + AlphaBeta(passive) + sc.initial_offset,
        i_diff,
    };
    let mut u = prep.u0;
    let mut correction = LinearCorrection {
        v_sum_half: AlphaBeta::ZERO,
        v_diff: AlphaBeta::ZERO,
    };
    let mut pending: Option<(u64, LinearCorrection)> = None;

    let n0 = (opts.record_from / dt).round() as u64;
    let n_end = (duration / dt).round() as u64;
    let mut trace = Trace {
        sample_period: dt,
        t0: n0 as f64 * dt,
        ..Default::default()
    };
    let capacity = n_end.saturating_sub(n0) as usize;
    trace.i_sum.reserve(capacity);
    trace.i_diff.reserve(capacity);
    trace.v_pcc.reserve(capacity);
    trace.u.reserve(capacity);

    // Transitions before the first commit window run at their nominal times.
    let mut queue: BTreeMap<(u64, i64), GateEvent> = BTreeMap::new();
    if let Some(timeline) = prep.trajectory.timeline() {
        for e in timeline.events_between(0.0, td.min(duration)) {
            let g = GateEvent {
                id: e.id,
                nominal: e.t,
                t: e.t,
                converter: e.converter,
                phase: e.phase,
                delta_u: e.delta_u,
            };
            queue.insert((g.t.to_bits(), g.id), g);
        }
    }
    let mut k: u64 = 0;
    let mut n = n0;
    loop {
        let t_td = k as f64 * td;
        let t_sample = if n < n_end {
            n as f64 * dt
        } else {
            f64::INFINITY
        };
        let t_event = queue.values().next().map_or(f64::INFINITY, |e| e.t);
        let t_next = t_td.min(t_sample).min(t_event);
        if t_next >= duration {
            break;
        }
        if t_next > state.t {
            let (vs, vd) = line_voltages(&u, sc.op.vdc, sc.topology);
            let vs = vs + correction.v_sum_half * 2.0;
            let vd = vd + correction.v_diff;
            state = advance_with(
                &state,
                vs,
                vd,
                &prep.extra,
                &sc.params,
                &sc.grid,
                t_next - state.t,
            )?;
        }
        while let Some(entry) = queue.first_entry() {
            if entry.get().t != t_next {
                break;
            }
            let e = entry.remove();
            let level = u[e.converter.index()].get_mut(e.phase);
            *level += e.delta_u;
            if level.abs() > 1.0 + 1e-9 {
                return Err(Error::InvalidSwitchPosition(*level));
            }
            trace.events.push(e);
        }
        if t_td == t_next {
            if let Some((at, c)) = pending {
                if at == k {
                    correction = c;
                    pending = None;
                }
            }
            let schedule = controller.step(t_td, &state, sc.grid.v_pcc(t_td), &prep.trajectory);
            trace.errors.push((t_td, schedule.error_sum));
            for e in schedule.events {
                queue.insert((e.t.to_bits(), e.id), e);
            }
            if let Some(c) = schedule.correction {
                pending = Some((k + 1, c));
            }
            k += 1;
        }
        if t_sample == t_next {
            trace.i_sum.push(state.i_sum);
            trace.i_diff.push(state.i_diff);
            trace.v_pcc.push(sc.grid.v_pcc(t_sample));
            trace.u.push(u);
            n += 1;
        }
        if !(state.i_sum.is_finite() && state.i_diff.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "state diverged at t = {}",
                state.t
            )));
        }
    }
    Ok(trace)
}

fn check_window(n: usize, dt: f64, f: f64) -> Result<()> {
    let window = n as f64 * dt;
    let cycles = window * f;
    if n == 0 || (cycles - cycles.round()).abs() > 1e-6 {
        return Err(Error::NonIntegerWindow { window, freq_hz: f });
    }
    Ok(())
}

/// Single-bin projection `(2/N) Σ x_k e^{−j2πf t_k}` of a real channel.
pub fn extract_phasor(x: &[f64], t0: f64, dt: f64, f: f64) -> Result<Complex64> {
    check_window(x.len(), dt, f)?;
    let w = 2.0 * PI * f;
    let acc: Complex64 = x
        .iter()
        .enumerate()
        .map(|(k, &v)| v * Complex64::from_polar(1.0, -w * (t0 + k as f64 * dt)))
        .sum();
    Ok(acc * (2.0 / x.len() as f64))
}

/// Single-bin projection `(1/N) Σ z_k e^{−j2πf t_k}` of a complex (αβ)
/// channel; picks out the rotating component at `+f`.
pub fn extract_phasor_complex(z: &[AlphaBeta], t0: f64, dt: f64, f: f64) -> Result<Complex64> {
    check_window(z.len(), dt, f)?;
    let w = 2.0 * PI * f;
    let acc: Complex64 = z
        .iter()
        .enumerate()
        .map(|(k, v)| v.0 * Complex64::from_polar(1.0, -w * (t0 + k as f64 * dt)))
        .sum();
    Ok(acc / z.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub frequencies: Vec<f64>,
    pub perturb_amp: f64,
    pub settle_periods: u32,
    pub window_periods: u32,
    pub frame: Frame,
    pub sample_period: f64,
    pub exec: Execution,
}

impl SweepConfig {
    /// Defaults: 1 % of the PCC peak, 10 settling periods, a 5-period window.
    pub fn new(frequencies: Vec<f64>, grid: &GridConfig) -> Self {
        Self {
            frequencies,
            perturb_amp: 0.01 * grid.v_pcc_peak,
            settle_periods: 10,
            window_periods: 5,
            frame: Frame::AlphaBeta,
            sample_period: 1e-6,
            exec: Execution::default(),
        }
    }

    /// Frequency of the injected αβ tone for a sweep point.
    pub fn injection(&self, f: f64, f1: f64) -> f64 {
        match self.frame {
            Frame::AlphaBeta => f,
            Frame::Dq => f + f1,
        }
    }

    pub fn validate(&self, f1: f64) -> Result<()> {
        if !(self.perturb_amp > 0.0) {
            return Err(Error::Config(format!(
                "sweep.perturb_amp must be positive, got {}",
                self.perturb_amp
            )));
        }
        if self.window_periods == 0 {
            return Err(Error::Config(
                "sweep.window_periods must be at least 1".into(),
            ));
        }
        let window = self.window_periods as f64 / f1;
        let mut seen: Vec<f64> = Vec::with_capacity(self.frequencies.len());
        for &f in &self.frequencies {
            if !(f > 0.0) {
                return Err(Error::Config(format!(
                    "sweep frequency {f} must be positive"
                )));
            }
            if seen.iter().any(|&g| g == f) {
                return Err(Error::Config(format!("sweep frequency {f} listed twice")));
            }
            seen.push(f);
            let cycles = window * self.injection(f, f1);
            if (cycles - cycles.round()).abs() > 1e-6 {
                return Err(Error::NonIntegerWindow { window, freq_hz: f });
            }
        }
        Ok(())
    }
}

/// `n` log-spaced points on a 10 Hz grid in `[lo, hi]`, avoiding multiples
/// of 50 Hz where the pattern harmonics sit. Fewer only if the grid is
/// smaller than `n`.
pub fn default_frequencies(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let grid: Vec<f64> = ((lo / 10.0).ceil() as i64..=(hi / 10.0).floor() as i64)
        .filter(|k| k % 5 != 0)
        .map(|k| k as f64 * 10.0)
        .collect();
    if n == 0 || grid.len() <= n {
        return if n == 0 { Vec::new() } else { grid };
    }
    let (first, last) = (grid[0], grid[grid.len() - 1]);
    let nearest = |f: f64| grid.partition_point(|&g| g < f).min(grid.len() - 1);
    let mut idx: Vec<usize> = (0..n)
        .map(|i| {
            let f = if n == 1 {
                first
            } else {
                first * (last / first).powf(i as f64 / (n - 1) as f64)
            };
            let j = nearest(f);
            if j > 0 && f - grid[j - 1] < grid[j] - f {
                j - 1
            } else {
                j
            }
        })
        .collect();
    // keep indices strictly increasing and inside the grid
    for i in 1..n {
        idx[i] = idx[i].max(idx[i - 1] + 1);
    }
    for i in (0..n).rev() {
        idx[i] = idx[i].min(grid.len() - (n - i));
        if i + 1 < n {
            idx[i] = idx[i].min(idx[i + 1] - 1);
        }
    }
    idx.into_iter().map(|j| grid[j]).collect()
}

/// Impedance at one probe frequency.
pub fn measure_point(sweep: &SweepConfig, sc: &Scenario, f: f64) -> Result<Complex64> {
    let f1 = sc.grid.f1;
    let f_inj = sweep.injection(f, f1);
    let grid = sc.grid.with_perturbation(Perturbation {
        freq_hz: f_inj,
        amplitude: sweep.perturb_amp,
    })?;
    let scenario = Scenario { grid, ..sc.clone() };
    let settle = sweep.settle_periods as f64 / f1;
    let window = sweep.window_periods as f64 / f1;
    let opts = TraceOptions {
        sample_period: sweep.sample_period,
        record_from: settle,
    };
    let trace = run_scenario(&scenario, settle + window, opts)?;
    let v = extract_phasor_complex(&trace.v_pcc, trace.t0, trace.sample_period, f_inj)?;
    let i = extract_phasor_complex(&trace.i_sum, trace.t0, trace.sample_period, f_inj)?;
    if i.norm() < 1e-9 {
        return Err(Error::Unmeasurable {
            freq_hz: f,
            magnitude: i.norm(),
        });
    }
    Ok(-v / i)
}

/// Sweeps every frequency independently; results are in frequency order
/// whatever the execution mode.
pub fn measure_impedance(sweep: &SweepConfig, sc: &Scenario) -> Result<ImpedanceCurve> {
    sweep.validate(sc.grid.f1)?;
    let mut freqs = sweep.frequencies.clone();
    freqs.sort_by(f64::total_cmp);
    let values = exec::map(&freqs, sweep.exec, |&f| measure_point(sweep, sc, f));
    let samples = freqs
        .iter()
        .zip(values)
        .map(|(&f, z)| z.map(|z| (f, z)))
        .collect::<Result<Vec<_>>>()?;
    ImpedanceCurve::new(samples, sweep.frame, Source::Measured)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointDeviation {
    pub freq_hz: f64,
    pub d_re: f64,
    pub d_im: f64,
    /// `|Z_measured − Z_model| / |Z_model|`.
    pub rel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub points: Vec<PointDeviation>,
    pub norm: f64,
    pub median_abs_re: f64,
    pub max_abs_re: f64,
    pub median_abs_im: f64,
    pub max_abs_im: f64,
    pub max_rel: f64,
}

impl Comparison {
    /// Median `|ΔRe|` as a fraction of the normalization gain.
    pub fn median_re_over_norm(&self) -> f64 {
        self.median_abs_re / self.norm
    }

    pub fn max_re_over_norm(&self) -> f64 {
        self.max_abs_re / self.norm
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frequency_hz,d_re_ohm,d_im_ohm,rel\n");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                sig9(p.freq_hz),
                sig9(p.d_re),
                sig9(p.d_im),
                sig9(p.rel)
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "points {}\nnorm_ohm {}\nmedian_abs_d_re_ohm {}\nmax_abs_d_re_ohm {}\nmedian_d_re_over_norm {}\nmax_d_re_over_norm {}\nmedian_abs_d_im_ohm {}\nmax_abs_d_im_ohm {}\nmax_rel {}\n",
            self.points.len(),
            sig9(self.norm),
            sig9(self.median_abs_re),
            sig9(self.max_abs_re),
            sig9(self.median_re_over_norm()),
            sig9(self.max_re_over_norm()),
            sig9(self.median_abs_im),
            sig9(self.max_abs_im),
            sig9(self.max_rel)
        )
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-point deviations of `measured` from `model` on a shared grid.
pub fn compare(measured: &ImpedanceCurve, model: &ImpedanceCurve, norm: f64) -> Result<Comparison> {
    if !(norm > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "normalization must be positive, got {norm}"
        )));
    }
    let (a, b) = (measured.samples(), model.samples());
    if a.len() != b.len() {
        return Err(Error::GridMismatch(format!(
            "{} measured points vs {} model points",
            a.len(),
            b.len()
        )));
    }
    if measured.frame != model.frame {
        return Err(Error::GridMismatch(format!(
            "frames differ: {} vs {}",
            measured.frame.label(),
            model.frame.label()
        )));
    }
    let mut points = Vec::with_capacity(a.len());
    for ((fa, za), (fb, zb)) in a.iter().zip(b) {
        if (fa - fb).abs() > 1e-9 * fa.abs().max(1.0) {
            return Err(Error::GridMismatch(format!("{fa} Hz vs {fb} Hz")));
        }
        let d = za - zb;
        let rel = if zb.norm() > 0.0 {
            d.norm() / zb.norm()
        } else {
            d.norm()
        };
        points.push(PointDeviation {
            freq_hz: *fa,
            d_re: d.re,
            d_im: d.im,
            rel,
        });
    }
    let abs_re: Vec<f64> = points.iter().map(|p| p.d_re.abs()).collect();
    let abs_im: Vec<f64> = points.iter().map(|p| p.d_im.abs()).collect();
    Ok(Comparison {
        norm,
        max_abs_re: abs_re.iter().copied().fold(0.0, f64::max),
        max_abs_im: abs_im.iter().copied().fold(0.0, f64::max),
        max_rel: points.iter().map(|p| p.rel).fold(0.0, f64::max),
        median_abs_re: median(abs_re),
        median_abs_im: median(abs_im),
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarmonicReport {
    /// |5th|, |7th| of the α sum current.
    pub sum: [f64; 2],
    /// |5th|, |7th| of the α component of `2·i_I`.
    pub single: [f64; 2],
    pub ratio: [f64; 2],
    pub degenerate: bool,
}

/// Compares the 5th and 7th harmonics of `i_sum` with those of one line
/// (`2·i_I = i_sum + i_diff`) over the recorded window.
pub fn harmonic_cancellation_check(trace: &Trace, f1: f64) -> Result<HarmonicReport> {
    let sum: Vec<f64> = trace.i_sum.iter().map(|z| z.0.re).collect();
    let single: Vec<f64> = trace
        .i_sum
        .iter()
        .zip(&trace.i_diff)
        .map(|(s, d)| s.0.re + d.0.re)
        .collect();
    let mut report = HarmonicReport {
        sum: [0.0; 2],
        single: [0.0; 2],
        ratio: [0.0; 2],
        degenerate: false,
    };
    for (j, k) in [5.0, 7.0].into_iter().enumerate() {
        report.sum[j] = extract_phasor(&sum, trace.t0, trace.sample_period, k * f1)?.norm();
        report.single[j] = extract_phasor(&single, trace.t0, trace.sample_period, k * f1)?.norm();
        if report.single[j] < 1e-6 {
            report.degenerate = true;
        } else {
            report.ratio[j] = report.sum[j] / report.single[j];
        }
    }
    Ok(report)
}

/// Tracking errors sampled by the controller after a current offset at t = 0.
pub fn step_response(
    sc: &Scenario,
    offset: AlphaBeta,
    duration: f64,
) -> Result<Vec<(f64, AlphaBeta)>> {
    let scenario = Scenario {
        initial_offset: offset,
        ..sc.clone()
    };
    let opts = TraceOptions {
        sample_period: duration,
        record_from: duration,
    };
    Ok(run_scenario(&scenario, duration, opts)?.errors)
}

/// 10–90 % recovery time of the error towards zero after an offset.
pub fn rise_time(errors: &[(f64, AlphaBeta)], offset: AlphaBeta) -> Option<f64> {
    let e0 = -offset.0;
    let scale = e0.norm_sqr();
    if scale == 0.0 {
        return None;
    }
    let progress = |e: &AlphaBeta| 1.0 - (e.0 * e0.conj()).re / scale;
    let t10 = errors.iter().find(|(_, e)| progress(e) >= 0.1)?.0;
    let t90 = errors.iter().find(|(_, e)| progress(e) >= 0.9)?.0;
    Some(t90 - t10)
}
