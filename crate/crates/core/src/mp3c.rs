//! Current-based pulse pattern control.
//!
//! At every sampling instant `t_k` the controller compares the measured
//! currents with the nominal trajectory and turns the error into volt-second
//! demands per converter phase. Transitions whose nominal instants fall in
//! `[t_k + Td, t_k + 2Td)` are then shifted to deliver those volt-seconds and
//! committed; later transitions are left for later samples (receding horizon).
//!
//! Each phase stream shares its deadbeat demand over the transitions ahead
//! of it in the horizon `T_h`: with `n` transitions in the window and `N` in
//! the horizon the committed share is `ln 9 · n / N`, capped at one. Averaged
//! over a period this is a proportional law with gain
//! `err_scale · L_t · ln 9 / T_h`, which gives a 10–90 % rise time of one
//! horizon.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::frames::{inverse_clarke, AlphaBeta, Phase, ThreePhase};
use crate::plant::{GridConfig, PlantParams, PlantState};
use crate::trajectory::{Converter, LineTopology, NominalTrajectory};

/// Shifts shorter than this are not applied.
pub const TIMING_DEADBAND: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub order: u8,
    pub cutoff_hz: f64,
}

impl FilterConfig {
    pub fn new(order: u8, cutoff_hz: f64) -> Result<Self> {
        let f = Self { order, cutoff_hz };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.order, 1 | 2) {
            return Err(Error::InvalidParameter(format!(
                "filter order must be 1 or 2, got {}",
                self.order
            )));
        }
        if !(self.cutoff_hz > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "filter cutoff must be positive, got {}",
                self.cutoff_hz
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlMode {
    /// Nominal pattern applied open loop.
    Off,
    Mp3c,
    /// Proportional law on a ripple-free reference with a held voltage and no
    /// switching; the controller the small-signal model describes.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    pub td: f64,
    pub p: usize,
    pub horizon: f64,
    /// Zero leaves only the PCC feedforward acting.
    pub err_scale: f64,
    /// Anti-aliasing filter on the measurements; `None` is a unity filter.
    pub h_al: Option<FilterConfig>,
    /// Synchronous-frame low-pass of the PCC feedforward; `None` disables the
    /// feedforward of PCC voltage deviations.
    pub h_pcc: Option<FilterConfig>,
    pub mode: ControlMode,
}

impl ControllerConfig {
    /// Defaults: 25 µs sampling, horizon `2/(f1·p)`, second-order 15 kHz
    /// anti-aliasing, first-order 50 Hz PCC filter.
    pub fn new(p: usize, f1: f64) -> Result<Self> {
        let cfg = Self {
            td: 25e-6,
            p,
            horizon: 2.0 / (f1 * p as f64),
            err_scale: 1.0,
            h_al: Some(FilterConfig {
                order: 2,
                cutoff_hz: 15e3,
            }),
            h_pcc: Some(FilterConfig {
                order: 1,
                cutoff_hz: 50.0,
            }),
            mode: ControlMode::Mp3c,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.td > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "td must be positive, got {}",
                self.td
            )));
        }
        if self.p < 2 {
            return Err(Error::InvalidParameter(format!(
                "pulse number must be >= 2, got {}",
                self.p
            )));
        }
        if !(self.horizon > self.td) {
            return Err(Error::InvalidParameter(format!(
                "horizon {} must exceed td {}",
                self.horizon, self.td
            )));
        }
        if !(self.err_scale >= 0.0 && self.err_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "err_scale must be non-negative, got {}",
                self.err_scale
            )));
        }
        for f in self.h_al.iter().chain(self.h_pcc.iter()) {
            f.validate()?;
        }
        Ok(())
    }
}

/// Bilinear (Tustin) discretization of a first- or second-order low-pass,
/// applied to complex signals.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteFilter {
    b: [f64; 3],
    a: [f64; 2],
    z: [Complex64; 2],
}

impl DiscreteFilter {
    pub fn new(cfg: Option<&FilterConfig>, td: f64) -> Self {
        let zero = [Complex64::new(0.0, 0.0); 2];
        let Some(cfg) = cfg else {
            return Self {
                b: [1.0, 0.0, 0.0],
                a: [0.0, 0.0],
                z: zero,
            };
        };
        let wc = 2.0 * std::f64::consts::PI * cfg.cutoff_hz;
        let c = 2.0 / td;
        match cfg.order {
            1 => {
                let n = c + wc;
                Self {
                    b: [wc / n, wc / n, 0.0],
                    a: [(wc - c) / n, 0.0],
                    z: zero,
                }
            }
            _ => {
                let q = 2f64.sqrt() * wc * c;
                let n = c * c + q + wc * wc;
                let g = wc * wc / n;
                Self {
                    b: [g, 2.0 * g, g],
                    a: [(2.0 * wc * wc - 2.0 * c * c) / n, (c * c - q + wc * wc) / n],
                    z: zero,
                }
            }
        }
    }

    pub fn step(&mut self, x: Complex64) -> Complex64 {
        let y = self.b[0] * x + self.z[0];
        self.z[0] = self.b[1] * x - self.a[0] * y + self.z[1];
        self.z[1] = self.b[2] * x - self.a[1] * y;
        y
    }

    /// Sets the internal state to the steady state for a constant input.
    pub fn prime(&mut self, x: Complex64) {
        let dc = (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1]);
        let y = x * dc;
        self.z[1] = self.b[2] * x - self.a[1] * y;
        self.z[0] = self.b[1] * x - self.a[0] * y + self.z[1];
    }
}

/// Raw tracking errors `i* − i` at time `t`.
pub fn current_errors(
    trajectory: &NominalTrajectory,
    state: &PlantState,
    t: f64,
) -> (AlphaBeta, AlphaBeta) {
    let (s, d) = trajectory.at(t);
    (s - state.i_sum, d - state.i_diff)
}

/// Deadbeat volt-second demands per converter phase, each converter in its
/// own frame.
pub fn volt_second_demand(
    i_err_sum: AlphaBeta,
    i_err_diff: AlphaBeta,
    params: &PlantParams,
    err_scale: f64,
    topology: LineTopology,
) -> [ThreePhase; 2] {
    let lambda_sum = i_err_sum * (2.0 * params.lt() * err_scale);
    let lambda_diff = i_err_diff * (params.ls() * err_scale);
    let lambda_i = (lambda_sum + lambda_diff) * 0.5;
    let lambda_ii_line = (lambda_sum - lambda_diff) * 0.5;
    let lambda_ii = lambda_ii_line * topology.rotation(Converter::II).conj();
    [inverse_clarke(lambda_i), inverse_clarke(lambda_ii)]
}

/// A transition that may be moved within `[earliest, latest]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftCandidate {
    pub nominal: f64,
    pub delta_u: f64,
    pub earliest: f64,
    pub latest: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftOutcome {
    pub times: Vec<f64>,
    /// Volt-seconds that could not be placed.
    pub residual: f64,
}

/// Greedy allocation of a volt-second demand over one phase's transitions in
/// time order. Advancing a transition of step `Δu` by `δ` adds
/// `(vdc/2)·Δu·δ`; each shift is clamped to keep the transitions ordered and
/// within their bounds, and what is left carries to the next transition.
pub fn shift_transitions(events: &[ShiftCandidate], demand: f64, vdc: f64) -> ShiftOutcome {
    let mut residual = demand;
    let mut times = Vec::with_capacity(events.len());
    for (j, e) in events.iter().enumerate() {
        let mut lo = e.earliest;
        if let Some(&prev) = times.last() {
            lo = lo.max(prev);
        }
        let mut hi = e.latest;
        if let Some(next) = events.get(j + 1) {
            hi = hi.min(next.nominal);
        }
        let hi = hi.max(lo);
        let gain = 0.5 * vdc * e.delta_u;
        let wanted = if gain != 0.0 { residual / gain } else { 0.0 };
        let t = (e.nominal - wanted).clamp(lo, hi);
        let delta = e.nominal - t;
        if delta.abs() < TIMING_DEADBAND && (lo..=hi).contains(&e.nominal) {
            times.push(e.nominal);
            continue;
        }
        residual -= gain * delta;
        times.push(t);
    }
    ShiftOutcome { times, residual }
}

/// A committed transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateEvent {
    pub id: i64,
    pub nominal: f64,
    pub t: f64,
    pub converter: Converter,
    pub phase: Phase,
    pub delta_u: f64,
}

/// Held voltage corrections of the linear law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearCorrection {
    /// Added to `v_sum/2`.
    pub v_sum_half: AlphaBeta,
    pub v_diff: AlphaBeta,
}

/// What one sampling instant commits for `[t + Td, t + 2Td)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSchedule {
    pub t: f64,
    pub events: Vec<GateEvent>,
    pub residual: [ThreePhase; 2],
    pub correction: Option<LinearCorrection>,
    /// Unfiltered sum-channel error at `t`.
    pub error_sum: AlphaBeta,
}

#[derive(Debug, Clone)]
pub struct Controller {
    cfg: ControllerConfig,
    params: PlantParams,
    grid: GridConfig,
    topology: LineTopology,
    vdc: f64,
    al_sum: DiscreteFilter,
    al_diff: DiscreteFilter,
    al_v: DiscreteFilter,
    pcc: DiscreteFilter,
    last_time: [[f64; 3]; 2],
}

impl Controller {
    pub fn new(
        cfg: ControllerConfig,
        params: PlantParams,
        grid: GridConfig,
        topology: LineTopology,
        vdc: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        let al = || DiscreteFilter::new(cfg.h_al.as_ref(), cfg.td);
        Ok(Self {
            cfg,
            params,
            grid,
            topology,
            vdc,
            al_sum: al(),
            al_diff: al(),
            al_v: al(),
            pcc: DiscreteFilter::new(cfg.h_pcc.as_ref(), cfg.td),
            last_time: [[f64::NEG_INFINITY; 3]; 2],
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    fn gain(&self, l: f64) -> f64 {
        self.cfg.err_scale * l * 9f64.ln() / self.cfg.horizon
    }

    /// Filtered deviation of the PCC voltage from its nominal value, as the
    /// voltage to add to `v_sum/2`.
    fn pcc_feedforward(&mut self, t: f64, v_pcc: AlphaBeta) -> AlphaBeta {
        if self.cfg.h_pcc.is_none() {
            return AlphaBeta::ZERO;
        }
        let dev = (v_pcc - self.grid.v_pcc_nominal(t)).0;
        let x = self.al_v.step(dev);
        let rot = Complex64::from_polar(1.0, self.grid.angle(t));
        AlphaBeta(self.pcc.step(x * rot.conj()) * rot)
    }

    /// One sampling instant. `v_pcc` is the measured PCC voltage at `t`.
    pub fn step(
        &mut self,
        t: f64,
        state: &PlantState,
        v_pcc: AlphaBeta,
        trajectory: &NominalTrajectory,
    ) -> GateSchedule {
        let td = self.cfg.td;
        let (e_sum_raw, e_diff_raw) = current_errors(trajectory, state, t);
        let mut schedule = GateSchedule {
            t,
            events: Vec::new(),
            residual: [ThreePhase::ZERO; 2],
            correction: None,
            error_sum: e_sum_raw,
        };
        let window = trajectory
            .timeline()
            .map(|tl| tl.events_between(t + td, t + 2.0 * td))
            .unwrap_or_default();

        if self.cfg.mode == ControlMode::Off {
            schedule.events = window
                .iter()
                .map(|e| GateEvent {
                    id: e.id,
                    nominal: e.t,
                    t: e.t,
                    converter: e.converter,
                    phase: e.phase,
                    delta_u: e.delta_u,
                })
                .collect();
            return schedule;
        }

        let e_sum = AlphaBeta(self.al_sum.step(e_sum_raw.0));
        let e_diff = AlphaBeta(self.al_diff.step(e_diff_raw.0));
        let ff = self.pcc_feedforward(t, v_pcc);

        if self.cfg.mode == ControlMode::Linear {
            schedule.correction = Some(LinearCorrection {
                v_sum_half: e_sum * self.gain(self.params.lt()) + ff,
                v_diff: e_diff * self.gain(self.params.ls()),
            });
            return schedule;
        }

        let Some(timeline) = trajectory.timeline() else {
            return schedule;
        };
        let demand = volt_second_demand(
            e_sum,
            e_diff,
            &self.params,
            self.cfg.err_scale,
            self.topology,
        );
        // each converter adds the deviation to its line voltage
        let ff_rate = [
            inverse_clarke(ff),
            inverse_clarke(ff * self.topology.rotation(Converter::II).conj()),
        ];
        let ln9 = 9f64.ln();
        let horizon_events = timeline.events_between(t + td, t + td + self.cfg.horizon);
        for conv in Converter::ALL {
            for phase in Phase::ALL {
                let stream: Vec<_> = window
                    .iter()
                    .filter(|e| e.converter == conv && e.phase == phase)
                    .collect();
                if stream.is_empty() {
                    continue;
                }
                // Deadbeat over the horizon: every transition still ahead
                // in the horizon takes an equal share; only the first window
                // is committed and the rest is replanned at the next sample.
                let ahead = horizon_events
                    .iter()
                    .filter(|e| e.converter == conv && e.phase == phase)
                    .count()
                    .max(stream.len());
                let w = self.cfg.horizon * stream.len() as f64 / ahead as f64;
                let lambda = demand[conv.index()].get(phase)
                    * (ln9 * w / self.cfg.horizon).min(1.0)
                    + ff_rate[conv.index()].get(phase) * w;
                let earliest = (t + td).max(self.last_time[conv.index()][phase.index()]);
                let candidates: Vec<ShiftCandidate> = stream
                    .iter()
                    .map(|e| ShiftCandidate {
                        nominal: e.t,
                        delta_u: e.delta_u,
                        earliest,
                        latest: timeline.next_in_stream(conv, phase, e.t).unwrap_or(e.t),
                    })
                    .collect();
                let out = shift_transitions(&candidates, lambda, self.vdc);
                *schedule.residual[conv.index()].get_mut(phase) = out.residual;
                for (e, &at) in stream.iter().zip(&out.times) {
                    schedule.events.push(GateEvent {
                        id: e.id,
                        nominal: e.t,
                        t: at,
                        converter: conv,
                        phase,
                        delta_u: e.delta_u,
                    });
                }
                if let Some(&at) = out.times.last() {
                    self.last_time[conv.index()][phase.index()] = at;
                }
            }
        }
        schedule
            .events
            .sort_by(|a, b| a.t.total_cmp(&b.t).then(a.id.cmp(&b.id)));
        schedule
    }
}
