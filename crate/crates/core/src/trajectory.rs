//! Reference generation.
//!
//! The feedforward references follow from the steady-state circuit equations.
//! They fix the modulation index of each converter, which selects a pattern
//! from the table. The nominal current trajectory is then the periodic steady
//! state of the circuit driven by those patterns, ripple included.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_6, PI};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::frames::{clarke, delta_rotation, from_dq, AlphaBeta, Dq, Phase, ThreePhase};
use crate::opp::{load_pattern, PatternEvent, PatternTable, SwitchingPattern};
use crate::plant::{GridConfig, PlantParams, RlBranch};

/// Rated primary current peak of the 14 MVA, 66 kV transformer.
pub const RATED_CURRENT_PEAK: f64 = 173.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Converter {
    I,
    II,
}

impl Converter {
    pub const ALL: [Converter; 2] = [Converter::I, Converter::II];

    pub fn index(self) -> usize {
        match self {
            Converter::I => 0,
            Converter::II => 1,
        }
    }
}

/// How the second line couples to the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LineTopology {
    /// Wye-delta-wye: line II is rotated by the delta winding and its pattern
    /// is shifted by π/6 to compensate.
    #[default]
    Delta,
    /// Two identical wye lines with unshifted patterns.
    Identical,
}

impl LineTopology {
    /// Factor mapping a converter's own-frame αβ voltage to the line frame.
    pub fn rotation(self, converter: Converter) -> Complex64 {
        match (self, converter) {
            (LineTopology::Delta, Converter::II) => delta_rotation(),
            _ => Complex64::new(1.0, 0.0),
        }
    }

    pub fn pattern_shift(self, converter: Converter) -> f64 {
        match (self, converter) {
            (LineTopology::Delta, Converter::II) => FRAC_PI_6,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub m: f64,
    pub vdc: f64,
    pub ref_angle: f64,
    pub i_sum_ref: Dq,
    pub i_diff_ref: Dq,
}

impl OperatingPoint {
    pub fn new(m: f64, vdc: f64, ref_angle: f64, i_sum_ref: Dq, i_diff_ref: Dq) -> Result<Self> {
        if !(m > 0.0 && m <= 4.0 / PI) {
            return Err(Error::InvalidParameter(format!(
                "modulation index {m} outside (0, 4/pi]"
            )));
        }
        if !(vdc > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "dc-link voltage must be positive, got {vdc}"
            )));
        }
        Ok(Self {
            m,
            vdc,
            ref_angle,
            i_sum_ref,
            i_diff_ref,
        })
    }

    /// Operating point that runs converter I at modulation index `m` while
    /// delivering the given currents; the dc-link voltage follows.
    pub fn for_modulation(
        m: f64,
        i_sum_ref: Dq,
        i_diff_ref: Dq,
        params: &PlantParams,
        grid: &GridConfig,
    ) -> Result<Self> {
        let (v_sum, v_diff) = ff_voltage_refs(
            i_sum_ref,
            i_diff_ref,
            Dq::new(grid.v_pcc_peak, 0.0),
            params,
            grid.omega1(),
        );
        let v_i = (v_sum + v_diff) * 0.5;
        if v_i.norm() == 0.0 {
            return Err(Error::InvalidParameter(
                "zero converter voltage reference".into(),
            ));
        }
        Self::new(m, 2.0 * v_i.norm() / m, v_i.arg(), i_sum_ref, i_diff_ref)
    }

    /// Rated active current on the d-axis, no circulating current.
    pub fn rated(m: f64, params: &PlantParams, grid: &GridConfig) -> Result<Self> {
        Self::for_modulation(m, Dq::new(RATED_CURRENT_PEAK, 0.0), Dq::ZERO, params, grid)
    }
}

/// Steady-state voltage references of the sum and difference channels.
pub fn ff_voltage_refs(
    i_sum_ref: Dq,
    i_diff_ref: Dq,
    v_pcc: Dq,
    params: &PlantParams,
    omega1: f64,
) -> (Dq, Dq) {
    let z_t = Complex64::new(params.rt(), omega1 * params.lt());
    let z_s = Complex64::new(params.rs(), omega1 * params.ls());
    let v_sum = Dq(v_pcc.0 * 2.0 + z_t * i_sum_ref.0 * 2.0);
    let v_diff = Dq(z_s * i_diff_ref.0);
    (v_sum, v_diff)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub v_sum_ref: Dq,
    pub v_diff_ref: Dq,
    /// Line-frame voltage reference of each converter.
    pub v_ref: [Dq; 2],
    pub m: [f64; 2],
    pub patterns: [SwitchingPattern; 2],
    /// Pattern angle at t = 0 for each converter.
    pub theta0: [f64; 2],
    pub vdc: f64,
    pub topology: LineTopology,
}

impl ReferenceSet {
    pub fn from_patterns(
        v_sum_ref: Dq,
        v_diff_ref: Dq,
        vdc: f64,
        patterns: [SwitchingPattern; 2],
        grid: &GridConfig,
        topology: LineTopology,
    ) -> Result<Self> {
        if !(vdc > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "dc-link voltage must be positive, got {vdc}"
            )));
        }
        let v_ref = [
            (v_sum_ref + v_diff_ref) * 0.5,
            (v_sum_ref - v_diff_ref) * 0.5,
        ];
        let m = v_ref.map(|v| 2.0 * v.norm() / vdc);
        // The sine-symmetric waveform puts the fundamental at -j·e^{jθ}.
        let theta0 = v_ref.map(|v| grid.phi_ini + v.arg() + FRAC_PI_2);
        Ok(Self {
            v_sum_ref,
            v_diff_ref,
            v_ref,
            m,
            patterns,
            theta0,
            vdc,
            topology,
        })
    }

    pub fn v_ref_alpha_beta(&self, converter: Converter, grid: &GridConfig) -> AlphaBeta {
        from_dq(self.v_ref[converter.index()], grid.phi_ini)
    }
}

/// Normalizes the references by `vdc` and loads a pattern for each converter.
pub fn select_patterns(
    v_sum_ref: Dq,
    v_diff_ref: Dq,
    vdc: f64,
    table: &PatternTable,
    grid: &GridConfig,
    topology: LineTopology,
) -> Result<ReferenceSet> {
    if !(vdc > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "dc-link voltage must be positive, got {vdc}"
        )));
    }
    let v_i = (v_sum_ref + v_diff_ref) * 0.5;
    let v_ii = (v_sum_ref - v_diff_ref) * 0.5;
    let p_i = load_pattern(table, 2.0 * v_i.norm() / vdc)?;
    let p_ii = load_pattern(table, 2.0 * v_ii.norm() / vdc)?;
    ReferenceSet::from_patterns(v_sum_ref, v_diff_ref, vdc, [p_i, p_ii], grid, topology)
}

/// References for an operating point, with patterns from `table`.
pub fn references_for(
    op: &OperatingPoint,
    table: &PatternTable,
    params: &PlantParams,
    grid: &GridConfig,
    topology: LineTopology,
) -> Result<ReferenceSet> {
    let (v_sum, v_diff) = ff_voltage_refs(
        op.i_sum_ref,
        op.i_diff_ref,
        Dq::new(grid.v_pcc_peak, 0.0),
        params,
        grid.omega1(),
    );
    select_patterns(v_sum, v_diff, op.vdc, table, grid, topology)
}

/// A nominal switching transition at a time within the fundamental period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedEvent {
    pub t: f64,
    pub converter: Converter,
    pub phase: Phase,
    pub delta_u: f64,
}

/// A nominal transition at an absolute time; `id` counts events across periods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NominalEvent {
    pub id: i64,
    pub t: f64,
    pub converter: Converter,
    pub phase: Phase,
    pub delta_u: f64,
}

/// Periodic switching schedule of both converters.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    period: f64,
    events: Vec<TimedEvent>,
    u_start: [ThreePhase; 2],
    // per converter and phase: indices into `events`
    streams: [[Vec<usize>; 3]; 2],
}

impl Timeline {
    pub fn new(refs: &ReferenceSet, grid: &GridConfig) -> Result<Self> {
        let period = grid.period();
        let omega = grid.omega1();
        let mut events = Vec::new();
        let mut u_start = [ThreePhase::ZERO; 2];
        for conv in Converter::ALL {
            let pattern = &refs.patterns[conv.index()];
            let expanded: Vec<PatternEvent> = crate::opp::expand_pattern(
                pattern.quarter(),
                pattern.levels(),
                refs.topology.pattern_shift(conv),
            )?;
            let theta0 = refs.theta0[conv.index()];
            let mut mine: Vec<(TimedEvent, f64)> = expanded
                .iter()
                .map(|e| {
                    let mut t = ((e.theta - theta0) / omega).rem_euclid(period);
                    if period - t < 1e-15 {
                        t = 0.0;
                    }
                    (
                        TimedEvent {
                            t,
                            converter: conv,
                            phase: e.phase,
                            delta_u: e.delta_u,
                        },
                        e.u_after,
                    )
                })
                .collect();
            mine.sort_by(|a, b| a.0.t.total_cmp(&b.0.t));
            for phase in Phase::ALL {
                // the level entering the period is the level left by the last event
                if let Some((_, u)) = mine.iter().rev().find(|(e, _)| e.phase == phase) {
                    *u_start[conv.index()].get_mut(phase) = *u;
                }
            }
            events.extend(mine.into_iter().map(|(e, _)| e));
        }
        events.sort_by(|a, b| {
            a.t.total_cmp(&b.t)
                .then(a.converter.cmp(&b.converter))
                .then(a.phase.cmp(&b.phase))
        });
        let mut streams: [[Vec<usize>; 3]; 2] = Default::default();
        for (i, e) in events.iter().enumerate() {
            streams[e.converter.index()][e.phase.index()].push(i);
        }
        Ok(Self {
            period,
            events,
            u_start,
            streams,
        })
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn events(&self) -> &[TimedEvent] {
        &self.events
    }

    /// Switch levels at the start of every period, before any event at t = 0.
    pub fn u_start(&self) -> [ThreePhase; 2] {
        self.u_start
    }

    fn absolute(&self, cycle: i64, index: usize) -> NominalEvent {
        let e = &self.events[index];
        NominalEvent {
            id: cycle * self.events.len() as i64 + index as i64,
            t: cycle as f64 * self.period + e.t,
            converter: e.converter,
            phase: e.phase,
            delta_u: e.delta_u,
        }
    }

    fn cycle_of(&self, t: f64) -> i64 {
        (t / self.period).floor() as i64
    }

    /// Nominal events with absolute time in `[t_a, t_b)`, in time order.
    pub fn events_between(&self, t_a: f64, t_b: f64) -> Vec<NominalEvent> {
        let mut out = Vec::new();
        if self.events.is_empty() || !(t_b > t_a) {
            return out;
        }
        for cycle in self.cycle_of(t_a) - 1..=self.cycle_of(t_b) + 1 {
            for i in 0..self.events.len() {
                let e = self.absolute(cycle, i);
                if e.t >= t_a && e.t < t_b {
                    out.push(e);
                }
            }
        }
        out
    }

    /// Latest nominal time strictly before `t` in one converter phase.
    pub fn prev_in_stream(&self, converter: Converter, phase: Phase, t: f64) -> Option<f64> {
        let stream = &self.streams[converter.index()][phase.index()];
        let first = *stream.first()?;
        let mut best = None;
        for cycle in self.cycle_of(t) - 1..=self.cycle_of(t) {
            for &i in stream {
                let e = self.absolute(cycle, i);
                if e.t < t {
                    best = Some(e.t);
                }
            }
        }
        Some(best.unwrap_or_else(|| self.absolute(self.cycle_of(t) - 2, first).t))
    }

    /// Earliest nominal time strictly after `t` in one converter phase.
    pub fn next_in_stream(&self, converter: Converter, phase: Phase, t: f64) -> Option<f64> {
        let stream = &self.streams[converter.index()][phase.index()];
        for cycle in self.cycle_of(t)..=self.cycle_of(t) + 2 {
            for &i in stream {
                let e = self.absolute(cycle, i);
                if e.t > t {
                    return Some(e.t);
                }
            }
        }
        None
    }
}

/// Line-side sum and difference voltages for given switch levels.
///
/// Returns `(v_sum, v_diff)` with `v_x = rotation_x · (vdc/2) · clarke(u_x)`.
pub fn line_voltages(
    u: &[ThreePhase; 2],
    vdc: f64,
    topology: LineTopology,
) -> (AlphaBeta, AlphaBeta) {
    let v = Converter::ALL.map(|c| clarke(u[c.index()]) * (0.5 * vdc) * topology.rotation(c));
    (v[0] + v[1], v[0] - v[1])
}

/// Periodic response of an RL branch to a piecewise-constant drive.
#[derive(Debug, Clone, PartialEq)]
struct PeriodicRl {
    branch: RlBranch,
    period: f64,
    starts: Vec<f64>,
    currents: Vec<Complex64>,
    drives: Vec<Complex64>,
}

impl PeriodicRl {
    fn new(branch: RlBranch, period: f64, starts: Vec<f64>, drives: Vec<Complex64>) -> Self {
        let n = starts.len();
        let ends: Vec<f64> = starts
            .iter()
            .skip(1)
            .copied()
            .chain(std::iter::once(period))
            .collect();
        let sweep = |i0: Complex64, record: Option<&mut Vec<Complex64>>| {
            let mut i = i0;
            let mut rec = record;
            for j in 0..n {
                if let Some(r) = rec.as_deref_mut() {
                    r.push(i);
                }
                let a = branch.decay(ends[j] - starts[j]);
                let ip = drives[j] / branch.r;
                i = (i - ip) * a + ip;
            }
            i
        };
        let gamma = sweep(Complex64::new(0.0, 0.0), None);
        let phi = branch.decay(period);
        let i0 = gamma / (1.0 - phi);
        let mut currents = Vec::with_capacity(n);
        sweep(i0, Some(&mut currents));
        Self {
            branch,
            period,
            starts,
            currents,
            drives,
        }
    }

    fn at(&self, t: f64) -> Complex64 {
        let tau = t.rem_euclid(self.period);
        let j = self.starts.partition_point(|&s| s <= tau).max(1) - 1;
        let ip = self.drives[j] / self.branch.r;
        (self.currents[j] - ip) * self.branch.decay(tau - self.starts[j]) + ip
    }
}

/// Instantaneous current references `i*_sum(t)`, `i*_diff(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalTrajectory {
    period: f64,
    omega1: f64,
    sum_phasor: Complex64,
    diff_phasor: Complex64,
    switched: Option<(PeriodicRl, PeriodicRl, Timeline)>,
}

impl NominalTrajectory {
    /// Ripple-free references: the fundamental phasors only.
    pub fn fundamental(i_sum_ref: Dq, i_diff_ref: Dq, grid: &GridConfig) -> Self {
        Self {
            period: grid.period(),
            omega1: grid.omega1(),
            sum_phasor: from_dq(i_sum_ref, grid.phi_ini).0,
            diff_phasor: from_dq(i_diff_ref, grid.phi_ini).0,
            switched: None,
        }
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn timeline(&self) -> Option<&Timeline> {
        self.switched.as_ref().map(|(_, _, tl)| tl)
    }

    pub fn i_sum(&self, t: f64) -> AlphaBeta {
        let rot = Complex64::from_polar(1.0, self.omega1 * t);
        let ripple = self
            .switched
            .as_ref()
            .map_or(Complex64::new(0.0, 0.0), |(s, _, _)| s.at(t));
        AlphaBeta(self.sum_phasor * rot + ripple)
    }

    pub fn i_diff(&self, t: f64) -> AlphaBeta {
        let rot = Complex64::from_polar(1.0, self.omega1 * t);
        let ripple = self
            .switched
            .as_ref()
            .map_or(Complex64::new(0.0, 0.0), |(_, d, _)| d.at(t));
        AlphaBeta(self.diff_phasor * rot + ripple)
    }

    pub fn at(&self, t: f64) -> (AlphaBeta, AlphaBeta) {
        (self.i_sum(t), self.i_diff(t))
    }
}

/// Periodic steady state of the circuit under the nominal patterns and the
/// ideal grid voltage.
pub fn nominal_current_trajectory(
    refs: &ReferenceSet,
    params: &PlantParams,
    grid: &GridConfig,
) -> Result<NominalTrajectory> {
    let timeline = Timeline::new(refs, grid)?;
    let period = timeline.period();
    let mut u = timeline.u_start();
    let mut starts = vec![0.0];
    let (vs, vd) = line_voltages(&u, refs.vdc, refs.topology);
    let mut sum_drives = vec![vs.0 * 0.5];
    let mut diff_drives = vec![vd.0];
    let events = timeline.events();
    let mut k = 0;
    while k < events.len() {
        let t = events[k].t;
        while k < events.len() && events[k].t == t {
            let e = &events[k];
            *u[e.converter.index()].get_mut(e.phase) += e.delta_u;
            k += 1;
        }
        let (vs, vd) = line_voltages(&u, refs.vdc, refs.topology);
        if t == 0.0 {
            // events at the period start replace the entry level
            sum_drives[0] = vs.0 * 0.5;
            diff_drives[0] = vd.0;
        } else {
            starts.push(t);
            sum_drives.push(vs.0 * 0.5);
            diff_drives.push(vd.0);
        }
    }
    for (conv, levels) in Converter::ALL.iter().zip(u) {
        for phase in Phase::ALL {
            let start = timeline.u_start()[conv.index()].get(phase);
            if (levels.get(phase) - start).abs() > 1e-9 {
                return Err(Error::NonPeriodic {
                    phase: phase.index(),
                    net: levels.get(phase) - start,
                });
            }
        }
    }
    let sum_branch = params.sum_branch();
    let grid_part = -grid.v_pcc_phasor().0 * sum_branch.admittance(grid.omega1());
    Ok(NominalTrajectory {
        period,
        omega1: grid.omega1(),
        sum_phasor: grid_part,
        diff_phasor: Complex64::new(0.0, 0.0),
        switched: Some((
            PeriodicRl::new(sum_branch, period, starts.clone(), sum_drives),
            PeriodicRl::new(params.diff_branch(), period, starts, diff_drives),
            timeline,
        )),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opp::{step_sequence, TableRow};
    use crate::plant::{advance, PlantState};
    use approx::assert_relative_eq;

    fn approx_c(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    fn square_table(levels: usize) -> PatternTable {
        let p = SwitchingPattern::from_parts(
            levels,
            &[0.0],
            &[if levels == 3 {
                1.0
            } else {
                2.0 / (levels as f64 - 1.0)
            }],
        )
        .unwrap();
        PatternTable::new(
            1,
            levels,
            vec![TableRow {
                m: p.fundamental(),
                pattern: p,
            }],
        )
        .unwrap()
    }

    fn seven_angle_table() -> PatternTable {
        let steps = step_sequence(7, 3).unwrap();
        let angles = [0.11, 0.27, 0.43, 0.61, 0.88, 1.12, 1.37];
        let p = SwitchingPattern::from_parts(3, &angles, &steps).unwrap();
        PatternTable::new(
            7,
            3,
            vec![TableRow {
                m: p.fundamental(),
                pattern: p,
            }],
        )
        .unwrap()
    }

    fn refs_for(table: &PatternTable, grid: &GridConfig, params: &PlantParams) -> ReferenceSet {
        let m = table.rows[0].m;
        let op = OperatingPoint::rated(m, params, grid).unwrap();
        references_for(&op, table, params, grid, LineTopology::Delta).unwrap()
    }

    #[test]
    fn feedforward_examples() {
        let p = PlantParams::default();
        let w = 2.0 * PI * 50.0;
        let v_pcc = Dq::new(53_900.0, 0.0);
        let (s, d) = ff_voltage_refs(Dq::ZERO, Dq::ZERO, v_pcc, &p, w);
        assert_eq!(s, Dq::new(107_800.0, 0.0));
        assert_eq!(d, Dq::ZERO);

        let (s, _) = ff_voltage_refs(Dq::new(100.0, 0.0), Dq::ZERO, v_pcc, &p, w);
        assert_relative_eq!(s.d(), 108_420.0, epsilon = 1e-9);
        assert_relative_eq!(s.q(), 2.0 * w * 0.178 * 100.0, epsilon = 1e-9);
        assert!((s.q() - 11_184.0).abs() < 1.0);

        // a secondary leakage of 356 mH gives ω1·L_s = 111.8 Ω
        let p2 = PlantParams::new(1.55, 0.089, 3.1, 0.356).unwrap();
        let (_, d) = ff_voltage_refs(Dq::ZERO, Dq::new(10.0, 0.0), v_pcc, &p2, w);
        assert_relative_eq!(d.d(), 31.0, epsilon = 1e-12);
        assert!((d.q() - 1118.0).abs() < 0.5);
    }

    #[test]
    fn modulation_index_definition() {
        let grid = GridConfig::default();
        let params = PlantParams::default();
        let table = seven_angle_table();
        let vdc = 10_000.0;
        let m = table.rows[0].m;
        let v = Dq::new(0.5 * m * vdc * 2.0, 0.0);
        let refs = select_patterns(v, Dq::ZERO, vdc, &table, &grid, LineTopology::Delta).unwrap();
        assert_relative_eq!(refs.m[0], m, max_relative = 1e-12);
        assert_eq!(refs.m[0], refs.m[1]);
        assert_relative_eq!(
            2.0 * refs.v_ref[0].norm() / vdc,
            refs.m[0],
            max_relative = 1e-9
        );
        let _ = params;

        // ‖v_ref‖ = 0.475·vdc is m = 0.95
        let v = Dq::new(2.0 * 0.475 * vdc, 0.0);
        let too_high = select_patterns(v, Dq::ZERO, vdc, &table, &grid, LineTopology::Delta);
        assert!(matches!(too_high, Err(Error::OutOfRange { m, .. }) if (m - 0.95).abs() < 1e-12));
    }

    #[test]
    fn pattern_fundamental_aligns_with_reference() {
        let grid = GridConfig {
            phi_ini: 0.4,
            ..Default::default()
        };
        let params = PlantParams::default();
        let table = seven_angle_table();
        let refs = refs_for(&table, &grid, &params);
        let tl = Timeline::new(&refs, &grid).unwrap();
        // fundamental of the line-side voltage of each converter, integrated
        // exactly over the period
        let period = grid.period();
        let w = grid.omega1();
        for conv in Converter::ALL {
            let mut u = tl.u_start();
            let mut acc = Complex64::new(0.0, 0.0);
            let mut prev = 0.0;
            let line = |u: &[ThreePhase; 2]| {
                clarke(u[conv.index()]).0 * (0.5 * refs.vdc) * refs.topology.rotation(conv)
            };
            let seg = |v: Complex64, a: f64, b: f64| {
                v * (Complex64::from_polar(1.0, -w * b) - Complex64::from_polar(1.0, -w * a))
                    / Complex64::new(0.0, -w)
            };
            for e in tl.events() {
                acc += seg(line(&u), prev, e.t);
                if e.converter == conv {
                    *u[conv.index()].get_mut(e.phase) += e.delta_u;
                }
                prev = e.t;
            }
            acc += seg(line(&u), prev, period);
            let fundamental = acc / period;
            let want = refs.v_ref_alpha_beta(conv, &grid).0;
            assert!(
                approx_c(fundamental, want, 1e-6 * want.norm()),
                "{conv:?}: {fundamental} vs {want}"
            );
        }
    }

    #[test]
    fn fundamental_trajectory_is_the_phasor() {
        let grid = GridConfig {
            phi_ini: 0.3,
            ..Default::default()
        };
        let tr = NominalTrajectory::fundamental(Dq::new(100.0, 20.0), Dq::ZERO, &grid);
        for t in [0.0, 0.003, 0.017, 1.234] {
            let want = Complex64::new(100.0, 20.0) * Complex64::from_polar(1.0, grid.angle(t));
            assert!(approx_c(tr.i_sum(t).0, want, 1e-9));
            assert_eq!(tr.i_diff(t), AlphaBeta::ZERO);
        }
    }

    #[test]
    fn trajectory_is_periodic_and_carries_the_reference() {
        let grid = GridConfig::default();
        let params = PlantParams::default();
        let refs = refs_for(&seven_angle_table(), &grid, &params);
        let tr = nominal_current_trajectory(&refs, &params, &grid).unwrap();
        let t_end = tr.period();
        let (s0, d0) = tr.at(0.0);
        let (s1, d1) = tr.at(t_end - 1e-15);
        assert!((s0 - s1).norm() <= 1e-9 * s0.norm());
        assert!((d0 - d1).norm() <= 1e-9 * (1.0 + d0.norm()));

        // fundamental of i*_sum by fine quadrature
        let n = 200_000;
        let dt = t_end / n as f64;
        let mut acc = Complex64::new(0.0, 0.0);
        let mut mean_diff = Complex64::new(0.0, 0.0);
        for k in 0..n {
            let t = (k as f64 + 0.5) * dt;
            acc += tr.i_sum(t).0 * Complex64::from_polar(1.0, -grid.omega1() * t);
            mean_diff += tr.i_diff(t).0;
        }
        let fundamental = acc / n as f64;
        let want = from_dq(Dq::new(RATED_CURRENT_PEAK, 0.0), grid.phi_ini).0;
        assert!(
            (fundamental - want).norm() <= 1e-3 * want.norm(),
            "{fundamental} vs {want}"
        );
        // difference ripple has no dc part
        assert!((mean_diff / n as f64).norm() < 1e-9 * 1e3);
    }

    #[test]
    fn trajectory_is_continuous_at_events() {
        let grid = GridConfig::default();
        let params = PlantParams::default();
        let refs = refs_for(&seven_angle_table(), &grid, &params);
        let tr = nominal_current_trajectory(&refs, &params, &grid).unwrap();
        for e in tr.timeline().unwrap().events().iter().take(20) {
            let (a, _) = tr.at(e.t - 1e-12);
            let (b, _) = tr.at(e.t + 1e-12);
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn open_loop_plant_stays_on_trajectory() {
        let grid = GridConfig::default();
        let params = PlantParams::default();
        let refs = refs_for(&seven_angle_table(), &grid, &params);
        let tr = nominal_current_trajectory(&refs, &params, &grid).unwrap();
        let tl = tr.timeline().unwrap();
        let mut u = tl.u_start();
        let (i_sum, i_diff) = tr.at(0.0);
        let mut s = PlantState {
            t: 0.0,
            i_sum,
            i_diff,
        };
        let mut worst: f64 = 0.0;
        let events = tl.events_between(0.0, tr.period());
        let mut idx = 0;
        let times: Vec<f64> = events
            .iter()
            .map(|e| e.t)
            .chain(std::iter::once(tr.period()))
            .collect();
        for &t in &times {
            if t > s.t {
                let (vs, vd) = line_voltages(&u, refs.vdc, refs.topology);
                s = advance(&s, vs, vd, &params, &grid, t - s.t).unwrap();
            }
            while idx < events.len() && events[idx].t == t {
                let e = &events[idx];
                *u[e.converter.index()].get_mut(e.phase) += e.delta_u;
                idx += 1;
            }
            let (a, _) = tr.at(s.t);
            worst = worst.max((a - s.i_sum).norm());
        }
        assert!(worst < 1e-9 * RATED_CURRENT_PEAK, "deviation {worst}");
    }

    #[test]
    fn square_wave_ripple_matches_simulation_and_scales_with_inductance() {
        let grid = GridConfig::default();
        let params = PlantParams::default();
        let table = square_table(3);
        let refs = refs_for(&table, &grid, &params);
        let tr = nominal_current_trajectory(&refs, &params, &grid).unwrap();

        // fine-step simulation from rest for 40 time constants
        let tl = tr.timeline().unwrap();
        let mut u = tl.u_start();
        let mut s = PlantState::default();
        let horizon = 60.0 * tr.period();
        let events = tl.events_between(0.0, horizon + tr.period());
        let mut idx = 0;
        let mut worst: f64 = 0.0;
        let mut peak: f64 = 0.0;
        let dt = 2e-6;
        let mut k = 0u64;
        loop {
            let t_next = (k + 1) as f64 * dt;
            if t_next > horizon {
                break;
            }
            while idx < events.len() && events[idx].t <= s.t {
                let e = &events[idx];
                *u[e.converter.index()].get_mut(e.phase) += e.delta_u;
                idx += 1;
            }
            let mut target = t_next;
            if idx < events.len() && events[idx].t < t_next {
                target = events[idx].t;
            } else {
                k += 1;
            }
            if target > s.t {
                let (vs, vd) = line_voltages(&u, refs.vdc, refs.topology);
                s = advance(&s, vs, vd, &params, &grid, target - s.t).unwrap();
            }
            if s.t > horizon - tr.period() {
                let (a, _) = tr.at(s.t);
                worst = worst.max((a - s.i_sum).norm());
                peak = peak.max(a.norm());
            }
        }
        assert!(worst <= 5e-3 * peak, "deviation {worst} of {peak}");

        // ripple of the diff channel is inversely proportional to L_s
        let fat = PlantParams::new(
            params.rp(),
            params.lp(),
            params.rs() * 2.0,
            params.ls() * 2.0,
        )
        .unwrap();
        let thin = nominal_current_trajectory(&refs, &params, &grid).unwrap();
        let thick = nominal_current_trajectory(&refs, &fat, &grid).unwrap();
        for t in [0.001, 0.0043, 0.011] {
            let a = thin.i_diff(t).0;
            let b = thick.i_diff(t).0;
            assert!((a - b * 2.0).norm() <= 1e-9 * a.norm().max(1.0));
        }
    }

    #[test]
    fn delta_topology_cancels_low_order_sum_ripple() {
        let grid = GridConfig::default();
        let params = PlantParams::default();
        let table = seven_angle_table();
        let ratio = |topology| {
            let op = OperatingPoint::rated(table.rows[0].m, &params, &grid).unwrap();
            let refs = references_for(&op, &table, &params, &grid, topology).unwrap();
            let tr = nominal_current_trajectory(&refs, &params, &grid).unwrap();
            let n = 100_000;
            let dt = tr.period() / n as f64;
            let mut h = [Complex64::new(0.0, 0.0); 2];
            for k in 0..n {
                let t = (k as f64 + 0.5) * dt;
                let x = tr.i_sum(t).0;
                h[0] += x * Complex64::from_polar(1.0, 5.0 * grid.omega1() * t);
                h[1] += x * Complex64::from_polar(1.0, -7.0 * grid.omega1() * t);
            }
            h.map(|z| z.norm() / n as f64)
        };
        let delta = ratio(LineTopology::Delta);
        let same = ratio(LineTopology::Identical);
        assert!(same[0] > 1e-2 && same[1] > 1e-2);
        assert!(
            delta[0] <= 1e-6 * same[0] && delta[1] <= 1e-6 * same[1],
            "{delta:?} vs {same:?}"
        );
    }

    #[test]
    fn stream_neighbours() {
        let grid = GridConfig::default();
        let params = PlantParams::default();
        let refs = refs_for(&seven_angle_table(), &grid, &params);
        let tl = Timeline::new(&refs, &grid).unwrap();
        let ev = tl.events_between(0.05, 0.07);
        assert!(ev.windows(2).all(|w| w[0].t <= w[1].t && w[0].id < w[1].id));
        assert_eq!(ev.len(), tl.events().len());
        let e = ev[5];
        let prev = tl.prev_in_stream(e.converter, e.phase, e.t).unwrap();
        let next = tl.next_in_stream(e.converter, e.phase, e.t).unwrap();
        assert!(prev < e.t && next > e.t);
        let between = tl.events_between(prev, next);
        let same: Vec<_> = between
            .iter()
            .filter(|x| x.converter == e.converter && x.phase == e.phase)
            .collect();
        assert_eq!(same.len(), 2);
    }
}
