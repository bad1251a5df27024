//! Optimized pulse patterns.
//!
//! A pattern is described by its first quarter period: `d` switching angles in
//! `[0, π/2]`, each with a signed level step. Quarter-wave and half-wave
//! symmetry extend it to a full period, so the phase waveform is
//! `u(θ) = Σ_k b_k sin(kθ)` over odd `k` only, with
//!
//! ```text
//! b_k = 4/(kπ) · Σ_i Δu_i cos(k α_i)
//! ```
//!
//! The synthesis minimizes a current-ripple proxy (non-triplen harmonics
//! weighted by `1/k`, squared) subject to `b_1 = m`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::frames::Phase;
use crate::numfmt::{round9, sig9};

/// Default highest harmonic order in the distortion objective.
pub const DEFAULT_K_MAX: u32 = 49;

const ANGLE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuarterSwitch {
    pub angle: f64,
    pub step: f64,
}

/// One level transition of one phase within a fundamental period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternEvent {
    pub theta: f64,
    pub phase: Phase,
    pub delta_u: f64,
    pub u_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingPattern {
    levels: usize,
    quarter: Vec<QuarterSwitch>,
    events: Vec<PatternEvent>,
}

impl SwitchingPattern {
    pub fn new(levels: usize, quarter: Vec<QuarterSwitch>) -> Result<Self> {
        validate_quarter(levels, &quarter)?;
        let events = expand_pattern(&quarter, levels, 0.0)?;
        Ok(Self {
            levels,
            quarter,
            events,
        })
    }

    pub fn from_parts(levels: usize, angles: &[f64], steps: &[f64]) -> Result<Self> {
        if angles.len() != steps.len() {
            return Err(Error::InvalidParameter(format!(
                "{} angles but {} steps",
                angles.len(),
                steps.len()
            )));
        }
        let quarter = angles
            .iter()
            .zip(steps)
            .map(|(&angle, &step)| QuarterSwitch { angle, step })
            .collect();
        Self::new(levels, quarter)
    }

    /// Pulse number: switching pulses per phase per fundamental period.
    pub fn p(&self) -> usize {
        2 * self.quarter.len()
    }

    pub fn d(&self) -> usize {
        self.quarter.len()
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn quarter(&self) -> &[QuarterSwitch] {
        &self.quarter
    }

    pub fn angles(&self) -> Vec<f64> {
        self.quarter.iter().map(|q| q.angle).collect()
    }

    pub fn steps(&self) -> Vec<f64> {
        self.quarter.iter().map(|q| q.step).collect()
    }

    /// Full-period events of all three phases, sorted by angle.
    pub fn events(&self) -> &[PatternEvent] {
        &self.events
    }

    pub fn fundamental(&self) -> f64 {
        fundamental_amplitude(&self.quarter)
    }
}

fn level_unit(levels: usize) -> f64 {
    2.0 / (levels as f64 - 1.0)
}

fn on_grid(x: f64, unit: f64) -> bool {
    let r = x / unit;
    (r - r.round()).abs() < 1e-9
}

fn validate_quarter(levels: usize, quarter: &[QuarterSwitch]) -> Result<()> {
    if levels < 3 || levels % 2 == 0 {
        return Err(Error::InvalidParameter(format!(
            "levels must be odd and >= 3, got {levels}"
        )));
    }
    let unit = level_unit(levels);
    let mut level = 0.0;
    let mut prev = f64::NEG_INFINITY;
    for (i, q) in quarter.iter().enumerate() {
        if !(q.angle >= 0.0 && q.angle <= FRAC_PI_2) {
            return Err(Error::InvalidParameter(format!(
                "angle {i} = {} outside [0, pi/2]",
                q.angle
            )));
        }
        if q.angle <= prev {
            return Err(Error::InvalidParameter(format!(
                "angles not strictly increasing at index {i}"
            )));
        }
        if q.step == 0.0 || !on_grid(q.step, unit) {
            return Err(Error::InvalidParameter(format!(
                "step {i} = {} is not a level multiple",
                q.step
            )));
        }
        level += q.step;
        if level.abs() > 1.0 + 1e-9 || !on_grid(level, unit) {
            return Err(Error::InvalidParameter(format!(
                "level {level} after step {i} is not admissible"
            )));
        }
        prev = q.angle;
    }
    Ok(())
}

pub fn harmonic_amplitude(quarter: &[QuarterSwitch], k: u32) -> Result<f64> {
    if k % 2 == 0 {
        return Err(Error::EvenHarmonic(k));
    }
    Ok(harmonic_unchecked(quarter, k))
}

fn harmonic_unchecked(quarter: &[QuarterSwitch], k: u32) -> f64 {
    let kf = k as f64;
    let s: f64 = quarter.iter().map(|q| q.step * (kf * q.angle).cos()).sum();
    4.0 / (kf * PI) * s
}

/// Per-unit fundamental `b_1`; the phase voltage fundamental peak is `(v_dc/2)·b_1`.
pub fn fundamental_amplitude(quarter: &[QuarterSwitch]) -> f64 {
    harmonic_unchecked(quarter, 1)
}

/// Harmonic orders entering the distortion objective: odd, non-triplen, ≥ 5.
pub fn objective_orders(k_max: u32) -> impl Iterator<Item = u32> {
    (5..=k_max).step_by(2).filter(|k| k % 3 != 0)
}

/// `J = Σ (b_k / k)²` over [`objective_orders`].
pub fn distortion_objective(quarter: &[QuarterSwitch], k_max: u32) -> f64 {
    objective_orders(k_max)
        .map(|k| {
            let b = harmonic_unchecked(quarter, k) / k as f64;
            b * b
        })
        .sum()
}

fn wrap_angle(x: f64) -> f64 {
    let y = x.rem_euclid(2.0 * PI);
    if 2.0 * PI - y < ANGLE_EPS {
        0.0
    } else {
        y
    }
}

/// Extends a quarter-wave description to the full-period events of all three
/// phases. Phase `x` follows `u(θ + offset_x + phase_shift)` with offsets
/// 0, −2π/3, −4π/3, so a positive `phase_shift` advances every waveform.
pub fn expand_pattern(
    quarter: &[QuarterSwitch],
    levels: usize,
    phase_shift: f64,
) -> Result<Vec<PatternEvent>> {
    validate_quarter(levels, quarter)?;
    let mut base: Vec<(f64, f64)> = Vec::with_capacity(4 * quarter.len());
    base.extend(quarter.iter().map(|q| (q.angle, q.step)));
    base.extend(quarter.iter().rev().map(|q| (PI - q.angle, -q.step)));
    base.extend(quarter.iter().map(|q| (PI + q.angle, -q.step)));
    base.extend(quarter.iter().rev().map(|q| (2.0 * PI - q.angle, q.step)));

    let unit = level_unit(levels);
    let mut events = Vec::with_capacity(3 * base.len());
    for phase in Phase::ALL {
        let shift = phase.offset() + phase_shift;
        let mut raw: Vec<(f64, f64)> = base
            .iter()
            .map(|&(th, du)| (wrap_angle(th - shift), du))
            .collect();
        raw.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(raw.len());
        for (th, du) in raw {
            match merged.last_mut() {
                Some(last) if (th - last.0).abs() < ANGLE_EPS => last.1 += du,
                _ => merged.push((th, du)),
            }
        }
        // a wrap-around pair at 0 and 2π merges too
        if merged.len() > 1 {
            let last = merged[merged.len() - 1];
            if 2.0 * PI - last.0 < ANGLE_EPS {
                merged.pop();
                merged[0].1 += last.1;
            }
        }
        merged.retain(|&(_, du)| du.abs() > 1e-12);

        // The running profile is fixed up to a constant; half-wave symmetry
        // forces a zero mean.
        let mut level = 0.0;
        let mut integral = 0.0;
        let mut prev_th = 0.0;
        for &(th, du) in &merged {
            integral += level * (th - prev_th);
            level += du;
            prev_th = th;
        }
        integral += level * (2.0 * PI - prev_th);
        if level.abs() > 1e-9 {
            return Err(Error::NonPeriodic {
                phase: phase.index(),
                net: level,
            });
        }
        let start = -(integral / (2.0 * PI));
        let start = (start / unit).round() * unit;
        let mut level = start;
        for (th, du) in merged {
            level += du;
            events.push(PatternEvent {
                theta: th,
                phase,
                delta_u: du,
                u_after: level,
            });
        }
    }
    events.sort_by(|a, b| a.theta.total_cmp(&b.theta).then(a.phase.cmp(&b.phase)));
    Ok(events)
}

/// Level of `phase` just after angle `theta`, from a sorted event list.
pub fn level_at(events: &[PatternEvent], phase: Phase, theta: f64) -> f64 {
    let mine: Vec<&PatternEvent> = events.iter().filter(|e| e.phase == phase).collect();
    let Some(last) = mine.last() else { return 0.0 };
    let theta = wrap_angle(theta);
    mine.iter()
        .rev()
        .find(|e| e.theta <= theta)
        .map_or(last.u_after, |e| e.u_after)
}

/// Step signs for `d` quarter-wave angles on a `levels`-level converter.
///
/// Three-level patterns alternate `+1, −1, …`. Multilevel patterns climb a
/// staircase and spend the remaining transitions on dips between adjacent
/// levels.
pub fn step_sequence(d: usize, levels: usize) -> Result<Vec<f64>> {
    if levels < 3 || levels % 2 == 0 {
        return Err(Error::InvalidParameter(format!(
            "levels must be odd and >= 3, got {levels}"
        )));
    }
    if d == 0 {
        return Err(Error::InvalidParameter(
            "need at least one angle per quarter".into(),
        ));
    }
    let n = (levels - 1) / 2;
    let unit = 1.0 / n as f64;
    if d < n {
        return Ok(vec![unit; d]);
    }
    let top = if (d - n) % 2 == 0 { n } else { n - 1 };
    let pairs = (d - top) / 2;
    let mut seq = Vec::with_capacity(d);
    if top < n {
        for _ in 0..top {
            seq.push(unit);
        }
        for _ in 0..pairs {
            seq.push(unit);
            seq.push(-unit);
        }
    } else {
        for j in 0..top {
            seq.push(unit);
            let here = pairs / top + usize::from(j < pairs % top);
            for _ in 0..here {
                seq.push(-unit);
                seq.push(unit);
            }
        }
    }
    Ok(seq)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub k_max: u32,
    pub starts: usize,
    pub seed: u64,
    /// Minimum spacing between angles and from the quarter-period bounds.
    pub margin: f64,
    pub max_iter: usize,
    pub exec: Execution,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            k_max: DEFAULT_K_MAX,
            starts: 32,
            seed: 0x4D50_3343,
            margin: 1e-4,
            max_iter: 4000,
            exec: Execution::default(),
        }
    }
}

/// A local optimum of the constrained synthesis problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub angles: Vec<f64>,
    pub objective: f64,
}

struct Problem<'a> {
    signs: &'a [f64],
    m: f64,
    k_max: u32,
    lo: f64,
    hi: f64,
    margin: f64,
}

impl Problem<'_> {
    fn b1(&self, a: &[f64]) -> f64 {
        4.0 / PI
            * a.iter()
                .zip(self.signs)
                .map(|(x, s)| s * x.cos())
                .sum::<f64>()
    }

    fn b1_grad(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.signs)
            .map(|(x, s)| -4.0 / PI * s * x.sin())
            .collect()
    }

    fn objective(&self, a: &[f64]) -> f64 {
        objective_orders(self.k_max)
            .map(|k| {
                let kf = k as f64;
                let b = 4.0 / (kf * PI)
                    * a.iter()
                        .zip(self.signs)
                        .map(|(x, s)| s * (kf * x).cos())
                        .sum::<f64>()
                    / kf;
                b * b
            })
            .sum()
    }

    fn objective_grad(&self, a: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; a.len()];
        for k in objective_orders(self.k_max) {
            let kf = k as f64;
            let c = 4.0 / (kf * PI) / kf;
            let b = c * a
                .iter()
                .zip(self.signs)
                .map(|(x, s)| s * (kf * x).cos())
                .sum::<f64>();
            for (gi, (x, s)) in g.iter_mut().zip(a.iter().zip(self.signs)) {
                *gi += 2.0 * b * c * (-s * kf * (kf * x).sin());
            }
        }
        g
    }

    /// Euclidean projection onto the ordered box with minimum spacing.
    fn project(&self, a: &mut [f64]) {
        let d = a.len();
        let upper = self.hi - (d as f64 - 1.0) * self.margin;
        let mut beta: Vec<f64> = a
            .iter()
            .enumerate()
            .map(|(i, x)| x - i as f64 * self.margin)
            .collect();
        isotonic(&mut beta);
        for (i, (x, b)) in a.iter_mut().zip(beta).enumerate() {
            *x = b.clamp(self.lo, upper) + i as f64 * self.margin;
        }
    }

    /// Returns to the constraint surface `b1 = m` inside the ordered box.
    fn restore(&self, a: &mut [f64]) -> bool {
        for _ in 0..80 {
            self.project(a);
            let g = self.b1(a) - self.m;
            if g.abs() < 1e-13 {
                return true;
            }
            let n = self.b1_grad(a);
            let nn: f64 = n.iter().map(|x| x * x).sum();
            if nn < 1e-30 {
                return false;
            }
            let mut t = -g / nn;
            let reach = n.iter().fold(0.0f64, |acc, x| acc.max(x.abs())) * t.abs();
            if reach > 0.2 {
                t *= 0.2 / reach;
            }
            for (x, ni) in a.iter_mut().zip(&n) {
                *x += t * ni;
            }
        }
        self.project(a);
        (self.b1(a) - self.m).abs() < 1e-12
    }

    fn local_search(&self, start: &[f64], max_iter: usize) -> Option<Candidate> {
        let mut a = start.to_vec();
        if !self.restore(&mut a) {
            return None;
        }
        let mut j = self.objective(&a);
        let mut step = 0.02;
        'outer: for _ in 0..max_iter {
            let g = self.objective_grad(&a);
            let n = self.b1_grad(&a);
            let nn: f64 = n.iter().map(|x| x * x).sum();
            let gn: f64 = g.iter().zip(&n).map(|(x, y)| x * y).sum();
            let gt: Vec<f64> = g.iter().zip(&n).map(|(x, y)| x - gn / nn * y).collect();
            let norm = gt.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-16 {
                break;
            }
            loop {
                let mut trial: Vec<f64> = a
                    .iter()
                    .zip(&gt)
                    .map(|(x, g)| x - step * g / norm)
                    .collect();
                if self.restore(&mut trial) {
                    let jt = self.objective(&trial);
                    if jt <= j - 1e-4 * step * norm {
                        a = trial;
                        j = jt;
                        step = (step * 1.6).min(0.2);
                        break;
                    }
                }
                step *= 0.5;
                if step < 1e-13 {
                    break 'outer;
                }
            }
        }
        Some(Candidate {
            angles: a,
            objective: j,
        })
    }
}

/// Pool-adjacent-violators: least-squares nondecreasing fit, in place.
fn isotonic(x: &mut [f64]) {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(x.len());
    for &v in x.iter() {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, n2) = blocks[blocks.len() - 1];
            let (m1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let n = n1 + n2;
            *blocks.last_mut().unwrap() = ((m1 * n1 as f64 + m2 * n2 as f64) / n as f64, n);
        }
    }
    let mut i = 0;
    for (m, n) in blocks {
        for v in &mut x[i..i + n] {
            *v = m;
        }
        i += n;
    }
}

/// Range of `b_1` reachable with the given step signs inside the ordered box.
pub fn attainable_range(signs: &[f64], margin: f64) -> (f64, f64) {
    let d = signs.len();
    let lo = margin;
    let hi = FRAC_PI_2 - margin;
    let mut best = (f64::INFINITY, f64::NEG_INFINITY);
    // Extremes cluster the first `j` angles at the lower bound and the rest at
    // the upper bound.
    for j in 0..=d {
        let b: f64 = signs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let a = if i < j {
                    lo + i as f64 * margin
                } else {
                    hi - (d - 1 - i) as f64 * margin
                };
                s * a.cos()
            })
            .sum::<f64>()
            * 4.0
            / PI;
        best.0 = best.0.min(b);
        best.1 = best.1.max(b);
    }
    best
}

fn seeds(d: usize, m: f64, signs: &[f64], cfg: &OptimizerConfig) -> Vec<Vec<f64>> {
    let lo = cfg.margin;
    let hi = FRAC_PI_2 - cfg.margin;
    let mut out = Vec::with_capacity(cfg.starts.max(2));
    out.push(
        (0..d)
            .map(|i| lo + (i as f64 + 0.5) * (hi - lo) / d as f64)
            .collect(),
    );

    // nearest-level staircase: each step sits where m·sin θ crosses the
    // midpoint of the two levels it connects
    let mut level = 0.0;
    let mut stair: Vec<f64> = signs
        .iter()
        .map(|s| {
            let mid = level + s / 2.0;
            level += s;
            (mid.abs() / m.max(1e-6)).min(1.0).asin()
        })
        .collect();
    stair.sort_by(f64::total_cmp);
    out.push(stair);

    let mut rng =
        ChaCha8Rng::seed_from_u64(cfg.seed ^ ((d as u64) << 32) ^ m.to_bits().rotate_left(17));
    while out.len() < cfg.starts.max(2) {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(lo..hi)).collect();
        v.sort_by(f64::total_cmp);
        out.push(v);
    }
    out
}

fn sort_candidates(c: &mut Vec<Candidate>) {
    c.sort_by(|a, b| {
        let tie = 1e-12 * a.objective.abs().max(b.objective.abs());
        if (a.objective - b.objective).abs() <= tie {
            a.angles
                .iter()
                .zip(&b.angles)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        } else {
            a.objective.total_cmp(&b.objective)
        }
    });
    c.dedup_by(|a, b| {
        a.angles
            .iter()
            .zip(&b.angles)
            .all(|(x, y)| (x - y).abs() < 1e-4)
    });
}

fn check_feasible(signs: &[f64], m: f64, margin: f64) -> Result<()> {
    let (min, max) = attainable_range(signs, margin);
    if !(m > min && m < max) {
        return Err(Error::Infeasible {
            requested: m,
            min,
            max,
        });
    }
    Ok(())
}

/// All distinct local optima found from the start lattice, best first.
pub fn optimize_candidates(
    d: usize,
    m: f64,
    levels: usize,
    cfg: &OptimizerConfig,
) -> Result<Vec<Candidate>> {
    let signs = step_sequence(d, levels)?;
    check_feasible(&signs, m, cfg.margin)?;
    let problem = Problem {
        signs: &signs,
        m,
        k_max: cfg.k_max,
        lo: cfg.margin,
        hi: FRAC_PI_2 - cfg.margin,
        margin: cfg.margin,
    };
    let starts = seeds(d, m, &signs, cfg);
    let mut found: Vec<Candidate> =
        exec::map(&starts, cfg.exec, |s| problem.local_search(s, cfg.max_iter))
            .into_iter()
            .flatten()
            .collect();
    sort_candidates(&mut found);
    if found.is_empty() {
        let (min, max) = attainable_range(&signs, cfg.margin);
        return Err(Error::Infeasible {
            requested: m,
            min,
            max,
        });
    }
    Ok(found)
}

/// Best quarter-wave angles for `d` angles at modulation index `m`.
pub fn optimize(
    d: usize,
    m: f64,
    levels: usize,
    cfg: &OptimizerConfig,
) -> Result<Vec<QuarterSwitch>> {
    let signs = step_sequence(d, levels)?;
    let best = optimize_candidates(d, m, levels, cfg)?.swap_remove(0);
    Ok(best
        .angles
        .into_iter()
        .zip(signs)
        .map(|(angle, step)| QuarterSwitch { angle, step })
        .collect())
}

/// Local refinement from a given start (used for warm-started table rows).
pub fn refine(start: &[f64], m: f64, levels: usize, cfg: &OptimizerConfig) -> Result<Candidate> {
    let signs = step_sequence(start.len(), levels)?;
    check_feasible(&signs, m, cfg.margin)?;
    let problem = Problem {
        signs: &signs,
        m,
        k_max: cfg.k_max,
        lo: cfg.margin,
        hi: FRAC_PI_2 - cfg.margin,
        margin: cfg.margin,
    };
    problem.local_search(start, cfg.max_iter).ok_or_else(|| {
        let (min, max) = attainable_range(&signs, cfg.margin);
        Error::Infeasible {
            requested: m,
            min,
            max,
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub m: f64,
    pub pattern: SwitchingPattern,
}

/// Optimized patterns over a modulation-index grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternTable {
    pub p: usize,
    pub levels: usize,
    pub d: usize,
    pub rows: Vec<TableRow>,
}

impl PatternTable {
    pub fn new(d: usize, levels: usize, rows: Vec<TableRow>) -> Result<Self> {
        for w in rows.windows(2) {
            if !(w[1].m > w[0].m) {
                return Err(Error::InvalidParameter(
                    "table rows must have strictly increasing m".into(),
                ));
            }
        }
        for r in &rows {
            if r.pattern.d() != d || r.pattern.levels() != levels {
                return Err(Error::InvalidParameter(format!(
                    "row at m = {} does not match d = {d}, levels = {levels}",
                    r.m
                )));
            }
        }
        Ok(Self {
            p: 2 * d,
            levels,
            d,
            rows,
        })
    }

    pub fn m_range(&self) -> Option<(f64, f64)> {
        Some((self.rows.first()?.m, self.rows.last()?.m))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("p={} levels={} d={}\n", self.p, self.levels, self.d);
        for row in &self.rows {
            let angles: Vec<String> = row
                .pattern
                .quarter()
                .iter()
                .map(|q| sig9(q.angle))
                .collect();
            let steps: Vec<String> = row
                .pattern
                .quarter()
                .iter()
                .map(|q| format_step(q.step))
                .collect();
            let _ = writeln!(
                s,
                "{};{};{}",
                sig9(row.m),
                angles.join(","),
                steps.join(",")
            );
        }
        s
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty pattern table".into()))??;
        let (mut p, mut levels, mut d) = (None, None, None);
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad header field `{field}`")))?;
            let value: usize = value
                .parse()
                .map_err(|_| Error::Parse(format!("bad header value `{field}`")))?;
            match key {
                "p" => p = Some(value),
                "levels" => levels = Some(value),
                "d" => d = Some(value),
                _ => return Err(Error::Parse(format!("unknown header key `{key}`"))),
            }
        }
        let (Some(p), Some(levels), Some(d)) = (p, levels, d) else {
            return Err(Error::Parse("header needs p, levels and d".into()));
        };
        if p != 2 * d {
            return Err(Error::Parse(format!(
                "header p = {p} inconsistent with d = {d}"
            )));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(';').collect();
            if parts.len() != 3 {
                return Err(Error::Parse(format!(
                    "row {}: expected `m;angles;signs`",
                    n + 1
                )));
            }
            let m = parse_f64(parts[0], n)?;
            let angles = parts[1]
                .split(',')
                .map(|s| parse_f64(s, n))
                .collect::<Result<Vec<_>>>()?;
            let steps = parts[2]
                .split(',')
                .map(|s| parse_f64(s, n))
                .collect::<Result<Vec<_>>>()?;
            if angles.len() != d {
                return Err(Error::Parse(format!(
                    "row {}: {} angles, header says d = {d}",
                    n + 1,
                    angles.len()
                )));
            }
            rows.push(TableRow {
                m,
                pattern: SwitchingPattern::from_parts(levels, &angles, &steps)?,
            });
        }
        Self::new(d, levels, rows)
    }

    pub fn from_text(s: &str) -> Result<Self> {
        Self::read_from(s.as_bytes())
    }
}

fn parse_f64(s: &str, row: usize) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("row {}: bad number `{s}`", row + 1)))
}

fn format_step(step: f64) -> String {
    if step > 0.0 {
        format!("+{}", sig9(step))
    } else {
        sig9(step)
    }
}

fn quantized(angles: &[f64], signs: &[f64], levels: usize) -> Result<SwitchingPattern> {
    let angles: Vec<f64> = angles.iter().map(|&a| round9(a)).collect();
    SwitchingPattern::from_parts(levels, &angles, signs)
}

/// One optimized pattern per grid point, warm-started along the grid.
pub fn build_table(
    d: usize,
    levels: usize,
    m_grid: &[f64],
    cfg: &OptimizerConfig,
) -> Result<PatternTable> {
    build_table_variant(d, levels, m_grid, cfg, 0)
}

/// Like [`build_table`], but seeds the first row from the `variant`-th best
/// local optimum, which yields distinct pattern families with the same pulse
/// number.
pub fn build_table_variant(
    d: usize,
    levels: usize,
    m_grid: &[f64],
    cfg: &OptimizerConfig,
    variant: usize,
) -> Result<PatternTable> {
    for w in m_grid.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::InvalidParameter(
                "m grid must be strictly increasing".into(),
            ));
        }
    }
    let signs = step_sequence(d, levels)?;
    let mut rows = Vec::with_capacity(m_grid.len());
    let mut prev: Option<Vec<f64>> = None;
    for &m in m_grid {
        let m = round9(m);
        let angles = match &prev {
            None => {
                let mut c = optimize_candidates(d, m, levels, cfg)?;
                if variant >= c.len() {
                    return Err(Error::InvalidParameter(format!(
                        "variant {variant} requested but only {} distinct optima found",
                        c.len()
                    )));
                }
                c.swap_remove(variant).angles
            }
            Some(start) => refine(start, m, levels, cfg)?.angles,
        };
        let pattern = quantized(&angles, &signs, levels)?;
        prev = Some(pattern.angles());
        rows.push(TableRow { m, pattern });
    }
    PatternTable::new(d, levels, rows)
}

/// Pattern for modulation index `m`, interpolating between bracketing rows.
pub fn load_pattern(table: &PatternTable, m: f64) -> Result<SwitchingPattern> {
    let (lo, hi) = table.m_range().ok_or(Error::OutOfRange {
        m,
        lo: f64::NAN,
        hi: f64::NAN,
    })?;
    let tol = 1e-9 * m.abs().max(1.0);
    if let Some(row) = table.rows.iter().find(|r| (r.m - m).abs() <= tol) {
        return Ok(row.pattern.clone());
    }
    if !(m > lo && m < hi) {
        return Err(Error::OutOfRange { m, lo, hi });
    }
    let upper = table
        .rows
        .iter()
        .position(|r| r.m > m)
        .expect("m below the last row");
    let (a, b) = (&table.rows[upper - 1], &table.rows[upper]);
    if a.pattern.steps() != b.pattern.steps() {
        return Err(Error::IncompatibleRows(format!(
            "step signs differ between m = {} and m = {}",
            a.m, b.m
        )));
    }
    let w = (m - a.m) / (b.m - a.m);
    let angles: Vec<f64> = a
        .pattern
        .angles()
        .iter()
        .zip(b.pattern.angles())
        .map(|(x, y)| x + w * (y - x))
        .collect();
    SwitchingPattern::from_parts(table.levels, &angles, &a.pattern.steps())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn q(angles: &[f64], steps: &[f64]) -> Vec<QuarterSwitch> {
        angles
            .iter()
            .zip(steps)
            .map(|(&angle, &step)| QuarterSwitch { angle, step })
            .collect()
    }

    /// Fourier sine coefficient of one phase from its event list, integrated
    /// exactly segment by segment.
    fn fourier_from_events(events: &[PatternEvent], phase: Phase, k: u32) -> f64 {
        let mine: Vec<&PatternEvent> = events.iter().filter(|e| e.phase == phase).collect();
        let kf = k as f64;
        let mut level = mine.last().unwrap().u_after;
        let mut prev = 0.0;
        let mut acc = 0.0;
        let seg = |u: f64, a: f64, b: f64| u * ((kf * a).cos() - (kf * b).cos()) / kf;
        for e in &mine {
            acc += seg(level, prev, e.theta);
            level = e.u_after;
            prev = e.theta;
        }
        acc += seg(level, prev, 2.0 * PI);
        acc / PI
    }

    /// Midpoint-rule quadrature of the quarter-wave waveform itself.
    fn fourier_quadrature(quarter: &[QuarterSwitch], k: u32) -> f64 {
        let n = 400_000;
        let h = FRAC_PI_2 / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let th = (i as f64 + 0.5) * h;
            let u: f64 = quarter
                .iter()
                .filter(|s| s.angle <= th)
                .map(|s| s.step)
                .sum();
            acc += u * (k as f64 * th).sin() * h;
        }
        4.0 / PI * acc
    }

    #[test]
    fn fundamental_examples() {
        assert_relative_eq!(
            fundamental_amplitude(&q(&[0.0], &[1.0])),
            4.0 / PI,
            epsilon = 1e-15
        );
        let one = q(&[PI / 3.0], &[1.0]);
        assert_relative_eq!(
            fundamental_amplitude(&one),
            0.636_619_772_367_581_3,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            fourier_quadrature(&one, 1),
            0.636_619_772_367_581_3,
            epsilon = 1e-5
        );
        let two = q(&[PI / 6.0, FRAC_PI_2], &[1.0, -1.0]);
        assert_relative_eq!(
            fundamental_amplitude(&two),
            1.102_657_790_843_585_5,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            fourier_quadrature(&two, 1),
            1.102_657_790_843_585_5,
            epsilon = 1e-5
        );
    }

    #[test]
    fn harmonic_examples() {
        let sq = q(&[0.0], &[1.0]);
        assert_relative_eq!(
            harmonic_amplitude(&sq, 3).unwrap(),
            4.0 / (3.0 * PI),
            epsilon = 1e-15
        );
        assert_relative_eq!(
            harmonic_amplitude(&sq, 5).unwrap(),
            4.0 / (5.0 * PI),
            epsilon = 1e-15
        );
        assert!(matches!(
            harmonic_amplitude(&sq, 4),
            Err(Error::EvenHarmonic(4))
        ));
    }

    #[test]
    fn square_wave_objective() {
        // 16/π² · (5⁻⁴ + 7⁻⁴ + 11⁻⁴ + 13⁻⁴)
        let expected = 16.0 / (PI * PI)
            * [5.0f64, 7.0, 11.0, 13.0]
                .iter()
                .map(|k| k.powi(-4))
                .sum::<f64>();
        assert_relative_eq!(expected, 3.436_502e-3, max_relative = 1e-6);
        assert_relative_eq!(
            distortion_objective(&q(&[0.0], &[1.0]), 13),
            expected,
            max_relative = 1e-9
        );
        assert_eq!(distortion_objective(&[], 99), 0.0);
    }

    #[test]
    fn square_wave_expansion() {
        let ev = expand_pattern(&q(&[0.0], &[1.0]), 3, 0.0).unwrap();
        let a: Vec<&PatternEvent> = ev.iter().filter(|e| e.phase == Phase::A).collect();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].theta, 0.0);
        assert_eq!(a[0].u_after, 1.0);
        assert_relative_eq!(a[1].theta, PI);
        assert_eq!(a[1].u_after, -1.0);
        let b: Vec<&PatternEvent> = ev.iter().filter(|e| e.phase == Phase::B).collect();
        assert_relative_eq!(b[0].theta, 2.0 * PI / 3.0, epsilon = 1e-12);
        assert_eq!(b[0].u_after, 1.0);
    }

    #[test]
    fn expansion_counts_and_shift() {
        let angles = [0.1, 0.25, 0.4, 0.6, 0.9, 1.1, 1.4];
        let quarter = q(&angles, &step_sequence(7, 3).unwrap());
        let pat = SwitchingPattern::new(3, quarter.clone()).unwrap();
        assert_eq!(pat.p(), 14);
        for ph in Phase::ALL {
            let n = pat.events().iter().filter(|e| e.phase == ph).count();
            assert_eq!(n, 2 * pat.p());
        }
        // device switching frequency p·f1/2 at 50 Hz
        assert_eq!(pat.p() as f64 * 50.0 / 2.0, 350.0);

        let shifted = expand_pattern(&quarter, 3, PI / 6.0).unwrap();
        let mut want: Vec<f64> = pat
            .events()
            .iter()
            .map(|e| wrap_angle(e.theta - PI / 6.0))
            .collect();
        let mut got: Vec<f64> = shifted.iter().map(|e| e.theta).collect();
        want.sort_by(f64::total_cmp);
        got.sort_by(f64::total_cmp);
        for (w, g) in want.iter().zip(&got) {
            assert!((w - g).abs() < 1e-12);
        }
    }

    #[test]
    fn expansion_reproduces_harmonics() {
        let angles = [0.11, 0.27, 0.43, 0.61, 0.88, 1.12, 1.37];
        let quarter = q(&angles, &step_sequence(7, 3).unwrap());
        let ev = expand_pattern(&quarter, 3, 0.0).unwrap();
        for k in (1..=25).step_by(2) {
            let direct = harmonic_amplitude(&quarter, k).unwrap();
            let oracle = fourier_from_events(&ev, Phase::A, k);
            assert!(
                (direct - oracle).abs() < 1e-9,
                "k = {k}: {direct} vs {oracle}"
            );
        }
        for k in (2..=24).step_by(2) {
            assert!(fourier_from_events(&ev, Phase::A, k).abs() < 1e-9);
        }
    }

    #[test]
    fn step_sequences() {
        assert_eq!(step_sequence(3, 3).unwrap(), vec![1.0, -1.0, 1.0]);
        assert_eq!(step_sequence(2, 3).unwrap(), vec![1.0, -1.0]);
        let s = step_sequence(28, 9).unwrap();
        assert_eq!(s.len(), 28);
        let mut level = 0.0;
        for x in &s {
            level += x;
            assert!((-1e-12..=1.0 + 1e-12).contains(&level));
        }
        assert!((level - 1.0).abs() < 1e-12);
        assert!(step_sequence(3, 4).is_err());
    }

    #[test]
    fn single_angle_closed_form() {
        let cfg = OptimizerConfig {
            starts: 4,
            ..Default::default()
        };
        let a = optimize(1, 1.0, 3, &cfg).unwrap();
        assert_relative_eq!(a[0].angle, (PI / 4.0).acos(), epsilon = 1e-9);
        assert_relative_eq!(a[0].angle, 0.667_457_216_2, epsilon = 1e-9);
    }

    #[test]
    fn infeasible_modulation_reports_bound() {
        let err = optimize(1, 1.4, 3, &OptimizerConfig::default()).unwrap_err();
        match err {
            Error::Infeasible { requested, max, .. } => {
                assert_eq!(requested, 1.4);
                assert!((max - 4.0 / PI).abs() < 1e-6);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn two_angle_optimum_matches_grid_search() {
        let m = 0.9;
        let cfg = OptimizerConfig::default();
        let best = optimize(2, m, 3, &cfg).unwrap();
        let j_opt = distortion_objective(&best, cfg.k_max);
        assert!((fundamental_amplitude(&best) - m).abs() < 1e-6);

        // exhaustive 1 mrad scan of α1; α2 follows from the constraint
        let target = m * PI / 4.0;
        let mut j_grid = f64::INFINITY;
        let mut a1 = cfg.margin;
        while a1 < FRAC_PI_2 {
            let c2 = a1.cos() - target;
            if (-1.0..=1.0).contains(&c2) {
                let a2 = c2.acos();
                if a2 > a1 + cfg.margin && a2 < FRAC_PI_2 - cfg.margin {
                    j_grid =
                        j_grid.min(distortion_objective(&q(&[a1, a2], &[1.0, -1.0]), cfg.k_max));
                }
            }
            a1 += 1e-3;
        }
        assert!(
            (j_opt - j_grid).abs() < 1e-5,
            "optimizer {j_opt} vs grid {j_grid}"
        );
        assert!(j_opt <= j_grid + 1e-9);
    }

    #[test]
    fn table_rows_meet_constraint_and_roundtrip() {
        let cfg = OptimizerConfig {
            starts: 12,
            ..Default::default()
        };
        let table = build_table(7, 3, &[0.9, 0.95, 1.0], &cfg).unwrap();
        assert_eq!(table.rows.len(), 3);
        for row in &table.rows {
            assert!((row.pattern.fundamental() - row.m).abs() < 1e-6);
        }
        let text = table.to_text();
        let back = PatternTable::from_text(&text).unwrap();
        assert_eq!(back, table);
        assert_eq!(back.to_text(), text);
        assert_eq!(load_pattern(&table, 0.95).unwrap(), table.rows[1].pattern);
    }

    #[test]
    fn empty_table() {
        let t = build_table(7, 3, &[], &OptimizerConfig::default()).unwrap();
        assert!(t.rows.is_empty());
        assert_eq!(t.to_text(), "p=14 levels=3 d=7\n");
        assert!(load_pattern(&t, 0.9).is_err());
    }

    #[test]
    fn load_pattern_interpolates_midpoint() {
        let steps = [1.0, -1.0, 1.0];
        let rows = vec![
            TableRow {
                m: 0.9,
                pattern: SwitchingPattern::from_parts(3, &[0.2, 0.5, 0.8], &steps).unwrap(),
            },
            TableRow {
                m: 1.0,
                pattern: SwitchingPattern::from_parts(3, &[0.3, 0.6, 0.9], &steps).unwrap(),
            },
        ];
        let t = PatternTable::new(3, 3, rows).unwrap();
        let mid = load_pattern(&t, 0.95).unwrap();
        for (a, b) in mid.angles().iter().zip([0.25, 0.55, 0.85]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(
            load_pattern(&t, 0.85),
            Err(Error::OutOfRange { .. })
        ));
        assert!(matches!(
            load_pattern(&t, 1.05),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn incompatible_rows_are_rejected() {
        let rows = vec![
            TableRow {
                m: 0.9,
                pattern: SwitchingPattern::from_parts(5, &[0.2, 0.5], &[0.5, 0.5]).unwrap(),
            },
            TableRow {
                m: 1.0,
                pattern: SwitchingPattern::from_parts(5, &[0.3, 0.6], &[0.5, -0.5]).unwrap(),
            },
        ];
        let t = PatternTable::new(2, 5, rows).unwrap();
        assert!(matches!(
            load_pattern(&t, 0.95),
            Err(Error::IncompatibleRows(_))
        ));
    }

    #[test]
    fn rejects_bad_quarter_descriptions() {
        assert!(SwitchingPattern::from_parts(3, &[0.5, 0.4], &[1.0, -1.0]).is_err());
        assert!(SwitchingPattern::from_parts(3, &[0.2, 0.4], &[1.0, 1.0]).is_err());
        assert!(SwitchingPattern::from_parts(3, &[0.2, 1.7], &[1.0, -1.0]).is_err());
        assert!(SwitchingPattern::from_parts(9, &[0.2], &[0.3]).is_err());
    }

    #[test]
    fn multilevel_pattern_structure() {
        let signs = step_sequence(8, 9).unwrap();
        let angles: Vec<f64> = (0..8).map(|i| 0.05 + 0.18 * i as f64).collect();
        let pat = SwitchingPattern::from_parts(9, &angles, &signs).unwrap();
        for ph in Phase::ALL {
            let net: f64 = pat
                .events()
                .iter()
                .filter(|e| e.phase == ph)
                .map(|e| e.delta_u)
                .sum();
            assert!(net.abs() < 1e-12);
        }
        for e in pat.events() {
            let r = e.u_after * 4.0;
            assert!((r - r.round()).abs() < 1e-9 && e.u_after.abs() <= 1.0 + 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn expanded_patterns_are_balanced(raw in proptest::collection::vec(0.001f64..1.569, 1..9)) {
            let mut angles = raw.clone();
            angles.sort_by(f64::total_cmp);
            angles.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
            let steps = step_sequence(angles.len(), 3).unwrap();
            let pat = SwitchingPattern::from_parts(3, &angles, &steps).unwrap();
            for ph in Phase::ALL {
                let mine: Vec<&PatternEvent> = pat.events().iter().filter(|e| e.phase == ph).collect();
                let net: f64 = mine.iter().map(|e| e.delta_u).sum();
                prop_assert!(net.abs() < 1e-12);
                // zero mean over the period
                let mut level = mine.last().unwrap().u_after;
                let mut prev = 0.0;
                let mut integral = 0.0;
                for e in &mine {
                    integral += level * (e.theta - prev);
                    level = e.u_after;
                    prev = e.theta;
                }
                integral += level * (2.0 * PI - prev);
                prop_assert!(integral.abs() < 1e-9);
                for w in mine.windows(2) {
                    prop_assert!(w[0].theta <= w[1].theta);
                }
            }
            for k in [2u32, 4, 10] {
                prop_assert!(fourier_from_events(pat.events(), Phase::A, k).abs() < 1e-9);
            }
        }
    }
}
