//! Dual-converter transformer circuit in sum/difference coordinates.
//!
//! Both channels are first-order RL branches:
//!
//! ```text
//! L_t di_sum/dt  = v_sum/2 - v_pcc - R_t i_sum
//! L_s di_diff/dt = v_diff           - R_s i_diff
//! ```
//!
//! Converter voltages are piecewise constant between switching events, and the
//! PCC voltage is a sum of rotating phasors, so every advance is solved in
//! closed form.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::frames::{AlphaBeta, ThreePhase};

/// Transformer equivalent-circuit constants, primary-referred.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantParams {
    rp: f64,
    lp: f64,
    rs: f64,
    ls: f64,
}

impl PlantParams {
    pub fn new(rp: f64, lp: f64, rs: f64, ls: f64) -> Result<Self> {
        for (name, v) in [("rp", rp), ("lp", lp), ("rs", rs), ("ls", ls)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(Self { rp, lp, rs, ls })
    }

    /// Splits published totals as `R_p = R_t/2, R_s = R_t` (same for L).
    pub fn from_totals(rt: f64, lt: f64) -> Result<Self> {
        Self::new(rt / 2.0, lt / 2.0, rt, lt)
    }

    pub fn rp(&self) -> f64 {
        self.rp
    }
    pub fn lp(&self) -> f64 {
        self.lp
    }
    pub fn rs(&self) -> f64 {
        self.rs
    }
    pub fn ls(&self) -> f64 {
        self.ls
    }
    pub fn rt(&self) -> f64 {
        self.rp + self.rs / 2.0
    }
    pub fn lt(&self) -> f64 {
        self.lp + self.ls / 2.0
    }

    pub fn sum_branch(&self) -> RlBranch {
        RlBranch {
            r: self.rt(),
            l: self.lt(),
        }
    }

    pub fn diff_branch(&self) -> RlBranch {
        RlBranch {
            r: self.rs,
            l: self.ls,
        }
    }
}

impl Default for PlantParams {
    fn default() -> Self {
        Self::from_totals(3.1, 0.178).expect("default plant constants are positive")
    }
}

/// A rotating phasor `value · e^{jωt}`; `value` is the phasor at t = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tone {
    pub value: Complex64,
    pub omega: f64,
}

impl Tone {
    pub fn at(&self, t: f64) -> Complex64 {
        self.value * Complex64::from_polar(1.0, self.omega * t)
    }
}

/// Small-signal probe superimposed on the PCC voltage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub freq_hz: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    pub f1: f64,
    pub v_pcc_peak: f64,
    pub phi_ini: f64,
    pub perturbation: Option<Perturbation>,
}

impl GridConfig {
    pub fn new(f1: f64, v_pcc_peak: f64, phi_ini: f64) -> Result<Self> {
        if !(f1 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "f1 must be positive, got {f1}"
            )));
        }
        Ok(Self {
            f1,
            v_pcc_peak,
            phi_ini,
            perturbation: None,
        })
    }

    pub fn with_perturbation(mut self, p: Perturbation) -> Result<Self> {
        if !(p.amplitude >= 0.0) {
            return Err(Error::InvalidParameter(
                "perturbation amplitude must be >= 0".into(),
            ));
        }
        self.perturbation = Some(p);
        Ok(self)
    }

    pub fn omega1(&self) -> f64 {
        2.0 * PI * self.f1
    }

    pub fn period(&self) -> f64 {
        1.0 / self.f1
    }

    /// Ideal grid angle `ω1 t + φ_ini`.
    pub fn angle(&self, t: f64) -> f64 {
        self.omega1() * t + self.phi_ini
    }

    /// Fundamental PCC phasor at t = 0.
    pub fn v_pcc_phasor(&self) -> AlphaBeta {
        AlphaBeta::from_polar(self.v_pcc_peak, self.phi_ini)
    }

    pub fn fundamental_tone(&self) -> Tone {
        Tone {
            value: self.v_pcc_phasor().0,
            omega: self.omega1(),
        }
    }

    pub fn perturbation_tone(&self) -> Option<Tone> {
        self.perturbation.map(|p| Tone {
            value: Complex64::new(p.amplitude, 0.0),
            omega: 2.0 * PI * p.freq_hz,
        })
    }

    pub fn tones(&self) -> impl Iterator<Item = Tone> {
        std::iter::once(self.fundamental_tone()).chain(self.perturbation_tone())
    }

    pub fn v_pcc_nominal(&self, t: f64) -> AlphaBeta {
        AlphaBeta(self.fundamental_tone().at(t))
    }

    pub fn v_pcc(&self, t: f64) -> AlphaBeta {
        AlphaBeta(self.tones().map(|tone| tone.at(t)).sum())
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        // 66 kV line-to-line RMS, phase peak.
        Self {
            f1: 50.0,
            v_pcc_peak: 66e3 * (2.0f64 / 3.0).sqrt(),
            phi_ini: 0.0,
            perturbation: None,
        }
    }
}

/// A series RL branch `L di/dt = u - R i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlBranch {
    pub r: f64,
    pub l: f64,
}

impl RlBranch {
    pub fn admittance(&self, omega: f64) -> Complex64 {
        Complex64::new(self.r, omega * self.l).inv()
    }

    pub fn decay(&self, dt: f64) -> f64 {
        (-self.r * dt / self.l).exp()
    }

    /// Forced response at time `t` to a constant drive plus rotating tones.
    pub fn particular(&self, u_const: Complex64, tones: &[Tone], t: f64) -> Complex64 {
        let mut i = u_const / self.r;
        for tone in tones {
            i += tone.at(t) * self.admittance(tone.omega);
        }
        i
    }

    /// Exact solution over `[t, t+dt)` with the given drive.
    pub fn step(
        &self,
        i: Complex64,
        u_const: Complex64,
        tones: &[Tone],
        t: f64,
        dt: f64,
    ) -> Complex64 {
        let a = self.decay(dt);
        let p0 = self.particular(u_const, tones, t);
        let p1 = self.particular(u_const, tones, t + dt);
        (i - p0) * a + p1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlantState {
    pub t: f64,
    pub i_sum: AlphaBeta,
    pub i_diff: AlphaBeta,
}

impl PlantState {
    pub fn currents(&self) -> (AlphaBeta, AlphaBeta) {
        crate::frames::inverse_sum_diff(self.i_sum, self.i_diff)
    }
}

/// Converter phase voltages from normalized switch positions.
pub fn converter_voltage(u: ThreePhase, vdc: f64) -> Result<ThreePhase> {
    for x in [u.a, u.b, u.c] {
        if !(-1.0..=1.0).contains(&x) {
            return Err(Error::InvalidSwitchPosition(x));
        }
    }
    Ok(u.scale(vdc / 2.0))
}

/// Extra drive terms beyond the piecewise-constant converter voltages.
#[derive(Debug, Clone, Default)]
pub struct ExtraDrive {
    /// Rotating components of `v_sum/2`.
    pub sum_tones: Vec<Tone>,
    /// Rotating components of `v_diff`.
    pub diff_tones: Vec<Tone>,
}

/// Advances the circuit over `[t, t+dt)` with constant converter voltages.
pub fn advance(
    state: &PlantState,
    v_sum: AlphaBeta,
    v_diff: AlphaBeta,
    params: &PlantParams,
    grid: &GridConfig,
    dt: f64,
) -> Result<PlantState> {
    advance_with(
        state,
        v_sum,
        v_diff,
        &ExtraDrive::default(),
        params,
        grid,
        dt,
    )
}

pub fn advance_with(
    state: &PlantState,
    v_sum: AlphaBeta,
    v_diff: AlphaBeta,
    extra: &ExtraDrive,
    params: &PlantParams,
    grid: &GridConfig,
    dt: f64,
) -> Result<PlantState> {
    if !(dt > 0.0) {
        return Err(Error::NonPositiveStep(dt));
    }
    let mut tones: Vec<Tone> = grid
        .tones()
        .map(|t| Tone {
            value: -t.value,
            omega: t.omega,
        })
        .collect();
    tones.extend_from_slice(&extra.sum_tones);
    let i_sum = params
        .sum_branch()
        .step(state.i_sum.0, v_sum.0 * 0.5, &tones, state.t, dt);
    let i_diff =
        params
            .diff_branch()
            .step(state.i_diff.0, v_diff.0, &extra.diff_tones, state.t, dt);
    Ok(PlantState {
        t: state.t + dt,
        i_sum: AlphaBeta(i_sum),
        i_diff: AlphaBeta(i_diff),
    })
}

/// Fundamental sum-current phasor `(v_sum/2 - v_pcc) / (R_t + jω1 L_t)`.
pub fn steady_state_phasor(
    params: &PlantParams,
    v_sum_1: AlphaBeta,
    grid: &GridConfig,
) -> AlphaBeta {
    let drive = v_sum_1 * 0.5 - grid.v_pcc_phasor();
    AlphaBeta(drive.0 * params.sum_branch().admittance(grid.omega1()))
}
