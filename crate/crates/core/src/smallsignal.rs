//! Linearized converter impedance.
//!
//! The pattern controller is modeled as a proportional gain `K` followed by a
//! zero-order hold and one sampling period of computational delay. The
//! effective impedance seen from the PCC is
//!
//! ```text
//!           K(s)·H_al(s) + R_t + s·L_t
//! Z(s) = --------------------------------
//!          1 − H_pcc(s − jω1)·H_al(s)
//! ```
//!
//! All blocks are evaluated pointwise, so the delay stays exact.

use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::mp3c::{ControlMode, ControllerConfig, FilterConfig};
use crate::numfmt::sig9;
use crate::plant::PlantParams;

/// Proportional gain whose 10–90 % rise time equals the horizon `2/(f1·p)`.
pub fn k_gain(p: usize, f1: f64, lt: f64) -> f64 {
    f1 * p as f64 / 2.0 * lt * 9f64.ln()
}

pub fn f_zoh(s: Complex64, td: f64) -> Complex64 {
    let x = s * td;
    if x.norm() < 1e-8 {
        // series of (1 − e^{−x})/x
        return Complex64::new(1.0, 0.0) - x / 2.0 + x * x / 6.0;
    }
    (Complex64::new(1.0, 0.0) - (-x).exp()) / x
}

pub fn f_delay(s: Complex64, td: f64) -> Complex64 {
    (-s * td).exp()
}

pub fn controller_tf(s: Complex64, p: usize, f1: f64, lt: f64, td: f64) -> Complex64 {
    f_zoh(s, td) * f_delay(s, td) * k_gain(p, f1, lt)
}

pub fn filter_tf(cfg: &FilterConfig, s: Complex64) -> Complex64 {
    let wc = 2.0 * PI * cfg.cutoff_hz;
    match cfg.order {
        1 => wc / (s + wc),
        _ => Complex64::new(wc * wc, 0.0) / (s * s + s * (2f64.sqrt() * wc) + wc * wc),
    }
}

fn optional_filter(cfg: Option<&FilterConfig>, s: Complex64, absent: f64) -> Complex64 {
    cfg.map_or(Complex64::new(absent, 0.0), |c| filter_tf(c, s))
}

/// The gain the controller realizes: `err_scale · L_t · ln 9 / horizon`.
pub fn effective_gain(cfg: &ControllerConfig, lt: f64) -> f64 {
    match cfg.mode {
        ControlMode::Off => 0.0,
        _ => cfg.err_scale * lt * 9f64.ln() / cfg.horizon,
    }
}

pub fn z_conv(
    s: Complex64,
    params: &PlantParams,
    cfg: &ControllerConfig,
    f1: f64,
) -> Result<Complex64> {
    let w1 = 2.0 * PI * f1;
    let h_al = optional_filter(cfg.h_al.as_ref(), s, 1.0);
    let (k, h_pcc) = match cfg.mode {
        ControlMode::Off => (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)),
        _ => (
            f_zoh(s, cfg.td) * f_delay(s, cfg.td) * effective_gain(cfg, params.lt()),
            optional_filter(cfg.h_pcc.as_ref(), s - Complex64::new(0.0, w1), 0.0),
        ),
    };
    let num = k * h_al + params.rt() + s * params.lt();
    let den = Complex64::new(1.0, 0.0) - h_pcc * h_al;
    if den.norm() < 1e-9 {
        return Err(Error::Singular {
            freq_hz: s.im / (2.0 * PI),
            magnitude: den.norm(),
        });
    }
    Ok(num / den)
}

/// Resistance seen in the synchronous frame at angular frequency `omega`.
pub fn resistance_dq(
    omega: f64,
    params: &PlantParams,
    cfg: &ControllerConfig,
    f1: f64,
) -> Result<f64> {
    Ok(z_conv(Complex64::new(0.0, omega + 2.0 * PI * f1), params, cfg, f1)?.re)
}

fn resistance_at(f: f64, params: &PlantParams, cfg: &ControllerConfig, f1: f64) -> Result<f64> {
    Ok(z_conv(Complex64::new(0.0, 2.0 * PI * f), params, cfg, f1)?.re)
}

/// First frequency in `[f_lo, f_hi]` where `Re Z(j2πf)` changes sign, to 1 Hz.
pub fn find_zero_crossing(
    params: &PlantParams,
    cfg: &ControllerConfig,
    f1: f64,
    f_lo: f64,
    f_hi: f64,
) -> Result<f64> {
    if !(f_hi > f_lo) {
        return Err(Error::InvalidParameter(format!(
            "empty search interval [{f_lo}, {f_hi}]"
        )));
    }
    let steps = ((f_hi - f_lo) / 10.0).ceil().max(1.0) as usize;
    let h = (f_hi - f_lo) / steps as f64;
    let mut a = f_lo;
    let mut ra = resistance_at(a, params, cfg, f1)?;
    for i in 1..=steps {
        let b = if i == steps {
            f_hi
        } else {
            f_lo + i as f64 * h
        };
        let rb = resistance_at(b, params, cfg, f1)?;
        if ra == 0.0 {
            return Ok(a);
        }
        if ra.signum() != rb.signum() {
            let (mut lo, mut hi) = (a, b);
            while hi - lo > 1.0 {
                let mid = 0.5 * (lo + hi);
                let rm = resistance_at(mid, params, cfg, f1)?;
                if rm.signum() == ra.signum() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Ok(0.5 * (lo + hi));
        }
        a = b;
        ra = rb;
    }
    Err(Error::NoCrossing { lo: f_lo, hi: f_hi })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    AlphaBeta,
    Dq,
}

impl Frame {
    pub fn label(self) -> &'static str {
        match self {
            Frame::AlphaBeta => "alpha_beta",
            Frame::Dq => "dq",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "alpha_beta" => Ok(Frame::AlphaBeta),
            "dq" => Ok(Frame::Dq),
            _ => Err(Error::Parse(format!("unknown frame `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Model,
    Measured,
}

impl Source {
    pub fn label(self) -> &'static str {
        match self {
            Source::Model => "model",
            Source::Measured => "measured",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(Source::Model),
            "measured" => Ok(Source::Measured),
            _ => Err(Error::Parse(format!("unknown source `{s}`"))),
        }
    }
}

pub const CURVE_HEADER: &str = "frequency_hz,re_z_ohm,im_z_ohm,frame,source";

#[derive(Debug, Clone, PartialEq)]
pub struct ImpedanceCurve {
    samples: Vec<(f64, Complex64)>,
    pub frame: Frame,
    pub source: Source,
}

impl ImpedanceCurve {
    pub fn new(samples: Vec<(f64, Complex64)>, frame: Frame, source: Source) -> Result<Self> {
        for w in samples.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::InvalidParameter(format!(
                    "frequencies not strictly increasing at {} Hz",
                    w[1].0
                )));
            }
        }
        if let Some((f, _)) = samples
            .iter()
            .find(|(f, z)| !(f.is_finite() && z.re.is_finite() && z.im.is_finite()))
        {
            return Err(Error::InvalidParameter(format!(
                "non-finite sample at {f} Hz"
            )));
        }
        Ok(Self {
            samples,
            frame,
            source,
        })
    }

    pub fn samples(&self) -> &[(f64, Complex64)] {
        &self.samples
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.0).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CURVE_HEADER);
        s.push('\n');
        for (f, z) in &self.samples {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                sig9(*f),
                sig9(z.re),
                sig9(z.im),
                self.frame.label(),
                self.source.label()
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == CURVE_HEADER => {}
            _ => return Err(Error::Parse(format!("expected header `{CURVE_HEADER}`"))),
        }
        let mut samples = Vec::new();
        let mut tags: Option<(Frame, Source)> = None;
        for (n, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 5 {
                return Err(Error::Parse(format!("row {}: expected 5 columns", n + 1)));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("row {}: bad number `{s}`", n + 1)))
            };
            let row_tags = (Frame::parse(cols[3])?, Source::parse(cols[4])?);
            if *tags.get_or_insert(row_tags) != row_tags {
                return Err(Error::Parse(format!(
                    "row {}: mixed frame/source tags",
                    n + 1
                )));
            }
            samples.push((num(cols[0])?, Complex64::new(num(cols[1])?, num(cols[2])?)));
        }
        let (frame, source) = tags.unwrap_or((Frame::AlphaBeta, Source::Model));
        Self::new(samples, frame, source)
    }
}

/// Evaluates the model on a frequency grid. In the dq frame the sample at `f`
/// is `Z(j2π(f + f1))`.
pub fn model_curve(
    freqs: &[f64],
    params: &PlantParams,
    cfg: &ControllerConfig,
    f1: f64,
    frame: Frame,
    exec: Execution,
) -> Result<ImpedanceCurve> {
    let shift = match frame {
        Frame::AlphaBeta => 0.0,
        Frame::Dq => f1,
    };
    let values = exec::map(freqs, exec, |&f| {
        z_conv(Complex64::new(0.0, 2.0 * PI * (f + shift)), params, cfg, f1)
    });
    let samples = freqs
        .iter()
        .zip(values)
        .map(|(&f, z)| z.map(|z| (f, z)))
        .collect::<Result<Vec<_>>>()?;
    ImpedanceCurve::new(samples, frame, Source::Model)
}
