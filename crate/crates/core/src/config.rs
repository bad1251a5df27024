//! Scenario configuration files and figure presets.
//!
//! A configuration is a TOML document with the sections `[grid]`, `[plant]`,
//! `[converter]`, `[controller]`, `[opp]` and `[sweep]`. Every key is
//! optional and falls back to the rated system. Unknown keys are rejected and
//! every error names the offending `section.key`.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::frames::Dq;
use crate::harness::{default_frequencies, PatternSource, Scenario, SweepConfig};
use crate::mp3c::{ControlMode, ControllerConfig, FilterConfig};
use crate::opp::{build_table_variant, OptimizerConfig, PatternTable, DEFAULT_K_MAX};
use crate::plant::{GridConfig, PlantParams};
use crate::smallsignal::Frame;
use crate::trajectory::{LineTopology, OperatingPoint, RATED_CURRENT_PEAK};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub f1: f64,
    /// Phase-to-neutral peak, V.
    pub v_pcc_peak: f64,
    pub phi_ini: f64,
    /// Nameplate data; informational only.
    pub s_conv: f64,
    pub s_trafo: f64,
    pub v_primary: f64,
    pub v_secondary: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            f1: 50.0,
            v_pcc_peak: 66e3 * (2.0f64 / 3.0).sqrt(),
            phi_ini: 0.0,
            s_conv: 7e6,
            s_trafo: 14e6,
            v_primary: 66e3,
            v_secondary: 3.1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSection {
    pub rp: f64,
    pub lp: f64,
    pub rs: f64,
    pub ls: f64,
}

impl Default for PlantSection {
    fn default() -> Self {
        let p = PlantParams::default();
        Self {
            rp: p.rp(),
            lp: p.lp(),
            rs: p.rs(),
            ls: p.ls(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TopologyName {
    #[default]
    Delta,
    Identical,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConverterSection {
    pub m: f64,
    /// Derived from `m` and the references when absent.
    pub vdc: Option<f64>,
    pub i_sum_d: f64,
    pub i_sum_q: f64,
    pub i_diff_d: f64,
    pub i_diff_q: f64,
    pub topology: TopologyName,
}

impl Default for ConverterSection {
    fn default() -> Self {
        Self {
            m: 0.95,
            vdc: None,
            i_sum_d: RATED_CURRENT_PEAK,
            i_sum_q: 0.0,
            i_diff_d: 0.0,
            i_diff_q: 0.0,
            topology: TopologyName::Delta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Off,
    #[default]
    Mp3c,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    pub td: f64,
    pub p: usize,
    /// `2/(f1·p)` when absent.
    pub horizon: Option<f64>,
    pub err_scale: f64,
    pub mode: ModeName,
    /// Order 0 removes the filter.
    pub h_al_order: u8,
    pub h_al_cutoff_hz: f64,
    pub h_pcc_order: u8,
    pub h_pcc_cutoff_hz: f64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self {
            td: 25e-6,
            p: 14,
            horizon: None,
            err_scale: 1.0,
            mode: ModeName::Mp3c,
            h_al_order: 2,
            h_al_cutoff_hz: 15e3,
            h_pcc_order: 1,
            h_pcc_cutoff_hz: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OppSection {
    /// Angles per quarter wave; `p/2` when absent.
    pub d: Option<usize>,
    pub levels: usize,
    /// Table rows; the converter's `m` when absent.
    pub m_grid: Option<Vec<f64>>,
    pub k_max: u32,
    pub starts: usize,
    pub seed: u64,
    pub margin: f64,
    pub max_iter: usize,
    /// Rank of the local optimum used for each row.
    pub variant: usize,
    /// Pattern table to load instead of optimizing.
    pub table: Option<PathBuf>,
}

impl Default for OppSection {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        Self {
            d: None,
            levels: 3,
            m_grid: None,
            k_max: DEFAULT_K_MAX,
            starts: o.starts,
            seed: o.seed,
            margin: o.margin,
            max_iter: o.max_iter,
            variant: 0,
            table: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FrameName {
    #[default]
    AlphaBeta,
    Dq,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Explicit grid; replaces `f_lo`, `f_hi` and `points`.
    pub frequencies: Option<Vec<f64>>,
    pub f_lo: f64,
    pub f_hi: f64,
    pub points: usize,
    /// 1 % of `v_pcc_peak` when absent.
    pub perturb_amp: Option<f64>,
    pub settle_periods: u32,
    pub window_periods: u32,
    pub frame: FrameName,
    pub sample_period: f64,
    pub parallel: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            frequencies: None,
            f_lo: 200.0,
            f_hi: 3000.0,
            points: 30,
            perturb_amp: None,
            settle_periods: 10,
            window_periods: 5,
            frame: FrameName::AlphaBeta,
            sample_period: 1e-6,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenarioConfig {
    pub grid: GridSection,
    pub plant: PlantSection,
    pub converter: ConverterSection,
    pub controller: ControllerSection,
    pub opp: OppSection,
    pub sweep: SweepSection,
}

fn section<T: DeserializeOwned + Default>(root: &toml::Table, name: &str) -> Result<T> {
    let Some(value) = root.get(name) else {
        return Ok(T::default());
    };
    let Some(table) = value.as_table() else {
        return Err(Error::Config(format!("`{name}` must be a table")));
    };
    // try each key alone so the error can name it
    for (key, v) in table {
        let mut single = toml::Table::new();
        single.insert(key.clone(), v.clone());
        if let Err(e) = T::deserialize(toml::Value::Table(single)) {
            let msg = e.to_string();
            let msg = msg.trim();
            if msg.starts_with("unknown field") {
                return Err(Error::Config(format!("{name}.{key}: unknown key")));
            }
            return Err(Error::Config(format!("{name}.{key}: {msg}")));
        }
    }
    T::deserialize(value.clone())
        .map_err(|e| Error::Config(format!("{name}: {}", e.to_string().trim())))
}

fn check(ok: bool, key: &str, what: impl std::fmt::Display) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{key}: {what}")))
    }
}

const SECTIONS: [&str; 6] = ["grid", "plant", "converter", "controller", "opp", "sweep"];

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let root: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().to_string()))?;
        if let Some(k) = root.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(Error::Config(format!("{k}: unknown section")));
        }
        let cfg = Self {
            grid: section(&root, "grid")?,
            plant: section(&root, "plant")?,
            converter: section(&root, "converter")?,
            controller: section(&root, "controller")?,
            opp: section(&root, "opp")?,
            sweep: section(&root, "sweep")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        check(
            g.f1 > 0.0 && g.f1.is_finite(),
            "grid.f1",
            "must be positive",
        )?;
        check(
            g.v_pcc_peak > 0.0 && g.v_pcc_peak.is_finite(),
            "grid.v_pcc_peak",
            "must be positive",
        )?;
        check(g.phi_ini.is_finite(), "grid.phi_ini", "must be finite")?;
        let p = &self.plant;
        for (key, v) in [
            ("plant.rp", p.rp),
            ("plant.lp", p.lp),
            ("plant.rs", p.rs),
            ("plant.ls", p.ls),
        ] {
            check(v > 0.0 && v.is_finite(), key, "must be positive")?;
        }
        let c = &self.converter;
        check(
            c.m > 0.0 && c.m <= 4.0 / std::f64::consts::PI,
            "converter.m",
            "must lie in (0, 4/π]",
        )?;
        if let Some(vdc) = c.vdc {
            check(
                vdc > 0.0 && vdc.is_finite(),
                "converter.vdc",
                "must be positive",
            )?;
        }
        let k = &self.controller;
        check(k.td > 0.0, "controller.td", "must be positive")?;
        check(
            k.p >= 2 && k.p % 2 == 0,
            "controller.p",
            "must be an even number >= 2",
        )?;
        if let Some(h) = k.horizon {
            check(h > k.td, "controller.horizon", "must exceed td")?;
        }
        check(
            k.err_scale >= 0.0 && k.err_scale.is_finite(),
            "controller.err_scale",
            "must be non-negative",
        )?;
        check(
            k.h_al_order <= 2,
            "controller.h_al_order",
            "must be 0, 1 or 2",
        )?;
        check(
            k.h_pcc_order <= 2,
            "controller.h_pcc_order",
            "must be 0, 1 or 2",
        )?;
        check(
            k.h_al_cutoff_hz > 0.0,
            "controller.h_al_cutoff_hz",
            "must be positive",
        )?;
        check(
            k.h_pcc_cutoff_hz > 0.0,
            "controller.h_pcc_cutoff_hz",
            "must be positive",
        )?;
        let o = &self.opp;
        check(
            o.levels >= 3 && o.levels % 2 == 1,
            "opp.levels",
            "must be an odd number >= 3",
        )?;
        check(
            self.d() * 2 == k.p,
            "opp.d",
            format!("must equal controller.p / 2 = {}", k.p / 2),
        )?;
        check(
            o.k_max >= 5 && o.k_max % 2 == 1,
            "opp.k_max",
            "must be odd and at least 5",
        )?;
        check(o.starts >= 1, "opp.starts", "must be at least 1")?;
        check(o.margin >= 0.0, "opp.margin", "must be non-negative")?;
        if let Some(grid) = &o.m_grid {
            check(
                grid.iter().all(|m| *m > 0.0),
                "opp.m_grid",
                "entries must be positive",
            )?;
        }
        let s = &self.sweep;
        check(
            s.f_lo > 0.0 && s.f_hi > s.f_lo,
            "sweep.f_hi",
            "must exceed sweep.f_lo > 0",
        )?;
        check(s.points >= 2, "sweep.points", "must be at least 2")?;
        if let Some(a) = s.perturb_amp {
            check(a > 0.0, "sweep.perturb_amp", "must be positive")?;
        }
        check(
            s.window_periods >= 1,
            "sweep.window_periods",
            "must be at least 1",
        )?;
        check(
            s.sample_period > 0.0,
            "sweep.sample_period",
            "must be positive",
        )?;
        self.sweep_config()?
            .validate(g.f1)
            .map_err(|e| Error::Config(format!("sweep.frequencies: {e}")))?;
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.opp.d.unwrap_or(self.controller.p / 2)
    }

    pub fn params(&self) -> Result<PlantParams> {
        let p = &self.plant;
        PlantParams::new(p.rp, p.lp, p.rs, p.ls)
    }

    pub fn grid(&self) -> Result<GridConfig> {
        GridConfig::new(self.grid.f1, self.grid.v_pcc_peak, self.grid.phi_ini)
    }

    pub fn topology(&self) -> LineTopology {
        match self.converter.topology {
            TopologyName::Delta => LineTopology::Delta,
            TopologyName::Identical => LineTopology::Identical,
        }
    }

    pub fn controller(&self) -> Result<ControllerConfig> {
        let k = &self.controller;
        let filter = |order: u8, fc: f64| {
            if order == 0 {
                Ok(None)
            } else {
                FilterConfig::new(order, fc).map(Some)
            }
        };
        let cfg = ControllerConfig {
            td: k.td,
            p: k.p,
            horizon: k.horizon.unwrap_or(2.0 / (self.grid.f1 * k.p as f64)),
            err_scale: k.err_scale,
            h_al: filter(k.h_al_order, k.h_al_cutoff_hz)?,
            h_pcc: filter(k.h_pcc_order, k.h_pcc_cutoff_hz)?,
            mode: match k.mode {
                ModeName::Off => ControlMode::Off,
                ModeName::Mp3c => ControlMode::Mp3c,
                ModeName::Linear => ControlMode::Linear,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn operating_point(&self) -> Result<OperatingPoint> {
        let c = &self.converter;
        let i_sum = Dq::new(c.i_sum_d, c.i_sum_q);
        let i_diff = Dq::new(c.i_diff_d, c.i_diff_q);
        let params = self.params()?;
        let grid = self.grid()?;
        let op = OperatingPoint::for_modulation(c.m, i_sum, i_diff, &params, &grid)?;
        match c.vdc {
            Some(vdc) => OperatingPoint::new(c.m, vdc, op.ref_angle, i_sum, i_diff),
            None => Ok(op),
        }
    }

    pub fn optimizer(&self, exec: Execution) -> OptimizerConfig {
        let o = &self.opp;
        OptimizerConfig {
            k_max: o.k_max,
            starts: o.starts,
            seed: o.seed,
            margin: o.margin,
            max_iter: o.max_iter,
            exec,
        }
    }

    pub fn m_grid(&self) -> Vec<f64> {
        self.opp
            .m_grid
            .clone()
            .unwrap_or_else(|| vec![self.converter.m])
    }

    /// The configured table file, or a freshly optimized table.
    pub fn pattern_table(&self) -> Result<PatternTable> {
        match &self.opp.table {
            Some(path) => {
                let file = std::fs::File::open(path)?;
                PatternTable::read_from(std::io::BufReader::new(file))
            }
            None => build_table_variant(
                self.d(),
                self.opp.levels,
                &self.m_grid(),
                &self.optimizer(self.exec()),
                self.opp.variant,
            ),
        }
    }

    pub fn exec(&self) -> Execution {
        if self.sweep.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let s = &self.sweep;
        s.frequencies
            .clone()
            .unwrap_or_else(|| default_frequencies(s.f_lo, s.f_hi, s.points))
    }

    pub fn frame(&self) -> Frame {
        match self.sweep.frame {
            FrameName::AlphaBeta => Frame::AlphaBeta,
            FrameName::Dq => Frame::Dq,
        }
    }

    pub fn sweep_config(&self) -> Result<SweepConfig> {
        let s = &self.sweep;
        let grid = self.grid()?;
        let mut cfg = SweepConfig::new(self.frequencies(), &grid);
        if let Some(a) = s.perturb_amp {
            cfg.perturb_amp = a;
        }
        cfg.settle_periods = s.settle_periods;
        cfg.window_periods = s.window_periods;
        cfg.frame = self.frame();
        cfg.sample_period = s.sample_period;
        cfg.exec = self.exec();
        Ok(cfg)
    }

    /// Whether a sweep needs switching patterns.
    pub fn needs_patterns(&self) -> bool {
        self.controller.mode != ModeName::Linear
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let source = if self.needs_patterns() {
            PatternSource::Table(self.pattern_table()?)
        } else {
            PatternSource::Fundamental
        };
        self.scenario_with(source)
    }

    pub fn scenario_with(&self, source: PatternSource) -> Result<Scenario> {
        Ok(Scenario {
            params: self.params()?,
            grid: self.grid()?,
            controller: self.controller()?,
            op: self.operating_point()?,
            topology: self.topology(),
            source,
            initial_offset: Default::default(),
        })
    }
}

/// One curve of a figure preset.
#[derive(Debug, Clone, PartialEq)]
pub struct PresetCurve {
    pub label: String,
    pub config: ScenarioConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: String,
    pub curves: Vec<PresetCurve>,
    /// No measurement is possible, only the model.
    pub model_only: bool,
}

pub const PRESETS: [&str; 5] = ["fig5", "fig6", "fig7", "fig8", "fig9"];

/// Builds a named case study on top of `base`.
pub fn preset(name: &str, base: &ScenarioConfig) -> Result<Preset> {
    let with = |label: String, f: &dyn Fn(&mut ScenarioConfig)| {
        let mut config = base.clone();
        config.opp.d = None;
        config.opp.m_grid = None;
        f(&mut config);
        PresetCurve { label, config }
    };
    let curves: Vec<PresetCurve> = match name {
        // operating points
        "fig5" => [0.85, 0.95, 1.0]
            .into_iter()
            .map(|m| {
                with(format!("p14_m{m:.2}"), &|c| {
                    c.controller.p = 14;
                    c.converter.m = m;
                })
            })
            .collect(),
        // two angle sets with the same pulse number
        "fig6" => (0..2)
            .map(|v| {
                with(format!("p14_set{}", v + 1), &|c| {
                    c.controller.p = 14;
                    c.opp.variant = v;
                })
            })
            .collect(),
        // pulse numbers
        "fig7" => [14, 22]
            .into_iter()
            .map(|p| with(format!("p{p}"), &|c| c.controller.p = p))
            .collect(),
        // error scaling
        "fig8" => vec![with("p22_scale1.5".into(), &|c| {
            c.controller.p = 22;
            c.controller.err_scale = 1.5;
        })],
        // nine-level converter
        "fig9" => vec![with("p56_levels9".into(), &|c| {
            c.controller.p = 56;
            c.opp.levels = 9;
        })],
        _ => {
            return Err(Error::Config(format!(
                "preset: unknown preset `{name}`, expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    for c in &curves {
        c.config.validate()?;
    }
    let model_only = name == "fig9" && base.opp.table.is_none();
    Ok(Preset {
        name: name.to_string(),
        curves,
        model_only,
    })
}
