//! `key = value` case files and the named study presets.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::energy::EnergySettings;
use crate::error::{Error, Result};
use crate::field_ops::FilterSettings;
use crate::flow::FlowSettings;
use crate::materials::InterpolationSettings;
use crate::mesh::{build_grid, resolve_patches, BoxSide, FlowArrangement, GridSpec, PortId, PortRect, PortSpec};
use crate::objective::{Model, PhysicsSettings};
use crate::optimizer::OptimizerSettings;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseConfig {
    pub grid: GridSpec,
    pub arrangement: FlowArrangement,
    pub ports: PortSpec,
    pub re1: f64,
    pub re2: f64,
    pub pr_f1: f64,
    pub pr_f2: f64,
    pub pr_s: f64,
    pub alpha_max: f64,
    pub q: f64,
    pub s: f64,
    pub filter: FilterSettings,
    pub optimizer: OptimizerSettings,
    pub out_dir: PathBuf,
}

impl Default for CaseConfig {
    fn default() -> Self {
        let grid = GridSpec {
            nx: 48,
            ny: 12,
            nz: 48,
            lx: 4.0,
            ly: 1.0,
            lz: 4.0,
            symmetry: true,
        };
        let ports = PortSpec::for_arrangement(FlowArrangement::Counter, &grid);
        CaseConfig {
            grid,
            arrangement: FlowArrangement::Counter,
            ports,
            re1: 100.0,
            re2: 100.0,
            pr_f1: 7.0,
            pr_f2: 7.0,
            pr_s: 3.5,
            alpha_max: 1e4,
            q: 0.01,
            s: 0.1,
            filter: FilterSettings {
                radius: 1.0 / 12.0,
                beta: 8.0,
                eta: 0.5,
            },
            optimizer: OptimizerSettings::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

const KEYS: &[&str] = &[
    "nx",
    "ny",
    "nz",
    "Lx",
    "Ly",
    "Lz",
    "symmetry",
    "arrangement",
    "port.inlet1",
    "port.outlet1",
    "port.inlet2",
    "port.outlet2",
    "Re1",
    "Re2",
    "Pr_f1",
    "Pr_f2",
    "Pr_s",
    "alpha_max",
    "q",
    "s",
    "R",
    "beta",
    "eta",
    "projection_start",
    "move_limit",
    "max_iters",
    "conv_tol",
    "conv_window",
    "out_dir",
];

fn parse_f64(text: &str) -> std::result::Result<f64, String> {
    if let Some((n, d)) = text.split_once('/') {
        let n: f64 = n.trim().parse().map_err(|_| format!("`{text}` is not a number"))?;
        let d: f64 = d.trim().parse().map_err(|_| format!("`{text}` is not a number"))?;
        return Ok(n / d);
    }
    text.parse().map_err(|_| format!("`{text}` is not a number"))
}

fn parse_usize(text: &str) -> std::result::Result<usize, String> {
    text.parse().map_err(|_| format!("`{text}` is not a non-negative integer"))
}

fn parse_bool(text: &str) -> std::result::Result<bool, String> {
    match text.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("`{text}` is not a boolean")),
    }
}

fn parse_port(text: &str) -> std::result::Result<PortRect, String> {
    let parts: Vec<&str> = text.split_whitespace().collect();
    if parts.len() != 5 {
        return Err("expected `side a0 a1 b0 b1`".into());
    }
    let side = BoxSide::from_str(parts[0]).map_err(|e| e.to_string())?;
    let v: Vec<f64> = parts[1..].iter().map(|p| parse_f64(p)).collect::<std::result::Result<_, _>>()?;
    Ok(PortRect::new(side, (v[0], v[1]), (v[2], v[3])))
}

fn render_port(p: &PortRect) -> String {
    format!("{} {:?} {:?} {:?} {:?}", p.side.name(), p.a.0, p.a.1, p.b.0, p.b.1)
}

impl CaseConfig {
    /// Parses a case file; every key is optional and defaults to the
    /// baseline counter-flow case.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = CaseConfig::default();
        let mut lines: HashMap<String, usize> = HashMap::new();
        let mut port_overrides: Vec<(PortId, PortRect)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                reason: format!("expected `key = value`, found `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config {
                    line,
                    reason: format!("unknown key `{key}`"),
                });
            }
            if lines.insert(key.to_string(), line).is_some() {
                return Err(Error::Config {
                    line,
                    reason: format!("duplicate key `{key}`"),
                });
            }
            let err = |reason: String| Error::Config {
                line,
                reason: format!("`{key}`: {reason}"),
            };
            let positive = |v: f64| {
                if v > 0.0 && v.is_finite() {
                    Ok(v)
                } else {
                    Err(err(format!("{v} is out of range, must be positive")))
                }
            };
            match key {
                "nx" => cfg.grid.nx = parse_usize(value).map_err(err)?,
                "ny" => cfg.grid.ny = parse_usize(value).map_err(err)?,
                "nz" => cfg.grid.nz = parse_usize(value).map_err(err)?,
                "Lx" => cfg.grid.lx = positive(parse_f64(value).map_err(err)?)?,
                "Ly" => cfg.grid.ly = positive(parse_f64(value).map_err(err)?)?,
                "Lz" => cfg.grid.lz = positive(parse_f64(value).map_err(err)?)?,
                "symmetry" => cfg.grid.symmetry = parse_bool(value).map_err(err)?,
                "arrangement" => {
                    cfg.arrangement = FlowArrangement::from_str(value).map_err(|e| err(e.to_string()))?
                }
                "port.inlet1" | "port.outlet1" | "port.inlet2" | "port.outlet2" => {
                    let id = PortId::ALL
                        .into_iter()
                        .find(|id| key == format!("port.{}", id.key()))
                        .expect("port key");
                    port_overrides.push((id, parse_port(value).map_err(err)?));
                }
                "Re1" => cfg.re1 = positive(parse_f64(value).map_err(err)?)?,
                "Re2" => cfg.re2 = positive(parse_f64(value).map_err(err)?)?,
                "Pr_f1" => cfg.pr_f1 = positive(parse_f64(value).map_err(err)?)?,
                "Pr_f2" => cfg.pr_f2 = positive(parse_f64(value).map_err(err)?)?,
                "Pr_s" => cfg.pr_s = positive(parse_f64(value).map_err(err)?)?,
                "alpha_max" => {
                    let v = parse_f64(value).map_err(err)?;
                    if !(v >= 0.0 && v.is_finite()) {
                        return Err(err(format!("{v} is out of range, must be non-negative")));
                    }
                    cfg.alpha_max = v;
                }
                "q" => cfg.q = positive(parse_f64(value).map_err(err)?)?,
                "s" => cfg.s = positive(parse_f64(value).map_err(err)?)?,
                "R" => cfg.filter.radius = positive(parse_f64(value).map_err(err)?)?,
                "beta" => cfg.filter.beta = positive(parse_f64(value).map_err(err)?)?,
                "eta" => {
                    let v = parse_f64(value).map_err(err)?;
                    if !(v > 0.0 && v < 1.0) {
                        return Err(err(format!("{v} is out of range, must lie in (0, 1)")));
                    }
                    cfg.filter.eta = v;
                }
                "projection_start" => {
                    cfg.optimizer.projection_start = match value.to_ascii_lowercase().as_str() {
                        "none" | "off" => None,
                        v => Some(parse_usize(v).map_err(err)?),
                    }
                }
                "move_limit" => {
                    let v = parse_f64(value).map_err(err)?;
                    if !(v > 0.0 && v <= 1.0) {
                        return Err(err(format!("{v} is out of range, must lie in (0, 1]")));
                    }
                    cfg.optimizer.move_limit = v;
                }
                "max_iters" => {
                    let v = parse_usize(value).map_err(err)?;
                    if v == 0 {
                        return Err(err("must be at least 1".into()));
                    }
                    cfg.optimizer.max_iters = v;
                }
                "conv_tol" => cfg.optimizer.conv_tol = positive(parse_f64(value).map_err(err)?)?,
                "conv_window" => {
                    let v = parse_usize(value).map_err(err)?;
                    if v == 0 {
                        return Err(err("must be at least 1".into()));
                    }
                    cfg.optimizer.conv_window = v;
                }
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                _ => unreachable!("key list and match arms agree"),
            }
        }
        cfg.ports = PortSpec::for_arrangement(cfg.arrangement, &cfg.grid);
        for (id, rect) in port_overrides {
            *cfg.ports.get_mut(id) = rect;
        }
        cfg.validate().map_err(|e| {
            let line = match &e {
                Error::InvalidParameter { name, .. } => lines.get(name.as_str()).copied(),
                Error::InvalidGrid(_) => ["nx", "ny", "nz"].iter().find_map(|k| lines.get(*k).copied()),
                Error::InvalidPorts(_) => ["port.inlet1", "port.outlet1", "port.inlet2", "port.outlet2", "arrangement"]
                    .iter()
                    .find_map(|k| lines.get(*k).copied()),
                _ => None,
            };
            Error::Config {
                line: line.unwrap_or(0),
                reason: e.to_string(),
            }
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let grid = build_grid(self.grid.clone())?;
        let patches = resolve_patches(&grid, self.arrangement, &self.ports)?;
        crate::field_ops::DesignDomain::new(&grid, &patches)?;
        self.physics().validate()?;
        self.optimizer.validate()
    }

    /// Writes every key explicitly; `parse(render(c)) == c`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let g = &self.grid;
        let o = &self.optimizer;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("nx", g.nx.to_string());
        kv("ny", g.ny.to_string());
        kv("nz", g.nz.to_string());
        kv("Lx", format!("{:?}", g.lx));
        kv("Ly", format!("{:?}", g.ly));
        kv("Lz", format!("{:?}", g.lz));
        kv("symmetry", g.symmetry.to_string());
        kv("arrangement", self.arrangement.name().to_string());
        for id in PortId::ALL {
            kv(&format!("port.{}", id.key()), render_port(self.ports.get(id)));
        }
        kv("Re1", format!("{:?}", self.re1));
        kv("Re2", format!("{:?}", self.re2));
        kv("Pr_f1", format!("{:?}", self.pr_f1));
        kv("Pr_f2", format!("{:?}", self.pr_f2));
        kv("Pr_s", format!("{:?}", self.pr_s));
        kv("alpha_max", format!("{:?}", self.alpha_max));
        kv("q", format!("{:?}", self.q));
        kv("s", format!("{:?}", self.s));
        kv("R", format!("{:?}", self.filter.radius));
        kv("beta", format!("{:?}", self.filter.beta));
        kv("eta", format!("{:?}", self.filter.eta));
        kv(
            "projection_start",
            o.projection_start.map_or_else(|| "none".to_string(), |s| s.to_string()),
        );
        kv("move_limit", format!("{:?}", o.move_limit));
        kv("max_iters", o.max_iters.to_string());
        kv("conv_tol", format!("{:?}", o.conv_tol));
        kv("conv_window", o.conv_window.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        out
    }

    pub fn interpolation(&self) -> InterpolationSettings {
        InterpolationSettings {
            alpha_max: self.alpha_max,
            q: self.q,
            s: self.s,
            pe_f1: self.pr_f1 * self.re1,
            pe_f2: self.pr_f2 * self.re2,
            pe_s: self.pr_s * 0.5 * (self.re1 + self.re2),
        }
    }

    pub fn physics(&self) -> PhysicsSettings {
        PhysicsSettings {
            reynolds: [self.re1, self.re2],
            interpolation: self.interpolation(),
            filter: self.filter.clone(),
            flow: FlowSettings::default(),
            energy: EnergySettings::default(),
            adjoint_tol: 1e-6,
        }
    }

    pub fn build_model(&self) -> Result<Model> {
        let grid = build_grid(self.grid.clone())?;
        let patches = resolve_patches(&grid, self.arrangement, &self.ports)?;
        Model::new(grid, patches, self.physics())
    }

    /// Replaces the arrangement and resets the ports to its defaults.
    pub fn with_arrangement(mut self, arrangement: FlowArrangement) -> Self {
        self.arrangement = arrangement;
        self.ports = PortSpec::for_arrangement(arrangement, &self.grid);
        self
    }
}

impl FromStr for CaseConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CaseConfig::parse(s)
    }
}

/// Named parameter bundles of the parameter studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudyPreset {
    Baseline,
    Re50,
    Re200,
    Pr14,
    Domain2x2x4,
    Domain4x4x4,
    Parallel,
    UCounter,
    UParallel,
    Reference,
}

impl StudyPreset {
    pub const ALL: [StudyPreset; 10] = [
        StudyPreset::Baseline,
        StudyPreset::Re50,
        StudyPreset::Re200,
        StudyPreset::Pr14,
        StudyPreset::Domain2x2x4,
        StudyPreset::Domain4x4x4,
        StudyPreset::Parallel,
        StudyPreset::UCounter,
        StudyPreset::UParallel,
        StudyPreset::Reference,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StudyPreset::Baseline => "baseline",
            StudyPreset::Re50 => "re50",
            StudyPreset::Re200 => "re200",
            StudyPreset::Pr14 => "pr14",
            StudyPreset::Domain2x2x4 => "domain-2x2x4",
            StudyPreset::Domain4x4x4 => "domain-4x4x4",
            StudyPreset::Parallel => "parallel",
            StudyPreset::UCounter => "u-counter",
            StudyPreset::UParallel => "u-parallel",
            StudyPreset::Reference => "reference",
        }
    }

    /// The reference preset evaluates the straight-channel design instead of
    /// optimizing.
    pub fn is_reference(self) -> bool {
        self == StudyPreset::Reference
    }

    /// Applies the preset's parameters on top of `base`. Grid resolution
    /// follows the base cell size when the domain changes.
    pub fn apply(self, base: &CaseConfig) -> CaseConfig {
        let mut c = base.clone();
        let rescale = |c: &mut CaseConfig, lx: f64, ly: f64| {
            let hx = c.grid.lx / c.grid.nx as f64;
            let hy = c.grid.ly / c.grid.ny as f64;
            c.grid.lx = lx;
            c.grid.ly = ly;
            c.grid.nx = ((lx / hx).round() as usize).max(4);
            c.grid.ny = ((ly / hy).round() as usize).max(4);
            c.ports = PortSpec::for_arrangement(c.arrangement, &c.grid);
        };
        match self {
            StudyPreset::Baseline | StudyPreset::Reference => {}
            StudyPreset::Re50 => {
                c.re1 = 50.0;
                c.re2 = 50.0;
            }
            StudyPreset::Re200 => {
                c.re1 = 200.0;
                c.re2 = 200.0;
            }
            StudyPreset::Pr14 => {
                c.pr_f1 = 14.0;
                c.pr_f2 = 14.0;
            }
            // Full-device extents 2L x 2L x 4L and 4L x 4L x 4L; the modelled
            // half has half the y extent.
            StudyPreset::Domain2x2x4 => rescale(&mut c, 2.0, 1.0),
            StudyPreset::Domain4x4x4 => rescale(&mut c, 4.0, 2.0),
            StudyPreset::Parallel => c = c.with_arrangement(FlowArrangement::Parallel),
            StudyPreset::UCounter => c = c.with_arrangement(FlowArrangement::UCounter),
            StudyPreset::UParallel => c = c.with_arrangement(FlowArrangement::UParallel),
        }
        c
    }
}

impl FromStr for StudyPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StudyPreset::ALL
            .into_iter()
            .find(|p| p.name() == s.trim())
            .ok_or_else(|| Error::Parse(format!("unknown preset `{s}`")))
    }
}
