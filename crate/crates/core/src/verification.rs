//! Oracle cases and audits used by the acceptance suite and the CLI.

use std::fmt;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::CaseConfig;
use crate::error::Result;
use crate::flow::{flow_rate, FlowSettings, FlowSolver, FlowState};
use crate::mesh::{build_grid, resolve_patches, BoundaryPatches, BoxSide, FlowArrangement, Grid, GridSpec, PortId, PortRect, PortSpec};
use crate::objective::{Model, ObjectiveReport, StateBundle};

/// One measured quantity checked against an independent oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub name: String,
    pub measured: f64,
    pub oracle: f64,
    pub rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub runtime: Duration,
}

impl OracleReport {
    /// Relative comparison; an oracle of zero falls back to the absolute error.
    pub fn compare(name: impl Into<String>, measured: f64, oracle: f64, tolerance: f64, started: Instant) -> Self {
        let rel_error = if oracle != 0.0 {
            (measured - oracle).abs() / oracle.abs()
        } else {
            measured.abs()
        };
        Self::with_error(name, measured, oracle, rel_error, tolerance, started)
    }

    pub fn with_error(
        name: impl Into<String>,
        measured: f64,
        oracle: f64,
        rel_error: f64,
        tolerance: f64,
        started: Instant,
    ) -> Self {
        OracleReport {
            name: name.into(),
            measured,
            oracle,
            rel_error,
            tolerance,
            pass: rel_error <= tolerance,
            runtime: started.elapsed(),
        }
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} measured {:.6e}  oracle {:.6e}  rel.err {:.3e} (tol {:.1e})  {:.2}s",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.oracle,
            self.rel_error,
            self.tolerance,
            self.runtime.as_secs_f64()
        )
    }
}

pub const ORACLE_CSV_HEADER: &str = "name,measured,oracle,rel_error,tolerance,pass,runtime_s";

pub fn oracle_csv(reports: &[OracleReport]) -> String {
    let mut out = format!("{ORACLE_CSV_HEADER}\n");
    for r in reports {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{},{:.3}\n",
            r.name,
            r.measured,
            r.oracle,
            r.rel_error,
            r.tolerance,
            r.pass,
            r.runtime.as_secs_f64()
        ));
    }
    out
}

/// 2D channel of unit gap and length 4; fluid 1 uses the full end faces,
/// fluid 2 only needs valid (tiny) ports and is never solved.
pub fn straight_channel(nx: usize, ny: usize) -> Result<(Grid, BoundaryPatches)> {
    let spec = GridSpec {
        nx,
        ny,
        nz: 1,
        lx: 4.0,
        ly: 1.0,
        lz: 1.0,
        symmetry: false,
    };
    let grid = build_grid(spec)?;
    let ports = PortSpec {
        inlet1: PortRect::new(BoxSide::XMin, (0.0, 1.0), (0.0, 1.0)),
        outlet1: PortRect::new(BoxSide::XMax, (0.0, 1.0), (0.0, 1.0)),
        inlet2: PortRect::new(BoxSide::YMax, (0.9, 1.0), (0.0, 1.0)),
        outlet2: PortRect::new(BoxSide::YMin, (0.0, 0.1), (0.0, 1.0)),
    };
    let patches = resolve_patches(&grid, FlowArrangement::Counter, &ports)?;
    Ok((grid, patches))
}

fn channel_flow(nx: usize, ny: usize, alpha: f64, reynolds: f64) -> Result<(Grid, BoundaryPatches, FlowState)> {
    let (grid, patches) = straight_channel(nx, ny)?;
    let solver = FlowSolver::new(&grid, &patches, 0);
    let settings = FlowSettings {
        reynolds,
        ..Default::default()
    };
    let state = solver.solve(&grid, &vec![alpha; grid.n_cells()], &settings, None)?;
    Ok((grid, patches, state))
}

/// Plane Poiseuille flow at Re = 1 on 64×16: mean velocity `Re h²/(12 L)`.
pub fn poiseuille_case() -> Result<OracleReport> {
    let started = Instant::now();
    let (grid, patches, state) = channel_flow(64, 16, 0.0, 1.0)?;
    let mean = flow_rate(&grid, &state, &patches.outlet1) / grid.length(1);
    Ok(OracleReport::compare("poiseuille mean velocity", mean, 1.0 / 48.0, 0.05, started))
}

/// Uniform Brinkman term α = 1e4 over length 4: Darcy velocity `Δp/(α L)`.
pub fn darcy_case() -> Result<OracleReport> {
    let started = Instant::now();
    let (grid, patches, state) = channel_flow(64, 16, 1e4, 1.0)?;
    let mean = flow_rate(&grid, &state, &patches.outlet1) / grid.length(1);
    Ok(OracleReport::compare("darcy superficial velocity", mean, 2.5e-5, 0.05, started))
}

/// `|inflow − outflow| / inflow` for one fluid.
pub fn mass_imbalance(grid: &Grid, patches: &BoundaryPatches, state: &FlowState) -> f64 {
    let fluid = state.fluid;
    let q_in = -flow_rate(grid, state, patches.port(PortId::inlet(fluid)));
    let q_out = flow_rate(grid, state, patches.port(PortId::outlet(fluid)));
    if q_in == 0.0 {
        return q_out.abs();
    }
    (q_in - q_out).abs() / q_in.abs()
}

pub fn channel_mass_balance_case() -> Result<OracleReport> {
    let started = Instant::now();
    let (grid, patches, state) = channel_flow(64, 16, 0.0, 1.0)?;
    let err = mass_imbalance(&grid, &patches, &state);
    Ok(OracleReport::with_error("channel mass balance", err, 0.0, err, 1e-6, started))
}

/// Conservation and boundedness of one analysed state.
#[derive(Clone, Debug, PartialEq)]
pub struct ConservationAudit {
    pub mass_imbalance: [f64; 2],
    /// Net boundary heat flow over `V̇₁ + V̇₂`.
    pub enthalpy_imbalance: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub flows_converged: bool,
}

impl ConservationAudit {
    pub fn mass_ok(&self) -> bool {
        self.mass_imbalance.iter().all(|&m| m <= 1e-6)
    }

    pub fn enthalpy_ok(&self) -> bool {
        self.enthalpy_imbalance <= 1e-6
    }

    pub fn bounds_ok(&self) -> bool {
        self.t_min >= -1e-8 && self.t_max <= 1.0 + 1e-8
    }

    pub fn passes(&self) -> bool {
        self.flows_converged && self.mass_ok() && self.enthalpy_ok() && self.bounds_ok()
    }
}

impl fmt::Display for ConservationAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mass {:.2e}/{:.2e}, enthalpy {:.2e}, T in [{:.3e}, {:.9}], converged {}",
            self.mass_imbalance[0], self.mass_imbalance[1], self.enthalpy_imbalance, self.t_min, self.t_max, self.flows_converged
        )
    }
}

pub fn conservation_audit(model: &Model, bundle: &StateBundle) -> ConservationAudit {
    let mass_imbalance = [0, 1].map(|i| mass_imbalance(&model.grid, &model.patches, &bundle.flows[i]));
    let through = bundle.report.vdot1 + bundle.report.vdot2;
    let balance = model.heat_balance(bundle);
    ConservationAudit {
        mass_imbalance,
        enthalpy_imbalance: if through > 0.0 { balance.abs() / through } else { balance.abs() },
        t_min: bundle.temperature.min(),
        t_max: bundle.temperature.max(),
        flows_converged: bundle.converged(),
    }
}

/// Leakage measures of the fluid separation.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparationReport {
    pub max_speed: f64,
    pub mid_band_cells: usize,
    pub mid_band_speed: [f64; 2],
    /// Largest absolute face flux of each fluid through the other fluid's ports.
    pub cross_port_flux: [f64; 2],
}

impl SeparationReport {
    pub fn speed_ratio(&self) -> [f64; 2] {
        self.mid_band_speed.map(|s| if self.max_speed > 0.0 { s / self.max_speed } else { 0.0 })
    }

    pub fn passes(&self, ratio_tol: f64) -> bool {
        self.speed_ratio().iter().all(|&r| r <= ratio_tol) && self.cross_port_flux == [0.0, 0.0]
    }
}

/// Mid-band cells are `0.4 ≤ γ ≤ 0.6` in the physical field.
pub fn separation_report(model: &Model, bundle: &StateBundle) -> SeparationReport {
    let grid = &model.grid;
    let gamma = bundle.density.physical();
    let mut max_speed = 0.0f64;
    let mut mid = [0.0f64; 2];
    let mut mid_band_cells = 0;
    for (c, &g) in gamma.iter().enumerate() {
        let in_band = (0.4..=0.6).contains(&g);
        mid_band_cells += usize::from(in_band);
        for (fluid, flow) in bundle.flows.iter().enumerate() {
            let s = flow.cell_speed(grid, c);
            max_speed = max_speed.max(s);
            if in_band {
                mid[fluid] = mid[fluid].max(s);
            }
        }
    }
    let cross = |fluid: usize| {
        let other = 1 - fluid;
        [PortId::inlet(other), PortId::outlet(other)]
            .iter()
            .flat_map(|&id| model.patches.port(id))
            .map(|&f| bundle.flows[fluid].u[f].abs())
            .fold(0.0, f64::max)
    };
    SeparationReport {
        max_speed,
        mid_band_cells,
        mid_band_speed: mid,
        cross_port_flux: [cross(0), cross(1)],
    }
}

/// One finite-difference probe of the adjoint gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientProbe {
    pub cell: usize,
    pub adjoint: f64,
    pub finite_difference: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradientAudit {
    pub probes: Vec<GradientProbe>,
    pub report: OracleReport,
}

/// Settings of [`gradient_audit`].
#[derive(Clone, Debug, PartialEq)]
pub struct AuditSettings {
    pub n_probes: usize,
    pub step: f64,
    /// PDE and adjoint tolerance used for every solve of the audit.
    pub solver_tol: f64,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for AuditSettings {
    fn default() -> Self {
        AuditSettings {
            n_probes: 20,
            step: 1e-4,
            solver_tol: 1e-12,
            seed: 2024,
            tolerance: 1e-3,
        }
    }
}

/// 2D counter-flow case of the gradient audit (32×16, baseline physics).
pub fn audit_config() -> CaseConfig {
    let mut cfg = CaseConfig::default();
    cfg.grid = GridSpec {
        nx: 32,
        ny: 16,
        nz: 1,
        lx: 2.0,
        ly: 1.0,
        lz: 1.0,
        symmetry: false,
    };
    cfg.with_arrangement(FlowArrangement::Counter)
}

/// Smooth, deterministic design used as the audit's linearization point.
pub fn audit_design(model: &Model) -> Vec<f64> {
    let grid = &model.grid;
    let mut psi: Vec<f64> = (0..grid.n_cells())
        .map(|c| {
            let [x, y, _] = grid.cell_center(grid.cell_coords(c));
            0.5 + 0.2 * (2.1 * x + 0.7).sin() * (3.3 * y + 0.4).cos()
        })
        .collect();
    model.domain.enforce(&mut psi);
    psi
}

/// Adjoint gradient against central differences at randomly chosen design
/// cells.
pub fn gradient_audit(config: &CaseConfig, settings: &AuditSettings) -> Result<GradientAudit> {
    let started = Instant::now();
    let model = config.build_model()?;
    let model = model.with_settings(model.settings.tightened(settings.solver_tol))?;
    let psi = audit_design(&model);
    let base = model.evaluate(&psi, false, None)?;
    let sens = model.sensitivity(&base)?;

    let mut cells: Vec<usize> = model.domain.design_cells().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    cells.shuffle(&mut rng);
    cells.truncate(settings.n_probes);
    cells.sort_unstable();

    let mut probes = Vec::with_capacity(cells.len());
    for &cell in &cells {
        let shifted = |d: f64| {
            let mut p = psi.clone();
            p[cell] += d;
            p
        };
        let jp = model.evaluate(&shifted(settings.step), false, Some(&base))?.report.j;
        let jm = model.evaluate(&shifted(-settings.step), false, Some(&base))?.report.j;
        let fd = (jp - jm) / (2.0 * settings.step);
        let adjoint = sens.dj_dpsi[cell];
        let rel_error = if fd != 0.0 {
            (adjoint - fd).abs() / fd.abs()
        } else {
            adjoint.abs()
        };
        probes.push(GradientProbe {
            cell,
            adjoint,
            finite_difference: fd,
            rel_error,
        });
    }
    let worst = probes
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .cloned();
    let report = match worst {
        Some(w) => OracleReport::with_error(
            "adjoint gradient",
            w.adjoint,
            w.finite_difference,
            w.rel_error,
            settings.tolerance,
            started,
        ),
        None => OracleReport::with_error("adjoint gradient", 0.0, 0.0, 0.0, settings.tolerance, started),
    };
    Ok(GradientAudit { probes, report })
}

/// Unprojected vs sharply projected evaluation of one design.
#[derive(Clone, Debug, PartialEq)]
pub struct SharpComparison {
    pub beta: f64,
    pub smooth: ObjectiveReport,
    pub sharp: ObjectiveReport,
}

impl SharpComparison {
    fn rel(a: f64, b: f64) -> f64 {
        if a != 0.0 {
            (b - a).abs() / a.abs()
        } else {
            (b - a).abs()
        }
    }

    pub fn rel_j(&self) -> f64 {
        Self::rel(self.smooth.j, self.sharp.j)
    }

    pub fn rel_vdot1(&self) -> f64 {
        Self::rel(self.smooth.vdot1, self.sharp.vdot1)
    }

    pub fn rel_tout1(&self) -> f64 {
        Self::rel(self.smooth.tout1, self.sharp.tout1)
    }
}

impl fmt::Display for SharpComparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>12} {:>12} {:>12}", "", "J", "Vdot1", "Tout1")?;
        writeln!(f, "{:<12} {:>12.6} {:>12.6} {:>12.6}", "smooth", self.smooth.j, self.smooth.vdot1, self.smooth.tout1)?;
        writeln!(
            f,
            "{:<12} {:>12.6} {:>12.6} {:>12.6}",
            format!("beta={}", self.beta),
            self.sharp.j,
            self.sharp.vdot1,
            self.sharp.tout1
        )?;
        write!(
            f,
            "{:<12} {:>11.2}% {:>11.2}% {:>11.2}%",
            "discrepancy",
            100.0 * self.rel_j(),
            100.0 * self.rel_vdot1(),
            100.0 * self.rel_tout1()
        )
    }
}

/// Re-evaluates a design with the threshold projection at `beta` and
/// compares with the unprojected evaluation.
pub fn sharp_reanalysis(model: &Model, psi: &[f64], beta: f64, eta: f64) -> Result<SharpComparison> {
    let smooth = model.evaluate(psi, false, None)?;
    let mut settings = model.settings.clone();
    settings.filter.beta = beta;
    settings.filter.eta = eta;
    let sharp_model = model.with_settings(settings)?;
    let sharp = sharp_model.evaluate(psi, true, Some(&smooth))?;
    Ok(SharpComparison {
        beta,
        smooth: smooth.report,
        sharp: sharp.report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::generate_reference_design;

    #[test]
    fn analytic_flow_oracles() {
        for report in [poiseuille_case().unwrap(), darcy_case().unwrap(), channel_mass_balance_case().unwrap()] {
            assert!(report.pass, "{report}");
        }
    }

    #[test]
    fn oracle_pass_flag_follows_tolerance() {
        let t = Instant::now();
        assert!(OracleReport::compare("a", 1.04, 1.0, 0.05, t).pass);
        assert!(!OracleReport::compare("a", 1.06, 1.0, 0.05, t).pass);
        let csv = oracle_csv(&[OracleReport::compare("a", 1.0, 1.0, 0.05, t)]);
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn frozen_cells_have_zero_gradient() {
        let cfg = audit_config();
        let model = cfg.build_model().unwrap();
        let psi = audit_design(&model);
        let b = model.evaluate(&psi, false, None).unwrap();
        let sens = model.sensitivity(&b).unwrap();
        let frozen: Vec<usize> = (0..model.n_cells()).filter(|&c| !model.domain.is_design(c)).collect();
        assert!(!frozen.is_empty());
        for c in frozen {
            assert_eq!(sens.dj_dpsi[c], 0.0);
        }
    }

    #[test]
    fn loose_tolerances_degrade_the_audit() {
        let mut cfg = audit_config();
        cfg.grid.nx = 16;
        cfg.grid.ny = 8;
        cfg = cfg.with_arrangement(FlowArrangement::Counter);
        let tight = AuditSettings {
            n_probes: 4,
            ..Default::default()
        };
        let loose = AuditSettings {
            solver_tol: 1e-4,
            ..tight.clone()
        };
        let a = gradient_audit(&cfg, &tight).unwrap();
        let b = gradient_audit(&cfg, &loose).unwrap();
        assert!(a.report.pass, "{}", a.report);
        assert!(b.report.rel_error > a.report.rel_error);
    }

    #[test]
    fn binary_design_is_unchanged_by_projection() {
        let mut cfg = CaseConfig::default();
        cfg.grid = GridSpec {
            nx: 16,
            ny: 12,
            nz: 1,
            lx: 2.0,
            ly: 1.0,
            lz: 1.0,
            symmetry: false,
        };
        let cfg = cfg.with_arrangement(FlowArrangement::Counter);
        let model = cfg.build_model().unwrap();
        let d = generate_reference_design(&model.grid, &model.patches, cfg.arrangement).unwrap();
        let binary: Vec<f64> = d.gamma.iter().map(|&g| if g > 0.5 { 1.0 } else { 0.0 }).collect();
        let smooth = model.analyze_gamma(&binary).unwrap();
        let projected: Vec<f64> = binary.iter().map(|&g| crate::field_ops::project(g, 8.0, 0.5)).collect();
        let sharp = model.analyze_gamma(&projected).unwrap();
        assert!((smooth.report.j - sharp.report.j).abs() <= 1e-12 * smooth.report.j.abs());
    }
}
