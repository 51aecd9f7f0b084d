//! Sequential linear programming on the box-constrained design field.

use std::fmt;

use crate::error::{Error, Result};
use crate::objective::{Model, ObjectiveReport, SensitivityField, StateBundle};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSettings {
    pub move_limit: f64,
    pub max_iters: usize,
    pub conv_tol: f64,
    pub conv_window: usize,
    /// Step at which tanh projection is switched on; `None` keeps it off.
    pub projection_start: Option<usize>,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            move_limit: 0.1,
            max_iters: 150,
            conv_tol: 1e-4,
            conv_window: 10,
            projection_start: None,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.move_limit > 0.0 && self.move_limit <= 1.0) {
            return Err(Error::param("move_limit", "must lie in (0, 1]"));
        }
        if self.max_iters == 0 {
            return Err(Error::param("max_iters", "must be at least 1"));
        }
        if !(self.conv_tol > 0.0) {
            return Err(Error::param("conv_tol", "must be positive"));
        }
        if self.conv_window == 0 {
            return Err(Error::param("conv_window", "must be at least 1"));
        }
        Ok(())
    }
}

/// One optimization step as written to the history file.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRecord {
    pub step: usize,
    pub report: ObjectiveReport,
    pub flow_residual: [f64; 2],
    pub energy_residual: f64,
    pub move_limit: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Termination {
    Converged,
    MaxIterations,
    SolverFailure(String),
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Termination::Converged => write!(f, "converged"),
            Termination::MaxIterations => write!(f, "iteration limit reached"),
            Termination::SolverFailure(msg) => write!(f, "aborted after solver failure: {msg}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizationResult {
    pub psi: Vec<f64>,
    pub history: Vec<HistoryRecord>,
    /// States of the last accepted design.
    pub final_state: StateBundle,
    pub final_sensitivity: Option<SensitivityField>,
    pub termination: Termination,
}

impl OptimizationResult {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }

    /// Step at which the convergence test first passed.
    pub fn converged_at(&self) -> Option<usize> {
        self.converged().then(|| self.history.last().map(|r| r.step)).flatten()
    }
}

/// Solution of the box-constrained LP subproblem: every variable moves by
/// the move limit in the direction of its gradient and is clipped to [0, 1].
pub fn slp_update(psi: &[f64], grad: &[f64], move_limit: f64) -> Result<Vec<f64>> {
    if psi.len() != grad.len() {
        return Err(Error::SizeMismatch {
            expected: psi.len(),
            got: grad.len(),
        });
    }
    Ok(psi
        .iter()
        .zip(grad)
        .map(|(&p, &g)| step(p, g, move_limit))
        .collect())
}

#[inline]
fn step(p: f64, g: f64, m: f64) -> f64 {
    if g > 0.0 {
        (p + m).min(1.0)
    } else if g < 0.0 {
        (p - m).max(0.0)
    } else {
        p
    }
}

/// Per-variable move limits: shrink where the gradient sign keeps flipping,
/// recover where it is steady, never above the global limit.
#[derive(Clone, Debug)]
struct MoveLimits {
    limits: Vec<f64>,
    last_sign: Vec<i8>,
}

impl MoveLimits {
    const SHRINK: f64 = 0.7;
    const GROW: f64 = 1.2;
    const FLOOR: f64 = 1e-3;

    fn new(n: usize, m: f64) -> Self {
        MoveLimits {
            limits: vec![m; n],
            last_sign: vec![0; n],
        }
    }

    fn update(&mut self, grad: &[f64], global: f64) {
        for ((m, s), &g) in self.limits.iter_mut().zip(self.last_sign.iter_mut()).zip(grad) {
            let sign = if g > 0.0 {
                1
            } else if g < 0.0 {
                -1
            } else {
                0
            };
            if sign != 0 && *s != 0 && sign != *s {
                *m *= Self::SHRINK;
            } else if sign != 0 {
                *m *= Self::GROW;
            }
            *m = m.clamp(Self::FLOOR.min(global), global);
            if sign != 0 {
                *s = sign;
            }
        }
    }
}

fn record(step: usize, bundle: &StateBundle, move_limit: f64) -> HistoryRecord {
    HistoryRecord {
        step,
        report: bundle.report,
        flow_residual: [bundle.flows[0].residuals.max(), bundle.flows[1].residuals.max()],
        energy_residual: bundle.temperature.residual,
        move_limit,
    }
}

fn window_converged(history: &[HistoryRecord], window: usize, tol: f64, since: usize) -> bool {
    let usable = &history[since..];
    if usable.len() < window + 1 {
        return false;
    }
    usable[usable.len() - window - 1..].windows(2).all(|w| {
        let (a, b) = (w[0].report.j, w[1].report.j);
        (b - a).abs() <= tol * b.abs()
    })
}

/// Runs the optimization loop from ψ = 0.5 in the design domain.
pub fn run_optimization(model: &Model, settings: &OptimizerSettings) -> Result<OptimizationResult> {
    run_optimization_with(model, settings, |_, _| {})
}

/// Like [`run_optimization`], calling `observer` after every accepted step.
pub fn run_optimization_with(
    model: &Model,
    settings: &OptimizerSettings,
    mut observer: impl FnMut(&HistoryRecord, &StateBundle),
) -> Result<OptimizationResult> {
    settings.validate()?;
    let n = model.n_cells();
    let mut psi = model.domain.initial_psi(0.5);
    let mut global = settings.move_limit;
    let mut limits = MoveLimits::new(n, global);
    let mut history: Vec<HistoryRecord> = Vec::new();
    let mut window_start = 0;
    let mut decreases = 0;

    let projected_at = |k: usize| settings.projection_start.is_some_and(|s| k >= s);
    let mut current = model.evaluate(&psi, projected_at(0), None)?;
    if !current.converged() {
        return Err(Error::NotConverged {
            solver: "flow",
            iterations: current.flows[0].residuals.simple_iterations,
            residual: current.flows[0].residuals.max().max(current.flows[1].residuals.max()),
        });
    }

    let mut termination = Termination::MaxIterations;
    let mut sensitivity = None;
    let mut k = 0;
    loop {
        let rec = record(k, &current, global);
        log::info!(
            "step {:>4}  J {:.6e}  J1 {:.4e}  J2 {:.4e}  V1 {:.4e}  V2 {:.4e}  move {:.3}",
            k,
            rec.report.j,
            rec.report.j1,
            rec.report.j2,
            rec.report.vdot1,
            rec.report.vdot2,
            global
        );
        if let Some(prev) = history.last() {
            if rec.report.j < prev.report.j {
                decreases += 1;
                if decreases >= 3 {
                    global *= 0.5;
                    decreases = 0;
                }
            } else {
                decreases = 0;
            }
        }
        observer(&rec, &current);
        history.push(rec);
        if window_converged(&history, settings.conv_window, settings.conv_tol, window_start) {
            termination = Termination::Converged;
            break;
        }
        if history.len() >= settings.max_iters {
            break;
        }

        let sens = match model.sensitivity(&current) {
            Ok(s) => s,
            Err(e) if e.is_solver_failure() => {
                termination = Termination::SolverFailure(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        limits.update(&sens.dj_dpsi, global);

        // Trial step; on solver failure retry with a smaller move.
        let mut accepted = None;
        let mut failure = String::new();
        let mut shrink = 1.0;
        for _ in 0..4 {
            let mut trial: Vec<f64> = psi
                .iter()
                .zip(&sens.dj_dpsi)
                .zip(&limits.limits)
                .map(|((&p, &g), &m)| step(p, g, shrink * m))
                .collect();
            model.domain.enforce(&mut trial);
            match model.evaluate(&trial, projected_at(k + 1), Some(&current)) {
                Ok(b) if b.converged() => {
                    accepted = Some((trial, b));
                    break;
                }
                Ok(b) => {
                    failure = format!(
                        "flow not converged (residuals {:.2e}, {:.2e})",
                        b.flows[0].residuals.max(),
                        b.flows[1].residuals.max()
                    );
                }
                Err(e) if e.is_solver_failure() => failure = e.to_string(),
                Err(e) => return Err(e),
            }
            log::warn!("step {}: {failure}; retrying with a smaller move", k + 1);
            shrink *= 0.5;
        }
        sensitivity = Some(sens);
        match accepted {
            Some((p, b)) => {
                psi = p;
                current = b;
            }
            None => {
                termination = Termination::SolverFailure(failure);
                break;
            }
        }
        k += 1;
        if settings.projection_start == Some(k) {
            // The objective jumps when projection switches on.
            window_start = history.len();
        }
    }

    Ok(OptimizationResult {
        psi,
        history,
        final_state: current,
        final_sensitivity: sensitivity,
        termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::tests::small_model;
    use proptest::prelude::*;

    #[test]
    fn lp_steps() {
        let out = slp_update(&[0.5, 0.95, 0.3, 0.02], &[1.0, 2.0, 0.0, -1.0], 0.1).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15);
        assert_eq!(out[1], 1.0);
        assert_eq!(out[2], 0.3);
        assert_eq!(out[3], 0.0);
        assert!(slp_update(&[0.5], &[1.0, 2.0], 0.1).is_err());
    }

    proptest! {
        #[test]
        fn update_stays_feasible(
            pairs in proptest::collection::vec((0.0f64..=1.0, -1.0f64..1.0), 1..50),
            m in 0.001f64..=1.0,
        ) {
            let (psi, grad): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let out = slp_update(&psi, &grad, m).unwrap();
            for ((&a, &b), &g) in psi.iter().zip(&out).zip(&grad) {
                prop_assert!((0.0..=1.0).contains(&b));
                prop_assert!((b - a).abs() <= m + 1e-15);
                if g == 0.0 { prop_assert_eq!(a, b); }
                if g > 0.0 { prop_assert!(b >= a); }
                if g < 0.0 { prop_assert!(b <= a); }
            }
        }
    }

    #[test]
    fn flat_objective_stops_after_one_window() {
        let mut model = small_model(12, 8);
        let mut s = model.settings.clone();
        s.interpolation.alpha_max = 0.0;
        s.interpolation.pe_s = s.interpolation.pe_f1;
        // Without penalization the open box only has a steady flow at
        // moderate Reynolds numbers.
        s.reynolds = [10.0, 10.0];
        model = model.with_settings(s).unwrap();
        let settings = OptimizerSettings {
            conv_window: 4,
            ..Default::default()
        };
        let result = run_optimization(&model, &settings).unwrap();
        assert!(result.converged());
        assert_eq!(result.history.len(), 5);
        let j0 = result.history[0].report.j;
        assert!(result.history.iter().all(|r| (r.report.j - j0).abs() <= 1e-12 * j0));
    }

    #[test]
    fn small_moves_mostly_ascend() {
        let model = small_model(16, 8);
        let settings = OptimizerSettings {
            move_limit: 0.005,
            max_iters: 25,
            conv_tol: 1e-12,
            ..Default::default()
        };
        let result = run_optimization(&model, &settings).unwrap();
        let h = &result.history;
        let ups = h.windows(2).filter(|w| w[1].report.j >= w[0].report.j).count();
        assert!(ups as f64 >= 0.95 * (h.len() - 1) as f64, "{ups} of {}", h.len() - 1);
        assert!(h.last().unwrap().report.j > h[0].report.j);
        assert!(result.psi.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn identical_runs_are_identical() {
        let model = small_model(12, 8);
        let settings = OptimizerSettings {
            max_iters: 6,
            ..Default::default()
        };
        let a = run_optimization(&model, &settings).unwrap();
        let b = run_optimization(&model, &settings).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.psi, b.psi);
    }
}
