use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use hxtopo::config::{CaseConfig, StudyPreset};
use hxtopo::export::{read_vtk_dimensions, read_vtk_scalar, write_history, write_state_vtk};
use hxtopo::objective::{Model, ObjectiveReport, StateBundle};
use hxtopo::optimizer::{run_optimization, OptimizationResult};
use hxtopo::reference::generate_reference_design;
use hxtopo::verification::{audit_config, gradient_audit, sharp_reanalysis, AuditSettings};

#[derive(Parser)]
#[command(name = "hxtopo", version, about = "Topology optimization of two-fluid heat exchangers")]
struct Cli {
    /// Increase log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the optimization and write history.csv and final.vtk.
    Optimize {
        #[command(flatten)]
        case: CaseArgs,
        /// Override the case's iteration limit.
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// Evaluate the objective for a γ field read from a VTK file.
    Analyze {
        /// VTK file holding the design.
        design: PathBuf,
        #[command(flatten)]
        case: CaseArgs,
        /// Scalar field to read as γ.
        #[arg(long, default_value = "gamma")]
        field: String,
        /// Compare the filtered design with its projection, e.g. `beta=8` or
        /// `beta=8,eta=0.5`; reads the `psi` field.
        #[arg(long, value_name = "beta=B[,eta=E]")]
        project: Option<String>,
    },
    /// Evaluate the straight-channel reference design.
    Reference {
        #[command(flatten)]
        case: CaseArgs,
    },
    /// Check adjoint gradients against central finite differences.
    Gradcheck {
        /// Case file; defaults to the 32×16 2D counter-flow case.
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        probes: usize,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Run a list of study presets and tabulate J.
    Sweep {
        #[command(flatten)]
        case: CaseArgs,
        /// Comma-separated preset names.
        #[arg(long, value_delimiter = ',', default_value = "re50,baseline,re200")]
        presets: Vec<String>,
        #[arg(long)]
        max_iters: Option<usize>,
    },
}

#[derive(Args)]
struct CaseArgs {
    /// Case file (`key = value` lines); omitted keys take baseline values.
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CaseArgs {
    fn load(&self) -> Result<CaseConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
                CaseConfig::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
            }
            None => CaseConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Solver(String),
}

impl From<hxtopo::Error> for Failure {
    fn from(e: hxtopo::Error) -> Self {
        if e.is_solver_failure() {
            Failure::Solver(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let outcome = match cli.command {
        Command::Optimize { case, max_iters } => optimize(&case, max_iters),
        Command::Analyze {
            design,
            case,
            field,
            project,
        } => analyze(&design, &case, &field, project.as_deref()),
        Command::Reference { case } => reference(&case),
        Command::Gradcheck {
            config,
            probes,
            tolerance,
        } => gradcheck(config.as_deref(), probes, tolerance),
        Command::Sweep {
            case,
            presets,
            max_iters,
        } => sweep(&case, &presets, max_iters),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Solver(msg)) => {
            eprintln!("solver failure: {msg}");
            ExitCode::from(2)
        }
    }
}

fn print_report(label: &str, r: &ObjectiveReport) {
    println!(
        "{label}: J = {:.6e}  J1 = {:.6e}  J2 = {:.6e}  Vdot1 = {:.6e}  Vdot2 = {:.6e}  Tout1 = {:.6}  Tout2 = {:.6}",
        r.j, r.j1, r.j2, r.vdot1, r.vdot2, r.tout1, r.tout2
    );
}

fn require_converged(bundle: &StateBundle) -> Result<(), Failure> {
    if bundle.converged() {
        return Ok(());
    }
    Err(Failure::Solver(format!(
        "flow did not converge (residuals {:.2e}, {:.2e})",
        bundle.flows[0].residuals.max(),
        bundle.flows[1].residuals.max()
    )))
}

fn run_case(cfg: &CaseConfig, dir: &Path) -> Result<OptimizationResult, Failure> {
    let model = cfg.build_model()?;
    fs::create_dir_all(dir)?;
    let started = Instant::now();
    let result = run_optimization(&model, &cfg.optimizer)?;
    write_history(&dir.join("history.csv"), &result.history)?;
    let sens = result.final_sensitivity.as_ref().map(|s| s.dj_dpsi.as_slice());
    write_state_vtk(&dir.join("final.vtk"), &model.grid, &result.final_state, sens)?;
    log::info!("{} steps in {:.1?}: {}", result.history.len(), started.elapsed(), result.termination);
    Ok(result)
}

fn optimize(case: &CaseArgs, max_iters: Option<usize>) -> Result<(), Failure> {
    let mut cfg = case.load()?;
    if let Some(n) = max_iters {
        cfg.optimizer.max_iters = n;
    }
    let result = run_case(&cfg, &cfg.out_dir)?;
    print_report("final", &result.final_state.report);
    println!("{} steps, {}", result.history.len(), result.termination);
    println!("wrote {}", cfg.out_dir.display());
    match result.termination {
        hxtopo::optimizer::Termination::SolverFailure(msg) => Err(Failure::Solver(msg)),
        _ => Ok(()),
    }
}

/// Parses `beta=8` or `beta=8,eta=0.5`.
fn parse_projection(text: &str) -> Result<(f64, f64), Failure> {
    let mut beta = None;
    let mut eta = 0.5;
    for part in text.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("bad --project entry `{part}`")))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("bad number in --project: `{value}`")))?;
        match key.trim() {
            "beta" => beta = Some(v),
            "eta" => eta = v,
            other => return Err(Failure::Usage(format!("unknown --project key `{other}`"))),
        }
    }
    let beta = beta.ok_or_else(|| Failure::Usage("--project needs beta=<value>".into()))?;
    Ok((beta, eta))
}

fn read_design(path: &Path, model: &Model, field: &str) -> Result<Vec<f64>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let dims = read_vtk_dimensions(&text)?;
    if dims != model.grid.n {
        return Err(Failure::Usage(format!(
            "{} has dimensions {:?}, the case grid is {:?}",
            path.display(),
            dims,
            model.grid.n
        )));
    }
    Ok(read_vtk_scalar(&text, field)?)
}

fn analyze(design: &Path, case: &CaseArgs, field: &str, project: Option<&str>) -> Result<(), Failure> {
    let cfg = case.load()?;
    let model = cfg.build_model()?;
    if let Some(spec) = project {
        let (beta, eta) = parse_projection(spec)?;
        let psi = read_design(design, &model, "psi")?;
        let cmp = sharp_reanalysis(&model, &psi, beta, eta)?;
        println!("{cmp}");
        return Ok(());
    }
    let gamma = read_design(design, &model, field)?;
    let bundle = model.analyze_gamma(&gamma)?;
    require_converged(&bundle)?;
    print_report("analysis", &bundle.report);
    if case.out.is_some() {
        fs::create_dir_all(&cfg.out_dir)?;
        write_state_vtk(&cfg.out_dir.join("analysis.vtk"), &model.grid, &bundle, None)?;
    }
    Ok(())
}

fn reference_bundle(cfg: &CaseConfig) -> Result<(Model, StateBundle), Failure> {
    let model = cfg.build_model()?;
    let design = generate_reference_design(&model.grid, &model.patches, cfg.arrangement)?;
    let bundle = model.analyze_gamma(&design.gamma)?;
    require_converged(&bundle)?;
    Ok((model, bundle))
}

fn reference(case: &CaseArgs) -> Result<(), Failure> {
    let cfg = case.load()?;
    let (model, bundle) = reference_bundle(&cfg)?;
    print_report("reference", &bundle.report);
    if case.out.is_some() {
        fs::create_dir_all(&cfg.out_dir)?;
        write_state_vtk(&cfg.out_dir.join("reference.vtk"), &model.grid, &bundle, None)?;
    }
    Ok(())
}

fn gradcheck(config: Option<&Path>, probes: usize, tolerance: f64) -> Result<(), Failure> {
    let cfg = match config {
        Some(_) => CaseArgs {
            config: config.map(Path::to_path_buf),
            out: None,
        }
        .load()?,
        None => audit_config(),
    };
    if probes == 0 {
        return Err(Failure::Usage("--probes must be at least 1".into()));
    }
    let settings = AuditSettings {
        n_probes: probes,
        tolerance,
        ..AuditSettings::default()
    };
    let audit = gradient_audit(&cfg, &settings)?;
    println!("{:>8} {:>14} {:>14} {:>10}", "cell", "adjoint", "central FD", "rel.err");
    for p in &audit.probes {
        println!(
            "{:>8} {:>14.6e} {:>14.6e} {:>10.2e}",
            p.cell, p.adjoint, p.finite_difference, p.rel_error
        );
    }
    println!("max relative error {:.3e} (tolerance {:.0e})", audit.report.rel_error, tolerance);
    if audit.report.pass {
        Ok(())
    } else {
        Err(Failure::Solver(format!(
            "gradient check failed: {:.3e} > {:.0e}",
            audit.report.rel_error, tolerance
        )))
    }
}

fn sweep(case: &CaseArgs, presets: &[String], max_iters: Option<usize>) -> Result<(), Failure> {
    let base = case.load()?;
    let presets: Vec<StudyPreset> = presets
        .iter()
        .map(|p| p.parse())
        .collect::<hxtopo::Result<_>>()?;
    let mut rows = Vec::new();
    let mut failed = None;
    for preset in presets {
        let mut cfg = preset.apply(&base);
        if let Some(n) = max_iters {
            cfg.optimizer.max_iters = n;
        }
        let dir = base.out_dir.join(preset.name());
        let row = if preset.is_reference() {
            reference_bundle(&cfg).and_then(|(model, bundle)| {
                fs::create_dir_all(&dir)?;
                write_state_vtk(&dir.join("reference.vtk"), &model.grid, &bundle, None)?;
                Ok((bundle.report, "-".to_string(), "evaluated".to_string()))
            })
        } else {
            run_case(&cfg, &dir).map(|r| {
                (
                    r.final_state.report,
                    r.history.len().to_string(),
                    r.termination.to_string(),
                )
            })
        };
        match row {
            Ok((report, steps, status)) => rows.push((preset.name(), report, steps, status)),
            Err(Failure::Solver(msg)) => {
                eprintln!("{}: solver failure: {msg}", preset.name());
                failed = Some(msg);
            }
            Err(e) => return Err(e),
        }
    }
    println!(
        "{:<14} {:>12} {:>12} {:>12} {:>10} {:>6}  status",
        "preset", "J", "Vdot1", "Vdot2", "Tout1", "steps"
    );
    for (name, r, steps, status) in &rows {
        println!(
            "{:<14} {:>12.6e} {:>12.6e} {:>12.6e} {:>10.6} {:>6}  {}",
            name, r.j, r.vdot1, r.vdot2, r.tout1, steps, status
        );
    }
    match failed {
        Some(msg) => Err(Failure::Solver(msg)),
        None => Ok(()),
    }
}
