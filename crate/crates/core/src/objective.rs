//! Heat-transfer objective and its discrete adjoint with respect to the raw
//! design field.

use crate::energy::{summed_velocity, EnergyLayout, EnergySettings, TemperatureField};
use crate::error::{Error, Result};
use crate::field_ops::{project, project_derivative, DensityField, DesignDomain, FilterSettings, HelmholtzFilter};
use crate::flow::{outward_sign, FlowSettings, FlowSolver, FlowState, LinearizedFlow};
use crate::materials::{d_alpha1, d_alpha2, d_peclet, InterpolationSettings, MaterialFields};
use crate::mesh::{BoundaryPatches, Grid};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveReport {
    pub j: f64,
    pub j1: f64,
    pub j2: f64,
    pub vdot1: f64,
    pub vdot2: f64,
    pub tout1: f64,
    pub tout2: f64,
}

/// `J = Σ_out1 φ₁(1 − T) + Σ_out2 φ₂ T` with outward face fluxes φ.
pub fn evaluate_objective(
    grid: &Grid,
    patches: &BoundaryPatches,
    flows: [&FlowState; 2],
    temp: &[f64],
) -> ObjectiveReport {
    let mut acc = [(0.0, 0.0); 2];
    for (fluid, faces) in [&patches.outlet1, &patches.outlet2].into_iter().enumerate() {
        for &f in faces {
            let (axis, _) = grid.face_coords(f);
            let phi = outward_sign(grid, f) * flows[fluid].u[f] * grid.face_area(axis);
            let (m, p) = grid.face_cells(f);
            let t = temp[m.or(p).expect("boundary face")];
            acc[fluid].0 += phi;
            acc[fluid].1 += phi * t;
        }
    }
    let (vdot1, heat1) = acc[0];
    let (vdot2, heat2) = acc[1];
    let j1 = vdot1 - heat1;
    let j2 = heat2;
    let mean = |h: f64, v: f64| if v != 0.0 { h / v } else { 0.0 };
    ObjectiveReport {
        j: j1 + j2,
        j1,
        j2,
        vdot1,
        vdot2,
        tout1: mean(heat1, vdot1),
        tout2: mean(heat2, vdot2),
    }
}

/// Physical and numerical parameters of an analysis.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicsSettings {
    pub reynolds: [f64; 2],
    pub interpolation: InterpolationSettings,
    pub filter: FilterSettings,
    pub flow: FlowSettings,
    pub energy: EnergySettings,
    /// Relative tolerance of the adjoint flow solves.
    pub adjoint_tol: f64,
}

impl PhysicsSettings {
    pub fn validate(&self) -> Result<()> {
        for (i, re) in self.reynolds.iter().enumerate() {
            if !(*re > 0.0 && re.is_finite()) {
                return Err(Error::param(if i == 0 { "Re1" } else { "Re2" }, "must be positive"));
            }
        }
        self.interpolation.validate()?;
        self.filter.validate()?;
        self.flow.validate()
    }

    /// Tightens every PDE tolerance, as used by finite-difference checks.
    pub fn tightened(&self, tol: f64) -> Self {
        let mut s = self.clone();
        s.flow.tol = tol;
        s.energy.tol = tol;
        s.adjoint_tol = tol;
        s
    }
}

/// All states of one analysis.
#[derive(Clone, Debug)]
pub struct StateBundle {
    pub density: DensityField,
    pub materials: MaterialFields,
    pub flows: [FlowState; 2],
    pub temperature: TemperatureField,
    pub report: ObjectiveReport,
}

impl StateBundle {
    pub fn converged(&self) -> bool {
        self.flows.iter().all(|f| f.converged)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityField {
    pub dj_dpsi: Vec<f64>,
    /// Derivative with respect to the physical field the solvers saw.
    pub dj_dgamma_phys: Vec<f64>,
}

/// A grid, port layout and parameter set wired to the solvers.
pub struct Model {
    pub grid: Grid,
    pub patches: BoundaryPatches,
    pub domain: DesignDomain,
    pub settings: PhysicsSettings,
    filter: HelmholtzFilter,
    flow: [FlowSolver; 2],
    energy: EnergyLayout,
}

impl Model {
    pub fn new(grid: Grid, patches: BoundaryPatches, settings: PhysicsSettings) -> Result<Self> {
        settings.validate()?;
        let domain = DesignDomain::new(&grid, &patches)?;
        let filter = HelmholtzFilter::new(&grid, settings.filter.radius)?;
        let flow = [FlowSolver::new(&grid, &patches, 0), FlowSolver::new(&grid, &patches, 1)];
        let energy = EnergyLayout::new(&grid, &patches);
        Ok(Model {
            grid,
            patches,
            domain,
            settings,
            filter,
            flow,
            energy,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.grid.n_cells()
    }

    pub fn with_settings(&self, settings: PhysicsSettings) -> Result<Model> {
        Model::new(self.grid.clone(), self.patches.clone(), settings)
    }

    pub fn density(&self, psi: &[f64], projected: bool) -> Result<DensityField> {
        if psi.len() != self.n_cells() {
            return Err(Error::SizeMismatch {
                expected: self.n_cells(),
                got: psi.len(),
            });
        }
        let gamma: Vec<f64> = self.filter.apply(psi)?.into_iter().map(|g| g.clamp(0.0, 1.0)).collect();
        let gamma_hat = projected.then(|| {
            gamma
                .iter()
                .map(|&g| project(g, self.settings.filter.beta, self.settings.filter.eta))
                .collect()
        });
        Ok(DensityField {
            psi: psi.to_vec(),
            gamma,
            gamma_hat,
        })
    }

    pub fn flow_layout(&self, fluid: usize) -> &crate::flow::FlowLayout {
        &self.flow[fluid].layout
    }

    pub fn flow_settings(&self, fluid: usize) -> FlowSettings {
        FlowSettings {
            reynolds: self.settings.reynolds[fluid],
            ..self.settings.flow.clone()
        }
    }

    /// Solves all three PDEs for a given density and evaluates J.
    pub fn analyze(&self, density: DensityField, warm: Option<&StateBundle>) -> Result<StateBundle> {
        let materials = MaterialFields::from_design(density.physical(), &self.settings.interpolation);
        let mut flows = Vec::with_capacity(2);
        for fluid in 0..2 {
            let w = warm.map(|b| &b.flows[fluid]);
            flows.push(self.flow[fluid].solve(&self.grid, &materials.alpha[fluid], &self.flow_settings(fluid), w)?);
        }
        let flows: [FlowState; 2] = flows.try_into().expect("two fluids");
        let u_sum = summed_velocity([&flows[0], &flows[1]]);
        let k: Vec<f64> = materials.peclet.iter().map(|p| 1.0 / p).collect();
        let temperature = self.energy.solve(
            &u_sum,
            &k,
            &self.settings.energy,
            warm.map(|b| b.temperature.t.as_slice()),
        )?;
        let report = evaluate_objective(&self.grid, &self.patches, [&flows[0], &flows[1]], &temperature.t);
        Ok(StateBundle {
            density,
            materials,
            flows,
            temperature,
            report,
        })
    }

    pub fn evaluate(&self, psi: &[f64], projected: bool, warm: Option<&StateBundle>) -> Result<StateBundle> {
        let density = self.density(psi, projected)?;
        self.analyze(density, warm)
    }

    /// Analyze a physical γ field directly (no filtering).
    pub fn analyze_gamma(&self, gamma: &[f64]) -> Result<StateBundle> {
        if gamma.len() != self.n_cells() {
            return Err(Error::SizeMismatch {
                expected: self.n_cells(),
                got: gamma.len(),
            });
        }
        let density = DensityField {
            psi: gamma.to_vec(),
            gamma: gamma.to_vec(),
            gamma_hat: None,
        };
        self.analyze(density, None)
    }

    /// Net heat balance of the energy solution (zero up to solver tolerance).
    pub fn heat_balance(&self, bundle: &StateBundle) -> f64 {
        let u_sum = summed_velocity([&bundle.flows[0], &bundle.flows[1]]);
        let k: Vec<f64> = bundle.materials.peclet.iter().map(|p| 1.0 / p).collect();
        self.energy.boundary_heat_balance(&bundle.temperature.t, &u_sum, &k)
    }

    /// Discrete adjoint of J with respect to ψ.
    pub fn sensitivity(&self, bundle: &StateBundle) -> Result<SensitivityField> {
        let grid = &self.grid;
        let n_faces = grid.n_faces();
        let flows = [&bundle.flows[0], &bundle.flows[1]];
        let temp = &bundle.temperature.t;
        let u_sum = summed_velocity(flows);
        let pe = &bundle.materials.peclet;
        let k: Vec<f64> = pe.iter().map(|p| 1.0 / p).collect();

        // ∂J/∂T and ∂J/∂u on the outlets.
        let mut dj_dt = vec![0.0; grid.n_cells()];
        let mut dj_du = [vec![0.0; n_faces], vec![0.0; n_faces]];
        for (fluid, faces) in [&self.patches.outlet1, &self.patches.outlet2].into_iter().enumerate() {
            for &f in faces {
                let (axis, _) = grid.face_coords(f);
                let na = outward_sign(grid, f) * grid.face_area(axis);
                let (m, p) = grid.face_cells(f);
                let c = m.or(p).expect("boundary face");
                if fluid == 0 {
                    dj_dt[c] -= na * flows[0].u[f];
                    dj_du[0][f] += na * (1.0 - temp[c]);
                } else {
                    dj_dt[c] += na * flows[1].u[f];
                    dj_du[1][f] += na * temp[c];
                }
            }
        }

        let adj_energy = EnergySettings {
            tol: self.settings.adjoint_tol.min(self.settings.energy.tol),
            ..self.settings.energy.clone()
        };
        let (lambda_t, _) = self.energy.solve_adjoint(&u_sum, &k, &dj_dt, &adj_energy)?;
        let du_energy = self.energy.velocity_sensitivity(&lambda_t, temp, &u_sum, n_faces);

        let mut dj_dalpha = [vec![0.0; grid.n_cells()], vec![0.0; grid.n_cells()]];
        for fluid in 0..2 {
            let layout = &self.flow[fluid].layout;
            let x = layout.pack(flows[fluid]);
            let mut rhs = vec![0.0; layout.n_unknowns()];
            for (r, v) in rhs.iter_mut().enumerate().take(layout.n_vel) {
                let f = layout.face_of_unknown(r);
                *v = dj_du[fluid][f] - du_energy[f];
            }
            let settings = self.flow_settings(fluid);
            let lin = LinearizedFlow::new(layout, &x, &bundle.materials.alpha[fluid], &settings)?;
            let (mu, stats) = lin.solve_transpose(&rhs, self.settings.adjoint_tol)?;
            log::debug!("fluid {} adjoint: {} iterations", fluid + 1, stats.iterations);
            dj_dalpha[fluid] = layout
                .alpha_sensitivity(&mu, &x)
                .into_iter()
                .map(|v| -v)
                .collect();
        }
        let lr_dk = self.energy.diffusivity_sensitivity(&lambda_t, temp, &k);

        let m = &self.settings.interpolation;
        let phys = bundle.density.physical();
        let dj_dphys: Vec<f64> = (0..grid.n_cells())
            .map(|c| {
                let g = phys[c];
                dj_dalpha[0][c] * d_alpha1(g, m) + dj_dalpha[1][c] * d_alpha2(g, m)
                    - lr_dk[c] * (-d_peclet(g, m) / (pe[c] * pe[c]))
            })
            .collect();

        let mut dj_dgamma = dj_dphys.clone();
        if bundle.density.gamma_hat.is_some() {
            let (beta, eta) = (self.settings.filter.beta, self.settings.filter.eta);
            for (d, &g) in dj_dgamma.iter_mut().zip(&bundle.density.gamma) {
                *d *= project_derivative(g, beta, eta);
            }
        }
        // γ was clamped to [0, 1] after filtering; the clamp is inactive for
        // ψ ∈ [0, 1] up to round-off, so it is not differentiated.
        let mut dj_dpsi = self.filter.adjoint(&dj_dgamma)?;
        self.domain.mask_sensitivity(&mut dj_dpsi);
        if dj_dpsi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotConverged {
                solver: "adjoint",
                iterations: 0,
                residual: f64::NAN,
            });
        }
        Ok(SensitivityField {
            dj_dpsi,
            dj_dgamma_phys: dj_dphys,
        })
    }
}
