//! Shared temperature field advected by both fluids.
//!
//! Cell-centred finite volumes with first-order upwind advection written in
//! advective form, `Σ_in F (T_c − T_up)`, and harmonic-mean diffusivity
//! `1/Pe`. The advective form keeps the matrix an M-matrix even when the
//! discrete flux carries a small divergence, so 0 ≤ T ≤ 1 holds exactly.
//! It differs from the conservative form only by `T_c · div F`, which is
//! at the flow solver's continuity tolerance.

use crate::error::{Error, Result};
use crate::flow::FlowState;
use crate::linalg::{fgmres, CsrMatrix, Ilu0, SolveStats, TripletBuilder};
use crate::mesh::{BoundaryPatches, FaceTag, Grid, PortId};

#[derive(Clone, Debug, PartialEq)]
pub struct EnergySettings {
    /// Relative residual target of the linear solve.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for EnergySettings {
    fn default() -> Self {
        EnergySettings {
            tol: 1e-8,
            max_iters: 3000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemperatureField {
    pub t: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

impl TemperatureField {
    pub fn min(&self) -> f64 {
        self.t.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.t.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Neighbor {
    Cell(usize),
    Fixed(f64),
    Closed,
}

#[derive(Clone, Copy, Debug)]
struct CellFace {
    face: usize,
    sign: f64,
    area: f64,
    /// Centre-to-centre (or centre-to-face) distance.
    dist: f64,
    nb: Neighbor,
}

/// Cell connectivity for the energy equation; built once per grid.
#[derive(Clone, Debug)]
pub struct EnergyLayout {
    n_cells: usize,
    faces: Vec<[CellFace; 6]>,
}

impl EnergyLayout {
    pub fn new(grid: &Grid, patches: &BoundaryPatches) -> Self {
        let n_cells = grid.n_cells();
        let mut faces = Vec::with_capacity(n_cells);
        for cell in 0..n_cells {
            let c = grid.cell_coords(cell);
            let mut list = [CellFace {
                face: 0,
                sign: 0.0,
                area: 0.0,
                dist: 0.0,
                nb: Neighbor::Closed,
            }; 6];
            for axis in 0..3 {
                for (k, plus) in [false, true].into_iter().enumerate() {
                    let face = grid.cell_face(c, axis, plus);
                    let (m, p) = grid.face_cells(face);
                    let other = if plus { p } else { m };
                    let (nb, dist) = match other {
                        Some(o) => (Neighbor::Cell(o), grid.h[axis]),
                        None => {
                            let nb = match patches.tag(face) {
                                FaceTag::Port(PortId::Inlet1) => Neighbor::Fixed(1.0),
                                FaceTag::Port(PortId::Inlet2) => Neighbor::Fixed(0.0),
                                _ => Neighbor::Closed,
                            };
                            (nb, 0.5 * grid.h[axis])
                        }
                    };
                    list[2 * axis + k] = CellFace {
                        face,
                        sign: if plus { 1.0 } else { -1.0 },
                        area: grid.face_area(axis),
                        dist,
                        nb,
                    };
                }
            }
            faces.push(list);
        }
        EnergyLayout { n_cells, faces }
    }

    fn face_conductance(&self, cf: &CellFace, cell: usize, k: &[f64]) -> f64 {
        match cf.nb {
            Neighbor::Cell(o) => harmonic(k[cell], k[o]) * cf.area / cf.dist,
            Neighbor::Fixed(_) => k[cell] * cf.area / cf.dist,
            Neighbor::Closed => 0.0,
        }
    }

    /// Linear system `A T = b` for a given face velocity sum and cell
    /// diffusivity `k = 1/Pe`.
    pub fn assemble(&self, u_sum: &[f64], k: &[f64]) -> (CsrMatrix, Vec<f64>) {
        let n = self.n_cells;
        let mut t = TripletBuilder::with_capacity(n, n, 7 * n);
        let mut b = vec![0.0; n];
        for (cell, list) in self.faces.iter().enumerate() {
            let mut diag = 0.0;
            for cf in list {
                let phi = cf.sign * u_sum[cf.face] * cf.area;
                let inflow = (-phi).max(0.0);
                let d = self.face_conductance(cf, cell, k);
                match cf.nb {
                    Neighbor::Cell(o) => {
                        diag += inflow + d;
                        t.push(cell, o, -inflow - d);
                    }
                    Neighbor::Fixed(v) => {
                        diag += inflow + d;
                        b[cell] += (inflow + d) * v;
                    }
                    Neighbor::Closed => {}
                }
            }
            t.push(cell, cell, diag);
        }
        (t.build(), b)
    }

    pub fn residual(&self, temp: &[f64], u_sum: &[f64], k: &[f64]) -> Vec<f64> {
        let (a, b) = self.assemble(u_sum, k);
        let mut r = a.mul_vec(temp);
        for (ri, bi) in r.iter_mut().zip(&b) {
            *ri -= bi;
        }
        r
    }

    pub fn solve(
        &self,
        u_sum: &[f64],
        k: &[f64],
        settings: &EnergySettings,
        warm: Option<&[f64]>,
    ) -> Result<TemperatureField> {
        if k.len() != self.n_cells {
            return Err(Error::SizeMismatch {
                expected: self.n_cells,
                got: k.len(),
            });
        }
        if k.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::param("Pe", "must be positive"));
        }
        let (a, b) = self.assemble(u_sum, k);
        let ilu = Ilu0::new(&a)?;
        let mut x = match warm {
            Some(w) if w.len() == self.n_cells => w.to_vec(),
            _ => vec![0.5; self.n_cells],
        };
        let stats = fgmres(
            |v, o| a.matvec(v, o),
            |r, z| {
                z.copy_from_slice(r);
                ilu.solve_in_place(z);
            },
            &b,
            &mut x,
            settings.tol,
            60,
            settings.max_iters,
        )
        .into_result("energy solve")?;
        Ok(TemperatureField {
            t: x,
            residual: stats.residual,
            iterations: stats.iterations,
        })
    }

    /// Solves `Aᵀ λ = g`.
    pub fn solve_adjoint(
        &self,
        u_sum: &[f64],
        k: &[f64],
        g: &[f64],
        settings: &EnergySettings,
    ) -> Result<(Vec<f64>, SolveStats)> {
        let (a, _) = self.assemble(u_sum, k);
        let at = a.transpose();
        let ilu = Ilu0::new(&at)?;
        let mut x = vec![0.0; self.n_cells];
        let stats = fgmres(
            |v, o| at.matvec(v, o),
            |r, z| {
                z.copy_from_slice(r);
                ilu.solve_in_place(z);
            },
            g,
            &mut x,
            settings.tol,
            60,
            settings.max_iters,
        )
        .into_result("adjoint energy solve")?;
        Ok((x, stats))
    }

    /// `λᵀ ∂R/∂u_f` for every face, where `u_f` is either fluid's velocity
    /// (the residual depends on their sum only).
    pub fn velocity_sensitivity(&self, lambda: &[f64], temp: &[f64], u_sum: &[f64], n_faces: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_faces];
        for (cell, list) in self.faces.iter().enumerate() {
            for cf in list {
                let phi = cf.sign * u_sum[cf.face] * cf.area;
                if phi >= 0.0 {
                    continue;
                }
                let upstream = match cf.nb {
                    Neighbor::Cell(o) => temp[o],
                    Neighbor::Fixed(v) => v,
                    Neighbor::Closed => continue,
                };
                // R_c ∋ −φ (T_c − T_up) for φ < 0.
                out[cf.face] += lambda[cell] * (-cf.sign * cf.area) * (temp[cell] - upstream);
            }
        }
        out
    }

    /// `λᵀ ∂R/∂k_c` for every cell.
    pub fn diffusivity_sensitivity(&self, lambda: &[f64], temp: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cells];
        for (cell, list) in self.faces.iter().enumerate() {
            for cf in list {
                match cf.nb {
                    Neighbor::Cell(o) => {
                        // Each interior face is visited from both sides; the
                        // term λ_c (T_c − T_o) dD/dk is this side's share.
                        let (ka, kb) = (k[cell], k[o]);
                        let w = lambda[cell] * (temp[cell] - temp[o]) * cf.area / cf.dist;
                        let s = (ka + kb) * (ka + kb);
                        out[cell] += w * 2.0 * kb * kb / s;
                        out[o] += w * 2.0 * ka * ka / s;
                    }
                    Neighbor::Fixed(v) => {
                        out[cell] += lambda[cell] * (temp[cell] - v) * cf.area / cf.dist;
                    }
                    Neighbor::Closed => {}
                }
            }
        }
        out
    }

    /// Net heat leaving through the boundary: advective `Σ φ T_b` plus the
    /// diffusive flux at Dirichlet inlets. Zero for an exact solution.
    pub fn boundary_heat_balance(&self, temp: &[f64], u_sum: &[f64], k: &[f64]) -> f64 {
        let mut total = 0.0;
        for (cell, list) in self.faces.iter().enumerate() {
            for cf in list {
                if matches!(cf.nb, Neighbor::Cell(_)) {
                    continue;
                }
                let phi = cf.sign * u_sum[cf.face] * cf.area;
                let tb = match cf.nb {
                    Neighbor::Fixed(v) if phi < 0.0 => v,
                    _ => temp[cell],
                };
                total += phi * tb;
                if let Neighbor::Fixed(v) = cf.nb {
                    total += k[cell] * cf.area / cf.dist * (temp[cell] - v);
                }
            }
        }
        total
    }
}

#[inline]
fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Face velocity sum `u1 + u2` on every face.
pub fn summed_velocity(flows: [&FlowState; 2]) -> Vec<f64> {
    flows[0].u.iter().zip(&flows[1].u).map(|(a, b)| a + b).collect()
}

/// Solve the energy equation for two converged flows and a cell Péclet field.
pub fn solve_energy(
    grid: &Grid,
    patches: &BoundaryPatches,
    flows: [&FlowState; 2],
    peclet: &[f64],
    settings: &EnergySettings,
) -> Result<TemperatureField> {
    let layout = EnergyLayout::new(grid, patches);
    let k: Vec<f64> = peclet.iter().map(|p| 1.0 / p).collect();
    layout.solve(&summed_velocity(flows), &k, settings, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{flow_rate, FlowSettings, FlowSolver};
    use crate::mesh::{build_grid, resolve_patches, BoxSide, FlowArrangement, GridSpec, PortRect, PortSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn counter_2d(nx: usize, ny: usize) -> (Grid, BoundaryPatches) {
        let spec = GridSpec {
            nx,
            ny,
            nz: 1,
            lx: 2.0,
            ly: 1.0,
            lz: 1.0,
            symmetry: false,
        };
        let ports = PortSpec::for_arrangement(FlowArrangement::Counter, &spec);
        let grid = build_grid(spec).unwrap();
        let patches = resolve_patches(&grid, FlowArrangement::Counter, &ports).unwrap();
        (grid, patches)
    }

    fn rest(grid: &Grid, fluid: usize) -> FlowState {
        FlowState {
            fluid,
            u: vec![0.0; grid.n_faces()],
            p: vec![0.0; grid.n_cells()],
            residuals: Default::default(),
            converged: true,
        }
    }

    #[test]
    fn pure_diffusion_is_bounded_and_pins_inlets() {
        let (grid, patches) = counter_2d(16, 8);
        let (f1, f2) = (rest(&grid, 0), rest(&grid, 1));
        let temp = solve_energy(&grid, &patches, [&f1, &f2], &vec![700.0; grid.n_cells()], &EnergySettings::default()).unwrap();
        assert!(temp.min() >= 0.0 && temp.max() <= 1.0);
        assert!(temp.min() < 0.2 && temp.max() > 0.8);
        // Inlet boundary values are the Dirichlet data: check by the heat
        // balance, which only closes with T_b = 1 and 0 at the inlets.
        let layout = EnergyLayout::new(&grid, &patches);
        let k = vec![1.0 / 700.0; grid.n_cells()];
        let bal = layout.boundary_heat_balance(&temp.t, &vec![0.0; grid.n_faces()], &k);
        assert!(bal.abs() < 1e-9, "{bal}");
    }

    #[test]
    fn fast_channel_barely_cools() {
        let spec = GridSpec {
            nx: 32,
            ny: 8,
            nz: 1,
            lx: 4.0,
            ly: 1.0,
            lz: 1.0,
            symmetry: false,
        };
        let grid = build_grid(spec).unwrap();
        let ports = PortSpec {
            inlet1: PortRect::new(BoxSide::XMin, (0.0, 1.0), (0.0, 1.0)),
            outlet1: PortRect::new(BoxSide::XMax, (0.0, 1.0), (0.0, 1.0)),
            inlet2: PortRect::new(BoxSide::YMax, (0.0, 0.125), (0.0, 1.0)),
            outlet2: PortRect::new(BoxSide::YMin, (0.875, 1.0), (0.0, 1.0)),
        };
        let patches = resolve_patches(&grid, FlowArrangement::Counter, &ports)
            .or_else(|_| resolve_patches(&grid, FlowArrangement::Parallel, &ports))
            .unwrap();
        let settings = FlowSettings {
            reynolds: 100.0,
            ..Default::default()
        };
        let f1 = FlowSolver::new(&grid, &patches, 0)
            .solve(&grid, &vec![0.0; grid.n_cells()], &settings, None)
            .unwrap();
        let f2 = rest(&grid, 1);
        let temp = solve_energy(&grid, &patches, [&f1, &f2], &vec![700.0; grid.n_cells()], &EnergySettings::default()).unwrap();
        let q = flow_rate(&grid, &f1, &patches.outlet1);
        let tout: f64 = patches
            .outlet1
            .iter()
            .map(|&f| {
                let c = grid.face_cells(f).0.unwrap();
                f1.u[f] * grid.face_area(0) * temp.t[c]
            })
            .sum::<f64>()
            / q;
        assert!(tout >= 0.95, "{tout}");
        assert!(temp.max() <= 1.0 + 1e-12 && temp.min() >= -1e-12);
    }

    #[test]
    fn sensitivities_match_finite_differences() {
        let (grid, patches) = counter_2d(8, 6);
        let layout = EnergyLayout::new(&grid, &patches);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u: Vec<f64> = (0..grid.n_faces()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..grid.n_cells()).map(|_| rng.gen_range(0.001..0.01)).collect();
        let temp: Vec<f64> = (0..grid.n_cells()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let lambda: Vec<f64> = (0..grid.n_cells()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lr = |u: &[f64], k: &[f64]| -> f64 {
            layout.residual(&temp, u, k).iter().zip(&lambda).map(|(a, b)| a * b).sum()
        };
        let du = layout.velocity_sensitivity(&lambda, &temp, &u, grid.n_faces());
        let dk = layout.diffusivity_sensitivity(&lambda, &temp, &k);
        let h = 1e-7;
        for f in (0..grid.n_faces()).step_by(3) {
            let mut up = u.clone();
            let mut um = u.clone();
            up[f] += h;
            um[f] -= h;
            let fd = (lr(&up, &k) - lr(&um, &k)) / (2.0 * h);
            assert!((fd - du[f]).abs() < 1e-6, "face {f}: {fd} vs {}", du[f]);
        }
        for c in 0..grid.n_cells() {
            let mut kp = k.clone();
            let mut km = k.clone();
            kp[c] += 1e-6;
            km[c] -= 1e-6;
            let fd = (lr(&u, &kp) - lr(&u, &km)) / 2e-6;
            assert!((fd - dk[c]).abs() < 1e-5 * dk[c].abs().max(1.0), "cell {c}");
        }
    }

    #[test]
    fn adjoint_solve_is_transpose() {
        let (grid, patches) = counter_2d(10, 6);
        let layout = EnergyLayout::new(&grid, &patches);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u: Vec<f64> = (0..grid.n_faces()).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let k = vec![1.0 / 700.0; grid.n_cells()];
        let g: Vec<f64> = (0..grid.n_cells()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let settings = EnergySettings {
            tol: 1e-12,
            ..Default::default()
        };
        let (lambda, _) = layout.solve_adjoint(&u, &k, &g, &settings).unwrap();
        let (a, _) = layout.assemble(&u, &k);
        let atl = a.transpose().mul_vec(&lambda);
        for (x, y) in atl.iter().zip(&g) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
