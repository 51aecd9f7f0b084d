//! Steady incompressible Navier–Stokes with Brinkman penalization, one fluid
//! at a time, on the staggered grid.
//!
//! Unknowns are the normal velocities on interior faces and on the fluid's
//! own port faces, followed by the cell pressures. Wall, symmetry and
//! other-fluid port faces carry zero normal velocity.
//!
//! Each velocity unknown owns a momentum control volume centred on its face.
//! The residual of that row is
//!
//! ```text
//! R_f = s_f [ Σ_sides F·c_up + (1/Re) Σ_sides g (u_f − u_nb) + α_f V u_f ] + Σ_c G_fc p_c + b_f
//! ```
//!
//! with first-order upwind transport `c_up`, face Brinkman coefficient
//! `α_f` taken as the mean of the adjacent cells, and `s_f = ½` on port
//! faces where the control volume is cut in half by the boundary and the
//! port pressure acts on the face itself. Continuity rows are the outward
//! face-flux sums, so the divergence block is exactly `−Gᵀ`.
//!
//! The solution is driven by SIMPLE (frozen-flux momentum predictor,
//! pressure correction, under-relaxation). Once SIMPLE has brought the
//! residual below `newton_switch`, Newton iterations on the same residual
//! with the exact Jacobian finish the solve; the Jacobian is also the
//! operator the adjoint uses.

use std::cell::OnceCell;

use crate::error::{Error, Result};
use crate::linalg::{fgmres, norm2, pcg, CsrMatrix, Ilu0, SolveStats, TripletBuilder};
use crate::mesh::{BoundaryPatches, FaceTag, Grid, PortId};

const NONE: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSettings {
    pub reynolds: f64,
    pub inlet_pressure: f64,
    pub outlet_pressure: f64,
    /// Convergence target on the max-norm residuals (pressure units for
    /// momentum, velocity units for continuity; both scales are 1).
    pub tol: f64,
    pub max_simple_iters: usize,
    pub relax_u: f64,
    pub relax_p: f64,
    pub newton: bool,
    pub newton_switch: f64,
    pub max_newton_iters: usize,
    pub max_continuation_iters: usize,
}

impl Default for FlowSettings {
    fn default() -> Self {
        FlowSettings {
            reynolds: 100.0,
            inlet_pressure: 1.0,
            outlet_pressure: 0.0,
            tol: 1e-6,
            max_simple_iters: 3000,
            relax_u: 0.7,
            relax_p: 0.3,
            newton: true,
            newton_switch: 1e-2,
            max_newton_iters: 30,
            max_continuation_iters: 300,
        }
    }
}

impl FlowSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.reynolds > 0.0 && self.reynolds.is_finite()) {
            return Err(Error::param("Re", "must be positive"));
        }
        if self.inlet_pressure < self.outlet_pressure {
            return Err(Error::param(
                "inlet_pressure",
                "must not be below the outlet pressure",
            ));
        }
        for (name, w) in [("relax_u", self.relax_u), ("relax_p", self.relax_p)] {
            if !(w > 0.0 && w <= 1.0) {
                return Err(Error::param(name, "must lie in (0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowResiduals {
    pub momentum: f64,
    pub continuity: f64,
    pub simple_iterations: usize,
    pub newton_iterations: usize,
    /// Max-norm residual after each SIMPLE iteration.
    pub simple_history: Vec<f64>,
}

impl FlowResiduals {
    pub fn max(&self) -> f64 {
        self.momentum.max(self.continuity)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub fluid: usize,
    /// Normal velocity on every face of the grid (zero on fixed faces).
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    pub residuals: FlowResiduals,
    pub converged: bool,
}

impl FlowState {
    /// Cell-centred velocity vector (average of opposite faces).
    pub fn cell_velocity(&self, grid: &Grid, cell: usize) -> [f64; 3] {
        let c = grid.cell_coords(cell);
        let mut out = [0.0; 3];
        for (axis, o) in out.iter_mut().enumerate() {
            *o = 0.5
                * (self.u[grid.cell_face(c, axis, false)] + self.u[grid.cell_face(c, axis, true)]);
        }
        out
    }

    pub fn cell_speed(&self, grid: &Grid, cell: usize) -> f64 {
        let v = self.cell_velocity(grid, cell);
        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
    }
}

/// Outward normal sign of a boundary face.
pub fn outward_sign(grid: &Grid, face: usize) -> f64 {
    let (axis, f) = grid.face_coords(face);
    if f[axis] == 0 {
        -1.0
    } else {
        1.0
    }
}

/// Volume flow rate through a set of boundary faces, positive when leaving.
pub fn flow_rate(grid: &Grid, state: &FlowState, faces: &[usize]) -> f64 {
    faces
        .iter()
        .map(|&f| {
            let (axis, _) = grid.face_coords(f);
            outward_sign(grid, f) * state.u[f] * grid.face_area(axis)
        })
        .sum()
}

#[derive(Clone, Copy, Debug)]
struct Side {
    flux: [(usize, f64); 2],
    /// Unknown carried on inflow; `NONE` means a zero boundary value.
    out: usize,
    /// Geometric diffusion coefficient `A/δ` (zero for zero-gradient sides).
    diff: f64,
    diff_nb: usize,
}

#[derive(Clone, Debug)]
struct MomentumRow {
    scale: f64,
    /// Half-volume port rows are not mass-consistent, so their convection is
    /// written in advective form `Σ F (c − u)`.
    advective: bool,
    alpha_cells: [usize; 2],
    sides: Vec<Side>,
}

/// Per-fluid unknown numbering and momentum stencils; independent of the
/// design field, so it is built once per grid and fluid.
#[derive(Clone, Debug)]
pub struct FlowLayout {
    pub fluid: usize,
    pub n_vel: usize,
    pub n_cells: usize,
    volume: f64,
    face_unknown: Vec<usize>,
    unknown_face: Vec<usize>,
    rows: Vec<MomentumRow>,
    /// Pressure-gradient block G (n_vel × n_cells).
    grad: CsrMatrix,
    /// `Gᵀ` stored for continuity (continuity = −Gᵀ u).
    grad_t: CsrMatrix,
    /// Port pressure contributions b_f per momentum row (for Δp = 1).
    port_area_sign: Vec<(usize, PortId, f64)>,
    face_area: Vec<f64>,
}

impl FlowLayout {
    pub fn new(grid: &Grid, patches: &BoundaryPatches, fluid: usize) -> Self {
        let n_cells = grid.n_cells();
        let mut face_unknown = vec![NONE; grid.n_faces()];
        let mut unknown_face = Vec::new();
        for face in 0..grid.n_faces() {
            let free = match patches.tag(face) {
                FaceTag::Interior => true,
                FaceTag::Port(id) => id.fluid() == fluid,
                FaceTag::Wall | FaceTag::Symmetry => false,
            };
            if free {
                face_unknown[face] = unknown_face.len();
                unknown_face.push(face);
            }
        }
        let n_vel = unknown_face.len();
        let idx = |face: usize| face_unknown[face];

        let mut rows = Vec::with_capacity(n_vel);
        let mut g = TripletBuilder::with_capacity(n_vel, n_cells, 2 * n_vel);
        let mut port_area_sign = Vec::new();
        for (r, &face) in unknown_face.iter().enumerate() {
            let (d, f) = grid.face_coords(face);
            let a_d = grid.face_area(d);
            let (cm, cp) = grid.face_cells(face);
            let port = match patches.tag(face) {
                FaceTag::Port(id) => Some(id),
                _ => None,
            };
            let mut sides = Vec::with_capacity(6);

            // Normal direction.
            for plus in [false, true] {
                let sign = if plus { 1.0 } else { -1.0 };
                let ghost = if plus { cp.is_none() } else { cm.is_none() };
                if ghost {
                    sides.push(Side {
                        flux: [(r, sign * a_d), (NONE, 0.0)],
                        out: r,
                        diff: 0.0,
                        diff_nb: NONE,
                    });
                } else {
                    let mut nb = f;
                    if plus {
                        nb[d] += 1;
                    } else {
                        nb[d] -= 1;
                    }
                    let nb = idx(grid.face_index(d, nb));
                    sides.push(Side {
                        flux: [(r, 0.5 * sign * a_d), (nb, 0.5 * sign * a_d)],
                        out: nb,
                        diff: a_d / grid.h[d],
                        diff_nb: nb,
                    });
                }
            }

            // Lateral directions.
            for t in (0..3).filter(|&t| t != d) {
                let o = 3 - d - t;
                let a_lat = grid.h[d] * grid.h[o];
                for plus in [false, true] {
                    let sign = if plus { 1.0 } else { -1.0 };
                    // Transverse velocity on the lateral side, from the t-faces of
                    // the two cells straddling this face. Port rows see no
                    // transverse transport (tangential velocity vanishes at ports).
                    let flux = if port.is_some() {
                        [(NONE, 0.0), (NONE, 0.0)]
                    } else {
                        let mut parts = [(NONE, 0.0); 2];
                        for (slot, cell) in [cm, cp].into_iter().enumerate() {
                            let c = grid.cell_coords(cell.expect("interior face"));
                            let tf = grid.cell_face(c, t, plus);
                            parts[slot] = (idx(tf), 0.5 * sign * a_lat);
                        }
                        parts
                    };
                    let has_nb = if plus { f[t] + 1 < grid.n[t] } else { f[t] > 0 };
                    if has_nb {
                        let mut nb = f;
                        if plus {
                            nb[t] += 1;
                        } else {
                            nb[t] -= 1;
                        }
                        let nb = idx(grid.face_index(d, nb));
                        sides.push(Side {
                            flux,
                            out: nb,
                            diff: a_lat / grid.h[t],
                            diff_nb: nb,
                        });
                    } else {
                        let side = match (t, plus) {
                            (0, false) => crate::mesh::BoxSide::XMin,
                            (0, true) => crate::mesh::BoxSide::XMax,
                            (1, false) => crate::mesh::BoxSide::YMin,
                            (1, true) => crate::mesh::BoxSide::YMax,
                            (_, false) => crate::mesh::BoxSide::ZMin,
                            (_, true) => crate::mesh::BoxSide::ZMax,
                        };
                        if grid.is_symmetry_side(side) {
                            sides.push(Side {
                                flux,
                                out: r,
                                diff: 0.0,
                                diff_nb: NONE,
                            });
                        } else {
                            sides.push(Side {
                                flux,
                                out: NONE,
                                diff: a_lat / (0.5 * grid.h[t]),
                                diff_nb: NONE,
                            });
                        }
                    }
                }
            }

            let (scale, alpha_cells) = match (cm, cp) {
                (Some(a), Some(b)) => {
                    g.push(r, b, a_d);
                    g.push(r, a, -a_d);
                    (1.0, [a, b])
                }
                (None, Some(b)) => {
                    g.push(r, b, a_d);
                    port_area_sign.push((r, port.expect("port"), -a_d));
                    (0.5, [b, b])
                }
                (Some(a), None) => {
                    g.push(r, a, -a_d);
                    port_area_sign.push((r, port.expect("port"), a_d));
                    (0.5, [a, a])
                }
                (None, None) => unreachable!(),
            };
            rows.push(MomentumRow {
                scale,
                advective: scale < 1.0,
                alpha_cells,
                sides,
            });
        }
        let grad = g.build();
        let grad_t = grad.transpose();
        let face_area = unknown_face
            .iter()
            .map(|&f| grid.face_area(grid.face_coords(f).0))
            .collect();
        FlowLayout {
            fluid,
            n_vel,
            n_cells,
            volume: grid.cell_volume(),
            face_unknown,
            unknown_face,
            rows,
            grad,
            grad_t,
            port_area_sign,
            face_area,
        }
    }

    pub fn n_unknowns(&self) -> usize {
        self.n_vel + self.n_cells
    }

    pub fn unknown_of_face(&self, face: usize) -> Option<usize> {
        let i = self.face_unknown[face];
        (i != NONE).then_some(i)
    }

    pub fn face_of_unknown(&self, i: usize) -> usize {
        self.unknown_face[i]
    }

    fn face_alpha(&self, row: &MomentumRow, alpha: &[f64]) -> f64 {
        0.5 * (alpha[row.alpha_cells[0]] + alpha[row.alpha_cells[1]])
    }

    /// Constant pressure-boundary term of each momentum row.
    fn boundary_term(&self, settings: &FlowSettings) -> Vec<f64> {
        let mut b = vec![0.0; self.n_vel];
        for &(r, id, coeff) in &self.port_area_sign {
            let p = if id.is_inlet() {
                settings.inlet_pressure
            } else {
                settings.outlet_pressure
            };
            b[r] += coeff * p;
        }
        b
    }

    /// Port faces with inflow see the set pressure as a total pressure:
    /// `p = p_set − ½ u_n²`, static for outflow. Yields `(row, |u_n⁻| a)`;
    /// the residual term is `½ |u_n⁻| a u` and its derivative `|u_n⁻| a`.
    fn port_inflow<'a>(&'a self, x: &'a [f64]) -> impl Iterator<Item = (usize, f64)> + 'a {
        self.port_area_sign.iter().filter_map(|&(r, _, coeff)| {
            let un = coeff.signum() * x[r];
            (un < 0.0).then(|| (r, -un * coeff.abs()))
        })
    }

    pub fn pack(&self, state: &FlowState) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.n_unknowns());
        x.extend(self.unknown_face.iter().map(|&f| state.u[f]));
        x.extend_from_slice(&state.p);
        x
    }

    fn unpack(&self, x: &[f64], n_faces: usize) -> (Vec<f64>, Vec<f64>) {
        let mut u = vec![0.0; n_faces];
        for (i, &f) in self.unknown_face.iter().enumerate() {
            u[f] = x[i];
        }
        (u, x[self.n_vel..].to_vec())
    }

    /// Nonlinear residual `[momentum; continuity]`.
    pub fn residual(&self, x: &[f64], alpha: &[f64], settings: &FlowSettings) -> Vec<f64> {
        let nu = 1.0 / settings.reynolds;
        let val = |i: usize| if i == NONE { 0.0 } else { x[i] };
        let mut res = self.boundary_term(settings);
        let (u, p) = x.split_at(self.n_vel);
        for (r, row) in self.rows.iter().enumerate() {
            let ur = u[r];
            let mut acc = self.face_alpha(row, alpha) * self.volume * ur;
            for s in &row.sides {
                let flux = s.flux[0].1 * val(s.flux[0].0) + s.flux[1].1 * val(s.flux[1].0);
                let mut carried = if flux >= 0.0 { ur } else { val(s.out) };
                if row.advective {
                    carried -= ur;
                }
                acc += flux * carried + nu * s.diff * (ur - val(s.diff_nb));
            }
            let (cols, vals) = self.grad.row(r);
            let mut pg = 0.0;
            for (&c, &v) in cols.iter().zip(vals) {
                pg += v * p[c];
            }
            res[r] += row.scale * acc + pg;
        }
        for (r, k) in self.port_inflow(x) {
            res[r] += 0.5 * k * x[r];
        }
        res.resize(self.n_unknowns(), 0.0);
        let (_, cont) = res.split_at_mut(self.n_vel);
        self.grad_t.matvec(u, cont);
        cont.iter_mut().for_each(|v| *v = -*v);
        res
    }

    /// Max-norm residual measures: momentum per unit face area and
    /// continuity per unit face area.
    pub fn residual_norms(&self, res: &[f64], grid: &Grid) -> (f64, f64) {
        let mom = res[..self.n_vel]
            .iter()
            .zip(&self.face_area)
            .map(|(r, a)| (r / a).abs())
            .fold(0.0, f64::max);
        let a_min = grid.face_area(0).min(grid.face_area(1)).min(grid.face_area(2));
        let cont = res[self.n_vel..]
            .iter()
            .map(|r| r.abs() / a_min)
            .fold(0.0, f64::max);
        (mom, cont)
    }

    /// Exact Jacobian of `residual` with respect to `[u; p]`. Also returns the
    /// positive frozen-flux momentum diagonal used by the preconditioners.
    pub fn jacobian(&self, x: &[f64], alpha: &[f64], settings: &FlowSettings) -> (CsrMatrix, Vec<f64>) {
        let n = self.n_unknowns();
        let nu = 1.0 / settings.reynolds;
        let val = |i: usize| if i == NONE { 0.0 } else { x[i] };
        let mut t = TripletBuilder::with_capacity(n, n, 24 * self.n_vel + 6 * self.n_cells);
        let mut picard_diag = vec![0.0; self.n_vel];
        for (r, k) in self.port_inflow(x) {
            t.push(r, r, k);
            picard_diag[r] += 0.5 * k;
        }
        for (r, row) in self.rows.iter().enumerate() {
            let s_f = row.scale;
            let ur = x[r];
            let brink = self.face_alpha(row, alpha) * self.volume;
            let mut diag = brink;
            let mut pdiag = brink;
            for s in &row.sides {
                let flux = s.flux[0].1 * val(s.flux[0].0) + s.flux[1].1 * val(s.flux[1].0);
                let mut carried = if flux >= 0.0 { ur } else { val(s.out) };
                if row.advective {
                    carried -= ur;
                }
                for &(q, w) in &s.flux {
                    if q != NONE && w != 0.0 {
                        if q == r {
                            diag += w * carried;
                        } else {
                            t.push(r, q, s_f * w * carried);
                        }
                    }
                }
                if row.advective {
                    if flux < 0.0 && s.out != r {
                        diag -= flux;
                        pdiag -= flux;
                        if s.out != NONE {
                            t.push(r, s.out, s_f * flux);
                        }
                    }
                } else if flux >= 0.0 || s.out == r {
                    diag += flux;
                    pdiag += flux;
                } else if s.out != NONE {
                    t.push(r, s.out, s_f * flux);
                }
                let dcoef = nu * s.diff;
                diag += dcoef;
                pdiag += dcoef;
                if s.diff_nb != NONE && dcoef != 0.0 {
                    t.push(r, s.diff_nb, -s_f * dcoef);
                }
            }
            t.push(r, r, s_f * diag);
            picard_diag[r] = (picard_diag[r] + s_f * pdiag).max(1e-14 * self.volume);
            let (cols, vals) = self.grad.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                t.push(r, self.n_vel + c, v);
            }
        }
        for c in 0..self.n_cells {
            let (cols, vals) = self.grad_t.row(c);
            for (&r, &v) in cols.iter().zip(vals) {
                t.push(self.n_vel + c, r, -v);
            }
        }
        (t.build(), picard_diag)
    }

    /// Frozen-flux (Picard) momentum matrix and the right-hand side that
    /// collects pressure and port terms: `M u = rhs`.
    fn picard_system(
        &self,
        x: &[f64],
        alpha: &[f64],
        settings: &FlowSettings,
        boundary: &[f64],
    ) -> (CsrMatrix, Vec<f64>) {
        let nu = 1.0 / settings.reynolds;
        let val = |i: usize| if i == NONE { 0.0 } else { x[i] };
        let mut t = TripletBuilder::with_capacity(self.n_vel, self.n_vel, 7 * self.n_vel);
        let mut rhs = vec![0.0; self.n_vel];
        let p = &x[self.n_vel..];
        for (r, k) in self.port_inflow(x) {
            t.push(r, r, 0.5 * k);
        }
        for (r, row) in self.rows.iter().enumerate() {
            let s_f = row.scale;
            let mut diag = self.face_alpha(row, alpha) * self.volume;
            for s in &row.sides {
                let flux = s.flux[0].1 * val(s.flux[0].0) + s.flux[1].1 * val(s.flux[1].0);
                if row.advective {
                    if flux < 0.0 && s.out != r {
                        diag -= flux;
                        if s.out != NONE {
                            t.push(r, s.out, s_f * flux);
                        }
                    }
                } else if flux >= 0.0 || s.out == r {
                    diag += flux;
                } else if s.out != NONE {
                    t.push(r, s.out, s_f * flux);
                }
                let dcoef = nu * s.diff;
                diag += dcoef;
                if s.diff_nb != NONE && dcoef != 0.0 {
                    t.push(r, s.diff_nb, -s_f * dcoef);
                }
            }
            t.push(r, r, s_f * diag);
            let (cols, vals) = self.grad.row(r);
            let mut pg = boundary[r];
            for (&c, &v) in cols.iter().zip(vals) {
                pg += v * p[c];
            }
            rhs[r] = -pg;
        }
        (t.build(), rhs)
    }

    /// Pressure Schur approximation `Gᵀ diag(a)⁻¹ G` (symmetric positive definite).
    fn schur(&self, diag: &[f64]) -> CsrMatrix {
        let mut t = TripletBuilder::with_capacity(self.n_cells, self.n_cells, 7 * self.n_cells);
        for r in 0..self.n_vel {
            let (cols, vals) = self.grad.row(r);
            let w = 1.0 / diag[r];
            for (&ci, &vi) in cols.iter().zip(vals) {
                for (&cj, &vj) in cols.iter().zip(vals) {
                    t.push(ci, cj, vi * vj * w);
                }
            }
        }
        t.build()
    }

    /// ∂R/∂α_cell applied in transpose: returns `−(λᵀ ∂R/∂α)` per cell scaled
    /// by `-1`, i.e. the vector `Σ_f λ_f s_f V u_f ∂α_f/∂α_c`.
    pub fn alpha_sensitivity(&self, lambda: &[f64], x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cells];
        for (r, row) in self.rows.iter().enumerate() {
            let v = lambda[r] * row.scale * self.volume * x[r] * 0.5;
            out[row.alpha_cells[0]] += v;
            out[row.alpha_cells[1]] += v;
        }
        out
    }

    /// Directional derivative of the residual with respect to the cell
    /// Brinkman coefficients: `(∂R/∂α) δα`.
    pub fn alpha_directional(&self, x: &[f64], d_alpha: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_unknowns()];
        for (r, row) in self.rows.iter().enumerate() {
            out[r] = row.scale * self.volume * x[r] * self.face_alpha(row, d_alpha);
        }
        out
    }
}

// A loose inner Schur solve is cheaper overall than an accurate one.
const SCHUR_TOL: f64 = 0.1;
const SCHUR_ITERS: usize = 10;

/// Block upper-triangular preconditioner `[[Â, B], [0, S]]` for the
/// saddle-point systems `[[A, B], [C, 0]]`, whose Schur complement
/// `−C A⁻¹ B` is approximated by `S = Gᵀ diag⁻¹ G`.
struct SaddlePreconditioner {
    n_vel: usize,
    a_ilu: Ilu0,
    b: CsrMatrix,
    s: CsrMatrix,
    s_ilu: Ilu0,
}

impl SaddlePreconditioner {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let (ru, rp) = r.split_at(self.n_vel);
        let (zu, zp) = z.split_at_mut(self.n_vel);
        zp.iter_mut().for_each(|v| *v = 0.0);
        pcg(
            |v, o| self.s.matvec(v, o),
            |rr, zz| {
                zz.copy_from_slice(rr);
                self.s_ilu.solve_in_place(zz);
            },
            rp,
            zp,
            SCHUR_TOL,
            SCHUR_ITERS,
        );
        self.b.matvec(zp, zu);
        for (zi, ri) in zu.iter_mut().zip(ru) {
            *zi = ri - *zi;
        }
        self.a_ilu.solve_in_place(zu);
    }
}


/// Exact linearization of one fluid's discrete flow residual about a state.
pub struct LinearizedFlow {
    pub jacobian: CsrMatrix,
    precond: SaddlePreconditioner,
    picard_block: CsrMatrix,
    transposed: OnceCell<(CsrMatrix, SaddlePreconditioner)>,
}

impl LinearizedFlow {
    pub fn new(layout: &FlowLayout, x: &[f64], alpha: &[f64], settings: &FlowSettings) -> Result<Self> {
        Self::shifted(layout, x, alpha, settings, 0.0)
    }

    /// Jacobian plus `inv_dt` times the momentum mass matrix, as used by
    /// pseudo-transient continuation.
    pub fn shifted(layout: &FlowLayout, x: &[f64], alpha: &[f64], settings: &FlowSettings, inv_dt: f64) -> Result<Self> {
        let (mut jacobian, mut pdiag) = layout.jacobian(x, alpha, settings);
        // The Picard (upwind) block is an M-matrix; the exact block can lose
        // diagonal dominance and break the incomplete factorization.
        let boundary = layout.boundary_term(settings);
        let (mut a, _) = layout.picard_system(x, alpha, settings, &boundary);
        if inv_dt > 0.0 {
            let mass: Vec<f64> = layout.rows.iter().map(|row| inv_dt * row.scale * layout.volume).collect();
            add_to_diagonal(&mut jacobian, &mass);
            add_to_diagonal(&mut a, &mass);
            pdiag.iter_mut().zip(&mass).for_each(|(d, m)| *d += m);
        }
        let s = layout.schur(&pdiag);
        let precond = SaddlePreconditioner {
            n_vel: layout.n_vel,
            a_ilu: Ilu0::new(&a)?,
            b: layout.grad.clone(),
            s_ilu: Ilu0::new(&s)?,
            s,
        };
        Ok(LinearizedFlow {
            jacobian,
            precond,
            picard_block: a,
            transposed: OnceCell::new(),
        })
    }

    fn transposed(&self) -> Result<&(CsrMatrix, SaddlePreconditioner)> {
        if let Some(t) = self.transposed.get() {
            return Ok(t);
        }
        let mut b_t = self.precond.b.clone();
        b_t.values.iter_mut().for_each(|v| *v = -*v);
        let precond_t = SaddlePreconditioner {
            n_vel: self.precond.n_vel,
            a_ilu: Ilu0::new(&self.picard_block.transpose())?,
            b: b_t,
            s_ilu: self.precond.s_ilu.clone(),
            s: self.precond.s.clone(),
        };
        let _ = self.transposed.set((self.jacobian.transpose(), precond_t));
        Ok(self.transposed.get().expect("just set"))
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.jacobian.mul_vec(v)
    }

    pub fn apply_transpose(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok(self.transposed()?.0.mul_vec(w))
    }

    pub fn solve(&self, rhs: &[f64], tol: f64) -> Result<(Vec<f64>, SolveStats)> {
        let mut x = vec![0.0; rhs.len()];
        let stats = fgmres(
            |v, o| self.jacobian.matvec(v, o),
            |r, z| self.precond.apply(r, z),
            rhs,
            &mut x,
            tol,
            80,
            2000,
        );
        Ok((x, stats.into_result("flow Jacobian solve")?))
    }

    pub fn solve_transpose(&self, rhs: &[f64], tol: f64) -> Result<(Vec<f64>, SolveStats)> {
        let (jt, pt) = self.transposed()?;
        let mut x = vec![0.0; rhs.len()];
        let stats = fgmres(
            |v, o| jt.matvec(v, o),
            |r, z| pt.apply(r, z),
            rhs,
            &mut x,
            tol,
            80,
            2000,
        );
        Ok((x, stats.into_result("adjoint flow solve")?))
    }
}

/// Flow solver for one fluid on a fixed grid and port layout.
#[derive(Clone, Debug)]
pub struct FlowSolver {
    pub layout: FlowLayout,
    n_faces: usize,
}

impl FlowSolver {
    pub fn new(grid: &Grid, patches: &BoundaryPatches, fluid: usize) -> Self {
        FlowSolver {
            layout: FlowLayout::new(grid, patches, fluid),
            n_faces: grid.n_faces(),
        }
    }

    pub fn state_from_vector(&self, x: &[f64], residuals: FlowResiduals, converged: bool) -> FlowState {
        let (u, p) = self.layout.unpack(x, self.n_faces);
        FlowState {
            fluid: self.layout.fluid,
            u,
            p,
            residuals,
            converged,
        }
    }

    /// Solve for the flow of this fluid given per-cell Brinkman coefficients.
    pub fn solve(
        &self,
        grid: &Grid,
        alpha: &[f64],
        settings: &FlowSettings,
        warm: Option<&FlowState>,
    ) -> Result<FlowState> {
        settings.validate()?;
        if alpha.len() != grid.n_cells() {
            return Err(Error::SizeMismatch {
                expected: grid.n_cells(),
                got: alpha.len(),
            });
        }
        if alpha.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::param("alpha", "must be finite and non-negative"));
        }
        let layout = &self.layout;
        let mut x = match warm {
            Some(s) if s.fluid == layout.fluid && s.p.len() == layout.n_cells => layout.pack(s),
            _ => vec![0.0; layout.n_unknowns()],
        };
        let boundary = layout.boundary_term(settings);
        let mut res_info = FlowResiduals::default();

        let norms = |x: &[f64]| {
            let r = layout.residual(x, alpha, settings);
            layout.residual_norms(&r, grid)
        };
        let (mut mom, mut cont) = norms(&x);
        let start = mom.max(cont);
        let mut converged = mom.max(cont) <= settings.tol;
        let switch = settings.newton_switch.max(settings.tol);

        // SIMPLE predictor–corrector loop.
        let x0 = x.clone();
        let mut simple_diverged = false;
        let mut best = f64::INFINITY;
        let mut it = 0;
        while !converged && it < settings.max_simple_iters {
            if settings.newton && mom.max(cont) <= switch {
                break;
            }
            it += 1;
            self.simple_iteration(&mut x, alpha, settings, &boundary)?;
            let (m, c) = norms(&x);
            mom = m;
            cont = c;
            let r = mom.max(cont);
            res_info.simple_history.push(r);
            if !r.is_finite() || r > 1e6 * start.max(1.0) {
                let tail: Vec<String> = res_info
                    .simple_history
                    .iter()
                    .rev()
                    .take(5)
                    .map(|v| format!("{v:.3e}"))
                    .collect();
                if !settings.newton {
                    return Err(Error::Diverged {
                        solver: "SIMPLE",
                        iteration: it,
                        trace: format!("last residuals {}", tail.join(", ")),
                    });
                }
                log::debug!("fluid {} SIMPLE diverged ({}); restarting", layout.fluid + 1, tail.join(", "));
                simple_diverged = true;
                x.copy_from_slice(&x0);
                (mom, cont) = norms(&x);
                break;
            }
            best = best.min(r);
            converged = r <= settings.tol;
        }
        res_info.simple_iterations = it;
        log::debug!(
            "fluid {} SIMPLE: {} iterations, residual {:.3e} (best {:.3e})",
            layout.fluid + 1,
            it,
            mom.max(cont),
            best
        );

        if !converged && settings.newton {
            if !simple_diverged {
                let (m, c, n_it) = self.newton(&mut x, alpha, settings, grid)?;
                mom = m;
                cont = c;
                res_info.newton_iterations = n_it;
                converged = mom.max(cont) <= settings.tol;
            }
            if !converged {
                let (m, c, n_it) = self.continuation(&mut x, alpha, settings, grid)?;
                mom = m;
                cont = c;
                res_info.newton_iterations += n_it;
                converged = mom.max(cont) <= settings.tol;
            }
            if !mom.max(cont).is_finite() {
                return Err(Error::Diverged {
                    solver: "Newton",
                    iteration: res_info.newton_iterations,
                    trace: "non-finite residual".into(),
                });
            }
        }
        res_info.momentum = mom;
        res_info.continuity = cont;
        Ok(self.state_from_vector(&x, res_info, converged))
    }

    fn simple_iteration(
        &self,
        x: &mut [f64],
        alpha: &[f64],
        settings: &FlowSettings,
        boundary: &[f64],
    ) -> Result<()> {
        let layout = &self.layout;
        let nv = layout.n_vel;
        let (mut m, mut rhs) = layout.picard_system(x, alpha, settings, boundary);
        // Implicit under-relaxation of the momentum predictor.
        let w = settings.relax_u;
        let mut diag = vec![0.0; nv];
        for r in 0..nv {
            for p in m.indptr[r]..m.indptr[r + 1] {
                if m.indices[p] == r {
                    let a = m.values[p].max(1e-14 * layout.volume);
                    m.values[p] = a / w;
                    diag[r] = a / w;
                    rhs[r] += (1.0 - w) / w * a * x[r];
                }
            }
        }
        let ilu = Ilu0::new(&m)?;
        let mut u_star = x[..nv].to_vec();
        fgmres(
            |v, o| m.matvec(v, o),
            |r, z| {
                z.copy_from_slice(r);
                ilu.solve_in_place(z);
            },
            &rhs,
            &mut u_star,
            1e-3,
            30,
            60,
        );

        // Pressure correction: (Gᵀ a⁻¹ G) p' = Gᵀ u*.
        let s = layout.schur(&diag);
        let mut b = vec![0.0; layout.n_cells];
        layout.grad_t.matvec(&u_star, &mut b);
        let s_ilu = Ilu0::new(&s)?;
        let mut p_corr = vec![0.0; layout.n_cells];
        pcg(
            |v, o| s.matvec(v, o),
            |r, z| {
                z.copy_from_slice(r);
                s_ilu.solve_in_place(z);
            },
            &b,
            &mut p_corr,
            1e-4,
            500,
        );
        let mut gp = vec![0.0; nv];
        layout.grad.matvec(&p_corr, &mut gp);
        for r in 0..nv {
            x[r] = u_star[r] - gp[r] / diag[r];
        }
        for (pc, corr) in x[nv..].iter_mut().zip(&p_corr) {
            *pc += settings.relax_p * corr;
        }
        Ok(())
    }

    /// Newton iterations with a backtracking line search. Stops early when
    /// the Newton system cannot be solved or no step reduces the residual.
    fn newton(
        &self,
        x: &mut Vec<f64>,
        alpha: &[f64],
        settings: &FlowSettings,
        grid: &Grid,
    ) -> Result<(f64, f64, usize)> {
        let layout = &self.layout;
        let mut res = layout.residual(x, alpha, settings);
        let (mut mom, mut cont) = layout.residual_norms(&res, grid);
        let mut iters = 0;
        while mom.max(cont) > settings.tol && iters < settings.max_newton_iters {
            iters += 1;
            let lin = LinearizedFlow::new(layout, x, alpha, settings)?;
            let neg: Vec<f64> = res.iter().map(|v| -v).collect();
            // Just enough linear accuracy for the next iterate to meet `tol`.
            let lin_tol = (0.1 * settings.tol / mom.max(cont)).clamp(1e-10, 1e-2);
            let mut dx = vec![0.0; x.len()];
            let stats = fgmres(
                |v, o| lin.jacobian.matvec(v, o),
                |r, z| lin.precond.apply(r, z),
                &neg,
                &mut dx,
                lin_tol,
                80,
                400,
            );
            let step = if stats.residual <= 0.1 {
                line_search(layout, x, &dx, alpha, settings, norm2(&res))
            } else {
                None
            };
            let Some((step, r_new)) = step else {
                log::debug!(
                    "fluid {} Newton {}: stalled (linear residual {:.1e})",
                    layout.fluid + 1,
                    iters,
                    stats.residual
                );
                break;
            };
            res = r_new;
            (mom, cont) = layout.residual_norms(&res, grid);
            log::debug!(
                "fluid {} Newton {}: residual {:.3e}, linear {} its ({:.1e}), step {}",
                layout.fluid + 1,
                iters,
                mom.max(cont),
                stats.iterations,
                stats.residual,
                step
            );
        }
        Ok((mom, cont, iters))
    }

    /// Pseudo-transient continuation: Newton steps on `M/Δt (x − xₖ) + R(x)`
    /// with Δt grown by the residual ratio. Follows the pseudo-time path to a
    /// stable steady state when SIMPLE or plain Newton fail.
    fn continuation(
        &self,
        x: &mut Vec<f64>,
        alpha: &[f64],
        settings: &FlowSettings,
        grid: &Grid,
    ) -> Result<(f64, f64, usize)> {
        let layout = &self.layout;
        let h_min = grid.h.iter().take(if grid.is_2d() { 2 } else { 3 }).fold(f64::INFINITY, |a, &b| a.min(b));
        let mut dt = h_min;
        let mut res = layout.residual(x, alpha, settings);
        let mut rnorm = norm2(&res);
        let (mut mom, mut cont) = layout.residual_norms(&res, grid);
        let mut iters = 0;
        let mut rejected = 0;
        while mom.max(cont) > settings.tol && iters < settings.max_continuation_iters {
            iters += 1;
            let lin = LinearizedFlow::shifted(layout, x, alpha, settings, 1.0 / dt)?;
            let neg: Vec<f64> = res.iter().map(|v| -v).collect();
            let lin_tol = (0.1 * settings.tol / mom.max(cont)).clamp(1e-10, 1e-2);
            let mut dx = vec![0.0; x.len()];
            let stats = fgmres(
                |v, o| lin.jacobian.matvec(v, o),
                |r, z| lin.precond.apply(r, z),
                &neg,
                &mut dx,
                lin_tol,
                80,
                400,
            );
            let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
            let r_trial = layout.residual(&trial, alpha, settings);
            let n_trial = norm2(&r_trial);
            if stats.residual > 0.5 || !n_trial.is_finite() || n_trial > 10.0 * rnorm {
                rejected += 1;
                dt *= 0.25;
                if rejected > 20 || dt < 1e-8 * h_min {
                    break;
                }
                continue;
            }
            dt *= (rnorm / n_trial).clamp(0.5, 4.0);
            dt = dt.min(1e12);
            *x = trial;
            res = r_trial;
            rnorm = n_trial;
            (mom, cont) = layout.residual_norms(&res, grid);
            log::trace!(
                "fluid {} continuation {}: residual {:.3e}, dt {:.2e}, linear {} its",
                layout.fluid + 1,
                iters,
                mom.max(cont),
                dt,
                stats.iterations
            );
        }
        log::debug!(
            "fluid {} continuation: {} steps ({} rejected), residual {:.3e}",
            layout.fluid + 1,
            iters,
            rejected,
            mom.max(cont)
        );
        Ok((mom, cont, iters))
    }
}

fn add_to_diagonal(m: &mut CsrMatrix, d: &[f64]) {
    for (r, &v) in d.iter().enumerate() {
        let (start, end) = (m.indptr[r], m.indptr[r + 1]);
        if let Some(p) = (start..end).find(|&p| m.indices[p] == r) {
            m.values[p] += v;
        }
    }
}

/// Backtracking on the residual 2-norm with a sufficient-decrease test.
fn line_search(
    layout: &FlowLayout,
    x: &mut Vec<f64>,
    dx: &[f64],
    alpha: &[f64],
    settings: &FlowSettings,
    rnorm: f64,
) -> Option<(f64, Vec<f64>)> {
    let mut step = 1.0;
    for _ in 0..8 {
        let trial: Vec<f64> = x.iter().zip(dx).map(|(a, b)| a + step * b).collect();
        let r_trial = layout.residual(&trial, alpha, settings);
        let n = norm2(&r_trial);
        if n < rnorm * (1.0 - 1e-4 * step) || n == 0.0 {
            *x = trial;
            return Some((step, r_trial));
        }
        step *= 0.5;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_grid, resolve_patches, FlowArrangement, GridSpec, PortRect, PortSpec, BoxSide};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn channel_2d(nx: usize, ny: usize) -> (Grid, BoundaryPatches) {
        let spec = GridSpec {
            nx,
            ny,
            nz: 1,
            lx: 4.0,
            ly: 1.0,
            lz: 1.0,
            symmetry: false,
        };
        let grid = build_grid(spec).unwrap();
        // Fluid 1 uses the whole inlet and outlet faces; fluid 2 gets tiny
        // ports in the corners so the layout stays valid.
        let ports = PortSpec {
            inlet1: PortRect::new(BoxSide::XMin, (0.0, 1.0), (0.0, 1.0)),
            outlet1: PortRect::new(BoxSide::XMax, (0.0, 1.0), (0.0, 1.0)),
            inlet2: PortRect::new(BoxSide::YMax, (0.9, 1.0), (0.0, 1.0)),
            outlet2: PortRect::new(BoxSide::YMin, (0.0, 0.1), (0.0, 1.0)),
        };
        let patches = resolve_patches(&grid, FlowArrangement::Counter, &ports)
            .or_else(|_| resolve_patches(&grid, FlowArrangement::Parallel, &ports))
            .unwrap();
        (grid, patches)
    }

    fn small_counter() -> (Grid, BoundaryPatches) {
        let spec = GridSpec {
            nx: 6,
            ny: 5,
            nz: 4,
            lx: 2.0,
            ly: 1.0,
            lz: 1.0,
            symmetry: true,
        };
        let ports = PortSpec::for_arrangement(FlowArrangement::Counter, &spec);
        let grid = build_grid(spec).unwrap();
        let patches = resolve_patches(&grid, FlowArrangement::Counter, &ports).unwrap();
        (grid, patches)
    }

    #[test]
    fn rest_state_without_pressure_drop() {
        let (grid, patches) = small_counter();
        let solver = FlowSolver::new(&grid, &patches, 0);
        let settings = FlowSettings {
            inlet_pressure: 0.0,
            ..Default::default()
        };
        let alpha = vec![10.0; grid.n_cells()];
        let state = solver.solve(&grid, &alpha, &settings, None).unwrap();
        assert!(state.converged);
        assert!(state.u.iter().all(|&v| v == 0.0));
        assert!(state.p.iter().all(|&v| v == state.p[0]));
    }

    #[test]
    fn continuity_block_is_negative_gradient_transpose() {
        let (grid, patches) = small_counter();
        let layout = FlowLayout::new(&grid, &patches, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..layout.n_unknowns()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let alpha: Vec<f64> = (0..grid.n_cells()).map(|_| rng.gen_range(0.0..50.0)).collect();
        let (j, _) = layout.jacobian(&x, &alpha, &FlowSettings::default());
        let nv = layout.n_vel;
        let g = j.block(0..nv, nv..layout.n_unknowns());
        let d = j.block(nv..layout.n_unknowns(), 0..nv);
        let gt = g.transpose();
        for r in 0..d.nrows {
            let (c1, v1) = d.row(r);
            let (c2, v2) = gt.row(r);
            assert_eq!(c1, c2);
            for (a, b) in v1.iter().zip(v2) {
                assert_eq!(*a, -*b);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (grid, patches) = small_counter();
        let settings = FlowSettings {
            reynolds: 50.0,
            ..Default::default()
        };
        for fluid in 0..2 {
            let layout = FlowLayout::new(&grid, &patches, fluid);
            let mut rng = ChaCha8Rng::seed_from_u64(7 + fluid as u64);
            let x: Vec<f64> = (0..layout.n_unknowns()).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let alpha: Vec<f64> = (0..grid.n_cells()).map(|_| rng.gen_range(0.0..100.0)).collect();
            let (j, _) = layout.jacobian(&x, &alpha, &settings);
            let v: Vec<f64> = (0..layout.n_unknowns()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let jv = j.mul_vec(&v);
            let h = 1e-7;
            let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
            let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
            let rp = layout.residual(&xp, &alpha, &settings);
            let rm = layout.residual(&xm, &alpha, &settings);
            let scale = jv.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..jv.len() {
                let fd = (rp[i] - rm[i]) / (2.0 * h);
                assert!((fd - jv[i]).abs() <= 1e-5 * scale, "row {i}: {fd} vs {}", jv[i]);
            }
        }
    }

    #[test]
    fn alpha_derivative_matches_finite_differences() {
        let (grid, patches) = small_counter();
        let settings = FlowSettings::default();
        let layout = FlowLayout::new(&grid, &patches, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..layout.n_unknowns()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let alpha: Vec<f64> = (0..grid.n_cells()).map(|_| rng.gen_range(0.0..100.0)).collect();
        let da: Vec<f64> = (0..grid.n_cells()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let exact = layout.alpha_directional(&x, &da);
        let h = 1e-5;
        let ap: Vec<f64> = alpha.iter().zip(&da).map(|(a, b)| a + h * b).collect();
        let am: Vec<f64> = alpha.iter().zip(&da).map(|(a, b)| a - h * b).collect();
        let rp = layout.residual(&x, &ap, &settings);
        let rm = layout.residual(&x, &am, &settings);
        for i in 0..exact.len() {
            let fd = (rp[i] - rm[i]) / (2.0 * h);
            assert!((fd - exact[i]).abs() <= 1e-5 * exact[i].abs().max(1e-8), "{i}");
        }
        // Transposed form agrees with the directional form.
        let lambda: Vec<f64> = (0..layout.n_unknowns()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs: f64 = lambda.iter().zip(&exact).map(|(a, b)| a * b).sum();
        let rhs: f64 = layout
            .alpha_sensitivity(&lambda, &x)
            .iter()
            .zip(&da)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn transpose_identity_on_random_pairs() {
        let (grid, patches) = small_counter();
        let settings = FlowSettings::default();
        let layout = FlowLayout::new(&grid, &patches, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x: Vec<f64> = (0..layout.n_unknowns()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let alpha: Vec<f64> = (0..grid.n_cells()).map(|_| rng.gen_range(0.0..100.0)).collect();
        let lin = LinearizedFlow::new(&layout, &x, &alpha, &settings).unwrap();
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let v: Vec<f64> = (0..layout.n_unknowns()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..layout.n_unknowns()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a: f64 = lin.apply(&v).iter().zip(&w).map(|(p, q)| p * q).sum();
            let b: f64 = v.iter().zip(&lin.apply_transpose(&w).unwrap()).map(|(p, q)| p * q).sum();
            worst = worst.max((a - b).abs());
        }
        assert!(worst <= 1e-10, "{worst}");
        let zero = lin.apply(&vec![0.0; layout.n_unknowns()]);
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn poiseuille_mean_velocity() {
        let (grid, patches) = channel_2d(64, 16);
        let solver = FlowSolver::new(&grid, &patches, 0);
        let settings = FlowSettings {
            reynolds: 1.0,
            ..Default::default()
        };
        let state = solver.solve(&grid, &vec![0.0; grid.n_cells()], &settings, None).unwrap();
        assert!(state.converged, "{:?}", state.residuals.max());
        let q = flow_rate(&grid, &state, &patches.outlet1);
        let mean = q / 1.0; // unit gap, unit depth
        let exact = 1.0 / 48.0;
        assert!((mean - exact).abs() / exact < 0.05, "mean {mean}");
        let q_in = flow_rate(&grid, &state, &patches.inlet1);
        assert!((q + q_in).abs() <= 1e-6 * q);
    }
}
