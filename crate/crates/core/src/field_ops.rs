//! Design-field pipeline: raw ψ → filtered γ (Helmholtz PDE filter with
//! homogeneous Neumann boundaries) → projected γ̂ (tanh projection), plus the
//! transposed maps needed to pull sensitivities back to ψ.

use crate::error::{Error, Result};
use crate::linalg::{pcg, CsrMatrix, TripletBuilder};
use crate::mesh::{BoundaryPatches, Grid, PortId};

#[derive(Clone, Debug, PartialEq)]
pub struct FilterSettings {
    /// Filter radius in units of the characteristic length.
    pub radius: f64,
    pub beta: f64,
    pub eta: f64,
}

impl FilterSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::param("R", "must be positive"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::param("beta", "must be positive"));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::param("eta", "must lie strictly between 0 and 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityField {
    pub psi: Vec<f64>,
    pub gamma: Vec<f64>,
    pub gamma_hat: Option<Vec<f64>>,
}

impl DensityField {
    /// The field the physics sees: γ̂ when projection is active, else γ.
    pub fn physical(&self) -> &[f64] {
        self.gamma_hat.as_deref().unwrap_or(&self.gamma)
    }
}

/// Cells whose design value is pinned: the layer next to each port is held
/// at the pure value of the fluid that uses the port.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignDomain {
    frozen: Vec<Option<f64>>,
}

impl DesignDomain {
    pub fn new(grid: &Grid, patches: &BoundaryPatches) -> Result<Self> {
        let mut frozen = vec![None; grid.n_cells()];
        for id in PortId::ALL {
            let value = if id.fluid() == 0 { 1.0 } else { 0.0 };
            for cell in patches.port_cells(grid, id) {
                match frozen[cell] {
                    Some(v) if v != value => {
                        return Err(Error::InvalidPorts(format!(
                            "cell {cell} touches ports of both fluids"
                        )))
                    }
                    _ => frozen[cell] = Some(value),
                }
            }
        }
        Ok(DesignDomain { frozen })
    }

    /// Every cell free; used for filter-only studies.
    pub fn unconstrained(n_cells: usize) -> Self {
        DesignDomain {
            frozen: vec![None; n_cells],
        }
    }

    pub fn len(&self) -> usize {
        self.frozen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty()
    }

    #[inline]
    pub fn is_design(&self, cell: usize) -> bool {
        self.frozen[cell].is_none()
    }

    pub fn frozen_value(&self, cell: usize) -> Option<f64> {
        self.frozen[cell]
    }

    pub fn design_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.frozen
            .iter()
            .enumerate()
            .filter_map(|(i, f)| f.is_none().then_some(i))
    }

    /// Uniform initial field with pinned cells applied.
    pub fn initial_psi(&self, value: f64) -> Vec<f64> {
        self.frozen.iter().map(|f| f.unwrap_or(value)).collect()
    }

    pub fn enforce(&self, psi: &mut [f64]) {
        for (p, f) in psi.iter_mut().zip(&self.frozen) {
            if let Some(v) = f {
                *p = *v;
            }
        }
    }

    pub fn mask_sensitivity(&self, grad: &mut [f64]) {
        for (g, f) in grad.iter_mut().zip(&self.frozen) {
            if f.is_some() {
                *g = 0.0;
            }
        }
    }
}

/// Discrete Helmholtz filter −R²∇²γ + γ = ψ on the cell grid.
#[derive(Clone, Debug)]
pub struct HelmholtzFilter {
    matrix: CsrMatrix,
    inv_diag: Vec<f64>,
    volume: f64,
    pub tol: f64,
}

impl HelmholtzFilter {
    pub fn new(grid: &Grid, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::param("R", "must be positive"));
        }
        let n = grid.n_cells();
        let volume = grid.cell_volume();
        let r2 = radius * radius;
        let mut t = TripletBuilder::with_capacity(n, n, 7 * n);
        for cell in 0..n {
            t.push(cell, cell, volume);
        }
        for axis in 0..3 {
            let coeff = r2 * grid.face_area(axis) / grid.h[axis];
            for face in grid.face_range(axis) {
                if let (Some(a), Some(b)) = grid.face_cells(face) {
                    t.push(a, a, coeff);
                    t.push(b, b, coeff);
                    t.push(a, b, -coeff);
                    t.push(b, a, -coeff);
                }
            }
        }
        let matrix = t.build();
        let inv_diag = matrix.diagonal().iter().map(|d| 1.0 / d).collect();
        Ok(HelmholtzFilter {
            matrix,
            inv_diag,
            volume,
            tol: 1e-13,
        })
    }

    fn solve_scaled(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.inv_diag.len();
        if rhs.len() != n {
            return Err(Error::SizeMismatch {
                expected: n,
                got: rhs.len(),
            });
        }
        let b: Vec<f64> = rhs.iter().map(|v| v * self.volume).collect();
        let mut x = rhs.to_vec();
        pcg(
            |v, out| self.matrix.matvec(v, out),
            |r, z| {
                for ((zi, ri), di) in z.iter_mut().zip(r).zip(&self.inv_diag) {
                    *zi = ri * di;
                }
            },
            &b,
            &mut x,
            self.tol,
            20 * n + 100,
        )
        .into_result("Helmholtz filter")?;
        Ok(x)
    }

    pub fn apply(&self, psi: &[f64]) -> Result<Vec<f64>> {
        self.solve_scaled(psi)
    }

    /// Transpose of `apply` with respect to the Euclidean inner product. The
    /// filter matrix is symmetric and cells share one volume, so the map is
    /// self-adjoint.
    pub fn adjoint(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        self.solve_scaled(rhs)
    }
}

pub fn helmholtz_filter(grid: &Grid, psi: &[f64], radius: f64) -> Result<Vec<f64>> {
    HelmholtzFilter::new(grid, radius)?.apply(psi)
}

pub fn filter_adjoint(grid: &Grid, rhs: &[f64], radius: f64) -> Result<Vec<f64>> {
    HelmholtzFilter::new(grid, radius)?.adjoint(rhs)
}

/// Smoothed Heaviside projection; fixes 0 and 1 exactly.
#[inline]
pub fn project(gamma: f64, beta: f64, eta: f64) -> f64 {
    let a = (beta * eta).tanh();
    (a + (beta * (gamma - eta)).tanh()) / (a + (beta * (1.0 - eta)).tanh())
}

#[inline]
pub fn project_derivative(gamma: f64, beta: f64, eta: f64) -> f64 {
    let sech = 1.0 / (beta * (gamma - eta)).cosh();
    beta * sech * sech / ((beta * eta).tanh() + (beta * (1.0 - eta)).tanh())
}
