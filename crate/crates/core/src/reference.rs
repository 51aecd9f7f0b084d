//! Straight-channel reference design.

use crate::error::{Error, Result};
use crate::field_ops::DensityField;
use crate::mesh::{BoundaryPatches, FlowArrangement, Grid, PortId};

/// Two straight prismatic channels, one per fluid, split across the port
/// offset axis (z in 3D, y in 2D) by a single layer of solid (γ = 0.5).
/// Every cell column along x is either fluid 1, fluid 2 or wall, so each
/// channel runs straight from its inlet to its outlet.
pub fn generate_reference_design(
    grid: &Grid,
    patches: &BoundaryPatches,
    arrangement: FlowArrangement,
) -> Result<DensityField> {
    if arrangement.is_u_shaped() {
        return Err(Error::Unsupported(format!(
            "no straight-channel reference exists for the {arrangement} arrangement"
        )));
    }
    let axis = if grid.is_2d() { 1 } else { 2 };
    let wall = grid.n[axis] / 2;
    let gamma: Vec<f64> = (0..grid.n_cells())
        .map(|c| {
            let k = grid.cell_coords(c)[axis];
            match k.cmp(&wall) {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Less => 0.0,
                std::cmp::Ordering::Equal => 0.5,
            }
        })
        .collect();
    for id in PortId::ALL {
        let want = if id.fluid() == 0 { 1.0 } else { 0.0 };
        if patches.port_cells(grid, id).iter().any(|&c| gamma[c] != want) {
            return Err(Error::Unsupported(format!(
                "port {} is not on its fluid's side of the reference wall",
                id.key()
            )));
        }
    }
    Ok(DensityField {
        psi: gamma.clone(),
        gamma,
        gamma_hat: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_grid, resolve_patches, GridSpec, PortSpec};

    fn setup(arr: FlowArrangement, nz: usize) -> (Grid, BoundaryPatches) {
        let spec = GridSpec {
            nx: 12,
            ny: 12,
            nz,
            lx: 4.0,
            ly: 1.0,
            lz: 4.0,
            symmetry: nz > 1,
        };
        let ports = PortSpec::for_arrangement(arr, &spec);
        let grid = build_grid(spec).unwrap();
        let patches = resolve_patches(&grid, arr, &ports).unwrap();
        (grid, patches)
    }

    #[test]
    fn counter_slabs_touch_only_their_ports() {
        for nz in [12, 1] {
            let (grid, patches) = setup(FlowArrangement::Counter, nz);
            let d = generate_reference_design(&grid, &patches, FlowArrangement::Counter).unwrap();
            for c in patches.port_cells(&grid, PortId::Inlet1).into_iter().chain(patches.port_cells(&grid, PortId::Outlet1)) {
                assert_eq!(d.gamma[c], 1.0);
            }
            for c in patches.port_cells(&grid, PortId::Inlet2).into_iter().chain(patches.port_cells(&grid, PortId::Outlet2)) {
                assert_eq!(d.gamma[c], 0.0);
            }
            assert!(d.gamma.iter().all(|&g| g == 0.0 || g == 0.5 || g == 1.0));
            // Straight: γ does not vary along x.
            for c in 0..grid.n_cells() {
                let [i, j, k] = grid.cell_coords(c);
                if i > 0 {
                    assert_eq!(d.gamma[c], d.gamma[grid.cell_index([i - 1, j, k])]);
                }
            }
        }
    }

    #[test]
    fn u_arrangements_are_rejected() {
        for arr in [FlowArrangement::UCounter, FlowArrangement::UParallel] {
            let (grid, patches) = setup(arr, 12);
            assert!(matches!(
                generate_reference_design(&grid, &patches, arr),
                Err(Error::Unsupported(_))
            ));
        }
    }
}
