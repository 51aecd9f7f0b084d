//! Legacy ASCII VTK snapshots and CSV history files.
//!
//! Fields are cell-centred; the VTK lattice points are the cell centres, so
//! `DIMENSIONS` equals the cell counts and data are written as `POINT_DATA`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::Grid;
use crate::objective::StateBundle;
use crate::optimizer::HistoryRecord;

pub const HISTORY_HEADER: &str = "step,J,J1,J2,Vdot1,Vdot2,Tout1,Tout2,res_flow1,res_flow2,res_energy";

pub fn history_csv(history: &[HistoryRecord]) -> String {
    let mut out = String::with_capacity(64 * (history.len() + 1));
    out.push_str(HISTORY_HEADER);
    out.push('\n');
    for h in history {
        let r = &h.report;
        let _ = writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            h.step,
            r.j,
            r.j1,
            r.j2,
            r.vdot1,
            r.vdot2,
            r.tout1,
            r.tout2,
            h.flow_residual[0],
            h.flow_residual[1],
            h.energy_residual
        );
    }
    out
}

pub fn write_history(path: &Path, history: &[HistoryRecord]) -> Result<()> {
    fs::write(path, history_csv(history))?;
    Ok(())
}

/// In-memory VTK snapshot builder.
pub struct VtkWriter<'a> {
    grid: &'a Grid,
    body: String,
}

impl<'a> VtkWriter<'a> {
    pub fn new(grid: &'a Grid, title: &str) -> Self {
        let mut body = String::new();
        let h = grid.h;
        let _ = write!(
            body,
            "# vtk DataFile Version 3.0\n{}\nASCII\nDATASET STRUCTURED_POINTS\n\
             DIMENSIONS {} {} {}\nORIGIN {:e} {:e} {:e}\nSPACING {:e} {:e} {:e}\nPOINT_DATA {}\n",
            title.lines().next().unwrap_or(""),
            grid.n[0],
            grid.n[1],
            grid.n[2],
            0.5 * h[0],
            0.5 * h[1],
            0.5 * h[2],
            h[0],
            h[1],
            h[2],
            grid.n_cells()
        );
        VtkWriter { grid, body }
    }

    pub fn scalars(&mut self, name: &str, values: &[f64]) -> Result<&mut Self> {
        self.check(values.len())?;
        let _ = writeln!(self.body, "SCALARS {name} double 1\nLOOKUP_TABLE default");
        for v in values {
            let _ = writeln!(self.body, "{v:e}");
        }
        Ok(self)
    }

    pub fn vectors(&mut self, name: &str, values: &[[f64; 3]]) -> Result<&mut Self> {
        self.check(values.len())?;
        let _ = writeln!(self.body, "VECTORS {name} double");
        for v in values {
            let _ = writeln!(self.body, "{:e} {:e} {:e}", v[0], v[1], v[2]);
        }
        Ok(self)
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.grid.n_cells() {
            return Err(Error::SizeMismatch {
                expected: self.grid.n_cells(),
                got: len,
            });
        }
        Ok(())
    }

    pub fn finish(self) -> String {
        self.body
    }
}

/// Snapshot of a full analysis: design fields, both flows, temperature and
/// (optionally) the sensitivity.
pub fn state_vtk(grid: &Grid, bundle: &StateBundle, sensitivity: Option<&[f64]>) -> Result<String> {
    let mut w = VtkWriter::new(grid, "heat exchanger design");
    w.scalars("psi", &bundle.density.psi)?;
    w.scalars("gamma", &bundle.density.gamma)?;
    if let Some(gh) = &bundle.density.gamma_hat {
        w.scalars("gamma_hat", gh)?;
    }
    for (i, flow) in bundle.flows.iter().enumerate() {
        let vel: Vec<[f64; 3]> = (0..grid.n_cells()).map(|c| flow.cell_velocity(grid, c)).collect();
        w.vectors(&format!("velocity{}", i + 1), &vel)?;
        w.scalars(&format!("pressure{}", i + 1), &flow.p)?;
    }
    w.scalars("temperature", &bundle.temperature.t)?;
    if let Some(s) = sensitivity {
        w.scalars("sensitivity", s)?;
    }
    Ok(w.finish())
}

pub fn write_state_vtk(path: &Path, grid: &Grid, bundle: &StateBundle, sensitivity: Option<&[f64]>) -> Result<()> {
    fs::write(path, state_vtk(grid, bundle, sensitivity)?)?;
    Ok(())
}

/// Reads one scalar field back from a file written by [`VtkWriter`].
pub fn read_vtk_scalar(text: &str, name: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines();
    let mut count = None;
    while let Some(line) = lines.next() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("POINT_DATA") | Some("CELL_DATA") => {
                count = parts.next().and_then(|n| n.parse::<usize>().ok());
            }
            Some("SCALARS") if parts.next() == Some(name) => {
                let n = count.ok_or_else(|| Error::Parse("SCALARS before POINT_DATA".into()))?;
                let table = lines.next().unwrap_or("");
                if !table.starts_with("LOOKUP_TABLE") {
                    return Err(Error::Parse(format!("missing LOOKUP_TABLE for `{name}`")));
                }
                let values = lines
                    .by_ref()
                    .flat_map(|l| l.split_whitespace())
                    .take(n)
                    .map(|v| v.parse::<f64>().map_err(|_| Error::Parse(format!("bad value `{v}` in `{name}`"))))
                    .collect::<Result<Vec<_>>>()?;
                if values.len() != n {
                    return Err(Error::Parse(format!("field `{name}` is truncated")));
                }
                return Ok(values);
            }
            _ => {}
        }
    }
    Err(Error::Parse(format!("no scalar field `{name}`")))
}

/// Grid dimensions declared in a VTK file.
pub fn read_vtk_dimensions(text: &str) -> Result<[usize; 3]> {
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("DIMENSIONS") {
            let v: Vec<usize> = rest
                .split_whitespace()
                .map(|p| p.parse().map_err(|_| Error::Parse(format!("bad DIMENSIONS line `{line}`"))))
                .collect::<Result<_>>()?;
            if v.len() == 3 {
                return Ok([v[0], v[1], v[2]]);
            }
        }
    }
    Err(Error::Parse("no DIMENSIONS line".into()))
}
