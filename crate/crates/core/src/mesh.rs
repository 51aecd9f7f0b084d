//! Uniform Cartesian grid over the design box, staggered face indexing, and
//! boundary patches for the supported flow arrangements.
//!
//! Cells are indexed `i + nx * (j + ny * k)`. Faces are grouped by normal
//! axis; the faces normal to axis `d` form an `(n_d + 1)`-long lattice along
//! `d`, so face `(d, [i, j, k])` sits on the minus side of cell `[i, j, k]`.
//! Global face ids concatenate the x, y and z groups.
//!
//! With `nz == 1` the grid is in 2D mode: both z boundaries are symmetry
//! planes and the z velocity component vanishes identically.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BoxSide {
    XMin,
    XMax,
    YMin,
    YMax,
    ZMin,
    ZMax,
}

impl BoxSide {
    pub const ALL: [BoxSide; 6] = [
        BoxSide::XMin,
        BoxSide::XMax,
        BoxSide::YMin,
        BoxSide::YMax,
        BoxSide::ZMin,
        BoxSide::ZMax,
    ];

    pub fn axis(self) -> usize {
        match self {
            BoxSide::XMin | BoxSide::XMax => 0,
            BoxSide::YMin | BoxSide::YMax => 1,
            BoxSide::ZMin | BoxSide::ZMax => 2,
        }
    }

    pub fn is_max(self) -> bool {
        matches!(self, BoxSide::XMax | BoxSide::YMax | BoxSide::ZMax)
    }

    /// The two tangential axes in increasing order.
    pub fn tangential_axes(self) -> [usize; 2] {
        match self.axis() {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BoxSide::XMin => "xmin",
            BoxSide::XMax => "xmax",
            BoxSide::YMin => "ymin",
            BoxSide::YMax => "ymax",
            BoxSide::ZMin => "zmin",
            BoxSide::ZMax => "zmax",
        }
    }
}

impl FromStr for BoxSide {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BoxSide::ALL
            .iter()
            .copied()
            .find(|side| side.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown box side `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub lx: f64,
    pub ly: f64,
    pub lz: f64,
    /// Mirror plane at y = 0 (the ZX plane of the full device).
    pub symmetry: bool,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, n) in [("nx", self.nx), ("ny", self.ny)] {
            if n < 4 {
                return Err(Error::InvalidGrid(format!("{name} = {n}, need at least 4")));
            }
        }
        if self.nz != 1 && self.nz < 4 {
            return Err(Error::InvalidGrid(format!(
                "nz = {}, need at least 4 (or 1 for 2D mode)",
                self.nz
            )));
        }
        for (name, l) in [("Lx", self.lx), ("Ly", self.ly), ("Lz", self.lz)] {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidGrid(format!("{name} = {l}, must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Grid {
    pub spec: GridSpec,
    pub n: [usize; 3],
    pub h: [f64; 3],
    len: [f64; 3],
    face_offset: [usize; 4],
}

pub fn build_grid(spec: GridSpec) -> Result<Grid> {
    spec.validate()?;
    let n = [spec.nx, spec.ny, spec.nz];
    let len = [spec.lx, spec.ly, spec.lz];
    let h = [len[0] / n[0] as f64, len[1] / n[1] as f64, len[2] / n[2] as f64];
    let mut face_offset = [0usize; 4];
    for d in 0..3 {
        let mut dims = n;
        dims[d] += 1;
        face_offset[d + 1] = face_offset[d] + dims[0] * dims[1] * dims[2];
    }
    Ok(Grid {
        spec,
        n,
        h,
        len,
        face_offset,
    })
}

impl Grid {
    pub fn n_cells(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    pub fn is_2d(&self) -> bool {
        self.n[2] == 1
    }

    pub fn length(&self, axis: usize) -> f64 {
        self.len[axis]
    }

    #[inline]
    pub fn cell_index(&self, c: [usize; 3]) -> usize {
        c[0] + self.n[0] * (c[1] + self.n[1] * c[2])
    }

    #[inline]
    pub fn cell_coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.n[0];
        let rest = idx / self.n[0];
        [i, rest % self.n[1], rest / self.n[1]]
    }

    pub fn cell_center(&self, c: [usize; 3]) -> [f64; 3] {
        [
            (c[0] as f64 + 0.5) * self.h[0],
            (c[1] as f64 + 0.5) * self.h[1],
            (c[2] as f64 + 0.5) * self.h[2],
        ]
    }

    pub fn cell_volume(&self) -> f64 {
        self.h[0] * self.h[1] * self.h[2]
    }

    /// Area of a face normal to `axis`.
    pub fn face_area(&self, axis: usize) -> f64 {
        match axis {
            0 => self.h[1] * self.h[2],
            1 => self.h[0] * self.h[2],
            _ => self.h[0] * self.h[1],
        }
    }

    pub fn face_dims(&self, axis: usize) -> [usize; 3] {
        let mut dims = self.n;
        dims[axis] += 1;
        dims
    }

    pub fn n_faces_axis(&self, axis: usize) -> usize {
        self.face_offset[axis + 1] - self.face_offset[axis]
    }

    pub fn n_faces(&self) -> usize {
        self.face_offset[3]
    }

    pub fn face_range(&self, axis: usize) -> std::ops::Range<usize> {
        self.face_offset[axis]..self.face_offset[axis + 1]
    }

    #[inline]
    pub fn face_index(&self, axis: usize, f: [usize; 3]) -> usize {
        let dims = self.face_dims(axis);
        self.face_offset[axis] + f[0] + dims[0] * (f[1] + dims[1] * f[2])
    }

    #[inline]
    pub fn face_coords(&self, face: usize) -> (usize, [usize; 3]) {
        let axis = if face < self.face_offset[1] {
            0
        } else if face < self.face_offset[2] {
            1
        } else {
            2
        };
        let dims = self.face_dims(axis);
        let local = face - self.face_offset[axis];
        let i = local % dims[0];
        let rest = local / dims[0];
        (axis, [i, rest % dims[1], rest / dims[1]])
    }

    /// Face on the minus (`plus == false`) or plus side of a cell.
    #[inline]
    pub fn cell_face(&self, cell: [usize; 3], axis: usize, plus: bool) -> usize {
        let mut f = cell;
        if plus {
            f[axis] += 1;
        }
        self.face_index(axis, f)
    }

    /// Cells on the minus and plus side of a face; `None` outside the box.
    pub fn face_cells(&self, face: usize) -> (Option<usize>, Option<usize>) {
        let (axis, f) = self.face_coords(face);
        let minus = if f[axis] > 0 {
            let mut c = f;
            c[axis] -= 1;
            Some(self.cell_index(c))
        } else {
            None
        };
        let plus = if f[axis] < self.n[axis] {
            Some(self.cell_index(f))
        } else {
            None
        };
        (minus, plus)
    }

    pub fn boundary_side(&self, face: usize) -> Option<BoxSide> {
        let (axis, f) = self.face_coords(face);
        let side = |min, max| {
            if f[axis] == 0 {
                Some(min)
            } else if f[axis] == self.n[axis] {
                Some(max)
            } else {
                None
            }
        };
        match axis {
            0 => side(BoxSide::XMin, BoxSide::XMax),
            1 => side(BoxSide::YMin, BoxSide::YMax),
            _ => side(BoxSide::ZMin, BoxSide::ZMax),
        }
    }

    pub fn is_symmetry_side(&self, side: BoxSide) -> bool {
        match side {
            BoxSide::YMin => self.spec.symmetry,
            BoxSide::ZMin | BoxSide::ZMax => self.is_2d(),
            _ => false,
        }
    }

    /// Face centre of a boundary face in the two tangential coordinates of its side.
    fn tangential_center(&self, face: usize) -> [f64; 2] {
        let (axis, f) = self.face_coords(face);
        let side = self.boundary_side(face).expect("boundary face");
        debug_assert_eq!(side.axis(), axis);
        let [a, b] = side.tangential_axes();
        [
            (f[a] as f64 + 0.5) * self.h[a],
            (f[b] as f64 + 0.5) * self.h[b],
        ]
    }

    pub fn boundary_faces(&self, side: BoxSide) -> Vec<usize> {
        let axis = side.axis();
        let dims = self.face_dims(axis);
        let fixed = if side.is_max() { self.n[axis] } else { 0 };
        let [a, b] = side.tangential_axes();
        let mut out = Vec::with_capacity(dims[a] * dims[b]);
        for jb in 0..dims[b] {
            for ja in 0..dims[a] {
                let mut f = [0usize; 3];
                f[axis] = fixed;
                f[a] = ja;
                f[b] = jb;
                out.push(self.face_index(axis, f));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FlowArrangement {
    Counter,
    Parallel,
    UCounter,
    UParallel,
}

impl FlowArrangement {
    pub fn name(self) -> &'static str {
        match self {
            FlowArrangement::Counter => "counter",
            FlowArrangement::Parallel => "parallel",
            FlowArrangement::UCounter => "u-counter",
            FlowArrangement::UParallel => "u-parallel",
        }
    }

    pub fn is_u_shaped(self) -> bool {
        matches!(self, FlowArrangement::UCounter | FlowArrangement::UParallel)
    }
}

impl fmt::Display for FlowArrangement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FlowArrangement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "counter" => Ok(FlowArrangement::Counter),
            "parallel" => Ok(FlowArrangement::Parallel),
            "u-counter" => Ok(FlowArrangement::UCounter),
            "u-parallel" => Ok(FlowArrangement::UParallel),
            _ => Err(Error::Parse(format!("unknown flow arrangement `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PortId {
    Inlet1,
    Outlet1,
    Inlet2,
    Outlet2,
}

impl PortId {
    pub const ALL: [PortId; 4] = [PortId::Inlet1, PortId::Outlet1, PortId::Inlet2, PortId::Outlet2];

    /// 0 for fluid 1, 1 for fluid 2.
    pub fn fluid(self) -> usize {
        match self {
            PortId::Inlet1 | PortId::Outlet1 => 0,
            PortId::Inlet2 | PortId::Outlet2 => 1,
        }
    }

    pub fn is_inlet(self) -> bool {
        matches!(self, PortId::Inlet1 | PortId::Inlet2)
    }

    pub fn key(self) -> &'static str {
        match self {
            PortId::Inlet1 => "inlet1",
            PortId::Outlet1 => "outlet1",
            PortId::Inlet2 => "inlet2",
            PortId::Outlet2 => "outlet2",
        }
    }

    pub fn inlet(fluid: usize) -> PortId {
        if fluid == 0 {
            PortId::Inlet1
        } else {
            PortId::Inlet2
        }
    }

    pub fn outlet(fluid: usize) -> PortId {
        if fluid == 0 {
            PortId::Outlet1
        } else {
            PortId::Outlet2
        }
    }
}

/// Axis-aligned port rectangle on one side of the box. The two ranges are
/// fractions of the box extent along the side's tangential axes (in
/// increasing axis order: y,z for x sides; x,z for y sides; x,y for z sides).
/// A boundary face belongs to the port when its centre lies inside.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PortRect {
    pub side: BoxSide,
    pub a: (f64, f64),
    pub b: (f64, f64),
}

impl PortRect {
    pub fn new(side: BoxSide, a: (f64, f64), b: (f64, f64)) -> Self {
        PortRect { side, a, b }
    }

    fn contains(&self, grid: &Grid, face: usize) -> bool {
        if grid.boundary_side(face) != Some(self.side) {
            return false;
        }
        let [ta, tb] = self.side.tangential_axes();
        let [ca, cb] = grid.tangential_center(face);
        let eps = 1e-9;
        let (la, lb) = (grid.length(ta), grid.length(tb));
        ca >= self.a.0 * la - eps
            && ca <= self.a.1 * la + eps
            && cb >= self.b.0 * lb - eps
            && cb <= self.b.1 * lb + eps
    }

    fn validate(&self, name: &str) -> Result<()> {
        for (lo, hi) in [self.a, self.b] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
                return Err(Error::InvalidPorts(format!(
                    "port {name}: range [{lo}, {hi}] is not inside the face"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PortSpec {
    pub inlet1: PortRect,
    pub outlet1: PortRect,
    pub inlet2: PortRect,
    pub outlet2: PortRect,
}

impl PortSpec {
    /// Default ports: each port covers one third of its face along both
    /// tangential directions. Fluid 1 sits in the upper band of the offset
    /// axis (z in 3D, y in 2D) and fluid 2 in the lower band. With a y = 0
    /// mirror plane the span band hugs the mirror so that the full device has
    /// centred ports.
    pub fn for_arrangement(arrangement: FlowArrangement, spec: &GridSpec) -> PortSpec {
        let upper = (7.0 / 12.0, 11.0 / 12.0);
        let lower = (1.0 / 12.0, 5.0 / 12.0);
        let port = |side: BoxSide, band: (f64, f64)| {
            if spec.nz == 1 {
                PortRect::new(side, band, (0.0, 1.0))
            } else {
                let span = if spec.symmetry {
                    (0.0, 1.0 / 3.0)
                } else {
                    (1.0 / 3.0, 2.0 / 3.0)
                };
                PortRect::new(side, span, band)
            }
        };
        use BoxSide::{XMax, XMin};
        match arrangement {
            FlowArrangement::Counter => PortSpec {
                inlet1: port(XMin, upper),
                outlet1: port(XMax, upper),
                inlet2: port(XMax, lower),
                outlet2: port(XMin, lower),
            },
            FlowArrangement::Parallel => PortSpec {
                inlet1: port(XMin, upper),
                outlet1: port(XMax, upper),
                inlet2: port(XMin, lower),
                outlet2: port(XMax, lower),
            },
            // Each fluid turns around on its own face: fluid 1 on x = 0
            // (upper band in, lower band out), fluid 2 on x = Lx.
            FlowArrangement::UCounter => PortSpec {
                inlet1: port(XMin, upper),
                outlet1: port(XMin, lower),
                inlet2: port(XMax, lower),
                outlet2: port(XMax, upper),
            },
            FlowArrangement::UParallel => PortSpec {
                inlet1: port(XMin, upper),
                outlet1: port(XMin, lower),
                inlet2: port(XMax, upper),
                outlet2: port(XMax, lower),
            },
        }
    }

    pub fn get(&self, id: PortId) -> &PortRect {
        match id {
            PortId::Inlet1 => &self.inlet1,
            PortId::Outlet1 => &self.outlet1,
            PortId::Inlet2 => &self.inlet2,
            PortId::Outlet2 => &self.outlet2,
        }
    }

    pub fn get_mut(&mut self, id: PortId) -> &mut PortRect {
        match id {
            PortId::Inlet1 => &mut self.inlet1,
            PortId::Outlet1 => &mut self.outlet1,
            PortId::Inlet2 => &mut self.inlet2,
            PortId::Outlet2 => &mut self.outlet2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaceTag {
    Interior,
    Wall,
    Symmetry,
    Port(PortId),
}

#[derive(Clone, Debug)]
pub struct BoundaryPatches {
    pub inlet1: Vec<usize>,
    pub outlet1: Vec<usize>,
    pub inlet2: Vec<usize>,
    pub outlet2: Vec<usize>,
    pub walls: Vec<usize>,
    pub symmetry: Vec<usize>,
    tags: Vec<FaceTag>,
}

impl BoundaryPatches {
    pub fn port(&self, id: PortId) -> &[usize] {
        match id {
            PortId::Inlet1 => &self.inlet1,
            PortId::Outlet1 => &self.outlet1,
            PortId::Inlet2 => &self.inlet2,
            PortId::Outlet2 => &self.outlet2,
        }
    }

    #[inline]
    pub fn tag(&self, face: usize) -> FaceTag {
        self.tags[face]
    }

    /// Cells adjacent to the faces of a port.
    pub fn port_cells(&self, grid: &Grid, id: PortId) -> Vec<usize> {
        self.port(id)
            .iter()
            .map(|&f| {
                let (m, p) = grid.face_cells(f);
                m.or(p).expect("boundary face has one cell")
            })
            .collect()
    }
}

pub fn resolve_patches(
    grid: &Grid,
    arrangement: FlowArrangement,
    ports: &PortSpec,
) -> Result<BoundaryPatches> {
    for id in PortId::ALL {
        let rect = ports.get(id);
        rect.validate(id.key())?;
        if grid.is_symmetry_side(rect.side) {
            return Err(Error::InvalidPorts(format!(
                "port {} lies on a symmetry plane",
                id.key()
            )));
        }
    }
    for fluid in 0..2 {
        let same_side =
            ports.get(PortId::inlet(fluid)).side == ports.get(PortId::outlet(fluid)).side;
        if same_side != arrangement.is_u_shaped() {
            return Err(Error::InvalidPorts(format!(
                "fluid {} ports do not match the {} arrangement",
                fluid + 1,
                arrangement
            )));
        }
    }

    let mut tags = vec![FaceTag::Interior; grid.n_faces()];
    let mut patches = BoundaryPatches {
        inlet1: Vec::new(),
        outlet1: Vec::new(),
        inlet2: Vec::new(),
        outlet2: Vec::new(),
        walls: Vec::new(),
        symmetry: Vec::new(),
        tags: Vec::new(),
    };
    for side in BoxSide::ALL {
        let symmetric = grid.is_symmetry_side(side);
        for face in grid.boundary_faces(side) {
            let mut tag = if symmetric {
                FaceTag::Symmetry
            } else {
                FaceTag::Wall
            };
            if !symmetric {
                for id in PortId::ALL {
                    if ports.get(id).contains(grid, face) {
                        if let FaceTag::Port(other) = tag {
                            return Err(Error::InvalidPorts(format!(
                                "ports {} and {} overlap",
                                other.key(),
                                id.key()
                            )));
                        }
                        tag = FaceTag::Port(id);
                    }
                }
            }
            tags[face] = tag;
            match tag {
                FaceTag::Wall => patches.walls.push(face),
                FaceTag::Symmetry => patches.symmetry.push(face),
                FaceTag::Port(PortId::Inlet1) => patches.inlet1.push(face),
                FaceTag::Port(PortId::Outlet1) => patches.outlet1.push(face),
                FaceTag::Port(PortId::Inlet2) => patches.inlet2.push(face),
                FaceTag::Port(PortId::Outlet2) => patches.outlet2.push(face),
                FaceTag::Interior => unreachable!(),
            }
        }
    }
    for id in PortId::ALL {
        if patches.port(id).is_empty() {
            return Err(Error::InvalidPorts(format!(
                "port {} covers no boundary face at this resolution",
                id.key()
            )));
        }
    }
    patches.tags = tags;
    Ok(patches)
}
