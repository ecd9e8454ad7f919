//! Block-structured cube tree: level laws, tree generation with 2:1 balance,
//! ghost frames and the precomputed ghost exchange plan.
//!
//! Coordinates are integer lattice indices. A cube at level `l` with cube
//! coordinates `c` covers cells `c*n .. (c+1)*n` of the level-`l` lattice.
//! The lateral axes are periodic; the vertical axis is bounded by the ground
//! and a rigid lid.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::terrain::TerrainField;

/// Width of the ghost frame around every cube.
pub const GHOST: usize = 4;
/// Depth of the ghost slab that is integrated alongside the interior.
pub const INTEGRATED_DEPTH: i64 = 2;

/// Index arithmetic for one cube's flat arrays (interior plus ghost frame).
///
/// Cells and corners share the same layout: corner `(ci, cj, ck)` is the low
/// corner of cell `(ci, cj, ck)`. Local indices run from `-ghost` to
/// `n + ghost - 1`, x fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub n: usize,
    pub ghost: usize,
}

impl Block {
    pub fn new(n: usize) -> Self {
        Self { n, ghost: GHOST }
    }

    /// Points per axis including the frame.
    pub fn nt(&self) -> usize {
        self.n + 2 * self.ghost
    }

    /// Corner lines per axis (one more than cells, for the upper frame edge).
    pub fn nl(&self) -> usize {
        self.nt() + 1
    }

    pub fn len(&self) -> usize {
        let nt = self.nt();
        nt * nt * nt
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn idx(&self, i: i64, j: i64, k: i64) -> usize {
        let g = self.ghost as i64;
        let nt = self.nt() as i64;
        (((k + g) * nt + (j + g)) * nt + (i + g)) as usize
    }

    #[inline]
    pub fn line(&self, ci: i64, cj: i64) -> usize {
        let g = self.ghost as i64;
        ((cj + g) * self.nl() as i64 + (ci + g)) as usize
    }

    /// Flat-index offsets for a unit step along x, y, z.
    #[inline]
    pub fn strides(&self) -> [usize; 3] {
        let nt = self.nt();
        [1, nt, nt * nt]
    }

    pub fn coords(&self, idx: usize) -> [i64; 3] {
        let nt = self.nt();
        let g = self.ghost as i64;
        [
            (idx % nt) as i64 - g,
            ((idx / nt) % nt) as i64 - g,
            (idx / (nt * nt)) as i64 - g,
        ]
    }

    pub fn lo(&self) -> i64 {
        -(self.ghost as i64)
    }

    pub fn hi(&self) -> i64 {
        (self.n + self.ghost) as i64
    }

    pub fn in_frame(&self, p: [i64; 3]) -> bool {
        p.iter().all(|&v| v >= self.lo() && v < self.hi())
    }

    pub fn is_interior(&self, p: [i64; 3]) -> bool {
        p.iter().all(|&v| v >= 0 && v < self.n as i64)
    }
}

/// Half-open index box `[lo, hi)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexBox {
    pub lo: [i64; 3],
    pub hi: [i64; 3],
}

impl IndexBox {
    pub fn contains(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] < self.hi[a])
    }

    pub fn grow(&self, d: i64) -> Self {
        Self {
            lo: self.lo.map(|v| v - d),
            hi: self.hi.map(|v| v + d),
        }
    }

    pub fn clip(&self, other: &IndexBox) -> Self {
        Self {
            lo: [0, 1, 2].map(|a| self.lo[a].max(other.lo[a])),
            hi: [0, 1, 2].map(|a| self.hi[a].min(other.hi[a])),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = [i64; 3]> + '_ {
        let (lo, hi) = (self.lo, self.hi);
        (lo[2]..hi[2]).flat_map(move |k| {
            (lo[1]..hi[1]).flat_map(move |j| (lo[0]..hi[0]).map(move |i| [i, j, k]))
        })
    }

    pub fn count(&self) -> usize {
        (0..3)
            .map(|a| (self.hi[a] - self.lo[a]).max(0) as usize)
            .product()
    }
}

/// Physical extent and coarse resolution of the computational domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub extent: [f64; 3],
    pub coarse_spacing: f64,
    pub cells_per_cube: usize,
    pub max_level: u32,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.cells_per_cube;
        if n < 8 || n % 2 != 0 {
            return Err(Error::Config(format!(
                "cells per cube must be even and at least 8, got {n}"
            )));
        }
        if !(self.coarse_spacing > 0.0) {
            return Err(Error::Config("coarse spacing must be positive".into()));
        }
        if self.max_level > 12 {
            return Err(Error::Config("max level above 12 is not supported".into()));
        }
        let width = n as f64 * self.coarse_spacing;
        for (a, &e) in self.extent.iter().enumerate() {
            let q = e / width;
            if !(q >= 1.0) || (q - q.round()).abs() > 1e-9 * q {
                return Err(Error::Config(format!(
                    "extent {e} m along axis {a} is not a multiple of the cube width {width} m"
                )));
            }
        }
        Ok(())
    }

    /// Number of level-0 cubes per axis.
    pub fn root_cubes(&self) -> [i64; 3] {
        let width = self.cells_per_cube as f64 * self.coarse_spacing;
        self.extent.map(|e| (e / width).round() as i64)
    }

    /// Number of cells per axis over the whole domain at level `l`.
    pub fn cells_at(&self, l: u32) -> [i64; 3] {
        self.root_cubes()
            .map(|c| (c * self.cells_per_cube as i64) << l)
    }

    pub fn spacing(&self, l: u32) -> f64 {
        self.coarse_spacing / (1u64 << l) as f64
    }

    pub fn block(&self) -> Block {
        Block::new(self.cells_per_cube)
    }
}

/// Grid spacing at level `l`: `H · 2^-l`.
pub fn level_spacing(l: u32, max_level: u32, coarse_spacing: f64) -> Result<f64> {
    if l > max_level {
        return Err(Error::Domain(format!("level {l} exceeds max level {max_level}")));
    }
    if !(coarse_spacing > 0.0) {
        return Err(Error::Domain("coarse spacing must be positive".into()));
    }
    Ok(coarse_spacing / (1u64 << l) as f64)
}

/// Time step at level `l`: `dt · 2^-l`.
pub fn level_timestep(l: u32, max_level: u32, dt: f64) -> Result<f64> {
    if l > max_level {
        return Err(Error::Domain(format!("level {l} exceeds max level {max_level}")));
    }
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("time step must be positive, got {dt}")));
    }
    Ok(dt / (1u64 << l) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CubeStatus {
    Fluid,
    Removed,
}

/// Neighbour relation across one of the 26 face/edge/corner directions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NeighborLink {
    Same(usize),
    Coarser(usize),
    Finer(Vec<usize>),
    Removed,
    /// Beyond the ground or the lid.
    Outside,
}

#[derive(Debug, Clone)]
pub struct Cube {
    pub id: usize,
    pub level: u32,
    pub coords: [i64; 3],
    /// Global cell index of the interior origin at this cube's level.
    pub origin: [i64; 3],
    pub spacing: f64,
    pub status: CubeStatus,
    /// Indexed by [`direction_index`].
    pub neighbors: Vec<NeighborLink>,
}

impl Cube {
    pub fn is_fluid(&self) -> bool {
        self.status == CubeStatus::Fluid
    }

    pub fn neighbor(&self, d: [i64; 3]) -> &NeighborLink {
        &self.neighbors[direction_index(d)]
    }
}

/// All 26 non-zero offsets in {-1,0,1}³, in a fixed order.
pub fn directions() -> Vec<[i64; 3]> {
    let mut out = Vec::with_capacity(26);
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if (dx, dy, dz) != (0, 0, 0) {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

pub fn direction_index(d: [i64; 3]) -> usize {
    let raw = ((d[2] + 1) * 9 + (d[1] + 1) * 3 + (d[0] + 1)) as usize;
    if raw > 13 {
        raw - 1
    } else {
        raw
    }
}

/// The six faces as (axis, side) with side 0 = low, 1 = high.
pub const FACES: [(usize, usize); 6] = [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)];

pub fn face_index(axis: usize, side: usize) -> usize {
    2 * axis + side
}

fn face_dir(axis: usize, side: usize) -> [i64; 3] {
    let mut d = [0; 3];
    d[axis] = if side == 0 { -1 } else { 1 };
    d
}

/// Tangential axes of a face normal to `axis`, in increasing order.
pub fn tangential(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// How a face of a cube relates to the cubes across it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaceLink {
    Same(usize),
    Coarser(usize),
    /// Four finer cubes indexed by quadrant `qa + 2 qb` along the tangential axes.
    Finer([usize; 4]),
    None,
}

/// Corner heights on the finest lattice, periodic in x and y.
#[derive(Debug, Clone)]
pub struct HeightGrid {
    pub nx: i64,
    pub ny: i64,
    pub spacing: f64,
    h: Vec<f64>,
}

impl HeightGrid {
    pub fn new(terrain: &TerrainField, nx: i64, ny: i64, spacing: f64) -> Self {
        let mut h = Vec::with_capacity((nx * ny) as usize);
        for j in 0..ny {
            for i in 0..nx {
                h.push(terrain.corner_height(i, j, spacing));
            }
        }
        Self { nx, ny, spacing, h }
    }

    pub fn at(&self, i: i64, j: i64) -> f64 {
        self.h[(j.rem_euclid(self.ny) * self.nx + i.rem_euclid(self.nx)) as usize]
    }

    /// Min and max of the four corner heights of the column spanning
    /// `[i, i+s] x [j, j+s]` in finest units.
    fn column_range(&self, i: i64, j: i64, s: i64) -> (f64, f64) {
        let hs = [
            self.at(i, j),
            self.at(i + s, j),
            self.at(i, j + s),
            self.at(i + s, j + s),
        ];
        (
            hs.iter().cloned().fold(f64::INFINITY, f64::min),
            hs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        )
    }

    pub fn max(&self) -> f64 {
        self.h.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

type LeafKey = (u32, [i64; 3]);

/// Static block-structured mesh.
#[derive(Debug, Clone)]
pub struct CubeTree {
    pub spec: DomainSpec,
    /// All leaves, fluid and removed, ordered by (level, z, y, x).
    pub cubes: Vec<Cube>,
    pub leaf_map: HashMap<LeafKey, usize>,
    /// Fluid cubes per level.
    pub levels: Vec<Vec<usize>>,
    pub heights: HeightGrid,
}

/// Pad (in own-level cells) around a cube within which terrain forces refinement.
const REFINE_PAD_CELLS: f64 = 2.0;
/// Lateral footprint expansion in finest cells for the refinement test.
const REFINE_FOOTPRINT_PAD: i64 = 2;
/// Cells from a fine-coarse face within which a cut cell forces readjustment.
const READJUST_DEPTH: i64 = 3;

struct TreeBuilder<'a> {
    spec: &'a DomainSpec,
    heights: &'a HeightGrid,
    leaves: HashMap<LeafKey, CubeStatus>,
    lmax: u32,
    n: i64,
    force: Option<RefineRegion>,
}

impl<'a> TreeBuilder<'a> {
    fn scale(&self, l: u32) -> i64 {
        1 << (self.lmax - l)
    }

    fn cubes_at(&self, l: u32) -> [i64; 3] {
        self.spec.root_cubes().map(|c| c << l)
    }

    fn cube_z(&self, l: u32, cz: i64) -> (f64, f64) {
        let w = self.n as f64 * self.spec.spacing(l);
        (cz as f64 * w, (cz + 1) as f64 * w)
    }

    /// Footprint of a cube in finest corner units `[x0, x1) x [y0, y1)` (columns).
    fn footprint(&self, l: u32, c: [i64; 3]) -> (i64, i64, i64, i64) {
        let w = self.n * self.scale(l);
        (c[0] * w, (c[0] + 1) * w, c[1] * w, (c[1] + 1) * w)
    }

    fn is_removed(&self, l: u32, c: [i64; 3]) -> bool {
        let s = self.scale(l);
        let (x0, x1, y0, y1) = self.footprint(l, c);
        let (_, ztop) = self.cube_z(l, c[2]);
        let mut j = y0;
        while j <= y1 {
            let mut i = x0;
            while i <= x1 {
                if self.heights.at(i, j) < ztop {
                    return false;
                }
                i += s;
            }
            j += s;
        }
        true
    }

    fn wants_refine(&self, l: u32, c: [i64; 3]) -> bool {
        if let Some(r) = self.force {
            let w = self.n as f64 * self.spec.spacing(l);
            if (0..3).all(|a| (c[a] as f64) * w < r.hi[a] && (c[a] + 1) as f64 * w > r.lo[a]) {
                return true;
            }
        }
        let (x0, x1, y0, y1) = self.footprint(l, c);
        let (z0, z1) = self.cube_z(l, c[2]);
        let pad = REFINE_PAD_CELLS * self.spec.spacing(l);
        let p = REFINE_FOOTPRINT_PAD;
        for j in y0 - p..y1 + p {
            for i in x0 - p..x1 + p {
                let (hmin, hmax) = self.heights.column_range(i, j, 1);
                if hmax > 0.0 && hmax >= z0 - pad && hmin <= z1 + pad {
                    return true;
                }
            }
        }
        false
    }

    /// True if the cube contains a cut cell at its own resolution within the
    /// given index range (own-level cell units, relative to the cube origin).
    fn has_cut_cells(&self, l: u32, c: [i64; 3], lo: [i64; 3], hi: [i64; 3]) -> bool {
        let s = self.scale(l);
        let d = self.spec.spacing(l);
        let org = c.map(|v| v * self.n);
        for j in lo[1]..hi[1] {
            for i in lo[0]..hi[0] {
                let (hmin, hmax) = self
                    .heights
                    .column_range((org[0] + i) * s, (org[1] + j) * s, s);
                let z0 = (org[2] + lo[2]) as f64 * d;
                let z1 = (org[2] + hi[2]) as f64 * d;
                if hmax > z0 && hmin < z1 {
                    return true;
                }
            }
        }
        false
    }

    fn split(&mut self, l: u32, c: [i64; 3]) {
        self.leaves.remove(&(l, c));
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let cc = [2 * c[0] + dx, 2 * c[1] + dy, 2 * c[2] + dz];
                    let st = if self.is_removed(l + 1, cc) {
                        CubeStatus::Removed
                    } else {
                        CubeStatus::Fluid
                    };
                    self.leaves.insert((l + 1, cc), st);
                }
            }
        }
    }

    fn wrap(&self, l: u32, c: [i64; 3]) -> Option<[i64; 3]> {
        let nc = self.cubes_at(l);
        if c[2] < 0 || c[2] >= nc[2] {
            return None;
        }
        Some([c[0].rem_euclid(nc[0]), c[1].rem_euclid(nc[1]), c[2]])
    }

    /// Leaf at level <= `l` covering the level-`l` cube coordinates `c`.
    fn covering(&self, l: u32, c: [i64; 3]) -> Option<(u32, [i64; 3], CubeStatus)> {
        for lp in (0..=l).rev() {
            let cc = c.map(|v| v >> (l - lp));
            if let Some(&st) = self.leaves.get(&(lp, cc)) {
                return Some((lp, cc, st));
            }
        }
        None
    }

    fn sorted_leaves(&self) -> Vec<(LeafKey, CubeStatus)> {
        let mut v: Vec<_> = self.leaves.iter().map(|(&k, &s)| (k, s)).collect();
        v.sort_by_key(|&((l, c), _)| (l, c[2], c[1], c[0]));
        v
    }

    /// Refine coarse leaves until every neighbour pair differs by at most one level.
    fn balance(&mut self) -> usize {
        let mut total = 0;
        loop {
            let mut marks = BTreeSet::new();
            for ((l, c), st) in self.sorted_leaves() {
                if st == CubeStatus::Removed || l < 2 {
                    continue;
                }
                for d in directions() {
                    let Some(nc) = self.wrap(l, [c[0] + d[0], c[1] + d[1], c[2] + d[2]]) else {
                        continue;
                    };
                    if let Some((lp, cc, nst)) = self.covering(l, nc) {
                        if nst == CubeStatus::Fluid && lp + 1 < l {
                            marks.insert((lp, cc));
                        }
                    }
                }
            }
            if marks.is_empty() {
                return total;
            }
            total += marks.len();
            for (l, c) in marks {
                self.split(l, c);
            }
        }
    }

    /// Coarse leaves that would contain cut cells or merge hosts.
    fn readjust_marks(&self) -> BTreeSet<LeafKey> {
        let n = self.n;
        let mut marks = BTreeSet::new();
        for ((l, c), st) in self.sorted_leaves() {
            if st == CubeStatus::Removed {
                continue;
            }
            if l < self.lmax {
                if self.has_cut_cells(l, c, [0; 3], [n; 3]) {
                    marks.insert((l, c));
                }
                continue;
            }
            for d in directions() {
                let Some(nc) = self.wrap(l, [c[0] + d[0], c[1] + d[1], c[2] + d[2]]) else {
                    continue;
                };
                let Some((lp, cc, nst)) = self.covering(l, nc) else {
                    continue;
                };
                if nst == CubeStatus::Removed || lp == l {
                    continue;
                }
                let mut lo = [0; 3];
                let mut hi = [n; 3];
                for a in 0..3 {
                    if d[a] < 0 {
                        hi[a] = READJUST_DEPTH;
                    } else if d[a] > 0 {
                        lo[a] = n - READJUST_DEPTH;
                    }
                }
                if self.has_cut_cells(l, c, lo, hi) {
                    marks.insert((lp, cc));
                }
            }
        }
        marks
    }
}

impl CubeTree {
    pub fn spacing(&self, l: u32) -> f64 {
        self.spec.spacing(l)
    }

    pub fn max_level(&self) -> u32 {
        self.spec.max_level
    }

    pub fn block(&self) -> Block {
        self.spec.block()
    }

    pub fn fluid_cubes(&self) -> impl Iterator<Item = &Cube> {
        self.cubes.iter().filter(|c| c.is_fluid())
    }

    pub fn count_per_level(&self) -> Vec<usize> {
        (0..=self.spec.max_level)
            .map(|l| self.levels[l as usize].len())
            .collect()
    }

    fn wrap(&self, l: u32, c: [i64; 3]) -> Option<[i64; 3]> {
        let nc = self.spec.root_cubes().map(|v| v << l);
        if c[2] < 0 || c[2] >= nc[2] {
            return None;
        }
        Some([c[0].rem_euclid(nc[0]), c[1].rem_euclid(nc[1]), c[2]])
    }

    /// Leaf covering level-`l` cube coordinates `c` at level `l` or coarser.
    pub fn covering(&self, l: u32, c: [i64; 3]) -> Option<usize> {
        let c = self.wrap(l, c)?;
        for lp in (0..=l).rev() {
            let cc = c.map(|v| v >> (l - lp));
            if let Some(&id) = self.leaf_map.get(&(lp, cc)) {
                return Some(id);
            }
        }
        None
    }

    /// Leaf containing the level-`l` cell `p` (any level), wrapping laterally.
    pub fn cell_owner(&self, l: u32, p: [i64; 3]) -> Option<usize> {
        let n = self.spec.cells_per_cube as i64;
        let cells = self.spec.cells_at(l);
        if p[2] < 0 || p[2] >= cells[2] {
            return None;
        }
        let p = [p[0].rem_euclid(cells[0]), p[1].rem_euclid(cells[1]), p[2]];
        for lp in 0..=self.spec.max_level {
            let q = if lp <= l {
                p.map(|v| v >> (l - lp))
            } else {
                p.map(|v| v << (lp - l))
            };
            if let Some(&id) = self.leaf_map.get(&(lp, q.map(|v| v.div_euclid(n)))) {
                return Some(id);
            }
        }
        None
    }

    /// Relation of each face of `cube` to its neighbours.
    pub fn face_link(&self, cube: usize, axis: usize, side: usize) -> FaceLink {
        let c = &self.cubes[cube];
        match c.neighbor(face_dir(axis, side)) {
            NeighborLink::Same(id) => FaceLink::Same(*id),
            NeighborLink::Coarser(id) => FaceLink::Coarser(*id),
            NeighborLink::Finer(_) => {
                let l = c.level + 1;
                let (ta, tb) = tangential(axis);
                let mut ids = [usize::MAX; 4];
                for q in 0..4 {
                    let mut cc = c.coords.map(|v| 2 * v);
                    cc[axis] = if side == 0 { cc[axis] - 1 } else { cc[axis] + 2 };
                    cc[ta] += (q & 1) as i64;
                    cc[tb] += (q >> 1) as i64;
                    match self.wrap(l, cc).and_then(|w| self.leaf_map.get(&(l, w))) {
                        Some(&id) if self.cubes[id].is_fluid() => ids[q] = id,
                        _ => return FaceLink::None,
                    }
                }
                FaceLink::Finer(ids)
            }
            _ => FaceLink::None,
        }
    }

    /// Integration box of a cube: the interior extended by the integrated
    /// ghost depth toward every coarser neighbour.
    pub fn compute_box(&self, cube: usize) -> IndexBox {
        let c = &self.cubes[cube];
        let n = self.spec.cells_per_cube as i64;
        let mut b = IndexBox { lo: [0; 3], hi: [n; 3] };
        for d in directions() {
            if let NeighborLink::Coarser(_) = c.neighbor(d) {
                for a in 0..3 {
                    if d[a] < 0 {
                        b.lo[a] = -INTEGRATED_DEPTH;
                    } else if d[a] > 0 {
                        b.hi[a] = n + INTEGRATED_DEPTH;
                    }
                }
            }
        }
        b
    }
}

/// Axis-aligned region (metres) refined to the finest level regardless of terrain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineRegion {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

/// Build the static cube tree for a domain and terrain.
pub fn build_cube_tree(spec: &DomainSpec, terrain: &TerrainField) -> Result<CubeTree> {
    build_cube_tree_with(spec, terrain, None)
}

/// As [`build_cube_tree`], additionally refining every cube that overlaps `force`.
pub fn build_cube_tree_with(
    spec: &DomainSpec,
    terrain: &TerrainField,
    force: Option<RefineRegion>,
) -> Result<CubeTree> {
    spec.validate()?;
    let lmax = spec.max_level;
    let fine = spec.cells_at(lmax);
    let df = spec.spacing(lmax);
    let heights = HeightGrid::new(terrain, fine[0], fine[1], df);
    let hmax = heights.max();
    if hmax >= spec.extent[2] {
        return Err(Error::Config(format!(
            "terrain height {hmax} m reaches the domain top {} m",
            spec.extent[2]
        )));
    }
    if heights.h.iter().any(|&h| h < 0.0 || !h.is_finite()) {
        return Err(Error::Config("terrain heights must be finite and non-negative".into()));
    }
    let mut b = TreeBuilder {
        spec,
        heights: &heights,
        leaves: HashMap::new(),
        lmax,
        n: spec.cells_per_cube as i64,
        force,
    };
    let root = spec.root_cubes();
    for cz in 0..root[2] {
        for cy in 0..root[1] {
            for cx in 0..root[0] {
                let c = [cx, cy, cz];
                let st = if b.is_removed(0, c) {
                    CubeStatus::Removed
                } else {
                    CubeStatus::Fluid
                };
                b.leaves.insert((0, c), st);
            }
        }
    }
    for l in 0..lmax {
        let targets: Vec<_> = b
            .sorted_leaves()
            .into_iter()
            .filter(|&((ll, c), st)| ll == l && st == CubeStatus::Fluid && b.wants_refine(l, c))
            .map(|(k, _)| k)
            .collect();
        for (ll, c) in targets {
            b.split(ll, c);
        }
    }
    b.balance();
    let mut rounds = 0;
    loop {
        let marks = b.readjust_marks();
        if marks.is_empty() {
            break;
        }
        rounds += 1;
        if rounds > 8 * (lmax as usize + 1) {
            return Err(Error::Config(
                "cut cells cannot be confined to the finest level".into(),
            ));
        }
        log::debug!("readjusting {} cubes", marks.len());
        for (l, c) in marks {
            if l >= lmax {
                return Err(Error::Config(
                    "cut cells cannot be confined to the finest level".into(),
                ));
            }
            b.split(l, c);
        }
        b.balance();
    }

    let sorted = b.sorted_leaves();
    let mut leaf_map = HashMap::with_capacity(sorted.len());
    let mut cubes = Vec::with_capacity(sorted.len());
    for (id, &((l, c), st)) in sorted.iter().enumerate() {
        leaf_map.insert((l, c), id);
        cubes.push(Cube {
            id,
            level: l,
            coords: c,
            origin: c.map(|v| v * spec.cells_per_cube as i64),
            spacing: spec.spacing(l),
            status: st,
            neighbors: Vec::new(),
        });
    }
    drop(b);
    let mut tree = CubeTree {
        spec: spec.clone(),
        cubes,
        leaf_map,
        levels: vec![Vec::new(); lmax as usize + 1],
        heights,
    };
    let links: Vec<Vec<NeighborLink>> = tree
        .cubes
        .iter()
        .map(|c| directions().into_iter().map(|d| tree.link(c, d)).collect())
        .collect();
    for (c, l) in tree.cubes.iter_mut().zip(links) {
        c.neighbors = l;
    }
    for c in &tree.cubes {
        if c.is_fluid() {
            tree.levels[c.level as usize].push(c.id);
        }
    }
    for c in tree.fluid_cubes() {
        for n in &c.neighbors {
            let other = match n {
                NeighborLink::Same(id) | NeighborLink::Coarser(id) => vec![*id],
                NeighborLink::Finer(ids) => ids.clone(),
                _ => vec![],
            };
            for o in other {
                if tree.cubes[o].level.abs_diff(c.level) > 1 {
                    return Err(Error::Config("2:1 balance could not be established".into()));
                }
            }
        }
    }
    Ok(tree)
}

impl CubeTree {
    fn link(&self, c: &Cube, d: [i64; 3]) -> NeighborLink {
        let l = c.level;
        let nc = [c.coords[0] + d[0], c.coords[1] + d[1], c.coords[2] + d[2]];
        let Some(w) = self.wrap(l, nc) else {
            return NeighborLink::Outside;
        };
        if let Some(id) = self.covering(l, w) {
            let o = &self.cubes[id];
            if !o.is_fluid() {
                return NeighborLink::Removed;
            }
            return if o.level == l {
                NeighborLink::Same(id)
            } else {
                NeighborLink::Coarser(id)
            };
        }
        // finer: collect the level l+1 leaves touching this cube
        let mut ids = BTreeSet::new();
        let lf = l + 1;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let off = [dx, dy, dz];
                    let mut cc = [0; 3];
                    let mut touching = true;
                    for a in 0..3 {
                        cc[a] = 2 * w[a] + off[a];
                        if d[a] == 1 && off[a] == 1 || d[a] == -1 && off[a] == 0 {
                            touching = false;
                        }
                    }
                    if !touching {
                        continue;
                    }
                    if let Some(&id) = self.leaf_map.get(&(lf, cc)) {
                        if self.cubes[id].is_fluid() {
                            ids.insert(id);
                        }
                    } else if let Some(id) = self.cell_owner_cube(lf, cc) {
                        ids.insert(id);
                    }
                }
            }
        }
        if ids.is_empty() {
            NeighborLink::Removed
        } else {
            NeighborLink::Finer(ids.into_iter().collect())
        }
    }

    /// Any fluid leaf inside the level-`l` cube region `c` (used for deep refinement).
    fn cell_owner_cube(&self, l: u32, c: [i64; 3]) -> Option<usize> {
        self.cubes
            .iter()
            .find(|o| {
                o.is_fluid()
                    && o.level > l
                    && (0..3).all(|a| o.coords[a] >> (o.level - l) == c[a])
            })
            .map(|o| o.id)
    }
}

/// Depth-2 ghost cells that are integrated during subcycling, for every
/// direction with a neighbouring cube (faces, edges and corners unioned).
pub fn ghost_integration_set(tree: &CubeTree, cube: usize) -> BTreeSet<[i64; 3]> {
    let c = &tree.cubes[cube];
    let n = tree.spec.cells_per_cube as i64;
    let mut set = BTreeSet::new();
    for d in directions() {
        if matches!(c.neighbor(d), NeighborLink::Outside | NeighborLink::Removed) {
            continue;
        }
        let range = |a: usize| match d[a] {
            -1 => -INTEGRATED_DEPTH..0,
            0 => 0..n,
            _ => n..n + INTEGRATED_DEPTH,
        };
        for k in range(2) {
            for j in range(1) {
                for i in range(0) {
                    set.insert([i, j, k]);
                }
            }
        }
    }
    set
}

/// Owner of a ghost value relative to the receiving cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Same,
    Finer,
    Coarser,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Source {
    pub cube: u32,
    pub idx: u32,
    pub w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GhostEntry {
    pub dst: u32,
    pub owner_level: u32,
    pub rel: Relation,
    pub start: u32,
    pub len: u32,
}

/// Ghost fill recipe for one cube.
#[derive(Debug, Clone, Default)]
pub struct CubeExchange {
    pub cells: Vec<GhostEntry>,
    pub corners: Vec<GhostEntry>,
    pub sources: Vec<Source>,
}

impl CubeExchange {
    pub fn sources_of(&self, e: &GhostEntry) -> &[Source] {
        &self.sources[e.start as usize..(e.start + e.len) as usize]
    }
}

/// Precomputed ghost exchange for all cubes (empty for removed cubes).
#[derive(Debug, Clone)]
pub struct ExchangePlan {
    pub cubes: Vec<CubeExchange>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointKind {
    Cell,
    Corner,
}

impl CubeTree {
    fn local(&self, id: usize, l: u32, p: [i64; 3]) -> u32 {
        let c = &self.cubes[id];
        debug_assert_eq!(c.level, l);
        let b = self.block();
        b.idx(p[0] - c.origin[0], p[1] - c.origin[1], p[2] - c.origin[2]) as u32
    }

    fn wrap_point(&self, l: u32, p: [i64; 3]) -> [i64; 3] {
        let cells = self.spec.cells_at(l);
        [p[0].rem_euclid(cells[0]), p[1].rem_euclid(cells[1]), p[2]]
    }

    /// Sources for the level-`l` cell `p`: copy, injection, or recursive average.
    fn sample_cell(&self, l: u32, p: [i64; 3], w: f64, out: &mut Vec<Source>) -> Option<(u32, Relation)> {
        let p = self.wrap_point(l, p);
        let id = self.cell_owner(l, p)?;
        let o = &self.cubes[id];
        if !o.is_fluid() {
            return None;
        }
        match o.level.cmp(&l) {
            std::cmp::Ordering::Equal => {
                out.push(Source { cube: id as u32, idx: self.local(id, l, p), w });
                Some((l, Relation::Same))
            }
            std::cmp::Ordering::Less => {
                let q = p.map(|v| v >> (l - o.level));
                out.push(Source { cube: id as u32, idx: self.local(id, o.level, q), w });
                Some((o.level, Relation::Coarser))
            }
            std::cmp::Ordering::Greater => {
                let mut lvl = o.level;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let q = [2 * p[0] + dx, 2 * p[1] + dy, 2 * p[2] + dz];
                            let (ol, _) = self.sample_cell(l + 1, q, w / 8.0, out)?;
                            lvl = lvl.max(ol);
                        }
                    }
                }
                Some((lvl, Relation::Finer))
            }
        }
    }

    /// Leaf owning the level-`l` corner `p` (a corner on a cube boundary
    /// belongs to the upper cube).
    fn corner_owner(&self, l: u32, p: [i64; 3]) -> Option<usize> {
        let n = self.spec.cells_per_cube as i64;
        let cells = self.spec.cells_at(l);
        if p[2] < 0 || p[2] >= cells[2] {
            return None;
        }
        for lp in 0..=self.spec.max_level {
            let q = if lp <= l {
                p.map(|v| v.div_euclid(1 << (l - lp)))
            } else {
                p.map(|v| v << (lp - l))
            };
            if let Some(&id) = self.leaf_map.get(&(lp, q.map(|v| v.div_euclid(n)))) {
                return Some(id);
            }
        }
        None
    }

    fn sample_corner(&self, l: u32, p: [i64; 3], w: f64, out: &mut Vec<Source>) -> Option<(u32, Relation)> {
        let cells = self.spec.cells_at(l);
        // the lid has no owner; interpolation borrows the row below it
        let p = if p[2] == cells[2] { [p[0], p[1], p[2] - 1] } else { p };
        let p = self.wrap_point(l, p);
        let id = self.corner_owner(l, p)?;
        let o = &self.cubes[id];
        if !o.is_fluid() {
            return None;
        }
        if o.level >= l {
            let q = p.map(|v| v << (o.level - l));
            out.push(Source { cube: id as u32, idx: self.local(id, o.level, q), w });
            let rel = if o.level == l { Relation::Same } else { Relation::Finer };
            return Some((o.level, rel));
        }
        let f = 1i64 << (l - o.level);
        let lo = p.map(|v| v.div_euclid(f));
        let t = [0, 1, 2].map(|a| (p[a] - lo[a] * f) as f64 / f as f64);
        if t == [0.0; 3] {
            out.push(Source { cube: id as u32, idx: self.local(id, o.level, lo), w });
            return Some((o.level, Relation::Coarser));
        }
        for b in 0..8usize {
            let off = [b & 1, (b >> 1) & 1, (b >> 2) & 1];
            let mut wt = w;
            let mut q = lo;
            for a in 0..3 {
                if off[a] == 1 {
                    if t[a] == 0.0 {
                        wt = 0.0;
                    }
                    wt *= t[a];
                    q[a] += 1;
                } else {
                    wt *= 1.0 - t[a];
                }
            }
            if wt == 0.0 {
                continue;
            }
            self.sample_corner(o.level, q, wt, out)?;
        }
        Some((o.level, Relation::Coarser))
    }

    /// Precompute ghost sources for every fluid cube.
    pub fn exchange_plan(&self) -> ExchangePlan {
        let b = self.block();
        let cubes = self
            .cubes
            .iter()
            .map(|c| {
                let mut ex = CubeExchange::default();
                if !c.is_fluid() {
                    return ex;
                }
                let l = c.level;
                let nz = self.spec.cells_at(l)[2];
                let frame = IndexBox { lo: [b.lo(); 3], hi: [b.hi(); 3] };
                for p in frame.iter() {
                    if b.is_interior(p) {
                        continue;
                    }
                    let gp = [p[0] + c.origin[0], p[1] + c.origin[1], p[2] + c.origin[2]];
                    let dst = b.idx(p[0], p[1], p[2]) as u32;
                    if gp[2] >= 0 && gp[2] < nz {
                        let start = ex.sources.len();
                        match self.sample_cell(l, gp, 1.0, &mut ex.sources) {
                            Some((ol, rel)) => ex.cells.push(GhostEntry {
                                dst,
                                owner_level: ol,
                                rel,
                                start: start as u32,
                                len: (ex.sources.len() - start) as u32,
                            }),
                            None => ex.sources.truncate(start),
                        }
                    }
                    if gp[2] >= 0 && gp[2] < nz {
                        let start = ex.sources.len();
                        match self.sample_corner(l, gp, 1.0, &mut ex.sources) {
                            Some((ol, rel)) => ex.corners.push(GhostEntry {
                                dst,
                                owner_level: ol,
                                rel,
                                start: start as u32,
                                len: (ex.sources.len() - start) as u32,
                            }),
                            None => ex.sources.truncate(start),
                        }
                    }
                }
                ex
            })
            .collect();
        ExchangePlan { cubes }
    }
}

/// Fill ghosts of one field for all cubes whose entries pass `filter`.
/// `fields[id]` is empty for removed cubes. Values are gathered from the
/// current interiors before any ghost is written.
pub fn exchange_ghosts(
    plan: &ExchangePlan,
    fields: &mut [Vec<f64>],
    kind: PointKind,
    filter: impl Fn(usize, &GhostEntry) -> bool + Sync,
) {
    use rayon::prelude::*;
    let gathered: Vec<Vec<(u32, f64)>> = {
        let fields = &*fields;
        plan.cubes
            .par_iter()
            .enumerate()
            .map(|(id, ex)| {
                let entries = match kind {
                    PointKind::Cell => &ex.cells,
                    PointKind::Corner => &ex.corners,
                };
                entries
                    .iter()
                    .filter(|e| filter(id, e))
                    .map(|e| {
                        let v = ex
                            .sources_of(e)
                            .iter()
                            .map(|s| s.w * fields[s.cube as usize][s.idx as usize])
                            .sum::<f64>();
                        (e.dst, v)
                    })
                    .collect()
            })
            .collect()
    };
    fields
        .par_iter_mut()
        .zip(gathered)
        .for_each(|(f, vals)| {
            for (d, v) in vals {
                f[d as usize] = v;
            }
        });
}

/// Plain-text mesh summary.
pub fn mesh_report(tree: &CubeTree) -> String {
    let mut s = String::new();
    let n = tree.spec.cells_per_cube;
    let cells = n * n * n;
    let _ = writeln!(s, "levels {}", tree.spec.max_level + 1);
    let mut total = 0;
    for (l, ids) in tree.levels.iter().enumerate() {
        total += ids.len();
        let _ = writeln!(
            s,
            "level {l} spacing {} m cubes {} cells {}",
            tree.spacing(l as u32),
            ids.len(),
            ids.len() * cells
        );
    }
    let removed = tree.cubes.len() - total;
    let _ = writeln!(s, "cubes {total} removed {removed} cells {}", total * cells);
    s
}

/// Cube bounding boxes as CSV.
pub fn mesh_wireframe_csv(tree: &CubeTree) -> String {
    let mut s = String::from("id,level,status,x0,y0,z0,x1,y1,z1\n");
    let n = tree.spec.cells_per_cube as f64;
    for c in &tree.cubes {
        let w = n * c.spacing;
        let lo = c.coords.map(|v| v as f64 * w);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            c.id,
            c.level,
            if c.is_fluid() { "fluid" } else { "removed" },
            lo[0],
            lo[1],
            lo[2],
            lo[0] + w,
            lo[1] + w,
            lo[2] + w
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terrain::TerrainShape;

    fn spec(ext: [f64; 3], h: f64, n: usize, lmax: u32) -> DomainSpec {
        DomainSpec { extent: ext, coarse_spacing: h, cells_per_cube: n, max_level: lmax }
    }

    #[test]
    fn spacing_and_timestep_laws() {
        assert_eq!(level_spacing(6, 6, 1000.0).unwrap(), 15.625);
        assert_eq!(level_spacing(0, 2, 400.0).unwrap(), 400.0);
        assert_eq!(level_spacing(2, 2, 400.0).unwrap(), 100.0);
        assert!(level_spacing(3, 2, 400.0).is_err());
        assert_eq!(level_timestep(0, 2, 1.0).unwrap(), 1.0);
        assert_eq!(level_timestep(1, 2, 1.0).unwrap(), 0.5);
        assert_eq!(level_timestep(2, 2, 0.8).unwrap(), 0.2);
        assert!(level_timestep(0, 2, 0.0).is_err());
        assert!(level_timestep(0, 2, -1.0).is_err());
    }

    #[test]
    fn block_indexing_round_trip() {
        let b = Block::new(8);
        for p in [[-4, -4, -4], [0, 0, 0], [7, 3, 11], [11, 11, 11]] {
            assert_eq!(b.coords(b.idx(p[0], p[1], p[2])), p);
        }
        assert_eq!(b.len(), 16 * 16 * 16);
    }

    #[test]
    fn spec_validation() {
        assert!(spec([16000.0, 8000.0, 8000.0], 400.0, 20, 0).validate().is_ok());
        assert!(spec([16000.0, 8000.0, 8000.0], 400.0, 6, 0).validate().is_err());
        assert!(spec([16000.0, 8000.0, 8000.0], 400.0, 21, 0).validate().is_err());
        assert!(spec([15000.0, 8000.0, 8000.0], 400.0, 20, 0).validate().is_err());
    }

    #[test]
    fn flat_terrain_is_single_level() {
        let s = spec([16000.0, 16000.0, 8000.0], 400.0, 20, 2);
        let t = TerrainField::flat(16000.0, 16000.0);
        let tree = build_cube_tree(&s, &t).unwrap();
        assert_eq!(tree.count_per_level(), vec![4, 0, 0]);
        assert!(tree.cubes.iter().all(|c| c.is_fluid()));
    }

    #[test]
    fn terrain_above_top_is_rejected() {
        let s = spec([8000.0, 8000.0, 8000.0], 400.0, 20, 0);
        let t = TerrainField::new(
            TerrainShape::Bell { hm: 9000.0, a: 1000.0, xc: 4000.0, yc: 4000.0 },
            8000.0,
            8000.0,
        );
        assert!(build_cube_tree(&s, &t).unwrap_err().is_config());
    }

    #[test]
    fn integration_set_sizes() {
        let s = spec([24000.0, 24000.0, 24000.0], 400.0, 20, 0);
        let tree = build_cube_tree(&s, &TerrainField::flat(24000.0, 24000.0)).unwrap();
        // middle cube in z: all 26 neighbours present
        let mid = tree.cubes.iter().find(|c| c.coords == [1, 1, 1]).unwrap().id;
        let set = ghost_integration_set(&tree, mid);
        assert_eq!(set.len(), 24 * 24 * 24 - 20 * 20 * 20);
        let face = set.iter().filter(|p| p[0] < 0 && (0..20).contains(&p[1]) && (0..20).contains(&p[2]));
        assert_eq!(face.count(), 2 * 20 * 20);
        // the bottom cube has no neighbours below
        let bottom = tree.cubes.iter().find(|c| c.coords == [1, 1, 0]).unwrap().id;
        assert!(ghost_integration_set(&tree, bottom).iter().all(|p| p[2] >= 0));
    }
}
