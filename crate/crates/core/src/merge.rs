//! Small-cell merging and velocity-point classification.
//!
//! Every cut cell that is small or whose centre lies below the terrain is
//! absorbed by a host: the first sufficiently large fluid cell reached by
//! walking in its column's merge direction. Hosts carry the prognostic values
//! of the whole group. Velocity points at corners are classified so that the
//! momentum equations are solved only where all eight surrounding pressure
//! points exist; the rest are diagnosed.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grid::{Block, IndexBox};
use crate::terrain::{CellClass, CubeGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MergeDir {
    Vertical,
    MinusX,
    PlusX,
    MinusY,
    PlusY,
}

impl MergeDir {
    pub const ALL: [MergeDir; 5] = [
        MergeDir::Vertical,
        MergeDir::MinusX,
        MergeDir::PlusX,
        MergeDir::MinusY,
        MergeDir::PlusY,
    ];

    pub fn offset(self) -> [i64; 3] {
        match self {
            MergeDir::Vertical => [0, 0, 1],
            MergeDir::MinusX => [-1, 0, 0],
            MergeDir::PlusX => [1, 0, 0],
            MergeDir::MinusY => [0, -1, 0],
            MergeDir::PlusY => [0, 1, 0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MergeDir::Vertical => "vertical",
            MergeDir::MinusX => "-x",
            MergeDir::PlusX => "+x",
            MergeDir::MinusY => "-y",
            MergeDir::PlusY => "+y",
        }
    }
}

/// Merge direction chosen from the column-centre slopes.
pub fn merge_direction(hx: f64, hy: f64) -> MergeDir {
    let (ax, ay) = (hx.abs(), hy.abs());
    if ax <= 1.0 && ay <= 1.0 {
        MergeDir::Vertical
    } else if hx > 1.0 && ax >= ay {
        MergeDir::MinusX
    } else if hx < -1.0 && ax >= ay {
        MergeDir::PlusX
    } else if hy > 1.0 && ax < ay {
        MergeDir::MinusY
    } else {
        MergeDir::PlusY
    }
}

/// True if a cell must be absorbed into a neighbour.
pub fn needs_merge(volume: f64, full: f64, z_center: f64, h_center: f64) -> bool {
    volume < 0.5 * full || z_center < h_center
}

/// Role of a scalar cell after merging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellRole {
    /// No fluid volume (underground or outside the domain).
    Dry,
    /// Carries its own prognostic values (possibly for a merged group).
    Active,
    /// Absorbed into a host.
    Absorbed,
    /// Small cell whose host lies beyond the ghost frame; values come from exchange.
    Unresolved,
}

/// Classification of a corner velocity point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VelClass {
    /// All eight surrounding cells active: momentum is integrated here.
    Regular,
    /// Above the surface but next to a merged or cut cell: interpolated.
    MergedFace,
    /// Lies on the terrain surface.
    Surface,
    /// Below the terrain: carries its line's surface velocity.
    Underground,
    /// Rigid lid at the domain top.
    Lid,
    /// Outside the vertical extent of the domain.
    Outside,
    /// Not enough frame around the point to classify it.
    Unknown,
}

impl VelClass {
    /// Points whose values can serve in difference stencils.
    pub fn is_wet(self) -> bool {
        matches!(self, VelClass::Regular | VelClass::MergedFace | VelClass::Surface | VelClass::Lid)
    }
}

/// Lower anchor of a merged-face interpolation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LowerAnchor {
    Corner(u32),
    Surface(u32),
}

/// Linear-in-z interpolation of a merged-face point between a regular point
/// above and a regular or surface point below.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceInterp {
    pub corner: u32,
    pub upper: u32,
    pub lower: LowerAnchor,
    /// Weight of the upper point.
    pub gamma: f64,
}

/// Merge bookkeeping for one cube.
#[derive(Debug, Clone)]
pub struct MergeMap {
    pub block: Block,
    pub dir: Vec<MergeDir>,
    pub role: Vec<CellRole>,
    /// Host of each cell (itself when active or unresolved).
    pub host: Vec<u32>,
    /// Combined volume for active hosts, own volume otherwise.
    pub group_volume: Vec<f64>,
    /// Absorbed members of every host that has any.
    pub members: HashMap<u32, Vec<u32>>,
    pub vel: Vec<VelClass>,
    pub interp: Vec<FaceInterp>,
    pub stats: MergeStats,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MergeStats {
    pub merged_cells: usize,
    pub per_direction: [usize; 5],
    pub min_group_fraction: f64,
    pub max_group_fraction: f64,
}

impl MergeMap {
    #[inline]
    pub fn host_of(&self, c: usize) -> usize {
        self.host[c] as usize
    }

    pub fn is_active(&self, c: usize) -> bool {
        self.role[c] == CellRole::Active
    }

    pub fn members_of(&self, host: usize) -> &[u32] {
        self.members.get(&(host as u32)).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Line index of the corner, used for surface lookups.
    pub fn line_of(&self, c: usize) -> usize {
        let p = self.block.coords(c);
        self.block.line(p[0], p[1])
    }
}

const MAX_CHAIN: i64 = 3;

/// Build the merge map of one cube. Every small cell inside `required` must
/// find a host; elsewhere in the frame unresolvable cells are left to exchange.
pub fn build_merge_map(
    geom: &CubeGeometry,
    nz_cells: i64,
    required: &IndexBox,
) -> Result<MergeMap> {
    let b = geom.block;
    let (lo, hi) = (b.lo(), b.hi());
    let full = geom.full_volume();
    let d = geom.spacing;
    let nt = b.nt();
    let len = b.len();

    let mut dir = vec![MergeDir::Vertical; nt * nt];
    for j in lo..hi {
        for i in lo..hi {
            let (hx, hy) = geom.column_gradients(i, j);
            dir[((j - lo) as usize) * nt + (i - lo) as usize] = merge_direction(hx, hy);
        }
    }
    let col = |i: i64, j: i64| ((j - lo) as usize) * nt + (i - lo) as usize;
    let small = |p: [i64; 3]| -> bool {
        let c = b.idx(p[0], p[1], p[2]);
        let zc = geom.z_lo(p[2]) + 0.5 * d;
        needs_merge(geom.vol[c], full, zc, geom.column_center_height(p[0], p[1]))
    };

    let mut role = vec![CellRole::Dry; len];
    let mut host: Vec<u32> = (0..len as u32).collect();
    let mut stats = MergeStats { min_group_fraction: f64::INFINITY, ..Default::default() };
    for k in lo..hi {
        for j in lo..hi {
            for i in lo..hi {
                let c = b.idx(i, j, k);
                if geom.class[c] == CellClass::Underground {
                    continue;
                }
                if !small([i, j, k]) {
                    role[c] = CellRole::Active;
                    continue;
                }
                let md = dir[col(i, j)];
                let off = md.offset();
                let mut p = [i, j, k];
                let mut found = None;
                let mut blocked = false;
                for _ in 0..MAX_CHAIN {
                    p = [p[0] + off[0], p[1] + off[1], p[2] + off[2]];
                    if !b.in_frame(p) {
                        break;
                    }
                    let q = b.idx(p[0], p[1], p[2]);
                    if geom.class[q] == CellClass::Underground || geom.vol[q] == 0.0 {
                        blocked = true;
                        break;
                    }
                    if !small(p) {
                        found = Some(q);
                        break;
                    }
                }
                let gk = geom.origin[2] + k;
                match found {
                    Some(q) if gk >= 0 && gk < nz_cells => {
                        role[c] = CellRole::Absorbed;
                        host[c] = q as u32;
                        stats.merged_cells += 1;
                        stats.per_direction[MergeDir::ALL.iter().position(|&m| m == md).unwrap()] += 1;
                    }
                    _ => {
                        if required.contains([i, j, k]) {
                            let what = if blocked { "an underground cell" } else { "no large cell" };
                            return Err(Error::UnsupportedTerrain(format!(
                                "small cell ({}, {}, {}) at level spacing {d} m meets {what} \
                                 within {MAX_CHAIN} steps in direction {}",
                                geom.origin[0] + i,
                                geom.origin[1] + j,
                                gk,
                                md.name()
                            )));
                        }
                        role[c] = CellRole::Unresolved;
                    }
                }
            }
        }
    }

    let mut group_volume = geom.vol.clone();
    let mut members: HashMap<u32, Vec<u32>> = HashMap::new();
    for c in 0..len {
        if role[c] == CellRole::Absorbed {
            let h = host[c];
            members.entry(h).or_default().push(c as u32);
        }
    }
    for (&h, ms) in members.iter() {
        let mut v = geom.vol[h as usize];
        for &m in ms {
            v += geom.vol[m as usize];
        }
        group_volume[h as usize] = v;
    }
    for k in 0..b.n as i64 {
        for j in 0..b.n as i64 {
            for i in 0..b.n as i64 {
                let c = b.idx(i, j, k);
                if role[c] == CellRole::Active && geom.class[c] != CellClass::Regular
                    || members.contains_key(&(c as u32))
                {
                    let f = group_volume[c] / full;
                    stats.min_group_fraction = stats.min_group_fraction.min(f);
                    stats.max_group_fraction = stats.max_group_fraction.max(f);
                }
            }
        }
    }
    if !stats.min_group_fraction.is_finite() {
        stats.min_group_fraction = 1.0;
        stats.max_group_fraction = 1.0;
    }

    let vel = classify_corners(geom, nz_cells, &role);
    let interp = face_interpolation(geom, &vel);
    Ok(MergeMap { block: b, dir, role, host, group_volume, members, vel, interp, stats })
}

/// Tolerance for a grid corner to count as lying on the surface.
pub fn surface_tolerance(spacing: f64) -> f64 {
    1e-9 * spacing
}

fn classify_corners(geom: &CubeGeometry, nz_cells: i64, role: &[CellRole]) -> Vec<VelClass> {
    let b = geom.block;
    let (lo, hi) = (b.lo(), b.hi());
    let tol = surface_tolerance(geom.spacing);
    let mut vel = vec![VelClass::Unknown; b.len()];
    for k in lo..hi {
        let gk = geom.origin[2] + k;
        let z = geom.z_lo(k);
        for j in lo..hi {
            for i in lo..hi {
                let c = b.idx(i, j, k);
                let h = geom.corner_h[b.line(i, j)];
                vel[c] = if gk < 0 || gk > nz_cells {
                    VelClass::Outside
                } else if gk == nz_cells {
                    VelClass::Lid
                } else if z < h - tol {
                    VelClass::Underground
                } else if (z - h).abs() <= tol {
                    VelClass::Surface
                } else if i == lo || j == lo || k == lo {
                    VelClass::Unknown
                } else {
                    let all = (0..8).all(|o| {
                        let q = b.idx(i - 1 + (o & 1), j - 1 + ((o >> 1) & 1), k - 1 + ((o >> 2) & 1));
                        role[q] == CellRole::Active
                    });
                    if all {
                        VelClass::Regular
                    } else {
                        VelClass::MergedFace
                    }
                };
            }
        }
    }
    vel
}

fn face_interpolation(geom: &CubeGeometry, vel: &[VelClass]) -> Vec<FaceInterp> {
    let b = geom.block;
    let (lo, hi) = (b.lo(), b.hi());
    let mut out = Vec::new();
    for k in lo..hi {
        for j in lo..hi {
            for i in lo..hi {
                let c = b.idx(i, j, k);
                if vel[c] != VelClass::MergedFace {
                    continue;
                }
                let z = geom.z_lo(k);
                let line = b.line(i, j);
                let h = geom.corner_h[line];
                let upper = (k + 1..hi).find_map(|kk| {
                    let q = b.idx(i, j, kk);
                    match vel[q] {
                        VelClass::Regular => Some(Some((q, geom.z_lo(kk)))),
                        VelClass::MergedFace => None,
                        _ => Some(None),
                    }
                });
                let Some(Some((up, zu))) = upper else { continue };
                let mut lower = None;
                for kk in (lo..k).rev() {
                    let q = b.idx(i, j, kk);
                    match vel[q] {
                        VelClass::Regular => {
                            lower = Some((LowerAnchor::Corner(q as u32), geom.z_lo(kk)));
                            break;
                        }
                        VelClass::MergedFace => continue,
                        VelClass::Surface | VelClass::Underground | VelClass::Outside => {
                            lower = Some((LowerAnchor::Surface(line as u32), h));
                            break;
                        }
                        _ => break,
                    }
                }
                let Some((anchor, zl)) = lower else { continue };
                let gamma = if zu > zl { (z - zl) / (zu - zl) } else { 1.0 };
                out.push(FaceInterp { corner: c as u32, upper: up as u32, lower: anchor, gamma });
            }
        }
    }
    out
}
