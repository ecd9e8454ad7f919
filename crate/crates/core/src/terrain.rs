//! Piecewise-bilinear terrain and cut-cell geometry.
//!
//! Terrain heights are sampled at the corners of every grid column. Inside a
//! column the surface is the unique bilinear interpolant of the four corner
//! heights, so adjacent columns share their edges exactly. Cut volumes and
//! face areas are computed by splitting cells into narrow subcolumns.

use crate::error::{Error, Result};
use crate::grid::Block;

/// Analytic hill shapes. Coordinates are absolute domain positions in metres.
#[derive(Debug, Clone, PartialEq)]
pub enum TerrainShape {
    Flat,
    /// Level ground at a fixed height.
    Uniform { h: f64 },
    /// `h = hm / (1 + r²/a²)^{3/2}`
    Bell { hm: f64, a: f64, xc: f64, yc: f64 },
    /// `h = sqrt(r² - ρ²)` inside the footprint.
    Hemisphere { r: f64, xc: f64, yc: f64 },
    /// `h = hm/2 (1 + cos(π ρ/a))` for `ρ < a`.
    Cosine { hm: f64, a: f64, xc: f64, yc: f64 },
    /// Cosine profile in x, uniform in y.
    CosineRidge { hm: f64, a: f64, xc: f64 },
}

impl TerrainShape {
    pub fn height(&self, x: f64, y: f64) -> f64 {
        match *self {
            TerrainShape::Flat => 0.0,
            TerrainShape::Uniform { h } => h,
            TerrainShape::Bell { hm, a, xc, yc } => {
                let dx = x - xc;
                let dy = y - yc;
                hm / (1.0 + (dx * dx + dy * dy) / (a * a)).powf(1.5)
            }
            TerrainShape::Hemisphere { r, xc, yc } => {
                let d2 = (x - xc).powi(2) + (y - yc).powi(2);
                if d2 < r * r {
                    (r * r - d2).sqrt()
                } else {
                    0.0
                }
            }
            TerrainShape::Cosine { hm, a, xc, yc } => {
                let d = ((x - xc).powi(2) + (y - yc).powi(2)).sqrt();
                cosine_profile(hm, a, d)
            }
            TerrainShape::CosineRidge { hm, a, xc } => cosine_profile(hm, a, (x - xc).abs()),
        }
    }

    /// Upper bound of the terrain height.
    pub fn max_height(&self) -> f64 {
        match *self {
            TerrainShape::Flat => 0.0,
            TerrainShape::Uniform { h } => h,
            TerrainShape::Bell { hm, .. }
            | TerrainShape::Cosine { hm, .. }
            | TerrainShape::CosineRidge { hm, .. } => hm,
            TerrainShape::Hemisphere { r, .. } => r,
        }
    }
}

fn cosine_profile(hm: f64, a: f64, r: f64) -> f64 {
    if r < a {
        0.5 * hm * (1.0 + (std::f64::consts::PI * r / a).cos())
    } else {
        0.0
    }
}

/// Terrain over a horizontally periodic domain.
#[derive(Debug, Clone)]
pub struct TerrainField {
    pub shape: TerrainShape,
    pub lx: f64,
    pub ly: f64,
}

impl TerrainField {
    pub fn new(shape: TerrainShape, lx: f64, ly: f64) -> Self {
        Self { shape, lx, ly }
    }

    pub fn flat(lx: f64, ly: f64) -> Self {
        Self::new(TerrainShape::Flat, lx, ly)
    }

    /// Height at an arbitrary position; positions outside the domain are wrapped.
    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.shape
            .height(x.rem_euclid(self.lx), y.rem_euclid(self.ly))
    }

    /// Height at grid corner `(ci, cj)` of a lattice with spacing `dx`.
    /// Integer arithmetic keeps corners shared by different cubes bit-identical.
    pub fn corner_height(&self, ci: i64, cj: i64, dx: f64) -> f64 {
        self.height(ci as f64 * dx, cj as f64 * dx)
    }

    pub fn is_flat(&self) -> bool {
        matches!(self.shape, TerrainShape::Flat)
    }
}

/// Bilinear surface `h = m1 x + m2 x y + m3 y + c` in column-local coordinates
/// with the lower-left corner at the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearPatch {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub c: f64,
}

impl BilinearPatch {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.m1 * x + self.m2 * x * y + self.m3 * y + self.c
    }
}

/// Coefficients of the bilinear patch through the corner heights `h00` (origin),
/// `h10` (+x), `h01` (+y) and `h11`.
pub fn bilinear_coeffs(h00: f64, h10: f64, h01: f64, h11: f64, dx: f64, dy: f64) -> BilinearPatch {
    BilinearPatch {
        m1: (h10 - h00) / dx,
        m2: (h00 - h01 + h11 - h10) / (dx * dy),
        m3: (h01 - h00) / dy,
        c: h00,
    }
}

/// Centered gradients of a column from its four corner heights.
pub fn column_gradients(h00: f64, h10: f64, h01: f64, h11: f64, dx: f64, dy: f64) -> (f64, f64) {
    (
        ((h10 + h11) - (h00 + h01)) / (2.0 * dx),
        ((h01 + h11) - (h00 + h10)) / (2.0 * dy),
    )
}

/// Outward (upward) unit normal of a surface with slopes `(hx, hy)`.
pub fn surface_normal(hx: f64, hy: f64) -> [f64; 3] {
    // hypot-style scaling keeps the result unit length for very steep slopes.
    let s = hx.abs().max(hy.abs()).max(1.0);
    let (a, b, c) = (-hx / s, -hy / s, 1.0 / s);
    let norm = (a * a + b * b + c * c).sqrt();
    [a / norm, b / norm, c / norm]
}

/// Classification of a scalar cell by its wetted volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellClass {
    Regular,
    Cut,
    Underground,
}

pub const CLASS_TOL: f64 = 1e-12;

pub fn classify(volume: f64, full: f64) -> CellClass {
    if volume < CLASS_TOL * full {
        CellClass::Underground
    } else if volume > (1.0 - CLASS_TOL) * full {
        CellClass::Regular
    } else {
        CellClass::Cut
    }
}

/// Wetted volume and face areas of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutGeometry {
    pub volume: f64,
    pub area_xlo: f64,
    pub area_xhi: f64,
    pub area_ylo: f64,
    pub area_yhi: f64,
    pub area_zlo: f64,
    pub area_zhi: f64,
}

/// Wetted area of a vertical face of horizontal length `len` spanning `[z0, z1]`
/// whose bottom edge follows the terrain linearly from `ha` to `hb`.
pub fn side_face_area(ha: f64, hb: f64, z0: f64, z1: f64, len: f64, n_sub: usize) -> f64 {
    let dz = z1 - z0;
    if ha.max(hb) <= z0 {
        return dz * len;
    }
    if ha.min(hb) >= z1 {
        return 0.0;
    }
    let ds = len / n_sub as f64;
    let mut sum = 0.0;
    for s in 0..n_sub {
        let t = (s as f64 + 0.5) / n_sub as f64;
        let h = ha + (hb - ha) * t;
        sum += (z1 - z0.max(h)).clamp(0.0, dz);
    }
    sum * ds
}

/// Cut volume and face areas of the cell `[0,dx]×[0,dy]×[z0,z1]` under `patch`.
pub fn cut_geometry(
    patch: &BilinearPatch,
    dx: f64,
    dy: f64,
    z0: f64,
    z1: f64,
    n_sub: usize,
) -> Result<CutGeometry> {
    if n_sub < 1 {
        return Err(Error::Domain("n_sub must be at least 1".into()));
    }
    let h00 = patch.c;
    let h10 = patch.eval(dx, 0.0);
    let h01 = patch.eval(0.0, dy);
    let h11 = patch.eval(dx, dy);
    let (volume, area_zlo, area_zhi) = column_cut(patch, dx, dy, z0, z1, n_sub);
    Ok(CutGeometry {
        volume,
        area_xlo: side_face_area(h00, h01, z0, z1, dy, n_sub),
        area_xhi: side_face_area(h10, h11, z0, z1, dy, n_sub),
        area_ylo: side_face_area(h00, h10, z0, z1, dx, n_sub),
        area_yhi: side_face_area(h01, h11, z0, z1, dx, n_sub),
        area_zlo,
        area_zhi,
    })
}

/// Subcolumn sums for one cell: (volume, wetted bottom area, wetted top area).
fn column_cut(
    patch: &BilinearPatch,
    dx: f64,
    dy: f64,
    z0: f64,
    z1: f64,
    n_sub: usize,
) -> (f64, f64, f64) {
    let corners = [
        patch.c,
        patch.eval(dx, 0.0),
        patch.eval(0.0, dy),
        patch.eval(dx, dy),
    ];
    let hmin = corners.iter().cloned().fold(f64::INFINITY, f64::min);
    let hmax = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let dz = z1 - z0;
    let area = dx * dy;
    if hmax < z0 {
        return (area * dz, area, area);
    }
    if hmin >= z1 {
        return (0.0, 0.0, 0.0);
    }
    let sx = dx / n_sub as f64;
    let sy = dy / n_sub as f64;
    let (mut vol, mut nlo, mut nhi) = (0.0, 0usize, 0usize);
    for b in 0..n_sub {
        let y = (b as f64 + 0.5) * sy;
        for a in 0..n_sub {
            let h = patch.eval((a as f64 + 0.5) * sx, y);
            vol += (z1 - z0.max(h)).clamp(0.0, dz);
            nlo += (h < z0) as usize;
            nhi += (h < z1) as usize;
        }
    }
    let sub = sx * sy;
    (vol * sub, nlo as f64 * sub, nhi as f64 * sub)
}

/// Static cut-cell geometry of one cube, covering interior and ghost frame.
///
/// Face arrays are indexed by the cell on the high side of the face: `ax[c]`
/// is the wetted area of the x-face at the lower x boundary of cell `c`.
#[derive(Debug, Clone)]
pub struct CubeGeometry {
    pub block: Block,
    pub spacing: f64,
    /// Global cell index of the block's interior origin at this level.
    pub origin: [i64; 3],
    pub vol: Vec<f64>,
    pub ax: Vec<f64>,
    pub ay: Vec<f64>,
    pub az: Vec<f64>,
    pub class: Vec<CellClass>,
    /// Corner heights per corner line, indexed by `block.line(ci, cj)`.
    pub corner_h: Vec<f64>,
    pub n_cut: usize,
    pub min_cut_fraction: f64,
}

impl CubeGeometry {
    /// Build the geometry of a cube at `origin` (global cell indices) with
    /// `nz_cells` cells over the full domain height at this level.
    pub fn build(
        terrain: &TerrainField,
        block: Block,
        origin: [i64; 3],
        spacing: f64,
        nz_cells: i64,
        n_sub: usize,
    ) -> Result<Self> {
        if n_sub < 1 {
            return Err(Error::Domain("n_sub must be at least 1".into()));
        }
        let len = block.len();
        let g = block.ghost as i64;
        let n = block.n as i64;
        let d = spacing;
        let full = d * d * d;
        let nl = block.nl();
        let mut corner_h = vec![0.0; nl * nl];
        for cj in -g..=n + g {
            for ci in -g..=n + g {
                corner_h[block.line(ci, cj)] =
                    terrain.corner_height(origin[0] + ci, origin[1] + cj, d);
            }
        }
        let h_at = |ci: i64, cj: i64| corner_h[block.line(ci, cj)];
        let inside_z = |k: i64| {
            let gk = origin[2] + k;
            gk >= 0 && gk < nz_cells
        };
        let z_of = |k: i64| (origin[2] + k) as f64 * d;

        let mut vol = vec![0.0; len];
        let mut ax = vec![0.0; len];
        let mut ay = vec![0.0; len];
        let mut az = vec![0.0; len];
        let mut class = vec![CellClass::Underground; len];
        let mut n_cut = 0;
        let mut min_cut_fraction = 1.0f64;

        for j in -g..n + g {
            for i in -g..n + g {
                let (h00, h10, h01, h11) =
                    (h_at(i, j), h_at(i + 1, j), h_at(i, j + 1), h_at(i + 1, j + 1));
                let patch = bilinear_coeffs(h00, h10, h01, h11, d, d);
                for k in -g..n + g {
                    let c = block.idx(i, j, k);
                    if !inside_z(k) {
                        continue;
                    }
                    let (z0, z1) = (z_of(k), z_of(k + 1));
                    let (v, alo, _) = column_cut(&patch, d, d, z0, z1, n_sub);
                    vol[c] = v;
                    class[c] = classify(v, full);
                    if class[c] == CellClass::Cut {
                        n_cut += 1;
                        min_cut_fraction = min_cut_fraction.min(v / full);
                    }
                    // bottom face of this cell; zero at the domain floor
                    az[c] = if inside_z(k - 1) { alo } else { 0.0 };
                    if i > -g {
                        ax[c] = side_face_area(h00, h01, z0, z1, d, n_sub);
                    }
                    if j > -g {
                        ay[c] = side_face_area(h00, h10, z0, z1, d, n_sub);
                    }
                }
            }
        }
        // Faces shared with an underground or outside cell carry no flux.
        for k in -g..n + g {
            for j in -g..n + g {
                for i in -g..n + g {
                    let c = block.idx(i, j, k);
                    let wet = class[c] != CellClass::Underground;
                    if !wet || i == -g || class[block.idx(i - 1, j, k)] == CellClass::Underground {
                        ax[c] = 0.0;
                    }
                    if !wet || j == -g || class[block.idx(i, j - 1, k)] == CellClass::Underground {
                        ay[c] = 0.0;
                    }
                    if !wet || k == -g || class[block.idx(i, j, k - 1)] == CellClass::Underground {
                        az[c] = 0.0;
                    }
                }
            }
        }
        Ok(Self {
            block,
            spacing,
            origin,
            vol,
            ax,
            ay,
            az,
            class,
            corner_h,
            n_cut,
            min_cut_fraction,
        })
    }

    pub fn full_volume(&self) -> f64 {
        self.spacing.powi(3)
    }

    /// Terrain height at the center of column `(i, j)`.
    pub fn column_center_height(&self, i: i64, j: i64) -> f64 {
        let b = &self.block;
        0.25 * (self.corner_h[b.line(i, j)]
            + self.corner_h[b.line(i + 1, j)]
            + self.corner_h[b.line(i, j + 1)]
            + self.corner_h[b.line(i + 1, j + 1)])
    }

    pub fn column_gradients(&self, i: i64, j: i64) -> (f64, f64) {
        let b = &self.block;
        column_gradients(
            self.corner_h[b.line(i, j)],
            self.corner_h[b.line(i + 1, j)],
            self.corner_h[b.line(i, j + 1)],
            self.corner_h[b.line(i + 1, j + 1)],
            self.spacing,
            self.spacing,
        )
    }

    /// Height of the bottom of cell layer `k` in metres.
    pub fn z_lo(&self, k: i64) -> f64 {
        (self.origin[2] + k) as f64 * self.spacing
    }
}
