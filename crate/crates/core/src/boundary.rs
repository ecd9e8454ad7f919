//! Diagnosis of velocities that are not integrated: surface points, merged
//! faces, underground extensions and the lid.
//!
//! Surface velocities are interpolated on the nearest horizontal plane of
//! regular points along the surface normal and then made tangential (free
//! slip) or zeroed (no slip). Merged-face points are interpolated linearly in
//! z between a regular point above and the regular or surface point below.

use crate::error::{Error, Result};
use crate::merge::{LowerAnchor, MergeMap, VelClass};
use crate::terrain::{surface_normal, CubeGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SurfaceCondition {
    #[default]
    FreeSlip,
    NoSlip,
}

/// Remove the component of `u` along the unit normal `n`.
pub fn slip_project(u: [f64; 3], n: [f64; 3]) -> Result<[f64; 3]> {
    let nn = n[0] * n[0] + n[1] * n[1] + n[2] * n[2];
    if !((nn - 1.0).abs() <= 1e-10) {
        return Err(Error::Domain(format!("normal must have unit length, |n|²={nn}")));
    }
    Ok(project(u, n))
}

#[inline]
fn project(u: [f64; 3], n: [f64; 3]) -> [f64; 3] {
    let d = u[0] * n[0] + u[1] * n[1] + u[2] * n[2];
    [u[0] - d * n[0], u[1] - d * n[1], u[2] - d * n[2]]
}

/// Bilinear weights for the corners (origin, +x, +y, +xy) of a plane cell at
/// fractional position `(alpha, beta)`.
pub fn bilinear_weights(alpha: f64, beta: f64) -> [f64; 4] {
    [
        (1.0 - alpha) * (1.0 - beta),
        alpha * (1.0 - beta),
        (1.0 - alpha) * beta,
        alpha * beta,
    ]
}

/// Velocity at the intersection of the normal line with a plane of four
/// regular points ordered (origin, +x, +y, +xy).
pub fn nearest_plane_velocity(vals: [[f64; 3]; 4], alpha: f64, beta: f64) -> [f64; 3] {
    let w = bilinear_weights(alpha.clamp(0.0, 1.0), beta.clamp(0.0, 1.0));
    let mut out = [0.0; 3];
    for (v, wk) in vals.iter().zip(w) {
        for a in 0..3 {
            out[a] += wk * v[a];
        }
    }
    out
}

/// Fractional plane coordinates where the line from `p` along `n` reaches
/// height `z_plane`, relative to the plane cell origin `(x0, y0)`; clamped.
pub fn plane_intersection(p: [f64; 3], n: [f64; 3], z_plane: f64, x0: f64, y0: f64, d: f64) -> (f64, f64) {
    let t = (z_plane - p[2]) / n[2];
    let x = p[0] + t * n[0];
    let y = p[1] + t * n[1];
    (((x - x0) / d).clamp(0.0, 1.0), ((y - y0) / d).clamp(0.0, 1.0))
}

/// Linear interpolation on a merged face: `gamma` weights the upper point.
pub fn merged_face_velocity(upper: [f64; 3], lower: [f64; 3], gamma: f64) -> [f64; 3] {
    [0, 1, 2].map(|a| gamma * upper[a] + (1.0 - gamma) * lower[a])
}

/// Surface-point recipe for one corner line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePlan {
    pub line: u32,
    pub normal: [f64; 3],
    pub corners: [u32; 4],
    pub weights: [f64; 4],
    /// The grid corner that coincides with the surface point, if any.
    pub grid_corner: Option<u32>,
}

/// Static diagnosis recipe for one cube.
#[derive(Debug, Clone, Default)]
pub struct BoundaryPlan {
    pub surface: Vec<SurfacePlan>,
    /// Slot in `surface` for every line, or `u32::MAX`.
    pub line_slot: Vec<u32>,
    pub underground: Vec<(u32, u32)>,
    pub faces: Vec<crate::merge::FaceInterp>,
    /// Lid corner and the corner below it.
    pub lid: Vec<(u32, u32)>,
}

/// Locate the nearest planes for all surface lines of a cube.
///
/// Lines with `required(ci, cj)` true must succeed within `max_search`
/// levels; other lines are skipped when no plane is available.
pub fn build_boundary_plan(
    geom: &CubeGeometry,
    merge: &MergeMap,
    max_search: usize,
    required: impl Fn(i64, i64) -> bool,
) -> Result<BoundaryPlan> {
    let b = geom.block;
    let (lo, hi) = (b.lo(), b.hi());
    let d = geom.spacing;
    let nl = b.nl();
    let mut plan = BoundaryPlan { line_slot: vec![u32::MAX; nl * nl], ..Default::default() };
    let tol = crate::merge::surface_tolerance(d);
    let z_bottom = geom.z_lo(lo);
    let z_top = geom.z_lo(hi - 1);
    for cj in lo + 1..hi - 1 {
        for ci in lo + 1..hi - 1 {
            let line = b.line(ci, cj);
            let h = geom.corner_h[line];
            if h < z_bottom - tol || h > z_top {
                continue;
            }
            // slopes at the corner from the four adjacent column centres
            let hc = |i: i64, j: i64| geom.column_center_height(i, j);
            let hx = ((hc(ci, cj - 1) + hc(ci, cj)) - (hc(ci - 1, cj - 1) + hc(ci - 1, cj))) / (2.0 * d);
            let hy = ((hc(ci - 1, cj) + hc(ci, cj)) - (hc(ci - 1, cj - 1) + hc(ci, cj - 1))) / (2.0 * d);
            let n = surface_normal(hx, hy);
            // plane cells around the line, the one the normal leans into first
            let pi = if n[0] >= 0.0 { ci } else { ci - 1 };
            let pj = if n[1] >= 0.0 { cj } else { cj - 1 };
            let (qi, qj) = (2 * ci - 1 - pi, 2 * cj - 1 - pj);
            let cells = if n[0].abs() <= n[1].abs() {
                [(pi, pj), (qi, pj), (pi, qj), (qi, qj)]
            } else {
                [(pi, pj), (pi, qj), (qi, pj), (qi, qj)]
            };
            // first corner level strictly above the surface point
            let kfirst = ((h - geom.z_lo(0)) / d).floor() as i64 + 1;
            let kfirst = if geom.z_lo(kfirst - 1) > h + tol { kfirst - 1 } else { kfirst };
            let chosen = cells.iter().find_map(|&(ic, jc)| {
                (kfirst..hi.min(kfirst + max_search as i64)).find_map(|kp| {
                    let cs = [
                        b.idx(ic, jc, kp),
                        b.idx(ic + 1, jc, kp),
                        b.idx(ic, jc + 1, kp),
                        b.idx(ic + 1, jc + 1, kp),
                    ];
                    cs.iter().all(|&c| merge.vel[c] == VelClass::Regular).then_some((ic, jc, kp, cs))
                })
            });
            let Some((ic, jc, kp, cs)) = chosen else {
                if required(ci, cj) {
                    return Err(Error::Config(format!(
                        "no regular plane within {max_search} levels above surface corner ({}, {}) at spacing {d} m",
                        geom.origin[0] + ci,
                        geom.origin[1] + cj
                    )));
                }
                continue;
            };
            let p = [
                (geom.origin[0] + ci) as f64 * d,
                (geom.origin[1] + cj) as f64 * d,
                h,
            ];
            let (alpha, beta) = plane_intersection(
                p,
                n,
                geom.z_lo(kp),
                (geom.origin[0] + ic) as f64 * d,
                (geom.origin[1] + jc) as f64 * d,
                d,
            );
            let grid_corner = (lo..hi)
                .find(|&k| (geom.z_lo(k) - h).abs() <= tol)
                .map(|k| b.idx(ci, cj, k) as u32);
            plan.line_slot[line] = plan.surface.len() as u32;
            plan.surface.push(SurfacePlan {
                line: line as u32,
                normal: n,
                corners: cs.map(|c| c as u32),
                weights: bilinear_weights(alpha, beta),
                grid_corner,
            });
        }
    }
    for k in lo..hi {
        for j in lo..hi {
            for i in lo..hi {
                let c = b.idx(i, j, k);
                match merge.vel[c] {
                    VelClass::Underground => {
                        let line = b.line(i, j);
                        if plan.line_slot[line] != u32::MAX {
                            plan.underground.push((c as u32, line as u32));
                        }
                    }
                    VelClass::Lid if k > lo => {
                        plan.lid.push((c as u32, b.idx(i, j, k - 1) as u32));
                    }
                    _ => {}
                }
            }
        }
    }
    plan.faces = merge
        .interp
        .iter()
        .filter(|f| match f.lower {
            LowerAnchor::Surface(line) => plan.line_slot[line as usize] != u32::MAX,
            LowerAnchor::Corner(_) => true,
        })
        .copied()
        .collect();
    Ok(plan)
}

/// Velocity at every planned surface point, in `plan.surface` order.
pub fn surface_velocities(u: &[Vec<f64>; 3], plan: &BoundaryPlan, bc: SurfaceCondition) -> Vec<[f64; 3]> {
    plan.surface
        .iter()
        .map(|s| match bc {
            SurfaceCondition::NoSlip => [0.0; 3],
            SurfaceCondition::FreeSlip => {
                let mut t = [0.0; 3];
                for (&c, w) in s.corners.iter().zip(s.weights) {
                    for a in 0..3 {
                        t[a] += w * u[a][c as usize];
                    }
                }
                project(t, s.normal)
            }
        })
        .collect()
}

/// Diagnose every non-integrated velocity point of one cube from the
/// regular-point values already present in `u`.
pub fn apply_boundary_velocities(u: &mut [Vec<f64>; 3], plan: &BoundaryPlan, bc: SurfaceCondition) {
    let get = |u: &[Vec<f64>; 3], c: u32| [u[0][c as usize], u[1][c as usize], u[2][c as usize]];
    let surf = surface_velocities(u, plan, bc);
    let set = |u: &mut [Vec<f64>; 3], c: u32, v: [f64; 3]| {
        for a in 0..3 {
            u[a][c as usize] = v[a];
        }
    };
    for (s, &v) in plan.surface.iter().zip(&surf) {
        if let Some(c) = s.grid_corner {
            set(u, c, v);
        }
    }
    for &(c, line) in &plan.underground {
        set(u, c, surf[plan.line_slot[line as usize] as usize]);
    }
    for f in &plan.faces {
        let up = get(u, f.upper);
        let lower = match f.lower {
            LowerAnchor::Corner(q) => get(u, q),
            LowerAnchor::Surface(line) => surf[plan.line_slot[line as usize] as usize],
        };
        set(u, f.corner, merged_face_velocity(up, lower, f.gamma));
    }
    for &(c, below) in &plan.lid {
        let v = get(u, below);
        set(u, c, [v[0], v[1], 0.0]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        let n = [0.0, 0.0, 1.0];
        assert_eq!(slip_project([3.0, 4.0, 0.0], n).unwrap(), [3.0, 4.0, 0.0]);
        assert_eq!(slip_project(n, n).unwrap(), [0.0; 3]);
        let r = 1.0 / 2f64.sqrt();
        let v = slip_project([10.0, 0.0, 0.0], [-r, 0.0, r]).unwrap();
        for (a, b) in v.iter().zip([5.0, 0.0, 5.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(slip_project([1.0, 0.0, 0.0], [1.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn plane_interpolation_examples() {
        let v = [7.0, -1.0, 2.0];
        for (a, b) in [(0.0, 0.0), (0.3, 0.9), (1.0, 1.0)] {
            let r = nearest_plane_velocity([v; 4], a, b);
            for k in 0..3 {
                assert!((r[k] - v[k]).abs() < 1e-12);
            }
        }
        let vals = [[0.0; 3], [1.0; 3], [2.0; 3], [3.0; 3]];
        assert_eq!(nearest_plane_velocity(vals, 1.0, 1.0), [3.0; 3]);
        let vals = [[0.0, 0.0, 0.0], [4.0, 0.0, 0.0], [0.0, 4.0, 0.0], [4.0, 4.0, 0.0]];
        assert_eq!(nearest_plane_velocity(vals, 0.5, 0.5)[0], 2.0);
    }

    #[test]
    fn merged_face_examples() {
        assert_eq!(merged_face_velocity([1.0, 2.0, 3.0], [9.0; 3], 1.0), [1.0, 2.0, 3.0]);
        assert_eq!(merged_face_velocity([2.0, 0.0, 0.0], [4.0, 0.0, 0.0], 0.5), [3.0, 0.0, 0.0]);
        // linear field u = 2 + 0.1 z reproduced exactly
        let f = |z: f64| 2.0 + 0.1 * z;
        let (zl, zu, z) = (13.0, 100.0, 40.0);
        let g = (z - zl) / (zu - zl);
        let v = merged_face_velocity([f(zu); 3], [f(zl); 3], g);
        assert!((v[0] - f(z)).abs() < 1e-12);
    }

    #[test]
    fn plane_intersection_follows_normal() {
        let r = 1.0 / 2f64.sqrt();
        // 45° normal tilted to +x from (0,0,0) reaches z=50 at x=50
        let (a, b) = plane_intersection([0.0, 0.0, 0.0], [r, 0.0, r], 50.0, 0.0, 0.0, 100.0);
        assert!((a - 0.5).abs() < 1e-12 && b == 0.0);
        let (a, _) = plane_intersection([0.0, 0.0, 0.0], [r, 0.0, r], 500.0, 0.0, 0.0, 100.0);
        assert_eq!(a, 1.0);
    }
}
