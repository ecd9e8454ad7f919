//! Finite-volume tendencies on one cube.
//!
//! Scalars (p′, ρ′) live at cell centres and are updated from face fluxes
//! summed over merged groups. Momentum lives at corners and is integrated only
//! at regular points, on the rectangular velocity cells around them. Diffusion
//! and sponge terms are evaluated on the lagged time level so that they stay
//! stable under leapfrog stepping.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::grid::{Block, IndexBox};
use crate::merge::{CellRole, MergeMap, VelClass};
use crate::state::{BaseState, Fields, PhysConstants};
use crate::terrain::CubeGeometry;

/// Mean of the four corner values of a face.
pub fn face_normal_velocity(c: [f64; 4]) -> f64 {
    0.25 * (c[0] + c[1] + c[2] + c[3])
}

/// First-order face value of an advected scalar.
pub fn face_scalar(a: f64, b: f64) -> f64 {
    0.5 * (a + b)
}

/// Per-volume divergence from outward face fluxes (already multiplied by area).
pub fn divergence(outward: &[f64], volume: f64) -> Result<f64> {
    if !(volume > 0.0) {
        return Err(Error::Internal(format!("divergence over non-positive volume {volume}")));
    }
    Ok(outward.iter().sum::<f64>() / volume)
}

/// Undivided fourth difference of a 5-point stencil.
pub fn delta4(s: [f64; 5]) -> f64 {
    s[0] - 4.0 * s[1] + 6.0 * s[2] - 4.0 * s[3] + s[4]
}

/// Undivided second difference of a 3-point stencil.
pub fn delta2(s: [f64; 3]) -> f64 {
    s[0] - 2.0 * s[1] + s[2]
}

/// Artificial diffusion rates (1/s, undivided form).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diffusion {
    pub alpha4: f64,
    pub alpha2: f64,
}

impl Default for Diffusion {
    fn default() -> Self {
        Self { alpha4: 0.001, alpha2: 0.002 }
    }
}

impl Diffusion {
    /// Source term along one axis. `s` holds the 5-point stencil centred on the
    /// point; `avail` flags which entries are usable.
    pub fn term(&self, s: [f64; 5], avail: [bool; 5], dt: f64) -> f64 {
        if avail.iter().all(|&a| a) {
            -self.alpha4 / dt * delta4(s)
        } else if avail[1] && avail[2] && avail[3] {
            self.alpha2 / dt * delta2([s[1], s[2], s[3]])
        } else {
            0.0
        }
    }
}

/// Rayleigh damping layer below the lid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sponge {
    pub z_base: f64,
    pub z_top: f64,
    pub sigma_max: f64,
}

impl Sponge {
    pub fn new(z_base: f64, z_top: f64, sigma_max: f64) -> Result<Self> {
        if !(z_base < z_top) {
            return Err(Error::Config(format!(
                "sponge base {z_base} m must lie below the domain top {z_top} m"
            )));
        }
        if !(sigma_max >= 0.0) {
            return Err(Error::Config("sponge strength must be non-negative".into()));
        }
        Ok(Self { z_base, z_top, sigma_max })
    }

    pub fn sigma(&self, z: f64) -> f64 {
        if z <= self.z_base {
            return 0.0;
        }
        let s = (0.5 * std::f64::consts::PI * (z - self.z_base) / (self.z_top - self.z_base)).sin();
        self.sigma_max * s * s
    }
}

/// Physical and numerical parameters of the tendency kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynParams {
    pub consts: PhysConstants,
    pub diffusion: Diffusion,
    pub sponge: Option<Sponge>,
    /// Velocity the sponge relaxes towards.
    pub u_ref: [f64; 3],
}

/// Static per-cube data needed by the kernel.
pub struct CubeCtx<'a> {
    pub geom: &'a CubeGeometry,
    pub merge: &'a MergeMap,
    pub base: &'a BaseState,
    pub compute: IndexBox,
}

/// Interface mass fluxes of one cube step.
#[derive(Debug, Default)]
pub struct InterfaceIo<'a> {
    /// Coarse side: replacement mass fluxes per face (`n²` each).
    pub overrides: [Option<&'a [f64]>; 6],
    /// Fine side: where to store boundary-face mass fluxes.
    pub record: [Option<&'a mut Vec<f64>>; 6],
}

#[derive(Default)]
struct Scratch {
    rho: Vec<f64>,
    rth: Vec<f64>,
    theta_lag: Vec<f64>,
    fm: [Vec<f64>; 3],
    fh: [Vec<f64>; 3],
}

impl Scratch {
    fn ensure(&mut self, len: usize) {
        for v in [&mut self.rho, &mut self.rth, &mut self.theta_lag]
            .into_iter()
            .chain(self.fm.iter_mut())
            .chain(self.fh.iter_mut())
        {
            if v.len() != len {
                *v = vec![0.0; len];
            } else {
                v.fill(0.0);
            }
        }
    }
}

thread_local! {
    static SCRATCH: RefCell<Scratch> = RefCell::new(Scratch::default());
}

fn frame_inner(b: &Block) -> IndexBox {
    IndexBox { lo: [b.lo() + 1; 3], hi: [b.hi() - 1; 3] }
}

/// Compute `out = base + factor · T(eval)` on the cube's compute box, with
/// lagged terms taken from `base`. `dt` is the level time step.
#[allow(clippy::too_many_arguments)]
pub fn step_kernel(
    ctx: &CubeCtx,
    params: &DynParams,
    base: &Fields,
    eval: &Fields,
    factor: f64,
    dt: f64,
    out: &mut Fields,
    io: &mut InterfaceIo,
) {
    SCRATCH.with(|s| {
        let mut s = s.borrow_mut();
        s.ensure(ctx.geom.block.len());
        kernel(ctx, params, base, eval, factor, dt, out, io, &mut s);
    })
}

#[allow(clippy::too_many_arguments)]
fn kernel(
    ctx: &CubeCtx,
    params: &DynParams,
    base: &Fields,
    eval: &Fields,
    factor: f64,
    dt: f64,
    out: &mut Fields,
    io: &mut InterfaceIo,
    s: &mut Scratch,
) {
    let geom = ctx.geom;
    let mm = ctx.merge;
    let bs = ctx.base;
    let b = geom.block;
    let st = b.strides();
    let n = b.n as i64;
    let c = &params.consts;
    let d = geom.spacing;
    let inner = frame_inner(&b);
    let region = ctx.compute.grow(3).clip(&inner);
    let kc = |k: i64| bs.at(geom.origin[2] + k);

    // cell states through host mapping
    for p in region.grow(1).clip(&inner).iter() {
        let cidx = b.idx(p[0], p[1], p[2]);
        if mm.role[cidx] == CellRole::Dry {
            continue;
        }
        let h = mm.host_of(cidx);
        let kb = kc(p[2]);
        s.rho[cidx] = bs.rho_c[kb] + eval.r[h];
        s.rth[cidx] = c.rho_theta(bs.p_c[kb] + eval.p[h]);
    }
    for p in ctx.compute.grow(2).clip(&inner).iter() {
        let cidx = b.idx(p[0], p[1], p[2]);
        if mm.role[cidx] == CellRole::Dry {
            continue;
        }
        let h = mm.host_of(cidx);
        let kb = kc(p[2]);
        let rho = bs.rho_c[kb] + base.r[h];
        s.theta_lag[cidx] = c.rho_theta(bs.p_c[kb] + base.p[h]) / rho - bs.theta_c[kb];
    }

    // face fluxes, signed along +axis; index of a face = cell on its high side
    let areas = [&geom.ax, &geom.ay, &geom.az];
    for axis in 0..3 {
        let (t1, t2) = crate::grid::tangential(axis);
        let mut fr = region;
        fr.hi[axis] += 1;
        let fr = fr.clip(&IndexBox { lo: inner.lo, hi: [b.hi() - 1; 3] });
        let ov = [io.overrides[2 * axis], io.overrides[2 * axis + 1]];
        for p in fr.iter() {
            let ci = b.idx(p[0], p[1], p[2]);
            let area = areas[axis][ci];
            let (mut fm, mut fh) = (0.0, 0.0);
            if area > 0.0 {
                let u = &eval.u[axis];
                let un = face_normal_velocity([
                    u[ci],
                    u[ci + st[t1]],
                    u[ci + st[t2]],
                    u[ci + st[t1] + st[t2]],
                ]);
                let l = ci - st[axis];
                fm = face_scalar(s.rho[l], s.rho[ci]) * un * area;
                fh = face_scalar(s.rth[l], s.rth[ci]) * un * area;
            }
            let on_face = (p[t1] >= 0 && p[t1] < n) && (p[t2] >= 0 && p[t2] < n);
            if on_face && (p[axis] == 0 || p[axis] == n) {
                let side = (p[axis] == n) as usize;
                let slot = p[t1] as usize + p[t2] as usize * b.n;
                if let Some(rec) = io.record[2 * axis + side].as_deref_mut() {
                    rec[slot] = fm;
                }
                if let Some(o) = ov[side] {
                    // carry θ with the matched mass flux so ρ′ and p′ stay consistent
                    let l = ci - st[axis];
                    let rs = s.rho[l] + s.rho[ci];
                    fm = o[slot];
                    fh = if rs > 0.0 { fm * (s.rth[l] + s.rth[ci]) / rs } else { 0.0 };
                }
            }
            s.fm[axis][ci] = fm;
            s.fh[axis][ci] = fh;
        }
    }

    let diff = params.diffusion;
    let sponge = params.sponge;
    let z_cell = |k: i64| geom.z_lo(k) + 0.5 * d;

    // scalar tendencies on active hosts
    for p in ctx.compute.iter() {
        let h = b.idx(p[0], p[1], p[2]);
        if mm.role[h] != CellRole::Active {
            continue;
        }
        let net = |cc: usize, f: &[Vec<f64>; 3]| -> f64 {
            (f[0][cc + st[0]] - f[0][cc]) + (f[1][cc + st[1]] - f[1][cc]) + (f[2][cc + st[2]] - f[2][cc])
        };
        let mut nm = net(h, &s.fm);
        let mut nh = net(h, &s.fh);
        for &m in mm.members_of(h) {
            nm += net(m as usize, &s.fm);
            nh += net(m as usize, &s.fh);
        }
        let vg = mm.group_volume[h];
        // diffusion of θ′ at the host
        let mut dtheta = 0.0;
        for axis in 0..3 {
            let mut sv = [0.0; 5];
            let mut av = [false; 5];
            for o in 0..5 {
                let off = o as i64 - 2;
                let mut q = p;
                q[axis] += off;
                if !inner.contains(q) {
                    continue;
                }
                let qi = b.idx(q[0], q[1], q[2]);
                if matches!(mm.role[qi], CellRole::Active | CellRole::Absorbed) {
                    av[o] = true;
                    sv[o] = s.theta_lag[qi];
                }
            }
            dtheta += diff.term(sv, av, dt);
        }
        let kb = kc(p[2]);
        let rho_lag = bs.rho_c[kb] + base.r[h];
        let p_tot = bs.p_c[kb] + eval.p[h];
        let mut tp = -c.pressure_factor(p_tot) * (nh / vg - rho_lag * dtheta);
        let mut tr = -nm / vg;
        if let Some(sp) = sponge {
            let sg = sp.sigma(z_cell(p[2]));
            tp -= sg * base.p[h];
            tr -= sg * base.r[h];
        }
        out.p[h] = base.p[h] + factor * tp;
        out.r[h] = base.r[h] + factor * tr;
    }

    // momentum on regular corners
    let g = c.g;
    for p in ctx.compute.iter() {
        let q = b.idx(p[0], p[1], p[2]);
        if mm.vel[q] != VelClass::Regular {
            continue;
        }
        let cells8 = [
            q,
            q - st[0],
            q - st[1],
            q - st[0] - st[1],
            q - st[2],
            q - st[0] - st[2],
            q - st[1] - st[2],
            q - st[0] - st[1] - st[2],
        ];
        let avg8 = |f: &[f64]| cells8.iter().map(|&i| f[i]).sum::<f64>() * 0.125;
        let kb = bs.at(geom.origin[2] + p[2]);
        let rho_c_lag = bs.rho_n[kb] + avg8(&base.r);
        let z = geom.z_lo(p[2]);
        let sg = sponge.map(|sp| sp.sigma(z)).unwrap_or(0.0);
        let face4 = |f: &[f64], cc: usize, axis: usize| -> f64 {
            let (t1, t2) = crate::grid::tangential(axis);
            0.25 * (f[cc] + f[cc - st[t1]] + f[cc - st[t2]] + f[cc - st[t1] - st[t2]])
        };
        let mut adv = [0.0; 3];
        let mut grad = [0.0; 3];
        for dax in 0..3 {
            let sd = st[dax];
            let rp = face4(&s.rho, q, dax);
            let rm = face4(&s.rho, q - sd, dax);
            let ud = &eval.u[dax];
            let up = 0.5 * (ud[q] + ud[q + sd]);
            let um = 0.5 * (ud[q - sd] + ud[q]);
            for a in 0..3 {
                let ua = &eval.u[a];
                let fp = rp * up * 0.5 * (ua[q] + ua[q + sd]);
                let fmn = rm * um * 0.5 * (ua[q - sd] + ua[q]);
                adv[a] -= (fp - fmn) / d;
            }
            grad[dax] = (face4(&eval.p, q, dax) - face4(&eval.p, q - sd, dax)) / d;
        }
        let buoy = -g * avg8(&eval.r);
        for a in 0..3 {
            let ub = &base.u[a];
            let mut dsum = 0.0;
            for dax in 0..3 {
                let sd = st[dax] as i64;
                let mut sv = [0.0; 5];
                let mut av = [false; 5];
                for o in 0..5 {
                    let mut r = p;
                    r[dax] += o as i64 - 2;
                    if !b.in_frame(r) {
                        continue;
                    }
                    let qi = (q as i64 + (o as i64 - 2) * sd) as usize;
                    if mm.vel[qi].is_wet() {
                        av[o] = true;
                        sv[o] = ub[qi];
                    }
                }
                dsum += diff.term(sv, av, dt);
            }
            let mut t = adv[a] - grad[a] + rho_c_lag * dsum;
            if a == 2 {
                t += buoy;
            }
            if sg > 0.0 {
                t -= sg * (base.m[a][q] - rho_c_lag * params.u_ref[a]);
            }
            out.m[a][q] = base.m[a][q] + factor * t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn face_helpers() {
        assert_eq!(face_normal_velocity([1.0; 4]), 1.0);
        assert_eq!(face_normal_velocity([0.0, 2.0, 4.0, 6.0]), 3.0);
        assert_eq!(face_scalar(5.0, 5.0), 5.0);
        assert_eq!(face_scalar(2.0, 4.0), 3.0);
    }

    #[test]
    fn divergence_examples() {
        assert_eq!(divergence(&[1.0, -1.0, 2.0, -2.0], 3.0).unwrap(), 0.0);
        assert!((divergence(&[0.5, 1.5, -0.25], 2.0).unwrap() - 0.875).abs() < 1e-15);
        assert!(divergence(&[1.0], 0.0).is_err());
    }

    #[test]
    fn diffusion_annihilates_linear() {
        let df = Diffusion::default();
        let all = [true; 5];
        assert_eq!(df.term([3.0; 5], all, 1.0), 0.0);
        assert_eq!(df.term([1.0, 2.0, 3.0, 4.0, 5.0], all, 1.0), 0.0);
        let part = [false, true, true, true, false];
        assert_eq!(df.term([0.0, 2.0, 3.0, 4.0, 0.0], part, 1.0), 0.0);
    }

    #[test]
    fn diffusion_damps_spike() {
        let df = Diffusion { alpha4: 0.001, alpha2: 0.002 };
        let (a, dt) = (2.0, 0.5);
        let t = df.term([0.0, 0.0, a, 0.0, 0.0], [true; 5], dt);
        // with K4 = α4 Δ⁴/dt the divided form gives 6 K4 A / Δ⁴
        assert!((t + 6.0 * df.alpha4 * a / dt).abs() < 1e-15);
        let t2 = df.term([0.0, 0.0, a, 0.0, 0.0], [false, true, true, true, false], dt);
        assert!(t2 < 0.0);
    }

    #[test]
    fn sponge_profile() {
        let sp = Sponge::new(8000.0, 12000.0, 1.0 / 50.0).unwrap();
        assert_eq!(sp.sigma(5000.0), 0.0);
        assert!((sp.sigma(12000.0) - 0.02).abs() < 1e-15);
        assert!((sp.sigma(10000.0) - 0.01).abs() < 1e-15);
        assert!(Sponge::new(12000.0, 12000.0, 0.02).unwrap_err().is_config());
    }
}
