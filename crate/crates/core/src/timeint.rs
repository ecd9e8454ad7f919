//! Leapfrog integration with a Robert–Asselin filter, level subcycling over
//! the cube tree, and mass-flux matching at fine–coarse interfaces.
//!
//! Each cube keeps three time levels (prev, cur, next) whose roles rotate per
//! level. A coarse step at level `l` is preceded by two steps at level `l+1`.
//! Fine cubes integrate a depth-2 slab of their coarse-facing ghosts, record
//! the mass flux through coarse-facing faces on their second substep, and the
//! coarse cube uses the sum of the four fine fluxes in place of its own.

use std::time::Instant;

use rayon::prelude::*;

use crate::boundary::{apply_boundary_velocities, build_boundary_plan, BoundaryPlan, SurfaceCondition};
use crate::dynamics::{step_kernel, CubeCtx, Diffusion, DynParams, InterfaceIo, Sponge};
use crate::error::{Error, Result, ResultExt};
use crate::grid::{build_cube_tree_with, CubeTree, RefineRegion, DomainSpec, ExchangePlan, FaceLink, GhostEntry, IndexBox, Relation};
use crate::merge::{build_merge_map, CellRole, MergeMap, VelClass};
use crate::state::{build_base_state, Atmosphere, BaseState, Fields};
use crate::terrain::{CubeGeometry, TerrainField};

/// `φ_{n+1} = φ_{n−1} + 2 dt T(φ_n)`.
pub fn leapfrog_update(prev: f64, tendency: f64, dt: f64) -> f64 {
    prev + 2.0 * dt * tendency
}

/// Robert–Asselin filtered value of the centre level.
pub fn ra_filter(prev: f64, cur: f64, next: f64, nu: f64) -> f64 {
    cur + nu * (next - 2.0 * cur + prev)
}

/// Finest-level step from the acoustic CFL bound, halved for merged cells
/// that may be as small as half a regular cell.
pub fn cfl_timestep(atm: &Atmosphere, finest_spacing: f64, u_max: f64, safety: f64) -> Result<f64> {
    if !(safety > 0.0) {
        return Err(Error::Config(format!("CFL safety factor must be positive, got {safety}")));
    }
    let cs = atm.sound_speed(0.0);
    let dt = safety * finest_spacing / (cs + u_max.abs()) * 0.5;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("non-positive time step {dt}")));
    }
    Ok(dt)
}

/// Everything needed to set up a simulation.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub domain: DomainSpec,
    pub terrain: TerrainField,
    pub atm: Atmosphere,
    pub diffusion: Diffusion,
    pub sponge: Option<Sponge>,
    /// Background velocity (initial flow and sponge target).
    pub u_ref: [f64; 3],
    pub ra_nu: f64,
    pub surface: SurfaceCondition,
    pub n_sub: usize,
    pub max_search: usize,
    pub safety: f64,
    /// Level-0 step; derived from the CFL bound when absent.
    pub dt: Option<f64>,
    /// Region refined to the finest level in addition to the terrain criterion.
    pub refine: Option<RefineRegion>,
}

impl SimConfig {
    pub fn new(domain: DomainSpec, terrain: TerrainField, atm: Atmosphere) -> Self {
        Self {
            domain,
            terrain,
            atm,
            diffusion: Diffusion::default(),
            sponge: None,
            u_ref: [0.0; 3],
            ra_nu: 0.1,
            surface: SurfaceCondition::FreeSlip,
            n_sub: 64,
            max_search: 6,
            safety: 0.5,
            dt: None,
            refine: None,
        }
    }
}

/// Per-cube static data and time levels.
pub struct CubeState {
    pub id: usize,
    pub level: u32,
    pub geom: CubeGeometry,
    pub merge: MergeMap,
    pub bplan: BoundaryPlan,
    pub compute: IndexBox,
    pub buf: [Fields; 3],
    /// Faces whose neighbours are four finer cubes.
    fine_faces: [Option<[usize; 4]>; 6],
    /// Faces whose neighbour is coarser (fluxes recorded here).
    coarse_faces: [bool; 6],
    record: [Vec<f64>; 6],
    record_stamp: [u64; 6],
    pending: [Vec<f64>; 6],
}

/// One line of the run log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub time: f64,
    pub dt: f64,
    pub max_w: f64,
    pub total_mass: f64,
    pub mass_drift: f64,
    pub wall: f64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Target {
    Cur,
    Prev,
    StartupNext,
}

#[derive(Clone, Copy)]
enum Src {
    Slot(usize),
    Avg,
}

fn source_mode(t: Target, rel: Relation) -> Option<Src> {
    match (t, rel) {
        (Target::Cur, _) => Some(Src::Slot(1)),
        (Target::Prev, Relation::Same) => Some(Src::Slot(0)),
        (Target::Prev, Relation::Finer) => None,
        (Target::Prev, Relation::Coarser) => Some(Src::Avg),
        (Target::StartupNext, Relation::Same) => Some(Src::Slot(2)),
        (Target::StartupNext, Relation::Finer) => Some(Src::Slot(0)),
        (Target::StartupNext, Relation::Coarser) => Some(Src::Slot(1)),
    }
}

fn split3(b: &mut [Fields; 3], base: usize, eval: usize, out: usize) -> (&Fields, &Fields, &mut Fields) {
    let mut v = b.each_mut().map(Some);
    let o = v[out].take().expect("distinct output slot");
    let r = v.map(|x| x.map(|m| &*m));
    (r[base].expect("base slot"), r[eval].expect("eval slot"), o)
}

type Overrides = Vec<[Option<Vec<f64>>; 6]>;

/// A running simulation on a cube tree.
pub struct Simulation {
    pub cfg: SimConfig,
    pub tree: CubeTree,
    plan: ExchangePlan,
    pub bases: Vec<BaseState>,
    pub cubes: Vec<Option<CubeState>>,
    /// Buffer index of (prev, cur, next) per level.
    slots: Vec<[usize; 3]>,
    nsteps: Vec<u64>,
    pub dt: f64,
    pub time: f64,
    pub step: u64,
    mass0: f64,
    filter_density: bool,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        let tree = build_cube_tree_with(&cfg.domain, &cfg.terrain, cfg.refine)?;
        let lmax = tree.max_level();
        let dt = match cfg.dt {
            Some(dt) if dt > 0.0 => dt,
            Some(dt) => return Err(Error::Config(format!("time step must be positive, got {dt}"))),
            None => {
                let umax = cfg.u_ref.iter().map(|v| v * v).sum::<f64>().sqrt();
                cfl_timestep(&cfg.atm, tree.spacing(lmax), umax, cfg.safety)? * (1u64 << lmax) as f64
            }
        };
        if !(cfg.ra_nu >= 0.0 && cfg.ra_nu < 0.5) {
            return Err(Error::Config(format!("filter coefficient {} outside [0, 0.5)", cfg.ra_nu)));
        }
        let block = tree.block();
        let g = block.ghost as i64;
        let bases: Vec<BaseState> = (0..=lmax)
            .map(|l| {
                let nz = tree.spec.cells_at(l)[2];
                build_base_state(cfg.atm, tree.spacing(l), -g, (nz + 2 * g + 1) as usize)
            })
            .collect();
        let plan = tree.exchange_plan();
        let n = block.n;
        let built: Vec<Result<Option<CubeState>>> = (0..tree.cubes.len())
            .into_par_iter()
            .map(|id| {
                let c = &tree.cubes[id];
                if !c.is_fluid() {
                    return Ok(None);
                }
                let nz = tree.spec.cells_at(c.level)[2];
                let geom = CubeGeometry::build(&cfg.terrain, block, c.origin, c.spacing, nz, cfg.n_sub)?;
                let compute = tree.compute_box(id);
                let merge = build_merge_map(&geom, nz, &compute)?;
                let req = compute.grow(1);
                let bplan = build_boundary_plan(&geom, &merge, cfg.max_search, |i, j| {
                    i >= req.lo[0] && i <= req.hi[0] && j >= req.lo[1] && j <= req.hi[1]
                })?;
                let mut fine_faces = [None; 6];
                let mut coarse_faces = [false; 6];
                for f in 0..6 {
                    match tree.face_link(id, f / 2, f % 2) {
                        FaceLink::Finer(ids) => fine_faces[f] = Some(ids),
                        FaceLink::Coarser(_) => coarse_faces[f] = true,
                        _ => {}
                    }
                }
                let face_buf = |on: bool| if on { vec![0.0; n * n] } else { Vec::new() };
                Ok(Some(CubeState {
                    id,
                    level: c.level,
                    compute,
                    buf: [Fields::zeros(&block), Fields::zeros(&block), Fields::zeros(&block)],
                    record: std::array::from_fn(|f| face_buf(coarse_faces[f])),
                    record_stamp: [u64::MAX; 6],
                    pending: std::array::from_fn(|f| face_buf(fine_faces[f].is_some())),
                    fine_faces,
                    coarse_faces,
                    geom,
                    merge,
                    bplan,
                }))
            })
            .collect();
        let mut cubes = Vec::with_capacity(built.len());
        for (id, r) in built.into_iter().enumerate() {
            cubes.push(r.ctx(|| format!("cube {id}"))?);
        }
        let nlev = lmax as usize + 1;
        let mut sim = Self {
            filter_density: lmax == 0,
            cfg,
            tree,
            plan,
            bases,
            cubes,
            slots: vec![[0, 1, 2]; nlev],
            nsteps: vec![0; nlev],
            dt,
            time: 0.0,
            step: 0,
            mass0: 0.0,
        };
        let u0 = sim.cfg.u_ref;
        sim.init_with(|_| (u0, 0.0, 0.0));
        Ok(sim)
    }

    pub fn max_level(&self) -> u32 {
        self.tree.max_level()
    }

    /// Time step of level `l`.
    pub fn level_dt(&self, l: u32) -> f64 {
        self.dt / (1u64 << l) as f64
    }

    /// Whether ρ′ takes part in the time filter (single-level trees only).
    pub fn filters_density(&self) -> bool {
        self.filter_density
    }

    pub fn set_filter_density(&mut self, on: bool) {
        self.filter_density = on;
    }

    /// Buffer index of the current time level of `level`.
    pub fn cur_slot(&self, level: u32) -> usize {
        self.slots[level as usize][1]
    }

    /// Current fields of a cube.
    pub fn current(&self, id: usize) -> Option<&Fields> {
        let c = self.cubes[id].as_ref()?;
        Some(&c.buf[self.cur_slot(c.level)])
    }

    /// Reinitialise the state from a function of position returning
    /// (velocity, p′, ρ′). Velocities are sampled at corners, scalars at cell
    /// centres. Resets the time and the mass reference.
    pub fn init_with(&mut self, f: impl Fn([f64; 3]) -> ([f64; 3], f64, f64) + Sync) {
        let bases = &self.bases;
        for l in 0..self.slots.len() {
            self.slots[l] = [0, 1, 2];
            self.nsteps[l] = 0;
        }
        self.cubes.par_iter_mut().flatten().for_each(|c| {
            let b = c.geom.block;
            let d = c.geom.spacing;
            let o = c.geom.origin;
            let base = &bases[c.level as usize];
            let fld = &mut c.buf[1];
            let frame = IndexBox { lo: [b.lo(); 3], hi: [b.hi(); 3] };
            for p in frame.iter() {
                let q = b.idx(p[0], p[1], p[2]);
                let g = [0, 1, 2].map(|a| (o[a] + p[a]) as f64 * d);
                let (_, pp, rr) = f(g.map(|v| v + 0.5 * d));
                if c.geom.vol[q] > 0.0 {
                    fld.p[q] = pp;
                    fld.r[q] = rr;
                }
                let (u, _, _) = f(g);
                let rho = base.rho_n[base.at(o[2] + p[2])];
                for a in 0..3 {
                    fld.u[a][q] = u[a];
                    fld.m[a][q] = rho * u[a];
                }
            }
        });
        self.exchange(Target::Cur, |_, _| true);
        let bases = &self.bases;
        let bc = self.cfg.surface;
        self.cubes.par_iter_mut().flatten().for_each(|c| {
            let base = &bases[c.level as usize];
            // velocities at regular corners come from the sampled field
            let fld = &mut c.buf[1];
            let b = c.geom.block;
            let o = c.geom.origin;
            for a in 0..3 {
                for q in 0..b.len() {
                    if c.merge.vel[q] == VelClass::Regular {
                        let p = b.coords(q);
                        let rc = corner_density(&b, base, o[2] + p[2], &fld.r, q);
                        fld.m[a][q] = rc * fld.u[a][q];
                    }
                }
            }
            finish(c, 1, base, bc);
            c.buf[0] = c.buf[1].clone();
            c.buf[2] = c.buf[1].clone();
        });
        self.time = 0.0;
        self.step = 0;
        self.mass0 = self.mass().0;
    }

    /// (Σρ′V, total mass) over active hosts of all cube interiors.
    pub fn mass(&self) -> (f64, f64) {
        let parts: Vec<(f64, f64)> = self
            .cubes
            .par_iter()
            .map(|c| {
                let Some(c) = c else { return (0.0, 0.0) };
                let b = c.geom.block;
                let base = &self.bases[c.level as usize];
                let f = &c.buf[self.slots[c.level as usize][1]];
                let n = b.n as i64;
                let (mut pert, mut total) = (0.0, 0.0);
                for p in (IndexBox { lo: [0; 3], hi: [n; 3] }).iter() {
                    let q = b.idx(p[0], p[1], p[2]);
                    let v = c.geom.vol[q];
                    if v > 0.0 {
                        total += base.rho_c[base.at(c.geom.origin[2] + p[2])] * v;
                    }
                    if c.merge.role[q] == CellRole::Active {
                        pert += f.r[q] * c.merge.group_volume[q];
                    }
                }
                (pert, total + pert)
            })
            .collect();
        parts.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1))
    }

    /// Relative drift of Σρ′V since initialisation.
    pub fn mass_drift(&self) -> f64 {
        let (pert, total) = self.mass();
        (pert - self.mass0).abs() / total
    }

    /// max |w| over wet interior corners.
    pub fn max_w(&self) -> f64 {
        self.cubes
            .par_iter()
            .map(|c| {
                let Some(c) = c else { return 0.0 };
                let b = c.geom.block;
                let f = &c.buf[self.slots[c.level as usize][1]];
                let n = b.n as i64;
                (IndexBox { lo: [0; 3], hi: [n; 3] })
                    .iter()
                    .map(|p| b.idx(p[0], p[1], p[2]))
                    .filter(|&q| c.merge.vel[q].is_wet())
                    .map(|q| f.u[2][q].abs())
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max)
    }

    /// Advance one level-0 step (with all finer substeps).
    pub fn advance(&mut self) -> Result<StepReport> {
        let t0 = Instant::now();
        self.advance_level(0).ctx(|| format!("step {}", self.step))?;
        self.step += 1;
        self.time += self.dt;
        for c in self.cubes.iter().flatten() {
            if !c.buf[self.cur_slot(c.level)].is_finite() {
                return Err(Error::BlowUp {
                    step: self.step,
                    detail: format!("non-finite values in cube {} (level {})", c.id, c.level),
                });
            }
        }
        let (_, total) = self.mass();
        let report = StepReport {
            step: self.step,
            time: self.time,
            dt: self.dt,
            max_w: self.max_w(),
            total_mass: total,
            mass_drift: self.mass_drift(),
            wall: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "step {} t={:.3} dt={:.4} max|w|={:.4e} mass={:.10e} wall={:.3}s",
            report.step,
            report.time,
            report.dt,
            report.max_w,
            report.total_mass,
            report.wall
        );
        Ok(report)
    }

    fn advance_level(&mut self, l: u32) -> Result<()> {
        if l < self.max_level() {
            self.advance_level(l + 1)?;
            self.advance_level(l + 1)?;
        }
        self.step_level(l)
    }

    fn dyn_params(&self) -> DynParams {
        DynParams {
            consts: self.cfg.atm.consts,
            diffusion: self.cfg.diffusion,
            sponge: self.cfg.sponge,
            u_ref: self.cfg.u_ref,
        }
    }

    fn step_level(&mut self, l: u32) -> Result<()> {
        let li = l as usize;
        let startup = self.nsteps[li] == 0;
        let overrides = if l < self.max_level() {
            self.build_overrides(l, startup)?
        } else {
            Vec::new()
        };
        let dt = self.level_dt(l);
        let [ip, ic, inx] = self.slots[li];
        if startup {
            self.kernel_sweep(l, [ic, ic, inx], 0.5 * dt, dt, &overrides, false);
            self.exchange(Target::StartupNext, |dl, _| dl == l);
            self.finish_level(l, inx);
            self.kernel_sweep(l, [ic, inx, ip], dt, dt, &overrides, false);
            self.slots[li] = [ic, ip, inx];
        } else {
            let record = l > 0 && self.nsteps[li] % 2 == 1;
            self.kernel_sweep(l, [ip, ic, inx], 2.0 * dt, dt, &overrides, record);
            self.filter_level(l, [ip, ic, inx]);
            self.slots[li] = [ic, inx, ip];
        }
        self.nsteps[li] += 1;
        let stage = move |dl: u32, e: &GhostEntry| {
            (dl == l && e.owner_level >= l) || (dl == l + 1 && e.owner_level == l)
        };
        self.exchange(Target::Cur, stage);
        self.exchange(Target::Prev, stage);
        for lv in [l, l + 1] {
            if lv <= self.max_level() {
                let [p, c, _] = self.slots[lv as usize];
                self.finish_level(lv, p);
                self.finish_level(lv, c);
            }
        }
        Ok(())
    }

    /// Coarse-side replacement fluxes from the fine cubes' second substep.
    fn build_overrides(&mut self, l: u32, startup: bool) -> Result<Overrides> {
        let li = l as usize;
        let fine_steps = self.nsteps[li + 1];
        if fine_steps != 2 * (self.nsteps[li] + 1) {
            return Err(Error::Sequencing(format!(
                "level {} has taken {fine_steps} steps before coarse step {} of level {l}",
                l + 1,
                self.nsteps[li]
            )));
        }
        let stamp = fine_steps - 1;
        let n = self.tree.block().n;
        let half = n / 2;
        let cubes = &self.cubes;
        let sums: Vec<Result<[Option<Vec<f64>>; 6]>> = cubes
            .par_iter()
            .map(|c| {
                let mut out: [Option<Vec<f64>>; 6] = Default::default();
                let Some(c) = c else { return Ok(out) };
                if c.level != l {
                    return Ok(out);
                }
                for f in 0..6 {
                    let Some(ids) = c.fine_faces[f] else { continue };
                    let ff = 2 * (f / 2) + (1 - f % 2);
                    let mut cur = vec![0.0; n * n];
                    for q in 0..4 {
                        let fc = cubes[ids[q]].as_ref().expect("fine neighbour is fluid");
                        if fc.record_stamp[ff] != stamp {
                            return Err(Error::Sequencing(format!(
                                "interface flux of cube {} consumed before its second substep",
                                fc.id
                            )));
                        }
                    }
                    for b in 0..n {
                        for a in 0..n {
                            let (qa, qb) = (a / half, b / half);
                            let rec = &cubes[ids[qa + 2 * qb]].as_ref().expect("fluid").record[ff];
                            let (fa, fb) = (2 * a - qa * n, 2 * b - qb * n);
                            cur[a + b * n] = rec[fa + fb * n]
                                + rec[fa + 1 + fb * n]
                                + rec[fa + (fb + 1) * n]
                                + rec[fa + 1 + (fb + 1) * n];
                        }
                    }
                    out[f] = Some(cur);
                }
                Ok(out)
            })
            .collect();
        let mut overrides = Vec::with_capacity(sums.len());
        for (c, s) in self.cubes.iter_mut().zip(sums) {
            let mut s = s?;
            if let Some(c) = c {
                for f in 0..6 {
                    if let Some(cur) = s[f].as_mut() {
                        let pend = &mut c.pending[f];
                        if !startup {
                            for (v, p) in cur.iter_mut().zip(pend.iter_mut()) {
                                let fresh = *v;
                                *v = 0.5 * (*p + fresh);
                                *p = fresh;
                            }
                        } else {
                            pend.copy_from_slice(cur);
                        }
                    }
                }
            }
            overrides.push(s);
        }
        Ok(overrides)
    }

    fn kernel_sweep(&mut self, l: u32, [ib, ie, io]: [usize; 3], factor: f64, dt: f64, ov: &Overrides, record: bool) {
        let params = self.dyn_params();
        let base = &self.bases[l as usize];
        let stamp = self.nsteps[l as usize];
        self.cubes.par_iter_mut().enumerate().for_each(|(id, c)| {
            let Some(c) = c else { return };
            if c.level != l {
                return;
            }
            let ctx = CubeCtx { geom: &c.geom, merge: &c.merge, base, compute: c.compute };
            let (fb, fe, fo) = split3(&mut c.buf, ib, ie, io);
            let mut iface = InterfaceIo::default();
            if let Some(o) = ov.get(id) {
                for f in 0..6 {
                    iface.overrides[f] = o[f].as_deref();
                }
            }
            if record {
                for (f, rec) in c.record.iter_mut().enumerate() {
                    if c.coarse_faces[f] {
                        iface.record[f] = Some(rec);
                        c.record_stamp[f] = stamp;
                    }
                }
            }
            step_kernel(&ctx, &params, fb, fe, factor, dt, fo, &mut iface);
        });
    }

    fn filter_level(&mut self, l: u32, [ip, ic, inx]: [usize; 3]) {
        let nu = self.cfg.ra_nu;
        if nu == 0.0 {
            return;
        }
        let with_r = self.filter_density;
        self.cubes.par_iter_mut().flatten().filter(|c| c.level == l).for_each(|c| {
            let b = c.geom.block;
            let [fp, fc, fnx] = c.buf.each_mut();
            let apply = |p: &Vec<f64>, cur: &mut Vec<f64>, nx: &Vec<f64>| {
                for q in c.compute.iter() {
                    let i = b.idx(q[0], q[1], q[2]);
                    cur[i] = ra_filter(p[i], cur[i], nx[i], nu);
                }
            };
            let (p, cur, nx) = pick3(fp, fc, fnx, ip, ic, inx);
            apply(&p.p, &mut cur.p, &nx.p);
            if with_r {
                apply(&p.r, &mut cur.r, &nx.r);
            }
            for a in 0..3 {
                apply(&p.m[a], &mut cur.m[a], &nx.m[a]);
            }
        });
    }

    fn finish_level(&mut self, l: u32, slot: usize) {
        let base = &self.bases[l as usize];
        let bc = self.cfg.surface;
        self.cubes
            .par_iter_mut()
            .flatten()
            .filter(|c| c.level == l)
            .for_each(|c| finish(c, slot, base, bc));
    }

    /// Fill ghosts of p′, ρ′ and momentum for one time level.
    /// Fill ghosts of p′, ρ′ and momentum for one time level. Corners filled
    /// by interpolation from a coarser cube interpolate velocity and rebuild
    /// momentum with the local density, so that uniform flow stays uniform.
    fn exchange(&mut self, target: Target, filter: impl Fn(u32, &GhostEntry) -> bool + Sync) {
        let cubes = &self.cubes;
        let slots = &self.slots;
        let plan = &self.plan;
        let bases = &self.bases;
        let read = |src: usize, mode: Src, get: &dyn Fn(&CubeState, &Fields) -> [f64; 3]| -> [f64; 3] {
            let c = cubes[src].as_ref().expect("exchange source is fluid");
            let s = slots[c.level as usize];
            match mode {
                Src::Slot(k) => get(c, &c.buf[s[k]]),
                Src::Avg => {
                    let (a, b) = (get(c, &c.buf[s[0]]), get(c, &c.buf[s[1]]));
                    [0, 1, 2].map(|i| 0.5 * (a[i] + b[i]))
                }
            }
        };
        type Vals = Vec<(u32, [f64; 3], bool)>;
        let gathered: Vec<(Vals, Vals)> = (0..cubes.len())
            .into_par_iter()
            .map(|id| {
                let Some(c) = &cubes[id] else { return Default::default() };
                let ex = &plan.cubes[id];
                let collect = |entries: &[GhostEntry], corner: bool| -> Vals {
                    entries
                        .iter()
                        .filter(|e| filter(c.level, e))
                        .filter_map(|e| {
                            let mode = source_mode(target, e.rel)?;
                            let vel = corner && e.rel == Relation::Coarser;
                            let mut v = [0.0; 3];
                            for s in ex.sources_of(e) {
                                let i = s.idx as usize;
                                let x = if vel {
                                    read(s.cube as usize, mode, &|sc: &CubeState, f: &Fields| {
                                        corner_velocity(sc, &bases[sc.level as usize], f, i)
                                    })
                                } else if corner {
                                    read(s.cube as usize, mode, &|_: &CubeState, f: &Fields| {
                                        [f.m[0][i], f.m[1][i], f.m[2][i]]
                                    })
                                } else {
                                    read(s.cube as usize, mode, &|_: &CubeState, f: &Fields| [f.p[i], f.r[i], 0.0])
                                };
                                for a in 0..3 {
                                    v[a] += s.w * x[a];
                                }
                            }
                            Some((e.dst, v, vel))
                        })
                        .collect()
                };
                (collect(&ex.cells, false), collect(&ex.corners, true))
            })
            .collect();
        let role = match target {
            Target::Prev => 0,
            Target::Cur => 1,
            Target::StartupNext => 2,
        };
        let slots = self.slots.clone();
        let bases = &self.bases;
        self.cubes.par_iter_mut().zip(gathered).for_each(|(c, (cells, corners))| {
            let Some(c) = c else { return };
            let f = &mut c.buf[slots[c.level as usize][role]];
            for (d, v, _) in cells {
                f.p[d as usize] = v[0];
                f.r[d as usize] = v[1];
            }
            let b = c.geom.block;
            let base = &bases[c.level as usize];
            for (d, v, vel) in corners {
                let q = d as usize;
                if vel {
                    let p = b.coords(q);
                    let gk = c.geom.origin[2] + p[2];
                    let rho = if p.iter().all(|&x| x > b.lo()) {
                        corner_density(&b, base, gk, &f.r, q)
                    } else {
                        base.rho_n[base.at(gk)]
                    };
                    for a in 0..3 {
                        f.u[a][q] = v[a];
                        f.m[a][q] = rho * v[a];
                    }
                } else {
                    for a in 0..3 {
                        f.m[a][q] = v[a];
                    }
                }
            }
        });
    }
}

/// Velocity at a corner from current momentum where it is integrated, or the
/// last diagnosed value elsewhere.
fn corner_velocity(c: &CubeState, base: &BaseState, f: &Fields, q: usize) -> [f64; 3] {
    let b = c.geom.block;
    let p = b.coords(q);
    if c.merge.vel[q] == VelClass::Regular && p.iter().all(|&x| x > b.lo()) {
        let rc = corner_density(&b, base, c.geom.origin[2] + p[2], &f.r, q);
        [0, 1, 2].map(|a| f.m[a][q] / rc)
    } else {
        [f.u[0][q], f.u[1][q], f.u[2][q]]
    }
}

fn pick3<'a>(
    a: &'a mut Fields,
    b: &'a mut Fields,
    c: &'a mut Fields,
    ip: usize,
    ic: usize,
    inx: usize,
) -> (&'a Fields, &'a mut Fields, &'a Fields) {
    let mut v = [Some(a), Some(b), Some(c)];
    let cur = v[ic].take().expect("distinct slots");
    let r = v.map(|x| x.map(|m| &*m));
    (r[ip].expect("prev slot"), cur, r[inx].expect("next slot"))
}

fn corner_density(b: &crate::grid::Block, base: &BaseState, gk: i64, r: &[f64], q: usize) -> f64 {
    let st = b.strides();
    let avg = 0.125
        * (r[q]
            + r[q - st[0]]
            + r[q - st[1]]
            + r[q - st[0] - st[1]]
            + r[q - st[2]]
            + r[q - st[0] - st[2]]
            + r[q - st[1] - st[2]]
            + r[q - st[0] - st[1] - st[2]]);
    base.rho_n[base.at(gk)] + avg
}

/// Make one time level self-consistent: absorbed cells take their host
/// values, regular velocities are recovered from momentum, the remaining
/// velocities are diagnosed, and momentum is refreshed where it is diagnosed.
fn finish(c: &mut CubeState, slot: usize, base: &BaseState, bc: SurfaceCondition) {
    let b = c.geom.block;
    let mm = &c.merge;
    let f = &mut c.buf[slot];
    for q in 0..b.len() {
        if mm.role[q] == CellRole::Absorbed {
            let h = mm.host[q] as usize;
            f.p[q] = f.p[h];
            f.r[q] = f.r[h];
        }
    }
    let o = c.geom.origin;
    let inner = IndexBox { lo: [b.lo() + 1; 3], hi: [b.hi(); 3] };
    for p in inner.iter() {
        let q = b.idx(p[0], p[1], p[2]);
        match mm.vel[q] {
            VelClass::Regular => {
                let rc = corner_density(&b, base, o[2] + p[2], &f.r, q);
                for a in 0..3 {
                    f.u[a][q] = f.m[a][q] / rc;
                }
            }
            VelClass::Outside => {
                for a in 0..3 {
                    f.u[a][q] = 0.0;
                    f.m[a][q] = 0.0;
                }
            }
            _ => {}
        }
    }
    apply_boundary_velocities(&mut f.u, &c.bplan, bc);
    for p in inner.iter() {
        let q = b.idx(p[0], p[1], p[2]);
        if !matches!(mm.vel[q], VelClass::Regular | VelClass::Outside | VelClass::Unknown) {
            let rho = base.rho_n[base.at(o[2] + p[2])];
            for a in 0..3 {
                f.m[a][q] = rho * f.u[a][q];
            }
        }
    }
}

/// Rayon pool sized from an explicit count or the `CUTCELL_WORKERS`
/// environment variable (all cores when neither is set).
pub fn worker_pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let n = match workers {
        Some(n) => n,
        None => match std::env::var("CUTCELL_WORKERS") {
            Ok(s) => s
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("CUTCELL_WORKERS must be a positive integer, got {s:?}")))?,
            Err(_) => 0,
        },
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_tendency_leapfrog_and_filter() {
        let v = leapfrog_update(3.0, 0.0, 0.7);
        assert_eq!(v, 3.0);
        assert_eq!(ra_filter(2.0, 2.0, 2.0, 0.1), 2.0);
        assert_eq!(ra_filter(1.0, 5.0, 3.0, 0.0), 5.0);
    }

    #[test]
    fn linear_decay_follows_leapfrog_roots() {
        // φ' = −λφ: leapfrog roots r = −λdt ± √(1 + (λdt)²)
        let (lambda, dt): (f64, f64) = (0.1, 0.1);
        let x = lambda * dt;
        let phys = -x + (1.0 + x * x).sqrt();
        let comp = -x - (1.0 + x * x).sqrt();
        let (mut p, mut c) = (1.0, phys);
        for _ in 0..50 {
            let nx = leapfrog_update(p, -lambda * c, dt);
            p = c;
            c = nx;
        }
        assert!((c - phys.powi(51)).abs() < 1e-12);
        // a computational-mode start keeps alternating without the filter and
        // is damped to the physical mode with it
        let run = |nu: f64| {
            let (mut p, mut c) = (1.0, comp);
            for _ in 0..40 {
                let nx = leapfrog_update(p, -lambda * c, dt);
                p = ra_filter(p, c, nx, nu);
                c = nx;
            }
            (p, c)
        };
        let (p0, c0) = run(0.0);
        assert!((c0.abs() - comp.abs().powi(41)).abs() < 1e-9 * c0.abs());
        assert!(p0 * c0 < 0.0);
        let (p1, c1) = run(0.1);
        assert!(p1 * c1 > 0.0);
        assert!(c1.abs() < 0.1 * c0.abs());
    }

    #[test]
    fn cfl_examples() {
        let atm = Atmosphere::new(300.0, 0.01, Default::default()).unwrap();
        let dt = cfl_timestep(&atm, 200.0, 10.0, 0.5).unwrap();
        let cs = atm.sound_speed(0.0);
        assert!((cs - 347.2).abs() < 0.5);
        assert!((dt - 0.5 * 200.0 / (cs + 10.0) * 0.5).abs() < 1e-15);
        assert!((dt - 0.14).abs() < 0.005);
        let dt2 = cfl_timestep(&atm, 400.0, 10.0, 0.5).unwrap();
        assert!((dt2 - 2.0 * dt).abs() < 1e-15);
        assert!(cfl_timestep(&atm, 200.0, 10.0, 0.0).unwrap_err().is_config());
    }
}
