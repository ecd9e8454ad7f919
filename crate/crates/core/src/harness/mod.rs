//! Scenarios, configuration, diagnostics and output around the solver.

pub mod config;
pub mod diagnostics;
pub mod output;
pub mod scenario;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Result, ResultExt};
use crate::grid::mesh_report;
use crate::timeint::{worker_pool, Simulation};

use config::Config;
use diagnostics::free_slip_residual;
use output::{append_line, slice_csv, Plane, Snapshot};
use scenario::{max_slope_angle, RunSpec};

/// Outcome of a completed run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps: u64,
    pub dt: f64,
    pub time: f64,
    pub max_w: f64,
    pub mass_drift: f64,
    /// Largest normal-flow ratio over all written snapshots.
    pub free_slip: f64,
    pub snapshots: Vec<PathBuf>,
    pub wall: f64,
}

/// Resolve a configuration file into a run specification and the metadata echo.
pub fn load_run(path: &Path) -> Result<(RunSpec, Config)> {
    let mut cfg = Config::load(path)?;
    let spec = RunSpec::from_config(&mut cfg).ctx(|| format!("configuration {}", path.display()))?;
    Ok((spec, cfg))
}

/// Mesh and geometry summary without time stepping.
pub fn mesh(spec: &RunSpec) -> Result<String> {
    let pool = worker_pool(spec.workers)?;
    let sim = pool.install(|| Simulation::new(spec.sim.clone()))?;
    let mut s = mesh_report(&sim.tree);
    let (mut cut, mut min_frac) = (0usize, f64::INFINITY);
    for c in sim.cubes.iter().flatten() {
        cut += c.geom.n_cut;
        if c.geom.n_cut > 0 {
            min_frac = min_frac.min(c.geom.min_cut_fraction);
        }
    }
    let _ = writeln!(s, "cut cells {cut}");
    if cut > 0 {
        let _ = writeln!(s, "smallest cut fraction {min_frac:.3e}");
    }
    let finest = sim.tree.spacing(sim.max_level());
    let _ = writeln!(s, "max slope {:.2} deg at {finest} m", max_slope_angle(&spec.sim.terrain, finest));
    let _ = writeln!(s, "dt {} s (level 0)", sim.dt);
    Ok(s)
}

/// Execute a run: build, initialise, step, and write metadata, log, snapshots
/// and slices under `spec.output_dir`.
pub fn run(spec: &RunSpec, cfg: &Config) -> Result<RunSummary> {
    let pool = worker_pool(spec.workers)?;
    pool.install(|| run_inner(spec, cfg)).ctx(|| format!("scenario {}", spec.scenario.kind.name()))
}

fn run_inner(spec: &RunSpec, cfg: &Config) -> Result<RunSummary> {
    let t0 = Instant::now();
    let dir = &spec.output_dir;
    fs::create_dir_all(dir)?;
    let mut sim = Simulation::new(spec.sim.clone())?;
    let steps = spec.steps.unwrap_or_else(|| (spec.scenario.run_time / sim.dt).ceil() as u64);
    let mut meta = cfg.to_text();
    let _ = writeln!(meta, "derived.dt = {}", sim.dt);
    let _ = writeln!(meta, "derived.steps = {steps}");
    let _ = writeln!(meta, "derived.max_level = {}", sim.max_level());
    let _ = writeln!(meta, "derived.cubes = {:?}", sim.tree.count_per_level());
    let _ = writeln!(meta, "derived.filter_density = {}", sim.filters_density());
    let _ = writeln!(meta, "derived.hill_top = {}", spec.scenario.hill_top());
    fs::write(dir.join("metadata.txt"), meta)?;
    let log_path = dir.join("run.log");
    fs::write(&log_path, "step time dt max_w total_mass mass_drift wall\n")?;
    let planes = spec.slices.iter().map(|s| Plane::parse(s)).collect::<Result<Vec<_>>>()?;

    let mut summary = RunSummary {
        steps,
        dt: sim.dt,
        time: 0.0,
        max_w: sim.max_w(),
        mass_drift: 0.0,
        free_slip: 0.0,
        snapshots: Vec::new(),
        wall: 0.0,
    };
    let write = |sim: &Simulation, summary: &mut RunSummary| -> Result<()> {
        let snap = Snapshot::capture(sim);
        let sdir = dir.join(format!("fields_{:06}", sim.step));
        snap.write(&sdir)?;
        for p in &planes {
            fs::write(sdir.join(format!("slice_{}.csv", p.label())), slice_csv(&snap.slice(*p)))?;
        }
        if spec.vtk {
            snap.write_vtk(&sdir.join("vtk"))?;
        }
        summary.free_slip = summary.free_slip.max(free_slip_residual(sim));
        summary.snapshots.push(sdir);
        Ok(())
    };
    write(&sim, &mut summary)?;
    for _ in 0..steps {
        let r = sim.advance()?;
        append_line(
            &log_path,
            &format!(
                "{} {:.3} {} {:.6e} {:.12e} {:.3e} {:.3}",
                r.step, r.time, r.dt, r.max_w, r.total_mass, r.mass_drift, r.wall
            ),
        )?;
        summary.max_w = r.max_w;
        summary.mass_drift = r.mass_drift;
        if spec.output_every > 0 && r.step % spec.output_every == 0 && r.step < steps {
            write(&sim, &mut summary)?;
        }
    }
    write(&sim, &mut summary)?;
    summary.time = sim.time;
    summary.wall = t0.elapsed().as_secs_f64();
    Ok(summary)
}

/// Resolved settings of a finished run.
pub fn run_metadata(run_dir: &Path) -> Result<Config> {
    Config::load(&run_dir.join("metadata.txt"))
}

/// Latest snapshot of a run.
pub fn latest_snapshot(run_dir: &Path) -> Result<Snapshot> {
    let dirs = output::snapshot_dirs(run_dir)?;
    let last = dirs
        .last()
        .ok_or_else(|| crate::Error::Config(format!("no snapshots in {}", run_dir.display())))?;
    Snapshot::read(last)
}

/// Lee wavelength along the hill centreline of the latest snapshot at height `z`.
pub fn run_wavelength(run_dir: &Path, z: f64) -> Result<Option<f64>> {
    let mut meta = run_metadata(run_dir)?;
    let xc: f64 = meta.get("scenario.xc", 0.0)?;
    let yc: f64 = meta.get("scenario.yc", 0.0)?;
    let snap = latest_snapshot(run_dir)?;
    Ok(centerline_wavelength(&snap, z, xc, yc))
}

/// Lee wavelength from w on the plane `z`, along the row closest to `y = yc`.
pub fn centerline_wavelength(snap: &Snapshot, z: f64, xc: f64, yc: f64) -> Option<f64> {
    let rows = snap.slice(Plane { axis: 2, value: z });
    let y = rows.iter().map(|r| r[1]).min_by(|a, b| (a - yc).abs().total_cmp(&(b - yc).abs()))?;
    let samples: Vec<(f64, f64)> = rows.iter().filter(|r| r[1] == y).map(|r| (r[0], r[5])).collect();
    diagnostics::lee_wavelength(&samples, xc)
}

/// (L1, L2) norms of the u and w differences between two snapshots at their
/// coincident corners at or above `z_min`.
pub fn compare_snapshots(num: &Snapshot, reference: &Snapshot, z_min: f64) -> Result<[(f64, f64); 2]> {
    let a = num.corner_velocities(z_min);
    let b = reference.corner_velocities(z_min);
    let (mut un, mut ur, mut wn, mut wr) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (k, va) in &a {
        if let Some(vb) = b.get(k) {
            un.push(va[0]);
            ur.push(vb[0]);
            wn.push(va[2]);
            wr.push(vb[2]);
        }
    }
    Ok([diagnostics::error_norms(&un, &ur)?, diagnostics::error_norms(&wn, &wr)?])
}

/// [`compare_snapshots`] on the latest snapshots of two runs, above the hill top.
pub fn compare_runs(run_dir: &Path, ref_dir: &Path) -> Result<[(f64, f64); 2]> {
    let mut meta = run_metadata(run_dir)?;
    let top: f64 = meta.get("derived.hill_top", 0.0)?;
    compare_snapshots(&latest_snapshot(run_dir)?, &latest_snapshot(ref_dir)?, top)
}
