//! Acceptance suite: one PASS/FAIL/NOT RUN line per criterion.
//!
//! Criteria whose runs take hours on a desk machine are reported NOT RUN
//! unless `CUTCELL_ACCEPTANCE_FULL=1`. `CUTCELL_CRITERIA=1,3` restricts the
//! suite to the listed criteria.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use cutcell::grid::build_cube_tree;
use cutcell::harness::config::Config;
use cutcell::harness::output::{Plane, Snapshot};
use cutcell::harness::scenario::RunSpec;
use cutcell::harness::{self, diagnostics, RunSummary};
use cutcell::terrain::{cut_geometry, BilinearPatch};
use rand::{Rng, SeedableRng};

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

type Criterion = (u32, &'static str, bool, fn(&Path) -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

/// Run a configuration given as text into `dir`.
fn run_text(text: &str, dir: &Path) -> Result<(RunSpec, RunSummary), cutcell::Error> {
    let mut cfg = Config::parse(&format!("{text}\noutput.dir = {}\n", dir.display()))?;
    let spec = RunSpec::from_config(&mut cfg)?;
    let summary = harness::run(&spec, &cfg)?;
    Ok((spec, summary))
}

/// Fraction of `samples` uniform points of the cell lying above the patch,
/// with its binomial standard error.
fn monte_carlo_fraction(patch: &BilinearPatch, d: f64, samples: usize, rng: &mut impl Rng) -> (f64, f64) {
    let mut inside = 0usize;
    for _ in 0..samples {
        let (x, y, z) = (rng.gen::<f64>() * d, rng.gen::<f64>() * d, rng.gen::<f64>() * d);
        inside += (z > patch.eval(x, y)) as usize;
    }
    let f = inside as f64 / samples as f64;
    (f, (f * (1.0 - f) / samples as f64).sqrt())
}

fn criterion_1(_: &Path) -> Outcome {
    // separate streams so patches do not depend on how many samples were drawn
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let mut mc = rand_chacha::ChaCha8Rng::seed_from_u64(2025);
    let d = 100.0;
    let full = d * d * d;
    let (mut beyond, mut confirmed, mut worst_sigma) = (0usize, 0usize, 0.0f64);
    let (mut worst_rel, mut worst_sliver) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        // corner heights spread around the cell so that it is usually cut
        let h: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-0.5 * d..1.5 * d));
        let patch = BilinearPatch {
            m1: (h[1] - h[0]) / d,
            m2: (h[3] - h[2] - h[1] + h[0]) / (d * d),
            m3: (h[2] - h[0]) / d,
            c: h[0],
        };
        let v64 = cut_geometry(&patch, d, d, 0.0, d, 64).unwrap().volume;
        let v256 = cut_geometry(&patch, d, d, 0.0, d, 256).unwrap().volume;
        let z = |f: f64, s: f64| {
            let dev = (v64 - f * full).abs();
            if s > 0.0 { dev / (s * full) } else if dev == 0.0 { 0.0 } else { f64::INFINITY }
        };
        let (f, s) = monte_carlo_fraction(&patch, d, 1_000_000, &mut mc);
        let score = z(f, s);
        worst_sigma = worst_sigma.max(score);
        if score > 3.0 {
            // an unbiased volume lands beyond 3 sigma in 0.27% of draws; confirm
            // against an independent ten-times larger sample at its own 3 sigma
            beyond += 1;
            let (f2, s2) = monte_carlo_fraction(&patch, d, 10_000_000, &mut mc);
            confirmed += (z(f2, s2) > 3.0) as usize;
        }
        // accuracy is measured against the cell volume; slivers thinner than a
        // subcolumn carry large errors relative to their own tiny volume
        worst_rel = worst_rel.max((v64 - v256).abs() / full);
        if v256 > 0.0 {
            worst_sliver = worst_sliver.max((v64 - v256).abs() / v256);
        }
    }
    check(
        confirmed == 0 && worst_rel <= 5e-3,
        format!(
            "beyond 3 sigma: {beyond}/200 (worst {worst_sigma:.2}), confirmed by 1e7-sample recheck: {confirmed}; \
             worst n_sub 64 vs 256 deviation {:.4}% of cell volume ({:.2}% of the cut volume itself)",
            100.0 * worst_rel,
            100.0 * worst_sliver
        ),
    )
}

fn criterion_2(dir: &Path) -> Outcome {
    let cfg = "scenario.name = flat\ndomain.lx = 16000\ndomain.ly = 8000\ndomain.lz = 8000\n\
               grid.H = 400\ngrid.n = 20\nflow.U = 0\ntime.steps = 1000\n";
    match run_text(cfg, &dir.join("c2")) {
        Ok((_, s)) => {
            let snap = Snapshot::read(s.snapshots.last().unwrap()).unwrap();
            let max_p = snap
                .cubes
                .iter()
                .flat_map(|c| c.cells.iter())
                .filter(|v| v[0] > 0.0)
                .map(|v| v[1].abs())
                .fold(0.0, f64::max);
            let max_w = snap.cubes.iter().flat_map(|c| c.corners.iter()).map(|u| u[2].abs()).fold(0.0, f64::max);
            check(
                max_w <= 1e-10 && max_p <= 1e-6,
                format!("max|w| {max_w:.2e} m/s, max|p'| {max_p:.2e} Pa after {} steps ({:.0} s)", s.steps, s.wall),
            )
        }
        Err(e) => Outcome::Fail(e.to_string()),
    }
}

const HEMISPHERE: &str = "scenario.name = hemisphere\nscenario.r = 1000\ndomain.lx = 16000\ndomain.ly = 16000\n\
                          domain.lz = 8000\nflow.U = 10\nflow.N = 0.01\nboundary.surface = free-slip\n";

fn free_slip_note(s: &RunSummary) -> String {
    format!("free-slip residual {:.1e} over {} snapshots", s.free_slip, s.snapshots.len())
}

fn criterion_3(dir: &Path) -> Outcome {
    let cfg = format!("{HEMISPHERE}grid.H = 200\ngrid.n = 20\ntime.steps = 1000\noutput.every = 250\n");
    match run_text(&cfg, &dir.join("c3")) {
        Ok((_, s)) => {
            fs::write(dir.join("c3.free_slip"), format!("{:e}", s.free_slip)).ok();
            check(
                s.mass_drift <= 1e-10,
                format!("mass drift {:.2e} after {} steps ({:.0} s); {}", s.mass_drift, s.steps, s.wall, free_slip_note(&s)),
            )
        }
        Err(e) => Outcome::Fail(e.to_string()),
    }
}

fn criterion_4(dir: &Path) -> Outcome {
    // 1000 finest steps are 250 steps of the 400 m level
    let cfg = format!("{HEMISPHERE}grid.H = 400\ngrid.n = 10\ngrid.lmax = 2\ntime.steps = 250\noutput.every = 50\n");
    match run_text(&cfg, &dir.join("c4")) {
        Ok((spec, s)) => {
            fs::write(dir.join("c4.free_slip"), format!("{:e}", s.free_slip)).ok();
            let tree = build_cube_tree(&spec.sim.domain, &spec.sim.terrain).unwrap();
            check(
                s.mass_drift <= 1e-10 && tree.count_per_level().iter().all(|&c| c > 0),
                format!(
                    "mass drift {:.2e} after {} coarse steps, cubes per level {:?} ({:.0} s); {}",
                    s.mass_drift,
                    s.steps,
                    tree.count_per_level(),
                    s.wall,
                    free_slip_note(&s)
                ),
            )
        }
        Err(e) => Outcome::Fail(e.to_string()),
    }
}

const BELL: &str = "scenario.name = bell\nscenario.hm = 400\nscenario.a = 1000\ndomain.lx = 32000\ndomain.ly = 16000\n\
                    domain.lz = 12000\ngrid.H = 200\ngrid.n = 20\nflow.U = 10\nflow.N = 0.01\nsponge.base = 8000\n\
                    time.end = 3600\noutput.every = 3000\n";

fn max_abs_w(snap: &Snapshot, z: f64) -> f64 {
    snap.slice(Plane { axis: 2, value: z }).iter().map(|r| r[5].abs()).fold(0.0, f64::max)
}

fn criterion_5(dir: &Path) -> Outcome {
    let out = dir.join("c5");
    let s = match run_text(BELL, &out) {
        Ok((_, s)) => s,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    fs::write(dir.join("c5.free_slip"), format!("{:e}", s.free_slip)).ok();
    let snap = harness::latest_snapshot(&out).unwrap();
    let (xc, yc) = (16000.0, 8000.0);
    let lambda = harness::centerline_wavelength(&snap, 800.0, xc, yc);
    // U-shaped pattern: off-centre lee extrema beat the centreline extremum
    let rows = snap.slice(Plane { axis: 2, value: 2000.0 });
    let lee = |f: &dyn Fn(f64) -> bool| {
        rows.iter().filter(|r| r[0] > xc && f(r[1])).map(|r| r[5].abs()).fold(0.0, f64::max)
    };
    let centre = lee(&|y| (y - yc).abs() < 1.0);
    let (south, north) = (lee(&|y| y < yc - 1.0), lee(&|y| y > yc + 1.0));
    let ok_l = lambda.is_some_and(|l| (5500.0..=8500.0).contains(&l));
    check(
        ok_l && south > centre && north > centre,
        format!(
            "wavelength at 800 m {}, lee |w| at 2000 m centre {centre:.3} / sides {south:.3}, {north:.3} ({:.0} s)",
            lambda.map_or("undetectable".into(), |l| format!("{l:.0} m")),
            s.wall
        ),
    )
}

fn criterion_6(dir: &Path) -> Outcome {
    let out = dir.join("c6");
    let cfg = format!("{HEMISPHERE}grid.H = 200\ngrid.n = 20\nsponge.base = 6000\ntime.end = 3600\noutput.every = 3000\n");
    let s = match run_text(&cfg, &out) {
        Ok((_, s)) => s,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    fs::write(dir.join("c6.free_slip"), format!("{:e}", s.free_slip)).ok();
    let snap = harness::latest_snapshot(&out).unwrap();
    let lambda = harness::centerline_wavelength(&snap, 1200.0, 8000.0, 8000.0);
    let hemi = max_abs_w(&snap, 1200.0);
    let bell_dir = dir.join("c5");
    let bell = match harness::latest_snapshot(&bell_dir) {
        Ok(b) => b,
        Err(_) => match run_text(BELL, &bell_dir) {
            Ok(_) => harness::latest_snapshot(&bell_dir).unwrap(),
            Err(e) => return Outcome::Fail(format!("bell reference: {e}")),
        },
    };
    let bell_w = max_abs_w(&bell, 1200.0);
    check(
        lambda.is_some_and(|l| (5500.0..=8500.0).contains(&l)) && hemi > bell_w,
        format!(
            "no blow-up; wavelength at 1200 m {}, max|w| at 1200 m {hemi:.3} vs bell {bell_w:.3} ({:.0} s)",
            lambda.map_or("undetectable".into(), |l| format!("{l:.0} m")),
            s.wall
        ),
    )
}

fn criterion_7(dir: &Path) -> Outcome {
    let ridge = |d: f64| {
        format!(
            "scenario.name = cosine-ridge\nscenario.hm = 400\nscenario.a = 2000\nscenario.xc = 8000\n\
             domain.lx = 16000\ndomain.ly = {}\ndomain.lz = 8000\ngrid.H = {d}\ngrid.n = 8\nflow.U = 10\n\
             flow.N = 0.01\ntime.end = 600\n",
            8.0 * d
        )
    };
    let mut snaps = Vec::new();
    for d in [200.0, 100.0, 50.0, 25.0] {
        let out = dir.join(format!("c7_{d}"));
        if let Err(e) = run_text(&ridge(d), &out) {
            return Outcome::Fail(format!("spacing {d}: {e}"));
        }
        snaps.push(harness::latest_snapshot(&out).unwrap());
    }
    // compare in the y = 0 plane, where all resolutions have corners
    let plane = |s: &Snapshot| {
        let mut only = s.clone();
        only.cubes.retain(|c| c.origin[1] == 0);
        only
    };
    let reference = plane(&snaps[3]);
    let mut errs = [[Vec::new(), Vec::new()], [Vec::new(), Vec::new()]];
    for s in &snaps[..3] {
        let [(u1, u2), (w1, w2)] = match harness::compare_snapshots(&plane(s), &reference, 400.0) {
            Ok(v) => v,
            Err(e) => return Outcome::Fail(e.to_string()),
        };
        errs[0][0].push(u1);
        errs[0][1].push(u2);
        errs[1][0].push(w1);
        errs[1][1].push(w2);
    }
    let spacings = [200.0, 100.0, 50.0];
    let mut slopes = Vec::new();
    for e in errs.iter().flatten() {
        match diagnostics::convergence_order(e, &spacings) {
            Ok(s) => slopes.push(s),
            Err(e) => return Outcome::Fail(e.to_string()),
        }
    }
    check(
        slopes.iter().all(|&s| s >= 1.7),
        format!("slopes u L1/L2 {:.2}/{:.2}, w L1/L2 {:.2}/{:.2}", slopes[0], slopes[1], slopes[2], slopes[3]),
    )
}

fn criterion_8(dir: &Path) -> Outcome {
    let base = "scenario.name = hemisphere\nscenario.r = 1000\ndomain.lx = 8000\ndomain.ly = 8000\n\
                domain.lz = 4000\nflow.U = 10\nflow.N = 0.01\ngrid.n = 10\ntime.end = 3600\n";
    let mut snaps = Vec::new();
    for (h, lmax) in [(400.0, 0), (400.0, 1), (400.0, 2), (100.0, 0)] {
        let out = dir.join(format!("c8_{h}_{lmax}"));
        if let Err(e) = run_text(&format!("{base}grid.H = {h}\ngrid.lmax = {lmax}\n"), &out) {
            return Outcome::Fail(e.to_string());
        }
        snaps.push(harness::latest_snapshot(&out).unwrap());
    }
    let l2 = |s: &Snapshot| harness::compare_snapshots(s, &snaps[3], 1000.0).map(|v| v[1].1);
    let (e1, e2) = match (l2(&snaps[1]), l2(&snaps[2])) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Outcome::Fail(e.to_string()),
    };
    // local maxima of |Δw| on the 400 m lattice, flagged when on a level boundary
    let a = snaps[2].corner_velocities(1000.0);
    let b = snaps[3].corner_velocities(1000.0);
    let diff: std::collections::BTreeMap<[i64; 3], f64> =
        a.iter().filter_map(|(k, v)| b.get(k).map(|r| (*k, (v[2] - r[2]).abs()))).collect();
    let step = 400_000i64;
    let lattice: Vec<_> = diff.iter().filter(|(k, _)| k.iter().all(|v| v % step == 0)).collect();
    let mut vals: Vec<f64> = lattice.iter().map(|(_, v)| **v).collect();
    vals.sort_by(f64::total_cmp);
    let median = vals.get(vals.len() / 2).copied().unwrap_or(0.0);
    let level_at = |k: [i64; 3]| -> Option<u32> {
        snaps[2].cubes.iter().find_map(|c| {
            let w = snaps[2].n as f64 * c.spacing * 1e3;
            let lo = c.origin.map(|v| v as f64 * c.spacing * 1e3);
            (0..3).all(|d| (k[d] as f64) >= lo[d] && (k[d] as f64) < lo[d] + w).then_some(c.level)
        })
    };
    let mut bad = 0;
    for (k, v) in &lattice {
        let nbrs: Vec<[i64; 3]> = (0..3)
            .flat_map(|d| [-1, 1].map(move |s| {
                let mut q = **k;
                q[d] += s * step;
                q
            }))
            .collect();
        let is_max = nbrs.iter().all(|q| diff.get(q).map_or(true, |w| **v >= *w));
        let on_boundary = nbrs.iter().any(|q| level_at(*q).is_some() && level_at(*q) != level_at(**k));
        if is_max && on_boundary && **v > 2.0 * median {
            bad += 1;
        }
    }
    check(
        e2 < e1 && bad == 0,
        format!("w-difference L2 l_max=1 {e1:.3e}, l_max=2 {e2:.3e}; boundary maxima above 2x median: {bad}"),
    )
}

fn criterion_9(dir: &Path) -> Outcome {
    let mut parts = Vec::new();
    let mut worst: f64 = 0.0;
    for c in ["c3", "c4", "c5", "c6"] {
        if let Ok(t) = fs::read_to_string(dir.join(format!("{c}.free_slip"))) {
            let v: f64 = t.parse().unwrap_or(f64::INFINITY);
            worst = worst.max(v);
            parts.push(format!("criterion {} {v:.1e}", &c[1..]));
        }
    }
    if parts.is_empty() {
        return Outcome::Fail("no snapshots from criteria 3-6".into());
    }
    check(worst <= 1e-12, format!("max |u.n|/|u| {}", parts.join(", ")))
}

fn files_equal(a: &Path, b: &Path) -> bool {
    let list = |d: &Path| {
        let mut v: Vec<_> = fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
        v.sort();
        v
    };
    let (la, lb) = (list(a), list(b));
    la == lb
        && la.iter().all(|n| {
            let (pa, pb) = (a.join(n), b.join(n));
            if pa.is_dir() {
                files_equal(&pa, &pb)
            } else {
                fs::read(&pa).unwrap() == fs::read(&pb).unwrap()
            }
        })
}

const REFINED: &str = "grid.H = 400\ngrid.n = 10\ngrid.lmax = 2\n";

fn criterion_10_determinism(dir: &Path) -> Outcome {
    let mut dirs = Vec::new();
    for w in [1, 8] {
        let out = dir.join(format!("c10_w{w}"));
        let cfg = format!("{HEMISPHERE}{REFINED}time.steps = 20\noutput.every = 10\nrun.workers = {w}\n");
        if let Err(e) = run_text(&cfg, &out) {
            return Outcome::Fail(e.to_string());
        }
        dirs.push(out);
    }
    let snaps = cutcell::harness::output::snapshot_dirs(&dirs[0]).unwrap();
    let same = snaps.iter().all(|s| files_equal(s, &dirs[1].join(s.file_name().unwrap())));
    check(same, format!("{} snapshots byte-identical for 1 and 8 workers", snaps.len()))
}

fn criterion_10_speedup(dir: &Path) -> Outcome {
    let mut walls = Vec::new();
    for w in [1, 4] {
        let cfg = format!("{HEMISPHERE}{REFINED}time.steps = 100\nrun.workers = {w}\n");
        let t = Instant::now();
        if let Err(e) = run_text(&cfg, &dir.join(format!("c10s_w{w}"))) {
            return Outcome::Fail(e.to_string());
        }
        walls.push(t.elapsed().as_secs_f64());
    }
    let speedup = walls[0] / walls[1];
    check(speedup >= 2.8, format!("speedup {speedup:.2}x at 4 workers ({:.0} s vs {:.0} s)", walls[0], walls[1]))
}

fn main() -> ExitCode {
    let full = std::env::var("CUTCELL_ACCEPTANCE_FULL").is_ok_and(|v| v == "1");
    let only: Option<BTreeSet<String>> = std::env::var("CUTCELL_CRITERIA")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let criteria: [Criterion; 11] = [
        (1, "cut-volume geometry oracle", false, criterion_1),
        (2, "hydrostatic persistence", false, criterion_2),
        (3, "mass conservation, uniform grid", false, criterion_3),
        (4, "mass conservation, three-level tree", false, criterion_4),
        (5, "bell-hill lee waves (1 h, 32x16x12 km at 200 m)", true, criterion_5),
        (6, "hemisphere stability and lee waves (1 h)", true, criterion_6),
        (7, "cosine-ridge convergence order (25 m reference)", true, criterion_7),
        (8, "refinement benefit vs uniform fine run (1 h)", true, criterion_8),
        (9, "free-slip surface velocities", false, criterion_9),
        (10, "determinism across worker counts", false, criterion_10_determinism),
        (10, "parallel speedup at 4 workers", cores < 4, criterion_10_speedup),
    ];
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut failed = 0;
    for (id, name, expensive, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id.to_string())) {
            continue;
        }
        let t = Instant::now();
        let outcome = if expensive && !full {
            Outcome::NotRun(if id == 10 {
                format!("needs at least 4 cores, {cores} available")
            } else {
                "multi-hour run; set CUTCELL_ACCEPTANCE_FULL=1".into()
            })
        } else {
            f(tmp.path())
        };
        let secs = t.elapsed().as_secs_f64();
        let line = match outcome {
            Outcome::Pass(d) => format!("criterion {id} ({name}): PASS - {d} [{secs:.1} s]"),
            Outcome::Fail(d) => {
                failed += 1;
                format!("criterion {id} ({name}): FAIL - {d} [{secs:.1} s]")
            }
            Outcome::NotRun(d) => format!("criterion {id} ({name}): NOT RUN - {d}"),
        };
        println!("{line}");
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    } else {
        println!("acceptance: all executed criteria passed");
        ExitCode::SUCCESS
    }
}
