//! Field snapshots: per-cube binary blocks with a text index, plane slices as
//! CSV and optional legacy structured-points files.
//!
//! A cube file holds little-endian `f64` values: `n³` cells of
//! (volume fraction, p′, ρ′, θ) followed by `(n+1)³` corners of (u, v, w),
//! both with x varying fastest. θ is NaN in cells without fluid.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::state::diagnose_theta;
use crate::timeint::Simulation;

/// Interior values of one cube.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeSnapshot {
    pub id: usize,
    pub level: u32,
    /// Global cell index of the interior origin at this cube's level.
    pub origin: [i64; 3],
    pub spacing: f64,
    pub cells: Vec<[f64; 4]>,
    pub corners: Vec<[f64; 3]>,
}

/// All fluid cubes at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: u64,
    pub time: f64,
    pub n: usize,
    pub max_level: u32,
    pub cubes: Vec<CubeSnapshot>,
}

/// Row of a slice: x, y, z, u, v, w, p′, ρ′, θ.
pub type SliceRow = [f64; 9];

/// Plane `axis = value` (metres).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub axis: usize,
    pub value: f64,
}

impl Plane {
    /// Parse `x=8000`, `y=0` or `z=800`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid plane {s:?}, expected x=, y= or z=<metres>"));
        let (a, v) = s.split_once('=').ok_or_else(bad)?;
        let axis = match a.trim() {
            "x" => 0,
            "y" => 1,
            "z" => 2,
            _ => return Err(bad()),
        };
        let value: f64 = v.trim().parse().map_err(|_| bad())?;
        Ok(Self { axis, value })
    }

    pub fn label(&self) -> String {
        format!("{}{}", ["x", "y", "z"][self.axis], self.value)
    }
}

impl CubeSnapshot {
    fn cell(&self, n: usize, p: [i64; 3]) -> &[f64; 4] {
        &self.cells[(p[2] as usize * n + p[1] as usize) * n + p[0] as usize]
    }

    fn corner(&self, n: usize, p: [i64; 3]) -> &[f64; 3] {
        let m = n + 1;
        &self.corners[(p[2] as usize * m + p[1] as usize) * m + p[0] as usize]
    }

    /// Volume-weighted mean of (p′, ρ′, θ) over the fluid cells around a corner.
    fn corner_scalars(&self, n: usize, p: [i64; 3]) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut w = 0.0;
        for dk in -1..=0 {
            for dj in -1..=0 {
                for di in -1..=0 {
                    let c = [p[0] + di, p[1] + dj, p[2] + dk];
                    if c.iter().any(|&v| v < 0 || v >= n as i64) {
                        continue;
                    }
                    let v = self.cell(n, c);
                    if v[0] > 0.0 {
                        for a in 0..3 {
                            acc[a] += v[0] * v[a + 1];
                        }
                        w += v[0];
                    }
                }
            }
        }
        if w > 0.0 {
            acc.map(|a| a / w)
        } else {
            [f64::NAN; 3]
        }
    }
}

impl Snapshot {
    pub fn capture(sim: &Simulation) -> Self {
        let n = sim.tree.spec.cells_per_cube;
        let consts = sim.cfg.atm.consts;
        let cubes = sim
            .cubes
            .iter()
            .flatten()
            .map(|c| {
                let b = c.geom.block;
                let f = &c.buf[sim.cur_slot(c.level)];
                let base = &sim.bases[c.level as usize];
                let full = c.geom.full_volume();
                let o = c.geom.origin;
                let ni = n as i64;
                let mut cells = Vec::with_capacity(n * n * n);
                for k in 0..ni {
                    let kb = base.at(o[2] + k);
                    for j in 0..ni {
                        for i in 0..ni {
                            let q = b.idx(i, j, k);
                            let vf = c.geom.vol[q] / full;
                            let th = if vf > 0.0 {
                                diagnose_theta(base.p_c[kb] + f.p[q], base.rho_c[kb] + f.r[q], &consts)
                                    .unwrap_or(f64::NAN)
                            } else {
                                f64::NAN
                            };
                            cells.push([vf, f.p[q], f.r[q], th]);
                        }
                    }
                }
                let mut corners = Vec::with_capacity((n + 1).pow(3));
                for k in 0..=ni {
                    for j in 0..=ni {
                        for i in 0..=ni {
                            let q = b.idx(i, j, k);
                            corners.push([f.u[0][q], f.u[1][q], f.u[2][q]]);
                        }
                    }
                }
                CubeSnapshot { id: c.id, level: c.level, origin: o, spacing: c.geom.spacing, cells, corners }
            })
            .collect();
        Self { step: sim.step, time: sim.time, n, max_level: sim.max_level(), cubes }
    }

    /// Write `dir/index.txt` and one binary file per cube.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut index = format!(
            "step {}\ntime {:e}\nn {}\nmax_level {}\n# id level ox oy oz spacing file\n",
            self.step, self.time, self.n, self.max_level
        );
        for c in &self.cubes {
            let name = format!("cube_{:05}.bin", c.id);
            let _ = writeln!(
                index,
                "{} {} {} {} {} {:e} {name}",
                c.id, c.level, c.origin[0], c.origin[1], c.origin[2], c.spacing
            );
            let mut bytes = Vec::with_capacity(8 * (4 * c.cells.len() + 3 * c.corners.len()));
            for v in c.cells.iter().flatten().chain(c.corners.iter().flatten()) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let path = dir.join(&name);
            fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        }
        let path = dir.join("index.txt");
        fs::write(&path, index).map_err(|e| io_err(&path, e))
    }

    /// Read a snapshot written by [`Snapshot::write`].
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("index.txt");
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let bad = |what: &str| Error::Config(format!("{}: malformed {what}", path.display()));
        let mut header = BTreeMap::new();
        let mut cubes = Vec::new();
        let mut rows = Vec::new();
        for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() == 2 {
                header.insert(t[0], t[1]);
            } else if t.len() == 7 {
                rows.push(t);
            } else {
                return Err(bad("line"));
            }
        }
        let get = |k: &str| header.get(k).copied().ok_or_else(|| bad(k));
        let n: usize = get("n")?.parse().map_err(|_| bad("n"))?;
        for t in rows {
            let num = |i: usize| t[i].parse::<f64>().map_err(|_| bad("cube entry"));
            let id = t[0].parse().map_err(|_| bad("cube id"))?;
            let level = t[1].parse().map_err(|_| bad("cube level"))?;
            let origin = [num(2)? as i64, num(3)? as i64, num(4)? as i64];
            let spacing = num(5)?;
            let file = dir.join(t[6]);
            let bytes = fs::read(&file).map_err(|e| io_err(&file, e))?;
            let (nc, nk) = (n * n * n, (n + 1).pow(3));
            if bytes.len() != 8 * (4 * nc + 3 * nk) {
                return Err(bad("cube file size"));
            }
            let vals: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            let cells = vals[..4 * nc].chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
            let corners = vals[4 * nc..].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            cubes.push(CubeSnapshot { id, level, origin, spacing, cells, corners });
        }
        Ok(Self {
            step: get("step")?.parse().map_err(|_| bad("step"))?,
            time: get("time")?.parse().map_err(|_| bad("time"))?,
            n,
            max_level: get("max_level")?.parse().map_err(|_| bad("max_level"))?,
            cubes,
        })
    }

    /// Corner samples on a plane, one row per distinct corner, sorted by
    /// (z, y, x). Each cube contributes corners with local indices in `[0, n)`
    /// along the in-plane axes, so shared corners appear once. The plane is
    /// snapped to the nearest corner level of every cube that contains it.
    pub fn slice(&self, plane: Plane) -> Vec<SliceRow> {
        let n = self.n as i64;
        let mut rows = Vec::new();
        for c in &self.cubes {
            let x0 = c.origin[plane.axis] as f64 * c.spacing;
            let k = ((plane.value - x0) / c.spacing).round() as i64;
            if !(0..n).contains(&k) {
                continue;
            }
            let (ta, tb) = match plane.axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            for b in 0..n {
                for a in 0..n {
                    let mut p = [0i64; 3];
                    p[plane.axis] = k;
                    p[ta] = a;
                    p[tb] = b;
                    let u = c.corner(self.n, p);
                    let s = c.corner_scalars(self.n, p);
                    let x = [0, 1, 2].map(|d| (c.origin[d] + p[d]) as f64 * c.spacing);
                    rows.push([x[0], x[1], x[2], u[0], u[1], u[2], s[0], s[1], s[2]]);
                }
            }
        }
        rows.sort_by(|a, b| a[2].total_cmp(&b[2]).then(a[1].total_cmp(&b[1])).then(a[0].total_cmp(&b[0])));
        rows
    }

    /// Corner velocities keyed by position in millimetres, for points whose
    /// height is at least `z_min`. Each cube contributes its `[0, n)` corners.
    pub fn corner_velocities(&self, z_min: f64) -> BTreeMap<[i64; 3], [f64; 3]> {
        let n = self.n as i64;
        let mut out = BTreeMap::new();
        for c in &self.cubes {
            for k in 0..n {
                if ((c.origin[2] + k) as f64 * c.spacing) < z_min {
                    continue;
                }
                for j in 0..n {
                    for i in 0..n {
                        let p = [i, j, k];
                        let key = [0, 1, 2].map(|d| ((c.origin[d] + p[d]) as f64 * c.spacing * 1e3).round() as i64);
                        out.insert(key, *c.corner(self.n, p));
                    }
                }
            }
        }
        out
    }

    /// Legacy structured-points text for one cube.
    pub fn vtk(&self, c: &CubeSnapshot) -> String {
        let n = self.n;
        let mut s = String::new();
        let o = c.origin.map(|v| v as f64 * c.spacing);
        let _ = write!(
            s,
            "# vtk DataFile Version 3.0\ncube {} level {} step {}\nASCII\nDATASET STRUCTURED_POINTS\n\
             DIMENSIONS {m} {m} {m}\nORIGIN {} {} {}\nSPACING {d} {d} {d}\n",
            c.id,
            c.level,
            self.step,
            o[0],
            o[1],
            o[2],
            m = n + 1,
            d = c.spacing
        );
        let _ = writeln!(s, "POINT_DATA {}\nVECTORS velocity double", c.corners.len());
        for u in &c.corners {
            let _ = writeln!(s, "{} {} {}", u[0], u[1], u[2]);
        }
        let _ = writeln!(s, "CELL_DATA {}", c.cells.len());
        for (f, name) in ["volume_fraction", "pressure_perturbation", "density_perturbation", "theta"].iter().enumerate() {
            let _ = writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default");
            for v in &c.cells {
                let _ = writeln!(s, "{}", if v[f].is_finite() { v[f] } else { 0.0 });
            }
        }
        s
    }

    /// Write VTK files for the finest-level cubes into `dir`.
    pub fn write_vtk(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for c in self.cubes.iter().filter(|c| c.level == self.max_level) {
            let path = dir.join(format!("cube_{:05}.vtk", c.id));
            fs::write(&path, self.vtk(c)).map_err(|e| io_err(&path, e))?;
        }
        Ok(())
    }
}

pub fn slice_csv(rows: &[SliceRow]) -> String {
    let mut s = String::from("x,y,z,u,v,w,p,rho,theta\n");
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// Snapshot directories of a run, in step order.
pub fn snapshot_dirs(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(run_dir)
        .map_err(|e| io_err(run_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("fields_"))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Append a line to a text file.
pub fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_err(path, e))?;
    writeln!(f, "{line}").map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(e).context(path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Snapshot {
        let n = 2;
        let mk = |id: usize, ox: i64| CubeSnapshot {
            id,
            level: 0,
            origin: [ox, 0, 0],
            spacing: 100.0,
            cells: (0..8).map(|i| [1.0, i as f64, 0.5 * i as f64, 300.0]).collect(),
            corners: (0..27).map(|i| [ox as f64, 0.0, i as f64]).collect(),
        };
        Snapshot { step: 3, time: 1.5, n, max_level: 0, cubes: vec![mk(0, 0), mk(1, 2)] }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = tiny();
        s.write(dir.path()).unwrap();
        assert_eq!(Snapshot::read(dir.path()).unwrap(), s);
    }

    #[test]
    fn slices_lie_on_the_plane() {
        let s = tiny();
        let rows = s.slice(Plane::parse("z=100").unwrap());
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().all(|r| r[2] == 100.0));
        let rows = s.slice(Plane::parse("x=200").unwrap());
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r[0] == 200.0 && r[3] == 2.0));
        assert!(Plane::parse("q=3").is_err());
    }
}
