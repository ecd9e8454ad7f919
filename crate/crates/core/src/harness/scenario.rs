//! Test-case definitions: hill shapes, background flow and run settings.

use crate::boundary::SurfaceCondition;
use crate::dynamics::{Diffusion, Sponge};
use crate::error::{Error, Result};
use crate::grid::{DomainSpec, RefineRegion};
use crate::harness::config::Config;
use crate::state::{Atmosphere, PhysConstants};
use crate::terrain::{column_gradients, TerrainField, TerrainShape};
use crate::timeint::SimConfig;

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be positive, got {v}")))
    }
}

/// Bell-shaped hill `h_m / (1 + r²/a²)^{3/2}`.
pub fn terrain_bell(hm: f64, a: f64, center: [f64; 2], extent: [f64; 2]) -> Result<TerrainField> {
    positive("hill height", hm)?;
    positive("half-width", a)?;
    Ok(TerrainField::new(TerrainShape::Bell { hm, a, xc: center[0], yc: center[1] }, extent[0], extent[1]))
}

/// Hemisphere of radius `r`.
pub fn terrain_hemisphere(r: f64, center: [f64; 2], extent: [f64; 2]) -> Result<TerrainField> {
    positive("radius", r)?;
    Ok(TerrainField::new(TerrainShape::Hemisphere { r, xc: center[0], yc: center[1] }, extent[0], extent[1]))
}

/// Radially symmetric cosine hill `(h_m/2)(1 + cos(π r/a))` for `r < a`.
pub fn terrain_cosine(hm: f64, a: f64, center: [f64; 2], extent: [f64; 2]) -> Result<TerrainField> {
    positive("hill height", hm)?;
    positive("half-width", a)?;
    Ok(TerrainField::new(TerrainShape::Cosine { hm, a, xc: center[0], yc: center[1] }, extent[0], extent[1]))
}

/// Cosine profile in x, uniform in y.
pub fn terrain_cosine_ridge(hm: f64, a: f64, xc: f64, extent: [f64; 2]) -> Result<TerrainField> {
    positive("hill height", hm)?;
    positive("half-width", a)?;
    Ok(TerrainField::new(TerrainShape::CosineRidge { hm, a, xc }, extent[0], extent[1]))
}

/// Largest slope angle (degrees) of the resolved bilinear terrain, using the
/// column-centre gradient of every grid column.
pub fn max_slope_angle(terrain: &TerrainField, spacing: f64) -> f64 {
    let nx = (terrain.lx / spacing).round() as i64;
    let ny = (terrain.ly / spacing).round() as i64;
    let mut best: f64 = 0.0;
    for j in 0..ny {
        for i in 0..nx {
            let h = |a: i64, b: i64| terrain.corner_height(a, b, spacing);
            let (hx, hy) = column_gradients(h(i, j), h(i + 1, j), h(i, j + 1), h(i + 1, j + 1), spacing, spacing);
            best = best.max((hx * hx + hy * hy).sqrt());
        }
    }
    best.atan().to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    Flat,
    Bell,
    Hemisphere,
    Cosine,
    CosineRidge,
}

impl ScenarioKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "flat" => Self::Flat,
            "bell" => Self::Bell,
            "hemisphere" => Self::Hemisphere,
            "cosine" => Self::Cosine,
            "cosine-ridge" => Self::CosineRidge,
            _ => return Err(Error::Config(format!("unknown scenario {s:?}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Flat => "flat",
            Self::Bell => "bell",
            Self::Hemisphere => "hemisphere",
            Self::Cosine => "cosine",
            Self::CosineRidge => "cosine-ridge",
        }
    }
}

/// A complete experiment definition.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub hm: f64,
    pub a: f64,
    pub r: f64,
    pub center: [f64; 2],
    pub extent: [f64; 3],
    pub u: f64,
    pub n: f64,
    pub theta0: f64,
    pub surface: SurfaceCondition,
    pub sponge_base: Option<f64>,
    pub run_time: f64,
}

impl Scenario {
    /// Defaults for a named case on the given domain.
    pub fn new(kind: ScenarioKind, extent: [f64; 3]) -> Self {
        Self {
            kind,
            hm: 400.0,
            a: 1000.0,
            r: 1000.0,
            center: [0.5 * extent[0], 0.5 * extent[1]],
            extent,
            u: 10.0,
            n: 0.01,
            theta0: 300.0,
            surface: SurfaceCondition::FreeSlip,
            sponge_base: None,
            run_time: 3600.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (a, &l) in self.extent.iter().enumerate() {
            if !(l > 0.0) {
                return Err(Error::Config(format!("domain extent along axis {a} must be positive")));
            }
        }
        let half = match self.kind {
            ScenarioKind::Flat => 0.0,
            ScenarioKind::Hemisphere => self.r,
            _ => self.a,
        };
        let [xc, yc] = self.center;
        let fits_x = xc - half >= 0.0 && xc + half <= self.extent[0];
        let fits_y = self.kind == ScenarioKind::CosineRidge || (yc - half >= 0.0 && yc + half <= self.extent[1]);
        if !(fits_x && fits_y) {
            return Err(Error::Config("hill does not fit inside the domain".into()));
        }
        if let Some(zs) = self.sponge_base {
            if !(zs < self.extent[2]) {
                return Err(Error::Config(format!("sponge base {zs} m must lie below the top {} m", self.extent[2])));
            }
        }
        Ok(())
    }

    pub fn terrain(&self) -> Result<TerrainField> {
        let ext = [self.extent[0], self.extent[1]];
        match self.kind {
            ScenarioKind::Flat => Ok(TerrainField::flat(ext[0], ext[1])),
            ScenarioKind::Bell => terrain_bell(self.hm, self.a, self.center, ext),
            ScenarioKind::Hemisphere => terrain_hemisphere(self.r, self.center, ext),
            ScenarioKind::Cosine => terrain_cosine(self.hm, self.a, self.center, ext),
            ScenarioKind::CosineRidge => terrain_cosine_ridge(self.hm, self.a, self.center[0], ext),
        }
    }

    pub fn atmosphere(&self) -> Result<Atmosphere> {
        Atmosphere::new(self.theta0, self.n, PhysConstants::default())
    }

    pub fn hill_top(&self) -> f64 {
        match self.kind {
            ScenarioKind::Flat => 0.0,
            ScenarioKind::Hemisphere => self.r,
            _ => self.hm,
        }
    }
}

/// Everything a run needs, resolved from a configuration.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub scenario: Scenario,
    pub sim: SimConfig,
    /// Number of level-0 steps; derived from the run time when absent.
    pub steps: Option<u64>,
    pub output_dir: std::path::PathBuf,
    pub output_every: u64,
    pub slices: Vec<String>,
    pub vtk: bool,
    pub workers: Option<usize>,
}

impl RunSpec {
    pub fn from_config(cfg: &mut Config) -> Result<Self> {
        let kind = ScenarioKind::parse(&cfg.get::<String>("scenario.name", "flat".into())?)?;
        let extent = [
            cfg.get("domain.lx", 16000.0)?,
            cfg.get("domain.ly", 16000.0)?,
            cfg.get("domain.lz", 8000.0)?,
        ];
        let mut sc = Scenario::new(kind, extent);
        sc.hm = cfg.get("scenario.hm", sc.hm)?;
        sc.a = cfg.get("scenario.a", sc.a)?;
        sc.r = cfg.get("scenario.r", sc.r)?;
        sc.center = [cfg.get("scenario.xc", sc.center[0])?, cfg.get("scenario.yc", sc.center[1])?];
        sc.u = cfg.get("flow.U", sc.u)?;
        sc.n = cfg.get("flow.N", sc.n)?;
        sc.theta0 = cfg.get("flow.theta0", sc.theta0)?;
        sc.surface = match cfg.get::<String>("boundary.surface", "free-slip".into())?.as_str() {
            "free-slip" => SurfaceCondition::FreeSlip,
            "no-slip" => SurfaceCondition::NoSlip,
            s => return Err(Error::Config(format!("unknown surface condition {s:?}"))),
        };
        sc.sponge_base = cfg.opt("sponge.base")?;
        sc.run_time = cfg.get("time.end", sc.run_time)?;
        sc.validate()?;

        let domain = DomainSpec {
            extent,
            coarse_spacing: cfg.get("grid.H", 400.0)?,
            cells_per_cube: cfg.get("grid.n", 20usize)?,
            max_level: cfg.get("grid.lmax", 0u32)?,
        };
        domain.validate()?;
        let mut sim = SimConfig::new(domain, sc.terrain()?, sc.atmosphere()?);
        sim.u_ref = [sc.u, 0.0, 0.0];
        sim.surface = sc.surface;
        sim.diffusion = Diffusion {
            alpha4: cfg.get("numerics.alpha4", sim.diffusion.alpha4)?,
            alpha2: cfg.get("numerics.alpha2", sim.diffusion.alpha2)?,
        };
        sim.ra_nu = cfg.get("time.nu", sim.ra_nu)?;
        sim.safety = cfg.get("time.safety", sim.safety)?;
        sim.dt = cfg.opt("time.dt")?;
        sim.n_sub = cfg.get("grid.nsub", sim.n_sub)?;
        sim.max_search = cfg.get("numerics.plane_search", sim.max_search)?;
        if let Some(zs) = sc.sponge_base {
            sim.sponge = Some(Sponge::new(zs, extent[2], cfg.get("sponge.sigma", 1.0 / 50.0)?)?);
        }
        if let Some(b) = cfg.list("refine.box")? {
            if b.len() != 6 {
                return Err(Error::Config("refine.box needs six numbers x0,y0,z0,x1,y1,z1".into()));
            }
            sim.refine = Some(RefineRegion { lo: [b[0], b[1], b[2]], hi: [b[3], b[4], b[5]] });
        }
        let steps = cfg.opt("time.steps")?;
        let output_dir = cfg.get::<String>("output.dir", format!("out-{}", kind.name()))?.into();
        let output_every = cfg.get("output.every", 0u64)?;
        let slices = cfg
            .get::<String>("output.slices", String::new())?
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        let vtk = cfg.get("output.vtk", false)?;
        let workers = cfg.opt("run.workers")?;
        cfg.check_unused()?;
        Ok(Self { scenario: sc, sim, steps, output_dir, output_every, slices, vtk, workers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bell_examples() {
        let t = terrain_bell(400.0, 1000.0, [0.0, 0.0], [1e5, 1e5]).unwrap();
        assert_eq!(t.shape.height(0.0, 0.0), 400.0);
        assert!((t.shape.height(1000.0, 0.0) - 400.0 / 2f64.powf(1.5)).abs() < 1e-12);
        assert!((t.shape.height(1000.0, 0.0) - 141.42).abs() < 0.01);
        assert!(terrain_bell(0.0, 1000.0, [0.0, 0.0], [1e5, 1e5]).unwrap_err().is_config());
    }

    #[test]
    fn hemisphere_and_cosine_examples() {
        let h = terrain_hemisphere(1000.0, [5000.0, 5000.0], [1e4, 1e4]).unwrap();
        assert_eq!(h.height(5000.0, 5000.0), 1000.0);
        assert_eq!(h.height(6500.0, 5000.0), 0.0);
        let c = terrain_cosine(400.0, 1000.0, [5000.0, 5000.0], [1e4, 1e4]).unwrap();
        assert_eq!(c.height(5000.0, 5000.0), 400.0);
        assert!((c.height(5500.0, 5000.0) - 200.0).abs() < 1e-9);
        assert_eq!(c.height(6000.0, 5000.0), 0.0);
        assert!(c.height(5999.999, 5000.0) < 1e-6);
    }

    #[test]
    fn resolved_slope_angles() {
        let bell = terrain_bell(400.0, 1000.0, [16000.0, 8000.0], [32000.0, 16000.0]).unwrap();
        let a = max_slope_angle(&bell, 200.0);
        assert!((a - 18.1).abs() < 1.0, "bell slope {a}");
        let hemi = terrain_hemisphere(1000.0, [8000.0, 8000.0], [16000.0, 16000.0]).unwrap();
        let a = max_slope_angle(&hemi, 200.0);
        assert!((a - 71.0).abs() < 1.0, "hemisphere slope {a}");
    }

    #[test]
    fn scenario_validation() {
        let mut s = Scenario::new(ScenarioKind::Bell, [4000.0, 4000.0, 8000.0]);
        s.center = [500.0, 2000.0];
        assert!(s.validate().unwrap_err().is_config());
        let mut s = Scenario::new(ScenarioKind::Flat, [4000.0, 4000.0, 8000.0]);
        s.sponge_base = Some(9000.0);
        assert!(s.validate().unwrap_err().is_config());
    }
}
