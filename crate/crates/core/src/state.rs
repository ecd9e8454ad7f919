//! Physical constants, the hydrostatic base state and per-cube field storage.

use crate::error::{Error, Result};
use crate::grid::Block;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysConstants {
    pub g: f64,
    pub r: f64,
    pub cp: f64,
    pub cv: f64,
    pub p0: f64,
}

impl Default for PhysConstants {
    fn default() -> Self {
        let cp = 1004.5;
        let r = 287.04;
        Self { g: 9.80665, r, cp, cv: cp - r, p0: 1e5 }
    }
}

impl PhysConstants {
    pub fn kappa(&self) -> f64 {
        self.r / self.cp
    }

    /// `ρθ` from total pressure.
    pub fn rho_theta(&self, p: f64) -> f64 {
        (self.p0 / self.r) * (p / self.p0).powf(self.cv / self.cp)
    }

    /// Factor converting a `ρθ` tendency into a pressure tendency.
    pub fn pressure_factor(&self, p: f64) -> f64 {
        self.cp * self.r / self.cv * (p / self.p0).powf(self.kappa())
    }

    /// Sound speed for potential temperature `theta` at Exner pressure `pi`.
    pub fn sound_speed(&self, theta: f64, pi: f64) -> f64 {
        (self.cp / self.cv * self.r * theta * pi).sqrt()
    }
}

/// Potential temperature from pressure and density.
pub fn diagnose_theta(p: f64, rho: f64, c: &PhysConstants) -> Result<f64> {
    if !(p > 0.0) || !(rho > 0.0) {
        return Err(Error::Domain(format!(
            "pressure and density must be positive (p={p}, rho={rho})"
        )));
    }
    Ok(p / (rho * c.r) * (c.p0 / p).powf(c.kappa()))
}

/// Density from pressure and potential temperature (inverse of [`diagnose_theta`]).
pub fn density_from(p: f64, theta: f64, c: &PhysConstants) -> f64 {
    p / (theta * c.r) * (c.p0 / p).powf(c.kappa())
}

/// Constant-stability hydrostatic reference atmosphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atmosphere {
    pub theta0: f64,
    pub n: f64,
    pub consts: PhysConstants,
}

impl Atmosphere {
    pub fn new(theta0: f64, n: f64, consts: PhysConstants) -> Result<Self> {
        if !(theta0 > 0.0) {
            return Err(Error::Domain(format!("surface potential temperature must be positive, got {theta0}")));
        }
        if !(n >= 0.0) {
            return Err(Error::Domain(format!("stability frequency must be non-negative, got {n}")));
        }
        Ok(Self { theta0, n, consts })
    }

    pub fn theta(&self, z: f64) -> f64 {
        self.theta0 * (self.n * self.n * z / self.consts.g).exp()
    }

    /// Exner pressure from exact integration of `dπ/dz = -g/(cp θ)`.
    pub fn exner(&self, z: f64) -> f64 {
        let c = &self.consts;
        let n2 = self.n * self.n;
        if n2 * z.abs() / c.g < 1e-8 {
            // series form avoids cancellation in the near-isentropic limit
            let s = n2 / c.g;
            return 1.0 - c.g * z / (c.cp * self.theta0) * (1.0 - 0.5 * s * z);
        }
        1.0 + c.g * c.g / (c.cp * self.theta0 * n2) * ((-n2 * z / c.g).exp() - 1.0)
    }

    pub fn pressure(&self, z: f64) -> f64 {
        self.consts.p0 * self.exner(z).powf(self.consts.cp / self.consts.r)
    }

    pub fn density(&self, z: f64) -> f64 {
        self.pressure(z) / (self.consts.r * self.theta(z) * self.exner(z))
    }

    pub fn sound_speed(&self, z: f64) -> f64 {
        self.consts.sound_speed(self.theta(z), self.exner(z))
    }
}

/// Base-state columns for one level, indexed by global vertical index.
#[derive(Debug, Clone)]
pub struct BaseState {
    pub atm: Atmosphere,
    pub spacing: f64,
    /// First global index stored.
    pub k0: i64,
    /// Values at cell centres `z = (k + 1/2) Δ`.
    pub theta_c: Vec<f64>,
    pub p_c: Vec<f64>,
    pub rho_c: Vec<f64>,
    /// Values at corner levels `z = k Δ`.
    pub theta_n: Vec<f64>,
    pub p_n: Vec<f64>,
    pub rho_n: Vec<f64>,
}

impl BaseState {
    #[inline]
    pub fn at(&self, k: i64) -> usize {
        (k - self.k0) as usize
    }
}

/// Build base-state columns covering global levels `k0 .. k0 + count`.
pub fn build_base_state(atm: Atmosphere, spacing: f64, k0: i64, count: usize) -> BaseState {
    let zc = |k: i64| (k as f64 + 0.5) * spacing;
    let zn = |k: i64| k as f64 * spacing;
    let ks = (0..count as i64).map(|i| k0 + i);
    BaseState {
        atm,
        spacing,
        k0,
        theta_c: ks.clone().map(|k| atm.theta(zc(k))).collect(),
        p_c: ks.clone().map(|k| atm.pressure(zc(k))).collect(),
        rho_c: ks.clone().map(|k| atm.density(zc(k))).collect(),
        theta_n: ks.clone().map(|k| atm.theta(zn(k))).collect(),
        p_n: ks.clone().map(|k| atm.pressure(zn(k))).collect(),
        rho_n: ks.map(|k| atm.density(zn(k))).collect(),
    }
}

/// Prognostic and diagnosed fields of one cube at one time level.
///
/// `p` and `r` are the pressure and density perturbations at cell centres;
/// `m` holds momentum and `u` velocity at corners (x, y, z components).
#[derive(Debug, Clone, PartialEq)]
pub struct Fields {
    pub p: Vec<f64>,
    pub r: Vec<f64>,
    pub m: [Vec<f64>; 3],
    pub u: [Vec<f64>; 3],
}

impl Fields {
    pub fn zeros(block: &Block) -> Self {
        let n = block.len();
        Self {
            p: vec![0.0; n],
            r: vec![0.0; n],
            m: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            u: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }

    /// Arrays that are stepped in time (the velocities are derived).
    pub fn prognostic_mut(&mut self) -> [&mut Vec<f64>; 5] {
        let [m0, m1, m2] = &mut self.m;
        [&mut self.p, &mut self.r, m0, m1, m2]
    }

    pub fn all_mut(&mut self) -> [&mut Vec<f64>; 8] {
        let [m0, m1, m2] = &mut self.m;
        let [u0, u1, u2] = &mut self.u;
        [&mut self.p, &mut self.r, m0, m1, m2, u0, u1, u2]
    }

    pub fn all(&self) -> [&Vec<f64>; 8] {
        [
            &self.p, &self.r, &self.m[0], &self.m[1], &self.m[2], &self.u[0], &self.u[1],
            &self.u[2],
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.all().iter().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atm(n: f64) -> Atmosphere {
        Atmosphere::new(300.0, n, PhysConstants::default()).unwrap()
    }

    #[test]
    fn constants_consistent() {
        let c = PhysConstants::default();
        assert_eq!(c.cp, c.cv + c.r);
    }

    #[test]
    fn base_state_examples() {
        let a = atm(0.0);
        for z in [0.0, 1000.0, 8000.0] {
            assert_eq!(a.theta(z), 300.0);
        }
        let a = atm(0.01);
        assert_eq!(a.theta(0.0), 300.0);
        assert_eq!(a.pressure(0.0), 1e5);
        let oracle = 300.0 * (0.01f64.powi(2) * 1000.0 / 9.80665).exp();
        assert!((a.theta(1000.0) - oracle).abs() < 1e-12);
        assert!((a.theta(1000.0) - 303.07).abs() < 0.01);
        assert!(Atmosphere::new(-1.0, 0.01, PhysConstants::default()).is_err());
    }

    #[test]
    fn theta_profile_matches_quadrature() {
        // RK4 integration of dθ/dz = N² θ / g
        let a = atm(0.01);
        let (n2, g) = (1e-4, 9.80665);
        let f = |th: f64| n2 * th / g;
        let (mut th, h) = (300.0, 10.0);
        for _ in 0..100 {
            let k1 = f(th);
            let k2 = f(th + 0.5 * h * k1);
            let k3 = f(th + 0.5 * h * k2);
            let k4 = f(th + h * k3);
            th += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        assert!((th - a.theta(1000.0)).abs() < 1e-9);
    }

    #[test]
    fn hydrostatic_balance_holds() {
        // dp/dz = -ρ g checked by centred differences
        let a = atm(0.01);
        for z in [100.0, 2000.0, 7000.0] {
            let h = 1.0;
            let dpdz = (a.pressure(z + h) - a.pressure(z - h)) / (2.0 * h);
            let rel = (dpdz + a.density(z) * 9.80665) / (a.density(z) * 9.80665);
            assert!(rel.abs() < 1e-8, "z={z} rel={rel}");
        }
        let mut prev = (a.pressure(0.0), a.density(0.0));
        for i in 1..100 {
            let z = i as f64 * 100.0;
            let cur = (a.pressure(z), a.density(z));
            assert!(cur.0 < prev.0 && cur.1 < prev.1);
            prev = cur;
        }
    }

    #[test]
    fn isentropic_limit_is_continuous() {
        let a0 = atm(0.0);
        let a1 = atm(1e-7);
        assert!((a0.exner(5000.0) - a1.exner(5000.0)).abs() < 1e-9);
    }

    #[test]
    fn theta_examples() {
        let c = PhysConstants::default();
        let th = diagnose_theta(1e5, 1e5 / (c.r * 300.0), &c).unwrap();
        assert!((th - 300.0).abs() < 1e-12);
        let th = diagnose_theta(1e5, 1e5 / (c.r * 250.0), &c).unwrap();
        assert!((th - 250.0).abs() < 1e-12);
        let oracle = 8e4 / 287.04 * 1.25f64.powf(287.04 / 1004.5);
        let th = diagnose_theta(8e4, 1.0, &c).unwrap();
        assert!((th - oracle).abs() < 1e-10);
        assert!((th - 297.06).abs() < 0.01);
        assert!(diagnose_theta(0.0, 1.0, &c).is_err());
        assert!(diagnose_theta(1e5, -1.0, &c).is_err());
    }

    #[test]
    fn rho_theta_consistent_with_state_equation() {
        let c = PhysConstants::default();
        let p = 85000.0;
        let th = 305.0;
        let rho = density_from(p, th, &c);
        assert!((c.rho_theta(p) - rho * th).abs() < 1e-9 * rho * th);
    }

    #[test]
    fn sound_speed_near_surface() {
        let a = atm(0.01);
        let cs = a.sound_speed(0.0);
        assert!((cs - 347.2).abs() < 0.5, "{cs}");
    }
}
