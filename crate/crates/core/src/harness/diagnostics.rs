//! Lee wavelength, error norms, convergence order and the free-slip residual.

use crate::boundary::surface_velocities;
use crate::error::{Error, Result};
use crate::timeint::Simulation;

/// Wavelength from the downstream zero crossings of `(x, w)` samples.
///
/// Samples with `x > xc` are sorted by x; crossings are located by linear
/// interpolation. Returns twice the mean crossing spacing, or `None` when
/// fewer than three crossings exist.
pub fn lee_wavelength(samples: &[(f64, f64)], xc: f64) -> Option<f64> {
    let mut s: Vec<(f64, f64)> = samples.iter().copied().filter(|&(x, w)| x > xc && w.is_finite()).collect();
    s.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut crossings = Vec::new();
    for p in s.windows(2) {
        let ((x0, w0), (x1, w1)) = (p[0], p[1]);
        if (w0 < 0.0 && w1 >= 0.0) || (w0 >= 0.0 && w1 < 0.0) {
            crossings.push(if w1 == w0 { x0 } else { x0 + (x1 - x0) * w0 / (w0 - w1) });
        }
    }
    if crossings.len() < 3 {
        return None;
    }
    let span = crossings[crossings.len() - 1] - crossings[0];
    Some(2.0 * span / (crossings.len() - 1) as f64)
}

/// (mean absolute difference, root-mean-square difference).
pub fn error_norms(num: &[f64], reference: &[f64]) -> Result<(f64, f64)> {
    if num.is_empty() {
        return Err(Error::Domain("error norms over an empty region".into()));
    }
    if num.len() != reference.len() {
        return Err(Error::Domain(format!(
            "field lengths differ ({} vs {})",
            num.len(),
            reference.len()
        )));
    }
    let n = num.len() as f64;
    let (mut l1, mut l2) = (0.0, 0.0);
    for (a, b) in num.iter().zip(reference) {
        let d = (a - b).abs();
        l1 += d;
        l2 += d * d;
    }
    Ok((l1 / n, (l2 / n).sqrt()))
}

/// Least-squares slope of log(error) against log(spacing).
pub fn convergence_order(errors: &[f64], spacings: &[f64]) -> Result<f64> {
    if errors.len() != spacings.len() || errors.len() < 3 {
        return Err(Error::Domain("need at least three (spacing, error) pairs".into()));
    }
    if let Some(e) = errors.iter().find(|e| !(**e > 0.0)) {
        return Err(Error::Domain(format!("errors must be positive, got {e}")));
    }
    if let Some(d) = spacings.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::Domain(format!("spacings must be positive, got {d}")));
    }
    let xs: Vec<f64> = spacings.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("spacings must not all be equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// `|u·n| / max(|u|, 1e-6)`.
pub fn normal_flow_ratio(u: [f64; 3], n: [f64; 3]) -> f64 {
    let dot = u[0] * n[0] + u[1] * n[1] + u[2] * n[2];
    let mag = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    dot.abs() / mag.max(1e-6)
}

/// Largest normal-flow ratio over all surface points of all cubes, using the
/// surface velocities the scheme imposes and the stored values at surface
/// points that coincide with grid corners.
pub fn free_slip_residual(sim: &Simulation) -> f64 {
    let mut worst: f64 = 0.0;
    for c in sim.cubes.iter().flatten() {
        let f = &c.buf[sim.cur_slot(c.level)];
        let surf = surface_velocities(&f.u, &c.bplan, sim.cfg.surface);
        for (s, v) in c.bplan.surface.iter().zip(surf) {
            worst = worst.max(normal_flow_ratio(v, s.normal));
            if let Some(q) = s.grid_corner {
                let q = q as usize;
                worst = worst.max(normal_flow_ratio([f.u[0][q], f.u[1][q], f.u[2][q]], s.normal));
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_wavelength() {
        let s: Vec<(f64, f64)> = (0..=160).map(|i| {
            let x = i as f64 * 200.0;
            (x, (2.0 * std::f64::consts::PI * (x - 16000.0) / 7000.0).sin())
        }).collect();
        let l = lee_wavelength(&s, 16000.0).unwrap();
        assert!((l - 7000.0).abs() < 200.0, "{l}");
        assert!(lee_wavelength(&s[..90], 16000.0).is_none());
        assert!(lee_wavelength(&[], 0.0).is_none());
    }

    #[test]
    fn norm_examples() {
        assert_eq!(error_norms(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        let (a, b) = error_norms(&[3.5, -1.5], &[1.0, -4.0]).unwrap();
        assert!((a - 2.5).abs() < 1e-15 && (b - 2.5).abs() < 1e-15);
        let (a, b) = error_norms(&[0.0, 0.0, 2.0, 2.0], &[0.0; 4]).unwrap();
        assert_eq!(a, 1.0);
        assert!((b - 2f64.sqrt()).abs() < 1e-15);
        assert!(error_norms(&[], &[]).is_err());
    }

    #[test]
    fn order_examples() {
        let d = [200.0, 100.0, 50.0];
        let e2: Vec<f64> = d.iter().map(|h| 3e-6 * h * h).collect();
        assert!((convergence_order(&e2, &d).unwrap() - 2.0).abs() < 1e-12);
        let e1: Vec<f64> = d.iter().map(|h| 0.01 * h).collect();
        assert!((convergence_order(&e1, &d).unwrap() - 1.0).abs() < 1e-12);
        assert!(convergence_order(&[1.0, 0.0, 1.0], &d).is_err());
        assert!(convergence_order(&[1.0, 2.0], &d[..2]).is_err());
    }

    #[test]
    fn normal_ratio() {
        assert_eq!(normal_flow_ratio([1.0, 0.0, 0.0], [0.0, 0.0, 1.0]), 0.0);
        assert!((normal_flow_ratio([0.0, 0.0, 2.0], [0.0, 0.0, 1.0]) - 1.0).abs() < 1e-15);
        assert_eq!(normal_flow_ratio([0.0; 3], [0.0, 0.0, 1.0]), 0.0);
    }
}
