//! Slow, structurally independent reference machinery: a dense emitter
//! lattice standing in for a real surface light source, a bisection solver
//! for the front-face bend point, a Monte Carlo area integrator, and
//! finite-difference gradients.
//!
//! Everything here exists to cross-check a fast path without sharing its
//! derivation, so agreement is evidence and disagreement is a bug.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fluxrender::{flux_to_gray, render_flux, Gamma, GrayImage, RenderReport};
use crate::geometry::{ImagePlane, LensSurface, Rect, Triangle2D, Vec3};
use crate::optics::snell_entry_residual;
use crate::sourcemodel::{cell_center, Emitter, PointSourceSet};

/// Largest emitter lattice the dense oracle will run; beyond this the cost
/// stops buying accuracy at the image resolutions we evaluate.
pub const MAX_ORACLE_GRID: usize = 64;

/// Intensity profile of the stand-in surface source.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SourceProfile {
    /// Equal intensity everywhere (the neutral assumption).
    Uniform,
    /// Gaussian falloff from the center, for testing fits under a source
    /// the model was not told about.
    CenterWeighted { sigma: f64 },
}

impl SourceProfile {
    /// Center weighting with the default width of a quarter side.
    pub fn center_weighted(b: f64) -> Self {
        SourceProfile::CenterWeighted { sigma: b / 4.0 }
    }

    fn weight(&self, x: f64, y: f64) -> f64 {
        match *self {
            SourceProfile::Uniform => 1.0,
            SourceProfile::CenterWeighted { sigma } => {
                (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
            }
        }
    }
}

/// A `grid_n` x `grid_n` emitter lattice over the source square, intensities
/// following `profile` and normalized to unit total.
pub fn dense_grid_source(grid_n: usize, b: f64, profile: SourceProfile) -> Result<PointSourceSet> {
    if grid_n == 0 || grid_n > MAX_ORACLE_GRID {
        return Err(Error::Config(format!(
            "oracle lattice side {grid_n} outside 1..={MAX_ORACLE_GRID}"
        )));
    }
    if let SourceProfile::CenterWeighted { sigma } = profile {
        if !(sigma > 0.0) {
            return Err(Error::Config(format!("profile sigma {sigma} must be positive")));
        }
    }
    let mut emitters = Vec::with_capacity(grid_n * grid_n);
    let mut total = 0.0;
    for j in 0..grid_n {
        for i in 0..grid_n {
            let x = cell_center(i, grid_n, b);
            let y = cell_center(j, grid_n, b);
            let q = profile.weight(x, y);
            total += q;
            emitters.push(Emitter { x, y, q });
        }
    }
    for e in &mut emitters {
        e.q /= total;
    }
    PointSourceSet::new(emitters, b)
}

/// Reference caustic of a surface source approximated by a dense lattice,
/// gamma-encoded against its own flux budget. The grayscale plays the role
/// of a captured ground-truth image for fitting experiments.
pub fn dense_grid_render(
    grid_n: usize,
    b: f64,
    profile: SourceProfile,
    lens: &LensSurface,
    plane: &ImagePlane,
    gamma: Gamma,
) -> Result<(GrayImage, RenderReport)> {
    let sources = dense_grid_source(grid_n, b, profile)?;
    let (flux, report) = render_flux(&sources, lens, plane)?;
    let gray = flux_to_gray(&flux, flux.total(), gamma)?;
    Ok((gray, report))
}

/// Front-face bend fraction by bisection on the signed Snell mismatch,
/// which increases strictly in `k`. Independent of the closed-form quartic:
/// agreement to 1e-9 on random scenes is the release gate for that path.
pub fn snell_bisection(source: Vec3, back_vertex: Vec3, front_z: f64, eta: f64) -> Result<f64> {
    if !(source.z < front_z) || !(back_vertex.z > front_z) {
        return Err(Error::DegenerateGeometry(format!(
            "bend point needs source z {} < front z {front_z} < vertex z {}",
            source.z, back_vertex.z
        )));
    }
    let rel = back_vertex - source;
    let z0 = front_z - source.z;
    let d = rel.z - z0;
    let rho2 = rel.x * rel.x + rel.y * rel.y;
    if rho2 < 1e-18 {
        // Axial ray: every fraction describes the same ray; return the limit
        // of nearby oblique rays so the oracle stays continuous.
        return Ok(eta * z0 / (d + eta * z0));
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    let f_lo = snell_entry_residual(lo, rho2, z0, d, eta);
    let f_hi = snell_entry_residual(hi, rho2, z0, d, eta);
    if !(f_lo < 0.0 && f_hi > 0.0) {
        return Err(Error::NoRefractionRoot(format!(
            "mismatch does not bracket a bend point: f(0) = {f_lo}, f(1) = {f_hi}"
        )));
    }
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if snell_entry_residual(mid, rho2, z0, d, eta) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Unbiased Monte Carlo estimate of `area(tri ∩ rect)` with its standard
/// error, from `samples` uniform draws over the rectangle.
pub fn montecarlo_clip_area(
    tri: &Triangle2D<f64>,
    rect: &Rect,
    samples: u64,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rect_area = (rect.max_x - rect.min_x) * (rect.max_y - rect.min_y);
    let mut hits = 0u64;
    for _ in 0..samples {
        let x = rng.random_range(rect.min_x..rect.max_x);
        let y = rng.random_range(rect.min_y..rect.max_y);
        if point_in_triangle(tri, x, y) {
            hits += 1;
        }
    }
    let p = hits as f64 / samples as f64;
    let sigma = rect_area * (p * (1.0 - p) / samples as f64).sqrt();
    (p * rect_area, sigma)
}

fn point_in_triangle(tri: &Triangle2D<f64>, x: f64, y: f64) -> bool {
    let mut pos = false;
    let mut neg = false;
    for e in 0..3 {
        let a = tri.v[e];
        let b = tri.v[(e + 1) % 3];
        let cross = (b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x);
        pos |= cross > 0.0;
        neg |= cross < 0.0;
    }
    !(pos && neg)
}

/// Central-difference gradient of a scalar function, one evaluation pair
/// per coordinate. The reference side of every gradient acceptance check.
pub fn fd_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let dn = f(&probe)?;
        probe[i] = x[i];
        grad.push((up - dn) / (2.0 * h));
    }
    Ok(grad)
}
