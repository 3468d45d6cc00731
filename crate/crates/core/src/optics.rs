//! Optical kernels: entry refraction through the flat front face, solid
//! angles, exit refraction at the back face, and projection onto the image
//! plane.
//!
//! All kernels are generic over [`Scalar`], so the same code produces values
//! (`f64`) and derivative blocks ([`Dual`](crate::autodiff::Dual)). The entry
//! refraction locates its ray-bend point as a root of a closed-form quartic
//! and lifts the root into dual numbers by implicit differentiation; nothing
//! in the value path iterates beyond a bounded Newton polish.

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::geometry::{Vec2, Vec3};

/// Real roots of a polynomial up to degree 4.
#[derive(Clone, Copy, Debug, Default)]
pub struct RootSet {
    vals: [f64; 4],
    n: usize,
}

impl RootSet {
    fn push(&mut self, r: f64) {
        self.vals[self.n] = r;
        self.n += 1;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vals[..self.n]
    }
}

/// Real roots of `c[0] + c[1] k + c[2] k^2 + c[3] k^3 + c[4] k^4` by the
/// resolvent-cubic (Ferrari) factorization into two quadratics, each root
/// polished with a few Newton steps on the original quartic.
///
/// Degenerate leading coefficients (relative to the largest coefficient)
/// reduce the degree instead of blowing up.
pub fn real_poly_roots(c: &[f64; 5]) -> RootSet {
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = RootSet::default();
    if scale == 0.0 {
        return out;
    }
    let cn = c.map(|v| v / scale);
    let eps = 1e-14;
    if cn[4].abs() > eps {
        let b = cn[3] / cn[4];
        let cc = cn[2] / cn[4];
        let d = cn[1] / cn[4];
        let e = cn[0] / cn[4];
        for u in depressed_quartic_roots(b, cc, d, e).as_slice() {
            out.push(polish(&cn, u - b / 4.0));
        }
    } else if cn[3].abs() > eps {
        let (r, n) = monic_cubic_roots(cn[2] / cn[3], cn[1] / cn[3], cn[0] / cn[3]);
        for root in &r[..n] {
            out.push(polish(&cn, *root));
        }
    } else if cn[2].abs() > eps {
        for &root in monic_quadratic_roots(cn[1] / cn[2], cn[0] / cn[2]).as_slice() {
            out.push(polish(&cn, root));
        }
    } else if cn[1].abs() > eps {
        out.push(-cn[0] / cn[1]);
    }
    out
}

/// Roots of `u^4 + p u^2 + q u + r` after the depressing shift.
fn depressed_quartic_roots(b: f64, c: f64, d: f64, e: f64) -> RootSet {
    let p = c - 3.0 * b * b / 8.0;
    let q = d - b * c / 2.0 + b * b * b / 8.0;
    let r = e - b * d / 4.0 + b * b * c / 16.0 - 3.0 * b.powi(4) / 256.0;
    let mut out = RootSet::default();
    let scale = p.abs().max(q.abs()).max(r.abs()).max(1.0);
    if q.abs() <= 1e-14 * scale {
        // Biquadratic: u^2 solves y^2 + p y + r = 0.
        for &y in monic_quadratic_roots(p, r).as_slice() {
            if y > 0.0 {
                out.push(y.sqrt());
                out.push(-y.sqrt());
            } else if y > -1e-14 * scale {
                out.push(0.0);
            }
        }
        return out;
    }
    // Largest real root of 8 m^3 + 8 p m^2 + (2 p^2 - 8 r) m - q^2 = 0 is
    // positive (the cubic is negative at m = 0), giving a real factorization.
    let (mr, mn) = monic_cubic_roots(p, (2.0 * p * p - 8.0 * r) / 8.0, -q * q / 8.0);
    let m = mr[..mn].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(m > 0.0) {
        return out;
    }
    let s = (2.0 * m).sqrt();
    let half = p / 2.0 + m;
    for &root in monic_quadratic_roots(-s, half + q / (2.0 * s)).as_slice() {
        out.push(root);
    }
    for &root in monic_quadratic_roots(s, half - q / (2.0 * s)).as_slice() {
        out.push(root);
    }
    out
}

/// Real roots of `z^3 + a z^2 + b z + c`.
fn monic_cubic_roots(a: f64, b: f64, c: f64) -> ([f64; 3], usize) {
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let shift = -a / 3.0;
    let disc = (q / 2.0) * (q / 2.0) + (p / 3.0).powi(3);
    let mut roots = [0.0; 3];
    let n;
    if disc > 0.0 {
        let sq = disc.sqrt();
        let t = (-q / 2.0 + sq).cbrt() + (-q / 2.0 - sq).cbrt();
        roots[0] = t + shift;
        n = 1;
    } else if p < 0.0 {
        let m = 2.0 * (-p / 3.0).sqrt();
        let w = (3.0 * q / (p * m)).clamp(-1.0, 1.0);
        let phi = w.acos();
        for (k, slot) in roots.iter_mut().enumerate() {
            *slot = m * ((phi - 2.0 * std::f64::consts::PI * k as f64) / 3.0).cos() + shift;
        }
        n = 3;
    } else {
        // p >= 0 with disc <= 0 forces p ~ q ~ 0: a triple root.
        roots[0] = shift;
        n = 1;
    }
    // One Newton step per root tightens the trig/cbrt path.
    for root in roots[..n].iter_mut() {
        let f = ((*root + a) * *root + b) * *root + c;
        let df = (3.0 * *root + 2.0 * a) * *root + b;
        if df.abs() > 1e-300 {
            *root -= f / df;
        }
    }
    (roots, n)
}

/// Real roots of `x^2 + b x + c`, in the cancellation-stable form.
fn monic_quadratic_roots(b: f64, c: f64) -> RootSet {
    let mut out = RootSet::default();
    let disc = b * b - 4.0 * c;
    if disc < 0.0 {
        return out;
    }
    let sq = disc.sqrt();
    let q = -(b + b.signum() * sq) / 2.0;
    if q != 0.0 {
        out.push(q);
        out.push(c / q);
    } else {
        out.push(0.0);
        if b != 0.0 {
            out.push(-b);
        }
    }
    out
}

fn eval_poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, v| acc * x + v)
}

fn eval_poly_deriv(c: &[f64], x: f64) -> f64 {
    let mut acc = 0.0;
    for (i, v) in c.iter().enumerate().skip(1).rev() {
        acc = acc * x + i as f64 * v;
    }
    acc
}

fn polish(c: &[f64], mut x: f64) -> f64 {
    for _ in 0..3 {
        let f = eval_poly(c, x);
        let df = eval_poly_deriv(c, x);
        if df.abs() < 1e-300 {
            break;
        }
        let step = f / df;
        x -= step;
        if step.abs() < 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    x
}

/// Where the ray from `source` bends at the flat front face (z = `front_z`)
/// on its way to back-surface vertex `vertex`, inside glass of index `eta`.
///
/// In source-centered coordinates the bend point is `(k x', k y', z0)` with
/// `x', y'` the lateral offsets of the vertex, and `k in (0, 1)` the root of
/// a quartic equivalent to Snell's law at the front face. The quartic has
/// exactly one root in the open interval (its values at 0 and 1 have fixed
/// opposite signs), found in closed form and Newton-polished.
///
/// Lateral offsets below `1e-9` collapse to the paraxial quadratic limit
/// `k0 = eta z0 / (d + eta z0)`, whose derivative in the lateral direction
/// vanishes by symmetry.
pub fn incident_point<T: Scalar>(
    source: Vec3<T>,
    vertex: Vec3<T>,
    front_z: f64,
    eta: f64,
) -> Result<Vec3<T>> {
    let k = entry_fraction(source, vertex, front_z, eta)?;
    let rel = vertex - source;
    let z0 = T::from_f64(front_z) - source.z;
    Ok(source + Vec3::new(rel.x * k, rel.y * k, z0))
}

/// The fraction `k` of the lateral offset at which the entry ray meets the
/// front face; see [`incident_point`].
pub fn entry_fraction<T: Scalar>(
    source: Vec3<T>,
    vertex: Vec3<T>,
    front_z: f64,
    eta: f64,
) -> Result<T> {
    if !(source.z.value() < front_z) {
        return Err(Error::DegenerateGeometry(format!(
            "emitter at z = {} is not below the front face z = {front_z}",
            source.z.value()
        )));
    }
    if !(vertex.z.value() > front_z) {
        return Err(Error::DegenerateGeometry(format!(
            "back vertex at z = {} is not above the front face z = {front_z}",
            vertex.z.value()
        )));
    }
    let rel = vertex - source;
    let z0 = T::from_f64(front_z) - source.z;
    let d = rel.z - z0;
    let rho2 = rel.x * rel.x + rel.y * rel.y;
    let eta2 = eta * eta;

    if rho2.value() < 1e-18 {
        // Paraxial limit: the quartic degenerates to a quadratic in k.
        let z0v = z0.value();
        let k0 = eta * z0v / (d.value() + eta * z0v);
        let coeffs = [
            (z0 * z0).scale(eta2),
            (z0 * z0).scale(-2.0 * eta2),
            (z0 * z0).scale(eta2) - d * d,
        ];
        return T::lift_root(k0, &coeffs);
    }

    let g = eta2 - 1.0;
    let coeffs = [
        (z0 * z0).scale(eta2),
        (z0 * z0).scale(-2.0 * eta2),
        rho2.scale(g) + (z0 * z0).scale(eta2) - d * d,
        rho2.scale(-2.0 * g),
        rho2.scale(g),
    ];
    let cv = [
        coeffs[0].value(),
        coeffs[1].value(),
        coeffs[2].value(),
        coeffs[3].value(),
        coeffs[4].value(),
    ];
    let scale = cv.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut best: Option<(f64, f64)> = None;
    for &root in real_poly_roots(&cv).as_slice() {
        if (-1e-9..=1.0 + 1e-9).contains(&root) {
            let res = snell_entry_residual(root, rho2.value(), z0.value(), d.value(), eta).abs();
            if best.map_or(true, |(_, b)| res < b) {
                best = Some((root, res));
            }
        }
    }
    // Ferrari's classification loses the root cluster when the emitter is
    // nearly over the vertex (the last two coefficients sink into noise);
    // the monotone Snell residual still brackets the bend fraction, so
    // bisection rescues every such case.
    let k = match best {
        Some((root, _)) => {
            let k = polish(&cv, root).clamp(0.0, 1.0);
            if eval_poly(&cv, k).abs() > 1e-10 * scale {
                bisect_snell_entry(rho2.value(), z0.value(), d.value(), eta)
            } else {
                k
            }
        }
        None => bisect_snell_entry(rho2.value(), z0.value(), d.value(), eta),
    };
    T::lift_root(k, &coeffs)
}

/// Bisect the Snell residual on (0, 1). The residual is strictly negative
/// at 0 and strictly positive at 1 whenever `rho2 > 0` and the z ordering
/// holds, so the bracket is unconditional.
fn bisect_snell_entry(rho2: f64, z0: f64, d: f64, eta: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if snell_entry_residual(mid, rho2, z0, d, eta) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-16 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Signed mismatch of Snell's law at the front face for a trial fraction
/// `k`: `sin(theta_in) - eta sin(theta_glass)`. Strictly increasing in `k`,
/// zero exactly at the physical bend point.
pub(crate) fn snell_entry_residual(k: f64, rho2: f64, z0: f64, d: f64, eta: f64) -> f64 {
    let rho = rho2.sqrt();
    let si = k * rho / (k * k * rho2 + z0 * z0).sqrt();
    let st = (1.0 - k) * rho / ((1.0 - k) * (1.0 - k) * rho2 + d * d).sqrt();
    si - eta * st
}

/// Solid angle subtended at `apex` by the oriented triangle `(p1, p2, p3)`,
/// via the spherical-excess arctangent form. Positive for triangles wound
/// counterclockwise as seen from the apex side (our standard winding with
/// the apex below), in `[0, 2 pi)`.
pub fn solid_angle<T: Scalar>(apex: Vec3<T>, p1: Vec3<T>, p2: Vec3<T>, p3: Vec3<T>) -> Result<T> {
    let r1 = (p1 - apex).normalized()?;
    let r2 = (p2 - apex).normalized()?;
    let r3 = (p3 - apex).normalized()?;
    let num = r1.dot(r2.cross(r3));
    let den = T::from_f64(1.0) + r1.dot(r2) + r1.dot(r3) + r2.dot(r3);
    Ok(num.atan2(den).scale(2.0))
}

/// Exit refraction at the back face: glass-side unit direction `a`, unit
/// face normal `n`, glass index `eta` against air. Returns the unit exit
/// direction, or a total-internal-reflection error past the critical angle.
pub fn refract_exit<T: Scalar>(a: Vec3<T>, n: Vec3<T>, eta: f64, triangle: usize) -> Result<Vec3<T>> {
    let c = a.dot(n);
    let disc = T::from_f64(1.0) + (c * c - T::from_f64(1.0)).scale(eta * eta);
    if disc.value() < 0.0 {
        return Err(Error::TotalInternalReflection { triangle, cos_incidence: c.value() });
    }
    Ok(n * disc.sqrt() + (a - n * c).scale(eta))
}

/// Intersection of the ray `p + t dir` with the plane z = `plane_z`,
/// requiring the ray to actually travel up to it.
pub fn project_to_plane<T: Scalar>(p: Vec3<T>, dir: Vec3<T>, plane_z: f64) -> Result<Vec2<T>> {
    if dir.z.value() <= 1e-15 {
        return Err(Error::RayMissesPlane { dir_z: dir.z.value() });
    }
    let t = (T::from_f64(plane_z) - p.z) / dir.z;
    if t.value() < 0.0 {
        return Err(Error::RayMissesPlane { dir_z: dir.z.value() });
    }
    Ok(Vec2::new(p.x + t * dir.x, p.y + t * dir.y))
}
