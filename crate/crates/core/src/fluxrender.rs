//! Flux-transport renderer.
//!
//! For every (emitter, back-surface triangle) pair the flux is the emitter
//! intensity times the solid angle of the triangle's image on the front
//! face, seen from the emitter. That flux rides the refracted rays of the
//! triangle's three vertices to the image plane and is split among pixels
//! by exact clipped-area fractions of the projected triangle; a gamma map
//! turns accumulated pixel flux into displayable grayscale.
//!
//! The per-triangle kernel is generic over [`Scalar`], so the same code
//! path produces plain fluxes and dual-number derivative blocks; objective
//! functions stream through it with their own sinks.

use std::ops::Range;

use rayon::prelude::*;

use crate::autodiff::{Dual, Scalar};
use crate::error::{Error, Result};
use crate::geometry::{triangle_normal, ImagePlane, LensSurface, Rect, Triangle2D, Vec2, Vec3};
use crate::optics::{incident_point, project_to_plane, refract_exit, solid_angle};
use crate::sourcemodel::PointSourceSet;

/// Triangles per parallel work chunk; fixed by problem size only, so the
/// merge order (and thus the result) is independent of thread count.
pub(crate) const TRIANGLE_CHUNK: usize = 2048;

// ---------------------------------------------------------------------------
// Images and gamma
// ---------------------------------------------------------------------------

/// Per-pixel flux on the image plane, row-major with v = 0 at min-y.
#[derive(Clone, Debug)]
pub struct FluxImage {
    res_w: usize,
    res_h: usize,
    data: Vec<f64>,
    total: f64,
}

impl FluxImage {
    pub fn zeros(res_w: usize, res_h: usize) -> Result<Self> {
        if res_w == 0 || res_h == 0 {
            return Err(Error::Config(format!("empty flux image {res_w}x{res_h}")));
        }
        Ok(Self { res_w, res_h, data: vec![0.0; res_w * res_h], total: 0.0 })
    }

    /// Build from raw values; rejects negatives and size mismatches.
    pub fn from_data(res_w: usize, res_h: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != res_w * res_h || data.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {res_w}x{res_h} flux image",
                data.len()
            )));
        }
        if data.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("flux image entries must be nonnegative".into()));
        }
        let mut img = Self { res_w, res_h, data, total: 0.0 };
        img.recompute_total();
        Ok(img)
    }

    pub fn res_w(&self) -> usize {
        self.res_w
    }

    pub fn res_h(&self) -> usize {
        self.res_h
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Cached sum of all entries.
    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.res_w + u
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[self.index(u, v)]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Neumaier-compensated refresh of the cached total.
    pub(crate) fn recompute_total(&mut self) {
        self.total = compensated_sum(&self.data);
    }
}

pub(crate) fn compensated_sum(values: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Displayable grayscale, values in [0, 1]; quantization happens at I/O.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    res_w: usize,
    res_h: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn from_data(res_w: usize, res_h: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != res_w * res_h || data.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {res_w}x{res_h} gray image",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("gray values must lie in [0, 1]".into()));
        }
        Ok(Self { res_w, res_h, data })
    }

    pub fn res_w(&self) -> usize {
        self.res_w
    }

    pub fn res_h(&self) -> usize {
        self.res_h
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.res_w + u]
    }
}

/// Power-law display gamma: stored gray g maps to flux g^exponent.
#[derive(Clone, Copy, Debug)]
pub struct Gamma {
    exponent: f64,
}

impl Default for Gamma {
    fn default() -> Self {
        Self { exponent: 2.2 }
    }
}

impl Gamma {
    pub fn new(exponent: f64) -> Result<Self> {
        if !(exponent > 0.0) || !exponent.is_finite() {
            return Err(Error::Config(format!("gamma exponent {exponent} must be positive")));
        }
        Ok(Self { exponent })
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    /// Gray to flux: g^exponent.
    pub fn encode(&self, g: f64) -> f64 {
        g.powf(self.exponent)
    }

    /// Normalized flux to gray, clamped into [0, 1].
    pub fn decode(&self, u: f64) -> f64 {
        if u <= 0.0 {
            0.0
        } else {
            u.powf(1.0 / self.exponent).min(1.0)
        }
    }

    /// Derivative of [`Gamma::decode`]; zero wherever the clamp is active.
    pub(crate) fn decode_deriv(&self, u: f64) -> f64 {
        if u <= 0.0 || u.powf(1.0 / self.exponent) >= 1.0 {
            0.0
        } else {
            u.powf(1.0 / self.exponent - 1.0) / self.exponent
        }
    }
}

/// Flux to displayable grayscale: pixel flux is rescaled so the image total
/// matches `reference_total` (the target's gamma-space flux budget), then
/// gamma-decoded.
pub fn flux_to_gray(img: &FluxImage, reference_total: f64, gamma: Gamma) -> Result<GrayImage> {
    if !(img.total() > 0.0) {
        return Err(Error::Config("cannot normalize an all-zero flux image".into()));
    }
    if !(reference_total > 0.0) {
        return Err(Error::Config(format!(
            "reference flux total {reference_total} must be positive"
        )));
    }
    let scale = reference_total / img.total();
    let data = img.data().iter().map(|&p| gamma.decode(scale * p)).collect();
    Ok(GrayImage { res_w: img.res_w, res_h: img.res_h, data })
}

/// Grayscale (e.g. a target image) to flux space, elementwise gamma.
pub fn gray_to_flux(img: &GrayImage, gamma: Gamma) -> FluxImage {
    let data: Vec<f64> = img.data().iter().map(|&g| gamma.encode(g)).collect();
    let mut out = FluxImage { res_w: img.res_w, res_h: img.res_h, data, total: 0.0 };
    out.recompute_total();
    out
}

/// A neutral display budget when no reference image sets the scale: uniform
/// flux decodes to mid-gray.
pub fn neutral_reference_total(res_w: usize, res_h: usize, gamma: Gamma) -> f64 {
    (res_w * res_h) as f64 * gamma.encode(0.5)
}

// ---------------------------------------------------------------------------
// Exact triangle-rectangle clipping
// ---------------------------------------------------------------------------

/// Area of `tri` ∩ `rect` by half-plane clipping and the shoelace formula.
/// Degenerate overlap yields 0.
pub fn clip_triangle_to_rect<T: Scalar>(tri: &Triangle2D<T>, rect: &Rect) -> T {
    // A triangle gains at most one vertex per half-plane: 3 + 4 = 7 max.
    let mut buf = ClipBuf { pts: [Vec2::new(T::from_f64(0.0), T::from_f64(0.0)); 8], n: 3 };
    buf.pts[..3].copy_from_slice(&tri.v);
    buf.clip(Axis::X, rect.min_x, Side::Above);
    buf.clip(Axis::X, rect.max_x, Side::Below);
    buf.clip(Axis::Y, rect.min_y, Side::Above);
    buf.clip(Axis::Y, rect.max_y, Side::Below);
    buf.area()
}

#[derive(Clone, Copy)]
enum Axis {
    X,
    Y,
}

#[derive(Clone, Copy)]
enum Side {
    /// Keep coordinate ≥ bound.
    Above,
    /// Keep coordinate ≤ bound.
    Below,
}

struct ClipBuf<T> {
    pts: [Vec2<T>; 8],
    n: usize,
}

impl<T: Scalar> ClipBuf<T> {
    fn coord(p: Vec2<T>, axis: Axis) -> T {
        match axis {
            Axis::X => p.x,
            Axis::Y => p.y,
        }
    }

    fn clip(&mut self, axis: Axis, bound: f64, side: Side) {
        if self.n == 0 {
            return;
        }
        let inside = |p: Vec2<T>| match side {
            Side::Above => Self::coord(p, axis).value() >= bound,
            Side::Below => Self::coord(p, axis).value() <= bound,
        };
        let mut out = [self.pts[0]; 8];
        let mut m = 0;
        for i in 0..self.n {
            let a = self.pts[i];
            let b = self.pts[(i + 1) % self.n];
            let (ia, ib) = (inside(a), inside(b));
            if ia {
                out[m] = a;
                m += 1;
            }
            if ia != ib {
                let ca = Self::coord(a, axis);
                let cb = Self::coord(b, axis);
                let t = (T::from_f64(bound) - ca) / (cb - ca);
                out[m] = Vec2::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
                m += 1;
            }
        }
        self.pts = out;
        self.n = m;
    }

    fn area(&self) -> T {
        if self.n < 3 {
            return T::from_f64(0.0);
        }
        let mut twice = T::from_f64(0.0);
        for i in 0..self.n {
            let a = self.pts[i];
            let b = self.pts[(i + 1) % self.n];
            twice += a.x * b.y - b.x * a.y;
        }
        twice.abs().scale(0.5)
    }
}

// ---------------------------------------------------------------------------
// Streaming flux transport
// ---------------------------------------------------------------------------

/// Flux accounting for one rendering pass (or one chunk of it). All flux is
/// conserved: emitted = landed-in-pixels + escaped + lost.
#[derive(Clone, Copy, Debug, Default)]
pub struct RenderReport {
    /// Σ over pairs of intensity × solid angle.
    pub emitted: f64,
    /// Flux whose projected triangle fell (partly) outside the extent.
    pub escaped: f64,
    /// Flux dropped before reaching the plane (TIR, grazing, degenerate).
    pub lost_flux: f64,
    pub tir: usize,
    pub missed_plane: usize,
    pub degenerate: usize,
}

impl RenderReport {
    pub(crate) fn absorb(&mut self, o: &RenderReport) {
        self.emitted += o.emitted;
        self.escaped += o.escaped;
        self.lost_flux += o.lost_flux;
        self.tir += o.tir;
        self.missed_plane += o.missed_plane;
        self.degenerate += o.degenerate;
    }
}

/// Receiver for streamed per-triangle results. `amount` in [`FluxSink::pixel`]
/// is the flux share Φ·(clip area / triangle area) landing in pixel `j`.
pub(crate) trait FluxSink<T: Scalar> {
    fn pixel(&mut self, k: usize, i: usize, j: usize, amount: T);
    /// Projected image-plane triangle, before clipping; fires for every
    /// non-lost triangle (used by the out-of-extent objective term).
    fn projected(&mut self, _k: usize, _i: usize, _tri: &Triangle2D<T>) {}
}

/// Projected triangles smaller than this (cm²) carry no resolvable flux.
const DEGENERATE_AREA: f64 = 1e-18;

/// Transport flux of back triangle `i` from one emitter to the sink.
/// `v` are the back vertices, `a` the matching front-face incident points.
fn triangle_flux<T: Scalar, S: FluxSink<T>>(
    k: usize,
    i: usize,
    source: Vec3<T>,
    intensity: T,
    v: [Vec3<T>; 3],
    a: [Vec3<T>; 3],
    eta: f64,
    plane: &ImagePlane,
    sink: &mut S,
    report: &mut RenderReport,
) -> Result<()> {
    let omega = solid_angle(source, a[0], a[1], a[2])?;
    let phi = intensity * omega;
    report.emitted += phi.value();

    let normal = triangle_normal(v[0], v[1], v[2])?;
    let mut proj = [Vec2::new(T::from_f64(0.0), T::from_f64(0.0)); 3];
    for (slot, out) in proj.iter_mut().enumerate() {
        let inside = (v[slot] - a[slot]).normalized()?;
        let exit = match refract_exit(inside, normal, eta, i) {
            Ok(e) => e,
            Err(Error::TotalInternalReflection { .. }) => {
                report.tir += 1;
                report.lost_flux += phi.value();
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        *out = match project_to_plane(v[slot], exit, plane.z) {
            Ok(p) => p,
            Err(Error::RayMissesPlane { .. }) => {
                report.missed_plane += 1;
                report.lost_flux += phi.value();
                return Ok(());
            }
            Err(e) => return Err(e),
        };
    }

    let tri = Triangle2D::new(proj[0], proj[1], proj[2]);
    let area = tri.area();
    if area.value() < DEGENERATE_AREA {
        report.degenerate += 1;
        report.lost_flux += phi.value();
        return Ok(());
    }
    sink.projected(k, i, &tri);

    // Candidate pixels from the value-space bounding box.
    let (xs, ys) = (
        [proj[0].x.value(), proj[1].x.value(), proj[2].x.value()],
        [proj[0].y.value(), proj[1].y.value(), proj[2].y.value()],
    );
    let (min_x, max_x) = (xs.iter().cloned().fold(f64::MAX, f64::min), xs.iter().cloned().fold(f64::MIN, f64::max));
    let (min_y, max_y) = (ys.iter().cloned().fold(f64::MAX, f64::min), ys.iter().cloned().fold(f64::MIN, f64::max));
    let ext = plane.extent;
    if max_x <= ext.min_x || min_x >= ext.max_x || max_y <= ext.min_y || min_y >= ext.max_y {
        report.escaped += phi.value();
        return Ok(());
    }
    let (pw, ph) = (plane.pixel_w(), plane.pixel_h());
    let clamp_u = |x: f64| (((x - ext.min_x) / pw).floor().max(0.0) as usize).min(plane.res_w - 1);
    let clamp_v = |y: f64| (((y - ext.min_y) / ph).floor().max(0.0) as usize).min(plane.res_h - 1);
    let (u0, u1) = (clamp_u(min_x), clamp_u(max_x));
    let (v0, v1) = (clamp_v(min_y), clamp_v(max_y));

    let mut covered = T::from_f64(0.0);
    for pv in v0..=v1 {
        for pu in u0..=u1 {
            let rect = plane.pixel_rect_unchecked(pu, pv);
            let clipped = clip_triangle_to_rect(&tri, &rect);
            if clipped.value() > 0.0 {
                let frac = clipped / area;
                sink.pixel(k, i, pv * plane.res_w + pu, phi * frac);
                covered += frac;
            }
        }
    }
    report.escaped += (phi * (T::from_f64(1.0) - covered)).value();
    Ok(())
}

/// Incident points on the front face for every lens vertex, seen from one
/// emitter; the cache turns two quartic solves per triangle corner into one
/// per vertex.
pub(crate) fn incident_cache<T: Scalar>(
    source: Vec3<T>,
    lens: &LensSurface,
) -> Result<Vec<Vec3<T>>> {
    let eta = lens.refractive_index();
    (0..lens.vertex_count())
        .map(|idx| {
            let p = lens.vertex(idx)?;
            incident_point(source, Vec3::from_f64(p.x, p.y, p.z), lens.front_z(), eta)
        })
        .collect()
}

/// Incident points plus their height sensitivities d(incident)/d(vertex z),
/// for the height-derivative driver.
pub(crate) fn incident_cache_dh(source: Vec3, lens: &LensSurface) -> Result<Vec<(Vec3, Vec3)>> {
    let eta = lens.refractive_index();
    let src = Vec3::new(
        Dual::<1>::constant(source.x),
        Dual::<1>::constant(source.y),
        Dual::<1>::constant(source.z),
    );
    (0..lens.vertex_count())
        .map(|idx| {
            let p = lens.vertex(idx)?;
            let v = Vec3::new(
                Dual::<1>::constant(p.x),
                Dual::<1>::constant(p.y),
                Dual::<1>::seeded(p.z, 0),
            );
            let a = incident_point(src, v, lens.front_z(), eta)?;
            Ok((
                Vec3::new(a.x.re, a.y.re, a.z.re),
                Vec3::new(a.x.d[0], a.y.d[0], a.z.d[0]),
            ))
        })
        .collect()
}

/// Drive [`triangle_flux`] over a triangle range with the emitter as the
/// (possibly dual-valued) variable; lens geometry is constant.
pub(crate) fn stream_source_triangles<T: Scalar, S: FluxSink<T>>(
    k: usize,
    source: Vec3<T>,
    intensity: T,
    lens: &LensSurface,
    plane: &ImagePlane,
    incident: &[Vec3<T>],
    tris: Range<usize>,
    sink: &mut S,
    report: &mut RenderReport,
) -> Result<()> {
    let eta = lens.refractive_index();
    for i in tris {
        let idx = lens.triangles()[i].map(|t| t as usize);
        let mut v = [Vec3::new(T::from_f64(0.0), T::from_f64(0.0), T::from_f64(0.0)); 3];
        let mut a = [v[0]; 3];
        for slot in 0..3 {
            let p = lens.vertex(idx[slot])?;
            v[slot] = Vec3::from_f64(p.x, p.y, p.z);
            a[slot] = incident[idx[slot]];
        }
        triangle_flux(k, i, source, intensity, v, a, eta, plane, sink, report)?;
    }
    Ok(())
}

/// Drive [`triangle_flux`] with the three vertex heights of each triangle as
/// dual slots 0..3; the emitter is constant.
pub(crate) fn stream_height_triangles<S: FluxSink<Dual<3>>>(
    k: usize,
    source: Vec3,
    intensity: f64,
    lens: &LensSurface,
    plane: &ImagePlane,
    incident: &[(Vec3, Vec3)],
    tris: Range<usize>,
    sink: &mut S,
    report: &mut RenderReport,
) -> Result<()> {
    let eta = lens.refractive_index();
    let src = Vec3::new(
        Dual::<3>::constant(source.x),
        Dual::<3>::constant(source.y),
        Dual::<3>::constant(source.z),
    );
    let q = Dual::<3>::constant(intensity);
    for i in tris {
        let idx = lens.triangles()[i].map(|t| t as usize);
        let zero = Dual::<3>::constant(0.0);
        let mut v = [Vec3::new(zero, zero, zero); 3];
        let mut a = [v[0]; 3];
        for slot in 0..3 {
            let p = lens.vertex(idx[slot])?;
            v[slot] = Vec3::new(
                Dual::constant(p.x),
                Dual::constant(p.y),
                Dual::seeded(p.z, slot),
            );
            let (av, dh) = incident[idx[slot]];
            a[slot] = Vec3::new(
                Dual { re: av.x, d: seed3(slot, dh.x) },
                Dual { re: av.y, d: seed3(slot, dh.y) },
                Dual { re: av.z, d: seed3(slot, dh.z) },
            );
        }
        triangle_flux(k, i, src, q, v, a, eta, plane, sink, report)?;
    }
    Ok(())
}

fn seed3(slot: usize, v: f64) -> [f64; 3] {
    let mut d = [0.0; 3];
    d[slot] = v;
    d
}

/// Fixed partition of `0..n` into chunks; depends only on `n`.
pub(crate) fn chunk_ranges(n: usize, chunk: usize) -> Vec<Range<usize>> {
    (0..n.div_ceil(chunk)).map(|c| c * chunk..((c + 1) * chunk).min(n)).collect()
}

// ---------------------------------------------------------------------------
// Whole-image rendering
// ---------------------------------------------------------------------------

struct SparseSink {
    adds: Vec<(u32, f64)>,
}

impl FluxSink<f64> for SparseSink {
    fn pixel(&mut self, _k: usize, _i: usize, j: usize, amount: f64) {
        self.adds.push((j as u32, amount));
    }
}

/// Render the flux image of a source set through a lens. Worker chunks are
/// merged in a fixed order, so the result is bit-identical across runs and
/// thread counts.
pub fn render_flux(
    sources: &PointSourceSet,
    lens: &LensSurface,
    plane: &ImagePlane,
) -> Result<(FluxImage, RenderReport)> {
    let mut img = FluxImage::zeros(plane.res_w, plane.res_h)?;
    let mut report = RenderReport::default();
    for (k, e) in sources.emitters().iter().enumerate() {
        let source = Vec3::new(e.x, e.y, 0.0);
        let cache = incident_cache(source, lens)?;
        let parts: Result<Vec<(Vec<(u32, f64)>, RenderReport)>> =
            chunk_ranges(lens.triangle_count(), TRIANGLE_CHUNK)
                .into_par_iter()
                .map(|range| {
                    let mut sink = SparseSink { adds: Vec::new() };
                    let mut rep = RenderReport::default();
                    stream_source_triangles(
                        k, source, e.q, lens, plane, &cache, range, &mut sink, &mut rep,
                    )?;
                    Ok((sink.adds, rep))
                })
                .collect();
        for (adds, rep) in parts? {
            for (j, amount) in adds {
                img.data_mut()[j as usize] += amount;
            }
            report.absorb(&rep);
        }
    }
    img.recompute_total();
    Ok((img, report))
}

// ---------------------------------------------------------------------------
// Dense flux jacobian (validation scale)
// ---------------------------------------------------------------------------

/// Which variables the flux jacobian is taken against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    /// Per emitter k: (x_k, y_k, q_k), rows 3k..3k+3.
    SourceParams,
    /// Per lens vertex: its height, row = vertex index.
    Heights,
}

/// Dense ∂Φ^j/∂v matrix, row per variable. Sized for validation scenes;
/// production objectives stream instead of materializing this.
#[derive(Clone, Debug)]
pub struct FluxJacobian {
    pub n_vars: usize,
    pub n_pixels: usize,
    data: Vec<f64>,
}

impl FluxJacobian {
    pub fn row(&self, var: usize) -> &[f64] {
        &self.data[var * self.n_pixels..(var + 1) * self.n_pixels]
    }
}

struct JacobianSink<'m> {
    adds: Vec<(u32, f64)>,
    rows: &'m dyn Fn(usize, usize) -> [usize; 3],
    jac: Vec<(u32, u32, f64)>,
}

impl FluxSink<Dual<3>> for JacobianSink<'_> {
    fn pixel(&mut self, k: usize, i: usize, j: usize, amount: Dual<3>) {
        self.adds.push((j as u32, amount.re));
        let rows = (self.rows)(k, i);
        for slot in 0..3 {
            if amount.d[slot] != 0.0 {
                self.jac.push((rows[slot] as u32, j as u32, amount.d[slot]));
            }
        }
    }
}

/// Render and simultaneously assemble the full flux jacobian. The flux
/// values follow the same code path as [`render_flux`] and match it
/// bitwise.
pub fn render_flux_with_jacobian(
    sources: &PointSourceSet,
    lens: &LensSurface,
    plane: &ImagePlane,
    wrt: GradTarget,
) -> Result<(FluxImage, FluxJacobian, RenderReport)> {
    let n_pixels = plane.res_w * plane.res_h;
    let n_vars = match wrt {
        GradTarget::SourceParams => 3 * sources.len(),
        GradTarget::Heights => lens.vertex_count(),
    };
    if n_vars.saturating_mul(n_pixels) > 1 << 25 {
        return Err(Error::Config(format!(
            "flux jacobian of {n_vars} x {n_pixels} entries is validation-scale only"
        )));
    }
    let mut img = FluxImage::zeros(plane.res_w, plane.res_h)?;
    let mut jac = FluxJacobian { n_vars, n_pixels, data: vec![0.0; n_vars * n_pixels] };
    let mut report = RenderReport::default();
    let faces = lens.triangles();

    for (k, e) in sources.emitters().iter().enumerate() {
        let parts: Result<Vec<(Vec<(u32, f64)>, Vec<(u32, u32, f64)>, RenderReport)>> =
            chunk_ranges(lens.triangle_count(), TRIANGLE_CHUNK)
                .into_par_iter()
                .map(|range| {
                    let mut rep = RenderReport::default();
                    let rows_source = move |k: usize, _i: usize| [3 * k, 3 * k + 1, 3 * k + 2];
                    let rows_height =
                        move |_k: usize, i: usize| faces[i].map(|t| t as usize);
                    let mut sink = JacobianSink {
                        adds: Vec::new(),
                        rows: match wrt {
                            GradTarget::SourceParams => &rows_source,
                            GradTarget::Heights => &rows_height,
                        },
                        jac: Vec::new(),
                    };
                    match wrt {
                        GradTarget::SourceParams => {
                            let source = Vec3::new(
                                Dual::<3>::seeded(e.x, 0),
                                Dual::<3>::seeded(e.y, 1),
                                Dual::<3>::constant(0.0),
                            );
                            let q = Dual::<3>::seeded(e.q, 2);
                            let cache = incident_cache(source, lens)?;
                            stream_source_triangles(
                                k, source, q, lens, plane, &cache, range, &mut sink, &mut rep,
                            )?;
                        }
                        GradTarget::Heights => {
                            let source = Vec3::new(e.x, e.y, 0.0);
                            let cache = incident_cache_dh(source, lens)?;
                            stream_height_triangles(
                                k, source, e.q, lens, plane, &cache, range, &mut sink, &mut rep,
                            )?;
                        }
                    }
                    Ok((sink.adds, sink.jac, rep))
                })
                .collect();
        for (adds, jacs, rep) in parts? {
            for (j, amount) in adds {
                img.data_mut()[j as usize] += amount;
            }
            for (row, j, d) in jacs {
                jac.data[row as usize * n_pixels + j as usize] += d;
            }
            report.absorb(&rep);
        }
    }
    img.recompute_total();
    Ok((img, jac, report))
}
