//! Loss terms and total objectives for the two optimization stages. Values
//! come from a plain render pass; gradients come from a second pass that
//! streams narrow dual numbers per (emitter, triangle) work item and
//! contracts them against per-pixel weights on the fly, so no jacobian is
//! ever materialized.

use rayon::prelude::*;

use crate::autodiff::{Dual, Scalar};
use crate::error::{Error, Result};
use crate::fluxrender::{
    chunk_ranges, compensated_sum, gray_to_flux, incident_cache, incident_cache_dh, render_flux,
    stream_height_triangles, stream_source_triangles, FluxImage, FluxSink, Gamma, GrayImage,
    RenderReport, TRIANGLE_CHUNK,
};
use crate::geometry::{ImagePlane, LensSurface, Rect, Triangle2D, Vec3};
use crate::sourcemodel::{boundary_penalty_grads, PointSourceSet, SourceParams};

// ---------------------------------------------------------------------------
// Weights and problem definitions
// ---------------------------------------------------------------------------

/// Stage-one weights: flux match, position boundary, intensity sign.
#[derive(Clone, Copy, Debug)]
pub struct FitWeights {
    pub flux: f64,
    pub boundary: f64,
    pub intensity: f64,
}

impl Default for FitWeights {
    fn default() -> Self {
        Self { flux: 1.0, boundary: 1e3, intensity: 1e3 }
    }
}

/// Stage-two weights: image, image gradient, out-of-extent, smoothness.
#[derive(Clone, Copy, Debug)]
pub struct DesignWeights {
    pub image: f64,
    pub gradient: f64,
    pub outside: f64,
    pub smooth: f64,
}

impl Default for DesignWeights {
    fn default() -> Self {
        Self { image: 1.0, gradient: 0.1, outside: 1.0, smooth: 1e-3 }
    }
}

/// Fit an emitter set so its renders through known lenses match captured
/// references.
#[derive(Clone, Debug)]
pub struct SourceFitProblem {
    references: Vec<(LensSurface, GrayImage)>,
    plane: ImagePlane,
    pub gamma: Gamma,
    pub weights: FitWeights,
}

impl SourceFitProblem {
    pub fn new(
        references: Vec<(LensSurface, GrayImage)>,
        plane: ImagePlane,
        gamma: Gamma,
    ) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Config("source fitting needs at least one reference pair".into()));
        }
        for (m, (_, img)) in references.iter().enumerate() {
            if img.res_w() != plane.res_w || img.res_h() != plane.res_h {
                return Err(Error::DimensionMismatch(format!(
                    "reference {m} is {}x{} but the plane is {}x{}",
                    img.res_w(),
                    img.res_h(),
                    plane.res_w,
                    plane.res_h
                )));
            }
        }
        Ok(Self { references, plane, gamma, weights: FitWeights::default() })
    }

    pub fn references(&self) -> &[(LensSurface, GrayImage)] {
        &self.references
    }

    pub fn plane(&self) -> &ImagePlane {
        &self.plane
    }
}

/// Shape a lens back surface so its caustic under a fixed source matches a
/// target image.
#[derive(Clone, Debug)]
pub struct LensDesignProblem {
    sources: PointSourceSet,
    lens: LensSurface,
    target: GrayImage,
    plane: ImagePlane,
    pub gamma: Gamma,
    pub weights: DesignWeights,
}

impl LensDesignProblem {
    pub fn new(
        sources: PointSourceSet,
        lens: LensSurface,
        target: GrayImage,
        plane: ImagePlane,
        gamma: Gamma,
    ) -> Result<Self> {
        if target.res_w() != plane.res_w || target.res_h() != plane.res_h {
            return Err(Error::DimensionMismatch(format!(
                "target is {}x{} but the plane is {}x{}",
                target.res_w(),
                target.res_h(),
                plane.res_w,
                plane.res_h
            )));
        }
        Ok(Self { sources, lens, target, plane, gamma, weights: DesignWeights::default() })
    }

    pub fn sources(&self) -> &PointSourceSet {
        &self.sources
    }

    pub fn lens(&self) -> &LensSurface {
        &self.lens
    }

    pub fn target(&self) -> &GrayImage {
        &self.target
    }

    pub fn plane(&self) -> &ImagePlane {
        &self.plane
    }
}

// ---------------------------------------------------------------------------
// Individual loss terms
// ---------------------------------------------------------------------------

/// Squared flux mismatch after scale normalization: the raw render is
/// rescaled so its in-extent total equals the reference's gamma-space flux
/// budget, making the term invariant to the arbitrary raw flux scale.
pub fn e_flux(rendered: &FluxImage, reference: &GrayImage, gamma: Gamma) -> Result<f64> {
    let (s, ref_flux) = flux_scale(rendered, reference, gamma)?;
    let sq: Vec<f64> = rendered
        .data()
        .iter()
        .zip(ref_flux.data())
        .map(|(&p, &r)| {
            let d = s * p - r;
            d * d
        })
        .collect();
    Ok(compensated_sum(&sq))
}

/// The normalization factor for [`e_flux`] and the reference in flux space.
fn flux_scale(rendered: &FluxImage, reference: &GrayImage, gamma: Gamma) -> Result<(f64, FluxImage)> {
    if rendered.res_w() != reference.res_w() || rendered.res_h() != reference.res_h() {
        return Err(Error::DimensionMismatch(format!(
            "rendered {}x{} vs reference {}x{}",
            rendered.res_w(),
            rendered.res_h(),
            reference.res_w(),
            reference.res_h()
        )));
    }
    let ref_flux = gray_to_flux(reference, gamma);
    if !(ref_flux.total() > 0.0) {
        return Err(Error::Config("reference image carries no flux".into()));
    }
    if !(rendered.total() > 0.0) {
        return Err(Error::Config("rendered image carries no flux (all rays lost?)".into()));
    }
    Ok((ref_flux.total() / rendered.total(), ref_flux))
}

/// Squared grayscale difference.
pub fn e_img(rendered: &GrayImage, target: &GrayImage) -> Result<f64> {
    check_gray_sizes(rendered, target)?;
    let sq: Vec<f64> = rendered
        .data()
        .iter()
        .zip(target.data())
        .map(|(&g, &t)| (g - t) * (g - t))
        .collect();
    Ok(compensated_sum(&sq))
}

/// Squared difference of forward-difference image gradients, both axes.
pub fn e_grad(rendered: &GrayImage, target: &GrayImage) -> Result<f64> {
    check_gray_sizes(rendered, target)?;
    let (e, _) = grad_energy_adjoint(rendered.data(), target.data(), rendered.res_w(), rendered.res_h(), false);
    Ok(e)
}

fn check_gray_sizes(a: &GrayImage, b: &GrayImage) -> Result<()> {
    if a.res_w() != b.res_w() || a.res_h() != b.res_h() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.res_w(),
            a.res_h(),
            b.res_w(),
            b.res_h()
        )));
    }
    Ok(())
}

/// Energy of the image-gradient term and, when requested, its adjoint
/// d(energy)/d(rendered pixel).
fn grad_energy_adjoint(
    g: &[f64],
    t: &[f64],
    w: usize,
    h: usize,
    want_adjoint: bool,
) -> (f64, Vec<f64>) {
    let mut e = 0.0;
    let mut adj = if want_adjoint { vec![0.0; g.len()] } else { Vec::new() };
    for v in 0..h {
        for u in 0..w {
            let j = v * w + u;
            if u + 1 < w {
                let r = (g[j + 1] - g[j]) - (t[j + 1] - t[j]);
                e += r * r;
                if want_adjoint {
                    adj[j + 1] += 2.0 * r;
                    adj[j] -= 2.0 * r;
                }
            }
            if v + 1 < h {
                let r = (g[j + w] - g[j]) - (t[j + w] - t[j]);
                e += r * r;
                if want_adjoint {
                    adj[j + w] += 2.0 * r;
                    adj[j] -= 2.0 * r;
                }
            }
        }
    }
    (e, adj)
}

/// Squared distance from each projected-triangle vertex to the imaging
/// rectangle (closest-point clamp); zero for everything inside.
pub fn e_out(projected: &[Triangle2D<f64>], extent: &Rect) -> f64 {
    projected.iter().map(|tri| triangle_outside(tri, extent)).sum()
}

fn triangle_outside<T: Scalar>(tri: &Triangle2D<T>, extent: &Rect) -> T {
    let mut acc = T::from_f64(0.0);
    for p in &tri.v {
        acc += axis_overshoot(p.x, extent.min_x, extent.max_x);
        acc += axis_overshoot(p.y, extent.min_y, extent.max_y);
    }
    acc
}

fn axis_overshoot<T: Scalar>(c: T, min: f64, max: f64) -> T {
    // Branch on the value; the active branch is smooth and the seam at the
    // box face has zero derivative, so the term is C1.
    if c.value() > max {
        let d = c - T::from_f64(max);
        d * d
    } else if c.value() < min {
        let d = c - T::from_f64(min);
        d * d
    } else {
        T::from_f64(0.0)
    }
}

/// Image-plane footprints of every (emitter, back-triangle) pair that
/// survives transport; diagnostic companion to [`e_out`].
pub fn projected_triangles(
    sources: &PointSourceSet,
    lens: &LensSurface,
    plane: &ImagePlane,
) -> Result<Vec<Triangle2D<f64>>> {
    struct Collect {
        tris: Vec<Triangle2D<f64>>,
    }
    impl FluxSink<f64> for Collect {
        fn pixel(&mut self, _k: usize, _i: usize, _j: usize, _amount: f64) {}
        fn projected(&mut self, _k: usize, _i: usize, tri: &Triangle2D<f64>) {
            self.tris.push(*tri);
        }
    }
    let mut sink = Collect { tris: Vec::new() };
    let mut report = RenderReport::default();
    for (k, e) in sources.emitters().iter().enumerate() {
        let source = Vec3::new(e.x, e.y, 0.0);
        let cache = incident_cache(source, lens)?;
        stream_source_triangles(
            k,
            source,
            e.q,
            lens,
            plane,
            &cache,
            0..lens.triangle_count(),
            &mut sink,
            &mut report,
        )?;
    }
    Ok(sink.tris)
}

// ---------------------------------------------------------------------------
// Mean-curvature smoothness
// ---------------------------------------------------------------------------

/// One-ring mixed areas below this (cm^2) mark a collapsed ring.
const DEGENERATE_MIXED_AREA: f64 = 1e-18;

/// Signed per-vertex mean curvature of the back surface, positive where it
/// bulges toward +z. Cotangent-weighted curvature normal projected on the
/// vertex normal over the mixed-area cell; the projection (rather than
/// magnitude-with-sign) keeps the value smooth through zero, which the
/// height optimizer crosses constantly. Boundary vertices and collapsed
/// rings report 0; the second value counts collapsed rings.
pub fn vertex_mean_curvatures(lens: &LensSurface) -> Result<(Vec<f64>, usize)> {
    let stars = vertex_stars(lens);
    let z = lens.heights();
    let mut curv = vec![0.0; lens.vertex_count()];
    let mut degenerate = 0;
    for v in 0..lens.vertex_count() {
        if lens.is_boundary(v) {
            continue;
        }
        let (h, degen) = curvature_at(lens, v, &stars[v], &|i| z[i]);
        if degen {
            degenerate += 1;
        } else {
            curv[v] = h;
        }
    }
    Ok((curv, degenerate))
}

/// Mean-curvature energy: per-face area times squared face curvature, the
/// face value being the mean of its three vertex curvatures.
pub fn e_smooth(lens: &LensSurface) -> Result<f64> {
    e_smooth_with_grad(lens, false).map(|(e, _, _)| e)
}

/// [`e_smooth`] plus its height gradient (empty when `want_grad` is false)
/// and the collapsed-ring count.
pub fn e_smooth_with_grad(
    lens: &LensSurface,
    want_grad: bool,
) -> Result<(f64, Vec<f64>, usize)> {
    let (curv, degenerate) = vertex_mean_curvatures(lens)?;
    let faces = lens.triangles();
    let z = lens.heights();

    let mut energy = 0.0;
    // Scatter of d(energy)/d(face curvature mean) back onto vertices.
    let mut curv_weight = vec![0.0; lens.vertex_count()];
    let mut grad = if want_grad { vec![0.0; lens.vertex_count()] } else { Vec::new() };
    for (f, idx) in faces.iter().enumerate() {
        let idx = idx.map(|t| t as usize);
        let hbar = (curv[idx[0]] + curv[idx[1]] + curv[idx[2]]) / 3.0;
        let area = face_area(lens, f, &|i| z[i]);
        energy += area * hbar * hbar;
        if want_grad {
            // d(area)/d(heights) with the face curvature held fixed.
            let a3 = face_area(lens, f, &|i| {
                Dual::<3>::seeded(z[i], idx.iter().position(|&t| t == i).expect("face vertex"))
            });
            for slot in 0..3 {
                grad[idx[slot]] += hbar * hbar * a3.d[slot];
                curv_weight[idx[slot]] += 2.0 / 3.0 * area * hbar;
            }
        }
    }
    if want_grad {
        // d(vertex curvature)/d(one-ring heights), one dual evaluation per
        // interior vertex carrying all ring slots at once.
        let stars = vertex_stars(lens);
        for v in 0..lens.vertex_count() {
            if lens.is_boundary(v) || curv_weight[v] == 0.0 {
                continue;
            }
            let ring = one_ring(lens, v, &stars[v])?;
            let slot_of = |i: usize| ring.iter().position(|&r| r == i).expect("ring member");
            let (h, degen) =
                curvature_at(lens, v, &stars[v], &|i| Dual::<8>::seeded(z[i], slot_of(i)));
            if degen {
                continue;
            }
            for (s, &member) in ring.iter().enumerate() {
                grad[member] += curv_weight[v] * h.d[s];
            }
        }
    }
    Ok((energy, grad, degenerate))
}

/// Incident faces per vertex.
fn vertex_stars(lens: &LensSurface) -> Vec<Vec<u32>> {
    let mut stars = vec![Vec::with_capacity(6); lens.vertex_count()];
    for (f, idx) in lens.triangles().iter().enumerate() {
        for &t in idx {
            stars[t as usize].push(f as u32);
        }
    }
    stars
}

/// The vertex itself followed by its distinct neighbors, ascending.
fn one_ring(lens: &LensSurface, v: usize, star: &[u32]) -> Result<Vec<usize>> {
    let mut ring = vec![v];
    for &f in star {
        for &t in &lens.triangles()[f as usize] {
            let t = t as usize;
            if !ring.contains(&t) {
                ring.push(t);
            }
        }
    }
    ring[1..].sort_unstable();
    if ring.len() > 8 {
        // Grid triangulations cap the valence at 6; anything wider has no
        // dual slot to live in.
        return Err(Error::DimensionMismatch(format!(
            "vertex {v} has a one-ring of {} members, above the dual width 8",
            ring.len()
        )));
    }
    Ok(ring)
}

/// Mean curvature at interior vertex `v` from heights supplied by `z`,
/// generic so the value and one-ring-derivative passes share every branch.
fn curvature_at<T: Scalar>(
    lens: &LensSurface,
    v: usize,
    star: &[u32],
    z: &impl Fn(usize) -> T,
) -> (T, bool) {
    let zero = T::from_f64(0.0);
    let pos = |i: usize| {
        let (x, y) = lens.vertex_xy(i % lens.grid_w(), i / lens.grid_w());
        Vec3::new(T::from_f64(x), T::from_f64(y), z(i))
    };
    let pv = pos(v);
    let mut lap = Vec3::new(zero, zero, zero);
    let mut normal = lap;
    let mut a_mixed = zero;
    for &f in star {
        let idx = lens.triangles()[f as usize].map(|t| t as usize);
        let corner = idx.iter().position(|&t| t == v).expect("star face");
        let (a, b) = (idx[(corner + 1) % 3], idx[(corner + 2) % 3]);
        let (pa, pb) = (pos(a), pos(b));
        let cot_a = cotangent(pv - pa, pb - pa);
        let cot_b = cotangent(pv - pb, pa - pb);
        lap += (pv - pa) * cot_b + (pv - pb) * cot_a;
        let cross = (pa - pv).cross(pb - pv);
        normal += cross;
        let area = cross.dot(cross).sqrt().scale(0.5);
        // Mixed-area cell: circumcentric piece for acute faces, else the
        // obtuse-corner split.
        let cot_v = cotangent(pa - pv, pb - pv);
        if cot_v.value() < 0.0 {
            a_mixed += area.scale(0.5);
        } else if cot_a.value() < 0.0 || cot_b.value() < 0.0 {
            a_mixed += area.scale(0.25);
        } else {
            let ea = pv - pa;
            let eb = pv - pb;
            a_mixed += (eb.dot(eb) * cot_a + ea.dot(ea) * cot_b).scale(0.125);
        }
    }
    if !(a_mixed.value() > DEGENERATE_MIXED_AREA) {
        return (zero, true);
    }
    let n_len = normal.dot(normal).sqrt();
    (lap.dot(normal) / (n_len * a_mixed.scale(4.0)), false)
}

/// Cotangent of the angle between two edge vectors.
fn cotangent<T: Scalar>(u: Vec3<T>, w: Vec3<T>) -> T {
    let cross = u.cross(w);
    u.dot(w) / cross.dot(cross).sqrt()
}

fn face_area<T: Scalar>(lens: &LensSurface, f: usize, z: &impl Fn(usize) -> T) -> T {
    let idx = lens.triangles()[f].map(|t| t as usize);
    let pos = |i: usize| {
        let (x, y) = lens.vertex_xy(i % lens.grid_w(), i / lens.grid_w());
        Vec3::new(T::from_f64(x), T::from_f64(y), z(i))
    };
    let (a, b, c) = (pos(idx[0]), pos(idx[1]), pos(idx[2]));
    let cross = (b - a).cross(c - a);
    cross.dot(cross).sqrt().scale(0.5)
}

// ---------------------------------------------------------------------------
// Stage one: source fitting
// ---------------------------------------------------------------------------

/// One evaluation of the stage-one objective. Term values are unweighted;
/// `energy` applies the weights.
#[derive(Clone, Debug)]
pub struct FitEvaluation {
    pub energy: f64,
    pub grad: Vec<f64>,
    /// Per-reference flux mismatch.
    pub flux_terms: Vec<f64>,
    pub boundary_term: f64,
    pub intensity_term: f64,
    pub report: RenderReport,
}

/// Accumulates weighted dual flux into a per-emitter gradient triple.
struct WeightedGradSink<'a> {
    weights: &'a [f64],
    acc: [f64; 3],
}

impl FluxSink<Dual<3>> for WeightedGradSink<'_> {
    fn pixel(&mut self, _k: usize, _i: usize, j: usize, amount: Dual<3>) {
        let w = self.weights[j];
        if w != 0.0 {
            for s in 0..3 {
                self.acc[s] += w * amount.d[s];
            }
        }
    }
}

/// Objective and gradient for fitting the emitter set: the weighted flux
/// mismatch over all reference lenses plus the admissibility penalties,
/// differentiated down to the unconstrained parameter vector.
pub fn source_fit_objective(
    params: &SourceParams,
    problem: &SourceFitProblem,
) -> Result<FitEvaluation> {
    let (sources, decode_jac) = params.decode_with_jacobian();
    let w = &problem.weights;
    let mut grad = vec![0.0; params.data.len()];
    let mut flux_terms = Vec::with_capacity(problem.references.len());
    let mut report = RenderReport::default();
    let mut energy = 0.0;

    for (lens, reference) in &problem.references {
        // Value pass: raw flux, normalization, residuals, pixel weights.
        let (img, rep) = render_flux(&sources, lens, &problem.plane)?;
        report.absorb(&rep);
        let (s, ref_flux) = flux_scale(&img, reference, problem.gamma)?;
        let t = img.total();
        let gt = ref_flux.total();
        let n_p = img.data().len();
        let mut sq = vec![0.0; n_p];
        let mut weights = vec![0.0; n_p];
        let mut coupling = 0.0;
        for j in 0..n_p {
            let r = s * img.data()[j] - ref_flux.data()[j];
            sq[j] = r * r;
            weights[j] = 2.0 * s * r;
            coupling += 2.0 * r * img.data()[j];
        }
        // The normalization scale moves with the total flux; fold its
        // chain term into the per-pixel weights.
        let shift = gt / (t * t) * coupling;
        for wj in &mut weights {
            *wj -= shift;
        }
        let term = compensated_sum(&sq);
        flux_terms.push(term);
        energy += w.flux * term;

        // Dual pass: per-emitter width-3 stream contracted against the
        // pixel weights, then chained through the decode map.
        for (k, e) in sources.emitters().iter().enumerate() {
            let source = Vec3::new(
                Dual::<3>::seeded(e.x, 0),
                Dual::<3>::seeded(e.y, 1),
                Dual::<3>::constant(0.0),
            );
            let q = Dual::<3>::seeded(e.q, 2);
            let cache = incident_cache(source, lens)?;
            let parts: Result<Vec<[f64; 3]>> =
                chunk_ranges(lens.triangle_count(), TRIANGLE_CHUNK)
                    .into_par_iter()
                    .map(|range| {
                        let mut sink = WeightedGradSink { weights: &weights, acc: [0.0; 3] };
                        let mut scratch = RenderReport::default();
                        stream_source_triangles(
                            k, source, q, lens, &problem.plane, &cache, range, &mut sink,
                            &mut scratch,
                        )?;
                        Ok(sink.acc)
                    })
                    .collect();
            let mut emitter_grad = [0.0; 3];
            for part in parts? {
                for s in 0..3 {
                    emitter_grad[s] += part[s];
                }
            }
            for c in 0..3 {
                grad[decode_jac.slots[k][c]] +=
                    w.flux * decode_jac.factors[k][c] * emitter_grad[c];
            }
        }
    }

    // Admissibility penalties; identically zero for contraction-decoded
    // sets, load-bearing only under the raw parameterization.
    let half = sources.half_width();
    let (mut boundary_term, mut intensity_term) = (0.0, 0.0);
    for (k, e) in sources.emitters().iter().enumerate() {
        let (bp, bi, pgrad) = boundary_penalty_grads(e, half);
        boundary_term += bp;
        intensity_term += bi;
        let weighted = [w.boundary * pgrad[0], w.boundary * pgrad[1], w.intensity * pgrad[2]];
        for c in 0..3 {
            grad[decode_jac.slots[k][c]] += decode_jac.factors[k][c] * weighted[c];
        }
    }
    energy += w.boundary * boundary_term + w.intensity * intensity_term;

    Ok(FitEvaluation { energy, grad, flux_terms, boundary_term, intensity_term, report })
}

// ---------------------------------------------------------------------------
// Stage two: lens design
// ---------------------------------------------------------------------------

/// One evaluation of the stage-two objective. Term values are unweighted;
/// `energy` applies the weights.
#[derive(Clone, Debug)]
pub struct DesignEvaluation {
    pub energy: f64,
    pub grad: Vec<f64>,
    pub image_term: f64,
    pub gradient_term: f64,
    pub outside_term: f64,
    pub smooth_term: f64,
    pub degenerate_rings: usize,
    pub report: RenderReport,
}

/// Scatters weighted dual flux and the out-of-extent term onto the heights
/// of each streamed triangle.
struct DesignGradSink<'a> {
    flux_weights: &'a [f64],
    faces: &'a [[u32; 3]],
    extent: Rect,
    outside_weight: f64,
    grad: Vec<f64>,
    outside_value: f64,
}

impl FluxSink<Dual<3>> for DesignGradSink<'_> {
    fn pixel(&mut self, _k: usize, i: usize, j: usize, amount: Dual<3>) {
        let w = self.flux_weights[j];
        if w != 0.0 {
            let idx = self.faces[i];
            for s in 0..3 {
                self.grad[idx[s] as usize] += w * amount.d[s];
            }
        }
    }

    fn projected(&mut self, _k: usize, i: usize, tri: &Triangle2D<Dual<3>>) {
        let o = triangle_outside(tri, &self.extent);
        self.outside_value += o.re;
        if o.re != 0.0 || o.d != [0.0; 3] {
            let idx = self.faces[i];
            for s in 0..3 {
                self.grad[idx[s] as usize] += self.outside_weight * o.d[s];
            }
        }
    }
}

/// Objective and height gradient for the caustic design stage: image and
/// image-gradient terms chained through gamma decoding and the flux
/// normalization, the out-of-extent term from projected footprints, and the
/// mean-curvature smoothness term.
pub fn lens_design_objective(
    heights: &[f64],
    problem: &LensDesignProblem,
) -> Result<DesignEvaluation> {
    let lens = problem.lens.clone().with_heights(heights)?;
    let w = &problem.weights;
    let plane = &problem.plane;

    // Value pass.
    let (img, report) = render_flux(&problem.sources, &lens, plane)?;
    let target_flux = gray_to_flux(&problem.target, problem.gamma);
    if !(target_flux.total() > 0.0) {
        return Err(Error::Config("target image carries no flux".into()));
    }
    if !(img.total() > 0.0) {
        return Err(Error::Config("rendered image carries no flux (all rays lost?)".into()));
    }
    let t = img.total();
    let gt = target_flux.total();
    let s = gt / t;
    let n_p = img.data().len();
    let gray: Vec<f64> = img.data().iter().map(|&p| problem.gamma.decode(s * p)).collect();

    let image_term: f64 = {
        let sq: Vec<f64> = gray
            .iter()
            .zip(problem.target.data())
            .map(|(&g, &tg)| (g - tg) * (g - tg))
            .collect();
        compensated_sum(&sq)
    };
    let (gradient_term, grad_adj) =
        grad_energy_adjoint(&gray, problem.target.data(), plane.res_w, plane.res_h, true);

    // Pixel-space weights pulled back to flux space: through the gamma
    // decode, then through the total-flux normalization.
    let mut flux_weights = vec![0.0; n_p];
    let mut coupling = 0.0;
    for j in 0..n_p {
        let wg = w.image * 2.0 * (gray[j] - problem.target.data()[j]) + w.gradient * grad_adj[j];
        let wu = wg * problem.gamma.decode_deriv(s * img.data()[j]);
        flux_weights[j] = wu * s;
        coupling += wu * img.data()[j];
    }
    let shift = gt / (t * t) * coupling;
    for wj in &mut flux_weights {
        *wj -= shift;
    }

    // Dual pass over heights, fused with the out-of-extent term.
    let faces = lens.triangles();
    let mut grad = vec![0.0; lens.vertex_count()];
    let mut outside_term = 0.0;
    for e in problem.sources.emitters() {
        let source = Vec3::new(e.x, e.y, 0.0);
        let cache = incident_cache_dh(source, &lens)?;
        let parts: Result<Vec<(Vec<f64>, f64)>> =
            chunk_ranges(lens.triangle_count(), TRIANGLE_CHUNK)
                .into_par_iter()
                .map(|range| {
                    let mut sink = DesignGradSink {
                        flux_weights: &flux_weights,
                        faces,
                        extent: plane.extent,
                        outside_weight: w.outside,
                        grad: vec![0.0; lens.vertex_count()],
                        outside_value: 0.0,
                    };
                    let mut scratch = RenderReport::default();
                    stream_height_triangles(
                        0, source, e.q, &lens, plane, &cache, range, &mut sink, &mut scratch,
                    )?;
                    Ok((sink.grad, sink.outside_value))
                })
                .collect();
        for (part, outside) in parts? {
            for (g, p) in grad.iter_mut().zip(part) {
                *g += p;
            }
            outside_term += outside;
        }
    }

    // Smoothness term over the same height vector.
    let (smooth_term, smooth_grad, degenerate_rings) = e_smooth_with_grad(&lens, true)?;
    for (g, sg) in grad.iter_mut().zip(smooth_grad) {
        *g += w.smooth * sg;
    }

    let energy = w.image * image_term
        + w.gradient * gradient_term
        + w.outside * outside_term
        + w.smooth * smooth_term;
    Ok(DesignEvaluation {
        energy,
        grad,
        image_term,
        gradient_term,
        outside_term,
        smooth_term,
        degenerate_rings,
        report,
    })
}
