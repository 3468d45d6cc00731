//! Surface-light-source model: N point emitters on the plane z = 0 inside a
//! square of side `b`, with nonnegative intensities.
//!
//! The optimizer never sees the constrained quantities. It works in an
//! unconstrained parameter vector that maps onto the admissible set through a
//! contraction function, so every iterate decodes to a physically valid
//! emitter set and the boundary penalty terms stay identically zero. A raw
//! parameterization (positions and intensities taken verbatim, kept in range
//! only by the penalty terms) exists to measure what the contraction buys.

use crate::error::{Error, Result};

/// One point emitter: position on the z = 0 plane and intensity weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Emitter {
    pub x: f64,
    pub y: f64,
    pub q: f64,
}

/// A set of point emitters standing in for a square surface source of side
/// `b` centered at the origin of the z = 0 plane.
#[derive(Clone, Debug)]
pub struct PointSourceSet {
    emitters: Vec<Emitter>,
    b: f64,
}

impl PointSourceSet {
    /// Validating constructor: every emitter inside the closed square, every
    /// intensity nonnegative.
    pub fn new(emitters: Vec<Emitter>, b: f64) -> Result<Self> {
        if emitters.is_empty() {
            return Err(Error::Config("source set needs at least one emitter".into()));
        }
        if !(b > 0.0) {
            return Err(Error::Config(format!("source square side {b} must be positive")));
        }
        let half = b / 2.0;
        for (k, e) in emitters.iter().enumerate() {
            if !(e.x.abs() <= half && e.y.abs() <= half) {
                return Err(Error::Config(format!(
                    "emitter {k} at ({}, {}) lies outside the half-width {half}",
                    e.x, e.y
                )));
            }
            if !(e.q >= 0.0) {
                return Err(Error::Config(format!("emitter {k} has negative intensity {}", e.q)));
            }
        }
        Ok(Self { emitters, b })
    }

    /// Constructor for the raw parameterization, which may wander outside the
    /// square or below zero intensity; the boundary penalties account for it.
    pub fn new_unchecked(emitters: Vec<Emitter>, b: f64) -> Self {
        Self { emitters, b }
    }

    pub fn emitters(&self) -> &[Emitter] {
        &self.emitters
    }

    pub fn len(&self) -> usize {
        self.emitters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emitters.is_empty()
    }

    /// Side length of the emitter square.
    pub fn side(&self) -> f64 {
        self.b
    }

    pub fn half_width(&self) -> f64 {
        self.b / 2.0
    }

    /// Scale intensities so they sum to one (cosmetic; rendering normalizes).
    pub fn normalized_intensities(mut self) -> Self {
        let total: f64 = self.emitters.iter().map(|e| e.q).sum();
        if total > 0.0 {
            for e in &mut self.emitters {
                e.q /= total;
            }
        }
        self
    }
}

/// Contraction of one unconstrained coordinate onto [-b/2, b/2): linear up
/// to |x| = 1, then asymptotic, with matching slope b/2 at the seam.
pub fn contract(xhat: f64, b: f64) -> f64 {
    let t = xhat.abs();
    if t <= 1.0 {
        b / 2.0 * (t - 1.0)
    } else {
        b / 2.0 * (1.0 - 1.0 / t)
    }
}

/// Derivative of [`contract`] with respect to the signed input, zero at the
/// subgradient point xhat = 0.
pub fn contract_deriv(xhat: f64, b: f64) -> f64 {
    let t = xhat.abs();
    let slope = if t <= 1.0 { b / 2.0 } else { b / 2.0 / (t * t) };
    slope * sign0(xhat)
}

/// Inverse of [`contract`] on the nonnegative branch: the |xhat| that maps
/// to x. Defined for x in (-b/2, b/2); asymptotic at the upper edge.
fn contract_inverse(x: f64, b: f64) -> Result<f64> {
    let half = b / 2.0;
    if !(x.abs() < half) {
        return Err(Error::Config(format!(
            "position {x} is not strictly inside (-{half}, {half}); the contraction map \
             only reaches the boundary asymptotically"
        )));
    }
    if x <= 0.0 {
        Ok(1.0 + x / half)
    } else {
        Ok(1.0 / (1.0 - x / half))
    }
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// How the unconstrained vector maps onto emitters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// One (x̂, ŷ, q̂) triple per emitter, contraction-mapped.
    Contracted,
    /// One triple per *free* emitter; decode mirrors each into all four
    /// quadrants, the copies sharing one intensity.
    ContractedQuadrant,
    /// Positions and intensities taken verbatim (penalty-term ablation).
    Raw,
}

/// Unconstrained optimization vector for a source set, laid out as
/// `[x̂_0, ŷ_0, q̂_0, x̂_1, ...]`.
#[derive(Clone, Debug)]
pub struct SourceParams {
    pub kind: ParamKind,
    pub data: Vec<f64>,
    b: f64,
}

/// Sparse jacobian of decode: rendered emitter coordinate r depends on
/// exactly one parameter slot, with the stored factor.
#[derive(Clone, Debug)]
pub struct DecodeJacobian {
    /// Per rendered emitter: parameter slots for (x, y, q).
    pub slots: Vec<[usize; 3]>,
    /// Matching d(coordinate)/d(parameter) factors.
    pub factors: Vec<[f64; 3]>,
}

impl SourceParams {
    pub fn new(kind: ParamKind, data: Vec<f64>, b: f64) -> Result<Self> {
        if data.is_empty() || data.len() % 3 != 0 {
            return Err(Error::Config(format!(
                "parameter vector length {} is not a positive multiple of 3",
                data.len()
            )));
        }
        if !(b > 0.0) {
            return Err(Error::Config(format!("source square side {b} must be positive")));
        }
        Ok(Self { kind, data, b })
    }

    pub fn side(&self) -> f64 {
        self.b
    }

    /// Number of rendered emitters this vector decodes to.
    pub fn n_emitters(&self) -> usize {
        match self.kind {
            ParamKind::ContractedQuadrant => self.data.len() / 3 * 4,
            _ => self.data.len() / 3,
        }
    }

    /// Map the unconstrained vector to a concrete emitter set.
    pub fn decode(&self) -> PointSourceSet {
        self.decode_with_jacobian().0
    }

    /// Decode plus the per-coordinate chain factors needed to pull a
    /// gradient over emitter coordinates back onto the parameter vector.
    pub fn decode_with_jacobian(&self) -> (PointSourceSet, DecodeJacobian) {
        let b = self.b;
        let n_free = self.data.len() / 3;
        let mut emitters = Vec::with_capacity(self.n_emitters());
        let mut slots = Vec::with_capacity(self.n_emitters());
        let mut factors = Vec::with_capacity(self.n_emitters());
        for f in 0..n_free {
            let (xh, yh, qh) = (self.data[3 * f], self.data[3 * f + 1], self.data[3 * f + 2]);
            match self.kind {
                ParamKind::Raw => {
                    emitters.push(Emitter { x: xh, y: yh, q: qh });
                    slots.push([3 * f, 3 * f + 1, 3 * f + 2]);
                    factors.push([1.0, 1.0, 1.0]);
                }
                ParamKind::Contracted => {
                    emitters.push(Emitter {
                        x: contract(xh, b),
                        y: contract(yh, b),
                        q: qh.abs(),
                    });
                    slots.push([3 * f, 3 * f + 1, 3 * f + 2]);
                    factors.push([contract_deriv(xh, b), contract_deriv(yh, b), sign0(qh)]);
                }
                ParamKind::ContractedQuadrant => {
                    // Fold the free emitter into the first quadrant, then
                    // mirror it into all four; the mirrors share intensity.
                    let (cx, cy) = (contract(xh, b), contract(yh, b));
                    let (px, py) = (cx.abs(), cy.abs());
                    let dx = contract_deriv(xh, b) * sign0(cx);
                    let dy = contract_deriv(yh, b) * sign0(cy);
                    let q = qh.abs();
                    let dq = sign0(qh);
                    for (mx, my) in [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)] {
                        emitters.push(Emitter { x: mx * px, y: my * py, q });
                        slots.push([3 * f, 3 * f + 1, 3 * f + 2]);
                        factors.push([mx * dx, my * dy, dq]);
                    }
                }
            }
        }
        let sources = PointSourceSet::new_unchecked(emitters, b);
        (sources, DecodeJacobian { slots, factors })
    }
}

/// Inverse of decode for the plain contracted layout. Requires every
/// position strictly inside the open square and every intensity nonnegative.
pub fn encode(sources: &PointSourceSet) -> Result<SourceParams> {
    let b = sources.side();
    let mut data = Vec::with_capacity(3 * sources.len());
    for e in sources.emitters() {
        if !(e.q >= 0.0) {
            return Err(Error::Config(format!("cannot encode negative intensity {}", e.q)));
        }
        data.push(contract_inverse(e.x, b)?);
        data.push(contract_inverse(e.y, b)?);
        data.push(e.q);
    }
    SourceParams::new(ParamKind::Contracted, data, b)
}

/// Initialization layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// sqrt(N) x sqrt(N) lattice of cell centers, equal intensities 1/N.
    Grid,
    /// Same lattice, expressed as N/4 free emitters mirrored into quadrants.
    QuadrantSymmetric,
}

/// A relatively uniform starting emitter set: lattice at the centers of a
/// sqrt(N) x sqrt(N) partition of the square (margin b / (2 sqrt(N))).
pub fn init_sources(n: usize, b: f64, mode: InitMode) -> Result<PointSourceSet> {
    Ok(init_params(n, b, mode)?.decode())
}

/// The unconstrained vector whose decode is [`init_sources`].
pub fn init_params(n: usize, b: f64, mode: InitMode) -> Result<SourceParams> {
    if !(b > 0.0) {
        return Err(Error::Config(format!("source square side {b} must be positive")));
    }
    let q = 1.0 / n as f64;
    match mode {
        InitMode::Grid => {
            let side = int_sqrt(n).ok_or_else(|| {
                Error::Config(format!("grid init needs a perfect square, got N = {n}"))
            })?;
            let mut data = Vec::with_capacity(3 * n);
            for j in 0..side {
                for i in 0..side {
                    data.push(contract_inverse(cell_center(i, side, b), b)?);
                    data.push(contract_inverse(cell_center(j, side, b), b)?);
                    data.push(q);
                }
            }
            SourceParams::new(ParamKind::Contracted, data, b)
        }
        InitMode::QuadrantSymmetric => {
            if n % 4 != 0 {
                return Err(Error::Config(format!(
                    "quadrant-symmetric init needs N divisible by 4, got N = {n}"
                )));
            }
            let half_side = int_sqrt(n / 4).ok_or_else(|| {
                Error::Config(format!("quadrant-symmetric init needs N/4 a perfect square, got N = {n}"))
            })?;
            let side = 2 * half_side;
            // Free emitters are the first-quadrant quarter of the full lattice.
            let mut data = Vec::with_capacity(3 * n / 4);
            for j in half_side..side {
                for i in half_side..side {
                    data.push(contract_inverse(cell_center(i, side, b), b)?);
                    data.push(contract_inverse(cell_center(j, side, b), b)?);
                    data.push(q);
                }
            }
            SourceParams::new(ParamKind::ContractedQuadrant, data, b)
        }
    }
}

pub(crate) fn cell_center(i: usize, side: usize, b: f64) -> f64 {
    -b / 2.0 + b * (2 * i + 1) as f64 / (2 * side) as f64
}

fn int_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// Position and intensity boundary terms: quadratic outside the admissible
/// set, zero inside. Identically zero for contraction-decoded sets; nonzero
/// values only arise under the raw parameterization.
pub fn boundary_penalties(sources: &PointSourceSet) -> (f64, f64) {
    let half = sources.half_width();
    let (mut e_bp, mut e_bi) = (0.0, 0.0);
    for e in sources.emitters() {
        e_bp += overshoot(e.x, half).powi(2) + overshoot(e.y, half).powi(2);
        if e.q < 0.0 {
            e_bi += e.q * e.q;
        }
    }
    (e_bp, e_bi)
}

/// Per-emitter penalty contributions and their derivatives with respect to
/// the raw coordinates, for the penalty-mode objective.
pub(crate) fn boundary_penalty_grads(e: &Emitter, half: f64) -> (f64, f64, [f64; 3]) {
    let (ox, oy) = (overshoot(e.x, half), overshoot(e.y, half));
    let e_bp = ox * ox + oy * oy;
    let mut grad = [2.0 * ox * sign0(e.x), 2.0 * oy * sign0(e.y), 0.0];
    let e_bi = if e.q < 0.0 { e.q * e.q } else { 0.0 };
    if e.q < 0.0 {
        grad[2] = 2.0 * e.q;
    }
    (e_bp, e_bi, grad)
}

/// How far |v| pokes past the half-width; 0 when inside (strict gate).
fn overshoot(v: f64, half: f64) -> f64 {
    let d = v.abs() - half;
    if d > 0.0 {
        d
    } else {
        0.0
    }
}
