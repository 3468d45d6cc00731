//! Scene geometry: vectors, the lens back-surface height field, and the
//! pixelated image plane.
//!
//! Coordinates are centimeters. The optical axis is +z: emitters sit on
//! z = 0, the flat lens front face on z = front_z, the back surface above
//! it, and the image plane above that.

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

/// 2-component vector, generic over the scalar so projected points can carry
/// derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vec2<T = f64> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Vec2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y
    }

    /// z component of the 2D cross product.
    pub fn cross(self, o: Self) -> T {
        self.x * o.y - self.y * o.x
    }
}

impl<T: Scalar> Add for Vec2<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }
}

impl<T: Scalar> Sub for Vec2<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
}

/// 3-component vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vec3<T = f64> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Scalar> Vec3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn from_f64(x: f64, y: f64, z: f64) -> Self {
        Self::new(T::from_f64(x), T::from_f64(y), T::from_f64(z))
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_sq(self) -> T {
        self.dot(self)
    }

    pub fn norm(self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn scale(self, c: f64) -> Self {
        Self::new(self.x.scale(c), self.y.scale(c), self.z.scale(c))
    }

    /// Unit vector; degenerate below `1e-15` in norm.
    pub fn normalized(self) -> Result<Self> {
        let n = self.norm();
        if n.value() < 1e-15 {
            return Err(Error::DegenerateGeometry(format!(
                "cannot normalize near-zero vector (|v| = {:.3e})",
                n.value()
            )));
        }
        Ok(Self::new(self.x / n, self.y / n, self.z / n))
    }

    pub fn value(self) -> Vec3<f64> {
        Vec3::new(self.x.value(), self.y.value(), self.z.value())
    }
}

impl<T: Scalar> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Scalar> AddAssign for Vec3<T> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Scalar> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Scalar> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Scalar> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Axis-aligned rectangle in a z = const plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Result<Self> {
        if !(min_x < max_x && min_y < max_y) {
            return Err(Error::Config(format!(
                "empty rectangle [{min_x}, {max_x}] x [{min_y}, {max_y}]"
            )));
        }
        Ok(Self { min_x, min_y, max_x, max_y })
    }

    /// `[-w/2, w/2] x [-h/2, h/2]`.
    pub fn centered(w: f64, h: f64) -> Result<Self> {
        Self::new(-w / 2.0, -h / 2.0, w / 2.0, h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }
}

/// Triangle in image-plane coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Triangle2D<T = f64> {
    pub v: [Vec2<T>; 3],
}

impl<T: Scalar> Triangle2D<T> {
    pub fn new(a: Vec2<T>, b: Vec2<T>, c: Vec2<T>) -> Self {
        Self { v: [a, b, c] }
    }

    /// Positive for counterclockwise winding.
    pub fn signed_area(&self) -> T {
        (self.v[1] - self.v[0]).cross(self.v[2] - self.v[0]).scale(0.5)
    }

    pub fn area(&self) -> T {
        self.signed_area().abs()
    }
}

/// Lens back surface: a height field z(i, j) on a regular grid over
/// `extent`, triangulated with a fixed diagonal split, above a flat front
/// face at z = `front_z`.
///
/// Vertices are row-major (index `j * grid_w + i`); each grid cell splits
/// into triangles `(a, b, c)` and `(a, c, d)` along the `a -> c` diagonal,
/// where `a` is the cell's min corner and `c` its max corner. Both wind
/// counterclockwise seen from +z, so face normals point up.
#[derive(Clone, Debug)]
pub struct LensSurface {
    grid_w: usize,
    grid_h: usize,
    extent: Rect,
    front_z: f64,
    refractive_index: f64,
    heights: Vec<f64>,
    triangles: Vec<[u32; 3]>,
}

impl LensSurface {
    /// Flat back surface at `front_z + thickness`.
    pub fn flat(
        grid_w: usize,
        grid_h: usize,
        extent: Rect,
        front_z: f64,
        thickness: f64,
        refractive_index: f64,
    ) -> Result<Self> {
        if grid_w < 2 || grid_h < 2 {
            return Err(Error::Config(format!(
                "lens grid must be at least 2x2, got {grid_w}x{grid_h}"
            )));
        }
        if front_z <= 0.0 {
            return Err(Error::Config(format!("front face must sit above the emitters (front_z = {front_z})")));
        }
        if thickness <= 0.0 {
            return Err(Error::Config(format!("lens thickness must be positive, got {thickness}")));
        }
        if refractive_index <= 1.0 {
            return Err(Error::Config(format!(
                "refractive index must exceed 1, got {refractive_index}"
            )));
        }
        let heights = vec![front_z + thickness; grid_w * grid_h];
        let triangles = grid_triangulation(grid_w, grid_h);
        Ok(Self { grid_w, grid_h, extent, front_z, refractive_index, heights, triangles })
    }

    pub fn with_heights(mut self, heights: &[f64]) -> Result<Self> {
        self.set_heights(heights)?;
        Ok(self)
    }

    pub fn set_heights(&mut self, heights: &[f64]) -> Result<()> {
        if heights.len() != self.heights.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} heights for a {}x{} grid",
                heights.len(),
                self.grid_w,
                self.grid_h
            )));
        }
        for (idx, &h) in heights.iter().enumerate() {
            if !(h > self.front_z) || !h.is_finite() {
                return Err(Error::DegenerateGeometry(format!(
                    "height {h} at vertex {idx} does not lie above the front face z = {}",
                    self.front_z
                )));
            }
        }
        self.heights.copy_from_slice(heights);
        Ok(())
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn extent(&self) -> Rect {
        self.extent
    }

    pub fn front_z(&self) -> f64 {
        self.front_z
    }

    pub fn refractive_index(&self) -> f64 {
        self.refractive_index
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn vertex_count(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn vertex_xy(&self, i: usize, j: usize) -> (f64, f64) {
        let dx = self.extent.width() / (self.grid_w - 1) as f64;
        let dy = self.extent.height() / (self.grid_h - 1) as f64;
        (self.extent.min_x + i as f64 * dx, self.extent.min_y + j as f64 * dy)
    }

    pub fn vertex(&self, idx: usize) -> Result<Vec3> {
        if idx >= self.heights.len() {
            return Err(Error::IndexOutOfRange(format!(
                "vertex {idx} of {}",
                self.heights.len()
            )));
        }
        let (x, y) = self.vertex_xy(idx % self.grid_w, idx / self.grid_w);
        Ok(Vec3::new(x, y, self.heights[idx]))
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        let i = idx % self.grid_w;
        let j = idx / self.grid_w;
        i == 0 || j == 0 || i == self.grid_w - 1 || j == self.grid_h - 1
    }

    /// Unit normal of triangle `t`, pointing toward +z for the standard
    /// winding.
    pub fn face_normal(&self, t: usize) -> Result<Vec3> {
        let tri = *self.triangles.get(t).ok_or_else(|| {
            Error::IndexOutOfRange(format!("triangle {t} of {}", self.triangles.len()))
        })?;
        let [a, b, c] = tri.map(|v| self.vertex(v as usize).expect("triangulation indices valid"));
        triangle_normal(a, b, c)
    }
}

/// Unit normal of the triangle `(a, b, c)`, following the winding order.
pub fn triangle_normal<T: Scalar>(a: Vec3<T>, b: Vec3<T>, c: Vec3<T>) -> Result<Vec3<T>> {
    (b - a).cross(c - a).normalized().map_err(|_| {
        Error::DegenerateGeometry(format!(
            "zero-area triangle at ({:?}, {:?}, {:?})",
            a.value(),
            b.value(),
            c.value()
        ))
    })
}

fn grid_triangulation(grid_w: usize, grid_h: usize) -> Vec<[u32; 3]> {
    let mut tris = Vec::with_capacity(2 * (grid_w - 1) * (grid_h - 1));
    for j in 0..grid_h - 1 {
        for i in 0..grid_w - 1 {
            let a = (j * grid_w + i) as u32;
            let b = (j * grid_w + i + 1) as u32;
            let c = ((j + 1) * grid_w + i + 1) as u32;
            let d = ((j + 1) * grid_w + i) as u32;
            tris.push([a, b, c]);
            tris.push([a, c, d]);
        }
    }
    tris
}

/// Image plane at z = `z`, pixelated into `res_w x res_h` cells over
/// `extent`. Pixel (0, 0) is the min-corner cell; u runs along +x, v along
/// +y.
#[derive(Clone, Copy, Debug)]
pub struct ImagePlane {
    pub z: f64,
    pub extent: Rect,
    pub res_w: usize,
    pub res_h: usize,
}

impl ImagePlane {
    pub fn new(z: f64, extent: Rect, res_w: usize, res_h: usize) -> Result<Self> {
        if res_w == 0 || res_h == 0 {
            return Err(Error::Config(format!("empty image plane {res_w}x{res_h}")));
        }
        Ok(Self { z, extent, res_w, res_h })
    }

    pub fn pixel_w(&self) -> f64 {
        self.extent.width() / self.res_w as f64
    }

    pub fn pixel_h(&self) -> f64 {
        self.extent.height() / self.res_h as f64
    }

    pub fn pixel_area(&self) -> f64 {
        self.pixel_w() * self.pixel_h()
    }

    /// Pixel boundaries are recomputed from indices, so adjacent pixels
    /// share bit-identical edges and the grid tiles the extent exactly.
    pub fn pixel_rect(&self, u: usize, v: usize) -> Result<Rect> {
        if u >= self.res_w || v >= self.res_h {
            return Err(Error::IndexOutOfRange(format!(
                "pixel ({u}, {v}) of {}x{}",
                self.res_w, self.res_h
            )));
        }
        Ok(self.pixel_rect_unchecked(u, v))
    }

    pub(crate) fn pixel_rect_unchecked(&self, u: usize, v: usize) -> Rect {
        let pw = self.pixel_w();
        let ph = self.pixel_h();
        Rect {
            min_x: self.extent.min_x + u as f64 * pw,
            min_y: self.extent.min_y + v as f64 * ph,
            max_x: self.extent.min_x + (u + 1) as f64 * pw,
            max_y: self.extent.min_y + (v + 1) as f64 * ph,
        }
    }
}
