//! Pinhole cameras, rigid poses, rays and voxel-grid addressing.
//!
//! Conventions used throughout the crate:
//! * poses are camera-to-world; the camera looks down its local `+z` axis with
//!   `+x` to the right and `+y` down the image;
//! * pixel `(col, row)` covers the continuous range `[col, col+1) x [row, row+1)`,
//!   so its center sits at `(col + 0.5, row + 0.5)`;
//! * the center of voxel `(i, j, k)` is `origin + (i + 0.5, j + 0.5, k + 0.5) * voxel_size`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::VoxelVolume;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Intrinsics with the principal point at the image center and a horizontal
    /// field of view of `hfov_deg`.
    pub fn from_fov(width: usize, height: usize, hfov_deg: f64) -> Result<Self> {
        let fx = width as f64 / 2.0 / (hfov_deg.to_radians() / 2.0).tan();
        Self::new(fx, fx, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::domain("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::domain("image size must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::domain("principal point outside the image"));
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        if (gram - Mat3::identity()).abs().max() > ORTHO_TOL {
            return Err(Error::domain("rotation is not orthonormal"));
        }
        if (rotation.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(Error::domain("rotation has determinant != 1"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`, with world `+z` as up.
    pub fn look_at(eye: Vec3, target: Vec3) -> Result<Self> {
        let forward = target - eye;
        let norm = forward.norm();
        if norm < 1e-12 {
            return Err(Error::domain("look-at target coincides with the eye"));
        }
        let z = forward / norm;
        let mut up = Vec3::z();
        if z.cross(&up).norm() < 1e-9 {
            up = Vec3::y();
        }
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_columns(&[x, y, z]);
        Ok(Self {
            rotation,
            translation: eye,
        })
    }

    pub fn position(&self) -> Vec3 {
        self.translation
    }

    pub fn forward(&self) -> Vec3 {
        self.rotation.column(2).into_owned()
    }

    pub fn world_to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation.transpose() * (x - self.translation)
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn to_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ]
    }

    pub fn from_array(a: &[f64; 12]) -> Result<Self> {
        let rotation = Mat3::new(a[0], a[1], a[2], a[4], a[5], a[6], a[8], a[9], a[10]);
        Self::new(rotation, Vec3::new(a[3], a[7], a[11]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Result<Self> {
        let n = direction.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::domain("ray direction must be non-zero"));
        }
        if !(t_near >= 0.0 && t_near < t_far) {
            return Err(Error::domain(format!("invalid ray bounds [{t_near}, {t_far}]")));
        }
        Ok(Self {
            origin,
            direction: direction / n,
            t_near,
            t_far,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn with_bounds(&self, t_near: f64, t_far: f64) -> Result<Self> {
        Ray::new(self.origin, self.direction, t_near, t_far)
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|i| !(min[i] < max[i])) {
            return Err(Error::domain("box min must be below max on every axis"));
        }
        Ok(Self { min, max })
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        (0..3).all(|i| x[i] >= self.min[i] && x[i] <= self.max[i])
    }

    pub fn clamp(&self, x: &Vec3, margin: f64) -> Vec3 {
        Vec3::from_fn(|i, _| x[i].clamp(self.min[i] + margin, self.max[i] - margin))
    }

    /// Slab intersection of the ray line with the box, as a `[t0, t1]` range
    /// intersected with the ray's own bounds.
    pub fn clip(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = ray.t_near;
        let mut t1 = ray.t_far;
        for i in 0..3 {
            let d = ray.direction[i];
            let o = ray.origin[i];
            if d.abs() < 1e-300 {
                if o < self.min[i] || o > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let mut ta = (self.min[i] - o) * inv;
            let mut tb = (self.max[i] - o) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
}

impl GridSpec {
    pub fn new(origin: [f64; 3], voxel_size: f64, dims: [usize; 3]) -> Result<Self> {
        let g = Self {
            origin,
            voxel_size,
            dims,
        };
        g.validate()?;
        Ok(g)
    }

    /// Smallest grid of `voxel_size` voxels covering `bounds`.
    pub fn covering(bounds: &Aabb, voxel_size: f64) -> Result<Self> {
        let ext = bounds.extent();
        let dims = [0, 1, 2].map(|i| ((ext[i] / voxel_size) - 1e-9).ceil().max(1.0) as usize);
        Self::new([bounds.min.x, bounds.min.y, bounds.min.z], voxel_size, dims)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) {
            return Err(Error::domain("voxel_size must be positive"));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::domain("grid dims must be >= 1"));
        }
        Ok(())
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn origin_vec(&self) -> Vec3 {
        Vec3::from(self.origin)
    }

    /// Linear index of voxel `(i, j, k)`, x-major (z varies fastest).
    pub fn linear_index(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    pub fn unravel(&self, lin: usize) -> [usize; 3] {
        let k = lin % self.dims[2];
        let j = (lin / self.dims[2]) % self.dims[1];
        let i = lin / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }

    pub fn voxel_center(&self, idx: [usize; 3]) -> Vec3 {
        Vec3::new(
            self.origin[0] + (idx[0] as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (idx[1] as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (idx[2] as f64 + 0.5) * self.voxel_size,
        )
    }

    pub fn centers(&self) -> Vec<Vec3> {
        (0..self.n_voxels())
            .map(|l| self.voxel_center(self.unravel(l)))
            .collect()
    }

    pub fn aabb(&self) -> Aabb {
        let min = self.origin_vec();
        let max = min
            + Vec3::new(
                self.dims[0] as f64,
                self.dims[1] as f64,
                self.dims[2] as f64,
            ) * self.voxel_size;
        Aabb { min, max }
    }

    /// Box spanned by voxel centers; the region where interpolation is defined.
    pub fn center_aabb(&self) -> (Vec3, Vec3) {
        let lo = self.voxel_center([0, 0, 0]);
        let hi = self.voxel_center([self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1]);
        (lo, hi)
    }

    pub fn same_layout(&self, other: &GridSpec) -> bool {
        self == other
    }
}

pub fn pixel_to_ray(intr: &CameraIntrinsics, pose: &Pose, pixel: (f64, f64)) -> Result<Ray> {
    let (u, v) = pixel;
    if !(u >= 0.0 && u < intr.width as f64 && v >= 0.0 && v < intr.height as f64) {
        return Err(Error::domain(format!("pixel ({u}, {v}) outside the image")));
    }
    let local = Vec3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
    Ray::new(pose.translation, pose.rotation * local, 0.0, f64::INFINITY)
}

/// Ray through the center of pixel `(col, row)`.
pub fn pixel_center_ray(intr: &CameraIntrinsics, pose: &Pose, col: usize, row: usize) -> Result<Ray> {
    pixel_to_ray(intr, pose, (col as f64 + 0.5, row as f64 + 0.5))
}

/// Projects a world point; returns `(u, v, z)` for points in front of the camera.
pub fn project(intr: &CameraIntrinsics, pose: &Pose, x: &Vec3) -> Option<(f64, f64, f64)> {
    let p = pose.world_to_camera(x);
    if p.z <= 0.0 {
        return None;
    }
    Some((intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy, p.z))
}

pub fn world_to_voxel(grid: &GridSpec, x: &Vec3) -> Vec3 {
    (x - grid.origin_vec()) / grid.voxel_size
}

/// Corner indices (linear) and weights of the 8-point trilinear stencil.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

fn axis_stencil(c: f64, dim: usize) -> (usize, usize, f64) {
    if dim == 1 {
        return (0, 0, 0.0);
    }
    // snap rounding noise so queries at voxel centers hit them exactly
    let r = c.round();
    let c = if (c - r).abs() < 1e-12 { r } else { c };
    let i0 = (c.floor().max(0.0) as usize).min(dim - 2);
    let f = (c - i0 as f64).clamp(0.0, 1.0);
    (i0, i0 + 1, f)
}

fn stencil_from_center_coords(grid: &GridSpec, c: [f64; 3]) -> Stencil {
    let ax = [0, 1, 2].map(|a| axis_stencil(c[a], grid.dims[a]));
    let mut index = [0usize; 8];
    let mut weight = [0f64; 8];
    for (k, (ix, w)) in index.iter_mut().zip(weight.iter_mut()).enumerate() {
        let (dx, dy, dz) = ((k >> 2) & 1, (k >> 1) & 1, k & 1);
        let i = if dx == 0 { ax[0].0 } else { ax[0].1 };
        let j = if dy == 0 { ax[1].0 } else { ax[1].1 };
        let l = if dz == 0 { ax[2].0 } else { ax[2].1 };
        let wx = if dx == 0 { 1.0 - ax[0].2 } else { ax[0].2 };
        let wy = if dy == 0 { 1.0 - ax[1].2 } else { ax[1].2 };
        let wz = if dz == 0 { 1.0 - ax[2].2 } else { ax[2].2 };
        *ix = grid.linear_index([i, j, l]);
        *w = wx * wy * wz;
    }
    Stencil { index, weight }
}

const REGION_TOL: f64 = 1e-9;

/// Trilinear stencil for `x`, failing outside the region spanned by voxel centers.
pub fn trilinear_stencil(grid: &GridSpec, x: &Vec3) -> Result<Stencil> {
    let v = world_to_voxel(grid, x);
    let c = [v.x - 0.5, v.y - 0.5, v.z - 0.5];
    for a in 0..3 {
        let hi = (grid.dims[a] - 1) as f64;
        if !(c[a] >= -REGION_TOL && c[a] <= hi + REGION_TOL) {
            return Err(Error::OutOfBounds {
                point: [x.x, x.y, x.z],
            });
        }
    }
    Ok(stencil_from_center_coords(grid, c))
}

/// Trilinear stencil with the query clamped into the interpolable region.
/// The flag reports whether clamping was applied.
pub fn trilinear_stencil_clamped(grid: &GridSpec, x: &Vec3) -> (Stencil, bool) {
    let v = world_to_voxel(grid, x);
    let mut clamped = false;
    let c = [0, 1, 2].map(|a| {
        let hi = (grid.dims[a] - 1) as f64;
        let raw = v[a] - 0.5;
        if raw < -REGION_TOL || raw > hi + REGION_TOL {
            clamped = true;
        }
        raw.clamp(0.0, hi)
    });
    (stencil_from_center_coords(grid, c), clamped)
}

pub fn trilinear(vol: &VoxelVolume, x: &Vec3) -> Result<Vec<f64>> {
    let st = trilinear_stencil(&vol.grid, x)?;
    Ok(vol.apply_stencil(&st))
}

/// Voxels pierced by the ray segment, in traversal order (Amanatides–Woo).
pub fn ray_voxel_traversal(grid: &GridSpec, ray: &Ray) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for_each_traversed_voxel(grid, ray, |v| out.push(v));
    out
}

/// Visitor form of [`ray_voxel_traversal`]; avoids allocating per ray.
pub fn for_each_traversed_voxel(grid: &GridSpec, ray: &Ray, mut visit: impl FnMut([usize; 3])) {
    let Some((t0, t1)) = grid.aabb().clip(ray) else {
        return;
    };
    if !(t1 > t0) {
        return;
    }
    let vs = grid.voxel_size;
    let origin = grid.origin_vec();
    let entry = ray.at(t0);
    let mut idx = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let c = ((entry[a] - origin[a]) / vs).floor() as i64;
        idx[a] = c.clamp(0, grid.dims[a] as i64 - 1);
        let d = ray.direction[a];
        if d > 0.0 {
            step[a] = 1;
            let boundary = origin[a] + (idx[a] + 1) as f64 * vs;
            t_max[a] = (boundary - ray.origin[a]) / d;
            t_delta[a] = vs / d;
        } else if d < 0.0 {
            step[a] = -1;
            let boundary = origin[a] + idx[a] as f64 * vs;
            t_max[a] = (boundary - ray.origin[a]) / d;
            t_delta[a] = -vs / d;
        }
    }
    loop {
        visit([idx[0] as usize, idx[1] as usize, idx[2] as usize]);
        let mut axis = 0;
        if t_max[1] < t_max[axis] {
            axis = 1;
        }
        if t_max[2] < t_max[axis] {
            axis = 2;
        }
        if t_max[axis] >= t1 {
            break;
        }
        idx[axis] += step[axis];
        if idx[axis] < 0 || idx[axis] >= grid.dims[axis] as i64 {
            break;
        }
        t_max[axis] += t_delta[axis];
    }
}
