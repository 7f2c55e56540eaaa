//! Axis-aligned boxes, rays, cameras, and intersection arithmetic.
//!
//! Everything here is an immutable value type and every operation is pure,
//! so traversal and sampling can fan out across workers freely.

use crate::{Error, Result};
use std::ops::{Add, AddAssign, Div, Index, Mul, Neg, Sub};

pub const UNIT_EPS: f64 = 1e-6;

/// 3-component f64 vector.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn splat(v: f64) -> Self {
        Vec3::new(v, v, v)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self / self.norm()
    }

    pub fn is_unit(self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_EPS
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn min_by_component(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max_by_component(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn clamp01(self) -> Vec3 {
        Vec3::new(self.x.clamp(0.0, 1.0), self.y.clamp(0.0, 1.0), self.z.clamp(0.0, 1.0))
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("vector index {i} out of range"),
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for Vec3 {
    type Output = Vec3;
    fn mul(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Axis-aligned bounding box with strictly positive extent on every axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    min: Vec3,
    max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if !min.is_finite() || !max.is_finite() {
            return Err(Error::Geometry("aabb corners must be finite".into()));
        }
        for k in 0..3 {
            if !(min[k] < max[k]) {
                return Err(Error::Geometry(format!(
                    "aabb extent must be positive on axis {k}: min {} >= max {}",
                    min[k], max[k]
                )));
            }
        }
        Ok(Aabb { min, max })
    }

    pub fn min(&self) -> Vec3 {
        self.min
    }

    pub fn max(&self) -> Vec3 {
        self.max
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    /// Closed-box membership test.
    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|k| self.min[k] <= p[k] && p[k] <= self.max[k])
    }

    /// Longest axis (ties resolved toward the lower index).
    pub fn longest_axis(&self) -> usize {
        let e = self.extent();
        let mut axis = 0;
        for k in 1..3 {
            if e[k] > e[axis] {
                axis = k;
            }
        }
        axis
    }
}

/// Half-line from `origin` along unit `direction`, tagged with the pixel it
/// came from.
#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub ray_id: u32,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, ray_id: u32) -> Result<Self> {
        if !direction.is_unit() {
            return Err(Error::Geometry(format!(
                "ray direction must be unit length, got norm {}",
                direction.norm()
            )));
        }
        Ok(Ray { origin, direction, ray_id })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Slab-method ray/box intersection, clipped to the forward half-line.
///
/// Returns `(t_enter, t_exit)` with `0 <= t_enter <= t_exit`, or `None` when
/// the box is missed or lies entirely behind the origin. Zero direction
/// components fall out of IEEE infinity arithmetic; no epsilon branching.
pub fn ray_aabb_intersect(ray: &Ray, aabb: &Aabb) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        let inv = 1.0 / ray.direction[k];
        let mut near = (aabb.min[k] - ray.origin[k]) * inv;
        let mut far = (aabb.max[k] - ray.origin[k]) * inv;
        if near > far {
            std::mem::swap(&mut near, &mut far);
        }
        // dir[k] == 0 gives (±inf, ±inf) or (NaN, NaN) when the origin sits
        // exactly on a slab plane; NaN comparisons are false, which keeps the
        // previous bounds, i.e. the degenerate axis imposes no constraint.
        if near > t0 {
            t0 = near;
        }
        if far < t1 {
            t1 = far;
        }
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Pinhole camera with an orthonormal basis.
#[derive(Clone, Copy, Debug)]
pub struct Camera {
    pub position: Vec3,
    pub forward: Vec3,
    pub up: Vec3,
    pub right: Vec3,
    pub fov_y: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(
        position: Vec3,
        forward: Vec3,
        up: Vec3,
        right: Vec3,
        fov_y: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        for (name, v) in [("forward", forward), ("up", up), ("right", right)] {
            if !v.is_unit() {
                return Err(Error::Geometry(format!("camera {name} must be unit length")));
            }
        }
        for (a, b, what) in [
            (forward, up, "forward/up"),
            (forward, right, "forward/right"),
            (up, right, "up/right"),
        ] {
            if a.dot(b).abs() > UNIT_EPS {
                return Err(Error::Geometry(format!("camera basis not orthogonal: {what}")));
            }
        }
        if !(fov_y > 0.0 && fov_y < std::f64::consts::PI) {
            return Err(Error::Geometry(format!("fov_y must be in (0, pi), got {fov_y}")));
        }
        Ok(Camera { position, forward, up, right, fov_y, width, height })
    }

    /// Orthonormalizes a look-at specification into a camera.
    pub fn look_at(
        position: Vec3,
        target: Vec3,
        up_hint: Vec3,
        fov_y: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let gaze = target - position;
        if gaze.norm() < UNIT_EPS {
            return Err(Error::Geometry("camera target coincides with position".into()));
        }
        let forward = gaze.normalized();
        let right = forward.cross(up_hint);
        if right.norm() < UNIT_EPS {
            return Err(Error::Geometry("camera up is parallel to the view direction".into()));
        }
        let right = right.normalized();
        let up = right.cross(forward).normalized();
        Camera::new(position, forward, up, right, fov_y, width, height)
    }
}

/// One ray per pixel center, row-major; `ray_id = y * width + x`.
pub fn generate_camera_rays(cam: &Camera) -> Result<Vec<Ray>> {
    if cam.width == 0 || cam.height == 0 {
        return Err(Error::Geometry("camera resolution must be nonzero".into()));
    }
    let tan_half = (cam.fov_y * 0.5).tan();
    let aspect = cam.width as f64 / cam.height as f64;
    let mut rays = Vec::with_capacity((cam.width * cam.height) as usize);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let u = ((x as f64 + 0.5) / cam.width as f64) * 2.0 - 1.0;
            let v = 1.0 - ((y as f64 + 0.5) / cam.height as f64) * 2.0;
            let dir = (cam.forward
                + cam.right * (u * tan_half * aspect)
                + cam.up * (v * tan_half))
                .normalized();
            rays.push(Ray { origin: cam.position, direction: dir, ray_id: y * cam.width + x });
        }
    }
    Ok(rays)
}

/// Splits a box on `axis` at `position`, which must lie strictly inside.
///
/// The children share the splitting plane; by convention a point with
/// coordinate equal to `position` belongs to the right child.
pub fn aabb_split(aabb: &Aabb, axis: usize, position: f64) -> Result<(Aabb, Aabb)> {
    if axis > 2 {
        return Err(Error::Geometry(format!("split axis {axis} out of range")));
    }
    if !(aabb.min[axis] < position && position < aabb.max[axis]) {
        return Err(Error::Geometry(format!(
            "split position {position} not strictly inside [{}, {}] on axis {axis}",
            aabb.min[axis], aabb.max[axis]
        )));
    }
    let mut left_max = aabb.max;
    let mut right_min = aabb.min;
    match axis {
        0 => {
            left_max.x = position;
            right_min.x = position;
        }
        1 => {
            left_max.y = position;
            right_min.y = position;
        }
        _ => {
            left_max.z = position;
            right_min.z = position;
        }
    }
    Ok((Aabb { min: aabb.min, max: left_max }, Aabb { min: right_min, max: aabb.max }))
}
