use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{GeometryError, Pose};

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 600.0,
            fy: 600.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics)
        }
    }

    /// Projects a camera-frame point.
    pub fn project_point(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if !(p.z > 1e-6) {
            return Err(GeometryError::BehindCamera);
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Unit direction of the camera ray through pixel `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0).normalize()
    }
}

/// Projects object-frame points placed by `pose`.
pub fn project(
    k: &CameraIntrinsics,
    pose: &Pose,
    pts: &[Vector3<f64>],
) -> Result<Vec<Vector2<f64>>, GeometryError> {
    pts.iter()
        .map(|p| k.project_point(&pose.transform_point(p)))
        .collect()
}

/// Axis-aligned image box as center and extent (pixels).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox2D {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox2D {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if w > 0.0 && h > 0.0 && cx.is_finite() && cy.is_finite() {
            Ok(Self { cx, cy, w, h })
        } else {
            Err(GeometryError::InvalidBox)
        }
    }

    pub fn from_min_max(u0: f64, v0: f64, u1: f64, v1: f64) -> Result<Self, GeometryError> {
        Self::new((u0 + u1) / 2.0, (v0 + v1) / 2.0, u1 - u0, v1 - v0)
    }

    pub fn min(&self) -> (f64, f64) {
        (self.cx - self.w / 2.0, self.cy - self.h / 2.0)
    }

    pub fn max(&self) -> (f64, f64) {
        (self.cx + self.w / 2.0, self.cy + self.h / 2.0)
    }

    pub fn contains_box(&self, other: &BBox2D) -> bool {
        let (a0, b0) = self.min();
        let (a1, b1) = self.max();
        let (c0, d0) = other.min();
        let (c1, d1) = other.max();
        a0 <= c0 + 1e-9 && b0 <= d0 + 1e-9 && a1 >= c1 - 1e-9 && b1 >= d1 - 1e-9
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        Self::new(self.cx, self.cy, self.w, self.h).map(|_| ())
    }
}

/// Box-relative, scale-invariant encoding of an object translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteTranslation {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl SiteTranslation {
    pub fn to_array(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dz]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self {
            dx: a[0],
            dy: a[1],
            dz: a[2],
        }
    }
}

/// `dx, dy`: projected-center offset from the box center in box extents;
/// `dz`: depth scaled by `max(w, h) / fx`.
pub fn site_encode(
    t: &Vector3<f64>,
    bbox: &BBox2D,
    k: &CameraIntrinsics,
) -> Result<SiteTranslation, GeometryError> {
    bbox.validate()?;
    let o = k.project_point(t)?;
    Ok(SiteTranslation {
        dx: (o.x - bbox.cx) / bbox.w,
        dy: (o.y - bbox.cy) / bbox.h,
        dz: t.z * bbox.w.max(bbox.h) / k.fx,
    })
}

pub fn site_decode(s: &SiteTranslation, bbox: &BBox2D, k: &CameraIntrinsics) -> Vector3<f64> {
    let tz = s.dz * k.fx / bbox.w.max(bbox.h);
    let u = s.dx * bbox.w + bbox.cx;
    let v = s.dy * bbox.h + bbox.cy;
    Vector3::new((u - k.cx) * tz / k.fx, (v - k.cy) * tz / k.fy, tz)
}
