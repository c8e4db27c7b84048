//! Vector and plane math for gaze raycasting.
//!
//! The collision plane is a bounded rectangle in world space carrying a pixel
//! grid. Pixel `(0, 0)` sits at the plane origin corner, `u` grows along
//! `u_axis` and `v` grows along `v_axis`.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for geometric predicates (orthogonality, unit length, parallel rays).
pub const GEOMETRY_EPS: f64 = 1e-9;
/// A direction counts as normalized when its norm is within this of 1.
pub const UNIT_NORM_TOL: f64 = 1e-6;
/// Maximum pixel error of a pixel -> world -> raycast -> pixel round trip.
pub const ROUND_TRIP_TOL_PX: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid collision plane: {0}")]
    InvalidPlane(String),
    #[error("ray direction is not unit length (norm {0})")]
    NotNormalized(f64),
    #[error("ray has non-finite components")]
    NonFinite,
    #[error("cannot normalize a zero-length vector")]
    ZeroLength,
}

/// A point or direction in 3D world space. Serialized as `[x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Vec3) -> Vec3 {
        Vec3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, other: Vec3) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn normalized(self) -> Result<Vec3, GeometryError> {
        if !self.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        let n = self.norm();
        if n <= f64::MIN_POSITIVE {
            return Err(GeometryError::ZeroLength);
        }
        Ok(self * (1.0 / n))
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        [v.x, v.y, v.z]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
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

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Raw plane description as it appears in configuration files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub origin: Vec3,
    pub u_axis: Vec3,
    pub v_axis: Vec3,
    pub width_m: f64,
    pub height_m: f64,
    pub res_w: u32,
    pub res_h: u32,
}

/// A bounded, validated plane with a `res_w x res_h` pixel grid.
///
/// Construct through [`CollisionPlane::new`]; an instance always has an
/// orthonormal in-plane basis and positive extents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PlaneSpec", into = "PlaneSpec")]
pub struct CollisionPlane {
    origin: Vec3,
    u_axis: Vec3,
    v_axis: Vec3,
    normal: Vec3,
    width_m: f64,
    height_m: f64,
    res_w: u32,
    res_h: u32,
}

impl CollisionPlane {
    pub fn new(spec: PlaneSpec) -> Result<Self, GeometryError> {
        let PlaneSpec {
            origin,
            u_axis,
            v_axis,
            width_m,
            height_m,
            res_w,
            res_h,
        } = spec;
        let bad = |msg: String| Err(GeometryError::InvalidPlane(msg));
        if !(origin.is_finite() && u_axis.is_finite() && v_axis.is_finite()) {
            return bad("non-finite origin or axis".into());
        }
        if (u_axis.norm() - 1.0).abs() > GEOMETRY_EPS {
            return bad(format!("u_axis is not unit length (norm {})", u_axis.norm()));
        }
        if (v_axis.norm() - 1.0).abs() > GEOMETRY_EPS {
            return bad(format!("v_axis is not unit length (norm {})", v_axis.norm()));
        }
        if u_axis.dot(v_axis).abs() > GEOMETRY_EPS {
            return bad(format!(
                "u_axis and v_axis are not orthogonal (dot {})",
                u_axis.dot(v_axis)
            ));
        }
        if !(width_m > 0.0 && width_m.is_finite() && height_m > 0.0 && height_m.is_finite()) {
            return bad(format!("extent must be positive, got {width_m} x {height_m}"));
        }
        if res_w == 0 || res_h == 0 {
            return bad(format!("resolution must be at least 1x1, got {res_w}x{res_h}"));
        }
        Ok(Self {
            origin,
            u_axis,
            v_axis,
            normal: u_axis.cross(v_axis),
            width_m,
            height_m,
            res_w,
            res_h,
        })
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }
    pub fn u_axis(&self) -> Vec3 {
        self.u_axis
    }
    pub fn v_axis(&self) -> Vec3 {
        self.v_axis
    }
    /// `u_axis x v_axis`, unit length by construction.
    pub fn normal(&self) -> Vec3 {
        self.normal
    }
    pub fn width_m(&self) -> f64 {
        self.width_m
    }
    pub fn height_m(&self) -> f64 {
        self.height_m
    }
    pub fn res_w(&self) -> u32 {
        self.res_w
    }
    pub fn res_h(&self) -> u32 {
        self.res_h
    }

    /// Signed distance of `p` from the plane along its normal.
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        self.normal.dot(p - self.origin)
    }
}

impl TryFrom<PlaneSpec> for CollisionPlane {
    type Error = GeometryError;
    fn try_from(spec: PlaneSpec) -> Result<Self, Self::Error> {
        CollisionPlane::new(spec)
    }
}

impl From<CollisionPlane> for PlaneSpec {
    fn from(p: CollisionPlane) -> Self {
        PlaneSpec {
            origin: p.origin,
            u_axis: p.u_axis,
            v_axis: p.v_axis,
            width_m: p.width_m,
            height_m: p.height_m,
            res_w: p.res_w,
            res_h: p.res_h,
        }
    }
}

/// Where a gaze ray met the collision plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneHit {
    pub point: Vec3,
    pub u: f64,
    pub v: f64,
    /// Ray parameter, meters along the unit direction.
    pub distance: f64,
}

/// Intersects a ray with the bounded plane.
///
/// `Ok(None)` is a miss: the ray is parallel, the plane is behind the ray
/// origin, or the intersection falls outside the plane rectangle. Errors are
/// reserved for malformed rays.
pub fn raycast(
    plane: &CollisionPlane,
    ray_origin: Vec3,
    ray_dir: Vec3,
) -> Result<Option<PlaneHit>, GeometryError> {
    if !ray_origin.is_finite() || !ray_dir.is_finite() {
        return Err(GeometryError::NonFinite);
    }
    let norm = ray_dir.norm();
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(GeometryError::NotNormalized(norm));
    }

    let denom = ray_dir.dot(plane.normal);
    if denom.abs() < GEOMETRY_EPS {
        return Ok(None);
    }
    let distance = (plane.origin - ray_origin).dot(plane.normal) / denom;
    if distance <= 0.0 {
        return Ok(None);
    }

    let local = ray_origin + ray_dir * distance - plane.origin;
    let local_u = clamp_edge(local.dot(plane.u_axis), plane.width_m);
    let local_v = clamp_edge(local.dot(plane.v_axis), plane.height_m);
    let (Some(local_u), Some(local_v)) = (local_u, local_v) else {
        return Ok(None);
    };

    // Rebuild the point from its in-plane coordinates so it lies on the plane
    // to rounding precision regardless of how far the ray travelled.
    let point = plane.origin + plane.u_axis * local_u + plane.v_axis * local_v;
    Ok(Some(PlaneHit {
        point,
        u: local_u / plane.width_m * plane.res_w as f64,
        v: local_v / plane.height_m * plane.res_h as f64,
        distance,
    }))
}

// Accepts coordinates up to GEOMETRY_EPS outside [0, extent] so that hits
// exactly on an edge survive floating-point noise; anything further is a miss.
fn clamp_edge(x: f64, extent: f64) -> Option<f64> {
    if x < -GEOMETRY_EPS || x > extent + GEOMETRY_EPS {
        None
    } else {
        Some(x.clamp(0.0, extent))
    }
}

/// Inverse of the pixel mapping in [`raycast`]: the world point at plane pixel `(u, v)`.
pub fn pixel_to_world(plane: &CollisionPlane, u: f64, v: f64) -> Vec3 {
    let local_u = u / plane.res_w as f64 * plane.width_m;
    let local_v = v / plane.res_h as f64 * plane.height_m;
    plane.origin + plane.u_axis * local_u + plane.v_axis * local_v
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_plane() -> CollisionPlane {
        CollisionPlane::new(PlaneSpec {
            origin: Vec3::new(0.0, 0.0, 1.0),
            u_axis: Vec3::new(1.0, 0.0, 0.0),
            v_axis: Vec3::new(0.0, 1.0, 0.0),
            width_m: 1.0,
            height_m: 1.0,
            res_w: 100,
            res_h: 100,
        })
        .unwrap()
    }

    fn tilted_plane() -> CollisionPlane {
        let u = Vec3::new(1.0, 0.0, 1.0).normalized().unwrap();
        let v = Vec3::new(0.0, 1.0, 0.0);
        CollisionPlane::new(PlaneSpec {
            origin: Vec3::new(-0.3, -0.2, 0.8),
            u_axis: u,
            v_axis: v,
            width_m: 1.6,
            height_m: 0.9,
            res_w: 1920,
            res_h: 1080,
        })
        .unwrap()
    }

    #[test]
    fn perpendicular_center_ray() {
        let hit = raycast(&unit_plane(), Vec3::new(0.5, 0.5, 0.0), Vec3::new(0.0, 0.0, 1.0))
            .unwrap()
            .unwrap();
        assert_eq!(hit.point, Vec3::new(0.5, 0.5, 1.0));
        assert_eq!((hit.u, hit.v), (50.0, 50.0));
        assert_eq!(hit.distance, 1.0);
    }

    #[test]
    fn ray_pointing_away_misses() {
        let r = raycast(&unit_plane(), Vec3::new(0.5, 0.5, 0.0), Vec3::new(0.0, 0.0, -1.0));
        assert_eq!(r, Ok(None));
    }

    #[test]
    fn oblique_ray_hits_expected_pixel() {
        let dir = Vec3::new(0.3, 0.4, 1.0).normalized().unwrap();
        let hit = raycast(&unit_plane(), Vec3::ZERO, dir).unwrap().unwrap();
        // Independent check: the parametric ray reaches z = 1 at t = |(0.3,0.4,1)|.
        let t = Vec3::new(0.3, 0.4, 1.0).norm();
        let expected = dir * t;
        assert!(hit.point.distance(Vec3::new(0.3, 0.4, 1.0)) < 1e-12);
        assert!(expected.distance(hit.point) < 1e-12);
        assert!((hit.distance - t).abs() < 1e-12);
        assert!((hit.u - 30.0).abs() < 1e-9);
        assert!((hit.v - 40.0).abs() < 1e-9);
    }

    #[test]
    fn parallel_ray_misses() {
        let r = raycast(&unit_plane(), Vec3::new(0.5, 0.5, 0.0), Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(r, Ok(None));
    }

    #[test]
    fn out_of_extent_is_miss_not_clamped() {
        let dir = Vec3::new(1.0, 0.0, 1.0).normalized().unwrap();
        let r = raycast(&unit_plane(), Vec3::new(0.5, 0.5, 0.0), dir);
        assert_eq!(r, Ok(None));
    }

    #[test]
    fn edge_hit_is_inside() {
        let hit = raycast(&unit_plane(), Vec3::new(1.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0))
            .unwrap()
            .unwrap();
        assert_eq!((hit.u, hit.v), (100.0, 100.0));
    }

    #[test]
    fn origin_on_plane_is_miss() {
        let r = raycast(&unit_plane(), Vec3::new(0.5, 0.5, 1.0), Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(r, Ok(None));
    }

    #[test]
    fn unnormalized_direction_is_error() {
        let r = raycast(&unit_plane(), Vec3::ZERO, Vec3::new(0.0, 0.0, 2.0));
        assert!(matches!(r, Err(GeometryError::NotNormalized(_))));
        let r = raycast(&unit_plane(), Vec3::new(f64::NAN, 0.0, 0.0), Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(r, Err(GeometryError::NonFinite));
    }

    #[test]
    fn degenerate_planes_are_rejected() {
        let base = PlaneSpec {
            origin: Vec3::ZERO,
            u_axis: Vec3::new(1.0, 0.0, 0.0),
            v_axis: Vec3::new(0.0, 1.0, 0.0),
            width_m: 1.0,
            height_m: 1.0,
            res_w: 10,
            res_h: 10,
        };
        let cases = [
            PlaneSpec { v_axis: Vec3::new(1.0, 0.0, 0.0), ..base.clone() },
            PlaneSpec { u_axis: Vec3::new(2.0, 0.0, 0.0), ..base.clone() },
            PlaneSpec { v_axis: Vec3::new(0.1, 1.0, 0.0).normalized().unwrap(), ..base.clone() },
            PlaneSpec { width_m: 0.0, ..base.clone() },
            PlaneSpec { height_m: -1.0, ..base.clone() },
            PlaneSpec { res_w: 0, ..base.clone() },
        ];
        for spec in cases {
            assert!(matches!(CollisionPlane::new(spec), Err(GeometryError::InvalidPlane(_))));
        }
        assert!(CollisionPlane::new(base).is_ok());
    }

    #[test]
    fn plane_config_is_validated_on_deserialize() {
        let json = r#"{"origin":[0,0,0],"u_axis":[1,0,0],"v_axis":[1,0,0],
            "width_m":1,"height_m":1,"res_w":10,"res_h":10}"#;
        assert!(serde_json::from_str::<CollisionPlane>(json).is_err());
    }

    #[test]
    fn pixel_to_world_corners() {
        let p = unit_plane();
        assert_eq!(pixel_to_world(&p, 0.0, 0.0), p.origin());
        assert_eq!(pixel_to_world(&p, 100.0, 100.0), Vec3::new(1.0, 1.0, 1.0));
        assert_eq!(pixel_to_world(&p, 50.0, 50.0), Vec3::new(0.5, 0.5, 1.0));
        let t = tilted_plane();
        let far = t.origin() + t.u_axis() * t.width_m() + t.v_axis() * t.height_m();
        assert!(pixel_to_world(&t, 1920.0, 1080.0).distance(far) < 1e-12);
    }

    fn in_pixel() -> impl Strategy<Value = (f64, f64)> {
        (0.0..=1920.0f64, 0.0..=1080.0f64)
    }

    proptest! {
        #[test]
        fn round_trip_through_world((u, v) in in_pixel(),
                                    off in prop_oneof![-3.0..-0.1f64, 0.1..3.0f64],
                                    a in -2.0..2.0f64, b in -2.0..2.0f64) {
            let plane = tilted_plane();
            let center = pixel_to_world(&plane, 960.0, 540.0);
            let eye = center + plane.u_axis() * a + plane.v_axis() * b + plane.normal() * off;
            let target = pixel_to_world(&plane, u, v);
            let dir = (target - eye).normalized().unwrap();
            let hit = raycast(&plane, eye, dir).unwrap().expect("ray toward an in-bounds pixel must hit");
            prop_assert!((hit.u - u).abs() < ROUND_TRIP_TOL_PX, "u {} vs {}", hit.u, u);
            prop_assert!((hit.v - v).abs() < ROUND_TRIP_TOL_PX, "v {} vs {}", hit.v, v);
        }

        #[test]
        fn hits_lie_on_plane(ox in -1.0..1.0f64, oy in -1.0..1.0f64, oz in -1.0..0.7f64,
                             dx in -1.0..1.0f64, dy in -1.0..1.0f64, dz in 0.05..1.0f64) {
            let plane = tilted_plane();
            let dir = Vec3::new(dx, dy, dz).normalized().unwrap();
            if let Some(hit) = raycast(&plane, Vec3::new(ox, oy, oz), dir).unwrap() {
                prop_assert!(plane.signed_distance(hit.point).abs() < GEOMETRY_EPS);
                prop_assert!(hit.u >= 0.0 && hit.u <= 1920.0);
                prop_assert!(hit.v >= 0.0 && hit.v <= 1080.0);
                prop_assert!(hit.distance > 0.0);
            }
        }

        #[test]
        fn u_is_monotone_in_local_u(a in 0.0..0.8f64, d in 1e-6..0.8f64, v in 0.0..0.9f64) {
            let plane = tilted_plane();
            let eye = pixel_to_world(&plane, 960.0, 540.0) - plane.normal() * 0.7;
            let p1 = plane.origin() + plane.u_axis() * a + plane.v_axis() * v;
            let p2 = p1 + plane.u_axis() * d;
            let h1 = raycast(&plane, eye, (p1 - eye).normalized().unwrap()).unwrap().unwrap();
            let h2 = raycast(&plane, eye, (p2 - eye).normalized().unwrap()).unwrap().unwrap();
            prop_assert!(h2.u > h1.u);
        }
    }
}
