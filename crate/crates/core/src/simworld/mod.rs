//! Tabletop scene, orthographic camera views and the simulated arm.
//!
//! Table frame: `x` runs across the table width, `y` into its depth, `z` up,
//! with the table top at `z = 0` and its near-left corner at the origin.

mod robot;

pub use robot::{
    is_allowed_transition, PhaseDurations, PhaseTransition, RobotArm, RobotConfig, RobotError,
    RobotPhase, RobotState,
};

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CollisionPlane, PlaneSpec, Vec3, GEOMETRY_EPS};
use crate::perception::{BoundingBox, DetectionSet, ImageResolution, View};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("scene config does not parse: {0}")]
    Parse(String),
    #[error("cannot read scene file {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("object {id}: field `{field}` {reason}")]
    Object {
        id: String,
        field: &'static str,
        reason: String,
    },
    #[error("duplicate object id {0}")]
    DuplicateId(String),
    #[error("table: {0}")]
    Table(String),
    #[error("{view} view: {reason}")]
    View { view: View, reason: String },
    #[error("headset: {0}")]
    Headset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub width_m: f64,
    pub depth_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectLocation {
    OnTable,
    Grasped,
    InPlaceZone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: String,
    pub label: String,
    pub position: Vec3,
    pub half_extents: Vec3,
    pub location: ObjectLocation,
}

impl SceneObject {
    fn corners(&self) -> impl Iterator<Item = Vec3> + '_ {
        (0..8).map(move |i| {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            self.position
                + Vec3::new(
                    sx * self.half_extents.x,
                    sy * self.half_extents.y,
                    sz * self.half_extents.z,
                )
        })
    }
}

/// Projection parameters as written in scene files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewSpec {
    /// Table-frame point that maps to pixel `(0, 0)`.
    pub origin: Vec3,
    /// Image-right direction in the table frame.
    pub u_axis: Vec3,
    /// Image-down direction in the table frame.
    pub v_axis: Vec3,
    pub pixels_per_meter: f64,
    pub width_px: u32,
    pub height_px: u32,
}

/// Orthographic camera: `pixel = ((p - origin) . u_axis, (p - origin) . v_axis) * ppm`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrthoView {
    pub view: View,
    pub origin: Vec3,
    pub u_axis: Vec3,
    pub v_axis: Vec3,
    pub pixels_per_meter: f64,
    pub resolution: ImageResolution,
}

impl OrthoView {
    fn from_spec(view: View, spec: &ViewSpec) -> Result<Self, SceneError> {
        let fail = |reason: String| Err(SceneError::View { view, reason });
        if !(spec.origin.is_finite() && spec.u_axis.is_finite() && spec.v_axis.is_finite()) {
            return fail("non-finite origin or axis".into());
        }
        if (spec.u_axis.norm() - 1.0).abs() > GEOMETRY_EPS
            || (spec.v_axis.norm() - 1.0).abs() > GEOMETRY_EPS
        {
            return fail("axes must be unit length".into());
        }
        if spec.u_axis.dot(spec.v_axis).abs() > GEOMETRY_EPS {
            return fail("axes must be orthogonal".into());
        }
        if !(spec.pixels_per_meter > 0.0 && spec.pixels_per_meter.is_finite()) {
            return fail(format!(
                "pixels_per_meter must be positive, got {}",
                spec.pixels_per_meter
            ));
        }
        let resolution = ImageResolution::new(spec.width_px, spec.height_px)
            .map_err(|e| SceneError::View { view, reason: e.to_string() })?;
        Ok(Self {
            view,
            origin: spec.origin,
            u_axis: spec.u_axis,
            v_axis: spec.v_axis,
            pixels_per_meter: spec.pixels_per_meter,
            resolution,
        })
    }

    pub fn project_point(&self, p: Vec3) -> (f64, f64) {
        let d = p - self.origin;
        (
            d.dot(self.u_axis) * self.pixels_per_meter,
            d.dot(self.v_axis) * self.pixels_per_meter,
        )
    }

    fn contains_with_slack(&self, (u, v): (f64, f64)) -> bool {
        let slack = 1e-6;
        u >= -slack
            && v >= -slack
            && u <= self.resolution.width_px as f64 + slack
            && v <= self.resolution.height_px as f64 + slack
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadsetConfig {
    /// Virtual eye point gaze rays start from.
    pub eye: Vec3,
    pub plane: PlaneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Headset {
    pub eye: Vec3,
    pub plane: CollisionPlane,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewsConfig {
    pub user: ViewSpec,
    pub robot: ViewSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectConfig {
    pub id: String,
    pub label: String,
    pub position: Vec3,
    pub half_extents: Vec3,
}

/// On-disk scene document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    #[serde(default)]
    pub id: Option<String>,
    pub table: Table,
    #[serde(default)]
    pub views: Option<ViewsConfig>,
    #[serde(default)]
    pub headset: Option<HeadsetConfig>,
    #[serde(default)]
    pub place_zone: Option<Vec3>,
    pub objects: Vec<ObjectConfig>,
}

impl ViewsConfig {
    /// Top-down robot camera at 1000 px/m and a side-on user view that
    /// spans the table width with a margin on each side.
    pub fn default_for(table: Table) -> Self {
        let robot = ViewSpec {
            origin: Vec3::ZERO,
            u_axis: Vec3::new(1.0, 0.0, 0.0),
            v_axis: Vec3::new(0.0, 1.0, 0.0),
            pixels_per_meter: 1000.0,
            width_px: (table.width_m * 1000.0).ceil() as u32,
            height_px: (table.depth_m * 1000.0).ceil() as u32,
        };
        let (w, h) = (1280u32, 720u32);
        let ppm = 960.0 / table.width_m;
        let user = ViewSpec {
            origin: Vec3::new(-160.0 / ppm, 0.0, h as f64 / ppm),
            u_axis: Vec3::new(1.0, 0.0, 0.0),
            v_axis: Vec3::new(0.0, 0.0, -1.0),
            pixels_per_meter: ppm,
            width_px: w,
            height_px: h,
        };
        Self { user, robot }
    }
}

impl Default for HeadsetConfig {
    /// Eye at the origin looking down +z at a 1.6 m x 0.9 m, 1920x1080 plane 1 m away.
    fn default() -> Self {
        Self {
            eye: Vec3::ZERO,
            plane: PlaneSpec {
                origin: Vec3::new(-0.8, -0.45, 1.0),
                u_axis: Vec3::new(1.0, 0.0, 0.0),
                v_axis: Vec3::new(0.0, 1.0, 0.0),
                width_m: 1.6,
                height_m: 0.9,
                res_w: 1920,
                res_h: 1080,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scene {
    pub id: Option<String>,
    pub table: Table,
    pub user_view: OrthoView,
    pub robot_view: OrthoView,
    pub headset: Headset,
    pub place_zone: Vec3,
    objects: Vec<SceneObject>,
}

impl Scene {
    pub fn from_config(config: SceneConfig) -> Result<Self, SceneError> {
        let table = config.table;
        if !(table.width_m > 0.0 && table.width_m.is_finite())
            || !(table.depth_m > 0.0 && table.depth_m.is_finite())
        {
            return Err(SceneError::Table(format!(
                "dimensions must be positive, got {} x {}",
                table.width_m, table.depth_m
            )));
        }

        let views = config.views.unwrap_or_else(|| ViewsConfig::default_for(table));
        let user_view = OrthoView::from_spec(View::UserView, &views.user)?;
        let robot_view = OrthoView::from_spec(View::RobotView, &views.robot)?;
        for view in [&user_view, &robot_view] {
            let corners = [
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(table.width_m, 0.0, 0.0),
                Vec3::new(0.0, table.depth_m, 0.0),
                Vec3::new(table.width_m, table.depth_m, 0.0),
            ];
            if let Some(c) = corners
                .iter()
                .find(|c| !view.contains_with_slack(view.project_point(**c)))
            {
                return Err(SceneError::View {
                    view: view.view,
                    reason: format!(
                        "table corner ({}, {}) projects outside the {}x{} image",
                        c.x, c.y, view.resolution.width_px, view.resolution.height_px
                    ),
                });
            }
        }

        let hs = config.headset.unwrap_or_default();
        let plane = CollisionPlane::new(hs.plane).map_err(|e| SceneError::Headset(e.to_string()))?;
        if !hs.eye.is_finite() || plane.signed_distance(hs.eye).abs() <= GEOMETRY_EPS {
            return Err(SceneError::Headset("eye must be a finite point off the plane".into()));
        }
        let headset = Headset { eye: hs.eye, plane };

        let place_zone = config
            .place_zone
            .unwrap_or(Vec3::new(table.width_m + 0.15, table.depth_m / 2.0, 0.0));

        let mut seen = HashSet::new();
        let mut objects = Vec::with_capacity(config.objects.len());
        for o in config.objects {
            validate_object(&o, table)?;
            if !seen.insert(o.id.clone()) {
                return Err(SceneError::DuplicateId(o.id));
            }
            objects.push(SceneObject {
                id: o.id,
                label: o.label,
                position: o.position,
                half_extents: o.half_extents,
                location: ObjectLocation::OnTable,
            });
        }

        Ok(Self {
            id: config.id,
            table,
            user_view,
            robot_view,
            headset,
            place_zone,
            objects,
        })
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn object(&self, id: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// The on-table object whose projected center lies inside `b` in `view`,
    /// nearest to the box center when several do.
    pub fn locate(&self, view: View, b: &BoundingBox) -> Option<&SceneObject> {
        let ortho = self.view(view);
        let (cu, cv) = b.center();
        self.objects
            .iter()
            .filter(|o| o.location == ObjectLocation::OnTable)
            .map(|o| (o, ortho.project_point(o.position)))
            .filter(|(_, (u, v))| b.contains(*u, *v))
            .min_by(|(_, a), (_, b)| {
                let da = (a.0 - cu).powi(2) + (a.1 - cv).powi(2);
                let db = (b.0 - cu).powi(2) + (b.1 - cv).powi(2);
                da.total_cmp(&db)
            })
            .map(|(o, _)| o)
    }

    pub(crate) fn object_mut(&mut self, id: &str) -> Option<&mut SceneObject> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    pub fn view(&self, view: View) -> &OrthoView {
        match view {
            View::UserView => &self.user_view,
            View::RobotView => &self.robot_view,
        }
    }
}

fn validate_object(o: &ObjectConfig, table: Table) -> Result<(), SceneError> {
    let fail = |field: &'static str, reason: String| {
        Err(SceneError::Object {
            id: o.id.clone(),
            field,
            reason,
        })
    };
    if o.id.is_empty() {
        return fail("id", "must not be empty".into());
    }
    if o.label.is_empty() {
        return fail("label", "must not be empty".into());
    }
    let he = o.half_extents;
    if !(he.is_finite() && he.x > 0.0 && he.y > 0.0 && he.z > 0.0) {
        return fail(
            "half_extents",
            format!("must be positive, got [{}, {}, {}]", he.x, he.y, he.z),
        );
    }
    let p = o.position;
    if !p.is_finite() {
        return fail("position", "must be finite".into());
    }
    let inside = p.x - he.x >= 0.0
        && p.x + he.x <= table.width_m
        && p.y - he.y >= 0.0
        && p.y + he.y <= table.depth_m;
    if !inside {
        return fail(
            "position",
            format!(
                "footprint x [{:.3}, {:.3}], y [{:.3}, {:.3}] leaves the table bounds [0, {}] x [0, {}]",
                p.x - he.x,
                p.x + he.x,
                p.y - he.y,
                p.y + he.y,
                table.width_m,
                table.depth_m
            ),
        );
    }
    Ok(())
}

pub fn load_scene(json: &str) -> Result<Scene, SceneError> {
    let config: SceneConfig =
        serde_json::from_str(json).map_err(|e| SceneError::Parse(e.to_string()))?;
    Scene::from_config(config)
}

pub fn load_scene_file(path: impl AsRef<Path>) -> Result<Scene, SceneError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| SceneError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    load_scene(&text)
}

/// Ground-truth boxes for every on-table object, clipped to the frame.
pub fn project(scene: &Scene, view: View, captured_at_ms: u64) -> DetectionSet {
    let ortho = scene.view(view);
    let (w, h) = (
        ortho.resolution.width_px as f64,
        ortho.resolution.height_px as f64,
    );
    let boxes = scene
        .objects
        .iter()
        .filter(|o| o.location == ObjectLocation::OnTable)
        .map(|o| {
            let (mut u1, mut v1) = (f64::INFINITY, f64::INFINITY);
            let (mut u2, mut v2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for c in o.corners() {
                let (u, v) = ortho.project_point(c);
                u1 = u1.min(u);
                v1 = v1.min(v);
                u2 = u2.max(u);
                v2 = v2.max(v);
            }
            BoundingBox {
                label: o.label.clone(),
                confidence: 1.0,
                u1: u1.clamp(0.0, w),
                v1: v1.clamp(0.0, h),
                u2: u2.clamp(0.0, w),
                v2: v2.clamp(0.0, h),
                instance_id: o.id.clone(),
            }
        })
        .collect();
    DetectionSet {
        view,
        resolution: ortho.resolution,
        boxes,
        captured_at_ms,
    }
}
