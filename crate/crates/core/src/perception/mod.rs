//! Detection sets, image-space rescaling and gaze hit testing.

mod provider;

pub use provider::{
    DetectRequest, DetectionError, DetectionProvider, ExternalConfig, ExternalProvider,
    SyntheticConfig, SyntheticProvider,
};

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptionError {
    #[error("point ({u}, {v}) is outside the {width}x{height} source image")]
    OutOfRange { u: f64, v: f64, width: u32, height: u32 },
    #[error("invalid resolution {0}x{1}")]
    InvalidResolution(u32, u32),
    #[error("invalid box {id}: {reason}")]
    InvalidBox { id: String, reason: String },
    #[error("duplicate instance id {0}")]
    DuplicateId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "user")]
    UserView,
    #[serde(rename = "robot")]
    RobotView,
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            View::UserView => "user",
            View::RobotView => "robot",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawResolution")]
pub struct ImageResolution {
    pub width_px: u32,
    pub height_px: u32,
}

#[derive(Deserialize)]
struct RawResolution {
    width_px: u32,
    height_px: u32,
}

impl TryFrom<RawResolution> for ImageResolution {
    type Error = PerceptionError;
    fn try_from(r: RawResolution) -> Result<Self, Self::Error> {
        ImageResolution::new(r.width_px, r.height_px)
    }
}

impl ImageResolution {
    pub fn new(width_px: u32, height_px: u32) -> Result<Self, PerceptionError> {
        if width_px == 0 || height_px == 0 {
            return Err(PerceptionError::InvalidResolution(width_px, height_px));
        }
        Ok(Self { width_px, height_px })
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        (0.0..=self.width_px as f64).contains(&u) && (0.0..=self.height_px as f64).contains(&v)
    }
}

/// Labeled detection box. `(u1, v1)` is the top-left corner, `(u2, v2)` the bottom-right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub label: String,
    pub confidence: f64,
    pub u1: f64,
    pub v1: f64,
    pub u2: f64,
    pub v2: f64,
    pub instance_id: String,
}

impl BoundingBox {
    pub fn area(&self) -> f64 {
        (self.u2 - self.u1) * (self.v2 - self.v1)
    }

    /// Boundary-inclusive containment.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        self.u1 <= u && u <= self.u2 && self.v1 <= v && v <= self.v2
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.u1 + self.u2) / 2.0, (self.v1 + self.v2) / 2.0)
    }

    pub fn validate(&self, res: ImageResolution) -> Result<(), PerceptionError> {
        let fail = |reason: String| {
            Err(PerceptionError::InvalidBox {
                id: self.instance_id.clone(),
                reason,
            })
        };
        let coords = [self.u1, self.v1, self.u2, self.v2];
        if coords.iter().any(|c| !c.is_finite()) {
            return fail("non-finite corner".into());
        }
        if self.u1 > self.u2 || self.v1 > self.v2 {
            return fail(format!(
                "corners out of order ({}, {}) .. ({}, {})",
                self.u1, self.v1, self.u2, self.v2
            ));
        }
        if !res.contains(self.u1, self.v1) || !res.contains(self.u2, self.v2) {
            return fail(format!(
                "box exceeds {}x{} image",
                res.width_px, res.height_px
            ));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return fail(format!("confidence {} outside [0, 1]", self.confidence));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub view: View,
    pub resolution: ImageResolution,
    pub boxes: Vec<BoundingBox>,
    pub captured_at_ms: u64,
}

impl DetectionSet {
    /// Builds a set, checking each box against the resolution and id uniqueness.
    pub fn new(
        view: View,
        resolution: ImageResolution,
        boxes: Vec<BoundingBox>,
        captured_at_ms: u64,
    ) -> Result<Self, PerceptionError> {
        let mut seen = HashSet::new();
        for b in &boxes {
            b.validate(resolution)?;
            if !seen.insert(b.instance_id.as_str()) {
                return Err(PerceptionError::DuplicateId(b.instance_id.clone()));
            }
        }
        Ok(Self {
            view,
            resolution,
            boxes,
            captured_at_ms,
        })
    }
}

/// Maps a point between image resolutions: `u' = u / W * W'`, `v' = v / H * H'`.
///
/// No rounding to integer pixels. Same-resolution calls return the input
/// unchanged.
pub fn rescale(
    u: f64,
    v: f64,
    from: ImageResolution,
    to: ImageResolution,
) -> Result<(f64, f64), PerceptionError> {
    if !from.contains(u, v) {
        return Err(PerceptionError::OutOfRange {
            u,
            v,
            width: from.width_px,
            height: from.height_px,
        });
    }
    if from == to {
        return Ok((u, v));
    }
    Ok((scale(u, to.width_px, from.width_px), scale(v, to.height_px, from.height_px)))
}

/// `x * num / den` with the ratio reduced first, so power-of-two ratios are
/// exact and integer-valued inputs stay exact when the result is representable.
fn scale(x: f64, num: u32, den: u32) -> f64 {
    let g = gcd(num, den);
    x * (num / g) as f64 / (den / g) as f64
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Order among boxes that all contain the gaze point: smallest area first,
/// then higher confidence, then instance id.
pub fn overlap_priority(a: &BoundingBox, b: &BoundingBox) -> Ordering {
    a.area()
        .total_cmp(&b.area())
        .then_with(|| b.confidence.total_cmp(&a.confidence))
        .then_with(|| a.instance_id.cmp(&b.instance_id))
}

/// Returns the box under `(u, v)`, resolving overlaps with [`overlap_priority`].
pub fn hit_test(u: f64, v: f64, dets: &DetectionSet) -> Option<&BoundingBox> {
    dets.boxes
        .iter()
        .filter(|b| b.contains(u, v))
        .min_by(|a, b| overlap_priority(a, b))
}

/// Drops boxes below `min_conf`, keeping order and ids.
pub fn confidence_gate(dets: &DetectionSet, min_conf: f64) -> DetectionSet {
    DetectionSet {
        boxes: dets
            .boxes
            .iter()
            .filter(|b| b.confidence >= min_conf)
            .cloned()
            .collect(),
        ..dets.clone()
    }
}
