//! Detection providers: a seeded synthetic detector over scene ground truth,
//! and a client for an external detection service.

use std::time::Duration;

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BoundingBox, DetectionSet, View};
use crate::simworld::{project, Scene};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectionError {
    #[error("{view} detector unavailable: {reason}")]
    Unavailable {
        view: View,
        reason: String,
        /// Whether repeating the request may succeed.
        retryable: bool,
    },
    #[error("{view} detector sent a malformed reply: {reason}")]
    Protocol { view: View, reason: String },
    #[error("invalid detector config: {0}")]
    Config(String),
}

impl DetectionError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, DetectionError::Unavailable { retryable: true, .. })
    }
}

/// Everything a provider may need to produce detections for one capture.
#[derive(Debug, Clone, Copy)]
pub struct DetectRequest<'a> {
    pub view: View,
    pub scene: &'a Scene,
    pub captured_at_ms: u64,
}

/// Source of detections for one view. Implementations must tolerate two
/// concurrent calls (user and robot view are captured together).
pub trait DetectionProvider: Send + Sync {
    fn detect(&self, request: &DetectRequest<'_>) -> Result<DetectionSet, DetectionError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Half-width of the uniform noise added to each box edge, in pixels.
    pub sigma_px: f64,
    pub conf_lo: f64,
    pub conf_hi: f64,
    /// Probability that an object goes undetected.
    pub p_miss: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            sigma_px: 2.0,
            conf_lo: 0.88,
            conf_hi: 0.99,
            p_miss: 0.0,
            seed: 0,
        }
    }
}

/// Projects scene ground truth and perturbs it.
///
/// Each call draws from a generator keyed on `(seed, view, captured_at_ms)`,
/// so results do not depend on call order or concurrency.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    config: SyntheticConfig,
}

impl SyntheticProvider {
    pub fn new(config: SyntheticConfig) -> Result<Self, DetectionError> {
        let c = &config;
        if !(c.sigma_px >= 0.0 && c.sigma_px.is_finite()) {
            return Err(DetectionError::Config(format!("sigma_px must be >= 0, got {}", c.sigma_px)));
        }
        if !(0.0 <= c.conf_lo && c.conf_lo <= c.conf_hi && c.conf_hi <= 1.0) {
            return Err(DetectionError::Config(format!(
                "need 0 <= conf_lo <= conf_hi <= 1, got [{}, {}]",
                c.conf_lo, c.conf_hi
            )));
        }
        if !(0.0..=1.0).contains(&c.p_miss) {
            return Err(DetectionError::Config(format!("p_miss {} outside [0, 1]", c.p_miss)));
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    fn rng_for(&self, view: View, captured_at_ms: u64) -> ChaCha8Rng {
        let view_tag = match view {
            View::UserView => 0x75,
            View::RobotView => 0x72,
        };
        let key = splitmix64(self.config.seed ^ splitmix64(captured_at_ms ^ (view_tag << 56)));
        ChaCha8Rng::seed_from_u64(key)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl DetectionProvider for SyntheticProvider {
    fn detect(&self, req: &DetectRequest<'_>) -> Result<DetectionSet, DetectionError> {
        let c = &self.config;
        let truth = project(req.scene, req.view, req.captured_at_ms);
        let (w, h) = (
            truth.resolution.width_px as f64,
            truth.resolution.height_px as f64,
        );
        let mut rng = self.rng_for(req.view, req.captured_at_ms);
        let mut boxes = Vec::with_capacity(truth.boxes.len());
        for mut b in truth.boxes {
            if c.p_miss > 0.0 && rng.random::<f64>() < c.p_miss {
                continue;
            }
            if c.sigma_px > 0.0 {
                let s = c.sigma_px;
                b.u1 = (b.u1 + rng.random_range(-s..=s)).clamp(0.0, w);
                b.v1 = (b.v1 + rng.random_range(-s..=s)).clamp(0.0, h);
                b.u2 = (b.u2 + rng.random_range(-s..=s)).clamp(0.0, w);
                b.v2 = (b.v2 + rng.random_range(-s..=s)).clamp(0.0, h);
                if b.u1 > b.u2 {
                    let m = (b.u1 + b.u2) / 2.0;
                    (b.u1, b.u2) = (m, m);
                }
                if b.v1 > b.v2 {
                    let m = (b.v1 + b.v2) / 2.0;
                    (b.v1, b.v2) = (m, m);
                }
            }
            b.confidence = if c.conf_hi > c.conf_lo {
                let x: f64 = rng.sample(Open01);
                c.conf_lo + (c.conf_hi - c.conf_lo) * x
            } else {
                c.conf_lo
            };
            boxes.push(b);
        }
        Ok(DetectionSet { boxes, ..truth })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    /// Full URL the detection request is POSTed to.
    pub url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    2000
}

#[derive(Serialize)]
struct WireRequest<'a> {
    view: View,
    width: u32,
    height: u32,
    image_b64: Option<&'a str>,
    scene_id: Option<&'a str>,
}

#[derive(Deserialize)]
struct WireReply {
    boxes: Vec<WireBox>,
}

#[derive(Deserialize)]
struct WireBox {
    label: String,
    confidence: f64,
    u1: f64,
    v1: f64,
    u2: f64,
    v2: f64,
}

/// Client for an HTTP detection service.
///
/// Simulated scenes have no pixels, so `image_b64` is always `null` and the
/// service is told the `scene_id` instead. Replies get instance ids
/// `"<view>-<index>"`.
#[derive(Debug, Clone)]
pub struct ExternalProvider {
    url: String,
    agent: ureq::Agent,
}

impl ExternalProvider {
    pub fn new(config: ExternalConfig) -> Result<Self, DetectionError> {
        if !(config.url.starts_with("http://") || config.url.starts_with("https://")) {
            return Err(DetectionError::Config(format!("unsupported detector url {}", config.url)));
        }
        if config.timeout_ms == 0 {
            return Err(DetectionError::Config("timeout_ms must be > 0".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            url: config.url,
            agent,
        })
    }
}

impl DetectionProvider for ExternalProvider {
    fn detect(&self, req: &DetectRequest<'_>) -> Result<DetectionSet, DetectionError> {
        let view = req.view;
        let resolution = req.scene.view(view).resolution;
        let body = WireRequest {
            view,
            width: resolution.width_px,
            height: resolution.height_px,
            image_b64: None,
            scene_id: req.scene.id.as_deref(),
        };
        let unavailable = |reason: String, retryable: bool| DetectionError::Unavailable {
            view,
            reason,
            retryable,
        };
        let protocol = |reason: String| DetectionError::Protocol { view, reason };

        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(&body)
            .map_err(|e| unavailable(e.to_string(), true))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| unavailable(format!("reading reply: {e}"), true))?;
        match status {
            200..=299 => {}
            500..=599 => return Err(unavailable(format!("HTTP {status}"), true)),
            _ => return Err(protocol(format!("HTTP {status}"))),
        }

        let reply: WireReply =
            serde_json::from_str(&text).map_err(|e| protocol(e.to_string()))?;
        let boxes = reply
            .boxes
            .into_iter()
            .enumerate()
            .map(|(i, b)| BoundingBox {
                label: b.label,
                confidence: b.confidence,
                u1: b.u1,
                v1: b.v1,
                u2: b.u2,
                v2: b.v2,
                instance_id: format!("{view}-{i}"),
            })
            .collect();
        DetectionSet::new(view, resolution, boxes, req.captured_at_ms)
            .map_err(|e| protocol(e.to_string()))
    }
}
