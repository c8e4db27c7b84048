//! Brute-force oracles and generators shared by the integration tests.
#![allow(dead_code)]

use dwellgrasp_core::fixation::{FixationConfig, FixationDetector, FixationEvent};
use dwellgrasp_core::geometry::{PlaneHit, Vec3};
use dwellgrasp_core::perception::BoundingBox;
use dwellgrasp_core::simworld::{Scene, SceneConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures");

pub fn fixture(name: &str) -> String {
    format!("{FIXTURES}/{name}")
}

/// A timestamped plane point; `None` is a miss.
pub type Sample = (u64, Option<Vec3>);

pub fn hit(p: Vec3) -> PlaneHit {
    PlaneHit {
        point: p,
        u: p.x * 1000.0,
        v: p.y * 1000.0,
        distance: 1.0,
    }
}

/// Runs the streaming detector over a sample list.
pub fn stream_events(samples: &[Sample], config: &FixationConfig) -> Vec<FixationEvent> {
    let mut d = FixationDetector::new(config.clone()).unwrap();
    let mut out = Vec::new();
    for &(t, p) in samples {
        let h = p.map(hit);
        out.extend(d.feed(h.as_ref(), t).unwrap().event);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleEvent {
    pub start_ms: u64,
    pub fired_ms: u64,
    pub sample_count: usize,
    pub centroid: Vec3,
}

fn centroid(points: &[Vec3]) -> Vec3 {
    let n = points.len() as f64;
    let (x, y, z) = points
        .iter()
        .fold((0.0, 0.0, 0.0), |(x, y, z), p| (x + p.x, y + p.y, z + p.z));
    Vec3::new(x / n, y / n, z / n)
}

/// All samples present and every point within `radius` of the window centroid.
fn window_ok(samples: &[Sample], radius: f64) -> Option<Vec3> {
    let points: Option<Vec<Vec3>> = samples.iter().map(|s| s.1).collect();
    let points = points?;
    let c = centroid(&points);
    points
        .iter()
        .all(|p| (*p - c).norm() <= radius)
        .then_some(c)
}

/// Sliding-window dwell oracle.
///
/// Scans end indices in order and fires at the first `i` for which some
/// window `[s, i]` is all hits, lies within `radius` of its own centroid and
/// spans at least `dwell_ms`. After an event, the window keeps absorbing
/// samples while it stays valid and those samples cannot start a new window.
/// A window may not start near the last event's centroid during the
/// refractory period.
pub fn fixation_oracle(samples: &[Sample], config: &FixationConfig) -> Vec<OracleEvent> {
    let r = config.radius_m;
    let mut events = Vec::new();
    let mut lower = 0usize;
    let mut refractory: Option<(u64, Vec3)> = None;
    let mut i = 0;
    while i < samples.len() {
        let (ti, _) = samples[i];
        let mut found = None;
        for s in lower..=i {
            let (ts, ps) = samples[s];
            if ti - ts < config.dwell_ms {
                break;
            }
            let Some(ps) = ps else { continue };
            if let Some((until, c)) = refractory {
                if ts < until && (ps - c).norm() <= r {
                    continue;
                }
            }
            if let Some(c) = window_ok(&samples[s..=i], r) {
                found = Some((s, c));
                break;
            }
        }
        if let Some((s, c)) = found {
            events.push(OracleEvent {
                start_ms: samples[s].0,
                fired_ms: ti,
                sample_count: i - s + 1,
                centroid: c,
            });
            refractory = Some((ti + config.refractory_ms, c));
            let mut j = i;
            while j + 1 < samples.len() && window_ok(&samples[s..=j + 1], r).is_some() {
                j += 1;
            }
            lower = j + 1;
            i = j + 1;
        } else {
            i += 1;
        }
    }
    events
}

/// Dwell segments with jitter at most `radius / 2` around centers at least
/// `4 * radius` apart, separated by optional runs of misses, at random
/// sample intervals. On these traces any sensible dwell detector must agree
/// with [`fixation_oracle`].
pub fn segment_trace(rng: &mut ChaCha8Rng, radius: f64, max_samples: usize) -> Vec<Sample> {
    let centers: Vec<Vec3> = (0..4)
        .flat_map(|i| (0..3).map(move |j| Vec3::new(i as f64, j as f64, 0.0) * (4.0 * radius)))
        .map(|c| c + Vec3::new(0.1, 0.1, 1.0))
        .collect();
    let mut t: u64 = rng.random_range(0..1000);
    let mut out = Vec::new();
    while out.len() < max_samples {
        let remaining = max_samples - out.len();
        if rng.random_bool(0.3) {
            for _ in 0..rng.random_range(1..=8).min(remaining) {
                out.push((t, None));
                t += rng.random_range(5..=40);
            }
        } else {
            let c = centers[rng.random_range(0..centers.len())];
            for _ in 0..rng.random_range(1..=250).min(remaining) {
                let rr = radius / 2.0 * rng.random::<f64>().sqrt();
                let a = std::f64::consts::TAU * rng.random::<f64>();
                out.push((t, Some(c + Vec3::new(rr * a.cos(), rr * a.sin(), 0.0))));
                t += rng.random_range(5..=40);
            }
        }
    }
    out
}

/// Uniform points in a disc of `disc_radius` around `center`, every
/// `interval_ms` from `t0` through `t1`.
pub fn disc_trace(
    rng: &mut ChaCha8Rng,
    center: Vec3,
    disc_radius: f64,
    t0: u64,
    t1: u64,
    interval_ms: u64,
) -> Vec<Sample> {
    (t0..=t1)
        .step_by(interval_ms as usize)
        .map(|t| {
            let rr = disc_radius * rng.random::<f64>().sqrt();
            let a = std::f64::consts::TAU * rng.random::<f64>();
            (t, Some(center + Vec3::new(rr * a.cos(), rr * a.sin(), 0.0)))
        })
        .collect()
}

/// Brute-force hit test: every containing box, then the smallest area, the
/// highest confidence and the lowest id.
pub fn hit_test_oracle(u: f64, v: f64, boxes: &[BoundingBox]) -> Option<String> {
    let mut inside: Vec<&BoundingBox> = boxes
        .iter()
        .filter(|b| u >= b.u1 && u <= b.u2 && v >= b.v1 && v <= b.v2)
        .collect();
    inside.sort_by(|a, b| {
        let area_a = (a.u2 - a.u1) * (a.v2 - a.v1);
        let area_b = (b.u2 - b.u1) * (b.v2 - b.v1);
        area_a
            .partial_cmp(&area_b)
            .unwrap()
            .then(b.confidence.partial_cmp(&a.confidence).unwrap())
            .then(a.instance_id.cmp(&b.instance_id))
    });
    inside.first().map(|b| b.instance_id.clone())
}

/// A random tabletop where every object has its own label and its own
/// stretch of the table width, so user-view footprints never overlap.
pub fn unique_label_scene(rng: &mut ChaCha8Rng, n: usize) -> Scene {
    random_scene(rng, &(0..n).map(|i| format!("thing{i}")).collect::<Vec<_>>())
}

/// Objects labelled as given, each in its own slot across the table width.
pub fn random_scene(rng: &mut ChaCha8Rng, labels: &[String]) -> Scene {
    let (w, d) = (0.8, 0.5);
    let slot = w / labels.len() as f64;
    let objects: Vec<serde_json::Value> = labels
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let hx = rng.random_range(0.015..(slot / 2.0 - 0.005).min(0.08));
            let hy = rng.random_range(0.015..0.08);
            let hz = rng.random_range(0.01..0.12);
            let x = slot * i as f64 + slot / 2.0;
            let y = rng.random_range(hy..d - hy);
            serde_json::json!({
                "id": format!("{label}-{i}"),
                "label": label,
                "position": [x, y, hz],
                "half_extents": [hx, hy, hz],
            })
        })
        .collect();
    let config: SceneConfig = serde_json::from_value(serde_json::json!({
        "id": "generated",
        "table": {"width_m": w, "depth_m": d},
        "objects": objects,
    }))
    .unwrap();
    Scene::from_config(config).unwrap()
}
