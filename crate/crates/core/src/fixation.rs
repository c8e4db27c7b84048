//! Streaming dwell detection over plane hits.
//!
//! A cluster is a run of consecutive hits. A new hit joins the cluster when it
//! lies within `radius_m` of the running centroid and, once added, every
//! cluster point is still within `radius_m` of the updated centroid.
//! Otherwise the cluster restarts at the new hit. A miss drops the cluster.
//! The cluster fires once when its span reaches `dwell_ms`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{PlaneHit, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FixationError {
    #[error("invalid fixation config: {0}")]
    InvalidConfig(String),
    #[error("non-monotonic timestamp: {got} ms after {previous} ms")]
    NonMonotonic { previous: u64, got: u64 },
    #[error("confirm is only valid in dwell-plus-confirm mode")]
    ConfirmInAutoMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerMode {
    /// Fire as soon as the dwell threshold is met.
    #[default]
    #[serde(rename = "auto")]
    AutoOnDwell,
    /// Arm on dwell, fire on an explicit confirm while the cluster is alive.
    #[serde(rename = "confirm")]
    DwellPlusConfirm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixationConfig {
    pub dwell_ms: u64,
    pub radius_m: f64,
    pub trigger_mode: TriggerMode,
    pub refractory_ms: u64,
}

impl Default for FixationConfig {
    fn default() -> Self {
        Self {
            dwell_ms: 2000,
            radius_m: 0.05,
            trigger_mode: TriggerMode::AutoOnDwell,
            refractory_ms: 500,
        }
    }
}

impl FixationConfig {
    pub fn validate(&self) -> Result<(), FixationError> {
        if self.dwell_ms == 0 {
            return Err(FixationError::InvalidConfig("dwell_ms must be > 0".into()));
        }
        if !(self.radius_m > 0.0 && self.radius_m.is_finite()) {
            return Err(FixationError::InvalidConfig(format!(
                "radius_m must be a positive finite number, got {}",
                self.radius_m
            )));
        }
        Ok(())
    }
}

/// A completed dwell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixationEvent {
    pub centroid: Vec3,
    pub pixel_u: f64,
    pub pixel_v: f64,
    pub start_ms: u64,
    pub fired_ms: u64,
    pub sample_count: usize,
    pub max_dispersion_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixationProgress {
    pub elapsed_ms: u64,
    /// `min(1, elapsed_ms / dwell_ms)`
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedOutcome {
    pub progress: FixationProgress,
    pub event: Option<FixationEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ClusterState {
    Accumulating,
    Armed,
    Fired,
}

#[derive(Debug, Clone)]
struct Cluster {
    points: Vec<Vec3>,
    centroid: Vec3,
    mean_u: f64,
    mean_v: f64,
    start_ms: u64,
    max_dispersion_m: f64,
    state: ClusterState,
}

impl Cluster {
    fn start(hit: &PlaneHit, t_ms: u64) -> Self {
        Self {
            points: vec![hit.point],
            centroid: hit.point,
            mean_u: hit.u,
            mean_v: hit.v,
            start_ms: t_ms,
            max_dispersion_m: 0.0,
            state: ClusterState::Accumulating,
        }
    }

    /// Adds `hit` if the cluster stays within `radius`; returns false otherwise.
    fn try_extend(&mut self, hit: &PlaneHit, radius: f64) -> bool {
        if hit.point.distance(self.centroid) > radius {
            return false;
        }
        let w = 1.0 / (self.points.len() + 1) as f64;
        let centroid = self.centroid + (hit.point - self.centroid) * w;
        let mut dispersion = hit.point.distance(centroid);
        for p in &self.points {
            dispersion = dispersion.max(p.distance(centroid));
            if dispersion > radius {
                return false;
            }
        }
        if dispersion > radius {
            return false;
        }
        self.points.push(hit.point);
        self.centroid = centroid;
        self.mean_u += (hit.u - self.mean_u) * w;
        self.mean_v += (hit.v - self.mean_v) * w;
        self.max_dispersion_m = dispersion;
        true
    }

    fn snapshot(&self, fired_ms: u64) -> FixationEvent {
        FixationEvent {
            centroid: self.centroid,
            pixel_u: self.mean_u,
            pixel_v: self.mean_v,
            start_ms: self.start_ms,
            fired_ms,
            sample_count: self.points.len(),
            max_dispersion_m: self.max_dispersion_m,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Refractory {
    until_ms: u64,
    centroid: Vec3,
}

/// Single-owner streaming detector; feed it samples in time order.
#[derive(Debug, Clone)]
pub struct FixationDetector {
    config: FixationConfig,
    cluster: Option<Cluster>,
    refractory: Option<Refractory>,
    last_ms: Option<u64>,
}

impl FixationDetector {
    pub fn new(config: FixationConfig) -> Result<Self, FixationError> {
        config.validate()?;
        Ok(Self {
            config,
            cluster: None,
            refractory: None,
            last_ms: None,
        })
    }

    pub fn config(&self) -> &FixationConfig {
        &self.config
    }

    /// True while a dwell is satisfied and waiting for [`confirm`](Self::confirm).
    pub fn is_armed(&self) -> bool {
        matches!(&self.cluster, Some(c) if c.state == ClusterState::Armed)
    }

    pub fn last_ms(&self) -> Option<u64> {
        self.last_ms
    }

    /// Feeds one sample. `hit` is `None` when the gaze ray missed the plane.
    ///
    /// A sample whose timestamp does not strictly increase is rejected and
    /// leaves the detector untouched.
    pub fn feed(&mut self, hit: Option<&PlaneHit>, t_ms: u64) -> Result<FeedOutcome, FixationError> {
        if let Some(previous) = self.last_ms {
            if t_ms <= previous {
                return Err(FixationError::NonMonotonic { previous, got: t_ms });
            }
        }
        self.last_ms = Some(t_ms);

        match hit {
            None => self.cluster = None,
            Some(hit) => {
                let radius = self.config.radius_m;
                let extended = match self.cluster.as_mut() {
                    Some(c) => c.try_extend(hit, radius),
                    None => false,
                };
                if !extended {
                    self.cluster = if self.blocked_by_refractory(hit.point, t_ms) {
                        None
                    } else {
                        Some(Cluster::start(hit, t_ms))
                    };
                }
            }
        }

        let mut event = None;
        let dwell_ms = self.config.dwell_ms;
        let mode = self.config.trigger_mode;
        if let Some(c) = self.cluster.as_mut() {
            if c.state == ClusterState::Accumulating && t_ms - c.start_ms >= dwell_ms {
                match mode {
                    TriggerMode::AutoOnDwell => {
                        c.state = ClusterState::Fired;
                        event = Some(c.snapshot(t_ms));
                    }
                    TriggerMode::DwellPlusConfirm => c.state = ClusterState::Armed,
                }
            }
        }
        if let Some(e) = &event {
            self.start_refractory(e);
        }

        Ok(FeedOutcome {
            progress: self.progress(t_ms),
            event,
        })
    }

    /// Releases an armed dwell. Returns `None` if nothing is armed or the
    /// cluster has already broken up.
    pub fn confirm(&mut self, t_ms: u64) -> Result<Option<FixationEvent>, FixationError> {
        if self.config.trigger_mode != TriggerMode::DwellPlusConfirm {
            return Err(FixationError::ConfirmInAutoMode);
        }
        if let Some(previous) = self.last_ms {
            if t_ms < previous {
                return Err(FixationError::NonMonotonic { previous, got: t_ms });
            }
        }
        let Some(c) = self.cluster.as_mut() else {
            return Ok(None);
        };
        if c.state != ClusterState::Armed {
            return Ok(None);
        }
        c.state = ClusterState::Fired;
        let event = c.snapshot(t_ms);
        self.start_refractory(&event);
        Ok(Some(event))
    }

    /// Progress of the current cluster as of `t_ms`.
    pub fn progress(&self, t_ms: u64) -> FixationProgress {
        let elapsed_ms = self
            .cluster
            .as_ref()
            .map_or(0, |c| t_ms.saturating_sub(c.start_ms));
        FixationProgress {
            elapsed_ms,
            fraction: (elapsed_ms as f64 / self.config.dwell_ms as f64).min(1.0),
        }
    }

    fn blocked_by_refractory(&self, p: Vec3, t_ms: u64) -> bool {
        match self.refractory {
            Some(r) => t_ms < r.until_ms && p.distance(r.centroid) <= self.config.radius_m,
            None => false,
        }
    }

    fn start_refractory(&mut self, e: &FixationEvent) {
        self.refractory = (self.config.refractory_ms > 0).then(|| Refractory {
            until_ms: e.fired_ms + self.config.refractory_ms,
            centroid: e.centroid,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hit_at(x: f64, y: f64) -> PlaneHit {
        PlaneHit {
            point: Vec3::new(x, y, 1.0),
            u: x * 1000.0,
            v: y * 1000.0,
            distance: 1.0,
        }
    }

    fn detector(mode: TriggerMode) -> FixationDetector {
        FixationDetector::new(FixationConfig {
            trigger_mode: mode,
            ..FixationConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn steady_gaze_fires_at_two_seconds() {
        let mut d = detector(TriggerMode::AutoOnDwell);
        let mut events = Vec::new();
        for t in (0..=3000).step_by(100) {
            let out = d.feed(Some(&hit_at(0.3, 0.3)), t).unwrap();
            events.extend(out.event);
        }
        assert_eq!(events.len(), 1);
        let e = &events[0];
        assert_eq!(e.fired_ms, 2000);
        assert_eq!(e.start_ms, 0);
        assert_eq!(e.max_dispersion_m, 0.0);
        assert_eq!(e.sample_count, 21);
        assert!((e.pixel_u - 300.0).abs() < 1e-9);
    }

    #[test]
    fn alternating_beyond_radius_never_fires() {
        let mut d = detector(TriggerMode::AutoOnDwell);
        for (i, t) in (0..10_000).step_by(20).enumerate() {
            let x = if i % 2 == 0 { 0.3 } else { 0.36 };
            let out = d.feed(Some(&hit_at(x, 0.3)), t).unwrap();
            assert!(out.event.is_none());
            assert_eq!(out.progress.elapsed_ms, 0);
        }
    }

    #[test]
    fn miss_resets_cluster() {
        let mut d = detector(TriggerMode::AutoOnDwell);
        for t in (0..1900).step_by(100) {
            d.feed(Some(&hit_at(0.3, 0.3)), t).unwrap();
        }
        assert_eq!(d.feed(None, 1900).unwrap().progress.elapsed_ms, 0);
        let out = d.feed(Some(&hit_at(0.3, 0.3)), 2000).unwrap();
        assert!(out.event.is_none());
        assert_eq!(out.progress.elapsed_ms, 0);
    }

    #[test]
    fn progress_fraction_saturates() {
        let mut d = detector(TriggerMode::AutoOnDwell);
        d.feed(Some(&hit_at(0.1, 0.1)), 0).unwrap();
        let p = d.feed(Some(&hit_at(0.1, 0.1)), 500).unwrap().progress;
        assert_eq!(p.elapsed_ms, 500);
        assert!((p.fraction - 0.25).abs() < 1e-12);
        d.feed(Some(&hit_at(0.1, 0.1)), 2000).unwrap();
        let p = d.feed(Some(&hit_at(0.1, 0.1)), 4000).unwrap().progress;
        assert_eq!(p.fraction, 1.0);
    }

    #[test]
    fn non_monotonic_sample_is_rejected_without_side_effects() {
        let mut d = detector(TriggerMode::AutoOnDwell);
        d.feed(Some(&hit_at(0.1, 0.1)), 100).unwrap();
        let err = d.feed(Some(&hit_at(0.5, 0.5)), 100).unwrap_err();
        assert_eq!(err, FixationError::NonMonotonic { previous: 100, got: 100 });
        assert!(d.feed(Some(&hit_at(0.1, 0.1)), 50).is_err());
        assert_eq!(d.feed(Some(&hit_at(0.1, 0.1)), 300).unwrap().progress.elapsed_ms, 200);
    }

    #[test]
    fn no_refire_while_gaze_stays() {
        let mut d = detector(TriggerMode::AutoOnDwell);
        let fired: usize = (0..=10_000)
            .step_by(20)
            .map(|t| d.feed(Some(&hit_at(0.2, 0.2)), t).unwrap().event.is_some() as usize)
            .sum();
        assert_eq!(fired, 1);
    }

    #[test]
    fn refractory_blocks_restart_on_same_spot() {
        let cfg = FixationConfig {
            dwell_ms: 200,
            refractory_ms: 500,
            ..FixationConfig::default()
        };
        let mut d = FixationDetector::new(cfg).unwrap();
        d.feed(Some(&hit_at(0.2, 0.2)), 0).unwrap();
        assert!(d.feed(Some(&hit_at(0.2, 0.2)), 200).unwrap().event.is_some());
        d.feed(None, 220).unwrap();
        // Within the refractory window on the old spot: no cluster starts.
        for t in [240, 400, 600, 680] {
            let out = d.feed(Some(&hit_at(0.2, 0.2)), t).unwrap();
            assert_eq!(out.progress.elapsed_ms, 0, "t={t}");
        }
        // Elsewhere a cluster starts immediately.
        let mut e = d.clone();
        assert!(e.feed(Some(&hit_at(0.5, 0.5)), 690).is_ok());
        assert_eq!(e.feed(Some(&hit_at(0.5, 0.5)), 700).unwrap().progress.elapsed_ms, 10);
        // After the window the old spot is eligible again.
        d.feed(Some(&hit_at(0.2, 0.2)), 700).unwrap();
        let out = d.feed(Some(&hit_at(0.2, 0.2)), 900).unwrap();
        assert_eq!(out.event.map(|e| e.start_ms), Some(700));
    }

    #[test]
    fn zero_refractory_disables_blocking() {
        let cfg = FixationConfig {
            dwell_ms: 200,
            refractory_ms: 0,
            ..FixationConfig::default()
        };
        let mut d = FixationDetector::new(cfg).unwrap();
        d.feed(Some(&hit_at(0.2, 0.2)), 0).unwrap();
        assert!(d.feed(Some(&hit_at(0.2, 0.2)), 200).unwrap().event.is_some());
        d.feed(None, 210).unwrap();
        assert_eq!(d.feed(Some(&hit_at(0.2, 0.2)), 220).unwrap().progress.elapsed_ms, 0);
        assert_eq!(d.feed(Some(&hit_at(0.2, 0.2)), 230).unwrap().progress.elapsed_ms, 10);
    }

    #[test]
    fn confirm_without_armed_event_is_none() {
        let mut d = detector(TriggerMode::DwellPlusConfirm);
        assert_eq!(d.confirm(0), Ok(None));
        d.feed(Some(&hit_at(0.2, 0.2)), 0).unwrap();
        assert_eq!(d.confirm(1000), Ok(None));
    }

    #[test]
    fn confirm_after_dwell_returns_event() {
        let mut d = detector(TriggerMode::DwellPlusConfirm);
        for t in (0..=2300).step_by(20) {
            let out = d.feed(Some(&hit_at(0.2, 0.2)), t).unwrap();
            assert!(out.event.is_none());
            assert_eq!(d.is_armed(), t >= 2000);
        }
        let e = d.confirm(2300).unwrap().expect("armed dwell");
        assert_eq!(e.start_ms, 0);
        assert_eq!(e.fired_ms, 2300);
        assert!(e.fired_ms - e.start_ms >= 2000);
        assert!(!d.is_armed());
        assert_eq!(d.confirm(2310), Ok(None));
    }

    #[test]
    fn confirm_after_gaze_left_is_none() {
        let mut d = detector(TriggerMode::DwellPlusConfirm);
        for t in (0..=2100).step_by(20) {
            d.feed(Some(&hit_at(0.2, 0.2)), t).unwrap();
        }
        assert!(d.is_armed());
        d.feed(Some(&hit_at(0.6, 0.6)), 2120).unwrap();
        assert!(!d.is_armed());
        assert_eq!(d.confirm(2200), Ok(None));
    }

    #[test]
    fn confirm_in_auto_mode_is_error() {
        let mut d = detector(TriggerMode::AutoOnDwell);
        assert_eq!(d.confirm(0), Err(FixationError::ConfirmInAutoMode));
    }

    #[test]
    fn config_validation() {
        let bad = [
            FixationConfig { dwell_ms: 0, ..Default::default() },
            FixationConfig { radius_m: 0.0, ..Default::default() },
            FixationConfig { radius_m: f64::NAN, ..Default::default() },
        ];
        for cfg in bad {
            assert!(FixationDetector::new(cfg).is_err());
        }
    }

    #[test]
    fn drifting_gaze_cannot_stretch_a_cluster() {
        // Each step is within radius of the running centroid, but the early
        // points would end up outside it; the dispersion check restarts.
        let mut d = detector(TriggerMode::AutoOnDwell);
        let mut x = 0.0;
        for t in (0..6000).step_by(20) {
            let out = d.feed(Some(&hit_at(x, 0.0)), t).unwrap();
            if let Some(e) = out.event {
                assert!(e.max_dispersion_m <= 0.05);
            }
            x += 0.002;
        }
    }
}
