//! The selection loop as a per-session state machine.
//!
//! A [`Session`] consumes time-ordered [`Input`]s and returns the
//! [`EventLogRecord`]s each one produced. Gaze goes through the collision
//! plane into the fixation detector; a fixation captures both views, detects,
//! hit-tests the user view, resolves the label in the robot view and, on a
//! match, drives the simulated arm. The session clock is whatever the inputs
//! say; nothing here reads wall time.

mod replay;
mod trace;

pub use replay::{
    replay, replay_files, Aggregate, FixationSummary, GraspSummary, RejectedInput, ReplayError, Report,
    TrialReport, TrialStatus,
};
pub use trace::{
    generate_dwell_trace, parse_trace, read_trace_file, write_trace, TraceError, TraceGenOptions,
    TraceInput,
};

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixation::{FixationConfig, FixationDetector, FixationEvent, FixationProgress};
use crate::geometry::{raycast, GeometryError, Vec3};
use crate::intent::{resolve, IntentResolution, ResolutionStatus, ResolvePolicy};
use crate::perception::{
    confidence_gate, hit_test, rescale, DetectRequest, DetectionError, DetectionProvider,
    DetectionSet, ExternalConfig, ExternalProvider, ImageResolution, SyntheticConfig,
    SyntheticProvider, View,
};
use crate::simworld::{project, PhaseTransition, RobotArm, RobotConfig, RobotPhase, Scene};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("input at {got} ms is older than the session clock ({previous} ms)")]
    NonMonotonic { previous: u64, got: u64 },
    #[error("invalid gaze sample: {0}")]
    InvalidSample(String),
    #[error("confirm is only accepted in confirm mode")]
    ConfirmInAutoMode,
    #[error("session is in the error phase and accepts no further input")]
    Halted,
    #[error("invalid session config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionPhase {
    Idle,
    Tracking,
    AwaitConfirm,
    Capturing,
    Detecting,
    Resolving,
    Grasping,
    Completed,
    Error,
}

/// The legal session phase graph; every phase may also fall into `Error`.
pub fn is_allowed_session_transition(from: SessionPhase, to: SessionPhase) -> bool {
    use SessionPhase::*;
    matches!(
        (from, to),
        (Idle, Tracking)
            | (Tracking, AwaitConfirm)
            | (Tracking, Capturing)
            | (AwaitConfirm, Capturing)
            | (AwaitConfirm, Tracking)
            | (Capturing, Detecting)
            | (Detecting, Resolving)
            | (Resolving, Grasping)
            | (Resolving, Tracking)
            | (Grasping, Completed)
            | (Completed, Tracking)
    ) || (to == Error && from != Error)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorConfig {
    Synthetic(SyntheticConfig),
    External(ExternalConfig),
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig::Synthetic(SyntheticConfig::default())
    }
}

impl DetectorConfig {
    pub fn build(&self) -> Result<Arc<dyn DetectionProvider>, DetectionError> {
        Ok(match self {
            DetectorConfig::Synthetic(c) => Arc::new(SyntheticProvider::new(c.clone())?),
            DetectorConfig::External(c) => Arc::new(ExternalProvider::new(c.clone())?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub fixation: FixationConfig,
    /// Detections below this confidence are discarded before hit-testing.
    pub min_conf: f64,
    pub policy: ResolvePolicy,
    /// Extra attempts per view after a retryable detection failure.
    pub retries: u32,
    pub robot: RobotConfig,
    pub detector: DetectorConfig,
    /// Seeds the arm's fault injection.
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            fixation: FixationConfig::default(),
            min_conf: 0.5,
            policy: ResolvePolicy::Strict,
            retries: 2,
            robot: RobotConfig::default(),
            detector: DetectorConfig::default(),
            seed: 0,
        }
    }
}

impl SessionConfig {
    /// Sets the arm seed and, for the synthetic detector, its seed too.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let DetectorConfig::Synthetic(c) = &mut self.detector {
            c.seed = seed;
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Input {
    Gaze { t_ms: u64, origin: Vec3, dir: Vec3 },
    Confirm { t_ms: u64 },
    /// Lets simulated time pass without a gaze sample.
    Tick { t_ms: u64 },
}

impl Input {
    pub fn t_ms(&self) -> u64 {
        match *self {
            Input::Gaze { t_ms, .. } | Input::Confirm { t_ms } | Input::Tick { t_ms } => t_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePayload {
    /// Plane pixel coordinates, `None` when the ray missed the plane.
    pub hit: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseChange {
    pub from: SessionPhase,
    pub to: SessionPhase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapturePayload {
    pub plane_u: f64,
    pub plane_v: f64,
    /// The fixation point in user-view image pixels.
    pub image_u: f64,
    pub image_v: f64,
    pub user_resolution: ImageResolution,
    pub robot_resolution: ImageResolution,
    /// Simulator ground truth: the object whose exact user-view footprint
    /// contains the image point. Evaluation only; the pipeline never reads it.
    pub ground_truth: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionsPayload {
    pub attempts: u32,
    pub raw_count: usize,
    pub dropped_by_gate: usize,
    /// The set after the confidence gate.
    pub detections: DetectionSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoObjectPayload {
    pub image_u: f64,
    pub image_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum SessionEvent {
    Sample(SamplePayload),
    Progress(FixationProgress),
    Phase(PhaseChange),
    Fixation(FixationEvent),
    Capture(CapturePayload),
    Detections(DetectionsPayload),
    Resolution(IntentResolution),
    NoObject(NoObjectPayload),
    GraspPhase(PhaseTransition),
    Error(ErrorPayload),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLogRecord {
    pub t_ms: u64,
    #[serde(flatten)]
    pub event: SessionEvent,
}

/// One user's selection loop over one scene and one arm.
pub struct Session {
    config: SessionConfig,
    scene: Scene,
    provider: Arc<dyn DetectionProvider>,
    detector: FixationDetector,
    robot: RobotArm,
    phase: SessionPhase,
    clock_ms: Option<u64>,
    last_gaze_ms: Option<u64>,
    last_fixation: Option<FixationEvent>,
    last_resolution: Option<IntentResolution>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("phase", &self.phase)
            .field("clock_ms", &self.clock_ms)
            .field("robot", &self.robot.state())
            .finish_non_exhaustive()
    }
}

impl Session {
    pub fn new(scene: Scene, config: SessionConfig) -> Result<Self, SessionError> {
        let provider = config
            .detector
            .build()
            .map_err(|e| SessionError::Config(e.to_string()))?;
        Self::with_provider(scene, config, provider)
    }

    /// Like [`new`](Self::new) but with a caller-supplied detector; the
    /// `detector` field of `config` is ignored.
    pub fn with_provider(
        scene: Scene,
        config: SessionConfig,
        provider: Arc<dyn DetectionProvider>,
    ) -> Result<Self, SessionError> {
        if !(0.0..=1.0).contains(&config.min_conf) {
            return Err(SessionError::Config(format!(
                "min_conf {} outside [0, 1]",
                config.min_conf
            )));
        }
        let detector = FixationDetector::new(config.fixation.clone())
            .map_err(|e| SessionError::Config(e.to_string()))?;
        let robot = RobotArm::new(config.robot, config.seed)
            .map_err(|e| SessionError::Config(e.to_string()))?;
        Ok(Self {
            config,
            scene,
            provider,
            detector,
            robot,
            phase: SessionPhase::Idle,
            clock_ms: None,
            last_gaze_ms: None,
            last_fixation: None,
            last_resolution: None,
        })
    }

    pub fn phase(&self) -> SessionPhase {
        self.phase
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn robot_phase(&self) -> RobotPhase {
        self.robot.phase()
    }

    pub fn clock_ms(&self) -> Option<u64> {
        self.clock_ms
    }

    pub fn last_fixation(&self) -> Option<&FixationEvent> {
        self.last_fixation.as_ref()
    }

    pub fn last_resolution(&self) -> Option<&IntentResolution> {
        self.last_resolution.as_ref()
    }

    /// Processes one input. A rejected input leaves the session unchanged.
    pub fn step(&mut self, input: Input) -> Result<Vec<EventLogRecord>, SessionError> {
        let t = input.t_ms();
        self.validate(&input)?;
        self.clock_ms = Some(t);

        let mut out = Vec::new();
        match self.phase {
            SessionPhase::Idle => self.enter(&mut out, t, SessionPhase::Tracking),
            SessionPhase::Completed => self.start_next_trial(&mut out, t),
            _ => {}
        }

        if self.phase == SessionPhase::Grasping {
            self.advance_robot(&mut out, t);
        }

        match input {
            Input::Gaze { origin, dir, .. } => {
                self.last_gaze_ms = Some(t);
                let dir = dir.normalized().expect("validated");
                let hit = raycast(&self.scene.headset.plane, origin, dir).expect("validated");
                out.push(record(
                    t,
                    SessionEvent::Sample(SamplePayload {
                        hit: hit.as_ref().map(|h| [h.u, h.v]),
                    }),
                ));
                if matches!(self.phase, SessionPhase::Tracking | SessionPhase::AwaitConfirm) {
                    let outcome = self
                        .detector
                        .feed(hit.as_ref(), t)
                        .expect("gaze timestamps are validated before feeding");
                    out.push(record(t, SessionEvent::Progress(outcome.progress)));
                    if let Some(event) = outcome.event {
                        self.on_fixation(&mut out, t, event);
                    } else {
                        self.sync_armed(&mut out, t);
                    }
                }
            }
            Input::Confirm { .. } => {
                if self.phase == SessionPhase::AwaitConfirm {
                    let event = self
                        .detector
                        .confirm(t)
                        .expect("confirm mode and timestamp are validated");
                    match event {
                        Some(event) => self.on_fixation(&mut out, t, event),
                        None => self.sync_armed(&mut out, t),
                    }
                }
            }
            Input::Tick { .. } => {}
        }
        Ok(out)
    }

    /// Stops the session: any arm motion is cancelled, the arm ends `Idle`
    /// and the session moves to `Error`. Repeated calls are no-ops.
    pub fn abort(&mut self, t_ms: u64) -> Vec<EventLogRecord> {
        let t = self.clock_ms.map_or(t_ms, |c| c.max(t_ms));
        let mut out = Vec::new();
        self.clock_ms = Some(t);
        for tr in self.robot.abort(&mut self.scene, t) {
            out.push(record(tr.t_ms, SessionEvent::GraspPhase(tr)));
        }
        if self.phase != SessionPhase::Error {
            self.fail(&mut out, t, "session", "session aborted".into());
        }
        out
    }

    fn validate(&self, input: &Input) -> Result<(), SessionError> {
        if self.phase == SessionPhase::Error {
            return Err(SessionError::Halted);
        }
        let t = input.t_ms();
        if let Some(previous) = self.clock_ms {
            if t < previous {
                return Err(SessionError::NonMonotonic { previous, got: t });
            }
        }
        match input {
            Input::Gaze { origin, dir, .. } => {
                if let Some(previous) = self.last_gaze_ms {
                    if t <= previous {
                        return Err(SessionError::NonMonotonic { previous, got: t });
                    }
                }
                if !origin.is_finite() {
                    return Err(SessionError::InvalidSample("origin is not finite".into()));
                }
                dir.normalized().map_err(|e| match e {
                    GeometryError::ZeroLength => {
                        SessionError::InvalidSample("direction has zero length".into())
                    }
                    other => SessionError::InvalidSample(other.to_string()),
                })?;
            }
            Input::Confirm { .. } => {
                if self.config.fixation.trigger_mode != crate::fixation::TriggerMode::DwellPlusConfirm {
                    return Err(SessionError::ConfirmInAutoMode);
                }
            }
            Input::Tick { .. } => {}
        }
        Ok(())
    }

    fn enter(&mut self, out: &mut Vec<EventLogRecord>, t: u64, to: SessionPhase) {
        debug_assert!(
            is_allowed_session_transition(self.phase, to),
            "{:?} -> {:?}",
            self.phase,
            to
        );
        out.push(record(
            t,
            SessionEvent::Phase(PhaseChange {
                from: self.phase,
                to,
            }),
        ));
        self.phase = to;
    }

    fn fail(&mut self, out: &mut Vec<EventLogRecord>, t: u64, stage: &str, message: String) {
        out.push(record(
            t,
            SessionEvent::Error(ErrorPayload {
                stage: stage.into(),
                message,
            }),
        ));
        self.enter(out, t, SessionPhase::Error);
    }

    fn sync_armed(&mut self, out: &mut Vec<EventLogRecord>, t: u64) {
        match (self.phase, self.detector.is_armed()) {
            (SessionPhase::Tracking, true) => self.enter(out, t, SessionPhase::AwaitConfirm),
            (SessionPhase::AwaitConfirm, false) => self.enter(out, t, SessionPhase::Tracking),
            _ => {}
        }
    }

    fn start_next_trial(&mut self, out: &mut Vec<EventLogRecord>, t: u64) {
        if let Some(tr) = self.robot.reset(t) {
            out.push(record(t, SessionEvent::GraspPhase(tr)));
        }
        self.detector = FixationDetector::new(self.config.fixation.clone())
            .expect("config validated at construction");
        self.enter(out, t, SessionPhase::Tracking);
    }

    fn advance_robot(&mut self, out: &mut Vec<EventLogRecord>, t: u64) {
        for tr in self.robot.advance(&mut self.scene, t) {
            out.push(record(tr.t_ms, SessionEvent::GraspPhase(tr)));
        }
        self.check_robot(out);
    }

    fn check_robot(&mut self, out: &mut Vec<EventLogRecord>) {
        let state = self.robot.state();
        let t = state.phase_entered_ms;
        match state.phase {
            RobotPhase::Done => self.enter(out, t, SessionPhase::Completed),
            RobotPhase::Faulted => {
                let reason = state.fault.clone().unwrap_or_else(|| "arm faulted".into());
                self.fail(out, t, "grasp", reason);
            }
            _ => {}
        }
    }

    fn on_fixation(&mut self, out: &mut Vec<EventLogRecord>, t: u64, event: FixationEvent) {
        out.push(record(t, SessionEvent::Fixation(event.clone())));
        self.enter(out, t, SessionPhase::Capturing);
        let plane = &self.scene.headset.plane;
        let plane_res = ImageResolution::new(plane.res_w(), plane.res_h()).expect("validated plane");
        let user_res = self.scene.user_view.resolution;
        let (image_u, image_v) = rescale(event.pixel_u, event.pixel_v, plane_res, user_res)
            .expect("fixation pixels lie on the plane");
        let truth = project(&self.scene, View::UserView, t);
        let ground_truth = hit_test(image_u, image_v, &truth).map(|b| b.instance_id.clone());
        out.push(record(
            t,
            SessionEvent::Capture(CapturePayload {
                plane_u: event.pixel_u,
                plane_v: event.pixel_v,
                image_u,
                image_v,
                user_resolution: user_res,
                robot_resolution: self.scene.robot_view.resolution,
                ground_truth,
            }),
        ));
        self.last_fixation = Some(event);

        self.enter(out, t, SessionPhase::Detecting);
        let (user, robot) = self.detect_both(t);
        let mut gated = Vec::with_capacity(2);
        for (view, result) in [(View::UserView, user), (View::RobotView, robot)] {
            match result {
                Ok((set, attempts)) => {
                    let kept = confidence_gate(&set, self.config.min_conf);
                    out.push(record(
                        t,
                        SessionEvent::Detections(DetectionsPayload {
                            attempts,
                            raw_count: set.boxes.len(),
                            dropped_by_gate: set.boxes.len() - kept.boxes.len(),
                            detections: kept.clone(),
                        }),
                    ));
                    gated.push(kept);
                }
                Err((err, attempts)) => {
                    let msg = format!("{err} (after {attempts} attempt(s))");
                    self.fail(out, t, &format!("detect_{}", view.as_str()), msg);
                    return;
                }
            }
        }
        let robot_set = gated.pop().expect("two views");
        let user_set = gated.pop().expect("two views");

        self.enter(out, t, SessionPhase::Resolving);
        let Some(gazed) = hit_test(image_u, image_v, &user_set) else {
            out.push(record(t, SessionEvent::NoObject(NoObjectPayload { image_u, image_v })));
            self.enter(out, t, SessionPhase::Tracking);
            return;
        };
        let resolution = resolve(&gazed.label, &robot_set, self.config.policy, t)
            .expect("detected labels are non-empty");
        out.push(record(t, SessionEvent::Resolution(resolution.clone())));
        let target = resolution.target.clone();
        let matched = resolution.status == ResolutionStatus::Matched;
        self.last_resolution = Some(resolution);
        match (matched, target) {
            (true, Some(target)) => {
                self.enter(out, t, SessionPhase::Grasping);
                match self.robot.grasp(&mut self.scene, &target, t) {
                    Ok(trs) => {
                        for tr in trs {
                            out.push(record(tr.t_ms, SessionEvent::GraspPhase(tr)));
                        }
                        self.advance_robot(out, t);
                    }
                    Err(e) => self.fail(out, t, "grasp", e.to_string()),
                }
            }
            _ => self.enter(out, t, SessionPhase::Tracking),
        }
    }

    /// Detects in both views at once, retrying retryable failures.
    #[allow(clippy::type_complexity)]
    fn detect_both(
        &self,
        t: u64,
    ) -> (
        Result<(DetectionSet, u32), (DetectionError, u32)>,
        Result<(DetectionSet, u32), (DetectionError, u32)>,
    ) {
        let run = |view: View| {
            let request = DetectRequest {
                view,
                scene: &self.scene,
                captured_at_ms: t,
            };
            let mut attempts = 0;
            loop {
                attempts += 1;
                match self.provider.detect(&request) {
                    Ok(set) => return Ok((set, attempts)),
                    Err(e) if e.is_retryable() && attempts <= self.config.retries => continue,
                    Err(e) => return Err((e, attempts)),
                }
            }
        };
        std::thread::scope(|s| {
            let robot = s.spawn(|| run(View::RobotView));
            let user = run(View::UserView);
            let robot = robot.join().unwrap_or_else(|_| {
                Err((
                    DetectionError::Unavailable {
                        view: View::RobotView,
                        reason: "detector panicked".into(),
                        retryable: false,
                    },
                    1,
                ))
            });
            (user, robot)
        })
    }
}

fn record(t_ms: u64, event: SessionEvent) -> EventLogRecord {
    EventLogRecord { t_ms, event }
}
