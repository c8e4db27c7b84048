//! Line-delimited gaze traces and a generator for scripted dwell trials.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Input;
use crate::fixation::{FixationConfig, TriggerMode};
use crate::geometry::{pixel_to_world, Vec3};
use crate::perception::{rescale, ImageResolution, View};
use crate::simworld::{project, PhaseDurations, Scene};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("trace line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("cannot read trace {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("unknown trace target {0:?} (expected an object id or label)")]
    UnknownTarget(String),
    #[error("target {0} is not visible in the user view")]
    TargetNotVisible(String),
    #[error("invalid trace options: {0}")]
    Options(String),
}

/// One trace line: `{"t_ms": 0, "type": "gaze", "origin": [..], "dir": [..]}`
/// or `{"t_ms": 0, "type": "confirm"}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceInput {
    Gaze { t_ms: u64, origin: Vec3, dir: Vec3 },
    Confirm { t_ms: u64 },
}

impl TraceInput {
    pub fn t_ms(&self) -> u64 {
        match *self {
            TraceInput::Gaze { t_ms, .. } | TraceInput::Confirm { t_ms } => t_ms,
        }
    }
}

impl From<TraceInput> for Input {
    fn from(value: TraceInput) -> Self {
        match value {
            TraceInput::Gaze { t_ms, origin, dir } => Input::Gaze { t_ms, origin, dir },
            TraceInput::Confirm { t_ms } => Input::Confirm { t_ms },
        }
    }
}

/// Parses a trace. Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_trace(text: &str) -> Result<Vec<TraceInput>, TraceError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| TraceError::Line {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<Vec<TraceInput>, TraceError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| TraceError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_trace(&text)
}

pub fn write_trace(inputs: &[TraceInput]) -> String {
    let mut out = String::new();
    for input in inputs {
        out.push_str(&serde_json::to_string(input).expect("trace records serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceGenOptions {
    pub sample_interval_ms: u64,
    /// Off-plane samples before each trial.
    pub lead_in_ms: u64,
    /// How long gaze stays on each target.
    pub hold_ms: u64,
    /// Off-plane samples after each hold; should cover the grasp cycle.
    pub tail_ms: u64,
    /// Append a confirm input at the end of each hold.
    pub confirm: bool,
    /// Uniform jitter radius around the target point, on the plane, in meters.
    pub jitter_m: f64,
    pub seed: u64,
}

impl Default for TraceGenOptions {
    fn default() -> Self {
        Self::for_session(&FixationConfig::default(), &PhaseDurations::default())
    }
}

impl TraceGenOptions {
    /// 50 Hz samples, holds 300 ms past the dwell time and tails that outlast the arm.
    pub fn for_session(fixation: &FixationConfig, durations: &PhaseDurations) -> Self {
        Self {
            sample_interval_ms: 20,
            lead_in_ms: 500,
            hold_ms: fixation.dwell_ms + 300,
            tail_ms: durations.total_ms() + 500,
            confirm: fixation.trigger_mode == TriggerMode::DwellPlusConfirm,
            jitter_m: 0.0,
            seed: 0,
        }
    }
}

/// Scripts one dwell trial per target: a lead-in of off-plane samples, a hold
/// on the center of the target's user-view footprint, optionally a confirm,
/// then off-plane samples while the arm works. Targets are object ids, or
/// labels (the first matching object by id).
pub fn generate_dwell_trace(
    scene: &Scene,
    targets: &[&str],
    opts: &TraceGenOptions,
) -> Result<Vec<TraceInput>, TraceError> {
    if opts.sample_interval_ms == 0 {
        return Err(TraceError::Options("sample_interval_ms must be > 0".into()));
    }
    if !(opts.jitter_m >= 0.0 && opts.jitter_m.is_finite()) {
        return Err(TraceError::Options("jitter_m must be >= 0".into()));
    }
    let plane = &scene.headset.plane;
    let eye = scene.headset.eye;
    let plane_res = ImageResolution::new(plane.res_w(), plane.res_h()).expect("validated plane");
    let truth = project(scene, View::UserView, 0);
    // Looking straight away from the plane never hits it.
    let away = {
        let n = plane.normal();
        if plane.signed_distance(eye) < 0.0 { -n } else { n }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut out = Vec::new();
    let mut t = 0u64;
    let misses = |out: &mut Vec<TraceInput>, t: &mut u64, span: u64| {
        let end = *t + span;
        while *t < end {
            out.push(TraceInput::Gaze { t_ms: *t, origin: eye, dir: away });
            *t += opts.sample_interval_ms;
        }
    };

    for &target in targets {
        let object = scene
            .object(target)
            .or_else(|| {
                let mut same: Vec<_> = scene.objects().iter().filter(|o| o.label == target).collect();
                same.sort_by(|a, b| a.id.cmp(&b.id));
                same.first().copied()
            })
            .ok_or_else(|| TraceError::UnknownTarget(target.to_owned()))?;
        let b = truth
            .boxes
            .iter()
            .find(|b| b.instance_id == object.id)
            .ok_or_else(|| TraceError::TargetNotVisible(object.id.clone()))?;
        let (cu, cv) = b.center();
        let (pu, pv) = rescale(cu, cv, truth.resolution, plane_res)
            .map_err(|_| TraceError::TargetNotVisible(object.id.clone()))?;
        let center = pixel_to_world(plane, pu, pv);

        misses(&mut out, &mut t, opts.lead_in_ms);
        let end = t + opts.hold_ms;
        let mut last = t;
        while t <= end {
            let p = if opts.jitter_m > 0.0 {
                let r = opts.jitter_m * rng.random::<f64>().sqrt();
                let a = std::f64::consts::TAU * rng.random::<f64>();
                center + plane.u_axis() * (r * a.cos()) + plane.v_axis() * (r * a.sin())
            } else {
                center
            };
            let dir = (p - eye).normalized().expect("eye is off the plane");
            out.push(TraceInput::Gaze { t_ms: t, origin: eye, dir });
            last = t;
            t += opts.sample_interval_ms;
        }
        if opts.confirm {
            out.push(TraceInput::Confirm { t_ms: last });
        }
        misses(&mut out, &mut t, opts.tail_ms);
    }
    Ok(out)
}
