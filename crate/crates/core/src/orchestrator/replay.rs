//! Batch replay of a trace through a session, summarized per trial.
//!
//! A trial starts at a fixation record and runs until the next one. The
//! report is a pure function of (trace, scene, config).

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EventLogRecord, Input, Session, SessionConfig, SessionError, SessionEvent, SessionPhase};
use super::trace::{read_trace_file, TraceError, TraceInput};
use crate::geometry::Vec3;
use crate::intent::ResolutionStatus;
use crate::simworld::{load_scene_file, RobotPhase, Scene, SceneError};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Session(#[from] SessionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Matched,
    NoMatch,
    Ambiguous,
    NoObject,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixationSummary {
    pub start_ms: u64,
    pub fired_ms: u64,
    pub dwell_latency_ms: u64,
    pub sample_count: usize,
    pub max_dispersion_m: f64,
    pub centroid: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspSummary {
    pub target_id: String,
    /// Last arm phase seen during the trial.
    pub final_phase: RobotPhase,
    pub started_ms: u64,
    pub done_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub index: usize,
    pub fixation: FixationSummary,
    /// Fixation point in user-view image pixels.
    pub image_point: Option<[f64; 2]>,
    pub gaze_label: Option<String>,
    pub status: TrialStatus,
    pub target_id: Option<String>,
    pub candidates: Vec<String>,
    pub grasp: Option<GraspSummary>,
    /// Object actually under the fixation point, from the simulator.
    pub expected_id: Option<String>,
    /// The arm went for (or, without a grasp, the match named) the expected
    /// object, or no object was reported when there was none.
    pub correct: bool,
    /// Every record of the trial except raw samples and progress.
    pub timeline: Vec<EventLogRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub trials: usize,
    pub matched: usize,
    pub no_match: usize,
    pub ambiguous: usize,
    pub no_object: usize,
    pub errors: usize,
    pub grasps_completed: usize,
    pub correct: usize,
    pub selection_accuracy: Option<f64>,
    pub ambiguity_rate: Option<f64>,
    /// Mean confidence of the detections that passed the gate.
    pub mean_confidence: Option<f64>,
    pub detections_total: usize,
    pub dropped_by_gate: usize,
    pub mean_dwell_latency_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedInput {
    /// 0-based position in the trace.
    pub input_index: usize,
    pub t_ms: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scene_id: Option<String>,
    pub config: SessionConfig,
    pub inputs: usize,
    pub rejected: Vec<RejectedInput>,
    /// Inputs not processed because the session had entered the error phase.
    pub skipped_after_error: usize,
    pub final_phase: SessionPhase,
    pub final_robot_phase: RobotPhase,
    pub trials: Vec<TrialReport>,
    pub aggregate: Aggregate,
}

impl Report {
    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Runs `trace` through a fresh session and summarizes it.
pub fn replay(trace: &[TraceInput], scene: Scene, config: SessionConfig) -> Result<Report, SessionError> {
    let scene_id = scene.id.clone();
    let mut session = Session::new(scene, config.clone())?;
    let mut log = Vec::new();
    let mut rejected = Vec::new();
    let mut skipped_after_error = 0;
    for (i, input) in trace.iter().enumerate() {
        match session.step(Input::from(*input)) {
            Ok(records) => log.extend(records),
            Err(SessionError::Halted) => {
                skipped_after_error = trace.len() - i;
                break;
            }
            Err(e) => rejected.push(RejectedInput {
                input_index: i,
                t_ms: input.t_ms(),
                reason: e.to_string(),
            }),
        }
    }
    let trials = split_trials(&log);
    let aggregate = aggregate(&trials);
    Ok(Report {
        scene_id,
        config,
        inputs: trace.len(),
        rejected,
        skipped_after_error,
        final_phase: session.phase(),
        final_robot_phase: session.robot_phase(),
        trials,
        aggregate,
    })
}

pub fn replay_files(
    scene_path: impl AsRef<Path>,
    trace_path: impl AsRef<Path>,
    config: SessionConfig,
) -> Result<Report, ReplayError> {
    let scene = load_scene_file(scene_path)?;
    let trace = read_trace_file(trace_path)?;
    Ok(replay(&trace, scene, config)?)
}

fn split_trials(log: &[EventLogRecord]) -> Vec<TrialReport> {
    let starts: Vec<usize> = log
        .iter()
        .enumerate()
        .filter(|(_, r)| matches!(r.event, SessionEvent::Fixation(_)))
        .map(|(i, _)| i)
        .collect();
    starts
        .iter()
        .enumerate()
        .map(|(n, &s)| {
            let end = starts.get(n + 1).copied().unwrap_or(log.len());
            summarize(n, &log[s..end])
        })
        .collect()
}

fn summarize(index: usize, records: &[EventLogRecord]) -> TrialReport {
    let SessionEvent::Fixation(f) = &records[0].event else {
        unreachable!("trials start at a fixation record");
    };
    let mut trial = TrialReport {
        index,
        fixation: FixationSummary {
            start_ms: f.start_ms,
            fired_ms: f.fired_ms,
            dwell_latency_ms: f.fired_ms - f.start_ms,
            sample_count: f.sample_count,
            max_dispersion_m: f.max_dispersion_m,
            centroid: f.centroid,
        },
        image_point: None,
        gaze_label: None,
        status: TrialStatus::Error,
        target_id: None,
        candidates: Vec::new(),
        grasp: None,
        expected_id: None,
        correct: false,
        timeline: Vec::new(),
    };
    let mut status = None;
    for r in records {
        match &r.event {
            SessionEvent::Sample(_) | SessionEvent::Progress(_) => continue,
            SessionEvent::Capture(c) => {
                trial.image_point = Some([c.image_u, c.image_v]);
                trial.expected_id = c.ground_truth.clone();
            }
            SessionEvent::Resolution(res) => {
                trial.gaze_label = Some(res.gaze_label.clone());
                trial.target_id = res.target.as_ref().map(|b| b.instance_id.clone());
                trial.candidates = res.candidates.iter().map(|b| b.instance_id.clone()).collect();
                status.get_or_insert(match res.status {
                    ResolutionStatus::Matched => TrialStatus::Matched,
                    ResolutionStatus::NoMatch => TrialStatus::NoMatch,
                    ResolutionStatus::Ambiguous => TrialStatus::Ambiguous,
                });
            }
            SessionEvent::NoObject(_) => {
                status.get_or_insert(TrialStatus::NoObject);
            }
            SessionEvent::Error(_) => {
                status.get_or_insert(TrialStatus::Error);
            }
            SessionEvent::GraspPhase(tr) => match &mut trial.grasp {
                Some(g) if tr.to != RobotPhase::Idle => {
                    g.final_phase = tr.to;
                    if tr.to == RobotPhase::Done {
                        g.done_ms = Some(tr.t_ms);
                    }
                }
                Some(_) => {}
                None if tr.to == RobotPhase::MovingToTarget || tr.to == RobotPhase::Faulted => {
                    trial.grasp = Some(GraspSummary {
                        target_id: tr.target_id.clone().unwrap_or_default(),
                        final_phase: tr.to,
                        started_ms: tr.t_ms,
                        done_ms: None,
                    });
                }
                None => {}
            },
            SessionEvent::Fixation(_) | SessionEvent::Phase(_) | SessionEvent::Detections(_) => {}
        }
        trial.timeline.push(r.clone());
    }
    trial.status = status.unwrap_or(TrialStatus::Error);
    trial.correct = match (&trial.expected_id, trial.status) {
        // The arm's object id, when it started; detector ids may be positional.
        (Some(expected), TrialStatus::Matched) => match &trial.grasp {
            Some(g) => &g.target_id == expected,
            None => trial.target_id.as_ref() == Some(expected),
        },
        (None, TrialStatus::NoObject) => true,
        _ => false,
    };
    trial
}

fn aggregate(trials: &[TrialReport]) -> Aggregate {
    let count = |s: TrialStatus| trials.iter().filter(|t| t.status == s).count();
    let n = trials.len();
    let ratio = |k: usize| (n > 0).then(|| k as f64 / n as f64);
    let mut confidences = Vec::new();
    let mut detections_total = 0;
    let mut dropped_by_gate = 0;
    for r in trials.iter().flat_map(|t| &t.timeline) {
        if let SessionEvent::Detections(d) = &r.event {
            detections_total += d.raw_count;
            dropped_by_gate += d.dropped_by_gate;
            confidences.extend(d.detections.boxes.iter().map(|b| b.confidence));
        }
    }
    let correct = trials.iter().filter(|t| t.correct).count();
    let ambiguous = count(TrialStatus::Ambiguous);
    Aggregate {
        trials: n,
        matched: count(TrialStatus::Matched),
        no_match: count(TrialStatus::NoMatch),
        ambiguous,
        no_object: count(TrialStatus::NoObject),
        errors: count(TrialStatus::Error),
        grasps_completed: trials
            .iter()
            .filter(|t| t.grasp.as_ref().is_some_and(|g| g.final_phase == RobotPhase::Done))
            .count(),
        correct,
        selection_accuracy: ratio(correct),
        ambiguity_rate: ratio(ambiguous),
        mean_confidence: mean(&confidences),
        detections_total,
        dropped_by_gate,
        mean_dwell_latency_ms: mean(
            &trials
                .iter()
                .map(|t| t.fixation.dwell_latency_ms as f64)
                .collect::<Vec<_>>(),
        ),
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}
