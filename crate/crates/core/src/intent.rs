//! Resolves the gazed-at label to one instance in the robot's view.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perception::{BoundingBox, DetectionSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntentError {
    #[error("gaze label must not be empty")]
    EmptyLabel,
}

/// What to do when several robot-view instances share the gazed label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ResolvePolicy {
    /// Refuse to pick; report the candidates.
    #[default]
    #[serde(rename = "strict")]
    Strict,
    /// Pick the most confident candidate (ties by instance id).
    #[serde(rename = "confidence")]
    HighestConfidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionStatus {
    Matched,
    NoMatch,
    Ambiguous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentResolution {
    pub status: ResolutionStatus,
    pub gaze_label: String,
    pub target: Option<BoundingBox>,
    /// Same-label instances, sorted by instance id; only filled when ambiguous.
    pub candidates: Vec<BoundingBox>,
    pub resolved_at_ms: u64,
}

/// Matches `gaze_label` against already-gated robot detections. Labels are
/// compared verbatim.
pub fn resolve(
    gaze_label: &str,
    robot_dets: &DetectionSet,
    policy: ResolvePolicy,
    resolved_at_ms: u64,
) -> Result<IntentResolution, IntentError> {
    if gaze_label.is_empty() {
        return Err(IntentError::EmptyLabel);
    }
    let mut candidates: Vec<&BoundingBox> = robot_dets
        .boxes
        .iter()
        .filter(|b| b.label == gaze_label)
        .collect();
    candidates.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));

    let (status, target, candidates) = match (candidates.as_slice(), policy) {
        ([], _) => (ResolutionStatus::NoMatch, None, Vec::new()),
        ([only], _) => (ResolutionStatus::Matched, Some((*only).clone()), Vec::new()),
        (many, ResolvePolicy::Strict) => (
            ResolutionStatus::Ambiguous,
            None,
            many.iter().map(|b| (*b).clone()).collect(),
        ),
        (many, ResolvePolicy::HighestConfidence) => {
            // sorted by id, so keeping the first maximum breaks ties by id
            let best = many
                .iter()
                .copied()
                .reduce(|best, b| if b.confidence > best.confidence { b } else { best });
            (ResolutionStatus::Matched, best.cloned(), Vec::new())
        }
    };

    Ok(IntentResolution {
        status,
        gaze_label: gaze_label.to_owned(),
        target,
        candidates,
        resolved_at_ms,
    })
}
