use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ObjectLocation, Scene};
use crate::geometry::Vec3;
use crate::perception::{BoundingBox, View};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RobotError {
    #[error("robot is busy ({0:?})")]
    Busy(RobotPhase),
    #[error("invalid robot config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobotPhase {
    Idle,
    MovingToTarget,
    Grasping,
    MovingToPlace,
    Releasing,
    Done,
    Faulted,
}

impl RobotPhase {
    fn successor(self) -> Option<RobotPhase> {
        use RobotPhase::*;
        match self {
            MovingToTarget => Some(Grasping),
            Grasping => Some(MovingToPlace),
            MovingToPlace => Some(Releasing),
            Releasing => Some(Done),
            Idle | Done | Faulted => None,
        }
    }

    pub fn is_active(self) -> bool {
        self.successor().is_some()
    }
}

/// Edges of the pick-and-place cycle, plus `Faulted` from anywhere and the
/// `Done`/`Faulted` -> `Idle` reset between trials.
pub fn is_allowed_transition(from: RobotPhase, to: RobotPhase) -> bool {
    use RobotPhase::*;
    matches!(
        (from, to),
        (Idle, MovingToTarget)
            | (MovingToTarget, Grasping)
            | (Grasping, MovingToPlace)
            | (MovingToPlace, Releasing)
            | (Releasing, Done)
            | (Done, Idle)
            | (Faulted, Idle)
    ) || (to == Faulted && from != Faulted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseDurations {
    pub move_to_target_ms: u64,
    pub grasp_ms: u64,
    pub move_to_place_ms: u64,
    pub release_ms: u64,
}

impl Default for PhaseDurations {
    fn default() -> Self {
        Self {
            move_to_target_ms: 1500,
            grasp_ms: 500,
            move_to_place_ms: 1500,
            release_ms: 500,
        }
    }
}

impl PhaseDurations {
    fn of(&self, phase: RobotPhase) -> u64 {
        match phase {
            RobotPhase::MovingToTarget => self.move_to_target_ms,
            RobotPhase::Grasping => self.grasp_ms,
            RobotPhase::MovingToPlace => self.move_to_place_ms,
            RobotPhase::Releasing => self.release_ms,
            _ => 0,
        }
    }

    pub fn total_ms(&self) -> u64 {
        self.move_to_target_ms + self.grasp_ms + self.move_to_place_ms + self.release_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobotConfig {
    pub durations: PhaseDurations,
    /// Probability of an injected fault at each phase change.
    pub p_fault: f64,
}

impl Default for RobotConfig {
    fn default() -> Self {
        Self {
            durations: PhaseDurations::default(),
            p_fault: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub phase: RobotPhase,
    pub target_id: Option<String>,
    pub phase_entered_ms: u64,
    pub fault: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTransition {
    pub t_ms: u64,
    pub from: RobotPhase,
    pub to: RobotPhase,
    pub target_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Simulated arm. Time only moves when the caller advances it.
#[derive(Debug, Clone)]
pub struct RobotArm {
    config: RobotConfig,
    state: RobotState,
    rng: ChaCha8Rng,
}

impl RobotArm {
    pub fn new(config: RobotConfig, seed: u64) -> Result<Self, RobotError> {
        if !(0.0..=1.0).contains(&config.p_fault) {
            return Err(RobotError::InvalidConfig(format!(
                "p_fault {} outside [0, 1]",
                config.p_fault
            )));
        }
        Ok(Self {
            config,
            state: RobotState {
                phase: RobotPhase::Idle,
                target_id: None,
                phase_entered_ms: 0,
                fault: None,
            },
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn phase(&self) -> RobotPhase {
        self.state.phase
    }

    /// Starts a pick-and-place of `target`. A finished cycle (`Done`) is
    /// reset implicitly; any active phase is `Busy`. A target that is not on
    /// the table faults the arm instead of erroring.
    pub fn grasp(
        &mut self,
        scene: &mut Scene,
        target: &BoundingBox,
        t_ms: u64,
    ) -> Result<Vec<PhaseTransition>, RobotError> {
        let mut out = Vec::new();
        match self.state.phase {
            RobotPhase::Idle => {}
            RobotPhase::Done => out.extend(self.reset(t_ms)),
            busy => return Err(RobotError::Busy(busy)),
        }

        // Detector instance ids need not be scene ids (an external service
        // numbers its boxes), so fall back to where the box is.
        let found = scene
            .object(&target.instance_id)
            .or_else(|| scene.locate(View::RobotView, target));
        let id = found.map_or_else(|| target.instance_id.clone(), |o| o.id.clone());
        let location = found.map(|o| o.location);
        self.state.target_id = Some(id.clone());
        match location {
            Some(ObjectLocation::OnTable) => {
                out.push(self.enter(RobotPhase::MovingToTarget, t_ms, None));
            }
            Some(loc) => {
                let reason = format!("target {id} is no longer on the table ({loc:?})");
                out.push(self.enter(RobotPhase::Faulted, t_ms, Some(reason)));
            }
            None => {
                let reason = format!("no object in the scene under target {id}");
                out.push(self.enter(RobotPhase::Faulted, t_ms, Some(reason)));
            }
        }
        Ok(out)
    }

    /// Runs every phase change due at or before `t_ms`.
    pub fn advance(&mut self, scene: &mut Scene, t_ms: u64) -> Vec<PhaseTransition> {
        let place_zone = scene.place_zone;
        let mut out = Vec::new();
        while let Some(next) = self.state.phase.successor() {
            let due = self.state.phase_entered_ms + self.config.durations.of(self.state.phase);
            if due > t_ms {
                break;
            }
            if self.config.p_fault > 0.0 && self.rng.random::<f64>() < self.config.p_fault {
                self.drop_target(scene);
                out.push(self.enter(RobotPhase::Faulted, due, Some("injected fault".into())));
                break;
            }
            let target = self.state.target_id.clone();
            if let Some(obj) = target.as_deref().and_then(|id| scene.object_mut(id)) {
                match next {
                    RobotPhase::MovingToPlace => obj.location = ObjectLocation::Grasped,
                    RobotPhase::Done => {
                        obj.location = ObjectLocation::InPlaceZone;
                        obj.position = place_zone + Vec3::new(0.0, 0.0, obj.half_extents.z);
                    }
                    _ => {}
                }
            }
            out.push(self.enter(next, due, None));
        }
        out
    }

    /// `Done`/`Faulted` -> `Idle`.
    pub fn reset(&mut self, t_ms: u64) -> Option<PhaseTransition> {
        matches!(self.state.phase, RobotPhase::Done | RobotPhase::Faulted).then(|| {
            let tr = self.enter(RobotPhase::Idle, t_ms, None);
            self.state.target_id = None;
            self.state.fault = None;
            tr
        })
    }

    /// Stops any cycle and returns to `Idle`; a carried object goes back on the table.
    pub fn abort(&mut self, scene: &mut Scene, t_ms: u64) -> Vec<PhaseTransition> {
        let mut out = Vec::new();
        if self.state.phase.is_active() {
            self.drop_target(scene);
            out.push(self.enter(RobotPhase::Faulted, t_ms, Some("aborted".into())));
        }
        out.extend(self.reset(t_ms));
        out
    }

    fn drop_target(&mut self, scene: &mut Scene) {
        if let Some(obj) = self.state.target_id.as_deref().and_then(|id| scene.object_mut(id)) {
            if obj.location == ObjectLocation::Grasped {
                obj.location = ObjectLocation::OnTable;
            }
        }
    }

    fn enter(&mut self, to: RobotPhase, t_ms: u64, reason: Option<String>) -> PhaseTransition {
        let from = self.state.phase;
        debug_assert!(is_allowed_transition(from, to), "{from:?} -> {to:?}");
        self.state.phase = to;
        self.state.phase_entered_ms = t_ms;
        if to == RobotPhase::Faulted {
            self.state.fault = reason.clone();
        }
        PhaseTransition {
            t_ms,
            from,
            to,
            target_id: self.state.target_id.clone(),
            reason,
        }
    }
}
