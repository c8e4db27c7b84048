//! Gaze-dwell object selection driving a simulated pick-and-place.
//!
//! Gaze rays hit a virtual collision plane ([`geometry`]), dwell clusters
//! become fixations ([`fixation`]), the fixation is mapped into the user-view
//! image and hit-tested against detections ([`perception`]), the resulting
//! label is matched in the robot view ([`intent`]) and the simulated arm picks
//! the object ([`simworld`]). [`orchestrator`] ties the loop together.

pub mod fixation;
pub mod geometry;
pub mod intent;
pub mod orchestrator;
pub mod perception;
pub mod simworld;
