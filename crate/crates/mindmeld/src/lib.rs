//! Learning a per-demonstrator correction of suboptimal steering labels.
//!
//! A demonstrator watching an agent drive tends to correct it in a
//! personal style: too early or too late, too hard or too soft. This crate
//! learns that style as a small embedding vector and uses it to map the
//! demonstrator's raw corrective labels to predicted ground-truth labels,
//! then feeds the improved labels back into imitation learning.
//!
//! The crate is organized as:
//!
//! - [`autodiff`] — reverse-mode tape, LSTM/dense layers, Adam
//! - [`driving`] — 2D kinematic car, goal labeler, RRT* planner, Stanley controller
//! - [`demonstrators`] — simulated suboptimal labelers with known styles
//! - [`model`] — encoder / prediction head / posterior head / embedding table
//! - [`style`] — DTW amplitude and timing metrics, correlation analysis
//! - [`pipeline`] — end-to-end experiment driver, BC/DAgger conditions, reports
//! - [`reference`] — independent naive implementations used for verification

pub mod autodiff;
pub mod demonstrators;
pub mod driving;
pub mod model;
pub mod pipeline;
pub mod reference;
pub mod style;

pub use autodiff::{Graph, Tensor};
pub use driving::{CarState, SteeringAction, Trajectory, World};
