//! 2D kinematic driving environment.
//!
//! A point car moves at constant speed; the only control is a steering
//! wheel value that changes the heading at a fixed yaw gain. Worlds are a
//! goal plus axis-aligned rectangular obstacles. The goal-seeking label is
//! proportional to the bearing error, which is what the corrective
//! demonstrations in this crate are corruptions of.

mod rollout;
mod rrt;
mod stanley;

pub use rollout::{
    make_calibration_rollouts, make_calibration_rollouts_with_noise, rollout, sample_start, OuNoise,
    MAX_ROLLOUT_STEPS, OU_SIGMA, OU_THETA,
};
pub use rrt::{rrt_star, PlannedPath, DEFAULT_PLAN_ITERS};
pub use stanley::{follow_path, stanley_control, TRACKING_GAIN};

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Wheel-to-yaw gain, rad/s of heading change per wheel unit.
pub const K_A: f64 = 1.0;
/// Goal-seeking label gain, wheel units per radian of bearing error.
pub const K_O: f64 = 1.0;
/// Constant forward speed, m/s.
pub const SPEED: f64 = 2.0;
/// Simulation timestep, seconds.
pub const DT: f64 = 0.1;
/// Steering saturation, wheel units.
pub const WHEEL_LIMIT: f64 = 2.5;
/// Distance at which the goal counts as reached, meters.
pub const GOAL_RADIUS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum DrivingError {
    #[error("timestep must be positive, got {0}")]
    InvalidTimestep(f64),
    #[error("speed must be positive, got {0}")]
    InvalidSpeed(f64),
    #[error("empty path")]
    EmptyPath,
    #[error("planning failed: {0}")]
    PlanningFailed(String),
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("trajectory file: {0}")]
    TrajectoryFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Normalize an angle to `(-π, π]`.
pub fn wrap(angle: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut a = angle % two_pi;
    if a <= -PI {
        a += two_pi;
    } else if a > PI {
        a -= two_pi;
    }
    a
}

/// A steering command, saturated to `±WHEEL_LIMIT` on construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SteeringAction {
    wheel: f64,
}

impl SteeringAction {
    pub fn new(wheel: f64) -> Self {
        Self {
            wheel: wheel.clamp(-WHEEL_LIMIT, WHEEL_LIMIT),
        }
    }

    pub fn wheel(self) -> f64 {
        self.wheel
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarState {
    pub x: f64,
    pub y: f64,
    /// Radians in `(-π, π]`; 0 points along +x, positive turns left.
    pub heading: f64,
    pub speed: f64,
}

impl CarState {
    pub fn new(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap(heading),
            speed,
        }
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    pub fn distance_to(&self, p: (f64, f64)) -> f64 {
        ((self.x - p.0).powi(2) + (self.y - p.1).powi(2)).sqrt()
    }
}

/// Advance one timestep: the wheel turns the heading first, then the car
/// moves `speed·dt` along the new heading.
pub fn step(s: &CarState, a: SteeringAction, dt: f64) -> Result<CarState, DrivingError> {
    if dt <= 0.0 {
        return Err(DrivingError::InvalidTimestep(dt));
    }
    let heading = wrap(s.heading + K_A * a.wheel() * dt);
    Ok(CarState {
        x: s.x + s.speed * dt * heading.cos(),
        y: s.y + s.speed * dt * heading.sin(),
        heading,
        speed: s.speed,
    })
}

/// Axis-aligned rectangle, `min` corner to `max` corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Self {
            min_x,
            min_y,
            max_x,
            max_y,
        }
    }

    pub fn contains(&self, (x, y): (f64, f64)) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.min_x >= self.min_x
            && other.max_x <= self.max_x
            && other.min_y >= self.min_y
            && other.max_y <= self.max_y
    }

    /// Grow every side by `margin` (shrink for negative values).
    pub fn inflate(&self, margin: f64) -> Rect {
        Rect {
            min_x: self.min_x - margin,
            min_y: self.min_y - margin,
            max_x: self.max_x + margin,
            max_y: self.max_y + margin,
        }
    }

    fn corners(&self) -> [(f64, f64); 4] {
        [
            (self.min_x, self.min_y),
            (self.max_x, self.min_y),
            (self.max_x, self.max_y),
            (self.min_x, self.max_y),
        ]
    }

    /// Exact segment test: an endpoint inside, or a crossing of any edge.
    pub fn intersects_segment(&self, p: (f64, f64), q: (f64, f64)) -> bool {
        if self.contains(p) || self.contains(q) {
            return true;
        }
        let c = self.corners();
        (0..4).any(|i| segments_intersect(p, q, c[i], c[(i + 1) % 4]))
    }
}

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn on_segment(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> bool {
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

/// Closed segment intersection via orientation straddle tests.
fn segments_intersect(p1: (f64, f64), p2: (f64, f64), q1: (f64, f64), q2: (f64, f64)) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// The task environment: where to drive, what to avoid, where to sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub goal: (f64, f64),
    pub bounds: Rect,
    #[serde(default)]
    pub obstacles: Vec<Rect>,
}

impl World {
    /// An obstacle-free world centered on its goal.
    pub fn open(goal: (f64, f64), half_extent: f64) -> Self {
        Self {
            goal,
            bounds: Rect::new(
                goal.0 - half_extent,
                goal.1 - half_extent,
                goal.0 + half_extent,
                goal.1 + half_extent,
            ),
            obstacles: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), DrivingError> {
        if self.bounds.min_x >= self.bounds.max_x || self.bounds.min_y >= self.bounds.max_y {
            return Err(DrivingError::InvalidWorld("degenerate bounds".into()));
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if o.min_x > o.max_x || o.min_y > o.max_y {
                return Err(DrivingError::InvalidWorld(format!(
                    "obstacle {i} has inverted corners"
                )));
            }
            if !self.bounds.contains_rect(o) {
                return Err(DrivingError::InvalidWorld(format!(
                    "obstacle {i} extends outside bounds"
                )));
            }
            if o.contains(self.goal) {
                return Err(DrivingError::InvalidWorld(format!(
                    "goal sits inside obstacle {i}"
                )));
            }
        }
        Ok(())
    }

    pub fn point_collides(&self, p: (f64, f64)) -> bool {
        self.obstacles.iter().any(|o| o.contains(p))
    }

    pub fn segment_collides(&self, p: (f64, f64), q: (f64, f64)) -> bool {
        self.obstacles.iter().any(|o| o.intersects_segment(p, q))
    }

    /// Same world with every obstacle grown by `margin`, for planning with
    /// tracking clearance. Bounds are unchanged.
    pub fn inflate_obstacles(&self, margin: f64) -> World {
        World {
            goal: self.goal,
            bounds: self.bounds,
            obstacles: self.obstacles.iter().map(|o| o.inflate(margin)).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DrivingError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DrivingError> {
        let w: World = serde_json::from_str(&fs::read_to_string(path)?)?;
        w.validate()?;
        Ok(w)
    }
}

/// A rollout: `states` is one longer than `actions`, `dt` spaces them.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<CarState>,
    pub actions: Vec<SteeringAction>,
}

impl Trajectory {
    pub fn new(dt: f64, states: Vec<CarState>, actions: Vec<SteeringAction>) -> Result<Self, DrivingError> {
        if dt <= 0.0 {
            return Err(DrivingError::InvalidTimestep(dt));
        }
        if states.len() != actions.len() + 1 {
            return Err(DrivingError::TrajectoryFormat(format!(
                "{} states need {} actions, got {}",
                states.len(),
                states.len().saturating_sub(1),
                actions.len()
            )));
        }
        Ok(Self { dt, states, actions })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// The wheel values as a plain series, for label processing.
    pub fn action_series(&self) -> Vec<f64> {
        self.actions.iter().map(|a| a.wheel()).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DrivingError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "x", "y", "heading", "action"])?;
        for (i, s) in self.states.iter().enumerate() {
            let t = i as f64 * self.dt;
            let action = match self.actions.get(i) {
                Some(a) => a.wheel().to_string(),
                None => String::new(),
            };
            w.write_record([
                t.to_string(),
                s.x.to_string(),
                s.y.to_string(),
                s.heading.to_string(),
                action,
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read a rollout written by [`Trajectory::write_csv`]. The timestep is
    /// recovered from the first two rows; `speed` fills the state field the
    /// file does not carry.
    pub fn read_csv(path: &Path, speed: f64) -> Result<Self, DrivingError> {
        let mut r = csv::Reader::from_path(path)?;
        let mut times = Vec::new();
        let mut states = Vec::new();
        let mut actions = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| -> Result<f64, DrivingError> {
                rec.get(i)
                    .ok_or_else(|| DrivingError::TrajectoryFormat(format!("row too short: {rec:?}")))?
                    .parse()
                    .map_err(|e| DrivingError::TrajectoryFormat(format!("{e}: {rec:?}")))
            };
            times.push(field(0)?);
            states.push(CarState::new(field(1)?, field(2)?, field(3)?, speed));
            match rec.get(4) {
                Some("") | None => {}
                Some(_) => actions.push(SteeringAction::new(field(4)?)),
            }
        }
        if states.len() < 2 {
            return Err(DrivingError::TrajectoryFormat(
                "need at least two rows".into(),
            ));
        }
        let dt = times[1] - times[0];
        Trajectory::new(dt, states, actions)
    }
}

/// The goal-seeking supervision signal: steer proportionally to the bearing
/// error, saturated at the wheel limit. A car exactly on the goal gets a
/// zero action (no bearing is defined there).
pub fn ground_truth_label(s: &CarState, w: &World) -> SteeringAction {
    ground_truth_label_with_gain(s, w, K_O)
}

pub fn ground_truth_label_with_gain(s: &CarState, w: &World, gain: f64) -> SteeringAction {
    let (dx, dy) = (w.goal.0 - s.x, w.goal.1 - s.y);
    if dx == 0.0 && dy == 0.0 {
        return SteeringAction::new(0.0);
    }
    let bearing = dy.atan2(dx);
    SteeringAction::new(gain * wrap(bearing - s.heading))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn wrap_hits_the_half_open_boundary() {
        assert_eq!(wrap(PI), PI);
        assert_eq!(wrap(-PI), PI);
        assert_eq!(wrap(0.0), 0.0);
        assert!((wrap(3.0 * PI) - PI).abs() < 1e-12);
    }

    #[test]
    fn zero_wheel_goes_straight() {
        let s = CarState::new(1.0, 2.0, 0.5, SPEED);
        let next = step(&s, SteeringAction::new(0.0), DT).unwrap();
        assert_eq!(next.heading, s.heading);
        assert!((next.x - (s.x + SPEED * DT * 0.5f64.cos())).abs() < 1e-15);
        assert!((next.y - (s.y + SPEED * DT * 0.5f64.sin())).abs() < 1e-15);
    }

    #[test]
    fn full_deflection_turns_by_gain_times_dt() {
        // Stationary car, one whole second: pure rotation.
        let s = CarState::new(0.0, 0.0, 0.0, 0.0);
        let next = step(&s, SteeringAction::new(2.5), 1.0).unwrap();
        assert_eq!(next.heading, wrap(K_A * 2.5));
        assert_eq!((next.x, next.y), (0.0, 0.0));
    }

    #[test]
    fn constant_wheel_traces_a_circle_of_the_kinematic_radius() {
        let wheel = 1.0;
        let mut s = CarState::new(0.0, 0.0, 0.0, SPEED);
        let mut pts = Vec::new();
        for _ in 0..100 {
            s = step(&s, SteeringAction::new(wheel), DT).unwrap();
            pts.push((s.x, s.y));
        }
        // Circumcenter from three well-separated arc points.
        let (p1, p2, p3) = (pts[0], pts[25], pts[50]);
        let d = 2.0 * (p1.0 * (p2.1 - p3.1) + p2.0 * (p3.1 - p1.1) + p3.0 * (p1.1 - p2.1));
        let sq = |p: (f64, f64)| p.0 * p.0 + p.1 * p.1;
        let cx = (sq(p1) * (p2.1 - p3.1) + sq(p2) * (p3.1 - p1.1) + sq(p3) * (p1.1 - p2.1)) / d;
        let cy = (sq(p1) * (p3.0 - p2.0) + sq(p2) * (p1.0 - p3.0) + sq(p3) * (p2.0 - p1.0)) / d;
        let ideal = SPEED / (K_A * wheel);
        for p in &pts {
            let r = ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt();
            assert!((r - ideal).abs() / ideal < 0.01, "radius {r} vs {ideal}");
        }
    }

    #[test]
    fn nonpositive_timestep_is_rejected() {
        let s = CarState::new(0.0, 0.0, 0.0, SPEED);
        assert!(step(&s, SteeringAction::new(0.0), 0.0).is_err());
        assert!(step(&s, SteeringAction::new(0.0), -0.1).is_err());
    }

    #[test]
    fn actions_saturate_on_construction() {
        assert_eq!(SteeringAction::new(7.0).wheel(), WHEEL_LIMIT);
        assert_eq!(SteeringAction::new(-7.0).wheel(), -WHEEL_LIMIT);
        assert_eq!(SteeringAction::new(1.25).wheel(), 1.25);
    }

    #[test]
    fn goal_dead_ahead_needs_no_steering() {
        let w = World::open((10.0, 0.0), 20.0);
        let s = CarState::new(0.0, 0.0, 0.0, SPEED);
        assert_eq!(ground_truth_label(&s, &w).wheel(), 0.0);
    }

    #[test]
    fn goal_to_the_left_steers_a_quarter_turn() {
        let w = World::open((0.0, 10.0), 20.0);
        let s = CarState::new(0.0, 0.0, 0.0, SPEED);
        let a = ground_truth_label(&s, &w);
        assert!((a.wheel() - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn goal_behind_with_double_gain_saturates() {
        let w = World::open((-10.0, 0.0), 20.0);
        let s = CarState::new(0.0, 0.0, 0.0, SPEED);
        let a = ground_truth_label_with_gain(&s, &w, 2.0);
        assert_eq!(a.wheel(), WHEEL_LIMIT);
    }

    #[test]
    fn label_at_goal_point_is_zero() {
        let w = World::open((3.0, 4.0), 20.0);
        let s = CarState::new(3.0, 4.0, 1.0, SPEED);
        assert_eq!(ground_truth_label(&s, &w).wheel(), 0.0);
    }

    #[test]
    fn world_validation_catches_bad_geometry() {
        let mut w = World::open((0.0, 0.0), 10.0);
        w.obstacles.push(Rect::new(-1.0, -1.0, 1.0, 1.0));
        assert!(matches!(w.validate(), Err(DrivingError::InvalidWorld(_))));

        let mut w = World::open((5.0, 5.0), 10.0);
        w.obstacles.push(Rect::new(0.0, 0.0, 100.0, 1.0));
        assert!(matches!(w.validate(), Err(DrivingError::InvalidWorld(_))));

        let mut w = World::open((5.0, 5.0), 10.0);
        w.obstacles.push(Rect::new(0.0, 0.0, 1.0, 1.0));
        assert!(w.validate().is_ok());
    }

    #[test]
    fn segment_collision_agrees_with_interval_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let r = Rect::new(-1.0, -0.5, 2.0, 1.5);
        for _ in 0..2000 {
            let p = (rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0));
            let q = (rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0));
            let got = r.intersects_segment(p, q);
            let want = crate::reference::segment_hits_rect(p, q, (r.min_x, r.min_y, r.max_x, r.max_y));
            assert_eq!(got, want, "segment {p:?}-{q:?}");
        }
    }

    #[test]
    fn trajectory_csv_round_trips() {
        let w = World::open((0.0, 12.0), 20.0);
        let mut states = vec![CarState::new(0.0, 0.0, 0.3, SPEED)];
        let mut actions = Vec::new();
        for _ in 0..10 {
            let a = ground_truth_label(states.last().unwrap(), &w);
            actions.push(a);
            states.push(step(states.last().unwrap(), a, DT).unwrap());
        }
        let traj = Trajectory::new(DT, states, actions).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rollout.csv");
        traj.write_csv(&path).unwrap();
        let back = Trajectory::read_csv(&path, SPEED).unwrap();
        assert_eq!(back.dt, traj.dt);
        assert_eq!(back.states, traj.states);
        assert_eq!(back.actions, traj.actions);
    }

    #[test]
    fn world_json_round_trips() {
        let mut w = World::open((1.0, 2.0), 15.0);
        w.obstacles.push(Rect::new(3.0, 3.0, 5.0, 6.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.json");
        w.save(&path).unwrap();
        assert_eq!(World::load(&path).unwrap(), w);
    }

    #[test]
    fn mismatched_action_count_is_rejected() {
        let s = CarState::new(0.0, 0.0, 0.0, SPEED);
        let got = Trajectory::new(DT, vec![s, s], vec![]);
        assert!(matches!(got, Err(DrivingError::TrajectoryFormat(_))));
    }

    proptest! {
        #[test]
        fn wrap_lands_in_the_interval_and_is_idempotent(x in -50.0f64..50.0) {
            let w = wrap(x);
            prop_assert!(w > -PI && w <= PI);
            prop_assert_eq!(wrap(w), w);
            // Same direction modulo a full turn.
            let turns = ((x - w) / (2.0 * PI)).round();
            prop_assert!((turns * 2.0 * PI - (x - w)).abs() < 1e-9);
        }

        /// Rotating the world and car together leaves the label unchanged.
        #[test]
        fn label_is_rotation_equivariant(
            gx in -10.0f64..10.0,
            gy in -10.0f64..10.0,
            cx in -10.0f64..10.0,
            cy in -10.0f64..10.0,
            heading in -3.0f64..3.0,
            alpha in -3.0f64..3.0,
        ) {
            prop_assume!((gx - cx).abs() > 1e-6 || (gy - cy).abs() > 1e-6);
            let w = World::open((gx, gy), 100.0);
            let s = CarState::new(cx, cy, heading, SPEED);
            let base = ground_truth_label(&s, &w).wheel();

            let rot = |x: f64, y: f64| (
                x * alpha.cos() - y * alpha.sin(),
                x * alpha.sin() + y * alpha.cos(),
            );
            let (rgx, rgy) = rot(gx, gy);
            let (rcx, rcy) = rot(cx, cy);
            let rw = World::open((rgx, rgy), 100.0);
            let rs = CarState::new(rcx, rcy, heading + alpha, SPEED);
            let rotated = ground_truth_label(&rs, &rw).wheel();
            prop_assert!((base - rotated).abs() < 1e-9, "{} vs {}", base, rotated);
        }
    }
}
