//! Path-tracking steering law.
//!
//! The command combines the heading error against the nearest path
//! segment's tangent with an arctangent term on the signed cross-track
//! distance. Positive wheel turns left, so a car left of the path gets a
//! negative cross-track contribution and is pushed back.

use super::rrt::PlannedPath;
use super::{step, wrap, CarState, DrivingError, SteeringAction, Trajectory, World, GOAL_RADIUS};

/// Cross-track gain used by the rollout pipeline.
pub const TRACKING_GAIN: f64 = 2.5;

/// Nearest point on the path: (segment index, closest point, squared distance).
fn nearest_segment(path: &PlannedPath, p: (f64, f64)) -> Option<(usize, (f64, f64), f64)> {
    let pts = &path.waypoints;
    if pts.is_empty() {
        return None;
    }
    if pts.len() == 1 {
        let d2 = (p.0 - pts[0].0).powi(2) + (p.1 - pts[0].1).powi(2);
        return Some((0, pts[0], d2));
    }
    let mut best: Option<(usize, (f64, f64), f64)> = None;
    for (i, seg) in pts.windows(2).enumerate() {
        let (a, b) = (seg[0], seg[1]);
        let (abx, aby) = (b.0 - a.0, b.1 - a.1);
        let len2 = abx * abx + aby * aby;
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / len2).clamp(0.0, 1.0)
        };
        let c = (a.0 + t * abx, a.1 + t * aby);
        let d2 = (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2);
        if best.map_or(true, |(_, _, bd2)| d2 < bd2) {
            best = Some((i, c, d2));
        }
    }
    best
}

/// Steering toward a planned path from the current pose.
pub fn stanley_control(
    s: &CarState,
    path: &PlannedPath,
    gain: f64,
) -> Result<SteeringAction, DrivingError> {
    if s.speed <= 0.0 {
        return Err(DrivingError::InvalidSpeed(s.speed));
    }
    let (seg, closest, _) = nearest_segment(path, s.position()).ok_or(DrivingError::EmptyPath)?;
    let pts = &path.waypoints;
    let (a, b) = if pts.len() == 1 {
        (pts[0], pts[0])
    } else {
        (pts[seg], pts[seg + 1])
    };
    let (tx, ty) = (b.0 - a.0, b.1 - a.1);
    let tangent = if tx == 0.0 && ty == 0.0 {
        s.heading // degenerate segment: no direction to prefer
    } else {
        ty.atan2(tx)
    };
    let heading_error = wrap(tangent - s.heading);
    // Signed lateral offset: positive when the car is right of the path.
    let (px, py) = (s.x - closest.0, s.y - closest.1);
    let norm = (tx * tx + ty * ty).sqrt();
    let cross = if norm == 0.0 {
        0.0
    } else {
        (px * ty - py * tx) / norm
    };
    Ok(SteeringAction::new(
        heading_error + (gain * cross / s.speed).atan(),
    ))
}

/// Closed-loop tracking until the goal region or the step budget.
pub fn follow_path(
    start: CarState,
    path: &PlannedPath,
    world: &World,
    gain: f64,
    max_steps: usize,
    dt: f64,
) -> Result<Trajectory, DrivingError> {
    let mut states = vec![start];
    let mut actions = Vec::new();
    for _ in 0..max_steps {
        let s = *states.last().expect("states never empty");
        if s.distance_to(world.goal) <= GOAL_RADIUS {
            break;
        }
        let a = stanley_control(&s, path, gain)?;
        actions.push(a);
        states.push(step(&s, a, dt)?);
    }
    Trajectory::new(dt, states, actions)
}

#[cfg(test)]
mod tests {
    use super::super::rrt::rrt_star;
    use super::*;
    use crate::driving::{Rect, DEFAULT_PLAN_ITERS, DT, SPEED};

    fn straight_path() -> PlannedPath {
        PlannedPath {
            waypoints: vec![(0.0, 0.0), (50.0, 0.0)],
            cost: 50.0,
        }
    }

    #[test]
    fn aligned_on_path_needs_no_correction() {
        let s = CarState::new(5.0, 0.0, 0.0, SPEED);
        let a = stanley_control(&s, &straight_path(), TRACKING_GAIN).unwrap();
        assert_eq!(a.wheel(), 0.0);
    }

    #[test]
    fn heading_left_of_tangent_steers_right() {
        let s = CarState::new(5.0, 0.0, 0.3, SPEED);
        let a = stanley_control(&s, &straight_path(), TRACKING_GAIN).unwrap();
        assert!((a.wheel() - (-0.3)).abs() < 1e-12);
    }

    #[test]
    fn zero_speed_is_rejected() {
        let s = CarState::new(0.0, 0.0, 0.0, 0.0);
        assert!(matches!(
            stanley_control(&s, &straight_path(), TRACKING_GAIN),
            Err(DrivingError::InvalidSpeed(_))
        ));
    }

    #[test]
    fn lateral_offset_converges_quickly() {
        // 1 m left of a straight path, aligned with it.
        let mut s = CarState::new(0.0, 1.0, 0.0, SPEED);
        let path = straight_path();
        let mut settled = None;
        for i in 0..200 {
            let a = stanley_control(&s, &path, TRACKING_GAIN).unwrap();
            s = step(&s, a, DT).unwrap();
            if s.y.abs() < 0.05 && settled.is_none() {
                settled = Some(i);
            }
        }
        assert!(s.y.abs() < 0.05, "still {} m off after 200 steps", s.y);
        assert!(settled.is_some());
    }

    #[test]
    fn follows_a_planned_route_to_the_goal_without_contact() {
        let mut w = World::open((0.0, 8.0), 12.0);
        w.obstacles.push(Rect::new(-12.0, 3.0, 6.0, 4.0));
        w.validate().unwrap();
        // Plan with a safety margin, drive against the true obstacles.
        let planning_world = w.inflate_obstacles(0.4);
        let path = rrt_star((0.0, -2.0), &planning_world, 11, DEFAULT_PLAN_ITERS).unwrap();
        let start = CarState::new(0.0, -2.0, 1.0, SPEED);
        let traj = follow_path(start, &path, &w, TRACKING_GAIN, 400, DT).unwrap();
        let end = traj.states.last().unwrap();
        assert!(end.distance_to(w.goal) <= GOAL_RADIUS, "never reached goal");
        for pair in traj.states.windows(2) {
            assert!(
                !w.segment_collides(pair[0].position(), pair[1].position()),
                "hit an obstacle near ({:.2}, {:.2})",
                pair[0].x,
                pair[0].y
            );
        }
    }
}
