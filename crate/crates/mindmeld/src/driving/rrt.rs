//! Sampling-based path planning with rewiring.
//!
//! Classic asymptotically-optimal tree search: uniform samples (with a
//! small goal bias), nearest-node extension capped at `MAX_STEP`, parent
//! selection and rewiring inside a shrinking neighbor radius. The goal is
//! joined as a final exact waypoint from the best in-radius node, so the
//! returned path ends at the goal point itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DrivingError, World, GOAL_RADIUS};

/// Maximum extension length per sample, meters.
pub const MAX_STEP: f64 = 1.0;
/// Fraction of samples drawn at the goal instead of uniformly.
pub const GOAL_BIAS: f64 = 0.05;
/// Neighbor-radius constant: radius = `GAMMA * sqrt(ln n / n)`.
pub const GAMMA: f64 = 30.0;
/// Default sample budget.
pub const DEFAULT_PLAN_ITERS: usize = 4000;

/// A collision-free polyline from a start point to the goal.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedPath {
    pub waypoints: Vec<(f64, f64)>,
    pub cost: f64,
}

struct TreeNode {
    pos: (f64, f64),
    parent: usize,
    cost: f64,
    children: Vec<usize>,
}

struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    fn nearest(&self, p: (f64, f64)) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, n) in self.nodes.iter().enumerate() {
            let d = dist2(n.pos, p);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    fn near(&self, p: (f64, f64), radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        (0..self.nodes.len())
            .filter(|&i| dist2(self.nodes[i].pos, p) <= r2)
            .collect()
    }

    fn add(&mut self, pos: (f64, f64), parent: usize, cost: f64) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            pos,
            parent,
            cost,
            children: Vec::new(),
        });
        self.nodes[parent].children.push(id);
        id
    }

    /// Reattach `node` under `parent` and push the cost change down the
    /// subtree.
    fn rewire(&mut self, node: usize, parent: usize, cost: f64) {
        let old_parent = self.nodes[node].parent;
        self.nodes[old_parent].children.retain(|&c| c != node);
        self.nodes[node].parent = parent;
        self.nodes[parent].children.push(node);
        let delta = cost - self.nodes[node].cost;
        let mut stack = vec![node];
        while let Some(i) = stack.pop() {
            self.nodes[i].cost += delta;
            stack.extend(&self.nodes[i].children);
        }
    }
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    dist2(a, b).sqrt()
}

/// Plan from `start` to the world's goal region. Deterministic per seed;
/// for a fixed seed the result can only improve as `iters` grows.
pub fn rrt_star(
    start: (f64, f64),
    world: &World,
    seed: u64,
    iters: usize,
) -> Result<PlannedPath, DrivingError> {
    if world.point_collides(start) {
        return Err(DrivingError::PlanningFailed(
            "start is inside an obstacle".into(),
        ));
    }
    if !world.bounds.contains(start) {
        return Err(DrivingError::PlanningFailed("start is out of bounds".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tree = Tree {
        nodes: vec![TreeNode {
            pos: start,
            parent: 0,
            cost: 0.0,
            children: Vec::new(),
        }],
    };

    for _ in 0..iters {
        let sample = if rng.gen_bool(GOAL_BIAS) {
            world.goal
        } else {
            (
                rng.gen_range(world.bounds.min_x..=world.bounds.max_x),
                rng.gen_range(world.bounds.min_y..=world.bounds.max_y),
            )
        };
        let nearest = tree.nearest(sample);
        let near_pos = tree.nodes[nearest].pos;
        let d = dist(near_pos, sample);
        if d < 1e-9 {
            continue;
        }
        let frac = (MAX_STEP / d).min(1.0);
        let new_pos = (
            near_pos.0 + (sample.0 - near_pos.0) * frac,
            near_pos.1 + (sample.1 - near_pos.1) * frac,
        );
        if world.point_collides(new_pos) || world.segment_collides(near_pos, new_pos) {
            continue;
        }

        let n = tree.nodes.len();
        let radius = GAMMA * ((n as f64).ln().max(1.0) / n as f64).sqrt();
        let near_set = tree.near(new_pos, radius.max(MAX_STEP));

        // Cheapest collision-free parent in the neighborhood.
        let mut parent = nearest;
        let mut cost = tree.nodes[nearest].cost + dist(near_pos, new_pos);
        for &cand in &near_set {
            let c = tree.nodes[cand].cost + dist(tree.nodes[cand].pos, new_pos);
            if c < cost && !world.segment_collides(tree.nodes[cand].pos, new_pos) {
                parent = cand;
                cost = c;
            }
        }
        let new_id = tree.add(new_pos, parent, cost);

        // Pull neighbors through the new node where that is cheaper.
        for &cand in &near_set {
            if cand == parent {
                continue;
            }
            let through = cost + dist(new_pos, tree.nodes[cand].pos);
            if through + 1e-12 < tree.nodes[cand].cost
                && !world.segment_collides(new_pos, tree.nodes[cand].pos)
            {
                tree.rewire(cand, new_id, through);
            }
        }
    }

    // Best finish: any node inside the goal region, connected straight to
    // the exact goal point.
    let mut best: Option<(usize, f64)> = None;
    for (i, node) in tree.nodes.iter().enumerate() {
        let tail = dist(node.pos, world.goal);
        if tail > GOAL_RADIUS || world.segment_collides(node.pos, world.goal) {
            continue;
        }
        let total = node.cost + tail;
        if best.map_or(true, |(_, c)| total < c) {
            best = Some((i, total));
        }
    }
    let Some((mut at, cost)) = best else {
        return Err(DrivingError::PlanningFailed(format!(
            "no route to the goal after {iters} samples"
        )));
    };

    let mut waypoints = vec![world.goal];
    loop {
        waypoints.push(tree.nodes[at].pos);
        if at == 0 {
            break;
        }
        at = tree.nodes[at].parent;
    }
    waypoints.reverse();
    Ok(PlannedPath { waypoints, cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driving::Rect;
    use crate::reference::segment_hits_rect;

    fn wall_world() -> World {
        // A wall across the middle with a gap on the right.
        let mut w = World::open((0.0, 8.0), 12.0);
        w.obstacles.push(Rect::new(-12.0, 3.0, 6.0, 4.0));
        w.validate().unwrap();
        w
    }

    #[test]
    fn open_world_path_is_near_straight() {
        let w = World::open((0.0, 10.0), 12.0);
        let path = rrt_star((0.0, 0.0), &w, 1, DEFAULT_PLAN_ITERS).unwrap();
        assert!(path.cost >= 10.0 - 1e-9);
        assert!(path.cost <= 10.5, "cost {}", path.cost);
        assert_eq!(*path.waypoints.first().unwrap(), (0.0, 0.0));
        assert_eq!(*path.waypoints.last().unwrap(), w.goal);
    }

    #[test]
    fn start_inside_an_obstacle_fails() {
        let w = wall_world();
        let got = rrt_star((0.0, 3.5), &w, 1, 100);
        assert!(matches!(got, Err(DrivingError::PlanningFailed(_))));
    }

    #[test]
    fn every_segment_clears_the_wall() {
        let w = wall_world();
        let path = rrt_star((0.0, -2.0), &w, 7, DEFAULT_PLAN_ITERS).unwrap();
        let o = &w.obstacles[0];
        for pair in path.waypoints.windows(2) {
            assert!(
                !segment_hits_rect(pair[0], pair[1], (o.min_x, o.min_y, o.max_x, o.max_y)),
                "segment {pair:?} crosses the wall"
            );
        }
    }

    #[test]
    fn cost_never_worsens_with_more_samples() {
        let w = wall_world();
        let c1 = rrt_star((0.0, -2.0), &w, 3, 1000).unwrap().cost;
        let c2 = rrt_star((0.0, -2.0), &w, 3, 2000).unwrap().cost;
        let c4 = rrt_star((0.0, -2.0), &w, 3, 4000).unwrap().cost;
        assert!(c2 <= c1 + 1e-9, "{c2} > {c1}");
        assert!(c4 <= c2 + 1e-9, "{c4} > {c2}");
    }

    #[test]
    fn same_seed_same_path() {
        let w = wall_world();
        let a = rrt_star((0.0, -2.0), &w, 5, 1500).unwrap();
        let b = rrt_star((0.0, -2.0), &w, 5, 1500).unwrap();
        assert_eq!(a, b);
    }
}
