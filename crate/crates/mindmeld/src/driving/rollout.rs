//! Imperfect goal-approach rollouts for calibration.
//!
//! Each rollout drives toward the goal under the supervision labels plus a
//! smooth mean-reverting noise on the wheel, so the car wanders the way a
//! half-trained policy does instead of tracking the optimum. Everything is
//! deterministic given the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    ground_truth_label, step, CarState, DrivingError, SteeringAction, Trajectory, World, DT,
    GOAL_RADIUS, SPEED,
};

/// Default mean-reversion rate of the wheel noise, 1/s.
pub const OU_THETA: f64 = 2.0;
/// Default diffusion of the wheel noise.
pub const OU_SIGMA: f64 = 1.0;
/// Step budget per rollout.
pub const MAX_ROLLOUT_STEPS: usize = 300;

/// Mean-reverting (Ornstein-Uhlenbeck) wheel perturbation.
#[derive(Debug, Clone)]
pub struct OuNoise {
    theta: f64,
    sigma: f64,
    value: f64,
}

impl OuNoise {
    pub fn new(theta: f64, sigma: f64) -> Self {
        Self {
            theta,
            sigma,
            value: 0.0,
        }
    }

    /// Advance one timestep and return the current offset.
    pub fn sample(&mut self, dt: f64, rng: &mut impl Rng) -> f64 {
        let n: f64 = rng.sample(StandardNormal);
        self.value += -self.theta * self.value * dt + self.sigma * dt.sqrt() * n;
        self.value
    }
}

/// Run a policy until the goal region or the step budget.
pub fn rollout(
    world: &World,
    start: CarState,
    max_steps: usize,
    dt: f64,
    mut policy: impl FnMut(&CarState) -> SteeringAction,
) -> Result<Trajectory, DrivingError> {
    let mut states = vec![start];
    let mut actions = Vec::new();
    for _ in 0..max_steps {
        let s = *states.last().expect("states never empty");
        if s.distance_to(world.goal) <= GOAL_RADIUS {
            break;
        }
        let a = policy(&s);
        actions.push(a);
        states.push(step(&s, a, dt)?);
    }
    Trajectory::new(dt, states, actions)
}

/// A start pose away from the goal, clear of obstacles.
pub fn sample_start(world: &World, rng: &mut impl Rng) -> CarState {
    let b = &world.bounds;
    loop {
        let x = rng.gen_range(b.min_x..=b.max_x);
        let y = rng.gen_range(b.min_y..=b.max_y);
        let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let s = CarState::new(x, y, heading, SPEED);
        if s.distance_to(world.goal) < 4.0 * GOAL_RADIUS {
            continue;
        }
        if world.point_collides((x, y)) {
            continue;
        }
        return s;
    }
}

/// Goal-approach rollouts perturbed by mean-reverting wheel noise.
pub fn make_calibration_rollouts(
    world: &World,
    n: usize,
    seed: u64,
) -> Result<Vec<Trajectory>, DrivingError> {
    make_calibration_rollouts_with_noise(world, n, seed, OU_SIGMA)
}

/// Same, with the noise diffusion scaled; zero follows the labels exactly.
pub fn make_calibration_rollouts_with_noise(
    world: &World,
    n: usize,
    seed: u64,
    noise_sigma: f64,
) -> Result<Vec<Trajectory>, DrivingError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let start = sample_start(world, &mut rng);
            let mut noise = OuNoise::new(OU_THETA, noise_sigma);
            rollout(world, start, MAX_ROLLOUT_STEPS, DT, |s| {
                let base = ground_truth_label(s, world).wheel();
                SteeringAction::new(base + noise.sample(DT, &mut rng))
            })
        })
        .collect()
}
