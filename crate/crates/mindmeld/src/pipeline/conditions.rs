//! Policy-race conditions: behavioral cloning against raw and corrected
//! expert label streams, under shared seeds.
//!
//! Each comparison cell runs three conditions over identical
//! demonstration, rollout-start, and evaluation seeds: `BC` clones one
//! expert demonstration; `DAGGER` additionally relabels its own rollouts
//! through the styled expert; `MM_DAGGER` passes those expert labels
//! through the trained corrector first. The expert's embedding comes from
//! a normal calibration session against the frozen network.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Adam, DenseParams, Graph, Tensor};
use crate::demonstrators::{corrupt, StyleProfile};
use crate::driving::{
    ground_truth_label, rollout, sample_start, step, wrap, CarState, OuNoise, SteeringAction,
    World, DT, GOAL_RADIUS, OU_THETA,
};
use crate::model::{correct_actions, infer_new_embedding, load_model, MindMeldParams};

use super::{
    labeled_rollout, mix, stage, windows_at_stride, ExperimentConfig, PipelineError, RunPaths,
    STREAM_DEMO, STREAM_EVAL, STREAM_EXPERT, STREAM_POLICY,
};

/// Label source for one policy-race arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Bc,
    Dagger,
    MmDagger,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Bc, Condition::Dagger, Condition::MmDagger];

    pub fn tag(self) -> &'static str {
        match self {
            Condition::Bc => "BC",
            Condition::Dagger => "DAGGER",
            Condition::MmDagger => "MM_DAGGER",
        }
    }

    /// Relabeling rounds after the initial clone; cloning alone is BC.
    fn iterations(self, cfg: &ExperimentConfig) -> usize {
        match self {
            Condition::Bc => 0,
            Condition::Dagger | Condition::MmDagger => cfg.dagger_iterations,
        }
    }

    fn corrects_labels(self) -> bool {
        matches!(self, Condition::MmDagger)
    }
}

/// Closed-loop scores of one condition in one comparison cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionResult {
    pub condition: Condition,
    /// Comparison-cell index; all conditions of a cell share seeds.
    pub cell: usize,
    /// Final training loss per round, the initial clone included.
    pub policy_loss: Vec<f64>,
    pub success_rate: f64,
    /// Mean seconds to reach the goal, over successful episodes only.
    pub mean_time_to_goal: Option<f64>,
    /// Mean distance from the straight start-goal line, all episodes.
    pub mean_cross_track: f64,
}

/// A state-to-wheel regressor over `[goal bearing, scaled goal distance,
/// heading]`. The action is saturated to the wheel range on construction.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub net: DenseParams,
    half_extent: f64,
}

impl PolicyParams {
    fn new(hidden: usize, half_extent: f64, rng: &mut impl Rng) -> Self {
        Self {
            net: DenseParams::new(&[3, hidden, 1], &[Activation::Relu, Activation::Linear], rng),
            half_extent,
        }
    }

    pub fn features(&self, s: &CarState, world: &World) -> [f64; 3] {
        let (dx, dy) = (world.goal.0 - s.x, world.goal.1 - s.y);
        [
            wrap(dy.atan2(dx) - s.heading),
            (dx * dx + dy * dy).sqrt() / self.half_extent,
            s.heading,
        ]
    }

    pub fn act(&self, s: &CarState, world: &World) -> SteeringAction {
        let x = Tensor::vector(self.features(s, world).to_vec());
        let mut g = Graph::new();
        let out = crate::autodiff::forward_dense(&mut g, &self.net, &x)
            .expect("feature width matches the input layer by construction");
        SteeringAction::new(g.value(out)[0])
    }
}

/// Supervised regression of wheel labels on policy features.
pub fn train_bc(
    data: &[(CarState, f64)],
    world: &World,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(PolicyParams, Vec<f64>), PipelineError> {
    if data.is_empty() {
        return Err(PipelineError::Config(
            "behavioral cloning needs at least one demonstration step".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = PolicyParams::new(cfg.bc_hidden, cfg.world_half_extent, &mut rng);
    let features: Vec<[f64; 3]> = data.iter().map(|(s, _)| policy.features(s, world)).collect();

    let mut adam = Adam::new(cfg.bc_lr, &policy.net.tensors());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.bc_epochs);
    for epoch in 0..cfg.bc_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.bc_batch_size) {
            let b = chunk.len();
            let x_data: Vec<f64> = chunk.iter().flat_map(|&i| features[i]).collect();
            let y_data: Vec<f64> = chunk.iter().map(|&i| data[i].1).collect();
            let x = Tensor::matrix(b, 3, x_data)?;

            let mut g = Graph::new();
            let bound = policy.net.bind(&mut g);
            let x_id = g.leaf(&x);
            let pred = bound.forward(&mut g, x_id)?;
            let y_id = g.constant_matrix(b, 1, y_data)?;
            let diff = g.sub(pred, y_id)?;
            let sq = g.square(diff);
            let sum = g.sum_all(sq);
            let loss = g.scale(sum, 1.0 / b as f64);
            let loss_val = g.value(loss)[0];
            if !loss_val.is_finite() {
                return Err(PipelineError::PolicyDiverged(epoch));
            }
            g.backward(loss)?;

            let ids = bound.ids();
            let mut tensors = policy.net.tensors_mut();
            for (t, &id) in tensors.iter_mut().zip(&ids) {
                t.grad = g.grad(id).map(|s| s.to_vec());
            }
            adam.step(&mut tensors)?;
            epoch_loss += loss_val * b as f64;
        }
        trace.push(epoch_loss / data.len() as f64);
    }
    Ok((policy, trace))
}

/// How one closed-loop episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeOutcome {
    Success,
    OutOfBounds,
    Timeout,
}

/// Drive a policy until the goal, a bounds exit, or the step budget.
/// Leaving the world is a recorded failure, not an error.
fn run_episode(
    world: &World,
    start: CarState,
    max_steps: usize,
    policy: impl Fn(&CarState) -> SteeringAction,
) -> Result<(Vec<CarState>, EpisodeOutcome), PipelineError> {
    let mut states = vec![start];
    for _ in 0..max_steps {
        let s = *states.last().expect("states never empty");
        if s.distance_to(world.goal) <= GOAL_RADIUS {
            return Ok((states, EpisodeOutcome::Success));
        }
        if !world.bounds.contains(s.position()) {
            return Ok((states, EpisodeOutcome::OutOfBounds));
        }
        let a = policy(&s);
        states.push(step(&s, a, DT)?);
    }
    let s = *states.last().expect("states never empty");
    let outcome = if s.distance_to(world.goal) <= GOAL_RADIUS {
        EpisodeOutcome::Success
    } else if !world.bounds.contains(s.position()) {
        EpisodeOutcome::OutOfBounds
    } else {
        EpisodeOutcome::Timeout
    };
    Ok((states, outcome))
}

/// The expert's own drive: the supervision labels plus mean-reverting
/// wheel noise, resampled until long enough to corrupt and correct.
fn demonstration_rollout(
    world: &World,
    cfg: &ExperimentConfig,
    need: usize,
    seed: u64,
) -> Result<Vec<CarState>, PipelineError> {
    for attempt in 0..64u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0, attempt, 0));
        let start = sample_start(world, &mut rng);
        let mut noise = OuNoise::new(OU_THETA, cfg.demo_noise_sigma);
        let traj = rollout(world, start, cfg.eval_max_steps, DT, |s| {
            SteeringAction::new(ground_truth_label(s, world).wheel() + noise.sample(DT, &mut rng))
        })?;
        if traj.len() >= need {
            return Ok(traj.states);
        }
    }
    Err(PipelineError::RolloutTooShort {
        demonstrator: usize::MAX,
        task: 0,
        need,
    })
}

/// A rollout of the current policy, resampled over fresh starts until it
/// is long enough for the expert to label.
fn policy_rollout(
    policy: &PolicyParams,
    world: &World,
    cfg: &ExperimentConfig,
    need: usize,
    seed: u64,
) -> Result<Vec<CarState>, PipelineError> {
    for attempt in 0..64u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0, attempt, 0));
        let start = sample_start(world, &mut rng);
        let (states, _) = run_episode(world, start, cfg.eval_max_steps, |s| policy.act(s, world))?;
        if states.len() > need {
            return Ok(states);
        }
    }
    Err(PipelineError::RolloutTooShort {
        demonstrator: usize::MAX,
        task: 1,
        need,
    })
}

/// Expert labels along a visited state sequence, optionally passed
/// through the trained corrector, appended to the aggregate dataset.
fn push_labeled(
    data: &mut Vec<(CarState, f64)>,
    states: &[CarState],
    world: &World,
    expert: &StyleProfile,
    corrector: Option<(&MindMeldParams, &[f64])>,
    window_len: usize,
    seed: u64,
) -> Result<(), PipelineError> {
    let acting = &states[..states.len() - 1];
    let o: Vec<f64> = acting
        .iter()
        .map(|s| ground_truth_label(s, world).wheel())
        .collect();
    let a = corrupt(&o, expert, seed)?.a;
    let labels = match corrector {
        Some((params, w)) => correct_actions(params, w, &a, window_len)?,
        None => a,
    };
    data.extend(acting.iter().copied().zip(labels));
    Ok(())
}

/// Run one condition in one comparison cell. Iteration 0 clones the
/// expert's demonstration; each later iteration relabels a rollout of the
/// current policy and retrains from scratch on the grown dataset.
pub fn run_dagger(
    cfg: &ExperimentConfig,
    world: &World,
    expert: &StyleProfile,
    corrector: Option<(&MindMeldParams, &[f64])>,
    condition: Condition,
    cell: usize,
) -> Result<ConditionResult, PipelineError> {
    let need = cfg.window_len.max(2 * expert.timing.unsigned_abs() as usize + 2);
    let corrector = if condition.corrects_labels() { corrector } else { None };

    let mut data: Vec<(CarState, f64)> = Vec::new();
    let mut losses = Vec::new();
    let demo = demonstration_rollout(world, cfg, need, mix(cfg.seed, STREAM_DEMO, cell as u64, 0))?;
    push_labeled(
        &mut data,
        &demo,
        world,
        expert,
        corrector,
        cfg.window_len,
        mix(cfg.seed, STREAM_DEMO, cell as u64, 1 << 32),
    )?;
    let (mut policy, trace) =
        train_bc(&data, world, cfg, mix(cfg.seed, STREAM_POLICY, cell as u64, 0))?;
    losses.push(*trace.last().expect("bc_epochs is validated positive"));

    for iter in 1..=condition.iterations(cfg) {
        let states = policy_rollout(
            &policy,
            world,
            cfg,
            need,
            mix(cfg.seed, STREAM_DEMO, cell as u64, iter as u64),
        )?;
        let grown = data.len() + states.len() - 1;
        push_labeled(
            &mut data,
            &states,
            world,
            expert,
            corrector,
            cfg.window_len,
            mix(cfg.seed, STREAM_DEMO, cell as u64, (1 << 32) | iter as u64),
        )?;
        // Aggregation grows the dataset every round.
        assert_eq!(data.len(), grown);
        let (next, trace) = train_bc(
            &data,
            world,
            cfg,
            mix(cfg.seed, STREAM_POLICY, cell as u64, iter as u64),
        )?;
        policy = next;
        losses.push(*trace.last().expect("bc_epochs is validated positive"));
    }

    let (success_rate, mean_time_to_goal, mean_cross_track) =
        evaluate(&policy, world, cfg, cell)?;
    Ok(ConditionResult {
        condition,
        cell,
        policy_loss: losses,
        success_rate,
        mean_time_to_goal,
        mean_cross_track,
    })
}

/// Closed-loop evaluation over start seeds shared by every condition of
/// the cell.
fn evaluate(
    policy: &PolicyParams,
    world: &World,
    cfg: &ExperimentConfig,
    cell: usize,
) -> Result<(f64, Option<f64>, f64), PipelineError> {
    let mut successes = 0usize;
    let mut goal_times = Vec::new();
    let mut cross_track_sum = 0.0;
    for episode in 0..cfg.eval_episodes {
        let eval_seed = mix(cfg.seed, STREAM_EVAL, cell as u64, episode as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
        let start = sample_start(world, &mut rng);
        let (states, outcome) =
            run_episode(world, start, cfg.eval_max_steps, |s| policy.act(s, world))?;
        if outcome == EpisodeOutcome::Success {
            successes += 1;
            goal_times.push((states.len() - 1) as f64 * DT);
        }
        cross_track_sum += mean_line_deviation(&states, start.position(), world.goal);
    }
    let n = cfg.eval_episodes as f64;
    let mean_time = (!goal_times.is_empty())
        .then(|| goal_times.iter().sum::<f64>() / goal_times.len() as f64);
    Ok((successes as f64 / n, mean_time, cross_track_sum / n))
}

/// Mean perpendicular distance of the visited states from the straight
/// start-goal line.
fn mean_line_deviation(states: &[CarState], start: (f64, f64), goal: (f64, f64)) -> f64 {
    let (ux, uy) = (goal.0 - start.0, goal.1 - start.1);
    let len = (ux * ux + uy * uy).sqrt();
    let total: f64 = states
        .iter()
        .map(|s| ((s.x - start.0) * uy - (s.y - start.1) * ux).abs() / len)
        .sum();
    total / states.len() as f64
}

/// Stage 4: race the three conditions over `condition_seeds` comparison
/// cells and write the score tables.
pub fn run_conditions(
    cfg: &ExperimentConfig,
    dir: &Path,
) -> Result<Vec<ConditionResult>, PipelineError> {
    run_conditions_inner(cfg, dir).map_err(stage("conditions"))
}

fn run_conditions_inner(
    cfg: &ExperimentConfig,
    dir: &Path,
) -> Result<Vec<ConditionResult>, PipelineError> {
    let paths = RunPaths::new(dir);
    let model_path = paths.expect(paths.model(), "train")?;
    let (params, table) = load_model(&model_path)?;
    let world = cfg.world();

    let expert = StyleProfile {
        id: cfg.train_demonstrators + cfg.test_demonstrators,
        timing: cfg.condition_timing,
        magnitude: cfg.condition_magnitude,
        noise_sigma: cfg.condition_noise_sigma,
    };
    // The expert calibrates like any unseen demonstrator; the corrector
    // arm reuses that one embedding across cells.
    let calibration: Vec<_> = cfg
        .calibration_ids()
        .into_iter()
        .map(|task| labeled_rollout(cfg, &world, &expert, task))
        .collect::<Result<_, _>>()?;
    let samples = windows_at_stride(&calibration, cfg)?;
    let w_expert = infer_new_embedding(
        &params,
        &samples,
        &table,
        &cfg.inference_config(),
        mix(cfg.seed, STREAM_EXPERT, 0, 0),
    )?;

    let mut results = Vec::new();
    for cell in 0..cfg.condition_seeds {
        for condition in Condition::ALL {
            results.push(run_dagger(
                cfg,
                &world,
                &expert,
                Some((&params, w_expert.as_slice())),
                condition,
                cell,
            )?);
        }
    }
    write_condition_tables(&paths, &results)?;
    Ok(results)
}

fn write_condition_tables(
    paths: &RunPaths,
    results: &[ConditionResult],
) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(paths.conditions())?;
    w.write_record([
        "condition",
        "cell",
        "rounds",
        "final_loss",
        "success_rate",
        "mean_time_to_goal",
        "mean_cross_track",
    ])?;
    for r in results {
        w.write_record([
            r.condition.tag().to_string(),
            r.cell.to_string(),
            r.policy_loss.len().to_string(),
            r.policy_loss.last().expect("at least the clone round").to_string(),
            r.success_rate.to_string(),
            r.mean_time_to_goal.map(|t| t.to_string()).unwrap_or_default(),
            r.mean_cross_track.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(paths.condition_losses())?;
    w.write_record(["condition", "cell", "round", "loss"])?;
    for r in results {
        for (round, loss) in r.policy_loss.iter().enumerate() {
            w.write_record([
                r.condition.tag().to_string(),
                r.cell.to_string(),
                round.to_string(),
                loss.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parse `conditions.csv` back for reporting.
pub(super) fn read_condition_csv(path: &Path) -> Result<Vec<ConditionResult>, PipelineError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let err = |e: &dyn std::fmt::Display| PipelineError::Config(format!("{e}: {rec:?}"));
        let field = |i: usize| rec.get(i).ok_or_else(|| err(&"condition row too short"));
        let condition = match field(0)? {
            "BC" => Condition::Bc,
            "DAGGER" => Condition::Dagger,
            "MM_DAGGER" => Condition::MmDagger,
            other => return Err(err(&format!("unknown condition `{other}`"))),
        };
        let time = field(5)?;
        out.push(ConditionResult {
            condition,
            cell: field(1)?.parse().map_err(|e| err(&e))?,
            // The per-round trace lives in its own table; keep the final.
            policy_loss: vec![field(3)?.parse().map_err(|e| err(&e))?],
            success_rate: field(4)?.parse().map_err(|e| err(&e))?,
            mean_time_to_goal: if time.is_empty() {
                None
            } else {
                Some(time.parse().map_err(|e| err(&e))?)
            },
            mean_cross_track: field(6)?.parse().map_err(|e| err(&e))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn world() -> World {
        World::open((0.0, 0.0), 14.0)
    }

    fn bc_config() -> ExperimentConfig {
        ExperimentConfig {
            bc_epochs: 120,
            bc_hidden: 16,
            eval_episodes: 20,
            eval_max_steps: 300,
            ..ExperimentConfig::default()
        }
    }

    /// Noisy supervised drives paired with clean ground-truth labels.
    fn optimal_demos(world: &World, n: usize, seed: u64) -> Vec<(CarState, f64)> {
        let mut data = Vec::new();
        for k in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + k as u64);
            let start = sample_start(world, &mut rng);
            let mut noise = OuNoise::new(OU_THETA, 1.0);
            let traj = rollout(world, start, 300, DT, |s| {
                SteeringAction::new(
                    ground_truth_label(s, world).wheel() + noise.sample(DT, &mut rng),
                )
            })
            .unwrap();
            for s in &traj.states[..traj.states.len() - 1] {
                data.push((*s, ground_truth_label(s, world).wheel()));
            }
        }
        data
    }

    #[test]
    fn features_are_goal_relative() {
        let w = world();
        let policy = PolicyParams::new(4, 14.0, &mut ChaCha8Rng::seed_from_u64(0));
        // Car at (7, 0) facing +y: the goal at the origin is 90° to its left
        // of -x... the bearing to the goal is π, heading π/2, so the
        // relative bearing is π/2 and the scaled distance is 0.5.
        let s = CarState::new(7.0, 0.0, FRAC_PI_2, 2.0);
        let f = policy.features(&s, &w);
        assert!((f[0] - FRAC_PI_2).abs() < 1e-12);
        assert!((f[1] - 0.5).abs() < 1e-12);
        assert!((f[2] - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn actions_saturate_at_the_wheel_range() {
        let mut policy = PolicyParams::new(4, 14.0, &mut ChaCha8Rng::seed_from_u64(1));
        // Force an output far outside the range through the last bias.
        *policy.net.layers[1].bias.data_mut().last_mut().unwrap() = 1e6;
        let a = policy.act(&CarState::new(5.0, 5.0, 0.0, 2.0), &world());
        assert_eq!(a.wheel(), crate::driving::WHEEL_LIMIT);
    }

    #[test]
    fn cloning_optimal_labels_reaches_the_goal() {
        let w = world();
        let cfg = bc_config();
        let data = optimal_demos(&w, 6, 400);
        let (policy, trace) = train_bc(&data, &w, &cfg, 7).unwrap();
        assert!(trace.last().unwrap() < &0.05, "final loss {:?}", trace.last());
        let (rate, time, _) = evaluate(&policy, &w, &cfg, 0).unwrap();
        assert!(rate >= 0.9, "success rate {rate}");
        assert!(time.is_some());
    }

    #[test]
    fn one_trajectory_is_enough_to_train_on() {
        let w = world();
        let cfg = ExperimentConfig {
            bc_epochs: 5,
            ..bc_config()
        };
        let data = optimal_demos(&w, 1, 41);
        let (_, trace) = train_bc(&data, &w, &cfg, 3).unwrap();
        assert_eq!(trace.len(), 5);
    }

    #[test]
    fn empty_demonstrations_are_rejected() {
        let w = world();
        assert!(train_bc(&[], &w, &bc_config(), 0).is_err());
    }

    #[test]
    fn styled_labels_clone_worse_than_ground_truth() {
        let w = world();
        let cfg = bc_config();
        let style = StyleProfile {
            id: 0,
            timing: 3,
            magnitude: 1.9,
            noise_sigma: 0.05,
        };
        let mut clean_wins = 0;
        for seed in 0..3u64 {
            let data = optimal_demos(&w, 5, 900 + 10 * seed);
            let states: Vec<CarState> = data.iter().map(|(s, _)| *s).collect();
            let o: Vec<f64> = data.iter().map(|(_, l)| *l).collect();
            let styled_labels = corrupt(&o, &style, 31 + seed).unwrap().a;
            let styled: Vec<(CarState, f64)> =
                states.iter().copied().zip(styled_labels).collect();

            let (clean_policy, _) = train_bc(&data, &w, &cfg, seed).unwrap();
            let (styled_policy, _) = train_bc(&styled, &w, &cfg, seed).unwrap();
            let (clean_rate, _, _) = evaluate(&clean_policy, &w, &cfg, seed as usize).unwrap();
            let (styled_rate, _, _) = evaluate(&styled_policy, &w, &cfg, seed as usize).unwrap();
            if clean_rate > styled_rate {
                clean_wins += 1;
            }
        }
        assert!(clean_wins >= 2, "clean labels won only {clean_wins}/3 cells");
    }

    #[test]
    fn episodes_classify_their_endings() {
        let w = world();
        // Straight toward the goal from the east.
        let toward = CarState::new(8.0, 0.0, std::f64::consts::PI, 2.0);
        let (_, outcome) =
            run_episode(&w, toward, 300, |_| SteeringAction::new(0.0)).unwrap();
        assert_eq!(outcome, EpisodeOutcome::Success);
        // Straight out of the east wall.
        let away = CarState::new(8.0, 0.0, 0.0, 2.0);
        let (states, outcome) =
            run_episode(&w, away, 300, |_| SteeringAction::new(0.0)).unwrap();
        assert_eq!(outcome, EpisodeOutcome::OutOfBounds);
        assert!(states.len() < 300);
        // Hard-left circling far from the goal never ends.
        let circling = CarState::new(10.0, 10.0, 0.0, 2.0);
        let (states, outcome) =
            run_episode(&w, circling, 120, |_| SteeringAction::new(2.5)).unwrap();
        assert_eq!(outcome, EpisodeOutcome::Timeout);
        assert_eq!(states.len(), 121);
    }

    #[test]
    fn line_deviation_is_zero_on_the_line_and_positive_off_it() {
        let on = vec![
            CarState::new(4.0, 0.0, 0.0, 2.0),
            CarState::new(2.0, 0.0, 0.0, 2.0),
        ];
        assert!(mean_line_deviation(&on, (6.0, 0.0), (0.0, 0.0)) < 1e-12);
        let off = vec![CarState::new(3.0, 2.0, 0.0, 2.0)];
        let d = mean_line_deviation(&off, (6.0, 0.0), (0.0, 0.0));
        assert!((d - 2.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_expert_dagger_reaches_the_goal() {
        let w = world();
        let cfg = ExperimentConfig {
            dagger_iterations: 5,
            bc_epochs: 80,
            bc_hidden: 16,
            eval_episodes: 20,
            ..ExperimentConfig::default()
        };
        let oracle = StyleProfile::identity();
        let r = run_dagger(&cfg, &w, &oracle, None, Condition::Dagger, 0).unwrap();
        assert_eq!(r.policy_loss.len(), 6);
        assert!(
            r.success_rate >= 0.9,
            "oracle-label policy reached {:.0}%",
            100.0 * r.success_rate
        );
    }

    #[test]
    fn zero_iterations_is_exactly_the_bc_condition() {
        let w = world();
        let cfg = ExperimentConfig {
            dagger_iterations: 0,
            bc_epochs: 30,
            bc_hidden: 8,
            eval_episodes: 4,
            ..ExperimentConfig::default()
        };
        let style = StyleProfile {
            id: 0,
            timing: 1,
            magnitude: 1.3,
            noise_sigma: 0.02,
        };
        let bc = run_dagger(&cfg, &w, &style, None, Condition::Bc, 2).unwrap();
        let dagger = run_dagger(&cfg, &w, &style, None, Condition::Dagger, 2).unwrap();
        assert_eq!(bc.policy_loss, dagger.policy_loss);
        assert_eq!(bc.success_rate, dagger.success_rate);
        assert_eq!(bc.mean_cross_track, dagger.mean_cross_track);
    }

    #[test]
    fn condition_runs_are_deterministic() {
        let w = world();
        let cfg = ExperimentConfig {
            dagger_iterations: 1,
            bc_epochs: 20,
            bc_hidden: 8,
            eval_episodes: 3,
            ..ExperimentConfig::default()
        };
        let style = StyleProfile {
            id: 0,
            timing: -2,
            magnitude: 0.6,
            noise_sigma: 0.05,
        };
        let a = run_dagger(&cfg, &w, &style, None, Condition::Dagger, 1).unwrap();
        let b = run_dagger(&cfg, &w, &style, None, Condition::Dagger, 1).unwrap();
        assert_eq!(a, b);
    }
}
