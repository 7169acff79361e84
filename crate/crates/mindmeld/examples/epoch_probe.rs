use std::time::Instant;

use mindmeld::demonstrators::{corrupt, sample_style};
use mindmeld::driving::{ground_truth_label, make_calibration_rollouts_with_noise, World};
use mindmeld::model::{train_calibration, windows_of, TrainConfig};

fn main() {
    let world = World::open((0.0, 0.0), 14.0);
    let mut samples = Vec::new();
    let t0 = Instant::now();
    for demo in 0..32usize {
        let mut style = sample_style(1000 + demo as u64);
        style.id = demo;
        for task in 0..12usize {
            let seed = 77_000 + (demo * 100 + task) as u64;
            let mut o = Vec::new();
            for attempt in 0..20 {
                let traj =
                    make_calibration_rollouts_with_noise(&world, 1, seed + 1_000_000 * attempt, 1.0)
                        .unwrap()
                        .remove(0);
                o = traj.states[..traj.states.len() - 1]
                    .iter()
                    .map(|s| ground_truth_label(s, &world).wheel())
                    .collect();
                if o.len() >= 20 {
                    break;
                }
            }
            let mut seq = corrupt(&o, &style, seed ^ 0xabc).unwrap();
            seq.task_id = task;
            let wins = windows_of(&seq, 20).unwrap();
            samples.extend(wins.into_iter().step_by(3));
        }
    }
    println!("corpus: {} samples in {:?}", samples.len(), t0.elapsed());

    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 64,
        lr: 0.001,
        plateau_epochs: 20,
    };
    let t1 = Instant::now();
    let (_, _, trace) = train_calibration(&samples, &cfg, 0).unwrap();
    let dt = t1.elapsed();
    println!(
        "3 epochs in {:?} -> {:?}/epoch, trace {:?}",
        dt,
        dt / 3,
        trace
    );
}
