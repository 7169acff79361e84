//! Feedback-style metrics and correlation analysis.
//!
//! Aligns a demonstrator's labels against ground truth with exact dynamic
//! time warping, then reads two numbers off the warp path: a signed
//! amplitude (positive = overshoot, negative = undershoot) and a timing
//! offset (positive = delayed, negative = anticipatory). Correlating those
//! against learned embeddings is how the embedding space is judged.

use std::path::Path;

use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StyleError {
    #[error("cannot align an empty sequence")]
    EmptyInput,
    #[error("correlation needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("correlation inputs differ in length: {x} vs {y}")]
    LengthMismatch { x: usize, y: usize },
    #[error("degenerate input: zero variance")]
    DegenerateInput,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Alignment of labels `a` against ground truth `o`, plus the two style
/// numbers read off the warp path.
#[derive(Debug, Clone, PartialEq)]
pub struct DtwResult {
    /// Matched index pairs `(i into a, j into o)`.
    ///
    /// Starts at `(0, 0)`, ends at the last index of both sequences, and
    /// each step advances by `(1,0)`, `(0,1)`, or `(1,1)`.
    pub path: Vec<(usize, usize)>,
    /// Signed distance summed along the path, wheel units.
    pub amplitude: f64,
    /// Mean of `i - j` along the path, timesteps.
    pub timing: f64,
}

/// Minimum-cost warp path between `a` and `o` under point cost `|a_i - o_j|`.
///
/// Cost ties are broken preferring the diagonal move, then `(1,0)`.
pub fn dtw_align(a: &[f64], o: &[f64]) -> Result<Vec<(usize, usize)>, StyleError> {
    if a.is_empty() || o.is_empty() {
        return Err(StyleError::EmptyInput);
    }
    let (n, m) = (a.len(), o.len());
    let d = |i: usize, j: usize| (a[i] - o[j]).abs();

    // cost[i*m + j] = cheapest cumulative cost of any path ending at (i, j).
    let mut cost = vec![0.0f64; n * m];
    for i in 0..n {
        for j in 0..m {
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cost[j - 1],
                (_, 0) => cost[(i - 1) * m],
                _ => cost[(i - 1) * m + j - 1]
                    .min(cost[(i - 1) * m + j])
                    .min(cost[i * m + j - 1]),
            };
            cost[i * m + j] = d(i, j) + best;
        }
    }

    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while (i, j) != (0, 0) {
        (i, j) = if i == 0 {
            (i, j - 1)
        } else if j == 0 {
            (i - 1, j)
        } else {
            let diag = cost[(i - 1) * m + j - 1];
            let skip = cost[(i - 1) * m + j];
            let hold = cost[i * m + j - 1];
            let best = diag.min(skip).min(hold);
            // Preference order on ties: diagonal, then advancing i alone.
            if diag == best {
                (i - 1, j - 1)
            } else if skip == best {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        path.push((i, j));
    }
    path.reverse();
    Ok(path)
}

/// Sign of one matched pair's contribution: `+1` when `a` pushes past `o`
/// in `o`'s own direction (overshoot), `-1` when it falls short. A zero
/// ground-truth point counts any deviation as overshoot.
fn overshoot_sign(a: f64, o: f64) -> f64 {
    if o > 0.0 {
        if a >= o {
            1.0
        } else {
            -1.0
        }
    } else if o < 0.0 {
        if a < o {
            1.0
        } else {
            -1.0
        }
    } else {
        1.0
    }
}

/// Align and score in one go.
pub fn analyze(a: &[f64], o: &[f64]) -> Result<DtwResult, StyleError> {
    let path = dtw_align(a, o)?;
    let amplitude = path
        .iter()
        .map(|&(i, j)| overshoot_sign(a[i], o[j]) * (a[i] - o[j]).abs())
        .sum();
    let timing = path
        .iter()
        .map(|&(i, j)| i as f64 - j as f64)
        .sum::<f64>()
        / path.len() as f64;
    Ok(DtwResult { path, amplitude, timing })
}

/// Signed warp-path distance; positive means `a` overshoots `o`.
pub fn amplitude_metric(a: &[f64], o: &[f64]) -> Result<f64, StyleError> {
    Ok(analyze(a, o)?.amplitude)
}

/// Mean warp-path index offset; positive means `a` lags `o` (delayed).
pub fn timing_metric(a: &[f64], o: &[f64]) -> Result<f64, StyleError> {
    Ok(analyze(a, o)?.timing)
}

/// Which correlation statistic a row reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationTest {
    Pearson,
    Spearman,
}

impl CorrelationTest {
    pub fn as_str(self) -> &'static str {
        match self {
            CorrelationTest::Pearson => "pearson",
            CorrelationTest::Spearman => "spearman",
        }
    }
}

/// One line of a correlation table: a named construct against the
/// embeddings, with the coefficient and its two-sided p-value.
#[derive(Debug, Clone)]
pub struct CorrelationRow {
    pub construct: String,
    pub coefficient: f64,
    pub p_value: f64,
    pub test: CorrelationTest,
}

fn check_paired(x: &[f64], y: &[f64]) -> Result<(), StyleError> {
    if x.len() != y.len() {
        return Err(StyleError::LengthMismatch { x: x.len(), y: y.len() });
    }
    if x.len() < 3 {
        return Err(StyleError::TooFewPoints(x.len()));
    }
    Ok(())
}

fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64, StyleError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StyleError::DegenerateInput);
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Two-sided p-value for a correlation coefficient at sample size `n`,
/// via the t-distribution with `n - 2` degrees of freedom.
fn two_sided_p(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let denom = 1.0 - r * r;
    if denom <= 0.0 {
        return 0.0;
    }
    let t = r.abs() * (df / denom).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    2.0 * (1.0 - dist.cdf(t))
}

/// Ranks with ties averaged, 1-based.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation with its two-sided p-value.
pub fn pearson(construct: &str, x: &[f64], y: &[f64]) -> Result<CorrelationRow, StyleError> {
    check_paired(x, y)?;
    let r = pearson_r(x, y)?;
    Ok(CorrelationRow {
        construct: construct.to_string(),
        coefficient: r,
        p_value: two_sided_p(r, x.len()),
        test: CorrelationTest::Pearson,
    })
}

/// Spearman rank correlation with its two-sided p-value.
pub fn spearman(construct: &str, x: &[f64], y: &[f64]) -> Result<CorrelationRow, StyleError> {
    check_paired(x, y)?;
    let r = pearson_r(&average_ranks(x), &average_ranks(y))?;
    Ok(CorrelationRow {
        construct: construct.to_string(),
        coefficient: r,
        p_value: two_sided_p(r, x.len()),
        test: CorrelationTest::Spearman,
    })
}

/// Both statistics side by side for one construct.
pub fn correlate(construct: &str, x: &[f64], y: &[f64]) -> Result<[CorrelationRow; 2], StyleError> {
    Ok([pearson(construct, x, y)?, spearman(construct, x, y)?])
}

/// One demonstrator-task pair's style measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleRow {
    pub demonstrator_id: usize,
    pub task_id: usize,
    /// Raw signed amplitude.
    pub amplitude: f64,
    /// Raw mean index offset.
    pub timing: f64,
    /// Amplitude divided by warp-path length, for cross-task comparison.
    pub amplitude_norm: f64,
    /// Timing divided by warp-path length.
    pub timing_norm: f64,
}

/// Score one labeled task into a report row.
pub fn style_row(
    demonstrator_id: usize,
    task_id: usize,
    a: &[f64],
    o: &[f64],
) -> Result<StyleRow, StyleError> {
    let r = analyze(a, o)?;
    let len = r.path.len() as f64;
    Ok(StyleRow {
        demonstrator_id,
        task_id,
        amplitude: r.amplitude,
        timing: r.timing,
        amplitude_norm: r.amplitude / len,
        timing_norm: r.timing / len,
    })
}

pub fn write_style_report(path: &Path, rows: &[StyleRow]) -> Result<(), StyleError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "demonstrator_id",
        "task_id",
        "amplitude_D",
        "timing",
        "amplitude_norm",
        "timing_norm",
    ])?;
    for r in rows {
        w.write_record([
            r.demonstrator_id.to_string(),
            r.task_id.to_string(),
            r.amplitude.to_string(),
            r.timing.to_string(),
            r.amplitude_norm.to_string(),
            r.timing_norm.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_correlation_table(path: &Path, rows: &[CorrelationRow]) -> Result<(), StyleError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["construct", "test", "coefficient", "p_value"])?;
    for r in rows {
        w.write_record([
            r.construct.clone(),
            r.test.as_str().to_string(),
            r.coefficient.to_string(),
            r.p_value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demonstrators::{corrupt, sample_style};
    use crate::reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn path_cost(a: &[f64], o: &[f64], path: &[(usize, usize)]) -> f64 {
        path.iter().map(|&(i, j)| (a[i] - o[j]).abs()).sum()
    }

    fn assert_valid_path(path: &[(usize, usize)], n: usize, m: usize) {
        assert_eq!(path[0], (0, 0));
        assert_eq!(*path.last().unwrap(), (n - 1, m - 1));
        for w in path.windows(2) {
            let step = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            assert!(matches!(step, (1, 0) | (0, 1) | (1, 1)), "bad step {step:?}");
        }
    }

    #[test]
    fn identical_sequences_align_on_the_diagonal() {
        let s = [0.3, -0.7, 1.1, 0.0];
        let r = analyze(&s, &s).unwrap();
        assert_eq!(r.path, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert_eq!(r.amplitude, 0.0);
        assert_eq!(r.timing, 0.0);
    }

    #[test]
    fn a_unit_shift_is_absorbed_at_zero_cost() {
        let a = [0.0, 0.0, 1.0];
        let o = [0.0, 1.0, 1.0];
        let path = dtw_align(&a, &o).unwrap();
        assert_eq!(path_cost(&a, &o, &path), 0.0);
        assert_eq!(reference::dtw_brute_force(&a, &o), 0.0);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(dtw_align(&[], &[1.0]), Err(StyleError::EmptyInput)));
        assert!(matches!(dtw_align(&[1.0], &[]), Err(StyleError::EmptyInput)));
    }

    #[test]
    fn dp_cost_matches_brute_force_on_random_short_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let n = rng.gen_range(1..=8);
            let m = rng.gen_range(1..=8);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let o: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let path = dtw_align(&a, &o).unwrap();
            assert_valid_path(&path, n, m);
            let dp = path_cost(&a, &o, &path);
            let brute = reference::dtw_brute_force(&a, &o);
            assert!((dp - brute).abs() < 1e-9, "dp {dp} vs brute {brute}");
        }
    }

    #[test]
    fn flat_overshoot_scores_plus_three() {
        assert_eq!(amplitude_metric(&[2.0; 3], &[1.0; 3]).unwrap(), 3.0);
    }

    #[test]
    fn flat_undershoot_scores_minus_one_and_a_half() {
        assert_eq!(amplitude_metric(&[0.5; 3], &[1.0; 3]).unwrap(), -1.5);
    }

    #[test]
    fn overshoot_past_a_negative_truth_is_positive() {
        // More negative than a negative truth is still an overshoot.
        assert_eq!(amplitude_metric(&[-2.0; 2], &[-1.0; 2]).unwrap(), 2.0);
        assert_eq!(amplitude_metric(&[-0.5; 2], &[-1.0; 2]).unwrap(), -1.0);
    }

    #[test]
    fn scaling_up_scores_positive_and_scaling_down_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(5..20);
            // No zero entries: magnitudes bounded away from zero.
            let o: Vec<f64> = (0..n)
                .map(|_| rng.gen_range(0.2..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                .collect();
            let up: Vec<f64> = o.iter().map(|v| v * rng.gen_range(1.05..2.0)).collect();
            let down: Vec<f64> = o.iter().map(|v| v * rng.gen_range(0.3..0.95)).collect();
            assert!(amplitude_metric(&up, &o).unwrap() > 0.0);
            assert!(amplitude_metric(&down, &o).unwrap() < 0.0);
        }
    }

    fn smooth(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a1, f1, p1) = (rng.gen_range(0.6..0.9), rng.gen_range(0.15..0.3), rng.gen_range(0.0..1.0));
        let (a2, f2, p2) = (rng.gen_range(0.25..0.4), rng.gen_range(0.35..0.7), rng.gen_range(0.0..1.0));
        (0..n)
            .map(|t| {
                let x = t as f64;
                a1 * (f1 * x + p1).sin() + a2 * (f2 * x + p2).sin()
            })
            .collect()
    }

    fn shifted(o: &[f64], shift: i64) -> Vec<f64> {
        (0..o.len() as i64)
            .map(|t| o[(t - shift).clamp(0, o.len() as i64 - 1) as usize])
            .collect()
    }

    #[test]
    fn timing_sign_tracks_shift_direction() {
        for seed in 0..10 {
            let o = smooth(60, seed);
            let late = timing_metric(&shifted(&o, 2), &o).unwrap();
            let early = timing_metric(&shifted(&o, -2), &o).unwrap();
            assert!(late > 0.0, "seed {seed}: delayed copy scored {late}");
            assert!(early < 0.0, "seed {seed}: anticipatory copy scored {early}");
        }
    }

    #[test]
    fn exact_copies_score_zero_timing() {
        let o = smooth(40, 3);
        assert_eq!(timing_metric(&o, &o).unwrap(), 0.0);
    }

    #[test]
    fn metrics_recover_injected_styles_across_many_demonstrators() {
        // Corrupt one smooth curve per demonstrator with a sampled style,
        // then check the metrics rank-order the injected parameters.
        let mut magnitudes = Vec::new();
        let mut shifts = Vec::new();
        let mut amp_scores = Vec::new();
        let mut timing_scores = Vec::new();
        let mut shifted_cases = 0u32;
        let mut disagreements = 0u32;
        for seed in 0..200u64 {
            let style = sample_style(seed);
            let o = smooth(80, 900 + seed);
            let a = corrupt(&o, &style, 1700 + seed).unwrap().a;
            let r = analyze(&a, &o).unwrap();
            magnitudes.push(style.magnitude);
            shifts.push(style.timing as f64);
            amp_scores.push(r.amplitude);
            timing_scores.push(r.timing);

            // Compare the mean's sign against the majority vote over path
            // offsets wherever a shift was injected and both rules commit.
            let pos = r.path.iter().filter(|&&(i, j)| i > j).count();
            let neg = r.path.iter().filter(|&&(i, j)| i < j).count();
            if style.timing != 0 && r.timing != 0.0 && pos != neg {
                shifted_cases += 1;
                if (r.timing > 0.0) != (pos > neg) {
                    disagreements += 1;
                }
            }
        }
        // Strong magnitude warps can flip the mean on rare cases; the two
        // rules still agree almost everywhere.
        assert!(shifted_cases > 100, "only {shifted_cases} shifted cases");
        assert!(
            f64::from(disagreements) <= 0.05 * f64::from(shifted_cases),
            "{disagreements} sign disagreements in {shifted_cases} shifted cases"
        );
        let amp = spearman("amplitude", &amp_scores, &magnitudes).unwrap();
        let tim = spearman("timing", &timing_scores, &shifts).unwrap();
        assert!(amp.coefficient > 0.8, "amplitude rho {}", amp.coefficient);
        assert!(tim.coefficient > 0.8, "timing rho {}", tim.coefficient);
    }

    #[test]
    fn perfect_linear_relation_scores_pearson_one() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let row = pearson("linear", &x, &y).unwrap();
        assert!((row.coefficient - 1.0).abs() < 1e-12);
        assert!(row.p_value < 1e-9);
    }

    #[test]
    fn monotone_cubic_scores_spearman_minus_one() {
        let x: Vec<f64> = (-5..5).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| -v.powi(3)).collect();
        let row = spearman("cubic", &x, &y).unwrap();
        assert!((row.coefficient + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_matches_the_raw_moment_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x: Vec<f64> = (0..20).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..20).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let row = pearson("random", &x, &y).unwrap();
        let direct = reference::pearson_direct(&x, &y);
        assert!((row.coefficient - direct).abs() < 1e-12);
    }

    #[test]
    fn p_value_hits_the_known_five_percent_point() {
        // t = 2.086 is the two-sided 5% point at 20 degrees of freedom;
        // build the r that maps onto it at n = 22.
        let t: f64 = 2.086;
        let r = t / (20.0 + t * t).sqrt();
        assert!((two_sided_p(r, 22) - 0.05).abs() < 1e-3);
    }

    #[test]
    fn tied_ranks_are_averaged() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
        let row = spearman("ties", &[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((row.coefficient - 4.5 / 22.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_and_malformed_inputs_are_rejected() {
        let flat = [2.0; 5];
        let ramp: Vec<f64> = (0..5).map(f64::from).collect();
        assert!(matches!(pearson("flat", &flat, &ramp), Err(StyleError::DegenerateInput)));
        assert!(matches!(spearman("flat", &ramp, &flat), Err(StyleError::DegenerateInput)));
        assert!(matches!(
            pearson("short", &[1.0, 2.0], &[2.0, 1.0]),
            Err(StyleError::TooFewPoints(2))
        ));
        assert!(matches!(
            pearson("uneven", &[1.0, 2.0, 3.0], &[1.0, 2.0]),
            Err(StyleError::LengthMismatch { x: 3, y: 2 })
        ));
    }

    #[test]
    fn report_files_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let style_path = dir.path().join("style.csv");
        let rows = vec![style_row(3, 1, &[1.2, 1.3], &[1.0, 1.0]).unwrap()];
        write_style_report(&style_path, &rows).unwrap();
        let text = std::fs::read_to_string(&style_path).unwrap();
        assert!(text.starts_with("demonstrator_id,task_id,amplitude_D,timing,amplitude_norm,timing_norm"));
        assert!(text.lines().nth(1).unwrap().starts_with("3,1,0.5"));

        let corr_path = dir.path().join("corr.csv");
        let table = correlate("w0 vs amplitude", &[1.0, 2.0, 3.0, 4.0], &[1.1, 2.2, 2.9, 4.1]).unwrap();
        write_correlation_table(&corr_path, &table).unwrap();
        let text = std::fs::read_to_string(&corr_path).unwrap();
        assert!(text.starts_with("construct,test,coefficient,p_value"));
        assert!(text.contains("pearson") && text.contains("spearman"));
    }
}
