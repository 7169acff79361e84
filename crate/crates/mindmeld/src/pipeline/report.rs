//! Final report: gather every stage's tables, correlate embeddings with
//! the true style constructs, probe style classes, and gate the whole run
//! against the configured thresholds.
//!
//! The report is pure aggregation — it reads only artifacts already on
//! disk, so it can be re-run after any stage without recomputation. Its
//! JSON never contains timestamps; the content hash alone identifies a
//! run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::demonstrators::StyleProfile;

use super::conditions::read_condition_csv;
use super::{
    read_embeddings_csv, stage, ExperimentConfig, ImprovementReport, PipelineError, RunPaths,
};

/// One improvement table reduced to its gateable aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementSection {
    pub demonstrators: usize,
    /// Mean of per-demonstrator `1 − corrected/raw` error ratios.
    pub mean_improvement: f64,
    pub std_improvement: f64,
    pub threshold: f64,
    /// Comparison value measured with human demonstrators.
    pub human_reference: f64,
    pub met: bool,
}

impl ImprovementSection {
    fn from_table(
        table: &ImprovementReport,
        threshold: f64,
        human_reference: f64,
    ) -> Option<Self> {
        let mean = table.mean_improvement?;
        Some(Self {
            demonstrators: table.rows.len(),
            mean_improvement: mean,
            std_improvement: table.std_improvement.unwrap_or(0.0),
            threshold,
            human_reference,
            met: mean >= threshold,
        })
    }
}

/// Best-linear-readout correlation between the embeddings and one true
/// style construct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub construct: String,
    /// `None` when either side has zero variance (degenerate population).
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub threshold: f64,
    /// Comparison value measured with human demonstrators.
    pub human_reference: f64,
    pub met: bool,
}

/// Style-class recovery for the held-out demonstrators by linear probes
/// fitted on the trained embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub test_demonstrators: usize,
    pub timing_accuracy: f64,
    pub magnitude_accuracy: f64,
    /// Both axes correct at once.
    pub style_accuracy: f64,
    pub threshold: f64,
    pub met: bool,
}

/// One condition's closed-loop scores, averaged over comparison cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub cells: usize,
    pub mean_final_loss: f64,
    pub mean_success_rate: f64,
    /// Averaged over cells where any episode succeeded.
    pub mean_time_to_goal: Option<f64>,
    pub mean_cross_track: f64,
}

/// Everything the run claims, in one gated document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub holdout_mode: String,
    pub calibration: ImprovementSection,
    pub holdout: ImprovementSection,
    /// Absent when the run had no test demonstrators.
    pub test: Option<ImprovementSection>,
    pub correlations: Vec<CorrelationSummary>,
    /// Absent when there are no test embeddings to classify.
    pub probe: Option<ProbeSummary>,
    pub conditions: Vec<ConditionSummary>,
    /// Every present gate passed.
    pub all_met: bool,
}

/// Stage 5: assemble and gate the report, then write `report.json` and
/// its content hash.
pub fn build_report(cfg: &ExperimentConfig, dir: &Path) -> Result<Report, PipelineError> {
    build_report_inner(cfg, dir).map_err(stage("report"))
}

fn build_report_inner(cfg: &ExperimentConfig, dir: &Path) -> Result<Report, PipelineError> {
    let paths = RunPaths::new(dir);
    let train_rows = read_embeddings_csv(&paths.expect(paths.embeddings(), "train")?)?;
    let test_rows = read_embeddings_csv(&paths.expect(paths.test_embeddings(), "infer")?)?;

    let calibration_table =
        ImprovementReport::read_csv(&paths.expect(paths.improvement_calibration(), "train")?)?;
    let holdout_table =
        ImprovementReport::read_csv(&paths.expect(paths.improvement_holdout(), "train")?)?;
    let test_table =
        ImprovementReport::read_csv(&paths.expect(paths.improvement_test(), "infer")?)?;
    let condition_rows = read_condition_csv(&paths.expect(paths.conditions(), "conditions")?)?;

    let calibration = ImprovementSection::from_table(
        &calibration_table,
        cfg.min_calibration_improvement,
        0.61,
    )
    .ok_or_else(|| PipelineError::Config("calibration improvement table is empty".into()))?;
    let holdout =
        ImprovementSection::from_table(&holdout_table, cfg.min_holdout_improvement, 0.55)
            .ok_or_else(|| PipelineError::Config("holdout improvement table is empty".into()))?;
    let test = ImprovementSection::from_table(&test_table, cfg.min_test_improvement, 0.55);

    let correlations = correlate(&train_rows, cfg.min_correlation)?;
    write_correlation_table(&paths.correlation_table(), &correlations)?;
    write_scatter(&paths.embedding_scatter(), &train_rows, &test_rows)?;
    let probe = probe_styles(&train_rows, &test_rows, cfg.min_probe_accuracy)?;

    let conditions = summarize_conditions(&condition_rows);

    let all_met = calibration.met
        && holdout.met
        && test.as_ref().map_or(true, |s| s.met)
        && correlations.iter().all(|c| c.met)
        && probe.as_ref().map_or(true, |p| p.met);
    let report = Report {
        seed: cfg.seed,
        holdout_mode: cfg.holdout_mode.as_str().to_string(),
        calibration,
        holdout,
        test,
        correlations,
        probe,
        conditions,
        all_met,
    };

    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    fs::write(paths.report(), &bytes)?;
    let digest = Sha256::digest(&bytes);
    fs::write(paths.report_hash(), format!("{}\n", hex::encode(digest)))?;
    Ok(report)
}

type EmbeddingRow = (usize, Vec<f64>, i64, f64);

/// Correlate the best linear readout of the trained embeddings with each
/// true style construct.
fn correlate(
    train: &[EmbeddingRow],
    threshold: f64,
) -> Result<Vec<CorrelationSummary>, PipelineError> {
    let ws: Vec<&[f64]> = train.iter().map(|(_, w, _, _)| w.as_slice()).collect();
    let constructs = [
        ("magnitude", -0.69, train.iter().map(|r| r.3).collect::<Vec<f64>>()),
        ("timing", 0.70, train.iter().map(|r| r.2 as f64).collect()),
    ];
    constructs
        .into_iter()
        .map(|(name, human_reference, truth)| {
            let beta = least_squares(&ws, &truth)?;
            let projected: Vec<f64> = ws.iter().map(|w| predict(&beta, w)).collect();
            let pearson = pearson(&projected, &truth);
            Ok(CorrelationSummary {
                construct: name.to_string(),
                pearson,
                spearman: spearman(&projected, &truth),
                threshold,
                human_reference,
                met: pearson.is_some_and(|r| r.abs() >= threshold),
            })
        })
        .collect()
}

/// Fit class probes on the trained embeddings and score them on the
/// inferred test embeddings.
fn probe_styles(
    train: &[EmbeddingRow],
    test: &[EmbeddingRow],
    threshold: f64,
) -> Result<Option<ProbeSummary>, PipelineError> {
    if test.is_empty() {
        return Ok(None);
    }
    let ws: Vec<&[f64]> = train.iter().map(|(_, w, _, _)| w.as_slice()).collect();
    let timings: Vec<f64> = train.iter().map(|r| r.2 as f64).collect();
    let magnitudes: Vec<f64> = train.iter().map(|r| r.3).collect();
    let timing_beta = least_squares(&ws, &timings)?;
    let magnitude_beta = least_squares(&ws, &magnitudes)?;

    let mut timing_hits = 0usize;
    let mut magnitude_hits = 0usize;
    let mut both_hits = 0usize;
    for (id, w, timing, magnitude) in test {
        let truth = StyleProfile {
            id: *id,
            timing: *timing,
            magnitude: *magnitude,
            noise_sigma: 0.0,
        };
        let timing_ok = timing_class(predict(&timing_beta, w)) == truth.timing_class();
        let magnitude_ok =
            magnitude_class(predict(&magnitude_beta, w)) == truth.magnitude_class();
        timing_hits += timing_ok as usize;
        magnitude_hits += magnitude_ok as usize;
        both_hits += (timing_ok && magnitude_ok) as usize;
    }
    let n = test.len() as f64;
    let style_accuracy = both_hits as f64 / n;
    Ok(Some(ProbeSummary {
        test_demonstrators: test.len(),
        timing_accuracy: timing_hits as f64 / n,
        magnitude_accuracy: magnitude_hits as f64 / n,
        style_accuracy,
        threshold,
        met: style_accuracy > threshold,
    }))
}

/// Class from a regressed timing value; true shifts are whole steps, so
/// anything within half a step of zero reads as neither.
fn timing_class(predicted: f64) -> usize {
    if predicted > 0.5 {
        0
    } else if predicted < -0.5 {
        1
    } else {
        2
    }
}

/// Class from a regressed correction scale, split at the neutral 1.
fn magnitude_class(predicted: f64) -> usize {
    if predicted > 1.0 {
        0
    } else {
        1
    }
}

fn summarize_conditions(
    rows: &[super::conditions::ConditionResult],
) -> Vec<ConditionSummary> {
    let tags: Vec<&str> = {
        let mut seen = Vec::new();
        for r in rows {
            if !seen.contains(&r.condition.tag()) {
                seen.push(r.condition.tag());
            }
        }
        seen
    };
    tags.iter()
        .map(|&tag| {
            let cells: Vec<_> = rows.iter().filter(|r| r.condition.tag() == tag).collect();
            let n = cells.len() as f64;
            let times: Vec<f64> = cells.iter().filter_map(|r| r.mean_time_to_goal).collect();
            ConditionSummary {
                condition: tag.to_string(),
                cells: cells.len(),
                mean_final_loss: cells
                    .iter()
                    .map(|r| *r.policy_loss.last().expect("written rows carry a loss"))
                    .sum::<f64>()
                    / n,
                mean_success_rate: cells.iter().map(|r| r.success_rate).sum::<f64>() / n,
                mean_time_to_goal: (!times.is_empty())
                    .then(|| times.iter().sum::<f64>() / times.len() as f64),
                mean_cross_track: cells.iter().map(|r| r.mean_cross_track).sum::<f64>() / n,
            }
        })
        .collect()
}

fn write_correlation_table(
    path: &Path,
    correlations: &[CorrelationSummary],
) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["construct", "pearson", "spearman", "human_reference"])?;
    for c in correlations {
        w.write_record([
            c.construct.clone(),
            c.pearson.map(|v| v.to_string()).unwrap_or_default(),
            c.spearman.map(|v| v.to_string()).unwrap_or_default(),
            c.human_reference.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Embedding scatter with class columns for plotting, both splits.
fn write_scatter(
    path: &Path,
    train: &[EmbeddingRow],
    test: &[EmbeddingRow],
) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "demonstrator_id",
        "w0",
        "w1",
        "timing",
        "magnitude",
        "timing_class",
        "magnitude_class",
        "split",
    ])?;
    for (split, rows) in [("train", train), ("test", test)] {
        for (id, w_vec, timing, magnitude) in rows {
            let style = StyleProfile {
                id: *id,
                timing: *timing,
                magnitude: *magnitude,
                noise_sigma: 0.0,
            };
            w.write_record([
                id.to_string(),
                w_vec[0].to_string(),
                w_vec[1].to_string(),
                timing.to_string(),
                magnitude.to_string(),
                style.timing_class().to_string(),
                style.magnitude_class().to_string(),
                split.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Ordinary least squares with an intercept, via the normal equations.
fn least_squares(rows: &[&[f64]], y: &[f64]) -> Result<Vec<f64>, PipelineError> {
    let d = rows.first().map_or(0, |r| r.len()) + 1;
    let mut ata = vec![vec![0.0; d]; d];
    let mut aty = vec![0.0; d];
    for (row, &yi) in rows.iter().zip(y) {
        let x: Vec<f64> = std::iter::once(1.0).chain(row.iter().copied()).collect();
        for i in 0..d {
            aty[i] += x[i] * yi;
            for j in 0..d {
                ata[i][j] += x[i] * x[j];
            }
        }
    }
    solve(ata, aty)
}

fn predict(beta: &[f64], w: &[f64]) -> f64 {
    beta[0] + beta[1..].iter().zip(w).map(|(b, v)| b * v).sum::<f64>()
}

/// Gaussian elimination with partial pivoting on a small SPD system.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>, PipelineError> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() < 1e-12 {
            return Err(PipelineError::Config(
                "embeddings are degenerate: singular normal equations".into(),
            ));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let tail: f64 = (col + 1..n).map(|k| a[col][k] * x[k]).sum();
        x[col] = (b[col] - tail) / a[col][col];
    }
    Ok(x)
}

/// `None` when either side has no variance.
fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if vx <= 0.0 || vy <= 0.0 {
        return None;
    }
    Some(cov / (vx.sqrt() * vy.sqrt()))
}

/// Pearson correlation of the ranks, ties sharing their average rank.
fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = shared;
        }
        i = j + 1;
    }
    out
}
