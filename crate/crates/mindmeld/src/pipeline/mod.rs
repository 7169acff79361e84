//! End-to-end experiment driver: generate styled label corpora, train the
//! corrector, fit embeddings for unseen demonstrators, race label-source
//! conditions, and bundle everything into a reproducible report.
//!
//! A run lives in one directory. Each stage writes its artifacts there and
//! later stages read them back, so stages can be driven in isolation from
//! the command line: `gen` fills `config.txt`, `manifest.json`,
//! `styles.json`, and `labels/`; `train` adds `model.json`, `trace.csv`,
//! `embeddings.csv`, and the improvement tables; `infer` adds the
//! test-demonstrator embeddings and their improvement table; `conditions`
//! adds the policy-race tables; `report` reduces all of it to
//! `report.json` plus a content hash.

mod conditions;
mod report;

pub use conditions::{
    run_conditions, train_bc, Condition, ConditionResult, EpisodeOutcome, PolicyParams,
};
pub use report::{
    build_report, ConditionSummary, CorrelationSummary, ImprovementSection, ProbeSummary, Report,
};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::demonstrators::{
    corrupt, load_manifest, sample_style_with, save_manifest, DemonstratorError, LabelSequence,
    ManifestEntry, StyleConfig, StyleProfile,
};
use crate::driving::{
    ground_truth_label, make_calibration_rollouts_with_noise, DrivingError, World,
};
use crate::model::{
    adapt_new_embedding_jointly, correct_actions, infer_new_embedding, load_model, save_embeddings_csv,
    save_model, train_calibration, windows_of, EmbeddingTable, MindMeldParams, ModelError,
    TrainConfig, WindowSample,
};
use crate::style::StyleError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage} artifacts missing: {path} (run `{stage}` first)")]
    MissingArtifact { stage: &'static str, path: PathBuf },
    #[error("demonstrator {0} has zero raw label error; improvement is undefined")]
    DegenerateRawError(usize),
    #[error(
        "no rollout of at least {need} steps for demonstrator {demonstrator}, task {task}"
    )]
    RolloutTooShort {
        demonstrator: usize,
        task: usize,
        need: usize,
    },
    #[error("policy training hit a non-finite loss at epoch {0}")]
    PolicyDiverged(usize),
    #[error("{stage} stage: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Driving(#[from] DrivingError),
    #[error(transparent)]
    Demonstrator(#[from] DemonstratorError),
    #[error(transparent)]
    Style(#[from] StyleError),
}

/// Tag errors with the stage that hit them, so a failure inside a
/// multi-stage run names where to look.
fn stage(name: &'static str) -> impl Fn(PipelineError) -> PipelineError {
    move |source| PipelineError::Stage {
        stage: name,
        source: Box::new(source),
    }
}

/// Whether held-out demonstrators get their embedding fitted against a
/// frozen network or with the network adapting alongside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HoldoutMode {
    Frozen,
    Joint,
}

impl HoldoutMode {
    pub fn as_str(self) -> &'static str {
        match self {
            HoldoutMode::Frozen => "frozen",
            HoldoutMode::Joint => "joint",
        }
    }
}

/// Every knob of a run, parsed from a plain `key=value` file. Defaults
/// reproduce the standard experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Master seed; every stream below derives from it.
    pub seed: u64,
    /// Training demonstrators (M).
    pub train_demonstrators: usize,
    /// Held-out demonstrators fitted after training (N).
    pub test_demonstrators: usize,
    /// Calibration tasks, ids `0..calibration_tasks`.
    pub calibration_tasks: usize,
    /// Task ids reserved for held-out evaluation; disjoint from calibration.
    pub holdout_task_ids: Vec<usize>,

    // Corpus generation.
    pub world_half_extent: f64,
    /// Diffusion of the wheel noise in calibration rollouts.
    pub rollout_noise_sigma: f64,
    /// Rollouts are truncated here to bound window counts.
    pub rollout_cap: usize,

    // Style population.
    pub style_max_shift: usize,
    pub style_under_low: f64,
    pub style_under_high: f64,
    pub style_over_low: f64,
    pub style_over_high: f64,
    pub style_noise_sigma: f64,

    // Corrector training.
    pub window_len: usize,
    pub window_stride: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_epochs: usize,

    // Embedding inference for held-out demonstrators.
    pub inference_epochs: usize,
    pub inference_lr: f64,
    pub inference_plateau_epochs: usize,
    pub holdout_mode: HoldoutMode,

    // Policy-race conditions.
    pub dagger_iterations: usize,
    pub condition_seeds: usize,
    pub condition_timing: i64,
    pub condition_magnitude: f64,
    pub condition_noise_sigma: f64,
    /// Wheel-noise diffusion of the demonstration drive (iteration 0).
    pub demo_noise_sigma: f64,
    pub bc_hidden: usize,
    pub bc_epochs: usize,
    pub bc_batch_size: usize,
    pub bc_lr: f64,
    pub eval_episodes: usize,
    pub eval_max_steps: usize,

    // Report gates; `report` exits nonzero unless all are met.
    pub min_calibration_improvement: f64,
    pub min_holdout_improvement: f64,
    pub min_test_improvement: f64,
    pub min_correlation: f64,
    pub min_probe_accuracy: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_demonstrators: 32,
            test_demonstrators: 8,
            calibration_tasks: 12,
            holdout_task_ids: vec![12, 13, 14, 15],
            world_half_extent: 14.0,
            rollout_noise_sigma: 1.0,
            rollout_cap: 160,
            style_max_shift: 3,
            style_under_low: 0.3,
            style_under_high: 1.0,
            style_over_low: 1.0,
            style_over_high: 2.0,
            style_noise_sigma: 0.05,
            window_len: 20,
            window_stride: 3,
            epochs: 200,
            batch_size: 64,
            lr: 0.001,
            plateau_epochs: 20,
            inference_epochs: 60,
            inference_lr: 0.05,
            inference_plateau_epochs: 60,
            holdout_mode: HoldoutMode::Frozen,
            dagger_iterations: 5,
            condition_seeds: 3,
            condition_timing: 3,
            condition_magnitude: 1.8,
            condition_noise_sigma: 0.05,
            demo_noise_sigma: 1.0,
            bc_hidden: 32,
            bc_epochs: 200,
            bc_batch_size: 64,
            bc_lr: 0.01,
            eval_episodes: 20,
            eval_max_steps: 300,
            min_calibration_improvement: 0.5,
            min_holdout_improvement: 0.4,
            min_test_improvement: 0.4,
            min_correlation: 0.6,
            min_probe_accuracy: 0.7,
        }
    }
}

impl ExperimentConfig {
    /// Parse `key=value` text. `#` starts a comment, blank lines are
    /// skipped, later keys override earlier ones, unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad_line(i, raw, "expected key=value"))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value).map_err(|why| bad_line(i, raw, &why))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|_| PipelineError::MissingArtifact {
            stage: "gen",
            path: path.to_path_buf(),
        })?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}`"))
        }
        match key {
            "seed" => self.seed = num(value)?,
            "train_demonstrators" => self.train_demonstrators = num(value)?,
            "test_demonstrators" => self.test_demonstrators = num(value)?,
            "calibration_tasks" => self.calibration_tasks = num(value)?,
            "holdout_task_ids" => {
                self.holdout_task_ids = value
                    .split(',')
                    .map(|v| num(v.trim()))
                    .collect::<Result<_, _>>()?
            }
            "world_half_extent" => self.world_half_extent = num(value)?,
            "rollout_noise_sigma" => self.rollout_noise_sigma = num(value)?,
            "rollout_cap" => self.rollout_cap = num(value)?,
            "style_max_shift" => self.style_max_shift = num(value)?,
            "style_under_low" => self.style_under_low = num(value)?,
            "style_under_high" => self.style_under_high = num(value)?,
            "style_over_low" => self.style_over_low = num(value)?,
            "style_over_high" => self.style_over_high = num(value)?,
            "style_noise_sigma" => self.style_noise_sigma = num(value)?,
            "window_len" => self.window_len = num(value)?,
            "window_stride" => self.window_stride = num(value)?,
            "epochs" => self.epochs = num(value)?,
            "batch_size" => self.batch_size = num(value)?,
            "lr" => self.lr = num(value)?,
            "plateau_epochs" => self.plateau_epochs = num(value)?,
            "inference_epochs" => self.inference_epochs = num(value)?,
            "inference_lr" => self.inference_lr = num(value)?,
            "inference_plateau_epochs" => self.inference_plateau_epochs = num(value)?,
            "holdout_mode" => {
                self.holdout_mode = match value {
                    "frozen" => HoldoutMode::Frozen,
                    "joint" => HoldoutMode::Joint,
                    other => return Err(format!("bad value `{other}` (frozen|joint)")),
                }
            }
            "dagger_iterations" => self.dagger_iterations = num(value)?,
            "condition_seeds" => self.condition_seeds = num(value)?,
            "condition_timing" => self.condition_timing = num(value)?,
            "condition_magnitude" => self.condition_magnitude = num(value)?,
            "condition_noise_sigma" => self.condition_noise_sigma = num(value)?,
            "demo_noise_sigma" => self.demo_noise_sigma = num(value)?,
            "bc_hidden" => self.bc_hidden = num(value)?,
            "bc_epochs" => self.bc_epochs = num(value)?,
            "bc_batch_size" => self.bc_batch_size = num(value)?,
            "bc_lr" => self.bc_lr = num(value)?,
            "eval_episodes" => self.eval_episodes = num(value)?,
            "eval_max_steps" => self.eval_max_steps = num(value)?,
            "min_calibration_improvement" => self.min_calibration_improvement = num(value)?,
            "min_holdout_improvement" => self.min_holdout_improvement = num(value)?,
            "min_test_improvement" => self.min_test_improvement = num(value)?,
            "min_correlation" => self.min_correlation = num(value)?,
            "min_probe_accuracy" => self.min_probe_accuracy = num(value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// The config as parseable text, one key per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: &dyn std::fmt::Display| {
            writeln!(s, "{k} = {v}").expect("writing to String cannot fail");
        };
        kv(&mut s, "seed", &self.seed);
        kv(&mut s, "train_demonstrators", &self.train_demonstrators);
        kv(&mut s, "test_demonstrators", &self.test_demonstrators);
        kv(&mut s, "calibration_tasks", &self.calibration_tasks);
        let ids = self
            .holdout_task_ids
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(",");
        kv(&mut s, "holdout_task_ids", &ids);
        kv(&mut s, "world_half_extent", &self.world_half_extent);
        kv(&mut s, "rollout_noise_sigma", &self.rollout_noise_sigma);
        kv(&mut s, "rollout_cap", &self.rollout_cap);
        kv(&mut s, "style_max_shift", &self.style_max_shift);
        kv(&mut s, "style_under_low", &self.style_under_low);
        kv(&mut s, "style_under_high", &self.style_under_high);
        kv(&mut s, "style_over_low", &self.style_over_low);
        kv(&mut s, "style_over_high", &self.style_over_high);
        kv(&mut s, "style_noise_sigma", &self.style_noise_sigma);
        kv(&mut s, "window_len", &self.window_len);
        kv(&mut s, "window_stride", &self.window_stride);
        kv(&mut s, "epochs", &self.epochs);
        kv(&mut s, "batch_size", &self.batch_size);
        kv(&mut s, "lr", &self.lr);
        kv(&mut s, "plateau_epochs", &self.plateau_epochs);
        kv(&mut s, "inference_epochs", &self.inference_epochs);
        kv(&mut s, "inference_lr", &self.inference_lr);
        kv(&mut s, "inference_plateau_epochs", &self.inference_plateau_epochs);
        kv(&mut s, "holdout_mode", &self.holdout_mode.as_str());
        kv(&mut s, "dagger_iterations", &self.dagger_iterations);
        kv(&mut s, "condition_seeds", &self.condition_seeds);
        kv(&mut s, "condition_timing", &self.condition_timing);
        kv(&mut s, "condition_magnitude", &self.condition_magnitude);
        kv(&mut s, "condition_noise_sigma", &self.condition_noise_sigma);
        kv(&mut s, "demo_noise_sigma", &self.demo_noise_sigma);
        kv(&mut s, "bc_hidden", &self.bc_hidden);
        kv(&mut s, "bc_epochs", &self.bc_epochs);
        kv(&mut s, "bc_batch_size", &self.bc_batch_size);
        kv(&mut s, "bc_lr", &self.bc_lr);
        kv(&mut s, "eval_episodes", &self.eval_episodes);
        kv(&mut s, "eval_max_steps", &self.eval_max_steps);
        kv(&mut s, "min_calibration_improvement", &self.min_calibration_improvement);
        kv(&mut s, "min_holdout_improvement", &self.min_holdout_improvement);
        kv(&mut s, "min_test_improvement", &self.min_test_improvement);
        kv(&mut s, "min_correlation", &self.min_correlation);
        kv(&mut s, "min_probe_accuracy", &self.min_probe_accuracy);
        s
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |msg: String| Err(PipelineError::Config(msg));
        if self.train_demonstrators == 0 {
            return fail("need at least one training demonstrator".into());
        }
        if self.calibration_tasks == 0 {
            return fail("need at least one calibration task".into());
        }
        for &id in &self.holdout_task_ids {
            if id < self.calibration_tasks {
                return fail(format!(
                    "holdout task {id} overlaps calibration tasks 0..{}",
                    self.calibration_tasks
                ));
            }
        }
        if self.window_len < 3 {
            return fail("window_len must be at least 3".into());
        }
        if self.window_stride == 0 {
            return fail("window_stride must be positive".into());
        }
        if self.rollout_cap < self.window_len {
            return fail(format!(
                "rollout_cap {} cannot hold a {}-step window",
                self.rollout_cap, self.window_len
            ));
        }
        if self.batch_size == 0 || self.bc_batch_size == 0 {
            return fail("batch sizes must be positive".into());
        }
        if !(self.lr > 0.0 && self.inference_lr > 0.0 && self.bc_lr > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if self.style_under_low >= self.style_under_high
            || self.style_over_low >= self.style_over_high
            || self.style_under_low <= 0.0
        {
            return fail("style magnitude ranges must be positive and ordered".into());
        }
        if self.style_noise_sigma < 0.0
            || self.rollout_noise_sigma < 0.0
            || self.condition_noise_sigma < 0.0
            || self.demo_noise_sigma < 0.0
        {
            return fail("noise levels cannot be negative".into());
        }
        if self.world_half_extent <= 0.0 {
            return fail("world_half_extent must be positive".into());
        }
        if self.eval_episodes == 0 || self.eval_max_steps == 0 {
            return fail("evaluation needs at least one episode and step".into());
        }
        if self.condition_magnitude <= 0.0 {
            return fail("condition_magnitude must be positive".into());
        }
        for (name, v) in [
            ("min_calibration_improvement", self.min_calibration_improvement),
            ("min_holdout_improvement", self.min_holdout_improvement),
            ("min_test_improvement", self.min_test_improvement),
            ("min_correlation", self.min_correlation),
            ("min_probe_accuracy", self.min_probe_accuracy),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }

    pub fn style_config(&self) -> StyleConfig {
        StyleConfig {
            max_shift: self.style_max_shift,
            under_range: (self.style_under_low, self.style_under_high),
            over_range: (self.style_over_low, self.style_over_high),
            noise_sigma: self.style_noise_sigma,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            plateau_epochs: self.plateau_epochs,
        }
    }

    pub fn inference_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.inference_epochs,
            batch_size: self.batch_size,
            lr: self.inference_lr,
            plateau_epochs: self.inference_plateau_epochs,
        }
    }

    pub fn world(&self) -> World {
        World::open((0.0, 0.0), self.world_half_extent)
    }

    /// Training demonstrator ids, then test demonstrator ids.
    pub fn train_ids(&self) -> Vec<usize> {
        (0..self.train_demonstrators).collect()
    }

    pub fn test_ids(&self) -> Vec<usize> {
        (self.train_demonstrators..self.train_demonstrators + self.test_demonstrators).collect()
    }

    pub fn calibration_ids(&self) -> Vec<usize> {
        (0..self.calibration_tasks).collect()
    }

    /// Shortest label sequence the downstream stages can digest.
    fn min_sequence_len(&self) -> usize {
        self.window_len.max(2 * self.style_max_shift + 2)
    }
}

fn bad_line(i: usize, raw: &str, why: &str) -> PipelineError {
    PipelineError::Config(format!("line {}: {why} in `{}`", i + 1, raw.trim()))
}

// Derived-seed streams. Tagging the purpose into the mix keeps every
// consumer's randomness independent of the others.
const STREAM_STYLE: u64 = 1;
const STREAM_ROLLOUT: u64 = 2;
const STREAM_CORRUPT: u64 = 3;
const STREAM_TRAIN: u64 = 4;
const STREAM_INFER: u64 = 5;
const STREAM_DEMO: u64 = 6;
const STREAM_POLICY: u64 = 7;
const STREAM_EVAL: u64 = 8;
const STREAM_EXPERT: u64 = 9;

/// SplitMix64 finalizer over a tagged tuple.
fn mix(seed: u64, stream: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0xA076_1D64_78BD_642F)
        ^ a.wrapping_mul(0xE703_7ED1_A0B4_28DB)
        ^ b.wrapping_mul(0x8EBC_6AF0_9C88_C6E3);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Artifact locations inside one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn styles(&self) -> PathBuf {
        self.root.join("styles.json")
    }
    pub fn labels_dir(&self, demonstrator: usize) -> PathBuf {
        self.root.join(format!("labels/demo_{demonstrator:03}"))
    }
    pub fn label(&self, demonstrator: usize, task: usize) -> PathBuf {
        self.labels_dir(demonstrator).join(format!("task_{task:02}.csv"))
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model.json")
    }
    pub fn trace(&self) -> PathBuf {
        self.root.join("trace.csv")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings.csv")
    }
    pub fn improvement_calibration(&self) -> PathBuf {
        self.root.join("improvement_calibration.csv")
    }
    pub fn improvement_holdout(&self) -> PathBuf {
        self.root.join("improvement_holdout.csv")
    }
    pub fn test_embeddings(&self) -> PathBuf {
        self.root.join("test_embeddings.csv")
    }
    pub fn improvement_test(&self) -> PathBuf {
        self.root.join("improvement_test.csv")
    }
    pub fn conditions(&self) -> PathBuf {
        self.root.join("conditions.csv")
    }
    pub fn condition_losses(&self) -> PathBuf {
        self.root.join("condition_losses.csv")
    }
    pub fn correlation_table(&self) -> PathBuf {
        self.root.join("correlation_table.csv")
    }
    pub fn embedding_scatter(&self) -> PathBuf {
        self.root.join("embedding_scatter.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn report_hash(&self) -> PathBuf {
        self.root.join("report.hash")
    }

    /// Error unless `path` exists; names the stage that should have made it.
    fn expect(&self, path: PathBuf, stage: &'static str) -> Result<PathBuf, PipelineError> {
        if path.exists() {
            Ok(path)
        } else {
            Err(PipelineError::MissingArtifact { stage, path })
        }
    }
}

/// What `gen` decided: ids, seeds, and the crate version that wrote them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub train_demonstrators: Vec<usize>,
    pub test_demonstrators: Vec<usize>,
    pub calibration_tasks: Vec<usize>,
    pub holdout_tasks: Vec<usize>,
    pub train_seed: u64,
}

/// Per-demonstrator label quality before and after correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstratorImprovement {
    pub demonstrator_id: usize,
    /// Mean `|a - o|` over every step of the evaluated tasks.
    pub raw_error: f64,
    /// Mean `|corrected - o|` over the same steps.
    pub corrected_error: f64,
    /// `1 - corrected_error / raw_error`.
    pub improvement: f64,
}

/// Improvement rows plus their aggregates. Aggregates are `None` for an
/// empty cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementReport {
    pub rows: Vec<DemonstratorImprovement>,
    pub mean_improvement: Option<f64>,
    pub std_improvement: Option<f64>,
}

impl ImprovementReport {
    pub fn from_rows(rows: Vec<DemonstratorImprovement>) -> Self {
        let n = rows.len() as f64;
        let (mean, std) = if rows.is_empty() {
            (None, None)
        } else {
            let mean = rows.iter().map(|r| r.improvement).sum::<f64>() / n;
            let var = rows
                .iter()
                .map(|r| (r.improvement - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0).max(1.0);
            (Some(mean), Some(var.sqrt()))
        };
        Self {
            rows,
            mean_improvement: mean,
            std_improvement: std,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), PipelineError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["demonstrator_id", "raw_error", "corrected_error", "improvement"])?;
        for r in &self.rows {
            w.write_record([
                r.demonstrator_id.to_string(),
                r.raw_error.to_string(),
                r.corrected_error.to_string(),
                r.improvement.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, PipelineError> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| -> Result<&str, PipelineError> {
                rec.get(i).ok_or_else(|| {
                    PipelineError::Config(format!("improvement row too short: {rec:?}"))
                })
            };
            let parse = |v: &str| -> Result<f64, PipelineError> {
                v.parse()
                    .map_err(|e| PipelineError::Config(format!("{e}: {rec:?}")))
            };
            rows.push(DemonstratorImprovement {
                demonstrator_id: field(0)?
                    .parse()
                    .map_err(|e| PipelineError::Config(format!("{e}: {rec:?}")))?,
                raw_error: parse(field(1)?)?,
                corrected_error: parse(field(2)?)?,
                improvement: parse(field(3)?)?,
            });
        }
        Ok(Self::from_rows(rows))
    }
}

/// Drive one noisy goal-approach and label it through the demonstrator's
/// style. Starts are resampled until the rollout is long enough to window.
fn labeled_rollout(
    cfg: &ExperimentConfig,
    world: &World,
    style: &StyleProfile,
    task: usize,
) -> Result<LabelSequence, PipelineError> {
    let need = cfg.min_sequence_len();
    let demonstrator = style.id;
    for attempt in 0..64u64 {
        let roll_seed = mix(
            cfg.seed,
            STREAM_ROLLOUT,
            demonstrator as u64,
            (task as u64) << 8 | attempt,
        );
        let traj = make_calibration_rollouts_with_noise(world, 1, roll_seed, cfg.rollout_noise_sigma)?
            .remove(0);
        let take = traj.len().min(cfg.rollout_cap);
        let o: Vec<f64> = traj.states[..take]
            .iter()
            .map(|s| ground_truth_label(s, world).wheel())
            .collect();
        if o.len() < need {
            continue;
        }
        let corrupt_seed = mix(cfg.seed, STREAM_CORRUPT, demonstrator as u64, task as u64);
        let mut seq = corrupt(&o, style, corrupt_seed)?;
        seq.task_id = task;
        return Ok(seq);
    }
    Err(PipelineError::RolloutTooShort {
        demonstrator,
        task,
        need,
    })
}

/// Stage 1: styles, rollouts, and corrupted labels for every demonstrator
/// and task, plus the config echo and run manifest.
pub fn generate(cfg: &ExperimentConfig, dir: &Path) -> Result<(), PipelineError> {
    generate_inner(cfg, dir).map_err(stage("gen"))
}

fn generate_inner(cfg: &ExperimentConfig, dir: &Path) -> Result<(), PipelineError> {
    cfg.validate()?;
    let paths = RunPaths::new(dir);
    fs::create_dir_all(dir)?;
    fs::write(paths.config(), cfg.to_text())?;

    let style_cfg = cfg.style_config();
    let all_ids: Vec<usize> = cfg.train_ids().into_iter().chain(cfg.test_ids()).collect();
    let entries: Vec<ManifestEntry> = all_ids
        .iter()
        .map(|&id| {
            let style_seed = mix(cfg.seed, STREAM_STYLE, id as u64, 0);
            let mut style = sample_style_with(&style_cfg, style_seed);
            style.id = id;
            ManifestEntry::new(&style, style_seed)
        })
        .collect();
    save_manifest(&paths.styles(), &entries)?;

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        train_demonstrators: cfg.train_ids(),
        test_demonstrators: cfg.test_ids(),
        calibration_tasks: cfg.calibration_ids(),
        holdout_tasks: cfg.holdout_task_ids.clone(),
        train_seed: mix(cfg.seed, STREAM_TRAIN, 0, 0),
    };
    fs::write(paths.manifest(), serde_json::to_string_pretty(&manifest)?)?;

    let world = cfg.world();
    let tasks: Vec<usize> = cfg
        .calibration_ids()
        .into_iter()
        .chain(cfg.holdout_task_ids.iter().copied())
        .collect();
    for entry in &entries {
        let style = entry.style();
        fs::create_dir_all(paths.labels_dir(style.id))?;
        for &task in &tasks {
            let seq = labeled_rollout(cfg, &world, &style, task)?;
            seq.write_csv(&paths.label(style.id, task))?;
        }
    }
    Ok(())
}

/// Load one demonstrator's stored label sequences for the given tasks.
fn load_sequences(
    paths: &RunPaths,
    demonstrator: usize,
    tasks: &[usize],
) -> Result<Vec<LabelSequence>, PipelineError> {
    tasks
        .iter()
        .map(|&task| {
            let path = paths.expect(paths.label(demonstrator, task), "gen")?;
            Ok(LabelSequence::read_csv(&path, demonstrator, task)?)
        })
        .collect()
}

/// Centered windows at the configured stride, over several sequences.
fn windows_at_stride(
    sequences: &[LabelSequence],
    cfg: &ExperimentConfig,
) -> Result<Vec<WindowSample>, PipelineError> {
    let mut out = Vec::new();
    for seq in sequences {
        let wins = windows_of(seq, cfg.window_len)?;
        out.extend(wins.into_iter().step_by(cfg.window_stride));
    }
    Ok(out)
}

/// Mean absolute label errors before and after correction, pooled over the
/// given sequences.
fn improvement_row(
    params: &MindMeldParams,
    w: &[f64],
    sequences: &[LabelSequence],
    window_len: usize,
    demonstrator_id: usize,
) -> Result<DemonstratorImprovement, PipelineError> {
    let (mut raw, mut corrected, mut steps) = (0.0, 0.0, 0usize);
    for seq in sequences {
        let fixed = correct_actions(params, w, &seq.a, window_len)?;
        for ((a, o), c) in seq.a.iter().zip(&seq.o).zip(&fixed) {
            raw += (a - o).abs();
            corrected += (c - o).abs();
            steps += 1;
        }
    }
    let raw = raw / steps as f64;
    let corrected = corrected / steps as f64;
    if raw == 0.0 {
        return Err(PipelineError::DegenerateRawError(demonstrator_id));
    }
    Ok(DemonstratorImprovement {
        demonstrator_id,
        raw_error: raw,
        corrected_error: corrected,
        improvement: 1.0 - corrected / raw,
    })
}

/// Everything the calibration phase produces, alongside its artifacts.
#[derive(Debug)]
pub struct CalibrationOutcome {
    pub params: MindMeldParams,
    pub table: EmbeddingTable,
    pub trace: Vec<f64>,
    /// Improvement on the calibration tasks themselves.
    pub calibration: ImprovementReport,
    /// Improvement on the held-out tasks, same demonstrators.
    pub holdout: ImprovementReport,
}

/// Stage 2: train the corrector on the training demonstrators' calibration
/// labels, then score label improvement on calibration and held-out tasks.
pub fn run_calibration_phase(
    cfg: &ExperimentConfig,
    dir: &Path,
) -> Result<CalibrationOutcome, PipelineError> {
    run_calibration_inner(cfg, dir).map_err(stage("train"))
}

fn run_calibration_inner(
    cfg: &ExperimentConfig,
    dir: &Path,
) -> Result<CalibrationOutcome, PipelineError> {
    let paths = RunPaths::new(dir);
    let manifest_path = paths.expect(paths.styles(), "gen")?;
    let styles: Vec<StyleProfile> = load_manifest(&manifest_path)?
        .iter()
        .map(ManifestEntry::style)
        .collect();

    let calibration_tasks = cfg.calibration_ids();
    let mut per_demo: Vec<(usize, Vec<LabelSequence>)> = Vec::new();
    for id in cfg.train_ids() {
        per_demo.push((id, load_sequences(&paths, id, &calibration_tasks)?));
    }
    let samples = {
        let all: Vec<LabelSequence> = per_demo.iter().flat_map(|(_, s)| s.clone()).collect();
        windows_at_stride(&all, cfg)?
    };

    let (params, table, trace) =
        train_calibration(&samples, &cfg.train_config(), mix(cfg.seed, STREAM_TRAIN, 0, 0))?;

    save_model(&paths.model(), &params, &table)?;
    write_trace(&paths.trace(), &trace)?;
    save_embeddings_csv(&paths.embeddings(), &table, &styles)?;

    let mut calibration_rows = Vec::new();
    let mut holdout_rows = Vec::new();
    for (id, sequences) in &per_demo {
        let w = table
            .get(*id)
            .ok_or(ModelError::UnknownDemonstrator(*id))?
            .to_vec();
        calibration_rows.push(improvement_row(&params, &w, sequences, cfg.window_len, *id)?);
        let holdout_seqs = load_sequences(&paths, *id, &cfg.holdout_task_ids)?;
        holdout_rows.push(improvement_row(&params, &w, &holdout_seqs, cfg.window_len, *id)?);
    }
    let calibration = ImprovementReport::from_rows(calibration_rows);
    let holdout = ImprovementReport::from_rows(holdout_rows);
    calibration.write_csv(&paths.improvement_calibration())?;
    holdout.write_csv(&paths.improvement_holdout())?;

    Ok(CalibrationOutcome {
        params,
        table,
        trace,
        calibration,
        holdout,
    })
}

fn write_trace(path: &Path, trace: &[f64]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss"])?;
    for (epoch, loss) in trace.iter().enumerate() {
        w.write_record([epoch.to_string(), loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// What the test phase learned about the held-out demonstrators.
#[derive(Debug)]
pub struct TestOutcome {
    /// Inferred embedding per test demonstrator.
    pub embeddings: Vec<(usize, Vec<f64>)>,
    /// Improvement on their held-out tasks.
    pub improvement: ImprovementReport,
}

/// Stage 3: fit embeddings for the unseen demonstrators from their
/// calibration labels, then score improvement on their held-out tasks.
pub fn run_test_phase(cfg: &ExperimentConfig, dir: &Path) -> Result<TestOutcome, PipelineError> {
    run_test_inner(cfg, dir).map_err(stage("infer"))
}

fn run_test_inner(cfg: &ExperimentConfig, dir: &Path) -> Result<TestOutcome, PipelineError> {
    let paths = RunPaths::new(dir);
    let model_path = paths.expect(paths.model(), "train")?;
    let (params, table) = load_model(&model_path)?;
    let styles: Vec<StyleProfile> = load_manifest(&paths.expect(paths.styles(), "gen")?)?
        .iter()
        .map(ManifestEntry::style)
        .collect();

    let calibration_tasks = cfg.calibration_ids();
    let infer_cfg = cfg.inference_config();
    let mut embeddings = Vec::new();
    let mut rows = Vec::new();
    for id in cfg.test_ids() {
        let calibration = load_sequences(&paths, id, &calibration_tasks)?;
        let samples = windows_at_stride(&calibration, cfg)?;
        let seed = mix(cfg.seed, STREAM_INFER, id as u64, 0);
        // Joint mode lets the network drift per demonstrator; frozen mode
        // only fits the embedding, as after deployment.
        let (demo_params, w) = match cfg.holdout_mode {
            HoldoutMode::Frozen => {
                let w = infer_new_embedding(&params, &samples, &table, &infer_cfg, seed)?;
                (params.clone(), w)
            }
            HoldoutMode::Joint => {
                adapt_new_embedding_jointly(&params, &samples, &table, &infer_cfg, seed)?
            }
        };
        let holdout = load_sequences(&paths, id, &cfg.holdout_task_ids)?;
        rows.push(improvement_row(&demo_params, &w, &holdout, cfg.window_len, id)?);
        embeddings.push((id, w));
    }

    write_test_embeddings(&paths.test_embeddings(), &embeddings, &styles)?;
    let improvement = ImprovementReport::from_rows(rows);
    improvement.write_csv(&paths.improvement_test())?;
    Ok(TestOutcome {
        embeddings,
        improvement,
    })
}

/// Same layout as the trained-embedding scatter, for the inferred ones.
fn write_test_embeddings(
    path: &Path,
    embeddings: &[(usize, Vec<f64>)],
    styles: &[StyleProfile],
) -> Result<(), PipelineError> {
    let mut out = String::from("demonstrator_id,w0,w1,timing,magnitude\n");
    for (id, w) in embeddings {
        let Some(style) = styles.iter().find(|s| s.id == *id) else {
            continue;
        };
        let ws = w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        writeln!(out, "{id},{ws},{},{}", style.timing, style.magnitude)
            .expect("writing to String cannot fail");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read an embeddings CSV back as `(id, w, timing, magnitude)` rows.
fn read_embeddings_csv(path: &Path) -> Result<Vec<(usize, Vec<f64>, i64, f64)>, PipelineError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let err = |e: &dyn std::fmt::Display| PipelineError::Config(format!("{e}: {rec:?}"));
        let field = |i: usize| rec.get(i).ok_or_else(|| err(&"embedding row too short"));
        rows.push((
            field(0)?.parse().map_err(|e| err(&e))?,
            vec![
                field(1)?.parse().map_err(|e| err(&e))?,
                field(2)?.parse().map_err(|e| err(&e))?,
            ],
            field(3)?.parse().map_err(|e| err(&e))?,
            field(4)?.parse().map_err(|e| err(&e))?,
        ));
    }
    Ok(rows)
}

/// Run every stage in order and return the final report.
pub fn run_full(cfg: &ExperimentConfig, dir: &Path) -> Result<Report, PipelineError> {
    generate(cfg, dir)?;
    run_calibration_phase(cfg, dir)?;
    run_test_phase(cfg, dir)?;
    run_conditions(cfg, dir)?;
    build_report(cfg, dir)
}
