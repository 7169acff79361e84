//! Simulated suboptimal demonstrators.
//!
//! Each demonstrator has a fixed personal style — react late or early, and
//! over- or under-correct — and labels every task through it. Styles are
//! sampled with known class balance so downstream metrics can be checked
//! against what was actually injected.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::driving::WHEEL_LIMIT;

#[derive(Debug, Error)]
pub enum DemonstratorError {
    #[error("label sequence of {len} steps cannot absorb a shift of {timing}")]
    SequenceTooShort { len: usize, timing: i64 },
    #[error("label file: {0}")]
    LabelFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Ranges the style sampler draws from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StyleConfig {
    /// Largest timing shift in either direction, timesteps.
    pub max_shift: usize,
    /// Under-correction magnitudes, `[low, high)`.
    pub under_range: (f64, f64),
    /// Over-correction magnitudes, `(low, high]`.
    pub over_range: (f64, f64),
    /// Label noise, wheel units.
    pub noise_sigma: f64,
}

impl Default for StyleConfig {
    fn default() -> Self {
        Self {
            max_shift: 3,
            under_range: (0.3, 1.0),
            over_range: (1.0, 2.0),
            noise_sigma: 0.05,
        }
    }
}

/// One demonstrator's labeling style.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleProfile {
    /// Demonstrator index.
    pub id: usize,
    /// Timesteps of reaction shift: positive = delayed, negative =
    /// anticipatory, zero = neither.
    pub timing: i64,
    /// Correction scale: above 1 over-corrects, below 1 under-corrects.
    pub magnitude: f64,
    /// Standard deviation of the per-step label noise, wheel units.
    pub noise_sigma: f64,
}

impl StyleProfile {
    /// The style that changes nothing.
    pub fn identity() -> Self {
        Self {
            id: 0,
            timing: 0,
            magnitude: 1.0,
            noise_sigma: 0.0,
        }
    }

    /// Timing class index: 0 delayed, 1 anticipatory, 2 neither.
    pub fn timing_class(&self) -> usize {
        match self.timing {
            t if t > 0 => 0,
            t if t < 0 => 1,
            _ => 2,
        }
    }

    /// Magnitude class index: 0 over-corrector, 1 under-corrector, 2 neutral.
    pub fn magnitude_class(&self) -> usize {
        if self.magnitude > 1.0 {
            0
        } else if self.magnitude < 1.0 {
            1
        } else {
            2
        }
    }
}

/// Ground-truth and demonstrator wheel values for one (demonstrator, task)
/// pair, step-aligned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSequence {
    pub demonstrator_id: usize,
    pub task_id: usize,
    /// Ground-truth labels.
    pub o: Vec<f64>,
    /// Demonstrator labels.
    pub a: Vec<f64>,
}

impl LabelSequence {
    pub fn len(&self) -> usize {
        self.o.len()
    }

    pub fn is_empty(&self) -> bool {
        self.o.is_empty()
    }

    pub fn validate(&self) -> Result<(), DemonstratorError> {
        if self.o.len() != self.a.len() {
            return Err(DemonstratorError::LabelFormat(format!(
                "{} ground-truth vs {} demonstrator labels",
                self.o.len(),
                self.a.len()
            )));
        }
        let in_range = |v: &f64| v.abs() <= WHEEL_LIMIT;
        if !(self.o.iter().all(in_range) && self.a.iter().all(in_range)) {
            return Err(DemonstratorError::LabelFormat(
                "label outside the wheel range".into(),
            ));
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DemonstratorError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "o", "a"])?;
        for (t, (o, a)) in self.o.iter().zip(&self.a).enumerate() {
            w.write_record([t.to_string(), o.to_string(), a.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, demonstrator_id: usize, task_id: usize) -> Result<Self, DemonstratorError> {
        let mut r = csv::Reader::from_path(path)?;
        let mut o = Vec::new();
        let mut a = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| -> Result<f64, DemonstratorError> {
                rec.get(i)
                    .ok_or_else(|| DemonstratorError::LabelFormat(format!("row too short: {rec:?}")))?
                    .parse()
                    .map_err(|e| DemonstratorError::LabelFormat(format!("{e}: {rec:?}")))
            };
            o.push(field(1)?);
            a.push(field(2)?);
        }
        let seq = Self {
            demonstrator_id,
            task_id,
            o,
            a,
        };
        seq.validate()?;
        Ok(seq)
    }
}

/// Draw a style: timing class (delayed / anticipatory / neither) with equal
/// probability, then a uniform shift or magnitude inside the class ranges.
pub fn sample_style(seed: u64) -> StyleProfile {
    sample_style_with(&StyleConfig::default(), seed)
}

pub fn sample_style_with(cfg: &StyleConfig, seed: u64) -> StyleProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let timing = match rng.gen_range(0..3) {
        0 => rng.gen_range(1..=cfg.max_shift) as i64,
        1 => -(rng.gen_range(1..=cfg.max_shift) as i64),
        _ => 0,
    };
    let magnitude = if rng.gen_bool(0.5) {
        // Map [low, high) onto (low, high] to keep 1.0 excluded.
        let (low, high) = cfg.over_range;
        low + high - rng.gen_range(low..high)
    } else {
        let (low, high) = cfg.under_range;
        rng.gen_range(low..high)
    };
    StyleProfile {
        id: 0,
        timing,
        magnitude,
        noise_sigma: cfg.noise_sigma,
    }
}

/// Pass ground-truth labels through a style: shift by the timing offset
/// (edges clamp to the first/last value), scale by the magnitude, add
/// seeded noise, saturate at the wheel range.
pub fn corrupt(o: &[f64], style: &StyleProfile, seed: u64) -> Result<LabelSequence, DemonstratorError> {
    let shift = style.timing;
    if (o.len() as i64) <= 2 * shift.abs() {
        return Err(DemonstratorError::SequenceTooShort {
            len: o.len(),
            timing: shift,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = o.len() as i64 - 1;
    let a = (0..o.len() as i64)
        .map(|t| {
            let src = (t - shift).clamp(0, last) as usize;
            let eps: f64 = style.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            (style.magnitude * o[src] + eps).clamp(-WHEEL_LIMIT, WHEEL_LIMIT)
        })
        .collect();
    Ok(LabelSequence {
        demonstrator_id: style.id,
        task_id: 0,
        o: o.to_vec(),
        a,
    })
}

/// One row of the demonstrator manifest: the style plus the seed that
/// drives that demonstrator's label noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub timing: i64,
    pub magnitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ManifestEntry {
    pub fn new(style: &StyleProfile, seed: u64) -> Self {
        Self {
            id: style.id,
            timing: style.timing,
            magnitude: style.magnitude,
            noise_sigma: style.noise_sigma,
            seed,
        }
    }

    pub fn style(&self) -> StyleProfile {
        StyleProfile {
            id: self.id,
            timing: self.timing,
            magnitude: self.magnitude,
            noise_sigma: self.noise_sigma,
        }
    }
}

pub fn save_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DemonstratorError> {
    fs::write(path, serde_json::to_string_pretty(entries)?)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DemonstratorError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timing_classes_are_balanced_over_many_seeds() {
        let mut counts = [0usize; 3];
        let n = 1000;
        for seed in 0..n {
            counts[sample_style(seed).timing_class()] += 1;
        }
        // Binomial(1000, 1/3): 3 standard deviations around the mean.
        let mean = n as f64 / 3.0;
        let sd = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for (class, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - mean).abs() <= 3.0 * sd,
                "class {class} count {c} outside {mean}±{}",
                3.0 * sd
            );
        }
    }

    #[test]
    fn magnitudes_stay_in_their_declared_ranges() {
        let cfg = StyleConfig::default();
        let mut over = 0usize;
        for seed in 0..1000 {
            let s = sample_style(seed);
            assert!(s.magnitude > 0.0);
            assert!(s.magnitude != 1.0);
            if s.magnitude > 1.0 {
                over += 1;
                assert!(s.magnitude <= cfg.over_range.1);
            } else {
                assert!(s.magnitude >= cfg.under_range.0);
            }
            assert!(s.timing.unsigned_abs() as usize <= cfg.max_shift);
        }
        let sd = (1000.0f64 * 0.25).sqrt();
        assert!((over as f64 - 500.0).abs() <= 3.0 * sd, "{over} over-correctors");
    }

    #[test]
    fn same_seed_same_profile() {
        assert_eq!(sample_style(1234), sample_style(1234));
    }

    #[test]
    fn identity_style_is_a_fixed_point() {
        let o = vec![0.0, 0.5, -1.2, 2.5, 0.1];
        let got = corrupt(&o, &StyleProfile::identity(), 77).unwrap();
        assert_eq!(got.a, o);
        assert_eq!(got.o, o);
    }

    #[test]
    fn delay_shifts_labels_later() {
        let o = vec![0.0, 1.0, 2.0, 3.0];
        let style = StyleProfile {
            timing: 1,
            ..StyleProfile::identity()
        };
        let got = corrupt(&o, &style, 0).unwrap();
        assert_eq!(got.a, vec![0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn anticipation_shifts_labels_earlier() {
        let o = vec![0.0, 0.5, 1.0, 1.5];
        let style = StyleProfile {
            timing: -1,
            ..StyleProfile::identity()
        };
        let got = corrupt(&o, &style, 0).unwrap();
        assert_eq!(got.a, vec![0.5, 1.0, 1.5, 1.5]);
    }

    #[test]
    fn magnitude_scales_labels() {
        let o = vec![1.0, 1.0];
        let style = StyleProfile {
            magnitude: 2.0,
            ..StyleProfile::identity()
        };
        let got = corrupt(&o, &style, 0).unwrap();
        assert_eq!(got.a, vec![2.0, 2.0]);
    }

    #[test]
    fn oversized_shift_is_rejected() {
        let o = vec![1.0, 2.0, 3.0, 4.0];
        let style = StyleProfile {
            timing: 2,
            ..StyleProfile::identity()
        };
        assert!(matches!(
            corrupt(&o, &style, 0),
            Err(DemonstratorError::SequenceTooShort { .. })
        ));
    }

    #[test]
    fn weak_styles_never_saturate_in_range_labels() {
        for seed in 0..200u64 {
            let mut style = sample_style(seed);
            if style.magnitude > 1.0 {
                continue;
            }
            style.noise_sigma = 0.0;
            let o: Vec<f64> = (0..20)
                .map(|i| WHEEL_LIMIT * ((i as f64 * 0.7).sin()))
                .collect();
            let got = corrupt(&o, &style, seed).unwrap();
            for (t, &av) in got.a.iter().enumerate() {
                let src = (t as i64 - style.timing).clamp(0, o.len() as i64 - 1) as usize;
                assert_eq!(av, style.magnitude * o[src], "clip fired at step {t}");
            }
        }
    }

    #[test]
    fn labels_csv_round_trips() {
        let o = vec![0.1, -0.2, 0.3];
        let style = StyleProfile {
            magnitude: 1.5,
            ..StyleProfile::identity()
        };
        let mut seq = corrupt(&o, &style, 5).unwrap();
        seq.task_id = 7;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        seq.write_csv(&path).unwrap();
        let back = LabelSequence::read_csv(&path, seq.demonstrator_id, seq.task_id).unwrap();
        assert_eq!(back, seq);
    }

    #[test]
    fn manifest_round_trips() {
        let entries: Vec<ManifestEntry> = (0..4)
            .map(|i| {
                let mut s = sample_style(i);
                s.id = i as usize;
                ManifestEntry::new(&s, 1000 + i)
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demonstrators.json");
        save_manifest(&path, &entries).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), entries);
        assert_eq!(entries[2].style().id, 2);
    }
}
