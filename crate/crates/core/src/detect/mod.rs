//! Per-part linear detectors: IoU-thresholded training labels, SVM training
//! with one hard-negative round, sigmoid scoring, and recall-calibrated
//! thresholds.

pub mod svm;

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featstore::DETECTOR_CHANNEL;
use crate::geometry::{iou, BBox};
pub use svm::{train_linear_svm, LinearModel, Sample, SvmFit, SvmParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingLabelRule {
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Default for TrainingLabelRule {
    fn default() -> Self {
        Self {
            pos_iou: 0.7,
            neg_iou: 0.3,
        }
    }
}

impl TrainingLabelRule {
    pub fn validate(&self) -> Result<()> {
        if 0.0 <= self.neg_iou && self.neg_iou < self.pos_iou && self.pos_iou <= 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "label rule needs 0 <= neg ({}) < pos ({}) <= 1",
                self.neg_iou, self.pos_iou
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionLabel {
    Positive,
    Negative,
    Ignore,
}

/// Labels each proposal for one part.
///
/// Positive when the IoU with some ground-truth box of this part reaches
/// `pos_iou`; negative when the IoU with every ground-truth region of the
/// image (any part, including the object) is at most `neg_iou`. The
/// ground-truth boxes themselves are added as extra positives by the
/// training-set builder, not here.
pub fn label_regions(
    proposals: &[BBox],
    gt_part: &[BBox],
    gt_all: &[BBox],
    rule: &TrainingLabelRule,
) -> Vec<RegionLabel> {
    proposals
        .iter()
        .map(|p| {
            if gt_part.iter().any(|g| iou(p, g) >= rule.pos_iou) {
                RegionLabel::Positive
            } else if gt_all.iter().all(|g| iou(p, g) <= rule.neg_iou) {
                RegionLabel::Negative
            } else {
                RegionLabel::Ignore
            }
        })
        .collect()
}

/// Numerically stable logistic function.
pub fn sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

/// `ln sigmoid(m)` without underflow for large negative margins.
pub fn log_sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        -(-m).exp().ln_1p()
    } else {
        m - m.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    #[serde(rename = "C")]
    pub c: f64,
    pub seed: u64,
    pub epochs: usize,
    pub lambda: f64,
    pub objective: f64,
    pub n_positive: usize,
    pub n_negative: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub part_id: usize,
    pub dim: usize,
    pub w: Vec<f64>,
    pub b: f64,
    pub tau: f64,
    pub channel: String,
    pub train_meta: TrainMeta,
}

impl Detector {
    pub fn margin(&self, phi: &[f32]) -> Result<f64> {
        if phi.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: phi.len(),
            });
        }
        Ok(svm::dot(&self.w, phi) + self.b)
    }

    /// `sigmoid(w.phi + b)`.
    pub fn score(&self, phi: &[f32]) -> Result<f64> {
        self.margin(phi).map(sigmoid)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let d: Detector = serde_json::from_str(&text)?;
        if d.w.len() != d.dim {
            return Err(Error::DimMismatch {
                expected: d.dim,
                actual: d.w.len(),
            });
        }
        if d.channel != DETECTOR_CHANNEL {
            return Err(Error::ChannelMismatch {
                expected: DETECTOR_CHANNEL.into(),
                actual: d.channel,
            });
        }
        Ok(d)
    }
}

/// Largest threshold such that the fraction of `scores` at or above it is at
/// least `target_recall`.
pub fn calibrate_threshold(scores: &[f64], target_recall: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyClass("validation positives"));
    }
    if !(target_recall > 0.0 && target_recall <= 1.0) {
        return Err(Error::InvalidArgument(format!("target recall {target_recall} not in (0, 1]")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    let k = (1..=n)
        .find(|&k| k as f64 / n as f64 >= target_recall)
        .unwrap_or(n);
    Ok(sorted[k - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub svm: SvmParams,
    pub label_rule: TrainingLabelRule,
    pub max_negatives: usize,
    pub hard_negative_rounds: usize,
    pub target_recall: f64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            svm: SvmParams::default(),
            label_rule: TrainingLabelRule::default(),
            max_negatives: 50_000,
            hard_negative_rounds: 1,
            target_recall: 0.95,
        }
    }
}

/// Trains one detector.
///
/// Negatives beyond `max_negatives` are subsampled with the seed. Each
/// hard-negative round rescores the full negative pool and retrains on the
/// positives plus the highest-scoring margin violators, topped up with the
/// previous working set up to the cap. The threshold is calibrated on the
/// training positives.
pub fn train_detector(
    part_id: usize,
    positives: &[&[f32]],
    negatives: &[&[f32]],
    cfg: &DetectorTrainConfig,
) -> Result<Detector> {
    if positives.is_empty() {
        return Err(Error::EmptyClass("positive"));
    }
    if negatives.is_empty() {
        return Err(Error::EmptyClass("negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.svm.seed ^ 0x9e37_79b9_7f4a_7c15);
    let cap = cfg.max_negatives.max(1);
    let mut working: Vec<usize> = if negatives.len() > cap {
        let mut idx = sample(&mut rng, negatives.len(), cap).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..negatives.len()).collect()
    };

    let fit_on = |idx: &[usize]| {
        let negs: Vec<&[f32]> = idx.iter().map(|&i| negatives[i]).collect();
        train_linear_svm(positives, &negs, &cfg.svm)
    };
    let mut fit = fit_on(&working)?;

    for _ in 0..cfg.hard_negative_rounds {
        let mut hard: Vec<(f64, usize)> = negatives
            .iter()
            .enumerate()
            .map(|(i, x)| (fit.model.margin(x), i))
            .filter(|(m, _)| *m > -1.0)
            .collect();
        hard.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut chosen: Vec<usize> = hard.iter().map(|&(_, i)| i).take(cap).collect();
        let mut in_set = vec![false; negatives.len()];
        chosen.iter().for_each(|&i| in_set[i] = true);
        for &i in &working {
            if chosen.len() >= cap {
                break;
            }
            if !in_set[i] {
                in_set[i] = true;
                chosen.push(i);
            }
        }
        chosen.sort_unstable();
        if chosen == working {
            break;
        }
        working = chosen;
        fit = fit_on(&working)?;
    }

    let scores: Vec<f64> = positives.iter().map(|x| sigmoid(fit.model.margin(x))).collect();
    let tau = calibrate_threshold(&scores, cfg.target_recall)?;
    Ok(Detector {
        part_id,
        dim: fit.model.dim(),
        w: fit.model.w,
        b: fit.model.b,
        tau,
        channel: DETECTOR_CHANNEL.into(),
        train_meta: TrainMeta {
            c: cfg.svm.c_for(fit.n_samples),
            seed: cfg.svm.seed,
            epochs: fit.history.len(),
            lambda: cfg.svm.lambda,
            objective: fit.objective,
            n_positive: positives.len(),
            n_negative: working.len(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn label_examples() {
        let gt = bb(0., 0., 10., 10.);
        let rule = TrainingLabelRule::default();
        let far = bb(50., 50., 60., 60.);
        let mid = bb(0., 0., 5., 10.);
        assert!((iou(&mid, &gt) - 0.5).abs() < 1e-12);
        let labels = label_regions(&[gt, far, mid], &[gt], &[gt], &rule);
        assert_eq!(labels, vec![RegionLabel::Positive, RegionLabel::Negative, RegionLabel::Ignore]);
    }

    #[test]
    fn negatives_consider_all_ground_truth() {
        let head = bb(0., 0., 10., 10.);
        let root = bb(40., 40., 100., 100.);
        let p = bb(40., 40., 100., 100.);
        let labels = label_regions(&[p], &[head], &[head, root], &TrainingLabelRule::default());
        assert_eq!(labels, vec![RegionLabel::Ignore]);
    }

    #[test]
    fn rule_validation() {
        assert!(TrainingLabelRule::default().validate().is_ok());
        assert!(TrainingLabelRule { pos_iou: 0.3, neg_iou: 0.3 }.validate().is_err());
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!((sigmoid(-(3f64.ln())) - 0.25).abs() < 1e-15);
        for m in [-800.0, -30.0, -1.0, 0.0, 2.0, 40.0] {
            assert!((sigmoid(-m) - (1.0 - sigmoid(m))).abs() < 1e-15);
            let direct = sigmoid(m).ln();
            if direct.is_finite() {
                assert!((log_sigmoid(m) - direct).abs() < 1e-12);
            }
        }
        assert!(log_sigmoid(-800.0).is_finite());
        assert!(sigmoid(1.0) < sigmoid(1.0 + 1e-9));
    }

    #[test]
    fn score_checks_dim() {
        let d = Detector {
            part_id: 0,
            dim: 2,
            w: vec![1.0, 0.0],
            b: 0.0,
            tau: 0.5,
            channel: DETECTOR_CHANNEL.into(),
            train_meta: TrainMeta {
                c: 1.0,
                seed: 0,
                epochs: 1,
                lambda: 1.0,
                objective: 0.0,
                n_positive: 1,
                n_negative: 1,
            },
        };
        assert!((d.score(&[3f32.ln(), 5.0]).unwrap() - 0.75).abs() < 1e-7);
        assert!(matches!(d.score(&[1.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn calibration_examples() {
        assert_eq!(calibrate_threshold(&[0.9, 0.3, 0.6], 1.0).unwrap(), 0.3);
        assert_eq!(calibrate_threshold(&[0.9, 0.8, 0.2], 0.66).unwrap(), 0.8);
        assert_eq!(calibrate_threshold(&[0.42], 0.95).unwrap(), 0.42);
        assert!(calibrate_threshold(&[], 0.9).is_err());
        assert!(calibrate_threshold(&[0.5], 0.0).is_err());
    }

    #[test]
    fn detector_training_separates_and_round_trips() {
        let pos: Vec<Vec<f32>> = (0..20).map(|i| vec![1.0, 0.1 * (i % 5) as f32, -0.5]).collect();
        let neg: Vec<Vec<f32>> = (0..80).map(|i| vec![-1.0 + 0.01 * i as f32, 0.3, 0.5]).collect();
        let pr: Vec<&[f32]> = pos.iter().map(Vec::as_slice).collect();
        let nr: Vec<&[f32]> = neg.iter().map(Vec::as_slice).collect();
        let cfg = DetectorTrainConfig {
            max_negatives: 30,
            ..Default::default()
        };
        let d = train_detector(1, &pr, &nr, &cfg).unwrap();
        assert!(pr.iter().all(|x| d.score(x).unwrap() > 0.5));
        assert!(nr.iter().all(|x| d.score(x).unwrap() < 0.5));
        assert!(d.tau > 0.5 && d.tau < 1.0);
        let again = train_detector(1, &pr, &nr, &cfg).unwrap();
        assert_eq!(d, again);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        d.save(&path).unwrap();
        assert_eq!(Detector::load(&path).unwrap(), d);
    }
}
