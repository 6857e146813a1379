//! Metrics and experiment protocols.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotatedImage, Dataset, PartDerivation, PartSpec, Split};
use crate::error::{Error, Result};
use crate::featstore::Features;
use crate::geometry::{iou, BBox};
use crate::infer::{Configuration, InferOptions};
use crate::pipeline::{
    configuration_features, fit_prior, infer_image, train_classifier_on_gt, train_detectors, ClassifyConfig,
    RootMode,
};
use crate::priors::PriorConfig;
use crate::proposals::{ProposalMap, RecallTable};

pub use crate::proposals::recall;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartPcp {
    pub part: String,
    pub correct: usize,
    pub total: usize,
    pub pcp: f64,
}

/// Percentage of correctly localized parts, per part (root included).
///
/// The denominator counts images whose ground-truth part is present; a
/// prediction is correct when it exists and overlaps with IoU at least
/// `overlap`.
pub fn pcp(
    predictions: &[Configuration],
    ground_truth: &BTreeMap<u64, Vec<Option<BBox>>>,
    names: &[String],
    overlap: f64,
) -> Result<Vec<PartPcp>> {
    if !(overlap > 0.0 && overlap <= 1.0) {
        return Err(Error::InvalidArgument(format!("overlap {overlap} outside (0, 1]")));
    }
    let mut correct = vec![0usize; names.len()];
    let mut total = vec![0usize; names.len()];
    for c in predictions {
        let gt = ground_truth
            .get(&c.image_id)
            .ok_or_else(|| Error::KeyMismatch(format!("no ground truth for image {}", c.image_id)))?;
        if gt.len() != names.len() {
            return Err(Error::DimMismatch {
                expected: names.len(),
                actual: gt.len(),
            });
        }
        for (p, g) in gt.iter().enumerate() {
            let Some(g) = g else { continue };
            total[p] += 1;
            if c.part_box(p).is_some_and(|b| iou(&b, g) >= overlap) {
                correct[p] += 1;
            }
        }
    }
    names
        .iter()
        .enumerate()
        .map(|(p, n)| {
            if total[p] == 0 {
                return Err(Error::EmptyGroundTruth(n.clone()));
            }
            Ok(PartPcp {
                part: n.clone(),
                correct: correct[p],
                total: total[p],
                pcp: correct[p] as f64 / total[p] as f64,
            })
        })
        .collect()
}

/// Fraction of images whose prediction equals the label.
pub fn accuracy(predictions: &BTreeMap<u64, u32>, labels: &BTreeMap<u64, u32>) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.keys().ne(labels.keys()) {
        return Err(Error::KeyMismatch(format!(
            "{} predictions vs {} labels with differing ids",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    let hits = predictions.iter().filter(|(k, v)| labels[k] == **v).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn write_pcp_csv(path: &Path, rows: &[PartPcp]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Recall table with one row per part and one column per threshold.
pub fn recall_csv(table: &RecallTable, names: &[String]) -> String {
    let mut out = String::from("part");
    let thresholds: Vec<f64> = table
        .values()
        .next()
        .map(|v| v.iter().map(|(t, _)| *t).collect())
        .unwrap_or_default();
    for t in &thresholds {
        let _ = write!(out, ",{t}");
    }
    out.push('\n');
    for n in names {
        if let Some(row) = table.get(n) {
            out.push_str(n);
            for (_, r) in row {
                let _ = write!(out, ",{r:.6}");
            }
            out.push('\n');
        }
    }
    out
}

/// Fold index per item, stratified by class.
///
/// Items of each class (in the given order) are shuffled with the seed and
/// dealt round-robin, the starting fold rotating from class to class so
/// that small classes do not pile into the first folds.
pub fn stratified_folds(labels: &[u32], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {folds}")));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0; labels.len()];
    let mut offset = 0;
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        for (j, &i) in idx.iter().enumerate() {
            out[i] = (offset + j) % folds;
        }
        offset = (offset + idx.len()) % folds;
    }
    Ok(out)
}

/// Which prior parameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Alpha,
    K,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::K => "k",
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "k" | "K" => Ok(Self::K),
            _ => Err(Error::InvalidArgument(format!("unknown sweep parameter {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean_accuracy: f64,
    pub fold_accuracy: Vec<f64>,
}

/// Everything a cross-validation run needs besides the grid.
pub struct CvInputs<'a> {
    pub dataset: &'a Dataset,
    pub specs: &'a [PartSpec],
    pub derivation: &'a PartDerivation,
    pub proposals: &'a ProposalMap,
    pub features: &'a Features,
    pub detector: &'a crate::detect::DetectorTrainConfig,
    pub prior: PriorConfig,
    pub infer: InferOptions,
    pub classify: ClassifyConfig,
}

/// k-fold cross-validation on the training split.
///
/// Per fold, detectors, prior and classifier (on ground-truth windows) are
/// trained on the remaining folds; each grid value then re-scores the
/// held-out fold with inferred configurations. With `K` swept, `alpha` stays
/// at its configured value and vice versa.
pub fn cross_validate(inputs: &CvInputs<'_>, param: SweepParam, grid: &[f64], folds: usize, seed: u64) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty grid".into()));
    }
    if param == SweepParam::K && grid.iter().any(|k| *k < 1.0 || k.fract() != 0.0) {
        return Err(Error::InvalidArgument("K grid must hold positive integers".into()));
    }
    let train: Vec<&AnnotatedImage> = inputs.dataset.split(Split::Train).collect();
    let labels: Vec<u32> = train.iter().map(|r| r.label).collect();
    let assign = stratified_folds(&labels, folds, seed)?;

    let mut acc = vec![vec![0.0; folds]; grid.len()];
    for f in 0..folds {
        let fit_recs: Vec<AnnotatedImage> = train
            .iter()
            .zip(&assign)
            .filter(|(_, a)| **a != f)
            .map(|(r, _)| (*r).clone())
            .collect();
        let held: Vec<&AnnotatedImage> = train
            .iter()
            .zip(&assign)
            .filter(|(_, a)| **a == f)
            .map(|(r, _)| *r)
            .collect();
        if held.is_empty() {
            return Err(Error::InvalidArgument(format!("fold {f} is empty")));
        }
        let fit_ds = Dataset::new(fit_recs);
        let fit_refs: Vec<&AnnotatedImage> = fit_ds.images.iter().collect();
        let detectors = train_detectors(
            &fit_ds,
            inputs.specs,
            inputs.derivation,
            inputs.proposals,
            inputs.features,
            inputs.detector,
        )?;
        let prior = fit_prior(&fit_ds, inputs.specs, inputs.derivation, inputs.features, inputs.prior)?;
        let clf = train_classifier_on_gt(
            &fit_refs,
            inputs.specs,
            inputs.derivation,
            inputs.features,
            &inputs.classify,
            false,
        )?;
        for (g, &v) in grid.iter().enumerate() {
            let model = match param {
                SweepParam::Alpha => prior.with_params(v, prior.config.k),
                SweepParam::K => prior.with_params(prior.config.alpha, v as usize),
            };
            let configs = held
                .iter()
                .map(|r| {
                    infer_image(
                        r,
                        inputs.proposals,
                        &detectors,
                        &model,
                        inputs.features,
                        &inputs.infer,
                        RootMode::Unknown,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let xs = configuration_features(&configs, inputs.features, &inputs.classify.features, false)?;
            let mut hits = 0;
            for (x, r) in xs.iter().zip(&held) {
                if clf.predict(x)?.class == r.label {
                    hits += 1;
                }
            }
            acc[g][f] = hits as f64 / held.len() as f64;
        }
    }
    Ok(grid
        .iter()
        .zip(acc)
        .map(|(&value, fold_accuracy)| SweepRow {
            value,
            mean_accuracy: fold_accuracy.iter().sum::<f64>() / folds as f64,
            fold_accuracy,
        })
        .collect())
}

/// `<param>,mean_accuracy,fold_1,...` rows.
pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let folds = rows.first().map_or(0, |r| r.fold_accuracy.len());
    let mut out = format!("{},mean_accuracy", param.name());
    for f in 1..=folds {
        let _ = write!(out, ",fold_{f}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{:.6}", r.value, r.mean_accuracy);
        for a in &r.fold_accuracy {
            let _ = write!(out, ",{a:.6}");
        }
        out.push('\n');
    }
    out
}

/// Static SVG line chart of mean accuracy against the swept value.
pub fn sweep_svg(param: SweepParam, rows: &[SweepRow]) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let xs: Vec<f64> = rows.iter().map(|r| r.value).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_accuracy).collect();
    let (x_lo, x_hi) = bounds(&xs);
    let (y_lo, y_hi) = bounds(&ys);
    let px = |x: f64| m + (x - x_lo) / (x_hi - x_lo) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y_lo) / (y_hi - y_lo) * (h - 2.0 * m);

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        h - m,
        w - m,
        h - m
    );
    let _ = writeln!(s, "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>", h - m);
    for (v, x) in [(x_lo, px(x_lo)), (x_hi, px(x_hi))] {
        let _ = writeln!(
            s,
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{v}</text>",
            h - m + 16.0
        );
    }
    for (v, y) in [(y_lo, py(y_lo)), (y_hi, py(y_hi))] {
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{y:.1}\" font-size=\"11\" text-anchor=\"end\">{v:.3}</text>",
            m - 6.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\">{}</text>",
        w / 2.0,
        h - 10.0,
        param.name()
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">mean accuracy</text>",
        h / 2.0,
        h / 2.0
    );
    let points: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.2},{:.2}", px(r.value), py(r.mean_accuracy)))
        .collect();
    let _ = writeln!(
        s,
        "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>",
        points.join(" ")
    );
    for r in rows {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"steelblue\"/>",
            px(r.value),
            py(r.mean_accuracy)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}
