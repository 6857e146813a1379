//! End-to-end stages shared by the command-line tool and the test suites.
//!
//! Every stage iterates images in ascending id order and merges per-image
//! results in that order, so outputs do not depend on the thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{build_feature, build_from_regions, train_classifier, Classifier, FeatureOptions};
use crate::dataset::{ground_truth_parts, AnnotatedImage, Dataset, PartDerivation, PartSpec, Split};
use crate::detect::svm::SvmParams;
use crate::detect::{label_regions, train_detector, Detector, DetectorTrainConfig, RegionLabel};
use crate::error::{Error, Result};
use crate::featstore::{gt_region_id, Features, GrayImage};
use crate::geometry::BBox;
use crate::infer::{infer_configuration, infer_over_roots, Configuration, InferOptions, RootCandidate, ScoredRegions};
use crate::priors::{LayoutSample, PriorConfig, PriorModel};
use crate::proposals::ProposalMap;
use crate::synth::SynthSpec;

/// Parameters of the built-in dense proposer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenseConfig {
    pub scales: Vec<f64>,
    pub aspects: Vec<f64>,
    pub stride_fraction: f64,
}

impl Default for DenseConfig {
    fn default() -> Self {
        Self {
            scales: vec![32.0, 64.0, 128.0],
            aspects: vec![0.5, 1.0, 2.0],
            stride_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyConfig {
    pub svm: SvmParams,
    pub features: FeatureOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub overlap: f64,
    pub recall_thresholds: Vec<f64>,
    pub folds: usize,
    pub alpha_grid: Vec<f64>,
    pub k_grid: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            overlap: 0.5,
            recall_thresholds: vec![0.5, 0.6, 0.7],
            folds: 5,
            alpha_grid: vec![0.0, 0.05, 0.1, 0.2, 0.5, 1.0],
            k_grid: vec![1, 5, 10, 20, 40],
        }
    }
}

/// The single configuration file, one section per module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub jobs: usize,
    pub derivation: PartDerivation,
    pub detector: DetectorTrainConfig,
    pub prior: PriorConfig,
    pub infer: InferOptions,
    pub classify: ClassifyConfig,
    pub eval: EvalConfig,
    pub dense: DenseConfig,
    pub synth: SynthSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 1,
            derivation: PartDerivation::default(),
            detector: DetectorTrainConfig::default(),
            prior: PriorConfig::default(),
            infer: InferOptions::default(),
            classify: ClassifyConfig::default(),
            eval: EvalConfig::default(),
            dense: DenseConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl PipelineConfig {
    /// Propagates the top-level seed into every seeded stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.detector.svm.seed = seed;
        self.prior.seed = seed;
        self.classify.svm.seed = seed;
        self
    }
}

/// Runs `f` on a pool with `jobs` threads (0 = rayon default).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Ground-truth boxes per image, indexed by part id.
pub fn ground_truth(dataset: &Dataset, specs: &[PartSpec], rule: &PartDerivation) -> BTreeMap<u64, Vec<Option<BBox>>> {
    dataset
        .images
        .iter()
        .map(|r| (r.image_id, ground_truth_parts(r, specs, rule)))
        .collect()
}

/// Extracts both channels for every proposal and every ground-truth window.
pub fn extract_features<L>(
    dataset: &Dataset,
    specs: &[PartSpec],
    rule: &PartDerivation,
    proposals: &ProposalMap,
    load: L,
) -> Result<Features>
where
    L: Fn(&AnnotatedImage) -> Result<GrayImage> + Sync,
{
    let per_image: Vec<Result<Features>> = dataset
        .images
        .par_iter()
        .map(|rec| {
            let image = load(rec)?;
            let mut f = Features::new();
            for (p, b) in ground_truth_parts(rec, specs, rule).iter().enumerate() {
                if let Some(b) = b {
                    f.extract_into(&image, rec.image_id, gt_region_id(p), b)?;
                }
            }
            if let Some(set) = proposals.get(&rec.image_id) {
                for r in &set.regions {
                    f.extract_into(&image, rec.image_id, r.region_id, &r.bbox)?;
                }
            }
            Ok(f)
        })
        .collect();
    let mut out = Features::new();
    for f in per_image {
        let f = f?;
        out.detector.merge(f.detector)?;
        out.appearance.merge(f.appearance)?;
    }
    Ok(out)
}

/// Trains one detector per part on the training split.
///
/// Positives are the ground-truth windows plus proposals labeled positive;
/// negatives are proposals labeled negative.
pub fn train_detectors(
    dataset: &Dataset,
    specs: &[PartSpec],
    rule: &PartDerivation,
    proposals: &ProposalMap,
    features: &Features,
    cfg: &DetectorTrainConfig,
) -> Result<Vec<Detector>> {
    let train: Vec<&AnnotatedImage> = dataset.split(Split::Train).collect();
    let gt: Vec<Vec<Option<BBox>>> = train.iter().map(|r| ground_truth_parts(r, specs, rule)).collect();
    specs
        .par_iter()
        .map(|spec| {
            let p = spec.part_id;
            let mut pos: Vec<&[f32]> = Vec::new();
            let mut neg: Vec<&[f32]> = Vec::new();
            for (rec, boxes) in train.iter().zip(&gt) {
                let all: Vec<BBox> = boxes.iter().flatten().copied().collect();
                let mine: Vec<BBox> = boxes[p].iter().copied().collect();
                if boxes[p].is_some() {
                    pos.push(features.detector.get(rec.image_id, gt_region_id(p))?);
                }
                let Some(set) = proposals.get(&rec.image_id) else { continue };
                let regions: Vec<BBox> = set.regions.iter().map(|r| r.bbox).collect();
                for (r, label) in set.regions.iter().zip(label_regions(&regions, &mine, &all, &cfg.label_rule)) {
                    match label {
                        RegionLabel::Positive => pos.push(features.detector.get(rec.image_id, r.region_id)?),
                        RegionLabel::Negative => neg.push(features.detector.get(rec.image_id, r.region_id)?),
                        RegionLabel::Ignore => {}
                    }
                }
            }
            let mut c = *cfg;
            c.svm.seed = cfg.svm.seed.wrapping_add(p as u64);
            train_detector(p, &pos, &neg, &c)
        })
        .collect()
}

/// Layout samples from the training split's ground truth.
pub fn layout_samples(dataset: &Dataset, specs: &[PartSpec], rule: &PartDerivation) -> Vec<LayoutSample> {
    dataset
        .split(Split::Train)
        .map(|r| {
            let gt = ground_truth_parts(r, specs, rule);
            LayoutSample {
                image_id: r.image_id,
                root: r.object_box,
                parts: gt[1..].to_vec(),
            }
        })
        .collect()
}

pub fn fit_prior(
    dataset: &Dataset,
    specs: &[PartSpec],
    rule: &PartDerivation,
    features: &Features,
    config: PriorConfig,
) -> Result<PriorModel> {
    let names = specs[1..].iter().map(|s| s.name.clone()).collect();
    PriorModel::fit(config, names, &layout_samples(dataset, specs, rule), Some(&features.appearance))
}

/// Which object window inference may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RootMode {
    /// Search over the proposals.
    Unknown,
    /// Fix the object window to the annotated box.
    Given,
}

/// Infers one image.
///
/// With an unknown box the prior is conditioned on the top-scoring root
/// proposal; with a given box, on the annotated window.
pub fn infer_image(
    rec: &AnnotatedImage,
    proposals: &ProposalMap,
    detectors: &[Detector],
    prior: &PriorModel,
    features: &Features,
    opts: &InferOptions,
    mode: RootMode,
) -> Result<Configuration> {
    let set = proposals.get(&rec.image_id).ok_or(Error::NoProposals(rec.image_id))?;
    let sr = ScoredRegions::compute(rec.image_id, set.regions.clone(), detectors, &features.detector)?;
    let needs_app = prior.config.variant == crate::priors::PriorVariant::Np;
    match mode {
        RootMode::Unknown => {
            let top = sr.top_root().ok_or(Error::NoProposals(rec.image_id))?;
            let app = if needs_app {
                Some(features.appearance.get(rec.image_id, sr.regions[top].region_id)?)
            } else {
                None
            };
            infer_configuration(&sr, &prior.condition(app)?, opts)
        }
        RootMode::Given => {
            let id = gt_region_id(0);
            let root = RootCandidate {
                region_id: id,
                bbox: rec.object_box,
                margin: detectors[0].margin(features.detector.get(rec.image_id, id)?)?,
            };
            let app = if needs_app {
                Some(features.appearance.get(rec.image_id, id)?)
            } else {
                None
            };
            infer_over_roots(&sr, &prior.condition(app)?, &[root])
        }
    }
}

/// Infers every image of `split` (all images if `None`), in id order.
pub fn infer_all(
    dataset: &Dataset,
    split: Option<Split>,
    proposals: &ProposalMap,
    detectors: &[Detector],
    prior: &PriorModel,
    features: &Features,
    opts: &InferOptions,
    mode: RootMode,
) -> Result<Vec<Configuration>> {
    let recs: Vec<&AnnotatedImage> = dataset
        .images
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .collect();
    recs.par_iter()
        .map(|r| infer_image(r, proposals, detectors, prior, features, opts, mode))
        .collect()
}

/// Region ids of the ground-truth windows, `None` where a part is absent.
pub fn oracle_regions(gt: &[Option<BBox>]) -> Vec<Option<u32>> {
    gt.iter().enumerate().map(|(p, b)| b.map(|_| gt_region_id(p))).collect()
}

/// Pose-normalized features from ground-truth windows; `root_only` drops
/// the part blocks.
pub fn oracle_features(
    recs: &[&AnnotatedImage],
    specs: &[PartSpec],
    rule: &PartDerivation,
    features: &Features,
    opts: &FeatureOptions,
    root_only: bool,
) -> Result<Vec<Vec<f32>>> {
    recs.iter()
        .map(|r| {
            let mut regions = oracle_regions(&ground_truth_parts(r, specs, rule));
            if root_only {
                regions.truncate(1);
            }
            Ok(build_from_regions(r.image_id, &regions, &features.detector, opts)?.values)
        })
        .collect()
}

pub fn configuration_features(
    configs: &[Configuration],
    features: &Features,
    opts: &FeatureOptions,
    root_only: bool,
) -> Result<Vec<Vec<f32>>> {
    configs
        .iter()
        .map(|c| {
            if root_only {
                Ok(build_from_regions(c.image_id, &[Some(c.root.region_id)], &features.detector, opts)?.values)
            } else {
                Ok(build_feature(c, &features.detector, opts)?.values)
            }
        })
        .collect()
}

/// Trains the classifier on ground-truth windows of the given images.
pub fn train_classifier_on_gt(
    recs: &[&AnnotatedImage],
    specs: &[PartSpec],
    rule: &PartDerivation,
    features: &Features,
    cfg: &ClassifyConfig,
    root_only: bool,
) -> Result<Classifier> {
    let xs = oracle_features(recs, specs, rule, features, &cfg.features, root_only)?;
    let refs: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
    let labels: Vec<u32> = recs.iter().map(|r| r.label).collect();
    train_classifier(&refs, &labels, &cfg.svm, cfg.features)
}

/// Predicted class per image id.
pub fn predict_all(clf: &Classifier, ids: &[u64], xs: &[Vec<f32>]) -> Result<BTreeMap<u64, crate::classify::Prediction>> {
    ids.iter()
        .zip(xs)
        .map(|(&id, x)| Ok((id, clf.predict(x)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate;

    #[test]
    fn config_json_defaults_and_seed() {
        let c: PipelineConfig = serde_json::from_str(r#"{"prior": {"variant": "box"}}"#).unwrap();
        assert_eq!(c.prior.variant, crate::priors::PriorVariant::Box);
        assert_eq!(c.prior.k, 20);
        let s = c.with_seed(5);
        assert_eq!((s.detector.svm.seed, s.prior.seed, s.classify.svm.seed), (5, 5, 5));
        let back: PipelineConfig = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn tiny_pipeline_runs_and_is_thread_count_independent() {
        let spec = SynthSpec {
            n_classes: 2,
            n_train_per_class: 4,
            n_test_per_class: 2,
            width: 128,
            height: 128,
            root_size: 64.0,
            n_distractors: 4,
            ..SynthSpec::default()
        };
        let out = generate(&spec, 3).unwrap();
        let rule = PartDerivation::default();
        let run = |jobs| {
            with_jobs(jobs, || -> Result<Vec<Configuration>> {
                let feats = extract_features(&out.dataset, &out.part_specs, &rule, &out.proposals, |r| {
                    Ok(out.image(r.image_id).unwrap().clone())
                })?;
                let dets = train_detectors(
                    &out.dataset,
                    &out.part_specs,
                    &rule,
                    &out.proposals,
                    &feats,
                    &DetectorTrainConfig::default(),
                )?;
                let prior = fit_prior(&out.dataset, &out.part_specs, &rule, &feats, PriorConfig::default())?;
                infer_all(
                    &out.dataset,
                    Some(Split::Test),
                    &out.proposals,
                    &dets,
                    &prior,
                    &feats,
                    &InferOptions::default(),
                    RootMode::Unknown,
                )
            })
            .unwrap()
            .unwrap()
        };
        let a = run(1);
        assert_eq!(a.len(), 4);
        assert_eq!(a, run(4));
    }
}
