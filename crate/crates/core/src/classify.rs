//! Pose-normalized representation and one-vs-all linear classification.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::svm::{dot, train_samples, Sample, SvmParams};
use crate::error::{Error, Result};
use crate::featstore::FeatureStore;
use crate::infer::Configuration;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureOptions {
    /// Re-normalize each block to unit L2 norm.
    pub block_l2: bool,
}

/// Concatenated `[phi(x_0), phi(x_1), ..., phi(x_n)]`; absent parts are zero
/// blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseNormalizedFeature {
    pub values: Vec<f32>,
    pub presence: Vec<bool>,
    pub block_dim: usize,
}

impl PoseNormalizedFeature {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn block(&self, i: usize) -> &[f32] {
        &self.values[i * self.block_dim..(i + 1) * self.block_dim]
    }
}

/// Builds the feature from region ids, root first, `None` for absent parts.
pub fn build_from_regions(
    image_id: u64,
    regions: &[Option<u32>],
    store: &FeatureStore,
    opts: &FeatureOptions,
) -> Result<PoseNormalizedFeature> {
    let dim = store.channel().dim;
    let mut values = Vec::with_capacity(dim * regions.len());
    for r in regions {
        match r {
            Some(id) => {
                let phi = store.get(image_id, *id)?;
                let norm = phi.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
                if opts.block_l2 && norm > 0.0 {
                    values.extend(phi.iter().map(|v| (*v as f64 / norm) as f32));
                } else {
                    values.extend_from_slice(phi);
                }
            }
            None => values.extend(std::iter::repeat_n(0.0, dim)),
        }
    }
    Ok(PoseNormalizedFeature {
        values,
        presence: regions.iter().map(Option::is_some).collect(),
        block_dim: dim,
    })
}

pub fn build_feature(
    config: &Configuration,
    store: &FeatureStore,
    opts: &FeatureOptions,
) -> Result<PoseNormalizedFeature> {
    let regions: Vec<Option<u32>> = std::iter::once(Some(config.root.region_id))
        .chain(config.parts.iter().map(|p| p.map(|c| c.region_id)))
        .collect();
    build_from_regions(config.image_id, &regions, store, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassModel {
    pub class: u32,
    pub w: Vec<f64>,
    pub b: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub dim: usize,
    /// Sorted by class id.
    pub classes: Vec<ClassModel>,
    pub svm: SvmParams,
    pub feature_options: FeatureOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: u32,
    /// In class-id order.
    pub margins: Vec<f64>,
}

impl Prediction {
    /// Largest and second largest margin (the second is `-inf` with one class).
    pub fn top2(&self) -> (f64, f64) {
        let mut s = self.margins.clone();
        s.sort_by(|a, b| b.total_cmp(a));
        (s[0], s.get(1).copied().unwrap_or(f64::NEG_INFINITY))
    }
}

/// One binary SVM per class, that class against all others.
pub fn train_classifier(
    features: &[&[f32]],
    labels: &[u32],
    svm: &SvmParams,
    feature_options: FeatureOptions,
) -> Result<Classifier> {
    if features.len() != labels.len() {
        return Err(Error::DimMismatch {
            expected: features.len(),
            actual: labels.len(),
        });
    }
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two classes, got {}",
            classes.len()
        )));
    }
    let dim = features[0].len();
    let mut models = Vec::with_capacity(classes.len());
    for (k, &c) in classes.iter().enumerate() {
        let samples: Vec<Sample<'_>> = features
            .iter()
            .zip(labels)
            .map(|(x, &l)| Sample {
                x,
                label: if l == c { 1.0 } else { -1.0 },
            })
            .collect();
        let params = SvmParams {
            seed: svm.seed.wrapping_add(k as u64),
            ..*svm
        };
        let fit = train_samples(&samples, &params)?;
        models.push(ClassModel {
            class: c,
            w: fit.model.w,
            b: fit.model.b,
            objective: fit.objective,
        });
    }
    Ok(Classifier {
        dim,
        classes: models,
        svm: *svm,
        feature_options,
    })
}

impl Classifier {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Argmax class; ties go to the lowest class id.
    pub fn predict(&self, x: &[f32]) -> Result<Prediction> {
        if x.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        let margins: Vec<f64> = self
            .classes
            .iter()
            .map(|m| dot(&m.w, x) + m.b)
            .collect();
        let mut best = 0;
        for (i, m) in margins.iter().enumerate().skip(1) {
            if *m > margins[best] {
                best = i;
            }
        }
        Ok(Prediction {
            class: self.classes[best].class,
            margins,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_str(&s)?;
        if c.classes.iter().any(|m| m.w.len() != c.dim) {
            return Err(Error::BadStore(format!("{}: weight dims disagree", path.display())));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub image_id: u64,
    pub predicted: u32,
    pub actual: u32,
    pub margin_top1: f64,
    pub margin_top2: f64,
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featstore::FeatureChannel;
    use crate::geometry::BBox;
    use crate::infer::PartChoice;

    fn store() -> FeatureStore {
        let mut s = FeatureStore::new(FeatureChannel {
            name: "detector".into(),
            dim: 3,
        });
        s.put(1, 0, vec![1.0, 2.0, 2.0]).unwrap();
        s.put(1, 5, vec![0.0, 3.0, 4.0]).unwrap();
        s
    }

    fn choice(id: u32) -> PartChoice {
        PartChoice {
            region_id: id,
            bbox: BBox::new(0., 0., 1., 1.).unwrap(),
            score: 0.5,
        }
    }

    #[test]
    fn blocks_and_zero_fill() {
        let c = Configuration {
            image_id: 1,
            root: choice(0),
            parts: vec![None, Some(choice(5))],
            log_score: 0.0,
        };
        let f = build_feature(&c, &store(), &FeatureOptions::default()).unwrap();
        assert_eq!(f.dim(), 9);
        assert_eq!(f.block(0), &[1.0, 2.0, 2.0]);
        assert_eq!(f.block(1), &[0.0; 3]);
        assert_eq!(f.block(2), &[0.0, 3.0, 4.0]);
        assert_eq!(f.presence, vec![true, false, true]);

        let g = build_feature(&c, &store(), &FeatureOptions { block_l2: true }).unwrap();
        assert!((g.block(2)[2] - 0.8).abs() < 1e-7);

        let missing = Configuration {
            parts: vec![Some(choice(9)), None],
            ..c
        };
        assert!(matches!(
            build_feature(&missing, &store(), &FeatureOptions::default()),
            Err(Error::MissingFeature { .. })
        ));
    }

    #[test]
    fn separable_training_and_prediction() {
        let xs: Vec<Vec<f32>> = (0..40)
            .map(|i| {
                let c = i % 2;
                let j = (i / 2) as f32 * 0.01;
                if c == 0 {
                    vec![1.0 + j, 0.0, 0.2]
                } else {
                    vec![0.0, 1.0 - j, 0.2]
                }
            })
            .collect();
        let labels: Vec<u32> = (0..40).map(|i| 3 + (i % 2) as u32).collect();
        let refs: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
        let clf = train_classifier(&refs, &labels, &SvmParams::default(), FeatureOptions::default()).unwrap();
        let acc = refs
            .iter()
            .zip(&labels)
            .filter(|(x, l)| clf.predict(x).unwrap().class == **l)
            .count();
        assert_eq!(acc, 40);
        let p = clf.predict(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.margins.len(), 2);
        assert!(matches!(clf.predict(&[1.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn single_class_rejected() {
        let x = [1.0f32, 2.0];
        assert!(train_classifier(&[&x, &x], &[1, 1], &SvmParams::default(), FeatureOptions::default()).is_err());
    }

    #[test]
    fn ties_and_constant_shift() {
        let mut clf = Classifier {
            dim: 2,
            classes: vec![
                ClassModel { class: 0, w: vec![1.0, 0.0], b: 0.5, objective: 0.0 },
                ClassModel { class: 1, w: vec![0.0, 1.0], b: 0.5, objective: 0.0 },
                ClassModel { class: 2, w: vec![0.0, 0.0], b: 0.2, objective: 0.0 },
            ],
            svm: SvmParams::default(),
            feature_options: FeatureOptions::default(),
        };
        // zero feature: argmax of biases, tie to lowest id
        assert_eq!(clf.predict(&[0.0, 0.0]).unwrap().class, 0);
        let before = clf.predict(&[0.1, 0.7]).unwrap();
        clf.classes.iter_mut().for_each(|m| m.b += 3.0);
        let after = clf.predict(&[0.1, 0.7]).unwrap();
        assert_eq!(before.class, after.class);
        for (a, b) in before.margins.iter().zip(&after.margins) {
            assert!((b - a - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let xs = [[1.0f32, 0.0], [0.0, 1.0]];
        let refs: Vec<&[f32]> = xs.iter().map(|x| x.as_slice()).collect();
        let clf = train_classifier(&refs, &[0, 1], &SvmParams::default(), FeatureOptions::default()).unwrap();
        let p = dir.path().join("clf.json");
        clf.save(&p).unwrap();
        assert_eq!(Classifier::load(&p).unwrap(), clf);

        let rows = vec![PredictionRow {
            image_id: 7,
            predicted: 1,
            actual: 0,
            margin_top1: 0.25,
            margin_top2: -1.5,
        }];
        let q = dir.path().join("pred.csv");
        write_predictions(&q, &rows).unwrap();
        let text = std::fs::read_to_string(&q).unwrap();
        assert!(text.starts_with("image_id,predicted,actual,margin_top1,margin_top2\n"));
        assert_eq!(read_predictions(&q).unwrap(), rows);
    }
}
