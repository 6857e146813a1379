//! Linear SVM trained by epoch-based stochastic subgradient descent
//! (Pegasos step schedule).
//!
//! Minimizes
//!
//! ```text
//! F(w, b) = lambda/2 * (|w|^2 + b^2) + 1/n * sum_i max(0, 1 - y_i (w.x_i + b))
//! ```
//!
//! which is `(1/2 |w|^2 + C sum hinge) * lambda` with `C = 1 / (lambda n)`.
//! The bias is learned as the weight of a constant feature.
//!
//! After every epoch the objective is evaluated at the current iterate and at
//! the epoch's iterate average; the best point seen so far is retained, so
//! the reported objective sequence never increases.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmParams {
    pub lambda: f64,
    pub epochs: usize,
    /// Lower bound on total update steps; small sets run extra epochs.
    pub min_steps: usize,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            epochs: 40,
            min_steps: 50_000,
            seed: 0,
        }
    }
}

impl SvmParams {
    /// The equivalent `C` of the `1/2 |w|^2 + C sum hinge` form.
    pub fn c_for(&self, n: usize) -> f64 {
        1.0 / (self.lambda * n as f64)
    }

    /// Epochs run on `n` samples.
    pub fn epochs_for(&self, n: usize) -> usize {
        self.epochs.max(self.min_steps.div_ceil(n.max(1)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LinearModel {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w: vec![0.0; dim],
            b: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    #[inline]
    pub fn margin(&self, x: &[f32]) -> f64 {
        dot(&self.w, x) + self.b
    }
}

#[inline]
pub(crate) fn dot(w: &[f64], x: &[f32]) -> f64 {
    w.iter().zip(x).map(|(a, &b)| a * b as f64).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmFit {
    pub model: LinearModel,
    /// Objective of the returned model.
    pub objective: f64,
    /// Best objective after each epoch (non-increasing).
    pub history: Vec<f64>,
    pub n_samples: usize,
}

/// A labeled sample, `label` is `+1.0` or `-1.0`.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub x: &'a [f32],
    pub label: f64,
}

pub fn objective(model: &LinearModel, samples: &[Sample<'_>], lambda: f64) -> f64 {
    let reg = model.w.iter().map(|v| v * v).sum::<f64>() + model.b * model.b;
    let loss: f64 = samples
        .iter()
        .map(|s| (1.0 - s.label * model.margin(s.x)).max(0.0))
        .sum();
    0.5 * lambda * reg + loss / samples.len() as f64
}

/// Trains on explicit positives and negatives.
pub fn train_linear_svm(positives: &[&[f32]], negatives: &[&[f32]], params: &SvmParams) -> Result<SvmFit> {
    if positives.is_empty() {
        return Err(Error::EmptyClass("positive"));
    }
    if negatives.is_empty() {
        return Err(Error::EmptyClass("negative"));
    }
    let samples: Vec<Sample<'_>> = positives
        .iter()
        .map(|x| Sample { x, label: 1.0 })
        .chain(negatives.iter().map(|x| Sample { x, label: -1.0 }))
        .collect();
    train_samples(&samples, params)
}

pub fn train_samples(samples: &[Sample<'_>], params: &SvmParams) -> Result<SvmFit> {
    if samples.is_empty() {
        return Err(Error::EmptyClass("any"));
    }
    if !(params.lambda > 0.0) {
        return Err(Error::InvalidArgument("lambda must be positive".into()));
    }
    let dim = samples[0].x.len();
    if let Some(s) = samples.iter().find(|s| s.x.len() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            actual: s.x.len(),
        });
    }
    let n = samples.len();
    let lambda = params.lambda;
    let radius = 1.0 / lambda.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut order: Vec<usize> = (0..n).collect();

    // w = scale * v, with the bias as component `dim`
    let mut v = vec![0f64; dim + 1];
    let mut scale = 1.0f64;
    let mut sq_norm = 0.0f64; // |v|^2
    let mut avg = vec![0f64; dim + 1];

    let mut best = LinearModel::zeros(dim);
    let mut best_obj = objective(&best, samples, lambda);
    let epochs = params.epochs_for(n);
    let mut history = Vec::with_capacity(epochs);
    let mut t: u64 = 0;

    for _ in 0..epochs {
        order.shuffle(&mut rng);
        avg.iter_mut().for_each(|a| *a = 0.0);
        for &i in &order {
            t += 1;
            let s = samples[i];
            let eta = 1.0 / (lambda * t as f64);
            let m = s.label * scale * (dot(&v[..dim], s.x) + v[dim]);
            let shrink = 1.0 - eta * lambda;
            if shrink <= 0.0 {
                v.iter_mut().for_each(|x| *x = 0.0);
                scale = 1.0;
                sq_norm = 0.0;
            } else {
                scale *= shrink;
            }
            if m < 1.0 {
                let step = eta * s.label / scale;
                let mut cross = 0.0;
                for (vj, &xj) in v[..dim].iter_mut().zip(s.x) {
                    cross += *vj * xj as f64;
                    *vj += step * xj as f64;
                }
                cross += v[dim];
                v[dim] += step;
                let xx: f64 = s.x.iter().map(|&x| x as f64 * x as f64).sum::<f64>() + 1.0;
                // |v + step x|^2 with v the pre-update value
                sq_norm = (sq_norm + 2.0 * step * cross + step * step * xx).max(0.0);
            }
            let norm = scale * sq_norm.sqrt();
            if norm > radius {
                scale *= radius / norm;
            }
            if !(1e-100..=1e100).contains(&scale) {
                v.iter_mut().for_each(|x| *x *= scale);
                sq_norm *= scale * scale;
                scale = 1.0;
            }
            for (a, x) in avg.iter_mut().zip(&v) {
                *a += scale * x;
            }
        }
        sq_norm = v.iter().map(|x| x * x).sum();
        let current = LinearModel {
            w: v[..dim].iter().map(|x| x * scale).collect(),
            b: v[dim] * scale,
        };
        let averaged = LinearModel {
            w: avg[..dim].iter().map(|x| x / n as f64).collect(),
            b: avg[dim] / n as f64,
        };
        for cand in [current, averaged] {
            let obj = objective(&cand, samples, lambda);
            if obj < best_obj {
                best_obj = obj;
                best = cand;
            }
        }
        history.push(best_obj);
    }

    Ok(SvmFit {
        model: best,
        objective: best_obj,
        history,
        n_samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_2d() {
        let p = [1.0f32, 0.0];
        let q = [-1.0f32, 0.0];
        let fit = train_linear_svm(&[&p], &[&q], &SvmParams {
            lambda: 0.01,
            ..Default::default()
        })
        .unwrap();
        assert!(fit.model.margin(&p) > 0.0);
        assert!(fit.model.margin(&q) < 0.0);
        assert!(fit.model.w[0] > 0.0);
        assert!(fit.model.w[0].abs() > 10.0 * fit.model.w[1].abs());
    }

    #[test]
    fn conflicting_labels_terminate() {
        let p = [0.5f32, 0.5];
        let fit = train_linear_svm(&[&p], &[&p], &SvmParams::default()).unwrap();
        let correct = [fit.model.margin(&p) > 0.0, fit.model.margin(&p) <= 0.0]
            .iter()
            .filter(|&&c| c)
            .count();
        assert!(correct as f64 / 2.0 <= 0.5);
        assert!(fit.objective.is_finite());
    }

    #[test]
    fn empty_class_rejected() {
        let p = [1.0f32];
        assert!(matches!(train_linear_svm(&[], &[&p], &SvmParams::default()), Err(Error::EmptyClass(_))));
        assert!(matches!(train_linear_svm(&[&p], &[], &SvmParams::default()), Err(Error::EmptyClass(_))));
    }

    #[test]
    fn history_non_increasing_and_reproducible() {
        let xs: Vec<Vec<f32>> = (0..60)
            .map(|i| {
                let a = (i as f32 * 0.37).sin();
                let b = (i as f32 * 0.91).cos();
                vec![a, b, a * b]
            })
            .collect();
        let (pos, neg): (Vec<&[f32]>, Vec<&[f32]>) = xs
            .iter()
            .map(Vec::as_slice)
            .partition(|x| x[0] + 0.3 * x[1] > 0.1);
        let params = SvmParams {
            lambda: 0.01,
            epochs: 30,
            min_steps: 0,
            seed: 7,
        };
        let a = train_linear_svm(&pos, &neg, &params).unwrap();
        for w in a.history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let b = train_linear_svm(&pos, &neg, &params).unwrap();
        assert_eq!(a, b);
    }
}
