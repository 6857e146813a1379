//! Independent reference computations checked against the library.

use partloc::dataset::{AnnotatedImage, PartDerivation, Split};
use partloc::detect::svm::{objective, train_samples};
use partloc::detect::{DetectorTrainConfig, Sample, SvmParams};
use partloc::eval::{cross_validate, CvInputs, SweepParam};
use partloc::featstore::gt_region_id;
use partloc::infer::{brute_force_over_roots, InferOptions, RootCandidate, ScoredRegions};
use partloc::pipeline::{extract_features, infer_image, train_detectors, ClassifyConfig, RootMode};
use partloc::priors::{fit_gmm, EmOptions, Layout, PriorConfig, PriorModel, PriorVariant};
use partloc::synth::{generate, SynthSpec};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Exact minimizer of `lambda/2 (|w|^2 + b^2) + mean hinge` by dual coordinate
/// descent on the bias-augmented problem. Returns the primal objective and
/// the duality gap.
fn dual_cd_reference(xs: &[Vec<f32>], ys: &[f64], lambda: f64) -> (f64, f64) {
    let n = xs.len();
    let aug: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| x.iter().map(|&v| f64::from(v)).chain([1.0]).collect())
        .collect();
    let dim = aug[0].len();
    let c = 1.0 / (lambda * n as f64);
    let mut alpha = vec![0.0; n];
    let mut w = vec![0.0; dim];
    let q: Vec<f64> = aug.iter().map(|x| x.iter().map(|v| v * v).sum()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..200_000 {
        order.shuffle(&mut rng);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &i in &order {
            let g = ys[i] * aug[i].iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == c {
                g.max(0.0)
            } else {
                g
            };
            lo = lo.min(pg);
            hi = hi.max(pg);
            if pg != 0.0 {
                let new = (alpha[i] - g / q[i]).clamp(0.0, c);
                let d = (new - alpha[i]) * ys[i];
                for (wj, xj) in w.iter_mut().zip(&aug[i]) {
                    *wj += d * xj;
                }
                alpha[i] = new;
            }
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    let ww: f64 = w.iter().map(|v| v * v).sum();
    let hinge: f64 = aug
        .iter()
        .zip(ys)
        .map(|(x, y)| (1.0 - y * x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()).max(0.0))
        .sum();
    let primal = 0.5 * ww + c * hinge;
    let dual = alpha.iter().sum::<f64>() - 0.5 * ww;
    // rescale to the mean-hinge objective
    (lambda * primal, lambda * (primal - dual))
}

#[test]
fn svm_objective_within_one_percent_of_exact_solve() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 6;
        let truth: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let noise = Normal::new(0.0, 0.5).unwrap();
        let xs: Vec<Vec<f32>> = (0..50)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| {
                let s: f64 = x.iter().zip(&truth).map(|(a, b)| f64::from(*a) * b).sum::<f64>() + 0.2;
                if s + noise.sample(&mut rng) >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect();
        let samples: Vec<Sample<'_>> = xs.iter().zip(&ys).map(|(x, &label)| Sample { x, label }).collect();
        let params = SvmParams {
            seed,
            ..SvmParams::default()
        };
        let fit = train_samples(&samples, &params).unwrap();
        let (reference, gap) = dual_cd_reference(&xs, &ys, params.lambda);
        assert!(gap <= 1e-6 * reference.max(1e-12), "reference not converged, gap {gap:e}");
        assert!(
            (fit.objective - objective(&fit.model, &samples, params.lambda)).abs() < 1e-12,
            "reported objective differs from the model's"
        );
        assert!(fit.objective >= reference - 1e-9, "below the exact optimum");
        let rel = (fit.objective - reference) / reference;
        assert!(rel <= 0.01, "seed {seed}: objective {} vs exact {reference} ({:.3}%)", fit.objective, rel * 100.0);
    }
}

#[test]
fn mixture_density_integrates_to_one() {
    let means: [Layout; 4] = [
        [0.0, 0.0, -1.0, -1.0],
        [0.5, -0.3, -0.6, -1.2],
        [-0.4, 0.4, -1.4, -0.5],
        [0.3, 0.5, -0.2, -0.9],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let normal = Normal::new(0.0, 0.12).unwrap();
    let mut samples = Vec::new();
    for m in &means {
        for _ in 0..500 {
            samples.push([0, 1, 2, 3].map(|d| m[d] + normal.sample(&mut rng)));
        }
    }
    let gmm = fit_gmm(&samples, 4, 0, &EmOptions::default()).unwrap().prior;

    // bounding region: component means padded by six standard deviations
    let mut lo = [f64::INFINITY; 4];
    let mut hi = [f64::NEG_INFINITY; 4];
    for c in &gmm.components {
        for d in 0..4 {
            let pad = 6.0 * c.var[d].sqrt();
            lo[d] = lo[d].min(c.mean[d] - pad);
            hi[d] = hi[d].max(c.mean[d] + pad);
        }
    }
    let volume: f64 = (0..4).map(|d| hi[d] - lo[d]).product();
    let n = 1_000_000;
    let mut sum = 0.0;
    for _ in 0..n {
        let u = [0, 1, 2, 3].map(|d| rng.random_range(lo[d]..hi[d]));
        sum += gmm.log_pdf(&u).exp();
    }
    let integral = volume * sum / n as f64;
    assert!((integral - 1.0).abs() < 0.05, "integral {integral}");
}

fn small_spec() -> SynthSpec {
    SynthSpec {
        n_classes: 3,
        n_train_per_class: 10,
        n_test_per_class: 4,
        n_distractors: 10,
        ..SynthSpec::default()
    }
}

#[test]
fn bbox_given_matches_brute_force_on_the_annotated_root() {
    let out = generate(&small_spec(), 3).unwrap();
    let rule = PartDerivation::default();
    let features = extract_features(&out.dataset, &out.part_specs, &rule, &out.proposals, |r| {
        Ok(out.image(r.image_id).unwrap().clone())
    })
    .unwrap();
    let dets =
        train_detectors(&out.dataset, &out.part_specs, &rule, &out.proposals, &features, &DetectorTrainConfig::default())
            .unwrap();
    for variant in [PriorVariant::Null, PriorVariant::Box, PriorVariant::Mg, PriorVariant::Np] {
        let prior = partloc::pipeline::fit_prior(
            &out.dataset,
            &out.part_specs,
            &rule,
            &features,
            PriorConfig::with_variant(variant),
        )
        .unwrap();
        for rec in out.dataset.split(Split::Test) {
            let got = infer_image(
                rec,
                &out.proposals,
                &dets,
                &prior,
                &features,
                &InferOptions::default(),
                RootMode::Given,
            )
            .unwrap();
            let sr = ScoredRegions::compute(
                rec.image_id,
                out.proposals[&rec.image_id].regions.clone(),
                &dets,
                &features.detector,
            )
            .unwrap();
            let gt = gt_region_id(0);
            let root = RootCandidate {
                region_id: gt,
                bbox: rec.object_box,
                margin: dets[0].margin(features.detector.get(rec.image_id, gt).unwrap()).unwrap(),
            };
            let app = features.appearance.get(rec.image_id, gt).unwrap();
            let conditioned = prior.condition(Some(app)).unwrap();
            let want = brute_force_over_roots(&sr, &conditioned, &[root]).unwrap();
            assert_eq!(got, want, "{variant:?} image {}", rec.image_id);
            assert_eq!(got.root.bbox, rec.object_box);
        }
    }
}

#[test]
fn alpha_zero_cross_validation_reproduces_box() {
    let out = generate(&small_spec(), 4).unwrap();
    let rule = PartDerivation::default();
    let features = extract_features(&out.dataset, &out.part_specs, &rule, &out.proposals, |r| {
        Ok(out.image(r.image_id).unwrap().clone())
    })
    .unwrap();
    let det = DetectorTrainConfig::default();
    let inputs = |variant| CvInputs {
        dataset: &out.dataset,
        specs: &out.part_specs,
        derivation: &rule,
        proposals: &out.proposals,
        features: &features,
        detector: &det,
        prior: PriorConfig::with_variant(variant),
        infer: InferOptions::default(),
        classify: ClassifyConfig::default(),
    };
    let boxed = cross_validate(&inputs(PriorVariant::Box), SweepParam::Alpha, &[0.1], 3, 1).unwrap();
    for v in [PriorVariant::Mg, PriorVariant::Np] {
        let flat = cross_validate(&inputs(v), SweepParam::Alpha, &[0.0], 3, 1).unwrap();
        assert_eq!(flat.len(), 1);
        assert_eq!(flat[0].fold_accuracy, boxed[0].fold_accuracy, "{v:?}");
        assert_eq!(flat[0].mean_accuracy, boxed[0].mean_accuracy);
    }
    let train: Vec<&AnnotatedImage> = out.dataset.split(Split::Train).collect();
    assert_eq!(train.len(), 30);
}

#[test]
fn np_prior_saved_and_loaded_conditions_identically() {
    let out = generate(&small_spec(), 6).unwrap();
    let rule = PartDerivation::default();
    let features = extract_features(&out.dataset, &out.part_specs, &rule, &out.proposals, |r| {
        Ok(out.image(r.image_id).unwrap().clone())
    })
    .unwrap();
    let prior = partloc::pipeline::fit_prior(&out.dataset, &out.part_specs, &rule, &features, PriorConfig::default())
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    features.appearance.save(&dir.path().join("app.pgfs")).unwrap();
    prior.save(&dir.path().join("np.json"), Some("app.pgfs")).unwrap();
    let back = PriorModel::load(&dir.path().join("np.json")).unwrap();
    assert_eq!(back, prior);
    let q = features.appearance.get(out.dataset.images[0].image_id, gt_region_id(0)).unwrap();
    assert_eq!(back.condition(Some(q)).unwrap(), prior.condition(Some(q)).unwrap());
}
