use partloc::geometry::contains_within_slack;
use partloc::infer::{infer_configuration, InferOptions, ScoredRegions};
use partloc::priors::{DiagGaussian, ImagePrior, PartDensity, PriorConfig, PriorVariant};
use partloc::proposals::Proposal;
use partloc::BBox;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random proposals, about half nested inside earlier ones.
fn regions(rng: &mut ChaCha8Rng, n: usize) -> Vec<Proposal> {
    let mut out: Vec<Proposal> = Vec::with_capacity(n);
    for i in 0..n {
        let bbox = if i > 0 && rng.random_bool(0.5) {
            let o = out[rng.random_range(0..i)].bbox;
            let w = o.width() * rng.random_range(0.2..0.7);
            let h = o.height() * rng.random_range(0.2..0.7);
            BBox::from_xywh(
                rng.random_range(o.x_min() - 12.0..o.x_max() - w + 12.0),
                rng.random_range(o.y_min() - 12.0..o.y_max() - h + 12.0),
                w,
                h,
            )
            .unwrap()
        } else {
            let w = rng.random_range(10.0..150.0);
            let h = rng.random_range(10.0..150.0);
            BBox::from_xywh(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0), w, h).unwrap()
        };
        out.push(Proposal {
            region_id: (i as u32) * 2 + 5,
            bbox,
        });
    }
    out
}

fn scored(seed: u64, n: usize, n_parts: usize) -> ScoredRegions {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let regions = regions(&mut rng, n);
    let margins = (0..=n_parts)
        .map(|_| (0..n).map(|_| rng.random_range(-4.0..4.0)).collect())
        .collect();
    ScoredRegions {
        image_id: seed,
        regions,
        margins,
        tau: (0..=n_parts).map(|_| rng.random_range(0.2..0.6)).collect(),
    }
}

fn priors(n_parts: usize) -> Vec<ImagePrior> {
    let g = PartDensity::Gaussian(DiagGaussian {
        mean: [0.0, 0.1, -0.9, -0.9],
        var: [0.05, 0.05, 0.2, 0.2],
    });
    [PriorVariant::Null, PriorVariant::Box, PriorVariant::Mg, PriorVariant::Np]
        .into_iter()
        .map(|v| {
            let d = v.is_geometric().then(|| vec![g.clone(); n_parts]);
            ImagePrior::new(PriorConfig::with_variant(v), d).unwrap()
        })
        .collect()
}

/// Drops the last proposal.
fn without_last(sr: &ScoredRegions) -> ScoredRegions {
    let n = sr.regions.len() - 1;
    ScoredRegions {
        image_id: sr.image_id,
        regions: sr.regions[..n].to_vec(),
        margins: sr.margins.iter().map(|m| m[..n].to_vec()).collect(),
        tau: sr.tau.clone(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn adding_a_proposal_never_lowers_the_optimum(seed in any::<u64>(), n in 2usize..25, n_parts in 1usize..4) {
        let full = scored(seed, n, n_parts);
        let fewer = without_last(&full);
        for prior in priors(n_parts) {
            let a = infer_configuration(&full, &prior, &InferOptions::default()).unwrap();
            let b = infer_configuration(&fewer, &prior, &InferOptions::default()).unwrap();
            prop_assert!(a.log_score >= b.log_score, "{:?}: {} < {}", prior.config().variant, a.log_score, b.log_score);
        }
    }

    #[test]
    fn null_prior_picks_per_part_maxima(seed in any::<u64>(), n in 1usize..25, n_parts in 1usize..4) {
        let mut sr = scored(seed, n, n_parts);
        // every part has a window above its threshold
        for t in sr.tau.iter_mut() {
            *t = 0.01;
        }
        for m in sr.margins.iter_mut() {
            m[0] = m[0].max(0.0);
        }
        let prior = &priors(n_parts)[0];
        let c = infer_configuration(&sr, prior, &InferOptions::default()).unwrap();
        let argmax = |p: usize| {
            (0..n).max_by(|&a, &b| sr.margins[p][a].total_cmp(&sr.margins[p][b])).unwrap()
        };
        prop_assert_eq!(c.root.region_id, sr.regions[argmax(0)].region_id);
        for (i, part) in c.parts.iter().enumerate() {
            let part = part.expect("part present");
            prop_assert_eq!(part.region_id, sr.regions[argmax(i + 1)].region_id);
        }
    }

    #[test]
    fn containment_holds_and_scores_are_finite(seed in any::<u64>(), n in 1usize..25, n_parts in 1usize..4) {
        let sr = scored(seed, n, n_parts);
        for prior in priors(n_parts) {
            let c = infer_configuration(&sr, &prior, &InferOptions::default()).unwrap();
            prop_assert!(c.log_score.is_finite());
            let again = infer_configuration(&sr, &prior, &InferOptions::default()).unwrap();
            prop_assert_eq!(&c, &again);
            let all = InferOptions { top_m_roots: Some(n) };
            prop_assert_eq!(&c, &infer_configuration(&sr, &prior, &all).unwrap());
            if prior.config().variant != PriorVariant::Null {
                for p in c.parts.iter().flatten() {
                    prop_assert!(contains_within_slack(&c.root.bbox, &p.bbox, prior.config().epsilon));
                }
            }
            for (i, p) in c.parts.iter().enumerate() {
                if let Some(p) = p {
                    prop_assert!(p.score >= sr.tau[i + 1]);
                }
            }
        }
    }
}
