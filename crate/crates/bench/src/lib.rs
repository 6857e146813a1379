//! Input builders shared by the benchmarks.

use partloc::detect::Sample;
use partloc::infer::ScoredRegions;
use partloc::priors::{DiagGaussian, ImagePrior, PartDensity, PriorConfig, PriorVariant};
use partloc::proposals::Proposal;
use partloc::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_boxes(n: usize, seed: u64) -> Vec<BBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let w = rng.random_range(8.0..200.0);
            let h = rng.random_range(8.0..200.0);
            BBox::from_xywh(rng.random_range(0.0..300.0), rng.random_range(0.0..300.0), w, h).unwrap()
        })
        .collect()
}

/// One image worth of scored proposals with `n_parts` non-root parts.
pub fn scored_regions(n: usize, n_parts: usize, seed: u64) -> ScoredRegions {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let regions: Vec<Proposal> = random_boxes(n, seed)
        .into_iter()
        .enumerate()
        .map(|(i, bbox)| Proposal {
            region_id: i as u32,
            bbox,
        })
        .collect();
    ScoredRegions {
        image_id: 0,
        regions,
        margins: (0..=n_parts)
            .map(|_| (0..n).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect(),
        tau: vec![0.3; n_parts + 1],
    }
}

pub fn prior(variant: PriorVariant, n_parts: usize) -> ImagePrior {
    let d = variant.is_geometric().then(|| {
        vec![
            PartDensity::Gaussian(DiagGaussian {
                mean: [0.0, 0.0, -1.0, -1.0],
                var: [0.05, 0.05, 0.1, 0.1],
            });
            n_parts
        ]
    });
    ImagePrior::new(PriorConfig::with_variant(variant), d).unwrap()
}

/// Two noisy linearly separable classes.
pub fn svm_data(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<Vec<f32>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let ys = xs
        .iter()
        .map(|x| if x[0] + 0.5 * x[1] + rng.random_range(-0.3f32..0.3) > 0.0 { 1.0 } else { -1.0 })
        .collect();
    (xs, ys)
}

pub fn samples<'a>(xs: &'a [Vec<f32>], ys: &[f64]) -> Vec<Sample<'a>> {
    xs.iter().zip(ys).map(|(x, &label)| Sample { x, label }).collect()
}
