//! Diagonal-covariance Gaussian mixtures fit by EM from k-means
//! initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DiagGaussian, Layout, LAYOUT_DIM, VARIANCE_FLOOR};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Layout,
    pub var: Layout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmPrior {
    pub components: Vec<GmmComponent>,
}

impl GmmPrior {
    pub fn log_pdf(&self, u: &Layout) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.weight.ln() + DiagGaussian::log_pdf_of(&c.mean, &c.var, u))
            .collect();
        log_sum_exp(&terms)
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop when the mean per-sample log-likelihood gains less than this.
    pub tol: f64,
    pub variance_floor: f64,
    /// k-means restarts; the lowest-inertia clustering seeds EM.
    pub kmeans_restarts: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-6,
            variance_floor: VARIANCE_FLOOR,
            kmeans_restarts: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub prior: GmmPrior,
    /// Total log-likelihood before each M-step, plus the final value.
    pub log_likelihoods: Vec<f64>,
}

fn sq_dist(a: &Layout, b: &Layout) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations. Returns centroids and
/// inertia.
fn kmeans(samples: &[Layout], k: usize, rng: &mut ChaCha8Rng) -> (Vec<Layout>, Vec<usize>, f64) {
    let n = samples.len();
    let mut centroids = vec![samples[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(samples[next]);
        for (d, s) in d2.iter_mut().zip(samples) {
            *d = d.min(sq_dist(s, &samples[next]));
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (a, s) in assign.iter_mut().zip(samples) {
            let best = (0..k)
                .min_by(|&i, &j| sq_dist(s, &centroids[i]).total_cmp(&sq_dist(s, &centroids[j])))
                .unwrap_or(0);
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0.0; LAYOUT_DIM]; k];
        let mut counts = vec![0usize; k];
        for (&a, s) in assign.iter().zip(samples) {
            counts[a] += 1;
            for d in 0..LAYOUT_DIM {
                sums[a][d] += s[d];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..LAYOUT_DIM {
                    centroids[c][d] = sums[c][d] / counts[c] as f64;
                }
            }
        }
    }
    let inertia = assign
        .iter()
        .zip(samples)
        .map(|(&a, s)| sq_dist(s, &centroids[a]))
        .sum();
    (centroids, assign, inertia)
}

/// Moment estimates of mean and floored per-dimension variance.
pub fn moments(samples: &[Layout], floor: f64) -> (Layout, Layout) {
    let n = samples.len().max(1) as f64;
    let mut mean = [0.0; LAYOUT_DIM];
    for s in samples {
        for d in 0..LAYOUT_DIM {
            mean[d] += s[d];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; LAYOUT_DIM];
    for s in samples {
        for d in 0..LAYOUT_DIM {
            var[d] += (s[d] - mean[d]) * (s[d] - mean[d]);
        }
    }
    var.iter_mut().for_each(|v| *v = (*v / n).max(floor));
    (mean, var)
}

/// Fits an `n_components` diagonal mixture.
pub fn fit_gmm(samples: &[Layout], n_components: usize, seed: u64, opts: &EmOptions) -> Result<GmmFit> {
    if n_components == 0 {
        return Err(Error::InvalidArgument("need at least one component".into()));
    }
    if samples.len() < n_components {
        return Err(Error::InvalidArgument(format!(
            "{} samples for {n_components} components",
            samples.len()
        )));
    }
    let n = samples.len();
    let k = n_components;
    let floor = opts.variance_floor;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut best: Option<(Vec<Layout>, Vec<usize>, f64)> = None;
    for _ in 0..opts.kmeans_restarts.max(1) {
        let run = kmeans(samples, k, &mut rng);
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (_, assign, _) = best.expect("at least one restart");

    let (_, global_var) = moments(samples, floor);
    let mut comps: Vec<GmmComponent> = (0..k)
        .map(|c| {
            let members: Vec<Layout> = assign
                .iter()
                .zip(samples)
                .filter(|(&a, _)| a == c)
                .map(|(_, s)| *s)
                .collect();
            let (mean, var) = if members.len() > 1 {
                moments(&members, floor)
            } else if members.len() == 1 {
                (members[0], global_var)
            } else {
                (samples[c % n], global_var)
            };
            GmmComponent {
                weight: (members.len().max(1)) as f64,
                mean,
                var,
            }
        })
        .collect();
    let wsum: f64 = comps.iter().map(|c| c.weight).sum();
    comps.iter_mut().for_each(|c| c.weight /= wsum);

    let mut resp = vec![0.0; n * k];
    let mut lls = Vec::new();
    let mut log_terms = vec![0.0; k];
    for iter in 0..=opts.max_iter {
        // E-step
        let mut ll = 0.0;
        for (i, s) in samples.iter().enumerate() {
            for (c, comp) in comps.iter().enumerate() {
                log_terms[c] = comp.weight.ln() + DiagGaussian::log_pdf_of(&comp.mean, &comp.var, s);
            }
            let lse = log_sum_exp(&log_terms);
            ll += lse;
            for c in 0..k {
                resp[i * k + c] = (log_terms[c] - lse).exp();
            }
        }
        let converged = lls
            .last()
            .is_some_and(|&prev: &f64| (ll - prev) / (n as f64) < opts.tol);
        lls.push(ll);
        if converged || iter == opts.max_iter {
            break;
        }
        // M-step; the floored variance is the constrained maximizer per dim
        for (c, comp) in comps.iter_mut().enumerate() {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            if nk <= 1e-300 {
                comp.weight = 0.0;
                continue;
            }
            let mut mean = [0.0; LAYOUT_DIM];
            for (i, s) in samples.iter().enumerate() {
                let r = resp[i * k + c];
                for d in 0..LAYOUT_DIM {
                    mean[d] += r * s[d];
                }
            }
            mean.iter_mut().for_each(|m| *m /= nk);
            let mut var = [0.0; LAYOUT_DIM];
            for (i, s) in samples.iter().enumerate() {
                let r = resp[i * k + c];
                for d in 0..LAYOUT_DIM {
                    var[d] += r * (s[d] - mean[d]) * (s[d] - mean[d]);
                }
            }
            var.iter_mut().for_each(|v| *v = (*v / nk).max(floor));
            comp.weight = nk / n as f64;
            comp.mean = mean;
            comp.var = var;
        }
    }
    comps.retain(|c| c.weight > 0.0);
    Ok(GmmFit {
        prior: GmmPrior { components: comps },
        log_likelihoods: lls,
    })
}
