//! Joint object and part configuration inference.
//!
//! A configuration is scored in the log domain as
//!
//! ```text
//! ln d_0(x_0) + sum_i term_i
//! term_i = ln d_i(x_i) + prior_i(x_0, x_i)      part i present
//!        = ln(tau_i) - 1                        part i absent
//! ```
//!
//! A part may only be present on a window whose detector score reaches its
//! threshold `tau_i` and whose prior term is finite. Given the root the part
//! terms are independent, so the exact argmax takes the best option per part
//! for each root candidate. [`brute_force_oracle`] enumerates every tuple
//! instead and must agree exactly.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detect::{log_sigmoid, sigmoid, Detector};
use crate::error::{Error, Result};
use crate::featstore::FeatureStore;
use crate::geometry::BBox;
use crate::priors::ImagePrior;
use crate::proposals::Proposal;

/// Proposal count above which the brute-force oracle refuses to run.
pub const BRUTE_FORCE_LIMIT: usize = 200;

/// Detector outputs for every proposal of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRegions {
    pub image_id: u64,
    pub regions: Vec<Proposal>,
    /// `margins[part_id][region]`.
    pub margins: Vec<Vec<f64>>,
    /// Threshold per part id (the root entry is unused).
    pub tau: Vec<f64>,
}

impl ScoredRegions {
    /// Scores `regions` with `detectors[part_id]` on the detector channel.
    pub fn compute(
        image_id: u64,
        regions: Vec<Proposal>,
        detectors: &[Detector],
        features: &FeatureStore,
    ) -> Result<Self> {
        let mut margins = vec![Vec::with_capacity(regions.len()); detectors.len()];
        for r in &regions {
            let phi = features.get(image_id, r.region_id)?;
            for (m, d) in margins.iter_mut().zip(detectors) {
                m.push(d.margin(phi)?);
            }
        }
        Ok(Self {
            image_id,
            regions,
            margins,
            tau: detectors.iter().map(|d| d.tau).collect(),
        })
    }

    pub fn n_parts(&self) -> usize {
        self.margins.len().saturating_sub(1)
    }

    #[inline]
    pub fn score(&self, part_id: usize, region: usize) -> f64 {
        sigmoid(self.margins[part_id][region])
    }

    #[inline]
    pub fn log_score(&self, part_id: usize, region: usize) -> f64 {
        log_sigmoid(self.margins[part_id][region])
    }

    /// Index of the top-scoring root window, ties to the lower region id.
    pub fn top_root(&self) -> Option<usize> {
        self.root_order().first().copied()
    }

    /// Region indices by descending root score, ties by ascending region id.
    pub fn root_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.regions.len()).collect();
        idx.sort_by(|&a, &b| {
            self.margins[0][b]
                .total_cmp(&self.margins[0][a])
                .then(self.regions[a].region_id.cmp(&self.regions[b].region_id))
        });
        idx
    }

    /// Score contributed by an absent part.
    pub fn absent_floor(&self, part_id: usize) -> f64 {
        self.tau[part_id].max(1e-300).ln() - 1.0
    }
}

/// A selected window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartChoice {
    pub region_id: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

/// An inferred configuration. `parts[i]` is part `i + 1`, `None` if absent.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    pub image_id: u64,
    pub root: PartChoice,
    pub parts: Vec<Option<PartChoice>>,
    pub log_score: f64,
}

impl Configuration {
    pub fn presence(&self) -> Vec<bool> {
        self.parts.iter().map(Option::is_some).collect()
    }

    /// Box for `part_id` (0 = root).
    pub fn part_box(&self, part_id: usize) -> Option<BBox> {
        if part_id == 0 {
            Some(self.root.bbox)
        } else {
            self.parts.get(part_id - 1).copied().flatten().map(|p| p.bbox)
        }
    }

    /// JSON Lines record with parts keyed by name (`names[i]` is part `i + 1`).
    pub fn to_record(&self, names: &[String]) -> ConfigurationRecord {
        ConfigurationRecord {
            image_id: self.image_id,
            root: self.root,
            parts: names.iter().cloned().zip(self.parts.iter().copied()).collect(),
            log_score: self.log_score,
        }
    }

    pub fn from_record(rec: ConfigurationRecord, names: &[String]) -> Result<Self> {
        let parts = names
            .iter()
            .map(|n| {
                rec.parts
                    .get(n)
                    .copied()
                    .ok_or_else(|| Error::KeyMismatch(format!("image {} has no entry for part {n:?}", rec.image_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            image_id: rec.image_id,
            root: rec.root,
            parts,
            log_score: rec.log_score,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigurationRecord {
    pub image_id: u64,
    pub root: PartChoice,
    pub parts: BTreeMap<String, Option<PartChoice>>,
    pub log_score: f64,
}

/// A candidate object window with its root log-score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootCandidate {
    pub region_id: u32,
    pub bbox: BBox,
    pub margin: f64,
}

impl RootCandidate {
    fn log_score(&self) -> f64 {
        log_sigmoid(self.margin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InferOptions {
    /// Root candidates searched, by descending root score. `None` = all.
    pub top_m_roots: Option<usize>,
}

#[inline]
fn present_term(sr: &ScoredRegions, prior: &ImagePrior, part_id: usize, region: usize, root: &BBox) -> f64 {
    if sr.score(part_id, region) < sr.tau[part_id] {
        return f64::NEG_INFINITY;
    }
    let geo = prior.part_term(part_id - 1, root, &sr.regions[region].bbox);
    if geo == f64::NEG_INFINITY {
        return geo;
    }
    sr.log_score(part_id, region) + geo
}

#[inline]
fn combine(root_log: f64, terms: &[f64]) -> f64 {
    terms.iter().fold(root_log, |acc, t| acc + t)
}

fn check(sr: &ScoredRegions, prior: &ImagePrior) -> Result<()> {
    if sr.regions.is_empty() {
        return Err(Error::NoProposals(sr.image_id));
    }
    if sr.margins.is_empty() {
        return Err(Error::InvalidArgument("no root detector".into()));
    }
    if let Some(d) = prior.densities() {
        if d.len() != sr.n_parts() {
            return Err(Error::DimMismatch {
                expected: sr.n_parts(),
                actual: d.len(),
            });
        }
    }
    Ok(())
}

fn candidates(sr: &ScoredRegions, top_m: Option<usize>) -> Vec<RootCandidate> {
    let order = sr.root_order();
    let m = top_m.unwrap_or(order.len()).min(order.len());
    order[..m]
        .iter()
        .map(|&i| RootCandidate {
            region_id: sr.regions[i].region_id,
            bbox: sr.regions[i].bbox,
            margin: sr.margins[0][i],
        })
        .collect()
}

fn better_root(a: &RootCandidate, b: &RootCandidate) -> bool {
    match a.margin.total_cmp(&b.margin) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a.region_id < b.region_id,
    }
}

fn build(sr: &ScoredRegions, root: &RootCandidate, choice: &[Option<usize>], total: f64) -> Configuration {
    Configuration {
        image_id: sr.image_id,
        root: PartChoice {
            region_id: root.region_id,
            bbox: root.bbox,
            score: sigmoid(root.margin),
        },
        parts: choice
            .iter()
            .enumerate()
            .map(|(i, c)| {
                c.map(|r| PartChoice {
                    region_id: sr.regions[r].region_id,
                    bbox: sr.regions[r].bbox,
                    score: sr.score(i + 1, r),
                })
            })
            .collect(),
        log_score: total,
    }
}

/// Exact argmax over the given root candidates.
pub fn infer_over_roots(sr: &ScoredRegions, prior: &ImagePrior, roots: &[RootCandidate]) -> Result<Configuration> {
    check(sr, prior)?;
    let n_parts = sr.n_parts();
    let mut best: Option<(f64, RootCandidate, Vec<Option<usize>>)> = None;
    let mut terms = vec![0.0; n_parts];
    let mut choice = vec![None; n_parts];
    for root in roots {
        for p in 1..=n_parts {
            let mut t = sr.absent_floor(p);
            let mut c: Option<usize> = None;
            for r in 0..sr.regions.len() {
                let v = present_term(sr, prior, p, r, &root.bbox);
                if v == f64::NEG_INFINITY {
                    continue;
                }
                let take = match c {
                    None => v >= t,
                    Some(cur) => v > t || (v == t && sr.regions[r].region_id < sr.regions[cur].region_id),
                };
                if take {
                    t = v;
                    c = Some(r);
                }
            }
            terms[p - 1] = t;
            choice[p - 1] = c;
        }
        let total = combine(root.log_score(), &terms);
        let replace = match &best {
            None => true,
            Some((bt, br, _)) => total > *bt || (total == *bt && better_root(root, br)),
        };
        if replace {
            best = Some((total, *root, choice.clone()));
        }
    }
    let (total, root, choice) = best.ok_or(Error::NoProposals(sr.image_id))?;
    Ok(build(sr, &root, &choice, total))
}

/// Joint configuration argmax over the proposals of one image.
pub fn infer_configuration(sr: &ScoredRegions, prior: &ImagePrior, opts: &InferOptions) -> Result<Configuration> {
    check(sr, prior)?;
    infer_over_roots(sr, prior, &candidates(sr, opts.top_m_roots))
}

/// Exhaustive enumeration of every `(root, part options...)` tuple, where
/// each part option is an admissible window or absence.
pub fn brute_force_oracle(sr: &ScoredRegions, prior: &ImagePrior) -> Result<Configuration> {
    brute_force_over_roots(sr, prior, &candidates(sr, None))
}

pub fn brute_force_over_roots(sr: &ScoredRegions, prior: &ImagePrior, roots: &[RootCandidate]) -> Result<Configuration> {
    check(sr, prior)?;
    if sr.regions.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::GuardExceeded {
            count: sr.regions.len(),
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let n_parts = sr.n_parts();
    let mut by_id: Vec<usize> = (0..sr.regions.len()).collect();
    by_id.sort_by_key(|&r| sr.regions[r].region_id);

    let mut best: Option<(f64, RootCandidate, Vec<Option<usize>>)> = None;
    for root in roots {
        // options per part: admissible windows by region id, then absence
        let options: Vec<Vec<(Option<usize>, f64)>> = (1..=n_parts)
            .map(|p| {
                let mut o: Vec<(Option<usize>, f64)> = by_id
                    .iter()
                    .map(|&r| (Some(r), present_term(sr, prior, p, r, &root.bbox)))
                    .filter(|(_, v)| *v > f64::NEG_INFINITY)
                    .collect();
                o.push((None, sr.absent_floor(p)));
                o
            })
            .collect();
        let mut pick = vec![0usize; n_parts];
        let mut terms = vec![0.0; n_parts];
        loop {
            for p in 0..n_parts {
                terms[p] = options[p][pick[p]].1;
            }
            let total = combine(root.log_score(), &terms);
            let better = match &best {
                None => true,
                Some((bt, br, bc)) => {
                    total > *bt
                        || (total == *bt && !std::ptr::eq(br, root) && better_root(root, br))
                        || (total == *bt
                            && br.region_id == root.region_id
                            && tuple_before(sr, &options, &pick, bc))
                }
            };
            if better {
                let c = (0..n_parts).map(|p| options[p][pick[p]].0).collect();
                best = Some((total, *root, c));
            }
            // odometer
            let mut p = n_parts;
            loop {
                if p == 0 {
                    break;
                }
                p -= 1;
                pick[p] += 1;
                if pick[p] < options[p].len() {
                    break;
                }
                pick[p] = 0;
                if p == 0 {
                    p = usize::MAX;
                    break;
                }
            }
            if n_parts == 0 || p == usize::MAX {
                break;
            }
        }
    }
    let (total, root, choice) = best.ok_or(Error::NoProposals(sr.image_id))?;
    Ok(build(sr, &root, &choice, total))
}

/// Lexicographic tie-break for equal totals under the same root: lower
/// region ids first, presence before absence.
fn tuple_before(
    sr: &ScoredRegions,
    options: &[Vec<(Option<usize>, f64)>],
    pick: &[usize],
    current: &[Option<usize>],
) -> bool {
    for (p, &k) in pick.iter().enumerate() {
        let a = options[p][k].0.map(|r| sr.regions[r].region_id);
        let b = current[p].map(|r| sr.regions[r].region_id);
        let key = |x: Option<u32>| x.map_or((1u8, 0u32), |v| (0, v));
        match key(a).cmp(&key(b)) {
            Ordering::Less => return true,
            Ordering::Greater => return false,
            Ordering::Equal => {}
        }
    }
    false
}
