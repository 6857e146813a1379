//! Appearance nearest-neighbor layout Gaussians.
//!
//! The index holds, per training image, the appearance feature of the
//! ground-truth object window and the layouts of its parts. A query returns,
//! per part, a diagonal Gaussian fit to the layouts of the `K` training images
//! whose object appearance is closest in cosine distance.

use serde::{Deserialize, Serialize};

use super::gmm::moments;
use super::{DiagGaussian, Layout, VARIANCE_FLOOR};
use crate::error::{Error, Result};
use crate::featstore::cosine_distance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpEntry {
    pub image_id: u64,
    /// Layout per non-root part (index `i` is part `i + 1`), `None` if absent.
    pub layouts: Vec<Option<Layout>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpIndex {
    entries: Vec<NpEntry>,
    appearance: Vec<Vec<f32>>,
    /// Fallback per part when no neighbor has it.
    global: Vec<DiagGaussian>,
    n_parts: usize,
}

impl NpIndex {
    /// Builds an index; every part must be present in at least one entry.
    pub fn new(entries: Vec<NpEntry>, appearance: Vec<Vec<f32>>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("empty nearest-neighbor index".into()));
        }
        if entries.len() != appearance.len() {
            return Err(Error::DimMismatch {
                expected: entries.len(),
                actual: appearance.len(),
            });
        }
        let dim = appearance[0].len();
        for a in &appearance {
            if a.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: a.len(),
                });
            }
            if a.iter().all(|&v| v == 0.0) {
                return Err(Error::UndefinedCosine);
            }
        }
        let n_parts = entries[0].layouts.len();
        if entries.iter().any(|e| e.layouts.len() != n_parts) {
            return Err(Error::InvalidArgument("entries disagree on part count".into()));
        }
        let global = (0..n_parts)
            .map(|p| {
                let s: Vec<Layout> = entries.iter().filter_map(|e| e.layouts[p]).collect();
                if s.is_empty() {
                    return Err(Error::InvalidArgument(format!("part {} never present in index", p + 1)));
                }
                let (mean, var) = moments(&s, VARIANCE_FLOOR);
                Ok(DiagGaussian { mean, var })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            entries,
            appearance,
            global,
            n_parts,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_parts(&self) -> usize {
        self.n_parts
    }

    pub fn entries(&self) -> &[NpEntry] {
        &self.entries
    }

    pub fn global(&self) -> &[DiagGaussian] {
        &self.global
    }

    /// Positions of the `k` nearest entries, nearest first, ties by position.
    pub fn neighbors(&self, query: &[f32], k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "K = {k} outside 1..={}",
                self.entries.len()
            )));
        }
        let mut d: Vec<(f64, usize)> = self
            .appearance
            .iter()
            .enumerate()
            .map(|(i, a)| cosine_distance(query, a).map(|v| (v, i)))
            .collect::<Result<_>>()?;
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(d.into_iter().take(k).map(|(_, i)| i).collect())
    }

    /// Per-part Gaussians from the `k` appearance neighbors of `query`.
    pub fn fit(&self, query: &[f32], k: usize) -> Result<Vec<DiagGaussian>> {
        let nb = self.neighbors(query, k)?;
        Ok((0..self.n_parts)
            .map(|p| {
                let s: Vec<Layout> = nb.iter().filter_map(|&i| self.entries[i].layouts[p]).collect();
                if s.is_empty() {
                    self.global[p].clone()
                } else {
                    let (mean, var) = moments(&s, VARIANCE_FLOOR);
                    DiagGaussian { mean, var }
                }
            })
            .collect())
    }
}

/// Free-function form of [`NpIndex::fit`].
pub fn fit_np_gaussian(index: &NpIndex, root_appearance: &[f32], k: usize) -> Result<Vec<DiagGaussian>> {
    index.fit(root_appearance, k)
}
