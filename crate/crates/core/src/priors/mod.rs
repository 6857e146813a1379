//! Configuration scoring functions over `(root, parts)` hypotheses, in the
//! log domain.
//!
//! * `Null`: constant, contributes 0.
//! * `Box`: 0 when every present part lies within `epsilon` pixels of the
//!   root, otherwise `-inf`.
//! * `Mg` / `Np`: the box term plus `alpha * sum_i ln delta_i(u_i)`, where
//!   `u_i` is the root-relative layout of part `i` and `delta_i` is either a
//!   mixture fit to all training layouts (`Mg`) or a Gaussian fit to the
//!   layouts of appearance neighbors (`Np`).

pub mod gmm;
pub mod np;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featstore::{gt_region_id, FeatureStore};
use crate::geometry::{contains_within_slack, BBox};
pub use gmm::{fit_gmm, EmOptions, GmmComponent, GmmFit, GmmPrior};
pub use np::{fit_np_gaussian, NpEntry, NpIndex};

pub const LAYOUT_DIM: usize = 4;
pub const VARIANCE_FLOOR: f64 = 1e-4;

/// `(dx, dy, log_sw, log_sh)`.
pub type Layout = [f64; LAYOUT_DIM];

/// Root-relative layout: center offset over root size and log size ratios.
pub fn layout_of(root: &BBox, part: &BBox) -> Layout {
    let (rcx, rcy) = root.center();
    let (pcx, pcy) = part.center();
    [
        (pcx - rcx) / root.width(),
        (pcy - rcy) / root.height(),
        (part.width() / root.width()).ln(),
        (part.height() / root.height()).ln(),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Layout,
    pub var: Layout,
}

impl DiagGaussian {
    pub fn log_pdf(&self, u: &Layout) -> f64 {
        Self::log_pdf_of(&self.mean, &self.var, u)
    }

    pub(crate) fn log_pdf_of(mean: &Layout, var: &Layout, u: &Layout) -> f64 {
        const LN_2PI: f64 = 1.837_877_066_409_345_3;
        let mut s = 0.0;
        for d in 0..LAYOUT_DIM {
            let diff = u[d] - mean[d];
            s += LN_2PI + var[d].ln() + diff * diff / var[d];
        }
        -0.5 * s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorVariant {
    Null,
    Box,
    /// Geometric with mixture-of-Gaussians part densities.
    Mg,
    /// Geometric with appearance nearest-neighbor Gaussians.
    Np,
}

impl PriorVariant {
    pub fn is_geometric(self) -> bool {
        matches!(self, PriorVariant::Mg | PriorVariant::Np)
    }

    pub fn uses_containment(self) -> bool {
        !matches!(self, PriorVariant::Null)
    }

    pub fn name(self) -> &'static str {
        match self {
            PriorVariant::Null => "null",
            PriorVariant::Box => "box",
            PriorVariant::Mg => "mg",
            PriorVariant::Np => "np",
        }
    }
}

impl std::str::FromStr for PriorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "null" => Ok(PriorVariant::Null),
            "box" => Ok(PriorVariant::Box),
            "mg" => Ok(PriorVariant::Mg),
            "np" => Ok(PriorVariant::Np),
            other => Err(Error::InvalidArgument(format!("unknown prior variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub variant: PriorVariant,
    pub epsilon: f64,
    pub alpha: f64,
    pub n_components: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            variant: PriorVariant::Np,
            epsilon: 10.0,
            alpha: 0.1,
            n_components: 4,
            k: 20,
            seed: 0,
        }
    }
}

impl PriorConfig {
    pub fn with_variant(variant: PriorVariant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if self.k == 0 || self.n_components == 0 {
            return Err(Error::InvalidArgument("K and N_g must be positive".into()));
        }
        Ok(())
    }
}

/// A fitted per-part layout density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartDensity {
    Mixture(GmmPrior),
    Gaussian(DiagGaussian),
}

impl PartDensity {
    pub fn log_pdf(&self, u: &Layout) -> f64 {
        match self {
            PartDensity::Mixture(g) => g.log_pdf(u),
            PartDensity::Gaussian(g) => g.log_pdf(u),
        }
    }
}

/// The contribution of one present part to the configuration prior.
///
/// `density` is required for geometric variants and ignored otherwise.
#[inline]
pub fn part_log_term(config: &PriorConfig, density: Option<&PartDensity>, root: &BBox, part: &BBox) -> f64 {
    if config.variant.uses_containment() && !contains_within_slack(root, part, config.epsilon) {
        return f64::NEG_INFINITY;
    }
    match (config.variant.is_geometric(), density) {
        (true, Some(d)) => config.alpha * d.log_pdf(&layout_of(root, part)),
        _ => 0.0,
    }
}

/// Log of the configuration prior for `root` and the non-root `parts`
/// (`parts[i]` is part `i + 1`; `None` means absent).
pub fn delta_log_score(
    config: &PriorConfig,
    densities: Option<&[PartDensity]>,
    root: &BBox,
    parts: &[Option<BBox>],
) -> Result<f64> {
    if config.variant.is_geometric() {
        match densities {
            Some(d) if d.len() == parts.len() => {}
            Some(d) => {
                return Err(Error::DimMismatch {
                    expected: parts.len(),
                    actual: d.len(),
                })
            }
            None => return Err(Error::UnfittedPrior(config.variant.name())),
        }
    }
    let mut total = 0.0;
    for (i, p) in parts.iter().enumerate() {
        if let Some(p) = p {
            total += part_log_term(config, densities.map(|d| &d[i]), root, p);
        }
    }
    Ok(total)
}

/// A prior ready to score configurations of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePrior {
    config: PriorConfig,
    densities: Option<Vec<PartDensity>>,
}

impl ImagePrior {
    pub fn new(config: PriorConfig, densities: Option<Vec<PartDensity>>) -> Result<Self> {
        if config.variant.is_geometric() && densities.is_none() {
            return Err(Error::UnfittedPrior(config.variant.name()));
        }
        Ok(Self { config, densities })
    }

    pub fn config(&self) -> &PriorConfig {
        &self.config
    }

    pub fn densities(&self) -> Option<&[PartDensity]> {
        self.densities.as_deref()
    }

    /// Term for non-root part index `i` (part id `i + 1`).
    #[inline]
    pub fn part_term(&self, i: usize, root: &BBox, part: &BBox) -> f64 {
        part_log_term(&self.config, self.densities.as_ref().map(|d| &d[i]), root, part)
    }

    pub fn delta_log_score(&self, root: &BBox, parts: &[Option<BBox>]) -> Result<f64> {
        delta_log_score(&self.config, self.densities.as_deref(), root, parts)
    }
}

/// Training layout sample: ground-truth object box and part boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutSample {
    pub image_id: u64,
    pub root: BBox,
    /// Non-root parts, `parts[i]` is part `i + 1`.
    pub parts: Vec<Option<BBox>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PriorState {
    Null,
    Box,
    Mg(Vec<GmmPrior>),
    Np(NpIndex),
}

/// A fitted prior.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorModel {
    pub config: PriorConfig,
    pub part_names: Vec<String>,
    pub state: PriorState,
}

impl PriorModel {
    /// Fits the configured variant. `appearance` must hold the ground-truth
    /// object window of every sample for the `Np` variant.
    pub fn fit(
        config: PriorConfig,
        part_names: Vec<String>,
        samples: &[LayoutSample],
        appearance: Option<&FeatureStore>,
    ) -> Result<Self> {
        config.validate()?;
        let n_parts = part_names.len();
        if let Some(s) = samples.iter().find(|s| s.parts.len() != n_parts) {
            return Err(Error::DimMismatch {
                expected: n_parts,
                actual: s.parts.len(),
            });
        }
        let layouts = |s: &LayoutSample| -> Vec<Option<Layout>> {
            s.parts.iter().map(|p| p.map(|p| layout_of(&s.root, &p))).collect()
        };
        let state = match config.variant {
            PriorVariant::Null => PriorState::Null,
            PriorVariant::Box => PriorState::Box,
            PriorVariant::Mg => {
                let mut mixtures = Vec::with_capacity(n_parts);
                for p in 0..n_parts {
                    let data: Vec<Layout> = samples
                        .iter()
                        .filter_map(|s| s.parts[p].map(|b| layout_of(&s.root, &b)))
                        .collect();
                    let fit = fit_gmm(&data, config.n_components, config.seed.wrapping_add(p as u64), &EmOptions::default())?;
                    mixtures.push(fit.prior);
                }
                PriorState::Mg(mixtures)
            }
            PriorVariant::Np => {
                let store = appearance.ok_or(Error::UnfittedPrior("np"))?;
                let mut entries = Vec::with_capacity(samples.len());
                let mut app = Vec::with_capacity(samples.len());
                for s in samples {
                    app.push(store.get(s.image_id, gt_region_id(0))?.to_vec());
                    entries.push(NpEntry {
                        image_id: s.image_id,
                        layouts: layouts(s),
                    });
                }
                PriorState::Np(NpIndex::new(entries, app)?)
            }
        };
        Ok(Self {
            config,
            part_names,
            state,
        })
    }

    /// Conditions the prior on an image. `root_appearance` is the appearance
    /// feature of the conditioning window and is required for `Np`.
    pub fn condition(&self, root_appearance: Option<&[f32]>) -> Result<ImagePrior> {
        let densities = match &self.state {
            PriorState::Null | PriorState::Box => None,
            PriorState::Mg(m) => Some(m.iter().cloned().map(PartDensity::Mixture).collect()),
            PriorState::Np(index) => {
                let q = root_appearance.ok_or(Error::UnfittedPrior("np"))?;
                let k = self.config.k.min(index.len());
                Some(index.fit(q, k)?.into_iter().map(PartDensity::Gaussian).collect())
            }
        };
        ImagePrior::new(self.config, densities)
    }

    /// Same model with a different `alpha` (and `K` for `Np`).
    pub fn with_params(&self, alpha: f64, k: usize) -> Self {
        let mut m = self.clone();
        m.config.alpha = alpha;
        m.config.k = k;
        m
    }

    /// Writes the model as JSON. The `Np` variant references
    /// `appearance_store` (stored verbatim) for its appearance vectors.
    pub fn save(&self, path: &Path, appearance_store: Option<&str>) -> Result<()> {
        let file = PriorFile {
            variant: self.config.variant,
            epsilon: self.config.epsilon,
            alpha: self.config.alpha,
            n_components: self.config.n_components,
            k: self.config.k,
            seed: self.config.seed,
            part_names: self.part_names.clone(),
            gmm: match &self.state {
                PriorState::Mg(m) => Some(m.clone()),
                _ => None,
            },
            np: match &self.state {
                PriorState::Np(index) => Some(NpFile {
                    appearance_store: appearance_store
                        .ok_or_else(|| Error::InvalidArgument("np prior needs an appearance store path".into()))?
                        .to_owned(),
                    region_id: gt_region_id(0),
                    entries: index.entries().to_vec(),
                }),
                _ => None,
            },
        };
        let json = serde_json::to_string_pretty(&file)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    /// Loads a model; a relative `appearance_store` resolves against the
    /// JSON file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let file: PriorFile = serde_json::from_str(&text)?;
        let config = PriorConfig {
            variant: file.variant,
            epsilon: file.epsilon,
            alpha: file.alpha,
            n_components: file.n_components,
            k: file.k,
            seed: file.seed,
        };
        config.validate()?;
        let state = match file.variant {
            PriorVariant::Null => PriorState::Null,
            PriorVariant::Box => PriorState::Box,
            PriorVariant::Mg => PriorState::Mg(file.gmm.ok_or(Error::UnfittedPrior("mg"))?),
            PriorVariant::Np => {
                let np = file.np.ok_or(Error::UnfittedPrior("np"))?;
                let store_path = path
                    .parent()
                    .unwrap_or_else(|| Path::new("."))
                    .join(&np.appearance_store);
                let store = FeatureStore::open(&store_path)?;
                let app = np
                    .entries
                    .iter()
                    .map(|e| store.get(e.image_id, np.region_id).map(<[f32]>::to_vec))
                    .collect::<Result<Vec<_>>>()?;
                PriorState::Np(NpIndex::new(np.entries, app)?)
            }
        };
        Ok(Self {
            config,
            part_names: file.part_names,
            state,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PriorFile {
    variant: PriorVariant,
    epsilon: f64,
    alpha: f64,
    n_components: usize,
    k: usize,
    #[serde(default)]
    seed: u64,
    part_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gmm: Option<Vec<GmmPrior>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    np: Option<NpFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NpFile {
    appearance_store: String,
    region_id: u32,
    entries: Vec<NpEntry>,
}
