//! Feature vectors keyed by `(image, region, channel)`, cosine distance, and
//! the built-in toy extractor.

mod extract;
pub mod raster;
mod store;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use extract::{toy_extract, Extracted, CONTEXT_PIXELS};
pub use raster::{pgm_size, GrayImage};
pub use store::{FeatureKey, FeatureStore, FORMAT_VERSION, MAGIC};

use crate::error::{Error, Result};

pub const DETECTOR_CHANNEL: &str = "detector";
pub const APPEARANCE_CHANNEL: &str = "appearance";

/// First region id reserved for ground-truth boxes. Ground-truth part `i`
/// is stored under `GT_REGION_BASE + i`; proposal ids must stay below it.
pub const GT_REGION_BASE: u32 = 0xFFFF_FF00;

pub fn gt_region_id(part_id: usize) -> u32 {
    GT_REGION_BASE + part_id as u32
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureChannel {
    pub name: String,
    pub dim: usize,
}

impl FeatureChannel {
    /// 16x16 grid, used for detection and classification.
    pub fn detector() -> Self {
        Self {
            name: DETECTOR_CHANNEL.into(),
            dim: 256,
        }
    }

    /// 8x8 grid, used for appearance nearest neighbors.
    pub fn appearance() -> Self {
        Self {
            name: APPEARANCE_CHANNEL.into(),
            dim: 64,
        }
    }

    /// Side of the square extraction grid, if `dim` is a perfect square.
    pub fn grid(&self) -> Option<usize> {
        let g = (self.dim as f64).sqrt().round() as usize;
        (g * g == self.dim && g > 0).then_some(g)
    }
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedCosine);
    }
    Ok((1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 2.0))
}

/// The two channels a pipeline reads.
#[derive(Debug, Clone)]
pub struct Features {
    pub detector: FeatureStore,
    pub appearance: FeatureStore,
}

impl Features {
    pub fn new() -> Self {
        Self {
            detector: FeatureStore::new(FeatureChannel::detector()),
            appearance: FeatureStore::new(FeatureChannel::appearance()),
        }
    }

    pub const DETECTOR_FILE: &'static str = "detector.pgfs";
    pub const APPEARANCE_FILE: &'static str = "appearance.pgfs";

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.detector.save(&dir.join(Self::DETECTOR_FILE))?;
        self.appearance.save(&dir.join(Self::APPEARANCE_FILE))
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let detector = FeatureStore::open(&dir.join(Self::DETECTOR_FILE))?;
        let appearance = FeatureStore::open(&dir.join(Self::APPEARANCE_FILE))?;
        for (store, want) in [(&detector, DETECTOR_CHANNEL), (&appearance, APPEARANCE_CHANNEL)] {
            if store.channel().name != want {
                return Err(Error::ChannelMismatch {
                    expected: want.into(),
                    actual: store.channel().name.clone(),
                });
            }
        }
        Ok(Self {
            detector,
            appearance,
        })
    }

    /// Extracts both channels for one region of `image` and stores them.
    pub fn extract_into(&mut self, image: &GrayImage, image_id: u64, region_id: u32, region: &crate::geometry::BBox) -> Result<()> {
        for store in [&mut self.detector, &mut self.appearance] {
            let grid = store
                .channel()
                .grid()
                .ok_or_else(|| Error::InvalidArgument("channel dim is not a square grid".into()))?;
            let e = toy_extract(image, region, grid, CONTEXT_PIXELS)?;
            store.put(image_id, region_id, e.values)?;
        }
        Ok(())
    }
}

impl Default for Features {
    fn default() -> Self {
        Self::new()
    }
}
