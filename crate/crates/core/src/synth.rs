//! Synthetic scenes with planted geometry and appearance.
//!
//! Every image holds one object whose texture is a grating with a
//! class-specific orientation, anchored to the object box. Parts are placed
//! by sampling per-class root-relative layout Gaussians and carry
//! class-independent textures. Decoy windows repeat the part textures (with a
//! ring of object texture around them) at implausible positions, half of them
//! inside the object, so that appearance alone cannot tell a decoy from the
//! real part.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotatedImage, Dataset, PartSpec, Split};
use crate::error::{Error, Result};
use crate::featstore::GrayImage;
use crate::geometry::{contains_within_slack, BBox};
use crate::priors::Layout;
use crate::proposals::{write_proposals, Proposal, ProposalMap, ProposalSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPart {
    pub name: String,
    /// Layout mean shared by all classes.
    pub mean: Layout,
    pub std: Layout,
    /// Added to `(dx, dy)` times the centered class index.
    pub class_shift: [f64; 2],
}

impl SynthPart {
    pub fn class_mean(&self, class: usize, n_classes: usize) -> Layout {
        let t = class as f64 - (n_classes as f64 - 1.0) / 2.0;
        let mut m = self.mean;
        m[0] += t * self.class_shift[0];
        m[1] += t * self.class_shift[1];
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
    pub width: usize,
    pub height: usize,
    /// Mean side of the object box in pixels.
    pub root_size: f64,
    pub root_log_size_std: f64,
    pub parts: Vec<SynthPart>,
    /// Grating amplitude of the object texture.
    pub separation: f64,
    /// Half-width in radians of the uniform grating phase jitter.
    pub phase_jitter: f64,
    /// Amplitude of the part textures.
    pub part_contrast: f64,
    pub noise_sigma: f64,
    /// Part-sized distractor windows per image.
    pub n_distractors: usize,
    /// Fraction of distractors placed inside the object box.
    pub inside_fraction: f64,
    /// Paint part texture into the distractor windows.
    pub paint_distractors: bool,
    /// Object-sized distractor windows per image.
    pub n_root_distractors: usize,
    /// Object-sized windows shifted off the object by 15 to 35 % of its size.
    pub n_root_near: usize,
    /// Jittered copies of every ground-truth box.
    pub n_jitter: usize,
    /// Jitter magnitude as a fraction of the box size; 0 disables copies.
    pub jitter: f64,
    pub p_part_absent: f64,
    /// Resample layouts until parts lie inside the object box.
    pub contain_parts: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let ln = f64::ln;
        Self {
            n_classes: 5,
            n_train_per_class: 30,
            n_test_per_class: 30,
            width: 224,
            height: 224,
            root_size: 104.0,
            root_log_size_std: 0.08,
            parts: vec![
                SynthPart {
                    name: "head".into(),
                    mean: [0.0, -0.24, ln(0.3), ln(0.3)],
                    std: [0.025, 0.025, 0.05, 0.05],
                    class_shift: [0.1, 0.02],
                },
                SynthPart {
                    name: "body".into(),
                    mean: [0.0, 0.16, ln(0.5), ln(0.4)],
                    std: [0.025, 0.025, 0.05, 0.05],
                    class_shift: [-0.05, 0.0],
                },
            ],
            separation: 0.3,
            phase_jitter: 0.5,
            part_contrast: 0.35,
            noise_sigma: 0.1,
            n_distractors: 20,
            inside_fraction: 0.5,
            paint_distractors: true,
            n_root_distractors: 4,
            n_root_near: 4,
            n_jitter: 3,
            jitter: 0.06,
            p_part_absent: 0.0,
            contain_parts: true,
        }
    }
}

impl SynthSpec {
    pub fn part_specs(&self) -> Vec<PartSpec> {
        std::iter::once(PartSpec::root())
            .chain(self.parts.iter().enumerate().map(|(i, p)| PartSpec {
                part_id: i + 1,
                name: p.name.clone(),
                keypoints: Vec::new(),
            }))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.parts.is_empty() {
            return Err(Error::InfeasibleSpec("need at least one class and one part".into()));
        }
        let big = self.root_size * (3.0 * self.root_log_size_std).exp();
        if big + 2.0 > self.width.min(self.height) as f64 {
            return Err(Error::InfeasibleSpec(format!(
                "object side up to {big:.1} px does not fit a {}x{} image",
                self.width, self.height
            )));
        }
        for p in &self.parts {
            let w = (p.mean[2] + 3.0 * p.std[2]).exp();
            let h = (p.mean[3] + 3.0 * p.std[3]).exp();
            if w >= 1.0 || h >= 1.0 {
                return Err(Error::InfeasibleSpec(format!("part {:?} larger than the object", p.name)));
            }
            if p.std.iter().any(|s| !(*s >= 0.0)) {
                return Err(Error::InfeasibleSpec(format!("negative std for part {:?}", p.name)));
            }
        }
        if !(0.0..=1.0).contains(&self.inside_fraction) || !(0.0..=1.0).contains(&self.p_part_absent) {
            return Err(Error::InfeasibleSpec("fractions must lie in [0, 1]".into()));
        }
        if self.noise_sigma < 0.0 || self.jitter < 0.0 || self.phase_jitter < 0.0 {
            return Err(Error::InfeasibleSpec("noise and jitter must be non-negative".into()));
        }
        Ok(())
    }
}

/// Draws one layout from a diagonal Gaussian.
pub fn sample_layout<R: Rng>(rng: &mut R, mean: &Layout, std: &Layout) -> Layout {
    let mut u = *mean;
    for d in 0..4 {
        u[d] += std[d] * standard_normal(rng);
    }
    u
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

/// Inverse of [`crate::priors::layout_of`].
pub fn layout_to_box(root: &BBox, u: &Layout) -> Result<BBox> {
    let (cx, cy) = root.center();
    BBox::from_center(
        cx + u[0] * root.width(),
        cy + u[1] * root.height(),
        root.width() * u[2].exp(),
        root.height() * u[3].exp(),
    )
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    /// Aligned with `dataset.images`.
    pub images: Vec<GrayImage>,
    pub proposals: ProposalMap,
    pub part_specs: Vec<PartSpec>,
}

impl SynthOutput {
    pub const MANIFEST: &'static str = "manifest.jsonl";
    pub const PROPOSALS: &'static str = "proposals.csv";
    pub const PARTS: &'static str = "parts.json";

    pub fn image(&self, image_id: u64) -> Option<&GrayImage> {
        let i = self.dataset.images.binary_search_by_key(&image_id, |r| r.image_id).ok()?;
        self.images.get(i)
    }

    /// Writes the manifest, part list, proposals and one PGM per image.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
        self.dataset.write_manifest(&dir.join(Self::MANIFEST))?;
        write_proposals(&dir.join(Self::PROPOSALS), &self.proposals)?;
        let parts = dir.join(Self::PARTS);
        std::fs::write(&parts, serde_json::to_string_pretty(&self.part_specs)?).map_err(|e| Error::io(&parts, e))?;
        for (rec, img) in self.dataset.images.iter().zip(&self.images) {
            img.write_pgm(&dir.join(&rec.path))?;
        }
        Ok(())
    }
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<f64>,
}

impl Canvas {
    /// Calls `f(x, y)` with pixel centers for every pixel whose center lies in `b`.
    fn paint(&mut self, b: &BBox, mut f: impl FnMut(f64, f64) -> Option<f64>) {
        let x0 = (b.x_min() - 0.5).ceil().max(0.0) as usize;
        let y0 = (b.y_min() - 0.5).ceil().max(0.0) as usize;
        let x1 = ((b.x_max() - 0.5).ceil().max(0.0) as usize).min(self.w);
        let y1 = ((b.y_max() - 0.5).ceil().max(0.0) as usize).min(self.h);
        for y in y0..y1 {
            for x in x0..x1 {
                if let Some(v) = f(x as f64 + 0.5, y as f64 + 0.5) {
                    self.px[y * self.w + x] = v;
                }
            }
        }
    }
}

fn rel(b: &BBox, x: f64, y: f64) -> (f64, f64) {
    ((x - b.x_min()) / b.width(), (y - b.y_min()) / b.height())
}

struct Textures {
    separation: f64,
    contrast: f64,
    theta: f64,
    phase: f64,
}

impl Textures {
    /// Class grating in object-box coordinates; extends beyond the box.
    fn object(&self, root: &BBox, x: f64, y: f64) -> f64 {
        let (u, v) = rel(root, x, y);
        let t = u * self.theta.cos() + v * self.theta.sin();
        0.5 + self.separation * (2.0 * PI * 2.0 * t + self.phase).sin()
    }

    fn part(&self, part: usize, b: &BBox, x: f64, y: f64) -> f64 {
        let (u, v) = rel(b, x, y);
        match part % 2 {
            // bright center, dark rim
            0 => {
                let r2 = (u - 0.5).powi(2) + (v - 0.5).powi(2);
                0.5 + self.contrast * (1.0 - 8.0 * r2).max(-1.0)
            }
            // horizontal bands
            _ => 0.5 + self.contrast * (2.0 * PI * 1.5 * v).cos(),
        }
    }
}

fn uniform_box<R: Rng>(rng: &mut R, w: f64, h: f64, width: f64, height: f64) -> Result<BBox> {
    let w = w.min(width - 1.0);
    let h = h.min(height - 1.0);
    let x = rng.random_range(0.0..=(width - w));
    let y = rng.random_range(0.0..=(height - h));
    BBox::from_xywh(x, y, w, h)
}

fn jittered<R: Rng>(rng: &mut R, b: &BBox, j: f64, width: f64, height: f64) -> Option<BBox> {
    let dx = rng.random_range(-j..=j) * b.width();
    let dy = rng.random_range(-j..=j) * b.height();
    let sw = rng.random_range(-j..=j).exp();
    let sh = rng.random_range(-j..=j).exp();
    let (cx, cy) = b.center();
    BBox::from_center(cx + dx, cy + dy, b.width() * sw, b.height() * sh)
        .ok()?
        .clip(width, height)
}

const DECOY_RING: f64 = 10.0;
const MAX_TRIES: usize = 200;

/// Generates a dataset; identical seeds give identical outputs.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_parts = spec.parts.len();
    let (wf, hf) = (spec.width as f64, spec.height as f64);

    let mut plan: Vec<(usize, Split)> = Vec::new();
    for i in 0..spec.n_train_per_class * spec.n_classes {
        plan.push((i % spec.n_classes, Split::Train));
    }
    for i in 0..spec.n_test_per_class * spec.n_classes {
        plan.push((i % spec.n_classes, Split::Test));
    }

    let mut records = Vec::with_capacity(plan.len());
    let mut images = Vec::with_capacity(plan.len());
    let mut proposals = ProposalMap::new();

    for (idx, (class, split)) in plan.into_iter().enumerate() {
        let image_id = idx as u64 + 1;
        let tex = Textures {
            separation: spec.separation,
            contrast: spec.part_contrast,
            theta: PI * class as f64 / spec.n_classes as f64,
            phase: rng.random_range(-spec.phase_jitter..=spec.phase_jitter),
        };

        let rw = spec.root_size * (spec.root_log_size_std * standard_normal(&mut rng)).exp();
        let rh = spec.root_size * (spec.root_log_size_std * standard_normal(&mut rng)).exp();
        let root = uniform_box(&mut rng, rw, rh, wf, hf)?;

        let mut gt_parts: Vec<Option<BBox>> = Vec::with_capacity(n_parts);
        for p in &spec.parts {
            let mean = p.class_mean(class, spec.n_classes);
            let mut b = None;
            for _ in 0..MAX_TRIES {
                let u = sample_layout(&mut rng, &mean, &p.std);
                let cand = layout_to_box(&root, &u)?;
                if !spec.contain_parts || contains_within_slack(&root, &cand, 0.0) {
                    b = Some(cand);
                    break;
                }
            }
            let b = b.ok_or_else(|| Error::InfeasibleSpec(format!("cannot place part {:?} inside the object", p.name)))?;
            let absent = spec.p_part_absent > 0.0 && rng.random::<f64>() < spec.p_part_absent;
            gt_parts.push((!absent).then_some(b));
        }

        // distractor windows, alternating over parts
        let mut decoys: Vec<(usize, BBox)> = Vec::with_capacity(spec.n_distractors);
        let n_inside = (spec.n_distractors as f64 * spec.inside_fraction).round() as usize;
        for d in 0..spec.n_distractors {
            let p = d % n_parts;
            let sp = &spec.parts[p];
            let mean = sp.class_mean(class, spec.n_classes);
            let dw = root.width() * (mean[2] + sp.std[2] * standard_normal(&mut rng)).exp();
            let dh = root.height() * (mean[3] + sp.std[3] * standard_normal(&mut rng)).exp();
            let inside = d < n_inside;
            let mut chosen = None;
            for _ in 0..MAX_TRIES {
                let cand = if inside {
                    let x = rng.random_range(root.x_min()..=(root.x_max() - dw).max(root.x_min()));
                    let y = rng.random_range(root.y_min()..=(root.y_max() - dh).max(root.y_min()));
                    BBox::from_xywh(x, y, dw, dh)?.clip(wf, hf)
                } else {
                    uniform_box(&mut rng, dw, dh, wf, hf).ok()
                };
                let Some(cand) = cand else { continue };
                let clear = gt_parts.iter().flatten().all(|g| cand.intersection_area(g) == 0.0);
                let placed_ok = if inside {
                    contains_within_slack(&root, &cand, 0.0)
                } else {
                    !contains_within_slack(&root, &cand, 10.0)
                };
                if clear && placed_ok {
                    chosen = Some(cand);
                    break;
                }
            }
            if let Some(c) = chosen {
                decoys.push((p, c));
            }
        }

        // raster
        let mut canvas = Canvas {
            w: spec.width,
            h: spec.height,
            px: vec![0.5; spec.width * spec.height],
        };
        let bg_theta = rng.random_range(0.0..PI);
        let bg_phase = rng.random_range(0.0..2.0 * PI);
        let bg_period = rng.random_range(30.0..60.0);
        let full = BBox::new(0.0, 0.0, wf, hf)?;
        canvas.paint(&full, |x, y| {
            let t = x * bg_theta.cos() + y * bg_theta.sin();
            Some(0.5 + 0.1 * (2.0 * PI * t / bg_period + bg_phase).sin())
        });
        canvas.paint(&root, |x, y| Some(tex.object(&root, x, y)));
        if spec.paint_distractors {
            for (p, d) in &decoys {
                let ring = BBox::new(
                    d.x_min() - DECOY_RING,
                    d.y_min() - DECOY_RING,
                    d.x_max() + DECOY_RING,
                    d.y_max() + DECOY_RING,
                )?;
                canvas.paint(&ring, |x, y| Some(tex.object(&root, x, y)));
                canvas.paint(d, |x, y| Some(tex.part(*p, d, x, y)));
            }
        }
        for (p, g) in gt_parts.iter().enumerate() {
            if let Some(g) = g {
                canvas.paint(g, |x, y| Some(tex.part(p, g, x, y)));
            }
        }
        let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("valid sigma");
        let data: Vec<f32> = canvas
            .px
            .iter()
            .map(|v| {
                let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                ((v + n).clamp(0.0, 1.0) * 255.0).round() as u8 as f32 * (1.0 / 255.0)
            })
            .collect();
        images.push(GrayImage::new(spec.width, spec.height, data)?);

        // proposals
        let mut boxes: Vec<BBox> = vec![root];
        boxes.extend(gt_parts.iter().flatten().copied());
        if spec.jitter > 0.0 {
            let gts: Vec<BBox> = boxes.clone();
            for g in &gts {
                for _ in 0..spec.n_jitter {
                    if let Some(j) = jittered(&mut rng, g, spec.jitter, wf, hf) {
                        boxes.push(j);
                    }
                }
            }
        }
        for _ in 0..spec.n_root_distractors {
            let w = spec.root_size * (spec.root_log_size_std * standard_normal(&mut rng)).exp();
            let h = spec.root_size * (spec.root_log_size_std * standard_normal(&mut rng)).exp();
            boxes.push(uniform_box(&mut rng, w, h, wf, hf)?);
        }
        for _ in 0..spec.n_root_near {
            let a = rng.random_range(0.0..2.0 * PI);
            let r = rng.random_range(0.15..0.35);
            let moved = BBox::from_center(
                root.center().0 + r * a.cos() * root.width(),
                root.center().1 + r * a.sin() * root.height(),
                root.width(),
                root.height(),
            )?;
            if let Some(b) = moved.clip(wf, hf) {
                boxes.push(b);
            }
        }
        boxes.extend(decoys.iter().map(|(_, d)| *d));
        boxes.shuffle(&mut rng);
        let mut set = ProposalSet::new(image_id);
        set.regions = boxes
            .into_iter()
            .enumerate()
            .map(|(i, bbox)| Proposal {
                region_id: i as u32,
                bbox,
            })
            .collect();
        proposals.insert(image_id, set);

        let parts: BTreeMap<String, Option<BBox>> = spec
            .parts
            .iter()
            .zip(&gt_parts)
            .map(|(p, b)| (p.name.clone(), *b))
            .collect();
        records.push(AnnotatedImage {
            image_id,
            path: format!("images/{image_id:06}.pgm"),
            label: class as u32 + 1,
            object_box: root,
            keypoints: Vec::new(),
            split,
            size: Some([spec.width as u32, spec.height as u32]),
            parts: Some(parts),
        });
    }

    Ok(SynthOutput {
        dataset: Dataset::new(records),
        images,
        proposals,
        part_specs: spec.part_specs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ground_truth_parts, PartDerivation};

    fn small() -> SynthSpec {
        SynthSpec {
            n_classes: 2,
            n_train_per_class: 2,
            n_test_per_class: 1,
            width: 160,
            height: 160,
            root_size: 80.0,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn no_distractors_no_jitter_gives_gt_proposals() {
        let spec = SynthSpec {
            n_distractors: 0,
            n_root_distractors: 0,
            n_root_near: 0,
            jitter: 0.0,
            ..small()
        };
        let out = generate(&spec, 4).unwrap();
        for rec in &out.dataset.images {
            let gt = ground_truth_parts(rec, &out.part_specs, &PartDerivation::default());
            let mut want: Vec<[f64; 4]> = gt.iter().flatten().map(|b| b.to_array()).collect();
            let mut got: Vec<[f64; 4]> = out.proposals[&rec.image_id].boxes().map(|b| b.to_array()).collect();
            want.sort_by(|a, b| a.partial_cmp(b).unwrap());
            got.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(got, want);
        }
    }

    #[test]
    fn same_seed_identical() {
        let a = generate(&small(), 9).unwrap();
        let b = generate(&small(), 9).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.images, b.images);
        assert_eq!(a.proposals, b.proposals);
        let c = generate(&small(), 10).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn parts_contained_and_counts() {
        let out = generate(&small(), 1).unwrap();
        assert_eq!(out.dataset.len(), 6);
        assert_eq!(out.dataset.split(Split::Test).count(), 2);
        for rec in &out.dataset.images {
            for b in rec.parts.as_ref().unwrap().values().flatten() {
                assert!(contains_within_slack(&rec.object_box, b, 10.0));
            }
            let n = out.proposals[&rec.image_id].len();
            assert!(n >= 3 + 4 + 9, "{n}");
        }
    }

    #[test]
    fn layout_sampler_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mean = [0.1, -0.2, -1.2, -0.9];
        let std = [0.05, 0.02, 0.1, 0.3];
        let n = 1000;
        let mut acc = [0.0; 4];
        for _ in 0..n {
            let u = sample_layout(&mut rng, &mean, &std);
            for d in 0..4 {
                acc[d] += u[d] / n as f64;
            }
        }
        for d in 0..4 {
            assert!((acc[d] - mean[d]).abs() < 3.0 * std[d] / (n as f64).sqrt(), "dim {d}");
        }
    }

    #[test]
    fn layout_box_inverse() {
        let root = BBox::new(10.0, 20.0, 110.0, 80.0).unwrap();
        let u = [0.1, -0.2, -1.0, -0.5];
        let b = layout_to_box(&root, &u).unwrap();
        let back = crate::priors::layout_of(&root, &b);
        for d in 0..4 {
            assert!((back[d] - u[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn infeasible_specs() {
        let spec = SynthSpec {
            root_size: 300.0,
            ..small()
        };
        assert!(matches!(generate(&spec, 0), Err(Error::InfeasibleSpec(_))));
        let mut spec = small();
        spec.parts[0].mean[2] = 0.1;
        assert!(matches!(generate(&spec, 0), Err(Error::InfeasibleSpec(_))));
    }

    #[test]
    fn write_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate(&small(), 2).unwrap();
        out.write(dir.path()).unwrap();
        let ds = Dataset::read_manifest(&dir.path().join(SynthOutput::MANIFEST)).unwrap();
        assert_eq!(ds, out.dataset);
        let img = GrayImage::read_pgm(&dir.path().join(&ds.images[0].path)).unwrap();
        assert_eq!(&img, &out.images[0]);
        let props = crate::proposals::load_proposals(&dir.path().join(SynthOutput::PROPOSALS)).unwrap();
        assert_eq!(props, out.proposals);
    }
}
