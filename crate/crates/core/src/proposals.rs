//! Region proposals: CSV ingestion, a dense multi-scale window proposer, and
//! proposal recall.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub region_id: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProposalSet {
    pub image_id: u64,
    pub regions: Vec<Proposal>,
}

impl ProposalSet {
    pub fn new(image_id: u64) -> Self {
        Self {
            image_id,
            regions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn boxes(&self) -> impl Iterator<Item = &BBox> {
        self.regions.iter().map(|p| &p.bbox)
    }
}

pub type ProposalMap = BTreeMap<u64, ProposalSet>;

#[derive(Debug, Deserialize)]
struct Row {
    image_id: u64,
    region_id: u32,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

/// Reads `image_id,region_id,x_min,y_min,x_max,y_max` rows (header required).
pub fn load_proposals(path: &Path) -> Result<ProposalMap> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    parse_proposals(&bytes, path)
}

fn parse_proposals(bytes: &[u8], path: &Path) -> Result<ProposalMap> {
    let mut map = ProposalMap::new();
    let mut seen: BTreeMap<u64, BTreeSet<u32>> = BTreeMap::new();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let expected = ["image_id", "region_id", "x_min", "y_min", "x_max", "y_max"];
    let headers = rdr.headers()?.clone();
    if !headers.is_empty() && headers.iter().ne(expected) {
        return Err(Error::malformed(path, 1, format!("expected header {}", expected.join(","))));
    }
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::malformed(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let rec: Row = record
            .deserialize(Some(&headers))
            .map_err(|e| Error::malformed(path, line, e.to_string()))?;
        let bbox = BBox::new(rec.x_min, rec.y_min, rec.x_max, rec.y_max)
            .map_err(|e| Error::malformed(path, line, e.to_string()))?;
        if !seen.entry(rec.image_id).or_default().insert(rec.region_id) {
            return Err(Error::malformed(
                path,
                line,
                format!("duplicate region_id {} for image {}", rec.region_id, rec.image_id),
            ));
        }
        map.entry(rec.image_id)
            .or_insert_with(|| ProposalSet::new(rec.image_id))
            .regions
            .push(Proposal {
                region_id: rec.region_id,
                bbox,
            });
    }
    Ok(map)
}

pub fn write_proposals(path: &Path, map: &ProposalMap) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "image_id,region_id,x_min,y_min,x_max,y_max").expect("vec write");
    for set in map.values() {
        for p in &set.regions {
            let [a, b, c, d] = p.bbox.to_array();
            writeln!(out, "{},{},{a},{b},{c},{d}", set.image_id, p.region_id).expect("vec write");
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Dense sliding windows.
///
/// For each scale `s` and aspect ratio `a` (width over height) the window is
/// `s*sqrt(a)` wide and `s/sqrt(a)` tall; it slides with a stride of
/// `stride_fraction` times its own size. Windows larger than the image get a
/// single position at the origin. Everything is clipped to the image and
/// ordered scale-major, then aspect, then row-major.
pub fn dense_propose(
    image_id: u64,
    image_w: f64,
    image_h: f64,
    scales: &[f64],
    aspect_ratios: &[f64],
    stride_fraction: f64,
) -> Result<ProposalSet> {
    if scales.is_empty() || aspect_ratios.is_empty() {
        return Err(Error::InvalidArgument("scales and aspect ratios must be nonempty".into()));
    }
    if !(stride_fraction > 0.0 && stride_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "stride fraction {stride_fraction} not in (0, 1]"
        )));
    }
    let mut set = ProposalSet::new(image_id);
    if image_w <= 0.0 || image_h <= 0.0 {
        return Ok(set);
    }
    let positions = |extent: f64, win: f64, stride: f64| -> Vec<f64> {
        if win >= extent {
            return vec![0.0];
        }
        // small tolerance so an exact fit is not lost to rounding
        let n = ((extent - win) / stride + 1e-9).floor() as usize + 1;
        (0..n).map(|k| k as f64 * stride).collect()
    };
    let mut next_id = 0u32;
    for &s in scales {
        for &a in aspect_ratios {
            let (ww, wh) = (s * a.sqrt(), s / a.sqrt());
            if !(ww > 0.0 && wh > 0.0) {
                return Err(Error::InvalidArgument(format!("bad window size for scale {s} aspect {a}")));
            }
            let xs = positions(image_w, ww, stride_fraction * ww);
            let ys = positions(image_h, wh, stride_fraction * wh);
            for &y in &ys {
                for &x in &xs {
                    let b = BBox::new(x, y, x + ww, y + wh)?;
                    if let Some(clipped) = b.clip(image_w, image_h) {
                        set.regions.push(Proposal {
                            region_id: next_id,
                            bbox: clipped,
                        });
                        next_id += 1;
                    }
                }
            }
        }
    }
    Ok(set)
}

/// `part -> [(threshold, fraction)]`, thresholds in input order.
pub type RecallTable = BTreeMap<String, Vec<(f64, f64)>>;

/// Fraction of ground-truth boxes covered by at least one proposal with IoU at
/// or above each threshold.
///
/// `ground_truth` maps part name to `(image_id, box)` pairs.
pub fn recall(
    proposals: &ProposalMap,
    ground_truth: &BTreeMap<String, Vec<(u64, BBox)>>,
    thresholds: &[f64],
) -> Result<RecallTable> {
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(Error::InvalidArgument(format!("threshold {t} not in (0, 1]")));
    }
    let mut table = RecallTable::new();
    for (part, boxes) in ground_truth {
        if boxes.is_empty() {
            return Err(Error::EmptyGroundTruth(part.clone()));
        }
        let best: Vec<f64> = boxes
            .iter()
            .map(|(image_id, gt)| {
                proposals
                    .get(image_id)
                    .map(|set| set.boxes().map(|b| iou(b, gt)).fold(0.0, f64::max))
                    .unwrap_or(0.0)
            })
            .collect();
        let row = thresholds
            .iter()
            .map(|&t| {
                let hit = best.iter().filter(|&&v| v >= t).count();
                (t, hit as f64 / best.len() as f64)
            })
            .collect();
        table.insert(part.clone(), row);
    }
    Ok(table)
}
