//! Annotated image records, CUB-200-2011 ingestion, and part box derivation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// The fifteen CUB keypoints, in the dataset's `parts.txt` id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeypointName {
    Back,
    Beak,
    Belly,
    Breast,
    Crown,
    Forehead,
    LeftEye,
    LeftLeg,
    LeftWing,
    Nape,
    RightEye,
    RightLeg,
    RightWing,
    Tail,
    Throat,
}

impl KeypointName {
    pub const ALL: [KeypointName; 15] = [
        KeypointName::Back,
        KeypointName::Beak,
        KeypointName::Belly,
        KeypointName::Breast,
        KeypointName::Crown,
        KeypointName::Forehead,
        KeypointName::LeftEye,
        KeypointName::LeftLeg,
        KeypointName::LeftWing,
        KeypointName::Nape,
        KeypointName::RightEye,
        KeypointName::RightLeg,
        KeypointName::RightWing,
        KeypointName::Tail,
        KeypointName::Throat,
    ];

    /// Keypoints that make up the head part.
    pub const HEAD: [KeypointName; 7] = [
        KeypointName::Beak,
        KeypointName::Forehead,
        KeypointName::Crown,
        KeypointName::LeftEye,
        KeypointName::RightEye,
        KeypointName::Nape,
        KeypointName::Throat,
    ];

    /// 1-based id used in `parts/part_locs.txt`.
    pub fn from_cub_id(id: u32) -> Option<Self> {
        Self::ALL.get((id as usize).checked_sub(1)?).copied()
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            KeypointName::Back => "back",
            KeypointName::Beak => "beak",
            KeypointName::Belly => "belly",
            KeypointName::Breast => "breast",
            KeypointName::Crown => "crown",
            KeypointName::Forehead => "forehead",
            KeypointName::LeftEye => "left_eye",
            KeypointName::LeftLeg => "left_leg",
            KeypointName::LeftWing => "left_wing",
            KeypointName::Nape => "nape",
            KeypointName::RightEye => "right_eye",
            KeypointName::RightLeg => "right_leg",
            KeypointName::RightWing => "right_wing",
            KeypointName::Tail => "tail",
            KeypointName::Throat => "throat",
        }
    }
}

impl fmt::Display for KeypointName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A keypoint annotation. Serialized as `[name, x, y, visible]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(KeypointName, f64, f64, bool)", into = "(KeypointName, f64, f64, bool)")]
pub struct Keypoint {
    pub name: KeypointName,
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl From<(KeypointName, f64, f64, bool)> for Keypoint {
    fn from((name, x, y, visible): (KeypointName, f64, f64, bool)) -> Self {
        Self {
            name,
            x,
            y,
            visible,
        }
    }
}

impl From<Keypoint> for (KeypointName, f64, f64, bool) {
    fn from(k: Keypoint) -> Self {
        (k.name, k.x, k.y, k.visible)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// One manifest record.
///
/// `size` and `parts` are optional extensions: `size` enables clipping of
/// derived boxes, and `parts` carries explicit part boxes (used by synthetic
/// data) that take precedence over keypoint derivation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub image_id: u64,
    pub path: String,
    pub label: u32,
    #[serde(rename = "box")]
    pub object_box: BBox,
    pub keypoints: Vec<Keypoint>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<[u32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parts: Option<BTreeMap<String, Option<BBox>>>,
}

/// A semantic part. Part id 0 is the whole object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub part_id: usize,
    pub name: String,
    #[serde(default)]
    pub keypoints: Vec<KeypointName>,
}

impl PartSpec {
    pub fn root() -> Self {
        Self {
            part_id: 0,
            name: "root".into(),
            keypoints: Vec::new(),
        }
    }

    /// Root, head and body.
    pub fn bird_defaults() -> Vec<PartSpec> {
        vec![
            Self::root(),
            PartSpec {
                part_id: 1,
                name: "head".into(),
                keypoints: KeypointName::HEAD.to_vec(),
            },
            PartSpec {
                part_id: 2,
                name: "body".into(),
                keypoints: KeypointName::ALL.to_vec(),
            },
        ]
    }

    /// Checks that part ids are dense, start at the root, and names are unique.
    pub fn validate(specs: &[PartSpec]) -> Result<()> {
        if specs.is_empty() || specs[0].part_id != 0 {
            return Err(Error::InvalidArgument("part 0 must be the root".into()));
        }
        for (i, s) in specs.iter().enumerate() {
            if s.part_id != i {
                return Err(Error::InvalidArgument(format!(
                    "part ids must be dense, found {} at position {i}",
                    s.part_id
                )));
            }
            if specs[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::InvalidArgument(format!("duplicate part name {:?}", s.name)));
            }
        }
        Ok(())
    }
}

/// Padding rule for keypoint-derived part boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartDerivation {
    /// Fraction of the tight-box diagonal added on each side.
    pub pad_fraction: f64,
    /// Minimum side length in pixels; 0 disables the floor.
    pub min_side: f64,
}

impl Default for PartDerivation {
    fn default() -> Self {
        Self {
            pad_fraction: 0.1,
            min_side: 16.0,
        }
    }
}

/// Part boxes derived from keypoints, indexed by part id.
///
/// The root gets the annotated object box. A part with no visible keypoints
/// is `None`.
pub fn derive_part_boxes(
    img: &AnnotatedImage,
    specs: &[PartSpec],
    rule: &PartDerivation,
) -> Vec<Option<BBox>> {
    specs
        .iter()
        .map(|spec| {
            if spec.part_id == 0 {
                return Some(img.object_box);
            }
            let pts: Vec<(f64, f64)> = img
                .keypoints
                .iter()
                .filter(|k| k.visible && spec.keypoints.contains(&k.name))
                .map(|k| (k.x, k.y))
                .collect();
            derive_box(&pts, rule, img.size)
        })
        .collect()
}

fn derive_box(pts: &[(f64, f64)], rule: &PartDerivation, size: Option<[u32; 2]>) -> Option<BBox> {
    let (first, rest) = pts.split_first()?;
    let (mut x0, mut y0, mut x1, mut y1) = (first.0, first.1, first.0, first.1);
    for &(x, y) in rest {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let pad = rule.pad_fraction * (x1 - x0).hypot(y1 - y0);
    x0 -= pad;
    y0 -= pad;
    x1 += pad;
    y1 += pad;
    let grow = |lo: &mut f64, hi: &mut f64| {
        let side = *hi - *lo;
        if side < rule.min_side {
            let extra = 0.5 * (rule.min_side - side);
            *lo -= extra;
            *hi += extra;
        }
    };
    grow(&mut x0, &mut x1);
    grow(&mut y0, &mut y1);
    let b = BBox::new(x0, y0, x1, y1).ok()?;
    match size {
        Some([w, h]) => b.clip(w as f64, h as f64),
        None => Some(b),
    }
}

/// An ingested dataset, ordered by image id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn new(mut images: Vec<AnnotatedImage>) -> Self {
        images.sort_by_key(|i| i.image_id);
        Self { images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &AnnotatedImage> {
        self.images.iter().filter(move |i| i.split == split)
    }

    pub fn get(&self, image_id: u64) -> Option<&AnnotatedImage> {
        self.images
            .binary_search_by_key(&image_id, |i| i.image_id)
            .ok()
            .map(|i| &self.images[i])
    }

    /// Distinct labels in ascending order.
    pub fn labels(&self) -> Vec<u32> {
        let mut l: Vec<u32> = self.images.iter().map(|i| i.label).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for img in &self.images {
            serde_json::to_writer(&mut w, img)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_manifest(path: &Path) -> Result<Self> {
        let file = open(path)?;
        let mut images = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let img: AnnotatedImage = serde_json::from_str(&line)
                .map_err(|e| Error::malformed(path, i + 1, e.to_string()))?;
            images.push(img);
        }
        Ok(Self::new(images))
    }
}

/// Ground-truth boxes for every part of an image, indexed by part id.
///
/// Explicit `parts` in the record win over keypoint derivation.
pub fn ground_truth_parts(
    img: &AnnotatedImage,
    specs: &[PartSpec],
    rule: &PartDerivation,
) -> Vec<Option<BBox>> {
    match &img.parts {
        Some(explicit) => specs
            .iter()
            .map(|s| {
                if s.part_id == 0 {
                    Some(img.object_box)
                } else {
                    explicit.get(&s.name).copied().flatten()
                }
            })
            .collect(),
        None => derive_part_boxes(img, specs, rule),
    }
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

/// Whitespace-separated rows of a CUB text file, with 1-based line numbers.
fn read_rows(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let file = open(path)?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<String> = line.split_whitespace().map(str::to_owned).collect();
        if !fields.is_empty() {
            rows.push((i + 1, fields));
        }
    }
    Ok(rows)
}

fn field<T: FromStr>(path: &Path, line: usize, fields: &[String], idx: usize) -> Result<T> {
    let raw = fields
        .get(idx)
        .ok_or_else(|| Error::malformed(path, line, format!("expected at least {} fields", idx + 1)))?;
    raw.parse()
        .map_err(|_| Error::malformed(path, line, format!("cannot parse field {} ({raw:?})", idx + 1)))
}

fn expect_fields(path: &Path, line: usize, fields: &[String], n: usize) -> Result<()> {
    if fields.len() != n {
        return Err(Error::malformed(
            path,
            line,
            format!("expected {n} fields, found {}", fields.len()),
        ));
    }
    Ok(())
}

/// Loads a CUB-200-2011 distribution directory.
pub fn load_cub(root: &Path) -> Result<Dataset> {
    let images_path = root.join("images.txt");
    let boxes_path = root.join("bounding_boxes.txt");
    let labels_path = root.join("image_class_labels.txt");
    let split_path = root.join("train_test_split.txt");
    let parts_path = root.join("parts").join("part_locs.txt");

    let mut paths: Vec<(u64, String)> = Vec::new();
    for (line, f) in read_rows(&images_path)? {
        expect_fields(&images_path, line, &f, 2)?;
        paths.push((field(&images_path, line, &f, 0)?, f[1].clone()));
    }

    let mut boxes = HashMap::new();
    for (line, f) in read_rows(&boxes_path)? {
        expect_fields(&boxes_path, line, &f, 5)?;
        let id: u64 = field(&boxes_path, line, &f, 0)?;
        let vals: Vec<f64> = (1..5)
            .map(|i| field(&boxes_path, line, &f, i))
            .collect::<Result<_>>()?;
        let b = BBox::from_xywh(vals[0], vals[1], vals[2], vals[3])
            .map_err(|e| Error::malformed(&boxes_path, line, e.to_string()))?;
        boxes.insert(id, b);
    }

    let mut labels = HashMap::new();
    for (line, f) in read_rows(&labels_path)? {
        expect_fields(&labels_path, line, &f, 2)?;
        labels.insert(
            field::<u64>(&labels_path, line, &f, 0)?,
            field::<u32>(&labels_path, line, &f, 1)?,
        );
    }

    let mut splits = HashMap::new();
    for (line, f) in read_rows(&split_path)? {
        expect_fields(&split_path, line, &f, 2)?;
        let is_train: u8 = field(&split_path, line, &f, 1)?;
        let split = match is_train {
            1 => Split::Train,
            0 => Split::Test,
            _ => return Err(Error::malformed(&split_path, line, "split flag must be 0 or 1")),
        };
        splits.insert(field::<u64>(&split_path, line, &f, 0)?, split);
    }

    let mut keypoints: HashMap<u64, Vec<Keypoint>> = HashMap::new();
    for (line, f) in read_rows(&parts_path)? {
        expect_fields(&parts_path, line, &f, 5)?;
        let id: u64 = field(&parts_path, line, &f, 0)?;
        let part: u32 = field(&parts_path, line, &f, 1)?;
        let name = KeypointName::from_cub_id(part)
            .ok_or_else(|| Error::malformed(&parts_path, line, format!("unknown part id {part}")))?;
        let visible: u8 = field(&parts_path, line, &f, 4)?;
        keypoints.entry(id).or_default().push(Keypoint {
            name,
            x: field(&parts_path, line, &f, 2)?,
            y: field(&parts_path, line, &f, 3)?,
            visible: visible != 0,
        });
    }

    let missing = |path: &Path, id: u64| {
        let lines = read_rows(path).map(|r| r.last().map_or(0, |l| l.0)).unwrap_or(0);
        Error::malformed(path, lines + 1, format!("no entry for image {id}"))
    };

    let mut images = Vec::with_capacity(paths.len());
    for (id, path) in paths {
        let object_box = *boxes.get(&id).ok_or_else(|| missing(&boxes_path, id))?;
        let label = *labels.get(&id).ok_or_else(|| missing(&labels_path, id))?;
        let split = *splits.get(&id).ok_or_else(|| missing(&split_path, id))?;
        let mut kps = keypoints.remove(&id).unwrap_or_default();
        kps.sort_by_key(|k| k.name);
        images.push(AnnotatedImage {
            image_id: id,
            path,
            label,
            object_box,
            keypoints: kps,
            split,
            size: None,
            parts: None,
        });
    }
    Ok(Dataset::new(images))
}
