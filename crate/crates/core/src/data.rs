//! Domain types for annotated images, datasets and incremental task schedules.
//!
//! Boxes are normalized `[x_min, y_min, x_max, y_max]` everywhere. The dataset
//! file is a COCO-flavoured JSON document; pixels live next to it as PNG files.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Decimal places kept when boxes are written to disk.
pub const COORD_DECIMALS: i32 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl ClassId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub u64);

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An entry of the class catalog.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: ClassId,
    pub name: String,
}

/// Validates a catalog: ids dense in `0..len`, unique, names non-empty.
pub fn validate_catalog(catalog: &[Category]) -> Result<()> {
    let mut seen = HashSet::new();
    for cat in catalog {
        if cat.name.trim().is_empty() {
            return Err(Error::Validation(format!("class {} has an empty name", cat.id)));
        }
        if cat.id.index() >= catalog.len() {
            return Err(Error::Validation(format!(
                "class id {} outside catalog of size {}",
                cat.id,
                catalog.len()
            )));
        }
        if !seen.insert(cat.id) {
            return Err(Error::Validation(format!("duplicate class id {}", cat.id)));
        }
    }
    Ok(())
}

/// Normalized axis-aligned box with `0 <= min < max <= 1` on both axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let ok = [x_min, y_min, x_max, y_max]
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
            && x_min < x_max
            && y_min < y_max;
        if !ok {
            return Err(Error::Validation(format!(
                "invalid box [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn from_array(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// Builds a box from center/size coordinates, clamping into the unit
    /// square. Degenerate results are widened to a minimal positive extent.
    pub fn from_cxcywh_clamped(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        const MIN_EXTENT: f64 = 1e-6;
        let clamp_axis = |c: f64, s: f64| {
            let mut lo = (c - 0.5 * s).clamp(0.0, 1.0);
            let mut hi = (c + 0.5 * s).clamp(0.0, 1.0);
            if hi - lo < MIN_EXTENT {
                if hi >= 1.0 - MIN_EXTENT {
                    lo = 1.0 - MIN_EXTENT;
                    hi = 1.0;
                } else {
                    hi = lo + MIN_EXTENT;
                }
            }
            (lo, hi)
        };
        let (x_min, x_max) = clamp_axis(cx, w);
        let (y_min, y_max) = clamp_axis(cy, h);
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn full() -> Self {
        Self {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 1.0,
            y_max: 1.0,
        }
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn to_cxcywh(&self) -> [f64; 4] {
        [
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
            self.x_max - self.x_min,
            self.y_max - self.y_min,
        ]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        inter / (self.area() + other.area() - inter)
    }

    /// Copy with every coordinate rounded to the on-disk precision.
    pub fn rounded(&self) -> Result<Self> {
        Self::from_array(self.to_array().map(round_coord))
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = <[f64; 4]>::deserialize(d)?;
        BBox::from_array(v).map_err(serde::de::Error::custom)
    }
}

pub fn round_coord(v: f64) -> f64 {
    let scale = 10f64.powi(COORD_DECIMALS);
    (v * scale).round() / scale
}

/// Where an instance label came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    #[default]
    Annotated,
    Pseudo,
}

impl LabelSource {
    fn is_annotated(&self) -> bool {
        matches!(self, LabelSource::Annotated)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Instance {
    pub class_id: ClassId,
    pub bbox: BBox,
    pub source: LabelSource,
}

impl Instance {
    pub fn new(class_id: ClassId, bbox: BBox) -> Self {
        Self {
            class_id,
            bbox,
            source: LabelSource::Annotated,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Real,
    Generated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub image_id: ImageId,
    pub instances: Vec<Instance>,
    pub provenance: Provenance,
}

impl AnnotationSet {
    pub fn new(image_id: ImageId, instances: Vec<Instance>, provenance: Provenance) -> Self {
        Self {
            image_id,
            instances,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.instances.iter().map(|i| i.class_id).collect()
    }

    /// Copy keeping only instances whose class is in `keep`.
    pub fn filtered(&self, keep: &BTreeSet<ClassId>) -> AnnotationSet {
        AnnotationSet {
            image_id: self.image_id,
            instances: self
                .instances
                .iter()
                .filter(|i| keep.contains(&i.class_id))
                .copied()
                .collect(),
            provenance: self.provenance,
        }
    }
}

/// Canvas geometry shared by every image of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for Canvas {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 3,
        }
    }
}

impl Canvas {
    pub fn pixel_area(&self) -> f64 {
        (self.height * self.width) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    /// `height x width x channels`, values in `[0, 1]`.
    pub pixels: Array3<f64>,
    pub annotation: AnnotationSet,
}

impl ImageRecord {
    pub fn new(mut pixels: Array3<f64>, annotation: AnnotationSet) -> Self {
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self { pixels, annotation }
    }

    pub fn image_id(&self) -> ImageId {
        self.annotation.image_id
    }

    pub fn canvas(&self) -> Canvas {
        let (height, width, channels) = self.pixels.dim();
        Canvas {
            height,
            width,
            channels,
        }
    }
}

/// Ordered partition of the catalog into incremental phases.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<ClassId>>", into = "Vec<Vec<ClassId>>")]
pub struct TaskSchedule {
    phases: Vec<BTreeSet<ClassId>>,
}

impl TaskSchedule {
    pub fn new(phases: Vec<Vec<ClassId>>) -> Result<Self> {
        if phases.is_empty() {
            return Err(Error::Validation("schedule has no phases".into()));
        }
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(phases.len());
        for (k, phase) in phases.into_iter().enumerate() {
            if phase.is_empty() {
                return Err(Error::Validation(format!("phase {k} is empty")));
            }
            let set: BTreeSet<ClassId> = phase.into_iter().collect();
            for c in &set {
                if !seen.insert(*c) {
                    return Err(Error::Validation(format!(
                        "class {c} appears in more than one phase"
                    )));
                }
            }
            out.push(set);
        }
        Ok(Self { phases: out })
    }

    /// Consecutive class-id blocks, e.g. `[8, 4]` gives `{0..7}, {8..11}`.
    pub fn contiguous(sizes: &[usize]) -> Result<Self> {
        let mut next = 0u32;
        let phases = sizes
            .iter()
            .map(|&n| {
                let phase: Vec<ClassId> = (next..next + n as u32).map(ClassId).collect();
                next += n as u32;
                phase
            })
            .collect();
        Self::new(phases)
    }

    /// Parses the `"8+4"` shorthand for [`TaskSchedule::contiguous`].
    pub fn parse_shorthand(s: &str) -> Result<Self> {
        let sizes = s
            .split('+')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad schedule shorthand '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::contiguous(&sizes)
    }

    pub fn num_phases(&self) -> usize {
        self.phases.len()
    }

    pub fn phase(&self, k: usize) -> &BTreeSet<ClassId> {
        &self.phases[k]
    }

    pub fn phases(&self) -> &[BTreeSet<ClassId>] {
        &self.phases
    }

    /// Union of phases `0..=k`.
    pub fn classes_through(&self, k: usize) -> BTreeSet<ClassId> {
        self.phases[..=k].iter().flatten().copied().collect()
    }

    pub fn num_classes(&self) -> usize {
        self.phases.iter().map(|p| p.len()).sum()
    }

    /// Checks that the phases cover exactly the catalog.
    pub fn validate_against(&self, catalog: &[Category]) -> Result<()> {
        let all: BTreeSet<ClassId> = self.phases.iter().flatten().copied().collect();
        let cat: BTreeSet<ClassId> = catalog.iter().map(|c| c.id).collect();
        if all != cat {
            return Err(Error::Validation(format!(
                "schedule covers {} classes but catalog has {}",
                all.len(),
                cat.len()
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            record: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("schedule serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

impl TryFrom<Vec<Vec<ClassId>>> for TaskSchedule {
    type Error = Error;
    fn try_from(v: Vec<Vec<ClassId>>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TaskSchedule> for Vec<Vec<ClassId>> {
    fn from(s: TaskSchedule) -> Self {
        s.phases.into_iter().map(|p| p.into_iter().collect()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub catalog: Vec<Category>,
    pub records: Vec<ImageRecord>,
}

impl Dataset {
    pub fn new(catalog: Vec<Category>, records: Vec<ImageRecord>) -> Result<Self> {
        let ds = Self { catalog, records };
        ds.validate()?;
        Ok(ds)
    }

    pub fn empty(catalog: Vec<Category>) -> Self {
        Self {
            catalog,
            records: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_catalog(&self.catalog)?;
        let mut ids = HashSet::new();
        let canvas = self.records.first().map(|r| r.canvas());
        for r in &self.records {
            if !ids.insert(r.image_id()) {
                return Err(Error::Validation(format!("duplicate image id {}", r.image_id())));
            }
            if Some(r.canvas()) != canvas {
                return Err(Error::Validation(format!(
                    "image {} has canvas {:?}, expected {:?}",
                    r.image_id(),
                    r.canvas(),
                    canvas
                )));
            }
            for inst in &r.annotation.instances {
                if inst.class_id.index() >= self.catalog.len() {
                    return Err(Error::Validation(format!(
                        "image {} references unknown class {}",
                        r.image_id(),
                        inst.class_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn canvas(&self) -> Option<Canvas> {
        self.records.first().map(|r| r.canvas())
    }

    pub fn class_name(&self, id: ClassId) -> Option<&str> {
        self.catalog.get(id.index()).map(|c| c.name.as_str())
    }

    pub fn annotations(&self) -> impl Iterator<Item = &AnnotationSet> {
        self.records.iter().map(|r| &r.annotation)
    }

    pub fn instance_count(&self) -> usize {
        self.records.iter().map(|r| r.annotation.len()).sum()
    }
}

/// Images of `d` holding at least one instance of phase `phase_index`, with
/// annotations reduced to that phase's classes.
pub fn split_by_schedule(d: &Dataset, s: &TaskSchedule, phase_index: usize) -> Result<Dataset> {
    if phase_index >= s.num_phases() {
        return Err(Error::Precondition(format!(
            "phase index {phase_index} out of range for {} phases",
            s.num_phases()
        )));
    }
    let keep = s.phase(phase_index);
    let records = d
        .records
        .iter()
        .filter_map(|r| {
            let ann = r.annotation.filtered(keep);
            (!ann.is_empty()).then(|| ImageRecord {
                pixels: r.pixels.clone(),
                annotation: ann,
            })
        })
        .collect();
    Ok(Dataset {
        catalog: d.catalog.clone(),
        records,
    })
}

/// Same as [`split_by_schedule`] but over several phases at once.
pub fn split_by_classes(d: &Dataset, keep: &BTreeSet<ClassId>) -> Dataset {
    let records = d
        .records
        .iter()
        .filter_map(|r| {
            let ann = r.annotation.filtered(keep);
            (!ann.is_empty()).then(|| ImageRecord {
                pixels: r.pixels.clone(),
                annotation: ann,
            })
        })
        .collect();
    Dataset {
        catalog: d.catalog.clone(),
        records,
    }
}

/// Instance count per catalog class (zero entries included).
pub fn class_instance_counts(d: &Dataset) -> BTreeMap<ClassId, usize> {
    let mut counts: BTreeMap<ClassId, usize> = d.catalog.iter().map(|c| (c.id, 0)).collect();
    for inst in d.records.iter().flat_map(|r| &r.annotation.instances) {
        *counts.entry(inst.class_id).or_default() += 1;
    }
    counts
}

// ---- file format -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format_version: u32,
    categories: Vec<Category>,
    images: Vec<ImageEntry>,
    annotations: Vec<AnnotationEntry>,
}

#[derive(Serialize, Deserialize)]
struct ImageEntry {
    id: ImageId,
    height: usize,
    width: usize,
    #[serde(default)]
    channels: Option<usize>,
    #[serde(default)]
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file_name: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationEntry {
    image_id: ImageId,
    category_id: ClassId,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "LabelSource::is_annotated")]
    source: LabelSource,
}

fn image_file_name(id: ImageId) -> String {
    format!("images/{:08}.png", id.0)
}

/// Writes the annotation document to `path` and pixels as PNGs under
/// `<parent>/images/`.
pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let root = path.parent().unwrap_or(Path::new("."));
    if !d.records.is_empty() {
        let dir = root.join("images");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut images = Vec::with_capacity(d.records.len());
    let mut annotations = Vec::new();
    for r in &d.records {
        let canvas = r.canvas();
        let file_name = image_file_name(r.image_id());
        save_png(&r.pixels, &root.join(&file_name))?;
        images.push(ImageEntry {
            id: r.image_id(),
            height: canvas.height,
            width: canvas.width,
            channels: Some(canvas.channels),
            provenance: r.annotation.provenance,
            file_name: Some(file_name),
        });
        for inst in &r.annotation.instances {
            annotations.push(AnnotationEntry {
                image_id: r.image_id(),
                category_id: inst.class_id,
                bbox: inst.bbox.to_array().map(round_coord),
                source: inst.source,
            });
        }
    }
    let doc = DatasetFile {
        format_version: FORMAT_VERSION,
        categories: d.catalog.clone(),
        images,
        annotations,
    };
    let text = serde_json::to_string_pretty(&doc).expect("dataset serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: DatasetFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        record: format!("{} (line {})", path.display(), e.line()),
        message: e.to_string(),
    })?;
    if doc.format_version != FORMAT_VERSION {
        return Err(Error::Parse {
            record: path.display().to_string(),
            message: format!("unsupported format_version {}", doc.format_version),
        });
    }
    validate_catalog(&doc.categories)?;
    let root = path.parent().unwrap_or(Path::new("."));

    let mut by_image: BTreeMap<ImageId, Vec<Instance>> = BTreeMap::new();
    for (k, a) in doc.annotations.iter().enumerate() {
        let bbox = BBox::from_array(a.bbox).map_err(|e| {
            Error::Validation(format!("annotation #{k} (image {}): {e}", a.image_id))
        })?;
        by_image.entry(a.image_id).or_default().push(Instance {
            class_id: a.category_id,
            bbox,
            source: a.source,
        });
    }

    let mut records = Vec::with_capacity(doc.images.len());
    for entry in &doc.images {
        let canvas = Canvas {
            height: entry.height,
            width: entry.width,
            channels: entry.channels.unwrap_or(3),
        };
        let pixels = match &entry.file_name {
            Some(name) => load_png(&root.join(name), canvas)?,
            None => Array3::zeros((canvas.height, canvas.width, canvas.channels)),
        };
        let instances = by_image.remove(&entry.id).unwrap_or_default();
        records.push(ImageRecord::new(
            pixels,
            AnnotationSet::new(entry.id, instances, entry.provenance),
        ));
    }
    if let Some((id, _)) = by_image.into_iter().next() {
        return Err(Error::Parse {
            record: format!("annotation for image {id}"),
            message: "image id not listed under images".into(),
        });
    }
    Dataset::new(doc.categories, records)
}

/// Pixel values are quantized to 8 bits on disk.
pub fn quantize_pixel(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub(crate) fn save_png(pixels: &Array3<f64>, path: &Path) -> Result<()> {
    let (h, w, c) = pixels.dim();
    if c != 3 {
        return Err(Error::Validation(format!("PNG export needs 3 channels, got {c}")));
    }
    let raw: Vec<u8> = pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Validation("pixel buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

pub(crate) fn load_png(path: &PathBuf, canvas: Canvas) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    if img.height() as usize != canvas.height || img.width() as usize != canvas.width {
        return Err(Error::Validation(format!(
            "{} is {}x{}, annotation says {}x{}",
            path.display(),
            img.height(),
            img.width(),
            canvas.height,
            canvas.width
        )));
    }
    let data: Vec<f64> = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Array3::from_shape_vec((canvas.height, canvas.width, 3), data)
        .map_err(|e| Error::Validation(e.to_string()))
}
