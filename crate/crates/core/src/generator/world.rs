use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::glyph::{render_glyph, textured_background};
use crate::data::{
    quantize_pixel, validate_catalog, AnnotationSet, BBox, Canvas, Category, ClassId, Dataset, ImageId, ImageRecord,
    Instance, Provenance,
};
use crate::error::{Error, Result};
use crate::seeds::derive_seed;

const NAMES: [&str; 20] = [
    "person",
    "bicycle",
    "car",
    "motorcycle",
    "airplane",
    "bus",
    "train",
    "truck",
    "boat",
    "traffic light",
    "fire hydrant",
    "stop sign",
    "bench",
    "bird",
    "cat",
    "dog",
    "horse",
    "sheep",
    "cow",
    "umbrella",
];

/// Catalog of `n` classes with ids `0..n`.
pub fn default_catalog(n: usize) -> Vec<Category> {
    (0..n)
        .map(|i| Category {
            id: ClassId(i as u32),
            name: NAMES.get(i).map_or_else(|| format!("class {i}"), |s| s.to_string()),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub num_classes: usize,
    pub num_images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side lengths in pixels.
    pub min_size: usize,
    pub max_size: usize,
    pub noise: f64,
    pub canvas: Canvas,
    /// Number of contiguous class groups ("scene contexts"); `0` or `1`
    /// disables grouping.
    pub contexts: usize,
    /// Probability that an object comes from its image's context group
    /// rather than from all classes.
    pub context_affinity: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_classes: 12,
            num_images: 200,
            min_objects: 1,
            max_objects: 4,
            min_size: 12,
            max_size: 22,
            noise: 0.02,
            canvas: Canvas::default(),
            contexts: 0,
            context_affinity: 0.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("world needs at least one class".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "invalid object range {}..={}",
                self.min_objects, self.max_objects
            )));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(Error::Config(format!("invalid size range {}..={}", self.min_size, self.max_size)));
        }
        if self.contexts > self.num_classes {
            return Err(Error::Config(format!(
                "{} contexts for {} classes",
                self.contexts, self.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.context_affinity) {
            return Err(Error::Config(format!(
                "context_affinity {} outside [0, 1]",
                self.context_affinity
            )));
        }
        let side = self.canvas.width.min(self.canvas.height);
        // Every object keeps a one-pixel gap, so the smallest objects must
        // fit side by side.
        let cells = (side / (self.min_size + 1)).pow(2);
        if self.max_size > side || cells < self.max_objects {
            return Err(Error::Config(format!(
                "canvas {}x{} too small for {} objects of {}..={} px",
                self.canvas.width, self.canvas.height, self.max_objects, self.min_size, self.max_size
            )));
        }
        Ok(())
    }
}

/// Boxes as pixel rectangles `[x0, y0, x1, y1)`.
type PixelRect = [usize; 4];

fn separated(a: &PixelRect, b: &PixelRect) -> bool {
    a[2] < b[0] || b[2] < a[0] || a[3] < b[1] || b[3] < a[1]
}

fn place(rng: &mut ChaCha8Rng, cfg: &WorldConfig, placed: &[PixelRect]) -> Result<PixelRect> {
    let (w, h) = (cfg.canvas.width, cfg.canvas.height);
    for attempt in 0..400 {
        let size = |rng: &mut ChaCha8Rng| {
            if attempt < 100 {
                rng.gen_range(cfg.min_size..=cfg.max_size)
            } else {
                cfg.min_size
            }
        };
        let (bw, bh) = (size(rng), size(rng));
        let (x, y) = (rng.gen_range(0..=w - bw), rng.gen_range(0..=h - bh));
        let r = [x, y, x + bw, y + bh];
        if placed.iter().all(|p| separated(p, &r)) {
            return Ok(r);
        }
    }
    Err(Error::Config(format!(
        "could not place {} objects without overlap on a {w}x{h} canvas",
        placed.len() + 1
    )))
}

/// Repeatedly shuffled deck of class ids.
struct Deck {
    classes: Vec<ClassId>,
    cards: Vec<ClassId>,
}

impl Deck {
    fn new(classes: Vec<ClassId>) -> Self {
        Self {
            classes,
            cards: Vec::new(),
        }
    }

    fn deal(&mut self, rng: &mut ChaCha8Rng) -> ClassId {
        if self.cards.is_empty() {
            self.cards = self.classes.clone();
            self.cards.shuffle(rng);
        }
        self.cards.pop().expect("refilled deck")
    }
}

/// Glyph scenes with non-overlapping, pixel-aligned objects. Classes are dealt
/// from repeatedly shuffled decks, so class frequencies stay balanced.
///
/// With `contexts > 1` the catalog is cut into that many contiguous groups;
/// each image picks a group and draws each object from it with probability
/// `context_affinity`, otherwise from the whole catalog.
pub fn synthesize_world(catalog: &[Category], cfg: &WorldConfig, seed: u64) -> Result<Dataset> {
    validate_catalog(catalog)?;
    cfg.validate()?;
    if catalog.len() != cfg.num_classes {
        return Err(Error::Config(format!(
            "catalog has {} classes, world config {}",
            catalog.len(),
            cfg.num_classes
        )));
    }
    let mut deck_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let mut deck = Deck::new(catalog.iter().map(|c| c.id).collect());
    let groups = cfg.contexts.max(1);
    let mut group_decks: Vec<Deck> = (0..groups)
        .map(|g| {
            let lo = g * catalog.len() / groups;
            let hi = (g + 1) * catalog.len() / groups;
            Deck::new(catalog[lo..hi].iter().map(|c| c.id).collect())
        })
        .collect();
    let mut records = Vec::with_capacity(cfg.num_images);
    let (w, h) = (cfg.canvas.width as f64, cfg.canvas.height as f64);
    for i in 0..cfg.num_images {
        let image_seed = derive_seed(seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed);
        let mut pixels = textured_background(cfg.canvas, derive_seed(image_seed, 1));
        let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let context = rng.gen_range(0..groups);
        let mut rects = Vec::with_capacity(n);
        let mut instances = Vec::with_capacity(n);
        for _ in 0..n {
            let class = if groups > 1 && rng.gen::<f64>() < cfg.context_affinity {
                group_decks[context].deal(&mut deck_rng)
            } else {
                deck.deal(&mut deck_rng)
            };
            let r = place(&mut rng, cfg, &rects)?;
            rects.push(r);
            let bbox = BBox::new(r[0] as f64 / w, r[1] as f64 / h, r[2] as f64 / w, r[3] as f64 / h)?;
            render_glyph(class, &bbox, &mut pixels);
            instances.push(Instance::new(class, bbox));
        }
        if cfg.noise > 0.0 {
            let noise = Normal::new(0.0, cfg.noise).expect("finite noise");
            pixels.mapv_inplace(|v| v + noise.sample(&mut rng));
        }
        pixels.mapv_inplace(quantize_pixel);
        records.push(ImageRecord::new(
            pixels,
            AnnotationSet::new(ImageId(i as u64), instances, Provenance::Real),
        ));
    }
    Dataset::new(catalog.to_vec(), records)
}
