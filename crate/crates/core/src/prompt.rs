//! Text prompts and grounding embeddings for layout-conditioned generation.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{AnnotationSet, BBox, Category, ClassId};
use crate::error::{Error, Result};

pub const PROMPT_PREFIX: &str = "A photo of ";

pub const DEFAULT_SCENE_ENV: &str = "demonstrating ultra high detail, 4K, 8K, ultra-realistic, crisp edges, smooth, hyper-detailed textures";

pub const DEFAULT_NEGATIVE: &str = "blurry, overlapping objects, distorted proportions, monochrome, grayscale, bad hands, deformed, lowres, error, normal quality, watermark, duplicate, worst quality, obscured faces, low visibility, unnatural colors, long body, bad anatomy, missing fingers, extra digit, fewer digits, cropped";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub scene_env: String,
    pub negative: String,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            scene_env: DEFAULT_SCENE_ENV.into(),
            negative: DEFAULT_NEGATIVE.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundingConfig {
    pub fourier_frequencies: usize,
    pub label_dim: usize,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            fourier_frequencies: 8,
            label_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub positive: String,
    pub negative: String,
}

/// Ordered `(class, box)` pairs that condition a generation request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingInput {
    entities: Vec<(ClassId, BBox)>,
}

impl GroundingInput {
    pub fn new(entities: Vec<(ClassId, BBox)>) -> Result<Self> {
        if entities.is_empty() {
            return Err(Error::Precondition("grounding input needs at least one entity".into()));
        }
        Ok(Self { entities })
    }

    pub fn from_annotation(a: &AnnotationSet) -> Result<Self> {
        Self::new(a.instances.iter().map(|i| (i.class_id, i.bbox)).collect())
    }

    pub fn entities(&self) -> &[(ClassId, BBox)] {
        &self.entities
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }
}

/// Spelled-out count; numbers above ten fall back to digits.
pub fn number_word(n: usize) -> Result<String> {
    const WORDS: [&str; 10] = [
        "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    ];
    match n {
        0 => Err(Error::Precondition("count must be at least one".into())),
        1..=10 => Ok(WORDS[n - 1].to_string()),
        _ => Ok(n.to_string()),
    }
}

/// Plural of a (possibly multi-word) class name; only the last word changes.
pub fn pluralize(name: &str) -> String {
    const IRREGULAR: &[(&str, &str)] = &[
        ("person", "persons"),
        ("sheep", "sheep"),
        ("skis", "skis"),
        ("scissors", "scissors"),
        ("mouse", "mice"),
        ("knife", "knives"),
        ("broccoli", "broccoli"),
    ];
    let (head, last) = match name.rfind(' ') {
        Some(i) => (&name[..=i], &name[i + 1..]),
        None => ("", name),
    };
    if let Some((_, plural)) = IRREGULAR.iter().find(|(s, _)| *s == last) {
        return format!("{head}{plural}");
    }
    let sibilant = ["s", "x", "z", "ch", "sh"].iter().any(|suf| last.ends_with(suf));
    if sibilant {
        format!("{name}es")
    } else {
        format!("{name}s")
    }
}

/// Renders `"A photo of two umbrellas, person, and boat, <scene>"`.
///
/// Classes are grouped and counted, groups sorted by descending count and then
/// by class id, so the result does not depend on instance order.
pub fn build_prompt(
    a: &AnnotationSet,
    catalog: &[Category],
    cfg: &PromptConfig,
) -> Result<PromptSpec> {
    if a.is_empty() {
        return Err(Error::Precondition(format!(
            "cannot build a prompt for image {} without instances",
            a.image_id
        )));
    }
    let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    for inst in &a.instances {
        *counts.entry(inst.class_id).or_default() += 1;
    }
    let mut groups: Vec<(ClassId, usize)> = counts.into_iter().collect();
    groups.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));

    let phrases = groups
        .iter()
        .map(|&(class, n)| {
            let name = catalog
                .get(class.index())
                .map(|c| c.name.as_str())
                .ok_or_else(|| Error::Precondition(format!("class {class} has no name")))?;
            Ok(if n == 1 {
                name.to_string()
            } else {
                format!("{} {}", number_word(n)?, pluralize(name))
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let objects = match phrases.len() {
        1 => phrases[0].clone(),
        k => format!("{}, and {}", phrases[..k - 1].join(", "), phrases[k - 1]),
    };
    let mut positive = format!("{PROMPT_PREFIX}{objects}");
    let scene = cfg.scene_env.trim();
    if !scene.is_empty() {
        positive.push_str(", ");
        positive.push_str(scene);
    }
    Ok(PromptSpec {
        positive,
        negative: cfg.negative.clone(),
    })
}

/// Prompt used for single-class fallback generation: just the class name.
pub fn class_prompt(name: &str, cfg: &PromptConfig) -> PromptSpec {
    PromptSpec {
        positive: name.to_string(),
        negative: cfg.negative.clone(),
    }
}

/// `sin(2^k π p)`, `cos(2^k π p)` for each box coordinate `p` and band `k`,
/// laid out coordinate-major, then band, then (sin, cos).
pub fn fourier_embed(b: &BBox, frequencies: usize) -> Vec<f64> {
    fourier_features(&b.to_array(), frequencies)
}

/// Same layout as [`fourier_embed`] for arbitrary coordinate slices.
pub fn fourier_features(coords: &[f64], frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * coords.len() * frequencies);
    for &p in coords {
        let mut scale = PI;
        for _ in 0..frequencies {
            let (s, c) = (scale * p).sin_cos();
            out.push(s);
            out.push(c);
            scale *= 2.0;
        }
    }
    out
}

/// Deterministic unit vector standing in for a text embedding of the class.
pub fn label_embed(class: ClassId, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6c61_6265_6c00_0000 ^ class.0 as u64);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// One row per entity: `label_embed || fourier_embed`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingEmbedding {
    pub per_entity: Array2<f64>,
}

pub fn encode_grounding(g: &GroundingInput, cfg: &GroundingConfig) -> GroundingEmbedding {
    let width = cfg.label_dim + 8 * cfg.fourier_frequencies;
    let mut per_entity = Array2::zeros((g.len(), width));
    for (row, (class, bbox)) in g.entities().iter().enumerate() {
        let values = label_embed(*class, cfg.label_dim)
            .into_iter()
            .chain(fourier_embed(bbox, cfg.fourier_frequencies));
        for (col, v) in values.enumerate() {
            per_entity[[row, col]] = v;
        }
    }
    GroundingEmbedding { per_entity }
}
