//! Layout-conditioned image generation: the request/response contract,
//! a procedural synthesizer, a directory-exchange adapter for external
//! backends, and the world synthesizer that produces the real datasets.

pub mod external;
pub mod glyph;
pub mod oracle;
pub mod procedural;
pub mod world;

use serde::{Deserialize, Serialize};

use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::prompt::{GroundingInput, PromptSpec};

pub use external::ExternalGenerator;
pub use glyph::render_glyph;
pub use oracle::TemplateOracle;
pub use procedural::ProceduralGenerator;
pub use world::{default_catalog, synthesize_world, WorldConfig};

/// Length of the optional style vector.
pub const STYLE_DIM: usize = 8;

pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: PromptSpec,
    pub grounding: GroundingInput,
    /// Weight in `[0, 1]` given to the requested boxes.
    pub grounding_strength: f64,
    pub guidance_scale: f64,
    pub style_vector: Option<Vec<f64>>,
    pub seed: u64,
    pub count: usize,
}

impl GenerationRequest {
    pub fn new(prompt: PromptSpec, grounding: GroundingInput, seed: u64) -> Self {
        Self {
            prompt,
            grounding,
            grounding_strength: 1.0,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            style_vector: None,
            seed,
            count: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.grounding_strength) {
            return Err(Error::Config(format!(
                "grounding strength {} outside [0, 1]",
                self.grounding_strength
            )));
        }
        if !(self.guidance_scale > 0.0) {
            return Err(Error::Config(format!(
                "guidance scale must be positive, got {}",
                self.guidance_scale
            )));
        }
        if self.count == 0 {
            return Err(Error::Config("request count must be at least 1".into()));
        }
        if self.grounding.is_empty() {
            return Err(Error::Precondition("request has no grounding entities".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSample {
    /// Generated image whose annotation is the requested layout.
    pub image: ImageRecord,
    pub grounding_used: GroundingInput,
}

/// A conditioned image generator. Implementations hold no mutable state, so
/// calls may run concurrently.
pub trait Generator: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<GeneratedSample>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FidelityProfile {
    pub base_quality: f64,
    /// Standard deviation of per-coordinate box displacement.
    pub jitter_scale: f64,
    pub drop_prob: f64,
    /// Expected number of spurious glyphs per image.
    pub distractor_rate: f64,
}

impl Default for FidelityProfile {
    fn default() -> Self {
        Self {
            base_quality: 0.7,
            jitter_scale: 0.05,
            drop_prob: 0.15,
            distractor_rate: 0.3,
        }
    }
}

impl FidelityProfile {
    /// Every requested object rendered exactly at its box, nothing else.
    pub fn perfect() -> Self {
        Self {
            base_quality: 1.0,
            jitter_scale: 0.0,
            drop_prob: 0.0,
            distractor_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("fidelity.{name} = {v} outside [0, 1]")))
            }
        };
        unit("base_quality", self.base_quality)?;
        unit("drop_prob", self.drop_prob)?;
        for (name, v) in [("jitter_scale", self.jitter_scale), ("distractor_rate", self.distractor_rate)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("fidelity.{name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    #[default]
    Procedural,
    External,
}
