use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::glyph::{flat_background, render_glyph_faded, textured_background};
use super::{FidelityProfile, GeneratedSample, GenerationRequest, Generator, STYLE_DIM};
use crate::data::{quantize_pixel, AnnotationSet, BBox, Canvas, ClassId, ImageId, ImageRecord, Instance, Provenance};
use crate::error::{Error, Result};
use crate::prompt::{encode_grounding, label_embed, GroundingConfig};
use crate::seeds::{derive_seed, hash_f64s};

/// Renders requested layouts as class glyphs with controllable defects.
///
/// The layout is read back from the grounding embedding: the class is the
/// nearest label embedding and each coordinate is recovered from its lowest
/// Fourier band.
#[derive(Clone, Debug)]
pub struct ProceduralGenerator {
    pub fidelity: FidelityProfile,
    pub canvas: Canvas,
    pub grounding: GroundingConfig,
    pub num_classes: usize,
}

impl ProceduralGenerator {
    pub fn new(fidelity: FidelityProfile, num_classes: usize) -> Result<Self> {
        fidelity.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("generator needs at least one class".into()));
        }
        Ok(Self {
            fidelity,
            canvas: Canvas::default(),
            grounding: GroundingConfig::default(),
            num_classes,
        })
    }

    /// Recovers `(class, box)` pairs from the grounding embedding.
    fn decode_layout(&self, req: &GenerationRequest) -> Result<Vec<(ClassId, BBox)>> {
        let cfg = &self.grounding;
        if cfg.fourier_frequencies == 0 || cfg.label_dim == 0 {
            return Err(Error::Config("grounding embedding needs label and Fourier features".into()));
        }
        let emb = encode_grounding(&req.grounding, cfg);
        let labels: Vec<Vec<f64>> = (0..self.num_classes)
            .map(|c| label_embed(ClassId(c as u32), cfg.label_dim))
            .collect();
        let mut out = Vec::with_capacity(emb.per_entity.nrows());
        for row in emb.per_entity.rows() {
            let mut best = (0, f64::NEG_INFINITY);
            for (c, l) in labels.iter().enumerate() {
                let dot: f64 = l.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                if dot > best.1 {
                    best = (c, dot);
                }
            }
            let coord = |k: usize| {
                let base = cfg.label_dim + 2 * cfg.fourier_frequencies * k;
                (row[base].atan2(row[base + 1]) / std::f64::consts::PI).clamp(0.0, 1.0)
            };
            let bbox = BBox::new(coord(0), coord(1), coord(2), coord(3)).map_err(|e| {
                Error::Generator(format!("grounding box could not be decoded: {e}"))
            })?;
            out.push((ClassId(best.0 as u32), bbox));
        }
        Ok(out)
    }

    fn background(&self, req: &GenerationRequest) -> Result<Array3<f64>> {
        match &req.style_vector {
            None => Ok(flat_background(self.canvas)),
            Some(v) if v.len() == STYLE_DIM => Ok(textured_background(self.canvas, hash_f64s(v))),
            Some(v) => Err(Error::Config(format!(
                "style vector has length {}, expected {STYLE_DIM}",
                v.len()
            ))),
        }
    }

    fn render_one(&self, req: &GenerationRequest, layout: &[(ClassId, BBox)], index: usize) -> Result<ImageRecord> {
        let f = &self.fidelity;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(req.seed, index as u64));
        let mut pixels = self.background(req)?;
        let unit = Normal::new(0.0, 1.0).expect("unit normal");

        let distractors = if f.distractor_rate > 0.0 {
            Poisson::new(f.distractor_rate).expect("positive rate").sample(&mut rng) as usize
        } else {
            0
        };
        for _ in 0..distractors {
            let class = ClassId(rng.gen_range(0..self.num_classes) as u32);
            let (w, h) = (rng.gen_range(0.15..0.35), rng.gen_range(0.15..0.35));
            let (x, y) = (rng.gen_range(0.0..1.0 - w), rng.gen_range(0.0..1.0 - h));
            let b = BBox::new(x, y, x + w, y + h)?;
            render_glyph_faded(class, &b, &mut pixels, 0.0);
        }

        let beta = req.grounding_strength;
        for &(class, b) in layout {
            // All draws happen whether or not the object is kept, so a
            // change in one knob does not reshuffle the others.
            let u_drop: f64 = rng.gen();
            let u_fade: f64 = rng.gen();
            let shift: [f64; 4] = std::array::from_fn(|_| unit.sample(&mut rng));
            let (rx, ry): (f64, f64) = (rng.gen(), rng.gen());
            if u_drop < f.drop_prob {
                continue;
            }
            let (w, h) = (b.width(), b.height());
            let x0 = beta * b.x_min() + (1.0 - beta) * rx * (1.0 - w);
            let y0 = beta * b.y_min() + (1.0 - beta) * ry * (1.0 - h);
            let j = f.jitter_scale;
            let mut xs = [x0 + j * shift[0], x0 + w + j * shift[2]];
            let mut ys = [y0 + j * shift[1], y0 + h + j * shift[3]];
            xs.sort_by(f64::total_cmp);
            ys.sort_by(f64::total_cmp);
            let min_extent = 2.0 / self.canvas.width.min(self.canvas.height) as f64;
            let placed = BBox::from_cxcywh_clamped(
                0.5 * (xs[0] + xs[1]),
                0.5 * (ys[0] + ys[1]),
                (xs[1] - xs[0]).max(min_extent),
                (ys[1] - ys[0]).max(min_extent),
            );
            render_glyph_faded(class, &placed, &mut pixels, (1.0 - f.base_quality) * u_fade);
        }

        let sigma = 0.1 * (1.0 - f.base_quality);
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).expect("finite sigma");
            pixels.mapv_inplace(|v| v + noise.sample(&mut rng));
        }
        pixels.mapv_inplace(quantize_pixel);
        let annotation = AnnotationSet::new(
            ImageId(index as u64),
            req.grounding
                .entities()
                .iter()
                .map(|&(c, b)| Instance::new(c, b))
                .collect(),
            Provenance::Generated,
        );
        Ok(ImageRecord::new(pixels, annotation))
    }
}

impl Generator for ProceduralGenerator {
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<GeneratedSample>> {
        req.validate()?;
        let layout = self.decode_layout(req)?;
        (0..req.count)
            .map(|i| {
                Ok(GeneratedSample {
                    image: self.render_one(req, &layout, i)?,
                    grounding_used: req.grounding.clone(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectionModel;
    use crate::generator::TemplateOracle;
    use crate::prompt::{GroundingInput, PromptSpec};

    fn request(entities: &[(u32, [f64; 4])], seed: u64) -> GenerationRequest {
        let g = GroundingInput::new(
            entities
                .iter()
                .map(|(c, b)| (ClassId(*c), BBox::from_array(*b).unwrap()))
                .collect(),
        )
        .unwrap();
        let prompt = PromptSpec {
            positive: "A photo of test".into(),
            negative: String::new(),
        };
        GenerationRequest {
            count: 3,
            ..GenerationRequest::new(prompt, g, seed)
        }
    }

    const LAYOUT: [(u32, [f64; 4]); 3] = [
        (0, [0.0625, 0.0625, 0.3125, 0.375]),
        (5, [0.5, 0.125, 0.875, 0.4375]),
        (11, [0.25, 0.5625, 0.625, 0.9375]),
    ];

    #[test]
    fn decodes_the_requested_layout() {
        let gen = ProceduralGenerator::new(FidelityProfile::perfect(), 12).unwrap();
        let req = request(&LAYOUT, 1);
        let layout = gen.decode_layout(&req).unwrap();
        for ((c, b), (c0, b0)) in layout.iter().zip(req.grounding.entities()) {
            assert_eq!(c, c0);
            for (x, y) in b.to_array().iter().zip(b0.to_array()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perfect_fidelity_is_recovered_by_the_oracle() {
        let gen = ProceduralGenerator::new(FidelityProfile::perfect(), 12).unwrap();
        let oracle = TemplateOracle::new(12);
        for sample in gen.generate(&request(&LAYOUT, 9)).unwrap() {
            let dets = oracle.detect(&sample.image, 1.0).unwrap();
            assert_eq!(dets.len(), 3);
            for &(c, b) in sample.grounding_used.entities() {
                assert!(dets.iter().any(|d| d.class_id == c && d.bbox.iou(&b) == 1.0), "{c}: {dets:?}");
            }
        }
    }

    #[test]
    fn dropping_everything_leaves_no_requested_glyphs() {
        let f = FidelityProfile {
            drop_prob: 1.0,
            ..FidelityProfile::perfect()
        };
        let gen = ProceduralGenerator::new(f, 12).unwrap();
        for s in gen.generate(&request(&LAYOUT, 2)).unwrap() {
            assert!(TemplateOracle::new(12).detect(&s.image, 0.0).unwrap().is_empty());
            assert_eq!(s.image.annotation.len(), 3);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let gen = ProceduralGenerator::new(FidelityProfile::default(), 12).unwrap();
        let mut req = request(&LAYOUT, 77);
        req.style_vector = Some(vec![0.1; STYLE_DIM]);
        let a = gen.generate(&req).unwrap();
        let b = gen.generate(&req).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_ne!(a[0].image.pixels, a[1].image.pixels);
    }

    #[test]
    fn rejects_bad_style_length() {
        let gen = ProceduralGenerator::new(FidelityProfile::default(), 12).unwrap();
        let mut req = request(&LAYOUT, 1);
        req.style_vector = Some(vec![0.0; 3]);
        assert!(matches!(gen.generate(&req), Err(Error::Config(_))));
    }

    #[test]
    fn drop_probability_is_monotone() {
        let oracle = TemplateOracle::new(12);
        let mut prev: Option<Vec<usize>> = None;
        for p in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
            let f = FidelityProfile {
                drop_prob: p,
                ..FidelityProfile::perfect()
            };
            let gen = ProceduralGenerator::new(f, 12).unwrap();
            let mut req = request(&LAYOUT, 5);
            req.count = 20;
            let counts: Vec<usize> = gen
                .generate(&req)
                .unwrap()
                .iter()
                .map(|s| oracle.detect(&s.image, 0.0).unwrap().len())
                .collect();
            if let Some(prev) = &prev {
                assert!(counts.iter().zip(prev).all(|(a, b)| a <= b));
            }
            prev = Some(counts);
        }
    }

    #[test]
    fn zero_grounding_strength_moves_objects() {
        let f = FidelityProfile::perfect();
        let gen = ProceduralGenerator::new(f, 12).unwrap();
        let mut req = request(&LAYOUT[..1], 3);
        req.grounding_strength = 0.0;
        req.count = 8;
        let oracle = TemplateOracle::new(12);
        let want = req.grounding.entities()[0].1;
        let moved = gen
            .generate(&req)
            .unwrap()
            .iter()
            .filter(|s| oracle.detect(&s.image, 0.0).unwrap()[0].bbox.iou(&want) < 1.0)
            .count();
        assert!(moved > 0);
    }
}
