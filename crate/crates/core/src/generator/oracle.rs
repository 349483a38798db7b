use super::glyph::{class_hue, rgb_to_hsv};
use crate::data::{BBox, ClassId, ImageRecord};
use crate::detector::{Detection, DetectionModel};
use crate::error::Result;

/// Non-learned detector for glyph scenes: labels saturated pixels by their
/// nearest class hue and reports the bounding box of every 4-connected
/// same-class region with score 1.
#[derive(Clone, Debug)]
pub struct TemplateOracle {
    hues: Vec<f64>,
    tolerance: f64,
}

const MIN_SATURATION: f64 = 0.3;

impl TemplateOracle {
    pub fn new(num_classes: usize) -> Self {
        let hues: Vec<f64> = (0..num_classes).map(|c| class_hue(ClassId(c as u32))).collect();
        let mut spacing = 0.5f64;
        for (i, a) in hues.iter().enumerate() {
            for b in &hues[i + 1..] {
                spacing = spacing.min(hue_distance(*a, *b));
            }
        }
        Self {
            hues,
            tolerance: (0.5 * spacing).min(0.02),
        }
    }

    fn label(&self, rgb: [f64; 3]) -> Option<usize> {
        let (h, s, _) = rgb_to_hsv(rgb);
        if s < MIN_SATURATION {
            return None;
        }
        self.hues
            .iter()
            .enumerate()
            .map(|(c, &hc)| (c, hue_distance(h, hc)))
            .filter(|&(_, d)| d <= self.tolerance)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c)
    }
}

fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

impl DetectionModel for TemplateOracle {
    fn detect(&self, image: &ImageRecord, score_threshold: f64) -> Result<Vec<Detection>> {
        if score_threshold > 1.0 {
            return Ok(Vec::new());
        }
        let (h, w, _) = image.pixels.dim();
        let px = &image.pixels;
        let labels: Vec<Option<usize>> = (0..h * w)
            .map(|i| self.label([px[[i / w, i % w, 0]], px[[i / w, i % w, 1]], px[[i / w, i % w, 2]]]))
            .collect();
        let mut seen = vec![false; h * w];
        let mut dets = Vec::new();
        for start in 0..h * w {
            let Some(class) = labels[start] else { continue };
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut stack = vec![start];
            let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
            while let Some(i) = stack.pop() {
                let (y, x) = (i / w, i % w);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
                let mut visit = |j: usize| {
                    if !seen[j] && labels[j] == Some(class) {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < h {
                    visit(i + w);
                }
            }
            dets.push(Detection {
                query: dets.len(),
                class_id: ClassId(class as u32),
                bbox: BBox::new(
                    x0 as f64 / w as f64,
                    y0 as f64 / h as f64,
                    x1 as f64 / w as f64,
                    y1 as f64 / h as f64,
                )?,
                score: 1.0,
            });
        }
        Ok(dets)
    }
}
