//! Set-prediction loss: Hungarian matching per decoder layer, then
//! classification NLL plus L1 and GIoU box terms.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use super::geometry::{cxcywh_to_xyxy, giou_with_grad, xyxy_grad_to_cxcywh};
use super::hungarian::min_cost_assignment;
use super::model::DetectorOutput;
use crate::data::{AnnotationSet, BBox, ClassId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    /// Relative weight of the background class in the classification term.
    pub eos_coef: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            l1: 5.0,
            giou: 2.0,
            eos_coef: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    /// `(query, target)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: BTreeSet<usize>,
}

fn target_cxcywh(b: &BBox) -> [f64; 4] {
    b.to_cxcywh()
}

fn row4(v: ArrayView2<f64>, q: usize) -> [f64; 4] {
    [v[[q, 0]], v[[q, 1]], v[[q, 2]], v[[q, 3]]]
}

fn l1(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Cost of assigning query `q` to target `t`.
pub fn match_cost(
    scores: ArrayView2<f64>,
    boxes: ArrayView2<f64>,
    q: usize,
    class: ClassId,
    target: &BBox,
    w: &LossWeights,
) -> f64 {
    let pred = row4(boxes, q);
    let tgt = target_cxcywh(target);
    let g = giou_with_grad(&cxcywh_to_xyxy(pred), &target.to_array()).0;
    w.cls * (1.0 - scores[[q, class.index()]]) + w.l1 * l1(&pred, &tgt) + w.giou * (1.0 - g)
}

/// Globally optimal query/target assignment for one layer. `scores` is
/// `Q x (C+1)`, `boxes` is `Q x 4` in `cx, cy, w, h`.
pub fn hungarian_match(
    scores: ArrayView2<f64>,
    boxes: ArrayView2<f64>,
    targets: &AnnotationSet,
    w: &LossWeights,
) -> MatchResult {
    let q = scores.nrows();
    let t = targets.len();
    let mut cost = Array2::zeros((t, q));
    for (ti, inst) in targets.instances.iter().enumerate() {
        for qi in 0..q {
            cost[[ti, qi]] = match_cost(scores, boxes, qi, inst.class_id, &inst.bbox, w);
        }
    }
    let mut pairs: Vec<(usize, usize)> = min_cost_assignment(&cost)
        .into_iter()
        .map(|(ti, qi)| (qi, ti))
        .collect();
    pairs.sort_unstable();
    let matched: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
    MatchResult {
        pairs,
        unmatched_queries: (0..q).filter(|i| !matched.contains(i)).collect(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Weighted NLL, averaged over layers (before `w.cls`).
    pub cls: f64,
    /// L1 box term per target box, averaged over layers (before `w.l1`).
    pub l1: f64,
    /// `1 - GIoU` per target box, averaged over layers (before `w.giou`).
    pub giou: f64,
    pub total: f64,
}

/// Gradients of a loss with respect to the detector outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrad {
    /// `L x Q x (C+1)`, with respect to the logits.
    pub logits: Array3<f64>,
    /// `L x Q x 4`, with respect to the `cx, cy, w, h` boxes.
    pub boxes: Array3<f64>,
}

impl OutputGrad {
    pub fn zeros_like(out: &DetectorOutput) -> Self {
        Self {
            logits: Array3::zeros(out.logits.raw_dim()),
            boxes: Array3::zeros(out.boxes.raw_dim()),
        }
    }

    pub fn add_scaled(&mut self, other: &OutputGrad, factor: f64) {
        self.logits.scaled_add(factor, &other.logits);
        self.boxes.scaled_add(factor, &other.boxes);
    }
}

/// Set-prediction loss averaged over decoder layers, with its gradient.
pub fn detr_loss(
    out: &DetectorOutput,
    targets: &AnnotationSet,
    w: &LossWeights,
) -> (LossBreakdown, OutputGrad) {
    let layers = out.num_layers();
    let bg = out.background();
    let mut grad = OutputGrad::zeros_like(out);
    let mut br = LossBreakdown::default();
    let num_boxes = targets.len().max(1) as f64;
    let inv_layers = 1.0 / layers as f64;

    for l in 0..layers {
        let scores = out.scores.index_axis(ndarray::Axis(0), l);
        let boxes = out.boxes.index_axis(ndarray::Axis(0), l);
        let m = hungarian_match(scores, boxes, targets, w);
        let q = scores.nrows();

        let mut labels = vec![bg; q];
        let mut weights = vec![w.eos_coef; q];
        for &(qi, ti) in &m.pairs {
            labels[qi] = targets.instances[ti].class_id.index();
            weights[qi] = 1.0;
        }
        let wsum: f64 = weights.iter().sum();
        let mut nll = 0.0;
        for qi in 0..q {
            let p = scores[[qi, labels[qi]]];
            nll += weights[qi] * -p.max(f64::MIN_POSITIVE).ln();
            // d(-ln softmax_y)/dz = p - onehot(y)
            let scale = w.cls * weights[qi] / wsum * inv_layers;
            for k in 0..=bg {
                let target = if k == labels[qi] { 1.0 } else { 0.0 };
                grad.logits[[l, qi, k]] += scale * (scores[[qi, k]] - target);
            }
        }
        let cls = nll / wsum;

        let mut l1_sum = 0.0;
        let mut giou_sum = 0.0;
        for &(qi, ti) in &m.pairs {
            let pred = row4(boxes, qi);
            let tb = &targets.instances[ti].bbox;
            let tgt = target_cxcywh(tb);
            l1_sum += l1(&pred, &tgt);
            let (g, dg) = giou_with_grad(&cxcywh_to_xyxy(pred), &tb.to_array());
            giou_sum += 1.0 - g;
            let dg = xyxy_grad_to_cxcywh(dg);
            for k in 0..4 {
                let diff = pred[k] - tgt[k];
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                grad.boxes[[l, qi, k]] +=
                    inv_layers / num_boxes * (w.l1 * sign - w.giou * dg[k]);
            }
        }
        br.cls += cls * inv_layers;
        br.l1 += l1_sum / num_boxes * inv_layers;
        br.giou += giou_sum / num_boxes * inv_layers;
    }
    br.total = w.cls * br.cls + w.l1 * br.l1 + w.giou * br.giou;
    (br, grad)
}

/// A single final-layer detection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub query: usize,
    pub class_id: ClassId,
    pub bbox: BBox,
    pub score: f64,
}

/// Index of the largest entry; the first one wins ties.
pub(crate) fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Final-layer queries whose top class (over all `C + 1` columns) is not the
/// background and whose score is at least `threshold`.
pub fn detections(out: &DetectorOutput, threshold: f64) -> Vec<Detection> {
    let l = out.final_layer();
    let scores = out.scores.index_axis(ndarray::Axis(0), l);
    let boxes = out.boxes.index_axis(ndarray::Axis(0), l);
    let bg = out.background();
    let mut dets = Vec::new();
    for (q, row) in scores.rows().into_iter().enumerate() {
        let k = argmax(row);
        if k == bg || row[k] < threshold {
            continue;
        }
        let b = row4(boxes, q);
        dets.push(Detection {
            query: q,
            class_id: ClassId(k as u32),
            bbox: BBox::from_cxcywh_clamped(b[0], b[1], b[2], b[3]),
            score: row[k],
        });
    }
    dets
}
