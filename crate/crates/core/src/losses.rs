//! Pseudo-labeling with the frozen previous-phase model and L2 distillation
//! between previous- and current-phase detector outputs.

use std::collections::BTreeSet;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{AnnotationSet, BBox, ClassId, Instance, LabelSource};
use crate::detector::{detections, DetectorOutput, OutputGrad};
use crate::error::{Error, Result};
use crate::nn::{softmax_rows, softmax_rows_backward};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoLabel {
    pub class_id: ClassId,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabelSet {
    pub labels: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Labels from the old model's final layer: queries whose top column is an
/// old class (not background) with score at least `p_pseudo`.
pub fn pseudo_label(out_old: &DetectorOutput, p_pseudo: f64, old_classes: &BTreeSet<ClassId>) -> PseudoLabelSet {
    PseudoLabelSet {
        labels: detections(out_old, p_pseudo)
            .into_iter()
            .filter(|d| old_classes.contains(&d.class_id))
            .map(|d| PseudoLabel {
                class_id: d.class_id,
                bbox: d.bbox,
                score: d.score,
            })
            .collect(),
    }
}

/// Ground truth of the new classes followed by the pseudo labels.
pub fn merge_labels(
    gt_new: &AnnotationSet,
    pseudo: &PseudoLabelSet,
    new_classes: &BTreeSet<ClassId>,
) -> Result<AnnotationSet> {
    if let Some(i) = gt_new.instances.iter().find(|i| !new_classes.contains(&i.class_id)) {
        return Err(Error::Precondition(format!(
            "image {} ground truth has class {} outside the current phase",
            gt_new.image_id, i.class_id
        )));
    }
    let mut merged = gt_new.clone();
    for p in &pseudo.labels {
        if new_classes.contains(&p.class_id) {
            return Err(Error::Invariant(format!(
                "pseudo label of class {} on image {} belongs to the current phase",
                p.class_id, gt_new.image_id
            )));
        }
        merged.instances.push(Instance {
            class_id: p.class_id,
            bbox: p.bbox,
            source: LabelSource::Pseudo,
        });
    }
    Ok(merged)
}

fn mean_sq_diff(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// Mean squared difference over a `Q x (C_old+1)` score pair.
pub fn l2_cls_distill(f_new: ArrayView2<f64>, f_old: ArrayView2<f64>) -> Result<f64> {
    mean_sq_diff(f_new, f_old)
}

/// Mean squared difference over a `Q x 4` box pair.
pub fn l2_reg_distill(b_new: ArrayView2<f64>, b_old: ArrayView2<f64>) -> Result<f64> {
    if b_new.ncols() != 4 || b_old.ncols() != 4 {
        return Err(Error::Shape("box matrices must have 4 columns".into()));
    }
    mean_sq_diff(b_new, b_old)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerAggregation {
    #[default]
    Mean,
    Sum,
}

/// Which classification quantity is compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillSpace {
    #[default]
    Scores,
    Logits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillationConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub layer_agg: LayerAggregation,
    pub space: DistillSpace,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            alpha: 2.0,
            beta: 5.0,
            layer_agg: LayerAggregation::Mean,
            space: DistillSpace::Scores,
        }
    }
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("distill.{k} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DistillBreakdown {
    /// Aggregated classification term, before `alpha`.
    pub cls: f64,
    /// Aggregated box term, before `beta`.
    pub reg: f64,
    /// `lambda * (alpha * cls + beta * reg)`.
    pub total: f64,
}

/// Distillation terms and their gradients with respect to the compared
/// new-model quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillTerms {
    pub breakdown: DistillBreakdown,
    pub d_cls: Array3<f64>,
    pub d_reg: Array3<f64>,
}

/// Composes the per-layer terms of `L x Q x K` classification and
/// `L x Q x 4` box arrays.
pub fn distill_terms(
    new_cls: ArrayView3<f64>,
    old_cls: ArrayView3<f64>,
    new_reg: ArrayView3<f64>,
    old_reg: ArrayView3<f64>,
    cfg: &DistillationConfig,
) -> Result<DistillTerms> {
    let layers = new_cls.len_of(Axis(0));
    if old_cls.len_of(Axis(0)) != layers || new_reg.len_of(Axis(0)) != layers || old_reg.len_of(Axis(0)) != layers {
        return Err(Error::Shape(format!(
            "layer counts differ: {layers}, {}, {}, {}",
            old_cls.len_of(Axis(0)),
            new_reg.len_of(Axis(0)),
            old_reg.len_of(Axis(0))
        )));
    }
    if layers == 0 {
        return Err(Error::Shape("no decoder layers to distill".into()));
    }
    let agg = match cfg.layer_agg {
        LayerAggregation::Mean => 1.0 / layers as f64,
        LayerAggregation::Sum => 1.0,
    };
    let mut cls = 0.0;
    let mut reg = 0.0;
    for l in 0..layers {
        cls += l2_cls_distill(new_cls.index_axis(Axis(0), l), old_cls.index_axis(Axis(0), l))?;
        reg += l2_reg_distill(new_reg.index_axis(Axis(0), l), old_reg.index_axis(Axis(0), l))?;
    }
    let (cls, reg) = (cls * agg, reg * agg);
    let per_layer_cls = (new_cls.len() / layers).max(1) as f64;
    let per_layer_reg = (new_reg.len() / layers).max(1) as f64;
    let kc = 2.0 * cfg.lambda * cfg.alpha * agg / per_layer_cls;
    let kr = 2.0 * cfg.lambda * cfg.beta * agg / per_layer_reg;
    Ok(DistillTerms {
        breakdown: DistillBreakdown {
            cls,
            reg,
            total: cfg.lambda * (cfg.alpha * cls + cfg.beta * reg),
        },
        d_cls: (&new_cls - &old_cls) * kc,
        d_reg: (&new_reg - &old_reg) * kr,
    })
}

/// Column of the new model that corresponds to column `j` of a model with
/// `old_classes` foreground classes.
fn new_column(j: usize, old_classes: usize, new_bg: usize) -> usize {
    if j == old_classes {
        new_bg
    } else {
        j
    }
}

/// New-model logits restricted to the old model's columns (old classes, then
/// background), `L x Q x (C_old+1)`.
pub fn old_column_logits(out_new: &DetectorOutput, old_classes: usize) -> Result<Array3<f64>> {
    let new_bg = out_new.background();
    if old_classes > out_new.num_classes() {
        return Err(Error::Shape(format!(
            "old head has {old_classes} classes, new head only {}",
            out_new.num_classes()
        )));
    }
    let (l, q, _) = out_new.logits.dim();
    Ok(Array3::from_shape_fn((l, q, old_classes + 1), |(a, b, j)| {
        out_new.logits[[a, b, new_column(j, old_classes, new_bg)]]
    }))
}

/// New-model class distribution renormalized over the old model's columns.
/// Equal to the new scores when no classes were added, and equal to the old
/// model's scores right after widening.
pub fn old_column_scores(out_new: &DetectorOutput, old_classes: usize) -> Result<Array3<f64>> {
    let z = old_column_logits(out_new, old_classes)?;
    let mut p = Array3::zeros(z.raw_dim());
    for l in 0..z.len_of(Axis(0)) {
        p.index_axis_mut(Axis(0), l)
            .assign(&softmax_rows(&z.index_axis(Axis(0), l).to_owned()));
    }
    Ok(p)
}

fn check_pair(out_new: &DetectorOutput, out_old: &DetectorOutput) -> Result<()> {
    if out_new.num_layers() != out_old.num_layers() || out_new.num_queries() != out_old.num_queries() {
        return Err(Error::Shape(format!(
            "new output has {} layers x {} queries, old has {} x {}",
            out_new.num_layers(),
            out_new.num_queries(),
            out_old.num_layers(),
            out_old.num_queries()
        )));
    }
    Ok(())
}

/// `lambda * (alpha * L_cls + beta * L_reg)` over all decoder layers.
pub fn total_distill_loss(
    out_new: &DetectorOutput,
    out_old: &DetectorOutput,
    cfg: &DistillationConfig,
) -> Result<DistillBreakdown> {
    Ok(total_distill_loss_with_grad(out_new, out_old, cfg)?.0)
}

/// [`total_distill_loss`] with its gradient with respect to the new model's
/// logits and boxes. New-class logits receive no gradient.
pub fn total_distill_loss_with_grad(
    out_new: &DetectorOutput,
    out_old: &DetectorOutput,
    cfg: &DistillationConfig,
) -> Result<(DistillBreakdown, OutputGrad)> {
    check_pair(out_new, out_old)?;
    let c_old = out_old.num_classes();
    let (new_cls, old_cls) = match cfg.space {
        DistillSpace::Scores => (old_column_scores(out_new, c_old)?, out_old.scores.clone()),
        DistillSpace::Logits => (old_column_logits(out_new, c_old)?, out_old.logits.clone()),
    };
    let terms = distill_terms(
        new_cls.view(),
        old_cls.view(),
        out_new.boxes.view(),
        out_old.boxes.view(),
        cfg,
    )?;
    let mut grad = OutputGrad::zeros_like(out_new);
    grad.boxes.assign(&terms.d_reg);
    let new_bg = out_new.background();
    for l in 0..out_new.num_layers() {
        let g = terms.d_cls.index_axis(Axis(0), l).to_owned();
        let dz: Array2<f64> = match cfg.space {
            DistillSpace::Scores => softmax_rows_backward(&new_cls.index_axis(Axis(0), l).to_owned(), &g),
            DistillSpace::Logits => g,
        };
        let mut gl = grad.logits.index_axis_mut(Axis(0), l);
        gl.slice_mut(s![.., ..c_old]).assign(&dz.slice(s![.., ..c_old]));
        gl.column_mut(new_bg).assign(&dz.column(c_old));
    }
    Ok((terms.breakdown, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageId;
    use crate::data::Provenance;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn three_query_fixture() -> DetectorOutput {
        let rows = [[0.6, 0.3, 0.1], [0.2, 0.1, 0.7], [0.30, 0.31, 0.29]];
        let scores = Array3::from_shape_fn((1, 3, 3), |(_, q, k)| rows[q][k]);
        DetectorOutput::from_scores(scores, Array3::from_elem((1, 3, 4), 0.5))
    }

    /// Independent scan over final-layer rows.
    fn row_scan(out: &DetectorOutput, p: f64, old: &BTreeSet<ClassId>) -> Vec<(u32, f64)> {
        let s = out.layer_scores(out.final_layer());
        let bg = out.background();
        let mut v = Vec::new();
        for q in 0..s.nrows() {
            let mut best = 0;
            for k in 1..=bg {
                if s[[q, k]] > s[[q, best]] {
                    best = k;
                }
            }
            if best != bg && old.contains(&ClassId(best as u32)) && s[[q, best]] >= p {
                v.push((best as u32, s[[q, best]]));
            }
        }
        v
    }

    fn classes(ids: &[u32]) -> BTreeSet<ClassId> {
        ids.iter().map(|&i| ClassId(i)).collect()
    }

    fn pairs(set: &PseudoLabelSet) -> Vec<(u32, f64)> {
        set.labels.iter().map(|l| (l.class_id.0, l.score)).collect()
    }

    #[test]
    fn pseudo_labels_on_fixture() {
        let out = three_query_fixture();
        let old = classes(&[0, 1]);
        let at = |p| pseudo_label(&out, p, &old);
        assert_eq!(at(0.3).len(), 2);
        assert_eq!(pairs(&at(0.3)), row_scan(&out, 0.3, &old));
        assert_eq!(pairs(&at(0.65)), row_scan(&out, 0.65, &old));
        assert_eq!(pairs(&at(0.31)), vec![(0, 0.6), (1, 0.31)]);
        assert_eq!(pairs(&at(0.6)), vec![(0, 0.6)]);
        assert_eq!(pairs(&pseudo_label(&out, 0.3, &classes(&[1]))), vec![(1, 0.31)]);
    }

    #[test]
    fn all_background_gives_no_labels() {
        let scores = Array3::from_shape_fn((2, 4, 3), |(_, _, k)| if k == 2 { 0.8 } else { 0.1 });
        let out = DetectorOutput::from_scores(scores, Array3::from_elem((2, 4, 4), 0.5));
        assert!(pseudo_label(&out, 0.05, &classes(&[0, 1])).is_empty());
    }

    fn gt(instances: &[(u32, [f64; 4])]) -> AnnotationSet {
        AnnotationSet::new(
            ImageId(7),
            instances
                .iter()
                .map(|(c, b)| Instance::new(ClassId(*c), BBox::from_array(*b).unwrap()))
                .collect(),
            Provenance::Real,
        )
    }

    fn label(c: u32, b: [f64; 4]) -> PseudoLabel {
        PseudoLabel {
            class_id: ClassId(c),
            bbox: BBox::from_array(b).unwrap(),
            score: 0.9,
        }
    }

    #[test]
    fn merge_is_a_union() {
        let g = gt(&[(2, [0.1, 0.1, 0.4, 0.4]), (3, [0.5, 0.5, 0.9, 0.9])]);
        let new = classes(&[2, 3]);
        assert_eq!(merge_labels(&g, &PseudoLabelSet::default(), &new).unwrap(), g);
        let p = PseudoLabelSet {
            labels: vec![label(0, [0.1, 0.1, 0.4, 0.4]), label(1, [0.2, 0.2, 0.5, 0.5])],
        };
        let m = merge_labels(&g, &p, &new).unwrap();
        assert_eq!(m.len(), 4);
        assert_eq!(m.instances[2].bbox, g.instances[0].bbox);
        assert_eq!(m.instances[2].source, LabelSource::Pseudo);
        assert_eq!(m.instances[0].source, LabelSource::Annotated);
        let bad = PseudoLabelSet {
            labels: vec![label(3, [0.1, 0.1, 0.2, 0.2])],
        };
        assert!(matches!(merge_labels(&g, &bad, &new), Err(Error::Invariant(_))));
    }

    fn double_loop(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let mut s = 0.0;
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                s += (a[[i, j]] - b[[i, j]]).powi(2);
            }
        }
        s / (a.nrows() * a.ncols()) as f64
    }

    #[test]
    fn l2_terms_match_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
            let b = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
            assert!((l2_cls_distill(a.view(), b.view()).unwrap() - double_loop(&a, &b)).abs() < 1e-12);
            assert!((l2_reg_distill(a.view(), b.view()).unwrap() - double_loop(&a, &b)).abs() < 1e-12);
        }
        let z = Array2::<f64>::zeros((3, 4));
        assert_eq!(l2_cls_distill(z.view(), (&z + 1.0).view()).unwrap(), 1.0);
        assert_eq!(l2_reg_distill(z.view(), (&z + 0.5).view()).unwrap(), 0.25);
        assert!(l2_cls_distill(z.view(), Array2::zeros((3, 3)).view()).is_err());
    }

    #[test]
    fn composition_arithmetic() {
        // One layer whose classification term is 0.1 and box term is 0.2.
        let new_cls = Array3::zeros((1, 1, 1));
        let old_cls = Array3::from_elem((1, 1, 1), 0.1f64.sqrt());
        let new_reg = Array3::zeros((1, 1, 4));
        let old_reg = Array3::from_elem((1, 1, 4), 0.2f64.sqrt());
        let t = distill_terms(
            new_cls.view(),
            old_cls.view(),
            new_reg.view(),
            old_reg.view(),
            &DistillationConfig::default(),
        )
        .unwrap();
        assert!((t.breakdown.total - 2.4).abs() < 1e-12);
    }

    #[test]
    fn layer_mismatch_is_an_error() {
        let a = DetectorOutput::from_logits(Array3::zeros((2, 3, 3)), Array3::from_elem((2, 3, 4), 0.5));
        let b = DetectorOutput::from_logits(Array3::zeros((1, 3, 3)), Array3::from_elem((1, 3, 4), 0.5));
        assert!(total_distill_loss(&a, &b, &DistillationConfig::default()).is_err());
    }

    fn random_output(rng: &mut ChaCha8Rng, l: usize, q: usize, c: usize) -> DetectorOutput {
        DetectorOutput::from_logits(
            Array3::from_shape_fn((l, q, c + 1), |_| rng.gen_range(-2.0..2.0)),
            Array3::from_shape_fn((l, q, 4), |_| rng.gen_range(0.05..0.95)),
        )
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for space in [DistillSpace::Scores, DistillSpace::Logits] {
            let cfg = DistillationConfig {
                space,
                ..DistillationConfig::default()
            };
            let new = random_output(&mut rng, 2, 3, 4);
            let old = random_output(&mut rng, 2, 3, 2);
            let (_, g) = total_distill_loss_with_grad(&new, &old, &cfg).unwrap();
            let h = 1e-6;
            for idx in [(0, 0, 0), (1, 2, 1), (0, 1, 4), (1, 0, 3), (0, 2, 2)] {
                let mut plus = new.logits.clone();
                plus[idx] += h;
                let mut minus = new.logits.clone();
                minus[idx] -= h;
                let f = |z: Array3<f64>| {
                    total_distill_loss(&DetectorOutput::from_logits(z, new.boxes.clone()), &old, &cfg)
                        .unwrap()
                        .total
                };
                let fd = (f(plus) - f(minus)) / (2.0 * h);
                assert!((fd - g.logits[idx]).abs() < 1e-7, "{space:?} {idx:?}: {fd} vs {}", g.logits[idx]);
            }
            // Column 3 belongs to a class the old model never had.
            assert!(g.logits.slice(s![.., .., 2..4]).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn widened_head_starts_at_zero_classification_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let old = random_output(&mut rng, 2, 4, 3);
        let logits = Array3::from_shape_fn((2, 4, 6), |(l, q, k)| match k {
            0..=2 => old.logits[[l, q, k]],
            5 => old.logits[[l, q, 3]],
            _ => rng.gen_range(-2.0..2.0),
        });
        let new = DetectorOutput::from_logits(logits, old.boxes.clone());
        let b = total_distill_loss(&new, &old, &DistillationConfig::default()).unwrap();
        assert!(b.cls < 1e-28 && b.reg == 0.0);
    }

    proptest! {
        #[test]
        fn distillation_is_symmetric_and_vanishes_on_equal_inputs(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_output(&mut rng, 2, 3, 2);
            let b = random_output(&mut rng, 2, 3, 2);
            let cfg = DistillationConfig::default();
            let ab = total_distill_loss(&a, &b, &cfg).unwrap().total;
            let ba = total_distill_loss(&b, &a, &cfg).unwrap().total;
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab > 0.0);
            prop_assert!(total_distill_loss(&a, &a, &cfg).unwrap().total.abs() < 1e-15);
        }

        #[test]
        fn pseudo_labels_follow_query_permutation(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = random_output(&mut rng, 1, 6, 3);
            let mut perm: Vec<usize> = (0..6).collect();
            for i in (1..6).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let shuffled = DetectorOutput::from_logits(
                Array3::from_shape_fn(out.logits.dim(), |(l, q, k)| out.logits[[l, perm[q], k]]),
                Array3::from_shape_fn(out.boxes.dim(), |(l, q, k)| out.boxes[[l, perm[q], k]]),
            );
            let old = classes(&[0, 2]);
            let key = |s: PseudoLabelSet| {
                let mut v: Vec<_> = s.labels.iter().map(|l| (l.class_id, l.score.to_bits(), l.bbox.to_array().map(f64::to_bits))).collect();
                v.sort();
                v
            };
            prop_assert_eq!(key(pseudo_label(&out, 0.2, &old)), key(pseudo_label(&shuffled, 0.2, &old)));
        }
    }
}
