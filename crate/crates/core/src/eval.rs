//! COCO-style average precision with size strata, subset reports and the
//! forgetting metric.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{AnnotationSet, ClassId};
use crate::detector::Detection;
use crate::error::{Error, Result};

/// Reference image area the COCO size strata are defined on.
const COCO_REFERENCE_AREA: f64 = 640.0 * 480.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub recall_points: usize,
    pub max_detections: usize,
    /// Upper bounds of the small and medium strata in reference pixels;
    /// they apply to box area as a fraction of the image.
    pub small_area: f64,
    pub medium_area: f64,
    /// Score threshold applied before evaluation.
    pub score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            recall_points: 101,
            max_detections: 100,
            small_area: 32.0 * 32.0,
            medium_area: 96.0 * 96.0,
            score_threshold: 0.0,
        }
    }
}

impl EvalConfig {
    fn range(&self, stratum: Stratum) -> (f64, f64) {
        let s = self.small_area / COCO_REFERENCE_AREA;
        let m = self.medium_area / COCO_REFERENCE_AREA;
        match stratum {
            Stratum::All => (0.0, f64::INFINITY),
            Stratum::Small => (0.0, s),
            Stratum::Medium => (s, m),
            Stratum::Large => (m, f64::INFINITY),
        }
    }

    fn threshold_index(&self, t: f64) -> Option<usize> {
        self.iou_thresholds.iter().position(|x| (x - t).abs() < 1e-9)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stratum {
    All,
    Small,
    Medium,
    Large,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    #[default]
    All,
    Old,
    New,
}

/// Average precision values in `[0, 1]`. Strata without ground truth and
/// classes without ground truth are reported as absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subset: Subset,
    pub ap: f64,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub per_class_ap: BTreeMap<ClassId, f64>,
    /// Requested classes left out of the mean for lack of ground truth.
    pub excluded_classes: Vec<ClassId>,
}

/// Interpolated precision at evenly spaced recall levels, averaged.
fn interpolated_ap(tp: &[bool], num_gt: usize, recall_points: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let (mut ntp, mut nfp) = (0usize, 0usize);
    for &hit in tp {
        if hit {
            ntp += 1;
        } else {
            nfp += 1;
        }
        precision.push(ntp as f64 / (ntp + nfp) as f64);
        recall.push(ntp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut sum = 0.0;
    for k in 0..recall_points {
        let r = k as f64 / (recall_points - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / recall_points as f64
}

/// Matches one image's detections of one class (already sorted by
/// descending score) at IoU `t`. Returns `(score, is_tp)` for every
/// detection that is not ignored, plus the number of non-ignored GT.
fn match_image(
    gt: &[(f64, crate::data::BBox)],
    dets: &[&Detection],
    t: f64,
    range: (f64, f64),
) -> (Vec<(f64, bool)>, usize) {
    let ignored: Vec<bool> = gt.iter().map(|(a, _)| *a < range.0 || *a > range.1).collect();
    let mut taken = vec![false; gt.len()];
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        // Prefer non-ignored ground truth; fall back to ignored ones.
        for pass_ignored in [false, true] {
            for (g, (_, b)) in gt.iter().enumerate() {
                if taken[g] || ignored[g] != pass_ignored {
                    continue;
                }
                let iou = d.bbox.iou(b);
                if iou >= t && best.is_none_or(|(_, bi)| iou > bi) {
                    best = Some((g, iou));
                }
            }
            if best.is_some() {
                break;
            }
        }
        match best {
            Some((g, _)) => {
                taken[g] = true;
                if !ignored[g] {
                    out.push((d.score, true));
                }
            }
            None => {
                let area = d.bbox.area();
                if area >= range.0 && area <= range.1 {
                    out.push((d.score, false));
                }
            }
        }
    }
    (out, ignored.iter().filter(|i| !**i).count())
}

/// AP of one class over all images at one IoU threshold and stratum, or
/// `None` without non-ignored ground truth.
fn class_ap(
    class: ClassId,
    gt: &[AnnotationSet],
    dets: &[Vec<Detection>],
    t: f64,
    range: (f64, f64),
    cfg: &EvalConfig,
) -> Option<f64> {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut num_gt = 0;
    for (a, ds) in gt.iter().zip(dets) {
        let g: Vec<(f64, crate::data::BBox)> = a
            .instances
            .iter()
            .filter(|i| i.class_id == class)
            .map(|i| (i.bbox.area(), i.bbox))
            .collect();
        let mut d: Vec<&Detection> = ds
            .iter()
            .filter(|d| d.class_id == class && d.score >= cfg.score_threshold)
            .collect();
        d.sort_by(|x, y| y.score.total_cmp(&x.score));
        d.truncate(cfg.max_detections);
        let (m, n) = match_image(&g, &d, t, range);
        scored.extend(m);
        num_gt += n;
    }
    if num_gt == 0 {
        return None;
    }
    // Stable sort keeps image order among equal scores.
    scored.sort_by(|x, y| y.0.total_cmp(&x.0));
    let tp: Vec<bool> = scored.iter().map(|s| s.1).collect();
    Some(interpolated_ap(&tp, num_gt, cfg.recall_points))
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Class-mean then threshold-mean AP for one stratum.
fn stratum_ap(
    classes: &BTreeSet<ClassId>,
    gt: &[AnnotationSet],
    dets: &[Vec<Detection>],
    stratum: Stratum,
    cfg: &EvalConfig,
) -> (Option<f64>, Vec<Option<f64>>, BTreeMap<ClassId, f64>) {
    let range = cfg.range(stratum);
    let mut per_threshold = Vec::with_capacity(cfg.iou_thresholds.len());
    let mut per_class: BTreeMap<ClassId, Vec<f64>> = BTreeMap::new();
    for &t in &cfg.iou_thresholds {
        let mut aps = Vec::new();
        for &c in classes {
            if let Some(ap) = class_ap(c, gt, dets, t, range, cfg) {
                aps.push(ap);
                per_class.entry(c).or_default().push(ap);
            }
        }
        per_threshold.push(mean(&aps));
    }
    let valid: Vec<f64> = per_threshold.iter().flatten().copied().collect();
    let class_means = per_class
        .into_iter()
        .map(|(c, v)| (c, mean(&v).expect("non-empty")))
        .collect();
    (mean(&valid), per_threshold, class_means)
}

fn validate(gt: &[AnnotationSet], dets: &[Vec<Detection>], cfg: &EvalConfig) -> Result<()> {
    if gt.len() != dets.len() {
        return Err(Error::Shape(format!(
            "{} ground-truth images but {} detection lists",
            gt.len(),
            dets.len()
        )));
    }
    if cfg.iou_thresholds.is_empty() || cfg.recall_points < 2 {
        return Err(Error::Config("evaluation needs IoU thresholds and at least 2 recall points".into()));
    }
    Ok(())
}

/// AP over the classes present in `gt`. `dets[i]` belongs to `gt[i]`.
pub fn compute_ap(gt: &[AnnotationSet], dets: &[Vec<Detection>], cfg: &EvalConfig) -> Result<EvalReport> {
    let classes: BTreeSet<ClassId> = gt.iter().flat_map(|a| a.classes()).collect();
    report_for(&classes, gt, dets, cfg, Subset::All)
}

fn report_for(
    classes: &BTreeSet<ClassId>,
    gt: &[AnnotationSet],
    dets: &[Vec<Detection>],
    cfg: &EvalConfig,
    subset: Subset,
) -> Result<EvalReport> {
    validate(gt, dets, cfg)?;
    let (ap, per_threshold, per_class_ap) = stratum_ap(classes, gt, dets, Stratum::All, cfg);
    let Some(ap) = ap else {
        return Err(Error::Precondition("no ground truth for the evaluated classes".into()));
    };
    let at = |t: f64| cfg.threshold_index(t).and_then(|i| per_threshold[i]);
    Ok(EvalReport {
        subset,
        ap,
        ap50: at(0.5),
        ap75: at(0.75),
        ap_small: stratum_ap(classes, gt, dets, Stratum::Small, cfg).0,
        ap_medium: stratum_ap(classes, gt, dets, Stratum::Medium, cfg).0,
        ap_large: stratum_ap(classes, gt, dets, Stratum::Large, cfg).0,
        excluded_classes: classes.iter().filter(|c| !per_class_ap.contains_key(c)).copied().collect(),
        per_class_ap,
    })
}

/// Report restricted to the ground truth and detections of `classes`.
pub fn subset_report(
    gt: &[AnnotationSet],
    dets: &[Vec<Detection>],
    classes: &BTreeSet<ClassId>,
    subset: Subset,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if classes.is_empty() {
        return Err(Error::Precondition("empty class subset".into()));
    }
    let gt: Vec<AnnotationSet> = gt.iter().map(|a| a.filtered(classes)).collect();
    let dets: Vec<Vec<Detection>> = dets
        .iter()
        .map(|d| d.iter().filter(|x| classes.contains(&x.class_id)).copied().collect())
        .collect();
    report_for(classes, &gt, &dets, cfg, subset)
}

/// Forgetting in percentage points: old-class AP after the first phase minus
/// old-class AP after the last.
pub fn fpp(ap_old_at_first_phase: f64, ap_old_at_final_phase: f64) -> f64 {
    ap_old_at_first_phase - ap_old_at_final_phase
}

/// `100 x` at one decimal, the precision metrics files are written with.
pub fn percent(v: f64) -> f64 {
    (v * 1000.0).round() / 10.0
}

/// [`EvalReport`] scaled to percent at one decimal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentReport {
    pub subset: Subset,
    pub ap: f64,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub per_class_ap: BTreeMap<ClassId, f64>,
    pub excluded_classes: Vec<ClassId>,
}

impl From<&EvalReport> for PercentReport {
    fn from(r: &EvalReport) -> Self {
        Self {
            subset: r.subset,
            ap: percent(r.ap),
            ap50: r.ap50.map(percent),
            ap75: r.ap75.map(percent),
            ap_small: r.ap_small.map(percent),
            ap_medium: r.ap_medium.map(percent),
            ap_large: r.ap_large.map(percent),
            per_class_ap: r.per_class_ap.iter().map(|(c, v)| (*c, percent(*v))).collect(),
            excluded_classes: r.excluded_classes.clone(),
        }
    }
}
