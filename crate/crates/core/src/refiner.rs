//! Iterative class-wise refinement of generated replay data.
//!
//! Old annotations are turned into generation requests, and each generated
//! image is kept only if the old detector confirms every requested object
//! at the current threshold. The threshold walks down from `p_hi` to `p_lo`
//! one cycle at a time until every class has its quota. Classes still short
//! afterwards get single-object fallback requests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{AnnotationSet, BBox, Category, ClassId, Dataset, ImageId, ImageRecord, Provenance};
use crate::detector::{Detection, DetectionModel};
use crate::error::{Error, Result};
use crate::generator::{GeneratedSample, GenerationRequest, Generator, DEFAULT_GUIDANCE_SCALE};
use crate::prompt::{build_prompt, class_prompt, GroundingInput, PromptConfig};
use crate::seeds::derive_seed;

/// Box used for class-specific fallback requests.
pub const FALLBACK_BOX: [f64; 4] = [0.3, 0.3, 0.6, 0.6];

/// Per-class target of accepted images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quota {
    Finite(usize),
    /// Every old annotation is used once; no per-class target.
    All,
}

impl fmt::Display for Quota {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Quota::Finite(n) => write!(f, "{n}"),
            Quota::All => f.write_str("inf"),
        }
    }
}

impl std::str::FromStr for Quota {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "all" | "∞" => Ok(Quota::All),
            t => t
                .parse()
                .map(Quota::Finite)
                .map_err(|_| Error::Config(format!("quota must be an integer or \"inf\", got {s:?}"))),
        }
    }
}

impl Serialize for Quota {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Quota::Finite(n) => s.serialize_u64(*n as u64),
            Quota::All => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Quota {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            N(u64),
            F(f64),
            S(String),
        }
        match Repr::deserialize(d)? {
            Repr::N(n) => Ok(Quota::Finite(n as usize)),
            // TOML spells infinity as a float.
            Repr::F(f) if f == f64::INFINITY => Ok(Quota::All),
            Repr::F(f) => Err(serde::de::Error::custom(format!("quota must be a count or inf, got {f}"))),
            Repr::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    pub quota: Quota,
    pub p_hi: f64,
    pub p_lo: f64,
    pub step: f64,
    pub iou_match: f64,
    /// Requests generated between count updates.
    pub batch: usize,
    pub max_cycles_guard: usize,
    /// Fallback attempts per class are `fallback_budget_factor * quota`.
    pub fallback_budget_factor: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            quota: Quota::Finite(50),
            p_hi: 0.8,
            p_lo: 0.4,
            step: 0.05,
            iou_match: 0.5,
            batch: 16,
            max_cycles_guard: 1000,
            fallback_budget_factor: 20,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.p_lo && self.p_lo <= self.p_hi && self.p_hi < 1.0) {
            return Err(Error::Config(format!(
                "refiner thresholds need 0 < p_lo <= p_hi < 1, got p_lo={} p_hi={}",
                self.p_lo, self.p_hi
            )));
        }
        if !(self.step > 0.0) {
            return Err(Error::Config(format!("refiner step must be positive, got {}", self.step)));
        }
        if self.quota == Quota::Finite(0) {
            return Err(Error::Config("refiner quota must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.iou_match) {
            return Err(Error::Config(format!("iou_match {} outside [0, 1]", self.iou_match)));
        }
        if self.batch == 0 {
            return Err(Error::Config("refiner batch must be at least 1".into()));
        }
        Ok(())
    }

    /// `p_hi, p_hi - step, ...` down to `p_lo`, snapped to a 1e-9 grid so
    /// repeated subtraction does not drift.
    pub fn thresholds(&self) -> Vec<f64> {
        let snap = |v: f64| (v * 1e9).round() / 1e9;
        let lo = snap(self.p_lo);
        (0..)
            .map(|k| snap(self.p_hi - k as f64 * self.step))
            .take_while(|&t| t >= lo)
            .collect()
    }

    fn fallback_budget(&self, quota: usize) -> usize {
        self.fallback_budget_factor.saturating_mul(quota)
    }
}

/// Conditioning shared by every request the refiner issues.
#[derive(Clone, Debug, PartialEq)]
pub struct RequestOptions {
    pub prompt: PromptConfig,
    pub style_vector: Option<Vec<f64>>,
    pub grounding_strength: f64,
    pub guidance_scale: f64,
}

impl Default for RequestOptions {
    fn default() -> Self {
        Self {
            prompt: PromptConfig::default(),
            style_vector: None,
            grounding_strength: 1.0,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
        }
    }
}

impl RequestOptions {
    fn request(&self, prompt: crate::prompt::PromptSpec, grounding: GroundingInput, seed: u64) -> GenerationRequest {
        GenerationRequest {
            grounding_strength: self.grounding_strength,
            guidance_scale: self.guidance_scale,
            style_vector: self.style_vector.clone(),
            ..GenerationRequest::new(prompt, grounding, seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unconfirmed {
    pub entity: usize,
    pub class_id: ClassId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterDecision {
    pub accepted: bool,
    /// First requested entity without a confirming detection.
    pub reason: Option<Unconfirmed>,
    pub detections: Vec<Detection>,
}

/// Accepts `sample` iff every requested entity is confirmed by a distinct
/// detection of the same class with IoU `>= iou_match` and score `>= p`.
/// Confirmations are assigned greedily by descending IoU.
pub fn filter_sample(
    sample: &GeneratedSample,
    old_model: &dyn DetectionModel,
    p: f64,
    iou_match: f64,
) -> Result<FilterDecision> {
    let entities = sample.grounding_used.entities();
    let detections: Vec<Detection> = old_model
        .detect(&sample.image, p)?
        .into_iter()
        .filter(|d| d.score >= p)
        .collect();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (e, (class, b)) in entities.iter().enumerate() {
        for (k, d) in detections.iter().enumerate() {
            if d.class_id == *class {
                let iou = d.bbox.iou(b);
                if iou >= iou_match {
                    pairs.push((iou, e, k));
                }
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut entity_done = vec![false; entities.len()];
    let mut det_used = vec![false; detections.len()];
    for (_, e, k) in pairs {
        if !entity_done[e] && !det_used[k] {
            entity_done[e] = true;
            det_used[k] = true;
        }
    }
    let reason = entity_done.iter().position(|done| !done).map(|e| Unconfirmed {
        entity: e,
        class_id: entities[e].0,
    });
    Ok(FilterDecision {
        accepted: reason.is_none(),
        reason,
        detections,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcceptedSample {
    pub sample: GeneratedSample,
    pub threshold: f64,
    /// Cycle index, or `None` for fallback samples.
    pub cycle: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub seed: u64,
    pub threshold: f64,
    pub reason: Option<Unconfirmed>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStats {
    pub threshold: f64,
    pub attempted: usize,
    pub accepted: usize,
}

impl ThresholdStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.accepted as f64 / self.attempted as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FallbackStats {
    pub class_id: ClassId,
    pub attempts: usize,
    pub accepted: usize,
    pub satisfied: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RefinerState {
    pub accepted_counts: BTreeMap<ClassId, usize>,
    pub current_threshold: f64,
    pub cycle_index: usize,
    pub accepted: Vec<AcceptedSample>,
    pub rejection_log: Vec<Rejection>,
    pub cycles: Vec<ThresholdStats>,
    pub fallback: Vec<FallbackStats>,
    /// Every request issued, in order.
    pub requests: usize,
}

impl RefinerState {
    fn count(&mut self, sample: &GeneratedSample) {
        for class in sample.image.annotation.classes() {
            *self.accepted_counts.entry(class).or_default() += 1;
        }
    }

    fn shortfall(&self, classes: &BTreeSet<ClassId>, quota: usize) -> usize {
        classes
            .iter()
            .map(|c| quota.saturating_sub(self.accepted_counts.get(c).copied().unwrap_or(0)))
            .sum()
    }

    fn unsatisfied(&self, classes: &BTreeSet<ClassId>, quota: usize) -> BTreeSet<ClassId> {
        classes
            .iter()
            .copied()
            .filter(|c| self.accepted_counts.get(c).copied().unwrap_or(0) < quota)
            .collect()
    }
}

/// Serializable summary written next to the generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub quota: Quota,
    pub accepted_counts: BTreeMap<ClassId, usize>,
    pub thresholds: Vec<ThresholdStats>,
    pub fallback: Vec<FallbackStats>,
    pub unsatisfied: Vec<ClassId>,
    pub requests: usize,
    pub accepted_images: usize,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug)]
pub struct RefinementOutcome {
    /// Accepted samples with fresh sequential image ids.
    pub dataset: Dataset,
    pub state: RefinerState,
    pub report: RefinementReport,
}

/// Everything a refinement run needs besides its inputs.
pub struct ReplayContext<'a> {
    pub catalog: &'a [Category],
    pub generator: &'a dyn Generator,
    pub old_model: &'a dyn DetectionModel,
    pub options: &'a RequestOptions,
}

fn generate_one(ctx: &ReplayContext, req: &GenerationRequest) -> Result<GeneratedSample> {
    let mut samples = ctx.generator.generate(req)?;
    if samples.len() != 1 {
        return Err(Error::Generator(format!(
            "generator returned {} samples for a single-image request",
            samples.len()
        )));
    }
    Ok(samples.remove(0))
}

/// Builds D_gen for `classes` from `old_annotations` (see the module docs).
pub fn run_refinement(
    old_annotations: &[AnnotationSet],
    classes: &BTreeSet<ClassId>,
    ctx: &ReplayContext,
    cfg: &RefinerConfig,
    seed: u64,
) -> Result<RefinementOutcome> {
    cfg.validate()?;
    let usable: Vec<&AnnotationSet> = old_annotations.iter().filter(|a| !a.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Precondition("refinement needs at least one non-empty old annotation".into()));
    }
    let start = Instant::now();
    let mut state = RefinerState {
        accepted_counts: classes.iter().map(|&c| (c, 0)).collect(),
        current_threshold: cfg.p_hi,
        ..RefinerState::default()
    };
    match cfg.quota {
        Quota::Finite(n) => refine_to_quota(&usable, classes, ctx, cfg, n, seed, &mut state)?,
        Quota::All => refine_all(&usable, ctx, cfg, seed, &mut state)?,
    }

    let records = state
        .accepted
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut ann = a.sample.image.annotation.clone();
            ann.image_id = ImageId(i as u64);
            ann.provenance = Provenance::Generated;
            ImageRecord {
                pixels: a.sample.image.pixels.clone(),
                annotation: ann,
            }
        })
        .collect();
    let dataset = Dataset::new(ctx.catalog.to_vec(), records)?;
    let unsatisfied = match cfg.quota {
        Quota::Finite(n) => state.unsatisfied(classes, n).into_iter().collect(),
        Quota::All => Vec::new(),
    };
    let report = RefinementReport {
        quota: cfg.quota,
        accepted_counts: state.accepted_counts.clone(),
        thresholds: state.cycles.clone(),
        fallback: state.fallback.clone(),
        unsatisfied,
        requests: state.requests,
        accepted_images: state.accepted.len(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok(RefinementOutcome {
        dataset,
        state,
        report,
    })
}

fn refine_to_quota(
    annotations: &[&AnnotationSet],
    classes: &BTreeSet<ClassId>,
    ctx: &ReplayContext,
    cfg: &RefinerConfig,
    quota: usize,
    seed: u64,
    state: &mut RefinerState,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5eed));
    for (cycle, threshold) in cfg.thresholds().into_iter().enumerate() {
        if state.unsatisfied(classes, quota).is_empty() {
            break;
        }
        if cycle >= cfg.max_cycles_guard {
            return Err(Error::Invariant(format!(
                "refiner exceeded {} cycles; counts {:?}, threshold {}",
                cfg.max_cycles_guard, state.accepted_counts, state.current_threshold
            )));
        }
        state.cycle_index = cycle;
        state.current_threshold = threshold;
        let mut stats = ThresholdStats {
            threshold,
            attempted: 0,
            accepted: 0,
        };
        let budget = state.shortfall(classes, quota);
        while stats.attempted < budget {
            let open = state.unsatisfied(classes, quota);
            if open.is_empty() {
                break;
            }
            let candidates: Vec<&AnnotationSet> = annotations
                .iter()
                .copied()
                .filter(|a| a.instances.iter().any(|i| open.contains(&i.class_id)))
                .collect();
            if candidates.is_empty() {
                // Remaining classes never occur in the old annotations; the
                // fallback handles them.
                break;
            }
            let n = cfg
                .batch
                .min(budget - stats.attempted)
                .min(state.shortfall(classes, quota));
            let mut batch = Vec::with_capacity(n);
            for _ in 0..n {
                let a = candidates[rng.gen_range(0..candidates.len())];
                let req_seed = derive_seed(seed, state.requests as u64);
                state.requests += 1;
                let req = ctx.options.request(
                    build_prompt(a, ctx.catalog, &ctx.options.prompt)?,
                    GroundingInput::from_annotation(a)?,
                    req_seed,
                );
                batch.push((req_seed, generate_one(ctx, &req)?));
            }
            for (req_seed, sample) in batch {
                stats.attempted += 1;
                let decision = filter_sample(&sample, ctx.old_model, threshold, cfg.iou_match)?;
                if decision.accepted {
                    stats.accepted += 1;
                    state.count(&sample);
                    state.accepted.push(AcceptedSample {
                        sample,
                        threshold,
                        cycle: Some(cycle),
                    });
                } else {
                    state.rejection_log.push(Rejection {
                        seed: req_seed,
                        threshold,
                        reason: decision.reason,
                    });
                }
            }
        }
        state.cycles.push(stats);
    }

    for class in state.unsatisfied(classes, quota) {
        let have = state.accepted_counts.get(&class).copied().unwrap_or(0);
        let fb = class_specific_generate(class, quota - have, ctx, cfg, derive_seed(seed, 0xfa11_0000 + class.0 as u64))?;
        state.requests += fb.attempts;
        for sample in fb.samples {
            state.count(&sample);
            state.accepted.push(AcceptedSample {
                sample,
                threshold: cfg.p_lo,
                cycle: None,
            });
        }
        state.fallback.push(FallbackStats {
            class_id: class,
            attempts: fb.attempts,
            accepted: fb.accepted,
            satisfied: fb.accepted >= quota - have,
        });
    }
    Ok(())
}

/// Unbounded quota: every old annotation is replayed. Each cycle re-requests
/// the annotations with no accepted image yet, walking the same descending
/// thresholds as the quota loop.
fn refine_all(
    annotations: &[&AnnotationSet],
    ctx: &ReplayContext,
    cfg: &RefinerConfig,
    seed: u64,
    state: &mut RefinerState,
) -> Result<()> {
    let mut pending: Vec<&AnnotationSet> = annotations.to_vec();
    for (cycle, threshold) in cfg.thresholds().into_iter().enumerate() {
        if pending.is_empty() {
            break;
        }
        state.cycle_index = cycle;
        state.current_threshold = threshold;
        let mut stats = ThresholdStats {
            threshold,
            attempted: 0,
            accepted: 0,
        };
        let mut still = Vec::with_capacity(pending.len());
        for a in pending {
            let req_seed = derive_seed(seed, state.requests as u64);
            state.requests += 1;
            let req = ctx.options.request(
                build_prompt(a, ctx.catalog, &ctx.options.prompt)?,
                GroundingInput::from_annotation(a)?,
                req_seed,
            );
            let sample = generate_one(ctx, &req)?;
            stats.attempted += 1;
            let decision = filter_sample(&sample, ctx.old_model, threshold, cfg.iou_match)?;
            if decision.accepted {
                stats.accepted += 1;
                state.count(&sample);
                state.accepted.push(AcceptedSample {
                    sample,
                    threshold,
                    cycle: Some(cycle),
                });
            } else {
                state.rejection_log.push(Rejection {
                    seed: req_seed,
                    threshold,
                    reason: decision.reason,
                });
                still.push(a);
            }
        }
        pending = still;
        state.cycles.push(stats);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FallbackOutcome {
    pub samples: Vec<GeneratedSample>,
    pub attempts: usize,
    pub accepted: usize,
}

/// Single-object requests for `class` at [`FALLBACK_BOX`], filtered at
/// `p_lo`, until `needed` are accepted or the attempt budget runs out.
pub fn class_specific_generate(
    class: ClassId,
    needed: usize,
    ctx: &ReplayContext,
    cfg: &RefinerConfig,
    seed: u64,
) -> Result<FallbackOutcome> {
    let mut out = FallbackOutcome {
        samples: Vec::new(),
        attempts: 0,
        accepted: 0,
    };
    if needed == 0 {
        return Ok(out);
    }
    let name = ctx
        .catalog
        .iter()
        .find(|c| c.id == class)
        .map(|c| c.name.as_str())
        .ok_or_else(|| Error::Precondition(format!("class {class} has no name")))?;
    let quota = match cfg.quota {
        Quota::Finite(n) => n,
        Quota::All => needed,
    };
    let budget = cfg.fallback_budget(quota);
    let grounding = GroundingInput::new(vec![(class, BBox::from_array(FALLBACK_BOX)?)])?;
    let prompt = class_prompt(name, &ctx.options.prompt);
    while out.accepted < needed && out.attempts < budget {
        let req = ctx
            .options
            .request(prompt.clone(), grounding.clone(), derive_seed(seed, out.attempts as u64));
        out.attempts += 1;
        let sample = generate_one(ctx, &req)?;
        if filter_sample(&sample, ctx.old_model, cfg.p_lo, cfg.iou_match)?.accepted {
            out.accepted += 1;
            out.samples.push(sample);
        }
    }
    Ok(out)
}
