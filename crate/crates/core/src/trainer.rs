//! Phase-wise continual training: generated samples are trained only
//! through distillation against the frozen previous model, real samples only
//! through the detection loss on new-class ground truth merged with
//! pseudo labels.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnnotationSet, ClassId, Dataset, ImageRecord, Instance, LabelSource, Provenance, TaskSchedule};
use crate::detector::{detr_loss, predict, Detection, Detector, DetectorConfig, DetectorOutput, LossWeights, LrSchedule, Trainer};
use crate::error::{Error, Result};
use crate::eval::{subset_report, EvalConfig, EvalReport, Subset};
use crate::generator::{Generator, STYLE_DIM};
use crate::losses::{merge_labels, pseudo_label, total_distill_loss_with_grad, DistillationConfig, PseudoLabelSet};
use crate::nn::AdamConfig;
use crate::refiner::{
    run_refinement, RefinementOutcome, RefinementReport, RefinerConfig, ReplayContext, RequestOptions,
};
use crate::seeds::derive_seed;

/// When the frozen model's outputs are recomputed. The old model and the
/// inputs never change within a phase, so every setting yields the same
/// targets; only the cost differs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoCache {
    /// Recompute on every visit.
    Off,
    PerEpoch,
    #[default]
    PerPhase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoConfig {
    pub threshold: f64,
    pub cache: PseudoCache,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            threshold: 0.3,
            cache: PseudoCache::PerPhase,
        }
    }
}

/// Which forgetting countermeasures are active in incremental phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Components {
    pub pseudo: bool,
    /// Generate replay data with the refiner.
    pub replay: bool,
    /// Train generated samples by distillation; without it they are
    /// trained with the detection loss on their requested layout.
    pub distill: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self::full()
    }
}

impl Components {
    pub fn full() -> Self {
        Self {
            pseudo: true,
            replay: true,
            distill: true,
        }
    }

    pub fn fine_tune() -> Self {
        Self {
            pseudo: false,
            replay: false,
            distill: false,
        }
    }

    /// The cumulative component chain of the ablation table.
    pub fn ablation_chain() -> [(&'static str, Components); 4] {
        [
            ("fine-tuning", Self::fine_tune()),
            (
                "+ pseudo labeling",
                Self {
                    pseudo: true,
                    ..Self::fine_tune()
                },
            ),
            (
                "++ generative replay",
                Self {
                    pseudo: true,
                    replay: true,
                    distill: false,
                },
            ),
            ("+++ distillation", Self::full()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.distill && !self.replay {
            return Err(Error::Config(
                "components.distill needs components.replay: distillation only runs on generated samples".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub epochs: usize,
    /// Epochs for phases after the first; defaults to `epochs`.
    pub incremental_epochs: Option<usize>,
    pub batch: usize,
    pub schedule: LrSchedule,
    /// Schedule for phases after the first; defaults to `schedule`.
    pub incremental_schedule: Option<LrSchedule>,
    pub adam: AdamConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            incremental_epochs: None,
            batch: 2,
            schedule: LrSchedule {
                base: 1e-3,
                step_epochs: 20,
                gamma: 0.1,
            },
            incremental_schedule: None,
            adam: AdamConfig::default(),
        }
    }
}

impl OptimConfig {
    pub fn epochs_for(&self, phase: usize) -> usize {
        match (phase, self.incremental_epochs) {
            (0, _) | (_, None) => self.epochs,
            (_, Some(e)) => e,
        }
    }

    pub fn schedule_for(&self, phase: usize) -> &LrSchedule {
        match (phase, &self.incremental_schedule) {
            (0, _) | (_, None) => &self.schedule,
            (_, Some(s)) => s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be at least 1".into()));
        }
        for s in std::iter::once(&self.schedule).chain(&self.incremental_schedule) {
            if !(s.base >= 0.0) || !(s.gamma > 0.0) {
                return Err(Error::Config("learning rate and decay factor must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Hyperparameters shared by every phase of a scenario.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub detector: DetectorConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub distill: DistillationConfig,
    pub pseudo: PseudoConfig,
    pub components: Components,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.optim.validate()?;
        self.distill.validate()?;
        self.components.validate()?;
        if !(self.pseudo.threshold > 0.0) {
            return Err(Error::Config(format!(
                "pseudo.threshold must be positive, got {}",
                self.pseudo.threshold
            )));
        }
        Ok(())
    }
}

pub struct PhasePlan<'a> {
    pub phase_index: usize,
    pub new_classes: BTreeSet<ClassId>,
    pub old_classes: BTreeSet<ClassId>,
    /// Real images with new-class annotations only.
    pub real: &'a Dataset,
    pub generated: Option<&'a Dataset>,
    pub settings: &'a TrainSettings,
}

/// One row per sample visit: which loss terms it contributed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRow {
    pub phase: usize,
    pub epoch: usize,
    pub image_id: u64,
    pub provenance: Provenance,
    pub supervised: bool,
    pub distill: bool,
    pub pseudo_labels: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub supervised_samples: usize,
    pub distill_samples: usize,
}

#[derive(Clone, Debug)]
pub struct PhaseTraining {
    pub model: Detector,
    pub log: Vec<ProvenanceRow>,
    pub curve: Vec<EpochStats>,
}

enum Target {
    Supervised { labels: AnnotationSet, pseudo: usize },
    Distill(DetectorOutput),
}

#[derive(Clone, Copy)]
enum Item {
    Real(usize),
    Generated(usize),
}

/// Width of the classification head that covers `classes`.
pub fn head_width(classes: &BTreeSet<ClassId>) -> usize {
    classes.iter().next_back().map_or(0, |c| c.index() + 1)
}

/// Requested layout of a generated image plus the pseudo labels that do not
/// duplicate one of its entities. Used when generated samples are trained
/// with the detection loss, so unrequested old-class glyphs are not taught
/// as background.
fn layout_with_pseudo(layout: &AnnotationSet, pseudo: &PseudoLabelSet) -> AnnotationSet {
    let mut merged = layout.clone();
    for p in &pseudo.labels {
        if layout.instances.iter().all(|i| i.bbox.iou(&p.bbox) < 0.5) {
            merged.instances.push(Instance {
                class_id: p.class_id,
                bbox: p.bbox,
                source: LabelSource::Pseudo,
            });
        }
    }
    merged
}

/// Trains one phase. Phase 0 trains a fresh detector on `plan.real`;
/// later phases widen a copy of `old_model` and keep the original frozen.
pub fn run_phase(plan: &PhasePlan, old_model: Option<&Detector>, seed: u64) -> Result<PhaseTraining> {
    let s = plan.settings;
    s.validate()?;
    let m = plan.phase_index;
    if plan.new_classes.is_empty() {
        return Err(Error::Config(format!("phase {m} has no new classes")));
    }
    if let Some(c) = plan.new_classes.intersection(&plan.old_classes).next() {
        return Err(Error::Config(format!("class {c} is both old and new in phase {m}")));
    }
    let learned: BTreeSet<ClassId> = plan.new_classes.union(&plan.old_classes).copied().collect();
    let width = head_width(&learned);
    let mut model = match (m, old_model) {
        (0, None) => Detector::new(
            DetectorConfig {
                num_classes: width,
                ..s.detector.clone()
            },
            derive_seed(seed, 100),
        )?,
        (0, Some(_)) => return Err(Error::Config("the first phase takes no old model".into())),
        (_, None) => return Err(Error::Config(format!("phase {m} needs the previous phase's model"))),
        (_, Some(old)) => old.widen_head(width, derive_seed(seed, 300 + m as u64))?,
    };
    if plan.generated.is_some() && m == 0 {
        return Err(Error::Config("generated data is only used after the first phase".into()));
    }
    let old_fingerprint = old_model.map(|o| o.params().fingerprint());
    let generated = plan.generated.filter(|_| s.components.replay);

    let mut items: Vec<Item> = (0..plan.real.len()).map(Item::Real).collect();
    if let Some(g) = generated {
        items.extend((0..g.len()).map(Item::Generated));
    }
    if items.is_empty() {
        return Err(Error::Precondition(format!("phase {m} has no training samples")));
    }
    let record = |item: Item| -> &ImageRecord {
        match item {
            Item::Real(i) => &plan.real.records[i],
            Item::Generated(j) => &generated.expect("generated item implies data").records[j],
        }
    };
    let needs_old = |item: Item| match item {
        Item::Real(_) => m > 0 && s.components.pseudo,
        Item::Generated(_) => s.components.distill || s.components.pseudo,
    };

    let mut cache: BTreeMap<(bool, usize), DetectorOutput> = BTreeMap::new();
    let key = |item: Item| match item {
        Item::Real(i) => (false, i),
        Item::Generated(j) => (true, j),
    };
    let old_output = |item: Item, cache: &mut BTreeMap<(bool, usize), DetectorOutput>| -> Result<DetectorOutput> {
        let old = old_model.expect("old outputs are only needed after phase 0");
        if s.pseudo.cache == PseudoCache::Off {
            return old.forward(record(item));
        }
        if let Some(o) = cache.get(&key(item)) {
            return Ok(o.clone());
        }
        let o = old.forward(record(item))?;
        cache.insert(key(item), o.clone());
        Ok(o)
    };

    let target = |item: Item, old_out: Option<DetectorOutput>| -> Result<Target> {
        let rec = record(item);
        match item {
            Item::Real(_) => match old_out {
                Some(o) => {
                    let pseudo = pseudo_label(&o, s.pseudo.threshold, &plan.old_classes);
                    Ok(Target::Supervised {
                        labels: merge_labels(&rec.annotation, &pseudo, &plan.new_classes)?,
                        pseudo: pseudo.len(),
                    })
                }
                None => Ok(Target::Supervised {
                    labels: rec.annotation.clone(),
                    pseudo: 0,
                }),
            },
            Item::Generated(_) => match old_out {
                Some(o) if s.components.distill => Ok(Target::Distill(o)),
                Some(o) => {
                    let pseudo = pseudo_label(&o, s.pseudo.threshold, &plan.old_classes);
                    let labels = layout_with_pseudo(&rec.annotation, &pseudo);
                    let added = labels.len() - rec.annotation.len();
                    Ok(Target::Supervised { labels, pseudo: added })
                }
                None => Ok(Target::Supervised {
                    labels: rec.annotation.clone(),
                    pseudo: 0,
                }),
            },
        }
    };

    let epochs = s.optim.epochs_for(m);
    let mut trainer = Trainer::new(s.optim.adam.clone(), &model);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 200 + m as u64));
    let mut log = Vec::new();
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        if s.pseudo.cache == PseudoCache::PerEpoch {
            cache.clear();
        }
        let lr = s.optim.schedule_for(m).lr_at(epoch);
        let mut order = items.clone();
        order.shuffle(&mut rng);
        let mut stats = EpochStats {
            epoch,
            lr,
            mean_loss: 0.0,
            supervised_samples: 0,
            distill_samples: 0,
        };
        let mut loss_sum = 0.0;
        for chunk in order.chunks(s.optim.batch) {
            let mut targets = Vec::with_capacity(chunk.len());
            for &item in chunk {
                let o = if needs_old(item) {
                    Some(old_output(item, &mut cache)?)
                } else {
                    None
                };
                targets.push(target(item, o)?);
            }
            let images: Vec<&ImageRecord> = chunk.iter().map(|&i| record(i)).collect();
            let mut losses = vec![0.0; chunk.len()];
            trainer.train_step(&mut model, &images, lr, |i, out| {
                let (loss, grad) = match &targets[i] {
                    Target::Supervised { labels, .. } => {
                        let (b, g) = detr_loss(out, labels, &s.loss);
                        (b.total, g)
                    }
                    Target::Distill(old) => {
                        let (b, g) = total_distill_loss_with_grad(out, old, &s.distill)?;
                        (b.total, g)
                    }
                };
                losses[i] = loss;
                Ok((loss, grad))
            })?;
            for ((&item, t), loss) in chunk.iter().zip(&targets).zip(losses) {
                let rec = record(item);
                let (supervised, distill, pseudo) = match t {
                    Target::Supervised { pseudo, .. } => (true, false, *pseudo),
                    Target::Distill(_) => (false, true, 0),
                };
                stats.supervised_samples += supervised as usize;
                stats.distill_samples += distill as usize;
                loss_sum += loss;
                log.push(ProvenanceRow {
                    phase: m,
                    epoch,
                    image_id: rec.annotation.image_id.0,
                    provenance: rec.annotation.provenance,
                    supervised,
                    distill,
                    pseudo_labels: pseudo,
                    loss,
                });
            }
        }
        stats.mean_loss = loss_sum / items.len() as f64;
        curve.push(stats);
    }

    if let (Some(old), Some(fp)) = (old_model, old_fingerprint) {
        if old.params().fingerprint() != fp {
            return Err(Error::Invariant("old model parameters changed during the phase".into()));
        }
    }
    Ok(PhaseTraining { model, log, curve })
}

/// Fixed-length style vector derived from the scenario seed.
pub fn style_vector(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5717_1e00));
    (0..STYLE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Settings of a whole multi-phase run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub train: TrainSettings,
    pub refiner: RefinerConfig,
    pub eval: EvalConfig,
    /// Condition generation on a seed-derived style vector.
    pub use_style_vector: bool,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.refiner.validate()
    }
}

pub struct ScenarioInputs<'a> {
    pub schedule: &'a TaskSchedule,
    /// Full training split (all classes).
    pub train: &'a Dataset,
    /// Held-out split.
    pub eval: &'a Dataset,
    pub generator: &'a dyn Generator,
    pub config: &'a ScenarioConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub all: EvalReport,
    pub old: Option<EvalReport>,
    pub new: EvalReport,
}

#[derive(Clone, Debug)]
pub struct PhaseResult {
    pub phase: usize,
    pub new_classes: BTreeSet<ClassId>,
    pub old_classes: BTreeSet<ClassId>,
    pub model: Detector,
    pub metrics: PhaseMetrics,
    pub generated: Option<Dataset>,
    pub refinement: Option<RefinementReport>,
    pub log: Vec<ProvenanceRow>,
    pub curve: Vec<EpochStats>,
    pub refine_secs: f64,
    pub train_secs: f64,
}

/// Detections of `model` on every image of `d`.
pub fn detect_all(model: &Detector, d: &Dataset, score_threshold: f64) -> Result<Vec<Vec<Detection>>> {
    d.records.iter().map(|r| predict(model, r, score_threshold)).collect()
}

/// All / old / new reports over the classes learned so far.
pub fn evaluate_phase(
    model: &Detector,
    eval: &Dataset,
    old: &BTreeSet<ClassId>,
    new: &BTreeSet<ClassId>,
    cfg: &EvalConfig,
) -> Result<PhaseMetrics> {
    let learned: BTreeSet<ClassId> = old.union(new).copied().collect();
    let gt: Vec<AnnotationSet> = eval.records.iter().map(|r| r.annotation.filtered(&learned)).collect();
    let dets = detect_all(model, eval, cfg.score_threshold)?;
    Ok(PhaseMetrics {
        all: subset_report(&gt, &dets, &learned, Subset::All, cfg)?,
        old: if old.is_empty() {
            None
        } else {
            Some(subset_report(&gt, &dets, old, Subset::Old, cfg)?)
        },
        new: subset_report(&gt, &dets, new, Subset::New, cfg)?,
    })
}

/// Old-class annotations of the original training split, as the refiner
/// input of a later phase.
pub fn old_annotations(train: &Dataset, old: &BTreeSet<ClassId>) -> Vec<AnnotationSet> {
    train
        .records
        .iter()
        .map(|r| r.annotation.filtered(old))
        .filter(|a| !a.is_empty())
        .collect()
}

/// Trains the first phase of `inputs.schedule`.
pub fn first_phase(inputs: &ScenarioInputs, seed: u64) -> Result<PhaseResult> {
    inputs.config.validate()?;
    inputs.schedule.validate_against(&inputs.train.catalog)?;
    let new = inputs.schedule.phase(0).clone();
    let real = crate::data::split_by_schedule(inputs.train, inputs.schedule, 0)?;
    let start = Instant::now();
    let plan = PhasePlan {
        phase_index: 0,
        new_classes: new.clone(),
        old_classes: BTreeSet::new(),
        real: &real,
        generated: None,
        settings: &inputs.config.train,
    };
    let trained = run_phase(&plan, None, seed)?;
    let train_secs = start.elapsed().as_secs_f64();
    let metrics = evaluate_phase(&trained.model, inputs.eval, &BTreeSet::new(), &new, &inputs.config.eval)?;
    Ok(PhaseResult {
        phase: 0,
        new_classes: new,
        old_classes: BTreeSet::new(),
        model: trained.model,
        metrics,
        generated: None,
        refinement: None,
        log: trained.log,
        curve: trained.curve,
        refine_secs: 0.0,
        train_secs,
    })
}

/// Generated replay data for phase `m > 0`, refined against `old_model`
/// (the model after phase `m - 1`).
pub fn replay_for_phase(
    inputs: &ScenarioInputs,
    old_model: &Detector,
    m: usize,
    seed: u64,
) -> Result<RefinementOutcome> {
    let cfg = inputs.config;
    if m == 0 || m >= inputs.schedule.num_phases() {
        return Err(Error::Precondition(format!(
            "phase {m} is not an incremental phase of a {}-phase schedule",
            inputs.schedule.num_phases()
        )));
    }
    let old = inputs.schedule.classes_through(m - 1);
    if old_model.num_classes() < head_width(&old) {
        return Err(Error::Precondition(format!(
            "model knows {} classes, phase {m} replays {}",
            old_model.num_classes(),
            head_width(&old)
        )));
    }
    let options = RequestOptions {
        style_vector: cfg.use_style_vector.then(|| style_vector(seed)),
        ..RequestOptions::default()
    };
    let ctx = ReplayContext {
        catalog: &inputs.train.catalog,
        generator: inputs.generator,
        old_model,
        options: &options,
    };
    let anns = old_annotations(inputs.train, &old);
    run_refinement(&anns, &old, &ctx, &cfg.refiner, derive_seed(seed, 1000 + m as u64))
}

/// Runs phase `m > 0` on top of `prev`.
pub fn next_phase(inputs: &ScenarioInputs, prev: &PhaseResult, m: usize, seed: u64) -> Result<PhaseResult> {
    let cfg = inputs.config;
    cfg.validate()?;
    if m == 0 || m >= inputs.schedule.num_phases() {
        return Err(Error::Precondition(format!(
            "phase {m} is not an incremental phase of a {}-phase schedule",
            inputs.schedule.num_phases()
        )));
    }
    let old = inputs.schedule.classes_through(m - 1);
    let new = inputs.schedule.phase(m).clone();
    let real = crate::data::split_by_schedule(inputs.train, inputs.schedule, m)?;

    let phase_seed = derive_seed(seed, 1000 + m as u64);
    let start = Instant::now();
    let (generated, refinement) = if cfg.train.components.replay {
        let outcome = replay_for_phase(inputs, &prev.model, m, seed)?;
        (Some(outcome.dataset), Some(outcome.report))
    } else {
        (None, None)
    };
    let refine_secs = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let plan = PhasePlan {
        phase_index: m,
        new_classes: new.clone(),
        old_classes: old.clone(),
        real: &real,
        generated: generated.as_ref(),
        settings: &cfg.train,
    };
    let trained = run_phase(&plan, Some(&prev.model), phase_seed)?;
    let train_secs = start.elapsed().as_secs_f64();
    let metrics = evaluate_phase(&trained.model, inputs.eval, &old, &new, &cfg.eval)?;
    Ok(PhaseResult {
        phase: m,
        new_classes: new,
        old_classes: old,
        model: trained.model,
        metrics,
        generated,
        refinement,
        log: trained.log,
        curve: trained.curve,
        refine_secs,
        train_secs,
    })
}

/// Every phase of the schedule in order; `on_phase` sees each result as it
/// completes.
pub fn run_scenario(
    inputs: &ScenarioInputs,
    seed: u64,
    mut on_phase: impl FnMut(&PhaseResult) -> Result<()>,
) -> Result<Vec<PhaseMetrics>> {
    let mut prev = first_phase(inputs, seed)?;
    on_phase(&prev)?;
    let mut metrics = vec![prev.metrics.clone()];
    for m in 1..inputs.schedule.num_phases() {
        let next = next_phase(inputs, &prev, m, seed)?;
        on_phase(&next)?;
        metrics.push(next.metrics.clone());
        prev = next;
    }
    Ok(metrics)
}
