//! Command implementations shared by the CLI and the Python bindings:
//! world synthesis, training runs, evaluation, ablation sweeps and
//! standalone refinement. Every command writes its resolved config next to
//! its outputs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::config::{check_key, ExperimentConfig};
use crate::data::{
    class_instance_counts, load_dataset, save_dataset, AnnotationSet, Category, ClassId, Dataset, TaskSchedule,
};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::eval::{fpp, subset_report, EvalReport, PercentReport, Subset};
use crate::generator::{default_catalog, synthesize_world, ExternalGenerator, Generator, GeneratorKind, ProceduralGenerator};
use crate::seeds::derive_seed;
use crate::trainer::{
    detect_all, first_phase, head_width, next_phase, replay_for_phase, Components, PhaseResult, ScenarioInputs,
};

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        mkdir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("report serializes") + "\n"))
}

// ---- world -----------------------------------------------------------------

pub struct WorldPaths {
    pub dir: PathBuf,
    pub train: PathBuf,
    pub eval: PathBuf,
    pub manifest: PathBuf,
}

pub fn world_paths(cfg: &ExperimentConfig) -> WorldPaths {
    let dir = cfg.out_dir.join("world");
    WorldPaths {
        train: dir.join("train").join("dataset.json"),
        eval: dir.join("eval").join("dataset.json"),
        manifest: dir.join("manifest.json"),
        dir,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldManifest {
    pub seed: u64,
    pub num_classes: usize,
    pub train_images: usize,
    pub eval_images: usize,
    pub train_instances: usize,
    pub eval_instances: usize,
    pub train_class_counts: BTreeMap<ClassId, usize>,
}

/// Train and eval splits of the configured world, generated in memory.
pub fn synthesize_splits(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let w = &cfg.world;
    let catalog = default_catalog(w.num_classes);
    let train = synthesize_world(&catalog, &w.world_config(w.train_images), derive_seed(w.seed, 1))?;
    let eval = synthesize_world(&catalog, &w.world_config(w.eval_images), derive_seed(w.seed, 2))?;
    Ok((train, eval))
}

pub fn cmd_synth_world(cfg: &ExperimentConfig) -> Result<WorldManifest> {
    cfg.validate()?;
    let paths = world_paths(cfg);
    let (train, eval) = synthesize_splits(cfg)?;
    mkdir(paths.train.parent().expect("split dir"))?;
    mkdir(paths.eval.parent().expect("split dir"))?;
    save_dataset(&train, &paths.train)?;
    save_dataset(&eval, &paths.eval)?;
    let manifest = WorldManifest {
        seed: cfg.world.seed,
        num_classes: cfg.world.num_classes,
        train_images: train.len(),
        eval_images: eval.len(),
        train_instances: train.instance_count(),
        eval_instances: eval.instance_count(),
        train_class_counts: class_instance_counts(&train),
    };
    write_json(&paths.manifest, &manifest)?;
    cfg.write_resolved(&paths.dir)?;
    Ok(manifest)
}

/// Loads the world written by [`cmd_synth_world`].
pub fn load_world(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let paths = world_paths(cfg);
    for p in [&paths.train, &paths.eval] {
        if !p.exists() {
            return Err(Error::Precondition(format!(
                "world split not found at {} (run synth-world first)",
                p.display()
            )));
        }
    }
    Ok((load_dataset(&paths.train)?, load_dataset(&paths.eval)?))
}

pub fn build_generator(cfg: &ExperimentConfig) -> Result<Box<dyn Generator>> {
    let g = &cfg.generator;
    match g.kind {
        GeneratorKind::Procedural => {
            let mut gen = ProceduralGenerator::new(g.fidelity, cfg.world.num_classes)?;
            gen.canvas = cfg.world.canvas;
            Ok(Box::new(gen))
        }
        GeneratorKind::External => {
            let dir = g
                .exchange_dir
                .clone()
                .ok_or_else(|| Error::Config("generator.exchange_dir is not set".into()))?;
            let mut gen = ExternalGenerator::new(dir);
            gen.canvas = cfg.world.canvas;
            gen.timeout = Duration::from_secs(g.timeout_secs);
            Ok(Box::new(gen))
        }
    }
}

// ---- metrics files ---------------------------------------------------------

/// Per-phase metrics in percent at one decimal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub phase: usize,
    pub seed: u64,
    pub new_classes: Vec<ClassId>,
    pub old_classes: Vec<ClassId>,
    pub all: PercentReport,
    pub old: Option<PercentReport>,
    pub new: PercentReport,
    /// AP over the first phase's classes, the basis of FPP.
    pub first_phase: PercentReport,
    /// Forgetting of the first phase's classes since the first phase.
    pub fpp: Option<f64>,
}

fn one_decimal(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

fn format_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.1}"))
}

impl MetricsFile {
    pub fn to_text(&self, catalog: &[Category]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "phase {} seed {}", self.phase, self.seed);
        let _ = writeln!(s, "{:<12} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}", "subset", "AP", "AP50", "AP75", "APs", "APm", "APl");
        let rows = [("all", Some(&self.all)), ("old", self.old.as_ref()), ("new", Some(&self.new)), ("first-phase", Some(&self.first_phase))];
        for (name, r) in rows {
            if let Some(r) = r {
                let _ = writeln!(
                    s,
                    "{:<12} {:>6.1} {:>6} {:>6} {:>6} {:>6} {:>6}",
                    name,
                    r.ap,
                    format_opt(r.ap50),
                    format_opt(r.ap75),
                    format_opt(r.ap_small),
                    format_opt(r.ap_medium),
                    format_opt(r.ap_large)
                );
            }
        }
        if let Some(f) = self.fpp {
            let _ = writeln!(s, "FPP {f:.1}");
        }
        let _ = writeln!(s, "\n{:<4} {:<16} {:>6}", "id", "class", "AP");
        for (c, ap) in &self.all.per_class_ap {
            let name = catalog.iter().find(|k| k.id == *c).map_or("?", |k| k.name.as_str());
            let _ = writeln!(s, "{:<4} {:<16} {:>6.1}", c.0, name, ap);
        }
        s
    }
}

/// Reports of the first phase's classes at every phase of a run, used for FPP.
fn first_phase_report(
    model: &Detector,
    eval: &Dataset,
    schedule: &TaskSchedule,
    learned: &BTreeSet<ClassId>,
    cfg: &ExperimentConfig,
) -> Result<EvalReport> {
    let gt: Vec<AnnotationSet> = eval.records.iter().map(|r| r.annotation.filtered(learned)).collect();
    let dets = detect_all(model, eval, cfg.eval.score_threshold)?;
    subset_report(&gt, &dets, schedule.phase(0), Subset::Old, &cfg.eval)
}

fn metrics_file(
    r: &PhaseResult,
    seed: u64,
    first: &EvalReport,
    first_at_phase0: Option<f64>,
) -> MetricsFile {
    let first_pct = PercentReport::from(first);
    MetricsFile {
        phase: r.phase,
        seed,
        new_classes: r.new_classes.iter().copied().collect(),
        old_classes: r.old_classes.iter().copied().collect(),
        all: PercentReport::from(&r.metrics.all),
        old: r.metrics.old.as_ref().map(PercentReport::from),
        new: PercentReport::from(&r.metrics.new),
        fpp: first_at_phase0.map(|ap0| one_decimal(fpp(ap0, first_pct.ap))),
        first_phase: first_pct,
    }
}

// ---- training runs ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub metrics: MetricsFile,
    pub refine_secs: f64,
    pub train_secs: f64,
    pub generated_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub phases: Vec<PhaseSummary>,
}

impl RunSummary {
    pub fn final_metrics(&self) -> &MetricsFile {
        &self.phases.last().expect("a run has at least one phase").metrics
    }

    /// Refinement plus training time of the incremental phases.
    pub fn incremental_secs(&self) -> f64 {
        self.phases.iter().skip(1).map(|p| p.refine_secs + p.train_secs).sum()
    }
}

/// What a run writes to disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Artifacts {
    None,
    Metrics,
    /// Metrics plus checkpoints, D_gen, refinement reports, provenance logs
    /// and curves.
    Full,
}

/// Output directory of one phase of one seed.
pub fn phase_dir(run_dir: &Path, seed: u64, phase: usize) -> PathBuf {
    run_dir.join(format!("seed-{seed}")).join(format!("phase-{phase}"))
}

fn write_phase(dir: &Path, r: &PhaseResult, metrics: &MetricsFile, catalog: &[Category], artifacts: Artifacts) -> Result<()> {
    if artifacts == Artifacts::None {
        return Ok(());
    }
    write_json(&dir.join("metrics.json"), metrics)?;
    write_text(&dir.join("metrics.txt"), &metrics.to_text(catalog))?;
    if artifacts == Artifacts::Metrics {
        return Ok(());
    }
    r.model.save(&dir.join("checkpoint.json"), &catalog[..r.model.num_classes()])?;
    let mut log = String::new();
    for row in &r.log {
        log.push_str(&serde_json::to_string(row).expect("row serializes"));
        log.push('\n');
    }
    write_text(&dir.join("provenance.jsonl"), &log)?;
    write_json(&dir.join("curve.json"), &r.curve)?;
    if let Some(g) = &r.generated {
        let path = dir.join("generated").join("dataset.json");
        mkdir(path.parent().expect("generated dir"))?;
        save_dataset(g, &path)?;
    }
    if let Some(rep) = &r.refinement {
        write_json(&dir.join("refinement.json"), rep)?;
    }
    Ok(())
}

/// Caches first-phase results across runs that differ only in settings the
/// first phase never reads.
#[derive(Default)]
pub struct FirstPhaseCache {
    entries: HashMap<(String, u64), PhaseResult>,
}

impl FirstPhaseCache {
    fn key(cfg: &ExperimentConfig) -> Result<String> {
        let base = ExperimentConfig::default();
        let mut c = cfg.clone();
        c.components = base.components;
        c.pseudo = base.pseudo;
        c.distill = base.distill;
        c.refiner = base.refiner;
        c.generator = base.generator;
        c.optim.incremental_epochs = None;
        c.optim.incremental_schedule = None;
        c.workers = 0;
        c.seeds = vec![0];
        c.out_dir = PathBuf::new();
        c.to_toml()
    }
}

/// Runs every phase for one seed in memory.
pub struct RunContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub train: &'a Dataset,
    pub eval: &'a Dataset,
}

impl RunContext<'_> {
    pub fn run_seed(
        &self,
        seed: u64,
        out: Option<(&Path, Artifacts)>,
        cache: Option<&mut FirstPhaseCache>,
        mut on_phase: impl FnMut(&PhaseResult) -> Result<()>,
    ) -> Result<RunSummary> {
        let cfg = self.cfg;
        cfg.validate()?;
        if self.train.catalog != self.eval.catalog {
            return Err(Error::Config("train and eval splits have different catalogs".into()));
        }
        let schedule = cfg.task_schedule()?;
        let scenario = cfg.scenario();
        let generator = build_generator(cfg)?;
        let inputs = ScenarioInputs {
            schedule: &schedule,
            train: self.train,
            eval: self.eval,
            generator: generator.as_ref(),
            config: &scenario,
        };
        let catalog = &self.train.catalog;

        let first = match cache {
            Some(cache) => {
                let key = (FirstPhaseCache::key(cfg)?, seed);
                match cache.entries.get(&key) {
                    Some(r) => r.clone(),
                    None => {
                        let r = first_phase(&inputs, seed)?;
                        cache.entries.insert(key, r.clone());
                        r
                    }
                }
            }
            None => first_phase(&inputs, seed)?,
        };

        let mut phases = Vec::with_capacity(schedule.num_phases());
        let mut first_ap0 = None;
        let mut prev: Option<PhaseResult> = None;
        for m in 0..schedule.num_phases() {
            let r = match &prev {
                None => first.clone(),
                Some(p) => next_phase(&inputs, p, m, seed)?,
            };
            let learned = schedule.classes_through(m);
            let first_report = first_phase_report(&r.model, self.eval, &schedule, &learned, cfg)?;
            let metrics = metrics_file(&r, seed, &first_report, first_ap0);
            if m == 0 {
                first_ap0 = Some(metrics.first_phase.ap);
            }
            if let Some((dir, artifacts)) = out {
                write_phase(&phase_dir(dir, seed, m), &r, &metrics, catalog, artifacts)?;
            }
            on_phase(&r)?;
            phases.push(PhaseSummary {
                metrics,
                refine_secs: r.refine_secs,
                train_secs: r.train_secs,
                generated_images: r.generated.as_ref().map_or(0, |d| d.len()),
            });
            prev = Some(r);
        }
        Ok(RunSummary { seed, phases })
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Disables pseudo labeling, replay and distillation together.
    pub fine_tune_baseline: bool,
    pub plots: bool,
}

/// Directory `train` writes to.
pub fn train_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("train")
}

pub fn cmd_train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<Vec<RunSummary>> {
    let mut cfg = cfg.clone();
    if opts.fine_tune_baseline {
        cfg.components = Components::fine_tune();
    }
    cfg.validate()?;
    let (train, eval) = load_world(&cfg)?;
    let dir = train_dir(&cfg);
    cfg.write_resolved(&dir)?;
    let ctx = RunContext {
        cfg: &cfg,
        train: &train,
        eval: &eval,
    };
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let run = ctx.run_seed(seed, Some((&dir, Artifacts::Full)), None, |_| Ok(()))?;
        if opts.plots {
            crate::plot::ap_trajectory(&run, &dir.join(format!("seed-{seed}")).join("ap_trajectory.png"))?;
        }
        runs.push(run);
    }
    write_json(&dir.join("summary.json"), &runs)?;
    Ok(runs)
}

// ---- evaluate --------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct EvaluateOptions {
    /// Phase whose class split defines old/new; inferred from the head
    /// width when absent.
    pub phase: Option<usize>,
    pub old: bool,
    pub new: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationFile {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub phase: usize,
    pub all: PercentReport,
    pub old: Option<PercentReport>,
    pub new: Option<PercentReport>,
}

fn infer_phase(schedule: &TaskSchedule, num_classes: usize) -> Result<usize> {
    (0..schedule.num_phases())
        .find(|&m| head_width(&schedule.classes_through(m)) == num_classes)
        .ok_or_else(|| {
            Error::Config(format!(
                "a {num_classes}-class head does not end any phase of the schedule; pass the phase explicitly"
            ))
        })
}

pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    dataset: &Path,
    opts: &EvaluateOptions,
    out: &Path,
) -> Result<EvaluationFile> {
    let (model, catalog) = Detector::load(checkpoint)?;
    let data = load_dataset(dataset)?;
    let shared = catalog.len().min(data.catalog.len());
    if catalog[..shared] != data.catalog[..shared] || catalog.len() > data.catalog.len() {
        return Err(Error::Config(format!(
            "catalog mismatch: checkpoint {} has {} classes, dataset {} has {} (or names differ)",
            checkpoint.display(),
            catalog.len(),
            dataset.display(),
            data.catalog.len()
        )));
    }
    let schedule = cfg.task_schedule()?;
    let phase = match opts.phase {
        Some(m) if m < schedule.num_phases() => m,
        Some(m) => return Err(Error::Config(format!("phase {m} is outside the schedule"))),
        None => infer_phase(&schedule, model.num_classes())?,
    };
    let learned = schedule.classes_through(phase);
    if head_width(&learned) > model.num_classes() {
        return Err(Error::Config(format!(
            "checkpoint has {} classes, phase {phase} needs {}",
            model.num_classes(),
            head_width(&learned)
        )));
    }
    let old = if phase == 0 {
        BTreeSet::new()
    } else {
        schedule.classes_through(phase - 1)
    };
    let new = schedule.phase(phase).clone();
    let gt: Vec<AnnotationSet> = data.records.iter().map(|r| r.annotation.filtered(&learned)).collect();
    let dets = detect_all(&model, &data, cfg.eval.score_threshold)?;
    let report = |classes: &BTreeSet<ClassId>, subset| -> Result<PercentReport> {
        Ok(PercentReport::from(&subset_report(&gt, &dets, classes, subset, &cfg.eval)?))
    };
    let file = EvaluationFile {
        checkpoint: checkpoint.to_path_buf(),
        dataset: dataset.to_path_buf(),
        phase,
        all: report(&learned, Subset::All)?,
        old: if opts.old {
            if old.is_empty() {
                return Err(Error::Config("phase 0 has no old classes".into()));
            }
            Some(report(&old, Subset::Old)?)
        } else {
            None
        },
        new: if opts.new { Some(report(&new, Subset::New)?) } else { None },
    };
    write_json(out, &file)?;
    if let Some(dir) = out.parent() {
        cfg.write_resolved(dir)?;
    }
    Ok(file)
}

// ---- ablation --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum Sweep {
    /// One config key over a list of values.
    Key { key: String, values: Vec<String> },
    /// The cumulative component chain.
    Components,
}

impl Sweep {
    /// `components` or `key=v1,v2,...`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if spec == "components" {
            return Ok(Sweep::Components);
        }
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep {spec:?} is neither `components` nor key=v1,v2")))?;
        let values: Vec<String> = values
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        let sweep = Sweep::Key {
            key: key.trim().to_string(),
            values,
        };
        sweep.check_nonempty()?;
        Ok(sweep)
    }

    fn check_nonempty(&self) -> Result<()> {
        match self {
            Sweep::Key { key, values } if values.is_empty() => {
                Err(Error::Config(format!("sweep over {key} has no values")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Sweep::Key { key, .. } => key.clone(),
            Sweep::Components => "components".into(),
        }
    }

    /// Row labels and the config of each row. Fails before anything runs
    /// when a key or value is not accepted.
    pub fn cells(&self, base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
        self.check_nonempty()?;
        match self {
            Sweep::Components => Ok(Components::ablation_chain()
                .into_iter()
                .map(|(name, c)| {
                    let mut cfg = base.clone();
                    cfg.components = c;
                    (name.to_string(), cfg)
                })
                .collect()),
            Sweep::Key { key, values } => {
                check_key(base, key, &values[0])?;
                values
                    .iter()
                    .map(|v| Ok((format!("{key}={v}"), base.with_override(key, v)?)))
                    .collect()
            }
        }
    }
}

/// Final-phase metrics of one row, in percent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RowMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub old_ap: f64,
    pub new_ap: f64,
    pub fpp: f64,
}

impl RowMetrics {
    fn of(m: &MetricsFile) -> Self {
        Self {
            ap: m.all.ap,
            ap50: m.all.ap50.unwrap_or(0.0),
            ap75: m.all.ap75.unwrap_or(0.0),
            old_ap: m.old.as_ref().map_or(0.0, |o| o.ap),
            new_ap: m.new.ap,
            fpp: m.fpp.unwrap_or(0.0),
        }
    }

    fn fields(&self) -> [f64; 6] {
        [self.ap, self.ap50, self.ap75, self.old_ap, self.new_ap, self.fpp]
    }

    fn from_fields(f: [f64; 6]) -> Self {
        Self {
            ap: f[0],
            ap50: f[1],
            ap75: f[2],
            old_ap: f[3],
            new_ap: f[4],
            fpp: f[5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub per_seed: Vec<RowMetrics>,
    pub mean: RowMetrics,
    /// Population standard deviation over seeds.
    pub spread: RowMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub sweep: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| {} | AP | AP50 | AP75 | old AP | new AP | FPP |", self.sweep);
        let _ = writeln!(s, "|---|---|---|---|---|---|---|");
        for r in &self.rows {
            let cells: Vec<String> = r
                .mean
                .fields()
                .iter()
                .zip(r.spread.fields())
                .map(|(m, sd)| format!("{m:.1} ± {sd:.1}"))
                .collect();
            let _ = writeln!(s, "| {} | {} |", r.label, cells.join(" | "));
        }
        s
    }
}

fn aggregate(label: String, per_seed: Vec<RowMetrics>) -> AblationRow {
    let n = per_seed.len() as f64;
    let mut mean = [0.0; 6];
    for r in &per_seed {
        for (m, v) in mean.iter_mut().zip(r.fields()) {
            *m += v / n;
        }
    }
    let mut var = [0.0; 6];
    for r in &per_seed {
        for ((v, m), x) in var.iter_mut().zip(mean).zip(r.fields()) {
            *v += (x - m).powi(2) / n;
        }
    }
    AblationRow {
        label,
        mean: RowMetrics::from_fields(mean.map(round3)),
        spread: RowMetrics::from_fields(var.map(|v| round3(v.sqrt()))),
        per_seed,
    }
}

/// Table cells print one decimal; comparisons use the stored three.
fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// Wall time of each row's incremental phases, kept out of the table so the
/// table stays a pure function of its inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTiming {
    pub label: String,
    pub per_seed_secs: Vec<f64>,
    pub mean_secs: f64,
}

#[derive(Debug)]
pub struct AblationOutcome {
    pub table: AblationTable,
    pub timing: Vec<AblationTiming>,
}

pub fn ablation_dir(cfg: &ExperimentConfig, sweep: &Sweep) -> PathBuf {
    cfg.out_dir.join("ablate").join(sweep.name().replace(['/', '\\'], "_"))
}

/// Runs every cell of `sweep` for every seed. Seeds run on parallel worker
/// threads; within a seed the first phase is trained once when the cells
/// agree on everything it depends on.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    sweep: &Sweep,
    train: &Dataset,
    eval: &Dataset,
    out: Option<&Path>,
) -> Result<AblationOutcome> {
    cfg.validate()?;
    let cells = sweep.cells(cfg)?;
    let cell_dirs: Vec<Option<PathBuf>> = (0..cells.len()).map(|i| out.map(|d| d.join(format!("cell-{i}")))).collect();
    for ((_, cell_cfg), dir) in cells.iter().zip(&cell_dirs) {
        if let Some(d) = dir {
            cell_cfg.write_resolved(d)?;
        }
    }
    let one_seed = |&seed: &u64| -> Result<Vec<(RowMetrics, f64)>> {
        let mut cache = FirstPhaseCache::default();
        cells
            .iter()
            .zip(&cell_dirs)
            .map(|((_, cell_cfg), dir)| {
                let ctx = RunContext {
                    cfg: cell_cfg,
                    train,
                    eval,
                };
                let target = dir.as_deref().map(|d| (d, Artifacts::Metrics));
                let run = ctx.run_seed(seed, target, Some(&mut cache), |_| Ok(()))?;
                Ok((RowMetrics::of(run.final_metrics()), run.incremental_secs()))
            })
            .collect()
    };
    let per_seed = map_parallel(&cfg.seeds, worker_count(cfg), one_seed)?;

    let mut rows = Vec::with_capacity(cells.len());
    let mut timing = Vec::with_capacity(cells.len());
    for (i, (label, _)) in cells.iter().enumerate() {
        let secs: Vec<f64> = per_seed.iter().map(|s| s[i].1).collect();
        timing.push(AblationTiming {
            label: label.clone(),
            mean_secs: secs.iter().sum::<f64>() / secs.len() as f64,
            per_seed_secs: secs,
        });
        rows.push(aggregate(label.clone(), per_seed.iter().map(|s| s[i].0).collect()));
    }
    Ok(AblationOutcome {
        table: AblationTable {
            sweep: sweep.name(),
            seeds: cfg.seeds.clone(),
            rows,
        },
        timing,
    })
}

fn worker_count(cfg: &ExperimentConfig) -> usize {
    match cfg.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
}

/// `f` over `items` on up to `workers` threads; results keep input order.
pub fn map_parallel<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(workers) {
        let results: Vec<Result<R>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|x| s.spawn(|| f(x))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
                .collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

pub fn cmd_ablate(cfg: &ExperimentConfig, sweep: &Sweep) -> Result<AblationOutcome> {
    cfg.validate()?;
    sweep.cells(cfg)?;
    let (train, eval) = load_world(cfg)?;
    let dir = ablation_dir(cfg, sweep);
    cfg.write_resolved(&dir)?;
    let outcome = run_ablation(cfg, sweep, &train, &eval, Some(&dir))?;
    write_json(&dir.join("table.json"), &outcome.table)?;
    write_text(&dir.join("table.md"), &outcome.table.to_markdown())?;
    write_json(&dir.join("timing.json"), &outcome.timing)?;
    Ok(outcome)
}

// ---- refine-only -----------------------------------------------------------

pub fn refine_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("refine")
}

/// Runs the refiner of phase `phase` against `checkpoint` and writes the
/// generated dataset and report under `refine/seed-<s>/phase-<m>`.
pub fn cmd_refine_only(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    phase: usize,
) -> Result<Vec<crate::refiner::RefinementReport>> {
    cfg.validate()?;
    let (train, eval) = load_world(cfg)?;
    let (model, catalog) = Detector::load(checkpoint)?;
    if train.catalog[..catalog.len().min(train.catalog.len())] != catalog[..] {
        return Err(Error::Config(format!(
            "catalog mismatch between checkpoint {} and the world",
            checkpoint.display()
        )));
    }
    let schedule = cfg.task_schedule()?;
    let scenario = cfg.scenario();
    let generator = build_generator(cfg)?;
    let inputs = ScenarioInputs {
        schedule: &schedule,
        train: &train,
        eval: &eval,
        generator: generator.as_ref(),
        config: &scenario,
    };
    let dir = refine_dir(cfg);
    cfg.write_resolved(&dir)?;
    let mut reports = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let outcome = replay_for_phase(&inputs, &model, phase, seed)?;
        let d = phase_dir(&dir, seed, phase);
        let path = d.join("generated").join("dataset.json");
        mkdir(path.parent().expect("generated dir"))?;
        save_dataset(&outcome.dataset, &path)?;
        write_json(&d.join("refinement.json"), &outcome.report)?;
        reports.push(outcome.report);
    }
    Ok(reports)
}

/// Old-class AP of every phase of a run, for quick inspection.
pub fn trajectory(run: &RunSummary) -> Vec<(usize, f64, Option<f64>, f64)> {
    run.phases
        .iter()
        .map(|p| (p.metrics.phase, p.metrics.all.ap, p.metrics.old.as_ref().map(|o| o.ap), p.metrics.new.ap))
        .collect()
}
