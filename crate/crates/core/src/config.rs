//! Experiment configuration: a TOML tree built from defaults, any number of
//! files layered on top, and `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Canvas, TaskSchedule};
use crate::detector::{DetectorConfig, LossWeights};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::generator::{FidelityProfile, GeneratorKind, WorldConfig};
use crate::losses::DistillationConfig;
use crate::refiner::RefinerConfig;
use crate::trainer::{Components, OptimConfig, PseudoConfig, ScenarioConfig, TrainSettings};

/// Parameters of the synthetic world both splits are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub num_classes: usize,
    pub train_images: usize,
    pub eval_images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub noise: f64,
    pub contexts: usize,
    pub context_affinity: f64,
    pub canvas: Canvas,
    pub seed: u64,
}

impl Default for WorldSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        Self {
            num_classes: w.num_classes,
            train_images: 200,
            eval_images: 50,
            min_objects: w.min_objects,
            max_objects: w.max_objects,
            min_size: w.min_size,
            max_size: w.max_size,
            noise: w.noise,
            contexts: w.contexts,
            context_affinity: w.context_affinity,
            canvas: w.canvas,
            seed: 0,
        }
    }
}

impl WorldSection {
    pub fn world_config(&self, num_images: usize) -> WorldConfig {
        WorldConfig {
            num_classes: self.num_classes,
            num_images,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            min_size: self.min_size,
            max_size: self.max_size,
            noise: self.noise,
            canvas: self.canvas,
            contexts: self.contexts,
            context_affinity: self.context_affinity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub kind: GeneratorKind,
    pub fidelity: FidelityProfile,
    /// Exchange directory of the external backend.
    pub exchange_dir: Option<PathBuf>,
    pub timeout_secs: u64,
    /// Condition requests on a seed-derived style vector.
    pub style_vector: bool,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::Procedural,
            fidelity: FidelityProfile::default(),
            exchange_dir: None,
            timeout_secs: 600,
            style_vector: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldSection,
    /// Phase sizes, e.g. `"8+4"`.
    pub schedule: String,
    pub detector: DetectorConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub distill: DistillationConfig,
    pub pseudo: PseudoConfig,
    pub components: Components,
    pub refiner: RefinerConfig,
    pub eval: EvalConfig,
    pub generator: GeneratorSection,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Seeds run in parallel by sweeps; `0` uses every available core.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldSection::default(),
            schedule: "8+4".into(),
            detector: DetectorConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            distill: DistillationConfig::default(),
            pseudo: PseudoConfig::default(),
            components: Components::default(),
            refiner: RefinerConfig::default(),
            eval: EvalConfig::default(),
            generator: GeneratorSection::default(),
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            workers: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let schedule = self.task_schedule()?;
        if schedule.num_classes() > self.world.num_classes {
            return Err(Error::Config(format!(
                "schedule {} covers {} classes, world has {}",
                self.schedule,
                schedule.num_classes(),
                self.world.num_classes
            )));
        }
        self.world.world_config(self.world.train_images).validate()?;
        if self.world.train_images == 0 || self.world.eval_images == 0 {
            return Err(Error::Config("world needs train and eval images".into()));
        }
        self.generator.fidelity.validate()?;
        if self.generator.kind == GeneratorKind::External && self.generator.exchange_dir.is_none() {
            return Err(Error::Config("generator.kind = external needs generator.exchange_dir".into()));
        }
        self.scenario().validate()
    }

    pub fn task_schedule(&self) -> Result<TaskSchedule> {
        TaskSchedule::parse_shorthand(&self.schedule)
    }

    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            train: TrainSettings {
                detector: self.detector.clone(),
                loss: self.loss.clone(),
                optim: self.optim.clone(),
                distill: self.distill.clone(),
                pseudo: self.pseudo.clone(),
                components: self.components,
            },
            refiner: self.refiner.clone(),
            eval: self.eval.clone(),
            use_style_vector: self.generator.style_vector,
        }
    }

    /// Defaults, then each file in order, then each `key=value` override.
    pub fn from_layers(files: &[PathBuf], overrides: &[String]) -> Result<Self> {
        let mut tree = to_tree(&Self::default())?;
        for path in files {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let layer: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
                record: path.display().to_string(),
                message: e.to_string(),
            })?;
            merge(&mut tree, layer);
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_key(&mut tree, key.trim(), parse_value(value.trim()))?;
        }
        let cfg = from_tree(tree)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A copy with one dotted key replaced.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut tree = to_tree(self)?;
        set_key(&mut tree, key, parse_value(value))?;
        let cfg = from_tree(tree)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The fully resolved tree, as written next to every output.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config does not serialize: {e}")))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved_config.toml");
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_layers(&[path.to_path_buf()], &[])
    }
}

fn to_tree(cfg: &ExperimentConfig) -> Result<toml::Table> {
    toml::Table::try_from(cfg).map_err(|e| Error::Config(format!("config does not serialize: {e}")))
}

fn from_tree(tree: toml::Table) -> Result<ExperimentConfig> {
    toml::Value::Table(tree)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
}

fn merge(base: &mut toml::Table, layer: toml::Table) {
    for (k, v) in layer {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(l)) => merge(b, l),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// TOML literal if it parses as one, otherwise a bare string (`8+4`).
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets a dotted key. Every table on the path must exist; the leaf may be
/// missing only when it names an unset optional field, which deserialization
/// then checks.
fn set_key(tree: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let (leaf, path) = parts.split_last().expect("non-empty split");
    let mut node = tree;
    for (i, p) in path.iter().enumerate() {
        node = match node.get_mut(*p) {
            Some(toml::Value::Table(t)) => t,
            _ => {
                return Err(Error::Config(format!(
                    "unknown config key {key:?}: no table {:?}",
                    parts[..=i].join(".")
                )))
            }
        };
    }
    if let Some(toml::Value::Table(_)) = node.get(*leaf) {
        return Err(Error::Config(format!("{key:?} is a table, set one of its fields")));
    }
    node.insert(leaf.to_string(), value);
    Ok(())
}

/// Fails with a config error when `key` does not name a settable field.
pub fn check_key(cfg: &ExperimentConfig, key: &str, sample_value: &str) -> Result<()> {
    cfg.with_override(key, sample_value).map(|_| ())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refiner::Quota;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.world.train_images, 200);
        assert_eq!(cfg.world.eval_images, 50);
        assert_eq!(cfg.world.num_classes, 12);
    }

    #[test]
    fn overrides_parse_typed_values() {
        let cfg = ExperimentConfig::from_layers(
            &[],
            &[
                "refiner.quota=inf".into(),
                "distill.lambda=3".into(),
                "components.distill=false".into(),
                "schedule=6+2+2+2".into(),
                "seeds=[1, 2]".into(),
                "optim.incremental_epochs=4".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.refiner.quota, Quota::All);
        assert_eq!(cfg.distill.lambda, 3.0);
        assert!(!cfg.components.distill);
        assert_eq!(cfg.task_schedule().unwrap().num_phases(), 4);
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.optim.incremental_epochs, Some(4));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        for o in ["refiner.nope=1", "nope.quota=1", "world=3", "pseudo.threshold.x=1"] {
            let e = ExperimentConfig::from_layers(&[], &[o.into()]).unwrap_err();
            assert!(e.is_config(), "{o}: {e}");
        }
        let e = ExperimentConfig::from_layers(&[], &["seeds=[]".into()]).unwrap_err();
        assert!(e.to_string().contains("seeds"));
    }

    #[test]
    fn files_layer_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.toml");
        let b = dir.path().join("b.toml");
        fs::write(&a, "schedule = \"6+6\"\n[refiner]\nquota = 10\np_lo = 0.5\n").unwrap();
        fs::write(&b, "[refiner]\nquota = 25\n").unwrap();
        let cfg = ExperimentConfig::from_layers(&[a, b], &["refiner.p_hi=0.9".into()]).unwrap();
        assert_eq!(cfg.schedule, "6+6");
        assert_eq!(cfg.refiner.quota, Quota::Finite(25));
        assert_eq!(cfg.refiner.p_lo, 0.5);
        assert_eq!(cfg.refiner.p_hi, 0.9);
    }

    #[test]
    fn resolved_config_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_layers(&[], &["refiner.quota=inf".into(), "world.seed=7".into()]).unwrap();
        let path = cfg.write_resolved(dir.path()).unwrap();
        assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
    }
}
