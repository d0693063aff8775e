//! Experiment configuration files.
//!
//! A config is a TOML table naming an experiment plus optional overrides.
//! Unset fields take the experiment's preset values, so the resolved config
//! is always complete; [`ExperimentConfig::canonical`] serializes that
//! resolved form and its hash keys checkpoints and results.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::AdamConfig;
use crate::revbuf::Ratio;
use crate::train::config_hash;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    LrSchedule,
    InitScales,
    PerParamReg,
    LearnData,
    TiedReg,
    ChaosSweep,
    MemoryBench,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 7] = [
        Self::LrSchedule,
        Self::InitScales,
        Self::PerParamReg,
        Self::LearnData,
        Self::TiedReg,
        Self::ChaosSweep,
        Self::MemoryBench,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::LrSchedule => "lr_schedule",
            Self::InitScales => "init_scales",
            Self::PerParamReg => "per_param_reg",
            Self::LearnData => "learn_data",
            Self::TiedReg => "tied_reg",
            Self::ChaosSweep => "chaos_sweep",
            Self::MemoryBench => "memory_bench",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::config("experiment", format!("unknown experiment `{s}`")))
    }
}

/// Hyperparameter families that meta-optimization may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Alpha,
    Gamma,
    InitScales,
    Penalties,
    Pixels,
    Tying,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// MNIST when the IDX files are present, otherwise synthetic.
    Auto,
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Training,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Hidden layer widths; empty means logistic regression.
    pub hidden: Vec<usize>,
    pub init_log_l2: f64,
    pub init_log_tying: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Training examples (per task for `tied_reg`; ignored by `learn_data`,
    /// which learns one example per class).
    pub train: usize,
    pub valid: usize,
    pub seed: u64,
    /// Synthetic images are `side x side`.
    pub side: usize,
    pub classes: usize,
    pub separation: f64,
    pub tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    pub iterations: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub frac_bits: u32,
    pub objective: ObjectiveKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaSpec {
    pub iterations: usize,
    pub seeds: usize,
    pub base_seed: u64,
    pub eval_seeds: usize,
    pub early_stop_factor: f64,
    pub optimize: Vec<Target>,
    pub adam: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChaosSpec {
    pub log_alpha_min: f64,
    pub log_alpha_max: f64,
    pub points: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemorySpec {
    pub gammas: Vec<Ratio>,
    pub steps: usize,
    pub elements: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub output_dir: PathBuf,
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub training: TrainingSpec,
    pub meta: MetaSpec,
    pub chaos: ChaosSpec,
    pub memory: MemorySpec,
}

impl ExperimentConfig {
    /// Desk-scale defaults for `id`.
    pub fn preset(id: ExperimentId) -> Self {
        let mut c = Self {
            experiment: id,
            output_dir: PathBuf::from("runs").join(id.as_str()),
            model: ModelSpec { hidden: vec![20, 20, 20], init_log_l2: (1e-3f64).ln(), init_log_tying: (1e-2f64).ln() },
            dataset: DatasetSpec {
                source: DataSource::Auto,
                train: 1000,
                valid: 1000,
                seed: 0,
                side: 8,
                classes: 10,
                separation: 3.0,
                tasks: 3,
            },
            training: TrainingSpec {
                iterations: 100,
                batch_size: 100,
                alpha: 1.0,
                gamma: 0.9,
                frac_bits: 32,
                objective: ObjectiveKind::Training,
            },
            meta: MetaSpec {
                iterations: 20,
                seeds: 3,
                base_seed: 0,
                eval_seeds: 5,
                early_stop_factor: 10.0,
                optimize: vec![Target::Alpha, Target::Gamma],
                adam: AdamConfig::default(),
            },
            chaos: ChaosSpec { log_alpha_min: (1e-3f64).ln(), log_alpha_max: (1e2f64).ln(), points: 100, seed: 0 },
            memory: MemorySpec {
                gammas: ["1/2", "7/8", "9/10", "49/50"].iter().map(|s| s.parse().unwrap()).collect(),
                steps: 10_000,
                elements: 100,
                seed: 0,
            },
        };
        match id {
            ExperimentId::LrSchedule => {}
            ExperimentId::InitScales => {
                c.meta.optimize = vec![Target::Alpha, Target::Gamma, Target::InitScales];
            }
            ExperimentId::PerParamReg => {
                c.model.hidden.clear();
                c.training.objective = ObjectiveKind::Validation;
                c.meta.optimize = vec![Target::Penalties];
            }
            ExperimentId::LearnData => {
                c.model.hidden.clear();
                c.training.batch_size = 0;
                c.training.objective = ObjectiveKind::Validation;
                c.meta.optimize = vec![Target::Pixels];
            }
            ExperimentId::TiedReg => {
                c.model.hidden.clear();
                c.dataset.train = 30;
                c.dataset.valid = 300;
                c.training.batch_size = 0;
                c.training.objective = ObjectiveKind::Validation;
                c.meta.optimize = vec![Target::Tying];
            }
            ExperimentId::ChaosSweep => {
                c.model.hidden = vec![20, 20];
                c.training.iterations = 50;
                c.meta.iterations = 0;
                c.meta.optimize.clear();
            }
            ExperimentId::MemoryBench => {
                c.meta.iterations = 0;
                c.meta.optimize.clear();
            }
        }
        c
    }

    /// Parses a config file's text: `experiment` selects the preset and
    /// every other key overrides it.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("<root>", e.message()))?;
        let id = match user.get("experiment") {
            Some(toml::Value::String(s)) => s.parse::<ExperimentId>()?,
            Some(_) => return Err(Error::config("experiment", "expected a string")),
            None => return Err(Error::config("experiment", "missing field")),
        };
        let mut merged = toml::Table::try_from(Self::preset(id)).expect("preset serializes");
        merge(&mut merged, user);
        let config: Self = serde_path_to_error::deserialize(toml::Value::Table(merged)).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().message())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// The fully resolved config in a fixed key order.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> [u8; 8] {
        config_hash(self.canonical().as_bytes())
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, msg: String| Err(Error::config(path, msg));
        let d = &self.dataset;
        let t = &self.training;
        let m = &self.meta;
        if self.model.hidden.contains(&0) {
            return fail("model.hidden", "layer widths must be positive".into());
        }
        if d.classes < 2 {
            return fail("dataset.classes", format!("need at least 2 classes, got {}", d.classes));
        }
        if d.side == 0 {
            return fail("dataset.side", "must be positive".into());
        }
        if d.train < d.classes && self.experiment != ExperimentId::LearnData {
            return fail("dataset.train", format!("{} examples cannot cover {} classes", d.train, d.classes));
        }
        if d.valid == 0 {
            return fail("dataset.valid", "must be positive".into());
        }
        if !(d.separation.is_finite() && d.separation > 0.0) {
            return fail("dataset.separation", format!("must be positive, got {}", d.separation));
        }
        if self.experiment == ExperimentId::TiedReg && d.tasks < 2 {
            return fail("dataset.tasks", format!("tied regularization needs at least 2 tasks, got {}", d.tasks));
        }
        if t.iterations == 0 {
            return fail("training.iterations", "must be positive".into());
        }
        if !(t.alpha.is_finite() && t.alpha > 0.0) {
            return fail("training.alpha", format!("must be positive, got {}", t.alpha));
        }
        if !(t.gamma > 0.0 && t.gamma < 1.0) {
            return fail("training.gamma", format!("must lie in (0, 1), got {}", t.gamma));
        }
        if !(8..=56).contains(&t.frac_bits) {
            return fail("training.frac_bits", format!("must lie in 8..=56, got {}", t.frac_bits));
        }
        if m.iterations > 0 && (m.seeds == 0 || m.eval_seeds == 0) {
            return fail("meta.seeds", "meta-optimization needs training and evaluation seeds".into());
        }
        if m.early_stop_factor <= 1.0 {
            return fail("meta.early_stop_factor", format!("must exceed 1, got {}", m.early_stop_factor));
        }
        let a = &m.adam;
        if !(a.step > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return fail("meta.adam", "need step > 0, betas in [0, 1) and eps > 0".into());
        }
        for (i, target) in m.optimize.iter().enumerate() {
            let allowed = match target {
                Target::Alpha | Target::Gamma | Target::InitScales => true,
                Target::Penalties => self.experiment == ExperimentId::PerParamReg,
                Target::Pixels => self.experiment == ExperimentId::LearnData,
                Target::Tying => self.experiment == ExperimentId::TiedReg,
            };
            if !allowed {
                return fail(
                    &format!("meta.optimize[{i}]"),
                    format!("{target:?} does not exist in a {} model", self.experiment),
                );
            }
        }
        let c = &self.chaos;
        if !(c.log_alpha_min.is_finite() && c.log_alpha_max.is_finite() && c.log_alpha_min < c.log_alpha_max) {
            return fail("chaos.log_alpha_max", "sweep bounds must be finite with min < max".into());
        }
        if c.points < 2 {
            return fail("chaos.points", "a sweep needs at least 2 points".into());
        }
        // TOML integers are signed 64-bit.
        let max = i64::MAX as u64;
        for (path, seed) in [
            ("dataset.seed", d.seed),
            ("meta.base_seed", m.base_seed),
            ("chaos.seed", c.seed),
            ("memory.seed", self.memory.seed),
        ] {
            if seed > max / 2 {
                return fail(path, format!("seed {seed} exceeds {}", max / 2));
            }
        }
        let mem = &self.memory;
        if mem.gammas.is_empty() {
            return fail("memory.gammas", "need at least one ratio".into());
        }
        if mem.steps == 0 || mem.elements == 0 {
            return fail("memory.steps", "steps and elements must be positive".into());
        }
        Ok(())
    }
}

/// Overlays `user` onto `base`, recursing into tables.
fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
