//! Experiment specification: a TOML file with an explicit `schema_version`,
//! optionally overridden by `key.path=value` pairs from the command line.

use std::path::{Path, PathBuf};

use debias_core::loss::LossKind;
use debias_core::rng::derive_seed;
use debias_core::simulation::SimulationSpec;
use debias_core::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::method::Method;

pub const SCHEMA_VERSION: u32 = 1;

const DATA_STAGE: u64 = 1;
const TRAIN_STAGE: u64 = 2;
const RATIO_STAGE: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub schema_version: u32,
    /// Root seed; every stage derives its own stream from it.
    #[serde(default)]
    pub seed: u64,
    /// Replicate ids. Each one seeds base-model init and batch order.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub trainer: TrainerSpec,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub baselines: BaselineSpec,
    #[serde(default)]
    pub eval: EvalSpec,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Simulation,
    Yahoo,
    Coat,
    /// A directory written by `debias prepare`.
    Bundle,
    /// Two `user item rating` files.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Dataset directory (yahoo, coat, bundle).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub biased: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unbiased: Option<PathBuf>,
    /// Drop negative training feedback (explicit sources only).
    #[serde(default)]
    pub implicit: bool,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_user_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_item_id: Option<u64>,
    #[serde(default)]
    pub simulation: SimulationSection,
}

fn default_split() -> [f64; 3] {
    [0.05, 0.05, 0.90]
}

/// Generator settings; unset fields keep the generator defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_users: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_items: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reserve: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_items: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub list_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_latent_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_latent_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_init_scale: Option<f64>,
}

impl SimulationSection {
    pub fn resolve(&self, split: [f64; 3], seed: u64) -> SimulationSpec {
        let d = SimulationSpec::default();
        SimulationSpec {
            n_users: self.n_users.unwrap_or(d.n_users),
            n_items: self.n_items.unwrap_or(d.n_items),
            reserve: self.reserve.unwrap_or(d.reserve),
            pool: self.pool.unwrap_or(d.pool),
            warm_items: self.warm_items.unwrap_or(d.warm_items),
            list_len: self.list_len.unwrap_or(d.list_len),
            latent_dim: self.latent_dim.unwrap_or(d.latent_dim),
            user_latent_mean: self.user_latent_mean.unwrap_or(DEFAULT_LATENT_MEAN[0]),
            item_latent_mean: self.item_latent_mean.unwrap_or(DEFAULT_LATENT_MEAN[1]),
            warm_epochs: self.warm_epochs.unwrap_or(d.warm_epochs),
            warm_lr: self.warm_lr.unwrap_or(d.warm_lr),
            warm_init_scale: self.warm_init_scale.unwrap_or(d.warm_init_scale),
            reserve_split: split,
            seed,
        }
    }
}

/// User and item latent means used by experiments unless overridden.
pub const DEFAULT_LATENT_MEAN: [f64; 2] = [0.4, -0.2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSpec {
    pub dim: usize,
    pub init_scale: f64,
    pub meta_lr: f64,
    pub train_batch: usize,
    pub pair_batch: usize,
    pub uniform_batch: usize,
    pub epochs: usize,
    pub loss: String,
}

impl Default for TrainerSpec {
    fn default() -> Self {
        TrainerSpec {
            dim: 10,
            init_scale: 0.1,
            meta_lr: 0.001,
            train_batch: 64,
            pair_batch: 64,
            uniform_batch: 64,
            epochs: 50,
            loss: "logistic".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub base_lr: Vec<f64>,
    pub weight_decay: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            base_lr: vec![1.0, 2.0, 4.0],
            weight_decay: vec![1e-3],
        }
    }
}

/// One point of the learning-rate by weight-decay grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub index: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
}

impl GridSpec {
    /// Row-major over (base_lr, weight_decay).
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::with_capacity(self.base_lr.len() * self.weight_decay.len());
        for &base_lr in &self.base_lr {
            for &weight_decay in &self.weight_decay {
                out.push(GridPoint {
                    index: out.len(),
                    base_lr,
                    weight_decay,
                });
            }
        }
        out
    }
}

/// Settings of the fixed-strategy baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSpec {
    /// Lower clamp of position propensities.
    pub position_floor: f64,
    /// Exponent of item-popularity propensities for the implicit IPS variant.
    pub popularity_power: f64,
    pub popularity_floor: f64,
    /// Imputation weight λ; `None` means `|D_T| / (|U||I|)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub imputation_lambda: Option<f64>,
    /// Exposure weight `a` of negative weighting, times `|U||I|`.
    pub negative_weight: f64,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        BaselineSpec {
            position_floor: 0.01,
            popularity_power: 0.5,
            popularity_floor: 0.01,
            imputation_lambda: None,
            negative_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// NDCG cutoffs reported in tables.
    pub ks: Vec<usize>,
    /// Cutoff of the validation NDCG that selects epochs and grid points.
    pub select_k: usize,
    /// Share of items counted as popular in the slice report.
    pub popular_fraction: f64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            ks: vec![5],
            select_k: 5,
            popular_fraction: 0.2,
        }
    }
}

impl ExperimentSpec {
    /// A simulation experiment over `methods` with every other field at its default.
    pub fn simulation(methods: Vec<Method>) -> Self {
        ExperimentSpec {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            seeds: default_seeds(),
            methods,
            output: None,
            dataset: DatasetSpec {
                kind: DatasetKind::Simulation,
                path: None,
                biased: None,
                unbiased: None,
                implicit: false,
                split: default_split(),
                max_user_id: None,
                max_item_id: None,
                simulation: SimulationSection::default(),
            },
            trainer: TrainerSpec::default(),
            grid: GridSpec::default(),
            baselines: BaselineSpec::default(),
            eval: EvalSpec::default(),
        }
    }

    /// Parses a spec from TOML text, applying `overrides` (`a.b=value`) first.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let spec: ExperimentSpec = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes to TOML")
    }

    /// Structural checks that need no data.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seed list is empty"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("method list is empty"));
        }
        let g = &self.grid;
        if g.base_lr.is_empty() || g.weight_decay.is_empty() {
            return Err(Error::config(
                "grid needs at least one learning rate and one weight decay",
            ));
        }
        if g.base_lr.iter().any(|v| v.is_nan() || *v <= 0.0) || g.weight_decay.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::config(
                "grid learning rates must be positive and weight decays nonnegative",
            ));
        }
        if self.eval.ks.contains(&0) || self.eval.select_k == 0 {
            return Err(Error::config("NDCG cutoffs must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.eval.popular_fraction) {
            return Err(Error::config("popular_fraction must lie in [0, 1]"));
        }
        LossKind::parse(&self.trainer.loss)
            .ok_or_else(|| Error::config(format!("unknown loss {:?}", self.trainer.loss)))?;
        let needs = |what: &str, v: &Option<PathBuf>| {
            v.as_ref()
                .map(|_| ())
                .ok_or_else(|| Error::config(format!("dataset kind {:?} needs `{what}`", self.dataset.kind)))
        };
        match self.dataset.kind {
            DatasetKind::Yahoo | DatasetKind::Coat | DatasetKind::Bundle => needs("path", &self.dataset.path)?,
            DatasetKind::Explicit => {
                needs("biased", &self.dataset.biased)?;
                needs("unbiased", &self.dataset.unbiased)?;
            }
            DatasetKind::Simulation => {}
        }
        if self.dataset.implicit && matches!(self.dataset.kind, DatasetKind::Simulation | DatasetKind::Bundle) {
            return Err(Error::config("`implicit` applies to explicit rating sources only"));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossKind {
        LossKind::parse(&self.trainer.loss).expect("validated")
    }

    pub fn dataset_seed(&self) -> u64 {
        derive_seed(self.seed, DATA_STAGE)
    }

    pub fn ratio_seed(&self) -> u64 {
        derive_seed(self.seed, RATIO_STAGE)
    }

    /// Trainer settings of one replicate at one grid point.
    pub fn trainer_config(&self, replicate: u64, point: &GridPoint) -> TrainerConfig {
        let t = &self.trainer;
        TrainerConfig {
            dim: t.dim,
            init_scale: t.init_scale,
            base_lr: point.base_lr,
            meta_lr: t.meta_lr,
            weight_decay: point.weight_decay,
            train_batch: t.train_batch,
            pair_batch: t.pair_batch,
            uniform_batch: t.uniform_batch,
            epochs: t.epochs,
            seed: derive_seed(derive_seed(self.seed, TRAIN_STAGE), replicate),
            loss: self.loss(),
            eval_k: self.eval.select_k,
        }
    }

    /// NDCG cutoffs to report, always including the selection cutoff.
    pub fn report_ks(&self) -> Vec<usize> {
        let mut ks = self.eval.ks.clone();
        ks.push(self.eval.select_k);
        ks.sort_unstable();
        ks.dedup();
        ks
    }
}

/// Sets `path = value` in `table`. `value` is parsed as a TOML value and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key {key:?} is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override path {key:?} crosses a non-table value")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
