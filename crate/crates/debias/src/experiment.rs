//! Grid search over replicates, best-on-validation selection, and the files
//! a run directory holds.

use std::collections::BTreeMap;
use std::path::Path;

use debias_core::data::DatasetBundle;
use debias_core::metrics::{evaluate, popularity_slices, positive_frequency, spearman, MetricsReport};
use debias_core::simulation::generate_simulation;
use debias_core::trainer::TrainOutcome;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DatasetKind, ExperimentSpec, GridPoint};
use crate::error::{Error, Result};
use crate::io::{self, LoadOptions, MetaCheckpoint, ModelCheckpoint};
use crate::method::{train_method, Method};
use crate::table::{Stat, Table};

/// Builds or loads the dataset an experiment runs on.
pub fn load_dataset(spec: &ExperimentSpec) -> Result<DatasetBundle> {
    Ok(load_dataset_with_truth(spec)?.0)
}

/// The dataset plus, for simulations, the row-major ground-truth scores.
pub fn load_dataset_with_truth(spec: &ExperimentSpec) -> Result<(DatasetBundle, Option<Vec<f64>>)> {
    let d = &spec.dataset;
    let mut truth = None;
    let opts = LoadOptions {
        split: d.split,
        seed: spec.dataset_seed(),
        max_user_id: d.max_user_id,
        max_item_id: d.max_item_id,
        implicit: d.implicit,
    };
    let path = || d.path.as_deref().ok_or_else(|| Error::config("dataset path missing"));
    let bundle = match d.kind {
        DatasetKind::Simulation => {
            let sim = d.simulation.resolve(d.split, spec.dataset_seed());
            sim.validate()?;
            let sim = generate_simulation(&sim)?;
            truth = Some(sim.truth);
            sim.bundle
        }
        DatasetKind::Yahoo => io::load_yahoo(path()?, &opts)?,
        DatasetKind::Coat => io::load_coat(path()?, &opts)?,
        DatasetKind::Explicit => {
            let (b, u) = (d.biased.as_deref(), d.unbiased.as_deref());
            io::load_explicit(
                b.ok_or_else(|| Error::config("biased path missing"))?,
                u.ok_or_else(|| Error::config("unbiased path missing"))?,
                &opts,
            )?
        }
        DatasetKind::Bundle => io::read_bundle(path()?)?,
    };
    log::info!(
        "dataset: {} users, {} items, {} feedback, train {} / uniform {} / validation {} / test {}",
        bundle.n_users,
        bundle.n_items,
        bundle.feedback_kind.as_str(),
        bundle.train.len(),
        bundle.uniform.len(),
        bundle.validation.len(),
        bundle.test.len()
    );
    Ok((bundle, truth))
}

/// Fails on the first method the bundle cannot serve.
pub fn check_methods(methods: &[Method], bundle: &DatasetBundle) -> Result<()> {
    methods.iter().try_for_each(|m| m.check_bundle(bundle))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Diverged,
}

/// One trained grid point of one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub method: Method,
    pub replicate: u64,
    pub point: GridPoint,
    pub status: RunStatus,
    pub best_epoch: usize,
    /// Validation NDCG at the selected epoch.
    pub validation_ndcg: f64,
    pub test: MetricsReport,
}

impl RunResult {
    fn selection_score(&self) -> f64 {
        match self.status {
            RunStatus::Ok if !self.validation_ndcg.is_nan() => self.validation_ndcg,
            _ => f64::NEG_INFINITY,
        }
    }

    /// Values of the table columns `nll, auc, ndcg@k...`.
    pub fn metric_values(&self, ks: &[usize]) -> Vec<f64> {
        let mut v = vec![self.test.nll, self.test.auc];
        v.extend(ks.iter().map(|k| self.test.ndcg_at.get(k).copied().unwrap_or(f64::NAN)));
        v
    }
}

/// The selected grid point of one (method, replicate) with its trained parameters.
#[derive(Debug, Clone)]
pub struct Selected {
    pub result: RunResult,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub fingerprint: String,
    pub ks: Vec<usize>,
    pub methods: Vec<Method>,
    /// Every grid point, ordered by method, replicate, grid index.
    pub runs: Vec<RunResult>,
    /// Best grid point per (method, replicate), same order.
    pub selected: Vec<Selected>,
}

fn evaluate_outcome(
    spec: &ExperimentSpec,
    bundle: &DatasetBundle,
    outcome: &TrainOutcome,
    ks: &[usize],
) -> Result<MetricsReport> {
    let mut report = evaluate(&outcome.model, &bundle.test, ks)?;
    report.slices = popularity_slices(
        &outcome.model,
        bundle,
        spec.eval.popular_fraction,
        &[spec.eval.select_k],
    )?;
    Ok(report)
}

fn diverged_report() -> MetricsReport {
    MetricsReport {
        nll: f64::NAN,
        auc: f64::NAN,
        ndcg_at: BTreeMap::new(),
        slices: Vec::new(),
    }
}

fn run_point(
    spec: &ExperimentSpec,
    bundle: &DatasetBundle,
    method: Method,
    replicate: u64,
    point: &GridPoint,
    ks: &[usize],
) -> Result<(RunResult, Option<TrainOutcome>)> {
    let cfg = spec.trainer_config(replicate, point);
    match train_method(bundle, method, &cfg, &spec.baselines) {
        Ok(outcome) => {
            let test = evaluate_outcome(spec, bundle, &outcome, ks)?;
            let validation_ndcg = outcome
                .trace
                .get(outcome.best_epoch)
                .map_or(f64::NAN, |r| r.validation_ndcg);
            log::debug!(
                "{method} r{replicate} lr={} wd={}: val {validation_ndcg:.4} test ndcg {:?}",
                point.base_lr,
                point.weight_decay,
                test.ndcg_at
            );
            let result = RunResult {
                method,
                replicate,
                point: *point,
                status: RunStatus::Ok,
                best_epoch: outcome.best_epoch,
                validation_ndcg,
                test,
            };
            Ok((result, Some(outcome)))
        }
        Err(Error::Core(debias_core::Error::Diverged { epoch, detail })) => {
            log::warn!(
                "{method} r{replicate} lr={} wd={} diverged at epoch {epoch}: {detail}",
                point.base_lr,
                point.weight_decay
            );
            let result = RunResult {
                method,
                replicate,
                point: *point,
                status: RunStatus::Diverged,
                best_epoch: epoch,
                validation_ndcg: f64::NAN,
                test: diverged_report(),
            };
            Ok((result, None))
        }
        Err(e) => Err(e),
    }
}

type Candidate = (RunResult, Option<TrainOutcome>);

/// Higher validation score wins; ties go to the lower grid index.
fn better(a: Candidate, b: Candidate) -> Candidate {
    let (sa, sb) = (a.0.selection_score(), b.0.selection_score());
    if sb > sa || (sb == sa && b.0.point.index < a.0.point.index) {
        b
    } else {
        a
    }
}

/// Trains every method, replicate and grid point of `spec` on `bundle`.
pub fn run_experiment(spec: &ExperimentSpec, bundle: &DatasetBundle) -> Result<ExperimentResult> {
    spec.validate()?;
    check_methods(&spec.methods, bundle)?;
    let ks = spec.report_ks();
    let points = spec.grid.points();
    let tasks: Vec<(Method, u64)> = spec
        .methods
        .iter()
        .flat_map(|&m| spec.seeds.iter().map(move |&r| (m, r)))
        .collect();
    let per_task: Vec<(Vec<RunResult>, Selected)> = tasks
        .par_iter()
        .map(|&(method, replicate)| -> Result<(Vec<RunResult>, Selected)> {
            let (mut all, best) = points
                .par_iter()
                .map(|p| run_point(spec, bundle, method, replicate, p, &ks).map(|c| (vec![c.0.clone()], c)))
                .try_reduce_with(|(mut ra, ca), (rb, cb)| {
                    ra.extend(rb);
                    Ok((ra, better(ca, cb)))
                })
                .expect("grid is nonempty")?;
            all.sort_by_key(|r| r.point.index);
            let (result, outcome) = best;
            let outcome = outcome
                .ok_or_else(|| Error::config(format!("{method} replicate {replicate}: every grid point diverged")))?;
            log::info!(
                "{method} r{replicate}: selected lr={} wd={} (val {:.4}, epoch {})",
                result.point.base_lr,
                result.point.weight_decay,
                result.validation_ndcg,
                result.best_epoch
            );
            Ok((all, Selected { result, outcome }))
        })
        .collect::<Result<_>>()?;
    let mut runs = Vec::new();
    let mut selected = Vec::new();
    for (r, s) in per_task {
        runs.extend(r);
        selected.push(s);
    }
    Ok(ExperimentResult {
        fingerprint: io::fingerprint(bundle),
        ks,
        methods: spec.methods.clone(),
        runs,
        selected,
    })
}

impl ExperimentResult {
    pub fn columns(&self) -> Vec<String> {
        table_columns(&self.ks)
    }

    /// Mean ± std over replicates of the selected runs, one row per method.
    pub fn table(&self) -> Table {
        let rows = self
            .selected
            .iter()
            .map(|s| (s.result.method.as_str().to_string(), s.result.metric_values(&self.ks)))
            .collect::<Vec<_>>();
        Table::aggregate(self.columns(), &rows)
    }

    pub fn selected_for(&self, method: Method) -> impl Iterator<Item = &Selected> {
        self.selected.iter().filter(move |s| s.result.method == method)
    }

    /// Mean selection-cutoff NDCG of a method's selected runs.
    pub fn mean_ndcg(&self, method: Method, k: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .selected_for(method)
            .map(|s| s.result.test.ndcg_at.get(&k).copied().unwrap_or(f64::NAN))
            .collect();
        (!v.is_empty()).then(|| Stat::of(&v).mean)
    }

    pub fn ndcg_stat(&self, method: Method, k: usize) -> Option<Stat> {
        let v: Vec<f64> = self
            .selected_for(method)
            .map(|s| s.result.test.ndcg_at.get(&k).copied().unwrap_or(f64::NAN))
            .collect();
        (!v.is_empty()).then(|| Stat::of(&v))
    }
}

pub fn table_columns(ks: &[usize]) -> Vec<String> {
    let mut c = vec!["nll".to_string(), "auc".to_string()];
    c.extend(ks.iter().map(|k| format!("ndcg@{k}")));
    c
}

/// Learned debiasing parameters of one selected run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearnedSummary {
    pub method: String,
    pub replicate: u64,
    pub m_positive: f64,
    pub m_negative: f64,
    pub m_missing: f64,
    pub label_weight_positive: f64,
    pub label_weight_negative: f64,
    /// Spearman correlation of item weights with training frequency.
    pub item_weight_popularity: f64,
}

/// Training rows per item.
pub fn training_frequency(bundle: &DatasetBundle) -> Vec<usize> {
    let mut freq = vec![0; bundle.n_items];
    for x in &bundle.train {
        freq[x.item] += 1;
    }
    freq
}

pub fn learned_summary(bundle: &DatasetBundle, s: &Selected) -> LearnedSummary {
    let meta = &s.outcome.meta;
    let popularity: Vec<f64> = training_frequency(bundle).iter().map(|&c| c as f64).collect();
    let weights: Vec<f64> = (0..bundle.n_items).map(|i| meta.item_factor(i)).collect();
    LearnedSummary {
        method: s.result.method.as_str().into(),
        replicate: s.result.replicate,
        m_positive: meta.m(Some(1), true),
        m_negative: meta.m(Some(-1), true),
        m_missing: meta.m(None, false),
        label_weight_positive: meta.label_factor(1),
        label_weight_negative: meta.label_factor(-1),
        item_weight_popularity: spearman(&weights, &popularity).unwrap_or(f64::NAN),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemWeightRow {
    pub item: usize,
    pub raw_id: u64,
    pub frequency: usize,
    pub positive_frequency: usize,
    pub weight: f64,
}

/// Item weight against training and positive training frequency, for one
/// selected run.
pub fn item_weight_scatter(bundle: &DatasetBundle, s: &Selected) -> Vec<ItemWeightRow> {
    let freq = training_frequency(bundle);
    let pos = positive_frequency(bundle);
    (0..bundle.n_items)
        .map(|i| ItemWeightRow {
            item: i,
            raw_id: bundle.item_ids[i],
            frequency: freq[i],
            positive_frequency: pos[i],
            weight: s.outcome.meta.item_factor(i),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SliceRow {
    pub method: String,
    pub slice: String,
    pub n_items: usize,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
}

/// Popular / unpopular NDCG per method, mean ± std over replicates.
pub fn slice_rows(result: &ExperimentResult, k: usize) -> Vec<SliceRow> {
    let mut out = Vec::new();
    for &m in &result.methods {
        let mut by_slice: BTreeMap<(usize, String), (usize, Vec<f64>)> = BTreeMap::new();
        for s in result.selected_for(m) {
            for (pos, sl) in s.result.test.slices.iter().enumerate() {
                let e = by_slice
                    .entry((pos, sl.name.clone()))
                    .or_insert((sl.n_items, Vec::new()));
                e.1.push(sl.ndcg_at.get(&k).copied().unwrap_or(f64::NAN));
            }
        }
        for ((_, name), (n_items, v)) in by_slice {
            let st = Stat::of(&v);
            out.push(SliceRow {
                method: m.as_str().into(),
                slice: name,
                n_items,
                k,
                mean: st.mean,
                std: st.std,
            });
        }
    }
    out
}

fn run_header(ks: &[usize]) -> Vec<String> {
    let mut h: Vec<String> = [
        "method",
        "replicate",
        "grid_index",
        "base_lr",
        "weight_decay",
        "status",
        "best_epoch",
        "validation_ndcg",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(table_columns(ks));
    h
}

fn run_record(r: &RunResult, ks: &[usize]) -> Vec<String> {
    let mut v = vec![
        r.method.as_str().to_string(),
        r.replicate.to_string(),
        r.point.index.to_string(),
        r.point.base_lr.to_string(),
        r.point.weight_decay.to_string(),
        match r.status {
            RunStatus::Ok => "ok".into(),
            RunStatus::Diverged => "diverged".into(),
        },
        r.best_epoch.to_string(),
        r.validation_ndcg.to_string(),
    ];
    v.extend(r.metric_values(ks).iter().map(f64::to_string));
    v
}

fn write_runs(path: &Path, runs: &[&RunResult], ks: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(run_header(ks))?;
    for r in runs {
        w.write_record(run_record(r, ks))?;
    }
    w.flush().map_err(Error::io(path))
}

/// Metric columns and `(method, values)` rows.
pub type SelectedRows = (Vec<String>, Vec<(String, Vec<f64>)>);

/// Reads `selected.csv` back into per-method metric rows for [`Table::aggregate`].
pub fn read_selected(path: &Path) -> Result<SelectedRows> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let first_metric = header
        .iter()
        .position(|h| h == "nll")
        .ok_or_else(|| Error::format(path, "no nll column"))?;
    let columns: Vec<String> = header.iter().skip(first_metric).map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let values = rec
            .iter()
            .skip(first_metric)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::format(path, format!("{v:?} is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((rec[0].to_string(), values));
    }
    Ok((columns, rows))
}

#[derive(Debug, Serialize)]
struct Manifest {
    schema_version: u32,
    tool_version: &'static str,
    seed: u64,
    seeds: Vec<u64>,
    methods: Vec<String>,
    grid_points: usize,
    dataset_fingerprint: String,
    /// SHA-256 of every file written next to the manifest.
    files: BTreeMap<String, String>,
}

fn file_stem(s: &Selected) -> String {
    format!("{}_r{}", s.result.method, s.result.replicate)
}

/// Writes the resolved config, result tables, plot data, traces,
/// checkpoints and a manifest into `dir`.
pub fn write_run_dir(
    dir: &Path,
    spec: &ExperimentSpec,
    bundle: &DatasetBundle,
    result: &ExperimentResult,
) -> Result<()> {
    io::create_dir(dir)?;
    for sub in ["traces", "checkpoints"] {
        io::create_dir(&dir.join(sub))?;
    }
    let mut files = Vec::new();
    let mut put = |name: String| files.push(name);

    io::write_text(&dir.join("config.toml"), &spec.to_toml())?;
    put("config.toml".into());
    write_runs(
        &dir.join("runs.csv"),
        &result.runs.iter().collect::<Vec<_>>(),
        &result.ks,
    )?;
    put("runs.csv".into());
    write_runs(
        &dir.join("selected.csv"),
        &result.selected.iter().map(|s| &s.result).collect::<Vec<_>>(),
        &result.ks,
    )?;
    put("selected.csv".into());
    let table = result.table();
    io::write_text(&dir.join("table.csv"), &table.to_csv())?;
    io::write_text(&dir.join("table.md"), &table.to_markdown())?;
    io::write_csv(&dir.join("winners.csv"), &table.winner_rows())?;
    put("table.csv".into());
    put("table.md".into());
    put("winners.csv".into());
    io::write_csv(
        &dir.join("popularity_slices.csv"),
        &slice_rows(result, spec.eval.select_k),
    )?;
    put("popularity_slices.csv".into());

    let learned: Vec<LearnedSummary> = result
        .selected
        .iter()
        .filter(|s| s.result.method.variant().is_some())
        .map(|s| learned_summary(bundle, s))
        .collect();
    if !learned.is_empty() {
        io::write_csv(&dir.join("learned.csv"), &learned)?;
        put("learned.csv".into());
    }
    if let Some(s) = result.selected_for(Method::Autodebias).next() {
        io::write_csv(&dir.join("item_weights.csv"), &item_weight_scatter(bundle, s))?;
        put("item_weights.csv".into());
    }

    for s in &result.selected {
        let stem = file_stem(s);
        let seed = spec.trainer_config(s.result.replicate, &s.result.point).seed;
        let o = &s.outcome;
        let trace = format!("traces/{stem}.csv");
        io::write_trace(&dir.join(&trace), &o.trace)?;
        put(trace);
        let last = o.trace.len().saturating_sub(1);
        for (name, ckpt) in [
            (
                format!("checkpoints/{stem}.model.toml"),
                ModelCheckpoint::new(&o.model, seed, o.best_epoch),
            ),
            (
                format!("checkpoints/{stem}.final.model.toml"),
                ModelCheckpoint::new(&o.final_model, seed, last),
            ),
        ] {
            io::write_model_checkpoint(&dir.join(&name), &ckpt)?;
            put(name);
        }
        if s.result.method.variant().is_some() {
            for (name, ckpt) in [
                (
                    format!("checkpoints/{stem}.meta.toml"),
                    MetaCheckpoint::new(&o.meta, None, seed, o.best_epoch),
                ),
                (
                    format!("checkpoints/{stem}.final.meta.toml"),
                    MetaCheckpoint::new(&o.final_meta, o.optimizer.as_ref(), seed, last),
                ),
            ] {
                io::write_meta_checkpoint(&dir.join(&name), &ckpt)?;
                put(name);
            }
        }
    }

    let digests = files
        .iter()
        .map(|f| Ok((f.clone(), io::file_digest(&dir.join(f))?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let manifest = Manifest {
        schema_version: crate::config::SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION"),
        seed: spec.seed,
        seeds: spec.seeds.clone(),
        methods: spec.methods.iter().map(|m| m.as_str().to_string()).collect(),
        grid_points: spec.grid.points().len(),
        dataset_fingerprint: result.fingerprint.clone(),
        files: digests,
    };
    io::write_text(&dir.join("manifest.toml"), &io::to_toml(&manifest))
}

/// One point of the uniform-ratio curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioRow {
    pub ratio: f64,
    pub n_uniform: usize,
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

/// Reruns the experiment with a seeded `ratio` share of the uniform split
/// kept, for every ratio. Validation and test stay fixed.
pub fn uniform_ratio_sweep(spec: &ExperimentSpec, bundle: &DatasetBundle, ratios: &[f64]) -> Result<Vec<RatioRow>> {
    if ratios.is_empty() {
        return Err(Error::config("ratio list is empty"));
    }
    let mut out = Vec::new();
    for &ratio in ratios {
        let sub = bundle.with_uniform_fraction(ratio, spec.ratio_seed())?;
        log::info!("uniform ratio {ratio}: {} uniform rows", sub.uniform.len());
        let result = run_experiment(spec, &sub)?;
        let table = result.table();
        for row in &table.rows {
            for (c, st) in table.columns.iter().zip(&row.stats) {
                out.push(RatioRow {
                    ratio,
                    n_uniform: sub.uniform.len(),
                    method: row.method.clone(),
                    metric: c.clone(),
                    mean: st.mean,
                    std: st.std,
                });
            }
        }
    }
    Ok(out)
}
