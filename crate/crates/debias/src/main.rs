use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use debias::config::GridPoint;
use debias::experiment::{self, read_selected, uniform_ratio_sweep};
use debias::io::{self, MetaCheckpoint, ModelCheckpoint};
use debias::table::Table;
use debias::{load_dataset, run_experiment, train_method, write_run_dir, ExperimentSpec, Method};
use debias_core::metrics::{evaluate, popularity_slices};

/// Debiased recommendation experiments.
#[derive(Parser)]
#[command(name = "debias", version)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the dataset of a spec and write it as a bundle directory.
    Prepare {
        #[command(flatten)]
        spec: SpecArgs,
        /// Bundle directory to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method at one grid point and replicate.
    Train {
        #[command(flatten)]
        spec: SpecArgs,
        /// Defaults to the first method of the spec.
        #[arg(long)]
        method: Option<Method>,
        /// Defaults to the first seed of the spec.
        #[arg(long)]
        replicate: Option<u64>,
        /// Base learning rate; defaults to the first grid value.
        #[arg(long)]
        lr: Option<f64>,
        /// Weight decay; defaults to the first grid value.
        #[arg(long)]
        wd: Option<f64>,
        /// Directory for the config, trace and checkpoints.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model checkpoint on the test split of a dataset.
    Evaluate {
        #[command(flatten)]
        spec: SpecArgs,
        /// Model checkpoint written by `train` or `sweep`.
        #[arg(long)]
        model: PathBuf,
        /// NDCG cutoffs, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
        k: Vec<usize>,
    },
    /// Grid search over every method and replicate; optionally a uniform-ratio curve.
    Sweep {
        #[command(flatten)]
        spec: SpecArgs,
        /// Run directory; defaults to `output` in the spec.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Shares of the uniform split to keep, comma separated.
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<f64>,
    },
    /// MF against the three learned-debiasing variants, with learned parameters.
    Ablate {
        #[command(flatten)]
        spec: SpecArgs,
        /// Run directory; defaults to `output` in the spec.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render the result table of a run directory.
    Report {
        /// Run directory written by `sweep` or `ablate`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "markdown", value_parser = ["markdown", "csv"])]
        format: String,
    },
}

#[derive(Args)]
struct SpecArgs {
    /// Experiment spec (TOML). Without one, a simulation spec with defaults is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a spec value, e.g. `--set trainer.epochs=20` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

const DEFAULT_SPEC: &str = r#"
schema_version = 1
methods = ["mf_biased", "pos_ips", "autodebias"]
[dataset]
kind = "simulation"
"#;

impl SpecArgs {
    fn load(&self) -> anyhow::Result<ExperimentSpec> {
        Ok(match &self.config {
            Some(p) => ExperimentSpec::load(p, &self.overrides).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentSpec::parse(DEFAULT_SPEC, &self.overrides)?,
        })
    }
}

fn out_dir(flag: Option<PathBuf>, spec: &ExperimentSpec) -> anyhow::Result<PathBuf> {
    flag.or_else(|| spec.output.clone())
        .context("no output directory: pass --out or set `output` in the spec")
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match cli.command {
        Command::Prepare { spec, out } => {
            let spec = spec.load()?;
            let (bundle, truth) = experiment::load_dataset_with_truth(&spec)?;
            io::write_bundle(&out, &bundle)?;
            if let Some(truth) = truth {
                io::write_truth(&out.join(io::TRUTH_FILE), bundle.n_items, &truth)?;
            }
            println!("{} {}", out.display(), io::fingerprint(&bundle));
        }
        Command::Train {
            spec,
            method,
            replicate,
            lr,
            wd,
            out,
        } => {
            let spec = spec.load()?;
            let method = method.unwrap_or(spec.methods[0]);
            let replicate = replicate.unwrap_or(spec.seeds[0]);
            let first = spec.grid.points()[0];
            let point = GridPoint {
                index: 0,
                base_lr: lr.unwrap_or(first.base_lr),
                weight_decay: wd.unwrap_or(first.weight_decay),
            };
            let bundle = load_dataset(&spec)?;
            method.check_bundle(&bundle)?;
            let cfg = spec.trainer_config(replicate, &point);
            let outcome = train_method(&bundle, method, &cfg, &spec.baselines)?;
            io::create_dir(&out)?;
            let mut resolved = spec.clone();
            resolved.methods = vec![method];
            resolved.seeds = vec![replicate];
            resolved.grid.base_lr = vec![point.base_lr];
            resolved.grid.weight_decay = vec![point.weight_decay];
            io::write_text(&out.join("config.toml"), &resolved.to_toml())?;
            io::write_trace(&out.join("trace.csv"), &outcome.trace)?;
            io::write_model_checkpoint(
                &out.join("model.toml"),
                &ModelCheckpoint::new(&outcome.model, cfg.seed, outcome.best_epoch),
            )?;
            if method.variant().is_some() {
                let last = outcome.trace.len().saturating_sub(1);
                io::write_meta_checkpoint(
                    &out.join("meta.toml"),
                    &MetaCheckpoint::new(&outcome.final_meta, outcome.optimizer.as_ref(), cfg.seed, last),
                )?;
            }
            let report = evaluate(&outcome.model, &bundle.test, &spec.report_ks())?;
            let ndcg: Vec<String> = report.ndcg_at.iter().map(|(k, v)| format!("ndcg@{k} {v:.4}")).collect();
            println!(
                "{method}: best epoch {} nll {:.4} auc {:.4} {}",
                outcome.best_epoch,
                report.nll,
                report.auc,
                ndcg.join(" ")
            );
        }
        Command::Evaluate { spec, model, k } => {
            let spec = spec.load()?;
            let bundle = load_dataset(&spec)?;
            let model = io::read_model_checkpoint(&model)?.model()?;
            if (model.n_users(), model.n_items()) != (bundle.n_users, bundle.n_items) {
                bail!(
                    "checkpoint is {}x{}, dataset is {}x{}",
                    model.n_users(),
                    model.n_items(),
                    bundle.n_users,
                    bundle.n_items
                );
            }
            let report = evaluate(&model, &bundle.test, &k)?;
            println!("nll = {}\nauc = {}", report.nll, report.auc);
            for (k, v) in &report.ndcg_at {
                println!("ndcg@{k} = {v}");
            }
            for s in popularity_slices(&model, &bundle, spec.eval.popular_fraction, &k)? {
                for (k, v) in &s.ndcg_at {
                    println!("{}_ndcg@{k} = {v}", s.name);
                }
            }
        }
        Command::Sweep { spec, out, ratios } => {
            let spec = spec.load()?;
            let dir = out_dir(out, &spec)?;
            let bundle = load_dataset(&spec)?;
            experiment::check_methods(&spec.methods, &bundle)?;
            let result = run_experiment(&spec, &bundle)?;
            write_run_dir(&dir, &spec, &bundle, &result)?;
            print!("{}", result.table().to_markdown());
            if !ratios.is_empty() {
                let curve = uniform_ratio_sweep(&spec, &bundle, &ratios)?;
                io::write_csv(&dir.join("uniform_ratio.csv"), &curve)?;
            }
        }
        Command::Ablate { spec, out } => {
            let mut spec = spec.load()?;
            spec.methods = vec![
                Method::MfBiased,
                Method::AutodebiasW1,
                Method::AutodebiasW1m,
                Method::Autodebias,
            ];
            let dir = out_dir(out, &spec)?;
            let bundle = load_dataset(&spec)?;
            let result = run_experiment(&spec, &bundle)?;
            write_run_dir(&dir, &spec, &bundle, &result)?;
            print!("{}", result.table().to_markdown());
            for s in result.selected.iter().filter(|s| s.result.method.variant().is_some()) {
                let l = experiment::learned_summary(&bundle, s);
                println!(
                    "{} r{}: m(+) {:.3} m(-) {:.3} m(missing) {:.3} w(+) {:.3} w(-) {:.3} item-weight/popularity {:.3}",
                    l.method,
                    l.replicate,
                    l.m_positive,
                    l.m_negative,
                    l.m_missing,
                    l.label_weight_positive,
                    l.label_weight_negative,
                    l.item_weight_popularity
                );
            }
        }
        Command::Report { run, format } => {
            let (columns, rows) = read_selected(&run.join("selected.csv"))?;
            let table = Table::aggregate(columns, &rows);
            match format.as_str() {
                "csv" => print!("{}", table.to_csv()),
                _ => print!("{}", table.to_markdown()),
            }
        }
    }
    Ok(())
}
