//! The four subcommands: dataset generation, per-seed training, evaluation
//! with whiteness diagnostics, and multi-run report merging. Every number a
//! table shows is first written to a JSON artifact on disk.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crosscast_core::data::{
    gpvar_generate, load_csv, load_manifest, make_windows, save_csv, save_manifest,
    split_sequential, DatasetManifest, GpvarConfig, Scaler, TimeSeriesCollection, Windows,
};
use crosscast_core::eval::{compute_residuals, point_metrics, whiteness_test, AzMode};
use crosscast_core::graph::community_graph;
use crosscast_core::model::{
    build_model, load_checkpoint, save_checkpoint, ForecastModel, GraphSpec,
};
use crosscast_core::train::{forecast_windows, save_history, train, ForecastStack};

use crate::config::{first_line, DatasetKind, ExperimentConfig, LearnedGraphChoice};
use crate::CliError;

const AZ_LEVEL: f64 = 0.05;

pub struct Target {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub force: bool,
}

impl Target {
    /// Resolves flag overrides against the config file.
    pub fn new(
        config: ExperimentConfig,
        out_flag: Option<PathBuf>,
        seed_flag: Option<Vec<u64>>,
        force: bool,
    ) -> Result<Self, CliError> {
        let out = out_flag
            .or_else(|| config.output_dir.clone())
            .ok_or_else(|| CliError::Config {
                detail: "no output directory: set output_dir in the config or pass --out".into(),
            })?;
        let seeds = match seed_flag {
            Some(s) if s.is_empty() => {
                return Err(CliError::Config { detail: "--seed list is empty".into() })
            }
            Some(s) => s,
            None => config.seeds.clone(),
        };
        Ok(Target { config, out, seeds, force })
    }

    fn dataset_dir(&self) -> PathBuf {
        self.out.join("dataset")
    }

    fn run_dir(&self, seed: u64) -> PathBuf {
        self.out.join("runs").join(format!("seed{seed}"))
    }
}

fn synthetic_config(t: &Target) -> Result<GpvarConfig, CliError> {
    let d = &t.config.dataset;
    let graph = community_graph(d.nodes, d.communities, d.intra_p, d.seed)?;
    let mut cfg = match d.kind {
        DatasetKind::Gpvar => GpvarConfig::gpvar(graph, d.len, d.seed),
        DatasetKind::GpvarL => GpvarConfig::gpvar_l(graph, d.len, d.seed),
        DatasetKind::Csv => {
            return Err(CliError::Config {
                detail: "generate requires a synthetic dataset kind (gpvar or gpvar_l)".into(),
            })
        }
    };
    cfg.sigma = d.sigma;
    cfg.burn_in = d.burn_in;
    Ok(cfg)
}

pub fn cmd_generate(t: &Target) -> Result<(), CliError> {
    let cfg = synthetic_config(t)?;
    let data = gpvar_generate(&cfg)?;
    let dir = t.dataset_dir();
    std::fs::create_dir_all(&dir)?;
    save_csv(
        &data,
        &dir.join("values.csv"),
        Some(&dir.join("mask.csv")),
        Some(&dir.join("edges.csv")),
    )?;
    let d = &t.config.dataset;
    let manifest = DatasetManifest {
        window: d.window,
        horizon: d.horizon,
        fractions: d.fractions,
        seed: d.seed,
        len: data.len(),
        n_nodes: data.n_nodes(),
        d_x: data.d_x(),
        scaler: None,
    };
    save_manifest(&manifest, &dir.join("manifest.toml"))?;
    println!(
        "generated {} dataset: {} steps, {} nodes, {} edges -> {}",
        d.kind,
        data.len(),
        data.n_nodes(),
        data.graph.as_ref().map_or(0, |g| g.edges().len()),
        dir.display()
    );
    Ok(())
}

/// The prepared dataset plus the scaler used on it, when any.
pub struct Prepared {
    pub data: TimeSeriesCollection,
    pub scaler: Option<Scaler>,
}

/// Loads the dataset the config points at: generated files under the output
/// directory for synthetic kinds, the referenced CSVs otherwise.
pub fn load_dataset(t: &Target) -> Result<Prepared, CliError> {
    let d = &t.config.dataset;
    match d.kind {
        DatasetKind::Csv => {
            let values = d.values.as_ref().expect("validated");
            let mut data = load_csv(values, d.mask.as_deref(), d.edges.as_deref())?;
            let mut scaler = None;
            if d.normalize {
                let t_end =
                    ((d.fractions[0] * data.len() as f64) + 1e-9).floor() as usize;
                let s = Scaler::fit(&data.x, &data.mask, t_end)?;
                s.transform(&mut data.x, Some(&data.mask))?;
                scaler = Some(s);
            }
            Ok(Prepared { data, scaler })
        }
        DatasetKind::Gpvar | DatasetKind::GpvarL => {
            let dir = t.dataset_dir();
            let values = dir.join("values.csv");
            if !values.exists() {
                return Err(CliError::MissingArtifact {
                    path: values,
                    hint: "run `generate` first",
                });
            }
            let manifest = load_manifest(&dir.join("manifest.toml"))?;
            let expect = (d.window, d.horizon, d.fractions, d.seed, d.len, d.nodes);
            let found = (
                manifest.window,
                manifest.horizon,
                manifest.fractions,
                manifest.seed,
                manifest.len,
                manifest.n_nodes,
            );
            if expect != found {
                return Err(CliError::Config {
                    detail: format!(
                        "dataset on disk was generated with different settings \
                         (found {found:?}, config says {expect:?}); rerun `generate`"
                    ),
                });
            }
            let data =
                load_csv(&values, Some(&dir.join("mask.csv")), Some(&dir.join("edges.csv")))?;
            Ok(Prepared { data, scaler: None })
        }
    }
}

fn graph_spec(t: &Target, data: &TimeSeriesCollection) -> Result<GraphSpec, CliError> {
    let m = &t.config.model;
    match m.learned_graph {
        LearnedGraphChoice::Dense => Ok(GraphSpec::LearnedDense),
        LearnedGraphChoice::Factorized => Ok(GraphSpec::LearnedFactorized { d_z: m.d_z }),
        LearnedGraphChoice::None => {
            if m.family.uses_graph() {
                let g = data.graph.clone().ok_or_else(|| CliError::Config {
                    detail: format!(
                        "family {} needs a graph but the dataset has no edges",
                        m.family
                    ),
                })?;
                Ok(GraphSpec::Fixed(g))
            } else {
                Ok(GraphSpec::None)
            }
        }
    }
}

fn build_for_seed(
    t: &Target,
    data: &TimeSeriesCollection,
    seed: u64,
) -> Result<ForecastModel, CliError> {
    let d = &t.config.dataset;
    let mc = t.config.model.to_model_config(d.window, d.horizon);
    let spec = graph_spec(t, data)?;
    Ok(build_model(&mc, data.n_nodes(), data.d_x(), data.d_u(), spec, seed)?)
}

fn splits(t: &Target, data: &TimeSeriesCollection) -> Result<(Windows, Windows, Windows), CliError> {
    let d = &t.config.dataset;
    let wins = make_windows(data, d.window, d.horizon)?;
    let f = d.fractions;
    Ok(split_sequential(&wins, (f[0], f[1], f[2]))?)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub label: String,
    pub best_val_mae: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub param_count: usize,
    pub train_seconds: f64,
}

pub fn cmd_train(t: &Target) -> Result<(), CliError> {
    let prepared = load_dataset(t)?;
    let (tr, va, _) = splits(t, &prepared.data)?;
    for &seed in &t.seeds {
        let run_dir = t.run_dir(seed);
        let manifest_path = run_dir.join("run.json");
        if manifest_path.exists() && !t.force {
            return Err(CliError::RunExists { path: run_dir });
        }
        std::fs::create_dir_all(&run_dir)?;
        let mut model = build_for_seed(t, &prepared.data, seed)?;
        let cfg = t.config.training.to_train_config(seed);
        let started = Instant::now();
        let outcome = train(&mut model, &prepared.data, &tr, &va, &cfg)?;
        let seconds = started.elapsed().as_secs_f64();
        save_checkpoint(&model, &run_dir)?;
        save_history(&outcome.history, &run_dir.join("history.jsonl"))?;
        let manifest = RunManifest {
            seed,
            label: t.config.model.label(),
            best_val_mae: outcome.best_val_mae,
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.history.len(),
            stopped_early: outcome.stopped_early,
            param_count: model.param_count(),
            train_seconds: seconds,
        };
        std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
        println!(
            "seed {seed}: best val MAE {:.4} at epoch {} ({} epochs, {:.1}s)",
            manifest.best_val_mae, manifest.best_epoch, manifest.epochs_run, seconds
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub mae: f64,
    pub c_time: Option<f64>,
    pub c_st: Option<f64>,
    pub c_space: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    fn over(values: &[f64]) -> Aggregate {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Aggregate { mean, std: var.sqrt() }
    }

    fn maybe(values: &[Option<f64>]) -> Option<Aggregate> {
        let collected: Option<Vec<f64>> = values.iter().copied().collect();
        collected.map(|v| Aggregate::over(&v))
    }

    fn cell(agg: &Option<Aggregate>, decimals: usize) -> String {
        match agg {
            Some(a) => format!("{:.*} ± {:.*}", decimals, a.mean, decimals, a.std),
            None => "n/a".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub label: String,
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub mae: Aggregate,
    pub c_time: Option<Aggregate>,
    pub c_st: Option<Aggregate>,
    pub c_space: Option<Aggregate>,
    pub optimal_mae: Option<f64>,
    pub per_seed: Vec<SeedRow>,
}

fn evaluate_stack(
    stack: &ForecastStack,
    scaler: Option<&Scaler>,
    graph: Option<&crosscast_core::Graph>,
) -> Result<(crosscast_core::eval::MetricReport, Vec<crosscast_core::eval::WhitenessReport>), CliError>
{
    let mut preds = stack.preds.clone();
    let mut targets = stack.targets.clone();
    if let Some(s) = scaler {
        s.inverse(&mut preds, None)?;
        s.inverse(&mut targets, None)?;
    }
    let rs = compute_residuals(&preds, &targets, &stack.mask, graph.cloned())?;
    let point = point_metrics(&rs, &targets)?;
    let mut whiteness = vec![whiteness_test(&rs, AzMode::Time, AZ_LEVEL)?];
    if graph.is_some() {
        whiteness.push(whiteness_test(&rs, AzMode::Spacetime, AZ_LEVEL)?);
        whiteness.push(whiteness_test(&rs, AzMode::Space, AZ_LEVEL)?);
    }
    Ok((point, whiteness))
}

#[derive(Debug, Serialize)]
struct SeedMetricsFile<'a> {
    seed: u64,
    point: &'a crosscast_core::eval::MetricReport,
    whiteness: &'a [crosscast_core::eval::WhitenessReport],
}

pub fn cmd_evaluate(t: &Target) -> Result<(), CliError> {
    let prepared = load_dataset(t)?;
    let (_, _, te) = splits(t, &prepared.data)?;
    let batch = t.config.training.batch_size;
    let mut rows = Vec::new();
    for &seed in &t.seeds {
        let run_dir = t.run_dir(seed);
        if !run_dir.join("params.bin").exists() {
            return Err(CliError::MissingArtifact {
                path: run_dir.join("params.bin"),
                hint: "run `train` first",
            });
        }
        let mut model = build_for_seed(t, &prepared.data, seed)?;
        load_checkpoint(&mut model, &run_dir)?;
        let stack = forecast_windows(&model, &prepared.data, &te, batch)?;
        let (point, whiteness) =
            evaluate_stack(&stack, prepared.scaler.as_ref(), prepared.data.graph.as_ref())?;
        let file = SeedMetricsFile { seed, point: &point, whiteness: &whiteness };
        std::fs::write(run_dir.join("metrics.json"), serde_json::to_string_pretty(&file)?)?;
        let find = |m: AzMode| whiteness.iter().find(|w| w.mode == m).map(|w| w.c);
        rows.push(SeedRow {
            seed,
            mae: point.mae,
            c_time: find(AzMode::Time),
            c_st: find(AzMode::Spacetime),
            c_space: find(AzMode::Space),
        });
    }

    let d = &t.config.dataset;
    let optimal_mae = d
        .kind
        .is_synthetic()
        .then(|| d.sigma * (2.0 / std::f64::consts::PI).sqrt());
    let summary = EvaluationSummary {
        label: t.config.model.label(),
        dataset: d.kind.to_string(),
        seeds: t.seeds.clone(),
        mae: Aggregate::over(&rows.iter().map(|r| r.mae).collect::<Vec<_>>()),
        c_time: Aggregate::maybe(&rows.iter().map(|r| r.c_time).collect::<Vec<_>>()),
        c_st: Aggregate::maybe(&rows.iter().map(|r| r.c_st).collect::<Vec<_>>()),
        c_space: Aggregate::maybe(&rows.iter().map(|r| r.c_space).collect::<Vec<_>>()),
        optimal_mae,
        per_seed: rows,
    };
    std::fs::write(t.out.join("evaluation.json"), serde_json::to_string_pretty(&summary)?)?;
    let table = summary_table(std::slice::from_ref(&summary));
    std::fs::write(t.out.join("evaluation.md"), &table)?;
    print!("{table}");
    Ok(())
}

/// Markdown comparison table, one row per summary, sorted by MAE ascending.
pub fn summary_table(summaries: &[EvaluationSummary]) -> String {
    let mut order: Vec<&EvaluationSummary> = summaries.iter().collect();
    order.sort_by(|a, b| a.mae.mean.total_cmp(&b.mae.mean));
    let mut s = String::new();
    s.push_str("| Model | MAE | Time | T+S | Space |\n");
    s.push_str("|---|---|---|---|---|\n");
    for row in &order {
        s.push_str(&format!(
            "| {} | {:.4} ± {:.4} | {} | {} | {} |\n",
            row.label,
            row.mae.mean,
            row.mae.std,
            Aggregate::cell(&row.c_time, 1),
            Aggregate::cell(&row.c_st, 1),
            Aggregate::cell(&row.c_space, 1),
        ));
    }
    if let Some(opt) = order.iter().filter_map(|r| r.optimal_mae).next() {
        s.push_str(&format!("| Optimal model | {opt:.4} | n/a | n/a | n/a |\n"));
    }
    s
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    runs: &'a [EvaluationSummary],
}

pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut summaries = Vec::new();
    for dir in run_dirs {
        let path = dir.join("evaluation.json");
        let text = std::fs::read_to_string(&path).map_err(|_| CliError::MissingArtifact {
            path: path.clone(),
            hint: "run `evaluate` first",
        })?;
        let summary: EvaluationSummary =
            serde_json::from_str(&text).map_err(|e| CliError::Corrupted {
                path: path.clone(),
                detail: first_line(&e.to_string()),
            })?;
        summaries.push(summary);
    }
    summaries.sort_by(|a, b| a.mae.mean.total_cmp(&b.mae.mean));
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&Report { runs: &summaries })?,
    )?;
    let table = summary_table(&summaries);
    std::fs::write(out.join("report.md"), &table)?;
    print!("{table}");
    Ok(())
}
