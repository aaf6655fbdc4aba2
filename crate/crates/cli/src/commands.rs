//! Subcommand definitions and their implementations.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crimesim_core::env::{load_city, parse_timestamp, CrimeDistribution, Period};
use crimesim_core::gateway::{Gateway, GatewayConfig};
use crimesim_core::metrics::{evaluate, write_cell_comparison, Baselines};
use crimesim_core::perception::{
    aggregate_annotations, aggregate_by_cell, align_prompt, apply_perception, read_image_scores, AlignConfig, AnnotationSet,
    FallbackSummarizer, FixtureScorer, GatewayOptimizer, GatewayScorer, PromptOptimizer, SafetyScorer, ScriptedOptimizer,
    PERCEIVED_SCORE_PROMPT,
};
use crimesim_core::simulation::{run_in, write_run_dir, RunConfig, SimError};

use crate::error::CliError;
use crate::heatmap::feature_collection;
use crate::inputs::{load_city_arg, load_distribution, parse_ks};
use crate::service::{self, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "crimesim", version, about = "Agent-based urban crime simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a city bundle from a features table, optionally with boundaries,
    /// street-view safety scores and crime records.
    Ingest(IngestArgs),
    /// Run a simulation from a config file and write its artifacts.
    Simulate(SimulateArgs),
    /// Compare a real and a simulated distribution.
    Evaluate(EvaluateArgs),
    /// Align the safety-scoring prompt with human annotations.
    Align(AlignArgs),
    /// Export a distribution as a GeoJSON choropleth.
    Heatmap(HeatmapArgs),
    /// Start the HTTP run service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Per-cell features CSV.
    #[arg(long)]
    pub features: PathBuf,
    /// GeoJSON FeatureCollection of cell boundaries.
    #[arg(long)]
    pub boundaries: Option<PathBuf>,
    /// Per-image safety scores CSV; cell means replace the feature table's
    /// safety scores and descriptions.
    #[arg(long)]
    pub image_scores: Option<PathBuf>,
    /// Crime records CSV to aggregate into a per-cell distribution.
    #[arg(long, requires = "distribution_out")]
    pub crimes: Option<PathBuf>,
    /// Inclusive period start for crime records (ISO-8601).
    #[arg(long)]
    pub start: Option<String>,
    /// Inclusive period end for crime records (ISO-8601).
    #[arg(long)]
    pub end: Option<String>,
    /// Where to write the aggregated crime distribution.
    #[arg(long)]
    pub distribution_out: Option<PathBuf>,
    /// City bundle output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Run config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for the run artifacts.
    #[arg(long)]
    pub out: PathBuf,
    /// City override: bundle, features CSV or synthetic:ROWSxCOLS[:SEED].
    #[arg(long)]
    pub city: Option<String>,
    /// Seed override.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Real distribution file. Crime-record CSVs need --city to assign cells.
    #[arg(long)]
    pub real: PathBuf,
    /// Simulated distribution, usually a run's summary.json.
    #[arg(long)]
    pub sim: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub alpha: f64,
    /// Comma-separated K values for HR@K.
    #[arg(long, default_value = "1.0,1.5,2.0")]
    pub k: String,
    /// City used to assign crime records to cells.
    #[arg(long)]
    pub city: Option<String>,
    /// Real baseline period, enabling new-hotspot concordance.
    #[arg(long, requires = "sim_base")]
    pub real_base: Option<PathBuf>,
    /// Simulated baseline run.
    #[arg(long, requires = "real_base")]
    pub sim_base: Option<PathBuf>,
    /// Report output path.
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
    /// Optional per-cell comparison CSV.
    #[arg(long)]
    pub cells_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// Annotator ratings CSV (image_id, annotator_id, score).
    #[arg(long)]
    pub ratings: PathBuf,
    /// Optional triplet rankings CSV.
    #[arg(long)]
    pub triplets: Option<PathBuf>,
    /// Initial prompt text file; defaults to the built-in scoring prompt.
    #[arg(long)]
    pub prompt: Option<PathBuf>,
    /// Offline scores: JSON object prompt -> image_id -> score.
    #[arg(long, requires = "proposals", conflicts_with = "gateway")]
    pub fixture_scores: Option<PathBuf>,
    /// Offline optimizer proposals: JSON array of prompts.
    #[arg(long, requires = "fixture_scores")]
    pub proposals: Option<PathBuf>,
    /// Gateway config JSON for live scoring and optimization.
    #[arg(long)]
    pub gateway: Option<PathBuf>,
    #[arg(long, default_value = "qwen2.5-vl-72b-instruct")]
    pub model: String,
    /// URL pattern for images; `{image_id}` is replaced.
    #[arg(long, default_value = "file://images/{image_id}.jpg")]
    pub image_url: String,
    #[arg(long, default_value_t = 10)]
    pub max_iters: u32,
    #[arg(long, default_value_t = 3)]
    pub patience: u32,
    /// Stop once the train correlation reaches this value.
    #[arg(long)]
    pub target: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "alignment.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    /// Distribution to export (summary.json, distribution JSON or counts CSV).
    #[arg(long)]
    pub dist: PathBuf,
    /// City providing cell geometry.
    #[arg(long)]
    pub city: String,
    #[arg(long, default_value = "heatmap.geojson")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// City bundle, features CSV or synthetic:ROWSxCOLS[:SEED].
    #[arg(long)]
    pub city: String,
    /// Directory for run artifacts and stored scenarios.
    #[arg(long, default_value = "crimesim-data")]
    pub data_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Concurrent simulation workers.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Real distribution made available to `/metrics`, as NAME=PATH. Repeatable.
    #[arg(long = "real", value_parser = parse_named_path)]
    pub real: Vec<(String, PathBuf)>,
}

fn parse_named_path(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected NAME=PATH, got `{s}`"))?;
    if name.is_empty() {
        return Err("distribution name is empty".into());
    }
    Ok((name.to_owned(), PathBuf::from(path)))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Simulate(a) => simulate(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Align(a) => align(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Serve(a) => serve(a),
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::runtime(format!("{}: {e}", parent.display())))?;
    }
    let file = File::create(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(CliError::runtime)
        .and_then(|_| w.write_all(b"\n").and_then(|_| w.flush()).map_err(CliError::runtime))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn timestamp_arg(s: &Option<String>, flag: &str) -> Result<Option<chrono::DateTime<chrono::Utc>>, CliError> {
    s.as_deref()
        .map(|v| parse_timestamp(v).ok_or_else(|| CliError::input(format!("--{flag}: `{v}` is not an ISO-8601 timestamp"))))
        .transpose()
}

fn ingest(a: IngestArgs) -> Result<(), CliError> {
    let (mut env, report) = load_city(&a.features, a.boundaries.as_deref()).map_err(CliError::input)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if !report.dropped_missing_safety.is_empty() {
        eprintln!("dropped {} cells without a safety score", report.dropped_missing_safety.len());
    }
    if let Some(path) = &a.image_scores {
        let file = File::open(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let records = read_image_scores(file, Some(&env)).map_err(CliError::input)?;
        let perception = aggregate_by_cell(&records, &FallbackSummarizer).map_err(CliError::input)?;
        let missing = apply_perception(&mut env, &perception);
        if !missing.is_empty() {
            eprintln!("{} cells have no scored images and keep their table values", missing.len());
        }
    }
    if let (Some(crimes), Some(out)) = (&a.crimes, &a.distribution_out) {
        let period = match (timestamp_arg(&a.start, "start")?, timestamp_arg(&a.end, "end")?) {
            (Some(start), Some(end)) if start <= end => Some(Period { start, end }),
            (None, None) => None,
            _ => return Err(CliError::input("--start and --end must both be given, with start not after end")),
        };
        let (dist, report) = crimesim_core::env::ingest_crimes(&env, crimes, period).map_err(CliError::input)?;
        eprintln!(
            "{} records: {} assigned, {} unassigned, {} outside the period",
            report.records, report.assigned, report.unassigned, report.out_of_period
        );
        write_json(out, &dist)?;
    }
    write_json(&a.out, &env.to_bundle())?;
    eprintln!("wrote {} cells to {}", env.len(), a.out.display());
    Ok(())
}

fn sim_error(e: SimError) -> CliError {
    match e {
        SimError::Config(_)
        | SimError::Io { .. }
        | SimError::Env(_)
        | SimError::Scenario(_)
        | SimError::Fixture { .. }
        | SimError::NoCity
        | SimError::Population(_) => CliError::input(e),
        _ => CliError::runtime(e),
    }
}

fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let mut config = RunConfig::load(&a.config).map_err(sim_error)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.validate().map_err(sim_error)?;
    let env = match (&a.city, &config.city) {
        (Some(spec), _) => load_city_arg(spec)?,
        (None, Some(city)) => city.load().map_err(sim_error)?,
        (None, None) => return Err(sim_error(SimError::NoCity)),
    };
    let output = run_in(&env, &config).map_err(sim_error)?;
    write_run_dir(&a.out, &output).map_err(CliError::runtime)?;
    eprintln!(
        "{} crimes over {} steps ({} engine); artifacts in {}",
        output.total(),
        output.steps_completed,
        output.engine,
        a.out.display()
    );
    if !output.complete {
        return Err(CliError::runtime(format!(
            "run stopped after step {} because too many engine calls failed; partial artifacts were written",
            output.steps_completed
        )));
    }
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<(), CliError> {
    if !(a.alpha > 0.0 && a.alpha <= 1.0) {
        return Err(CliError::input(format!("--alpha must lie in (0, 1], got {}", a.alpha)));
    }
    let ks = parse_ks(&a.k).map_err(|e| CliError::input(format!("--k: {e}")))?;
    let env = a.city.as_deref().map(load_city_arg).transpose()?;
    let real = load_distribution(&a.real, env.as_ref())?;
    let sim = load_distribution(&a.sim, env.as_ref())?;
    let bases = match (&a.real_base, &a.sim_base) {
        (Some(r), Some(s)) => Some((load_distribution(r, env.as_ref())?, load_distribution(s, env.as_ref())?)),
        _ => None,
    };
    let baselines = bases.as_ref().map(|(r, s)| Baselines { real_base: r, sim_base: s });
    let report = evaluate(&real, &sim, a.alpha, &ks, baselines).map_err(CliError::input)?;
    write_json(&a.out, &report)?;
    if let Some(path) = &a.cells_out {
        let file = File::create(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        write_cell_comparison(&real, &sim, a.alpha, BufWriter::new(file)).map_err(CliError::runtime)?;
    }
    let hr: Vec<String> = report.hr.iter().map(|(k, v)| format!("HR@{k} {v:.4}")).collect();
    eprintln!("{} | JSD {:.4} | RMSE {:.6}", hr.join(" | "), report.jsd, report.rmse);
    Ok(())
}

fn load_gateway(path: &Path) -> Result<Arc<Gateway>, CliError> {
    let config: GatewayConfig =
        serde_json::from_str(&read_text(path)?).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    config.validate().map_err(CliError::input)?;
    Ok(Arc::new(Gateway::http(config)))
}

fn align(a: AlignArgs) -> Result<(), CliError> {
    let ratings = File::open(&a.ratings).map_err(|e| CliError::input(format!("{}: {e}", a.ratings.display())))?;
    let triplets =
        a.triplets.as_ref().map(|p| File::open(p).map_err(|e| CliError::input(format!("{}: {e}", p.display())))).transpose()?;
    let set = AnnotationSet::from_csv(ratings, triplets).map_err(CliError::input)?;
    let human = aggregate_annotations(&set).map_err(CliError::input)?;
    let initial = match &a.prompt {
        Some(p) => read_text(p)?,
        None => PERCEIVED_SCORE_PROMPT.to_owned(),
    };
    let config = AlignConfig {
        max_iters: a.max_iters,
        patience: a.patience,
        split_seed: a.seed,
        target_pearson: a.target,
        ..AlignConfig::default()
    };

    let (scorer, mut optimizer): (Box<dyn SafetyScorer>, Box<dyn PromptOptimizer>) =
        match (&a.fixture_scores, &a.proposals, &a.gateway) {
            (Some(scores), Some(proposals), _) => {
                let scores: BTreeMap<String, BTreeMap<String, f64>> = serde_json::from_str(&read_text(scores)?)
                    .map_err(|e| CliError::input(format!("{}: {e}", scores.display())))?;
                let proposals: Vec<String> = serde_json::from_str(&read_text(proposals)?)
                    .map_err(|e| CliError::input(format!("{}: {e}", proposals.display())))?;
                (Box::new(FixtureScorer { scores }), Box::new(ScriptedOptimizer::new(proposals)))
            }
            (_, _, Some(gw)) => {
                let gateway = load_gateway(gw)?;
                (
                    Box::new(GatewayScorer {
                        gateway: gateway.clone(),
                        model: a.model.clone(),
                        image_url_template: a.image_url.clone(),
                        max_tokens: 256,
                    }),
                    Box::new(GatewayOptimizer { gateway, model: a.model.clone(), max_tokens: 2048 }),
                )
            }
            _ => return Err(CliError::input("pass either --fixture-scores with --proposals, or --gateway")),
        };

    match align_prompt(&human, &initial, scorer.as_ref(), optimizer.as_mut(), &config) {
        Ok(result) => {
            write_json(&a.out, &result)?;
            eprintln!(
                "best train pearson {:?} after {} iterations (converged: {})",
                result.best_train_pearson,
                result.trace.len() - 1,
                result.converged
            );
            Ok(())
        }
        Err(abort) => {
            write_json(&a.out, &abort.partial)?;
            Err(CliError::runtime(format!("alignment stopped: {}; best-so-far result written", abort.error)))
        }
    }
}

fn heatmap(a: HeatmapArgs) -> Result<(), CliError> {
    let env = load_city_arg(&a.city)?;
    let dist: CrimeDistribution = load_distribution(&a.dist, Some(&env))?;
    write_json(&a.out, &feature_collection(&env, &dist))
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    if a.workers == 0 {
        return Err(CliError::input("--workers must be at least 1"));
    }
    let env = load_city_arg(&a.city)?;
    let mut real = BTreeMap::new();
    for (name, path) in &a.real {
        real.insert(name.clone(), load_distribution(path, Some(&env))?);
    }
    let config = ServiceConfig { data_dir: a.data_dir, workers: a.workers };
    let runtime = tokio::runtime::Runtime::new().map_err(CliError::runtime)?;
    runtime.block_on(async move {
        let state = service::AppState::new(env, real, config).map_err(CliError::runtime)?;
        let listener = tokio::net::TcpListener::bind(a.addr).await.map_err(|e| CliError::runtime(format!("{}: {e}", a.addr)))?;
        eprintln!("listening on http://{}", a.addr);
        axum::serve(listener, service::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(CliError::runtime)
    })
}
