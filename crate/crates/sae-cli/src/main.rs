//! `sae` command line: graph inspection, spatial-prior decoder training,
//! model fitting, the simulation study, and metrics scoring.
//!
//! Exit codes: 0 on success, 2 on validation/input errors, 3 when sampling
//! itself fails. `SAE_SEED` overrides the seed from any config file.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use sae_core::graph::RegionGraph;
use sae_core::hmc::{save_draws, HmcConfig, HmcError};
use sae_core::metrics;
use sae_core::models::{
    fit, summarize_theta, DirectEstimateTable, ModelError, ModelKind, ModelSpec, Priors,
};
use sae_core::priors::{generate_training_set, save_training_set, Layout, TrainingMeta};
use sae_core::study::{run_study, SimulationConfig, StudyError};
use sae_core::util::derive_seed;
use sae_core::vae::{init_vae, load_decoder, save_decoder, train, DecoderArtifact, DecoderMeta, VaeConfig};

#[derive(Parser)]
#[command(name = "sae", version, about = "Small-area estimation with spatial priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Areal-graph utilities
    Graph {
        #[command(subcommand)]
        command: GraphCommand,
    },
    /// Train a reusable spatial-prior decoder for one graph
    TrainPrior(TrainPriorArgs),
    /// Fit one model to a direct-estimate table
    Fit(FitArgs),
    /// Run the simulation study described by a config file
    SimulateStudy(StudyArgs),
    /// Score a posterior-summary CSV against a truth CSV
    Metrics(MetricsArgs),
}

#[derive(Subcommand)]
enum GraphCommand {
    /// Parse and validate an edge-list file, then describe the graph
    Check {
        /// Edge list: one edge per line, two region ids; '#' comments
        #[arg(long)]
        graph: PathBuf,
    },
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    ModelKind::from_str(s)
}

fn parse_layout(s: &str) -> Result<Layout, String> {
    match s {
        "univariate" | "uni" => Ok(Layout::UnivariateN),
        "vectorized" | "vec" => Ok(Layout::VectorizedNk),
        other => Err(format!(
            "unknown layout {other:?}; expected univariate (uni) or vectorized (vec)"
        )),
    }
}

#[derive(Args)]
struct TrainPriorArgs {
    /// Edge-list graph file
    #[arg(long)]
    graph: PathBuf,
    /// Latent layout: univariate (one field of length N) or vectorized
    /// (K stacked fields)
    #[arg(long, value_parser = parse_layout)]
    layout: Layout,
    /// Number of responses for the vectorized layout
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Prior draws in the training set
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Optional trainer config JSON (epochs, batch size, ...)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overridden by SAE_SEED)
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the decoder artifact
    #[arg(long)]
    out: PathBuf,
    /// Also persist the training set (binary + .meta.json sidecar)
    #[arg(long)]
    training_out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Model kind: fh, sms, gms, vsms, or vgms
    #[arg(long, value_parser = parse_model)]
    model: ModelKind,
    /// Direct-estimate CSV (region_id, y_*, se_*/moe_*, x_*)
    #[arg(long)]
    data: PathBuf,
    /// Edge-list graph file
    #[arg(long)]
    graph: PathBuf,
    /// Decoder artifact (required for vsms/vgms)
    #[arg(long)]
    decoder: Option<PathBuf>,
    /// Fit config JSON: {"hmc": {...}, "priors": {...}, "gmcar_order": ...,
    /// "scalar_scale": ...}; every field optional
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (summary.csv, draws.bin, diagnostics.json)
    #[arg(long)]
    out: PathBuf,
    /// Confidence level assumed for moe_* columns
    #[arg(long, default_value_t = 0.90)]
    moe_level: f64,
    /// Log-transform estimates first (delta-method standard errors)
    #[arg(long)]
    log_transform: bool,
}

#[derive(Args)]
struct StudyArgs {
    /// SimulationConfig JSON
    #[arg(long)]
    config: PathBuf,
    /// Output directory (metrics.json, metrics.csv, timing.json)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    /// Posterior-summary CSV produced by `sae fit`
    #[arg(long)]
    estimates: PathBuf,
    /// Truth CSV: region_id, response, truth (original scale)
    #[arg(long)]
    truth: PathBuf,
    /// Write the JSON report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Optional fit-time configuration file; every field falls back to defaults.
#[derive(Deserialize, Default)]
#[serde(default)]
struct FitConfig {
    hmc: HmcConfig,
    priors: Priors,
    gmcar_order: Option<usize>,
    scalar_scale: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

/// 3 when the chain itself failed, 2 for everything else (validation).
fn exit_code_for(err: &anyhow::Error) -> u8 {
    fn hmc_code(e: &HmcError) -> u8 {
        match e {
            HmcError::NonFiniteInit { .. }
            | HmcError::AllDivergent { .. }
            | HmcError::GradientCheckFailed { .. } => 3,
            _ => 2,
        }
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<HmcError>() {
            return hmc_code(e);
        }
        if let Some(ModelError::Hmc(e)) = cause.downcast_ref::<ModelError>() {
            return hmc_code(e);
        }
        if let Some(s) = cause.downcast_ref::<StudyError>() {
            match s {
                StudyError::Hmc(e) | StudyError::Model(ModelError::Hmc(e)) => {
                    return hmc_code(e)
                }
                _ => {}
            }
        }
    }
    2
}

fn seed_override() -> anyhow::Result<Option<u64>> {
    match std::env::var("SAE_SEED") {
        Ok(raw) => {
            let seed = raw
                .trim()
                .parse::<u64>()
                .with_context(|| format!("SAE_SEED {raw:?} is not a u64"))?;
            Ok(Some(seed))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e).context("SAE_SEED is not valid unicode"),
    }
}

fn load_graph(path: &Path) -> anyhow::Result<RegionGraph> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading graph file {}", path.display()))?;
    RegionGraph::from_edge_list_text(&text)
        .with_context(|| format!("parsing graph file {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Graph {
            command: GraphCommand::Check { graph },
        } => graph_check(&graph),
        Command::TrainPrior(args) => train_prior(args),
        Command::Fit(args) => fit_model(args),
        Command::SimulateStudy(args) => simulate_study(args),
        Command::Metrics(args) => score_metrics(args),
    }
}

fn graph_check(path: &Path) -> anyhow::Result<()> {
    let graph = load_graph(path)?;
    println!("regions: {}", graph.n_regions());
    println!("edges: {}", graph.n_edges());
    let hist = graph
        .degree_histogram()
        .into_iter()
        .map(|(d, c)| format!("{d}:{c}"))
        .collect::<Vec<_>>()
        .join(" ");
    println!("degree histogram (degree:count): {hist}");
    println!("content hash: {}", graph.content_hash());
    Ok(())
}

fn train_prior(args: TrainPriorArgs) -> anyhow::Result<()> {
    let graph = load_graph(&args.graph)?;
    let mut cfg: VaeConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => VaeConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    let mut rng = rand_seed(derive_seed(cfg.seed, 20));
    let set = generate_training_set(&graph, args.samples, args.layout, args.k, &mut rng)
        .context("generating the prior training set")?;
    if let Some(tpath) = &args.training_out {
        save_training_set(
            &set,
            &TrainingMeta {
                graph_hash: graph.content_hash(),
                seed: cfg.seed,
            },
            tpath,
        )
        .context("saving the training set")?;
        println!("training set: {}", tpath.display());
    }
    let mut vae_cfg = cfg.clone();
    vae_cfg.seed = derive_seed(cfg.seed, 30);
    let model = init_vae(set.dim(), vae_cfg.seed);
    let (trained, trace) = train(model, &set, &vae_cfg).context("training the decoder")?;
    let final_elbo = trace.elbo.last().copied().unwrap_or(f64::NAN);
    let artifact = DecoderArtifact::from_model(
        &trained,
        DecoderMeta {
            layout: args.layout,
            graph_hash: graph.content_hash(),
            seed: vae_cfg.seed,
            n_samples: set.n_samples(),
            final_elbo,
        },
    );
    save_decoder(&artifact, &args.out).context("saving the decoder artifact")?;
    println!(
        "decoder: {} (latent dim {}, {} epochs, final elbo {final_elbo:.4})",
        args.out.display(),
        artifact.latent_dim,
        trace.elbo.len(),
    );
    Ok(())
}

fn rand_seed(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn log_transform_table(t: &DirectEstimateTable) -> anyhow::Result<DirectEstimateTable> {
    let mut y = t.y.clone();
    let mut gamma = t.gamma.clone();
    for i in 0..t.n_regions() {
        for c in 0..t.n_responses() {
            if t.observed[[i, c]] {
                let (ly, lse) = metrics::delta_log(y[[i, c]], gamma[[i, c]]).with_context(|| {
                    format!(
                        "log transform of cell ({}, {})",
                        t.region_ids[i], t.response_names[c]
                    )
                })?;
                y[[i, c]] = ly;
                gamma[[i, c]] = lse;
            }
        }
    }
    DirectEstimateTable::from_parts(
        t.region_ids.clone(),
        t.response_names.clone(),
        y,
        gamma,
        t.observed.clone(),
        Some((t.covariate_names.clone(), t.x.clone())),
    )
    .map_err(Into::into)
}

fn fit_model(args: FitArgs) -> anyhow::Result<()> {
    let graph = Arc::new(load_graph(&args.graph)?);
    let table = DirectEstimateTable::from_csv(&args.data, args.moe_level)
        .with_context(|| format!("reading {}", args.data.display()))?;
    let table = if args.log_transform {
        log_transform_table(&table)?
    } else {
        table
    };
    let table = table
        .aligned_to(&graph)
        .context("aligning the table to the graph")?;
    let cfg: FitConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => FitConfig::default(),
    };
    let mut spec = ModelSpec::new(args.model, table.n_responses());
    spec.priors = cfg.priors;
    spec.scalar_scale = cfg.scalar_scale;
    if let Some(order) = cfg.gmcar_order {
        spec.gmcar_order = order;
    }
    let mut hmc = cfg.hmc;
    if let Some(seed) = seed_override()? {
        hmc.seed = seed;
    }
    let decoder = match &args.decoder {
        Some(path) => Some(
            load_decoder(path).with_context(|| format!("loading decoder {}", path.display()))?,
        ),
        None => None,
    };
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let result = fit(&spec, &table, &graph, decoder.as_ref(), &hmc)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }

    let summary = summarize_theta(&result.draws, &table)?;
    let summary_path = args.out.join("summary.csv");
    summary.write_csv(&summary_path)?;
    let draws_path = args.out.join("draws.bin");
    save_draws(&result.draws, &draws_path)?;
    let diag_path = args.out.join("diagnostics.json");
    let diag = serde_json::json!({
        "model": spec.kind.name(),
        "accept_rate": result.draws.accept_rate,
        "step_size": result.draws.step_size,
        "divergences": result.draws.divergences,
        "diagnostics": result.diagnostics,
        "warnings": result.warnings,
    });
    std::fs::write(&diag_path, serde_json::to_string_pretty(&diag)?)?;

    let rhat_note = match &result.diagnostics {
        Some(d) => format!("max rhat {:.4}", d.max_rhat()),
        None => "diagnostics unavailable".to_string(),
    };
    println!(
        "fit {} on {} regions x {} responses: {rhat_note}",
        spec.kind.name(),
        table.n_regions(),
        table.n_responses(),
    );
    println!("summary: {}", summary_path.display());
    println!("draws: {}", draws_path.display());
    println!("diagnostics: {}", diag_path.display());
    Ok(())
}

fn simulate_study(args: StudyArgs) -> anyhow::Result<()> {
    let mut config = SimulationConfig::from_json_file(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(seed) = seed_override()? {
        config.seed = seed;
    }
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let report = run_study(&config)?;

    let metrics_path = args.out.join("metrics.json");
    std::fs::write(&metrics_path, report.deterministic_json()?)?;
    let csv_path = args.out.join("metrics.csv");
    let file = std::fs::File::create(&csv_path)?;
    report.to_csv(file)?;
    let timing_path = args.out.join("timing.json");
    std::fs::write(&timing_path, serde_json::to_string_pretty(&report.timing)?)?;

    for f in &report.failures {
        eprintln!(
            "warning: replicate {} model {} failed: {}",
            f.replicate, f.model, f.message
        );
    }
    println!(
        "study: {} replicates, {} aggregated rows, {} failures",
        config.n_replicates,
        report.aggregated.len(),
        report.failures.len()
    );
    for row in &report.aggregated {
        println!(
            "  {:<8} {:<8} rmse {:9.4}  interval score {:9.4}  coverage {:.3}",
            row.model, row.response, row.rmse, row.interval_score, row.coverage
        );
    }
    println!("metrics: {}", metrics_path.display());
    println!("csv: {}", csv_path.display());
    println!("timing: {}", timing_path.display());
    Ok(())
}

struct EstimateRow {
    region_id: String,
    response: String,
    mean_orig: f64,
    q025_orig: f64,
    q975_orig: f64,
}

fn read_estimates(path: &Path) -> anyhow::Result<Vec<EstimateRow>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> anyhow::Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{} lacks a {name:?} column", path.display()))
    };
    let (ci_region, ci_resp) = (col("region_id")?, col("response")?);
    let (ci_mean, ci_lo, ci_hi) = (col("mean_orig")?, col("q025_orig")?, col("q975_orig")?);
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |idx: usize| -> anyhow::Result<f64> {
            record
                .get(idx)
                .unwrap_or("")
                .parse::<f64>()
                .with_context(|| format!("line {}: bad number", line + 2))
        };
        rows.push(EstimateRow {
            region_id: record.get(ci_region).unwrap_or("").to_string(),
            response: record.get(ci_resp).unwrap_or("").to_string(),
            mean_orig: parse(ci_mean)?,
            q025_orig: parse(ci_lo)?,
            q975_orig: parse(ci_hi)?,
        });
    }
    Ok(rows)
}

fn score_metrics(args: MetricsArgs) -> anyhow::Result<()> {
    let estimates = read_estimates(&args.estimates)?;
    let mut truths: std::collections::HashMap<(String, String), f64> =
        std::collections::HashMap::new();
    let mut reader = csv::Reader::from_path(&args.truth)
        .with_context(|| format!("reading {}", args.truth.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> anyhow::Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{} lacks a {name:?} column", args.truth.display()))
    };
    let (ti_region, ti_resp, ti_truth) = (col("region_id")?, col("response")?, col("truth")?);
    for record in reader.records() {
        let record = record?;
        let key = (
            record.get(ti_region).unwrap_or("").to_string(),
            record.get(ti_resp).unwrap_or("").to_string(),
        );
        let value = record
            .get(ti_truth)
            .unwrap_or("")
            .parse::<f64>()
            .context("bad truth value")?;
        truths.insert(key, value);
    }

    let mut responses: Vec<String> = Vec::new();
    for row in &estimates {
        if !responses.contains(&row.response) {
            responses.push(row.response.clone());
        }
    }
    let mut report_rows = Vec::new();
    let mut all = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for response in &responses {
        let mut est = Vec::new();
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        let mut tr = Vec::new();
        for row in estimates.iter().filter(|r| &r.response == response) {
            let key = (row.region_id.clone(), row.response.clone());
            let truth = *truths.get(&key).with_context(|| {
                format!("truth file lacks cell ({}, {})", key.0, key.1)
            })?;
            est.push(row.mean_orig);
            lo.push(row.q025_orig);
            hi.push(row.q975_orig);
            tr.push(truth);
        }
        all.0.extend_from_slice(&est);
        all.1.extend_from_slice(&lo);
        all.2.extend_from_slice(&hi);
        all.3.extend_from_slice(&tr);
        report_rows.push(serde_json::json!({
            "response": response,
            "cells": est.len(),
            "rmse": metrics::rmse(&est, &tr)?,
            "interval_score": metrics::mean_interval_score(&lo, &hi, &tr, 0.05)?,
            "coverage": metrics::coverage(&lo, &hi, &tr)?,
        }));
    }
    if responses.len() > 1 {
        report_rows.push(serde_json::json!({
            "response": "all",
            "cells": all.0.len(),
            "rmse": metrics::rmse(&all.0, &all.3)?,
            "interval_score": metrics::mean_interval_score(&all.1, &all.2, &all.3, 0.05)?,
            "coverage": metrics::coverage(&all.1, &all.2, &all.3)?,
        }));
    }
    let report = serde_json::to_string_pretty(&serde_json::json!({ "rows": report_rows }))?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, &report)?;
            println!("metrics: {}", path.display());
        }
        None => println!("{report}"),
    }
    Ok(())
}
