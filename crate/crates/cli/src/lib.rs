//! Command-line front end for the `ovseg` pipeline.

pub mod serve;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use ovseg_core::feature::FeatureProvider;
use ovseg_core::pipeline::{
    cache_listing, cmd_features, cmd_prepare, load_query_state, open_provider, PipelineConfig, PipelineError,
    StageRecord, SYNTHETIC,
};
use ovseg_core::query::{
    cluster_instances, export_heatmap, export_instances, ranked_superpoints, result_json, score_query, threshold_points, ThresholdMode,
};
use ovseg_core::superpoint::graph_stats;
use ovseg_core::synthetic::{generate, write_scene_dir, SyntheticConfig};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "ovseg", version, about = "Open-vocabulary 3D segmentation over superpoints")]
pub struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Provider spec replacing both configured providers (`synthetic` or a URL).
    #[arg(long)]
    pub provider: Option<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<PipelineConfig, PipelineError> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        if let Some(p) = &self.provider {
            cfg.override_providers(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a config file with every default filled in.
    Init {
        #[arg(long)]
        config: PathBuf,
        /// Scene manifest, relative to the config file.
        #[arg(long, default_value = "scene.json")]
        manifest: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Generate the synthetic box scene and a matching config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.02)]
        spacing: f64,
        #[arg(long, default_value_t = 12)]
        views: usize,
    },
    /// Load, downsample, estimate normals, oversegment, compute visibility.
    Prepare(ConfigArgs),
    /// Extract features, merge superpoints, extract query features.
    Features(ConfigArgs),
    /// Score a text prompt and export heatmap and instances.
    Query(QueryArgs),
    /// Serve the query API and optional static viewer files.
    Serve(ServeArgs),
    /// Summarize cached artifacts as JSON.
    Stats(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    pub prompt: String,
    #[arg(long, default_value = "ovseg-out")]
    pub out_dir: PathBuf,
    /// Absolute score threshold.
    #[arg(long, conflicts_with = "percentile")]
    pub threshold: Option<f64>,
    /// Percentile threshold in [0, 100).
    #[arg(long)]
    pub percentile: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub min_cluster_size: Option<usize>,
    #[arg(long)]
    pub no_cluster: bool,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Directory of static viewer files.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

/// Runs one command and maps failure to its exit code, printing the error.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Init { config, manifest, force } => init(&config, &manifest, force),
        Command::Synth { out, spacing, views } => synth(&out, spacing, views),
        Command::Prepare(args) => {
            let cfg = args.load()?;
            let p = cmd_prepare(&cfg)?;
            print_records(&p.records);
            let s = graph_stats(&p.graph);
            println!(
                "{} points, {} superpoints, {} edges, {} views",
                p.bundle.cloud.len(),
                s.n_superpoints,
                s.n_edges,
                p.bundle.views.len()
            );
            Ok(())
        }
        Command::Features(args) => {
            let cfg = args.load()?;
            let merge = open_provider(&cfg.providers.merge, &cfg)?;
            let query: Box<dyn FeatureProvider> = if cfg.providers.query == cfg.providers.merge {
                open_provider(&cfg.providers.merge, &cfg)?
            } else {
                open_provider(&cfg.providers.query, &cfg)?
            };
            let out = cmd_features(&cfg, merge.as_ref(), query.as_ref())?;
            print_records(&out.records);
            for r in &out.artifact.report.rounds {
                println!(
                    "round {}: {} -> {} superpoints ({} merges)",
                    r.round, r.n_superpoints_before, r.n_superpoints_after, r.n_merges
                );
            }
            println!(
                "{} superpoints, query features from {} (dim {})",
                out.artifact.graph.len(),
                out.artifact.query_features.provider,
                out.artifact.query_features.dim
            );
            Ok(())
        }
        Command::Query(args) => query(&args),
        Command::Serve(args) => serve(&args),
        Command::Stats(args) => stats(&args.load()?),
    }
}

fn print_records(records: &[StageRecord]) {
    for r in records {
        let status = serde_json::to_value(r.status).expect("status serializes");
        println!("{:<11} {:<9} {}", r.stage, status.as_str().unwrap_or_default(), r.key);
    }
}

fn write_new(path: &Path, text: &str, force: bool) -> Result<(), PipelineError> {
    if path.exists() && !force {
        return Err(PipelineError::Config(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn init(path: &Path, manifest: &Path, force: bool) -> Result<(), PipelineError> {
    let mut cfg = PipelineConfig::default();
    cfg.scene.manifest = manifest.to_path_buf();
    write_new(path, &cfg.to_toml_string(), force)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Config tuned to the synthetic scene's point spacing.
pub fn synthetic_config(spacing: f64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.override_providers(SYNTHETIC);
    cfg.cluster.epsilon = 3.0 * spacing;
    cfg.cluster.min_cluster_size = 20;
    cfg
}

fn synth(out: &Path, spacing: f64, views: usize) -> Result<(), PipelineError> {
    let scfg = SyntheticConfig {
        spacing,
        n_views: views,
        ..SyntheticConfig::default()
    };
    let scene = generate(&scfg)?;
    let manifest = write_scene_dir(&scene, out)?;
    let cfg_path = out.join("ovseg.toml");
    write_new(&cfg_path, &synthetic_config(spacing).to_toml_string(), true)?;
    println!(
        "wrote {} points, {} views to {}; config {}",
        scene.bundle.cloud.len(),
        scene.bundle.views.len(),
        manifest.display(),
        cfg_path.display()
    );
    Ok(())
}

fn query(args: &QueryArgs) -> Result<(), PipelineError> {
    let mut cfg = args.config.load()?;
    if let Some(t) = args.threshold {
        cfg.cluster.threshold = ThresholdMode::Absolute(t);
    }
    if let Some(p) = args.percentile {
        cfg.cluster.threshold = ThresholdMode::Percentile(p);
    }
    cfg.cluster.epsilon = args.epsilon.unwrap_or(cfg.cluster.epsilon);
    cfg.cluster.min_cluster_size = args.min_cluster_size.unwrap_or(cfg.cluster.min_cluster_size);
    cfg.validate()?;
    let state = load_query_state(&cfg)?;
    let provider = open_provider(&cfg.providers.query, &cfg)?;
    let a = &state.artifact;
    let result = score_query(&args.prompt, &a.query_features, provider.as_ref(), &a.graph)?;

    let ranked = ranked_superpoints(&result);
    println!("prompt {:?}: top superpoints", result.prompt);
    for (sp, score) in ranked.iter().take(args.top) {
        let size = a.graph.superpoints[*sp as usize].member_count();
        println!("  sp {sp:>5}  score {score:.4}  points {size}");
    }

    let instances = if args.no_cluster {
        Vec::new()
    } else {
        let selected = threshold_points(&result, cfg.cluster.threshold);
        let inst = cluster_instances(&selected, &state.bundle.cloud, &cfg.cluster, &result.point_scores)?;
        println!("{} points above threshold, {} instances", selected.len(), inst.len());
        for i in &inst {
            println!("  instance {}  points {}  score {:.4}", i.instance_id, i.point_indices.len(), i.score);
        }
        inst
    };

    std::fs::create_dir_all(&args.out_dir)?;
    export_heatmap(&result, &state.bundle.cloud, &args.out_dir.join("heatmap.ply"))?;
    if !args.no_cluster {
        export_instances(&instances, &state.bundle.cloud, &args.out_dir.join("instances.ply"))?;
    }
    let json = serde_json::to_string_pretty(&result_json(&result, &instances)).expect("json serializes");
    std::fs::write(args.out_dir.join("result.json"), json + "\n")?;
    println!("wrote {}", args.out_dir.display());
    Ok(())
}

fn stats(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let listing = cache_listing(cfg)?;
    let mut out = json!({ "cache_dir": cfg.cache_path(), "artifacts": listing });
    match load_query_state(cfg) {
        Ok(state) => {
            let s = graph_stats(&state.artifact.graph);
            out["points"] = json!(state.bundle.cloud.len());
            out["views"] = json!(state.bundle.views.len());
            out["superpoints"] = json!({
                "count": s.n_superpoints,
                "edges": s.n_edges,
                "mean_size": s.mean_size,
                "min_size": s.min_size,
                "max_size": s.max_size,
            });
            out["merge_rounds"] = json!(state.artifact.report.rounds);
            out["query_provider"] = json!(state.artifact.query_features.provider);
        }
        Err(PipelineError::MissingStage { .. }) => out["features"] = json!(null),
        Err(e) => return Err(e),
    }
    println!("{}", serde_json::to_string_pretty(&out).expect("json serializes"));
    Ok(())
}

/// Loads cached state and opens the query provider for [`serve::router`].
pub fn serve_state(cfg: PipelineConfig) -> Result<serve::AppState, PipelineError> {
    let state = load_query_state(&cfg)?;
    let provider: Arc<dyn FeatureProvider> = Arc::from(open_provider(&cfg.providers.query, &cfg)?);
    Ok(serve::AppState::new(cfg, state, provider))
}

fn serve(args: &ServeArgs) -> Result<(), PipelineError> {
    let cfg = args.config.load()?;
    // the blocking HTTP client must be built outside the async runtime
    let state = Arc::new(serve_state(cfg)?);
    let app = serve::router(state.clone(), args.static_dir.clone());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.bind).await?;
        println!("serving on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    // drop the provider outside the runtime as well
    drop(state);
    Ok(())
}
