//! Command-line wiring for the whole pipeline: dataset conversion, domain
//! statistics, pre-training, adaptation, benchmark plans, and sensitivity
//! sweeps.
//!
//! Configuration precedence everywhere is flags > config file > built-in
//! defaults, and every run echoes its fully resolved configuration so
//! results are reproducible from their own output.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use crate::adapt::{AdaptConfig, AdaptTarget, TaskKind, Variant};
use crate::align::FEATURE_ALIGNMENT_DESC;
use crate::encoder::{load_checkpoint, read_manifest_text, save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::graphstore::{compute_stats, convert_generic, load_bundle, save_bundle};
use crate::pretrain::{pretrain_run, PretrainConfig, SourceDomain};
use crate::taskbench::{
    check_cross_domain, make_episodes, mean_std, run_episodes, run_plan, sensitivity_sweep,
    write_outputs, BenchmarkPlan, PlanInputs, DEFAULT_EPISODES, DEFAULT_QUERY_CAP, DEFAULT_SEEDS,
};

#[derive(Parser)]
#[command(
    name = "samgpt",
    version,
    about = "Multi-domain graph pre-training with structure tokens and dual-prompt adaptation"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert raw edge/feature/label files into a canonical bundle
    Convert(ConvertArgs),
    /// Print structural statistics of a bundle as TSV
    Stats(StatsArgs),
    /// Contrastively pre-train an encoder over source bundles
    Pretrain(PretrainArgs),
    /// Tune prompts on a target domain and report few-shot accuracy
    Adapt(AdaptArgs),
    /// Run a benchmark plan: variant rows plus any α/β grids
    Bench(BenchArgs),
    /// Run only a plan's α/β sensitivity grids around the full model
    Sweep(BenchArgs),
    /// Print a checkpoint's manifest
    InspectCkpt(InspectArgs),
}

// ===== entry point =====

/// Parses argv, runs the chosen subcommand, and maps failures to exit
/// codes: 0 success, 2 cross-domain violation, 1 anything else.
pub fn main_entry() -> i32 {
    init_thread_pool();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version print to stdout and are not failures
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            e.exit_code()
        }
    }
}

/// `SAMGPT_THREADS` caps the worker pool; default is all available cores.
fn init_thread_pool() {
    if let Ok(v) = std::env::var("SAMGPT_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("warning: ignoring invalid SAMGPT_THREADS value '{v}'"),
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Convert(a) => cmd_convert(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Bench(a) => cmd_bench(a, false),
        Command::Sweep(a) => cmd_bench(a, true),
        Command::InspectCkpt(a) => cmd_inspect(a),
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ===== convert =====

#[derive(Args)]
struct ConvertArgs {
    /// Edge list: one `u v` / `u,v` pair per line; `#` comments allowed
    #[arg(long)]
    edges: PathBuf,
    /// Comma-separated numeric feature rows, one node per line
    #[arg(long)]
    features: PathBuf,
    /// One integer class label per line
    #[arg(long)]
    labels: PathBuf,
    /// Domain name recorded in the bundle
    #[arg(long)]
    name: String,
    /// Output bundle directory
    #[arg(long)]
    out: PathBuf,
}

fn cmd_convert(a: ConvertArgs) -> Result<()> {
    let g = convert_generic(&a.edges, &a.features, &a.labels, &a.name)?;
    save_bundle(&a.out, &g)?;
    println!(
        "wrote bundle '{}' to {}: {} nodes, {} directed edges, {} features, {} classes",
        g.domain_name,
        a.out.display(),
        g.num_nodes(),
        g.directed_edge_count(),
        g.feature_dim(),
        g.num_classes
    );
    Ok(())
}

// ===== stats =====

#[derive(Args)]
struct StatsArgs {
    /// Bundle directory
    #[arg(long)]
    bundle: PathBuf,
    /// BFS sources for the shortest-path estimate (all nodes when ≥ n)
    #[arg(long, default_value_t = 512)]
    spl_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let g = load_bundle(&a.bundle)?;
    let s = compute_stats(&g, a.spl_samples, a.seed)?;
    println!("nodes\tedges\tavg_node_degree\tavg_shortest_path_length\tavg_clustering_coefficient");
    println!(
        "{}\t{}\t{}\t{}\t{}",
        s.num_nodes,
        s.num_edges,
        s.avg_node_degree,
        s.avg_shortest_path_length,
        s.avg_clustering_coefficient
    );
    Ok(())
}

// ===== pretrain =====

#[derive(Args)]
struct PretrainArgs {
    /// Source bundle directories (comma-separated or repeated); order
    /// defines the roster and is part of the checkpoint
    #[arg(long, required = true, value_delimiter = ',')]
    sources: Vec<PathBuf>,
    /// Checkpoint output directory
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; explicit flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Structure-path weight in the fused embedding
    #[arg(long)]
    alpha: Option<f64>,
    /// Contrastive temperature
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of undirected edges dropped per augmentation
    #[arg(long)]
    edge_drop: Option<f64>,
    /// Anchor subgraphs sampled per domain per step
    #[arg(long)]
    batch_per_domain: Option<usize>,
    /// Ego-network radius of anchor subgraphs
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    aligned_dim: Option<usize>,
    /// Leave structure tokens untrained (produces the token-free ablation
    /// checkpoint)
    #[arg(long)]
    no_structure_tokens: bool,
    /// Where to write the per-step loss TSV (default: <out>/loss_log.tsv)
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

/// Config-file counterpart of the pretrain flags.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PretrainFile {
    alpha: Option<f64>,
    tau: Option<f64>,
    steps: Option<usize>,
    learning_rate: Option<f64>,
    seed: Option<u64>,
    edge_drop_ratio: Option<f64>,
    subgraphs_per_domain: Option<usize>,
    subgraph_radius: Option<usize>,
    layers: Option<usize>,
    hidden: Option<usize>,
    aligned_dim: Option<usize>,
    train_structure_tokens: Option<bool>,
}

fn resolve_pretrain_config(a: &PretrainArgs) -> Result<PretrainConfig> {
    let file: PretrainFile = match &a.config {
        Some(path) => load_json(path)?,
        None => PretrainFile::default(),
    };
    let d = PretrainConfig::default();
    Ok(PretrainConfig {
        alpha: a.alpha.or(file.alpha).unwrap_or(d.alpha),
        tau: a.tau.or(file.tau).unwrap_or(d.tau),
        edge_drop_ratio: a.edge_drop.or(file.edge_drop_ratio).unwrap_or(d.edge_drop_ratio),
        subgraphs_per_domain: a
            .batch_per_domain
            .or(file.subgraphs_per_domain)
            .unwrap_or(d.subgraphs_per_domain),
        subgraph_radius: a.radius.or(file.subgraph_radius).unwrap_or(d.subgraph_radius),
        steps: a.steps.or(file.steps).unwrap_or(d.steps),
        learning_rate: a.lr.or(file.learning_rate).unwrap_or(d.learning_rate),
        seed: a.seed.or(file.seed).unwrap_or(d.seed),
        layers: a.layers.or(file.layers).unwrap_or(d.layers),
        hidden: a.hidden.or(file.hidden).unwrap_or(d.hidden),
        aligned_dim: a.aligned_dim.or(file.aligned_dim).unwrap_or(d.aligned_dim),
        // the flag can only disable; absent means "defer to the file"
        train_structure_tokens: if a.no_structure_tokens {
            false
        } else {
            file.train_structure_tokens.unwrap_or(d.train_structure_tokens)
        },
    })
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let config = resolve_pretrain_config(&a)?;
    let mut sources = Vec::with_capacity(a.sources.len());
    for dir in &a.sources {
        sources.push(SourceDomain {
            bundle: load_bundle(dir)?,
            dir: Some(dir.clone()),
        });
    }
    let outcome = pretrain_run(&sources, &config)?;
    save_checkpoint(&a.out, &outcome.checkpoint)?;

    let mut log = String::from("step\tloss\n");
    for (step, loss) in outcome.loss_log.iter().enumerate() {
        log.push_str(&format!("{step}\t{loss}\n"));
    }
    let log_path = a.loss_log.clone().unwrap_or_else(|| a.out.join("loss_log.tsv"));
    write_text(&log_path, &log)?;

    let hash = outcome.checkpoint.content_hash();
    let report = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "sources": a.sources,
        "domains": outcome.checkpoint.hyper.domains,
        "dal_cache_keys": outcome.checkpoint.hyper.dal_cache_keys,
        "feature_alignment": FEATURE_ALIGNMENT_DESC,
        "checkpoint_hash": hash,
        "loss_first": outcome.loss_log.first(),
        "loss_last": outcome.loss_log.last(),
    });
    let report_path = a.out.join("pretrain_report.json");
    write_text(
        &report_path,
        &(serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))? + "\n"),
    )?;
    println!(
        "checkpoint {hash} written to {} ({} steps over {} domains)",
        a.out.display(),
        config.steps,
        outcome.checkpoint.hyper.domains.len()
    );
    Ok(())
}

// ===== adapt =====

#[derive(Args)]
struct AdaptArgs {
    /// Pre-trained checkpoint directory
    #[arg(long)]
    ckpt: PathBuf,
    /// Target bundle directory (must be absent from the source roster)
    #[arg(long)]
    target: PathBuf,
    /// JSON config file; explicit flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// node | graph
    #[arg(long)]
    task: Option<String>,
    /// Labeled support instances per class
    #[arg(long)]
    shots: Option<usize>,
    /// Episodes per seed
    #[arg(long)]
    episodes: Option<usize>,
    /// Number of seeds (total outcomes = episodes × seeds)
    #[arg(long)]
    seeds: Option<usize>,
    /// Holistic/specific prompt balance
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tune_steps: Option<usize>,
    #[arg(long)]
    tune_lr: Option<f64>,
    #[arg(long)]
    ego_radius: Option<usize>,
    /// full | v1 | v2 | v3 | v4
    #[arg(long)]
    variant: Option<String>,
    /// Downstream-only override of the checkpoint's fusion coefficient
    #[arg(long)]
    alpha: Option<f64>,
    /// Per-episode query-pool cap
    #[arg(long)]
    query_cap: Option<usize>,
    /// Base seed for episode sampling
    #[arg(long)]
    episode_seed: Option<u64>,
}

/// Config-file counterpart of the adapt flags.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AdaptFile {
    task: Option<String>,
    shots: Option<usize>,
    episodes: Option<usize>,
    seeds: Option<usize>,
    beta: Option<f64>,
    tune_steps: Option<usize>,
    tune_lr: Option<f64>,
    ego_radius: Option<usize>,
    variant: Option<String>,
    alpha: Option<f64>,
    query_cap: Option<usize>,
    episode_seed: Option<u64>,
}

struct ResolvedAdapt {
    task: TaskKind,
    shots: usize,
    episodes: usize,
    seeds: usize,
    query_cap: usize,
    episode_seed: u64,
    config: AdaptConfig,
}

fn resolve_adapt_config(a: &AdaptArgs) -> Result<ResolvedAdapt> {
    let file: AdaptFile = match &a.config {
        Some(path) => load_json(path)?,
        None => AdaptFile::default(),
    };
    let d = AdaptConfig::default();
    let task_str = a.task.clone().or(file.task).unwrap_or_else(|| "node".into());
    let variant_str = a.variant.clone().or(file.variant).unwrap_or_else(|| "full".into());
    Ok(ResolvedAdapt {
        task: TaskKind::parse(&task_str)?,
        shots: a.shots.or(file.shots).unwrap_or(1),
        episodes: a.episodes.or(file.episodes).unwrap_or(DEFAULT_EPISODES),
        seeds: a.seeds.or(file.seeds).unwrap_or(DEFAULT_SEEDS),
        query_cap: a.query_cap.or(file.query_cap).unwrap_or(DEFAULT_QUERY_CAP),
        episode_seed: a.episode_seed.or(file.episode_seed).unwrap_or(0),
        config: AdaptConfig {
            variant: Variant::parse(&variant_str)?,
            tune_steps: a.tune_steps.or(file.tune_steps).unwrap_or(d.tune_steps),
            tune_lr: a.tune_lr.or(file.tune_lr).unwrap_or(d.tune_lr),
            beta: a.beta.or(file.beta).unwrap_or(d.beta),
            ego_radius: a.ego_radius.or(file.ego_radius).unwrap_or(d.ego_radius),
            alpha_override: a.alpha.or(file.alpha),
        },
    })
}

fn cmd_adapt(a: AdaptArgs) -> Result<()> {
    let r = resolve_adapt_config(&a)?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    if r.config.variant.wants_untrained_tokens() && ckpt.hyper.structure_tokens_trained {
        return Err(Error::Config(
            "variant v1 requires a checkpoint pre-trained with --no-structure-tokens".into(),
        ));
    }
    let bundle = load_bundle(&a.target)?;
    check_cross_domain(&ckpt, &bundle.domain_name)?;
    let target = AdaptTarget::prepare(bundle, Some(&a.target), ckpt.hyper.aligned_dim)?;

    let episodes = make_episodes(
        &target.bundle,
        r.task,
        r.shots,
        r.episodes,
        r.seeds,
        r.query_cap,
        r.episode_seed,
    )?;
    let accuracies = run_episodes(&target, &ckpt, &episodes, &r.config)?;
    let (mean, std) = mean_std(&accuracies);

    let echo = json!({
        "ckpt": a.ckpt,
        "target": target.bundle.domain_name,
        "task": r.task.as_str(),
        "shots": r.shots,
        "episodes": r.episodes,
        "seeds": r.seeds,
        "variant": r.config.variant.as_str(),
        "beta": r.config.beta,
        "alpha": r.config.alpha_override.unwrap_or(ckpt.hyper.alpha),
        "tau": ckpt.hyper.tau,
        "tune_steps": r.config.tune_steps,
        "tune_lr": r.config.tune_lr,
        "ego_radius": r.config.ego_radius,
        "query_cap": r.query_cap,
        "episode_seed": r.episode_seed,
        "aligned_dim": ckpt.hyper.aligned_dim,
        "layers": ckpt.hyper.layers,
        "hidden": ckpt.hyper.hidden,
        "source_domains": ckpt.hyper.domains,
    });
    println!("# config {echo}");
    println!("# checkpoint {}", ckpt.content_hash());
    println!("# feature_alignment {FEATURE_ALIGNMENT_DESC}");
    println!("episode\taccuracy");
    for (i, acc) in accuracies.iter().enumerate() {
        println!("{i}\t{acc}");
    }
    println!("mean\tstd");
    println!("{mean}\t{std}");
    Ok(())
}

// ===== bench / sweep =====

#[derive(Args)]
struct BenchArgs {
    /// Benchmark plan (JSON)
    #[arg(long)]
    plan: PathBuf,
    /// Output directory for results.tsv, summary.tsv, report.json
    #[arg(long)]
    out: PathBuf,
    /// Override the plan's episode count
    #[arg(long)]
    episodes: Option<usize>,
    /// Override the plan's seed count
    #[arg(long)]
    seeds: Option<usize>,
    /// Override the plan's shot count
    #[arg(long)]
    shots: Option<usize>,
    /// Override the plan's tuning steps
    #[arg(long)]
    tune_steps: Option<usize>,
    /// Override the plan's variant list (comma-separated)
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    /// Override the plan's base seed
    #[arg(long)]
    plan_seed: Option<u64>,
}

fn load_plan_inputs(plan: &BenchmarkPlan) -> Result<PlanInputs> {
    let checkpoint = load_checkpoint(&plan.checkpoint)?;
    let checkpoint_v1 = match &plan.checkpoint_v1 {
        Some(dir) => Some(load_checkpoint(dir)?),
        None => None,
    };
    let bundle = load_bundle(&plan.target)?;
    let target = AdaptTarget::prepare(bundle, Some(&plan.target), checkpoint.hyper.aligned_dim)?;
    Ok(PlanInputs {
        checkpoint,
        checkpoint_v1,
        target,
    })
}

fn cmd_bench(a: BenchArgs, sweep_only: bool) -> Result<()> {
    let mut plan = BenchmarkPlan::load(&a.plan)?;
    if let Some(v) = a.episodes {
        plan.episodes = v;
    }
    if let Some(v) = a.seeds {
        plan.seeds = v;
    }
    if let Some(v) = a.shots {
        plan.shots = v;
    }
    if let Some(v) = a.tune_steps {
        plan.tune_steps = v;
    }
    if let Some(v) = a.variants.clone() {
        plan.variants = v;
    }
    if let Some(v) = a.plan_seed {
        plan.plan_seed = v;
    }
    plan.validate()?;

    let inputs = load_plan_inputs(&plan)?;
    let outcome = if sweep_only {
        sensitivity_sweep(&plan, &inputs)?
    } else {
        run_plan(&plan, &inputs)?
    };
    write_outputs(&a.out, &plan, &inputs, &outcome)?;

    println!("config\tmean\tstd\toutcomes");
    for row in &outcome.table.rows {
        println!("{}\t{}\t{}\t{}", row.label, row.mean, row.std, row.accuracies.len());
    }
    println!(
        "wrote results.tsv, summary.tsv, report.json to {} ({} outcomes per row)",
        a.out.display(),
        outcome.total_outcomes
    );
    Ok(())
}

// ===== inspect =====

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint directory
    #[arg(long)]
    ckpt: PathBuf,
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    // verify integrity (shapes + content hash), then print the manifest
    let _: Checkpoint = load_checkpoint(&a.ckpt)?;
    print!("{}", read_manifest_text(&a.ckpt)?);
    Ok(())
}

// ===== tests =====
