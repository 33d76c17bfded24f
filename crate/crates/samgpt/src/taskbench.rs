//! Benchmark harness: episode generation, parallel evaluation, ablation and
//! sensitivity sweeps, and report emission.
//!
//! Few-shot accuracy is reported as mean ± population standard deviation
//! over `episodes × seeds` independently drawn episodes. Every row of one
//! plan (variants, α/β grid points) consumes the identical episode list, so
//! comparisons between rows are paired.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{
    run_episode, AdaptConfig, AdaptTarget, TaskEpisode, TaskKind, Variant, DEFAULT_BETA,
    DEFAULT_EGO_RADIUS, DEFAULT_TUNE_LR, DEFAULT_TUNE_STEPS,
};
use crate::align::FEATURE_ALIGNMENT_DESC;
use crate::encoder::Checkpoint;
use crate::error::{Error, Result};
use crate::graphstore::{nodes_by_class, GraphBundle};
use crate::seeding::derive_rng;

/// rng stream tag for episode sampling (pre-training claims tags 1–3).
const TAG_EPISODE: u64 = 4;

pub const DEFAULT_EPISODES: usize = 100;
pub const DEFAULT_SEEDS: usize = 5;
pub const DEFAULT_QUERY_CAP: usize = 200;

// ===== plan =====

/// A fully-specified benchmark run, loadable from JSON. Optional fields
/// default as documented so minimal plans stay small; the resolved plan is
/// echoed verbatim into `report.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkPlan {
    /// Pre-trained checkpoint directory.
    pub checkpoint: PathBuf,
    /// Checkpoint pre-trained with structure tokens left untrained; required
    /// only when the plan evaluates variant v1.
    #[serde(default)]
    pub checkpoint_v1: Option<PathBuf>,
    /// Target bundle directory.
    pub target: PathBuf,
    #[serde(default = "default_task")]
    pub task: String,
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    /// Variants to evaluate, one result row each.
    #[serde(default = "default_variants")]
    pub variants: Vec<String>,
    /// Downstream-only α grid; each point adds a full-variant row.
    #[serde(default)]
    pub alpha_grid: Vec<f64>,
    /// β grid; each point adds a full-variant row.
    #[serde(default)]
    pub beta_grid: Vec<f64>,
    #[serde(default = "default_tune_steps")]
    pub tune_steps: usize,
    #[serde(default = "default_tune_lr")]
    pub tune_lr: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_ego_radius")]
    pub ego_radius: usize,
    /// Per-episode query-pool cap (class-stratified sampling above it).
    #[serde(default = "default_query_cap")]
    pub query_cap: usize,
    #[serde(default)]
    pub plan_seed: u64,
}

fn default_task() -> String {
    "node".into()
}
fn default_shots() -> usize {
    1
}
fn default_episodes() -> usize {
    DEFAULT_EPISODES
}
fn default_seeds() -> usize {
    DEFAULT_SEEDS
}
fn default_variants() -> Vec<String> {
    vec!["full".into()]
}
fn default_tune_steps() -> usize {
    DEFAULT_TUNE_STEPS
}
fn default_tune_lr() -> f64 {
    DEFAULT_TUNE_LR
}
fn default_beta() -> f64 {
    DEFAULT_BETA
}
fn default_ego_radius() -> usize {
    DEFAULT_EGO_RADIUS
}
fn default_query_cap() -> usize {
    DEFAULT_QUERY_CAP
}

impl BenchmarkPlan {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: BenchmarkPlan = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 || self.episodes == 0 || self.seeds == 0 || self.query_cap == 0 {
            return Err(Error::Config(
                "shots, episodes, seeds, and query_cap must all be positive".into(),
            ));
        }
        if !(self.tune_lr > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config("tune_lr must be positive and beta finite".into()));
        }
        TaskKind::parse(&self.task)?;
        let mut needs_v1 = false;
        for v in &self.variants {
            needs_v1 |= Variant::parse(v)?.wants_untrained_tokens();
        }
        if needs_v1 && self.checkpoint_v1.is_none() {
            return Err(Error::Config(
                "variant v1 requires `checkpoint_v1` (pre-trained with --no-structure-tokens)"
                    .into(),
            ));
        }
        if self.alpha_grid.iter().chain(&self.beta_grid).any(|x| !x.is_finite()) {
            return Err(Error::Config("grid values must be finite".into()));
        }
        Ok(())
    }
}

// ===== episode generation =====

/// Draws `episodes` episodes for each of `seeds` seeds, seed-major order.
/// Support sets are class-balanced (`shots` nodes per class, sampled without
/// replacement); the remaining labeled nodes form the query set, capped at
/// `query_cap` by class-stratified sampling. Fully determined by
/// `(plan_seed, seed index, episode index)`.
pub fn make_episodes(
    g: &GraphBundle,
    kind: TaskKind,
    shots: usize,
    episodes: usize,
    seeds: usize,
    query_cap: usize,
    plan_seed: u64,
) -> Result<Vec<TaskEpisode>> {
    let by_class = nodes_by_class(g);
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < shots + 1 {
            return Err(Error::ClassTooSmall {
                class,
                have: members.len(),
                need: shots + 1,
            });
        }
    }
    let mut out = Vec::with_capacity(episodes * seeds);
    for seed_idx in 0..seeds {
        for ep_idx in 0..episodes {
            let mut rng = derive_rng(plan_seed, &[TAG_EPISODE, seed_idx as u64, ep_idx as u64]);
            out.push(draw_episode(&by_class, kind, shots, query_cap, seed_idx as u64, &mut rng));
        }
    }
    Ok(out)
}

fn draw_episode<R: Rng>(
    by_class: &[Vec<usize>],
    kind: TaskKind,
    shots: usize,
    query_cap: usize,
    seed: u64,
    rng: &mut R,
) -> TaskEpisode {
    let mut support = Vec::with_capacity(shots * by_class.len());
    let mut leftover: Vec<Vec<usize>> = Vec::with_capacity(by_class.len());
    for (class, members) in by_class.iter().enumerate() {
        let mut picked = index_sample(rng, members.len(), shots).into_vec();
        picked.sort_unstable();
        let mut taken = vec![false; members.len()];
        for &i in &picked {
            taken[i] = true;
            support.push((members[i], class));
        }
        leftover.push(
            members
                .iter()
                .enumerate()
                .filter(|&(i, _)| !taken[i])
                .map(|(_, &v)| v)
                .collect(),
        );
    }
    let quotas = stratified_quotas(&leftover.iter().map(Vec::len).collect::<Vec<_>>(), query_cap);
    let mut queries = Vec::with_capacity(quotas.iter().sum());
    for (class, (pool, &quota)) in leftover.iter().zip(&quotas).enumerate() {
        let mut picked = index_sample(rng, pool.len(), quota).into_vec();
        picked.sort_unstable();
        queries.extend(picked.into_iter().map(|i| (pool[i], class)));
    }
    TaskEpisode {
        kind,
        shots,
        support,
        queries,
        num_classes: by_class.len(),
        seed,
    }
}

/// Splits `cap` query slots across classes proportionally to their pool
/// sizes (largest-remainder apportionment, ties to the lower class index).
/// Pools that fit under the cap are taken whole.
fn stratified_quotas(pool_sizes: &[usize], cap: usize) -> Vec<usize> {
    let total: usize = pool_sizes.iter().sum();
    if total <= cap {
        return pool_sizes.to_vec();
    }
    let mut quotas: Vec<usize> = pool_sizes.iter().map(|&l| cap * l / total).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..pool_sizes.len()).collect();
    order.sort_by_key(|&c| (std::cmp::Reverse(cap * pool_sizes[c] % total), c));
    for &c in order.iter().take(cap - assigned) {
        quotas[c] += 1;
    }
    quotas
}

/// Content digest of episode definitions (support and query index sets).
/// Paired rows of one plan must agree on this digest.
pub fn episode_digest(episodes: &[TaskEpisode]) -> String {
    let mut hasher = Sha256::new();
    for ep in episodes {
        hasher.update((ep.support.len() as u64).to_le_bytes());
        for &(v, y) in &ep.support {
            hasher.update((v as u64).to_le_bytes());
            hasher.update((y as u64).to_le_bytes());
        }
        hasher.update((ep.queries.len() as u64).to_le_bytes());
        for &(v, y) in &ep.queries {
            hasher.update((v as u64).to_le_bytes());
            hasher.update((y as u64).to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

// ===== evaluation =====

/// The downstream target must be unseen during pre-training.
pub fn check_cross_domain(ckpt: &Checkpoint, target_name: &str) -> Result<()> {
    if ckpt.hyper.domains.iter().any(|d| d == target_name) {
        return Err(Error::CrossDomain(target_name.to_string()));
    }
    Ok(())
}

/// Runs every episode against one checkpoint and config, fanning out across
/// the rayon pool. Results are gathered in episode-index order, so output is
/// independent of scheduling.
pub fn run_episodes(
    target: &AdaptTarget,
    ckpt: &Checkpoint,
    episodes: &[TaskEpisode],
    config: &AdaptConfig,
) -> Result<Vec<f64>> {
    let results: Vec<Result<f64>> = episodes
        .par_iter()
        .map(|ep| run_episode(target, ckpt, ep, config).map(|o| o.accuracy))
        .collect();
    results.into_iter().collect()
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    assert!(!xs.is_empty(), "no outcomes to aggregate");
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standard error of the mean paired difference a−b.
pub fn paired_se(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "paired comparison needs equal-length runs");
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (_, sd) = mean_std(&diffs);
    sd / (diffs.len() as f64).sqrt()
}

// ===== result table =====

/// One evaluated configuration with its raw per-episode accuracies.
#[derive(Clone, Debug, Serialize)]
pub struct ResultRow {
    pub label: String,
    /// Episode order (seed-major), parallel to the shared episode list.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl ResultRow {
    pub fn new(label: String, accuracies: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&accuracies);
        ResultRow {
            label,
            accuracies,
            mean,
            std,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn row(&self, label: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Everything a finished plan produces besides files on disk.
pub struct PlanOutcome {
    pub table: ResultTable,
    /// Digest of the shared episode list — the paired-design witness.
    pub episodes_digest: String,
    pub total_outcomes: usize,
}

// ===== plan execution =====

/// Artifacts a plan runs against, loaded once by the caller.
pub struct PlanInputs {
    pub checkpoint: Checkpoint,
    /// Untrained-token counterpart, needed only for v1 rows.
    pub checkpoint_v1: Option<Checkpoint>,
    pub target: AdaptTarget,
}

impl PlanInputs {
    fn checkpoint_for(&self, variant: Variant) -> Result<&Checkpoint> {
        if !variant.wants_untrained_tokens() {
            return Ok(&self.checkpoint);
        }
        let ckpt = self.checkpoint_v1.as_ref().ok_or_else(|| {
            Error::Config("variant v1 requires an untrained-token checkpoint".into())
        })?;
        if ckpt.hyper.structure_tokens_trained {
            return Err(Error::Config(
                "the v1 checkpoint was pre-trained WITH structure tokens; \
                 re-run pretrain with --no-structure-tokens"
                    .into(),
            ));
        }
        Ok(ckpt)
    }

    fn adapt_config(&self, plan: &BenchmarkPlan, variant: Variant) -> AdaptConfig {
        AdaptConfig {
            variant,
            tune_steps: plan.tune_steps,
            tune_lr: plan.tune_lr,
            beta: plan.beta,
            ego_radius: plan.ego_radius,
            alpha_override: None,
        }
    }
}

/// Runs the whole plan: one row per variant, then one full-variant row per
/// α and β grid point, all over one shared episode list.
pub fn run_plan(plan: &BenchmarkPlan, inputs: &PlanInputs) -> Result<PlanOutcome> {
    plan.validate()?;
    let target_name = inputs.target.bundle.domain_name.clone();
    check_cross_domain(&inputs.checkpoint, &target_name)?;
    if let Some(c1) = &inputs.checkpoint_v1 {
        check_cross_domain(c1, &target_name)?;
    }

    let kind = TaskKind::parse(&plan.task)?;
    let episodes = make_episodes(
        &inputs.target.bundle,
        kind,
        plan.shots,
        plan.episodes,
        plan.seeds,
        plan.query_cap,
        plan.plan_seed,
    )?;

    let mut rows = Vec::new();
    for vs in &plan.variants {
        let variant = Variant::parse(vs)?;
        let ckpt = inputs.checkpoint_for(variant)?;
        let config = inputs.adapt_config(plan, variant);
        let accuracies = run_episodes(&inputs.target, ckpt, &episodes, &config)?;
        rows.push(ResultRow::new(format!("variant={}", variant.as_str()), accuracies));
    }
    for &alpha in &plan.alpha_grid {
        let mut config = inputs.adapt_config(plan, Variant::Full);
        config.alpha_override = Some(alpha);
        let accuracies = run_episodes(&inputs.target, &inputs.checkpoint, &episodes, &config)?;
        rows.push(ResultRow::new(format!("alpha={alpha}"), accuracies));
    }
    for &beta in &plan.beta_grid {
        let mut config = inputs.adapt_config(plan, Variant::Full);
        config.beta = beta;
        let accuracies = run_episodes(&inputs.target, &inputs.checkpoint, &episodes, &config)?;
        rows.push(ResultRow::new(format!("beta={beta}"), accuracies));
    }

    Ok(PlanOutcome {
        table: ResultTable { rows },
        episodes_digest: episode_digest(&episodes),
        total_outcomes: episodes.len(),
    })
}

/// Convenience: the plan rewritten to evaluate every variant (the model
/// ablation matrix) on shared episodes; grids are dropped.
pub fn ablation_matrix(plan: &BenchmarkPlan, inputs: &PlanInputs) -> Result<PlanOutcome> {
    let mut p = plan.clone();
    p.variants = Variant::all().iter().map(|v| v.as_str().to_string()).collect();
    p.alpha_grid.clear();
    p.beta_grid.clear();
    run_plan(&p, inputs)
}

/// Convenience: the plan rewritten to sweep only its α/β grids around the
/// full model.
pub fn sensitivity_sweep(plan: &BenchmarkPlan, inputs: &PlanInputs) -> Result<PlanOutcome> {
    let mut p = plan.clone();
    p.variants = vec!["full".into()];
    if p.alpha_grid.is_empty() && p.beta_grid.is_empty() {
        return Err(Error::Config("sensitivity sweep needs a non-empty alpha or beta grid".into()));
    }
    run_plan(&p, inputs)
}

// ===== output rendering =====

/// Raw per-episode accuracies, one line per (config row, episode).
pub fn render_results_tsv(plan: &BenchmarkPlan, outcome: &PlanOutcome) -> String {
    let mut out = String::from("config\tseed\tepisode\taccuracy\n");
    for row in &outcome.table.rows {
        for (i, acc) in row.accuracies.iter().enumerate() {
            let seed = i / plan.episodes;
            let episode = i % plan.episodes;
            out.push_str(&format!("{}\t{seed}\t{episode}\t{acc}\n", row.label));
        }
    }
    out
}

/// Aggregated mean ± std per config row.
pub fn render_summary_tsv(outcome: &PlanOutcome) -> String {
    let mut out = String::from("config\tmean\tstd\toutcomes\n");
    for row in &outcome.table.rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            row.label,
            row.mean,
            row.std,
            row.accuracies.len()
        ));
    }
    out
}

#[derive(Serialize)]
struct RowSummary<'a> {
    label: &'a str,
    mean: f64,
    std: f64,
    outcomes: usize,
}

#[derive(Serialize)]
struct Report<'a> {
    version: &'static str,
    plan: &'a BenchmarkPlan,
    checkpoint_hash: String,
    checkpoint_v1_hash: Option<String>,
    source_domains: &'a [String],
    target_domain: &'a str,
    target_dal_cache_key: &'a str,
    layers: usize,
    hidden: usize,
    aligned_dim: usize,
    alpha: f64,
    tau: f64,
    feature_alignment: &'static str,
    episodes_digest: &'a str,
    total_outcomes: usize,
    summary: Vec<RowSummary<'a>>,
}

/// Full provenance record: the resolved plan, checkpoint hashes, encoder
/// hyperparameters, and per-row aggregates.
pub fn render_report_json(
    plan: &BenchmarkPlan,
    inputs: &PlanInputs,
    outcome: &PlanOutcome,
) -> Result<String> {
    let report = Report {
        version: env!("CARGO_PKG_VERSION"),
        plan,
        checkpoint_hash: inputs.checkpoint.content_hash(),
        checkpoint_v1_hash: inputs.checkpoint_v1.as_ref().map(|c| c.content_hash()),
        source_domains: &inputs.checkpoint.hyper.domains,
        target_domain: &inputs.target.bundle.domain_name,
        target_dal_cache_key: &inputs.target.dal_cache_key,
        layers: inputs.checkpoint.hyper.layers,
        hidden: inputs.checkpoint.hyper.hidden,
        aligned_dim: inputs.checkpoint.hyper.aligned_dim,
        alpha: inputs.checkpoint.hyper.alpha,
        tau: inputs.checkpoint.hyper.tau,
        feature_alignment: FEATURE_ALIGNMENT_DESC,
        episodes_digest: &outcome.episodes_digest,
        total_outcomes: outcome.total_outcomes,
        summary: outcome
            .table
            .rows
            .iter()
            .map(|r| RowSummary {
                label: &r.label,
                mean: r.mean,
                std: r.std,
                outcomes: r.accuracies.len(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))
}

/// Writes `results.tsv`, `summary.tsv`, and `report.json` into `dir`.
pub fn write_outputs(
    dir: &Path,
    plan: &BenchmarkPlan,
    inputs: &PlanInputs,
    outcome: &PlanOutcome,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let results = render_results_tsv(plan, outcome);
    let summary = render_summary_tsv(outcome);
    let report = render_report_json(plan, inputs, outcome)?;
    for (name, text) in [
        ("results.tsv", results),
        ("summary.tsv", summary),
        ("report.json", report),
    ] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

// ===== tests =====
