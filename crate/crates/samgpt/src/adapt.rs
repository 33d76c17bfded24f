//! Cross-domain adaptation of a frozen pre-trained checkpoint to an unseen
//! target domain.
//!
//! Nothing from pre-training changes here: encoder weights, structure
//! tokens, and feature tokens are mounted read-only. Each few-shot episode
//! tunes three small parameter groups of its own —
//!
//! * holistic prompts: one vector per layer, modulating neighbor
//!   aggregation exactly like a structure token did during pre-training;
//! * specific-prompt coefficients Λ: an L×K matrix mixing the frozen
//!   per-domain structure tokens into one prompt per layer;
//! * a feature adapter: a mixture μ over the frozen per-domain feature
//!   tokens plus a free vector g.
//!
//! Tuning minimizes a cosine prototype loss over the support set; queries
//! are then classified by nearest prototype under the final tuned state.

use std::path::Path;

use crate::align::{aligned_features_cached, apply_fad, AdapterVars, FeatureAdapter};
use crate::encoder::{
    encode, encode_feature_path, fuse, graph_operator, readout, Checkpoint, GraphOperator,
};
use crate::error::{Error, Result};
use crate::graphstore::{ego_network, GraphBundle};
use crate::tensor::{Adam, Tape, Tensor, Var};

pub const DEFAULT_TUNE_STEPS: usize = 100;
pub const DEFAULT_TUNE_LR: f64 = 1e-2;
pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_EGO_RADIUS: usize = 2;

// ===== task and variant vocabulary =====

/// What a single episode classifies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// Individual nodes of the target graph.
    Node,
    /// Ego-networks, each labeled by its center node.
    Graph,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "node" => Ok(TaskKind::Node),
            "graph" => Ok(TaskKind::Graph),
            other => Err(Error::Config(format!(
                "unknown task kind '{other}' (expected node|graph)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Node => "node",
            TaskKind::Graph => "graph",
        }
    }
}

/// Ablation variants: which adaptation paths are active.
///
/// | variant | structure tokens trained | holistic tuned | specific path |
/// |---------|--------------------------|----------------|---------------|
/// | `v1`    | no (untrained ckpt)      | no             | no            |
/// | `v2`    | yes                      | no             | yes           |
/// | `v3`    | yes                      | no             | no            |
/// | `v4`    | yes                      | yes            | no            |
/// | `full`  | yes                      | yes            | yes           |
///
/// "Holistic not tuned" keeps the holistic path in the graph with its
/// prompts frozen at all-ones (a plain encoding); "no specific path" omits
/// that path entirely. The feature adapter is tuned in every variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    V1,
    V2,
    V3,
    V4,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "v1" => Ok(Variant::V1),
            "v2" => Ok(Variant::V2),
            "v3" => Ok(Variant::V3),
            "v4" => Ok(Variant::V4),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected full|v1|v2|v3|v4)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
            Variant::V4 => "v4",
        }
    }

    /// Holistic prompts are tuned (otherwise they stay frozen at all-ones).
    pub fn tunes_holistic(self) -> bool {
        matches!(self, Variant::Full | Variant::V4)
    }

    /// The specific-prompt path (frozen-token mixture) participates.
    pub fn uses_specific(self) -> bool {
        matches!(self, Variant::Full | Variant::V2)
    }

    /// This variant evaluates a checkpoint whose structure tokens were left
    /// untrained during pre-training.
    pub fn wants_untrained_tokens(self) -> bool {
        matches!(self, Variant::V1)
    }

    /// All variants in ablation-table order.
    pub fn all() -> [Variant; 5] {
        [Variant::V1, Variant::V2, Variant::V3, Variant::V4, Variant::Full]
    }
}

// ===== episodes =====

/// One m-shot task: a class-balanced labeled support set plus a query set
/// whose ground truth is used only for scoring.
#[derive(Clone, Debug)]
pub struct TaskEpisode {
    pub kind: TaskKind,
    pub shots: usize,
    /// (node index, class); exactly `shots` entries per class.
    pub support: Vec<(usize, usize)>,
    /// (node index, true class); disjoint from the support set.
    pub queries: Vec<(usize, usize)>,
    pub num_classes: usize,
    /// Seed the episode was drawn with; recorded for reproducibility.
    pub seed: u64,
}

/// Knobs for one episode's prompt tuning.
#[derive(Clone, Debug)]
pub struct AdaptConfig {
    pub variant: Variant,
    pub tune_steps: usize,
    pub tune_lr: f64,
    /// Holistic/specific balance in `H_hol + β·H_spe`.
    pub beta: f64,
    /// Hop radius when instances are ego-networks.
    pub ego_radius: usize,
    /// Overrides the checkpoint's feature/structure fusion coefficient
    /// (sensitivity sweeps only); `None` carries the trained value over.
    pub alpha_override: Option<f64>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            variant: Variant::Full,
            tune_steps: DEFAULT_TUNE_STEPS,
            tune_lr: DEFAULT_TUNE_LR,
            beta: DEFAULT_BETA,
            ego_radius: DEFAULT_EGO_RADIUS,
            alpha_override: None,
        }
    }
}

// ===== target preparation =====

/// The target domain with dimension-aligned features and its full-graph
/// operator, shared read-only by all episodes.
pub struct AdaptTarget {
    /// Target bundle whose `features` are already dimension-aligned.
    pub bundle: GraphBundle,
    pub operator: GraphOperator,
    /// Dimension-alignment cache key, echoed in reports.
    pub dal_cache_key: String,
}

impl AdaptTarget {
    /// Aligns the raw target features to `aligned_dim` (cached under the
    /// bundle directory when one is given) and precomputes the operator.
    pub fn prepare(bundle: GraphBundle, dir: Option<&Path>, aligned_dim: usize) -> Result<Self> {
        let (aligned, dal_cache_key) =
            aligned_features_cached(dir, &bundle.features, aligned_dim)?;
        let bundle = bundle.with_features(aligned);
        let operator = graph_operator(&bundle);
        Ok(AdaptTarget {
            bundle,
            operator,
            dal_cache_key,
        })
    }
}

// ===== prompt state =====

/// Everything an episode tunes. The checkpoint itself stays untouched.
#[derive(Clone, Debug)]
pub struct PromptState {
    /// One holistic prompt per layer, shaped like that layer's input rows.
    pub holistic: Vec<Tensor>,
    /// L×K mixture coefficients over the frozen per-domain structure tokens.
    pub lambda: Tensor,
    /// Downstream feature adapter (μ over frozen feature tokens, plus g).
    pub adapter: FeatureAdapter,
    /// Holistic/specific balance.
    pub beta: f64,
    /// Feature/structure fusion coefficient, carried over from pre-training
    /// unless the config overrides it.
    pub alpha: f64,
}

impl PromptState {
    /// Neutral start: all-ones holistic prompts (a plain encoding), uniform
    /// 1/K mixtures, and an adapter averaging the frozen feature tokens.
    pub fn init(ckpt: &Checkpoint, config: &AdaptConfig) -> Self {
        let k = ckpt.hyper.domains.len();
        PromptState {
            holistic: ckpt
                .encoder
                .layer_input_dims()
                .iter()
                .map(|&d| Tensor::ones(1, d))
                .collect(),
            lambda: Tensor::filled(ckpt.hyper.layers, k, 1.0 / k as f64),
            adapter: FeatureAdapter::init(k, ckpt.hyper.aligned_dim),
            beta: config.beta,
            alpha: config.alpha_override.unwrap_or(ckpt.hyper.alpha),
        }
    }
}

// ===== tape mounting =====

/// One tape's view of the adaptation graph: frozen checkpoint pieces as
/// constants, prompt parameters as leaves (or constants where the variant
/// freezes them).
pub struct AdaptationMounts {
    pub weights: Vec<Var>,
    pub holistic: Vec<Var>,
    /// Per-layer K×d_l stacks of the frozen structure tokens; present only
    /// when the specific path is active.
    pub token_stacks: Option<Vec<Var>>,
    pub lambda: Option<Var>,
    pub adapter: AdapterVars,
    pub beta: f64,
    pub alpha: f64,
}

/// Mounts the frozen checkpoint and the current prompt state onto a tape.
pub fn mount_adaptation(
    tape: &mut Tape,
    ckpt: &Checkpoint,
    prompts: &PromptState,
    variant: Variant,
) -> AdaptationMounts {
    let weights = ckpt.encoder.mount(tape, false);
    let holistic = prompts
        .holistic
        .iter()
        .map(|p| {
            if variant.tunes_holistic() {
                tape.leaf(p.clone())
            } else {
                tape.constant(p.clone())
            }
        })
        .collect();
    let (token_stacks, lambda) = if variant.uses_specific() {
        assert_eq!(
            prompts.lambda.cols(),
            ckpt.hyper.domains.len(),
            "mixture width must match the checkpoint's source roster"
        );
        let stacks = (0..ckpt.hyper.layers)
            .map(|l| tape.constant(ckpt.structure_tokens.stacked_layer(l)))
            .collect();
        (Some(stacks), Some(tape.leaf(prompts.lambda.clone())))
    } else {
        (None, None)
    };
    let adapter = prompts.adapter.mount(tape, &ckpt.feature_tokens, true);
    AdaptationMounts {
        weights,
        holistic,
        token_stacks,
        lambda,
        adapter,
        beta: prompts.beta,
        alpha: prompts.alpha,
    }
}

/// Specific prompt for one layer: the Λ row for that layer times the frozen
/// K×d_l token stack, i.e. Σ_i λ_i·t_i. Differentiable in Λ only.
pub fn specific_prompt(tape: &mut Tape, lambda: Var, token_stack: Var, layer: usize) -> Var {
    let row = tape.select_row(lambda, layer);
    tape.matmul(row, token_stack)
}

// ===== adapted embedding =====

/// Fused adapted embedding matrix of one graph under the current prompts:
///
/// ```text
/// H_ad = H_fad + α · (H_hol + β · H_spe)
/// ```
///
/// where the feature path runs on adapter-scaled features and the two
/// structure paths run on the unscaled features with holistic / specific
/// prompts as aggregation modulators. Disabled paths are not merely zeroed —
/// they never enter the tape, so the fused result is bit-identical to the
/// reduced expression.
pub fn embed_adapted(
    tape: &mut Tape,
    op: &GraphOperator,
    x_aligned: &Tensor,
    mounts: &AdaptationMounts,
) -> Var {
    let x = tape.constant(x_aligned.clone());
    let x_fad = apply_fad(tape, x, &mounts.adapter);
    let h_fad = encode_feature_path(tape, op, x_fad, &mounts.weights);
    let h_hol = encode(tape, op, x, &mounts.weights, Some(&mounts.holistic));
    let h_sad = match (&mounts.token_stacks, mounts.lambda) {
        (Some(stacks), Some(lambda)) => {
            let mods: Vec<Var> = (0..stacks.len())
                .map(|l| specific_prompt(tape, lambda, stacks[l], l))
                .collect();
            let h_spe = encode(tape, op, x, &mounts.weights, Some(&mods));
            fuse(tape, h_hol, h_spe, mounts.beta)
        }
        _ => h_hol,
    };
    fuse(tape, h_fad, h_sad, mounts.alpha)
}

// ===== per-episode instance materials =====

/// Fixed graph-side inputs of one episode. Node episodes embed the full
/// target graph and take rows; graph episodes embed one ego-network per
/// instance. Operators are built once here and reused every tuning step.
pub struct EpisodeMaterials {
    kind: TaskKind,
    /// (operator, aligned features) per instance — support first, then
    /// queries. Empty for node episodes.
    per_instance: Vec<(GraphOperator, Tensor)>,
}

pub fn prepare_materials(
    target: &AdaptTarget,
    episode: &TaskEpisode,
    ego_radius: usize,
) -> EpisodeMaterials {
    let per_instance = match episode.kind {
        TaskKind::Node => Vec::new(),
        TaskKind::Graph => episode
            .support
            .iter()
            .chain(episode.queries.iter())
            .map(|&(center, _)| {
                let ego = ego_network(&target.bundle, center, ego_radius);
                let op = graph_operator(&ego);
                (op, ego.features)
            })
            .collect(),
    };
    EpisodeMaterials {
        kind: episode.kind,
        per_instance,
    }
}

/// Embeds the episode's instances under the mounted prompt state, support
/// first and queries after (when requested). One 1×hidden Var per instance.
pub fn embed_instances(
    tape: &mut Tape,
    target: &AdaptTarget,
    materials: &EpisodeMaterials,
    episode: &TaskEpisode,
    mounts: &AdaptationMounts,
    include_queries: bool,
) -> Vec<Var> {
    match materials.kind {
        TaskKind::Node => {
            let h_all = embed_adapted(tape, &target.operator, &target.bundle.features, mounts);
            let picked = episode.support.iter().chain(if include_queries {
                episode.queries.iter()
            } else {
                [].iter()
            });
            picked.map(|&(v, _)| tape.select_row(h_all, v)).collect()
        }
        TaskKind::Graph => {
            let count = if include_queries {
                materials.per_instance.len()
            } else {
                episode.support.len()
            };
            materials.per_instance[..count]
                .iter()
                .map(|(op, x)| {
                    let h = embed_adapted(tape, op, x, mounts);
                    readout(tape, h)
                })
                .collect()
        }
    }
}

// ===== prototypes, loss, prediction =====

/// Per-class arithmetic means of the support embeddings, in class order.
/// Built on-tape so the loss differentiates through them; rebuilt every
/// tuning step from the current embeddings.
pub fn build_prototypes(
    tape: &mut Tape,
    support_embeddings: &[Var],
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<Var>> {
    assert_eq!(
        support_embeddings.len(),
        labels.len(),
        "one label per support embedding"
    );
    let mut members: Vec<Vec<Var>> = vec![Vec::new(); num_classes];
    for (&e, &y) in support_embeddings.iter().zip(labels) {
        assert!(y < num_classes, "label {y} out of class range {num_classes}");
        members[y].push(e);
    }
    members
        .iter()
        .enumerate()
        .map(|(class, m)| {
            if m.is_empty() {
                return Err(Error::ClassTooSmall {
                    class,
                    have: 0,
                    need: 1,
                });
            }
            let mut acc = m[0];
            for &e in &m[1..] {
                acc = tape.add(acc, e);
            }
            // a single member already is its own mean; skipping the scale
            // keeps the 1-shot prototype bit-identical to the embedding
            Ok(if m.len() == 1 {
                acc
            } else {
                tape.scale(acc, 1.0 / m.len() as f64)
            })
        })
        .collect()
}

/// Cosine prototype loss over the support set:
///
/// ```text
/// −Σ_{(x,y)} ln[ exp(cos(h_x, p_y)/τ) / Σ_{y'} exp(cos(h_x, p_{y'})/τ) ]
/// ```
///
/// Plain sum over instances; callers decide whether to normalize.
pub fn downstream_loss(
    tape: &mut Tape,
    support_embeddings: &[Var],
    labels: &[usize],
    prototypes: &[Var],
    tau: f64,
) -> Result<Var> {
    assert!(tau > 0.0, "temperature must be positive");
    assert!(!support_embeddings.is_empty(), "empty support set");
    assert_eq!(
        support_embeddings.len(),
        labels.len(),
        "one label per support embedding"
    );
    let mut total: Option<Var> = None;
    for (&h, &y) in support_embeddings.iter().zip(labels) {
        assert!(y < prototypes.len(), "label {y} has no prototype");
        let exps: Vec<Var> = prototypes
            .iter()
            .map(|&p| -> Result<Var> {
                let c = tape.cosine_sim(h, p)?;
                let s = tape.scale(c, 1.0 / tau);
                Ok(tape.exp(s))
            })
            .collect::<Result<_>>()?;
        let mut den = exps[0];
        for &e in &exps[1..] {
            den = tape.add(den, e);
        }
        // −ln(num/den) = ln(den) − ln(num); both arguments are sums of
        // exponentials of bounded similarities, so strictly positive
        let ln_den = tape.ln(den)?;
        let ln_num = tape.ln(exps[y])?;
        let neg_num = tape.scale(ln_num, -1.0);
        let term = tape.add(ln_den, neg_num);
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    Ok(total.expect("support set is non-empty"))
}

/// Untracked cosine similarity between two equally-shaped row vectors.
fn cosine_value(a: &Tensor, b: &Tensor) -> Result<f64> {
    assert_eq!(a.shape(), b.shape(), "cosine operands must match");
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Nearest-prototype classification by cosine similarity; ties go to the
/// lowest class index. Evaluation only — nothing is tracked on a tape.
pub fn predict(query: &Tensor, prototypes: &[Tensor]) -> Result<usize> {
    assert!(!prototypes.is_empty(), "no prototypes to compare against");
    let mut best = 0usize;
    let mut best_sim = f64::NEG_INFINITY;
    for (y, p) in prototypes.iter().enumerate() {
        let sim = cosine_value(query, p)?;
        if sim > best_sim {
            best = y;
            best_sim = sim;
        }
    }
    Ok(best)
}

// ===== tuning loop =====

/// Result of tuning one episode's prompts.
pub struct TunedPrompts {
    pub prompts: PromptState,
    /// Mean support loss after each step's forward pass.
    pub loss_log: Vec<f64>,
}

/// Gradient loop over the support set, updating only the parameter groups
/// the variant allows: holistic prompts (full, v4), Λ (full, v2), and the
/// feature adapter (always). The checkpoint is read-only throughout.
pub fn prompt_tune(
    target: &AdaptTarget,
    ckpt: &Checkpoint,
    episode: &TaskEpisode,
    materials: &EpisodeMaterials,
    config: &AdaptConfig,
) -> Result<TunedPrompts> {
    let mut prompts = PromptState::init(ckpt, config);
    let support_labels: Vec<usize> = episode.support.iter().map(|&(_, y)| y).collect();
    let mut optimizer = Adam::new(config.tune_lr);
    let mut loss_log = Vec::with_capacity(config.tune_steps);

    for step in 0..config.tune_steps {
        let mut tape = Tape::new();
        let mounts = mount_adaptation(&mut tape, ckpt, &prompts, config.variant);
        let support = embed_instances(&mut tape, target, materials, episode, &mounts, false);
        let protos = build_prototypes(&mut tape, &support, &support_labels, episode.num_classes)?;
        let raw = downstream_loss(&mut tape, &support, &support_labels, &protos, ckpt.hyper.tau)?;
        // mean over support instances keeps the step size shot-invariant
        let loss = tape.scale(raw, 1.0 / support.len() as f64);
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, value });
        }
        loss_log.push(value);
        tape.backward(loss)?;

        // gradients and parameters in one fixed order: holistic prompts
        // (when tuned), Λ (when present), then the adapter's μ and g
        let mut grads: Vec<Tensor> = Vec::new();
        if config.variant.tunes_holistic() {
            for &h in &mounts.holistic {
                grads.push(tape.grad_or_zeros(h));
            }
        }
        if let Some(lambda) = mounts.lambda {
            grads.push(tape.grad_or_zeros(lambda));
        }
        grads.push(tape.grad_or_zeros(mounts.adapter.mu));
        grads.push(tape.grad_or_zeros(mounts.adapter.g));

        let mut params: Vec<&mut Tensor> = Vec::new();
        if config.variant.tunes_holistic() {
            params.extend(prompts.holistic.iter_mut());
        }
        if config.variant.uses_specific() {
            params.push(&mut prompts.lambda);
        }
        params.push(&mut prompts.adapter.mu);
        params.push(&mut prompts.adapter.g);
        optimizer.step(&mut params, &grads);
    }

    Ok(TunedPrompts { prompts, loss_log })
}

// ===== episode driver =====

/// Accuracy and artifacts of one fully-run episode.
pub struct EpisodeOutcome {
    pub accuracy: f64,
    pub loss_log: Vec<f64>,
    pub prompts: PromptState,
}

/// Tunes prompts on the support set, then embeds support and queries under
/// the final tuned state and scores nearest-prototype predictions.
pub fn run_episode(
    target: &AdaptTarget,
    ckpt: &Checkpoint,
    episode: &TaskEpisode,
    config: &AdaptConfig,
) -> Result<EpisodeOutcome> {
    if episode.queries.is_empty() {
        return Err(Error::Config("episode has no queries to score".into()));
    }
    let materials = prepare_materials(target, episode, config.ego_radius);
    let tuned = prompt_tune(target, ckpt, episode, &materials, config)?;

    let mut tape = Tape::new();
    let mounts = mount_adaptation(&mut tape, ckpt, &tuned.prompts, config.variant);
    let all = embed_instances(&mut tape, target, &materials, episode, &mounts, true);
    let (support, queries) = all.split_at(episode.support.len());
    let support_labels: Vec<usize> = episode.support.iter().map(|&(_, y)| y).collect();
    let proto_vars = build_prototypes(&mut tape, support, &support_labels, episode.num_classes)?;
    let prototypes: Vec<Tensor> = proto_vars.iter().map(|&p| tape.value(p).clone()).collect();

    let mut correct = 0usize;
    for (&q, &(_, truth)) in queries.iter().zip(&episode.queries) {
        if predict(tape.value(q), &prototypes)? == truth {
            correct += 1;
        }
    }
    Ok(EpisodeOutcome {
        accuracy: correct as f64 / episode.queries.len() as f64,
        loss_log: tuned.loss_log,
        prompts: tuned.prompts,
    })
}

// ===== tests =====
