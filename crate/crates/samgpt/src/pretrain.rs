//! Multi-domain contrastive pre-training.
//!
//! Every step samples a batch of ego-subgraphs from each source domain,
//! embeds each anchor subgraph and two edge-drop augmentations of it through
//! the fused encoder (feature path + α · structure-token path), and
//! minimizes a contrastive objective: an anchor should be closer to its own
//! augmentations than to the augmentations of every other anchor in the
//! batch (across all domains).
//!
//! Trainable state: encoder weights Θ, per-domain structure tokens T, and
//! per-domain feature tokens Ψ. Structure tokens can be excluded from the
//! optimizer (`train_structure_tokens = false`), in which case they stay
//! exactly all-ones and the checkpoint records that fact.
//!
//! Determinism: all sampling draws from RNG streams keyed by
//! (seed, step, domain, slot), so results are independent of scheduling and
//! identical seeds produce bit-identical checkpoints.

use std::path::PathBuf;

use rand::seq::index::sample as index_sample;
use rand::Rng;

use crate::align::{aligned_features_cached, apply_fal, FeatureTokens};
use crate::encoder::{
    encode, encode_feature_path, fuse, graph_operator, readout, Checkpoint, CheckpointHyper,
    EncoderState, GraphOperator, StructureTokens, DEFAULT_HIDDEN, DEFAULT_LAYERS,
};
use crate::error::{Error, Result};
use crate::graphstore::{ego_network, GraphBundle};
use crate::seeding::derive_rng;
use crate::tensor::{Adam, Tape, Tensor, Var};

// rng stream tags
const TAG_INIT: u64 = 1;
const TAG_CENTERS: u64 = 2;
const TAG_AUGMENT: u64 = 3;

#[derive(Clone, Debug, serde::Serialize)]
pub struct PretrainConfig {
    /// Weight of the structure-token path in the fused embedding.
    pub alpha: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Fraction of undirected edges removed per augmentation.
    pub edge_drop_ratio: f64,
    /// Anchor subgraphs sampled from each domain per step.
    pub subgraphs_per_domain: usize,
    /// Ego-network radius for anchor subgraphs.
    pub subgraph_radius: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub layers: usize,
    pub hidden: usize,
    pub aligned_dim: usize,
    /// False realizes the token-free ablation: tokens stay all-ones.
    pub train_structure_tokens: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            alpha: 1.0,
            tau: 0.5,
            edge_drop_ratio: 0.2,
            subgraphs_per_domain: 4,
            subgraph_radius: 2,
            steps: 100,
            learning_rate: 1e-3,
            seed: 0,
            layers: DEFAULT_LAYERS,
            hidden: DEFAULT_HIDDEN,
            aligned_dim: crate::align::DEFAULT_ALIGNED_DIM,
            train_structure_tokens: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.edge_drop_ratio) {
            return Err(Error::Config(format!(
                "edge drop ratio must be in [0, 1), got {}",
                self.edge_drop_ratio
            )));
        }
        if self.subgraphs_per_domain < 1 {
            return Err(Error::Config("need at least one subgraph per domain".into()));
        }
        if self.subgraph_radius < 1 {
            return Err(Error::Config("subgraph radius must be at least 1".into()));
        }
        Ok(())
    }
}

/// One source domain: the loaded bundle plus (optionally) its directory so
/// dimension-aligned features can be cached next to the data.
pub struct SourceDomain {
    pub bundle: GraphBundle,
    pub dir: Option<PathBuf>,
}

// ===== batch construction =====

/// Ego-networks around uniformly sampled centers; centers are drawn without
/// replacement while the graph has enough nodes, then with replacement.
pub fn sample_subgraphs<R: Rng>(
    g: &GraphBundle,
    count: usize,
    radius: usize,
    rng: &mut R,
) -> Vec<GraphBundle> {
    assert!(count >= 1, "need at least one subgraph");
    let n = g.num_nodes();
    let mut centers: Vec<usize> = if count <= n {
        index_sample(rng, n, count).into_vec()
    } else {
        let mut all = index_sample(rng, n, n).into_vec();
        all.extend((n..count).map(|_| rng.gen_range(0..n)));
        all
    };
    centers.truncate(count);
    centers.iter().map(|&c| ego_network(g, c, radius)).collect()
}

/// Removes ⌊ratio · E⌋ undirected edges uniformly without replacement;
/// nodes, features, and labels are untouched.
pub fn augment_edge_drop<R: Rng>(g: &GraphBundle, ratio: f64, rng: &mut R) -> GraphBundle {
    assert!((0.0..1.0).contains(&ratio), "drop ratio must be in [0, 1)");
    let pairs = g.undirected_pairs();
    let drop = (ratio * pairs.len() as f64).floor() as usize;
    if drop == 0 {
        return g.clone();
    }
    let mut dropped = vec![false; pairs.len()];
    for idx in index_sample(rng, pairs.len(), drop) {
        dropped[idx] = true;
    }
    let kept: Vec<(usize, usize)> = pairs
        .into_iter()
        .zip(&dropped)
        .filter(|(_, &d)| !d)
        .map(|(e, _)| e)
        .collect();
    GraphBundle::from_edges(
        g.domain_name.clone(),
        g.num_nodes(),
        &kept,
        g.features.clone(),
        g.labels.clone(),
        g.num_classes,
    )
    .expect("dropping edges preserves validity")
}

// ===== fused embedding =====

/// All trainable parameters mounted on one step's tape.
pub struct MountedParams {
    pub weights: Vec<Var>,
    /// [domain][layer]
    pub structure_tokens: Vec<Vec<Var>>,
    /// [domain]
    pub feature_tokens: Vec<Var>,
}

pub fn mount_params(
    tape: &mut Tape,
    encoder: &EncoderState,
    s_tokens: &StructureTokens,
    f_tokens: &FeatureTokens,
    train_weights: bool,
    train_structure_tokens: bool,
) -> MountedParams {
    let weights = encoder.mount(tape, train_weights);
    let structure_tokens = (0..s_tokens.num_domains())
        .map(|i| s_tokens.mount_domain(tape, i, train_structure_tokens))
        .collect();
    let feature_tokens = f_tokens
        .tokens()
        .iter()
        .map(|t| {
            if train_weights {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    MountedParams {
        weights,
        structure_tokens,
        feature_tokens,
    }
}

/// Graph embedding of one (sub)graph from domain `domain`:
/// readout( feature-path(X̃ ⊙ fᵢ)  +  α · token-path(X̃) ).
pub fn embed_fused(
    tape: &mut Tape,
    g: &GraphBundle,
    op: &GraphOperator,
    mounted: &MountedParams,
    domain: usize,
    alpha: f64,
) -> Var {
    assert!(
        domain < mounted.feature_tokens.len(),
        "domain index {domain} out of roster ({} domains)",
        mounted.feature_tokens.len()
    );
    let x = tape.constant(g.features.clone());
    let x_fal = apply_fal(tape, x, mounted.feature_tokens[domain]);
    let h_fal = encode_feature_path(tape, op, x_fal, &mounted.weights);
    let h_sal = encode(tape, op, x, &mounted.weights, Some(&mounted.structure_tokens[domain]));
    let h_al = fuse(tape, h_fal, h_sal, alpha);
    readout(tape, h_al)
}

// ===== contrastive objective =====

/// Embeddings of one step's batch: every anchor has exactly two augmented
/// views. Positives of an anchor are its own views; negatives are every
/// other anchor's views, across domains.
pub struct ContrastiveBatch {
    pub anchors: Vec<Var>,
    pub views: Vec<[Var; 2]>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Sum over anchors o of  −ln( Σ_{a∈Pos_o} e^{cos(h_a,h_o)/τ} /
/// Σ_{b∈Neg_o} e^{cos(h_b,h_o)/τ} ). The training loop divides by the
/// anchor count afterwards; that normalization does not move the minimizer.
pub fn contrastive_loss(tape: &mut Tape, batch: &ContrastiveBatch, tau: f64) -> Result<Var> {
    assert_eq!(batch.anchors.len(), batch.views.len(), "one view pair per anchor");
    if batch.len() < 2 {
        return Err(Error::Config(
            "contrastive batch needs at least two anchors so every anchor has negatives".into(),
        ));
    }
    let inv_tau = 1.0 / tau;
    let mut total: Option<Var> = None;
    for (o, &anchor) in batch.anchors.iter().enumerate() {
        let mut pos_sum: Option<Var> = None;
        let mut neg_sum: Option<Var> = None;
        for (p, views) in batch.views.iter().enumerate() {
            let slot = if p == o { &mut pos_sum } else { &mut neg_sum };
            for &view in views {
                let cos = tape.cosine_sim(view, anchor)?;
                let scaled = tape.scale(cos, inv_tau);
                let term = tape.exp(scaled);
                *slot = Some(match *slot {
                    Some(acc) => tape.add(acc, term),
                    None => term,
                });
            }
        }
        let pos = pos_sum.expect("two positives per anchor");
        let neg = neg_sum.expect("batch has at least one other anchor");
        let ln_pos = tape.ln(pos)?;
        let ln_neg = tape.ln(neg)?;
        let neg_ln_pos = tape.scale(ln_pos, -1.0);
        let anchor_loss = tape.add(ln_neg, neg_ln_pos);
        total = Some(match total {
            Some(acc) => tape.add(acc, anchor_loss),
            None => anchor_loss,
        });
    }
    Ok(total.expect("non-empty batch"))
}

// ===== training loop =====

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    /// Per-step training loss (already normalized by anchor count).
    pub loss_log: Vec<f64>,
}

/// Pre-trains over the given source domains and returns the checkpoint plus
/// the loss log. Domain order defines roster order — it is part of the
/// artifact, because downstream mixture coefficients index it.
pub fn pretrain_run(sources: &[SourceDomain], config: &PretrainConfig) -> Result<PretrainOutcome> {
    config.validate()?;
    if sources.is_empty() {
        return Err(Error::Config("pre-training needs at least one source domain".into()));
    }
    let names: Vec<String> = sources.iter().map(|s| s.bundle.domain_name.clone()).collect();
    for (i, name) in names.iter().enumerate() {
        if names[..i].contains(name) {
            return Err(Error::Config(format!("duplicate source domain '{name}' in roster")));
        }
    }

    // dimension-align every domain once, caching next to the data
    let mut aligned = Vec::with_capacity(sources.len());
    let mut cache_keys = Vec::with_capacity(sources.len());
    for s in sources {
        let (feats, key) =
            aligned_features_cached(s.dir.as_deref(), &s.bundle.features, config.aligned_dim)?;
        aligned.push(s.bundle.with_features(feats));
        cache_keys.push(key);
    }

    let k = sources.len();
    let mut init_rng = derive_rng(config.seed, &[TAG_INIT]);
    let mut encoder_state =
        EncoderState::init(config.aligned_dim, config.hidden, config.layers, &mut init_rng);
    let layer_dims = encoder_state.layer_input_dims();
    let mut s_tokens = StructureTokens::init(k, &layer_dims);
    let mut f_tokens = FeatureTokens::init(k, config.aligned_dim);

    let mut optimizer = Adam::new(config.learning_rate);
    let mut loss_log = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let mut tape = Tape::new();
        let mounted = mount_params(
            &mut tape,
            &encoder_state,
            &s_tokens,
            &f_tokens,
            true,
            config.train_structure_tokens,
        );

        let mut batch = ContrastiveBatch {
            anchors: Vec::new(),
            views: Vec::new(),
        };
        for (d, domain) in aligned.iter().enumerate() {
            let mut center_rng = derive_rng(config.seed, &[TAG_CENTERS, step as u64, d as u64]);
            let anchors = sample_subgraphs(
                domain,
                config.subgraphs_per_domain,
                config.subgraph_radius,
                &mut center_rng,
            );
            for (slot, anchor_g) in anchors.into_iter().enumerate() {
                let anchor_op = graph_operator(&anchor_g);
                let anchor_emb =
                    embed_fused(&mut tape, &anchor_g, &anchor_op, &mounted, d, config.alpha);
                let mut view_embs = Vec::with_capacity(2);
                for aug_idx in 0..2u64 {
                    let mut aug_rng = derive_rng(
                        config.seed,
                        &[TAG_AUGMENT, step as u64, d as u64, slot as u64, aug_idx],
                    );
                    let view = augment_edge_drop(&anchor_g, config.edge_drop_ratio, &mut aug_rng);
                    let view_op = graph_operator(&view);
                    view_embs.push(embed_fused(&mut tape, &view, &view_op, &mounted, d, config.alpha));
                }
                batch.anchors.push(anchor_emb);
                batch.views.push([view_embs[0], view_embs[1]]);
            }
        }

        let raw_loss = contrastive_loss(&mut tape, &batch, config.tau)?;
        let loss = tape.scale(raw_loss, 1.0 / batch.len() as f64);
        let loss_value = tape.value(loss).scalar();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                value: loss_value,
            });
        }
        tape.backward(loss)?;

        // parameter order: weights, structure tokens (when trained), feature
        // tokens — must be stable across steps because Adam keys moments by
        // position
        let mut grads = Vec::new();
        for &w in &mounted.weights {
            grads.push(tape.grad_or_zeros(w));
        }
        if config.train_structure_tokens {
            for domain_tokens in &mounted.structure_tokens {
                for &t in domain_tokens {
                    grads.push(tape.grad_or_zeros(t));
                }
            }
        }
        for &t in &mounted.feature_tokens {
            grads.push(tape.grad_or_zeros(t));
        }

        let mut params: Vec<&mut Tensor> = Vec::new();
        params.extend(encoder_state.weights_mut().iter_mut());
        if config.train_structure_tokens {
            params.extend(s_tokens.iter_mut());
        }
        params.extend(f_tokens.iter_mut());
        optimizer.step(&mut params, &grads);
        loss_log.push(loss_value);
    }

    let hyper = CheckpointHyper {
        layers: config.layers,
        hidden: config.hidden,
        aligned_dim: config.aligned_dim,
        alpha: config.alpha,
        tau: config.tau,
        domains: names,
        structure_tokens_trained: config.train_structure_tokens,
        seed: config.seed,
        steps: config.steps,
        learning_rate: config.learning_rate,
        edge_drop_ratio: config.edge_drop_ratio,
        subgraphs_per_domain: config.subgraphs_per_domain,
        subgraph_radius: config.subgraph_radius,
        dal_cache_keys: cache_keys,
    };
    Ok(PretrainOutcome {
        checkpoint: Checkpoint {
            encoder: encoder_state,
            structure_tokens: s_tokens,
            feature_tokens: f_tokens,
            hyper,
        },
        loss_log,
    })
}

// ===== tests =====
