//! Independent oracles shared by the integration suites.
//!
//! Nothing in this module reuses the library's numerics. Dense forward
//! passes, both losses, the eigendecomposition, shortest paths — everything
//! is re-derived in the most naive formulation available: nested loops over
//! `Vec<Vec<f64>>`, textbook cyclic Jacobi rotations, literal queue-based
//! BFS. The production code and these oracles can only agree when both are
//! right, which is the whole point.

#![allow(dead_code)] // each test target uses its own subset

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rand::Rng;

use samgpt::adapt::{
    build_prototypes, downstream_loss, embed_instances, mount_adaptation, prepare_materials,
    AdaptConfig, AdaptTarget, PromptState, TaskEpisode, TaskKind, Variant,
};
use samgpt::align::FeatureTokens;
use samgpt::encoder::{
    graph_operator, Checkpoint, CheckpointHyper, EncoderState, GraphOperator, StructureTokens,
};
use samgpt::graphstore::{nodes_by_class, GraphBundle};
use samgpt::pretrain::{
    augment_edge_drop, contrastive_loss, embed_fused, mount_params, sample_subgraphs,
    ContrastiveBatch,
};
use samgpt::seeding::derive_rng;
use samgpt::tensor::{Tape, Tensor};

pub type Mat = Vec<Vec<f64>>;

// ===== data location =====

/// Root of the prepared dataset bundles, shared by all desk-scale tests.
pub fn data_dir() -> PathBuf {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    assert!(
        p.join("cora").join("meta.json").exists(),
        "dataset bundles not found under {} — run `python3 scripts/fetch_data.py` \
         from the repository root first",
        p.display()
    );
    p.canonicalize().expect("data directory resolves")
}

// ===== dense linear algebra =====

pub fn tensor_to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn mat_to_tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m)
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k) = (a.len(), a[0].len());
    assert_eq!(k, b.len(), "inner dimensions must agree");
    let p = b[0].len();
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for j in 0..p {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i][l] * b[l][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn relu_mat(a: &Mat) -> Mat {
    a.iter()
        .map(|row| row.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect())
        .collect()
}

pub fn mat_add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
        .collect()
}

/// Rows of `x` scaled elementwise by the broadcast row `m`.
pub fn row_scale(x: &Mat, m: &[f64]) -> Mat {
    x.iter()
        .map(|row| row.iter().zip(m).map(|(v, s)| v * s).collect())
        .collect()
}

pub fn mean_rows(x: &Mat) -> Vec<f64> {
    let n = x.len() as f64;
    let d = x[0].len();
    let mut out = vec![0.0; d];
    for row in x {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= n;
    }
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

// ===== dense graph operator and encoder recomputation =====

/// Dense normalized adjacency halves: the off-diagonal matrix with entries
/// 1/√((deg u + 1)(deg v + 1)) per edge, and the diagonal vector 1/(deg+1).
pub fn dense_operator(g: &GraphBundle) -> (Mat, Vec<f64>) {
    let n = g.num_nodes();
    let mut s_off = vec![vec![0.0; n]; n];
    for u in 0..n {
        for &v in g.neighbors(u) {
            s_off[u][v] = 1.0
                / (((g.degree(u) + 1) as f64).sqrt() * ((g.degree(v) + 1) as f64).sqrt());
        }
    }
    let s_diag = (0..n).map(|v| 1.0 / (g.degree(v) + 1) as f64).collect();
    (s_off, s_diag)
}

/// Dense layer-by-layer recomputation of the encoder: every layer aggregates
/// modulated neighbor messages plus the unmodulated self signal, multiplies
/// by the layer weight, and applies relu except on the last layer.
pub fn dense_encode(
    s_off: &Mat,
    s_diag: &[f64],
    x: &Mat,
    weights: &[Mat],
    modulators: Option<&[Vec<f64>]>,
) -> Mat {
    let last = weights.len() - 1;
    let mut h = x.clone();
    for (l, w) in weights.iter().enumerate() {
        let messages = match modulators {
            Some(mods) => row_scale(&h, &mods[l]),
            None => h.clone(),
        };
        let neighbor = matmul(s_off, &messages);
        let own: Mat = h
            .iter()
            .enumerate()
            .map(|(i, row)| row.iter().map(|&v| s_diag[i] * v).collect())
            .collect();
        let agg = mat_add(&neighbor, &own);
        let activated = if l < last { relu_mat(&agg) } else { agg };
        h = matmul(&activated, w);
    }
    h
}

// ===== straight-line loss re-evaluations =====

/// Contrastive objective, written exactly as its formula reads: for each
/// anchor, positives are its own two views and negatives are every other
/// anchor's views; the anchor term is −ln(Σ_pos e^{cos/τ} / Σ_neg e^{cos/τ})
/// and the result is the plain sum over anchors.
pub fn contrastive_oracle(anchors: &[Vec<f64>], views: &[[Vec<f64>; 2]], tau: f64) -> f64 {
    assert_eq!(anchors.len(), views.len());
    let mut total = 0.0;
    for (o, anchor) in anchors.iter().enumerate() {
        let mut pos = 0.0;
        let mut neg = 0.0;
        for (p, pair) in views.iter().enumerate() {
            for view in pair {
                let e = (cosine(view, anchor) / tau).exp();
                if p == o {
                    pos += e;
                } else {
                    neg += e;
                }
            }
        }
        total += -(pos / neg).ln();
    }
    total
}

/// Prototype classification loss, written exactly as its formula reads:
/// −Σ over (embedding, label) of ln(e^{cos(h,p_y)/τ} / Σ_{y'} e^{cos(h,p_{y'})/τ}).
pub fn prototype_loss_oracle(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    prototypes: &[Vec<f64>],
    tau: f64,
) -> f64 {
    let mut total = 0.0;
    for (h, &y) in embeddings.iter().zip(labels) {
        let exps: Vec<f64> = prototypes.iter().map(|p| (cosine(h, p) / tau).exp()).collect();
        let den: f64 = exps.iter().sum();
        total += -(exps[y] / den).ln();
    }
    total
}

// ===== cyclic Jacobi eigendecomposition =====

/// Eigenpairs of a symmetric matrix by cyclic Jacobi rotations. Returns
/// eigenvalues in descending order with matching eigenvector columns.
/// O(n³) per sweep and deliberately artless — it exists to cross-check the
/// production eigensolver, not to compete with it.
pub fn jacobi_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.len();
    let mut m: Mat = a.clone();
    let mut v: Mat = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let off = |m: &Mat| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i][j] * m[i][j];
                }
            }
        }
        s
    };
    let scale: f64 = a
        .iter()
        .flatten()
        .map(|x| x * x)
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        if off(&m) <= 1e-24 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[p][q].abs() <= 1e-300 {
                    continue;
                }
                // classic 2×2 rotation zeroing m[p][q]
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[y][y].partial_cmp(&m[x][x]).expect("finite eigenvalues"));
    let eigvals: Vec<f64> = order.iter().map(|&i| m[i][i]).collect();
    let eigvecs: Mat = (0..n)
        .map(|i| order.iter().map(|&j| v[i][j]).collect())
        .collect();
    (eigvals, eigvecs)
}

/// Dimension alignment recomputed from scratch: the Gram matrix (XᵀX when
/// d ≤ n, XXᵀ otherwise) is eigendecomposed with the Jacobi solver above,
/// the projection follows the same branch arithmetic as the production code,
/// and the same rank cutoff (1e-12 of the top eigenvalue) and column sign
/// rule (largest-magnitude entry non-negative) are applied.
pub fn dal_oracle(x: &Tensor, d_tilde: usize) -> Mat {
    let (n, d) = x.shape();
    let xm = tensor_to_mat(x);
    let mut out: Mat = vec![vec![0.0; d_tilde]; n];

    let (eigvals, eigvecs, transposed) = if d <= n {
        let mut gram = vec![vec![0.0; d]; d];
        for row in &xm {
            for a in 0..d {
                for b in 0..d {
                    gram[a][b] += row[a] * row[b];
                }
            }
        }
        let (vals, vecs) = jacobi_eigen(&gram);
        (vals, vecs, true)
    } else {
        let mut gram = vec![vec![0.0; n]; n];
        for a in 0..n {
            for b in 0..n {
                gram[a][b] = (0..d).map(|j| xm[a][j] * xm[b][j]).sum();
            }
        }
        let (vals, vecs) = jacobi_eigen(&gram);
        (vals, vecs, false)
    };

    let eigvals: Vec<f64> = eigvals.into_iter().map(|v| v.max(0.0)).collect();
    let top = eigvals.first().copied().unwrap_or(0.0);
    let rank = if top <= 0.0 {
        0
    } else {
        eigvals.iter().take_while(|&&v| v > top * 1e-12).count()
    };
    let k = rank.min(d_tilde);

    for j in 0..k {
        if transposed {
            for i in 0..n {
                out[i][j] = (0..d).map(|p| xm[i][p] * eigvecs[p][j]).sum();
            }
        } else {
            let s = eigvals[j].sqrt();
            for i in 0..n {
                out[i][j] = eigvecs[i][j] * s;
            }
        }
    }

    for j in 0..d_tilde {
        let mut best = 0.0f64;
        let mut best_val = 0.0f64;
        for row in out.iter() {
            if row[j].abs() > best {
                best = row[j].abs();
                best_val = row[j];
            }
        }
        if best_val < 0.0 {
            for row in out.iter_mut() {
                row[j] = -row[j];
            }
        }
    }
    out
}

// ===== graph oracles =====

/// Hop distances from `src` by literal queue-based BFS; `None` = unreachable.
pub fn bfs_distances(g: &GraphBundle, src: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; g.num_nodes()];
    dist[src] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].expect("queued nodes have distances");
        for &v in g.neighbors(u) {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

// ===== finite differences =====

/// Central finite-difference gradient: (f(x+hеᵢ) − f(x−hеᵢ)) / 2h per entry.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Worst relative disagreement between two gradient vectors.
///
/// Central differences at h = 1e-6 on a loss of magnitude ~1–10 carry
/// cancellation noise of a few × 1e-10 absolute (ε·|f| / 2h), so entries
/// smaller than that cannot be measured relatively at all — against a
/// mathematically zero gradient the probe returns a few ULPs of the loss,
/// which a small denominator floor would misreport as a large relative
/// error. The 1e-4 floor holds sub-floor entries to an absolute standard
/// instead: at the 1e-4 relative tolerance used by the gradient tests, a
/// disagreement passes only if it is below 1e-8 absolute — two orders of
/// magnitude above the noise floor, and far below any plausible gradient
/// implementation error.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

// ===== parameter flattening for loss-level gradient checks =====

pub fn flatten(tensors: &[&Tensor]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
}

pub fn unflatten_into(tensors: &mut [&mut Tensor], flat: &[f64]) {
    let mut offset = 0;
    for t in tensors.iter_mut() {
        let len = t.data().len();
        t.data_mut().copy_from_slice(&flat[offset..offset + len]);
        offset += len;
    }
    assert_eq!(offset, flat.len(), "flat vector length mismatch");
}

// ===== synthetic fixtures =====

/// A random bundle whose labels are assigned round-robin, so every class is
/// guaranteed at least ⌊n/classes⌋ members regardless of the seed.
pub fn balanced_bundle(
    name: &str,
    n: usize,
    p: f64,
    feat_dim: usize,
    classes: usize,
    seed: u64,
) -> GraphBundle {
    let g = samgpt::graphstore::random_bundle(name, n, p, feat_dim, classes, seed);
    g.with_labels((0..n).map(|i| i % classes).collect())
}

// ===== loss-level gradient checks =====

/// One randomized configuration of the pre-training objective, gradient-
/// checked against central finite differences over every trainable tensor:
/// encoder weights, structure tokens, and feature tokens. The batch (anchor
/// subgraphs and their edge-drop views) is frozen up front so the loss is a
/// pure function of the parameters. Returns the worst relative error.
///
/// Configs where the loss is undefined at the sampled point (an embedding
/// with exactly zero norm — e.g. an isolated node whose activations die) are
/// rejected and redrawn: there is no gradient to check where there is no
/// loss.
pub fn pretrain_gradient_check(seed: u64) -> f64 {
    for attempt in 0..32 {
        if let Some(err) = pretrain_gradient_attempt(seed, attempt) {
            return err;
        }
    }
    panic!("no well-posed pre-training config in 32 draws for seed {seed}");
}

fn pretrain_gradient_attempt(seed: u64, attempt: u64) -> Option<f64> {
    let mut rng = derive_rng(seed, &[0x61ad, attempt]);
    let k = rng.gen_range(1..=2usize);
    let d_tilde = rng.gen_range(2..=4usize);
    let hidden = rng.gen_range(2..=8usize);
    let layers = rng.gen_range(1..=3usize);
    let tau = if rng.gen_bool(0.5) { 0.5 } else { 1.0 };
    let alpha = if rng.gen_bool(0.5) { 0.5 } else { 1.0 };

    // frozen batch: two radius-1 anchors per domain, two views each
    let mut batch_graphs: Vec<(usize, GraphBundle, [GraphBundle; 2])> = Vec::new();
    for d in 0..k {
        let n = rng.gen_range(4..=10);
        let g = samgpt::graphstore::random_bundle(
            &format!("fd_src_{d}"),
            n,
            0.4,
            d_tilde,
            2,
            rng.gen(),
        );
        for anchor in sample_subgraphs(&g, 2, 1, &mut rng) {
            let v0 = augment_edge_drop(&anchor, 0.3, &mut rng);
            let v1 = augment_edge_drop(&anchor, 0.3, &mut rng);
            batch_graphs.push((d, anchor, [v0, v1]));
        }
    }
    let ops: Vec<(GraphOperator, [GraphOperator; 2])> = batch_graphs
        .iter()
        .map(|(_, a, vs)| {
            (graph_operator(a), [graph_operator(&vs[0]), graph_operator(&vs[1])])
        })
        .collect();

    // parameter point: random weights, tokens perturbed away from all-ones
    let encoder = EncoderState::init(d_tilde, hidden, layers, &mut rng);
    let dims = encoder.layer_input_dims();
    let mut s_tokens = StructureTokens::init(k, &dims);
    for i in 0..k {
        for (l, &d) in dims.iter().enumerate() {
            *s_tokens.token_mut(i, l) = Tensor::uniform(1, d, 0.5, 1.5, &mut rng);
        }
    }
    let mut f_tokens = FeatureTokens::init(k, d_tilde);
    for i in 0..k {
        *f_tokens.token_mut(i) = Tensor::uniform(1, d_tilde, 0.5, 1.5, &mut rng);
    }

    let forward = |enc: &EncoderState,
                   st: &StructureTokens,
                   ft: &FeatureTokens|
     -> Option<(Tape, Vec<Vec<samgpt::tensor::Var>>, f64)> {
        let mut tape = Tape::new();
        let mounted = mount_params(&mut tape, enc, st, ft, true, true);
        let mut cb = ContrastiveBatch {
            anchors: Vec::new(),
            views: Vec::new(),
        };
        for ((d, a, vs), (aop, vops)) in batch_graphs.iter().zip(&ops) {
            let ae = embed_fused(&mut tape, a, aop, &mounted, *d, alpha);
            let v0 = embed_fused(&mut tape, &vs[0], &vops[0], &mounted, *d, alpha);
            let v1 = embed_fused(&mut tape, &vs[1], &vops[1], &mounted, *d, alpha);
            cb.anchors.push(ae);
            cb.views.push([v0, v1]);
        }
        let loss = contrastive_loss(&mut tape, &cb, tau).ok()?;
        let value = tape.value(loss).scalar();
        if !value.is_finite() {
            return None;
        }
        tape.backward(loss).expect("backward succeeds");
        let groups = vec![
            mounted.weights.clone(),
            mounted.structure_tokens.into_iter().flatten().collect(),
            mounted.feature_tokens.clone(),
        ];
        Some((tape, groups, value))
    };

    // analytic gradients at the chosen point, in mount order; a config whose
    // loss is undefined here (exactly-zero embedding norm) is redrawn
    let (tape, groups, _) = forward(&encoder, &s_tokens, &f_tokens)?;
    let analytic: Vec<f64> = groups
        .iter()
        .flatten()
        .flat_map(|&v| tape.grad_or_zeros(v).data().to_vec())
        .collect();

    // numeric gradients through a rebuilt forward pass per probe
    let mut template_refs: Vec<&Tensor> = encoder.weights().iter().collect();
    for i in 0..k {
        for l in 0..layers {
            template_refs.push(s_tokens.token(i, l));
        }
    }
    template_refs.extend(f_tokens.tokens().iter());
    let x0 = flatten(&template_refs);

    let mut eval = |flat: &[f64]| -> f64 {
        let mut enc = encoder.clone();
        let mut st = s_tokens.clone();
        let mut ft = f_tokens.clone();
        let mut refs: Vec<&mut Tensor> = enc.weights_mut().iter_mut().collect();
        refs.extend(st.iter_mut());
        refs.extend(ft.iter_mut());
        unflatten_into(&mut refs, flat);
        let mut tape = Tape::new();
        let mounted = mount_params(&mut tape, &enc, &st, &ft, true, true);
        let mut cb = ContrastiveBatch {
            anchors: Vec::new(),
            views: Vec::new(),
        };
        for ((d, a, vs), (aop, vops)) in batch_graphs.iter().zip(&ops) {
            let ae = embed_fused(&mut tape, a, aop, &mounted, *d, alpha);
            let v0 = embed_fused(&mut tape, &vs[0], &vops[0], &mounted, *d, alpha);
            let v1 = embed_fused(&mut tape, &vs[1], &vops[1], &mounted, *d, alpha);
            cb.anchors.push(ae);
            cb.views.push([v0, v1]);
        }
        let loss = contrastive_loss(&mut tape, &cb, tau)
            .expect("loss stays defined under tiny perturbations of an accepted point");
        tape.value(loss).scalar()
    };
    let numeric = central_diff(&mut eval, &x0, 1e-6);
    Some(max_rel_err(&analytic, &numeric))
}

/// One randomized configuration of the downstream objective, gradient-
/// checked over every prompt parameter the full variant tunes: holistic
/// prompts, the specific-prompt mixture, and the feature adapter (μ, g).
/// Alternates between node and graph tasks by seed. Returns the worst
/// relative error.
///
/// Like the pre-training check, configs where the loss does not exist at the
/// sampled prompt point (a support or query embedding, or a prototype, with
/// exactly zero norm) are rejected and redrawn.
pub fn downstream_gradient_check(seed: u64) -> f64 {
    for attempt in 0..32 {
        if let Some(err) = downstream_gradient_attempt(seed, attempt) {
            return err;
        }
    }
    panic!("no well-posed downstream config in 32 draws for seed {seed}");
}

fn downstream_gradient_attempt(seed: u64, attempt: u64) -> Option<f64> {
    let mut rng = derive_rng(seed, &[0x61ae, attempt]);
    let k = rng.gen_range(1..=3usize);
    let d_tilde = rng.gen_range(2..=4usize);
    let hidden = rng.gen_range(2..=8usize);
    let layers = rng.gen_range(1..=3usize);
    let shots = rng.gen_range(1..=2usize);
    let classes = 2usize;
    let kind = if rng.gen_bool(0.5) {
        TaskKind::Node
    } else {
        TaskKind::Graph
    };
    let n = rng.gen_range(6..=10usize);

    let bundle = balanced_bundle("fd_target", n, 0.4, d_tilde, classes, rng.gen());
    let ckpt = synthetic_checkpoint(k, d_tilde, hidden, layers, rng.gen());

    let by_class = nodes_by_class(&bundle);
    let mut support = Vec::new();
    let mut queries = Vec::new();
    for (c, members) in by_class.iter().enumerate() {
        for &v in members.iter().take(shots) {
            support.push((v, c));
        }
        if let Some(&v) = members.get(shots) {
            queries.push((v, c));
        }
    }
    let episode = TaskEpisode {
        kind,
        shots,
        support,
        queries,
        num_classes: classes,
        seed,
    };

    let config = AdaptConfig {
        variant: Variant::Full,
        tune_steps: 0,
        tune_lr: 1e-2,
        beta: if rng.gen_bool(0.5) { 0.5 } else { 1.0 },
        ego_radius: 1,
        alpha_override: Some(if rng.gen_bool(0.5) { 0.5 } else { 1.0 }),
    };
    let target = AdaptTarget {
        operator: graph_operator(&bundle),
        bundle,
        dal_cache_key: "fd".into(),
    };
    let materials = prepare_materials(&target, &episode, config.ego_radius);
    let support_labels: Vec<usize> = episode.support.iter().map(|&(_, y)| y).collect();

    // randomized prompt point, away from the all-ones/uniform init
    let mut prompts = PromptState::init(&ckpt, &config);
    for p in &mut prompts.holistic {
        *p = Tensor::uniform(1, p.cols(), 0.5, 1.5, &mut rng);
    }
    prompts.lambda = Tensor::uniform(layers, k, -0.5, 1.0, &mut rng);
    prompts.adapter.mu = Tensor::uniform(1, k, -0.5, 1.0, &mut rng);
    prompts.adapter.g = Tensor::uniform(1, d_tilde, -0.3, 0.3, &mut rng);

    let run = |prompts: &PromptState| -> Option<(Tape, Vec<samgpt::tensor::Var>, f64)> {
        let mut tape = Tape::new();
        let mounts = mount_adaptation(&mut tape, &ckpt, prompts, config.variant);
        let embeddings =
            embed_instances(&mut tape, &target, &materials, &episode, &mounts, false);
        let protos = build_prototypes(&mut tape, &embeddings, &support_labels, classes)
            .expect("every class has support");
        let loss =
            downstream_loss(&mut tape, &embeddings, &support_labels, &protos, ckpt.hyper.tau)
                .ok()?;
        let value = tape.value(loss).scalar();
        if !value.is_finite() {
            return None;
        }
        tape.backward(loss).expect("backward succeeds");
        let mut params: Vec<samgpt::tensor::Var> = mounts.holistic.clone();
        params.push(mounts.lambda.expect("full variant uses the specific path"));
        params.push(mounts.adapter.mu);
        params.push(mounts.adapter.g);
        Some((tape, params, value))
    };

    // a prompt point where the loss is undefined (zero-norm embedding or
    // prototype, so cosine similarity does not exist) is redrawn
    let (tape, params, _) = run(&prompts)?;
    let analytic: Vec<f64> = params
        .iter()
        .flat_map(|&v| tape.grad_or_zeros(v).data().to_vec())
        .collect();

    let mut template_refs: Vec<&Tensor> = prompts.holistic.iter().collect();
    template_refs.push(&prompts.lambda);
    template_refs.push(&prompts.adapter.mu);
    template_refs.push(&prompts.adapter.g);
    let x0 = flatten(&template_refs);

    let mut eval = |flat: &[f64]| -> f64 {
        let mut p = prompts.clone();
        let mut refs: Vec<&mut Tensor> = p.holistic.iter_mut().collect();
        refs.push(&mut p.lambda);
        refs.push(&mut p.adapter.mu);
        refs.push(&mut p.adapter.g);
        unflatten_into(&mut refs, flat);
        let mut tape = Tape::new();
        let mounts = mount_adaptation(&mut tape, &ckpt, &p, config.variant);
        let embeddings =
            embed_instances(&mut tape, &target, &materials, &episode, &mounts, false);
        let protos = build_prototypes(&mut tape, &embeddings, &support_labels, classes)
            .expect("every class has support");
        let loss = downstream_loss(&mut tape, &embeddings, &support_labels, &protos, ckpt.hyper.tau)
            .expect("loss stays defined under tiny perturbations of an accepted point");
        tape.value(loss).scalar()
    };
    let numeric = central_diff(&mut eval, &x0, 1e-6);
    Some(max_rel_err(&analytic, &numeric))
}

/// A checkpoint over `k` fictitious source domains with randomized weights
/// and tokens. Downstream adaptation never looks at source graphs, so tests
/// can exercise it without running pre-training.
pub fn synthetic_checkpoint(
    k: usize,
    d_tilde: usize,
    hidden: usize,
    layers: usize,
    seed: u64,
) -> Checkpoint {
    let mut rng = derive_rng(seed, &[0xfab]);
    let encoder = EncoderState::init(d_tilde, hidden, layers, &mut rng);
    let dims = encoder.layer_input_dims();
    let mut structure_tokens = StructureTokens::init(k, &dims);
    for i in 0..k {
        for (l, &d) in dims.iter().enumerate() {
            *structure_tokens.token_mut(i, l) = Tensor::uniform(1, d, 0.5, 1.5, &mut rng);
        }
    }
    let mut feature_tokens = FeatureTokens::init(k, d_tilde);
    for i in 0..k {
        *feature_tokens.token_mut(i) = Tensor::uniform(1, d_tilde, 0.5, 1.5, &mut rng);
    }
    Checkpoint {
        encoder,
        structure_tokens,
        feature_tokens,
        hyper: CheckpointHyper {
            layers,
            hidden,
            aligned_dim: d_tilde,
            alpha: 1.0,
            tau: 0.5,
            domains: (0..k).map(|i| format!("source_{i}")).collect(),
            structure_tokens_trained: true,
            seed,
            steps: 0,
            learning_rate: 1e-3,
            edge_drop_ratio: 0.2,
            subgraphs_per_domain: 2,
            subgraph_radius: 1,
            dal_cache_keys: (0..k).map(|i| format!("key_{i}")).collect(),
        },
    }
}
