//! The L-layer message-passing encoder with per-layer aggregation
//! modulators, plus checkpoint serialization.
//!
//! One layer computes
//!
//! ```text
//! H^l = act( Ŝ_off · (H^{l-1} ⊙ m^l)  +  diag(ŝ) · H^{l-1} ) · W^l
//! ```
//!
//! where Ŝ = D̂^{-1/2}(A+I)D̂^{-1/2} is the symmetric-normalized adjacency
//! with self-loops, split into its off-diagonal part Ŝ_off (neighbor
//! messages, scaled by the modulator m^l) and its diagonal ŝ (the node's own
//! contribution, never modulated). `act` is relu on all but the last layer;
//! the last layer stays linear so cosine-similarity geometry downstream is
//! not truncated at zero. There are no bias terms.
//!
//! The modulator m^l is whatever the caller mounts: a structure token during
//! pre-training, a holistic or specific prompt downstream, or nothing at all
//! (the plain feature path). Because ⊙ with an all-ones vector is bit-exact,
//! a freshly initialized or disabled modulator reduces the encoder to a
//! plain normalized-GCN forward pass, which the tests pin down.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::FeatureTokens;
use crate::error::{Error, Result};
use crate::graphstore::GraphBundle;
use crate::tensor::{load_tensor, save_tensor, sha256_hex, SparseMatrix, Tape, Tensor, Var};

pub const DEFAULT_LAYERS: usize = 3;
pub const DEFAULT_HIDDEN: usize = 256;

// ===== normalized adjacency operator =====

/// The two halves of the normalized adjacency, shared across tapes.
#[derive(Clone)]
pub struct GraphOperator {
    /// Off-diagonal D̂^{-1/2} A D̂^{-1/2}: neighbor messages.
    pub s_off: Arc<SparseMatrix>,
    /// Diagonal 1/(deg+1): the node's own (unmodulated) contribution.
    pub s_diag: Arc<SparseMatrix>,
    pub num_nodes: usize,
}

/// Builds the normalized operator for a bundle. D̂ counts the self-loop, so
/// an isolated node keeps exactly its own signal (ŝ = 1).
pub fn graph_operator(g: &GraphBundle) -> GraphOperator {
    let n = g.num_nodes();
    let inv_sqrt: Vec<f64> = (0..n).map(|v| 1.0 / ((g.degree(v) + 1) as f64).sqrt()).collect();
    let mut triplets = Vec::with_capacity(g.directed_edge_count());
    for u in 0..n {
        for &v in g.neighbors(u) {
            triplets.push((u, v, inv_sqrt[u] * inv_sqrt[v]));
        }
    }
    let s_off = SparseMatrix::from_triplets(n, n, &triplets);
    let diag: Vec<f64> = inv_sqrt.iter().map(|&d| d * d).collect();
    GraphOperator {
        s_off: Arc::new(s_off),
        s_diag: Arc::new(SparseMatrix::diagonal(&diag)),
        num_nodes: n,
    }
}

// ===== encoder parameters =====

/// Layer weights Θ. Layer l maps its input width to `hidden`; the first
/// layer's input width is the aligned feature dimension d̃.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    weights: Vec<Tensor>,
}

impl EncoderState {
    /// Uniform init in [−1/√d_in, +1/√d_in] per layer.
    pub fn init<R: Rng>(d_tilde: usize, hidden: usize, layers: usize, rng: &mut R) -> Self {
        assert!(layers >= 1, "need at least one layer");
        let mut weights = Vec::with_capacity(layers);
        for l in 0..layers {
            let d_in = if l == 0 { d_tilde } else { hidden };
            let bound = 1.0 / (d_in as f64).sqrt();
            weights.push(Tensor::uniform(d_in, hidden, -bound, bound, rng));
        }
        EncoderState { weights }
    }

    pub fn from_weights(weights: Vec<Tensor>) -> Self {
        assert!(!weights.is_empty());
        for pair in weights.windows(2) {
            assert_eq!(
                pair[0].cols(),
                pair[1].rows(),
                "layer widths must chain: {}→{}",
                pair[0].cols(),
                pair[1].rows()
            );
        }
        EncoderState { weights }
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn hidden(&self) -> usize {
        self.weights.last().unwrap().cols()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    /// Input width of each layer — also the width of its modulator.
    pub fn layer_input_dims(&self) -> Vec<usize> {
        self.weights.iter().map(|w| w.rows()).collect()
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    /// Inserts the weights on the tape; leaves when trainable, constants
    /// when frozen (frozen weights can never accumulate gradients).
    pub fn mount(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.weights
            .iter()
            .map(|w| {
                if trainable {
                    tape.leaf(w.clone())
                } else {
                    tape.constant(w.clone())
                }
            })
            .collect()
    }
}

/// Per-domain, per-layer structure tokens T. Token (i, l) scales the
/// neighbor messages of layer l when encoding domain i.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureTokens {
    per_domain: Vec<Vec<Tensor>>,
}

impl StructureTokens {
    /// All-ones init: pre-training starts from the unmodulated encoder.
    pub fn init(num_domains: usize, layer_dims: &[usize]) -> Self {
        let one_domain: Vec<Tensor> = layer_dims.iter().map(|&d| Tensor::ones(1, d)).collect();
        StructureTokens {
            per_domain: vec![one_domain; num_domains],
        }
    }

    pub fn from_tensors(per_domain: Vec<Vec<Tensor>>) -> Self {
        StructureTokens { per_domain }
    }

    pub fn num_domains(&self) -> usize {
        self.per_domain.len()
    }

    pub fn layers(&self) -> usize {
        self.per_domain.first().map_or(0, Vec::len)
    }

    pub fn token(&self, domain: usize, layer: usize) -> &Tensor {
        &self.per_domain[domain][layer]
    }

    pub fn token_mut(&mut self, domain: usize, layer: usize) -> &mut Tensor {
        &mut self.per_domain[domain][layer]
    }

    /// All tokens in (domain, layer) order — the optimizer's parameter order.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.per_domain.iter_mut().flat_map(|d| d.iter_mut())
    }

    pub fn domain_tokens(&self, domain: usize) -> &[Tensor] {
        &self.per_domain[domain]
    }

    /// Layer-l tokens of every domain stacked into K×d_l (row i = domain i).
    pub fn stacked_layer(&self, layer: usize) -> Tensor {
        let k = self.num_domains();
        let d = self.per_domain[0][layer].cols();
        let mut out = Tensor::zeros(k, d);
        for i in 0..k {
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(self.per_domain[i][layer].data());
        }
        out
    }

    pub fn mount_domain(&self, tape: &mut Tape, domain: usize, trainable: bool) -> Vec<Var> {
        self.per_domain[domain]
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

// ===== forward passes =====

/// Runs the encoder over one graph. `modulators` supplies the per-layer
/// aggregation vectors (structure tokens or prompts); `None` is the plain
/// feature path, identical to all-ones modulators but without the no-op
/// multiply on the tape.
pub fn encode(
    tape: &mut Tape,
    op: &GraphOperator,
    x: Var,
    weights: &[Var],
    modulators: Option<&[Var]>,
) -> Var {
    if let Some(mods) = modulators {
        assert_eq!(
            mods.len(),
            weights.len(),
            "one modulator per layer: {} modulators for {} layers",
            mods.len(),
            weights.len()
        );
    }
    let last = weights.len() - 1;
    let mut h = x;
    for (l, &w) in weights.iter().enumerate() {
        let messages = match modulators {
            Some(mods) => tape.mul(h, mods[l]),
            None => h,
        };
        let neighbor_part = tape.spmm(&op.s_off, messages);
        let self_part = tape.spmm(&op.s_diag, h);
        let agg = tape.add(neighbor_part, self_part);
        let activated = if l < last { tape.relu(agg) } else { agg };
        h = tape.matmul(activated, w);
    }
    h
}

/// The feature path H^FAL / H^FAD: plain aggregation over inputs that
/// already carry the feature token (applied by the align module).
pub fn encode_feature_path(tape: &mut Tape, op: &GraphOperator, x: Var, weights: &[Var]) -> Var {
    encode(tape, op, x, weights, None)
}

/// h_primary + coeff · h_secondary. A zero coefficient returns the primary
/// embedding untouched — exactly, not approximately — which also keeps
/// disabled paths off the tape.
pub fn fuse(tape: &mut Tape, h_primary: Var, h_secondary: Var, coeff: f64) -> Var {
    if coeff == 0.0 {
        return h_primary;
    }
    let scaled = tape.scale(h_secondary, coeff);
    tape.add(h_primary, scaled)
}

/// Mean-pool node embeddings into a 1×hidden graph embedding.
pub fn readout(tape: &mut Tape, h: Var) -> Var {
    tape.mean_rows(h)
}

// ===== checkpoint =====

/// Everything pre-training produces: encoder weights Θ, structure tokens T,
/// feature tokens Ψ, and the hyperparameters that downstream phases must
/// replay (the domain ORDER matters — mixture coefficients index it).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub encoder: EncoderState,
    pub structure_tokens: StructureTokens,
    pub feature_tokens: FeatureTokens,
    pub hyper: CheckpointHyper,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHyper {
    pub layers: usize,
    pub hidden: usize,
    pub aligned_dim: usize,
    /// Feature/structure fusion coefficient; carried into adaptation.
    pub alpha: f64,
    /// Contrastive temperature; reused as the downstream temperature.
    pub tau: f64,
    /// Ordered source roster. Position i owns token row i everywhere.
    pub domains: Vec<String>,
    /// False when pre-training excluded structure tokens from the optimizer.
    pub structure_tokens_trained: bool,
    pub seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    pub edge_drop_ratio: f64,
    pub subgraphs_per_domain: usize,
    pub subgraph_radius: usize,
    /// Per-domain dimension-alignment cache keys, parallel to `domains`.
    pub dal_cache_keys: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    hyper: CheckpointHyper,
    /// parameter name → tensor file name, sorted for stable serialization
    tensors: BTreeMap<String, String>,
    /// SHA-256 over all tensor file bytes in sorted-name order
    content_hash: String,
}

impl Checkpoint {
    pub fn num_domains(&self) -> usize {
        self.hyper.domains.len()
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.hyper.domains.iter().position(|d| d == name)
    }

    fn tensor_entries(&self) -> Vec<(String, &Tensor)> {
        let mut entries = Vec::new();
        for (l, w) in self.encoder.weights().iter().enumerate() {
            entries.push((format!("encoder_w{l}"), w));
        }
        for i in 0..self.structure_tokens.num_domains() {
            for l in 0..self.structure_tokens.layers() {
                entries.push((
                    format!("structure_token_{i}_{l}"),
                    self.structure_tokens.token(i, l),
                ));
            }
        }
        for (i, t) in self.feature_tokens.tokens().iter().enumerate() {
            entries.push((format!("feature_token_{i}"), t));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        entries
    }

    /// Hash of the parameter payload, independent of file-system metadata.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::new();
        for (name, t) in self.tensor_entries() {
            bytes.extend_from_slice(name.as_bytes());
            bytes.extend_from_slice(&t.to_bytes());
        }
        sha256_hex(&bytes)
    }
}

pub fn save_checkpoint(dir: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = BTreeMap::new();
    for (name, t) in ckpt.tensor_entries() {
        let file = format!("{name}.tensor");
        save_tensor(dir.join(&file), t)?;
        tensors.insert(name, file);
    }
    let manifest = Manifest {
        hyper: ckpt.hyper.clone(),
        tensors,
        content_hash: ckpt.content_hash(),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.line(), e.to_string()))?;
    let hyper = manifest.hyper;

    let read = |name: String| -> Result<Tensor> {
        let file = manifest
            .tensors
            .get(&name)
            .ok_or_else(|| Error::Format(format!("manifest missing tensor '{name}'")))?;
        load_tensor(dir.join(file))
    };

    let mut weights = Vec::with_capacity(hyper.layers);
    for l in 0..hyper.layers {
        let w = read(format!("encoder_w{l}"))?;
        let expect_in = if l == 0 { hyper.aligned_dim } else { hyper.hidden };
        if w.shape() != (expect_in, hyper.hidden) {
            return Err(Error::Format(format!(
                "encoder_w{l} has shape {}x{}, expected {}x{}",
                w.rows(),
                w.cols(),
                expect_in,
                hyper.hidden
            )));
        }
        weights.push(w);
    }
    let encoder = EncoderState::from_weights(weights);

    let k = hyper.domains.len();
    let mut per_domain = Vec::with_capacity(k);
    for i in 0..k {
        let mut layer_tokens = Vec::with_capacity(hyper.layers);
        for l in 0..hyper.layers {
            let t = read(format!("structure_token_{i}_{l}"))?;
            let expect = if l == 0 { hyper.aligned_dim } else { hyper.hidden };
            if t.shape() != (1, expect) {
                return Err(Error::Format(format!(
                    "structure_token_{i}_{l} has wrong width {}",
                    t.cols()
                )));
            }
            layer_tokens.push(t);
        }
        per_domain.push(layer_tokens);
    }
    let structure_tokens = StructureTokens::from_tensors(per_domain);

    let mut feat = Vec::with_capacity(k);
    for i in 0..k {
        let t = read(format!("feature_token_{i}"))?;
        if t.shape() != (1, hyper.aligned_dim) {
            return Err(Error::Format(format!(
                "feature_token_{i} has wrong width {}",
                t.cols()
            )));
        }
        feat.push(t);
    }
    let feature_tokens = FeatureTokens::from_tensors(feat);

    let ckpt = Checkpoint {
        encoder,
        structure_tokens,
        feature_tokens,
        hyper,
    };
    if ckpt.content_hash() != manifest.content_hash {
        return Err(Error::Format(
            "checkpoint content hash mismatch: tensor files do not match the manifest".into(),
        ));
    }
    Ok(ckpt)
}

/// The manifest as pretty JSON, for `inspect-ckpt`.
pub fn read_manifest_text(dir: impl AsRef<Path>) -> Result<String> {
    let path = dir.as_ref().join("manifest.json");
    fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
}

// ===== tests =====
