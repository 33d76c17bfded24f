//! Dimension alignment and feature alignment/adaptation.
//!
//! Every domain brings features of a different width; `fit_dal` projects
//! them to a shared width d̃ via truncated SVD. On top of the aligned
//! features, each source domain learns a *feature token* (a 1×d̃ vector
//! multiplied into every row) during pre-training, and the downstream target
//! learns a *feature adapter*: a mixture over the frozen source tokens plus
//! a free vector.
//!
//! Identity anchors used throughout the tests: an all-ones effective token
//! is a bit-exact no-op, and a one-hot mixture with zero free vector
//! reproduces the corresponding source token exactly.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::{load_tensor, sha256_hex, Tape, Tensor, Var};

/// Shared feature width after dimension alignment.
pub const DEFAULT_ALIGNED_DIM: usize = 50;

/// Human-readable description of the feature-alignment scheme, echoed in
/// benchmark reports so result tables are self-describing.
pub const FEATURE_ALIGNMENT_DESC: &str = "domain feature tokens (in-repo)";

// ===== dimension alignment (truncated SVD) =====

/// Projects `x` (n×d) to n×d̃ as X̃ = U_k S_k, the top-k left singular
/// vectors scaled by their singular values, with k = min(d̃, rank); columns
/// beyond the rank are zero. Columns are ordered by descending singular
/// value and sign-normalized so each column's largest-magnitude entry is
/// non-negative.
///
/// The decomposition runs on the smaller Gram matrix: XᵀX when d ≤ n
/// (X̃ = X·V_k), XXᵀ otherwise (X̃ = U_k S_k directly).
pub fn fit_dal(x: &Tensor, d_tilde: usize) -> Result<Tensor> {
    assert!(d_tilde >= 1, "aligned dimension must be at least 1");
    if !x.is_finite() {
        return Err(Error::Format(
            "non-finite value in feature matrix passed to dimension alignment".into(),
        ));
    }
    let (n, d) = x.shape();
    let mut out = Tensor::zeros(n, d_tilde);

    if d <= n {
        // X = U S Vᵀ ⇒ XᵀX = V S² Vᵀ and X̃ = X V_k
        let gram = gram_matrix(x, true);
        let (eigvals, eigvecs) = sorted_symmetric_eigen(gram, d);
        let k = effective_rank(&eigvals).min(d_tilde);
        for j in 0..k {
            // column j of X·v_j
            for i in 0..n {
                let mut acc = 0.0;
                let row = x.row(i);
                for (p, &xv) in row.iter().enumerate() {
                    acc += xv * eigvecs[(p, j)];
                }
                out.set(i, j, acc);
            }
        }
    } else {
        // X = U S Vᵀ ⇒ XXᵀ = U S² Uᵀ and X̃ column j = u_j · s_j
        let gram = gram_matrix(x, false);
        let (eigvals, eigvecs) = sorted_symmetric_eigen(gram, n);
        let k = effective_rank(&eigvals).min(d_tilde);
        for j in 0..k {
            let s = eigvals[j].sqrt();
            for i in 0..n {
                out.set(i, j, eigvecs[(i, j)] * s);
            }
        }
    }
    fix_column_signs(&mut out);
    Ok(out)
}

/// XᵀX (d×d) when `transposed`, else XXᵀ (n×n); exploits symmetry.
fn gram_matrix(x: &Tensor, transposed: bool) -> DMatrix<f64> {
    let (n, d) = x.shape();
    let m = if transposed { d } else { n };
    let mut gram = DMatrix::<f64>::zeros(m, m);
    if transposed {
        for row_idx in 0..n {
            let row = x.row(row_idx);
            for a in 0..d {
                let xa = row[a];
                if xa == 0.0 {
                    continue;
                }
                for b in a..d {
                    gram[(a, b)] += xa * row[b];
                }
            }
        }
    } else {
        for a in 0..n {
            let ra = x.row(a);
            for b in a..n {
                let rb = x.row(b);
                let mut acc = 0.0;
                for j in 0..d {
                    acc += ra[j] * rb[j];
                }
                gram[(a, b)] = acc;
            }
        }
    }
    for a in 0..m {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    gram
}

/// Eigen pairs of a symmetric matrix, sorted by descending eigenvalue with
/// negative numerical noise clamped to zero.
fn sorted_symmetric_eigen(gram: DMatrix<f64>, m: usize) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let eigvals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let mut eigvecs = DMatrix::<f64>::zeros(m, m);
    for (j, &src) in order.iter().enumerate() {
        for i in 0..m {
            eigvecs[(i, j)] = eig.eigenvectors[(i, src)];
        }
    }
    (eigvals, eigvecs)
}

/// Number of eigenvalues treated as nonzero, relative to the largest.
fn effective_rank(eigvals: &[f64]) -> usize {
    let max = eigvals.first().copied().unwrap_or(0.0);
    if max <= 0.0 {
        return 0;
    }
    let cutoff = max * 1e-12;
    eigvals.iter().take_while(|&&v| v > cutoff).count()
}

/// Flips each column so its largest-magnitude entry is non-negative
/// (first such entry on ties). All-zero columns are left alone.
fn fix_column_signs(x: &mut Tensor) {
    let (n, d) = x.shape();
    for j in 0..d {
        let mut best = 0.0f64;
        let mut best_val = 0.0f64;
        for i in 0..n {
            let v = x.get(i, j);
            if v.abs() > best {
                best = v.abs();
                best_val = v;
            }
        }
        if best_val < 0.0 {
            for i in 0..n {
                let v = x.get(i, j);
                x.set(i, j, -v);
            }
        }
    }
}

// ===== DAL cache =====

/// Cache key for one domain's aligned features: a prefix of the feature
/// matrix content hash plus the aligned width.
pub fn dal_cache_key(features: &Tensor, d_tilde: usize) -> String {
    format!("{}-d{}", &sha256_hex(&features.to_bytes())[..16], d_tilde)
}

/// Aligns `features`, caching the result under `<bundle_dir>/cache/` keyed
/// by (feature content hash, d̃). Returns the aligned matrix and the cache
/// key (recorded in checkpoint manifests). Pass `None` to skip caching.
pub fn aligned_features_cached(
    bundle_dir: Option<&Path>,
    features: &Tensor,
    d_tilde: usize,
) -> Result<(Tensor, String)> {
    let key = dal_cache_key(features, d_tilde);
    let cache_path = bundle_dir.map(|d| d.join("cache").join(format!("dal_{key}.tensor")));
    if let Some(path) = &cache_path {
        if path.exists() {
            let cached = load_tensor(path)?;
            if cached.shape() == (features.rows(), d_tilde) {
                return Ok((cached, key));
            }
        }
    }
    let aligned = fit_dal(features, d_tilde)?;
    if let Some(path) = &cache_path {
        let parent = path.parent().expect("cache path has a parent");
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        // write-then-rename so concurrent callers never observe a torn file
        let tmp = tempfile_path(parent, &key);
        crate::tensor::save_tensor(&tmp, &aligned)?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    }
    Ok((aligned, key))
}

fn tempfile_path(dir: &Path, key: &str) -> std::path::PathBuf {
    let nonce = std::process::id();
    dir.join(format!(".dal_{key}.{nonce}.tmp"))
}

// ===== feature tokens (per source domain) =====

/// One learnable 1×d̃ token per source domain, multiplied into every row of
/// that domain's aligned features during pre-training.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTokens {
    tokens: Vec<Tensor>,
}

impl FeatureTokens {
    /// All-ones initialization: feature alignment starts as the identity.
    pub fn init(num_domains: usize, d_tilde: usize) -> Self {
        FeatureTokens {
            tokens: vec![Tensor::ones(1, d_tilde); num_domains],
        }
    }

    pub fn from_tensors(tokens: Vec<Tensor>) -> Self {
        assert!(tokens.iter().all(|t| t.rows() == 1), "feature tokens are 1×d̃");
        FeatureTokens { tokens }
    }

    pub fn num_domains(&self) -> usize {
        self.tokens.len()
    }

    pub fn dim(&self) -> usize {
        self.tokens.first().map_or(0, |t| t.cols())
    }

    pub fn token(&self, domain: usize) -> &Tensor {
        &self.tokens[domain]
    }

    pub fn token_mut(&mut self, domain: usize) -> &mut Tensor {
        &mut self.tokens[domain]
    }

    /// All tokens in domain order — the optimizer's parameter order.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tokens.iter_mut()
    }

    pub fn tokens(&self) -> &[Tensor] {
        &self.tokens
    }

    /// All tokens stacked into a K×d̃ matrix (row i = domain i's token).
    pub fn stacked(&self) -> Tensor {
        let k = self.num_domains();
        let d = self.dim();
        let mut out = Tensor::zeros(k, d);
        for (i, t) in self.tokens.iter().enumerate() {
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(t.data());
        }
        out
    }
}

/// Feature alignment: rows of `x` scaled elementwise by the domain token.
/// The token enters the tape as a leaf (trainable) or constant (frozen)
/// upstream; this is the shared application step.
pub fn apply_fal(tape: &mut Tape, x: Var, token: Var) -> Var {
    tape.mul(x, token)
}

// ===== feature adapter (downstream) =====

/// Downstream feature adaptation: a learnable mixture μ over the K frozen
/// source tokens plus a learnable free vector g. The effective token is
/// μ·F + g where F stacks the frozen tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureAdapter {
    /// 1×K mixture coefficients.
    pub mu: Tensor,
    /// 1×d̃ free vector.
    pub g: Tensor,
}

/// Tape handles produced when an adapter is mounted for one step.
pub struct AdapterVars {
    pub mu: Var,
    pub g: Var,
    pub effective: Var,
}

impl FeatureAdapter {
    /// μ = 1/K (uniform over sources), g = 0: the initial effective token is
    /// the mean of the frozen source tokens.
    pub fn init(num_domains: usize, d_tilde: usize) -> Self {
        FeatureAdapter {
            mu: Tensor::filled(1, num_domains, 1.0 / num_domains as f64),
            g: Tensor::zeros(1, d_tilde),
        }
    }

    pub fn num_domains(&self) -> usize {
        self.mu.cols()
    }

    /// Inserts μ and g on the tape and builds the effective token
    /// μ·F + g. With `trainable`, μ and g are leaves; the frozen token
    /// stack is always a constant, so no gradient ever reaches it.
    pub fn mount(&self, tape: &mut Tape, frozen: &FeatureTokens, trainable: bool) -> AdapterVars {
        assert_eq!(
            self.mu.cols(),
            frozen.num_domains(),
            "adapter mixture width must match the source roster"
        );
        assert_eq!(self.g.cols(), frozen.dim(), "adapter free vector width mismatch");
        let stack = tape.constant(frozen.stacked());
        let (mu, g) = if trainable {
            (tape.leaf(self.mu.clone()), tape.leaf(self.g.clone()))
        } else {
            (tape.constant(self.mu.clone()), tape.constant(self.g.clone()))
        };
        let mixed = tape.matmul(mu, stack);
        let effective = tape.add(mixed, g);
        AdapterVars { mu, g, effective }
    }
}

/// Feature adaptation: rows of `x` scaled by the adapter's effective token.
pub fn apply_fad(tape: &mut Tape, x: Var, adapter_vars: &AdapterVars) -> Var {
    tape.mul(x, adapter_vars.effective)
}

// ===== tests =====
