//! Domain types: block structure, equicorrelation blocks, the fault-quality
//! model, datasets and the variational state.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};

// ---------------------------------------------------------------------------
// Block structure
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub size: usize,
    pub correlated: bool,
}

/// Partition of the `N` KCC positions into contiguous blocks. Correlated
/// blocks come first, followed by singleton independent blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Block>", into = "Vec<Block>")]
pub struct BlockStructure {
    blocks: Vec<Block>,
    offsets: Vec<usize>,
}

impl BlockStructure {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidStructure("no blocks".into()));
        }
        let mut seen_independent = false;
        for (i, b) in blocks.iter().enumerate() {
            if b.correlated {
                if seen_independent {
                    return Err(Error::InvalidStructure(format!(
                        "correlated block {i} follows an independent block"
                    )));
                }
                if b.size < 2 {
                    return Err(Error::InvalidStructure(format!(
                        "correlated block {i} has size {} (< 2)",
                        b.size
                    )));
                }
            } else {
                seen_independent = true;
                if b.size != 1 {
                    return Err(Error::InvalidStructure(format!(
                        "independent block {i} has size {} (must be 1)",
                        b.size
                    )));
                }
            }
        }
        let mut offsets = Vec::with_capacity(blocks.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for b in &blocks {
            acc += b.size;
            offsets.push(acc);
        }
        Ok(Self { blocks, offsets })
    }

    /// Correlated lists of the given sizes followed by enough independent
    /// KCCs to reach `n`.
    pub fn with_lists(list_sizes: &[usize], n: usize) -> Result<Self> {
        let used: usize = list_sizes.iter().sum();
        if used > n {
            return Err(Error::InvalidStructure(format!(
                "correlated lists cover {used} KCCs but N = {n}"
            )));
        }
        let blocks = list_sizes
            .iter()
            .map(|&size| Block {
                size,
                correlated: true,
            })
            .chain((used..n).map(|_| Block {
                size: 1,
                correlated: false,
            }))
            .collect();
        Self::new(blocks)
    }

    /// `n` independent singleton blocks.
    pub fn independent(n: usize) -> Result<Self> {
        Self::with_lists(&[], n)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, r: usize) -> Block {
        self.blocks[r]
    }

    /// Number of blocks `R`.
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Number of correlated blocks `r`.
    pub fn num_correlated(&self) -> usize {
        self.blocks.iter().filter(|b| b.correlated).count()
    }

    /// Total KCC count `N`.
    pub fn n(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, r: usize) -> Range<usize> {
        self.offsets[r]..self.offsets[r + 1]
    }

    /// Block index containing KCC position `i`.
    pub fn block_of(&self, i: usize) -> Option<usize> {
        if i >= self.n() {
            return None;
        }
        Some(self.offsets.partition_point(|&o| o <= i) - 1)
    }
}

impl TryFrom<Vec<Block>> for BlockStructure {
    type Error = Error;

    fn try_from(blocks: Vec<Block>) -> Result<Self> {
        Self::new(blocks)
    }
}

impl From<BlockStructure> for Vec<Block> {
    fn from(s: BlockStructure) -> Self {
        s.blocks
    }
}

/// Mapping between user-facing KCC numbers (1-based, arbitrary order of
/// correlated lists) and internal contiguous positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KccLayout {
    structure: BlockStructure,
    internal_to_user: Vec<usize>,
    user_to_internal: Vec<usize>,
}

impl KccLayout {
    /// Correlated lists are placed first in declaration order; remaining KCCs
    /// follow in ascending user order.
    pub fn new(n: usize, lists: &[Vec<usize>]) -> Result<Self> {
        let mut taken = vec![false; n + 1];
        let mut internal_to_user = Vec::with_capacity(n);
        for (li, list) in lists.iter().enumerate() {
            for &u in list {
                if u == 0 || u > n {
                    return Err(Error::InvalidStructure(format!(
                        "list {} names KCC {u}, outside 1..={n}",
                        li + 1
                    )));
                }
                if taken[u] {
                    return Err(Error::InvalidStructure(format!(
                        "KCC {u} appears in more than one correlated list"
                    )));
                }
                taken[u] = true;
                internal_to_user.push(u);
            }
        }
        internal_to_user.extend((1..=n).filter(|&u| !taken[u]));
        let sizes: Vec<usize> = lists.iter().map(Vec::len).collect();
        let structure = BlockStructure::with_lists(&sizes, n)?;
        let mut user_to_internal = vec![usize::MAX; n + 1];
        for (i, &u) in internal_to_user.iter().enumerate() {
            user_to_internal[u] = i;
        }
        Ok(Self {
            structure,
            internal_to_user,
            user_to_internal,
        })
    }

    pub fn structure(&self) -> &BlockStructure {
        &self.structure
    }

    pub fn n(&self) -> usize {
        self.internal_to_user.len()
    }

    /// 1-based user number of internal position `i`.
    pub fn user_of(&self, i: usize) -> usize {
        self.internal_to_user[i]
    }

    /// Internal position of 1-based user KCC `u`.
    pub fn internal_of(&self, u: usize) -> Option<usize> {
        self.user_to_internal.get(u).copied().filter(|&i| i != usize::MAX)
    }

    /// Reorders a vector given in internal order into user order.
    pub fn to_user_order(&self, internal: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; internal.len()];
        for (i, v) in internal.iter().enumerate() {
            out[self.internal_to_user[i] - 1] = *v;
        }
        out
    }

    /// Permutes the columns of a matrix given in user order into internal order.
    pub fn columns_to_internal(&self, m: &Matrix) -> Matrix {
        Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, self.internal_to_user[j] - 1)])
    }
}

// ---------------------------------------------------------------------------
// Correlation blocks
// ---------------------------------------------------------------------------

/// Equicorrelation matrix `B⁻¹ = (1 - k)·I + k·11ᵀ` of order `dim`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equicorrelation {
    pub dim: usize,
    pub coef: f64,
}

impl Equicorrelation {
    pub fn new(dim: usize, coef: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidStructure("zero-sized block".into()));
        }
        let coef = if dim == 1 { 0.0 } else { coef };
        if dim > 1 {
            let (lo, hi) = pd_interval(dim);
            if !(coef > lo && coef < hi) {
                return Err(Error::Domain(format!(
                    "correlation {coef} outside ({lo}, {hi}) for a block of size {dim}"
                )));
            }
        }
        Ok(Self { dim, coef })
    }

    pub fn identity(dim: usize) -> Self {
        Self { dim, coef: 0.0 }
    }

    fn shrink(&self) -> f64 {
        self.coef / (1.0 + (self.dim as f64 - 1.0) * self.coef)
    }

    /// The stored correlation matrix `B⁻¹`.
    pub fn matrix(&self) -> Matrix {
        Matrix::from_fn(self.dim, self.dim, |i, j| if i == j { 1.0 } else { self.coef })
    }

    /// `B`, via the closed-form inverse of the equicorrelation matrix.
    pub fn precision(&self) -> Matrix {
        let c = self.shrink();
        let s = 1.0 / (1.0 - self.coef);
        Matrix::from_fn(self.dim, self.dim, |i, j| {
            s * (if i == j { 1.0 } else { 0.0 } - c)
        })
    }

    /// `ln det B = -ln det B⁻¹`.
    pub fn ln_det_precision(&self) -> f64 {
        let d = self.dim as f64;
        -((1.0 + (d - 1.0) * self.coef).ln() + (d - 1.0) * (1.0 - self.coef).ln())
    }

    /// `Tr(B·S)` for a symmetric `dim × dim` matrix `S`.
    pub fn trace_precision_product(&self, s: &Matrix) -> f64 {
        let total: f64 = s.as_slice().iter().sum();
        (s.trace() - self.shrink() * total) / (1.0 - self.coef)
    }

    /// `vᵀ·B·v`.
    pub fn precision_quadratic(&self, v: &[f64]) -> f64 {
        let sum: f64 = v.iter().sum();
        (dot(v, v) - self.shrink() * sum * sum) / (1.0 - self.coef)
    }
}

/// Open interval of correlation coefficients for which an equicorrelation
/// matrix of order `dim ≥ 2` is positive definite.
pub fn pd_interval(dim: usize) -> (f64, f64) {
    (-1.0 / (dim as f64 - 1.0), 1.0)
}

/// Per-block correlation matrices `B_i⁻¹`, aligned with a [`BlockStructure`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationBlocks {
    blocks: Vec<Equicorrelation>,
}

impl CorrelationBlocks {
    pub fn identity(structure: &BlockStructure) -> Self {
        Self {
            blocks: structure
                .blocks()
                .iter()
                .map(|b| Equicorrelation::identity(b.size))
                .collect(),
        }
    }

    /// One coefficient per correlated block, in block order.
    pub fn with_coefficients(structure: &BlockStructure, coefs: &[f64]) -> Result<Self> {
        if coefs.len() != structure.num_correlated() {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients for {} correlated blocks",
                coefs.len(),
                structure.num_correlated()
            )));
        }
        let mut blocks = Vec::with_capacity(structure.num_blocks());
        for (r, b) in structure.blocks().iter().enumerate() {
            blocks.push(if b.correlated {
                Equicorrelation::new(b.size, coefs[r])?
            } else {
                Equicorrelation::identity(1)
            });
        }
        Ok(Self { blocks })
    }

    pub fn get(&self, r: usize) -> &Equicorrelation {
        &self.blocks[r]
    }

    pub fn set_coef(&mut self, r: usize, coef: f64) -> Result<()> {
        self.blocks[r] = Equicorrelation::new(self.blocks[r].dim, coef)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Equicorrelation> {
        self.blocks.iter()
    }

    /// Coefficients of the correlated blocks.
    pub fn coefficients(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .filter(|b| b.dim > 1)
            .map(|b| b.coef)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Fault-quality model and data
// ---------------------------------------------------------------------------

/// The `M × N` fault-pattern matrix `Φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaultQualityModel {
    phi: Matrix,
}

impl FaultQualityModel {
    pub fn new(phi: Matrix) -> Result<Self> {
        if phi.rows() == 0 || phi.cols() == 0 {
            return Err(Error::DimensionMismatch("empty fault-pattern matrix".into()));
        }
        if !phi.is_finite() {
            return Err(Error::Domain("fault-pattern matrix has non-finite entries".into()));
        }
        for j in 0..phi.cols() {
            if (0..phi.rows()).all(|i| phi[(i, j)] == 0.0) {
                return Err(Error::Domain(format!(
                    "column {} of the fault-pattern matrix is all zero",
                    j + 1
                )));
            }
        }
        Ok(Self { phi })
    }

    pub fn phi(&self) -> &Matrix {
        &self.phi
    }

    pub fn m(&self) -> usize {
        self.phi.rows()
    }

    pub fn n(&self) -> usize {
        self.phi.cols()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_matrix_file(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_matrix_file(path, &self.phi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// True KCC vector per sample.
    pub x: Vec<Vec<f64>>,
    /// True group index per sample.
    pub labels: Vec<usize>,
    /// Per-group true variance of every KCC.
    pub group_variances: Vec<Vec<f64>>,
    /// Per-group fault indicator of every KCC.
    pub fault_mask: Vec<Vec<bool>>,
    /// Generation-order index of each sample (identity when not shuffled).
    pub source_index: Vec<usize>,
}

impl GroundTruth {
    pub fn num_groups(&self) -> usize {
        self.group_variances.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<Vec<f64>>,
    truth: Option<GroundTruth>,
}

impl Dataset {
    pub fn new(y: Vec<Vec<f64>>) -> Result<Self> {
        let m = y.first().map(Vec::len).ok_or(Error::EmptyInput("dataset"))?;
        if m == 0 {
            return Err(Error::DimensionMismatch("samples of length 0".into()));
        }
        if let Some(k) = y.iter().position(|s| s.len() != m) {
            return Err(Error::DimensionMismatch(format!(
                "sample {k} has length {}, expected {m}",
                y[k].len()
            )));
        }
        Ok(Self { y, truth: None })
    }

    pub fn with_truth(y: Vec<Vec<f64>>, truth: GroundTruth) -> Result<Self> {
        let mut ds = Self::new(y)?;
        let k = ds.num_samples();
        if truth.x.len() != k || truth.labels.len() != k || truth.source_index.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "ground truth covers {} / {} samples, dataset has {k}",
                truth.x.len(),
                truth.labels.len()
            )));
        }
        let g = truth.group_variances.len();
        if truth.fault_mask.len() != g || truth.labels.iter().any(|&l| l >= g) {
            return Err(Error::DimensionMismatch(
                "ground-truth group arrays disagree".into(),
            ));
        }
        ds.truth = Some(truth);
        Ok(ds)
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.y
    }

    pub fn sample(&self, k: usize) -> &[f64] {
        &self.y[k]
    }

    pub fn num_samples(&self) -> usize {
        self.y.len()
    }

    pub fn m(&self) -> usize {
        self.y[0].len()
    }

    pub fn truth(&self) -> Option<&GroundTruth> {
        self.truth.as_ref()
    }

    /// `M × K` matrix with one column per sample.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.m(), self.num_samples(), |i, k| self.y[k][i])
    }

    pub fn from_matrix(y: &Matrix) -> Result<Self> {
        Self::new((0..y.cols()).map(|k| y.column(k)).collect())
    }

    /// Loads `Y` from a matrix file with an `M K` header, one column per sample.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_matrix(&read_matrix_file(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_matrix_file(path, &self.to_matrix())
    }
}

/// Shape and rate of the Gamma priors. One pair serves both the group
/// precisions and the noise precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperpriors {
    pub a: f64,
    pub b: f64,
}

pub const DEFAULT_HYPERPRIOR: f64 = 1e-4;

impl Default for Hyperpriors {
    fn default() -> Self {
        Self::new(DEFAULT_HYPERPRIOR, DEFAULT_HYPERPRIOR)
    }
}

impl Hyperpriors {
    pub fn new(a: f64, b: f64) -> Self {
        Self { a, b }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a", self.a), ("b", self.b)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "hyperprior {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Variational state
// ---------------------------------------------------------------------------

/// All variational posterior quantities of one inference run.
#[derive(Debug, Clone, PartialEq)]
pub struct VbState {
    /// Posterior means `μ_k`, one length-`N` vector per sample.
    pub mu: Vec<Vec<f64>>,
    /// Posterior covariances `Σ_k`.
    pub sigma: Vec<Matrix>,
    /// Gamma shape `a_{g,r}`, `G × R`.
    pub gamma_a: Matrix,
    /// Gamma rate `b_{g,r}`, `G × R`.
    pub gamma_b: Matrix,
    /// Responsibilities `E[z_{k,g}]`, `K × G`.
    pub resp: Matrix,
    pub alpha_a: f64,
    pub alpha_b: f64,
    pub corr: CorrelationBlocks,
    pub iteration: usize,
}

impl VbState {
    pub fn num_samples(&self) -> usize {
        self.mu.len()
    }

    pub fn num_groups(&self) -> usize {
        self.resp.cols()
    }

    pub fn expected_alpha(&self) -> f64 {
        self.alpha_a / self.alpha_b
    }

    pub fn expected_gamma(&self, g: usize, r: usize) -> f64 {
        self.gamma_a[(g, r)] / self.gamma_b[(g, r)]
    }

    /// Per-sample prior precision weights `Σ_g E[γ_{g,r}]·E[z_{k,g}]`, one per block.
    pub fn prior_weights(&self, k: usize) -> Vec<f64> {
        let g_count = self.num_groups();
        let r_count = self.gamma_a.cols();
        let resp = self.resp.row(k);
        (0..r_count)
            .map(|r| {
                (0..g_count)
                    .map(|g| self.expected_gamma(g, r) * resp[g])
                    .sum()
            })
            .collect()
    }

    /// Lists every violated state invariant; empty when the state is valid.
    pub fn invariant_violations(&self, resp_floor: f64) -> Vec<String> {
        let mut out = Vec::new();
        for (k, s) in self.sigma.iter().enumerate() {
            if crate::numerics::cholesky_lower_with(
                s,
                &crate::numerics::Tolerances {
                    jitter_ladder: vec![0.0],
                    ..Default::default()
                },
            )
            .is_err()
            {
                out.push(format!("Σ_{k} is not symmetric positive definite"));
            }
        }
        for k in 0..self.resp.rows() {
            let row = self.resp.row(k);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                out.push(format!("responsibility row {k} sums to {sum}"));
            }
            // allow one ulp of slack below the floor from renormalisation
            if row
                .iter()
                .any(|&v| !(v >= resp_floor * (1.0 - 1e-12) && v <= 1.0))
            {
                out.push(format!("responsibility row {k} has entries outside [floor, 1]: {row:?}"));
            }
        }
        for (name, m) in [("a", &self.gamma_a), ("b", &self.gamma_b)] {
            if m.as_slice().iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                out.push(format!("gamma_{name} has a non-positive entry"));
            }
        }
        if !(self.alpha_a > 0.0 && self.alpha_b > 0.0) {
            out.push(format!(
                "noise Gamma parameters not positive: ({}, {})",
                self.alpha_a, self.alpha_b
            ));
        }
        for b in self.corr.iter().filter(|b| b.dim > 1) {
            let (lo, hi) = pd_interval(b.dim);
            if !(b.coef > lo && b.coef < hi) {
                out.push(format!("correlation {} outside ({lo}, {hi})", b.coef));
            }
        }
        out
    }
}

/// `(μ_{k,r}, Σ_{k,r})`: the block-`r` slice of sample `k`'s posterior.
pub fn block_slice(
    state: &VbState,
    structure: &BlockStructure,
    k: usize,
    r: usize,
) -> Result<(Vec<f64>, Matrix)> {
    if k >= state.num_samples() {
        return Err(Error::IndexOutOfRange(format!(
            "sample {k} of {}",
            state.num_samples()
        )));
    }
    if r >= structure.num_blocks() {
        return Err(Error::IndexOutOfRange(format!(
            "block {r} of {}",
            structure.num_blocks()
        )));
    }
    let range = structure.range(r);
    let mu = state.mu[k][range.clone()].to_vec();
    let sigma = state.sigma[k].principal_block(range.start, range.len());
    Ok((mu, sigma))
}

/// Block-diagonal prior precision of sample `k`: block `r` is
/// `Σ_g E[γ_{g,r}]·E[z_{k,g}]·B_r`.
pub fn assemble_prior_precision(
    state: &VbState,
    structure: &BlockStructure,
    k: usize,
) -> Result<Matrix> {
    if k >= state.num_samples() {
        return Err(Error::IndexOutOfRange(format!(
            "sample {k} of {}",
            state.num_samples()
        )));
    }
    let n = structure.n();
    let weights = state.prior_weights(k);
    let mut out = Matrix::zeros(n, n);
    for (r, w) in weights.iter().enumerate() {
        let range = structure.range(r);
        let b = state.corr.get(r).precision();
        if !b.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: range.start });
        }
        for i in 0..range.len() {
            for j in 0..range.len() {
                out[(range.start + i, range.start + j)] = w * b[(i, j)];
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Plain-text matrix files
// ---------------------------------------------------------------------------

/// Parses `"rows cols"` followed by `rows` lines of `cols` whitespace-separated
/// numbers. Blank lines and lines starting with `#` are skipped.
pub fn parse_matrix(text: &str, context: &str) -> Result<Matrix> {
    let err = |message: String| Error::Parse {
        context: context.to_string(),
        message,
    };
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| err("missing header".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|e| err(format!("bad header `{header}`: {e}"))))
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else {
        return Err(err(format!("header must be `rows cols`, got `{header}`")));
    };
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| err(format!("expected {rows} rows, found {i}")))?;
        let before = data.len();
        for tok in line.split_whitespace() {
            data.push(
                tok.parse::<f64>()
                    .map_err(|e| err(format!("row {}: `{tok}`: {e}", i + 1)))?,
            );
        }
        if data.len() - before != cols {
            return Err(err(format!(
                "row {} has {} entries, expected {cols}",
                i + 1,
                data.len() - before
            )));
        }
    }
    if lines.next().is_some() {
        return Err(err(format!("more than {rows} rows")));
    }
    Matrix::from_row_major(rows, cols, data)
}

pub fn format_matrix(m: &Matrix) -> String {
    let mut out = format!("{} {}\n", m.rows(), m.cols());
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", row.join(" ")).unwrap();
    }
    out
}

pub fn read_matrix_file(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_matrix(&text, &path.display().to_string())
}

pub fn write_matrix_file(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    std::fs::write(path, format_matrix(m))?;
    Ok(())
}
