//! Variational Bayes EM for the clustered, block-correlated sparse model.
//!
//! One iteration performs coordinate-ascent updates in the order
//! γ → z → α → B → (μ, Σ). [`initialize`] performs the first (μ, Σ) pass, so
//! the cyclic sequence is μ/Σ, γ, z, α, B, μ/Σ, … and every iteration ends
//! with a fresh posterior mean that the stopping rule compares against the
//! previous one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    pd_interval, BlockStructure, CorrelationBlocks, Dataset, FaultQualityModel, Hyperpriors,
    VbState,
};
use crate::numerics::{
    cholesky_lower_with, digamma, dot, forward_substitute, logsumexp, Matrix, Tolerances,
};

/// Lower clamp applied to every Gamma shape and rate.
pub const GAMMA_PARAM_FLOOR: f64 = 1e-12;
/// Margin kept between a projected correlation and the PD boundary.
pub const CORRELATION_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VbemConfig {
    /// Number of latent groups `G`.
    pub groups: usize,
    pub max_iters: usize,
    /// Stop once `max_k ‖μ_k^{t-1} - μ_k^t‖_∞` falls below this.
    pub conv_threshold: f64,
    pub resp_floor: f64,
    pub init_seed: u64,
    /// When false, the correlation blocks stay at their initial identity.
    pub estimate_correlation: bool,
    #[serde(skip)]
    pub tolerances: Tolerances,
}

impl Default for VbemConfig {
    fn default() -> Self {
        Self {
            groups: 2,
            max_iters: 500,
            conv_threshold: 1e-6,
            resp_floor: 1e-8,
            init_seed: 0,
            estimate_correlation: true,
            tolerances: Tolerances::default(),
        }
    }
}

impl VbemConfig {
    pub fn with_groups(groups: usize) -> Self {
        Self {
            groups,
            ..Self::default()
        }
    }

    /// The plain multiple-measurement-vector baseline: one group, fixed
    /// identity correlation.
    pub fn msbl_baseline() -> Self {
        Self {
            groups: 1,
            estimate_correlation: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.groups == 0 {
            return bad("groups must be at least 1".into());
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive".into());
        }
        if !(self.conv_threshold > 0.0) {
            return bad(format!("conv_threshold must be positive, got {}", self.conv_threshold));
        }
        if !(self.resp_floor > 0.0 && self.resp_floor < 1.0 / self.groups as f64) {
            return bad(format!(
                "resp_floor must lie in (0, 1/G) = (0, {}), got {}",
                1.0 / self.groups as f64,
                self.resp_floor
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub max_mu_change: f64,
    pub expected_alpha: f64,
    /// `Σ_k E[z_{k,g}]` per group.
    pub group_mass: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub records: Vec<IterationRecord>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl ConvergenceTrace {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn last_change(&self) -> Option<f64> {
        self.records.last().map(|r| r.max_mu_change)
    }
}

fn check_dimensions(
    model: &FaultQualityModel,
    data: &Dataset,
    structure: &BlockStructure,
) -> Result<()> {
    if model.m() != data.m() {
        return Err(Error::DimensionMismatch(format!(
            "Φ has {} rows but samples have length {}",
            model.m(),
            data.m()
        )));
    }
    if model.n() != structure.n() {
        return Err(Error::DimensionMismatch(format!(
            "Φ has {} columns but the block structure covers {} KCCs",
            model.n(),
            structure.n()
        )));
    }
    Ok(())
}

/// Builds the starting state: identity correlation, `E[α] = 1`, `E[γ] = 1`,
/// Dirichlet(1) responsibilities drawn from `cfg.init_seed`, and one
/// posterior pass for `(μ, Σ)`.
pub fn initialize(
    model: &FaultQualityModel,
    data: &Dataset,
    structure: &BlockStructure,
    hyper: &Hyperpriors,
    cfg: &VbemConfig,
) -> Result<VbState> {
    check_dimensions(model, data, structure)?;
    cfg.validate()?;
    hyper.validate()?;
    let k_count = data.num_samples();
    let g_count = cfg.groups;
    let r_count = structure.num_blocks();
    let n = structure.n();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut resp = Matrix::zeros(k_count, g_count);
    for k in 0..k_count {
        let row = resp.row_mut(k);
        if g_count == 1 {
            row[0] = 1.0;
            continue;
        }
        for v in row.iter_mut() {
            let e: f64 = Exp1.sample(&mut rng);
            *v = e.max(f64::MIN_POSITIVE);
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
        floor_and_renormalize(row, cfg.resp_floor);
    }

    let mut state = VbState {
        mu: vec![vec![0.0; n]; k_count],
        sigma: vec![Matrix::zeros(n, n); k_count],
        gamma_a: Matrix::from_fn(g_count, r_count, |_, _| 1.0),
        gamma_b: Matrix::from_fn(g_count, r_count, |_, _| 1.0),
        resp,
        alpha_a: 1.0,
        alpha_b: 1.0,
        corr: CorrelationBlocks::identity(structure),
        iteration: 0,
    };
    update_posteriors(&mut state, model, data, structure, &cfg.tolerances)?;
    Ok(state)
}

// ---------------------------------------------------------------------------
// E-step
// ---------------------------------------------------------------------------

struct PosteriorFactor {
    weights: Vec<f64>,
    /// Cholesky factor of `α⁻¹I + ΦCΦᵀ`.
    chol: Matrix,
    /// `L⁻¹·Φ·C`, `M × N`.
    whitened: Matrix,
    sigma: Matrix,
}

/// Maximum number of distinct prior-weight vectors remembered per pass.
const FACTOR_CACHE: usize = 8;

fn prior_covariance_times_phi_t(
    phi: &Matrix,
    corr: &CorrelationBlocks,
    structure: &BlockStructure,
    weights: &[f64],
) -> Matrix {
    // A = Φ·C with C = bdiag(B_r⁻¹ / w_r)
    let m = phi.rows();
    let mut a = Matrix::zeros(m, structure.n());
    for (r, &w) in weights.iter().enumerate() {
        let range = structure.range(r);
        let blk = corr.get(r);
        if range.len() == 1 {
            let j = range.start;
            for i in 0..m {
                a[(i, j)] = phi[(i, j)] / w;
            }
            continue;
        }
        let binv = blk.matrix();
        for i in 0..m {
            for (jj, j) in range.clone().enumerate() {
                let mut s = 0.0;
                for (pp, p) in range.clone().enumerate() {
                    s += phi[(i, p)] * binv[(pp, jj)];
                }
                a[(i, j)] = s / w;
            }
        }
    }
    a
}

fn prior_covariance(corr: &CorrelationBlocks, structure: &BlockStructure, weights: &[f64]) -> Matrix {
    let n = structure.n();
    let mut c = Matrix::zeros(n, n);
    for (r, &w) in weights.iter().enumerate() {
        let range = structure.range(r);
        let binv = corr.get(r).matrix();
        for (ii, i) in range.clone().enumerate() {
            for (jj, j) in range.clone().enumerate() {
                c[(i, j)] = binv[(ii, jj)] / w;
            }
        }
    }
    c
}

fn posterior_factor(
    phi: &Matrix,
    corr: &CorrelationBlocks,
    structure: &BlockStructure,
    weights: Vec<f64>,
    expected_alpha: f64,
    tol: &Tolerances,
) -> Result<PosteriorFactor> {
    let m = phi.rows();
    let n = structure.n();
    let mut sigma = prior_covariance(corr, structure, &weights);
    if expected_alpha == 0.0 {
        // no-data limit: posterior equals prior
        return Ok(PosteriorFactor {
            weights,
            chol: Matrix::identity(m),
            whitened: Matrix::zeros(m, n),
            sigma,
        });
    }
    let a = prior_covariance_times_phi_t(phi, corr, structure, &weights);
    let mut s = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let v = dot(a.row(i), phi.row(j));
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
        s[(i, i)] += 1.0 / expected_alpha;
    }
    // the two triangles of ΦCΦᵀ can differ by rounding; use the lower one
    let chol = cholesky_lower_with(&s.symmetrized(), tol)?;
    let mut whitened = Matrix::zeros(m, n);
    let mut col = vec![0.0; m];
    for j in 0..n {
        for (i, c) in col.iter_mut().enumerate() {
            *c = a[(i, j)];
        }
        forward_substitute(&chol, &mut col);
        for (i, c) in col.iter().enumerate() {
            whitened[(i, j)] = *c;
        }
    }
    // Σ = C − WᵀW
    let mut wt = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            wt[j * m + i] = whitened[(i, j)];
        }
    }
    for i in 0..n {
        let wi = &wt[i * m..(i + 1) * m];
        for j in 0..=i {
            let v = sigma[(i, j)] - dot(wi, &wt[j * m..(j + 1) * m]);
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
    }
    Ok(PosteriorFactor {
        weights,
        chol,
        whitened,
        sigma,
    })
}

/// Recomputes `Σ_k = (E[α]·ΦᵀΦ + P_k)⁻¹` and `μ_k = E[α]·Σ_k·Φᵀ·y_k` for
/// every sample, where `P_k` is the block-diagonal prior precision.
///
/// Evaluated in the `M × M` form `Σ_k = C_k − C_kΦᵀ(α⁻¹I + ΦC_kΦᵀ)⁻¹ΦC_k`,
/// with `C_k = P_k⁻¹` available in closed form. Samples whose prior weights
/// coincide bit-for-bit share one factorization.
pub fn update_posteriors(
    state: &mut VbState,
    model: &FaultQualityModel,
    data: &Dataset,
    structure: &BlockStructure,
    tol: &Tolerances,
) -> Result<()> {
    check_dimensions(model, data, structure)?;
    let phi = model.phi();
    let alpha = state.expected_alpha();
    let mut cache: Vec<PosteriorFactor> = Vec::new();
    let mut proj = vec![0.0; phi.rows()];
    for k in 0..state.num_samples() {
        let weights = state.prior_weights(k);
        if let Some((r, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(**w > 0.0 && w.is_finite()))
        {
            return Err(Error::Domain(format!(
                "prior weight {w} for sample {k}, block {r} is not positive"
            )));
        }
        let idx = match cache.iter().position(|f| f.weights == weights) {
            Some(i) => i,
            None => {
                let f = posterior_factor(phi, &state.corr, structure, weights, alpha, tol)?;
                if cache.len() == FACTOR_CACHE {
                    cache.remove(0);
                }
                cache.push(f);
                cache.len() - 1
            }
        };
        let f = &cache[idx];
        state.sigma[k].clone_from(&f.sigma);
        if alpha == 0.0 {
            state.mu[k].iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        // μ = Wᵀ·L⁻¹·y
        proj.copy_from_slice(data.sample(k));
        forward_substitute(&f.chol, &mut proj);
        state.mu[k] = f.whitened.tr_matvec(&proj)?;
    }
    Ok(())
}

/// `Tr(B_r·(Σ_{k,r} + μ_{k,r}μ_{k,r}ᵀ))` for every sample and block, `K × R`.
pub fn block_energies(state: &VbState, structure: &BlockStructure) -> Matrix {
    let k_count = state.num_samples();
    let r_count = structure.num_blocks();
    let mut e = Matrix::zeros(k_count, r_count);
    for k in 0..k_count {
        let mu = &state.mu[k];
        let sigma = &state.sigma[k];
        for r in 0..r_count {
            let range = structure.range(r);
            e[(k, r)] = if range.len() == 1 {
                let i = range.start;
                sigma[(i, i)] + mu[i] * mu[i]
            } else {
                let blk = state.corr.get(r);
                let s = sigma.principal_block(range.start, range.len());
                blk.trace_precision_product(&s) + blk.precision_quadratic(&mu[range])
            };
        }
    }
    e
}

/// Gamma posterior of the group/block precisions:
/// `a_{g,r} = 2a − 1 + Σ_k ncol(B_r)·E[z_{k,g}]`,
/// `b_{g,r} = 2b + Σ_k E[z_{k,g}]·Tr(B_r(Σ_{k,r} + μ_{k,r}μ_{k,r}ᵀ))`,
/// both clamped below at [`GAMMA_PARAM_FLOOR`].
pub fn update_gamma(state: &mut VbState, structure: &BlockStructure, hyper: &Hyperpriors) {
    let energies = block_energies(state, structure);
    let k_count = state.num_samples();
    for g in 0..state.num_groups() {
        let mass: f64 = (0..k_count).map(|k| state.resp[(k, g)]).sum();
        for r in 0..structure.num_blocks() {
            let ncol = structure.block(r).size as f64;
            let weighted: f64 = (0..k_count)
                .map(|k| state.resp[(k, g)] * energies[(k, r)])
                .sum();
            state.gamma_a[(g, r)] = (2.0 * hyper.a - 1.0 + ncol * mass).max(GAMMA_PARAM_FLOOR);
            state.gamma_b[(g, r)] = (2.0 * hyper.b + weighted).max(GAMMA_PARAM_FLOOR);
        }
    }
}

/// Pins entries below `floor` to `floor` and rescales the rest so the row
/// still sums to one. Assumes `floor < 1 / row.len()`.
pub fn floor_and_renormalize(row: &mut [f64], floor: f64) {
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= total);
    let mut pinned = vec![false; row.len()];
    loop {
        let mut changed = false;
        for (v, p) in row.iter().zip(pinned.iter_mut()) {
            if !*p && *v < floor {
                *p = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let n_pinned = pinned.iter().filter(|p| **p).count();
        let free: f64 = row
            .iter()
            .zip(&pinned)
            .filter(|(_, p)| !**p)
            .map(|(v, _)| *v)
            .sum();
        let scale = (1.0 - n_pinned as f64 * floor) / free;
        for (v, p) in row.iter_mut().zip(&pinned) {
            *v = if *p { floor } else { *v * scale };
        }
    }
}

/// Softmax of one row of logits followed by flooring.
///
/// Written as `exp(ξ_g − ξ_max) / Σ_h exp(ξ_h − ξ_max)`, which equals
/// `exp(ξ_g − logsumexp(ξ))` but depends only on differences of logits, so
/// an exactly representable shift of every logit gives bit-identical output.
pub fn responsibilities_from_logits(logits: &[f64], floor: f64) -> Result<Vec<f64>> {
    let lse = logsumexp(logits)?;
    if !lse.is_finite() {
        return Err(Error::Domain(format!("softmax of {logits:?}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut row: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    floor_and_renormalize(&mut row, floor);
    Ok(row)
}

/// The logits `ξ_{k,g}`, `K × G`.
pub fn responsibility_logits(state: &VbState, structure: &BlockStructure) -> Result<Matrix> {
    let energies = block_energies(state, structure);
    let g_count = state.num_groups();
    let r_count = structure.num_blocks();
    // per (g, r): ncol·E[ln γ] + ln det B_r
    let mut constant = Matrix::zeros(g_count, r_count);
    for g in 0..g_count {
        for r in 0..r_count {
            let ncol = structure.block(r).size as f64;
            let e_ln_gamma = digamma(state.gamma_a[(g, r)])? - state.gamma_b[(g, r)].ln();
            constant[(g, r)] = ncol * e_ln_gamma + state.corr.get(r).ln_det_precision();
        }
    }
    let mut xi = Matrix::zeros(state.num_samples(), g_count);
    for k in 0..state.num_samples() {
        for g in 0..g_count {
            let mut acc = 0.0;
            for r in 0..r_count {
                acc += constant[(g, r)] - state.expected_gamma(g, r) * energies[(k, r)];
            }
            if !acc.is_finite() {
                return Err(Error::NonFiniteLogit { sample: k, group: g });
            }
            xi[(k, g)] = acc;
        }
    }
    Ok(xi)
}

/// `E[z_{k,g}] = softmax_g(ξ_{k,g})`, floored at `floor` and renormalized.
pub fn update_responsibilities(
    state: &mut VbState,
    structure: &BlockStructure,
    floor: f64,
) -> Result<()> {
    let xi = responsibility_logits(state, structure)?;
    for k in 0..state.num_samples() {
        let row = responsibilities_from_logits(xi.row(k), floor)?;
        state.resp.row_mut(k).copy_from_slice(&row);
    }
    Ok(())
}

/// Noise precision posterior:
/// `a_α = a + KM/2`, `b_α = b + ½·Σ_k(‖y_k − Φμ_k‖² + Tr(ΦΣ_kΦᵀ))`.
pub fn update_alpha(
    state: &mut VbState,
    model: &FaultQualityModel,
    data: &Dataset,
    hyper: &Hyperpriors,
) -> Result<()> {
    let phi = model.phi();
    let gram = phi.transpose().matmul(phi)?;
    let mut acc = 0.0;
    for k in 0..state.num_samples() {
        let fit = phi.matvec(&state.mu[k])?;
        let resid: f64 = data
            .sample(k)
            .iter()
            .zip(&fit)
            .map(|(y, f)| (y - f) * (y - f))
            .sum();
        // Tr(ΦΣΦᵀ) = Σ_ij (ΦᵀΦ)_ij Σ_ij
        let tr = dot(gram.as_slice(), state.sigma[k].as_slice());
        acc += resid + tr;
    }
    let k_count = state.num_samples() as f64;
    state.alpha_a = hyper.a + 0.5 * k_count * model.m() as f64;
    state.alpha_b = hyper.b + 0.5 * acc;
    Ok(())
}

// ---------------------------------------------------------------------------
// M-step
// ---------------------------------------------------------------------------

/// Projects a correlation estimate onto the equicorrelation family:
/// `k̃ = θ₁ / θ₀` with `θ₀` the mean diagonal and `θ₁` the mean off-diagonal
/// entry, clamped into the PD interval with margin [`CORRELATION_MARGIN`].
/// Returns `None` when the diagonal mean is not positive.
pub fn project_equicorrelation(raw: &Matrix) -> Option<f64> {
    let d = raw.rows();
    if d < 2 || !raw.is_square() {
        return None;
    }
    let theta0 = raw.trace() / d as f64;
    let off: f64 = raw.as_slice().iter().sum::<f64>() - raw.trace();
    let theta1 = off / (d * (d - 1)) as f64;
    if !(theta0 > 0.0) || !theta1.is_finite() || !theta0.is_finite() {
        return None;
    }
    let (lo, hi) = pd_interval(d);
    Some((theta1 / theta0).clamp(lo + CORRELATION_MARGIN, hi - CORRELATION_MARGIN))
}

/// Unprojected estimate of `B_i⁻¹` for correlated block `r`:
/// `Σ_k Σ_g E[z_{k,g}]E[γ_{g,r}](μ_{k,r}μ_{k,r}ᵀ + Σ_{k,r}) / Σ_k Σ_g E[z_{k,g}]`.
pub fn raw_correlation_estimate(state: &VbState, structure: &BlockStructure, r: usize) -> Matrix {
    let range = structure.range(r);
    let d = range.len();
    let mut acc = Matrix::zeros(d, d);
    let mut mass = 0.0;
    for k in 0..state.num_samples() {
        let resp = state.resp.row(k);
        let w: f64 = (0..state.num_groups())
            .map(|g| resp[g] * state.expected_gamma(g, r))
            .sum();
        mass += resp.iter().sum::<f64>();
        let mu = &state.mu[k][range.clone()];
        for i in 0..d {
            for j in 0..d {
                acc[(i, j)] +=
                    w * (mu[i] * mu[j] + state.sigma[k][(range.start + i, range.start + j)]);
            }
        }
    }
    acc.scale(1.0 / mass)
}

/// Re-estimates the coefficient of every correlated block; independent
/// blocks are left at `[1]`.
pub fn update_correlation(state: &mut VbState, structure: &BlockStructure) -> Result<()> {
    for r in 0..structure.num_blocks() {
        if !structure.block(r).correlated {
            continue;
        }
        let raw = raw_correlation_estimate(state, structure, r);
        if let Some(k) = project_equicorrelation(&raw) {
            state.corr.set_coef(r, k)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Outer loop
// ---------------------------------------------------------------------------

/// One full iteration; returns `max_k ‖μ_k^{before} − μ_k^{after}‖_∞`.
pub fn step(
    state: &mut VbState,
    model: &FaultQualityModel,
    data: &Dataset,
    structure: &BlockStructure,
    hyper: &Hyperpriors,
    cfg: &VbemConfig,
) -> Result<f64> {
    let previous = state.mu.clone();
    update_gamma(state, structure, hyper);
    update_responsibilities(state, structure, cfg.resp_floor)?;
    update_alpha(state, model, data, hyper)?;
    if cfg.estimate_correlation {
        update_correlation(state, structure)?;
    }
    update_posteriors(state, model, data, structure, &cfg.tolerances)?;
    state.iteration += 1;
    let change = previous
        .iter()
        .zip(&state.mu)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    Ok(change)
}

/// Continues iterating from `state` until the stopping rule fires or
/// `cfg.max_iters` further iterations have run.
pub fn iterate(
    state: &mut VbState,
    model: &FaultQualityModel,
    data: &Dataset,
    structure: &BlockStructure,
    hyper: &Hyperpriors,
    cfg: &VbemConfig,
) -> Result<ConvergenceTrace> {
    cfg.validate()?;
    let mut trace = ConvergenceTrace::default();
    if data.num_samples() < cfg.groups {
        trace.warnings.push(format!(
            "K = {} samples for G = {} groups; some groups will be empty",
            data.num_samples(),
            cfg.groups
        ));
    }
    for _ in 0..cfg.max_iters {
        let change = step(state, model, data, structure, hyper, cfg)
            .map_err(|e| e.at_iteration(state.iteration + 1))?;
        let group_mass = (0..state.num_groups())
            .map(|g| (0..state.num_samples()).map(|k| state.resp[(k, g)]).sum())
            .collect();
        trace.records.push(IterationRecord {
            iteration: state.iteration,
            max_mu_change: change,
            expected_alpha: state.expected_alpha(),
            group_mass,
        });
        if change < cfg.conv_threshold {
            trace.converged = true;
            break;
        }
    }
    Ok(trace)
}

/// Initializes and iterates to convergence.
pub fn run(
    model: &FaultQualityModel,
    data: &Dataset,
    structure: &BlockStructure,
    hyper: &Hyperpriors,
    cfg: &VbemConfig,
) -> Result<(VbState, ConvergenceTrace)> {
    let mut state = initialize(model, data, structure, hyper, cfg)?;
    let trace = iterate(&mut state, model, data, structure, hyper, cfg)?;
    Ok((state, trace))
}

/// Per-group, per-KCC variance estimate `b_{g,r} / a_{g,r}` (the reciprocal of
/// `E[γ_{g,r}]`), replicated over the members of each block. `G × N`.
pub fn estimate_variances(state: &VbState, structure: &BlockStructure) -> Matrix {
    let g_count = state.num_groups();
    let mut out = Matrix::zeros(g_count, structure.n());
    for g in 0..g_count {
        for r in 0..structure.num_blocks() {
            let v = state.gamma_b[(g, r)] / state.gamma_a[(g, r)];
            for i in structure.range(r) {
                out[(g, i)] = v;
            }
        }
    }
    out
}

/// Diagonals of the per-sample posterior covariances, for inspection.
pub fn posterior_variances(state: &VbState) -> Vec<Vec<f64>> {
    state
        .sigma
        .iter()
        .map(|s| (0..s.rows()).map(|i| s[(i, i)]).collect())
        .collect()
}
