//! Brute-force re-derivation of the E-step on small dense problems, written
//! against plain nested vectors so it shares no code with the engine.

#![allow(dead_code)]

use cssbl::model::{BlockStructure, CorrelationBlocks, Dataset, FaultQualityModel, Hyperpriors, VbState};
use cssbl::numerics::Matrix;
use cssbl::vbem::{initialize, VbemConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Dense = Vec<Vec<f64>>;

pub fn to_dense(m: &Matrix) -> Dense {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn max_abs_diff(a: &Dense, b: &Dense) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn vec_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Gauss–Jordan inverse with partial pivoting.
pub fn inverse(a: &Dense) -> Dense {
    let n = a.len();
    let mut aug: Dense = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&x, &y| aug[x][c].abs().total_cmp(&aug[y][c].abs()))
            .unwrap();
        aug.swap(c, p);
        let piv = aug[c][c];
        assert!(piv.abs() > 1e-300, "singular matrix in oracle");
        for v in aug[c].iter_mut() {
            *v /= piv;
        }
        for r in 0..n {
            if r != c {
                let f = aug[r][c];
                if f != 0.0 {
                    for j in 0..2 * n {
                        aug[r][j] -= f * aug[c][j];
                    }
                }
            }
        }
    }
    aug.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Determinant by Gaussian elimination.
pub fn det(a: &Dense) -> f64 {
    let n = a.len();
    let mut m = a.clone();
    let mut d = 1.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs()))
            .unwrap();
        if p != c {
            m.swap(c, p);
            d = -d;
        }
        d *= m[c][c];
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for j in c..n {
                m[r][j] -= f * m[c][j];
            }
        }
    }
    d
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let (n, p, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..p {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

pub fn transpose(a: &Dense) -> Dense {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// Unit-diagonal matrix with constant off-diagonal `k`.
pub fn equicorrelation(d: usize, k: f64) -> Dense {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { k }).collect())
        .collect()
}

/// Every E-step quantity, computed from the state's current parameters.
pub struct OracleStep {
    pub sigma: Vec<Dense>,
    pub mu: Vec<Vec<f64>>,
    /// `G × R`.
    pub gamma_a: Dense,
    pub gamma_b: Dense,
    /// `K × G`, evaluated with the updated gamma parameters.
    pub logits: Dense,
    pub alpha_a: f64,
    pub alpha_b: f64,
}

/// Block `(start, len)` pairs of a structure.
pub fn spans(structure: &BlockStructure) -> Vec<(usize, usize)> {
    (0..structure.num_blocks())
        .map(|r| {
            let range = structure.range(r);
            (range.start, range.len())
        })
        .collect()
}

/// `(μ, Σ)` from the state, then gamma from those, logits from the new
/// gamma, and the noise posterior, in the engine's update order.
pub fn oracle_step(
    state: &VbState,
    phi: &Dense,
    ys: &[Vec<f64>],
    structure: &BlockStructure,
    hyper: &Hyperpriors,
) -> OracleStep {
    let n = structure.n();
    let m = phi.len();
    let g_count = state.resp.cols();
    let blocks = spans(structure);
    let coefs: Vec<f64> = state.corr.iter().map(|b| b.coef).collect();
    let b_inv: Vec<Dense> = blocks
        .iter()
        .zip(&coefs)
        .map(|(&(_, d), &c)| equicorrelation(d, if d > 1 { c } else { 0.0 }))
        .collect();
    let b_prec: Vec<Dense> = b_inv.iter().map(inverse).collect();
    let e_gamma: Dense = (0..g_count)
        .map(|g| {
            (0..blocks.len())
                .map(|r| state.gamma_a[(g, r)] / state.gamma_b[(g, r)])
                .collect()
        })
        .collect();
    let alpha = state.alpha_a / state.alpha_b;
    let phit = transpose(phi);
    let gram = matmul(&phit, phi);

    let mut sigma = Vec::new();
    let mut mu = Vec::new();
    for (k, y) in ys.iter().enumerate() {
        let mut prec = vec![vec![0.0; n]; n];
        for (r, &(start, d)) in blocks.iter().enumerate() {
            for g in 0..g_count {
                let w = state.resp[(k, g)] * e_gamma[g][r];
                for i in 0..d {
                    for j in 0..d {
                        prec[start + i][start + j] += w * b_prec[r][i][j];
                    }
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                prec[i][j] += alpha * gram[i][j];
            }
        }
        let s = inverse(&prec);
        let phity: Vec<f64> = (0..n).map(|i| (0..m).map(|t| phi[t][i] * y[t]).sum()).collect();
        let mk: Vec<f64> = (0..n)
            .map(|i| alpha * (0..n).map(|j| s[i][j] * phity[j]).sum::<f64>())
            .collect();
        sigma.push(s);
        mu.push(mk);
    }

    // energies e_{k,r} = Tr(B_r (Σ_r + μ_r μ_rᵀ))
    let energy = |k: usize, r: usize| -> f64 {
        let (start, d) = blocks[r];
        let mut t = 0.0;
        for i in 0..d {
            for j in 0..d {
                let second = sigma[k][start + j][start + i] + mu[k][start + j] * mu[k][start + i];
                t += b_prec[r][i][j] * second;
            }
        }
        t
    };

    let k_count = ys.len();
    let mut gamma_a = vec![vec![0.0; blocks.len()]; g_count];
    let mut gamma_b = vec![vec![0.0; blocks.len()]; g_count];
    for g in 0..g_count {
        for (r, &(_, d)) in blocks.iter().enumerate() {
            let mut a = 2.0 * hyper.a - 1.0;
            let mut b = 2.0 * hyper.b;
            for k in 0..k_count {
                a += d as f64 * state.resp[(k, g)];
                b += state.resp[(k, g)] * energy(k, r);
            }
            gamma_a[g][r] = a.max(1e-12);
            gamma_b[g][r] = b.max(1e-12);
        }
    }

    let mut logits = vec![vec![0.0; g_count]; k_count];
    for (k, row) in logits.iter_mut().enumerate() {
        for (g, xi) in row.iter_mut().enumerate() {
            for (r, &(_, d)) in blocks.iter().enumerate() {
                let (a, b) = (gamma_a[g][r], gamma_b[g][r]);
                *xi += d as f64 * (statrs::function::gamma::digamma(a) - b.ln())
                    + det(&b_prec[r]).ln()
                    - (a / b) * energy(k, r);
            }
        }
    }

    let mut acc = 0.0;
    for (k, y) in ys.iter().enumerate() {
        for t in 0..m {
            let fit: f64 = (0..n).map(|i| phi[t][i] * mu[k][i]).sum();
            acc += (y[t] - fit).powi(2);
        }
        let psp = matmul(&matmul(phi, &sigma[k]), &phit);
        acc += (0..m).map(|t| psp[t][t]).sum::<f64>();
    }
    OracleStep {
        sigma,
        mu,
        gamma_a,
        gamma_b,
        logits,
        alpha_a: hyper.a + 0.5 * (k_count * m) as f64,
        alpha_b: hyper.b + 0.5 * acc,
    }
}

/// A random tiny problem with an engine state whose parameters have been
/// scrambled away from the initial values.
pub struct TinyInstance {
    pub model: FaultQualityModel,
    pub data: Dataset,
    pub structure: BlockStructure,
    pub hyper: Hyperpriors,
    pub state: VbState,
    pub cfg: VbemConfig,
}

impl TinyInstance {
    pub fn phi(&self) -> Dense {
        to_dense(self.model.phi())
    }
}

/// `N ≤ max_n`, `K ≤ 3`, `M ≤ 4`, `G = groups`, one optional correlated list.
pub fn tiny_instance(seed: u64, max_n: usize, groups: usize) -> TinyInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=max_n);
    let m = rng.random_range(1..=4);
    let k_count = rng.random_range(groups.max(1)..=3.max(groups));
    let list = rng.random_range(0..=n);
    let list = if list == 1 { 0 } else { list };
    let sizes: Vec<usize> = if list >= 2 { vec![list] } else { vec![] };
    let structure = BlockStructure::with_lists(&sizes, n).unwrap();

    let phi = Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0) + 0.05);
    let model = FaultQualityModel::new(phi).unwrap();
    let ys: Vec<Vec<f64>> = (0..k_count)
        .map(|_| (0..m).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let data = Dataset::new(ys).unwrap();
    let hyper = Hyperpriors::new(rng.random_range(0.01..1.0), rng.random_range(0.01..1.0));
    let cfg = VbemConfig {
        init_seed: seed,
        ..VbemConfig::with_groups(groups)
    };
    let mut state = initialize(&model, &data, &structure, &hyper, &cfg).unwrap();
    for v in state.gamma_a.as_mut_slice() {
        *v = rng.random_range(0.5..5.0);
    }
    for v in state.gamma_b.as_mut_slice() {
        *v = rng.random_range(0.5..5.0);
    }
    state.alpha_a = rng.random_range(0.5..5.0);
    state.alpha_b = rng.random_range(0.5..5.0);
    let mut corr = CorrelationBlocks::identity(&structure);
    for r in 0..structure.num_correlated() {
        let d = structure.block(r).size as f64;
        let lo = -1.0 / (d - 1.0);
        corr.set_coef(r, rng.random_range(lo * 0.9..0.9)).unwrap();
    }
    state.corr = corr;
    TinyInstance {
        model,
        data,
        structure,
        hyper,
        state,
        cfg,
    }
}

/// Runs the engine's E-step on `inst` in the same order as the oracle and
/// returns the worst absolute disagreement across every quantity. With
/// `scaled`, each difference is divided by `max(1, |oracle value|)`.
pub fn engine_vs_oracle(inst: &TinyInstance, scaled: bool) -> f64 {
    let max_abs_diff = |a: &Dense, b: &Dense| -> f64 {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).abs() / if scaled { y.abs().max(1.0) } else { 1.0 })
            .fold(0.0, f64::max)
    };
    use cssbl::vbem::{responsibility_logits, update_alpha, update_gamma, update_posteriors};
    let oracle = oracle_step(&inst.state, &inst.phi(), inst.data.samples(), &inst.structure, &inst.hyper);
    let mut st = inst.state.clone();
    update_posteriors(&mut st, &inst.model, &inst.data, &inst.structure, &inst.cfg.tolerances).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..st.num_samples() {
        worst = worst.max(max_abs_diff(&to_dense(&st.sigma[k]), &oracle.sigma[k]));
        worst = worst.max(vec_diff(&st.mu[k], &oracle.mu[k]));
    }
    update_gamma(&mut st, &inst.structure, &inst.hyper);
    worst = worst.max(max_abs_diff(&to_dense(&st.gamma_a), &oracle.gamma_a));
    worst = worst.max(max_abs_diff(&to_dense(&st.gamma_b), &oracle.gamma_b));
    let xi = responsibility_logits(&st, &inst.structure).unwrap();
    worst = worst.max(max_abs_diff(&to_dense(&xi), &oracle.logits));
    update_alpha(&mut st, &inst.model, &inst.data, &inst.hyper).unwrap();
    worst = worst.max((st.alpha_a - oracle.alpha_a).abs());
    worst = worst.max((st.alpha_b - oracle.alpha_b).abs());
    worst
}

/// Sample covariance (known zero mean) of `draws` calls to `draw_kcc_block`.
pub fn empirical_block_covariance(d: usize, k: f64, gamma_inv: f64, draws: usize, seed: u64) -> Dense {
    let block = cssbl::model::Equicorrelation::new(d, k).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![vec![0.0; d]; d];
    for _ in 0..draws {
        let x = cssbl::datagen::draw_kcc_block(gamma_inv, &block, &mut rng).unwrap();
        for i in 0..d {
            for j in 0..d {
                acc[i][j] += x[i] * x[j];
            }
        }
    }
    acc.into_iter()
        .map(|r| r.into_iter().map(|v| v / draws as f64).collect())
        .collect()
}
