//! Synthetic scenarios: random unit-norm dictionaries, correlated KCC draws
//! and the two-group nonstationary fault layout.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{
    CorrelationBlocks, Dataset, Equicorrelation, FaultQualityModel, GroundTruth, KccLayout,
};
use crate::numerics::{cholesky_lower, norm_sq, Matrix};

pub const DEFAULT_FAULT_VARIANCE: f64 = 1.0;
pub const DEFAULT_NONFAULT_VARIANCE: f64 = 0.01;
pub const DEFAULT_NOISE_VARIANCE: f64 = 1e-6;

/// Where the fault-pattern matrix comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Dictionary {
    /// Fresh unit-hypersphere columns drawn from the scenario seed.
    Sampled,
    /// A fixed matrix, columns already in internal KCC order.
    Fixed(FaultQualityModel),
}

/// A complete generative experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub m: usize,
    pub layout: KccLayout,
    /// One coefficient per correlated block.
    pub correlations: Vec<f64>,
    /// Faulty block indices of each group.
    pub groups: Vec<Vec<usize>>,
    pub fault_variance: f64,
    pub nonfault_variance: f64,
    pub noise_variance: f64,
    pub samples_per_group: usize,
    pub shuffle: bool,
    pub seed: u64,
    pub dictionary: Dictionary,
}

impl Scenario {
    /// Synthetic study: `M = 8`, `N = 40`, two correlated lists of three
    /// KCCs (1–3 and 4–6), two groups with disjoint faults, 60 samples per
    /// group. Group 1 faults list 1 and KCCs 7–9; group 2 faults list 2 and
    /// KCCs 10–12.
    pub fn numerical_study(k: f64, seed: u64) -> Result<Self> {
        let layout = KccLayout::new(40, &[vec![1, 2, 3], vec![4, 5, 6]])?;
        let groups = vec![
            faulty_blocks_from_kccs(&layout, &[1, 2, 3, 7, 8, 9])?,
            faulty_blocks_from_kccs(&layout, &[4, 5, 6, 10, 11, 12])?,
        ];
        let s = Self {
            m: 8,
            layout,
            correlations: vec![k, k],
            groups,
            fault_variance: DEFAULT_FAULT_VARIANCE,
            nonfault_variance: DEFAULT_NONFAULT_VARIANCE,
            noise_variance: DEFAULT_NOISE_VARIANCE,
            samples_per_group: 60,
            shuffle: true,
            seed,
            dictionary: Dictionary::Sampled,
        };
        s.validate()?;
        Ok(s)
    }

    /// Assembly-line study: `N = 33` KCCs with correlated lists {8..13} and
    /// {31, 32, 33}, `M = 12`, 50 samples per group. Group 1 faults the first
    /// list; group 2 faults both lists plus `extra_independent` (user KCC
    /// numbers). The dictionary defaults to a sampled stand-in; replace
    /// `dictionary` with the real fault-pattern matrix when available.
    pub fn assembly_study(k: f64, seed: u64, extra_independent: &[usize]) -> Result<Self> {
        let layout = KccLayout::new(33, &[(8..=13).collect(), vec![31, 32, 33]])?;
        let mut g2: Vec<usize> = (8..=13).chain(31..=33).collect();
        g2.extend_from_slice(extra_independent);
        let groups = vec![
            faulty_blocks_from_kccs(&layout, &(8..=13).collect::<Vec<_>>())?,
            faulty_blocks_from_kccs(&layout, &g2)?,
        ];
        let s = Self {
            m: 12,
            layout,
            correlations: vec![k, k],
            groups,
            fault_variance: DEFAULT_FAULT_VARIANCE,
            nonfault_variance: DEFAULT_NONFAULT_VARIANCE,
            noise_variance: DEFAULT_NOISE_VARIANCE,
            samples_per_group: 50,
            shuffle: true,
            seed,
            dictionary: Dictionary::Sampled,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn n(&self) -> usize {
        self.layout.n()
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_samples(&self) -> usize {
        self.samples_per_group * self.groups.len()
    }

    pub fn set_correlation(&mut self, k: f64) {
        self.correlations.iter_mut().for_each(|c| *c = k);
    }

    pub fn correlation_blocks(&self) -> Result<CorrelationBlocks> {
        CorrelationBlocks::with_coefficients(self.layout.structure(), &self.correlations)
    }

    /// `true` where KCC position `i` is faulty in group `g`.
    pub fn fault_mask(&self, g: usize) -> Vec<bool> {
        let structure = self.layout.structure();
        let mut mask = vec![false; structure.n()];
        for &r in &self.groups[g] {
            for i in structure.range(r) {
                mask[i] = true;
            }
        }
        mask
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let structure = self.layout.structure();
        if self.m == 0 {
            return bad("M must be at least 1".into());
        }
        if self.groups.is_empty() {
            return bad("at least one group is required".into());
        }
        if self.samples_per_group == 0 {
            return bad("samples_per_group must be positive".into());
        }
        if !(self.nonfault_variance > 0.0 && self.fault_variance > self.nonfault_variance) {
            return bad(format!(
                "need fault_variance > nonfault_variance > 0, got {} and {}",
                self.fault_variance, self.nonfault_variance
            ));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return bad(format!("noise_variance must be ≥ 0, got {}", self.noise_variance));
        }
        for (g, faults) in self.groups.iter().enumerate() {
            if let Some(&r) = faults.iter().find(|&&r| r >= structure.num_blocks()) {
                return bad(format!(
                    "group {} names block {r}, but there are {} blocks",
                    g + 1,
                    structure.num_blocks()
                ));
            }
        }
        self.correlation_blocks()?;
        if let Dictionary::Fixed(model) = &self.dictionary {
            if model.m() != self.m || model.n() != self.n() {
                return Err(Error::DimensionMismatch(format!(
                    "fault-pattern matrix is {}x{}, scenario expects {}x{}",
                    model.m(),
                    model.n(),
                    self.m,
                    self.n()
                )));
            }
        }
        Ok(())
    }
}

/// Maps 1-based user KCC numbers to the sorted set of blocks containing them.
pub fn faulty_blocks_from_kccs(layout: &KccLayout, kccs: &[usize]) -> Result<Vec<usize>> {
    let mut blocks = Vec::with_capacity(kccs.len());
    for &u in kccs {
        let i = layout.internal_of(u).ok_or_else(|| {
            Error::InvalidConfig(format!("KCC {u} is outside 1..={}", layout.n()))
        })?;
        blocks.push(layout.structure().block_of(i).expect("position in range"));
    }
    blocks.sort_unstable();
    blocks.dedup();
    Ok(blocks)
}

/// `M × N` matrix whose columns are independent, uniformly distributed on the
/// unit sphere in `R^M`.
pub fn sample_dictionary<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> Result<FaultQualityModel> {
    let mut phi = Matrix::zeros(m, n);
    for j in 0..n {
        let col = loop {
            let c: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
            let norm = norm_sq(&c).sqrt();
            if norm > 0.0 {
                break c.into_iter().map(|v| v / norm).collect::<Vec<f64>>();
            }
        };
        for (i, v) in col.into_iter().enumerate() {
            phi[(i, j)] = v;
        }
    }
    FaultQualityModel::new(phi)
}

/// Draws `x ~ N(0, γ⁻¹·B⁻¹)` for one block as `L·u`, with `L` the lower
/// Cholesky factor of the covariance and `u` standard normal.
#[derive(Debug, Clone)]
pub struct BlockSampler {
    factor: Matrix,
}

impl BlockSampler {
    pub fn new(gamma_inv: f64, block: &Equicorrelation) -> Result<Self> {
        if !(gamma_inv > 0.0 && gamma_inv.is_finite()) {
            return Err(Error::Domain(format!("variance {gamma_inv} is not positive")));
        }
        let factor = cholesky_lower(&block.matrix().scale(gamma_inv))?;
        Ok(Self { factor })
    }

    pub fn dim(&self) -> usize {
        self.factor.rows()
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let d = self.dim();
        let u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for (i, o) in out.iter_mut().enumerate().take(d) {
            *o = self.factor.row(i)[..=i]
                .iter()
                .zip(&u)
                .map(|(l, z)| l * z)
                .sum();
        }
    }
}

/// One correlated KCC draw with covariance `gamma_inv · B⁻¹`.
pub fn draw_kcc_block<R: Rng + ?Sized>(
    gamma_inv: f64,
    block: &Equicorrelation,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let sampler = BlockSampler::new(gamma_inv, block)?;
    let mut out = vec![0.0; sampler.dim()];
    sampler.sample_into(rng, &mut out);
    Ok(out)
}

/// Generates `Φ` and the sample matrix with full ground truth.
///
/// The dictionary and the KCC/noise draws use separate streams of the same
/// seed, so swapping a sampled dictionary for a fixed one leaves `X` unchanged.
pub fn generate(scenario: &Scenario) -> Result<(FaultQualityModel, Dataset)> {
    scenario.validate()?;
    let structure = scenario.layout.structure();
    let n = structure.n();
    let corr = scenario.correlation_blocks()?;

    let model = match &scenario.dictionary {
        Dictionary::Sampled => {
            let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
            sample_dictionary(scenario.m, n, &mut rng)?
        }
        Dictionary::Fixed(model) => model.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    rng.set_stream(1);

    let g_count = scenario.num_groups();
    let mut group_variances = Vec::with_capacity(g_count);
    let mut fault_mask = Vec::with_capacity(g_count);
    let mut samplers = Vec::with_capacity(g_count);
    for g in 0..g_count {
        let mask = scenario.fault_mask(g);
        let per_block: Vec<BlockSampler> = (0..structure.num_blocks())
            .map(|r| {
                let v = if scenario.groups[g].contains(&r) {
                    scenario.fault_variance
                } else {
                    scenario.nonfault_variance
                };
                BlockSampler::new(v, corr.get(r))
            })
            .collect::<Result<_>>()?;
        group_variances.push(
            mask.iter()
                .map(|&f| if f { scenario.fault_variance } else { scenario.nonfault_variance })
                .collect(),
        );
        fault_mask.push(mask);
        samplers.push(per_block);
    }

    let k_count = scenario.num_samples();
    let noise_sd = scenario.noise_variance.sqrt();
    let mut xs = Vec::with_capacity(k_count);
    let mut ys = Vec::with_capacity(k_count);
    let mut labels = Vec::with_capacity(k_count);
    for (g, per_block) in samplers.iter().enumerate() {
        for _ in 0..scenario.samples_per_group {
            let mut x = vec![0.0; n];
            for (r, sampler) in per_block.iter().enumerate() {
                sampler.sample_into(&mut rng, &mut x[structure.range(r)]);
            }
            let mut y = model.phi().matvec(&x)?;
            for v in y.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += noise_sd * z;
            }
            xs.push(x);
            ys.push(y);
            labels.push(g);
        }
    }

    let mut order: Vec<usize> = (0..k_count).collect();
    if scenario.shuffle {
        order.shuffle(&mut rng);
    }
    let y = order.iter().map(|&i| ys[i].clone()).collect();
    let truth = GroundTruth {
        x: order.iter().map(|&i| xs[i].clone()).collect(),
        labels: order.iter().map(|&i| labels[i]).collect(),
        group_variances,
        fault_mask,
        source_index: order,
    };
    let data = Dataset::with_truth(y, truth)?;
    Ok((model, data))
}
