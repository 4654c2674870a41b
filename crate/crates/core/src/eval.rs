//! Diagnosis scoring: group matching, AUC, NMSE and multi-trial summaries.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockStructure, GroundTruth, VbState};
use crate::numerics::Matrix;
use crate::vbem::{estimate_variances, ConvergenceTrace};

/// Largest group count matched by exhaustive search; above it a greedy
/// assignment is used.
pub const EXHAUSTIVE_MATCH_LIMIT: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub auc: f64,
    pub nmse: f64,
    /// `matched_permutation[true_group] = estimated_group`.
    pub matched_permutation: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
}

/// How fault scores from several groups are combined into one AUC.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AucPooling {
    /// One AUC over all `G·N` (score, label) pairs.
    #[default]
    Pooled,
    /// Mean of per-group AUCs; groups with single-class labels are skipped.
    PerGroupMean,
}

fn assignment_score(resp: &Matrix, labels: &[usize], perm: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(k, &l)| resp[(k, perm[l])])
        .sum()
}

/// Finds the relabeling of estimated groups that best agrees with the true
/// labels, maximizing `Σ_k E[z_{k, π(label_k)}]`. Ties go to the
/// lexicographically smallest permutation.
pub fn match_groups(resp: &Matrix, true_labels: &[usize], true_groups: usize) -> Result<Vec<usize>> {
    let g = resp.cols();
    if g != true_groups {
        return Err(Error::GroupCountMismatch {
            estimated: g,
            truth: true_groups,
        });
    }
    if g == 0 {
        return Err(Error::EmptyInput("match_groups"));
    }
    if resp.rows() != true_labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} responsibility rows for {} labels",
            resp.rows(),
            true_labels.len()
        )));
    }
    if let Some(&l) = true_labels.iter().find(|&&l| l >= g) {
        return Err(Error::IndexOutOfRange(format!("label {l} with {g} groups")));
    }
    if g <= EXHAUSTIVE_MATCH_LIMIT {
        let mut best: Option<(f64, Vec<usize>)> = None;
        for perm in (0..g).permutations(g) {
            let score = assignment_score(resp, true_labels, &perm);
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, perm));
            }
        }
        return Ok(best.unwrap().1);
    }
    // greedy: repeatedly take the best remaining (true, estimated) pair
    let mut affinity = Matrix::zeros(g, g);
    for (k, &l) in true_labels.iter().enumerate() {
        for e in 0..g {
            affinity[(l, e)] += resp[(k, e)];
        }
    }
    let mut perm = vec![usize::MAX; g];
    let mut used = vec![false; g];
    for _ in 0..g {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for t in (0..g).filter(|&t| perm[t] == usize::MAX) {
            for e in (0..g).filter(|&e| !used[e]) {
                if affinity[(t, e)] > best.0 {
                    best = (affinity[(t, e)], t, e);
                }
            }
        }
        perm[best.1] = best.2;
        used[best.2] = true;
    }
    Ok(perm)
}

/// Area under the ROC curve as the Mann–Whitney statistic, counting ties as ½.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // mid-ranks, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum_pos += mid * order[i..j].iter().filter(|&&o| labels[o]).count() as f64;
        i = j;
    }
    let p = pos as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * neg as f64))
}

/// `‖true − est‖² / ‖true‖²`.
pub fn nmse(true_var: &[f64], est_var: &[f64]) -> Result<f64> {
    if true_var.len() != est_var.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} true values, {} estimates",
            true_var.len(),
            est_var.len()
        )));
    }
    let denom: f64 = true_var.iter().map(|t| t * t).sum();
    if denom == 0.0 {
        return Err(Error::ZeroTruth);
    }
    let num: f64 = true_var
        .iter()
        .zip(est_var)
        .map(|(t, e)| (t - e) * (t - e))
        .sum();
    Ok(num / denom)
}

/// Maps each true group to an estimated group. A single estimated group
/// absorbs every true group; otherwise the counts must agree.
pub fn group_assignment(resp: &Matrix, truth: &GroundTruth) -> Result<Vec<usize>> {
    if resp.cols() == 1 {
        return Ok(vec![0; truth.num_groups()]);
    }
    match_groups(resp, &truth.labels, truth.num_groups())
}

/// Scores a variance surface (`G_est × N`) against ground truth.
pub fn score_variances(
    variances: &Matrix,
    assignment: &[usize],
    truth: &GroundTruth,
    pooling: AucPooling,
) -> Result<(f64, f64)> {
    let n = variances.cols();
    let mut scores = Vec::with_capacity(assignment.len() * n);
    let mut labels = Vec::with_capacity(assignment.len() * n);
    let mut truth_all = Vec::with_capacity(assignment.len() * n);
    let mut per_group_auc = Vec::new();
    for (g, &e) in assignment.iter().enumerate() {
        if truth.group_variances[g].len() != n {
            return Err(Error::DimensionMismatch(format!(
                "truth has {} KCCs, estimate has {n}",
                truth.group_variances[g].len()
            )));
        }
        let row = variances.row(e);
        if pooling == AucPooling::PerGroupMean {
            match auc(row, &truth.fault_mask[g]) {
                Ok(a) => per_group_auc.push(a),
                Err(Error::DegenerateLabels) => {}
                Err(other) => return Err(other),
            }
        }
        scores.extend_from_slice(row);
        labels.extend_from_slice(&truth.fault_mask[g]);
        truth_all.extend_from_slice(&truth.group_variances[g]);
    }
    let auc_value = match pooling {
        AucPooling::Pooled => auc(&scores, &labels)?,
        AucPooling::PerGroupMean => {
            if per_group_auc.is_empty() {
                return Err(Error::DegenerateLabels);
            }
            per_group_auc.iter().sum::<f64>() / per_group_auc.len() as f64
        }
    };
    Ok((auc_value, nmse(&truth_all, &scores)?))
}

/// Scores a finished run: matches groups, then computes AUC and NMSE over
/// the group-level variance estimates.
pub fn score_trial(
    state: &VbState,
    trace: &ConvergenceTrace,
    structure: &BlockStructure,
    truth: &GroundTruth,
    pooling: AucPooling,
) -> Result<TrialResult> {
    let variances = estimate_variances(state, structure);
    let assignment = group_assignment(&state.resp, truth)?;
    let (auc, nmse) = score_variances(&variances, &assignment, truth, pooling)?;
    Ok(TrialResult {
        auc,
        nmse,
        matched_permutation: assignment,
        converged: trace.converged,
        iterations: trace.iterations(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    /// Sample standard deviation (`n − 1` denominator); 0 for one value.
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("Stats::of"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { mean, sd, min, max })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub auc: Stats,
    pub nmse: Stats,
    pub conv_rate: f64,
    pub trials: usize,
}

pub fn aggregate(results: &[TrialResult]) -> Result<Summary> {
    if results.is_empty() {
        return Err(Error::EmptyInput("aggregate"));
    }
    let aucs: Vec<f64> = results.iter().map(|r| r.auc).collect();
    let nmses: Vec<f64> = results.iter().map(|r| r.nmse).collect();
    let converged = results.iter().filter(|r| r.converged).count();
    Ok(Summary {
        auc: Stats::of(&aucs)?,
        nmse: Stats::of(&nmses)?,
        conv_rate: converged as f64 / results.len() as f64,
        trials: results.len(),
    })
}
