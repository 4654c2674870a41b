//! Experiment specification, correlation sweeps over seeded trials, result
//! tables and single-cell replay.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{faulty_blocks_from_kccs, generate, Dictionary, Scenario};
use crate::error::{Error, Result};
use crate::eval::{aggregate, score_trial, AucPooling, TrialResult};
use crate::model::{
    pd_interval, write_matrix_file, BlockStructure, FaultQualityModel, Hyperpriors, KccLayout,
    DEFAULT_HYPERPRIOR,
};
use crate::numerics::Matrix;
use crate::vbem::{estimate_variances, run, ConvergenceTrace, VbemConfig};

pub const CSV_HEADER: &str = "k,method,mean_auc,sd_auc,mean_nmse,sd_nmse,conv_rate,trials";

fn default_trials() -> usize {
    20
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Correlation coefficients; each is applied to every correlated list.
    pub sweep: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub pooling: AucPooling,
    #[serde(default)]
    pub hyperpriors: HyperpriorSpec,
    pub scenario: ScenarioSpec,
    pub methods: Vec<MethodSpec>,
}

/// Gamma hyperprior settings. `c` and `d` are accepted as aliases of `a`
/// and `b`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperpriorSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
}

impl HyperpriorSpec {
    pub fn resolve(&self) -> Result<Hyperpriors> {
        let pick = |name: &str, main: Option<f64>, alias: Option<f64>, alias_name: &str| {
            match (main, alias) {
                (Some(x), Some(y)) if x != y => Err(Error::InvalidConfig(format!(
                    "hyperprior {name} = {x} conflicts with its alias {alias_name} = {y}"
                ))),
                (Some(x), _) | (None, Some(x)) => Ok(x),
                (None, None) => Ok(DEFAULT_HYPERPRIOR),
            }
        };
        let h = Hyperpriors::new(pick("a", self.a, self.c, "c")?, pick("b", self.b, self.d, "d")?);
        h.validate()?;
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// The synthetic study: `M = 8`, `N = 40`, lists {1,2,3} and {4,5,6}.
    Numerical,
    /// The assembly-line study: `N = 33`, lists {8..13} and {31,32,33}.
    Assembly,
}

/// Scenario section. A preset fills every field; explicit fields override it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Correlated KCC lists, 1-based.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlated_lists: Option<Vec<Vec<usize>>>,
    /// Faulty KCCs of each group, 1-based. Naming one member of a correlated
    /// list makes the whole list faulty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<Vec<usize>>>,
    /// Independent KCCs added to the second group of the assembly preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_independent: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault_variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonfault_variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_group: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffle: Option<bool>,
    /// `"sampled"` or the path of an `M × N` matrix file with columns in
    /// user KCC order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dictionary: Option<String>,
}

/// Default independent KCC joining the second assembly group.
pub const ASSEMBLY_EXTRA_KCC: usize = 1;

impl ScenarioSpec {
    /// Builds the scenario at correlation `k` with data seed `seed`.
    /// `base_dir` resolves a relative dictionary path.
    pub fn build(&self, k: f64, seed: u64, base_dir: &Path) -> Result<Scenario> {
        let mut s = match self.preset {
            Some(Preset::Numerical) => Scenario::numerical_study(k, seed)?,
            Some(Preset::Assembly) => {
                let extra = self
                    .extra_independent
                    .clone()
                    .unwrap_or_else(|| vec![ASSEMBLY_EXTRA_KCC]);
                Scenario::assembly_study(k, seed, &extra)?
            }
            None => {
                let (Some(m), Some(n), Some(groups)) = (self.m, self.n, self.groups.as_ref()) else {
                    return Err(Error::InvalidConfig(
                        "scenario needs a preset or all of m, n and groups".into(),
                    ));
                };
                let lists = self.correlated_lists.clone().unwrap_or_default();
                let layout = KccLayout::new(n, &lists)?;
                let groups = groups
                    .iter()
                    .map(|g| faulty_blocks_from_kccs(&layout, g))
                    .collect::<Result<_>>()?;
                let mut s = Scenario::numerical_study(0.0, seed)?;
                s.m = m;
                s.correlations = vec![k; layout.structure().num_correlated()];
                s.layout = layout;
                s.groups = groups;
                s
            }
        };
        if self.preset.is_some() {
            if let Some(m) = self.m {
                s.m = m;
            }
            if self.n.is_some_and(|n| n != s.n()) {
                return Err(Error::InvalidConfig(format!(
                    "n = {} contradicts the preset's {} KCCs",
                    self.n.unwrap(),
                    s.n()
                )));
            }
            if let Some(lists) = &self.correlated_lists {
                s.layout = KccLayout::new(s.n(), lists)?;
                s.correlations = vec![k; s.layout.structure().num_correlated()];
            }
            if let Some(groups) = &self.groups {
                s.groups = groups
                    .iter()
                    .map(|g| faulty_blocks_from_kccs(&s.layout, g))
                    .collect::<Result<_>>()?;
            }
        }
        if let Some(v) = self.fault_variance {
            s.fault_variance = v;
        }
        if let Some(v) = self.nonfault_variance {
            s.nonfault_variance = v;
        }
        if let Some(v) = self.noise_variance {
            s.noise_variance = v;
        }
        if let Some(v) = self.samples_per_group {
            s.samples_per_group = v;
        }
        if let Some(v) = self.shuffle {
            s.shuffle = v;
        }
        match self.dictionary.as_deref() {
            None | Some("sampled") => s.dictionary = Dictionary::Sampled,
            Some(path) => {
                let path = base_dir.join(path);
                let user = FaultQualityModel::load(&path)?;
                if user.n() != s.n() {
                    return Err(Error::DimensionMismatch(format!(
                        "{} has {} columns, scenario has {} KCCs",
                        path.display(),
                        user.n(),
                        s.n()
                    )));
                }
                s.m = user.m();
                s.dictionary =
                    Dictionary::Fixed(FaultQualityModel::new(s.layout.columns_to_internal(user.phi()))?);
            }
        }
        s.validate()?;
        Ok(s)
    }

    fn list_sizes(&self) -> Vec<usize> {
        match (&self.correlated_lists, self.preset) {
            (Some(lists), _) => lists.iter().map(Vec::len).collect(),
            (None, Some(Preset::Numerical)) => vec![3, 3],
            (None, Some(Preset::Assembly)) => vec![6, 3],
            (None, None) => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    pub groups: usize,
    #[serde(default = "default_true")]
    pub estimate_correlation: bool,
    /// When false the method sees every KCC as an independent block.
    #[serde(default = "default_true")]
    pub use_correlated_lists: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resp_floor: Option<f64>,
}

impl MethodSpec {
    pub fn cssbl(name: &str) -> Self {
        Self {
            name: name.into(),
            groups: 2,
            estimate_correlation: true,
            use_correlated_lists: true,
            max_iters: None,
            conv_threshold: None,
            resp_floor: None,
        }
    }

    /// One group, independent KCCs, no correlation estimation.
    pub fn msbl(name: &str) -> Self {
        Self {
            groups: 1,
            estimate_correlation: false,
            use_correlated_lists: false,
            ..Self::cssbl(name)
        }
    }

    pub fn config(&self, init_seed: u64) -> VbemConfig {
        let d = VbemConfig::default();
        VbemConfig {
            groups: self.groups,
            max_iters: self.max_iters.unwrap_or(d.max_iters),
            conv_threshold: self.conv_threshold.unwrap_or(d.conv_threshold),
            resp_floor: self.resp_floor.unwrap_or(d.resp_floor),
            init_seed,
            estimate_correlation: self.estimate_correlation,
            tolerances: d.tolerances,
        }
    }

    pub fn structure(&self, scenario: &Scenario) -> Result<BlockStructure> {
        if self.use_correlated_lists {
            Ok(scenario.layout.structure().clone())
        } else {
            BlockStructure::independent(scenario.n())
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            context: "experiment spec".into(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn method(&self, name: &str) -> Option<(usize, &MethodSpec)> {
        self.methods.iter().enumerate().find(|(_, m)| m.name == name)
    }
}

/// Every problem with `spec`, without running anything. Empty means valid.
pub fn validate(spec: &ExperimentSpec, base_dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    if spec.trials == 0 {
        out.push("trials must be positive".to_string());
    }
    if spec.sweep.is_empty() {
        out.push("sweep is empty".to_string());
    }
    if spec.methods.is_empty() {
        out.push("no methods".to_string());
    }
    let mut names = HashSet::new();
    for m in &spec.methods {
        if !names.insert(m.name.as_str()) {
            out.push(format!("duplicate method name {:?}", m.name));
        }
        if m.name.is_empty() || m.name.contains([',', '"', '\n']) {
            out.push(format!("method name {:?} must be non-empty without commas or quotes", m.name));
        }
        if let Err(e) = m.config(0).validate() {
            out.push(format!("method {}: {e}", m.name));
        }
    }
    if let Err(e) = spec.hyperpriors.resolve() {
        out.push(e.to_string());
    }
    let sizes = spec.scenario.list_sizes();
    let mut seen = HashSet::new();
    for &k in &spec.sweep {
        if !seen.insert(k.to_bits()) {
            out.push(format!("sweep value {k} appears twice"));
        }
        for &d in &sizes {
            let (lo, hi) = pd_interval(d);
            if !(k > lo && k < hi) {
                out.push(format!(
                    "k = {k} is outside the positive-definite interval ({lo}, {hi}) of a size-{d} list"
                ));
            }
        }
    }
    // structural checks at a coefficient every list accepts
    if let Err(e) = spec.scenario.build(0.0, spec.base_seed, base_dir) {
        out.push(format!("scenario: {e}"));
    }
    out
}

/// Expands a 64-bit value into a well-mixed one (the SplitMix64 finalizer).
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Data seed of one (k, trial) cell. Shared by every method so that methods
/// are compared on identical data.
pub fn cell_seed(base_seed: u64, k: f64, trial: usize) -> u64 {
    base_seed ^ mix64(k.to_bits() ^ mix64(trial as u64))
}

/// Seed of the random responsibility initialization for a cell.
pub fn init_seed(data_seed: u64) -> u64 {
    mix64(data_seed ^ 0x1F1F_1F1F_1F1F_1F1F)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellRecord {
    pub k: f64,
    pub method: String,
    pub trial: usize,
    pub data_seed: u64,
    pub init_seed: u64,
    #[serde(flatten)]
    pub result: TrialResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellFailure {
    pub k: f64,
    pub method: String,
    pub trial: usize,
    pub error: String,
    pub numerical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub k: f64,
    pub method: String,
    pub mean_auc: f64,
    pub sd_auc: f64,
    pub mean_nmse: f64,
    pub sd_nmse: f64,
    pub conv_rate: f64,
    /// Successful trials contributing to the row.
    pub trials: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub rows: Vec<SummaryRow>,
    pub cells: Vec<CellRecord>,
    pub failures: Vec<CellFailure>,
    pub wall_clock_seconds: f64,
}

impl ExperimentReport {
    pub fn row(&self, k: f64, method: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.k == k && r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.k, r.method, r.mean_auc, r.sd_auc, r.mean_nmse, r.sd_nmse, r.conv_rate, r.trials
            );
        }
        s
    }

    /// 0 on success, 3 if any cell failed numerically, 1 for other failures.
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else if self.failures.iter().any(|f| f.numerical) {
            3
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses the rayon default.
    pub jobs: Option<usize>,
    /// Directory receiving results; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub traces: bool,
    /// Directory that relative paths inside the spec are resolved against.
    pub base_dir: PathBuf,
}

/// Everything produced by running one cell.
pub struct CellOutput {
    pub scenario: Scenario,
    pub model: FaultQualityModel,
    pub variances: Matrix,
    pub result: TrialResult,
    pub trace: ConvergenceTrace,
    pub data: crate::model::Dataset,
    pub state: crate::model::VbState,
}

/// Generates the data of cell `(k, trial)`, runs `method` on it and scores
/// the result.
pub fn run_cell(
    spec: &ExperimentSpec,
    base_dir: &Path,
    k: f64,
    method: &MethodSpec,
    trial: usize,
) -> Result<CellOutput> {
    let data_seed = cell_seed(spec.base_seed, k, trial);
    let scenario = spec.scenario.build(k, data_seed, base_dir)?;
    let (model, data) = generate(&scenario)?;
    let structure = method.structure(&scenario)?;
    let hyper = spec.hyperpriors.resolve()?;
    let cfg = method.config(init_seed(data_seed));
    let (state, trace) = run(&model, &data, &structure, &hyper, &cfg)?;
    let truth = data.truth().ok_or(Error::MissingGroundTruth)?;
    let result = score_trial(&state, &trace, &structure, truth, spec.pooling)?;
    let variances = estimate_variances(&state, &structure);
    Ok(CellOutput {
        scenario,
        model,
        variances,
        result,
        trace,
        data,
        state,
    })
}

fn trace_csv(trace: &ConvergenceTrace) -> String {
    let groups = trace.records.first().map_or(0, |r| r.group_mass.len());
    let mut s = String::from("iteration,max_mu_change,expected_alpha");
    for g in 0..groups {
        let _ = write!(s, ",mass_{}", g + 1);
    }
    s.push('\n');
    for r in &trace.records {
        let _ = write!(s, "{},{},{}", r.iteration, r.max_mu_change, r.expected_alpha);
        for m in &r.group_mass {
            let _ = write!(s, ",{m}");
        }
        s.push('\n');
    }
    s
}

/// Runs every (k, method, trial) cell and aggregates one row per (k, method).
///
/// A failing cell is recorded and skipped; the other cells still run.
/// Results are ordered by (k index, method index, trial) whatever the
/// thread count.
pub fn run_experiment(spec: &ExperimentSpec, opts: &RunOptions) -> Result<ExperimentReport> {
    let problems = validate(spec, &opts.base_dir);
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems.join("; ")));
    }
    let started = Instant::now();
    let cells: Vec<(usize, usize, usize)> = (0..spec.sweep.len())
        .flat_map(|ki| {
            (0..spec.methods.len()).flat_map(move |mi| (0..spec.trials).map(move |t| (ki, mi, t)))
        })
        .collect();

    let work = || -> Vec<(Result<TrialResult>, Option<String>)> {
        cells
            .par_iter()
            .map(|&(ki, mi, t)| {
                match run_cell(spec, &opts.base_dir, spec.sweep[ki], &spec.methods[mi], t) {
                    Ok(out) => (Ok(out.result), opts.traces.then(|| trace_csv(&out.trace))),
                    Err(e) => (Err(e), None),
                }
            })
            .collect()
    };
    let outcomes = match opts.jobs {
        Some(jobs) => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut traces = Vec::new();
    for (&(ki, mi, t), (outcome, trace)) in cells.iter().zip(outcomes) {
        let k = spec.sweep[ki];
        let method = spec.methods[mi].name.clone();
        let data_seed = cell_seed(spec.base_seed, k, t);
        match outcome {
            Ok(result) => {
                if let Some(tr) = trace {
                    traces.push((format!("k{k}_{method}_t{t}.csv"), tr));
                }
                records.push(CellRecord {
                    k,
                    method,
                    trial: t,
                    data_seed,
                    init_seed: init_seed(data_seed),
                    result,
                });
            }
            Err(e) => failures.push(CellFailure {
                k,
                method,
                trial: t,
                numerical: e.is_numerical(),
                error: e.to_string(),
            }),
        }
    }

    let mut rows = Vec::new();
    for &k in &spec.sweep {
        for m in &spec.methods {
            let results: Vec<TrialResult> = records
                .iter()
                .filter(|c| c.k == k && c.method == m.name)
                .map(|c| c.result.clone())
                .collect();
            rows.push(match aggregate(&results) {
                Ok(s) => SummaryRow {
                    k,
                    method: m.name.clone(),
                    mean_auc: s.auc.mean,
                    sd_auc: s.auc.sd,
                    mean_nmse: s.nmse.mean,
                    sd_nmse: s.nmse.sd,
                    conv_rate: s.conv_rate,
                    trials: s.trials,
                },
                Err(_) => SummaryRow {
                    k,
                    method: m.name.clone(),
                    mean_auc: f64::NAN,
                    sd_auc: f64::NAN,
                    mean_nmse: f64::NAN,
                    sd_nmse: f64::NAN,
                    conv_rate: f64::NAN,
                    trials: 0,
                },
            });
        }
    }

    let report = ExperimentReport {
        rows,
        cells: records,
        failures,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("results.csv"), report.to_csv())?;
        let manifest = serde_json::json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "spec": spec,
            "wall_clock_seconds": report.wall_clock_seconds,
            "cells": report.cells,
            "failures": report.failures,
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse {
            context: "manifest".into(),
            message: e.to_string(),
        })?;
        fs::write(dir.join("manifest.json"), text)?;
        if !traces.is_empty() {
            let tdir = dir.join("traces");
            fs::create_dir_all(&tdir)?;
            for (name, body) in traces {
                fs::write(tdir.join(name), body)?;
            }
        }
    }
    Ok(report)
}

/// Parses a `k,method,trial` replay coordinate.
pub fn parse_replay(text: &str) -> Result<(f64, String, usize)> {
    let bad = || Error::Parse {
        context: "--replay".into(),
        message: format!("expected k,method,trial, got {text:?}"),
    };
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let [k, method, trial] = parts.as_slice() else {
        return Err(bad());
    };
    let k: f64 = k.parse().map_err(|_| bad())?;
    let trial: usize = trial.parse().map_err(|_| bad())?;
    Ok((k, method.to_string(), trial))
}

/// Re-runs one cell and exports its inputs and estimates as matrix files:
/// `phi.txt` (`M × N`, user KCC order), `y.txt` (`M × K`),
/// `variances.txt` and `true_variances.txt` (`G × N`, user order) and
/// `responsibilities.txt` (`K × G`).
pub fn replay(
    spec: &ExperimentSpec,
    base_dir: &Path,
    k: f64,
    method: &str,
    trial: usize,
    out_dir: &Path,
) -> Result<TrialResult> {
    let (_, m) = spec
        .method(method)
        .ok_or_else(|| Error::InvalidConfig(format!("no method named {method:?}")))?;
    let out = run_cell(spec, base_dir, k, m, trial)?;
    let layout = &out.scenario.layout;
    fs::create_dir_all(out_dir)?;

    let phi = out.model.phi();
    let user_phi = Matrix::from_fn(phi.rows(), phi.cols(), |i, u| {
        phi[(i, layout.internal_of(u + 1).expect("KCC in range"))]
    });
    write_matrix_file(out_dir.join("phi.txt"), &user_phi)?;
    out.data.save(out_dir.join("y.txt"))?;
    let to_user = |rows: Vec<Vec<f64>>| {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| layout.to_user_order(r)).collect();
        Matrix::from_rows(&rows)
    };
    let est: Vec<Vec<f64>> = (0..out.variances.rows())
        .map(|g| out.variances.row(g).to_vec())
        .collect();
    write_matrix_file(out_dir.join("variances.txt"), &to_user(est))?;
    let truth = out.data.truth().ok_or(Error::MissingGroundTruth)?;
    write_matrix_file(
        out_dir.join("true_variances.txt"),
        &to_user(truth.group_variances.clone()),
    )?;
    write_matrix_file(out_dir.join("responsibilities.txt"), &out.state.resp)?;
    fs::write(out_dir.join("trace.csv"), trace_csv(&out.trace))?;
    Ok(out.result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_like() -> ExperimentSpec {
        ExperimentSpec {
            trials: 1,
            base_seed: 7,
            sweep: vec![0.3, 0.9],
            output: None,
            pooling: AucPooling::Pooled,
            hyperpriors: HyperpriorSpec::default(),
            scenario: ScenarioSpec {
                preset: Some(Preset::Numerical),
                ..ScenarioSpec::default()
            },
            methods: vec![MethodSpec::cssbl("CSSBL"), MethodSpec::msbl("MSBL")],
        }
    }

    #[test]
    fn pd_interval_diagnostics() {
        let mut spec = synthetic_like();
        spec.sweep = vec![0.99];
        assert!(validate(&spec, Path::new(".")).is_empty());
        spec.sweep = vec![-0.6];
        let d = validate(&spec, Path::new("."));
        assert_eq!(d.len(), 2, "{d:?}");
        assert!(d[0].contains("positive-definite"));
    }

    #[test]
    fn duplicate_names_and_bad_methods() {
        let mut spec = synthetic_like();
        spec.methods.push(MethodSpec::msbl("MSBL"));
        spec.methods.push(MethodSpec {
            groups: 0,
            ..MethodSpec::cssbl("zero")
        });
        let d = validate(&spec, Path::new("."));
        assert!(d.iter().any(|s| s.contains("duplicate")));
        assert!(d.iter().any(|s| s.contains("zero")));
    }

    #[test]
    fn hyperprior_aliases() {
        let h = HyperpriorSpec {
            c: Some(2.0),
            d: Some(3.0),
            ..Default::default()
        };
        assert_eq!(h.resolve().unwrap(), Hyperpriors::new(2.0, 3.0));
        let clash = HyperpriorSpec {
            a: Some(1.0),
            c: Some(2.0),
            ..Default::default()
        };
        assert!(clash.resolve().is_err());
        assert_eq!(
            HyperpriorSpec::default().resolve().unwrap(),
            Hyperpriors::default()
        );
    }

    #[test]
    fn cell_seeds_differ_and_repeat() {
        let a = cell_seed(1, 0.5, 0);
        assert_eq!(a, cell_seed(1, 0.5, 0));
        assert_ne!(a, cell_seed(1, 0.5, 1));
        assert_ne!(a, cell_seed(1, 0.6, 0));
        assert_ne!(a, cell_seed(2, 0.5, 0));
    }

    #[test]
    fn replay_coordinates() {
        assert_eq!(parse_replay("0.9,CSSBL,3").unwrap(), (0.9, "CSSBL".into(), 3));
        assert!(parse_replay("0.9,CSSBL").is_err());
        assert!(parse_replay("x,CSSBL,1").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
            trials = 3
            base_seed = 11
            sweep = [0.1, 0.5]
            [hyperpriors]
            c = 0.001
            [scenario]
            preset = "assembly"
            extra_independent = [1, 2]
            [[methods]]
            name = "CSSBL"
            groups = 2
            [[methods]]
            name = "MSBL"
            groups = 1
            estimate_correlation = false
            use_correlated_lists = false
        "#;
        let spec = ExperimentSpec::from_toml(text).unwrap();
        assert_eq!(spec.trials, 3);
        assert_eq!(spec.methods[1], MethodSpec::msbl("MSBL"));
        assert_eq!(spec.hyperpriors.resolve().unwrap().a, 0.001);
        let s = spec.scenario.build(0.5, 1, Path::new(".")).unwrap();
        assert_eq!((s.m, s.n(), s.num_samples()), (12, 33, 100));
        assert!(validate(&spec, Path::new(".")).is_empty());
        assert!(ExperimentSpec::from_toml("sweep = [0.1]\nbogus = 1").is_err());
    }

    #[test]
    fn custom_scenario_without_preset() {
        let spec = ScenarioSpec {
            m: Some(5),
            n: Some(6),
            correlated_lists: Some(vec![vec![2, 4]]),
            groups: Some(vec![vec![2], vec![5]]),
            samples_per_group: Some(4),
            ..Default::default()
        };
        let s = spec.build(0.4, 3, Path::new(".")).unwrap();
        assert_eq!((s.m, s.n(), s.num_samples()), (5, 6, 8));
        assert_eq!(s.correlations, vec![0.4]);
        // KCC 2 sits in the first (correlated) block
        assert_eq!(s.groups[0], vec![0]);
        assert!(ScenarioSpec::default().build(0.1, 0, Path::new(".")).is_err());
    }
}
