//! Experiment configuration, execution and artifact export.
//!
//! A run reads one TOML document, builds the federation, solves, and writes
//! `trace.csv` and `summary.json`. A sweep repeats the run over `k0` values and
//! seeds and writes `sweep.csv`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    check_lagrangian_descent, check_lyapunov_descent, check_rate_bound, oracle_optimum,
    DescentReport, RateReport, RateVariant, TraceRecord,
};
use crate::data::{
    fmt_f64, generate_classification, generate_regression, load_classification, load_dataset,
    partition, Federation, FileFormat,
};
use crate::error::{Error, Result};
use crate::fedcore::ClientState;
use crate::linalg::{DenseMatrix, DenseVector};
use crate::losses::{curvature_matrix, loss_gradient, loss_value, CurvatureMode, LossModel};
use crate::solvers::{run_observed, Algorithm, DualInit, HyperParams, Snapshot, SolveResult};

pub const TRACE_HEADER: &str =
    "k,in_K,f_y,F_X,L,phi,grad_f_sq,grad_F_sq,res_dual,res_primal,res_consensus,rounds,elapsed_s";
pub const SWEEP_HEADER: &str = "k0,mean_iterations,mean_rounds,mean_time_s";

pub const EXIT_CONVERGED: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_MAX_ITERS: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

/// Where the federation comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemSource {
    /// Three equal groups of clients drawing from normal, Student-t(5) and
    /// uniform entry laws.
    SyntheticRegression {
        m: usize,
        n: usize,
        d_range: (usize, usize),
        seed: u64,
    },
    /// Planted logistic model, shuffled and split across `m` clients.
    SyntheticClassification {
        d: usize,
        n: usize,
        m: usize,
        seed: u64,
    },
    /// A LIBSVM or CSV file, shuffled and split across `m` clients.
    File {
        path: PathBuf,
        format: FileFormat,
        m: usize,
        seed: u64,
        #[serde(default)]
        n_features: Option<usize>,
    },
}

impl ProblemSource {
    pub fn seed(&self) -> u64 {
        match self {
            ProblemSource::SyntheticRegression { seed, .. }
            | ProblemSource::SyntheticClassification { seed, .. }
            | ProblemSource::File { seed, .. } => *seed,
        }
    }

    pub fn with_seed(&self, new_seed: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            ProblemSource::SyntheticRegression { seed, .. }
            | ProblemSource::SyntheticClassification { seed, .. }
            | ProblemSource::File { seed, .. } => *seed = new_seed,
        }
        out
    }

    fn clients(&self) -> usize {
        match self {
            ProblemSource::SyntheticRegression { m, .. }
            | ProblemSource::SyntheticClassification { m, .. }
            | ProblemSource::File { m, .. } => *m,
        }
    }

    fn default_model(&self) -> LossModel {
        match self {
            ProblemSource::SyntheticRegression { .. } => LossModel::LeastSquares,
            _ => LossModel::Logistic {
                mu: crate::losses::DEFAULT_MU,
            },
        }
    }

    /// Materializes the federation. Relative file paths resolve against `base`.
    pub fn build(&self, model: &LossModel, base: &Path) -> Result<Federation> {
        match self {
            ProblemSource::SyntheticRegression {
                m,
                n,
                d_range,
                seed,
            } => generate_regression(*m, *n, *d_range, *seed),
            ProblemSource::SyntheticClassification { d, n, m, seed } => {
                let (a, b) = generate_classification(*d, *n, *seed);
                partition(&a, &b, *m, *seed)
            }
            ProblemSource::File {
                path,
                format,
                m,
                seed,
                n_features,
            } => {
                let path = base.join(path);
                let (a, b) = match model {
                    LossModel::Logistic { .. } => load_classification(&path, *format, *n_features)?,
                    LossModel::LeastSquares => load_dataset(&path, *format, *n_features)?,
                };
                partition(&a, &b, *m, *seed)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emit {
    Csv,
    Json,
}

fn default_emit() -> Vec<Emit> {
    vec![Emit::Csv, Emit::Json]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub problem: ProblemSource,
    /// Defaults to least squares for regression problems and logistic otherwise.
    #[serde(default)]
    pub model: Option<LossModel>,
    #[serde(default)]
    pub hyperparams: HyperParams,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_emit")]
    pub emit: Vec<Emit>,
    #[serde(default)]
    pub theory_check: bool,
}

fn config_error(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de =
            toml::Deserializer::parse(text).map_err(|e| config_error("<document>", e.message()))?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_error(
                if path == "." {
                    "<root>".to_string()
                } else {
                    path
                },
                e.inner().message(),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(path.display().to_string(), e.to_string()))?;
        let mut cfg = Self::from_toml(&text)?;
        if let ProblemSource::File { path: data, .. } = &mut cfg.problem {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        Ok(cfg)
    }

    pub fn model(&self) -> LossModel {
        self.model.unwrap_or_else(|| self.problem.default_model())
    }

    pub fn validate(&self) -> Result<()> {
        if self.problem.clients() == 0 {
            return Err(config_error("problem.m", "at least one client is required"));
        }
        match &self.problem {
            ProblemSource::SyntheticRegression { n, d_range, .. } => {
                if *n == 0 {
                    return Err(config_error(
                        "problem.n",
                        "feature dimension must be positive",
                    ));
                }
                if d_range.0 == 0 || d_range.0 > d_range.1 {
                    return Err(config_error(
                        "problem.d_range",
                        format!("invalid range [{}, {}]", d_range.0, d_range.1),
                    ));
                }
            }
            ProblemSource::SyntheticClassification { d, n, m, .. } => {
                if *n == 0 {
                    return Err(config_error(
                        "problem.n",
                        "feature dimension must be positive",
                    ));
                }
                if d < m {
                    return Err(config_error(
                        "problem.d",
                        format!("{d} samples cannot cover {m} clients"),
                    ));
                }
            }
            ProblemSource::File { .. } => {}
        }
        if let Some(LossModel::Logistic { mu }) = self.model {
            if mu.is_nan() || mu <= 0.0 {
                return Err(config_error(
                    "model.mu",
                    format!("must be positive, got {mu}"),
                ));
            }
        }
        if self.emit.is_empty() {
            return Err(config_error("emit", "nothing to emit"));
        }
        self.hyperparams
            .validate(self.algorithm)
            .map_err(|e| config_error("hyperparams", e.to_string()))?;
        if let (Some(CurvatureMode::FullGram), LossModel::Logistic { .. }) =
            (self.hyperparams.curvature, self.model())
        {
            return Err(config_error(
                "hyperparams.curvature",
                "full Gram curvature requires least squares",
            ));
        }
        Ok(())
    }
}

/// Outcome of the theory checks attached to a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub descent: Option<DescentReport>,
    pub rate: Option<RateReport>,
    /// Set when the theorem hypotheses fail (for instance `θ_i <= 0`).
    pub hypothesis_error: Option<String>,
    pub identity_violations: Vec<String>,
    /// `w_i f_i(x⁺) <= w_i f_i(x) + <g_i, Δx> + (w_i/2) Δxᵀ H_i Δx` along the
    /// inexact iterates.
    #[serde(default)]
    pub majorization: Option<DescentReport>,
}

impl TheoryReport {
    pub fn passed(&self) -> bool {
        self.hypothesis_error.is_none()
            && self.identity_violations.is_empty()
            && self.descent.as_ref().is_none_or(DescentReport::holds)
            && self.rate.as_ref().is_none_or(RateReport::holds)
            && self.majorization.as_ref().is_none_or(DescentReport::holds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub k0: usize,
    pub iterations: usize,
    pub rounds: usize,
    pub converged: bool,
    pub final_objective: f64,
    pub f_star: f64,
    pub y_error_inf: f64,
    pub uplink_vectors: usize,
    pub downlink_vectors: usize,
    pub bytes: usize,
    pub elapsed_s: f64,
    pub rate_violations: Option<usize>,
    pub theory: TheoryReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub summary: Summary,
    pub result: SolveResult,
    pub exit_code: i32,
}

/// Compares consecutive snapshots against the per-step identities of each
/// algorithm and collects any violation.
struct IdentityMonitor<'a> {
    algorithm: Algorithm,
    model: LossModel,
    fed: &'a Federation,
    inner_tol: f64,
    curvature: Vec<DenseMatrix>,
    prev: Option<(usize, bool, DenseVector, Vec<ClientState>)>,
    violations: Vec<String>,
    majorization: DescentReport,
}

const MAX_REPORTED: usize = 20;
const MAJORIZATION_SLACK: f64 = 1e-10;

impl<'a> IdentityMonitor<'a> {
    fn new(
        algorithm: Algorithm,
        model: LossModel,
        fed: &'a Federation,
        hp: &HyperParams,
    ) -> Result<Self> {
        let curvature = if algorithm == Algorithm::Iceadmm {
            let mode = hp.resolved_curvature(&model);
            fed.clients()
                .iter()
                .map(|c| curvature_matrix(&model, c, mode))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            algorithm,
            model,
            fed,
            inner_tol: hp.inner_tol,
            curvature,
            prev: None,
            violations: Vec::new(),
            majorization: DescentReport::default(),
        })
    }

    fn flag(&mut self, msg: String) {
        if self.violations.len() < MAX_REPORTED {
            self.violations.push(msg);
        }
    }

    fn observe(&mut self, snap: &Snapshot<'_>) {
        if let Some((k, was_in_k, _, prev)) = self.prev.take() {
            if let Err(e) = self.compare(k, was_in_k, prev.as_slice(), snap) {
                self.flag(format!("k={k}: {e}"));
            }
        }
        self.prev = Some((snap.k, snap.in_k, snap.y.clone(), snap.clients.to_vec()));
    }

    fn compare(
        &mut self,
        k: usize,
        was_in_k: bool,
        prev: &[ClientState],
        snap: &Snapshot<'_>,
    ) -> Result<()> {
        let n = self.fed.dim();
        if was_in_k && self.algorithm != Algorithm::FedAvg {
            let sigma: f64 = prev.iter().map(|c| c.sigma).sum();
            let mut r = DenseVector::zeros(n);
            for c in prev {
                r.axpy(c.sigma, snap.y);
                r.axpy(-c.sigma, &c.x);
                r.axpy(-1.0, &c.pi);
            }
            if r.norm_inf() > 1e-8 * sigma {
                self.flag(format!(
                    "k={k}: aggregation identity off by {:.3e}",
                    r.norm_inf()
                ));
            }
        }
        for (i, (before, after)) in prev.iter().zip(snap.clients).enumerate() {
            let data = &self.fed.clients()[i];
            let (gap, tol) = match self.algorithm {
                Algorithm::Ceadmm => {
                    let mut rhs = snap.y.scaled(before.sigma);
                    rhs.axpy(-1.0, &before.pi);
                    let gap = after.pi.add(&after.g).norm();
                    (gap, 10.0 * self.inner_tol * (1.0 + rhs.norm()))
                }
                Algorithm::Iceadmm => {
                    let dx = after.x.sub(&before.x);
                    let mut expect = self.curvature[i].matvec(&dx)?;
                    expect.scale(-data.weight);
                    expect.axpy(-1.0, &before.g);
                    let f_before = data.weight * loss_value(&self.model, data, &before.x)?;
                    let f_after = data.weight * loss_value(&self.model, data, &after.x)?;
                    let model_value = f_before
                        + before.g.dot(&dx)
                        + 0.5 * data.weight * self.curvature[i].quad_form(&dx)?;
                    self.majorization.push(
                        k,
                        f_after,
                        model_value + MAJORIZATION_SLACK * (1.0 + f_before.abs()),
                    );
                    (after.pi.sub(&expect).norm_inf(), 1e-8)
                }
                Algorithm::Liadmm => {
                    let mut expect = loss_gradient(&self.model, data, snap.y)?;
                    expect.scale(-data.weight);
                    (after.pi.sub(&expect).norm_inf(), 1e-10)
                }
                Algorithm::FedAvg => continue,
            };
            if gap > tol {
                self.flag(format!(
                    "k={k} client {i}: dual identity off by {gap:.3e} (tolerance {tol:.3e})"
                ));
            }
        }
        Ok(())
    }
}

fn theory_report(result: &SolveResult, f_star: f64, hp: &HyperParams) -> TheoryReport {
    let mut report = TheoryReport::default();
    let (variant, descent) = match result.algorithm {
        Algorithm::Ceadmm => {
            let from = if hp.init == DualInit::GradientConsistent {
                0
            } else {
                1
            };
            (
                RateVariant::Ceadmm,
                check_lagrangian_descent(&result.trace, &result.constants, from),
            )
        }
        Algorithm::Iceadmm => (
            RateVariant::Iceadmm,
            check_lyapunov_descent(&result.trace, 1),
        ),
        _ => return report,
    };
    report.descent = Some(descent);
    match check_rate_bound(&result.trace, &result.constants, f_star, variant) {
        Ok(rate) => report.rate = Some(rate),
        Err(e) => report.hypothesis_error = Some(e.to_string()),
    }
    report
}

/// Builds, solves and summarizes one configuration without touching disk.
pub fn execute(config: &ExperimentConfig) -> Result<RunOutcome> {
    let model = config.model();
    let fed = config.problem.build(&model, Path::new(""))?;
    let hp = &config.hyperparams;
    let mut monitor = if config.theory_check {
        Some(IdentityMonitor::new(config.algorithm, model, &fed, hp)?)
    } else {
        None
    };
    let result = run_observed(config.algorithm, &fed, &model, hp, |snap| {
        if let Some(m) = monitor.as_mut() {
            m.observe(snap);
        }
    })?;
    let oracle = oracle_optimum(&fed, &model)?;
    let mut theory = theory_report(&result, oracle.f_star, hp);
    if let Some(m) = monitor {
        theory.identity_violations = m.violations;
        if config.algorithm == Algorithm::Iceadmm {
            theory.majorization = Some(m.majorization);
        }
    }
    let last = result.trace.last().expect("trace holds the initial state");
    let summary = Summary {
        algorithm: config.algorithm,
        seed: config.problem.seed(),
        k0: hp.k0,
        iterations: result.iterations,
        rounds: result.rounds,
        converged: result.converged,
        final_objective: last.f_y,
        f_star: oracle.f_star,
        y_error_inf: result.y_final.sub(&oracle.x).norm_inf(),
        uplink_vectors: result.ledger.uplink_vectors,
        downlink_vectors: result.ledger.downlink_vectors,
        bytes: result.ledger.bytes(fed.dim()),
        elapsed_s: result.elapsed_s,
        rate_violations: theory.rate.as_ref().map(|r| r.violations.len()),
        theory,
    };
    let exit_code = if result.converged {
        EXIT_CONVERGED
    } else {
        EXIT_MAX_ITERS
    };
    Ok(RunOutcome {
        summary,
        result,
        exit_code,
    })
}

/// Renders a trace as CSV.
pub fn trace_csv(trace: &[TraceRecord]) -> String {
    let mut out = String::with_capacity(64 + trace.len() * 256);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in trace {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.k,
            u8::from(r.in_k),
            fmt_f64(r.f_y),
            fmt_f64(r.f_x),
            fmt_f64(r.lagrangian),
            fmt_f64(r.phi),
            fmt_f64(r.grad_f_sq),
            fmt_f64(r.grad_big_f_sq),
            fmt_f64(r.residuals.dual),
            fmt_f64(r.residuals.primal),
            fmt_f64(r.residuals.consensus),
            r.rounds,
            fmt_f64(r.elapsed_s),
        );
    }
    out
}

/// Writes `contents` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("artifact");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Runs one experiment and writes its artifacts to `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    let outcome = execute(config)?;
    if config.emit.contains(&Emit::Csv) {
        write_atomic(
            &config.output_dir.join("trace.csv"),
            &trace_csv(&outcome.result.trace),
        )?;
    }
    if config.emit.contains(&Emit::Json) {
        let json = serde_json::to_string_pretty(&outcome.summary)
            .map_err(|e| config_error("summary", e.to_string()))?;
        write_atomic(&config.output_dir.join("summary.json"), &(json + "\n"))?;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub k0: usize,
    pub runs: usize,
    pub converged: usize,
    pub mean_iterations: f64,
    pub mean_rounds: f64,
    pub mean_time_s: f64,
    pub iterations: Vec<usize>,
    pub rounds: Vec<usize>,
    pub failures: Vec<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// Repeats the configuration for every `k0` over seeds `seed, seed+1, ...`.
/// A failed run is recorded in its cell and excluded from the means.
pub fn sweep(
    config: &ExperimentConfig,
    k0_values: &[usize],
    repeats: usize,
) -> Result<Vec<SweepCell>> {
    if repeats == 0 {
        return Err(config_error("repeats", "must be at least 1"));
    }
    if k0_values.is_empty() || k0_values.contains(&0) {
        return Err(config_error(
            "k0",
            "expected a non-empty list of positive integers",
        ));
    }
    let base_seed = config.problem.seed();
    let mut cells = Vec::with_capacity(k0_values.len());
    for &k0 in k0_values {
        let mut cell = SweepCell {
            k0,
            runs: repeats,
            converged: 0,
            mean_iterations: f64::NAN,
            mean_rounds: f64::NAN,
            mean_time_s: f64::NAN,
            iterations: Vec::new(),
            rounds: Vec::new(),
            failures: Vec::new(),
        };
        let mut times = Vec::new();
        for r in 0..repeats {
            let seed = base_seed.wrapping_add(r as u64);
            let cfg = ExperimentConfig {
                problem: config.problem.with_seed(seed),
                hyperparams: HyperParams {
                    k0,
                    timing: true,
                    ..config.hyperparams.clone()
                },
                theory_check: false,
                ..config.clone()
            };
            if let Err(e) = cfg.hyperparams.validate(cfg.algorithm) {
                cell.failures.push(format!("seed {seed}: {e}"));
                continue;
            }
            let model = cfg.model();
            let solved = cfg
                .problem
                .build(&model, Path::new(""))
                .and_then(|fed| crate::solvers::run(cfg.algorithm, &fed, &model, &cfg.hyperparams));
            match solved {
                Ok(res) => {
                    cell.converged += usize::from(res.converged);
                    cell.iterations.push(res.iterations);
                    cell.rounds.push(res.rounds);
                    times.push(res.elapsed_s);
                }
                Err(e) => cell.failures.push(format!("seed {seed}: {e}")),
            }
        }
        cell.mean_iterations = mean(cell.iterations.iter().map(|&v| v as f64));
        cell.mean_rounds = mean(cell.rounds.iter().map(|&v| v as f64));
        cell.mean_time_s = mean(times.into_iter());
        cells.push(cell);
    }
    Ok(cells)
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            c.k0,
            fmt_f64(c.mean_iterations),
            fmt_f64(c.mean_rounds),
            fmt_f64(c.mean_time_s)
        );
    }
    out
}

/// Runs [`sweep`] and writes `sweep.csv` plus per-cell details in `sweep.json`.
pub fn run_sweep(
    config: &ExperimentConfig,
    k0_values: &[usize],
    repeats: usize,
) -> Result<Vec<SweepCell>> {
    let cells = sweep(config, k0_values, repeats)?;
    write_atomic(&config.output_dir.join("sweep.csv"), &sweep_csv(&cells))?;
    let json =
        serde_json::to_string_pretty(&cells).map_err(|e| config_error("sweep", e.to_string()))?;
    write_atomic(&config.output_dir.join("sweep.json"), &(json + "\n"))?;
    Ok(cells)
}
