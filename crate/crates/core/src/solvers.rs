//! FedAvg, exact and inexact communication-efficient ADMM, and linearized
//! ADMM as local kernels driven by one shared run loop.
//!
//! Every client update is a pure function of its own state and the current
//! broadcast point, so the kernels may run on any number of threads; all
//! reductions across clients happen sequentially in client order.

use serde::{Deserialize, Serialize};

use crate::analysis::{
    should_stop, stopping_threshold, ProblemConstants, ResidualTriple, TraceRecord,
    DEFAULT_TOL_SCALE,
};
use crate::data::{ClientDataset, Federation};
use crate::error::{Error, Result};
use crate::fedcore::{dual_update, in_schedule, ClientState, CommLedger, ServerState};
use crate::linalg::{Cholesky, DenseMatrix, DenseVector};
use crate::losses::{
    curvature_matrix, lipschitz_constant, loss_gradient, loss_hessian, loss_value, CurvatureMode,
    LossModel,
};

/// Default theory multiplier for exact local solves (`σ_i > 2 w_i r_i`).
pub const CEADMM_THEORY_MULTIPLIER: f64 = 2.1;
/// Default theory multiplier for inexact local steps (`σ_i > 3√2 w_i r_i`).
pub const ICEADMM_THEORY_MULTIPLIER: f64 = 4.3;
pub const DEFAULT_MAX_ITERS: usize = 10_000;
pub const DEFAULT_INNER_TOL: f64 = 1e-10;
pub const NEWTON_MAX_STEPS: usize = 100;
pub const DEFAULT_SCALED_GRAM: f64 = 6.0;

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAvg,
    Ceadmm,
    Liadmm,
    Iceadmm,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::Ceadmm => "ceadmm",
            Algorithm::Liadmm => "liadmm",
            Algorithm::Iceadmm => "iceadmm",
        }
    }

    fn uses_sigma_rule(self) -> bool {
        matches!(self, Algorithm::Ceadmm | Algorithm::Iceadmm)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fedavg" => Ok(Algorithm::FedAvg),
            "ceadmm" | "admm" => Ok(Algorithm::Ceadmm),
            "liadmm" => Ok(Algorithm::Liadmm),
            "iceadmm" | "iadmm" => Ok(Algorithm::Iceadmm),
            other => Err(Error::InvalidParams(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// How each client's penalty `σ_i` is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SigmaRule {
    /// `a ln(m d_i) / (10 ln(2 + k0)) w_i r_i`
    PaperRule {
        a: f64,
    },
    /// `c w_i r_i`
    TheoryMultiplier {
        c: f64,
    },
    Explicit {
        values: Vec<f64>,
    },
}

/// Starting duals. Primal iterates always start at zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualInit {
    #[default]
    Zero,
    /// `π_i^0 = -w_i ∇f_i(0)`, so the first-order condition already holds at `k = 0`.
    GradientConsistent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub k0: usize,
    /// `None` picks the theory multiplier matching the algorithm.
    pub sigma_rule: Option<SigmaRule>,
    /// `None` picks `ScalarLipschitz` for least squares and `ScaledGram(6)` for logistic.
    pub curvature: Option<CurvatureMode>,
    /// Step size for FedAvg and LIADMM; `None` means `1 / (2 max_i r_i)`.
    pub gamma: Option<f64>,
    pub max_iters: usize,
    pub tol_scale: f64,
    /// Base tolerance of the Newton inner solve, scaled by `1 + ||σ_i y - π_i||`.
    pub inner_tol: f64,
    pub init: DualInit,
    /// Record wall-clock time. Off by default so traces are reproducible.
    pub timing: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            k0: 1,
            sigma_rule: None,
            curvature: None,
            gamma: None,
            max_iters: DEFAULT_MAX_ITERS,
            tol_scale: DEFAULT_TOL_SCALE,
            inner_tol: DEFAULT_INNER_TOL,
            init: DualInit::Zero,
            timing: false,
        }
    }
}

impl HyperParams {
    pub fn resolved_sigma_rule(&self, algorithm: Algorithm) -> SigmaRule {
        self.sigma_rule.clone().unwrap_or(match algorithm {
            Algorithm::Iceadmm => SigmaRule::TheoryMultiplier {
                c: ICEADMM_THEORY_MULTIPLIER,
            },
            _ => SigmaRule::TheoryMultiplier {
                c: CEADMM_THEORY_MULTIPLIER,
            },
        })
    }

    pub fn resolved_curvature(&self, model: &LossModel) -> CurvatureMode {
        self.curvature.unwrap_or(match model {
            LossModel::LeastSquares => CurvatureMode::ScalarLipschitz,
            LossModel::Logistic { .. } => CurvatureMode::ScaledGram {
                r: DEFAULT_SCALED_GRAM,
            },
        })
    }

    pub fn validate(&self, algorithm: Algorithm) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if self.k0 == 0 {
            return bad("k0 must be at least 1".into());
        }
        if algorithm == Algorithm::Liadmm && self.k0 != 1 {
            return bad(format!(
                "liadmm aggregates every iteration; k0 must be 1, got {}",
                self.k0
            ));
        }
        if !(self.tol_scale > 0.0 && self.tol_scale.is_finite()) {
            return bad(format!(
                "tol_scale must be positive, got {}",
                self.tol_scale
            ));
        }
        if !(self.inner_tol > 0.0 && self.inner_tol.is_finite()) {
            return bad(format!(
                "inner_tol must be positive, got {}",
                self.inner_tol
            ));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return bad(format!("gamma must be positive, got {g}"));
            }
        }
        if algorithm.uses_sigma_rule() {
            match self.resolved_sigma_rule(algorithm) {
                SigmaRule::TheoryMultiplier { c } => {
                    let floor = if algorithm == Algorithm::Iceadmm {
                        3.0 * 2f64.sqrt()
                    } else {
                        2.0
                    };
                    if c.is_nan() || c <= floor {
                        return bad(format!(
                            "theory multiplier for {} must exceed {floor:.6}, got {c}",
                            algorithm.name()
                        ));
                    }
                }
                SigmaRule::PaperRule { a } if a.is_nan() || a <= 0.0 => {
                    return bad(format!("size-based rule scale must be positive, got {a}"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Penalty `σ_i` for one client.
pub fn sigma_schedule(
    rule: &SigmaRule,
    client: usize,
    w_i: f64,
    r_i: f64,
    m: usize,
    d_i: usize,
    k0: usize,
) -> Result<f64> {
    let sigma = match rule {
        SigmaRule::PaperRule { a } => {
            a * ((m * d_i) as f64).ln() / (10.0 * (2.0 + k0 as f64).ln()) * w_i * r_i
        }
        SigmaRule::TheoryMultiplier { c } => c * w_i * r_i,
        SigmaRule::Explicit { values } => *values.get(client).ok_or(Error::DimensionMismatch {
            expected: client + 1,
            found: values.len(),
        })?,
    };
    if sigma > 0.0 && sigma.is_finite() {
        Ok(sigma)
    } else {
        Err(Error::NonPositiveSigma {
            client,
            value: sigma,
        })
    }
}

fn weighted_gradient(
    model: &LossModel,
    data: &ClientDataset,
    x: &DenseVector,
) -> Result<DenseVector> {
    let mut g = loss_gradient(model, data, x)?;
    g.scale(data.weight);
    Ok(g)
}

/// `x - γ ∇f_i(x)`
pub fn fedavg_local(
    x_bcast: &DenseVector,
    gamma: f64,
    model: &LossModel,
    data: &ClientDataset,
) -> Result<DenseVector> {
    let g = loss_gradient(model, data, x_bcast)?;
    let mut x = x_bcast.clone();
    x.axpy(-gamma, &g);
    Ok(x)
}

/// `Σ w_i x_i`, reduced in client order.
pub fn fedavg_aggregate(xs: &[DenseVector], weights: &[f64]) -> Result<DenseVector> {
    if xs.len() != weights.len() || xs.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: weights.len().max(1),
            found: xs.len(),
        });
    }
    let n = xs[0].len();
    let mut acc = DenseVector::zeros(n);
    for (x, w) in xs.iter().zip(weights) {
        x.check_len(n)?;
        acc.axpy(*w, x);
    }
    Ok(acc)
}

/// Per-client data reused across iterations.
enum LocalKernel {
    /// Factor of `w_i A_iᵀA_i + σ_i I` and `w_i A_iᵀ b_i`.
    ExactQuadratic {
        chol: Cholesky,
        wtb: DenseVector,
    },
    ExactNewton {
        inner_tol: f64,
    },
    /// `H_i = r I`: the linear solve is a division by `w_i r + σ_i`.
    InexactScalar {
        denom: f64,
    },
    InexactMatrix {
        chol: Cholesky,
    },
    Linearized {
        gamma: f64,
    },
    Gradient {
        gamma: f64,
    },
}

impl LocalKernel {
    fn exact(model: &LossModel, data: &ClientDataset, sigma: f64, inner_tol: f64) -> Result<Self> {
        match model {
            LossModel::LeastSquares => {
                let m = data.features.gram().scaled(data.weight).add_diag(sigma);
                let mut wtb = data.features.tr_matvec(&data.targets)?;
                wtb.scale(data.weight);
                Ok(LocalKernel::ExactQuadratic {
                    chol: Cholesky::factor(&m)?,
                    wtb,
                })
            }
            LossModel::Logistic { .. } => Ok(LocalKernel::ExactNewton { inner_tol }),
        }
    }

    fn inexact(h: &DenseMatrix, scalar: Option<f64>, weight: f64, sigma: f64) -> Result<Self> {
        match scalar {
            Some(r) => Ok(LocalKernel::InexactScalar {
                denom: weight * r + sigma,
            }),
            None => Ok(LocalKernel::InexactMatrix {
                chol: Cholesky::factor(&h.scaled(weight).add_diag(sigma))?,
            }),
        }
    }
}

fn newton_subproblem(
    state: &ClientState,
    y: &DenseVector,
    model: &LossModel,
    data: &ClientDataset,
    inner_tol: f64,
) -> Result<DenseVector> {
    let (w, sigma) = (data.weight, state.sigma);
    let mut rhs = y.scaled(sigma);
    rhs.axpy(-1.0, &state.pi);
    let tol = inner_tol * (1.0 + rhs.norm());

    let value = |x: &DenseVector| -> Result<f64> {
        let diff = x.sub(y);
        Ok(w * loss_value(model, data, x)? + diff.dot(&state.pi) + 0.5 * sigma * diff.norm_sq())
    };
    let grad = |x: &DenseVector| -> Result<DenseVector> {
        let mut g = weighted_gradient(model, data, x)?;
        g.axpy(1.0, &state.pi);
        for ((gj, xj), yj) in g.iter_mut().zip(x.iter()).zip(y.iter()) {
            *gj += sigma * (xj - yj);
        }
        Ok(g)
    };

    let mut x = state.x.clone();
    let mut g = grad(&x)?;
    for _ in 0..NEWTON_MAX_STEPS {
        if g.norm() <= tol {
            return Ok(x);
        }
        let h = loss_hessian(model, data, &x)?.scaled(w).add_diag(sigma);
        let dir = Cholesky::factor(&h)?.solve(&g.scaled(-1.0))?;
        let slope = g.dot(&dir);
        let f0 = value(&x)?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut trial = x.clone();
            trial.axpy(t, &dir);
            if value(&trial)? <= f0 + ARMIJO_C * t * slope {
                accepted = Some(trial);
                break;
            }
            t *= 0.5;
        }
        let next = match accepted {
            Some(trial) => trial,
            None => {
                // Near the solution the objective is flat to rounding; fall
                // back to the full step when it still shrinks the gradient.
                let mut trial = x.clone();
                trial.axpy(1.0, &dir);
                let gt = grad(&trial)?;
                if gt.norm() >= g.norm() {
                    break;
                }
                trial
            }
        };
        x = next;
        g = grad(&x)?;
    }
    if g.norm() <= tol {
        return Ok(x);
    }
    Err(Error::InnerSolveFailure {
        client: data.client_id,
        steps: NEWTON_MAX_STEPS,
        grad_norm: g.norm(),
    })
}

fn finish_admm_step(
    state: &mut ClientState,
    x: DenseVector,
    y: &DenseVector,
    model: &LossModel,
    data: &ClientDataset,
) -> Result<()> {
    state.x = x;
    state.pi = dual_update(state, y)?;
    state.g = weighted_gradient(model, data, &state.x)?;
    Ok(())
}

fn apply_kernel(
    kernel: &LocalKernel,
    state: &mut ClientState,
    y: &DenseVector,
    refresh: bool,
    model: &LossModel,
    data: &ClientDataset,
) -> Result<()> {
    match kernel {
        LocalKernel::ExactQuadratic { chol, wtb } => {
            let mut rhs = wtb.clone();
            rhs.axpy(state.sigma, y);
            rhs.axpy(-1.0, &state.pi);
            let x = chol.solve(&rhs)?;
            finish_admm_step(state, x, y, model, data)
        }
        LocalKernel::ExactNewton { inner_tol } => {
            let x = newton_subproblem(state, y, model, data, *inner_tol)?;
            finish_admm_step(state, x, y, model, data)
        }
        LocalKernel::InexactScalar { denom } => {
            let step = inexact_rhs(state, y);
            let mut x = state.x.clone();
            x.axpy(-1.0 / denom, &step);
            finish_admm_step(state, x, y, model, data)
        }
        LocalKernel::InexactMatrix { chol } => {
            let step = chol.solve(&inexact_rhs(state, y))?;
            let x = state.x.sub(&step);
            finish_admm_step(state, x, y, model, data)
        }
        LocalKernel::Linearized { gamma } => {
            let grad_y = loss_gradient(model, data, y)?;
            let mut x = y.clone();
            x.axpy(-gamma, &grad_y);
            x.axpy(-gamma / data.weight, &state.pi);
            finish_admm_step(state, x, y, model, data)
        }
        LocalKernel::Gradient { gamma } => {
            let base = if refresh { y } else { &state.x };
            state.x = fedavg_local(base, *gamma, model, data)?;
            state.g = weighted_gradient(model, data, &state.x)?;
            Ok(())
        }
    }
}

/// `σ_i (x_i - y) + g_i + π_i`
fn inexact_rhs(state: &ClientState, y: &DenseVector) -> DenseVector {
    let mut r = state.g.add(&state.pi);
    for ((rj, xj), yj) in r.iter_mut().zip(state.x.iter()).zip(y.iter()) {
        *rj += state.sigma * (xj - yj);
    }
    r
}

/// Exact local update: minimizes
/// `w_i f_i(x) + <x - y, π_i> + σ_i/2 ||x - y||²`, then updates `π_i` and `g_i`.
pub fn ceadmm_local(
    state: &ClientState,
    y: &DenseVector,
    model: &LossModel,
    data: &ClientDataset,
    inner_tol: f64,
) -> Result<ClientState> {
    y.check_len(state.dim())?;
    let kernel = LocalKernel::exact(model, data, state.sigma, inner_tol)?;
    let mut next = state.clone();
    apply_kernel(&kernel, &mut next, y, true, model, data)?;
    Ok(next)
}

/// Inexact local update `x_i - (w_i H_i + σ_i I)⁻¹ [σ_i (x_i - y) + g_i + π_i]`.
pub fn iceadmm_local(
    state: &ClientState,
    y: &DenseVector,
    h: &DenseMatrix,
    model: &LossModel,
    data: &ClientDataset,
) -> Result<ClientState> {
    y.check_len(state.dim())?;
    if h.rows() != state.dim() || !h.is_square() {
        return Err(Error::DimensionMismatch {
            expected: state.dim(),
            found: h.rows(),
        });
    }
    let kernel = LocalKernel::inexact(h, None, data.weight, state.sigma)?;
    let mut next = state.clone();
    apply_kernel(&kernel, &mut next, y, true, model, data)?;
    Ok(next)
}

/// One linearized ADMM iteration: `x⁺ = Σ w_i x_i + γ Σ π_i`, then
/// `x_i⁺ = x⁺ - γ ∇f_i(x⁺) - (γ / w_i) π_i` and `π_i⁺ = π_i + (w_i / γ)(x_i⁺ - x⁺)`.
pub fn liadmm_step(
    clients: &[ClientState],
    gamma: f64,
    model: &LossModel,
    fed: &Federation,
) -> Result<(DenseVector, Vec<ClientState>)> {
    if clients.len() != fed.len() {
        return Err(Error::DimensionMismatch {
            expected: fed.len(),
            found: clients.len(),
        });
    }
    let y = liadmm_aggregate(clients, fed, gamma)?;
    let kernel = LocalKernel::Linearized { gamma };
    let mut next = clients.to_vec();
    for (state, data) in next.iter_mut().zip(fed.clients()) {
        state.sigma = data.weight / gamma;
        apply_kernel(&kernel, state, &y, true, model, data)?;
    }
    Ok((y, next))
}

fn liadmm_aggregate(clients: &[ClientState], fed: &Federation, gamma: f64) -> Result<DenseVector> {
    let mut y = DenseVector::zeros(fed.dim());
    for (c, data) in clients.iter().zip(fed.clients()) {
        c.x.check_len(fed.dim())?;
        c.pi.check_len(fed.dim())?;
        y.axpy(data.weight, &c.x);
    }
    for c in clients {
        y.axpy(gamma, &c.pi);
    }
    Ok(y)
}

/// Borrowed view of the iterate handed to an observer after every record.
#[derive(Debug, Clone, Copy)]
pub struct Snapshot<'a> {
    pub k: usize,
    pub in_k: bool,
    pub y: &'a DenseVector,
    pub clients: &'a [ClientState],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub algorithm: Algorithm,
    pub y_final: DenseVector,
    pub clients: Vec<ClientState>,
    pub trace: Vec<TraceRecord>,
    pub iterations: usize,
    pub rounds: usize,
    pub converged: bool,
    pub ledger: CommLedger,
    pub constants: ProblemConstants,
    /// Wall-clock seconds of the iteration loop; zero unless timing is on.
    pub elapsed_s: f64,
}

/// Runs `algorithm` until the stopping rule fires or `max_iters` is reached.
pub fn run(
    algorithm: Algorithm,
    fed: &Federation,
    model: &LossModel,
    hp: &HyperParams,
) -> Result<SolveResult> {
    run_observed(algorithm, fed, model, hp, |_| {})
}

/// Exact ADMM with aggregation at every step.
pub fn run_admm(fed: &Federation, model: &LossModel, hp: &HyperParams) -> Result<SolveResult> {
    let hp = HyperParams {
        k0: 1,
        ..hp.clone()
    };
    run(Algorithm::Ceadmm, fed, model, &hp)
}

/// Inexact ADMM with aggregation at every step.
pub fn run_iadmm(fed: &Federation, model: &LossModel, hp: &HyperParams) -> Result<SolveResult> {
    let hp = HyperParams {
        k0: 1,
        ..hp.clone()
    };
    run(Algorithm::Iceadmm, fed, model, &hp)
}

struct Setup {
    constants: ProblemConstants,
    kernels: Vec<LocalKernel>,
    gamma: f64,
}

fn setup(
    algorithm: Algorithm,
    fed: &Federation,
    model: &LossModel,
    hp: &HyperParams,
) -> Result<Setup> {
    let m = fed.len();
    let lipschitz = fed
        .clients()
        .iter()
        .map(|c| lipschitz_constant(model, c))
        .collect::<Result<Vec<_>>>()?;
    let weight: Vec<f64> = fed.clients().iter().map(|c| c.weight).collect();
    let gamma = hp
        .gamma
        .unwrap_or_else(|| 0.5 / lipschitz.iter().cloned().fold(0.0, f64::max));
    let sigma = if algorithm.uses_sigma_rule() {
        let rule = hp.resolved_sigma_rule(algorithm);
        if let SigmaRule::Explicit { values } = &rule {
            if values.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    found: values.len(),
                });
            }
        }
        fed.clients()
            .iter()
            .enumerate()
            .map(|(i, c)| sigma_schedule(&rule, i, weight[i], lipschitz[i], m, c.samples(), hp.k0))
            .collect::<Result<Vec<_>>>()?
    } else {
        weight.iter().map(|w| w / gamma).collect()
    };
    let kernels = match algorithm {
        Algorithm::Ceadmm => fed
            .clients()
            .iter()
            .zip(&sigma)
            .map(|(c, s)| LocalKernel::exact(model, c, *s, hp.inner_tol))
            .collect::<Result<Vec<_>>>()?,
        Algorithm::Iceadmm => {
            let mode = hp.resolved_curvature(model);
            fed.clients()
                .iter()
                .enumerate()
                .map(|(i, c)| match mode {
                    CurvatureMode::ScalarLipschitz => LocalKernel::inexact(
                        &DenseMatrix::zeros(0, 0),
                        Some(lipschitz[i]),
                        c.weight,
                        sigma[i],
                    ),
                    _ => LocalKernel::inexact(
                        &curvature_matrix(model, c, mode)?,
                        None,
                        c.weight,
                        sigma[i],
                    ),
                })
                .collect::<Result<Vec<_>>>()?
        }
        Algorithm::Liadmm => (0..m).map(|_| LocalKernel::Linearized { gamma }).collect(),
        Algorithm::FedAvg => (0..m).map(|_| LocalKernel::Gradient { gamma }).collect(),
    };
    Ok(Setup {
        constants: ProblemConstants {
            sigma,
            weight,
            lipschitz,
            k0: hp.k0,
        },
        kernels,
        gamma,
    })
}

#[cfg(feature = "parallel")]
fn for_each_client<F>(clients: &mut [ClientState], f: F) -> Result<()>
where
    F: Fn(usize, &mut ClientState) -> Result<()> + Sync + Send,
{
    use rayon::prelude::*;
    clients
        .par_iter_mut()
        .enumerate()
        .try_for_each(|(i, c)| f(i, c))
}

#[cfg(not(feature = "parallel"))]
fn for_each_client<F>(clients: &mut [ClientState], f: F) -> Result<()>
where
    F: Fn(usize, &mut ClientState) -> Result<()>,
{
    clients
        .iter_mut()
        .enumerate()
        .try_for_each(|(i, c)| f(i, c))
}

#[cfg(feature = "parallel")]
fn map_clients<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_clients<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T>,
{
    (0..n).map(f).collect()
}

struct RecordInput<'a> {
    k: usize,
    in_k: bool,
    y: &'a DenseVector,
    prev_y: &'a DenseVector,
    clients: &'a [ClientState],
    prev_x: &'a [DenseVector],
    rounds: usize,
    elapsed_s: f64,
}

fn make_record(
    fed: &Federation,
    model: &LossModel,
    lyap: &[f64],
    input: RecordInput<'_>,
) -> Result<TraceRecord> {
    let RecordInput {
        k,
        in_k,
        y,
        prev_y,
        clients,
        prev_x,
        rounds,
        elapsed_s,
    } = input;
    let per_client = map_clients(fed.len(), |i| {
        let data = &fed.clients()[i];
        Ok((
            loss_value(model, data, y)?,
            loss_gradient(model, data, y)?,
            loss_value(model, data, &clients[i].x)?,
        ))
    })?;
    let n = fed.dim();
    let mut rec = TraceRecord {
        k,
        in_k,
        f_y: 0.0,
        f_x: 0.0,
        lagrangian: 0.0,
        phi: 0.0,
        grad_f_sq: 0.0,
        grad_big_f_sq: 0.0,
        residuals: ResidualTriple::default(),
        rounds,
        elapsed_s,
        dy_sq: y.dist_sq(prev_y),
        dx_sq: clients
            .iter()
            .zip(prev_x)
            .map(|(c, p)| c.x.dist_sq(p))
            .collect(),
    };
    let mut grad_f = DenseVector::zeros(n);
    let mut grad_big_f = DenseVector::zeros(n);
    let mut pi_sum = DenseVector::zeros(n);
    let mut coupling = 0.0;
    for ((c, data), (fy_i, gy_i, fx_i)) in clients.iter().zip(fed.clients()).zip(&per_client) {
        let w = data.weight;
        rec.f_y += w * fy_i;
        rec.f_x += w * fx_i;
        grad_f.axpy(w, gy_i);
        grad_big_f.axpy(1.0, &c.g);
        pi_sum.axpy(1.0, &c.pi);
        let diff = c.x.sub(y);
        coupling += diff.dot(&c.pi) + 0.5 * c.sigma * diff.norm_sq();
        rec.residuals.dual += c.g.add(&c.pi).norm_sq();
        rec.residuals.primal += diff.norm_sq();
    }
    rec.residuals.consensus = pi_sum.norm_sq();
    rec.lagrangian = rec.f_x + coupling;
    rec.phi = rec.lagrangian + lyap.iter().zip(&rec.dx_sq).map(|(a, b)| a * b).sum::<f64>();
    rec.grad_f_sq = grad_f.norm_sq();
    rec.grad_big_f_sq = grad_big_f.norm_sq();
    Ok(rec)
}

/// [`run`] with a callback invoked on the initial state and after every iteration.
pub fn run_observed<O>(
    algorithm: Algorithm,
    fed: &Federation,
    model: &LossModel,
    hp: &HyperParams,
    mut observer: O,
) -> Result<SolveResult>
where
    O: FnMut(&Snapshot<'_>),
{
    if fed.is_empty() {
        return Err(Error::InvalidParams("federation has no clients".into()));
    }
    hp.validate(algorithm)?;
    let Setup {
        constants,
        kernels,
        gamma,
    } = setup(algorithm, fed, model, hp)?;
    let (m, n, d) = (fed.len(), fed.dim(), fed.samples());
    let lyap = constants.lyapunov_weights();

    let mut clients = fed
        .clients()
        .iter()
        .zip(&constants.sigma)
        .map(|(data, sigma)| {
            let x = DenseVector::zeros(n);
            let g = weighted_gradient(model, data, &x)?;
            let pi = match hp.init {
                DualInit::Zero => DenseVector::zeros(n),
                DualInit::GradientConsistent if algorithm != Algorithm::FedAvg => g.scaled(-1.0),
                DualInit::GradientConsistent => DenseVector::zeros(n),
            };
            ClientState::new(x, pi, g, *sigma).map_err(|_| Error::NonPositiveSigma {
                client: data.client_id,
                value: *sigma,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut server = ServerState::new(DenseVector::zeros(n), &clients);

    let converged_at = |rec: &TraceRecord| match algorithm {
        Algorithm::FedAvg => rec.grad_f_sq <= stopping_threshold(n, d, hp.tol_scale),
        _ => should_stop(&rec.residuals, n, d, hp.tol_scale),
    };

    let clock = hp.timing.then(std::time::Instant::now);
    let elapsed = || clock.map_or(0.0, |c| c.elapsed().as_secs_f64());

    let zeros: Vec<DenseVector> = clients.iter().map(|c| c.x.clone()).collect();
    let first = make_record(
        fed,
        model,
        &lyap,
        RecordInput {
            k: 0,
            in_k: true,
            y: &server.y,
            prev_y: &server.y,
            clients: &clients,
            prev_x: &zeros,
            rounds: 0,
            elapsed_s: elapsed(),
        },
    )?;
    observer(&Snapshot {
        k: 0,
        in_k: true,
        y: &server.y,
        clients: &clients,
    });
    let mut converged = converged_at(&first);
    let mut trace = vec![first];

    while !converged && server.k < hp.max_iters {
        let k = server.k;
        let prev_y = server.y.clone();
        let prev_x: Vec<DenseVector> = clients.iter().map(|c| c.x.clone()).collect();
        let in_k = in_schedule(k, hp.k0);

        match algorithm {
            Algorithm::Ceadmm | Algorithm::Iceadmm => {
                server.broadcast(hp.k0, &clients)?;
            }
            Algorithm::Liadmm => {
                let y = liadmm_aggregate(&clients, fed, gamma)?;
                server.record_broadcast(y, m, 2);
            }
            Algorithm::FedAvg => {
                if in_k {
                    let weights: Vec<f64> = fed.clients().iter().map(|c| c.weight).collect();
                    let y = fedavg_aggregate(&prev_x, &weights)?;
                    server.record_broadcast(y, m, 1);
                }
            }
        }
        let y = &server.y;
        let kernels = &kernels;
        for_each_client(&mut clients, |i, state| {
            apply_kernel(&kernels[i], state, y, in_k, model, &fed.clients()[i])
        })?;
        server.advance();

        if !server.y.is_finite()
            || clients
                .iter()
                .any(|c| !c.x.is_finite() || !c.pi.is_finite() || !c.g.is_finite())
        {
            return Err(Error::NonFiniteIterate { iteration: k });
        }

        let rec = make_record(
            fed,
            model,
            &lyap,
            RecordInput {
                k: k + 1,
                in_k: in_schedule(k + 1, hp.k0),
                y: &server.y,
                prev_y: &prev_y,
                clients: &clients,
                prev_x: &prev_x,
                rounds: server.rounds(),
                elapsed_s: elapsed(),
            },
        )?;
        if !(rec.lagrangian.is_finite() && rec.f_y.is_finite()) {
            return Err(Error::NonFiniteIterate { iteration: k });
        }
        observer(&Snapshot {
            k: k + 1,
            in_k: rec.in_k,
            y: &server.y,
            clients: &clients,
        });
        converged = converged_at(&rec);
        trace.push(rec);
    }

    Ok(SolveResult {
        algorithm,
        y_final: server.y.clone(),
        iterations: server.k,
        rounds: server.rounds(),
        converged,
        ledger: server.ledger,
        constants,
        elapsed_s: elapsed(),
        trace,
        clients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_client(rows: Vec<Vec<f64>>, b: Vec<f64>) -> Federation {
        Federation::from_parts(vec![(
            DenseMatrix::from_rows(&rows).unwrap(),
            DenseVector::from_vec(b),
        )])
        .unwrap()
    }

    fn state(x: f64, pi: f64, g: f64, sigma: f64) -> ClientState {
        ClientState::new(
            DenseVector::from_vec(vec![x]),
            DenseVector::from_vec(vec![pi]),
            DenseVector::from_vec(vec![g]),
            sigma,
        )
        .unwrap()
    }

    #[test]
    fn sigma_schedule_examples() {
        // ln(m d_i) = 10 ln(2 + k0) makes the log factor exactly one
        let v = sigma_schedule(
            &SigmaRule::PaperRule { a: 1.0 },
            0,
            0.5,
            2.0,
            1,
            3usize.pow(10),
            1,
        )
        .unwrap();
        assert!((v - 1.0).abs() < 1e-14);
        let v = sigma_schedule(&SigmaRule::PaperRule { a: 1.0 }, 0, 1.0, 1.0, 30, 100, 1).unwrap();
        assert!((v - 3000f64.ln() / (10.0 * 3f64.ln())).abs() < 1e-15);
        assert!((v - 0.72877).abs() < 1e-5);
        let v = sigma_schedule(
            &SigmaRule::TheoryMultiplier { c: 2.1 },
            0,
            0.5,
            1.0,
            3,
            10,
            1,
        )
        .unwrap();
        assert!((v - 1.05).abs() < 1e-15);
        let v = sigma_schedule(
            &SigmaRule::Explicit {
                values: vec![0.3, 0.7],
            },
            1,
            1.0,
            1.0,
            2,
            10,
            1,
        )
        .unwrap();
        assert_eq!(v, 0.7);
        assert!(matches!(
            sigma_schedule(
                &SigmaRule::Explicit { values: vec![-1.0] },
                0,
                1.0,
                1.0,
                1,
                10,
                1
            ),
            Err(Error::NonPositiveSigma { .. })
        ));
    }

    #[test]
    fn fedavg_examples() {
        let fed = one_client(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0, 2.0]);
        let data = &fed.clients()[0];
        let opt = DenseVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(
            fedavg_local(&opt, 0.1, &LossModel::LeastSquares, data).unwrap(),
            opt
        );
        let x = DenseVector::from_vec(vec![2.0, 3.0]);
        let next = fedavg_local(&x, 0.1, &LossModel::LeastSquares, data).unwrap();
        assert!((next[0] - 1.9).abs() < 1e-15 && (next[1] - 2.9).abs() < 1e-15);

        let xs = vec![
            DenseVector::from_vec(vec![0.0]),
            DenseVector::from_vec(vec![4.0]),
        ];
        assert_eq!(fedavg_aggregate(&xs, &[0.25, 0.75]).unwrap()[0], 3.0);
    }

    #[test]
    fn ceadmm_scalar_example() {
        let fed = one_client(vec![vec![1.0]], vec![2.0]);
        let next = ceadmm_local(
            &state(0.0, 0.0, 0.0, 1.0),
            &DenseVector::zeros(1),
            &LossModel::LeastSquares,
            &fed.clients()[0],
            1e-10,
        )
        .unwrap();
        assert!((next.x[0] - 1.0).abs() < 1e-15);
        assert!((next.pi[0] - 1.0).abs() < 1e-15);
        assert!((next.g[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn ceadmm_fixed_point() {
        let fed = one_client(
            vec![vec![1.0, 0.5], vec![0.0, 1.0], vec![1.0, 1.0]],
            vec![1.0, -1.0, 0.0],
        );
        let data = &fed.clients()[0];
        let y = DenseVector::from_vec(vec![0.2, -0.4]);
        let g = weighted_gradient(&LossModel::LeastSquares, data, &y).unwrap();
        let s = ClientState::new(y.clone(), g.scaled(-1.0), g.clone(), 3.0).unwrap();
        let next = ceadmm_local(&s, &y, &LossModel::LeastSquares, data, 1e-10).unwrap();
        assert!(next.x.dist_sq(&y).sqrt() < 1e-12);
        assert!(next.pi.dist_sq(&s.pi).sqrt() < 1e-12);
    }

    #[test]
    fn ceadmm_logistic_newton_meets_optimality() {
        let fed = one_client(
            vec![
                vec![1.0, 2.0],
                vec![-3.0, 0.5],
                vec![0.2, 0.2],
                vec![4.0, -1.0],
            ],
            vec![1.0, 0.0, 1.0, 1.0],
        );
        let model = LossModel::logistic(0.01).unwrap();
        let data = &fed.clients()[0];
        let s = ClientState::new(
            DenseVector::zeros(2),
            DenseVector::from_vec(vec![0.3, -0.1]),
            DenseVector::zeros(2),
            0.5,
        )
        .unwrap();
        let y = DenseVector::from_vec(vec![0.5, 0.5]);
        let next = ceadmm_local(&s, &y, &model, data, 1e-10).unwrap();
        let resid = next.g.add(&next.pi);
        let rhs_norm = y.scaled(0.5).sub(&s.pi).norm();
        assert!(resid.norm() <= 10.0 * 1e-10 * (1.0 + rhs_norm));
    }

    #[test]
    fn iceadmm_scalar_example() {
        let fed = one_client(vec![vec![1.0]], vec![0.0]);
        let s = state(1.0, 0.0, 1.0, 1.0);
        let h = DenseMatrix::from_diag(&[1.0]);
        let next = iceadmm_local(
            &s,
            &DenseVector::zeros(1),
            &h,
            &LossModel::LeastSquares,
            &fed.clients()[0],
        )
        .unwrap();
        assert!(next.x[0].abs() < 1e-15);
    }

    #[test]
    fn iceadmm_stationary_client() {
        let fed = one_client(vec![vec![2.0]], vec![1.0]);
        let s = state(0.7, -1.5, 1.5, 2.0);
        let y = DenseVector::from_vec(vec![0.7]);
        let h = DenseMatrix::from_diag(&[4.0]);
        let next = iceadmm_local(&s, &y, &h, &LossModel::LeastSquares, &fed.clients()[0]).unwrap();
        assert_eq!(next.x[0], 0.7);
        assert_eq!(next.pi[0], -1.5);
    }

    #[test]
    fn liadmm_zero_duals_reduce_to_gradient_step() {
        let parts = vec![
            (
                DenseMatrix::from_rows(&[vec![1.0]]).unwrap(),
                DenseVector::from_vec(vec![1.0]),
            ),
            (
                DenseMatrix::from_rows(&[vec![2.0]]).unwrap(),
                DenseVector::from_vec(vec![0.0]),
            ),
        ];
        let fed = Federation::from_parts(parts).unwrap();
        let gamma = 0.1;
        let cs = vec![state(0.5, 0.0, 0.0, 5.0), state(0.5, 0.0, 0.0, 5.0)];
        let (x, next) = liadmm_step(&cs, gamma, &LossModel::LeastSquares, &fed).unwrap();
        assert_eq!(x[0], 0.5);
        for (c, data) in next.iter().zip(fed.clients()) {
            let g = loss_gradient(&LossModel::LeastSquares, data, &x).unwrap();
            assert!((c.pi[0] + data.weight * g[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_client_ceadmm_hits_normal_equations() {
        let fed = one_client(
            vec![
                vec![1.0, 0.0],
                vec![0.0, 2.0],
                vec![1.0, 1.0],
                vec![3.0, -1.0],
            ],
            vec![1.0, 2.0, 0.0, 1.0],
        );
        let hp = HyperParams {
            tol_scale: 1e-20,
            ..HyperParams::default()
        };
        let res = run(Algorithm::Ceadmm, &fed, &LossModel::LeastSquares, &hp).unwrap();
        assert!(res.converged);
        let oracle = crate::analysis::oracle_optimum(&fed, &LossModel::LeastSquares).unwrap();
        assert!(res.y_final.sub(&oracle.x).norm_inf() < 1e-8);
        assert_eq!(res.trace.len(), res.iterations + 1);
    }

    #[test]
    fn theory_multiplier_floor_is_enforced() {
        let hp = HyperParams {
            sigma_rule: Some(SigmaRule::TheoryMultiplier { c: 2.0 }),
            ..HyperParams::default()
        };
        assert!(hp.validate(Algorithm::Ceadmm).is_err());
        let hp = HyperParams {
            sigma_rule: Some(SigmaRule::TheoryMultiplier { c: 4.2 }),
            ..HyperParams::default()
        };
        assert!(hp.validate(Algorithm::Iceadmm).is_err());
        assert!(HyperParams {
            k0: 3,
            ..HyperParams::default()
        }
        .validate(Algorithm::Liadmm)
        .is_err());
    }
}
