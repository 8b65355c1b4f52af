//! Residuals, Lagrangian and Lyapunov values, the stopping rule, reference
//! optima, and runtime checks of the descent lemmas and rate bounds.

use serde::{Deserialize, Serialize};

use crate::data::Federation;
use crate::error::{Error, Result};
use crate::fedcore::ClientState;
use crate::linalg::{symmetric_eigen, Cholesky, DenseMatrix, DenseVector};
use crate::losses::{loss_gradient, loss_value, LossModel, LIPSCHITZ_SAFETY};

/// Default multiplier of `sqrt(n d)` in the stopping rule.
pub const DEFAULT_TOL_SCALE: f64 = 1e-7;
/// Multiplicative slack on the rate bounds.
pub const RATE_SLACK: f64 = 1e-6;
/// Additive slack on the Lagrangian descent inequality.
pub const DESCENT_SLACK: f64 = 1e-8;
/// Additive slack on the Lyapunov monotonicity check.
pub const LYAPUNOV_SLACK: f64 = 1e-10;

/// The three stationarity residuals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualTriple {
    /// `Σ ||g_i + π_i||²`
    pub dual: f64,
    /// `Σ ||x_i - y||²`
    pub primal: f64,
    /// `||Σ π_i||²`
    pub consensus: f64,
}

impl ResidualTriple {
    pub fn max(&self) -> f64 {
        self.dual.max(self.primal).max(self.consensus)
    }
}

/// Scalar diagnostics of one iterate `(y^k, X^k, Π^k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: usize,
    pub in_k: bool,
    /// `f(y^k)`
    pub f_y: f64,
    /// `F(X^k) = Σ w_i f_i(x_i^k)`
    pub f_x: f64,
    /// Augmented Lagrangian `L^k`.
    pub lagrangian: f64,
    /// Lyapunov value `φ^k`.
    pub phi: f64,
    /// `||∇f(y^k)||²`
    pub grad_f_sq: f64,
    /// `||∇F(X^k)||² = ||Σ g_i||²`
    pub grad_big_f_sq: f64,
    pub residuals: ResidualTriple,
    pub rounds: usize,
    pub elapsed_s: f64,
    /// `||y^k - y^{k-1}||²` (zero at `k = 0`).
    #[serde(skip)]
    pub dy_sq: f64,
    /// `||x_i^k - x_i^{k-1}||²` per client (zero at `k = 0`).
    #[serde(skip)]
    pub dx_sq: Vec<f64>,
}

/// Per-client constants the descent and rate checks depend on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    pub sigma: Vec<f64>,
    pub weight: Vec<f64>,
    pub lipschitz: Vec<f64>,
    pub k0: usize,
}

impl ProblemConstants {
    pub fn clients(&self) -> usize {
        self.sigma.len()
    }

    pub fn sigma_total(&self) -> f64 {
        self.sigma.iter().sum()
    }

    fn wr(&self, i: usize) -> f64 {
        self.weight[i] * self.lipschitz[i]
    }

    /// `θ_i = σ_i - w_i r_i - 2 w_i² r_i² / σ_i`
    pub fn theta(&self) -> Vec<f64> {
        (0..self.clients())
            .map(|i| {
                let (s, wr) = (self.sigma[i], self.wr(i));
                s - wr - 2.0 * wr * wr / s
            })
            .collect()
    }

    /// `ϑ_i = σ_i - 18 w_i² r_i² / σ_i`
    pub fn vartheta(&self) -> Vec<f64> {
        (0..self.clients())
            .map(|i| {
                let (s, wr) = (self.sigma[i], self.wr(i));
                s - 18.0 * wr * wr / s
            })
            .collect()
    }

    /// Weights `6 w_i² r_i² / σ_i` of the successive-difference term in `φ`.
    pub fn lyapunov_weights(&self) -> Vec<f64> {
        (0..self.clients())
            .map(|i| 6.0 * self.wr(i).powi(2) / self.sigma[i])
            .collect()
    }

    /// `ρ = max_i 8 m σ_i² / θ_i`
    pub fn rho(&self) -> Result<f64> {
        let m = self.clients() as f64;
        max_ratio(&self.sigma, &self.theta(), 8.0 * m, "theta")
    }

    /// `ϱ = max_i 12 m σ_i² / ϑ_i`
    pub fn varrho(&self) -> Result<f64> {
        let m = self.clients() as f64;
        max_ratio(&self.sigma, &self.vartheta(), 12.0 * m, "vartheta")
    }
}

fn max_ratio(sigma: &[f64], denom: &[f64], scale: f64, name: &str) -> Result<f64> {
    let mut best = 0.0f64;
    for (i, (s, t)) in sigma.iter().zip(denom).enumerate() {
        if t.is_nan() || *t <= 0.0 {
            return Err(Error::HypothesisViolation(format!(
                "{name}_{i} = {t:.6e} is not positive (sigma_{i} = {s:.6e})"
            )));
        }
        best = best.max(scale * s * s / t);
    }
    Ok(best)
}

/// `f(x) = Σ w_i f_i(x)`
pub fn objective(fed: &Federation, model: &LossModel, x: &DenseVector) -> Result<f64> {
    fed.clients()
        .iter()
        .try_fold(0.0, |acc, c| Ok(acc + c.weight * loss_value(model, c, x)?))
}

/// `∇f(x) = Σ w_i ∇f_i(x)`
pub fn gradient(fed: &Federation, model: &LossModel, x: &DenseVector) -> Result<DenseVector> {
    let mut g = DenseVector::zeros(fed.dim());
    for c in fed.clients() {
        g.axpy(c.weight, &loss_gradient(model, c, x)?);
    }
    Ok(g)
}

fn check_clients(fed: &Federation, clients: &[ClientState], y: &DenseVector) -> Result<()> {
    if clients.len() != fed.len() {
        return Err(Error::DimensionMismatch {
            expected: fed.len(),
            found: clients.len(),
        });
    }
    y.check_len(fed.dim())?;
    for c in clients {
        c.x.check_len(fed.dim())?;
        c.pi.check_len(fed.dim())?;
    }
    Ok(())
}

/// `Σ_i [w_i f_i(x_i) + <x_i - y, π_i> + σ_i/2 ||x_i - y||²]`
pub fn lagrangian(
    fed: &Federation,
    model: &LossModel,
    clients: &[ClientState],
    y: &DenseVector,
) -> Result<f64> {
    check_clients(fed, clients, y)?;
    let mut total = 0.0;
    for (c, data) in clients.iter().zip(fed.clients()) {
        let diff = c.x.sub(y);
        total += data.weight * loss_value(model, data, &c.x)?
            + diff.dot(&c.pi)
            + 0.5 * c.sigma * diff.norm_sq();
    }
    Ok(total)
}

/// Stationarity residuals with `g_i` recomputed at the current `x_i`.
pub fn residuals(
    fed: &Federation,
    model: &LossModel,
    clients: &[ClientState],
    y: &DenseVector,
) -> Result<ResidualTriple> {
    check_clients(fed, clients, y)?;
    let mut res = ResidualTriple::default();
    let mut pi_sum = DenseVector::zeros(fed.dim());
    for (c, data) in clients.iter().zip(fed.clients()) {
        let mut r = loss_gradient(model, data, &c.x)?;
        r.scale(data.weight);
        r.axpy(1.0, &c.pi);
        res.dual += r.norm_sq();
        res.primal += c.x.dist_sq(y);
        pi_sum.axpy(1.0, &c.pi);
    }
    res.consensus = pi_sum.norm_sq();
    Ok(res)
}

/// Stopping threshold `sqrt(n d) * tol_scale`.
pub fn stopping_threshold(n: usize, d: usize, tol_scale: f64) -> f64 {
    ((n * d) as f64).sqrt() * tol_scale
}

/// True iff the largest residual is at most `sqrt(n d) * tol_scale`.
pub fn should_stop(res: &ResidualTriple, n: usize, d: usize, tol_scale: f64) -> bool {
    res.max() <= stopping_threshold(n, d, tol_scale)
}

/// Reference minimizer of the pooled objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub x: DenseVector,
    pub f_star: f64,
    /// Set when the least-squares system was singular and the
    /// minimum-norm solution was returned instead.
    pub min_norm: bool,
}

const ORACLE_GRAD_TOL: f64 = 1e-12;
const ORACLE_MAX_ITERS: usize = 5_000_000;

/// Minimizer of `f = Σ w_i f_i`: a direct solve for least squares, fixed-step
/// gradient descent for the logistic loss.
pub fn oracle_optimum(fed: &Federation, model: &LossModel) -> Result<OracleSolution> {
    let n = fed.dim();
    let mut gram = DenseMatrix::zeros(n, n);
    let mut rhs = DenseVector::zeros(n);
    for c in fed.clients() {
        let g = c.features.gram();
        for p in 0..n {
            for q in 0..n {
                gram[(p, q)] += c.weight * g[(p, q)];
            }
        }
        rhs.axpy(c.weight, &c.features.tr_matvec(&c.targets)?);
    }
    match model {
        LossModel::LeastSquares => {
            let (x, min_norm) = match Cholesky::factor(&gram) {
                Ok(ch) => (ch.solve(&rhs)?, false),
                Err(Error::FactorizationFailure { .. }) => (min_norm_solve(&gram, &rhs)?, true),
                Err(e) => return Err(e),
            };
            let f_star = objective(fed, model, &x)?;
            Ok(OracleSolution {
                x,
                f_star,
                min_norm,
            })
        }
        LossModel::Logistic { mu } => {
            let r = (crate::linalg::lambda_max(&gram)? / 4.0 + mu) * LIPSCHITZ_SAFETY;
            let step = 1.0 / r;
            let mut x = DenseVector::zeros(n);
            for _ in 0..ORACLE_MAX_ITERS {
                let g = gradient(fed, model, &x)?;
                if g.norm_inf() <= ORACLE_GRAD_TOL {
                    let f_star = objective(fed, model, &x)?;
                    return Ok(OracleSolution {
                        x,
                        f_star,
                        min_norm: false,
                    });
                }
                x.axpy(-step, &g);
            }
            Err(Error::NoConvergence {
                iterations: ORACLE_MAX_ITERS,
            })
        }
    }
}

fn min_norm_solve(m: &DenseMatrix, v: &DenseVector) -> Result<DenseVector> {
    let (vals, vecs) = symmetric_eigen(m)?;
    let top = vals.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let cutoff = top * 1e-12 * m.rows() as f64;
    let n = m.rows();
    let mut x = DenseVector::zeros(n);
    for (j, lam) in vals.iter().enumerate() {
        if lam.abs() <= cutoff {
            continue;
        }
        let coef = (0..n).map(|p| vecs[(p, j)] * v[p]).sum::<f64>() / lam;
        for p in 0..n {
            x[p] += coef * vecs[(p, j)];
        }
    }
    Ok(x)
}

/// One failed inequality `lhs <= rhs` at iteration `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSample {
    pub k: usize,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    pub checked: usize,
    /// Largest `lhs - rhs` observed (negative when every step has margin).
    pub worst_gap: f64,
    pub violations: Vec<BoundSample>,
}

impl DescentReport {
    pub(crate) fn push(&mut self, k: usize, lhs: f64, rhs: f64) {
        let gap = lhs - rhs;
        if self.checked == 0 || gap > self.worst_gap {
            self.worst_gap = gap;
        }
        self.checked += 1;
        if gap > 0.0 {
            self.violations.push(BoundSample { k, lhs, rhs });
        }
    }

    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks `L^{k+1} - L^k <= -σ/2 ||Δy^{k+1}||² - Σ θ_i/2 ||Δx_i^{k+1}||² + slack`
/// for every transition `k -> k+1` with `k >= from`.
pub fn check_lagrangian_descent(
    trace: &[TraceRecord],
    consts: &ProblemConstants,
    from: usize,
) -> DescentReport {
    let theta = consts.theta();
    let sigma = consts.sigma_total();
    let mut report = DescentReport::default();
    for pair in trace.windows(2).skip(from) {
        let (prev, next) = (&pair[0], &pair[1]);
        let lhs = next.lagrangian - prev.lagrangian;
        let decrease: f64 = 0.5 * sigma * next.dy_sq
            + theta
                .iter()
                .zip(&next.dx_sq)
                .map(|(t, d)| 0.5 * t * d)
                .sum::<f64>();
        report.push(prev.k, lhs, -decrease + DESCENT_SLACK);
    }
    report
}

/// Checks `φ^{k+1} <= φ^k + slack` for every `k >= max(from, 1)`.
pub fn check_lyapunov_descent(trace: &[TraceRecord], from: usize) -> DescentReport {
    let mut report = DescentReport::default();
    for pair in trace.windows(2).skip(from.max(1)) {
        report.push(pair[0].k, pair[1].phi, pair[0].phi + LYAPUNOV_SLACK);
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateVariant {
    /// Exact local solves, anchored at `L^0`.
    Ceadmm,
    /// Inexact local steps, anchored at `φ^1` with the index shift `k0`.
    Iceadmm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub rho: f64,
    pub varrho: f64,
    pub bound_satisfied_at: Vec<BoundSample>,
    pub violations: Vec<BoundSample>,
}

impl RateReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

fn stationarity(r: &TraceRecord) -> f64 {
    r.grad_big_f_sq.max(r.grad_f_sq)
}

/// Checks the `O(k0/k)` bound on `min_j max{||∇F(X^j)||², ||∇f(y^j)||²}` at
/// every `k >= 1` the trace supports.
///
/// The exact variant uses `(ρ k0 / k)(L^0 - f*)` over `j = 1..k`; the inexact
/// variant uses `(ϱ k0 / k)(φ^1 - f*)` over the shifted indices `j + k0`.
pub fn check_rate_bound(
    trace: &[TraceRecord],
    consts: &ProblemConstants,
    f_star: f64,
    variant: RateVariant,
) -> Result<RateReport> {
    let k0 = consts.k0.max(1);
    let (rho, varrho) = match variant {
        RateVariant::Ceadmm => (consts.rho()?, consts.varrho().unwrap_or(f64::NAN)),
        RateVariant::Iceadmm => (consts.rho().unwrap_or(f64::NAN), consts.varrho()?),
    };
    let (constant, anchor, shift) = match variant {
        RateVariant::Ceadmm => (rho, trace.first().map(|r| r.lagrangian), 0),
        RateVariant::Iceadmm => (varrho, trace.get(1).map(|r| r.phi), k0),
    };
    let mut report = RateReport {
        rho,
        varrho,
        bound_satisfied_at: Vec::new(),
        violations: Vec::new(),
    };
    let Some(anchor) = anchor else {
        return Ok(report);
    };
    let gap = anchor - f_star;
    let mut running_min = f64::INFINITY;
    let mut k = 1;
    while k + shift < trace.len() {
        running_min = running_min.min(stationarity(&trace[k + shift]));
        let rhs = constant * k0 as f64 / k as f64 * gap;
        let sample = BoundSample {
            k,
            lhs: running_min,
            rhs,
        };
        if running_min <= rhs * (1.0 + RATE_SLACK) {
            report.bound_satisfied_at.push(sample);
        } else {
            report.violations.push(sample);
        }
        k += 1;
    }
    Ok(report)
}
