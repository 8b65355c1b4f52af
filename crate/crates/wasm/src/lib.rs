//! Browser bindings: solve a synthetic federation, sweep the aggregation
//! period, and certify the descent and rate bounds of a run.
//!
//! Each export takes and returns plain JS objects. The same logic is
//! available as ordinary Rust functions for native use and testing.

use fedadmm::analysis::{
    check_lagrangian_descent, check_lyapunov_descent, check_rate_bound, oracle_optimum, RateVariant,
};
use fedadmm::data::{generate_classification, generate_regression, partition, Federation};
use fedadmm::losses::{CurvatureMode, LossModel};
use fedadmm::solvers::{run, Algorithm, DualInit, HyperParams, SigmaRule};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub algorithm: Algorithm,
    /// `"regression"` or `"classification"`.
    pub problem: String,
    pub clients: usize,
    pub dim: usize,
    pub seed: u64,
    pub k0: usize,
    /// `"theory"`: `σ_i = c·w_i·r_i`; `"size"`: the size-based rule with `a = c`.
    pub sigma_rule: String,
    pub multiplier: f64,
    pub max_iters: usize,
    pub tol_scale: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Ceadmm,
            problem: "regression".into(),
            clients: 9,
            dim: 20,
            seed: 7,
            k0: 5,
            sigma_rule: "theory".into(),
            multiplier: 4.3,
            max_iters: 3000,
            tol_scale: 1e-8,
        }
    }
}

impl DemoConfig {
    fn model(&self) -> fedadmm::Result<LossModel> {
        match self.problem.as_str() {
            "classification" => LossModel::logistic(0.01),
            _ => Ok(LossModel::LeastSquares),
        }
    }

    fn federation(&self, seed: u64) -> fedadmm::Result<Federation> {
        match self.problem.as_str() {
            "classification" => {
                let (a, b) = generate_classification(60 * self.clients, self.dim, seed);
                partition(&a, &b, self.clients, seed)
            }
            "regression" => generate_regression(self.clients, self.dim, (30, 60), seed),
            other => Err(fedadmm::Error::Config {
                path: "problem".into(),
                message: format!("unknown problem {other:?}"),
            }),
        }
    }

    fn hyperparams(&self, k0: usize) -> HyperParams {
        let algorithm_k0 = if self.algorithm == Algorithm::Liadmm {
            1
        } else {
            k0
        };
        HyperParams {
            k0: algorithm_k0,
            sigma_rule: match (self.algorithm, self.sigma_rule.as_str()) {
                (Algorithm::Ceadmm | Algorithm::Iceadmm, "size") => {
                    Some(SigmaRule::PaperRule { a: self.multiplier })
                }
                (Algorithm::Ceadmm | Algorithm::Iceadmm, _) => {
                    Some(SigmaRule::TheoryMultiplier { c: self.multiplier })
                }
                _ => None,
            },
            curvature: (self.algorithm == Algorithm::Iceadmm && self.problem != "classification")
                .then_some(CurvatureMode::ScalarLipschitz),
            max_iters: self.max_iters,
            tol_scale: self.tol_scale,
            init: if self.algorithm == Algorithm::Ceadmm {
                DualInit::GradientConsistent
            } else {
                DualInit::Zero
            },
            ..HyperParams::default()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Curve {
    pub iterations: usize,
    pub rounds: usize,
    pub converged: bool,
    pub f_star: f64,
    /// `f(y^k) - f*` per trace record.
    pub gap: Vec<f64>,
    /// Largest stopping residual per trace record.
    pub residual: Vec<f64>,
    /// Cumulative communication rounds per trace record.
    pub round_count: Vec<usize>,
    pub threshold: f64,
}

pub fn solve_curve(cfg: &DemoConfig) -> fedadmm::Result<Curve> {
    let fed = cfg.federation(cfg.seed)?;
    let model = cfg.model()?;
    let f_star = oracle_optimum(&fed, &model)?.f_star;
    let res = run(cfg.algorithm, &fed, &model, &cfg.hyperparams(cfg.k0))?;
    Ok(Curve {
        iterations: res.iterations,
        rounds: res.rounds,
        converged: res.converged,
        f_star,
        gap: res
            .trace
            .iter()
            .map(|t| (t.f_y - f_star).max(0.0))
            .collect(),
        residual: res.trace.iter().map(|t| t.residuals.max()).collect(),
        round_count: res.trace.iter().map(|t| t.rounds).collect(),
        threshold: fedadmm::analysis::stopping_threshold(fed.samples(), fed.dim(), cfg.tol_scale),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub k0: usize,
    pub mean_iterations: f64,
    pub mean_rounds: f64,
    pub converged: usize,
    pub runs: usize,
}

pub fn sweep_points(
    cfg: &DemoConfig,
    k0s: &[usize],
    repeats: usize,
) -> fedadmm::Result<Vec<SweepPoint>> {
    let model = cfg.model()?;
    let feds = (0..repeats as u64)
        .map(|r| cfg.federation(cfg.seed + r))
        .collect::<fedadmm::Result<Vec<_>>>()?;
    k0s.iter()
        .map(|&k0| {
            let mut point = SweepPoint {
                k0,
                mean_iterations: 0.0,
                mean_rounds: 0.0,
                converged: 0,
                runs: feds.len(),
            };
            for fed in &feds {
                let res = run(cfg.algorithm, fed, &model, &cfg.hyperparams(k0))?;
                point.mean_iterations += res.iterations as f64 / feds.len() as f64;
                point.mean_rounds += res.rounds as f64 / feds.len() as f64;
                point.converged += usize::from(res.converged);
            }
            Ok(point)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    pub descent_checked: usize,
    pub descent_violations: usize,
    pub descent_worst_gap: f64,
    pub rate_constant: f64,
    pub rate_checked: usize,
    pub rate_violations: usize,
    /// `(k, lhs, rhs)` of the rate bound for plotting.
    pub rate_samples: Vec<(usize, f64, f64)>,
    pub error: Option<String>,
}

pub fn certify_run(cfg: &DemoConfig) -> fedadmm::Result<Certificate> {
    let variant = match cfg.algorithm {
        Algorithm::Ceadmm => RateVariant::Ceadmm,
        Algorithm::Iceadmm => RateVariant::Iceadmm,
        other => {
            return Err(fedadmm::Error::Config {
                path: "algorithm".into(),
                message: format!("{} has no descent certificate", other.name()),
            })
        }
    };
    let fed = cfg.federation(cfg.seed)?;
    let model = cfg.model()?;
    let f_star = oracle_optimum(&fed, &model)?.f_star;
    let res = run(cfg.algorithm, &fed, &model, &cfg.hyperparams(cfg.k0))?;
    let descent = match variant {
        RateVariant::Ceadmm => check_lagrangian_descent(&res.trace, &res.constants, 0),
        RateVariant::Iceadmm => check_lyapunov_descent(&res.trace, 1),
    };
    let mut cert = Certificate {
        descent_checked: descent.checked,
        descent_violations: descent.violations.len(),
        descent_worst_gap: descent.worst_gap,
        rate_constant: f64::NAN,
        rate_checked: 0,
        rate_violations: 0,
        rate_samples: Vec::new(),
        error: None,
    };
    match check_rate_bound(&res.trace, &res.constants, f_star, variant) {
        Ok(rate) => {
            cert.rate_constant = match variant {
                RateVariant::Ceadmm => rate.rho,
                RateVariant::Iceadmm => rate.varrho,
            };
            cert.rate_checked = rate.bound_satisfied_at.len() + rate.violations.len();
            cert.rate_violations = rate.violations.len();
            let mut samples: Vec<_> = rate
                .bound_satisfied_at
                .iter()
                .chain(&rate.violations)
                .map(|s| (s.k, s.lhs, s.rhs))
                .collect();
            samples.sort_by_key(|s| s.0);
            cert.rate_samples = samples;
        }
        Err(e) => cert.error = Some(e.to_string()),
    }
    Ok(cert)
}

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn parse(cfg: JsValue) -> Result<DemoConfig, JsValue> {
    if cfg.is_undefined() || cfg.is_null() {
        return Ok(DemoConfig::default());
    }
    serde_wasm_bindgen::from_value(cfg).map_err(js_err)
}

fn emit<T: Serialize>(value: &T) -> Result<JsValue, JsValue> {
    value
        .serialize(&serde_wasm_bindgen::Serializer::json_compatible())
        .map_err(js_err)
}

/// Runs one solve and returns its convergence curves.
#[wasm_bindgen]
pub fn solve(cfg: JsValue) -> Result<JsValue, JsValue> {
    emit(&solve_curve(&parse(cfg)?).map_err(js_err)?)
}

/// Mean iterations and rounds for each aggregation period in `k0s`.
#[wasm_bindgen]
pub fn sweep(cfg: JsValue, k0s: Vec<usize>, repeats: usize) -> Result<JsValue, JsValue> {
    emit(&sweep_points(&parse(cfg)?, &k0s, repeats.max(1)).map_err(js_err)?)
}

/// Descent and rate-bound verification for one run.
#[wasm_bindgen]
pub fn certify(cfg: JsValue) -> Result<JsValue, JsValue> {
    emit(&certify_run(&parse(cfg)?).map_err(js_err)?)
}
