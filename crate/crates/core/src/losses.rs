//! Local loss families: least squares and l2-regularised logistic loss.

use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::linalg::{lambda_max, DenseMatrix, DenseVector};

/// Multiplicative safety factor applied to every estimated Lipschitz constant.
pub const LIPSCHITZ_SAFETY: f64 = 1.0 + 1e-6;

/// Default logistic penalty.
pub const DEFAULT_MU: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LossModel {
    /// `sum_j 1/2 (<a_j, x> - b_j)^2`
    LeastSquares,
    /// `sum_j [ln(1 + e^<a_j,x>) - b_j <a_j,x> + mu/(2 d_i) ||x||^2]`
    Logistic { mu: f64 },
}

impl LossModel {
    pub fn logistic(mu: f64) -> Result<Self> {
        if mu > 0.0 && mu.is_finite() {
            Ok(LossModel::Logistic { mu })
        } else {
            Err(Error::InvalidParams(format!(
                "logistic penalty must be positive, got {mu}"
            )))
        }
    }

    pub fn mu(&self) -> f64 {
        match self {
            LossModel::LeastSquares => 0.0,
            LossModel::Logistic { mu } => *mu,
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self, LossModel::LeastSquares)
    }
}

/// Choice of the curvature matrix `H_i` used by the inexact update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CurvatureMode {
    /// `r_i I`
    ScalarLipschitz,
    /// `(1/r) A_i^T A_i`
    ScaledGram { r: f64 },
    /// `A_i^T A_i`, least squares only.
    FullGram,
}

/// `ln(1 + e^t)` without overflow.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Logistic sigmoid without overflow.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn check_inputs(model: &LossModel, data: &ClientDataset, x: &DenseVector) -> Result<()> {
    x.check_len(data.dim())?;
    if let LossModel::Logistic { .. } = model {
        let bad: Vec<f64> = data
            .targets
            .iter()
            .copied()
            .filter(|&v| v != 0.0 && v != 1.0)
            .collect();
        if !bad.is_empty() {
            return Err(Error::LabelDomain { values: bad });
        }
    }
    Ok(())
}

/// `f_i(x)`
pub fn loss_value(model: &LossModel, data: &ClientDataset, x: &DenseVector) -> Result<f64> {
    check_inputs(model, data, x)?;
    let t = data.features.matvec(x)?;
    Ok(match model {
        LossModel::LeastSquares => t
            .iter()
            .zip(data.targets.iter())
            .map(|(ti, bi)| 0.5 * (ti - bi) * (ti - bi))
            .sum(),
        LossModel::Logistic { mu } => {
            let data_term: f64 = t
                .iter()
                .zip(data.targets.iter())
                .map(|(ti, bi)| softplus(*ti) - bi * ti)
                .sum();
            data_term + 0.5 * mu * x.norm_sq()
        }
    })
}

/// `∇f_i(x)`
pub fn loss_gradient(
    model: &LossModel,
    data: &ClientDataset,
    x: &DenseVector,
) -> Result<DenseVector> {
    check_inputs(model, data, x)?;
    let t = data.features.matvec(x)?;
    match model {
        LossModel::LeastSquares => {
            let resid = t.sub(&data.targets);
            data.features.tr_matvec(&resid)
        }
        LossModel::Logistic { mu } => {
            let resid: DenseVector = t
                .iter()
                .zip(data.targets.iter())
                .map(|(ti, bi)| sigmoid(*ti) - bi)
                .collect();
            let mut g = data.features.tr_matvec(&resid)?;
            g.axpy(*mu, x);
            Ok(g)
        }
    }
}

/// `∇²f_i(x)`
pub fn loss_hessian(
    model: &LossModel,
    data: &ClientDataset,
    x: &DenseVector,
) -> Result<DenseMatrix> {
    check_inputs(model, data, x)?;
    match model {
        LossModel::LeastSquares => Ok(data.features.gram()),
        LossModel::Logistic { mu } => {
            let t = data.features.matvec(x)?;
            let n = data.dim();
            let mut h = DenseMatrix::zeros(n, n);
            for (i, ti) in t.iter().enumerate() {
                let s = sigmoid(*ti);
                let c = s * (1.0 - s);
                if c == 0.0 {
                    continue;
                }
                let row = data.features.row(i);
                for p in 0..n {
                    let cp = c * row[p];
                    for q in p..n {
                        h[(p, q)] += cp * row[q];
                    }
                }
            }
            for p in 0..n {
                h[(p, p)] += mu;
                for q in 0..p {
                    h[(p, q)] = h[(q, p)];
                }
            }
            Ok(h)
        }
    }
}

/// Gradient Lipschitz constant `r_i`, inflated by [`LIPSCHITZ_SAFETY`].
pub fn lipschitz_constant(model: &LossModel, data: &ClientDataset) -> Result<f64> {
    if data.samples() == 0 {
        return Err(Error::InvalidRange { lo: 0, hi: 0 });
    }
    let top = lambda_max(&data.features.gram())?;
    Ok(match model {
        LossModel::LeastSquares => top,
        LossModel::Logistic { mu } => top / 4.0 + mu,
    } * LIPSCHITZ_SAFETY)
}

/// Curvature matrix `H_i` for the inexact local step.
pub fn curvature_matrix(
    model: &LossModel,
    data: &ClientDataset,
    mode: CurvatureMode,
) -> Result<DenseMatrix> {
    match (mode, model) {
        (CurvatureMode::ScalarLipschitz, _) => {
            let r = lipschitz_constant(model, data)?;
            Ok(DenseMatrix::from_diag(&vec![r; data.dim()]))
        }
        (CurvatureMode::FullGram, LossModel::LeastSquares) => Ok(data.features.gram()),
        (CurvatureMode::FullGram, LossModel::Logistic { .. }) => Err(Error::InvalidMode(
            "full Gram curvature does not majorize the logistic loss".into(),
        )),
        (CurvatureMode::ScaledGram { r }, LossModel::Logistic { mu }) if r <= 4.0 + mu => {
            Err(Error::InvalidMode(format!(
                "scaled Gram needs r > 4 + mu = {}, got {r}",
                4.0 + mu
            )))
        }
        (CurvatureMode::ScaledGram { r }, LossModel::LeastSquares) if r < 1.0 => {
            Err(Error::InvalidMode(format!(
                "scaled Gram needs r >= 1 for least squares, got {r}"
            )))
        }
        (CurvatureMode::ScaledGram { r }, _) => Ok(data.features.gram().scaled(1.0 / r)),
    }
}
