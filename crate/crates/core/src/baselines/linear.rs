use serde::{Deserialize, Serialize};

use super::BaselineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub ridge_lambda: f64,
}

fn check_matrix(x: &[Vec<f64>], y: &[f64]) -> Result<usize, BaselineError> {
    if x.is_empty() {
        return Err(BaselineError::Argument("no training samples".into()));
    }
    if x.len() != y.len() {
        return Err(BaselineError::Argument(format!("{} rows but {} targets", x.len(), y.len())));
    }
    let dim = x[0].len();
    if let Some(i) = x.iter().position(|r| r.len() != dim) {
        return Err(BaselineError::Argument(format!("row {i} has {} features, expected {dim}", x[i].len())));
    }
    Ok(dim)
}

/// Ridge regression with an unpenalized intercept, solved through the
/// centered normal equations `(Xcᵀ Xc + λI) w = Xcᵀ yc` by Cholesky.
pub fn fit_linear(x: &[Vec<f64>], y: &[f64], ridge_lambda: f64) -> Result<LinearModel, BaselineError> {
    let dim = check_matrix(x, y)?;
    if !(ridge_lambda >= 0.0) {
        return Err(BaselineError::Argument(format!("ridge_lambda must be non-negative, got {ridge_lambda}")));
    }
    let n = x.len() as f64;
    let x_mean: Vec<f64> = (0..dim).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let y_mean = y.iter().sum::<f64>() / n;

    let mut gram = vec![vec![0.0; dim]; dim];
    let mut rhs = vec![0.0; dim];
    for (row, &target) in x.iter().zip(y) {
        let centered: Vec<f64> = row.iter().zip(&x_mean).map(|(v, m)| v - m).collect();
        let yc = target - y_mean;
        for a in 0..dim {
            rhs[a] += centered[a] * yc;
            for b in 0..=a {
                gram[a][b] += centered[a] * centered[b];
            }
        }
    }
    for a in 0..dim {
        gram[a][a] += ridge_lambda;
        for b in 0..a {
            gram[b][a] = gram[a][b];
        }
    }
    let weights = cholesky_solve(gram, rhs).ok_or_else(|| {
        BaselineError::Numerical(match ridge_lambda == 0.0 {
            true => "normal equations are singular; use ridge_lambda > 0".into(),
            false => "normal equations are not positive definite".into(),
        })
    })?;
    let intercept = y_mean - weights.iter().zip(&x_mean).map(|(w, m)| w * m).sum::<f64>();
    Ok(LinearModel { weights, intercept, ridge_lambda })
}

/// Solves `a x = b` for symmetric positive-definite `a`. `None` when a pivot
/// is not clearly positive relative to the matrix scale.
fn cholesky_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = (0..n).map(|i| a[i][i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for j in 0..n {
        let mut diag = a[j][j];
        for k in 0..j {
            diag -= a[j][k] * a[j][k];
        }
        if !(diag > scale * 1e-12) {
            return None;
        }
        let diag = diag.sqrt();
        a[j][j] = diag;
        for i in j + 1..n {
            let mut v = a[i][j];
            for k in 0..j {
                v -= a[i][k] * a[j][k];
            }
            a[i][j] = v / diag;
        }
    }
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= a[i][k] * b[k];
        }
        b[i] = v / a[i][i];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in i + 1..n {
            v -= a[k][i] * b[k];
        }
        b[i] = v / a[i][i];
    }
    Some(b)
}

pub fn predict_linear(model: &LinearModel, x: &[f64]) -> Result<f64, BaselineError> {
    if x.len() != model.weights.len() {
        return Err(BaselineError::Argument(format!("expected {} features, got {}", model.weights.len(), x.len())));
    }
    Ok(model.intercept + model.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
}
