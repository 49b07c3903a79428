//! Multiquadric radial basis function interpolation.

use nalgebra::DMatrix;

use super::{check_training, distance, flatten, unflatten};
use crate::data::ParameterPoint;
use crate::dynamics::CoefficientMatrix;
use crate::error::{arg_err, LasdiError, Result};

/// `psi(d) = sqrt(d^2 / epsilon + 1)`.
pub fn multiquadric(d: f64, epsilon: f64) -> f64 {
    (d * d / epsilon + 1.0).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RbfModel {
    centers: Vec<ParameterPoint>,
    /// `N_mu x (N_z N_l)`: one weight column per coefficient.
    weights: DMatrix<f64>,
    epsilon: f64,
    shape: (usize, usize),
}

/// Mean Euclidean distance over all distinct center pairs.
pub fn mean_pairwise_distance(centers: &[ParameterPoint]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            total += distance(&centers[i], &centers[j]);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub fn rbf_fit(params: &[ParameterPoint], xis: &[CoefficientMatrix], epsilon: Option<f64>) -> Result<RbfModel> {
    let shape = check_training(params, xis)?;
    if params.len() < 2 {
        return arg_err("RBF interpolation needs at least two centers");
    }
    let epsilon = match epsilon {
        Some(e) => e,
        None => mean_pairwise_distance(params),
    };
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return arg_err(format!("RBF epsilon must be positive, got {epsilon}"));
    }
    let n = params.len();
    let a = DMatrix::from_fn(n, n, |i, j| multiquadric(distance(&params[i], &params[j]), epsilon));
    let y = flatten(xis);
    let weights = a
        .clone()
        .lu()
        .solve(&y)
        .ok_or_else(|| LasdiError::Singular("RBF interpolation matrix (coincident centers?)".into()))?;
    let resid = (&a * &weights - &y).norm();
    if !(resid <= 1e-8 * y.norm().max(f64::MIN_POSITIVE)) && resid > 0.0 {
        return Err(LasdiError::Singular(format!("RBF system residual {resid:e} too large")));
    }
    Ok(RbfModel {
        centers: params.to_vec(),
        weights,
        epsilon,
        shape,
    })
}

impl RbfModel {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn eval(&self, mu: &ParameterPoint) -> Result<CoefficientMatrix> {
        if mu.dim() != self.centers[0].dim() {
            return arg_err(format!("parameter has {} entries, model expects {}", mu.dim(), self.centers[0].dim()));
        }
        let psi: Vec<f64> = self.centers.iter().map(|c| multiquadric(distance(c, mu), self.epsilon)).collect();
        let mut out = vec![0.0; self.weights.ncols()];
        for (q, o) in out.iter_mut().enumerate() {
            *o = psi.iter().enumerate().map(|(i, p)| p * self.weights[(i, q)]).sum();
        }
        Ok(unflatten(&out, self.shape))
    }
}
