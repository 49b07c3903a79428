//! Inverse-square-distance k-nearest-neighbour interpolation under a
//! Mahalanobis metric.

use nalgebra::{DMatrix, DVector};

use super::check_training;
use crate::data::ParameterPoint;
use crate::dynamics::CoefficientMatrix;
use crate::error::{arg_err, shape_err, LasdiError, Result};

/// Diagonal shift added to the sample covariance before inversion.
pub const COVARIANCE_SHIFT: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    params: Vec<ParameterPoint>,
    xis: Vec<CoefficientMatrix>,
    k: usize,
    /// Inverse of the metric covariance.
    metric: DMatrix<f64>,
}

/// Sample covariance (divisor `N - 1`) of the parameters plus
/// `COVARIANCE_SHIFT * I`.
pub fn parameter_covariance(params: &[ParameterPoint]) -> DMatrix<f64> {
    let d = params[0].dim();
    let n = params.len();
    let mean = DVector::from_fn(d, |j, _| params.iter().map(|p| p.values()[j]).sum::<f64>() / n as f64);
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for p in params {
            let diff = DVector::from_column_slice(p.values()) - &mean;
            cov += &diff * diff.transpose();
        }
        cov /= (n - 1) as f64;
    }
    cov + DMatrix::identity(d, d) * COVARIANCE_SHIFT
}

pub fn knn_fit(params: &[ParameterPoint], xis: &[CoefficientMatrix], k: usize) -> Result<KnnModel> {
    check_training(params, xis)?;
    let cov = parameter_covariance(params);
    let metric = cov
        .try_inverse()
        .ok_or_else(|| LasdiError::Singular("parameter covariance".into()))?;
    knn_fit_with_metric(params, xis, k, metric)
}

/// Like [`knn_fit`] but with an explicit inverse-covariance metric matrix.
pub fn knn_fit_with_metric(
    params: &[ParameterPoint],
    xis: &[CoefficientMatrix],
    k: usize,
    metric: DMatrix<f64>,
) -> Result<KnnModel> {
    check_training(params, xis)?;
    if k == 0 || k > params.len() {
        return arg_err(format!("k must lie in [1, {}], got {k}", params.len()));
    }
    let d = params[0].dim();
    if metric.shape() != (d, d) {
        return shape_err(format!("metric {:?} for {d}-dimensional parameters", metric.shape()));
    }
    Ok(KnnModel {
        params: params.to_vec(),
        xis: xis.to_vec(),
        k,
        metric,
    })
}

impl KnnModel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn metric(&self) -> &DMatrix<f64> {
        &self.metric
    }

    /// Squared metric distance.
    pub fn distance_sq(&self, a: &ParameterPoint, b: &ParameterPoint) -> f64 {
        let d = DVector::from_iterator(a.dim(), a.values().iter().zip(b.values()).map(|(x, y)| x - y));
        (d.transpose() * &self.metric * &d)[(0, 0)]
    }

    /// Indices of the `k` nearest training parameters and their weights.
    /// Ties in distance go to the lower index.
    pub fn weights(&self, mu: &ParameterPoint) -> Result<Vec<(usize, f64)>> {
        if mu.dim() != self.params[0].dim() {
            return arg_err(format!("parameter has {} entries, model expects {}", mu.dim(), self.params[0].dim()));
        }
        let mut d: Vec<(usize, f64)> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (i, self.distance_sq(p, mu)))
            .collect();
        d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        d.truncate(self.k);
        if let Some(&(i, _)) = d.iter().find(|(_, dist)| *dist == 0.0) {
            return Ok(vec![(i, 1.0)]);
        }
        let inv: Vec<f64> = d.iter().map(|(_, dist)| 1.0 / dist).collect();
        let total: f64 = inv.iter().sum();
        Ok(d.iter().zip(&inv).map(|((i, _), w)| (*i, w / total)).collect())
    }

    pub fn eval(&self, mu: &ParameterPoint) -> Result<CoefficientMatrix> {
        let w = self.weights(mu)?;
        if w.len() == 1 && w[0].1 == 1.0 {
            return Ok(self.xis[w[0].0].clone());
        }
        let mut out = DMatrix::zeros(self.xis[0].nrows(), self.xis[0].ncols());
        for (i, wi) in w {
            out += &self.xis[i] * wi;
        }
        Ok(out)
    }
}
