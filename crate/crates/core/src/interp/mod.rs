//! Interpolation of coefficient matrices across parameter space.

pub mod gp;
pub mod knn;
pub mod rbf;

use nalgebra::DMatrix;

use crate::data::ParameterPoint;
use crate::dynamics::CoefficientMatrix;
use crate::error::{arg_err, shape_err, Result};

pub use gp::{gp_fit, gp_fit_fixed, GpHyper, GpModel, GpOptions};
pub use knn::{knn_fit, knn_fit_with_metric, KnnModel};
pub use rbf::{rbf_fit, RbfModel};

pub(crate) fn distance(a: &ParameterPoint, b: &ParameterPoint) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub(crate) fn check_training(params: &[ParameterPoint], xis: &[CoefficientMatrix]) -> Result<(usize, usize)> {
    if params.is_empty() {
        return arg_err("no training parameters");
    }
    if params.len() != xis.len() {
        return shape_err(format!("{} parameters but {} coefficient matrices", params.len(), xis.len()));
    }
    let dim = params[0].dim();
    if params.iter().any(|p| p.dim() != dim) {
        return shape_err("training parameters differ in dimension");
    }
    let shape = xis[0].shape();
    if xis.iter().any(|x| x.shape() != shape) {
        return shape_err("coefficient matrices differ in shape");
    }
    Ok(shape)
}

/// Stacks each coefficient matrix (column-major) as one row.
pub(crate) fn flatten(xis: &[CoefficientMatrix]) -> DMatrix<f64> {
    let n = xis[0].len();
    DMatrix::from_fn(xis.len(), n, |i, q| xis[i].as_slice()[q])
}

pub(crate) fn unflatten(v: &[f64], shape: (usize, usize)) -> CoefficientMatrix {
    DMatrix::from_column_slice(shape.0, shape.1, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpKind {
    Rbf,
    Knn,
    Gp,
}

impl InterpKind {
    pub fn name(self) -> &'static str {
        match self {
            InterpKind::Rbf => "rbf",
            InterpKind::Knn => "knn",
            InterpKind::Gp => "gp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rbf" => Some(InterpKind::Rbf),
            "knn" => Some(InterpKind::Knn),
            "gp" => Some(InterpKind::Gp),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpConfig {
    pub kind: InterpKind,
    /// Neighbour count; capped at the number of training points.
    pub k: usize,
    /// Multiquadric shape; `None` uses the mean pairwise center distance.
    pub epsilon: Option<f64>,
    pub gp: GpOptions,
}

impl Default for InterpConfig {
    fn default() -> Self {
        Self {
            kind: InterpKind::Gp,
            k: 3,
            epsilon: None,
            gp: GpOptions::default(),
        }
    }
}

/// A fitted interpolator of any kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Interpolator {
    Rbf(RbfModel),
    Knn(KnnModel),
    Gp(GpModel),
}

impl Interpolator {
    pub fn fit(cfg: &InterpConfig, params: &[ParameterPoint], xis: &[CoefficientMatrix]) -> Result<Self> {
        Ok(match cfg.kind {
            InterpKind::Rbf => Interpolator::Rbf(rbf_fit(params, xis, cfg.epsilon)?),
            InterpKind::Knn => Interpolator::Knn(knn_fit(params, xis, cfg.k.min(params.len()).max(1))?),
            InterpKind::Gp => Interpolator::Gp(gp_fit(params, xis, &cfg.gp)?),
        })
    }

    pub fn kind(&self) -> InterpKind {
        match self {
            Interpolator::Rbf(_) => InterpKind::Rbf,
            Interpolator::Knn(_) => InterpKind::Knn,
            Interpolator::Gp(_) => InterpKind::Gp,
        }
    }

    /// Point estimate; the predictive mean for a GP.
    pub fn eval(&self, mu: &ParameterPoint) -> Result<CoefficientMatrix> {
        match self {
            Interpolator::Rbf(m) => m.eval(mu),
            Interpolator::Knn(m) => m.eval(mu),
            Interpolator::Gp(m) => m.mean(mu),
        }
    }

    pub fn as_gp(&self) -> Option<&GpModel> {
        match self {
            Interpolator::Gp(m) => Some(m),
            _ => None,
        }
    }
}
