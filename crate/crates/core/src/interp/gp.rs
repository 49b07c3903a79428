//! Independent zero-mean Gaussian processes, one per coefficient, with an
//! anisotropic squared-exponential kernel.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{check_training, flatten, unflatten};
use crate::data::ParameterPoint;
use crate::dynamics::CoefficientMatrix;
use crate::error::{arg_err, LasdiError, Result};
use crate::nn::Adam;

/// Largest relative jitter tried before a kernel matrix is declared
/// indefinite.
pub const MAX_JITTER: f64 = 1e-4;

/// Kernel hyperparameters on a log scale: `k(a, b) = s^2 exp(-|a-b|_l^2 / 2)`
/// with `s = exp(log_scale)` and per-dimension lengths `exp(log_lengths)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GpHyper {
    pub log_scale: f64,
    pub log_lengths: Vec<f64>,
}

impl GpHyper {
    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for ((x, y), l) in a.iter().zip(b).zip(&self.log_lengths) {
            let d = (x - y) / l.exp();
            r2 += d * d;
        }
        (2.0 * self.log_scale - 0.5 * r2).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpOptions {
    /// Initial relative jitter; the noise variance is `jitter * s^2`.
    pub jitter: f64,
    pub restarts: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for GpOptions {
    fn default() -> Self {
        Self {
            jitter: 1e-8,
            restarts: 8,
            iterations: 200,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

/// One fitted scalar GP.
#[derive(Debug, Clone)]
pub struct ScalarGp {
    x: Vec<Vec<f64>>,
    hyper: GpHyper,
    jitter: f64,
    chol: Option<Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
    log_likelihood: f64,
}

impl PartialEq for ScalarGp {
    fn eq(&self, other: &Self) -> bool {
        self.x == other.x
            && self.hyper == other.hyper
            && self.jitter == other.jitter
            && self.alpha == other.alpha
            && self.log_likelihood.to_bits() == other.log_likelihood.to_bits()
    }
}

struct Factored {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
    lml: f64,
}

fn factorize(x: &[Vec<f64>], y: &DVector<f64>, hyper: &GpHyper, jitter: f64) -> Result<Factored> {
    let n = x.len();
    let s2 = hyper.scale().powi(2);
    let base = DMatrix::from_fn(n, n, |i, j| hyper.kernel(&x[i], &x[j]));
    let mut j = jitter;
    loop {
        let k = &base + DMatrix::identity(n, n) * (j * s2);
        if let Some(chol) = k.cholesky() {
            let alpha = chol.solve(y);
            let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let lml = -0.5 * y.dot(&alpha) - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            return Ok(Factored { chol, alpha, jitter: j, lml });
        }
        if j >= MAX_JITTER {
            return Err(LasdiError::NotPositiveDefinite { jitter: j });
        }
        j = (j * 10.0).min(MAX_JITTER);
    }
}

/// Log marginal likelihood and its gradient with respect to
/// `(log_scale, log_lengths...)`.
fn lml_and_grad(x: &[Vec<f64>], y: &DVector<f64>, hyper: &GpHyper, jitter: f64) -> Result<(f64, Vec<f64>, f64)> {
    let f = factorize(x, y, hyper, jitter)?;
    let n = x.len();
    let kinv = f.chol.inverse();
    // dK/dlog_scale = 2 K, so the trace term collapses to y^T alpha - n.
    let mut grad = vec![y.dot(&f.alpha) - n as f64];
    for (d, l) in hyper.log_lengths.iter().enumerate() {
        let l2 = (2.0 * l).exp();
        let mut g = 0.0;
        for i in 0..n {
            for j in 0..n {
                let diff = x[i][d] - x[j][d];
                let dk = hyper.kernel(&x[i], &x[j]) * diff * diff / l2;
                g += (f.alpha[i] * f.alpha[j] - kinv[(i, j)]) * dk;
            }
        }
        grad.push(0.5 * g);
    }
    Ok((f.lml, grad, f.jitter))
}

impl ScalarGp {
    /// Fits with fixed hyperparameters.
    pub fn fit_fixed(x: &[Vec<f64>], y: &[f64], hyper: GpHyper, jitter: f64) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return arg_err("GP needs matching, nonempty inputs and targets");
        }
        let yv = DVector::from_column_slice(y);
        if y.iter().all(|v| *v == 0.0) {
            return Ok(Self::zero(x, hyper, jitter));
        }
        let f = factorize(x, &yv, &hyper, jitter)?;
        Ok(Self {
            x: x.to_vec(),
            hyper,
            jitter: f.jitter,
            chol: Some(f.chol),
            alpha: f.alpha,
            log_likelihood: f.lml,
        })
    }

    /// A coefficient that is identically zero on the training set is
    /// predicted as exactly zero with zero spread.
    fn zero(x: &[Vec<f64>], hyper: GpHyper, jitter: f64) -> Self {
        Self {
            x: x.to_vec(),
            hyper,
            jitter,
            chol: None,
            alpha: DVector::zeros(x.len()),
            log_likelihood: f64::INFINITY,
        }
    }

    /// Multi-start Adam ascent of the log marginal likelihood over the log
    /// hyperparameters; keeps the best iterate seen.
    pub fn fit(x: &[Vec<f64>], y: &[f64], opts: &GpOptions, stream: u64) -> Result<Self> {
        if x.len() < 2 || x.len() != y.len() {
            return arg_err("GP needs at least two matching inputs and targets");
        }
        let dim = x[0].len();
        let n = x.len();
        let ranges: Vec<f64> = (0..dim)
            .map(|d| {
                let lo = x.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
                let hi = x.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
                if hi > lo {
                    hi - lo
                } else {
                    1.0
                }
            })
            .collect();
        let rms = (y.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let lengths0: Vec<f64> = ranges.iter().map(|r| r.ln()).collect();
        if rms == 0.0 {
            return Ok(Self::zero(x, GpHyper { log_scale: 0.0, log_lengths: lengths0 }, opts.jitter));
        }
        let scale0 = rms.ln();
        let lo: Vec<f64> = std::iter::once(scale0 - 3.0f64 * 10f64.ln())
            .chain(ranges.iter().map(|r| (r * 1e-2).ln()))
            .collect();
        let hi: Vec<f64> = std::iter::once(scale0 + 3.0f64 * 10f64.ln())
            .chain(ranges.iter().map(|r| r.ln()))
            .collect();

        let yv = DVector::from_column_slice(y);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(stream);
        let mut best: Option<(f64, GpHyper)> = None;
        for r in 0..opts.restarts.max(1) {
            let mut theta: Vec<f64> = std::iter::once(scale0).chain(lengths0.iter().copied()).collect();
            if r > 0 {
                theta[0] += rng.random_range(-1.0..1.0);
                for t in theta.iter_mut().skip(1) {
                    *t += rng.random_range(-2.0..1.5);
                }
            }
            for (t, (l, h)) in theta.iter_mut().zip(lo.iter().zip(&hi)) {
                *t = t.clamp(*l, *h);
            }
            let mut adam = Adam::new(theta.len(), opts.learning_rate);
            for it in 0..=opts.iterations {
                let hyper = GpHyper {
                    log_scale: theta[0],
                    log_lengths: theta[1..].to_vec(),
                };
                let Ok((lml, grad, _)) = lml_and_grad(x, &yv, &hyper, opts.jitter) else {
                    break;
                };
                if !lml.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    break;
                }
                if best.as_ref().is_none_or(|(b, _)| lml > *b) {
                    best = Some((lml, hyper));
                }
                if it == opts.iterations {
                    break;
                }
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                adam.step(&mut theta, &neg)?;
                for (t, (l, h)) in theta.iter_mut().zip(lo.iter().zip(&hi)) {
                    *t = t.clamp(*l, *h);
                }
            }
        }
        let (_, hyper) = best.ok_or(LasdiError::NotPositiveDefinite { jitter: MAX_JITTER })?;
        Self::fit_fixed(x, y, hyper, opts.jitter)
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.hyper
    }

    /// Jitter actually used after escalation.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    fn kernel_vector(&self, mu: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| self.hyper.kernel(xi, mu)))
    }

    /// Predictive mean alone; skips the triangular solve of `predict`.
    pub fn mean(&self, mu: &[f64]) -> f64 {
        if self.chol.is_none() {
            return 0.0;
        }
        self.kernel_vector(mu).dot(&self.alpha)
    }

    /// Predictive mean and standard deviation of the latent function.
    pub fn predict(&self, mu: &[f64]) -> (f64, f64) {
        let Some(chol) = &self.chol else {
            return (0.0, 0.0);
        };
        let ks = self.kernel_vector(mu);
        let mean = ks.dot(&self.alpha);
        let mut v = ks.clone();
        chol.l_dirty()
            .solve_lower_triangular_mut(&mut v);
        let var = self.hyper.scale().powi(2) - v.norm_squared();
        (mean, var.max(0.0).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpModel {
    gps: Vec<ScalarGp>,
    shape: (usize, usize),
    dim: usize,
}

fn inputs(params: &[ParameterPoint]) -> Vec<Vec<f64>> {
    params.iter().map(|p| p.values().to_vec()).collect()
}

pub fn gp_fit(params: &[ParameterPoint], xis: &[CoefficientMatrix], opts: &GpOptions) -> Result<GpModel> {
    let shape = check_training(params, xis)?;
    if params.len() < 2 {
        return arg_err("GP interpolation needs at least two training points");
    }
    let x = inputs(params);
    let y = flatten(xis);
    let gps = (0..y.ncols())
        .map(|q| ScalarGp::fit(&x, y.column(q).as_slice(), opts, q as u64))
        .collect::<Result<Vec<_>>>()?;
    Ok(GpModel {
        gps,
        shape,
        dim: params[0].dim(),
    })
}

/// Fits every coefficient with the same fixed hyperparameters.
pub fn gp_fit_fixed(params: &[ParameterPoint], xis: &[CoefficientMatrix], hyper: &GpHyper, jitter: f64) -> Result<GpModel> {
    let shape = check_training(params, xis)?;
    if hyper.log_lengths.len() != params[0].dim() {
        return arg_err("one length scale per parameter dimension required");
    }
    let x = inputs(params);
    let y = flatten(xis);
    let gps = (0..y.ncols())
        .map(|q| ScalarGp::fit_fixed(&x, y.column(q).as_slice(), hyper.clone(), jitter))
        .collect::<Result<Vec<_>>>()?;
    Ok(GpModel {
        gps,
        shape,
        dim: params[0].dim(),
    })
}

impl GpModel {
    pub fn gps(&self) -> &[ScalarGp] {
        &self.gps
    }

    fn check(&self, mu: &ParameterPoint) -> Result<()> {
        if mu.dim() != self.dim {
            return arg_err(format!("parameter has {} entries, model expects {}", mu.dim(), self.dim));
        }
        Ok(())
    }

    /// Elementwise predictive means and standard deviations.
    pub fn predict(&self, mu: &ParameterPoint) -> Result<(CoefficientMatrix, CoefficientMatrix)> {
        self.check(mu)?;
        let (m, s): (Vec<f64>, Vec<f64>) = self.gps.iter().map(|g| g.predict(mu.values())).unzip();
        Ok((unflatten(&m, self.shape), unflatten(&s, self.shape)))
    }

    /// Elementwise predictive means.
    pub fn mean(&self, mu: &ParameterPoint) -> Result<CoefficientMatrix> {
        self.check(mu)?;
        let m: Vec<f64> = self.gps.iter().map(|g| g.mean(mu.values())).collect();
        Ok(unflatten(&m, self.shape))
    }

    /// `n_s` independent elementwise draws from the predictive distribution.
    pub fn sample(&self, mu: &ParameterPoint, n_s: usize, seed: u64) -> Result<Vec<CoefficientMatrix>> {
        if n_s == 0 {
            return arg_err("need at least one sample");
        }
        let (m, s) = self.predict(mu)?;
        Ok(sample_independent(&m, &s, n_s, seed))
    }
}

/// Draws `m + s * N(0, 1)` elementwise, `n_s` times, from one seeded stream.
pub fn sample_independent(m: &CoefficientMatrix, s: &CoefficientMatrix, n_s: usize, seed: u64) -> Vec<CoefficientMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_s)
        .map(|_| {
            m.zip_map(s, |mi, si| {
                let e: f64 = rng.sample(StandardNormal);
                mi + si * e
            })
        })
        .collect()
}
