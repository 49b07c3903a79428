//! Reduced-order prediction: interpolate coefficients, integrate the latent
//! ODE, decode.

use nalgebra::{DMatrix, DVector};

use crate::data::ParameterPoint;
use crate::dynamics::{CoefficientMatrix, LibrarySpec};
use crate::error::{arg_err, shape_err, LasdiError, Result};
use crate::interp::{gp::sample_independent, InterpConfig, Interpolator};
use crate::projection::Projection;

/// Fraction of sampled ODEs allowed to blow up before a prediction fails.
pub const MAX_BLOWUP_FRACTION: f64 = 0.25;

struct Rhs<'a> {
    xi: &'a CoefficientMatrix,
    spec: LibrarySpec,
    row: Vec<f64>,
}

impl Rhs<'_> {
    fn eval(&mut self, z: &[f64], out: &mut [f64]) {
        self.spec.eval_row(z, &mut self.row);
        // Column by column over the column-major Xi; each output still sums
        // its terms in library order.
        out.fill(0.0);
        for (col, b) in self.xi.as_slice().chunks_exact(out.len()).zip(&self.row) {
            for (o, c) in out.iter_mut().zip(col) {
                *o += c * b;
            }
        }
    }
}

/// Classical RK4 for `dz/dt = Xi b(z)` over `n_steps` uniform steps.
/// Row `n` of the result is the state at `n dt`.
pub fn integrate_latent(
    xi: &CoefficientMatrix,
    z0: &[f64],
    dt: f64,
    n_steps: usize,
    spec: &LibrarySpec,
) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let n_z = z0.len();
    if xi.shape() != (n_z, spec.n_terms(n_z)) {
        return shape_err(format!(
            "coefficients {:?} do not fit N_z = {n_z} with {} terms",
            xi.shape(),
            spec.n_terms(n_z)
        ));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return arg_err(format!("dt must be positive, got {dt}"));
    }
    if z0.iter().chain(xi.iter()).any(|v| !v.is_finite()) {
        return Err(LasdiError::NonFinite("latent initial state or coefficients".into()));
    }
    let mut rhs = Rhs {
        xi,
        spec: *spec,
        row: vec![0.0; spec.n_terms(n_z)],
    };
    let mut out = DMatrix::zeros(n_steps + 1, n_z);
    let mut z = z0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n_z], vec![0.0; n_z], vec![0.0; n_z], vec![0.0; n_z]);
    let mut tmp = vec![0.0; n_z];
    for (j, v) in z.iter().enumerate() {
        out[(0, j)] = *v;
    }
    for n in 1..=n_steps {
        rhs.eval(&z, &mut k1);
        for j in 0..n_z {
            tmp[j] = z[j] + 0.5 * dt * k1[j];
        }
        rhs.eval(&tmp, &mut k2);
        for j in 0..n_z {
            tmp[j] = z[j] + 0.5 * dt * k2[j];
        }
        rhs.eval(&tmp, &mut k3);
        for j in 0..n_z {
            tmp[j] = z[j] + dt * k3[j];
        }
        rhs.eval(&tmp, &mut k4);
        for j in 0..n_z {
            z[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(LasdiError::BlowUp { step: n });
        }
        for (j, v) in z.iter().enumerate() {
            out[(n, j)] = *v;
        }
    }
    Ok(out)
}

/// A trained reduced-order model.
#[derive(Debug, Clone, PartialEq)]
pub struct RomModel {
    pub projection: Projection,
    pub library: LibrarySpec,
    pub params: Vec<ParameterPoint>,
    pub xis: Vec<CoefficientMatrix>,
    pub interp_config: InterpConfig,
    pub interpolator: Interpolator,
    pub dt: f64,
    pub n_steps: usize,
}

/// Output of a prediction. Fields are `(N_t + 1) x N_u`.
#[derive(Debug, Clone, PartialEq)]
pub struct RomPrediction {
    pub mean: DMatrix<f64>,
    /// Population variance over the successful draws.
    pub variance: Option<DMatrix<f64>>,
    /// One latent trajectory per successful draw (one for mean-only).
    pub latents: Vec<DMatrix<f64>>,
    /// Draws excluded because their latent ODE blew up.
    pub failed_draws: usize,
}

impl RomPrediction {
    pub fn std(&self) -> Option<DMatrix<f64>> {
        self.variance.as_ref().map(|v| v.map(f64::sqrt))
    }

    /// Largest standard deviation over time and space; 0 for mean-only.
    pub fn max_std(&self) -> f64 {
        self.variance.as_ref().map_or(0.0, |v| v.max().max(0.0).sqrt())
    }
}

impl RomModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        projection: Projection,
        library: LibrarySpec,
        params: Vec<ParameterPoint>,
        xis: Vec<CoefficientMatrix>,
        interp_config: InterpConfig,
        dt: f64,
        n_steps: usize,
    ) -> Result<Self> {
        let n_z = projection.latent_dim();
        if xis.iter().any(|x| x.shape() != (n_z, library.n_terms(n_z))) {
            return shape_err("coefficient matrices do not match the latent dimension and library");
        }
        let interpolator = Interpolator::fit(&interp_config, &params, &xis)?;
        Ok(Self {
            projection,
            library,
            params,
            xis,
            interp_config,
            interpolator,
            dt,
            n_steps,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.projection.latent_dim()
    }

    pub fn n_dofs(&self) -> usize {
        self.projection.n_dofs()
    }

    /// Refits the interpolator, e.g. after coefficients changed.
    pub fn refit_interpolator(&mut self) -> Result<()> {
        self.interpolator = Interpolator::fit(&self.interp_config, &self.params, &self.xis)?;
        Ok(())
    }

    pub fn encode_state(&self, u0: &DVector<f64>) -> Result<Vec<f64>> {
        if u0.len() != self.n_dofs() {
            return shape_err(format!("initial state has {} entries, model expects {}", u0.len(), self.n_dofs()));
        }
        let z = self.projection.encode(&DMatrix::from_column_slice(u0.len(), 1, u0.as_slice()))?;
        Ok(z.as_slice().to_vec())
    }

    /// Integrates and decodes with a given coefficient matrix.
    pub fn rollout(&self, xi: &CoefficientMatrix, z0: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let z = integrate_latent(xi, z0, self.dt, self.n_steps, &self.library)?;
        let u = self.projection.decode_trajectory(&z)?;
        Ok((z, u))
    }

    /// Mean-only prediction with the interpolated (or GP mean) coefficients.
    pub fn predict(&self, mu: &ParameterPoint, u0: &DVector<f64>) -> Result<RomPrediction> {
        let xi = self.interpolator.eval(mu)?;
        let z0 = self.encode_state(u0)?;
        let (z, u) = self.rollout(&xi, &z0)?;
        Ok(RomPrediction {
            mean: u,
            variance: None,
            latents: vec![z],
            failed_draws: 0,
        })
    }

    /// Mean and variance over `n_s` GP draws of the coefficients.
    pub fn predict_with_uncertainty(
        &self,
        mu: &ParameterPoint,
        u0: &DVector<f64>,
        n_s: usize,
        seed: u64,
    ) -> Result<RomPrediction> {
        let gp = self
            .interpolator
            .as_gp()
            .ok_or_else(|| LasdiError::InvalidArgument("uncertainty needs a GP interpolator".into()))?;
        if n_s < 2 {
            return arg_err(format!("need at least two samples, got {n_s}"));
        }
        let (m, s) = gp.predict(mu)?;
        let draws = sample_independent(&m, &s, n_s, seed);
        self.predict_with_samples(u0, &draws)
    }

    /// Ensemble prediction from explicit coefficient draws.
    pub fn predict_with_samples(&self, u0: &DVector<f64>, draws: &[CoefficientMatrix]) -> Result<RomPrediction> {
        if draws.is_empty() {
            return arg_err("no coefficient draws");
        }
        let z0 = self.encode_state(u0)?;
        let mut fields = Vec::with_capacity(draws.len());
        let mut latents = Vec::with_capacity(draws.len());
        let mut failed = 0;
        for xi in draws {
            match self.rollout(xi, &z0) {
                Ok((z, u)) if u.iter().all(|v| v.is_finite()) => {
                    fields.push(u);
                    latents.push(z);
                }
                Ok(_) | Err(LasdiError::BlowUp { .. }) => failed += 1,
                Err(e) => return Err(e),
            }
        }
        if failed as f64 > MAX_BLOWUP_FRACTION * draws.len() as f64 || fields.is_empty() {
            return Err(LasdiError::SampleBlowUp {
                failed,
                total: draws.len(),
            });
        }
        let (mean, variance) = population_moments(&fields);
        Ok(RomPrediction {
            mean,
            variance: Some(variance),
            latents,
            failed_draws: failed,
        })
    }
}

/// Elementwise mean and population variance (divisor = number of fields),
/// accumulated in draw order.
pub fn population_moments(fields: &[DMatrix<f64>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = fields.len() as f64;
    let mut mean = DMatrix::zeros(fields[0].nrows(), fields[0].ncols());
    for f in fields {
        mean += f;
    }
    mean /= n;
    let mut var = DMatrix::zeros(mean.nrows(), mean.ncols());
    for f in fields {
        let d = f - &mean;
        var += d.component_mul(&d);
    }
    var /= n;
    (mean, var)
}

/// `||pred_n - truth_n|| / ||truth_n||` for every time slice (row).
pub fn relative_errors(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<Vec<f64>> {
    if pred.shape() != truth.shape() {
        return shape_err(format!("prediction {:?} vs truth {:?}", pred.shape(), truth.shape()));
    }
    (0..truth.nrows())
        .map(|n| {
            let t = truth.row(n).norm();
            if t == 0.0 {
                return arg_err(format!("truth snapshot {n} has zero norm"));
            }
            Ok((pred.row(n) - truth.row(n)).norm() / t)
        })
        .collect()
}

/// Maximum over time of the relative L2 error.
pub fn max_relative_error(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    Ok(relative_errors(pred, truth)?.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::InterpKind;
    use crate::nn::{Activation, Dense, Mlp};
    use crate::projection::{Autoencoder, PodBasis};

    fn decay() -> (CoefficientMatrix, LibrarySpec) {
        (DMatrix::from_element(1, 1, -1.0), LibrarySpec { include_constant: false, poly_degree: 1 })
    }

    #[test]
    fn rk4_decay() {
        let (xi, spec) = decay();
        let z = integrate_latent(&xi, &[1.0], 1e-3, 1000, &spec).unwrap();
        assert_eq!(z[(0, 0)], 1.0);
        assert!((z[(1000, 0)] - (-1.0f64).exp()).abs() < 1e-10);

        let err = |n: usize| {
            let z = integrate_latent(&xi, &[1.0], 1.0 / n as f64, n, &spec).unwrap();
            (z[(n, 0)] - (-1.0f64).exp()).abs()
        };
        let ratio = err(10) / err(20);
        assert!((12.0..=20.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn rk4_zero_dynamics_and_rotation() {
        let spec = LibrarySpec::default();
        let z = integrate_latent(&DMatrix::zeros(2, 3), &[0.3, -0.4], 0.1, 5, &spec).unwrap();
        for n in 0..=5 {
            assert_eq!(z.row(n).iter().copied().collect::<Vec<_>>(), vec![0.3, -0.4]);
        }
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let lin = LibrarySpec { include_constant: false, poly_degree: 1 };
        let z = integrate_latent(&rot, &[1.0, 0.0], 1e-2, 100, &lin).unwrap();
        assert!((z[(100, 0)] - 1f64.cos()).abs() < 1e-9);
        assert!((z[(100, 1)] + 1f64.sin()).abs() < 1e-9);
    }

    #[test]
    fn rk4_blowup_and_bad_input() {
        let spec = LibrarySpec { include_constant: false, poly_degree: 2 };
        let xi = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        // dz/dt = z^2 from 1 blows up at t = 1.
        let err = integrate_latent(&xi, &[1.0], 0.05, 400, &spec).unwrap_err();
        assert!(matches!(err, LasdiError::BlowUp { step } if step > 10));
        assert!(integrate_latent(&xi, &[f64::NAN], 0.1, 2, &spec).is_err());
        assert!(integrate_latent(&DMatrix::zeros(2, 2), &[1.0], 0.1, 2, &spec).is_err());
    }

    #[test]
    fn moments_two_point() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 4.0]);
        let b = DMatrix::from_row_slice(1, 2, &[3.0, 0.0]);
        let (m, v) = population_moments(&[a.clone(), b.clone()]);
        assert_eq!(m, DMatrix::from_row_slice(1, 2, &[2.0, 2.0]));
        assert_eq!(v, DMatrix::from_row_slice(1, 2, &[1.0, 4.0]));
    }

    #[test]
    fn error_metric() {
        let u = DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 1.0, 0.0]);
        assert_eq!(max_relative_error(&u, &u).unwrap(), 0.0);
        assert!((max_relative_error(&(&u * 1.1), &u).unwrap() - 0.1).abs() < 1e-15);
        // Row 0 off by (0, 1): 1/5; row 1 off by (1, 1): sqrt2/1.
        let p = DMatrix::from_row_slice(2, 2, &[3.0, 5.0, 2.0, 1.0]);
        let e = relative_errors(&p, &u).unwrap();
        assert!((e[0] - 0.2).abs() < 1e-15 && (e[1] - 2f64.sqrt()).abs() < 1e-15);
        assert!(max_relative_error(&p, &DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0])).is_err());
        assert!(max_relative_error(&p, &DMatrix::zeros(3, 2)).is_err());
    }

    fn pod_model(kind: InterpKind, xis: Vec<CoefficientMatrix>) -> RomModel {
        let pod = PodBasis {
            mean: DVector::zeros(3),
            basis: DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 0.0]),
            singular_values: vec![1.0],
        };
        let params = (0..xis.len()).map(|i| ParameterPoint::new(vec![i as f64]).unwrap()).collect();
        let cfg = InterpConfig { kind, k: 1, ..Default::default() };
        RomModel::new(Projection::Pod(pod), decay().1, params, xis, cfg, 0.01, 50).unwrap()
    }

    #[test]
    fn predict_uses_stored_coefficients_on_exact_hit() {
        let m = pod_model(InterpKind::Knn, vec![DMatrix::from_element(1, 1, -1.0), DMatrix::from_element(1, 1, -3.0)]);
        let u0 = DVector::from_column_slice(&[2.0, 5.0, 1.0]);
        let p = m.predict(&ParameterPoint::new(vec![1.0]).unwrap(), &u0).unwrap();
        let direct = integrate_latent(&m.xis[1], &[2.0], 0.01, 50, &m.library).unwrap();
        assert_eq!(p.latents[0], direct);
        assert_eq!(p.mean.ncols(), 3);
        assert_eq!(p.mean[(50, 1)], 0.0);
    }

    #[test]
    fn zero_dynamics_repeat_the_reconstruction() {
        let enc = Mlp::xavier(&[3, 4, 1], Activation::Tanh, 1).unwrap();
        let dec = Mlp::from_layers(
            vec![
                Dense { weight: DMatrix::from_element(2, 1, 0.5), bias: DVector::from_element(2, 0.1) },
                Dense { weight: DMatrix::from_element(3, 2, 1.0), bias: DVector::zeros(3) },
            ],
            Activation::Sigmoid,
        )
        .unwrap();
        let ae = Autoencoder::from_parts(enc, dec, None).unwrap();
        let params = vec![ParameterPoint::new(vec![0.0]).unwrap(), ParameterPoint::new(vec![1.0]).unwrap()];
        let xis = vec![DMatrix::zeros(1, 1); 2];
        let cfg = InterpConfig { kind: InterpKind::Rbf, ..Default::default() };
        let lin = LibrarySpec { include_constant: false, poly_degree: 1 };
        let m = RomModel::new(Projection::Autoencoder(ae.clone()), lin, params, xis, cfg, 0.1, 4).unwrap();
        let u0 = DVector::from_column_slice(&[0.2, -0.1, 0.4]);
        let p = m.predict(&ParameterPoint::new(vec![0.5]).unwrap(), &u0).unwrap();
        let u0m = DMatrix::from_column_slice(3, 1, u0.as_slice());
        let recon = ae.decode(&ae.encode(&u0m).unwrap()).unwrap();
        for n in 0..5 {
            assert_eq!(p.mean.row(n).transpose(), recon.column(0));
        }
    }

    #[test]
    fn uncertainty_cases() {
        // GP through identical coefficients: coefficient std at a training
        // point is at most sqrt(1e-8) * |y| = 1e-4, and |dz/dxi| = t e^{-t} <= 0.5
        // for t <= 0.5, so field spread and mean shift stay below 5e-5.
        let m = pod_model(InterpKind::Gp, vec![DMatrix::from_element(1, 1, -1.0); 3]);
        let u0 = DVector::from_column_slice(&[1.0, 0.0, 0.0]);
        let mu = ParameterPoint::new(vec![1.0]).unwrap();
        let p = m.predict_with_uncertainty(&mu, &u0, 8, 3).unwrap();
        let single = m.predict(&mu, &u0).unwrap();
        assert!((&p.mean - &single.mean).amax() < 5e-5);
        assert!(p.max_std() < 5e-5);

        let same = m.predict_with_uncertainty(&mu, &u0, 8, 3).unwrap();
        assert_eq!(same, m.predict_with_uncertainty(&mu, &u0, 8, 3).unwrap());
        assert!(m.predict_with_uncertainty(&mu, &u0, 1, 3).is_err());

        // Two hand-made draws.
        let draws = [DMatrix::from_element(1, 1, -1.0), DMatrix::from_element(1, 1, -2.0)];
        let p = m.predict_with_samples(&u0, &draws).unwrap();
        let a = m.rollout(&draws[0], &[1.0]).unwrap().1;
        let b = m.rollout(&draws[1], &[1.0]).unwrap().1;
        let mean = (&a + &b) / 2.0;
        let var = ((&a - &mean).component_mul(&(&a - &mean)) + (&b - &mean).component_mul(&(&b - &mean))) / 2.0;
        assert!((p.variance.unwrap() - var).amax() < 1e-15);

        let knn = pod_model(InterpKind::Knn, vec![DMatrix::from_element(1, 1, -1.0); 2]);
        assert!(knn.predict_with_uncertainty(&mu, &u0, 4, 0).is_err());
    }

    #[test]
    fn blowup_policy() {
        let m = pod_model(InterpKind::Knn, vec![DMatrix::from_element(1, 1, -1.0); 2]);
        let u0 = DVector::from_column_slice(&[1.0, 0.0, 0.0]);
        let good = DMatrix::from_element(1, 1, -1.0);
        let bad = DMatrix::from_element(1, 1, 1e6);
        let mut draws = vec![good.clone(); 4];
        draws[0] = bad.clone();
        let p = m.predict_with_samples(&u0, &draws).unwrap();
        assert_eq!(p.failed_draws, 1);
        assert_eq!(p.latents.len(), 3);
        draws[1] = bad;
        assert!(matches!(
            m.predict_with_samples(&u0, &draws),
            Err(LasdiError::SampleBlowUp { failed: 2, total: 4 })
        ));
    }
}
