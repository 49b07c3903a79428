//! Joint training loss over autoencoder weights and per-parameter
//! coefficient matrices, with hand-written reverse-mode gradients.

use nalgebra::DMatrix;

use crate::data::SnapshotSet;
use crate::dynamics::{
    build_library, build_test_functions, default_test_function_shape, finite_difference_adjoint,
    finite_difference_dz, library_backprop, CoefficientMatrix, LibrarySpec, TestFunctionBank,
};
use crate::error::{arg_err, shape_err, LasdiError, Result};
use crate::linalg::{gemm, matmul, Op};
use crate::projection::Autoencoder;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta1: 1.0,
            beta2: 0.1,
            beta3: 0.1,
            beta4: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let b = [self.beta1, self.beta2, self.beta3, self.beta4];
        if b.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return arg_err(format!("loss weights must be finite and nonnegative, got {b:?}"));
        }
        if b.iter().all(|v| *v == 0.0) {
            return arg_err("loss weights are all zero");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DynamicsMode {
    #[default]
    Strong,
    Weak,
}

impl DynamicsMode {
    pub fn name(self) -> &'static str {
        match self {
            DynamicsMode::Strong => "strong",
            DynamicsMode::Weak => "weak",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "strong" => Some(DynamicsMode::Strong),
            "weak" => Some(DynamicsMode::Weak),
            _ => None,
        }
    }
}

/// Where the strong-form latent derivative comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZdotSource {
    /// Finite differences of the encoded trajectory.
    #[default]
    FiniteDifference,
    /// Encoder Jacobian times finite-difference state velocities.
    ChainRule,
}

impl ZdotSource {
    pub fn name(self) -> &'static str {
        match self {
            ZdotSource::FiniteDifference => "fd",
            ZdotSource::ChainRule => "chain",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fd" => Some(ZdotSource::FiniteDifference),
            "chain" => Some(ZdotSource::ChainRule),
            _ => None,
        }
    }
}

/// Everything about the loss that is not a trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub mode: DynamicsMode,
    pub zdot: ZdotSource,
    pub library: LibrarySpec,
    /// Test functions for the weak mode; `None` uses the defaults for the
    /// trajectory length.
    pub bank: Option<TestFunctionBank>,
}

impl LossSettings {
    pub fn new(weights: LossWeights, mode: DynamicsMode, library: LibrarySpec) -> Self {
        Self {
            weights,
            mode,
            zdot: ZdotSource::default(),
            library,
            bank: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub ae: f64,
    pub dynamics: f64,
    pub velocity: f64,
    /// `||Xi||^2` summed over all parameters (unweighted).
    pub penalty: f64,
}

/// Autoencoder plus one coefficient matrix per training trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub ae: Autoencoder,
    pub xis: Vec<CoefficientMatrix>,
}

impl JointModel {
    pub fn n_params(&self) -> usize {
        self.ae.encoder.n_params() + self.ae.decoder.n_params() + self.xis.iter().map(|x| x.len()).sum::<usize>()
    }

    /// Encoder block, decoder block, then each coefficient matrix
    /// column-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.ae.encoder.to_flat();
        out.extend(self.ae.decoder.to_flat());
        for xi in &self.xis {
            out.extend_from_slice(xi.as_slice());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return shape_err(format!("expected {} parameters, got {}", self.n_params(), flat.len()));
        }
        let ne = self.ae.encoder.n_params();
        let nd = self.ae.decoder.n_params();
        self.ae.encoder.set_flat(&flat[..ne])?;
        self.ae.decoder.set_flat(&flat[ne..ne + nd])?;
        let mut off = ne + nd;
        for xi in &mut self.xis {
            let n = xi.len();
            xi.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Encoded trajectory of every snapshot, `(N_t + 1) x N_z` each.
    pub fn latent_trajectories(&self, set: &SnapshotSet) -> Result<Vec<DMatrix<f64>>> {
        set.trajectories()
            .iter()
            .map(|t| Ok(self.ae.encode(&t.states().transpose())?.transpose()))
            .collect()
    }
}

/// Per-trajectory scratch reused between the forward and reverse sweeps.
struct Pass {
    u: DMatrix<f64>,
    udot: Option<DMatrix<f64>>,
}

fn prepare(set: &SnapshotSet, need_udot: bool) -> Result<Vec<Pass>> {
    set.trajectories()
        .iter()
        .map(|t| {
            let u = t.states().transpose();
            let udot = if need_udot {
                Some(finite_difference_dz(t.states(), t.dt())?.transpose())
            } else {
                None
            };
            Ok(Pass { u, udot })
        })
        .collect()
}

/// Total loss and, optionally, its gradient in [`JointModel::to_flat`]
/// layout.
///
/// Per trajectory of `T` snapshots, with `N_mu` trajectories:
/// reconstruction and velocity terms are `||.||^2 / (N_mu T)`; the strong or
/// weak dynamics residual is `||.||^2 / (N_mu N_z)`; the penalty is the
/// squared Frobenius norm of every coefficient matrix.
pub fn loss_and_gradient(
    model: &JointModel,
    set: &SnapshotSet,
    settings: &LossSettings,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
    let LossWeights {
        beta1,
        beta2,
        beta3,
        beta4,
    } = settings.weights;
    let ae = &model.ae;
    let spec = &settings.library;
    spec.validate()?;
    if set.is_empty() {
        return arg_err("empty snapshot set");
    }
    if set.len() != model.xis.len() {
        return shape_err(format!("{} trajectories but {} coefficient matrices", set.len(), model.xis.len()));
    }
    if set.n_dofs() != ae.n_dofs() {
        return shape_err(format!("snapshots have {} dofs, autoencoder {}", set.n_dofs(), ae.n_dofs()));
    }
    let n_z = ae.latent_dim();
    let n_l = spec.n_terms(n_z);
    if model.xis.iter().any(|x| x.shape() != (n_z, n_l)) {
        return shape_err("coefficient matrices do not match the latent dimension and library");
    }

    let use_dyn = beta2 != 0.0;
    let use_vel = beta3 != 0.0;
    let chain = use_dyn && settings.mode == DynamicsMode::Strong && settings.zdot == ZdotSource::ChainRule;
    let dt = set.dt();
    let n_mu = set.len() as f64;

    let default_bank;
    let bank = match (settings.mode, &settings.bank) {
        (DynamicsMode::Weak, Some(b)) if use_dyn => Some(b),
        (DynamicsMode::Weak, None) if use_dyn => {
            let (n_k, m_t, p) = default_test_function_shape(set.n_steps());
            default_bank = build_test_functions(set.n_steps(), dt, n_k, m_t, p)?;
            Some(&default_bank)
        }
        _ => None,
    };
    if let Some(b) = bank {
        if b.n_times() != set.n_steps() + 1 {
            return shape_err(format!("test functions span {} times, trajectories {}", b.n_times(), set.n_steps() + 1));
        }
    }

    let passes = prepare(set, use_vel || chain)?;
    let mut out = LossBreakdown::default();
    let mut grad = want_grad.then(|| vec![0.0; model.n_params()]);
    let (ne, nd) = (ae.encoder.n_params(), ae.decoder.n_params());
    let mut xi_off = ne + nd;

    for (i, p) in passes.iter().enumerate() {
        let xi = &model.xis[i];
        let t_len = p.u.ncols() as f64;
        let w_ae = 1.0 / (n_mu * t_len);
        let w_dyn = 1.0 / (n_mu * n_z as f64);

        // Encoder.
        let x = ae.normalize(&p.u);
        let xdot = match (&p.udot, &ae.normalizer) {
            (Some(ud), Some(nrm)) if chain => Some(nrm.scale_rows(ud, true)),
            (Some(ud), None) if chain => Some(ud.clone()),
            _ => None,
        };
        let etrace = ae.encoder.forward_trace(&x, xdot.as_ref())?;
        let zt = etrace.output();
        let z = zt.transpose();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(LasdiError::NonFinite("latent trajectory".into()));
        }

        let theta = if use_dyn || use_vel { Some(build_library(&z, spec)?) } else { None };
        // Predicted latent velocity Theta Xi^T, T x N_z.
        let s = theta.as_ref().map(|th| matmul(th, Op::N, xi, Op::T));

        // Decoder, with the predicted latent velocity as tangent.
        let st = s.as_ref().filter(|_| use_vel).map(|s| s.transpose());
        let dtrace = ae.decoder.forward_trace(zt, st.as_ref())?;
        let mut g_y = DMatrix::zeros(0, 0);
        if beta1 != 0.0 || want_grad {
            let y = dtrace.output();
            let uhat = match &ae.normalizer {
                Some(n) => n.inverse(y),
                None => y.clone(),
            };
            let diff = uhat - &p.u;
            out.ae += w_ae * diff.norm_squared();
            if want_grad {
                let d = match &ae.normalizer {
                    Some(n) => n.scale_rows(&diff, false),
                    None => diff,
                };
                g_y = d * (2.0 * w_ae * beta1);
            }
        }

        let mut g_vtan = None;
        if use_vel {
            let vt = dtrace.tangent_output().expect("velocity tangent traced");
            let vhat = match &ae.normalizer {
                Some(n) => n.scale_rows(vt, false),
                None => vt.clone(),
            };
            let diff = vhat - p.udot.as_ref().expect("state velocities prepared");
            out.velocity += w_ae * diff.norm_squared();
            if want_grad {
                let d = match &ae.normalizer {
                    Some(n) => n.scale_rows(&diff, false),
                    None => diff,
                };
                g_vtan = Some(d * (2.0 * w_ae * beta3));
            }
        }

        // Dynamics residual and its adjoints.
        let mut g_z = DMatrix::<f64>::zeros(z.nrows(), n_z);
        let mut g_theta = theta.as_ref().map(|th| DMatrix::<f64>::zeros(th.nrows(), th.ncols()));
        let mut g_xi = DMatrix::<f64>::zeros(n_z, n_l);
        let mut g_enc_tan = None;
        if use_dyn {
            let theta = theta.as_ref().expect("library built");
            let s = s.as_ref().expect("prediction built");
            match bank {
                None => {
                    let zdot = if chain {
                        etrace.tangent_output().expect("chain tangent traced").transpose()
                    } else {
                        finite_difference_dz(&z, dt)?
                    };
                    let r = zdot - s;
                    out.dynamics += w_dyn * r.norm_squared();
                    if want_grad {
                        let g_r = r * (2.0 * w_dyn * beta2);
                        // r = zdot - Theta Xi^T.
                        gemm(-1.0, &g_r, Op::T, theta, Op::N, 1.0, &mut g_xi);
                        gemm(-1.0, &g_r, Op::N, xi, Op::N, 1.0, g_theta.as_mut().expect("allocated"));
                        if chain {
                            g_enc_tan = Some(g_r.transpose());
                        } else {
                            g_z += finite_difference_adjoint(&g_r, dt);
                        }
                    }
                }
                Some(b) => {
                    // r = Phi Theta Xi^T + Phidot Z.
                    let g_mat = matmul(&b.phi, Op::N, theta, Op::N);
                    let mut r = matmul(&g_mat, Op::N, xi, Op::T);
                    gemm(1.0, &b.dphi, Op::N, &z, Op::N, 1.0, &mut r);
                    out.dynamics += w_dyn * r.norm_squared();
                    if want_grad {
                        let g_r = r * (2.0 * w_dyn * beta2);
                        gemm(1.0, &g_r, Op::T, &g_mat, Op::N, 1.0, &mut g_xi);
                        let phit_gr = matmul(&b.phi, Op::T, &g_r, Op::N);
                        gemm(1.0, &phit_gr, Op::N, xi, Op::N, 1.0, g_theta.as_mut().expect("allocated"));
                        gemm(1.0, &b.dphi, Op::T, &g_r, Op::N, 1.0, &mut g_z);
                    }
                }
            }
        }

        let pen = xi.norm_squared();
        out.penalty += pen;

        let Some(grad) = grad.as_mut() else { continue };
        let (gdec, g_zt_dec, g_st) = ae.decoder.backward(&dtrace, &g_y, g_vtan.as_ref())?;
        if let Some(g_st) = g_st {
            // Decoder tangent input is (Theta Xi^T)^T.
            let theta = theta.as_ref().expect("library built");
            gemm(1.0, &g_st, Op::N, theta, Op::N, 1.0, &mut g_xi);
            gemm(1.0, &g_st, Op::T, xi, Op::N, 1.0, g_theta.as_mut().expect("allocated"));
        }
        if let Some(gt) = &g_theta {
            g_z += library_backprop(&z, gt, spec);
        }
        let g_zt = g_zt_dec + g_z.transpose();
        let (genc, _, _) = ae.encoder.backward(&etrace, &g_zt, g_enc_tan.as_ref())?;

        for (g, v) in grad[..ne].iter_mut().zip(genc.to_flat()) {
            *g += v;
        }
        for (g, v) in grad[ne..ne + nd].iter_mut().zip(gdec.to_flat()) {
            *g += v;
        }
        g_xi += xi * (2.0 * beta4);
        for (g, v) in grad[xi_off..xi_off + xi.len()].iter_mut().zip(g_xi.iter()) {
            *g += v;
        }
        xi_off += xi.len();
    }

    out.total = beta1 * out.ae + beta2 * out.dynamics + beta3 * out.velocity + beta4 * out.penalty;
    if !out.total.is_finite() {
        return Err(LasdiError::NonFinite("training loss".into()));
    }
    if let Some(g) = &grad {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(LasdiError::NonFinite("loss gradient".into()));
        }
    }
    Ok((out, grad))
}

pub fn total_loss(model: &JointModel, set: &SnapshotSet, settings: &LossSettings) -> Result<LossBreakdown> {
    Ok(loss_and_gradient(model, set, settings, false)?.0)
}

/// Result of comparing analytic and central finite-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub indices: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
}

/// Relative error floor for gradient checks, as a multiple of
/// `max(1, |loss|)`. Coordinates whose gradient is smaller than this are
/// compared against the floor instead of their own magnitude.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Central differences with step `h` at the given flat coordinates.
pub fn gradient_check(
    model: &JointModel,
    set: &SnapshotSet,
    settings: &LossSettings,
    indices: &[usize],
    h: f64,
) -> Result<GradientCheck> {
    let (base, grad) = loss_and_gradient(model, set, settings, true)?;
    let grad = grad.expect("gradient requested");
    let flat = model.to_flat();
    let mut work = model.clone();
    let floor = GRAD_CHECK_FLOOR * base.total.abs().max(1.0);
    let mut numeric = Vec::with_capacity(indices.len());
    let mut analytic = Vec::with_capacity(indices.len());
    let mut max_rel: f64 = 0.0;
    for &k in indices {
        if k >= flat.len() {
            return arg_err(format!("coordinate {k} out of range ({} parameters)", flat.len()));
        }
        let mut p = flat.clone();
        p[k] = flat[k] + h;
        work.set_flat(&p)?;
        let lp = total_loss(&work, set, settings)?.total;
        p[k] = flat[k] - h;
        work.set_flat(&p)?;
        let lm = total_loss(&work, set, settings)?.total;
        let f = (lp - lm) / (2.0 * h);
        let a = grad[k];
        max_rel = max_rel.max((a - f).abs() / a.abs().max(f.abs()).max(floor));
        numeric.push(f);
        analytic.push(a);
    }
    Ok(GradientCheck {
        indices: indices.to_vec(),
        analytic,
        numeric,
        max_rel_error: max_rel,
    })
}
