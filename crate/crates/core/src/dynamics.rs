//! Latent dynamics identification.
//!
//! The latent trajectory `Z` of one parameter point is a `(N_t + 1) x N_z`
//! matrix. Its dynamics are modelled as `dZ/dt = Theta(Z) Xi^T`, where the
//! library `Theta(Z)` evaluates polynomial candidate terms row by row and
//! `Xi` is an `N_z x N_l` coefficient matrix.
//!
//! Two identification routes are provided:
//!
//! * strong form: regress finite-difference derivatives onto the library;
//! * weak form: integrate against compactly supported test functions so no
//!   pointwise derivative of the data is ever taken.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::data::ParameterPoint;
use crate::error::{arg_err, shape_err, Result};
use crate::linalg::{least_squares, matmul, Op};

/// `N_z x N_l` coefficients of one latent ODE system.
pub type CoefficientMatrix = DMatrix<f64>;

/// Polynomial candidate library.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LibrarySpec {
    pub include_constant: bool,
    /// 1 for linear terms, 2 to add every `z_a z_b` with `a <= b`.
    pub poly_degree: u8,
}

impl Default for LibrarySpec {
    fn default() -> Self {
        Self {
            include_constant: true,
            poly_degree: 1,
        }
    }
}

impl LibrarySpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.poly_degree) {
            return arg_err(format!("unsupported polynomial degree {}", self.poly_degree));
        }
        Ok(())
    }

    /// `N_l` for a latent dimension of `n_z`.
    pub fn n_terms(&self, n_z: usize) -> usize {
        let quad = if self.poly_degree >= 2 { n_z * (n_z + 1) / 2 } else { 0 };
        usize::from(self.include_constant) + n_z + quad
    }

    /// Column labels: `1`, `z1`, ..., `z1^2`, `z1*z2`, ...
    pub fn term_names(&self, n_z: usize) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_terms(n_z));
        if self.include_constant {
            names.push("1".to_string());
        }
        names.extend((1..=n_z).map(|i| format!("z{i}")));
        if self.poly_degree >= 2 {
            for a in 1..=n_z {
                for b in a..=n_z {
                    names.push(if a == b { format!("z{a}^2") } else { format!("z{a}*z{b}") });
                }
            }
        }
        names
    }

    /// Evaluates the library at one latent state.
    pub fn eval_row(&self, z: &[f64], out: &mut [f64]) {
        let mut k = 0;
        if self.include_constant {
            out[0] = 1.0;
            k = 1;
        }
        for &v in z {
            out[k] = v;
            k += 1;
        }
        if self.poly_degree >= 2 {
            for a in 0..z.len() {
                for b in a..z.len() {
                    out[k] = z[a] * z[b];
                    k += 1;
                }
            }
        }
    }

    /// Adds the pullback of a library-row adjoint `g` at state `z` into `gz`.
    pub(crate) fn backprop_row(&self, z: &[f64], g: &[f64], gz: &mut [f64]) {
        let mut k = usize::from(self.include_constant);
        for gza in gz.iter_mut() {
            *gza += g[k];
            k += 1;
        }
        if self.poly_degree >= 2 {
            for a in 0..z.len() {
                for b in a..z.len() {
                    gz[a] += g[k] * z[b];
                    gz[b] += g[k] * z[a];
                    k += 1;
                }
            }
        }
    }
}

/// `Theta(Z)`: one library row per time step.
pub fn build_library(z: &DMatrix<f64>, spec: &LibrarySpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(crate::LasdiError::NonFinite("latent trajectory".into()));
    }
    let n_l = spec.n_terms(z.ncols());
    let mut theta = DMatrix::zeros(z.nrows(), n_l);
    let mut zrow = vec![0.0; z.ncols()];
    let mut row = vec![0.0; n_l];
    for n in 0..z.nrows() {
        for (j, v) in zrow.iter_mut().enumerate() {
            *v = z[(n, j)];
        }
        spec.eval_row(&zrow, &mut row);
        for (q, v) in row.iter().enumerate() {
            theta[(n, q)] = *v;
        }
    }
    Ok(theta)
}

/// Pullback of a library adjoint `g_theta` (same shape as `Theta(Z)`) onto `Z`.
pub(crate) fn library_backprop(z: &DMatrix<f64>, g_theta: &DMatrix<f64>, spec: &LibrarySpec) -> DMatrix<f64> {
    let mut gz = DMatrix::zeros(z.nrows(), z.ncols());
    let mut zrow = vec![0.0; z.ncols()];
    let mut grow = vec![0.0; g_theta.ncols()];
    let mut gzrow = vec![0.0; z.ncols()];
    for n in 0..z.nrows() {
        for j in 0..z.ncols() {
            zrow[j] = z[(n, j)];
            gzrow[j] = 0.0;
        }
        for q in 0..g_theta.ncols() {
            grow[q] = g_theta[(n, q)];
        }
        spec.backprop_row(&zrow, &grow, &mut gzrow);
        for j in 0..z.ncols() {
            gz[(n, j)] = gzrow[j];
        }
    }
    gz
}

/// Second-order finite-difference time derivative of each column: central
/// differences inside, one-sided three-point stencils at both ends.
pub fn finite_difference_dz(z: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    let t = z.nrows();
    if t < 3 {
        return arg_err(format!("finite differences need N_t >= 2, got {}", t.saturating_sub(1)));
    }
    if !(dt > 0.0) {
        return arg_err(format!("dt must be positive, got {dt}"));
    }
    let h = 2.0 * dt;
    let mut out = DMatrix::zeros(t, z.ncols());
    for j in 0..z.ncols() {
        out[(0, j)] = (-3.0 * z[(0, j)] + 4.0 * z[(1, j)] - z[(2, j)]) / h;
        for n in 1..t - 1 {
            out[(n, j)] = (z[(n + 1, j)] - z[(n - 1, j)]) / h;
        }
        out[(t - 1, j)] = (3.0 * z[(t - 1, j)] - 4.0 * z[(t - 2, j)] + z[(t - 3, j)]) / h;
    }
    Ok(out)
}

/// Transpose of [`finite_difference_dz`] applied to an adjoint.
pub(crate) fn finite_difference_adjoint(g: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let t = g.nrows();
    let h = 2.0 * dt;
    let mut out = DMatrix::zeros(t, g.ncols());
    for j in 0..g.ncols() {
        let g0 = g[(0, j)] / h;
        out[(0, j)] += -3.0 * g0;
        out[(1, j)] += 4.0 * g0;
        out[(2, j)] -= g0;
        for n in 1..t - 1 {
            let gn = g[(n, j)] / h;
            out[(n + 1, j)] += gn;
            out[(n - 1, j)] -= gn;
        }
        let gl = g[(t - 1, j)] / h;
        out[(t - 1, j)] += 3.0 * gl;
        out[(t - 2, j)] -= 4.0 * gl;
        out[(t - 3, j)] += gl;
    }
    out
}

fn check_batch(zs: &[DMatrix<f64>], xis: &[CoefficientMatrix], spec: &LibrarySpec) -> Result<()> {
    if zs.is_empty() || zs.len() != xis.len() {
        return shape_err(format!("{} trajectories but {} coefficient matrices", zs.len(), xis.len()));
    }
    for (z, xi) in zs.iter().zip(xis) {
        if xi.shape() != (z.ncols(), spec.n_terms(z.ncols())) {
            return shape_err(format!(
                "coefficient matrix {:?} does not fit N_z = {} with {} terms",
                xi.shape(),
                z.ncols(),
                spec.n_terms(z.ncols())
            ));
        }
    }
    Ok(())
}

/// Mean over trajectories of the mean over latent dimensions of
/// `||dz_j/dt - Theta(Z) xi_j^T||^2`.
pub fn sindy_loss(
    zs: &[DMatrix<f64>],
    zdots: &[DMatrix<f64>],
    xis: &[CoefficientMatrix],
    spec: &LibrarySpec,
) -> Result<f64> {
    check_batch(zs, xis, spec)?;
    if zdots.len() != zs.len() {
        return shape_err("one derivative matrix per trajectory required");
    }
    let mut total = 0.0;
    for ((z, zd), xi) in zs.iter().zip(zdots).zip(xis) {
        if zd.shape() != z.shape() {
            return shape_err("derivative shape differs from trajectory shape");
        }
        let theta = build_library(z, spec)?;
        let pred = matmul(&theta, Op::N, xi, Op::T);
        total += (zd - pred).norm_squared() / z.ncols() as f64;
    }
    Ok(total / zs.len() as f64)
}

/// Per-latent-dimension least squares of `Zdot` onto `Theta(Z)` with optional
/// ridge weight.
pub fn strong_fit(z: &DMatrix<f64>, zdot: &DMatrix<f64>, spec: &LibrarySpec, ridge: f64) -> Result<CoefficientMatrix> {
    if z.shape() != zdot.shape() {
        return shape_err(format!("Z {:?} vs dZ/dt {:?}", z.shape(), zdot.shape()));
    }
    let theta = build_library(z, spec)?;
    if ridge == 0.0 && theta.nrows() < theta.ncols() {
        return shape_err(format!("{} samples cannot determine {} terms", theta.nrows(), theta.ncols()));
    }
    Ok(least_squares(&theta, zdot, ridge)?.transpose())
}

/// Compactly supported polynomial test functions on a uniform time grid.
///
/// Row `k` of `phi` holds `dt * phi_k(t_n)` and row `k` of `dphi` holds
/// `dt * phi_k'(t_n)`, where `phi_k(t) = (1 - s^2)^p` with
/// `s = (t - t_c) / (m_t dt)`, i.e. `c (t - t_a)^p (t_b - t)^p` scaled to a
/// unit peak.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunctionBank {
    pub phi: DMatrix<f64>,
    pub dphi: DMatrix<f64>,
    pub half_width: usize,
    pub order: u32,
    pub centers: Vec<usize>,
}

/// Default weak-form settings for a trajectory with `n_steps` steps:
/// `(N_k, m_t, p)`.
pub fn default_test_function_shape(n_steps: usize) -> (usize, usize, u32) {
    let t = n_steps + 1;
    let n_k = t.div_ceil(3);
    let m_t = (((0.1 * t as f64) - 1.0) / 2.0).round().max(1.0) as usize;
    let m_t = m_t.min(n_steps / 2).max(1);
    (n_k, m_t, 7)
}

pub fn build_test_functions(n_steps: usize, dt: f64, n_k: usize, half_width: usize, order: u32) -> Result<TestFunctionBank> {
    let t = n_steps + 1;
    if n_k == 0 {
        return arg_err("need at least one test function");
    }
    if order < 2 {
        return arg_err(format!("test function order must be >= 2, got {order}"));
    }
    if half_width == 0 || 2 * half_width + 1 > t {
        return arg_err(format!("support 2*{half_width}+1 does not fit {t} time points"));
    }
    if !(dt > 0.0) {
        return arg_err(format!("dt must be positive, got {dt}"));
    }
    let span = n_steps - 2 * half_width;
    let centers: Vec<usize> = (0..n_k)
        .map(|k| {
            if n_k == 1 {
                half_width + span / 2
            } else {
                half_width + ((k * span) as f64 / (n_k - 1) as f64).round() as usize
            }
        })
        .collect();
    let mut phi = DMatrix::zeros(n_k, t);
    let mut dphi = DMatrix::zeros(n_k, t);
    let m = half_width as f64;
    let p = order as i32;
    for (k, &c) in centers.iter().enumerate() {
        for n in c - half_width..=c + half_width {
            let s = (n as f64 - c as f64) / m;
            let base = 1.0 - s * s;
            phi[(k, n)] = dt * base.powi(p);
            // d/dt (1 - s^2)^p = p (1 - s^2)^(p-1) (-2 s) / (m dt); times dt.
            dphi[(k, n)] = p as f64 * base.powi(p - 1) * (-2.0 * s) / m;
        }
    }
    Ok(TestFunctionBank {
        phi,
        dphi,
        half_width,
        order,
        centers,
    })
}

impl TestFunctionBank {
    pub fn n_functions(&self) -> usize {
        self.phi.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.phi.ncols()
    }
}

/// `G = Phi Theta(Z)` and `b = -Phidot Z` (column `j` is `b_j`).
pub fn weak_system(z: &DMatrix<f64>, spec: &LibrarySpec, bank: &TestFunctionBank) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if z.nrows() != bank.n_times() {
        return shape_err(format!("trajectory has {} times, test functions {}", z.nrows(), bank.n_times()));
    }
    let theta = build_library(z, spec)?;
    let g = matmul(&bank.phi, Op::N, &theta, Op::N);
    let b = -matmul(&bank.dphi, Op::N, z, Op::N);
    Ok((g, b))
}

/// Least-squares solution of `G xi_j^T = b_j` for every column of `b`.
pub fn weak_fit(g: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<CoefficientMatrix> {
    if g.nrows() < g.ncols() {
        return shape_err(format!("{} test functions cannot determine {} terms", g.nrows(), g.ncols()));
    }
    Ok(least_squares(g, b, 0.0)?.transpose())
}

/// Convenience: weak-form identification straight from a latent trajectory.
pub fn weak_fit_trajectory(z: &DMatrix<f64>, spec: &LibrarySpec, bank: &TestFunctionBank) -> Result<CoefficientMatrix> {
    let (g, b) = weak_system(z, spec, bank)?;
    weak_fit(&g, &b)
}

/// Weak-form counterpart of [`sindy_loss`].
pub fn weak_sindy_loss(
    zs: &[DMatrix<f64>],
    xis: &[CoefficientMatrix],
    spec: &LibrarySpec,
    bank: &TestFunctionBank,
) -> Result<f64> {
    check_batch(zs, xis, spec)?;
    let mut total = 0.0;
    for (z, xi) in zs.iter().zip(xis) {
        let (g, b) = weak_system(z, spec, bank)?;
        let r = matmul(&g, Op::N, xi, Op::T) - b;
        total += r.norm_squared() / z.ncols() as f64;
    }
    Ok(total / zs.len() as f64)
}

/// Coefficient table: one row per (parameter, latent component), one
/// column per library term. Header `mu0,...,component,1,z1,...`.
pub fn xi_csv(params: &[ParameterPoint], xis: &[CoefficientMatrix], spec: &LibrarySpec) -> Result<String> {
    if params.len() != xis.len() {
        return shape_err(format!("{} parameters for {} coefficient matrices", params.len(), xis.len()));
    }
    let Some(first) = xis.first() else {
        return arg_err("no coefficient matrices");
    };
    let n_z = first.nrows();
    let names = spec.term_names(n_z);
    if let Some(bad) = xis.iter().find(|x| x.shape() != (n_z, names.len())) {
        return shape_err(format!("coefficient matrix {:?}, library expects {:?}", bad.shape(), (n_z, names.len())));
    }
    let dim = params[0].dim();
    let mut header: Vec<String> = (0..dim).map(|i| format!("mu{i}")).collect();
    header.push("component".into());
    header.extend(names);
    let mut out = header.join(",");
    out.push('\n');
    for (p, xi) in params.iter().zip(xis) {
        let mu: Vec<String> = p.values().iter().map(|v| v.to_string()).collect();
        for (j, row) in xi.row_iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{},{j},{}", mu.join(","), vals.join(","));
        }
    }
    Ok(out)
}
