//! Full-order models: the inviscid 1D Burgers benchmark and the residual
//! interface that residual-driven sampling relies on.

use nalgebra::{DMatrix, DVector};

use crate::data::{ParameterPoint, SnapshotSet, Trajectory};
use crate::error::{arg_err, shape_err, LasdiError, Result};

/// A high-fidelity solver that can produce trajectories and evaluate its own
/// discretized one-step residual.
pub trait FullOrderModel {
    fn initial_condition(&self, mu: &ParameterPoint) -> Result<DVector<f64>>;

    fn solve(&self, mu: &ParameterPoint) -> Result<Trajectory>;

    /// `||r(u_n, u_prev | mu)||_2` for one time step.
    fn residual_norm(&self, u_n: &[f64], u_prev: &[f64], mu: &ParameterPoint) -> Result<f64>;

    fn n_dofs(&self) -> usize;

    fn n_steps(&self) -> usize;

    fn dt(&self) -> f64;

    /// Solves every point and stacks the results.
    fn solve_all(&self, points: &[ParameterPoint]) -> Result<SnapshotSet> {
        let trajs = points.iter().map(|p| self.solve(p)).collect::<Result<Vec<_>>>()?;
        SnapshotSet::new(trajs)
    }
}

/// Time step indices sampled for the averaged residual: `n_samples`
/// uniformly spaced indices in `[1, n_steps]`, always ending at `n_steps`.
pub fn residual_sample_indices(n_steps: usize, n_samples: usize) -> Result<Vec<usize>> {
    if n_samples == 0 || n_samples > n_steps {
        return arg_err(format!("n_samples must lie in [1, {n_steps}], got {n_samples}"));
    }
    Ok((1..=n_samples).map(|k| (k * n_steps).div_ceil(n_samples)).collect())
}

/// Mean one-step residual norm over uniformly spaced time indices.
pub fn time_averaged_residual<M: FullOrderModel + ?Sized>(
    model: &M,
    states: &DMatrix<f64>,
    mu: &ParameterPoint,
    n_samples: usize,
) -> Result<f64> {
    if states.nrows() < 2 {
        return shape_err("need at least two time slices");
    }
    let n_steps = states.nrows() - 1;
    let idx = residual_sample_indices(n_steps, n_samples)?;
    let mut total = 0.0;
    for &n in &idx {
        let cur: Vec<f64> = states.row(n).iter().copied().collect();
        let prev: Vec<f64> = states.row(n - 1).iter().copied().collect();
        total += model.residual_norm(&cur, &prev, mu)?;
    }
    Ok(total / idx.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BurgersConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub dt: f64,
    pub t_max: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for BurgersConfig {
    /// The 1001-point, `dt = 1e-3` benchmark resolution.
    fn default() -> Self {
        Self {
            x_min: -3.0,
            x_max: 3.0,
            n_x: 1001,
            dt: 1e-3,
            t_max: 1.0,
            newton_tol: 1e-9,
            newton_max_iter: 25,
        }
    }
}

impl BurgersConfig {
    /// Reduced resolution used for desktop-scale experiments.
    pub fn desk() -> Self {
        Self {
            n_x: 201,
            dt: 5e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_min.is_finite() && self.x_max.is_finite() && self.x_min < self.x_max) {
            return arg_err(format!("invalid domain [{}, {}]", self.x_min, self.x_max));
        }
        if self.n_x < 3 {
            return arg_err(format!("n_x must be >= 3, got {}", self.n_x));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return arg_err(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return arg_err(format!("t_max must be positive, got {}", self.t_max));
        }
        if !(self.newton_tol > 0.0) {
            return arg_err(format!("newton_tol must be positive, got {}", self.newton_tol));
        }
        if self.newton_max_iter == 0 {
            return arg_err("newton_max_iter must be >= 1");
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_x - 1) as f64
    }

    pub fn x_grid(&self) -> Vec<f64> {
        let dx = self.dx();
        (0..self.n_x)
            .map(|j| if j == self.n_x - 1 { self.x_max } else { self.x_min + j as f64 * dx })
            .collect()
    }

    /// `round(t_max / dt)`, at least one.
    pub fn n_steps(&self) -> usize {
        ((self.t_max / self.dt).round() as usize).max(1)
    }
}

/// `u_0(x) = a exp(-x^2 / (2 w^2))` with `mu = {a, w}`.
pub fn burgers_initial_condition(mu: &ParameterPoint, x_grid: &[f64]) -> Result<DVector<f64>> {
    let [a, w] = mu.values() else {
        return arg_err(format!("Burgers expects mu = {{a, w}}, got {:?}", mu.values()));
    };
    if *w == 0.0 {
        return arg_err("Gaussian width w must be nonzero");
    }
    let two_w2 = 2.0 * w * w;
    Ok(DVector::from_iterator(
        x_grid.len(),
        x_grid.iter().map(|x| a * (-x * x / two_w2).exp()),
    ))
}

/// Backward-Euler, first-order upwind solver for `u_t + u u_x = 0` on a
/// periodic domain.
///
/// The grid includes both endpoints, which are the same physical point: the
/// `n_x - 1` interior-plus-left nodes form the periodic ring and the last
/// node is kept equal to the first.
#[derive(Debug, Clone)]
pub struct Burgers {
    cfg: BurgersConfig,
    x: Vec<f64>,
}

impl Burgers {
    pub fn new(cfg: BurgersConfig) -> Result<Self> {
        cfg.validate()?;
        let x = cfg.x_grid();
        Ok(Self { cfg, x })
    }

    pub fn config(&self) -> &BurgersConfig {
        &self.cfg
    }

    pub fn x_grid(&self) -> &[f64] {
        &self.x
    }

    /// Upwind neighbour on the periodic ring. Node `n_x - 1` duplicates node
    /// 0, so node 0 wraps to `n_x - 2`.
    fn left(&self, j: usize) -> usize {
        if j == 0 {
            self.cfg.n_x - 2
        } else {
            j - 1
        }
    }

    /// Full residual vector over all `n_x` nodes for step size `dt`.
    fn residual_vec(&self, u: &[f64], prev: &[f64], dt: f64, out: &mut [f64]) {
        let c = dt / self.cfg.dx();
        for j in 0..u.len() {
            let l = self.left(j);
            out[j] = u[j] - prev[j] + c * u[j] * (u[j] - u[l]);
        }
    }

    /// Residual norm with an explicit step size (used for refined grids).
    pub fn residual_with_dt(&self, u_n: &[f64], u_prev: &[f64], dt: f64) -> Result<f64> {
        if u_n.len() != self.cfg.n_x || u_prev.len() != self.cfg.n_x {
            return shape_err(format!(
                "residual expects {} dofs, got {} and {}",
                self.cfg.n_x,
                u_n.len(),
                u_prev.len()
            ));
        }
        let mut r = vec![0.0; u_n.len()];
        self.residual_vec(u_n, u_prev, dt, &mut r);
        Ok(norm(&r))
    }

    /// Advances a state by one implicit step.
    fn step(&self, prev: &[f64], step_index: usize) -> Result<Vec<f64>> {
        let n = self.cfg.n_x;
        let ring = n - 1;
        let c = self.cfg.dt / self.cfg.dx();
        let mut u = prev.to_vec();
        u[n - 1] = u[0];
        let mut r = vec![0.0; n];
        let mut diag = vec![0.0; ring];
        let mut sub = vec![0.0; ring];
        let mut res_norm = f64::INFINITY;
        for iter in 0..=self.cfg.newton_max_iter {
            self.residual_vec(&u, prev, self.cfg.dt, &mut r);
            res_norm = norm(&r);
            if !res_norm.is_finite() {
                break;
            }
            if res_norm <= self.cfg.newton_tol {
                return Ok(u);
            }
            if iter == self.cfg.newton_max_iter {
                break;
            }
            for j in 0..ring {
                let l = self.left(j);
                diag[j] = 1.0 + c * (2.0 * u[j] - u[l]);
                sub[j] = -c * u[j];
            }
            let delta = solve_cyclic_bidiagonal(&diag, &sub, &r[..ring])?;
            for j in 0..ring {
                u[j] -= delta[j];
            }
            u[n - 1] = u[0];
        }
        Err(LasdiError::NewtonDivergence {
            step: step_index,
            residual: res_norm,
            iterations: self.cfg.newton_max_iter,
        })
    }

    /// Integrates from an arbitrary initial state.
    pub fn solve_from(&self, u0: &DVector<f64>, mu: &ParameterPoint) -> Result<Trajectory> {
        if u0.len() != self.cfg.n_x {
            return shape_err(format!("initial state has {} dofs, grid has {}", u0.len(), self.cfg.n_x));
        }
        let n_steps = self.cfg.n_steps();
        let mut states = DMatrix::zeros(n_steps + 1, self.cfg.n_x);
        states.row_mut(0).copy_from(&u0.transpose());
        let mut cur: Vec<f64> = u0.iter().copied().collect();
        for s in 1..=n_steps {
            cur = self.step(&cur, s)?;
            for (j, v) in cur.iter().enumerate() {
                states[(s, j)] = *v;
            }
        }
        Trajectory::new(states, self.cfg.dt, mu.clone())
    }
}

impl FullOrderModel for Burgers {
    fn initial_condition(&self, mu: &ParameterPoint) -> Result<DVector<f64>> {
        burgers_initial_condition(mu, &self.x)
    }

    fn solve(&self, mu: &ParameterPoint) -> Result<Trajectory> {
        let u0 = self.initial_condition(mu)?;
        self.solve_from(&u0, mu)
    }

    fn residual_norm(&self, u_n: &[f64], u_prev: &[f64], _mu: &ParameterPoint) -> Result<f64> {
        self.residual_with_dt(u_n, u_prev, self.cfg.dt)
    }

    fn n_dofs(&self) -> usize {
        self.cfg.n_x
    }

    fn n_steps(&self) -> usize {
        self.cfg.n_steps()
    }

    fn dt(&self) -> f64 {
        self.cfg.dt
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solves `diag[j] x[j] + sub[j] x[j-1] = rhs[j]` with `x[-1] := x[m-1]`.
///
/// Each unknown is written as `alpha + beta * x[m-1]` in a forward sweep;
/// the last equation then closes the loop.
pub(crate) fn solve_cyclic_bidiagonal(diag: &[f64], sub: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let m = diag.len();
    let mut alpha = vec![0.0; m];
    let mut beta = vec![0.0; m];
    for j in 0..m {
        if diag[j] == 0.0 {
            return Err(LasdiError::Singular(format!("zero pivot at node {j}")));
        }
        let (pa, pb) = if j == 0 { (0.0, 1.0) } else { (alpha[j - 1], beta[j - 1]) };
        alpha[j] = (rhs[j] - sub[j] * pa) / diag[j];
        beta[j] = -sub[j] * pb / diag[j];
    }
    let denom = 1.0 - beta[m - 1];
    if denom == 0.0 || !denom.is_finite() {
        return Err(LasdiError::Singular("cyclic closure".into()));
    }
    let last = alpha[m - 1] / denom;
    Ok((0..m).map(|j| alpha[j] + beta[j] * last).collect())
}
