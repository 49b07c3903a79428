//! Fully connected networks with forward-mode tangents and reverse-mode
//! gradients through both the primal and the tangent pass, plus Adam.
//!
//! Batches are stored column-wise: an input batch is `n_in x B`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, shape_err, LasdiError, Result};
use crate::linalg::{gemm, gemm_out, matmul, Op};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Softplus,
    Relu,
    Tanh,
}

impl Activation {
    pub const ALL: [Activation; 4] = [Activation::Sigmoid, Activation::Softplus, Activation::Relu, Activation::Tanh];

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    #[inline]
    pub fn second_derivative(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            Activation::Softplus => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Relu => 0.0,
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Softplus => "softplus",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    pub(crate) fn tag(self) -> u64 {
        match self {
            Activation::Sigmoid => 0,
            Activation::Softplus => 1,
            Activation::Relu => 2,
            Activation::Tanh => 3,
        }
    }

    pub(crate) fn from_tag(tag: u64) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.tag() == tag)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One affine layer: `weight` is `n_out x n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// A multilayer perceptron whose hidden layers share one activation and whose
/// output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    activation: Activation,
    layers: Vec<Dense>,
}

/// Intermediate values kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Layer inputs: `inputs[l]` feeds layer `l`; the last entry is the output.
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    tan_inputs: Option<Vec<DMatrix<f64>>>,
    tan_pre: Option<Vec<DMatrix<f64>>>,
}

impl Trace {
    pub fn output(&self) -> &DMatrix<f64> {
        self.inputs.last().expect("trace has an output")
    }

    pub fn tangent_output(&self) -> Option<&DMatrix<f64>> {
        self.tan_inputs.as_ref().map(|t| t.last().expect("trace has an output"))
    }
}

impl Mlp {
    /// Xavier-uniform weights and zero biases. Each layer draws from its own
    /// ChaCha stream of the seed so layer shapes do not perturb each other.
    pub fn xavier(sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (n_in, n_out) = (w[0], w[1]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(l as u64);
                let limit = (6.0 / (n_in + n_out) as f64).sqrt();
                let weight = DMatrix::from_fn(n_out, n_in, |_, _| rng.random_range(-limit..=limit));
                Dense {
                    weight,
                    bias: DVector::zeros(n_out),
                }
            })
            .collect();
        Ok(Self { activation, layers })
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                weight: DMatrix::zeros(w[1], w[0]),
                bias: DVector::zeros(w[1]),
            })
            .collect();
        Ok(Self { activation, layers })
    }

    pub fn from_layers(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return arg_err("network needs at least one layer");
        }
        for (l, d) in layers.iter().enumerate() {
            if d.bias.len() != d.weight.nrows() {
                return shape_err(format!("layer {l}: bias length {} vs {} outputs", d.bias.len(), d.weight.nrows()));
            }
            if l > 0 && layers[l - 1].weight.nrows() != d.weight.ncols() {
                return shape_err(format!("layer {l} input {} does not match previous output", d.weight.ncols()));
            }
        }
        Ok(Self { activation, layers })
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].weight.ncols())
            .chain(self.layers.iter().map(|d| d.weight.nrows()))
            .collect()
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().expect("nonempty").weight.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|d| d.weight.len() + d.bias.len()).sum()
    }

    /// Parameters as one vector: per layer, the column-major weight block
    /// followed by the bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for d in &self.layers {
            out.extend_from_slice(d.weight.as_slice());
            out.extend_from_slice(d.bias.as_slice());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return shape_err(format!("expected {} parameters, got {}", self.n_params(), flat.len()));
        }
        let mut off = 0;
        for d in &mut self.layers {
            let nw = d.weight.len();
            d.weight.as_mut_slice().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = d.bias.len();
            d.bias.as_mut_slice().copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.n_in() {
            return shape_err(format!("network expects {} inputs, got {}", self.n_in(), x.nrows()));
        }
        Ok(())
    }

    /// Batched forward pass.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (l, d) in self.layers.iter().enumerate() {
            let mut a = affine(d, &h);
            if l < last {
                let act = self.activation;
                a.apply(|v| *v = act.apply(*v));
            }
            h = a;
        }
        Ok(h)
    }

    /// `forward(x)` transposed: row `n` of the result is the output for
    /// column `n` of `x`. The last layer writes straight into that layout.
    pub fn forward_transposed(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let (hidden, last) = self.layers.split_at(self.layers.len() - 1);
        let act = self.activation;
        let mut h = x.clone();
        for d in hidden {
            h = affine(d, &h);
            h.apply(|v| *v = act.apply(*v));
        }
        let d = &last[0];
        let mut out = DMatrix::from_fn(h.ncols(), d.weight.nrows(), |_, i| d.bias[i]);
        gemm_out(1.0, &d.weight, Op::N, &h, Op::N, 1.0, &mut out, Op::T);
        Ok(out)
    }

    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = DMatrix::from_column_slice(x.len(), 1, x);
        Ok(self.forward(&m)?.as_slice().to_vec())
    }

    /// Forward pass recording everything the backward pass needs. When a
    /// tangent batch is supplied, the Jacobian-vector product `J(x) v` is
    /// propagated alongside.
    pub fn forward_trace(&self, x: &DMatrix<f64>, tangent: Option<&DMatrix<f64>>) -> Result<Trace> {
        self.check_input(x)?;
        if let Some(t) = tangent {
            if t.shape() != x.shape() {
                return shape_err(format!("tangent shape {:?} vs input {:?}", t.shape(), x.shape()));
            }
        }
        let last = self.layers.len() - 1;
        let act = self.activation;
        let mut inputs = vec![x.clone()];
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut tan_inputs = tangent.map(|t| vec![t.clone()]);
        let mut tan_pre = tangent.map(|_| Vec::with_capacity(self.layers.len()));

        for (l, d) in self.layers.iter().enumerate() {
            let a = affine(d, &inputs[l]);
            let ta = tan_inputs.as_ref().map(|ti| matmul(&d.weight, Op::N, &ti[l], Op::N));
            if l < last {
                inputs.push(a.map(|v| act.apply(v)));
                if let (Some(ta), Some(ti)) = (&ta, tan_inputs.as_mut()) {
                    ti.push(a.zip_map(ta, |av, tv| act.derivative(av) * tv));
                }
            } else {
                inputs.push(a.clone());
                if let (Some(ta), Some(ti)) = (&ta, tan_inputs.as_mut()) {
                    ti.push(ta.clone());
                }
            }
            pre.push(a);
            if let (Some(ta), Some(tp)) = (ta, tan_pre.as_mut()) {
                tp.push(ta);
            }
        }
        Ok(Trace {
            inputs,
            pre,
            tan_inputs,
            tan_pre,
        })
    }

    /// Reverse pass. `g_out` is the adjoint of the output; `g_tan_out` the
    /// adjoint of the output tangent (requires a traced tangent). Returns
    /// parameter gradients plus adjoints of the input and input tangent.
    pub fn backward(
        &self,
        trace: &Trace,
        g_out: &DMatrix<f64>,
        g_tan_out: Option<&DMatrix<f64>>,
    ) -> Result<(Mlp, DMatrix<f64>, Option<DMatrix<f64>>)> {
        if g_out.shape() != trace.output().shape() {
            return shape_err("output adjoint shape does not match trace");
        }
        let tangent_path = match (g_tan_out, &trace.tan_inputs, &trace.tan_pre) {
            (Some(g), Some(ti), Some(tp)) => {
                if g.shape() != trace.output().shape() {
                    return shape_err("tangent adjoint shape does not match trace");
                }
                Some((g.clone(), ti, tp))
            }
            (Some(_), _, _) => return arg_err("tangent adjoint supplied but trace has no tangent"),
            _ => None,
        };

        let act = self.activation;
        let last = self.layers.len() - 1;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut gh = g_out.clone();
        let mut gt = tangent_path.as_ref().map(|(g, _, _)| g.clone());

        for l in (0..self.layers.len()).rev() {
            let d = &self.layers[l];
            let a = &trace.pre[l];
            // Adjoints of the pre-activation value and tangent.
            let (ga, gta) = if l < last {
                match (&gt, &tangent_path) {
                    (Some(gt), Some((_, _, tp))) => {
                        let ta = &tp[l];
                        let mut ga = DMatrix::zeros(a.nrows(), a.ncols());
                        let mut gta = DMatrix::zeros(a.nrows(), a.ncols());
                        for i in 0..a.len() {
                            let av = a[i];
                            let d1 = act.derivative(av);
                            ga[i] = gh[i] * d1 + gt[i] * act.second_derivative(av) * ta[i];
                            gta[i] = gt[i] * d1;
                        }
                        (ga, Some(gta))
                    }
                    _ => (gh.zip_map(a, |g, av| g * act.derivative(av)), None),
                }
            } else {
                (gh.clone(), gt.clone())
            };

            let h_in = &trace.inputs[l];
            let mut gw = matmul(&ga, Op::N, h_in, Op::T);
            if let (Some(gta), Some((_, ti, _))) = (&gta, &tangent_path) {
                gemm(1.0, gta, Op::N, &ti[l], Op::T, 1.0, &mut gw);
            }
            let gb = DVector::from_iterator(ga.nrows(), ga.row_iter().map(|r| r.sum()));
            grads.push(Dense { weight: gw, bias: gb });

            gh = matmul(&d.weight, Op::T, &ga, Op::N);
            gt = gta.map(|g| matmul(&d.weight, Op::T, &g, Op::N));
        }
        grads.reverse();
        Ok((
            Mlp {
                activation: self.activation,
                layers: grads,
            },
            gh,
            gt,
        ))
    }

    /// Jacobian-vector product `J(x) v` for a batch of points and directions,
    /// without forming the Jacobian.
    pub fn jvp(&self, x: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let trace = self.forward_trace(x, Some(v))?;
        Ok(trace.tangent_output().expect("tangent traced").clone())
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return arg_err(format!("need at least input and output sizes, got {sizes:?}"));
    }
    if sizes.contains(&0) {
        return arg_err(format!("layer sizes must be positive: {sizes:?}"));
    }
    Ok(())
}

fn affine(d: &Dense, h: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(d.weight.nrows(), h.ncols());
    for mut col in a.column_iter_mut() {
        col.copy_from(&d.bias);
    }
    gemm(1.0, &d.weight, Op::N, h, Op::N, 1.0, &mut a);
    a
}

/// Adam optimizer state over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self::with_moments(n, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_moments(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Grows the state with zeroed moments for newly appended parameters.
    pub fn extend(&mut self, extra: usize) {
        self.m.resize(self.m.len() + extra, 0.0);
        self.v.resize(self.v.len() + extra, 0.0);
    }

    /// One bias-corrected Adam update in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return shape_err(format!(
                "Adam state has {} entries, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(LasdiError::NonFinite("gradient".into()));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
