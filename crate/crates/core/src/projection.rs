//! Maps between full-order states and latent coordinates.
//!
//! States are handled in batches laid out column-wise: a batch of `B`
//! snapshots of length `N_u` is an `N_u x B` matrix, so a trajectory's
//! `(N_t + 1) x N_u` state matrix enters transposed.

use nalgebra::{DMatrix, DVector};

use crate::data::SnapshotSet;
use crate::error::{arg_err, shape_err, LasdiError, Result};
use crate::nn::{Activation, Mlp};

/// Per-dof affine map `x = (u - shift) / scale` applied before encoding and
/// inverted after decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub shift: DVector<f64>,
    pub scale: DVector<f64>,
}

impl Normalizer {
    /// Per-dof mean and standard deviation over every snapshot. Dofs with a
    /// standard deviation below `1e-12` keep a unit scale.
    pub fn fit(set: &SnapshotSet) -> Result<Self> {
        let n_u = set.n_dofs();
        let mut sum = DVector::zeros(n_u);
        let mut count = 0usize;
        for traj in set.trajectories() {
            for row in traj.states().row_iter() {
                sum += row.transpose();
                count += 1;
            }
        }
        if count == 0 {
            return arg_err("cannot fit a normalizer to an empty snapshot set");
        }
        let mean = sum / count as f64;
        let mut var = DVector::zeros(n_u);
        for traj in set.trajectories() {
            for row in traj.states().row_iter() {
                let d = row.transpose() - &mean;
                var += d.component_mul(&d);
            }
        }
        let scale = (var / count as f64).map(|v| if v.sqrt() < 1e-12 { 1.0 } else { v.sqrt() });
        Ok(Self { shift: mean, scale })
    }

    pub fn identity(n_u: usize) -> Self {
        Self {
            shift: DVector::zeros(n_u),
            scale: DVector::from_element(n_u, 1.0),
        }
    }

    pub fn len(&self) -> usize {
        self.shift.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shift.is_empty()
    }

    pub fn forward(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = u.clone();
        for mut col in x.column_iter_mut() {
            for i in 0..col.len() {
                col[i] = (col[i] - self.shift[i]) / self.scale[i];
            }
        }
        x
    }

    pub fn inverse(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut u = x.clone();
        for mut col in u.column_iter_mut() {
            for i in 0..col.len() {
                col[i] = col[i] * self.scale[i] + self.shift[i];
            }
        }
        u
    }

    /// Scales a tangent (no shift).
    pub fn scale_rows(&self, v: &DMatrix<f64>, invert: bool) -> DMatrix<f64> {
        let mut out = v.clone();
        for mut col in out.column_iter_mut() {
            for i in 0..col.len() {
                col[i] = if invert { col[i] / self.scale[i] } else { col[i] * self.scale[i] };
            }
        }
        out
    }
}

/// Encoder/decoder pair with an optional input normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub normalizer: Option<Normalizer>,
}

impl Autoencoder {
    /// Builds an encoder with layer sizes `sizes` (e.g. `[N_u, 100, N_z]`)
    /// and the mirrored decoder, both Xavier-initialized from `seed`.
    pub fn new(sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let encoder = Mlp::xavier(sizes, activation, seed)?;
        let rev: Vec<usize> = sizes.iter().rev().copied().collect();
        let decoder = Mlp::xavier(&rev, activation, seed.wrapping_add(1))?;
        Ok(Self {
            encoder,
            decoder,
            normalizer: None,
        })
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp, normalizer: Option<Normalizer>) -> Result<Self> {
        if encoder.n_out() != decoder.n_in() || encoder.n_in() != decoder.n_out() {
            return shape_err(format!(
                "encoder {:?} and decoder {:?} do not compose",
                encoder.sizes(),
                decoder.sizes()
            ));
        }
        if let Some(n) = &normalizer {
            if n.len() != encoder.n_in() || n.scale.len() != n.len() {
                return shape_err("normalizer length differs from the state size");
            }
        }
        Ok(Self {
            encoder,
            decoder,
            normalizer,
        })
    }

    pub fn with_normalizer(mut self, normalizer: Normalizer) -> Result<Self> {
        if normalizer.len() != self.n_dofs() {
            return shape_err("normalizer length differs from the state size");
        }
        self.normalizer = Some(normalizer);
        Ok(self)
    }

    pub fn n_dofs(&self) -> usize {
        self.encoder.n_in()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.n_out()
    }

    pub(crate) fn normalize(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.normalizer {
            Some(n) => n.forward(u),
            None => u.clone(),
        }
    }

    pub fn encode(&self, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if u.nrows() != self.n_dofs() {
            return shape_err(format!("encoder expects {} dofs, got {}", self.n_dofs(), u.nrows()));
        }
        self.encoder.forward(&self.normalize(u))
    }

    pub fn decode(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let x = self.decoder.forward(z)?;
        Ok(match &self.normalizer {
            Some(n) => n.inverse(&x),
            None => x,
        })
    }

    /// Decodes latent states stored as rows into full states stored as rows.
    pub fn decode_trajectory(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut u = self.decoder.forward_transposed(&z.transpose())?;
        if let Some(n) = &self.normalizer {
            for (j, mut col) in u.column_iter_mut().enumerate() {
                let (s, c) = (n.scale[j], n.shift[j]);
                col.apply(|v| *v = *v * s + c);
            }
        }
        Ok(u)
    }

    /// `dz/dt = grad phi_e(u) . du/dt` as a Jacobian-vector product.
    pub fn latent_velocity(&self, u: &DMatrix<f64>, udot: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if u.shape() != udot.shape() {
            return shape_err(format!("u {:?} vs du/dt {:?}", u.shape(), udot.shape()));
        }
        if u.nrows() != self.n_dofs() {
            return shape_err(format!("encoder expects {} dofs, got {}", self.n_dofs(), u.nrows()));
        }
        let xdot = match &self.normalizer {
            Some(n) => n.scale_rows(udot, true),
            None => udot.clone(),
        };
        self.encoder.jvp(&self.normalize(u), &xdot)
    }

    /// `du/dt = grad phi_d(z) . dz/dt` as a Jacobian-vector product.
    pub fn decoder_velocity(&self, z: &DMatrix<f64>, zdot: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.shape() != zdot.shape() {
            return shape_err(format!("z {:?} vs dz/dt {:?}", z.shape(), zdot.shape()));
        }
        let v = self.decoder.jvp(z, zdot)?;
        Ok(match &self.normalizer {
            Some(n) => n.scale_rows(&v, false),
            None => v,
        })
    }
}

/// Mean over trajectories of the mean over time of the squared reconstruction
/// error of each snapshot.
pub fn reconstruction_loss(ae: &Autoencoder, set: &SnapshotSet) -> Result<f64> {
    if set.is_empty() {
        return arg_err("empty snapshot set");
    }
    let mut total = 0.0;
    for traj in set.trajectories() {
        let u = traj.states().transpose();
        let uhat = ae.decode(&ae.encode(&u)?)?;
        total += (uhat - &u).norm_squared() / u.ncols() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Linear projection onto the leading left singular vectors of the
/// mean-centred snapshot matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    pub mean: DVector<f64>,
    /// `N_u x N_z`, orthonormal columns.
    pub basis: DMatrix<f64>,
    /// Every singular value of the centred snapshot matrix, descending.
    pub singular_values: Vec<f64>,
}

pub fn pod_fit(set: &SnapshotSet, n_z: usize) -> Result<PodBasis> {
    if set.is_empty() {
        return arg_err("empty snapshot set");
    }
    let n_u = set.n_dofs();
    let total: usize = set.trajectories().iter().map(|t| t.states().nrows()).sum();
    if n_z == 0 || n_z > n_u.min(total) {
        return arg_err(format!("POD rank {n_z} exceeds min(snapshots {total}, dofs {n_u})"));
    }
    let mut s = DMatrix::zeros(n_u, total);
    let mut c = 0;
    for traj in set.trajectories() {
        for row in traj.states().row_iter() {
            s.set_column(c, &row.transpose());
            c += 1;
        }
    }
    let mean = s.column_mean();
    for mut col in s.column_iter_mut() {
        col -= &mean;
    }
    let svd = s.svd(true, false);
    let u = svd.u.ok_or_else(|| LasdiError::Singular("SVD did not return left vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut basis = DMatrix::zeros(n_u, n_z);
    for (k, &j) in order.iter().take(n_z).enumerate() {
        basis.set_column(k, &u.column(j));
    }
    let singular_values = order.iter().map(|&j| svd.singular_values[j]).collect();
    Ok(PodBasis {
        mean,
        basis,
        singular_values,
    })
}

impl PodBasis {
    pub fn latent_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn n_dofs(&self) -> usize {
        self.basis.nrows()
    }

    pub fn encode(&self, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if u.nrows() != self.n_dofs() {
            return shape_err(format!("POD expects {} dofs, got {}", self.n_dofs(), u.nrows()));
        }
        let mut centred = u.clone();
        for mut col in centred.column_iter_mut() {
            col -= &self.mean;
        }
        Ok(self.basis.tr_mul(&centred))
    }

    pub fn decode(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.nrows() != self.latent_dim() {
            return shape_err(format!("POD expects {} latents, got {}", self.latent_dim(), z.nrows()));
        }
        let mut u = &self.basis * z;
        for mut col in u.column_iter_mut() {
            col += &self.mean;
        }
        Ok(u)
    }
}

/// Either projection, behind one encode/decode interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Autoencoder(Autoencoder),
    Pod(PodBasis),
}

impl Projection {
    pub fn n_dofs(&self) -> usize {
        match self {
            Projection::Autoencoder(a) => a.n_dofs(),
            Projection::Pod(p) => p.n_dofs(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Projection::Autoencoder(a) => a.latent_dim(),
            Projection::Pod(p) => p.latent_dim(),
        }
    }

    pub fn encode(&self, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Projection::Autoencoder(a) => a.encode(u),
            Projection::Pod(p) => p.encode(u),
        }
    }

    pub fn decode(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Projection::Autoencoder(a) => a.decode(z),
            Projection::Pod(p) => p.decode(z),
        }
    }

    /// Latent trajectory `(N_t + 1) x N_z` of a state trajectory.
    pub fn encode_trajectory(&self, states: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.encode(&states.transpose())?.transpose())
    }

    /// State trajectory `(N_t + 1) x N_u` of a latent trajectory.
    pub fn decode_trajectory(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Projection::Autoencoder(a) => a.decode_trajectory(z),
            Projection::Pod(p) => Ok(p.decode(&z.transpose())?.transpose()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ParameterPoint, Trajectory};
    use crate::nn::Dense;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn set_from(mats: Vec<DMatrix<f64>>) -> SnapshotSet {
        let trajs = mats
            .into_iter()
            .enumerate()
            .map(|(i, m)| Trajectory::new(m, 0.1, ParameterPoint::new(vec![i as f64]).unwrap()).unwrap())
            .collect();
        SnapshotSet::new(trajs).unwrap()
    }

    fn identity_ae(n: usize) -> Autoencoder {
        let eye = || Dense {
            weight: DMatrix::identity(n, n),
            bias: DVector::zeros(n),
        };
        let enc = Mlp::from_layers(vec![eye()], Activation::Sigmoid).unwrap();
        let dec = Mlp::from_layers(vec![eye()], Activation::Sigmoid).unwrap();
        Autoencoder::from_parts(enc, dec, None).unwrap()
    }

    #[test]
    fn zero_network_encodes_to_zero() {
        let enc = Mlp::zeros(&[6, 4, 2], Activation::Sigmoid).unwrap();
        let dec = Mlp::zeros(&[2, 4, 6], Activation::Sigmoid).unwrap();
        let ae = Autoencoder::from_parts(enc, dec, None).unwrap();
        let u = rand_matrix(6, 3, 1);
        assert_eq!(ae.encode(&u).unwrap(), DMatrix::zeros(2, 3));
        assert_eq!(ae.decode(&ae.encode(&u).unwrap()).unwrap().shape(), (6, 3));
        assert!(ae.encode(&rand_matrix(5, 1, 1)).is_err());
    }

    #[test]
    fn identity_layer_and_reconstruction_loss() {
        let ae = identity_ae(4);
        let u = rand_matrix(4, 5, 2);
        assert_eq!(ae.encode(&u).unwrap(), u);
        let set = set_from(vec![rand_matrix(3, 4, 3), rand_matrix(3, 4, 4)]);
        assert_eq!(reconstruction_loss(&ae, &set).unwrap(), 0.0);

        // Decoder bias of one on every dof: each snapshot is off by a vector
        // of ones, so the loss is N_u.
        let mut shifted = ae.clone();
        shifted.decoder.layers_mut()[0].bias = DVector::from_element(4, 1.0);
        assert!((reconstruction_loss(&shifted, &set).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_loss_brute_force() {
        let ae = Autoencoder::new(&[3, 4, 2], Activation::Tanh, 5).unwrap();
        let a = rand_matrix(2, 3, 6);
        let b = rand_matrix(2, 3, 7);
        let set = set_from(vec![a.clone(), b.clone()]);
        let mut total = 0.0;
        for m in [&a, &b] {
            let mut inner = 0.0;
            for n in 0..m.nrows() {
                let u: Vec<f64> = m.row(n).iter().copied().collect();
                let z = ae.encoder.forward_vec(&u).unwrap();
                let uh = ae.decoder.forward_vec(&z).unwrap();
                inner += u.iter().zip(&uh).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            }
            total += inner / m.nrows() as f64;
        }
        total /= 2.0;
        assert!((reconstruction_loss(&ae, &set).unwrap() - total).abs() < 1e-14);
    }

    #[test]
    fn velocities() {
        for act in Activation::ALL {
            let mut ae = Autoencoder::new(&[5, 6, 3], act, 11).unwrap();
            ae.normalizer = Some(Normalizer {
                shift: DVector::from_fn(5, |i, _| 0.1 * i as f64),
                scale: DVector::from_fn(5, |i, _| 1.0 + 0.5 * i as f64),
            });
            let u = rand_matrix(5, 2, 12);
            let v = rand_matrix(5, 2, 13);
            assert_eq!(ae.latent_velocity(&u, &DMatrix::zeros(5, 2)).unwrap(), DMatrix::zeros(3, 2));
            let eps = 1e-6;
            let fd = (ae.encode(&(&u + &v * eps)).unwrap() - ae.encode(&(&u - &v * eps)).unwrap()) / (2.0 * eps);
            let jv = ae.latent_velocity(&u, &v).unwrap();
            assert!((&fd - &jv).norm() <= 1e-5 * jv.norm().max(1e-3), "{act:?}");

            let z = rand_matrix(3, 2, 14);
            let w = rand_matrix(3, 2, 15);
            assert_eq!(ae.decoder_velocity(&z, &DMatrix::zeros(3, 2)).unwrap(), DMatrix::zeros(5, 2));
            let fd = (ae.decode(&(&z + &w * eps)).unwrap() - ae.decode(&(&z - &w * eps)).unwrap()) / (2.0 * eps);
            let jw = ae.decoder_velocity(&z, &w).unwrap();
            assert!((&fd - &jw).norm() <= 1e-5 * jw.norm().max(1e-3), "{act:?}");
        }
    }

    #[test]
    fn linear_maps_give_exact_velocities() {
        let w = rand_matrix(2, 4, 20);
        let enc = Mlp::from_layers(
            vec![Dense {
                weight: w.clone(),
                bias: DVector::from_element(2, 0.3),
            }],
            Activation::Relu,
        )
        .unwrap();
        let wd = rand_matrix(4, 2, 21);
        let dec = Mlp::from_layers(
            vec![Dense {
                weight: wd.clone(),
                bias: DVector::zeros(4),
            }],
            Activation::Relu,
        )
        .unwrap();
        let ae = Autoencoder::from_parts(enc, dec, None).unwrap();
        let u = rand_matrix(4, 3, 22);
        let v = rand_matrix(4, 3, 23);
        assert!((ae.latent_velocity(&u, &v).unwrap() - &w * &v).norm() < 1e-14);
        let z = rand_matrix(2, 3, 24);
        let zd = rand_matrix(2, 3, 25);
        assert!((ae.decoder_velocity(&z, &zd).unwrap() - &wd * &zd).norm() < 1e-14);
    }

    #[test]
    fn trajectory_decoding_matches_batch_decoding() {
        let set = set_from(vec![rand_matrix(4, 6, 33), rand_matrix(4, 6, 34)]);
        let ae = Autoencoder::new(&[6, 5, 2], Activation::Sigmoid, 3)
            .unwrap()
            .with_normalizer(Normalizer::fit(&set).unwrap())
            .unwrap();
        let z = rand_matrix(8, 2, 35);
        let rows = Projection::Autoencoder(ae.clone()).decode_trajectory(&z).unwrap();
        assert_eq!(rows.shape(), (8, 6));
        assert!((rows - ae.decode(&z.transpose()).unwrap().transpose()).amax() <= 1e-13);
    }

    #[test]
    fn normalizer_round_trip() {
        let set = set_from(vec![rand_matrix(4, 3, 30), rand_matrix(4, 3, 31)]);
        let n = Normalizer::fit(&set).unwrap();
        let u = rand_matrix(3, 2, 32);
        assert!((n.inverse(&n.forward(&u)) - &u).norm() < 1e-14);
        let all = DMatrix::from_fn(3, 8, |i, j| {
            let t = &set.trajectories()[j / 4];
            t.states()[(j % 4, i)]
        });
        let x = n.forward(&all);
        for row in x.row_iter() {
            assert!(row.mean().abs() < 1e-14);
            assert!((row.variance() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pod_exact_subspace_and_full_rank() {
        let a = rand_matrix(7, 2, 40);
        let coeffs = rand_matrix(2, 12, 41);
        let offset = DVector::from_fn(7, |i, _| i as f64);
        let mut s = &a * &coeffs;
        for mut c in s.column_iter_mut() {
            c += &offset;
        }
        let set = set_from(vec![s.columns(0, 6).transpose(), s.columns(6, 6).transpose()]);
        let pod = pod_fit(&set, 2).unwrap();
        let recon = pod.decode(&pod.encode(&s).unwrap()).unwrap();
        assert!((&recon - &s).norm() <= 1e-10);

        let pod7 = pod_fit(&set, 7).unwrap();
        let recon = pod7.decode(&pod7.encode(&s).unwrap()).unwrap();
        assert!((&recon - &s).norm() <= 1e-10);
        assert!(pod_fit(&set, 8).is_err());
        assert!(pod_fit(&set, 0).is_err());
    }

    #[test]
    fn pod_error_equals_discarded_energy() {
        let m = rand_matrix(10, 6, 50);
        let set = set_from(vec![m.clone()]);
        let pod = pod_fit(&set, 3).unwrap();
        let u = m.transpose();
        let recon = pod.decode(&pod.encode(&u).unwrap()).unwrap();
        let err = (&recon - &u).norm();

        // Independent oracle: SVD of the centred matrix with its own ordering.
        let mut c = u.clone();
        let mean = c.column_mean();
        for mut col in c.column_iter_mut() {
            col -= &mean;
        }
        let mut sv: Vec<f64> = c.svd(false, false).singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let discarded: f64 = sv[3..].iter().map(|s| s * s).sum();
        assert!((err - discarded.sqrt()).abs() < 1e-10);

        let gram = pod.basis.tr_mul(&pod.basis);
        assert!((gram - DMatrix::identity(3, 3)).amax() <= 1e-10);

        let mut last = f64::INFINITY;
        for k in 1..=6 {
            let p = pod_fit(&set, k).unwrap();
            let e = (p.decode(&p.encode(&u).unwrap()).unwrap() - &u).norm();
            assert!(e <= last + 1e-12);
            last = e;
        }
    }

    #[test]
    fn pod_projection_is_idempotent() {
        let m = rand_matrix(9, 5, 60);
        let pod = pod_fit(&set_from(vec![m.clone()]), 2).unwrap();
        let u = rand_matrix(5, 3, 61);
        let p1 = pod.decode(&pod.encode(&u).unwrap()).unwrap();
        let p2 = pod.decode(&pod.encode(&p1).unwrap()).unwrap();
        assert!((p1 - p2).norm() < 1e-12);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let ae = Autoencoder::new(&[8, 5, 2], Activation::Softplus, 3).unwrap();
        let u = rand_matrix(8, 4, 70);
        assert_eq!(ae.encode(&u).unwrap(), ae.encode(&u).unwrap());
        let proj = Projection::Autoencoder(ae.clone());
        let traj = u.transpose();
        assert_eq!(proj.encode_trajectory(&traj).unwrap(), ae.encode(&u).unwrap().transpose());
    }
}
