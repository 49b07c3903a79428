//! `LSDM1` model checkpoints.
//!
//! Layout (little-endian): magic, projection block, library, time grid,
//! training parameters, coefficient matrices, interpolator settings,
//! training metadata. The fitted interpolator itself is not stored; it is
//! refit deterministically on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::binio::{expect_eof, read_f64, read_f64s, read_len, read_magic, read_u64, write_f64, write_f64s, write_u64};
use crate::data::ParameterPoint;
use crate::dynamics::LibrarySpec;
use crate::error::{LasdiError, Result};
use crate::interp::{GpOptions, InterpConfig, InterpKind};
use crate::nn::{Activation, Mlp};
use crate::projection::{Autoencoder, Normalizer, PodBasis, Projection};
use crate::rom::RomModel;

pub const MODEL_MAGIC: &[u8] = b"LSDM1\n";

/// Training progress stored next to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub seed: u64,
}

fn fmt(msg: impl Into<String>) -> LasdiError {
    LasdiError::Format(msg.into())
}

fn write_mlp<W: Write>(w: &mut W, m: &Mlp) -> Result<()> {
    let sizes = m.sizes();
    write_u64(w, sizes.len() as u64)?;
    for s in &sizes {
        write_u64(w, *s as u64)?;
    }
    write_u64(w, m.activation().tag())?;
    write_f64s(w, &m.to_flat())?;
    Ok(())
}

fn read_mlp<R: Read>(r: &mut R) -> Result<Mlp> {
    let n = read_len(r, "layer count")?;
    if n < 2 {
        return Err(fmt(format!("network needs at least two layer sizes, got {n}")));
    }
    let sizes = (0..n).map(|_| read_len(r, "layer size")).collect::<Result<Vec<_>>>()?;
    let tag = read_u64(r, "activation")?;
    let act = Activation::from_tag(tag).ok_or_else(|| fmt(format!("unknown activation tag {tag}")))?;
    let mut m = Mlp::zeros(&sizes, act).map_err(|e| fmt(e.to_string()))?;
    let flat = read_f64s(r, m.n_params(), "network parameters")?;
    m.set_flat(&flat)?;
    Ok(m)
}

fn write_vec<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    write_u64(w, v.len() as u64)?;
    write_f64s(w, v)?;
    Ok(())
}

fn read_vec<R: Read>(r: &mut R, what: &str) -> Result<Vec<f64>> {
    let n = read_len(r, what)?;
    read_f64s(r, n, what)
}

fn write_projection<W: Write>(w: &mut W, p: &Projection) -> Result<()> {
    match p {
        Projection::Autoencoder(ae) => {
            write_u64(w, 0)?;
            write_mlp(w, &ae.encoder)?;
            write_mlp(w, &ae.decoder)?;
            match &ae.normalizer {
                None => write_u64(w, 0)?,
                Some(n) => {
                    write_u64(w, 1)?;
                    write_vec(w, n.shift.as_slice())?;
                    write_vec(w, n.scale.as_slice())?;
                }
            }
        }
        Projection::Pod(pod) => {
            write_u64(w, 1)?;
            write_u64(w, pod.basis.nrows() as u64)?;
            write_u64(w, pod.basis.ncols() as u64)?;
            write_f64s(w, pod.mean.as_slice())?;
            write_f64s(w, pod.basis.as_slice())?;
            write_vec(w, &pod.singular_values)?;
        }
    }
    Ok(())
}

fn read_projection<R: Read>(r: &mut R) -> Result<Projection> {
    match read_u64(r, "projection kind")? {
        0 => {
            let encoder = read_mlp(r)?;
            let decoder = read_mlp(r)?;
            let normalizer = match read_u64(r, "normalizer flag")? {
                0 => None,
                1 => Some(Normalizer {
                    shift: DVector::from_vec(read_vec(r, "normalizer shift")?),
                    scale: DVector::from_vec(read_vec(r, "normalizer scale")?),
                }),
                t => return Err(fmt(format!("bad normalizer flag {t}"))),
            };
            let ae = Autoencoder::from_parts(encoder, decoder, normalizer).map_err(|e| fmt(e.to_string()))?;
            Ok(Projection::Autoencoder(ae))
        }
        1 => {
            let n_u = read_len(r, "N_u")?;
            let n_z = read_len(r, "N_z")?;
            let mean = DVector::from_vec(read_f64s(r, n_u, "POD mean")?);
            let basis = DMatrix::from_vec(n_u, n_z, read_f64s(r, n_u * n_z, "POD basis")?);
            let singular_values = read_vec(r, "singular values")?;
            Ok(Projection::Pod(PodBasis {
                mean,
                basis,
                singular_values,
            }))
        }
        t => Err(fmt(format!("unknown projection kind {t}"))),
    }
}

fn kind_tag(k: InterpKind) -> u64 {
    match k {
        InterpKind::Rbf => 0,
        InterpKind::Knn => 1,
        InterpKind::Gp => 2,
    }
}

pub fn write_model<W: Write>(w: &mut W, model: &RomModel, meta: CheckpointMeta) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    write_projection(w, &model.projection)?;
    write_u64(w, model.library.include_constant as u64)?;
    write_u64(w, model.library.poly_degree as u64)?;
    write_f64(w, model.dt)?;
    write_u64(w, model.n_steps as u64)?;

    let p_dim = model.params.first().map_or(0, |p| p.dim());
    write_u64(w, model.params.len() as u64)?;
    write_u64(w, p_dim as u64)?;
    for p in &model.params {
        write_f64s(w, p.values())?;
    }
    let (n_z, n_l) = model.xis.first().map_or((0, 0), |x| x.shape());
    write_u64(w, n_z as u64)?;
    write_u64(w, n_l as u64)?;
    for xi in &model.xis {
        write_f64s(w, xi.as_slice())?;
    }

    let c = &model.interp_config;
    write_u64(w, kind_tag(c.kind))?;
    write_u64(w, c.k as u64)?;
    match c.epsilon {
        None => write_u64(w, 0)?,
        Some(e) => {
            write_u64(w, 1)?;
            write_f64(w, e)?;
        }
    }
    write_f64(w, c.gp.jitter)?;
    write_u64(w, c.gp.restarts as u64)?;
    write_u64(w, c.gp.iterations as u64)?;
    write_f64(w, c.gp.learning_rate)?;
    write_u64(w, c.gp.seed)?;

    write_u64(w, meta.epoch)?;
    write_u64(w, meta.seed)?;
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<(RomModel, CheckpointMeta)> {
    read_magic(r, MODEL_MAGIC)?;
    let projection = read_projection(r)?;
    let include_constant = match read_u64(r, "library constant flag")? {
        0 => false,
        1 => true,
        t => return Err(fmt(format!("bad library constant flag {t}"))),
    };
    let degree = read_u64(r, "library degree")?;
    let library = LibrarySpec {
        include_constant,
        poly_degree: u8::try_from(degree).map_err(|_| fmt(format!("library degree {degree}")))?,
    };
    let dt = read_f64(r, "dt")?;
    let n_steps = read_len(r, "N_t")?;

    let n_mu = read_len(r, "N_mu")?;
    let p_dim = read_len(r, "parameter dimension")?;
    let params = read_f64s(r, n_mu * p_dim, "parameters")?
        .chunks_exact(p_dim.max(1))
        .map(|c| ParameterPoint::new(c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let n_z = read_len(r, "N_z")?;
    let n_l = read_len(r, "N_l")?;
    let xis = (0..n_mu)
        .map(|i| Ok(DMatrix::from_vec(n_z, n_l, read_f64s(r, n_z * n_l, &format!("coefficients {i}"))?)))
        .collect::<Result<Vec<_>>>()?;

    let kind = match read_u64(r, "interpolator kind")? {
        0 => InterpKind::Rbf,
        1 => InterpKind::Knn,
        2 => InterpKind::Gp,
        t => return Err(fmt(format!("unknown interpolator kind {t}"))),
    };
    let k = read_len(r, "k")?;
    let epsilon = match read_u64(r, "epsilon flag")? {
        0 => None,
        1 => Some(read_f64(r, "epsilon")?),
        t => return Err(fmt(format!("bad epsilon flag {t}"))),
    };
    let gp = GpOptions {
        jitter: read_f64(r, "GP jitter")?,
        restarts: read_len(r, "GP restarts")?,
        iterations: read_len(r, "GP iterations")?,
        learning_rate: read_f64(r, "GP learning rate")?,
        seed: read_u64(r, "GP seed")?,
    };
    let meta = CheckpointMeta {
        epoch: read_u64(r, "epoch")?,
        seed: read_u64(r, "seed")?,
    };
    expect_eof(r)?;

    let cfg = InterpConfig { kind, k, epsilon, gp };
    let model = RomModel::new(projection, library, params, xis, cfg, dt, n_steps)?;
    Ok((model, meta))
}

pub fn save_model(model: &RomModel, meta: CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, model, meta)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(RomModel, CheckpointMeta)> {
    read_model(&mut BufReader::new(File::open(path)?))
}
