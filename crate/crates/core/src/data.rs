//! Snapshot tensors, parameter grids, and the `LSDI1` snapshot file format.
//!
//! A [`SnapshotSet`] is the third-order tensor of full-order solutions: one
//! [`Trajectory`] per parameter point, each a `(N_t + 1) x N_u` matrix of
//! sequential snapshots sharing a common time step.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::binio;
use crate::error::{arg_err, shape_err, LasdiError, Result};

/// A point in parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterPoint {
    values: Vec<f64>,
}

impl ParameterPoint {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return arg_err("parameter point must have at least one entry");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return arg_err(format!("parameter point {values:?} has non-finite entries"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Exact (bitwise-value) equality, used for duplicate detection.
    pub fn same_as(&self, other: &ParameterPoint) -> bool {
        self.values == other.values
    }
}

impl From<ParameterPoint> for Vec<f64> {
    fn from(p: ParameterPoint) -> Self {
        p.values
    }
}

/// A uniform tensor-product grid over a box in parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGrid {
    mins: Vec<f64>,
    maxs: Vec<f64>,
    counts: Vec<usize>,
    points: Vec<ParameterPoint>,
}

/// Builds a uniform grid with `counts[d]` points spanning `ranges[d]`,
/// ordered row-major (last dimension varies fastest).
pub fn make_parameter_grid(ranges: &[(f64, f64)], counts: &[usize]) -> Result<ParameterGrid> {
    if ranges.is_empty() || ranges.len() != counts.len() {
        return arg_err(format!(
            "need one count per range (got {} ranges, {} counts)",
            ranges.len(),
            counts.len()
        ));
    }
    for (d, (&(lo, hi), &n)) in ranges.iter().zip(counts).enumerate() {
        if !lo.is_finite() || !hi.is_finite() {
            return arg_err(format!("dimension {d}: non-finite bounds ({lo}, {hi})"));
        }
        if lo >= hi {
            return arg_err(format!("dimension {d}: min {lo} must be below max {hi}"));
        }
        if n < 2 {
            return arg_err(format!("dimension {d}: count {n} < 2"));
        }
    }

    let axes: Vec<Vec<f64>> = ranges
        .iter()
        .zip(counts)
        .map(|(&(lo, hi), &n)| {
            let step = (hi - lo) / (n - 1) as f64;
            (0..n)
                .map(|i| if i == n - 1 { hi } else { lo + i as f64 * step })
                .collect()
        })
        .collect();

    let total: usize = counts.iter().product();
    let mut points = Vec::with_capacity(total);
    let mut idx = vec![0usize; counts.len()];
    for _ in 0..total {
        let values = idx.iter().zip(&axes).map(|(&i, axis)| axis[i]).collect();
        points.push(ParameterPoint { values });
        for d in (0..counts.len()).rev() {
            idx[d] += 1;
            if idx[d] < counts[d] {
                break;
            }
            idx[d] = 0;
        }
    }

    Ok(ParameterGrid {
        mins: ranges.iter().map(|r| r.0).collect(),
        maxs: ranges.iter().map(|r| r.1).collect(),
        counts: counts.to_vec(),
        points,
    })
}

impl ParameterGrid {
    pub fn points(&self) -> &[ParameterPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn mins(&self) -> &[f64] {
        &self.mins
    }

    pub fn maxs(&self) -> &[f64] {
        &self.maxs
    }

    /// Grid spacing per dimension.
    pub fn steps(&self) -> Vec<f64> {
        self.mins
            .iter()
            .zip(&self.maxs)
            .zip(&self.counts)
            .map(|((lo, hi), n)| (hi - lo) / (*n - 1) as f64)
            .collect()
    }

    pub fn contains(&self, p: &ParameterPoint) -> bool {
        p.dim() == self.dim()
            && p.values()
                .iter()
                .zip(self.mins.iter().zip(&self.maxs))
                .all(|(v, (lo, hi))| v >= lo && v <= hi)
    }

    pub fn index_of(&self, p: &ParameterPoint) -> Option<usize> {
        self.points.iter().position(|q| q.same_as(p))
    }

    /// The `2^n_mu` corners of the box, in row-major order.
    pub fn corners(&self) -> Vec<ParameterPoint> {
        let n = self.dim();
        (0..1usize << n)
            .map(|mask| {
                let values = (0..n)
                    .map(|d| {
                        if mask >> (n - 1 - d) & 1 == 1 {
                            self.maxs[d]
                        } else {
                            self.mins[d]
                        }
                    })
                    .collect();
                ParameterPoint { values }
            })
            .collect()
    }

    /// CSV export with a `dim0,dim1,...` header.
    pub fn to_csv(&self) -> String {
        let mut out = (0..self.dim()).map(|d| format!("dim{d}")).collect::<Vec<_>>().join(",");
        out.push('\n');
        for p in &self.points {
            let row: Vec<String> = p.values().iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// One full-order solution: snapshots `u_0 .. u_{N_t}` as rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    states: DMatrix<f64>,
    dt: f64,
    param: ParameterPoint,
}

impl Trajectory {
    pub fn new(states: DMatrix<f64>, dt: f64, param: ParameterPoint) -> Result<Self> {
        if states.nrows() < 2 || states.ncols() < 1 {
            return shape_err(format!(
                "trajectory needs N_t >= 1 and N_u >= 1, got {}x{}",
                states.nrows(),
                states.ncols()
            ));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return arg_err(format!("time step must be positive, got {dt}"));
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(LasdiError::NonFinite("trajectory states".into()));
        }
        Ok(Self { states, dt, param })
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn param(&self) -> &ParameterPoint {
        &self.param
    }

    /// Number of time steps `N_t` (rows minus one).
    pub fn n_steps(&self) -> usize {
        self.states.nrows() - 1
    }

    pub fn n_dofs(&self) -> usize {
        self.states.ncols()
    }
}

/// The snapshot tensor `U` together with its parameter points.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    trajectories: Vec<Trajectory>,
}

impl SnapshotSet {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        let Some(first) = trajectories.first() else {
            return arg_err("snapshot set must contain at least one trajectory");
        };
        let mut set = SnapshotSet {
            trajectories: vec![first.clone()],
        };
        for t in trajectories.into_iter().skip(1) {
            set.append(t)?;
        }
        Ok(set)
    }

    fn check_compatible(&self, traj: &Trajectory) -> Result<()> {
        let first = &self.trajectories[0];
        if traj.states.shape() != first.states.shape() {
            return shape_err(format!(
                "trajectory shape {:?} does not match set shape {:?}",
                traj.states.shape(),
                first.states.shape()
            ));
        }
        if traj.dt != first.dt {
            return shape_err(format!("trajectory dt {} does not match set dt {}", traj.dt, first.dt));
        }
        if traj.param.dim() != first.param.dim() {
            return shape_err(format!(
                "parameter dimension {} does not match set dimension {}",
                traj.param.dim(),
                first.param.dim()
            ));
        }
        if self.contains_param(&traj.param) {
            return Err(LasdiError::DuplicateParameter(traj.param.values.clone()));
        }
        Ok(())
    }

    /// Adds one trajectory; existing trajectories are left untouched.
    pub fn append(&mut self, traj: Trajectory) -> Result<()> {
        self.check_compatible(&traj)?;
        self.trajectories.push(traj);
        Ok(())
    }

    /// Non-mutating variant of [`SnapshotSet::append`].
    pub fn with_trajectory(&self, traj: Trajectory) -> Result<SnapshotSet> {
        let mut next = self.clone();
        next.append(traj)?;
        Ok(next)
    }

    pub fn contains_param(&self, p: &ParameterPoint) -> bool {
        self.trajectories.iter().any(|t| t.param.same_as(p))
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn params(&self) -> Vec<ParameterPoint> {
        self.trajectories.iter().map(|t| t.param.clone()).collect()
    }

    /// `N_mu`.
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn n_steps(&self) -> usize {
        self.trajectories[0].n_steps()
    }

    pub fn n_dofs(&self) -> usize {
        self.trajectories[0].n_dofs()
    }

    pub fn dt(&self) -> f64 {
        self.trajectories[0].dt
    }

    pub fn param_dim(&self) -> usize {
        self.trajectories[0].param.dim()
    }

    /// Writes the set in the `LSDI1` binary format.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        binio::write_u64(w, self.len() as u64)?;
        binio::write_u64(w, (self.n_steps() + 1) as u64)?;
        binio::write_u64(w, self.n_dofs() as u64)?;
        binio::write_u64(w, self.param_dim() as u64)?;
        binio::write_f64(w, self.dt())?;
        for t in &self.trajectories {
            binio::write_f64s(w, t.param.values())?;
        }
        for t in &self.trajectories {
            for row in t.states.row_iter() {
                for v in row.iter() {
                    binio::write_f64(w, *v)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, SNAPSHOT_MAGIC)?;
        let n_mu = binio::read_len(r, "N_mu")?;
        let n_rows = binio::read_len(r, "N_t+1")?;
        let n_u = binio::read_len(r, "N_u")?;
        let p_dim = binio::read_len(r, "parameter dimension")?;
        let dt = binio::read_f64(r, "dt")?;
        if n_mu == 0 || n_rows < 2 || n_u == 0 || p_dim == 0 {
            return Err(LasdiError::Format(format!(
                "degenerate header (N_mu={n_mu}, N_t+1={n_rows}, N_u={n_u}, n_mu={p_dim})"
            )));
        }
        let params = binio::read_f64s(r, n_mu * p_dim, "parameters")?;
        let mut trajectories = Vec::with_capacity(n_mu);
        for (i, p) in params.chunks_exact(p_dim).enumerate() {
            let data = binio::read_f64s(r, n_rows * n_u, &format!("trajectory {i}"))?;
            let states = DMatrix::from_row_slice(n_rows, n_u, &data);
            trajectories.push(Trajectory::new(states, dt, ParameterPoint::new(p.to_vec())?)?);
        }
        binio::expect_eof(r)?;
        SnapshotSet::new(trajectories)
    }
}

pub const SNAPSHOT_MAGIC: &[u8] = b"LSDI1\n";

pub fn save_snapshots(set: &SnapshotSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    set.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_snapshots(path: impl AsRef<Path>) -> Result<SnapshotSet> {
    let mut r = BufReader::new(File::open(path)?);
    SnapshotSet::read_from(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(v: &[f64]) -> ParameterPoint {
        ParameterPoint::new(v.to_vec()).unwrap()
    }

    fn traj(param: &[f64], n_rows: usize, n_u: usize, seed: f64) -> Trajectory {
        let states = DMatrix::from_fn(n_rows, n_u, |i, j| seed + i as f64 * 0.5 - j as f64 * 0.25);
        Trajectory::new(states, 0.1, p(param)).unwrap()
    }

    #[test]
    fn burgers_grid_has_441_points_at_0_01() {
        let g = make_parameter_grid(&[(0.7, 0.9), (0.9, 1.1)], &[21, 21]).unwrap();
        assert_eq!(g.len(), 441);
        for s in g.steps() {
            assert!((s - 0.01).abs() < 1e-12);
        }
        assert_eq!(g.points()[0].values(), &[0.7, 0.9]);
        assert_eq!(g.points()[1].values()[0], 0.7);
        assert!((g.points()[1].values()[1] - 0.91).abs() < 1e-12);
        assert_eq!(g.points()[440].values(), &[0.9, 1.1]);
        assert!(g.points().iter().all(|q| g.contains(q)));
    }

    #[test]
    fn endpoint_only_grid() {
        let g = make_parameter_grid(&[(0.0, 1.0)], &[2]).unwrap();
        let v: Vec<f64> = g.points().iter().map(|q| q.values()[0]).collect();
        assert_eq!(v, vec![0.0, 1.0]);
    }

    #[test]
    fn heat_grid_spacings() {
        let g = make_parameter_grid(&[(1.0, 1.4), (4.0, 4.3)], &[21, 21]).unwrap();
        let s = g.steps();
        assert!((s[0] - 0.02).abs() < 1e-12);
        assert!((s[1] - 0.015).abs() < 1e-12);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(make_parameter_grid(&[(0.0, f64::NAN)], &[3]).is_err());
        assert!(make_parameter_grid(&[(0.0, 1.0)], &[1]).is_err());
        assert!(make_parameter_grid(&[(1.0, 0.0)], &[3]).is_err());
        assert!(make_parameter_grid(&[(0.0, 1.0)], &[3, 3]).is_err());
    }

    #[test]
    fn corners_of_burgers_box() {
        let g = make_parameter_grid(&[(0.7, 0.9), (0.9, 1.1)], &[3, 3]).unwrap();
        let c: Vec<Vec<f64>> = g.corners().into_iter().map(Vec::from).collect();
        assert_eq!(c, vec![vec![0.7, 0.9], vec![0.7, 1.1], vec![0.9, 0.9], vec![0.9, 1.1]]);
    }

    #[test]
    fn grid_csv_header() {
        let g = make_parameter_grid(&[(0.0, 1.0), (2.0, 3.0)], &[2, 2]).unwrap();
        let csv = g.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "dim0,dim1");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[2], "0,3");
    }

    #[test]
    fn append_grows_by_one_and_keeps_history() {
        let mut set = SnapshotSet::new(vec![
            traj(&[0.7, 0.9], 3, 4, 0.0),
            traj(&[0.9, 0.9], 3, 4, 1.0),
            traj(&[0.7, 1.1], 3, 4, 2.0),
            traj(&[0.9, 1.1], 3, 4, 3.0),
        ])
        .unwrap();
        let before: Vec<f64> = set.trajectories().iter().map(|t| t.states().sum()).collect();
        set.append(traj(&[0.8, 1.0], 3, 4, 4.0)).unwrap();
        assert_eq!(set.len(), 5);
        let after: Vec<f64> = set.trajectories()[..4].iter().map(|t| t.states().sum()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn append_rejects_duplicates_and_mismatches() {
        let mut set = SnapshotSet::new(vec![traj(&[0.7, 0.9], 3, 4, 0.0)]).unwrap();
        assert!(matches!(
            set.append(traj(&[0.7, 0.9], 3, 4, 1.0)),
            Err(LasdiError::DuplicateParameter(_))
        ));
        assert!(matches!(set.append(traj(&[0.8, 0.9], 3, 5, 1.0)), Err(LasdiError::Shape(_))));
        let odd_dt = Trajectory::new(DMatrix::zeros(3, 4), 0.2, p(&[0.1, 0.1])).unwrap();
        assert!(matches!(set.append(odd_dt), Err(LasdiError::Shape(_))));
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn trajectory_validation() {
        assert!(Trajectory::new(DMatrix::zeros(1, 3), 0.1, p(&[1.0])).is_err());
        assert!(Trajectory::new(DMatrix::zeros(2, 3), 0.0, p(&[1.0])).is_err());
        let mut m = DMatrix::zeros(2, 3);
        m[(1, 1)] = f64::INFINITY;
        assert!(Trajectory::new(m, 0.1, p(&[1.0])).is_err());
        assert!(ParameterPoint::new(vec![]).is_err());
    }

    #[test]
    fn minimal_set_round_trips() {
        let t = Trajectory::new(DMatrix::from_element(2, 1, 0.5), 1.0, p(&[0.3])).unwrap();
        let set = SnapshotSet::new(vec![t]).unwrap();
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 6 + 4 * 8 + 8 + 8 + 2 * 8);
        let back = SnapshotSet::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn wrong_magic_and_truncation_are_format_errors() {
        let set = SnapshotSet::new(vec![traj(&[1.0], 3, 2, 0.0)]).unwrap();
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(SnapshotSet::read_from(&mut bad.as_slice()), Err(LasdiError::Format(_))));

        let cut = &buf[..buf.len() - 3];
        assert!(matches!(SnapshotSet::read_from(&mut &cut[..]), Err(LasdiError::Format(_))));

        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(SnapshotSet::read_from(&mut extra.as_slice()), Err(LasdiError::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.lsdi");
        let set = SnapshotSet::new(vec![traj(&[1.0, 2.0], 4, 3, 0.1), traj(&[1.5, 2.0], 4, 3, -0.7)]).unwrap();
        save_snapshots(&set, &path).unwrap();
        assert_eq!(load_snapshots(&path).unwrap(), set);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            n_mu in 1usize..4,
            n_rows in 2usize..5,
            n_u in 1usize..5,
            vals in proptest::collection::vec(-1e6f64..1e6, 64),
            dt in 1e-6f64..10.0,
        ) {
            let trajs: Vec<Trajectory> = (0..n_mu)
                .map(|i| {
                    let m = DMatrix::from_fn(n_rows, n_u, |r, c| vals[(i * 7 + r * 3 + c) % 64]);
                    Trajectory::new(m, dt, p(&[i as f64, vals[i]])).unwrap()
                })
                .collect();
            let set = SnapshotSet::new(trajs).unwrap();
            let mut buf = Vec::new();
            set.write_to(&mut buf).unwrap();
            let back = SnapshotSet::read_from(&mut buf.as_slice()).unwrap();
            for (a, b) in back.trajectories().iter().zip(set.trajectories()) {
                prop_assert!(a.states().iter().zip(b.states().iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
                prop_assert_eq!(a.dt().to_bits(), b.dt().to_bits());
                prop_assert_eq!(a.param(), b.param());
            }
        }

        #[test]
        fn grids_are_sorted_and_unique(
            lo0 in -5.0f64..5.0, w0 in 0.1f64..3.0, n0 in 2usize..7,
            lo1 in -5.0f64..5.0, w1 in 0.1f64..3.0, n1 in 2usize..7,
        ) {
            let g = make_parameter_grid(&[(lo0, lo0 + w0), (lo1, lo1 + w1)], &[n0, n1]).unwrap();
            prop_assert_eq!(g.len(), n0 * n1);
            for pair in g.points().windows(2) {
                let (a, b) = (pair[0].values(), pair[1].values());
                prop_assert!(a[0] < b[0] || (a[0] == b[0] && a[1] < b[1]));
            }
            prop_assert!(g.points().iter().all(|q| g.contains(q)));
        }
    }
}
