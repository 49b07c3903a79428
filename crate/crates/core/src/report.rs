//! Error heatmaps, timing comparisons, and rank correlation.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::data::{ParameterGrid, ParameterPoint, SnapshotSet};
use crate::error::{arg_err, LasdiError, Result};
use crate::fom::FullOrderModel;
use crate::rom::{max_relative_error, RomModel};

/// One heatmap cell.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapRow {
    pub param: ParameterPoint,
    /// Max relative error in percent; infinite when the ROM blew up.
    pub max_rel_error_pct: f64,
    pub max_std: Option<f64>,
}

/// Uncertainty settings for [`heatmap`]; every grid point uses the same seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StdOptions {
    pub n_samples: usize,
    pub seed: u64,
}

/// Compares ROM predictions with `truth` at every grid point, in grid
/// order. Each prediction starts from the first truth snapshot.
pub fn heatmap(
    model: &RomModel,
    grid: &ParameterGrid,
    truth: &SnapshotSet,
    std: Option<StdOptions>,
) -> Result<Vec<HeatmapRow>> {
    grid.points()
        .iter()
        .map(|mu| {
            let traj = truth
                .trajectories()
                .iter()
                .find(|t| t.param().same_as(mu))
                .ok_or_else(|| LasdiError::InvalidArgument(format!("no truth trajectory for parameter {:?}", mu.values())))?;
            let u0 = traj.states().row(0).transpose();
            let pred = match std {
                Some(o) => model.predict_with_uncertainty(mu, &u0, o.n_samples, o.seed),
                None => model.predict(mu, &u0),
            };
            let (err, max_std) = match pred {
                Ok(p) => (100.0 * max_relative_error(&p.mean, traj.states())?, std.map(|_| p.max_std())),
                Err(e) if e.is_numeric() => (f64::INFINITY, std.map(|_| f64::INFINITY)),
                Err(e) => return Err(e),
            };
            Ok(HeatmapRow {
                param: mu.clone(),
                max_rel_error_pct: err,
                max_std,
            })
        })
        .collect()
}

/// CSV with header `mu0,...,max_rel_error_pct[,max_std]`.
pub fn heatmap_csv(rows: &[HeatmapRow]) -> String {
    let mut out = String::new();
    let Some(first) = rows.first() else {
        return out;
    };
    let mut header: Vec<String> = (0..first.param.dim()).map(|i| format!("mu{i}")).collect();
    header.push("max_rel_error_pct".into());
    if first.max_std.is_some() {
        header.push("max_std".into());
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for r in rows {
        let mut fields: Vec<String> = r.param.values().iter().map(|v| v.to_string()).collect();
        fields.push(r.max_rel_error_pct.to_string());
        if let Some(s) = r.max_std {
            fields.push(s.to_string());
        }
        let _ = writeln!(out, "{}", fields.join(","));
    }
    out
}

/// Wall-clock statistics over repeated runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub mean: Duration,
    pub min: Duration,
    pub repeats: usize,
}

/// Runs `f` `repeats` times and times each call.
pub fn time_repeats<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<Timing> {
    if repeats == 0 {
        return arg_err("repeats must be at least 1");
    }
    let mut total = Duration::ZERO;
    let mut min = Duration::MAX;
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(f()?);
        let d = t.elapsed();
        total += d;
        min = min.min(d);
    }
    Ok(Timing {
        mean: total / repeats as u32,
        min,
        repeats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkReport {
    pub fom: Timing,
    pub rom: Timing,
}

impl BenchmarkReport {
    /// Ratio of mean FOM time to mean ROM time.
    pub fn speedup(&self) -> f64 {
        self.fom.mean.as_secs_f64() / self.rom.mean.as_secs_f64().max(1e-12)
    }

    pub fn to_text(&self) -> String {
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        format!(
            "repeats {}\nfom mean {:.4} ms min {:.4} ms\nrom mean {:.4} ms min {:.4} ms\nspeedup {:.1}\n",
            self.fom.repeats,
            ms(self.fom.mean),
            ms(self.fom.min),
            ms(self.rom.mean),
            ms(self.rom.min),
            self.speedup()
        )
    }
}

/// Times one FOM solve against one mean-only ROM prediction at `mu`.
/// The initial condition is built once, outside both timings.
pub fn benchmark<M: FullOrderModel + ?Sized>(
    model: &RomModel,
    fom: &M,
    mu: &ParameterPoint,
    repeats: usize,
) -> Result<BenchmarkReport> {
    let u0 = fom.initial_condition(mu)?;
    let fom_t = time_repeats(repeats, || fom.solve(mu))?;
    let rom_t = time_repeats(repeats, || model.predict(mu, &u0))?;
    Ok(BenchmarkReport { fom: fom_t, rom: rom_t })
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
/// Undefined, and an error, when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return arg_err(format!("need two equal-length samples of size >= 2, got {} and {}", x.len(), y.len()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return arg_err("rank correlation of a constant sample");
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_parameter_grid, Trajectory};
    use crate::dynamics::LibrarySpec;
    use crate::interp::{InterpConfig, InterpKind};
    use crate::projection::{PodBasis, Projection};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn grid() -> ParameterGrid {
        make_parameter_grid(&[(0.0, 1.0), (2.0, 3.0)], &[2, 2]).unwrap()
    }

    /// One-mode POD model with dz/dt = xi z, xi interpolated over the grid.
    fn model(kind: InterpKind) -> RomModel {
        let pod = PodBasis {
            mean: DVector::zeros(3),
            basis: DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 0.0]),
            singular_values: vec![1.0],
        };
        let g = grid();
        let xis = (0..4).map(|i| DMatrix::from_element(1, 1, -1.0 - i as f64)).collect();
        let lib = LibrarySpec { include_constant: false, poly_degree: 1 };
        let cfg = InterpConfig { kind, k: 1, ..Default::default() };
        RomModel::new(Projection::Pod(pod), lib, g.points().to_vec(), xis, cfg, 0.05, 10).unwrap()
    }

    fn self_truth(m: &RomModel) -> SnapshotSet {
        let u0 = DVector::from_column_slice(&[2.0, 0.0, 0.0]);
        let trajs = grid()
            .points()
            .iter()
            .map(|mu| Trajectory::new(m.predict(mu, &u0).unwrap().mean, 0.05, mu.clone()).unwrap())
            .collect();
        SnapshotSet::new(trajs).unwrap()
    }

    #[test]
    fn self_comparison_gives_zero_error() {
        let m = model(InterpKind::Knn);
        let rows = heatmap(&m, &grid(), &self_truth(&m), None).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.max_rel_error_pct == 0.0 && r.max_std.is_none()));
        let csv = heatmap_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "mu0,mu1,max_rel_error_pct");
        assert_eq!(lines[1], "0,2,0");
        assert_eq!(lines[2], "0,3,0");
        assert_eq!(lines[4], "1,3,0");
        assert!(csv.ends_with('\n') && !csv.contains('\r'));
    }

    #[test]
    fn std_column_and_missing_truth() {
        let m = model(InterpKind::Gp);
        let opts = StdOptions { n_samples: 4, seed: 1 };
        let rows = heatmap(&m, &grid(), &self_truth(&m), Some(opts)).unwrap();
        assert!(rows.iter().all(|r| r.max_std.is_some_and(|s| s >= 0.0)));
        assert!(heatmap_csv(&rows).starts_with("mu0,mu1,max_rel_error_pct,max_std\n"));

        let full = self_truth(&m);
        let partial = SnapshotSet::new(full.trajectories()[..3].to_vec()).unwrap();
        assert!(heatmap(&m, &grid(), &partial, None).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[5.0, 6.0, 7.0, 8.0, 7.0]), vec![1.0, 2.0, 3.5, 5.0, 3.5]);
    }

    #[test]
    fn spearman_with_ties_matches_hand_computation() {
        // Ranks (1..5) and (1, 2, 3.5, 5, 3.5): cov 8, variances 10 and 9.5.
        let r = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[5.0, 6.0, 7.0, 8.0, 7.0]).unwrap();
        assert!((r - 8.0 / 95f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn spearman_rejects_degenerate_input() {
        assert!(spearman(&[1.0], &[2.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[3.0, 3.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[3.0]).is_err());
    }

    #[test]
    fn timing_rejects_zero_repeats() {
        assert!(time_repeats(0, || Ok(())).is_err());
        let t = time_repeats(3, || {
            std::thread::sleep(Duration::from_micros(50));
            Ok(())
        }).unwrap();
        assert!(t.min > Duration::ZERO && t.min <= t.mean && t.repeats == 3);
    }

    proptest! {
        #[test]
        fn spearman_invariant_under_monotone_maps(
            x in prop::collection::vec(-10.0f64..10.0, 3..20),
            y0 in prop::collection::vec(-10.0f64..10.0, 20),
        ) {
            let y = &y0[..x.len()];
            prop_assume!(average_ranks(&x).iter().any(|&r| r != average_ranks(&x)[0]));
            prop_assume!(average_ranks(y).iter().any(|&r| r != average_ranks(y)[0]));
            let r = spearman(&x, y).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            let xt: Vec<f64> = x.iter().map(|v| v.exp()).collect();
            let yt: Vec<f64> = y.iter().map(|v| -v * 3.0).collect();
            prop_assert!((spearman(&xt, &yt).unwrap() + r).abs() < 1e-12);
            prop_assert!((spearman(&x, &xt).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
