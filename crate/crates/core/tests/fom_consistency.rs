use lasdi::data::{load_snapshots, save_snapshots, ParameterPoint};
use lasdi::fom::{time_averaged_residual, Burgers, BurgersConfig, FullOrderModel};

fn mu(a: f64, w: f64) -> ParameterPoint {
    ParameterPoint::new(vec![a, w]).unwrap()
}

#[test]
fn desk_solution_satisfies_its_own_scheme() {
    let fom = Burgers::new(BurgersConfig::desk()).unwrap();
    let p = mu(0.8, 1.0);
    let traj = fom.solve(&p).unwrap();
    let u = traj.states();
    assert_eq!((u.nrows(), u.ncols()), (201, 201));
    assert_eq!(u.row(0).transpose(), fom.initial_condition(&p).unwrap());

    let r = time_averaged_residual(&fom, u, &p, 200).unwrap();
    assert!(r <= fom.config().newton_tol, "{r}");

    // Periodic copy of the first node.
    for n in 0..u.nrows() {
        assert_eq!(u[(n, 0)], u[(n, 200)]);
    }

    // Any change to one step shows up in the residual.
    let mut bad = u.clone();
    bad[(100, 80)] += 1e-3;
    assert!(time_averaged_residual(&fom, &bad, &p, 200).unwrap() > 1e3 * r.max(1e-15));
}

#[test]
fn implicit_upwind_keeps_the_discrete_maximum_principle() {
    // For u >= 0, at the node holding the maximum the upwind difference is
    // nonnegative, so a backward Euler step cannot raise the maximum; the
    // same argument bounds the minimum from below.
    let fom = Burgers::new(BurgersConfig::desk()).unwrap();
    let traj = fom.solve(&mu(0.9, 0.9)).unwrap();
    let u = traj.states();
    let tol = 1e-8;
    for n in 1..u.nrows() {
        let (prev, cur) = (u.row(n - 1), u.row(n));
        assert!(cur.max() <= prev.max() + tol);
        assert!(cur.min() >= prev.min() - tol);
    }
}

#[test]
fn pulse_moves_right_faster_for_larger_amplitude() {
    let fom = Burgers::new(BurgersConfig::desk()).unwrap();
    let x = fom.x_grid().to_vec();
    let peak_x = |a: f64| {
        let u = fom.solve(&mu(a, 1.0)).unwrap().states().clone();
        let last = u.row(u.nrows() - 1);
        x[last.transpose().imax()]
    };
    let (slow, fast) = (peak_x(0.7), peak_x(0.9));
    assert!(slow > 0.0 && fast > slow, "{slow} {fast}");
}

#[test]
fn snapshot_files_round_trip_bit_exactly() {
    let fom = Burgers::new(BurgersConfig::desk()).unwrap();
    let set = fom.solve_all(&[mu(0.7, 0.9), mu(0.9, 1.1)]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.lsdi");
    save_snapshots(&set, &path).unwrap();
    let back = load_snapshots(&path).unwrap();
    for (a, b) in set.trajectories().iter().zip(back.trajectories()) {
        assert_eq!(a.param(), b.param());
        assert_eq!(a.dt().to_bits(), b.dt().to_bits());
        assert!(a.states().iter().zip(b.states().iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let path2 = dir.path().join("again.lsdi");
    save_snapshots(&back, &path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}
