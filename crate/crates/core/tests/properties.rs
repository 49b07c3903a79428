use lasdi::data::{make_parameter_grid, ParameterPoint};
use lasdi::dynamics::{build_library, finite_difference_dz, LibrarySpec};
use lasdi::interp::gp::{gp_fit, GpOptions};
use lasdi::interp::knn::knn_fit;
use lasdi::interp::rbf::rbf_fit;
use lasdi::rom::{integrate_latent, population_moments};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn points(raw: &[(f64, f64)]) -> Vec<ParameterPoint> {
    let mut out: Vec<ParameterPoint> = Vec::new();
    for &(a, b) in raw {
        let p = ParameterPoint::new(vec![a, b]).unwrap();
        let dup = out.iter().any(|q| {
            let d = q.values();
            (d[0] - a).abs() < 1e-3 && (d[1] - b).abs() < 1e-3
        });
        if !dup {
            out.push(p);
        }
    }
    out
}

fn coefficient(mu: &ParameterPoint, shift: f64) -> DMatrix<f64> {
    let v = mu.values();
    DMatrix::from_fn(2, 3, |r, c| (v[0] * (r + 1) as f64 + shift).sin() * (1.0 + c as f64) - v[1] * v[1] * r as f64)
}

fn cloud() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.7f64..0.9, 0.9f64..1.1), 4..9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn knn_weights_form_a_partition_of_unity(raw in cloud(), q in (0.6f64..1.0, 0.8f64..1.2), k in 1usize..6) {
        let params = points(&raw);
        prop_assume!(params.len() >= 3);
        let xis: Vec<_> = params.iter().map(|p| coefficient(p, 0.0)).collect();
        let m = knn_fit(&params, &xis, k.min(params.len())).unwrap();
        let w = m.weights(&ParameterPoint::new(vec![q.0, q.1]).unwrap()).unwrap();
        let total: f64 = w.iter().map(|&(_, x)| x).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(w.iter().all(|&(_, x)| x >= 0.0));
        prop_assert!(w.len() <= k.min(params.len()));
    }

    #[test]
    fn rbf_reproduces_centers(raw in cloud()) {
        let params = points(&raw);
        prop_assume!(params.len() >= 2);
        let xis: Vec<_> = params.iter().map(|p| coefficient(p, 0.3)).collect();
        let m = rbf_fit(&params, &xis, None).unwrap();
        for (p, xi) in params.iter().zip(&xis) {
            let got = m.eval(p).unwrap();
            prop_assert!((&got - xi).amax() <= 1e-8 * xi.amax().max(1.0));
        }
    }

    #[test]
    fn gp_variance_is_nonnegative(raw in cloud(), q in prop::collection::vec((0.0f64..2.0, 0.0f64..2.0), 5)) {
        let params = points(&raw);
        prop_assume!(params.len() >= 2);
        let xis: Vec<_> = params.iter().map(|p| coefficient(p, -0.2)).collect();
        let opts = GpOptions { restarts: 2, iterations: 40, ..GpOptions::default() };
        let m = gp_fit(&params, &xis, &opts).unwrap();
        for (a, b) in q {
            let (mean, std) = m.predict(&ParameterPoint::new(vec![a, b]).unwrap()).unwrap();
            prop_assert!(mean.iter().all(|v| v.is_finite()));
            prop_assert!(std.iter().all(|&s| s >= 0.0 && s.is_finite()));
        }
    }

    #[test]
    fn population_variance_is_nonnegative(fields in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 2..6)) {
        let mats: Vec<_> = fields.iter().map(|f| DMatrix::from_row_slice(2, 3, f)).collect();
        let (mean, var) = population_moments(&mats);
        prop_assert!(var.iter().all(|&v| v >= 0.0));
        for (i, m) in mean.iter().enumerate() {
            let lo = mats.iter().map(|x| x[i]).fold(f64::INFINITY, f64::min);
            let hi = mats.iter().map(|x| x[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*m >= lo - 1e-12 && *m <= hi + 1e-12);
        }
    }

    #[test]
    fn finite_differences_exact_on_quadratics(a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0, n in 3usize..30) {
        let dt = 0.1;
        let z = DMatrix::from_fn(n + 1, 1, |i, _| {
            let t = i as f64 * dt;
            a + b * t + c * t * t
        });
        let dz = finite_difference_dz(&z, dt).unwrap();
        for i in 0..=n {
            let t = i as f64 * dt;
            prop_assert!((dz[(i, 0)] - (b + 2.0 * c * t)).abs() <= 1e-10);
        }
    }

    #[test]
    fn constant_rhs_integrates_exactly(c in prop::collection::vec(-1.0f64..1.0, 3), z0 in prop::collection::vec(-1.0f64..1.0, 3)) {
        // Only the constant column is nonzero: z(t) = z0 + c t.
        let spec = LibrarySpec { include_constant: true, poly_degree: 1 };
        let mut xi = DMatrix::zeros(3, spec.n_terms(3));
        for (r, v) in c.iter().enumerate() {
            xi[(r, 0)] = *v;
        }
        let z = integrate_latent(&xi, &z0, 0.01, 50, &spec).unwrap();
        for r in 0..3 {
            prop_assert!((z[(50, r)] - (z0[r] + 0.5 * c[r])).abs() <= 1e-12);
        }
        let theta = build_library(&z, &spec).unwrap();
        prop_assert!(theta.column(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grids_enumerate_row_major(n0 in 2usize..5, n1 in 2usize..5) {
        let g = make_parameter_grid(&[(0.7, 0.9), (0.9, 1.1)], &[n0, n1]).unwrap();
        prop_assert_eq!(g.len(), n0 * n1);
        let pts = g.points();
        for (i, p) in pts.iter().enumerate() {
            prop_assert_eq!(p.values()[0], pts[(i / n1) * n1].values()[0]);
            prop_assert_eq!(p.values()[1], pts[i % n1].values()[1]);
        }
        prop_assert_eq!(pts[n0 * n1 - 1].values(), &[0.9, 1.1]);
    }
}
