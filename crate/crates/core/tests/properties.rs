use ddspc::conic::{primal_cone_distance, project_cone, Cone};
use ddspc::lti::{shift_window, ArxModel, ExtendedState};
use ddspc::ocp::tightening_sigma;
use ddspc::pce::{build_joint_basis, pce_dynamics_step, sample_realization, GermFamily, PceVector};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

proptest! {
    #[test]
    fn basis_dimension_identity(l_ini in 1usize..12, n_w in 1usize..5, horizon in 1usize..15) {
        let fam = GermFamily::GaussianHermite { mean: 0.0, std: 1.0 };
        let b = build_joint_basis(l_ini, &vec![fam; n_w], horizon).unwrap();
        prop_assert_eq!(b.dimension(), l_ini + horizon * n_w);
    }

    #[test]
    fn mean_is_linear(a in -5.0f64..5.0, b in -5.0f64..5.0, v in matrix(4, 2), w in matrix(4, 2)) {
        let (v, w) = (PceVector::new(v), PceVector::new(w));
        let c = PceVector::linear_combination(a, &v, b, &w).unwrap();
        let expect = v.mean() * a + w.mean() * b;
        prop_assert!((c.mean() - &expect).amax() <= 1e-12 * (1.0 + expect.amax()));
    }

    #[test]
    fn covariance_is_symmetric_psd(v in matrix(5, 3)) {
        let (_, cov) = PceVector::new(v).moments();
        prop_assert!((&cov - cov.transpose()).amax() < 1e-12);
        let eig = cov.symmetric_eigen().eigenvalues;
        prop_assert!(eig.min() >= -1e-9 * (1.0 + eig.amax()));
    }

    #[test]
    fn dynamics_commute_with_evaluation(
        phi in matrix(2, 4), d in matrix(2, 1), z in matrix(3, 4), u in matrix(3, 1), w in matrix(3, 2),
        g in prop::collection::vec(-3.0f64..3.0, 2),
    ) {
        let y = pce_dynamics_step(&phi, &d, &PceVector::new(z.clone()), &PceVector::new(u.clone()), &PceVector::new(w.clone())).unwrap();
        let direct = &phi * sample_realization(&PceVector::new(z), &g).unwrap()
            + &d * sample_realization(&PceVector::new(u), &g).unwrap()
            + sample_realization(&PceVector::new(w), &g).unwrap();
        let via = sample_realization(&y, &g).unwrap();
        prop_assert!((direct - &via).amax() <= 1e-10 * (1.0 + via.amax()));
    }

    #[test]
    fn projection_is_idempotent_and_lands_in_cone(v in prop::collection::vec(-10.0f64..10.0, 6)) {
        let cones = [Cone::Zero(1), Cone::NonNeg(2), Cone::SecondOrder(3)];
        let p = project_cone(&v, &cones);
        prop_assert!(primal_cone_distance(&p, &cones) < 1e-12);
        let again = project_cone(&p, &cones);
        for (a, b) in p.iter().zip(&again) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_formula(eps in 0.001f64..=1.0) {
        let s = tightening_sigma(eps).unwrap();
        prop_assert!((s * s - (2.0 - eps) / eps).abs() < 1e-9 * s * s);
        prop_assert!(s >= 1.0);
    }

    #[test]
    fn shift_keeps_recent_history(z in prop::collection::vec(-5.0f64..5.0, 8), u in -5.0f64..5.0, y in prop::collection::vec(-5.0f64..5.0, 3)) {
        let zv = DVector::from_vec(z.clone());
        let next = shift_window(&zv, &DVector::from_element(1, u), &DVector::from_vec(y.clone()), 2, 1, 3);
        prop_assert_eq!(next[0], z[1]);
        prop_assert_eq!(next[1], u);
        prop_assert_eq!(&next.as_slice()[2..5], &z[5..8]);
        prop_assert_eq!(&next.as_slice()[5..8], &y[..]);
    }

    #[test]
    fn extended_matrices_match_step(phi in matrix(2, 6), d in matrix(2, 1), z in prop::collection::vec(-1.0f64..1.0, 6), u in -1.0f64..1.0) {
        let fam = GermFamily::UniformLegendre { lower: -1.0, upper: 1.0 };
        let m = ArxModel::new(phi, d, 2, vec![fam; 2]).unwrap();
        let e = m.extended_state_matrices();
        let zs = ExtendedState(DVector::from_vec(z));
        let uv = DVector::from_element(1, u);
        let w = DVector::from_vec(vec![0.3, -0.2]);
        let (_, next) = m.realization_step(&zs, &uv, &w).unwrap();
        let lin = &e.a * &zs.0 + &e.b * &uv + &e.e * &w;
        prop_assert!((lin - next.0).amax() < 1e-10);
    }
}
