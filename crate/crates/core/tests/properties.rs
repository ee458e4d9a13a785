use exactsde_core::commutator::{check_sigma_commutator, Verdict, FD_TOL};
use exactsde_core::diffeo::{heisenberg_chart, log_chart, Chart};
use exactsde_core::numerics::{jacobian, psd_factor, JitterPolicy};
use exactsde_core::{BoxDomain, Grid, Permutation, SdeModel};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn well_conditioned(entries: &[f64]) -> DMatrix<f64> {
    let d = (entries.len() as f64).sqrt() as usize;
    DMatrix::from_row_slice(d, d, entries) * 0.3 + DMatrix::identity(d, d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn psd_factor_reconstructs_covariance(entries in prop::collection::vec(-1.0f64..1.0, 9)) {
        let m = DMatrix::from_row_slice(3, 3, &entries);
        let sigma = &m * m.transpose() + DMatrix::identity(3, 3) * 1e-3;
        let f = psd_factor(&sigma, &JitterPolicy::default()).unwrap();
        prop_assert!((&f.lower * f.lower.transpose() - &sigma).amax() < 1e-10);
        prop_assert_eq!(f.jitter, 0.0);
    }

    #[test]
    fn log_chart_round_trip_and_jacobian(
        g in prop::collection::vec(-1.0f64..1.0, 4),
        u in prop::collection::vec(0.2f64..4.0, 2),
    ) {
        let gamma = well_conditioned(&g);
        let chart = log_chart(&gamma, BoxDomain::new(vec![0.1, 0.1], vec![5.0, 5.0]).unwrap()).unwrap();
        let x = DVector::from_vec(u);
        let z = chart.forward(&x, 0.0).unwrap();
        prop_assert!((chart.inverse(&z, 0.0).unwrap() - &x).amax() < 1e-12);
        let fd = jacobian(|y, t| chart.forward(y, t).unwrap(), &x, 0.0, 1e-6, None).unwrap();
        let exact = chart.jacobian(&x, 0.0).unwrap();
        prop_assert!((fd - &exact).amax() <= 1e-5 * (1.0 + exact.amax()));
    }

    #[test]
    fn heisenberg_chart_round_trip(
        a in prop::collection::vec(-1.0f64..1.0, 3),
        x in prop::collection::vec(-1.5f64..1.5, 3),
    ) {
        let a = DMatrix::from_row_slice(2, 2, &[a[0], a[1], a[1], a[2]]);
        let chart = heisenberg_chart(&a, BoxDomain::new(vec![-2.0; 3], vec![2.0; 3]).unwrap()).unwrap();
        let x = DVector::from_vec(x);
        let z = chart.forward(&x, 0.0).unwrap();
        prop_assert!((chart.inverse(&z, 0.0).unwrap() - &x).amax() < 1e-12);
    }

    #[test]
    fn permutation_inverse_undoes_shuffle(seed in any::<u64>(), d in 1usize..6) {
        let mut order: Vec<usize> = (0..d).collect();
        let mut s = seed;
        for i in (1..d).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let p = Permutation::new(order).unwrap();
        let m = DMatrix::from_fn(2, d, |i, j| (i * d + j) as f64);
        prop_assert_eq!(p.inverse().apply_columns(&p.apply_columns(&m)), m);
    }

    #[test]
    fn refined_grid_nests_original(n in 1usize..20, f in 1usize..8, end in 0.1f64..5.0) {
        let g = Grid::uniform(0.0, end, n).unwrap();
        let r = g.refine(f);
        prop_assert!(r.nests(&g));
        prop_assert_eq!(r.len(), n * f + 1);
    }

    /// Scaling the noise leaves the commutator verdict unchanged.
    #[test]
    fn commutator_verdict_is_scale_invariant(c in 0.2f64..5.0, asym in any::<bool>()) {
        let off = if asym { -1.0 } else { 1.0 };
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, off, 0.7]);
        let model = SdeModel::builder(3, 2, 2)
            .domain(BoxDomain::new(vec![-2.0; 3], vec![2.0; 3]).unwrap())
            .sigma(move |x, _| {
                let ax = &a * x.rows(0, 2);
                DMatrix::from_row_slice(3, 2, &[c, 0.0, 0.0, c, c * ax[0], c * ax[1]])
            })
            .drift(|_, _| DVector::zeros(3))
            .build()
            .unwrap();
        let rep = check_sigma_commutator(&model, 100, FD_TOL);
        let want = if asym { Verdict::Fail } else { Verdict::Pass };
        prop_assert_eq!(rep.verdict, want);
    }
}
