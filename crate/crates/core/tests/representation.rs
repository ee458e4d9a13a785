use std::sync::Arc;

use exactsde_core::catalog::{self, Expectation, IDS};
use exactsde_core::diffeo::{flow_straighten, Chart};
use exactsde_core::representation::{build_representation, validate_representation, CanonicalParams};
use exactsde_core::{BoxDomain, Diffeomorphism, Grid};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn residual(report: &exactsde_core::CheckReport, label: &str) -> f64 {
    report.table.iter().find(|e| e.label == label).unwrap().max_residual
}

#[test]
fn positive_entries_solve_the_representation_equations() {
    for id in IDS {
        let entry = catalog::get(id).unwrap();
        if entry.expectation != Expectation::Representable {
            continue;
        }
        let rep = build_representation(
            entry.params.as_ref().unwrap(),
            entry.chart_dyn().unwrap(),
            &entry.start,
            entry.start_time,
            &entry.grid(60).unwrap(),
        )
        .unwrap();
        let report = validate_representation(&rep, &entry.model, 200, 1e-5);
        assert!(report.passed(), "{id}: {report:?}");
        assert!(report.sample_count >= 150, "{id}: only {} samples", report.sample_count);
        assert!(residual(&report, "grad") <= 1e-5);
        assert!(residual(&report, "time") <= 1e-5);
        assert!(residual(&report, "semigroup") <= 1e-7);
    }
}

#[test]
fn shifted_cbar_is_detected() {
    let entry = catalog::get("ou").unwrap();
    let rep = build_representation(
        entry.params.as_ref().unwrap(),
        entry.chart_dyn().unwrap(),
        &entry.start,
        0.0,
        &entry.grid(40).unwrap(),
    )
    .unwrap()
    .with_cbar_offset(DVector::from_element(1, 0.1));
    let report = validate_representation(&rep, &entry.model, 50, 1e-5);
    assert!(!report.passed());
    assert!(residual(&report, "time") > 1e-3);
}

#[test]
fn cir_map_matches_squared_gaussian() {
    let entry = catalog::get("cir_const").unwrap();
    let rep = build_representation(
        entry.params.as_ref().unwrap(),
        entry.chart_dyn().unwrap(),
        &entry.start,
        0.0,
        &entry.grid(30).unwrap(),
    )
    .unwrap();
    let (s, beta) = (0.4, -0.5);
    for (y, t) in [(0.0, 0.5), (0.3, 1.0), (-0.7, 1.5)] {
        let e = f64::exp(beta * t);
        let z = e * 2.0 / s + e * y;
        let want = (z * s / 2.0).powi(2);
        let got = rep.phi(&DVector::from_element(1, y), t).unwrap()[0];
        assert!((got - want).abs() < 1e-10, "t={t}: {got} vs {want}");
    }
}

#[test]
fn numeric_chart_pipeline_validates() {
    let entry = catalog::get("heisenberg").unwrap();
    let anchor = DVector::from_vec(vec![0.5, -0.5, 0.5]);
    let chart: Arc<dyn Chart> = Arc::new(flow_straighten(&entry.model, &anchor, 0.0).unwrap());
    let (report, params) = catalog::check_model(&entry.model, Some(chart.clone()), 60, 1e-5);
    assert_eq!(report.outcome, catalog::Outcome::Representable, "{report:?}");
    let rep = build_representation(&params.unwrap(), chart, &anchor, 0.0, &Grid::uniform(0.0, 0.5, 20).unwrap()).unwrap();
    let v = validate_representation(&rep, &entry.model, 20, 1e-5);
    assert!(v.passed(), "{v:?}");
}

fn ou_phi_oracle(beta: f64, theta: f64, x: f64, y: f64, t: f64) -> f64 {
    let e = (beta * t).exp();
    e * x + theta * (e - 1.0) / beta + e * y
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ou_map_matches_closed_form(
        beta in -2.0f64..-0.1,
        theta in -1.0f64..1.0,
        x in -2.0f64..2.0,
        y in -1.0f64..1.0,
        t in 0.05f64..1.0,
    ) {
        let params = CanonicalParams::constant(1, 1, 1, DMatrix::from_element(1, 1, beta), DVector::from_element(1, theta));
        let chart = Arc::new(Diffeomorphism::identity(BoxDomain::new(vec![-50.0], vec![50.0]).unwrap(), 1));
        let rep = build_representation(&params, chart, &DVector::from_element(1, x), 0.0, &Grid::uniform(0.0, 1.0, 16).unwrap()).unwrap();
        let got = rep.phi(&DVector::from_element(1, y), t).unwrap()[0];
        prop_assert!((got - ou_phi_oracle(beta, theta, x, y, t)).abs() < 1e-9);
    }

    #[test]
    fn transition_matrices_compose(
        b in prop::collection::vec(-1.0f64..1.0, 4),
        i in 1usize..10,
        j in 1usize..10,
    ) {
        let beta = DMatrix::from_row_slice(2, 2, &b);
        let params = CanonicalParams::constant(2, 2, 2, beta, DVector::zeros(2));
        let chart = Arc::new(Diffeomorphism::identity(BoxDomain::new(vec![-50.0; 2], vec![50.0; 2]).unwrap(), 2));
        let rep = build_representation(&params, chart, &DVector::zeros(2), 0.0, &Grid::uniform(0.0, 1.0, 10).unwrap()).unwrap();
        let (a, c) = (i.min(j), i.max(j));
        let lhs = rep.u_of(&rep.nodes()[c]);
        let rhs = rep.u_of(&rep.nodes()[a]) * rep.transition(a, c).unwrap();
        prop_assert!((lhs - rhs).amax() < 1e-9);
    }
}
