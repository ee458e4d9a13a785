use std::sync::Arc;

use exactsde_core::catalog;
use exactsde_core::diffeo::{flow_straighten, verify_p3, Chart};
use exactsde_core::numerics::sample_interior;
use nalgebra::{DMatrix, DVector};

fn anchored_gap<F, G>(numeric: F, reference: G, anchor: &DVector<f64>, probes: &[DVector<f64>]) -> f64
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let (n0, r0) = (numeric(anchor), reference(anchor));
    probes
        .iter()
        .map(|x| ((numeric(x) - &n0) - (reference(x) - &r0)).amax())
        .fold(0.0, f64::max)
}

#[test]
fn heisenberg_flow_matches_quadratic_chart() {
    let entry = catalog::get("heisenberg").unwrap();
    let a = catalog::heisenberg_a();
    let anchor = DVector::from_vec(vec![1.0, 1.0, 0.0]);
    let chart = flow_straighten(&entry.model, &anchor, 0.0).unwrap();
    let probes = sample_interior(&chart.valid_box().shrink(0.05), 50, 11, 0.0);
    let closed = |x: &DVector<f64>| {
        let xi = x.rows(0, 2).into_owned();
        let g = x[2] - 0.5 * (xi.transpose() * &a * &xi)[(0, 0)];
        DVector::from_vec(vec![x[0], x[1], g])
    };
    let gap = anchored_gap(|x| chart.forward(x, 0.0).unwrap(), closed, &anchor, &probes);
    assert!(gap <= 1e-6, "gap {gap:e}");
}

#[test]
fn heisenberg_flow_inverse_round_trips() {
    let entry = catalog::get("heisenberg").unwrap();
    let anchor = DVector::from_vec(vec![1.0, 1.0, 0.0]);
    let chart = flow_straighten(&entry.model, &anchor, 0.0).unwrap();
    for x in sample_interior(&chart.valid_box().shrink(0.1), 20, 3, 0.0) {
        let back = chart.inverse(&chart.forward(&x, 0.0).unwrap(), 0.0).unwrap();
        assert!((back - &x).amax() < 1e-9);
    }
}

#[test]
fn gbm_flow_matches_log_chart_up_to_gauge() {
    let entry = catalog::get("gbm").unwrap();
    let (gamma, _, _) = catalog::gbm_default_params();
    let gi = gamma.try_inverse().unwrap();
    let anchor = DVector::from_vec(vec![1.0, 1.0]);
    let chart = flow_straighten(&entry.model, &anchor, 0.0).unwrap();
    // ∇Λ σ π = I fixes the numeric chart to πᵀ γ⁻¹ log φ up to a constant
    let pt: DMatrix<f64> = chart.permutation().matrix().transpose();
    let probes = sample_interior(&chart.valid_box().shrink(0.05), 50, 5, 0.0);
    let reference = |x: &DVector<f64>| &pt * (&gi * x.map(f64::ln));
    let gap = anchored_gap(|x| chart.forward(x, 0.0).unwrap(), reference, &anchor, &probes);
    assert!(gap <= 1e-6, "gap {gap:e}");
}

#[test]
fn numeric_charts_straighten_sigma() {
    for (id, anchor) in [("gbm", vec![1.0, 1.0]), ("heisenberg", vec![1.0, 1.0, 0.0]), ("cir_const", vec![1.0])] {
        let entry = catalog::get(id).unwrap();
        let chart = flow_straighten(&entry.model, &DVector::from_vec(anchor), 0.0).unwrap();
        let check = verify_p3(Arc::new(chart), &entry.model, 40, 1e-5).unwrap();
        assert!(check.report.passed(), "{id}: {:?}", check.report);
    }
}

#[test]
fn canonical_sigma_gives_identity_chart() {
    let entry = catalog::get("ou").unwrap();
    let anchor = DVector::from_vec(vec![0.3]);
    let chart = flow_straighten(&entry.model, &anchor, 0.0).unwrap();
    for x in sample_interior(chart.valid_box(), 10, 1, 0.0) {
        assert!((chart.forward(&x, 0.0).unwrap() - &x).amax() < 1e-12);
    }
}
