//! Built-in models with closed-form charts and canonical parameters, and the
//! check → classify → build → validate pipeline that runs over them.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::commutator::{
    check_sigma_commutator, classify_canonical_drift, infer_generator, CheckReport, Verdict, FD_TOL,
};
use crate::diffeo::{heisenberg_chart, log_chart, sqrt_chart, verify_p3, Chart, Diffeomorphism};
use crate::error::{Error, Result, Witness};
use crate::model::{
    ito_to_stratonovich, stratonovich_to_ito, transform_sde, transform_stratonovich_drift, SdeModel,
};
use crate::numerics::{sample_space_time, BoxDomain, Grid};
use crate::representation::{build_representation, compatible_drift, validate_representation, CanonicalParams};

pub const IDS: [&str; 9] = [
    "bm",
    "ou",
    "cir_const",
    "cir_timevar",
    "gbm",
    "heisenberg",
    "heisenberg_asym",
    "example1_fgmn",
    "nonaffine_drift",
];

/// Pipeline stage at which a model is rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sigma,
    Drift,
    Straighten,
    Build,
    Validate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    /// Passes every stage, including build and validation.
    Representable,
    /// Passes the checks; no chart is provided so nothing is built.
    ChecksOnly,
    FailsAt(Stage),
}

/// `t ↦ E[X_t]` from the entry's start point.
pub type MeanOracle = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

#[derive(Clone)]
pub struct CatalogEntry {
    pub id: String,
    pub model: SdeModel,
    pub chart: Option<Arc<Diffeomorphism>>,
    pub params: Option<CanonicalParams>,
    pub start: DVector<f64>,
    pub start_time: f64,
    /// Default representation grid end (strictly inside the horizon).
    pub t_end: f64,
    pub expected: BTreeMap<String, f64>,
    pub notes: Vec<String>,
    pub expectation: Expectation,
    pub mean_oracle: Option<MeanOracle>,
}

impl std::fmt::Debug for CatalogEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CatalogEntry")
            .field("id", &self.id)
            .field("model", &self.model)
            .field("expectation", &self.expectation)
            .finish()
    }
}

impl CatalogEntry {
    pub fn chart_dyn(&self) -> Option<Arc<dyn Chart>> {
        self.chart.clone().map(|c| c as Arc<dyn Chart>)
    }

    /// Uniform grid from the start time to `t_end` with `intervals` steps.
    pub fn grid(&self, intervals: usize) -> Result<Grid> {
        Grid::uniform(self.start_time, self.t_end, intervals)
    }
}

fn b(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

fn m1(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

fn bm() -> Result<CatalogEntry> {
    let domain = BoxDomain::new(vec![-10.0], vec![10.0])?;
    let model = SdeModel::builder(1, 1, 1)
        .name("bm")
        .domain(domain.clone())
        .horizon(2.0)
        .sigma(|_, _| m1(1.0))
        .drift(|_, _| b(0.0))
        .sigma_jacobians(|_, _| vec![m1(0.0)])
        .drift_jacobian(|_, _| m1(0.0))
        .build()?;
    Ok(CatalogEntry {
        id: "bm".into(),
        chart: Some(Arc::new(Diffeomorphism::identity(domain, 1))),
        params: Some(CanonicalParams::zero(1, 1, 1)),
        start: b(0.0),
        start_time: 0.0,
        t_end: 1.0,
        expected: BTreeMap::from([("mean_x1_t1".into(), 0.0), ("var_x1_t1".into(), 1.0)]),
        notes: vec!["Brownian motion; every map is the identity".into()],
        expectation: Expectation::Representable,
        mean_oracle: Some(Arc::new(|_| b(0.0))),
        model,
    })
}

/// `dX = (θ̄ + β̄X) dt + dW`.
fn ou() -> Result<CatalogEntry> {
    let (beta, theta, x0) = (-1.0, 0.5, 1.0);
    let domain = BoxDomain::new(vec![-10.0], vec![10.0])?;
    let model = SdeModel::builder(1, 1, 1)
        .name("ou")
        .domain(domain.clone())
        .horizon(5.0)
        .sigma(|_, _| m1(1.0))
        .drift(move |x, _| b(theta + beta * x[0]))
        .sigma_jacobians(|_, _| vec![m1(0.0)])
        .drift_jacobian(move |_, _| m1(beta))
        .build()?;
    let mean = move |t: f64| (beta * t).exp() * x0 + theta * ((beta * t).exp() - 1.0) / beta;
    Ok(CatalogEntry {
        id: "ou".into(),
        chart: Some(Arc::new(Diffeomorphism::identity(domain, 1))),
        params: Some(CanonicalParams::constant(1, 1, 1, m1(beta), b(theta))),
        start: b(x0),
        start_time: 0.0,
        t_end: 4.0,
        expected: BTreeMap::from([
            ("generator_a".into(), -beta),
            ("mean_x1_t1".into(), mean(1.0)),
            ("var_x1_t1".into(), ((2.0 * beta).exp() - 1.0) / (2.0 * beta)),
        ]),
        notes: vec!["Ornstein-Uhlenbeck process, identity chart".into()],
        expectation: Expectation::Representable,
        mean_oracle: Some(Arc::new(move |t| b(mean(t)))),
        model,
    })
}

/// `E[(σZ/2)²]` with `σZ ~ N(m, v)` for the constant-coefficient square-root model.
pub fn cir_gaussian_square_law(x: f64, beta: f64, theta: f64, sigma: f64, dt: f64) -> (f64, f64) {
    let e = (beta * dt).exp();
    let m = 2.0 * e * x.sqrt() + theta * sigma / beta * (e - 1.0);
    let v = sigma * sigma * ((2.0 * beta * dt).exp() - 1.0) / (2.0 * beta);
    (m, v)
}

/// `σ(φ) = s√φ`, `b = θ̄ s √φ + 2β̄φ + s²/4`.
fn cir_const() -> Result<CatalogEntry> {
    let (s, beta, theta, x0) = (0.4, -0.5, 0.0, 1.0);
    let domain = BoxDomain::new(vec![0.0], vec![25.0])?;
    let model = SdeModel::builder(1, 1, 1)
        .name("cir_const")
        .domain(domain.clone())
        .horizon(2.0)
        .sigma(move |x, _| m1(s * x[0].sqrt()))
        .drift(move |x, _| b(theta * s * x[0].sqrt() + 2.0 * beta * x[0] + s * s / 4.0))
        .sigma_jacobians(move |x, _| vec![m1(s / (2.0 * x[0].sqrt()))])
        .drift_jacobian(move |x, _| m1(theta * s / (2.0 * x[0].sqrt()) + 2.0 * beta))
        .coefficient_floor(vec![0.0])
        .build()?;
    let chart = sqrt_chart(Arc::new(move |_| s), None, domain, 2.0)?;
    let mean = move |t: f64| {
        let (m, v) = cir_gaussian_square_law(x0, beta, theta, s, t);
        (m * m + v) / 4.0
    };
    Ok(CatalogEntry {
        id: "cir_const".into(),
        chart: Some(Arc::new(chart)),
        params: Some(CanonicalParams::constant(1, 1, 1, m1(beta), b(theta))),
        start: b(x0),
        start_time: 0.0,
        t_end: 1.5,
        expected: BTreeMap::from([
            ("sigma".into(), s),
            ("beta_bar".into(), beta),
            ("theta_bar".into(), theta),
            ("mean_x1_t1".into(), mean(1.0)),
        ]),
        notes: vec![
            "square-root diffusion with chart 2√φ/s".into(),
            "Euler baselines evaluate coefficients at max(X, 0) (full truncation)".into(),
        ],
        expectation: Expectation::Representable,
        mean_oracle: Some(Arc::new(move |t| b(mean(t)))),
        model,
    })
}

/// Time-varying square-root model: `s(t) = 0.4(1 + 0.5 sin t)`,
/// `β̄(t) = −0.5 + 0.2t`, `θ̄(t) = 0.1 cos t`.
fn cir_timevar() -> Result<CatalogEntry> {
    let s = |t: f64| 0.4 * (1.0 + 0.5 * t.sin());
    let s_dot = |t: f64| 0.2 * t.cos();
    let beta = |t: f64| -0.5 + 0.2 * t;
    let theta = |t: f64| 0.1 * t.cos();
    let domain = BoxDomain::new(vec![0.0], vec![25.0])?;
    let model = SdeModel::builder(1, 1, 1)
        .name("cir_timevar")
        .domain(domain.clone())
        .horizon(2.0)
        .time_homogeneous(false)
        .sigma(move |x, t| m1(s(t) * x[0].sqrt()))
        .drift(move |x, t| {
            let st = s(t);
            b(theta(t) * st * x[0].sqrt() + 2.0 * (beta(t) + s_dot(t) / st) * x[0] + st * st / 4.0)
        })
        .sigma_jacobians(move |x, t| vec![m1(s(t) / (2.0 * x[0].sqrt()))])
        .sigma_time_derivative(move |x, t| m1(s_dot(t) * x[0].sqrt()))
        .coefficient_floor(vec![0.0])
        .build()?;
    let chart = sqrt_chart(Arc::new(s), Some(Arc::new(s_dot)), domain, 2.0)?;
    let params = CanonicalParams::new(
        1,
        1,
        1,
        Arc::new(move |_: &DVector<f64>, t| m1(beta(t))),
        Arc::new(move |_: &DVector<f64>, t| b(theta(t))),
    );
    Ok(CatalogEntry {
        id: "cir_timevar".into(),
        chart: Some(Arc::new(chart)),
        params: Some(params),
        start: b(1.0),
        start_time: 0.0,
        t_end: 1.5,
        expected: BTreeMap::new(),
        notes: vec!["square-root diffusion with time-dependent chart 2√φ/s(t)".into()],
        expectation: Expectation::Representable,
        mean_oracle: None,
        model,
    })
}

/// Parameters of the default two-dimensional GBM entry.
pub fn gbm_default_params() -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    (
        DMatrix::from_row_slice(2, 2, &[0.4, 0.1, -0.1, 0.3]),
        DMatrix::from_row_slice(2, 2, &[-0.6, 0.2, 0.1, -0.5]),
        DVector::from_vec(vec![0.4, -0.2]),
    )
}

/// `E[X_t]` for the log-linear GBM family: `log X = γZ` with
/// `dZ = (θ̄ + β̄Z) dt + dW`.
pub fn gbm_mean(gamma: &DMatrix<f64>, beta: &DMatrix<f64>, theta: &DVector<f64>, z0: &DVector<f64>, t: f64) -> DVector<f64> {
    let d = gamma.nrows();
    // Simpson quadrature of e^{β̄u} (for the mean) and e^{β̄u}e^{β̄ᵀu} (for the covariance)
    let n = 400;
    let h = t / n as f64;
    let mut int_e = DMatrix::zeros(d, d);
    let mut int_c = DMatrix::zeros(d, d);
    for k in 0..=n {
        let w = if k == 0 || k == n {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let e = (beta * (k as f64 * h)).exp();
        int_c += &e * e.transpose() * w;
        int_e += e * w;
    }
    int_e *= h / 3.0;
    int_c *= h / 3.0;
    let mean_z = (beta * t).exp() * z0 + int_e * theta;
    let lm = gamma * mean_z;
    let lc = gamma * int_c * gamma.transpose();
    DVector::from_fn(d, |i, _| (lm[i] + 0.5 * lc[(i, i)]).exp())
}

/// GBM `σ_ij = φ_i γ_ij` with Itô drift
/// `b_i = φ_i {α_i + Σ_j B_ij log φ_j}`, `B = γβ̄γ⁻¹`,
/// `α_i = ½[γγᵀ]_ii + [γθ̄]_i`, on `domain`.
pub fn gbm_with(
    gamma: DMatrix<f64>,
    beta: DMatrix<f64>,
    theta: DVector<f64>,
    domain: BoxDomain,
    start: DVector<f64>,
) -> Result<CatalogEntry> {
    let d = gamma.nrows();
    if gamma.shape() != (d, d) || beta.shape() != (d, d) || theta.len() != d || domain.dim() != d {
        return Err(Error::InvalidArgument("GBM parameters have inconsistent shapes".into()));
    }
    let gi = gamma
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("γ must be invertible".into()))?;
    let bmat = &gamma * &beta * &gi;
    let ggt = &gamma * gamma.transpose();
    let gth = &gamma * &theta;
    let alpha = DVector::from_fn(d, |i, _| 0.5 * ggt[(i, i)] + gth[i]);
    let (g1, g2) = (gamma.clone(), gamma.clone());
    let (b1, a1) = (bmat.clone(), alpha.clone());
    let model = SdeModel::builder(d, d, d)
        .name("gbm")
        .domain(domain.clone())
        .horizon(2.0)
        .sigma(move |x, _| DMatrix::from_fn(d, d, |i, j| x[i] * g1[(i, j)]))
        .drift(move |x, _| {
            let l = &b1 * x.map(f64::ln);
            DVector::from_fn(d, |i, _| x[i] * (a1[i] + l[i]))
        })
        .sigma_jacobians(move |_, _| (0..d).map(|j| DMatrix::from_diagonal(&g2.column(j).into_owned())).collect())
        .build()?;
    let chart = log_chart(&gamma, domain)?;
    let z0 = &gi * start.map(f64::ln);
    let (g3, be3, th3) = (gamma.clone(), beta.clone(), theta.clone());
    let mut expected = BTreeMap::new();
    for i in 0..d {
        expected.insert(format!("alpha_{}", i + 1), alpha[i]);
        for j in 0..d {
            expected.insert(format!("B_{}{}", i + 1, j + 1), bmat[(i, j)]);
        }
    }
    Ok(CatalogEntry {
        id: "gbm".into(),
        chart: Some(Arc::new(chart)),
        params: Some(CanonicalParams::constant(d, d, d, beta, theta)),
        start,
        start_time: 0.0,
        t_end: 1.5,
        expected,
        notes: vec!["geometric Brownian motion with log-linear drift, chart γ⁻¹ log φ".into()],
        expectation: Expectation::Representable,
        mean_oracle: Some(Arc::new(move |t| gbm_mean(&g3, &be3, &th3, &z0, t))),
        model,
    })
}

fn gbm() -> Result<CatalogEntry> {
    let (g, be, th) = gbm_default_params();
    gbm_with(
        g,
        be,
        th,
        BoxDomain::new(vec![0.05, 0.05], vec![20.0, 20.0])?,
        DVector::from_vec(vec![1.0, 1.0]),
    )
}

/// Default symmetric generator of the Heisenberg entry.
pub fn heisenberg_a() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0])
}

fn heisenberg_sigma(a: &DMatrix<f64>, x: &DVector<f64>) -> DMatrix<f64> {
    let ax = a * x.rows(0, 2);
    DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, ax[0], ax[1]])
}

fn heisenberg_jacobians(a: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    (0..2)
        .map(|j| {
            let mut m = DMatrix::zeros(3, 3);
            m[(2, 0)] = a[(j, 0)];
            m[(2, 1)] = a[(j, 1)];
            m
        })
        .collect()
}

/// `σ = [I_2; (Aξ)ᵀ]` on `(ξ, z)` with
/// `b = (θ̄ + β̄ξ, h̃ + ξᵀA(θ̄ + β̄ξ) + ½ tr A)`, where `θ̄, h̃` are evaluated
/// at `z̃ = z − ½ξᵀAξ`.
fn heisenberg() -> Result<CatalogEntry> {
    let a = heisenberg_a();
    let beta = DMatrix::from_row_slice(2, 2, &[-0.5, 0.2, 0.1, -0.3]);
    let theta = |zt: f64| DVector::from_vec(vec![0.2, 0.1 * zt.sin()]);
    let h_tilde = |zt: f64| 0.3 - 0.2 * zt;
    let domain = BoxDomain::new(vec![-3.0, -3.0, -10.0], vec![3.0, 3.0, 10.0])?;
    let (a1, a2, a3, be1) = (a.clone(), a.clone(), a.clone(), beta.clone());
    let model = SdeModel::builder(3, 2, 2)
        .name("heisenberg")
        .domain(domain.clone())
        .horizon(2.0)
        .sigma(move |x, _| heisenberg_sigma(&a1, x))
        .drift(move |x, _| {
            let xi = x.rows(0, 2).into_owned();
            let zt = x[2] - 0.5 * (xi.transpose() * &a2 * &xi)[(0, 0)];
            let bar = theta(zt) + &be1 * &xi;
            let last = h_tilde(zt) + (xi.transpose() * &a2 * &bar)[(0, 0)] + 0.5 * a2.trace();
            DVector::from_vec(vec![bar[0], bar[1], last])
        })
        .sigma_jacobians(move |_, _| heisenberg_jacobians(&a3))
        .build()?;
    let chart = heisenberg_chart(&a, domain)?;
    let params = CanonicalParams::new(
        3,
        2,
        2,
        Arc::new(move |_: &DVector<f64>, _| beta.clone()),
        Arc::new(move |zt: &DVector<f64>, _| theta(zt[0])),
    )
    .with_h_tilde(Arc::new(move |zt: &DVector<f64>, _| b(h_tilde(zt[0]))));
    Ok(CatalogEntry {
        id: "heisenberg".into(),
        chart: Some(Arc::new(chart)),
        params: Some(params),
        start: DVector::from_vec(vec![0.5, -0.5, 0.5]),
        start_time: 0.0,
        t_end: 1.5,
        expected: BTreeMap::from([
            ("a_11".into(), a[(0, 0)]),
            ("a_12".into(), a[(0, 1)]),
            ("a_22".into(), a[(1, 1)]),
        ]),
        notes: vec!["Heisenberg-type diffusion, chart (ξ, z − ½ξᵀAξ); κ̄ absent".into()],
        expectation: Expectation::Representable,
        mean_oracle: None,
        model,
    })
}

fn heisenberg_asym() -> Result<CatalogEntry> {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    let (a1, a2) = (a.clone(), a);
    let model = SdeModel::builder(3, 2, 2)
        .name("heisenberg_asym")
        .domain(BoxDomain::new(vec![-3.0, -3.0, -10.0], vec![3.0, 3.0, 10.0])?)
        .horizon(2.0)
        .sigma(move |x, _| heisenberg_sigma(&a1, x))
        .drift(|_, _| DVector::zeros(3))
        .sigma_jacobians(move |_, _| heisenberg_jacobians(&a2))
        .build()?;
    Ok(CatalogEntry {
        id: "heisenberg_asym".into(),
        chart: None,
        params: None,
        start: DVector::zeros(3),
        start_time: 0.0,
        t_end: 1.0,
        expected: BTreeMap::from([("commutator_gap".into(), 2.0)]),
        notes: vec!["antisymmetric A: the diffusion columns do not commute".into()],
        expectation: Expectation::FailsAt(Stage::Sigma),
        mean_oracle: None,
        model,
    })
}

/// Coupled system with `m(φ₁) = φ₁²`, `g(φ₂) = e^{φ₂}`:
/// `σ = [[γ/m′, 0], [δ/g′, δ/g′]]`, `h = (αg/m′, βm/g′)`.
fn example1_fgmn() -> Result<CatalogEntry> {
    let (c1, c2, c3, c4) = (0.3, -0.2, 0.5, 0.8);
    let (alpha, beta, gamma, delta) = (c1 * c4, c2 * c3, c4, c3);
    let a = move |p1: f64| gamma / (2.0 * p1);
    let da = move |p1: f64| -gamma / (2.0 * p1 * p1);
    let e = move |p2: f64| delta * (-p2).exp();
    let de = move |p2: f64| -delta * (-p2).exp();
    let model = SdeModel::builder(2, 2, 2)
        .name("example1_fgmn")
        .domain(BoxDomain::new(vec![0.5, -1.0], vec![2.0, 1.0])?)
        .horizon(2.0)
        .sigma(move |x, _| DMatrix::from_row_slice(2, 2, &[a(x[0]), 0.0, e(x[1]), e(x[1])]))
        .stratonovich_drift(move |x, _| {
            DVector::from_vec(vec![
                alpha * x[1].exp() / (2.0 * x[0]),
                beta * x[0] * x[0] * (-x[1]).exp(),
            ])
        })
        .sigma_jacobians(move |x, _| {
            vec![
                DMatrix::from_row_slice(2, 2, &[da(x[0]), 0.0, 0.0, de(x[1])]),
                DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, de(x[1])]),
            ]
        })
        .build()?;
    Ok(CatalogEntry {
        id: "example1_fgmn".into(),
        chart: None,
        params: None,
        start: DVector::from_vec(vec![1.0, 0.0]),
        start_time: 0.0,
        t_end: 1.0,
        expected: BTreeMap::from([
            ("b_11".into(), c1 * c3),
            ("b_12".into(), c1 * c3),
            ("b_21".into(), c2 * c4 - c1 * c3),
            ("b_22".into(), -c1 * c3),
        ]),
        notes: vec!["checker-only fixture; B = −A is constant".into()],
        expectation: Expectation::ChecksOnly,
        mean_oracle: None,
        model,
    })
}

fn nonaffine_drift() -> Result<CatalogEntry> {
    let domain = BoxDomain::new(vec![-2.0], vec![2.0])?;
    let model = SdeModel::builder(1, 1, 1)
        .name("nonaffine_drift")
        .domain(domain.clone())
        .horizon(1.0)
        .sigma(|_, _| m1(1.0))
        .drift(|x, _| b(x[0] * x[0]))
        .sigma_jacobians(|_, _| vec![m1(0.0)])
        .build()?;
    Ok(CatalogEntry {
        id: "nonaffine_drift".into(),
        chart: Some(Arc::new(Diffeomorphism::identity(domain, 1))),
        params: None,
        start: b(0.0),
        start_time: 0.0,
        t_end: 0.5,
        expected: BTreeMap::new(),
        notes: vec!["h = φ² is not affine in the Gaussian coordinate".into()],
        expectation: Expectation::FailsAt(Stage::Drift),
        mean_oracle: None,
        model,
    })
}

/// Constructs an entry without validation or caching.
pub fn build_entry(id: &str) -> Result<CatalogEntry> {
    match id {
        "bm" => bm(),
        "ou" => ou(),
        "cir_const" => cir_const(),
        "cir_timevar" => cir_timevar(),
        "gbm" => gbm(),
        "heisenberg" => heisenberg(),
        "heisenberg_asym" => heisenberg_asym(),
        "example1_fgmn" => example1_fgmn(),
        "nonaffine_drift" => nonaffine_drift(),
        _ => Err(Error::UnknownModel(id.to_string())),
    }
}

fn cache() -> &'static Mutex<HashMap<String, CatalogEntry>> {
    static CACHE: OnceLock<Mutex<HashMap<String, CatalogEntry>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Validated entry; validation runs once per process.
pub fn get(id: &str) -> Result<CatalogEntry> {
    if let Some(e) = cache().lock().unwrap_or_else(|e| e.into_inner()).get(id) {
        return Ok(e.clone());
    }
    let entry = build_entry(id)?;
    validate_entry(&entry)?;
    cache()
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .insert(id.to_string(), entry.clone());
    Ok(entry)
}

/// Checks that the chart straightens σ and that the drift built from the
/// configured parameters equals the model drift.
pub fn validate_entry(entry: &CatalogEntry) -> Result<()> {
    let (Some(chart), Some(params)) = (entry.chart_dyn(), entry.params.as_ref()) else {
        return Ok(());
    };
    let p3 = verify_p3(chart.clone(), &entry.model, 64, 1e-8)?;
    if !p3.report.passed() {
        return Err(Error::NotCanonical {
            worst: p3.report.max_residual,
            witness: p3.report.worst_point.unwrap_or(Witness { state: vec![], time: 0.0 }),
        });
    }
    let b_compat = stratonovich_to_ito(&entry.model, &compatible_drift(params, chart.clone()));
    let region = chart.valid_box().intersect(entry.model.domain()).unwrap_or_else(|| entry.model.domain().clone());
    for (x, t) in sample_space_time(&region, 0.0, entry.model.horizon(), entry.model.is_time_homogeneous(), 32, 7, 0.02) {
        let want = entry.model.drift(&x, t);
        let got = b_compat(&x, t)?;
        let dev = (&got - &want).amax() / (1.0 + want.amax());
        if dev > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "catalog `{}`: compatible drift deviates by {dev:e} at {}",
                entry.id,
                Witness::new(&x, t)
            )));
        }
    }
    Ok(())
}

/// Summary of the generator inference.
#[derive(Debug, Clone, Serialize)]
pub struct GeneratorSummary {
    pub max_residual: f64,
    pub spread: f64,
    pub constant: bool,
    /// Mean `B = −A` over the samples, row-major.
    pub b_matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassificationSummary {
    pub max_affine_deviation: f64,
    pub max_tilde_derivative: f64,
    pub max_kappa_derivative: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Representable,
    NotRepresentable,
    Inconclusive,
}

/// Stage-by-stage outcome of the pipeline.
#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub model: String,
    pub outcome: Outcome,
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
    pub witness: Option<Witness>,
    pub sigma: CheckReport,
    pub generator: Option<GeneratorSummary>,
    pub p3: Option<CheckReport>,
    pub classification: Option<ClassificationSummary>,
    pub validation: Option<CheckReport>,
}

/// Witness carried by an error, if any.
pub fn error_witness(e: &Error) -> Option<Witness> {
    match e {
        Error::DomainExit(w) | Error::FlowEscape(w) => Some(w.clone()),
        Error::RankMismatch { witness, .. }
        | Error::SingularJacobian { witness, .. }
        | Error::NoSolution { witness, .. }
        | Error::NotAffine { witness, .. }
        | Error::TildeDriftDependsOnBar { witness, .. }
        | Error::KappaDependsOnBar { witness, .. }
        | Error::NotCanonical { witness, .. } => Some(witness.clone()),
        _ => None,
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl PipelineReport {
    fn fail(&mut self, stage: Stage, err: &Error) {
        self.outcome = match err {
            Error::InvalidArgument(_) => Outcome::Inconclusive,
            _ => Outcome::NotRepresentable,
        };
        self.failed_stage = Some(stage);
        self.error = Some(err.to_string());
        self.witness = error_witness(err);
    }
}

/// Runs the representability checks: diffusion commutator, drift condition,
/// and, when a chart is given, the straightening check and canonical drift
/// classification. Returns the report and the extracted parameters.
pub fn check_model(
    model: &SdeModel,
    chart: Option<Arc<dyn Chart>>,
    n_points: usize,
    tol: f64,
) -> (PipelineReport, Option<CanonicalParams>) {
    let sigma = check_sigma_commutator(model, n_points, tol);
    let mut report = PipelineReport {
        model: model.name().to_string(),
        outcome: Outcome::Representable,
        failed_stage: None,
        error: None,
        witness: None,
        sigma: sigma.clone(),
        generator: None,
        p3: None,
        classification: None,
        validation: None,
    };
    match sigma.verdict {
        Verdict::Fail => {
            report.outcome = Outcome::NotRepresentable;
            report.failed_stage = Some(Stage::Sigma);
            report.error = Some(format!("diffusion commutator residual {:e} exceeds {tol:e}", sigma.max_residual));
            report.witness = sigma.worst_point.clone();
            return (report, None);
        }
        Verdict::Inconclusive => {
            report.outcome = Outcome::Inconclusive;
            report.failed_stage = Some(Stage::Sigma);
            return (report, None);
        }
        Verdict::Pass => {}
    }
    let h = ito_to_stratonovich(model);
    match infer_generator(model, &h, n_points, tol) {
        Ok(g) => {
            report.generator = Some(GeneratorSummary {
                max_residual: g.max_residual,
                spread: g.spread,
                constant: g.is_constant(tol),
                b_matrix: rows(&g.b_matrix()),
            })
        }
        Err(e) => {
            report.fail(Stage::Drift, &e);
            return (report, None);
        }
    }
    let Some(chart) = chart else {
        return (report, None);
    };
    match verify_p3(chart.clone(), model, n_points, tol) {
        Ok(p3) => {
            let passed = p3.report.passed();
            let verdict = p3.report.verdict;
            report.p3 = Some(p3.report);
            if !passed {
                report.outcome = if verdict == Verdict::Inconclusive {
                    Outcome::Inconclusive
                } else {
                    Outcome::NotRepresentable
                };
                report.failed_stage = Some(Stage::Straighten);
                return (report, None);
            }
        }
        Err(e) => {
            report.fail(Stage::Straighten, &e);
            return (report, None);
        }
    }
    let canonical = match transform_sde(model, chart.clone()) {
        Ok(m) => m,
        Err(e) => {
            report.fail(Stage::Straighten, &e);
            return (report, None);
        }
    };
    let h_hat = transform_stratonovich_drift(&h, chart);
    match classify_canonical_drift(&canonical, &h_hat, n_points, tol) {
        Ok(c) => {
            report.classification = Some(ClassificationSummary {
                max_affine_deviation: c.max_affine_deviation,
                max_tilde_derivative: c.max_tilde_derivative,
                max_kappa_derivative: c.max_kappa_derivative,
            });
            (report, Some(c.params))
        }
        Err(e) => {
            report.fail(Stage::Drift, &e);
            (report, None)
        }
    }
}

/// Full pipeline for a catalog entry: checks, then build and validate the
/// representation from the entry's start point.
pub fn run_pipeline(entry: &CatalogEntry, n_points: usize, tol: f64) -> PipelineReport {
    let (mut report, extracted) = check_model(&entry.model, entry.chart_dyn(), n_points, tol);
    report.model = entry.id.clone();
    if report.outcome != Outcome::Representable {
        return report;
    }
    let (Some(chart), Some(params)) = (entry.chart_dyn(), entry.params.clone().or(extracted)) else {
        return report;
    };
    let rep = entry
        .grid(60)
        .and_then(|g| build_representation(&params, chart, &entry.start, entry.start_time, &g));
    match rep {
        Ok(rep) => {
            let v = validate_representation(&rep, &entry.model, n_points, tol.max(FD_TOL));
            if !v.passed() {
                report.outcome = Outcome::NotRepresentable;
                report.failed_stage = Some(Stage::Validate);
            }
            report.validation = Some(v);
        }
        Err(e) => report.fail(Stage::Build, &e),
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_id() {
        assert!(matches!(get("nope"), Err(Error::UnknownModel(_))));
    }

    #[test]
    fn cir_law_limits() {
        let (m, v) = cir_gaussian_square_law(1.0, -0.5, 0.0, 0.4, 0.0);
        assert_eq!((m, v), (2.0, 0.0));
    }
}
