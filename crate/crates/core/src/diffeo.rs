//! Time-dependent local diffeomorphisms `Λ_t`, the straightening check
//! `(∇Λ_t)σπ ∘ Λ̂⁻¹ = [I_r κ̄; 0 0]`, and numeric charts built by integrating
//! the flows of the (commuting) diffusion columns.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use parking_lot::RwLock;
use serde::Serialize;

use crate::commutator::{CheckReport, ResidualTally, SAMPLE_MARGIN, SAMPLE_SEED};
use crate::error::{Error, Result, Witness};
use crate::model::SdeModel;
use crate::numerics::{self, inf_norm, sample_interior, sample_space_time, vec_inf_norm, BoxDomain};

pub type MapFn = Arc<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
pub type JacFn = Arc<dyn Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>;
/// `κ̄` as a function of chart coordinates `z` and time.
pub type KappaField = Arc<dyn Fn(&DVector<f64>, f64) -> Result<DMatrix<f64>> + Send + Sync>;

/// Column permutation `π`: column `k` of `σπ` is column `order[k]` of `σ`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Permutation {
    order: Vec<usize>,
}

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || seen[i] {
                return Err(Error::InvalidArgument(format!("{order:?} is not a permutation")));
            }
            seen[i] = true;
        }
        Ok(Self { order })
    }

    pub fn identity(d: usize) -> Self {
        Self { order: (0..d).collect() }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(k, &i)| k == i)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.order.len()];
        for (k, &i) in self.order.iter().enumerate() {
            inv[i] = k;
        }
        Self { order: inv }
    }

    /// The permutation matrix with `σπ = apply_columns(σ)`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let d = self.order.len();
        let mut m = DMatrix::zeros(d, d);
        for (k, &i) in self.order.iter().enumerate() {
            m[(i, k)] = 1.0;
        }
        m
    }

    pub fn apply_columns(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), self.order.len(), |i, k| m[(i, self.order[k])])
    }
}

/// A local chart `(x, t) ↦ Λ_t(x)` with its inverse and derivatives.
pub trait Chart: Send + Sync {
    fn dim(&self) -> usize;
    fn forward(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>>;
    fn inverse(&self, z: &DVector<f64>, t: f64) -> Result<DVector<f64>>;
    /// Spatial Jacobian `∇Λ_t(x)`.
    fn jacobian(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>>;
    /// `∂_tΛ_t(x)`.
    fn time_derivative(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>>;
    fn permutation(&self) -> &Permutation;
    /// Box of original coordinates where the chart is valid.
    fn valid_box(&self) -> &BoxDomain;
    /// Box bounding the chart's image; `inverse` is defined inside it.
    fn image_box(&self) -> &BoxDomain;
    fn is_time_dependent(&self) -> bool;
}

/// Chart given by closed-form callbacks.
#[derive(Clone)]
pub struct Diffeomorphism {
    name: String,
    forward: MapFn,
    inverse: MapFn,
    jac: JacFn,
    dt: Option<MapFn>,
    permutation: Permutation,
    valid_box: BoxDomain,
    image_box: BoxDomain,
}

impl fmt::Debug for Diffeomorphism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Diffeomorphism")
            .field("name", &self.name)
            .field("permutation", &self.permutation)
            .field("valid_box", &self.valid_box)
            .field("image_box", &self.image_box)
            .finish()
    }
}

impl Diffeomorphism {
    /// `dt = None` marks a time-independent chart.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        forward: MapFn,
        inverse: MapFn,
        jac: JacFn,
        dt: Option<MapFn>,
        permutation: Permutation,
        valid_box: BoxDomain,
        image_box: BoxDomain,
    ) -> Self {
        Self {
            name: name.into(),
            forward,
            inverse,
            jac,
            dt,
            permutation,
            valid_box,
            image_box,
        }
    }

    pub fn identity(domain: BoxDomain, d: usize) -> Self {
        let p = domain.dim();
        Self::new(
            "identity",
            Arc::new(|x: &DVector<f64>, _| x.clone()),
            Arc::new(|z: &DVector<f64>, _| z.clone()),
            Arc::new(move |_: &DVector<f64>, _| DMatrix::identity(p, p)),
            None,
            Permutation::identity(d),
            domain.clone(),
            domain,
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// The inverse chart `z ↦ Λ_t⁻¹(z)` with `∇(Λ_t⁻¹) = (∇Λ_t)⁻¹ ∘ Λ_t⁻¹` and
    /// `∂_t(Λ_t⁻¹) = −(∇Λ_t)⁻¹ ∂_tΛ_t ∘ Λ_t⁻¹`.
    pub fn inverted(&self) -> Diffeomorphism {
        let p = self.valid_box.dim();
        let (inv, jac) = (self.inverse.clone(), self.jac.clone());
        let inv_jac: JacFn = Arc::new(move |z: &DVector<f64>, t: f64| {
            let x = inv(z, t);
            jac(&x, t)
                .try_inverse()
                .unwrap_or_else(|| DMatrix::from_element(p, p, f64::NAN))
        });
        let inv_dt = self.dt.as_ref().map(|dt| {
            let (inv, jac, dt) = (self.inverse.clone(), self.jac.clone(), dt.clone());
            let f: MapFn = Arc::new(move |z: &DVector<f64>, t: f64| {
                let x = inv(z, t);
                match jac(&x, t).try_inverse() {
                    Some(ji) => -(ji * dt(&x, t)),
                    None => DVector::from_element(p, f64::NAN),
                }
            });
            f
        });
        Diffeomorphism {
            name: format!("{} (inverse)", self.name),
            forward: self.inverse.clone(),
            inverse: self.forward.clone(),
            jac: inv_jac,
            dt: inv_dt,
            permutation: self.permutation.inverse(),
            valid_box: self.image_box.clone(),
            image_box: self.valid_box.clone(),
        }
    }
}

fn finite_or_exit(v: DVector<f64>, at: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::DomainExit(Witness::new(at, t)))
    }
}

impl Chart for Diffeomorphism {
    fn dim(&self) -> usize {
        self.valid_box.dim()
    }

    fn forward(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        if !self.valid_box.contains(x) {
            return Err(Error::DomainExit(Witness::new(x, t)));
        }
        finite_or_exit((self.forward)(x, t), x, t)
    }

    fn inverse(&self, z: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        if !self.image_box.contains(z) {
            return Err(Error::DomainExit(Witness::new(z, t)));
        }
        finite_or_exit((self.inverse)(z, t), z, t)
    }

    fn jacobian(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        let j = (self.jac)(x, t);
        if j.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("chart Jacobian at {}", Witness::new(x, t))));
        }
        Ok(j)
    }

    fn time_derivative(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        match &self.dt {
            Some(f) => {
                let v = f(x, t);
                if v.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("chart ∂t at {}", Witness::new(x, t))));
                }
                Ok(v)
            }
            None => Ok(DVector::zeros(self.dim())),
        }
    }

    fn permutation(&self) -> &Permutation {
        &self.permutation
    }

    fn valid_box(&self) -> &BoxDomain {
        &self.valid_box
    }

    fn image_box(&self) -> &BoxDomain {
        &self.image_box
    }

    fn is_time_dependent(&self) -> bool {
        self.dt.is_some()
    }
}

/// `Λ(φ) = γ⁻¹(log φ_1, …, log φ_d)`, the chart straightening `σ_ij = φ_i γ_ij`.
pub fn log_chart(gamma: &DMatrix<f64>, domain: BoxDomain) -> Result<Diffeomorphism> {
    let d = gamma.nrows();
    if gamma.ncols() != d || domain.dim() != d || domain.lower().iter().any(|&l| l < 0.0) {
        return Err(Error::InvalidArgument("log chart needs square γ and a positive box".into()));
    }
    let gi = gamma
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("γ is singular".into()))?;
    let g = gamma.clone();
    // image of a box under a linear map of logs is bounded by the corners
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for mask in 0..(1usize << d) {
        let corner = DVector::from_fn(d, |i, _| {
            let v = if mask >> i & 1 == 1 { domain.upper()[i] } else { domain.lower()[i] };
            v.ln()
        });
        let z = &gi * corner;
        for i in 0..d {
            lo[i] = lo[i].min(z[i]);
            hi[i] = hi[i].max(z[i]);
        }
    }
    let image = BoxDomain::new(lo, hi)?;
    let (gi1, gi2) = (gi.clone(), gi);
    Ok(Diffeomorphism::new(
        "log",
        Arc::new(move |x: &DVector<f64>, _| &gi1 * x.map(f64::ln)),
        Arc::new(move |z: &DVector<f64>, _| DVector::from_fn(d, |i, _| g.row(i).iter().zip(z.iter()).map(|(a, b)| a * b).sum::<f64>().exp())),
        Arc::new(move |x: &DVector<f64>, _| {
            let mut j = gi2.clone();
            for c in 0..d {
                let s = 1.0 / x[c];
                j.column_mut(c).scale_mut(s);
            }
            j
        }),
        None,
        Permutation::identity(d),
        domain,
        image,
    ))
}

/// `Λ_t(φ) = 2√φ / s(t)`, straightening `σ = s(t)√φ`.
pub fn sqrt_chart(
    s: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    s_dot: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
    domain: BoxDomain,
    horizon: f64,
) -> Result<Diffeomorphism> {
    if domain.dim() != 1 || domain.lower()[0] < 0.0 {
        return Err(Error::InvalidArgument("square-root chart needs a positive interval".into()));
    }
    let mut s_min = f64::INFINITY;
    for k in 0..=1000 {
        let v = s(horizon * k as f64 / 1000.0);
        if !(v > 0.0) {
            return Err(Error::InvalidArgument(format!("s(t) = {v} must be positive")));
        }
        s_min = s_min.min(v);
    }
    let z_hi = 2.0 * domain.upper()[0].sqrt() / s_min * 1.05;
    let image = BoxDomain::new(vec![0.0], vec![z_hi])?;
    let (s1, s2, s3) = (s.clone(), s.clone(), s.clone());
    let dt: Option<MapFn> = s_dot.map(|sd| {
        let s4 = s.clone();
        let f: MapFn = Arc::new(move |x: &DVector<f64>, t: f64| {
            let st = s4(t);
            DVector::from_element(1, -2.0 * x[0].sqrt() * sd(t) / (st * st))
        });
        f
    });
    Ok(Diffeomorphism::new(
        "sqrt",
        Arc::new(move |x: &DVector<f64>, t| DVector::from_element(1, 2.0 * x[0].sqrt() / s1(t))),
        Arc::new(move |z: &DVector<f64>, t| {
            let v = z[0] * s2(t) / 2.0;
            DVector::from_element(1, v * v)
        }),
        Arc::new(move |x: &DVector<f64>, t| DMatrix::from_element(1, 1, 1.0 / (s3(t) * x[0].sqrt()))),
        dt,
        Permutation::identity(1),
        domain,
        image,
    ))
}

/// `Λ(ξ, z) = (ξ, z − ½ ξᵀAξ)` for symmetric constant `A`.
pub fn heisenberg_chart(a: &DMatrix<f64>, domain: BoxDomain) -> Result<Diffeomorphism> {
    let d = a.nrows();
    if a.ncols() != d || domain.dim() != d + 1 {
        return Err(Error::InvalidArgument("Heisenberg chart needs A of size p−1".into()));
    }
    let sym = (a + a.transpose()) * 0.5;
    let xi_max = (0..d)
        .map(|i| domain.lower()[i].abs().max(domain.upper()[i].abs()))
        .fold(0.0, f64::max);
    let bound = 0.5 * sym.norm() * xi_max * xi_max * d as f64;
    let mut lo: Vec<f64> = domain.lower().iter().copied().collect();
    let mut hi: Vec<f64> = domain.upper().iter().copied().collect();
    lo[d] -= bound;
    hi[d] += bound;
    let image = BoxDomain::new(lo, hi)?;
    let quad = {
        let s = sym.clone();
        move |x: &DVector<f64>| {
            let xi = x.rows(0, d);
            0.5 * (xi.transpose() * &s * xi)[(0, 0)]
        }
    };
    let (q1, q2) = (quad.clone(), quad);
    Ok(Diffeomorphism::new(
        "heisenberg",
        Arc::new(move |x: &DVector<f64>, _| {
            let mut z = x.clone();
            z[d] -= q1(x);
            z
        }),
        Arc::new(move |z: &DVector<f64>, _| {
            let mut x = z.clone();
            x[d] += q2(z);
            x
        }),
        Arc::new(move |x: &DVector<f64>, _| {
            let mut j = DMatrix::identity(d + 1, d + 1);
            let ax = &sym * x.rows(0, d);
            for i in 0..d {
                j[(d, i)] = -ax[i];
            }
            j
        }),
        None,
        Permutation::identity(d),
        domain,
        image,
    ))
}

/// Parameters accepted by [`closed_form_diffeo`].
#[derive(Clone)]
pub enum ChartParams {
    Identity { domain: BoxDomain, d: usize },
    Log { gamma: DMatrix<f64>, domain: BoxDomain },
    Sqrt {
        s: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        s_dot: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
        domain: BoxDomain,
        horizon: f64,
    },
    Heisenberg { a: DMatrix<f64>, domain: BoxDomain },
}

/// Closed-form chart for a catalog id.
pub fn closed_form_diffeo(id: &str, params: &ChartParams) -> Result<Diffeomorphism> {
    match (id, params) {
        ("bm" | "ou", ChartParams::Identity { domain, d }) => Ok(Diffeomorphism::identity(domain.clone(), *d)),
        ("gbm", ChartParams::Log { gamma, domain }) => log_chart(gamma, domain.clone()),
        ("cir_const" | "cir_timevar", ChartParams::Sqrt { s, s_dot, domain, horizon }) => {
            sqrt_chart(s.clone(), s_dot.clone(), domain.clone(), *horizon)
        }
        ("heisenberg", ChartParams::Heisenberg { a, domain }) => heisenberg_chart(a, domain.clone()),
        ("bm" | "ou" | "gbm" | "cir_const" | "cir_timevar" | "heisenberg", _) => Err(Error::InvalidArgument(format!(
            "chart parameters do not match model `{id}`"
        ))),
        _ => Err(Error::UnknownModel(id.to_string())),
    }
}

/// Result of a straightening check.
#[derive(Clone)]
pub struct P3Check {
    pub report: CheckReport,
    /// `κ̄` on chart coordinates; `None` when `r = d`.
    pub kappa: Option<KappaField>,
}

impl fmt::Debug for P3Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("P3Check")
            .field("report", &self.report)
            .field("has_kappa", &self.kappa.is_some())
            .finish()
    }
}

/// `(∇Λ_t)σπ` at `x`.
pub fn straightened_sigma(chart: &dyn Chart, model: &SdeModel, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
    Ok(chart.jacobian(x, t)? * chart.permutation().apply_columns(&model.sigma(x, t)))
}

fn canonical_deviation(m: &DMatrix<f64>, r: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i < r && j >= r {
                continue;
            }
            let target = if i == j && i < r { 1.0 } else { 0.0 };
            worst = worst.max((m[(i, j)] - target).abs());
        }
    }
    worst
}

/// Checks `(∇Λ_t)σπ = [I_r κ̄; 0 0]` and `∂κ̄/∂z̄ = 0` at sampled points of
/// the shared region.
pub fn verify_p3(chart: Arc<dyn Chart>, model: &SdeModel, n_points: usize, tol: f64) -> Result<P3Check> {
    let (p, d, r) = (model.p(), model.d(), model.r());
    if chart.dim() != p || chart.permutation().len() != d {
        return Err(Error::InvalidArgument("chart does not fit the model dimensions".into()));
    }
    let region = chart
        .valid_box()
        .intersect(model.domain())
        .ok_or_else(|| Error::InvalidArgument("chart and model domain do not overlap".into()))?;
    let homogeneous = model.is_time_homogeneous() && !chart.is_time_dependent();
    let samples = sample_space_time(&region, 0.0, model.horizon(), homogeneous, n_points.max(1), SAMPLE_SEED ^ 0x33, SAMPLE_MARGIN);
    let mut labels = vec!["canonical".to_string()];
    if d > r {
        labels.push("kappa_bar_derivative".into());
    }
    let mut tally = ResidualTally::new("p3", labels);
    let mut worst_canon = (0.0, None);
    let mut worst_kappa = (0.0, None);
    for (x, t) in &samples {
        let m = match straightened_sigma(chart.as_ref(), model, x, *t) {
            Ok(m) => m,
            Err(_) => {
                tally.skip();
                continue;
            }
        };
        let dev = canonical_deviation(&m, r) / (1.0 + inf_norm(&m));
        if dev > worst_canon.0 {
            worst_canon = (dev, Some(Witness::new(x, *t)));
        }
        let mut residuals = vec![dev];
        if d > r {
            let kd = kappa_bar_derivative(chart.as_ref(), model, x, *t, &m).unwrap_or(f64::NAN);
            if !(kd <= worst_kappa.0) {
                worst_kappa = (kd, Some(Witness::new(x, *t)));
            }
            residuals.push(kd);
        }
        tally.record(&residuals, Witness::new(x, *t));
    }
    if worst_canon.0 > tol {
        return Err(Error::NotCanonical {
            worst: worst_canon.0,
            witness: worst_canon.1.unwrap(),
        });
    }
    if d > r && !(worst_kappa.0 <= tol) {
        if let Some(w) = worst_kappa.1 {
            return Err(Error::KappaDependsOnBar {
                derivative: worst_kappa.0,
                witness: w,
            });
        }
    }
    let report = tally.finish(tol);
    let kappa = (d > r).then(|| {
        let (c, m) = (chart.clone(), model.clone());
        let f: KappaField = Arc::new(move |z: &DVector<f64>, t: f64| {
            let x = c.inverse(z, t)?;
            Ok(straightened_sigma(c.as_ref(), &m, &x, t)?.view((0, r), (r, d - r)).into_owned())
        });
        f
    });
    Ok(P3Check { report, kappa })
}

fn kappa_bar_derivative(chart: &dyn Chart, model: &SdeModel, x: &DVector<f64>, t: f64, m: &DMatrix<f64>) -> Result<f64> {
    let (d, r) = (model.d(), model.r());
    let z = chart.forward(x, t)?;
    let scale = 1.0 + inf_norm(m);
    let mut worst: f64 = 0.0;
    for k in 0..r {
        let step = 1e-4 * z[k].abs().max(1.0);
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[k] += step;
        zm[k] -= step;
        let kp = straightened_sigma(chart, model, &chart.inverse(&zp, t)?, t)?;
        let km = straightened_sigma(chart, model, &chart.inverse(&zm, t)?, t)?;
        let diff = (kp.view((0, r), (r, d - r)) - km.view((0, r), (r, d - r))).amax();
        worst = worst.max(diff / (2.0 * step) / scale);
    }
    Ok(worst)
}

/// Tuning for [`flow_straighten_with`].
#[derive(Debug, Clone, Copy)]
pub struct StraightenOptions {
    /// Half-width of the valid box around the anchor, as a fraction of the
    /// domain width per axis.
    pub region_fraction: f64,
    /// RK4 steps per unit of flow parameter.
    pub steps_per_unit: f64,
    pub min_steps: usize,
    pub fd_step: f64,
}

impl Default for StraightenOptions {
    fn default() -> Self {
        Self {
            region_fraction: 0.1,
            steps_per_unit: 32.0,
            min_steps: 16,
            fd_step: numerics::DEFAULT_FD_STEP,
        }
    }
}

const CACHE_QUANTUM: f64 = 1e-12;
const NEWTON_TOL: f64 = 1e-13;
const NEWTON_ITERATIONS: usize = 40;
const CACHE_LIMIT: usize = 1 << 16;

fn remember<V>(cache: &RwLock<HashMap<Vec<i64>, V>>, key: Vec<i64>, value: V) {
    let mut cache = cache.write();
    if cache.len() >= CACHE_LIMIT {
        cache.clear();
    }
    cache.insert(key, value);
}

fn cache_key(x: &DVector<f64>, t: f64) -> Vec<i64> {
    x.iter()
        .chain(std::iter::once(&t))
        .map(|v| (v / CACHE_QUANTUM).round() as i64)
        .collect()
}

/// Chart constructed by straightening the first `r` permuted diffusion
/// columns one at a time around an anchor.
///
/// Stage `i` has field `α_i = (∇Λ^{i-1,1}) σ^π_i ∘ (Λ^{i-1,1})⁻¹` and map
/// `ψ^i(y) = θ_i(y_i − x̂_i; y|_{y_i = x̂_i})`, where `θ_i` is the flow of
/// `α_i`; the chart is `Λ = (ψ^r)⁻¹ ∘ … ∘ (ψ^1)⁻¹`. Time enters only as a
/// parameter of the flows.
pub struct NumericDiffeo {
    model: SdeModel,
    anchor: DVector<f64>,
    anchor_time: f64,
    r: usize,
    permutation: Permutation,
    valid_box: BoxDomain,
    image_box: OnceLock<BoxDomain>,
    options: StraightenOptions,
    /// Flow spans up to which a fixed step count is used, per stage.
    span_bounds: Vec<f64>,
    cache: RwLock<HashMap<Vec<i64>, DVector<f64>>>,
    jac_cache: RwLock<HashMap<Vec<i64>, DMatrix<f64>>>,
    anchor_jacobian: DMatrix<f64>,
}

impl fmt::Debug for NumericDiffeo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NumericDiffeo")
            .field("anchor", &self.anchor)
            .field("anchor_time", &self.anchor_time)
            .field("r", &self.r)
            .field("permutation", &self.permutation)
            .field("valid_box", &self.valid_box)
            .finish()
    }
}

/// Straightens `model` around `(anchor, t)` with default options.
pub fn flow_straighten(model: &SdeModel, anchor: &DVector<f64>, t: f64) -> Result<NumericDiffeo> {
    flow_straighten_with(model, anchor, t, StraightenOptions::default())
}

pub fn flow_straighten_with(
    model: &SdeModel,
    anchor: &DVector<f64>,
    t: f64,
    options: StraightenOptions,
) -> Result<NumericDiffeo> {
    let p = model.p();
    if anchor.len() != p || !model.domain().contains(anchor) {
        return Err(Error::InvalidArgument(format!(
            "anchor {} is not an interior point of the model domain",
            Witness::new(anchor, t)
        )));
    }
    let half: Vec<f64> = (0..p).map(|i| options.region_fraction * model.domain().width(i)).collect();
    let valid_box = BoxDomain::around(anchor, &half)?
        .intersect(model.domain())
        .ok_or_else(|| Error::InvalidArgument("empty straightening region".into()))?;
    let mut chart = NumericDiffeo {
        model: model.clone(),
        anchor: anchor.clone(),
        anchor_time: t,
        r: model.r(),
        permutation: Permutation::identity(model.d()),
        valid_box,
        image_box: OnceLock::new(),
        options,
        span_bounds: Vec::new(),
        cache: RwLock::new(HashMap::new()),
        jac_cache: RwLock::new(HashMap::new()),
        anchor_jacobian: DMatrix::identity(p, p),
    };
    let mut chosen: Vec<usize> = Vec::new();
    let sigma = model.sigma(anchor, t);
    for stage in 0..model.r() {
        // Ψ_{stage}(x̂) = x̂ under the anchor convention
        let jac = if stage == 0 {
            DMatrix::identity(p, p)
        } else {
            chart.chain_jacobian(stage, anchor, t)?
        };
        let lu = jac.lu();
        let mut best: Option<(usize, f64)> = None;
        for c in (0..model.d()).filter(|c| !chosen.contains(c)) {
            let alpha = lu
                .solve(&sigma.column(c).into_owned())
                .ok_or_else(|| Error::SingularJacobian {
                    det: 0.0,
                    witness: Witness::new(anchor, t),
                })?;
            let pivot = alpha[stage].abs();
            if pivot > 1e-8 * vec_inf_norm(&alpha) && best.is_none_or(|(_, b)| pivot > b) {
                best = Some((c, pivot));
            }
        }
        let (c, _) = best.ok_or(Error::PermutationExhausted { stage: stage + 1 })?;
        chosen.push(c);
        let mut order = chosen.clone();
        order.extend((0..model.d()).filter(|k| !chosen.contains(k)));
        chart.permutation = Permutation::new(order)?;
    }
    // fixed step counts keep Ψ smooth in y for finite differences
    let lin = chart.chain_jacobian(chart.r, anchor, t)?;
    let lu = lin.lu();
    let mut bounds = vec![0.0f64; chart.r];
    for mask in 0..(1usize << p.min(10)) {
        let corner = DVector::from_fn(p, |i, _| {
            if mask >> i & 1 == 1 { chart.valid_box.upper()[i] } else { chart.valid_box.lower()[i] }
        });
        if let Some(dy) = lu.solve(&(corner - anchor)) {
            for (b, v) in bounds.iter_mut().zip(dy.iter()) {
                *b = b.max(2.0 * v.abs());
            }
        }
    }
    chart.span_bounds = bounds;
    chart.anchor_jacobian = chart.chain_jacobian(chart.r, anchor, t)?;
    let z = chart.forward(anchor, t)?;
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::FlowEscape(Witness::new(anchor, t)));
    }
    let det = chart.jacobian(anchor, t)?.determinant();
    if det.abs() < 1e-10 {
        return Err(Error::SingularJacobian {
            det,
            witness: Witness::new(anchor, t),
        });
    }
    Ok(chart)
}

impl NumericDiffeo {
    pub fn anchor(&self) -> (&DVector<f64>, f64) {
        (&self.anchor, self.anchor_time)
    }

    pub fn stages(&self) -> usize {
        self.r
    }

    fn steps_for(&self, stage: usize, span: f64) -> usize {
        let reach = match self.span_bounds.get(stage) {
            Some(&b) if span.abs() <= b => b,
            _ => span.abs(),
        };
        ((reach * self.options.steps_per_unit).ceil() as usize).max(self.options.min_steps)
    }

    fn sigma_column(&self, x: &DVector<f64>, t: f64, stage: usize) -> Result<DVector<f64>> {
        if !self.model.domain().contains(x) {
            return Err(Error::FlowEscape(Witness::new(x, t)));
        }
        let col = self.permutation.order()[stage];
        Ok(self.model.sigma(x, t).column(col).into_owned())
    }

    /// Flow of `σ^π_stage` for time `tau` from `x`.
    fn flow(&self, stage: usize, x: &DVector<f64>, tau: f64, t: f64) -> Result<DVector<f64>> {
        if tau == 0.0 {
            return Ok(x.clone());
        }
        let n = self.steps_for(stage, tau);
        let h = tau / n as f64;
        let mut v = x.clone();
        for _ in 0..n {
            let k1 = self.sigma_column(&v, t, stage)?;
            let k2 = self.sigma_column(&(&v + &k1 * (0.5 * h)), t, stage)?;
            let k3 = self.sigma_column(&(&v + &k2 * (0.5 * h)), t, stage)?;
            let k4 = self.sigma_column(&(&v + &k3 * h), t, stage)?;
            v += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        }
        Ok(v)
    }

    /// `Ψ_k = ψ^1 ∘ … ∘ ψ^k`, mapping stage-`k` coordinates back to `x`.
    ///
    /// The flow of `α_i` is conjugate under `Ψ_{i-1}` to the flow of
    /// `σ^π_i`, so `Ψ_k(y)` is the flows of `σ^π_1, …, σ^π_k` for times
    /// `y_i − x̂_i`, applied in that order to `y` with its first `k`
    /// coordinates reset to the anchor.
    fn chain(&self, k: usize, y: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let mut v = y.clone();
        for i in 0..k {
            v[i] = self.anchor[i];
        }
        for stage in 0..k {
            v = self.flow(stage, &v, y[stage] - self.anchor[stage], t)?;
        }
        Ok(v)
    }

    /// `(σ^π_stage, ∇σ^π_stage · V)` at `x`.
    fn tangent_rhs(&self, stage: usize, x: &DVector<f64>, v: &DMatrix<f64>, t: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let col = self.sigma_column(x, t, stage)?;
        let grads = self.model.sigma_column_jacobians(x, t)?;
        Ok((col, &grads[self.permutation.order()[stage]] * v))
    }

    /// `∇Ψ_k(y)` from the variational equations along each flow.
    fn chain_jacobian(&self, k: usize, y: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        let p = y.len();
        let mut x = y.clone();
        let mut jac = DMatrix::identity(p, p);
        for i in 0..k {
            x[i] = self.anchor[i];
            jac[(i, i)] = 0.0;
        }
        for stage in 0..k {
            let tau = y[stage] - self.anchor[stage];
            if tau != 0.0 {
                let n = self.steps_for(stage, tau);
                let h = tau / n as f64;
                let mut phi = DMatrix::identity(p, p);
                for _ in 0..n {
                    let (k1, l1) = self.tangent_rhs(stage, &x, &phi, t)?;
                    let (k2, l2) = self.tangent_rhs(stage, &(&x + &k1 * (0.5 * h)), &(&phi + &l1 * (0.5 * h)), t)?;
                    let (k3, l3) = self.tangent_rhs(stage, &(&x + &k2 * (0.5 * h)), &(&phi + &l2 * (0.5 * h)), t)?;
                    let (k4, l4) = self.tangent_rhs(stage, &(&x + &k3 * h), &(&phi + &l3 * h), t)?;
                    x += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
                    phi += (l1 + (l2 + l3) * 2.0 + l4) * (h / 6.0);
                }
                jac = phi * jac;
            }
            let end = self.sigma_column(&x, t, stage)?;
            for r in 0..p {
                jac[(r, stage)] += end[r];
            }
        }
        Ok(jac)
    }

    /// Solves `Ψ_r(y) = x` by damped Newton from the linearization at the
    /// anchor, reusing the Jacobian while the residual contracts fast.
    fn compute_forward(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        if !self.model.domain().contains(x) {
            return Err(Error::DomainExit(Witness::new(x, t)));
        }
        let escape = || Error::FlowEscape(Witness::new(x, t));
        let tol = NEWTON_TOL * (1.0 + vec_inf_norm(x));
        let mut lu = self.anchor_jacobian.clone().lu();
        let mut y = &self.anchor + lu.solve(&(x - &self.anchor)).ok_or_else(escape)?;
        let mut res = match self.chain(self.r, &y, t) {
            Ok(v) => v - x,
            Err(_) => {
                y = self.anchor.clone();
                self.chain(self.r, &y, t)? - x
            }
        };
        for _ in 0..NEWTON_ITERATIONS {
            let norm = vec_inf_norm(&res);
            if norm <= tol {
                return Ok(y);
            }
            let dy = lu.solve(&res).ok_or_else(escape)?;
            let mut lambda = 1.0;
            let accepted = loop {
                let trial = &y - &dy * lambda;
                if let Ok(v) = self.chain(self.r, &trial, t) {
                    let r = v - x;
                    if vec_inf_norm(&r) < norm {
                        y = trial;
                        res = r;
                        break true;
                    }
                }
                lambda *= 0.5;
                if lambda < 1e-6 {
                    break false;
                }
            };
            if !accepted || vec_inf_norm(&res) > 0.1 * norm {
                match self.chain_jacobian(self.r, &y, t) {
                    Ok(j) => lu = j.lu(),
                    Err(_) if accepted => {}
                    Err(e) => return Err(e),
                }
            }
            if !accepted && norm <= 1e3 * tol {
                return Ok(y);
            }
        }
        if vec_inf_norm(&res) <= 1e3 * tol {
            Ok(y)
        } else {
            Err(escape())
        }
    }

    fn estimate_image_box(&self) -> BoxDomain {
        let p = self.valid_box.dim();
        let mut lo = vec![f64::INFINITY; p];
        let mut hi = vec![f64::NEG_INFINITY; p];
        let mut points = sample_interior(&self.valid_box, 32, SAMPLE_SEED, 0.0);
        for mask in 0..(1usize << p.min(10)) {
            points.push(DVector::from_fn(p, |i, _| {
                let (l, u) = (self.valid_box.lower()[i], self.valid_box.upper()[i]);
                let w = 1e-9 * (u - l);
                if mask >> i & 1 == 1 { u - w } else { l + w }
            }));
        }
        for x in points {
            if let Ok(z) = self.forward(&x, self.anchor_time) {
                for i in 0..p {
                    lo[i] = lo[i].min(z[i]);
                    hi[i] = hi[i].max(z[i]);
                }
            }
        }
        let mut out_lo = Vec::with_capacity(p);
        let mut out_hi = Vec::with_capacity(p);
        for i in 0..p {
            if lo[i].is_finite() && hi[i] > lo[i] {
                let pad = 0.1 * (hi[i] - lo[i]);
                out_lo.push(lo[i] - pad);
                out_hi.push(hi[i] + pad);
            } else {
                out_lo.push(self.valid_box.lower()[i]);
                out_hi.push(self.valid_box.upper()[i]);
            }
        }
        BoxDomain::new(out_lo, out_hi).unwrap_or_else(|_| self.valid_box.clone())
    }
}

impl Chart for NumericDiffeo {
    fn dim(&self) -> usize {
        self.model.p()
    }

    fn forward(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let key = cache_key(x, t);
        if let Some(z) = self.cache.read().get(&key) {
            return Ok(z.clone());
        }
        let z = self.compute_forward(x, t)?;
        remember(&self.cache, key, z.clone());
        Ok(z)
    }

    fn inverse(&self, z: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let x = self.chain(self.r, z, t)?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::FlowEscape(Witness::new(z, t)));
        }
        if self.model.domain().contains(&x) {
            remember(&self.cache, cache_key(&x, t), z.clone());
        }
        Ok(x)
    }

    fn jacobian(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        let key = cache_key(x, t);
        if let Some(j) = self.jac_cache.read().get(&key) {
            return Ok(j.clone());
        }
        let z = self.forward(x, t)?;
        let inv = self.chain_jacobian(self.r, &z, t)?;
        let det = inv.determinant();
        let jac = inv.try_inverse().ok_or_else(|| Error::SingularJacobian {
            det,
            witness: Witness::new(x, t),
        })?;
        remember(&self.jac_cache, key, jac.clone());
        Ok(jac)
    }

    fn time_derivative(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        if self.model.is_time_homogeneous() {
            return Ok(DVector::zeros(self.dim()));
        }
        let z = self.forward(x, t)?;
        let h = self.options.fd_step * t.abs().max(1.0);
        let dinv = (self.inverse(&z, t + h)? - self.inverse(&z, t - h)?) / (2.0 * h);
        Ok(-(self.jacobian(x, t)? * dinv))
    }

    fn permutation(&self) -> &Permutation {
        &self.permutation
    }

    fn valid_box(&self) -> &BoxDomain {
        &self.valid_box
    }

    fn image_box(&self) -> &BoxDomain {
        self.image_box.get_or_init(|| self.estimate_image_box())
    }

    fn is_time_dependent(&self) -> bool {
        !self.model.is_time_homogeneous()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_matrix_matches_column_shuffle() {
        let p = Permutation::new(vec![2, 0, 1]).unwrap();
        let m = DMatrix::from_fn(2, 3, |i, j| (10 * i + j) as f64);
        assert_eq!(p.apply_columns(&m), &m * p.matrix());
        assert_eq!(p.inverse().apply_columns(&p.apply_columns(&m)), m);
        assert!(Permutation::new(vec![0, 0]).is_err());
    }

    #[test]
    fn log_chart_round_trip() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 0.8]);
        let c = log_chart(&g, BoxDomain::new(vec![0.1, 0.1], vec![5.0, 5.0]).unwrap()).unwrap();
        for x in sample_interior(c.valid_box(), 50, 3, 0.01) {
            let z = c.forward(&x, 0.0).unwrap();
            assert!((c.inverse(&z, 0.0).unwrap() - &x).amax() < 1e-12);
        }
    }

    #[test]
    fn sqrt_chart_inverse_rejects_nonpositive() {
        let c = sqrt_chart(Arc::new(|_| 0.5), None, BoxDomain::new(vec![0.0], vec![4.0]).unwrap(), 1.0).unwrap();
        assert!(c.inverse(&DVector::from_element(1, -0.1), 0.0).is_err());
        let z = c.forward(&DVector::from_element(1, 1.0), 0.0).unwrap();
        assert!((z[0] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn inverted_heisenberg_jacobian() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        let c = heisenberg_chart(&a, BoxDomain::new(vec![-2.0, -2.0, -5.0], vec![2.0, 2.0, 5.0]).unwrap()).unwrap();
        let inv = c.inverted();
        let x = DVector::from_vec(vec![0.5, -1.0, 0.2]);
        let z = c.forward(&x, 0.0).unwrap();
        let prod = c.jacobian(&x, 0.0).unwrap() * inv.jacobian(&z, 0.0).unwrap();
        assert!((prod - DMatrix::identity(3, 3)).amax() < 1e-14);
    }

    #[test]
    fn unknown_chart_id() {
        let p = ChartParams::Identity {
            domain: BoxDomain::new(vec![0.0], vec![1.0]).unwrap(),
            d: 1,
        };
        assert!(matches!(closed_form_diffeo("nope", &p), Err(Error::UnknownModel(_))));
    }
}
