//! SDE coefficient bundles, the Itô ↔ Stratonovich drift conversion and the
//! change of variables under a time-dependent chart.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::diffeo::Chart;
use crate::error::{Error, Result, Witness};
use crate::numerics::{
    self, column_jacobians, numerical_rank, sample_space_time, BoxDomain, JacobianMode, JacobianSpec,
};

pub type VectorField = Arc<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>;
/// Returns `[∇σ_1, …, ∇σ_d]`, each `p×p`.
pub type ColumnJacobianField = Arc<dyn Fn(&DVector<f64>, f64) -> Vec<DMatrix<f64>> + Send + Sync>;
pub type TryVectorField = Arc<dyn Fn(&DVector<f64>, f64) -> Result<DVector<f64>> + Send + Sync>;

/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOL: f64 = 1e-8;

const RANK_SAMPLES: usize = 100;
const RANK_SEED: u64 = 0x5eed_0001;

/// Itô diffusion `dX = b(X,t) dt + σ(X,t) dW` on an open box.
#[derive(Clone)]
pub struct SdeModel {
    name: String,
    p: usize,
    d: usize,
    r: usize,
    domain: BoxDomain,
    horizon: f64,
    time_homogeneous: bool,
    sigma: MatrixField,
    drift: VectorField,
    sigma_jacobians: Option<ColumnJacobianField>,
    sigma_dt: Option<MatrixField>,
    drift_jacobian: Option<MatrixField>,
    coefficient_floor: Option<DVector<f64>>,
    jacobian_spec: JacobianSpec,
}

impl fmt::Debug for SdeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeModel")
            .field("name", &self.name)
            .field("p", &self.p)
            .field("d", &self.d)
            .field("r", &self.r)
            .field("domain", &self.domain)
            .field("horizon", &self.horizon)
            .field("time_homogeneous", &self.time_homogeneous)
            .field("analytic_sigma_jacobian", &self.sigma_jacobians.is_some())
            .finish()
    }
}

pub struct SdeModelBuilder {
    name: String,
    p: usize,
    d: usize,
    r: usize,
    domain: Option<BoxDomain>,
    horizon: f64,
    time_homogeneous: bool,
    sigma: Option<MatrixField>,
    drift: Option<VectorField>,
    stratonovich: Option<VectorField>,
    sigma_jacobians: Option<ColumnJacobianField>,
    sigma_dt: Option<MatrixField>,
    drift_jacobian: Option<MatrixField>,
    coefficient_floor: Option<DVector<f64>>,
    jacobian_spec: JacobianSpec,
    verify_rank: bool,
}

impl SdeModelBuilder {
    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn domain(mut self, domain: BoxDomain) -> Self {
        self.domain = Some(domain);
        self
    }

    pub fn horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn time_homogeneous(mut self, flag: bool) -> Self {
        self.time_homogeneous = flag;
        self
    }

    pub fn sigma<F>(mut self, f: F) -> Self
    where
        F: Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.sigma = Some(Arc::new(f));
        self
    }

    /// Itô drift `b`.
    pub fn drift<F>(mut self, f: F) -> Self
    where
        F: Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
    {
        self.drift = Some(Arc::new(f));
        self
    }

    /// Stratonovich drift `h`; the Itô drift is derived from it.
    pub fn stratonovich_drift<F>(mut self, f: F) -> Self
    where
        F: Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
    {
        self.stratonovich = Some(Arc::new(f));
        self
    }

    pub fn sigma_jacobians<F>(mut self, f: F) -> Self
    where
        F: Fn(&DVector<f64>, f64) -> Vec<DMatrix<f64>> + Send + Sync + 'static,
    {
        self.sigma_jacobians = Some(Arc::new(f));
        self
    }

    pub fn sigma_time_derivative<F>(mut self, f: F) -> Self
    where
        F: Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.sigma_dt = Some(Arc::new(f));
        self
    }

    pub fn drift_jacobian<F>(mut self, f: F) -> Self
    where
        F: Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.drift_jacobian = Some(Arc::new(f));
        self
    }

    /// Lower clamp applied to the state before the time-stepping baselines
    /// evaluate coefficients (full truncation). Coordinates with a floor are
    /// not stopped at the lower face of the domain by those schemes.
    pub fn coefficient_floor(mut self, floor: Vec<f64>) -> Self {
        self.coefficient_floor = Some(DVector::from_vec(floor));
        self
    }

    pub fn jacobian_spec(mut self, spec: JacobianSpec) -> Self {
        self.jacobian_spec = spec;
        self
    }

    /// Skips the sampled rank verification (used for derived models).
    pub fn skip_rank_check(mut self) -> Self {
        self.verify_rank = false;
        self
    }

    pub fn build(self) -> Result<SdeModel> {
        let (p, d, r) = (self.p, self.d, self.r);
        if p == 0 || d == 0 || r == 0 || r > p.min(d) {
            return Err(Error::InvalidArgument(format!(
                "dimensions p={p}, d={d}, r={r} violate 1 <= r <= min(p, d)"
            )));
        }
        let domain = self
            .domain
            .ok_or_else(|| Error::InvalidArgument("model domain not set".into()))?;
        if domain.dim() != p {
            return Err(Error::InvalidArgument(format!(
                "domain has dimension {}, state has {p}",
                domain.dim()
            )));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::InvalidArgument(format!("horizon {} must be positive", self.horizon)));
        }
        self.jacobian_spec.validate()?;
        let sigma = self
            .sigma
            .ok_or_else(|| Error::InvalidArgument("diffusion coefficient not set".into()))?;
        let mut model = SdeModel {
            name: self.name,
            p,
            d,
            r,
            domain,
            horizon: self.horizon,
            time_homogeneous: self.time_homogeneous,
            sigma,
            drift: Arc::new(move |_x: &DVector<f64>, _t: f64| DVector::zeros(p)),
            sigma_jacobians: self.sigma_jacobians,
            sigma_dt: self.sigma_dt,
            drift_jacobian: self.drift_jacobian,
            coefficient_floor: self.coefficient_floor,
            jacobian_spec: self.jacobian_spec,
        };
        model.drift = match (self.drift, self.stratonovich) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidArgument(
                    "give either the Itô or the Stratonovich drift, not both".into(),
                ))
            }
            (Some(b), None) => b,
            (None, Some(h)) => {
                let m = model.clone();
                Arc::new(move |x: &DVector<f64>, t: f64| h(x, t) + m.unchecked_ito_correction(x, t))
            }
            (None, None) => return Err(Error::InvalidArgument("drift not set".into())),
        };
        if let Some(floor) = &model.coefficient_floor {
            if floor.len() != p {
                return Err(Error::InvalidArgument("coefficient floor length mismatch".into()));
            }
        }
        model.check_shapes()?;
        if self.verify_rank {
            model.verify_rank()?;
        }
        Ok(model)
    }
}

impl SdeModel {
    pub fn builder(p: usize, d: usize, r: usize) -> SdeModelBuilder {
        SdeModelBuilder {
            name: "model".into(),
            p,
            d,
            r,
            domain: None,
            horizon: 1.0,
            time_homogeneous: true,
            sigma: None,
            drift: None,
            stratonovich: None,
            sigma_jacobians: None,
            sigma_dt: None,
            drift_jacobian: None,
            coefficient_floor: None,
            jacobian_spec: JacobianSpec::default(),
            verify_rank: true,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn is_time_homogeneous(&self) -> bool {
        self.time_homogeneous
    }

    pub fn jacobian_spec(&self) -> JacobianSpec {
        self.jacobian_spec
    }

    pub fn has_analytic_sigma_jacobian(&self) -> bool {
        self.sigma_jacobians.is_some()
    }

    pub fn coefficient_floor(&self) -> Option<&DVector<f64>> {
        self.coefficient_floor.as_ref()
    }

    /// Same model with a different derivative policy.
    pub fn with_jacobian_spec(&self, spec: JacobianSpec) -> SdeModel {
        let mut m = self.clone();
        m.jacobian_spec = spec;
        m
    }

    /// Same coefficients with a replaced Itô drift.
    pub fn with_drift(&self, drift: VectorField) -> SdeModel {
        let mut m = self.clone();
        m.drift = drift;
        m.drift_jacobian = None;
        m
    }

    pub fn sigma(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        (self.sigma)(x, t)
    }

    /// Itô drift `b`.
    pub fn drift(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        (self.drift)(x, t)
    }

    pub fn sigma_field(&self) -> MatrixField {
        self.sigma.clone()
    }

    pub fn drift_field(&self) -> VectorField {
        self.drift.clone()
    }

    fn use_analytic(&self) -> bool {
        self.jacobian_spec.mode == JacobianMode::AnalyticCallback
    }

    /// `[∇σ_1, …, ∇σ_d]` at `(x, t)`.
    pub fn sigma_column_jacobians(&self, x: &DVector<f64>, t: f64) -> Result<Vec<DMatrix<f64>>> {
        match (&self.sigma_jacobians, self.use_analytic()) {
            (Some(f), true) => Ok(f(x, t)),
            _ => {
                let s = self.sigma.clone();
                column_jacobians(move |y, u| s(y, u), x, t, self.jacobian_spec.fd_step, Some(&self.domain))
            }
        }
    }

    /// `∂_t σ` at `(x, t)`; zero for time-homogeneous models.
    pub fn sigma_time_derivative(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        if self.time_homogeneous {
            return Ok(DMatrix::zeros(self.p, self.d));
        }
        if let (Some(f), true) = (&self.sigma_dt, self.use_analytic()) {
            return Ok(f(x, t));
        }
        let h = self.jacobian_spec.fd_step * t.abs().max(1.0);
        let d = (self.sigma(x, t + h) - self.sigma(x, t - h)) / (2.0 * h);
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("∂tσ at {}", Witness::new(x, t))));
        }
        Ok(d)
    }

    /// `∇b` at `(x, t)`.
    pub fn drift_jacobian(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        if let (Some(f), true) = (&self.drift_jacobian, self.use_analytic()) {
            return Ok(f(x, t));
        }
        let b = self.drift.clone();
        numerics::jacobian(move |y, u| b(y, u), x, t, self.jacobian_spec.fd_step, Some(&self.domain))
    }

    /// `½ Σ_j (∇σ_j) σ_j`.
    pub fn ito_correction(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let sigma = self.sigma(x, t);
        let jacs = self.sigma_column_jacobians(x, t)?;
        Ok(correction_from(&sigma, &jacs))
    }

    // Used when the drift is defined through `h`; stencils are not domain-checked.
    fn unchecked_ito_correction(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let sigma = self.sigma(x, t);
        let jacs = match &self.sigma_jacobians {
            Some(f) => f(x, t),
            None => {
                let s = self.sigma.clone();
                column_jacobians(move |y, u| s(y, u), x, t, self.jacobian_spec.fd_step, None)
                    .unwrap_or_else(|_| vec![DMatrix::from_element(self.p, self.p, f64::NAN); self.d])
            }
        };
        correction_from(&sigma, &jacs)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = self.domain.center();
        let s = self.sigma(&c, 0.0);
        if s.shape() != (self.p, self.d) {
            return Err(Error::InvalidArgument(format!(
                "σ has shape {:?}, expected ({}, {})",
                s.shape(),
                self.p,
                self.d
            )));
        }
        let b = self.drift(&c, 0.0);
        if b.len() != self.p {
            return Err(Error::InvalidArgument(format!("drift has length {}, expected {}", b.len(), self.p)));
        }
        if let Some(f) = &self.sigma_jacobians {
            let j = f(&c, 0.0);
            if j.len() != self.d || j.iter().any(|m| m.shape() != (self.p, self.p)) {
                return Err(Error::InvalidArgument("analytic σ Jacobian has wrong shape".into()));
            }
        }
        Ok(())
    }

    /// Checks that σ has numerical rank `r` at sampled interior points.
    pub fn verify_rank(&self) -> Result<()> {
        let samples = sample_space_time(
            &self.domain,
            0.0,
            self.horizon,
            self.time_homogeneous,
            RANK_SAMPLES,
            RANK_SEED,
            0.01,
        );
        for (x, t) in samples {
            let found = numerical_rank(&self.sigma(&x, t), RANK_TOL);
            if found != self.r {
                return Err(Error::RankMismatch {
                    declared: self.r,
                    found,
                    witness: Witness::new(&x, t),
                });
            }
        }
        Ok(())
    }
}

fn correction_from(sigma: &DMatrix<f64>, jacs: &[DMatrix<f64>]) -> DVector<f64> {
    let mut acc = DVector::zeros(sigma.nrows());
    for (j, jac) in jacs.iter().enumerate() {
        acc += jac * sigma.column(j);
    }
    acc * 0.5
}

/// Stratonovich drift `h = b − ½ Σ_j (∇σ_j)σ_j`, evaluable on the domain interior.
#[derive(Clone)]
pub struct StratonovichDrift {
    field: TryVectorField,
    domain: Option<BoxDomain>,
    fd_step: f64,
}

impl fmt::Debug for StratonovichDrift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StratonovichDrift").field("domain", &self.domain).finish()
    }
}

impl StratonovichDrift {
    pub fn new(field: TryVectorField, domain: Option<BoxDomain>) -> Self {
        Self {
            field,
            domain,
            fd_step: numerics::DEFAULT_FD_STEP,
        }
    }

    pub fn from_field(field: VectorField, domain: Option<BoxDomain>) -> Self {
        Self::new(Arc::new(move |x: &DVector<f64>, t: f64| Ok(field(x, t))), domain)
    }

    pub fn eval(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let h = (self.field)(x, t)?;
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("Stratonovich drift at {}", Witness::new(x, t))));
        }
        Ok(h)
    }

    pub fn field(&self) -> TryVectorField {
        self.field.clone()
    }

    pub fn domain(&self) -> Option<&BoxDomain> {
        self.domain.as_ref()
    }

    /// `∇h` by central differences.
    pub fn jacobian(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        numerics::try_jacobian(|y, u| self.eval(y, u), x, t, self.fd_step, self.domain.as_ref())
    }

    /// `∂_t h` by central differences.
    pub fn time_derivative(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        numerics::try_time_derivative(|y, u| self.eval(y, u), x, t, self.fd_step)
    }
}

/// `h = b − ½ Σ_j (∇σ_j)σ_j`; analytic σ Jacobians are used when available.
pub fn ito_to_stratonovich(model: &SdeModel) -> StratonovichDrift {
    let m = model.clone();
    StratonovichDrift::new(
        Arc::new(move |x: &DVector<f64>, t: f64| Ok(m.drift(x, t) - m.ito_correction(x, t)?)),
        Some(model.domain().clone()),
    )
}

/// Inverse of [`ito_to_stratonovich`]: `b = h + ½ Σ_j (∇σ_j)σ_j` with σ taken from `model`.
pub fn stratonovich_to_ito(model: &SdeModel, h: &StratonovichDrift) -> TryVectorField {
    let m = model.clone();
    let h = h.clone();
    Arc::new(move |x: &DVector<f64>, t: f64| Ok(h.eval(x, t)? + m.ito_correction(x, t)?))
}

fn nan_vector(n: usize) -> DVector<f64> {
    DVector::from_element(n, f64::NAN)
}

/// Itô drift of `Λ_t(X)` evaluated at the preimage `x`: `∇Λ b + ½ Σ_j σ_jᵀ (∂²Λ) σ_j + ∂_tΛ`.
fn transformed_ito_drift(model: &SdeModel, chart: &dyn Chart, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    let jac = chart.jacobian(x, t)?;
    let sigma = model.sigma(x, t);
    let mut out = &jac * model.drift(x, t) + chart.time_derivative(x, t)?;
    let fd = model.jacobian_spec().fd_step;
    let scale = numerics::vec_inf_norm(x).max(1.0);
    for j in 0..model.d() {
        let v = sigma.column(j).into_owned();
        let vn = numerics::vec_inf_norm(&v);
        if vn == 0.0 {
            continue;
        }
        let eps = fd * scale / vn;
        let jp = chart.jacobian(&(x + &v * eps), t)?;
        let jm = chart.jacobian(&(x - &v * eps), t)?;
        out += ((jp - jm) / (2.0 * eps)) * &v * 0.5;
    }
    Ok(out)
}

/// Change of variables `Z_t = Λ_t(X_t)`.
///
/// The returned model lives on the chart's image box with
/// `σ̂ = {(∇Λ_t) σ π} ∘ Λ̂⁻¹` and the Itô drift from Itô's formula,
/// `b̂ = {(∇Λ_t) b + ½ Σ_j Σ_{i,k} (∂_i∂_kΛ_t) σ_ij σ_kj + ∂_tΛ_t} ∘ Λ̂⁻¹`.
/// Coefficients evaluate to NaN where the chart cannot be inverted.
pub fn transform_sde(model: &SdeModel, chart: Arc<dyn Chart>) -> Result<SdeModel> {
    if chart.dim() != model.p() || chart.permutation().len() != model.d() {
        return Err(Error::InvalidArgument(format!(
            "chart of dimension {} / permutation {} does not fit model p={}, d={}",
            chart.dim(),
            chart.permutation().len(),
            model.p(),
            model.d()
        )));
    }
    // |det ∇Λ| must stay away from zero on the shared region
    if let Some(region) = chart.valid_box().intersect(model.domain()) {
        let samples = sample_space_time(&region, 0.0, model.horizon(), model.is_time_homogeneous() && !chart.is_time_dependent(), 64, 0x5eed_0002, 0.01);
        for (x, t) in samples {
            let det = chart.jacobian(&x, t)?.determinant();
            if det.abs() < 1e-12 {
                return Err(Error::SingularJacobian {
                    det,
                    witness: Witness::new(&x, t),
                });
            }
        }
    }
    let p = model.p();
    let (m1, c1) = (model.clone(), chart.clone());
    let sigma = move |z: &DVector<f64>, t: f64| -> DMatrix<f64> {
        let out = c1.inverse(z, t).and_then(|x| {
            let j = c1.jacobian(&x, t)?;
            Ok(j * c1.permutation().apply_columns(&m1.sigma(&x, t)))
        });
        out.unwrap_or_else(|_| DMatrix::from_element(p, m1.d(), f64::NAN))
    };
    let (m2, c2) = (model.clone(), chart.clone());
    let drift = move |z: &DVector<f64>, t: f64| -> DVector<f64> {
        c2.inverse(z, t)
            .and_then(|x| transformed_ito_drift(&m2, c2.as_ref(), &x, t))
            .unwrap_or_else(|_| nan_vector(p))
    };
    SdeModel::builder(p, model.d(), model.r())
        .name(format!("{} (transformed)", model.name()))
        .domain(chart.image_box().clone())
        .horizon(model.horizon())
        .time_homogeneous(model.is_time_homogeneous() && !chart.is_time_dependent())
        .sigma(sigma)
        .drift(drift)
        .jacobian_spec(JacobianSpec::central_difference())
        .skip_rank_check()
        .build()
}

/// Stratonovich drift in chart coordinates, `ĥ = {(∇Λ_t) h + ∂_tΛ_t} ∘ Λ̂⁻¹`.
pub fn transform_stratonovich_drift(h: &StratonovichDrift, chart: Arc<dyn Chart>) -> StratonovichDrift {
    let h = h.clone();
    let c = chart.clone();
    StratonovichDrift::new(
        Arc::new(move |z: &DVector<f64>, t: f64| {
            let x = c.inverse(z, t)?;
            Ok(c.jacobian(&x, t)? * h.eval(&x, t)? + c.time_derivative(&x, t)?)
        }),
        Some(chart.image_box().clone()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffeo::Diffeomorphism;

    fn constant_model() -> SdeModel {
        SdeModel::builder(2, 2, 2)
            .domain(BoxDomain::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap())
            .sigma(|_, _| DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]))
            .drift(|x, _| DVector::from_vec(vec![-x[0], x[0] * x[1]]))
            .build()
            .unwrap()
    }

    #[test]
    fn constant_sigma_has_equal_drifts() {
        let m = constant_model();
        let h = ito_to_stratonovich(&m);
        let x = DVector::from_vec(vec![0.2, -0.3]);
        assert!((h.eval(&x, 0.0).unwrap() - m.drift(&x, 0.0)).amax() < 1e-12);
        let b = stratonovich_to_ito(&m, &h);
        assert!((b(&x, 0.0).unwrap() - m.drift(&x, 0.0)).amax() < 1e-12);
    }

    #[test]
    fn scalar_square_root_correction() {
        // σ = s√φ gives h = b − s²/4
        let s = 0.7;
        let m = SdeModel::builder(1, 1, 1)
            .domain(BoxDomain::new(vec![0.1], vec![5.0]).unwrap())
            .sigma(move |x, _| DMatrix::from_element(1, 1, s * x[0].sqrt()))
            .drift(|x, _| DVector::from_element(1, 1.0 - x[0]))
            .jacobian_spec(JacobianSpec::central_difference())
            .build()
            .unwrap();
        let h = ito_to_stratonovich(&m);
        for v in [0.3, 1.0, 2.5, 4.0] {
            let x = DVector::from_element(1, v);
            let got = h.eval(&x, 0.0).unwrap()[0];
            assert!((got - (1.0 - v - s * s / 4.0)).abs() < 1e-9, "{got}");
        }
    }

    #[test]
    fn rank_mismatch_detected() {
        let err = SdeModel::builder(2, 2, 2)
            .domain(BoxDomain::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap())
            .sigma(|_, _| DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]))
            .drift(|_, _| DVector::zeros(2))
            .build()
            .unwrap_err();
        assert!(matches!(err, Error::RankMismatch { declared: 2, found: 1, .. }));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let err = SdeModel::builder(2, 1, 1)
            .domain(BoxDomain::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap())
            .sigma(|_, _| DMatrix::from_element(2, 2, 1.0))
            .drift(|_, _| DVector::zeros(2))
            .build()
            .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn identity_transform_leaves_model_unchanged() {
        let m = constant_model();
        let id = Arc::new(Diffeomorphism::identity(m.domain().clone(), 2));
        let t = transform_sde(&m, id).unwrap();
        for x in numerics::sample_interior(m.domain(), 20, 1, 0.05) {
            assert!((t.sigma(&x, 0.0) - m.sigma(&x, 0.0)).amax() < 1e-12);
            assert!((t.drift(&x, 0.0) - m.drift(&x, 0.0)).amax() < 1e-9);
        }
    }
}
