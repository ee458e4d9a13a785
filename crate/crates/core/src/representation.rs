//! Assembly of the explicit representation `X_t = φ(Y_t, t)` from canonical
//! parameters and a straightening chart.
//!
//! With `σ̂ = [I_r κ̄; 0 0]` and `ĥ = (θ̄ + β̄ z̄, h̃)` the deterministic
//! block solves `X̃' = h̃(X̃, t)`, the semigroup block `dT/dt = −T β̄`, and
//! `c̄' = θ̄ + β̄ c̄` from `c̄(s) = Λ̄_s(x)`. Then
//! `U_{s,t} = [[T, Tκ̄_t − κ̄_s], [0, I]]`,
//! `U⁻¹_{s,t} = [[T⁻¹, T⁻¹κ̄_s − κ̄_t], [0, I]]`, `G(t) = [I_r | κ̄_t]` and
//! `φ(y, t) = Λ_t⁻¹(c̄(t) + G(t) U⁻¹_{s,t} y, X̃_t)`.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::commutator::{CheckReport, ResidualTally, SAMPLE_SEED};
use crate::diffeo::Chart;
use crate::error::{Error, Result, Witness};
use crate::model::{ito_to_stratonovich, SdeModel, StratonovichDrift};
use crate::numerics::{inf_norm, rk4_span, vec_inf_norm, BoxDomain, Grid, LowDiscrepancy};

/// Function of the deterministic coordinates `φ̃` and time.
pub type TildeVectorFn = Arc<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
pub type TildeMatrixFn = Arc<dyn Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>;

/// RK4 substeps per grid interval.
pub const DEFAULT_SUBSTEPS: usize = 16;
/// Semigroup residual tolerance used by [`validate_representation`].
pub const SEMIGROUP_TOL: f64 = 1e-7;

/// Free functions `κ̄, β̄, θ̄, h̃` of the representable family. All take
/// `(φ̃, t)` only.
#[derive(Clone)]
pub struct CanonicalParams {
    p: usize,
    d: usize,
    r: usize,
    beta: TildeMatrixFn,
    theta: TildeVectorFn,
    h_tilde: Option<TildeVectorFn>,
    kappa: Option<TildeMatrixFn>,
}

impl std::fmt::Debug for CanonicalParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CanonicalParams")
            .field("p", &self.p)
            .field("d", &self.d)
            .field("r", &self.r)
            .finish()
    }
}

impl CanonicalParams {
    pub fn new(p: usize, d: usize, r: usize, beta: TildeMatrixFn, theta: TildeVectorFn) -> Self {
        Self {
            p,
            d,
            r,
            beta,
            theta,
            h_tilde: None,
            kappa: None,
        }
    }

    /// Constant `β̄, θ̄` with `h̃ = 0`, `κ̄ = 0`.
    pub fn constant(p: usize, d: usize, r: usize, beta: DMatrix<f64>, theta: DVector<f64>) -> Self {
        Self::new(
            p,
            d,
            r,
            Arc::new(move |_: &DVector<f64>, _| beta.clone()),
            Arc::new(move |_: &DVector<f64>, _| theta.clone()),
        )
    }

    pub fn zero(p: usize, d: usize, r: usize) -> Self {
        Self::constant(p, d, r, DMatrix::zeros(r, r), DVector::zeros(r))
    }

    pub fn with_h_tilde(mut self, f: TildeVectorFn) -> Self {
        self.h_tilde = Some(f);
        self
    }

    pub fn with_kappa(mut self, f: TildeMatrixFn) -> Self {
        self.kappa = Some(f);
        self
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

    pub fn beta(&self, tilde: &DVector<f64>, t: f64) -> DMatrix<f64> {
        (self.beta)(tilde, t)
    }

    pub fn theta(&self, tilde: &DVector<f64>, t: f64) -> DVector<f64> {
        (self.theta)(tilde, t)
    }

    pub fn h_tilde(&self, tilde: &DVector<f64>, t: f64) -> DVector<f64> {
        match &self.h_tilde {
            Some(f) => f(tilde, t),
            None => DVector::zeros(self.p - self.r),
        }
    }

    /// `r × (d − r)`.
    pub fn kappa(&self, tilde: &DVector<f64>, t: f64) -> DMatrix<f64> {
        match &self.kappa {
            Some(f) => f(tilde, t),
            None => DMatrix::zeros(self.r, self.d - self.r),
        }
    }

    /// Dimension and shape checks at `(φ̃, t)`.
    pub fn validate_at(&self, tilde: &DVector<f64>, t: f64) -> Result<()> {
        let (p, d, r) = (self.p, self.d, self.r);
        if r == 0 || r > p.min(d) {
            return Err(Error::InvalidArgument(format!("r = {r} incompatible with p = {p}, d = {d}")));
        }
        if tilde.len() != p - r {
            return Err(Error::InvalidArgument("φ̃ has the wrong length".into()));
        }
        let shapes = [
            ("β̄", self.beta(tilde, t).shape(), (r, r)),
            ("θ̄", (self.theta(tilde, t).len(), 1), (r, 1)),
            ("h̃", (self.h_tilde(tilde, t).len(), 1), (p - r, 1)),
            ("κ̄", self.kappa(tilde, t).shape(), (r, d - r)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::InvalidArgument(format!("{name} has shape {got:?}, expected {want:?}")));
            }
        }
        Ok(())
    }
}

/// ODE state at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct RepState {
    pub t: f64,
    pub x_tilde: DVector<f64>,
    /// `T_{s,t}`.
    pub t_mat: DMatrix<f64>,
    /// `T⁻¹_{s,t}`, integrated alongside `T`.
    pub t_inv: DMatrix<f64>,
    pub c_bar: DVector<f64>,
}

fn pack(state: &RepState) -> DVector<f64> {
    let mut v = Vec::new();
    v.extend(state.x_tilde.iter());
    v.extend(state.t_mat.iter());
    v.extend(state.t_inv.iter());
    v.extend(state.c_bar.iter());
    DVector::from_vec(v)
}

fn unpack(v: &DVector<f64>, t: f64, p: usize, r: usize) -> RepState {
    let q = p - r;
    let s = v.as_slice();
    RepState {
        t,
        x_tilde: DVector::from_column_slice(&s[..q]),
        t_mat: DMatrix::from_column_slice(r, r, &s[q..q + r * r]),
        t_inv: DMatrix::from_column_slice(r, r, &s[q + r * r..q + 2 * r * r]),
        c_bar: DVector::from_column_slice(&s[q + 2 * r * r..]),
    }
}

/// Explicit representation started from `(x, s)`.
#[derive(Clone)]
pub struct Representation {
    params: CanonicalParams,
    chart: Arc<dyn Chart>,
    x: DVector<f64>,
    s: f64,
    grid: Grid,
    substeps: usize,
    nodes: Vec<RepState>,
    kappa_s: DMatrix<f64>,
    domain: BoxDomain,
    cbar_offset: Option<DVector<f64>>,
}

impl std::fmt::Debug for Representation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Representation")
            .field("x", &self.x)
            .field("s", &self.s)
            .field("nodes", &self.nodes.len())
            .field("valid_until", &self.valid_until())
            .finish()
    }
}

/// Solves the canonical ODE system on `grid` (which must start at `s`).
///
/// Validity ends at the last node before `X̃` leaves the chart's image box,
/// `|det ∇Λ_t|` drops below `1e-10`, or `φ(0, t)` leaves the chart's valid
/// box; that truncation is recorded in [`Representation::valid_until`].
pub fn build_representation(
    params: &CanonicalParams,
    chart: Arc<dyn Chart>,
    x: &DVector<f64>,
    s: f64,
    grid: &Grid,
) -> Result<Representation> {
    build_representation_with(params, chart, x, s, grid, DEFAULT_SUBSTEPS)
}

pub fn build_representation_with(
    params: &CanonicalParams,
    chart: Arc<dyn Chart>,
    x: &DVector<f64>,
    s: f64,
    grid: &Grid,
    substeps: usize,
) -> Result<Representation> {
    let (p, r) = (params.p(), params.r());
    if chart.dim() != p || x.len() != p || chart.permutation().len() != params.d() {
        return Err(Error::InvalidArgument("representation dimensions disagree".into()));
    }
    if (grid.start() - s).abs() > 1e-12 {
        return Err(Error::InvalidGrid(format!("grid starts at {}, not at s = {s}", grid.start())));
    }
    let z0 = chart.forward(x, s)?;
    let x_tilde = z0.rows(r, p - r).into_owned();
    params.validate_at(&x_tilde, s)?;
    let first = RepState {
        t: s,
        x_tilde: x_tilde.clone(),
        t_mat: DMatrix::identity(r, r),
        t_inv: DMatrix::identity(r, r),
        c_bar: z0.rows(0, r).into_owned(),
    };
    let kappa_s = params.kappa(&x_tilde, s);
    let mut rep = Representation {
        params: params.clone(),
        domain: chart.valid_box().clone(),
        chart,
        x: x.clone(),
        s,
        grid: grid.clone(),
        substeps: substeps.max(1),
        nodes: vec![first],
        kappa_s,
        cbar_offset: None,
    };
    for k in 1..grid.len() {
        let prev = rep.nodes[k - 1].clone();
        let next = match rep.integrate(&prev, grid.nodes()[k], rep.substeps) {
            Ok(st) => st,
            Err(_) => break,
        };
        if !rep.node_is_valid(&next) {
            break;
        }
        rep.nodes.push(next);
    }
    if rep.nodes.len() < 2 {
        return Err(Error::OdeEscape { time: grid.nodes()[1] });
    }
    Ok(rep)
}

impl Representation {
    pub fn params(&self) -> &CanonicalParams {
        &self.params
    }

    pub fn chart(&self) -> &Arc<dyn Chart> {
        &self.chart
    }

    pub fn start(&self) -> (&DVector<f64>, f64) {
        (&self.x, self.s)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn p(&self) -> usize {
        self.params.p()
    }

    pub fn d(&self) -> usize {
        self.params.d()
    }

    pub fn r(&self) -> usize {
        self.params.r()
    }

    /// States at the valid grid nodes.
    pub fn nodes(&self) -> &[RepState] {
        &self.nodes
    }

    /// Last grid time inside the validity region.
    pub fn valid_until(&self) -> f64 {
        self.nodes.last().map(|n| n.t).unwrap_or(self.s)
    }

    /// Box where `φ` values count as inside the model domain.
    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    /// Restricts the exit box (intersected with the chart's valid box).
    pub fn with_domain(&self, domain: &BoxDomain) -> Result<Representation> {
        let mut rep = self.clone();
        rep.domain = self
            .chart
            .valid_box()
            .intersect(domain)
            .ok_or_else(|| Error::InvalidArgument("exit box does not meet the chart".into()))?;
        Ok(rep)
    }

    /// Copy whose `c̄(t)` is shifted by a constant; used to exercise the
    /// residual checks on a broken representation.
    pub fn with_cbar_offset(&self, offset: DVector<f64>) -> Representation {
        let mut rep = self.clone();
        rep.cbar_offset = Some(offset);
        rep
    }

    pub fn kappa_start(&self) -> &DMatrix<f64> {
        &self.kappa_s
    }

    fn rhs(&self, y: &DVector<f64>, t: f64) -> DVector<f64> {
        let (p, r) = (self.p(), self.r());
        let st = unpack(y, t, p, r);
        let beta = self.params.beta(&st.x_tilde, t);
        let theta = self.params.theta(&st.x_tilde, t);
        let d = RepState {
            t,
            x_tilde: self.params.h_tilde(&st.x_tilde, t),
            t_mat: -(&st.t_mat * &beta),
            t_inv: &beta * &st.t_inv,
            c_bar: theta + &beta * &st.c_bar,
        };
        pack(&d)
    }

    fn integrate(&self, from: &RepState, t: f64, steps: usize) -> Result<RepState> {
        if t == from.t {
            return Ok(from.clone());
        }
        let y = rk4_span(|v, u| self.rhs(v, u), &pack(from), from.t, t, steps)?;
        Ok(unpack(&y, t, self.p(), self.r()))
    }

    fn node_is_valid(&self, st: &RepState) -> bool {
        let (p, r) = (self.p(), self.r());
        let image = self.chart.image_box();
        for i in 0..(p - r) {
            let v = st.x_tilde[i];
            if !(v > image.lower()[r + i] && v < image.upper()[r + i]) {
                return false;
            }
        }
        let z = self.join(&st.c_bar, &st.x_tilde);
        match self.chart.inverse(&z, st.t) {
            Ok(x) => {
                self.chart.valid_box().contains(&x)
                    && self
                        .chart
                        .jacobian(&x, st.t)
                        .map(|j| j.determinant().abs() >= 1e-10)
                        .unwrap_or(false)
            }
            Err(_) => false,
        }
    }

    fn join(&self, bar: &DVector<f64>, tilde: &DVector<f64>) -> DVector<f64> {
        let r = self.r();
        let mut z = DVector::zeros(self.p());
        z.rows_mut(0, r).copy_from(bar);
        z.rows_mut(r, tilde.len()).copy_from(tilde);
        z
    }

    /// Index of the node the state at `t` is integrated from.
    pub fn base_node(&self, t: f64) -> Result<usize> {
        if !(t >= self.s && t <= self.valid_until()) {
            return Err(Error::OdeEscape { time: t });
        }
        let idx = self.nodes.partition_point(|n| n.t <= t);
        Ok(idx.saturating_sub(1).min(self.nodes.len() - 1))
    }

    /// State at an arbitrary time, integrated from the preceding node with a
    /// fixed number of substeps (so it is smooth in `t`).
    pub fn state_at(&self, t: f64) -> Result<RepState> {
        let k = self.base_node(t)?;
        self.state_from(k, t)
    }

    /// State at `t` integrated from node `k` (backwards if `t` precedes it).
    pub fn state_from(&self, k: usize, t: f64) -> Result<RepState> {
        let node = self.nodes.get(k).ok_or(Error::OdeEscape { time: t })?;
        self.integrate(node, t, self.substeps)
    }

    /// `U_{s,t}` assembled from a state.
    pub fn u_of(&self, st: &RepState) -> DMatrix<f64> {
        let (d, r) = (self.d(), self.r());
        let mut u = DMatrix::identity(d, d);
        u.view_mut((0, 0), (r, r)).copy_from(&st.t_mat);
        if d > r {
            let kt = self.params.kappa(&st.x_tilde, st.t);
            u.view_mut((0, r), (r, d - r))
                .copy_from(&(&st.t_mat * kt - &self.kappa_s));
        }
        u
    }

    /// `U⁻¹_{s,t}` in closed block form.
    pub fn u_inv_of(&self, st: &RepState) -> DMatrix<f64> {
        let (d, r) = (self.d(), self.r());
        let mut u = DMatrix::identity(d, d);
        u.view_mut((0, 0), (r, r)).copy_from(&st.t_inv);
        if d > r {
            let kt = self.params.kappa(&st.x_tilde, st.t);
            u.view_mut((0, r), (r, d - r))
                .copy_from(&(&st.t_inv * &self.kappa_s - kt));
        }
        u
    }

    /// `G(t) = [I_r | κ̄_t]`.
    pub fn g_of(&self, st: &RepState) -> DMatrix<f64> {
        let (d, r) = (self.d(), self.r());
        let mut g = DMatrix::zeros(r, d);
        g.view_mut((0, 0), (r, r)).fill_with_identity();
        if d > r {
            g.view_mut((0, r), (r, d - r))
                .copy_from(&self.params.kappa(&st.x_tilde, st.t));
        }
        g
    }

    /// `G U⁻¹ = T⁻¹ [I_r | κ̄_s]`, the linear part of `y ↦ z̄`.
    pub fn linear_map_of(&self, st: &RepState) -> DMatrix<f64> {
        let (d, r) = (self.d(), self.r());
        let mut m = DMatrix::zeros(r, d);
        m.view_mut((0, 0), (r, r)).copy_from(&st.t_inv);
        if d > r {
            m.view_mut((0, r), (r, d - r)).copy_from(&(&st.t_inv * &self.kappa_s));
        }
        m
    }

    /// `c̄(t)` including any configured offset.
    pub fn c_bar_of(&self, st: &RepState) -> DVector<f64> {
        match &self.cbar_offset {
            Some(o) => &st.c_bar + o,
            None => st.c_bar.clone(),
        }
    }

    pub fn u(&self, t: f64) -> Result<DMatrix<f64>> {
        Ok(self.u_of(&self.state_at(t)?))
    }

    pub fn u_inv(&self, t: f64) -> Result<DMatrix<f64>> {
        Ok(self.u_inv_of(&self.state_at(t)?))
    }

    pub fn g(&self, t: f64) -> Result<DMatrix<f64>> {
        Ok(self.g_of(&self.state_at(t)?))
    }

    /// Chart coordinates `(c̄ + G U⁻¹ y, X̃_t)`.
    pub fn chart_point(&self, st: &RepState, y: &DVector<f64>) -> DVector<f64> {
        let bar = self.c_bar_of(st) + self.linear_map_of(st) * y;
        self.join(&bar, &st.x_tilde)
    }

    pub fn phi_from(&self, st: &RepState, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.d() {
            return Err(Error::InvalidArgument(format!("y has length {}, expected {}", y.len(), self.d())));
        }
        if st.t == self.s && self.cbar_offset.is_none() && y.iter().all(|&v| v == 0.0) {
            return Ok(self.x.clone());
        }
        self.chart.inverse(&self.chart_point(st, y), st.t)
    }

    /// `φ(y, t)`.
    pub fn phi(&self, y: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        self.phi_from(&self.state_at(t)?, y)
    }

    /// `U_{u,t}` for grid nodes `u_idx ≤ t_idx`, from a fresh solve started at `u`.
    pub fn transition(&self, u_idx: usize, t_idx: usize) -> Result<DMatrix<f64>> {
        let (d, r) = (self.d(), self.r());
        let start = self.nodes.get(u_idx).ok_or(Error::OdeEscape { time: f64::NAN })?;
        let mut st = RepState {
            t: start.t,
            x_tilde: start.x_tilde.clone(),
            t_mat: DMatrix::identity(r, r),
            t_inv: DMatrix::identity(r, r),
            c_bar: start.c_bar.clone(),
        };
        for k in (u_idx + 1)..=t_idx {
            let t = self.nodes.get(k).ok_or(Error::OdeEscape { time: f64::NAN })?.t;
            st = self.integrate(&st, t, self.substeps)?;
        }
        let mut u = DMatrix::identity(d, d);
        u.view_mut((0, 0), (r, r)).copy_from(&st.t_mat);
        if d > r {
            let ku = self.params.kappa(&start.x_tilde, start.t);
            let kt = self.params.kappa(&st.x_tilde, st.t);
            u.view_mut((0, r), (r, d - r)).copy_from(&(&st.t_mat * kt - ku));
        }
        Ok(u)
    }

    /// Node table as CSV: `t, X̃…, T_ij…, c̄…` with `T` row-major.
    pub fn to_csv(&self) -> String {
        let (p, r) = (self.p(), self.r());
        let mut out = String::from("t");
        for i in 0..(p - r) {
            let _ = write!(out, ",xt{}", i + 1);
        }
        for i in 0..r {
            for j in 0..r {
                let _ = write!(out, ",T{}_{}", i + 1, j + 1);
            }
        }
        for i in 0..r {
            let _ = write!(out, ",cbar{}", i + 1);
        }
        out.push('\n');
        for n in &self.nodes {
            let _ = write!(out, "{:.16e}", n.t);
            for v in n.x_tilde.iter() {
                let _ = write!(out, ",{v:.16e}");
            }
            for i in 0..r {
                for j in 0..r {
                    let _ = write!(out, ",{:.16e}", n.t_mat[(i, j)]);
                }
            }
            for v in self.c_bar_of(n).iter() {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
        out
    }
}

/// Scalar case `p = d = r = 1`: `X_t = Λ_t⁻¹[{Λ_s(x) + ∫T θ̄ du + ∫T dW} / T_{s,t}]`.
#[allow(clippy::too_many_arguments)]
pub fn scalar_representation(
    model: &SdeModel,
    beta: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    theta: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    chart: Arc<dyn Chart>,
    x: &DVector<f64>,
    s: f64,
    grid: &Grid,
) -> Result<Representation> {
    if (model.p(), model.d(), model.r()) != (1, 1, 1) {
        return Err(Error::InvalidArgument("scalar representation needs p = d = r = 1".into()));
    }
    let samples = crate::numerics::sample_space_time(
        model.domain(),
        0.0,
        model.horizon(),
        model.is_time_homogeneous(),
        64,
        SAMPLE_SEED,
        0.0,
    );
    for (y, t) in samples {
        let v = model.sigma(&y, t)[(0, 0)];
        if !(v > 0.0) {
            return Err(Error::InvalidArgument(format!("σ = {v} is not positive at {}", Witness::new(&y, t))));
        }
    }
    let params = CanonicalParams::new(
        1,
        1,
        1,
        Arc::new(move |_: &DVector<f64>, t| DMatrix::from_element(1, 1, beta(t))),
        Arc::new(move |_: &DVector<f64>, t| DVector::from_element(1, theta(t))),
    );
    build_representation(&params, chart, x, s, grid)
}

/// Stratonovich drift for which the representation built from `params` and
/// `chart` solves the SDE:
/// `h = [∇Λ_t]⁻¹ {(θ̄ + β̄ Λ̄_t, h̃) − ∂_tΛ_t}` with `φ̃ = Λ̃_t`.
pub fn compatible_drift(params: &CanonicalParams, chart: Arc<dyn Chart>) -> StratonovichDrift {
    let params = params.clone();
    let domain = chart.valid_box().clone();
    StratonovichDrift::new(
        Arc::new(move |x: &DVector<f64>, t: f64| {
            let (p, r) = (params.p(), params.r());
            let z = chart.forward(x, t)?;
            let bar = z.rows(0, r).into_owned();
            let tilde = z.rows(r, p - r).into_owned();
            let mut rhs = DVector::zeros(p);
            rhs.rows_mut(0, r)
                .copy_from(&(params.theta(&tilde, t) + params.beta(&tilde, t) * bar));
            rhs.rows_mut(r, p - r).copy_from(&params.h_tilde(&tilde, t));
            rhs -= chart.time_derivative(x, t)?;
            let jac = chart.jacobian(x, t)?;
            let det = jac.determinant();
            jac.lu().solve(&rhs).ok_or_else(|| Error::SingularJacobian {
                det,
                witness: Witness::new(x, t),
            })
        }),
        Some(domain),
    )
}

/// PDE and semigroup residuals of a representation against a model.
///
/// Families: `grad` = `‖∇_yφ − σ(φ,t)πU⁻¹‖ / (1 + ‖σπU⁻¹‖)`,
/// `time` = `‖∂_tφ − h(φ,t)‖ / (1 + ‖h‖)`, both by central differences, and
/// `semigroup` = `‖U_{s,t} − U_{s,u}U_{u,t}‖` over grid node triples, which
/// must stay below [`SEMIGROUP_TOL`].
pub fn validate_representation(rep: &Representation, model: &SdeModel, n_points: usize, tol: f64) -> CheckReport {
    let h = ito_to_stratonovich(model);
    let d = rep.d();
    let (s, end) = (rep.start().1, rep.valid_until());
    let span = end - s;
    let nodes = rep.nodes().len();
    let mut seq = LowDiscrepancy::new(d + 4, SAMPLE_SEED ^ 0x77);
    let mut tally = ResidualTally::new(
        "representation",
        vec!["grad".into(), "time".into(), "semigroup".into()],
    );
    for _ in 0..n_points.max(1) {
        let u = seq.next_point();
        let t = s + span * (0.02 + 0.96 * u[0]);
        let scale = (t - s).sqrt();
        let y = DVector::from_fn(d, |i, _| scale * (2.0 * u[1 + i] - 1.0));
        let semi = if nodes >= 3 {
            let mut idx = [
                1 + (u[d + 1] * (nodes - 1) as f64) as usize,
                1 + (u[d + 2] * (nodes - 1) as f64) as usize,
            ];
            idx.sort_unstable();
            let (a, b) = (idx[0].min(nodes - 1), idx[1].min(nodes - 1));
            semigroup_residual(rep, a, b).unwrap_or(f64::NAN)
        } else {
            0.0
        };
        match pde_residuals(rep, model, &h, &y, t) {
            Ok((g, tm, x)) => tally.record(&[g, tm, semi], Witness::new(&x, t)),
            Err(_) => tally.skip(),
        }
    }
    tally.finish_per_label(&[tol, tol, SEMIGROUP_TOL])
}

fn semigroup_residual(rep: &Representation, u_idx: usize, t_idx: usize) -> Result<f64> {
    let nodes = rep.nodes();
    let su = rep.u_of(&nodes[u_idx]);
    let st = rep.u_of(&nodes[t_idx]);
    let ut = rep.transition(u_idx, t_idx)?;
    Ok((st - su * ut).amax())
}

fn pde_residuals(
    rep: &Representation,
    model: &SdeModel,
    h: &StratonovichDrift,
    y: &DVector<f64>,
    t: f64,
) -> Result<(f64, f64, DVector<f64>)> {
    let k = rep.base_node(t)?;
    let st = rep.state_from(k, t)?;
    let x = rep.phi_from(&st, y)?;
    if !model.domain().contains(&x) {
        return Err(Error::DomainExit(Witness::new(&x, t)));
    }
    let d = rep.d();
    let mut grad = DMatrix::zeros(rep.p(), d);
    for j in 0..d {
        let hy = 1e-5 * y[j].abs().max(1.0);
        let mut yp = y.clone();
        let mut ym = y.clone();
        yp[j] += hy;
        ym[j] -= hy;
        let col = (rep.phi_from(&st, &yp)? - rep.phi_from(&st, &ym)?) / (2.0 * hy);
        grad.set_column(j, &col);
    }
    let target = rep.chart().permutation().apply_columns(&model.sigma(&x, t)) * rep.u_inv_of(&st);
    let g_res = inf_norm(&(grad - &target)) / (1.0 + inf_norm(&target));
    let ht = 1e-5 * t.abs().max(1.0);
    let plus = rep.phi_from(&rep.state_from(k, t + ht)?, y)?;
    let minus = rep.phi_from(&rep.state_from(k, t - ht)?, y)?;
    let dphi = (plus - minus) / (2.0 * ht);
    let hv = h.eval(&x, t)?;
    let t_res = vec_inf_norm(&(dphi - &hv)) / (1.0 + vec_inf_norm(&hv));
    Ok((g_res, t_res, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffeo::Diffeomorphism;

    fn ou_rep(beta: f64, theta: f64, x: f64) -> Representation {
        let params = CanonicalParams::constant(1, 1, 1, DMatrix::from_element(1, 1, beta), DVector::from_element(1, theta));
        let chart = Arc::new(Diffeomorphism::identity(BoxDomain::new(vec![-50.0], vec![50.0]).unwrap(), 1));
        build_representation(&params, chart, &DVector::from_element(1, x), 0.0, &Grid::uniform(0.0, 1.0, 20).unwrap())
            .unwrap()
    }

    #[test]
    fn scalar_block_closed_forms() {
        let (beta, theta, x) = (-0.8, 0.3, 1.5);
        let rep = ou_rep(beta, theta, x);
        for n in rep.nodes() {
            let e = (beta * n.t).exp();
            assert!((n.t_mat[(0, 0)] - 1.0 / e).abs() < 1e-12);
            assert!((n.t_inv[(0, 0)] - e).abs() < 1e-12);
            let c = e * x + theta * (e - 1.0) / beta;
            assert!((n.c_bar[0] - c).abs() < 1e-12);
        }
    }

    #[test]
    fn phi_at_start_is_x() {
        let rep = ou_rep(-1.0, 0.5, 0.7);
        assert_eq!(rep.phi(&DVector::zeros(1), 0.0).unwrap()[0], 0.7);
        assert_eq!(rep.u(0.0).unwrap(), DMatrix::identity(1, 1));
    }

    #[test]
    fn state_at_off_node_matches_closed_form() {
        let rep = ou_rep(-0.8, 0.3, 1.5);
        let t = 0.4321;
        let st = rep.state_at(t).unwrap();
        assert!((st.t_mat[(0, 0)] - (0.8f64 * t).exp()).abs() < 1e-12);
        assert!(rep.state_at(1.5).is_err());
    }

    #[test]
    fn csv_header() {
        let rep = ou_rep(-0.8, 0.3, 1.5);
        let csv = rep.to_csv();
        assert!(csv.starts_with("t,T1_1,cbar1\n"));
        assert_eq!(csv.lines().count(), 22);
    }
}
