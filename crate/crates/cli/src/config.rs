//! Run configuration: a TOML file plus command-line overrides, resolved into
//! a model, an optional chart and optional canonical parameters.

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use exactsde_core::catalog::{self, MeanOracle};
use exactsde_core::commutator::FD_TOL;
use exactsde_core::diffeo::{flow_straighten, Chart, MapFn};
use exactsde_core::numerics::sample_interior;
use exactsde_core::representation::CanonicalParams;
use exactsde_core::simulate::Scheme;
use exactsde_core::{BoxDomain, Diffeomorphism, Grid, Permutation, SdeModel};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::expr::Expr;
use crate::CliError;

/// Number or expression in a config file.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Num(f64),
    Text(String),
}

impl Scalar {
    fn parse(&self, vars: &[&str]) -> Result<Expr, CliError> {
        match self {
            Scalar::Num(v) => Ok(Expr::Num(*v)),
            Scalar::Text(s) => Ok(Expr::parse(s, vars)?),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Id(String),
    Inline(Box<InlineModel>),
}

/// Coefficients given as expressions in the state variables and `t`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineModel {
    pub name: Option<String>,
    /// State variable names; defaults to `x1, …, xp`.
    pub vars: Option<Vec<String>>,
    /// Rank of σ; defaults to the number of noise columns.
    pub rank: Option<usize>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub horizon: Option<f64>,
    /// `p` rows of `d` entries.
    pub sigma: Vec<Vec<Scalar>>,
    pub drift: Vec<Scalar>,
    /// The drift is the Stratonovich drift `h` rather than the Itô drift.
    #[serde(default)]
    pub stratonovich: bool,
    pub floor: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChartKind {
    /// The catalog's closed form (catalog models only).
    Catalog,
    Identity,
    /// Flow straightening around the anchor (default: the start point).
    Numeric,
    /// `forward`/`inverse` expressions.
    Expr,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartSpec {
    pub kind: ChartKind,
    /// Expressions in the state variables and `t`.
    pub forward: Option<Vec<Scalar>>,
    /// Expressions in `z1, …, zp` and `t`.
    pub inverse: Option<Vec<Scalar>>,
    pub image_lower: Option<Vec<f64>>,
    pub image_upper: Option<Vec<f64>>,
    pub permutation: Option<Vec<usize>>,
    pub anchor: Option<Vec<f64>>,
}

/// Canonical parameters as expressions in `v1, …, v(p−r)` (the
/// deterministic coordinates) and `t`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSpec {
    pub beta: Vec<Vec<Scalar>>,
    pub theta: Vec<Scalar>,
    pub h_tilde: Option<Vec<Scalar>>,
    pub kappa: Option<Vec<Vec<Scalar>>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub x: Option<Vec<f64>>,
    pub s: Option<f64>,
    pub t_end: Option<f64>,
    pub intervals: Option<usize>,
    pub paths: Option<usize>,
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub scheme: Option<String>,
    pub dt: Option<f64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub points: Option<usize>,
    pub target_error: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: Option<ModelSpec>,
    pub chart: Option<ChartSpec>,
    pub params: Option<ParamsSpec>,
    #[serde(default)]
    pub run: RunSpec,
}

impl ConfigFile {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        Ok(toml::from_str(text)?)
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub model: Option<String>,
    pub paths: Option<usize>,
    pub seed: Option<u64>,
    pub dt: Option<f64>,
    pub t_end: Option<f64>,
    pub out: Option<PathBuf>,
    pub scheme: Option<Scheme>,
    pub threads: Option<usize>,
    pub tol: Option<f64>,
}

/// Fully resolved run settings.
pub struct RunConfig {
    pub id: String,
    pub model: SdeModel,
    pub chart: Option<Arc<dyn Chart>>,
    /// Closed-form chart to compare numeric straightening against.
    pub reference_chart: Option<Arc<dyn Chart>>,
    pub params: Option<CanonicalParams>,
    pub mean_oracle: Option<MeanOracle>,
    pub start: DVector<f64>,
    pub s: f64,
    pub t_end: f64,
    pub intervals: usize,
    pub paths: usize,
    pub seed: u64,
    pub tol: f64,
    pub scheme: Scheme,
    pub dt: Option<f64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub points: usize,
    pub target_error: f64,
    pub anchor: DVector<f64>,
    numeric_chart: bool,
    straightened: OnceLock<Arc<dyn Chart>>,
}

pub const DEFAULT_PATHS: usize = 1000;
pub const DEFAULT_INTERVALS: usize = 10;
pub const DEFAULT_POINTS: usize = 100;
pub const DEFAULT_TARGET_ERROR: f64 = 1e-3;

pub fn parse_scheme(s: &str) -> Result<Scheme, CliError> {
    match s {
        "exact" => Ok(Scheme::Exact),
        "euler" => Ok(Scheme::Euler),
        "milstein" => Ok(Scheme::Milstein),
        _ => Err(CliError::Config(format!("unknown scheme `{s}`"))),
    }
}

fn var_names(p: usize, given: Option<&Vec<String>>) -> Result<Vec<String>, CliError> {
    match given {
        Some(v) if v.len() != p => Err(CliError::Config(format!("{} variable names for {p} states", v.len()))),
        Some(v) => {
            if v.iter().any(|n| n == "t") {
                return Err(CliError::Config("`t` is reserved for time".into()));
            }
            Ok(v.clone())
        }
        None => Ok((1..=p).map(|i| format!("x{i}")).collect()),
    }
}

fn with_time(vars: &[String]) -> Vec<&str> {
    vars.iter().map(String::as_str).chain(std::iter::once("t")).collect()
}

fn point(x: &DVector<f64>, t: f64) -> Vec<f64> {
    x.iter().copied().chain(std::iter::once(t)).collect()
}

fn eval_vec(exprs: &[Expr], x: &DVector<f64>, t: f64) -> DVector<f64> {
    let v = point(x, t);
    DVector::from_iterator(exprs.len(), exprs.iter().map(|e| e.eval(&v)))
}

fn eval_mat(exprs: &[Vec<Expr>], rows: usize, cols: usize, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
    let v = point(x, t);
    DMatrix::from_fn(rows, cols, |i, j| exprs[i][j].eval(&v))
}

fn parse_matrix(rows: &[Vec<Scalar>], n_rows: usize, n_cols: usize, vars: &[&str], what: &str) -> Result<Vec<Vec<Expr>>, CliError> {
    if rows.len() != n_rows || rows.iter().any(|r| r.len() != n_cols) {
        return Err(CliError::Config(format!("{what} must be {n_rows}×{n_cols}")));
    }
    rows.iter()
        .map(|r| r.iter().map(|s| s.parse(vars)).collect())
        .collect()
}

fn parse_vector(items: &[Scalar], n: usize, vars: &[&str], what: &str) -> Result<Vec<Expr>, CliError> {
    if items.len() != n {
        return Err(CliError::Config(format!("{what} must have {n} entries")));
    }
    items.iter().map(|s| s.parse(vars)).collect()
}

/// Builds an [`SdeModel`] from expression coefficients with symbolic
/// Jacobians.
pub fn inline_model(spec: &InlineModel) -> Result<(SdeModel, Vec<String>), CliError> {
    let p = spec.drift.len();
    if p == 0 || spec.sigma.len() != p {
        return Err(CliError::Config(format!(
            "drift has {p} entries but sigma has {} rows",
            spec.sigma.len()
        )));
    }
    let d = spec.sigma[0].len();
    let r = spec.rank.unwrap_or(d);
    if spec.lower.len() != p || spec.upper.len() != p {
        return Err(CliError::Config(format!("domain bounds must have {p} entries")));
    }
    let names = var_names(p, spec.vars.as_ref())?;
    let vars = with_time(&names);
    let sigma = parse_matrix(&spec.sigma, p, d, &vars, "sigma")?;
    let drift = parse_vector(&spec.drift, p, &vars, "drift")?;
    let time_dep = sigma.iter().flatten().chain(drift.iter()).any(|e| e.depends_on(p));
    let sigma_jac: Vec<Vec<Vec<Expr>>> = (0..d)
        .map(|j| (0..p).map(|i| (0..p).map(|k| sigma[i][j].diff(k)).collect()).collect())
        .collect();
    let sigma_dt: Vec<Vec<Expr>> = sigma.iter().map(|row| row.iter().map(|e| e.diff(p)).collect()).collect();
    let drift_jac: Vec<Vec<Expr>> = drift.iter().map(|e| (0..p).map(|k| e.diff(k)).collect()).collect();

    let domain = BoxDomain::new(spec.lower.clone(), spec.upper.clone())?;
    let s1 = sigma.clone();
    let mut b = SdeModel::builder(p, d, r)
        .name(spec.name.clone().unwrap_or_else(|| "inline".into()))
        .domain(domain)
        .horizon(spec.horizon.unwrap_or(1.0))
        .time_homogeneous(!time_dep)
        .sigma(move |x, t| eval_mat(&s1, p, d, x, t))
        .sigma_jacobians(move |x, t| sigma_jac.iter().map(|m| eval_mat(m, p, p, x, t)).collect())
        .sigma_time_derivative(move |x, t| eval_mat(&sigma_dt, p, d, x, t));
    b = if spec.stratonovich {
        b.stratonovich_drift(move |x, t| eval_vec(&drift, x, t))
    } else {
        b.drift(move |x, t| eval_vec(&drift, x, t))
            .drift_jacobian(move |x, t| eval_mat(&drift_jac, p, p, x, t))
    };
    if let Some(f) = &spec.floor {
        b = b.coefficient_floor(f.clone());
    }
    Ok((b.build()?, names))
}

fn expr_chart(spec: &ChartSpec, model: &SdeModel, names: &[String]) -> Result<Diffeomorphism, CliError> {
    let p = model.p();
    let (Some(fwd), Some(inv)) = (&spec.forward, &spec.inverse) else {
        return Err(CliError::Config("expression charts need `forward` and `inverse`".into()));
    };
    let xvars = with_time(names);
    let znames: Vec<String> = (1..=p).map(|i| format!("z{i}")).collect();
    let zvars = with_time(&znames);
    let fwd = parse_vector(fwd, p, &xvars, "chart.forward")?;
    let inv = parse_vector(inv, p, &zvars, "chart.inverse")?;
    let time_dep = fwd.iter().any(|e| e.depends_on(p));
    let jac: Vec<Vec<Expr>> = fwd.iter().map(|e| (0..p).map(|k| e.diff(k)).collect()).collect();
    let dt: Vec<Expr> = fwd.iter().map(|e| e.diff(p)).collect();
    let permutation = match &spec.permutation {
        Some(order) => Permutation::new(order.clone())?,
        None => Permutation::identity(model.d()),
    };
    let valid = model.domain().clone();
    let f1 = fwd.clone();
    let image = match (&spec.image_lower, &spec.image_upper) {
        (Some(l), Some(u)) => BoxDomain::new(l.clone(), u.clone())?,
        _ => estimated_image(&valid, |x| eval_vec(&f1, x, 0.0))?,
    };
    let dt_fn: Option<MapFn> = time_dep.then(|| Arc::new(move |x: &DVector<f64>, t: f64| eval_vec(&dt, x, t)) as MapFn);
    Ok(Diffeomorphism::new(
        "expr",
        Arc::new(move |x: &DVector<f64>, t: f64| eval_vec(&fwd, x, t)),
        Arc::new(move |z: &DVector<f64>, t: f64| eval_vec(&inv, z, t)),
        Arc::new(move |x: &DVector<f64>, t: f64| eval_mat(&jac, p, p, x, t)),
        dt_fn,
        permutation,
        valid,
        image,
    ))
}

/// Bounding box of the forward image of interior samples, padded by 10%.
fn estimated_image<F: Fn(&DVector<f64>) -> DVector<f64>>(valid: &BoxDomain, f: F) -> Result<BoxDomain, CliError> {
    let p = valid.dim();
    let mut lo = vec![f64::INFINITY; p];
    let mut hi = vec![f64::NEG_INFINITY; p];
    for x in sample_interior(valid, 256, 17, 1e-6) {
        let z = f(&x);
        for i in 0..p {
            if z[i].is_finite() {
                lo[i] = lo[i].min(z[i]);
                hi[i] = hi[i].max(z[i]);
            }
        }
    }
    for i in 0..p {
        if !(hi[i] > lo[i]) {
            return Err(CliError::Config("chart image is degenerate; set image_lower/image_upper".into()));
        }
        let pad = 0.1 * (hi[i] - lo[i]);
        lo[i] -= pad;
        hi[i] += pad;
    }
    Ok(BoxDomain::new(lo, hi)?)
}

fn params_from_spec(spec: &ParamsSpec, p: usize, d: usize, r: usize) -> Result<CanonicalParams, CliError> {
    let names: Vec<String> = (1..=p - r).map(|i| format!("v{i}")).collect();
    let vars = with_time(&names);
    let beta = parse_matrix(&spec.beta, r, r, &vars, "params.beta")?;
    let theta = parse_vector(&spec.theta, r, &vars, "params.theta")?;
    let mut params = CanonicalParams::new(
        p,
        d,
        r,
        Arc::new(move |v: &DVector<f64>, t: f64| eval_mat(&beta, r, r, v, t)),
        Arc::new(move |v: &DVector<f64>, t: f64| eval_vec(&theta, v, t)),
    );
    match (&spec.h_tilde, p > r) {
        (Some(h), true) => {
            let h = parse_vector(h, p - r, &vars, "params.h_tilde")?;
            params = params.with_h_tilde(Arc::new(move |v: &DVector<f64>, t: f64| eval_vec(&h, v, t)));
        }
        (Some(_), false) => return Err(CliError::Config("params.h_tilde given but p = r".into())),
        (None, _) => {}
    }
    match (&spec.kappa, d > r) {
        (Some(k), true) => {
            let k = parse_matrix(k, r, d - r, &vars, "params.kappa")?;
            params = params.with_kappa(Arc::new(move |v: &DVector<f64>, t: f64| eval_mat(&k, r, d - r, v, t)));
        }
        (Some(_), false) => return Err(CliError::Config("params.kappa given but d = r".into())),
        (None, _) => {}
    }
    Ok(params)
}

impl RunConfig {
    pub fn resolve(file: ConfigFile, ov: Overrides) -> Result<RunConfig, CliError> {
        let run = &file.run;
        let spec = match (&ov.model, &file.model) {
            (Some(id), _) => ModelSpec::Id(id.clone()),
            (None, Some(m)) => m.clone(),
            (None, None) => return Err(CliError::Config("no model given (use --model or a config file)".into())),
        };
        let mut cfg = match spec {
            ModelSpec::Id(id) => {
                let entry = catalog::get(&id)?;
                let chart_kind = file.chart.as_ref().map(|c| c.kind.clone()).unwrap_or(ChartKind::Catalog);
                let closed = entry.chart_dyn();
                let (chart, numeric) = match chart_kind {
                    ChartKind::Catalog => (closed.clone(), false),
                    ChartKind::Identity => (
                        Some(Arc::new(Diffeomorphism::identity(entry.model.domain().clone(), entry.model.d())) as Arc<dyn Chart>),
                        false,
                    ),
                    ChartKind::Numeric => (None, true),
                    ChartKind::Expr => {
                        let names: Vec<String> = (1..=entry.model.p()).map(|i| format!("x{i}")).collect();
                        let c = expr_chart(file.chart.as_ref().expect("chart spec"), &entry.model, &names)?;
                        (Some(Arc::new(c) as Arc<dyn Chart>), false)
                    }
                };
                let params = match &file.params {
                    Some(ps) => Some(params_from_spec(ps, entry.model.p(), entry.model.d(), entry.model.r())?),
                    None if matches!(file.chart.as_ref().map(|c| &c.kind), None | Some(ChartKind::Catalog)) => entry.params.clone(),
                    None => None,
                };
                RunConfig {
                    id,
                    t_end: entry.t_end,
                    start: entry.start.clone(),
                    s: entry.start_time,
                    anchor: entry.start.clone(),
                    model: entry.model,
                    chart,
                    reference_chart: closed,
                    params,
                    mean_oracle: entry.mean_oracle,
                    intervals: DEFAULT_INTERVALS,
                    paths: DEFAULT_PATHS,
                    seed: 0,
                    tol: 0.0,
                    scheme: Scheme::Exact,
                    dt: None,
                    threads: None,
                    out: None,
                    points: DEFAULT_POINTS,
                    target_error: DEFAULT_TARGET_ERROR,
                    numeric_chart: numeric,
                    straightened: OnceLock::new(),
                }
            }
            ModelSpec::Inline(m) => {
                let (model, names) = inline_model(&m)?;
                let (chart, numeric) = match file.chart.as_ref().map(|c| &c.kind) {
                    None | Some(ChartKind::Numeric) => (None, true),
                    Some(ChartKind::Identity) => (
                        Some(Arc::new(Diffeomorphism::identity(model.domain().clone(), model.d())) as Arc<dyn Chart>),
                        false,
                    ),
                    Some(ChartKind::Expr) => {
                        let c = expr_chart(file.chart.as_ref().expect("chart spec"), &model, &names)?;
                        (Some(Arc::new(c) as Arc<dyn Chart>), false)
                    }
                    Some(ChartKind::Catalog) => {
                        return Err(CliError::Config("chart kind `catalog` needs a catalog model".into()))
                    }
                };
                let params = match &file.params {
                    Some(ps) => Some(params_from_spec(ps, model.p(), model.d(), model.r())?),
                    None => None,
                };
                let start = match &run.x {
                    Some(x) => DVector::from_vec(x.clone()),
                    None => model.domain().center(),
                };
                RunConfig {
                    id: model.name().to_string(),
                    t_end: model.horizon() * 0.5,
                    anchor: start.clone(),
                    start,
                    s: 0.0,
                    model,
                    chart,
                    reference_chart: None,
                    params,
                    mean_oracle: None,
                    intervals: DEFAULT_INTERVALS,
                    paths: DEFAULT_PATHS,
                    seed: 0,
                    tol: 0.0,
                    scheme: Scheme::Exact,
                    dt: None,
                    threads: None,
                    out: None,
                    points: DEFAULT_POINTS,
                    target_error: DEFAULT_TARGET_ERROR,
                    numeric_chart: numeric,
                    straightened: OnceLock::new(),
                }
            }
        };
        if let Some(x) = &run.x {
            cfg.start = DVector::from_vec(x.clone());
            cfg.anchor = cfg.start.clone();
        }
        if let Some(a) = file.chart.as_ref().and_then(|c| c.anchor.clone()) {
            cfg.anchor = DVector::from_vec(a);
        }
        if let Some(s) = run.s {
            cfg.s = s;
        }
        cfg.t_end = ov.t_end.or(run.t_end).unwrap_or(cfg.t_end);
        cfg.intervals = run.intervals.unwrap_or(cfg.intervals);
        cfg.paths = ov.paths.or(run.paths).unwrap_or(cfg.paths);
        cfg.seed = ov.seed.or(run.seed).unwrap_or(0);
        cfg.tol = ov.tol.or(run.tol).unwrap_or(FD_TOL);
        cfg.scheme = match (ov.scheme, &run.scheme) {
            (Some(s), _) => s,
            (None, Some(s)) => parse_scheme(s)?,
            (None, None) => Scheme::Exact,
        };
        cfg.dt = ov.dt.or(run.dt);
        cfg.threads = ov.threads.or(run.threads);
        cfg.out = ov.out.or_else(|| run.out.clone());
        cfg.points = run.points.unwrap_or(cfg.points);
        cfg.target_error = run.target_error.unwrap_or(cfg.target_error);
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let p = self.model.p();
        if self.start.len() != p || self.anchor.len() != p {
            return Err(CliError::Config(format!("start point must have {p} entries")));
        }
        if !self.model.domain().contains(&self.start) {
            return Err(CliError::Config("start point is outside the model domain".into()));
        }
        if !(self.t_end > self.s) || self.t_end > self.s + self.model.horizon() {
            return Err(CliError::Config(format!(
                "t_end = {} must lie in ({}, {}]",
                self.t_end,
                self.s,
                self.s + self.model.horizon()
            )));
        }
        if self.intervals == 0 || self.paths == 0 || self.points == 0 {
            return Err(CliError::Config("intervals, paths and points must be positive".into()));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) {
                return Err(CliError::Config("dt must be positive".into()));
            }
        }
        if !(self.tol > 0.0) || !(self.target_error > 0.0) {
            return Err(CliError::Config("tolerances must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be positive".into()));
        }
        if let Some(params) = &self.params {
            if (params.p(), params.d(), params.r()) != (p, self.model.d(), self.model.r()) {
                return Err(CliError::Config("parameter dimensions do not match the model".into()));
            }
        }
        if let Some(chart) = &self.chart {
            if chart.dim() != p || chart.permutation().len() != self.model.d() {
                return Err(CliError::Config("chart dimensions do not match the model".into()));
            }
        }
        Ok(())
    }

    pub fn numeric_chart(&self) -> bool {
        self.numeric_chart
    }

    /// The configured chart, straightening numerically when requested. The
    /// straightened chart is built once and reused.
    pub fn chart(&self) -> Result<Option<Arc<dyn Chart>>, CliError> {
        if !self.numeric_chart {
            return Ok(self.chart.clone());
        }
        if let Some(c) = self.straightened.get() {
            return Ok(Some(c.clone()));
        }
        let c: Arc<dyn Chart> = Arc::new(flow_straighten(&self.model, &self.anchor, self.s)?);
        Ok(Some(self.straightened.get_or_init(|| c).clone()))
    }

    pub fn output_grid(&self) -> Result<Grid, CliError> {
        Ok(Grid::uniform(self.s, self.t_end, self.intervals)?)
    }
}
