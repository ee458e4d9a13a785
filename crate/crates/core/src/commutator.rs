//! Numerical decision of the commutator conditions: the diffusion condition
//! `(∇σ_k)σ_j = (∇σ_j)σ_k`, the drift condition
//! `σA_j = (∇σ_j)h + ∂_tσ_j − (∇h)σ_j`, and the classification of drifts in
//! canonical coordinates.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use parking_lot::RwLock;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result, Witness};
use crate::model::{SdeModel, StratonovichDrift};
use crate::numerics::{inf_norm, pseudo_inverse, sample_space_time, vec_inf_norm, JacobianMode};
use crate::representation::CanonicalParams;

/// Default tolerance with central-difference Jacobians.
pub const FD_TOL: f64 = 1e-5;
/// Default tolerance with analytic Jacobians.
pub const ANALYTIC_TOL: f64 = 1e-8;
/// Fraction of skipped sample points above which a check is inconclusive.
pub const INCONCLUSIVE_FRACTION: f64 = 0.2;
/// Singular values below this fraction of the largest are truncated.
pub const PINV_TOL: f64 = 1e-10;

pub const SAMPLE_SEED: u64 = 0xC0FFEE;
pub const SAMPLE_MARGIN: f64 = 0.01;

pub fn default_tolerance(model: &SdeModel) -> f64 {
    if model.has_analytic_sigma_jacobian() && model.jacobian_spec().mode == JacobianMode::AnalyticCallback {
        ANALYTIC_TOL
    } else {
        FD_TOL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualEntry {
    pub label: String,
    pub max_residual: f64,
}

/// Outcome of a sampled residual check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub check: String,
    pub verdict: Verdict,
    pub max_residual: f64,
    pub tolerance: f64,
    pub worst_point: Option<Witness>,
    pub table: Vec<ResidualEntry>,
    pub sample_count: usize,
    pub skipped: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

/// Collects per-point residuals under fixed labels and reduces them in
/// insertion order.
#[derive(Debug, Clone)]
pub struct ResidualTally {
    check: String,
    labels: Vec<String>,
    maxima: Vec<f64>,
    worst: f64,
    worst_point: Option<Witness>,
    samples: usize,
    skipped: usize,
}

impl ResidualTally {
    pub fn new(check: impl Into<String>, labels: Vec<String>) -> Self {
        let n = labels.len();
        Self {
            check: check.into(),
            labels,
            maxima: vec![0.0; n],
            worst: 0.0,
            worst_point: None,
            samples: 0,
            skipped: 0,
        }
    }

    /// Records one sample point's residuals, one per label.
    pub fn record(&mut self, residuals: &[f64], witness: Witness) {
        self.samples += 1;
        for (slot, &r) in self.maxima.iter_mut().zip(residuals) {
            let r = if r.is_nan() { f64::INFINITY } else { r };
            *slot = slot.max(r);
            if r > self.worst || self.worst_point.is_none() {
                self.worst = self.worst.max(r);
                self.worst_point = Some(witness.clone());
            }
        }
    }

    pub fn skip(&mut self) {
        self.samples += 1;
        self.skipped += 1;
    }

    pub fn finish(self, tolerance: f64) -> CheckReport {
        let n = self.labels.len();
        self.finish_per_label(&vec![tolerance; n.max(1)])
    }

    /// Like [`finish`](Self::finish) with one tolerance per label; the
    /// report's `tolerance` field holds the first.
    pub fn finish_per_label(self, tolerances: &[f64]) -> CheckReport {
        let inconclusive = self.samples == 0
            || (self.skipped as f64) > INCONCLUSIVE_FRACTION * self.samples as f64;
        let within = self
            .maxima
            .iter()
            .zip(tolerances)
            .all(|(m, tol)| m <= tol);
        let verdict = if inconclusive {
            Verdict::Inconclusive
        } else if within {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        let tolerance = tolerances.first().copied().unwrap_or(0.0);
        CheckReport {
            check: self.check,
            verdict,
            max_residual: self.worst,
            tolerance,
            worst_point: self.worst_point,
            table: self
                .labels
                .into_iter()
                .zip(self.maxima)
                .map(|(label, max_residual)| ResidualEntry { label, max_residual })
                .collect(),
            sample_count: self.samples,
            skipped: self.skipped,
        }
    }
}

/// Unnormalized residuals `‖(∇σ_k)σ_j − (∇σ_j)σ_k‖_∞` for every pair `j < k`,
/// in lexicographic order.
pub fn commutator_residuals(model: &SdeModel, x: &DVector<f64>, t: f64) -> Result<Vec<f64>> {
    let sigma = model.sigma(x, t);
    let jacs = model.sigma_column_jacobians(x, t)?;
    let d = model.d();
    let mut out = Vec::with_capacity(d * (d - 1) / 2);
    for j in 0..d {
        for k in (j + 1)..d {
            let lhs = &jacs[k] * sigma.column(j);
            let rhs = &jacs[j] * sigma.column(k);
            out.push(vec_inf_norm(&(lhs - rhs)));
        }
    }
    Ok(out)
}

fn pair_labels(d: usize) -> Vec<String> {
    let mut labels = Vec::new();
    for j in 0..d {
        for k in (j + 1)..d {
            labels.push(format!("({},{})", j + 1, k + 1));
        }
    }
    labels
}

/// Samples `n_points` interior points and checks the diffusion commutator.
///
/// Residuals are normalized by `1 + ‖σ‖_∞`. Points whose stencils leave the
/// domain are skipped and counted.
pub fn check_sigma_commutator(model: &SdeModel, n_points: usize, tol: f64) -> CheckReport {
    let d = model.d();
    let labels = pair_labels(d);
    let samples = sample_space_time(
        model.domain(),
        0.0,
        model.horizon(),
        model.is_time_homogeneous(),
        n_points.max(1),
        SAMPLE_SEED,
        SAMPLE_MARGIN,
    );
    let results: Vec<Option<Vec<f64>>> = samples
        .par_iter()
        .map(|(x, t)| {
            if d == 1 {
                return Some(Vec::new());
            }
            let norm = 1.0 + inf_norm(&model.sigma(x, *t));
            commutator_residuals(model, x, *t)
                .ok()
                .map(|rs| rs.into_iter().map(|r| r / norm).collect())
        })
        .collect();
    let mut tally = ResidualTally::new("sigma_commutator", labels);
    for ((x, t), res) in samples.iter().zip(results) {
        match res {
            Some(rs) => tally.record(&rs, Witness::new(x, *t)),
            None => tally.skip(),
        }
    }
    tally.finish(tol)
}

/// Generator matrix recovered at one sample point.
#[derive(Debug, Clone)]
pub struct GeneratorSample {
    pub witness: Witness,
    pub a: DMatrix<f64>,
    pub residual: f64,
}

/// Pointwise solutions `A(x,t)` of the drift condition plus a constancy summary.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    pub samples: Vec<GeneratorSample>,
    pub max_residual: f64,
    /// `max ‖A(x,t) − A(x₀,t₀)‖_∞` over the samples.
    pub spread: f64,
    pub skipped: usize,
}

impl GeneratorMatrix {
    pub fn is_constant(&self, tol: f64) -> bool {
        self.spread <= tol * (1.0 + self.mean().amax())
    }

    pub fn mean(&self) -> DMatrix<f64> {
        let n = self.samples.len().max(1) as f64;
        let mut acc = self
            .samples
            .first()
            .map(|s| DMatrix::zeros(s.a.nrows(), s.a.ncols()))
            .unwrap_or_else(|| DMatrix::zeros(0, 0));
        for s in &self.samples {
            acc += &s.a;
        }
        acc / n
    }

    /// Time-invariant form `B = −A`.
    pub fn b_matrix(&self) -> DMatrix<f64> {
        -self.mean()
    }
}

/// Right-hand side `R_j = (∇σ_j)h + ∂_tσ_j − (∇h)σ_j`, stacked as columns.
pub fn drift_condition_rhs(
    model: &SdeModel,
    h: &StratonovichDrift,
    x: &DVector<f64>,
    t: f64,
) -> Result<DMatrix<f64>> {
    let sigma = model.sigma(x, t);
    let jacs = model.sigma_column_jacobians(x, t)?;
    let dsig = model.sigma_time_derivative(x, t)?;
    let hv = h.eval(x, t)?;
    let dh = h.jacobian(x, t)?;
    let mut rhs = DMatrix::zeros(model.p(), model.d());
    for j in 0..model.d() {
        let col = &jacs[j] * &hv + dsig.column(j) - &dh * sigma.column(j);
        rhs.set_column(j, &col);
    }
    Ok(rhs)
}

/// Solves the drift condition for `A` by rank-truncated least squares at
/// sampled points.
///
/// The residual `‖σA − R‖_∞ / (1 + ‖σ‖_∞ + ‖R‖_∞)` must stay below `tol` at
/// every point, otherwise [`Error::NoSolution`] is returned.
pub fn infer_generator(model: &SdeModel, h: &StratonovichDrift, n_points: usize, tol: f64) -> Result<GeneratorMatrix> {
    let samples = sample_space_time(
        model.domain(),
        0.0,
        model.horizon(),
        model.is_time_homogeneous(),
        n_points.max(1),
        SAMPLE_SEED ^ 0x5A,
        SAMPLE_MARGIN,
    );
    let solved: Vec<Option<(DMatrix<f64>, f64)>> = samples
        .par_iter()
        .map(|(x, t)| {
            let rhs = drift_condition_rhs(model, h, x, *t).ok()?;
            let sigma = model.sigma(x, *t);
            let a = pseudo_inverse(&sigma, PINV_TOL) * &rhs;
            let res = inf_norm(&(&sigma * &a - &rhs)) / (1.0 + inf_norm(&sigma) + inf_norm(&rhs));
            Some((a, res))
        })
        .collect();
    let mut out = Vec::new();
    let mut skipped = 0;
    let mut max_residual: f64 = 0.0;
    for ((x, t), s) in samples.iter().zip(solved) {
        match s {
            Some((a, res)) => {
                let witness = Witness::new(x, *t);
                if !(res <= tol) {
                    return Err(Error::NoSolution { residual: res, witness });
                }
                max_residual = max_residual.max(res);
                out.push(GeneratorSample { witness, a, residual: res });
            }
            None => skipped += 1,
        }
    }
    if out.is_empty() || skipped as f64 > INCONCLUSIVE_FRACTION * samples.len() as f64 {
        return Err(Error::InvalidArgument(format!(
            "generator inference skipped {skipped} of {} points",
            samples.len()
        )));
    }
    let first = out[0].a.clone();
    let spread = out.iter().map(|s| (&s.a - &first).amax()).fold(0.0, f64::max);
    Ok(GeneratorMatrix {
        samples: out,
        max_residual,
        spread,
        skipped,
    })
}

/// Parameters read off a drift in canonical coordinates.
#[derive(Clone)]
pub struct CanonicalClassification {
    /// `(β̄, θ̄, h̃, κ̄)` evaluated at the reference Gaussian coordinate `z̄_ref`.
    pub params: CanonicalParams,
    pub reference_bar: DVector<f64>,
    pub max_affine_deviation: f64,
    pub max_tilde_derivative: f64,
    pub max_kappa_derivative: f64,
    pub sample_count: usize,
}

impl std::fmt::Debug for CanonicalClassification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CanonicalClassification")
            .field("reference_bar", &self.reference_bar)
            .field("max_affine_deviation", &self.max_affine_deviation)
            .field("max_tilde_derivative", &self.max_tilde_derivative)
            .field("max_kappa_derivative", &self.max_kappa_derivative)
            .field("sample_count", &self.sample_count)
            .finish()
    }
}

fn split_join(bar: &DVector<f64>, tilde: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(bar.len() + tilde.len());
    z.rows_mut(0, bar.len()).copy_from(bar);
    z.rows_mut(bar.len(), tilde.len()).copy_from(tilde);
    z
}

/// Checks that `canonical` has σ = [I_r | κ̄; 0 0] and that `h` has the
/// canonical drift form `h̄ = θ̄ + β̄ φ̄`, `h̃` free of `φ̄`, `κ̄` free of `φ̄`;
/// extracts `(β̄, θ̄, h̃, κ̄)`.
///
/// `canonical` supplies `p, d, r`, σ and the sampling box; `h` is its
/// Stratonovich drift.
pub fn classify_canonical_drift(
    canonical: &SdeModel,
    h: &StratonovichDrift,
    n_points: usize,
    tol: f64,
) -> Result<CanonicalClassification> {
    let (p, d, r) = (canonical.p(), canonical.d(), canonical.r());
    let domain = canonical.domain().clone();
    let samples = sample_space_time(
        &domain,
        0.0,
        canonical.horizon(),
        canonical.is_time_homogeneous(),
        n_points.max(2),
        SAMPLE_SEED ^ 0xA5,
        SAMPLE_MARGIN,
    );
    let n = samples.len();
    let mut affine: f64 = 0.0;
    let mut tilde_dep: f64 = 0.0;
    let mut kappa_dep: f64 = 0.0;
    let mut skipped = 0;
    for (idx, (z, t)) in samples.iter().enumerate() {
        let sig = canonical.sigma(z, *t);
        if sig.iter().any(|v| !v.is_finite()) {
            skipped += 1;
            continue;
        }
        let scale = 1.0 + inf_norm(&sig);
        let mut worst: f64 = 0.0;
        for i in 0..p {
            for j in 0..d {
                let target = if i < r && j < r && i == j { 1.0 } else { 0.0 };
                if i < r && j >= r {
                    continue;
                }
                worst = worst.max((sig[(i, j)] - target).abs());
            }
        }
        if worst > tol * scale {
            return Err(Error::NotCanonical {
                worst,
                witness: Witness::new(z, *t),
            });
        }
        let (hz, jac) = match (h.eval(z, *t), h.jacobian(z, *t)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => {
                skipped += 1;
                continue;
            }
        };
        let hscale = 1.0 + vec_inf_norm(&hz);
        if p > r {
            let dt = jac.view((r, 0), (p - r, r)).amax() / hscale;
            if dt > tol {
                return Err(Error::TildeDriftDependsOnBar {
                    derivative: dt,
                    witness: Witness::new(z, *t),
                });
            }
            tilde_dep = tilde_dep.max(dt);
        }
        // affine test against a partner point sharing φ̃ and t
        let partner = &samples[(idx + n / 2) % n].0;
        let mut z2 = z.clone();
        z2.rows_mut(0, r).copy_from(&partner.rows(0, r));
        if let Ok(h2) = h.eval(&z2, *t) {
            let beta = jac.view((0, 0), (r, r)).into_owned();
            let dz = (&z2 - z).rows(0, r).into_owned();
            let pred = hz.rows(0, r) + &beta * &dz;
            let dev = vec_inf_norm(&(h2.rows(0, r) - pred)) / hscale;
            if dev > tol {
                return Err(Error::NotAffine {
                    deviation: dev,
                    witness: Witness::new(z, *t),
                });
            }
            affine = affine.max(dev);
        }
        if d > r {
            for k in 0..r {
                let step = 1e-4 * z[k].abs().max(1.0);
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[k] += step;
                zm[k] -= step;
                if !(domain.contains(&zp) && domain.contains(&zm)) {
                    continue;
                }
                let kp = canonical.sigma(&zp, *t).view((0, r), (r, d - r)).into_owned();
                let km = canonical.sigma(&zm, *t).view((0, r), (r, d - r)).into_owned();
                let der = (kp - km).amax() / (2.0 * step) / scale;
                if der > tol {
                    return Err(Error::KappaDependsOnBar {
                        derivative: der,
                        witness: Witness::new(z, *t),
                    });
                }
                kappa_dep = kappa_dep.max(der);
            }
        }
    }
    if skipped as f64 > INCONCLUSIVE_FRACTION * n as f64 {
        return Err(Error::InvalidArgument(format!(
            "drift classification skipped {skipped} of {n} points"
        )));
    }
    let reference_bar = domain.center().rows(0, r).into_owned();
    let params = extracted_params(canonical, h, reference_bar.clone());
    Ok(CanonicalClassification {
        params,
        reference_bar,
        max_affine_deviation: affine,
        max_tilde_derivative: tilde_dep,
        max_kappa_derivative: kappa_dep,
        sample_count: n - skipped,
    })
}

const EXTRACT_QUANTUM: f64 = 1e-12;
const EXTRACT_CACHE_LIMIT: usize = 1 << 14;

type Extracted = (DMatrix<f64>, DVector<f64>, DVector<f64>);

/// Memoized `(β̄, θ̄, h̃)` read off `h` at `(z̄_ref, φ̃, t)`.
struct Extractor {
    h: StratonovichDrift,
    zbar: DVector<f64>,
    p: usize,
    r: usize,
    fd_step: f64,
    cache: RwLock<HashMap<Vec<i64>, Extracted>>,
}

impl Extractor {
    fn get(&self, tilde: &DVector<f64>, t: f64) -> Extracted {
        let key: Vec<i64> = tilde
            .iter()
            .chain(std::iter::once(&t))
            .map(|v| (v / EXTRACT_QUANTUM).round() as i64)
            .collect();
        if let Some(v) = self.cache.read().get(&key) {
            return v.clone();
        }
        let v = self.compute(tilde, t).unwrap_or_else(|_| {
            (
                DMatrix::from_element(self.r, self.r, f64::NAN),
                DVector::from_element(self.r, f64::NAN),
                DVector::from_element(self.p - self.r, f64::NAN),
            )
        });
        let mut cache = self.cache.write();
        if cache.len() >= EXTRACT_CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(key, v.clone());
        v
    }

    fn compute(&self, tilde: &DVector<f64>, t: f64) -> Result<Extracted> {
        let (p, r) = (self.p, self.r);
        let z = split_join(&self.zbar, tilde);
        let hz = self.h.eval(&z, t)?;
        let mut beta = DMatrix::zeros(r, r);
        for k in 0..r {
            let step = self.fd_step * z[k].abs().max(1.0);
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[k] += step;
            zm[k] -= step;
            let col = (self.h.eval(&zp, t)?.rows(0, r) - self.h.eval(&zm, t)?.rows(0, r)) / (2.0 * step);
            beta.set_column(k, &col);
        }
        let theta = hz.rows(0, r) - &beta * &self.zbar;
        Ok((beta, theta, hz.rows(r, p - r).into_owned()))
    }
}

fn extracted_params(canonical: &SdeModel, h: &StratonovichDrift, zbar: DVector<f64>) -> CanonicalParams {
    let (p, d, r) = (canonical.p(), canonical.d(), canonical.r());
    let ex = Arc::new(Extractor {
        h: h.clone(),
        zbar: zbar.clone(),
        p,
        r,
        fd_step: canonical.jacobian_spec().fd_step,
        cache: RwLock::new(HashMap::new()),
    });
    let (e1, e2) = (ex.clone(), ex.clone());
    let mut params = CanonicalParams::new(
        p,
        d,
        r,
        Arc::new(move |tilde: &DVector<f64>, t: f64| e1.get(tilde, t).0),
        Arc::new(move |tilde: &DVector<f64>, t: f64| e2.get(tilde, t).1),
    );
    if p > r {
        params = params.with_h_tilde(Arc::new(move |tilde: &DVector<f64>, t: f64| ex.get(tilde, t).2));
    }
    if d > r {
        let m = canonical.clone();
        params = params.with_kappa(Arc::new(move |tilde: &DVector<f64>, t: f64| {
            let z = split_join(&zbar, tilde);
            m.sigma(&z, t).view((0, r), (r, d - r)).into_owned()
        }));
    }
    params
}
