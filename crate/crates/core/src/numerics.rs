//! Shared numerical kernels.
//!
//! Central-difference Jacobians, fixed-step classical Runge-Kutta for vector
//! and matrix ODEs, jittered Cholesky factorisation, low-discrepancy interior
//! sampling and reproducible per-path random streams. Everything works in
//! `f64`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result, Witness};

/// Default relative step for central differences.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Axis-aligned open box in `R^p`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "box bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidArgument(format!(
                    "box axis {i} is empty or unbounded: ({lo}, {hi})"
                )));
            }
        }
        Ok(Self {
            lower: DVector::from_vec(lower),
            upper: DVector::from_vec(upper),
        })
    }

    /// Box `center ± half_width` on every axis.
    pub fn around(center: &DVector<f64>, half_width: &[f64]) -> Result<Self> {
        if half_width.len() != center.len() {
            return Err(Error::InvalidArgument("half-width length mismatch".into()));
        }
        let lower = center.iter().zip(half_width).map(|(c, w)| c - w).collect();
        let upper = center.iter().zip(half_width).map(|(c, w)| c + w).collect();
        Self::new(lower, upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    pub fn center(&self) -> DVector<f64> {
        (&self.lower + &self.upper) * 0.5
    }

    /// Strict membership (the box is open).
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(v, (lo, hi))| v > lo && v < hi)
    }

    /// Box pulled inward by `frac` of the width on every side.
    pub fn shrink(&self, frac: f64) -> Self {
        let w = &self.upper - &self.lower;
        Self {
            lower: &self.lower + &w * frac,
            upper: &self.upper - &w * frac,
        }
    }

    pub fn intersect(&self, other: &BoxDomain) -> Option<BoxDomain> {
        if self.dim() != other.dim() {
            return None;
        }
        let lower: Vec<f64> = self.lower.iter().zip(other.lower.iter()).map(|(a, b)| a.max(*b)).collect();
        let upper: Vec<f64> = self.upper.iter().zip(other.upper.iter()).map(|(a, b)| a.min(*b)).collect();
        BoxDomain::new(lower, upper).ok()
    }

    /// Maps a point of the unit cube onto the box.
    pub fn from_unit(&self, u: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            u.iter()
                .enumerate()
                .map(|(i, ui)| self.lower[i] + ui * self.width(i)),
        )
    }
}

/// Strictly increasing list of time nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    nodes: Vec<f64>,
}

impl Grid {
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidGrid("a grid needs at least two nodes".into()));
        }
        if nodes.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::InvalidGrid("nodes must be finite and non-negative".into()));
        }
        if nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("nodes must be strictly increasing".into()));
        }
        Ok(Self { nodes })
    }

    /// `intervals` equal steps from `start` to `end`.
    pub fn uniform(start: f64, end: f64, intervals: usize) -> Result<Self> {
        if intervals == 0 {
            return Err(Error::InvalidGrid("need at least one interval".into()));
        }
        let h = (end - start) / intervals as f64;
        let mut nodes: Vec<f64> = (0..intervals).map(|k| start + k as f64 * h).collect();
        nodes.push(end);
        Self::new(nodes)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn start(&self) -> f64 {
        self.nodes[0]
    }

    pub fn end(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    /// Rejects grids that reach or pass the model horizon.
    pub fn check_horizon(&self, horizon: f64) -> Result<()> {
        if self.end() >= horizon {
            return Err(Error::InvalidGrid(format!(
                "grid end {} is not inside [0, {horizon})",
                self.end()
            )));
        }
        Ok(())
    }

    /// Splits every interval into `factor` equal pieces.
    pub fn refine(&self, factor: usize) -> Grid {
        let factor = factor.max(1);
        let mut nodes = Vec::with_capacity((self.nodes.len() - 1) * factor + 1);
        for w in self.nodes.windows(2) {
            let h = (w[1] - w[0]) / factor as f64;
            for k in 0..factor {
                nodes.push(w[0] + k as f64 * h);
            }
        }
        nodes.push(self.end());
        Grid { nodes }
    }

    /// Index of the node equal to `t` up to a relative tolerance.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let tol = 1e-12 * (1.0 + t.abs());
        self.nodes.iter().position(|n| (n - t).abs() <= tol)
    }

    /// Whether every node of `coarse` is also a node of `self`.
    pub fn nests(&self, coarse: &Grid) -> bool {
        coarse.nodes.iter().all(|t| self.index_of(*t).is_some())
    }
}

/// How derivatives of coefficient fields are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum JacobianMode {
    /// Use analytic callbacks when the model supplies them, else central differences.
    AnalyticCallback,
    CentralDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct JacobianSpec {
    pub mode: JacobianMode,
    pub fd_step: f64,
}

impl Default for JacobianSpec {
    fn default() -> Self {
        Self {
            mode: JacobianMode::AnalyticCallback,
            fd_step: DEFAULT_FD_STEP,
        }
    }
}

impl JacobianSpec {
    pub fn central_difference() -> Self {
        Self {
            mode: JacobianMode::CentralDifference,
            fd_step: DEFAULT_FD_STEP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fd_step > 0.0 && self.fd_step <= 1e-2) {
            return Err(Error::InvalidArgument(format!(
                "fd_step {} outside (0, 1e-2]",
                self.fd_step
            )));
        }
        Ok(())
    }
}

fn stencil_step(fd_step: f64, coordinate: f64) -> f64 {
    fd_step * coordinate.abs().max(1.0)
}

fn check_stencil(domain: Option<&BoxDomain>, x: &DVector<f64>, t: f64) -> Result<()> {
    match domain {
        Some(d) if !d.contains(x) => Err(Error::DomainExit(Witness::new(x, t))),
        _ => Ok(()),
    }
}

/// Central-difference Jacobian of a fallible vector field with respect to the state.
///
/// Column `j` is `(f(x + h_j e_j) - f(x - h_j e_j)) / (2 h_j)` with
/// `h_j = fd_step * max(1, |x_j|)`. When `domain` is given every stencil point
/// must lie inside it.
pub fn try_jacobian<F>(
    field: F,
    point: &DVector<f64>,
    t: f64,
    fd_step: f64,
    domain: Option<&BoxDomain>,
) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>, f64) -> Result<DVector<f64>>,
{
    let p = point.len();
    let mut jac: Option<DMatrix<f64>> = None;
    let mut probe = point.clone();
    for j in 0..p {
        let h = stencil_step(fd_step, point[j]);
        probe[j] = point[j] + h;
        check_stencil(domain, &probe, t)?;
        let plus = field(&probe, t)?;
        probe[j] = point[j] - h;
        check_stencil(domain, &probe, t)?;
        let minus = field(&probe, t)?;
        probe[j] = point[j];
        let m = jac.get_or_insert_with(|| DMatrix::zeros(plus.len(), p));
        m.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    let jac = jac.unwrap_or_else(|| DMatrix::zeros(0, 0));
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("Jacobian at {}", Witness::new(point, t))));
    }
    Ok(jac)
}

/// Central-difference Jacobian of an infallible vector field.
pub fn jacobian<F>(
    field: F,
    point: &DVector<f64>,
    t: f64,
    fd_step: f64,
    domain: Option<&BoxDomain>,
) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>, f64) -> DVector<f64>,
{
    try_jacobian(|x, s| Ok(field(x, s)), point, t, fd_step, domain)
}

/// Central-difference time derivative (returned as a vector).
pub fn try_time_derivative<F>(field: F, point: &DVector<f64>, t: f64, fd_step: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>, f64) -> Result<DVector<f64>>,
{
    let h = stencil_step(fd_step, t);
    let d = (field(point, t + h)? - field(point, t - h)?) / (2.0 * h);
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("time derivative at {}", Witness::new(point, t))));
    }
    Ok(d)
}

/// Column Jacobians `∇σ_j` (each `p×p`) of a matrix field by central differences.
pub fn column_jacobians<F>(
    field: F,
    point: &DVector<f64>,
    t: f64,
    fd_step: f64,
    domain: Option<&BoxDomain>,
) -> Result<Vec<DMatrix<f64>>>
where
    F: Fn(&DVector<f64>, f64) -> DMatrix<f64>,
{
    let p = point.len();
    let mut out: Vec<DMatrix<f64>> = Vec::new();
    let mut probe = point.clone();
    for k in 0..p {
        let h = stencil_step(fd_step, point[k]);
        probe[k] = point[k] + h;
        check_stencil(domain, &probe, t)?;
        let plus = field(&probe, t);
        probe[k] = point[k] - h;
        check_stencil(domain, &probe, t)?;
        let minus = field(&probe, t);
        probe[k] = point[k];
        if out.is_empty() {
            out = vec![DMatrix::zeros(plus.nrows(), p); plus.ncols()];
        }
        let diff = (plus - minus) / (2.0 * h);
        for (j, jac) in out.iter_mut().enumerate() {
            jac.set_column(k, &diff.column(j));
        }
    }
    if out.iter().flat_map(|m| m.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("column Jacobians at {}", Witness::new(point, t))));
    }
    Ok(out)
}

/// One classical fourth-order Runge-Kutta step.
pub fn rk4_step<F>(rhs: &mut F, y: &DVector<f64>, t: f64, h: f64) -> DVector<f64>
where
    F: FnMut(&DVector<f64>, f64) -> DVector<f64>,
{
    let k1 = rhs(y, t);
    let k2 = rhs(&(y + &k1 * (0.5 * h)), t + 0.5 * h);
    let k3 = rhs(&(y + &k2 * (0.5 * h)), t + 0.5 * h);
    let k4 = rhs(&(y + &k3 * h), t + h);
    y + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
}

/// Integrates from `t0` to `t1` in `steps` equal RK4 steps.
pub fn rk4_span<F>(mut rhs: F, y0: &DVector<f64>, t0: f64, t1: f64, steps: usize) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>, f64) -> DVector<f64>,
{
    let steps = steps.max(1);
    let h = (t1 - t0) / steps as f64;
    let mut y = y0.clone();
    for k in 0..steps {
        y = rk4_step(&mut rhs, &y, t0 + k as f64 * h, h);
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("ODE state at t = {t1}")));
    }
    Ok(y)
}

/// Fixed-step RK4 over a grid, `substeps` equal steps per grid interval.
/// Returns the state at every grid node.
pub fn solve_vector_ode<F>(
    mut rhs: F,
    y0: &DVector<f64>,
    grid: &Grid,
    substeps: usize,
) -> Result<Vec<DVector<f64>>>
where
    F: FnMut(&DVector<f64>, f64) -> DVector<f64>,
{
    let substeps = substeps.max(1);
    let mut out = Vec::with_capacity(grid.len());
    let mut y = y0.clone();
    out.push(y.clone());
    for w in grid.nodes().windows(2) {
        let h = (w[1] - w[0]) / substeps as f64;
        for k in 0..substeps {
            y = rk4_step(&mut rhs, &y, w[0] + k as f64 * h, h);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("ODE state at t = {}", w[1])));
        }
        out.push(y.clone());
    }
    Ok(out)
}

/// Matrix ODE `dM/dt = rhs(M, t)` on a grid (fixed-step RK4).
pub fn solve_matrix_ode<F>(
    mut rhs: F,
    m0: &DMatrix<f64>,
    grid: &Grid,
    substeps: usize,
) -> Result<Vec<DMatrix<f64>>>
where
    F: FnMut(&DMatrix<f64>, f64) -> DMatrix<f64>,
{
    let (nr, nc) = m0.shape();
    let y0 = DVector::from_column_slice(m0.as_slice());
    let traj = solve_vector_ode(
        |y, t| {
            let m = DMatrix::from_column_slice(nr, nc, y.as_slice());
            DVector::from_column_slice(rhs(&m, t).as_slice())
        },
        &y0,
        grid,
        substeps,
    )?;
    Ok(traj
        .into_iter()
        .map(|y| DMatrix::from_column_slice(nr, nc, y.as_slice()))
        .collect())
}

/// Induced ∞-norm (max absolute row sum).
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn vec_inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

/// Number of singular values above `rel_tol · σ_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = m.clone().singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > rel_tol * smax).count()
}

/// Moore-Penrose pseudo-inverse with singular values below `rel_tol · σ_max` dropped.
pub fn pseudo_inverse(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let u = svd.u.expect("svd computed with u");
    let v_t = svd.v_t.expect("svd computed with v_t");
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for (k, s) in svd.singular_values.iter().enumerate() {
        if smax > 0.0 && *s > rel_tol * smax {
            out += v_t.row(k).transpose() * u.column(k).transpose() / *s;
        }
    }
    out
}

/// Jitter ladder for [`psd_factor`]. Levels are relative to `‖Σ‖_∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct JitterPolicy {
    pub ladder: Vec<f64>,
    pub max_relative: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self {
            ladder: vec![0.0, 1e-14, 1e-12, 1e-10, 1e-8, 1e-6],
            max_relative: 1e-6,
        }
    }
}

/// Lower-triangular factor of a (possibly jittered) covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdFactor {
    pub lower: DMatrix<f64>,
    /// Absolute jitter added to the diagonal.
    pub jitter: f64,
}

/// Cholesky factor of `Σ + jitter·I` with the smallest jitter on the ladder that works.
pub fn psd_factor(sigma: &DMatrix<f64>, policy: &JitterPolicy) -> Result<PsdFactor> {
    if !sigma.is_square() {
        return Err(Error::InvalidArgument("covariance must be square".into()));
    }
    let n = sigma.nrows();
    let scale = inf_norm(sigma);
    if scale == 0.0 {
        return Ok(PsdFactor {
            lower: DMatrix::zeros(n, n),
            jitter: 0.0,
        });
    }
    if !scale.is_finite() {
        return Err(Error::NonFinite("covariance".into()));
    }
    let asym = (sigma - sigma.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(Error::InvalidArgument(format!(
            "covariance asymmetric by {asym:e} (norm {scale:e})"
        )));
    }
    let sym = (sigma + sigma.transpose()) * 0.5;
    for level in policy.ladder.iter().filter(|l| **l <= policy.max_relative) {
        let jitter = level * scale;
        let shifted = &sym + DMatrix::identity(n, n) * jitter;
        if let Some(chol) = shifted.cholesky() {
            return Ok(PsdFactor {
                lower: chol.l(),
                jitter,
            });
        }
    }
    Err(Error::NotPsd {
        max_jitter: policy.max_relative * scale,
    })
}

/// Additive-recurrence low-discrepancy sequence (generalised golden ratio),
/// with a seeded Cranley-Patterson shift.
#[derive(Debug, Clone)]
pub struct LowDiscrepancy {
    alpha: Vec<f64>,
    shift: Vec<f64>,
    index: u64,
}

impl LowDiscrepancy {
    pub fn new(dim: usize, seed: u64) -> Self {
        // root of x^(d+1) = x + 1
        let mut g: f64 = 2.0;
        for _ in 0..64 {
            g -= (g.powi(dim as i32 + 1) - g - 1.0) / ((dim as f64 + 1.0) * g.powi(dim as i32) - 1.0);
        }
        let alpha = (1..=dim).map(|k| (1.0 / g.powi(k as i32)).fract()).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let shift = (0..dim).map(|_| rng.random::<f64>()).collect();
        Self { alpha, shift, index: 0 }
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        self.index += 1;
        let n = self.index as f64;
        self.alpha
            .iter()
            .zip(&self.shift)
            .map(|(a, s)| (s + n * a).fract())
            .collect()
    }
}

/// `n` seeded quasi-random points in `domain`, kept `margin` (fraction of
/// width) away from every face.
pub fn sample_interior(domain: &BoxDomain, n: usize, seed: u64, margin: f64) -> Vec<DVector<f64>> {
    let inner = domain.shrink(margin);
    let mut seq = LowDiscrepancy::new(domain.dim(), seed);
    (0..n).map(|_| inner.from_unit(&seq.next_point())).collect()
}

/// Quasi-random `(state, time)` samples; times span `[t_lo, t_hi]` unless the
/// model is time-homogeneous, in which case every time is `t_lo`.
pub fn sample_space_time(
    domain: &BoxDomain,
    t_lo: f64,
    t_hi: f64,
    time_homogeneous: bool,
    n: usize,
    seed: u64,
    margin: f64,
) -> Vec<(DVector<f64>, f64)> {
    let inner = domain.shrink(margin);
    let p = domain.dim();
    let mut seq = LowDiscrepancy::new(p + 1, seed);
    (0..n)
        .map(|_| {
            let u = seq.next_point();
            let x = inner.from_unit(&u[..p]);
            let t = if time_homogeneous {
                t_lo
            } else {
                t_lo + (t_hi - t_lo) * (margin + (1.0 - 2.0 * margin) * u[p])
            };
            (x, t)
        })
        .collect()
}

/// Reproducible random stream keyed by `(master_seed, path_index)`.
///
/// Distinct indices select distinct ChaCha streams of the same key, so draws
/// do not depend on how paths are scheduled across workers.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha20Rng,
    master_seed: u64,
    path_index: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, path_index: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
        rng.set_stream(path_index);
        Self {
            rng,
            master_seed,
            path_index,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path_index(&self) -> u64 {
        self.path_index
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn fill_normals(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.rng.sample(StandardNormal);
        }
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) {
        let err = (a - b).amax();
        assert!(err <= tol, "max deviation {err:e} > {tol:e}\n{a}\n{b}");
    }

    #[test]
    fn jacobian_of_identity_is_identity() {
        let x = DVector::from_vec(vec![0.3, -2.0, 7.5]);
        let j = jacobian(|x, _| x.clone(), &x, 0.0, DEFAULT_FD_STEP, None).unwrap();
        assert_close(&j, &DMatrix::identity(3, 3), 1e-9);
    }

    #[test]
    fn jacobian_of_gbm_column_is_diagonal() {
        // σ_j(φ) = (φ_1 γ_1j, φ_2 γ_2j)
        let gamma = [0.3, -0.7];
        let x = DVector::from_vec(vec![1.4, 0.6]);
        let j = jacobian(
            |x, _| DVector::from_vec(vec![x[0] * gamma[0], x[1] * gamma[1]]),
            &x,
            0.0,
            DEFAULT_FD_STEP,
            None,
        )
        .unwrap();
        assert_close(&j, &DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, -0.7]), 1e-9);
    }

    #[test]
    fn jacobian_quadratic_matches_analytic() {
        let x = DVector::from_vec(vec![2.0, 3.0]);
        let j = jacobian(
            |x, _| DVector::from_vec(vec![x[0] * x[0], x[1]]),
            &x,
            0.0,
            DEFAULT_FD_STEP,
            None,
        )
        .unwrap();
        assert_close(&j, &DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]), 1e-8);
    }

    #[test]
    fn jacobian_reports_domain_exit() {
        let dom = BoxDomain::new(vec![0.0], vec![1.0]).unwrap();
        let x = DVector::from_vec(vec![1e-7]);
        let err = jacobian(|x, _| x.clone(), &x, 0.0, DEFAULT_FD_STEP, Some(&dom)).unwrap_err();
        assert!(matches!(err, Error::DomainExit(_)));
    }

    #[test]
    fn matrix_ode_zero_rhs_is_constant() {
        let grid = Grid::uniform(0.0, 1.0, 10).unwrap();
        let traj = solve_matrix_ode(|m, _| DMatrix::zeros(m.nrows(), m.ncols()), &DMatrix::identity(2, 2), &grid, 1).unwrap();
        assert_eq!(traj.len(), 11);
        for m in traj {
            assert_eq!(m, DMatrix::identity(2, 2));
        }
    }

    #[test]
    fn matrix_ode_constant_decay() {
        let beta = 1.3;
        let grid = Grid::uniform(0.0, 1.0, 100).unwrap();
        let traj = solve_matrix_ode(|m, _| -m * beta, &DMatrix::identity(1, 1), &grid, 1).unwrap();
        for (t, m) in grid.nodes().iter().zip(&traj) {
            let exact = (-beta * t).exp();
            assert!(((m[(0, 0)] - exact) / exact).abs() <= 1e-8);
        }
    }

    #[test]
    fn matrix_ode_time_varying_decay() {
        let s = 0.0;
        let grid = Grid::uniform(s, 1.0, 100).unwrap();
        let traj = solve_matrix_ode(|m, t| -m * t, &DMatrix::identity(1, 1), &grid, 1).unwrap();
        for (t, m) in grid.nodes().iter().zip(&traj) {
            let exact = (-(t * t - s * s) / 2.0).exp();
            assert!((m[(0, 0)] - exact).abs() <= 1e-8);
        }
    }

    #[test]
    fn rk4_is_fourth_order() {
        let err = |substeps: usize| {
            let grid = Grid::uniform(0.0, 1.0, 4).unwrap();
            let traj = solve_matrix_ode(|m, t| -m * (1.0 + t), &DMatrix::identity(1, 1), &grid, substeps).unwrap();
            (traj[4][(0, 0)] - (-1.5f64).exp()).abs()
        };
        let ratio = err(2) / err(4);
        assert!((12.0..20.0).contains(&ratio), "ratio {ratio}");
        let ratio = err(4) / err(8);
        assert!((12.0..20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn matrix_ode_reports_non_finite() {
        let grid = Grid::uniform(0.0, 1.0, 2).unwrap();
        let err = solve_matrix_ode(|m, _| m.map(|v| v * 1e300 * 1e300), &DMatrix::identity(1, 1), &grid, 1).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn psd_identity() {
        let f = psd_factor(&DMatrix::identity(3, 3), &JitterPolicy::default()).unwrap();
        assert_eq!(f.jitter, 0.0);
        assert_close(&f.lower, &DMatrix::identity(3, 3), 1e-15);
    }

    #[test]
    fn psd_hand_cholesky() {
        let s = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 2.0]);
        let f = psd_factor(&s, &JitterPolicy::default()).unwrap();
        assert_close(&f.lower, &DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 1.0]), 1e-14);
    }

    #[test]
    fn psd_rank_deficient_needs_small_jitter() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = psd_factor(&s, &JitterPolicy::default()).unwrap();
        assert!(f.jitter > 0.0 && f.jitter <= 1e-12, "jitter {}", f.jitter);
        let rec = &f.lower * f.lower.transpose();
        assert!((rec - &s).amax() <= f.jitter * 2.0 + 1e-12 * 2.0);
    }

    #[test]
    fn psd_rejects_indefinite() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            psd_factor(&s, &JitterPolicy::default()),
            Err(Error::NotPsd { .. })
        ));
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new(vec![0.0]).is_err());
        assert!(Grid::new(vec![0.0, 0.0]).is_err());
        assert!(Grid::new(vec![0.0, 0.5, 0.4]).is_err());
        let g = Grid::uniform(0.0, 1.0, 4).unwrap();
        assert_eq!(g.nodes(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(g.refine(4).nests(&g));
        assert!(g.check_horizon(1.0).is_err());
        assert!(g.check_horizon(1.5).is_ok());
    }

    #[test]
    fn low_discrepancy_points_stay_inside_margin() {
        let dom = BoxDomain::new(vec![0.0, -1.0], vec![1.0, 1.0]).unwrap();
        for x in sample_interior(&dom, 500, 3, 0.01) {
            assert!(x[0] >= 0.01 && x[0] <= 0.99);
            assert!(x[1] >= -0.98 && x[1] <= 0.98);
        }
    }

    #[test]
    fn rng_stream_reproducible_and_distinct() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        let mut c = RngStream::new(7, 4);
        let mut same = true;
        let mut differs = false;
        for _ in 0..1000 {
            let (x, y, z) = (a.standard_normal(), b.standard_normal(), c.standard_normal());
            same &= x.to_bits() == y.to_bits();
            differs |= x != z;
        }
        assert!(same && differs);
    }
}
