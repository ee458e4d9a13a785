//! Exact path sampling through `X_t = φ(Y_t, t)`, Euler–Maruyama and
//! Milstein baselines, coupled strong-error comparison and moment summaries.
//!
//! `Y_t = ∫ₛᵗ U_{s,u} dW_u` has independent Gaussian increments with
//! covariance `Σ_k = ∫ U Uᵀ du` over each output interval, so the sampler has
//! no time-stepping bias at the output nodes.

use std::borrow::Cow;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::commutator::{check_sigma_commutator, FD_TOL};
use crate::error::{Error, Result};
use crate::model::SdeModel;
use crate::numerics::{psd_factor, rk4_span, BoxDomain, Grid, JitterPolicy, PsdFactor, RngStream};
use crate::representation::{RepState, Representation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Exact,
    Euler,
    Milstein,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Exact => "exact",
            Scheme::Euler => "euler",
            Scheme::Milstein => "milstein",
        }
    }
}

/// Simulated paths on an output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    grid: Grid,
    p: usize,
    n_paths: usize,
    states: Vec<f64>,
    exit_index: Vec<Option<usize>>,
    seed: u64,
    scheme: Scheme,
}

impl PathBundle {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// State of `path` at grid node `node` (NaN after exit).
    pub fn state(&self, path: usize, node: usize) -> &[f64] {
        let start = (path * self.grid.len() + node) * self.p;
        &self.states[start..start + self.p]
    }

    /// First node at which the path is no longer alive, if any.
    pub fn exit_index(&self, path: usize) -> Option<usize> {
        self.exit_index[path]
    }

    pub fn alive(&self, path: usize, node: usize) -> bool {
        self.exit_index[path].is_none_or(|e| node < e)
    }

    pub fn survivors(&self, node: usize) -> usize {
        (0..self.n_paths).filter(|&i| self.alive(i, node)).count()
    }

    /// Coordinate `coord` of every surviving path at `node`.
    pub fn values(&self, node: usize, coord: usize) -> Vec<f64> {
        (0..self.n_paths)
            .filter(|&i| self.alive(i, node))
            .map(|i| self.state(i, node)[coord])
            .collect()
    }

    /// Writes `path,t,x1..xp,alive`, one row per (path, node), floats with
    /// 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut header = String::from("path,t");
        for i in 0..self.p {
            header.push_str(&format!(",x{}", i + 1));
        }
        header.push_str(",alive\n");
        w.write_all(header.as_bytes())?;
        let mut line = String::new();
        for path in 0..self.n_paths {
            for (node, t) in self.grid.nodes().iter().enumerate() {
                line.clear();
                line.push_str(&format!("{path},{t:.16e}"));
                for v in self.state(path, node) {
                    line.push_str(&format!(",{v:.16e}"));
                }
                line.push_str(if self.alive(path, node) { ",1\n" } else { ",0\n" });
                w.write_all(line.as_bytes())?;
            }
        }
        Ok(())
    }
}

/// Gaussian law of `Y_{t_{k+1}} − Y_{t_k}`.
#[derive(Debug, Clone)]
pub struct IncrementLaw {
    pub t0: f64,
    pub t1: f64,
    /// `Σ_k = ∫ U Uᵀ du`.
    pub cov: DMatrix<f64>,
    /// `∫ U du`, the cross-covariance with the Brownian increment.
    pub mean_u: DMatrix<f64>,
    pub factor: PsdFactor,
}

fn steps_for(rep: &Representation, dt: f64) -> usize {
    let base = rep.grid().nodes();
    let h = (base[base.len() - 1] - base[0]) / ((base.len() - 1) * rep.substeps()) as f64;
    ((dt / h).ceil() as usize).max(4)
}

/// Integrates `(X̃, T, ∫UUᵀ, ∫U)` across `[st.t, t1]`.
fn interval_moments(rep: &Representation, st: &RepState, t1: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (p, d, r) = (rep.p(), rep.d(), rep.r());
    let q = p - r;
    let params = rep.params().clone();
    let mut y0 = Vec::with_capacity(q + r * r + 2 * d * d);
    y0.extend(st.x_tilde.iter());
    y0.extend(st.t_mat.iter());
    y0.extend(std::iter::repeat_n(0.0, 2 * d * d));
    let y0 = DVector::from_vec(y0);
    let rhs = |y: &DVector<f64>, t: f64| {
        let s = y.as_slice();
        let xt = DVector::from_column_slice(&s[..q]);
        let tm = DMatrix::from_column_slice(r, r, &s[q..q + r * r]);
        let beta = params.beta(&xt, t);
        let cur = RepState {
            t,
            x_tilde: xt.clone(),
            t_mat: tm.clone(),
            t_inv: DMatrix::zeros(r, r),
            c_bar: DVector::zeros(r),
        };
        let u = rep.u_of(&cur);
        let mut out = Vec::with_capacity(y.len());
        out.extend(params.h_tilde(&xt, t).iter());
        out.extend((-(&tm * beta)).iter());
        out.extend((&u * u.transpose()).iter());
        out.extend(u.iter());
        DVector::from_vec(out)
    };
    let y = rk4_span(rhs, &y0, st.t, t1, steps_for(rep, t1 - st.t))?;
    let s = y.as_slice();
    let off = q + r * r;
    let cov = DMatrix::from_column_slice(d, d, &s[off..off + d * d]);
    let mean_u = DMatrix::from_column_slice(d, d, &s[off + d * d..]);
    Ok(((&cov + cov.transpose()) * 0.5, mean_u))
}

fn check_grid(rep: &Representation, grid: &Grid) -> Result<()> {
    if (grid.start() - rep.start().1).abs() > 1e-12 {
        return Err(Error::InvalidGrid(format!(
            "grid starts at {}, representation at {}",
            grid.start(),
            rep.start().1
        )));
    }
    if grid.end() > rep.valid_until() + 1e-12 {
        return Err(Error::OdeEscape { time: rep.valid_until() });
    }
    Ok(())
}

/// Per-interval covariances `Σ_k` and their factors.
pub fn precompute_increment_laws(rep: &Representation, grid: &Grid) -> Result<Vec<IncrementLaw>> {
    check_grid(rep, grid)?;
    let policy = JitterPolicy::default();
    grid.nodes()
        .par_windows(2)
        .map(|w| {
            let st = rep.state_at(w[0])?;
            let (cov, mean_u) = interval_moments(rep, &st, w[1])?;
            let factor = psd_factor(&cov, &policy)?;
            Ok(IncrementLaw {
                t0: w[0],
                t1: w[1],
                cov,
                mean_u,
                factor,
            })
        })
        .collect()
}

/// Per-node data mapping `Y_t` to `X_t`.
struct NodeMap {
    t: f64,
    c_bar: DVector<f64>,
    linear: DMatrix<f64>,
    x_tilde: DVector<f64>,
}

fn node_maps(rep: &Representation, grid: &Grid) -> Result<Vec<NodeMap>> {
    grid.nodes()
        .iter()
        .map(|&t| {
            let st = rep.state_at(t)?;
            Ok(NodeMap {
                t,
                c_bar: rep.c_bar_of(&st),
                linear: rep.linear_map_of(&st),
                x_tilde: st.x_tilde,
            })
        })
        .collect()
}

fn map_to_state(rep: &Representation, m: &NodeMap, y: &DVector<f64>, domain: &BoxDomain) -> Option<DVector<f64>> {
    let mut z = DVector::zeros(rep.p());
    map_into(rep, m, y, domain, &mut z)
}

/// `φ(y, t)` through a caller-owned chart-coordinate buffer.
fn map_into(
    rep: &Representation,
    m: &NodeMap,
    y: &DVector<f64>,
    domain: &BoxDomain,
    z: &mut DVector<f64>,
) -> Option<DVector<f64>> {
    let r = rep.r();
    {
        let mut bar = z.rows_mut(0, r);
        bar.copy_from(&m.c_bar);
        bar.gemv(1.0, &m.linear, y, 1.0);
    }
    z.rows_mut(r, rep.p() - r).copy_from(&m.x_tilde);
    rep.chart().inverse(z, m.t).ok().filter(|x| domain.contains(x))
}

/// Exact sampling on `grid`; a path stops at the first node where `φ`
/// cannot be evaluated or leaves [`Representation::domain`].
pub fn simulate_exact(rep: &Representation, grid: &Grid, n_paths: usize, seed: u64) -> Result<PathBundle> {
    let laws = precompute_increment_laws(rep, grid)?;
    simulate_exact_with_laws(rep, grid, &laws, n_paths, seed)
}

/// Exact sampling with precomputed increment laws.
pub fn simulate_exact_with_laws(
    rep: &Representation,
    grid: &Grid,
    laws: &[IncrementLaw],
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    check_grid(rep, grid)?;
    if laws.len() + 1 != grid.len() {
        return Err(Error::InvalidArgument("increment laws do not match the grid".into()));
    }
    let maps = node_maps(rep, grid)?;
    let (p, d, nodes) = (rep.p(), rep.d(), grid.len());
    let x0 = rep.start().0.clone();
    let domain = rep.domain().clone();
    let mut states = vec![f64::NAN; n_paths * nodes * p];
    let mut exits = vec![None; n_paths];
    states
        .par_chunks_mut(nodes * p)
        .zip(exits.par_iter_mut())
        .enumerate()
        .for_each(|(path, (out, exit))| {
            let mut rng = RngStream::new(seed, path as u64);
            let mut y = DVector::zeros(d);
            let mut xi = DVector::zeros(d);
            let mut z = DVector::zeros(p);
            out[..p].copy_from_slice(x0.as_slice());
            for k in 0..laws.len() {
                rng.fill_normals(xi.as_mut_slice());
                y.gemv(1.0, &laws[k].factor.lower, &xi, 1.0);
                match map_into(rep, &maps[k + 1], &y, &domain, &mut z) {
                    Some(x) => out[(k + 1) * p..(k + 2) * p].copy_from_slice(x.as_slice()),
                    None => {
                        *exit = Some(k + 1);
                        break;
                    }
                }
            }
        });
    Ok(PathBundle {
        grid: grid.clone(),
        p,
        n_paths,
        states,
        exit_index: exits,
        seed,
        scheme: Scheme::Exact,
    })
}

fn floored<'a>(model: &SdeModel, x: &'a DVector<f64>) -> Cow<'a, DVector<f64>> {
    match model.coefficient_floor() {
        Some(f) => Cow::Owned(x.zip_map(f, |v, lo| v.max(lo))),
        None => Cow::Borrowed(x),
    }
}

/// Domain test for the stepping schemes: coordinates with a coefficient
/// floor are not stopped at their lower face.
fn stepping_inside(model: &SdeModel, x: &DVector<f64>) -> bool {
    let dom = model.domain();
    let floor = model.coefficient_floor();
    (0..x.len()).all(|i| {
        let lower_ok = floor.is_some() || x[i] > dom.lower()[i];
        x[i].is_finite() && lower_ok && x[i] < dom.upper()[i]
    })
}

fn ensure_commutative(model: &SdeModel) -> Result<()> {
    if model.d() == 1 {
        return Ok(());
    }
    let report = check_sigma_commutator(model, 64, FD_TOL);
    if report.passed() {
        Ok(())
    } else {
        Err(Error::NonCommutative {
            residual: report.max_residual,
        })
    }
}

/// One explicit step driven by the Brownian increment `dw`.
fn scheme_step(model: &SdeModel, scheme: Scheme, x: &DVector<f64>, t: f64, dt: f64, dw: &DVector<f64>) -> Option<DVector<f64>> {
    let xe = floored(model, x);
    let sigma = model.sigma(&xe, t);
    let mut next = model.drift(&xe, t);
    next *= dt;
    next += x;
    next.gemv(1.0, &sigma, dw, 1.0);
    if scheme == Scheme::Milstein {
        let jacs = model.sigma_column_jacobians(&xe, t).ok()?;
        let d = model.d();
        for j in 0..d {
            for k in 0..d {
                let w = dw[j] * dw[k] - if j == k { dt } else { 0.0 };
                if w != 0.0 {
                    next += (&jacs[k] * sigma.column(j)) * (0.5 * w);
                }
            }
        }
    }
    stepping_inside(model, &next).then_some(next)
}

fn output_positions(fine: &Grid, output: &Grid) -> Result<Vec<usize>> {
    if !fine.nests(output) {
        return Err(Error::InvalidGrid("output grid is not a subset of the stepping grid".into()));
    }
    output
        .nodes()
        .iter()
        .map(|&t| fine.index_of(t).ok_or_else(|| Error::InvalidGrid(format!("node {t} missing"))))
        .collect()
}

fn run_scheme(
    model: &SdeModel,
    scheme: Scheme,
    x0: &DVector<f64>,
    fine: &Grid,
    output: &Grid,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    if x0.len() != model.p() || !model.domain().contains(x0) {
        return Err(Error::InvalidArgument("start point outside the model domain".into()));
    }
    fine.check_horizon(model.horizon())?;
    if scheme == Scheme::Milstein {
        ensure_commutative(model)?;
    }
    let positions = output_positions(fine, output)?;
    let (p, d, nodes) = (model.p(), model.d(), output.len());
    let mut states = vec![f64::NAN; n_paths * nodes * p];
    let mut exits = vec![None; n_paths];
    let fine_nodes = fine.nodes();
    states
        .par_chunks_mut(nodes * p)
        .zip(exits.par_iter_mut())
        .enumerate()
        .for_each(|(path, (out, exit))| {
            let mut rng = RngStream::new(seed, path as u64);
            let mut x = x0.clone();
            let mut dw = DVector::zeros(d);
            let mut next_out = 0;
            if positions[0] == 0 {
                out[..p].copy_from_slice(x.as_slice());
                next_out = 1;
            }
            for k in 0..fine_nodes.len() - 1 {
                let dt = fine_nodes[k + 1] - fine_nodes[k];
                rng.fill_normals(dw.as_mut_slice());
                dw *= dt.sqrt();
                match scheme_step(model, scheme, &x, fine_nodes[k], dt, &dw) {
                    Some(n) => x = n,
                    None => {
                        *exit = Some(next_out);
                        return;
                    }
                }
                if next_out < nodes && positions[next_out] == k + 1 {
                    out[next_out * p..(next_out + 1) * p].copy_from_slice(x.as_slice());
                    next_out += 1;
                }
            }
        });
    Ok(PathBundle {
        grid: output.clone(),
        p,
        n_paths,
        states,
        exit_index: exits,
        seed,
        scheme,
    })
}

/// Euler–Maruyama on `fine`, recording at the nodes of `output`.
pub fn euler_maruyama(
    model: &SdeModel,
    x0: &DVector<f64>,
    fine: &Grid,
    output: &Grid,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    run_scheme(model, Scheme::Euler, x0, fine, output, n_paths, seed)
}

/// Milstein scheme for commutative noise (no Lévy areas).
pub fn milstein(
    model: &SdeModel,
    x0: &DVector<f64>,
    fine: &Grid,
    output: &Grid,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    run_scheme(model, Scheme::Milstein, x0, fine, output, n_paths, seed)
}

/// One row of a strong-error table.
#[derive(Debug, Clone, Serialize)]
pub struct StrongErrorRow {
    pub dt: f64,
    /// `E max_{output nodes} ‖X_exact − X_scheme‖_∞`.
    pub error: f64,
    pub std_err: f64,
    /// `max_i |E[X_scheme − X_exact]_i|` at the last output node.
    pub weak_error: f64,
    pub weak_std_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StrongErrorTable {
    pub scheme: Scheme,
    pub rows: Vec<StrongErrorRow>,
    /// Least-squares slope of `log error` against `log dt`.
    pub slope: f64,
    pub paths_used: usize,
    pub paths_dropped: usize,
}

/// Joint law of `(ΔW̃, ΔY)` over one fine step, where `W̃ = π⁻¹W`:
/// `ΔY = (∫U du / Δt) ΔW̃ + C ζ` with `CCᵀ = Σ − (∫U)(∫U)ᵀ / Δt`.
struct JointLaw {
    dt: f64,
    regression: DMatrix<f64>,
    conditional: DMatrix<f64>,
}

fn clamped_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

fn linear_fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Strong error of `scheme` against the exact representation on shared
/// Brownian paths.
///
/// Brownian and `Y` increments are sampled jointly and exactly on `finest`;
/// the scheme is run with step `f · Δt` for every aggregation factor `f` in
/// `factors` and compared at the nodes of `output`. Paths on which either
/// solution leaves its domain are dropped from every level.
#[allow(clippy::too_many_arguments)]
pub fn couple_and_compare(
    rep: &Representation,
    model: &SdeModel,
    scheme: Scheme,
    finest: &Grid,
    output: &Grid,
    factors: &[usize],
    n_paths: usize,
    seed: u64,
) -> Result<StrongErrorTable> {
    if scheme == Scheme::Exact || factors.is_empty() {
        return Err(Error::InvalidArgument("compare needs a stepping scheme and at least one level".into()));
    }
    if scheme == Scheme::Milstein {
        ensure_commutative(model)?;
    }
    check_grid(rep, finest)?;
    let steps = finest.len() - 1;
    let out_pos = output_positions(finest, output)?;
    for &f in factors {
        if f == 0 || steps % f != 0 || out_pos.iter().any(|&i| i % f != 0) {
            return Err(Error::InvalidGrid(format!("factor {f} does not align with the grids")));
        }
    }
    let laws: Vec<JointLaw> = finest
        .nodes()
        .par_windows(2)
        .map(|w| {
            let st = rep.state_at(w[0])?;
            let (cov, mean_u) = interval_moments(rep, &st, w[1])?;
            let dt = w[1] - w[0];
            let cond = &cov - &mean_u * mean_u.transpose() / dt;
            Ok(JointLaw {
                dt,
                regression: mean_u / dt,
                conditional: clamped_factor(&cond),
            })
        })
        .collect::<Result<_>>()?;
    let maps = node_maps(rep, output)?;
    let order = rep.chart().permutation().order().to_vec();
    let (d, x0) = (rep.d(), rep.start().0.clone());
    let domain = rep.domain().clone();
    let per_path: Vec<Option<Vec<(f64, DVector<f64>)>>> = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = RngStream::new(seed, path as u64);
            let mut dws: Vec<DVector<f64>> = Vec::with_capacity(steps);
            let mut exact = Vec::with_capacity(output.len());
            exact.push(x0.clone());
            let mut y = DVector::zeros(d);
            let mut next_out = 1;
            let mut z1 = DVector::zeros(d);
            let mut z2 = DVector::zeros(d);
            for (k, law) in laws.iter().enumerate() {
                rng.fill_normals(z1.as_mut_slice());
                rng.fill_normals(z2.as_mut_slice());
                let dwt = &z1 * law.dt.sqrt();
                y += &law.regression * &dwt + &law.conditional * &z2;
                let mut dw = DVector::zeros(d);
                for (kk, &i) in order.iter().enumerate() {
                    dw[i] = dwt[kk];
                }
                dws.push(dw);
                if next_out < out_pos.len() && out_pos[next_out] == k + 1 {
                    exact.push(map_to_state(rep, &maps[next_out], &y, &domain)?);
                    next_out += 1;
                }
            }
            let mut errs = Vec::with_capacity(factors.len());
            for &f in factors {
                let mut x = x0.clone();
                let mut worst: f64 = 0.0;
                let mut last = DVector::zeros(x0.len());
                let mut oi = 1;
                for c in 0..steps / f {
                    let k0 = c * f;
                    let t0 = finest.nodes()[k0];
                    let dt = finest.nodes()[k0 + f] - t0;
                    let mut dw = DVector::zeros(d);
                    for w in &dws[k0..k0 + f] {
                        dw += w;
                    }
                    x = scheme_step(model, scheme, &x, t0, dt, &dw)?;
                    if oi < out_pos.len() && out_pos[oi] == k0 + f {
                        last = &x - &exact[oi];
                        worst = worst.max(last.amax());
                        oi += 1;
                    }
                }
                errs.push((worst, last));
            }
            Some(errs)
        })
        .collect();
    let used: Vec<&Vec<(f64, DVector<f64>)>> = per_path.iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::NoSurvivors { time: output.end() });
    }
    let n = used.len() as f64;
    let x0_len = rep.p();
    let mut rows = Vec::new();
    for (li, &f) in factors.iter().enumerate() {
        let mean = used.iter().map(|e| e[li].0).sum::<f64>() / n;
        let var = used.iter().map(|e| (e[li].0 - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let (mut weak, mut weak_se) = (0.0f64, 0.0f64);
        for i in 0..x0_len {
            let m = used.iter().map(|e| e[li].1[i]).sum::<f64>() / n;
            let v = used.iter().map(|e| (e[li].1[i] - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            if m.abs() >= weak {
                weak = m.abs();
                weak_se = (v / n).sqrt();
            }
        }
        rows.push(StrongErrorRow {
            dt: f as f64 * (finest.end() - finest.start()) / steps as f64,
            error: mean,
            std_err: (var / n).sqrt(),
            weak_error: weak,
            weak_std_err: weak_se,
        });
    }
    let slope = if rows.len() >= 2 && rows.iter().all(|r| r.error > 0.0) {
        let xs: Vec<f64> = rows.iter().map(|r| r.dt.ln()).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.error.ln()).collect();
        linear_fit_slope(&xs, &ys)
    } else {
        f64::NAN
    };
    Ok(StrongErrorTable {
        scheme,
        rows,
        slope,
        paths_used: used.len(),
        paths_dropped: n_paths - used.len(),
    })
}

/// Sample moments of the surviving paths at one node.
#[derive(Debug, Clone, Serialize)]
pub struct MomentStats {
    pub t: f64,
    pub mean: Vec<f64>,
    /// Unbiased sample covariance, row-major.
    pub covariance: Vec<Vec<f64>>,
    /// Standard errors of the means.
    pub std_err: Vec<f64>,
    /// Standard errors of the variances, `sqrt((m₄ − s⁴)/n)`.
    pub variance_std_err: Vec<f64>,
    pub survivors: usize,
    pub survival_fraction: f64,
}

pub fn moment_stats(bundle: &PathBundle, t: f64) -> Result<MomentStats> {
    let node = bundle
        .grid()
        .index_of(t)
        .ok_or_else(|| Error::InvalidArgument(format!("t = {t} is not a grid node")))?;
    let p = bundle.p();
    let rows: Vec<&[f64]> = (0..bundle.n_paths())
        .filter(|&i| bundle.alive(i, node))
        .map(|i| bundle.state(i, node))
        .collect();
    if rows.is_empty() {
        return Err(Error::NoSurvivors { time: t });
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; p];
    for r in &rows {
        for i in 0..p {
            mean[i] += r[i];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![vec![0.0; p]; p];
    let mut m4 = vec![0.0; p];
    for r in &rows {
        for i in 0..p {
            let di = r[i] - mean[i];
            m4[i] += di.powi(4);
            for j in 0..p {
                cov[i][j] += di * (r[j] - mean[j]);
            }
        }
    }
    let denom = (n - 1.0).max(1.0);
    let mut var_se = vec![0.0; p];
    for i in 0..p {
        let s2 = cov[i][i] / n;
        var_se[i] = ((m4[i] / n - s2 * s2).max(0.0) / n).sqrt();
    }
    cov.iter_mut().flatten().for_each(|c| *c /= denom);
    let std_err = (0..p).map(|i| (cov[i][i] / n).sqrt()).collect();
    Ok(MomentStats {
        t,
        mean,
        covariance: cov,
        std_err,
        variance_std_err: var_se,
        survivors: rows.len(),
        survival_fraction: n / bundle.n_paths() as f64,
    })
}
