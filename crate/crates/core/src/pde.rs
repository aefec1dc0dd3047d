//! Finite-difference oracle for `∂_t θ + ½ ∂_xx θ + g(t, x, θ, ∂_x θ) = 0`,
//! `θ(T, ·) = 0`, and the Markov representation
//! `(N_t, ζ_t) = (θ(t, x + B_t), ∂_x θ(t, x + B_t))`.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::aggregators::{Aggregator, AggregatorKind, AggregatorMeta, CustomCore, Felicity, H3Constants};
use crate::error::{invalid, Error, Result};
use crate::paths::BrownianEnsemble;

/// Picard corrections per time step.
pub const PICARD_CORRECTIONS: usize = 2;

/// Relative growth over the a priori bound that is read as instability.
const BOUND_SLACK: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpaceTimeGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub nt: usize,
    pub horizon: f64,
}

impl SpaceTimeGrid {
    pub fn new(x_min: f64, x_max: f64, nx: usize, nt: usize, horizon: f64) -> Result<Self> {
        if !(x_min < x_max) || !x_min.is_finite() || !x_max.is_finite() {
            return Err(invalid(format!("need x_min < x_max, got [{x_min}, {x_max}]")));
        }
        if nx < 3 || nt < 1 {
            return Err(invalid(format!("need nx >= 3 and nt >= 1, got {nx}, {nt}")));
        }
        if !(horizon > 0.0) {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self {
            x_min,
            x_max,
            nx,
            nt,
            horizon,
        })
    }

    /// `[x0 - 6√T, x0 + 6√T]`.
    pub fn centered(x0: f64, nx: usize, nt: usize, horizon: f64) -> Result<Self> {
        let w = 6.0 * horizon.sqrt();
        Self::new(x0 - w, x0 + w, nx, nt, horizon)
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.nt as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        self.x_min + j as f64 * self.dx()
    }

    pub fn t(&self, i: usize) -> f64 {
        i as f64 * self.dt()
    }

    /// Halves both mesh sizes; nodes of `self` stay nodes.
    pub fn refined(&self) -> Self {
        Self {
            nx: 2 * (self.nx - 1) + 1,
            nt: 2 * self.nt,
            ..*self
        }
    }

    /// Diffusion is implicit; the Picard map for the nonlinearity contracts
    /// when `Δt (K_y + K_z / Δx) < 1`.
    pub fn check_stability(&self, driver: &ScalarDriver) -> Result<()> {
        let q = self.dt() * (driver.k_y + driver.k_z / self.dx());
        if q >= 1.0 {
            return Err(Error::Scheme(format!(
                "Picard factor Δt(K_y + K_z/Δx) = {q:.3} >= 1; refine the time step"
            )));
        }
        Ok(())
    }
}

type DriverFn = dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync;

/// Scalar driver `g(t, x, y, z)` with Lipschitz constants in `y` and `z`.
#[derive(Clone)]
pub struct ScalarDriver {
    pub name: String,
    g: Arc<DriverFn>,
    pub k_y: f64,
    pub k_z: f64,
}

impl fmt::Debug for ScalarDriver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarDriver")
            .field("name", &self.name)
            .field("k_y", &self.k_y)
            .field("k_z", &self.k_z)
            .finish()
    }
}

impl ScalarDriver {
    pub fn new(
        name: impl Into<String>,
        k_y: f64,
        k_z: f64,
        g: impl Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(k_y >= 0.0 && k_z >= 0.0 && k_y.is_finite() && k_z.is_finite()) {
            return Err(invalid("Lipschitz constants must be finite and non-negative"));
        }
        Ok(Self {
            name: name.into(),
            g: Arc::new(g),
            k_y,
            k_z,
        })
    }

    pub fn zero() -> Self {
        Self::new("zero", 0.0, 0.0, |_, _, _, _| 0.0).expect("valid constants")
    }

    /// `x ↦ f(t, exp(a x), y, z)` for a one-dimensional aggregator and the
    /// plan `c = exp(a W)`.
    pub fn from_aggregator(agg: &Aggregator, slope: f64) -> Result<Self> {
        agg.validate()?;
        let (k_y, k_z) = match &agg.kind {
            AggregatorKind::ExpectedUtility { beta } => (beta.sup_abs(), 0.0),
            AggregatorKind::LinearZ { beta, gamma } => (beta.sup_abs(), gamma.abs()),
            AggregatorKind::ChenEpstein { beta, k } => {
                if k.len() != 1 {
                    return Err(invalid("the PDE oracle is scalar; κ must have one entry"));
                }
                (beta.sup_abs(), k[0].abs())
            }
            AggregatorKind::Quadratic { .. } => {
                return Err(Error::Unsupported(
                    "quadratic aggregators are not Lipschitz in z".into(),
                ))
            }
            AggregatorKind::Custom(c) => match c.meta.lipschitz_k {
                Some(k) => (k, k),
                None => return Err(invalid("custom core declares no Lipschitz constant")),
            },
        };
        // the felicity must be finite along the plan; check once at x = 0
        agg.felicity.eval(1.0)?;
        let agg = agg.clone();
        Self::new(agg.name(), k_y, k_z, move |t, x, y, z| {
            let v = agg.felicity.eval((slope * x).exp()).unwrap_or(f64::NAN);
            v + agg.core(t, y, &[z])
        })
    }

    pub fn eval(&self, t: f64, x: f64, y: f64, z: f64) -> f64 {
        (self.g)(t, x, y, z)
    }
}

/// `f(t, c, y, z) = tanh(log c) - β y - γ tanh(z)`.
pub fn tanh_aggregator(beta: f64, gamma: f64) -> Aggregator {
    let core = CustomCore {
        name: format!("tanh(beta={beta},gamma={gamma})"),
        core: Arc::new(move |_t, y, z: &[f64]| -beta * y - gamma * z[0].tanh()),
        meta: AggregatorMeta {
            lipschitz_k: Some(beta.abs().max(gamma.abs())),
            h1_h2_norm_dependence: true,
            concave_in_yz: false,
            h3: None,
        },
    };
    Aggregator::custom(Felicity::TanhBounded, core)
}

/// (H3) constants of [`tanh_aggregator`] on `[x_min, x_max]`, plan `c = e^x`,
/// with `x` in the role of the consumption argument.
pub fn tanh_h3_on(beta: f64, gamma: f64, x_min: f64, x_max: f64) -> H3Constants {
    let edge = x_min.abs().max(x_max.abs());
    let sech = 1.0 / edge.cosh();
    let bounds = [1.0, beta.abs(), gamma.abs()];
    let l = bounds.iter().copied().fold(0.0, f64::max);
    H3Constants {
        l,
        k_lower: sech * sech,
        // sech² is 4/(3√3)-Lipschitz; M is also used as the derivative bound
        m_lip: l.max(1.0),
        c_bound: 1.0,
    }
}

#[derive(Debug, Clone)]
pub struct PDESolution {
    pub grid: SpaceTimeGrid,
    /// `θ` at time level `i`, node `j`: `theta[i * nx + j]`.
    theta: Vec<f64>,
    dtheta: Vec<f64>,
    pub a_priori_bound: f64,
}

impl PDESolution {
    pub fn theta_at(&self, i: usize) -> &[f64] {
        let nx = self.grid.nx;
        &self.theta[i * nx..(i + 1) * nx]
    }

    pub fn dtheta_at(&self, i: usize) -> &[f64] {
        let nx = self.grid.nx;
        &self.dtheta[i * nx..(i + 1) * nx]
    }

    pub fn max_abs(&self) -> f64 {
        self.theta.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Bilinear interpolation of `(θ, ∂_x θ)`; `x` is clamped to the domain.
    pub fn interpolate(&self, t: f64, x: f64) -> (f64, f64) {
        let g = &self.grid;
        let s = (t / g.dt()).clamp(0.0, g.nt as f64);
        let i0 = (s.floor() as usize).min(g.nt - 1);
        let wt = s - i0 as f64;
        let u = ((x - g.x_min) / g.dx()).clamp(0.0, (g.nx - 1) as f64);
        let j0 = (u.floor() as usize).min(g.nx - 2);
        let wx = u - j0 as f64;
        let at = |field: &[f64], i: usize| {
            let row = &field[i * g.nx..(i + 1) * g.nx];
            row[j0] * (1.0 - wx) + row[j0 + 1] * wx
        };
        let th = at(&self.theta, i0) * (1.0 - wt) + at(&self.theta, i0 + 1) * wt;
        let dth = at(&self.dtheta, i0) * (1.0 - wt) + at(&self.dtheta, i0 + 1) * wt;
        (th, dth)
    }

    /// Rows `t, x, theta, dtheta_dx` for every `every`-th time level.
    pub fn write_snapshots_csv<W: Write>(&self, w: W, every: usize) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "x", "theta", "dtheta_dx"]).map_err(csv_err)?;
        let every = every.max(1);
        for i in (0..=self.grid.nt).filter(|i| i % every == 0 || *i == self.grid.nt) {
            let t = self.grid.t(i).to_string();
            for j in 0..self.grid.nx {
                out.write_record([
                    t.clone(),
                    self.grid.x(j).to_string(),
                    self.theta_at(i)[j].to_string(),
                    self.dtheta_at(i)[j].to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn central_difference(theta: &[f64], dx: f64, out: &mut [f64]) {
    let n = theta.len();
    out[0] = 0.0;
    out[n - 1] = 0.0;
    for j in 1..n - 1 {
        out[j] = (theta[j + 1] - theta[j - 1]) / (2.0 * dx);
    }
}

/// Thomas algorithm for the constant-coefficient Neumann system
/// `(1 + 2λ) u_j - λ (u_{j-1} + u_{j+1}) = r_j` with ghost nodes mirrored.
fn solve_neumann(lambda: f64, rhs: &[f64], out: &mut [f64], cp: &mut [f64]) {
    let n = rhs.len();
    let diag = 1.0 + 2.0 * lambda;
    let off = -lambda;
    // first row: diag u_0 - 2λ u_1; last row: -2λ u_{n-2} + diag u_{n-1}
    let upper = |j: usize| if j == 0 { 2.0 * off } else { off };
    let lower = |j: usize| if j == n - 1 { 2.0 * off } else { off };
    cp[0] = upper(0) / diag;
    out[0] = rhs[0] / diag;
    for j in 1..n {
        let m = diag - lower(j) * cp[j - 1];
        cp[j] = if j < n - 1 { upper(j) / m } else { 0.0 };
        out[j] = (rhs[j] - lower(j) * out[j - 1]) / m;
    }
    for j in (0..n - 1).rev() {
        out[j] -= cp[j] * out[j + 1];
    }
}

/// Backward implicit Euler in time with the nonlinearity lagged by one
/// Picard iterate and [`PICARD_CORRECTIONS`] corrections per step.
pub fn solve_quasilinear(driver: &ScalarDriver, grid: SpaceTimeGrid) -> Result<PDESolution> {
    grid.check_stability(driver)?;
    let (nx, nt) = (grid.nx, grid.nt);
    let (dx, dt) = (grid.dx(), grid.dt());
    let lambda = 0.5 * dt / (dx * dx);
    let xs: Vec<f64> = (0..nx).map(|j| grid.x(j)).collect();

    let mut g0 = 0.0_f64;
    for i in 0..=nt {
        for &x in &xs {
            g0 = g0.max(driver.eval(grid.t(i), x, 0.0, 0.0).abs());
        }
    }
    if !g0.is_finite() {
        return Err(Error::Domain(format!("driver {} is not finite on the grid", driver.name)));
    }
    let bound = g0 * grid.horizon * (driver.k_y * grid.horizon).exp();
    let ceiling = bound * (1.0 + BOUND_SLACK) + 1e-12;

    let mut theta = vec![0.0; (nt + 1) * nx];
    let mut dtheta = vec![0.0; (nt + 1) * nx];
    let mut iterate = vec![0.0; nx];
    let mut diter = vec![0.0; nx];
    let mut rhs = vec![0.0; nx];
    let mut cp = vec![0.0; nx];
    let mut next = vec![0.0; nx];

    for i in (0..nt).rev() {
        let t = grid.t(i);
        let prev = theta[(i + 1) * nx..(i + 2) * nx].to_vec();
        iterate.copy_from_slice(&prev);
        for _ in 0..=PICARD_CORRECTIONS {
            central_difference(&iterate, dx, &mut diter);
            for j in 0..nx {
                rhs[j] = prev[j] + dt * driver.eval(t, xs[j], iterate[j], diter[j]);
            }
            solve_neumann(lambda, &rhs, &mut next, &mut cp);
            iterate.copy_from_slice(&next);
        }
        let peak = iterate.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if !(peak <= ceiling) {
            return Err(Error::Scheme(format!(
                "max|θ| = {peak:.6e} at t = {t:.4} exceeds the a priori bound {bound:.6e}"
            )));
        }
        theta[i * nx..(i + 1) * nx].copy_from_slice(&iterate);
        central_difference(&iterate, dx, &mut diter);
        dtheta[i * nx..(i + 1) * nx].copy_from_slice(&diter);
    }
    Ok(PDESolution {
        grid,
        theta,
        dtheta,
        a_priori_bound: bound,
    })
}

/// `(N, ζ)` along base paths, laid out `[step][path]`.
#[derive(Debug, Clone, Serialize)]
pub struct MarkovReconstruction {
    pub times: Vec<f64>,
    pub n_paths: usize,
    pub n: Vec<f64>,
    pub zeta: Vec<f64>,
    pub excursion_fraction: f64,
}

impl MarkovReconstruction {
    pub fn n_at(&self, step: usize) -> &[f64] {
        &self.n[step * self.n_paths..(step + 1) * self.n_paths]
    }

    pub fn zeta_at(&self, step: usize) -> &[f64] {
        &self.zeta[step * self.n_paths..(step + 1) * self.n_paths]
    }

    pub fn n0(&self) -> f64 {
        self.n_at(0)[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructOptions {
    /// Distance from the boundary below which a path-step counts as an excursion.
    pub margin: f64,
    pub max_excursion_fraction: f64,
}

impl ReconstructOptions {
    pub fn for_grid(grid: &SpaceTimeGrid) -> Self {
        Self {
            margin: 5.0 * grid.dx(),
            max_excursion_fraction: 0.01,
        }
    }
}

/// Evaluates the PDE solution along `x0 + B` for the first coordinate of `base`.
pub fn reconstruct_markov_bsde(
    sol: &PDESolution,
    base: &BrownianEnsemble,
    x0: f64,
    opts: ReconstructOptions,
) -> Result<MarkovReconstruction> {
    let grid = base.grid().restricted();
    if (grid.horizon() - sol.grid.horizon).abs() > 1e-12 {
        return Err(invalid("paths and PDE grid have different horizons"));
    }
    let n = grid.n_steps();
    let np = base.n_paths();
    let (lo, hi) = (sol.grid.x_min + opts.margin, sol.grid.x_max - opts.margin);
    if !(lo < hi) {
        return Err(invalid("reconstruction margin leaves no interior"));
    }
    let rows: Vec<(Vec<f64>, Vec<f64>, usize)> = (0..=n)
        .into_par_iter()
        .map(|i| {
            let t = grid.time(i);
            let b = base.level_column(i, 0);
            let mut ns = Vec::with_capacity(np);
            let mut zs = Vec::with_capacity(np);
            let mut out = 0;
            for w in b {
                let x = x0 + w;
                if x < lo || x > hi {
                    out += 1;
                }
                let (th, dth) = sol.interpolate(t, x.clamp(lo, hi));
                ns.push(th);
                zs.push(dth);
            }
            (ns, zs, out)
        })
        .collect();
    let total = ((n + 1) * np) as f64;
    let excursions: usize = rows.iter().map(|r| r.2).sum();
    let fraction = excursions as f64 / total;
    if fraction > opts.max_excursion_fraction {
        return Err(Error::DomainTooSmall {
            fraction,
            allowed: opts.max_excursion_fraction,
        });
    }
    let mut nv = Vec::with_capacity((n + 1) * np);
    let mut zv = Vec::with_capacity((n + 1) * np);
    for (a, b, _) in rows {
        nv.extend(a);
        zv.extend(b);
    }
    Ok(MarkovReconstruction {
        times: grid.times(),
        n_paths: np,
        n: nv,
        zeta: zv,
        excursion_fraction: fraction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheckOptions {
    /// Relative numerical slack on both sides of the band.
    pub slack: f64,
    /// Only times `t ≤ t_max` are retained.
    pub t_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub pass: bool,
    /// Smallest signed distance to the band over retained points, in units of
    /// the corresponding bound.
    pub min_margin: f64,
    /// Largest such distance.
    pub max_margin: f64,
    pub lower_margin: f64,
    pub upper_margin: f64,
    pub slack: f64,
    pub t_max: f64,
    pub excursion_fraction: f64,
    pub retained_points: usize,
    pub violations: usize,
    /// Paths whose `ζ` changes sign at some retained interior time.
    pub sign_changes: usize,
    pub note: String,
}

/// Checks `k e^{-MT}(T-t) ≤ |ζ_t| ≤ M e^{MT} T`. Since `ζ = Q` the band for
/// the linearized intensity is checked on `ζ` directly.
pub fn intensity_bound_check(
    rec: &MarkovReconstruction,
    h3: &H3Constants,
    horizon: f64,
    opts: BoundCheckOptions,
) -> Result<BoundReport> {
    h3.validate()?;
    if !(opts.slack >= 0.0) {
        return Err(invalid("slack must be non-negative"));
    }
    let m = h3.m_lip;
    let upper = m * (m * horizon).exp() * horizon;
    let mut lower_margin = f64::INFINITY;
    let mut upper_margin = f64::INFINITY;
    let mut min_m = f64::INFINITY;
    let mut max_m = f64::NEG_INFINITY;
    let mut retained = 0;
    let mut violations = 0;
    let np = rec.n_paths;
    let mut first_sign = vec![0.0_f64; np];
    let mut flipped = vec![false; np];
    for (i, &t) in rec.times.iter().enumerate() {
        if t > opts.t_max + 1e-12 {
            continue;
        }
        let lower = h3.k_lower * (-m * horizon).exp() * (horizon - t);
        for (p, z) in rec.zeta_at(i).iter().enumerate() {
            let a = z.abs();
            retained += 1;
            let lo_rel = if lower > 0.0 { (a - lower) / lower } else { f64::INFINITY };
            let hi_rel = (upper - a) / upper;
            lower_margin = lower_margin.min(lo_rel);
            upper_margin = upper_margin.min(hi_rel);
            let d = lo_rel.min(hi_rel);
            min_m = min_m.min(d);
            max_m = max_m.max(d);
            if a < lower * (1.0 - opts.slack) || a > upper * (1.0 + opts.slack) {
                violations += 1;
            }
            if t > 0.0 && *z != 0.0 {
                if first_sign[p] == 0.0 {
                    first_sign[p] = z.signum();
                } else if first_sign[p] != z.signum() {
                    flipped[p] = true;
                }
            }
        }
    }
    if retained == 0 {
        return Err(invalid("no grid points retained"));
    }
    Ok(BoundReport {
        pass: violations == 0,
        min_margin: min_m,
        max_margin: max_m,
        lower_margin,
        upper_margin,
        slack: opts.slack,
        t_max: opts.t_max,
        excursion_fraction: rec.excursion_fraction,
        retained_points: retained,
        violations,
        sign_changes: flipped.iter().filter(|f| **f).count(),
        note: "derivative bounds verified on the truncated computational domain only".into(),
    })
}

/// Grid-refinement study of `θ(0, x0)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementStudy {
    pub nx: Vec<usize>,
    pub nt: Vec<usize>,
    pub values: Vec<f64>,
    /// `log2(|v_k - v_{k+1}| / |v_{k+1} - v_{k+2}|)` for each consecutive triple.
    pub orders: Vec<f64>,
}

pub fn refinement_study(driver: &ScalarDriver, coarsest: SpaceTimeGrid, x0: f64, levels: usize) -> Result<RefinementStudy> {
    if levels < 3 {
        return Err(invalid("a refinement study needs at least three levels"));
    }
    let mut grid = coarsest;
    let mut study = RefinementStudy {
        nx: vec![],
        nt: vec![],
        values: vec![],
        orders: vec![],
    };
    for _ in 0..levels {
        let sol = solve_quasilinear(driver, grid)?;
        study.nx.push(grid.nx);
        study.nt.push(grid.nt);
        study.values.push(sol.interpolate(0.0, x0).0);
        grid = grid.refined();
    }
    study.orders = study
        .values
        .windows(3)
        .map(|w| ((w[0] - w[1]).abs() / (w[1] - w[2]).abs()).log2())
        .collect();
    Ok(study)
}
