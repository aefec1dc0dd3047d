//! Brownian path ensembles and the filtration constructions built on them.
//!
//! A base ensemble plays the role of the fine driver `W^G`. Two transforms
//! derive coarser or time-compressed drivers from it:
//!
//! * [`apply_sign_loss`] keeps only the information in `|W^G|`; its driver is
//!   the Ito sum of `sgn(W^G_{t_i}) ΔW^G_i` (left endpoint, `sgn(0) = +1`).
//! * [`apply_anticipation`] maps a driver on `[0, 2T]` to
//!   `W^H_t = W^F_{2t} / √2` on `[0, T]`.
//!
//! Increments are stored step-major (`[step][path][dim]`) because every
//! solver consumes one cross-section at a time.

pub mod cache;
pub mod rng;

use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::regression::{Basis, LeastSquares};

/// Uniform time grid on `[0, span_factor * horizon]` with step `horizon / n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
    span_factor: u8,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize, span_factor: u8) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(invalid("n_steps must be at least 1"));
        }
        if span_factor != 1 && span_factor != 2 {
            return Err(invalid(format!("span_factor must be 1 or 2, got {span_factor}")));
        }
        Ok(Self {
            horizon,
            n_steps,
            span_factor,
        })
    }

    /// Grid on `[0, T]`.
    pub fn unit(horizon: f64, n_steps: usize) -> Result<Self> {
        Self::new(horizon, n_steps, 1)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Steps on `[0, T]`.
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn span_factor(&self) -> u8 {
        self.span_factor
    }

    /// Steps on the whole simulated span.
    pub fn total_steps(&self) -> usize {
        self.n_steps * self.span_factor as usize
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.horizon / self.n_steps as f64
    }

    pub fn end(&self) -> f64 {
        self.time(self.total_steps())
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.total_steps()).map(|i| self.time(i)).collect()
    }

    /// Same step, span 1.
    pub fn restricted(&self) -> Self {
        Self {
            span_factor: 1,
            ..*self
        }
    }
}

/// Which Brownian motion an ensemble realizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FiltrationTag {
    G,
    F,
    H,
}

impl std::fmt::Display for FiltrationTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FiltrationTag::G => "G",
            FiltrationTag::F => "F",
            FiltrationTag::H => "H",
        };
        f.write_str(s)
    }
}

/// Filtration transforms available on ensembles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FiltrationTransform {
    Identity,
    SignLoss,
    Anticipation,
}

/// `n_paths` discretized `dims`-dimensional Brownian paths.
#[derive(Debug)]
pub struct BrownianEnsemble {
    grid: TimeGrid,
    dims: usize,
    n_paths: usize,
    seed: u64,
    tag: FiltrationTag,
    increments: Vec<f64>,
    levels: OnceLock<Vec<f64>>,
}

impl Clone for BrownianEnsemble {
    fn clone(&self) -> Self {
        Self {
            grid: self.grid,
            dims: self.dims,
            n_paths: self.n_paths,
            seed: self.seed,
            tag: self.tag,
            increments: self.increments.clone(),
            levels: OnceLock::new(),
        }
    }
}

impl PartialEq for BrownianEnsemble {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid
            && self.dims == other.dims
            && self.n_paths == other.n_paths
            && self.seed == other.seed
            && self.tag == other.tag
            && self
                .increments
                .iter()
                .zip(&other.increments)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl BrownianEnsemble {
    /// Builds an ensemble from step-major increments.
    pub fn from_increments(
        grid: TimeGrid,
        dims: usize,
        n_paths: usize,
        seed: u64,
        tag: FiltrationTag,
        increments: Vec<f64>,
    ) -> Result<Self> {
        if dims == 0 || n_paths == 0 {
            return Err(invalid("dims and n_paths must be positive"));
        }
        if increments.len() != grid.total_steps() * n_paths * dims {
            return Err(invalid(format!(
                "expected {} increments, got {}",
                grid.total_steps() * n_paths * dims,
                increments.len()
            )));
        }
        Ok(Self {
            grid,
            dims,
            n_paths,
            seed,
            tag,
            increments,
            levels: OnceLock::new(),
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tag(&self) -> FiltrationTag {
        self.tag
    }

    /// Relabels the ensemble; a fresh Brownian motion can stand for any tag.
    pub fn with_tag(mut self, tag: FiltrationTag) -> Self {
        self.tag = tag;
        self
    }

    fn stride(&self) -> usize {
        self.n_paths * self.dims
    }

    pub fn increment(&self, step: usize, path: usize, dim: usize) -> f64 {
        self.increments[step * self.stride() + path * self.dims + dim]
    }

    /// Cross-section of increments over `[t_step, t_{step+1}]`, laid out `[path][dim]`.
    pub fn increments_at(&self, step: usize) -> &[f64] {
        let s = self.stride();
        &self.increments[step * s..(step + 1) * s]
    }

    /// All increments, step-major.
    pub fn raw_increments(&self) -> &[f64] {
        &self.increments
    }

    fn levels(&self) -> &[f64] {
        self.levels.get_or_init(|| {
            let s = self.stride();
            let mut out = vec![0.0; (self.grid.total_steps() + 1) * s];
            for step in 0..self.grid.total_steps() {
                let (head, tail) = out.split_at_mut((step + 1) * s);
                let prev = &head[step * s..];
                let inc = self.increments_at(step);
                tail[..s]
                    .iter_mut()
                    .zip(prev.iter().zip(inc))
                    .for_each(|(o, (p, d))| *o = p + d);
            }
            out
        })
    }

    /// Cumulative path values at grid point `step`, laid out `[path][dim]`.
    pub fn level_at(&self, step: usize) -> &[f64] {
        let s = self.stride();
        &self.levels()[step * s..(step + 1) * s]
    }

    pub fn level(&self, step: usize, path: usize, dim: usize) -> f64 {
        self.level_at(step)[path * self.dims + dim]
    }

    /// Values of coordinate `dim` at grid point `step` across paths.
    pub fn level_column(&self, step: usize, dim: usize) -> Vec<f64> {
        self.level_at(step)
            .iter()
            .skip(dim)
            .step_by(self.dims)
            .copied()
            .collect()
    }

    pub fn increment_column(&self, step: usize, dim: usize) -> Vec<f64> {
        self.increments_at(step)
            .iter()
            .skip(dim)
            .step_by(self.dims)
            .copied()
            .collect()
    }
}

/// Simulates i.i.d. `N(0, Δ)` increments with counter-addressed draws.
pub fn generate_ensemble(
    grid: TimeGrid,
    dims: usize,
    n_paths: usize,
    seed: u64,
) -> Result<BrownianEnsemble> {
    if dims == 0 {
        return Err(invalid("dims must be at least 1"));
    }
    if n_paths < 2 {
        return Err(invalid("n_paths must be at least 2"));
    }
    let steps = grid.total_steps();
    let per_path = steps * dims;
    let sd = grid.dt().sqrt();
    let mut by_path = vec![0.0; n_paths * per_path];
    by_path
        .par_chunks_mut(per_path)
        .enumerate()
        .for_each(|(p, chunk)| {
            rng::fill_path_normals(seed, p as u64, chunk);
            chunk.iter_mut().for_each(|x| *x *= sd);
        });
    let stride = n_paths * dims;
    let mut increments = vec![0.0; steps * stride];
    increments
        .par_chunks_mut(stride)
        .enumerate()
        .for_each(|(step, row)| {
            for p in 0..n_paths {
                let src = &by_path[p * per_path + step * dims..p * per_path + (step + 1) * dims];
                row[p * dims..(p + 1) * dims].copy_from_slice(src);
            }
        });
    BrownianEnsemble::from_increments(grid, dims, n_paths, seed, FiltrationTag::G, increments)
}

/// `sgn` with `sgn(0) = +1`.
pub fn sign(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Drops the sign of each coordinate: `ΔW^F_i = sgn(W^G_{t_i}) ΔW^G_i`.
pub fn apply_sign_loss(base: &BrownianEnsemble) -> Result<BrownianEnsemble> {
    if base.tag != FiltrationTag::G {
        return Err(invalid(format!("sign loss expects a G ensemble, got {}", base.tag)));
    }
    let stride = base.stride();
    let mut increments = vec![0.0; base.increments.len()];
    increments
        .par_chunks_mut(stride)
        .enumerate()
        .for_each(|(step, row)| {
            let lv = base.level_at(step);
            let inc = base.increments_at(step);
            for ((o, w), d) in row.iter_mut().zip(lv).zip(inc) {
                *o = if *w < 0.0 { -d } else { *d };
            }
        });
    BrownianEnsemble::from_increments(
        base.grid,
        base.dims,
        base.n_paths,
        base.seed,
        FiltrationTag::F,
        increments,
    )
}

/// Time-compresses an F driver on `[0, 2T]` into `W^H_t = W^F_{2t} / √2` on `[0, T]`.
pub fn apply_anticipation(base: &BrownianEnsemble) -> Result<BrownianEnsemble> {
    if base.tag != FiltrationTag::F {
        return Err(invalid(format!("anticipation expects an F ensemble, got {}", base.tag)));
    }
    if base.grid.span_factor != 2 {
        return Err(invalid("anticipation requires the base grid to span [0, 2T]"));
    }
    let grid = base.grid.restricted();
    let stride = base.stride();
    let mut increments = vec![0.0; grid.total_steps() * stride];
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    increments
        .par_chunks_mut(stride)
        .enumerate()
        .for_each(|(i, row)| {
            let a = base.increments_at(2 * i);
            let b = base.increments_at(2 * i + 1);
            for ((o, x), y) in row.iter_mut().zip(a).zip(b) {
                *o = (x + y) * scale;
            }
        });
    BrownianEnsemble::from_increments(
        grid,
        base.dims,
        base.n_paths,
        base.seed,
        FiltrationTag::H,
        increments,
    )
}

/// Applies a transform to an ensemble.
pub fn apply_transform(
    kind: FiltrationTransform,
    base: &BrownianEnsemble,
) -> Result<BrownianEnsemble> {
    match kind {
        FiltrationTransform::Identity => Ok(base.clone()),
        FiltrationTransform::SignLoss => apply_sign_loss(base),
        FiltrationTransform::Anticipation => apply_anticipation(base),
    }
}

/// A consumption process measurable with respect to the coarse driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConsumptionPlan {
    /// `c_t = exp(slope * W^F_t)` using the first coordinate.
    Exponential { slope: f64 },
    /// Per-path values on `[0, T]`, step-major `[time][path]`.
    Tabulated { values: Vec<f64> },
}

impl ConsumptionPlan {
    /// `b_t = exp(W^F_t)`.
    pub fn b() -> Self {
        ConsumptionPlan::Exponential { slope: 1.0 }
    }

    /// `b'_t = exp(-W^F_t)`.
    pub fn b_prime() -> Self {
        ConsumptionPlan::Exponential { slope: -1.0 }
    }
}

/// Consumption values on the grid points of `[0, T]`, step-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanValues {
    n_paths: usize,
    n_times: usize,
    values: Vec<f64>,
}

impl PlanValues {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn at(&self, step: usize) -> &[f64] {
        &self.values[step * self.n_paths..(step + 1) * self.n_paths]
    }

    pub fn get(&self, step: usize, path: usize) -> f64 {
        self.values[step * self.n_paths + path]
    }

    /// Step-major values on `n_times` grid points.
    pub fn new(n_paths: usize, n_times: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_paths * n_times {
            return Err(invalid(format!(
                "expected {} values, got {}",
                n_paths * n_times,
                values.len()
            )));
        }
        Ok(Self {
            n_paths,
            n_times,
            values,
        })
    }

    /// Applies `f` pointwise.
    pub fn try_map(&self, f: impl Fn(f64) -> Result<f64>) -> Result<PlanValues> {
        let values = self.values.iter().map(|v| f(*v)).collect::<Result<Vec<f64>>>()?;
        Ok(Self { values, ..*self })
    }

    /// Deterministic plan, same value everywhere.
    pub fn constant(n_paths: usize, n_times: usize, value: f64) -> Self {
        Self {
            n_paths,
            n_times,
            values: vec![value; n_paths * n_times],
        }
    }
}

/// Evaluates `plan` on the coarse driver at the grid points of `[0, T]`.
pub fn evaluate_plan(plan: &ConsumptionPlan, coarse: &BrownianEnsemble) -> Result<PlanValues> {
    if coarse.tag != FiltrationTag::F {
        return Err(invalid(format!("plans are evaluated on F, got {}", coarse.tag)));
    }
    let n_times = coarse.grid.n_steps() + 1;
    let n_paths = coarse.n_paths;
    let values = match plan {
        ConsumptionPlan::Exponential { slope } => {
            let mut v = Vec::with_capacity(n_times * n_paths);
            for step in 0..n_times {
                let lv = coarse.level_at(step);
                for p in 0..n_paths {
                    let w = lv[p * coarse.dims];
                    if !w.is_finite() {
                        return Err(Error::NumericOverflow(format!(
                            "non-finite path value at step {step}, path {p}"
                        )));
                    }
                    let c = (slope * w).exp();
                    if !(c.is_finite() && c > 0.0) {
                        return Err(Error::NumericOverflow(format!(
                            "consumption exp({slope} * {w}) not representable"
                        )));
                    }
                    v.push(c);
                }
            }
            v
        }
        ConsumptionPlan::Tabulated { values } => {
            if values.len() != n_times * n_paths {
                return Err(invalid(format!(
                    "tabulated plan has {} values, expected {}",
                    values.len(),
                    n_times * n_paths
                )));
            }
            if let Some(bad) = values.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
                return Err(Error::NumericOverflow(format!(
                    "tabulated consumption must be finite and positive, found {bad}"
                )));
            }
            values.clone()
        }
    };
    Ok(PlanValues {
        n_paths,
        n_times,
        values,
    })
}

/// Supplies fine-filtration state features at each step.
pub trait FineState {
    fn features(&self, step: usize) -> Vec<Vec<f64>>;
}

/// Sign-loss fine state: `(W^G_t, W^F_t)` per coordinate.
pub struct SignLossFeatures<'a> {
    pub fine: &'a BrownianEnsemble,
    pub coarse: &'a BrownianEnsemble,
}

impl FineState for SignLossFeatures<'_> {
    fn features(&self, step: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for d in 0..self.fine.dims() {
            out.push(self.fine.level_column(step, d));
            out.push(self.coarse.level_column(step, d));
        }
        out
    }
}

/// Anticipation fine state at H-time `t_i`: the revealed values
/// `W^F_{t_i}`, `W^F_{t_{i+1} ∧ 2t_i}` and `W^F_{2t_i}` per coordinate.
pub struct AnticipationFeatures<'a> {
    pub coarse: &'a BrownianEnsemble,
}

impl FineState for AnticipationFeatures<'_> {
    fn features(&self, step: usize) -> Vec<Vec<f64>> {
        let last = self.coarse.grid().total_steps();
        let mut out = Vec::new();
        for d in 0..self.coarse.dims() {
            out.push(self.coarse.level_column(step.min(last), d));
            out.push(self.coarse.level_column((step + 1).min(2 * step).min(last), d));
            out.push(self.coarse.level_column((2 * step).min(last), d));
        }
        out
    }
}

/// The coarse driver's own past.
pub struct IdentityFeatures<'a> {
    pub coarse: &'a BrownianEnsemble,
}

impl FineState for IdentityFeatures<'_> {
    fn features(&self, step: usize) -> Vec<Vec<f64>> {
        (0..self.coarse.dims())
            .map(|d| self.coarse.level_column(step, d))
            .collect()
    }
}

/// Conditional-mean defect of a coarse increment at one step.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DefectStat {
    pub step: usize,
    pub t: f64,
    /// RMS over paths of the fitted `E[ΔW^coarse | fine state]`.
    pub defect: f64,
    /// RMS the fit would show for an unpredictable increment, `σ̂ √(p / N)`.
    pub stderr: f64,
    pub basis_dim: usize,
}

/// Regression estimate of `E[ΔW^coarse_i | fine state_i]` for each step in
/// `steps`, coordinate `dim`, on a degree-2 polynomial basis.
pub fn martingale_defect(
    coarse: &BrownianEnsemble,
    fine_state: &dyn FineState,
    steps: std::ops::Range<usize>,
    dim: usize,
) -> Result<Vec<DefectStat>> {
    let n = coarse.n_paths() as f64;
    let grid = coarse.grid();
    let mut out = Vec::with_capacity(steps.len());
    for step in steps {
        if step >= grid.total_steps() {
            return Err(invalid(format!("step {step} beyond grid")));
        }
        let feats = fine_state.features(step);
        let refs: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
        let basis = Basis::polynomial(&refs, 2);
        let p = basis.dim();
        let ls = LeastSquares::new(basis, 0.0, step)?;
        let y = coarse.increment_column(step, dim);
        let fit = ls.fitted(&y);
        let rms = (fit.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        let resid_var = y
            .iter()
            .zip(&fit)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / (n - p as f64).max(1.0);
        out.push(DefectStat {
            step,
            t: grid.time(step),
            defect: rms,
            stderr: (resid_var * p as f64 / n).sqrt(),
            basis_dim: p,
        });
    }
    Ok(out)
}
