//! Backward solvers for BSDEs and generalized stochastic differential utility.
//!
//! All solvers share one layout: values `Y` live on grid points `0..=n`
//! (step-major `[step][path]`), intensities `Z` on steps `0..n`
//! (`[step][path][dim]`). Conditional expectations are cross-sectional
//! regressions on a [`StateBasis`] chosen for the filtration being solved.

mod adjoint;
mod lsmc;
mod quadratic;
pub mod state;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::paths::{FiltrationTag, TimeGrid};
use crate::regression::{Basis, LeastSquares};

pub use adjoint::{solve_dual_infimum, solve_linear_adjoint, ControlProcess, DualSolution, PriorControl};
pub use lsmc::solve_lsmc;
pub use quadratic::solve_quadratic_transform;
pub use state::{AnticipationState, CoarseState, SignLossState, StateBasis};

/// Time-stepping of the driver term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Scheme {
    Explicit,
    Picard { iterations: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Total polynomial degree of the regression basis.
    pub degree: usize,
    /// Ridge is `ridge_factor * n_paths` on the standardized Gram matrix.
    pub ridge_factor: f64,
    pub scheme: Scheme,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            ridge_factor: 1e-8,
            scheme: Scheme::Explicit,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge_factor >= 0.0) {
            return Err(invalid("ridge_factor must be non-negative"));
        }
        if let Scheme::Picard { iterations } = self.scheme {
            if iterations == 0 {
                return Err(invalid("implicit scheme needs at least one Picard iteration"));
            }
        }
        Ok(())
    }

    /// Factors the regression at `step`, enforcing `dim < n_paths / 10`.
    pub(crate) fn regression(&self, state: &dyn StateBasis, step: usize) -> Result<LeastSquares> {
        let basis: Basis = state.basis(step, self.degree);
        let n = basis.n_rows();
        if basis.dim() * 10 >= n {
            return Err(crate::error::Error::Underdetermined {
                step,
                paths: n,
                basis: basis.dim(),
            });
        }
        LeastSquares::new(basis, self.ridge_factor * n as f64, step)
    }
}

/// Terminal value `ξ`, computed from the coarse driver only.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalClaim {
    values: Vec<f64>,
    tag: FiltrationTag,
}

impl TerminalClaim {
    pub fn new(values: Vec<f64>, tag: FiltrationTag) -> Result<Self> {
        if tag != FiltrationTag::F {
            return Err(invalid(format!("terminal claims must be F-measurable, got {tag}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("terminal claim has non-finite values"));
        }
        Ok(Self { values, tag })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn tag(&self) -> FiltrationTag {
        self.tag
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    /// RMS of the residual of the value regression.
    pub residual_rms: f64,
    pub basis_dim: usize,
}

#[derive(Debug, Clone)]
pub struct BSDESolution {
    pub grid: TimeGrid,
    pub tag: FiltrationTag,
    pub dims: usize,
    pub n_paths: usize,
    /// `[step][path]`, `n_steps + 1` rows.
    pub y: Vec<f64>,
    /// `[step][path][dim]`, `n_steps` rows.
    pub z: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
    /// Per-path `ξ + Σ Δ f`, whose mean estimates `Y₀` without the regressions.
    pub pathwise: Vec<f64>,
}

impl BSDESolution {
    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn y_at(&self, step: usize) -> &[f64] {
        &self.y[step * self.n_paths..(step + 1) * self.n_paths]
    }

    pub fn z_at(&self, step: usize) -> &[f64] {
        let s = self.n_paths * self.dims;
        &self.z[step * s..(step + 1) * s]
    }

    pub fn y0(&self) -> f64 {
        mean(self.y_at(0))
    }

    /// Standard error of `Y₀`, from the spread of the pathwise values.
    pub fn y0_stderr(&self) -> f64 {
        sd(&self.pathwise) / (self.n_paths as f64).sqrt()
    }

    pub fn z_norms_at(&self, step: usize) -> Vec<f64> {
        self.z_at(step)
            .chunks_exact(self.dims)
            .map(|z| z.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub(crate) fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    let n = v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormStat {
    pub step: usize,
    pub t: f64,
    pub mean: f64,
    pub stderr: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

/// Per-step summary of `‖Z_t‖`.
pub fn intensity_norm_profile(sol: &BSDESolution) -> Vec<NormStat> {
    (0..sol.n_steps())
        .map(|step| {
            let mut norms = sol.z_norms_at(step);
            let m = mean(&norms);
            let se = sd(&norms) / (norms.len() as f64).sqrt();
            norms.sort_by(f64::total_cmp);
            NormStat {
                step,
                t: sol.grid.time(step),
                mean: m,
                stderr: se,
                q05: quantile(&norms, 0.05),
                q50: quantile(&norms, 0.5),
                q95: quantile(&norms, 0.95),
            }
        })
        .collect()
}

/// Writes `t, mean_Y, stderr_Y, mean_normZ, stderr_normZ`; the last row has
/// no intensity and leaves those columns empty.
pub fn write_solution_csv<W: Write>(w: W, sol: &BSDESolution) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "mean_Y", "stderr_Y", "mean_normZ", "stderr_normZ"])
        .map_err(csv_err)?;
    let profile = intensity_norm_profile(sol);
    let root_n = (sol.n_paths as f64).sqrt();
    for step in 0..=sol.n_steps() {
        let y = sol.y_at(step);
        let mut rec = vec![
            format!("{}", sol.grid.time(step)),
            format!("{}", mean(y)),
            format!("{}", sd(y) / root_n),
        ];
        match profile.get(step) {
            Some(p) => {
                rec.push(format!("{}", p.mean));
                rec.push(format!("{}", p.stderr));
            }
            None => {
                rec.push(String::new());
                rec.push(String::new());
            }
        }
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> crate::error::Error {
    crate::error::Error::Format(e.to_string())
}
