use rayon::prelude::*;

use super::{mean, BSDESolution, SolverConfig, StateBasis, StepDiagnostics, TerminalClaim};
use crate::aggregators::{Aggregator, Felicity};
use crate::error::{invalid, Result};
use crate::paths::{sign, BrownianEnsemble, PlanValues};

/// Controls above this size are rejected as unbounded.
const MAX_CONTROL: f64 = 1e3;

/// A bounded process sampled on the grid steps.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlProcess {
    /// Same vector at every step and path.
    Constant(Vec<f64>),
    /// One vector per step, shared across paths.
    Deterministic(Vec<Vec<f64>>),
    /// `[step][path][dim]`.
    Sampled {
        dims: usize,
        n_paths: usize,
        values: Vec<f64>,
    },
}

impl ControlProcess {
    pub fn at(&self, step: usize, path: usize) -> &[f64] {
        match self {
            ControlProcess::Constant(v) => v,
            ControlProcess::Deterministic(rows) => &rows[step.min(rows.len() - 1)],
            ControlProcess::Sampled {
                dims,
                n_paths,
                values,
            } => {
                let off = (step * n_paths + path) * dims;
                &values[off..off + dims]
            }
        }
    }

    pub fn dims(&self) -> usize {
        match self {
            ControlProcess::Constant(v) => v.len(),
            ControlProcess::Deterministic(rows) => rows.first().map_or(0, |r| r.len()),
            ControlProcess::Sampled { dims, .. } => *dims,
        }
    }

    fn values(&self) -> Box<dyn Iterator<Item = &f64> + '_> {
        match self {
            ControlProcess::Constant(v) => Box::new(v.iter()),
            ControlProcess::Deterministic(rows) => Box::new(rows.iter().flatten()),
            ControlProcess::Sampled { values, .. } => Box::new(values.iter()),
        }
    }

    fn check(&self, dims: usize, n_steps: usize, n_paths: usize, what: &str) -> Result<()> {
        if self.dims() != dims {
            return Err(invalid(format!("{what} has dimension {}, expected {dims}", self.dims())));
        }
        match self {
            ControlProcess::Deterministic(rows) if rows.len() < n_steps => {
                return Err(invalid(format!("{what} has {} steps, expected {n_steps}", rows.len())));
            }
            ControlProcess::Sampled { values, .. } if values.len() != n_steps * n_paths * dims => {
                return Err(invalid(format!("{what} does not match the grid")));
            }
            ControlProcess::Sampled { n_paths: np, .. } if *np != n_paths => {
                return Err(invalid(format!("{what} does not match the path count")));
            }
            _ => {}
        }
        if self.values().any(|v| !(v.abs() <= MAX_CONTROL)) {
            return Err(invalid(format!("{what} must be bounded")));
        }
        Ok(())
    }
}

/// Linear BSDE `-dY = (φ + ρ Y + κ·Z) dt - Z·dW` through its adjoint
/// `dΥ = Υ (ρ dt + κ·dW)`: `Y_t = E[Υ_t^T ξ + ∫_t^T Υ_t^s φ_s ds | 𝒜_t]`.
///
/// `Υ` is advanced by its exact one-step exponential; the weighted future is
/// accumulated backward per path and regressed on the state.
pub fn solve_linear_adjoint(
    rho: &ControlProcess,
    kappa: &ControlProcess,
    phi: Option<&PlanValues>,
    terminal: Option<&TerminalClaim>,
    driver: &BrownianEnsemble,
    state: &dyn StateBasis,
    cfg: &SolverConfig,
) -> Result<BSDESolution> {
    cfg.validate()?;
    let grid = driver.grid().restricted();
    let n = grid.n_steps();
    let np = driver.n_paths();
    let dims = driver.dims();
    let dt = grid.dt();
    rho.check(1, n, np, "rho")?;
    kappa.check(dims, n, np, "kappa")?;
    if let Some(f) = phi {
        if f.n_paths() != np || f.n_times() != n + 1 {
            return Err(invalid("payoff rate does not match the grid"));
        }
    }
    let mut acc = match terminal {
        Some(xi) if xi.values().len() != np => {
            return Err(invalid("terminal claim does not match the path count"))
        }
        Some(xi) => xi.values().to_vec(),
        None => vec![0.0; np],
    };
    let mut y = vec![0.0; (n + 1) * np];
    y[n * np..].copy_from_slice(&acc);
    let mut z = vec![0.0; n * np * dims];
    let mut diagnostics = Vec::with_capacity(n);

    for i in (0..n).rev() {
        let inc = driver.increments_at(i);
        let ratio: Vec<f64> = (0..np)
            .into_par_iter()
            .map(|p| {
                let r = rho.at(i, p)[0];
                let k = kappa.at(i, p);
                let dw = &inc[p * dims..(p + 1) * dims];
                let kw: f64 = k.iter().zip(dw).map(|(a, b)| a * b).sum();
                let kk: f64 = k.iter().map(|a| a * a).sum();
                (r * dt + kw - 0.5 * kk * dt).exp()
            })
            .collect();
        for p in 0..np {
            let (f0, f1) = phi.map_or((0.0, 0.0), |f| (f.get(i, p), f.get(i + 1, p)));
            acc[p] = ratio[p] * acc[p] + 0.5 * dt * (f0 + ratio[p] * f1);
        }
        let ls = cfg.regression(state, i)?;
        let next: Vec<f64> = (0..np)
            .map(|p| y[(i + 1) * np + p] + phi.map_or(0.0, |f| 0.5 * dt * f.get(i + 1, p)))
            .collect();
        let fit_next = ls.fitted(&next);
        let resid: Vec<f64> = next.iter().zip(&fit_next).map(|(a, b)| a - b).collect();
        for d in 0..dims {
            let target: Vec<f64> = resid
                .iter()
                .zip(inc.iter().skip(d).step_by(dims))
                .map(|(r, w)| r * w)
                .collect();
            let zf = ls.fitted(&target);
            for p in 0..np {
                z[(i * np + p) * dims + d] = zf[p] / dt;
            }
        }
        let fit_acc = if i == 0 {
            vec![mean(&acc); np]
        } else {
            ls.fitted(&acc)
        };
        y[i * np..(i + 1) * np].copy_from_slice(&fit_acc);
        let rms = (acc
            .iter()
            .zip(&fit_acc)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / np as f64)
            .sqrt();
        diagnostics.push(StepDiagnostics {
            step: i,
            residual_rms: rms,
            basis_dim: ls.basis().dim(),
        });
    }
    diagnostics.reverse();
    Ok(BSDESolution {
        grid,
        tag: driver.tag(),
        dims,
        n_paths: np,
        y,
        z,
        diagnostics,
        pathwise: acc,
    })
}

/// A prior control `θ`; the associated linear driver uses `κ = -θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorControl {
    pub label: String,
    pub theta: ControlProcess,
}

impl PriorControl {
    pub fn constant(theta: Vec<f64>) -> Self {
        let label = format!(
            "constant[{}]",
            theta.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
        );
        Self {
            label,
            theta: ControlProcess::Constant(theta),
        }
    }

    /// `θ_t = k sgn(Ẑ_t)` from a pilot solution.
    pub fn feedback(k: &[f64], pilot: &BSDESolution) -> Self {
        let dims = pilot.dims;
        let values = pilot
            .z
            .iter()
            .enumerate()
            .map(|(j, zv)| k[(j % dims).min(k.len() - 1)] * sign(*zv))
            .collect();
        Self {
            label: "feedback".into(),
            theta: ControlProcess::Sampled {
                dims,
                n_paths: pilot.n_paths,
                values,
            },
        }
    }

    /// Constants `θ ∈ {-k, -k/2, 0, k/2, k}` (componentwise) and, with a
    /// pilot, the feedback policy.
    pub fn default_menu(k: &[f64], pilot: Option<&BSDESolution>) -> Vec<Self> {
        let mut out: Vec<Self> = [-1.0, -0.5, 0.0, 0.5, 1.0]
            .iter()
            .map(|s| Self::constant(k.iter().map(|v| s * v).collect()))
            .collect();
        if let Some(p) = pilot {
            out.push(Self::feedback(k, p));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct DualSolution {
    /// Pointwise minimum over the policies.
    pub solution: BSDESolution,
    /// `(label, Y₀, stderr)` per policy.
    pub values_at_zero: Vec<(String, f64, f64)>,
    pub argmin: usize,
}

impl DualSolution {
    pub fn argmin_label(&self) -> &str {
        &self.values_at_zero[self.argmin].0
    }
}

/// Dual representation of a concave recursion as an infimum of linear ones,
/// `U_t = ess inf_θ U_t^θ`, over a finite policy menu.
///
/// Each policy gives `ρ = y-coefficient`, `κ = -θ` and payoff rate
/// `φ = H(t, c, ρ, κ)` from the aggregator's polar, which must be finite.
pub fn solve_dual_infimum(
    agg: &Aggregator,
    terminal: Option<&TerminalClaim>,
    consumption: Option<&PlanValues>,
    driver: &BrownianEnsemble,
    state: &dyn StateBasis,
    policies: &[PriorControl],
    cfg: &SolverConfig,
) -> Result<DualSolution> {
    if policies.is_empty() {
        return Err(invalid("policy list is empty"));
    }
    agg.validate()?;
    let grid = driver.grid().restricted();
    let n = grid.n_steps();
    let np = driver.n_paths();
    if consumption.is_none() && agg.felicity != Felicity::Zero {
        return Err(invalid("a felicity term needs a consumption plan"));
    }
    let rho_rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            agg.discount_at(grid.time(i))
                .map(|b| vec![-b])
                .ok_or_else(|| invalid("aggregator has no linear discount term"))
        })
        .collect::<Result<_>>()?;
    let rho = ControlProcess::Deterministic(rho_rows);
    let mut best: Option<BSDESolution> = None;
    let mut values = Vec::with_capacity(policies.len());
    for pol in policies {
        let kappa = negate(&pol.theta);
        let mut phi = Vec::with_capacity((n + 1) * np);
        for j in 0..=n {
            let t = grid.time(j);
            let r = rho.at(j.min(n - 1), 0)[0];
            for p in 0..np {
                let c = consumption.map_or(1.0, |c| c.get(j, p));
                let h = agg.polar(t, c, r, kappa.at(j.min(n - 1), p))?;
                if !h.is_finite() {
                    return Err(invalid(format!(
                        "policy {} leaves the polar domain at step {j}",
                        pol.label
                    )));
                }
                phi.push(h);
            }
        }
        let phi = PlanValues::new(np, n + 1, phi)?;
        let sol = solve_linear_adjoint(&rho, &kappa, Some(&phi), terminal, driver, state, cfg)?;
        values.push((pol.label.clone(), sol.y0(), sol.y0_stderr()));
        best = Some(match best {
            None => sol,
            Some(mut b) => {
                for (k, v) in b.y.iter_mut().enumerate() {
                    if sol.y[k] < *v {
                        *v = sol.y[k];
                        if k < n * np {
                            let (step, p) = (k / np, k % np);
                            let d = sol.dims;
                            let off = (step * np + p) * d;
                            b.z[off..off + d].copy_from_slice(&sol.z[off..off + d]);
                        }
                    }
                }
                if sol.y0() < b.y0() {
                    b.pathwise = sol.pathwise.clone();
                }
                b
            }
        });
    }
    let argmin = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(DualSolution {
        solution: best.expect("non-empty policy list"),
        values_at_zero: values,
        argmin,
    })
}

fn negate(c: &ControlProcess) -> ControlProcess {
    match c {
        ControlProcess::Constant(v) => ControlProcess::Constant(v.iter().map(|x| -x).collect()),
        ControlProcess::Deterministic(rows) => ControlProcess::Deterministic(
            rows.iter().map(|r| r.iter().map(|x| -x).collect()).collect(),
        ),
        ControlProcess::Sampled {
            dims,
            n_paths,
            values,
        } => ControlProcess::Sampled {
            dims: *dims,
            n_paths: *n_paths,
            values: values.iter().map(|x| -x).collect(),
        },
    }
}
