use rayon::prelude::*;

use super::{BSDESolution, Scheme, SolverConfig, StateBasis, StepDiagnostics, TerminalClaim};
use crate::aggregators::{Aggregator, Felicity};
use crate::error::{invalid, Error, Result};
use crate::paths::{BrownianEnsemble, PlanValues};

/// Regression Monte Carlo backward induction.
///
/// With `consumption` the problem is a utility recursion with zero terminal
/// value; without it, a BSDE with terminal claim `terminal` (zero if `None`)
/// and a driver whose felicity must be [`Felicity::Zero`]. One step reads
///
/// ```text
/// X   = Y_{i+1} + Δ/2 v(c_{i+1})
/// Z_i = E_i[(X - E_i X) ΔW_i] / Δ
/// Y_i = E_i[X] + Δ/2 v(c_i) + Δ g(t_i, Y*, Z_i)
/// ```
///
/// where `Y*` is the conditional estimate (explicit) or the Picard iterate.
pub fn solve_lsmc(
    agg: &Aggregator,
    terminal: Option<&TerminalClaim>,
    consumption: Option<&PlanValues>,
    driver: &BrownianEnsemble,
    state: &dyn StateBasis,
    cfg: &SolverConfig,
) -> Result<BSDESolution> {
    if agg.is_quadratic() {
        return Err(Error::RouteToExponentialTransform);
    }
    agg.validate()?;
    cfg.validate()?;
    let grid = driver.grid().restricted();
    let n = grid.n_steps();
    let np = driver.n_paths();
    let dims = driver.dims();
    let dt = grid.dt();
    if state.n_paths() != np {
        return Err(invalid("state and driver have different path counts"));
    }
    if terminal.is_some() && consumption.is_some() {
        return Err(invalid("consumption plans imply a zero terminal value"));
    }
    if consumption.is_none() && agg.felicity != Felicity::Zero {
        return Err(invalid("a felicity term needs a consumption plan"));
    }
    let felicity = match consumption {
        Some(c) => {
            if c.n_paths() != np || c.n_times() != n + 1 {
                return Err(invalid("consumption plan does not match the grid"));
            }
            Some(c.try_map(|x| agg.felicity.eval(x))?)
        }
        None => None,
    };
    let mut y = vec![0.0; (n + 1) * np];
    let mut pathwise = vec![0.0; np];
    if let Some(xi) = terminal {
        if xi.values().len() != np {
            return Err(invalid("terminal claim does not match the path count"));
        }
        y[n * np..].copy_from_slice(xi.values());
        pathwise.copy_from_slice(xi.values());
    }
    let mut z = vec![0.0; n * np * dims];
    let mut diagnostics = Vec::with_capacity(n);
    let zero = vec![0.0; np];

    for i in (0..n).rev() {
        let t = grid.time(i);
        let ls = cfg.regression(state, i)?;
        let (head, tail) = y.split_at_mut((i + 1) * np);
        let next = &tail[..np];
        let fit_y = ls.fitted(next);
        let (v_now, v_next) = match &felicity {
            Some(v) => (v.at(i), v.at(i + 1)),
            None => (zero.as_slice(), zero.as_slice()),
        };
        let fit_v = if felicity.is_some() {
            ls.fitted(v_next)
        } else {
            zero.clone()
        };
        // the half-step felicity belongs to the Z target: without it the
        // estimate lags by Δ/2 ∂v along the step
        let resid: Vec<f64> = (0..np)
            .map(|p| next[p] - fit_y[p] + 0.5 * dt * (v_next[p] - fit_v[p]))
            .collect();
        let z_row = &mut z[i * np * dims..(i + 1) * np * dims];
        for d in 0..dims {
            let target: Vec<f64> = resid
                .iter()
                .zip(driver.increments_at(i).iter().skip(d).step_by(dims))
                .map(|(r, w)| r * w)
                .collect();
            let zf = ls.fitted(&target);
            for p in 0..np {
                z_row[p * dims + d] = zf[p] / dt;
            }
        }
        let z_row = &z[i * np * dims..(i + 1) * np * dims];
        // control variate: the martingale part Ẑ·ΔW carries most of the
        // variance of Y_{i+1}, remove it before the value regression
        let inc = driver.increments_at(i);
        let controlled: Vec<f64> = (0..np)
            .map(|p| {
                let zw: f64 = (0..dims).map(|d| z_row[p * dims + d] * inc[p * dims + d]).sum();
                next[p] - zw
            })
            .collect();
        let fit_y = ls.fitted(&controlled);
        let scheme = cfg.scheme;
        let out: Vec<(f64, f64)> = (0..np)
            .into_par_iter()
            .map(|p| {
                let yhat = fit_y[p] + 0.5 * dt * (fit_v[p] + v_now[p]);
                let zp = &z_row[p * dims..(p + 1) * dims];
                let mut g = agg.core(t, yhat, zp);
                let mut yi = yhat + dt * g;
                if let Scheme::Picard { iterations } = scheme {
                    for _ in 0..iterations {
                        g = agg.core(t, yi, zp);
                        yi = yhat + dt * g;
                    }
                }
                (yi, 0.5 * dt * (v_now[p] + v_next[p]) + dt * g)
            })
            .collect();
        let row = &mut head[i * np..];
        for (p, (yi, inc)) in out.into_iter().enumerate() {
            row[p] = yi;
            pathwise[p] += inc;
        }
        if y[i * np..(i + 1) * np].iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow(format!("non-finite value at step {i}")));
        }
        let rms = (resid.iter().map(|r| r * r).sum::<f64>() / np as f64).sqrt();
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
        pathwise,
    })
}
