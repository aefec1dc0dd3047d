use super::{BSDESolution, SolverConfig, StateBasis, StepDiagnostics};
use crate::aggregators::{Aggregator, AggregatorKind};
use crate::error::{invalid, Error, Result};
use crate::paths::{BrownianEnsemble, PlanValues};

/// Exponential transform for `v(c) - β y - (α/2)‖z‖²`:
/// `Y_t = -(1/α) log E[exp(-α ∫_t^T v(c_s) ds) | 𝒜_t]` when `β = 0`.
///
/// Applied one step at a time so the conditional expectation is always of a
/// short-horizon exponential, centred by its own regression mean and shifted
/// by its maximum before exponentiating. A nonzero `β` is applied as an
/// explicit discount on each step.
pub fn solve_quadratic_transform(
    agg: &Aggregator,
    consumption: &PlanValues,
    driver: &BrownianEnsemble,
    state: &dyn StateBasis,
    cfg: &SolverConfig,
) -> Result<BSDESolution> {
    let (beta, alpha) = match agg.kind {
        AggregatorKind::Quadratic { beta, alpha } => (beta, alpha),
        _ => return Err(invalid("exponential transform needs a quadratic aggregator")),
    };
    agg.validate()?;
    cfg.validate()?;
    if !(alpha > 0.0) {
        return Err(invalid("exponential transform needs alpha > 0"));
    }
    let grid = driver.grid().restricted();
    let n = grid.n_steps();
    let np = driver.n_paths();
    let dims = driver.dims();
    let dt = grid.dt();
    if consumption.n_paths() != np || consumption.n_times() != n + 1 {
        return Err(invalid("consumption plan does not match the grid"));
    }
    if state.n_paths() != np {
        return Err(invalid("state and driver have different path counts"));
    }
    let v = consumption.try_map(|c| agg.felicity.eval(c))?;
    let mut y = vec![0.0; (n + 1) * np];
    let mut z = vec![0.0; n * np * dims];
    let mut pathwise = vec![0.0; np];
    let mut diagnostics = Vec::with_capacity(n);

    for i in (0..n).rev() {
        let ls = cfg.regression(state, i)?;
        let next = y[(i + 1) * np..(i + 2) * np].to_vec();
        let (v_now, v_next) = (v.at(i), v.at(i + 1));
        let x: Vec<f64> = next
            .iter()
            .zip(v_next)
            .map(|(a, b)| a + 0.5 * dt * b)
            .collect();
        let m = ls.fitted(&x);
        let expo: Vec<f64> = x.iter().zip(&m).map(|(a, b)| -alpha * (a - b)).collect();
        let shift = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = expo.iter().map(|a| (a - shift).exp()).collect();
        let floor = e.iter().copied().fold(f64::INFINITY, f64::min);
        let resid: Vec<f64> = x.iter().zip(&m).map(|(a, b)| a - b).collect();
        // control variate: e ≈ E_i[e](1 - α Z·ΔW), with Ẑ from the centred
        // residual so the correction is not correlated with ΔW in-sample
        let fit_e0 = ls.fitted(&e);
        let mut e_cv = e.clone();
        for d in 0..dims {
            let dw = driver.increment_column(i, d);
            let target: Vec<f64> = resid.iter().zip(&dw).map(|(r, w)| r * w).collect();
            let zf = ls.fitted(&target);
            for p in 0..np {
                z[(i * np + p) * dims + d] = zf[p] / dt;
                e_cv[p] += alpha * fit_e0[p] * zf[p] / dt * dw[p];
            }
        }
        let fit_e = ls.fitted(&e_cv);
        for p in 0..np {
            let ce = fit_e[p].max(floor);
            let yhat = 0.5 * dt * v_now[p] + m[p] - (ce.ln() + shift) / alpha;
            let yi = yhat - dt * beta * yhat;
            if !yi.is_finite() {
                return Err(Error::NumericOverflow(format!(
                    "exponential transform not finite at step {i}, path {p}"
                )));
            }
            y[i * np + p] = yi;
            let zz = &z[(i * np + p) * dims..(i * np + p + 1) * dims];
            let zn: f64 = zz.iter().map(|a| a * a).sum();
            pathwise[p] += 0.5 * dt * (v_now[p] + v_next[p]) - dt * (beta * yhat + 0.5 * alpha * zn);
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
