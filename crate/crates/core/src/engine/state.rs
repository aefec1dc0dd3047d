//! Regression state per filtration.

use crate::paths::{sign, BrownianEnsemble, PlanValues};
use crate::regression::Basis;

/// Builds the regression basis at grid point `step`.
pub trait StateBasis: Sync {
    fn basis(&self, step: usize, degree: usize) -> Basis;
    fn n_paths(&self) -> usize;
}

/// Markov state `W^F_t` of the coarse driver itself.
pub struct CoarseState<'a> {
    pub coarse: &'a BrownianEnsemble,
}

impl StateBasis for CoarseState<'_> {
    fn basis(&self, step: usize, degree: usize) -> Basis {
        let cols: Vec<Vec<f64>> = (0..self.coarse.dims())
            .map(|d| self.coarse.level_column(step, d))
            .collect();
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        Basis::polynomial(&refs, degree)
    }

    fn n_paths(&self) -> usize {
        self.coarse.n_paths()
    }
}

/// `(W^G_t, W^F_t)` jointly, plus `sgn(W^G_t)` times polynomials of one
/// degree less. The sign block carries the `|W^G|` kink of the fine solution.
pub struct SignLossState<'a> {
    pub fine: &'a BrownianEnsemble,
    pub coarse: &'a BrownianEnsemble,
}

impl StateBasis for SignLossState<'_> {
    fn basis(&self, step: usize, degree: usize) -> Basis {
        let mut cols = Vec::new();
        let mut signs = Vec::new();
        for d in 0..self.fine.dims() {
            let g = self.fine.level_column(step, d);
            signs.push(g.iter().map(|v| sign(*v)).collect::<Vec<f64>>());
            cols.push(g);
            cols.push(self.coarse.level_column(step, d));
        }
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        let base = Basis::polynomial(&refs, degree);
        if degree == 0 {
            return base;
        }
        let signed = Basis::polynomial(&refs, degree - 1);
        let srefs: Vec<&[f64]> = signs.iter().map(|c| c.as_slice()).collect();
        base.with_sign_split(&srefs, &signed)
    }

    fn n_paths(&self) -> usize {
        self.fine.n_paths()
    }
}

/// State of the time-compressed filtration at `t_i`: `W^F_{2t∧T}`, `W^F_t`
/// and `∫_t^{2t∧T} v(c_s) ds`, read off the base driver on `[0, 2T]`.
pub struct AnticipationState<'a> {
    base: &'a BrownianEnsemble,
    n_steps: usize,
    /// Cumulative trapezoid of `v(c)` on the base grid, `[step][path]`.
    running: Option<Vec<f64>>,
}

impl<'a> AnticipationState<'a> {
    /// `felicity` holds `v(c_{t_j})` for `j = 0..=n_steps`, step-major.
    pub fn new(base: &'a BrownianEnsemble, felicity: Option<&PlanValues>) -> Self {
        let n_steps = base.grid().n_steps();
        let dt = base.grid().dt();
        let running = felicity.map(|v| {
            let np = v.n_paths();
            let mut acc = vec![0.0; (n_steps + 1) * np];
            for j in 0..n_steps {
                let (a, b) = (v.at(j), v.at(j + 1));
                for p in 0..np {
                    acc[(j + 1) * np + p] = acc[j * np + p] + 0.5 * dt * (a[p] + b[p]);
                }
            }
            acc
        });
        Self {
            base,
            n_steps,
            running,
        }
    }
}

impl StateBasis for AnticipationState<'_> {
    fn basis(&self, step: usize, degree: usize) -> Basis {
        let ahead = (2 * step).min(self.n_steps);
        let mut cols = Vec::new();
        for d in 0..self.base.dims() {
            cols.push(self.base.level_column(ahead, d));
            cols.push(self.base.level_column(step, d));
        }
        if let Some(acc) = &self.running {
            let np = self.base.n_paths();
            cols.push(
                (0..np)
                    .map(|p| acc[ahead * np + p] - acc[step * np + p])
                    .collect(),
            );
        }
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        Basis::polynomial(&refs, degree)
    }

    fn n_paths(&self) -> usize {
        self.base.n_paths()
    }
}
