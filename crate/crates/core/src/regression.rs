//! Cross-sectional least squares on polynomial bases.
//!
//! Every conditional expectation in the solvers is estimated here: a basis is
//! evaluated on the per-path state at one time step and targets are projected
//! onto its span. Features are standardized before the monomials are formed so
//! the Gram matrix stays well conditioned for cubic bases.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Relative pivot below which a column is treated as linearly dependent.
const PIVOT_TOL: f64 = 1e-13;

/// Column-major design matrix, intercept first.
#[derive(Debug, Clone)]
pub struct Basis {
    n: usize,
    cols: Vec<Vec<f64>>,
}

impl Basis {
    /// Intercept-only basis.
    pub fn constant(n: usize) -> Self {
        Self {
            n,
            cols: vec![vec![1.0; n]],
        }
    }

    /// All monomials of total degree `<= degree` in the standardized features.
    ///
    /// Features with (numerically) zero spread are dropped, so at `t = 0` the
    /// basis collapses to the intercept.
    pub fn polynomial(features: &[&[f64]], degree: usize) -> Self {
        let n = features.first().map_or(0, |f| f.len());
        let std_feats: Vec<Vec<f64>> = features
            .iter()
            .filter_map(|f| standardize(f))
            .collect();
        let exps = exponents(std_feats.len(), degree);
        let cols = exps
            .par_iter()
            .map(|e| monomial(&std_feats, e, n))
            .collect();
        Self { n, cols }
    }

    /// Adds `sign_j * m` for every `m` in `signed` and every sign column `j`.
    ///
    /// Sign columns that take a single value are skipped (they would duplicate
    /// the unsigned block).
    pub fn with_sign_split(mut self, signs: &[&[f64]], signed: &Basis) -> Self {
        for s in signs {
            let pos = s.iter().filter(|v| **v > 0.0).count();
            if pos == 0 || pos == s.len() {
                continue;
            }
            for c in &signed.cols {
                self.cols
                    .push(c.iter().zip(s.iter()).map(|(a, b)| a * b).collect());
            }
        }
        self
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.cols.len()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.cols[j]
    }
}

fn standardize(f: &[f64]) -> Option<Vec<f64>> {
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let var = f.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 1e-12 * (1.0 + mean.abs())) {
        return None;
    }
    Some(f.iter().map(|x| (x - mean) / sd).collect())
}

/// Exponent tuples of total degree `<= degree`, graded order, intercept first.
fn exponents(k: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; k]];
    for total in 1..=degree {
        let mut cur = vec![0; k];
        push_with_total(&mut out, &mut cur, 0, total);
    }
    out
}

fn push_with_total(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, pos: usize, left: usize) {
    if cur.is_empty() {
        return;
    }
    if pos == cur.len() - 1 {
        cur[pos] = left;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e;
        push_with_total(out, cur, pos + 1, left - e);
    }
    cur[pos] = 0;
}

fn monomial(feats: &[Vec<f64>], exps: &[usize], n: usize) -> Vec<f64> {
    let mut col = vec![1.0; n];
    for (f, &e) in feats.iter().zip(exps) {
        for _ in 0..e {
            col.iter_mut().zip(f).for_each(|(c, x)| *c *= x);
        }
    }
    col
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A factored least-squares problem that can project many targets.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    basis: Basis,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl LeastSquares {
    /// Factors the ridge-regularized Gram matrix of `basis`.
    ///
    /// `step` is only used to tag errors.
    pub fn new(basis: Basis, ridge: f64, step: usize) -> Result<Self> {
        let p = basis.dim();
        let n = basis.n_rows();
        if n < p {
            return Err(Error::Underdetermined {
                step,
                paths: n,
                basis: p,
            });
        }
        let pairs: Vec<(usize, usize)> = (0..p)
            .flat_map(|i| (0..=i).map(move |j| (i, j)))
            .collect();
        let entries: Vec<f64> = pairs
            .par_iter()
            .map(|&(i, j)| dot(&basis.cols[i], &basis.cols[j]))
            .collect();
        let mut gram = DMatrix::<f64>::zeros(p, p);
        for (&(i, j), v) in pairs.iter().zip(entries) {
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
        let max_diag = (0..p).map(|i| gram[(i, i)]).fold(0.0, f64::max);
        for i in 0..p {
            gram[(i, i)] += ridge;
        }
        let chol = gram
            .cholesky()
            .ok_or(Error::RankDeficient { step })?;
        let l = chol.l_dirty();
        let min_pivot = (0..p).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
        if !(min_pivot > PIVOT_TOL * max_diag) {
            return Err(Error::RankDeficient { step });
        }
        Ok(Self { basis, chol })
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn coefficients(&self, y: &[f64]) -> Vec<f64> {
        let rhs: Vec<f64> = self
            .basis
            .cols
            .par_iter()
            .map(|c| dot(c, y))
            .collect();
        self.chol.solve(&DVector::from_vec(rhs)).data.into()
    }

    /// Fitted values of the projection of `y`.
    pub fn fitted(&self, y: &[f64]) -> Vec<f64> {
        let coef = self.coefficients(y);
        self.evaluate(&coef)
    }

    pub fn evaluate(&self, coef: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.basis.n];
        for (c, col) in coef.iter().zip(&self.basis.cols) {
            out.par_iter_mut().zip(col.par_iter()).for_each(|(o, x)| *o += c * x);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponent_count_matches_binomial() {
        // C(k + d, d)
        assert_eq!(exponents(1, 3).len(), 4);
        assert_eq!(exponents(2, 3).len(), 10);
        assert_eq!(exponents(3, 3).len(), 20);
        assert_eq!(exponents(0, 3).len(), 1);
    }

    #[test]
    fn constant_features_collapse_to_intercept() {
        let z = vec![0.0; 50];
        let b = Basis::polynomial(&[&z, &z], 3);
        assert_eq!(b.dim(), 1);
    }

    #[test]
    fn recovers_cubic_exactly() {
        let x: Vec<f64> = (0..200).map(|i| -2.0 + 4.0 * i as f64 / 199.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 - 2.0 * v + 0.5 * v * v * v).collect();
        let ls = LeastSquares::new(Basis::polynomial(&[&x], 3), 0.0, 0).unwrap();
        let fit = ls.fitted(&y);
        for (a, b) in fit.iter().zip(&y) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn intercept_preserves_sample_mean() {
        let x: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let ls = LeastSquares::new(Basis::polynomial(&[&x], 2), 0.0, 0).unwrap();
        let fit = ls.fitted(&y);
        let m1 = fit.iter().sum::<f64>() / 100.0;
        let m2 = y.iter().sum::<f64>() / 100.0;
        assert!((m1 - m2).abs() < 1e-10);
    }

    #[test]
    fn too_few_rows_is_underdetermined() {
        let x = vec![0.1, 0.2, 0.3];
        let err = LeastSquares::new(Basis::polynomial(&[&x], 3), 0.0, 7).unwrap_err();
        assert!(matches!(err, Error::Underdetermined { step: 7, .. }));
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let x: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let b = Basis::polynomial(&[&x, &x], 1);
        let err = LeastSquares::new(b, 0.0, 3).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { step: 3 }));
    }

    #[test]
    fn sign_split_fits_signed_step() {
        let x: Vec<f64> = (0..400).map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / 400.0).collect();
        let s: Vec<f64> = x.iter().map(|v| if *v >= 0.0 { 1.0 } else { -1.0 }).collect();
        let y: Vec<f64> = s.iter().zip(&x).map(|(a, b)| 3.0 * a + b).collect();
        let base = Basis::polynomial(&[&x], 1);
        let signed = Basis::polynomial(&[&x], 0);
        let b = base.with_sign_split(&[&s], &signed);
        assert_eq!(b.dim(), 3);
        let fit = LeastSquares::new(b, 0.0, 0).unwrap().fitted(&y);
        for (a, b) in fit.iter().zip(&y) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
