use nalgebra::DMatrix;
use serde::Serialize;

use super::FiltrationPair;
use crate::error::{invalid, Result};

/// Regression of `ΔW^F_i` on `ΔW^fine_i` in one state cell at one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellEstimate {
    pub step: usize,
    pub t: f64,
    /// Orthant of `W^fine_{t_i}`: bit `d` set when coordinate `d` is negative.
    pub cell: u32,
    pub count: usize,
    /// `M̂`, row-major `n × n`.
    pub m: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `‖M̂'M̂ - Id‖_F`.
    pub defect: f64,
    /// Too few samples; excluded from the summary.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RotationSummary {
    pub mean_defect: f64,
    pub max_defect: f64,
    pub min_defect: f64,
    pub retained_cells: usize,
    pub flagged_cells: usize,
    /// Steps before this one are left out (the first step mixes the two
    /// drivers by construction for the anticipation pair).
    pub first_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RotationEstimate {
    pub dims: usize,
    pub cells: Vec<CellEstimate>,
    pub summary: RotationSummary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationOptions {
    pub min_cell_samples: usize,
    pub first_step: usize,
}

impl Default for RotationOptions {
    fn default() -> Self {
        Self {
            min_cell_samples: 100,
            first_step: 1,
        }
    }
}

fn defect(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    (m.transpose() * m - DMatrix::identity(n, n)).norm()
}

/// Cellwise least-squares `M̂ = (Σ y x')(Σ x x')⁻¹` with `y = ΔW^F`,
/// `x = ΔW^fine`, cells being the sign orthants of the fine driver.
pub fn estimate_rotation(pair: &FiltrationPair, opts: RotationOptions) -> Result<RotationEstimate> {
    let coarse = pair.coarse();
    let fine = pair.fine();
    let n_dims = fine.dims();
    if coarse.dims() != n_dims || coarse.n_paths() != fine.n_paths() {
        return Err(invalid("pair drivers have different shapes"));
    }
    let grid = fine.grid().restricted();
    let n = grid.n_steps();
    if coarse.grid().restricted() != grid {
        return Err(invalid("pair drivers are not on a common grid"));
    }
    if n_dims > 16 {
        return Err(invalid("orthant cells support at most 16 dimensions"));
    }
    let n_cells = 1usize << n_dims;
    let np = fine.n_paths();
    let mut cells = Vec::with_capacity(n * n_cells);
    for i in 0..n {
        let lv = fine.level_at(i);
        let dx = fine.increments_at(i);
        let dy = coarse.increments_at(i);
        let mut xx = vec![DMatrix::<f64>::zeros(n_dims, n_dims); n_cells];
        let mut yx = vec![DMatrix::<f64>::zeros(n_dims, n_dims); n_cells];
        let mut yy = vec![DMatrix::<f64>::zeros(n_dims, n_dims); n_cells];
        let mut count = vec![0usize; n_cells];
        for p in 0..np {
            let w = &lv[p * n_dims..(p + 1) * n_dims];
            let c = w
                .iter()
                .enumerate()
                .fold(0usize, |acc, (d, v)| if *v < 0.0 { acc | (1 << d) } else { acc });
            let x = &dx[p * n_dims..(p + 1) * n_dims];
            let y = &dy[p * n_dims..(p + 1) * n_dims];
            count[c] += 1;
            for a in 0..n_dims {
                for b in 0..n_dims {
                    xx[c][(a, b)] += x[a] * x[b];
                    yx[c][(a, b)] += y[a] * x[b];
                    yy[c][(a, b)] += y[a] * y[b];
                }
            }
        }
        for c in 0..n_cells {
            let k = count[c];
            let mut est = CellEstimate {
                step: i,
                t: grid.time(i),
                cell: c as u32,
                count: k,
                m: vec![f64::NAN; n_dims * n_dims],
                stderr: vec![f64::NAN; n_dims * n_dims],
                defect: f64::NAN,
                flagged: true,
            };
            if k >= opts.min_cell_samples.max(n_dims + 1) {
                if let Some(inv) = xx[c].clone().try_inverse() {
                    let m = &yx[c] * &inv;
                    // residual second moment per row: Σ (y - M x)(y - M x)'
                    let resid = &yy[c] - &m * yx[c].transpose();
                    let dof = (k - n_dims) as f64;
                    for a in 0..n_dims {
                        let s2 = (resid[(a, a)] / dof).max(0.0);
                        for b in 0..n_dims {
                            est.m[a * n_dims + b] = m[(a, b)];
                            est.stderr[a * n_dims + b] = (s2 * inv[(b, b)]).sqrt();
                        }
                    }
                    est.defect = defect(&m);
                    est.flagged = false;
                }
            }
            cells.push(est);
        }
    }
    let kept: Vec<f64> = cells
        .iter()
        .filter(|c| !c.flagged && c.step >= opts.first_step)
        .map(|c| c.defect)
        .collect();
    if kept.is_empty() {
        return Err(invalid("no cell has enough samples for a rotation estimate"));
    }
    let summary = RotationSummary {
        mean_defect: kept.iter().sum::<f64>() / kept.len() as f64,
        max_defect: kept.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        min_defect: kept.iter().copied().fold(f64::INFINITY, f64::min),
        retained_cells: kept.len(),
        flagged_cells: cells.iter().filter(|c| c.flagged).count(),
        first_step: opts.first_step,
    };
    Ok(RotationEstimate {
        dims: n_dims,
        cells,
        summary,
    })
}
