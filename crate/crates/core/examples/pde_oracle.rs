//! PDE oracle for the tanh driver: refinement and the intensity band.

use gsdu::paths::{generate_ensemble, TimeGrid};
use gsdu::pde::{
    intensity_bound_check, reconstruct_markov_bsde, refinement_study, solve_quasilinear, tanh_aggregator,
    tanh_h3_on, BoundCheckOptions, ReconstructOptions, ScalarDriver, SpaceTimeGrid,
};

fn main() -> gsdu::Result<()> {
    let (beta, gamma) = (0.2, 0.2);
    let driver = ScalarDriver::from_aggregator(&tanh_aggregator(beta, gamma), 1.0)?;
    let grid = SpaceTimeGrid::centered(0.0, 241, 100, 1.0)?;
    let sol = solve_quasilinear(&driver, grid)?;
    let (theta, dtheta) = sol.interpolate(0.0, 0.0);
    println!("theta(0, 0) = {theta:.6}, d/dx = {dtheta:.6}");

    let study = refinement_study(&driver, grid, 0.0, 3)?;
    println!("refinement values {:?} orders {:?}", study.values, study.orders);

    let paths = generate_ensemble(TimeGrid::unit(1.0, 100)?, 1, 5_000, 1)?;
    let rec = reconstruct_markov_bsde(&sol, &paths, 0.0, ReconstructOptions::for_grid(&grid))?;
    let h3 = tanh_h3_on(beta, gamma, grid.x_min, grid.x_max);
    let report = intensity_bound_check(&rec, &h3, 1.0, BoundCheckOptions { slack: 0.05, t_max: 0.95 })?;
    println!(
        "bound check pass {} over {} points, min margin {:.4}",
        report.pass, report.retained_points, report.min_margin
    );
    Ok(())
}
