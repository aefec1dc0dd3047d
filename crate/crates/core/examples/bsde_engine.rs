//! Regression Monte Carlo values of plan `c = exp(W)` under the coarse driver.

use gsdu::aggregators::{Aggregator, Felicity, PiecewiseConstant};
use gsdu::engine::{solve_lsmc, solve_quadratic_transform, CoarseState, SolverConfig};
use gsdu::paths::{evaluate_plan, generate_ensemble, ConsumptionPlan, FiltrationTag, TimeGrid};

fn main() -> gsdu::Result<()> {
    let f = generate_ensemble(TimeGrid::unit(1.0, 100)?, 1, 50_000, 2026)?.with_tag(FiltrationTag::F);
    let plan = evaluate_plan(&ConsumptionPlan::b(), &f)?;
    let state = CoarseState { coarse: &f };
    let cfg = SolverConfig::default();
    for agg in [
        Aggregator::expected_utility(Felicity::Log, PiecewiseConstant::zero()),
        Aggregator::linear_z(Felicity::Log, PiecewiseConstant::zero(), 1.0),
        Aggregator::chen_epstein(Felicity::Log, PiecewiseConstant::zero(), vec![1.0]),
    ] {
        let s = solve_lsmc(&agg, None, Some(&plan), &f, &state, &cfg)?;
        println!("{:<16} U0 {:+.5}", agg.name(), s.y_at(0)[0]);
    }
    let quad = Aggregator::quadratic(Felicity::Log, 0.0, 1.0);
    let s = solve_quadratic_transform(&quad, &plan, &f, &state, &cfg)?;
    println!("{:<16} U0 {:+.5}", quad.name(), s.y_at(0)[0]);
    Ok(())
}
