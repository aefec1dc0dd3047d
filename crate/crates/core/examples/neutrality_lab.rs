//! Coarse against fine solutions for κ-ignorance under both filtration pairs.

use gsdu::aggregators::{Aggregator, Felicity, PiecewiseConstant};
use gsdu::engine::SolverConfig;
use gsdu::neutrality::{
    estimate_rotation, run_neutrality_experiment, FiltrationPair, PairKind, Problem, RotationOptions, Tolerances,
};
use gsdu::paths::ConsumptionPlan;

fn main() -> gsdu::Result<()> {
    let agg = Aggregator::chen_epstein(Felicity::Log, PiecewiseConstant::zero(), vec![1.0]);
    let problem = Problem::Plan { plan: ConsumptionPlan::b() };
    for kind in [PairKind::SignLoss, PairKind::Anticipation] {
        let pair = FiltrationPair::build(kind, 1.0, 100, 1, 50_000, 20260101)?;
        let rep = run_neutrality_experiment(&agg, &problem, &pair, &SolverConfig::default(), &Tolerances::default())?;
        let rot = estimate_rotation(&pair, RotationOptions::default())?;
        println!(
            "{kind}: U0 coarse {:+.5} fine {:+.5}, within {:.4}, rotation defect {:.3}, verdict {:?}",
            rep.y0_coarse, rep.y0_fine, rep.within_fraction, rot.summary.max_defect, rep.verdict
        );
    }
    Ok(())
}
