//! Driver evaluation and structural metadata for the built-in aggregators.

use gsdu::aggregators::{check_structure, Aggregator, Felicity, PiecewiseConstant};

fn main() -> gsdu::Result<()> {
    let beta = PiecewiseConstant::new(vec![(0.0, 0.05), (0.5, 0.1)])?;
    let all = [
        Aggregator::expected_utility(Felicity::Log, beta.clone()),
        Aggregator::linear_z(Felicity::Log, beta.clone(), 1.0),
        Aggregator::chen_epstein(Felicity::Log, beta.clone(), vec![0.5]),
        Aggregator::quadratic(Felicity::Log, 0.05, 1.0),
    ];
    for agg in &all {
        let meta = check_structure(agg);
        let f = agg.eval_driver(0.25, 2.0, 1.0, &[0.3])?;
        println!(
            "{:<16} f(0.25, 2, 1, 0.3) = {f:+.5}  lipschitz {:?}  norm-dependent {}",
            agg.name(),
            meta.lipschitz_k,
            meta.h1_h2_norm_dependence
        );
    }
    Ok(())
}
