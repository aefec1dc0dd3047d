//! Invariants that need no oracle data.

use gsdu::aggregators::{lipschitz_bound, Aggregator, Felicity, PiecewiseConstant};
use gsdu::closed_form::DiscountKernel;
use gsdu::engine::{solve_lsmc, CoarseState, SolverConfig};
use gsdu::neutrality::{FiltrationPair, PairKind};
use gsdu::paths::{apply_sign_loss, cache, evaluate_plan, generate_ensemble, ConsumptionPlan, FiltrationTag, TimeGrid};
use proptest::prelude::*;

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn ks(mut xs: Vec<f64>, sd: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            let c = normal_cdf(x / sd);
            (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max)
}

// √n D > 2.3 has probability below 1e-4 under the null
const KS_SCALE: f64 = 2.3;

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn pieces() -> impl Strategy<Value = PiecewiseConstant> {
    prop::collection::vec((0.0..1.0f64, -1.0..2.0f64), 1..5).prop_map(|mut v| {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v[0].0 = 0.0;
        v.dedup_by(|a, b| a.0 == b.0);
        PiecewiseConstant::new(v).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ensembles_repeat_bit_for_bit(seed in any::<u64>(), dims in 1usize..4, paths in 2usize..300, steps in 1usize..30) {
        let grid = TimeGrid::unit(1.0, steps).unwrap();
        let a = generate_ensemble(grid, dims, paths, seed).unwrap();
        let b = single_thread(|| generate_ensemble(grid, dims, paths, seed).unwrap());
        prop_assert_eq!(a.raw_increments(), b.raw_increments());
        let mut buf = Vec::new();
        cache::write_ensemble(&mut buf, &a).unwrap();
        let c = cache::read_ensemble(buf.as_slice(), FiltrationTag::G).unwrap();
        prop_assert_eq!(a.raw_increments(), c.raw_increments());
    }

    #[test]
    fn seeds_give_different_draws(seed in any::<u64>()) {
        let grid = TimeGrid::unit(1.0, 4).unwrap();
        let a = generate_ensemble(grid, 1, 8, seed).unwrap();
        let b = generate_ensemble(grid, 1, 8, seed.wrapping_add(1)).unwrap();
        prop_assert_ne!(a.raw_increments(), b.raw_increments());
    }

    #[test]
    fn sign_loss_keeps_increment_sizes(seed in any::<u64>(), dims in 1usize..3) {
        let base = generate_ensemble(TimeGrid::unit(1.0, 25).unwrap(), dims, 200, seed).unwrap();
        let f = apply_sign_loss(&base).unwrap();
        for i in 0..25 {
            let lv = base.level_at(i);
            for ((x, y), w) in base.increments_at(i).iter().zip(f.increments_at(i)).zip(lv) {
                let s = if *w < 0.0 { -1.0 } else { 1.0 };
                prop_assert_eq!(*y, s * x);
            }
        }
    }

    #[test]
    fn gamma_is_multiplicative(beta in pieces(), a in 0.0..1.0f64, b in 0.0..1.0f64, c in 0.0..1.0f64) {
        let mut v = [a, b, c];
        v.sort_by(f64::total_cmp);
        let k = DiscountKernel::new(beta);
        let lhs = k.gamma(v[0], v[1]) * k.gamma(v[1], v[2]);
        let rhs = k.gamma(v[0], v[2]);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        prop_assert!((k.gamma(v[0], v[0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lipschitz_drivers_respect_their_constant(
        kind in 0usize..3,
        t in 0.0..1.0f64,
        y in (-5.0..5.0f64, -5.0..5.0f64),
        z in (prop::collection::vec(-5.0..5.0f64, 2), prop::collection::vec(-5.0..5.0f64, 2)),
    ) {
        let beta = PiecewiseConstant::new(vec![(0.0, 0.4), (0.5, -0.3)]).unwrap();
        let agg = match kind {
            0 => Aggregator::expected_utility(Felicity::Zero, beta),
            1 => Aggregator::linear_z(Felicity::Zero, beta, 0.7),
            _ => Aggregator::chen_epstein(Felicity::Zero, beta, vec![0.5, 1.5]),
        };
        let k = lipschitz_bound(&agg, 2).unwrap();
        let lhs = (agg.core(t, y.0, &z.0) - agg.core(t, y.1, &z.1)).abs();
        let dz = z.0.iter().zip(&z.1).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        prop_assert!(lhs <= k * ((y.0 - y.1).abs() + dz) * (1.0 + 1e-12) + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn single_thread_solves_repeat(seed in any::<u64>()) {
        let f = generate_ensemble(TimeGrid::unit(1.0, 20).unwrap(), 1, 3_000, seed).unwrap().with_tag(FiltrationTag::F);
        let plan = evaluate_plan(&ConsumptionPlan::b(), &f).unwrap();
        let agg = Aggregator::chen_epstein(Felicity::Log, PiecewiseConstant::zero(), vec![1.0]);
        let run = || single_thread(|| {
            solve_lsmc(&agg, None, Some(&plan), &f, &CoarseState { coarse: &f }, &SolverConfig::default()).unwrap()
        });
        let (a, b) = (run(), run());
        prop_assert!(a.y.iter().zip(&b.y).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert!(a.z.iter().zip(&b.z).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn smaller_driver_gives_smaller_value(seed in any::<u64>(), k1 in 0.0..2.0f64, dk in 0.05..1.0f64) {
        let f = generate_ensemble(TimeGrid::unit(1.0, 40).unwrap(), 1, 10_000, seed).unwrap().with_tag(FiltrationTag::F);
        let plan = evaluate_plan(&ConsumptionPlan::b(), &f).unwrap();
        let st = CoarseState { coarse: &f };
        let solve = |k: f64| {
            let agg = Aggregator::chen_epstein(Felicity::Log, PiecewiseConstant::zero(), vec![k]);
            solve_lsmc(&agg, None, Some(&plan), &f, &st, &SolverConfig::default()).unwrap()
        };
        let (hi, lo) = (solve(k1), solve(k1 + dk));
        let d: Vec<f64> = hi.pathwise.iter().zip(&lo.pathwise).map(|(a, b)| a - b).collect();
        let n = d.len() as f64;
        let m = d.iter().sum::<f64>() / n;
        let se = (d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) / n).sqrt();
        prop_assert!(hi.y_at(0)[0] >= lo.y_at(0)[0] - 3.0 * se);
    }

    #[test]
    fn transformed_drivers_are_gaussian(seed in any::<u64>()) {
        let np = 20_000;
        let crit = KS_SCALE / (np as f64).sqrt();
        let sl = FiltrationPair::build(PairKind::SignLoss, 1.0, 40, 1, np, seed).unwrap();
        let an = FiltrationPair::build(PairKind::Anticipation, 1.0, 40, 1, np, seed).unwrap();
        prop_assert!(ks(sl.coarse().level_column(40, 0), 1.0) < crit);
        prop_assert!(ks(sl.coarse().increment_column(20, 0), (1.0f64 / 40.0).sqrt()) < crit);
        prop_assert!(ks(an.fine().level_column(40, 0), 1.0) < crit);
        prop_assert!(ks(an.fine().level_column(20, 0), 0.5f64.sqrt()) < crit);
    }
}
