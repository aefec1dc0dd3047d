//! Drivers and intertemporal aggregators.
//!
//! Every aggregator splits as `f(t, c, y, z) = v(c) + g(t, y, z)`: a felicity
//! term that only sees consumption and a core that only sees the value and the
//! intensity. The solvers integrate the felicity term by trapezoid along the
//! path and treat the core pointwise; BSDE drivers use [`Felicity::Zero`].

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Felicity `v(c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Felicity {
    Log,
    /// `c^p` with `p ∈ (0, 1)`.
    Power { p: f64 },
    /// `tanh(log c)`: bounded, strictly increasing.
    TanhBounded,
    /// No consumption term (pure BSDE driver).
    Zero,
}

impl Felicity {
    pub fn eval(&self, c: f64) -> Result<f64> {
        match *self {
            Felicity::Zero => Ok(0.0),
            Felicity::Log | Felicity::TanhBounded if !(c > 0.0) => {
                Err(Error::Domain(format!("felicity requires c > 0, got {c}")))
            }
            Felicity::Log => Ok(c.ln()),
            Felicity::TanhBounded => Ok(c.ln().tanh()),
            Felicity::Power { .. } if c < 0.0 => {
                Err(Error::Domain(format!("power felicity requires c >= 0, got {c}")))
            }
            Felicity::Power { p } => Ok(c.powf(p)),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Felicity::Power { p } if !(p > 0.0 && p < 1.0) => {
                Err(invalid(format!("power felicity needs p in (0, 1), got {p}")))
            }
            _ => Ok(()),
        }
    }
}

/// Piecewise-constant function of time: `value_k` on `[t_k, t_{k+1})`, the
/// last value extending to `+∞` and the first to `-∞`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseConstant {
    breaks: Vec<(f64, f64)>,
}

impl PiecewiseConstant {
    pub fn constant(v: f64) -> Self {
        Self {
            breaks: vec![(0.0, v)],
        }
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    /// Breakpoints `(t_k, value_k)`, strictly increasing in `t_k`.
    pub fn new(breaks: Vec<(f64, f64)>) -> Result<Self> {
        if breaks.is_empty() {
            return Err(invalid("piecewise-constant function needs at least one breakpoint"));
        }
        if breaks.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(invalid("breakpoints must be strictly increasing"));
        }
        if breaks.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
            return Err(invalid("breakpoints must be finite"));
        }
        Ok(Self { breaks })
    }

    pub fn breaks(&self) -> &[(f64, f64)] {
        &self.breaks
    }

    pub fn at(&self, t: f64) -> f64 {
        let idx = self.breaks.partition_point(|(b, _)| *b <= t);
        self.breaks[idx.saturating_sub(1)].1
    }

    pub fn sup_abs(&self) -> f64 {
        self.breaks.iter().map(|(_, v)| v.abs()).fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.breaks.iter().all(|(_, v)| *v == 0.0)
    }

    /// Pieces `(start, end, value)` covering `[a, b]`.
    pub fn pieces(&self, a: f64, b: f64) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        if !(b > a) {
            return out;
        }
        let mut start = a;
        for (k, &(_, v)) in self.breaks.iter().enumerate() {
            let lo = if k == 0 { f64::NEG_INFINITY } else { self.breaks[k].0 };
            let hi = self.breaks.get(k + 1).map_or(f64::INFINITY, |n| n.0);
            if hi <= start || lo >= b {
                continue;
            }
            let end = hi.min(b);
            out.push((start, end, v));
            start = end;
        }
        out
    }

    /// `∫_a^b value(u) du`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if b < a {
            return -self.integral(b, a);
        }
        self.pieces(a, b).iter().map(|(s, e, v)| (e - s) * v).sum()
    }
}

/// Derivative bounds that make the intensity strictly nonzero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct H3Constants {
    /// Bound on the first derivatives.
    pub l: f64,
    /// Lower bound on `|∂_c f|`.
    pub k_lower: f64,
    /// Lipschitz constant of the first derivatives.
    pub m_lip: f64,
    /// Bound on `|f(t, c, 0, z)|`.
    pub c_bound: f64,
}

impl H3Constants {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_lower > 0.0) {
            return Err(invalid(format!("k_lower must be positive, got {}", self.k_lower)));
        }
        if ![self.l, self.m_lip, self.c_bound, self.k_lower]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(invalid("derivative bounds must be finite"));
        }
        Ok(())
    }
}

/// Structural facts about an aggregator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorMeta {
    /// Lipschitz constant in `(y, z)`; `None` when the aggregator is not Lipschitz.
    pub lipschitz_k: Option<f64>,
    /// Depends on `z` only through the Euclidean norm.
    pub h1_h2_norm_dependence: bool,
    pub concave_in_yz: bool,
    pub h3: Option<H3Constants>,
}

type CoreFn = dyn Fn(f64, f64, &[f64]) -> f64 + Send + Sync;

/// User-supplied core `g(t, y, z)` with declared metadata.
#[derive(Clone)]
pub struct CustomCore {
    pub name: String,
    pub core: Arc<CoreFn>,
    pub meta: AggregatorMeta,
}

impl fmt::Debug for CustomCore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomCore")
            .field("name", &self.name)
            .field("meta", &self.meta)
            .finish()
    }
}

#[derive(Debug, Clone)]
pub enum AggregatorKind {
    /// `v(c) - β(t) y`.
    ExpectedUtility { beta: PiecewiseConstant },
    /// `v(c) - β(t) y - γ Σ z_i`.
    LinearZ { beta: PiecewiseConstant, gamma: f64 },
    /// `v(c) - β(t) y - Σ k_i |z_i|` (κ-ignorance).
    ChenEpstein { beta: PiecewiseConstant, k: Vec<f64> },
    /// `v(c) - β y - (α/2) ‖z‖²`.
    Quadratic { beta: f64, alpha: f64 },
    Custom(CustomCore),
}

#[derive(Debug, Clone)]
pub struct Aggregator {
    pub felicity: Felicity,
    pub kind: AggregatorKind,
}

impl Aggregator {
    pub fn expected_utility(felicity: Felicity, beta: PiecewiseConstant) -> Self {
        Self {
            felicity,
            kind: AggregatorKind::ExpectedUtility { beta },
        }
    }

    pub fn linear_z(felicity: Felicity, beta: PiecewiseConstant, gamma: f64) -> Self {
        Self {
            felicity,
            kind: AggregatorKind::LinearZ { beta, gamma },
        }
    }

    pub fn chen_epstein(felicity: Felicity, beta: PiecewiseConstant, k: Vec<f64>) -> Self {
        Self {
            felicity,
            kind: AggregatorKind::ChenEpstein { beta, k },
        }
    }

    pub fn quadratic(felicity: Felicity, beta: f64, alpha: f64) -> Self {
        Self {
            felicity,
            kind: AggregatorKind::Quadratic { beta, alpha },
        }
    }

    pub fn custom(felicity: Felicity, core: CustomCore) -> Self {
        Self {
            felicity,
            kind: AggregatorKind::Custom(core),
        }
    }

    /// Checks parameter ranges.
    pub fn validate(&self) -> Result<()> {
        self.felicity.validate()?;
        match &self.kind {
            AggregatorKind::ChenEpstein { k, .. } => {
                if k.is_empty() || k.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                    return Err(invalid("chen_epstein needs a non-empty, non-negative k"));
                }
            }
            AggregatorKind::Quadratic { beta, alpha } => {
                if !(*beta >= 0.0 && *alpha >= 0.0) {
                    return Err(invalid("quadratic needs beta >= 0 and alpha >= 0"));
                }
            }
            AggregatorKind::LinearZ { gamma, .. } if !gamma.is_finite() => {
                return Err(invalid("gamma must be finite"));
            }
            AggregatorKind::Custom(c) => {
                if let Some(h3) = &c.meta.h3 {
                    h3.validate()?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        match &self.kind {
            AggregatorKind::ExpectedUtility { .. } => "expected_utility".into(),
            AggregatorKind::LinearZ { .. } => "linear_z".into(),
            AggregatorKind::ChenEpstein { .. } => "chen_epstein".into(),
            AggregatorKind::Quadratic { .. } => "quadratic".into(),
            AggregatorKind::Custom(c) => c.name.clone(),
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self.kind, AggregatorKind::Quadratic { .. })
    }

    /// `y`-coefficient `-β(t)` for kinds linear in `y`.
    pub fn discount_at(&self, t: f64) -> Option<f64> {
        match &self.kind {
            AggregatorKind::ExpectedUtility { beta }
            | AggregatorKind::LinearZ { beta, .. }
            | AggregatorKind::ChenEpstein { beta, .. } => Some(beta.at(t)),
            AggregatorKind::Quadratic { beta, .. } => Some(*beta),
            AggregatorKind::Custom(_) => None,
        }
    }

    /// The core `g(t, y, z)`.
    pub fn core(&self, t: f64, y: f64, z: &[f64]) -> f64 {
        match &self.kind {
            AggregatorKind::ExpectedUtility { beta } => -beta.at(t) * y,
            AggregatorKind::LinearZ { beta, gamma } => {
                -beta.at(t) * y - gamma * z.iter().sum::<f64>()
            }
            AggregatorKind::ChenEpstein { beta, k } => {
                let pen: f64 = z
                    .iter()
                    .enumerate()
                    .map(|(i, zi)| k[i.min(k.len() - 1)] * zi.abs())
                    .sum();
                -beta.at(t) * y - pen
            }
            AggregatorKind::Quadratic { beta, alpha } => {
                -beta * y - 0.5 * alpha * z.iter().map(|v| v * v).sum::<f64>()
            }
            AggregatorKind::Custom(c) => (c.core)(t, y, z),
        }
    }

    /// `f(t, c, y, z)`.
    pub fn eval_driver(&self, t: f64, c: f64, y: f64, z: &[f64]) -> Result<f64> {
        Ok(self.felicity.eval(c)? + self.core(t, y, z))
    }

    /// Concave conjugate `H(t, c, ρ, κ) = sup_{y,z} [f - ρ y - κ·z]`; `+∞`
    /// outside the effective domain. The driver is recovered as
    /// `f = inf_{ρ,κ} [H + ρ y + κ·z]`.
    pub fn polar(&self, t: f64, c: f64, rho: f64, kappa: &[f64]) -> Result<f64> {
        let v = self.felicity.eval(c)?;
        let on_rho = |beta: f64| (rho + beta).abs() <= 1e-12 * (1.0 + beta.abs());
        let h = match &self.kind {
            AggregatorKind::ExpectedUtility { beta } => {
                if on_rho(beta.at(t)) && kappa.iter().all(|k| *k == 0.0) {
                    v
                } else {
                    f64::INFINITY
                }
            }
            AggregatorKind::LinearZ { beta, gamma } => {
                let on_kappa = kappa
                    .iter()
                    .all(|k| (k + gamma).abs() <= 1e-12 * (1.0 + gamma.abs()));
                if on_rho(beta.at(t)) && on_kappa {
                    v
                } else {
                    f64::INFINITY
                }
            }
            AggregatorKind::ChenEpstein { beta, k } => {
                let inside = kappa
                    .iter()
                    .enumerate()
                    .all(|(i, q)| q.abs() <= k[i.min(k.len() - 1)]);
                if on_rho(beta.at(t)) && inside {
                    v
                } else {
                    f64::INFINITY
                }
            }
            AggregatorKind::Quadratic { beta, alpha } => {
                let sq: f64 = kappa.iter().map(|q| q * q).sum();
                if !on_rho(*beta) {
                    f64::INFINITY
                } else if *alpha > 0.0 {
                    v + sq / (2.0 * alpha)
                } else if sq == 0.0 {
                    v
                } else {
                    f64::INFINITY
                }
            }
            AggregatorKind::Custom(c) => {
                return Err(Error::Unsupported(format!(
                    "no closed-form polar for custom aggregator {}",
                    c.name
                )))
            }
        };
        Ok(h)
    }
}

/// Structural classification, computed from the kind rather than sampled.
///
/// Norm dependence holds for expected utility, for quadratic aggregators, for
/// scalar κ-ignorance and for `linear_z` only when `γ = 0`; multi-dimensional
/// κ-ignorance is ℓ¹-type and is flagged as not norm dependent.
pub fn check_structure(agg: &Aggregator) -> AggregatorMeta {
    match &agg.kind {
        AggregatorKind::ExpectedUtility { beta } => AggregatorMeta {
            lipschitz_k: Some(beta.sup_abs()),
            h1_h2_norm_dependence: true,
            concave_in_yz: true,
            h3: None,
        },
        AggregatorKind::LinearZ { beta, gamma } => AggregatorMeta {
            // scalar bound; see lipschitz_bound for n > 1
            lipschitz_k: Some(beta.sup_abs().max(gamma.abs())),
            h1_h2_norm_dependence: *gamma == 0.0,
            concave_in_yz: true,
            h3: None,
        },
        AggregatorKind::ChenEpstein { beta, k } => AggregatorMeta {
            lipschitz_k: Some(beta.sup_abs().max(k.iter().map(|v| v * v).sum::<f64>().sqrt())),
            h1_h2_norm_dependence: k.len() == 1,
            concave_in_yz: true,
            h3: None,
        },
        AggregatorKind::Quadratic { .. } => AggregatorMeta {
            lipschitz_k: None,
            h1_h2_norm_dependence: true,
            concave_in_yz: true,
            h3: None,
        },
        AggregatorKind::Custom(c) => c.meta.clone(),
    }
}

/// Lipschitz constant in `(|y|, ‖z‖)` for `z ∈ R^dims`.
///
/// Differs from [`AggregatorMeta::lipschitz_k`] only for `linear_z`, where
/// `|γ Σ z_i| <= |γ| √n ‖z‖`.
pub fn lipschitz_bound(agg: &Aggregator, dims: usize) -> Option<f64> {
    match &agg.kind {
        AggregatorKind::LinearZ { beta, gamma } => Some(beta.sup_abs().max(gamma.abs() * (dims as f64).sqrt())),
        _ => check_structure(agg).lipschitz_k,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ce(k: Vec<f64>) -> Aggregator {
        Aggregator::chen_epstein(Felicity::Log, PiecewiseConstant::zero(), k)
    }

    #[test]
    fn direct_substitution() {
        let f = ce(vec![1.0]).eval_driver(0.3, 1.0, 0.0, &[0.5]).unwrap();
        assert!((f + 0.5).abs() < 1e-15);
        let lin = Aggregator::linear_z(Felicity::Log, PiecewiseConstant::zero(), 1.0);
        let f = lin.eval_driver(0.0, std::f64::consts::E, 0.0, &[1.0]).unwrap();
        assert!(f.abs() < 1e-15);
        let q = Aggregator::quadratic(Felicity::Log, 0.0, 2.0);
        assert!((q.eval_driver(0.0, 1.0, 5.0, &[2.0]).unwrap() + 4.0).abs() < 1e-15);
    }

    #[test]
    fn log_felicity_domain() {
        let agg = ce(vec![1.0]);
        assert!(matches!(agg.eval_driver(0.0, 0.0, 0.0, &[0.0]), Err(Error::Domain(_))));
        assert!(matches!(agg.eval_driver(0.0, -1.0, 0.0, &[0.0]), Err(Error::Domain(_))));
        assert_eq!(Felicity::Zero.eval(-3.0).unwrap(), 0.0);
    }

    #[test]
    fn power_felicity_range() {
        let a = Aggregator::expected_utility(Felicity::Power { p: 1.5 }, PiecewiseConstant::zero());
        assert!(a.validate().is_err());
        let b = Aggregator::expected_utility(Felicity::Power { p: 0.5 }, PiecewiseConstant::zero());
        assert!(b.validate().is_ok());
        assert!((b.eval_driver(0.0, 4.0, 0.0, &[]).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn piecewise_beta() {
        let b = PiecewiseConstant::new(vec![(0.0, 1.0), (0.5, 3.0)]).unwrap();
        assert_eq!(b.at(0.25), 1.0);
        assert_eq!(b.at(0.5), 3.0);
        assert_eq!(b.at(10.0), 3.0);
        assert!((b.integral(0.0, 1.0) - 2.0).abs() < 1e-15);
        assert!((b.integral(0.25, 0.75) - 1.0).abs() < 1e-15);
        assert!(PiecewiseConstant::new(vec![(0.5, 1.0), (0.5, 2.0)]).is_err());
    }

    #[test]
    fn polar_chen_epstein() {
        let agg = ce(vec![1.0]);
        let c = 2.0;
        assert!((agg.polar(0.0, c, 0.0, &[0.5]).unwrap() - c.ln()).abs() < 1e-15);
        assert!(agg.polar(0.0, c, 0.0, &[1.5]).unwrap().is_infinite());
        assert!(agg.polar(0.0, c, 0.3, &[0.0]).unwrap().is_infinite());
    }

    #[test]
    fn polar_matches_grid_search_sup() {
        // sup_z [-|z| - κ z] over z ∈ [-10, 10]
        let sup = |kappa: f64| {
            (0..=20_000)
                .map(|i| -10.0 + i as f64 * 1e-3)
                .map(|z| -z.abs() - kappa * z)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        assert!(sup(0.5).abs() < 1e-12);
        // grows with the search box when |κ| > k
        assert!(sup(1.5) >= 4.99);
        let agg = ce(vec![1.0]);
        assert_eq!(agg.polar(0.0, 1.0, 0.0, &[0.5]).unwrap(), sup(0.5));
    }

    #[test]
    fn polar_linear_is_indicator() {
        let agg = Aggregator::linear_z(Felicity::Log, PiecewiseConstant::constant(0.2), 1.5);
        let c = 3.0;
        assert!((agg.polar(0.0, c, -0.2, &[-1.5]).unwrap() - c.ln()).abs() < 1e-15);
        assert!(agg.polar(0.0, c, -0.2, &[-1.4]).unwrap().is_infinite());
        assert!(agg.polar(0.0, c, 0.2, &[-1.5]).unwrap().is_infinite());
    }

    #[test]
    fn polar_custom_unsupported() {
        let core = CustomCore {
            name: "c".into(),
            core: Arc::new(|_, y, _| -y),
            meta: AggregatorMeta {
                lipschitz_k: Some(1.0),
                h1_h2_norm_dependence: true,
                concave_in_yz: false,
                h3: None,
            },
        };
        let agg = Aggregator::custom(Felicity::Log, core);
        assert!(matches!(agg.polar(0.0, 1.0, 0.0, &[0.0]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn conjugacy_round_trip_on_grid() {
        let agg = Aggregator::chen_epstein(Felicity::Log, PiecewiseConstant::constant(0.1), vec![0.8]);
        let c = 1.7;
        for &(y, z) in &[(0.3, 0.4), (-1.0, -2.0), (2.0, 0.0)] {
            let direct = agg.eval_driver(0.0, c, y, &[z]).unwrap();
            let dual = (0..=160)
                .map(|i| -0.8 + i as f64 * 0.01)
                .map(|kappa| agg.polar(0.0, c, -0.1, &[kappa]).unwrap() - 0.1 * y + kappa * z)
                .fold(f64::INFINITY, f64::min);
            assert!((direct - dual).abs() < 1e-9, "{direct} vs {dual}");
        }
        let q = Aggregator::quadratic(Felicity::Log, 0.0, 2.0);
        let direct = q.eval_driver(0.0, c, 0.0, &[0.7]).unwrap();
        let dual = (0..=4000)
            .map(|i| -4.0 + i as f64 * 0.002)
            .map(|kappa| q.polar(0.0, c, 0.0, &[kappa]).unwrap() + kappa * 0.7)
            .fold(f64::INFINITY, f64::min);
        assert!((direct - dual).abs() < 1e-5);
    }

    #[test]
    fn structure_flags() {
        assert!(check_structure(&ce(vec![1.0])).h1_h2_norm_dependence);
        assert!(!check_structure(&ce(vec![1.0, 1.0])).h1_h2_norm_dependence);
        let q = check_structure(&Aggregator::quadratic(Felicity::Log, 0.0, 1.0));
        assert!(q.h1_h2_norm_dependence && q.lipschitz_k.is_none());
        let eu = Aggregator::expected_utility(Felicity::Log, PiecewiseConstant::zero());
        assert!(check_structure(&eu).h1_h2_norm_dependence);
        let lin = Aggregator::linear_z(Felicity::Log, PiecewiseConstant::zero(), 1.0);
        assert!(!check_structure(&lin).h1_h2_norm_dependence);
    }

    #[test]
    fn l1_penalty_is_not_norm_dependent() {
        // equal Euclidean norm, different driver values
        let agg = ce(vec![1.0, 1.0]);
        let a = agg.core(0.0, 0.0, &[1.0, 0.0]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let b = agg.core(0.0, 0.0, &[h, h]);
        assert!((a - b).abs() > 0.1);
        assert!(!check_structure(&agg).h1_h2_norm_dependence);
    }

    #[test]
    fn h3_requires_positive_lower_bound() {
        let bad = H3Constants {
            l: 1.0,
            k_lower: 0.0,
            m_lip: 1.0,
            c_bound: 1.0,
        };
        assert!(bad.validate().is_err());
    }
}
