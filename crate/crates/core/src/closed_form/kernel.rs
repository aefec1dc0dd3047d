use crate::aggregators::PiecewiseConstant;

/// Below this `|βL|` the exponential integrals switch to their Taylor series.
const SERIES_CUTOFF: f64 = 1e-4;

/// `Γ(t, s) = exp(-∫_t^s β(u) du)` for piecewise-constant `β`, with the
/// moment integrals used by the closed forms evaluated exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscountKernel {
    beta: PiecewiseConstant,
}

/// `∫_0^L e^{-βx} dx`.
fn i0(beta: f64, len: f64) -> f64 {
    let x = beta * len;
    if x.abs() < SERIES_CUTOFF {
        len * (1.0 - x / 2.0 + x * x / 6.0 - x * x * x / 24.0)
    } else {
        -(-x).exp_m1() / beta
    }
}

/// `∫_0^L x e^{-βx} dx`.
fn i1(beta: f64, len: f64) -> f64 {
    let x = beta * len;
    if x.abs() < SERIES_CUTOFF {
        len * len * (0.5 - x / 3.0 + x * x / 8.0 - x * x * x / 30.0)
    } else {
        (1.0 - (-x).exp() * (1.0 + x)) / (beta * beta)
    }
}

impl DiscountKernel {
    pub fn new(beta: PiecewiseConstant) -> Self {
        Self { beta }
    }

    pub fn flat() -> Self {
        Self::new(PiecewiseConstant::zero())
    }

    pub fn beta(&self) -> &PiecewiseConstant {
        &self.beta
    }

    pub fn gamma(&self, t: f64, s: f64) -> f64 {
        (-self.beta.integral(t, s)).exp()
    }

    /// `(∫_a^b Γ(a, s) ds, ∫_a^b (s - a) Γ(a, s) ds)`.
    fn moments_from(&self, a: f64, b: f64) -> (f64, f64) {
        let mut m0 = 0.0;
        let mut m1 = 0.0;
        let mut log_g = 0.0_f64;
        for (p0, p1, beta) in self.beta.pieces(a, b) {
            let len = p1 - p0;
            let g = (-log_g).exp();
            let j0 = i0(beta, len);
            m0 += g * j0;
            m1 += g * (i1(beta, len) + (p0 - a) * j0);
            log_g += beta * len;
        }
        (m0, m1)
    }

    /// `∫_a^b Γ(t, s) ds`.
    pub fn int_gamma(&self, t: f64, a: f64, b: f64) -> f64 {
        if !(b > a) {
            return 0.0;
        }
        self.gamma(t, a) * self.moments_from(a, b).0
    }

    /// `∫_a^b (s - t) Γ(t, s) ds`.
    pub fn int_lin_gamma(&self, t: f64, a: f64, b: f64) -> f64 {
        if !(b > a) {
            return 0.0;
        }
        let (m0, m1) = self.moments_from(a, b);
        self.gamma(t, a) * (m1 + (a - t) * m0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_piece() -> DiscountKernel {
        DiscountKernel::new(PiecewiseConstant::new(vec![(0.0, 0.3), (0.4, -0.2), (0.7, 1.1)]).unwrap())
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        let n = 20_000;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn flat_kernel_moments() {
        let k = DiscountKernel::flat();
        assert!((k.int_gamma(0.0, 0.0, 1.0) - 1.0).abs() < 1e-15);
        assert!((k.int_lin_gamma(0.0, 0.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((k.int_lin_gamma(0.25, 0.5, 1.0) - (0.75f64.powi(2) - 0.25f64.powi(2)) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn moments_match_quadrature_across_breaks() {
        let k = two_piece();
        let t = 0.1;
        let q0 = simpson(|s| k.gamma(t, s), 0.2, 1.3);
        let q1 = simpson(|s| (s - t) * k.gamma(t, s), 0.2, 1.3);
        assert!((k.int_gamma(t, 0.2, 1.3) - q0).abs() < 1e-6);
        assert!((k.int_lin_gamma(t, 0.2, 1.3) - q1).abs() < 1e-6);
    }

    #[test]
    fn series_branch_is_continuous() {
        // either side of the cutoff
        let (lo, hi) = (0.999 * SERIES_CUTOFF, 1.001 * SERIES_CUTOFF);
        assert!((i0(lo, 1.0) - i0(hi, 1.0)).abs() < 1e-6);
        assert!((i1(lo, 1.0) - i1(hi, 1.0)).abs() < 1e-6);
        assert!((i0(1e-9, 2.0) - 2.0).abs() < 1e-8);
        assert!((i1(1e-9, 2.0) - 2.0).abs() < 1e-8);
    }

    #[test]
    fn gamma_identity_at_equal_times() {
        assert_eq!(two_piece().gamma(0.5, 0.5), 1.0);
    }
}
