//! Analytic values and intensities for consumption plans `c_t = exp(a W^F_t)`
//! under the three filtrations.
//!
//! `a = 1` is the plan `b`, `a = -1` the plan `b'`. Every formula here is
//! linear or quadratic in `a`, so the plan slope is carried as a parameter.

mod kernel;
mod quadrature;

use serde::Serialize;

pub use kernel::DiscountKernel;
pub use quadrature::{adaptive_simpson, norm_cdf, norm_pdf};

use crate::aggregators::PiecewiseConstant;
use crate::error::{invalid, Result};
use crate::paths::sign;

/// Absolute tolerance of the Gaussian double integrals.
pub const QUAD_TOL: f64 = 1e-9;

/// Parameters of `v(c) - β(s) y - γ z` with `v = log`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub kernel: DiscountKernel,
    pub gamma: f64,
    pub horizon: f64,
    /// Plan slope `a`.
    pub slope: f64,
}

impl LinearParams {
    pub fn new(beta: PiecewiseConstant, gamma: f64, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        if !gamma.is_finite() {
            return Err(invalid("gamma must be finite"));
        }
        Ok(Self {
            kernel: DiscountKernel::new(beta),
            gamma,
            horizon,
            slope: 1.0,
        })
    }

    pub fn with_slope(mut self, slope: f64) -> Self {
        self.slope = slope;
        self
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= 0.0 && t <= self.horizon) {
            return Err(invalid(format!("t = {t} outside [0, {}]", self.horizon)));
        }
        Ok(())
    }
}

/// A value and its intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Value {
    pub u: f64,
    pub v: f64,
}

/// Coarse-filtration value: `a [(∫_t^T Γ) w - γ ∫_t^T (s-t) Γ]`, intensity `a ∫_t^T Γ`.
pub fn u_f_linear(t: f64, w: f64, p: &LinearParams) -> Result<Value> {
    p.check_time(t)?;
    let big_t = p.horizon;
    let i0 = p.kernel.int_gamma(t, t, big_t);
    let i1 = p.kernel.int_lin_gamma(t, t, big_t);
    Ok(Value {
        u: p.slope * (i0 * w - p.gamma * i1),
        v: p.slope * i0,
    })
}

/// `U^G - U^F = 2γa ∫_t^T Φ(-(w_g - γ(u-t))/√(u-t)) (∫_u^T Γ_t^s ds) du`,
/// integrated in `v = √(u - t)`.
pub fn g_gap(t: f64, w_g: f64, p: &LinearParams) -> Result<f64> {
    p.check_time(t)?;
    if p.gamma == 0.0 || t == p.horizon {
        return Ok(0.0);
    }
    let big_t = p.horizon;
    let gam = p.gamma;
    let f = |v: f64| {
        if v == 0.0 {
            return 0.0;
        }
        let u = t + v * v;
        norm_cdf(-(w_g - gam * v * v) / v) * p.kernel.int_gamma(t, u, big_t) * 2.0 * v
    };
    let inner = adaptive_simpson(&f, 0.0, (big_t - t).sqrt(), QUAD_TOL / (2.0 * gam.abs()))?;
    Ok(2.0 * gam * p.slope * inner)
}

/// Fine value under sign loss.
pub fn u_g_linear(t: f64, w_g: f64, w_f: f64, p: &LinearParams) -> Result<Value> {
    let base = u_f_linear(t, w_f, p)?;
    let gap = g_gap(t, w_g, p)?;
    let big_t = p.horizon;
    let gam = p.gamma;
    let dgap = if gam == 0.0 || t == big_t {
        0.0
    } else {
        let f = |v: f64| {
            let u = t + v * v;
            let arg = if v == 0.0 {
                if w_g == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (w_g - gam * v * v) / v
            };
            norm_pdf(arg) * p.kernel.int_gamma(t, u, big_t)
        };
        -4.0 * gam * p.slope * adaptive_simpson(&f, 0.0, (big_t - t).sqrt(), QUAD_TOL / (4.0 * gam.abs()))?
    };
    Ok(Value {
        u: base.u + gap,
        v: base.v * sign(w_g) + dgap,
    })
}

/// A coarse path on a uniform grid starting at 0.
#[derive(Debug, Clone, Copy)]
pub struct GridPath<'a> {
    pub dt: f64,
    pub values: &'a [f64],
}

impl GridPath<'_> {
    fn index(&self, t: f64) -> Result<usize> {
        let x = t / self.dt;
        let k = x.round();
        if (x - k).abs() > 1e-9 * (1.0 + x) {
            return Err(invalid(format!("time {t} is not on the path grid")));
        }
        let k = k as usize;
        if k >= self.values.len() {
            return Err(invalid(format!("path is missing the segment up to {t}")));
        }
        Ok(k)
    }

    /// Trapezoid `∫_a^b W_s Γ(t, s) ds` on the grid.
    fn weighted_integral(&self, kernel: &DiscountKernel, t: f64, a: f64, b: f64) -> Result<f64> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let mut acc = 0.0;
        for k in ia..ib {
            let (s0, s1) = (k as f64 * self.dt, (k + 1) as f64 * self.dt);
            acc += 0.5
                * self.dt
                * (self.values[k] * kernel.gamma(t, s0) + self.values[k + 1] * kernel.gamma(t, s1));
        }
        Ok(acc)
    }
}

/// Value under the time-compressed filtration `H_t = F_{2t}`.
///
/// For `t ≥ T/2` the plan is fully revealed and `U = a ∫_t^T W Γ`, `V = 0`.
/// Otherwise `U = a[∫_t^{2t} W Γ + W_{2t} ∫_{2t}^T Γ - γ√2 ∫_{2t}^T (s/2 - t) Γ]`
/// and `V = a √2 ∫_{2t}^T Γ`.
pub fn u_h_linear(t: f64, path: &GridPath, p: &LinearParams) -> Result<Value> {
    p.check_time(t)?;
    let big_t = p.horizon;
    let k = &p.kernel;
    let a = p.slope;
    if 2.0 * t >= big_t {
        return Ok(Value {
            u: a * path.weighted_integral(k, t, t, big_t)?,
            v: 0.0,
        });
    }
    let w2t = path.values[path.index(2.0 * t)?];
    let near = path.weighted_integral(k, t, t, 2.0 * t)?;
    let far = k.int_gamma(t, 2.0 * t, big_t);
    // ∫ (s/2 - t) Γ = (∫ (s - t) Γ - t ∫ Γ) / 2
    let drift = 0.5 * (k.int_lin_gamma(t, 2.0 * t, big_t) - t * far);
    Ok(Value {
        u: a * (near + w2t * far - p.gamma * std::f64::consts::SQRT_2 * drift),
        v: a * std::f64::consts::SQRT_2 * far,
    })
}

/// Filtration-specific state for the closed forms.
#[derive(Debug, Clone, Copy)]
pub enum States<'a> {
    F { w_f: f64 },
    G { w_g: f64, w_f: f64 },
    H { path: GridPath<'a> },
}

/// κ-ignorance `v - βy - k|z|`. The intensity never changes sign along the
/// plan, so the value is the linear one with `γ = k sgn(a)`; under sign loss
/// the value coincides with the coarse one and the intensity picks up
/// `sgn(W^G)`.
pub fn u_chen_epstein(
    states: States,
    t: f64,
    k: f64,
    beta: &PiecewiseConstant,
    horizon: f64,
    slope: f64,
) -> Result<Value> {
    if !(k >= 0.0) {
        return Err(invalid(format!("k must be non-negative, got {k}")));
    }
    let p = LinearParams::new(beta.clone(), k * sign(slope), horizon)?.with_slope(slope);
    match states {
        States::F { w_f } => u_f_linear(t, w_f, &p),
        States::G { w_g, w_f } => {
            let f = u_f_linear(t, w_f, &p)?;
            Ok(Value {
                u: f.u,
                v: f.v * sign(w_g),
            })
        }
        States::H { path } => u_h_linear(t, &path, &p),
    }
}

/// Quadratic-aggregator value; under `H` the intensity from the published
/// display is carried alongside the one implied by the value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadraticValue {
    pub u: f64,
    pub v: f64,
    pub v_published: Option<f64>,
}

impl QuadraticValue {
    pub fn discrepancy(&self) -> bool {
        self.v_published.is_some_and(|p| (p - self.v).abs() > 1e-12)
    }
}

/// `v(c) - (γ/2) z²` with `v = log`, plan slope `a`.
///
/// `F, G`: `U = a(T-t)W^F_t - γa²(T-t)³/6`. `H`, `t < T/2`:
/// `U = a ∫_t^{2t} W + a(T-2t)W_{2t} - γa²(T-2t)³/6`, so `V^H = a√2(T-2t)`;
/// for `t ≥ T/2`, `U = a ∫_t^T W` and `V^H = 0`.
pub fn u_quadratic(states: States, t: f64, gamma: f64, horizon: f64, slope: f64) -> Result<QuadraticValue> {
    if !(gamma > 0.0) {
        return Err(invalid(format!("gamma must be positive, got {gamma}")));
    }
    if !(t >= 0.0 && t <= horizon) {
        return Err(invalid(format!("t = {t} outside [0, {horizon}]")));
    }
    let a = slope;
    let r = horizon - t;
    match states {
        States::F { w_f } => Ok(QuadraticValue {
            u: a * r * w_f - gamma * a * a * r.powi(3) / 6.0,
            v: a * r,
            v_published: None,
        }),
        States::G { w_g, w_f } => Ok(QuadraticValue {
            u: a * r * w_f - gamma * a * a * r.powi(3) / 6.0,
            v: a * r * sign(w_g),
            v_published: None,
        }),
        States::H { path } => {
            let flat = DiscountKernel::flat();
            let published = Some(std::f64::consts::SQRT_2 * a * r);
            if 2.0 * t >= horizon {
                return Ok(QuadraticValue {
                    u: a * path.weighted_integral(&flat, t, t, horizon)?,
                    v: 0.0,
                    v_published: published,
                });
            }
            let rr = horizon - 2.0 * t;
            let w2t = path.values[path.index(2.0 * t)?];
            let near = path.weighted_integral(&flat, t, t, 2.0 * t)?;
            Ok(QuadraticValue {
                u: a * near + a * rr * w2t - gamma * a * a * rr.powi(3) / 6.0,
                v: std::f64::consts::SQRT_2 * a * rr,
                v_published: published,
            })
        }
    }
}

/// `U₀^H - U₀^F` for the linear aggregator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HfGap {
    /// `|aγ| (1 - √2/2) ∫_0^T s Γ_0^s ds`.
    pub magnitude: f64,
    /// Obtained by subtracting the coarse value from the fine one.
    pub from_subtraction: f64,
    /// Sign as printed alongside the formulas.
    pub from_published: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SignVerdict {
    pub mc_gap: f64,
    pub mc_stderr: f64,
    pub sign: f64,
    /// `|gap| ≥ 5 stderr`.
    pub confident: bool,
    pub matches_subtraction: bool,
    pub matches_published: bool,
    pub signed_value: f64,
}

impl HfGap {
    /// Settles the sign with a Monte Carlo estimate.
    pub fn resolve(&self, mc_gap: f64, mc_stderr: f64) -> SignVerdict {
        let s = sign(mc_gap);
        SignVerdict {
            mc_gap,
            mc_stderr,
            sign: s,
            confident: mc_gap.abs() >= 5.0 * mc_stderr && mc_gap != 0.0,
            matches_subtraction: s == sign(self.from_subtraction),
            matches_published: s == sign(self.from_published),
            signed_value: s * self.magnitude,
        }
    }
}

pub fn gap_h_minus_f_at_zero(p: &LinearParams) -> HfGap {
    let m = (1.0 - std::f64::consts::FRAC_1_SQRT_2) * p.kernel.int_lin_gamma(0.0, 0.0, p.horizon);
    let signed = p.slope * p.gamma * m;
    HfGap {
        magnitude: signed.abs(),
        from_subtraction: signed,
        from_published: -signed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(gamma: f64) -> LinearParams {
        LinearParams::new(PiecewiseConstant::zero(), gamma, 1.0).unwrap()
    }

    #[test]
    fn f_value_flat_discount() {
        let v = u_f_linear(0.0, 0.3, &unit(1.0)).unwrap();
        assert!((v.u - (0.3 - 0.5)).abs() < 1e-15);
        assert!((v.v - 1.0).abs() < 1e-15);
        let end = u_f_linear(1.0, 0.7, &unit(1.0)).unwrap();
        assert_eq!((end.u, end.v), (0.0, 0.0));
        assert!(u_f_linear(1.5, 0.0, &unit(1.0)).is_err());
    }

    #[test]
    fn g_gap_at_origin() {
        let g = g_gap(0.0, 0.0, &unit(1.0)).unwrap();
        // 2 ∫_0^1 Φ(√u)(1-u) du by a fixed-step rule in v = √u
        let n = 200_000;
        let h = 1.0 / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let v = (i as f64 + 0.5) * h;
            acc += norm_cdf(v) * (1.0 - v * v) * 2.0 * v * h;
        }
        assert!((g - 2.0 * acc).abs() < 1e-8, "{g} vs {}", 2.0 * acc);
        assert!((g - 0.6987).abs() < 5e-4);
    }

    #[test]
    fn g_gap_limits() {
        assert_eq!(g_gap(0.2, 0.1, &unit(0.0)).unwrap(), 0.0);
        assert!(g_gap(0.0, 40.0, &unit(1.0)).unwrap().abs() < 1e-9);
    }

    #[test]
    fn g_intensity_is_derivative_of_value() {
        let p = unit(0.8);
        let (t, wg, wf) = (0.3, 0.4, 0.1);
        let h = 1e-5;
        let du = (u_g_linear(t, wg + h, wf, &p).unwrap().u - u_g_linear(t, wg - h, wf, &p).unwrap().u) / (2.0 * h);
        let v = u_g_linear(t, wg, wf, &p).unwrap().v;
        // V^G = ∂_{w_f} U sgn(w_g) + ∂_{w_g} U
        let vf = u_f_linear(t, wf, &p).unwrap().v;
        assert!((v - (vf + du)).abs() < 1e-6);
    }

    #[test]
    fn h_value_at_origin() {
        let path = [0.0; 11];
        let gp = GridPath { dt: 0.1, values: &path };
        let v = u_h_linear(0.0, &gp, &unit(1.0)).unwrap();
        assert!((v.u + 2f64.sqrt() / 4.0).abs() < 1e-15);
        assert!((v.v - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(u_h_linear(0.0, &gp, &unit(0.0)).unwrap().u, 0.0);
    }

    #[test]
    fn h_branches_meet_at_half_horizon() {
        let vals: Vec<f64> = (0..=10).map(|k| (k as f64 * 0.7).sin()).collect();
        let gp = GridPath { dt: 0.1, values: &vals };
        let p = LinearParams::new(PiecewiseConstant::constant(0.3), 1.0, 1.0).unwrap();
        let upper = u_h_linear(0.5, &gp, &p).unwrap();
        // the t < T/2 expression evaluated at 2t = T
        let near = gp.weighted_integral(&p.kernel, 0.5, 0.5, 1.0).unwrap();
        assert!((upper.u - near).abs() < 1e-15);
        let below = u_h_linear(0.4, &gp, &p).unwrap();
        assert!(below.v > 0.0 && upper.v == 0.0);
    }

    #[test]
    fn h_rejects_short_path() {
        let vals = [0.0; 3];
        let gp = GridPath { dt: 0.1, values: &vals };
        assert!(u_h_linear(0.2, &gp, &unit(1.0)).is_err());
    }

    #[test]
    fn chen_epstein_neutral_under_sign_loss() {
        let beta = PiecewiseConstant::zero();
        let f = u_chen_epstein(States::F { w_f: 0.0 }, 0.0, 1.0, &beta, 1.0, 1.0).unwrap();
        let g = u_chen_epstein(States::G { w_g: -0.2, w_f: 0.0 }, 0.0, 1.0, &beta, 1.0, 1.0).unwrap();
        assert!((f.u + 0.5).abs() < 1e-15);
        assert_eq!(f.u, g.u);
        assert_eq!(f.v.abs(), g.v.abs());
        let zero = u_chen_epstein(States::F { w_f: 0.0 }, 0.0, 0.0, &beta, 1.0, 1.0).unwrap();
        assert_eq!(zero.u, 0.0);
    }

    #[test]
    fn chen_epstein_penalty_does_not_flip_with_plan() {
        let beta = PiecewiseConstant::zero();
        let b = u_chen_epstein(States::F { w_f: 0.0 }, 0.0, 1.0, &beta, 1.0, 1.0).unwrap();
        let bp = u_chen_epstein(States::F { w_f: 0.0 }, 0.0, 1.0, &beta, 1.0, -1.0).unwrap();
        assert_eq!(b.u, bp.u);
    }

    #[test]
    fn quadratic_values() {
        let path = [0.0; 5];
        let gp = GridPath { dt: 0.25, values: &path };
        for s in [States::F { w_f: 0.0 }, States::G { w_g: 0.1, w_f: 0.0 }, States::H { path: gp }] {
            let q = u_quadratic(s, 0.0, 1.0, 1.0, 1.0).unwrap();
            assert!((q.u + 1.0 / 6.0).abs() < 1e-15);
        }
        let h = u_quadratic(States::H { path: gp }, 0.25, 1.0, 1.0, 1.0).unwrap();
        assert!((h.v - 2f64.sqrt() * 0.5).abs() < 1e-15);
        assert!(h.discrepancy());
        let end = u_quadratic(States::F { w_f: 3.0 }, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!((end.u, end.v), (0.0, 0.0));
    }

    #[test]
    fn hf_gap_magnitude_and_sign() {
        let g = gap_h_minus_f_at_zero(&unit(1.0));
        assert!((g.magnitude - (1.0 - 2f64.sqrt() / 2.0) / 2.0).abs() < 1e-15);
        assert!(g.from_subtraction > 0.0 && g.from_published < 0.0);
        let gp = gap_h_minus_f_at_zero(&unit(1.0).with_slope(-1.0));
        assert!(gp.from_subtraction < 0.0);
        assert_eq!(gap_h_minus_f_at_zero(&unit(0.0)).magnitude, 0.0);
        let v = g.resolve(0.146, 0.001);
        assert!(v.confident && v.matches_subtraction && !v.matches_published);
    }

    #[test]
    fn subtraction_matches_formulas() {
        let p = unit(1.0);
        let path = [0.0; 3];
        let gp = GridPath { dt: 0.5, values: &path };
        let direct = u_h_linear(0.0, &gp, &p).unwrap().u - u_f_linear(0.0, 0.0, &p).unwrap().u;
        assert!((direct - gap_h_minus_f_at_zero(&p).from_subtraction).abs() < 1e-15);
    }
}
