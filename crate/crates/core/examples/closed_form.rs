//! Analytic linear-z values along `W = 0` and the anticipation gap.

use gsdu::aggregators::PiecewiseConstant;
use gsdu::closed_form::{gap_h_minus_f_at_zero, u_f_linear, u_g_linear, LinearParams};

fn main() -> gsdu::Result<()> {
    let p = LinearParams::new(PiecewiseConstant::zero(), 1.0, 1.0)?;
    println!("   t      U^F      V^F      U^G");
    for i in 0..=4 {
        let t = 0.25 * i as f64;
        let f = u_f_linear(t, 0.0, &p)?;
        let g = u_g_linear(t, 0.0, 0.0, &p)?;
        println!("{t:5.2} {:+.5} {:+.5} {:+.5}", f.u, f.v, g.u);
    }
    let gap = gap_h_minus_f_at_zero(&p);
    println!("|U^H_0 - U^F_0| = {:.6}", gap.magnitude);
    Ok(())
}
