//! Brownian ensembles, the two filtration transforms and the binary cache.

use gsdu::paths::{apply_anticipation, apply_sign_loss, cache, generate_ensemble, FiltrationTag, TimeGrid};

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
}

fn main() -> gsdu::Result<()> {
    let n = 100;
    let g = generate_ensemble(TimeGrid::unit(1.0, n)?, 1, 50_000, 7)?;
    let f = apply_sign_loss(&g)?;
    let (m, v) = moments(&f.level_column(n, 0));
    println!("sign loss     W^F_T: mean {m:+.4} var {v:.4}");

    let wide = generate_ensemble(TimeGrid::new(1.0, n, 2)?, 1, 50_000, 7)?.with_tag(FiltrationTag::F);
    let h = apply_anticipation(&wide)?;
    let (m, v) = moments(&h.level_column(n, 0));
    println!("anticipation  W^H_T: mean {m:+.4} var {v:.4}");

    let file = std::env::temp_dir().join("gsdu-example.paths");
    cache::save(&file, &g)?;
    let back = cache::load(&file, FiltrationTag::G)?;
    println!("cache round trip identical: {}", back.raw_increments() == g.raw_increments());
    std::fs::remove_file(file)?;
    Ok(())
}
