//! The logarithmic convex cutoff: a few values, its table, and the property
//! report. The logarithmic growth ratio near zero is below one by design.

use kfp::gfunc::{probe_g_properties, GFunction, SampleGrid};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let g = GFunction::default();
    println!("kappa = {:.6}", g.kappa());
    for t in [1e-6, 1e-3, 0.125, 0.5, 1.0, 2.0] {
        let v = g.eval(t);
        println!("t = {t:>8}: G = {:>10.6}, G' = {:>12.4}, G'' = {:>12.4}", v.g, v.d1, v.d2);
    }
    let t = 1e-6f64;
    println!("G(t)/(-ln t) = {:.6}, 1 + ln 2/ln t = {:.6}", g.value(t) / -t.ln(), 1.0 + 2f64.ln() / t.ln());

    let report = probe_g_properties(&g, &SampleGrid::default())?;
    println!("{}", report.to_json());
    if let Some(dir) = std::env::args().nth(1) {
        let path = std::path::Path::new(&dir).join("g_table.csv");
        g.write_table(&path, &SampleGrid::default())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
