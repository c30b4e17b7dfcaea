//! Oscillation decay for solutions with checkerboard coefficients, on a
//! coarse and a refined grid.

use kfp::regdiag::{rough_holder_run, RoughHolderConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => RoughHolderConfig::kolmogorov_checkerboard(),
    };
    let r = rough_holder_run(&cfg)?;
    for level in ["coarse", "refined"] {
        let d = &r.details[level]["details"];
        println!("{level}: oscillation {} ratios {} alpha {}", d["oscillation"], d["ratios"], d["alpha_hat"]);
    }
    println!("{}", r.verdict_line());
    Ok(())
}
