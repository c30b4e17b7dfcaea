//! The potentials of the kernel and their `L^p -> L^q` bounds, measured on a
//! corpus of bumps, indicators and random sums.

use kfp::potential::{target_exponent, verify_lp_lq, LpProbeConfig};
use kfp::OperatorStructure;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let s = OperatorStructure::kolmogorov();
    for p in [1.5, 2.0, 3.0] {
        println!(
            "p = {p}: q for the potential {:.4}, for its gradient {:.4}",
            target_exponent(&s, p, 0)?,
            target_exponent(&s, p, 1)?
        );
    }
    for gradient in [false, true] {
        let cfg = LpProbeConfig { nt: 25, nx: 25, gradient, ..Default::default() };
        let r = verify_lp_lq(&s, &cfg)?;
        println!("{}", r.to_json());
    }
    Ok(())
}
