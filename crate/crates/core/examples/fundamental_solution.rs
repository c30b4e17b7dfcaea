//! The Gaussian kernel: covariance, pointwise values, mass, the semigroup
//! identity and the sampled size bounds.

use kfp::fundsol;
use kfp::{GroupPoint, OperatorStructure};
use nalgebra::DVector;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let s = OperatorStructure::kolmogorov();
    for t in [0.1, 0.5, 1.0] {
        let c = fundsol::covariance(&s, t, false)?;
        println!("t = {t}: C = {:?}, det = {:.6e} (t^4/12 = {:.6e})", c.c.as_slice(), c.det, t.powi(4) / 12.0);
    }

    let origin = GroupPoint::origin(2);
    let k = fundsol::gamma1(&s, &GroupPoint::new(&[0.0, 0.0], 1.0), &origin);
    println!("Gamma_1((0,0),1; 0) = {:.12} (sqrt 3 / 2 pi = {:.12})", k.value, 3f64.sqrt() / (2.0 * std::f64::consts::PI));
    println!("mass at t = 0.5: {:.10}", fundsol::kernel_mass(&s, 0.5)?);

    let ck = fundsol::chapman_kolmogorov_check(&s, 0.25, 0.25, 6.0, &DVector::from_vec(vec![0.3, -0.2]))?;
    println!("semigroup relative error {:.2e}", ck.get_f64("relative_error").unwrap_or(f64::NAN));

    let z = GroupPoint::new(&[0.3, 0.2], 1.0);
    for h in [0.04, 0.02, 0.01] {
        println!("h = {h}: |Y Gamma - Laplacian Gamma| = {:.3e}", fundsol::pde_residual(&s, &z, h).abs());
    }

    let bounds = fundsol::verify_kernel_bounds(&s, 10_000, 1.0, 42)?;
    println!("{}", bounds.to_json());
    Ok(())
}
