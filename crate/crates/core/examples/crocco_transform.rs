//! Boundary-layer profiles in Crocco variables: hypotheses, the forward map,
//! the residual of the transformed equation and the square-root rescaling.

use kfp::crocco::{self, BoundaryLayerField};
use kfp::Axis;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (t, x) = (Axis::new(0.0, 1.0, 5), Axis::new(0.0, 1.0, 5));
    let tanh = BoundaryLayerField::from_fn(t, x, Axis::new(0.0, 4.0, 801), |_, _| 2.0, |_, y, _| 2.0 * y.tanh(), None)?;
    println!("{}", crocco::check_hypotheses(&tanh).verdict_line());
    let cf = crocco::crocco_forward(&tanh, 41)?;
    let err = (0..cf.w.len())
        .map(|k| (cf.w.values()[k] - (1.0 - cf.w.point(k).x[1].powi(2))).abs())
        .fold(0.0, f64::max);
    println!("tanh profile: max |w - (1 - eta^2)| = {err:.2e}");

    let decaying = BoundaryLayerField::from_fn(
        t,
        x,
        Axis::new(0.0, 4.0, 201),
        |_, t| 2.0 + 0.5 * (-t).exp(),
        |_, y, t| (2.0 + 0.5 * (-t).exp()) * y.tanh(),
        None,
    )?;
    let check = crocco::check_hypotheses(&decaying);
    println!("decaying outer flow: favourable pressure holds = {}", check.details["favourable_pressure"]["holds"]);

    let bench = crocco::manufactured_residual_benchmark(&[17, 33, 65])?;
    println!("manufactured residual orders {}", bench.details["orders"]);

    // Not a flow solution, so the residuals are large; the report lists
    // both signs of the diffusion term next to the unscaled residual.
    let stretched = BoundaryLayerField::from_fn(
        t,
        x,
        Axis::new(0.0, 6.0, 601),
        |x, t| 1.5 + 0.2 * x + 0.1 * t,
        |x, y, t| (1.5 + 0.2 * x + 0.1 * t) * (y / (1.0 + 0.3 * t)).tanh(),
        None,
    )?;
    let (_, report) = crocco::rescale_sqrt_u(&crocco::crocco_forward(&stretched, 41)?)?;
    println!("{}", report.to_json());
    Ok(())
}
