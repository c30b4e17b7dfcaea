//! Finite differences for the equation with rough coefficients: a solve with
//! a random cellwise matrix, the two convergence benchmarks and the explicit
//! step-size limit.

use kfp::kfpsolve::{self, Data, KernelBenchmark, LowerOrder, RoughPattern, Scheme, SolverConfig};
use kfp::{Axis, OperatorStructure};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let s = OperatorStructure::kolmogorov();
    let axes = vec![Axis::new(-1.0, 1.0, 33), Axis::new(-1.0, 1.0, 33)];
    let coeff = kfpsolve::make_rough_coefficients(&s, &axes, RoughPattern::RandomCellwise, 4.0, 8, LowerOrder::default(), 11)?;

    for scheme in [Scheme::ExplicitUpwindDiffusion, Scheme::ImplicitDiffusionUpwindDrift] {
        let mut cfg = SolverConfig::new(0.0, 0.5, 3, axes.clone());
        cfg.scheme = scheme;
        let data = Data { boundary: &|z| z.x[0] + 0.5 * z.x[1], source: None };
        let sol = kfpsolve::solve(&s, &coeff, &cfg, data)?;
        let v = sol.field.values();
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        println!("{scheme:?}: {} steps of {:.2e} (limit {:.2e}), range [{lo:.4}, {hi:.4}]", sol.steps, sol.dt, sol.dt_limit);
    }

    let mut too_big = SolverConfig::new(0.0, 0.5, 3, axes.clone());
    too_big.dt = Some(0.05);
    let err = kfpsolve::solve(&s, &coeff, &too_big, Data { boundary: &|_| 0.0, source: None }).unwrap_err();
    println!("rejected: {err}");

    let kernel = kfpsolve::kernel_benchmark(&s, &KernelBenchmark { levels: vec![17, 33, 65], ..Default::default() })?;
    println!("kernel benchmark orders {}", kernel.details["orders"]);
    let heat = kfpsolve::heat_benchmark(&[17, 33, 65], Scheme::ExplicitUpwindDiffusion)?;
    println!("heat benchmark orders {}", heat.details["orders"]);
    Ok(())
}
