//! The cutoff, level-set, Poincaré, Sobolev, sup and oscillation probes run
//! on a smooth field built from the kernel.

use kfp::fundsol::gamma1;
use kfp::regdiag::{self, Center, CutoffConfig, HolderConfig, LevelSetConfig, LinfConfig, PoincareConfig, SobolevConfig};
use kfp::{FnField, GroupPoint, OperatorStructure};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let s = OperatorStructure::kolmogorov();
    let pole = GroupPoint::new(&[0.0, 0.0], -1.0);
    let u = FnField(|z: &GroupPoint| gamma1(&s, z, &pole).value);

    let cutoff = regdiag::build_cutoff(&s, CutoffConfig::default(), 33)?;
    println!("{}", cutoff.report.verdict_line());

    let reports = [
        regdiag::level_set_probe(&s, &u, &LevelSetConfig::new(2, 0.5))?,
        regdiag::poincare_probe(&s, &u, None, &PoincareConfig::new(2, CutoffConfig { r: 0.04, ..Default::default() }, 0.05))?,
        regdiag::sobolev_probe(&s, &u, None, &SobolevConfig { center: Center::origin(2), rho: 0.5, r: 0.75, q: 4.0, resolution: 17 })?,
        regdiag::linf_probe(&s, &u, &LinfConfig { center: Center::origin(2), r: 0.5, p: 1.0, resolution: 21 })?,
        regdiag::holder_estimate(&s, &u, &HolderConfig { center: Center::origin(2), r0: 0.4, theta: 0.5, rungs: 4, resolution: 17 })?,
    ];
    for r in &reports {
        println!("{}", r.verdict_line());
    }
    Ok(())
}
